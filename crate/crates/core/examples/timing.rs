use innerctl_core::check::{default_grid, pretrain_tasks};
use innerctl_core::expert::{generate_dataset, ExpertConfig};
use innerctl_core::seqmodel::*;
use std::time::Instant;

fn main() {
    let cfg = default_grid();
    let tasks = pretrain_tasks(&cfg);
    let t0 = Instant::now();
    let ds = generate_dataset(cfg, &tasks, &ExpertConfig { epsilon: 0.0, trajectories_per_task: 60, seed: 5 });
    println!("gen 960 trajs: {:.2?} mean len {:.1}", t0.elapsed(), ds.total_steps() as f64 / ds.trajectories.len() as f64);
    let mc = SeqModelConfig::desk_default(cfg.obs_dim(), 4);
    let t0 = Instant::now();
    let steps = 10;
    let (_store, _model) = pretrain(&ds, mc, &PretrainConfig { steps, batch: 32, lr: 3e-4, weight_decay: 0.1, warmup: 100 }, 7, |si| {
        if si.step == 0 { println!("first loss {:.2}", si.loss); }
    }).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("{} steps batch 32: {:.2}s  ({:.0} ms/step)", steps, dt, dt / steps as f64 * 1000.0);
}
