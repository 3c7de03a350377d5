//! Numerical verification battery.
//!
//! The checks here are the repo's standing oracles: finite-difference
//! gradient checks over every tape primitive, the Adam quadratic-bowl test,
//! the hand transition table for the environment, and the expert optimality
//! sweep. Unit tests, the CLI `verify` subcommand, and the acceptance suite
//! all call through this module so there is a single authority for each
//! oracle.

use crate::expert::{self, ExpertConfig};
use crate::grid::{self, Action, Cause, Cell, EnvState, GridConfig, Task};
use crate::nn::layers::GruCell;
use crate::nn::tape::{finite_diff_check, Tape};
use crate::nn::{Adam, AdamConfig, ParamStore, Tensor};
use crate::util::{rng_for, Rng};
use rand::Rng as _;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub observed: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckResult {
    fn err(name: &str, observed: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            observed,
            tolerance,
            pass: observed < tolerance,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {}: observed {:.3e} (tolerance {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.observed,
            self.tolerance
        )
    }
}

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Central finite-difference checks over every primitive, `shapes` random
/// shapes each, all in f64.
pub fn gradcheck_battery(shapes: usize, seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(CheckResult::err(
        "grad/affine",
        (0..shapes).map(|i| gradcheck_affine(seed, i as u64)).fold(0.0, f64::max),
        FD_TOL,
    ));
    out.push(CheckResult::err(
        "grad/layernorm",
        (0..shapes).map(|i| gradcheck_layernorm(seed, i as u64)).fold(0.0, f64::max),
        FD_TOL,
    ));
    out.push(CheckResult::err(
        "grad/causal_attention",
        (0..shapes).map(|i| gradcheck_attention(seed, i as u64)).fold(0.0, f64::max),
        FD_TOL,
    ));
    out.push(CheckResult::err(
        "grad/embed_rows",
        (0..shapes).map(|i| gradcheck_embed(seed, i as u64)).fold(0.0, f64::max),
        FD_TOL,
    ));
    out.push(CheckResult::err(
        "grad/gru_3step",
        (0..shapes).map(|i| gradcheck_gru(seed, i as u64)).fold(0.0, f64::max),
        FD_TOL,
    ));
    out.push(CheckResult::err(
        "grad/softmax_xent",
        (0..shapes).map(|i| gradcheck_softmax_xent(seed, i as u64)).fold(0.0, f64::max),
        1e-6,
    ));
    out.push(CheckResult::err(
        "grad/bernoulli_xent",
        (0..shapes).map(|i| gradcheck_bernoulli(seed, i as u64)).fold(0.0, f64::max),
        FD_TOL,
    ));
    out.push(CheckResult::err(
        "grad/unary_chain",
        (0..shapes).map(|i| gradcheck_unary_chain(seed, i as u64)).fold(0.0, f64::max),
        FD_TOL,
    ));
    out.push(CheckResult::err(
        "grad/integrator_minclamp",
        (0..shapes).map(|i| gradcheck_integrator(seed, i as u64)).fold(0.0, f64::max),
        FD_TOL,
    ));
    out.push(CheckResult::err(
        "grad/composite_2layer",
        (0..shapes).map(|i| gradcheck_composite(seed, i as u64)).fold(0.0, f64::max),
        FD_TOL,
    ));
    out
}

fn mix_loss(tape: &mut Tape<'_, f64>, y: crate::nn::Var, rng: &mut Rng) -> crate::nn::Var {
    // Project the output onto random constants so every element matters.
    let (r, c) = tape.shape(y);
    let coef: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cv = tape.constant(Tensor::from_vec(r, c, coef));
    let m = tape.mul(y, cv);
    tape.sum_all(m)
}

fn gradcheck_affine(seed: u64, i: u64) -> f64 {
    let mut rng = rng_for(seed, "gc-affine", i);
    let (m, k, n) = (
        rng.gen_range(1..5usize),
        rng.gen_range(1..8usize),
        rng.gen_range(1..8usize),
    );
    let mut store: ParamStore<f64> = ParamStore::new();
    let x = store.add("x", Tensor::randn(m, k, 1.0, &mut rng));
    let w = store.add("w", Tensor::randn(k, n, 1.0, &mut rng));
    let b = store.add("b", Tensor::randn(1, n, 1.0, &mut rng));
    let loss_rng = rng_for(seed, "gc-affine-loss", i);
    finite_diff_check(&mut store, &[x, w, b], FD_H, |tape| {
        let xv = tape.param(x);
        let wv = tape.param(w);
        let bv = tape.param(b);
        let y = tape.affine(xv, wv, bv);
        mix_loss(tape, y, &mut loss_rng.clone())
    })
}

fn gradcheck_layernorm(seed: u64, i: u64) -> f64 {
    let mut rng = rng_for(seed, "gc-ln", i);
    let (m, n) = (rng.gen_range(1..4usize), rng.gen_range(2..10usize));
    let mut store: ParamStore<f64> = ParamStore::new();
    let x = store.add("x", Tensor::randn(m, n, 1.0, &mut rng));
    let g = store.add("g", Tensor::randn(1, n, 0.5, &mut rng));
    let b = store.add("b", Tensor::randn(1, n, 0.5, &mut rng));
    let loss_rng = rng_for(seed, "gc-ln-loss", i);
    finite_diff_check(&mut store, &[x, g, b], FD_H, |tape| {
        let xv = tape.param(x);
        let gv = tape.param(g);
        let bv = tape.param(b);
        let y = tape.layernorm(xv, gv, bv, 1e-5);
        mix_loss(tape, y, &mut loss_rng.clone())
    })
}

fn gradcheck_attention(seed: u64, i: u64) -> f64 {
    let mut rng = rng_for(seed, "gc-attn", i);
    let heads = rng.gen_range(1..3usize);
    let dh = [2usize, 4][rng.gen_range(0..2usize)];
    let d = heads * dh;
    let t_len = rng.gen_range(1..6usize);
    let mut store: ParamStore<f64> = ParamStore::new();
    let q = store.add("q", Tensor::randn(t_len, d, 1.0, &mut rng));
    let k = store.add("k", Tensor::randn(t_len, d, 1.0, &mut rng));
    let v = store.add("v", Tensor::randn(t_len, d, 1.0, &mut rng));
    let bias = store.add("bias", Tensor::randn(heads, 4, 0.3, &mut rng));
    let loss_rng = rng_for(seed, "gc-attn-loss", i);
    finite_diff_check(&mut store, &[q, k, v, bias], FD_H, |tape| {
        let qv = tape.param(q);
        let kv = tape.param(k);
        let vv = tape.param(v);
        let bv = tape.param(bias);
        let y = tape.causal_attention(qv, kv, vv, bv, heads);
        mix_loss(tape, y, &mut loss_rng.clone())
    })
}

fn gradcheck_embed(seed: u64, i: u64) -> f64 {
    let mut rng = rng_for(seed, "gc-embed", i);
    let rows = rng.gen_range(1..5usize);
    let vocab = rng.gen_range(6..20usize);
    let n = rng.gen_range(3..8usize);
    let indices: Vec<Vec<u32>> = (0..rows)
        .map(|_| {
            let count = rng.gen_range(1..4usize);
            (0..count).map(|_| rng.gen_range(0..vocab) as u32).collect()
        })
        .collect();
    let mut store: ParamStore<f64> = ParamStore::new();
    let w = store.add("w", Tensor::randn(vocab, n, 1.0, &mut rng));
    let b = store.add("b", Tensor::randn(1, n, 1.0, &mut rng));
    let loss_rng = rng_for(seed, "gc-embed-loss", i);
    finite_diff_check(&mut store, &[w, b], FD_H, |tape| {
        let wv = tape.param(w);
        let bv = tape.param(b);
        let y = tape.embed_rows(wv, bv, indices.clone());
        mix_loss(tape, y, &mut loss_rng.clone())
    })
}

fn gradcheck_gru(seed: u64, i: u64) -> f64 {
    let mut rng = rng_for(seed, "gc-gru", i);
    let n_in = rng.gen_range(2..5usize);
    let n_h = rng.gen_range(2..6usize);
    let mut store: ParamStore<f64> = ParamStore::new();
    let cell = GruCell::init(&mut store, "g", n_in, n_h, &mut rng);
    let h0 = store.add("h0", Tensor::randn(1, n_h, 0.5, &mut rng));
    let xs: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let ids = [cell.wx, cell.wh, cell.bx, cell.bh, h0];
    let loss_rng = rng_for(seed, "gc-gru-loss", i);
    finite_diff_check(&mut store, &ids, FD_H, |tape| {
        let mut h = tape.param(h0);
        for x in &xs {
            let xv = tape.constant_row(x.clone());
            h = cell.step(tape, xv, h);
        }
        mix_loss(tape, h, &mut loss_rng.clone())
    })
}

fn gradcheck_softmax_xent(seed: u64, i: u64) -> f64 {
    let mut rng = rng_for(seed, "gc-xent", i);
    let rows = rng.gen_range(1..6usize);
    let c = rng.gen_range(2..6usize);
    let targets: Vec<u32> = (0..rows).map(|_| rng.gen_range(0..c) as u32).collect();
    let mut store: ParamStore<f64> = ParamStore::new();
    let logits = store.add("logits", Tensor::randn(rows, c, 1.5, &mut rng));
    finite_diff_check(&mut store, &[logits], FD_H, |tape| {
        let lv = tape.param(logits);
        let losses = tape.softmax_xent(lv, targets.clone());
        tape.mean_all(losses)
    })
}

fn gradcheck_bernoulli(seed: u64, i: u64) -> f64 {
    let mut rng = rng_for(seed, "gc-bce", i);
    let rows = rng.gen_range(1..4usize);
    let d = rng.gen_range(3..10usize);
    let active: Vec<Vec<u32>> = (0..rows)
        .map(|_| {
            (0..d)
                .filter(|_| rng.gen_range(0.0..1.0) < 0.3)
                .map(|j| j as u32)
                .collect()
        })
        .collect();
    let mut store: ParamStore<f64> = ParamStore::new();
    let logits = store.add("logits", Tensor::randn(rows, d, 1.5, &mut rng));
    finite_diff_check(&mut store, &[logits], FD_H, |tape| {
        let lv = tape.param(logits);
        let losses = tape.bernoulli_xent(lv, active.clone());
        tape.mean_all(losses)
    })
}

fn gradcheck_unary_chain(seed: u64, i: u64) -> f64 {
    let mut rng = rng_for(seed, "gc-unary", i);
    let n = rng.gen_range(2..8usize);
    let mut store: ParamStore<f64> = ParamStore::new();
    let x = store.add("x", Tensor::randn(1, n, 0.8, &mut rng));
    let loss_rng = rng_for(seed, "gc-unary-loss", i);
    finite_diff_check(&mut store, &[x], FD_H, |tape| {
        let xv = tape.param(x);
        let sp = tape.softplus(xv);
        let rt = tape.sqrt(sp);
        let th = tape.tanh(xv);
        let a = tape.mul(rt, th);
        let sg = tape.sigmoid(xv);
        let ge = tape.gelu(xv);
        let b = tape.mul(sg, ge);
        let lg = tape.ln(sp);
        let e = tape.affine_const(lg, 0.1, 0.0);
        let s1 = tape.add(a, b);
        let s2 = tape.add(s1, e);
        let ex = tape.affine_const(xv, 0.3, 0.0);
        let ev = tape.exp(ex);
        let s3 = tape.add(s2, ev);
        mix_loss(tape, s3, &mut loss_rng.clone())
    })
}

fn gradcheck_integrator(seed: u64, i: u64) -> f64 {
    let mut rng = rng_for(seed, "gc-integ", i);
    let n = rng.gen_range(2..6usize);
    let mut store: ParamStore<f64> = ParamStore::new();
    let beta_pre = store.add("beta_pre", Tensor::randn(3, 1, 1.0, &mut rng));
    let prop = store.add("prop", Tensor::randn(3, n, 1.0, &mut rng));
    let other = store.add("other", Tensor::randn(1, n, 1.0, &mut rng));
    let loss_rng = rng_for(seed, "gc-integ-loss", i);
    finite_diff_check(&mut store, &[beta_pre, prop, other], FD_H, |tape| {
        let bp = tape.param(beta_pre);
        let pp = tape.param(prop);
        let ov = tape.param(other);
        let mut z = tape.constant_row(vec![0.0; n]);
        for t in 0..3 {
            let b_pre = tape.row(bp, t);
            let beta = tape.sigmoid(b_pre);
            let zt = tape.row(pp, t);
            let a = tape.mul_scalar(beta, zt);
            let omb = tape.affine_const(beta, -1.0, 1.0);
            let keep = tape.mul_scalar(omb, z);
            z = tape.add(a, keep);
        }
        // exercise min/clamp away from their kinks
        let clipped = tape.clamp(z, -0.9, 0.9);
        let m = tape.min(clipped, ov);
        mix_loss(tape, m, &mut loss_rng.clone())
    })
}

fn gradcheck_composite(seed: u64, i: u64) -> f64 {
    let mut rng = rng_for(seed, "gc-comp", i);
    let (t_len, d, hidden, c) = (
        rng.gen_range(1..4usize),
        rng.gen_range(2..6usize),
        rng.gen_range(2..6usize),
        rng.gen_range(2..5usize),
    );
    let targets: Vec<u32> = (0..t_len).map(|_| rng.gen_range(0..c) as u32).collect();
    let mut store: ParamStore<f64> = ParamStore::new();
    let x = store.add("x", Tensor::randn(t_len, d, 1.0, &mut rng));
    let w1 = store.add("w1", Tensor::randn(d, hidden, 0.7, &mut rng));
    let b1 = store.add("b1", Tensor::randn(1, hidden, 0.3, &mut rng));
    let g = store.add("g", Tensor::randn(1, hidden, 0.4, &mut rng));
    let gb = store.add("gb", Tensor::randn(1, hidden, 0.4, &mut rng));
    let w2 = store.add("w2", Tensor::randn(hidden, c, 0.7, &mut rng));
    let b2 = store.add("b2", Tensor::randn(1, c, 0.3, &mut rng));
    let ids = [x, w1, b1, g, gb, w2, b2];
    finite_diff_check(&mut store, &ids, FD_H, |tape| {
        let xv = tape.param(x);
        let w1v = tape.param(w1);
        let b1v = tape.param(b1);
        let h = tape.affine(xv, w1v, b1v);
        let h = tape.gelu(h);
        let gv = tape.param(g);
        let gbv = tape.param(gb);
        let h = tape.layernorm(h, gv, gbv, 1e-5);
        let w2v = tape.param(w2);
        let b2v = tape.param(b2);
        let logits = tape.affine(h, w2v, b2v);
        let losses = tape.softmax_xent(logits, targets.clone());
        tape.mean_all(losses)
    })
}

/// 200 Adam steps on f(w) = ||w - w*||^2 must land within 1e-3 of w*.
pub fn adam_quadratic_bowl(seed: u64) -> CheckResult {
    let mut rng = rng_for(seed, "adam-bowl", 0);
    let n = 8;
    let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let mut store: ParamStore<f64> = ParamStore::new();
    let w = store.add("w", Tensor::zeros(1, n));
    let mut adam = Adam::new(
        AdamConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
        store.len(),
    );
    for _ in 0..200 {
        let grads = {
            let mut tape = Tape::new(&store);
            let wv = tape.param(w);
            let tv = tape.constant_row(target.clone());
            let d = tape.sub(wv, tv);
            let sq = tape.mul(d, d);
            let loss = tape.sum_all(sq);
            tape.backward(loss)
        };
        adam.step(&mut store, &grads);
    }
    let dist = store
        .tensor(w)
        .data
        .iter()
        .zip(&target)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    CheckResult::err("adam/quadratic_bowl", dist, 1e-3)
}

/// Full hand transition table on a crafted 3x3 instance:
/// ```text
///   0 . 1
///   . @ #
///   . . .
/// ```
pub fn env_hand_transition_table() -> Result<(), String> {
    let cfg = GridConfig {
        side: 3,
        colors: 2,
        walls: 1,
        max_steps: 5,
    };
    let mut cells = vec![Cell::Empty; 9];
    cells[0] = Cell::Color(0);
    cells[2] = Cell::Color(1);
    cells[5] = Cell::Wall(0);
    let task = Task::new(vec![0, 1], &cfg).map_err(|e| e.to_string())?;

    type Row = (&'static [Action], &'static [usize], usize, Option<Cause>, f32);
    let table: &[Row] = &[
        (&[Action::Right], &[4], 0, None, 0.0),
        (&[Action::Down, Action::Down], &[7, 7], 0, None, 0.0),
        (&[Action::Up, Action::Left], &[1, 0], 1, None, 0.0),
        (
            &[Action::Up, Action::Right],
            &[1, 2],
            0,
            Some(Cause::WrongColor),
            0.0,
        ),
        (
            &[Action::Up, Action::Left, Action::Right, Action::Right],
            &[1, 0, 1, 2],
            2,
            Some(Cause::Success),
            1.0,
        ),
        (
            &[
                Action::Right,
                Action::Right,
                Action::Right,
                Action::Right,
                Action::Right,
            ],
            &[4, 4, 4, 4, 4],
            0,
            Some(Cause::Timeout),
            0.0,
        ),
    ];
    for (row_idx, (actions, cells_after, want_progress, want_cause, want_r)) in
        table.iter().enumerate()
    {
        let mut s = EnvState::from_layout(cfg, task.clone(), cells.clone(), 4)
            .map_err(|e| e.to_string())?;
        let mut last_r = 0.0;
        for (a, &want_cell) in actions.iter().zip(cells_after.iter()) {
            let r = grid::env_step(&mut s, *a);
            if s.agent_cell() != want_cell {
                return Err(format!(
                    "row {row_idx}: agent at {} wanted {want_cell}",
                    s.agent_cell()
                ));
            }
            last_r = r.reward;
        }
        if s.progress() != *want_progress {
            return Err(format!("row {row_idx}: progress {}", s.progress()));
        }
        if s.terminated() != *want_cause {
            return Err(format!("row {row_idx}: cause {:?}", s.terminated()));
        }
        if last_r != *want_r {
            return Err(format!("row {row_idx}: reward {last_r}"));
        }
    }
    Ok(())
}

/// The grid config used throughout: G=7, O=8, W=4, cap 100.
pub fn default_grid() -> GridConfig {
    GridConfig {
        side: 7,
        colors: 8,
        walls: 4,
        max_steps: 100,
    }
}

/// The 16 pretraining tasks (shipped as data in `configs/`).
pub fn pretrain_tasks(cfg: &GridConfig) -> Vec<Task> {
    Task::parse_file(include_str!("../../../configs/tasks_pretrain.txt"), cfg)
        .expect("bundled task file is valid")
}

/// The held-out post-training task.
pub fn post_task(cfg: &GridConfig) -> Task {
    Task::parse_file(include_str!("../../../configs/task_post.txt"), cfg)
        .expect("bundled task file is valid")
        .remove(0)
}

/// Epsilon-zero expert over all 16 pretraining tasks: every episode must
/// succeed at exactly the planned shortest-path length. Returns
/// (episodes, failures).
pub fn expert_optimality(total_episodes: usize, seed: u64) -> Result<(usize, usize), String> {
    let cfg = default_grid();
    let tasks = pretrain_tasks(&cfg);
    let per_task = total_episodes.div_ceil(tasks.len());
    let ds = expert::generate_dataset(
        cfg,
        &tasks,
        &ExpertConfig {
            epsilon: 0.0,
            trajectories_per_task: per_task,
            seed,
        },
    );
    let mut failures = 0;
    for tr in &ds.trajectories {
        let s0 = EnvState::from_layout(
            cfg,
            ds.tasks[tr.task_idx as usize].clone(),
            tr.cells.clone(),
            tr.agent_cells[0] as usize,
        )
        .map_err(|e| e.to_string())?;
        if expert::planned_total_length(&s0) != Some(tr.len() as u32) {
            failures += 1;
        }
    }
    // generate_dataset retains only successful episodes by construction; a
    // generation failure would have panicked, so success rate is checked by
    // arrival here.
    Ok((ds.trajectories.len(), failures))
}
