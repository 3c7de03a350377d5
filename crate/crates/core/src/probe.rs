//! Linear belief-state probes over residual activations.
//!
//! A probe for layer l is a bias-free matrix U mapping the residual vector
//! e_{t,l} to subgoal logits; it is trained by cross-entropy against the
//! groundtruth pair labels on traces of the frozen base model and never
//! touches base parameters (probes live in their own store).

use crate::dataset::Dataset;
use crate::nn::tape::Tape;
use crate::nn::{Adam, AdamConfig, GradStore, ParamStore, Tensor};
use crate::seqmodel::{trace_forward, SeqModel};
use crate::util::{par_map, rng_for};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    /// Trajectories per training step (their timesteps are the sample rows).
    pub batch: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 400,
            batch: 8,
            lr: 1e-2,
        }
    }
}

/// Trained probe for one residual level.
#[derive(Debug, Clone)]
pub struct Probe {
    pub layer: usize,
    /// [n_e, K], no bias.
    pub w: Tensor<f32>,
}

impl Probe {
    pub fn predict(&self, e: &[f32]) -> usize {
        let k = self.w.cols;
        let mut logits = vec![0f32; k];
        crate::nn::kernels::matmul_acc(&mut logits, e, &self.w.data, 1, self.w.rows, k);
        crate::nn::kernels::argmax(&logits)
    }
}

/// Train one probe per requested layer, sharing a single base-model forward
/// per trajectory across all layers. The base store is read-only.
pub fn train_probes(
    base: &ParamStore<f32>,
    model: &SeqModel,
    ds: &Dataset,
    layers: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Vec<Probe> {
    let n_e = model.cfg.n_e;
    let k = ds.num_subgoals();
    let mut stores: Vec<ParamStore<f32>> = layers
        .iter()
        .map(|&l| {
            let mut s = ParamStore::new();
            let mut rng = rng_for(seed, "probe-init", l as u64);
            s.add("probe.w", Tensor::randn(n_e, k, 0.01, &mut rng));
            s
        })
        .collect();
    let mut adams: Vec<Adam<f32>> = stores
        .iter()
        .map(|_| {
            Adam::new(
                AdamConfig {
                    lr: cfg.lr,
                    ..AdamConfig::default()
                },
                1,
            )
        })
        .collect();
    let mut batch_rng = rng_for(seed, "probe-batch", 0);
    use rand::Rng as _;
    for _step in 0..cfg.steps {
        let idxs: Vec<usize> = (0..cfg.batch)
            .map(|_| batch_rng.gen_range(0..ds.trajectories.len()))
            .collect();
        // one frozen-model forward per trajectory, shared by all layers
        let traces: Vec<(Vec<Tensor<f32>>, Vec<u8>)> = par_map(&idxs, |&i| {
            let tr = &ds.trajectories[i];
            let obs = tr.observations(&ds.config);
            let (levels, _, _) = trace_forward(base, model, &obs[..tr.len()]);
            (levels, tr.subgoals.clone())
        });
        for (li, &layer) in layers.iter().enumerate() {
            let mut gsum: Option<GradStore<f32>> = None;
            let mut count = 0usize;
            {
                let store = &stores[li];
                let wid = store.id("probe.w").unwrap();
                for (levels, labels) in &traces {
                    let mut tape = Tape::new(store);
                    let e = tape.constant(levels[layer].clone());
                    let w = tape.param(wid);
                    let logits = tape.matmul(e, w);
                    let losses =
                        tape.softmax_xent(logits, labels.iter().map(|&g| g as u32).collect());
                    let loss = tape.mean_all(losses);
                    let g = tape.backward(loss);
                    count += 1;
                    match &mut gsum {
                        Some(acc) => acc.merge(g),
                        none => *none = Some(g),
                    }
                }
            }
            if let Some(mut g) = gsum {
                g.scale(1.0 / count as f32);
                adams[li].step(&mut stores[li], &g);
            }
        }
    }
    layers
        .iter()
        .zip(stores)
        .map(|(&layer, s)| Probe {
            layer,
            w: s.tensor(s.id("probe.w").unwrap()).clone(),
        })
        .collect()
}

/// One evaluation row: accuracy at a (layer, within-segment offset) bucket.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeReportRow {
    pub layer: usize,
    pub segment_offset: usize,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub rows: Vec<ProbeReportRow>,
    /// (layer, accuracy over all timesteps)
    pub per_layer: Vec<(usize, f64)>,
}

impl ProbeReport {
    pub fn layer_accuracy(&self, layer: usize) -> f64 {
        self.per_layer
            .iter()
            .find(|(l, _)| *l == layer)
            .map(|(_, a)| *a)
            .expect("layer present in report")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,segment_offset,accuracy,count\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.layer,
                r.segment_offset,
                r.correct as f64 / r.total.max(1) as f64,
                r.total
            ));
        }
        s
    }
}

/// Evaluate probes on a disjoint split: per-layer accuracy and accuracy as a
/// function of within-segment time offset.
pub fn probe_report(
    base: &ParamStore<f32>,
    model: &SeqModel,
    ds: &Dataset,
    probes: &[Probe],
) -> ProbeReport {
    let max_offset = 32usize;
    // per trajectory: per probe, (per-offset (correct, total), overall correct, total)
    type TrajCounts = Vec<(Vec<(usize, usize)>, usize, usize)>;
    let counts: Vec<TrajCounts> = par_map(&ds.trajectories, |tr| {
        let obs = tr.observations(&ds.config);
        let (levels, _, _) = trace_forward(base, model, &obs[..tr.len()]);
        probes
            .iter()
            .map(|p| {
                let mut by_offset = vec![(0usize, 0usize); max_offset];
                let (mut ok, mut tot) = (0usize, 0usize);
                let mut seg_start = 0usize;
                for t in 0..tr.len() {
                    if t > 0 && tr.subgoals[t] != tr.subgoals[t - 1] {
                        seg_start = t;
                    }
                    let off = (t - seg_start).min(max_offset - 1);
                    let pred = p.predict(levels[p.layer].row(t));
                    let hit = pred == tr.subgoals[t] as usize;
                    by_offset[off].1 += 1;
                    by_offset[off].0 += hit as usize;
                    tot += 1;
                    ok += hit as usize;
                }
                (by_offset, ok, tot)
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut per_layer = Vec::new();
    for (pi, p) in probes.iter().enumerate() {
        let mut by_offset = vec![(0usize, 0usize); max_offset];
        let (mut ok, mut tot) = (0usize, 0usize);
        for c in &counts {
            let (ref offs, o, t) = c[pi];
            for (i, &(a, b)) in offs.iter().enumerate() {
                by_offset[i].0 += a;
                by_offset[i].1 += b;
            }
            ok += o;
            tot += t;
        }
        for (off, (correct, total)) in by_offset.into_iter().enumerate() {
            if total > 0 {
                rows.push(ProbeReportRow {
                    layer: p.layer,
                    segment_offset: off,
                    correct,
                    total,
                });
            }
        }
        per_layer.push((p.layer, ok as f64 / tot.max(1) as f64));
    }
    ProbeReport { rows, per_layer }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Separable features must be learned perfectly; shuffled labels land at
    /// chance. Trains the probe path directly on constructed activations.
    #[test]
    fn probe_separable_and_chance() {
        let k = 4usize;
        let n_e = 8usize;
        let n = 400usize;
        let mut rng = rng_for(3, "probe-test", 0);
        use rand::Rng as _;
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
        let mut feats = Tensor::zeros(n, n_e);
        for (i, &g) in labels.iter().enumerate() {
            feats.data[i * n_e + g as usize] = 1.0;
            feats.data[i * n_e + 4 + rng.gen_range(0..4)] = 0.5; // distractor
        }
        let train = |labels: &[u8]| -> f64 {
            let mut store: ParamStore<f32> = ParamStore::new();
            let mut rng2 = rng_for(4, "probe-w", 0);
            let wid = store.add("probe.w", Tensor::randn(n_e, k, 0.01, &mut rng2));
            let mut adam = Adam::new(
                AdamConfig {
                    lr: 0.05,
                    ..AdamConfig::default()
                },
                1,
            );
            for _ in 0..300 {
                let mut tape = Tape::new(&store);
                let e = tape.constant(feats.clone());
                let w = tape.param(wid);
                let logits = tape.matmul(e, w);
                let losses =
                    tape.softmax_xent(logits, labels.iter().map(|&g| g as u32).collect());
                let loss = tape.mean_all(losses);
                let g = tape.backward(loss);
                adam.step(&mut store, &g);
            }
            let probe = Probe {
                layer: 0,
                w: store.tensor(wid).clone(),
            };
            let hits = (0..n)
                .filter(|&i| probe.predict(feats.row(i)) == labels[i] as usize)
                .count();
            hits as f64 / n as f64
        };
        assert_eq!(train(&labels), 1.0, "separable features must be learned");

        let mut shuffled = labels.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng);
        let acc = train(&shuffled);
        assert!(
            (acc - 1.0 / k as f64).abs() < 0.12,
            "shuffled labels should be near chance, got {acc}"
        );
    }

    /// Report accuracy equals an independent confusion-matrix recount, and
    /// probe training leaves the base model untouched.
    #[test]
    fn report_matches_recount_and_base_frozen() {
        use crate::check::default_grid;
        use crate::expert::{generate_dataset, ExpertConfig};
        use crate::grid::Task;
        use crate::seqmodel::{SeqModel, SeqModelConfig};

        let cfg = default_grid();
        let tasks = vec![
            Task::parse("0-1-2-3", &cfg).unwrap(),
            Task::parse("4-5-6-7", &cfg).unwrap(),
        ];
        let ds = generate_dataset(
            cfg,
            &tasks,
            &ExpertConfig {
                epsilon: 0.0,
                trajectories_per_task: 10,
                seed: 9,
            },
        );
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = rng_for(5, "probe-model", 0);
        let mc = SeqModelConfig {
            layers: 2,
            n_e: 16,
            heads: 2,
            mlp: 24,
            obs_dim: cfg.obs_dim(),
            n_actions: 4,
            lambda_obs: 1.0,
            rel_clip: 8,
        };
        let model = SeqModel::init(&mut store, mc, &mut rng);
        let before = store.content_hash();
        let probes = train_probes(
            &store,
            &model,
            &ds,
            &[0, 1, 2],
            &ProbeConfig {
                steps: 20,
                batch: 4,
                lr: 1e-2,
            },
            11,
        );
        assert_eq!(
            store.content_hash(),
            before,
            "probe training touched the base model"
        );

        let report = probe_report(&store, &model, &ds, &probes);
        // independent recount for layer 1
        let p = &probes[1];
        let (mut ok, mut tot) = (0usize, 0usize);
        for tr in &ds.trajectories {
            let obs = tr.observations(&ds.config);
            let (levels, _, _) = trace_forward(&store, &model, &obs[..tr.len()]);
            for t in 0..tr.len() {
                ok += (p.predict(levels[1].row(t)) == tr.subgoals[t] as usize) as usize;
                tot += 1;
            }
        }
        let want = ok as f64 / tot as f64;
        assert!((report.layer_accuracy(1) - want).abs() < 1e-12);
        // offset buckets must add back up to the step count
        let total_steps: usize = ds.trajectories.iter().map(|t| t.len()).sum();
        let sum: usize = report
            .rows
            .iter()
            .filter(|r| r.layer == 1)
            .map(|r| r.total)
            .sum();
        assert_eq!(sum, total_steps);
    }
}
