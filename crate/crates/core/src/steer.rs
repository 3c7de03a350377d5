//! Supervised per-subgoal residual-stream controllers.
//!
//! A controller is a low-rank linear map U = down.up applied additively to
//! the residual stream at one layer: e <- e + (e.down).up. The bank keeps
//! one controller per groundtruth subgoal; during training the controller
//! matching the label is active at each step (the base model stays frozen),
//! and during evaluation the environment's current subgoal selects the
//! controller (oracle switching). The up-projection starts at zero so an
//! untrained bank is exactly a no-op.

use crate::dataset::Dataset;
use crate::grid::{EnvState, GridConfig, Task};
use crate::nn::kernels as k;
use crate::nn::tape::{Tape, Var};
use crate::nn::{Adam, AdamConfig, GradStore, ParamId, ParamStore, Scalar, Tensor};
use crate::seqmodel::{
    action_nll, obs_tokens, rollout, EpisodeRecord, Sampling, SeqModel, StepHook,
};
use crate::util::{par_map, par_map_idx, rng_for};
use serde::{Deserialize, Serialize};

/// Handles for one low-rank controller in a store.
#[derive(Debug, Clone, Copy)]
pub struct ControllerIds {
    pub down: ParamId,
    pub up: ParamId,
}

/// One controller per subgoal, all inserted at a single layer.
#[derive(Debug, Clone)]
pub struct ControllerBank {
    pub layer: usize,
    pub rank: usize,
    pub n_e: usize,
    pub controllers: Vec<ControllerIds>,
}

impl ControllerBank {
    /// Register a fresh bank: random down-projection, zero up-projection
    /// (the bank starts as an exact no-op).
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        k_subgoals: usize,
        n_e: usize,
        rank: usize,
        layer: usize,
        rng: &mut crate::util::Rng,
    ) -> Self {
        let controllers = (0..k_subgoals)
            .map(|g| ControllerIds {
                down: store.add(
                    format!("{prefix}.g{g}.down"),
                    Tensor::randn(n_e, rank, 1.0 / (n_e as f64).sqrt(), rng),
                ),
                up: store.add(format!("{prefix}.g{g}.up"), Tensor::zeros(rank, n_e)),
            })
            .collect();
        ControllerBank {
            layer,
            rank,
            n_e,
            controllers,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.controllers
            .iter()
            .flat_map(|c| [c.down, c.up])
            .collect()
    }

    /// Tape application of controller `g` to rows `x`.
    pub fn apply_rows<F: Scalar>(&self, tape: &mut Tape<'_, F>, g: usize, x: Var) -> Var {
        let c = self.controllers[g];
        let down = tape.param(c.down);
        let up = tape.param(c.up);
        let u = tape.matmul(x, down);
        let w = tape.matmul(u, up);
        tape.add(x, w)
    }

    /// Tape hook applying the labeled controller per piecewise-constant
    /// segment of `labels`.
    pub fn apply_segmented<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        e: Var,
        labels: &[u8],
    ) -> Var {
        let segs = segments(labels);
        let parts: Vec<Var> = segs
            .iter()
            .map(|&(start, len, g)| {
                let rows = tape.slice_rows(e, start, len);
                self.apply_rows(tape, g as usize, rows)
            })
            .collect();
        tape.concat_rows(&parts)
    }

    /// Evaluation application (same op grouping as the tape path).
    pub fn apply_eval<F: Scalar>(&self, store: &ParamStore<F>, g: usize, e: &mut [F]) {
        let c = self.controllers[g];
        apply_controller_eval(
            store,
            c.down,
            c.up,
            self.rank,
            self.n_e,
            e,
        );
    }
}

/// e <- e + (e.down).up with explicit buffers, matching the tape grouping.
pub fn apply_controller_eval<F: Scalar>(
    store: &ParamStore<F>,
    down: ParamId,
    up: ParamId,
    rank: usize,
    n_e: usize,
    e: &mut [F],
) {
    let mut u = vec![F::zero(); rank];
    k::matmul_acc(&mut u, e, &store.tensor(down).data, 1, n_e, rank);
    let mut w = vec![F::zero(); n_e];
    k::matmul_acc(&mut w, &u, &store.tensor(up).data, 1, rank, n_e);
    for j in 0..n_e {
        e[j] += w[j];
    }
}

/// Maximal runs of a piecewise-constant label sequence: (start, len, label).
pub fn segments(labels: &[u8]) -> Vec<(usize, usize, u8)> {
    let mut out = Vec::new();
    let mut start = 0usize;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[t - 1] {
            out.push((start, t - start, labels[start]));
            start = t;
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteerTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for SteerTrainConfig {
    fn default() -> Self {
        SteerTrainConfig {
            steps: 600,
            batch: 16,
            lr: 1e-3,
        }
    }
}

/// Train the bank by next-action cross-entropy with the groundtruth
/// controller active at each step; base parameters must already be frozen.
pub fn train_controller_bank(
    store: &mut ParamStore<f32>,
    model: &SeqModel,
    bank: &ControllerBank,
    ds: &Dataset,
    cfg: &SteerTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) {
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        store.len(),
    );
    let mut batch_rng = rng_for(seed, "steer-batch", 0);
    use rand::Rng as _;
    for step in 0..cfg.steps {
        let idxs: Vec<usize> = (0..cfg.batch)
            .map(|_| batch_rng.gen_range(0..ds.trajectories.len()))
            .collect();
        let per_seq: Vec<(GradStore<f32>, f64)> = par_map(&idxs, |&i| {
            let tr = &ds.trajectories[i];
            let (inputs, _) = obs_tokens(&ds.config, tr);
            let mut tape = Tape::new(store);
            let mut hook = |tape: &mut Tape<'_, f32>, e: Var| {
                bank.apply_segmented(tape, e, &tr.subgoals)
            };
            let fwd = model.build_forward(&mut tape, inputs, Some((bank.layer, &mut hook)));
            let loss = action_nll(&mut tape, fwd.action_logits, &tr.actions);
            let v = tape.scalar_value(loss) as f64;
            (tape.backward(loss), v)
        });
        let mut grads = GradStore::new(store.len());
        let mut loss_sum = 0.0;
        for (g, l) in per_seq {
            grads.merge(g);
            loss_sum += l;
        }
        grads.scale(1.0 / cfg.batch as f32);
        adam.step(store, &grads);
        on_step(step, loss_sum / cfg.batch as f64);
    }
}

/// Teacher-forced controlled action NLL over a dataset (oracle labels).
pub fn controlled_action_nll(
    store: &ParamStore<f32>,
    model: &SeqModel,
    bank: &ControllerBank,
    ds: &Dataset,
) -> f64 {
    let rows: Vec<(f64, usize)> = par_map(&ds.trajectories, |tr| {
        let (inputs, _) = obs_tokens(&ds.config, tr);
        let mut tape = Tape::new(store);
        let mut hook =
            |tape: &mut Tape<'_, f32>, e: Var| bank.apply_segmented(tape, e, &tr.subgoals);
        let fwd = model.build_forward(&mut tape, inputs, Some((bank.layer, &mut hook)));
        let loss = action_nll(&mut tape, fwd.action_logits, &tr.actions);
        (tape.scalar_value(loss) as f64 * tr.len() as f64, tr.len())
    });
    let steps: usize = rows.iter().map(|r| r.1).sum();
    rows.iter().map(|r| r.0).sum::<f64>() / steps as f64
}

/// Closed-loop hook that activates the controller of the environment's
/// current subgoal (oracle switching).
pub struct OracleBankHook<'a> {
    pub store: &'a ParamStore<f32>,
    pub bank: &'a ControllerBank,
}

impl StepHook<f32> for OracleBankHook<'_> {
    fn layer(&self) -> usize {
        self.bank.layer
    }

    fn apply(&mut self, _t: usize, env: &EnvState, e: &mut [f32]) {
        if let Some(g) = env.current_subgoal() {
            self.bank.apply_eval(self.store, g as usize, e);
        }
    }
}

/// Success rate of oracle-switched controlled rollouts on a task.
pub fn evaluate_composition(
    store: &ParamStore<f32>,
    model: &SeqModel,
    bank: &ControllerBank,
    cfg: &GridConfig,
    task: &Task,
    episodes: usize,
    seed: u64,
) -> f64 {
    let wins: Vec<bool> = par_map_idx(episodes, |i| {
        let mut rng = rng_for(seed, "steer-eval", i as u64);
        let mut hook = OracleBankHook { store, bank };
        let rec: EpisodeRecord<f32> = rollout(
            store,
            model,
            cfg,
            task,
            &mut rng,
            Sampling::Categorical,
            Some(&mut hook),
            false,
        );
        rec.success
    });
    wins.iter().filter(|&&w| w).count() as f64 / episodes as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct DepthSweepRow {
    pub model_layers: usize,
    pub layer: usize,
    pub seed: u64,
    pub success_rate: f64,
    pub controlled_nll: f64,
}

pub fn depth_sweep_csv(rows: &[DepthSweepRow]) -> String {
    let mut s = String::from("model_layers,layer,seed,success_rate,controlled_nll\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.model_layers, r.layer, r.seed, r.success_rate, r.controlled_nll
        ));
    }
    s
}

/// Train + evaluate one bank per requested insertion layer. The base store
/// is cloned per layer so runs are independent.
#[allow(clippy::too_many_arguments)]
pub fn depth_sweep(
    base: &ParamStore<f32>,
    model: &SeqModel,
    ds: &Dataset,
    post_task: &Task,
    layers: &[usize],
    rank: usize,
    train_cfg: &SteerTrainConfig,
    eval_episodes: usize,
    seed: u64,
) -> Vec<DepthSweepRow> {
    layers
        .iter()
        .map(|&layer| {
            let mut store = base.clone();
            let mut rng = rng_for(seed, "sweep-bank", layer as u64);
            let bank = ControllerBank::init(
                &mut store,
                &format!("ctrl.l{layer}"),
                ds.num_subgoals(),
                model.cfg.n_e,
                rank,
                layer,
                &mut rng,
            );
            train_controller_bank(&mut store, model, &bank, ds, train_cfg, seed, |_, _| {});
            let success_rate = evaluate_composition(
                &store,
                model,
                &bank,
                &ds.config,
                post_task,
                eval_episodes,
                seed,
            );
            let controlled_nll = controlled_action_nll(&store, model, &bank, ds);
            DepthSweepRow {
                model_layers: model.cfg.layers,
                layer,
                seed,
                success_rate,
                controlled_nll,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::default_grid;
    use crate::expert::{generate_dataset, ExpertConfig};
    use crate::nn::tape::finite_diff_check;
    use crate::seqmodel::SeqModelConfig;

    #[test]
    fn segments_split_correctly() {
        assert_eq!(segments(&[0, 0, 1, 1, 1, 0]), vec![(0, 2, 0), (2, 3, 1), (5, 1, 0)]);
        assert_eq!(segments(&[2]), vec![(0, 1, 2)]);
        assert!(segments(&[]).is_empty());
    }

    #[test]
    fn zero_controller_is_noop_identity_doubles_and_linearity() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let n_e = 6;
        let mut rng = rng_for(7, "steer-ctrl", 0);
        // zero bank entry
        let bank = ControllerBank::init(&mut store, "ctrl", 2, n_e, 3, 1, &mut rng);
        let e: Vec<f64> = (0..n_e).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut e1 = e.clone();
        bank.apply_eval(&store, 0, &mut e1);
        assert_eq!(e1, e, "zero up-projection must be a no-op");

        // full-rank identity controller: e + I e = 2e
        let mut ident = Tensor::zeros(n_e, n_e);
        for i in 0..n_e {
            ident.data[i * n_e + i] = 1.0;
        }
        let down = store.add("ident.down", ident.clone());
        let up = store.add("ident.up", ident);
        let mut e2 = e.clone();
        apply_controller_eval(&store, down, up, n_e, n_e, &mut e2);
        for j in 0..n_e {
            assert!((e2[j] - 2.0 * e[j]).abs() < 1e-12);
        }

        // dense-multiply oracle for a random low-rank controller
        let rank = 3;
        let dtens = Tensor::randn(n_e, rank, 0.5, &mut rng);
        let utens = Tensor::randn(rank, n_e, 0.5, &mut rng);
        let d2 = store.add("rnd.down", dtens.clone());
        let u2 = store.add("rnd.up", utens.clone());
        let mut got = e.clone();
        apply_controller_eval(&store, d2, u2, rank, n_e, &mut got);
        // dense U = down.up
        let mut dense = vec![0.0; n_e * n_e];
        k::matmul_acc(&mut dense, &dtens.data, &utens.data, n_e, rank, n_e);
        let mut want = e.clone();
        for i in 0..n_e {
            let mut acc = 0.0;
            for j in 0..n_e {
                acc += e[j] * dense[j * n_e + i];
            }
            want[i] += acc;
        }
        for j in 0..n_e {
            assert!((got[j] - want[j]).abs() < 1e-6, "dense oracle mismatch");
        }

        // linearity of e + Ue
        let f = |x: &[f64]| {
            let mut y = x.to_vec();
            apply_controller_eval(&store, d2, u2, rank, n_e, &mut y);
            y
        };
        let x1: Vec<f64> = (0..n_e).map(|i| (i as f64).cos()).collect();
        let x2: Vec<f64> = (0..n_e).map(|i| (i as f64 * 1.3).sin()).collect();
        let alpha = 0.37;
        let lhs = f(&x1.iter().zip(&x2).map(|(a, b)| alpha * a + b).collect::<Vec<_>>());
        let rhs: Vec<f64> = f(&x1)
            .iter()
            .zip(f(&x2))
            .map(|(a, b)| alpha * a + b)
            .collect();
        for j in 0..n_e {
            assert!((lhs[j] - rhs[j]).abs() < 1e-9, "linearity violated");
        }
    }

    /// Gradient of the controlled loss w.r.t. the low-rank factors on a
    /// 1-layer toy model, against central finite differences.
    #[test]
    fn controlled_loss_gradcheck() {
        let cfg = SeqModelConfig {
            layers: 1,
            n_e: 6,
            heads: 2,
            mlp: 8,
            obs_dim: 7,
            n_actions: 3,
            lambda_obs: 0.0,
            rel_clip: 4,
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rng_for(8, "steer-gc", 0);
        let model = crate::seqmodel::SeqModel::init(&mut store, cfg, &mut rng);
        let bank = ControllerBank::init(&mut store, "ctrl", 2, 6, 2, 1, &mut rng);
        // give the zero up-projections random values so gradients flow
        for c in &bank.controllers {
            *store.tensor_mut(c.up) = Tensor::randn(2, 6, 0.4, &mut rng);
        }
        model.freeze(&mut store);
        let inputs: Vec<Vec<u32>> = vec![vec![0, 2], vec![1], vec![4, 6], vec![3]];
        let labels: Vec<u8> = vec![0, 0, 1, 1];
        let actions: Vec<u8> = vec![2, 0, 1, 1];
        let ids = bank.param_ids();
        let worst = finite_diff_check(&mut store, &ids, 1e-5, |tape| {
            let mut hook =
                |tape: &mut Tape<'_, f64>, e: Var| bank.apply_segmented(tape, e, &labels);
            let fwd = model.build_forward(tape, inputs.clone(), Some((1, &mut hook)));
            action_nll(tape, fwd.action_logits, &actions)
        });
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    /// Training the bank improves the controlled NLL and leaves the base
    /// model bit-identical; the zero bank matches the hookless NLL exactly.
    #[test]
    fn bank_training_improves_nll_and_freezes_base() {
        let grid = default_grid();
        let tasks = vec![
            crate::grid::Task::parse("0-1-2-3", &grid).unwrap(),
            crate::grid::Task::parse("4-5-6-7", &grid).unwrap(),
        ];
        let ds = generate_dataset(
            grid,
            &tasks,
            &ExpertConfig {
                epsilon: 0.0,
                trajectories_per_task: 12,
                seed: 21,
            },
        );
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = rng_for(9, "steer-train", 0);
        let mc = SeqModelConfig {
            layers: 2,
            n_e: 24,
            heads: 2,
            mlp: 32,
            obs_dim: grid.obs_dim(),
            n_actions: 4,
            lambda_obs: 1.0,
            rel_clip: 16,
        };
        let model = crate::seqmodel::SeqModel::init(&mut store, mc, &mut rng);
        model.freeze(&mut store);
        let bank = ControllerBank::init(&mut store, "ctrl", 4, 24, 4, 1, &mut rng);

        let uncontrolled = crate::seqmodel::dataset_action_nll(&store, &model, &ds);
        let zero_bank_nll = controlled_action_nll(&store, &model, &bank, &ds);
        assert_eq!(
            zero_bank_nll, uncontrolled,
            "zero bank must match the hookless NLL bit-for-bit"
        );

        let base_hash = model.base_hash(&store);
        train_controller_bank(
            &mut store,
            &model,
            &bank,
            &ds,
            &SteerTrainConfig {
                steps: 60,
                batch: 8,
                lr: 3e-3,
            },
            13,
            |_, _| {},
        );
        assert_eq!(model.base_hash(&store), base_hash, "base model changed");
        let trained_nll = controlled_action_nll(&store, &model, &bank, &ds);
        assert!(
            trained_nll < uncontrolled,
            "controlled NLL {trained_nll} not below uncontrolled {uncontrolled}"
        );
    }
}
