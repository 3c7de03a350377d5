//! Shortest-path expert policies and trajectory dataset generation.
//!
//! The expert solves each color-to-color leg exactly by breadth-first search,
//! treating walls and every colored cell other than the current target as
//! obstacles (stepping onto an out-of-order color ends the episode, so the
//! planner must route around them). At each step it draws uniformly from the
//! distance-decreasing actions; with probability epsilon the draw is replaced
//! by a uniform non-terminating action. Only successful episodes are kept.

use crate::dataset::{Dataset, Trajectory};
use crate::grid::{
    env_reset, env_step, Action, Cell, EnvState, GridConfig, Task, NUM_ACTIONS,
};
use crate::util::{par_map_idx, rng_for, Rng};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Expert rollout knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Probability of replacing the planned action with a random
    /// non-terminating one.
    pub epsilon: f64,
    pub trajectories_per_task: usize,
    pub seed: u64,
}

pub const UNREACHABLE: u32 = u32::MAX;

/// Exact grid geodesic distances to the nearest target cell.
#[derive(Debug, Clone)]
pub struct DistanceField {
    pub side: usize,
    /// Distance per cell; `UNREACHABLE` for obstacles and cut-off regions.
    pub dist: Vec<u32>,
}

impl DistanceField {
    /// Distance from `cell`, treating the cell the agent stands on as
    /// leavable even when it is itself an obstacle color (the agent may
    /// stand on a just-visited color; it must step off, never back on).
    pub fn from_cell(&self, cells: &[Cell], cfg: &GridConfig, cell: usize) -> u32 {
        if self.dist[cell] != UNREACHABLE {
            return self.dist[cell];
        }
        let mut best = UNREACHABLE;
        for a in Action::ALL {
            if let Some(dest) = destination_on(cfg, cells, cell, a) {
                best = best.min(self.dist[dest]);
            }
        }
        if best == UNREACHABLE {
            UNREACHABLE
        } else {
            best + 1
        }
    }
}

fn destination_on(cfg: &GridConfig, cells: &[Cell], cell: usize, action: Action) -> Option<usize> {
    let g = cfg.side as isize;
    let (r, c) = ((cell / cfg.side) as isize, (cell % cfg.side) as isize);
    let (dr, dc) = action.delta();
    let (nr, nc) = (r + dr, c + dc);
    if nr < 0 || nr >= g || nc < 0 || nc >= g {
        return None;
    }
    let dest = (nr * g + nc) as usize;
    match cells[dest] {
        Cell::Wall(_) => None,
        _ => Some(dest),
    }
}

/// Multi-source BFS distance map toward `targets`.
///
/// Walls and colored cells outside `targets` are impassable; target cells
/// have distance 0.
pub fn shortest_path_field(cfg: &GridConfig, cells: &[Cell], targets: &[usize]) -> DistanceField {
    let n = cfg.num_cells();
    let mut dist = vec![UNREACHABLE; n];
    let mut queue = std::collections::VecDeque::new();
    for &t in targets {
        dist[t] = 0;
        queue.push_back(t);
    }
    let passable = |i: usize| match cells[i] {
        Cell::Empty => true,
        Cell::Wall(_) => false,
        Cell::Color(_) => targets.contains(&i),
    };
    while let Some(cur) = queue.pop_front() {
        for a in Action::ALL {
            if let Some(nxt) = destination_on(cfg, cells, cur, a) {
                if passable(nxt) && dist[nxt] == UNREACHABLE {
                    dist[nxt] = dist[cur] + 1;
                    queue.push_back(nxt);
                }
            }
        }
    }
    DistanceField {
        side: cfg.side,
        dist,
    }
}

/// Field for the state's current target color.
pub fn field_for_target(state: &EnvState) -> Option<DistanceField> {
    let target = state.current_target()?;
    let cell = state.cell_of_color(target)?;
    Some(shortest_path_field(
        &state.config,
        state.cells(),
        &[cell],
    ))
}

/// Actions that strictly decrease distance to the current target.
pub fn decreasing_actions(state: &EnvState, field: &DistanceField) -> Vec<Action> {
    let here = field.from_cell(state.cells(), &state.config, state.agent_cell());
    Action::ALL
        .into_iter()
        .filter(|&a| match state.destination(state.agent_cell(), a) {
            Some(dest) => field.dist[dest] != UNREACHABLE && field.dist[dest] < here,
            None => false,
        })
        .collect()
}

/// Actions that cannot end the episode in failure: everything except moves
/// onto a colored cell other than the current target.
pub fn non_terminating_actions(state: &EnvState) -> Vec<Action> {
    Action::ALL
        .into_iter()
        .filter(|&a| match state.destination(state.agent_cell(), a) {
            Some(dest) => match state.cells()[dest] {
                Cell::Color(c) => Some(c) == state.current_target(),
                _ => true,
            },
            None => true,
        })
        .collect()
}

/// Action probabilities of the epsilon-noisy shortest-path expert.
pub fn expert_action_distribution(
    state: &EnvState,
    field: &DistanceField,
    epsilon: f64,
) -> [f64; NUM_ACTIONS] {
    let dec = decreasing_actions(state, field);
    assert!(
        !dec.is_empty(),
        "expert contract violated: no distance-decreasing action\n{state}"
    );
    let safe = non_terminating_actions(state);
    let mut p = [0.0; NUM_ACTIONS];
    for a in &dec {
        p[a.index()] += (1.0 - epsilon) / dec.len() as f64;
    }
    for a in &safe {
        p[a.index()] += epsilon / safe.len() as f64;
    }
    p
}

/// Sample one expert action.
pub fn expert_policy(
    state: &EnvState,
    field: &DistanceField,
    epsilon: f64,
    rng: &mut Rng,
) -> Action {
    // Sample the mixture branch first so the epsilon=0 path draws
    // identically regardless of the non-terminating set.
    let noisy = epsilon > 0.0 && rng.gen_range(0.0..1.0) < epsilon;
    let pool = if noisy {
        non_terminating_actions(state)
    } else {
        let dec = decreasing_actions(state, field);
        assert!(
            !dec.is_empty(),
            "expert contract violated: no distance-decreasing action\n{state}"
        );
        dec
    };
    pool[rng.gen_range(0..pool.len())]
}

/// Total planned path length for the whole task from the reset state:
/// chained leg distances with each leg's obstacles applied. `None` when any
/// leg is unreachable.
pub fn planned_total_length(state: &EnvState) -> Option<u32> {
    let cfg = &state.config;
    let cells = state.cells();
    let mut from = state.agent_cell();
    let mut total = 0u32;
    for &color in state.task.colors() {
        let target = state.cell_of_color(color)?;
        let field = shortest_path_field(cfg, cells, &[target]);
        let d = field.from_cell(cells, cfg, from);
        if d == UNREACHABLE {
            return None;
        }
        total += d;
        from = target;
    }
    Some(total)
}

/// Roll one expert episode on a fresh layout. Returns `None` when the layout
/// is unsolvable or the (noisy) expert fails; callers resample.
fn try_episode(
    config: GridConfig,
    task: &Task,
    task_idx: u16,
    epsilon: f64,
    rng: &mut Rng,
) -> Option<Trajectory> {
    let (mut state, _) = env_reset(config, task.clone(), rng).ok()?;
    planned_total_length(&state)?;
    let mut agent_cells = vec![state.agent_cell() as u16];
    let mut actions = Vec::new();
    let mut subgoals = Vec::new();
    let mut field = field_for_target(&state)?;
    let mut target = state.current_target();
    loop {
        if state.current_target() != target {
            target = state.current_target();
            field = field_for_target(&state)?;
        }
        let g = state.current_subgoal().expect("running state has a target");
        let a = expert_policy(&state, &field, epsilon, rng);
        let r = env_step(&mut state, a);
        actions.push(a.index() as u8);
        subgoals.push(g);
        agent_cells.push(state.agent_cell() as u16);
        if r.done {
            return (r.reward == 1.0).then_some(Trajectory {
                task_idx,
                cells: state.cells().to_vec(),
                agent_cells,
                actions,
                subgoals,
            });
        }
    }
}

/// Generate `trajectories_per_task` successful episodes for every task,
/// interleaved across tasks. Failed or unsolvable episodes are discarded and
/// resampled; generation is deterministic and parallel across episodes.
pub fn generate_dataset(config: GridConfig, tasks: &[Task], expert: &ExpertConfig) -> Dataset {
    assert!((0.0..=1.0).contains(&expert.epsilon), "epsilon outside [0,1]");
    let total = expert.trajectories_per_task * tasks.len();
    let trajectories = par_map_idx(total, |i| {
        let task_idx = i % tasks.len();
        let task = &tasks[task_idx];
        for attempt in 0..10_000u64 {
            let mut rng = rng_for(expert.seed, "expert-episode", (i as u64) << 14 | attempt);
            if let Some(tr) = try_episode(config, task, task_idx as u16, expert.epsilon, &mut rng)
            {
                return tr;
            }
        }
        panic!("no successful episode for task {task} after 10000 attempts");
    });
    Dataset {
        config,
        tasks: tasks.to_vec(),
        trajectories,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Cause;

    fn cfg7() -> GridConfig {
        GridConfig {
            side: 7,
            colors: 8,
            walls: 4,
            max_steps: 100,
        }
    }

    /// Independent oracle: exhaustive relaxation (Bellman-Ford over the unit
    /// grid graph) instead of BFS.
    fn relaxation_oracle(cfg: &GridConfig, cells: &[Cell], targets: &[usize]) -> Vec<u32> {
        let n = cfg.num_cells();
        let passable = |i: usize| match cells[i] {
            Cell::Empty => true,
            Cell::Wall(_) => false,
            Cell::Color(_) => targets.contains(&i),
        };
        let mut dist = vec![UNREACHABLE; n];
        for &t in targets {
            dist[t] = 0;
        }
        loop {
            let mut changed = false;
            for i in 0..n {
                if !passable(i) {
                    continue;
                }
                for a in Action::ALL {
                    if let Some(j) = destination_on(cfg, cells, i, a) {
                        if passable(j) && dist[j] != UNREACHABLE && dist[j] + 1 < dist[i] {
                            dist[i] = dist[j] + 1;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        dist
    }

    #[test]
    fn open_grid_distance_is_manhattan() {
        let cfg = GridConfig {
            side: 5,
            colors: 1,
            walls: 0,
            max_steps: 50,
        };
        let mut cells = vec![Cell::Empty; 25];
        cells[12] = Cell::Color(0); // center
        let f = shortest_path_field(&cfg, &cells, &[12]);
        for r in 0..5usize {
            for c in 0..5usize {
                let want = (r as i32 - 2).unsigned_abs() + (c as i32 - 2).unsigned_abs();
                assert_eq!(f.dist[r * 5 + c], want);
            }
        }
    }

    #[test]
    fn enclosed_target_unreachable() {
        let cfg = GridConfig {
            side: 5,
            colors: 1,
            walls: 4,
            max_steps: 50,
        };
        let mut cells = vec![Cell::Empty; 25];
        cells[12] = Cell::Color(0);
        for (w, i) in [7usize, 11, 13, 17].into_iter().enumerate() {
            cells[i] = Cell::Wall(w as u8);
        }
        let f = shortest_path_field(&cfg, &cells, &[12]);
        for i in 0..25 {
            if i == 12 {
                assert_eq!(f.dist[i], 0);
            } else {
                assert_eq!(f.dist[i], UNREACHABLE);
            }
        }
    }

    #[test]
    fn bfs_matches_relaxation_oracle_on_random_layouts() {
        let cfg = cfg7();
        let task = Task::parse("0-1", &cfg).unwrap();
        for i in 0..5 {
            let (s, _) = env_reset(cfg, task.clone(), &mut rng_for(21, "bfs", i)).unwrap();
            let target = s.cell_of_color(0).unwrap();
            let f = shortest_path_field(&cfg, s.cells(), &[target]);
            let oracle = relaxation_oracle(&cfg, s.cells(), &[target]);
            assert_eq!(f.dist, oracle);
        }
    }

    #[test]
    fn unique_decreasing_action_is_deterministic() {
        // agent directly left of the target in a corridor
        let cfg = GridConfig {
            side: 3,
            colors: 1,
            walls: 2,
            max_steps: 10,
        };
        let mut cells = vec![Cell::Empty; 9];
        cells[5] = Cell::Color(0);
        cells[1] = Cell::Wall(0);
        cells[7] = Cell::Wall(1);
        let t = Task::new(vec![0], &cfg).unwrap();
        let s = EnvState::from_layout(cfg, t, cells, 4).unwrap();
        let f = field_for_target(&s).unwrap();
        let dec = decreasing_actions(&s, &f);
        assert_eq!(dec, vec![Action::Right]);
        let p = expert_action_distribution(&s, &f, 0.0);
        assert_eq!(p[Action::Right.index()], 1.0);
    }

    #[test]
    fn two_decreasing_actions_split_evenly() {
        let cfg = GridConfig {
            side: 3,
            colors: 1,
            walls: 0,
            max_steps: 10,
        };
        let mut cells = vec![Cell::Empty; 9];
        cells[8] = Cell::Color(0);
        let t = Task::new(vec![0], &cfg).unwrap();
        let s = EnvState::from_layout(cfg, t, cells, 0).unwrap();
        let f = field_for_target(&s).unwrap();
        let p = expert_action_distribution(&s, &f, 0.0);
        assert_eq!(p[Action::Right.index()], 0.5);
        assert_eq!(p[Action::Down.index()], 0.5);
    }

    /// Monte Carlo check of the epsilon mixture: 1 decreasing action, 3
    /// non-terminating actions, epsilon = 0.2 puts 0.8 + 0.2/3 on the
    /// decreasing action.
    #[test]
    fn epsilon_mixture_monte_carlo() {
        let cfg = GridConfig {
            side: 5,
            colors: 2,
            walls: 0,
            max_steps: 50,
        };
        let mut cells = vec![Cell::Empty; 25];
        cells[13] = Cell::Color(0); // right of agent at 12
        cells[11] = Cell::Color(1); // left of agent: terminating
        let t = Task::new(vec![0], &cfg).unwrap();
        let s = EnvState::from_layout(cfg, t, cells, 12).unwrap();
        let f = field_for_target(&s).unwrap();
        assert_eq!(decreasing_actions(&s, &f).len(), 1);
        assert_eq!(non_terminating_actions(&s).len(), 3);

        let p_analytic = expert_action_distribution(&s, &f, 0.2);
        let want = 0.8 + 0.2 / 3.0;
        assert!((p_analytic[Action::Right.index()] - want).abs() < 1e-12);

        let n = 100_000;
        let mut rng = rng_for(5, "mix", 0);
        let mut hits = 0usize;
        for _ in 0..n {
            if expert_policy(&s, &f, 0.2, &mut rng) == Action::Right {
                hits += 1;
            }
        }
        let emp = hits as f64 / n as f64;
        let sigma = (want * (1.0 - want) / n as f64).sqrt();
        assert!(
            (emp - want).abs() < 3.0 * sigma,
            "empirical {emp} vs analytic {want} (3 sigma = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn epsilon_zero_dataset_is_optimal_and_replayable() {
        let cfg = cfg7();
        let tasks: Vec<Task> = ["0-1-4-5", "2-3-6-7", "6-7-2-3-0-1"]
            .iter()
            .map(|s| Task::parse(s, &cfg).unwrap())
            .collect();
        let ds = generate_dataset(
            cfg,
            &tasks,
            &ExpertConfig {
                epsilon: 0.0,
                trajectories_per_task: 40,
                seed: 99,
            },
        );
        assert_eq!(ds.trajectories.len(), 120);
        for tr in &ds.trajectories {
            let task = ds.tasks[tr.task_idx as usize].clone();
            // optimality: episode length equals the planned chained total
            let s0 = EnvState::from_layout(
                cfg,
                task.clone(),
                tr.cells.clone(),
                tr.agent_cells[0] as usize,
            )
            .unwrap();
            assert_eq!(planned_total_length(&s0), Some(tr.len() as u32));
            // label structure: piecewise constant with one segment per pair
            assert_eq!(tr.segment_count(), task.len() / 2);

            // replay consistency: the stored actions reproduce the stored
            // positions, labels, and terminal success
            let mut s = s0;
            for (t, &a) in tr.actions.iter().enumerate() {
                assert_eq!(s.current_subgoal(), Some(tr.subgoals[t]));
                let r = env_step(&mut s, Action::from_index(a as usize));
                assert_eq!(s.agent_cell(), tr.agent_cells[t + 1] as usize);
                assert_eq!(r.done, t + 1 == tr.len());
            }
            assert_eq!(s.terminated(), Some(Cause::Success));
        }
    }

    #[test]
    fn noisy_dataset_still_succeeds() {
        let cfg = cfg7();
        let tasks = vec![Task::parse("0-1", &cfg).unwrap()];
        let ds = generate_dataset(
            cfg,
            &tasks,
            &ExpertConfig {
                epsilon: 0.3,
                trajectories_per_task: 20,
                seed: 3,
            },
        );
        assert_eq!(ds.trajectories.len(), 20);
        // noise can only lengthen episodes
        for tr in &ds.trajectories {
            let s0 = EnvState::from_layout(
                cfg,
                ds.tasks[0].clone(),
                tr.cells.clone(),
                tr.agent_cells[0] as usize,
            )
            .unwrap();
            assert!(tr.len() as u32 >= planned_total_length(&s0).unwrap());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = cfg7();
        let tasks = vec![Task::parse("0-1-2-3", &cfg).unwrap()];
        let e = ExpertConfig {
            epsilon: 0.1,
            trajectories_per_task: 10,
            seed: 123,
        };
        let a = generate_dataset(cfg, &tasks, &e);
        let b = generate_dataset(cfg, &tasks, &e);
        assert_eq!(a.trajectories, b.trajectories);
    }
}
