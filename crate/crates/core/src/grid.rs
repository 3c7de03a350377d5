//! The gridworld-pinpad environment.
//!
//! An agent on a `G x G` grid must step on a sequence of uniquely colored
//! cells in a task-specific order while avoiding `W` wall cells. Entering a
//! colored cell that is not the next one in the task ends the episode with
//! reward 0; completing the sequence ends it with reward 1; so does running
//! past the step cap (with reward 0). The four cardinal moves are the only
//! actions; a move into a wall or off the grid is a no-op that still burns a
//! step.
//!
//! Colored cells carry ids `0..O`; tasks are written in the line-oriented
//! dash format (`0-1-4-5-0-1`), one task per line.

use crate::util::Rng;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// The four cardinal moves.
pub const NUM_ACTIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Action {
    Up = 0,
    Right = 1,
    Down = 2,
    Left = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Right, Action::Down, Action::Left];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Action {
        Self::ALL[i]
    }

    /// (row delta, col delta)
    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Right => (0, 1),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
        }
    }
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid config: {0}")]
    InvalidConfig(String),
    #[error("invalid task `{task}`: {reason}")]
    InvalidTask { task: String, reason: String },
}

/// Static environment dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Grid side length G.
    pub side: usize,
    /// Number of uniquely colored cells O.
    pub colors: usize,
    /// Number of wall cells W.
    pub walls: usize,
    /// Episode step cap.
    pub max_steps: usize,
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), GridError> {
        if self.side < 2 {
            return Err(GridError::InvalidConfig(format!(
                "side {} < 2",
                self.side
            )));
        }
        if self.colors + self.walls + 1 > self.side * self.side {
            return Err(GridError::InvalidConfig(format!(
                "O + W + 1 = {} exceeds G^2 = {}",
                self.colors + self.walls + 1,
                self.side * self.side
            )));
        }
        if self.max_steps == 0 {
            return Err(GridError::InvalidConfig("max_steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.side * self.side
    }

    /// Per-cell channels: one per color id plus one per wall id.
    pub fn cell_channels(&self) -> usize {
        self.colors + self.walls
    }

    /// Observation length G^2 (W + O + 1): per-cell identity one-hots
    /// followed by the agent-position one-hot.
    pub fn obs_dim(&self) -> usize {
        self.num_cells() * (self.cell_channels() + 1)
    }

    /// Number of groundtruth subgoals: colors are grouped into consecutive
    /// pairs (0-1, 2-3, ...), one abstract action per pair.
    pub fn num_subgoals(&self) -> usize {
        self.colors.div_ceil(2)
    }
}

/// An ordered list of color ids to visit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    colors: Vec<u8>,
}

impl Task {
    pub fn new(colors: Vec<u8>, config: &GridConfig) -> Result<Task, GridError> {
        let render = colors
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join("-");
        if colors.is_empty() {
            return Err(GridError::InvalidTask {
                task: render,
                reason: "empty color sequence".into(),
            });
        }
        for &c in &colors {
            if (c as usize) >= config.colors {
                return Err(GridError::InvalidTask {
                    task: render,
                    reason: format!("color {c} out of range (O = {})", config.colors),
                });
            }
        }
        for w in colors.windows(2) {
            if w[0] == w[1] {
                return Err(GridError::InvalidTask {
                    task: render,
                    reason: format!("color {} repeats without an intervening visit", w[0]),
                });
            }
        }
        Ok(Task { colors })
    }

    /// Parse the dash-separated line format, e.g. `0-1-4-5`.
    pub fn parse(line: &str, config: &GridConfig) -> Result<Task, GridError> {
        let colors = line
            .trim()
            .split('-')
            .map(|tok| {
                tok.trim().parse::<u8>().map_err(|_| GridError::InvalidTask {
                    task: line.into(),
                    reason: format!("bad color token `{tok}`"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Task::new(colors, config)
    }

    /// Parse a whole task file: one task per line, `#` comments and blank
    /// lines ignored.
    pub fn parse_file(text: &str, config: &GridConfig) -> Result<Vec<Task>, GridError> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| Task::parse(l, config))
            .collect()
    }

    pub fn colors(&self) -> &[u8] {
        &self.colors
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    /// Subgoal (color pair) id of the target at `progress`.
    pub fn subgoal_at(&self, progress: usize) -> u8 {
        self.colors[progress] / 2
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.colors.iter().map(|c| c.to_string()).collect();
        write!(f, "{}", parts.join("-"))
    }
}

/// What occupies a grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cell {
    Empty,
    /// Colored cell with id in `0..O`.
    Color(u8),
    /// Wall with identity in `0..W` (walls have distinct observation
    /// channels, which is what makes the observation G^2(W+O+1)-dimensional).
    Wall(u8),
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cause {
    Success,
    WrongColor,
    Timeout,
}

/// Binary observation, stored sparsely as the sorted indices of the set bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub dim: usize,
    /// Sorted indices of the 1-entries.
    pub active: Vec<u32>,
}

impl Observation {
    pub fn to_dense<F: num_traits::Float>(&self) -> Vec<F> {
        let mut v = vec![F::zero(); self.dim];
        for &i in &self.active {
            v[i as usize] = F::one();
        }
        v
    }
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f32,
    pub done: bool,
    pub cause: Option<Cause>,
}

/// Full mutable world state. Value-like: clone it to branch an episode.
#[derive(Debug, Clone)]
pub struct EnvState {
    pub config: GridConfig,
    pub task: Task,
    cells: Vec<Cell>,
    agent: usize,
    progress: usize,
    steps: usize,
    terminated: Option<Cause>,
}

impl EnvState {
    /// Build a state from an explicit layout (used by tests and replay).
    pub fn from_layout(
        config: GridConfig,
        task: Task,
        cells: Vec<Cell>,
        agent: usize,
    ) -> Result<EnvState, GridError> {
        config.validate()?;
        if cells.len() != config.num_cells() {
            return Err(GridError::InvalidConfig(format!(
                "layout has {} cells, expected {}",
                cells.len(),
                config.num_cells()
            )));
        }
        if agent >= cells.len() || !matches!(cells[agent], Cell::Empty) {
            return Err(GridError::InvalidConfig(
                "agent must start on an empty cell".into(),
            ));
        }
        Ok(EnvState {
            config,
            task,
            cells,
            agent,
            progress: 0,
            steps: 0,
            terminated: None,
        })
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn agent_cell(&self) -> usize {
        self.agent
    }

    pub fn progress(&self) -> usize {
        self.progress
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn terminated(&self) -> Option<Cause> {
        self.terminated
    }

    pub fn is_done(&self) -> bool {
        self.terminated.is_some()
    }

    /// Color id the agent must visit next. `None` once the task is complete.
    pub fn current_target(&self) -> Option<u8> {
        self.task.colors().get(self.progress).copied()
    }

    /// Subgoal (color pair) id the agent is currently pursuing.
    pub fn current_subgoal(&self) -> Option<u8> {
        (self.progress < self.task.len()).then(|| self.task.subgoal_at(self.progress))
    }

    /// Grid cell index of color `c`, if placed.
    pub fn cell_of_color(&self, c: u8) -> Option<usize> {
        self.cells.iter().position(|&x| x == Cell::Color(c))
    }

    /// Destination of `action` from `cell`: `None` when blocked by the
    /// boundary or a wall (the move is a no-op).
    pub fn destination(&self, cell: usize, action: Action) -> Option<usize> {
        let g = self.config.side as isize;
        let (r, c) = ((cell / self.config.side) as isize, (cell % self.config.side) as isize);
        let (dr, dc) = action.delta();
        let (nr, nc) = (r + dr, c + dc);
        if nr < 0 || nr >= g || nc < 0 || nc >= g {
            return None;
        }
        let dest = (nr * g + nc) as usize;
        match self.cells[dest] {
            Cell::Wall(_) => None,
            _ => Some(dest),
        }
    }
}

impl fmt::Display for EnvState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.config.side {
            for c in 0..self.config.side {
                let i = r * self.config.side + c;
                let ch = if i == self.agent {
                    '@'
                } else {
                    match self.cells[i] {
                        Cell::Empty => '.',
                        Cell::Wall(_) => '#',
                        Cell::Color(x) => char::from_digit(x as u32, 36).unwrap_or('?'),
                    }
                };
                write!(f, "{ch}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Sample a fresh episode: colored cells, walls, and the agent are placed
/// uniformly at random without overlap. Deterministic for a fixed seed.
pub fn env_reset(
    config: GridConfig,
    task: Task,
    seed: &mut Rng,
) -> Result<(EnvState, Observation), GridError> {
    config.validate()?;
    for &c in task.colors() {
        if (c as usize) >= config.colors {
            return Err(GridError::InvalidTask {
                task: task.to_string(),
                reason: "task color out of range".into(),
            });
        }
    }
    let n = config.num_cells();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(seed);
    let mut cells = vec![Cell::Empty; n];
    let mut it = order.into_iter();
    for c in 0..config.colors {
        cells[it.next().unwrap()] = Cell::Color(c as u8);
    }
    for w in 0..config.walls {
        cells[it.next().unwrap()] = Cell::Wall(w as u8);
    }
    let free: Vec<usize> = it.collect();
    let agent = free[seed.gen_range(0..free.len())];
    let state = EnvState {
        config,
        task,
        cells,
        agent,
        progress: 0,
        steps: 0,
        terminated: None,
    };
    let obs = encode_observation(&state);
    Ok((state, obs))
}

/// Advance the environment by one action.
///
/// Panics if called on a terminated state: that is a caller contract
/// violation, not a recoverable condition.
pub fn env_step(state: &mut EnvState, action: Action) -> StepResult {
    assert!(
        state.terminated.is_none(),
        "env_step on a terminated state (cause {:?})",
        state.terminated
    );
    state.steps += 1;
    let mut reward = 0.0_f32;
    // A visit only happens when the agent enters the cell from a different
    // cell; blocked moves leave the agent in place and trigger nothing.
    if let Some(dest) = state.destination(state.agent, action) {
        state.agent = dest;
        if let Cell::Color(c) = state.cells[dest] {
            if Some(c) == state.current_target() {
                state.progress += 1;
                if state.progress == state.task.len() {
                    state.terminated = Some(Cause::Success);
                    reward = 1.0;
                }
            } else {
                state.terminated = Some(Cause::WrongColor);
            }
        }
    }
    if state.terminated.is_none() && state.steps >= state.config.max_steps {
        state.terminated = Some(Cause::Timeout);
    }
    StepResult {
        obs: encode_observation(state),
        reward,
        done: state.terminated.is_some(),
        cause: state.terminated,
    }
}

/// One-hot encode the world: per-cell identity channels (colors then walls),
/// then the agent-position block.
pub fn encode_observation(state: &EnvState) -> Observation {
    encode_obs_parts(&state.config, &state.cells, state.agent)
}

/// [`encode_observation`] over raw parts, for replaying stored layouts
/// without building an [`EnvState`].
pub fn encode_obs_parts(cfg: &GridConfig, cells: &[Cell], agent: usize) -> Observation {
    let ch = cfg.cell_channels();
    let mut active = Vec::with_capacity(cfg.colors + cfg.walls + 1);
    for (i, cell) in cells.iter().enumerate() {
        let slot = match cell {
            Cell::Empty => continue,
            Cell::Color(c) => *c as usize,
            Cell::Wall(w) => cfg.colors + *w as usize,
        };
        active.push((i * ch + slot) as u32);
    }
    active.push((cfg.num_cells() * ch + agent) as u32);
    Observation {
        dim: cfg.obs_dim(),
        active,
    }
}

/// Invert [`encode_observation`]: recover `(cells, agent)` from the bits.
pub fn decode_observation(obs: &Observation, config: &GridConfig) -> (Vec<Cell>, usize) {
    let ch = config.cell_channels();
    let layout_len = config.num_cells() * ch;
    let mut cells = vec![Cell::Empty; config.num_cells()];
    let mut agent = usize::MAX;
    for &a in &obs.active {
        let a = a as usize;
        if a < layout_len {
            let (cell, slot) = (a / ch, a % ch);
            cells[cell] = if slot < config.colors {
                Cell::Color(slot as u8)
            } else {
                Cell::Wall((slot - config.colors) as u8)
            };
        } else {
            agent = a - layout_len;
        }
    }
    assert!(agent != usize::MAX, "observation missing agent bit");
    (cells, agent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    fn cfg7() -> GridConfig {
        GridConfig {
            side: 7,
            colors: 8,
            walls: 4,
            max_steps: 100,
        }
    }

    fn task(cfg: &GridConfig, s: &str) -> Task {
        Task::parse(s, cfg).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(cfg7().validate().is_ok());
        let bad = GridConfig {
            side: 3,
            colors: 8,
            walls: 4,
            max_steps: 10,
        };
        assert!(bad.validate().is_err());
        let (c, t) = (bad, Task { colors: vec![0] });
        assert!(env_reset(c, t, &mut rng_for(0, "t", 0)).is_err());
    }

    #[test]
    fn task_parsing() {
        let cfg = cfg7();
        let t = task(&cfg, "0-1-4-5-0-1");
        assert_eq!(t.colors(), &[0, 1, 4, 5, 0, 1]);
        assert_eq!(t.to_string(), "0-1-4-5-0-1");
        assert!(Task::parse("0-0-1", &cfg).is_err());
        assert!(Task::parse("0-9", &cfg).is_err());
        assert!(Task::parse("", &cfg).is_err());
        let many = Task::parse_file("# pretraining\n0-1-4-5\n\n2-3-0-1\n", &cfg).unwrap();
        assert_eq!(many.len(), 2);
    }

    #[test]
    fn reset_is_deterministic_and_overlap_free() {
        let cfg = cfg7();
        let t = task(&cfg, "0-1");
        let (s1, _) = env_reset(cfg, t.clone(), &mut rng_for(42, "env", 0)).unwrap();
        let (s2, _) = env_reset(cfg, t.clone(), &mut rng_for(42, "env", 0)).unwrap();
        assert_eq!(s1.cells(), s2.cells());
        assert_eq!(s1.agent_cell(), s2.agent_cell());
        // 8 colors + 4 walls occupied, agent on an empty cell.
        let occupied = s1
            .cells()
            .iter()
            .filter(|c| !matches!(c, Cell::Empty))
            .count();
        assert_eq!(occupied, 12);
        assert!(matches!(s1.cells()[s1.agent_cell()], Cell::Empty));
        assert_eq!(s1.progress(), 0);
        assert_eq!(s1.steps(), 0);
    }

    /// 10^4 resets: the marginal agent-cell distribution must be uniform over
    /// the grid (every cell is free with equal probability by symmetry).
    /// Chi-squared test with 48 dof; critical value at p = 0.01 is 73.683.
    #[test]
    fn reset_agent_distribution_uniform() {
        let cfg = cfg7();
        let t = task(&cfg, "0-1");
        let n = 10_000;
        let mut counts = vec![0f64; cfg.num_cells()];
        for i in 0..n {
            let (s, _) = env_reset(cfg, t.clone(), &mut rng_for(7, "chi2", i)).unwrap();
            counts[s.agent_cell()] += 1.0;
        }
        let expected = n as f64 / cfg.num_cells() as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 73.683, "chi2 = {chi2} exceeds the p=0.01 critical value");
    }

    /// Full hand transition table on a crafted 3x3 instance.
    ///
    /// Layout (`@` agent, `#` wall, digits colors):
    /// ```text
    ///   0 . 1
    ///   . @ #
    ///   . . .
    /// ```
    #[test]
    fn hand_transition_table_3x3() {
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
        let t = Task::new(vec![0, 1], &cfg).unwrap();

        // (action sequence, expected agent cells after each step,
        //  expected progress, expected terminal cause, expected final reward)
        let table: &[(&[Action], &[usize], usize, Option<Cause>, f32)] = &[
            // blocked by wall: no-op
            (&[Action::Right], &[4], 0, None, 0.0),
            // off the grid from the bottom edge
            (&[Action::Down, Action::Down], &[7, 7], 0, None, 0.0),
            // visit 0 in order: up then left
            (&[Action::Up, Action::Left], &[1, 0], 1, None, 0.0),
            // wrong color first: up then right enters color 1 out of order
            (&[Action::Up, Action::Right], &[1, 2], 0, Some(Cause::WrongColor), 0.0),
            // full task: 0 then 1 (0 at cell0, walk down-right-right-up... )
            (
                &[Action::Up, Action::Left, Action::Down, Action::Down],
                &[1, 0, 3, 6],
                1,
                None,
                0.0,
            ),
            // timeout: five no-ops against the wall
            (
                &[Action::Right; 5],
                &[4, 4, 4, 4, 4],
                0,
                Some(Cause::Timeout),
                0.0,
            ),
        ];
        for (actions, cells_after, want_progress, want_cause, want_r) in table {
            let mut s =
                EnvState::from_layout(cfg, t.clone(), cells.clone(), 4).unwrap();
            let mut last_r = 0.0;
            for (a, &want_cell) in actions.iter().zip(cells_after.iter()) {
                let r = env_step(&mut s, *a);
                assert_eq!(s.agent_cell(), want_cell);
                last_r = r.reward;
            }
            assert_eq!(s.progress(), *want_progress);
            assert_eq!(s.terminated(), *want_cause);
            assert_eq!(last_r, *want_r);
        }

        // success path: reach 0, then go around the wall to 1.
        let mut s = EnvState::from_layout(cfg, t.clone(), cells.clone(), 4).unwrap();
        for a in [Action::Up, Action::Left] {
            env_step(&mut s, a);
        }
        assert_eq!(s.progress(), 1);
        // 0 -> 1 must avoid re-entering 0's cell; path 0(c0)->1->2 enters 1.
        let r = env_step(&mut s, Action::Right);
        assert!(!r.done);
        let r = env_step(&mut s, Action::Right);
        assert!(r.done);
        assert_eq!(r.reward, 1.0);
        assert_eq!(r.cause, Some(Cause::Success));
    }

    #[test]
    #[should_panic(expected = "terminated")]
    fn stepping_terminated_state_panics() {
        let cfg = GridConfig {
            side: 2,
            colors: 1,
            walls: 0,
            max_steps: 1,
        };
        let t = Task::new(vec![0], &cfg).unwrap();
        let mut cells = vec![Cell::Empty; 4];
        cells[3] = Cell::Color(0);
        let mut s = EnvState::from_layout(cfg, t, cells, 0).unwrap();
        env_step(&mut s, Action::Up); // no-op, hits max_steps
        env_step(&mut s, Action::Up);
    }

    #[test]
    fn encode_counts_and_dims() {
        // empty 2x2 grid (O=1, W=0), agent at 0, color at 3: exactly 2 ones.
        let cfg = GridConfig {
            side: 2,
            colors: 1,
            walls: 0,
            max_steps: 10,
        };
        let t = Task::new(vec![0], &cfg).unwrap();
        let mut cells = vec![Cell::Empty; 4];
        cells[3] = Cell::Color(0);
        let s = EnvState::from_layout(cfg, t, cells, 0).unwrap();
        let obs = encode_observation(&s);
        assert_eq!(obs.active.len(), 2);
        assert_eq!(obs.dim, 4 * 2);

        assert_eq!(cfg7().obs_dim(), 637);
    }

    /// Round-trip against an independently written decoder for 100 random
    /// states (the module decoder is checked against a scratch decoder that
    /// scans the dense vector rather than the sparse indices).
    #[test]
    fn encode_decode_roundtrip() {
        let cfg = cfg7();
        let t = task(&cfg, "0-1-2-3");
        for i in 0..100 {
            let (s, obs) = env_reset(cfg, t.clone(), &mut rng_for(3, "rt", i)).unwrap();
            let (cells, agent) = decode_observation(&obs, &cfg);
            assert_eq!(cells, s.cells());
            assert_eq!(agent, s.agent_cell());

            // independent dense-scan decoder
            let dense: Vec<f64> = obs.to_dense();
            assert_eq!(dense.len(), 637);
            assert_eq!(dense.iter().filter(|&&x| x == 1.0).count(), 13);
            let ch = cfg.cell_channels();
            let mut cells2 = vec![Cell::Empty; 49];
            let mut agent2 = None;
            for (j, &v) in dense.iter().enumerate() {
                if v != 1.0 {
                    continue;
                }
                if j < 49 * ch {
                    let (cell, slot) = (j / ch, j % ch);
                    cells2[cell] = if slot < 8 {
                        Cell::Color(slot as u8)
                    } else {
                        Cell::Wall((slot - 8) as u8)
                    };
                } else {
                    agent2 = Some(j - 49 * ch);
                }
            }
            assert_eq!(cells2, s.cells());
            assert_eq!(agent2, Some(s.agent_cell()));
        }
    }

    /// Fuzz: walls never occupied, episodes never exceed the cap, reward is
    /// 0 everywhere except possibly the final step, and cumulative reward is
    /// 0 or 1.
    #[test]
    fn random_action_fuzz() {
        let cfg = cfg7();
        let t = task(&cfg, "0-1-4-5");
        for ep in 0..50 {
            let mut rng = rng_for(11, "fuzz", ep);
            let (mut s, _) = env_reset(cfg, t.clone(), &mut rng).unwrap();
            let mut total = 0.0;
            let mut steps = 0;
            while !s.is_done() {
                let a = Action::from_index(rng.gen_range(0..NUM_ACTIONS));
                let r = env_step(&mut s, a);
                assert!(!matches!(s.cells()[s.agent_cell()], Cell::Wall(_)));
                if !r.done {
                    assert_eq!(r.reward, 0.0);
                }
                total += r.reward;
                steps += 1;
                assert!(steps <= cfg.max_steps);
            }
            assert!(total == 0.0 || total == 1.0);
            assert_eq!(steps, s.steps());
        }
    }
}
