//! Trajectory dataset container and its on-disk record format.
//!
//! Layouts are static within an episode, so a trajectory stores the layout
//! once plus the per-step agent cells, actions, and subgoal labels;
//! observations are rebuilt on demand. The binary format is a little-endian
//! record file: a header with the grid dimensions and task table, then one
//! record per trajectory with length-prefixed integer arrays. A JSON index
//! manifest is written next to the records.

use crate::grid::{encode_obs_parts, Cell, GridConfig, Observation, Task};
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"IPDS";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad dataset file: {0}")]
    Format(String),
}

/// One successful expert episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Index into [`Dataset::tasks`].
    pub task_idx: u16,
    /// Static cell layout for the whole episode.
    pub cells: Vec<Cell>,
    /// Agent cell before step t, for t in 0..=T (so T+1 entries; entry T is
    /// the post-terminal position).
    pub agent_cells: Vec<u16>,
    /// Actions a_1..a_T as indices.
    pub actions: Vec<u8>,
    /// Groundtruth subgoal labels g_1..g_T (color-pair ids).
    pub subgoals: Vec<u8>,
}

impl Trajectory {
    /// Number of actions T.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Observation o_{t+1} for t in 0..=T (0 is the reset observation).
    pub fn observation(&self, cfg: &GridConfig, t: usize) -> Observation {
        encode_obs_parts(cfg, &self.cells, self.agent_cells[t] as usize)
    }

    /// All observations o_1..o_{T+1}.
    pub fn observations(&self, cfg: &GridConfig) -> Vec<Observation> {
        (0..=self.len()).map(|t| self.observation(cfg, t)).collect()
    }

    /// Number of distinct subgoal segments (the label is piecewise constant).
    pub fn segment_count(&self) -> usize {
        if self.subgoals.is_empty() {
            return 0;
        }
        1 + self
            .subgoals
            .windows(2)
            .filter(|w| w[0] != w[1])
            .count()
    }
}

/// A set of trajectories over a fixed grid config and task table.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: GridConfig,
    pub tasks: Vec<Task>,
    pub trajectories: Vec<Trajectory>,
}

/// Human-readable sidecar manifest.
#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grid: GridConfig,
    pub num_subgoals: usize,
    pub tasks: Vec<String>,
    pub trajectories_per_task: Vec<usize>,
    pub total_trajectories: usize,
    pub total_steps: usize,
    pub mean_length: f64,
}

impl Dataset {
    pub fn num_subgoals(&self) -> usize {
        self.config.num_subgoals()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    pub fn manifest(&self) -> DatasetManifest {
        let mut per_task = vec![0usize; self.tasks.len()];
        for t in &self.trajectories {
            per_task[t.task_idx as usize] += 1;
        }
        let total_steps = self.total_steps();
        DatasetManifest {
            grid: self.config,
            num_subgoals: self.num_subgoals(),
            tasks: self.tasks.iter().map(|t| t.to_string()).collect(),
            trajectories_per_task: per_task,
            total_trajectories: self.trajectories.len(),
            total_steps,
            mean_length: total_steps as f64 / self.trajectories.len().max(1) as f64,
        }
    }

    /// Split off the last `frac` of trajectories (round-robin over tasks is
    /// unnecessary: generation already interleaves tasks) for held-out
    /// evaluation. Returns (train, heldout).
    pub fn split_holdout(&self, frac: f64) -> (Dataset, Dataset) {
        let n_hold = ((self.trajectories.len() as f64) * frac).round() as usize;
        let cut = self.trajectories.len() - n_hold.min(self.trajectories.len());
        let (a, b) = self.trajectories.split_at(cut);
        (
            Dataset {
                config: self.config,
                tasks: self.tasks.clone(),
                trajectories: a.to_vec(),
            },
            Dataset {
                config: self.config,
                tasks: self.tasks.clone(),
                trajectories: b.to_vec(),
            },
        )
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), DatasetError> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        for v in [
            self.config.side,
            self.config.colors,
            self.config.walls,
            self.config.max_steps,
            self.num_subgoals(),
            self.tasks.len(),
        ] {
            put_u32(w, v as u32)?;
        }
        put_u32(w, self.trajectories.len() as u32)?;
        for task in &self.tasks {
            put_u32(w, task.colors().len() as u32)?;
            w.write_all(task.colors())?;
        }
        for tr in &self.trajectories {
            put_u32(w, tr.task_idx as u32)?;
            put_u32(w, tr.cells.len() as u32)?;
            let enc: Vec<u8> = tr.cells.iter().map(|c| encode_cell(*c, &self.config)).collect();
            w.write_all(&enc)?;
            put_u32(w, tr.agent_cells.len() as u32)?;
            for &a in &tr.agent_cells {
                w.write_all(&a.to_le_bytes())?;
            }
            put_u32(w, tr.actions.len() as u32)?;
            w.write_all(&tr.actions)?;
            put_u32(w, tr.subgoals.len() as u32)?;
            w.write_all(&tr.subgoals)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Dataset, DatasetError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DatasetError::Format("bad magic".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(DatasetError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let side = get_u32(r)? as usize;
        let colors = get_u32(r)? as usize;
        let walls = get_u32(r)? as usize;
        let max_steps = get_u32(r)? as usize;
        let _k = get_u32(r)?;
        let n_tasks = get_u32(r)? as usize;
        let n_traj = get_u32(r)? as usize;
        let config = GridConfig {
            side,
            colors,
            walls,
            max_steps,
        };
        config
            .validate()
            .map_err(|e| DatasetError::Format(e.to_string()))?;
        let mut tasks = Vec::with_capacity(n_tasks);
        for _ in 0..n_tasks {
            let len = get_u32(r)? as usize;
            let mut cs = vec![0u8; len];
            r.read_exact(&mut cs)?;
            tasks.push(
                Task::new(cs, &config).map_err(|e| DatasetError::Format(e.to_string()))?,
            );
        }
        let mut trajectories = Vec::with_capacity(n_traj);
        for _ in 0..n_traj {
            let task_idx = get_u32(r)? as u16;
            let n_cells = get_u32(r)? as usize;
            let mut enc = vec![0u8; n_cells];
            r.read_exact(&mut enc)?;
            let cells = enc
                .iter()
                .map(|&b| decode_cell(b, &config))
                .collect::<Result<Vec<_>, _>>()?;
            let n_agent = get_u32(r)? as usize;
            let mut agent_cells = Vec::with_capacity(n_agent);
            for _ in 0..n_agent {
                let mut b = [0u8; 2];
                r.read_exact(&mut b)?;
                agent_cells.push(u16::from_le_bytes(b));
            }
            let n_actions = get_u32(r)? as usize;
            let mut actions = vec![0u8; n_actions];
            r.read_exact(&mut actions)?;
            let n_sub = get_u32(r)? as usize;
            let mut subgoals = vec![0u8; n_sub];
            r.read_exact(&mut subgoals)?;
            if n_agent != n_actions + 1 || n_sub != n_actions {
                return Err(DatasetError::Format(
                    "trajectory array lengths are inconsistent".into(),
                ));
            }
            trajectories.push(Trajectory {
                task_idx,
                cells,
                agent_cells,
                actions,
                subgoals,
            });
        }
        Ok(Dataset {
            config,
            tasks,
            trajectories,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        let manifest = serde_json::to_string_pretty(&self.manifest())
            .expect("manifest serialization cannot fail");
        std::fs::write(path.with_extension("manifest.json"), manifest)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
        let bytes = std::fs::read(path)?;
        Dataset::read_from(&mut bytes.as_slice())
    }
}

fn encode_cell(c: Cell, cfg: &GridConfig) -> u8 {
    match c {
        Cell::Empty => 0,
        Cell::Color(x) => 1 + x,
        Cell::Wall(w) => 1 + cfg.colors as u8 + w,
    }
}

fn decode_cell(b: u8, cfg: &GridConfig) -> Result<Cell, DatasetError> {
    let colors = cfg.colors as u8;
    let walls = cfg.walls as u8;
    Ok(match b {
        0 => Cell::Empty,
        x if x <= colors => Cell::Color(x - 1),
        x if x <= colors + walls => Cell::Wall(x - 1 - colors),
        x => return Err(DatasetError::Format(format!("bad cell code {x}"))),
    })
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
