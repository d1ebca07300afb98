//! Offline transition data: records, episodes, datasets, collection,
//! subsampling and on-disk formats.
//!
//! The binary format is one JSON header line followed by little-endian
//! `f64` records laid out as `state, action, reward, next_state, done`.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::env::{Environment, Policy, TaskDistribution};
use crate::error::{check_dim, Error, Result};
use crate::SimRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// An ordered episode fragment starting at time `start_time`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub start_time: usize,
    /// Latent parameters of the environment that produced the episode, kept for analysis only.
    #[serde(default)]
    pub task: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// The state after the last transition, if any.
    pub fn last_state(&self) -> Option<&[f64]> {
        self.transitions.last().map(|t| t.next_state.as_slice())
    }

    /// Copy of the first `n` transitions.
    pub fn prefix(&self, n: usize) -> Trajectory {
        Trajectory {
            transitions: self.transitions[..n.min(self.len())].to_vec(),
            start_time: self.start_time,
            task: self.task.clone(),
        }
    }

    /// Checks state continuity, shared dimensions, finite rewards and that
    /// `done` appears at most on the final record.
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.transitions.first() else {
            return Ok(());
        };
        let (ds, da) = (first.state.len(), first.action.len());
        for (i, tr) in self.transitions.iter().enumerate() {
            check_dim("transition state", ds, tr.state.len())?;
            check_dim("transition next_state", ds, tr.next_state.len())?;
            check_dim("transition action", da, tr.action.len())?;
            if !tr.reward.is_finite() {
                return Err(Error::Format(format!("non-finite reward at record {i}")));
            }
            if tr.done && i + 1 != self.len() {
                return Err(Error::Format(format!("done flag before the end at record {i}")));
            }
            if let Some(next) = self.transitions.get(i + 1) {
                if next.state != tr.next_state {
                    return Err(Error::Format(format!("state discontinuity after record {i}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env_id: String,
    pub behavior_id: String,
    pub seed: u64,
    pub n_transitions: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub meta: DatasetMeta,
}

impl Dataset {
    /// Builds a dataset and fills in the transition count.
    pub fn new(trajectories: Vec<Trajectory>, mut meta: DatasetMeta) -> Result<Self> {
        meta.n_transitions = trajectories.iter().map(Trajectory::len).sum();
        let ds = Self { trajectories, meta };
        ds.validate()?;
        Ok(ds)
    }

    /// Number of transitions actually stored.
    pub fn len(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.iter().all(Trajectory::is_empty)
    }

    pub fn state_dim(&self) -> usize {
        self.meta.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.meta.action_dim
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    pub fn shortest_trajectory(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).min().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.trajectories.iter().map(Trajectory::len).sum();
        if total != self.meta.n_transitions {
            return Err(Error::Format(format!(
                "header says {} transitions, found {total}",
                self.meta.n_transitions
            )));
        }
        for traj in &self.trajectories {
            traj.validate()?;
            if let Some(tr) = traj.transitions.first() {
                check_dim("dataset state", self.meta.state_dim, tr.state.len())?;
                check_dim("dataset action", self.meta.action_dim, tr.action.len())?;
            }
        }
        Ok(())
    }

    /// Writes the binary format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = FileHeader {
            meta: self.meta.clone(),
            trajectory_lengths: self.trajectories.iter().map(Trajectory::len).collect(),
            start_times: self.trajectories.iter().map(|t| t.start_time).collect(),
            tasks: self.trajectories.iter().map(|t| t.task.clone()).collect(),
        };
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for tr in self.transitions() {
            for v in record_values(tr) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the binary format written by [`Dataset::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: FileHeader = serde_json::from_str(line.trim_end())?;
        let (ds, da) = (header.meta.state_dim, header.meta.action_dim);
        let width = 2 * ds + da + 2;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let expected = header.meta.n_transitions * width * 8;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "record block has {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if header.trajectory_lengths.len() != header.start_times.len() {
            return Err(Error::Format("trajectory table lengths disagree".into()));
        }
        let mut records = values.chunks_exact(width);
        let mut trajectories = Vec::with_capacity(header.trajectory_lengths.len());
        for (i, (&len, &start)) in header
            .trajectory_lengths
            .iter()
            .zip(&header.start_times)
            .enumerate()
        {
            let mut transitions = Vec::with_capacity(len);
            for _ in 0..len {
                let rec = records
                    .next()
                    .ok_or_else(|| Error::Format("trajectory table exceeds records".into()))?;
                transitions.push(Transition {
                    state: rec[..ds].to_vec(),
                    action: rec[ds..ds + da].to_vec(),
                    reward: rec[ds + da],
                    next_state: rec[ds + da + 1..2 * ds + da + 1].to_vec(),
                    done: rec[width - 1] != 0.0,
                });
            }
            trajectories.push(Trajectory {
                transitions,
                start_time: start,
                task: header.tasks.get(i).cloned().unwrap_or_default(),
            });
        }
        let ds = Dataset {
            trajectories,
            meta: header.meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// CSV export with one row per transition and a leading `episode` column.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let (ds, da) = (self.meta.state_dim, self.meta.action_dim);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["episode".to_string()];
        header.extend((0..ds).map(|i| format!("s{i}")));
        header.extend((0..da).map(|i| format!("a{i}")));
        header.push("reward".into());
        header.extend((0..ds).map(|i| format!("next_s{i}")));
        header.push("done".into());
        w.write_record(&header).map_err(csv_err)?;
        for (ep, traj) in self.trajectories.iter().enumerate() {
            for tr in &traj.transitions {
                let mut row = vec![ep.to_string()];
                row.extend(record_values(tr).map(|v| v.to_string()));
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn record_values(tr: &Transition) -> impl Iterator<Item = f64> + '_ {
    tr.state
        .iter()
        .chain(&tr.action)
        .copied()
        .chain([tr.reward])
        .chain(tr.next_state.iter().copied())
        .chain([if tr.done { 1.0 } else { 0.0 }])
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    meta: DatasetMeta,
    trajectory_lengths: Vec<usize>,
    start_times: Vec<usize>,
    #[serde(default)]
    tasks: Vec<Vec<f64>>,
}

/// Runs one episode of `behavior` in `env` and records it.
pub fn collect_episode(env: &dyn Environment, behavior: &dyn Policy, rng: &mut SimRng) -> Trajectory {
    let mut s = env.reset(rng);
    let horizon = env.horizon();
    let mut transitions = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let action = behavior.act(&s, rng);
        let step = env.step(&s, &action, rng);
        transitions.push(Transition {
            state: s,
            action,
            reward: step.reward,
            next_state: step.next_state.clone(),
            done: t + 1 == horizon,
        });
        s = step.next_state;
    }
    Trajectory {
        transitions,
        start_time: 0,
        task: env.latent_params(),
    }
}

fn check_policy(env_state: usize, env_action: usize, behavior: &dyn Policy) -> Result<()> {
    check_dim("behavior action", env_action, behavior.action_dim())?;
    if let Some(ds) = behavior.state_dim() {
        check_dim("behavior state", env_state, ds)?;
    }
    Ok(())
}

/// Collects `n_episodes` episodes from a single environment.
pub fn generate_dataset(
    env: &dyn Environment,
    behavior: &dyn Policy,
    n_episodes: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_episodes == 0 {
        return Err(Error::Empty("n_episodes"));
    }
    check_policy(env.state_dim(), env.action_dim(), behavior)?;
    let mut rng = SimRng::seed_from_u64(seed);
    let trajectories = (0..n_episodes)
        .map(|_| collect_episode(env, behavior, &mut rng))
        .collect();
    Dataset::new(
        trajectories,
        DatasetMeta {
            env_id: env.id(),
            behavior_id: behavior.id(),
            seed,
            n_transitions: 0,
            state_dim: env.state_dim(),
            action_dim: env.action_dim(),
        },
    )
}

/// Collects `n_episodes` episodes, each in a fresh environment drawn from `tasks`.
pub fn generate_task_dataset<T: TaskDistribution>(
    tasks: &T,
    behavior: &dyn Policy,
    n_episodes: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_episodes == 0 {
        return Err(Error::Empty("n_episodes"));
    }
    check_policy(tasks.state_dim(), tasks.action_dim(), behavior)?;
    let mut task_rng = SimRng::seed_from_u64(seed);
    let mut rng = SimRng::seed_from_u64(task_rng.next_u64());
    let trajectories = (0..n_episodes)
        .map(|_| {
            let env = tasks.sample(&mut task_rng);
            collect_episode(&env, behavior, &mut rng)
        })
        .collect();
    Dataset::new(
        trajectories,
        DatasetMeta {
            env_id: tasks.id(),
            behavior_id: behavior.id(),
            seed,
            n_transitions: 0,
            state_dim: tasks.state_dim(),
            action_dim: tasks.action_dim(),
        },
    )
}

/// Draws whole trajectories in shuffled order until `n_transitions` are
/// collected, trimming the last one drawn so the total is exactly
/// `min(n_transitions, N)`.
pub fn subsample(d: &Dataset, n_transitions: usize, seed: u64) -> Dataset {
    let mut rng = SimRng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..d.trajectories.len()).collect();
    order.shuffle(&mut rng);
    let mut remaining = n_transitions;
    let mut out = Vec::new();
    for i in order {
        if remaining == 0 {
            break;
        }
        let traj = &d.trajectories[i];
        if traj.is_empty() {
            continue;
        }
        let take = traj.len().min(remaining);
        let mut piece = traj.prefix(take);
        if take < traj.len() {
            if let Some(last) = piece.transitions.last_mut() {
                last.done = false;
            }
        }
        remaining -= take;
        out.push(piece);
    }
    let mut meta = d.meta.clone();
    meta.n_transitions = out.iter().map(Trajectory::len).sum();
    Dataset {
        trajectories: out,
        meta,
    }
}
