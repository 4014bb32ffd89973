//! Expert demonstrations and their line-delimited JSON file format.
//!
//! The first line is a header `{"format_version":1,"seed":S,"n_traj":N}`;
//! every following line is one trajectory.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{expert_rollout, step, Action, EnvError, Grip, Object, TaskKind, TaskSpec, WorldState};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("dataset format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("expert failed on trajectory {0}")]
    ExpertFailed(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: WorldState,
    pub action: Action,
}

impl StepRecord {
    pub fn proprio(&self) -> [f64; 3] {
        self.state.proprio()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub traj_id: u64,
    pub task: TaskSpec,
    pub instruction: Vec<u32>,
    pub steps: Vec<StepRecord>,
    pub success: bool,
}

impl TrajectoryRecord {
    /// Expert actions `t .. t + horizon`, padded by repeating the last one.
    pub fn chunk(&self, t: usize, horizon: usize) -> Vec<[f64; 3]> {
        let last = self.steps.len() - 1;
        (0..horizon).map(|k| self.steps[(t + k).min(last)].action.to_array()).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub seed: u64,
    pub n_traj: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub seed: u64,
    pub records: Vec<TrajectoryRecord>,
}

impl Dataset {
    pub fn n_positions(&self) -> usize {
        self.records.iter().map(|r| r.len()).sum()
    }

    /// Every `(record index, timestep)` pair.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.records
            .iter()
            .enumerate()
            .flat_map(|(i, r)| (0..r.len()).map(move |t| (i, t)))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepLine {
    gripper: [f64; 2],
    grip: i32,
    objects: Vec<(u32, u32, f64, f64)>,
    action: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    traj_id: u64,
    task_kind: TaskKind,
    target_type: u32,
    instruction: Vec<u32>,
    steps: Vec<StepLine>,
}

/// Seed of trajectory `i` for a dataset seed.
pub fn trajectory_seed(dataset_seed: u64, i: u64) -> u64 {
    dataset_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ 0x5851_F42D
}

/// Rolls out the expert `n_traj` times, cycling over `tasks`.
pub fn generate_dataset(n_traj: usize, tasks: &[TaskSpec], seed: u64) -> Result<Dataset, DatasetError> {
    if n_traj == 0 || tasks.is_empty() {
        return Err(EnvError::Task("need at least one trajectory and one task".into()).into());
    }
    let mut records = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let task = &tasks[i % tasks.len()];
        let (steps, ok) = expert_rollout(task, trajectory_seed(seed, i as u64))?;
        if !ok {
            return Err(DatasetError::ExpertFailed(i as u64));
        }
        records.push(TrajectoryRecord {
            traj_id: i as u64,
            task: task.clone(),
            instruction: task.instruction.clone(),
            steps: steps.into_iter().map(|(state, action)| StepRecord { state, action }).collect(),
            success: true,
        });
    }
    Ok(Dataset { seed, records })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

fn to_line(r: &TrajectoryRecord) -> RecordLine {
    RecordLine {
        traj_id: r.traj_id,
        task_kind: r.task.kind,
        target_type: r.task.target_type,
        instruction: r.instruction.clone(),
        steps: r
            .steps
            .iter()
            .map(|s| StepLine {
                gripper: s.state.gripper,
                grip: match s.state.grip {
                    Grip::Open => 0,
                    Grip::Closed => 1,
                },
                objects: s.state.objects.iter().map(|o| (o.id, o.type_id, o.x, o.y)).collect(),
                action: s.action.to_array(),
            })
            .collect(),
    }
}

/// Rebuilds full world states from a record line by replaying its actions
/// from the first snapshot, and checks each replayed snapshot.
fn from_line(line: RecordLine, lineno: usize) -> Result<TrajectoryRecord, DatasetError> {
    let parse = |msg: String| DatasetError::Parse { line: lineno, msg };
    let first = line.steps.first().ok_or_else(|| parse("trajectory without steps".into()))?;
    let objects: Vec<Object> = first.objects.iter().map(|&(id, type_id, x, y)| Object { id, type_id, x, y }).collect();
    let target = objects
        .iter()
        .find(|o| o.type_id == line.target_type)
        .ok_or_else(|| parse("target type not present".into()))?
        .type_id;
    let distractors = objects.iter().filter(|o| o.type_id != target).map(|o| o.type_id).collect();
    let task = TaskSpec::from_record(line.task_kind, target, line.instruction.clone(), distractors);
    let mut state = WorldState {
        gripper: first.gripper,
        grip: if first.grip == 1 { Grip::Closed } else { Grip::Open },
        held: None,
        objects,
        basket: Default::default(),
        step_count: 0,
    };
    let mut steps = Vec::with_capacity(line.steps.len());
    for (k, s) in line.steps.iter().enumerate() {
        let grip = if s.grip == 1 { Grip::Closed } else { Grip::Open };
        let same = state.gripper == s.gripper
            && state.grip == grip
            && state.objects.len() == s.objects.len()
            && state.objects.iter().zip(&s.objects).all(|(o, &(id, ty, x, y))| o.id == id && o.type_id == ty && o.x == x && o.y == y);
        if !same {
            return Err(parse(format!("step {k} does not match replay")));
        }
        let action = Action::new(s.action[0], s.action[1], s.action[2]);
        let next = step(&state, action);
        steps.push(StepRecord { state, action });
        state = next;
    }
    let success = super::success_check(&state, &task);
    Ok(TrajectoryRecord { traj_id: line.traj_id, task, instruction: line.instruction, steps, success })
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let header = DatasetHeader { format_version: DATASET_FORMAT_VERSION, seed: data.seed, n_traj: data.records.len() };
    let enc = |e: serde_json::Error| DatasetError::Parse { line: 0, msg: e.to_string() };
    writeln!(w, "{}", serde_json::to_string(&header).map_err(enc)?).map_err(io_err(path))?;
    for r in &data.records {
        writeln!(w, "{}", serde_json::to_string(&to_line(r)).map_err(enc)?).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let head = lines.next().ok_or(DatasetError::Parse { line: 1, msg: "empty file".into() })?.map_err(io_err(path))?;
    let header: DatasetHeader =
        serde_json::from_str(&head).map_err(|e| DatasetError::Parse { line: 1, msg: e.to_string() })?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(DatasetError::Version { found: header.format_version, expected: DATASET_FORMAT_VERSION });
    }
    let mut records = Vec::with_capacity(header.n_traj);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine =
            serde_json::from_str(&line).map_err(|e| DatasetError::Parse { line: i + 2, msg: e.to_string() })?;
        records.push(from_line(parsed, i + 2)?);
    }
    if records.len() != header.n_traj {
        return Err(DatasetError::Parse { line: 0, msg: format!("header says {} records, found {}", header.n_traj, records.len()) });
    }
    Ok(Dataset { seed: header.seed, records })
}
