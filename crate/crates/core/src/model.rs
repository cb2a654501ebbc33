//! Domain types shared by every module: actions, world states, trajectories,
//! decompositions, partitions and demonstration datasets.
//!
//! Timesteps are 1-based everywhere a [`Partition`] is involved. A partition of
//! horizon `H` into `K` segments is stored as `K - 1` strictly increasing cut
//! points in `[1, H - 1]`; segment `k` covers `(cuts[k-1], cuts[k]]` with the
//! implicit sentinels `cuts[-1] = 0` and `cuts[K-1] = H`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::proposer::grammar;

/// Action dimension: three translation deltas, three rotation deltas, one gripper command.
pub const ACTION_DIM: usize = 7;

/// Chunk length used for per-chunk instruction labels.
pub const LABEL_CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("line {line}: malformed record: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: dimension mismatch (expected {expected}, got {got})")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: action component {component} = {value} outside (0,1)")]
    ActionOutOfRange {
        line: usize,
        component: usize,
        value: f64,
    },
    #[error("norm stats: standard deviation of dimension {0} is not strictly positive")]
    ZeroStd(usize),
    #[error("unsupported schema version {0}")]
    Version(u32),
    #[error("trajectory length {len} exceeds horizon {horizon}")]
    TooLong { len: usize, horizon: usize },
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("invalid decomposition: {0}")]
    Decomposition(String),
    #[error("line {line}: {msg}")]
    Invariant { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A normalized action; every component lies in the open interval (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionVec(pub [f64; ACTION_DIM]);

impl ActionVec {
    /// The all-0.5 action: zero deltas, gripper at the open threshold.
    pub const NEUTRAL: ActionVec = ActionVec([0.5; ACTION_DIM]);

    pub fn new(components: [f64; ACTION_DIM]) -> Result<Self, DataError> {
        let a = ActionVec(components);
        a.validate(0)?;
        Ok(a)
    }

    pub fn validate(&self, line: usize) -> Result<(), DataError> {
        for (component, &value) in self.0.iter().enumerate() {
            if !(value > 0.0 && value < 1.0) {
                return Err(DataError::ActionOutOfRange {
                    line,
                    component,
                    value,
                });
            }
        }
        Ok(())
    }

    pub fn squared_distance(&self, other: &ActionVec) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Per-dimension mean and standard deviation of raw actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; ACTION_DIM],
    pub std: [f64; ACTION_DIM],
}

impl NormStats {
    pub fn new(mean: [f64; ACTION_DIM], std: [f64; ACTION_DIM]) -> Result<Self, DataError> {
        let stats = NormStats { mean, std };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (i, &s) in self.std.iter().enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(DataError::ZeroStd(i));
            }
        }
        Ok(())
    }

    /// Empirical statistics of a set of raw action vectors.
    pub fn from_raw(raw: &[[f64; ACTION_DIM]]) -> Result<Self, DataError> {
        if raw.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let n = raw.len() as f64;
        let mut mean = [0.0; ACTION_DIM];
        for r in raw {
            for d in 0..ACTION_DIM {
                mean[d] += r[d] / n;
            }
        }
        let mut std = [0.0; ACTION_DIM];
        for r in raw {
            for d in 0..ACTION_DIM {
                std[d] += (r[d] - mean[d]).powi(2) / n;
            }
        }
        for s in std.iter_mut() {
            *s = s.sqrt();
        }
        NormStats::new(mean, std)
    }

    /// z-score per dimension of a raw action.
    pub fn z_score(&self, raw: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        let mut z = [0.0; ACTION_DIM];
        for d in 0..ACTION_DIM {
            z[d] = (raw[d] - self.mean[d]) / self.std[d];
        }
        z
    }

    /// Affine standardization followed by a logistic squash.
    pub fn normalize(&self, raw: &[f64; ACTION_DIM]) -> ActionVec {
        let z = self.z_score(raw);
        let mut out = [0.0; ACTION_DIM];
        for d in 0..ACTION_DIM {
            // keep strictly inside (0,1) even when the logistic saturates in f64
            out[d] = logistic(z[d]).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
        }
        ActionVec(out)
    }

    pub fn denormalize(&self, action: &ActionVec) -> [f64; ACTION_DIM] {
        let mut raw = [0.0; ACTION_DIM];
        for d in 0..ACTION_DIM {
            raw[d] = self.mean[d] + self.std[d] * logit(action.0[d]);
        }
        raw
    }
}

/// Normalizes a sequence of raw action vectors.
pub fn normalize_actions(
    raw: &[Vec<f64>],
    stats: &NormStats,
) -> Result<Vec<ActionVec>, DataError> {
    stats.validate()?;
    raw.iter()
        .enumerate()
        .map(|(i, r)| {
            let arr: [f64; ACTION_DIM] =
                r.as_slice()
                    .try_into()
                    .map_err(|_| DataError::DimensionMismatch {
                        line: i,
                        expected: ACTION_DIM,
                        got: r.len(),
                    })?;
            Ok(stats.normalize(&arr))
        })
        .collect()
}

/// Position and heading of one object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub pos: [f64; 3],
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub gripper_pos: [f64; 3],
    /// yaw, pitch, roll in radians
    pub gripper_rot: [f64; 3],
    pub gripper_open: f64,
    pub object_poses: BTreeMap<String, ObjectPose>,
    #[serde(default)]
    pub held_object: Option<String>,
}

impl State {
    pub fn validate(&self, lo: &[f64; 3], hi: &[f64; 3]) -> Result<(), String> {
        if let Some(h) = &self.held_object {
            if !self.object_poses.contains_key(h) {
                return Err(format!("held object '{h}' is not in the scene"));
            }
        }
        if !(0.0..=1.0).contains(&self.gripper_open) {
            return Err(format!("gripper_open {} outside [0,1]", self.gripper_open));
        }
        for (id, pose) in &self.object_poses {
            for d in 0..3 {
                if pose.pos[d] < lo[d] - 1e-9 || pose.pos[d] > hi[d] + 1e-9 {
                    return Err(format!("object '{id}' outside workspace bounds"));
                }
            }
        }
        Ok(())
    }

    pub fn held_pose(&self) -> Option<&ObjectPose> {
        self.held_object
            .as_ref()
            .and_then(|h| self.object_poses.get(h))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: State,
    pub raw_action: [f64; ACTION_DIM],
    #[serde(skip)]
    pub action: Option<ActionVec>,
}

impl Step {
    pub fn new(state: State, raw_action: [f64; ACTION_DIM], stats: &NormStats) -> Self {
        let action = Some(stats.normalize(&raw_action));
        Step {
            state,
            raw_action,
            action,
        }
    }

    /// Normalized action. Steps built through [`Step::new`] or the loader always carry one.
    pub fn action(&self) -> ActionVec {
        self.action.expect("step action not normalized")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instruction: String,
    pub steps: Vec<Step>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high_labels: Option<Vec<String>>,
    /// Index of the expert stage that produced each step, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_ids: Option<Vec<usize>>,
}

pub fn chunk_count(len: usize) -> usize {
    len.div_ceil(LABEL_CHUNK)
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.low_labels.is_some() && self.high_labels.is_some()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.steps.is_empty() {
            return Err("trajectory has no steps".into());
        }
        let chunks = chunk_count(self.len());
        for (name, labels) in [("low_labels", &self.low_labels), ("high_labels", &self.high_labels)] {
            if let Some(l) = labels {
                if l.len() != chunks {
                    return Err(format!(
                        "{name} has {} entries, expected {chunks} chunks",
                        l.len()
                    ));
                }
            }
        }
        if let Some(s) = &self.stage_ids {
            if s.len() != self.len() {
                return Err("stage_ids length differs from step count".into());
            }
        }
        Ok(())
    }

    /// Per-step (high, low) labels, or `None` when the trajectory is unlabeled.
    pub fn step_labels(&self, t: usize) -> Option<(&str, &str)> {
        let c = t / LABEL_CHUNK;
        Some((
            self.high_labels.as_ref()?.get(c)?.as_str(),
            self.low_labels.as_ref()?.get(c)?.as_str(),
        ))
    }
}

/// Fixed-horizon view of a trajectory; steps past the true length are masked out.
#[derive(Debug, Clone)]
pub struct MaskedTrajectory<'a> {
    pub trajectory: &'a Trajectory,
    pub horizon: usize,
    pub mask: Vec<bool>,
}

impl MaskedTrajectory<'_> {
    pub fn valid_len(&self) -> usize {
        self.trajectory.len()
    }
}

pub fn pad_length(traj: &Trajectory, horizon: usize) -> Result<MaskedTrajectory<'_>, DataError> {
    if traj.len() > horizon {
        return Err(DataError::TooLong {
            len: traj.len(),
            horizon,
        });
    }
    let mask = (0..horizon).map(|t| t < traj.len()).collect();
    Ok(MaskedTrajectory {
        trajectory: traj,
        horizon,
        mask,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subtask {
    pub high: String,
    pub skills: Vec<String>,
}

/// An ordered list of subtasks; each carries a high-level string and ordered skill strings.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Decomposition {
    pub subtasks: Vec<Subtask>,
}

impl Decomposition {
    pub fn new(subtasks: Vec<Subtask>) -> Result<Self, DataError> {
        let d = Decomposition { subtasks };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.subtasks.is_empty() {
            return Err(DataError::Decomposition("no subtasks".into()));
        }
        for (k, s) in self.subtasks.iter().enumerate() {
            if s.skills.is_empty() {
                return Err(DataError::Decomposition(format!("subtask {k} has no skills")));
            }
            for skill in &s.skills {
                grammar::parse_skill(skill)
                    .map_err(|e| DataError::Decomposition(format!("subtask {k}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.subtasks.len()
    }

    /// Flattened (high, low) pairs in execution order.
    pub fn flatten(&self) -> Vec<(String, String)> {
        self.subtasks
            .iter()
            .flat_map(|s| s.skills.iter().map(move |l| (s.high.clone(), l.clone())))
            .collect()
    }
}

impl fmt::Display for Decomposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, s) in self.subtasks.iter().enumerate() {
            if k > 0 {
                write!(f, " | ")?;
            }
            write!(f, "{}: [{}]", s.high, s.skills.join("; "))?;
        }
        Ok(())
    }
}

/// A composition of `{1..H}` into `K` contiguous nonempty segments.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    cuts: Vec<usize>,
    horizon: usize,
}

impl Partition {
    pub fn new(cuts: Vec<usize>, horizon: usize) -> Result<Self, DataError> {
        if horizon == 0 {
            return Err(DataError::Partition("horizon must be positive".into()));
        }
        let mut prev = 0;
        for &c in &cuts {
            if c <= prev || c >= horizon {
                return Err(DataError::Partition(format!(
                    "cuts {cuts:?} not strictly increasing within [1, {}]",
                    horizon - 1
                )));
            }
            prev = c;
        }
        Ok(Partition { cuts, horizon })
    }

    /// The single segment covering the whole horizon.
    pub fn whole(horizon: usize) -> Self {
        Partition {
            cuts: Vec::new(),
            horizon,
        }
    }

    pub fn cuts(&self) -> &[usize] {
        &self.cuts
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn k(&self) -> usize {
        self.cuts.len() + 1
    }

    /// Segment `k` (0-based) as the 1-based inclusive range `(start, end]`, returned as `(start, end)`.
    pub fn bounds(&self, k: usize) -> (usize, usize) {
        let start = if k == 0 { 0 } else { self.cuts[k - 1] };
        let end = if k == self.cuts.len() {
            self.horizon
        } else {
            self.cuts[k]
        };
        (start, end)
    }

    pub fn segment_sizes(&self) -> Vec<usize> {
        (0..self.k())
            .map(|k| {
                let (a, b) = self.bounds(k);
                b - a
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prior,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub role: Role,
    pub norm_stats: NormStats,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn validate(&self) -> Result<(), DataError> {
        self.norm_stats.validate()?;
        if self.trajectories.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        for (i, t) in self.trajectories.iter().enumerate() {
            t.validate().map_err(|msg| DataError::Invariant { line: i + 2, msg })?;
        }
        if self.role == Role::Target {
            let first = &self.trajectories[0].instruction;
            if let Some(i) = self.trajectories.iter().position(|t| &t.instruction != first) {
                return Err(DataError::Invariant {
                    line: i + 2,
                    msg: "target dataset trajectories must share one instruction".into(),
                });
            }
        }
        Ok(())
    }

    pub fn instruction(&self) -> &str {
        &self.trajectories[0].instruction
    }

    pub fn is_labeled(&self) -> bool {
        self.trajectories.iter().all(Trajectory::is_labeled)
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

pub mod io {
    //! Line-delimited JSON demonstration files: one header line, then one
    //! record per trajectory.

    use std::fs::File;
    use std::io::{BufRead, BufReader, BufWriter, Read, Write};
    use std::path::Path;

    use serde::{Deserialize, Serialize};

    use super::*;

    pub const SCHEMA_VERSION: u32 = 1;
    const FORMAT: &str = "palo-demos";

    #[derive(Serialize, Deserialize)]
    struct Header {
        format: String,
        version: u32,
        d_a: usize,
        role: Role,
        norm_stats: NormStats,
    }

    #[derive(Serialize, Deserialize)]
    struct StepRecord {
        state: State,
        raw_action: Vec<f64>,
    }

    #[derive(Serialize, Deserialize)]
    struct Labels {
        low: Vec<String>,
        high: Vec<String>,
    }

    #[derive(Serialize, Deserialize)]
    struct TrajectoryRecord {
        instruction: String,
        steps: Vec<StepRecord>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<Labels>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stage_ids: Option<Vec<usize>>,
    }

    pub fn write_dataset<W: Write>(data: &Dataset, mut out: W) -> Result<(), DataError> {
        let header = Header {
            format: FORMAT.into(),
            version: SCHEMA_VERSION,
            d_a: ACTION_DIM,
            role: data.role,
            norm_stats: data.norm_stats.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for t in &data.trajectories {
            let labels = match (&t.low_labels, &t.high_labels) {
                (Some(low), Some(high)) => Some(Labels {
                    low: low.clone(),
                    high: high.clone(),
                }),
                _ => None,
            };
            let rec = TrajectoryRecord {
                instruction: t.instruction.clone(),
                steps: t
                    .steps
                    .iter()
                    .map(|s| StepRecord {
                        state: s.state.clone(),
                        raw_action: s.raw_action.to_vec(),
                    })
                    .collect(),
                labels,
                stage_ids: t.stage_ids.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_dataset(data: &Dataset, path: &Path) -> Result<(), DataError> {
        let f = File::create(path)?;
        write_dataset(data, BufWriter::new(f))
    }

    pub fn read_dataset<R: Read>(input: R) -> Result<Dataset, DataError> {
        let reader = BufReader::new(input);
        let mut lines = reader.lines().enumerate();
        let header: Header = match lines.next() {
            None => return Err(DataError::EmptyDataset),
            Some((_, line)) => serde_json::from_str(&line?).map_err(|e| DataError::Malformed {
                line: 1,
                msg: e.to_string(),
            })?,
        };
        if header.format != FORMAT {
            return Err(DataError::Malformed {
                line: 1,
                msg: format!("unknown format '{}'", header.format),
            });
        }
        if header.version != SCHEMA_VERSION {
            return Err(DataError::Version(header.version));
        }
        if header.d_a != ACTION_DIM {
            return Err(DataError::DimensionMismatch {
                line: 1,
                expected: ACTION_DIM,
                got: header.d_a,
            });
        }
        header.norm_stats.validate()?;
        let stats = header.norm_stats;
        let mut trajectories = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrajectoryRecord =
                serde_json::from_str(&line).map_err(|e| DataError::Malformed {
                    line: line_no,
                    msg: e.to_string(),
                })?;
            let mut steps = Vec::with_capacity(rec.steps.len());
            for s in rec.steps {
                let raw: [f64; ACTION_DIM] =
                    s.raw_action
                        .as_slice()
                        .try_into()
                        .map_err(|_| DataError::DimensionMismatch {
                            line: line_no,
                            expected: ACTION_DIM,
                            got: s.raw_action.len(),
                        })?;
                let step = Step::new(s.state, raw, &stats);
                step.action().validate(line_no)?;
                steps.push(step);
            }
            let (low_labels, high_labels) = match rec.labels {
                Some(l) => (Some(l.low), Some(l.high)),
                None => (None, None),
            };
            let t = Trajectory {
                instruction: rec.instruction,
                steps,
                low_labels,
                high_labels,
                stage_ids: rec.stage_ids,
            };
            t.validate()
                .map_err(|msg| DataError::Invariant { line: line_no, msg })?;
            trajectories.push(t);
        }
        let data = Dataset {
            role: header.role,
            norm_stats: stats,
            trajectories,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
        read_dataset(File::open(path)?)
    }
}

pub use io::{load_dataset, save_dataset};
