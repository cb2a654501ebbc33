//! Kinematic tabletop world, scripted experts and the rollout executor.
//!
//! World frame: +x forward (away from the camera), +y left, +z up. Rotation
//! channels are yaw, pitch, roll; yaw+ is clockwise seen from above, pitch+
//! tilts up, roll+ tilts left.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ActionVec, Decomposition, NormStats, ObjectPose, Role, State, Step, Subtask, Trajectory,
    ACTION_DIM,
};
use crate::proposer::grammar::{Direction, GripperAction, Rotation, SkillPrimitive};
use crate::seed;

pub const HOVER_Z: f64 = 0.15;
pub const LOW_Z: f64 = 0.02;
pub const GRIPPER_START: [f64; 3] = [0.25, 0.0, 0.15];
pub const ROT_LIMIT: f64 = 1.5;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("n_per_task must be at least 1")]
    NoEpisodes,
    #[error("task '{task}': no feasible episode after {tries} attempts")]
    Infeasible { task: String, tries: usize },
    #[error("task '{task}': could not place objects: {msg}")]
    Placement { task: String, msg: String },
    #[error("unknown task '{0}'")]
    UnknownTask(String),
    #[error("invalid world config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    /// Can be picked up.
    Graspable,
    /// Static receptacle.
    Container,
    /// Static but moved by a lowered tool.
    Pushable,
    /// Graspable; pushes pushables while held below the push height.
    Tool,
    /// Graspable drawer; moves only along x while held.
    Slider,
}

impl ObjectKind {
    pub fn graspable(self) -> bool {
        matches!(self, ObjectKind::Graspable | ObjectKind::Tool | ObjectKind::Slider)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub bounds_lo: [f64; 3],
    pub bounds_hi: [f64; 3],
    pub grasp_radius: f64,
    pub push_radius: f64,
    pub push_height: f64,
    /// Multiplier applied to denormalized translation deltas.
    pub step_size: f64,
    /// Expert wobble, as a fraction of the normalization standard deviation.
    pub noise: f64,
    /// Proportional gain of the scripted expert.
    pub gain: f64,
    /// Allowed range of drawer x while held.
    pub slider_range: [f64; 2],
    pub norm_stats: NormStats,
    pub catalog: BTreeMap<String, ObjectKind>,
    /// Half-width of the uniform initial gripper roll in prior-task episodes.
    pub prior_start_roll: f64,
    pub seed: u64,
}

pub fn canonical_stats() -> NormStats {
    NormStats {
        mean: [0.0; ACTION_DIM],
        std: [0.1, 0.1, 0.05, 0.2, 0.2, 0.2, 1.0],
    }
}

pub const CATALOG: [(&str, ObjectKind); 28] = [
    ("carrot", ObjectKind::Graspable),
    ("pot", ObjectKind::Pushable),
    ("corn", ObjectKind::Graspable),
    ("plate", ObjectKind::Container),
    ("mushroom", ObjectKind::Graspable),
    ("bowl", ObjectKind::Container),
    ("cup", ObjectKind::Graspable),
    ("drawer", ObjectKind::Slider),
    ("brush", ObjectKind::Tool),
    ("beans", ObjectKind::Pushable),
    ("tray", ObjectKind::Container),
    ("spatula", ObjectKind::Tool),
    ("pan", ObjectKind::Pushable),
    ("pen", ObjectKind::Graspable),
    ("knife", ObjectKind::Graspable),
    ("beet", ObjectKind::Graspable),
    ("box", ObjectKind::Container),
    ("ladle", ObjectKind::Tool),
    ("scoop", ObjectKind::Graspable),
    ("towel", ObjectKind::Tool),
    ("mints", ObjectKind::Pushable),
    ("swiffer", ObjectKind::Tool),
    ("skittles", ObjectKind::Pushable),
    ("bin", ObjectKind::Container),
    ("container", ObjectKind::Container),
    ("marker", ObjectKind::Graspable),
    ("spoon", ObjectKind::Graspable),
    ("cleaner", ObjectKind::Container),
];

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            bounds_lo: [0.0, -0.5, 0.0],
            bounds_hi: [1.0, 0.5, 0.3],
            grasp_radius: 0.06,
            push_radius: 0.08,
            push_height: 0.06,
            step_size: 1.0,
            noise: 0.05,
            gain: 0.5,
            slider_range: [0.35, 0.8],
            norm_stats: canonical_stats(),
            catalog: CATALOG.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            prior_start_roll: 0.6,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.grasp_radius > 0.0) {
            return Err(SimError::Config("grasp radius must be positive".into()));
        }
        for d in 0..3 {
            if !(self.bounds_lo[d] < self.bounds_hi[d]) {
                return Err(SimError::Config(format!("bounds on axis {d} are empty")));
            }
        }
        if !(self.prior_start_roll >= 0.0) {
            return Err(SimError::Config("prior start roll must be non-negative".into()));
        }
        self.norm_stats
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn kind(&self, id: &str) -> ObjectKind {
        self.catalog.get(id).copied().unwrap_or(ObjectKind::Graspable)
    }

    fn clamp_pos(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = p;
        for d in 0..3 {
            out[d] = p[d].clamp(self.bounds_lo[d], self.bounds_hi[d]);
        }
        out
    }
}

pub fn horizontal_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Offset of the held object from the gripper in the xy plane; the held object shares the gripper height.
fn held_offset(state: &State) -> Option<(String, [f64; 2])> {
    let id = state.held_object.clone()?;
    let p = state.object_poses[&id].pos;
    Some((
        id,
        [p[0] - state.gripper_pos[0], p[1] - state.gripper_pos[1]],
    ))
}

/// One world step. Total: out-of-range motion is clamped.
pub fn step(state: &State, action: &ActionVec, cfg: &WorldConfig) -> State {
    let raw = cfg.norm_stats.denormalize(action);
    let mut s = state.clone();
    let close = action.0[6] > 0.5;
    let was_open = state.gripper_open > 0.5;

    if close {
        s.gripper_open = 0.0;
        if was_open && s.held_object.is_none() {
            let g = s.gripper_pos;
            let nearest = s
                .object_poses
                .iter()
                .filter(|(id, _)| cfg.kind(id).graspable())
                .map(|(id, pose)| (horizontal_dist(&pose.pos, &g), id.clone()))
                .filter(|(d, _)| *d < cfg.grasp_radius)
                .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
            if let Some((_, id)) = nearest {
                let pose = s.object_poses.get_mut(&id).expect("object exists");
                pose.pos[2] = g[2];
                s.held_object = Some(id);
            }
        }
    } else {
        s.gripper_open = 1.0;
        if let Some(id) = s.held_object.take() {
            let pose = s.object_poses.get_mut(&id).expect("held object exists");
            pose.pos[2] = 0.0;
        }
    }

    let delta = [
        raw[0] * cfg.step_size,
        raw[1] * cfg.step_size,
        raw[2] * cfg.step_size,
    ];
    let old_g = s.gripper_pos;
    let held = held_offset(&s);
    let held_kind = held.as_ref().map(|(id, _)| cfg.kind(id));

    if held_kind == Some(ObjectKind::Slider) {
        let (id, off) = held.clone().expect("slider held");
        let obj_x = (old_g[0] + delta[0] + off[0]).clamp(cfg.slider_range[0], cfg.slider_range[1]);
        let obj_x = obj_x.clamp(cfg.bounds_lo[0], cfg.bounds_hi[0]);
        s.gripper_pos[0] = obj_x - off[0];
        let pose = s.object_poses.get_mut(&id).expect("held object exists");
        pose.pos[0] = obj_x;
    } else {
        let mut g = cfg.clamp_pos([old_g[0] + delta[0], old_g[1] + delta[1], old_g[2] + delta[2]]);
        if let Some((id, off)) = &held {
            // keep the carried object inside the workspace as well
            for d in 0..2 {
                let lo = cfg.bounds_lo[d] - off[d];
                let hi = cfg.bounds_hi[d] - off[d];
                g[d] = g[d].clamp(lo.min(hi), hi.max(lo));
            }
            let pose = s.object_poses.get_mut(id).expect("held object exists");
            pose.pos = [g[0] + off[0], g[1] + off[1], g[2]];
        }
        s.gripper_pos = g;
        for d in 0..3 {
            s.gripper_rot[d] = (state.gripper_rot[d] + raw[3 + d]).clamp(-ROT_LIMIT, ROT_LIMIT);
        }
        if let Some((id, _)) = &held {
            let dyaw = s.gripper_rot[0] - state.gripper_rot[0];
            let pose = s.object_poses.get_mut(id).expect("held object exists");
            pose.yaw += dyaw;
        }
    }

    if let (Some((tool, _)), Some(ObjectKind::Tool)) = (&held, held_kind) {
        let tool_before = state.object_poses[tool].pos;
        let tool_after = s.object_poses[tool].pos;
        if tool_after[2] < cfg.push_height {
            let dx = s.gripper_pos[0] - old_g[0];
            let dy = s.gripper_pos[1] - old_g[1];
            let ids: Vec<String> = s.object_poses.keys().cloned().collect();
            for id in ids {
                if &id == tool || cfg.kind(&id) != ObjectKind::Pushable {
                    continue;
                }
                let p = s.object_poses[&id].pos;
                if horizontal_dist(&p, &tool_before) < cfg.push_radius {
                    let moved = cfg.clamp_pos([p[0] + dx, p[1] + dy, p[2]]);
                    s.object_poses.get_mut(&id).expect("exists").pos = moved;
                }
            }
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    LongHorizon,
    UnseenSkill,
    Prior,
}

/// Initial placement of one object: absolute ranges, or ranges relative to an earlier object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub id: String,
    pub x: [f64; 2],
    pub y: [f64; 2],
    #[serde(default)]
    pub yaw: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_to: Option<String>,
    /// Randomly negate the yaw.
    #[serde(default)]
    pub yaw_either_sign: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage {
    /// Drive the gripper over an object in the xy plane. Empty `dirs` are derived from the geometry at stage start.
    MoveTo { target: String, dirs: Vec<Direction> },
    /// Drive one axis to a fixed goal.
    MoveDir { dir: Direction },
    Rotate { rot: Rotation },
    /// Rotate the held object back to zero yaw; clockwise or counterclockwise by sign.
    Align,
    Close { target: Option<String> },
    Open { target: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageGroup {
    pub high: String,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    /// Horizontal distance between two objects at most `radius`.
    InRegion { object: String, anchor: String, radius: f64 },
    Held { object: String },
    NotHeld { object: String },
    YawAligned { object: String, tol: f64 },
    RollAtLeast { min: f64 },
    /// `object.x <= anchor.x - margin`
    Behind { object: String, anchor: String, margin: f64 },
    XAtMost { object: String, x: f64 },
}

impl Predicate {
    pub fn holds(&self, s: &State) -> bool {
        let pos = |id: &str| s.object_poses.get(id).map(|p| p.pos);
        match self {
            Predicate::InRegion {
                object,
                anchor,
                radius,
            } => match (pos(object), pos(anchor)) {
                (Some(a), Some(b)) => horizontal_dist(&a, &b) <= *radius,
                _ => false,
            },
            Predicate::Held { object } => s.held_object.as_deref() == Some(object),
            Predicate::NotHeld { object } => s.held_object.as_deref() != Some(object),
            Predicate::YawAligned { object, tol } => s
                .object_poses
                .get(object)
                .is_some_and(|p| p.yaw.abs() <= *tol),
            Predicate::RollAtLeast { min } => s.gripper_rot[2] >= *min,
            Predicate::Behind {
                object,
                anchor,
                margin,
            } => match (pos(object), pos(anchor)) {
                (Some(a), Some(b)) => a[0] <= b[0] - margin,
                _ => false,
            },
            Predicate::XAtMost { object, x } => pos(object).is_some_and(|p| p[0] <= *x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub instruction: String,
    pub family: Family,
    pub horizon: usize,
    pub objects: Vec<Placement>,
    /// Minimum horizontal separation between independently placed objects.
    pub min_separation: f64,
    pub subtasks: Vec<StageGroup>,
    pub success: Vec<Predicate>,
}

impl TaskSpec {
    pub fn success(&self, s: &State) -> bool {
        self.success.iter().all(|p| p.holds(s))
    }

    pub fn stages(&self) -> Vec<&Stage> {
        self.subtasks.iter().flat_map(|g| g.stages.iter()).collect()
    }

    /// Index of the subtask that owns each flattened stage.
    pub fn stage_subtask(&self) -> Vec<usize> {
        self.subtasks
            .iter()
            .enumerate()
            .flat_map(|(k, g)| std::iter::repeat_n(k, g.stages.len()))
            .collect()
    }

    pub fn sample_initial(&self, cfg: &WorldConfig, seed: u64) -> Result<State, SimError> {
        let mut rng = seed::rng(seed, &[0]);
        for _ in 0..1000 {
            let mut poses: BTreeMap<String, ObjectPose> = BTreeMap::new();
            let mut ok = true;
            for p in &self.objects {
                let mut x = rng.random_range(p.x[0]..=p.x[1]);
                let mut y = rng.random_range(p.y[0]..=p.y[1]);
                let mut yaw = if p.yaw[0] < p.yaw[1] {
                    rng.random_range(p.yaw[0]..=p.yaw[1])
                } else {
                    p.yaw[0]
                };
                if p.yaw_either_sign && rng.random_bool(0.5) {
                    yaw = -yaw;
                }
                if let Some(r) = &p.relative_to {
                    let base = poses.get(r).ok_or_else(|| SimError::Placement {
                        task: self.name.clone(),
                        msg: format!("'{}' placed relative to unknown '{r}'", p.id),
                    })?;
                    x += base.pos[0];
                    y += base.pos[1];
                }
                let pos = [x, y, 0.0];
                if pos[0] < cfg.bounds_lo[0]
                    || pos[0] > cfg.bounds_hi[0]
                    || pos[1] < cfg.bounds_lo[1]
                    || pos[1] > cfg.bounds_hi[1]
                {
                    ok = false;
                    break;
                }
                poses.insert(p.id.clone(), ObjectPose { pos, yaw });
            }
            if !ok {
                continue;
            }
            let start = GRIPPER_START;
            'outer: for (i, a) in self.objects.iter().enumerate() {
                if horizontal_dist(&poses[&a.id].pos, &start) < cfg.grasp_radius * 2.0 {
                    ok = false;
                    break;
                }
                for b in &self.objects[i + 1..] {
                    let related = a.relative_to.as_deref() == Some(b.id.as_str())
                        || b.relative_to.as_deref() == Some(a.id.as_str());
                    if !related
                        && horizontal_dist(&poses[&a.id].pos, &poses[&b.id].pos)
                            < self.min_separation
                    {
                        ok = false;
                        break 'outer;
                    }
                }
            }
            if ok {
                let mut gripper_rot = [0.0; 3];
                if self.family == Family::Prior && cfg.prior_start_roll > 0.0 {
                    let j = cfg.prior_start_roll.min(ROT_LIMIT);
                    gripper_rot[0] = seed::rng(seed, &[3]).random_range(-j..=j);
                }
                return Ok(State {
                    gripper_pos: start,
                    gripper_rot,
                    gripper_open: 1.0,
                    object_poses: poses,
                    held_object: None,
                });
            }
        }
        Err(SimError::Placement {
            task: self.name.clone(),
            msg: "rejection sampling exhausted".into(),
        })
    }

    /// The skill string a stage renders to, given the state at stage start.
    pub fn stage_skill(stage: &Stage, s: &State) -> SkillPrimitive {
        match stage {
            Stage::MoveTo { target, dirs } => {
                let dirs = if dirs.is_empty() {
                    let t = s.object_poses.get(target).map(|p| p.pos).unwrap_or(s.gripper_pos);
                    dominant_dirs(t[0] - s.gripper_pos[0], t[1] - s.gripper_pos[1])
                } else {
                    dirs.clone()
                };
                SkillPrimitive::Move {
                    dirs,
                    target: Some(target.clone()),
                }
            }
            Stage::MoveDir { dir } => SkillPrimitive::Move {
                dirs: vec![*dir],
                target: None,
            },
            Stage::Rotate { rot } => SkillPrimitive::Rotate(*rot),
            Stage::Align => {
                let yaw = s.held_pose().map(|p| p.yaw).unwrap_or(0.0);
                SkillPrimitive::Rotate(if yaw < 0.0 {
                    Rotation::Clockwise
                } else {
                    Rotation::Counterclockwise
                })
            }
            Stage::Close { target } => SkillPrimitive::Gripper {
                action: GripperAction::Close,
                target: target.clone(),
            },
            Stage::Open { target } => SkillPrimitive::Gripper {
                action: GripperAction::Open,
                target: target.clone(),
            },
        }
    }

    /// Ground-truth decomposition; requires every stage to have a state-independent rendering.
    pub fn ground_truth(&self) -> Option<Decomposition> {
        let mut subtasks = Vec::new();
        for g in &self.subtasks {
            let mut skills = Vec::new();
            for st in &g.stages {
                match st {
                    Stage::MoveTo { dirs, .. } if dirs.is_empty() => return None,
                    Stage::Align => return None,
                    _ => {}
                }
                let dummy = State {
                    gripper_pos: GRIPPER_START,
                    gripper_rot: [0.0; 3],
                    gripper_open: 1.0,
                    object_poses: BTreeMap::new(),
                    held_object: None,
                };
                skills.push(Self::stage_skill(st, &dummy).render());
            }
            subtasks.push(Subtask {
                high: g.high.clone(),
                skills,
            });
        }
        Some(Decomposition { subtasks })
    }

    /// Short textual description of the scene, used in place of an image for remote planning.
    pub fn describe_scene(s: &State) -> String {
        let mut parts = Vec::new();
        for (id, p) in &s.object_poses {
            let dx = p.pos[0] - s.gripper_pos[0];
            let dy = p.pos[1] - s.gripper_pos[1];
            let fb = if dx >= 0.0 { "forward" } else { "backward" };
            let lr = if dy >= 0.0 { "left" } else { "right" };
            parts.push(format!(
                "the {id} is {:.2} {fb} and {:.2} {lr} of the gripper",
                dx.abs(),
                dy.abs()
            ));
        }
        format!(
            "The gripper is open and holds nothing. On the table: {}.",
            parts.join("; ")
        )
    }
}

/// One or two dominant horizontal directions for a displacement; the second is kept when its
/// magnitude is at least 0.8 of the first.
pub fn dominant_dirs(dx: f64, dy: f64) -> Vec<Direction> {
    let x = Direction::from_axis(0, dx >= 0.0);
    let y = Direction::from_axis(1, dy >= 0.0);
    let (ax, ay) = (dx.abs(), dy.abs());
    let (first, second, m1, m2) = if ax >= ay { (x, y, ax, ay) } else { (y, x, ay, ax) };
    if m1 > 0.0 && m2 >= 0.8 * m1 {
        vec![first, second]
    } else {
        vec![first]
    }
}

/// Anything that chooses actions.
pub trait Actor {
    fn act(&mut self, state: &State, t: usize) -> ActionVec;
}

/// Goal value along an axis for direction-only moves.
pub fn direction_goal(dir: Direction) -> (usize, f64) {
    match dir {
        Direction::Up => (2, HOVER_Z),
        Direction::Down => (2, LOW_Z),
        Direction::Backward => (0, 0.45),
        Direction::Forward => (0, 0.8),
        Direction::Left => (1, 0.3),
        Direction::Right => (1, -0.3),
    }
}

pub fn rotation_goal(rot: Rotation) -> Option<(usize, f64)> {
    match rot {
        Rotation::Left => Some((2, 0.8)),
        Rotation::Right => Some((2, -0.8)),
        Rotation::Up => Some((1, 0.8)),
        Rotation::Down => Some((1, -0.8)),
        Rotation::Clockwise | Rotation::Counterclockwise => None,
    }
}

/// Scripted expert: a time-driven stage pointer with a proportional controller per stage.
pub struct Expert<'a> {
    pub task: &'a TaskSpec,
    pub cfg: &'a WorldConfig,
    /// Steps spent in each stage.
    pub tempo: usize,
    noise_rng: rand_chacha::ChaCha8Rng,
    stages: Vec<&'a Stage>,
}

impl<'a> Expert<'a> {
    pub fn new(task: &'a TaskSpec, cfg: &'a WorldConfig, tempo: usize, seed: u64) -> Self {
        Expert {
            task,
            cfg,
            tempo,
            noise_rng: seed::rng(seed, &[1]),
            stages: task.stages(),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage_at(&self, t: usize) -> usize {
        (t / self.tempo).min(self.stages.len() - 1)
    }

    pub fn episode_len(&self) -> usize {
        self.stages.len() * self.tempo
    }

    /// Noise-free raw action for stage `k`.
    pub fn mode_raw(&self, k: usize, s: &State) -> [f64; ACTION_DIM] {
        let gain = self.cfg.gain;
        let mut a = [0.0; ACTION_DIM];
        let holding = s.held_object.is_some();
        a[6] = if holding { 1.0 } else { -1.0 };
        let slider = s
            .held_object
            .as_deref()
            .is_some_and(|h| self.cfg.kind(h) == ObjectKind::Slider);
        match self.stages[k] {
            Stage::MoveTo { target, .. } => {
                if let Some(p) = s.object_poses.get(target) {
                    a[0] = gain * (p.pos[0] - s.gripper_pos[0]);
                    if !slider {
                        a[1] = gain * (p.pos[1] - s.gripper_pos[1]);
                    }
                }
            }
            Stage::MoveDir { dir } => {
                let (axis, goal) = direction_goal(*dir);
                if !slider || axis == 0 {
                    a[axis] = gain * (goal - s.gripper_pos[axis]);
                }
            }
            Stage::Rotate { rot } => match rotation_goal(*rot) {
                Some((axis, goal)) => a[3 + axis] = gain * (goal - s.gripper_rot[axis]),
                None => a[3] = -gain * s.held_pose().map(|p| p.yaw).unwrap_or(0.0),
            },
            Stage::Align => a[3] = -gain * s.held_pose().map(|p| p.yaw).unwrap_or(0.0),
            Stage::Close { .. } => a[6] = 1.0,
            Stage::Open { .. } => a[6] = -1.0,
        }
        a
    }

    pub fn noisy_raw(&mut self, k: usize, s: &State) -> [f64; ACTION_DIM] {
        let mut a = self.mode_raw(k, s);
        if self.cfg.noise > 0.0 {
            for (d, v) in a.iter_mut().enumerate() {
                let sd = self.cfg.noise * self.cfg.norm_stats.std[d];
                *v += Normal::new(0.0, sd).expect("finite sd").sample(&mut self.noise_rng);
            }
        }
        a
    }

    /// Whether stage `k` reached its goal in state `s`.
    pub fn stage_done(&self, k: usize, s: &State) -> bool {
        match self.stages[k] {
            Stage::MoveTo { target, .. } => s.object_poses.get(target).is_some_and(|p| {
                let slider = s
                    .held_object
                    .as_deref()
                    .is_some_and(|h| self.cfg.kind(h) == ObjectKind::Slider);
                if slider {
                    (p.pos[0] - s.gripper_pos[0]).abs() < 0.03
                } else {
                    horizontal_dist(&p.pos, &s.gripper_pos) < 0.03
                }
            }),
            Stage::MoveDir { dir } => {
                let (axis, goal) = direction_goal(*dir);
                (s.gripper_pos[axis] - goal).abs() < 0.03
            }
            Stage::Rotate { rot } => match rotation_goal(*rot) {
                Some((axis, goal)) => (s.gripper_rot[axis] - goal).abs() < 0.1,
                None => s.held_pose().is_some_and(|p| p.yaw.abs() < 0.1),
            },
            Stage::Align => s.held_pose().is_some_and(|p| p.yaw.abs() < 0.1),
            Stage::Close { target } => match target {
                Some(t) => s.held_object.as_deref() == Some(t.as_str()),
                None => s.held_object.is_some(),
            },
            Stage::Open { .. } => s.held_object.is_none(),
        }
    }
}

impl Actor for Expert<'_> {
    fn act(&mut self, state: &State, t: usize) -> ActionVec {
        let k = self.stage_at(t);
        self.cfg.norm_stats.normalize(&self.mode_raw(k, state))
    }
}

#[derive(Debug, Clone)]
pub struct ExpertEpisode {
    pub trajectory: Trajectory,
    pub success: bool,
    /// Noise-free expert action at each recorded state.
    pub mode_actions: Vec<ActionVec>,
    /// Skill rendered at the start of each stage.
    pub skills: Vec<String>,
    pub tempo: usize,
}

pub const TEMPOS: [usize; 2] = [8, 12];

/// Runs the scripted expert once. `Err` means some stage missed its goal.
pub fn expert_episode(
    task: &TaskSpec,
    cfg: &WorldConfig,
    seed: u64,
) -> Result<ExpertEpisode, SimError> {
    let mut state = task.sample_initial(cfg, seed)?;
    let mut tempo_rng = seed::rng(seed, &[2]);
    let tempo = TEMPOS[tempo_rng.random_range(0..TEMPOS.len())];
    let mut expert = Expert::new(task, cfg, tempo, seed);
    let stages = task.stages();
    let mut steps = Vec::new();
    let mut stage_ids = Vec::new();
    let mut mode_actions = Vec::new();
    let mut skills = Vec::new();
    let mut success = task.success(&state);
    for (k, stage) in stages.iter().enumerate() {
        skills.push(TaskSpec::stage_skill(stage, &state).render());
        for _ in 0..tempo {
            let mode = expert.mode_raw(k, &state);
            let raw = expert.noisy_raw(k, &state);
            let step_rec = Step::new(state.clone(), raw, &cfg.norm_stats);
            let next = step(&state, &step_rec.action(), cfg);
            mode_actions.push(cfg.norm_stats.normalize(&mode));
            steps.push(step_rec);
            stage_ids.push(k);
            state = next;
            success |= task.success(&state);
        }
        if !expert.stage_done(k, &state) {
            return Err(SimError::Infeasible {
                task: task.name.clone(),
                tries: 1,
            });
        }
    }
    Ok(ExpertEpisode {
        trajectory: Trajectory {
            instruction: task.instruction.clone(),
            steps,
            low_labels: None,
            high_labels: None,
            stage_ids: Some(stage_ids),
        },
        success,
        mode_actions,
        skills,
        tempo,
    })
}

pub const MAX_RETRIES: usize = 20;

/// Feasible expert episode number `index` of a task, resampling the initial state on failure.
pub fn feasible_episode(
    task: &TaskSpec,
    cfg: &WorldConfig,
    root: u64,
    index: u64,
) -> Result<ExpertEpisode, SimError> {
    for attempt in 0..MAX_RETRIES as u64 {
        let s = seed::derive(root, &[index, attempt]);
        match expert_episode(task, cfg, s) {
            Ok(ep) if ep.success => return Ok(ep),
            Ok(_) | Err(SimError::Infeasible { .. }) | Err(SimError::Placement { .. }) => {
                continue
            }
            Err(e) => return Err(e),
        }
    }
    Err(SimError::Infeasible {
        task: task.name.clone(),
        tries: MAX_RETRIES,
    })
}

pub fn generate_dataset(
    tasks: &[TaskSpec],
    n_per_task: usize,
    cfg: &WorldConfig,
    seed: u64,
    role: Role,
) -> Result<crate::model::Dataset, SimError> {
    use rayon::prelude::*;
    if n_per_task == 0 {
        return Err(SimError::NoEpisodes);
    }
    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|t| (0..n_per_task).map(move |i| (t, i)))
        .collect();
    let episodes: Result<Vec<ExpertEpisode>, SimError> = jobs
        .par_iter()
        .map(|&(t, i)| {
            let root = seed::derive(seed, &[t as u64]);
            feasible_episode(&tasks[t], cfg, root, i as u64)
        })
        .collect();
    Ok(crate::model::Dataset {
        role,
        norm_stats: cfg.norm_stats.clone(),
        trajectories: episodes?.into_iter().map(|e| e.trajectory).collect(),
    })
}

/// Runs an actor from the task's initial state for up to `horizon` steps; stops at the first success.
pub fn rollout(
    actor: &mut dyn Actor,
    task: &TaskSpec,
    cfg: &WorldConfig,
    horizon: usize,
    seed: u64,
) -> Result<(Trajectory, bool), SimError> {
    let mut state = task.sample_initial(cfg, seed)?;
    let mut steps = Vec::with_capacity(horizon);
    let mut success = task.success(&state);
    for t in 0..horizon {
        if success {
            break;
        }
        let a = actor.act(&state, t);
        let raw = cfg.norm_stats.denormalize(&a);
        let next = step(&state, &a, cfg);
        steps.push(Step {
            state: state.clone(),
            raw_action: raw,
            action: Some(a),
        });
        state = next;
        success = task.success(&state);
    }
    Ok((
        Trajectory {
            instruction: task.instruction.clone(),
            steps,
            low_labels: None,
            high_labels: None,
            stage_ids: None,
        },
        success,
    ))
}

/// Executes a decomposition with the fixed chunked schedule.
pub fn rollout_scheduled(
    policy: &crate::policy::PolicyModel,
    decomposition: &Decomposition,
    horizon: usize,
    chunk: usize,
    task: &TaskSpec,
    cfg: &WorldConfig,
    seed: u64,
) -> Result<(Trajectory, bool), SimError> {
    let mut actor = crate::policy::ScheduledPolicy::from_decomposition(
        policy,
        decomposition,
        chunk,
        crate::policy::Masking::None,
        true,
    );
    rollout(&mut actor, task, cfg, horizon, seed)
}

fn place(id: &str, x: [f64; 2], y: [f64; 2]) -> Placement {
    Placement {
        id: id.into(),
        x,
        y,
        yaw: [0.0, 0.0],
        relative_to: None,
        yaw_either_sign: false,
    }
}

fn place_rel(id: &str, base: &str, x: [f64; 2], y: [f64; 2]) -> Placement {
    Placement {
        relative_to: Some(base.into()),
        ..place(id, x, y)
    }
}

fn with_yaw(mut p: Placement, yaw: [f64; 2], either: bool) -> Placement {
    p.yaw = yaw;
    p.yaw_either_sign = either;
    p
}

fn to(target: &str, dir: Direction) -> Stage {
    Stage::MoveTo {
        target: target.into(),
        dirs: vec![dir],
    }
}

fn to_any(target: &str) -> Stage {
    Stage::MoveTo {
        target: target.into(),
        dirs: vec![],
    }
}

fn close(t: &str) -> Stage {
    Stage::Close {
        target: Some(t.into()),
    }
}

fn open(t: &str) -> Stage {
    Stage::Open {
        target: Some(t.into()),
    }
}

fn dir(d: Direction) -> Stage {
    Stage::MoveDir { dir: d }
}

fn group(high: &str, stages: Vec<Stage>) -> StageGroup {
    StageGroup {
        high: high.into(),
        stages,
    }
}

fn in_region(o: &str, a: &str) -> Predicate {
    Predicate::InRegion {
        object: o.into(),
        anchor: a.into(),
        radius: 0.1,
    }
}

fn not_held(o: &str) -> Predicate {
    Predicate::NotHeld { object: o.into() }
}

use Direction::{Backward, Down, Forward, Left, Right};

const FWD_X: [f64; 2] = [0.55, 0.65];
const MID_Y: [f64; 2] = [-0.05, 0.05];
const LEFT_Y: [f64; 2] = [0.26, 0.34];
const RIGHT_Y: [f64; 2] = [-0.34, -0.26];

/// The eight built-in target tasks.
pub fn target_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            name: "put_in".into(),
            instruction: "put the beet into the drawer".into(),
            family: Family::LongHorizon,
            horizon: 200,
            objects: vec![
                place("drawer", [0.65, 0.72], [-0.04, 0.04]),
                place("beet", [0.40, 0.50], LEFT_Y),
            ],
            min_separation: 0.2,
            subtasks: vec![
                group(
                    "open the drawer",
                    vec![to("drawer", Forward), close("drawer"), dir(Backward), open("drawer")],
                ),
                group(
                    "put the beet in the drawer",
                    vec![to("beet", Left), close("beet"), to("drawer", Right), open("beet")],
                ),
            ],
            success: vec![
                in_region("beet", "drawer"),
                Predicate::XAtMost {
                    object: "drawer".into(),
                    x: 0.55,
                },
                not_held("beet"),
            ],
        },
        TaskSpec {
            name: "pry_away".into(),
            instruction: "pry out the pot in the drawer using the ladle".into(),
            family: Family::LongHorizon,
            horizon: 200,
            objects: vec![
                place("drawer", [0.68, 0.75], RIGHT_Y),
                place_rel("pot", "drawer", [-0.01, 0.01], [-0.01, 0.01]),
                place("ladle", [0.22, 0.30], RIGHT_Y),
            ],
            min_separation: 0.2,
            subtasks: vec![
                group("pick up the ladle", vec![to("ladle", Right), close("ladle")]),
                group(
                    "pull the pot out of the drawer",
                    vec![to("pot", Forward), dir(Down), dir(Backward)],
                ),
            ],
            success: vec![Predicate::Behind {
                object: "pot".into(),
                anchor: "drawer".into(),
                margin: 0.15,
            }],
        },
        TaskSpec {
            name: "salad".into(),
            instruction: "make a salad bowl with corn and mushroom".into(),
            family: Family::LongHorizon,
            horizon: 200,
            objects: vec![
                place("corn", FWD_X, MID_Y),
                place("bowl", FWD_X, RIGHT_Y),
                place("mushroom", FWD_X, LEFT_Y),
            ],
            min_separation: 0.2,
            subtasks: vec![
                group(
                    "put the corn in the bowl",
                    vec![to("corn", Forward), close("corn"), to("bowl", Right), open("corn")],
                ),
                group(
                    "put the mushroom in the bowl",
                    vec![
                        to("mushroom", Left),
                        close("mushroom"),
                        to("bowl", Right),
                        open("mushroom"),
                    ],
                ),
            ],
            success: vec![
                in_region("corn", "bowl"),
                in_region("mushroom", "bowl"),
                not_held("corn"),
                not_held("mushroom"),
            ],
        },
        TaskSpec {
            name: "pour".into(),
            instruction: "pour the contents of the scoop into the bowl".into(),
            family: Family::UnseenSkill,
            horizon: 150,
            objects: vec![place("scoop", FWD_X, MID_Y), place("bowl", FWD_X, LEFT_Y)],
            min_separation: 0.2,
            subtasks: vec![
                group("pick up the scoop", vec![to("scoop", Forward), close("scoop")]),
                group(
                    "pour the scoop into the bowl",
                    vec![
                        to("bowl", Left),
                        Stage::Rotate {
                            rot: Rotation::Left,
                        },
                    ],
                ),
            ],
            success: vec![
                Predicate::Held {
                    object: "scoop".into(),
                },
                in_region("scoop", "bowl"),
                Predicate::RollAtLeast { min: 0.6 },
            ],
        },
        TaskSpec {
            name: "sweep_mints".into(),
            instruction: "sweep the mints into the tray after putting the mushroom in the pot"
                .into(),
            family: Family::LongHorizon,
            horizon: 200,
            objects: vec![
                place("mushroom", [0.66, 0.72], [0.02, 0.06]),
                place("pot", [0.55, 0.62], LEFT_Y),
                place("towel", [0.25, 0.32], RIGHT_Y),
                place_rel("mints", "towel", [0.12, 0.16], [-0.02, 0.02]),
                place_rel("tray", "mints", [-0.02, 0.02], [0.18, 0.22]),
            ],
            min_separation: 0.2,
            subtasks: vec![
                group(
                    "put the mushroom in the pot",
                    vec![
                        to("mushroom", Forward),
                        close("mushroom"),
                        to("pot", Left),
                        open("mushroom"),
                    ],
                ),
                group(
                    "sweep the mints into the tray",
                    vec![
                        to("towel", Right),
                        close("towel"),
                        to("mints", Forward),
                        dir(Down),
                        to("tray", Left),
                    ],
                ),
            ],
            success: vec![in_region("mushroom", "pot"), in_region("mints", "tray")],
        },
        TaskSpec {
            name: "sweep_skittles".into(),
            instruction: "sweep the skittles into the bin after putting the corn in the container"
                .into(),
            family: Family::LongHorizon,
            horizon: 200,
            objects: vec![
                place("corn", [0.66, 0.72], [-0.06, -0.02]),
                place("container", [0.55, 0.62], RIGHT_Y),
                place("swiffer", [0.25, 0.32], LEFT_Y),
                place_rel("skittles", "swiffer", [0.12, 0.16], [-0.02, 0.02]),
                place_rel("bin", "skittles", [-0.02, 0.02], [-0.22, -0.18]),
            ],
            min_separation: 0.2,
            subtasks: vec![
                group(
                    "put the corn in the container",
                    vec![
                        to("corn", Forward),
                        close("corn"),
                        to("container", Right),
                        open("corn"),
                    ],
                ),
                group(
                    "sweep the skittles into the bin",
                    vec![
                        to("swiffer", Left),
                        close("swiffer"),
                        to("skittles", Forward),
                        dir(Down),
                        to("bin", Right),
                    ],
                ),
            ],
            success: vec![in_region("corn", "container"), in_region("skittles", "bin")],
        },
        TaskSpec {
            name: "rotate_marker".into(),
            instruction: "put the marker into the box while aligning it".into(),
            family: Family::UnseenSkill,
            horizon: 150,
            objects: vec![
                with_yaw(place("marker", FWD_X, MID_Y), [0.6, 1.0], false),
                place("box", FWD_X, RIGHT_Y),
            ],
            min_separation: 0.2,
            subtasks: vec![
                group(
                    "pick up the marker and align it",
                    vec![
                        to("marker", Forward),
                        close("marker"),
                        Stage::Rotate {
                            rot: Rotation::Counterclockwise,
                        },
                    ],
                ),
                group(
                    "put the marker in the box",
                    vec![to("box", Right), open("marker")],
                ),
            ],
            success: vec![
                in_region("marker", "box"),
                Predicate::YawAligned {
                    object: "marker".into(),
                    tol: 0.2,
                },
                not_held("marker"),
            ],
        },
        TaskSpec {
            name: "rotate_spoon".into(),
            instruction: "put the spoon into the cleaner while aligning it".into(),
            family: Family::UnseenSkill,
            horizon: 150,
            objects: vec![
                with_yaw(place("spoon", FWD_X, MID_Y), [-1.0, -0.6], false),
                place("cleaner", FWD_X, LEFT_Y),
            ],
            min_separation: 0.2,
            subtasks: vec![
                group(
                    "pick up the spoon and align it",
                    vec![
                        to("spoon", Forward),
                        close("spoon"),
                        Stage::Rotate {
                            rot: Rotation::Clockwise,
                        },
                    ],
                ),
                group(
                    "put the spoon in the cleaner",
                    vec![to("cleaner", Left), open("spoon")],
                ),
            ],
            success: vec![
                in_region("spoon", "cleaner"),
                Predicate::YawAligned {
                    object: "spoon".into(),
                    tol: 0.2,
                },
                not_held("spoon"),
            ],
        },
    ]
}

const PRIOR_X: [f64; 2] = [0.35, 0.85];
const PRIOR_Y: [f64; 2] = [-0.4, 0.4];

fn pick_place(name: &str, instruction: &str, obj: &str, dest: &str) -> TaskSpec {
    TaskSpec {
        name: name.into(),
        instruction: instruction.into(),
        family: Family::Prior,
        horizon: 150,
        objects: vec![place(obj, PRIOR_X, PRIOR_Y), place(dest, PRIOR_X, PRIOR_Y)],
        min_separation: 0.25,
        subtasks: vec![group(
            instruction,
            vec![to_any(obj), close(obj), to_any(dest), open(obj)],
        )],
        success: vec![in_region(obj, dest), not_held(obj)],
    }
}

fn sweep_prior(name: &str, instruction: &str, tool: &str, stuff: &str, dest: &str) -> TaskSpec {
    TaskSpec {
        name: name.into(),
        instruction: instruction.into(),
        family: Family::Prior,
        horizon: 150,
        objects: vec![
            place(tool, PRIOR_X, PRIOR_Y),
            place(stuff, PRIOR_X, PRIOR_Y),
            place(dest, PRIOR_X, PRIOR_Y),
        ],
        min_separation: 0.25,
        subtasks: vec![group(
            instruction,
            vec![
                to_any(tool),
                close(tool),
                to_any(stuff),
                dir(Down),
                to_any(dest),
            ],
        )],
        success: vec![in_region(stuff, dest)],
    }
}

fn straighten(name: &str, obj: &str) -> TaskSpec {
    let instruction = format!("straighten the {obj}");
    TaskSpec {
        name: name.into(),
        instruction: instruction.clone(),
        family: Family::Prior,
        horizon: 150,
        objects: vec![with_yaw(place(obj, PRIOR_X, PRIOR_Y), [0.5, 1.0], true)],
        min_separation: 0.25,
        subtasks: vec![group(
            &instruction,
            vec![to_any(obj), close(obj), Stage::Align, open(obj)],
        )],
        success: vec![
            Predicate::YawAligned {
                object: obj.into(),
                tol: 0.2,
            },
            not_held(obj),
        ],
    }
}

/// Tasks used to generate the prior dataset. None of them pairs objects and skills the way a target task does.
pub fn prior_tasks() -> Vec<TaskSpec> {
    let mut tasks = vec![
        pick_place("carrot_pot", "put the carrot in the pot", "carrot", "pot"),
        pick_place("corn_plate", "put the corn on the plate", "corn", "plate"),
        pick_place("mushroom_bowl", "put the mushroom in the bowl", "mushroom", "bowl"),
        pick_place("mushroom_pot", "put the mushroom in the pot", "mushroom", "pot"),
        pick_place("cup_plate", "put the cup on the plate", "cup", "plate"),
        pick_place("beet_box", "put the beet in the box", "beet", "box"),
        TaskSpec {
            name: "open_drawer".into(),
            instruction: "open the drawer".into(),
            family: Family::Prior,
            horizon: 150,
            objects: vec![place("drawer", [0.62, 0.8], [-0.35, 0.35])],
            min_separation: 0.25,
            subtasks: vec![group(
                "open the drawer",
                vec![to_any("drawer"), close("drawer"), dir(Backward), open("drawer")],
            )],
            success: vec![
                Predicate::XAtMost {
                    object: "drawer".into(),
                    x: 0.55,
                },
                not_held("drawer"),
            ],
        },
        sweep_prior(
            "sweep_beans",
            "sweep the beans into the tray using the brush",
            "brush",
            "beans",
            "tray",
        ),
        TaskSpec {
            name: "drag_pan".into(),
            instruction: "drag the pan backward using the spatula".into(),
            family: Family::Prior,
            horizon: 150,
            objects: vec![
                place("spatula", [0.35, 0.6], PRIOR_Y),
                place("pan", [0.68, 0.85], PRIOR_Y),
            ],
            min_separation: 0.25,
            subtasks: vec![group(
                "drag the pan backward using the spatula",
                vec![
                    to_any("spatula"),
                    close("spatula"),
                    to_any("pan"),
                    dir(Down),
                    dir(Backward),
                ],
            )],
            success: vec![Predicate::XAtMost {
                object: "pan".into(),
                x: 0.55,
            }],
        },
        straighten("straighten_pen", "pen"),
        straighten("straighten_knife", "knife"),
    ];
    tasks.push(TaskSpec {
        name: "pour_cup".into(),
        instruction: "pour the cup into the bowl".into(),
        family: Family::Prior,
        horizon: 150,
        objects: vec![place("cup", PRIOR_X, PRIOR_Y), place("bowl", PRIOR_X, PRIOR_Y)],
        min_separation: 0.25,
        subtasks: vec![group(
            "pour the cup into the bowl",
            vec![
                to_any("cup"),
                close("cup"),
                to_any("bowl"),
                Stage::Rotate {
                    rot: Rotation::Left,
                },
            ],
        )],
        success: vec![
            Predicate::Held {
                object: "cup".into(),
            },
            in_region("cup", "bowl"),
            Predicate::RollAtLeast { min: 0.6 },
        ],
    });
    tasks
}

/// Alternate names accepted by [`find_task`].
pub const TASK_ALIASES: [(&str, &str); 1] = [("rotate_align", "rotate_marker")];

pub fn find_task(name: &str) -> Result<TaskSpec, SimError> {
    let resolved = TASK_ALIASES.iter().find(|(a, _)| *a == name).map_or(name, |(_, t)| t);
    target_tasks()
        .into_iter()
        .chain(prior_tasks())
        .find(|t| t.name == resolved)
        .ok_or_else(|| SimError::UnknownTask(name.into()))
}
