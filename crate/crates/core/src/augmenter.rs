//! Low-level labels from proprioception. Each length-4 chunk of a trajectory gets a skill
//! string derived from its cumulative action z-scores, gripper events and the task keywords.

use std::collections::HashMap;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{chunk_count, Dataset, NormStats, Trajectory, LABEL_CHUNK};
use crate::proposer::grammar::{Direction, GripperAction, Rotation, SkillPrimitive};
use crate::proposer::remote::{extract_keywords_remote, Keywords, RateLimiter, RemoteConfig, Transport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeuristicConfig {
    pub chunk: usize,
    pub tau_z: f64,
    /// Normalized gripper command above which the gripper counts as closed.
    pub gripper_threshold: f64,
    pub two_directions: bool,
    /// A second direction is kept when its |z| is at least this fraction of the first.
    pub secondary_ratio: f64,
    /// Minimum cosine between the chunk motion and the direction to a keyword object.
    pub target_cos: f64,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        HeuristicConfig {
            chunk: LABEL_CHUNK,
            tau_z: 1.0,
            gripper_threshold: 0.5,
            two_directions: true,
            secondary_ratio: 0.8,
            target_cos: 0.7,
        }
    }
}

impl HeuristicConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.chunk == 0 {
            return Err("chunk length must be at least 1".into());
        }
        if !(self.tau_z > 0.0) {
            return Err("tau_z must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkLabel {
    pub index: usize,
    pub directions: Vec<Direction>,
    pub rotation: Option<Rotation>,
    pub gripper: Option<GripperAction>,
    pub object: Option<String>,
    pub destination: Option<String>,
    pub rendered: String,
    pub ambiguous: bool,
}

/// Source of (object, destination) keywords for an instruction.
pub trait KeywordExtractor: Sync {
    fn extract(&self, instruction: &str) -> Keywords;
}

/// Template matcher over the built-in instruction forms.
pub struct MockKeywords {
    re: Regex,
}

impl Default for MockKeywords {
    fn default() -> Self {
        let re = Regex::new(
            r"^(?:put|place|move|sweep|pour|drag|pick up|open|straighten|pry out|push|pull)\s+(?:the contents of\s+)?(?:the\s+)?(?P<obj>.+?)(?:\s+(?:in|into|on|onto|to)\s+(?:the\s+)?(?P<dest>.+?))?(?:\s+(?:while|using|after|with)\b.*)?$",
        )
        .expect("valid regex");
        MockKeywords { re }
    }
}

impl KeywordExtractor for MockKeywords {
    fn extract(&self, instruction: &str) -> Keywords {
        let text = instruction.trim().trim_end_matches('.').to_lowercase();
        let Some(c) = self.re.captures(&text) else {
            return Keywords::Sentinel;
        };
        let mut object = c["obj"].to_string();
        for d in ["backward", "forward", "left", "right", "up", "down"] {
            if let Some(stripped) = object.strip_suffix(&format!(" {d}")) {
                object = stripped.to_string();
            }
        }
        Keywords::Pair {
            object,
            destination: c.name("dest").map(|m| m.as_str().to_string()),
        }
    }
}

/// Remote keyword backend sharing the planner's client settings.
pub struct RemoteKeywords<'a> {
    pub cfg: &'a RemoteConfig,
    pub transport: &'a dyn Transport,
    pub limiter: &'a RateLimiter,
}

impl KeywordExtractor for RemoteKeywords<'_> {
    fn extract(&self, instruction: &str) -> Keywords {
        extract_keywords_remote(instruction, self.cfg, self.transport, self.limiter, 0)
    }
}

/// Backend that always gives up, forcing proprioception-only labels.
pub struct NoKeywords;

impl KeywordExtractor for NoKeywords {
    fn extract(&self, _instruction: &str) -> Keywords {
        Keywords::Sentinel
    }
}

/// Hook for high-level label rewriting.
pub trait Rephraser: Sync {
    fn rephrase(&self, instruction: &str, chunk: usize) -> String;
}

pub struct Identity;

impl Rephraser for Identity {
    fn rephrase(&self, instruction: &str, _chunk: usize) -> String {
        instruction.to_string()
    }
}

fn closed(a: f64, cfg: &HeuristicConfig) -> bool {
    a > cfg.gripper_threshold
}

pub fn label_chunks(
    traj: &Trajectory,
    stats: &NormStats,
    cfg: &HeuristicConfig,
    keywords: &Keywords,
) -> Vec<ChunkLabel> {
    let n_chunks = traj.len().div_ceil(cfg.chunk);
    let (kw_obj, kw_dest) = match keywords {
        Keywords::Pair {
            object,
            destination,
        } => (Some(object.as_str()), destination.as_deref()),
        Keywords::Sentinel => (None, None),
    };
    (0..n_chunks)
        .map(|c| {
            let lo = c * cfg.chunk;
            let hi = (lo + cfg.chunk).min(traj.len());
            label_one(traj, stats, cfg, c, lo, hi, kw_obj, kw_dest)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn label_one(
    traj: &Trajectory,
    stats: &NormStats,
    cfg: &HeuristicConfig,
    index: usize,
    lo: usize,
    hi: usize,
    kw_obj: Option<&str>,
    kw_dest: Option<&str>,
) -> ChunkLabel {
    let mut label = ChunkLabel {
        index,
        directions: Vec::new(),
        rotation: None,
        gripper: None,
        object: kw_obj.map(str::to_owned),
        destination: kw_dest.map(str::to_owned),
        rendered: String::new(),
        ambiguous: true,
    };
    let steps = &traj.steps;

    // gripper events, counting a switch right at the chunk boundary
    let mut event = None;
    let mut event_at = lo;
    for t in lo.max(1)..hi {
        let before = closed(steps[t - 1].action().0[6], cfg);
        let after = closed(steps[t].action().0[6], cfg);
        if before != after {
            event = Some(if after { GripperAction::Close } else { GripperAction::Open });
            event_at = t;
        }
    }
    if lo == 0 && event.is_none() && closed(steps[0].action().0[6], cfg) && steps[0].state.gripper_open > 0.5 {
        event = Some(GripperAction::Close);
    }
    if let Some(action) = event {
        let target = match action {
            // only name the object when the grasp really took it
            GripperAction::Close => {
                let after = if event_at + 1 < steps.len() {
                    steps[event_at + 1].state.held_object.as_deref()
                } else {
                    None
                };
                kw_obj.filter(|o| after == Some(*o))
            }
            GripperAction::Open => {
                let before = steps[event_at].state.held_object.as_deref();
                kw_obj.filter(|o| before == Some(*o))
            }
        };
        label.gripper = Some(action);
        label.ambiguous = false;
        label.rendered = SkillPrimitive::Gripper {
            action,
            target: target.map(str::to_owned),
        }
        .render();
        return label;
    }

    let n = (hi - lo) as f64;
    let mut z = [0.0; 6];
    for st in &steps[lo..hi] {
        for d in 0..6 {
            z[d] += st.raw_action[d] - stats.mean[d];
        }
    }
    let mut delta_xy = [0.0; 2];
    for st in &steps[lo..hi] {
        delta_xy[0] += st.raw_action[0];
        delta_xy[1] += st.raw_action[1];
    }
    for d in 0..6 {
        z[d] /= stats.std[d] * n.sqrt();
    }
    let mut trans: Vec<(usize, f64)> = (0..3).map(|d| (d, z[d])).collect();
    trans.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
    let rot = (3..6)
        .map(|d| (d - 3, z[d]))
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
        .expect("three rotation axes");
    let max_t = trans[0].1.abs();
    let max_r = rot.1.abs();

    if max_t >= cfg.tau_z && max_t >= max_r {
        let mut dirs = vec![Direction::from_axis(trans[0].0, trans[0].1 > 0.0)];
        if cfg.two_directions && trans[1].1.abs() >= cfg.secondary_ratio * max_t {
            dirs.push(Direction::from_axis(trans[1].0, trans[1].1 > 0.0));
        }
        let vertical = trans[0].0 == 2;
        let s0 = &steps[lo].state;
        let holding = s0.held_object.is_some();
        let candidate = if holding { kw_dest } else { kw_obj };
        let target = candidate.filter(|id| {
            if vertical {
                return false;
            }
            let Some(p) = s0.object_poses.get(*id) else {
                return false;
            };
            let v = [p.pos[0] - s0.gripper_pos[0], p.pos[1] - s0.gripper_pos[1]];
            let nv = (v[0] * v[0] + v[1] * v[1]).sqrt();
            let nd = (delta_xy[0] * delta_xy[0] + delta_xy[1] * delta_xy[1]).sqrt();
            nv > 0.0 && nd > 0.0 && (v[0] * delta_xy[0] + v[1] * delta_xy[1]) / (nv * nd) >= cfg.target_cos
        });
        label.directions = dirs.clone();
        label.ambiguous = false;
        label.rendered = SkillPrimitive::Move {
            dirs,
            target: target.map(str::to_owned),
        }
        .render();
    } else if max_r >= cfg.tau_z {
        let r = Rotation::from_axis(rot.0, rot.1 > 0.0);
        label.rotation = Some(r);
        label.ambiguous = false;
        label.rendered = SkillPrimitive::Rotate(r).render();
    }
    label
}

/// Fills missing labels; `overwrite` relabels trajectories that already have them.
pub fn augment_dataset(
    data: &Dataset,
    cfg: &HeuristicConfig,
    backend: &dyn KeywordExtractor,
    rephraser: &dyn Rephraser,
    overwrite: bool,
) -> Dataset {
    let mut keywords: HashMap<&str, Keywords> = HashMap::new();
    for t in &data.trajectories {
        keywords
            .entry(t.instruction.as_str())
            .or_insert_with(|| backend.extract(&t.instruction));
    }
    let trajectories = data
        .trajectories
        .par_iter()
        .map(|t| {
            if t.is_labeled() && !overwrite {
                return t.clone();
            }
            let kw = &keywords[t.instruction.as_str()];
            if *kw == Keywords::Sentinel {
                log::debug!("no keywords for '{}'; labels carry no targets", t.instruction);
            }
            let labels = label_chunks(t, &data.norm_stats, cfg, kw);
            let mut out = t.clone();
            out.low_labels = Some(labels.into_iter().map(|l| l.rendered).collect());
            out.high_labels = Some((0..chunk_count(t.len())).map(|c| rephraser.rephrase(&t.instruction, c)).collect());
            out
        })
        .collect();
    Dataset {
        role: data.role,
        norm_stats: data.norm_stats.clone(),
        trajectories,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ObjectPose, State, Step};
    use crate::proposer::grammar::parse_skill;
    use crate::sim::{canonical_stats, expert_episode, prior_tasks, WorldConfig};
    use proptest::prelude::*;

    fn st(held: Option<&str>) -> State {
        State {
            gripper_pos: [0.3, 0.0, 0.15],
            gripper_rot: [0.0; 3],
            gripper_open: if held.is_some() { 0.0 } else { 1.0 },
            object_poses: [("box".to_string(), ObjectPose { pos: [0.7, 0.0, 0.0], yaw: 0.0 }), ("marker".to_string(), ObjectPose { pos: [0.3, 0.0, 0.15], yaw: 0.0 })]
                .into_iter()
                .collect(),
            held_object: held.map(str::to_owned),
        }
    }

    fn traj_from_norm(actions: &[[f64; 7]], held: Option<&str>) -> Trajectory {
        let stats = canonical_stats();
        Trajectory {
            instruction: "put the marker into the box".into(),
            steps: actions
                .iter()
                .map(|a| {
                    let raw = stats.denormalize(&crate::model::ActionVec(*a));
                    Step::new(st(held), raw, &stats)
                })
                .collect(),
            low_labels: None,
            high_labels: None,
            stage_ids: None,
        }
    }

    fn kw() -> Keywords {
        Keywords::Pair {
            object: "marker".into(),
            destination: Some("box".into()),
        }
    }

    #[test]
    fn still_chunk_is_ambiguous() {
        let t = traj_from_norm(&[[0.5; 7]; 4], None);
        let l = &label_chunks(&t, &canonical_stats(), &HeuristicConfig::default(), &kw())[0];
        assert!(l.ambiguous);
        assert_eq!(l.rendered, "");
    }

    #[test]
    fn gripper_opening_releases_object() {
        let mut a = [[0.5; 7]; 4];
        a[0][6] = 0.9;
        a[1][6] = 0.9;
        a[2][6] = 0.1;
        a[3][6] = 0.1;
        let t = traj_from_norm(&a, Some("marker"));
        let l = &label_chunks(&t, &canonical_stats(), &HeuristicConfig::default(), &kw())[0];
        assert_eq!(l.rendered, "open the gripper to release marker");
    }

    #[test]
    fn forward_chunk_targets_destination() {
        // cumulative x z-score of 3 over the chunk
        let stats = canonical_stats();
        let per_step = 3.0 * stats.std[0] * 2.0 / 4.0;
        let mut raw = [0.0; 7];
        raw[0] = per_step;
        raw[1] = 0.1 * stats.std[1];
        raw[6] = 1.0;
        let na = stats.normalize(&raw).0;
        let t = traj_from_norm(&[na; 4], Some("marker"));
        let l = &label_chunks(&t, &stats, &HeuristicConfig::default(), &kw())[0];
        assert_eq!(l.rendered, "move the gripper forward towards box");
    }

    #[test]
    fn mock_keywords() {
        let m = MockKeywords::default();
        let pair = |o: &str, d: Option<&str>| Keywords::Pair {
            object: o.into(),
            destination: d.map(str::to_owned),
        };
        assert_eq!(m.extract("put the marker into the box while aligning it"), pair("marker", Some("box")));
        assert_eq!(m.extract("Move the pot lid."), pair("pot lid", None));
        assert_eq!(m.extract("drag the pan backward using the spatula"), pair("pan", None));
        assert_eq!(m.extract("sweep the beans into the tray using the brush"), pair("beans", Some("tray")));
        assert_eq!(m.extract("I cannot help"), Keywords::Sentinel);
    }

    #[test]
    fn sentinel_labels_have_no_targets() {
        let c = WorldConfig::default();
        let task = &prior_tasks()[0];
        let ep = expert_episode(task, &c, 1).unwrap();
        for l in label_chunks(&ep.trajectory, &c.norm_stats, &HeuristicConfig::default(), &Keywords::Sentinel) {
            if !l.ambiguous {
                assert!(parse_skill(&l.rendered).unwrap().target().is_none());
            }
        }
    }

    #[test]
    fn pick_place_has_one_close_then_one_open() {
        let c = WorldConfig::default();
        for task in prior_tasks().iter().take(6) {
            for seed in 0..10 {
                let Ok(ep) = expert_episode(task, &c, seed) else { continue };
                let kw = MockKeywords::default().extract(&task.instruction);
                let labels = label_chunks(&ep.trajectory, &c.norm_stats, &HeuristicConfig::default(), &kw);
                let events: Vec<&str> = labels
                    .iter()
                    .filter(|l| l.gripper.is_some())
                    .map(|l| l.rendered.as_str())
                    .collect();
                assert_eq!(events.len(), 2, "{}: {events:?}", task.name);
                assert!(events[0].starts_with("close"));
                assert!(events[1].starts_with("open"));
            }
        }
    }

    #[test]
    fn labeled_data_is_left_alone() {
        let c = WorldConfig::default();
        let data = crate::sim::generate_dataset(&prior_tasks()[..2], 2, &c, 0, crate::model::Role::Prior).unwrap();
        let once = augment_dataset(&data, &HeuristicConfig::default(), &MockKeywords::default(), &Identity, false);
        once.validate().unwrap();
        let twice = augment_dataset(&once, &HeuristicConfig { tau_z: 5.0, ..HeuristicConfig::default() }, &NoKeywords, &Identity, false);
        assert_eq!(once, twice);
        let again = augment_dataset(&data, &HeuristicConfig::default(), &MockKeywords::default(), &Identity, false);
        assert_eq!(once, again);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn raising_threshold_only_removes_labels(seed in 0u64..200, task in 0usize..12, lo in 0.2f64..2.0, extra in 0.0f64..3.0) {
            let c = WorldConfig::default();
            let t = &prior_tasks()[task];
            if let Ok(ep) = expert_episode(t, &c, seed) {
                let kw = MockKeywords::default().extract(&t.instruction);
                let a = label_chunks(&ep.trajectory, &c.norm_stats, &HeuristicConfig { tau_z: lo, ..HeuristicConfig::default() }, &kw);
                let b = label_chunks(&ep.trajectory, &c.norm_stats, &HeuristicConfig { tau_z: lo + extra, ..HeuristicConfig::default() }, &kw);
                prop_assert_eq!(a.len(), chunk_count(ep.trajectory.len()));
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!(!x.ambiguous || y.ambiguous);
                    prop_assert_eq!(x.ambiguous, x.rendered.is_empty());
                    if !x.rendered.is_empty() {
                        prop_assert!(parse_skill(&x.rendered).is_ok());
                    }
                }
            }
        }
    }
}
