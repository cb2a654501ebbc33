//! Deterministic stand-in for a vision-language planner. Candidates are the task's
//! ground-truth decomposition with random structural edits.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{parse_skill, Direction, SkillPrimitive};
use super::{ProposalBatch, Provenance};
use crate::model::{Decomposition, Subtask};
use crate::seed;
use crate::sim::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    DirectionSwap,
    RotationFlip,
    SkillSwap,
    SubtaskSwap,
    SkillDrop,
    SkillDuplicate,
    SubtaskMerge,
}

impl Perturbation {
    pub const ALL: [Perturbation; 7] = [
        Perturbation::DirectionSwap,
        Perturbation::RotationFlip,
        Perturbation::SkillSwap,
        Perturbation::SubtaskSwap,
        Perturbation::SkillDrop,
        Perturbation::SkillDuplicate,
        Perturbation::SubtaskMerge,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    /// Guarantee the ground truth appears in the batch.
    pub plant_truth: bool,
    /// Probability that a batch is planted when `plant_truth` is set.
    pub plant_rate: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            plant_truth: true,
            plant_rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum MockError {
    #[error("M must be at least 1")]
    ZeroCandidates,
    #[error("task '{0}' has no state-independent ground-truth decomposition")]
    NoTemplate(String),
}

/// Applies one edit; `None` when it does not apply to this decomposition.
pub fn apply(p: Perturbation, d: &Decomposition, rng: &mut ChaCha8Rng) -> Option<Decomposition> {
    let mut subs = d.subtasks.clone();
    let positions = |pred: &dyn Fn(&SkillPrimitive) -> bool| -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for (k, s) in subs.iter().enumerate() {
            for (j, l) in s.skills.iter().enumerate() {
                if parse_skill(l).is_ok_and(|p| pred(&p)) {
                    v.push((k, j));
                }
            }
        }
        v
    };
    match p {
        Perturbation::DirectionSwap => {
            let pos = positions(&|p| matches!(p, SkillPrimitive::Move { .. }));
            let &(k, j) = pos.choose(rng)?;
            let SkillPrimitive::Move { mut dirs, target } =
                parse_skill(&subs[k].skills[j]).ok()?
            else {
                return None;
            };
            let i = rng.random_range(0..dirs.len());
            let others: Vec<Direction> = Direction::ALL
                .iter()
                .copied()
                .filter(|x| !dirs.contains(x))
                .collect();
            dirs[i] = if rng.random_bool(0.5) {
                dirs[i].opposite()
            } else {
                *others.choose(rng)?
            };
            if dirs.len() == 2 && dirs[0] == dirs[1] {
                dirs.pop();
            }
            subs[k].skills[j] = SkillPrimitive::Move { dirs, target }.render();
        }
        Perturbation::RotationFlip => {
            let pos = positions(&|p| matches!(p, SkillPrimitive::Rotate(_)));
            let &(k, j) = pos.choose(rng)?;
            let SkillPrimitive::Rotate(r) = parse_skill(&subs[k].skills[j]).ok()? else {
                return None;
            };
            subs[k].skills[j] = SkillPrimitive::Rotate(r.opposite()).render();
        }
        Perturbation::SkillSwap => {
            let ks: Vec<usize> = (0..subs.len()).filter(|&k| subs[k].skills.len() >= 2).collect();
            let &k = ks.choose(rng)?;
            let j = rng.random_range(0..subs[k].skills.len() - 1);
            subs[k].skills.swap(j, j + 1);
        }
        Perturbation::SubtaskSwap => {
            if subs.len() < 2 {
                return None;
            }
            let k = rng.random_range(0..subs.len() - 1);
            subs.swap(k, k + 1);
        }
        Perturbation::SkillDrop => {
            let ks: Vec<usize> = (0..subs.len()).filter(|&k| subs[k].skills.len() >= 2).collect();
            let &k = ks.choose(rng)?;
            let j = rng.random_range(0..subs[k].skills.len());
            subs[k].skills.remove(j);
        }
        Perturbation::SkillDuplicate => {
            let k = rng.random_range(0..subs.len());
            let j = rng.random_range(0..subs[k].skills.len());
            let s = subs[k].skills[j].clone();
            subs[k].skills.insert(j, s);
        }
        Perturbation::SubtaskMerge => {
            if subs.len() < 2 {
                return None;
            }
            let k = rng.random_range(0..subs.len() - 1);
            let b = subs.remove(k + 1);
            let a = &mut subs[k];
            a.high = format!("{} and {}", a.high, b.high);
            a.skills.extend(b.skills);
        }
    }
    let out = Decomposition { subtasks: subs };
    (out != *d).then_some(out)
}

/// A decoy: one or two edits, never equal to the template.
fn decoy(truth: &Decomposition, rng: &mut ChaCha8Rng) -> (Decomposition, Vec<Perturbation>) {
    loop {
        let n = rng.random_range(1..=2);
        let mut d = truth.clone();
        let mut applied = Vec::new();
        for _ in 0..n {
            for _ in 0..16 {
                let p = *Perturbation::ALL.choose(rng).expect("nonempty");
                if let Some(next) = apply(p, &d, rng) {
                    d = next;
                    applied.push(p);
                    break;
                }
            }
        }
        if !applied.is_empty() && d != *truth {
            return (d, applied);
        }
    }
}

/// Mock batch with the edits that produced each candidate (empty for the planted truth).
pub fn propose_mock_traced(
    truth: &Decomposition,
    m: usize,
    cfg: &MockConfig,
    seed: u64,
) -> Result<(ProposalBatch, Vec<Vec<Perturbation>>), MockError> {
    if m == 0 {
        return Err(MockError::ZeroCandidates);
    }
    let mut rng = seed::rng(seed, &[0x6d6f_636b]);
    let planted = cfg.plant_truth && rng.random_bool(cfg.plant_rate.clamp(0.0, 1.0));
    let truth_index = planted.then(|| rng.random_range(0..m));
    let mut candidates = Vec::with_capacity(m);
    let mut trace = Vec::with_capacity(m);
    for i in 0..m {
        if Some(i) == truth_index {
            candidates.push(truth.clone());
            trace.push(Vec::new());
        } else {
            let (d, p) = decoy(truth, &mut rng);
            candidates.push(d);
            trace.push(p);
        }
    }
    Ok((
        ProposalBatch {
            candidates,
            provenance: Provenance::Mock,
            transcripts: Vec::new(),
            truth_index,
        },
        trace,
    ))
}

/// `M` candidates for a task; the instruction and initial state do not influence the mock.
pub fn propose_mock(task: &TaskSpec, m: usize, cfg: &MockConfig, seed: u64) -> Result<ProposalBatch, MockError> {
    let truth = task
        .ground_truth()
        .ok_or_else(|| MockError::NoTemplate(task.name.clone()))?;
    Ok(propose_mock_traced(&truth, m, cfg, seed)?.0)
}

/// Single-subtask decomposition with one skill, handy for tests.
pub fn single(high: &str, skill: &str) -> Decomposition {
    Decomposition {
        subtasks: vec![Subtask {
            high: high.into(),
            skills: vec![skill.into()],
        }],
    }
}
