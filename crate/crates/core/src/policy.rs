//! Instruction-conditioned linear policy with zero-embedding masking.
//!
//! Prediction is `sigmoid(W phi(s, e_H, e_L))`. The feature map has fixed blocks:
//!
//! | block | size | active when |
//! |---|---|---|
//! | psi(s) | 10 | always |
//! | (psi, high grounding) ⊗ e_H | 1408 | low-level absent |
//! | (psi, high grounding) ⊗ e_H | 1408 | low-level present |
//! | psi ⊗ e_L | 640 | low-level names no present object |
//! | psi ⊗ e_L | 640 | low-level names a present object |
//! | high grounding | 12 | low-level absent |
//! | high grounding | 12 | low-level present |
//! | low grounding | 4 | always |
//!
//! Grounding features are the xy offsets from the gripper to objects named in the
//! instruction, so skills transfer to objects never seen during training. The high-level
//! block adds Gaussian proximities to those objects, which lets a policy conditioned on the
//! task instruction alone tell when to grasp and release.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{logistic, ActionVec, Dataset, Decomposition, State, Trajectory, ACTION_DIM};
use crate::proposer::grammar::parse_skill;
use crate::seed;
use crate::sim::{Actor, CATALOG};

pub const EMBED_DIM: usize = 64;
pub const PSI_DIM: usize = 10;
pub const FEATURE_DIM: usize = PSI_DIM + 2 * HX_DIM * EMBED_DIM + 2 * PSI_DIM * EMBED_DIM + 2 * GH_DIM + 4;
pub const CHECKPOINT_VERSION: u32 = 3;

const GH_DIM: usize = 12;
/// Per-token width of the high-level blocks: psi followed by the high grounding features.
const HX_DIM: usize = PSI_DIM + GH_DIM;
/// Length scale of the proximity features.
const PROX_SCALE: f64 = 0.05;

const OFF_H_ALONE: usize = PSI_DIM;
const OFF_H_JOINT: usize = OFF_H_ALONE + HX_DIM * EMBED_DIM;
const OFF_L_FREE: usize = OFF_H_JOINT + HX_DIM * EMBED_DIM;
const OFF_L_GROUNDED: usize = OFF_L_FREE + PSI_DIM * EMBED_DIM;
const OFF_GH_ALONE: usize = OFF_L_GROUNDED + PSI_DIM * EMBED_DIM;
const OFF_GH_JOINT: usize = OFF_GH_ALONE + GH_DIM;
const OFF_GL: usize = OFF_GH_JOINT + GH_DIM;

pub const GRAMMAR_TOKENS: [&str; 21] = [
    "move",
    "rotate",
    "close",
    "open",
    "gripper",
    "towards",
    "pick",
    "release",
    "neutral",
    "forward",
    "backward",
    "left",
    "right",
    "up",
    "down",
    "rot_left",
    "rot_right",
    "rot_up",
    "rot_down",
    "clockwise",
    "counterclockwise",
];

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("dataset has no instruction labels; run the augmenter first")]
    Unlabeled,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty dataset")]
    Empty,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

fn fnv1a(salt: u64, word: &str) -> u64 {
    let mut h = FNV_OFFSET ^ salt;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Fixed word list hashed into `EMBED_DIM` bins.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    salt: u64,
    bins: HashMap<String, usize>,
    objects: Vec<String>,
}

impl Vocabulary {
    /// Grammar words plus the object catalog. Collisions are resolved by linear probing in
    /// vocabulary order, so every word owns a distinct bin.
    pub fn new(salt: u64) -> Self {
        let objects: Vec<String> = CATALOG.iter().map(|(id, _)| id.to_string()).collect();
        let mut bins = HashMap::new();
        let mut used = [false; EMBED_DIM];
        for w in GRAMMAR_TOKENS.iter().copied().chain(objects.iter().map(String::as_str)) {
            let mut b = (fnv1a(salt, w) % EMBED_DIM as u64) as usize;
            while used[b] {
                b = (b + 1) % EMBED_DIM;
            }
            used[b] = true;
            bins.insert(w.to_string(), b);
        }
        Vocabulary {
            salt,
            bins,
            objects,
        }
    }

    pub fn salt(&self) -> u64 {
        self.salt
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn bin(&self, token: &str) -> Option<usize> {
        self.bins.get(token).copied()
    }

    pub fn is_object(&self, word: &str) -> bool {
        self.objects.iter().any(|o| o == word)
    }

    /// In-vocabulary tokens of a string. Direction words after "rotate" become rotation tokens
    /// and the "up" of "pick up" is dropped.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower
            .split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        let mut out = Vec::new();
        let mut rotating = false;
        for (i, w) in words.iter().enumerate() {
            if *w == "rotate" {
                rotating = true;
            }
            if *w == "up" && i > 0 && words[i - 1] == "pick" {
                continue;
            }
            let tok = match *w {
                "left" | "right" | "up" | "down" if rotating => format!("rot_{w}"),
                _ => w.to_string(),
            };
            if self.bins.contains_key(&tok) {
                out.push(tok);
            }
        }
        out
    }

    pub fn embed(&self, text: Option<&str>) -> InstructionEmbedding {
        let Some(text) = text else {
            return InstructionEmbedding::zero();
        };
        let toks = self.tokenize(text);
        if toks.is_empty() {
            return InstructionEmbedding::zero();
        }
        let mut vec = vec![0.0; EMBED_DIM];
        let mut objects: Vec<String> = Vec::new();
        for t in &toks {
            vec[self.bins[t]] += 1.0;
            if self.is_object(t) && !objects.contains(t) {
                objects.push(t.clone());
            }
        }
        let norm = vec.iter().map(|v| v * v).sum::<f64>().sqrt();
        vec.iter_mut().for_each(|v| *v /= norm);
        InstructionEmbedding {
            vec,
            objects,
            is_zero: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionEmbedding {
    pub vec: Vec<f64>,
    /// Catalog objects named in the instruction, in order of first mention.
    pub objects: Vec<String>,
    pub is_zero: bool,
}

impl InstructionEmbedding {
    pub fn zero() -> Self {
        InstructionEmbedding {
            vec: vec![0.0; EMBED_DIM],
            objects: Vec::new(),
            is_zero: true,
        }
    }

    pub fn cosine(&self, other: &InstructionEmbedding) -> f64 {
        let dot: f64 = self.vec.iter().zip(&other.vec).map(|(a, b)| a * b).sum();
        let na = self.vec.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = other.vec.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

pub fn psi(s: &State) -> [f64; PSI_DIM] {
    let held = s.held_pose();
    [
        1.0,
        s.gripper_pos[0],
        s.gripper_pos[1],
        s.gripper_pos[2],
        s.gripper_rot[0],
        s.gripper_rot[1],
        s.gripper_rot[2],
        s.gripper_open,
        if held.is_some() { 1.0 } else { 0.0 },
        held.map(|p| p.yaw).unwrap_or(0.0),
    ]
}

fn rel(s: &State, id: &str) -> [f64; 2] {
    match s.object_poses.get(id) {
        Some(p) => [p.pos[0] - s.gripper_pos[0], p.pos[1] - s.gripper_pos[1]],
        None => [0.0, 0.0],
    }
}

fn present<'a>(s: &State, e: &'a InstructionEmbedding) -> Vec<&'a str> {
    e.objects
        .iter()
        .map(String::as_str)
        .filter(|o| s.object_poses.contains_key(*o))
        .collect()
}

/// Offsets to the first and last objects named in the high-level instruction and their proximities.
fn high_grounding(s: &State, eh: &InstructionEmbedding, held: f64) -> Option<[f64; GH_DIM]> {
    let hp = present(s, eh);
    let (first, last) = (hp.first()?, hp.last()?);
    let g1 = rel(s, first);
    let g2 = rel(s, last);
    let prox = |g: [f64; 2]| (-(g[0] * g[0] + g[1] * g[1]) / (PROX_SCALE * PROX_SCALE)).exp();
    let (p1, p2) = (prox(g1), prox(g2));
    Some([
        g1[0],
        g1[1],
        g2[0],
        g2[1],
        held * g1[0],
        held * g1[1],
        held * g2[0],
        held * g2[1],
        p1,
        p2,
        held * p1,
        held * p2,
    ])
}

/// Sparse feature vector as (index, value) pairs.
pub fn features(s: &State, eh: &InstructionEmbedding, el: &InstructionEmbedding) -> Vec<(usize, f64)> {
    let p = psi(s);
    let held = p[8];
    let mut out = Vec::with_capacity(256);
    for (i, v) in p.iter().enumerate() {
        if *v != 0.0 {
            out.push((i, *v));
        }
    }
    let (h_off, gh_off) = if el.is_zero {
        (OFF_H_ALONE, OFF_GH_ALONE)
    } else {
        (OFF_H_JOINT, OFF_GH_JOINT)
    };
    let l_target = present(s, el).first().copied();
    let l_off = if l_target.is_some() { OFF_L_GROUNDED } else { OFF_L_FREE };
    let gh = high_grounding(s, eh, held);
    if let Some(vals) = &gh {
        for (i, v) in vals.iter().enumerate() {
            out.push((gh_off + i, *v));
        }
    }
    let mut hx = [0.0; HX_DIM];
    hx[..PSI_DIM].copy_from_slice(&p);
    if let Some(vals) = &gh {
        hx[PSI_DIM..].copy_from_slice(vals);
    }
    for (off, e, x) in [(h_off, eh, &hx[..]), (l_off, el, &p[..])] {
        if e.is_zero {
            continue;
        }
        for (b, ev) in e.vec.iter().enumerate() {
            if *ev == 0.0 {
                continue;
            }
            for (i, xv) in x.iter().enumerate() {
                if *xv != 0.0 {
                    out.push((off + b * x.len() + i, xv * ev));
                }
            }
        }
    }
    if let Some(first) = l_target {
        let g = rel(s, first);
        for (i, v) in [g[0], g[1], held * g[0], held * g[1]].iter().enumerate() {
            out.push((OFF_GL + i, *v));
        }
    }
    out
}

fn squash(x: f64) -> f64 {
    logistic(x).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Which instruction slots are replaced by the zero embedding at prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Masking {
    #[default]
    None,
    High,
    Low,
    Both,
}

impl Masking {
    pub fn apply<'a>(self, h: Option<&'a str>, l: Option<&'a str>) -> (Option<&'a str>, Option<&'a str>) {
        match self {
            Masking::None => (h, l),
            Masking::High => (None, l),
            Masking::Low => (h, None),
            Masking::Both => (None, None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.02,
            steps: 3000,
            batch_size: 256,
            ridge: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.lr > 0.0) {
            return Err(PolicyError::Config("learning rate must be positive".into()));
        }
        if self.steps == 0 && self.batch_size == 0 {
            return Err(PolicyError::Config("batch size must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(PolicyError::Config("batch size must be positive".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(PolicyError::Config("ridge must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Minibatch objective per step, ridge included.
    pub loss_curve: Vec<f64>,
    /// Final full-data value of each conditioning term, in the order the terms were given.
    pub term_losses: Vec<f64>,
    pub final_loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub vocab: Vocabulary,
    /// Row-major `ACTION_DIM x FEATURE_DIM`.
    pub weights: Vec<f64>,
    pub report: TrainReport,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    embed_dim: usize,
    feature_dim: usize,
    salt: u64,
    weights: Vec<f64>,
    report: TrainReport,
}

impl PolicyModel {
    pub fn zeros(salt: u64) -> Self {
        PolicyModel {
            vocab: Vocabulary::new(salt),
            weights: vec![0.0; ACTION_DIM * FEATURE_DIM],
            report: TrainReport::default(),
        }
    }

    pub fn embed(&self, text: Option<&str>) -> InstructionEmbedding {
        self.vocab.embed(text)
    }

    pub fn logits(&self, phi: &[(usize, f64)]) -> [f64; ACTION_DIM] {
        let mut z = [0.0; ACTION_DIM];
        for (d, zd) in z.iter_mut().enumerate() {
            let row = &self.weights[d * FEATURE_DIM..(d + 1) * FEATURE_DIM];
            *zd = phi.iter().map(|(j, v)| row[*j] * v).sum();
        }
        z
    }

    pub fn predict_embedded(
        &self,
        s: &State,
        eh: &InstructionEmbedding,
        el: &InstructionEmbedding,
    ) -> ActionVec {
        let z = self.logits(&features(s, eh, el));
        ActionVec(z.map(squash))
    }

    pub fn predict(&self, s: &State, c_h: Option<&str>, c_l: Option<&str>) -> ActionVec {
        self.predict_embedded(s, &self.embed(c_h), &self.embed(c_l))
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            embed_dim: EMBED_DIM,
            feature_dim: FEATURE_DIM,
            salt: self.vocab.salt(),
            weights: self.weights.clone(),
            report: self.report.clone(),
        };
        let text = serde_json::to_string(&ck).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported version {}",
                ck.version
            )));
        }
        if ck.embed_dim != EMBED_DIM
            || ck.feature_dim != FEATURE_DIM
            || ck.weights.len() != ACTION_DIM * FEATURE_DIM
        {
            return Err(PolicyError::Checkpoint("feature layout mismatch".into()));
        }
        if ck.weights.iter().any(|w| !w.is_finite()) {
            return Err(PolicyError::Checkpoint("non-finite weight".into()));
        }
        Ok(PolicyModel {
            vocab: Vocabulary::new(ck.salt),
            weights: ck.weights,
            report: ck.report,
        })
    }
}

/// One regression target with the conditioning pairs it is trained under.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub state: &'a State,
    pub action: ActionVec,
    /// Indices into the embedding table, one pair per loss term; `None` is the zero embedding.
    pub conds: Vec<(Option<usize>, Option<usize>)>,
}

/// Training samples plus the embedding table they index.
pub struct TrainSet<'a> {
    pub samples: Vec<Sample<'a>>,
    pub embeddings: Vec<InstructionEmbedding>,
    pub n_terms: usize,
}

struct Interner<'v> {
    vocab: &'v Vocabulary,
    index: HashMap<String, Option<usize>>,
    table: Vec<InstructionEmbedding>,
}

impl<'v> Interner<'v> {
    fn new(vocab: &'v Vocabulary) -> Self {
        Interner {
            vocab,
            index: HashMap::new(),
            table: Vec::new(),
        }
    }

    fn get(&mut self, text: Option<&str>) -> Option<usize> {
        let text = text?;
        if let Some(v) = self.index.get(text) {
            return *v;
        }
        let e = self.vocab.embed(Some(text));
        let id = if e.is_zero {
            None
        } else {
            self.table.push(e);
            Some(self.table.len() - 1)
        };
        self.index.insert(text.to_string(), id);
        id
    }
}

/// Samples for the masked joint objective: every labeled step under (c_H, 0), (0, c_L) and (c_H, c_L).
pub fn joint_train_set<'a>(data: &'a Dataset, vocab: &Vocabulary) -> Result<TrainSet<'a>, PolicyError> {
    if data.trajectories.is_empty() {
        return Err(PolicyError::Empty);
    }
    if !data.is_labeled() {
        return Err(PolicyError::Unlabeled);
    }
    let mut interner = Interner::new(vocab);
    let mut samples = Vec::new();
    for traj in &data.trajectories {
        for (t, step) in traj.steps.iter().enumerate() {
            let (h, l) = traj.step_labels(t).ok_or(PolicyError::Unlabeled)?;
            let h = interner.get(Some(h));
            let l = interner.get(Some(l));
            samples.push(Sample {
                state: &step.state,
                action: step.action(),
                conds: vec![(h, None), (None, l), (h, l)],
            });
        }
    }
    Ok(TrainSet {
        samples,
        embeddings: interner.table,
        n_terms: 3,
    })
}

/// Samples conditioned only on each trajectory's raw instruction.
pub fn instruction_train_set<'a>(data: &'a Dataset, vocab: &Vocabulary) -> Result<TrainSet<'a>, PolicyError> {
    if data.trajectories.is_empty() {
        return Err(PolicyError::Empty);
    }
    let mut interner = Interner::new(vocab);
    let mut samples = Vec::new();
    for traj in &data.trajectories {
        let h = interner.get(Some(&traj.instruction));
        for step in &traj.steps {
            samples.push(Sample {
                state: &step.state,
                action: step.action(),
                conds: vec![(h, None)],
            });
        }
    }
    Ok(TrainSet {
        samples,
        embeddings: interner.table,
        n_terms: 1,
    })
}

fn sample_features(set: &TrainSet, s: &Sample, c: (Option<usize>, Option<usize>)) -> Vec<(usize, f64)> {
    let zero = InstructionEmbedding::zero();
    let eh = c.0.map(|i| &set.embeddings[i]).unwrap_or(&zero);
    let el = c.1.map(|i| &set.embeddings[i]).unwrap_or(&zero);
    features(s.state, eh, el)
}

/// Objective over a batch: sum over terms of the batch-mean squared error, plus `ridge * |W|^2`.
/// Returns the value, per-term values and the gradient with respect to `weights`.
pub fn batch_loss(
    weights: &[f64],
    set: &TrainSet,
    batch: &[usize],
    ridge: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let mut grad: Vec<f64> = weights.iter().map(|w| 2.0 * ridge * w).collect();
    let mut terms = vec![0.0; set.n_terms];
    let inv = 1.0 / batch.len() as f64;
    for &i in batch {
        let s = &set.samples[i];
        for (k, &c) in s.conds.iter().enumerate() {
            let phi = sample_features(set, s, c);
            for d in 0..ACTION_DIM {
                let row = &weights[d * FEATURE_DIM..(d + 1) * FEATURE_DIM];
                let z: f64 = phi.iter().map(|(j, v)| row[*j] * v).sum();
                let p = logistic(z);
                let r = p - s.action.0[d];
                terms[k] += r * r * inv;
                let g = 2.0 * r * p * (1.0 - p) * inv;
                let grow = &mut grad[d * FEATURE_DIM..(d + 1) * FEATURE_DIM];
                for (j, v) in &phi {
                    grow[*j] += g * v;
                }
            }
        }
    }
    let reg: f64 = ridge * weights.iter().map(|w| w * w).sum::<f64>();
    (terms.iter().sum::<f64>() + reg, terms, grad)
}

/// Adam with linearly decaying step size, starting from `init`.
pub fn fit(init: &[f64], set: &TrainSet, cfg: &TrainConfig) -> Result<(Vec<f64>, TrainReport), PolicyError> {
    cfg.validate()?;
    if set.samples.is_empty() {
        return Err(PolicyError::Empty);
    }
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut w = init.to_vec();
    let mut m = vec![0.0; w.len()];
    let mut v = vec![0.0; w.len()];
    let mut rng = seed::rng(cfg.seed, &[0x7472_6169_6e]);
    let n = set.samples.len();
    let full = cfg.batch_size >= n;
    let all: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = if full {
            all.clone()
        } else {
            (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect()
        };
        let (loss, _, grad) = batch_loss(&w, set, &batch, cfg.ridge);
        curve.push(loss);
        let lr = cfg.lr * (1.0 - step as f64 / cfg.steps as f64).max(0.05);
        let t = (step + 1) as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for j in 0..w.len() {
            let g = grad[j];
            if g == 0.0 && m[j] == 0.0 {
                continue;
            }
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    let (final_loss, term_losses, _) = batch_loss(&w, set, &all, cfg.ridge);
    Ok((
        w,
        TrainReport {
            loss_curve: curve,
            term_losses,
            final_loss,
            seed: cfg.seed,
        },
    ))
}

/// Trains the masked joint objective from zero weights.
pub fn train_masked_bc(data: &Dataset, cfg: &TrainConfig) -> Result<PolicyModel, PolicyError> {
    let vocab = Vocabulary::new(cfg.seed);
    let set = joint_train_set(data, &vocab)?;
    let init = vec![0.0; ACTION_DIM * FEATURE_DIM];
    let (weights, report) = fit(&init, &set, cfg)?;
    log::info!(
        "trained on {} samples: loss {:.5}, terms {:?}",
        set.samples.len(),
        report.final_loss,
        report.term_losses
    );
    Ok(PolicyModel {
        vocab,
        weights,
        report,
    })
}

/// Continues training all weights on target demos conditioned on the raw instruction only.
pub fn finetune_baseline(model: &PolicyModel, target: &Dataset, cfg: &TrainConfig) -> Result<PolicyModel, PolicyError> {
    if target.trajectories.is_empty() {
        return Err(PolicyError::Empty);
    }
    if cfg.steps == 0 {
        return Ok(model.clone());
    }
    let set = instruction_train_set(target, &model.vocab)?;
    let (weights, report) = fit(&model.weights, &set, cfg)?;
    Ok(PolicyModel {
        vocab: model.vocab.clone(),
        weights,
        report,
    })
}

/// Plays a list of (high, low) pairs, each for `chunk` steps, then holds the last one.
pub struct ScheduledPolicy<'a> {
    model: &'a PolicyModel,
    schedule: Vec<(InstructionEmbedding, InstructionEmbedding)>,
    chunk: usize,
}

impl<'a> ScheduledPolicy<'a> {
    pub fn new(
        model: &'a PolicyModel,
        pairs: &[(Option<String>, Option<String>)],
        chunk: usize,
        masking: Masking,
    ) -> Self {
        let mut schedule: Vec<_> = pairs
            .iter()
            .map(|(h, l)| {
                let (h, l) = masking.apply(h.as_deref(), l.as_deref());
                (model.embed(h), model.embed(l))
            })
            .collect();
        if schedule.is_empty() {
            schedule.push((InstructionEmbedding::zero(), InstructionEmbedding::zero()));
        }
        ScheduledPolicy {
            model,
            schedule,
            chunk: chunk.max(1),
        }
    }

    /// Constant conditioning, e.g. the raw task instruction with no low-level string.
    pub fn constant(model: &'a PolicyModel, high: Option<&str>, low: Option<&str>) -> Self {
        Self::new(
            model,
            &[(high.map(str::to_owned), low.map(str::to_owned))],
            1,
            Masking::None,
        )
    }

    pub fn from_decomposition(
        model: &'a PolicyModel,
        dec: &Decomposition,
        chunk: usize,
        masking: Masking,
        skip_neutral: bool,
    ) -> Self {
        Self::new(model, &schedule_pairs(dec, skip_neutral), chunk, masking)
    }

    pub fn pair_index(&self, t: usize) -> usize {
        (t / self.chunk).min(self.schedule.len() - 1)
    }
}

/// Flattened (high, low) pairs of a decomposition, optionally without neutral-return skills.
pub fn schedule_pairs(dec: &Decomposition, skip_neutral: bool) -> Vec<(Option<String>, Option<String>)> {
    dec.flatten()
        .into_iter()
        .filter(|(_, l)| !(skip_neutral && parse_skill(l).is_ok_and(|p| p.is_neutral())))
        .map(|(h, l)| (Some(h), Some(l)))
        .collect()
}

impl Actor for ScheduledPolicy<'_> {
    fn act(&mut self, state: &State, t: usize) -> ActionVec {
        let (eh, el) = &self.schedule[self.pair_index(t)];
        self.model.predict_embedded(state, eh, el)
    }
}

/// Feature vector used by the nearest-neighbor baseline: gripper pose then objects sorted by id.
pub fn nn_features(s: &State) -> Vec<f64> {
    let mut f = Vec::with_capacity(7 + 4 * s.object_poses.len());
    f.extend_from_slice(&s.gripper_pos);
    f.extend_from_slice(&s.gripper_rot);
    f.push(s.gripper_open);
    for p in s.object_poses.values() {
        f.extend_from_slice(&p.pos);
        f.push(p.yaw);
    }
    f
}

/// 1-nearest-neighbor action lookup over target demonstrations.
pub struct NnBaseline {
    keys: Vec<Vec<f64>>,
    actions: Vec<ActionVec>,
}

impl NnBaseline {
    pub fn new(target: &Dataset) -> Result<Self, PolicyError> {
        let mut keys = Vec::new();
        let mut actions = Vec::new();
        for traj in &target.trajectories {
            for st in &traj.steps {
                keys.push(nn_features(&st.state));
                actions.push(st.action());
            }
        }
        if keys.is_empty() {
            return Err(PolicyError::Empty);
        }
        Ok(NnBaseline { keys, actions })
    }

    /// Index of the nearest stored state; ties go to the earliest (trajectory, step).
    pub fn nearest(&self, s: &State) -> usize {
        let q = nn_features(s);
        let mut best = (f64::INFINITY, 0);
        for (i, k) in self.keys.iter().enumerate() {
            let d: f64 = k
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                + (k.len() as f64 - q.len() as f64).abs() * 1e6;
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    pub fn predict(&self, s: &State) -> ActionVec {
        self.actions[self.nearest(s)]
    }
}

impl Actor for NnBaseline {
    fn act(&mut self, state: &State, _t: usize) -> ActionVec {
        self.predict(state)
    }
}

/// Mean per-step squared action error of a conditioning schedule on a trajectory.
pub fn demo_mse(model: &PolicyModel, traj: &Trajectory, cond: &dyn Fn(usize) -> (Option<String>, Option<String>)) -> f64 {
    let mut total = 0.0;
    for (t, st) in traj.steps.iter().enumerate() {
        let (h, l) = cond(t);
        let a = model.predict(&st.state, h.as_deref(), l.as_deref());
        total += a.squared_distance(&st.action());
    }
    total / traj.steps.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ObjectPose, Role, Step};
    use crate::proposer::grammar::enumerate;
    use crate::sim::canonical_stats;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn state(g: [f64; 3], objs: &[(&str, [f64; 3])]) -> State {
        State {
            gripper_pos: g,
            gripper_rot: [0.0; 3],
            gripper_open: 1.0,
            object_poses: objs
                .iter()
                .map(|(id, p)| (id.to_string(), ObjectPose { pos: *p, yaw: 0.0 }))
                .collect::<BTreeMap<_, _>>(),
            held_object: None,
        }
    }

    #[test]
    fn vocabulary_is_collision_free() {
        let v = Vocabulary::new(0);
        assert_eq!(v.len(), 49);
        let mut bins: Vec<usize> = GRAMMAR_TOKENS.iter().map(|t| v.bin(t).unwrap()).collect();
        bins.extend(CATALOG.iter().map(|(o, _)| v.bin(o).unwrap()));
        bins.sort();
        bins.dedup();
        assert_eq!(bins.len(), 49);
    }

    #[test]
    fn tokenizer_rules() {
        let v = Vocabulary::new(0);
        assert_eq!(
            v.tokenize("Rotate the gripper LEFT"),
            vec!["rotate", "gripper", "rot_left"]
        );
        assert_eq!(
            v.tokenize("close the gripper to pick up marker"),
            vec!["close", "gripper", "pick", "marker"]
        );
        assert_eq!(v.tokenize("move the gripper up"), vec!["move", "gripper", "up"]);
    }

    #[test]
    fn grammar_embeddings_distinct_up_to_word_order() {
        let v = Vocabulary::new(0);
        let skills: Vec<String> = enumerate(&["marker", "box", "drawer"])
            .iter()
            .map(|s| s.render())
            .collect();
        for (i, a) in skills.iter().enumerate() {
            for b in &skills[i + 1..] {
                let (ta, tb) = (v.tokenize(a), v.tokenize(b));
                let mut sa = ta.clone();
                let mut sb = tb.clone();
                sa.sort();
                sb.sort();
                if sa == sb {
                    // "forward and left" vs "left and forward" share a bag of words
                    continue;
                }
                let c = v.embed(Some(a)).cosine(&v.embed(Some(b)));
                assert!(c < 1.0 - 1e-12, "{a} / {b}");
            }
        }
        let l = v.embed(Some("move the gripper left"));
        let r = v.embed(Some("move the gripper right"));
        assert!(l.cosine(&r) < 1.0);
    }

    #[test]
    fn absent_instruction_is_zero() {
        let v = Vocabulary::new(3);
        for e in [v.embed(None), v.embed(Some("")), v.embed(Some("the and"))] {
            assert!(e.is_zero);
            assert!(e.vec.iter().all(|x| *x == 0.0));
        }
        assert_eq!(v.embed(Some("open the drawer")), v.embed(Some("open the drawer")));
    }

    #[test]
    fn zero_model_predicts_midpoint() {
        let m = PolicyModel::zeros(0);
        let s = state([0.3, 0.1, 0.1], &[("beet", [0.5, 0.0, 0.0])]);
        assert_eq!(m.predict(&s, None, None), ActionVec::NEUTRAL);
        assert_eq!(m.predict(&s, Some("open the drawer"), Some("move the gripper left")), ActionVec::NEUTRAL);
    }

    fn random_model(seed: u64) -> PolicyModel {
        let mut rng = seed::rng(seed, &[]);
        let mut m = PolicyModel::zeros(seed);
        for w in m.weights.iter_mut() {
            *w = rng.random_range(-0.5..0.5);
        }
        m
    }

    #[test]
    fn masking_equals_zero_slot() {
        let m = random_model(4);
        let s = state([0.3, 0.1, 0.1], &[("beet", [0.5, 0.0, 0.0]), ("box", [0.6, 0.3, 0.0])]);
        let h = "put the beet in the box";
        let a = m.predict(&s, Some(h), None);
        let b = m.predict_embedded(&s, &m.embed(Some(h)), &InstructionEmbedding::zero());
        assert_eq!(a, b);
        let a = m.predict(&s, None, Some("move the gripper left towards box"));
        let b = m.predict_embedded(&s, &InstructionEmbedding::zero(), &m.embed(Some("move the gripper left towards box")));
        assert_eq!(a, b);
    }

    fn labeled_dataset(items: Vec<(State, [f64; 7], &str, &str)>) -> Dataset {
        let stats = canonical_stats();
        let trajectories = items
            .into_iter()
            .map(|(s, raw, h, l)| Trajectory {
                instruction: h.to_string(),
                steps: vec![Step::new(s, raw, &stats)],
                low_labels: Some(vec![l.to_string()]),
                high_labels: Some(vec![h.to_string()]),
                stage_ids: None,
            })
            .collect();
        Dataset {
            role: Role::Prior,
            norm_stats: stats,
            trajectories,
        }
    }

    #[test]
    fn memorizes_single_point() {
        let s = state([0.3, 0.1, 0.1], &[("beet", [0.5, 0.0, 0.0])]);
        let raw = [0.05, -0.03, 0.01, 0.1, 0.0, -0.1, 1.0];
        let data = labeled_dataset(vec![(s.clone(), raw, "put the beet in the box", "move the gripper forward towards beet"); 4]);
        let cfg = TrainConfig {
            lr: 0.05,
            steps: 3000,
            batch_size: 4,
            ridge: 0.0,
            seed: 1,
        };
        let m = train_masked_bc(&data, &cfg).unwrap();
        assert_eq!(m.report.term_losses.len(), 3);
        assert!(m.report.term_losses.iter().all(|t| *t >= 0.0));
        assert!(m.report.final_loss < 1e-4, "{}", m.report.final_loss);
    }

    #[test]
    fn unlabeled_data_is_rejected() {
        let mut d = labeled_dataset(vec![(state([0.3, 0.0, 0.1], &[]), [0.0; 7], "x", "y")]);
        d.trajectories[0].low_labels = None;
        assert!(matches!(train_masked_bc(&d, &TrainConfig::default()), Err(PolicyError::Unlabeled)));
    }

    fn low_only_dataset(seed: u64, n: usize) -> Dataset {
        let mut rng = seed::rng(seed, &[]);
        let skills = [
            ("move the gripper left", [0.0, 0.05, 0.0, 0.0, 0.0, 0.0, -1.0]),
            ("move the gripper forward", [0.05, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
            ("rotate the gripper clockwise", [0.0, 0.0, 0.0, 0.1, 0.0, 0.0, -1.0]),
            ("close the gripper", [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
        ];
        let highs = ["open the drawer", "put the beet in the box", "straighten the pen"];
        let items = (0..n)
            .map(|_| {
                let s = state(
                    [rng.random_range(0.2..0.8), rng.random_range(-0.3..0.3), rng.random_range(0.02..0.2)],
                    &[],
                );
                let (l, raw) = skills[rng.random_range(0..skills.len())];
                let h = highs[rng.random_range(0..highs.len())];
                (s, raw, h, l)
            })
            .collect();
        labeled_dataset(items)
    }

    #[test]
    fn low_level_alone_suffices_when_actions_ignore_high() {
        let data = low_only_dataset(2, 300);
        let cfg = TrainConfig {
            lr: 0.05,
            steps: 1500,
            batch_size: 128,
            ridge: 1e-6,
            seed: 2,
        };
        let m = train_masked_bc(&data, &cfg).unwrap();
        let mse = |mask: Masking| {
            let mut tot = 0.0;
            for t in &data.trajectories {
                let (h, l) = mask.apply(t.high_labels.as_ref().map(|v| v[0].as_str()), t.low_labels.as_ref().map(|v| v[0].as_str()));
                tot += m.predict(&t.steps[0].state, h, l).squared_distance(&t.steps[0].action());
            }
            tot / data.trajectories.len() as f64
        };
        let low = mse(Masking::High);
        let full = mse(Masking::None);
        assert!(low <= 1.05 * full + 1e-9, "low {low} full {full}");
    }

    #[test]
    fn full_batch_loss_curve_is_smoothly_nonincreasing() {
        let data = low_only_dataset(5, 40);
        let cfg = TrainConfig {
            lr: 0.01,
            steps: 600,
            batch_size: 40,
            ridge: 1e-6,
            seed: 5,
        };
        let m = train_masked_bc(&data, &cfg).unwrap();
        let c = &m.report.loss_curve;
        let smooth: Vec<f64> = c.windows(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
        for w in smooth.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} > {}", w[1], w[0]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = low_only_dataset(9, 6);
        let vocab = Vocabulary::new(9);
        let set = joint_train_set(&data, &vocab).unwrap();
        let m = random_model(9);
        let batch: Vec<usize> = (0..set.samples.len()).collect();
        let (_, _, grad) = batch_loss(&m.weights, &set, &batch, 1e-3);
        let mut touched: Vec<usize> = (0..grad.len()).filter(|j| grad[*j].abs() > 1e-6).collect();
        touched.truncate(40);
        assert!(!touched.is_empty());
        for j in touched {
            let h = 1e-5;
            let mut wp = m.weights.clone();
            wp[j] += h;
            let mut wm = m.weights.clone();
            wm[j] -= h;
            let fd = (batch_loss(&wp, &set, &batch, 1e-3).0 - batch_loss(&wm, &set, &batch, 1e-3).0) / (2.0 * h);
            let rel = (fd - grad[j]).abs() / grad[j].abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-4, "coord {j}: analytic {} fd {fd}", grad[j]);
        }
    }

    #[test]
    fn finetune_zero_steps_and_reduction() {
        let data = low_only_dataset(3, 30);
        let base = PolicyModel::zeros(0);
        let same = finetune_baseline(&base, &data, &TrainConfig { steps: 0, ..TrainConfig::default() }).unwrap();
        assert_eq!(same.weights, base.weights);
        let mse = |m: &PolicyModel| {
            data.trajectories
                .iter()
                .map(|t| m.predict(&t.steps[0].state, Some(&t.instruction), None).squared_distance(&t.steps[0].action()))
                .sum::<f64>()
        };
        let tuned = finetune_baseline(&base, &data, &TrainConfig { steps: 300, batch_size: 30, lr: 0.05, ..TrainConfig::default() }).unwrap();
        assert!(mse(&tuned) <= 0.5 * mse(&base));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = random_model(7);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        let back = PolicyModel::load(&p).unwrap();
        assert_eq!(back.weights, m.weights);
        assert_eq!(back.vocab.salt(), 7);
    }

    #[test]
    fn scheduled_policy_switches_every_chunk() {
        let m = random_model(1);
        let dec = Decomposition::new(vec![crate::model::Subtask {
            high: "put the beet in the box".into(),
            skills: vec![
                "move the gripper left".into(),
                "move the gripper right".into(),
                "close the gripper".into(),
            ],
        }])
        .unwrap();
        let p = ScheduledPolicy::from_decomposition(&m, &dec, 8, Masking::None, true);
        let idx: Vec<usize> = (0..30).map(|t| p.pair_index(t)).collect();
        // zero-based t = 8 is the ninth step
        assert_eq!(idx[7], 0);
        assert_eq!(idx[8], 1);
        assert_eq!(idx[16], 2);
        assert_eq!(idx[29], 2);
        let s = state([0.3, 0.0, 0.1], &[]);
        let mut both = ScheduledPolicy::from_decomposition(&m, &dec, 8, Masking::Both, true);
        assert_eq!(both.act(&s, 3), m.predict(&s, None, None));
    }

    fn nn_dataset(seed: u64, n_traj: usize, len: usize) -> Dataset {
        let mut rng = seed::rng(seed, &[]);
        let stats = canonical_stats();
        let trajectories = (0..n_traj)
            .map(|_| Trajectory {
                instruction: "x".into(),
                steps: (0..len)
                    .map(|_| {
                        let s = state(
                            [rng.random_range(0.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(0.0..0.3)],
                            &[("beet", [rng.random_range(0.0..1.0), 0.0, 0.0])],
                        );
                        let raw: [f64; 7] = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
                        Step::new(s, raw, &stats)
                    })
                    .collect(),
                low_labels: None,
                high_labels: None,
                stage_ids: None,
            })
            .collect();
        Dataset {
            role: Role::Target,
            norm_stats: stats,
            trajectories,
        }
    }

    #[test]
    fn nn_baseline_exact_and_constant() {
        let d = nn_dataset(1, 3, 10);
        let nn = NnBaseline::new(&d).unwrap();
        let st = &d.trajectories[1].steps[4];
        assert_eq!(nn.predict(&st.state), st.action());
        let one = nn_dataset(2, 1, 1);
        let nn1 = NnBaseline::new(&one).unwrap();
        let q = state([0.9, 0.4, 0.2], &[("beet", [0.1, 0.0, 0.0])]);
        assert_eq!(nn1.predict(&q), one.trajectories[0].steps[0].action());
    }

    #[test]
    fn nn_matches_brute_force_scan() {
        let d = nn_dataset(3, 4, 25);
        let nn = NnBaseline::new(&d).unwrap();
        let flat: Vec<&Step> = d.trajectories.iter().flat_map(|t| t.steps.iter()).collect();
        let mut rng = seed::rng(11, &[]);
        for _ in 0..1000 {
            let q = state(
                [rng.random_range(0.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(0.0..0.3)],
                &[("beet", [rng.random_range(0.0..1.0), 0.0, 0.0])],
            );
            let qf = nn_features(&q);
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (i, st) in flat.iter().enumerate() {
                let f = nn_features(&st.state);
                let dist: f64 = f.iter().zip(&qf).map(|(a, b)| (a - b).powi(2)).sum();
                if dist < bd {
                    bd = dist;
                    best = i;
                }
            }
            assert_eq!(nn.predict(&q), flat[best].action());
        }
    }

    proptest! {
        #[test]
        fn predictions_stay_in_open_interval(seed in 0u64..1000, gx in 0.0f64..1.0, gy in -0.5f64..0.5) {
            let m = random_model(seed);
            let s = state([gx, gy, 0.1], &[("beet", [0.5, 0.1, 0.0])]);
            let a = m.predict(&s, Some("put the beet in the box"), Some("move the gripper left towards beet"));
            prop_assert!(a.0.iter().all(|v| *v > 0.0 && *v < 1.0));
            prop_assert_eq!(a, m.predict(&s, Some("put the beet in the box"), Some("move the gripper left towards beet")));
        }
    }
}
