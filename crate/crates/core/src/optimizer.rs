//! Joint search over candidate decompositions and time partitions of the target demos.
//!
//! For a decomposition with `K` subtasks, a partition splits each demo into `K` contiguous
//! segments. Inside segment `k` the subtask's `m_k` skills take equal consecutive sub-blocks.
//! The cost of (c, u) on a demo is the summed squared action error of the policy under that
//! conditioning; each candidate scores the sum over demos of its best sampled partition.

use std::collections::HashMap;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Dataset, Decomposition, Partition, Trajectory};
use crate::policy::{schedule_pairs, Masking, PolicyModel, ScheduledPolicy};
use crate::proposer::grammar::parse_skill;
use crate::proposer::ProposalBatch;
use crate::seed;

pub const INFERENCE_CHUNK: usize = 8;
pub const MAX_EXHAUSTIVE: u128 = 1_000_000;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("cannot split {h} steps into {k} nonempty segments")]
    TooManySubtasks { k: usize, h: usize },
    #[error("decomposition has {got} subtasks but the partition has {expected}")]
    KMismatch { expected: usize, got: usize },
    #[error("partition horizon {partition} shorter than trajectory length {traj}")]
    ShortPartition { partition: usize, traj: usize },
    #[error("exhaustive enumeration would visit {0} partitions (limit 1e6)")]
    TooManyPartitions(u128),
    #[error("empty proposal batch")]
    EmptyBatch,
    #[error("empty target dataset")]
    EmptyTarget,
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    FixedTimes,
    ZeroShot,
    NoVlm,
    MaskCh,
    MaskCl,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::FixedTimes,
        Ablation::ZeroShot,
        Ablation::NoVlm,
        Ablation::MaskCh,
        Ablation::MaskCl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::FixedTimes => "fixed_times",
            Ablation::ZeroShot => "zero_shot",
            Ablation::NoVlm => "no_vlm",
            Ablation::MaskCh => "mask_ch",
            Ablation::MaskCl => "mask_cl",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|a| a.name() == s.to_lowercase())
    }

    pub fn masking(self) -> Masking {
        match self {
            Ablation::MaskCh => Masking::High,
            Ablation::MaskCl => Masking::Low,
            _ => Masking::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "n", rename_all = "snake_case")]
pub enum Search {
    Sampled(usize),
    Exhaustive,
    /// Equal-length segments with cuts at `floor(i T / K)`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub m: usize,
    pub n_samples: usize,
    /// Padded horizon used for batching; cut points are always sampled within the true length.
    pub horizon: usize,
    pub shared_partition_pool: bool,
    pub exhaustive: bool,
    pub ablation: Ablation,
    /// Leave "back to neutral" skills out of the cost and the runtime schedule.
    pub skip_neutral: bool,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            m: 15,
            n_samples: 20_000,
            horizon: 200,
            shared_partition_pool: false,
            exhaustive: false,
            ablation: Ablation::Full,
            skip_neutral: true,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        if self.m == 0 {
            return Err(OptimizerError::Config("M must be at least 1".into()));
        }
        if self.n_samples == 0 {
            return Err(OptimizerError::Config("N must be at least 1".into()));
        }
        Ok(())
    }

    pub fn search(&self) -> Search {
        if self.ablation == Ablation::FixedTimes {
            Search::Fixed
        } else if self.exhaustive {
            Search::Exhaustive
        } else {
            Search::Sampled(self.n_samples)
        }
    }
}

pub type Schedule = Vec<(Option<String>, Option<String>)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationResult {
    pub ablation: Ablation,
    pub chosen_index: Option<usize>,
    pub chosen: Option<Decomposition>,
    /// Best partition per demo for the chosen candidate.
    pub partitions: Vec<Partition>,
    pub trajectory_costs: Vec<f64>,
    pub total_cost: f64,
    /// Objective value of every candidate, in batch order.
    pub candidate_costs: Vec<f64>,
    /// Runtime conditioning pairs.
    pub schedule: Schedule,
    pub wall_clock_secs: f64,
    pub config: AdaptationConfig,
}

/// Uniform draw among the `C(H-1, K-1)` compositions of `H` into `K` nonempty parts.
pub fn sample_partition<R: Rng + ?Sized>(h: usize, k: usize, rng: &mut R) -> Result<Partition, OptimizerError> {
    if k == 0 || k > h {
        return Err(OptimizerError::TooManySubtasks { k, h });
    }
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, h - 1, k - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    Ok(Partition::new(cuts, h).expect("sampled cuts are valid"))
}

/// Equal split with cuts at `floor(i H / K)`.
pub fn fixed_partition(h: usize, k: usize) -> Result<Partition, OptimizerError> {
    if k == 0 || k > h {
        return Err(OptimizerError::TooManySubtasks { k, h });
    }
    let cuts = (1..k).map(|i| i * h / k).collect();
    Ok(Partition::new(cuts, h).expect("equal split is valid when K <= H"))
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r
}

/// Every composition of `h` into `k` nonempty parts, in lexicographic order of cuts.
pub fn enumerate_partitions(h: usize, k: usize) -> Result<Vec<Partition>, OptimizerError> {
    if k == 0 || k > h {
        return Err(OptimizerError::TooManySubtasks { k, h });
    }
    let count = binomial(h - 1, k - 1);
    if count > MAX_EXHAUSTIVE {
        return Err(OptimizerError::TooManyPartitions(count));
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut cuts: Vec<usize> = (1..k).collect();
    loop {
        out.push(Partition::new(cuts.clone(), h).expect("enumerated cuts are valid"));
        // advance to the next combination
        let mut i = cuts.len();
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            let max = h - 1 - (cuts.len() - 1 - i);
            if cuts[i] < max {
                cuts[i] += 1;
                for j in i + 1..cuts.len() {
                    cuts[j] = cuts[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// 1-based subtask index of 1-based timestep `t`.
pub fn subtask_index(t: usize, u: &Partition) -> usize {
    1 + u.cuts().iter().filter(|&&c| c < t).count()
}

/// Cost-bearing skills of each subtask.
pub fn cost_skills(c: &Decomposition, skip_neutral: bool) -> Vec<Vec<String>> {
    c.subtasks
        .iter()
        .map(|s| {
            s.skills
                .iter()
                .filter(|l| !(skip_neutral && parse_skill(l).is_ok_and(|p| p.is_neutral())))
                .cloned()
                .collect()
        })
        .collect()
}

/// Skill index for offset `o` within a segment of length `len` split among `m` skills.
pub fn skill_slot(o: usize, len: usize, m: usize) -> usize {
    o * m / len
}

/// Reference cost: a straight per-step loop over the partition.
pub fn cost(
    c: &Decomposition,
    u: &Partition,
    traj: &Trajectory,
    model: &PolicyModel,
    skip_neutral: bool,
) -> Result<f64, OptimizerError> {
    if c.k() != u.k() {
        return Err(OptimizerError::KMismatch {
            expected: u.k(),
            got: c.k(),
        });
    }
    if u.horizon() < traj.len() {
        return Err(OptimizerError::ShortPartition {
            partition: u.horizon(),
            traj: traj.len(),
        });
    }
    let skills = cost_skills(c, skip_neutral);
    let mut total = 0.0;
    for k in 0..u.k() {
        let (a, b) = u.bounds(k);
        let len = b - a;
        let m = skills[k].len();
        for o in 0..len {
            let t = a + o;
            if t >= traj.len() {
                break;
            }
            let low = (m > 0).then(|| skills[k][skill_slot(o, len, m)].as_str());
            let pred = model.predict(&traj.steps[t].state, Some(&c.subtasks[k].high), low);
            total += pred.squared_distance(&traj.steps[t].action());
        }
    }
    Ok(total)
}

/// Per-step squared errors of each distinct (high, low) pair on each trajectory.
struct ErrorTable {
    /// prefix[(h, l)][n][t] = sum of errors over steps < t of trajectory n
    prefix: HashMap<(String, Option<String>), Vec<Vec<f64>>>,
}

impl ErrorTable {
    fn build(cands: &[&Decomposition], trajs: &[&Trajectory], model: &PolicyModel, skip_neutral: bool) -> Self {
        let mut keys: Vec<(String, Option<String>)> = Vec::new();
        for c in cands {
            for (k, skills) in cost_skills(c, skip_neutral).into_iter().enumerate() {
                let h = c.subtasks[k].high.clone();
                if skills.is_empty() {
                    keys.push((h, None));
                } else {
                    keys.extend(skills.into_iter().map(|l| (h.clone(), Some(l))));
                }
            }
        }
        keys.sort();
        keys.dedup();
        let prefix = keys
            .into_par_iter()
            .map(|key| {
                let eh = model.embed(Some(&key.0));
                let el = model.embed(key.1.as_deref());
                let per: Vec<Vec<f64>> = trajs
                    .iter()
                    .map(|tr| {
                        let mut p = Vec::with_capacity(tr.len() + 1);
                        p.push(0.0);
                        let mut acc = 0.0;
                        for st in &tr.steps {
                            acc += model.predict_embedded(&st.state, &eh, &el).squared_distance(&st.action());
                            p.push(acc);
                        }
                        p
                    })
                    .collect();
                (key, per)
            })
            .collect();
        ErrorTable { prefix }
    }
}

/// Prefix-sum rows for one candidate, per subtask and skill slot.
struct CandidateRows<'a> {
    rows: Vec<Vec<&'a Vec<Vec<f64>>>>,
}

impl<'a> CandidateRows<'a> {
    fn new(c: &Decomposition, table: &'a ErrorTable, skip_neutral: bool) -> Self {
        let rows = cost_skills(c, skip_neutral)
            .into_iter()
            .enumerate()
            .map(|(k, skills)| {
                let h = c.subtasks[k].high.clone();
                if skills.is_empty() {
                    vec![&table.prefix[&(h, None)]]
                } else {
                    skills
                        .into_iter()
                        .map(|l| &table.prefix[&(h.clone(), Some(l))])
                        .collect()
                }
            })
            .collect();
        CandidateRows { rows }
    }

    /// Cost of a partition over the true length of trajectory `n`.
    fn cost(&self, n: usize, u: &Partition) -> f64 {
        let mut total = 0.0;
        for (k, slots) in self.rows.iter().enumerate() {
            let (a, b) = u.bounds(k);
            let len = b - a;
            let m = slots.len();
            for (j, row) in slots.iter().enumerate() {
                // offsets o with floor(o m / len) == j
                let s = a + (j * len).div_ceil(m);
                let e = a + ((j + 1) * len).div_ceil(m);
                let p = &row[n];
                let e = e.min(p.len() - 1);
                if s < e {
                    total += p[e] - p[s];
                }
            }
        }
        total
    }
}

const SHARED_POOL: u64 = 0x706f_6f6c;

fn rng_for(cfg_seed: u64, shared: bool, i: usize, n: usize, k: usize, len: usize) -> rand_chacha::ChaCha8Rng {
    if shared {
        seed::rng(cfg_seed, &[SHARED_POOL, k as u64, len as u64])
    } else {
        seed::rng(cfg_seed, &[i as u64, n as u64])
    }
}

/// Best partition of one trajectory under a search mode.
fn best_partition(
    rows: &CandidateRows,
    n: usize,
    len: usize,
    k: usize,
    search: Search,
    mut rng: rand_chacha::ChaCha8Rng,
) -> Result<(f64, Partition), OptimizerError> {
    let mut best: Option<(f64, Partition)> = None;
    let mut consider = |u: Partition| {
        let c = rows.cost(n, &u);
        if best.as_ref().is_none_or(|(b, _)| c < *b) {
            best = Some((c, u));
        }
    };
    match search {
        Search::Fixed => consider(fixed_partition(len, k)?),
        Search::Exhaustive => {
            for u in enumerate_partitions(len, k)? {
                consider(u);
            }
        }
        Search::Sampled(n_samples) => {
            for _ in 0..n_samples {
                consider(sample_partition(len, k, &mut rng)?);
            }
        }
    }
    Ok(best.expect("at least one partition considered"))
}

/// Partition-minimized cost of one candidate on each trajectory.
pub fn min_costs(
    c: &Decomposition,
    trajs: &[&Trajectory],
    model: &PolicyModel,
    search: Search,
    seed: u64,
    candidate_index: usize,
    shared_pool: bool,
    skip_neutral: bool,
) -> Result<Vec<(f64, Partition)>, OptimizerError> {
    let table = ErrorTable::build(&[c], trajs, model, skip_neutral);
    let rows = CandidateRows::new(c, &table, skip_neutral);
    trajs
        .iter()
        .enumerate()
        .map(|(n, tr)| {
            let rng = rng_for(seed, shared_pool, candidate_index, n, c.k(), tr.len());
            best_partition(&rows, n, tr.len(), c.k(), search, rng)
        })
        .collect()
}

/// Direct time-ordered recomputation of a chosen partition's cost.
fn exact_cost(c: &Decomposition, u: &Partition, tr: &Trajectory, model: &PolicyModel, skip_neutral: bool) -> f64 {
    cost(c, u, tr, model, skip_neutral).expect("shapes already checked")
}

/// Runs the search over a proposal batch.
pub fn adapt(
    batch: &ProposalBatch,
    target: &Dataset,
    model: &PolicyModel,
    cfg: &AdaptationConfig,
) -> Result<AdaptationResult, OptimizerError> {
    cfg.validate()?;
    let start = Instant::now();
    if target.trajectories.is_empty() {
        return Err(OptimizerError::EmptyTarget);
    }
    if cfg.ablation == Ablation::NoVlm {
        return Ok(AdaptationResult {
            ablation: cfg.ablation,
            chosen_index: None,
            chosen: None,
            partitions: Vec::new(),
            trajectory_costs: Vec::new(),
            total_cost: f64::NAN,
            candidate_costs: Vec::new(),
            schedule: vec![(Some(target.instruction().to_string()), None)],
            wall_clock_secs: start.elapsed().as_secs_f64(),
            config: cfg.clone(),
        });
    }
    if batch.candidates.is_empty() {
        return Err(OptimizerError::EmptyBatch);
    }
    let candidates: Vec<&Decomposition> = if cfg.ablation == Ablation::ZeroShot {
        vec![&batch.candidates[0]]
    } else {
        batch.candidates.iter().collect()
    };
    let trajs: Vec<&Trajectory> = target.trajectories.iter().collect();
    if let Some(tr) = trajs.iter().find(|tr| tr.len() > cfg.horizon) {
        return Err(OptimizerError::ShortPartition {
            partition: cfg.horizon,
            traj: tr.len(),
        });
    }
    for c in &candidates {
        for tr in &trajs {
            if c.k() > tr.len() {
                return Err(OptimizerError::TooManySubtasks { k: c.k(), h: tr.len() });
            }
        }
    }
    let search = cfg.search();
    let table = ErrorTable::build(&candidates, &trajs, model, cfg.skip_neutral);
    let jobs: Vec<(usize, usize)> = (0..candidates.len())
        .flat_map(|i| (0..trajs.len()).map(move |n| (i, n)))
        .collect();
    let results: Vec<Result<(f64, Partition), OptimizerError>> = jobs
        .par_iter()
        .map(|&(i, n)| {
            let c = candidates[i];
            let rows = CandidateRows::new(c, &table, cfg.skip_neutral);
            let len = trajs[n].len();
            let rng = rng_for(cfg.seed, cfg.shared_partition_pool, i, n, c.k(), len);
            best_partition(&rows, n, len, c.k(), search, rng)
        })
        .collect();
    let mut per: Vec<Vec<(f64, Partition)>> = vec![Vec::with_capacity(trajs.len()); candidates.len()];
    for ((i, _), r) in jobs.iter().zip(results) {
        per[*i].push(r?);
    }
    let candidate_costs: Vec<f64> = per.iter().map(|v| v.iter().map(|(c, _)| c).sum()).collect();
    let mut best = 0;
    for i in 1..candidate_costs.len() {
        if candidate_costs[i] < candidate_costs[best] {
            best = i;
        }
    }
    let chosen = candidates[best].clone();
    let partitions: Vec<Partition> = per[best].iter().map(|(_, u)| u.clone()).collect();
    let trajectory_costs: Vec<f64> = partitions
        .iter()
        .zip(&trajs)
        .map(|(u, tr)| exact_cost(&chosen, u, tr, model, cfg.skip_neutral))
        .collect();
    let total_cost = trajectory_costs.iter().sum();
    let chosen_index = if cfg.ablation == Ablation::ZeroShot { 0 } else { best };
    Ok(AdaptationResult {
        ablation: cfg.ablation,
        chosen_index: Some(chosen_index),
        schedule: schedule_pairs(&chosen, cfg.skip_neutral),
        chosen: Some(chosen),
        partitions,
        trajectory_costs,
        total_cost,
        candidate_costs,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
    })
}

/// The adapted policy: the chosen schedule in fixed chunks, with the ablation's masking.
pub fn adapted_policy<'a>(result: &AdaptationResult, model: &'a PolicyModel) -> ScheduledPolicy<'a> {
    ScheduledPolicy::new(model, &result.schedule, INFERENCE_CHUNK, result.ablation.masking())
}
