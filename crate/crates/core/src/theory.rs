//! Numeric checks of the regret bound's ingredients: the partition-overlap tail, the
//! exponential trade-off, regret itself, empirical regret, and the term table.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};
use thiserror::Error;

use crate::model::{ActionVec, Dataset, Decomposition, Partition, ACTION_DIM};
use crate::optimizer::{min_costs, sample_partition, OptimizerError, Search};
use crate::policy::PolicyModel;
use crate::seed;
use crate::sim::{feasible_episode, Actor, ExpertEpisode, SimError, TaskSpec, WorldConfig};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("partitions differ in shape: H {h1} vs {h2}, K {k1} vs {k2}")]
    Shape { h1: usize, h2: usize, k1: usize, k2: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Confidence level of every binomial interval in the reports.
pub const CONFIDENCE: f64 = 0.99;

/// Timesteps that carry the same subtask index under both partitions.
pub fn overlap_statistic(u: &Partition, u2: &Partition) -> Result<usize, TheoryError> {
    if u.horizon() != u2.horizon() || u.k() != u2.k() {
        return Err(TheoryError::Shape {
            h1: u.horizon(),
            h2: u2.horizon(),
            k1: u.k(),
            k2: u2.k(),
        });
    }
    Ok((0..u.k())
        .map(|k| {
            let (a, b) = u.bounds(k);
            let (c, d) = u2.bounds(k);
            b.min(d).saturating_sub(a.max(c))
        })
        .sum())
}

/// Exact two-sided binomial interval for `k` successes out of `n`.
pub fn clopper_pearson(k: u64, n: u64, confidence: f64) -> (f64, f64) {
    let alpha = 1.0 - confidence;
    let lo = if k == 0 {
        0.0
    } else {
        Beta::new(k as f64, (n - k + 1) as f64)
            .expect("positive shape")
            .inverse_cdf(alpha / 2.0)
    };
    let hi = if k == n {
        1.0
    } else {
        Beta::new((k + 1) as f64, (n - k) as f64)
            .expect("positive shape")
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    (lo, hi)
}

/// Which random partitions the overlap check draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionFamily {
    /// Contiguous segments, the partitions the optimizer searches over.
    Contiguous,
    /// Every timestep labeled independently, conditioned on all K labels appearing.
    Labeling,
}

fn sample_labels<R: Rng + ?Sized>(h: usize, k: usize, rng: &mut R) -> Vec<u8> {
    loop {
        let labels: Vec<u8> = (0..h).map(|_| rng.random_range(0..k) as u8).collect();
        let mut seen = vec![false; k];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if seen.iter().all(|&s| s) {
            return labels;
        }
    }
}

fn labeling_overlap(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x == y).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub family: PartitionFamily,
    pub h: usize,
    pub k: usize,
    pub eps: f64,
    pub samples: u64,
    pub hits: u64,
    pub tail: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub bound: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpRow {
    pub h: usize,
    pub k: usize,
    pub n: u64,
    pub ansatz_eps: f64,
    pub ansatz_in_range: bool,
    /// f at the ansatz, NaN when the ansatz falls outside [0, 1/K].
    pub f_ansatz: f64,
    pub grid_eps: f64,
    pub f_grid_min: f64,
    /// 1/K + N^(-2/K)
    pub target: f64,
    /// 1/K + N^(-2/(NK)), what substituting the ansatz actually yields
    pub target_plugin: f64,
    pub grid_meets_target: bool,
    pub ansatz_meets_target: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub overlap: Vec<OverlapRow>,
    pub exp: Vec<ExpRow>,
    pub violations: Vec<String>,
}

impl BoundReport {
    pub fn merge(mut self, other: BoundReport) -> BoundReport {
        self.overlap.extend(other.overlap);
        self.exp.extend(other.exp);
        self.violations.extend(other.violations);
        self
    }
}

pub fn overlap_bound(h: usize, k: usize, eps: f64) -> f64 {
    (-2.0 * h as f64 * (1.0 / k as f64 - eps).powi(2)).exp()
}

/// Default epsilon grid for a given K: 0, 0.25/K, 0.5/K, 0.75/K.
pub fn default_eps(k: usize) -> Vec<f64> {
    [0.0, 0.25, 0.5, 0.75].iter().map(|f| f / k as f64).collect()
}

/// Monte-Carlo tail of the overlap statistic against the analytic bound.
///
/// `eps_fracs` are multiples of 1/K. One set of `samples` pairs per (H, K) serves every
/// epsilon. A point is a violation only when the interval's lower end exceeds the bound.
pub fn check_overlap_bound(
    hs: &[usize],
    ks: &[usize],
    eps_fracs: &[f64],
    samples: u64,
    seed: u64,
    family: PartitionFamily,
) -> Result<BoundReport, TheoryError> {
    if samples < 10_000 {
        return Err(TheoryError::Invalid("at least 1e4 samples per point".into()));
    }
    if let Some(f) = eps_fracs.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(TheoryError::Invalid(format!("epsilon fraction {f} outside [0, 1]")));
    }
    let mut cells = Vec::new();
    for &h in hs {
        for &k in ks {
            if k == 0 || k > h {
                return Err(TheoryError::Invalid(format!("K={k} with H={h}")));
            }
            cells.push((h, k));
        }
    }
    let rows: Vec<Vec<OverlapRow>> = cells
        .par_iter()
        .map(|&(h, k)| {
            let fam_tag = family as u64;
            let mut rng = seed::rng(seed, &[fam_tag, h as u64, k as u64]);
            let mut overlaps = Vec::with_capacity(samples as usize);
            for _ in 0..samples {
                let o = match family {
                    PartitionFamily::Contiguous => {
                        let u = sample_partition(h, k, &mut rng).expect("K <= H");
                        let v = sample_partition(h, k, &mut rng).expect("K <= H");
                        overlap_statistic(&u, &v).expect("same shape")
                    }
                    PartitionFamily::Labeling => {
                        let a = sample_labels(h, k, &mut rng);
                        let b = sample_labels(h, k, &mut rng);
                        labeling_overlap(&a, &b)
                    }
                };
                overlaps.push(o);
            }
            eps_fracs
                .iter()
                .map(|f| {
                    let eps = f / k as f64;
                    let threshold = h as f64 * eps;
                    let hits = overlaps.iter().filter(|&&o| o as f64 <= threshold + 1e-12).count() as u64;
                    let (ci_lo, ci_hi) = clopper_pearson(hits, samples, CONFIDENCE);
                    let bound = overlap_bound(h, k, eps);
                    OverlapRow {
                        family,
                        h,
                        k,
                        eps,
                        samples,
                        hits,
                        tail: hits as f64 / samples as f64,
                        ci_lo,
                        ci_hi,
                        bound,
                        violated: ci_lo > bound,
                    }
                })
                .collect()
        })
        .collect();
    let overlap: Vec<OverlapRow> = rows.into_iter().flatten().collect();
    let violations = overlap
        .iter()
        .filter(|r| r.violated)
        .map(|r| {
            format!(
                "overlap {:?} H={} K={} eps={:.4}: ci_lo {:.4e} > bound {:.4e}",
                r.family, r.h, r.k, r.eps, r.ci_lo, r.bound
            )
        })
        .collect();
    Ok(BoundReport {
        overlap,
        exp: Vec::new(),
        violations,
    })
}

pub fn exp_objective(h: usize, k: usize, eps: f64) -> f64 {
    eps + overlap_bound(h, k, eps)
}

pub const EXP_GRID_POINTS: usize = 10_000;

/// Evaluates `eps + exp(-2H(1/K - eps)^2)` at the ansatz and on a grid over [0, 1/K].
pub fn check_exp_bound(hs: &[usize], ks: &[usize], ns: &[u64]) -> Result<BoundReport, TheoryError> {
    if hs.is_empty() || ks.is_empty() || ns.is_empty() {
        return Err(TheoryError::Invalid("empty grid".into()));
    }
    if ns.iter().any(|&n| n < 2) {
        return Err(TheoryError::Invalid("N must be at least 2".into()));
    }
    let mut report = BoundReport::default();
    for &h in hs {
        for &k in ks {
            if k == 0 {
                return Err(TheoryError::Invalid("K must be at least 1".into()));
            }
            let inv_k = 1.0 / k as f64;
            let (mut grid_eps, mut f_grid_min) = (0.0, f64::INFINITY);
            for i in 0..=EXP_GRID_POINTS {
                let eps = inv_k * i as f64 / EXP_GRID_POINTS as f64;
                let f = exp_objective(h, k, eps);
                if f < f_grid_min {
                    f_grid_min = f;
                    grid_eps = eps;
                }
            }
            for &n in ns {
                let nf = n as f64;
                let ansatz_eps = inv_k - (nf.ln() / (nf * h as f64 * k as f64)).sqrt();
                let ansatz_in_range = (0.0..=inv_k).contains(&ansatz_eps);
                let f_ansatz = if ansatz_in_range {
                    exp_objective(h, k, ansatz_eps)
                } else {
                    f64::NAN
                };
                let target = inv_k + nf.powf(-2.0 / k as f64);
                let target_plugin = inv_k + nf.powf(-2.0 / (nf * k as f64));
                let row = ExpRow {
                    h,
                    k,
                    n,
                    ansatz_eps,
                    ansatz_in_range,
                    f_ansatz,
                    grid_eps,
                    f_grid_min,
                    target,
                    target_plugin,
                    grid_meets_target: f_grid_min <= target,
                    ansatz_meets_target: ansatz_in_range && f_ansatz <= target,
                };
                if !ansatz_in_range {
                    report
                        .violations
                        .push(format!("exp H={h} K={k} N={n}: ansatz eps {ansatz_eps:.4} outside [0, 1/K]"));
                }
                report.exp.push(row);
            }
        }
    }
    Ok(report)
}

/// Normalized squared deviation of one trajectory: (1/(T sqrt(7))) sum ||a - b||^2.
pub fn trajectory_regret(policy: &[ActionVec], reference: &[ActionVec]) -> f64 {
    assert_eq!(policy.len(), reference.len());
    if policy.is_empty() {
        return 0.0;
    }
    let s: f64 = policy.iter().zip(reference).map(|(a, b)| a.squared_distance(b)).sum();
    s / (policy.len() as f64 * (ACTION_DIM as f64).sqrt())
}

/// Regret of `policy` along recorded expert episodes, averaged over episodes.
pub fn regret_on(policy: &mut dyn Actor, episodes: &[ExpertEpisode]) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    let total: f64 = episodes
        .iter()
        .map(|ep| {
            let acts: Vec<ActionVec> = ep
                .trajectory
                .steps
                .iter()
                .enumerate()
                .map(|(t, s)| policy.act(&s.state, t))
                .collect();
            trajectory_regret(&acts, &ep.mode_actions)
        })
        .sum();
    total / episodes.len() as f64
}

/// Fresh expert rollouts used as the reference distribution.
pub fn reference_episodes(
    task: &TaskSpec,
    cfg: &WorldConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<ExpertEpisode>, TheoryError> {
    if episodes == 0 {
        return Err(TheoryError::Invalid("episodes must be at least 1".into()));
    }
    (0..episodes as u64)
        .into_par_iter()
        .map(|i| feasible_episode(task, cfg, seed, i).map_err(TheoryError::from))
        .collect()
}

/// Monte-Carlo regret against the scripted expert's noise-free actions.
pub fn regret(
    policy: &mut dyn Actor,
    task: &TaskSpec,
    cfg: &WorldConfig,
    episodes: usize,
    seed: u64,
) -> Result<f64, TheoryError> {
    let eps = reference_episodes(task, cfg, episodes, seed)?;
    Ok(regret_on(policy, &eps))
}

/// Sum over demos of the partition-minimized cost, each normalized by `T_n sqrt(7)`.
pub fn empirical_regret(
    c: &Decomposition,
    target: &Dataset,
    model: &PolicyModel,
    search: Search,
    seed: u64,
    skip_neutral: bool,
) -> Result<f64, TheoryError> {
    if target.trajectories.is_empty() {
        return Err(TheoryError::Missing("target demonstrations".into()));
    }
    let trajs: Vec<_> = target.trajectories.iter().collect();
    let costs = min_costs(c, &trajs, model, search, seed, 0, false, skip_neutral)?;
    Ok(costs
        .iter()
        .zip(&trajs)
        .map(|((cost, _), tr)| cost / (tr.len() as f64 * (ACTION_DIM as f64).sqrt()))
        .sum())
}

/// Config-only terms: 1/M, (sqrt(M) + sqrt(n log(Mn)))/n, 1/K, N^(-2/K).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingTerms {
    pub inv_m: f64,
    pub generalization: f64,
    pub inv_k: f64,
    pub partition: f64,
}

pub fn sampling_terms(m: usize, n: usize, n_samples: u64, k: usize) -> SamplingTerms {
    let (mf, nf) = (m as f64, n as f64);
    SamplingTerms {
        inv_m: 1.0 / mf,
        generalization: (mf.sqrt() + (nf * (mf * nf).ln()).sqrt()) / nf,
        inv_k: 1.0 / k as f64,
        partition: (n_samples as f64).powf(-2.0 / k as f64),
    }
}

/// Half the L1 distance between two empirical distributions.
pub fn total_variation(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>) -> f64 {
    let zp: f64 = p.values().sum();
    let zq: f64 = q.values().sum();
    let keys: std::collections::BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|key| {
            let a = p.get(key).copied().unwrap_or(0.0) / zp.max(f64::MIN_POSITIVE);
            let b = q.get(key).copied().unwrap_or(0.0) / zq.max(f64::MIN_POSITIVE);
            (a - b).abs()
        })
        .sum::<f64>()
}

/// Per-step marginal of (high, low) instruction pairs in labeled data.
pub fn instruction_marginal(data: &Dataset) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for tr in &data.trajectories {
        for t in 0..tr.len() {
            if let Some((h, l)) = tr.step_labels(t) {
                *m.entry(format!("{h} | {l}")).or_insert(0.0) += 1.0;
            }
        }
    }
    m
}

/// Per-step marginal of the instruction pairs a decomposition assigns along expert episodes.
pub fn schedule_marginal(dec: &Decomposition, episodes: &[ExpertEpisode], task: &TaskSpec) -> BTreeMap<String, f64> {
    let stage_subtask = task.stage_subtask();
    let mut m = BTreeMap::new();
    for ep in episodes {
        let Some(ids) = &ep.trajectory.stage_ids else { continue };
        for &s in ids {
            let k = stage_subtask[s];
            let h = dec.subtasks.get(k).map(|x| x.high.as_str()).unwrap_or("");
            let l = ep.skills.get(s).map(String::as_str).unwrap_or("");
            *m.entry(format!("{h} | {l}")).or_insert(0.0) += 1.0;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremInputs {
    pub task: String,
    pub m: usize,
    pub n_demos: usize,
    pub n_samples: u64,
    pub k: usize,
    /// Measured regret of the adapted policy on the target task.
    pub lhs_regret: f64,
    /// Regret of the pre-trained model on the prior distribution.
    pub prior_regret: f64,
    /// Plug-in TV between target and prior instruction marginals.
    pub tv_proxy: f64,
    /// Fraction of proposal batches that contained the ground truth.
    pub containment_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermRow {
    pub task: String,
    pub lhs_regret: f64,
    pub prior_regret: f64,
    pub tv_proxy: f64,
    pub vlm_proxy: f64,
    pub inv_m: f64,
    pub generalization: f64,
    pub inv_k: f64,
    pub partition: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Term table for one task. The VLM term uses the miss rate of the proposer as its proxy.
pub fn theorem_accounting(inp: &TheoremInputs) -> Result<TermRow, TheoryError> {
    for (name, v) in [
        ("lhs_regret", inp.lhs_regret),
        ("prior_regret", inp.prior_regret),
        ("tv_proxy", inp.tv_proxy),
        ("containment_rate", inp.containment_rate),
    ] {
        if !v.is_finite() {
            return Err(TheoryError::Missing(format!("{name} for task {}", inp.task)));
        }
    }
    if inp.m == 0 || inp.n_demos == 0 || inp.k == 0 || inp.n_samples == 0 {
        return Err(TheoryError::Missing(format!("run configuration for task {}", inp.task)));
    }
    let s = sampling_terms(inp.m, inp.n_demos, inp.n_samples, inp.k);
    let vlm_proxy = 1.0 - inp.containment_rate.clamp(0.0, 1.0);
    let rhs = inp.prior_regret + inp.tv_proxy + vlm_proxy + s.inv_m + s.generalization + s.inv_k + s.partition;
    Ok(TermRow {
        task: inp.task.clone(),
        lhs_regret: inp.lhs_regret,
        prior_regret: inp.prior_regret,
        tv_proxy: inp.tv_proxy,
        vlm_proxy,
        inv_m: s.inv_m,
        generalization: s.generalization,
        inv_k: s.inv_k,
        partition: s.partition,
        rhs,
        holds: inp.lhs_regret <= rhs,
    })
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], w: W) -> Result<(), TheoryError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_csv_file<T: Serialize>(rows: &[T], path: &Path) -> Result<(), TheoryError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_csv(rows, std::fs::File::create(path)?)
}
