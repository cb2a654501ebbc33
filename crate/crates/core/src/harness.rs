//! Experiment orchestration: the cached prior pipeline, per-cell evaluation, the benchmark
//! matrix, and the demo-count scaling sweep.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augmenter::{augment_dataset, HeuristicConfig, Identity, MockKeywords};
use crate::model::{DataError, Dataset, Role, ACTION_DIM};
use crate::optimizer::{adapt, adapted_policy, Ablation, AdaptationConfig, AdaptationResult, OptimizerError};
use crate::policy::{finetune_baseline, train_masked_bc, NnBaseline, PolicyError, PolicyModel, ScheduledPolicy, TrainConfig};
use crate::proposer::mock::{propose_mock, MockConfig, MockError};
use crate::proposer::ProposalBatch;
use crate::seed;
use crate::sim::{find_task, generate_dataset, prior_tasks, rollout, Actor, SimError, TaskSpec, WorldConfig};
use crate::theory::{
    instruction_marginal, reference_episodes, regret, regret_on, schedule_marginal, theorem_accounting, total_variation,
    TermRow, TheoremInputs, TheoryError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Mock(#[from] MockError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Short hex digest of a value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub world: WorldConfig,
    pub prior_per_task: usize,
    pub heuristic: HeuristicConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            world: WorldConfig::default(),
            prior_per_task: 40,
            heuristic: HeuristicConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

/// Prior demos with heuristic labels from the mock keyword backend.
pub fn prior_dataset(cfg: &PipelineConfig) -> Result<Dataset, HarnessError> {
    let raw = generate_dataset(&prior_tasks(), cfg.prior_per_task, &cfg.world, cfg.seed, Role::Prior)?;
    Ok(augment_dataset(&raw, &cfg.heuristic, &MockKeywords::default(), &Identity, false))
}

/// Trains the prior model, or loads it from `cache_dir` when an identical config was trained before.
pub fn prior_model(cfg: &PipelineConfig, cache_dir: Option<&Path>) -> Result<PolicyModel, HarnessError> {
    let path = cache_dir.map(|d| d.join(format!("prior-{}.json", config_hash(cfg))));
    if let Some(p) = &path {
        if p.exists() {
            match PolicyModel::load(p) {
                Ok(m) => return Ok(m),
                Err(e) => log::warn!("ignoring unreadable cached model {}: {e}", p.display()),
            }
        }
    }
    let data = prior_dataset(cfg)?;
    let model = train_masked_bc(&data, &cfg.train)?;
    if let Some(p) = &path {
        if let Some(d) = p.parent() {
            std::fs::create_dir_all(d)?;
        }
        model.save(p)?;
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Palo,
    Finetune,
    NearestNeighbor,
    /// Pre-trained model conditioned on the raw target instruction.
    ZeroShotInstruction,
    Ablation(Ablation),
}

impl Method {
    pub fn name(self) -> String {
        match self {
            Method::Palo => "palo".into(),
            Method::Finetune => "ft".into(),
            Method::NearestNeighbor => "nn".into(),
            Method::ZeroShotInstruction => "zero_shot_l".into(),
            Method::Ablation(a) => a.name().into(),
        }
    }

    pub fn ablation(self) -> Option<Ablation> {
        match self {
            Method::Palo => Some(Ablation::Full),
            Method::Ablation(a) => Some(a),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "palo" | "full" => Ok(Method::Palo),
            "ft" => Ok(Method::Finetune),
            "nn" => Ok(Method::NearestNeighbor),
            "zero_shot_l" => Ok(Method::ZeroShotInstruction),
            other => Ablation::from_name(other)
                .map(Method::Ablation)
                .ok_or_else(|| format!("unknown method '{other}'")),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub tasks: Vec<String>,
    pub n_demos: usize,
    pub methods: Vec<Method>,
    pub episodes: usize,
    /// Reference rollouts per cell for the regret column; 0 skips it.
    pub regret_episodes: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub m: usize,
    pub n_samples: usize,
    pub mock: MockConfig,
    pub prior: PipelineConfig,
    pub finetune: TrainConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "bench".into(),
            tasks: crate::sim::target_tasks().into_iter().map(|t| t.name).collect(),
            n_demos: 5,
            methods: vec![Method::Palo, Method::Finetune, Method::NearestNeighbor, Method::ZeroShotInstruction],
            episodes: 10,
            regret_episodes: 2,
            seeds: (0..10).collect(),
            output_dir: PathBuf::from("runs/bench"),
            m: 15,
            n_samples: 20_000,
            mock: MockConfig::default(),
            prior: PipelineConfig::default(),
            finetune: TrainConfig {
                steps: 500,
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Spec("seeds must be nonempty".into()));
        }
        if self.episodes == 0 {
            return Err(HarnessError::Spec("episodes must be at least 1".into()));
        }
        if self.n_demos == 0 {
            return Err(HarnessError::Spec("n_demos must be at least 1".into()));
        }
        if self.tasks.is_empty() || self.methods.is_empty() {
            return Err(HarnessError::Spec("tasks and methods must be nonempty".into()));
        }
        for t in &self.tasks {
            find_task(t)?;
        }
        self.prior.world.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let spec: ExperimentSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Optimizer settings for the cell with root seed `seed`.
    pub fn adaptation(&self, ablation: Ablation, horizon: usize, seed: u64) -> AdaptationConfig {
        AdaptationConfig {
            m: self.m,
            n_samples: self.n_samples,
            horizon,
            ablation,
            seed: seed::derive(seed, &[TAG_ADAPT]),
            ..AdaptationConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    pub method: String,
    pub n_demos: usize,
    pub seed: u64,
    pub success_rate: f64,
    /// NaN when regret was not measured.
    #[serde(deserialize_with = "nan_if_null")]
    pub mean_regret: f64,
    pub adapt_secs: f64,
    /// Whether the adapted decomposition equals the task's ground truth, for search-based methods.
    pub chose_truth: Option<bool>,
    pub config_hash: String,
}

/// JSON has no NaN; `serde_json` writes it as null.
fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

const TAG_DEMOS: u64 = 0x6465_6d6f;
const TAG_PROPOSE: u64 = 0x7072_6f70;
const TAG_ADAPT: u64 = 0x6164_6170;
const TAG_EVAL: u64 = 0x6576_616c;
const TAG_REGRET: u64 = 0x7265_6772;
const TAG_FT: u64 = 0x6674;

/// Target demos for one cell. Cells with the same task and seed share demos across methods.
pub fn target_demos(task: &TaskSpec, n: usize, world: &WorldConfig, seed: u64) -> Result<Dataset, HarnessError> {
    Ok(generate_dataset(
        std::slice::from_ref(task),
        n,
        world,
        seed::derive(seed, &[TAG_DEMOS]),
        Role::Target,
    )?)
}

/// Proposal batch for a cell; the zero-shot decomposition ablation uses one unplanted candidate.
pub fn proposals(task: &TaskSpec, m: usize, mock: &MockConfig, ablation: Ablation, seed: u64) -> Result<ProposalBatch, HarnessError> {
    let s = seed::derive(seed, &[TAG_PROPOSE]);
    Ok(if ablation == Ablation::ZeroShot {
        let unplanted = MockConfig {
            plant_truth: false,
            ..mock.clone()
        };
        propose_mock(task, 1, &unplanted, s)?
    } else {
        propose_mock(task, m, mock, s)?
    })
}

/// Runs proposer and optimizer for a search-based method.
pub fn adapt_cell(
    spec: &ExperimentSpec,
    model: &PolicyModel,
    task: &TaskSpec,
    demos: &Dataset,
    ablation: Ablation,
    seed: u64,
) -> Result<AdaptationResult, HarnessError> {
    let batch = proposals(task, spec.m, &spec.mock, ablation, seed)?;
    let cfg = spec.adaptation(ablation, task.horizon, seed);
    Ok(adapt(&batch, demos, model, &cfg)?)
}

/// Initial-state seed of evaluation episode `e` in the cell with root seed `seed`.
pub fn episode_seed(seed: u64, e: u64) -> u64 {
    seed::derive(seed, &[TAG_EVAL, e])
}

/// Success rate over `episodes` rollouts with randomized initial placements.
pub fn success_rate(actor: &mut dyn Actor, task: &TaskSpec, world: &WorldConfig, episodes: usize, seed: u64) -> Result<f64, HarnessError> {
    let mut wins = 0;
    for e in 0..episodes as u64 {
        let (_, ok) = rollout(actor, task, world, task.horizon, episode_seed(seed, e))?;
        wins += ok as usize;
    }
    Ok(wins as f64 / episodes as f64)
}

fn evaluate(
    actor: &mut dyn Actor,
    spec: &ExperimentSpec,
    task: &TaskSpec,
    seed: u64,
) -> Result<(f64, f64), HarnessError> {
    let world = &spec.prior.world;
    let sr = success_rate(actor, task, world, spec.episodes, seed)?;
    let reg = if spec.regret_episodes > 0 {
        regret(actor, task, world, spec.regret_episodes, seed::derive(seed, &[TAG_REGRET]))?
    } else {
        f64::NAN
    };
    Ok((sr, reg))
}

/// One (task, method, seed) cell.
pub fn run_cell(
    spec: &ExperimentSpec,
    model: &PolicyModel,
    task: &TaskSpec,
    method: Method,
    n_demos: usize,
    seed: u64,
) -> Result<ResultRow, HarnessError> {
    let world = &spec.prior.world;
    let demos = target_demos(task, n_demos, world, seed)?;
    let start = Instant::now();
    let (success_rate, mean_regret, chose_truth) = match method {
        Method::Palo | Method::Ablation(_) => {
            let ablation = method.ablation().expect("search method");
            let result = adapt_cell(spec, model, task, &demos, ablation, seed)?;
            let truth = task.ground_truth();
            let chose = result.chosen.as_ref().map(|c| Some(c) == truth.as_ref());
            let mut policy = adapted_policy(&result, model);
            let (sr, reg) = evaluate(&mut policy, spec, task, seed)?;
            (sr, reg, chose)
        }
        Method::ZeroShotInstruction => {
            let mut policy = ScheduledPolicy::constant(model, Some(&task.instruction), None);
            let (sr, reg) = evaluate(&mut policy, spec, task, seed)?;
            (sr, reg, None)
        }
        Method::Finetune => {
            let cfg = TrainConfig {
                seed: seed::derive(seed, &[TAG_FT]),
                ..spec.finetune.clone()
            };
            let tuned = finetune_baseline(model, &demos, &cfg)?;
            let mut policy = ScheduledPolicy::constant(&tuned, Some(&task.instruction), None);
            let (sr, reg) = evaluate(&mut policy, spec, task, seed)?;
            (sr, reg, None)
        }
        Method::NearestNeighbor => {
            let mut policy = NnBaseline::new(&demos)?;
            let (sr, reg) = evaluate(&mut policy, spec, task, seed)?;
            (sr, reg, None)
        }
    };
    Ok(ResultRow {
        task: task.name.clone(),
        method: method.name(),
        n_demos,
        seed,
        success_rate,
        mean_regret,
        adapt_secs: start.elapsed().as_secs_f64(),
        chose_truth,
        config_hash: config_hash(&(spec_fingerprint(spec), &task.name, method, n_demos, seed)),
    })
}

/// Per-step fit of the pre-trained model on its own labeled prior data, normalized like regret.
pub fn prior_regret(model: &PolicyModel, prior: &Dataset) -> Result<f64, HarnessError> {
    if prior.trajectories.is_empty() {
        return Err(HarnessError::Spec("empty prior dataset".into()));
    }
    let norm = (ACTION_DIM as f64).sqrt();
    let per: Vec<f64> = prior
        .trajectories
        .par_iter()
        .map(|tr| {
            let mut sum = 0.0;
            for (t, st) in tr.steps.iter().enumerate() {
                let (h, l) = tr.step_labels(t).ok_or(DataError::Decomposition("unlabeled prior step".into()))?;
                sum += model.predict(&st.state, Some(h), Some(l)).squared_distance(&st.action());
            }
            Ok(sum / (tr.len().max(1) as f64 * norm))
        })
        .collect::<Result<_, HarnessError>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Measured and computed terms of the regret bound for one task, averaged over the experiment's seeds.
pub fn theorem_row(
    spec: &ExperimentSpec,
    model: &PolicyModel,
    prior: &Dataset,
    task: &TaskSpec,
) -> Result<TermRow, HarnessError> {
    let world = &spec.prior.world;
    let truth = task.ground_truth();
    let episodes = spec.regret_episodes.max(1);
    let mut lhs = 0.0;
    let mut contained = 0usize;
    let mut tv = 0.0;
    for &seed in &spec.seeds {
        let demos = target_demos(task, spec.n_demos, world, seed)?;
        let batch = proposals(task, spec.m, &spec.mock, Ablation::Full, seed)?;
        contained += truth.as_ref().is_some_and(|g| batch.contains(g)) as usize;
        let cfg = spec.adaptation(Ablation::Full, task.horizon, seed);
        let result = adapt(&batch, &demos, model, &cfg)?;
        let refs = reference_episodes(task, world, episodes, seed::derive(seed, &[TAG_REGRET]))?;
        let mut policy = adapted_policy(&result, model);
        lhs += regret_on(&mut policy, &refs);
        let chosen = result.chosen.as_ref().ok_or(HarnessError::Spec("full adaptation chose nothing".into()))?;
        tv += total_variation(&instruction_marginal(prior), &schedule_marginal(chosen, &refs, task));
    }
    let runs = spec.seeds.len() as f64;
    let k = truth.as_ref().map(|g| g.k()).unwrap_or(task.subtasks.len());
    Ok(theorem_accounting(&TheoremInputs {
        task: task.name.clone(),
        m: spec.m,
        n_demos: spec.n_demos,
        n_samples: spec.n_samples as u64,
        k,
        lhs_regret: lhs / runs,
        prior_regret: prior_regret(model, prior)?,
        tv_proxy: tv / runs,
        containment_rate: contained as f64 / runs,
    })?)
}

/// Everything in a spec that changes results; excludes names and paths.
fn spec_fingerprint(spec: &ExperimentSpec) -> serde_json::Value {
    serde_json::json!({
        "episodes": spec.episodes,
        "regret_episodes": spec.regret_episodes,
        "m": spec.m,
        "n_samples": spec.n_samples,
        "mock": spec.mock,
        "prior": spec.prior,
        "finetune": spec.finetune,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell<'a> {
    pub task: &'a str,
    pub method: Method,
    pub n_demos: usize,
    pub seed: u64,
}

impl Cell<'_> {
    fn marker(&self, dir: &Path) -> PathBuf {
        dir.join("cells")
            .join(format!("{}__{}__n{}__s{}.json", self.task, self.method, self.n_demos, self.seed))
    }
}

/// Outcome of a matrix run: rows in cell order and the cells that errored.
#[derive(Debug, Default)]
pub struct BenchOutcome {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<(String, String)>,
    pub reused: usize,
}

/// Runs `cells`, reusing completion markers under `spec.output_dir` when `resume` is set.
pub fn run_cells(
    spec: &ExperimentSpec,
    model: &PolicyModel,
    cells: &[Cell],
    resume: bool,
) -> Result<BenchOutcome, HarnessError> {
    let tasks: BTreeMap<&str, TaskSpec> = cells
        .iter()
        .map(|c| Ok((c.task, find_task(c.task)?)))
        .collect::<Result<_, HarnessError>>()?;
    let dir = &spec.output_dir;
    if resume {
        std::fs::create_dir_all(dir.join("cells"))?;
    }
    let results: Vec<(Result<ResultRow, String>, bool)> = cells
        .par_iter()
        .map(|c| {
            let marker = c.marker(dir);
            if resume {
                if let Ok(text) = std::fs::read_to_string(&marker) {
                    if let Ok(row) = serde_json::from_str::<ResultRow>(&text) {
                        return (Ok(row), true);
                    }
                }
            }
            let row = run_cell(spec, model, &tasks[c.task], c.method, c.n_demos, c.seed);
            match row {
                Ok(row) => {
                    if resume {
                        let tmp = marker.with_extension("tmp");
                        let written = serde_json::to_string(&row)
                            .map_err(std::io::Error::other)
                            .and_then(|s| std::fs::write(&tmp, s))
                            .and_then(|_| std::fs::rename(&tmp, &marker));
                        if let Err(e) = written {
                            log::warn!("could not write marker {}: {e}", marker.display());
                        }
                    }
                    (Ok(row), false)
                }
                Err(e) => (Err(e.to_string()), false),
            }
        })
        .collect();
    let mut out = BenchOutcome::default();
    for (c, (r, reused)) in cells.iter().zip(results) {
        out.reused += reused as usize;
        match r {
            Ok(row) => out.rows.push(row),
            Err(e) => {
                log::error!("cell {}/{}/seed {} failed: {e}", c.task, c.method, c.seed);
                out.failures.push((format!("{}/{}/n{}/s{}", c.task, c.method, c.n_demos, c.seed), e));
            }
        }
    }
    Ok(out)
}

/// Full task x method x seed matrix.
pub fn bench_cells(spec: &ExperimentSpec) -> Vec<Cell<'_>> {
    let mut cells = Vec::new();
    for task in &spec.tasks {
        for &method in &spec.methods {
            for &seed in &spec.seeds {
                cells.push(Cell {
                    task,
                    method,
                    n_demos: spec.n_demos,
                    seed,
                });
            }
        }
    }
    cells
}

/// PALO once at `spec.n_demos`, fine-tuning at every count.
pub fn scaling_cells<'a>(spec: &'a ExperimentSpec, counts: &[usize]) -> Vec<Cell<'a>> {
    let mut cells = Vec::new();
    for task in &spec.tasks {
        for &seed in &spec.seeds {
            cells.push(Cell {
                task,
                method: Method::Palo,
                n_demos: spec.n_demos,
                seed,
            });
            for &n in counts {
                cells.push(Cell {
                    task,
                    method: Method::Finetune,
                    n_demos: n,
                    seed,
                });
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n_demos: usize,
    pub palo_success: f64,
    pub ft_success: f64,
}

/// Success vs demo count with PALO's 5-demo value as a constant reference.
pub fn scaling_table(rows: &[ResultRow], counts: &[usize], palo_demos: usize) -> Vec<ScalingRow> {
    let palo = mean_success(rows, "palo", Some(palo_demos));
    counts
        .iter()
        .map(|&n| ScalingRow {
            n_demos: n,
            palo_success: palo,
            ft_success: mean_success(rows, "ft", Some(n)),
        })
        .collect()
}

/// Smallest count where fine-tuning reaches PALO's success, if any.
pub fn crossover(table: &[ScalingRow]) -> Option<usize> {
    table.iter().find(|r| r.ft_success >= r.palo_success).map(|r| r.n_demos)
}

pub fn mean_success(rows: &[ResultRow], method: &str, n_demos: Option<usize>) -> f64 {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method && n_demos.is_none_or(|n| r.n_demos == n))
        .map(|r| r.success_rate)
        .collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean success per (task, method).
pub fn success_by_task(rows: &[ResultRow]) -> BTreeMap<(String, String), f64> {
    let mut acc: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.task.clone(), r.method.clone())).or_default();
        e.0 += r.success_rate;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

pub fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<(), HarnessError> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
