use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use palo::augmenter::{augment_dataset, HeuristicConfig, Identity, KeywordExtractor, MockKeywords, NoKeywords, RemoteKeywords};
use palo::harness::{
    bench_cells, crossover, episode_seed, prior_dataset, prior_model, proposals, run_cells, scaling_cells, scaling_table,
    target_demos, theorem_row, write_rows, BenchOutcome, ExperimentSpec, HarnessError, ResultRow,
};
use palo::model::{load_dataset, save_dataset, Dataset, Role};
use palo::optimizer::{adapt, adapted_policy, Ablation, AdaptationResult};
use palo::policy::{finetune_baseline, train_masked_bc, PolicyModel, ScheduledPolicy, TrainConfig};
use palo::proposer::mock::MockConfig;
use palo::proposer::remote::{
    propose_remote_logged, transcript_path, write_transcripts, HttpTransport, RateLimiter, RemoteConfig, RemoteError,
    ReplayTransport, Transport,
};
use palo::proposer::ProposalBatch;
use palo::sim::{find_task, generate_dataset, prior_tasks, rollout, Family, SimError, TaskSpec, WorldConfig};
use palo::theory::{check_exp_bound, check_overlap_bound, write_csv_file, PartitionFamily};

#[derive(Parser)]
#[command(name = "palo", version, about = "Few-shot policy adaptation by language decomposition and time partition search")]
struct Cli {
    /// More log output; repeat for debug level.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted expert demonstrations.
    GenDemos(GenDemosArgs),
    /// Fill in per-chunk instruction labels.
    Augment(AugmentArgs),
    /// Train a policy checkpoint with masked behavioral cloning, or fine-tune one.
    Train(TrainArgs),
    /// Propose decompositions and search decomposition and partitions against target demos.
    Adapt(AdaptArgs),
    /// Roll out a policy and report success.
    Rollout(RolloutArgs),
    /// Run a task x method x seed matrix from an experiment file.
    Bench(BenchArgs),
    /// Fine-tuning success against PALO at a fixed demo count.
    Scaling(ScalingArgs),
    /// Monte-Carlo and arithmetic checks of the regret bound lemmas.
    Theory(TheoryArgs),
}

#[derive(Args)]
struct GenDemosArgs {
    /// Task names or TOML task files, comma separated; `prior` expands to every prior task.
    #[arg(long, required = true, value_delimiter = ',')]
    task: Vec<String>,
    /// Demonstrations per task.
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to `<task>_n<n>_s<seed>.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// World config TOML.
    #[arg(long)]
    world: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KeywordBackend {
    Mock,
    None,
    Remote,
}

#[derive(Args)]
struct RemoteArgs {
    /// Remote client config TOML.
    #[arg(long)]
    remote_config: Option<PathBuf>,
    /// Serve remote requests from a recorded transcript instead of the network.
    #[arg(long)]
    replay: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "mock")]
    backend: KeywordBackend,
    /// Relabel trajectories that already carry labels.
    #[arg(long)]
    overwrite: bool,
    /// Heuristic config TOML.
    #[arg(long)]
    heuristic: Option<PathBuf>,
    #[command(flatten)]
    remote: RemoteArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fine-tune this checkpoint on raw-instruction targets instead of training from scratch.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Training config TOML; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProposerBackend {
    Mock,
    Remote,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    demos: PathBuf,
    /// Task name or TOML task file.
    #[arg(long)]
    task: String,
    #[arg(long, value_enum, default_value = "mock")]
    backend: ProposerBackend,
    /// Candidate decompositions.
    #[arg(long, default_value_t = 15)]
    m: usize,
    /// Sampled partitions per candidate and demo.
    #[arg(long, default_value_t = 20_000)]
    n_samples: usize,
    #[arg(long, default_value = "full", value_parser = parse_ablation)]
    ablation: Ablation,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Enumerate every partition instead of sampling.
    #[arg(long)]
    exhaustive: bool,
    /// Share one pool of partitions across candidates.
    #[arg(long)]
    shared_pool: bool,
    /// Mock proposer without a guaranteed ground-truth candidate.
    #[arg(long)]
    no_plant: bool,
    /// Report path.
    #[arg(long, default_value = "adaptation.json")]
    out: PathBuf,
    /// Transcript directory for the remote backend; defaults to the report's directory.
    #[arg(long)]
    transcripts: Option<PathBuf>,
    /// Write 0 for the wall-clock field so reports are byte-stable.
    #[arg(long)]
    zero_timings: bool,
    #[command(flatten)]
    remote: RemoteArgs,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    model: PathBuf,
    /// Task name or TOML task file.
    #[arg(long)]
    task: String,
    /// Adaptation report whose schedule conditions the policy.
    #[arg(long, conflicts_with = "instruction")]
    result: Option<PathBuf>,
    /// Constant instruction; defaults to the task's own.
    #[arg(long)]
    instruction: Option<String>,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    world: Option<PathBuf>,
    /// Write the rolled-out trajectories here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MatrixArgs {
    /// Experiment spec TOML.
    #[arg(long)]
    spec: PathBuf,
    /// Output CSV; defaults to a file under the experiment's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use this checkpoint instead of training the prior model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Ignore completion markers and recompute every cell.
    #[arg(long)]
    fresh: bool,
    /// Write 0 for wall-clock columns so CSVs are byte-stable.
    #[arg(long)]
    zero_timings: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    matrix: MatrixArgs,
}

#[derive(Args)]
struct ScalingArgs {
    #[command(flatten)]
    matrix: MatrixArgs,
    /// Fine-tuning demo counts.
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,40,80")]
    counts: Vec<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Contiguous,
    Labeling,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value = "theory")]
    out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "20,50,100,200")]
    hs: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7,8")]
    ks: Vec<usize>,
    /// Epsilon values as multiples of 1/K.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75")]
    eps_fracs: Vec<f64>,
    /// Partition pairs per grid point.
    #[arg(long, default_value_t = 100_000)]
    samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "contiguous")]
    family: FamilyArg,
    /// Sample counts N for the exponent check.
    #[arg(long, value_delimiter = ',', default_value = "100,1000,20000")]
    ns: Vec<u64>,
    /// Also write the per-task bound accounting for this experiment spec.
    #[arg(long)]
    accounting: Option<PathBuf>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::from_name(s).ok_or_else(|| format!("unknown ablation '{s}'"))
}

enum Failure {
    Usage(String),
    Data(String),
    Remote { msg: String, transcript: Option<PathBuf> },
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Remote { .. } => 4,
        }
    }

    fn report(&self) {
        match self {
            Failure::Usage(m) | Failure::Data(m) => eprintln!("error: {m}"),
            Failure::Remote { msg, transcript } => {
                eprintln!("error: remote backend: {msg}");
                if let Some(p) = transcript {
                    eprintln!("transcript: {}", p.display());
                }
            }
        }
    }
}

fn data_err<E: Display>(context: &str) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Data(format!("{context}: {e}"))
}

fn remote_err(e: RemoteError) -> Failure {
    Failure::Remote {
        msg: e.to_string(),
        transcript: None,
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Sim(SimError::UnknownTask(t)) => Failure::Usage(format!("unknown task '{t}'")),
            e => Failure::Data(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::GenDemos(a) => gen_demos(a),
        Command::Augment(a) => augment(a),
        Command::Train(a) => train(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Rollout(a) => cmd_rollout(a),
        Command::Bench(a) => bench(a),
        Command::Scaling(a) => scaling(a),
        Command::Theory(a) => theory(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            f.report();
            ExitCode::from(f.code())
        }
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(data_err(&path.display().to_string()))?;
    toml::from_str(&text).map_err(data_err(&path.display().to_string()))
}

fn resolve_task(name: &str) -> Result<TaskSpec, Failure> {
    if name.ends_with(".toml") {
        return read_toml(Path::new(name));
    }
    find_task(name).map_err(|e| Failure::Usage(e.to_string()))
}

fn load_world(path: Option<&Path>) -> Result<WorldConfig, Failure> {
    let world = match path {
        Some(p) => read_toml(p)?,
        None => WorldConfig::default(),
    };
    world.validate().map_err(data_err("world config"))?;
    Ok(world)
}

fn load_data(path: &Path) -> Result<Dataset, Failure> {
    load_dataset(path).map_err(data_err(&path.display().to_string()))
}

fn load_model(path: &Path) -> Result<PolicyModel, Failure> {
    PolicyModel::load(path).map_err(data_err(&path.display().to_string()))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> CmdResult {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(data_err("create output directory"))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(data_err("serialize"))?;
    text.push('\n');
    std::fs::write(path, text).map_err(data_err(&path.display().to_string()))
}

fn gen_demos(a: GenDemosArgs) -> CmdResult {
    let world = load_world(a.world.as_deref())?;
    let mut tasks = Vec::new();
    for name in &a.task {
        if name == "prior" {
            tasks.extend(prior_tasks());
        } else {
            tasks.push(resolve_task(name)?);
        }
    }
    let data = if tasks.iter().all(|t| t.family == Family::Prior) {
        generate_dataset(&tasks, a.n, &world, a.seed, Role::Prior).map_err(data_err("generate"))?
    } else {
        // Same demos a benchmark cell with this seed uses.
        let mut out: Option<Dataset> = None;
        for t in &tasks {
            let d = target_demos(t, a.n, &world, a.seed)?;
            match &mut out {
                Some(o) => o.trajectories.extend(d.trajectories),
                None => out = Some(d),
            }
        }
        out.expect("at least one task")
    };
    let out = a
        .out
        .unwrap_or_else(|| PathBuf::from(format!("{}_n{}_s{}.jsonl", a.task.join("+"), a.n, a.seed)));
    save_dataset(&data, &out).map_err(data_err(&out.display().to_string()))?;
    println!("{} trajectories -> {}", data.trajectories.len(), out.display());
    Ok(())
}

fn remote_config(args: &RemoteArgs) -> Result<RemoteConfig, Failure> {
    let cfg: RemoteConfig = match &args.remote_config {
        Some(p) => read_toml(p)?,
        None => RemoteConfig::default(),
    };
    cfg.validate().map_err(remote_err)?;
    Ok(cfg)
}

fn transport(cfg: &RemoteConfig, args: &RemoteArgs) -> Result<Box<dyn Transport>, Failure> {
    Ok(match &args.replay {
        Some(p) => Box::new(ReplayTransport::load(p).map_err(remote_err)?),
        None => Box::new(HttpTransport::new(cfg).map_err(remote_err)?),
    })
}

fn augment(a: AugmentArgs) -> CmdResult {
    let data = load_data(&a.input)?;
    let heuristic: HeuristicConfig = match &a.heuristic {
        Some(p) => read_toml(p)?,
        None => HeuristicConfig::default(),
    };
    heuristic.validate().map_err(Failure::Data)?;
    let labeled = match a.backend {
        KeywordBackend::Mock => augment_dataset(&data, &heuristic, &MockKeywords::default(), &Identity, a.overwrite),
        KeywordBackend::None => augment_dataset(&data, &heuristic, &NoKeywords, &Identity, a.overwrite),
        KeywordBackend::Remote => {
            let cfg = remote_config(&a.remote)?;
            let transport = transport(&cfg, &a.remote)?;
            let limiter = RateLimiter::new(cfg.rate_per_sec, cfg.concurrency);
            let backend = RemoteKeywords {
                cfg: &cfg,
                transport: transport.as_ref(),
                limiter: &limiter,
            };
            augment_dataset(&data, &heuristic, &backend as &dyn KeywordExtractor, &Identity, a.overwrite)
        }
    };
    save_dataset(&labeled, &a.out).map_err(data_err(&a.out.display().to_string()))?;
    println!("{} trajectories labeled -> {}", labeled.trajectories.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> CmdResult {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.ridge {
        cfg.ridge = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let data = load_data(&a.data)?;
    let model = match &a.init {
        Some(init) => finetune_baseline(&load_model(init)?, &data, &cfg),
        None => train_masked_bc(&data, &cfg),
    }
    .map_err(data_err("train"))?;
    if let Some(last) = model.report.loss_curve.last() {
        log::info!("final minibatch loss {last:.6}");
    }
    model.save(&a.out).map_err(data_err(&a.out.display().to_string()))?;
    println!("checkpoint -> {}", a.out.display());
    Ok(())
}

fn cmd_adapt(a: AdaptArgs) -> CmdResult {
    if a.m == 0 || a.n_samples == 0 {
        return Err(Failure::Usage("--m and --n-samples must be at least 1".into()));
    }
    if a.n_samples == 1 && !a.exhaustive {
        log::warn!("--n-samples 1 scores a single random partition per candidate and demo");
    }
    let task = resolve_task(&a.task)?;
    let model = load_model(&a.model)?;
    let demos = load_data(&a.demos)?;
    if demos.instruction() != task.instruction {
        log::warn!(
            "demos are for '{}' but the task instruction is '{}'",
            demos.instruction(),
            task.instruction
        );
    }
    let spec = ExperimentSpec {
        m: a.m,
        n_samples: a.n_samples,
        mock: MockConfig {
            plant_truth: !a.no_plant,
            ..MockConfig::default()
        },
        ..ExperimentSpec::default()
    };
    let batch = match a.backend {
        ProposerBackend::Mock => proposals(&task, a.m, &spec.mock, a.ablation, a.seed)?,
        ProposerBackend::Remote => remote_batch(&a, &task, &demos)?,
    };
    let mut cfg = spec.adaptation(a.ablation, task.horizon, a.seed);
    cfg.exhaustive = a.exhaustive;
    cfg.shared_partition_pool = a.shared_pool;
    let mut result = adapt(&batch, &demos, &model, &cfg).map_err(data_err("adapt"))?;
    if a.zero_timings {
        result.wall_clock_secs = 0.0;
    }
    write_json(&result, &a.out)?;
    let truth = task.ground_truth();
    let chose_truth = result.chosen.as_ref().map(|c| Some(c) == truth.as_ref());
    println!(
        "ablation {} chosen {:?} cost {:.6} truth {:?} -> {}",
        result.ablation.name(),
        result.chosen_index,
        result.total_cost,
        chose_truth,
        a.out.display()
    );
    Ok(())
}

fn remote_batch(a: &AdaptArgs, task: &TaskSpec, demos: &Dataset) -> Result<ProposalBatch, Failure> {
    let cfg = remote_config(&a.remote)?;
    let transport = transport(&cfg, &a.remote)?;
    let limiter = RateLimiter::new(cfg.rate_per_sec, cfg.concurrency);
    let s0 = &demos
        .trajectories
        .first()
        .and_then(|t| t.steps.first())
        .ok_or_else(|| Failure::Data("demos have no steps".into()))?
        .state;
    let m = if a.ablation == Ablation::ZeroShot { 1 } else { a.m };
    let (batch, entries) = propose_remote_logged(
        &TaskSpec::describe_scene(s0),
        &task.instruction,
        m,
        &cfg,
        transport.as_ref(),
        &limiter,
    );
    let dir = match &a.transcripts {
        Some(d) => d.clone(),
        None => a.out.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let path = transcript_path(&dir, &task.name);
    let saved = std::fs::create_dir_all(&dir)
        .map_err(RemoteError::from)
        .and_then(|_| write_transcripts(&path, &entries));
    if let Err(e) = &saved {
        log::warn!("could not write transcript {}: {e}", path.display());
    }
    batch.map_err(|e| Failure::Remote {
        msg: e.to_string(),
        transcript: saved.is_ok().then_some(path),
    })
}

fn cmd_rollout(a: RolloutArgs) -> CmdResult {
    if a.episodes == 0 {
        return Err(Failure::Usage("--episodes must be at least 1".into()));
    }
    let task = resolve_task(&a.task)?;
    let world = load_world(a.world.as_deref())?;
    let model = load_model(&a.model)?;
    let report: Option<AdaptationResult> = match &a.result {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(data_err(&p.display().to_string()))?;
            Some(serde_json::from_str(&text).map_err(data_err(&p.display().to_string()))?)
        }
        None => None,
    };
    let mut policy = match &report {
        Some(r) => adapted_policy(r, &model),
        None => ScheduledPolicy::constant(&model, Some(a.instruction.as_deref().unwrap_or(&task.instruction)), None),
    };
    let mut successes = Vec::with_capacity(a.episodes);
    let mut trajectories = Vec::new();
    for e in 0..a.episodes as u64 {
        let (traj, ok) = rollout(&mut policy, &task, &world, task.horizon, episode_seed(a.seed, e))
            .map_err(data_err("rollout"))?;
        successes.push(ok);
        trajectories.push(traj);
    }
    let rate = successes.iter().filter(|&&s| s).count() as f64 / a.episodes as f64;
    if let Some(out) = &a.out {
        let data = Dataset {
            role: Role::Target,
            norm_stats: world.norm_stats.clone(),
            trajectories,
        };
        save_dataset(&data, out).map_err(data_err(&out.display().to_string()))?;
    }
    let summary = json!({
        "task": task.name,
        "episodes": a.episodes,
        "seed": a.seed,
        "successes": successes,
        "success_rate": rate,
    });
    println!("{summary}");
    Ok(())
}

fn load_spec(path: &Path) -> Result<ExperimentSpec, Failure> {
    ExperimentSpec::load(path).map_err(data_err(&path.display().to_string()))
}

fn spec_model(spec: &ExperimentSpec, m: &MatrixArgs) -> Result<PolicyModel, Failure> {
    match &m.model {
        Some(p) => load_model(p),
        None => Ok(prior_model(&spec.prior, Some(&spec.output_dir.join("cache")))?),
    }
}

fn finish_rows(out: &mut BenchOutcome, zero_timings: bool) {
    if zero_timings {
        for r in &mut out.rows {
            r.adapt_secs = 0.0;
        }
    }
    for (cell, err) in &out.failures {
        eprintln!("cell {cell} failed: {err}");
    }
}

fn write_failures(out: &BenchOutcome, dir: &Path) -> CmdResult {
    let path = dir.join("failures.csv");
    if out.failures.is_empty() {
        if path.exists() {
            std::fs::remove_file(&path).map_err(data_err(&path.display().to_string()))?;
        }
        return Ok(());
    }
    let mut w = csv::Writer::from_path(&path).map_err(data_err(&path.display().to_string()))?;
    w.write_record(["cell", "error"]).map_err(data_err("failures"))?;
    for (cell, error) in &out.failures {
        w.write_record([cell, error]).map_err(data_err("failures"))?;
    }
    w.flush().map_err(data_err("failures"))
}

fn bench(a: BenchArgs) -> CmdResult {
    let m = &a.matrix;
    let spec = load_spec(&m.spec)?;
    let out_path = m.out.clone().unwrap_or_else(|| spec.output_dir.join("results.csv"));
    let cells = bench_cells(&spec);
    let model = spec_model(&spec, m)?;
    let mut out = run_cells(&spec, &model, &cells, !m.fresh)?;
    if out.reused == cells.len() && out_path.exists() {
        println!("all {} cells already complete", cells.len());
        return Ok(());
    }
    finish_rows(&mut out, m.zero_timings);
    write_rows(&out.rows, &out_path)?;
    write_failures(&out, &spec.output_dir)?;
    print_summary(&spec, &out.rows);
    println!(
        "{} rows ({} reused, {} failed) -> {}",
        out.rows.len(),
        out.reused,
        out.failures.len(),
        out_path.display()
    );
    Ok(())
}

fn print_summary(spec: &ExperimentSpec, rows: &[ResultRow]) {
    for method in &spec.methods {
        let name = method.name();
        let v: Vec<f64> = rows.iter().filter(|r| r.method == name).map(|r| r.success_rate).collect();
        if !v.is_empty() {
            println!("{name:12} mean success {:.3}", v.iter().sum::<f64>() / v.len() as f64);
        }
    }
}

fn scaling(a: ScalingArgs) -> CmdResult {
    let m = &a.matrix;
    if a.counts.is_empty() || a.counts.contains(&0) {
        return Err(Failure::Usage("--counts must be a nonempty list of positive integers".into()));
    }
    let spec = load_spec(&m.spec)?;
    let out_path = m.out.clone().unwrap_or_else(|| spec.output_dir.join("scaling.csv"));
    let cells = scaling_cells(&spec, &a.counts);
    let model = spec_model(&spec, m)?;
    let mut out = run_cells(&spec, &model, &cells, !m.fresh)?;
    finish_rows(&mut out, m.zero_timings);
    write_rows(&out.rows, &spec.output_dir.join("scaling_rows.csv"))?;
    write_failures(&out, &spec.output_dir)?;
    let table = scaling_table(&out.rows, &a.counts, spec.n_demos);
    write_rows(&table, &out_path)?;
    for r in &table {
        println!("n={:<4} palo {:.3} ft {:.3}", r.n_demos, r.palo_success, r.ft_success);
    }
    match crossover(&table) {
        Some(n) => println!("crossover at {n} demos"),
        None => println!("no crossover on the grid"),
    }
    println!("-> {}", out_path.display());
    Ok(())
}

fn theory(a: TheoryArgs) -> CmdResult {
    let family = match a.family {
        FamilyArg::Contiguous => PartitionFamily::Contiguous,
        FamilyArg::Labeling => PartitionFamily::Labeling,
    };
    let usage = |e: palo::theory::TheoryError| Failure::Usage(e.to_string());
    let report = check_overlap_bound(&a.hs, &a.ks, &a.eps_fracs, a.samples, a.seed, family)
        .map_err(usage)?
        .merge(check_exp_bound(&a.hs, &a.ks, &a.ns).map_err(usage)?);
    std::fs::create_dir_all(&a.out_dir).map_err(data_err(&a.out_dir.display().to_string()))?;
    write_csv_file(&report.overlap, &a.out_dir.join("overlap.csv")).map_err(data_err("overlap.csv"))?;
    write_csv_file(&report.exp, &a.out_dir.join("exp.csv")).map_err(data_err("exp.csv"))?;
    let mut text = report.violations.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(a.out_dir.join("violations.txt"), text).map_err(data_err("violations.txt"))?;
    println!(
        "{} overlap rows, {} exp rows, {} violations -> {}",
        report.overlap.len(),
        report.exp.len(),
        report.violations.len(),
        a.out_dir.display()
    );
    if let Some(path) = &a.accounting {
        let spec = load_spec(path)?;
        let model = prior_model(&spec.prior, Some(&spec.output_dir.join("cache")))?;
        let prior = prior_dataset(&spec.prior)?;
        let mut rows = Vec::new();
        for name in &spec.tasks {
            let task = resolve_task(name)?;
            rows.push(theorem_row(&spec, &model, &prior, &task)?);
        }
        let held = rows.iter().filter(|r| r.holds).count();
        write_csv_file(&rows, &a.out_dir.join("accounting.csv")).map_err(data_err("accounting.csv"))?;
        println!("bound holds on {held}/{} tasks", rows.len());
    }
    Ok(())
}
