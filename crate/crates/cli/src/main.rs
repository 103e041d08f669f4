use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use irrigo_cli::pipeline::{
    compare, importance_csv, metrics_csv, render_table, report_json, synth_split, train, train_water_model, Dataset, Task, TRAIN_FRACTION,
};
use irrigo_cli::stack::{run_stack, BrokerMode, Outage, StackOptions};
use irrigo_core::edgenode::{EdgeNode, Mode, NodeConfig, ReplaySource, SensorSource, SimulatedSource};
use irrigo_core::ensemble::curve::{curve_to_csv, DEFAULT_FRACTIONS};
use irrigo_core::ensemble::{evaluate, learning_curve, metrics_from_predictions, EnsembleKind, Hyperparams, TreeEnsembleModel};
use irrigo_core::fieldsim::{days_csv, run_policy, Policy, ScenarioConfig};
use irrigo_core::synthdata::{generate, read_csv, split, summarize, write_csv, GeneratorConfig};
use irrigo_core::tinymodel::{self, export, quantize, EdgeModel, QuantMode};
use irrigo_mqtt::{node_client, BrokerLimits, ClientOptions, MqttClient};
use irrigo_server::{EdgeServer, NoRelay, Relay, ServerConfig};

/// Local-first irrigation toolkit: data, models, broker, server, node and
/// simulation in one binary.
#[derive(Debug, Parser)]
#[command(name = "irrigo", version)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// JSON config file; its meaning depends on the subcommand (generator,
    /// hyperparameters, node or scenario config).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for every report and artifact.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the synthetic need and water datasets with train/test splits.
    Synth(SynthArgs),
    /// Train one ensemble and export it.
    Train(TrainArgs),
    /// Score a saved model on a dataset.
    Eval(EvalArgs),
    /// Train both ensembles and write the comparison report.
    Compare(CompareArgs),
    /// Convert a model to an edge artifact, optionally quantized.
    ExportModel(ExportArgs),
    /// Print the header and tree statistics of an edge artifact.
    InspectModel(InspectArgs),
    /// Run a model on input rows.
    Infer(InferArgs),
    /// Run the MQTT broker until interrupted.
    Broker(BrokerArgs),
    /// Run the ingest and HTTP server until interrupted.
    Server(ServerArgs),
    /// Run one edge node against a replay file or the field simulator.
    Node(NodeArgs),
    /// Closed-loop simulation, through the full in-process stack for node
    /// policies.
    Simulate(SimulateArgs),
    /// Time single-row inference of an edge artifact.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Need,
    Water,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Need => Task::Need,
            TaskArg::Water => Task::Water,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Rf,
    Gb,
}

impl From<KindArg> for EnsembleKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Rf => EnsembleKind::Forest,
            KindArg::Gb => EnsembleKind::Boosting,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum QuantArg {
    F16,
    I16,
}

impl From<QuantArg> for QuantMode {
    fn from(q: QuantArg) -> Self {
        match q {
            QuantArg::F16 => QuantMode::F16,
            QuantArg::I16 => QuantMode::I16,
        }
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Number of rows.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Which label to learn.
    #[arg(long, value_enum, default_value = "need")]
    task: TaskArg,
    /// CSV to use instead of the generated split for this seed.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "gb")]
    kind: KindArg,
    /// Hyperparameter override such as `gb.n_estimators=50`; repeatable.
    #[arg(long = "hp")]
    hp: Vec<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model file: `.json` ensemble or edge artifact.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Need-task training CSV; requires --test.
    #[arg(long, requires = "test")]
    train: Option<PathBuf>,
    /// Need-task test CSV; requires --train.
    #[arg(long, requires = "train")]
    test: Option<PathBuf>,
    /// Hyperparameter override such as `rf.n_estimators=1`; repeatable.
    #[arg(long = "hp", num_args = 1..)]
    hp: Vec<String>,
    /// Also write learning curves for both models.
    #[arg(long)]
    curves: bool,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// `.json` ensemble or float edge artifact.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    quantize: Option<QuantArg>,
    /// Output file name inside --out.
    #[arg(long)]
    output: Option<String>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Edge artifact.
    model: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// `.json` ensemble or edge artifact.
    #[arg(long)]
    model: PathBuf,
    /// One comma-separated feature row; repeatable.
    #[arg(long = "input", required_unless_present = "csv")]
    input: Vec<String>,
    /// Dataset CSV whose rows are featurized for --task.
    #[arg(long, conflicts_with = "input")]
    csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "water")]
    task: TaskArg,
}

#[derive(Debug, Args)]
struct BrokerArgs {
    #[arg(long, default_value = "0.0.0.0:1883")]
    bind: String,
    #[arg(long, default_value_t = 256)]
    max_connections: usize,
}

#[derive(Debug, Args)]
struct ServerArgs {
    #[arg(long, default_value = "0.0.0.0:8080")]
    bind: String,
    /// Broker address, or `none` to serve the store without ingesting.
    #[arg(long, default_value = "127.0.0.1:1883")]
    broker: String,
    /// Store directory; defaults to `<out>/data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Shared token required on command and config writes.
    #[arg(long)]
    token: Option<String>,
    /// Directory of dashboard assets served at `/`.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
    /// Store size budget in bytes.
    #[arg(long)]
    max_bytes: Option<u64>,
}

#[derive(Debug, Args)]
struct NodeArgs {
    /// Broker address, or `none` to run offline.
    #[arg(long, default_value = "none")]
    broker: String,
    /// Replay CSV (`ts_ms,soil_adc,temp_c,hum_pct,light_lux[,ph]`).
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Replay speed factor.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    /// Simulated days when no replay is given.
    #[arg(long, default_value_t = 1.0)]
    days: f64,
    /// Edge artifact; overrides `model_path` from the node config.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Do not echo the transcript to stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Model,
    Rule,
    Timer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StackBroker {
    /// Broker, server and node in this process over loopback.
    Inproc,
    /// No broker: the node runs offline and the server receives nothing.
    None,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "model")]
    policy: PolicyArg,
    #[arg(long, default_value_t = 14.0)]
    days: f64,
    #[arg(long, value_enum, default_value = "inproc")]
    broker: StackBroker,
    /// Edge artifact for the model policy; trained on the fly when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Also run the fixed timer on the same seed and report the saving.
    #[arg(long)]
    baseline: bool,
    /// Kill the broker after this fraction of the run.
    #[arg(long, requires = "restart_broker_at")]
    kill_broker_at: Option<f64>,
    /// Bring a fresh broker up after this fraction of the run.
    #[arg(long, requires = "kill_broker_at")]
    restart_broker_at: Option<f64>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Edge artifact.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    rows: usize,
}

/// Errors in how the command was invoked rather than in what it did.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ctx = Ctx { seed: cli.seed, config: cli.config, out: cli.out };
    match cli.cmd {
        Cmd::Synth(a) => synth_cmd(&ctx, a),
        Cmd::Train(a) => train_cmd(&ctx, a),
        Cmd::Eval(a) => eval_cmd(&ctx, a),
        Cmd::Compare(a) => compare_cmd(&ctx, a),
        Cmd::ExportModel(a) => export_cmd(&ctx, a),
        Cmd::InspectModel(a) => inspect_cmd(&ctx, a),
        Cmd::Infer(a) => infer_cmd(&ctx, a),
        Cmd::Broker(a) => broker_cmd(&ctx, a),
        Cmd::Server(a) => server_cmd(&ctx, a),
        Cmd::Node(a) => node_cmd(&ctx, a),
        Cmd::Simulate(a) => simulate_cmd(&ctx, a),
        Cmd::Bench(a) => bench_cmd(&ctx, a),
    }
}

struct Ctx {
    seed: u64,
    config: Option<PathBuf>,
    out: PathBuf,
}

impl Ctx {
    fn config_text(&self) -> Result<Option<String>> {
        self.config.as_ref().map(|p| fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))).transpose()
    }

    fn no_config(&self, cmd: &str) -> Result<()> {
        if self.config.is_some() {
            return usage(format!("--config is not used by {cmd}"));
        }
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, content: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, content).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        self.write(name, serde_json::to_string_pretty(value)? + "\n")
    }

    fn generator(&self) -> Result<GeneratorConfig> {
        let mut cfg = match self.config_text()? {
            Some(t) => GeneratorConfig::from_json(&t)?,
            None => GeneratorConfig::default(),
        };
        cfg.seed = self.seed;
        Ok(cfg)
    }

    fn hyperparams(&self, overrides: &[String]) -> Result<Hyperparams> {
        let mut hp: Hyperparams = match self.config_text()? {
            Some(t) => serde_json::from_str(&t).context("hyperparameter config")?,
            None => Hyperparams::default(),
        };
        for o in overrides {
            hp = hp.with_override(o).map_err(|e| UsageError(format!("--hp {o}: {e}")))?;
        }
        hp.validate()?;
        Ok(hp)
    }

    fn scenario(&self) -> Result<ScenarioConfig> {
        let cfg: ScenarioConfig = match self.config_text()? {
            Some(t) => serde_json::from_str(&t).context("scenario config")?,
            None => ScenarioConfig::default(),
        };
        cfg.validate().map_err(anyhow::Error::msg)?;
        Ok(cfg)
    }
}

fn synth_cmd(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let mut cfg = ctx.generator()?;
    if let Some(n) = a.n {
        cfg.n_rows = n;
    }
    let t = Instant::now();
    let rows = generate(&cfg)?;
    let elapsed = t.elapsed();
    let summary = summarize(&rows)?;
    let (train_rows, test_rows) = split(&rows, TRAIN_FRACTION, cfg.seed)?;
    for task in [Task::Need, Task::Water] {
        let name = match task {
            Task::Need => "need",
            Task::Water => "water",
        };
        write_csv(ctx.path(&format!("{name}.csv")), &rows, task.csv())?;
        write_csv(ctx.path(&format!("{name}_train.csv")), &train_rows, task.csv())?;
        write_csv(ctx.path(&format!("{name}_test.csv")), &test_rows, task.csv())?;
    }
    ctx.write_json("synth_summary.json", &summary)?;
    ctx.write("synth_config.json", cfg.to_json() + "\n")?;
    println!("{} rows in {:.2} s (train {}, test {})", rows.len(), elapsed.as_secs_f64(), train_rows.len(), test_rows.len());
    println!("{:<12}{:>12}{:>12}{:>12}{:>12}", "column", "mean", "std", "min", "max");
    for (name, c) in [
        ("moisture", summary.moisture),
        ("light", summary.light),
        ("ph", summary.ph),
        ("temperature", summary.temperature),
        ("humidity", summary.humidity),
        ("need", summary.need),
    ] {
        println!("{name:<12}{:>12.2}{:>12.2}{:>12.2}{:>12.2}", c.mean, c.std, c.min, c.max);
    }
    println!("corr(temperature, humidity) = {:.3}", summary.corr_temp_hum);
    println!(
        "need zones: low {:.1}%, medium {:.1}%, high {:.1}%",
        100.0 * summary.zone_low,
        100.0 * summary.zone_medium,
        100.0 * summary.zone_high
    );
    Ok(())
}

/// Train and test sets for a task: `--data` is split with the seed,
/// otherwise the generated dataset for the seed is used.
fn datasets(ctx: &Ctx, task: Task, data: Option<&Path>) -> Result<(Dataset, Dataset)> {
    let cfg = GeneratorConfig { seed: ctx.seed, ..GeneratorConfig::default() };
    let (train_rows, test_rows) = match data {
        Some(p) => split(&read_csv(p, task.csv())?, TRAIN_FRACTION, ctx.seed)?,
        None => synth_split(&cfg)?,
    };
    Ok((Dataset::build(&train_rows, task, cfg.row_interval_ms)?, Dataset::build(&test_rows, task, cfg.row_interval_ms)?))
}

fn kind_name(kind: EnsembleKind) -> &'static str {
    match kind {
        EnsembleKind::Forest => "rf",
        EnsembleKind::Boosting => "gb",
    }
}

fn task_name(task: Task) -> &'static str {
    match task {
        Task::Need => "need",
        Task::Water => "water",
    }
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let hp = ctx.hyperparams(&a.hp)?;
    let task: Task = a.data.task.into();
    let kind: EnsembleKind = a.kind.into();
    let (train_set, test_set) = datasets(ctx, task, a.data.data.as_deref())?;
    let t = Instant::now();
    let model = train(kind, &train_set, &hp, ctx.seed, task)?;
    let secs = t.elapsed().as_secs_f64();
    let mut metrics = evaluate(&model, &test_set.x, &test_set.y)?;
    metrics.train_time_s = Some(secs);
    let stem = format!("model_{}_{}", task_name(task), kind_name(kind));
    ctx.write_json(&format!("{stem}.json"), &model)?;
    let artifact = ctx.write(&format!("{stem}.tml1"), export(&model)?)?;
    ctx.write_json(&format!("{stem}_summary.json"), &model.summary(&hp))?;
    ctx.write_json(&format!("{stem}_metrics.json"), &metrics.without_timings())?;
    println!("{} trees, {} nodes, trained in {secs:.2} s", model.trees.len(), model.n_nodes());
    println!("test R² {:.4}, RMSE {:.4}, MAE {:.4}, MAPE {:.2}%", metrics.r2, metrics.rmse, metrics.mae, metrics.mape_pct);
    println!("wrote {}", artifact.display());
    Ok(())
}

enum AnyModel {
    Ensemble(TreeEnsembleModel),
    Edge(EdgeModel),
}

impl AnyModel {
    fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        if bytes.starts_with(b"TML1") {
            return Ok(Self::Edge(tinymodel::load(&bytes)?));
        }
        let model: TreeEnsembleModel =
            serde_json::from_slice(&bytes).with_context(|| format!("{} is neither an edge artifact nor a model JSON", path.display()))?;
        Ok(Self::Ensemble(model))
    }

    fn n_features(&self) -> usize {
        match self {
            Self::Ensemble(m) => m.n_features(),
            Self::Edge(m) => m.n_features(),
        }
    }

    fn predict(&self, row: &[f64]) -> Result<f64> {
        Ok(match self {
            Self::Ensemble(m) => m.predict(row)?,
            Self::Edge(m) => m.infer(row)?,
        })
    }
}

fn eval_cmd(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    ctx.no_config("eval")?;
    let task: Task = a.data.task.into();
    let model = AnyModel::load(&a.model)?;
    let (_, test_set) = datasets(ctx, task, a.data.data.as_deref())?;
    if model.n_features() != test_set.x.n_cols() {
        bail!("model expects {} features, the {} task has {}", model.n_features(), task_name(task), test_set.x.n_cols());
    }
    let yhat: Vec<f64> = test_set.x.rows().map(|r| model.predict(r)).collect::<Result<_>>()?;
    let metrics = metrics_from_predictions(&test_set.y, &yhat)?;
    let stem = a.model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    ctx.write_json(&format!("eval_{stem}.json"), &metrics)?;
    println!(
        "{} test rows: R² {:.4}, RMSE {:.4}, MAE {:.4}, MAPE {:.2}%",
        test_set.len(),
        metrics.r2,
        metrics.rmse,
        metrics.mae,
        metrics.mape_pct
    );
    Ok(())
}

fn compare_cmd(ctx: &Ctx, a: CompareArgs) -> Result<()> {
    let hp = ctx.hyperparams(&a.hp)?;
    let cfg = GeneratorConfig { seed: ctx.seed, ..GeneratorConfig::default() };
    let (train_set, test_set) = match (&a.train, &a.test) {
        (Some(tr), Some(te)) => (
            Dataset::build(&read_csv(tr, Task::Need.csv())?, Task::Need, cfg.row_interval_ms)?,
            Dataset::build(&read_csv(te, Task::Need.csv())?, Task::Need, cfg.row_interval_ms)?,
        ),
        _ => datasets(ctx, Task::Need, None)?,
    };
    let c = compare(&train_set, &test_set, &hp, ctx.seed, Task::Need)?;
    ctx.write("compare.json", report_json(&c.report))?;
    let table = render_table(&c.report, Some(&c.timings));
    ctx.write("compare.txt", &table)?;
    ctx.write("metrics.csv", metrics_csv(&c))?;
    ctx.write("importance.csv", importance_csv(&c.report))?;
    if a.curves {
        let mut x = train_set.x.clone();
        let mut y = train_set.y.clone();
        x = irrigo_core::ensemble::Matrix::from_rows(&x.rows().chain(test_set.x.rows()).collect::<Vec<_>>())?;
        y.extend_from_slice(&test_set.y);
        for kind in [EnsembleKind::Forest, EnsembleKind::Boosting] {
            let pts = learning_curve(&x, &y, &hp, kind, &DEFAULT_FRACTIONS, ctx.seed)?;
            ctx.write(&format!("learning_curve_{}.csv", kind_name(kind)), curve_to_csv(&pts))?;
        }
    }
    print!("{table}");
    Ok(())
}

fn export_cmd(ctx: &Ctx, a: ExportArgs) -> Result<()> {
    ctx.no_config("export-model")?;
    let bytes = match AnyModel::load(&a.model)? {
        AnyModel::Ensemble(m) => export(&m)?,
        AnyModel::Edge(_) => fs::read(&a.model)?,
    };
    let (bytes, suffix) = match a.quantize {
        Some(q) => (quantize(&bytes, q.into())?, format!("_{}", format!("{q:?}").to_lowercase())),
        None => (bytes, String::new()),
    };
    let stem = a.model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let name = a.output.unwrap_or_else(|| format!("{stem}{suffix}.tml1"));
    let path = ctx.write(&name, &bytes)?;
    let info = tinymodel::load(&bytes)?.info();
    println!("wrote {} ({} bytes, {} trees, encoding {})", path.display(), bytes.len(), info.n_trees, info.encoding);
    Ok(())
}

fn inspect_cmd(ctx: &Ctx, a: InspectArgs) -> Result<()> {
    ctx.no_config("inspect-model")?;
    let bytes = fs::read(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let info = tinymodel::load(&bytes)?.info();
    println!("{}", serde_json::to_string_pretty(&info)?);
    Ok(())
}

fn parse_row(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| UsageError(format!("not a number: {v:?}")).into())).collect()
}

fn infer_cmd(ctx: &Ctx, a: InferArgs) -> Result<()> {
    ctx.no_config("infer")?;
    let model = AnyModel::load(&a.model)?;
    let rows: Vec<Vec<f64>> = match &a.csv {
        Some(p) => {
            let task: Task = a.task.into();
            let data = Dataset::build(&read_csv(p, task.csv())?, task, GeneratorConfig::default().row_interval_ms)?;
            data.x.rows().map(<[f64]>::to_vec).collect()
        }
        None => a.input.iter().map(|s| parse_row(s)).collect::<Result<_>>()?,
    };
    let mut out = String::new();
    for r in &rows {
        out.push_str(&format!("{:.6}\n", model.predict(r)?));
    }
    print!("{out}");
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn broker_cmd(ctx: &Ctx, a: BrokerArgs) -> Result<()> {
    ctx.no_config("broker")?;
    let limits = BrokerLimits { max_connections: a.max_connections, ..BrokerLimits::default() };
    runtime()?.block_on(async {
        let h = irrigo_mqtt::server::spawn(&a.bind, limits).await.with_context(|| format!("binding {}", a.bind))?;
        println!("broker listening on {}", h.local_addr());
        tokio::signal::ctrl_c().await?;
        let s = h.stats();
        println!("shutting down: {s:?}");
        Ok(())
    })
}

fn server_cmd(ctx: &Ctx, a: ServerArgs) -> Result<()> {
    ctx.no_config("server")?;
    let data = a.data.unwrap_or_else(|| ctx.path("data"));
    let mut cfg = ServerConfig::new(&data);
    cfg.token = a.token;
    cfg.static_dir = a.static_dir;
    cfg.store.max_bytes = a.max_bytes;
    let client = match a.broker.as_str() {
        "none" => None,
        addr => Some(Arc::new(MqttClient::start(addr, ClientOptions::new("edge-server"))?)),
    };
    let relay: Arc<dyn Relay> = match &client {
        Some(c) => c.clone(),
        None => Arc::new(NoRelay),
    };
    let server = EdgeServer::new(cfg, relay)?;
    let r = server.recovery();
    println!("store {}: {} records in {} partitions, {} lines skipped", data.display(), r.records, r.partitions, r.skipped_lines);
    let _ingest = client.map(|c| server.spawn_ingest(c));
    runtime()?.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.bind).await.with_context(|| format!("binding {}", a.bind))?;
        println!("http listening on {}", listener.local_addr()?);
        tokio::select! {
            r = irrigo_server::serve(listener, server) => r?,
            r = tokio::signal::ctrl_c() => r?,
        }
        Ok(())
    })
}

struct Stdout;

impl std::io::Write for Stdout {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stdout().write(buf)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stdout().flush()
    }
}

fn node_cmd(ctx: &Ctx, a: NodeArgs) -> Result<()> {
    let mut cfg = match ctx.config_text()? {
        Some(t) => NodeConfig::from_json(&t)?,
        None => NodeConfig::default(),
    };
    if let Some(m) = &a.model {
        cfg.model_path = Some(m.to_string_lossy().into_owned());
    }
    let mut node = EdgeNode::from_config(cfg.clone())?;
    node.keep_transcript(false);
    if !a.quiet {
        node = node.with_sink(Box::new(Stdout));
    }
    let uplink = match a.broker.as_str() {
        "none" => None,
        addr => {
            let c = node_client(addr, &cfg.node_id)?;
            c.wait_connected(Duration::from_secs(5));
            Some(c)
        }
    };
    if let Some(c) = uplink {
        node = node.with_uplink(Box::new(c));
    }
    node.announce(irrigo_server::now_ms());
    let mut source: Box<dyn SensorSource> = match &a.replay {
        Some(p) => Box::new(ReplaySource::from_path(p, a.speed)?),
        None => {
            let scenario = ScenarioConfig { duration_days: a.days, ..ScenarioConfig::default() };
            scenario.validate().map_err(UsageError)?;
            Box::new(SimulatedSource::new(scenario, ctx.seed))
        }
    };
    let summary = node.run(source.as_mut())?;
    // give the client a moment to flush QoS 1 events
    if node.uplink_mut().is_some_and(|u| u.is_connected()) {
        std::thread::sleep(Duration::from_millis(500));
    }
    ctx.write_json(&format!("node_{}_summary.json", cfg.node_id), &summary)?;
    ctx.write_json(&format!("node_{}_events.json", cfg.node_id), &node.events())?;
    eprintln!("{} samples, {} decisions, {} waterings, {:.1} ml", summary.samples, summary.decisions, summary.waterings, summary.total_ml);
    Ok(())
}

fn load_edge(path: &Path) -> Result<EdgeModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(tinymodel::load(&bytes)?)
}

/// Rows and seed of the water model trained when `simulate` gets no model.
const SIM_MODEL_ROWS: usize = 8000;

#[derive(Serialize)]
struct Saving {
    policy_ml: f64,
    timer_ml: f64,
    ratio: f64,
    saving_pct: f64,
    policy_in_band_pct: f64,
    timer_in_band_pct: f64,
}

fn simulate_cmd(ctx: &Ctx, a: SimulateArgs) -> Result<()> {
    let scenario = ScenarioConfig { duration_days: a.days, ..ctx.scenario()? };
    scenario.validate().map_err(UsageError)?;
    let outage = match (a.kill_broker_at, a.restart_broker_at) {
        (Some(k), Some(r)) => {
            if !(0.0 < k && k < r && r < 1.0) {
                return usage("need 0 < --kill-broker-at < --restart-broker-at < 1");
            }
            if a.broker == StackBroker::None {
                return usage("a broker outage needs --broker inproc");
            }
            Some(Outage { kill_at: k, restart_at: r })
        }
        _ => None,
    };
    let timer = || -> Result<_> { Ok(run_policy(&Policy::timer(), &scenario, ctx.seed)?.report) };

    if a.policy == PolicyArg::Timer {
        if outage.is_some() || a.model.is_some() {
            return usage("the timer policy has no node, broker or model");
        }
        let r = timer()?;
        ctx.write_json("water_report_timer.json", &r)?;
        ctx.write("days_timer.csv", days_csv(&[&r]))?;
        println!("timer: {:.1} ml in {} events, {:.1}% of the time in band", r.total_ml, r.n_events, r.time_in_band_pct);
        return Ok(());
    }

    let mode = if a.policy == PolicyArg::Model { Mode::Model } else { Mode::Rule };
    let model = match (mode, &a.model) {
        (Mode::Model, Some(p)) => Some(load_edge(p)?),
        (Mode::Model, None) => Some(tinymodel::load(&export(&train_water_model(SIM_MODEL_ROWS, ctx.seed)?)?)?),
        (Mode::Rule, Some(_)) => return usage("--model only applies to the model policy"),
        (Mode::Rule, None) => None,
    };
    let store = ctx.path("store");
    if store.exists() {
        fs::remove_dir_all(&store).with_context(|| format!("clearing {}", store.display()))?;
    }
    let opts = StackOptions {
        scenario,
        seed: ctx.seed,
        broker: match a.broker {
            StackBroker::Inproc => BrokerMode::InProcess,
            StackBroker::None => BrokerMode::None,
        },
        outage,
        ..StackOptions::new(mode, model, &store)
    };
    let t = Instant::now();
    let run = run_stack(&opts)?;
    let r = &run.report;
    let name = &r.policy;
    ctx.write_json(&format!("stack_report_{name}.json"), r)?;
    ctx.write_json(&format!("water_report_{name}.json"), &r.water)?;
    ctx.write(&format!("transcript_{name}.txt"), run.transcript.join("\n") + "\n")?;
    let mut reports = vec![r.water.clone()];
    if a.baseline {
        let tr = timer()?;
        let saving = Saving {
            policy_ml: r.water.total_ml,
            timer_ml: tr.total_ml,
            ratio: r.water.total_ml / tr.total_ml,
            saving_pct: 100.0 * (1.0 - r.water.total_ml / tr.total_ml),
            policy_in_band_pct: r.water.time_in_band_pct,
            timer_in_band_pct: tr.time_in_band_pct,
        };
        ctx.write_json("water_report_timer.json", &tr)?;
        ctx.write_json("saving.json", &saving)?;
        println!("timer: {:.1} ml, {:.1}% in band; {name} uses {:.1}% less water", tr.total_ml, tr.time_in_band_pct, saving.saving_pct);
        reports.push(tr);
    }
    ctx.write("days.csv", days_csv(&reports.iter().collect::<Vec<_>>()))?;
    println!(
        "{name}: {:.1} ml in {} events, {:.1}% of the time in band ({:.1} s)",
        r.water.total_ml,
        r.water.n_events,
        r.water.time_in_band_pct,
        t.elapsed().as_secs_f64()
    );
    println!("store: {} telemetry, {} event records ({} duplicates)", r.telemetry_stored, r.events_stored, r.duplicate_events);
    for c in &r.checks {
        println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    if !r.passed() {
        bail!("failed checks: {}", r.failed().iter().map(|c| c.name).collect::<Vec<_>>().join(", "));
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    rows: usize,
    mean_us: f64,
    p50_us: f64,
    p99_us: f64,
    max_us: f64,
}

fn bench_cmd(ctx: &Ctx, a: BenchArgs) -> Result<()> {
    ctx.no_config("bench")?;
    if a.rows == 0 {
        return usage("--rows must be positive");
    }
    let model = load_edge(&a.model)?;
    let task = match model.n_features() {
        14 => Task::Need,
        8 => Task::Water,
        n => bail!("no input generator for {n} features"),
    };
    let rows = generate(&GeneratorConfig { n_rows: a.rows, seed: ctx.seed, ..GeneratorConfig::default() })?;
    let data = Dataset::build(&rows, task, GeneratorConfig::default().row_interval_ms)?;
    let mut times = Vec::with_capacity(a.rows);
    let mut sink = 0.0;
    for r in data.x.rows() {
        let t = Instant::now();
        sink += model.infer(r)?;
        times.push(t.elapsed().as_secs_f64() * 1e6);
    }
    std::hint::black_box(sink);
    times.sort_by(f64::total_cmp);
    let q = |p: f64| times[((times.len() - 1) as f64 * p).round() as usize];
    let report = BenchReport {
        rows: times.len(),
        mean_us: times.iter().sum::<f64>() / times.len() as f64,
        p50_us: q(0.5),
        p99_us: q(0.99),
        max_us: q(1.0),
    };
    ctx.write_json("bench.json", &report)?;
    println!("{} rows: mean {:.3} µs, p50 {:.3} µs, p99 {:.3} µs", report.rows, report.mean_us, report.p50_us, report.p99_us);
    Ok(())
}
