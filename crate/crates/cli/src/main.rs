use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use cfkd_core::cfkd::{
    default_explainer_for, detect_ch, run_cfkd, write_run_record, CfkdConfig, SubsetStrategy, TeacherMode,
};
use cfkd_core::harness::{run_grid_to_dir, run_k_ablation, ExperimentConfig};
use cfkd_core::learner::{checkpoint, train, Loss, ModelConfig, TrainConfig};
use cfkd_core::rng::derive_seed;
use cfkd_core::synthdata::{self, generate, oracle_label_fn, split, DatasetSpec, FeatureMode, Split, SplitFractions};
use cfkd_core::teacher::{AnnotationStore, HumanTeacher, OracleTeacher, RunPhase};
use cfkd_core::theory::{
    negative_prevalence_stats, simulate_alignment, simulate_prevalence, spurious_alignment_probability, ImbalanceSpec,
};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "cfkd-lab",
    version,
    about = "Synthetic Clever-Hans experiments with counterfactual knowledge distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form quantities against Monte Carlo estimates.
    Theory(TheoryArgs),
    /// Generate a confounded dataset.
    Gen(GenArgs),
    /// Train a classifier on a dataset file.
    Train(TrainArgs),
    /// One CFKD round on a trained classifier.
    Cfkd(CfkdArgs),
    /// Run an experiment grid from a config file.
    Run(RunArgs),
    /// AGA against the imbalance ratio for the CE+BB baseline.
    Ablation(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Emit {
    Csv,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum Quantity {
    /// Probability that a fair binary feature perfectly predicts n positives.
    Alignment,
    /// Standard deviation of the spurious prevalence among the n·k negatives.
    Prevalence,
}

#[derive(clap::Args)]
struct TheoryArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
    n: Vec<usize>,
    /// Ignored by the alignment quantity apart from the output column.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    k: Vec<usize>,
    #[arg(long, default_value_t = 200_000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    emit: Emit,
    #[arg(long, value_enum, default_value = "alignment")]
    quantity: Quantity,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Binary,
    Continuous,
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    causal_index: usize,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    spurious: Vec<usize>,
    #[arg(long, default_value_t = 0.9)]
    prevalence_pos: f64,
    #[arg(long, default_value_t = 0.1)]
    prevalence_neg: f64,
    #[arg(long, default_value_t = 0.5)]
    noise_std: f64,
    #[arg(long, value_enum, default_value = "binary")]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct SplitArgs {
    /// Seed of the train/validation/test split; keep it equal across `train` and `cfkd`.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
}

impl SplitArgs {
    fn apply(&self, data: &synthdata::LabeledDataset) -> Result<Split> {
        let train = 1.0 - self.val_fraction - self.test_fraction;
        let fr = SplitFractions::new(train, self.val_fraction, self.test_fraction);
        Ok(split(data, fr, self.split_seed, true)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    Focal,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// `linear` or `mlp:W1,W2,...` with hidden widths.
    #[arg(long, default_value = "linear")]
    model: String,
    #[arg(long, value_enum, default_value = "ce")]
    loss: LossArg,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1e-3)]
    l2: f64,
    /// Class-balanced batches.
    #[arg(long)]
    bb: bool,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TeacherArg {
    Oracle,
    Human,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Stratified,
    MinorityOnly,
    Random,
}

#[derive(clap::Args)]
struct CfkdArgs {
    #[arg(long)]
    base_model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1000)]
    subset: usize,
    #[arg(long, value_enum, default_value = "stratified")]
    strategy: StrategyArg,
    #[arg(long, value_enum, default_value = "oracle")]
    teacher: TeacherArg,
    /// Port of the annotation API in human mode; 0 picks a free one.
    #[arg(long, default_value_t = 8080)]
    serve_port: u16,
    /// Console bundle served at `/` in human mode.
    #[arg(long)]
    assets: Option<PathBuf>,
    /// Seconds to wait for human verdicts before finetuning with what arrived.
    #[arg(long, default_value_t = 3600)]
    annotation_timeout: u64,
    #[arg(long, default_value_t = 1)]
    replication: usize,
    /// Retrain from a fresh initialization instead of the base weights.
    #[arg(long)]
    cold_start: bool,
    #[arg(long, default_value_t = 0.5)]
    ch_threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Theory(a) => theory(a),
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Cfkd(a) => cfkd_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Ablation(a) => ablation_cmd(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn theory(a: TheoryArgs) -> Result<ExitCode> {
    let mut rows = Vec::new();
    for &n in &a.n {
        for &k in &a.k {
            let (analytic, empirical, stderr) = match a.quantity {
                Quantity::Alignment => {
                    let est = simulate_alignment(n, a.trials, a.seed)?;
                    (spurious_alignment_probability(n)?, est.estimate, est.std_error)
                }
                Quantity::Prevalence => {
                    let spec = ImbalanceSpec::new(n, k)?;
                    let sim = simulate_prevalence(spec, a.trials, a.seed)?;
                    // Standard error of a sample standard deviation.
                    let se = sim.std_dev / (2.0 * (a.trials as f64 - 1.0)).sqrt();
                    (negative_prevalence_stats(spec).std_dev, sim.std_dev, se)
                }
            };
            rows.push((n, k, analytic, empirical, stderr));
        }
    }
    match a.emit {
        Emit::Csv => {
            println!("n,k,analytic,empirical,stderr");
            for (n, k, an, em, se) in rows {
                println!("{n},{k},{an},{em},{se}");
            }
        }
        Emit::Text => {
            for (n, k, an, em, se) in rows {
                let z = if se > 0.0 { (em - an) / se } else { 0.0 };
                println!("n={n:<4} k={k:<4} analytic={an:<12.6e} empirical={em:<12.6e} stderr={se:.3e} z={z:+.2}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn gen(a: GenArgs) -> Result<ExitCode> {
    let spec = DatasetSpec {
        n: a.n,
        k: a.k,
        dim: a.dim,
        causal_index: a.causal_index,
        spurious_indices: a.spurious,
        prevalence_pos: a.prevalence_pos,
        prevalence_neg: a.prevalence_neg,
        noise_std: a.noise_std,
        feature_mode: match a.mode {
            Mode::Binary => FeatureMode::Binary,
            Mode::Continuous => FeatureMode::Continuous,
        },
        seed: a.seed,
    };
    let data = generate(&spec)?;
    synthdata::store(&data, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let c = &data.group_counts.0;
    log::info!(
        "wrote {} samples to {} (y0c0 {} y0c1 {} y1c0 {} y1c1 {})",
        data.len(),
        a.out.display(),
        c[0][0],
        c[0][1],
        c[1][0],
        c[1][1]
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_model(text: &str, dim: usize, init_seed: u64) -> Result<ModelConfig> {
    let cfg = match text.split_once(':') {
        None if text == "linear" => ModelConfig::linear(dim, init_seed),
        None if text == "mlp" => ModelConfig::mlp(dim, vec![16], init_seed),
        Some(("mlp", widths)) => {
            let hidden = widths
                .split(',')
                .map(|w| w.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .with_context(|| format!("bad hidden widths {widths:?}"))?;
            ModelConfig::mlp(dim, hidden, init_seed)
        }
        _ => bail!("unknown model {text:?}; expected linear, mlp or mlp:W1,W2"),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let data = synthdata::load(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let s = a.split.apply(&data)?;
    let model = parse_model(&a.model, data.dim(), derive_seed(a.seed, "train/init"))?;
    let cfg = TrainConfig {
        loss: match a.loss {
            LossArg::Ce => Loss::Ce,
            LossArg::Focal => Loss::Focal { gamma: a.gamma },
        },
        l2_lambda: a.l2,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        balanced_batches: a.bb,
        max_epochs: a.epochs,
        patience: a.patience,
        seed: derive_seed(a.seed, "train/batches"),
    };
    let f = train(&model, &s.train, &s.val, &cfg)?;
    checkpoint::store(&f, &a.out)?;
    log::info!(
        "trained {} epochs, checkpoint at {}",
        f.training_log.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cfkd_cmd(a: CfkdArgs) -> Result<ExitCode> {
    let base = checkpoint::load(&a.base_model).with_context(|| format!("reading {}", a.base_model.display()))?;
    let data = synthdata::load(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    if data.dim() != base.input_dim() {
        bail!(
            "dataset has {} features but the model expects {}",
            data.dim(),
            base.input_dim()
        );
    }
    let s = a.split.apply(&data)?;
    let cfg = CfkdConfig {
        subset_size: a.subset,
        subset_strategy: match a.strategy {
            StrategyArg::Stratified => SubsetStrategy::Stratified,
            StrategyArg::MinorityOnly => SubsetStrategy::MinorityOnly,
            StrategyArg::Random => SubsetStrategy::Random,
        },
        explainer: default_explainer_for(&base.config),
        teacher_mode: match a.teacher {
            TeacherArg::Oracle => TeacherMode::Oracle,
            TeacherArg::Human => TeacherMode::Human,
        },
        seed: a.seed,
        replication: a.replication,
        warm_start: !a.cold_start,
        ..CfkdConfig::default()
    };
    cfg.validate()?;

    let run = match a.teacher {
        TeacherArg::Oracle => {
            let teacher = OracleTeacher {
                labeler: oracle_label_fn(&data.spec),
            };
            run_cfkd(&base, &s, &cfg.explainer, &teacher, &cfg)?
        }
        TeacherArg::Human => {
            let store = Arc::new(AnnotationStore::new());
            store.set_phase(RunPhase::Idle);
            let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, a.serve_port));
            let server = spawn_server(store.clone(), addr, a.assets.clone())?;
            let teacher = HumanTeacher {
                store: &store,
                timeout: Duration::from_secs(a.annotation_timeout),
            };
            let run = run_cfkd(&base, &s, &cfg.explainer, &teacher, &cfg);
            server.stop();
            run?
        }
    };
    write_run_record(&a.out, &cfg, &base, &run, &data)?;
    let r = &run.report;
    println!(
        "explained {} counterfactuals {} true {} false {} unresolved {}",
        r.explained_count, r.counterfactual_count, r.true_cf_count, r.false_cf_count, r.unresolved_count
    );
    println!("{}", serde_json::to_string(&detect_ch(r, a.ch_threshold))?);
    Ok(ExitCode::SUCCESS)
}

struct Server {
    shutdown: tokio::sync::oneshot::Sender<()>,
    thread: std::thread::JoinHandle<std::io::Result<()>>,
}

impl Server {
    fn stop(self) {
        let _ = self.shutdown.send(());
        match self.thread.join() {
            Ok(Err(e)) => log::warn!("annotation server: {e}"),
            Err(_) => log::warn!("annotation server thread panicked"),
            Ok(Ok(())) => {}
        }
    }
}

/// Runs the annotation API on its own thread and returns once it listens.
fn spawn_server(store: Arc<AnnotationStore>, addr: SocketAddr, assets: Option<PathBuf>) -> Result<Server> {
    let (shutdown, rx) = tokio::sync::oneshot::channel::<()>();
    let (bound_tx, bound_rx) = std::sync::mpsc::channel();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        rt.block_on(cfkd_service::serve(
            store,
            addr,
            assets,
            move |a| {
                let _ = bound_tx.send(a);
            },
            async move {
                let _ = rx.await;
            },
        ))
    });
    match bound_rx.recv() {
        Ok(a) => {
            // Scripts read this line to find the port.
            println!("annotation API listening on http://{a}");
            Ok(Server { shutdown, thread })
        }
        Err(_) => match thread.join() {
            Ok(Err(e)) => Err(e).with_context(|| format!("binding {addr}")),
            _ => bail!("annotation server failed to start"),
        },
    }
}

fn run_cmd(a: RunArgs) -> Result<ExitCode> {
    let cfg = ExperimentConfig::load(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let report = run_grid_to_dir(&cfg, &a.out)?;
    let errors = report.error_rows();
    log::info!(
        "{} rows, {} errors, report in {}",
        report.rows.len(),
        errors,
        a.out.display()
    );
    Ok(if errors > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn ablation_cmd(a: RunArgs) -> Result<ExitCode> {
    let cfg = ExperimentConfig::load(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let ab = run_k_ablation(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("ablation_points.csv"), ab.points_csv()?)?;
    std::fs::write(a.out.join("ablation_trend.csv"), ab.trend_csv()?)?;
    let shaped = ab.trends.iter().filter(|t| t.matches_expected_shape()).count();
    log::info!("{shaped}/{} seeds rise then drop", ab.trends.len());
    Ok(ExitCode::SUCCESS)
}
