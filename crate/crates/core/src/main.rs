use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use manifold_tune::bounds::{generalization_bound, peeling_bound};
use manifold_tune::config::RunConfig;
use manifold_tune::drift::{cap_per_class, drift_sensitivity};
use manifold_tune::io::{drift_csv, history_csv, load_csv_matrix, load_feature_matrix, load_labels, summary_csv};
use manifold_tune::task::generate_task;
use manifold_tune::trainer::{compare_lambda, train, LambdaRow};
use manifold_tune::verify::{self, Suite, VerifyOptions};
use manifold_tune::{Error, FeatureMatrix, Result};

#[derive(Parser)]
#[command(name = "manifold-tune", version, about = "Drift, bound and toy-training tools for sphere-fused prompt tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Off-manifold drift of tuned features against a pretrained cloud.
    Drift(DriftArgs),
    /// Train the prompt maps on the synthetic shortcut task.
    Train(TrainArgs),
    /// Train once per lambda and summarize drift and alignment.
    Compare(CompareArgs),
    /// Evaluate the generalization bound.
    Bound(BoundArgs),
    /// Run randomized property checks.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Binary,
    Csv,
}

#[derive(Args)]
struct DriftArgs {
    #[arg(long)]
    pretrained: PathBuf,
    #[arg(long)]
    tuned: PathBuf,
    /// Principal rank of the reported drift [default: 64]
    #[arg(long)]
    rank: Option<usize>,
    /// Extra ranks for the sensitivity table.
    #[arg(long, value_delimiter = ',')]
    ranks: Option<Vec<usize>>,
    /// Keep at most this many rows per class (needs --labels).
    #[arg(long, requires = "labels")]
    per_class_cap: Option<usize>,
    /// One integer label per line, aligned with the feature rows.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "binary")]
    format: Format,
    /// Write the per-rank table here as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TaskArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    transferable_rank: Option<usize>,
    #[arg(long)]
    shortcut_rank: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    shortcut_strength: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Args, Clone)]
struct TrainerArgs {
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    d_pca_report: Option<usize>,
    #[arg(long)]
    init_std: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    trainer: TrainerArgs,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-epoch loss table here as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    trainer: TrainerArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,12")]
    lambdas: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Average the summary over these seeds (overrides --seed).
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    seeds: Option<Vec<u64>>,
    /// Write the summary table here as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fixed,
    Peeling,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    prompt_dim: Option<usize>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    lipschitz: Option<f64>,
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    empirical_risk: f64,
    /// Observed consistency loss, required in peeling mode.
    #[arg(long, required_if_eq("mode", "peeling"))]
    l_con: Option<f64>,
    #[arg(long, value_enum, default_value = "fixed")]
    mode: Mode,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = "all")]
    suite: Suite,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn set<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn apply_task(config: &mut RunConfig, t: &TaskArgs) {
    let s = &mut config.task;
    set(&mut s.num_classes, t.classes);
    set(&mut s.dim, t.dim);
    set(&mut s.transferable_rank, t.transferable_rank);
    set(&mut s.shortcut_rank, t.shortcut_rank);
    set(&mut s.train_per_class, t.train_per_class);
    set(&mut s.test_per_class, t.test_per_class);
    set(&mut s.shortcut_strength, t.shortcut_strength);
    set(&mut s.noise_std, t.noise_std);
}

fn training_config(task: &TaskArgs, trainer: &TrainerArgs, lambda: Option<f64>, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = load_config(trainer.config.as_deref())?;
    apply_task(&mut config, task);
    let s = &mut config.trainer;
    set(&mut s.tau, trainer.tau);
    set(&mut s.learning_rate, trainer.lr);
    set(&mut s.epochs, trainer.epochs);
    set(&mut s.d_pca_report, trainer.d_pca_report);
    set(&mut s.init_std, trainer.init_std);
    set(&mut s.lambda, lambda);
    set(&mut s.seed, seed);
    config.validate()?;
    Ok(config)
}

fn load_matrix(path: &Path, format: Format) -> Result<FeatureMatrix> {
    match format {
        Format::Binary => load_feature_matrix(path),
        Format::Csv => load_csv_matrix(path),
    }
}

fn cmd_drift(args: DriftArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    set(&mut config.drift.rank, args.rank);
    set(&mut config.drift.ranks, args.ranks);
    set(&mut config.drift.per_class_cap, args.per_class_cap);
    let options = config.drift_options()?;
    let mut z = load_matrix(&args.pretrained, args.format)?;
    let mut h = load_matrix(&args.tuned, args.format)?;
    if !z.same_shape(&h) {
        return Err(Error::ShapeMismatch(format!(
            "pretrained {}x{} vs tuned {}x{}",
            z.n_rows(),
            z.dim(),
            h.n_rows(),
            h.dim()
        )));
    }
    if let Some(cap) = options.per_class_cap {
        let path = args
            .labels
            .as_deref()
            .ok_or_else(|| Error::Config("a per-class cap needs --labels".into()))?;
        let labels = load_labels(path)?;
        if labels.len() != z.n_rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} feature rows",
                labels.len(),
                z.n_rows()
            )));
        }
        let keep = cap_per_class(&labels, cap);
        z = z.select_rows(&keep)?;
        h = h.select_rows(&keep)?;
    }
    let reports = drift_sensitivity(&z, &h, &options.ranks)?;
    if let Some(out) = &args.out {
        std::fs::write(out, drift_csv(&reports))?;
    }
    let main = reports
        .iter()
        .find(|r| r.rank == options.rank)
        .expect("ranks always include the reported rank");
    println!("{:.6}", main.delta);
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = training_config(&args.task, &args.trainer, args.lambda, args.seed)?;
    let trainer = config.trainer_config()?;
    let task = generate_task(&config.task_spec()?, trainer.seed)?;
    let report = train(&task, &trainer)?;
    let mut history = report.history.clone();
    history.push(report.final_loss);
    if let Some(out) = &args.out {
        std::fs::write(out, history_csv(&history))?;
    }
    let row = LambdaRow::from((trainer.lambda, &report.evaluation));
    print!("{}", summary_csv(&[row]));
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let config = training_config(&args.task, &args.trainer, None, args.seed)?;
    let base = config.trainer_config()?;
    let spec = config.task_spec()?;
    if args.lambdas.is_empty() {
        return Err(Error::InvalidParameter("--lambdas is empty".into()));
    }
    for &l in &args.lambdas {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda {l} must be non-negative")));
        }
    }
    let seeds = args.seeds.clone().unwrap_or_else(|| vec![base.seed]);
    let mut sums: Vec<LambdaRow> = args
        .lambdas
        .iter()
        .map(|&lambda| LambdaRow {
            lambda,
            delta: 0.0,
            mean_alignment: 0.0,
            test_accuracy: 0.0,
        })
        .collect();
    for &seed in &seeds {
        let task = generate_task(&spec, seed)?;
        let rows = compare_lambda(&task, &manifold_tune::trainer::TrainerConfig { seed, ..base }, &args.lambdas)?;
        for (acc, r) in sums.iter_mut().zip(rows) {
            acc.delta += r.delta;
            acc.mean_alignment += r.mean_alignment;
            acc.test_accuracy += r.test_accuracy;
        }
    }
    let k = seeds.len() as f64;
    for r in &mut sums {
        r.delta /= k;
        r.mean_alignment /= k;
        r.test_accuracy /= k;
    }
    let csv = summary_csv(&sums);
    print!("{csv}");
    if let Some(out) = &args.out {
        std::fs::write(out, csv)?;
    }
    Ok(())
}

fn cmd_bound(args: BoundArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    let b = &mut config.bound;
    set(&mut b.tau, args.tau);
    set(&mut b.num_classes, args.classes);
    set(&mut b.num_samples, args.samples);
    set(&mut b.prompt_dim, args.prompt_dim);
    set(&mut b.param_radius, args.radius);
    set(&mut b.lipschitz, args.lipschitz);
    set(&mut b.confidence, args.confidence);
    set(&mut b.epsilon, args.epsilon);
    let params = config.bound_params()?;
    match args.mode {
        Mode::Fixed => {
            let g = generalization_bound(args.empirical_risk, &params)?;
            println!(
                "B={:.6}, rademacher={:.6}, deviation={:.6}, bound={:.6}",
                g.loss_bound, g.rademacher, g.deviation, g.bound
            );
        }
        Mode::Peeling => {
            let l_con = args.l_con.expect("clap enforces --l-con in peeling mode");
            let p = peeling_bound(args.empirical_risk, l_con, &params)?;
            println!("H={}", p.depth);
            println!(
                "B={:.6}, rademacher={:.6}, deviation={:.6}, bound={:.6}",
                p.loss_bound, p.complexity, p.deviation, p.bound
            );
        }
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<bool> {
    let options = VerifyOptions {
        trials: args.trials,
        seed: args.seed,
        ..VerifyOptions::default()
    };
    let report = verify::run(args.suite, &options);
    for p in &report.properties {
        if p.ok() {
            println!("{p}");
        }
    }
    for p in report.failed() {
        eprintln!("{p}");
    }
    Ok(report.all_passed())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first: Vec<&str> = text.lines().take_while(|l| !l.trim().is_empty()).map(str::trim).collect();
            eprintln!("{}", first.join(" "));
            return ExitCode::from(2);
        }
    };
    let outcome = match cli.command {
        Command::Drift(a) => cmd_drift(a).map(|()| true),
        Command::Train(a) => cmd_train(a).map(|()| true),
        Command::Compare(a) => cmd_compare(a).map(|()| true),
        Command::Bound(a) => cmd_bound(a).map(|()| true),
        Command::Verify(a) => cmd_verify(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
