mod plot;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use negolab_arena::{serve, ArenaConfig};
use negolab_core::acquisition::AcquisitionFunction;
use negolab_core::corpus::{corpus_stats, filter_by_quality, generate_synthetic_corpus, load_corpus, save_corpus, StyleMixture};
use negolab_core::experiment::{
    read_trace, run_experiment, run_sweep, ExperimentConfig, ExperimentError, Regime, SweepAxis, TRACE_FILE,
};
use negolab_core::metrics::{evaluate_pairing, evaluation_contexts, EvalSpec, RolloutMode};
use negolab_core::model::PolicyModel;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn config(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Parser)]
#[command(name = "negolab", version, about = "Train and evaluate negotiation agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dialogue corpus.
    GenCorpus(GenCorpus),
    /// Run one experiment end to end.
    Train(Train),
    /// Run one experiment per value of a parameter.
    Sweep(Sweep),
    /// Evaluate a saved learner against a saved partner.
    Eval(Eval),
    /// Summary statistics of a corpus file.
    Stats(Stats),
    /// Plot metric traces as a four-panel SVG.
    Plot(Plot),
    /// Serve the human evaluation arena.
    Serve(Serve),
}

#[derive(Args)]
struct GenCorpus {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    size: usize,
    /// Style weights: compromiser,quick-agreer,repeater.
    #[arg(long, default_value = "0.6,0.25,0.15")]
    mixture: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write the subset below this unique-act ratio.
    #[arg(long, requires = "low_out")]
    threshold: Option<f64>,
    #[arg(long)]
    low_out: Option<PathBuf>,
}

/// Flags that override fields of the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// e.g. sl, rl, rl+sl(4), ta(likelihood,second), rl-random-init,
    /// ta-random-init, rl-engineered(pareto-bonus).
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    corpus_size: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Annotation budget per epoch.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    rl_learning_rate: Option<f64>,
    #[arg(long)]
    eval_contexts: Option<usize>,
    #[arg(long)]
    eval_seeds: Option<usize>,
}

impl Overrides {
    fn apply(&self, mut c: ExperimentConfig) -> Result<ExperimentConfig, CliError> {
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.regime {
            c.regime = Regime::parse(v)?;
        }
        if let Some(v) = &self.name {
            c.name = Some(v.clone());
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.episodes_per_epoch {
            c.episodes_per_epoch = v;
        }
        if let Some(v) = self.hidden {
            c.model.hidden = v;
        }
        if let Some(v) = self.corpus_size {
            c.corpus.size = v;
        }
        if let Some(v) = self.threshold {
            c.corpus.threshold = v;
        }
        if let Some(v) = self.k {
            c.acquisition.k = v;
        }
        if let Some(v) = self.rl_learning_rate {
            c.rl.learning_rate = v;
        }
        if let Some(v) = self.eval_contexts {
            c.eval.contexts = v;
        }
        if let Some(v) = self.eval_seeds {
            c.eval.seeds = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    let base = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    overrides.apply(base)
}

#[derive(Args)]
struct Train {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct Sweep {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Parameter and values, e.g. threshold=0.5,0.65,0.78 or
    /// function=likelihood,entropy,margin,random.
    #[arg(long)]
    axis: String,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    learner: PathBuf,
    #[arg(long)]
    partner: PathBuf,
    #[arg(long, default_value_t = 200)]
    contexts: usize,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = EvalSpec::default().context_seed)]
    context_seed: u64,
    /// Take the most likely act instead of sampling.
    #[arg(long)]
    greedy: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-seed rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct Stats {
    corpus: PathBuf,
    /// Also report the subset below this unique-act ratio.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct Plot {
    /// Trace CSV files or run directories.
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    /// Legend labels, in the same order; file names by default.
    #[arg(long)]
    label: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Serve {
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
}

fn parse_mixture(text: &str) -> Result<StyleMixture, CliError> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| config(format!("mixture `{text}` must be three comma-separated numbers")))?;
    let [compromiser, quick_agreer, repeater] = parts[..] else {
        return Err(config(format!("mixture `{text}` must have three weights")));
    };
    let mixture = StyleMixture { compromiser, quick_agreer, repeater };
    mixture.validate().map_err(config)?;
    Ok(mixture)
}

fn parse_axis(text: &str) -> Result<SweepAxis, CliError> {
    let (name, values) = text
        .split_once('=')
        .ok_or_else(|| config(format!("axis `{text}` must look like name=v1,v2")))?;
    let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let bad = |v: &str| config(format!("bad value `{v}` for axis {name}"));
    let axis = match name.trim() {
        "seed" => SweepAxis::Seed(items.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_, _>>()?),
        "threshold" => {
            SweepAxis::Threshold(items.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_, _>>()?)
        }
        "period" => SweepAxis::Period(items.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_, _>>()?),
        "function" => SweepAxis::Function(
            items
                .iter()
                .map(|v| AcquisitionFunction::ALL.into_iter().find(|f| f.name() == *v).ok_or_else(|| bad(v)))
                .collect::<Result<_, _>>()?,
        ),
        // Regime labels contain commas, so they are separated by ';'.
        "regime" => SweepAxis::Regime(
            values.split(';').map(str::trim).filter(|s| !s.is_empty()).map(Regime::parse).collect::<Result<_, _>>()?,
        ),
        other => return Err(config(format!("unknown sweep axis `{other}`"))),
    };
    if axis.is_empty() {
        return Err(config("sweep axis has no values"));
    }
    Ok(axis)
}

fn trace_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(TRACE_FILE)
    } else {
        path.to_path_buf()
    }
}

fn gen_corpus(args: GenCorpus) -> Result<(), CliError> {
    let mixture = parse_mixture(&args.mixture)?;
    if args.size == 0 {
        return Err(config("corpus size must be positive"));
    }
    let corpus = generate_synthetic_corpus(args.seed, args.size, &mixture).map_err(runtime)?;
    save_corpus(&corpus, &args.out).map_err(runtime)?;
    println!("wrote {} dialogues to {}", corpus.len(), args.out.display());
    if let (Some(threshold), Some(low_out)) = (args.threshold, args.low_out) {
        let low = filter_by_quality(&corpus, threshold).map_err(config)?;
        save_corpus(&low, &low_out).map_err(runtime)?;
        println!("wrote {} dialogues below {threshold} to {}", low.len(), low_out.display());
    }
    Ok(())
}

fn train(args: Train) -> Result<(), CliError> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let (dir, result) = run_experiment(&cfg, &args.out)?;
    let last = result.final_row();
    println!(
        "{}: advantage {:.3} agreement {:.3} pareto {} novelty {} -> {}",
        cfg.label(),
        last.advantage,
        last.agreement,
        last.pareto.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into()),
        last.novelty.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into()),
        dir.display()
    );
    Ok(())
}

fn sweep(args: Sweep) -> Result<(), CliError> {
    let base = load_config(args.config.as_deref(), &args.overrides)?;
    let axis = parse_axis(&args.axis)?;
    let rows = run_sweep(&base, &axis, args.parallelism, &args.out)?;
    let mut series = Vec::new();
    for ((label, cfg), row) in axis.expand(&base).into_iter().zip(&rows) {
        println!("{label}: {}", row.status);
        if row.result.is_some() {
            let trace = read_trace(args.out.join(cfg.label()).join(TRACE_FILE))?;
            series.push((label, trace));
        }
    }
    if !series.is_empty() {
        plot::plot_traces(&series, &args.out.join("comparison.svg")).map_err(runtime)?;
    }
    let failed = rows.iter().filter(|r| r.result.is_none()).count();
    if failed > 0 {
        return Err(runtime(format!("{failed} of {} sweep runs failed", rows.len())));
    }
    Ok(())
}

fn eval(args: Eval) -> Result<(), CliError> {
    let learner = PolicyModel::load(&args.learner).map_err(config)?;
    let partner = PolicyModel::load(&args.partner).map_err(config)?;
    if args.contexts == 0 || args.seeds == 0 {
        return Err(config("contexts and seeds must be positive"));
    }
    let spec = EvalSpec {
        contexts: args.contexts,
        seeds: args.seeds,
        mode: if args.greedy { RolloutMode::Greedy } else { RolloutMode::Sampled },
        context_seed: args.context_seed,
        ..EvalSpec::default()
    };
    let contexts = evaluation_contexts(spec.context_seed, spec.contexts);
    let seeds: Vec<u64> = (0..spec.seeds as u64).collect();
    let report = evaluate_pairing(&learner, &partner, &contexts, &seeds, &spec).map_err(runtime)?;
    match args.out {
        Some(path) => std::fs::write(path, report.to_json()).map_err(runtime)?,
        None => println!("{}", report.to_json()),
    }
    if let Some(path) = args.csv {
        report.write_csv(std::fs::File::create(path).map_err(runtime)?).map_err(runtime)?;
    }
    Ok(())
}

fn stats(args: Stats) -> Result<(), CliError> {
    let corpus = load_corpus(&args.corpus).map_err(config)?;
    let full = corpus_stats(&corpus).map_err(runtime)?;
    let mut out = serde_json::json!({ "corpus": full });
    if let Some(threshold) = args.threshold {
        let low = filter_by_quality(&corpus, threshold).map_err(config)?;
        out["filtered"] = serde_json::to_value(corpus_stats(&low).map_err(runtime)?).map_err(runtime)?;
        out["threshold"] = threshold.into();
    }
    println!("{}", serde_json::to_string_pretty(&out).map_err(runtime)?);
    Ok(())
}

fn plot_cmd(args: Plot) -> Result<(), CliError> {
    if !args.label.is_empty() && args.label.len() != args.traces.len() {
        return Err(config("give one --label per trace or none"));
    }
    let mut series = Vec::new();
    for (i, path) in args.traces.iter().enumerate() {
        let file = trace_path(path);
        let rows = read_trace(&file).map_err(|e| config(format!("{}: {e}", file.display())))?;
        let label = args.label.get(i).cloned().unwrap_or_else(|| {
            let named = if path.is_dir() { path } else { path.parent().unwrap_or(path) };
            named.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| file.display().to_string())
        });
        series.push((label, rows));
    }
    plot::plot_traces(&series, &args.out).map_err(runtime)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn serve_cmd(args: Serve) -> Result<(), CliError> {
    let runtime_handle = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(runtime)?;
    let cfg = ArenaConfig { listen: args.listen, models: args.models, data: args.data };
    runtime_handle.block_on(serve(cfg)).map_err(|e| match e {
        negolab_arena::ArenaError::Registry(_) => config(e),
        other => runtime(other),
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::Eval(a) => eval(a),
        Command::Stats(a) => stats(a),
        Command::Plot(a) => plot_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
