use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use restad::ablate::{base_config as grid_base, render_aggregates, run_grid, to_csv};
use restad::config::{AblationGrid, DataSource, InitMode, RunConfig};
use restad::error::{Error, Result};
use restad::io;
use restad::pipeline::{
    evaluate_criteria, load_source, model_label, prepare, raw_scores, render_table, train,
};
use restad_core::data::SynthSpec;
use restad_core::init::GammaInitMode;
use restad_core::score::Criterion;

#[derive(Parser)]
#[command(
    name = "restad",
    version,
    about = "Transformer reconstruction with an RBF similarity layer for time-series anomaly detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark as train.csv, test.csv and test_labels.csv.
    Synth(SynthArgs),
    /// Train a model and write checkpoint.json, train_log.jsonl and run_config.toml.
    Train(TrainArgs),
    /// Score a test split with a checkpoint and write reports and score traces.
    Eval(EvalArgs),
    /// Run an ablation grid and write ablation.csv.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML generator spec; the built-in benchmark when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GammaModeArg {
    Reciprocal,
    LogConsistent,
}

/// Flags shared by `train` and `eval`; each overrides the config file.
#[derive(Args)]
struct RunArgs {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with train.csv, test.csv and test_labels.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum)]
    init: Option<InitMode>,
    #[arg(long, value_enum)]
    gamma_mode: Option<GammaModeArg>,
    #[arg(long, action = clap::ArgAction::Set)]
    rbf_enabled: Option<bool>,
    #[arg(long)]
    rbf_position: Option<usize>,
    #[arg(long)]
    n_centers: Option<usize>,
    #[arg(long)]
    window_len: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated list of r_only, s_only, r_plus_s, r_times_s.
    #[arg(long, value_delimiter = ',')]
    criterion: Vec<String>,
    /// Fraction of test points flagged by the threshold.
    #[arg(long)]
    ratio: Option<f64>,
    /// Largest label buffer of the VUS surfaces.
    #[arg(long)]
    max_buffer: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    grid: PathBuf,
    /// Worker threads; results are identical for any value.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn base_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(p) => io::read_toml(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &args.data {
        cfg.data = DataSource::CsvDir(dir.clone());
    }
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => io::read_toml(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let raw = restad_core::data::generate_synthetic(&spec)?;
    io::write_dataset(&a.out, &raw)?;
    println!(
        "wrote {} ({} train, {} test rows, {} features, {} anomalous points)",
        a.out.display(),
        raw.train.len,
        raw.test.len,
        raw.dim(),
        raw.test_labels.iter().filter(|&&l| l == 1).count()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = base_config(&a.run)?;
    let (m, t) = (&mut cfg.model, &mut cfg.train);
    macro_rules! set {
        ($($flag:expr => $field:expr),* $(,)?) => {
            $(if let Some(v) = $flag { $field = v; })*
        };
    }
    set! {
        a.init => cfg.init,
        a.rbf_enabled => m.rbf_enabled,
        a.rbf_position => m.rbf_position,
        a.n_centers => m.n_centers,
        a.window_len => m.window_len,
        a.d_model => m.d_model,
        a.ffn_dim => m.ffn_dim,
        a.n_heads => m.n_heads,
        a.n_layers => m.n_layers,
        a.dropout => m.dropout,
        a.epochs => t.epochs,
        a.learning_rate => t.learning_rate,
        a.batch_size => t.batch_size,
    }
    if a.grad_clip.is_some() {
        t.grad_clip = a.grad_clip;
    }
    if let Some(g) = a.gamma_mode {
        cfg.gamma_mode = match g {
            GammaModeArg::Reciprocal => GammaInitMode::Reciprocal,
            GammaModeArg::LogConsistent => GammaInitMode::LogConsistent,
        };
    }
    if !cfg.model.rbf_enabled {
        // the vanilla baseline has nothing to initialize and no similarity
        cfg.init = InitMode::Random;
        if cfg.criterion.needs_similarity() {
            cfg.criterion = Criterion::ROnly;
        }
    }
    let cfg = cfg.resolved()?;
    if a.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let data = prepare(&load_source(&cfg.data)?, cfg.model.window_len)?;
    let trained = train(&cfg, &data)?;
    let out = &cfg.out_dir;
    io::save_checkpoint(&out.join("checkpoint.json"), &trained.model)?;
    io::write_jsonl(&out.join("train_log.jsonl"), &trained.log_records())?;
    io::write_atomic(&out.join("run_config.toml"), cfg.to_toml()?.as_bytes())?;
    for (phase, log) in &trained.phases {
        if let Some(last) = log.epochs.last() {
            println!(
                "{phase}: {} epochs, final loss {:.6}",
                log.epochs.len(),
                last.mean_loss
            );
        }
    }
    if let Some(g) = trained.gamma_init {
        println!("initial gamma {g:.6}");
    }
    println!("wrote {}", out.join("checkpoint.json").display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut cfg = base_config(&a.run)?;
    if let Some(r) = a.ratio {
        cfg.anomaly_ratio = r;
    }
    if let Some(l) = a.max_buffer {
        cfg.max_buffer = l;
    }
    let model = io::load_checkpoint(&a.checkpoint)?;
    let criteria = if a.criterion.is_empty() {
        let default = if model.rbf.is_some() {
            cfg.criterion
        } else {
            Criterion::ROnly
        };
        vec![default]
    } else {
        a.criterion
            .iter()
            .map(|c| Criterion::parse(c.trim()))
            .collect::<restad_core::Result<_>>()?
    };
    // the checkpoint decides the architecture, so only the run-level fields
    // are validated here
    cfg.model = model.config().clone();
    cfg.criterion = criteria[0];
    if model.rbf.is_none() {
        cfg.init = InitMode::Random;
    }
    let cfg = cfg.resolved()?;
    let data = prepare(&load_source(&cfg.data)?, model.config().window_len)?;
    let raw = raw_scores(&model, &data.test, cfg.train.batch_size)?;
    let label = model_label(&model);
    let evals = evaluate_criteria(
        &raw,
        &data.labels,
        &criteria,
        cfg.anomaly_ratio,
        cfg.max_buffer,
        &data.name,
        &label,
    )?;
    let out = &cfg.out_dir;
    for e in &evals {
        let c = e.report.criterion;
        io::write_json(&out.join(format!("report_{c}.json")), &e.report)?;
        io::write_trace_csv(
            &out.join(format!("trace_{c}.csv")),
            &e.trace,
            Some(&data.labels),
        )?;
    }
    let rows: Vec<(String, _)> = evals
        .iter()
        .map(|e| (format!("{label} {}", e.report.criterion), &e.report.metrics))
        .collect();
    let table = render_table(&rows);
    io::write_atomic(&out.join("report.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let grid: AblationGrid = io::read_toml(&a.grid)?;
    if a.parallel == 0 {
        return Err(Error::Usage("--parallel must be at least 1".into()));
    }
    let run = grid_base(&grid)?;
    let data = prepare(&load_source(&run.data)?, run.model.window_len)?;
    let result = run_grid(&grid, &data, a.parallel)?;
    let out: &Path = a.out.as_deref().unwrap_or(&run.out_dir);
    let path = out.join("ablation.csv");
    io::write_atomic(&path, to_csv(&result)?.as_bytes())?;
    print!("{}", render_aggregates(&result));
    let failed = result.cells.iter().filter(|c| c.outcome.is_err()).count();
    if failed > 0 {
        eprintln!(
            "{failed} of {} cells failed; see the error column",
            result.cells.len()
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
