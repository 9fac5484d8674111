mod data;
mod error;
mod evaluate;
mod inspect;
mod run;

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arnet_core::config::{parse_override, ExperimentConfig};
use arnet_core::datagen::{generate, write_corpus, GenSpec};
use arnet_core::diagnostics::TraceMode;
use arnet_core::gradsuite::{run_scope, Scope};
use arnet_core::seq2seq::corpus::prefix_paths;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::data::resolve;
use crate::error::{usage, CliError, CliResult};
use crate::inspect::{DiagnoseArgs, EvalArgs, ExportArgs};
use crate::run::Sink;

#[derive(Parser)]
#[command(name = "arnet", version, about = "Train and inspect encoder-decoder models with an auto-reconstructor regularizer")]
struct Cli {
    /// Relative data paths are resolved against this directory.
    #[arg(long, global = true, env = "ARNET_DATA_ROOT")]
    data_root: Option<PathBuf>,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic parallel corpus as `{out}.src` / `{out}.tgt`.
    GenData(GenDataArgs),
    /// Train every configured seed; one JSON line per epoch on stdout.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Eval(EvalCmd),
    /// Compare training-mode and inference-mode final hidden states.
    Diagnose(DiagnoseCmd),
    /// Write final hidden states as TSV.
    ExportEmbeddings(ExportCmd),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Train stage 1 once per seed and stage 2 for each lambda.
    SweepLambda(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Copy,
    SyntheticCaption,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Distinct tokens (copy) or variable names (synthetic-caption).
    #[arg(long)]
    vocab: Option<usize>,
    /// Longest source in tokens.
    #[arg(long)]
    max_len: Option<usize>,
    /// Output prefix.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from `latest.ckpt` in each seed directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated lambda values; defaults to `lambda_grid`.
    #[arg(long)]
    grid: Option<String>,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Data prefix: a text corpus or MNIST IDX files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "beam_size")]
    greedy: bool,
    /// Beam width; defaults to the checkpoint's `beam_size`.
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Use the first N examples (0 = all).
    #[arg(long, default_value_t = 0)]
    limit: usize,
    /// Override the pixel order used for pMNIST data.
    #[arg(long)]
    permutation_seed: Option<u64>,
    /// Write decoded captions here, one per line.
    #[arg(long)]
    captions: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    limit: usize,
    /// Write both trace sets as TSV.
    #[arg(long)]
    tsv: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Training,
    Inference,
    Both,
}

#[derive(Args)]
struct ExportCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    limit: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// lstm, attention, arnet, seq2seq, pmnist or all.
    #[arg(long, default_value = "all")]
    scope: String,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn print_json(v: &Value) -> CliResult<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "{v}")?;
    Ok(())
}

fn write_report(v: &Value, path: Option<&Path>) -> CliResult<()> {
    if let Some(p) = path {
        std::fs::write(p, serde_json::to_string_pretty(v)? + "\n")
            .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    }
    print_json(v)
}

fn gen_data(a: &GenDataArgs, root: Option<&Path>) -> CliResult<()> {
    let mut spec = match a.kind {
        KindArg::Copy => GenSpec::copy(a.size, a.seed),
        KindArg::SyntheticCaption => GenSpec::synthetic_caption(a.size, a.seed),
    };
    if let Some(v) = a.vocab {
        spec.vocab = v;
    }
    if let Some(m) = a.max_len {
        spec.max_len = m;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let out = resolve(root, &a.out);
    let corpus = generate(&spec)?;
    write_corpus(&corpus, &out)?;
    let (src, tgt) = prefix_paths(&out);
    print_json(&json!({
        "kind": spec.kind.as_str(),
        "size": spec.size,
        "vocab": spec.vocab,
        "max_len": spec.max_len,
        "seed": spec.seed,
        "src": src.display().to_string(),
        "tgt": tgt.display().to_string(),
    }))
}

fn experiment(a: &ConfigArgs, root: Option<&Path>) -> CliResult<ExperimentConfig> {
    let mut overrides = Vec::new();
    if let Some(d) = &a.output_dir {
        overrides.push(("output_dir".to_string(), d.display().to_string()));
    }
    if let Some(s) = &a.seeds {
        overrides.push(("seeds".to_string(), s.clone()));
    }
    for s in &a.set {
        overrides.push(parse_override(s)?);
    }
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(&resolve(root, p), &overrides)?,
        None => ExperimentConfig::from_text("", &overrides)?,
    };
    if let Some(r) = root {
        cfg.resolve_data(r);
    }
    Ok(cfg)
}

fn parse_grid(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("bad lambda {x:?} in --grid")))
        })
        .collect()
}

fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    if a.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    if !(a.tolerance > 0.0) {
        return Err(usage("--tolerance must be positive"));
    }
    let scopes: Vec<Scope> = if a.scope == "all" {
        Scope::ALL.to_vec()
    } else {
        a.scope
            .split(',')
            .map(|s| s.trim().parse::<Scope>().map_err(|e| usage(e.to_string())))
            .collect::<CliResult<_>>()?
    };
    let mut reports = Vec::new();
    for s in scopes {
        reports.push(run_scope(s, a.trials, a.tolerance, a.seed)?);
    }
    let passed = reports.iter().all(|r| r.passed());
    let scopes: Vec<Value> = reports
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).expect("report serializes");
            v["passed"] = json!(r.passed());
            v["max_rel_error"] = json!(r.max_rel_error());
            v
        })
        .collect();
    print_json(&json!({
        "passed": passed,
        "trials": a.trials,
        "tolerance": a.tolerance,
        "seed": a.seed,
        "scopes": scopes,
    }))?;
    if passed {
        Ok(())
    } else {
        let bad: Vec<String> = reports
            .iter()
            .filter(|r| !r.passed())
            .flat_map(|r| {
                r.tensors
                    .iter()
                    .filter(|t| !(t.max_rel_error <= a.tolerance))
                    .map(move |t| format!("{}:{} ({:.3e})", r.scope, t.name, t.max_rel_error))
            })
            .collect();
        Err(CliError::Check(format!("gradient mismatch in {}", bad.join(", "))))
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let root = cli.data_root.as_deref();
    let stdout = &mut io::stdout();
    let mut sink = Sink {
        out: stdout,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::GenData(a) => gen_data(&a, root),
        Command::Train(a) => {
            let cfg = experiment(&a.config, root)?;
            let results = run::train(&cfg, a.resume, &mut sink)?;
            for r in results {
                sink.note(format!("wrote {}", r.display()));
            }
            Ok(())
        }
        Command::SweepLambda(a) => {
            let cfg = experiment(&a.config, root)?;
            let grid = match &a.grid {
                Some(g) => parse_grid(g)?,
                None => cfg.lambda_grid.clone(),
            };
            run::sweep(&cfg, &grid, &mut sink)?;
            Ok(())
        }
        Command::Eval(a) => {
            let args = EvalArgs {
                checkpoint: resolve(root, &a.checkpoint),
                data: resolve(root, &a.data),
                greedy: a.greedy,
                beam_size: a.beam_size,
                max_len: a.max_len,
                limit: a.limit,
                permutation_seed: a.permutation_seed,
                captions: a.captions,
            };
            write_report(&inspect::eval(&args)?, a.output.as_deref())
        }
        Command::Diagnose(a) => {
            let args = DiagnoseArgs {
                checkpoint: resolve(root, &a.checkpoint),
                data: resolve(root, &a.data),
                max_len: a.max_len,
                limit: a.limit,
                tsv: a.tsv,
            };
            write_report(&inspect::diagnose(&args)?, a.output.as_deref())
        }
        Command::ExportEmbeddings(a) => {
            let args = ExportArgs {
                checkpoint: resolve(root, &a.checkpoint),
                data: resolve(root, &a.data),
                out: a.out,
                mode: match a.mode {
                    ModeArg::Training => Some(TraceMode::Training),
                    ModeArg::Inference => Some(TraceMode::Inference),
                    ModeArg::Both => None,
                },
                max_len: a.max_len,
                limit: a.limit,
            };
            print_json(&inspect::export(&args)?)
        }
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("arnet: {e}");
            e.exit_code()
        }
    }
}
