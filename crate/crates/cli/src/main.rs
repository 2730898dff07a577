//! `scaffold`: ingest voxel data, train, sample, evaluate.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use scaffold_core::diffusion::LossScope;
use scaffold_core::error::Error;
use scaffold_core::eval::{
    category_histogram, evaluate_nll, generate_batch, ExportFormats, GenerateOptions,
    DEFAULT_MC_DRAWS,
};
use scaffold_core::par::Execution;
use scaffold_core::synthetic::{toy_dataset, CategoryRule};
use scaffold_core::train::{self, dataset_sequences, read_trained, TrainConfig};
use scaffold_core::voxel::{
    ingest_log, read_dataset, read_occupancy_json, sparsity_stats, write_dataset, OccupancyMap,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "scaffold", version, about = "Occupancy-conditioned voxel diffusion")]
struct Cli {
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a placement log (JSON lines) into a dataset directory.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        dim: u32,
        /// Sequence length; houses with more blocks are dropped.
        #[arg(long, default_value_t = 1024)]
        max_blocks: usize,
    },
    /// Train from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate structures for an occupancy map.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Occupancy JSON {"dim":D,"occupied":[[x,y,z],...]}.
        #[arg(long, conflicts_with = "from_data", required_unless_present = "from_data")]
        occupancy: Option<PathBuf>,
        /// Use the footprint of structure N of --data.
        #[arg(long, requires = "data")]
        from_data: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of samples, with seeds seed, seed+1, ...
        #[arg(long, default_value_t = 1)]
        n: u64,
        /// Also write the unmasking trace as NDJSON.
        #[arg(long)]
        trace: bool,
        /// Recompute the denoiser at every step.
        #[arg(long)]
        no_cache: bool,
        /// Decode left to right with a next-token checkpoint.
        #[arg(long)]
        ar: bool,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Held-out NLL and perplexity.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MC_DRAWS)]
        mc_draws: usize,
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use raw weights instead of the EMA copy.
        #[arg(long)]
        no_ema: bool,
    },
    /// Sparsity and category statistics of a dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write a synthetic dataset whose categories follow a position rule.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        dim: u32,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long, value_enum, default_value_t = Rule::Parity)]
        rule: Rule,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Binary,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    All,
    Active,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    Parity,
    Stripes,
}

fn print_json(v: &serde_json::Value) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn ingest(input: &Path, out: &Path, dim: u32, max_blocks: usize) -> anyhow::Result<()> {
    let f = File::open(input).map_err(|e| Error::IoPath { path: input.into(), source: e })?;
    let got = ingest_log(BufReader::new(f), dim, max_blocks)?;
    for e in got.line_errors.iter().take(10) {
        log::warn!("line {}: {}", e.line, e.message);
    }
    if got.dataset.grids.is_empty() {
        return Err(Error::Empty("no structure survived filtering").into());
    }
    write_dataset(out, &got.dataset)?;
    let stats = sparsity_stats(&got.dataset.grids, dim)?;
    print_json(&json!({
        "houses": got.houses,
        "accepted_lines": got.accepted_lines,
        "rejected_lines": got.line_errors.len(),
        "retained": got.dataset.grids.len(),
        "rejected_empty": got.rejected_empty,
        "rejected_too_many_blocks": got.rejected_too_many,
        "rejected_extent": got.rejected_extent,
        "categories": got.dataset.vocab.n_blocks(),
        "mean_background": stats.mean_background,
    }))
}

fn load_occupancy(path: &Path) -> anyhow::Result<OccupancyMap> {
    let f = File::open(path).map_err(|e| Error::IoPath { path: path.into(), source: e })?;
    Ok(read_occupancy_json(BufReader::new(f))?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.command {
        Command::Ingest { input, out, dim, max_blocks } => ingest(&input, &out, dim, max_blocks),
        Command::Train { config, resume } => {
            let cfg = TrainConfig::from_file(&config)?;
            let outcome = train::run(&cfg, resume.as_deref(), exec)?;
            let last = outcome.curve.last();
            print_json(&json!({
                "checkpoint": outcome.checkpoint,
                "steps_run": outcome.curve.len(),
                "final_step": last.map(|r| r.step),
                "final_loss": last.map(|r| r.loss),
            }))
        }
        Command::Sample {
            ckpt,
            occupancy,
            from_data,
            data,
            steps,
            seed,
            n,
            trace,
            no_cache,
            ar,
            temperature,
            format,
            out,
        } => {
            let model = read_trained(&ckpt, true)?;
            if ar != model.is_autoregressive() {
                bail!(Usage(if ar {
                    "--ar needs a checkpoint trained with train.objective=autoregressive".into()
                } else {
                    "this checkpoint is autoregressive; pass --ar".into()
                }));
            }
            let (label, occ) = match (occupancy, from_data) {
                (Some(p), _) => {
                    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    (stem, load_occupancy(&p)?)
                }
                (None, Some(i)) => {
                    let ds = read_dataset(data.as_deref().expect("clap enforces --data"))?;
                    let g = ds
                        .grids
                        .get(i)
                        .with_context(|| format!("dataset has {} structures", ds.grids.len()))
                        .map_err(|e| Usage(e.to_string()))?;
                    (format!("data{i}"), g.occupancy())
                }
                (None, None) => unreachable!("clap requires one source"),
            };
            let opts = GenerateOptions {
                steps,
                cached: !no_cache,
                autoregressive: ar,
                temperature,
                trace,
                formats: ExportFormats {
                    json: matches!(format, Format::Json | Format::Both),
                    binary: matches!(format, Format::Binary | Format::Both),
                },
            };
            let seeds: Vec<u64> = (0..n).map(|i| seed + i).collect();
            let results = generate_batch(&model, &[(label, occ)], &seeds, &opts, &out, exec)?;
            let mut report = Vec::new();
            let mut first_err = None;
            for r in results {
                match r.result {
                    Ok((grid, files)) => report.push(json!({"seed": r.seed, "k": grid.k(), "files": files})),
                    Err(e) => {
                        log::error!("seed {}: {e}", r.seed);
                        report.push(json!({"seed": r.seed, "error": e.to_string()}));
                        first_err.get_or_insert(e);
                    }
                }
            }
            print_json(&json!(report))?;
            match first_err {
                Some(e) => Err(e.into()),
                None => Ok(()),
            }
        }
        Command::Eval { ckpt, data, mc_draws, scope, seed, no_ema } => {
            let model = read_trained(&ckpt, !no_ema)?;
            let ds = read_dataset(&data)?;
            let seqs = dataset_sequences(&ds)?;
            let scope = match scope {
                Scope::All => LossScope::AllSlots,
                Scope::Active => LossScope::ActiveSlots,
            };
            let report = evaluate_nll(&seqs, &model, mc_draws, scope, seed, exec)?;
            print_json(&serde_json::to_value(report)?)
        }
        Command::Stats { data } => {
            let ds = read_dataset(&data)?;
            let stats = sparsity_stats(&ds.grids, ds.dim)?;
            let cats = category_histogram(&ds.grids)?;
            print_json(&json!({
                "dim": ds.dim,
                "seq_len": ds.seq_len,
                "structures": stats.structures,
                "mean_background": stats.mean_background,
                "mean_k": stats.mean_k,
                "categories": ds.vocab.n_blocks(),
                "collapse_score": cats.collapse_score,
                "category_counts": cats.counts,
            }))
        }
        Command::Toy { out, n, dim, seq_len, rule, seed } => {
            let rule = match rule {
                Rule::Parity => CategoryRule::Parity,
                Rule::Stripes => CategoryRule::Stripes,
            };
            let ds = toy_dataset(n, dim, seq_len, rule, seed)?;
            write_dataset(&out, &ds)?;
            print_json(&json!({"structures": ds.grids.len(), "dim": dim, "seq_len": seq_len}))
        }
    }
}

/// A usage problem discovered after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Numeric { .. } | Error::NonFiniteGradient { .. }) => EXIT_NUMERIC,
        Some(Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
