//! Command-line harness: scaling benchmarks, fine-tuning runs, the
//! variant-by-depth grid, oracle and gradient-check suites, and CSV
//! merging for plots.
//!
//! Every flag can also come from a JSON config file (`--config`); explicit
//! flags win over the file, which wins over built-in defaults. Exit codes:
//! 0 success, 1 any failure (including a failed verification suite),
//! 2 usage errors.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use summix::bench::{bench_to_csv, fit_loglog_slope, run_scaling_bench, BenchSpec};
use summix::checkpoint::save_checkpoint;
use summix::data::{load_split, make_synthetic_dataset, save_split, DataSpec, Dataset};
use summix::encoder::{
    build_pretrained_stack, warm_up, ReplacementPlan, ReplacementVariant, StackConfig,
    WarmupConfig,
};
use summix::mixing::{BoundaryMode, MixingConfig, MixingVariant};
use summix::suites::{gradcheck_suite, oracle_ctc_suite, oracle_windowed_suite, suite_csv};
use summix::train::{finetune, grid_to_csv, run_grid, RunMetrics, TrainConfig};

#[derive(Parser)]
#[command(name = "summix", version, about = "Linear-time sequence mixing workbench")]
struct Cli {
    /// Master seed; subsystem seeds derive from it unless overridden
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for CSVs, checkpoints and dataset snapshots
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// JSON config file mirroring the flags (flags override it)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Wall-time and memory scaling across sequence lengths
    Bench(BenchArgs),
    /// Fine-tune one replacement plan; writes metrics CSV and a checkpoint
    Train(TrainArgs),
    /// The variant-by-depth fine-tuning grid
    Grid(GridArgs),
    /// Finite-difference gradient checks (exit 1 on failure)
    Gradcheck,
    /// Windowed-summary and CTC oracle-equivalence suites (exit 1 on failure)
    Oracle(OracleArgs),
    /// Merge this out-dir's CSVs into one plot-ready long-format CSV
    Report,
}

// ── Config file ─────────────────────────────────────────────────────

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    #[serde(default)]
    bench: BenchFile,
    #[serde(default)]
    model: ModelFile,
    #[serde(default)]
    data: DataFile,
    #[serde(default)]
    train: TrainFile,
    #[serde(default)]
    oracle: OracleFile,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct BenchFile {
    variants: Option<String>,
    lengths: Option<String>,
    repeats: Option<usize>,
    d_model: Option<usize>,
    window_k: Option<usize>,
    heads: Option<usize>,
    boundary: Option<String>,
    mem_budget_bytes: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    layers: Option<usize>,
    d_model: Option<usize>,
    heads: Option<usize>,
    d_ff: Option<usize>,
    d_input: Option<usize>,
    dropout: Option<f64>,
    window_k: Option<usize>,
    boundary: Option<String>,
    stack_seed: Option<u64>,
    warmup_steps: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct DataFile {
    n_sequences: Option<usize>,
    label_len_min: Option<usize>,
    label_len_max: Option<usize>,
    frames_min: Option<usize>,
    frames_max: Option<usize>,
    noise: Option<f64>,
    n_chars: Option<usize>,
    data_seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr_head: Option<f64>,
    lr_replaced: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct OracleFile {
    windowed_cases: Option<usize>,
    ctc_cases: Option<usize>,
}

// ── Flag bundles ────────────────────────────────────────────────────

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated subset of sm,wsm,attention
    #[arg(long)]
    variants: Option<String>,
    /// Comma-separated strictly increasing sequence lengths
    #[arg(long)]
    lengths: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    window_k: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// valid-count or zero-pad
    #[arg(long)]
    boundary: Option<String>,
    /// Skip points whose working set would exceed this many bytes
    #[arg(long)]
    mem_budget_bytes: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    d_input: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    window_k: Option<usize>,
    /// valid-count or zero-pad
    #[arg(long)]
    boundary: Option<String>,
    /// Seed of the pretrained stack (defaults to seed+1)
    #[arg(long)]
    stack_seed: Option<u64>,
    /// Masked-reconstruction warm-up steps for the stack (0 disables)
    #[arg(long)]
    warmup_steps: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    n_sequences: Option<usize>,
    #[arg(long)]
    label_len_min: Option<usize>,
    #[arg(long)]
    label_len_max: Option<usize>,
    #[arg(long)]
    frames_min: Option<usize>,
    #[arg(long)]
    frames_max: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Characters in the alphabet; the vocabulary adds a blank
    #[arg(long)]
    n_chars: Option<usize>,
    /// Seed of the synthetic dataset (defaults to seed+2)
    #[arg(long)]
    data_seed: Option<u64>,
    /// Write train.split/valid.split snapshots into the out-dir
    #[arg(long, default_value_t = false)]
    save_dataset: bool,
    /// Load the training split from a snapshot instead of generating
    #[arg(long)]
    load_train: Option<PathBuf>,
    /// Load the held-out split from a snapshot instead of generating
    #[arg(long)]
    load_valid: Option<PathBuf>,
}

#[derive(Args)]
struct TrainHyperArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_head: Option<f64>,
    #[arg(long)]
    lr_replaced: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// sm, wsm, att-pt or att-scratch
    #[arg(long, default_value = "wsm")]
    variant: String,
    /// How many trailing layers to replace
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: TrainHyperArgs,
}

#[derive(Args)]
struct GridArgs {
    /// Comma-separated variants
    #[arg(long, default_value = "sm,wsm,att-pt,att-scratch")]
    variants: String,
    /// Comma-separated depths from {1,2,3,4,L} ("all" maps to L)
    #[arg(long, default_value = "1,2")]
    depths: String,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: TrainHyperArgs,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    windowed_cases: Option<usize>,
    #[arg(long)]
    ctc_cases: Option<usize>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let file: FileConfig = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(42);
    let out_dir = cli
        .out_dir
        .clone()
        .or(file.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating out-dir {}", out_dir.display()))?;

    match &cli.command {
        Command::Bench(args) => cmd_bench(args, &file, seed, &out_dir),
        Command::Train(args) => cmd_train(args, &file, seed, &out_dir),
        Command::Grid(args) => cmd_grid(args, &file, seed, &out_dir),
        Command::Gradcheck => cmd_gradcheck(seed, &out_dir),
        Command::Oracle(args) => cmd_oracle(args, &file, seed, &out_dir),
        Command::Report => cmd_report(&out_dir),
    }
}

fn parse_boundary(s: &str) -> Result<BoundaryMode> {
    match s.to_ascii_lowercase().as_str() {
        "valid-count" | "valid_count" | "validcount" => Ok(BoundaryMode::ValidCount),
        "zero-pad" | "zero_pad" | "zeropad" => Ok(BoundaryMode::ZeroPad),
        other => bail!("unknown boundary mode: {other}"),
    }
}

fn parse_list<T, F>(s: &str, what: &str, parse: F) -> Result<Vec<T>>
where
    F: Fn(&str) -> Result<T>,
{
    let items: Result<Vec<T>> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| parse(p).with_context(|| format!("parsing {what}: {p}")))
        .collect();
    let items = items?;
    if items.is_empty() {
        bail!("empty {what} list");
    }
    Ok(items)
}

// ── bench ───────────────────────────────────────────────────────────

fn cmd_bench(args: &BenchArgs, file: &FileConfig, seed: u64, out_dir: &Path) -> Result<()> {
    let defaults = BenchSpec::default();
    let variants_str = args
        .variants
        .clone()
        .or(file.bench.variants.clone())
        .unwrap_or_else(|| "sm,wsm,attention".to_string());
    let variants = parse_list(&variants_str, "variant", |s| {
        MixingVariant::parse(s).map_err(Into::into)
    })?;
    let lengths = match args.lengths.clone().or(file.bench.lengths.clone()) {
        Some(s) => parse_list(&s, "length", |p| Ok(p.parse::<usize>()?))?,
        None => defaults.lengths.clone(),
    };
    let boundary = match args.boundary.clone().or(file.bench.boundary.clone()) {
        Some(s) => parse_boundary(&s)?,
        None => defaults.boundary_mode,
    };
    let spec = BenchSpec {
        variants,
        lengths,
        repeats: args.repeats.or(file.bench.repeats).unwrap_or(defaults.repeats),
        d_model: args.d_model.or(file.bench.d_model).unwrap_or(defaults.d_model),
        window_k: args
            .window_k
            .or(file.bench.window_k)
            .unwrap_or(defaults.window_k),
        n_heads: args.heads.or(file.bench.heads).unwrap_or(defaults.n_heads),
        boundary_mode: boundary,
        mem_budget_bytes: args.mem_budget_bytes.or(file.bench.mem_budget_bytes),
        seed,
    };
    let records = run_scaling_bench(&spec)?;
    let csv = bench_to_csv(&spec, &records);
    let path = out_dir.join("bench.csv");
    fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    for &variant in &spec.variants {
        match fit_loglog_slope(&records, variant.label()) {
            Ok(slope) => println!("{:<10} log-log slope {slope:.3}", variant.label()),
            Err(e) => println!("{:<10} slope unavailable: {e}", variant.label()),
        }
    }
    Ok(())
}

// ── shared train/grid assembly ──────────────────────────────────────

struct Resolved {
    stack_cfg: StackConfig,
    mixing_cfg: MixingConfig,
    data_spec: DataSpec,
    train_cfg: TrainConfig,
    stack_seed: u64,
    warmup_steps: usize,
}

fn resolve(
    model: &ModelArgs,
    data: &DataArgs,
    hyper: &TrainHyperArgs,
    file: &FileConfig,
    seed: u64,
) -> Result<Resolved> {
    let stack_defaults = StackConfig::default();
    let data_defaults = DataSpec::default();
    let train_defaults = TrainConfig::default();

    let n_chars = data
        .n_chars
        .or(file.data.n_chars)
        .unwrap_or(data_defaults.n_chars);
    let stack_cfg = StackConfig {
        d_input: model
            .d_input
            .or(file.model.d_input)
            .unwrap_or(stack_defaults.d_input),
        d_model: model
            .d_model
            .or(file.model.d_model)
            .unwrap_or(stack_defaults.d_model),
        n_layers: model
            .layers
            .or(file.model.layers)
            .unwrap_or(stack_defaults.n_layers),
        n_heads: model
            .heads
            .or(file.model.heads)
            .unwrap_or(stack_defaults.n_heads),
        d_ff: model.d_ff.or(file.model.d_ff).unwrap_or(stack_defaults.d_ff),
        vocab_size: n_chars + 1,
        dropout: model
            .dropout
            .or(file.model.dropout)
            .unwrap_or(stack_defaults.dropout),
    };
    stack_cfg.validate()?;

    let boundary = match model.boundary.clone().or(file.model.boundary.clone()) {
        Some(s) => parse_boundary(&s)?,
        None => BoundaryMode::ValidCount,
    };
    let mut mixing_cfg = MixingConfig::new(MixingVariant::Wsm, stack_cfg.d_model)?;
    mixing_cfg.window_k = model
        .window_k
        .or(file.model.window_k)
        .unwrap_or(mixing_cfg.window_k);
    mixing_cfg.boundary_mode = boundary;
    mixing_cfg.n_heads = stack_cfg.n_heads;
    mixing_cfg.dropout = stack_cfg.dropout;
    mixing_cfg.validate()?;

    let data_spec = DataSpec {
        n_sequences: data
            .n_sequences
            .or(file.data.n_sequences)
            .unwrap_or(data_defaults.n_sequences),
        label_len: (
            data.label_len_min
                .or(file.data.label_len_min)
                .unwrap_or(data_defaults.label_len.0),
            data.label_len_max
                .or(file.data.label_len_max)
                .unwrap_or(data_defaults.label_len.1),
        ),
        frames_per_label: (
            data.frames_min
                .or(file.data.frames_min)
                .unwrap_or(data_defaults.frames_per_label.0),
            data.frames_max
                .or(file.data.frames_max)
                .unwrap_or(data_defaults.frames_per_label.1),
        ),
        noise: data.noise.or(file.data.noise).unwrap_or(data_defaults.noise),
        d_input: stack_cfg.d_input,
        n_chars,
        seed: data
            .data_seed
            .or(file.data.data_seed)
            .unwrap_or(seed.wrapping_add(2)),
    };
    data_spec.validate()?;

    let train_cfg = TrainConfig {
        batch_size: hyper
            .batch_size
            .or(file.train.batch_size)
            .unwrap_or(train_defaults.batch_size),
        epochs: hyper
            .epochs
            .or(file.train.epochs)
            .unwrap_or(train_defaults.epochs),
        lr_head: hyper
            .lr_head
            .or(file.train.lr_head)
            .unwrap_or(train_defaults.lr_head),
        lr_replaced: hyper
            .lr_replaced
            .or(file.train.lr_replaced)
            .unwrap_or(train_defaults.lr_replaced),
        seed,
    };
    train_cfg.validate()?;

    Ok(Resolved {
        stack_cfg,
        mixing_cfg,
        data_spec,
        train_cfg,
        stack_seed: model
            .stack_seed
            .or(file.model.stack_seed)
            .unwrap_or(seed.wrapping_add(1)),
        warmup_steps: model
            .warmup_steps
            .or(file.model.warmup_steps)
            .unwrap_or(60),
    })
}

struct Splits {
    train: Dataset,
    valid: Dataset,
}

fn obtain_data(args: &DataArgs, spec: &DataSpec, out_dir: &Path) -> Result<Splits> {
    match (&args.load_train, &args.load_valid) {
        (Some(train_path), Some(valid_path)) => Ok(Splits {
            train: load_split(train_path)?,
            valid: load_split(valid_path)?,
        }),
        (None, None) => {
            let full = make_synthetic_dataset(*spec)?;
            let (train, valid) = full.train_valid_split();
            let train_ds = Dataset {
                spec: full.spec,
                prototypes: full.prototypes.clone(),
                samples: train.to_vec(),
            };
            let valid_ds = Dataset {
                spec: full.spec,
                prototypes: full.prototypes.clone(),
                samples: valid.to_vec(),
            };
            if args.save_dataset {
                let train_path = out_dir.join("train.split");
                let valid_path = out_dir.join("valid.split");
                save_split(&train_path, &train_ds, &train_ds.samples)?;
                save_split(&valid_path, &valid_ds, &valid_ds.samples)?;
                println!("wrote {} and {}", train_path.display(), valid_path.display());
            }
            Ok(Splits {
                train: train_ds,
                valid: valid_ds,
            })
        }
        _ => bail!("--load-train and --load-valid must be given together"),
    }
}

fn prepared_stack(r: &Resolved, splits: &Splits) -> Result<summix::encoder::PretrainedStack> {
    let mut stack = build_pretrained_stack(r.stack_cfg, r.stack_seed)?;
    if r.warmup_steps > 0 {
        let frames: Vec<summix::Tensor> = splits
            .train
            .samples
            .iter()
            .take(64)
            .map(|s| s.features.clone())
            .collect();
        let stats = warm_up(
            &mut stack,
            &frames,
            WarmupConfig {
                steps: r.warmup_steps,
                seed: r.stack_seed,
                ..WarmupConfig::default()
            },
        )?;
        println!(
            "warm-up reconstruction: {:.4} -> {:.4} held out",
            stats.held_out_before, stats.held_out_after
        );
    }
    Ok(stack)
}

fn cmd_train(args: &TrainArgs, file: &FileConfig, seed: u64, out_dir: &Path) -> Result<()> {
    let r = resolve(&args.model, &args.data, &args.hyper, file, seed)?;
    let splits = obtain_data(&args.data, &r.data_spec, out_dir)?;
    let stack = prepared_stack(&r, &splits)?;
    let plan = ReplacementPlan {
        replace_last_n: args.depth,
        variant: ReplacementVariant::parse(&args.variant)?,
        seed,
    };
    let (model, metrics) = finetune(
        &stack,
        plan,
        r.mixing_cfg,
        &r.train_cfg,
        &splits.train.samples,
        &splits.valid.samples,
    )?;

    let mut csv = String::from(RunMetrics::csv_header());
    csv.push('\n');
    csv.push_str(&metrics.to_csv_rows());
    let csv_path = out_dir.join("train.csv");
    fs::write(&csv_path, csv)?;
    let ckpt_path = out_dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &model)?;
    println!(
        "{} depth {}: loss {:.4} -> {:.4}, held-out TER {:.4}",
        metrics.variant, metrics.depth, metrics.initial_loss, metrics.final_loss, metrics.final_ter
    );
    println!("wrote {} and {}", csv_path.display(), ckpt_path.display());
    Ok(())
}

fn cmd_grid(args: &GridArgs, file: &FileConfig, seed: u64, out_dir: &Path) -> Result<()> {
    let r = resolve(&args.model, &args.data, &args.hyper, file, seed)?;
    let splits = obtain_data(&args.data, &r.data_spec, out_dir)?;
    let stack = prepared_stack(&r, &splits)?;
    let variants = parse_list(&args.variants, "variant", |s| {
        ReplacementVariant::parse(s).map_err(Into::into)
    })?;
    let depths = parse_list(&args.depths, "depth", |p| {
        Ok(match p {
            "all" | "All" | "L" => r.stack_cfg.n_layers,
            other => other.parse::<usize>()?,
        })
    })?;
    let cells = run_grid(
        &stack,
        &variants,
        &depths,
        r.mixing_cfg,
        &r.train_cfg,
        &splits.train.samples,
        &splits.valid.samples,
    )?;

    let grid_path = out_dir.join("grid.csv");
    fs::write(&grid_path, grid_to_csv(&cells, r.stack_cfg.n_layers))?;
    let mut epochs_csv = String::from(RunMetrics::csv_header());
    epochs_csv.push('\n');
    for cell in &cells {
        if let Some(m) = &cell.metrics {
            epochs_csv.push_str(&m.to_csv_rows());
        }
    }
    let epochs_path = out_dir.join("grid_epochs.csv");
    fs::write(&epochs_path, epochs_csv)?;

    for cell in &cells {
        match (&cell.skipped, &cell.metrics) {
            (Some(reason), _) => println!(
                "{:<12} depth {:>3}: skipped ({reason})",
                cell.variant.label(),
                cell.depth_label(r.stack_cfg.n_layers)
            ),
            (None, Some(m)) => println!(
                "{:<12} depth {:>3}: loss {:.4} -> {:.4}, TER {:.4}",
                cell.variant.label(),
                cell.depth_label(r.stack_cfg.n_layers),
                m.initial_loss,
                m.final_loss,
                m.final_ter
            ),
            _ => unreachable!(),
        }
    }
    println!("wrote {} and {}", grid_path.display(), epochs_path.display());
    Ok(())
}

// ── verification suites ─────────────────────────────────────────────

fn finish_suite(rows: &[summix::suites::SuiteRow], path: &Path) -> Result<()> {
    fs::write(path, suite_csv(rows))?;
    let mut all_pass = true;
    for row in rows {
        println!(
            "{:<34} cases {:>5}  max err {:>12.3e}  tol {:>8.0e}  {}",
            row.name,
            row.cases,
            row.max_err,
            row.tolerance,
            if row.passed() { "ok" } else { "FAIL" }
        );
        all_pass &= row.passed();
    }
    println!("wrote {}", path.display());
    if !all_pass {
        bail!("verification suite failed");
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, out_dir: &Path) -> Result<()> {
    let rows = gradcheck_suite(seed);
    finish_suite(&rows, &out_dir.join("gradcheck.csv"))
}

fn cmd_oracle(args: &OracleArgs, file: &FileConfig, seed: u64, out_dir: &Path) -> Result<()> {
    let windowed_cases = args
        .windowed_cases
        .or(file.oracle.windowed_cases)
        .unwrap_or(1000);
    let ctc_cases = args.ctc_cases.or(file.oracle.ctc_cases).unwrap_or(500);
    let rows = vec![
        oracle_windowed_suite(windowed_cases, seed),
        oracle_ctc_suite(ctc_cases, seed.wrapping_add(1)),
    ];
    finish_suite(&rows, &out_dir.join("oracle.csv"))
}

// ── report ──────────────────────────────────────────────────────────

fn push_long_rows(
    out: &mut String,
    source: &str,
    variant: &str,
    x: &str,
    metrics: &[(&str, &str)],
) {
    for (metric, value) in metrics {
        if value.contains("skipped") {
            continue;
        }
        out.push_str(&format!("{source},{variant},{x},{metric},{value}\n"));
    }
}

/// Merges bench/grid/train CSVs from the out-dir into
/// `source,variant,x,metric,value` rows.
fn cmd_report(out_dir: &Path) -> Result<()> {
    let mut out = String::from("source,variant,x,metric,value\n");
    let mut found = false;

    let bench_path = out_dir.join("bench.csv");
    if bench_path.exists() {
        found = true;
        for line in fs::read_to_string(&bench_path)?.lines() {
            if line.starts_with('#') || line.starts_with("variant,") || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 || f[5] == "true" {
                continue;
            }
            push_long_rows(
                &mut out,
                "bench",
                f[0],
                f[1],
                &[("median_ns", f[2]), ("macs", f[3]), ("peak_bytes", f[4])],
            );
        }
    }

    let grid_path = out_dir.join("grid.csv");
    if grid_path.exists() {
        found = true;
        for line in fs::read_to_string(&grid_path)?.lines() {
            if line.starts_with("variant,") || line.is_empty() || line.contains("skipped") {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                continue;
            }
            push_long_rows(
                &mut out,
                "grid",
                f[0],
                f[1],
                &[
                    ("final_ter", f[2]),
                    ("final_loss", f[3]),
                    ("wall_ms", f[4]),
                    ("peak_bytes", f[5]),
                ],
            );
        }
    }

    for name in ["train.csv", "grid_epochs.csv"] {
        let path = out_dir.join(name);
        if !path.exists() {
            continue;
        }
        found = true;
        let source = name.trim_end_matches(".csv");
        for line in fs::read_to_string(&path)?.lines() {
            if line.starts_with("variant,") || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                continue;
            }
            let variant = format!("{}-depth{}", f[0], f[1]);
            push_long_rows(
                &mut out,
                source,
                &variant,
                f[2],
                &[
                    ("loss", f[3]),
                    ("ter", f[4]),
                    ("wall_ms", f[5]),
                    ("peak_bytes", f[6]),
                ],
            );
        }
    }

    if !found {
        bail!(
            "no bench.csv, grid.csv, train.csv or grid_epochs.csv in {}",
            out_dir.display()
        );
    }
    let path = out_dir.join("report.csv");
    fs::write(&path, out)?;
    println!("wrote {}", path.display());
    Ok(())
}
