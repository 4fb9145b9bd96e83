//! Command-line front end: certify a model over a transformation range,
//! train a certifiably robust model, tune the training ball radius, bench
//! the interpolation kernels, or print the worked 3x3 example.
//!
//! Exit codes: 0 success, 1 domain error (bad files, failed runs), 2 usage.
//! Every emitted report embeds the resolved config, the seed, and the tool
//! version so a report is reproducible from its own header.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use geocert::certify::{certify_dataset, split_params, CertifyOptions};
use geocert::data::{
    arch_from_json, cert_report_csv, load_idx, load_model, save_model, synthetic_dataset,
    train_log_csv, Dataset,
};
use geocert::geometry::TransformChain;
use geocert::interp::{interpolate, make_interp_grid, reference_interpolate};
use geocert::tensor::Tensor;
use geocert::train::{fit, tune_nu, TrainConfig};

#[derive(Parser)]
#[command(
    name = "geocert",
    version,
    about = "Certify and train neural networks against geometric image transformations"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Certify a trained model over a transformation range
    Certify(CertifyArgs),
    /// Train a certifiably robust model on an IDX dataset
    Train(TrainArgs),
    /// Measure interval image widths to pick the training ball radius
    Tune(TuneArgs),
    /// Benchmark grid construction and batched interpolation
    Bench(BenchArgs),
    /// Print the worked 3x3 scaling example and its interval outputs
    Golden,
}

#[derive(Args, Serialize)]
struct CertifyArgs {
    /// Model file produced by `train`
    #[arg(long)]
    model: PathBuf,
    /// Directory holding IDX image/label files (plain or .gz)
    #[arg(long)]
    data: PathBuf,
    /// Which IDX pair to read: "test" (t10k-*) or "train"
    #[arg(long, default_value = "test")]
    split: String,
    /// Transformation range, e.g. "R(30)" or "Sc(2) R(5,10)"
    #[arg(long)]
    transforms: String,
    /// Comma-separated split counts, one per parameter, e.g. "240"
    #[arg(long, conflicts_with = "split_width")]
    splits: Option<String>,
    /// Cell width per parameter in surface units (degrees/px/percent)
    #[arg(long)]
    split_width: Option<String>,
    /// Evaluate only the first N images
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    /// Worker threads; 0 uses all cores
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Scan every cell even after an image fails (full margin reporting)
    #[arg(long)]
    no_early_exit: bool,
    /// Report path; .csv emits the table form, anything else JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Directory holding the train-* IDX pair
    #[arg(long)]
    data: PathBuf,
    /// Architecture description (JSON)
    #[arg(long)]
    arch: PathBuf,
    /// Augmentation/certification range, e.g. "R(30)"
    #[arg(long)]
    transforms: String,
    /// Final ball half-width per parameter, surface units, e.g. "0.25"
    #[arg(long)]
    nu: String,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 15)]
    warmup: usize,
    #[arg(long, default_value_t = 50)]
    rampup: usize,
    #[arg(long, default_value_t = 0.5)]
    kappa_final: f64,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Epoch at which the learning rate decays 10x (default 80% of epochs)
    #[arg(long)]
    lr_decay_epoch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train on only the first N images
    #[arg(long)]
    limit: Option<usize>,
    /// Where to store the trained model
    #[arg(long)]
    out: PathBuf,
    /// Epoch log path; .csv table or .json envelope
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TuneArgs {
    /// Directory holding the train-* IDX pair
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    transforms: String,
    /// Candidate ball half-width per parameter, surface units
    #[arg(long)]
    nu: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Measure only the first N images
    #[arg(long)]
    limit: Option<usize>,
    /// Report path (JSON)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    /// Square image sizes to measure
    #[arg(long, default_value = "28,56", value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    /// Transformation for the grid; default is one narrow rotation cell
    #[arg(long, default_value = "R(0,0.25)")]
    transforms: String,
    /// Output CSV; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match cli.cmd {
        Cmd::Certify(a) => cmd_certify(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Tune(a) => cmd_tune(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Golden => cmd_golden(),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn version() -> String {
    format!("geocert {}", env!("CARGO_PKG_VERSION"))
}

/// Report envelope: every output is self-describing.
#[derive(Serialize)]
struct Envelope<C: Serialize, B: Serialize> {
    version: String,
    config: C,
    #[serde(flatten)]
    body: B,
}

fn emit_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn csv_header<C: Serialize>(config: &C) -> Result<String> {
    Ok(format!("# version: {}\n# config: {}\n", version(), serde_json::to_string(config)?))
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Finds `<prefix>-images-idx3-ubyte[.gz]` and its label twin in `dir`.
fn idx_pair(dir: &Path, prefix: &str) -> Result<(PathBuf, PathBuf)> {
    let find = |stem: String| -> Result<PathBuf> {
        for cand in [stem.clone(), format!("{stem}.gz")] {
            let p = dir.join(&cand);
            if p.exists() {
                return Ok(p);
            }
        }
        bail!("no {stem}[.gz] in {}", dir.display())
    };
    Ok((
        find(format!("{prefix}-images-idx3-ubyte"))?,
        find(format!("{prefix}-labels-idx1-ubyte"))?,
    ))
}

fn load_split(dir: &Path, split: &str, limit: Option<usize>) -> Result<Dataset<f32>> {
    let prefix = match split {
        "test" => "t10k",
        "train" => "train",
        other => bail!("unknown split {other:?}, expected \"train\" or \"test\""),
    };
    let (images, labels) = idx_pair(dir, prefix)?;
    let ds = load_idx::<f32>(&images, &labels)
        .with_context(|| format!("loading {}", images.display()))?;
    Ok(match limit {
        Some(n) => ds.head(n),
        None => ds,
    })
}

fn parse_numbers(spec: &str, what: &str) -> Result<Vec<f64>> {
    spec.split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("{what}: bad number {t:?}")))
        .collect()
}

/// Surface-unit values (degrees, pixels, percent) to the chain's internal
/// units, one entry per parameter.
fn to_internal(chain: &TransformChain<f32>, surface: &[f64], what: &str) -> Result<Vec<f32>> {
    let kinds = chain.param_kinds();
    if surface.len() != kinds.len() {
        bail!("{what} has {} entries but the chain has {} parameters", surface.len(), kinds.len());
    }
    Ok(kinds.iter().zip(surface).map(|(k, &v)| k.to_internal(v as f32)).collect())
}

/// Split counts from either explicit counts or a per-parameter cell width.
fn resolve_splits(chain: &TransformChain<f32>, args: &CertifyArgs) -> Result<Vec<usize>> {
    if let Some(spec) = &args.splits {
        let counts = parse_numbers(spec, "--splits")?;
        if counts.iter().any(|&c| c < 1.0 || c.fract() != 0.0) {
            bail!("--splits must be positive integers");
        }
        return Ok(counts.iter().map(|&c| c as usize).collect());
    }
    let Some(spec) = &args.split_width else {
        bail!("one of --splits or --split-width is required");
    };
    let widths = parse_numbers(spec, "--split-width")?;
    let kinds = chain.param_kinds();
    let params = chain.params();
    if widths.len() != kinds.len() {
        bail!(
            "--split-width has {} entries but the chain has {} parameters",
            widths.len(),
            kinds.len()
        );
    }
    let mut counts = Vec::with_capacity(widths.len());
    for ((&step, kind), p) in widths.iter().zip(&kinds).zip(&params) {
        if step <= 0.0 {
            bail!("--split-width entries must be positive");
        }
        let surface_width = kind.to_surface(p.width()) as f64;
        counts.push((surface_width / step).ceil().max(1.0) as usize);
    }
    Ok(counts)
}

fn cmd_certify(args: CertifyArgs) -> Result<()> {
    let net = load_model::<f32>(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let ds = load_split(&args.data, &args.split, args.limit)?;
    let chain = TransformChain::<f32>::parse(&args.transforms)?;
    let counts = resolve_splits(&chain, &args)?;
    let plan = split_params(&chain, &counts)?;
    let opts = CertifyOptions {
        batch: args.batch,
        workers: args.workers,
        early_exit: !args.no_early_exit,
    };
    let report = certify_dataset(&net, &ds.images, &ds.labels, &plan, &opts);

    #[derive(Serialize)]
    struct Config<'a> {
        #[serde(flatten)]
        args: &'a CertifyArgs,
        resolved_splits: &'a [usize],
    }
    let config = Config { args: &args, resolved_splits: &counts };
    if is_csv(&args.out) {
        let text = csv_header(&config)? + &cert_report_csv(&report);
        std::fs::write(&args.out, text)?;
    } else {
        emit_json(&Envelope { version: version(), config, body: &report }, &args.out)?;
    }
    let a = &report.aggregate;
    println!(
        "{} images over {} cells: clean {:.4}, certified {:.4}, {:.3} s/image",
        a.images,
        plan.cells.len(),
        a.clean_acc,
        a.certified,
        a.sec_per_image
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let ds = load_split(&args.data, "train", args.limit)?;
    let arch = std::fs::read_to_string(&args.arch)
        .with_context(|| format!("reading {}", args.arch.display()))?;
    let mut net = arch_from_json::<f32>(&arch, &ds.channel_stats, args.seed)?;
    let chain = TransformChain::<f32>::parse(&args.transforms)?;
    let nu = to_internal(&chain, &parse_numbers(&args.nu, "--nu")?, "--nu")?;

    let mut cfg = TrainConfig::new(chain, nu);
    cfg.epochs = args.epochs;
    cfg.batch_size = args.batch;
    cfg.warmup_epochs = args.warmup;
    cfg.rampup_epochs = args.rampup;
    cfg.kappa_final = args.kappa_final;
    cfg.lr = args.lr;
    cfg.lr_decay_epoch = args.lr_decay_epoch;
    cfg.seed = args.seed;

    let start = Instant::now();
    let log = fit(&mut net, &ds.images, &ds.labels, &cfg)?;
    let secs = start.elapsed().as_secs_f64();
    save_model(&net, &args.out)?;

    if let Some(path) = &args.log {
        if is_csv(path) {
            let text = csv_header(&args)? + &train_log_csv(&log);
            std::fs::write(path, text)?;
        } else {
            emit_json(&Envelope { version: version(), config: &args, body: &log }, path)?;
        }
    }
    let last = log.entries.last().map_or(f64::NAN, |e| e.mean_loss);
    println!(
        "trained {} images for {} epochs in {:.1}s (final loss {:.6}) -> {}",
        ds.len(),
        args.epochs,
        secs,
        last,
        args.out.display()
    );
    Ok(())
}

fn cmd_tune(args: TuneArgs) -> Result<()> {
    let ds = load_split(&args.data, "train", args.limit)?;
    let chain = TransformChain::<f32>::parse(&args.transforms)?;
    let nu = to_internal(&chain, &parse_numbers(&args.nu, "--nu")?, "--nu")?;
    let report = tune_nu(&ds.images, &chain, &nu, args.seed);
    emit_json(&Envelope { version: version(), config: &args, body: &report }, &args.out)?;
    println!(
        "{} images, 10 draws: mean width {:.4}, mean max width {:.4}, peak {:.4}",
        ds.len(),
        report.mean,
        report.max,
        report.peak
    );
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let chain = TransformChain::<f32>::parse(&args.transforms)?;
    let mut csv = String::from("h,w,batch,transform,grid_ms,interp_ms,nnz_fraction\n");
    for &size in &args.sizes {
        if size == 0 {
            bail!("--sizes entries must be positive");
        }
        let images = synthetic_dataset::<f32>(args.batch, 1, size, size, 2, 0).images;

        let t0 = Instant::now();
        let grid = make_interp_grid(size, size, &chain);
        let grid_ms = t0.elapsed().as_secs_f64() * 1e3;

        let t1 = Instant::now();
        let out = interpolate(&images, &grid);
        let interp_ms = t1.elapsed().as_secs_f64() * 1e3;
        assert_eq!(out.lo.as_slice().len(), args.batch * size * size);

        let cells = (size * size) as f64;
        let nnz_fraction = grid.w.len() as f64 / (cells * cells);
        csv.push_str(&format!(
            "{size},{size},{},{},{grid_ms:.3},{interp_ms:.3},{nnz_fraction:.6}\n",
            args.batch, args.transforms
        ));
    }
    match &args.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// The 3x3 image scaled by up to 2 percent: prints the sparse grid's
/// entry counts and the nine output pixel intervals at two decimals.
fn cmd_golden() -> Result<()> {
    #[rustfmt::skip]
    let x = Tensor::from_vec(vec![1, 3, 3], vec![
        0.55, 0.50, 0.42,
        0.53, 0.49, 0.51,
        0.56, 0.62, 0.45,
    ]);
    let chain = TransformChain::<f64>::parse("Sc(-2,2)")?;
    let grid = make_interp_grid(3, 3, &chain);
    let out = interpolate(&x, &grid);
    let reference = reference_interpolate(&x, &chain);
    for i in 0..9 {
        assert!((out.get(i).lo - reference.get(i).lo).abs() < 1e-9);
        assert!((out.get(i).hi - reference.get(i).hi).abs() < 1e-9);
    }

    println!("transform: Sc(-2,2) on a 3x3 image");
    println!("z = {:?}", grid.z);
    println!("input:");
    for row in 0..3 {
        let s = x.as_slice();
        println!("  {:.2} {:.2} {:.2}", s[row * 3], s[row * 3 + 1], s[row * 3 + 2]);
    }
    println!("output intervals (two decimals):");
    for row in 0..3 {
        let mut line = String::from(" ");
        for col in 0..3 {
            let p = out.get(row * 3 + col);
            line.push_str(&format!(" [{:.2}, {:.2}]", p.lo, p.hi));
        }
        println!("{line}");
    }
    Ok(())
}
