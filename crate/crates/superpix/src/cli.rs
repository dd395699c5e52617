//! Command-line surface: `segment` one image, `eval` a dataset, or `sweep`
//! superpixel counts.
//!
//! Datasets are flat directories: each image (`*.png`, `*.jpg`, `*.jpeg`)
//! may have any number of ground-truth annotations named
//! `{stem}_gt*.png` / `{stem}_gt*.csv`. Images without annotations are
//! skipped with a warning during evaluation (the warning is recorded in the
//! run manifest). Every command writes a JSON manifest capturing the full
//! configuration, inputs, outputs, metrics, and timings, so any run can be
//! reproduced from its artifacts.
//!
//! Exit codes: 0 success, 1 I/O or configuration failure, 2 training aborted
//! on a non-finite loss.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::loss::LossWeights;
use crate::metrics::{self, MetricsReport};
use crate::nn::NetworkConfig;
use crate::train::{self, TrainConfig};
use crate::{io, Error, Result};

pub const EXIT_SUCCESS: i32 = 0;
/// I/O or configuration failure.
pub const EXIT_FAILURE: i32 = 1;
/// The objective became non-finite during training.
pub const EXIT_NON_FINITE: i32 = 2;

#[derive(Parser)]
#[command(
    name = "superpix",
    version,
    about = "Unsupervised per-image superpixel segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads for parallel per-image evaluation (0 = all cores).
    /// The SUPERPIX_THREADS environment variable takes precedence.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Segment a single image: writes the label map, a boundary overlay,
    /// the loss trace, and a run manifest.
    Segment(SegmentArgs),
    /// Segment every annotated image in a directory and report ASA/BR.
    Eval(EvalArgs),
    /// Run eval across several superpixel counts, emitting one long CSV.
    Sweep(SweepArgs),
}

/// Model and objective hyperparameters shared by all subcommands.
#[derive(Args, Debug)]
struct HyperArgs {
    /// Maximum number of superpixels N.
    #[arg(short = 'n', long = "superpixels", default_value_t = 100)]
    superpixels: usize,

    /// Optimization steps per image.
    #[arg(long, default_value_t = 1000)]
    iterations: usize,

    /// Adam learning rate.
    #[arg(long, default_value_t = 0.01)]
    lr: f64,

    /// Weight of the marginal-entropy term inside the clustering loss.
    #[arg(long, default_value_t = 2.0)]
    lambda: f64,

    /// Weight of the smoothness loss.
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,

    /// Weight of the reconstruction loss.
    #[arg(long, default_value_t = 10.0)]
    beta: f64,

    /// Weight of the edge loss.
    #[arg(long, default_value_t = 1.0)]
    eta: f64,

    /// Bandwidth of the image-gradient weighting in the smoothness loss.
    #[arg(long, default_value_t = 8.0)]
    sigma: f64,

    /// Seed for weight initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Merge undersized 4-connected components after hard assignment.
    #[arg(long)]
    enforce_connectivity: bool,
}

impl HyperArgs {
    fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            seed: self.seed,
            ..NetworkConfig::new(self.superpixels)
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            learning_rate: self.lr,
            loss_weights: LossWeights {
                lambda: self.lambda,
                alpha: self.alpha,
                beta: self.beta,
                eta: self.eta,
                sigma: self.sigma,
            },
            seed: self.seed,
            enforce_connectivity: self.enforce_connectivity,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct SegmentArgs {
    /// Input image (PNG or JPEG).
    image: PathBuf,

    /// Output directory for the four artifacts.
    #[arg(short = 'o', long = "out")]
    out: PathBuf,

    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of images plus `*_gt*` annotations.
    dataset: PathBuf,

    /// Output metrics CSV. A manifest is written next to it.
    #[arg(short = 'o', long = "out")]
    out: PathBuf,

    /// Boundary-recall tolerance radius (Chebyshev).
    #[arg(long, default_value_t = 2)]
    tolerance: usize,

    /// Use the first ground-truth annotation as the prediction instead of
    /// training (sanity-checks the metric pipeline).
    #[arg(long)]
    oracle: bool,

    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Directory of images plus `*_gt*` annotations.
    dataset: PathBuf,

    /// Output long-format CSV (count, image_id, asa, br).
    #[arg(short = 'o', long = "out")]
    out: PathBuf,

    /// Superpixel counts to evaluate.
    #[arg(long, value_delimiter = ',', default_values_t = vec![25, 50, 100, 200, 400])]
    counts: Vec<usize>,

    /// Boundary-recall tolerance radius (Chebyshev).
    #[arg(long, default_value_t = 2)]
    tolerance: usize,

    /// Use the first ground-truth annotation as the prediction instead of
    /// training.
    #[arg(long)]
    oracle: bool,

    #[command(flatten)]
    hyper: HyperArgs,
}

/// Everything needed to reproduce a run, written as pretty JSON next to the
/// run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// BR tolerance radius; absent for plain segmentation runs.
    pub tolerance: Option<usize>,
    /// Superpixel counts of a sweep; empty otherwise.
    pub sweep_counts: Vec<usize>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub metrics: Vec<ImageMetrics>,
    pub warnings: Vec<String>,
    pub timings: Vec<ImageTiming>,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTiming {
    pub image_id: String,
    pub seconds: f64,
}

impl RunManifest {
    fn new(network: NetworkConfig, train: TrainConfig) -> Self {
        Self {
            network,
            train,
            tolerance: None,
            sweep_counts: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            metrics: Vec::new(),
            warnings: Vec::new(),
            timings: Vec::new(),
            total_seconds: 0.0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// One image of a dataset directory with its annotation files.
#[derive(Clone, Debug)]
pub struct DatasetEntry {
    /// Image file stem.
    pub id: String,
    pub image: PathBuf,
    /// Sorted `{id}_gt*` files (PNG or CSV).
    pub annotations: Vec<PathBuf>,
}

/// Scans a flat directory for images and their `{stem}_gt*` annotations.
/// Files whose stem contains `_gt` are never treated as images.
pub fn discover_dataset(dir: &Path) -> Result<Vec<DatasetEntry>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() {
            files.push(path);
        }
    }
    let stem_of = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned());
    let ext_of = |p: &Path| {
        p.extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default()
    };

    let mut entries = Vec::new();
    for path in &files {
        let Some(stem) = stem_of(path) else { continue };
        if stem.contains("_gt") || !matches!(ext_of(path).as_str(), "png" | "jpg" | "jpeg") {
            continue;
        }
        let prefix = format!("{stem}_gt");
        let mut annotations: Vec<PathBuf> = files
            .iter()
            .filter(|p| {
                stem_of(p).is_some_and(|s| s.starts_with(&prefix))
                    && matches!(ext_of(p).as_str(), "png" | "csv")
            })
            .cloned()
            .collect();
        annotations.sort();
        entries.push(DatasetEntry {
            id: stem,
            image: path.clone(),
            annotations,
        });
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(entries)
}

/// Parses CLI arguments, runs the command, and maps errors to exit codes.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => EXIT_SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NonFiniteLoss { .. } => EXIT_NON_FINITE,
        _ => EXIT_FAILURE,
    }
}

fn execute(cli: Cli) -> Result<()> {
    init_thread_pool(cli.jobs)?;
    match cli.command {
        Command::Segment(args) => cmd_segment(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

fn init_thread_pool(jobs: usize) -> Result<()> {
    let jobs = match std::env::var("SUPERPIX_THREADS") {
        Ok(value) => value.trim().parse().map_err(|_| {
            Error::Config(format!(
                "SUPERPIX_THREADS must be a thread count, got {value:?}"
            ))
        })?,
        Err(_) => jobs,
    };
    if jobs > 0 {
        // Ignore the error if a pool already exists (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    Ok(())
}

fn cmd_segment(args: SegmentArgs) -> Result<()> {
    let net_cfg = args.hyper.network_config();
    let train_cfg = args.hyper.train_config();
    net_cfg.validate()?;
    train_cfg.validate()?;

    std::fs::create_dir_all(&args.out)?;
    let image = io::load_image(&args.image)?;
    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());

    let start = Instant::now();
    let (output, trace) = train::fit(&image, &net_cfg, &train_cfg)?;
    let labels = train::extract_label_map(&output.p, &train_cfg);

    let labels_path = args.out.join(format!("{stem}_labels.png"));
    let overlay_path = args.out.join(format!("{stem}_overlay.png"));
    let trace_path = args.out.join(format!("{stem}_trace.csv"));
    let manifest_path = args.out.join(format!("{stem}_manifest.json"));

    io::save_label_map(&labels, &labels_path)?;
    let overlay = io::render_boundary_overlay(&image, &labels)?;
    io::save_image(&overlay, &overlay_path)?;
    trace.write_csv(std::fs::File::create(&trace_path)?)?;

    let mut manifest = RunManifest::new(net_cfg, train_cfg);
    manifest.inputs.push(args.image.display().to_string());
    for p in [&labels_path, &overlay_path, &trace_path, &manifest_path] {
        manifest.outputs.push(p.display().to_string());
    }
    manifest.timings.push(ImageTiming {
        image_id: stem.clone(),
        seconds: trace.duration().as_secs_f64(),
    });
    manifest.total_seconds = start.elapsed().as_secs_f64();
    manifest.write(&manifest_path)?;

    println!(
        "{stem}: {} superpixels, loss {:.6} -> {:.6} in {:.1}s",
        labels.distinct_labels(),
        trace.initial_total(),
        trace.final_total(),
        trace.duration().as_secs_f64(),
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

struct EvalRow {
    image_id: String,
    report: MetricsReport,
    seconds: f64,
}

/// Evaluates every entry (in parallel) and returns rows in entry order.
fn eval_entries(
    entries: &[DatasetEntry],
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    tolerance: usize,
    oracle: bool,
) -> Result<Vec<EvalRow>> {
    let results: Vec<Result<EvalRow>> = entries
        .par_iter()
        .map(|entry| {
            let start = Instant::now();
            let gts = entry
                .annotations
                .iter()
                .map(|p| io::load_label_map(p))
                .collect::<Result<Vec<_>>>()?;
            let pred = if oracle {
                gts[0].clone()
            } else {
                let image = io::load_image(&entry.image)?;
                train::segment(&image, net_cfg, train_cfg)?
            };
            let report = metrics::evaluate(&pred, &gts, tolerance)?;
            Ok(EvalRow {
                image_id: entry.id.clone(),
                report,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect();
    results.into_iter().collect()
}

/// Splits a dataset into annotated entries and skip warnings for the rest.
fn annotated_entries(dir: &Path) -> Result<(Vec<DatasetEntry>, Vec<String>)> {
    let entries = discover_dataset(dir)?;
    if entries.is_empty() {
        return Err(Error::Config(format!(
            "no images found in {}",
            dir.display()
        )));
    }
    let (with, without): (Vec<_>, Vec<_>) =
        entries.into_iter().partition(|e| !e.annotations.is_empty());
    let warnings: Vec<String> = without
        .iter()
        .map(|e| format!("{}: no ground-truth annotations found, skipped", e.id))
        .collect();
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if with.is_empty() {
        return Err(Error::Config(
            "no image has ground-truth annotations".into(),
        ));
    }
    Ok((with, warnings))
}

fn ensure_parent_dir(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn manifest_path_for(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("manifest.json")
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let net_cfg = args.hyper.network_config();
    let train_cfg = args.hyper.train_config();
    net_cfg.validate()?;
    train_cfg.validate()?;

    let start = Instant::now();
    let (entries, warnings) = annotated_entries(&args.dataset)?;
    let rows = eval_entries(&entries, &net_cfg, &train_cfg, args.tolerance, args.oracle)?;

    ensure_parent_dir(&args.out)?;
    let mut writer = csv::Writer::from_path(&args.out)?;
    writer.write_record(["image_id", "n_superpixels", "asa", "br"])?;
    for row in &rows {
        writer.write_record(&[
            row.image_id.clone(),
            row.report.n_superpixels_used.to_string(),
            row.report.asa.to_string(),
            row.report.br.to_string(),
        ])?;
    }
    let mean_asa = mean(rows.iter().map(|r| r.report.asa));
    let mean_br = mean(rows.iter().map(|r| r.report.br));
    let mean_n = mean(rows.iter().map(|r| r.report.n_superpixels_used as f64));
    writer.write_record(&[
        "mean".to_string(),
        mean_n.to_string(),
        mean_asa.to_string(),
        mean_br.to_string(),
    ])?;
    writer.flush()?;

    let manifest_path = manifest_path_for(&args.out);
    let mut manifest = RunManifest::new(net_cfg, train_cfg);
    manifest.tolerance = Some(args.tolerance);
    manifest.inputs = entries
        .iter()
        .map(|e| e.image.display().to_string())
        .collect();
    manifest.outputs = vec![
        args.out.display().to_string(),
        manifest_path.display().to_string(),
    ];
    manifest.metrics = rows
        .iter()
        .map(|r| ImageMetrics {
            image_id: r.image_id.clone(),
            report: r.report.clone(),
        })
        .collect();
    manifest.warnings = warnings;
    manifest.timings = rows
        .iter()
        .map(|r| ImageTiming {
            image_id: r.image_id.clone(),
            seconds: r.seconds,
        })
        .collect();
    manifest.total_seconds = start.elapsed().as_secs_f64();
    manifest.write(&manifest_path)?;

    println!(
        "{} images: mean ASA {mean_asa:.4}, mean BR {mean_br:.4}",
        rows.len()
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let base_net = args.hyper.network_config();
    let train_cfg = args.hyper.train_config();
    if args.counts.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one superpixel count".into(),
        ));
    }
    for &count in &args.counts {
        NetworkConfig {
            n_superpixels: count,
            ..base_net.clone()
        }
        .validate()?;
    }
    train_cfg.validate()?;

    let start = Instant::now();
    let (entries, warnings) = annotated_entries(&args.dataset)?;

    ensure_parent_dir(&args.out)?;
    let mut writer = csv::Writer::from_path(&args.out)?;
    writer.write_record(["count", "image_id", "asa", "br"])?;

    let mut manifest = RunManifest::new(base_net.clone(), train_cfg.clone());
    manifest.tolerance = Some(args.tolerance);
    manifest.sweep_counts = args.counts.clone();
    manifest.inputs = entries
        .iter()
        .map(|e| e.image.display().to_string())
        .collect();
    manifest.warnings = warnings;

    for &count in &args.counts {
        let net_cfg = NetworkConfig {
            n_superpixels: count,
            ..base_net.clone()
        };
        let rows = eval_entries(&entries, &net_cfg, &train_cfg, args.tolerance, args.oracle)?;
        for row in &rows {
            writer.write_record(&[
                count.to_string(),
                row.image_id.clone(),
                row.report.asa.to_string(),
                row.report.br.to_string(),
            ])?;
            manifest.metrics.push(ImageMetrics {
                image_id: format!("{}@n={count}", row.image_id),
                report: row.report.clone(),
            });
            manifest.timings.push(ImageTiming {
                image_id: format!("{}@n={count}", row.image_id),
                seconds: row.seconds,
            });
        }
        let mean_asa = mean(rows.iter().map(|r| r.report.asa));
        let mean_br = mean(rows.iter().map(|r| r.report.br));
        writer.write_record(&[
            count.to_string(),
            "mean".to_string(),
            mean_asa.to_string(),
            mean_br.to_string(),
        ])?;
        println!("n={count}: mean ASA {mean_asa:.4}, mean BR {mean_br:.4}");
    }
    writer.flush()?;

    let manifest_path = manifest_path_for(&args.out);
    manifest.outputs = vec![
        args.out.display().to_string(),
        manifest_path.display().to_string(),
    ];
    manifest.total_seconds = start.elapsed().as_secs_f64();
    manifest.write(&manifest_path)?;

    println!("wrote {}", args.out.display());
    Ok(())
}
