use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fvlayer::data_io::{
    pca_apply, pca_fit_with_spectrum, read_checkpoint, read_featureset, read_labels, subsample, write_checkpoint,
    write_featureset, write_pca, MinMaxScaler, DEFAULT_SUBSAMPLE,
};
use fvlayer::gradcheck;
use fvlayer::par::Workers;
use fvlayer::pipeline::{self, bench, ShiftConfig};
use fvlayer::{Dataset, FeatureSet, LabeledImage, Matrix, NormConfig, TrainConfig, TrainMode, TrainState};

#[derive(Parser)]
#[command(name = "fvlayer", version, about = "Fisher Vector encoding with jointly trained mixture, feature layer and SVMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a PCA projection on a directory of .fvfs descriptor files.
    Pca(PcaArgs),
    /// Run phase-1 initialization and joint training.
    Train(TrainArgs),
    /// Score a labelled set with a saved checkpoint.
    Eval(EvalArgs),
    /// Compare every analytic derivative block against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Point-shifting demo on synthetic 2D data.
    Demo2d(DemoArgs),
    /// Time the forward and backward passes.
    Bench(BenchArgs),
}

#[derive(clap::Args)]
struct PcaArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long)]
    out: PathBuf,
    /// Min-max scale to [-1, 1] before fitting and rescale each projected
    /// component by its largest magnitude on the input set.
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    project_out: Option<PathBuf>,
    #[arg(long, requires = "extra_out")]
    extra_input: Option<PathBuf>,
    #[arg(long, requires = "extra_input")]
    extra_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "theta-gmm-feature")]
    mode: TrainMode,
    #[arg(long, default_value_t = 32)]
    k: usize,
    #[arg(long, default_value_t = 24)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    eta: f64,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, env = "FVLAYER_THREADS")]
    threads: Option<usize>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training seed; regenerates the initial layer used to invert inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "FVLAYER_THREADS")]
    threads: Option<usize>,
}

#[derive(clap::Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 40)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    images: usize,
    /// Per-step point positions.
    #[arg(long)]
    out: PathBuf,
    /// Per-step accuracy and separation; printed to stdout when omitted.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1000,2000")]
    t: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "32")]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64")]
    d: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1", env = "FVLAYER_THREADS")]
    threads: Vec<usize>,
    #[arg(long, default_value_t = 24)]
    images: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Bad arguments detected after parsing; exits with status 2 like clap's own errors.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn workers(threads: Option<usize>) -> Result<Workers> {
    match threads {
        Some(0) => Err(usage("--threads must be at least 1")),
        Some(n) => Ok(Workers(n)),
        None => Ok(Workers::from_env()),
    }
}

/// `.fvfs` files in `dir`, sorted by file name.
fn fvfs_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "fvfs"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .fvfs files in {}", dir.display());
    }
    Ok(files)
}

fn read_sets(files: &[PathBuf]) -> Result<Vec<FeatureSet>> {
    files
        .iter()
        .map(|f| read_featureset(f).with_context(|| format!("reading {}", f.display())))
        .collect()
}

fn load_dataset(dir: &Path, labels: &Path, seed: u64) -> Result<Dataset> {
    let rows = read_labels(labels).with_context(|| format!("reading {}", labels.display()))?;
    let mut items = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        let path = dir.join(format!("{}.fvfs", row.id));
        let full = read_featureset(&path).with_context(|| format!("reading {}", path.display()))?;
        let features = Arc::new(subsample(&full, DEFAULT_SUBSAMPLE, seed.wrapping_add(i as u64)));
        items.push(LabeledImage { id: row.id, features, labels: row.labels });
    }
    Ok(Dataset::new(items)?)
}

fn write_projected(files: &[PathBuf], sets: &[FeatureSet], out_dir: &Path, scale: Option<&[f64]>) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    for (file, set) in files.iter().zip(sets) {
        let set = match scale {
            Some(s) => set.map_points(set.dim(), |p, out| {
                for d in 0..p.len() {
                    out[d] = p[d] / s[d];
                }
            })?,
            None => set.clone(),
        };
        write_featureset(out_dir.join(file.file_name().expect("file name")), &set)?;
    }
    Ok(())
}

fn cmd_pca(a: PcaArgs) -> Result<()> {
    let files = fvfs_files(&a.input)?;
    let mut sets = read_sets(&files)?;
    let d0 = sets[0].dim();
    if a.dim == 0 || a.dim > d0 {
        return Err(usage(format!("--dim must be in 1..={d0}, got {}", a.dim)));
    }
    let scaler = if a.normalize { Some(MinMaxScaler::fit(&sets)?) } else { None };
    if let Some(s) = &scaler {
        sets = sets.iter().map(|x| s.apply(x)).collect::<fvlayer::Result<_>>()?;
    }
    let mut rows = Vec::new();
    for (i, set) in sets.iter().enumerate() {
        let picked = subsample(set, DEFAULT_SUBSAMPLE, a.seed.wrapping_add(i as u64));
        rows.extend(picked.points().map(|p| p.to_vec()));
    }
    let (model, spectrum) = pca_fit_with_spectrum(&Matrix::from_rows(&rows)?, a.dim)?;
    let total: f64 = spectrum.iter().sum();
    let kept: f64 = spectrum.iter().take(a.dim).sum();
    println!("pca: {} files, {} samples, D0={d0} -> {}, captured variance {:.4}", files.len(), rows.len(), a.dim, kept / total);
    write_pca(&a.out, &model)?;

    let project = |sets: &[FeatureSet]| -> Result<Vec<FeatureSet>> {
        Ok(sets.iter().map(|x| pca_apply(&model, x)).collect::<fvlayer::Result<_>>()?)
    };
    let projected = project(&sets)?;
    let scale = if a.normalize {
        let mut m = vec![0.0f64; a.dim];
        for p in projected.iter().flat_map(|s| s.points()) {
            m.iter_mut().zip(p).for_each(|(m, v)| *m = m.max(v.abs()));
        }
        // A tiny margin keeps the largest value strictly inside (-1, 1).
        Some(m.iter().map(|v| if *v > 0.0 { v * (1.0 + 1e-6) } else { 1.0 }).collect::<Vec<_>>())
    } else {
        None
    };
    if let Some(dir) = &a.project_out {
        write_projected(&files, &projected, dir, scale.as_deref())?;
    }
    if let (Some(input), Some(out)) = (&a.extra_input, &a.extra_out) {
        let extra_files = fvfs_files(input)?;
        let mut extra = read_sets(&extra_files)?;
        if let Some(s) = &scaler {
            extra = extra.iter().map(|x| s.apply(x)).collect::<fvlayer::Result<_>>()?;
        }
        write_projected(&extra_files, &project(&extra)?, out, scale.as_deref())?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        components: a.k,
        batch_size: a.batch,
        eta: a.eta,
        joint_epochs: a.epochs,
        mode: a.mode,
        seed: a.seed,
        workers: workers(a.threads)?,
        ..Default::default()
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    println!("{}", config.describe());
    let dataset = load_dataset(&a.train, &a.labels, a.seed)?;
    println!("train: {} images, {} classes, D={}", dataset.len(), dataset.num_classes(), dataset.dim().unwrap_or(0));
    let state = pipeline::train(&dataset, &config)?;
    for row in state.metrics.iter().filter(|r| r.epoch == state.epoch) {
        log::info!("epoch {} class {}: ap {:.4}, gap {:.2e}", row.epoch, row.class, row.ap, row.gap);
    }
    let eval = pipeline::evaluate(&dataset, &state, config.workers)?;
    println!("train mean AP {:.4}", eval.mean_ap);
    if let Some(path) = &a.metrics {
        pipeline::write_metrics_csv(&state.metrics, BufWriter::new(File::create(path)?))?;
    }
    if let Some(path) = &a.checkpoint {
        write_checkpoint(path, &state.to_checkpoint())?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let state = TrainState::from_checkpoint(&ckpt, a.seed, NormConfig::default())?;
    let dataset = load_dataset(&a.test, &a.labels, a.seed)?;
    let eval = pipeline::evaluate(&dataset, &state, workers(a.threads)?)?;
    println!("class,ap,accuracy");
    for (c, r) in eval.per_class.iter().enumerate() {
        println!("{c},{:.6},{:.6}", r.ap, r.accuracy);
    }
    println!("mean AP {:.6}", eval.mean_ap);
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<bool> {
    let report = gradcheck::run_suite(seed)?;
    print!("{}", report.table());
    Ok(report.passed())
}

fn cmd_demo(a: DemoArgs) -> Result<()> {
    let dataset = fvlayer::data_io::make_synthetic_2d(a.images, a.seed)?;
    let cfg = ShiftConfig { steps: a.steps, eta: a.eta, seed: a.seed, ..Default::default() };
    let trace = pipeline::shift_demo(&dataset, &cfg)?;
    trace.write_positions_csv(BufWriter::new(File::create(&a.out)?))?;
    match &a.summary {
        Some(path) => trace.write_summary_csv(BufWriter::new(File::create(path)?))?,
        None => trace.write_summary_csv(io::stdout().lock())?,
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    if a.threads.contains(&0) {
        return Err(usage("--threads must be at least 1"));
    }
    let mut out = io::stdout().lock();
    writeln!(out, "{}", bench::BENCH_HEADER)?;
    for &t in &a.t {
        for &k in &a.k {
            for &d in &a.d {
                for &threads in &a.threads {
                    let row = bench::measure(t, k, d, threads, a.images, a.repeats, a.seed)?;
                    writeln!(out, "{}", row.csv())?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pca(a) => cmd_pca(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Demo2d(a) => cmd_demo(a).map(|_| true),
        Command::Bench(a) => cmd_bench(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
