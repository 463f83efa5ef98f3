//! Command line for the representation-ensemble recognizer.
//!
//! Subcommands: `synth` (generate a synthetic dataset directory), `occlude`
//! (contaminate a dataset with noise blocks), `train` / `boost` (fit a model
//! on a class-per-directory dataset), `predict` (classify probes with a
//! trained model), `eval` (run a config-driven experiment), and `bench`
//! (per-probe latency measurement).

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ore::boost::boost;
use ore::data::{dataset_digest, load_dataset, occlude, save_dataset, synth_dataset, SyntheticSpec};
use ore::experiment::{
    boost_select, results_file_name, run_experiment, write_boost_curve_csv, write_results_csv,
    ExperimentConfig,
};
use ore::inference::{predict, predict_robust};
use ore::learn::{
    model_select, solve_ore, EnsembleModel, DEFAULT_LAMBDA, DEFAULT_MAX_ITER, DEFAULT_TOL,
    MODEL_VERSION,
};
use ore::margins::{loo_margin_matrix, MarginMatrix, ThetaCacheKey};
use ore::patch::{build_galleries, sample_patches, FaceImage};

#[derive(Parser)]
#[command(name = "ore", about = "Patch-ensemble face recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic low-rank dataset as PNG directories.
    Synth(SynthArgs),
    /// Copy a dataset with random noise blocks burned into every image.
    Occlude(OccludeArgs),
    /// Train an ensemble by direct optimization.
    Train(TrainArgs),
    /// Train an ensemble by column-generation boosting.
    Boost(BoostArgs),
    /// Classify probe images with a trained model.
    Predict(PredictArgs),
    /// Run a config-driven experiment and write result CSVs.
    Eval(EvalArgs),
    /// Measure single-threaded prediction latency per probe.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Training samples per class (the test half is written alongside).
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long, default_value_t = 5)]
    phi: usize,
    #[arg(long, default_value_t = 1)]
    surfaces: usize,
    #[arg(long, default_value_t = 48)]
    width: usize,
    #[arg(long, default_value_t = 48)]
    height: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct OccludeArgs {
    /// Input dataset directory (class per subdirectory).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Square block side in pixels.
    #[arg(long)]
    size: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Clone)]
struct FitArgs {
    /// Training dataset directory (class per subdirectory).
    #[arg(long)]
    data: PathBuf,
    /// Where to write the model JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Feature dimension per patch.
    #[arg(long, default_value_t = 100)]
    d: usize,
    /// Number of candidate patches.
    #[arg(long, default_value_t = 500)]
    patches: usize,
    /// Patch area in pixels.
    #[arg(long, default_value_t = 225)]
    area: usize,
    /// Comma-separated patch widths.
    #[arg(long, value_delimiter = ',', default_values_t = vec![5, 9, 15, 25, 45])]
    widths: Vec<usize>,
    /// Single budget; mutually exclusive with --lambda-grid.
    #[arg(long, conflicts_with = "lambda_grid")]
    lambda: Option<f64>,
    /// Comma-separated budgets for training-determined selection.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    /// Fading coefficient stored in the model for robust inference.
    #[arg(long, default_value_t = 0.2)]
    q: f64,
    /// Margin-matrix cache file, reused when the key matches.
    #[arg(long)]
    theta_cache: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args)]
struct BoostArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// Termination threshold for the edge test.
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    /// Maximum boosting rounds.
    #[arg(long, default_value_t = 100)]
    max_rounds: usize,
    /// Where to write the per-iteration curve CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Training dataset the model was fit on (rebuilds the galleries).
    #[arg(long)]
    train: PathBuf,
    /// Probe images: class-per-subdirectory tree or a flat directory.
    #[arg(long)]
    probes: PathBuf,
    /// Use robust aggregation with the model's fading coefficient.
    #[arg(long)]
    robust: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for results and curves.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    d: usize,
    /// Patches in the benchmark model (all selected).
    #[arg(long, default_value_t = 64)]
    patches: usize,
    /// Probes timed per round.
    #[arg(long, default_value_t = 100)]
    probes: usize,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(args) => run_synth(args),
        Command::Occlude(args) => run_occlude(args),
        Command::Train(args) => run_train(args.fit),
        Command::Boost(args) => run_boost(args),
        Command::Predict(args) => run_predict(args),
        Command::Eval(args) => run_eval(args),
        Command::Bench(args) => run_bench(args),
    }
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        classes: args.classes,
        samples_per_class: args.samples,
        phi: args.phi,
        surfaces: args.surfaces,
        width: args.width,
        height: args.height,
        noise_sigma: args.noise,
        seed: args.seed,
    };
    let (train, test) = synth_dataset(&spec)?;
    save_dataset(&args.out.join("train"), &train)?;
    save_dataset(&args.out.join("test"), &test)?;
    println!(
        "wrote {} train and {} test images under {}",
        train.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

fn run_occlude(args: OccludeArgs) -> Result<()> {
    let images = load_dataset(&args.input, false)?;
    let occluded: Vec<FaceImage> = images
        .iter()
        .enumerate()
        .map(|(i, img)| occlude(img, args.size, ore::numerics::mix_seed(args.seed, i as u64)))
        .collect::<ore::Result<_>>()?;
    save_dataset(&args.out, &occluded)?;
    println!(
        "occluded {} images with {}x{} blocks into {}",
        occluded.len(),
        args.size,
        args.size,
        args.out.display()
    );
    Ok(())
}

struct Fitted {
    train: Vec<FaceImage>,
    specs: Vec<ore::patch::PatchSpec>,
    mm: MarginMatrix,
    class_count: usize,
    digest: String,
}

fn prepare_fit(fit: &FitArgs) -> Result<Fitted> {
    let train = load_dataset(&fit.data, true)?;
    let digest = dataset_digest(&train);
    let specs = sample_patches(
        train[0].width,
        train[0].height,
        fit.patches,
        fit.area,
        &fit.widths,
        fit.seed,
    )?;
    let set = build_galleries(&train, &specs, fit.d)?;
    let key = ThetaCacheKey {
        dataset_digest: digest.clone(),
        seed: fit.seed,
        d: fit.d,
        patch_count: fit.patches,
    };

    let mm = match &fit.theta_cache {
        Some(path) if path.exists() => match MarginMatrix::load_cache(path, &key) {
            Ok(cached) => {
                eprintln!("reusing margin cache {}", path.display());
                cached
            }
            Err(err) => {
                eprintln!("margin cache rejected ({err}); recomputing");
                let mm = loo_margin_matrix(&train, &set)?;
                mm.save_cache(path, &key)?;
                mm
            }
        },
        Some(path) => {
            let mm = loo_margin_matrix(&train, &set)?;
            mm.save_cache(path, &key)?;
            mm
        }
        None => loo_margin_matrix(&train, &set)?,
    };

    Ok(Fitted {
        class_count: set.class_count,
        train,
        specs,
        mm,
        digest,
    })
}

fn model_from(fit: &FitArgs, fitted: &Fitted, lambda: f64, alpha: Vec<f64>) -> EnsembleModel {
    EnsembleModel {
        version: MODEL_VERSION,
        d: fit.d,
        lambda,
        q: fit.q,
        alpha,
        specs: fitted.specs.clone(),
        class_ids: (1..=fitted.class_count).collect(),
        train_digest: fitted.digest.clone(),
    }
}

fn run_train(fit: FitArgs) -> Result<()> {
    let fitted = prepare_fit(&fit)?;
    let (lambda, alpha) = match (fit.lambda, &fit.lambda_grid) {
        (Some(lambda), _) => (
            lambda,
            solve_ore(&fitted.mm, lambda, DEFAULT_TOL, DEFAULT_MAX_ITER)?,
        ),
        (None, Some(grid)) => model_select(&fitted.mm, grid)?,
        (None, None) => (
            DEFAULT_LAMBDA,
            solve_ore(&fitted.mm, DEFAULT_LAMBDA, DEFAULT_TOL, DEFAULT_MAX_ITER)?,
        ),
    };
    let model = model_from(&fit, &fitted, lambda, alpha);
    model.save(&fit.out)?;
    println!(
        "trained on {} images; lambda {}; {} of {} patches selected; model at {}",
        fitted.train.len(),
        lambda,
        model.selected().len(),
        fit.patches,
        fit.out.display()
    );
    Ok(())
}

fn run_boost(args: BoostArgs) -> Result<()> {
    let fit = args.fit;
    let fitted = prepare_fit(&fit)?;
    let (lambda, outcome) = match (fit.lambda, &fit.lambda_grid) {
        (Some(lambda), _) => (lambda, boost(&fitted.mm, lambda, args.epsilon, args.max_rounds)?),
        (None, Some(grid)) => boost_select(&fitted.mm, grid, args.epsilon, args.max_rounds)?,
        (None, None) => (
            DEFAULT_LAMBDA,
            boost(&fitted.mm, DEFAULT_LAMBDA, args.epsilon, args.max_rounds)?,
        ),
    };
    if let Some(curve) = &args.curve {
        write_boost_curve_csv(curve, &outcome.log)?;
    }
    let model = model_from(&fit, &fitted, lambda, outcome.alpha);
    model.save(&fit.out)?;
    println!(
        "boosted {} rounds; lambda {}; {} columns selected; model at {}",
        outcome.log.len(),
        lambda,
        outcome.selected.len(),
        fit.out.display()
    );
    Ok(())
}

/// Probe images plus display ids: either the class tree the loader reads, or
/// a flat directory of images.
fn load_probes(path: &Path) -> Result<Vec<(String, FaceImage)>> {
    let has_subdirs = fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .any(|e| e.path().is_dir());
    if has_subdirs {
        let images = load_dataset(path, false)?;
        return Ok(images
            .into_iter()
            .map(|img| (format!("{}/{}", img.label, img.sample_index), img))
            .collect());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|s| s.to_str()),
                Some("pgm") | Some("png")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no probe images under {}", path.display());
    }
    let mut probes = Vec::new();
    for (i, file) in files.iter().enumerate() {
        let img = ore::data::load_image(file)
            .with_context(|| format!("reading {}", file.display()))?;
        let name = file
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| i.to_string());
        probes.push((name, img));
    }
    Ok(probes)
}

fn run_predict(args: PredictArgs) -> Result<()> {
    use std::io::Write;

    let model = EnsembleModel::load(&args.model)?;
    let train = load_dataset(&args.train, true)?;
    if dataset_digest(&train) != model.train_digest {
        eprintln!("warning: training data digest differs from the model's");
    }
    let set = build_galleries(&train, &model.specs, model.d)?;
    let probes = load_probes(&args.probes)?;

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    // A closed pipe downstream just ends the listing.
    if writeln!(out, "probe_id,label,top1,top2,top3,mean_gfc").is_err() {
        return Ok(());
    }
    for (id, probe) in &probes {
        let prediction = if args.robust {
            predict_robust(&model, &set, probe, model.q)?
        } else {
            predict(&model, &set, probe)?
        };
        let top: Vec<String> = prediction
            .top_classes(3)
            .into_iter()
            .map(|(class, xi)| format!("{class}:{xi:.6}"))
            .collect();
        let padded = [
            top.first().cloned().unwrap_or_default(),
            top.get(1).cloned().unwrap_or_default(),
            top.get(2).cloned().unwrap_or_default(),
        ];
        let line = format!(
            "{id},{},{},{},{},{:.6}",
            prediction.label,
            padded[0],
            padded[1],
            padded[2],
            prediction.mean_gfc()
        );
        if writeln!(out, "{line}").is_err() {
            return Ok(());
        }
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let report = run_experiment(&cfg)?;
    fs::create_dir_all(&args.out_dir)?;

    for group in &report.groups {
        let results = args.out_dir.join(results_file_name(group.occlusion));
        write_results_csv(&results, &group.rows)?;
        for (rep, log) in &group.boost_curves {
            let name = match (group.occlusion, rep) {
                (None, 0) => "boost_curve.csv".to_string(),
                (None, r) => format!("boost_curve_rep{r}.csv"),
                (Some(s), r) => format!("boost_curve_s{s}_rep{r}.csv"),
            };
            write_boost_curve_csv(&args.out_dir.join(name), log)?;
        }
        let label = match group.occlusion {
            None => "clean".to_string(),
            Some(s) => format!("occlusion s={s}"),
        };
        println!(
            "{label}: accuracy {:.2} +/- {:.2} | {:.3} ms/probe | {} rows -> {}",
            group.mean_accuracy,
            group.std_accuracy,
            group.mean_ms_per_probe,
            group.rows.len(),
            results.display()
        );
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    // Synthetic instance sized for the latency contract: every patch
    // selected, uniform weights, no training in the loop.
    let spec = SyntheticSpec {
        classes: 10,
        samples_per_class: 10,
        phi: 3,
        surfaces: 1,
        width: 64,
        height: 64,
        noise_sigma: 0.05,
        seed: args.seed,
    };
    let (train, test) = synth_dataset(&spec)?;
    let specs = sample_patches(64, 64, args.patches, 225, &[5, 9, 15, 25, 45], args.seed)?;
    let set = build_galleries(&train, &specs, args.d)?;
    let model = EnsembleModel {
        version: MODEL_VERSION,
        d: args.d,
        lambda: 1.0,
        q: 0.2,
        alpha: vec![1.0 / args.patches as f64; args.patches],
        specs,
        class_ids: (1..=10).collect(),
        train_digest: String::new(),
    };

    let probes: Vec<&FaceImage> = test.iter().cycle().take(args.probes).collect();
    // Warm-up pass, then the timed pass.
    for probe in &probes {
        predict(&model, &set, probe)?;
    }
    let start = Instant::now();
    let mut correct = 0usize;
    for probe in &probes {
        if predict(&model, &set, probe)?.label == probe.label {
            correct += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let per_probe = elapsed / probes.len() as f64;
    println!(
        "{} probes, {} patches, d={}: {per_probe:.3} ms/probe ({} correct)",
        probes.len(),
        args.patches,
        args.d,
        correct
    );
    Ok(())
}
