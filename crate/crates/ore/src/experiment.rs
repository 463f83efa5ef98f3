//! Experiment orchestration: config parsing, per-repetition train/test runs,
//! and the CSV outputs.
//!
//! A repetition draws its own split (or synthetic dataset), builds galleries
//! and margins, trains by the configured method, and times prediction per
//! probe. Occlusion sizes each get their own evaluation group: training
//! always sees clean images, the held-out probes are contaminated after the
//! split so a probe never coexists with its clean twin.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::baselines::{lrc_classify, nn_classify, BlockPartition, DefClassifier, DefFusion};
use crate::boost::{boost, BoostIteration};
use crate::data::{dataset_digest, load_dataset, occlude, synth_dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::inference::{predict, predict_robust};
use crate::learn::{
    model_select, solve_ore, EnsembleModel, DEFAULT_LAMBDA, DEFAULT_MAX_ITER, DEFAULT_TOL,
    MODEL_VERSION,
};
use crate::margins::{loo_margin_matrix, training_error};
use crate::numerics::{hat_operator, mix_seed, random_projection, unit_normalize};
use crate::par;
use crate::patch::{build_galleries, class_members, sample_patches, FaceImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Nn,
    Lrc,
    Def,
    Ore,
    OreRobust,
    OreBoost,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Nn => "nn",
            Method::Lrc => "lrc",
            Method::Def => "def",
            Method::Ore => "ore",
            Method::OreRobust => "ore-robust",
            Method::OreBoost => "ore-boost",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" => Ok(Method::Nn),
            "lrc" => Ok(Method::Lrc),
            "def" => Ok(Method::Def),
            "ore" => Ok(Method::Ore),
            "ore-robust" => Ok(Method::OreRobust),
            "ore-boost" => Ok(Method::OreBoost),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DatasetSource {
    /// Class-per-directory image tree.
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

/// Full experiment description; the JSON config file holds exactly these
/// fields and rejects unknown keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Feature dimension per patch.
    pub d: usize,
    /// Number of candidate patches.
    #[serde(rename = "t")]
    pub patches: usize,
    /// Patch area in pixels.
    pub area: usize,
    pub widths: Vec<usize>,
    /// Candidate budgets; empty means trivial regularization (one solve at
    /// the default budget).
    pub lambda_grid: Vec<f64>,
    /// Fading coefficient for robust inference.
    pub q: f64,
    /// Boosting termination threshold.
    pub epsilon: f64,
    /// Maximum boosting rounds.
    #[serde(rename = "s")]
    pub max_rounds: usize,
    /// Per-repetition seeds; repetition i uses `seeds[i]`, or a value derived
    /// from `seeds[0]` when the list is shorter.
    pub seeds: Vec<u64>,
    pub repetitions: usize,
    pub dataset: DatasetSource,
    /// Occlusion block sizes to evaluate; empty means clean probes only.
    pub occlusion_sizes: Vec<usize>,
}

impl ExperimentConfig {
    /// Defaults for a dataset: 500 patches of 225 pixels with widths
    /// {5, 9, 15, 25, 45}, d = 100, budgets 1/lambda in {10, ..., 100},
    /// q = 0.2, epsilon = 1e-5, 100 boosting rounds, 5 repetitions.
    pub fn with_defaults(method: Method, dataset: DatasetSource) -> Self {
        Self {
            method,
            d: 100,
            patches: 500,
            area: 225,
            widths: vec![5, 9, 15, 25, 45],
            lambda_grid: default_lambda_grid(),
            q: 0.2,
            epsilon: 1e-5,
            max_rounds: 100,
            seeds: vec![0],
            repetitions: 5,
            dataset,
            occlusion_sizes: vec![],
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(0.0..=1.0).contains(&self.q) {
            return Err(Error::Config("q must lie in [0, 1]".into()));
        }
        if self.max_rounds == 0 {
            return Err(Error::Config("s must be >= 1".into()));
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
        }
        Ok(())
    }

    fn rep_seed(&self, rep: usize) -> u64 {
        self.seeds
            .get(rep)
            .copied()
            .unwrap_or_else(|| mix_seed(self.seeds[0], rep as u64))
    }
}

/// The grid 1/lambda in {10, 20, ..., 100}.
pub fn default_lambda_grid() -> Vec<f64> {
    (1..=10).map(|x| 1.0 / (10.0 * x as f64)).collect()
}

/// One results row; the CSV columns are exactly these fields.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub method: String,
    pub d: usize,
    pub rep: usize,
    /// Percent correct on the probe set.
    pub accuracy: f64,
    pub ms_per_probe: f64,
    pub n_selected: usize,
}

/// Rows and summary for one occlusion setting.
#[derive(Debug, Clone)]
pub struct GroupResult {
    /// Occlusion block size; `None` for clean probes.
    pub occlusion: Option<usize>,
    pub rows: Vec<ResultRow>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_ms_per_probe: f64,
    /// Boost curves per repetition (only for the boosting method).
    pub boost_curves: Vec<(usize, Vec<BoostIteration>)>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub groups: Vec<GroupResult>,
}

struct RepOutcome {
    accuracy: f64,
    ms_per_probe: f64,
    n_selected: usize,
    boost_log: Option<Vec<BoostIteration>>,
}

/// Split a dataset in half per class (floor(count/2) training images each),
/// shuffled by the repetition seed.
fn split_dataset(
    images: &[FaceImage],
    seed: u64,
) -> Result<(Vec<FaceImage>, Vec<FaceImage>)> {
    let k = images.iter().map(|f| f.label).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 1..=k {
        let mut members = class_members(images, class);
        members.shuffle(&mut rng);
        let m = members.len() / 2;
        if m == 0 {
            return Err(Error::Protocol(format!(
                "class {class} has too few images to split"
            )));
        }
        for (pos, &idx) in members.iter().enumerate() {
            let mut img = images[idx].clone();
            img.sample_index = pos;
            if pos < m {
                train.push(img);
            } else {
                test.push(img);
            }
        }
    }
    Ok((train, test))
}

fn materialize(
    cfg: &ExperimentConfig,
    rep_seed: u64,
) -> Result<(Vec<FaceImage>, Vec<FaceImage>)> {
    match &cfg.dataset {
        DatasetSource::Path(path) => {
            let images = load_dataset(path, true)?;
            split_dataset(&images, rep_seed)
        }
        DatasetSource::Synthetic(spec) => {
            let seeded = SyntheticSpec {
                seed: mix_seed(spec.seed, rep_seed),
                ..spec.clone()
            };
            synth_dataset(&seeded)
        }
    }
}

fn apply_occlusion(test: &[FaceImage], size: Option<usize>, seed: u64) -> Result<Vec<FaceImage>> {
    match size {
        None => Ok(test.to_vec()),
        Some(s) => test
            .iter()
            .enumerate()
            .map(|(i, img)| occlude(img, s, mix_seed(seed, i as u64)))
            .collect(),
    }
}

/// Project whole images to `d` dims (identity when `d >= D`) and normalize.
fn whole_image_features(
    images: &[FaceImage],
    d: usize,
    seed: u64,
) -> Result<Vec<nalgebra::DVector<f64>>> {
    let dim = images[0].width * images[0].height;
    let projection = if d >= dim {
        None
    } else {
        Some(random_projection(dim, d, seed)?)
    };
    Ok(images
        .iter()
        .map(|img| {
            let raw = nalgebra::DVector::from_vec(img.pixels.clone());
            let v = match &projection {
                Some(p) => p * raw,
                None => raw,
            };
            unit_normalize(v).0
        })
        .collect())
}

fn run_rep(
    cfg: &ExperimentConfig,
    rep: usize,
    occlusion: Option<usize>,
) -> Result<RepOutcome> {
    let rep_seed = cfg.rep_seed(rep);
    let (train, test_clean) = materialize(cfg, rep_seed)?;
    let test = apply_occlusion(&test_clean, occlusion, mix_seed(rep_seed, 0x0CC1))?;
    let truth: Vec<usize> = test.iter().map(|f| f.label).collect();

    let mut n_selected = 0usize;
    let mut boost_log = None;
    let predictions: Vec<usize>;
    let elapsed_ms: f64;

    match cfg.method {
        Method::Nn | Method::Lrc => {
            let proj_seed = mix_seed(rep_seed, 0xFEA7);
            let train_vecs = whole_image_features(&train, cfg.d, proj_seed)?;
            let labels: Vec<usize> = train.iter().map(|f| f.label).collect();
            let test_vecs = whole_image_features(&test, cfg.d, proj_seed)?;

            let class_ops = if cfg.method == Method::Lrc {
                let k = labels.iter().max().copied().unwrap_or(0);
                let mut ops = Vec::with_capacity(k);
                for class in 1..=k {
                    let cols: Vec<nalgebra::DVector<f64>> = class_members(&train, class)
                        .into_iter()
                        .map(|i| train_vecs[i].clone())
                        .collect();
                    ops.push(hat_operator(&nalgebra::DMatrix::from_columns(&cols), None)?);
                }
                Some(ops)
            } else {
                None
            };

            let start = Instant::now();
            predictions = test_vecs
                .iter()
                .map(|probe| match &class_ops {
                    Some(ops) => lrc_classify(ops, probe),
                    None => nn_classify(&train_vecs, &labels, probe),
                })
                .collect::<Result<_>>()?;
            elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        }
        Method::Def => {
            let clf = DefClassifier::build(BlockPartition::default(), DefFusion::default(), &train)?;
            let start = Instant::now();
            predictions = test
                .iter()
                .map(|probe| clf.classify(probe))
                .collect::<Result<_>>()?;
            elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        }
        Method::Ore | Method::OreRobust | Method::OreBoost => {
            let specs = sample_patches(
                train[0].width,
                train[0].height,
                cfg.patches,
                cfg.area,
                &cfg.widths,
                rep_seed,
            )?;
            let set = build_galleries(&train, &specs, cfg.d)?;
            let mm = loo_margin_matrix(&train, &set)?;

            let (lambda, alpha) = match cfg.method {
                Method::OreBoost => {
                    let (lambda, outcome) = if cfg.lambda_grid.is_empty() {
                        (
                            DEFAULT_LAMBDA,
                            boost(&mm, DEFAULT_LAMBDA, cfg.epsilon, cfg.max_rounds)?,
                        )
                    } else {
                        boost_select(&mm, &cfg.lambda_grid, cfg.epsilon, cfg.max_rounds)?
                    };
                    boost_log = Some(outcome.log.clone());
                    (lambda, outcome.alpha)
                }
                _ => {
                    if cfg.lambda_grid.is_empty() {
                        (
                            DEFAULT_LAMBDA,
                            solve_ore(&mm, DEFAULT_LAMBDA, DEFAULT_TOL, DEFAULT_MAX_ITER)?,
                        )
                    } else {
                        model_select(&mm, &cfg.lambda_grid)?
                    }
                }
            };

            let model = EnsembleModel {
                version: MODEL_VERSION,
                d: cfg.d,
                lambda,
                q: cfg.q,
                alpha,
                specs,
                class_ids: (1..=set.class_count).collect(),
                train_digest: dataset_digest(&train),
            };
            n_selected = model.selected().len();

            let start = Instant::now();
            predictions = test
                .iter()
                .map(|probe| {
                    let p = match cfg.method {
                        Method::OreRobust => predict_robust(&model, &set, probe, cfg.q)?,
                        _ => predict(&model, &set, probe)?,
                    };
                    Ok(p.label)
                })
                .collect::<Result<_>>()?;
            elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        }
    }

    let correct = predictions
        .iter()
        .zip(&truth)
        .filter(|(a, b)| a == b)
        .count();
    Ok(RepOutcome {
        accuracy: 100.0 * correct as f64 / truth.len() as f64,
        ms_per_probe: elapsed_ms / truth.len() as f64,
        n_selected,
        boost_log,
    })
}

/// Training-determined model selection for the boosting path: boost once per
/// budget, keep the smallest training error, smaller lambda on ties.
pub fn boost_select(
    mm: &crate::margins::MarginMatrix,
    grid: &[f64],
    epsilon: f64,
    max_rounds: usize,
) -> Result<(f64, crate::boost::BoostOutcome)> {
    let solved: Vec<Result<(f64, crate::boost::BoostOutcome, f64)>> =
        par::map_slice(grid, |&lambda| {
            let outcome = boost(mm, lambda, epsilon, max_rounds)?;
            let err = training_error(mm, &outcome.alpha);
            Ok((lambda, outcome, err))
        });
    let mut best: Option<(f64, crate::boost::BoostOutcome, f64)> = None;
    for item in solved {
        let (lambda, outcome, err) = item?;
        best = match best {
            None => Some((lambda, outcome, err)),
            Some((bl, bo, be)) => {
                if err < be || (err == be && lambda < bl) {
                    Some((lambda, outcome, err))
                } else {
                    Some((bl, bo, be))
                }
            }
        };
    }
    let (lambda, outcome, _) = best.unwrap();
    Ok((lambda, outcome))
}

/// Run the configured experiment: `repetitions` independent splits per
/// occlusion setting, reported as mean and standard deviation of accuracy.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let sizes: Vec<Option<usize>> = if cfg.occlusion_sizes.is_empty() {
        vec![None]
    } else {
        cfg.occlusion_sizes.iter().map(|&s| Some(s)).collect()
    };

    let mut groups = Vec::with_capacity(sizes.len());
    for occlusion in sizes {
        let outcomes: Vec<Result<RepOutcome>> =
            par::map_indexed(cfg.repetitions, |rep| run_rep(cfg, rep, occlusion));

        let mut rows = Vec::with_capacity(cfg.repetitions);
        let mut boost_curves = Vec::new();
        for (rep, outcome) in outcomes.into_iter().enumerate() {
            let outcome = outcome?;
            rows.push(ResultRow {
                method: cfg.method.name().to_string(),
                d: cfg.d,
                rep,
                accuracy: outcome.accuracy,
                ms_per_probe: outcome.ms_per_probe,
                n_selected: outcome.n_selected,
            });
            if let Some(log) = outcome.boost_log {
                boost_curves.push((rep, log));
            }
        }

        let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let std = if accs.len() > 1 {
            (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (accs.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        let mean_ms = rows.iter().map(|r| r.ms_per_probe).sum::<f64>() / rows.len() as f64;
        groups.push(GroupResult {
            occlusion,
            rows,
            mean_accuracy: mean,
            std_accuracy: std,
            mean_ms_per_probe: mean_ms,
            boost_curves,
        });
    }
    Ok(ExperimentReport { groups })
}

/// Write a results CSV: `method,d,rep,accuracy,ms_per_probe,n_selected`.
pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["method", "d", "rep", "accuracy", "ms_per_probe", "n_selected"])?;
    for row in rows {
        writer.write_record([
            row.method.clone(),
            row.d.to_string(),
            row.rep.to_string(),
            format!("{:.4}", row.accuracy),
            format!("{:.4}", row.ms_per_probe),
            row.n_selected.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Write a boosting curve CSV: `iter,t_selected,edge,r,objective,train_err`.
pub fn write_boost_curve_csv(path: &Path, log: &[BoostIteration]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["iter", "t_selected", "edge", "r", "objective", "train_err"])?;
    for row in log {
        writer.write_record([
            row.iteration.to_string(),
            row.t_selected.to_string(),
            format!("{:.10e}", row.edge),
            format!("{:.10e}", row.r),
            format!("{:.10e}", row.objective),
            format!("{:.6}", row.train_err),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Results file name for an occlusion group: `results.csv` for clean probes,
/// `results_s{size}.csv` under occlusion.
pub fn results_file_name(occlusion: Option<usize>) -> String {
    match occlusion {
        None => "results.csv".to_string(),
        Some(s) => format!("results_s{s}.csv"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_synth(method: Method) -> ExperimentConfig {
        ExperimentConfig {
            method,
            d: 16,
            patches: 6,
            area: 25,
            widths: vec![5],
            lambda_grid: vec![0.05, 0.1],
            q: 0.2,
            epsilon: 1e-5,
            max_rounds: 20,
            seeds: vec![7],
            repetitions: 2,
            dataset: DatasetSource::Synthetic(SyntheticSpec {
                classes: 3,
                samples_per_class: 5,
                phi: 2,
                surfaces: 1,
                width: 12,
                height: 12,
                noise_sigma: 0.0,
                seed: 11,
            }),
            occlusion_sizes: vec![],
        }
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = tiny_synth(Method::Ore);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        cfg.save(&path).unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg, loaded);

        let mut doc: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        doc["mystery"] = serde_json::json!(true);
        fs::write(&path, doc.to_string()).unwrap();
        assert!(ExperimentConfig::load(&path).is_err());
    }

    #[test]
    fn noiseless_synthetic_is_perfect() {
        let report = run_experiment(&tiny_synth(Method::Ore)).unwrap();
        let group = &report.groups[0];
        assert_eq!(group.mean_accuracy, 100.0);
        assert_eq!(group.std_accuracy, 0.0);
    }

    #[test]
    fn reports_are_reproducible() {
        let cfg = tiny_synth(Method::OreRobust);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        for (ga, gb) in a.groups.iter().zip(&b.groups) {
            for (ra, rb) in ga.rows.iter().zip(&gb.rows) {
                assert_eq!(ra.accuracy, rb.accuracy);
                assert_eq!(ra.n_selected, rb.n_selected);
            }
        }
    }

    #[test]
    fn boost_method_emits_curves() {
        let mut cfg = tiny_synth(Method::OreBoost);
        cfg.repetitions = 1;
        cfg.lambda_grid = vec![0.1];
        let report = run_experiment(&cfg).unwrap();
        let group = &report.groups[0];
        assert_eq!(group.boost_curves.len(), 1);
        assert!(!group.boost_curves[0].1.is_empty());

        let dir = tempfile::tempdir().unwrap();
        let curve = dir.path().join("boost_curve.csv");
        write_boost_curve_csv(&curve, &group.boost_curves[0].1).unwrap();
        let text = fs::read_to_string(&curve).unwrap();
        assert!(text.starts_with("iter,t_selected,edge,r,objective,train_err"));

        let results = dir.path().join(results_file_name(None));
        write_results_csv(&results, &group.rows).unwrap();
        let text = fs::read_to_string(&results).unwrap();
        assert!(text.starts_with("method,d,rep,accuracy,ms_per_probe,n_selected"));
        assert!(text.contains("ore-boost"));
    }

    #[test]
    fn baselines_run_on_split_data() {
        for method in [Method::Nn, Method::Lrc, Method::Def] {
            let mut cfg = tiny_synth(method);
            cfg.repetitions = 1;
            cfg.d = 30;
            if method == Method::Def {
                // Blocks need a grid divisible enough to stay meaningful.
                cfg.dataset = DatasetSource::Synthetic(SyntheticSpec {
                    classes: 2,
                    samples_per_class: 4,
                    phi: 2,
                    surfaces: 1,
                    width: 18,
                    height: 24,
                    noise_sigma: 0.0,
                    seed: 3,
                });
            }
            let report = run_experiment(&cfg).unwrap();
            let group = &report.groups[0];
            assert_eq!(group.rows.len(), 1);
            assert!(group.mean_accuracy >= 50.0, "{method:?} below chance");
        }
    }

    #[test]
    fn occlusion_groups_are_separate() {
        let mut cfg = tiny_synth(Method::OreRobust);
        cfg.repetitions = 1;
        cfg.occlusion_sizes = vec![3, 5];
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.groups.len(), 2);
        assert_eq!(report.groups[0].occlusion, Some(3));
        assert_eq!(report.groups[1].occlusion, Some(5));
        assert_eq!(results_file_name(Some(5)), "results_s5.csv");
    }
}
