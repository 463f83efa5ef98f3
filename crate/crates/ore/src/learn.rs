//! Exponential-loss ensemble learning over leave-one-out margins.
//!
//! The problem: minimize `sum_i exp(-sum_t alpha_t * theta[t][i])` subject to
//! `alpha >= 0`, `||alpha||_1 <= lambda`. A slack vertex at the origin turns
//! the feasible set into a scaled simplex, on which pairwise Frank-Wolfe
//! with an exact one-dimensional line search moves mass from the worst
//! supported vertex to the best one; iterates start at the slack vertex, so
//! flat directions keep zero weight and the support stays minimal. The
//! stopping rule is a real certificate: the linearization gap over the
//! simplex equals the Lagrange duality gap of the original problem, so
//! "relative gap <= tol" is a bound against the true optimum, not a
//! heuristic.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::margins::{training_error, MarginMatrix};
use crate::par;
use crate::patch::PatchSpec;

/// Relative convergence tolerance used across the crate.
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 50_000;
/// Budget when no grid is supplied: trivial regularization, maximum-accuracy
/// mode (the grid mode trades accuracy for sparsity).
pub const DEFAULT_LAMBDA: f64 = 1e5;

/// Entries below this are snapped to exact zero on output.
const ALPHA_TRUNCATE: f64 = 1e-12;
/// Exponent clamp keeping exp() finite.
const EXP_CLAMP: f64 = 690.0;

fn safe_exp(x: f64) -> f64 {
    x.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
}

/// `sum_i exp(-z_i)` with `z_i = sum_t alpha_t * theta[t][i]`.
pub fn exp_loss(mm: &MarginMatrix, alpha: &[f64]) -> f64 {
    exp_loss_rows(mm.theta(), &identity_rows(alpha.len()), alpha)
}

fn identity_rows(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn exp_loss_rows(theta: &DMatrix<f64>, rows: &[usize], alpha: &[f64]) -> f64 {
    let n = theta.ncols();
    let mut total = 0.0;
    for i in 0..n {
        let z: f64 = rows
            .iter()
            .zip(alpha)
            .map(|(&t, &a)| a * theta[(t, i)])
            .sum();
        total += safe_exp(-z);
    }
    total
}

#[derive(Debug, Clone)]
pub(crate) struct SolveOutput {
    /// Weights over the requested rows, truncated and feasible.
    pub alpha: Vec<f64>,
    pub objective: f64,
    /// Certified duality gap at the returned point (absolute).
    pub gap: f64,
    #[allow(dead_code)]
    pub iterations: usize,
}

/// Minimize the exponential loss over the rows `rows` of `theta` under the
/// simplex budget `lambda`. `warm` optionally seeds the iterate with a
/// previous solution over the same rows (minus trailing entries).
pub(crate) fn solve_columns(
    theta: &DMatrix<f64>,
    rows: &[usize],
    lambda: f64,
    tol: f64,
    max_iter: usize,
    warm: Option<&[f64]>,
) -> Result<SolveOutput> {
    if lambda <= 0.0 {
        return Err(Error::InvalidArgument("lambda must be positive".into()));
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no columns to optimize".into()));
    }
    let n = theta.ncols();
    let p = rows.len();

    let mut alpha = vec![0.0; p];
    if let Some(prev) = warm {
        for (j, &a) in prev.iter().enumerate().take(p) {
            alpha[j] = a.max(0.0);
        }
        let used: f64 = alpha.iter().sum();
        if used > lambda {
            for a in &mut alpha {
                *a *= lambda / used;
            }
        }
    }

    let evaluate = |alpha: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        let mut u = vec![0.0; n];
        let mut f = 0.0;
        for (i, ui) in u.iter_mut().enumerate() {
            let z: f64 = rows
                .iter()
                .zip(alpha)
                .map(|(&t, &a)| a * theta[(t, i)])
                .sum();
            *ui = safe_exp(-z);
            f += *ui;
        }
        let edges: Vec<f64> = rows
            .iter()
            .map(|&t| (0..n).map(|i| theta[(t, i)] * u[i]).sum())
            .collect();
        (f, u, edges)
    };

    let gap_at = |alpha: &[f64], edges: &[f64]| -> f64 {
        let max_edge = edges.iter().cloned().fold(0.0_f64, f64::max);
        let along: f64 = alpha.iter().zip(edges).map(|(a, e)| a * e).sum();
        lambda * max_edge - along
    };

    let mut iterations = 0;
    let (mut f, mut u, mut edges) = evaluate(&alpha);

    for iter in 0..max_iter {
        iterations = iter + 1;
        let gap = gap_at(&alpha, &edges);
        if gap <= tol * f.max(1.0) {
            return Ok(finish(alpha, f, gap, iterations));
        }

        // Toward vertex: best edge, slack (edge 0) included; lowest index on
        // ties. Away vertex: worst edge among the current support.
        let mut fw = (usize::MAX, 0.0); // usize::MAX denotes the slack vertex
        for (j, &e) in edges.iter().enumerate() {
            if e > fw.1 {
                fw = (j, e);
            }
        }
        let slack_mass = lambda - alpha.iter().sum::<f64>();
        let mut away: Option<(usize, f64)> = if slack_mass > 0.0 {
            Some((usize::MAX, 0.0))
        } else {
            None
        };
        for (j, &a) in alpha.iter().enumerate() {
            if a > 0.0 {
                let e = edges[j];
                away = match away {
                    Some((_, ae)) if ae <= e => away,
                    _ => Some((j, e)),
                };
            }
        }
        let (away_j, _) = away.expect("feasible point always has support");
        if fw.0 == away_j {
            // Best and worst coincide: the iterate is a vertex optimum up to
            // the certified gap.
            return Err(Error::Convergence {
                max_iter: iterations,
                gap: gap / f.max(1.0),
            });
        }

        // Mass transferred from the away vertex to the toward vertex changes
        // each margin by m * delta_i.
        let delta: Vec<f64> = (0..n)
            .map(|i| {
                let to = if fw.0 == usize::MAX {
                    0.0
                } else {
                    theta[(rows[fw.0], i)]
                };
                let from = if away_j == usize::MAX {
                    0.0
                } else {
                    theta[(rows[away_j], i)]
                };
                to - from
            })
            .collect();
        let m_max = if away_j == usize::MAX {
            slack_mass
        } else {
            alpha[away_j]
        };
        let m = line_search(&u, &delta, m_max);
        if fw.0 != usize::MAX {
            alpha[fw.0] += m;
        }
        if away_j != usize::MAX {
            alpha[away_j] = (alpha[away_j] - m).max(0.0);
        }

        let state = evaluate(&alpha);
        f = state.0;
        u = state.1;
        edges = state.2;
    }

    let gap = gap_at(&alpha, &edges);
    if gap <= tol * f.max(1.0) {
        return Ok(finish(alpha, f, gap, iterations));
    }
    Err(Error::Convergence {
        max_iter,
        gap: gap / f.max(1.0),
    })
}

/// Exact minimizer of `g(m) = sum_i u_i * exp(-m * delta_i)` on `[0, m_max]`
/// by bisection on the (monotone) derivative.
fn line_search(u: &[f64], delta: &[f64], m_max: f64) -> f64 {
    let slope = |m: f64| -> f64 {
        -u.iter()
            .zip(delta)
            .map(|(&ui, &di)| ui * di * safe_exp(-m * di))
            .sum::<f64>()
    };
    if slope(m_max) <= 0.0 {
        return m_max;
    }
    let (mut lo, mut hi) = (0.0_f64, m_max);
    for _ in 0..90 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * m_max {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn finish(mut alpha: Vec<f64>, objective: f64, gap: f64, iterations: usize) -> SolveOutput {
    for a in &mut alpha {
        if *a < ALPHA_TRUNCATE {
            *a = 0.0;
        }
    }
    SolveOutput {
        alpha,
        objective,
        gap,
        iterations,
    }
}

/// Solve the full problem over every patch. Deterministic given its inputs;
/// errors with the final relative gap if `max_iter` is exhausted.
pub fn solve_ore(
    mm: &MarginMatrix,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let rows = identity_rows(mm.patch_count());
    solve_columns(mm.theta(), &rows, lambda, tol, max_iter, None).map(|out| out.alpha)
}

/// Training-determined model selection: solve once per lambda in the grid and
/// keep the lambda with the smallest leave-one-out training error, preferring
/// the smaller (sparser) lambda on ties.
pub fn model_select(mm: &MarginMatrix, lambda_grid: &[f64]) -> Result<(f64, Vec<f64>)> {
    if lambda_grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    let solved: Vec<Result<(f64, Vec<f64>, f64)>> = par::map_slice(lambda_grid, |&lambda| {
        let alpha = solve_ore(mm, lambda, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        let err = training_error(mm, &alpha);
        Ok((lambda, alpha, err))
    });

    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for item in solved {
        let (lambda, alpha, err) = item?;
        best = match best {
            None => Some((lambda, alpha, err)),
            Some((bl, ba, be)) => {
                if err < be || (err == be && lambda < bl) {
                    Some((lambda, alpha, err))
                } else {
                    Some((bl, ba, be))
                }
            }
        };
    }
    let (lambda, alpha, _) = best.unwrap();
    Ok((lambda, alpha))
}

/// A trained ensemble: patch weights, the specs (with projection seeds) that
/// regenerate the galleries, and the inference parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleModel {
    pub version: u32,
    /// Feature dimension per patch.
    pub d: usize,
    pub lambda: f64,
    /// Fading coefficient for robust inference.
    pub q: f64,
    pub alpha: Vec<f64>,
    pub specs: Vec<PatchSpec>,
    pub class_ids: Vec<usize>,
    pub train_digest: String,
}

pub const MODEL_VERSION: u32 = 1;

impl EnsembleModel {
    /// Patches whose weight is significant relative to the total mass.
    pub fn selected(&self) -> Vec<usize> {
        let l1: f64 = self.alpha.iter().sum();
        let cut = 1e-6 * l1;
        self.alpha
            .iter()
            .enumerate()
            .filter(|(_, &a)| a > cut)
            .map(|(t, _)| t)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "model version {} (expected {MODEL_VERSION})",
                self.version
            )));
        }
        if self.alpha.len() != self.specs.len() {
            return Err(Error::Format(
                "model weight and spec counts disagree".into(),
            ));
        }
        if self.alpha.iter().any(|&a| a < 0.0 || !a.is_finite()) {
            return Err(Error::Format("model weights must be nonnegative".into()));
        }
        let l1: f64 = self.alpha.iter().sum();
        if l1 > self.lambda * (1.0 + 1e-9) {
            return Err(Error::Format(format!(
                "model weights exceed the budget: {l1} > {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: EnsembleModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
