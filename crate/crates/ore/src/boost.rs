//! Column-generation boosting over precomputed oracle vectors.
//!
//! Margins are computed once; the loop only takes dot products of theta rows
//! with the dual weights, inserts the best row as a new constraint, and
//! re-solves the restricted primal. The dual iterate is recovered in closed
//! form (`u_i = exp(-z_i)`), and the restricted solver's linearization gap
//! doubles as the strong-duality certificate, so each round carries its own
//! optimality evidence.

use crate::error::{Error, Result};
use crate::learn::solve_columns;
use crate::margins::{training_error, MarginMatrix};

/// Result of one restricted master solve.
#[derive(Debug, Clone)]
pub struct MasterSolution {
    /// Weights over the selected columns, in selection order.
    pub alpha_restricted: Vec<f64>,
    /// Dual data weights, `u_i = exp(-z_i)` at the restricted optimum.
    pub u: Vec<f64>,
    /// Largest edge among the selected columns under `u`.
    pub r: f64,
    pub objective: f64,
    /// Certified duality gap of the restricted problem (absolute).
    pub duality_gap: f64,
}

/// One boosting round, as logged to the curve CSV.
#[derive(Debug, Clone)]
pub struct BoostIteration {
    pub iteration: usize,
    pub t_selected: usize,
    /// Edge of the inserted column under the previous dual weights.
    pub edge: f64,
    pub r: f64,
    pub objective: f64,
    pub train_err: f64,
    pub duality_gap: f64,
    /// Recomputed `max_i |u_i - exp(-z_i)|` at the master solution.
    pub u_consistency: f64,
}

#[derive(Debug, Clone)]
pub struct BoostOutcome {
    /// Full-length weights (zeros on never-selected patches).
    pub alpha: Vec<f64>,
    /// Columns in insertion order.
    pub selected: Vec<usize>,
    pub log: Vec<BoostIteration>,
}

/// Best unselected column: argmax over `c_t . u`, lowest index on ties.
pub fn best_bpr(mm: &MarginMatrix, u: &[f64], excluded: &[bool]) -> Result<(usize, f64)> {
    if u.len() != mm.sample_count() {
        return Err(Error::InvalidDimension {
            context: "best_bpr weights",
            expected: mm.sample_count(),
            got: u.len(),
        });
    }
    let theta = mm.theta();
    let mut best: Option<(usize, f64)> = None;
    for t in 0..mm.patch_count() {
        if excluded[t] {
            continue;
        }
        let score: f64 = (0..u.len()).map(|i| theta[(t, i)] * u[i]).sum();
        match best {
            Some((_, s)) if score <= s => {}
            _ => best = Some((t, score)),
        }
    }
    best.ok_or(Error::Exhausted)
}

/// Solve the primal restricted to `selected` columns and recover the dual:
/// `u_i = exp(-z_i)` and `r = max_t` of the selected edges.
pub fn solve_restricted_master(
    mm: &MarginMatrix,
    selected: &[usize],
    lambda: f64,
    tol: f64,
    max_iter: usize,
    warm: Option<&[f64]>,
) -> Result<MasterSolution> {
    if selected.is_empty() {
        return Err(Error::InvalidArgument(
            "restricted master needs at least one column".into(),
        ));
    }
    let theta = mm.theta();
    let n = mm.sample_count();
    let out = solve_columns(theta, selected, lambda, tol, max_iter, warm)?;

    let mut u = vec![0.0; n];
    for (i, ui) in u.iter_mut().enumerate() {
        let z: f64 = selected
            .iter()
            .zip(&out.alpha)
            .map(|(&t, &a)| a * theta[(t, i)])
            .sum();
        *ui = (-z).exp();
    }
    let r = selected
        .iter()
        .map(|&t| (0..n).map(|i| theta[(t, i)] * u[i]).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max);

    Ok(MasterSolution {
        alpha_restricted: out.alpha,
        u,
        r,
        objective: out.objective,
        duality_gap: out.gap,
    })
}

/// Run column-generation boosting for at most `max_rounds` rounds, stopping
/// early once no remaining column beats the dual bound by `epsilon`.
///
/// The first round always accepts (the bound starts at negative infinity and
/// the data weights at `1/N`). The returned weights are the final restricted
/// primal solution scattered back over all patches.
pub fn boost(
    mm: &MarginMatrix,
    lambda: f64,
    epsilon: f64,
    max_rounds: usize,
) -> Result<BoostOutcome> {
    if max_rounds == 0 {
        return Err(Error::InvalidArgument("max_rounds must be >= 1".into()));
    }
    let n = mm.sample_count();
    let t_total = mm.patch_count();
    let theta = mm.theta();

    let mut u = vec![1.0 / n as f64; n];
    let mut r = f64::NEG_INFINITY;
    let mut excluded = vec![false; t_total];
    let mut selected: Vec<usize> = Vec::new();
    let mut restricted_alpha: Vec<f64> = Vec::new();
    let mut log: Vec<BoostIteration> = Vec::new();

    for s in 1..=max_rounds {
        let (t_star, edge) = match best_bpr(mm, &u, &excluded) {
            Ok(found) => found,
            Err(Error::Exhausted) => break,
            Err(e) => return Err(e),
        };
        if edge < r + epsilon {
            break;
        }

        selected.push(t_star);
        excluded[t_star] = true;
        restricted_alpha.push(0.0);
        let master = solve_restricted_master(
            mm,
            &selected,
            lambda,
            crate::learn::DEFAULT_TOL,
            crate::learn::DEFAULT_MAX_ITER,
            Some(&restricted_alpha),
        )?;

        let u_consistency = master
            .u
            .iter()
            .enumerate()
            .map(|(i, &ui)| {
                let z: f64 = selected
                    .iter()
                    .zip(&master.alpha_restricted)
                    .map(|(&t, &a)| a * theta[(t, i)])
                    .sum();
                (ui - (-z).exp()).abs()
            })
            .fold(0.0_f64, f64::max);

        restricted_alpha = master.alpha_restricted.clone();
        u = master.u.clone();
        r = master.r;

        let full = scatter(&restricted_alpha, &selected, t_total);
        log.push(BoostIteration {
            iteration: s,
            t_selected: t_star,
            edge,
            r,
            objective: master.objective,
            train_err: training_error(mm, &full),
            duality_gap: master.duality_gap,
            u_consistency,
        });
    }

    let alpha = scatter(&restricted_alpha, &selected, t_total);
    Ok(BoostOutcome {
        alpha,
        selected,
        log,
    })
}

fn scatter(restricted: &[f64], selected: &[usize], t_total: usize) -> Vec<f64> {
    let mut alpha = vec![0.0; t_total];
    for (&t, &a) in selected.iter().zip(restricted) {
        alpha[t] = a;
    }
    alpha
}
