//! Monte Carlo estimators of the discretized conditional distributions, the
//! paired-difference estimator of the discretization error, and the exact
//! Kalman-Bucy oracle for linear-Gaussian models.
//!
//! Estimation conditions on one observation path: the ensemble draws fresh
//! signal drivers per particle, pairs each with the same observation, and
//! averages the weights `exp(xi_bar)`. Reference and discretized weights are
//! always evaluated on the same particle (common random numbers), so their
//! difference estimates the discretization error directly. Reductions run in
//! fixed particle order, which keeps results bit-identical across worker
//! thread counts.

use crate::expr::{diff, eval, Expr};
use crate::likelihood::{
    observation_increments, reference_blocks, LikelihoodError, SchemeEvaluator,
};
use crate::model::{build_table, ModelError, PosysModel};
use crate::partition::{admissible, Partition};
use crate::simulate::{generate_signal, PathBundle, SimulateError};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Grid(#[from] SimulateError),
    #[error("model is not linear-Gaussian: {0}")]
    NotLinear(String),
    #[error("degenerate weights: rho(1) = {rho_one} below 10 eps * max weight {max_weight}")]
    DegenerateWeights { rho_one: f64, max_weight: f64 },
}

/// Which functional weights the ensemble: a scheme order or the fine-grid
/// reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderSpec {
    Order(usize),
    Reference,
}

impl Serialize for OrderSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            OrderSpec::Order(m) => s.serialize_u64(*m as u64),
            OrderSpec::Reference => s.serialize_str("ref"),
        }
    }
}

impl std::str::FromStr for OrderSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "ref" {
            return Ok(OrderSpec::Reference);
        }
        s.parse::<usize>()
            .map(OrderSpec::Order)
            .map_err(|_| format!("expected a scheme order or `ref`, got `{s}`"))
    }
}

/// Ensemble estimate of `rho(phi)`, `rho(1)` and their ratio `pi(phi)`.
#[derive(Debug, Clone, Serialize)]
pub struct FilterEstimate {
    pub rho_phi: f64,
    pub rho_one: f64,
    pub pi_phi: f64,
    /// Sample std / sqrt(N) of the `phi * Z` sequence.
    pub se_rho_phi: f64,
    /// Sample std / sqrt(N) of the `Z` sequence.
    pub se_rho_one: f64,
    /// Delta-method standard error of the ratio.
    pub se_pi_phi: f64,
    pub n_particles: usize,
    pub order: OrderSpec,
    pub partition: Partition,
    pub x_seed: u64,
    pub y_seed: u64,
}

/// Common-random-numbers estimate of `rho(phi) - rho^{tau,m}(phi)` for one
/// observation path.
#[derive(Debug, Clone, Serialize)]
pub struct PairedError {
    pub value: f64,
    pub se: f64,
    pub n_particles: usize,
}

fn check_degenerate(rho_one: f64, max_weight: f64) -> Result<(), FilterError> {
    if rho_one < 10.0 * f64::EPSILON * max_weight {
        return Err(FilterError::DegenerateWeights {
            rho_one,
            max_weight,
        });
    }
    Ok(())
}

/// Per-particle weights for one conditioning path: the scheme weight for
/// every requested order plus the (partition-blocked) reference weight.
/// This is the shared inner loop of [`estimate`], [`paired_error`] and the
/// convergence harness.
fn particle_weights(
    model: &PosysModel,
    evaluator: &SchemeEvaluator<'_>,
    phi: &Expr,
    y_path: &PathBundle,
    partitions: &[(&Partition, &[usize])],
    orders: &[usize],
    n_particles: usize,
    x_seed: u64,
    want_reference: bool,
) -> Result<Vec<ParticleRow>, FilterError> {
    // signal-independent, shared by the whole ensemble
    let obs = observation_increments(&y_path.view());
    let rows: Result<Vec<ParticleRow>, FilterError> = (0..n_particles as u64)
        .into_par_iter()
        .map(|k| {
            let signal = generate_signal(model, &y_path.grid, x_seed, k);
            let view = y_path.view_with_signal(&signal);
            let k_steps = view.grid.n_steps();
            let phi_value = eval(phi, view.x_at(k_steps));
            let mut stack = Vec::new();
            let mut subs = Vec::new();
            if want_reference {
                evaluator.reference_subtotals_into(&view, &obs, &mut stack, &mut subs);
            }
            let mut xi_ref = Vec::with_capacity(partitions.len());
            let mut xi_scheme = Vec::with_capacity(partitions.len() * orders.len());
            // coefficient values at each distinct left point, reused across
            // partitions that share points
            let mut coef_cache: Vec<(usize, Vec<f64>)> = Vec::new();
            for &(partition, alignment) in partitions {
                if want_reference {
                    let blocks = reference_blocks(&subs, alignment);
                    xi_ref.push(blocks.iter().sum::<f64>());
                }
                let mut positions = Vec::with_capacity(partition.n());
                for &fine_idx in &alignment[..partition.n()] {
                    let pos = match coef_cache.iter().position(|(idx, _)| *idx == fine_idx) {
                        Some(p) => p,
                        None => {
                            coef_cache.push((
                                fine_idx,
                                evaluator.coefficients_at(view.x_at(fine_idx), &mut stack),
                            ));
                            coef_cache.len() - 1
                        }
                    };
                    positions.push(pos);
                }
                let coefs: Vec<&[f64]> = positions
                    .iter()
                    .map(|&pos| coef_cache[pos].1.as_slice())
                    .collect();
                let totals =
                    evaluator.xi_bar_totals(&view, &obs, partition, alignment, &coefs, orders)?;
                xi_scheme.extend(totals);
            }
            Ok(ParticleRow {
                phi_value,
                xi_ref,
                xi_scheme,
            })
        })
        .collect();
    rows
}

struct ParticleRow {
    phi_value: f64,
    /// per partition
    xi_ref: Vec<f64>,
    /// per partition x order, partition-major
    xi_scheme: Vec<f64>,
}

/// Ensemble estimate conditional on `y_path`'s observation component.
///
/// Draws `n_particles` independent signal paths keyed by `(x_seed, k)`, pairs
/// each with the same observation, and averages `phi(X_t) Z` and `Z` where
/// `Z` is the order-m weight (or the fine-grid reference weight). `y_seed` is
/// echoed into the record. `allow_inadmissible` bypasses the mesh gate for
/// divergence studies.
#[allow(clippy::too_many_arguments)]
pub fn estimate(
    model: &PosysModel,
    phi: &Expr,
    y_path: &PathBundle,
    partition: &Partition,
    order: OrderSpec,
    n_particles: usize,
    x_seed: u64,
    y_seed: u64,
    allow_inadmissible: bool,
) -> Result<FilterEstimate, FilterError> {
    let alignment = y_path.grid.align(partition)?;
    let xi_values = weights_for_order(
        model,
        phi,
        y_path,
        partition,
        &alignment,
        order,
        n_particles,
        x_seed,
        allow_inadmissible,
    )?;
    let n = n_particles as f64;
    let mut sum_w = 0.0;
    let mut sum_w2 = 0.0;
    let mut sum_pw = 0.0;
    let mut sum_pw2 = 0.0;
    let mut sum_pww = 0.0;
    let mut max_w = 0.0f64;
    for (phi_k, z_k) in &xi_values {
        let pw = phi_k * z_k;
        sum_w += z_k;
        sum_w2 += z_k * z_k;
        sum_pw += pw;
        sum_pw2 += pw * pw;
        sum_pww += pw * z_k;
        max_w = max_w.max(*z_k);
    }
    let rho_one = sum_w / n;
    let rho_phi = sum_pw / n;
    check_degenerate(rho_one, max_w)?;
    let pi_phi = rho_phi / rho_one;
    let var_w = ((sum_w2 - n * rho_one * rho_one) / (n - 1.0)).max(0.0);
    let var_pw = ((sum_pw2 - n * rho_phi * rho_phi) / (n - 1.0)).max(0.0);
    let cov = (sum_pww - n * rho_phi * rho_one) / (n - 1.0);
    let var_ratio_num = (var_pw + pi_phi * pi_phi * var_w - 2.0 * pi_phi * cov).max(0.0);
    Ok(FilterEstimate {
        rho_phi,
        rho_one,
        pi_phi,
        se_rho_phi: (var_pw / n).sqrt(),
        se_rho_one: (var_w / n).sqrt(),
        se_pi_phi: (var_ratio_num / n).sqrt() / rho_one,
        n_particles,
        order,
        partition: partition.clone(),
        x_seed,
        y_seed,
    })
}

#[allow(clippy::too_many_arguments)]
fn weights_for_order(
    model: &PosysModel,
    phi: &Expr,
    y_path: &PathBundle,
    partition: &Partition,
    alignment: &[usize],
    order: OrderSpec,
    n_particles: usize,
    x_seed: u64,
    allow_inadmissible: bool,
) -> Result<Vec<(f64, f64)>, FilterError> {
    match order {
        OrderSpec::Order(m) => {
            let adm = admissible(partition, model, m);
            if !adm.admissible && !allow_inadmissible {
                return Err(LikelihoodError::InadmissibleMesh {
                    delta: adm.delta,
                    delta0: adm.delta0,
                    m,
                }
                .into());
            }
            let table = build_table(model, m)?;
            let evaluator = SchemeEvaluator::new(model, &table);
            let rows = particle_weights(
                model,
                &evaluator,
                phi,
                y_path,
                &[(partition, alignment)],
                &[m],
                n_particles,
                x_seed,
                false,
            )?;
            Ok(rows
                .iter()
                .map(|r| (r.phi_value, r.xi_scheme[0].exp()))
                .collect())
        }
        OrderSpec::Reference => {
            // order-1 table satisfies the evaluator plumbing; only the
            // reference column is consumed
            let table = build_table(model, 1)?;
            let evaluator = SchemeEvaluator::new(model, &table);
            let rows = particle_weights(
                model,
                &evaluator,
                phi,
                y_path,
                &[(partition, alignment)],
                &[],
                n_particles,
                x_seed,
                true,
            )?;
            Ok(rows
                .iter()
                .map(|r| (r.phi_value, r.xi_ref[0].exp()))
                .collect())
        }
    }
}

/// Common-random-numbers estimator of the discretization error for one
/// observation path: `mean_k phi(X_t^k) (exp(xi_ref^k) - exp(xi_bar^k))`,
/// both exponents computed from the same signal realization.
#[allow(clippy::too_many_arguments)]
pub fn paired_error(
    model: &PosysModel,
    phi: &Expr,
    y_path: &PathBundle,
    partition: &Partition,
    m: usize,
    n_particles: usize,
    x_seed: u64,
) -> Result<PairedError, FilterError> {
    let cells = paired_error_cells(
        model,
        phi,
        y_path,
        std::slice::from_ref(partition),
        &[m],
        n_particles,
        x_seed,
    )?;
    Ok(cells.into_iter().next().unwrap().into_iter().next().unwrap())
}

/// [`paired_error`] over a whole (partition x order) grid with one sweep of
/// the particle ensemble: every cell sees the same signal paths, so cell
/// differences are common-random-number comparisons as well.
pub fn paired_error_cells(
    model: &PosysModel,
    phi: &Expr,
    y_path: &PathBundle,
    partitions: &[Partition],
    orders: &[usize],
    n_particles: usize,
    x_seed: u64,
) -> Result<Vec<Vec<PairedError>>, FilterError> {
    let m_max = orders.iter().copied().max().unwrap_or(1).max(1);
    for &m in orders {
        for p in partitions {
            let adm = admissible(p, model, m);
            if !adm.admissible {
                return Err(LikelihoodError::InadmissibleMesh {
                    delta: adm.delta,
                    delta0: adm.delta0,
                    m,
                }
                .into());
            }
        }
    }
    let table = build_table(model, m_max)?;
    let evaluator = SchemeEvaluator::new(model, &table);
    let alignments: Vec<Vec<usize>> = partitions
        .iter()
        .map(|p| y_path.grid.align(p))
        .collect::<Result<_, _>>()?;
    let partition_args: Vec<(&Partition, &[usize])> = partitions
        .iter()
        .zip(alignments.iter())
        .map(|(p, a)| (p, a.as_slice()))
        .collect();
    let rows = particle_weights(
        model,
        &evaluator,
        phi,
        y_path,
        &partition_args,
        orders,
        n_particles,
        x_seed,
        true,
    )?;
    let n = n_particles as f64;
    let mut out = Vec::with_capacity(partitions.len());
    for (p_idx, _) in partitions.iter().enumerate() {
        // same degeneracy contract as `estimate`, on both weight families
        let mut ref_sum = 0.0;
        let mut ref_max = 0.0f64;
        for row in &rows {
            let z = row.xi_ref[p_idx].exp();
            ref_sum += z;
            ref_max = ref_max.max(z);
        }
        check_degenerate(ref_sum / n, ref_max)?;
        let mut cells = Vec::with_capacity(orders.len());
        for (o_idx, _) in orders.iter().enumerate() {
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            let mut scheme_sum = 0.0;
            let mut scheme_max = 0.0f64;
            for row in &rows {
                let z = row.xi_scheme[p_idx * orders.len() + o_idx].exp();
                scheme_sum += z;
                scheme_max = scheme_max.max(z);
                let d = row.phi_value * (row.xi_ref[p_idx].exp() - z);
                sum += d;
                sum2 += d * d;
            }
            check_degenerate(scheme_sum / n, scheme_max)?;
            let mean = sum / n;
            let var = ((sum2 - n * mean * mean) / (n - 1.0)).max(0.0);
            cells.push(PairedError {
                value: mean,
                se: (var / n).sqrt(),
                n_particles,
            });
        }
        out.push(cells);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Kalman-Bucy oracle

/// Certified linear-Gaussian coefficients: `f = a x`, constant `sigma`,
/// `h = c x`, with the initial law's mean and covariance.
#[derive(Debug, Clone)]
pub struct LinearCoeffs {
    pub a: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

/// Extract linear coefficients, or report why the model is not linear.
/// Checks are exact up to 1e-9 at a fixed probe set.
pub fn certify_linear(model: &PosysModel) -> Result<LinearCoeffs, FilterError> {
    let d_x = model.d_x;
    let zero = vec![0.0; d_x];
    let probes: Vec<Vec<f64>> = (0..4)
        .map(|p| {
            (0..d_x)
                .map(|i| 0.37 + 0.61 * p as f64 - 0.23 * i as f64)
                .collect()
        })
        .collect();
    let tol = 1e-9;

    let linear_row = |what: &str, e: &Expr| -> Result<Vec<f64>, FilterError> {
        if eval(e, &zero).abs() > tol {
            return Err(FilterError::NotLinear(format!("{what} has a constant term")));
        }
        let row: Vec<f64> = (1..=d_x).map(|k| eval(&diff(e, k), &zero)).collect();
        for x in &probes {
            let lin: f64 = row.iter().zip(x).map(|(a, xi)| a * xi).sum();
            if (eval(e, x) - lin).abs() > tol * (1.0 + lin.abs()) {
                return Err(FilterError::NotLinear(format!("{what} is not linear")));
            }
        }
        Ok(row)
    };
    let constant_entry = |what: &str, e: &Expr| -> Result<f64, FilterError> {
        let v = eval(e, &zero);
        for x in &probes {
            if (eval(e, x) - v).abs() > tol * (1.0 + v.abs()) {
                return Err(FilterError::NotLinear(format!("{what} is not constant")));
            }
        }
        Ok(v)
    };

    let mut a = DMatrix::zeros(d_x, d_x);
    for i in 0..d_x {
        let row = linear_row(&format!("f{}", i + 1), &model.f[i])?;
        for k in 0..d_x {
            a[(i, k)] = row[k];
        }
    }
    let mut sigma = DMatrix::zeros(d_x, model.d_v);
    for i in 0..d_x {
        for r in 0..model.d_v {
            sigma[(i, r)] =
                constant_entry(&format!("sigma{},{}", i + 1, r + 1), &model.sigma[i][r])?;
        }
    }
    let mut c = DMatrix::zeros(model.d_y, d_x);
    for i in 0..model.d_y {
        let row = linear_row(&format!("h{}", i + 1), &model.h[i])?;
        for k in 0..d_x {
            c[(i, k)] = row[k];
        }
    }
    let m0 = DVector::from_vec(model.x0.mean().to_vec());
    let p0 = DMatrix::from_diagonal(&DVector::from_vec(model.x0.variance_diag()));
    Ok(LinearCoeffs {
        a,
        sigma,
        c,
        m0,
        p0,
    })
}

/// Conditional mean, covariance and log-evidence at the end of the path.
#[derive(Debug, Clone)]
pub struct KalmanState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Accumulated innovations log-likelihood, which equals `log rho(1)`
    /// for the linear model.
    pub log_evidence: f64,
}

/// Integrate the Kalman-Bucy mean/covariance equations and the innovations
/// likelihood along the observation path, with the same left-point fine-grid
/// convention the Monte Carlo side uses.
pub fn kalman_bucy(coeffs: &LinearCoeffs, y_path: &PathBundle) -> KalmanState {
    let grid = &y_path.grid;
    let d_y = y_path.d_y;
    let mut mean = coeffs.m0.clone();
    let mut cov = coeffs.p0.clone();
    let mut log_evidence = 0.0;
    let sig2 = &coeffs.sigma * coeffs.sigma.transpose();
    let ct = coeffs.c.transpose();
    for l in 0..grid.n_steps() {
        let ds = grid.step(l);
        let dy = DVector::from_fn(d_y, |i, _| {
            y_path.y[(l + 1) * d_y + i] - y_path.y[l * d_y + i]
        });
        let predicted = &coeffs.c * &mean;
        log_evidence += predicted.dot(&dy) - 0.5 * predicted.norm_squared() * ds;
        let innovation = &dy - &predicted * ds;
        let gain = &cov * &ct;
        mean = &mean + (&coeffs.a * &mean) * ds + &gain * &innovation;
        let drift = &coeffs.a * &cov + &cov * coeffs.a.transpose() + &sig2
            - &gain * gain.transpose();
        cov += drift * ds;
        // keep the Riccati iterate symmetric against rounding drift
        cov = (&cov + &cov.transpose()) * 0.5;
    }
    KalmanState {
        mean,
        covariance: cov,
        log_evidence,
    }
}
