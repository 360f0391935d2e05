//! Convergence-order experiments: run the paired-error estimator over a grid
//! of orders and mesh sizes, aggregate over observation draws, fit log-log
//! slopes, and emit the report.
//!
//! The fine grid is shared across every mesh size (the coarsest partition's
//! refinement fixes it), so all cells see the same driving noise: differences
//! between orders and between mesh sizes are common-random-number
//! comparisons.

use crate::expr;
use crate::filter::{paired_error_cells, FilterError};
use crate::model::{load_model, ModelError, PosysModel};
use crate::partition::{admissible, Partition};
use crate::simulate::{generate, FineGrid, Measure, SimulateError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("phi: {0}")]
    Phi(expr::ParseError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Grid(#[from] SimulateError),
    #[error("slope fit needs at least 3 points (got {got})")]
    TooFewPoints { got: usize },
    #[error("slope fit requires strictly positive errors")]
    NonPositiveError,
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Seeds {
    pub x_seed: u64,
    pub y_seed: u64,
}

fn default_uniformity() -> f64 {
    crate::partition::DEFAULT_UNIFORMITY_C
}

fn default_t() -> f64 {
    1.0
}

/// Experiment configuration, loaded from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    /// Model definition file, resolved relative to the config file.
    pub model: PathBuf,
    /// Test function, parsed against the model's dimension.
    pub phi: String,
    pub orders: Vec<usize>,
    pub n_list: Vec<usize>,
    /// Particles per observation draw.
    #[serde(rename = "N")]
    pub n_particles: usize,
    /// Observation draws.
    #[serde(rename = "M_Y")]
    pub m_y: usize,
    /// Fine sub-steps per coarse interval at the coarsest mesh; the fine
    /// grid is then identical for every n.
    #[serde(rename = "R")]
    pub refinement: usize,
    #[serde(rename = "C", default = "default_uniformity")]
    pub uniformity_c: f64,
    #[serde(default = "default_t")]
    pub t: f64,
    pub seeds: Seeds,
}

impl ConvergenceConfig {
    pub fn from_path(path: &Path) -> Result<(Self, PathBuf), BenchError> {
        let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: ConvergenceConfig = serde_json::from_str(&text)?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let model_path = if cfg.model.is_absolute() {
            cfg.model.clone()
        } else {
            dir.join(&cfg.model)
        };
        Ok((cfg, model_path))
    }
}

/// One (order, mesh) cell of the experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub m: usize,
    pub n: usize,
    pub delta: f64,
    /// Root-mean-square over observation draws of the per-draw paired error;
    /// absent when the cell was skipped.
    pub rms_error: Option<f64>,
    /// RMS over draws of the per-draw Monte Carlo standard errors.
    pub mc_se: Option<f64>,
    #[serde(rename = "N")]
    pub n_particles: usize,
    #[serde(rename = "M_Y")]
    pub m_y: usize,
    pub skipped: bool,
    pub reason: String,
    /// Whether the row passed the MC noise gate and entered the slope fit
    /// (JSON only; the CSV schema is fixed).
    pub retained: bool,
}

impl ConvergenceRow {
    /// MC noise gate: the cell's statistical noise floor is well below the
    /// observed error, so the row is meaningful for a rate fit.
    pub fn passes_noise_gate(&self) -> bool {
        match (self.rms_error, self.mc_se) {
            (Some(rms), Some(se)) => rms > 0.0 && se < rms / 3.0,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub se: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitOutcome {
    pub m: usize,
    pub fit: Option<SlopeFit>,
    pub note: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub model_path: String,
    pub model_sha256: String,
    pub phi: String,
    pub orders: Vec<usize>,
    pub n_list: Vec<usize>,
    #[serde(rename = "N")]
    pub n_particles: usize,
    #[serde(rename = "M_Y")]
    pub m_y: usize,
    #[serde(rename = "R")]
    pub refinement: usize,
    #[serde(rename = "C")]
    pub uniformity_c: f64,
    pub t: f64,
    pub seeds: Seeds,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub fits: Vec<FitOutcome>,
    pub config: ConfigEcho,
}

/// Ordinary least squares of `log err` on `log delta`.
///
/// Returns `(slope, intercept, se_slope)`; needs at least three points with
/// strictly positive errors.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<(f64, f64, f64), BenchError> {
    if points.len() < 3 {
        return Err(BenchError::TooFewPoints { got: points.len() });
    }
    if points.iter().any(|(d, e)| *d <= 0.0 || *e <= 0.0) {
        return Err(BenchError::NonPositiveError);
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(d, _)| d.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, e)| e.ln()).collect();
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x).powi(2)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ssr: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
        .sum();
    let df = (points.len() - 2) as f64;
    let se = (ssr / df / sxx).sqrt();
    Ok((slope, intercept, se))
}

/// Run the full experiment described by a config against a loaded model.
/// `model_bytes` are the raw model-file contents (hashed into the report).
pub fn run_convergence(
    config: &ConvergenceConfig,
    model: &PosysModel,
    model_path: &Path,
    model_bytes: &[u8],
) -> Result<ConvergenceReport, BenchError> {
    if config.orders.is_empty() || config.n_list.is_empty() {
        return Err(BenchError::Config("orders and n_list must be nonempty".into()));
    }
    if config.n_particles < 2 || config.m_y == 0 {
        return Err(BenchError::Config("N must be >= 2 and M_Y >= 1".into()));
    }
    let mut orders = config.orders.clone();
    orders.sort_unstable();
    orders.dedup();
    let mut n_list = config.n_list.clone();
    n_list.sort_unstable();
    n_list.dedup();

    let phi = expr::parse(&config.phi, model.d_x).map_err(BenchError::Phi)?;
    let n_min = n_list[0];
    let fine_steps = n_min
        .checked_mul(config.refinement)
        .ok_or_else(|| BenchError::Config("refinement overflow".into()))?;
    for &n in &n_list {
        if fine_steps % n != 0 {
            return Err(BenchError::Config(format!(
                "n = {n} does not divide the shared fine grid ({n_min} * {} steps)",
                config.refinement
            )));
        }
    }
    if !(config.uniformity_c >= 1.0) {
        return Err(BenchError::Config(format!(
            "uniformity constant C must be >= 1 (got {})",
            config.uniformity_c
        )));
    }
    let grid = Arc::new(FineGrid::new(
        Partition::uniform_with(n_min, config.t, config.uniformity_c),
        config.refinement,
    )?);

    // partition cells by admissibility; order 1 takes any mesh
    let partitions: Vec<Partition> = n_list
        .iter()
        .map(|&n| Partition::uniform_with(n, config.t, config.uniformity_c))
        .collect();
    let mut full_partitions = Vec::new(); // admissible for every order
    let mut order_one_only = Vec::new();
    let mut skip_reason = Vec::new();
    for p in &partitions {
        let adm = admissible(p, model, 2);
        if adm.admissible || orders.iter().all(|&m| m == 1) {
            full_partitions.push(p.clone());
            skip_reason.push(None);
        } else {
            order_one_only.push(p.clone());
            skip_reason.push(Some(format!(
                "mesh delta {} not below delta0 {}",
                adm.delta, adm.delta0
            )));
        }
    }

    // accumulate sum of d^2 and sum of se^2 per cell over observation draws
    let n_cells_full = full_partitions.len() * orders.len();
    let mut acc_full = vec![(0.0f64, 0.0f64); n_cells_full];
    let has_order_one = orders.contains(&1);
    let mut acc_one = vec![(0.0f64, 0.0f64); order_one_only.len()];
    for draw in 0..config.m_y {
        let y_path = generate(
            model,
            grid.clone(),
            config.seeds.y_seed,
            draw as u64,
            Measure::PTilde,
        );
        if !full_partitions.is_empty() {
            let cells = paired_error_cells(
                model,
                &phi,
                &y_path,
                &full_partitions,
                &orders,
                config.n_particles,
                config.seeds.x_seed,
            )?;
            for (p_idx, row) in cells.iter().enumerate() {
                for (o_idx, pe) in row.iter().enumerate() {
                    let slot = p_idx * orders.len() + o_idx;
                    acc_full[slot].0 += pe.value * pe.value;
                    acc_full[slot].1 += pe.se * pe.se;
                }
            }
        }
        if has_order_one && !order_one_only.is_empty() {
            let cells = paired_error_cells(
                model,
                &phi,
                &y_path,
                &order_one_only,
                &[1],
                config.n_particles,
                config.seeds.x_seed,
            )?;
            for (p_idx, row) in cells.iter().enumerate() {
                acc_one[p_idx].0 += row[0].value * row[0].value;
                acc_one[p_idx].1 += row[0].se * row[0].se;
            }
        }
    }

    let my = config.m_y as f64;
    let mut rows = Vec::new();
    for &m in &orders {
        for (i, p) in partitions.iter().enumerate() {
            let n = p.n();
            let delta = p.delta();
            let row = if let Some(reason) = &skip_reason[i] {
                if m == 1 && has_order_one {
                    let p_idx = order_one_only
                        .iter()
                        .position(|q| q.n() == n)
                        .expect("order-one cell present");
                    let (d2, se2) = acc_one[p_idx];
                    ConvergenceRow {
                        m,
                        n,
                        delta,
                        rms_error: Some((d2 / my).sqrt()),
                        mc_se: Some((se2 / my).sqrt()),
                        n_particles: config.n_particles,
                        m_y: config.m_y,
                        skipped: false,
                        reason: String::new(),
                        retained: false,
                    }
                } else {
                    ConvergenceRow {
                        m,
                        n,
                        delta,
                        rms_error: None,
                        mc_se: None,
                        n_particles: config.n_particles,
                        m_y: config.m_y,
                        skipped: true,
                        reason: reason.clone(),
                        retained: false,
                    }
                }
            } else {
                let p_idx = full_partitions
                    .iter()
                    .position(|q| q.n() == n)
                    .expect("full cell present");
                let o_idx = orders.iter().position(|&o| o == m).unwrap();
                let (d2, se2) = acc_full[p_idx * orders.len() + o_idx];
                ConvergenceRow {
                    m,
                    n,
                    delta,
                    rms_error: Some((d2 / my).sqrt()),
                    mc_se: Some((se2 / my).sqrt()),
                    n_particles: config.n_particles,
                    m_y: config.m_y,
                    skipped: false,
                    reason: String::new(),
                    retained: false,
                }
            };
            rows.push(row);
        }
    }
    for row in &mut rows {
        row.retained = row.passes_noise_gate();
    }

    let mut fits = Vec::new();
    for &m in &orders {
        let m_rows: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.m == m).collect();
        let retained: Vec<(f64, f64)> = m_rows
            .iter()
            .filter(|r| r.passes_noise_gate())
            .map(|r| (r.delta, r.rms_error.unwrap()))
            .collect();
        let all_zero = m_rows
            .iter()
            .filter_map(|r| r.rms_error)
            .all(|e| e == 0.0)
            && m_rows.iter().any(|r| r.rms_error.is_some());
        let outcome = if all_zero {
            FitOutcome {
                m,
                fit: None,
                note: "exact: all errors are zero".into(),
            }
        } else {
            match fit_slope(&retained) {
                Ok((slope, intercept, se)) => FitOutcome {
                    m,
                    fit: Some(SlopeFit {
                        slope,
                        intercept,
                        se,
                        points: retained.len(),
                    }),
                    note: String::new(),
                },
                Err(e) => FitOutcome {
                    m,
                    fit: None,
                    note: e.to_string(),
                },
            }
        };
        fits.push(outcome);
    }

    let mut hasher = Sha256::new();
    hasher.update(model_bytes);
    let model_sha256 = hasher
        .finalize()
        .iter()
        .fold(String::new(), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        });

    Ok(ConvergenceReport {
        rows,
        fits,
        config: ConfigEcho {
            model_path: model_path.display().to_string(),
            model_sha256,
            phi: config.phi.clone(),
            orders,
            n_list,
            n_particles: config.n_particles,
            m_y: config.m_y,
            refinement: config.refinement,
            uniformity_c: config.uniformity_c,
            t: config.t,
            seeds: config.seeds,
        },
    })
}

/// Load the config and model from disk and run the experiment.
pub fn run_from_config_path(path: &Path) -> Result<ConvergenceReport, BenchError> {
    let (config, model_path) = ConvergenceConfig::from_path(path)?;
    let (model, bytes) = load_model(&model_path)?;
    run_convergence(&config, &model, &model_path, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("expected `csv` or `json`, got `{other}`")),
        }
    }
}

/// Render the report rows as CSV (header always present; skipped cells keep
/// empty error fields).
pub fn report_csv(report: &ConvergenceReport) -> String {
    let mut out = String::from("m,n,delta,rms_error,mc_se,N,M_Y,skipped,reason\n");
    for r in &report.rows {
        let rms = r.rms_error.map(|v| v.to_string()).unwrap_or_default();
        let se = r.mc_se.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.m, r.n, r.delta, rms, se, r.n_particles, r.m_y, r.skipped, r.reason
        );
    }
    out
}

/// Write the report to `path`, or stdout when `path` is `None`.
pub fn emit(
    report: &ConvergenceReport,
    format: ReportFormat,
    path: Option<&Path>,
) -> Result<(), BenchError> {
    let text = match format {
        ReportFormat::Csv => report_csv(report),
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            s
        }
    };
    match path {
        Some(p) => std::fs::write(p, text).map_err(|source| BenchError::Io {
            path: p.display().to_string(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// in-repo benchmark models

/// Bounded-sensor benchmark: `f = -0.5 x1`, `sigma = 0.3`, `h = tanh(x1)`,
/// point mass at 0.1. The tanh sensor keeps `||L h||` finite (`<= 0.3`), so
/// the mesh threshold is honest.
pub fn bounded_benchmark_model() -> PosysModel {
    crate::model::model_from_json(BOUNDED_BENCHMARK_JSON, "builtin:bounded").unwrap()
}

/// Linear benchmark (`h = x1`): same dynamics with an exact Kalman-Bucy
/// reference.
pub fn linear_benchmark_model() -> PosysModel {
    crate::model::model_from_json(LINEAR_BENCHMARK_JSON, "builtin:linear").unwrap()
}

pub const BOUNDED_BENCHMARK_JSON: &str = r##"{
  "d_x": 1,
  "d_v": 1,
  "d_y": 1,
  "f": ["-0.5*x1"],
  "sigma": [["0.3"]],
  "h": ["tanh(x1)"],
  "lh_bound": 0.3,
  "smoothness_order": 6,
  "x0": {"type": "point", "value": [0.1]}
}
"##;

pub const LINEAR_BENCHMARK_JSON: &str = r##"{
  "d_x": 1,
  "d_v": 1,
  "d_y": 1,
  "f": ["-0.5*x1"],
  "sigma": [["0.3"]],
  "h": ["x1"],
  "lh_bound": 0.3,
  "smoothness_order": 6,
  "x0": {"type": "point", "value": [0.1]}
}
"##;
