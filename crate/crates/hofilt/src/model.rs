//! The partially observed system and the operator calculus applied to its
//! sensor components.
//!
//! The signal is `dX = f(X) dt + sigma(X) dV`, the observation is
//! `dY = h(X) dt + dW`. The generator `L0` and the diffusion directional
//! derivatives `Lr` act on scalar expressions; their composition `L^a` along
//! a multi-index produces the coefficient family `L^a h_i` consumed by the
//! likelihood discretizations. Everything here is exact symbolic algebra on
//! [`Expr`] trees.

use crate::expr::{self, diff, eval, Expr};
use crate::multiindex::{enumerate_m, MultiIndex, MultiIndexError};
use rand::Rng;
use serde::Deserialize;
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("model file {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("formula for {what}: {source}")]
    Formula {
        what: String,
        source: expr::ParseError,
    },
    #[error("{what} has {got} entries, expected {want}")]
    Shape {
        what: String,
        got: usize,
        want: usize,
    },
    #[error("{what} references x{index}, but d_x = {d_x}")]
    VariableOutOfRange {
        what: String,
        index: usize,
        d_x: usize,
    },
    #[error("dimension {what} must be positive")]
    ZeroDimension { what: String },
    #[error("lh_bound must be >= 0 (got {got})")]
    NegativeLhBound { got: f64 },
    #[error("order m = {m} exceeds the model's smoothness_order {smoothness_order}")]
    OrderTooHigh { m: usize, smoothness_order: usize },
    #[error(transparent)]
    MultiIndex(#[from] MultiIndexError),
    #[error("initial law: {0}")]
    InitialLaw(String),
}

/// Law of the initial signal state.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Point(Vec<f64>),
    /// Independent Gaussian components.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

impl InitialLaw {
    pub fn mean(&self) -> &[f64] {
        match self {
            InitialLaw::Point(v) => v,
            InitialLaw::Gaussian { mean, .. } => mean,
        }
    }

    /// Diagonal of the initial covariance.
    pub fn variance_diag(&self) -> Vec<f64> {
        match self {
            InitialLaw::Point(v) => vec![0.0; v.len()],
            InitialLaw::Gaussian { std, .. } => std.iter().map(|s| s * s).collect(),
        }
    }
}

/// The partially observed system: dimensions, drift, diffusion, sensor, the
/// derived time component `h0 = -1/2 sum_i h_i^2`, and the user-asserted
/// sup-norm bound for the first-order sensor derivatives `L^r h_i`.
#[derive(Debug, Clone)]
pub struct PosysModel {
    pub d_x: usize,
    pub d_v: usize,
    pub d_y: usize,
    pub f: Vec<Expr>,
    pub sigma: Vec<Vec<Expr>>,
    pub h: Vec<Expr>,
    pub h0: Expr,
    pub smoothness_order: usize,
    pub lh_bound: f64,
    pub x0: InitialLaw,
}

impl PosysModel {
    pub fn new(
        d_x: usize,
        d_v: usize,
        d_y: usize,
        f: Vec<Expr>,
        sigma: Vec<Vec<Expr>>,
        h: Vec<Expr>,
        smoothness_order: usize,
        lh_bound: f64,
        x0: InitialLaw,
    ) -> Result<Self, ModelError> {
        for (name, d) in [("d_x", d_x), ("d_v", d_v), ("d_y", d_y)] {
            if d == 0 {
                return Err(ModelError::ZeroDimension { what: name.into() });
            }
        }
        if f.len() != d_x {
            return Err(ModelError::Shape {
                what: "f".into(),
                got: f.len(),
                want: d_x,
            });
        }
        if sigma.len() != d_x {
            return Err(ModelError::Shape {
                what: "sigma".into(),
                got: sigma.len(),
                want: d_x,
            });
        }
        for (i, row) in sigma.iter().enumerate() {
            if row.len() != d_v {
                return Err(ModelError::Shape {
                    what: format!("sigma row {}", i + 1),
                    got: row.len(),
                    want: d_v,
                });
            }
        }
        if h.len() != d_y {
            return Err(ModelError::Shape {
                what: "h".into(),
                got: h.len(),
                want: d_y,
            });
        }
        if !(lh_bound >= 0.0) {
            return Err(ModelError::NegativeLhBound { got: lh_bound });
        }
        let check_vars = |what: String, e: &Expr| -> Result<(), ModelError> {
            let mv = e.max_var();
            if mv > d_x {
                return Err(ModelError::VariableOutOfRange {
                    what,
                    index: mv,
                    d_x,
                });
            }
            Ok(())
        };
        for (i, e) in f.iter().enumerate() {
            check_vars(format!("f{}", i + 1), e)?;
        }
        for (i, row) in sigma.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                check_vars(format!("sigma{},{}", i + 1, j + 1), e)?;
            }
        }
        for (i, e) in h.iter().enumerate() {
            check_vars(format!("h{}", i + 1), e)?;
        }
        match &x0 {
            InitialLaw::Point(v) if v.len() != d_x => {
                return Err(ModelError::InitialLaw(format!(
                    "point mass has {} entries, expected {}",
                    v.len(),
                    d_x
                )))
            }
            InitialLaw::Gaussian { mean, std } => {
                if mean.len() != d_x || std.len() != d_x {
                    return Err(ModelError::InitialLaw(format!(
                        "gaussian law has {}/{} entries, expected {}",
                        mean.len(),
                        std.len(),
                        d_x
                    )));
                }
                if std.iter().any(|s| !(*s >= 0.0)) {
                    return Err(ModelError::InitialLaw("negative std".into()));
                }
            }
            _ => {}
        }
        // h0 = -1/2 * (h1^2 + ... + h_{d_y}^2)
        let mut sum = Expr::Const(0.0);
        for hi in &h {
            sum = Expr::add(sum, Expr::pow(hi.clone(), 2));
        }
        let h0 = Expr::mul(Expr::Const(-0.5), sum);
        Ok(PosysModel {
            d_x,
            d_v,
            d_y,
            f,
            sigma,
            h,
            h0,
            smoothness_order,
            lh_bound,
            x0,
        })
    }

    /// Sensor component by augmented index: `0` is the derived `h0`.
    pub fn sensor(&self, i: usize) -> &Expr {
        if i == 0 {
            &self.h0
        } else {
            &self.h[i - 1]
        }
    }

    /// Mesh admissibility threshold `1 / (2 ||Lh||_inf sqrt(d_y d_v))` for
    /// orders `m >= 2`; infinite when the sensor is flat (`lh_bound == 0`).
    pub fn delta0(&self) -> f64 {
        if self.lh_bound == 0.0 {
            f64::INFINITY
        } else {
            1.0 / (2.0 * self.lh_bound * ((self.d_y * self.d_v) as f64).sqrt())
        }
    }

    /// Components with polynomial growth, for which the boundedness
    /// assumptions behind the convergence guarantees are not satisfied.
    /// The library warns and proceeds.
    pub fn boundedness_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |name: String, e: &Expr| {
            if !e.is_syntactically_bounded() {
                out.push(format!("{name} = {e} is not a bounded expression"));
            }
        };
        for (i, e) in self.f.iter().enumerate() {
            check(format!("f{}", i + 1), e);
        }
        for (i, row) in self.sigma.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                check(format!("sigma{},{}", i + 1, j + 1), e);
            }
        }
        for (i, e) in self.h.iter().enumerate() {
            check(format!("h{}", i + 1), e);
        }
        out
    }

    /// Sample `max |L^r h_i|` over a box, to sanity-check `lh_bound`.
    pub fn sample_lh_sup<R: Rng>(&self, lo: f64, hi: f64, samples: usize, rng: &mut R) -> f64 {
        let mut worst: f64 = 0.0;
        let mut exprs = Vec::new();
        for i in 1..=self.d_y {
            for r in 1..=self.d_v {
                exprs.push(apply_lr(self.sensor(i), r, self));
            }
        }
        let mut x = vec![0.0; self.d_x];
        for _ in 0..samples {
            for xi in x.iter_mut() {
                *xi = rng.random_range(lo..=hi);
            }
            for e in &exprs {
                worst = worst.max(eval(e, &x).abs());
            }
        }
        worst
    }
}

/// Generator: `L0 g = sum_k f_k dg/dx_k + 1/2 sum_{k,l} (sum_r s_kr s_lr) d2g/dx_k dx_l`.
pub fn apply_l0(g: &Expr, model: &PosysModel) -> Expr {
    let mut acc = Expr::Const(0.0);
    let first: Vec<Expr> = (1..=model.d_x).map(|k| diff(g, k)).collect();
    for k in 0..model.d_x {
        acc = Expr::add(acc, Expr::mul(model.f[k].clone(), first[k].clone()));
    }
    for k in 0..model.d_x {
        for l in 0..model.d_x {
            let second = diff(&first[k], l + 1);
            if second.is_zero() {
                continue;
            }
            let mut a_kl = Expr::Const(0.0);
            for r in 0..model.d_v {
                a_kl = Expr::add(
                    a_kl,
                    Expr::mul(model.sigma[k][r].clone(), model.sigma[l][r].clone()),
                );
            }
            acc = Expr::add(acc, Expr::mul(Expr::mul(Expr::Const(0.5), a_kl), second));
        }
    }
    acc
}

/// Diffusion direction `r`: `Lr g = sum_k sigma_{k,r} dg/dx_k`.
pub fn apply_lr(g: &Expr, r: usize, model: &PosysModel) -> Expr {
    assert!(r >= 1 && r <= model.d_v, "diffusion index out of range");
    let mut acc = Expr::Const(0.0);
    for k in 0..model.d_x {
        acc = Expr::add(
            acc,
            Expr::mul(model.sigma[k][r - 1].clone(), diff(g, k + 1)),
        );
    }
    acc
}

/// Composition along a multi-index, rightmost label applied first:
/// `L^a g = L^{a_1}(L^{a_2}(...(L^{a_k} g)))`; the empty index is identity.
pub fn apply_lalpha(alpha: &MultiIndex, g: &Expr, model: &PosysModel) -> Expr {
    let mut acc = g.clone();
    for &label in alpha.components().iter().rev() {
        acc = if label == 0 {
            apply_l0(&acc, model)
        } else {
            apply_lr(&acc, label as usize, model)
        };
    }
    acc
}

/// Precomputed `L^a h_i` for all sensors `i` in `{0..d_y}` and all `a` of
/// length `<= m - 1`, in enumeration order. Immutable once built.
#[derive(Debug, Clone)]
pub struct CoefficientTable {
    pub order: usize,
    pub d_y: usize,
    indices: Vec<MultiIndex>,
    slot_of: HashMap<MultiIndex, usize>,
    /// `entries[i][slot]` is `L^{indices[slot]} h_i`.
    entries: Vec<Vec<Expr>>,
    /// Compiled form of each entry, same layout.
    programs: Vec<Vec<crate::expr::Program>>,
}

impl CoefficientTable {
    /// The multi-indices covered, in length-then-lex order (empty index first).
    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn slot(&self, alpha: &MultiIndex) -> Option<usize> {
        self.slot_of.get(alpha).copied()
    }

    pub fn lookup(&self, i: usize, alpha: &MultiIndex) -> Option<&Expr> {
        self.slot(alpha).map(|s| &self.entries[i][s])
    }

    pub fn entry(&self, i: usize, slot: usize) -> &Expr {
        &self.entries[i][slot]
    }

    /// Compiled form of an entry; evaluates bit-identically to the tree.
    pub fn entry_program(&self, i: usize, slot: usize) -> &crate::expr::Program {
        &self.programs[i][slot]
    }

    pub fn n_slots(&self) -> usize {
        self.indices.len()
    }
}

/// Build the coefficient table for scheme order `m >= 1`: entries for all
/// `i` and all multi-indices of length `<= m - 1`. Each entry reuses the
/// already-built entry of its tail index, so the operator work is linear in
/// the table size.
pub fn build_table(model: &PosysModel, m: usize) -> Result<CoefficientTable, ModelError> {
    if m < 1 {
        return Err(ModelError::OrderTooHigh {
            m,
            smoothness_order: model.smoothness_order,
        });
    }
    if m > model.smoothness_order {
        return Err(ModelError::OrderTooHigh {
            m,
            smoothness_order: model.smoothness_order,
        });
    }
    let indices = enumerate_m(m - 1, model.d_v, true)?;
    let mut slot_of = HashMap::new();
    for (s, a) in indices.iter().enumerate() {
        slot_of.insert(a.clone(), s);
    }
    let mut entries = Vec::with_capacity(model.d_y + 1);
    for i in 0..=model.d_y {
        let mut row: Vec<Expr> = Vec::with_capacity(indices.len());
        for alpha in &indices {
            if alpha.is_empty() {
                row.push(model.sensor(i).clone());
            } else {
                let tail = alpha.drop_first();
                let tail_expr = &row[slot_of[&tail]];
                let label = alpha.components()[0];
                let e = if label == 0 {
                    apply_l0(tail_expr, model)
                } else {
                    apply_lr(tail_expr, label as usize, model)
                };
                row.push(e);
            }
        }
        entries.push(row);
    }
    let programs = entries
        .iter()
        .map(|row| row.iter().map(crate::expr::Program::compile).collect())
        .collect();
    Ok(CoefficientTable {
        order: m,
        d_y: model.d_y,
        indices,
        slot_of,
        entries,
        programs,
    })
}

// ---------------------------------------------------------------------------
// model files

#[derive(Deserialize)]
struct InitialLawDoc {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    value: Vec<f64>,
    #[serde(default)]
    mean: Vec<f64>,
    #[serde(default)]
    std: Vec<f64>,
}

#[derive(Deserialize)]
struct ModelDoc {
    d_x: usize,
    d_v: usize,
    d_y: usize,
    f: Vec<String>,
    sigma: Vec<Vec<String>>,
    h: Vec<String>,
    lh_bound: f64,
    smoothness_order: usize,
    #[serde(default)]
    x0: Option<InitialLawDoc>,
}

/// Parse a model definition from its JSON text.
pub fn model_from_json(text: &str, origin: &str) -> Result<PosysModel, ModelError> {
    let doc: ModelDoc = serde_json::from_str(text).map_err(|source| ModelError::Json {
        path: origin.to_string(),
        source,
    })?;
    let parse_one = |what: String, s: &str| -> Result<Expr, ModelError> {
        expr::parse(s, doc.d_x).map_err(|source| ModelError::Formula { what, source })
    };
    let mut f = Vec::new();
    for (i, s) in doc.f.iter().enumerate() {
        f.push(parse_one(format!("f{}", i + 1), s)?);
    }
    let mut sigma = Vec::new();
    for (i, row) in doc.sigma.iter().enumerate() {
        let mut out = Vec::new();
        for (j, s) in row.iter().enumerate() {
            out.push(parse_one(format!("sigma{},{}", i + 1, j + 1), s)?);
        }
        sigma.push(out);
    }
    let mut h = Vec::new();
    for (i, s) in doc.h.iter().enumerate() {
        h.push(parse_one(format!("h{}", i + 1), s)?);
    }
    let x0 = match doc.x0 {
        None => InitialLaw::Point(vec![0.0; doc.d_x]),
        Some(law) => match law.kind.as_str() {
            "point" => InitialLaw::Point(law.value),
            "gaussian" => InitialLaw::Gaussian {
                mean: law.mean,
                std: law.std,
            },
            other => {
                return Err(ModelError::InitialLaw(format!(
                    "unknown law type `{other}` (expected `point` or `gaussian`)"
                )))
            }
        },
    };
    PosysModel::new(
        doc.d_x,
        doc.d_v,
        doc.d_y,
        f,
        sigma,
        h,
        doc.smoothness_order,
        doc.lh_bound,
        x0,
    )
}

/// Load a model definition file, returning the model and the raw bytes
/// (callers hash the bytes so reports are attributable to a model file).
pub fn load_model(path: &Path) -> Result<(PosysModel, Vec<u8>), ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let text = String::from_utf8_lossy(&bytes);
    let model = model_from_json(&text, &path.display().to_string())?;
    Ok((model, bytes))
}
