//! Reproducible generation of Brownian drivers, Euler signal paths,
//! observation paths, and the discrete iterated integrals they carry.
//!
//! All continuous-time integrals are carried on a fine grid: each coarse
//! interval of the scheme partition is subdivided `R` times, and every
//! stochastic integral is a left-point (Ito) sum over fine steps. Randomness
//! comes from per-(seed, path, stream) ChaCha substreams, so a path is a pure
//! function of its coordinates and ensembles reproduce bit-identically on
//! any number of worker threads.

use crate::model::{InitialLaw, PosysModel};
use crate::partition::Partition;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("refinement factor must be a power of two (got {got})")]
    BadRefinement { got: usize },
    #[error("integrand has {got} values, interval needs {want} (or {} with the endpoint)", want + 1)]
    LengthMismatch { got: usize, want: usize },
    #[error("partition does not align with the fine grid near t = {at}")]
    Misaligned { at: f64 },
    #[error("paths live on different grids")]
    GridMismatch,
    #[error("binary path dump: {0}")]
    Dump(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Fixed stream ids per driver component.
pub const STREAM_X0: u64 = 0;
pub const STREAM_V: u64 = 1;
pub const STREAM_W: u64 = 2;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-style substream: a ChaCha generator keyed by (seed, path, stream).
/// The same coordinates give the same stream regardless of how many other
/// streams were drawn, which is what makes parallel ensembles reproducible.
pub fn substream_rng(seed: u64, path_index: u64, stream: u64) -> ChaCha12Rng {
    let mut acc = 0x243F_6A88_85A3_08D3u64;
    for v in [seed, path_index, stream] {
        acc = mix64(acc ^ v).wrapping_add(v.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&mix64(acc.wrapping_add(i as u64 + 1)).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// How the observation component of a bundle was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Measure {
    /// Physical measure: `dY = h(X) dt + dW`.
    P,
    /// Reference measure: `Y` is a Brownian motion independent of `X`.
    PTilde,
}

/// A coarse partition with each interval subdivided `r` times.
#[derive(Debug, Clone, PartialEq)]
pub struct FineGrid {
    coarse: Partition,
    r: usize,
    times: Vec<f64>,
}

impl FineGrid {
    pub fn new(coarse: Partition, r: usize) -> Result<Self, SimulateError> {
        if r == 0 || !r.is_power_of_two() {
            return Err(SimulateError::BadRefinement { got: r });
        }
        let n = coarse.n();
        let mut times = Vec::with_capacity(n * r + 1);
        for j in 0..n {
            let left = coarse.times()[j];
            let width = coarse.step(j);
            for k in 0..r {
                times.push(left + (k as f64 / r as f64) * width);
            }
        }
        times.push(coarse.t_end());
        Ok(FineGrid { coarse, r, times })
    }

    pub fn coarse(&self) -> &Partition {
        &self.coarse
    }

    pub fn refinement(&self) -> usize {
        self.r
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of fine steps.
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn step(&self, l: usize) -> f64 {
        self.times[l + 1] - self.times[l]
    }

    /// Fine index of coarse point `j` of the grid's own partition.
    pub fn coarse_index(&self, j: usize) -> usize {
        j * self.r
    }

    /// Fine indices of the points of an arbitrary partition of the same
    /// horizon, or an error if some point is not on the grid.
    pub fn align(&self, p: &Partition) -> Result<Vec<usize>, SimulateError> {
        let mut out = Vec::with_capacity(p.times().len());
        let mut cursor = 0usize;
        for &t in p.times() {
            let tol = 1e-12 * (1.0 + t.abs());
            while cursor < self.times.len() && self.times[cursor] < t - tol {
                cursor += 1;
            }
            if cursor >= self.times.len() || (self.times[cursor] - t).abs() > tol {
                return Err(SimulateError::Misaligned { at: t });
            }
            out.push(cursor);
        }
        if *out.last().unwrap() != self.n_steps() {
            return Err(SimulateError::Misaligned { at: p.t_end() });
        }
        Ok(out)
    }
}

/// Signal-side realization: initial state, V increments, Euler path.
#[derive(Debug, Clone)]
pub struct SignalPath {
    /// `n_steps x d_v`, row-major.
    pub dv: Vec<f64>,
    /// `(n_steps + 1) x d_x`, row-major.
    pub x: Vec<f64>,
}

/// One full realization on a fine grid: drivers, signal and observation.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub grid: Arc<FineGrid>,
    pub d_x: usize,
    pub d_v: usize,
    pub d_y: usize,
    /// `n_steps x d_v` V-increments.
    pub dv: Vec<f64>,
    /// `n_steps x d_y` W-increments.
    pub dw: Vec<f64>,
    /// `(n_steps + 1) x d_x` signal states.
    pub x: Vec<f64>,
    /// `(n_steps + 1) x d_y` observation values.
    pub y: Vec<f64>,
    pub measure: Measure,
}

/// Borrowed view pairing a signal path with an observation path on the same
/// grid; this is what the likelihood evaluators consume, and it lets an
/// ensemble reuse one conditioning observation across many signal paths.
#[derive(Clone, Copy)]
pub struct PathView<'a> {
    pub grid: &'a FineGrid,
    pub d_x: usize,
    pub d_v: usize,
    pub d_y: usize,
    pub x: &'a [f64],
    pub dv: &'a [f64],
    pub y: &'a [f64],
}

impl<'a> PathView<'a> {
    pub fn x_at(&self, l: usize) -> &'a [f64] {
        &self.x[l * self.d_x..(l + 1) * self.d_x]
    }

    /// Augmented-driver increment: component 0 is the time step, components
    /// `1..=d_v` are the V increments.
    pub fn dv_driver(&self, l: usize, component: usize) -> f64 {
        if component == 0 {
            self.grid.step(l)
        } else {
            self.dv[l * self.d_v + (component - 1)]
        }
    }

    /// Augmented-observation increment: component 0 is the time step,
    /// components `1..=d_y` are increments of Y.
    pub fn dy(&self, l: usize, component: usize) -> f64 {
        if component == 0 {
            self.grid.step(l)
        } else {
            let i = component - 1;
            self.y[(l + 1) * self.d_y + i] - self.y[l * self.d_y + i]
        }
    }

    pub fn y_at(&self, l: usize) -> &'a [f64] {
        &self.y[l * self.d_y..(l + 1) * self.d_y]
    }
}

impl PathBundle {
    pub fn view(&self) -> PathView<'_> {
        PathView {
            grid: &self.grid,
            d_x: self.d_x,
            d_v: self.d_v,
            d_y: self.d_y,
            x: &self.x,
            dv: &self.dv,
            y: &self.y,
        }
    }

    /// Pair this bundle's observation with another signal realization.
    pub fn view_with_signal<'a>(&'a self, signal: &'a SignalPath) -> PathView<'a> {
        PathView {
            grid: &self.grid,
            d_x: self.d_x,
            d_v: self.d_v,
            d_y: self.d_y,
            x: &signal.x,
            dv: &signal.dv,
            y: &self.y,
        }
    }
}

/// Draw the signal side only (initial state, V increments, Euler path).
pub fn generate_signal(
    model: &PosysModel,
    grid: &FineGrid,
    seed: u64,
    path_index: u64,
) -> SignalPath {
    let k_steps = grid.n_steps();
    let d_x = model.d_x;
    let d_v = model.d_v;

    let mut x0 = model.x0.mean().to_vec();
    if let InitialLaw::Gaussian { mean, std } = &model.x0 {
        let mut rng = substream_rng(seed, path_index, STREAM_X0);
        for i in 0..d_x {
            let z: f64 = rng.sample(StandardNormal);
            x0[i] = mean[i] + std[i] * z;
        }
    }

    let mut dv = vec![0.0; k_steps * d_v];
    {
        let mut rng = substream_rng(seed, path_index, STREAM_V);
        for l in 0..k_steps {
            let sq = grid.step(l).sqrt();
            for r in 0..d_v {
                let z: f64 = rng.sample(StandardNormal);
                dv[l * d_v + r] = sq * z;
            }
        }
    }

    let f_prog: Vec<crate::expr::Program> =
        model.f.iter().map(crate::expr::Program::compile).collect();
    let sigma_prog: Vec<Vec<crate::expr::Program>> = model
        .sigma
        .iter()
        .map(|row| row.iter().map(crate::expr::Program::compile).collect())
        .collect();
    let mut stack = Vec::new();
    let mut x = vec![0.0; (k_steps + 1) * d_x];
    x[..d_x].copy_from_slice(&x0);
    let mut state = x0;
    for l in 0..k_steps {
        let ds = grid.step(l);
        let mut next = state.clone();
        for i in 0..d_x {
            let mut acc = state[i];
            acc += f_prog[i].eval(&state, &mut stack) * ds;
            for r in 0..d_v {
                acc += sigma_prog[i][r].eval(&state, &mut stack) * dv[l * d_v + r];
            }
            next[i] = acc;
        }
        x[(l + 1) * d_x..(l + 2) * d_x].copy_from_slice(&next);
        state = next;
    }
    SignalPath { dv, x }
}

/// Generate a full realization. The same `(seed, path_index)` reproduces the
/// bundle bit-identically regardless of execution order.
pub fn generate(
    model: &PosysModel,
    grid: Arc<FineGrid>,
    seed: u64,
    path_index: u64,
    measure: Measure,
) -> PathBundle {
    let signal = generate_signal(model, &grid, seed, path_index);
    let k_steps = grid.n_steps();
    let d_y = model.d_y;

    let mut dw = vec![0.0; k_steps * d_y];
    {
        let mut rng = substream_rng(seed, path_index, STREAM_W);
        for l in 0..k_steps {
            let sq = grid.step(l).sqrt();
            for i in 0..d_y {
                let z: f64 = rng.sample(StandardNormal);
                dw[l * d_y + i] = sq * z;
            }
        }
    }

    let h_prog: Vec<crate::expr::Program> =
        model.h.iter().map(crate::expr::Program::compile).collect();
    let mut stack = Vec::new();
    let mut y = vec![0.0; (k_steps + 1) * d_y];
    let mut hx = vec![0.0; d_y];
    for l in 0..k_steps {
        let ds = grid.step(l);
        if measure == Measure::P {
            let xs = &signal.x[l * model.d_x..(l + 1) * model.d_x];
            for i in 0..d_y {
                hx[i] = h_prog[i].eval(xs, &mut stack);
            }
        }
        for i in 0..d_y {
            let drift = match measure {
                Measure::P => hx[i] * ds,
                Measure::PTilde => 0.0,
            };
            y[(l + 1) * d_y + i] = y[l * d_y + i] + drift + dw[l * d_y + i];
        }
    }

    PathBundle {
        grid,
        d_x: model.d_x,
        d_v: model.d_v,
        d_y,
        dv: signal.dv,
        dw,
        x: signal.x,
        y,
        measure,
    }
}

/// Discrete iterated Ito integral `I_alpha(1)_{t_j, s}` at every fine point
/// of coarse interval `j` (of the bundle's own partition), inclusive of both
/// endpoints. Left-point recursion: the update over a fine step uses the
/// integrand value at the step's left point.
pub fn iterated_integral(
    alpha: &crate::multiindex::MultiIndex,
    view: &PathView<'_>,
    j: usize,
) -> Vec<f64> {
    let r = view.grid.refinement();
    let lo = view.grid.coarse_index(j);
    if alpha.is_empty() {
        return vec![1.0; r + 1];
    }
    let parent = iterated_integral(&alpha.drop_last(), view, j);
    let driver = alpha.last().unwrap() as usize;
    let mut out = Vec::with_capacity(r + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for k in 0..r {
        acc += parent[k] * view.dv_driver(lo + k, driver);
        out.push(acc);
    }
    out
}

/// Discrete iterated integral of a fine-grid process over coarse interval
/// `j`: the empty index returns the process itself, otherwise the usual
/// left-point recursion runs with the process as innermost integrand.
/// `values` holds the process at the interval's fine points (inclusive).
/// Feeding the constant process 1 reproduces [`iterated_integral`].
pub fn iterated_integral_process(
    alpha: &crate::multiindex::MultiIndex,
    values: &[f64],
    view: &PathView<'_>,
    j: usize,
) -> Result<Vec<f64>, SimulateError> {
    let r = view.grid.refinement();
    if values.len() != r + 1 {
        return Err(SimulateError::LengthMismatch {
            got: values.len(),
            want: r,
        });
    }
    if alpha.is_empty() {
        return Ok(values.to_vec());
    }
    let parent = iterated_integral_process(&alpha.drop_last(), values, view, j)?;
    let driver = alpha.last().unwrap() as usize;
    let lo = view.grid.coarse_index(j);
    let mut out = Vec::with_capacity(r + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for k in 0..r {
        acc += parent[k] * view.dv_driver(lo + k, driver);
        out.push(acc);
    }
    Ok(out)
}

/// Left-point integral of a fine-grid integrand against `dY^i` over coarse
/// interval `j`; component 0 integrates against time. Accepts the integrand
/// on the interval's fine points with or without the right endpoint.
pub fn integrate_against_dy(
    values: &[f64],
    i: usize,
    view: &PathView<'_>,
    j: usize,
) -> Result<f64, SimulateError> {
    let r = view.grid.refinement();
    if values.len() != r && values.len() != r + 1 {
        return Err(SimulateError::LengthMismatch {
            got: values.len(),
            want: r,
        });
    }
    let lo = view.grid.coarse_index(j);
    let mut acc = 0.0;
    for k in 0..r {
        acc += values[k] * view.dy(lo + k, i);
    }
    Ok(acc)
}

/// Aggregate fine steps by `factor`, producing the same driving noise seen
/// at a coarser resolution: increments are summed, the signal is re-advanced
/// by Euler on the coarser grid, and the observation is rebuilt per the
/// bundle's measure.
pub fn coarsen(
    model: &PosysModel,
    bundle: &PathBundle,
    factor: usize,
) -> Result<PathBundle, SimulateError> {
    let r = bundle.grid.refinement();
    if factor == 0 || !factor.is_power_of_two() || r % factor != 0 {
        return Err(SimulateError::BadRefinement { got: factor });
    }
    let grid = Arc::new(FineGrid::new(bundle.grid.coarse().clone(), r / factor)?);
    let k_new = grid.n_steps();
    let (d_x, d_v, d_y) = (bundle.d_x, bundle.d_v, bundle.d_y);

    let sum_groups = |src: &[f64], width: usize| -> Vec<f64> {
        let mut out = vec![0.0; k_new * width];
        for l_new in 0..k_new {
            for c in 0..width {
                let mut acc = 0.0;
                for q in 0..factor {
                    acc += src[(l_new * factor + q) * width + c];
                }
                out[l_new * width + c] = acc;
            }
        }
        out
    };
    let dv = sum_groups(&bundle.dv, d_v);
    let dw = sum_groups(&bundle.dw, d_y);

    let mut x = vec![0.0; (k_new + 1) * d_x];
    x[..d_x].copy_from_slice(&bundle.x[..d_x]);
    let mut state = bundle.x[..d_x].to_vec();
    for l in 0..k_new {
        let ds = grid.step(l);
        let mut next = state.clone();
        for i in 0..d_x {
            let mut acc = state[i];
            acc += crate::expr::eval(&model.f[i], &state) * ds;
            for rr in 0..d_v {
                acc += crate::expr::eval(&model.sigma[i][rr], &state) * dv[l * d_v + rr];
            }
            next[i] = acc;
        }
        x[(l + 1) * d_x..(l + 2) * d_x].copy_from_slice(&next);
        state = next;
    }

    let mut y = vec![0.0; (k_new + 1) * d_y];
    for l in 0..k_new {
        let ds = grid.step(l);
        for i in 0..d_y {
            let drift = match bundle.measure {
                Measure::P => {
                    crate::expr::eval(&model.h[i], &x[l * d_x..(l + 1) * d_x]) * ds
                }
                Measure::PTilde => 0.0,
            };
            y[(l + 1) * d_y + i] = y[l * d_y + i] + drift + dw[l * d_y + i];
        }
    }

    Ok(PathBundle {
        grid,
        d_x,
        d_v,
        d_y,
        dv,
        dw,
        x,
        y,
        measure: bundle.measure,
    })
}

// ---------------------------------------------------------------------------
// binary dump (debugging aid)
//
// Layout, all little-endian:
//   magic "HFPB" + u32 version (1)
//   u32 d_x, d_v, d_y, measure (0 = P, 1 = PTilde), n_coarse, refinement
//   f64 coarse times (n_coarse + 1)
//   f64 dv (n_steps * d_v), dw (n_steps * d_y),
//       x ((n_steps + 1) * d_x), y ((n_steps + 1) * d_y)

const DUMP_MAGIC: &[u8; 4] = b"HFPB";

pub fn dump_bundle<W: Write>(bundle: &PathBundle, mut w: W) -> Result<(), SimulateError> {
    w.write_all(DUMP_MAGIC)?;
    let measure = match bundle.measure {
        Measure::P => 0u32,
        Measure::PTilde => 1,
    };
    for v in [
        1u32,
        bundle.d_x as u32,
        bundle.d_v as u32,
        bundle.d_y as u32,
        measure,
        bundle.grid.coarse().n() as u32,
        bundle.grid.refinement() as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut write_f64s = |vals: &[f64]| -> std::io::Result<()> {
        for v in vals {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    write_f64s(bundle.grid.coarse().times())?;
    write_f64s(&bundle.dv)?;
    write_f64s(&bundle.dw)?;
    write_f64s(&bundle.x)?;
    write_f64s(&bundle.y)?;
    Ok(())
}

pub fn load_bundle<R: Read>(mut r: R) -> Result<PathBundle, SimulateError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(SimulateError::Dump("bad magic".into()));
    }
    let read_u32 = |r: &mut R| -> Result<u32, SimulateError> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = read_u32(&mut r)?;
    if version != 1 {
        return Err(SimulateError::Dump(format!("unsupported version {version}")));
    }
    let d_x = read_u32(&mut r)? as usize;
    let d_v = read_u32(&mut r)? as usize;
    let d_y = read_u32(&mut r)? as usize;
    let measure = match read_u32(&mut r)? {
        0 => Measure::P,
        1 => Measure::PTilde,
        m => return Err(SimulateError::Dump(format!("unknown measure tag {m}"))),
    };
    let n_coarse = read_u32(&mut r)? as usize;
    let refinement = read_u32(&mut r)? as usize;
    let read_f64s = |r: &mut R, count: usize| -> Result<Vec<f64>, SimulateError> {
        let mut out = Vec::with_capacity(count);
        let mut b = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut b)?;
            out.push(f64::from_le_bytes(b));
        }
        Ok(out)
    };
    let coarse_times = read_f64s(&mut r, n_coarse + 1)?;
    let coarse = Partition::new(coarse_times, crate::partition::DEFAULT_UNIFORMITY_C)
        .map_err(|e| SimulateError::Dump(e.to_string()))?;
    let grid = Arc::new(FineGrid::new(coarse, refinement)?);
    let k_steps = grid.n_steps();
    let dv = read_f64s(&mut r, k_steps * d_v)?;
    let dw = read_f64s(&mut r, k_steps * d_y)?;
    let x = read_f64s(&mut r, (k_steps + 1) * d_x)?;
    let y = read_f64s(&mut r, (k_steps + 1) * d_y)?;
    Ok(PathBundle {
        grid,
        d_x,
        d_v,
        d_y,
        dv,
        dw,
        x,
        y,
        measure,
    })
}
