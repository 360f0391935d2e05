//! The log-likelihood functional, its order-m discretizations, the taming
//! truncation, and the per-interval recursive form.
//!
//! For a path realization on a fine grid, the reference functional is
//! `xi = sum_i int h_i(X_s) dY^i_s` (component 0 integrates `h0` against
//! time). The order-m scheme replaces `h_i(X_s)` by its truncated stochastic
//! Taylor expansion from the last partition point, giving per-interval sums
//! over multi-indices of length `< m` weighted by iterated integrals. Orders
//! one and two exponentiate directly; higher orders tame the length >= 2
//! part through the bounded odd truncation `Gamma_{q,delta}` so the weight
//! stays integrable.
//!
//! Exactness contract: for a constant sensor every correction term vanishes
//! identically, and the scheme must reproduce the reference weight *bit for
//! bit*. The evaluators therefore accumulate strictly per fine step, sensor
//! index inner, with the empty-index atom multiplied exactly like the
//! reference atom, and [`reference_blocks`] groups the reference sum by the
//! same intervals. Tests rely on this.

use crate::model::{CoefficientTable, PosysModel};
use crate::multiindex::MultiIndex;
use crate::partition::{admissible, Partition};
use crate::simulate::{integrate_against_dy, iterated_integral, PathView, SimulateError};
use serde::Serialize;
use thiserror::Error;

/// Beyond this magnitude `exp(xi)` is a numerical diagnostic, not a weight.
pub const XI_OVERFLOW_LIMIT: f64 = 700.0;

#[derive(Debug, Error)]
pub enum LikelihoodError {
    #[error("scheme order {m} exceeds the coefficient table's order {table_order}")]
    OrderTooHigh { m: usize, table_order: usize },
    #[error("the correction term is defined for m >= 3 (got m = {m})")]
    DomainError { m: usize },
    #[error("inadmissible mesh: delta {delta} >= delta0 {delta0} for order {m}")]
    InadmissibleMesh { delta: f64, delta0: f64, m: usize },
    #[error("|xi| = {value} exceeds {XI_OVERFLOW_LIMIT}; the mesh is too coarse or the model violates its bounds")]
    XiOverflow { value: f64 },
    #[error(transparent)]
    Grid(#[from] SimulateError),
}

// ---------------------------------------------------------------------------
// truncation

/// Bounded odd truncation `Gamma_{q,delta}(z) = z / (1 + |z/delta|^{2q})`.
///
/// The absolute value makes the denominator well defined for the half-integer
/// exponents the schemes use (`q = m - 1/2`), keeps the map odd, and agrees
/// with the plain form for `z >= 0`. Satisfies `|Gamma| <= delta` for all z.
pub fn gamma(q: f64, delta: f64, z: f64) -> f64 {
    debug_assert!(q >= 1.0 && delta > 0.0);
    let w = (z.abs() / delta).powf(2.0 * q);
    z / (1.0 + w)
}

/// Taming error `epsilon_{q,delta}(z) = Gamma_{q,delta}(z) - z`, evaluated in
/// the cancellation-free form `-z w / (1 + w)` with `w = |z/delta|^{2q}`.
/// Satisfies `|epsilon| <= delta^{-2q} |z|^{2q+1}`.
pub fn epsilon(q: f64, delta: f64, z: f64) -> f64 {
    debug_assert!(q >= 1.0 && delta > 0.0);
    let w = (z.abs() / delta).powf(2.0 * q);
    let zw = z * w;
    if !zw.is_finite() {
        // Gamma underflowed to zero; the error is -z exactly
        return -z;
    }
    -(zw / (1.0 + w))
}

/// The bound `delta^{-2q} |z|^{2q+1}` in the factored form `|z| w`, matching
/// the factorization inside [`epsilon`] so the inequality holds in floating
/// point without tolerance.
pub fn epsilon_bound(q: f64, delta: f64, z: f64) -> f64 {
    let w = (z.abs() / delta).powf(2.0 * q);
    z.abs() * w
}

// ---------------------------------------------------------------------------
// reference functional

/// Augmented observation increments of a path, flattened per fine step with
/// stride `d_y + 1`: component 0 is the time step, the rest are Y
/// increments. These are signal-independent, so one table serves a whole
/// ensemble conditioned on the same observation.
pub fn observation_increments(view: &PathView<'_>) -> Vec<f64> {
    let k_steps = view.grid.n_steps();
    let stride = view.d_y + 1;
    let mut out = Vec::with_capacity(k_steps * stride);
    for l in 0..k_steps {
        for i in 0..stride {
            out.push(view.dy(l, i));
        }
    }
    out
}

/// Per-fine-step contributions `sum_i h_i(X_l) dY^i_l` of the reference
/// log-likelihood; summing them in order gives [`xi_reference`].
pub fn reference_subtotals(model: &PosysModel, view: &PathView<'_>) -> Vec<f64> {
    let k_steps = view.grid.n_steps();
    let mut out = Vec::with_capacity(k_steps);
    for l in 0..k_steps {
        let xs = view.x_at(l);
        let mut sub = 0.0;
        for i in 0..=model.d_y {
            sub += crate::expr::eval(model.sensor(i), xs) * view.dy(l, i);
        }
        out.push(sub);
    }
    out
}

/// Left-point fine-grid evaluation of the reference log-likelihood
/// `xi_t = sum_{i=0}^{d_y} int_0^t h_i(X_s) dY^i_s`.
pub fn xi_reference(model: &PosysModel, view: &PathView<'_>) -> f64 {
    reference_subtotals(model, view).iter().sum()
}

/// The same sum grouped by the intervals of a partition (fine indices from
/// [`crate::simulate::FineGrid::align`]): `blocks[j]` sums the subtotals of
/// interval j, and `blocks.iter().sum()` is the reference total with the
/// same grouping the scheme evaluator uses.
pub fn reference_blocks(subtotals: &[f64], alignment: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(alignment.len() - 1);
    for j in 0..alignment.len() - 1 {
        let mut acc = 0.0;
        for &s in &subtotals[alignment[j]..alignment[j + 1]] {
            acc += s;
        }
        out.push(acc);
    }
    out
}

// ---------------------------------------------------------------------------
// scheme evaluator

/// Per-interval contribution of one scheme order.
#[derive(Debug, Clone, Serialize)]
pub struct IntervalContribution {
    /// The scheme value of the interval, `xi_bar(j)`.
    pub xi_bar: f64,
    /// Taming components, present only for m >= 3.
    pub parts: Option<TamedParts>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TamedParts {
    /// Second-order part of the interval sum (lengths 0 and 1).
    pub second_order: f64,
    /// Raw correction `mu(j)` (lengths 2..m-1).
    pub raw_mu: f64,
    /// `Gamma_{m-1/2, delta_j}(mu(j))`; bounded by `delta_j`.
    pub tamed_mu: f64,
}

/// One path's discretized log-likelihood with its per-interval breakdown.
#[derive(Debug, Clone, Serialize)]
pub struct LikelihoodResult {
    pub order: usize,
    pub per_interval: Vec<IntervalContribution>,
    /// `sum_j xi_bar(j)`
    pub xi_bar: f64,
    /// `exp(xi_bar)`
    pub weight: f64,
}

/// Multi-index slots of a coefficient table prepared for the per-step
/// recursion: parent (tail) slot, driving component, and length of each.
struct SlotSet {
    parent: Vec<usize>,
    driver: Vec<usize>,
    length: Vec<usize>,
    /// non-empty slots ordered by decreasing length, so an update reads only
    /// values not yet touched in the same step
    update_order: Vec<usize>,
    max_len: usize,
}

impl SlotSet {
    fn new(table: &CoefficientTable) -> Self {
        let indices = table.indices();
        let n = indices.len();
        let mut parent = vec![0usize; n];
        let mut driver = vec![0usize; n];
        let mut length = vec![0usize; n];
        let mut max_len = 0;
        for (s, alpha) in indices.iter().enumerate() {
            length[s] = alpha.len();
            max_len = max_len.max(alpha.len());
            if !alpha.is_empty() {
                parent[s] = table.slot(&alpha.drop_last()).expect("tail in table");
                driver[s] = alpha.last().unwrap() as usize;
            }
        }
        let mut update_order: Vec<usize> = (0..n).filter(|&s| length[s] > 0).collect();
        update_order.sort_by_key(|&s| std::cmp::Reverse(length[s]));
        SlotSet {
            parent,
            driver,
            length,
            update_order,
            max_len,
        }
    }
}

/// Evaluates the order-m functionals of a path over a partition, sharing one
/// sweep of the fine grid across every order up to the table's.
pub struct SchemeEvaluator<'t> {
    table: &'t CoefficientTable,
    slots: SlotSet,
    d_y: usize,
    sensor_programs: Vec<crate::expr::Program>,
}

impl<'t> SchemeEvaluator<'t> {
    pub fn new(model: &PosysModel, table: &'t CoefficientTable) -> Self {
        let sensor_programs = (0..=model.d_y)
            .map(|i| crate::expr::Program::compile(model.sensor(i)))
            .collect();
        SchemeEvaluator {
            slots: SlotSet::new(table),
            table,
            d_y: model.d_y,
            sensor_programs,
        }
    }

    pub fn max_order(&self) -> usize {
        self.table.order
    }

    /// Coefficient values `L^a h_i` at a state, flattened `[i * n_slots + s]`.
    pub fn coefficients_at(&self, x: &[f64], stack: &mut Vec<f64>) -> Vec<f64> {
        let n_slots = self.table.n_slots();
        let mut out = Vec::with_capacity((self.d_y + 1) * n_slots);
        for i in 0..=self.d_y {
            for s in 0..n_slots {
                out.push(self.table.entry_program(i, s).eval(x, stack));
            }
        }
        out
    }

    /// Compiled-path version of [`reference_subtotals`]; bit-identical.
    pub fn reference_subtotals_into(
        &self,
        view: &PathView<'_>,
        obs: &[f64],
        stack: &mut Vec<f64>,
        out: &mut Vec<f64>,
    ) {
        let k_steps = view.grid.n_steps();
        let stride = self.d_y + 1;
        out.clear();
        out.reserve(k_steps);
        for l in 0..k_steps {
            let xs = view.x_at(l);
            let orow = &obs[l * stride..(l + 1) * stride];
            let mut sub = 0.0;
            for (i, prog) in self.sensor_programs.iter().enumerate() {
                sub += prog.eval(xs, stack) * orow[i];
            }
            out.push(sub);
        }
    }

    /// Sweep one coarse interval, accumulating the interval sum partitioned
    /// by multi-index length: `sums[k] = sum over |a| = k of the (i, a)
    /// terms`. `coefs` are the coefficient values at the interval's left
    /// partition point, `obs` the observation-increment table of the path;
    /// `iters` is scratch for the iterated integrals.
    fn length_sums(
        &self,
        view: &PathView<'_>,
        obs: &[f64],
        fine_lo: usize,
        fine_hi: usize,
        coefs: &[f64],
        iters: &mut [f64],
        sums: &mut [f64],
    ) {
        let n_slots = self.table.n_slots();
        iters[0] = 1.0;
        for v in iters[1..n_slots].iter_mut() {
            *v = 0.0;
        }
        for s in sums.iter_mut() {
            *s = 0.0;
        }
        let stride = self.d_y + 1;
        let d_v = view.d_v;
        let mut sub = [0.0f64; crate::multiindex::MAX_ORDER];
        for l in fine_lo..fine_hi {
            for b in sub[..=self.slots.max_len].iter_mut() {
                *b = 0.0;
            }
            let orow = &obs[l * stride..(l + 1) * stride];
            for (i, &dyi) in orow.iter().enumerate() {
                let row = &coefs[i * n_slots..(i + 1) * n_slots];
                for s in 0..n_slots {
                    sub[self.slots.length[s]] += row[s] * iters[s] * dyi;
                }
            }
            for (k, b) in sub[..=self.slots.max_len].iter().enumerate() {
                sums[k] += *b;
            }
            // advance the iterated integrals across the step, longest first
            let dv_row = &view.dv[l * d_v..(l + 1) * d_v];
            for &s in &self.slots.update_order {
                let driver = self.slots.driver[s];
                let increment = if driver == 0 {
                    orow[0]
                } else {
                    dv_row[driver - 1]
                };
                iters[s] += iters[self.slots.parent[s]] * increment;
            }
        }
    }

    /// Evaluate `xi_bar` totals for several orders in one sweep of the path.
    /// `alignment` maps partition points to fine indices. Orders must not
    /// exceed the table's. Also returns the per-interval, per-length sums
    /// consumer code can assemble breakdowns from.
    pub fn xi_bar_totals(
        &self,
        view: &PathView<'_>,
        obs: &[f64],
        partition: &Partition,
        alignment: &[usize],
        coefs_per_interval: &[&[f64]],
        orders: &[usize],
    ) -> Result<Vec<f64>, LikelihoodError> {
        for &m in orders {
            if m < 1 || m > self.table.order {
                return Err(LikelihoodError::OrderTooHigh {
                    m,
                    table_order: self.table.order,
                });
            }
        }
        let n = partition.n();
        debug_assert_eq!(alignment.len(), n + 1);
        debug_assert_eq!(coefs_per_interval.len(), n);
        let mut iters = vec![0.0; self.table.n_slots()];
        let mut sums = vec![0.0; self.slots.max_len + 1];
        let mut totals = vec![0.0; orders.len()];
        for j in 0..n {
            self.length_sums(
                view,
                obs,
                alignment[j],
                alignment[j + 1],
                coefs_per_interval[j],
                &mut iters,
                &mut sums,
            );
            let delta_j = partition.step(j);
            for (slot, &m) in orders.iter().enumerate() {
                totals[slot] += assemble_interval(m, delta_j, &sums).xi_bar;
            }
        }
        for &t in &totals {
            if t.abs() > XI_OVERFLOW_LIMIT {
                return Err(LikelihoodError::XiOverflow { value: t });
            }
        }
        Ok(totals)
    }

    /// Full single-order evaluation with the per-interval breakdown.
    pub fn xi_bar_result(
        &self,
        view: &PathView<'_>,
        obs: &[f64],
        partition: &Partition,
        alignment: &[usize],
        coefs_per_interval: &[&[f64]],
        m: usize,
    ) -> Result<LikelihoodResult, LikelihoodError> {
        if m < 1 || m > self.table.order {
            return Err(LikelihoodError::OrderTooHigh {
                m,
                table_order: self.table.order,
            });
        }
        let n = partition.n();
        let mut iters = vec![0.0; self.table.n_slots()];
        let mut sums = vec![0.0; self.slots.max_len + 1];
        let mut per_interval = Vec::with_capacity(n);
        let mut total = 0.0;
        for j in 0..n {
            self.length_sums(
                view,
                obs,
                alignment[j],
                alignment[j + 1],
                coefs_per_interval[j],
                &mut iters,
                &mut sums,
            );
            let contribution = assemble_interval(m, partition.step(j), &sums);
            total += contribution.xi_bar;
            per_interval.push(contribution);
        }
        if total.abs() > XI_OVERFLOW_LIMIT {
            return Err(LikelihoodError::XiOverflow { value: total });
        }
        Ok(LikelihoodResult {
            order: m,
            per_interval,
            xi_bar: total,
            weight: total.exp(),
        })
    }
}

/// Assemble one interval's contribution from its per-length sums: orders one
/// and two take the plain truncation, higher orders tame the length >= 2
/// part with `Gamma_{m - 1/2, delta_j}`.
fn assemble_interval(m: usize, delta_j: f64, sums: &[f64]) -> IntervalContribution {
    if m == 1 {
        return IntervalContribution {
            xi_bar: sums[0],
            parts: None,
        };
    }
    let second_order = sums[0] + sums[1];
    if m == 2 {
        return IntervalContribution {
            xi_bar: second_order,
            parts: None,
        };
    }
    let mut raw_mu = 0.0;
    for &s in sums.iter().take(m).skip(2) {
        raw_mu += s;
    }
    let tamed_mu = gamma(m as f64 - 0.5, delta_j, raw_mu);
    IntervalContribution {
        xi_bar: second_order + tamed_mu,
        parts: Some(TamedParts {
            second_order,
            raw_mu,
            tamed_mu,
        }),
    }
}

// ---------------------------------------------------------------------------
// public per-interval operations (compositional route, used as the scheme's
// cross-check and for diagnostics; the fused evaluator above is the fast path)

/// One `(sensor, multi-index)` term of an interval sum.
#[derive(Debug, Clone, Serialize)]
pub struct TermBreakdown {
    pub sensor: usize,
    #[serde(serialize_with = "serialize_alpha")]
    pub alpha: MultiIndex,
    /// `L^a h_i` evaluated at the interval's left partition point.
    pub coefficient: f64,
    /// `int I_a(1) dY^i` over the interval.
    pub integral: f64,
}

fn serialize_alpha<S: serde::Serializer>(a: &MultiIndex, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&a.to_string())
}

impl TermBreakdown {
    pub fn term(&self) -> f64 {
        self.coefficient * self.integral
    }
}

/// `xi^{tau,m}(j)` over coarse interval `j` of the bundle's own partition,
/// assembled term by term from the iterated-integral and dY-integration
/// primitives, with the `(i, a)` terms recorded.
pub fn xi_tau_m_interval(
    model: &PosysModel,
    table: &CoefficientTable,
    view: &PathView<'_>,
    j: usize,
    m: usize,
) -> Result<(f64, Vec<TermBreakdown>), LikelihoodError> {
    if m < 1 || m > table.order {
        return Err(LikelihoodError::OrderTooHigh {
            m,
            table_order: table.order,
        });
    }
    let x_left = view.x_at(view.grid.coarse_index(j));
    let mut terms = Vec::new();
    let mut total = 0.0;
    for i in 0..=model.d_y {
        for alpha in table.indices().iter().filter(|a| a.len() <= m - 1) {
            let coefficient = crate::expr::eval(table.lookup(i, alpha).unwrap(), x_left);
            let path = iterated_integral(alpha, view, j);
            let integral = integrate_against_dy(&path, i, view, j)?;
            total += coefficient * integral;
            terms.push(TermBreakdown {
                sensor: i,
                alpha: alpha.clone(),
                coefficient,
                integral,
            });
        }
    }
    Ok((total, terms))
}

/// The raw correction `mu^{tau,m}(j)`: the interval sum restricted to
/// multi-indices of length 2 through m-1. Defined for m >= 3.
pub fn mu_interval(
    model: &PosysModel,
    table: &CoefficientTable,
    view: &PathView<'_>,
    j: usize,
    m: usize,
) -> Result<f64, LikelihoodError> {
    if m < 3 {
        return Err(LikelihoodError::DomainError { m });
    }
    if m > table.order {
        return Err(LikelihoodError::OrderTooHigh {
            m,
            table_order: table.order,
        });
    }
    let x_left = view.x_at(view.grid.coarse_index(j));
    let mut total = 0.0;
    for i in 0..=model.d_y {
        for alpha in table
            .indices()
            .iter()
            .filter(|a| a.len() >= 2 && a.len() <= m - 1)
        {
            let coefficient = crate::expr::eval(table.lookup(i, alpha).unwrap(), x_left);
            let path = iterated_integral(alpha, view, j);
            total += coefficient * integrate_against_dy(&path, i, view, j)?;
        }
    }
    Ok(total)
}

/// The discretized log-likelihood of one path over a partition: per-interval
/// contributions, their sum, and the weight `exp(xi_bar)`.
///
/// The partition must be admissible for the order (mesh below the model's
/// `delta0` when m >= 2) unless `allow_inadmissible` is set for divergence
/// studies. The bundle's fine grid must contain every partition point.
pub fn xi_bar(
    model: &PosysModel,
    table: &CoefficientTable,
    view: &PathView<'_>,
    partition: &Partition,
    m: usize,
    allow_inadmissible: bool,
) -> Result<LikelihoodResult, LikelihoodError> {
    let adm = admissible(partition, model, m);
    if !adm.admissible && !allow_inadmissible {
        return Err(LikelihoodError::InadmissibleMesh {
            delta: adm.delta,
            delta0: adm.delta0,
            m,
        });
    }
    let alignment = view.grid.align(partition)?;
    let evaluator = SchemeEvaluator::new(model, table);
    let obs = observation_increments(view);
    let mut stack = Vec::new();
    let coefs: Vec<Vec<f64>> = (0..partition.n())
        .map(|j| evaluator.coefficients_at(view.x_at(alignment[j]), &mut stack))
        .collect();
    let coef_refs: Vec<&[f64]> = coefs.iter().map(|c| c.as_slice()).collect();
    evaluator.xi_bar_result(view, &obs, partition, &alignment, &coef_refs, m)
}
