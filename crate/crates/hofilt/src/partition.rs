//! Time partitions of `[0, t]`, their mesh statistics, the uniformity
//! condition `delta <= C * delta_min`, and the left/right locator maps.

use crate::model::PosysModel;
use serde::ser::SerializeSeq;
use serde::{Serialize, Serializer};
use std::fmt;
use thiserror::Error;

/// Default uniformity constant; only finiteness matters for the theory, the
/// value is configuration.
pub const DEFAULT_UNIFORMITY_C: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("partition must start at 0, end at t > 0 and be strictly increasing")]
    Malformed,
    #[error("partition violates the uniformity condition: delta {delta} > C {c} * delta_min {delta_min}")]
    NonUniform { delta: f64, delta_min: f64, c: f64 },
    #[error("s = {s} lies outside [0, {t}]")]
    OutOfRange { s: f64, t: f64 },
}

/// Strictly increasing times `t_0 = 0 < .. < t_n = t`. Immutable.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    times: Vec<f64>,
    delta: f64,
    delta_min: f64,
    uniformity_c: f64,
}

impl Serialize for Partition {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.times.len()))?;
        for t in &self.times {
            seq.serialize_element(t)?;
        }
        seq.end()
    }
}

impl Partition {
    /// Validate an explicit time sequence against the uniformity constant.
    pub fn new(times: Vec<f64>, uniformity_c: f64) -> Result<Self, PartitionError> {
        if times.len() < 2 || times[0] != 0.0 || !(uniformity_c >= 1.0) {
            return Err(PartitionError::Malformed);
        }
        let t = *times.last().unwrap();
        if !(t > 0.0) || !times.windows(2).all(|w| w[0] < w[1]) {
            return Err(PartitionError::Malformed);
        }
        let mut delta = 0.0f64;
        let mut delta_min = f64::INFINITY;
        for w in times.windows(2) {
            let d = w[1] - w[0];
            delta = delta.max(d);
            delta_min = delta_min.min(d);
        }
        if delta > uniformity_c * delta_min {
            return Err(PartitionError::NonUniform {
                delta,
                delta_min,
                c: uniformity_c,
            });
        }
        Ok(Partition {
            times,
            delta,
            delta_min,
            uniformity_c,
        })
    }

    /// The canonical uniform partition `t_i = i * t / n`.
    pub fn uniform(n: usize, t: f64) -> Self {
        Partition::uniform_with(n, t, DEFAULT_UNIFORMITY_C)
    }

    /// Uniform partition carrying an explicit uniformity constant.
    pub fn uniform_with(n: usize, t: f64, uniformity_c: f64) -> Self {
        assert!(n >= 1 && t > 0.0);
        let times: Vec<f64> = (0..=n).map(|i| t * (i as f64 / n as f64)).collect();
        Partition::new(times, uniformity_c).expect("uniform partition is always valid")
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of intervals.
    pub fn n(&self) -> usize {
        self.times.len() - 1
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Max interval width.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn delta_min(&self) -> f64 {
        self.delta_min
    }

    pub fn uniformity_c(&self) -> f64 {
        self.uniformity_c
    }

    /// Width of interval `j` (0-based).
    pub fn step(&self, j: usize) -> f64 {
        self.times[j + 1] - self.times[j]
    }

    /// Locate `s`: the index `j` with `s` in `[t_j, t_{j+1})`, plus the left
    /// endpoint `tau(s)` and right endpoint `eta(s)`. The right boundary
    /// `s = t` belongs to the last interval.
    pub fn locate(&self, s: f64) -> Result<(usize, f64, f64), PartitionError> {
        let t = self.t_end();
        if !(0.0..=t).contains(&s) {
            return Err(PartitionError::OutOfRange { s, t });
        }
        let j = if s >= t {
            self.n() - 1
        } else {
            // first index with times[idx] > s, minus one
            self.times.partition_point(|&x| x <= s) - 1
        };
        Ok((j, self.times[j], self.times[j + 1]))
    }
}

/// Result of the mesh admissibility check for a scheme order.
#[derive(Debug, Clone, Serialize)]
pub struct Admissibility {
    pub admissible: bool,
    pub order: usize,
    pub delta: f64,
    pub delta0: f64,
    /// Interval-count headroom `n <= C * t / delta` implied by uniformity.
    pub n: usize,
    pub n_bound: f64,
    pub reason: Option<String>,
}

impl fmt::Display for Admissibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.admissible {
            write!(
                f,
                "admissible: delta {} < delta0 {} (n {} <= {:.1})",
                self.delta, self.delta0, self.n, self.n_bound
            )
        } else {
            write!(f, "{}", self.reason.as_deref().unwrap_or("inadmissible"))
        }
    }
}

/// A partition is admissible for order `m` when `m == 1` (any partition) or
/// its mesh is strictly below the model's `delta0`. Never fails; returns the
/// diagnostic either way.
pub fn admissible(p: &Partition, model: &PosysModel, m: usize) -> Admissibility {
    let delta = p.delta();
    let delta0 = model.delta0();
    let ok = m <= 1 || delta < delta0;
    Admissibility {
        admissible: ok,
        order: m,
        delta,
        delta0,
        n: p.n(),
        n_bound: p.uniformity_c() * p.t_end() / delta,
        reason: if ok {
            None
        } else {
            Some(format!(
                "mesh delta {delta} is not below delta0 {delta0} required for order {m}"
            ))
        },
    }
}
