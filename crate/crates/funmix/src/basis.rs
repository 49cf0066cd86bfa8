//! Cubic B-spline bases on a closed interval.
//!
//! Functional coefficients are expanded in clamped cubic B-splines: the
//! boundary knots carry multiplicity four and the interior knots are equally
//! spaced, so a basis of dimension `num_basis` has `num_basis - 4` interior
//! knots. Clamping makes the basis interpolatory at the interval endpoints
//! and keeps the partition-of-unity property exact throughout the domain.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEGREE: usize = 3;

/// A clamped cubic B-spline basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    num_basis: usize,
    /// Full knot vector of length `num_basis + 4`: the domain endpoints with
    /// multiplicity four around equally spaced interior knots.
    knots: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl BSplineBasis {
    /// Builds a cubic basis of dimension `num_basis` on `[lo, hi]`.
    ///
    /// Requires `num_basis >= 4` (a cubic needs at least the four Bernstein
    /// polynomials) and a non-degenerate, finite domain.
    pub fn cubic(num_basis: usize, lo: f64, hi: f64) -> Result<Self> {
        if num_basis < 4 {
            return Err(Error::InvalidDimension(format!(
                "cubic basis needs at least 4 functions, got {num_basis}"
            )));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Parameter(format!(
                "basis domain must be a finite interval, got [{lo}, {hi}]"
            )));
        }
        let interior = num_basis - 4;
        let mut knots = Vec::with_capacity(num_basis + DEGREE + 1);
        knots.extend(std::iter::repeat(lo).take(DEGREE + 1));
        let step = (hi - lo) / (interior + 1) as f64;
        for i in 1..=interior {
            knots.push(lo + step * i as f64);
        }
        knots.extend(std::iter::repeat(hi).take(DEGREE + 1));
        Ok(Self {
            num_basis,
            knots,
            lo,
            hi,
        })
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Interior knots (excludes the clamped boundary knots).
    pub fn interior_knots(&self) -> &[f64] {
        &self.knots[DEGREE + 1..self.num_basis]
    }

    /// Index of the knot span containing `s`, treating the right endpoint as
    /// belonging to the last non-degenerate span.
    fn span(&self, s: f64) -> usize {
        let last = self.num_basis - 1;
        if s >= self.knots[last + 1] {
            return last;
        }
        // Largest i in [DEGREE, last] with knots[i] <= s.
        let shifted = self.knots[DEGREE..=last].partition_point(|t| *t <= s);
        DEGREE + shifted.saturating_sub(1)
    }

    /// Evaluates all basis functions at `s`.
    ///
    /// Returns a vector of length `num_basis`; entries sum to one and are
    /// non-negative. Points outside `[lo, hi]` are a [`Error::Domain`] error.
    pub fn evaluate(&self, s: f64) -> Result<Array1<f64>> {
        if !(s >= self.lo && s <= self.hi) {
            return Err(Error::Domain {
                point: s,
                lo: self.lo,
                hi: self.hi,
            });
        }
        let span = self.span(s);
        // Triangular recurrence computing the DEGREE + 1 basis functions that
        // are non-zero on this span.
        let mut values = [0.0_f64; DEGREE + 1];
        let mut left = [0.0_f64; DEGREE + 1];
        let mut right = [0.0_f64; DEGREE + 1];
        values[0] = 1.0;
        for j in 1..=DEGREE {
            left[j] = s - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - s;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        let mut out = Array1::zeros(self.num_basis);
        for (offset, v) in values.iter().enumerate() {
            out[span - DEGREE + offset] = *v;
        }
        Ok(out)
    }

    /// Evaluates the basis on a grid, one row per grid point.
    pub fn evaluate_matrix(&self, grid: &[f64]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((grid.len(), self.num_basis));
        for (t, &s) in grid.iter().enumerate() {
            let row = self.evaluate(s)?;
            out.row_mut(t).assign(&row);
        }
        Ok(out)
    }
}
