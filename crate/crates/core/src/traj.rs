//! Time discretisation and piecewise-constant trajectories.
//!
//! A [`Trajectory`] holds one value per grid interval; the value applies on
//! `[t_k, t_{k+1})`. Integrals use the rectangle rule, which is exact for
//! that convention.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

/// Uniform grid on `[t0, tf]` with `n_intervals` cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    tf: f64,
    n_intervals: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, tf: f64, n_intervals: usize) -> Result<Self> {
        if !(t0.is_finite() && tf.is_finite()) || tf <= t0 {
            return Err(Error::InvalidGrid(alloc::format!(
                "need finite t0 < tf, got [{t0}, {tf}]"
            )));
        }
        if n_intervals == 0 {
            return Err(Error::InvalidGrid("n_intervals must be >= 1".into()));
        }
        Ok(Self {
            t0,
            tf,
            n_intervals,
        })
    }

    /// Default analysis window: `[100, 175]` split into 300 cells of 0.25.
    pub fn benchmark() -> Self {
        Self {
            t0: 100.0,
            tf: 175.0,
            n_intervals: 300,
        }
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    pub fn n_intervals(&self) -> usize {
        self.n_intervals
    }

    pub fn dt(&self) -> f64 {
        (self.tf - self.t0) / self.n_intervals as f64
    }

    /// Left endpoint of cell `k` (also valid for the closing node `k = n`).
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_intervals {
            self.tf
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    /// Cell containing `t`, right-continuous; times at or past `tf` map to
    /// the last cell.
    pub fn cell_of(&self, t: f64) -> Result<usize> {
        if t < self.t0 {
            return Err(Error::OutOfRange { t, t0: self.t0 });
        }
        let k = math::floor((t - self.t0) / self.dt());
        if k >= self.n_intervals as f64 {
            Ok(self.n_intervals - 1)
        } else {
            Ok(k as usize)
        }
    }

    /// Same window split `factor` times finer.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.t0, self.tf, self.n_intervals * factor)
    }

    /// Grid continuing past `tf` by `extra` cells of the same width.
    pub fn extended(&self, extra: usize) -> Self {
        Self {
            t0: self.t0,
            tf: self.tf + extra as f64 * self.dt(),
            n_intervals: self.n_intervals + extra,
        }
    }

    pub(crate) fn same_as(&self, other: &TimeGrid) -> bool {
        self.n_intervals == other.n_intervals
            && self.t0.to_bits() == other.t0.to_bits()
            && self.tf.to_bits() == other.tf.to_bits()
    }
}

/// Piecewise-constant function of time on a [`TimeGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl Trajectory {
    pub fn zeros(grid: TimeGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: TimeGrid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.n_intervals()],
        }
    }

    pub fn from_values(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_intervals() {
            return Err(Error::GridMismatch);
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(alloc::format!(
                "trajectory value {v} is not finite"
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(f64) -> f64) -> Self {
        let values = (0..grid.n_intervals()).map(|k| f(grid.time(k))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rectangle-rule integral over the whole grid.
    pub fn integrate(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.dt()
    }

    /// Value of the cell containing `t`; clamps to the last cell past `tf`.
    pub fn sample(&self, t: f64) -> Result<f64> {
        Ok(self.values[self.grid.cell_of(t)?])
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, other: &Trajectory, b: f64) -> Result<Trajectory> {
        if !self.grid.same_as(&other.grid) {
            return Err(Error::GridMismatch);
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Trajectory {
            grid: self.grid,
            values,
        })
    }

    /// Same step function expressed on a grid `factor` times finer.
    pub fn refine(&self, factor: usize) -> Result<Trajectory> {
        let grid = self.grid.refined(factor)?;
        let values = self
            .values
            .iter()
            .flat_map(|&v| core::iter::repeat(v).take(factor))
            .collect();
        Ok(Trajectory { grid, values })
    }

    /// Inner product `∫ self·other dt`.
    pub fn dot(&self, other: &Trajectory) -> Result<f64> {
        if !self.grid.same_as(&other.grid) {
            return Err(Error::GridMismatch);
        }
        let s: f64 = self.values.iter().zip(&other.values).map(|(x, y)| x * y).sum();
        Ok(s * self.grid.dt())
    }
}

/// `sqrt(Σ_components ∫ (a − b)² dt)` over a vector of trajectories.
pub fn l2_distance(a: &[Trajectory], b: &[Trajectory]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::GridMismatch);
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        if !x.grid.same_as(&y.grid) {
            return Err(Error::GridMismatch);
        }
        let s: f64 = x
            .values
            .iter()
            .zip(&y.values)
            .map(|(u, v)| (u - v) * (u - v))
            .sum();
        acc += s * x.grid.dt();
    }
    Ok(math::sqrt(acc))
}

/// `sqrt(Σ_components ∫ a² dt)`.
pub fn l2_norm(a: &[Trajectory]) -> f64 {
    let acc: f64 = a
        .iter()
        .map(|x| x.values.iter().map(|v| v * v).sum::<f64>() * x.grid.dt())
        .sum();
    math::sqrt(acc)
}
