//! Rectangular lattices over state space.
//!
//! A [`Grid`] is a tensor product of uniformly spaced axes. Node `0` sits at
//! the corner with all coordinates minimal and the flat index is row-major in
//! axis order (the last axis varies fastest). Discrete measures, grid kernels
//! and h-field slices all share one `Grid` through an `Arc` and cross-check
//! lattice identity before mixing data.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One uniformly spaced axis with `n` nodes from `min` to `max` inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, n: usize) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || max <= min || n < 2 {
            return Err(Error::InvalidSpec(format!(
                "axis needs finite min < max and at least 2 nodes, got [{min}, {max}] with {n}"
            )));
        }
        Ok(Self { min, max, n })
    }

    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.n - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.min + self.spacing() * i as f64
    }

    /// Index of the node closest to `x`, clamped to the axis range.
    pub fn nearest(&self, x: f64) -> usize {
        let raw = (x - self.min) / self.spacing();
        raw.round().clamp(0.0, (self.n - 1) as f64) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    axes: Vec<Axis>,
    /// Row-major strides; `strides[k]` is the flat-index step of axis `k`.
    strides: Vec<usize>,
    len: usize,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidSpec("grid needs at least one axis".into()));
        }
        let mut len = 1usize;
        for ax in &axes {
            len = len.checked_mul(ax.n).ok_or_else(|| {
                Error::InvalidSpec("grid node count overflows usize".into())
            })?;
        }
        let mut strides = vec![1usize; axes.len()];
        for k in (0..axes.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * axes[k + 1].n;
        }
        Ok(Self { axes, strides, len })
    }

    /// Shorthand for a hypercube `[lo, hi]^dim` with `n` nodes per axis.
    pub fn cube(lo: f64, hi: f64, n: usize, dim: usize) -> Result<Self> {
        let ax = Axis::new(lo, hi, n)?;
        Grid::new(vec![ax; dim])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    /// Volume of one cell (product of axis spacings); the quadrature weight
    /// of every node under the rectangle rule.
    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).product()
    }

    pub fn max_spacing(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).fold(0.0, f64::max)
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        debug_assert!(flat < self.len);
        let mut rest = flat;
        self.strides
            .iter()
            .map(|&s| {
                let i = rest / s;
                rest %= s;
                i
            })
            .collect()
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.dim());
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Row-major strides: `flat = sum_ax multi[ax] * strides()[ax]`.
    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// State vector of node `flat`.
    pub fn node(&self, flat: usize) -> DVector<f64> {
        let mut rest = flat;
        DVector::from_iterator(
            self.dim(),
            self.axes.iter().zip(&self.strides).map(|(ax, &s)| {
                let i = rest / s;
                rest %= s;
                ax.node(i)
            }),
        )
    }

    /// Writes the coordinates of node `flat` into `out` without allocating.
    pub fn node_into(&self, flat: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        let mut rest = flat;
        for ((ax, &s), o) in self.axes.iter().zip(&self.strides).zip(out.iter_mut()) {
            let i = rest / s;
            rest %= s;
            *o = ax.node(i);
        }
    }

    /// Flat index of the node nearest to `x` (coordinates clamped into the box).
    pub fn nearest_node(&self, x: &DVector<f64>) -> usize {
        debug_assert_eq!(x.len(), self.dim());
        self.axes
            .iter()
            .zip(self.strides.iter())
            .zip(x.iter())
            .map(|((ax, &s), &xi)| ax.nearest(xi) * s)
            .sum()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.iter()
            .zip(&self.axes)
            .all(|(&xi, ax)| xi >= ax.min && xi <= ax.max)
    }

    /// Composite Simpson quadrature weights per node (requires every axis to
    /// carry an odd node count).
    pub fn simpson_weights(&self) -> Result<Vec<f64>> {
        let per_axis: Vec<Vec<f64>> = self
            .axes
            .iter()
            .map(|ax| crate::linalg::simpson_weights(ax.n, ax.spacing()))
            .collect::<Result<_>>()?;
        let mut w = vec![1.0; self.len];
        for (flat, wi) in w.iter_mut().enumerate() {
            for (k, i) in self.multi_index(flat).into_iter().enumerate() {
                *wi *= per_axis[k][i];
            }
        }
        Ok(w)
    }

    /// Checks lattice identity with a descriptive error.
    pub fn ensure_same(&self, other: &Grid, context: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{context}: lattices differ ({}d/{} nodes vs {}d/{} nodes)",
                self.dim(),
                self.len(),
                other.dim(),
                other.len()
            )))
        }
    }
}
