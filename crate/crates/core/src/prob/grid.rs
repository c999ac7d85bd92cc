//! Densities tabulated on small uniform grids (d ≤ 3), used as quadrature
//! oracles for distances between distributions.

use serde::{Deserialize, Serialize};

use crate::error::{AssimError, Result};

pub const MAX_GRID_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn new(lower: f64, upper: f64, count: usize) -> Result<Self> {
        if count < 2 || !(upper > lower) {
            return Err(AssimError::InvalidArgument(format!(
                "grid axis [{lower}, {upper}] with {count} points"
            )));
        }
        Ok(Self {
            lower,
            upper,
            count,
        })
    }

    pub fn step(&self) -> f64 {
        (self.upper - self.lower) / (self.count - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.lower + self.step() * i as f64
    }

    fn weight(&self, i: usize) -> f64 {
        let h = self.step();
        if i == 0 || i + 1 == self.count {
            0.5 * h
        } else {
            h
        }
    }
}

/// Nonnegative density values over the product of the axes, last axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    axes: Vec<GridAxis>,
    values: Vec<f64>,
}

impl DensityGrid {
    pub fn from_fn(axes: Vec<GridAxis>, mut f: impl FnMut(&[f64]) -> f64) -> Result<Self> {
        if axes.is_empty() || axes.len() > MAX_GRID_DIM {
            return Err(AssimError::InvalidArgument(format!(
                "grid dimension {} outside 1..={MAX_GRID_DIM}",
                axes.len()
            )));
        }
        let total: usize = axes.iter().map(|a| a.count).product();
        let mut values = Vec::with_capacity(total);
        let mut point = vec![0.0; axes.len()];
        for flat in 0..total {
            let mut rem = flat;
            for (d, axis) in axes.iter().enumerate().rev() {
                point[d] = axis.point(rem % axis.count);
                rem /= axis.count;
            }
            let v = f(&point);
            if !(v >= 0.0) || !v.is_finite() {
                return Err(AssimError::InvalidArgument(format!(
                    "density value {v} at {point:?}"
                )));
            }
            values.push(v);
        }
        Ok(Self { axes, values })
    }

    pub fn axes(&self) -> &[GridAxis] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        let total = self.values.len();
        (0..total).map(move |flat| {
            let mut rem = flat;
            let mut w = 1.0;
            for axis in self.axes.iter().rev() {
                w *= axis.weight(rem % axis.count);
                rem /= axis.count;
            }
            w
        })
    }

    /// Trapezoidal integral of `g(values)`.
    fn integrate_map(&self, g: impl Fn(usize, f64) -> f64) -> f64 {
        self.weights()
            .zip(self.values.iter())
            .enumerate()
            .map(|(i, (w, v))| w * g(i, *v))
            .sum()
    }

    pub fn integral(&self) -> f64 {
        self.integrate_map(|_, v| v)
    }

    pub fn normalized(mut self) -> Result<Self> {
        let z = self.integral();
        if !(z > 0.0) {
            return Err(AssimError::NumericalDegeneracy(
                "density grid integrates to zero".into(),
            ));
        }
        for v in self.values.iter_mut() {
            *v /= z;
        }
        Ok(self)
    }

    fn check_same_axes(&self, other: &DensityGrid) -> Result<()> {
        if self.axes != other.axes {
            return Err(AssimError::InvalidArgument("mismatched density grids".into()));
        }
        Ok(())
    }
}

/// `½∫|f_a − f_b|` by the trapezoidal rule.
pub fn tv_distance_grid(a: &DensityGrid, b: &DensityGrid) -> Result<f64> {
    a.check_same_axes(b)?;
    Ok(0.5 * a.integrate_map(|i, va| (va - b.values[i]).abs()))
}

/// `√(½∫(√f_a − √f_b)²)` by the trapezoidal rule.
pub fn hellinger_distance_grid(a: &DensityGrid, b: &DensityGrid) -> Result<f64> {
    a.check_same_axes(b)?;
    let s = a.integrate_map(|i, va| {
        let d = va.sqrt() - b.values[i].sqrt();
        d * d
    });
    Ok((0.5 * s).max(0.0).sqrt())
}
