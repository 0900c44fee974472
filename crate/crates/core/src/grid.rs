//! Row-major grid containers shared by every stage of the pipeline.

use crate::error::{Error, Result};

/// A non-negative field of object mass per pixel, stored row-major.
///
/// The integral of the grid over any pixel set is the (fractional) number of
/// objects in that set. Values are always finite and `>= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidGrid(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::InvalidGrid(format!(
                "{} values for a {height}x{width} grid",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidGrid(format!(
                "value {} at index {i} is negative or not finite",
                values[i]
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    /// Builds a grid from `f(row, col)`; negative or non-finite outputs are rejected.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(height, width, values)
    }

    /// Wraps values known to satisfy the invariants (internal producers only).
    pub(crate) fn from_raw(height: usize, width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), height * width);
        debug_assert!(values.iter().all(|v| v.is_finite() && *v >= 0.0));
        Self {
            height,
            width,
            values,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Sum of the grid over linear pixel indices.
    pub fn sum_over(&self, pixels: &[usize]) -> f64 {
        pixels.iter().map(|&p| self.values[p]).sum()
    }
}

/// Region label per pixel, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::InvalidGrid(format!(
                "{} labels for a {height}x{width} label map",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// One past the largest label, i.e. the region count for compact labelings.
    pub fn region_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }

    /// Linear pixel indices of every label, indexed by label.
    pub fn pixels_by_label(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.region_count()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    /// Per-label sums of `grid`, indexed by label.
    pub fn sums(&self, grid: &DensityGrid) -> Vec<f64> {
        assert_eq!(
            (grid.height(), grid.width()),
            (self.height, self.width),
            "label map and grid shapes differ"
        );
        let mut out = vec![0.0; self.region_count()];
        for (&l, &v) in self.labels.iter().zip(grid.values()) {
            out[l as usize] += v;
        }
        out
    }
}
