//! Ground-truth synthesis, smoothing, resampling and dot placement on density grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DensityGrid, LabelMap};

/// A synthetic dot-annotated scene. Dot coordinates are in pixel units where
/// pixel `(row, col)` covers `[col, col + 1) x [row, row + 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DotScene {
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub dots: Vec<[f64; 2]>,
}

impl DotScene {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidScene(format!(
                "dimensions must be positive, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidScene(format!("sigma must be > 0, got {}", self.sigma)));
        }
        for (i, &[x, y]) in self.dots.iter().enumerate() {
            let inside = x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64;
            if !inside {
                return Err(Error::InvalidScene(format!(
                    "dot {i} at ({x}, {y}) lies outside the {}x{} grid",
                    self.height, self.width
                )));
            }
        }
        Ok(())
    }
}

/// Renders each dot as a Gaussian truncated at `ceil(4 sigma)` and renormalized
/// over the in-bounds pixels, so every dot contributes exactly unit mass.
pub fn render_density(scene: &DotScene) -> Result<DensityGrid> {
    scene.validate()?;
    let (h, w) = (scene.height, scene.width);
    let mut values = vec![0.0; h * w];
    let radius = (4.0 * scene.sigma).ceil() as isize;
    let r2 = (radius * radius) as f64;
    let inv_two_var = 1.0 / (2.0 * scene.sigma * scene.sigma);
    let mut taps: Vec<(usize, f64)> = Vec::new();

    for &[x, y] in &scene.dots {
        let cx = (x.floor() as isize).min(w as isize - 1);
        let cy = (y.floor() as isize).min(h as isize - 1);
        taps.clear();
        let mut norm = 0.0;
        for r in (cy - radius).max(0)..=(cy + radius).min(h as isize - 1) {
            for c in (cx - radius).max(0)..=(cx + radius).min(w as isize - 1) {
                let (dr, dc) = ((r - cy) as f64, (c - cx) as f64);
                if dr * dr + dc * dc > r2 {
                    continue;
                }
                let dx = c as f64 + 0.5 - x;
                let dy = r as f64 + 0.5 - y;
                let wgt = (-(dx * dx + dy * dy) * inv_two_var).exp();
                norm += wgt;
                taps.push((r as usize * w + c as usize, wgt));
            }
        }
        for &(i, wgt) in &taps {
            values[i] += wgt / norm;
        }
    }
    Ok(DensityGrid::from_raw(h, w, values))
}

/// Separable normalized Gaussian kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothKernel {
    sigma: f64,
    radius: usize,
    taps: Vec<f64>,
}

impl SmoothKernel {
    /// Kernel with the default radius `ceil(4 sigma)`.
    pub fn new(sigma: f64) -> Result<Self> {
        Self::with_radius(sigma, (4.0 * sigma).ceil() as usize)
    }

    pub fn with_radius(sigma: f64, radius: usize) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("kernel sigma must be > 0, got {sigma}")));
        }
        let min_radius = (2.0 * sigma).ceil() as usize;
        if radius < min_radius {
            return Err(Error::InvalidConfig(format!(
                "kernel radius {radius} is below ceil(2 sigma) = {min_radius}"
            )));
        }
        let mut taps: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let d = i as f64 - radius as f64;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let norm: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= norm);
        Ok(Self {
            sigma,
            radius,
            taps,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// One-dimensional taps for offsets `-radius..=radius`.
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Weight of the 2-D kernel at offset `(dy, dx)`.
    pub fn weight(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius as isize;
        if dy.abs() > r || dx.abs() > r {
            return 0.0;
        }
        self.taps[(dy + r) as usize] * self.taps[(dx + r) as usize]
    }
}

/// Half-sample symmetric reflection of an arbitrary index into `0..n`.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Gaussian smoothing with reflective borders.
///
/// Implemented as a scatter: each pixel distributes its mass over the kernel
/// footprint and out-of-bounds taps fold back inside, so the total mass of
/// the grid is preserved.
pub fn smooth(grid: &DensityGrid, kernel: &SmoothKernel) -> DensityGrid {
    let (h, w) = (grid.height(), grid.width());
    let r = kernel.radius as isize;
    let taps = kernel.taps();

    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        let src = &grid.values()[y * w..(y + 1) * w];
        let dst = &mut rows[y * w..(y + 1) * w];
        for (x, &v) in src.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (k, &t) in taps.iter().enumerate() {
                dst[reflect(x as isize + k as isize - r, w)] += v * t;
            }
        }
    }

    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (k, &t) in taps.iter().enumerate() {
            let ty = reflect(y as isize + k as isize - r, h);
            let (src, dst) = (&rows[y * w..(y + 1) * w], &mut out[ty * w..(ty + 1) * w]);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s * t;
            }
        }
    }
    DensityGrid::from_raw(h, w, out)
}

/// Sum-pools `factor x factor` blocks after zero-padding to a multiple of `factor`.
pub fn downsample_sum(grid: &DensityGrid, factor: usize) -> Result<DensityGrid> {
    if !matches!(factor, 2 | 4 | 8) {
        return Err(Error::InvalidConfig(format!(
            "downsample factor must be 2, 4 or 8, got {factor}"
        )));
    }
    let (h, w) = (grid.height(), grid.width());
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut out = vec![0.0; oh * ow];
    for y in 0..h {
        let orow = &mut out[(y / factor) * ow..(y / factor + 1) * ow];
        for (x, &v) in grid.values()[y * w..(y + 1) * w].iter().enumerate() {
            orow[x / factor] += v;
        }
    }
    Ok(DensityGrid::from_raw(oh, ow, out))
}

/// Nearest-neighbour replication of a label map by `factor`, cropped to the target size.
pub fn upsample_labels(
    labels: &LabelMap,
    factor: usize,
    target_height: usize,
    target_width: usize,
) -> Result<LabelMap> {
    if factor == 0 {
        return Err(Error::InvalidConfig("upsample factor must be >= 1".into()));
    }
    let fits = |src: usize, target: usize| target <= src * factor && target + factor > src * factor;
    if !fits(labels.height(), target_height) || !fits(labels.width(), target_width) {
        return Err(Error::InvalidConfig(format!(
            "target {target_height}x{target_width} is not within one factor-{factor} block of {}x{}",
            labels.height(),
            labels.width()
        )));
    }
    let mut out = Vec::with_capacity(target_height * target_width);
    for y in 0..target_height {
        for x in 0..target_width {
            out.push(labels.get(y / factor, x / factor));
        }
    }
    LabelMap::new(target_height, target_width, out)
}

/// Places `round(region sum)` display dots inside a region by repeatedly taking
/// the densest unsuppressed pixel and suppressing everything within `radius`.
///
/// Dots are pixel centers `[x, y]`. Ties go to the earlier pixel in row-major order.
pub fn place_dots(grid: &DensityGrid, region: &[usize], radius: f64) -> Vec<[f64; 2]> {
    assert!(!region.is_empty(), "place_dots requires a non-empty region");
    let want = grid.sum_over(region).round().max(0.0) as usize;
    if want == 0 {
        return Vec::new();
    }
    let w = grid.width();
    let mut order: Vec<usize> = region.to_vec();
    order.sort_unstable_by(|&a, &b| grid.values()[b].total_cmp(&grid.values()[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; order.len()];
    let r2 = radius * radius;
    let mut dots = Vec::with_capacity(want);

    let mut cursor = 0;
    while dots.len() < want {
        while cursor < order.len() && suppressed[cursor] {
            cursor += 1;
        }
        if cursor == order.len() {
            break;
        }
        let p = order[cursor];
        let (py, px) = ((p / w) as f64, (p % w) as f64);
        dots.push([px + 0.5, py + 0.5]);
        for (s, &q) in suppressed.iter_mut().zip(&order) {
            let (dy, dx) = ((q / w) as f64 - py, (q % w) as f64 - px);
            if dy * dy + dx * dx <= r2 {
                *s = true;
            }
        }
    }
    dots
}
