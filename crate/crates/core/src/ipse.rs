//! Iterative peak selection and expansion (IPSE).
//!
//! Partitions a density map into regions that are non-overlapping, cover the
//! whole map, have moderate size, and hold a near-integer count no larger than
//! a small count limit, so a person can verify each region at a glance.
//!
//! The pipeline is:
//!
//! 1. smooth the map and repeatedly take the unclaimed pixel with the highest
//!    smoothed density as a peak while at least one object of mass remains
//!    unassigned;
//! 2. grow each peak greedily into a nested sequence of regions and keep the
//!    prefix with the lowest [`objective_h`];
//! 3. pad foreground regions that are too small with adjacent unclaimed pixels;
//! 4. split the leftover (background) pixels into bounded flood-filled regions;
//! 5. merge regions that are far too small into their neighbours.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{downsample_sum, smooth, upsample_labels, SmoothKernel};
use crate::error::{Error, Result};
use crate::grid::{DensityGrid, LabelMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    /// Preferred maximum number of objects per region (C).
    pub count_limit: f64,
    /// Preferred minimum region area in working-resolution pixels (T_l).
    pub area_lower: usize,
    /// Hard area cap during expansion and background splitting (T_u).
    pub area_upper: usize,
    /// Expansion stops once the zero-density fraction exceeds this.
    pub zero_fraction_max: f64,
    /// Regions smaller than this are merged into a neighbour.
    pub merge_threshold: usize,
    pub smooth_sigma: f64,
    pub downsample_factor: usize,
    /// Seed for background splitting.
    pub seed: u64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            count_limit: 4.0,
            area_lower: 250,
            area_upper: 1250,
            zero_fraction_max: 0.5,
            merge_threshold: 125,
            smooth_sigma: 1.5,
            downsample_factor: 4,
            seed: 0,
        }
    }
}

impl SegmentationConfig {
    /// Area bounds scaled down for small working grids (16x16 to 64x64 after
    /// downsampling), keeping the same `T_u = 5 T_l` and `merge = T_l / 2` ratios.
    pub fn desk() -> Self {
        Self {
            area_lower: 16,
            area_upper: 80,
            merge_threshold: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.count_limit >= 1.0 && self.count_limit.is_finite()) {
            return bad(format!("count_limit must be >= 1, got {}", self.count_limit));
        }
        if !(0 < self.area_lower && self.area_lower < self.area_upper) {
            return bad(format!(
                "need 0 < area_lower < area_upper, got {} and {}",
                self.area_lower, self.area_upper
            ));
        }
        if !(self.zero_fraction_max > 0.0 && self.zero_fraction_max <= 1.0) {
            return bad(format!(
                "zero_fraction_max must lie in (0, 1], got {}",
                self.zero_fraction_max
            ));
        }
        if !matches!(self.downsample_factor, 1 | 2 | 4 | 8) {
            return bad(format!(
                "downsample_factor must be 1, 2, 4 or 8, got {}",
                self.downsample_factor
            ));
        }
        SmoothKernel::new(self.smooth_sigma).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Foreground,
    Background,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub id: u32,
    /// Linear pixel indices, sorted ascending.
    pub pixels: Vec<usize>,
    /// Sum of density over the region (R_s).
    pub sum: f64,
    pub kind: RegionKind,
}

impl Region {
    fn from_pixels(id: u32, mut pixels: Vec<usize>, grid: &DensityGrid, kind: RegionKind) -> Self {
        pixels.sort_unstable();
        let sum = grid.sum_over(&pixels);
        Self {
            id,
            pixels,
            sum,
            kind,
        }
    }

    /// Region area in pixels (R_a).
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// A complete partition of a grid: every pixel carries exactly one label and
/// `regions[i].id == i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub labels: LabelMap,
    pub regions: Vec<Region>,
}

impl Segmentation {
    pub fn foreground_count(&self) -> usize {
        self.regions
            .iter()
            .filter(|r| r.kind == RegionKind::Foreground)
            .count()
    }
}

/// Region objective: near-integer sum, penalty below the preferred area, and a
/// stepped penalty above the count limit.
pub fn objective_h(sum: f64, area: usize, config: &SegmentationConfig) -> f64 {
    assert!(area >= 1, "objective_h requires a non-empty region");
    let nearest = (sum - 0.5).ceil();
    let integrality = (sum - nearest).abs() / nearest.max(1.0);
    let t_l = config.area_lower as f64;
    let small = (t_l - area as f64).max(0.0) / t_l;
    let over = (sum - config.count_limit).max(0.0).ceil();
    integrality + small + over
}

/// The full greedy expansion sequence of one peak and the prefix it selected.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionTrace {
    /// Pixels in the order they were added; `order[0]` is the peak.
    pub order: Vec<usize>,
    /// Length of the selected prefix (`1..=order.len()`).
    pub best_len: usize,
    pub best_objective: f64,
}

#[derive(Default)]
struct Expander {
    stamp: Vec<u32>,
    generation: u32,
    heap: BinaryHeap<Reverse<(bool, u64, usize)>>,
}

impl Expander {
    fn new(n: usize) -> Self {
        Self {
            stamp: vec![0; n],
            generation: 0,
            heap: BinaryHeap::new(),
        }
    }

    fn expand(
        &mut self,
        grid: &DensityGrid,
        claimed: &[bool],
        peak: usize,
        config: &SegmentationConfig,
    ) -> ExpansionTrace {
        assert!(!claimed[peak], "peak {peak} is already claimed");
        let (h, w) = (grid.height(), grid.width());
        let values = grid.values();
        self.generation += 1;
        let gen = self.generation;
        self.heap.clear();

        let (py, px) = ((peak / w) as i64, (peak % w) as i64);
        let mut order = vec![peak];
        self.stamp[peak] = gen;
        let mut sum = values[peak];
        let (mut fg, mut bg) = if values[peak] > 0.0 { (1usize, 0usize) } else { (0, 1) };
        let mut best_objective = objective_h(sum, 1, config);
        let mut best_len = 1;

        let push_neighbours = |p: usize, stamp: &mut [u32], heap: &mut BinaryHeap<_>| {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if claimed[q] || stamp[q] == gen {
                    return;
                }
                stamp[q] = gen;
                let (dy, dx) = ((q / w) as i64 - py, (q % w) as i64 - px);
                heap.push(Reverse((values[q] <= 0.0, (dy * dy + dx * dx) as u64, q)));
            };
            if y > 0 {
                visit(p - w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y + 1 < h {
                visit(p + w);
            }
        };
        push_neighbours(peak, &mut self.stamp, &mut self.heap);

        loop {
            let area = order.len();
            if area >= config.area_upper || sum >= config.count_limit {
                break;
            }
            if bg as f64 / area as f64 > config.zero_fraction_max {
                break;
            }
            let Some(&Reverse((is_zero, _, q))) = self.heap.peek() else {
                break;
            };
            if is_zero && fg <= bg {
                break;
            }
            self.heap.pop();
            order.push(q);
            sum += values[q];
            if is_zero {
                bg += 1;
            } else {
                fg += 1;
            }
            let objective = objective_h(sum, order.len(), config);
            if objective < best_objective {
                best_objective = objective;
                best_len = order.len();
            }
            push_neighbours(q, &mut self.stamp, &mut self.heap);
        }

        ExpansionTrace {
            order,
            best_len,
            best_objective,
        }
    }
}

/// Greedy expansion of `peak` over unclaimed pixels; returns the full sequence
/// and the selected prefix.
pub fn expand_peak_trace(
    grid: &DensityGrid,
    claimed: &[bool],
    peak: usize,
    config: &SegmentationConfig,
) -> ExpansionTrace {
    assert_eq!(claimed.len(), grid.len(), "claimed mask has the wrong size");
    Expander::new(grid.len()).expand(grid, claimed, peak, config)
}

/// Grows a foreground region from `peak` over unclaimed pixels.
///
/// Panics if `peak` is already claimed.
pub fn expand_peak(grid: &DensityGrid, claimed: &[bool], peak: usize, config: &SegmentationConfig) -> Region {
    let trace = expand_peak_trace(grid, claimed, peak, config);
    let mut pixels = trace.order;
    pixels.truncate(trace.best_len);
    Region::from_pixels(0, pixels, grid, RegionKind::Foreground)
}

/// Partitions every unclaimed pixel into 4-connected regions of at most
/// `area_upper` pixels by breadth-first floods from seeds in a shuffled order.
pub fn split_background(grid: &DensityGrid, claimed: &[bool], config: &SegmentationConfig) -> Vec<Region> {
    assert_eq!(claimed.len(), grid.len(), "claimed mask has the wrong size");
    let (h, w) = (grid.height(), grid.width());
    let mut seeds: Vec<usize> = (0..grid.len()).filter(|&p| !claimed[p]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    seeds.shuffle(&mut rng);

    let mut taken = claimed.to_vec();
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for seed in seeds {
        if taken[seed] {
            continue;
        }
        taken[seed] = true;
        queue.clear();
        queue.push_back(seed);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            if pixels.len() + queue.len() >= config.area_upper {
                continue;
            }
            let (y, x) = (p / w, p % w);
            let neighbours = [
                (y > 0).then(|| p - w),
                (x > 0).then(|| p - 1),
                (x + 1 < w).then(|| p + 1),
                (y + 1 < h).then(|| p + w),
            ];
            for q in neighbours.into_iter().flatten() {
                if !taken[q] && pixels.len() + queue.len() < config.area_upper {
                    taken[q] = true;
                    queue.push_back(q);
                }
            }
        }
        regions.push(Region::from_pixels(0, pixels, grid, RegionKind::Background));
    }
    regions
}

/// Merges every region smaller than `merge_threshold` into the neighbour it
/// shares the longest boundary with (ties to the smaller id), repeating until
/// no mergeable small region remains. Labels are compacted afterwards.
///
/// Among equally valid targets the merge avoids ones that would push a
/// foreground region past the count cap (`C` plus the largest pixel value) or a
/// region past twice the area cap; if every neighbour would, the lightest
/// neighbour wins.
pub fn merge_small(grid: &DensityGrid, segmentation: Segmentation, config: &SegmentationConfig) -> Segmentation {
    let Segmentation { labels, regions } = segmentation;
    let (h, w) = (labels.height(), labels.width());
    let mut label_of = labels.labels().to_vec();
    let mut slots: Vec<Option<Region>> = regions.into_iter().map(Some).collect();
    let cap = config.count_limit + grid.max_value();
    let area_cap = 2 * config.area_upper;

    loop {
        let mut merged_any = false;
        for id in 0..slots.len() {
            let Some(small) = slots[id].as_ref() else {
                continue;
            };
            if small.area() >= config.merge_threshold {
                continue;
            }
            let mut boundary: Vec<(u32, usize)> = Vec::new();
            for &p in &small.pixels {
                let (y, x) = (p / w, p % w);
                let neighbours = [
                    (y > 0).then(|| p - w),
                    (x > 0).then(|| p - 1),
                    (x + 1 < w).then(|| p + 1),
                    (y + 1 < h).then(|| p + w),
                ];
                for q in neighbours.into_iter().flatten() {
                    let l = label_of[q];
                    if l as usize == id {
                        continue;
                    }
                    match boundary.iter_mut().find(|(t, _)| *t == l) {
                        Some(entry) => entry.1 += 1,
                        None => boundary.push((l, 1)),
                    }
                }
            }
            if boundary.is_empty() {
                continue;
            }
            boundary.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

            let admissible = |target: &Region| {
                let kind = merged_kind(small.kind, target.kind);
                let sum = small.sum + target.sum;
                let fits_cap = kind == RegionKind::Background || sum <= cap;
                fits_cap && small.area() + target.area() <= area_cap
            };
            let target_id = boundary
                .iter()
                .map(|&(t, _)| t)
                .find(|&t| admissible(slots[t as usize].as_ref().expect("live neighbour")))
                .unwrap_or_else(|| {
                    boundary
                        .iter()
                        .map(|&(t, _)| t)
                        .min_by(|&a, &b| {
                            let sa = slots[a as usize].as_ref().expect("live neighbour").sum;
                            let sb = slots[b as usize].as_ref().expect("live neighbour").sum;
                            sa.total_cmp(&sb)
                        })
                        .expect("non-empty boundary")
                }) as usize;

            let small = slots[id].take().expect("small region present");
            let target = slots[target_id].take().expect("target region present");
            for &p in &small.pixels {
                label_of[p] = target_id as u32;
            }
            let mut pixels = target.pixels;
            pixels.extend_from_slice(&small.pixels);
            let kind = merged_kind(small.kind, target.kind);
            slots[target_id] = Some(Region::from_pixels(target_id as u32, pixels, grid, kind));
            merged_any = true;
        }
        if !merged_any {
            break;
        }
    }

    // compact ids, preserving order
    let mut remap = vec![u32::MAX; slots.len()];
    let mut regions = Vec::new();
    for (old, slot) in slots.into_iter().enumerate() {
        if let Some(mut r) = slot {
            remap[old] = regions.len() as u32;
            r.id = regions.len() as u32;
            regions.push(r);
        }
    }
    for l in label_of.iter_mut() {
        *l = remap[*l as usize];
    }
    Segmentation {
        labels: LabelMap::new(h, w, label_of).expect("label map shape"),
        regions,
    }
}

fn merged_kind(a: RegionKind, b: RegionKind) -> RegionKind {
    if a == RegionKind::Foreground || b == RegionKind::Foreground {
        RegionKind::Foreground
    } else {
        RegionKind::Background
    }
}

/// Segments a working-resolution density grid. The grid is expected to have
/// been downsampled already; see [`segment_full_resolution`].
pub fn segment(grid: &DensityGrid, config: &SegmentationConfig) -> Result<Segmentation> {
    config.validate()?;
    let n = grid.len();
    let smoothed = smooth(grid, &SmoothKernel::new(config.smooth_sigma)?);
    let mut peaks: Vec<usize> = (0..n).collect();
    peaks.sort_unstable_by(|&a, &b| {
        smoothed.values()[b]
            .total_cmp(&smoothed.values()[a])
            .then(a.cmp(&b))
    });

    let mut claimed = vec![false; n];
    let mut label_of = vec![u32::MAX; n];
    let mut regions: Vec<Region> = Vec::new();
    let mut expander = Expander::new(n);
    let mut remaining = grid.total();
    let mut cursor = 0;

    while remaining >= 1.0 {
        while cursor < n && claimed[peaks[cursor]] {
            cursor += 1;
        }
        if cursor == n {
            break;
        }
        let trace = expander.expand(grid, &claimed, peaks[cursor], config);
        let id = regions.len() as u32;
        let mut pixels = trace.order;
        pixels.truncate(trace.best_len);
        for &p in &pixels {
            claimed[p] = true;
            label_of[p] = id;
        }
        let region = Region::from_pixels(id, pixels, grid, RegionKind::Foreground);
        remaining -= region.sum;
        regions.push(region);
    }

    pad_foreground(grid, &mut claimed, &mut label_of, &mut regions, config);

    for mut region in split_background(grid, &claimed, config) {
        region.id = regions.len() as u32;
        for &p in &region.pixels {
            label_of[p] = region.id;
        }
        regions.push(region);
    }

    let labels = LabelMap::new(grid.height(), grid.width(), label_of)?;
    Ok(merge_small(grid, Segmentation { labels, regions }, config))
}

/// Grows foreground regions smaller than `merge_threshold` into adjacent
/// unclaimed pixels, one pixel per region per round, so isolated objects get a
/// margin of their own instead of being merged wholesale into a large
/// background region that may already hold other objects. Growth never takes
/// a region past the count cap.
fn pad_foreground(
    grid: &DensityGrid,
    claimed: &mut [bool],
    label_of: &mut [u32],
    regions: &mut [Region],
    config: &SegmentationConfig,
) {
    let (h, w) = (grid.height(), grid.width());
    let values = grid.values();
    let cap = config.count_limit + grid.max_value();
    let mut frontiers: Vec<VecDeque<usize>> = regions
        .iter()
        .map(|r| {
            if r.area() >= config.merge_threshold {
                return VecDeque::new();
            }
            let mut seen: Vec<usize> = r
                .pixels
                .iter()
                .flat_map(|&p| neighbours4(p, h, w))
                .filter(|&q| !claimed[q])
                .collect();
            seen.sort_unstable();
            seen.dedup();
            seen.into()
        })
        .collect();

    let mut grew = true;
    let mut changed = vec![false; regions.len()];
    while grew {
        grew = false;
        for (id, region) in regions.iter_mut().enumerate() {
            if region.area() >= config.merge_threshold {
                continue;
            }
            let frontier = &mut frontiers[id];
            while let Some(q) = frontier.pop_front() {
                if claimed[q] || region.sum + values[q] > cap {
                    continue;
                }
                claimed[q] = true;
                label_of[q] = id as u32;
                region.pixels.push(q);
                region.sum += values[q];
                frontier.extend(neighbours4(q, h, w).filter(|&n| !claimed[n]));
                changed[id] = true;
                grew = true;
                break;
            }
        }
    }
    for (region, changed) in regions.iter_mut().zip(changed) {
        if changed {
            *region = Region::from_pixels(region.id, std::mem::take(&mut region.pixels), grid, region.kind);
        }
    }
}

fn neighbours4(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (p / w, p % w);
    [
        (y > 0).then(|| p - w),
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
        (y + 1 < h).then(|| p + w),
    ]
    .into_iter()
    .flatten()
}

/// A segmentation computed at working resolution together with its labels
/// replicated back onto the full-resolution grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedMap {
    pub working: Segmentation,
    pub labels: LabelMap,
}

/// Downsamples by `config.downsample_factor` (sum pooling), segments, and
/// upsamples the labels to the input size. A factor of 1 segments in place.
pub fn segment_full_resolution(grid: &DensityGrid, config: &SegmentationConfig) -> Result<SegmentedMap> {
    config.validate()?;
    let factor = config.downsample_factor;
    if factor == 1 {
        let working = segment(grid, config)?;
        let labels = working.labels.clone();
        return Ok(SegmentedMap { working, labels });
    }
    let small = downsample_sum(grid, factor)?;
    let working = segment(&small, config)?;
    let labels = upsample_labels(&working.labels, factor, grid.height(), grid.width())?;
    Ok(SegmentedMap { working, labels })
}
