//! Simulated annotator: picks a region, looks up its true count, optionally
//! perturbs it, and answers with the matching range bin.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{CountRange, FeedbackRecord};
use crate::error::{Error, Result};
use crate::grid::{DensityGrid, LabelMap};
use crate::ipse::Region;

/// Bins `(-inf, 0], (0, r], ..., (C - r, C], (C, inf)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RangeFamily {
    pub count_limit: f64,
    pub interval: f64,
}

impl Default for RangeFamily {
    fn default() -> Self {
        Self {
            count_limit: 4.0,
            interval: 1.0,
        }
    }
}

impl RangeFamily {
    pub fn new(count_limit: f64, interval: f64) -> Result<Self> {
        let f = Self {
            count_limit,
            interval,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let steps = self.count_limit / self.interval;
        if !(self.interval > 0.0 && self.count_limit > 0.0 && steps.is_finite())
            || (steps - steps.round()).abs() > 1e-9
            || steps > 10_000.0
        {
            return Err(Error::InvalidConfig(format!(
                "count limit {} must be a positive multiple of the interval {}",
                self.count_limit, self.interval
            )));
        }
        Ok(())
    }

    fn finite_bins(&self) -> usize {
        (self.count_limit / self.interval).round() as usize
    }

    pub fn bins(&self) -> Vec<CountRange> {
        let k = self.finite_bins();
        let mut out = Vec::with_capacity(k + 2);
        out.push(CountRange::new(f64::NEG_INFINITY, 0.0).expect("valid bin"));
        for i in 0..k {
            let lo = i as f64 * self.interval;
            let hi = if i + 1 == k { self.count_limit } else { (i + 1) as f64 * self.interval };
            out.push(CountRange::new(lo, hi).expect("valid bin"));
        }
        out.push(CountRange::new(self.count_limit, f64::INFINITY).expect("valid bin"));
        out
    }

    pub fn labels(&self) -> Vec<String> {
        self.bins().iter().map(CountRange::label).collect()
    }

    /// Index of the bin containing `x`; values `<= 0` fall in the first bin.
    pub fn bin_index(&self, x: f64) -> usize {
        if x <= 0.0 {
            return 0;
        }
        if x > self.count_limit {
            return self.finite_bins() + 1;
        }
        let i = (x / self.interval).ceil() as usize;
        // guard against rounding at shared endpoints
        let bins = self.bins();
        let mut i = i.clamp(1, self.finite_bins());
        while !bins[i].contains(x) {
            i = if x <= bins[i].lower() { i - 1 } else { i + 1 };
        }
        i
    }

    pub fn range(&self, index: usize) -> Result<CountRange> {
        let bins = self.bins();
        let len = bins.len();
        bins.get(index).copied().ok_or(Error::RangeIndex { index, len })
    }
}

pub fn bin_count(x: f64, family: &RangeFamily) -> CountRange {
    family.bins()[family.bin_index(x)]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    #[default]
    Random,
    BackgroundPrior,
    ErrorBased,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel {
    #[default]
    None,
    Moderate,
    Large,
}

impl NoiseLevel {
    /// Largest integer offset for a given count limit.
    pub fn max_offset(self, count_limit: f64) -> i64 {
        match self {
            NoiseLevel::None => 0,
            NoiseLevel::Moderate => (0.3 * count_limit).round() as i64,
            NoiseLevel::Large => (0.5 * count_limit).round() as i64,
        }
    }
}

/// How the true count of a region is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GtCountMode {
    /// Integral of the ground-truth density over the region.
    #[default]
    Integral,
    /// Number of annotated dots whose centres fall inside the region.
    DotCenters,
}

/// Adds a uniform integer offset in `[-k, k]` and clamps at zero.
pub fn noisy_truth(x: f64, family: &RangeFamily, level: NoiseLevel, rng: &mut impl Rng) -> f64 {
    let k = level.max_offset(family.count_limit);
    if k == 0 {
        return x;
    }
    (x + rng.random_range(-k..=k) as f64).max(0.0)
}

/// Per-region sums of `grid` under a full-resolution label map.
fn sums_by_label(labels: &LabelMap, grid: &DensityGrid, count: usize) -> Vec<f64> {
    let mut out = labels.sums(grid);
    out.resize(count, 0.0);
    out
}

/// Chooses one region not in `already_selected`.
///
/// `gt` and `pred` are full-resolution grids matching `labels`.
pub fn select_region(
    regions: &[Region],
    labels: &LabelMap,
    gt: &DensityGrid,
    pred: &DensityGrid,
    strategy: SelectionStrategy,
    already_selected: &BTreeSet<u32>,
    rng: &mut impl Rng,
) -> Result<u32> {
    let open: Vec<u32> = regions
        .iter()
        .map(|r| r.id)
        .filter(|id| !already_selected.contains(id))
        .collect();
    if open.is_empty() {
        return Err(Error::Exhausted);
    }
    let pick = |ids: &[u32], rng: &mut dyn rand::RngCore| ids[rng.random_range(0..ids.len())];
    let gt_sums = sums_by_label(labels, gt, regions.len());
    match strategy {
        SelectionStrategy::Random => Ok(pick(&open, rng)),
        SelectionStrategy::BackgroundPrior => {
            let empty: Vec<u32> = open.iter().copied().filter(|&id| gt_sums[id as usize] < 0.5).collect();
            Ok(pick(if empty.is_empty() { &open } else { &empty }, rng))
        }
        SelectionStrategy::ErrorBased => {
            let pred_sums = sums_by_label(labels, pred, regions.len());
            let err = |id: u32| (pred_sums[id as usize] - gt_sums[id as usize]).abs();
            // strict comparison keeps the smallest id on ties
            let mut best = open[0];
            for &id in &open[1..] {
                if err(id) > err(best) {
                    best = id;
                }
            }
            Ok(best)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct UserConfig {
    pub strategy: SelectionStrategy,
    pub noise: NoiseLevel,
    pub gt_mode: GtCountMode,
}

/// A seeded annotator with memory of the regions it already answered for.
#[derive(Clone, Debug)]
pub struct SimulatedUser {
    pub config: UserConfig,
    pub family: RangeFamily,
    rng: ChaCha8Rng,
    selected: BTreeSet<u32>,
    seen_labels: Option<LabelMap>,
}

impl SimulatedUser {
    pub fn new(config: UserConfig, family: RangeFamily, seed: u64) -> Self {
        Self {
            config,
            family,
            rng: ChaCha8Rng::seed_from_u64(seed),
            selected: BTreeSet::new(),
            seen_labels: None,
        }
    }

    /// Forget earlier selections; called whenever the map is re-segmented
    /// because region ids no longer refer to the same pixels.
    pub fn reset_selection(&mut self) {
        self.selected.clear();
    }

    /// Resets the selection if `labels` differs from the segmentation the
    /// user last answered on. An unchanged map keeps its region ids, so
    /// regions already answered stay excluded.
    pub fn observe_segmentation(&mut self, labels: &LabelMap) {
        if self.seen_labels.as_ref() != Some(labels) {
            self.selected.clear();
            self.seen_labels = Some(labels.clone());
        }
    }

    pub fn selected(&self) -> &BTreeSet<u32> {
        &self.selected
    }

    fn true_count(&self, pixels: &[usize], gt: &DensityGrid, dots: &[[f64; 2]]) -> f64 {
        match self.config.gt_mode {
            GtCountMode::Integral => gt.sum_over(pixels),
            GtCountMode::DotCenters => {
                let w = gt.width();
                dots.iter()
                    .filter(|d| {
                        let (c, r) = (d[0].floor() as usize, d[1].floor() as usize);
                        c < w && r < gt.height() && pixels.binary_search(&(r * w + c)).is_ok()
                    })
                    .count() as f64
            }
        }
    }

    /// Selects a region, bins its (noisy) true count and returns the record.
    /// `pixels` of the returned record are the full-resolution region.
    #[allow(clippy::too_many_arguments)]
    pub fn respond(
        &mut self,
        regions: &[Region],
        labels: &LabelMap,
        gt: &DensityGrid,
        dots: &[[f64; 2]],
        pred: &DensityGrid,
        iteration: usize,
    ) -> Result<FeedbackRecord> {
        if self.seen_labels.is_none() {
            self.seen_labels = Some(labels.clone());
        }
        let id = select_region(
            regions,
            labels,
            gt,
            pred,
            self.config.strategy,
            &self.selected,
            &mut self.rng,
        )?;
        self.selected.insert(id);
        let pixels: Vec<usize> = labels
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == id)
            .map(|(i, _)| i)
            .collect();
        let truth = self.true_count(&pixels, gt, dots);
        let noisy = noisy_truth(truth, &self.family, self.config.noise, &mut self.rng);
        Ok(FeedbackRecord {
            region_id: id,
            pixels,
            range: bin_count(noisy, &self.family),
            iteration,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ipse::RegionKind;

    #[test]
    fn bin_examples() {
        let f = RangeFamily::default();
        assert_eq!(bin_count(0.0, &f), CountRange::new(f64::NEG_INFINITY, 0.0).unwrap());
        assert_eq!(bin_count(2.4, &f), CountRange::new(2.0, 3.0).unwrap());
        assert_eq!(bin_count(7.3, &f), CountRange::new(4.0, f64::INFINITY).unwrap());
        assert_eq!(bin_count(3.0, &f), CountRange::new(2.0, 3.0).unwrap());
        assert_eq!(f.labels(), vec!["0", "0–1", "1–2", "2–3", "3–4", ">4"]);
        let crowd = RangeFamily::new(50.0, 10.0).unwrap();
        assert_eq!(crowd.bins().len(), 7);
        assert_eq!(bin_count(50.0, &crowd), CountRange::new(40.0, 50.0).unwrap());
    }

    #[test]
    fn noise_offsets() {
        let f = RangeFamily::default();
        assert_eq!(NoiseLevel::Moderate.max_offset(4.0), 1);
        assert_eq!(NoiseLevel::Moderate.max_offset(50.0), 15);
        assert_eq!(NoiseLevel::Large.max_offset(50.0), 25);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(noisy_truth(2.3, &f, NoiseLevel::None, &mut rng), 2.3);
        let mut seen = BTreeSet::new();
        for _ in 0..200 {
            let y = noisy_truth(2.0, &f, NoiseLevel::Moderate, &mut rng);
            seen.insert(y as i64);
        }
        assert_eq!(seen, BTreeSet::from([1, 2, 3]));
        assert_eq!(noisy_truth(0.0, &f, NoiseLevel::Large, &mut rng).min(0.0), 0.0);
    }

    fn strip(values: Vec<f64>) -> (Vec<Region>, LabelMap, DensityGrid) {
        let n = values.len();
        let grid = DensityGrid::new(1, n, values).unwrap();
        let labels = LabelMap::new(1, n, (0..n as u32).collect()).unwrap();
        let regions = (0..n)
            .map(|i| Region {
                id: i as u32,
                pixels: vec![i],
                sum: grid.values()[i],
                kind: RegionKind::Foreground,
            })
            .collect();
        (regions, labels, grid)
    }

    #[test]
    fn error_based_picks_largest_error() {
        let (regions, labels, gt) = strip(vec![1.0, 1.0, 1.0, 1.0]);
        let pred = DensityGrid::new(1, 4, vec![1.0, 1.2, 4.1, 1.9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = BTreeSet::new();
        let id = select_region(&regions, &labels, &gt, &pred, SelectionStrategy::ErrorBased, &none, &mut rng);
        assert_eq!(id.unwrap(), 2);
        let tie = DensityGrid::new(1, 4, vec![2.0, 0.0, 2.0, 1.0]).unwrap();
        let id = select_region(&regions, &labels, &gt, &tie, SelectionStrategy::ErrorBased, &none, &mut rng);
        assert_eq!(id.unwrap(), 0);
    }

    #[test]
    fn background_prior_prefers_empty_regions() {
        let (regions, labels, gt) = strip(vec![0.0, 2.0, 0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let id = select_region(
                &regions,
                &labels,
                &gt,
                &gt,
                SelectionStrategy::BackgroundPrior,
                &BTreeSet::new(),
                &mut rng,
            )
            .unwrap();
            assert!(id == 0 || id == 2);
        }
        let taken = BTreeSet::from([0, 2]);
        let id = select_region(&regions, &labels, &gt, &gt, SelectionStrategy::BackgroundPrior, &taken, &mut rng);
        assert_eq!(id.unwrap(), 1);
    }

    #[test]
    fn exhaustion_and_no_repeats() {
        let (regions, labels, gt) = strip(vec![0.5, 1.5, 2.5, 0.2, 3.0]);
        let mut user = SimulatedUser::new(UserConfig::default(), RangeFamily::default(), 11);
        let mut seen = BTreeSet::new();
        for it in 0..5 {
            let r = user.respond(&regions, &labels, &gt, &[], &gt, it).unwrap();
            assert!(seen.insert(r.region_id));
            assert!(r.range.contains(gt.values()[r.region_id as usize]));
        }
        assert!(matches!(
            user.respond(&regions, &labels, &gt, &[], &gt, 5),
            Err(Error::Exhausted)
        ));
        user.observe_segmentation(&labels);
        assert!(user.respond(&regions, &labels, &gt, &[], &gt, 5).is_err());
        let relabeled = LabelMap::new(1, 5, vec![4, 3, 2, 1, 0]).unwrap();
        user.observe_segmentation(&relabeled);
        assert!(user.respond(&regions, &relabeled, &gt, &[], &gt, 5).is_ok());
        user.reset_selection();
        assert!(user.selected().is_empty());
    }

    #[test]
    fn dot_center_mode_counts_dots() {
        let (regions, labels, gt) = strip(vec![0.4, 0.6]);
        let cfg = UserConfig {
            gt_mode: GtCountMode::DotCenters,
            strategy: SelectionStrategy::ErrorBased,
            ..UserConfig::default()
        };
        let mut user = SimulatedUser::new(cfg, RangeFamily::default(), 0);
        let pred = DensityGrid::new(1, 2, vec![3.0, 0.6]).unwrap();
        let r = user.respond(&regions, &labels, &gt, &[[0.5, 0.5], [0.9, 0.2]], &pred, 0).unwrap();
        assert_eq!(r.region_id, 0);
        assert_eq!(r.range, CountRange::new(1.0, 2.0).unwrap());
    }
}
