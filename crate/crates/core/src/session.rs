//! One image's interaction loop: predict, segment, collect feedback, adapt,
//! and re-segment.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapt::{adapt, AdaptConfig, AdaptState, CountRange, FeedbackRecord, FeedbackWire};
use crate::counter::ToyCounter;
use crate::density::place_dots;
use crate::error::{Error, Result};
use crate::formats::{rle_encode, RleRow};
use crate::grid::{DensityGrid, LabelMap};
use crate::ipse::{segment_full_resolution, RegionKind, SegmentationConfig, SegmentedMap};
use crate::sim::RangeFamily;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub segmentation: SegmentationConfig,
    pub adapt: AdaptConfig,
    pub family: RangeFamily,
    /// Suppression radius, in full-resolution pixels, for display dots.
    pub dot_radius: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            segmentation: SegmentationConfig::desk(),
            adapt: AdaptConfig::default(),
            family: RangeFamily::default(),
            dot_radius: 3.0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.segmentation.validate()?;
        self.adapt.validate()?;
        self.family.validate()?;
        if !(self.dot_radius >= 0.0 && self.dot_radius.is_finite()) {
            return Err(Error::InvalidConfig("dot_radius must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Wall-clock milliseconds of the most recent refresh.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub predict_ms: f64,
    pub segment_ms: f64,
    pub adapt_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionView {
    pub id: u32,
    pub sum: f64,
    pub area: usize,
    pub kind: RegionKind,
    /// Display dots `[x, y]` at full resolution.
    pub dots: Vec<[f64; 2]>,
    /// Range bin the current prediction falls in.
    pub range_index: usize,
}

/// Everything a client needs to draw the current state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub iteration: usize,
    /// Bumped on every re-segmentation; region ids are only valid within one generation.
    pub generation: u64,
    pub height: usize,
    pub width: usize,
    pub predicted_total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gt_total: Option<f64>,
    pub labels: Vec<RleRow>,
    pub regions: Vec<RegionView>,
    pub ranges: Vec<String>,
    pub feedback: Vec<FeedbackWire>,
    pub timings: Timings,
    pub loss_trajectory: Vec<f64>,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

#[derive(Clone, Debug)]
pub struct InteractiveSession {
    counter: ToyCounter,
    adapt_state: AdaptState,
    ground_truth: Option<DensityGrid>,
    config: SessionConfig,
    prediction: DensityGrid,
    segmented: SegmentedMap,
    /// Full-resolution pixels of every current region, indexed by id.
    region_pixels: Vec<Vec<usize>>,
    omega: Vec<FeedbackRecord>,
    iteration: usize,
    generation: u64,
    timings: Timings,
    losses: Vec<f64>,
}

impl InteractiveSession {
    pub fn new(counter: ToyCounter, ground_truth: Option<DensityGrid>, config: SessionConfig) -> Result<Self> {
        config.validate()?;
        if let Some(gt) = &ground_truth {
            if (gt.height(), gt.width()) != counter.output_shape() {
                return Err(Error::InvalidGrid("ground truth does not match the counter output".into()));
            }
        }
        let adapt_state = AdaptState::identity(&counter);
        let t = Instant::now();
        let prediction = counter.forward(&adapt_state.params);
        let predict_ms = elapsed_ms(t);
        let mut session = Self {
            segmented: SegmentedMap {
                working: crate::ipse::Segmentation {
                    labels: LabelMap::new(1, 1, vec![0])?,
                    regions: Vec::new(),
                },
                labels: LabelMap::new(1, 1, vec![0])?,
            },
            counter,
            adapt_state,
            ground_truth,
            config,
            prediction,
            region_pixels: Vec::new(),
            omega: Vec::new(),
            iteration: 0,
            generation: 0,
            timings: Timings {
                predict_ms,
                ..Timings::default()
            },
            losses: Vec::new(),
        };
        session.resegment()?;
        Ok(session)
    }

    fn resegment(&mut self) -> Result<()> {
        let t = Instant::now();
        self.segmented = segment_full_resolution(&self.prediction, &self.config.segmentation)?;
        self.region_pixels = self.segmented.labels.pixels_by_label();
        self.region_pixels.resize(self.segmented.working.regions.len(), Vec::new());
        self.timings.segment_ms = elapsed_ms(t);
        Ok(())
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn counter(&self) -> &ToyCounter {
        &self.counter
    }

    pub fn adapt_state(&self) -> &AdaptState {
        &self.adapt_state
    }

    pub fn ground_truth(&self) -> Option<&DensityGrid> {
        self.ground_truth.as_ref()
    }

    pub fn prediction(&self) -> &DensityGrid {
        &self.prediction
    }

    pub fn segmentation(&self) -> &SegmentedMap {
        &self.segmented
    }

    /// Full-resolution label map of the current segmentation.
    pub fn labels(&self) -> &LabelMap {
        &self.segmented.labels
    }

    pub fn region_count(&self) -> usize {
        self.region_pixels.len()
    }

    pub fn region_pixels(&self, id: u32) -> Result<&[usize]> {
        self.region_pixels
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownRegion(id))
    }

    pub fn feedback(&self) -> &[FeedbackRecord] {
        &self.omega
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn timings(&self) -> Timings {
        self.timings
    }

    pub fn predicted_total(&self) -> f64 {
        self.prediction.total()
    }

    /// Records feedback on a region of the current segmentation without adapting.
    pub fn push_feedback(&mut self, region_id: u32, range: CountRange) -> Result<()> {
        let pixels = self.region_pixels(region_id)?.to_vec();
        self.omega.push(FeedbackRecord {
            region_id,
            pixels,
            range,
            iteration: self.iteration,
        });
        Ok(())
    }

    /// Records externally built feedback (for example from a simulated user).
    pub fn push_record(&mut self, record: FeedbackRecord) -> Result<()> {
        let n = self.prediction.len();
        if record.pixels.is_empty() || record.pixels.iter().any(|&p| p >= n) {
            return Err(Error::UnknownRegion(record.region_id));
        }
        self.omega.push(record);
        Ok(())
    }

    /// Adapts on all feedback so far, re-predicts and re-segments.
    pub fn adapt_and_refresh(&mut self) -> Result<crate::adapt::AdaptOutcome> {
        let t = Instant::now();
        let outcome = adapt(&self.counter, &mut self.adapt_state, &self.omega, &self.config.adapt)?;
        self.timings.adapt_ms = elapsed_ms(t);
        self.timings.predict_ms = 0.0;
        self.prediction = outcome.prediction.clone();
        self.losses = outcome.losses.clone();
        self.iteration += 1;
        self.generation += 1;
        self.resegment()?;
        Ok(outcome)
    }

    /// One full interaction: region click, range click, adapt, refresh.
    pub fn submit(&mut self, region_id: u32, range_index: usize) -> Result<crate::adapt::AdaptOutcome> {
        let range = self.config.family.range(range_index)?;
        self.push_feedback(region_id, range)?;
        self.adapt_and_refresh()
    }

    pub fn state(&self) -> SessionState {
        let sums = self.segmented.labels.sums(&self.prediction);
        let regions = self
            .segmented
            .working
            .regions
            .iter()
            .map(|r| {
                let pixels = &self.region_pixels[r.id as usize];
                let sum = sums.get(r.id as usize).copied().unwrap_or(0.0);
                RegionView {
                    id: r.id,
                    sum,
                    area: pixels.len(),
                    kind: r.kind,
                    dots: if pixels.is_empty() {
                        Vec::new()
                    } else {
                        place_dots(&self.prediction, pixels, self.config.dot_radius)
                    },
                    range_index: self.config.family.bin_index(sum),
                }
            })
            .collect();
        SessionState {
            iteration: self.iteration,
            generation: self.generation,
            height: self.prediction.height(),
            width: self.prediction.width(),
            predicted_total: self.prediction.total(),
            gt_total: self.ground_truth.as_ref().map(DensityGrid::total),
            labels: rle_encode(&self.segmented.labels),
            regions,
            ranges: self.config.family.labels(),
            feedback: self.omega.iter().map(FeedbackWire::from).collect(),
            timings: self.timings,
            loss_trajectory: self.losses.clone(),
        }
    }

    /// Restores adaptation state and feedback saved from an earlier session on
    /// the same counter, then re-predicts and re-segments.
    pub fn restore(
        &mut self,
        adapt_state: AdaptState,
        omega: Vec<FeedbackRecord>,
        iteration: usize,
        generation: u64,
    ) -> Result<()> {
        let expected = self.counter.identity_params();
        let shapes_match = adapt_state
            .params
            .blocks()
            .iter()
            .zip(expected.blocks())
            .all(|(a, b)| a.len() == b.len());
        if !shapes_match {
            return Err(Error::InvalidConfig("saved parameters do not fit this counter".into()));
        }
        for r in &omega {
            if r.pixels.is_empty() || r.pixels.iter().any(|&p| p >= self.prediction.len()) {
                return Err(Error::UnknownRegion(r.region_id));
            }
        }
        self.prediction = self.counter.forward(&adapt_state.params);
        self.adapt_state = adapt_state;
        self.omega = omega;
        self.iteration = iteration;
        self.generation = generation;
        self.resegment()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counter::{synthesize_counter, Miscalibration};
    use crate::density::DotScene;

    fn scene() -> DotScene {
        DotScene {
            height: 64,
            width: 64,
            sigma: 2.0,
            dots: (0..9)
                .map(|i| [10.0 + (i % 3) as f64 * 20.0, 12.0 + (i / 3) as f64 * 19.0])
                .collect(),
        }
    }

    fn session(miscal: Miscalibration) -> InteractiveSession {
        let s = synthesize_counter(&scene(), &miscal, 4).unwrap();
        InteractiveSession::new(s.counter, Some(s.ground_truth), SessionConfig::default()).unwrap()
    }

    #[test]
    fn state_conserves_mass() {
        let s = session(Miscalibration::None);
        let st = s.state();
        let total: f64 = st.regions.iter().map(|r| r.sum).sum();
        assert!((total - st.predicted_total).abs() < 1e-3);
        let area: usize = st.regions.iter().map(|r| r.area).sum();
        assert_eq!(area, 64 * 64);
        assert_eq!(st.ranges.len(), 6);
    }

    #[test]
    fn satisfied_feedback_is_a_no_op() {
        let mut s = session(Miscalibration::None);
        let before = s.prediction().clone();
        let st = s.state();
        let r = &st.regions[0];
        s.submit(r.id, r.range_index).unwrap();
        assert!(s.adapt_state().params.is_identity());
        assert_eq!(s.prediction(), &before);
        assert_eq!(s.iteration(), 1);
        assert_eq!(s.generation(), 1);
    }

    #[test]
    fn stale_region_and_bad_range_are_rejected() {
        let mut s = session(Miscalibration::None);
        let n = s.region_count() as u32;
        assert!(matches!(s.submit(n, 0), Err(Error::UnknownRegion(_))));
        assert!(matches!(s.submit(0, 99), Err(Error::RangeIndex { .. })));
        assert!(s.feedback().is_empty());
    }

    #[test]
    fn over_count_feedback_lowers_the_region() {
        let mut s = session(Miscalibration::GlobalScale { alpha: 2.0 });
        let gt = s.ground_truth().unwrap().clone();
        let st = s.state();
        let target = st
            .regions
            .iter()
            .max_by(|a, b| a.sum.total_cmp(&b.sum))
            .unwrap()
            .clone();
        let truth = gt.sum_over(s.region_pixels(target.id).unwrap());
        let idx = s.config().family.bin_index(truth);
        let pixels = s.region_pixels(target.id).unwrap().to_vec();
        s.submit(target.id, idx).unwrap();
        assert!(s.prediction().sum_over(&pixels) < target.sum);
        assert_eq!(s.state().feedback.len(), 1);
    }
}
