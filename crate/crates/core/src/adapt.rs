//! Range-supervised adaptation of the refinement parameters.
//!
//! Feedback arrives as `(region, range)` records. Each record contributes a
//! hinge penalty on its predicted sum, the records together contribute the
//! same penalty on their pooled sum, and a squared-norm regularizer keeps the
//! parameters near identity. Learning rate and step count are scaled by a
//! confidence value derived from how much feedback there is and how
//! consistently it points in one direction.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::counter::{backward_from_trace, RefinementParams, ToyCounter};
use crate::error::{Error, Result};
use crate::grid::DensityGrid;

/// Half-open count interval `(lower, upper]`; either end may be infinite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CountRange {
    lower: f64,
    upper: f64,
}

impl CountRange {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if lower.is_nan() || upper.is_nan() || lower >= upper || lower == f64::INFINITY || upper == f64::NEG_INFINITY {
            return Err(Error::InvalidConfig(format!("invalid count range ({lower}, {upper}]")));
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower < x && x <= self.upper
    }

    /// Button label: `"0"`, `"2–3"` or `">4"`.
    pub fn label(&self) -> String {
        match (self.lower.is_finite(), self.upper.is_finite()) {
            (false, true) => format!("{}", self.upper),
            (true, false) => format!(">{}", self.lower),
            (true, true) => format!("{}–{}", self.lower, self.upper),
            (false, false) => "any".to_string(),
        }
    }

    fn to_wire(self) -> [Option<f64>; 2] {
        [
            self.lower.is_finite().then_some(self.lower),
            self.upper.is_finite().then_some(self.upper),
        ]
    }
}

impl Serialize for CountRange {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_wire().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CountRange {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [lo, hi] = <[Option<f64>; 2]>::deserialize(d)?;
        CountRange::new(lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY)).map_err(D::Error::custom)
    }
}

/// One piece of user feedback. `pixels` index the full-resolution grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackRecord {
    pub region_id: u32,
    pub pixels: Vec<usize>,
    pub range: CountRange,
    pub iteration: usize,
}

/// Serialized form of a record; the pixel set stays server-side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackWire {
    pub region_id: u32,
    pub range: CountRange,
    pub iteration: usize,
}

impl From<&FeedbackRecord> for FeedbackWire {
    fn from(r: &FeedbackRecord) -> Self {
        Self {
            region_id: r.region_id,
            range: r.range,
            iteration: r.iteration,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub lr: f64,
    pub steps: usize,
    pub reg_weight: f64,
    /// Feedback count at which informativeness saturates (t).
    pub info_threshold: usize,
    /// Temperature of the informativeness ramp (T).
    pub temperature: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub log_base: f64,
    /// Lower clamp on the confidence so the scaled step count stays bounded.
    pub min_confidence: f64,
    /// Reset parameters and optimizer to identity before every interaction.
    pub reset_per_interaction: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            steps: 10,
            reg_weight: 0.002,
            info_threshold: 3,
            temperature: 2.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            log_base: 2.0,
            min_confidence: 0.05,
            reset_per_interaction: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.steps >= 1
            && self.reg_weight >= 0.0
            && self.temperature > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.log_base > 1.0
            && self.min_confidence > 0.0
            && self.min_confidence <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("adaptation config out of range: {self:?}")))
        }
    }
}

/// Hinge penalty for a sum outside `range`; infinite bounds never penalize.
pub fn loss_interactive(sum: f64, range: &CountRange) -> f64 {
    let below = if range.lower.is_finite() { (range.lower - sum).max(0.0) } else { 0.0 };
    let above = if range.upper.is_finite() { (sum - range.upper).max(0.0) } else { 0.0 };
    below + above
}

fn hinge_slope(sum: f64, range: &CountRange) -> f64 {
    if range.lower.is_finite() && sum < range.lower {
        -1.0
    } else if range.upper.is_finite() && sum > range.upper {
        1.0
    } else {
        0.0
    }
}

fn region_sums(omega: &[FeedbackRecord], prediction: &DensityGrid) -> Vec<f64> {
    omega.iter().map(|r| prediction.sum_over(&r.pixels)).collect()
}

/// Range sum with extended-real arithmetic: `-inf + x = -inf`, `inf + x = inf`.
pub fn pooled_range(omega: &[FeedbackRecord]) -> Option<CountRange> {
    if omega.is_empty() {
        return None;
    }
    let lower = omega.iter().map(|r| r.range.lower).sum();
    let upper = omega.iter().map(|r| r.range.upper).sum();
    Some(CountRange { lower, upper })
}

pub fn loss_local(omega: &[FeedbackRecord], prediction: &DensityGrid) -> f64 {
    omega
        .iter()
        .zip(region_sums(omega, prediction))
        .map(|(r, s)| loss_interactive(s, &r.range))
        .sum()
}

pub fn loss_global(omega: &[FeedbackRecord], prediction: &DensityGrid) -> f64 {
    match pooled_range(omega) {
        None => 0.0,
        Some(range) => loss_interactive(region_sums(omega, prediction).iter().sum(), &range),
    }
}

pub fn regularizer(params: &RefinementParams) -> f64 {
    params.squared_deviation()
}

pub fn loss_total(
    omega: &[FeedbackRecord],
    prediction: &DensityGrid,
    params: &RefinementParams,
    config: &AdaptConfig,
) -> f64 {
    loss_local(omega, prediction) + loss_global(omega, prediction) + config.reg_weight * regularizer(params)
}

/// `min(1, exp((|omega| - t) / T))`.
pub fn confidence_informativeness(feedback_count: usize, config: &AdaptConfig) -> f64 {
    let x = (feedback_count as f64 - config.info_threshold as f64) / config.temperature;
    x.exp().min(1.0)
}

/// One plus the negative entropy of the over-counting fraction among violated
/// records, so agreement in direction gives 1 and an even split gives 0
/// (base 2). Satisfied records are ignored; with none violated this is 1.
pub fn confidence_consistency(omega: &[FeedbackRecord], prediction: &DensityGrid, config: &AdaptConfig) -> f64 {
    let (mut over, mut under) = (0usize, 0usize);
    for (r, s) in omega.iter().zip(region_sums(omega, prediction)) {
        if s > r.range.upper {
            over += 1;
        } else if s <= r.range.lower {
            under += 1;
        }
    }
    if over + under == 0 {
        return 1.0;
    }
    consistency_from_fraction(over as f64 / (over + under) as f64, config.log_base)
}

/// `1 + p log p + (1 - p) log(1 - p)` with `0 log 0 = 0`.
pub fn consistency_from_fraction(p: f64, base: f64) -> f64 {
    let plogp = |q: f64| if q <= 0.0 { 0.0 } else { q * q.log(base) };
    1.0 + plogp(p) + plogp(1.0 - p)
}

/// Equal mix of informativeness and consistency, floored at `min_confidence`.
pub fn confidence(omega: &[FeedbackRecord], prediction: &DensityGrid, config: &AdaptConfig) -> f64 {
    let f_i = confidence_informativeness(omega.len(), config);
    let f_s = confidence_consistency(omega, prediction, config);
    (0.5 * f_i + 0.5 * f_s).max(config.min_confidence)
}

/// Scaled learning rate `lr * F_C` and step count `ceil(N / F_C)`.
pub fn adapt_step_counts(config: &AdaptConfig, confidence: f64) -> (f64, usize) {
    let fc = confidence.clamp(config.min_confidence, 1.0);
    let steps = (config.steps as f64 / fc - 1e-9).ceil().max(1.0) as usize;
    (config.lr * fc, steps)
}

/// Adam moments, kept across interactions of a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: RefinementParams,
    pub v: RefinementParams,
}

impl AdamState {
    pub fn new(like: &RefinementParams) -> Self {
        Self {
            t: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    /// One Adam update. An all-zero gradient leaves everything untouched,
    /// including the moments and the step counter.
    pub fn step(&mut self, params: &mut RefinementParams, grads: &RefinementParams, lr: f64, config: &AdaptConfig) {
        if grads.blocks().iter().all(|b| b.iter().all(|&g| g == 0.0)) {
            return;
        }
        self.t += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (pm, mm, vm) = (params.blocks_mut(), self.m.blocks_mut(), self.v.blocks_mut());
        for (((p, m), v), g) in pm.into_iter().zip(mm).zip(vm).zip(grads.blocks()) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + config.eps);
            }
        }
    }
}

/// Everything the adaptation loop mutates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptState {
    pub params: RefinementParams,
    pub optimizer: AdamState,
}

impl AdaptState {
    pub fn identity(counter: &ToyCounter) -> Self {
        let params = counter.identity_params();
        Self {
            optimizer: AdamState::new(&params),
            params,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub confidence: f64,
    pub lr: f64,
    pub steps: usize,
    /// `loss_total` before each step and after the last one.
    pub losses: Vec<f64>,
    pub prediction: DensityGrid,
}

/// Gradient of `loss_local + loss_global` with respect to the density map.
pub fn density_gradient(omega: &[FeedbackRecord], prediction: &DensityGrid) -> Vec<f64> {
    let mut grad = vec![0.0; prediction.len()];
    let sums = region_sums(omega, prediction);
    let global = pooled_range(omega).map_or(0.0, |range| hinge_slope(sums.iter().sum(), &range));
    for (r, &s) in omega.iter().zip(&sums) {
        let slope = hinge_slope(s, &r.range) + global;
        if slope != 0.0 {
            for &p in &r.pixels {
                grad[p] += slope;
            }
        }
    }
    grad
}

/// Runs one interaction's worth of confidence-scaled gradient steps.
///
/// Confidence is evaluated on the prediction at entry. Region sums are
/// recomputed from a fresh forward pass at every step.
pub fn adapt(
    counter: &ToyCounter,
    state: &mut AdaptState,
    omega: &[FeedbackRecord],
    config: &AdaptConfig,
) -> Result<AdaptOutcome> {
    config.validate()?;
    if omega.is_empty() {
        return Err(Error::Empty("feedback set"));
    }
    let n = counter.features.plane_len() * counter.weights.upsample * counter.weights.upsample;
    if let Some(r) = omega.iter().find(|r| r.pixels.is_empty() || r.pixels.iter().any(|&p| p >= n)) {
        return Err(Error::UnknownRegion(r.region_id));
    }
    if config.reset_per_interaction {
        *state = AdaptState::identity(counter);
    }

    let mut trace = counter.forward_trace(&state.params);
    let fc = confidence(omega, &trace.density, config);
    let (lr, steps) = adapt_step_counts(config, fc);
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        losses.push(loss_total(omega, &trace.density, &state.params, config));
        let upstream = density_gradient(omega, &trace.density);
        let mut grads = backward_from_trace(&counter.features, &state.params, &counter.weights, &trace, &upstream);
        let eta2 = 2.0 * config.reg_weight;
        let [gcs, gcb, gss, gsb] = grads.blocks_mut();
        for (g, p) in gcs.iter_mut().zip(&state.params.ch_scale).chain(gss.iter_mut().zip(&state.params.sp_scale)) {
            *g += eta2 * (p - 1.0);
        }
        for (g, p) in gcb.iter_mut().zip(&state.params.ch_bias).chain(gsb.iter_mut().zip(&state.params.sp_bias)) {
            *g += eta2 * p;
        }
        state.optimizer.step(&mut state.params, &grads, lr, config);
        trace = counter.forward_trace(&state.params);
    }
    losses.push(loss_total(omega, &trace.density, &state.params, config));
    Ok(AdaptOutcome {
        confidence: fc,
        lr,
        steps,
        losses,
        prediction: trace.density,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn range(lo: f64, hi: f64) -> CountRange {
        CountRange::new(lo, hi).unwrap()
    }

    fn record(pixels: Vec<usize>, lo: f64, hi: f64) -> FeedbackRecord {
        FeedbackRecord {
            region_id: 0,
            pixels,
            range: range(lo, hi),
            iteration: 0,
        }
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(loss_interactive(2.5, &range(2.0, 3.0)), 0.0);
        assert!((loss_interactive(3.5, &range(2.0, 3.0)) - 0.5).abs() < 1e-12);
        assert!((loss_interactive(0.7, &range(f64::NEG_INFINITY, 0.0)) - 0.7).abs() < 1e-12);
        // the hinge is zero on the closed interval
        assert_eq!(loss_interactive(2.0, &range(2.0, 3.0)), 0.0);
        assert_eq!(loss_interactive(1e9, &range(4.0, f64::INFINITY)), 0.0);
    }

    #[test]
    fn range_wire_format() {
        let r = range(f64::NEG_INFINITY, 0.0);
        assert_eq!(serde_json::to_string(&r).unwrap(), "[null,0.0]");
        let back: CountRange = serde_json::from_str("[4,null]").unwrap();
        assert_eq!(back, range(4.0, f64::INFINITY));
        assert!(serde_json::from_str::<CountRange>("[3,2]").is_err());
        assert_eq!(r.label(), "0");
        assert_eq!(range(0.0, 1.0).label(), "0–1");
        assert_eq!(back.label(), ">4");
    }

    #[test]
    fn global_loss_pools_ranges() {
        let g = DensityGrid::new(1, 2, vec![1.5, 3.5]).unwrap();
        let omega = vec![record(vec![0], 1.0, 2.0), record(vec![1], 2.0, 3.0)];
        assert_eq!(loss_global(&omega, &g), 0.0);
        assert!((loss_local(&omega, &g) - 0.5).abs() < 1e-12);
        let open = vec![record(vec![0], 1.0, 2.0), record(vec![1], 4.0, f64::INFINITY)];
        assert_eq!(pooled_range(&open).unwrap().upper(), f64::INFINITY);
    }

    #[test]
    fn zero_gradient_adam_step_is_a_no_op() {
        let mut p = RefinementParams::identity(2, 2, 2);
        p.ch_scale[0] = 1.3;
        let mut adam = AdamState::new(&p);
        let mut g = p.zeros_like();
        g.ch_scale[0] = 0.5;
        let cfg = AdaptConfig::default();
        adam.step(&mut p, &g, 0.1, &cfg);
        let (before, moments) = (p.clone(), adam.clone());
        let zero = p.zeros_like();
        adam.step(&mut p, &zero, 0.1, &cfg);
        assert_eq!(p, before);
        assert_eq!(adam, moments);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = RefinementParams::identity(1, 1, 1);
        let mut g = p.zeros_like();
        g.ch_bias[0] = 3.0;
        let mut adam = AdamState::new(&p);
        adam.step(&mut p, &g, 0.01, &AdaptConfig::default());
        assert!((p.ch_bias[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn density_gradient_combines_local_and_global() {
        let g = DensityGrid::new(1, 3, vec![2.0, 0.5, 0.0]).unwrap();
        // first record over by 1, second satisfied, pooled (0,2] vs 2.5 over
        let omega = vec![record(vec![0], 0.0, 1.0), record(vec![1, 2], 0.0, 1.0)];
        assert_eq!(density_gradient(&omega, &g), vec![2.0, 1.0, 1.0]);
    }
}
