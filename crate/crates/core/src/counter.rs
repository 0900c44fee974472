//! A small differentiable density head with a refinement module.
//!
//! The head mirrors the tail of a density-regression network: the refinement
//! module sits right after the first convolution, followed by
//! `ReLU -> conv3x3 -> ReLU -> bilinear upsample -> 1x1 projection -> ReLU`.
//! The feature map `F` is the output of the first convolution, computed once
//! per image; every adaptation step only runs the layers after it.
//!
//! [`backward`] is a hand-written reverse pass producing exact gradients with
//! respect to the four refinement parameter blocks. Head weights and features
//! never receive gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{downsample_sum, render_density, smooth, DotScene, SmoothKernel};
use crate::error::{Error, Result};
use crate::grid::DensityGrid;

/// Channel-major feature tensor `[channel][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || values.len() != channels * height * width {
            return Err(Error::InvalidGrid(format!(
                "{} values for a {channels}x{height}x{width} feature map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("feature map contains non-finite values".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.values[c * n..(c + 1) * n]
    }
}

/// A 3x3 same-padded (zero) convolution, kernel layout `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3 {
    pub channels: usize,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(channels: usize) -> Self {
        Self {
            channels,
            kernel: vec![0.0; channels * channels * 9],
            bias: vec![0.0; channels],
        }
    }

    /// Passes every channel through unchanged.
    pub fn identity(channels: usize) -> Self {
        let mut conv = Self::zeros(channels);
        for c in 0..channels {
            conv.kernel[(c * channels + c) * 9 + 4] = 1.0;
        }
        conv
    }

    #[inline]
    fn tap(&self, co: usize, ci: usize, ky: usize, kx: usize) -> f64 {
        self.kernel[((co * self.channels + ci) * 3 + ky) * 3 + kx]
    }

    pub fn forward(&self, input: &FeatureMap) -> FeatureMap {
        assert_eq!(input.channels, self.channels, "conv channel mismatch");
        let (h, w, n) = (input.height, input.width, input.plane_len());
        let mut out = FeatureMap::zeros(self.channels, h, w);
        for co in 0..self.channels {
            let dst = &mut out.values[co * n..(co + 1) * n];
            dst.iter_mut().for_each(|v| *v = self.bias[co]);
            for ci in 0..self.channels {
                let src = input.plane(ci);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wgt = self.tap(co, ci, ky, kx);
                        if wgt == 0.0 {
                            continue;
                        }
                        // out[y][x] += wgt * in[y + ky - 1][x + kx - 1]
                        let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                        let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let d = &mut dst[y * w + x0..y * w + x1];
                            let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            for (o, &i) in d.iter_mut().zip(s) {
                                *o += wgt * i;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradient with respect to the input given the gradient of the output.
    pub fn backward_input(&self, grad_out: &FeatureMap) -> FeatureMap {
        let (h, w, n) = (grad_out.height, grad_out.width, grad_out.plane_len());
        let mut grad_in = FeatureMap::zeros(self.channels, h, w);
        for ci in 0..self.channels {
            let dst = &mut grad_in.values[ci * n..(ci + 1) * n];
            for co in 0..self.channels {
                let src = grad_out.plane(co);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wgt = self.tap(co, ci, ky, kx);
                        if wgt == 0.0 {
                            continue;
                        }
                        // in[y + ky - 1][x + kx - 1] += wgt * out[y][x]
                        let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                        let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let d = &mut dst[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            let s = &src[y * w + x0..y * w + x1];
                            for (o, &g) in d.iter_mut().zip(s) {
                                *o += wgt * g;
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

/// Fixed weights of the regression head. `conv0` produces the feature map the
/// refinement module acts on; the remaining layers run on every prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub conv0: Conv3x3,
    pub conv1: Conv3x3,
    pub proj: Vec<f64>,
    pub proj_bias: f64,
    /// Bilinear upsampling factor between features and density (1, 2 or 4).
    pub upsample: usize,
}

impl HeadWeights {
    pub fn channels(&self) -> usize {
        self.conv1.channels
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.conv1.channels;
        let ok_conv = |conv: &Conv3x3| {
            conv.channels == c && conv.kernel.len() == c * c * 9 && conv.bias.len() == c
        };
        if !ok_conv(&self.conv0) || !ok_conv(&self.conv1) || self.proj.len() != c {
            return Err(Error::InvalidConfig("head weight shapes are inconsistent".into()));
        }
        if !matches!(self.upsample, 1 | 2 | 4) {
            return Err(Error::InvalidConfig(format!(
                "upsample factor must be 1, 2 or 4, got {}",
                self.upsample
            )));
        }
        let finite = self
            .conv0
            .kernel
            .iter()
            .chain(&self.conv0.bias)
            .chain(&self.conv1.kernel)
            .chain(&self.conv1.bias)
            .chain(&self.proj)
            .chain(std::iter::once(&self.proj_bias))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("head weights contain non-finite values".into()));
        }
        Ok(())
    }

    /// Layers before the refinement module: computes the feature map once.
    pub fn pre_refinement(&self, input: &FeatureMap) -> FeatureMap {
        self.conv0.forward(input)
    }
}

/// Affine refinement parameters: per-channel then per-position scale and bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementParams {
    pub ch_scale: Vec<f64>,
    pub ch_bias: Vec<f64>,
    pub sp_scale: Vec<f64>,
    pub sp_bias: Vec<f64>,
}

impl RefinementParams {
    /// Scales one, biases zero: the refined features equal the input.
    pub fn identity(channels: usize, height: usize, width: usize) -> Self {
        Self {
            ch_scale: vec![1.0; channels],
            ch_bias: vec![0.0; channels],
            sp_scale: vec![1.0; height * width],
            sp_bias: vec![0.0; height * width],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            ch_scale: vec![0.0; self.ch_scale.len()],
            ch_bias: vec![0.0; self.ch_bias.len()],
            sp_scale: vec![0.0; self.sp_scale.len()],
            sp_bias: vec![0.0; self.sp_bias.len()],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.ch_scale.iter().chain(&self.sp_scale).all(|&v| v == 1.0)
            && self.ch_bias.iter().chain(&self.sp_bias).all(|&v| v == 0.0)
    }

    pub fn len(&self) -> usize {
        self.ch_scale.len() + self.ch_bias.len() + self.sp_scale.len() + self.sp_bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn blocks(&self) -> [&[f64]; 4] {
        [&self.ch_scale, &self.ch_bias, &self.sp_scale, &self.sp_bias]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.ch_scale,
            &mut self.ch_bias,
            &mut self.sp_scale,
            &mut self.sp_bias,
        ]
    }

    /// `||scale - 1||^2 + ||bias||^2` over both channel and spatial blocks.
    pub fn squared_deviation(&self) -> f64 {
        let s: f64 = self.ch_scale.iter().chain(&self.sp_scale).map(|v| (v - 1.0) * (v - 1.0)).sum();
        let b: f64 = self.ch_bias.iter().chain(&self.sp_bias).map(|v| v * v).sum();
        s + b
    }

    fn check_shape(&self, f: &FeatureMap) {
        assert!(
            self.ch_scale.len() == f.channels
                && self.ch_bias.len() == f.channels
                && self.sp_scale.len() == f.plane_len()
                && self.sp_bias.len() == f.plane_len(),
            "refinement parameters do not match the {}x{}x{} feature map",
            f.channels,
            f.height,
            f.width
        );
    }
}

/// `out[c, y, x] = sp_scale[y, x] * (ch_scale[c] * F[c, y, x] + ch_bias[c]) + sp_bias[y, x]`.
pub fn refine(features: &FeatureMap, params: &RefinementParams) -> FeatureMap {
    params.check_shape(features);
    if params.is_identity() {
        return features.clone();
    }
    let mut out = features.clone();
    for c in 0..features.channels {
        let (cs, cb) = (params.ch_scale[c], params.ch_bias[c]);
        for ((o, &ss), &sb) in out.plane_mut(c).iter_mut().zip(&params.sp_scale).zip(&params.sp_bias) {
            *o = ss * (cs * *o + cb) + sb;
        }
    }
    out
}

/// Corner-aligned bilinear taps for one axis: `(i0, i1, t)` per output index.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

fn upsample_bilinear(input: &FeatureMap, factor: usize) -> FeatureMap {
    if factor == 1 {
        return input.clone();
    }
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (h * factor, w * factor);
    let (ty, tx) = (bilinear_taps(h, oh), bilinear_taps(w, ow));
    let mut out = FeatureMap::zeros(input.channels, oh, ow);
    for c in 0..input.channels {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn upsample_bilinear_backward(grad_out: &FeatureMap, factor: usize, h: usize, w: usize) -> FeatureMap {
    if factor == 1 {
        return grad_out.clone();
    }
    let (oh, ow) = (grad_out.height, grad_out.width);
    let (ty, tx) = (bilinear_taps(h, oh), bilinear_taps(w, ow));
    let mut grad_in = FeatureMap::zeros(grad_out.channels, h, w);
    for c in 0..grad_out.channels {
        let src = grad_out.plane(c);
        let dst = grad_in.plane_mut(c);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    grad_in
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Refined features before the first ReLU.
    pub refined: FeatureMap,
    /// conv1 output before its ReLU.
    pub conv: FeatureMap,
    /// Upsampled post-ReLU conv activations.
    pub upsampled: FeatureMap,
    /// Projection before the final ReLU.
    pub projection: Vec<f64>,
    pub density: DensityGrid,
}

pub fn forward_trace(features: &FeatureMap, params: &RefinementParams, weights: &HeadWeights) -> ForwardTrace {
    assert_eq!(features.channels, weights.channels(), "feature/head channel mismatch");
    let refined = refine(features, params);
    let mut activated = refined.clone();
    activated.values.iter_mut().for_each(|v| *v = v.max(0.0));
    let conv = weights.conv1.forward(&activated);
    let mut hidden = conv.clone();
    hidden.values.iter_mut().for_each(|v| *v = v.max(0.0));
    let upsampled = upsample_bilinear(&hidden, weights.upsample);

    let n = upsampled.plane_len();
    let mut projection = vec![weights.proj_bias; n];
    for (c, &pw) in weights.proj.iter().enumerate() {
        for (p, &v) in projection.iter_mut().zip(upsampled.plane(c)) {
            *p += pw * v;
        }
    }
    let density = DensityGrid::from_raw(
        upsampled.height,
        upsampled.width,
        projection.iter().map(|&p| p.max(0.0)).collect(),
    );
    ForwardTrace {
        refined,
        conv,
        upsampled,
        projection,
        density,
    }
}

/// Predicted density map `D = h_a(R(F))`; always non-negative.
pub fn forward(features: &FeatureMap, params: &RefinementParams, weights: &HeadWeights) -> DensityGrid {
    forward_trace(features, params, weights).density
}

/// Exact gradients of `sum(grad_density * D)` with respect to the refinement
/// parameters. `grad_density` has the density map's shape (row-major).
pub fn backward(
    features: &FeatureMap,
    params: &RefinementParams,
    weights: &HeadWeights,
    grad_density: &[f64],
) -> RefinementParams {
    let trace = forward_trace(features, params, weights);
    backward_from_trace(features, params, weights, &trace, grad_density)
}

pub fn backward_from_trace(
    features: &FeatureMap,
    params: &RefinementParams,
    weights: &HeadWeights,
    trace: &ForwardTrace,
    grad_density: &[f64],
) -> RefinementParams {
    assert_eq!(
        grad_density.len(),
        trace.projection.len(),
        "density gradient has the wrong shape"
    );
    // final ReLU
    let grad_proj: Vec<f64> = grad_density
        .iter()
        .zip(&trace.projection)
        .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
        .collect();

    // projection
    let up = &trace.upsampled;
    let mut grad_up = FeatureMap::zeros(up.channels, up.height, up.width);
    for (c, &pw) in weights.proj.iter().enumerate() {
        for (g, &gp) in grad_up.plane_mut(c).iter_mut().zip(&grad_proj) {
            *g = pw * gp;
        }
    }

    // upsampling, then conv1's ReLU
    let (h, w) = (features.height, features.width);
    let mut grad_conv = upsample_bilinear_backward(&grad_up, weights.upsample, h, w);
    for (g, &z) in grad_conv.values.iter_mut().zip(&trace.conv.values) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }

    // conv1, then the first ReLU
    let mut grad_refined = weights.conv1.backward_input(&grad_conv);
    for (g, &a) in grad_refined.values.iter_mut().zip(&trace.refined.values) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }

    // refinement
    let mut grads = params.zeros_like();
    for c in 0..features.channels {
        let (cs, cb) = (params.ch_scale[c], params.ch_bias[c]);
        let (mut g_cs, mut g_cb) = (0.0, 0.0);
        let planes = grad_refined.plane(c).iter().zip(features.plane(c)).zip(&params.sp_scale);
        for (i, ((&ga, &f), &ss)) in planes.enumerate() {
            grads.sp_bias[i] += ga;
            grads.sp_scale[i] += ga * (cs * f + cb);
            g_cs += ga * ss * f;
            g_cb += ga * ss;
        }
        grads.ch_scale[c] = g_cs;
        grads.ch_bias[c] = g_cb;
    }
    grads
}

/// A feature map bound to fixed head weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCounter {
    pub features: FeatureMap,
    pub weights: HeadWeights,
}

impl ToyCounter {
    pub fn new(features: FeatureMap, weights: HeadWeights) -> Result<Self> {
        weights.validate()?;
        if features.channels != weights.channels() {
            return Err(Error::InvalidConfig(format!(
                "feature map has {} channels, head expects {}",
                features.channels,
                weights.channels()
            )));
        }
        Ok(Self { features, weights })
    }

    pub fn identity_params(&self) -> RefinementParams {
        RefinementParams::identity(self.features.channels, self.features.height, self.features.width)
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (
            self.features.height * self.weights.upsample,
            self.features.width * self.weights.upsample,
        )
    }

    pub fn forward(&self, params: &RefinementParams) -> DensityGrid {
        forward(&self.features, params, &self.weights)
    }

    pub fn forward_trace(&self, params: &RefinementParams) -> ForwardTrace {
        forward_trace(&self.features, params, &self.weights)
    }

    pub fn backward(&self, params: &RefinementParams, grad_density: &[f64]) -> RefinementParams {
        backward(&self.features, params, &self.weights, grad_density)
    }
}

/// Injected prediction error of a synthesized counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Miscalibration {
    #[default]
    None,
    /// Every feature scaled by `alpha`: the count is off by that factor.
    GlobalScale { alpha: f64 },
    /// Per-channel feature scaling.
    ChannelScale { alphas: Vec<f64> },
    /// A spurious activation of total mass `magnitude` around `center` (`[x, y]`, density pixels).
    /// With `channel` set, that feature channel becomes a distractor detector:
    /// it carries no object response and the activation fires there alone.
    /// Otherwise the activation is spread over all channels.
    LocalBlob {
        center: [f64; 2],
        radius: f64,
        magnitude: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        channel: Option<usize>,
    },
}

impl Miscalibration {
    pub fn validate(&self, channels: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        match self {
            Miscalibration::None => Ok(()),
            Miscalibration::GlobalScale { alpha } if !(*alpha > 0.0 && alpha.is_finite()) => {
                bad(format!("global scale must be > 0, got {alpha}"))
            }
            Miscalibration::ChannelScale { alphas } if alphas.len() != channels => {
                bad(format!("{} channel scales for {channels} channels", alphas.len()))
            }
            Miscalibration::ChannelScale { alphas } if alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) => {
                bad("channel scales must be > 0".into())
            }
            Miscalibration::LocalBlob { radius, magnitude, .. }
                if !(*radius > 0.0 && radius.is_finite() && *magnitude >= 0.0 && magnitude.is_finite()) =>
            {
                bad("blob radius must be > 0 and magnitude >= 0".into())
            }
            Miscalibration::LocalBlob { channel: Some(k), .. } if *k >= channels => {
                bad(format!("blob channel {k} out of range for {channels} channels"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterOptions {
    pub channels: usize,
    pub upsample: usize,
    /// Feature units per unit of density; the projection divides it back out.
    /// The default puts the peak of an isolated object of width 2 px between one
    /// and two feature units, where refinement biases and scales act on a
    /// comparable footing.
    pub feature_gain: f64,
}

impl Default for CounterOptions {
    fn default() -> Self {
        Self {
            channels: 6,
            upsample: 1,
            feature_gain: 40.0,
        }
    }
}

/// A synthesized counter together with the density it should predict.
#[derive(Clone, Debug)]
pub struct SynthesizedCounter {
    pub counter: ToyCounter,
    pub ground_truth: DensityGrid,
}

/// Builds a counter for a dot scene with default options.
pub fn synthesize_counter(scene: &DotScene, miscal: &Miscalibration, seed: u64) -> Result<SynthesizedCounter> {
    let gt = render_density(scene)?;
    synthesize_counter_for_density(&gt, miscal, seed, &CounterOptions::default())
}

/// Builds a counter whose unrefined prediction is a smoothed copy of `gt`,
/// then applies `miscal`.
///
/// Channel `c` of the head input is `a_c` times `gt` blurred at `sigma = c / 2`
/// (channel 0 unblurred), with mixing weights `a_c` drawn from `seed`. `conv0`
/// is the identity, `conv1` a per-channel binomial blur, and the projection
/// weights are `1 / (C a_c)`, so the prediction averages the blurred copies.
pub fn synthesize_counter_for_density(
    gt: &DensityGrid,
    miscal: &Miscalibration,
    seed: u64,
    options: &CounterOptions,
) -> Result<SynthesizedCounter> {
    let (channels, up, gain) = (options.channels, options.upsample, options.feature_gain);
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(Error::InvalidConfig(format!("feature gain must be > 0, got {gain}")));
    }
    if channels == 0 {
        return Err(Error::InvalidConfig("counter needs at least one channel".into()));
    }
    miscal.validate(channels)?;
    if !matches!(up, 1 | 2 | 4) || !gt.height().is_multiple_of(up) || !gt.width().is_multiple_of(up) {
        return Err(Error::InvalidConfig(format!(
            "upsample factor {up} must be 1, 2 or 4 and divide the {}x{} grid",
            gt.height(),
            gt.width()
        )));
    }
    // feature-resolution mass density, scaled so bilinear upsampling restores totals
    let base = if up == 1 {
        gt.clone()
    } else {
        let pooled = downsample_sum(gt, up)?;
        let s = 1.0 / (up * up) as f64;
        DensityGrid::from_raw(pooled.height(), pooled.width(), pooled.values().iter().map(|v| v * s).collect())
    };
    let (h, w) = (base.height(), base.width());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mixing: Vec<f64> = (0..channels).map(|_| rng.random_range(0.5..1.5)).collect();

    // a distractor channel carries no object response; objects use the rest
    let distractor = match miscal {
        Miscalibration::LocalBlob { channel: Some(k), .. } if channels > 1 => Some(*k),
        _ => None,
    };
    let object_channels = channels - usize::from(distractor.is_some());

    let mut input = FeatureMap::zeros(channels, h, w);
    for (c, &a) in mixing.iter().enumerate() {
        if Some(c) == distractor {
            continue;
        }
        let blurred = if c == 0 {
            base.clone()
        } else {
            smooth(&base, &SmoothKernel::new(0.5 * c as f64)?)
        };
        for (dst, &v) in input.plane_mut(c).iter_mut().zip(blurred.values()) {
            *dst = gain * a * v;
        }
    }

    let mut conv1 = Conv3x3::zeros(channels);
    let binomial = [1.0, 2.0, 1.0];
    for c in 0..channels {
        for ky in 0..3 {
            for kx in 0..3 {
                conv1.kernel[((c * channels + c) * 3 + ky) * 3 + kx] = binomial[ky] * binomial[kx] / 16.0;
            }
        }
    }
    let weights = HeadWeights {
        conv0: Conv3x3::identity(channels),
        conv1,
        proj: mixing
            .iter()
            .enumerate()
            .map(|(c, a)| {
                let share = if Some(c) == distractor { 1.0 } else { object_channels as f64 };
                1.0 / (gain * share * a)
            })
            .collect(),
        proj_bias: 0.0,
        upsample: up,
    };
    let mut features = weights.pre_refinement(&input);

    match miscal {
        Miscalibration::None => {}
        Miscalibration::GlobalScale { alpha } => features.values.iter_mut().for_each(|v| *v *= alpha),
        Miscalibration::ChannelScale { alphas } => {
            for (c, &a) in alphas.iter().enumerate() {
                features.plane_mut(c).iter_mut().for_each(|v| *v *= a);
            }
        }
        Miscalibration::LocalBlob {
            center,
            radius,
            magnitude,
            channel: _,
        } => {
            let u = up as f64;
            let cx = (center[0] / u).clamp(0.0, w as f64 - 1e-9);
            let cy = (center[1] / u).clamp(0.0, h as f64 - 1e-9);
            let blob = render_density(&DotScene {
                height: h,
                width: w,
                sigma: (radius / (2.0 * u)).max(0.25),
                dots: vec![[cx, cy]],
            })?;
            let s = magnitude / (u * u);
            let targets = match distractor {
                Some(k) => k..k + 1,
                None => 0..channels,
            };
            for c in targets {
                let a = mixing[c];
                for (dst, &b) in features.plane_mut(c).iter_mut().zip(blob.values()) {
                    *dst += gain * a * s * b;
                }
            }
        }
    }

    Ok(SynthesizedCounter {
        counter: ToyCounter::new(features, weights)?,
        ground_truth: gt.clone(),
    })
}
