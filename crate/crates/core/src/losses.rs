//! Freespace training objective:
//! `L = L_BCE + λ_S · L_STA + λ_D · L_DIA`, where the two extra terms are
//! BCE reweighted per pixel by the semantic-transition weight `ω_S` and the
//! depth-inconsistency weight `ω_D`.
//!
//! Both weight fields are treated as constants when differentiating: they
//! are recomputed every forward pass and excluded from the gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::geometry::{
    depth_weights_from_freespace, CameraIntrinsics, DepthImage, DepthWeightConfig, HeightEstimator,
    PixelSet,
};
use crate::math;

/// Binary ground truth, 1 = freespace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelImage {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl LabelImage {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(contract!("label image {}x{} with {} values", width, height, values.len()));
        }
        if let Some(bad) = values.iter().find(|&&v| v > 1) {
            return Err(contract!("label value {} is not binary", bad));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> u8 {
        self.values[v * self.width + u]
    }

    pub fn freespace_mask(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v == 1).collect()
    }
}

/// Per-pixel freespace probability.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(contract!(
                "probability map {}x{} with {} values",
                width,
                height,
                values.len()
            ));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(contract!("probability {} outside [0, 1]", bad));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn freespace_mask(&self, threshold: f64) -> Vec<bool> {
        self.values.iter().map(|&p| p > threshold).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSource {
    Semantic,
    Depth,
}

/// Per-pixel loss weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    source: WeightSource,
}

impl WeightMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, source: WeightSource) -> Result<Self> {
        if values.len() != width * height {
            return Err(contract!("weight map {}x{} with {} values", width, height, values.len()));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(contract!("weight {} outside [0, 1]", bad));
        }
        Ok(Self {
            width,
            height,
            values,
            source,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source(&self) -> WeightSource {
        self.source
    }

    /// `(min, mean, max)`.
    pub fn stats(&self) -> (f64, f64, f64) {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = self.values.iter().sum::<f64>() / self.values.len().max(1) as f64;
        (min, mean, max)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Which pixels define the freespace set used for the camera height.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DepthMaskSource {
    /// Prediction thresholded at 0.5.
    #[default]
    Predicted,
    GroundTruth,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_s: f64,
    pub lambda_d: f64,
    /// Half side of the square neighbourhood used by `ω_S`.
    pub radius: usize,
    /// Probabilities are clamped to `[eps, 1 - eps]`.
    pub eps: f64,
    pub reduction: Reduction,
    pub depth_mask: DepthMaskSource,
    pub height_estimator: HeightEstimator,
    pub depth_weights: DepthWeightConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_s: 0.3,
            lambda_d: 0.1,
            radius: 7,
            eps: 1e-7,
            reduction: Reduction::Sum,
            depth_mask: DepthMaskSource::Predicted,
            height_estimator: HeightEstimator::Mean,
            depth_weights: DepthWeightConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_s >= 0.0) || !(self.lambda_d >= 0.0) {
            return Err(contract!("loss weights must be nonnegative"));
        }
        if self.radius < 1 {
            return Err(contract!("neighbourhood radius must be at least 1"));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(contract!("probability clamp {} outside (0, 0.5)", self.eps));
        }
        Ok(())
    }
}

/// `ω_S(q) = cos(π · |frac_F(q) − 1/2|)` with `frac_F` the freespace fraction
/// over the `(2r+1)²` window around `q`, clipped to the image.
pub fn semantic_transition_weights(labels: &LabelImage, radius: usize) -> Result<WeightMap> {
    if radius < 1 {
        return Err(contract!("neighbourhood radius must be at least 1"));
    }
    let (w, h) = (labels.width(), labels.height());
    // Summed-area table with a zero border row/column.
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    for v in 0..h {
        let mut row = 0u32;
        for u in 0..w {
            row += labels.get(u, v) as u32;
            sat[(v + 1) * (w + 1) + u + 1] = sat[v * (w + 1) + u + 1] + row;
        }
    }
    let mut values = vec![0.0; w * h];
    for v in 0..h {
        let (v0, v1) = (v.saturating_sub(radius), (v + radius + 1).min(h));
        for u in 0..w {
            let (u0, u1) = (u.saturating_sub(radius), (u + radius + 1).min(w));
            let count = sat[v1 * (w + 1) + u1] + sat[v0 * (w + 1) + u0]
                - sat[v0 * (w + 1) + u1]
                - sat[v1 * (w + 1) + u0];
            let area = ((v1 - v0) * (u1 - u0)) as u32;
            values[v * w + u] = transition_weight(count, area);
        }
    }
    WeightMap::new(w, h, values, WeightSource::Semantic)
}

/// Weight for `count` freespace pixels out of `area`; exactly 0 for a pure
/// neighbourhood.
#[inline]
pub fn transition_weight(count: u32, area: u32) -> f64 {
    if count == 0 || count == area {
        return 0.0;
    }
    let frac = count as f64 / area as f64;
    math::cos(math::PI * (frac - 0.5).abs())
}

#[inline]
fn pixel_bce(p: f64, y: u8, eps: f64) -> (f64, f64) {
    let p = p.max(eps).min(1.0 - eps);
    if y == 1 {
        (-math::ln(p), -1.0 / p)
    } else {
        (-math::ln(1.0 - p), 1.0 / (1.0 - p))
    }
}

fn check_aligned(p: &ProbabilityMap, y: &LabelImage) -> Result<()> {
    if p.width() != y.width() || p.height() != y.height() {
        return Err(contract!(
            "prediction {}x{} vs labels {}x{}",
            p.width(),
            p.height(),
            y.width(),
            y.height()
        ));
    }
    Ok(())
}

/// `−Σ_q (y log p + (1 − y) log(1 − p))` with `p` clamped to `[eps, 1 − eps]`.
pub fn bce(p: &ProbabilityMap, y: &LabelImage, eps: f64) -> Result<f64> {
    check_aligned(p, y)?;
    Ok(p
        .values()
        .iter()
        .zip(y.values())
        .map(|(&pv, &yv)| pixel_bce(pv, yv, eps).0)
        .sum())
}

/// `−Σ_q ω(q) (y log p + (1 − y) log(1 − p))`.
pub fn weighted_bce(p: &ProbabilityMap, y: &LabelImage, weights: &WeightMap, eps: f64) -> Result<f64> {
    check_aligned(p, y)?;
    if weights.width() != p.width() || weights.height() != p.height() {
        return Err(contract!("weight map does not match the prediction"));
    }
    Ok(p
        .values()
        .iter()
        .zip(y.values())
        .zip(weights.values())
        .map(|((&pv, &yv), &wv)| wv * pixel_bce(pv, yv, eps).0)
        .sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub bce: f64,
    pub sta: f64,
    pub dia: f64,
    /// `∂L/∂p` per pixel, weights held constant. Inside the clamp band the
    /// derivative is taken at the clamped probability.
    pub grad: Vec<f64>,
    /// Camera height used for `ω_D`, `None` when the depth term was skipped.
    pub camera_height: Option<f64>,
    /// Set when no freespace pixel with valid depth was predicted, in which
    /// case `L_DIA = 0` for this frame.
    pub depth_term_skipped: bool,
}

/// Assembles the full objective for one frame.
pub fn total_loss(
    p: &ProbabilityMap,
    y: &LabelImage,
    depth: &DepthImage,
    k: &CameraIntrinsics,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    check_aligned(p, y)?;
    if depth.width() != p.width() || depth.height() != p.height() {
        return Err(contract!("depth image does not match the prediction"));
    }
    let semantic = if cfg.lambda_s > 0.0 {
        Some(semantic_transition_weights(y, cfg.radius)?)
    } else {
        None
    };
    let (depth_w, camera_height, skipped) = if cfg.lambda_d > 0.0 {
        let mask = match cfg.depth_mask {
            DepthMaskSource::Predicted => p.freespace_mask(0.5),
            DepthMaskSource::GroundTruth => y.freespace_mask(),
        };
        let mask: Vec<bool> = mask
            .iter()
            .zip(depth.values())
            .map(|(&m, &z)| m && z.is_finite() && z > 0.0)
            .collect();
        let fs = PixelSet::from_mask(&mask, p.width());
        match depth_weights_from_freespace(&fs, depth, k, cfg.height_estimator, &cfg.depth_weights) {
            Ok((yh, w)) => (Some(w), Some(yh), false),
            Err(Error::NoFreespace) => (None, None, true),
            Err(e) => return Err(e),
        }
    } else {
        (None, None, false)
    };
    let mut out = loss_with_weights(p, y, semantic.as_ref(), depth_w.as_ref(), cfg)?;
    out.camera_height = camera_height;
    out.depth_term_skipped = skipped;
    Ok(out)
}

/// The objective for precomputed weight fields; a missing field contributes
/// nothing.
pub fn loss_with_weights(
    p: &ProbabilityMap,
    y: &LabelImage,
    semantic: Option<&WeightMap>,
    depth: Option<&WeightMap>,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    check_aligned(p, y)?;
    let n = p.values().len();
    for w in [semantic, depth].into_iter().flatten() {
        if w.values().len() != n || w.width() != p.width() {
            return Err(contract!("weight map does not match the prediction"));
        }
    }
    let scale = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n as f64,
    };
    let (mut l_bce, mut l_sta, mut l_dia) = (0.0, 0.0, 0.0);
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let (l, d) = pixel_bce(p.values()[i], y.values()[i], cfg.eps);
        let ws = semantic.map_or(0.0, |w| w.values()[i]);
        let wd = depth.map_or(0.0, |w| w.values()[i]);
        l_bce += l;
        l_sta += ws * l;
        l_dia += wd * l;
        grad[i] = scale * (1.0 + cfg.lambda_s * ws + cfg.lambda_d * wd) * d;
    }
    let (l_bce, l_sta, l_dia) = (scale * l_bce, scale * l_sta, scale * l_dia);
    let total = if cfg.lambda_s == 0.0 && cfg.lambda_d == 0.0 {
        l_bce
    } else {
        l_bce + cfg.lambda_s * l_sta + cfg.lambda_d * l_dia
    };
    Ok(LossOutput {
        total,
        bce: l_bce,
        sta: l_sta,
        dia: l_dia,
        grad,
        camera_height: None,
        depth_term_skipped: false,
    })
}
