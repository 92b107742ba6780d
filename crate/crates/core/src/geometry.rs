//! Pinhole camera utilities: back-projection, surface normals from depth,
//! the flat-ground camera height estimate and the depth-inconsistency
//! weight field.
//!
//! Conventions: image `u` grows rightwards and `v` downwards; the camera
//! frame has `y` pointing down and `z` forward, so ground pixels back-project
//! to positive `y` and the camera height is positive.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::losses::{WeightMap, WeightSource};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.check()?;
        Ok(k)
    }

    pub fn identity() -> Self {
        Self {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
        }
    }

    fn check(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(contract!("invalid intrinsics {:?}", self));
        }
        Ok(())
    }

    /// Checks that the principal point lies inside a `width × height` image.
    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        self.check()?;
        if self.cx < 0.0 || self.cx > width as f64 || self.cy < 0.0 || self.cy > height as f64 {
            return Err(contract!(
                "principal point ({}, {}) outside a {}x{} image",
                self.cx,
                self.cy,
                width,
                height
            ));
        }
        Ok(())
    }

    /// `[0, 1, 0] K⁻¹ q̃`: the y component of the unit-depth ray through row `v`.
    #[inline]
    pub fn ray_y(&self, v: f64) -> f64 {
        (v - self.cy) / self.fy
    }

    #[inline]
    pub fn ray_x(&self, u: f64) -> f64 {
        (u - self.cx) / self.fx
    }
}

/// Metric depth in metres; pixels whose value is not finite and positive are
/// invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(contract!(
                "depth image {}x{} with {} values",
                width,
                height,
                values.len()
            ));
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

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        valid_depth(self.get(u, v))
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.values.iter().map(|&z| valid_depth(z)).collect()
    }
}

#[inline]
fn valid_depth(z: f64) -> bool {
    z.is_finite() && z > 0.0
}

/// Unit camera-frame normals; invalid pixels hold `[0, 0, 0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub vectors: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl NormalMap {
    pub fn get(&self, u: usize, v: usize) -> Option<[f64; 3]> {
        let i = v * self.width + u;
        self.valid[i].then(|| self.vectors[i])
    }

    /// Planar `3 × H × W` image with components mapped from `[-1, 1]` to
    /// `[0, 1]`; invalid pixels become 0.5.
    pub fn to_image(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (i, n) in self.vectors.iter().enumerate() {
            for c in 0..3 {
                out[c * hw + i] = 0.5 * (n[c] + 1.0);
            }
        }
        out
    }
}

/// Distinct in-bounds pixel coordinates `(u, v)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelSet {
    coords: Vec<(usize, usize)>,
}

impl PixelSet {
    pub fn new(coords: Vec<(usize, usize)>, width: usize, height: usize) -> Result<Self> {
        let mut seen = vec![false; width * height];
        for &(u, v) in &coords {
            if u >= width || v >= height {
                return Err(contract!("pixel ({}, {}) outside {}x{}", u, v, width, height));
            }
            let i = v * width + u;
            if seen[i] {
                return Err(contract!("duplicate pixel ({}, {})", u, v));
            }
            seen[i] = true;
        }
        Ok(Self { coords })
    }

    /// Pixels whose mask entry is set, in row-major order.
    pub fn from_mask(mask: &[bool], width: usize) -> Self {
        let coords = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (i % width, i / width))
            .collect();
        Self { coords }
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// The `3 × N` homogeneous coordinate matrix, one `[u, v, 1]` per column.
    pub fn homogeneous(&self) -> Vec<[f64; 3]> {
        self.coords
            .iter()
            .map(|&(u, v)| [u as f64, v as f64, 1.0])
            .collect()
    }
}

pub fn back_project(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Result<[f64; 3]> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::Domain(alloc::format!("depth {depth} is not positive")));
    }
    k.check()?;
    Ok([k.ray_x(u) * depth, k.ray_y(v) * depth, depth])
}

/// Surface normals from central differences of inverse depth.
///
/// Inverse depth is affine in `(u, v)` over any plane, so the estimate is
/// exact on planar surfaces. A pixel gets a normal only when its whole 3×3
/// neighbourhood has valid depth; the result is oriented towards the camera.
pub fn estimate_normals(depth: &DepthImage, k: &CameraIntrinsics) -> Result<NormalMap> {
    k.check()?;
    let (w, h) = (depth.width(), depth.height());
    let valid = depth.valid_mask();
    if !valid.iter().any(|&v| v) {
        return Err(Error::Empty("depth image has no valid pixels".into()));
    }
    let mut vectors = vec![[0.0; 3]; w * h];
    let mut out_valid = vec![false; w * h];
    let inv = |u: usize, v: usize| 1.0 / depth.get(u, v);
    for v in 1..h.saturating_sub(1) {
        for u in 1..w.saturating_sub(1) {
            let neighbourhood_ok =
                (v - 1..=v + 1).all(|vv| (u - 1..=u + 1).all(|uu| valid[vv * w + uu]));
            if !neighbourhood_ok {
                continue;
            }
            let gu = 0.5 * (inv(u + 1, v) - inv(u - 1, v));
            let gv = 0.5 * (inv(u, v + 1) - inv(u, v - 1));
            // (-fx Zu, -fy Zv, (u-cx) Zu + (v-cy) Zv + Z) with Z_* = -Z² g_*,
            // divided through by Z².
            let mut n = [
                k.fx * gu,
                k.fy * gv,
                -(u as f64 - k.cx) * gu - (v as f64 - k.cy) * gv + inv(u, v),
            ];
            let norm = math::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
            if !(norm > 1e-12) || !norm.is_finite() {
                continue;
            }
            let ray = [k.ray_x(u as f64), k.ray_y(v as f64), 1.0];
            let facing = n[0] * ray[0] + n[1] * ray[1] + n[2] * ray[2];
            let sign = if facing > 0.0 { -1.0 } else { 1.0 };
            for c in n.iter_mut() {
                *c *= sign / norm;
            }
            vectors[v * w + u] = n;
            out_valid[v * w + u] = true;
        }
    }
    Ok(NormalMap {
        width: w,
        height: h,
        vectors,
        valid: out_valid,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeightEstimator {
    /// Arithmetic mean of the back-projected heights.
    #[default]
    Mean,
    /// Median of the back-projected heights, robust to mispredicted pixels.
    Median,
}

/// Mean back-projected `y` of the freespace pixels:
/// `ŷ = [0, 1/N, 0] K⁻¹ Q̃ z`.
pub fn camera_height(freespace: &PixelSet, depth: &DepthImage, k: &CameraIntrinsics) -> Result<f64> {
    camera_height_with(freespace, depth, k, HeightEstimator::Mean)
}

pub fn camera_height_with(
    freespace: &PixelSet,
    depth: &DepthImage,
    k: &CameraIntrinsics,
    estimator: HeightEstimator,
) -> Result<f64> {
    if freespace.is_empty() {
        return Err(Error::NoFreespace);
    }
    k.check()?;
    let mut heights = Vec::with_capacity(freespace.len());
    for &(u, v) in freespace.coords() {
        if u >= depth.width() || v >= depth.height() {
            return Err(contract!("pixel ({}, {}) outside the depth image", u, v));
        }
        let z = depth.get(u, v);
        if !valid_depth(z) {
            return Err(Error::Domain(alloc::format!(
                "freespace pixel ({u}, {v}) has invalid depth {z}"
            )));
        }
        heights.push(k.ray_y(v as f64) * z);
    }
    // Summing in sorted order makes the result independent of pixel order.
    heights.sort_by(|a, b| a.total_cmp(b));
    Ok(match estimator {
        HeightEstimator::Mean => heights.iter().sum::<f64>() / heights.len() as f64,
        HeightEstimator::Median => {
            let m = heights.len() / 2;
            if heights.len() % 2 == 1 {
                heights[m]
            } else {
                0.5 * (heights[m - 1] + heights[m])
            }
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthWeightConfig {
    /// Implied depth assigned to pixels at or above the horizon.
    pub z_max: f64,
    /// Rays with `(v - cy) / fy <= horizon_eps` count as horizon or sky.
    pub horizon_eps: f64,
}

impl Default for DepthWeightConfig {
    fn default() -> Self {
        Self {
            z_max: 200.0,
            horizon_eps: 1e-6,
        }
    }
}

/// Depth-inconsistency weight of one pixel, `1 − exp(−|implied − measured|)`.
#[inline]
pub fn depth_inconsistency(implied: f64, measured: f64) -> f64 {
    1.0 - math::exp(-(implied - measured).abs())
}

/// Per-pixel `ω_D(q) = 1 − exp(−|ŷ / ([0,1,0] K⁻¹ q̃) − I_D(q)|)`.
///
/// Pixels without valid depth get weight 0. Pixels at or above the horizon
/// compare against `cfg.z_max` instead of the (singular) flat-ground depth.
pub fn depth_inconsistency_weights(
    depth: &DepthImage,
    k: &CameraIntrinsics,
    camera_height: f64,
    cfg: &DepthWeightConfig,
) -> Result<WeightMap> {
    if !camera_height.is_finite() {
        return Err(Error::Domain(alloc::format!(
            "camera height {camera_height} is not finite"
        )));
    }
    k.check()?;
    let (w, h) = (depth.width(), depth.height());
    let mut values = vec![0.0; w * h];
    for v in 0..h {
        let ray = k.ray_y(v as f64);
        let implied = if ray > cfg.horizon_eps {
            camera_height / ray
        } else {
            cfg.z_max
        };
        for u in 0..w {
            let z = depth.get(u, v);
            if z.is_nan() {
                return Err(Error::Domain(alloc::format!("NaN depth at ({u}, {v})")));
            }
            if valid_depth(z) {
                values[v * w + u] = depth_inconsistency(implied, z);
            }
        }
    }
    WeightMap::new(w, h, values, WeightSource::Depth)
}

/// Camera height from `freespace`, then the weight field.
pub fn depth_weights_from_freespace(
    freespace: &PixelSet,
    depth: &DepthImage,
    k: &CameraIntrinsics,
    estimator: HeightEstimator,
    cfg: &DepthWeightConfig,
) -> Result<(f64, WeightMap)> {
    let y_hat = camera_height_with(freespace, depth, k, estimator)?;
    Ok((y_hat, depth_inconsistency_weights(depth, k, y_hat, cfg)?))
}
