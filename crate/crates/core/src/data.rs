//! Procedural road scenes and the training augmentations.
//!
//! Camera frame: x right, y down, z forward. The ground is the plane
//! `y = camera_height`; an optional ramp rises from `z = start` with
//! `y = h − tan θ · (z − start)`. Obstacles are axis-aligned boxes.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::geometry::{CameraIntrinsics, DepthImage};
use crate::losses::LabelImage;
use crate::math;
use crate::tensor::Tensor;

/// Rays travelling farther than this are treated as sky.
pub const MAX_RANGE: f64 = 250.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    /// A box standing on flat ground of the given camera height.
    pub fn on_ground(x: f64, z: f64, width: f64, height: f64, depth: f64, camera_height: f64) -> Self {
        Self {
            min: [x - width / 2.0, camera_height - height, z],
            max: [x + width / 2.0, camera_height, z + depth],
        }
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            for (a, v) in c.iter_mut().enumerate() {
                *v = if i >> a & 1 == 0 { self.min[a] } else { self.max[a] };
            }
        }
        out
    }

    /// Entry distance of the ray `t · dir` (slab test), if any.
    pub fn intersect(&self, dir: [f64; 3]) -> Option<f64> {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            if dir[a] == 0.0 {
                if self.min[a] > 0.0 || self.max[a] < 0.0 {
                    return None;
                }
                continue;
            }
            let (mut lo, mut hi) = (self.min[a] / dir[a], self.max[a] / dir[a]);
            if lo > hi {
                core::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t0 <= t1 && t1 > 0.0).then_some(t0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ramp {
    pub start_z: f64,
    pub angle_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    pub camera_height: f64,
    /// Drivable width centred on `road_offset`.
    pub road_width: f64,
    pub road_offset: f64,
    pub ramp: Option<Ramp>,
    pub obstacles: Vec<Aabb>,
    /// Amplitude of the uniform RGB noise.
    pub noise: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Empty flat road with a default camera.
    pub fn flat(width: usize, height: usize, camera_height: f64) -> Self {
        let f = 0.9 * width as f64;
        Self {
            width,
            height,
            intrinsics: CameraIntrinsics {
                fx: f,
                fy: f,
                cx: (width as f64 - 1.0) / 2.0,
                cy: 0.4 * height as f64,
            },
            camera_height,
            road_width: f64::INFINITY,
            road_offset: 0.0,
            ramp: None,
            obstacles: Vec::new(),
            noise: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.camera_height > 0.0) || !self.camera_height.is_finite() {
            return Err(contract!("camera height must be positive, got {}", self.camera_height));
        }
        if self.width == 0 || self.height == 0 {
            return Err(contract!("empty image size"));
        }
        if !(self.road_width > 0.0) {
            return Err(contract!("road width must be positive"));
        }
        if let Some(r) = self.ramp {
            if !(r.angle_deg > -89.0 && r.angle_deg < 89.0) || !(r.start_z > 0.0) {
                return Err(contract!("degenerate ramp {:?}", r));
            }
        }
        self.intrinsics.validate_for(self.width, self.height)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, 3, H, W]` in `[0, 1]`.
    pub rgb: Tensor,
    pub depth: DepthImage,
    pub labels: LabelImage,
    pub intrinsics: CameraIntrinsics,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn check(&self) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        if self.rgb.shape() != [1, 3, h, w] || self.labels.width() != w || self.labels.height() != h {
            return Err(contract!("sample planes are not aligned"));
        }
        self.intrinsics.validate_for(w, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Surface {
    Ground { on_road: bool },
    Obstacle(usize),
    Sky,
}

fn trace(spec: &SceneSpec, dir: [f64; 3]) -> (f64, Surface) {
    let h = spec.camera_height;
    let mut best = (f64::INFINITY, Surface::Sky);
    let ground_t = match spec.ramp {
        None => (dir[1] > 0.0).then(|| h / dir[1]),
        Some(r) => {
            let flat = (dir[1] > 0.0).then(|| h / dir[1]).filter(|&t| t <= r.start_z);
            flat.or_else(|| {
                let s = math::tan(r.angle_deg * math::PI / 180.0);
                let den = dir[1] + s;
                (den > 0.0).then(|| (h + s * r.start_z) / den).filter(|&t| t > r.start_z)
            })
        }
    };
    if let Some(t) = ground_t {
        let x = dir[0] * t;
        let on_road = (x - spec.road_offset).abs() <= spec.road_width / 2.0;
        best = (t, Surface::Ground { on_road });
    }
    for (i, b) in spec.obstacles.iter().enumerate() {
        if let Some(t) = b.intersect(dir) {
            if t < best.0 {
                best = (t, Surface::Obstacle(i));
            }
        }
    }
    if best.0 > MAX_RANGE {
        return (f64::INFINITY, Surface::Sky);
    }
    best
}

fn palette(surface: Surface, t: f64) -> [f64; 3] {
    let base = match surface {
        Surface::Ground { on_road: true } => [0.42, 0.42, 0.45],
        Surface::Ground { on_road: false } => [0.35, 0.48, 0.30],
        Surface::Obstacle(i) => [[0.70, 0.25, 0.20], [0.25, 0.30, 0.65], [0.60, 0.55, 0.20]][i % 3],
        Surface::Sky => return [0.60, 0.75, 0.95],
    };
    // Distance haze towards the sky colour.
    let k = 1.0 - math::exp(-t / 120.0);
    [0, 1, 2].map(|c| base[c] * (1.0 - k) + [0.60, 0.75, 0.95][c] * k)
}

/// Ray-casts one frame. Depth is `z` of the first hit; sky is invalid (0).
pub fn render(spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let k = &spec.intrinsics;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut depth = vec![0.0; w * h];
    let mut labels = vec![0u8; w * h];
    let mut rgb = Tensor::zeros([1, 3, h, w]);
    for v in 0..h {
        for u in 0..w {
            let dir = [k.ray_x(u as f64), k.ray_y(v as f64), 1.0];
            let (t, surface) = trace(spec, dir);
            let i = v * w + u;
            if t.is_finite() {
                depth[i] = t;
            }
            if surface == (Surface::Ground { on_road: true }) {
                labels[i] = 1;
            }
            let colour = palette(surface, t);
            for (c, &base) in colour.iter().enumerate() {
                let n = if spec.noise > 0.0 {
                    rng.gen_range(-spec.noise..spec.noise)
                } else {
                    0.0
                };
                rgb.set(0, c, v, u, (base + n).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Sample {
        rgb,
        depth: DepthImage::new(w, h, depth)?,
        labels: LabelImage::new(w, h, labels)?,
        intrinsics: *k,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    /// Wide road, flat ground, a few large obstacles.
    Easy,
    /// Thin obstacles, ramps and narrow roads: many transition pixels.
    Hard,
}

/// A random scene; the same `seed` always gives the same spec.
pub fn random_scene(split: Split, width: usize, height: usize, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam_h = rng.gen_range(1.4..1.8);
    let mut spec = SceneSpec::flat(width, height, cam_h);
    spec.seed = seed;
    spec.noise = 0.03;
    let f = spec.intrinsics.fx * rng.gen_range(0.9..1.1);
    spec.intrinsics.fx = f;
    spec.intrinsics.fy = f;
    match split {
        Split::Easy => {
            spec.road_width = rng.gen_range(8.0..12.0);
            spec.road_offset = rng.gen_range(-1.0..1.0);
            for _ in 0..rng.gen_range(0..3) {
                let z = rng.gen_range(8.0..30.0);
                let x = rng.gen_range(-5.0..5.0);
                spec.obstacles
                    .push(Aabb::on_ground(x, z, rng.gen_range(1.5..2.5), rng.gen_range(1.2..2.0), 3.0, cam_h));
            }
        }
        Split::Hard => {
            spec.road_width = rng.gen_range(3.5..6.0);
            spec.road_offset = rng.gen_range(-1.5..1.5);
            if rng.gen_bool(0.6) {
                spec.ramp = Some(Ramp {
                    start_z: rng.gen_range(6.0..15.0),
                    angle_deg: rng.gen_range(3.0..10.0),
                });
            }
            for _ in 0..rng.gen_range(2..6) {
                let z = rng.gen_range(4.0..20.0);
                let x = spec.road_offset + rng.gen_range(-3.0..3.0);
                // Poles and bollards.
                let wdt = rng.gen_range(0.15..0.4);
                spec.obstacles
                    .push(Aabb::on_ground(x, z, wdt, rng.gen_range(0.6..2.5), wdt, cam_h));
            }
            if rng.gen_bool(0.5) {
                let z = rng.gen_range(8.0..20.0);
                let x = spec.road_offset + rng.gen_range(-2.0..2.0);
                spec.obstacles.push(Aabb::on_ground(x, z, 1.8, 1.5, 4.0, cam_h));
            }
        }
    }
    spec
}

/// `count` rendered frames with per-frame seeds drawn from `seed`.
pub fn generate(split: Split, count: usize, width: usize, height: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| render(&random_scene(split, width, height, rng.gen())))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentOp {
    HFlip,
    /// Rotation about the image centre, in degrees.
    Rotate(f64),
    Crop {
        x0: usize,
        y0: usize,
        width: usize,
        height: usize,
    },
    /// Multiplies RGB by the factor and clamps to `[0, 1]`.
    Brightness(f64),
}

pub fn augment(sample: &Sample, ops: &[AugmentOp]) -> Result<Sample> {
    let mut s = sample.clone();
    for op in ops {
        s = apply(&s, *op)?;
    }
    Ok(s)
}

fn remap(s: &Sample, out_w: usize, out_h: usize, src: impl Fn(usize, usize) -> (f64, f64), bilinear_rgb: bool) -> Result<Sample> {
    let (w, h) = (s.width(), s.height());
    let mut depth = vec![0.0; out_w * out_h];
    let mut labels = vec![0u8; out_w * out_h];
    let mut rgb = Tensor::zeros([1, 3, out_h, out_w]);
    for v in 0..out_h {
        for u in 0..out_w {
            let (x, y) = src(u, v);
            let (xn, yn) = (math::round(x), math::round(y));
            if xn >= 0.0 && yn >= 0.0 && (xn as usize) < w && (yn as usize) < h {
                let (xi, yi) = (xn as usize, yn as usize);
                depth[v * out_w + u] = s.depth.get(xi, yi);
                labels[v * out_w + u] = s.labels.get(xi, yi);
                if !bilinear_rgb {
                    for c in 0..3 {
                        rgb.set(0, c, v, u, s.rgb.at(0, c, yi, xi));
                    }
                }
            }
            if bilinear_rgb && x > -1.0 && y > -1.0 && x < w as f64 && y < h as f64 {
                let (x0, y0) = (math::floor(x), math::floor(y));
                let (fx, fy) = (x - x0, y - y0);
                for c in 0..3 {
                    let px = |xx: f64, yy: f64| {
                        if xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
                            0.0
                        } else {
                            s.rgb.at(0, c, yy as usize, xx as usize)
                        }
                    };
                    let val = (1.0 - fy) * ((1.0 - fx) * px(x0, y0) + fx * px(x0 + 1.0, y0))
                        + fy * ((1.0 - fx) * px(x0, y0 + 1.0) + fx * px(x0 + 1.0, y0 + 1.0));
                    rgb.set(0, c, v, u, val);
                }
            }
        }
    }
    Ok(Sample {
        rgb,
        depth: DepthImage::new(out_w, out_h, depth)?,
        labels: LabelImage::new(out_w, out_h, labels)?,
        intrinsics: s.intrinsics,
    })
}

fn apply(s: &Sample, op: AugmentOp) -> Result<Sample> {
    let (w, h) = (s.width(), s.height());
    match op {
        AugmentOp::HFlip => {
            let mut out = remap(s, w, h, |u, v| ((w - 1 - u) as f64, v as f64), false)?;
            out.intrinsics.cx = (w as f64 - 1.0) - s.intrinsics.cx;
            Ok(out)
        }
        AugmentOp::Crop { x0, y0, width, height } => {
            if width == 0 || height == 0 || x0 + width > w || y0 + height > h {
                return Err(contract!(
                    "crop {}x{} at ({}, {}) exceeds {}x{}",
                    width,
                    height,
                    x0,
                    y0,
                    w,
                    h
                ));
            }
            let mut out = remap(s, width, height, |u, v| ((u + x0) as f64, (v + y0) as f64), false)?;
            out.intrinsics.cx = s.intrinsics.cx - x0 as f64;
            out.intrinsics.cy = s.intrinsics.cy - y0 as f64;
            Ok(out)
        }
        AugmentOp::Rotate(deg) => {
            let (sn, cs) = (math::sin(deg * math::PI / 180.0), math::cos(deg * math::PI / 180.0));
            let (xc, yc) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
            remap(
                s,
                w,
                h,
                |u, v| {
                    let (dx, dy) = (u as f64 - xc, v as f64 - yc);
                    (xc + cs * dx + sn * dy, yc - sn * dx + cs * dy)
                },
                true,
            )
        }
        AugmentOp::Brightness(f) => {
            if !(f > 0.0) {
                return Err(Error::Contract(alloc::format!("brightness factor {} must be positive", f)));
            }
            let mut out = s.clone();
            out.rgb = s.rgb.map(|v| (v * f).clamp(0.0, 1.0));
            Ok(out)
        }
    }
}

/// Random flip, ±5° rotation, brightness in `[0.8, 1.2]` and a crop to
/// `out_w × out_h` at a random offset.
pub fn random_augment(s: &Sample, out_w: usize, out_h: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let mut ops = Vec::with_capacity(4);
    if rng.gen_bool(0.5) {
        ops.push(AugmentOp::HFlip);
    }
    ops.push(AugmentOp::Rotate(rng.gen_range(-5.0..5.0)));
    ops.push(AugmentOp::Brightness(rng.gen_range(0.8..1.2)));
    if out_w > s.width() || out_h > s.height() {
        return Err(contract!("crop {}x{} larger than {}x{}", out_w, out_h, s.width(), s.height()));
    }
    ops.push(AugmentOp::Crop {
        x0: rng.gen_range(0..=s.width() - out_w),
        y0: rng.gen_range(0..=s.height() - out_h),
        width: out_w,
        height: out_h,
    });
    augment(s, &ops)
}
