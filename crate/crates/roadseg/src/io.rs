//! Image, intrinsics, checkpoint and dataset files.
//!
//! Dataset layout: `root/rgb/STEM.png`, `root/depth/STEM.png` (16-bit,
//! metres × 256, 0 = invalid), `root/label/STEM.png` (8-bit, 255 =
//! freespace) and `root/calib/STEM.txt` holding `fx fy cx cy`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use log::warn;
use roadseg_core::checkpoint::{self, Checkpoint};
use roadseg_core::data::Sample;
use roadseg_core::geometry::{CameraIntrinsics, DepthImage};
use roadseg_core::losses::LabelImage;
use roadseg_core::Tensor;

use crate::error::{Result, RunError};

pub const DEPTH_SCALE: f64 = 256.0;

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> RunError + '_ {
    move |source| RunError::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e)),
        _ => Ok(()),
    }
}

/// Reads an 8-bit colour image as a `[1, 3, H, W]` tensor in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, px[c] as f64 / 255.0);
        }
    }
    Ok(t)
}

pub fn write_rgb(path: &Path, rgb: &Tensor) -> Result<()> {
    let [_, _, h, w] = rgb.shape();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (rgb.at(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    ensure_parent(path)?;
    img.save(path).map_err(image_err(path))
}

pub fn read_depth(path: &Path) -> Result<DepthImage> {
    let img = image::open(path).map_err(image_err(path))?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = img.pixels().map(|p| p[0] as f64 / DEPTH_SCALE).collect();
    Ok(DepthImage::new(w, h, values)?)
}

/// Writes depth in 1/256 m steps; invalid and out-of-range values become 0.
pub fn write_depth(path: &Path, depth: &DepthImage) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let z = depth.get(x as usize, y as usize);
        let q = if z.is_finite() && z > 0.0 { (z * DEPTH_SCALE).round() } else { 0.0 };
        Luma([if q <= u16::MAX as f64 { q as u16 } else { 0 }])
    });
    ensure_parent(path)?;
    img.save(path).map_err(image_err(path))
}

pub fn read_label(path: &Path) -> Result<LabelImage> {
    let img = image::open(path).map_err(image_err(path))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = img.pixels().map(|p| u8::from(p[0] > 127)).collect();
    Ok(LabelImage::new(w, h, values)?)
}

pub fn write_label(path: &Path, labels: &LabelImage) -> Result<()> {
    let img = GrayImage::from_fn(labels.width() as u32, labels.height() as u32, |x, y| {
        Luma([labels.get(x as usize, y as usize) * 255])
    });
    ensure_parent(path)?;
    img.save(path).map_err(image_err(path))
}

/// Writes values in `[0, 1]` as `round(255 · v)`.
pub fn write_unit_gray(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let v = values[y as usize * width + x as usize].clamp(0.0, 1.0);
        Luma([(255.0 * v).round() as u8])
    });
    ensure_parent(path)?;
    img.save(path).map_err(image_err(path))
}

pub fn parse_intrinsics(text: &str) -> std::result::Result<CameraIntrinsics, String> {
    let nums: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| format!("'{t}' is not a number")))
        .collect::<std::result::Result<_, _>>()?;
    match nums[..] {
        [fx, fy, cx, cy] => CameraIntrinsics::new(fx, fy, cx, cy).map_err(|e| e.to_string()),
        _ => Err(format!("expected 4 numbers 'fx fy cx cy', found {}", nums.len())),
    }
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    parse_intrinsics(&text).map_err(|message| RunError::Malformed {
        path: path.to_path_buf(),
        message,
    })
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    ensure_parent(path)?;
    let text = format!("{} {} {} {}\n", k.fx, k.fy, k.cx, k.cy);
    fs::write(path, text).map_err(|e| RunError::io(path, e))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, checkpoint::encode(ckpt)).map_err(|e| RunError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| RunError::io(path, e))?;
    Ok(checkpoint::decode(&bytes)?)
}

fn plane_paths(root: &Path, stem: &str) -> [PathBuf; 4] {
    [
        root.join("rgb").join(format!("{stem}.png")),
        root.join("depth").join(format!("{stem}.png")),
        root.join("label").join(format!("{stem}.png")),
        root.join("calib").join(format!("{stem}.txt")),
    ]
}

pub fn save_sample(root: &Path, stem: &str, sample: &Sample) -> Result<()> {
    let [rgb, depth, label, calib] = plane_paths(root, stem);
    write_rgb(&rgb, &sample.rgb)?;
    write_depth(&depth, &sample.depth)?;
    write_label(&label, &sample.labels)?;
    write_intrinsics(&calib, &sample.intrinsics)
}

fn stems_in(dir: &Path, ext: &str) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| RunError::io(dir, e))? {
        let path = entry.map_err(|e| RunError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_owned());
            }
        }
    }
    Ok(out)
}

/// Loads every complete frame under `root`, sorted by stem.
///
/// Frames with a missing or unreadable plane, or with planes of different
/// sizes, are skipped with a warning. A malformed intrinsics file is an
/// error.
pub fn load_dataset(root: &Path) -> Result<Vec<(String, Sample)>> {
    if !root.is_dir() {
        return Err(RunError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let mut stems = BTreeSet::new();
    for (dir, ext) in [("rgb", "png"), ("depth", "png"), ("label", "png"), ("calib", "txt")] {
        stems.extend(stems_in(&root.join(dir), ext)?);
    }
    let mut out = Vec::new();
    for stem in stems {
        let paths = plane_paths(root, &stem);
        if let Some(missing) = paths.iter().find(|p| !p.is_file()) {
            warn!("skipping frame {stem}: {} is missing", missing.display());
            continue;
        }
        let [rgb, depth, label, calib] = &paths;
        let intrinsics = read_intrinsics(calib)?;
        let planes = (|| -> Result<Sample> {
            Ok(Sample {
                rgb: read_rgb(rgb)?,
                depth: read_depth(depth)?,
                labels: read_label(label)?,
                intrinsics,
            })
        })();
        match planes.and_then(|s| s.check().map(|_| s).map_err(RunError::from)) {
            Ok(sample) => out.push((stem, sample)),
            Err(e) => warn!("skipping frame {stem}: {e}"),
        }
    }
    Ok(out)
}
