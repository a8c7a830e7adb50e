//! Image loading, result export, run manifests and the flat config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::composition::{LayerSet, Mask};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::LossReport;
use crate::optimizer::RunState;
use crate::scalar::Scalar;

/// Longest side of the working resolution unless configured otherwise.
pub const DEFAULT_MAX_SIDE: usize = 384;

/// Decodes a PNG, JPEG or PPM file into values in `[0, 1]`. 8-bit values map
/// to `v / 255`, 16-bit values to `v / 65535`. Grayscale stays one channel
/// and alpha channels are dropped.
pub fn load_image<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let img = image::open(path).map_err(|e| Error::io(path, e))?;
    Ok(from_dynamic(img))
}

fn from_dynamic<T: Scalar>(img: DynamicImage) -> Image<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planar = |channels: usize, samples: &[f64]| {
        Image::from_fn(channels, h, w, |c, y, x| T::lit(samples[(y * w + x) * channels + c]))
    };
    let scale8 = |v: &[u8]| v.iter().map(|&s| s as f64 / 255.0).collect::<Vec<_>>();
    let scale16 = |v: &[u16]| v.iter().map(|&s| s as f64 / 65535.0).collect::<Vec<_>>();
    match img {
        DynamicImage::ImageLuma8(b) => planar(1, &scale8(b.as_raw())),
        DynamicImage::ImageLumaA8(_) => planar(1, &scale8(img.to_luma8().as_raw())),
        DynamicImage::ImageLuma16(b) => planar(1, &scale16(b.as_raw())),
        DynamicImage::ImageLumaA16(_) => planar(1, &scale16(img.to_luma16().as_raw())),
        DynamicImage::ImageRgb8(b) => planar(3, &scale8(b.as_raw())),
        DynamicImage::ImageRgb16(b) => planar(3, &scale16(b.as_raw())),
        DynamicImage::ImageRgba16(_) => planar(3, &scale16(img.to_rgb16().as_raw())),
        DynamicImage::ImageRgb32F(b) => {
            planar(3, &b.as_raw().iter().map(|&v| (v as f64).clamp(0.0, 1.0)).collect::<Vec<_>>())
        }
        other => planar(3, &scale8(other.to_rgb8().as_raw())),
    }
}

/// Output size whose longest side is at most `max_side`, keeping the aspect.
pub fn working_size(height: usize, width: usize, max_side: usize) -> (usize, usize) {
    let longest = height.max(width);
    if longest <= max_side || max_side == 0 {
        return (height, width);
    }
    let s = max_side as f64 / longest as f64;
    (
        ((height as f64 * s).round() as usize).max(1),
        ((width as f64 * s).round() as usize).max(1),
    )
}

/// Area-averaging resize: every output pixel is the mean of the input area
/// it covers, with fractional overlap weights. Only shrinks.
pub fn resize_area<T: Scalar>(img: &Image<T>, height: usize, width: usize) -> Result<Image<T>> {
    let (c, h, w) = img.shape();
    if height == 0 || width == 0 || height > h || width > w {
        return Err(Error::config(format!(
            "area resize goes from {h}x{w} down to a smaller size, not {height}x{width}"
        )));
    }
    let weights = |n_in: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        let step = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let (lo, hi) = (o as f64 * step, (o + 1) as f64 * step);
                let mut taps = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < n_in {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((i, overlap / step));
                    }
                    i += 1;
                }
                taps
            })
            .collect()
    };
    let (wy, wx) = (weights(h, height), weights(w, width));
    Ok(Image::from_fn(c, height, width, |ci, oy, ox| {
        let mut acc = 0.0;
        for &(sy, fy) in &wy[oy] {
            for &(sx, fx) in &wx[ox] {
                acc += fy * fx * img.get(ci, sy, sx).as_f64();
            }
        }
        T::lit(acc)
    }))
}

/// Shrinks `img` to the working resolution for `max_side`.
pub fn to_working_resolution<T: Scalar>(img: &Image<T>, max_side: usize) -> Result<Image<T>> {
    let (h, w) = working_size(img.height(), img.width(), max_side);
    if (h, w) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    resize_area(img, h, w)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameOptions {
    pub max_frames: Option<usize>,
    pub stride: usize,
    /// Working resolution; `None` keeps frames as decoded and requires
    /// them to share one size.
    pub max_side: Option<usize>,
}

impl Default for FrameOptions {
    fn default() -> Self {
        FrameOptions {
            max_frames: None,
            stride: 1,
            max_side: Some(DEFAULT_MAX_SIDE),
        }
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg" | "ppm" | "pgm" | "pnm")
    )
}

/// Sorted image files of a directory.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every `stride`-th frame of a directory in name order. With a working
/// resolution, frames are brought to the size of the first frame at that
/// resolution.
pub fn load_frames<T: Scalar>(dir: &Path, opts: &FrameOptions) -> Result<Vec<Image<T>>> {
    if opts.stride == 0 {
        return Err(Error::config("frame stride must be at least 1"));
    }
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::io(dir, "no frames found"));
    }
    let picked = files
        .iter()
        .step_by(opts.stride)
        .take(opts.max_frames.unwrap_or(usize::MAX));
    let mut frames: Vec<Image<T>> = Vec::new();
    for path in picked {
        let img = load_image::<T>(path)?;
        let img = match (opts.max_side, frames.first()) {
            (None, _) => img,
            (Some(side), None) => to_working_resolution(&img, side)?,
            (Some(_), Some(first)) => {
                if img.height() < first.height() || img.width() < first.width() {
                    return Err(Error::shape(format!("{} is smaller than the first frame", path.display())));
                }
                resize_area(&img, first.height(), first.width())?
            }
        };
        if let Some(first) = frames.first() {
            if !first.same_shape(&img) {
                return Err(Error::shape(format!(
                    "frame {} is {:?}, expected {:?}",
                    path.display(),
                    img.shape(),
                    first.shape()
                )));
            }
        }
        frames.push(img);
    }
    Ok(frames)
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// Writes a 1- or 3-channel image as an 8-bit PNG, clipping to `[0, 1]`.
pub fn save_png8<T: Scalar>(img: &Image<T>, path: &Path) -> Result<()> {
    let (c, h, w) = img.shape();
    let px = |ch: usize, y: usize, x: usize| quantize(img.get(ch, y, x).as_f64(), 255.0) as u8;
    let result = match c {
        1 => ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| Luma([px(0, y as usize, x as usize)]))
            .save(path),
        3 => ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([px(0, y, x), px(1, y, x), px(2, y, x)])
        })
        .save(path),
        _ => return Err(Error::shape(format!("cannot write a {c}-channel image"))),
    };
    result.map_err(|e| Error::io(path, e))
}

/// Writes a 1- or 3-channel image as a 16-bit PNG, clipping to `[0, 1]`.
pub fn save_png16<T: Scalar>(img: &Image<T>, path: &Path) -> Result<()> {
    let (c, h, w) = img.shape();
    let px = |ch: usize, y: usize, x: usize| quantize(img.get(ch, y, x).as_f64(), 65535.0) as u16;
    let result = match c {
        1 => ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| Luma([px(0, y as usize, x as usize)]))
            .save(path),
        3 => ImageBuffer::<Rgb<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([px(0, y, x), px(1, y, x), px(2, y, x)])
        })
        .save(path),
        _ => return Err(Error::shape(format!("cannot write a {c}-channel image"))),
    };
    result.map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce and audit a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub task: String,
    /// Fully resolved configuration.
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub version: String,
    pub duration_secs: f64,
    pub loss: LossReport,
    pub best_iteration: usize,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub airlight_color: Option<[f64; 3]>,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(task: &str, config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            task: task.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: 0.0,
            loss: LossReport::default(),
            best_iteration: 0,
            iterations: 0,
            airlight_color: None,
            warnings: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records the hash of every input file.
    pub fn hash_inputs(&mut self, paths: &[PathBuf]) -> Result<()> {
        for p in paths {
            self.inputs.push(FileDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            });
        }
        Ok(())
    }

    /// Re-hashes every listed output under `dir`; returns the first mismatch.
    pub fn verify_outputs(&self, dir: &Path) -> Result<()> {
        for o in &self.outputs {
            let path = dir.join(&o.path);
            if sha256_file(&path)? != o.sha256 {
                return Err(Error::io(path, "checksum mismatch"));
            }
        }
        Ok(())
    }
}

fn mask_image<T: Scalar>(layers: &LayerSet<T>) -> Image<T> {
    let (h, w) = (layers.y1.height(), layers.y1.width());
    match &layers.mask {
        Mask::Spatial(m) => m.clone(),
        Mask::Scalar(a) => Image::filled(1, h, w, *a),
    }
}

fn write_layerset<T: Scalar>(layers: &LayerSet<T>, dir: &Path, prefix: &str, files: &mut Vec<String>) -> Result<()> {
    let mut put = |name: &str, write: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        write(&dir.join(prefix).join(name))?;
        files.push(format!("{prefix}{name}"));
        Ok(())
    };
    put("y1.png", &|p| save_png8(&layers.y1, p))?;
    put("y2.png", &|p| save_png8(&layers.y2, p))?;
    put("mask.png", &|p| save_png16(&mask_image(layers), p))?;
    put("reconstruction.png", &|p| save_png8(&layers.reconstruction, p))?;
    if let Some(a) = layers.extras.airlight_color {
        let (h, w) = (layers.y1.height(), layers.y1.width());
        let img = Image::from_fn(3, h, w, |c, _, _| a[c]);
        put("airlight.png", &|p| save_png8(&img, p))?;
    }
    Ok(())
}

/// `iteration,total,reconst,excl,reg,best`.
pub fn loss_curve_csv(state: &RunState) -> String {
    let mut s = String::from("iteration,total,reconst,excl,reg,best\n");
    for (i, (r, b)) in state.history.iter().zip(&state.best_curve).enumerate() {
        s.push_str(&format!("{i},{},{},{},{},{b}\n", r[0], r[1], r[2], r[3]));
    }
    s
}

/// Writes the layers of a run into `out_dir`: `y1.png`, `y2.png`, a 16-bit
/// `mask.png`, `reconstruction.png` (plus `airlight.png` for dehazing),
/// `loss_curve.csv` and `manifest.json`. Several layer sets (video) go to
/// `frame_XXX/` subdirectories. Returns the written paths relative to
/// `out_dir`, manifest last.
pub fn export_results<T: Scalar>(
    layers: &[LayerSet<T>],
    state: &RunState,
    manifest: &mut RunManifest,
    out_dir: &Path,
) -> Result<Vec<String>> {
    if layers.is_empty() {
        return Err(Error::config("nothing to export"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    if layers.len() == 1 {
        write_layerset(&layers[0], out_dir, "", &mut files)?;
    } else {
        for (i, l) in layers.iter().enumerate() {
            let prefix = format!("frame_{i:03}/");
            let sub = out_dir.join(&prefix);
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            write_layerset(l, out_dir, &prefix, &mut files)?;
        }
    }
    let csv = out_dir.join("loss_curve.csv");
    fs::write(&csv, loss_curve_csv(state)).map_err(|e| Error::io(&csv, e))?;
    files.push("loss_curve.csv".to_string());

    manifest.loss = state.best_report.clone();
    manifest.best_iteration = state.best_iteration;
    manifest.iterations = state.iteration;
    manifest.airlight_color = layers[0]
        .extras
        .airlight_color
        .map(|a| [a[0].as_f64(), a[1].as_f64(), a[2].as_f64()]);
    manifest.outputs = files
        .iter()
        .map(|f| {
            Ok(FileDigest {
                path: f.clone(),
                sha256: sha256_file(&out_dir.join(f))?,
            })
        })
        .collect::<Result<_>>()?;
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    files.push("manifest.json".to_string());
    Ok(files)
}

/// Flat `key = value` run configuration (TOML syntax, no tables). Every key
/// is optional; keys other than the listed ones and `weight_<term>` are
/// rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FileConfig {
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub augment: Option<bool>,
    pub seed: Option<u64>,
    pub log_every: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    /// Relative weights of individual regularizer terms, e.g.
    /// `weight_airlight = 20.0`.
    #[serde(flatten)]
    pub term_weights: BTreeMap<String, toml::Value>,
    pub saliency_hints: Option<bool>,
    pub hint_iterations: Option<usize>,
    pub hint_fade: Option<String>,
    pub bbox: Option<String>,
    pub airlight: Option<[f64; 3]>,
    pub alpha_model: Option<String>,
    pub noise_delta_ratio: Option<f64>,
    pub exclusion_scales: Option<usize>,
    pub depth: Option<usize>,
    pub channels: Option<usize>,
    pub skip_channels: Option<usize>,
    pub input_channels: Option<usize>,
    pub kernel_size: Option<usize>,
    pub max_side: Option<usize>,
    pub max_frames: Option<usize>,
    pub frame_stride: Option<usize>,
    pub guided_radius: Option<usize>,
    pub guided_eps: Option<f64>,
    pub diagnose_mode: Option<String>,
    pub diagnose_size: Option<usize>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: FileConfig = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.term_weight_map()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// `weight_<term>` entries as term name to weight.
    pub fn term_weight_map(&self) -> Result<BTreeMap<String, f64>> {
        self.term_weights
            .iter()
            .map(|(k, v)| {
                let name = k
                    .strip_prefix("weight_")
                    .ok_or_else(|| Error::config(format!("config: unknown key '{k}'")))?;
                let w = v
                    .as_float()
                    .or_else(|| v.as_integer().map(|i| i as f64))
                    .ok_or_else(|| Error::config(format!("config: '{k}' must be a number")))?;
                Ok((name.to_string(), w))
            })
            .collect()
    }
}
