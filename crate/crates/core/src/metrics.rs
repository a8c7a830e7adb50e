//! Evaluation metrics and the mixture-complexity diagnostic.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GeneratorSpec;
use crate::image::Image;
use crate::optimizer::{single_dip_fit, OptimConfig};
use crate::scalar::Scalar;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Iterations averaged into the final loss of a diagnostic arm.
pub const FINAL_LOSS_WINDOW: usize = 10;

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`.
pub fn psnr<T: Scalar>(x: &Image<T>, reference: &Image<T>) -> Result<f64> {
    x.ensure_same_shape(reference, "psnr")?;
    if x.is_empty() {
        return Err(Error::shape("psnr of an empty image"));
    }
    let mse = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Pearson correlation over all samples after removing each channel's mean,
/// so a per-channel constant offset does not change it. Constant inputs give 0.
pub fn layer_correlation<T: Scalar>(y: &Image<T>, gt: &Image<T>) -> Result<f64> {
    y.ensure_same_shape(gt, "layer correlation")?;
    let (mut cov, mut vy, mut vg) = (0.0, 0.0, 0.0);
    for c in 0..y.channels() {
        let (py, pg) = (y.plane(c), gt.plane(c));
        let n = py.len().max(1) as f64;
        let my = py.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let mg = pg.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        for (&a, &b) in py.iter().zip(pg) {
            let (a, b) = (a.as_f64() - my, b.as_f64() - mg);
            cov += a * b;
            vy += a * a;
            vg += b * b;
        }
    }
    if vy <= 0.0 || vg <= 0.0 {
        log::warn!("correlation with a constant image is undefined, reporting 0");
        return Ok(0.0);
    }
    Ok((cov / (vy * vg).sqrt()).clamp(-1.0, 1.0))
}

/// Intersection over union of two binary masks; two empty masks score 1.
pub fn iou<T: Scalar>(mask: &Image<T>, gt: &Image<T>) -> Result<f64> {
    mask.ensure_same_shape(gt, "iou")?;
    let binary = |img: &Image<T>| img.data().iter().all(|&v| v == T::zero() || v == T::one());
    if !binary(mask) || !binary(gt) {
        return Err(Error::domain("iou needs masks with values in {0, 1}"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in mask.data().iter().zip(gt.data()) {
        let (a, b) = (a == T::one(), b == T::one());
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean RMS distance from every `patch x patch` window to its nearest window
/// at a different position (stride 1, all channels). Low values mean strong
/// internal recurrence.
pub fn patch_diversity<T: Scalar>(img: &Image<T>, patch: usize) -> Result<f64> {
    let (c, h, w) = img.shape();
    if patch == 0 || patch > h.min(w) {
        return Err(Error::config(format!("patch size {patch} does not fit a {h}x{w} image")));
    }
    let (ph, pw) = (h - patch + 1, w - patch + 1);
    if ph * pw < 2 {
        return Err(Error::config("need at least two patch positions"));
    }
    let dim = c * patch * patch;
    let mut patches = Vec::with_capacity(ph * pw * dim);
    for y in 0..ph {
        for x in 0..pw {
            for ci in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        patches.push(img.get(ci, y + dy, x + dx).as_f64());
                    }
                }
            }
        }
    }
    let rows: Vec<&[f64]> = patches.chunks_exact(dim).collect();
    let mut total = 0.0;
    for (i, a) in rows.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, b) in rows.iter().enumerate() {
            if i == j {
                continue;
            }
            let mut d = 0.0;
            for (p, q) in a.iter().zip(b.iter()) {
                d += (p - q) * (p - q);
                if d >= best {
                    break;
                }
            }
            best = best.min(d);
        }
        total += (best / dim as f64).sqrt();
    }
    Ok(total / rows.len() as f64)
}

/// How the two images of a diagnostic pair are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    /// Pixelwise mean of the two images.
    Superimpose,
    /// Left half of the first image next to the right half of the second.
    SplitLr,
}

impl MixMode {
    pub fn combine<T: Scalar>(&self, a: &Image<T>, b: &Image<T>) -> Result<Image<T>> {
        a.ensure_same_shape(b, "diagnostic pair")?;
        Ok(match self {
            MixMode::Superimpose => a.zip_map(b, |p, q| T::lit(0.5) * (p + q)),
            MixMode::SplitLr => {
                let half = a.width() / 2;
                Image::from_fn(a.channels(), a.height(), a.width(), |c, y, x| {
                    if x < half {
                        a.get(c, y, x)
                    } else {
                        b.get(c, y, x)
                    }
                })
            }
        })
    }
}

/// Loss curves and final losses of one pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairResult {
    pub curve_a: Vec<f64>,
    pub curve_b: Vec<f64>,
    pub curve_mixture: Vec<f64>,
    pub final_a: f64,
    pub final_b: f64,
    pub final_mixture: f64,
    /// `final_mixture / max(final_a, final_b)`.
    pub ratio: f64,
    pub mixture_harder: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub mode: MixMode,
    /// Blend weights of the superimposed mixture.
    pub mix_weights: [f64; 2],
    pub iterations: usize,
    pub seed: u64,
    pub samples: usize,
    pub pairs: Vec<PairResult>,
    /// Fraction of pairs where the mixture ends with the larger loss.
    pub fraction_harder: f64,
}

impl DiagnosticReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `iteration,component_a,component_b,mixture` for pair `index`.
    pub fn curve_csv(&self, index: usize) -> String {
        let p = &self.pairs[index];
        let mut s = String::from("iteration,component_a,component_b,mixture\n");
        for (i, ((a, b), m)) in p.curve_a.iter().zip(&p.curve_b).zip(&p.curve_mixture).enumerate() {
            let _ = writeln!(s, "{i},{a},{b},{m}");
        }
        s
    }

    /// Writes `report.json` and `pair_XXX.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.json");
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        for i in 0..self.pairs.len() {
            let path = dir.join(format!("pair_{i:03}.csv"));
            std::fs::write(&path, self.curve_csv(i)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn final_loss(curve: &[f64]) -> f64 {
    let tail = &curve[curve.len().saturating_sub(FINAL_LOSS_WINDOW)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

/// Fits a single generator to each component and to their mixture, for every
/// pair, and records whether the mixture is the hardest of the three.
pub fn mixture_complexity_experiment<T: Scalar>(
    pairs: &[(Image<T>, Image<T>)],
    mode: MixMode,
    spec: &GeneratorSpec,
    config: &OptimConfig,
) -> Result<DiagnosticReport> {
    if pairs.len() < 2 {
        return Err(Error::config("the diagnostic needs at least 2 pairs"));
    }
    if config.iterations == 0 {
        return Err(Error::config("the diagnostic needs at least one iteration"));
    }
    let shape = pairs[0].0.shape();
    let spec = spec.clone().with_output_channels(shape.0);
    let mut results = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        if a.shape() != shape || b.shape() != shape {
            return Err(Error::shape("all diagnostic images must share one size"));
        }
        let mixture = mode.combine(a, b)?;
        let fit = |img: &Image<T>| single_dip_fit(img, &spec, config).map(|s| s.totals());
        let (curve_a, curve_b, curve_mixture) = (fit(a)?, fit(b)?, fit(&mixture)?);
        let (final_a, final_b, final_mixture) = (final_loss(&curve_a), final_loss(&curve_b), final_loss(&curve_mixture));
        let hardest = final_a.max(final_b);
        results.push(PairResult {
            ratio: if hardest > 0.0 { final_mixture / hardest } else { f64::INFINITY },
            mixture_harder: final_mixture > hardest,
            curve_a,
            curve_b,
            curve_mixture,
            final_a,
            final_b,
            final_mixture,
        });
    }
    let harder = results.iter().filter(|r| r.mixture_harder).count();
    Ok(DiagnosticReport {
        mode,
        mix_weights: [0.5, 0.5],
        iterations: config.iterations,
        seed: config.seed,
        samples: results.len(),
        fraction_harder: harder as f64 / results.len() as f64,
        pairs: results,
    })
}
