//! Spatial guidance that breaks layer ambiguity: a crude saliency map used to
//! reweight per-layer reconstruction early on, and bounding boxes that
//! confine watermark masks.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{clamp_index, Image};
use crate::scalar::Scalar;

/// Default length of the hint phase in iterations.
pub const HINT_ITERATIONS: usize = 500;

/// Axis-aligned pixel rectangle, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        BBox { x, y, w, h }
    }

    pub fn full(height: usize, width: usize) -> Self {
        BBox::new(0, 0, width, height)
    }

    pub fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.x + self.w > width || self.y + self.h > height {
            return Err(Error::config(format!(
                "bbox {},{},{},{} exceeds {width}x{height} image",
                self.x, self.y, self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    /// One-channel 0/1 map of the box.
    pub fn indicator<T: Scalar>(&self, height: usize, width: usize) -> Result<Image<T>> {
        self.check(height, width)?;
        Ok(Image::from_fn(1, height, width, |_, y, x| {
            if self.contains(y, x) {
                T::one()
            } else {
                T::zero()
            }
        }))
    }
}

impl FromStr for BBox {
    type Err = Error;

    /// Parses `X,Y,W,H`.
    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::config(format!("bad bbox '{s}': {e}")))?;
        match parts[..] {
            [x, y, w, h] => Ok(BBox::new(x, y, w, h)),
            _ => Err(Error::config(format!("bbox '{s}' needs four integers X,Y,W,H"))),
        }
    }
}

/// How the hint weights return to uniform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fade {
    /// Full strength until `active_until`, then uniform.
    #[default]
    Step,
    /// Linear blend towards uniform, reaching it at `active_until`.
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HintSchedule<T> {
    pub saliency: Option<Image<T>>,
    pub bbox: Option<BBox>,
    pub active_until: usize,
    pub fade: Fade,
}

impl<T: Scalar> Default for HintSchedule<T> {
    fn default() -> Self {
        HintSchedule::none()
    }
}

impl<T: Scalar> HintSchedule<T> {
    pub fn none() -> Self {
        HintSchedule {
            saliency: None,
            bbox: None,
            active_until: HINT_ITERATIONS,
            fade: Fade::Step,
        }
    }

    pub fn with_saliency(saliency: Image<T>) -> Self {
        HintSchedule {
            saliency: Some(saliency),
            ..Self::none()
        }
    }

    /// Whether saliency weighting still differs from uniform at `iteration`.
    pub fn is_active(&self, iteration: usize) -> bool {
        self.saliency.is_some() && iteration < self.active_until
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if let Some(s) = &self.saliency {
            if s.channels() != 1 || s.height() != height || s.width() != width {
                return Err(Error::shape("saliency map must be one channel of the input size"));
            }
        }
        if let Some(b) = &self.bbox {
            b.check(height, width)?;
        }
        Ok(())
    }
}

/// Box mean with edge-replicating borders over a `(2r+1)^2` window.
pub(crate) fn box_mean<T: Scalar>(img: &Image<T>, radius: usize) -> Image<T> {
    let (c, h, w) = img.shape();
    let r = radius as isize;
    let n = T::from_usize_lossy(2 * radius + 1);
    // separable: rows then columns
    let rows = Image::from_fn(c, h, w, |ci, y, x| {
        let mut s = T::zero();
        for dx in -r..=r {
            s += img.get(ci, y, clamp_index(x as isize + dx, w));
        }
        s / n
    });
    Image::from_fn(c, h, w, |ci, y, x| {
        let mut s = T::zero();
        for dy in -r..=r {
            s += rows.get(ci, clamp_index(y as isize + dy, h), x);
        }
        s / n
    })
}

/// Colour distinctness map: distance of each blurred pixel from the image's
/// mean colour in an opponent space, smoothed and scaled to a maximum of 1.
/// A constant image yields all zeros.
pub fn compute_saliency<T: Scalar>(input: &Image<T>) -> Result<Image<T>> {
    let (c, h, w) = input.shape();
    if input.is_empty() {
        return Err(Error::shape("saliency of an empty image"));
    }
    let opp = if c == 3 {
        let third = T::lit(1.0 / 3.0);
        let half = T::lit(0.5);
        Image::from_fn(3, h, w, |k, y, x| {
            let (r, g, b) = (input.get(0, y, x), input.get(1, y, x), input.get(2, y, x));
            match k {
                0 => (r + g + b) * third,
                1 => r - g,
                _ => (r + g) * half - b,
            }
        })
    } else {
        Image::from_fn(1, h, w, |_, y, x| {
            (0..c).map(|k| input.get(k, y, x)).sum::<T>() / T::from_usize_lossy(c)
        })
    };
    let scale = h.min(w);
    let blurred = box_mean(&opp, (scale / 64).max(1));
    let mean = blurred.mean_color();
    let dist = Image::from_fn(1, h, w, |_, y, x| {
        (0..blurred.channels())
            .map(|k| {
                let d = blurred.get(k, y, x) - mean[k];
                d * d
            })
            .sum::<T>()
            .sqrt()
    });
    let smooth = box_mean(&dist, (scale / 32).max(1));
    let max = smooth.max_value();
    if !(max > T::lit(1e-6)) {
        return Ok(Image::zeros(1, h, w));
    }
    Ok(smooth.map(|v| (v / max).max(T::zero()).min(T::one())))
}

/// Per-layer reconstruction weights `(w1, w2)` at `iteration`. While the hint
/// is active `w1 ∝ s` and `w2 ∝ 1 - s`, each with mean 1; afterwards, or
/// without a saliency map, both are uniform ones.
pub fn hint_weight_maps<T: Scalar>(
    schedule: &HintSchedule<T>,
    iteration: usize,
    height: usize,
    width: usize,
) -> Result<(Image<T>, Image<T>)> {
    let uniform = || Image::filled(1, height, width, T::one());
    let Some(s) = schedule.saliency.as_ref().filter(|_| iteration < schedule.active_until) else {
        return Ok((uniform(), uniform()));
    };
    if s.channels() != 1 || s.height() != height || s.width() != width {
        return Err(Error::shape("saliency map does not match the requested shape"));
    }
    let normalized = |m: Image<T>| {
        let mean = m.mean();
        if mean > T::zero() {
            m.scale(T::one() / mean)
        } else {
            uniform()
        }
    };
    let mut w1 = normalized(s.clone());
    let mut w2 = normalized(s.map(|v| T::one() - v));
    if schedule.fade == Fade::Linear {
        let f = T::from_usize_lossy(iteration) / T::from_usize_lossy(schedule.active_until.max(1));
        let keep = T::one() - f;
        w1 = w1.map(|v| keep * v + f);
        w2 = w2.map(|v| keep * v + f);
    }
    Ok((w1, w2))
}

/// Forces every pixel of `m` outside `bbox` to exactly 0.
pub fn bbox_mask_constraint<T: Scalar>(bbox: &BBox, m: &Image<T>) -> Result<Image<T>> {
    bbox.check(m.height(), m.width())?;
    let (c, h, w) = m.shape();
    Ok(Image::from_fn(c, h, w, |ci, y, x| {
        if bbox.contains(y, x) {
            m.get(ci, y, x)
        } else {
            T::zero()
        }
    }))
}
