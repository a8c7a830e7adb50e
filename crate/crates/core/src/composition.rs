//! Layer mixing: `I = m * y1 + (1 - m) * y2` in all its variants (spatial
//! masks, constant opacities, coupled mixtures, video frames, haze model).

use crate::error::{Error, Result, Warning};
use crate::image::Image;
use crate::scalar::Scalar;

/// Mixing coefficient: a one-channel map or a single constant.
#[derive(Clone, Debug, PartialEq)]
pub enum Mask<T> {
    Spatial(Image<T>),
    Scalar(T),
}

impl<T: Scalar> Mask<T> {
    /// Value at pixel `(y, x)`.
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        match self {
            Mask::Spatial(m) => m.get(0, y, x),
            Mask::Scalar(a) => *a,
        }
    }

    /// Materializes the mask as a one-channel image of the given size.
    pub fn to_image(&self, height: usize, width: usize) -> Image<T> {
        match self {
            Mask::Spatial(m) => m.clone(),
            Mask::Scalar(a) => Image::filled(1, height, width, *a),
        }
    }

    pub fn as_scalar(&self) -> Option<T> {
        match self {
            Mask::Scalar(a) => Some(*a),
            Mask::Spatial(_) => None,
        }
    }

    fn check(&self, layer: &Image<T>) -> Result<()> {
        let in_range = |v: T| v >= T::zero() && v <= T::one();
        match self {
            Mask::Spatial(m) => {
                if m.channels() != 1 || !m.same_spatial(layer) {
                    return Err(Error::shape(format!(
                        "mask {:?} incompatible with layer {:?}",
                        m.shape(),
                        layer.shape()
                    )));
                }
                if !m.data().iter().all(|&v| in_range(v)) {
                    return Err(Error::domain("mask values must lie in [0, 1]"));
                }
            }
            Mask::Scalar(a) => {
                if !in_range(*a) {
                    return Err(Error::domain(format!("opacity {a} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

/// Extra per-task outputs carried next to the layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerExtras<T> {
    /// Initial airlight colour used by dehazing.
    pub airlight_color: Option<[T; 3]>,
    /// Per-channel global colour shift removed from the layers.
    pub ambiguity_offset: Option<Vec<T>>,
    /// The mask weights `y2` instead of `y1` (watermark layers).
    pub mask_weights_second: bool,
}

/// One decomposition: two layers, the mask mixing them and the resulting
/// reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSet<T> {
    pub y1: Image<T>,
    pub y2: Image<T>,
    pub mask: Mask<T>,
    pub reconstruction: Image<T>,
    pub extras: LayerExtras<T>,
}

impl<T: Scalar> LayerSet<T> {
    /// Assembles a layer set, computing the reconstruction from the layers.
    pub fn new(mask: Mask<T>, y1: Image<T>, y2: Image<T>) -> Result<Self> {
        let reconstruction = mix(&mask, &y1, &y2)?;
        Ok(LayerSet {
            y1,
            y2,
            mask,
            reconstruction,
            extras: LayerExtras::default(),
        })
    }
}

/// Per-pixel convex combination `m * y1 + (1 - m) * y2`. A one-channel mask
/// applies to every channel of the layers.
pub fn mix<T: Scalar>(mask: &Mask<T>, y1: &Image<T>, y2: &Image<T>) -> Result<Image<T>> {
    y1.ensure_same_shape(y2, "mixed layers differ")?;
    mask.check(y1)?;
    Ok(mix_unchecked(mask, y1, y2))
}

pub(crate) fn mix_unchecked<T: Scalar>(mask: &Mask<T>, y1: &Image<T>, y2: &Image<T>) -> Image<T> {
    Image::from_fn(y1.channels(), y1.height(), y1.width(), |c, y, x| {
        let m = mask.at(y, x);
        m * y1.get(c, y, x) + (T::one() - m) * y2.get(c, y, x)
    })
}

/// Gradients of a scalar objective through [`mix`].
pub(crate) struct MixGrad<T> {
    pub y1: Image<T>,
    pub y2: Image<T>,
    pub mask: Mask<T>,
}

pub(crate) fn mix_backward<T: Scalar>(
    mask: &Mask<T>,
    y1: &Image<T>,
    y2: &Image<T>,
    grad: &Image<T>,
) -> MixGrad<T> {
    let (c, h, w) = y1.shape();
    let g1 = Image::from_fn(c, h, w, |ci, y, x| mask.at(y, x) * grad.get(ci, y, x));
    let g2 = Image::from_fn(c, h, w, |ci, y, x| {
        (T::one() - mask.at(y, x)) * grad.get(ci, y, x)
    });
    let mut gm = Image::zeros(1, h, w);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = gm.get(0, y, x) + (y1.get(ci, y, x) - y2.get(ci, y, x)) * grad.get(ci, y, x);
                gm.set(0, y, x, v);
            }
        }
    }
    let mask = match mask {
        Mask::Spatial(_) => Mask::Spatial(gm),
        Mask::Scalar(_) => Mask::Scalar(gm.sum()),
    };
    MixGrad {
        y1: g1,
        y2: g2,
        mask,
    }
}

/// Two mixtures of the same layers with constant opacities.
#[derive(Clone, Debug)]
pub struct TwoMixtures<T> {
    pub first: Image<T>,
    pub second: Image<T>,
    pub warning: Option<Warning>,
}

/// `I(k) = alpha_k * y1 + (1 - alpha_k) * y2` for `k = 1, 2`. Equal opacities
/// make the pair non-identifiable; that is reported as a warning.
pub fn mix_two_mixtures<T: Scalar>(
    alpha1: T,
    alpha2: T,
    y1: &Image<T>,
    y2: &Image<T>,
) -> Result<TwoMixtures<T>> {
    let first = mix(&Mask::Scalar(alpha1), y1, y2)?;
    let second = mix(&Mask::Scalar(alpha2), y1, y2)?;
    let warning = if alpha1 == alpha2 {
        log::warn!("two mixtures share opacity {alpha1}; layers are not identifiable");
        Some(Warning::NonIdentifiableMixtures)
    } else {
        None
    };
    Ok(TwoMixtures {
        first,
        second,
        warning,
    })
}

/// Second layer of a video mixture: one image per frame, or a single static
/// image shared by every frame.
#[derive(Clone, Copy, Debug)]
pub enum SecondLayer<'a, T> {
    PerFrame(&'a [Image<T>]),
    Static(&'a Image<T>),
}

/// Frame-wise [`mix`].
pub fn mix_video<T: Scalar>(
    masks: &[Mask<T>],
    layer1_frames: &[Image<T>],
    layer2: SecondLayer<'_, T>,
) -> Result<Vec<Image<T>>> {
    let n = layer1_frames.len();
    if masks.len() != n {
        return Err(Error::shape(format!("{} masks for {n} frames", masks.len())));
    }
    if let SecondLayer::PerFrame(frames) = layer2 {
        if frames.len() != n {
            return Err(Error::shape(format!(
                "{} second-layer frames for {n} frames",
                frames.len()
            )));
        }
    }
    (0..n)
        .map(|i| {
            let y2 = match layer2 {
                SecondLayer::PerFrame(frames) => &frames[i],
                SecondLayer::Static(img) => img,
            };
            mix(&masks[i], &layer1_frames[i], y2)
        })
        .collect()
}
