//! Objective terms: reconstruction, gradient exclusion between layers, and
//! the task regularizers, each with its analytic gradient.
//!
//! The combined objective is
//! `total = reconst + alpha * excl + beta * reg`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::composition::{mix, mix_backward, LayerSet, Mask};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Stabilizer added to the binary-mask denominator.
pub const BINARY_REG_EPS: f64 = 1e-6;
/// Default number of pyramid levels for the exclusion term.
pub const EXCLUSION_SCALES: usize = 3;

/// Weights of the objective. `overrides` holds relative weights of named
/// regularizer sub-terms (`"smoothness"`, `"airlight"`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Self {
        LossWeights {
            alpha,
            beta,
            overrides: BTreeMap::new(),
        }
    }

    pub fn segmentation() -> Self {
        Self::new(0.1, 0.5)
    }

    /// Weak exclusion: with two mixtures the coupled equations already pin
    /// the layers down, and a strong exclusion term flattens them.
    pub fn two_mixtures() -> Self {
        Self::new(0.01, 0.5)
    }

    /// beta = 0.05 on the Laplacian term; the airlight term's relative weight
    /// of 20 makes its absolute weight 1.0.
    pub fn dehaze() -> Self {
        let mut w = Self::new(0.1, 0.05);
        w.overrides.insert("smoothness".into(), 1.0);
        w.overrides.insert("airlight".into(), 20.0);
        w
    }

    pub fn term(&self, name: &str) -> f64 {
        self.overrides.get(name).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.alpha) || !ok(self.beta) || !self.overrides.values().all(|&v| ok(v)) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::segmentation()
    }
}

/// Norm used by the reconstruction term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconNorm {
    #[default]
    Mse,
    L1,
}

/// Task regularizer applied to the mask / second layer.
#[derive(Clone, Debug, PartialEq)]
pub enum RegSelector<T> {
    None,
    BinaryMask,
    /// Laplacian smoothness of the transmission plus deviation of the airlight
    /// layer from `airlight`.
    Dehaze { airlight: [T; 3] },
}

impl<T: Scalar> RegSelector<T> {
    /// Parses `"none"`, `"binary"` or `"dehaze"` (the latter needs a colour).
    pub fn from_name(name: &str, airlight: Option<[T; 3]>) -> Result<Self> {
        match name {
            "none" => Ok(RegSelector::None),
            "binary" => Ok(RegSelector::BinaryMask),
            "dehaze" => airlight
                .map(|airlight| RegSelector::Dehaze { airlight })
                .ok_or_else(|| Error::config("dehaze regularizer needs an airlight colour")),
            other => Err(Error::config(format!("unknown regularizer '{other}'"))),
        }
    }
}

/// Loss terms of one frame / mixture.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameLoss {
    pub index: usize,
    pub total: f64,
    pub reconst: f64,
    pub excl: f64,
    pub reg: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub reconst: f64,
    pub excl: f64,
    pub reg: f64,
    /// Populated when several frames or mixtures contribute.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_frame: Vec<FrameLoss>,
}

impl LossReport {
    /// Averages frame losses into one report.
    pub fn from_frames(frames: Vec<FrameLoss>) -> Self {
        let n = frames.len().max(1) as f64;
        let sum = |f: fn(&FrameLoss) -> f64| frames.iter().map(f).sum::<f64>() / n;
        LossReport {
            total: sum(|f| f.total),
            reconst: sum(|f| f.reconst),
            excl: sum(|f| f.excl),
            reg: sum(|f| f.reg),
            per_frame: if frames.len() > 1 { frames } else { Vec::new() },
        }
    }

    pub fn row(&self) -> [f64; 4] {
        [self.total, self.reconst, self.excl, self.reg]
    }
}

fn count<T: Scalar>(n: usize) -> T {
    T::from_usize_lossy(n.max(1))
}

/// Mean squared error between the input and its reconstruction.
pub fn reconstruction_loss<T: Scalar>(input: &Image<T>, recon: &Image<T>) -> Result<T> {
    Ok(reconstruction_loss_grad(input, recon, ReconNorm::Mse)?.0)
}

/// Loss value and gradient with respect to `recon`.
pub fn reconstruction_loss_grad<T: Scalar>(
    input: &Image<T>,
    recon: &Image<T>,
    norm: ReconNorm,
) -> Result<(T, Image<T>)> {
    input.ensure_same_shape(recon, "reconstruction")?;
    let n: T = count(input.len());
    let two = T::lit(2.0);
    match norm {
        ReconNorm::Mse => {
            let mut value = T::zero();
            let grad = recon.zip_map(input, |r, i| {
                let d = r - i;
                value += d * d;
                two * d / n
            });
            Ok((value / n, grad))
        }
        ReconNorm::L1 => {
            let mut value = T::zero();
            let grad = recon.zip_map(input, |r, i| {
                let d = r - i;
                value += d.abs();
                sign(d) / n
            });
            Ok((value / n, grad))
        }
    }
}

/// `mean(w * (input - recon)^2)` with a one-channel weight map broadcast over
/// channels. Returns the value and the gradient with respect to `recon`.
pub fn weighted_reconstruction_grad<T: Scalar>(
    input: &Image<T>,
    recon: &Image<T>,
    weights: &Image<T>,
) -> Result<(T, Image<T>)> {
    input.ensure_same_shape(recon, "weighted reconstruction")?;
    if weights.channels() != 1 || !weights.same_spatial(input) {
        return Err(Error::shape("weight map must be one channel of the input size"));
    }
    let n: T = count(input.len());
    let two = T::lit(2.0);
    let mut value = T::zero();
    let (c, h, w) = input.shape();
    let grad = Image::from_fn(c, h, w, |ci, y, x| {
        let d = recon.get(ci, y, x) - input.get(ci, y, x);
        let wt = weights.get(0, y, x);
        value += wt * d * d;
        two * wt * d / n
    });
    Ok((value / n, grad))
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// 2x2 average pooling (trailing odd row/column dropped).
fn avg_pool2<T: Scalar>(img: &Image<T>) -> Image<T> {
    let quarter = T::lit(0.25);
    Image::from_fn(img.channels(), img.height() / 2, img.width() / 2, |c, y, x| {
        (img.get(c, 2 * y, 2 * x)
            + img.get(c, 2 * y, 2 * x + 1)
            + img.get(c, 2 * y + 1, 2 * x)
            + img.get(c, 2 * y + 1, 2 * x + 1))
            * quarter
    })
}

fn avg_pool2_backward<T: Scalar>(grad: &Image<T>, h: usize, w: usize) -> Image<T> {
    let quarter = T::lit(0.25);
    let mut out = Image::zeros(grad.channels(), h, w);
    for c in 0..grad.channels() {
        for y in 0..grad.height() {
            for x in 0..grad.width() {
                let g = grad.get(c, y, x) * quarter;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    out.set(c, 2 * y + dy, 2 * x + dx, g);
                }
            }
        }
    }
    out
}

/// Forward differences along x (`w - 1` columns) and y (`h - 1` rows).
fn image_gradients<T: Scalar>(img: &Image<T>) -> (Image<T>, Image<T>) {
    let (c, h, w) = img.shape();
    let gx = Image::from_fn(c, h, w - 1, |ci, y, x| img.get(ci, y, x + 1) - img.get(ci, y, x));
    let gy = Image::from_fn(c, h - 1, w, |ci, y, x| img.get(ci, y + 1, x) - img.get(ci, y, x));
    (gx, gy)
}

fn image_gradients_backward<T: Scalar>(gx: &Image<T>, gy: &Image<T>, h: usize, w: usize) -> Image<T> {
    let c = gx.channels();
    let mut out = Image::zeros(c, h, w);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w - 1 {
                let g = gx.get(ci, y, x);
                out.set(ci, y, x + 1, out.get(ci, y, x + 1) + g);
                out.set(ci, y, x, out.get(ci, y, x) - g);
            }
        }
        for y in 0..h - 1 {
            for x in 0..w {
                let g = gy.get(ci, y, x);
                out.set(ci, y + 1, x, out.get(ci, y + 1, x) + g);
                out.set(ci, y, x, out.get(ci, y, x) - g);
            }
        }
    }
    out
}

/// Value of the exclusion term; see [`exclusion_loss_grad`].
pub fn exclusion_loss<T: Scalar>(y1: &Image<T>, y2: &Image<T>, n_scales: usize) -> Result<T> {
    Ok(exclusion_loss_grad(y1, y2, n_scales)?.0)
}

/// Multi-scale gradient exclusion
///
/// `sum_n mean(tanh(l1 |Dx y1_n|) tanh(l2 |Dx y2_n|)) + (same along y)`,
/// where `y_n` is the image average-pooled `n - 1` times and the balancing
/// factors `l1 = sqrt(S2 / S1)`, `l2 = 1 / l1` use the mean absolute gradient
/// `S_k` of each layer at that scale. The factors are differentiated through.
/// Returns the value and the gradients with respect to both layers.
pub fn exclusion_loss_grad<T: Scalar>(
    y1: &Image<T>,
    y2: &Image<T>,
    n_scales: usize,
) -> Result<(T, Image<T>, Image<T>)> {
    y1.ensure_same_shape(y2, "exclusion layers")?;
    if n_scales == 0 {
        return Err(Error::config("exclusion loss needs at least one scale"));
    }
    let factor = 1usize << (n_scales - 1);
    if y1.height() / factor < 2 || y1.width() / factor < 2 {
        return Err(Error::config(format!(
            "{}x{} image too small for {n_scales} exclusion scales",
            y1.height(),
            y1.width()
        )));
    }

    let mut pyramid = vec![(y1.clone(), y2.clone())];
    for _ in 1..n_scales {
        let (a, b) = pyramid.last().expect("non-empty");
        let next = (avg_pool2(a), avg_pool2(b));
        pyramid.push(next);
    }

    let mut value = T::zero();
    let mut grads = Vec::with_capacity(n_scales);
    for (a, b) in &pyramid {
        let (v, ga, gb) = exclusion_single_scale(a, b);
        value += v;
        grads.push((ga, gb));
    }

    // propagate coarse-scale gradients back down the pyramid
    let (mut g1, mut g2) = grads.pop().expect("at least one scale");
    for level in (0..grads.len()).rev() {
        let (h, w) = (pyramid[level].0.height(), pyramid[level].0.width());
        let (mut f1, mut f2) = grads.pop().expect("one gradient per level");
        f1.add_assign(&avg_pool2_backward(&g1, h, w));
        f2.add_assign(&avg_pool2_backward(&g2, h, w));
        g1 = f1;
        g2 = f2;
    }
    Ok((value, g1, g2))
}

fn exclusion_single_scale<T: Scalar>(y1: &Image<T>, y2: &Image<T>) -> (T, Image<T>, Image<T>) {
    let (c, h, w) = y1.shape();
    let (gx1, gy1) = image_gradients(y1);
    let (gx2, gy2) = image_gradients(y2);
    let m: T = count(gx1.len() + gy1.len());
    let abs_sum = |a: &Image<T>, b: &Image<T>| a.data().iter().chain(b.data()).map(|v| v.abs()).sum::<T>();
    let s1 = abs_sum(&gx1, &gy1) / m;
    let s2 = abs_sum(&gx2, &gy2) / m;
    let balanced = s1 > T::zero() && s2 > T::zero();
    let (l1, l2) = if balanced {
        let l1 = (s2 / s1).sqrt();
        (l1, T::one() / l1)
    } else {
        (T::one(), T::one())
    };

    let mut value = T::zero();
    let mut dl1 = T::zero();
    let mut dl2 = T::zero();
    // d value / d |g| for each direction and layer
    let mut da = [Vec::new(), Vec::new()];
    let mut db = [Vec::new(), Vec::new()];
    for (dir, (g1, g2)) in [(&gx1, &gx2), (&gy1, &gy2)].into_iter().enumerate() {
        let n: T = count(g1.len());
        let mut sum = T::zero();
        da[dir] = Vec::with_capacity(g1.len());
        db[dir] = Vec::with_capacity(g1.len());
        for (&u, &v) in g1.data().iter().zip(g2.data()) {
            let (a, b) = (u.abs(), v.abs());
            let ta = (l1 * a).tanh();
            let tb = (l2 * b).tanh();
            let sa = T::one() - ta * ta;
            let sb = T::one() - tb * tb;
            sum += ta * tb;
            da[dir].push(l1 * sa * tb / n);
            db[dir].push(l2 * sb * ta / n);
            dl1 += a * sa * tb / n;
            dl2 += b * sb * ta / n;
        }
        value += sum / n;
    }

    // chain through the balancing factors via S1 and S2
    let (ds1, ds2) = if balanced {
        let two = T::lit(2.0);
        (
            (-dl1 * l1 + dl2 * l2) / (two * s1) / m,
            (dl1 * l1 - dl2 * l2) / (two * s2) / m,
        )
    } else {
        (T::zero(), T::zero())
    };

    let signed = |g: &Image<T>, d: &[T], extra: T| {
        let mut out = g.clone();
        for (o, &dv) in out.data_mut().iter_mut().zip(d) {
            *o = sign(*o) * (dv + extra);
        }
        out
    };
    let g1 = image_gradients_backward(
        &signed(&gx1, &da[0], ds1),
        &signed(&gy1, &da[1], ds1),
        h,
        w,
    );
    let g2 = image_gradients_backward(
        &signed(&gx2, &db[0], ds2),
        &signed(&gy2, &db[1], ds2),
        h,
        w,
    );
    debug_assert_eq!(g1.channels(), c);
    (value, g1, g2)
}

/// `(sum_x |m(x) - 0.5| + eps)^-1`; smallest for fully binary masks.
pub fn binary_mask_reg<T: Scalar>(mask: &Image<T>) -> T {
    binary_mask_reg_grad(mask).0
}

pub fn binary_mask_reg_grad<T: Scalar>(mask: &Image<T>) -> (T, Image<T>) {
    let half = T::lit(0.5);
    let s: T = mask.data().iter().map(|&v| (v - half).abs()).sum();
    let denom = s + T::lit(BINARY_REG_EPS);
    let value = T::one() / denom;
    let scale = -T::one() / (denom * denom);
    (value, mask.map(|v| scale * sign(v - half)))
}

/// Mean squared 5-point Laplacian over interior pixels of a one-channel map.
pub fn smoothness_reg<T: Scalar>(t: &Image<T>) -> Result<T> {
    Ok(smoothness_reg_grad(t)?.0)
}

pub fn smoothness_reg_grad<T: Scalar>(t: &Image<T>) -> Result<(T, Image<T>)> {
    let (c, h, w) = t.shape();
    if c != 1 {
        return Err(Error::shape("smoothness regularizer expects a one-channel map"));
    }
    if h < 3 || w < 3 {
        return Err(Error::shape(format!("{h}x{w} map smaller than 3x3")));
    }
    let n: T = count((h - 2) * (w - 2));
    let four = T::lit(4.0);
    let two = T::lit(2.0);
    let mut value = T::zero();
    let mut grad = Image::zeros(1, h, w);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let lap = t.get(0, y - 1, x) + t.get(0, y + 1, x) + t.get(0, y, x - 1)
                + t.get(0, y, x + 1)
                - four * t.get(0, y, x);
            value += lap * lap;
            let g = two * lap / n;
            for (yy, xx) in [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)] {
                grad.set(0, yy, xx, grad.get(0, yy, xx) + g);
            }
            grad.set(0, y, x, grad.get(0, y, x) - four * g);
        }
    }
    Ok((value / n, grad))
}

/// Mean squared deviation of an RGB airlight layer from a constant colour.
pub fn airlight_reg<T: Scalar>(a: &Image<T>, color: [T; 3]) -> Result<T> {
    Ok(airlight_reg_grad(a, color)?.0)
}

pub fn airlight_reg_grad<T: Scalar>(a: &Image<T>, color: [T; 3]) -> Result<(T, Image<T>)> {
    if a.channels() != 3 {
        return Err(Error::shape("airlight layer must have 3 channels"));
    }
    let n: T = count(a.len());
    let two = T::lit(2.0);
    let mut value = T::zero();
    let (c, h, w) = a.shape();
    let grad = Image::from_fn(c, h, w, |ci, y, x| {
        let d = a.get(ci, y, x) - color[ci];
        value += d * d;
        two * d / n
    });
    Ok((value / n, grad))
}

/// Everything the objective needs besides the images themselves.
#[derive(Clone, Debug)]
pub struct ObjectiveConfig<T> {
    pub weights: LossWeights,
    pub reg: RegSelector<T>,
    pub exclusion_scales: usize,
    pub norm: ReconNorm,
}

impl<T: Scalar> ObjectiveConfig<T> {
    pub fn new(weights: LossWeights, reg: RegSelector<T>) -> Self {
        ObjectiveConfig {
            weights,
            reg,
            exclusion_scales: EXCLUSION_SCALES,
            norm: ReconNorm::Mse,
        }
    }
}

/// Gradients of one frame's objective with respect to its inputs.
pub(crate) struct ObjectiveGrad<T> {
    pub y1: Image<T>,
    pub y2: Option<Image<T>>,
    pub mask: Option<Mask<T>>,
}

/// Loss and gradients for one observation. `y2`/`mask` are absent when a
/// single generator reconstructs the input on its own. `hints` are the
/// per-layer weight maps active during the hint phase.
pub(crate) fn evaluate_objective<T: Scalar>(
    input: &Image<T>,
    y1: &Image<T>,
    second: Option<(&Image<T>, &Mask<T>)>,
    cfg: &ObjectiveConfig<T>,
    hints: Option<(&Image<T>, &Image<T>)>,
) -> Result<(FrameLoss, ObjectiveGrad<T>)> {
    let w = &cfg.weights;
    let recon = match second {
        Some((y2, mask)) => mix(mask, y1, y2)?,
        None => y1.clone(),
    };
    let (mut reconst, g_recon) = reconstruction_loss_grad(input, &recon, cfg.norm)?;
    let (mut g1, mut g2, mut gm) = match second {
        Some((y2, mask)) => {
            let g = mix_backward(mask, y1, y2, &g_recon);
            (g.y1, Some(g.y2), Some(g.mask))
        }
        None => (g_recon, None, None),
    };

    if let Some((w1, w2)) = hints {
        let half = T::lit(0.5);
        let (v1, h1) = weighted_reconstruction_grad(input, y1, w1)?;
        reconst += half * v1;
        g1.add_assign(&h1.scale(half));
        if let (Some((y2, _)), Some(g2)) = (second, g2.as_mut()) {
            let (v2, h2) = weighted_reconstruction_grad(input, y2, w2)?;
            reconst += half * v2;
            g2.add_assign(&h2.scale(half));
        }
    }

    let mut excl = T::zero();
    if let (Some((y2, _)), Some(g2)) = (second, g2.as_mut()) {
        if w.alpha > 0.0 {
            let (v, e1, e2) = exclusion_loss_grad(y1, y2, cfg.exclusion_scales)?;
            let a = T::lit(w.alpha);
            excl = v;
            g1.add_assign(&e1.scale(a));
            g2.add_assign(&e2.scale(a));
        }
    }

    let beta = T::lit(w.beta);
    let mut reg = T::zero();
    match &cfg.reg {
        RegSelector::None => {}
        RegSelector::BinaryMask => {
            if let (Some((_, Mask::Spatial(m))), Some(Mask::Spatial(gm))) = (second, gm.as_mut()) {
                let (v, g) = binary_mask_reg_grad(m);
                reg = v;
                gm.add_assign(&g.scale(beta));
            }
        }
        RegSelector::Dehaze { airlight } => {
            if let (Some((y2, mask)), Some(g2), Some(gm)) = (second, g2.as_mut(), gm.as_mut()) {
                let ws = T::lit(w.term("smoothness"));
                let wa = T::lit(w.term("airlight"));
                if let (Mask::Spatial(t), Mask::Spatial(gt)) = (mask, gm) {
                    let (v, g) = smoothness_reg_grad(t)?;
                    reg += ws * v;
                    gt.add_assign(&g.scale(beta * ws));
                }
                let (v, g) = airlight_reg_grad(y2, *airlight)?;
                reg += wa * v;
                g2.add_assign(&g.scale(beta * wa));
            }
        }
    }

    let frame = FrameLoss {
        index: 0,
        total: (reconst + T::lit(w.alpha) * excl + beta * reg).as_f64(),
        reconst: reconst.as_f64(),
        excl: excl.as_f64(),
        reg: reg.as_f64(),
    };
    Ok((
        frame,
        ObjectiveGrad {
            y1: g1,
            y2: g2,
            mask: gm,
        },
    ))
}

/// Evaluates the combined objective for one input and its decomposition.
/// `hint_weights` are the per-layer weight maps of the hint phase.
pub fn total_loss<T: Scalar>(
    input: &Image<T>,
    layers: &LayerSet<T>,
    cfg: &ObjectiveConfig<T>,
    hint_weights: Option<(&Image<T>, &Image<T>)>,
) -> Result<LossReport> {
    cfg.weights.validate()?;
    let (frame, _) = evaluate_objective(
        input,
        &layers.y1,
        Some((&layers.y2, &layers.mask)),
        cfg,
        hint_weights,
    )?;
    Ok(LossReport::from_frames(vec![frame]))
}

/// Frame-averaged objective with a per-frame breakdown.
pub fn total_loss_frames<T: Scalar>(
    inputs: &[Image<T>],
    layers: &[LayerSet<T>],
    cfg: &ObjectiveConfig<T>,
) -> Result<LossReport> {
    if inputs.len() != layers.len() || inputs.is_empty() {
        return Err(Error::shape(format!(
            "{} inputs for {} decompositions",
            inputs.len(),
            layers.len()
        )));
    }
    cfg.weights.validate()?;
    let frames = inputs
        .iter()
        .zip(layers)
        .enumerate()
        .map(|(i, (input, l))| {
            let (mut f, _) =
                evaluate_objective(input, &l.y1, Some((&l.y2, &l.mask)), cfg, None)?;
            f.index = i;
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossReport::from_frames(frames))
}
