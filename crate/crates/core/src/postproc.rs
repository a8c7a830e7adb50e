//! Mask refinement and layer clean-up applied after optimization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hints::box_mean;
use crate::image::Image;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidedFilterParams {
    pub radius: usize,
    pub eps: f64,
}

impl GuidedFilterParams {
    pub fn new(radius: usize, eps: f64) -> Result<Self> {
        let p = GuidedFilterParams { radius, eps };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.radius == 0 || !(self.eps >= 0.0) {
            return Err(Error::config("guided filter needs radius >= 1 and eps >= 0"));
        }
        Ok(())
    }
}

impl Default for GuidedFilterParams {
    fn default() -> Self {
        GuidedFilterParams { radius: 8, eps: 1e-4 }
    }
}

/// Edge-preserving filter of a one-channel `input` steered by a one- or
/// three-channel `guide`: per-window linear models `q = a^T I + b`, averaged
/// over all windows covering a pixel. Borders replicate edge pixels.
pub fn guided_filter<T: Scalar>(
    guide: &Image<T>,
    input: &Image<T>,
    params: &GuidedFilterParams,
) -> Result<Image<T>> {
    params.validate()?;
    if input.channels() != 1 {
        return Err(Error::shape("guided filter input must have one channel"));
    }
    if !guide.same_spatial(input) {
        return Err(Error::shape(format!(
            "guide {:?} and input {:?} differ in size",
            guide.shape(),
            input.shape()
        )));
    }
    match guide.channels() {
        1 => Ok(guided_gray(guide, input, params.radius, T::lit(params.eps))),
        3 => Ok(guided_color(guide, input, params.radius, T::lit(params.eps))),
        c => Err(Error::shape(format!("guide must have 1 or 3 channels, got {c}"))),
    }
}

fn guided_gray<T: Scalar>(guide: &Image<T>, p: &Image<T>, r: usize, eps: T) -> Image<T> {
    let mean_i = box_mean(guide, r);
    let mean_p = box_mean(p, r);
    let corr_ip = box_mean(&guide.zip_map(p, |a, b| a * b), r);
    let corr_ii = box_mean(&guide.map(|a| a * a), r);
    let mut a = Image::zeros(1, guide.height(), guide.width());
    let mut b = Image::zeros(1, guide.height(), guide.width());
    for i in 0..a.len() {
        let (mi, mp) = (mean_i.data()[i], mean_p.data()[i]);
        let cov = corr_ip.data()[i] - mi * mp;
        let var = corr_ii.data()[i] - mi * mi;
        let denom = var + eps;
        let ai = if denom != T::zero() { cov / denom } else { T::zero() };
        a.data_mut()[i] = ai;
        b.data_mut()[i] = mp - ai * mi;
    }
    let mean_a = box_mean(&a, r);
    let mean_b = box_mean(&b, r);
    let mut q = mean_b;
    for (i, v) in q.data_mut().iter_mut().enumerate() {
        *v += mean_a.data()[i] * guide.data()[i];
    }
    q
}

fn guided_color<T: Scalar>(guide: &Image<T>, p: &Image<T>, r: usize, eps: T) -> Image<T> {
    let (_, h, w) = guide.shape();
    let n = h * w;
    let ch: Vec<Image<T>> = (0..3).map(|c| guide.channel(c)).collect();
    let mean_i: Vec<Image<T>> = ch.iter().map(|c| box_mean(c, r)).collect();
    let mean_p = box_mean(p, r);
    let mean_ip: Vec<Image<T>> = ch
        .iter()
        .map(|c| box_mean(&c.zip_map(p, |a, b| a * b), r))
        .collect();
    // upper triangle of the guide covariance: rr rg rb gg gb bb
    let pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
    let corr: Vec<Image<T>> = pairs
        .iter()
        .map(|&(u, v)| box_mean(&ch[u].zip_map(&ch[v], |a, b| a * b), r))
        .collect();

    let mut coef = vec![Image::zeros(1, h, w), Image::zeros(1, h, w), Image::zeros(1, h, w)];
    let mut b = Image::zeros(1, h, w);
    for i in 0..n {
        let mi = [mean_i[0].data()[i], mean_i[1].data()[i], mean_i[2].data()[i]];
        let mp = mean_p.data()[i];
        let cov: Vec<T> = (0..3).map(|c| mean_ip[c].data()[i] - mi[c] * mp).collect();
        let s = |k: usize| {
            let (u, v) = pairs[k];
            corr[k].data()[i] - mi[u] * mi[v]
        };
        let m = [
            [s(0) + eps, s(1), s(2)],
            [s(1), s(3) + eps, s(4)],
            [s(2), s(4), s(5) + eps],
        ];
        let a = solve3(&m, [cov[0], cov[1], cov[2]]).unwrap_or([T::zero(); 3]);
        for c in 0..3 {
            coef[c].data_mut()[i] = a[c];
        }
        b.data_mut()[i] = mp - a[0] * mi[0] - a[1] * mi[1] - a[2] * mi[2];
    }
    let mut q = box_mean(&b, r);
    for c in 0..3 {
        let ma = box_mean(&coef[c], r);
        for (i, v) in q.data_mut().iter_mut().enumerate() {
            *v += ma.data()[i] * ch[c].data()[i];
        }
    }
    q
}

/// Symmetric 3x3 solve by Cramer's rule; `None` when singular.
fn solve3<T: Scalar>(m: &[[T; 3]; 3], rhs: [T; 3]) -> Option<[T; 3]> {
    let det3 = |a: &[[T; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let det = det3(m);
    if det == T::zero() || !det.is_finite() {
        return None;
    }
    let mut out = [T::zero(); 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut mk = *m;
        for row in 0..3 {
            mk[row][k] = rhs[row];
        }
        *o = det3(&mk) / det;
    }
    Some(out)
}

/// Indicator of `m > threshold`.
pub fn binarize_mask<T: Scalar>(m: &Image<T>, threshold: T) -> Image<T> {
    m.map(|v| if v > threshold { T::one() } else { T::zero() })
}

/// Shifted layers and the per-channel offset `c` removed from `y1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedLayers<T> {
    pub y1: Image<T>,
    pub y2: Image<T>,
    pub offset: Vec<T>,
}

/// Removes the constant offset that can move between two layers mixed with a
/// scalar opacity `alpha`: `y1' = y1 - c`, `y2' = y2 + c * alpha / (1 - alpha)`,
/// so the mix is unchanged. With a `reference` for `y1`, `c` is the mean
/// per-channel difference to it. Otherwise `c` minimizes the total amount by
/// which both layers leave `[0, 1]`, preferring the smallest shift.
pub fn resolve_color_ambiguity<T: Scalar>(
    y1: &Image<T>,
    y2: &Image<T>,
    alpha: T,
    reference: Option<&Image<T>>,
) -> Result<ResolvedLayers<T>> {
    y1.ensure_same_shape(y2, "ambiguity layers")?;
    if let Some(r) = reference {
        y1.ensure_same_shape(r, "ambiguity reference")?;
    }
    let channels = y1.channels();
    if !(alpha > T::zero() && alpha < T::one()) {
        return Ok(ResolvedLayers {
            y1: y1.clone(),
            y2: y2.clone(),
            offset: vec![T::zero(); channels],
        });
    }
    let k = alpha / (T::one() - alpha);
    let offset: Vec<T> = (0..channels)
        .map(|c| match reference {
            Some(r) => {
                let d: T = y1.plane(c).iter().zip(r.plane(c)).map(|(&a, &b)| a - b).sum();
                d / T::from_usize_lossy(y1.pixels().max(1))
            }
            None => range_minimizing_offset(y1.plane(c), y2.plane(c), k),
        })
        .collect();
    let (ch, h, w) = y1.shape();
    Ok(ResolvedLayers {
        y1: Image::from_fn(ch, h, w, |c, y, x| y1.get(c, y, x) - offset[c]),
        y2: Image::from_fn(ch, h, w, |c, y, x| y2.get(c, y, x) + offset[c] * k),
        offset,
    })
}

/// Minimizer closest to 0 of the convex piecewise-linear
/// `sum dist(a - c, [0,1]) + sum dist(b + k c, [0,1])`.
fn range_minimizing_offset<T: Scalar>(a: &[T], b: &[T], k: T) -> T {
    // right derivative, non-decreasing in c
    let slope = |c: T| {
        let mut s = T::zero();
        for &v in a {
            let u = v - c;
            if u > T::one() {
                s -= T::one();
            } else if u <= T::zero() {
                s += T::one();
            }
        }
        for &v in b {
            let u = v + k * c;
            if u >= T::one() {
                s += k;
            } else if u < T::zero() {
                s -= k;
            }
        }
        s
    };
    let s0 = slope(T::zero());
    if s0 >= T::zero() && slope(-T::lit(1e-12)) <= T::zero() {
        return T::zero();
    }
    let span = a
        .iter()
        .chain(b)
        .fold(T::zero(), |m, &v| m.max(v.abs()))
        + T::one();
    let bound = span + span / k;
    // smallest c with slope >= 0 (moving up), or largest with slope <= 0 (down)
    let (mut lo, mut hi) = if s0 < T::zero() {
        (T::zero(), bound)
    } else {
        (-bound, T::zero())
    };
    let up = s0 < T::zero();
    for _ in 0..200 {
        let mid = (lo + hi) * T::lit(0.5);
        let s = slope(mid);
        if up {
            if s >= T::zero() {
                hi = mid
            } else {
                lo = mid
            }
        } else if s > T::zero() {
            hi = mid
        } else {
            lo = mid
        }
    }
    if up {
        hi
    } else {
        lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composition::{mix, Mask};
    use proptest::prelude::*;

    fn rand_image(c: usize, h: usize, w: usize, mut seed: u64) -> Image<f64> {
        Image::from_fn(c, h, w, |_, _, _| {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64) / ((1u64 << 53) as f64)
        })
    }

    /// Window loops with clamped coordinates, no box-filter shortcuts.
    fn naive_gray(guide: &Image<f64>, p: &Image<f64>, r: isize, eps: f64) -> Image<f64> {
        let (h, w) = (guide.height() as isize, guide.width() as isize);
        let at = |img: &Image<f64>, y: isize, x: isize| {
            img.get(0, y.clamp(0, h - 1) as usize, x.clamp(0, w - 1) as usize)
        };
        let n = ((2 * r + 1) * (2 * r + 1)) as f64;
        let mut a = vec![0.0; (h * w) as usize];
        let mut b = vec![0.0; (h * w) as usize];
        for y in 0..h {
            for x in 0..w {
                let (mut si, mut sp, mut sii, mut sip) = (0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let i = at(guide, y + dy, x + dx);
                        let v = at(p, y + dy, x + dx);
                        si += i;
                        sp += v;
                        sii += i * i;
                        sip += i * v;
                    }
                }
                let (mi, mp) = (si / n, sp / n);
                let ak = (sip / n - mi * mp) / (sii / n - mi * mi + eps);
                a[(y * w + x) as usize] = ak;
                b[(y * w + x) as usize] = mp - ak * mi;
            }
        }
        let ai = Image::from_vec(1, h as usize, w as usize, a).unwrap();
        let bi = Image::from_vec(1, h as usize, w as usize, b).unwrap();
        Image::from_fn(1, h as usize, w as usize, |_, y, x| {
            let (mut sa, mut sb) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    sa += at(&ai, y as isize + dy, x as isize + dx);
                    sb += at(&bi, y as isize + dy, x as isize + dx);
                }
            }
            sa / n * guide.get(0, y, x) + sb / n
        })
    }

    #[test]
    fn guided_filter_matches_window_oracle() {
        let g = rand_image(1, 6, 6, 1);
        let p = rand_image(1, 6, 6, 2);
        let params = GuidedFilterParams::new(1, 0.01).unwrap();
        let q = guided_filter(&g, &p, &params).unwrap();
        assert!(q.max_abs_diff(&naive_gray(&g, &p, 1, 0.01)) < 1e-10);
    }

    #[test]
    fn self_guidance_is_identity() {
        let mut g = rand_image(1, 10, 12, 3);
        for x in 0..12 {
            for y in 0..4 {
                g.set(0, y, x, 0.25);
            }
        }
        let q = guided_filter(&g, &g, &GuidedFilterParams::new(2, 0.0).unwrap()).unwrap();
        assert!(q.max_abs_diff(&g) < 1e-9);
    }

    #[test]
    fn constant_input_passes_through() {
        let p = Image::<f64>::filled(1, 9, 7, 0.42);
        for g in [rand_image(1, 9, 7, 4), rand_image(3, 9, 7, 5)] {
            let q = guided_filter(&g, &p, &GuidedFilterParams::new(2, 1e-3).unwrap()).unwrap();
            assert!(q.max_abs_diff(&p) < 1e-12);
        }
    }

    #[test]
    fn color_guide_with_gray_content_matches_gray_guide_limit() {
        // A grey colour guide is singular without eps; with eps it behaves
        // like a one-channel guide scaled by 3 with eps / 3.
        let g1 = rand_image(1, 8, 8, 6);
        let g3 = g1.broadcast_channels(3);
        let p = rand_image(1, 8, 8, 7);
        let eps = 0.01;
        let q3 = guided_filter(&g3, &p, &GuidedFilterParams::new(1, eps).unwrap()).unwrap();
        let g1s = g1.scale(3f64.sqrt());
        let q1 = guided_filter(&g1s, &p, &GuidedFilterParams::new(1, eps).unwrap()).unwrap();
        assert!(q3.max_abs_diff(&q1) < 1e-10);
    }

    #[test]
    fn shape_errors() {
        let g = rand_image(1, 6, 6, 8);
        let params = GuidedFilterParams::default();
        assert!(matches!(guided_filter(&g, &rand_image(1, 6, 5, 9), &params), Err(Error::Shape(_))));
        assert!(matches!(guided_filter(&rand_image(2, 6, 6, 9), &g, &params), Err(Error::Shape(_))));
        assert!(GuidedFilterParams::new(0, 0.1).is_err());
    }

    #[test]
    fn binarize_examples() {
        let hi = Image::<f64>::filled(1, 3, 3, 0.9);
        assert!(binarize_mask(&hi, 0.5).data().iter().all(|&v| v == 1.0));
        let half = Image::<f64>::filled(1, 3, 3, 0.5);
        assert!(binarize_mask(&half, 0.5).data().iter().all(|&v| v == 0.0));
        let b = binarize_mask(&rand_image(1, 5, 5, 10), 0.5);
        assert_eq!(binarize_mask(&b, 0.5), b);
    }

    #[test]
    fn ambiguity_noop_for_in_range_layers() {
        let y1 = rand_image(3, 8, 8, 11);
        let y2 = rand_image(3, 8, 8, 12);
        let r = resolve_color_ambiguity(&y1, &y2, 0.5, None).unwrap();
        assert_eq!(r.offset, vec![0.0; 3]);
        assert_eq!(r.y1, y1);
    }

    #[test]
    fn ambiguity_recovers_constructed_shift_with_reference() {
        let gt1 = rand_image(3, 8, 8, 13);
        let gt2 = rand_image(3, 8, 8, 14);
        let a = 0.3;
        let y1 = gt1.map(|v| v + 0.1);
        let y2 = gt2.map(|v| v - 0.1 * a / (1.0 - a));
        let r = resolve_color_ambiguity(&y1, &y2, a, Some(&gt1)).unwrap();
        for c in r.offset {
            assert!((c - 0.1).abs() < 1e-12);
        }
        assert!(r.y1.max_abs_diff(&gt1) < 1e-12);
        assert!(r.y2.max_abs_diff(&gt2) < 1e-12);
    }

    #[test]
    fn ambiguity_pulls_shifted_layers_into_range() {
        let gt1 = rand_image(3, 8, 8, 15).map(|v| 0.1 + 0.8 * v);
        let gt2 = rand_image(3, 8, 8, 16).map(|v| 0.1 + 0.8 * v);
        let a = 0.5;
        let y1 = gt1.map(|v| v + 0.4);
        let y2 = gt2.map(|v| v - 0.4);
        let r = resolve_color_ambiguity(&y1, &y2, a, None).unwrap();
        assert!(r.y1.min_value() >= -1e-9 && r.y1.max_value() <= 1.0 + 1e-9);
        assert!(r.y2.min_value() >= -1e-9 && r.y2.max_value() <= 1.0 + 1e-9);
    }

    proptest! {
        #[test]
        fn guided_filter_is_linear_in_input(s in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0, color in any::<bool>()) {
            let g = rand_image(if color { 3 } else { 1 }, 7, 9, s);
            let p = rand_image(1, 7, 9, s + 1);
            let q = rand_image(1, 7, 9, s + 2);
            let params = GuidedFilterParams::new(2, 0.01).unwrap();
            let lhs = guided_filter(&g, &p.zip_map(&q, |u, v| a * u + b * v), &params).unwrap();
            let fp = guided_filter(&g, &p, &params).unwrap();
            let fq = guided_filter(&g, &q, &params).unwrap();
            let rhs = fp.zip_map(&fq, |u, v| a * u + b * v);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        }

        #[test]
        fn ambiguity_preserves_mix(s in 0u64..1000, a in 0.05f64..0.95, shift in -0.5f64..0.5) {
            let y1 = rand_image(3, 6, 6, s).map(|v| v + shift);
            let y2 = rand_image(3, 6, 6, s + 7).map(|v| v - shift);
            let r = resolve_color_ambiguity(&y1, &y2, a, None).unwrap();
            let before = mix(&Mask::Scalar(a), &y1, &y2).unwrap();
            let after = mix(&Mask::Scalar(a), &r.y1, &r.y2).unwrap();
            prop_assert!(before.max_abs_diff(&after) < 1e-12);
        }

        #[test]
        fn binarize_is_idempotent(s in 0u64..1000, t in 0.0f64..1.0) {
            let m = rand_image(1, 5, 5, s);
            let b = binarize_mask(&m, t);
            prop_assert_eq!(binarize_mask(&b, t), b);
        }
    }
}
