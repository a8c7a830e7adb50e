//! Procedural fixtures shared by the integration tests.
#![allow(dead_code)]

use dipstack::{GeneratorSpec, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::f64::consts::TAU;

/// Value noise on a `cell`-pixel lattice with smoothstep interpolation.
pub fn value_noise(h: usize, w: usize, cell: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let g: Vec<f64> = (0..gh * gw).map(|_| rng.gen::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 / cell as f64, x as f64 / cell as f64);
            let (y0, x0) = (fy as usize, fx as usize);
            let (ty, tx) = (smooth(fy - y0 as f64), smooth(fx - x0 as f64));
            let v = |a: usize, b: usize| g[a * gw + b];
            let top = (1.0 - tx) * v(y0, x0) + tx * v(y0, x0 + 1);
            let bottom = (1.0 - tx) * v(y0 + 1, x0) + tx * v(y0 + 1, x0 + 1);
            out[y * w + x] = (1.0 - ty) * top + ty * bottom;
        }
    }
    out
}

fn two_tone(h: usize, w: usize, t: &[f64], lo: [f64; 3], hi: [f64; 3]) -> Image<f32> {
    Image::from_fn(3, h, w, |c, y, x| {
        let v = t[y * w + x];
        ((1.0 - v) * lo[c] + v * hi[c]) as f32
    })
}

/// Warm cells: distance to the nearest of a set of random sites.
pub fn cells(h: usize, w: usize, seed: u64) -> Image<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites: Vec<(f64, f64)> = (0..(h * w / 120).max(2))
        .map(|_| (rng.gen::<f64>() * h as f64, rng.gen::<f64>() * w as f64))
        .collect();
    let d: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            sites
                .iter()
                .map(|&(sy, sx)| ((sy - y).powi(2) + (sx - x).powi(2)).sqrt())
                .fold(f64::MAX, f64::min)
        })
        .collect();
    let m = d.iter().cloned().fold(0.0, f64::max);
    let t: Vec<f64> = d.iter().map(|v| 1.0 - (v / m).min(1.0)).collect();
    two_tone(h, w, &t, [0.35, 0.15, 0.1], [0.95, 0.75, 0.35])
}

/// Cool oblique stripes bent by smooth noise.
pub fn stripes(h: usize, w: usize, seed: u64) -> Image<f32> {
    let n = value_noise(h, w, 16, seed);
    let t: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            0.5 + 0.5 * ((x * 0.3 + y * 0.95) * TAU / 7.0 + 4.0 * n[i]).sin()
        })
        .collect();
    two_tone(h, w, &t, [0.1, 0.2, 0.45], [0.7, 0.85, 0.95])
}

/// Smooth colour field standing in for a natural photograph.
pub fn scene(h: usize, w: usize, seed: u64) -> Image<f32> {
    let n: Vec<Vec<f64>> = (0..3).map(|c| value_noise(h, w, 12, seed * 7 + c)).collect();
    let detail = value_noise(h, w, 3, seed * 7 + 5);
    Image::from_fn(3, h, w, |c, y, x| {
        let i = y * w + x;
        (0.1 + 0.7 * n[c][i] + 0.2 * detail[i]) as f32
    })
}

/// Left half of `a`, right half of `b`, with the matching ground-truth mask.
pub fn split(a: &Image<f32>, b: &Image<f32>) -> (Image<f32>, Image<f32>) {
    let (c, h, w) = a.shape();
    let img = Image::from_fn(c, h, w, |ch, y, x| if x < w / 2 { a.get(ch, y, x) } else { b.get(ch, y, x) });
    let mask = Image::from_fn(1, h, w, |_, _, x| if x < w / 2 { 1.0 } else { 0.0 });
    (img, mask)
}

/// `alpha * a + (1 - alpha) * b`.
pub fn blend(a: &Image<f32>, b: &Image<f32>, alpha: f32) -> Image<f32> {
    a.zip_map(b, |u, v| alpha * u + (1.0 - alpha) * v)
}

/// Solid ring-and-bar logo with soft edges as an opacity map.
pub fn logo(h: usize, w: usize) -> Image<f32> {
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let r = h.min(w) as f64 * 0.28;
    Image::from_fn(1, h, w, |_, y, x| {
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        let d = (dy * dy + dx * dx).sqrt();
        let ring = (r * 0.22 - (d - r).abs()).clamp(0.0, 1.0);
        let bar = ((r * 0.15 - dy.abs()).clamp(0.0, 1.0)) * ((r - dx.abs()).clamp(0.0, 1.0));
        ring.max(bar) as f32
    })
}

/// Narrow generator used to keep single-core runtimes in minutes.
pub fn small_spec(depth: usize, channels: usize) -> GeneratorSpec {
    GeneratorSpec::uniform(depth, channels, 4, 3).with_input_channels(channels)
}

/// Photograph stand-in: shaded background, a few overlapping flat-coloured
/// shapes with hard edges, and fine grain.
pub fn photo(h: usize, w: usize, seed: u64) -> Image<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shade = value_noise(h, w, 20, seed ^ 0x5eed);
    let grain = value_noise(h, w, 2, seed ^ 0x9a1);
    let base: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let shapes: Vec<(f64, f64, f64, bool, [f64; 3])> = (0..6)
        .map(|_| {
            (
                rng.gen::<f64>() * h as f64,
                rng.gen::<f64>() * w as f64,
                (0.1 + 0.25 * rng.gen::<f64>()) * h.min(w) as f64,
                rng.gen::<bool>(),
                [rng.gen(), rng.gen(), rng.gen()],
            )
        })
        .collect();
    Image::from_fn(3, h, w, |c, y, x| {
        let (fy, fx) = (y as f64, x as f64);
        let mut v = base[c];
        for &(cy, cx, r, disk, col) in &shapes {
            let inside = if disk {
                (fy - cy).powi(2) + (fx - cx).powi(2) < r * r
            } else {
                (fy - cy).abs() < r && (fx - cx).abs() < 0.6 * r
            };
            if inside {
                v = col[c];
            }
        }
        let i = y * w + x;
        (0.15 + 0.6 * v + 0.15 * shade[i] + 0.1 * grain[i]).clamp(0.0, 1.0) as f32
    })
}
