//! Deep-image-prior generator: an encoder-decoder with skip connections that
//! maps a fixed noise tensor to an image-shaped output.
//!
//! Every level halves the resolution with a strided convolution, recurses,
//! upsamples by two and joins the result with a 1x1 skip branch:
//!
//! ```text
//! x ─┬─ skip(1x1) ───────────────────────────────┐
//!    └─ down(stride 2) ─ conv ─ [inner level] ─ up2 ─ concat ─ bn ─ conv ─ conv1x1 ─► y
//! ```
//!
//! Odd sizes are handled by reflection padding before the strided convolution
//! and a centered crop after upsampling, so the output always has the noise
//! tensor's spatial size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    center_crop, center_crop_backward, leaky_relu, leaky_relu_backward, sigmoid, upsample2,
    upsample2_backward, BatchNorm, BnCache, Conv, ParamAlloc, UpsampleMode,
};
use crate::optimizer::augment::dihedral_transform;
use crate::scalar::Scalar;
use crate::seeds::derive_seed;

/// Upper bound of the uniform noise fed to every generator.
pub const NOISE_AMPLITUDE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Sigmoid,
    None,
}

/// Architecture hyperparameters of one generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub depth: usize,
    pub down_channels: Vec<usize>,
    pub up_channels: Vec<usize>,
    pub skip_channels: Vec<usize>,
    pub kernel_size: usize,
    pub upsample_mode: UpsampleMode,
    pub output_channels: usize,
    pub output_activation: OutputActivation,
    pub input_channels: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec::uniform(5, 128, 4, 3)
    }
}

impl GeneratorSpec {
    /// Same width at every level; 3x3 kernels, bilinear upsampling, sigmoid
    /// output, 32 noise channels.
    pub fn uniform(depth: usize, channels: usize, skip: usize, output_channels: usize) -> Self {
        GeneratorSpec {
            depth,
            down_channels: vec![channels; depth],
            up_channels: vec![channels; depth],
            skip_channels: vec![skip; depth],
            kernel_size: 3,
            upsample_mode: UpsampleMode::Bilinear,
            output_channels,
            output_activation: OutputActivation::Sigmoid,
            input_channels: 32,
        }
    }

    pub fn with_output_channels(mut self, n: usize) -> Self {
        self.output_channels = n;
        self
    }

    pub fn with_input_channels(mut self, n: usize) -> Self {
        self.input_channels = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("generator depth must be at least 1"));
        }
        for (name, list) in [
            ("down_channels", &self.down_channels),
            ("up_channels", &self.up_channels),
            ("skip_channels", &self.skip_channels),
        ] {
            if list.len() != self.depth {
                return Err(Error::config(format!(
                    "{name} has {} entries but depth is {}",
                    list.len(),
                    self.depth
                )));
            }
        }
        if self.down_channels.iter().chain(&self.up_channels).any(|&c| c == 0) {
            return Err(Error::config("down/up channel counts must be positive"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.output_channels == 0 || self.input_channels == 0 {
            return Err(Error::config("input and output channel counts must be positive"));
        }
        Ok(())
    }
}

/// Fixed random input of one generator plus its perturbation settings.
#[derive(Clone, Debug)]
pub struct NoiseField<T> {
    pub base: Image<T>,
    /// Standard deviation of the per-iteration perturbation once fully ramped.
    pub perturb_sigma: T,
    /// Iterations over which the perturbation ramps linearly from zero.
    pub ramp_iterations: usize,
    pub seed: u64,
}

impl<T: Scalar> NoiseField<T> {
    /// Uniform noise in `[0, amplitude]`, no perturbation.
    pub fn uniform(channels: usize, height: usize, width: usize, amplitude: T, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amp = amplitude.as_f64();
        let base = Image::from_fn(channels, height, width, |_, _, _| {
            T::lit(rng.gen::<f64>() * amp)
        });
        NoiseField {
            base,
            perturb_sigma: T::zero(),
            ramp_iterations: 0,
            seed,
        }
    }

    /// Default perturbation: peak sigma of `amplitude / 30`, reached halfway
    /// through `total_iterations`.
    pub fn with_default_perturbation(self, total_iterations: usize) -> Self {
        let sigma = T::lit(NOISE_AMPLITUDE / 30.0);
        self.with_perturbation(sigma, total_iterations / 2)
    }

    pub fn with_perturbation(mut self, sigma: T, ramp_iterations: usize) -> Self {
        self.perturb_sigma = sigma;
        self.ramp_iterations = ramp_iterations;
        self
    }

    /// Perturbation scale at `iteration`; non-decreasing in the iteration.
    pub fn sigma_at(&self, iteration: usize) -> T {
        if self.ramp_iterations == 0 {
            return self.perturb_sigma;
        }
        let frac = (iteration as f64 / self.ramp_iterations as f64).min(1.0);
        self.perturb_sigma * T::lit(frac)
    }

    /// Perturbed input for `iteration`, after applying dihedral element
    /// `transform` to the base. The perturbation is a pure function of
    /// `(seed, iteration)`.
    pub fn sample(&self, iteration: usize, transform: usize) -> Image<T> {
        let mut x = if transform == 0 {
            self.base.clone()
        } else {
            dihedral_transform(&self.base, transform).expect("transform index checked by caller")
        };
        let sigma = self.sigma_at(iteration);
        if sigma > T::zero() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0x5e7, iteration as u64));
            let s = sigma.as_f64();
            for v in x.data_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v += T::lit(e * s);
            }
        }
        x
    }
}

struct Block {
    conv: Conv,
    bn: BatchNorm,
}

struct BlockCache<T> {
    input: Image<T>,
    col: Vec<T>,
    bn: BnCache<T>,
    pre_act: Image<T>,
}

impl Block {
    fn new(alloc: &mut ParamAlloc, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Block {
            conv: Conv::new(alloc, cin, cout, k, stride),
            bn: BatchNorm::new(alloc, cout),
        }
    }

    fn init<T: Scalar>(&self, params: &mut [T], uniform: &mut impl FnMut() -> f64) {
        self.conv.init(params, &mut *uniform);
        self.bn.init(params);
    }

    fn forward<T: Scalar>(&self, params: &[T], x: Image<T>) -> (Image<T>, BlockCache<T>) {
        let (c, col) = self.conv.forward(params, &x);
        let (pre_act, bn) = self.bn.forward(params, &c);
        let y = leaky_relu(&pre_act);
        (
            y,
            BlockCache {
                input: x,
                col,
                bn,
                pre_act,
            },
        )
    }

    fn backward<T: Scalar>(
        &self,
        params: &[T],
        grads: &mut [T],
        cache: &BlockCache<T>,
        grad_out: &Image<T>,
        need_input_grad: bool,
    ) -> Option<Image<T>> {
        let g = leaky_relu_backward(&cache.pre_act, grad_out);
        let g = self.bn.backward(params, grads, &cache.bn, &g);
        self.conv
            .backward(params, grads, &cache.input, &cache.col, &g, need_input_grad)
    }
}

struct Level {
    skip: Option<Block>,
    down: Block,
    down2: Block,
    inner: Option<Box<Level>>,
    upsample: UpsampleMode,
    join_bn: BatchNorm,
    up: Block,
    up1x1: Block,
}

struct LevelTrace<T> {
    in_h: usize,
    in_w: usize,
    skip: Option<BlockCache<T>>,
    down: BlockCache<T>,
    down2: BlockCache<T>,
    inner: Option<Box<LevelTrace<T>>>,
    pre_up: (usize, usize),
    crop: (usize, usize),
    skip_channels: usize,
    join_bn: BnCache<T>,
    up: BlockCache<T>,
    up1x1: BlockCache<T>,
}

impl Level {
    fn build(spec: &GeneratorSpec, alloc: &mut ParamAlloc, i: usize, cin: usize) -> Self {
        let k = spec.kernel_size;
        let skip_c = spec.skip_channels[i];
        let down_c = spec.down_channels[i];
        let skip = (skip_c > 0).then(|| Block::new(alloc, cin, skip_c, 1, 1));
        let down = Block::new(alloc, cin, down_c, k, 2);
        let down2 = Block::new(alloc, down_c, down_c, k, 1);
        let inner = (i + 1 < spec.depth).then(|| Box::new(Level::build(spec, alloc, i + 1, down_c)));
        let deep_c = if inner.is_some() {
            spec.up_channels[i + 1]
        } else {
            down_c
        };
        let join_c = skip_c + deep_c;
        let join_bn = BatchNorm::new(alloc, join_c);
        let up = Block::new(alloc, join_c, spec.up_channels[i], k, 1);
        let up1x1 = Block::new(alloc, spec.up_channels[i], spec.up_channels[i], 1, 1);
        Level {
            skip,
            down,
            down2,
            inner,
            upsample: spec.upsample_mode,
            join_bn,
            up,
            up1x1,
        }
    }

    fn init<T: Scalar>(&self, params: &mut [T], uniform: &mut impl FnMut() -> f64) {
        if let Some(s) = &self.skip {
            s.init(params, uniform);
        }
        self.down.init(params, uniform);
        self.down2.init(params, uniform);
        if let Some(inner) = &self.inner {
            inner.init(params, uniform);
        }
        self.join_bn.init(params);
        self.up.init(params, uniform);
        self.up1x1.init(params, uniform);
    }

    fn forward<T: Scalar>(&self, params: &[T], x: Image<T>) -> (Image<T>, LevelTrace<T>) {
        let (in_h, in_w) = (x.height(), x.width());
        let skip = self.skip.as_ref().map(|s| s.forward(params, x.clone()));
        let (d, down) = self.down.forward(params, x);
        let (d, down2) = self.down2.forward(params, d);
        let (d, inner) = match &self.inner {
            Some(level) => {
                let (y, t) = level.forward(params, d);
                (y, Some(Box::new(t)))
            }
            None => (d, None),
        };
        let pre_up = (d.height(), d.width());
        let d = upsample2(&d, self.upsample);
        let (d, top, left) = center_crop(&d, in_h, in_w);
        let (joined, skip_channels, skip) = match skip {
            Some((s, cache)) => (s.concat_channels(&d), s.channels(), Some(cache)),
            None => (d, 0, None),
        };
        let (j, join_bn) = self.join_bn.forward(params, &joined);
        let (u, up) = self.up.forward(params, j);
        let (y, up1x1) = self.up1x1.forward(params, u);
        (
            y,
            LevelTrace {
                in_h,
                in_w,
                skip,
                down,
                down2,
                inner,
                pre_up,
                crop: (top, left),
                skip_channels,
                join_bn,
                up,
                up1x1,
            },
        )
    }

    fn backward<T: Scalar>(
        &self,
        params: &[T],
        grads: &mut [T],
        trace: &LevelTrace<T>,
        grad_out: &Image<T>,
        need_input_grad: bool,
    ) -> Option<Image<T>> {
        let g = self
            .up1x1
            .backward(params, grads, &trace.up1x1, grad_out, true)
            .expect("input grad requested");
        let g = self
            .up
            .backward(params, grads, &trace.up, &g, true)
            .expect("input grad requested");
        let g = self.join_bn.backward(params, grads, &trace.join_bn, &g);

        let (h, w) = (trace.in_h, trace.in_w);
        let n = h * w;
        let sc = trace.skip_channels;
        let deep_c = g.channels() - sc;
        let g_deep = Image::from_vec(deep_c, h, w, g.data()[sc * n..].to_vec()).expect("split");
        let g_skip = (sc > 0)
            .then(|| Image::from_vec(sc, h, w, g.data()[..sc * n].to_vec()).expect("split"));

        let (ph, pw) = trace.pre_up;
        let g_deep = center_crop_backward(&g_deep, 2 * ph, 2 * pw, trace.crop.0, trace.crop.1);
        let mut g_deep = upsample2_backward(&g_deep, ph, pw, self.upsample);
        if let (Some(level), Some(t)) = (&self.inner, &trace.inner) {
            g_deep = level
                .backward(params, grads, t, &g_deep, true)
                .expect("input grad requested");
        }
        let g_deep = self
            .down2
            .backward(params, grads, &trace.down2, &g_deep, true)
            .expect("input grad requested");
        let mut dx = self
            .down
            .backward(params, grads, &trace.down, &g_deep, need_input_grad);

        if let (Some(block), Some(cache), Some(gs)) = (&self.skip, &trace.skip, g_skip) {
            let ds = block.backward(params, grads, cache, &gs, need_input_grad);
            if let (Some(dx), Some(ds)) = (dx.as_mut(), ds) {
                dx.add_assign(&ds);
            }
        }
        dx
    }
}

/// Activations recorded by [`Generator::forward`], consumed by
/// [`Generator::backward`].
pub struct Trace<T> {
    level: LevelTrace<T>,
    head_input: Image<T>,
    head_col: Vec<T>,
    output: Image<T>,
}

impl<T> Trace<T> {
    pub fn output(&self) -> &Image<T> {
        &self.output
    }
}

/// One generator network with its parameters, gradient accumulator and
/// expected input size.
pub struct Generator<T> {
    spec: GeneratorSpec,
    root: Level,
    head: Conv,
    params: Vec<T>,
    grads: Vec<T>,
    input_size: Option<(usize, usize)>,
}

/// Builds a generator with parameters drawn deterministically from `seed`.
pub fn build_generator<T: Scalar>(spec: &GeneratorSpec, seed: u64) -> Result<Generator<T>> {
    Generator::new(spec, seed)
}

impl<T: Scalar> Generator<T> {
    pub fn new(spec: &GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut alloc = ParamAlloc::default();
        let root = Level::build(spec, &mut alloc, 0, spec.input_channels);
        let head = Conv::new(&mut alloc, spec.up_channels[0], spec.output_channels, 1, 1);
        let mut params = vec![T::zero(); alloc.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = || rng.gen::<f64>();
        root.init(&mut params, &mut uniform);
        head.init(&mut params, &mut uniform);
        Ok(Generator {
            spec: spec.clone(),
            root,
            head,
            grads: vec![T::zero(); params.len()],
            params,
            input_size: None,
        })
    }

    /// Restricts inputs to `(height, width)` or its transpose (dihedral
    /// augmentation may swap the axes).
    pub fn with_input_size(mut self, height: usize, width: usize) -> Self {
        self.input_size = Some((height, width));
        self
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn grads(&self) -> &[T] {
        &self.grads
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grad(&mut self) {
        self.grads.fill(T::zero());
    }

    /// Parameters and gradients, borrowed together for an optimizer step.
    pub fn params_and_grads(&mut self) -> (&mut [T], &[T]) {
        (&mut self.params, &self.grads)
    }

    /// Evaluates the network on `z` perturbed for `iteration`.
    pub fn forward(&self, z: &NoiseField<T>, iteration: usize) -> Result<(Image<T>, Trace<T>)> {
        self.forward_input(z.sample(iteration, 0))
    }

    /// Evaluates the network on an explicit input tensor.
    pub fn forward_input(&self, input: Image<T>) -> Result<(Image<T>, Trace<T>)> {
        if input.channels() != self.spec.input_channels {
            return Err(Error::shape(format!(
                "generator expects {} input channels, got {}",
                self.spec.input_channels,
                input.channels()
            )));
        }
        if input.height() == 0 || input.width() == 0 {
            return Err(Error::shape("empty generator input"));
        }
        if let Some((h, w)) = self.input_size {
            let got = (input.height(), input.width());
            if got != (h, w) && got != (w, h) {
                return Err(Error::shape(format!(
                    "generator bound to {h}x{w} input, got {}x{}",
                    got.0, got.1
                )));
            }
        }
        let (features, level) = self.root.forward(&self.params, input);
        let (raw, head_col) = self.head.forward(&self.params, &features);
        let output = match self.spec.output_activation {
            OutputActivation::None => raw,
            OutputActivation::Sigmoid => {
                // keep the open interval even where the sigmoid saturates
                let lo = T::epsilon();
                let hi = T::one() - T::epsilon();
                raw.map(|v| sigmoid(v).max(lo).min(hi))
            }
        };
        Ok((
            output.clone(),
            Trace {
                level,
                head_input: features,
                head_col,
                output,
            },
        ))
    }

    /// Accumulates `d loss / d params` given `d loss / d output`.
    pub fn backward(&mut self, trace: &Trace<T>, grad_output: &Image<T>) -> Result<()> {
        trace.output.ensure_same_shape(grad_output, "generator output gradient")?;
        let g = match self.spec.output_activation {
            OutputActivation::None => grad_output.clone(),
            OutputActivation::Sigmoid => trace
                .output
                .zip_map(grad_output, |s, g| g * s * (T::one() - s)),
        };
        let g = self
            .head
            .backward(&self.params, &mut self.grads, &trace.head_input, &trace.head_col, &g, true)
            .expect("input grad requested");
        self.root
            .backward(&self.params, &mut self.grads, &trace.level, &g, false);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(depth: usize, out: usize) -> GeneratorSpec {
        GeneratorSpec {
            input_channels: 3,
            ..GeneratorSpec::uniform(depth, 4, 2, out)
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut spec = small_spec(3, 3);
        spec.up_channels.pop();
        assert!(matches!(Generator::<f32>::new(&spec, 0), Err(Error::Config(_))));
        let mut spec = small_spec(3, 3);
        spec.kernel_size = 4;
        assert!(matches!(Generator::<f32>::new(&spec, 0), Err(Error::Config(_))));
        let mut spec = small_spec(2, 3);
        spec.depth = 0;
        assert!(Generator::<f32>::new(&spec, 0).is_err());
    }

    #[test]
    fn default_spec_output_shape_and_range() {
        let spec = GeneratorSpec::default();
        let g = Generator::<f32>::new(&spec, 1).unwrap();
        let z = NoiseField::uniform(32, 64, 64, NOISE_AMPLITUDE as f32, 9);
        let (y, _) = g.forward(&z, 0).unwrap();
        assert_eq!(y.shape(), (3, 64, 64));
        assert!(y.min_value() > 0.0 && y.max_value() < 1.0);
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = small_spec(3, 3);
        let a = Generator::<f64>::new(&spec, 42).unwrap();
        let b = Generator::<f64>::new(&spec, 42).unwrap();
        let c = Generator::<f64>::new(&spec, 43).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn depth_one_single_channel() {
        let spec = small_spec(1, 1);
        let g = Generator::<f64>::new(&spec, 0).unwrap();
        let z = NoiseField::uniform(3, 9, 7, 0.1, 1);
        let (y, _) = g.forward(&z, 0).unwrap();
        assert_eq!(y.shape(), (1, 9, 7));
    }

    #[test]
    fn output_size_round_trips_for_odd_and_even_sizes() {
        for depth in 1..=5 {
            let g = Generator::<f32>::new(&small_spec(depth, 2), depth as u64).unwrap();
            for &(h, w) in &[(32, 32), (33, 47), (64, 50), (257, 40)] {
                let z = NoiseField::uniform(3, h, w, 0.1, 3);
                let (y, _) = g.forward(&z, 0).unwrap();
                assert_eq!((y.height(), y.width()), (h, w), "depth {depth} size {h}x{w}");
            }
        }
    }

    #[test]
    fn input_channel_mismatch_is_shape_error() {
        let g = Generator::<f32>::new(&small_spec(2, 3), 0).unwrap();
        let z = NoiseField::uniform(5, 8, 8, 0.1, 0);
        assert!(matches!(g.forward(&z, 0), Err(Error::Shape(_))));
        let g = g.with_input_size(8, 16);
        let z = NoiseField::uniform(3, 8, 8, 0.1, 0);
        assert!(matches!(g.forward(&z, 0), Err(Error::Shape(_))));
        let z = NoiseField::uniform(3, 16, 8, 0.1, 0);
        assert!(g.forward(&z, 0).is_ok());
    }

    #[test]
    fn zero_perturbation_is_deterministic() {
        let g = Generator::<f32>::new(&small_spec(3, 3), 0).unwrap();
        let z = NoiseField::uniform(3, 16, 16, 0.1, 5);
        let (a, _) = g.forward(&z, 0).unwrap();
        let (b, _) = g.forward(&z, 1234).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturbation_replays_per_iteration() {
        let g = Generator::<f32>::new(&small_spec(3, 3), 0).unwrap();
        let z = NoiseField::uniform(3, 16, 16, 0.1, 5).with_default_perturbation(100);
        let (a, _) = g.forward(&z, 70).unwrap();
        let (b, _) = g.forward(&z, 70).unwrap();
        let (c, _) = g.forward(&z, 71).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn perturbation_schedule_is_monotone() {
        let z = NoiseField::<f64>::uniform(2, 4, 4, 0.1, 0).with_default_perturbation(4000);
        assert_eq!(z.sigma_at(0), 0.0);
        assert!(z.sigma_at(2000) >= z.sigma_at(0));
        let mut prev = 0.0;
        for k in (0..5000).step_by(97) {
            let s = z.sigma_at(k);
            assert!(s >= prev);
            prev = s;
        }
        assert!((z.sigma_at(4000) - 0.1 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn noise_base_in_range_and_reproducible() {
        let a = NoiseField::<f32>::uniform(4, 10, 10, 0.1, 77);
        let b = NoiseField::<f32>::uniform(4, 10, 10, 0.1, 77);
        assert_eq!(a.base, b.base);
        assert!(a.base.min_value() >= 0.0 && a.base.max_value() <= 0.1);
    }

    #[test]
    fn fresh_generator_has_nonzero_gradients() {
        let mut g = Generator::<f64>::new(&small_spec(3, 3), 0).unwrap();
        let z = NoiseField::uniform(3, 16, 16, 0.1, 5);
        let (y, trace) = g.forward(&z, 0).unwrap();
        // loss = sum (y - 0.3)^2
        let grad = y.map(|v| 2.0 * (v - 0.3));
        g.backward(&trace, &grad).unwrap();
        let nonzero = g.grads().iter().filter(|v| v.abs() > 0.0).count();
        assert!(nonzero > g.num_params() / 2, "{nonzero} of {}", g.num_params());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let spec = GeneratorSpec {
            output_activation: OutputActivation::Sigmoid,
            ..small_spec(2, 2)
        };
        let mut g = Generator::<f64>::new(&spec, 3).unwrap();
        let z = NoiseField::uniform(3, 7, 6, 0.5, 1);
        let target = Image::from_fn(2, 7, 6, |c, y, x| ((c + y * 3 + x) % 5) as f64 / 5.0);
        let loss = |g: &Generator<f64>| {
            let (y, _) = g.forward(&z, 0).unwrap();
            y.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let (y, trace) = g.forward(&z, 0).unwrap();
        let grad = y.zip_map(&target, |a, b| 2.0 * (a - b));
        g.backward(&trace, &grad).unwrap();
        let analytic = g.grads().to_vec();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in (0..g.num_params()).step_by(7) {
            let orig = g.params()[i];
            g.params_mut()[i] = orig + h;
            let fp = loss(&g);
            g.params_mut()[i] = orig - h;
            let fm = loss(&g);
            g.params_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            // central differences carry ~1e-9 of roundoff at this loss scale
            let err = ((fd - analytic[i]).abs() - 1e-8).max(0.0)
                / fd.abs().max(analytic[i].abs()).max(1e-12);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
