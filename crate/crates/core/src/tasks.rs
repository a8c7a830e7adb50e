//! Task graphs: which generators exist, which noise each one sees, how
//! their outputs mix into every observed image, and which regularizer and
//! hints apply.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::generator::{Generator, GeneratorSpec, NoiseField};
use crate::hints::{compute_saliency, BBox, Fade, HintSchedule, HINT_ITERATIONS};
use crate::image::{clamp_index, Image};
use crate::losses::{LossWeights, ObjectiveConfig, RegSelector, EXCLUSION_SCALES};
use crate::optimizer::{default_noise, no_hints, reconstruction_only, sized_generator};
use crate::scalar::Scalar;
use crate::seeds::derive_seed;

/// Lower bound of the dehazing transmission map.
pub const TRANSMISSION_FLOOR: f64 = 0.05;
/// Side of the dark-channel minimum filter.
pub const DARK_CHANNEL_WINDOW: usize = 15;
/// Fraction of brightest dark-channel pixels averaged into the airlight.
pub const AIRLIGHT_TOP_FRACTION: f64 = 0.001;
/// Default `|dz| / |z|` between consecutive video frames.
pub const NOISE_DELTA_RATIO: f64 = 0.05;

const GENERATOR_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const DELTA_STREAM: u64 = 3;
const OPACITY_STREAM: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Segment,
    SegmentVideo,
    TransparencyHint,
    TransparencyTwoMixtures,
    TransparencyVideo,
    WatermarkBbox,
    WatermarkMulti,
    Dehaze,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::Segment,
        TaskKind::SegmentVideo,
        TaskKind::TransparencyHint,
        TaskKind::TransparencyTwoMixtures,
        TaskKind::TransparencyVideo,
        TaskKind::WatermarkBbox,
        TaskKind::WatermarkMulti,
        TaskKind::Dehaze,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Segment => "segment",
            TaskKind::SegmentVideo => "segment_video",
            TaskKind::TransparencyHint => "transparency_hint",
            TaskKind::TransparencyTwoMixtures => "transparency_two_mixtures",
            TaskKind::TransparencyVideo => "transparency_video",
            TaskKind::WatermarkBbox => "watermark_bbox",
            TaskKind::WatermarkMulti => "watermark_multi",
            TaskKind::Dehaze => "dehaze",
        }
    }

    pub fn is_video(&self) -> bool {
        matches!(self, TaskKind::SegmentVideo | TaskKind::TransparencyVideo)
    }

    /// Default objective weights.
    pub fn default_weights(&self) -> LossWeights {
        match self {
            TaskKind::Dehaze => LossWeights::dehaze(),
            TaskKind::TransparencyTwoMixtures => LossWeights::two_mixtures(),
            _ => LossWeights::segmentation(),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown task '{s}'")))
    }
}

/// How constant opacities are produced in transparency tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaModel {
    /// A learnable scalar per mixture, squashed by a sigmoid.
    #[default]
    Scalar,
    /// The spatial mean of a one-channel generator output.
    Dip,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AirlightInit {
    #[default]
    DarkChannel,
    Provided([f64; 3]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: TaskKind,
    pub weights: LossWeights,
    /// Saliency guidance for segmentation and single-mixture transparency.
    pub saliency_hints: bool,
    pub hint_iterations: usize,
    pub hint_fade: Fade,
    pub bbox: Option<BBox>,
    pub airlight: AirlightInit,
    pub noise_delta_ratio: f64,
    pub alpha_model: AlphaModel,
    pub exclusion_scales: usize,
    /// Architecture of the layer generators; output channels follow the input.
    pub generator: GeneratorSpec,
    /// Architecture of mask / opacity / transmission generators.
    pub mask_generator: GeneratorSpec,
}

impl TaskConfig {
    pub fn new(task: TaskKind) -> Self {
        TaskConfig {
            task,
            weights: task.default_weights(),
            saliency_hints: matches!(task, TaskKind::Segment | TaskKind::TransparencyHint),
            hint_iterations: HINT_ITERATIONS,
            hint_fade: Fade::Step,
            bbox: None,
            airlight: AirlightInit::DarkChannel,
            noise_delta_ratio: NOISE_DELTA_RATIO,
            alpha_model: AlphaModel::Scalar,
            exclusion_scales: EXCLUSION_SCALES,
            generator: GeneratorSpec::default(),
            mask_generator: GeneratorSpec::default().with_output_channels(1),
        }
    }

    /// Uses `spec` for every generator (mask generators get one output channel).
    pub fn with_generator(mut self, spec: GeneratorSpec) -> Self {
        self.mask_generator = spec.clone().with_output_channels(1);
        self.generator = spec;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.generator.validate()?;
        self.mask_generator.validate()?;
        if !(self.noise_delta_ratio >= 0.0 && self.noise_delta_ratio.is_finite()) {
            return Err(Error::config("noise delta ratio must be non-negative"));
        }
        if let AirlightInit::Provided(a) = self.airlight {
            if !a.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::config("provided airlight must lie in [0, 1]^3"));
            }
        }
        Ok(())
    }
}

/// A generator evaluated on one of the graph's noise fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Source {
    pub generator: usize,
    pub noise: usize,
}

impl Source {
    pub fn new(generator: usize, noise: usize) -> Self {
        Source { generator, noise }
    }
}

/// Post-processing of a mask generator's sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskMap {
    Identity,
    /// `floor + (1 - floor) * m`, keeping transmissions away from zero.
    Transmission,
    /// Zero outside the box.
    BBox(BBox),
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskSource {
    Generator { source: Source, map: MaskMap },
    /// `sigmoid` of the graph's learnable logit `param`.
    Opacity { param: usize },
    GeneratorMean { source: Source },
}

/// Which layer the mask weights in `m * a + (1 - m) * b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerRole {
    First,
    Second,
}

/// One observed image and the wiring that reconstructs it.
#[derive(Clone, Debug)]
pub struct Observation<T> {
    pub target: Image<T>,
    pub y1: Source,
    pub y2: Option<Source>,
    pub mask: Option<MaskSource>,
    pub weighted: LayerRole,
    pub hinted: bool,
}

pub struct TaskGraph<T> {
    pub kind: Option<TaskKind>,
    pub generators: Vec<Generator<T>>,
    pub noises: Vec<NoiseField<T>>,
    /// Logits of learnable opacities.
    pub opacities: Vec<T>,
    pub observations: Vec<Observation<T>>,
    pub objective: ObjectiveConfig<T>,
    pub hints: HintSchedule<T>,
    /// Evaluate one random observation per iteration instead of all of them.
    pub sample_one_observation: bool,
    pub warnings: Vec<Warning>,
}

impl<T: Scalar> TaskGraph<T> {
    pub fn num_generators(&self) -> usize {
        self.generators.len()
    }

    /// One generator reconstructing `input` alone.
    pub fn single(input: &Image<T>, spec: &GeneratorSpec, seed: u64, iterations: usize) -> Result<Self> {
        let (c, h, w) = input.shape();
        let spec = spec.clone().with_output_channels(c);
        let mut b = Builder::new(seed, iterations, h, w);
        let g = b.generator(&spec)?;
        let n = b.noise(spec.input_channels);
        Ok(b.finish(
            None,
            vec![Observation {
                target: input.clone(),
                y1: Source::new(g, n),
                y2: None,
                mask: None,
                weighted: LayerRole::First,
                hinted: false,
            }],
            reconstruction_only(),
            no_hints(),
            false,
        ))
    }
}

/// Allocates generators and noises with seeds derived from their index.
struct Builder<T> {
    seed: u64,
    iterations: usize,
    h: usize,
    w: usize,
    generators: Vec<Generator<T>>,
    noises: Vec<NoiseField<T>>,
    opacities: Vec<T>,
}

impl<T: Scalar> Builder<T> {
    fn new(seed: u64, iterations: usize, h: usize, w: usize) -> Self {
        Builder {
            seed,
            iterations,
            h,
            w,
            generators: Vec::new(),
            noises: Vec::new(),
            opacities: Vec::new(),
        }
    }

    fn generator(&mut self, spec: &GeneratorSpec) -> Result<usize> {
        let seed = derive_seed(self.seed, GENERATOR_STREAM, self.generators.len() as u64);
        self.generators.push(sized_generator(spec, seed, self.h, self.w)?);
        Ok(self.generators.len() - 1)
    }

    fn noise(&mut self, channels: usize) -> usize {
        let seed = derive_seed(self.seed, NOISE_STREAM, self.noises.len() as u64);
        self.noises
            .push(default_noise(channels, self.h, self.w, seed, self.iterations));
        self.noises.len() - 1
    }

    /// `frames` noise fields `z1, z1 + d2, z1 + d2 + d3, ...` with each step
    /// scaled to `ratio * |z1|`.
    fn temporal_noises(&mut self, channels: usize, frames: usize, ratio: f64) -> Vec<usize> {
        let first = self.noise(channels);
        let stream = derive_seed(self.seed, DELTA_STREAM, first as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let base = self.noises[first].base.clone();
        let norm = base.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        let mut current = base;
        let mut out = vec![first];
        for i in 1..frames {
            let delta: Vec<f64> = (0..current.len()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let dn = delta.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let s = ratio * norm / dn;
            for (v, d) in current.data_mut().iter_mut().zip(&delta) {
                *v += T::lit(d * s);
            }
            let mut field = self.noises[first].clone();
            field.base = current.clone();
            field.seed = derive_seed(self.seed, NOISE_STREAM, (first + i * 1000) as u64);
            self.noises.push(field);
            out.push(self.noises.len() - 1);
        }
        out
    }

    fn opacity(&mut self) -> usize {
        let k = self.opacities.len();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, OPACITY_STREAM, k as u64));
        self.opacities.push(T::lit(rng.gen_range(-0.5..0.5)));
        k
    }

    fn finish(
        self,
        kind: Option<TaskKind>,
        observations: Vec<Observation<T>>,
        objective: ObjectiveConfig<T>,
        hints: HintSchedule<T>,
        sample_one: bool,
    ) -> TaskGraph<T> {
        TaskGraph {
            kind,
            generators: self.generators,
            noises: self.noises,
            opacities: self.opacities,
            observations,
            objective,
            hints,
            sample_one_observation: sample_one,
            warnings: Vec::new(),
        }
    }
}

fn objective<T: Scalar>(cfg: &TaskConfig, reg: RegSelector<T>) -> ObjectiveConfig<T> {
    let mut o = ObjectiveConfig::new(cfg.weights.clone(), reg);
    o.exclusion_scales = cfg.exclusion_scales;
    o
}

fn saliency_schedule<T: Scalar>(cfg: &TaskConfig, input: &Image<T>) -> Result<HintSchedule<T>> {
    if !cfg.saliency_hints {
        return Ok(HintSchedule::none());
    }
    Ok(HintSchedule {
        saliency: Some(compute_saliency(input)?),
        bbox: cfg.bbox,
        active_until: cfg.hint_iterations,
        fade: cfg.hint_fade,
    })
}

fn check_frames<T: Scalar>(frames: &[Image<T>], min: usize, what: &str) -> Result<()> {
    if frames.len() < min {
        return Err(Error::config(format!(
            "{what} needs at least {min} inputs, got {}",
            frames.len()
        )));
    }
    let first = &frames[0];
    if first.height() == 0 || first.width() == 0 {
        return Err(Error::shape("empty input image"));
    }
    for f in &frames[1..] {
        if !f.same_shape(first) {
            return Err(Error::shape(format!(
                "{what}: input {:?} differs from {:?}",
                f.shape(),
                first.shape()
            )));
        }
    }
    Ok(())
}

fn layer_spec(cfg: &TaskConfig, channels: usize) -> GeneratorSpec {
    cfg.generator.clone().with_output_channels(channels)
}

/// Two layer generators and a mask generator; binary-mask regularizer;
/// saliency hints.
pub fn build_segmentation<T: Scalar>(
    input: &Image<T>,
    cfg: &TaskConfig,
    seed: u64,
    iterations: usize,
) -> Result<TaskGraph<T>> {
    cfg.validate()?;
    check_frames(std::slice::from_ref(input), 1, "segmentation")?;
    let (c, h, w) = input.shape();
    let spec = layer_spec(cfg, c);
    let mut b = Builder::new(seed, iterations, h, w);
    let (g1, g2, gm) = (b.generator(&spec)?, b.generator(&spec)?, b.generator(&cfg.mask_generator)?);
    let (n1, n2, nm) = (
        b.noise(spec.input_channels),
        b.noise(spec.input_channels),
        b.noise(cfg.mask_generator.input_channels),
    );
    let obs = Observation {
        target: input.clone(),
        y1: Source::new(g1, n1),
        y2: Some(Source::new(g2, n2)),
        mask: Some(MaskSource::Generator {
            source: Source::new(gm, nm),
            map: MaskMap::Identity,
        }),
        weighted: LayerRole::First,
        hinted: cfg.saliency_hints,
    };
    let hints = saliency_schedule(cfg, input)?;
    Ok(b.finish(
        Some(TaskKind::Segment),
        vec![obs],
        objective(cfg, RegSelector::BinaryMask),
        hints,
        false,
    ))
}

/// Three shared generators; frame `i` differs only through its noise inputs.
pub fn build_video_segmentation<T: Scalar>(
    frames: &[Image<T>],
    cfg: &TaskConfig,
    seed: u64,
    iterations: usize,
) -> Result<TaskGraph<T>> {
    cfg.validate()?;
    check_frames(frames, 2, "video segmentation")?;
    let (c, h, w) = frames[0].shape();
    let spec = layer_spec(cfg, c);
    let mut b = Builder::new(seed, iterations, h, w);
    let (g1, g2, gm) = (b.generator(&spec)?, b.generator(&spec)?, b.generator(&cfg.mask_generator)?);
    let r = cfg.noise_delta_ratio;
    let z1 = b.temporal_noises(spec.input_channels, frames.len(), r);
    let z2 = b.temporal_noises(spec.input_channels, frames.len(), r);
    let zm = b.temporal_noises(cfg.mask_generator.input_channels, frames.len(), r);
    let observations = frames
        .iter()
        .enumerate()
        .map(|(i, f)| Observation {
            target: f.clone(),
            y1: Source::new(g1, z1[i]),
            y2: Some(Source::new(g2, z2[i])),
            mask: Some(MaskSource::Generator {
                source: Source::new(gm, zm[i]),
                map: MaskMap::Identity,
            }),
            weighted: LayerRole::First,
            hinted: false,
        })
        .collect();
    Ok(b.finish(
        Some(TaskKind::SegmentVideo),
        observations,
        objective(cfg, RegSelector::BinaryMask),
        no_hints(),
        true,
    ))
}

/// Inputs of a transparency task.
pub enum TransparencyInput<'a, T> {
    Single(&'a Image<T>),
    TwoMixtures(&'a Image<T>, &'a Image<T>),
    Video(&'a [Image<T>]),
}

/// Two layer generators shared across all mixtures with constant opacities.
pub fn build_transparency<T: Scalar>(
    input: TransparencyInput<'_, T>,
    cfg: &TaskConfig,
    seed: u64,
    iterations: usize,
) -> Result<TaskGraph<T>> {
    cfg.validate()?;
    let (kind, mixtures): (TaskKind, Vec<Image<T>>) = match input {
        TransparencyInput::Single(i) => (TaskKind::TransparencyHint, vec![i.clone()]),
        TransparencyInput::TwoMixtures(a, b) => {
            (TaskKind::TransparencyTwoMixtures, vec![a.clone(), b.clone()])
        }
        TransparencyInput::Video(f) => (TaskKind::TransparencyVideo, f.to_vec()),
    };
    if kind != cfg.task {
        return Err(Error::config(format!(
            "task {} given inputs for {}",
            cfg.task, kind
        )));
    }
    let min = if kind == TaskKind::TransparencyHint { 1 } else { 2 };
    check_frames(&mixtures, min, kind.name())?;
    if kind == TaskKind::TransparencyTwoMixtures && mixtures.len() != 2 {
        return Err(Error::config("two-mixture transparency needs exactly 2 inputs"));
    }
    let (c, h, w) = mixtures[0].shape();
    let spec = layer_spec(cfg, c);
    let mut b = Builder::new(seed, iterations, h, w);
    let (g1, g2) = (b.generator(&spec)?, b.generator(&spec)?);
    let k = mixtures.len();
    let (z1, z2) = if kind == TaskKind::TransparencyVideo {
        let z1 = b.temporal_noises(spec.input_channels, k, cfg.noise_delta_ratio);
        let n2 = b.noise(spec.input_channels);
        (z1, vec![n2; k])
    } else {
        let (n1, n2) = (b.noise(spec.input_channels), b.noise(spec.input_channels));
        (vec![n1; k], vec![n2; k])
    };
    let masks: Vec<MaskSource> = match cfg.alpha_model {
        AlphaModel::Scalar => (0..k).map(|_| MaskSource::Opacity { param: b.opacity() }).collect(),
        AlphaModel::Dip => {
            let gm = b.generator(&cfg.mask_generator)?;
            (0..k)
                .map(|_| MaskSource::GeneratorMean {
                    source: Source::new(gm, b.noise(cfg.mask_generator.input_channels)),
                })
                .collect()
        }
    };
    let hinted = kind == TaskKind::TransparencyHint && cfg.saliency_hints;
    let observations = mixtures
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(i, (m, mask))| Observation {
            target: m.clone(),
            y1: Source::new(g1, z1[i]),
            y2: Some(Source::new(g2, z2[i])),
            mask: Some(mask),
            weighted: LayerRole::First,
            hinted,
        })
        .collect();
    let hints = if hinted {
        saliency_schedule(cfg, &mixtures[0])?
    } else {
        no_hints()
    };
    let mut graph = b.finish(
        Some(kind),
        observations,
        objective(cfg, RegSelector::None),
        hints,
        kind == TaskKind::TransparencyVideo,
    );
    if kind == TaskKind::TransparencyHint && !hinted {
        log::warn!("single-mixture transparency without hints: the layer split is ambiguous");
        graph.warnings.push(Warning::AmbiguousSingleMixture);
    }
    Ok(graph)
}

/// Clean-image generators, one shared watermark generator and one shared
/// opacity-mask generator. The mask weights the watermark layer.
pub fn build_watermark<T: Scalar>(
    inputs: &[Image<T>],
    cfg: &TaskConfig,
    seed: u64,
    iterations: usize,
) -> Result<TaskGraph<T>> {
    cfg.validate()?;
    check_frames(inputs, 1, "watermark removal")?;
    let single = inputs.len() == 1;
    let bbox = match (single, cfg.bbox) {
        (true, None) => {
            return Err(Error::config(
                "single-image watermark removal needs a bounding box",
            ))
        }
        (true, Some(b)) => {
            b.check(inputs[0].height(), inputs[0].width())?;
            Some(b)
        }
        (false, _) => None,
    };
    let (c, h, w) = inputs[0].shape();
    let spec = layer_spec(cfg, c);
    let mut b = Builder::new(seed, iterations, h, w);
    let clean: Vec<(usize, usize)> = (0..inputs.len())
        .map(|_| Ok((b.generator(&spec)?, b.noise(spec.input_channels))))
        .collect::<Result<_>>()?;
    let gw = b.generator(&spec)?;
    let nw = b.noise(spec.input_channels);
    let gm = b.generator(&cfg.mask_generator)?;
    let nm = b.noise(cfg.mask_generator.input_channels);
    let map = bbox.map_or(MaskMap::Identity, MaskMap::BBox);
    let observations = inputs
        .iter()
        .zip(&clean)
        .map(|(img, &(g, n))| Observation {
            target: img.clone(),
            y1: Source::new(g, n),
            y2: Some(Source::new(gw, nw)),
            mask: Some(MaskSource::Generator {
                source: Source::new(gm, nm),
                map: map.clone(),
            }),
            weighted: LayerRole::Second,
            hinted: false,
        })
        .collect();
    let kind = if single {
        TaskKind::WatermarkBbox
    } else {
        TaskKind::WatermarkMulti
    };
    Ok(b.finish(
        Some(kind),
        observations,
        objective(cfg, RegSelector::None),
        no_hints(),
        false,
    ))
}

/// Haze-free image `J`, airlight map `A` and transmission `t`:
/// `I = t J + (1 - t) A`.
pub fn build_dehaze<T: Scalar>(
    input: &Image<T>,
    cfg: &TaskConfig,
    seed: u64,
    iterations: usize,
) -> Result<TaskGraph<T>> {
    cfg.validate()?;
    if input.channels() != 3 {
        return Err(Error::shape("dehazing needs a 3-channel image"));
    }
    let (_, h, w) = input.shape();
    let airlight = match cfg.airlight {
        AirlightInit::DarkChannel => estimate_airlight(input)?,
        AirlightInit::Provided(a) => [T::lit(a[0]), T::lit(a[1]), T::lit(a[2])],
    };
    let spec = layer_spec(cfg, 3);
    let mut b = Builder::new(seed, iterations, h, w);
    let (gj, ga, gt) = (b.generator(&spec)?, b.generator(&spec)?, b.generator(&cfg.mask_generator)?);
    let (nj, na, nt) = (
        b.noise(spec.input_channels),
        b.noise(spec.input_channels),
        b.noise(cfg.mask_generator.input_channels),
    );
    let obs = Observation {
        target: input.clone(),
        y1: Source::new(gj, nj),
        y2: Some(Source::new(ga, na)),
        mask: Some(MaskSource::Generator {
            source: Source::new(gt, nt),
            map: MaskMap::Transmission,
        }),
        weighted: LayerRole::First,
        hinted: false,
    };
    Ok(b.finish(
        Some(TaskKind::Dehaze),
        vec![obs],
        objective(cfg, RegSelector::Dehaze { airlight }),
        no_hints(),
        false,
    ))
}

/// Builds the graph selected by `cfg.task`, checking the input count.
pub fn build_task<T: Scalar>(
    inputs: &[Image<T>],
    cfg: &TaskConfig,
    seed: u64,
    iterations: usize,
) -> Result<TaskGraph<T>> {
    let arity = |ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "{} expects {what}, got {} inputs",
                cfg.task,
                inputs.len()
            )))
        }
    };
    match cfg.task {
        TaskKind::Segment => {
            arity(inputs.len() == 1, "1 input")?;
            build_segmentation(&inputs[0], cfg, seed, iterations)
        }
        TaskKind::SegmentVideo => {
            arity(inputs.len() >= 2, "at least 2 frames")?;
            build_video_segmentation(inputs, cfg, seed, iterations)
        }
        TaskKind::TransparencyHint => {
            arity(inputs.len() == 1, "1 input")?;
            build_transparency(TransparencyInput::Single(&inputs[0]), cfg, seed, iterations)
        }
        TaskKind::TransparencyTwoMixtures => {
            arity(inputs.len() == 2, "2 inputs")?;
            build_transparency(
                TransparencyInput::TwoMixtures(&inputs[0], &inputs[1]),
                cfg,
                seed,
                iterations,
            )
        }
        TaskKind::TransparencyVideo => {
            arity(inputs.len() >= 2, "at least 2 frames")?;
            build_transparency(TransparencyInput::Video(inputs), cfg, seed, iterations)
        }
        TaskKind::WatermarkBbox => {
            arity(inputs.len() == 1, "1 input")?;
            build_watermark(inputs, cfg, seed, iterations)
        }
        TaskKind::WatermarkMulti => {
            arity(inputs.len() >= 2, "at least 2 inputs")?;
            build_watermark(inputs, cfg, seed, iterations)
        }
        TaskKind::Dehaze => {
            arity(inputs.len() == 1, "1 input")?;
            build_dehaze(&inputs[0], cfg, seed, iterations)
        }
    }
}

/// Per-pixel channel minimum followed by a `window x window` minimum filter.
pub fn dark_channel<T: Scalar>(input: &Image<T>, window: usize) -> Image<T> {
    let (c, h, w) = input.shape();
    let min_c = Image::from_fn(1, h, w, |_, y, x| {
        (0..c).map(|k| input.get(k, y, x)).fold(T::infinity(), T::min)
    });
    let r = (window / 2) as isize;
    let rows = Image::from_fn(1, h, w, |_, y, x| {
        (-r..=r)
            .map(|d| min_c.get(0, y, clamp_index(x as isize + d, w)))
            .fold(T::infinity(), T::min)
    });
    Image::from_fn(1, h, w, |_, y, x| {
        (-r..=r)
            .map(|d| rows.get(0, clamp_index(y as isize + d, h), x))
            .fold(T::infinity(), T::min)
    })
}

/// Airlight colour: mean colour of the brightest 0.1% of dark-channel pixels
/// (at least one), clamped to `[0, 1]`.
pub fn estimate_airlight<T: Scalar>(input: &Image<T>) -> Result<[T; 3]> {
    if input.channels() != 3 || input.is_empty() {
        return Err(Error::shape("airlight estimation needs a non-empty 3-channel image"));
    }
    let dark = dark_channel(input, DARK_CHANNEL_WINDOW);
    let n = dark.len();
    let top = ((n as f64 * AIRLIGHT_TOP_FRACTION).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    // brightest first; ties broken by position for determinism
    order.sort_by(|&a, &b| {
        dark.data()[b]
            .partial_cmp(&dark.data()[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let w = input.width();
    let mut acc = [T::zero(); 3];
    for &i in &order[..top] {
        let (y, x) = (i / w, i % w);
        for (c, a) in acc.iter_mut().enumerate() {
            *a += input.get(c, y, x);
        }
    }
    let nt = T::from_usize_lossy(top);
    Ok(acc.map(|a| (a / nt).max(T::zero()).min(T::one())))
}
