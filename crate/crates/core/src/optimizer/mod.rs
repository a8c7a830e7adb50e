//! The joint optimization loop: evaluate every generator of a task graph on
//! its (augmented, perturbed) noise, assemble the objective, and take one
//! Adam step on all parameters.

pub mod augment;

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composition::{mix_unchecked, LayerExtras, LayerSet, Mask};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorSpec, NoiseField, Trace, NOISE_AMPLITUDE};
use crate::hints::{hint_weight_maps, HintSchedule};
use crate::image::Image;
use crate::losses::{evaluate_objective, FrameLoss, LossReport, LossWeights, ObjectiveConfig, RegSelector};
use crate::nn::sigmoid;
use crate::scalar::Scalar;
use crate::seeds::derive_seed;
use crate::tasks::{LayerRole, MaskMap, MaskSource, Source, TaskGraph, TRANSMISSION_FLOOR};

use augment::{dihedral_transform, inverse_transform, NUM_TRANSFORMS};

const AUGMENT_STREAM: u64 = 0xa9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub augment: bool,
    pub seed: u64,
    /// CSV row interval; 0 disables logging.
    pub log_every: usize,
    /// Best-loss snapshot check interval.
    pub snapshot_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            iterations: 4000,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            augment: true,
            seed: 0,
            log_every: 0,
            snapshot_every: 1,
        }
    }
}

impl OptimConfig {
    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if self.snapshot_every == 0 {
            return Err(Error::config("snapshot_every must be at least 1"));
        }
        Ok(())
    }
}

/// Adam moments for one flat parameter buffer.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize, lr: f64, betas: (f64, f64)) -> Self {
        Adam {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
            lr,
            betas,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = T::lit(self.lr * c2.sqrt() / c1);
        let eps = T::lit(self.eps * c2.sqrt());
        let (b1, b2) = (T::lit(b1), T::lit(b2));
        let (ib1, ib2) = (T::one() - b1, T::one() - b2);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + ib1 * g;
            self.v[i] = b2 * self.v[i] + ib2 * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

/// Bookkeeping of one run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunState {
    pub iteration: usize,
    /// `(total, reconst, excl, reg)` per completed iteration.
    pub history: Vec<[f64; 4]>,
    /// Running minimum of the total, per completed iteration.
    pub best_curve: Vec<f64>,
    pub best_total: f64,
    pub best_iteration: usize,
    /// Loss terms at the best iteration (per observation when sampled).
    pub best_report: LossReport,
    pub seed: u64,
}

impl RunState {
    pub fn totals(&self) -> Vec<f64> {
        self.history.iter().map(|r| r[0]).collect()
    }
}

pub struct Outcome<T> {
    /// One decomposition per observation, in original orientation.
    pub layers: Vec<LayerSet<T>>,
    pub state: RunState,
    /// Learned opacities after the last step.
    pub opacities: Vec<T>,
}

struct Evaluated<T> {
    output: Image<T>,
    trace: Trace<T>,
    grad: Image<T>,
}

fn apply_mask_map<T: Scalar>(out: &Image<T>, map: &MaskMap, transform: usize, size: (usize, usize)) -> Result<Image<T>> {
    Ok(match map {
        MaskMap::Identity => out.clone(),
        MaskMap::Transmission => {
            let floor = T::lit(TRANSMISSION_FLOOR);
            out.map(|v| floor + (T::one() - floor) * v)
        }
        MaskMap::BBox(b) => {
            let ind = dihedral_transform(&b.indicator::<T>(size.0, size.1)?, transform)?;
            out.zip_map(&ind, |v, i| v * i)
        }
    })
}

fn mask_map_backward<T: Scalar>(g: &Image<T>, map: &MaskMap, transform: usize, size: (usize, usize)) -> Result<Image<T>> {
    Ok(match map {
        MaskMap::Transmission => g.scale(T::one() - T::lit(TRANSMISSION_FLOOR)),
        // both remaining maps are linear and self-adjoint
        _ => apply_mask_map(g, map, transform, size)?,
    })
}

/// Runs `config.iterations` joint Adam steps on `graph`. CSV loss rows go to
/// `log` every `config.log_every` iterations when given.
pub fn optimize<T: Scalar>(
    graph: &mut TaskGraph<T>,
    config: &OptimConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Outcome<T>> {
    config.validate()?;
    graph.objective.weights.validate()?;
    if graph.observations.is_empty() {
        return Err(Error::config("task graph has no observations"));
    }
    let n_obs = graph.observations.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, AUGMENT_STREAM, 0));
    let mut adams: Vec<Adam<T>> = graph
        .generators
        .iter()
        .map(|g| Adam::new(g.num_params(), config.learning_rate, config.adam_betas))
        .collect();
    let mut opacity_adam = Adam::new(graph.opacities.len(), config.learning_rate, config.adam_betas);

    // targets under every dihedral element, built on demand
    let mut targets: Vec<Vec<Option<Image<T>>>> = vec![vec![None; NUM_TRANSFORMS]; n_obs];
    let (h0, w0) = (graph.observations[0].target.height(), graph.observations[0].target.width());
    graph.hints.validate(h0, w0)?;

    let mut state = RunState {
        best_total: f64::INFINITY,
        seed: config.seed,
        ..Default::default()
    };
    let mut best_obs: Vec<f64> = vec![f64::INFINITY; n_obs];
    let mut snapshots: Vec<Option<LayerSet<T>>> = vec![None; n_obs];
    let mut frame_best: Vec<FrameLoss> = vec![FrameLoss::default(); n_obs];

    if let Some(w) = log.as_deref_mut() {
        if config.log_every > 0 {
            writeln!(w, "iter,total,reconst,excl,reg").map_err(|e| Error::io("<log>", e))?;
        }
    }

    // a zero budget still reports the initial outputs
    let budget = config.iterations.max(1);
    for iteration in 0..budget {
        let transform = if config.augment {
            rng.gen_range(0..NUM_TRANSFORMS)
        } else {
            0
        };
        let active: Vec<usize> = if graph.sample_one_observation {
            let pick = rng.gen_range(0..n_obs);
            // short budgets: the last step covers frames never drawn
            if iteration + 1 == budget && snapshots.iter().any(Option::is_none) {
                (0..n_obs).collect()
            } else {
                vec![pick]
            }
        } else {
            (0..n_obs).collect()
        };

        let mut cache: BTreeMap<(usize, usize), Evaluated<T>> = BTreeMap::new();
        for &o in &active {
            for src in graph.observations[o].sources() {
                if let std::collections::btree_map::Entry::Vacant(e) = cache.entry((src.generator, src.noise)) {
                    let z = graph.noises[src.noise].sample(iteration, transform);
                    let (output, trace) = graph.generators[src.generator].forward_input(z)?;
                    let grad = Image::zeros(output.channels(), output.height(), output.width());
                    e.insert(Evaluated { output, trace, grad });
                }
            }
        }

        let hint_active = graph.hints.is_active(iteration);
        let hint_maps = if hint_active {
            let (w1, w2) = hint_weight_maps(&graph.hints, iteration, h0, w0)?;
            Some((dihedral_transform(&w1, transform)?, dihedral_transform(&w2, transform)?))
        } else {
            None
        };

        let scale = T::one() / T::from_usize_lossy(active.len());
        let mut opacity_grads = vec![T::zero(); graph.opacities.len()];
        let mut frames = Vec::with_capacity(active.len());
        let mut views = Vec::with_capacity(active.len());
        for &o in &active {
            let obs = &graph.observations[o];
            if targets[o][transform].is_none() {
                targets[o][transform] = Some(dihedral_transform(&obs.target, transform)?);
            }
            let target = targets[o][transform].as_ref().expect("just filled");
            let y1 = &cache[&(obs.y1.generator, obs.y1.noise)].output.clone();
            let y2 = obs.y2.map(|s| cache[&(s.generator, s.noise)].output.clone());
            let mask = match &obs.mask {
                None => None,
                Some(MaskSource::Generator { source, map }) => Some(Mask::Spatial(apply_mask_map(
                    &cache[&(source.generator, source.noise)].output,
                    map,
                    transform,
                    (h0, w0),
                )?)),
                Some(MaskSource::Opacity { param }) => Some(Mask::Scalar(sigmoid(graph.opacities[*param]))),
                Some(MaskSource::GeneratorMean { source }) => {
                    Some(Mask::Scalar(cache[&(source.generator, source.noise)].output.mean()))
                }
            };
            let hints = if obs.hinted { hint_maps.as_ref() } else { None };
            let (mut frame, grads) = match (&y2, &mask, obs.weighted) {
                (Some(y2), Some(m), LayerRole::First) => evaluate_objective(
                    target,
                    y1,
                    Some((y2, m)),
                    &graph.objective,
                    hints.map(|(a, b)| (a, b)),
                )?,
                (Some(y2), Some(m), LayerRole::Second) => {
                    let (f, mut g) = evaluate_objective(
                        target,
                        y2,
                        Some((y1, m)),
                        &graph.objective,
                        hints.map(|(a, b)| (b, a)),
                    )?;
                    let g2 = g.y2.take().expect("second layer gradient");
                    g.y2 = Some(std::mem::replace(&mut g.y1, g2));
                    (f, g)
                }
                (None, None, _) => evaluate_objective(target, y1, None, &graph.objective, None)?,
                _ => return Err(Error::config("observation needs both a second layer and a mask")),
            };
            frame.index = o;

            cache.get_mut(&(obs.y1.generator, obs.y1.noise)).expect("cached").grad.add_assign(&grads.y1.scale(scale));
            if let (Some(s), Some(g)) = (obs.y2, grads.y2.as_ref()) {
                cache.get_mut(&(s.generator, s.noise)).expect("cached").grad.add_assign(&g.scale(scale));
            }
            match (&obs.mask, grads.mask) {
                (Some(MaskSource::Generator { source, map }), Some(Mask::Spatial(g))) => {
                    let g = mask_map_backward(&g, map, transform, (h0, w0))?;
                    cache.get_mut(&(source.generator, source.noise)).expect("cached").grad.add_assign(&g.scale(scale));
                }
                (Some(MaskSource::Opacity { param }), Some(Mask::Scalar(g))) => {
                    let a = sigmoid(graph.opacities[*param]);
                    opacity_grads[*param] += scale * g * a * (T::one() - a);
                }
                (Some(MaskSource::GeneratorMean { source }), Some(Mask::Scalar(g))) => {
                    let e = cache.get_mut(&(source.generator, source.noise)).expect("cached");
                    let per = scale * g / T::from_usize_lossy(e.output.len());
                    e.grad.data_mut().iter_mut().for_each(|v| *v += per);
                }
                _ => {}
            }
            frames.push(frame);
            views.push((o, y2, mask));
        }

        let report = LossReport::from_frames(frames.clone());
        if !report.total.is_finite() {
            return Err(Error::Numerical {
                iteration,
                message: format!("non-finite loss {:?}", report.row()),
                history: state.history.clone(),
            });
        }

        // snapshot before stepping: these outputs belong to the current parameters
        if iteration % config.snapshot_every == 0 || iteration + 1 == budget {
            let improved: Vec<usize> = if graph.sample_one_observation {
                frames
                    .iter()
                    .filter(|f| f.total < best_obs[f.index])
                    .map(|f| f.index)
                    .collect()
            } else if report.total < state.best_total {
                (0..n_obs).collect()
            } else {
                Vec::new()
            };
            for (k, (o, y2, mask)) in views.iter().enumerate() {
                if !improved.contains(o) {
                    continue;
                }
                let obs = &graph.observations[*o];
                let y1 = inverse_transform(&cache[&(obs.y1.generator, obs.y1.noise)].output, transform)?;
                snapshots[*o] = Some(build_layerset(graph, *o, y1, y2.as_ref(), mask.as_ref(), transform)?);
                best_obs[*o] = frames[k].total;
                frame_best[*o] = frames[k].clone();
            }
        }
        if report.total < state.best_total {
            state.best_total = report.total;
            state.best_iteration = iteration;
        }
        state.history.push(report.row());
        state.best_curve.push(state.best_total);
        state.iteration = iteration + 1;

        if let Some(w) = log.as_deref_mut() {
            if config.log_every > 0 && iteration % config.log_every == 0 {
                let r = report.row();
                writeln!(w, "{iteration},{},{},{},{}", r[0], r[1], r[2], r[3])
                    .map_err(|e| Error::io("<log>", e))?;
            }
        }
        if config.iterations == 0 {
            state.history.clear();
            state.best_curve.clear();
            state.iteration = 0;
            break;
        }

        for g in graph.generators.iter_mut() {
            g.zero_grad();
        }
        for ((gen, _), e) in &cache {
            graph.generators[*gen].backward(&e.trace, &e.grad)?;
        }
        for (g, adam) in graph.generators.iter_mut().zip(adams.iter_mut()) {
            let (p, gr) = g.params_and_grads();
            adam.step(p, gr);
        }
        if !graph.opacities.is_empty() {
            opacity_adam.step(&mut graph.opacities, &opacity_grads);
        }
    }

    state.best_report = LossReport::from_frames(frame_best.clone());
    let layers = snapshots
        .into_iter()
        .map(|s| s.ok_or_else(|| Error::config("observation never evaluated")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Outcome {
        layers,
        state,
        opacities: graph.opacities.iter().map(|&t| sigmoid(t)).collect(),
    })
}

fn build_layerset<T: Scalar>(
    graph: &TaskGraph<T>,
    o: usize,
    y1: Image<T>,
    y2: Option<&Image<T>>,
    mask: Option<&Mask<T>>,
    transform: usize,
) -> Result<LayerSet<T>> {
    let obs = &graph.observations[o];
    let (y2, mask) = match (y2, mask) {
        (Some(y2), Some(m)) => {
            let m = match m {
                Mask::Spatial(img) => Mask::Spatial(inverse_transform(img, transform)?),
                Mask::Scalar(a) => Mask::Scalar(*a),
            };
            (inverse_transform(y2, transform)?, m)
        }
        _ => (Image::zeros(y1.channels(), y1.height(), y1.width()), Mask::Scalar(T::one())),
    };
    let reconstruction = match obs.weighted {
        LayerRole::First => mix_unchecked(&mask, &y1, &y2),
        LayerRole::Second => mix_unchecked(&mask, &y2, &y1),
    };
    let airlight_color = match &graph.objective.reg {
        RegSelector::Dehaze { airlight } => Some(*airlight),
        _ => None,
    };
    Ok(LayerSet {
        y1,
        y2,
        mask,
        reconstruction,
        extras: LayerExtras {
            airlight_color,
            mask_weights_second: obs.weighted == LayerRole::Second,
            ..Default::default()
        },
    })
}

/// Fits one generator to `input` with the reconstruction loss alone.
pub fn single_dip_fit<T: Scalar>(
    input: &Image<T>,
    spec: &GeneratorSpec,
    config: &OptimConfig,
) -> Result<RunState> {
    let mut graph = TaskGraph::single(input, spec, config.seed, config.iterations)?;
    Ok(optimize(&mut graph, config, None)?.state)
}

/// Noise field of a generator input for an `h x w` target with the default
/// perturbation schedule for `iterations`.
pub(crate) fn default_noise<T: Scalar>(
    channels: usize,
    h: usize,
    w: usize,
    seed: u64,
    iterations: usize,
) -> NoiseField<T> {
    NoiseField::uniform(channels, h, w, T::lit(NOISE_AMPLITUDE), seed).with_default_perturbation(iterations)
}

/// Builds a generator sized for an `h x w` input.
pub(crate) fn sized_generator<T: Scalar>(spec: &GeneratorSpec, seed: u64, h: usize, w: usize) -> Result<Generator<T>> {
    Ok(Generator::new(spec, seed)?.with_input_size(h, w))
}

/// Hint schedule shorthand for graphs without guidance.
pub(crate) fn no_hints<T: Scalar>() -> HintSchedule<T> {
    HintSchedule::none()
}

/// Objective with reconstruction only.
pub(crate) fn reconstruction_only<T: Scalar>() -> ObjectiveConfig<T> {
    ObjectiveConfig::new(LossWeights::new(0.0, 0.0), RegSelector::None)
}

impl<T: Scalar> crate::tasks::Observation<T> {
    fn sources(&self) -> Vec<Source> {
        let mut s = vec![self.y1];
        s.extend(self.y2);
        match &self.mask {
            Some(MaskSource::Generator { source, .. }) | Some(MaskSource::GeneratorMean { source }) => {
                s.push(*source)
            }
            _ => {}
        }
        s
    }
}
