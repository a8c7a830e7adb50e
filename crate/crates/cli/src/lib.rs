//! Command-line driver: argument resolution, the per-task pipeline and batch
//! mode. `main.rs` only maps errors onto exit codes.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dipstack::io::{export_results, load_frames, load_image, list_images, resize_area, to_working_resolution};
use dipstack::io::{FileConfig, FrameOptions, RunManifest, DEFAULT_MAX_SIDE};
use dipstack::postproc::ResolvedLayers;
use dipstack::seeds::derive_seed;
use dipstack::tasks::AlphaModel;
use dipstack::{
    build_task, guided_filter, mixture_complexity_experiment, optimize, resolve_color_ambiguity, BBox, Error, Fade,
    GeneratorSpec, GuidedFilterParams, Image, LayerSet, Mask, MixMode, OptimConfig, Result, TaskConfig, TaskKind,
};

/// Environment variable consulted when no seed is given.
pub const SEED_ENV: &str = "DIPSTACK_SEED";

const BATCH_STREAM: u64 = 0xba7c;

#[derive(Parser, Debug)]
#[command(name = "dipstack", version, about = "Layer decomposition with coupled deep image priors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Foreground/background segmentation of one image.
    Segment(RunArgs),
    /// Segmentation of a directory of frames.
    SegmentVideo(RunArgs),
    /// Transparent layer separation: one image, two mixtures (`--input2`) or
    /// a directory of frames.
    Transparency(RunArgs),
    /// Watermark removal: one image with `--bbox`, or a directory of images
    /// sharing the same watermark.
    Watermark(RunArgs),
    /// Single image dehazing.
    Dehaze(RunArgs),
    /// Mixture-complexity diagnostic over a directory of images.
    Diagnose(RunArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub input2: Option<PathBuf>,
    /// Watermark bounding box as X,Y,W,H.
    #[arg(long)]
    pub bbox: Option<BBox>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Exclusion weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Regularizer weight.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "dipstack_out")]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Treat `--input` as a directory of independent jobs and run N at once.
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl Command {
    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Segment(a)
            | Command::SegmentVideo(a)
            | Command::Transparency(a)
            | Command::Watermark(a)
            | Command::Dehaze(a)
            | Command::Diagnose(a) => a,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Segment(_) => "segment",
            Command::SegmentVideo(_) => "segment-video",
            Command::Transparency(_) => "transparency",
            Command::Watermark(_) => "watermark",
            Command::Dehaze(_) => "dehaze",
            Command::Diagnose(_) => "diagnose",
        }
    }
}

/// Seed from the flag, then the config file, then `DIPSTACK_SEED`, else 0.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>, env: Option<&str>) -> Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("{SEED_ENV} must be an unsigned integer, got '{v}'"))),
        None => Ok(0),
    }
}

/// Everything a run needs, with defaults, config file and flags merged.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub task: TaskConfig,
    pub optim: OptimConfig,
    pub max_side: usize,
    pub frames: FrameOptions,
    pub guided: GuidedFilterParams,
    pub diagnose_modes: Vec<MixMode>,
    pub diagnose_size: usize,
}

fn generator_spec(file: &FileConfig) -> Result<GeneratorSpec> {
    let mut spec = GeneratorSpec::default();
    if let Some(d) = file.depth {
        if d == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        let base = GeneratorSpec::uniform(d, spec.down_channels[0], spec.skip_channels[0], spec.output_channels);
        spec = GeneratorSpec { input_channels: spec.input_channels, ..base };
    }
    let depth = spec.depth;
    if let Some(c) = file.channels {
        spec.down_channels = vec![c; depth];
        spec.up_channels = vec![c; depth];
    }
    if let Some(s) = file.skip_channels {
        spec.skip_channels = vec![s; depth];
    }
    if let Some(c) = file.input_channels {
        spec.input_channels = c;
    }
    if let Some(k) = file.kernel_size {
        spec.kernel_size = k;
    }
    spec.validate()?;
    Ok(spec)
}

fn parse_fade(s: &str) -> Result<Fade> {
    match s {
        "step" => Ok(Fade::Step),
        "linear" => Ok(Fade::Linear),
        _ => Err(Error::config(format!("unknown hint fade '{s}'"))),
    }
}

fn parse_modes(s: &str) -> Result<Vec<MixMode>> {
    match s {
        "superimpose" => Ok(vec![MixMode::Superimpose]),
        "split_lr" => Ok(vec![MixMode::SplitLr]),
        "both" => Ok(vec![MixMode::Superimpose, MixMode::SplitLr]),
        _ => Err(Error::config(format!("unknown diagnose mode '{s}'"))),
    }
}

/// Merges defaults for `kind`, the config file and command-line flags.
pub fn resolve(kind: TaskKind, args: &RunArgs, file: &FileConfig, env_seed: Option<&str>) -> Result<Resolved> {
    let mut task = TaskConfig::new(kind).with_generator(generator_spec(file)?);
    let w = &mut task.weights;
    if let Some(a) = args.alpha.or(file.alpha) {
        w.alpha = a;
    }
    if let Some(b) = args.beta.or(file.beta) {
        w.beta = b;
    }
    w.overrides.extend(file.term_weight_map()?);
    if let Some(v) = file.saliency_hints {
        task.saliency_hints = v;
    }
    if let Some(v) = file.hint_iterations {
        task.hint_iterations = v;
    }
    if let Some(v) = &file.hint_fade {
        task.hint_fade = parse_fade(v)?;
    }
    task.bbox = match (&args.bbox, &file.bbox) {
        (Some(b), _) => Some(*b),
        (None, Some(s)) => Some(s.parse()?),
        (None, None) => None,
    };
    if let Some(a) = file.airlight {
        task.airlight = dipstack::tasks::AirlightInit::Provided(a);
    }
    if let Some(m) = &file.alpha_model {
        task.alpha_model = match m.as_str() {
            "scalar" => AlphaModel::Scalar,
            "dip" => AlphaModel::Dip,
            _ => return Err(Error::config(format!("unknown alpha model '{m}'"))),
        };
    }
    if let Some(r) = file.noise_delta_ratio {
        task.noise_delta_ratio = r;
    }
    if let Some(n) = file.exclusion_scales {
        task.exclusion_scales = n;
    }
    task.validate()?;

    let mut optim = OptimConfig::default();
    optim.iterations = match args.iters.or(file.iterations) {
        Some(n) => n,
        None if kind.is_video() || kind == TaskKind::Dehaze => 8000,
        None => 4000,
    };
    if let Some(lr) = file.learning_rate {
        optim.learning_rate = lr;
    }
    if let Some(a) = file.augment {
        optim.augment = a;
    }
    if let Some(l) = file.log_every {
        optim.log_every = l;
    }
    optim.seed = resolve_seed(args.seed, file.seed, env_seed)?;
    optim.validate()?;

    let max_side = file.max_side.unwrap_or(DEFAULT_MAX_SIDE);
    let frames = FrameOptions {
        max_frames: file.max_frames,
        stride: file.frame_stride.unwrap_or(1),
        max_side: Some(max_side),
    };
    let defaults = GuidedFilterParams::default();
    let guided = GuidedFilterParams::new(
        file.guided_radius.unwrap_or(defaults.radius),
        file.guided_eps.unwrap_or(defaults.eps),
    )?;
    Ok(Resolved {
        task,
        optim,
        max_side,
        frames,
        guided,
        diagnose_modes: parse_modes(file.diagnose_mode.as_deref().unwrap_or("both"))?,
        diagnose_size: file.diagnose_size.unwrap_or(64),
    })
}

/// Task variant selected by a subcommand and the shape of its inputs.
pub fn task_kind(cmd: &Command) -> Result<TaskKind> {
    let a = cmd.args();
    let dir = a.input.is_dir();
    Ok(match cmd {
        Command::Segment(_) => TaskKind::Segment,
        Command::SegmentVideo(_) => TaskKind::SegmentVideo,
        Command::Transparency(_) if a.input2.is_some() => TaskKind::TransparencyTwoMixtures,
        Command::Transparency(_) if dir => TaskKind::TransparencyVideo,
        Command::Transparency(_) => TaskKind::TransparencyHint,
        Command::Watermark(_) if dir => TaskKind::WatermarkMulti,
        Command::Watermark(_) => TaskKind::WatermarkBbox,
        Command::Dehaze(_) => TaskKind::Dehaze,
        Command::Diagnose(_) => return Err(Error::config("diagnose is not a decomposition task")),
    })
}

fn load_inputs(kind: TaskKind, args: &RunArgs, r: &Resolved) -> Result<(Vec<Image<f32>>, Vec<PathBuf>)> {
    match kind {
        TaskKind::SegmentVideo | TaskKind::TransparencyVideo | TaskKind::WatermarkMulti => {
            let files = list_images(&args.input)?;
            Ok((load_frames(&args.input, &r.frames)?, files))
        }
        TaskKind::TransparencyTwoMixtures => {
            let second = args.input2.as_ref().expect("two-mixture task has a second input");
            let a = to_working_resolution(&load_image::<f32>(&args.input)?, r.max_side)?;
            let b = load_image::<f32>(second)?;
            let b = if b.height() >= a.height() && b.width() >= a.width() {
                resize_area(&b, a.height(), a.width())?
            } else {
                b
            };
            Ok((vec![a, b], vec![args.input.clone(), second.clone()]))
        }
        _ => {
            let img = to_working_resolution(&load_image::<f32>(&args.input)?, r.max_side)?;
            Ok((vec![img], vec![args.input.clone()]))
        }
    }
}

/// Guided-filter refinement of spatial masks and removal of the colour
/// offset of transparent layers.
fn finish_layers(kind: TaskKind, layers: Vec<LayerSet<f32>>, inputs: &[Image<f32>], guided: &GuidedFilterParams) -> Result<Vec<LayerSet<f32>>> {
    let transparent = matches!(
        kind,
        TaskKind::TransparencyHint | TaskKind::TransparencyTwoMixtures | TaskKind::TransparencyVideo
    );
    layers
        .into_iter()
        .enumerate()
        .map(|(i, mut l)| {
            let guide = &inputs[i.min(inputs.len() - 1)];
            match &l.mask {
                Mask::Spatial(m) => {
                    let refined = guided_filter(guide, m, guided)?.clamp01();
                    l.mask = Mask::Spatial(refined);
                }
                Mask::Scalar(a) if transparent => {
                    let ResolvedLayers { y1, y2, offset } = resolve_color_ambiguity(&l.y1, &l.y2, *a, None)?;
                    l.y1 = y1;
                    l.y2 = y2;
                    l.extras.ambiguity_offset = Some(offset);
                }
                Mask::Scalar(_) => {}
            }
            Ok(l)
        })
        .collect()
}

fn config_json(r: &Resolved) -> serde_json::Value {
    serde_json::json!({
        "task": r.task,
        "optim": r.optim,
        "max_side": r.max_side,
        "max_frames": r.frames.max_frames,
        "frame_stride": r.frames.stride,
        "guided_radius": r.guided.radius,
        "guided_eps": r.guided.eps,
    })
}

/// Runs one decomposition and exports it. Returns the written files.
pub fn run_task(kind: TaskKind, args: &RunArgs, r: &Resolved) -> Result<Vec<String>> {
    let start = Instant::now();
    let (inputs, paths) = load_inputs(kind, args, r)?;
    let mut graph = build_task(&inputs, &r.task, r.optim.seed, r.optim.iterations)?;
    let mut stderr = std::io::stderr();
    let log: Option<&mut dyn std::io::Write> = if r.optim.log_every > 0 { Some(&mut stderr) } else { None };
    let outcome = optimize(&mut graph, &r.optim, log)?;
    let layers = finish_layers(kind, outcome.layers, &inputs, &r.guided)?;

    let mut manifest = RunManifest::new(kind.name(), config_json(r), r.optim.seed);
    manifest.hash_inputs(&paths)?;
    manifest.warnings = graph.warnings.iter().map(|w| format!("{w:?}")).collect();
    manifest.duration_secs = start.elapsed().as_secs_f64();
    export_results(&layers, &outcome.state, &mut manifest, &args.out)
}

fn square_crop(img: &Image<f32>, size: usize) -> Result<Image<f32>> {
    let side = img.height().min(img.width());
    if side < size {
        return Err(Error::shape(format!("diagnostic images need at least {size}x{size} pixels")));
    }
    let sq = img.crop((img.height() - side) / 2, (img.width() - side) / 2, side, side);
    if side == size {
        Ok(sq)
    } else {
        resize_area(&sq, size, size)
    }
}

/// Seeded random pairs of distinct images from the input directory.
pub fn run_diagnose(args: &RunArgs, r: &Resolved) -> Result<Vec<String>> {
    let files = list_images(&args.input)?;
    if files.len() < 2 {
        return Err(Error::io(&args.input, "the diagnostic needs at least 2 images"));
    }
    let images = files
        .iter()
        .map(|f| {
            let img = load_image::<f32>(f)?;
            let img = if img.channels() == 1 { img.broadcast_channels(3) } else { img };
            square_crop(&img, r.diagnose_size)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(r.optim.seed, 0xd1a6, 0));
    let n_pairs = (images.len() / 2).max(2);
    let mut pairs = Vec::with_capacity(n_pairs);
    let idx: Vec<usize> = (0..images.len()).collect();
    for _ in 0..n_pairs {
        let pick: Vec<&usize> = idx.choose_multiple(&mut rng, 2).collect();
        pairs.push((images[*pick[0]].clone(), images[*pick[1]].clone()));
    }
    let spec = r.task.generator.clone();
    let mut written = Vec::new();
    for mode in &r.diagnose_modes {
        let report = mixture_complexity_experiment(&pairs, *mode, &spec, &r.optim)?;
        let name = match mode {
            MixMode::Superimpose => "superimpose",
            MixMode::SplitLr => "split_lr",
        };
        let dir = args.out.join(name);
        report.write(&dir)?;
        println!("{name}: mixture hardest in {:.0}% of {} pairs", 100.0 * report.fraction_harder, report.samples);
        written.push(format!("{name}/report.json"));
    }
    Ok(written)
}

/// Runs a subcommand, in batch mode when `--jobs` is given.
pub fn run(cmd: &Command) -> Result<()> {
    let args = cmd.args();
    let file = match &args.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    if let Command::Diagnose(_) = cmd {
        let r = resolve(TaskKind::Segment, args, &file, env_seed.as_deref())?;
        run_diagnose(args, &r)?;
        return Ok(());
    }
    if let Some(jobs) = args.jobs {
        return run_batch(cmd, jobs, &file, env_seed.as_deref());
    }
    let kind = task_kind(cmd)?;
    let r = resolve(kind, args, &file, env_seed.as_deref())?;
    let files = run_task(kind, args, &r)?;
    log::info!("wrote {} files to {}", files.len(), args.out.display());
    Ok(())
}

/// One job per image of the input directory, `jobs` at a time. Job `i` uses
/// its own seed stream and writes to `<out>/<file stem>/`.
pub fn run_batch(cmd: &Command, jobs: usize, file: &FileConfig, env_seed: Option<&str>) -> Result<()> {
    let args = cmd.args();
    if jobs == 0 {
        return Err(Error::config("--jobs must be at least 1"));
    }
    if !args.input.is_dir() {
        return Err(Error::config("--jobs needs a directory of inputs"));
    }
    let kind = match cmd {
        Command::Segment(_) => TaskKind::Segment,
        Command::Transparency(_) => TaskKind::TransparencyHint,
        Command::Watermark(_) => TaskKind::WatermarkBbox,
        Command::Dehaze(_) => TaskKind::Dehaze,
        _ => return Err(Error::config(format!("{} has no batch mode", cmd.name()))),
    };
    let base = resolve(kind, args, file, env_seed)?;
    let files = list_images(&args.input)?;
    if files.is_empty() {
        return Err(Error::io(&args.input, "no images found"));
    }
    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<(PathBuf, Error)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(files.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(path) = files.get(i) else { break };
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| i.to_string());
                let mut job_args = args.clone();
                job_args.input = path.clone();
                job_args.out = args.out.join(stem);
                let mut r = base.clone();
                r.optim.seed = derive_seed(base.optim.seed, BATCH_STREAM, i as u64);
                if let Err(e) = run_task(kind, &job_args, &r) {
                    log::error!("{}: {e}", path.display());
                    failures.lock().expect("no poisoned lock").push((path.clone(), e));
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("no poisoned lock");
    failures.sort_by(|a, b| a.0.cmp(&b.0));
    match failures.into_iter().next() {
        Some((_, e)) => Err(e),
        None => Ok(()),
    }
}

/// Exit status for a finished run.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) => e.exit_code(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args() -> RunArgs {
        RunArgs {
            input: PathBuf::from("x.png"),
            input2: None,
            bbox: None,
            iters: None,
            alpha: None,
            beta: None,
            seed: None,
            out: PathBuf::from("out"),
            config: None,
            jobs: None,
        }
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(3), Some(4), Some("5")).unwrap(), 3);
        assert_eq!(resolve_seed(None, Some(4), Some("5")).unwrap(), 4);
        assert_eq!(resolve_seed(None, None, Some(" 5 ")).unwrap(), 5);
        assert_eq!(resolve_seed(None, None, None).unwrap(), 0);
        assert!(matches!(resolve_seed(None, None, Some("abc")), Err(Error::Config(_))));
    }

    #[test]
    fn flags_override_config_file() {
        let file = FileConfig::parse("alpha = 0.3\nbeta = 0.7\niterations = 50\ndepth = 2\nchannels = 8").unwrap();
        let mut a = args();
        a.alpha = Some(0.9);
        let r = resolve(TaskKind::Segment, &a, &file, None).unwrap();
        assert_eq!(r.task.weights.alpha, 0.9);
        assert_eq!(r.task.weights.beta, 0.7);
        assert_eq!(r.optim.iterations, 50);
        assert_eq!(r.task.generator.down_channels, vec![8, 8]);
        assert_eq!(r.task.mask_generator.output_channels, 1);
    }

    #[test]
    fn default_iterations_depend_on_task() {
        let f = FileConfig::default();
        assert_eq!(resolve(TaskKind::Segment, &args(), &f, None).unwrap().optim.iterations, 4000);
        assert_eq!(resolve(TaskKind::Dehaze, &args(), &f, None).unwrap().optim.iterations, 8000);
        assert_eq!(resolve(TaskKind::SegmentVideo, &args(), &f, None).unwrap().optim.iterations, 8000);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut a = args();
        a.alpha = Some(-1.0);
        assert!(matches!(resolve(TaskKind::Segment, &a, &FileConfig::default(), None), Err(Error::Config(_))));
        let f = FileConfig::parse("hint_fade = \"cubic\"").unwrap();
        assert!(matches!(resolve(TaskKind::Segment, &args(), &f, None), Err(Error::Config(_))));
    }
}
