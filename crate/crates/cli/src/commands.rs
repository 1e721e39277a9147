use std::path::{Path, PathBuf};

use serde::Serialize;

use ovs_core::ablation::{band_quality, run_ablation};
use ovs_core::config::{Config, FlowChoice};
use ovs_core::dense_flow::{BaselineFlow, FileFlow, FlowEstimator};
use ovs_core::expand::{expand_sequence, ExpandMode, ExpandParams, ExpandStats};
use ovs_core::io::{
    ensure_dir, read_frame, read_mask, read_sequence, write_frame, write_mask, write_text,
};
use ovs_core::metrics::{eval_losses, stability, warp_metrics, MetricError};
use ovs_core::stabilizer::{crop_rectangle, crop_scale, present, stabilize, Fill, StabilizeParams};
use ovs_core::synth::{
    default_suite, render_jitter_video, JitterSpec, JitterVideo, Pose, SynthGeometry,
};
use ovs_core::{sobel_edges, Canvas, Frame, Mask, Rect};

use crate::args::{
    AblateArgs, Common, EvalArgs, ExpandArgs, FillArg, ModeArg, StabilizeArgs, Switch, SynthArgs,
};
use crate::error::CliError;

fn frame_name(i: usize) -> String {
    format!("frame_{i:06}.png")
}

fn mode_of(m: ModeArg) -> ExpandMode {
    match m {
        ModeArg::Baseline => ExpandMode::Baseline,
        ModeArg::Coarse => ExpandMode::CoarseOnly,
        ModeArg::Fine => ExpandMode::FineOnly,
        ModeArg::Full => ExpandMode::Full,
    }
}

/// Defaults, then the config file, then flags.
fn load_config(common: &Common) -> Result<Config, CliError> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    for item in &common.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
        let key = key.trim();
        // bare words are read as strings so `--set expand.mode=coarse` works
        let parsed: toml::Table = format!("v = {}", value.trim())
            .parse()
            .or_else(|_| format!("v = {:?}", value.trim()).parse())
            .map_err(|e: toml::de::Error| {
                CliError::usage(format!("--set {key}: {}", e.message()))
            })?;
        cfg.set(key, &parsed["v"])?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(flow) = &common.flow {
        cfg.flow = FlowChoice::parse(flow).ok_or_else(|| {
            CliError::usage(format!(
                "--flow expects baseline or files:<dir>, got `{flow}`"
            ))
        })?;
    }
    Ok(cfg)
}

fn estimator(cfg: &Config) -> Result<Box<dyn FlowEstimator>, CliError> {
    Ok(match &cfg.flow {
        FlowChoice::Baseline => Box::new(BaselineFlow::default()),
        FlowChoice::Files(dir) => {
            let dir = PathBuf::from(dir);
            if !dir.is_dir() {
                return Err(CliError::usage(format!(
                    "flow directory {} does not exist",
                    dir.display()
                )));
            }
            Box::new(FileFlow { dir })
        }
    })
}

fn require_dir(dir: &Path, what: &str) -> Result<(), CliError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::usage(format!(
            "{what} directory {} does not exist",
            dir.display()
        )))
    }
}

fn read_input(dir: &Path) -> Result<Vec<Frame>, CliError> {
    require_dir(dir, "input")?;
    Ok(read_sequence(dir, None)?)
}

fn write_frames(dir: &Path, frames: &[Frame]) -> Result<(), CliError> {
    ensure_dir(dir)?;
    for (i, f) in frames.iter().enumerate() {
        write_frame(&dir.join(frame_name(i)), f)?;
    }
    Ok(())
}

fn write_canvases(dir: &Path, canvases: &[Canvas]) -> Result<(), CliError> {
    ensure_dir(dir)?;
    for (i, c) in canvases.iter().enumerate() {
        write_frame(&dir.join(format!("canvas_{i:06}.png")), &c.frame)?;
        write_mask(&dir.join(format!("mask_{i:06}.pgm")), &c.mask)?;
    }
    Ok(())
}

/// Reads canvases written by `write_canvases` around frames of `frame_size`.
fn read_canvases(dir: &Path, frame_size: (usize, usize)) -> Result<Vec<Canvas>, CliError> {
    require_dir(dir, "canvas")?;
    let frames = read_sequence(dir, Some("canvas_"))?;
    let mut canvases = Vec::with_capacity(frames.len());
    for (i, frame) in frames.into_iter().enumerate() {
        let mask = read_mask(&dir.join(format!("mask_{i:06}.pgm")))?;
        let (w, h) = (frame.width(), frame.height());
        if w < frame_size.0 || (w - frame_size.0) % 2 != 0 || h < frame_size.1 {
            return Err(CliError::usage(format!(
                "canvas {w}x{h} does not pad a {}x{} frame evenly",
                frame_size.0, frame_size.1
            )));
        }
        let pad = (w - frame_size.0) / 2;
        canvases.push(Canvas::from_parts(
            frame,
            mask,
            pad,
            Rect::new(pad, pad, frame_size.0, frame_size.1),
        )?);
    }
    Ok(canvases)
}

fn expand_params(cfg: &Config, frames: &[Frame]) -> ExpandParams {
    ExpandParams {
        iterations: cfg.iterations,
        mode: cfg.mode,
        pad: cfg.pad.resolve(frames[0].width()),
        coarse: cfg.coarse,
        fine: cfg.fine,
        seed: cfg.seed,
    }
}

#[derive(Serialize)]
struct ExpandReport {
    frames: usize,
    pad: usize,
    aligned_pairs: usize,
    skipped_pairs: usize,
    fallbacks: usize,
    config: toml::Table,
}

fn config_table(cfg: &Config, width: usize) -> toml::Table {
    cfg.to_toml(Some(width))
        .parse()
        .expect("configuration renders as TOML")
}

fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("report serializes")
}

pub fn expand(args: ExpandArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.common)?;
    if let Some(k) = args.iterations {
        cfg.iterations = k;
    }
    if let Some(m) = args.mode {
        cfg.mode = mode_of(m);
    }
    let frames = read_input(&args.input)?;
    let est = estimator(&cfg)?;
    let params = expand_params(&cfg, &frames);
    let (canvases, stats): (_, ExpandStats) =
        expand_sequence(&frames, &params, est.as_ref(), None, None)?;
    write_canvases(&args.out, &canvases)?;
    let report = ExpandReport {
        frames: frames.len(),
        pad: params.pad,
        aligned_pairs: stats.aligned_pairs,
        skipped_pairs: stats.skipped_pairs,
        fallbacks: stats.fallbacks,
        config: config_table(&cfg, frames[0].width()),
    };
    write_text(&args.out.join("expand.toml"), &to_toml(&report))?;
    Ok(())
}

#[derive(Serialize)]
struct StabilizeReport {
    frames: usize,
    ovs: bool,
    iterations: usize,
    /// Crop rectangle `[x, y, width, height]` shared by every output frame.
    crop: [usize; 4],
    crop_scale: f64,
    hole_pixels: usize,
    holes: Vec<usize>,
    config: toml::Table,
}

pub fn stabilize_cmd(args: StabilizeArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.common)?;
    if let Some(k) = args.iterations {
        cfg.iterations = k;
    }
    if let Some(m) = args.mode {
        cfg.mode = mode_of(m);
    }
    if let Some(f) = args.fill {
        cfg.fill = match f {
            FillArg::None => Fill::None,
            FillArg::Nearest => Fill::Nearest,
        };
    }
    if let Some(w) = args.window {
        cfg.set("stabilizer.window", &toml::Value::Integer(w as i64))
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    let frames = read_input(&args.input)?;
    let ovs = args.ovs == Switch::On;
    let canvases = if ovs {
        let est = estimator(&cfg)?;
        let params = expand_params(&cfg, &frames);
        Some(expand_sequence(&frames, &params, est.as_ref(), None, None)?.0)
    } else {
        None
    };
    let params = StabilizeParams {
        window: cfg.window,
        sigma: cfg.sigma(),
        fill: cfg.fill,
        coarse: cfg.coarse,
        seed: cfg.seed,
    };
    let (out, _, _) = stabilize(&frames, canvases.as_deref(), &params)?;
    let rect = crop_rectangle(&out.masks)?;
    let shown = present(&out.frames, rect);
    write_frames(&args.out, &shown)?;
    let raw = args.out.join("raw");
    write_frames(&raw, &out.frames)?;
    for (i, m) in out.masks.iter().enumerate() {
        write_mask(&raw.join(format!("mask_{i:06}.pgm")), m)?;
    }
    let (w, h) = (frames[0].width(), frames[0].height());
    let report = StabilizeReport {
        frames: frames.len(),
        ovs,
        iterations: if ovs { cfg.iterations } else { 0 },
        crop: [rect.x, rect.y, rect.width, rect.height],
        crop_scale: crop_scale(rect, w, h),
        hole_pixels: out.total_holes(),
        holes: out.holes.clone(),
        config: config_table(&cfg, w),
    };
    write_text(&args.out.join("stabilize.toml"), &to_toml(&report))?;
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    frames: usize,
    cropping: f64,
    distortion: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    stability: Option<f64>,
    /// `nan` marks frames whose homography fit failed.
    per_frame_cropping: Vec<f64>,
    per_frame_distortion: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ssim: Option<f64>,
    #[serde(rename = "L_I", skip_serializing_if = "Option::is_none")]
    l_i: Option<f64>,
    #[serde(rename = "L_G", skip_serializing_if = "Option::is_none")]
    l_g: Option<f64>,
    #[serde(rename = "L_M", skip_serializing_if = "Option::is_none")]
    l_m: Option<f64>,
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let inputs = read_input(&args.input)?;
    require_dir(&args.output, "output")?;
    let outputs = read_sequence(&args.output, None)?;
    let wm = warp_metrics(&inputs, &outputs, args.seed)?;
    let stab = match stability(&outputs, args.seed) {
        Ok(s) => Some(s),
        Err(MetricError::TooShort { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    let mut report = EvalReport {
        frames: inputs.len(),
        cropping: wm.cropping,
        distortion: wm.distortion,
        stability: stab,
        per_frame_cropping: wm
            .per_frame_cropping
            .iter()
            .map(|v| v.unwrap_or(f64::NAN))
            .collect(),
        per_frame_distortion: wm
            .per_frame_distortion
            .iter()
            .map(|v| v.unwrap_or(f64::NAN))
            .collect(),
        psnr: None,
        ssim: None,
        l_i: None,
        l_g: None,
        l_m: None,
    };
    if let (Some(gt_dir), Some(canvas_dir)) = (&args.gt, &args.canvases) {
        require_dir(gt_dir, "ground-truth")?;
        let gt = read_sequence(gt_dir, None)?;
        let canvases = read_canvases(canvas_dir, (inputs[0].width(), inputs[0].height()))?;
        if gt.len() != canvases.len() {
            return Err(CliError::usage(format!(
                "{} ground-truth canvases for {} expanded canvases",
                gt.len(),
                canvases.len()
            )));
        }
        let (psnr, ssim) = band_quality(&canvases, &gt);
        report.psnr = psnr;
        report.ssim = ssim;
        let mut sums = [0.0f64; 3];
        for (c, g) in canvases.iter().zip(&gt) {
            // the whole ground-truth window is the region that should be filled
            let full = Mask::new(g.width(), g.height(), true)?;
            let l = eval_losses(
                &c.frame,
                &sobel_edges(&c.frame),
                &c.mask,
                g,
                &sobel_edges(g),
                &full,
            )?;
            sums[0] += l.l_i;
            sums[1] += l.l_g;
            sums[2] += l.l_m;
        }
        let n = canvases.len().max(1) as f64;
        report.l_i = Some(sums[0] / n);
        report.l_g = Some(sums[1] / n);
        report.l_m = Some(sums[2] / n);
    }
    if let Some(parent) = args.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_text(&args.report, &to_toml(&report))?;
    Ok(())
}

#[derive(Serialize)]
struct TrajectoryFile {
    spec: JitterSpec,
    geometry: SynthGeometry,
    poses: Vec<Pose>,
}

pub fn synth(args: SynthArgs) -> Result<(), CliError> {
    if !(args.scale > 0.0 && args.scale.is_finite()) {
        return Err(CliError::usage(format!(
            "--scale must be positive, got {}",
            args.scale
        )));
    }
    let spec = JitterSpec {
        n_frames: args.frames,
        smooth_amplitude: args.amplitude,
        smooth_period: args.period,
        jitter_sigma: args.jitter,
        rotation_sigma: args.rotation,
        seed: args.seed,
    };
    let video: JitterVideo = match &args.panorama {
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::usage(format!(
                    "panorama {} does not exist",
                    path.display()
                )));
            }
            let pano = read_frame(path)?;
            render_jitter_video(
                &pano,
                &spec.scaled(args.scale),
                &SynthGeometry::scaled(args.scale),
            )?
        }
        None => default_suite(args.scale, &spec)?,
    };
    write_frames(&args.out.join("frames"), &video.frames)?;
    if args.emit_gt {
        let dir = args.out.join("gt");
        ensure_dir(&dir)?;
        for (i, g) in video.gt_canvases.iter().enumerate() {
            write_frame(&dir.join(format!("gt_{i:06}.png")), g)?;
        }
    }
    let file = TrajectoryFile {
        spec: spec.scaled(args.scale),
        geometry: video.geometry,
        poses: video.trajectory.clone(),
    };
    write_text(&args.out.join("trajectory.toml"), &to_toml(&file))?;
    Ok(())
}

pub fn ablate(args: AblateArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.common)?;
    if let Some(m) = args.mode {
        cfg.mode = mode_of(m);
    }
    let (frames, gt) = match &args.input {
        Some(dir) => {
            let frames = read_input(dir)?;
            let gt = match &args.gt {
                Some(g) => {
                    require_dir(g, "ground-truth")?;
                    Some(read_sequence(g, None)?)
                }
                None => None,
            };
            (frames, gt)
        }
        None => {
            if !(args.scale > 0.0 && args.scale.is_finite()) {
                return Err(CliError::usage(format!(
                    "--scale must be positive, got {}",
                    args.scale
                )));
            }
            let spec = JitterSpec {
                n_frames: args.frames,
                ..JitterSpec::default()
            };
            let video = default_suite(args.scale, &spec)?;
            (video.frames, Some(video.gt_canvases))
        }
    };
    let est = estimator(&cfg)?;
    let out = run_ablation(&frames, gt.as_deref(), &cfg, est.as_ref(), &args.iterations)?;
    ensure_dir(&args.out)?;
    write_text(&args.out.join("report.toml"), &out.report.to_toml())?;
    write_text(&args.out.join("cropping.svg"), &out.report.cropping_svg())?;
    for (k, shown) in &out.stabilized {
        write_frames(&args.out.join(format!("k{k:02}")), shown)?;
    }
    Ok(())
}
