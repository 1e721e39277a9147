//! Mode matrix and iteration sweep over one input sequence, with a TOML
//! report and an SVG plot of cropping ratio against iterations.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::config::Config;
use crate::dense_flow::FlowEstimator;
use crate::expand::{expand_sequence, ExpandError, ExpandMode, ExpandParams, NeighborMotions};
use crate::metrics::{psnr, ssim, stability, warp_metrics, MetricError};
use crate::raster::{Canvas, Frame, Mask};
use crate::stabilizer::{
    crop_rectangle, crop_scale, estimate_trajectory, present, render_stabilized, smooth_trajectory,
    Fill, StabilizeError,
};

pub const DEFAULT_ITERATION_SET: [usize; 4] = [0, 5, 10, 15];

#[derive(Debug, Error)]
pub enum AblationError {
    #[error(transparent)]
    Expand(#[from] ExpandError),
    #[error(transparent)]
    Stabilize(#[from] StabilizeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{gt} ground-truth canvases for {frames} frames")]
    GroundTruthCount { frames: usize, gt: usize },
    #[error("ground-truth canvas is {got:?}, expected {expected:?}")]
    GroundTruthSize {
        got: (usize, usize),
        expected: (usize, usize),
    },
}

/// Out-of-boundary quality of one alignment mode after a single iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeRow {
    pub mode: String,
    /// Share of out-of-boundary canvas pixels that received content.
    pub band_coverage: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRow {
    pub iterations: usize,
    pub cropping: f64,
    pub distortion: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stability: Option<f64>,
    /// Scale of the crop rectangle that removes every hole.
    pub crop_scale: f64,
    pub hole_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub pad: usize,
    pub modes: Vec<ModeRow>,
    pub iterations: Vec<IterationRow>,
    /// The full effective configuration.
    pub config: toml::Table,
}

pub struct AblationOutput {
    pub report: AblationReport,
    /// Presented stabilized frames for each row of the iteration sweep.
    pub stabilized: Vec<(usize, Vec<Frame>)>,
}

/// Mean band PSNR and SSIM against ground-truth canvases; frames whose band
/// is empty (or too thin for a full SSIM window) are left out.
pub fn band_quality(canvases: &[Canvas], gt: &[Frame]) -> (Option<f64>, Option<f64>) {
    let (mut ps, mut np) = (0.0, 0usize);
    let (mut ss, mut ns) = (0.0, 0usize);
    for (c, g) in canvases.iter().zip(gt) {
        let band = Mask::from_fn(c.width(), c.height(), |x, y| {
            c.mask.get(x, y) && !c.inner.contains(x, y)
        })
        .expect("positive dims");
        if let Ok(v) = psnr(&c.frame, g, &band) {
            ps += v;
            np += 1;
        }
        if let Ok(v) = ssim(&c.frame, g, &band) {
            ss += v;
            ns += 1;
        }
    }
    (
        (np > 0).then(|| ps / np as f64),
        (ns > 0).then(|| ss / ns as f64),
    )
}

/// Share of out-of-boundary pixels holding content, over all canvases.
pub fn band_coverage(canvases: &[Canvas]) -> f64 {
    let (mut covered, mut total) = (0usize, 0usize);
    for c in canvases {
        let inner_valid = (c.inner.y..c.inner.y + c.inner.height)
            .map(|y| {
                (c.inner.x..c.inner.x + c.inner.width)
                    .filter(|&x| c.mask.get(x, y))
                    .count()
            })
            .sum::<usize>();
        covered += c.mask.count() - inner_valid;
        total += c.width() * c.height() - c.inner.area();
    }
    if total == 0 {
        0.0
    } else {
        covered as f64 / total as f64
    }
}

/// Runs the mode matrix (one iteration per mode) and the iteration sweep
/// (mode from `cfg`, stabilized without fill and presented through the
/// common crop).
pub fn run_ablation(
    frames: &[Frame],
    gt: Option<&[Frame]>,
    cfg: &Config,
    estimator: &dyn FlowEstimator,
    iteration_set: &[usize],
) -> Result<AblationOutput, AblationError> {
    let (w, h) = frames.first().map_or((0, 0), |f| (f.width(), f.height()));
    let pad = cfg.pad.resolve(w);
    if let Some(gt) = gt {
        if gt.len() != frames.len() {
            return Err(AblationError::GroundTruthCount {
                frames: frames.len(),
                gt: gt.len(),
            });
        }
        if let Some(g) = gt
            .iter()
            .find(|g| (g.width(), g.height()) != (w + 2 * pad, h + 2 * pad))
        {
            return Err(AblationError::GroundTruthSize {
                got: (g.width(), g.height()),
                expected: (w + 2 * pad, h + 2 * pad),
            });
        }
    }
    let base = ExpandParams {
        iterations: 1,
        mode: cfg.mode,
        pad,
        coarse: cfg.coarse,
        fine: cfg.fine,
        seed: cfg.seed,
    };
    let motions = NeighborMotions::estimate(frames, &cfg.coarse, cfg.seed);

    let mut modes = vec![];
    for mode in ExpandMode::ALL {
        let params = ExpandParams { mode, ..base };
        let (canvases, _) = expand_sequence(frames, &params, estimator, Some(&motions), None)?;
        let (psnr, ssim) = gt.map_or((None, None), |gt| band_quality(&canvases, gt));
        let row = ModeRow {
            mode: mode.to_string(),
            band_coverage: band_coverage(&canvases),
            psnr,
            ssim,
        };
        modes.push(row);
    }

    let mut wanted: Vec<usize> = iteration_set.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    let max_k = wanted.last().copied().unwrap_or(0);
    let mut snapshots: Vec<(usize, Vec<Canvas>)> = vec![];
    {
        let mut observe = |k: usize, cs: &[Canvas]| {
            if wanted.contains(&k) {
                snapshots.push((k, cs.to_vec()));
            }
        };
        let params = ExpandParams {
            iterations: max_k,
            ..base
        };
        expand_sequence(
            frames,
            &params,
            estimator,
            Some(&motions),
            Some(&mut observe),
        )?;
    }

    let traj = estimate_trajectory(frames, &cfg.coarse, cfg.seed)?;
    let smooth = smooth_trajectory(&traj, cfg.window, cfg.sigma())?;
    let mut iterations = vec![];
    let mut stabilized = vec![];
    for (k, canvases) in snapshots {
        let rendered = render_stabilized(&canvases, &traj, &smooth, Fill::None)?;
        let rect = crop_rectangle(&rendered.masks)?;
        let shown = present(&rendered.frames, rect);
        let wm = warp_metrics(frames, &shown, cfg.seed)?;
        let stab = match stability(&shown, cfg.seed) {
            Ok(s) => Some(s),
            Err(MetricError::TooShort { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        iterations.push(IterationRow {
            iterations: k,
            cropping: wm.cropping,
            distortion: wm.distortion,
            stability: stab,
            crop_scale: crop_scale(rect, w, h),
            hole_pixels: rendered.total_holes(),
        });
        stabilized.push((k, shown));
    }

    Ok(AblationOutput {
        report: AblationReport {
            frames: frames.len(),
            width: w,
            height: h,
            pad,
            modes,
            iterations,
            config: cfg
                .to_toml(Some(w))
                .parse()
                .expect("configuration renders as TOML"),
        },
        stabilized,
    })
}

impl AblationReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    /// Line plot of cropping ratio against iterations.
    pub fn cropping_svg(&self) -> String {
        let points: Vec<(f64, f64)> = self
            .iterations
            .iter()
            .map(|r| (r.iterations as f64, r.cropping))
            .collect();
        line_plot_svg(
            "cropping ratio vs iterations",
            "iterations",
            "cropping",
            &points,
        )
    }
}

/// Minimal SVG line chart with axes, ticks at the data points and a y range
/// padded around the data.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let (width, height, margin) = (480.0, 320.0, 56.0);
    let xs = points.iter().map(|p| p.0);
    let ys = points.iter().map(|p| p.1);
    let (x0, x1) = (
        xs.clone().fold(f64::INFINITY, f64::min),
        xs.fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = (
        ys.clone().fold(f64::INFINITY, f64::min),
        ys.fold(f64::NEG_INFINITY, f64::max),
    );
    let (x0, x1) = if points.is_empty() {
        (0.0, 1.0)
    } else if x1 > x0 {
        (x0, x1)
    } else {
        (x0 - 1.0, x1 + 1.0)
    };
    let span = if points.is_empty() {
        1.0
    } else {
        (y1 - y0).max(0.02)
    };
    let (y0, y1) = if points.is_empty() {
        (0.0, 1.0)
    } else {
        (y0 - 0.1 * span, y1 + 0.1 * span)
    };
    let px = |x: f64| margin + (x - x0) / (x1 - x0) * (width - 2.0 * margin);
    let py = |y: f64| height - margin - (y - y0) / (y1 - y0) * (height - 2.0 * margin);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{title}</text>"#,
        width / 2.0
    );
    let _ = writeln!(
        s,
        r#"<path d="M{m} {t} V{b} H{r}" stroke="black" fill="none"/>"#,
        m = margin,
        t = margin,
        b = height - margin,
        r = width - margin
    );
    for &(x, _) in points {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="11">{x}</text>"#,
            px(x),
            height - margin + 16.0
        );
    }
    for k in 0..=4 {
        let y = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{y:.3}</text>"#,
            margin - 6.0,
            py(y) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{x_label}</text>"#,
        width / 2.0,
        height - 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">{y_label}</text>"#,
        height / 2.0,
        height / 2.0
    );
    if !points.is_empty() {
        let path: Vec<String> = points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                format!(
                    "{}{:.1} {:.1}",
                    if i == 0 { "M" } else { "L" },
                    px(x),
                    py(y)
                )
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<path d="{}" stroke="steelblue" stroke-width="2" fill="none"/>"#,
            path.join(" ")
        );
        for &(x, y) in points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"/>"#,
                px(x),
                py(y)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_one_marker_per_point() {
        let svg = line_plot_svg("t", "x", "y", &[(0.0, 0.9), (5.0, 0.95), (10.0, 0.97)]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), 3);
        let empty = line_plot_svg("t", "x", "y", &[]);
        assert_eq!(empty.matches("<circle").count(), 0);
    }

    #[test]
    fn report_toml_parses_and_keeps_config() {
        let r = AblationReport {
            frames: 2,
            width: 8,
            height: 6,
            pad: 1,
            modes: vec![ModeRow {
                mode: "full".into(),
                band_coverage: 0.5,
                psnr: Some(30.0),
                ssim: None,
            }],
            iterations: vec![IterationRow {
                iterations: 0,
                cropping: 0.9,
                distortion: 1.0,
                stability: None,
                crop_scale: 0.88,
                hole_pixels: 3,
            }],
            config: Config::default().to_toml(Some(8)).parse().unwrap(),
        };
        let text = r.to_toml();
        let parsed: toml::Table = text.parse().unwrap();
        assert_eq!(parsed["modes"].as_array().unwrap().len(), 1);
        let cfg = parsed["config"].as_table().unwrap();
        assert_eq!(cfg["affinity"]["radius"].as_integer(), Some(4));
        assert_eq!(cfg["canvas"]["pad"].as_integer(), Some(1));
    }
}
