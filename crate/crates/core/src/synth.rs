//! Synthetic jittery sequences with known ground truth.
//!
//! Frames are cut out of a panorama along a smooth pan plus seeded jitter.
//! Each frame is the center of a larger window, and that window is the true
//! out-of-boundary view for the frame.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{translation, Homography};
use crate::raster::{Frame, Rect};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("source {0}x{1} is smaller than the {2}x{3} ground-truth window")]
    SourceTooSmall(usize, usize, usize, usize),
    #[error("panorama {0}x{1} cannot contain every window; need at least {2}x{3}")]
    PanoramaTooSmall(usize, usize, usize, usize),
    #[error("invalid jitter spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterSpec {
    pub n_frames: usize,
    /// Pan amplitude in pixels.
    pub smooth_amplitude: f64,
    /// Pan period in frames.
    pub smooth_period: f64,
    /// Translation jitter standard deviation in pixels.
    pub jitter_sigma: f64,
    /// Rotation jitter standard deviation in degrees.
    pub rotation_sigma: f64,
    pub seed: u64,
}

impl Default for JitterSpec {
    fn default() -> Self {
        Self {
            n_frames: 30,
            smooth_amplitude: 60.0,
            smooth_period: 30.0,
            jitter_sigma: 8.0,
            rotation_sigma: 0.5,
            seed: 7,
        }
    }
}

impl JitterSpec {
    /// Same spec with pixel quantities scaled (angles are scale-free).
    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            smooth_amplitude: self.smooth_amplitude * scale,
            jitter_sigma: self.jitter_sigma * scale,
            ..*self
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.n_frames < 2 {
            return bad("n_frames must be >= 2");
        }
        for (name, v) in [
            ("smooth_amplitude", self.smooth_amplitude),
            ("jitter_sigma", self.jitter_sigma),
            ("rotation_sigma", self.rotation_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be finite and >= 0"));
            }
        }
        if !(self.smooth_period > 0.0) {
            return bad("smooth_period must be > 0");
        }
        Ok(())
    }
}

/// Frame and window sizes of a synthetic sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthGeometry {
    pub frame_width: usize,
    pub frame_height: usize,
    pub pad: usize,
}

impl Default for SynthGeometry {
    fn default() -> Self {
        Self {
            frame_width: 640,
            frame_height: 480,
            pad: 80,
        }
    }
}

impl SynthGeometry {
    pub fn scaled(scale: f64) -> Self {
        let d = Self::default();
        Self {
            frame_width: (d.frame_width as f64 * scale).round() as usize,
            frame_height: (d.frame_height as f64 * scale).round() as usize,
            pad: (d.pad as f64 * scale).round() as usize,
        }
    }

    pub fn window_width(&self) -> usize {
        self.frame_width + 2 * self.pad
    }

    pub fn window_height(&self) -> usize {
        self.frame_height + 2 * self.pad
    }

    pub fn inner(&self) -> Rect {
        Rect::new(self.pad, self.pad, self.frame_width, self.frame_height)
    }
}

/// Camera pose of one frame: window-center offset from the panorama center
/// and in-plane rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub tx: f64,
    pub ty: f64,
    pub angle: f64,
}

pub fn generate_trajectory(spec: &JitterSpec) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = Normal::new(0.0, spec.jitter_sigma).expect("sigma validated");
    let rot = Normal::new(0.0, spec.rotation_sigma.to_radians()).expect("sigma validated");
    (0..spec.n_frames)
        .map(|i| {
            let phase = 2.0 * std::f64::consts::PI * i as f64 / spec.smooth_period;
            Pose {
                tx: spec.smooth_amplitude * phase.sin() + jitter.sample(&mut rng),
                ty: jitter.sample(&mut rng),
                angle: rot.sample(&mut rng),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct JitterVideo {
    pub frames: Vec<Frame>,
    /// Full windows; the inner rectangle of each equals the emitted frame.
    pub gt_canvases: Vec<Frame>,
    pub trajectory: Vec<Pose>,
    pub geometry: SynthGeometry,
    panorama_size: (usize, usize),
}

fn window_to_panorama(pose: &Pose, geometry: &SynthGeometry, pano: (usize, usize)) -> Homography {
    let cw = (
        (geometry.window_width() as f64 - 1.0) / 2.0,
        (geometry.window_height() as f64 - 1.0) / 2.0,
    );
    let cp = ((pano.0 as f64 - 1.0) / 2.0, (pano.1 as f64 - 1.0) / 2.0);
    let (s, c) = pose.angle.sin_cos();
    let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    translation(cp.0 + pose.tx, cp.1 + pose.ty) * rot * translation(-cw.0, -cw.1)
}

impl JitterVideo {
    /// Maps frame-`i` pixel coordinates to frame-`j` pixel coordinates of the
    /// same panorama point.
    pub fn relative_homography(&self, i: usize, j: usize) -> Homography {
        let pad = self.geometry.pad as f64;
        let fi = window_to_panorama(&self.trajectory[i], &self.geometry, self.panorama_size)
            * translation(pad, pad);
        let fj = window_to_panorama(&self.trajectory[j], &self.geometry, self.panorama_size)
            * translation(pad, pad);
        fj.try_inverse().expect("rigid transform") * fi
    }
}

/// Smallest panorama that contains every window of the trajectory.
pub fn required_panorama_size(trajectory: &[Pose], geometry: &SynthGeometry) -> (usize, usize) {
    let (ww, wh) = (
        geometry.window_width() as f64,
        geometry.window_height() as f64,
    );
    let cw = ((ww - 1.0) / 2.0, (wh - 1.0) / 2.0);
    let (mut ex, mut ey) = (0.0f64, 0.0f64);
    for p in trajectory {
        let (s, c) = p.angle.sin_cos();
        for (x, y) in [
            (0.0, 0.0),
            (ww - 1.0, 0.0),
            (0.0, wh - 1.0),
            (ww - 1.0, wh - 1.0),
        ] {
            let (dx, dy) = (x - cw.0, y - cw.1);
            ex = ex.max((c * dx - s * dy + p.tx).abs());
            ey = ey.max((s * dx + c * dy + p.ty).abs());
        }
    }
    (2 * (ex.ceil() as usize) + 4, 2 * (ey.ceil() as usize) + 4)
}

pub fn render_jitter_video(
    panorama: &Frame,
    spec: &JitterSpec,
    geometry: &SynthGeometry,
) -> Result<JitterVideo, SynthError> {
    spec.validate()?;
    let trajectory = generate_trajectory(spec);
    let (need_w, need_h) = required_panorama_size(&trajectory, geometry);
    let pano_size = (panorama.width(), panorama.height());
    if pano_size.0 < need_w || pano_size.1 < need_h {
        return Err(SynthError::PanoramaTooSmall(
            pano_size.0,
            pano_size.1,
            need_w,
            need_h,
        ));
    }
    let (ww, wh) = (geometry.window_width(), geometry.window_height());
    let mut frames = Vec::with_capacity(spec.n_frames);
    let mut gt_canvases = Vec::with_capacity(spec.n_frames);
    for pose in &trajectory {
        let h = window_to_panorama(pose, geometry, pano_size);
        let window = Frame::from_fn(ww, wh, |x, y| {
            let p = crate::geometry::apply(&h, [x as f64, y as f64]);
            panorama.sample(p[0], p[1]).unwrap_or([0.0; 3])
        })
        .expect("window dims positive");
        frames.push(window.crop(geometry.inner()).expect("inner fits"));
        gt_canvases.push(window);
    }
    Ok(JitterVideo {
        frames,
        gt_canvases,
        trajectory,
        geometry: *geometry,
        panorama_size: pano_size,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropSample {
    pub gt: Frame,
    pub input: Frame,
    /// Top-left of the ground-truth window inside the source.
    pub offset: (usize, usize),
    /// Top-left of the input inside the ground-truth window.
    pub input_offset: (usize, usize),
}

/// Random ground-truth window with its central crop as the input frame.
pub fn crop_protocol_with(
    source: &Frame,
    geometry: &SynthGeometry,
    seed: u64,
) -> Result<CropSample, SynthError> {
    let (ww, wh) = (geometry.window_width(), geometry.window_height());
    if source.width() < ww || source.height() < wh {
        return Err(SynthError::SourceTooSmall(
            source.width(),
            source.height(),
            ww,
            wh,
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ox = rng.gen_range(0..=source.width() - ww);
    let oy = rng.gen_range(0..=source.height() - wh);
    let gt = source.crop(Rect::new(ox, oy, ww, wh)).expect("window fits");
    let input = gt.crop(geometry.inner()).expect("inner fits");
    Ok(CropSample {
        gt,
        input,
        offset: (ox, oy),
        input_offset: (geometry.pad, geometry.pad),
    })
}

/// The 800x640 / 640x480 training-crop protocol.
pub fn crop_protocol(source: &Frame, seed: u64) -> Result<CropSample, SynthError> {
    crop_protocol_with(source, &SynthGeometry::default(), seed)
}

struct ValueNoise {
    spacing: f64,
    cols: usize,
    values: Vec<f32>,
}

impl ValueNoise {
    fn new(width: usize, height: usize, spacing: f64, rng: &mut ChaCha8Rng) -> Self {
        let cols = (width as f64 / spacing).ceil() as usize + 2;
        let rows = (height as f64 / spacing).ceil() as usize + 2;
        let values = (0..cols * rows).map(|_| rng.gen::<f32>()).collect();
        Self {
            spacing,
            cols,
            values,
        }
    }

    fn at(&self, x: usize, y: usize) -> f32 {
        let fx = x as f64 / self.spacing;
        let fy = y as f64 / self.spacing;
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let s = |t: f64| (t * t * (3.0 - 2.0 * t)) as f32;
        let (tx, ty) = (s(fx - ix as f64), s(fy - iy as f64));
        let v = |i: usize, j: usize| self.values[j * self.cols + i];
        let top = v(ix, iy) + tx * (v(ix + 1, iy) - v(ix, iy));
        let bot = v(ix, iy + 1) + tx * (v(ix + 1, iy + 1) - v(ix, iy + 1));
        top + ty * (bot - top)
    }
}

/// Seeded textured scene: layered color noise, flat-colored shapes with
/// sharp corners, and a light blur.
pub fn procedural_panorama(width: usize, height: usize, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9a11);
    let octaves: Vec<(f32, [ValueNoise; 3])> = [(64.0, 0.45f32), (20.0, 0.3), (6.0, 0.15)]
        .into_iter()
        .map(|(spacing, amp)| {
            (
                amp,
                [
                    ValueNoise::new(width, height, spacing, &mut rng),
                    ValueNoise::new(width, height, spacing, &mut rng),
                    ValueNoise::new(width, height, spacing, &mut rng),
                ],
            )
        })
        .collect();
    let mut data = vec![[0.0f32; 3]; width * height];
    for y in 0..height {
        for x in 0..width {
            let mut c = [0.05f32; 3];
            for (amp, layers) in &octaves {
                for ch in 0..3 {
                    c[ch] += amp * layers[ch].at(x, y);
                }
            }
            data[y * width + x] = c;
        }
    }
    let shapes = (width * height) / 1800 + 4;
    for _ in 0..shapes {
        let cx = rng.gen_range(0.0..width as f64);
        let cy = rng.gen_range(0.0..height as f64);
        let rx = rng.gen_range(3.0..18.0);
        let ry = rng.gen_range(3.0..18.0);
        let color = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
        let disc = rng.gen_bool(0.4);
        let x0 = (cx - rx).floor().max(0.0) as usize;
        let x1 = ((cx + rx).ceil() as usize).min(width - 1);
        let y0 = (cy - ry).floor().max(0.0) as usize;
        let y1 = ((cy + ry).ceil() as usize).min(height - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                if !disc || dx * dx + dy * dy <= 1.0 {
                    data[y * width + x] = color;
                }
            }
        }
    }
    // [1 2 1]/4 separable blur
    let blur = |src: &Vec<[f32; 3]>, horizontal: bool| -> Vec<[f32; 3]> {
        let mut out = vec![[0.0f32; 3]; width * height];
        for y in 0..height {
            for x in 0..width {
                let at = |d: i64| {
                    let (xx, yy) = if horizontal {
                        ((x as i64 + d).clamp(0, width as i64 - 1) as usize, y)
                    } else {
                        (x, (y as i64 + d).clamp(0, height as i64 - 1) as usize)
                    };
                    src[yy * width + xx]
                };
                let (a, b, c) = (at(-1), at(0), at(1));
                for ch in 0..3 {
                    out[y * width + x][ch] = 0.25 * a[ch] + 0.5 * b[ch] + 0.25 * c[ch];
                }
            }
        }
        out
    };
    let data = blur(&blur(&data, true), false);
    Frame::from_fn(width, height, |x, y| data[y * width + x]).expect("positive dims")
}

/// The default evaluation suite at a given scale of the 640x480 geometry.
pub fn default_suite(scale: f64, spec: &JitterSpec) -> Result<JitterVideo, SynthError> {
    let geometry = SynthGeometry::scaled(scale);
    let spec = spec.scaled(scale);
    let (w, h) = required_panorama_size(&generate_trajectory(&spec), &geometry);
    let panorama = procedural_panorama(w + 8, h + 8, spec.seed);
    render_jitter_video(&panorama, &spec, &geometry)
}
