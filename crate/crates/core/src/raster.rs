//! Frames, masks, canvases and the sampling conventions shared by every stage.
//!
//! Pixel origin is the top-left corner, `x` grows rightward and `y` downward.
//! Pixel centers sit on integer coordinates. Color is stored as linear `f32`
//! triples in `[0, 1]`.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("raster dimensions must be positive, got {width}x{height}")]
    EmptyRaster { width: usize, height: usize },
    #[error("expected {expected} pixels, got {actual}")]
    PixelCount { expected: usize, actual: usize },
    #[error("color value {value} at pixel {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("rectangle {0:?} does not fit inside a {1}x{2} raster")]
    RectOutOfBounds(Rect, usize, usize),
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.width && y < self.y + self.height
    }

    fn fits(&self, width: usize, height: usize) -> bool {
        self.x + self.width <= width && self.y + self.height <= height
    }
}

fn check_dims(width: usize, height: usize) -> Result<(), RasterError> {
    if width == 0 || height == 0 {
        return Err(RasterError::EmptyRaster { width, height });
    }
    Ok(())
}

/// Three-channel color raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<[f32; 3]>,
}

impl Frame {
    /// Black frame.
    pub fn new(width: usize, height: usize) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        })
    }

    pub fn from_pixels(
        width: usize,
        height: usize,
        data: Vec<[f32; 3]>,
    ) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(RasterError::PixelCount {
                expected: width * height,
                actual: data.len(),
            });
        }
        for (index, px) in data.iter().enumerate() {
            for &value in px {
                if !(0.0..=1.0).contains(&value) {
                    return Err(RasterError::OutOfRange { index, value });
                }
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds a frame from a per-pixel closure; values are clamped into `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let c = f(x, y);
                data.push([clamp01(c[0]), clamp01(c[1]), clamp01(c[2])]);
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: [f32; 3]) {
        self.data[y * self.width + x] = [clamp01(value[0]), clamp01(value[1]), clamp01(value[2])];
    }

    /// BT.601 luminance plane.
    pub fn luma(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&c| luma(c)).collect(),
        }
    }

    pub fn crop(&self, rect: Rect) -> Result<Frame, RasterError> {
        if !rect.fits(self.width, self.height) || rect.area() == 0 {
            return Err(RasterError::RectOutOfBounds(rect, self.width, self.height));
        }
        let mut data = Vec::with_capacity(rect.area());
        for y in rect.y..rect.y + rect.height {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + rect.x..row + rect.x + rect.width]);
        }
        Ok(Frame {
            width: rect.width,
            height: rect.height,
            data,
        })
    }

    /// Bilinear sample. Taps outside the raster are dropped; the sample is
    /// invalid when less than half of the interpolation weight is in range.
    pub fn sample(&self, x: f64, y: f64) -> Option<[f32; 3]> {
        let mut acc = [0.0f64; 3];
        let total = for_each_tap(self.width, self.height, x, y, |idx, w| {
            let c = self.data[idx];
            acc[0] += w * c[0] as f64;
            acc[1] += w * c[1] as f64;
            acc[2] += w * c[2] as f64;
            w
        });
        if total < 0.5 {
            return None;
        }
        Some(normalize3(acc, total))
    }
}

#[inline]
pub(crate) fn clamp01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[inline]
pub fn luma(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

#[inline]
fn normalize3(acc: [f64; 3], total: f64) -> [f32; 3] {
    if total == 1.0 {
        return [acc[0] as f32, acc[1] as f32, acc[2] as f32];
    }
    [
        clamp01((acc[0] / total) as f32),
        clamp01((acc[1] / total) as f32),
        clamp01((acc[2] / total) as f32),
    ]
}

/// Visits the in-range bilinear taps around `(x, y)`. The callback returns the
/// weight it accepted (the tap weight, or zero for rejected taps); the sum of
/// accepted weights is returned.
#[inline]
pub(crate) fn for_each_tap(
    width: usize,
    height: usize,
    x: f64,
    y: f64,
    mut f: impl FnMut(usize, f64) -> f64,
) -> f64 {
    if !x.is_finite() || !y.is_finite() {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let (w, h) = (width as i64, height as i64);
    let mut total = 0.0;
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    for (tx, ty, tw) in taps {
        if tw == 0.0 || tx < 0 || ty < 0 || tx >= w || ty >= h {
            continue;
        }
        total += f((ty * w + tx) as usize, tw);
    }
    total
}

/// Single-channel `f32` raster (luminance, pyramid levels, edge magnitudes).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            data: vec![0.0; width * height],
        })
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(RasterError::PixelCount {
                expected: width * height,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Read with coordinates clamped to the border.
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64) -> f32 {
        let x = x.clamp(0, self.width as i64 - 1) as usize;
        let y = y.clamp(0, self.height as i64 - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Bilinear sample with the same validity rule as [`Frame::sample`].
    pub fn sample(&self, x: f64, y: f64) -> Option<f32> {
        let mut acc = 0.0f64;
        let total = for_each_tap(self.width, self.height, x, y, |idx, w| {
            acc += w * self.data[idx] as f64;
            w
        });
        if total < 0.5 {
            None
        } else {
            Some((acc / total) as f32)
        }
    }

    /// Bilinear sample with border clamping; always defined.
    #[inline]
    pub fn sample_clamped(&self, x: f32, y: f32) -> f32 {
        let xc = x.clamp(0.0, (self.width - 1) as f32);
        let yc = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f32;
        let fy = yc - y0 as f32;
        let r0 = y0 * self.width;
        let r1 = y1 * self.width;
        let top = self.data[r0 + x0] + fx * (self.data[r0 + x1] - self.data[r0 + x0]);
        let bot = self.data[r1 + x0] + fx * (self.data[r1 + x1] - self.data[r1 + x0]);
        top + fy * (bot - top)
    }
}

/// Per-pixel gradient magnitude of a frame's luminance.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap(pub GrayImage);

impl EdgeMap {
    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.0.get(x, y)
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }
}

/// Binary validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            data: vec![value; width * height],
        })
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(RasterError::PixelCount {
                expected: width * height,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// `true` when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn crop(&self, rect: Rect) -> Result<Mask, RasterError> {
        if !rect.fits(self.width, self.height) || rect.area() == 0 {
            return Err(RasterError::RectOutOfBounds(rect, self.width, self.height));
        }
        let mut data = Vec::with_capacity(rect.area());
        for y in rect.y..rect.y + rect.height {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + rect.x..row + rect.x + rect.width]);
        }
        Ok(Mask {
            width: rect.width,
            height: rect.height,
            data,
        })
    }

    /// Bilinear sample of the 0/1 field, re-binarized at 0.5.
    pub fn sample(&self, x: f64, y: f64) -> bool {
        let mut acc = 0.0;
        for_each_tap(self.width, self.height, x, y, |idx, w| {
            if self.data[idx] {
                acc += w;
            }
            w
        });
        acc >= 0.5
    }
}

/// A padded frame whose out-of-boundary band starts invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub frame: Frame,
    pub mask: Mask,
    pub pad: usize,
    pub inner: Rect,
}

impl Canvas {
    pub fn width(&self) -> usize {
        self.frame.width
    }

    pub fn height(&self) -> usize {
        self.frame.height
    }

    pub fn same_dims(&self, other: &Canvas) -> bool {
        self.width() == other.width() && self.height() == other.height()
    }

    /// Crops the inner rectangle back out.
    pub fn crop_inner(&self) -> (Frame, Mask) {
        (
            self.frame
                .crop(self.inner)
                .expect("inner rect fits by construction"),
            self.mask
                .crop(self.inner)
                .expect("inner rect fits by construction"),
        )
    }

    /// Mask-aware bilinear sample: only valid taps contribute, and the sample
    /// is valid when at least half of the interpolation weight is valid.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> Option<[f32; 3]> {
        let mut acc = [0.0f64; 3];
        let mut valid = 0.0;
        for_each_tap(self.frame.width, self.frame.height, x, y, |idx, w| {
            if self.mask.data[idx] {
                let c = self.frame.data[idx];
                acc[0] += w * c[0] as f64;
                acc[1] += w * c[1] as f64;
                acc[2] += w * c[2] as f64;
                valid += w;
            }
            w
        });
        if valid < 0.5 {
            None
        } else {
            Some(normalize3(acc, valid))
        }
    }

    /// Builds a canvas from raw parts, clearing color wherever the mask is 0.
    pub fn from_parts(
        mut frame: Frame,
        mask: Mask,
        pad: usize,
        inner: Rect,
    ) -> Result<Canvas, RasterError> {
        if frame.width != mask.width || frame.height != mask.height {
            return Err(RasterError::DimensionMismatch(
                frame.width,
                frame.height,
                mask.width,
                mask.height,
            ));
        }
        if !inner.fits(frame.width, frame.height) {
            return Err(RasterError::RectOutOfBounds(
                inner,
                frame.width,
                frame.height,
            ));
        }
        for (c, &m) in frame.data.iter_mut().zip(&mask.data) {
            if !m {
                *c = [0.0; 3];
            }
        }
        Ok(Canvas {
            frame,
            mask,
            pad,
            inner,
        })
    }
}

/// Default padding for a frame width: 80 px at 640, proportional elsewhere.
pub fn default_pad(width: usize) -> usize {
    (width as f64 / 8.0).round() as usize
}

/// Zero-pads a frame by `pad` pixels on each side.
pub fn pad_frame(frame: &Frame, pad: usize) -> Canvas {
    let width = frame.width + 2 * pad;
    let height = frame.height + 2 * pad;
    let mut data = vec![[0.0f32; 3]; width * height];
    let mut mask = vec![false; width * height];
    for y in 0..frame.height {
        let dst = (y + pad) * width + pad;
        let src = y * frame.width;
        data[dst..dst + frame.width].copy_from_slice(&frame.data[src..src + frame.width]);
        mask[dst..dst + frame.width].fill(true);
    }
    Canvas {
        frame: Frame {
            width,
            height,
            data,
        },
        mask: Mask {
            width,
            height,
            data: mask,
        },
        pad,
        inner: Rect::new(pad, pad, frame.width, frame.height),
    }
}

/// 3x3 Sobel gradient magnitude on BT.601 luminance with replicated borders.
pub fn sobel_edges(frame: &Frame) -> EdgeMap {
    let gray = frame.luma();
    let (w, h) = (gray.width, gray.height);
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        let yi = y as i64;
        for x in 0..w {
            let xi = x as i64;
            let p = |dx: i64, dy: i64| gray.get_clamped(xi + dx, yi + dy) as f64;
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            out[y * w + x] = (gx * gx + gy * gy).sqrt() as f32;
        }
    }
    EdgeMap(GrayImage {
        width: w,
        height: h,
        data: out,
    })
}

/// Per-pixel 2D displacement (in pixels) plus validity.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<[f64; 2]>,
    valid: Mask,
}

impl FlowField {
    /// Zero flow, valid everywhere.
    pub fn zeros(width: usize, height: usize) -> Result<Self, RasterError> {
        Ok(Self {
            width,
            height,
            data: vec![[0.0; 2]; width * height],
            valid: Mask::new(width, height, true)?,
        })
    }

    pub fn constant(width: usize, height: usize, d: [f64; 2]) -> Result<Self, RasterError> {
        Ok(Self {
            width,
            height,
            data: vec![d; width * height],
            valid: Mask::new(width, height, true)?,
        })
    }

    /// Builds a field; displacements are zeroed wherever `valid` is 0.
    pub fn from_parts(
        width: usize,
        height: usize,
        mut data: Vec<[f64; 2]>,
        valid: Mask,
    ) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(RasterError::PixelCount {
                expected: width * height,
                actual: data.len(),
            });
        }
        if valid.width != width || valid.height != height {
            return Err(RasterError::DimensionMismatch(
                width,
                height,
                valid.width,
                valid.height,
            ));
        }
        for (d, &m) in data.iter_mut().zip(&valid.data) {
            if !m {
                *d = [0.0; 2];
            }
        }
        Ok(Self {
            width,
            height,
            data,
            valid,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 2],
    ) -> Result<Self, RasterError> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            data,
            valid: Mask::new(width, height, true)?,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }

    #[inline]
    pub fn valid(&self) -> &Mask {
        &self.valid
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid.get(x, y)
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|d| d[0].is_finite() && d[1].is_finite())
    }

    /// Elementwise product with a mask (the masking contract for estimated flow).
    pub fn masked(&self, mask: &Mask) -> Result<FlowField, RasterError> {
        if mask.width != self.width || mask.height != self.height {
            return Err(RasterError::DimensionMismatch(
                self.width,
                self.height,
                mask.width,
                mask.height,
            ));
        }
        let valid: Vec<bool> = mask.data.clone();
        FlowField::from_parts(
            self.width,
            self.height,
            self.data.clone(),
            Mask {
                width: self.width,
                height: self.height,
                data: valid,
            },
        )
    }

    pub fn negated(&self) -> FlowField {
        FlowField {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|d| [-d[0], -d[1]]).collect(),
            valid: self.valid.clone(),
        }
    }

    /// Largest displacement magnitude over valid pixels.
    pub fn max_magnitude(&self) -> f64 {
        self.data
            .iter()
            .zip(&self.valid.data)
            .filter(|(_, &m)| m)
            .map(|(d, _)| d[0].hypot(d[1]))
            .fold(0.0, f64::max)
    }
}
