//! Grayscale raster preprocessing: gamma correction, bilinear resize,
//! [0,1] normalization, and the random geometric augmentation used to
//! enlarge training sets.
//!
//! The deterministic pipeline order is gamma, then resize, then (training
//! only) augment, then normalize.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// 8-bit grayscale raster, row-major.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GrayImage({}x{})", self.width, self.height)
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(ImagingError::InvalidInput(format!(
                "buffer of {} bytes for {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Binary PGM (P5) encoding with maxval 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let magic = pgm_token(bytes, &mut pos)?;
        if magic != "P5" {
            return Err(ImagingError::Pgm(format!("unsupported magic {magic:?}")));
        }
        let width: usize = pgm_number(bytes, &mut pos)?;
        let height: usize = pgm_number(bytes, &mut pos)?;
        let maxval: usize = pgm_number(bytes, &mut pos)?;
        if maxval == 0 || maxval > 255 {
            return Err(ImagingError::Pgm(format!("maxval {maxval} is not 8-bit")));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(ImagingError::Pgm("missing raster separator".into()));
        }
        pos += 1;
        let n = width * height;
        if bytes.len() < pos + n {
            return Err(ImagingError::Pgm(format!(
                "raster truncated: need {n} bytes, have {}",
                bytes.len() - pos
            )));
        }
        let mut data = bytes[pos..pos + n].to_vec();
        if maxval != 255 {
            for v in &mut data {
                *v = ((*v as usize * 255 + maxval / 2) / maxval).min(255) as u8;
            }
        }
        Self::new(width, height, data)
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_pgm(&buf)
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }
}

fn pgm_skip(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        if bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else if bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    pgm_skip(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImagingError::Pgm("unexpected end of header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| ImagingError::Pgm("non-ascii header".into()))
}

fn pgm_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = pgm_token(bytes, pos)?;
    tok.parse().map_err(|_| ImagingError::Pgm(format!("bad header number {tok:?}")))
}

/// Round half up, then clamp into the 8-bit range.
#[inline]
fn to_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ResizeMethod {
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub gamma: f64,
    pub target_side: usize,
    pub resize: ResizeMethod,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { gamma: 2.4, target_side: 128, resize: ResizeMethod::Bilinear }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(ImagingError::InvalidParameter(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.target_side < 8 {
            return Err(ImagingError::InvalidParameter(format!(
                "target side must be >= 8, got {}",
                self.target_side
            )));
        }
        Ok(())
    }
}

/// `O = round((I/255)^gamma * 255)` per pixel.
pub fn gamma_correct(img: &GrayImage, gamma: f64) -> Result<GrayImage> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(ImagingError::InvalidParameter(format!("gamma must be > 0, got {gamma}")));
    }
    let mut lut = [0u8; 256];
    for (i, slot) in lut.iter_mut().enumerate() {
        *slot = to_u8((i as f64 / 255.0).powf(gamma) * 255.0);
    }
    Ok(GrayImage {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| lut[v as usize]).collect(),
    })
}

/// Bilinear resize to a `side` x `side` square, sampling at pixel centers.
pub fn resize_bilinear(img: &GrayImage, side: usize) -> Result<GrayImage> {
    resize_bilinear_to(img, side, side)
}

pub fn resize_bilinear_to(img: &GrayImage, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if img.is_empty() {
        return Err(ImagingError::InvalidInput("cannot resize an empty image".into()));
    }
    if out_w == 0 || out_h == 0 {
        return Err(ImagingError::InvalidParameter("output side must be >= 1".into()));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let axis = |i: usize, scale: f64, len: usize| {
        let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, sx, img.width)).collect();
    let mut data = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, sy, img.height);
        for &(x0, x1, fx) in &cols {
            let top = img.get(x0, y0) as f64 * (1.0 - fx) + img.get(x1, y0) as f64 * fx;
            let bot = img.get(x0, y1) as f64 * (1.0 - fx) + img.get(x1, y1) as f64 * fx;
            data.push(to_u8(top * (1.0 - fy) + bot * fy));
        }
    }
    Ok(GrayImage { width: out_w, height: out_h, data })
}

/// Intensities scaled to [0,1], shape `(height, width, 1)`.
pub fn normalize(img: &GrayImage) -> Tensor {
    Tensor::new(
        vec![img.height, img.width, 1],
        img.data.iter().map(|&v| v as f64 / 255.0).collect(),
    )
    .expect("shape matches raster length")
}

/// Inverse of [`normalize`]: scale by 255 and round.
pub fn denormalize(t: &Tensor) -> Result<GrayImage> {
    let shape = t.shape();
    if shape.len() != 3 || shape[2] != 1 {
        return Err(ImagingError::InvalidInput(format!("expected (h, w, 1) tensor, got {shape:?}")));
    }
    GrayImage::new(shape[1], shape[0], t.data().iter().map(|&v| to_u8(v * 255.0)).collect())
}

/// Gamma then resize, the client-side preprocessing.
pub fn preprocess(img: &GrayImage, cfg: &PreprocessConfig) -> Result<GrayImage> {
    cfg.validate()?;
    let corrected = gamma_correct(img, cfg.gamma)?;
    match cfg.resize {
        ResizeMethod::Bilinear => resize_bilinear(&corrected, cfg.target_side),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FillMode {
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Degrees; the angle is drawn from `[-rotation_range, rotation_range]`.
    pub rotation_range: f64,
    pub width_shift: f64,
    pub height_shift: f64,
    /// Shear factor bound; the drawn factor `k` maps `x <- x + k*y`.
    pub shear_range: f64,
    /// Per-axis zoom drawn from `[1 - zoom_range, 1 + zoom_range]`.
    pub zoom_range: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub fill_mode: FillMode,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_range: 30.0,
            width_shift: 0.2,
            height_shift: 0.2,
            shear_range: 0.2,
            zoom_range: 0.2,
            horizontal_flip: true,
            vertical_flip: true,
            fill_mode: FillMode::Nearest,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            rotation_range: 0.0,
            width_shift: 0.0,
            height_shift: 0.0,
            shear_range: 0.0,
            zoom_range: 0.0,
            horizontal_flip: false,
            vertical_flip: false,
            fill_mode: FillMode::Nearest,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation_range", self.rotation_range),
            ("width_shift", self.width_shift),
            ("height_shift", self.height_shift),
            ("shear_range", self.shear_range),
            ("zoom_range", self.zoom_range),
        ];
        for (name, v) in ranges {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(ImagingError::InvalidParameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        for (name, v) in &ranges[1..] {
            if *v > 1.0 {
                return Err(ImagingError::InvalidParameter(format!("{name} must be <= 1, got {v}")));
            }
        }
        Ok(())
    }
}

/// One concrete draw from an [`AugmentConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub shear: f64,
    pub zoom_x: f64,
    pub zoom_y: f64,
    pub flip_h: bool,
    pub flip_v: bool,
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        rng.gen_range(-r..=r)
    }
}

impl AugmentParams {
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, width: usize, height: usize, rng: &mut R) -> Self {
        let angle_deg = symmetric(rng, cfg.rotation_range);
        let shift_x = symmetric(rng, cfg.width_shift) * width as f64;
        let shift_y = symmetric(rng, cfg.height_shift) * height as f64;
        let shear = symmetric(rng, cfg.shear_range);
        let zoom_x = 1.0 + symmetric(rng, cfg.zoom_range);
        let zoom_y = 1.0 + symmetric(rng, cfg.zoom_range);
        let flip_h = cfg.horizontal_flip && rng.gen_bool(0.5);
        let flip_v = cfg.vertical_flip && rng.gen_bool(0.5);
        Self { angle_deg, shift_x, shift_y, shear, zoom_x, zoom_y, flip_h, flip_v }
    }

    /// Map every output pixel back into the source, interpolate bilinearly,
    /// and clamp out-of-range coordinates to the nearest edge pixel.
    pub fn apply(&self, img: &GrayImage) -> GrayImage {
        let (w, h) = (img.width, img.height);
        if w == 0 || h == 0 {
            return img.clone();
        }
        let theta = self.angle_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        // rotation * shear * zoom, mapping output offsets to input offsets
        let m00 = cos * self.zoom_x;
        let m01 = (cos * self.shear - sin) * self.zoom_y;
        let m10 = sin * self.zoom_x;
        let m11 = (sin * self.shear + cos) * self.zoom_y;
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let max_x = (w - 1) as f64;
        let max_y = (h - 1) as f64;

        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let sx = (m00 * dx + m01 * dy + cx + self.shift_x).clamp(0.0, max_x);
                let sy = (m10 * dx + m11 * dy + cy + self.shift_y).clamp(0.0, max_y);
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = sx - x0 as f64;
                let fy = sy - y0 as f64;
                let top = img.get(x0, y0) as f64 * (1.0 - fx) + img.get(x1, y0) as f64 * fx;
                let bot = img.get(x0, y1) as f64 * (1.0 - fx) + img.get(x1, y1) as f64 * fx;
                out.push(to_u8(top * (1.0 - fy) + bot * fy));
            }
        }
        if self.flip_h {
            for row in out.chunks_mut(w) {
                row.reverse();
            }
        }
        if self.flip_v {
            let mut flipped = Vec::with_capacity(out.len());
            for row in out.chunks(w).rev() {
                flipped.extend_from_slice(row);
            }
            out = flipped;
        }
        GrayImage { width: w, height: h, data: out }
    }
}

/// Draw a transform from `cfg` and apply it.
pub fn augment<R: Rng + ?Sized>(img: &GrayImage, cfg: &AugmentConfig, rng: &mut R) -> GrayImage {
    AugmentParams::sample(cfg, img.width, img.height, rng).apply(img)
}
