//! Occlusion-sensitivity heatmaps.
//!
//! A square patch filled with the image mean is slid over the scan; each
//! pixel scores the average drop in target-class probability over the
//! windows that covered it. Scores are then min-max normalized to [0, 1].

use std::path::Path;

use thiserror::Error;

use crate::imaging::{self, GrayImage, ImagingError};
use crate::metrics::Class;
use crate::nn::{Network, NnError};
use crate::par::Exec;

pub const DEFAULT_PATCH: usize = 16;
pub const DEFAULT_STRIDE: usize = 8;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// Anything that scores a scan for a class.
pub trait Classifier: Sync {
    fn class_probability(&self, img: &GrayImage, class: Class) -> Result<f64, SaliencyError>;
}

impl Classifier for Network {
    fn class_probability(&self, img: &GrayImage, class: Class) -> Result<f64, SaliencyError> {
        Ok(self.predict_one(&imaging::normalize(img))?[class.index()])
    }
}

/// Plain scoring functions, handy for analytic test models.
impl<F> Classifier for F
where
    F: Fn(&GrayImage, Class) -> f64 + Sync,
{
    fn class_probability(&self, img: &GrayImage, class: Class) -> Result<f64, SaliencyError> {
        Ok(self(img, class))
    }
}

/// One occluded window and the probability drop it caused.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    degenerate: bool,
    windows: Vec<Window>,
}

impl Heatmap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major values in [0, 1].
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Set when every pixel scored the same; the map is then all zeros.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn to_image(&self) -> GrayImage {
        let data = self.values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        GrayImage::new(self.width, self.height, data).expect("dimensions match")
    }

    /// 50/50 blend of the scan and the scaled heatmap.
    pub fn overlay(&self, img: &GrayImage) -> Result<GrayImage, SaliencyError> {
        if img.width() != self.width || img.height() != self.height {
            return Err(SaliencyError::InvalidParameter(format!(
                "overlay image is {}x{}, heatmap is {}x{}",
                img.width(),
                img.height(),
                self.width,
                self.height
            )));
        }
        let heat = self.to_image();
        let data = img.data().iter().zip(heat.data()).map(|(&a, &b)| (a as u16 + b as u16).div_ceil(2) as u8).collect();
        Ok(GrayImage::new(self.width, self.height, data)?)
    }

    /// Writes `<stem>.heatmap.pgm` and `<stem>.overlay.pgm` into `dir`.
    pub fn write_pgms(&self, img: &GrayImage, dir: impl AsRef<Path>, stem: &str) -> Result<(), SaliencyError> {
        let dir = dir.as_ref();
        self.to_image().write_pgm(dir.join(format!("{stem}.heatmap.pgm")))?;
        self.overlay(img)?.write_pgm(dir.join(format!("{stem}.overlay.pgm")))?;
        Ok(())
    }
}

/// Window origins along one axis: 0, stride, 2·stride, ... while inside the
/// image. Windows hanging over the far edge are clipped.
fn starts(size: usize, stride: usize) -> Vec<usize> {
    (0..size).step_by(stride).collect()
}

pub fn occlusion_heatmap<M: Classifier + ?Sized>(
    model: &M,
    img: &GrayImage,
    target: Class,
    patch: usize,
    stride: usize,
) -> Result<Heatmap, SaliencyError> {
    occlusion_heatmap_with(model, img, target, patch, stride, Exec::default())
}

pub fn occlusion_heatmap_with<M: Classifier + ?Sized>(
    model: &M,
    img: &GrayImage,
    target: Class,
    patch: usize,
    stride: usize,
    exec: Exec,
) -> Result<Heatmap, SaliencyError> {
    let (w, h) = (img.width(), img.height());
    if patch == 0 || stride == 0 {
        return Err(SaliencyError::InvalidParameter("patch and stride must be at least 1".into()));
    }
    if patch > w || patch > h {
        return Err(SaliencyError::InvalidParameter(format!("patch {patch} larger than {w}x{h} image")));
    }
    let base = model.class_probability(img, target)?;
    let fill = img.mean().round().clamp(0.0, 255.0) as u8;

    let mut rects = Vec::new();
    for y in starts(h, stride) {
        for x in starts(w, stride) {
            rects.push((x, y, patch.min(w - x), patch.min(h - y)));
        }
    }
    let drops = exec.map(&rects, |&(x0, y0, pw, ph)| {
        let occluded = GrayImage::from_fn(w, h, |x, y| {
            if x >= x0 && x < x0 + pw && y >= y0 && y < y0 + ph {
                fill
            } else {
                img.get(x, y)
            }
        });
        model.class_probability(&occluded, target).map(|p| base - p)
    });

    let mut sum = vec![0.0; w * h];
    let mut hits = vec![0u32; w * h];
    let mut windows = Vec::with_capacity(rects.len());
    for (&(x0, y0, pw, ph), drop) in rects.iter().zip(drops) {
        let drop = drop?;
        for y in y0..y0 + ph {
            for x in x0..x0 + pw {
                sum[y * w + x] += drop;
                hits[y * w + x] += 1;
            }
        }
        windows.push(Window { x: x0, y: y0, width: pw, height: ph, drop });
    }
    let raw: Vec<f64> = sum.iter().zip(&hits).map(|(s, &n)| s / n as f64).collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(hi - lo > 1e-12) || !lo.is_finite() || !hi.is_finite();
    let values = if degenerate {
        log::warn!("occlusion map is flat; returning all zeros");
        vec![0.0; w * h]
    } else {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    Ok(Heatmap { width: w, height: h, values, degenerate, windows })
}
