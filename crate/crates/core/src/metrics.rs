//! Overlap and centre-distance metrics on pixel boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixels: top-left corner and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct PixelBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for PixelBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        PixelBox { x, y, w, h }
    }
}

impl From<PixelBox> for [f64; 4] {
    fn from(b: PixelBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl PixelBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        PixelBox { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        PixelBox {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    /// Intersection with the `[0, width] × [0, height]` frame, keeping at
    /// least one pixel of extent.
    pub fn clamped(&self, width: f64, height: f64) -> PixelBox {
        let clamp_axis = |lo: f64, len: f64, limit: f64| {
            let min_len = limit.min(1.0);
            let a = lo.clamp(0.0, limit - min_len);
            let b = (lo + len).clamp(a + min_len, limit);
            (a, b - a)
        };
        let (x, w) = clamp_axis(self.x, self.w, width);
        let (y, h) = clamp_axis(self.y, self.h, height);
        PixelBox { x, y, w, h }
    }
}

/// Intersection over union; 0 for disjoint or empty boxes. Capped at 1,
/// which corner rounding can otherwise exceed for identical boxes.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).min(1.0)
    } else {
        0.0
    }
}

pub fn center_error(a: &PixelBox, b: &PixelBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Number of overlap thresholds on the success curve: `0, 0.02, …, 1.0`.
pub const SUCCESS_THRESHOLDS: usize = 51;

/// Default centre-error radius for the precision rate, in pixels.
pub const PRECISION_RADIUS: f64 = 20.0;

fn check_lengths(preds: &[PixelBox], gts: &[PixelBox]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Alignment(format!(
            "{} predictions for {} ground-truth boxes",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// Mean over thresholds `θ_i = i/50` of the fraction of frames with
/// `IoU > θ_i`.
pub fn success_rate(preds: &[PixelBox], gts: &[PixelBox]) -> Result<f64> {
    check_lengths(preds, gts)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let ious: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| iou(p, g)).collect();
    let n = ious.len() as f64;
    let total: f64 = (0..SUCCESS_THRESHOLDS)
        .map(|i| {
            let theta = i as f64 / (SUCCESS_THRESHOLDS - 1) as f64;
            ious.iter().filter(|&&v| v > theta).count() as f64 / n
        })
        .sum();
    Ok(total / SUCCESS_THRESHOLDS as f64)
}

/// Fraction of frames whose centre error is at most `radius` pixels.
pub fn precision_rate(preds: &[PixelBox], gts: &[PixelBox], radius: f64) -> Result<f64> {
    check_lengths(preds, gts)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| center_error(p, g) <= radius)
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub iou: f64,
    pub center_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub sr: f64,
    pub pr: f64,
    pub per_frame: Vec<FrameMetrics>,
}

impl Report {
    pub fn mean_iou(&self) -> f64 {
        if self.per_frame.is_empty() {
            return 0.0;
        }
        self.per_frame.iter().map(|f| f.iou).sum::<f64>() / self.per_frame.len() as f64
    }
}

pub fn report(preds: &[PixelBox], gts: &[PixelBox]) -> Result<Report> {
    Ok(Report {
        sr: success_rate(preds, gts)?,
        pr: precision_rate(preds, gts, PRECISION_RADIUS)?,
        per_frame: preds
            .iter()
            .zip(gts)
            .map(|(p, g)| FrameMetrics {
                iou: iou(p, g),
                center_err: center_error(p, g),
            })
            .collect(),
    })
}
