//! Frame-by-frame tracking: crop around the last box, run the network, map
//! the decoded box back to the image, advance the temporal queues and
//! occasionally refresh the dynamic template.

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::bsi::FilterSchedule;
use crate::encoder::{LayerTrace, ModalityImages};
use crate::error::{Error, Result};
use crate::head::{decode_bbox, BBox, HeadOutput};
use crate::metrics::PixelBox;
use crate::model::{forward_frame, FrameImages, Model};
use crate::params::Session;
use crate::tensor::Tensor;
use crate::tsg::TemporalQueue;

/// Both modalities of one frame, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// `[H, W, 3]`
    pub rgb: Tensor,
    /// `[H, W, 1]`
    pub x: Tensor,
}

impl Frame {
    pub fn from_images(rgb: &RgbImage, x: &GrayImage) -> Self {
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let scale = |v: &u8| *v as f64 / 255.0;
        Frame {
            rgb: Tensor::new(vec![h, w, 3], rgb.as_raw().iter().map(scale).collect()).expect("rgb buffer"),
            x: Tensor::new(vec![h, w, 1], x.as_raw().iter().map(scale).collect()).expect("gray buffer"),
        }
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[0]
    }
}

/// Intensity used outside the image and subtracted before embedding.
const MID_GRAY: f64 = 0.5;

/// Square window `side` pixels wide centred on `(cx, cy)`, bilinearly
/// resampled to `out×out` and shifted to zero mean gray.
pub fn crop_square(img: &Tensor, cx: f64, cy: f64, side: f64, out: usize) -> Result<Tensor> {
    let &[h, w, ch] = img.shape() else {
        return Err(Error::InvalidShape(format!(
            "crop expects [H, W, C], got {:?}",
            img.shape()
        )));
    };
    if !(side.is_finite() && side > 0.0) || out == 0 {
        return Err(Error::Domain(format!("crop side {side} with output {out}")));
    }
    let src = img.data();
    let step = side / out as f64;
    let x0 = cx - side / 2.0;
    let y0 = cy - side / 2.0;
    let sample = |x: isize, y: isize, c: usize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            MID_GRAY
        } else {
            src[(y as usize * w + x as usize) * ch + c]
        }
    };
    let mut data = Vec::with_capacity(out * out * ch);
    for i in 0..out {
        let sy = y0 + (i as f64 + 0.5) * step - 0.5;
        let (fy, ty) = (sy.floor(), sy - sy.floor());
        for j in 0..out {
            let sx = x0 + (j as f64 + 0.5) * step - 0.5;
            let (fx, tx) = (sx.floor(), sx - sx.floor());
            let (xi, yi) = (fx as isize, fy as isize);
            for c in 0..ch {
                let top = sample(xi, yi, c) * (1.0 - tx) + sample(xi + 1, yi, c) * tx;
                let bot = sample(xi, yi + 1, c) * (1.0 - tx) + sample(xi + 1, yi + 1, c) * tx;
                data.push(top * (1.0 - ty) + bot * ty - MID_GRAY);
            }
        }
    }
    Tensor::new(vec![out, out, ch], data)
}

/// Square crop window in image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

impl Window {
    pub fn around(b: &PixelBox, factor: f64) -> Self {
        let (cx, cy) = b.center();
        Window {
            cx,
            cy,
            side: factor * (b.w * b.h).max(0.0).sqrt(),
        }
    }

    /// A box in image pixels expressed relative to this window.
    pub fn normalize(&self, b: &PixelBox) -> BBox {
        let (cx, cy) = b.center();
        BBox::new(
            (cx - (self.cx - self.side / 2.0)) / self.side,
            (cy - (self.cy - self.side / 2.0)) / self.side,
            b.w / self.side,
            b.h / self.side,
        )
    }

    /// A window-relative box mapped back to image pixels.
    pub fn denormalize(&self, b: &BBox) -> PixelBox {
        PixelBox::from_center(
            self.cx - self.side / 2.0 + b.cx * self.side,
            self.cy - self.side / 2.0 + b.cy * self.side,
            b.w * self.side,
            b.h * self.side,
        )
    }
}

/// A template or search crop for both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct CropPair {
    pub rgb: Tensor,
    pub x: Tensor,
}

impl CropPair {
    pub fn take(frame: &Frame, win: &Window, size: usize) -> Result<Self> {
        Ok(CropPair {
            rgb: crop_square(&frame.rgb, win.cx, win.cy, win.side, size)?,
            x: crop_square(&frame.x, win.cx, win.cy, win.side, size)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Dynamic template refresh interval K, in frames.
    pub update_interval: usize,
    /// Minimum peak score τ for a refresh.
    pub update_threshold: f64,
    /// Search window side relative to `√(w·h)` of the last box.
    pub search_factor: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            update_interval: 25,
            update_threshold: 0.7,
            search_factor: 2.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.update_interval == 0 {
            return Err(Error::Config("update_interval must be positive".into()));
        }
        if !(self.search_factor > 0.0) {
            return Err(Error::Config(format!(
                "search_factor {} must be positive",
                self.search_factor
            )));
        }
        Ok(())
    }
}

/// Mutable per-sequence state.
#[derive(Clone, Debug)]
pub struct TrackState {
    template_fixed: CropPair,
    pub template_dynamic: CropPair,
    pub queue_rgb: TemporalQueue,
    pub queue_x: TemporalQueue,
    pub last_box: PixelBox,
    pub frame_index: usize,
    pub search_scale: f64,
    image_size: (f64, f64),
}

impl TrackState {
    /// Template cropped at initialization; never replaced.
    pub fn template_fixed(&self) -> &CropPair {
        &self.template_fixed
    }
}

/// What one tracked frame produced.
#[derive(Clone, Debug)]
pub struct FrameResult {
    pub frame: usize,
    pub bbox: PixelBox,
    pub score: f64,
    pub window: Option<Window>,
    pub head: Option<HeadOutput>,
    pub traces: Vec<LayerTrace>,
}

/// JSON-lines record of a tracked frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub score: f64,
}

pub struct Tracker<'m> {
    model: &'m Model,
    pub cfg: TrackerConfig,
    schedule: FilterSchedule,
    /// When false the queues are emptied before every frame.
    pub use_temporal: bool,
    /// Keep per-layer attention and masks in each [`FrameResult`].
    pub record_traces: bool,
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m Model, cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Tracker {
            model,
            schedule: model.cfg.schedule()?,
            cfg,
            use_temporal: true,
            record_traces: false,
        })
    }

    /// Template side relative to `√(w·h)`, keeping the template/search area
    /// ratio of the crop sizes.
    pub fn template_factor(&self) -> f64 {
        self.cfg.search_factor * self.model.cfg.template_size as f64 / self.model.cfg.search_size as f64
    }

    fn template_crop(&self, frame: &Frame, b: &PixelBox) -> Result<CropPair> {
        let win = Window::around(b, self.template_factor());
        CropPair::take(frame, &win, self.model.cfg.template_size)
    }

    pub fn init(&self, frame: &Frame, gt: PixelBox) -> Result<TrackState> {
        let (w, h) = (frame.width() as f64, frame.height() as f64);
        let inside = PixelBox::new(0.0, 0.0, w, h);
        if !gt.is_valid() || crate::metrics::iou(&gt, &inside) <= 0.0 {
            return Err(Error::Domain(format!("initial box {gt:?} outside the {w}x{h} frame")));
        }
        let t = self.template_crop(frame, &gt)?;
        let m = self.model.cfg.m;
        Ok(TrackState {
            template_fixed: t.clone(),
            template_dynamic: t,
            queue_rgb: TemporalQueue::new(m),
            queue_x: TemporalQueue::new(m),
            last_box: gt.clamped(w, h),
            frame_index: 0,
            search_scale: self.cfg.search_factor,
            image_size: (w, h),
        })
    }

    /// Replaces the dynamic template when the frame index is a multiple of
    /// the interval and the score clears the threshold. Returns whether it did.
    pub fn update_template(&self, state: &mut TrackState, frame: &Frame, b: &PixelBox, score: f64) -> Result<bool> {
        if !state.frame_index.is_multiple_of(self.cfg.update_interval) || !(score > self.cfg.update_threshold) {
            return Ok(false);
        }
        state.template_dynamic = self.template_crop(frame, b)?;
        Ok(true)
    }

    pub fn track_frame(&self, state: &mut TrackState, frame: &Frame) -> Result<FrameResult> {
        state.frame_index += 1;
        let win = Window::around(&state.last_box, state.search_scale);
        if !(win.side >= 1.0) {
            return Ok(FrameResult {
                frame: state.frame_index,
                bbox: state.last_box,
                score: 0.0,
                window: None,
                head: None,
                traces: vec![],
            });
        }
        if !self.use_temporal {
            state.queue_rgb.clear();
            state.queue_x.clear();
        }
        let search = CropPair::take(frame, &win, self.model.cfg.search_size)?;
        let images = FrameImages {
            rgb: ModalityImages {
                template_fixed: &state.template_fixed.rgb,
                template_dynamic: &state.template_dynamic.rgb,
                search: &search.rgb,
            },
            x: ModalityImages {
                template_fixed: &state.template_fixed.x,
                template_dynamic: &state.template_dynamic.x,
                search: &search.x,
            },
        };
        let mut sess = Session::new(&self.model.params);
        let fwd = forward_frame(
            &mut sess,
            &self.model.cfg,
            &images,
            &state.queue_rgb,
            &state.queue_x,
            &self.schedule,
        )?;
        let out = fwd.head.output(&sess.g)?;
        let (_, _, score) = out.peak();
        let pred = win.denormalize(&decode_bbox(&out));
        let (w, h) = state.image_size;
        let bbox = if pred.is_valid() {
            pred.clamped(w, h)
        } else {
            state.last_box
        };
        state.queue_rgb.push(sess.g.value(fwd.t_rgb).clone());
        state.queue_x.push(sess.g.value(fwd.t_x).clone());
        state.last_box = bbox;
        self.update_template(state, frame, &bbox, score)?;
        Ok(FrameResult {
            frame: state.frame_index,
            bbox,
            score,
            window: Some(win),
            head: Some(out),
            traces: if self.record_traces { fwd.encoded.layers } else { vec![] },
        })
    }
}
