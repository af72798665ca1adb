//! Synthetic paired-modality sequences with exact ground truth.
//!
//! A [`SceneScript`] describes a target (and optional distractors) moving
//! along piecewise-linear waypoints, occluders covering part of the target
//! over frame intervals, and a per-frame scale/aspect schedule. The second
//! modality is derived from the rendered RGB by a fixed transform plus
//! independent noise.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::PixelBox;
use crate::tracker::Frame;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Texture {
    #[default]
    Solid,
    Stripes {
        period: f64,
    },
    Checker {
        period: f64,
    },
}

/// Object centre at `frame`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub frame: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Base width and height in pixels.
    pub size: [f64; 2],
    /// RGB in `[0, 1]`.
    pub color: [f64; 3],
    #[serde(default)]
    pub texture: Texture,
    pub trajectory: Vec<Waypoint>,
}

/// Covers the leading `coverage` fraction of the target box during
/// `[start, end)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occluder {
    pub start: usize,
    pub end: usize,
    pub coverage: f64,
    pub color: [f64; 3],
}

/// Scale and aspect keyframe for the target; `w = base_w·scale·√aspect`,
/// `h = base_h·scale/√aspect`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformKey {
    pub frame: usize,
    pub scale: f64,
    pub aspect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Background {
    pub color: [f64; 3],
    /// Horizontal brightness ramp amplitude.
    pub gradient: f64,
    pub noise_std: f64,
}

impl Default for Background {
    fn default() -> Self {
        Background {
            color: [0.35, 0.35, 0.35],
            gradient: 0.1,
            noise_std: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum XKind {
    Invert,
    Edge,
    Threshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XTransform {
    pub transform: XKind,
    /// Noise standard deviation in `[0, 1]` intensity units.
    pub noise_std: f64,
    /// Luminance cut for `threshold`, in `[0, 1]`.
    pub threshold: f64,
}

impl Default for XTransform {
    fn default() -> Self {
        XTransform {
            transform: XKind::Invert,
            noise_std: 0.02,
            threshold: 0.5,
        }
    }
}

fn default_side() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneScript {
    pub seed: u64,
    pub frames: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default)]
    pub background: Background,
    pub target: ObjectSpec,
    #[serde(default)]
    pub distractors: Vec<ObjectSpec>,
    #[serde(default)]
    pub occluders: Vec<Occluder>,
    #[serde(default)]
    pub deformation: Vec<DeformKey>,
    #[serde(default)]
    pub modality_x: XTransform,
}

/// Linear interpolation over keyed frames, held constant outside the keys.
fn interpolate<const N: usize>(keys: &[(usize, [f64; N])], frame: usize) -> [f64; N] {
    let Some(first) = keys.first() else {
        return [0.0; N];
    };
    if frame <= first.0 {
        return first.1;
    }
    for w in keys.windows(2) {
        let ((f0, v0), (f1, v1)) = (w[0], w[1]);
        if frame <= f1 {
            let t = if f1 == f0 {
                1.0
            } else {
                (frame - f0) as f64 / (f1 - f0) as f64
            };
            return std::array::from_fn(|i| v0[i] + t * (v1[i] - v0[i]));
        }
    }
    keys[keys.len() - 1].1
}

impl ObjectSpec {
    pub fn center(&self, frame: usize) -> (f64, f64) {
        let keys: Vec<_> = self.trajectory.iter().map(|w| (w.frame, [w.x, w.y])).collect();
        let [x, y] = interpolate(&keys, frame);
        (x, y)
    }

    /// Largest per-frame centre displacement implied by the waypoints.
    pub fn max_speed(&self) -> f64 {
        self.trajectory
            .windows(2)
            .filter(|w| w[1].frame > w[0].frame)
            .map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y) / (w[1].frame - w[0].frame) as f64)
            .fold(0.0, f64::max)
    }

    fn validate(&self, what: &str, frames: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("{what}: {m}")));
        if !(self.size[0] > 0.0 && self.size[1] > 0.0) {
            return bad(format!("size {:?} must be positive", self.size));
        }
        if self.trajectory.is_empty() {
            return bad("trajectory needs at least one waypoint".into());
        }
        if self.trajectory.windows(2).any(|w| w[1].frame < w[0].frame) {
            return bad("waypoint frames must be nondecreasing".into());
        }
        if let Some(w) = self.trajectory.iter().find(|w| w.frame >= frames) {
            return bad(format!("waypoint at frame {} beyond {frames} frames", w.frame));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad(format!("color {:?} outside [0, 1]", self.color));
        }
        match self.texture {
            Texture::Stripes { period } | Texture::Checker { period } if !(period > 0.0) => {
                bad(format!("texture period {period} must be positive"))
            }
            _ => Ok(()),
        }
    }
}

impl SceneScript {
    /// Target box at `frame`.
    pub fn target_box(&self, frame: usize) -> PixelBox {
        let (cx, cy) = self.target.center(frame);
        let keys: Vec<_> = self
            .deformation
            .iter()
            .map(|k| (k.frame, [k.scale, k.aspect]))
            .collect();
        let [scale, aspect] = if keys.is_empty() {
            [1.0, 1.0]
        } else {
            interpolate(&keys, frame)
        };
        let w = self.target.size[0] * scale * aspect.sqrt();
        let h = self.target.size[1] * scale / aspect.sqrt();
        PixelBox::from_center(cx, cy, w, h)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.frames == 0 {
            return bad("a script needs at least one frame".into());
        }
        if self.width < 8 || self.height < 8 {
            return bad(format!("frame size {}x{} below 8x8", self.width, self.height));
        }
        self.target.validate("target", self.frames)?;
        for (i, d) in self.distractors.iter().enumerate() {
            d.validate(&format!("distractor {i}"), self.frames)?;
        }
        for o in &self.occluders {
            if o.start >= o.end || o.end > self.frames {
                return bad(format!(
                    "occluder interval [{}, {}) not inside {} frames",
                    o.start, o.end, self.frames
                ));
            }
            if !(o.coverage > 0.0 && o.coverage <= 1.0) {
                return bad(format!("occluder coverage {} outside (0, 1]", o.coverage));
            }
        }
        for k in &self.deformation {
            if k.frame >= self.frames || !(k.scale > 0.0) || !(k.aspect > 0.0) {
                return bad(format!("invalid deformation key {k:?}"));
            }
        }
        if self.deformation.windows(2).any(|w| w[1].frame < w[0].frame) {
            return bad("deformation frames must be nondecreasing".into());
        }
        let x = &self.modality_x;
        if !(x.noise_std >= 0.0) || !(0.0..=1.0).contains(&x.threshold) {
            return bad(format!("invalid modality transform {x:?}"));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for f in 0..self.frames {
            let b = self.target_box(f);
            if !b.is_valid() || b.x < 0.0 || b.y < 0.0 || b.x + b.w > w || b.y + b.h > h {
                return bad(format!("target box {b:?} leaves the {w}x{h} frame at frame {f}"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::json(path, e))
    }
}

/// Built-in scene families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Slow linear motion, no distractors or occlusion.
    Easy,
    /// A distractor plus occluders covering at least 30% of the target.
    Occlusion,
    /// Scale swings of at least 2× with aspect changes.
    Deform,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Preset::Easy),
            "occlusion" => Ok(Preset::Occlusion),
            "deform" => Ok(Preset::Deform),
            other => Err(Error::Validation(format!("unknown preset `{other}`"))),
        }
    }
}

/// Speed bound of the easy preset, pixels per frame.
pub const EASY_MAX_SPEED: f64 = 1.0;

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    let mut c = [
        rng.random_range(0.0..0.3),
        rng.random_range(0.0..0.3),
        rng.random_range(0.0..0.3),
    ];
    let hi = rng.random_range(0..3);
    c[hi] = rng.random_range(0.75..1.0);
    c
}

fn random_texture<R: Rng>(rng: &mut R) -> Texture {
    match rng.random_range(0..3) {
        0 => Texture::Solid,
        1 => Texture::Stripes {
            period: rng.random_range(3.0..6.0),
        },
        _ => Texture::Checker {
            period: rng.random_range(3.0..6.0),
        },
    }
}

fn random_path<R: Rng>(rng: &mut R, frames: usize, side: f64, margin: f64, speed: f64) -> Vec<Waypoint> {
    let lo = margin;
    let hi = side - margin;
    let start = [rng.random_range(lo..hi), rng.random_range(lo..hi)];
    let last = frames.saturating_sub(1);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let v = rng.random_range(0.3 * speed..speed);
    let reach = v * last as f64;
    let end = [
        (start[0] + reach * angle.cos()).clamp(lo, hi),
        (start[1] + reach * angle.sin()).clamp(lo, hi),
    ];
    let mut path = vec![Waypoint {
        frame: 0,
        x: start[0],
        y: start[1],
    }];
    if last > 0 {
        path.push(Waypoint {
            frame: last,
            x: end[0],
            y: end[1],
        });
    }
    path
}

/// A seeded script of the given family on a 128×128 canvas.
pub fn preset(kind: Preset, seed: u64, frames: usize) -> SceneScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed0f5ce4e);
    let side = default_side() as f64;
    let base: [f64; 2] = [rng.random_range(18.0..28.0), rng.random_range(18.0..28.0)];
    let max_scale = if kind == Preset::Deform { 1.5 } else { 1.0 };
    let margin = 0.5 * base[0].max(base[1]) * max_scale * 1.2 + 4.0;
    let speed = match kind {
        Preset::Easy => EASY_MAX_SPEED,
        _ => 1.5,
    };
    let target = ObjectSpec {
        shape: if rng.random_bool(0.5) {
            Shape::Rect
        } else {
            Shape::Ellipse
        },
        size: base,
        color: random_color(&mut rng),
        texture: random_texture(&mut rng),
        trajectory: random_path(&mut rng, frames, side, margin, speed),
    };
    let g = rng.random_range(0.25..0.45);
    let background = Background {
        color: [g, g, g],
        gradient: rng.random_range(0.0..0.15),
        noise_std: 0.02,
    };
    let modality_x = XTransform {
        transform: [XKind::Invert, XKind::Edge, XKind::Threshold][(seed % 3) as usize],
        noise_std: 0.02,
        threshold: 0.5,
    };
    let mut script = SceneScript {
        seed,
        frames,
        width: side as usize,
        height: side as usize,
        background,
        target,
        distractors: vec![],
        occluders: vec![],
        deformation: vec![],
        modality_x,
    };
    match kind {
        Preset::Easy => {}
        Preset::Occlusion => {
            script.distractors.push(ObjectSpec {
                shape: Shape::Rect,
                size: [base[0] * 0.8, base[1] * 0.8],
                color: random_color(&mut rng),
                texture: random_texture(&mut rng),
                trajectory: random_path(&mut rng, frames, side, margin, speed),
            });
            let mut start = frames / 4;
            while start + 2 < frames {
                let len = rng.random_range(3..=8).min(frames - start);
                script.occluders.push(Occluder {
                    start,
                    end: start + len,
                    coverage: rng.random_range(0.3..0.6),
                    color: [g + 0.05, g + 0.05, g + 0.05],
                });
                start += len + rng.random_range(6..12);
            }
        }
        Preset::Deform => {
            let last = frames.saturating_sub(1);
            script.deformation = vec![
                DeformKey {
                    frame: 0,
                    scale: 0.7,
                    aspect: 1.0,
                },
                DeformKey {
                    frame: last / 2,
                    scale: max_scale,
                    aspect: 1.25,
                },
                DeformKey {
                    frame: last,
                    scale: 0.7,
                    aspect: 0.8,
                },
            ];
        }
    }
    script
}

/// Rendered frame before quantization.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub rgb: RgbImage,
    pub x: GrayImage,
    pub bbox: PixelBox,
}

fn texture_factor(t: Texture, u: f64, v: f64) -> f64 {
    let band = |s: f64, p: f64| (s / p).floor().rem_euclid(2.0) == 0.0;
    match t {
        Texture::Solid => 1.0,
        Texture::Stripes { period } => {
            if band(u, period) {
                1.0
            } else {
                0.45
            }
        }
        Texture::Checker { period } => {
            if band(u, period) == band(v, period) {
                1.0
            } else {
                0.45
            }
        }
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Fractional pixel coverage of a shape occupying `b`.
fn coverage(shape: Shape, b: &PixelBox, px: usize, py: usize) -> f64 {
    let (x0, y0) = (px as f64, py as f64);
    match shape {
        Shape::Rect => overlap(x0, x0 + 1.0, b.x, b.x + b.w) * overlap(y0, y0 + 1.0, b.y, b.y + b.h),
        Shape::Ellipse => {
            const S: usize = 4;
            let (cx, cy) = b.center();
            let (rx, ry) = (b.w / 2.0, b.h / 2.0);
            let mut hits = 0;
            for i in 0..S {
                for j in 0..S {
                    let sx = x0 + (j as f64 + 0.5) / S as f64;
                    let sy = y0 + (i as f64 + 0.5) / S as f64;
                    let (dx, dy) = ((sx - cx) / rx, (sy - cy) / ry);
                    if dx * dx + dy * dy <= 1.0 {
                        hits += 1;
                    }
                }
            }
            hits as f64 / (S * S) as f64
        }
    }
}

struct Canvas {
    w: usize,
    h: usize,
    data: Vec<[f64; 3]>,
}

impl Canvas {
    fn paint(&mut self, shape: Shape, b: &PixelBox, color: [f64; 3], texture: Texture) {
        let x0 = b.x.floor().max(0.0) as usize;
        let y0 = b.y.floor().max(0.0) as usize;
        let x1 = ((b.x + b.w).ceil().max(0.0) as usize).min(self.w);
        let y1 = ((b.y + b.h).ceil().max(0.0) as usize).min(self.h);
        for py in y0..y1 {
            for px in x0..x1 {
                let a = coverage(shape, b, px, py);
                if a <= 0.0 {
                    continue;
                }
                let f = texture_factor(texture, px as f64 + 0.5 - b.x, py as f64 + 0.5 - b.y);
                let dst = &mut self.data[py * self.w + px];
                for c in 0..3 {
                    dst[c] = dst[c] * (1.0 - a) + color[c] * f * a;
                }
            }
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn x_modality(script: &SceneScript, rgb: &RgbImage, rng: &mut ChaCha8Rng) -> GrayImage {
    let (w, h) = (script.width, script.height);
    let lum: Vec<f64> = rgb
        .pixels()
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
        .collect();
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        lum[yc * w + xc]
    };
    let t = &script.modality_x;
    let noise = Normal::new(0.0, t.noise_std.max(0.0)).expect("finite noise std");
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let base = match t.transform {
                XKind::Invert => 1.0 - lum[y * w + x],
                XKind::Threshold => {
                    if lum[y * w + x] > t.threshold {
                        1.0
                    } else {
                        0.0
                    }
                }
                XKind::Edge => {
                    let gx = at(xi + 1, yi - 1) + 2.0 * at(xi + 1, yi) + at(xi + 1, yi + 1)
                        - at(xi - 1, yi - 1)
                        - 2.0 * at(xi - 1, yi)
                        - at(xi - 1, yi + 1);
                    let gy = at(xi - 1, yi + 1) + 2.0 * at(xi, yi + 1) + at(xi + 1, yi + 1)
                        - at(xi - 1, yi - 1)
                        - 2.0 * at(xi, yi - 1)
                        - at(xi + 1, yi - 1);
                    (gx.hypot(gy) / 4.0).min(1.0)
                }
            };
            let n = if t.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            out.put_pixel(x as u32, y as u32, image::Luma([to_u8(base + n)]));
        }
    }
    out
}

/// Renders every frame in memory.
pub fn render(script: &SceneScript) -> Result<Vec<Rendered>> {
    script.validate()?;
    let (w, h) = (script.width, script.height);
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
    let mut rng_x = ChaCha8Rng::seed_from_u64(script.seed);
    rng_x.set_stream(1);
    let bg = &script.background;
    let noise = Normal::new(0.0, bg.noise_std.max(0.0)).expect("finite noise std");
    let mut frames = Vec::with_capacity(script.frames);
    for f in 0..script.frames {
        let mut canvas = Canvas {
            w,
            h,
            data: Vec::with_capacity(w * h),
        };
        for _y in 0..h {
            for x in 0..w {
                let ramp = bg.gradient * (x as f64 / w as f64 - 0.5);
                let n = if bg.noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                canvas.data.push(bg.color.map(|c| c + ramp + n));
            }
        }
        for d in &script.distractors {
            let (cx, cy) = d.center(f);
            let b = PixelBox::from_center(cx, cy, d.size[0], d.size[1]);
            canvas.paint(d.shape, &b, d.color, d.texture);
        }
        let bbox = script.target_box(f);
        let t = &script.target;
        canvas.paint(t.shape, &bbox, t.color, t.texture);
        for o in script.occluders.iter().filter(|o| (o.start..o.end).contains(&f)) {
            let cover = PixelBox::new(bbox.x - 1.0, bbox.y - 1.0, bbox.w * o.coverage + 1.0, bbox.h + 2.0);
            canvas.paint(Shape::Rect, &cover, o.color, Texture::Solid);
        }
        let mut rgb = RgbImage::new(w as u32, h as u32);
        for (i, px) in canvas.data.iter().enumerate() {
            rgb.put_pixel((i % w) as u32, (i / w) as u32, image::Rgb(px.map(to_u8)));
        }
        let x = x_modality(script, &rgb, &mut rng_x);
        frames.push(Rendered { rgb, x, bbox });
    }
    Ok(frames)
}

/// One annotated frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameAnno {
    pub rgb: String,
    pub x: String,
    pub bbox: PixelBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotations {
    pub frames: Vec<FrameAnno>,
}

/// An on-disk sequence: `rgb/%06d.ppm`, `x/%06d.pgm`, `anno.json`.
#[derive(Clone, Debug)]
pub struct SequenceRecord {
    pub dir: PathBuf,
    pub anno: Annotations,
}

fn encode_pnm(buf: &[u8], w: u32, h: u32, subtype: PnmSubtype, color: ExtendedColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(buf, w, h, color)
        .map_err(|e| Error::Image {
            path: "<memory>".into(),
            source: e,
        })?;
    Ok(out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a binary PGM.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let (w, h) = img.dimensions();
    let bytes = encode_pnm(
        img.as_raw(),
        w,
        h,
        PnmSubtype::Graymap(SampleEncoding::Binary),
        ExtendedColorType::L8,
    )?;
    write(path, &bytes)
}

pub fn anno_path(dir: &Path) -> PathBuf {
    dir.join("anno.json")
}

/// Renders `script` and writes it under `out`.
pub fn gen_sequence(script: &SceneScript, out: &Path) -> Result<SequenceRecord> {
    let frames = render(script)?;
    for sub in ["rgb", "x"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut anno = Annotations {
        frames: Vec::with_capacity(frames.len()),
    };
    for (i, f) in frames.iter().enumerate() {
        let rgb_rel = format!("rgb/{i:06}.ppm");
        let x_rel = format!("x/{i:06}.pgm");
        let (w, h) = f.rgb.dimensions();
        let ppm = encode_pnm(
            f.rgb.as_raw(),
            w,
            h,
            PnmSubtype::Pixmap(SampleEncoding::Binary),
            ExtendedColorType::Rgb8,
        )?;
        let pgm = encode_pnm(
            f.x.as_raw(),
            w,
            h,
            PnmSubtype::Graymap(SampleEncoding::Binary),
            ExtendedColorType::L8,
        )?;
        write(&out.join(&rgb_rel), &ppm)?;
        write(&out.join(&x_rel), &pgm)?;
        anno.frames.push(FrameAnno {
            rgb: rgb_rel,
            x: x_rel,
            bbox: f.bbox,
        });
    }
    let path = anno_path(out);
    let text = serde_json::to_string_pretty(&anno).map_err(|e| Error::json(&path, e))?;
    write(&path, text.as_bytes())?;
    Ok(SequenceRecord {
        dir: out.to_path_buf(),
        anno,
    })
}

fn read_image(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load(Cursor::new(bytes), ImageFormat::Pnm).map_err(|e| Error::Image {
        path: path.display().to_string(),
        source: e,
    })
}

impl SequenceRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = anno_path(dir);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let anno: Annotations = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if anno.frames.is_empty() {
            return Err(Error::Validation(format!("{} lists no frames", path.display())));
        }
        if let Some(f) = anno.frames.iter().find(|f| !f.bbox.is_valid()) {
            return Err(Error::Validation(format!(
                "invalid box {:?} in {}",
                f.bbox,
                path.display()
            )));
        }
        Ok(SequenceRecord {
            dir: dir.to_path_buf(),
            anno,
        })
    }

    pub fn len(&self) -> usize {
        self.anno.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anno.frames.is_empty()
    }

    pub fn gt(&self, i: usize) -> PixelBox {
        self.anno.frames[i].bbox
    }

    pub fn gts(&self) -> Vec<PixelBox> {
        self.anno.frames.iter().map(|f| f.bbox).collect()
    }

    pub fn images(&self, i: usize) -> Result<(RgbImage, GrayImage)> {
        let f = &self.anno.frames[i];
        let rgb = read_image(&self.dir.join(&f.rgb))?.to_rgb8();
        let x = read_image(&self.dir.join(&f.x))?.to_luma8();
        if rgb.dimensions() != x.dimensions() {
            return Err(Error::Validation(format!(
                "frame {i}: modality sizes differ {:?} vs {:?}",
                rgb.dimensions(),
                x.dimensions()
            )));
        }
        Ok((rgb, x))
    }

    pub fn frame(&self, i: usize) -> Result<Frame> {
        let (rgb, x) = self.images(i)?;
        Ok(Frame::from_images(&rgb, &x))
    }
}

/// Sequence directories under `root`: `root` itself when it holds
/// `anno.json`, otherwise its immediate subdirectories that do, sorted.
pub fn find_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    if anno_path(root).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = entry.map_err(|e| Error::io(root, e))?.path();
        if anno_path(&p).is_file() {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Validation(format!("no sequences under {}", root.display())));
    }
    Ok(out)
}
