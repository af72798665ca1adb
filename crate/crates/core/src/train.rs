//! Toy trainer: SGD with momentum on short clips of synthetic sequences.
//!
//! Clips are cropped once up front into a fixed pool and cycled in a seeded
//! order. Within a clip the temporal queues carry over from frame to frame as
//! constants, so no gradient crosses a frame boundary.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, TrainConfig};
use crate::encoder::ModalityImages;
use crate::error::{Error, Result};
use crate::head::{total_loss, BBox, LossWeights};
use crate::model::{forward_frame, FrameImages, Model, ModelConfig};
use crate::params::Session;
use crate::synth::SequenceRecord;
use crate::tensor::Tensor;
use crate::tracker::{CropPair, Frame, TrackerConfig, Window};
use crate::tsg::TemporalQueue;

/// One pre-cropped training clip.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub template_fixed: CropPair,
    pub template_dynamic: CropPair,
    /// Search crops with the target box relative to each crop.
    pub searches: Vec<(CropPair, BBox)>,
}

/// Samples `train.clip_pool` clips from `seqs` with jittered search windows.
pub fn build_pool(
    seqs: &[SequenceRecord],
    model: &ModelConfig,
    tracker: &TrackerConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<Vec<ClipSample>> {
    let usable: Vec<&SequenceRecord> = seqs.iter().filter(|s| s.len() > train.clip_len).collect();
    if usable.is_empty() {
        return Err(Error::Validation(format!(
            "training needs a sequence longer than {} frames",
            train.clip_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let template_factor = tracker.search_factor * model.template_size as f64 / model.search_size as f64;
    let mut frames: BTreeMap<(usize, usize), Frame> = BTreeMap::new();
    let mut load = |si: usize, fi: usize| -> Result<Frame> {
        if let Some(f) = frames.get(&(si, fi)) {
            return Ok(f.clone());
        }
        let f = usable[si].frame(fi)?;
        frames.insert((si, fi), f.clone());
        Ok(f)
    };
    let mut pool = Vec::with_capacity(train.clip_pool);
    for _ in 0..train.clip_pool {
        let si = rng.random_range(0..usable.len());
        let seq = usable[si];
        let t0 = rng.random_range(1..=seq.len() - train.clip_len);
        let td = rng.random_range(0..t0);
        let template = |fi: usize, load: &mut dyn FnMut(usize, usize) -> Result<Frame>| -> Result<CropPair> {
            let win = Window::around(&seq.gt(fi), template_factor);
            CropPair::take(&load(si, fi)?, &win, model.template_size)
        };
        let template_fixed = template(0, &mut load)?;
        let template_dynamic = template(td, &mut load)?;
        let mut searches = Vec::with_capacity(train.clip_len);
        for fi in t0..t0 + train.clip_len {
            let gt = seq.gt(fi);
            let mut win = Window::around(&gt, tracker.search_factor);
            let base = (gt.w * gt.h).sqrt();
            win.cx += rng.random_range(-1.0..=1.0) * train.jitter_shift * base;
            win.cy += rng.random_range(-1.0..=1.0) * train.jitter_shift * base;
            win.side *= (rng.random_range(-1.0..=1.0) * train.jitter_scale).exp();
            let crop = CropPair::take(&load(si, fi)?, &win, model.search_size)?;
            searches.push((crop, win.normalize(&gt)));
        }
        pool.push(ClipSample {
            template_fixed,
            template_dynamic,
            searches,
        });
    }
    Ok(pool)
}

/// Mean loss over a clip and the summed per-frame gradients divided by the
/// clip length.
pub fn clip_loss_and_grads(
    model: &Model,
    clip: &ClipSample,
    weights: LossWeights,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let schedule = model.cfg.schedule()?;
    let mut q_rgb = TemporalQueue::new(model.cfg.m);
    let mut q_x = TemporalQueue::new(model.cfg.m);
    let mut total = 0.0;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let n = clip.searches.len() as f64;
    for (search, target) in &clip.searches {
        let images = FrameImages {
            rgb: ModalityImages {
                template_fixed: &clip.template_fixed.rgb,
                template_dynamic: &clip.template_dynamic.rgb,
                search: &search.rgb,
            },
            x: ModalityImages {
                template_fixed: &clip.template_fixed.x,
                template_dynamic: &clip.template_dynamic.x,
                search: &search.x,
            },
        };
        let mut sess = Session::trainable(&model.params);
        let fwd = forward_frame(&mut sess, &model.cfg, &images, &q_rgb, &q_x, &schedule)?;
        let terms = total_loss(&mut sess.g, &fwd.head, target, weights)?;
        let loss = sess.g.value(terms.total).data()[0];
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss became {loss}")));
        }
        total += loss / n;
        sess.g.backward(terms.total)?;
        for (name, g) in sess.grads() {
            match grads.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b / n),
                None => {
                    grads.insert(name, g.map(|v| v / n));
                }
            }
        }
        q_rgb.push(sess.g.value(fwd.t_rgb).clone());
        q_x.push(sess.g.value(fwd.t_x).clone());
    }
    Ok((total, grads))
}

/// Per-step losses plus smoothed endpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub initial_smoothed: f64,
    pub final_smoothed: f64,
}

/// Means of the first and last `window` entries.
pub fn smoothed_endpoints(losses: &[f64], window: usize) -> (f64, f64) {
    if losses.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let w = window.clamp(1, losses.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&losses[..w]), mean(&losses[losses.len() - w..]))
}

/// Runs `train.steps` momentum-SGD steps over the clip pool, calling
/// `on_step(step, loss)` after each.
pub fn train(
    model: &mut Model,
    pool: &[ClipSample],
    train: &TrainConfig,
    weights: LossWeights,
    seed: u64,
    mut on_step: impl FnMut(usize, f64) -> Result<()>,
) -> Result<TrainReport> {
    if pool.is_empty() {
        return Err(Error::Validation("empty clip pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut order: Vec<usize> = Vec::new();
    let mut velocity: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        if order.is_empty() {
            order = (0..pool.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let clip = &pool[order.pop().expect("refilled above")];
        let (loss, mut grads) = clip_loss_and_grads(model, clip, weights)?;
        if let Some(cap) = train.grad_clip {
            let norm = grads
                .values()
                .flat_map(|g| g.data().iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > cap {
                let s = cap / norm;
                grads
                    .values_mut()
                    .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
            }
        }
        for (name, g) in &grads {
            let v = velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = model.params.get_mut(name)?;
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = train.momentum * *vv + gv;
                *pv -= train.lr * *vv;
            }
        }
        losses.push(loss);
        on_step(step, loss)?;
    }
    let (initial_smoothed, final_smoothed) = smoothed_endpoints(&losses, train.smooth_window);
    Ok(TrainReport {
        losses,
        initial_smoothed,
        final_smoothed,
    })
}

/// Loads every sequence under `data`, trains a freshly initialized model and
/// writes the weights plus a `step,loss` CSV.
pub fn run_training(cfg: &RunConfig, data: &Path, weights_out: &Path, log: &Path) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let seqs = crate::synth::find_sequences(data)?
        .iter()
        .map(|d| SequenceRecord::load(d))
        .collect::<Result<Vec<_>>>()?;
    let pool = build_pool(&seqs, &cfg.model, &cfg.tracker, &cfg.train, cfg.seed)?;
    let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
    let mut csv = fs::File::create(log).map_err(|e| Error::io(log, e))?;
    writeln!(csv, "step,loss").map_err(|e| Error::io(log, e))?;
    let report = train(&mut model, &pool, &cfg.train, cfg.loss, cfg.seed, |step, loss| {
        writeln!(csv, "{step},{loss:.9}").map_err(|e| Error::io(log, e))
    })?;
    model.params.save(weights_out)?;
    Ok((model, report))
}
