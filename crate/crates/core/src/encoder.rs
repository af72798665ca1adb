//! One-stream transformer encoder over `[templates; search; temporal]` tokens.
//!
//! Both modalities run through the same layer weights. Each layer records its
//! head-averaged attention map, which drives background suppression before
//! the next layer.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::bsi::{self, FilterSchedule, SuppressionMask};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{Init, Session};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    X,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Rgb, Modality::X];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::X => "x",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::X => 1,
        }
    }
}

/// Region boundaries of a token sequence: two templates, then search, then
/// temporal tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_z: usize,
    pub n_s: usize,
    pub n_t: usize,
    pub grid_z: (usize, usize),
    pub grid_s: (usize, usize),
    pub d_model: usize,
}

impl TokenLayout {
    pub fn new(grid_z: (usize, usize), grid_s: (usize, usize), n_t: usize, d_model: usize) -> Self {
        TokenLayout {
            n_z: 2 * grid_z.0 * grid_z.1,
            n_s: grid_s.0 * grid_s.1,
            n_t,
            grid_z,
            grid_s,
            d_model,
        }
    }

    pub fn len(&self) -> usize {
        self.n_z + self.n_s + self.n_t
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tokens per template.
    pub fn template_len(&self) -> usize {
        self.n_z / 2
    }

    pub fn z_range(&self) -> Range<usize> {
        0..self.n_z
    }

    pub fn s_range(&self) -> Range<usize> {
        self.n_z..self.n_z + self.n_s
    }

    pub fn t_range(&self) -> Range<usize> {
        self.n_z + self.n_s..self.len()
    }

    pub fn with_temporal(self, n_t: usize) -> Self {
        TokenLayout { n_t, ..self }
    }
}

/// One modality's token sequence on the graph.
#[derive(Clone, Copy, Debug)]
pub struct ModalityTokens {
    pub tokens: Var,
    pub layout: TokenLayout,
    pub modality: Modality,
}

/// Head-averaged attention of one layer, one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layout: TokenLayout,
    /// `[l, l]`, rows are queries.
    pub map: Tensor,
}

impl AttentionRecord {
    fn block(&self, rows: Range<usize>, cols: Range<usize>) -> Tensor {
        let l = self.layout.len();
        let (r0, nr, nc) = (rows.start, rows.len(), cols.len());
        let src = self.map.data();
        Tensor::from_fn(&[nr, nc], |i| src[(r0 + i / nc) * l + cols.start + i % nc])
    }

    /// Template rows against search columns, `[n_z, n_s]`.
    pub fn w_z(&self) -> Tensor {
        self.block(self.layout.z_range(), self.layout.s_range())
    }

    /// Temporal rows against search columns, `[n_t, n_s]`.
    pub fn w_t(&self) -> Tensor {
        self.block(self.layout.t_range(), self.layout.s_range())
    }
}

/// Suppression state and attention of one layer for both modalities.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub attn_rgb: AttentionRecord,
    pub attn_x: AttentionRecord,
    pub mask_rgb: SuppressionMask,
    pub mask_x: SuppressionMask,
}

/// Non-overlapping patches of an `[H, W, C]` image, flattened in
/// `(row, col, channel)` order: `[(H/p)·(W/p), p·p·C]`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let &[h, w, ch] = image.shape() else {
        return Err(Error::InvalidShape(format!(
            "patchify expects [H, W, C], got {:?}",
            image.shape()
        )));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape {
            op: "patchify",
            lhs: vec![h, w],
            rhs: vec![patch],
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let width = patch * patch * ch;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * width);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let row = (gy * patch + py) * w + gx * patch;
                out.extend_from_slice(&src[row * ch..(row + patch) * ch]);
            }
        }
    }
    Tensor::new(vec![gh * gw, width], out)
}

/// Linear patch projection plus the positional embedding stored under `pos`.
pub fn patch_embed(sess: &mut Session<'_>, modality: Modality, image: &Tensor, patch: usize, pos: &str) -> Result<Var> {
    if image.shape().get(2) != Some(&modality.channels()) {
        return Err(Error::InvalidShape(format!(
            "{} image must have {} channels, got shape {:?}",
            modality.tag(),
            modality.channels(),
            image.shape()
        )));
    }
    let patches = sess.constant(patchify(image, patch)?);
    let t = sess.linear(&format!("embed.{}", modality.tag()), patches)?;
    let p = sess.p(pos)?;
    sess.g.add(t, p)
}

/// Images feeding one modality's token sequence.
#[derive(Clone, Copy, Debug)]
pub struct ModalityImages<'a> {
    pub template_fixed: &'a Tensor,
    pub template_dynamic: &'a Tensor,
    pub search: &'a Tensor,
}

/// Builds `[Z0; Z1; S; T]` for one modality. `temporal` holds queue tokens
/// oldest first; the newest gets positional age 0.
pub fn embed_tokens(
    sess: &mut Session<'_>,
    cfg: &ModelConfig,
    modality: Modality,
    images: ModalityImages<'_>,
    temporal: Option<&Tensor>,
) -> Result<ModalityTokens> {
    let z0 = patch_embed(sess, modality, images.template_fixed, cfg.patch, "pos.z0")?;
    let z1 = patch_embed(sess, modality, images.template_dynamic, cfg.patch, "pos.z1")?;
    let s = patch_embed(sess, modality, images.search, cfg.patch, "pos.s")?;
    let mut parts = vec![z0, z1, s];
    let n_t = temporal.map_or(0, |t| t.shape()[0]);
    if let Some(t) = temporal.filter(|_| n_t > 0) {
        if n_t > cfg.m || t.shape() != [n_t, cfg.d_model] {
            return Err(Error::InvalidShape(format!(
                "temporal tokens {:?} exceed [{}, {}]",
                t.shape(),
                cfg.m,
                cfg.d_model
            )));
        }
        let d = cfg.d_model;
        let tv = sess.constant(t.clone());
        let pos = sess.p("pos.t")?;
        let index = (0..n_t)
            .flat_map(|i| {
                let age = n_t - 1 - i;
                (0..d).map(move |j| Some(age * d + j))
            })
            .collect();
        let pt = sess.g.gather(pos, index, &[n_t, d])?;
        parts.push(sess.g.add(tv, pt)?);
    }
    let tokens = sess.g.concat_rows(&parts)?;
    let layout = TokenLayout::new(cfg.grid_z(), cfg.grid_s(), n_t, cfg.d_model);
    debug_assert_eq!(sess.g.shape(tokens)[0], layout.len());
    Ok(ModalityTokens {
        tokens,
        layout,
        modality,
    })
}

/// Registers embedding, positional and encoder layer parameters.
pub fn init_encoder<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig) {
    let d = cfg.d_model;
    for m in Modality::BOTH {
        init.linear(
            &format!("embed.{}", m.tag()),
            cfg.patch * cfg.patch * m.channels(),
            d,
            true,
        );
    }
    let (gz, gs) = (cfg.grid_z(), cfg.grid_s());
    init.normal("pos.z0", &[gz.0 * gz.1, d], 0.02);
    init.normal("pos.z1", &[gz.0 * gz.1, d], 0.02);
    init.normal("pos.s", &[gs.0 * gs.1, d], 0.02);
    init.normal("pos.t", &[cfg.m, d], 0.02);
    let hidden = cfg.mlp_hidden();
    for i in 0..cfg.layers {
        let p = format!("enc.{i}");
        init.layer_norm(&format!("{p}.ln1"), d);
        init.linear(&format!("{p}.qkv"), d, 3 * d, true);
        init.linear_std(&format!("{p}.proj"), d, d, true, 0.5 / (d as f64).sqrt());
        init.layer_norm(&format!("{p}.ln2"), d);
        init.linear(&format!("{p}.fc1"), d, hidden, true);
        init.linear_std(&format!("{p}.fc2"), hidden, d, true, 0.5 / (hidden as f64).sqrt());
    }
}

const LN_EPS: f64 = 1e-5;

fn layer_norm(sess: &mut Session<'_>, prefix: &str, x: Var) -> Result<Var> {
    let g = sess.p(&format!("{prefix}.g"))?;
    let b = sess.p(&format!("{prefix}.b"))?;
    sess.g.layer_norm(x, g, b, LN_EPS)
}

/// Pre-norm multi-head self-attention plus MLP, both residual, for one
/// sequence. Returns the new tokens and the head-averaged attention map.
pub fn transformer_layer(sess: &mut Session<'_>, prefix: &str, heads: usize, x: Var) -> Result<(Var, Tensor)> {
    let (l, d) = (sess.g.shape(x)[0], sess.g.shape(x)[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let h = layer_norm(sess, &format!("{prefix}.ln1"), x)?;
    let qkv = sess.linear(&format!("{prefix}.qkv"), h)?;
    let mut outs = Vec::with_capacity(heads);
    let mut avg = vec![0.0; l * l];
    for hi in 0..heads {
        let q = sess.g.slice_cols(qkv, hi * dh, (hi + 1) * dh)?;
        let k = sess.g.slice_cols(qkv, d + hi * dh, d + (hi + 1) * dh)?;
        let v = sess.g.slice_cols(qkv, 2 * d + hi * dh, 2 * d + (hi + 1) * dh)?;
        let kt = sess.g.transpose(k)?;
        let s = sess.g.matmul(q, kt)?;
        let s = sess.g.scale(s, 1.0 / (dh as f64).sqrt());
        let a = sess.g.softmax_rows(s)?;
        for (acc, w) in avg.iter_mut().zip(sess.g.value(a).data()) {
            *acc += w / heads as f64;
        }
        outs.push(sess.g.matmul(a, v)?);
    }
    let o = if heads == 1 {
        outs[0]
    } else {
        sess.g.concat_cols(&outs)?
    };
    let o = sess.linear(&format!("{prefix}.proj"), o)?;
    let x = sess.g.add(x, o)?;
    let h = layer_norm(sess, &format!("{prefix}.ln2"), x)?;
    let h = sess.linear(&format!("{prefix}.fc1"), h)?;
    let h = sess.g.gelu(h);
    let h = sess.linear(&format!("{prefix}.fc2"), h)?;
    let x = sess.g.add(x, h)?;
    Ok((x, Tensor::new(vec![l, l], avg)?))
}

fn check_pair(a: &ModalityTokens, b: &ModalityTokens) -> Result<()> {
    if a.layout != b.layout {
        return Err(Error::Alignment(format!(
            "modalities disagree on layout: {:?} vs {:?}",
            a.layout, b.layout
        )));
    }
    Ok(())
}

/// Layer `index` applied to both modalities with shared weights.
pub fn encoder_layer(
    sess: &mut Session<'_>,
    cfg: &ModelConfig,
    index: usize,
    rgb: &ModalityTokens,
    x: &ModalityTokens,
) -> Result<(ModalityTokens, ModalityTokens, AttentionRecord, AttentionRecord)> {
    check_pair(rgb, x)?;
    let prefix = format!("enc.{index}");
    let (t_rgb, a_rgb) = transformer_layer(sess, &prefix, cfg.heads, rgb.tokens)?;
    let (t_x, a_x) = transformer_layer(sess, &prefix, cfg.heads, x.tokens)?;
    let layout = rgb.layout;
    Ok((
        ModalityTokens { tokens: t_rgb, ..*rgb },
        ModalityTokens { tokens: t_x, ..*x },
        AttentionRecord { layout, map: a_rgb },
        AttentionRecord { layout, map: a_x },
    ))
}

/// Encoder output for both modalities plus per-layer traces.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub rgb: ModalityTokens,
    pub x: ModalityTokens,
    pub layers: Vec<LayerTrace>,
}

/// Runs every layer, each followed by suppression at that layer's ratio and
/// the cross-modal prompt exchange.
pub fn encode(
    sess: &mut Session<'_>,
    cfg: &ModelConfig,
    rgb: ModalityTokens,
    x: ModalityTokens,
    schedule: &FilterSchedule,
) -> Result<Encoded> {
    check_pair(&rgb, &x)?;
    if schedule.lambdas.len() != cfg.layers {
        return Err(Error::Config(format!(
            "schedule has {} ratios for {} layers",
            schedule.lambdas.len(),
            cfg.layers
        )));
    }
    let (mut rgb, mut x) = (rgb, x);
    let mut layers = Vec::with_capacity(cfg.layers);
    for (i, &lambda) in schedule.lambdas.iter().enumerate() {
        let (r, xx, attn_rgb, attn_x) = encoder_layer(sess, cfg, i, &rgb, &x)?;
        let scores_rgb = bsi::similarity_scores_weighted(&attn_rgb, cfg.template_score_weight);
        let scores_x = bsi::similarity_scores_weighted(&attn_x, cfg.template_score_weight);
        let mask_rgb = bsi::select_filter_mask(&scores_rgb, lambda);
        let mask_x = bsi::select_filter_mask(&scores_x, lambda);
        let r = bsi::apply_suppression(&mut sess.g, &r, &mask_rgb)?;
        let xx = bsi::apply_suppression(&mut sess.g, &xx, &mask_x)?;
        (rgb, x) = bsi::cross_modal_prompt(sess, &r, &xx, i)?;
        layers.push(LayerTrace {
            attn_rgb,
            attn_x,
            mask_rgb,
            mask_x,
        });
    }
    Ok(Encoded { rgb, x, layers })
}
