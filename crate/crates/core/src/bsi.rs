//! Background suppression: score search tokens by how strongly the template
//! centre and the temporal tokens attend to them, zero the lowest fraction,
//! then exchange cross-modal prompts.

use rand::Rng;

use crate::autograd::Graph;
use crate::encoder::{AttentionRecord, ModalityTokens, TokenLayout};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{Init, Session};
use crate::tensor::Tensor;

/// Per-layer suppression ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterSchedule {
    pub lambdas: Vec<f64>,
}

impl FilterSchedule {
    /// Three equal stages over `layers`.
    pub fn staged(stages: [f64; 3], layers: usize) -> Result<Self> {
        let lambdas = (0..layers)
            .map(|i| schedule_lambda(i, stages, layers))
            .collect::<Result<Vec<_>>>()?;
        let s = FilterSchedule { lambdas };
        s.validate()?;
        Ok(s)
    }

    pub fn disabled(layers: usize) -> Self {
        FilterSchedule {
            lambdas: vec![0.0; layers],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambdas.iter().find(|l| !(0.0..1.0).contains(*l)) {
            return Err(Error::Config(format!("suppression ratio {l} outside [0, 1)")));
        }
        if self.lambdas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("suppression ratios must be nondecreasing".into()));
        }
        Ok(())
    }
}

/// Ratio for `layer_index` when `layer_count` layers are split into three
/// equal stages.
pub fn schedule_lambda(layer_index: usize, stages: [f64; 3], layer_count: usize) -> Result<f64> {
    if layer_count == 0 || !layer_count.is_multiple_of(3) {
        return Err(Error::Config(format!(
            "layer count {layer_count} is not a positive multiple of 3"
        )));
    }
    if layer_index >= layer_count {
        return Err(Error::Config(format!(
            "layer {layer_index} out of range for {layer_count} layers"
        )));
    }
    Ok(stages[layer_index / (layer_count / 3)])
}

/// Which search tokens are zeroed, and the scores that chose them.
#[derive(Clone, Debug, PartialEq)]
pub struct SuppressionMask {
    pub suppressed: Vec<bool>,
    pub scores: Vec<f64>,
}

impl SuppressionMask {
    pub fn count(&self) -> usize {
        self.suppressed.iter().filter(|&&s| s).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.suppressed.iter().any(|&s| s)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.suppressed.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i)
    }
}

/// Flat indices of the 3×3 centre of an `(h, w)` grid, clipped to the grid.
pub fn center_cells(grid: (usize, usize)) -> Vec<usize> {
    let span = |n: usize| {
        let c = n.saturating_sub(1) / 2;
        c.saturating_sub(1)..(c + 2).min(n)
    };
    let (h, w) = grid;
    span(h).flat_map(|r| span(w).map(move |c| r * w + c)).collect()
}

/// Template rows used for scoring: the centre cells of both templates.
pub fn center_rows(layout: &TokenLayout) -> Vec<usize> {
    let per = layout.template_len();
    let cells = center_cells(layout.grid_z);
    cells.iter().copied().chain(cells.iter().map(|c| c + per)).collect()
}

fn column_means(m: &Tensor, rows: &[usize]) -> Vec<f64> {
    let n = m.shape()[1];
    let mut out = vec![0.0; n];
    for &r in rows {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= rows.len() as f64);
    out
}

/// Equal-weight search token scores.
pub fn similarity_scores(attn: &AttentionRecord) -> Vec<f64> {
    similarity_scores_weighted(attn, 0.5)
}

/// `w·mean_centre(W_Z) + (1−w)·mean(W_T)` per search token; the template term
/// stands alone when there are no temporal tokens.
pub fn similarity_scores_weighted(attn: &AttentionRecord, template_weight: f64) -> Vec<f64> {
    let layout = &attn.layout;
    let z = column_means(&attn.w_z(), &center_rows(layout));
    if layout.n_t == 0 {
        return z;
    }
    let rows: Vec<usize> = (0..layout.n_t).collect();
    let t = column_means(&attn.w_t(), &rows);
    z.iter()
        .zip(&t)
        .map(|(z, t)| template_weight * z + (1.0 - template_weight) * t)
        .collect()
}

/// Marks the `floor(λ·n)` lowest scores, ties broken by lower index first.
pub fn select_filter_mask(scores: &[f64], lambda: f64) -> SuppressionMask {
    let n = scores.len();
    // the epsilon keeps products such as 0.57·100 from flooring one short
    let k = ((lambda.max(0.0) * n as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut suppressed = vec![false; n];
    for &i in order.iter().take(k.min(n)) {
        suppressed[i] = true;
    }
    SuppressionMask {
        suppressed,
        scores: scores.to_vec(),
    }
}

/// Zeroes the masked search rows; positions and other regions are untouched.
pub fn apply_suppression(g: &mut Graph, tokens: &ModalityTokens, mask: &SuppressionMask) -> Result<ModalityTokens> {
    let layout = tokens.layout;
    if mask.suppressed.len() != layout.n_s {
        return Err(Error::Alignment(format!(
            "mask covers {} tokens, search region has {}",
            mask.suppressed.len(),
            layout.n_s
        )));
    }
    if mask.is_empty() {
        return Ok(*tokens);
    }
    let d = g.shape(tokens.tokens)[1];
    let mut keep = Tensor::full(&[layout.len(), d], 1.0);
    for i in mask.indices() {
        let r = layout.n_z + i;
        keep.data_mut()[r * d..(r + 1) * d].fill(0.0);
    }
    let k = g.constant(keep);
    Ok(ModalityTokens {
        tokens: g.mul(tokens.tokens, k)?,
        ..*tokens
    })
}

/// `x_RGB = f_RGB + F_RGB([f_RGB; f_X])` and `x_X = f_X + F_X([f_X; f_RGB])`
/// with per-layer projections `bsi.{i}.rgb` and `bsi.{i}.x`.
pub fn cross_modal_prompt(
    sess: &mut Session<'_>,
    f_rgb: &ModalityTokens,
    f_x: &ModalityTokens,
    layer_index: usize,
) -> Result<(ModalityTokens, ModalityTokens)> {
    if f_rgb.layout != f_x.layout {
        return Err(Error::Alignment(format!(
            "prompt inputs disagree on layout: {:?} vs {:?}",
            f_rgb.layout, f_x.layout
        )));
    }
    let cat_rgb = sess.g.concat_cols(&[f_rgb.tokens, f_x.tokens])?;
    let cat_x = sess.g.concat_cols(&[f_x.tokens, f_rgb.tokens])?;
    let p_rgb = sess.linear(&format!("bsi.{layer_index}.rgb"), cat_rgb)?;
    let p_x = sess.linear(&format!("bsi.{layer_index}.x"), cat_x)?;
    Ok((
        ModalityTokens {
            tokens: sess.g.add(f_rgb.tokens, p_rgb)?,
            ..*f_rgb
        },
        ModalityTokens {
            tokens: sess.g.add(f_x.tokens, p_x)?,
            ..*f_x
        },
    ))
}

pub fn init_bsi<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig) {
    let d = cfg.d_model;
    let std = 0.1 / ((2 * d) as f64).sqrt();
    for i in 0..cfg.layers {
        init.linear_std(&format!("bsi.{i}.rgb"), 2 * d, d, true, std);
        init.linear_std(&format!("bsi.{i}.x"), 2 * d, d, true, std);
    }
}
