//! Joint bidirectional scan over both modalities' `[Z; S]` tokens, then
//! channel concatenation and a linear projection back to the model width.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{Init, Session};
use crate::ssm::{self, MambaDims};

/// Fused `[Z; S]` tokens at model width.
#[derive(Clone, Copy, Debug)]
pub struct FusedFeature {
    /// `[n_z + n_s, d_model]`
    pub tokens: Var,
    pub n_z: usize,
    pub search_grid: (usize, usize),
}

impl FusedFeature {
    /// Search rows only, `[n_s, d_model]`.
    pub fn search_tokens(&self, sess: &mut Session<'_>) -> Result<Var> {
        let n = sess.g.shape(self.tokens)[0];
        sess.g.slice_rows(self.tokens, self.n_z, n)
    }
}

/// `[rgb; x]` through the fusion mamba block, split, concatenated along
/// channels and projected by `fusion.proj`.
pub fn mamba_fuse(
    sess: &mut Session<'_>,
    rgb: Var,
    x: Var,
    n_z: usize,
    search_grid: (usize, usize),
) -> Result<FusedFeature> {
    if sess.g.shape(rgb) != sess.g.shape(x) {
        return Err(Error::Alignment(format!(
            "fusion inputs differ: {:?} vs {:?}",
            sess.g.shape(rgb),
            sess.g.shape(x)
        )));
    }
    let n = sess.g.shape(rgb)[0];
    if n != n_z + search_grid.0 * search_grid.1 {
        return Err(Error::InvalidShape(format!(
            "fusion input has {n} tokens, expected {n_z} + {}x{}",
            search_grid.0, search_grid.1
        )));
    }
    let joint = sess.g.concat_rows(&[rgb, x])?;
    let y = ssm::mamba_block(sess, "fusion", joint)?;
    let y_rgb = sess.g.slice_rows(y, 0, n)?;
    let y_x = sess.g.slice_rows(y, n, 2 * n)?;
    let cat = sess.g.concat_cols(&[y_rgb, y_x])?;
    let tokens = sess.linear("fusion.proj", cat)?;
    Ok(FusedFeature {
        tokens,
        n_z,
        search_grid,
    })
}

pub fn init_fusion<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig) {
    let dims = MambaDims {
        d_model: cfg.d_model,
        d_inner: cfg.d_inner,
        state: cfg.state,
        conv_kernel: cfg.conv_kernel,
    };
    ssm::init_mamba(init, "fusion", dims);
    init.linear("fusion.proj", 2 * cfg.d_model, cfg.d_model, true);
}
