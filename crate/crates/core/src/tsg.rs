//! Temporal token generation: append an empty slot to `[Z; S; T_pre]`, run the
//! cross-modal bidirectional scan, and read the slot back out as the frame's
//! temporal token.

use std::collections::VecDeque;

use rand::Rng;

use crate::autograd::Var;
use crate::encoder::{Modality, ModalityTokens};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{Init, Session};
use crate::ssm::{self, MambaDims};
use crate::tensor::Tensor;

/// Sliding window of the `m` most recent temporal tokens, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalQueue {
    tokens: VecDeque<Tensor>,
    m: usize,
    /// Number of pushes so far.
    pub t: usize,
}

impl TemporalQueue {
    pub fn new(m: usize) -> Self {
        TemporalQueue {
            tokens: VecDeque::with_capacity(m + 1),
            m,
            t: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tokens.iter()
    }

    /// Appends `token`, dropping the oldest beyond capacity.
    pub fn push(&mut self, token: Tensor) {
        self.tokens.push_back(token);
        while self.tokens.len() > self.m {
            self.tokens.pop_front();
        }
        self.t += 1;
    }

    pub fn clear(&mut self) {
        self.tokens.clear();
    }

    /// Queue contents stacked as `[len, d]`, or `None` when empty.
    pub fn stacked(&self) -> Option<Tensor> {
        let first = self.tokens.front()?;
        let d = first.numel();
        let data = self.tokens.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(vec![self.tokens.len(), d], data).ok()
    }
}

/// Functional form of [`TemporalQueue::push`].
pub fn queue_push(mut queue: TemporalQueue, t_cur: Tensor) -> TemporalQueue {
    queue.push(t_cur);
    queue
}

/// Name of a modality's learned empty-token embedding.
pub fn empty_token_name(modality: Modality) -> String {
    format!("tsg.empty.{}", modality.tag())
}

fn block_prefix(modality: Modality) -> String {
    format!("tsg.{}", modality.tag())
}

/// `[Z; S; T_pre; empty]`, where `Z; S` come from the encoder output and
/// `T_pre` is the raw queue contents.
pub fn build_tsg_input(sess: &mut Session<'_>, encoded: &ModalityTokens, queue: &TemporalQueue) -> Result<Var> {
    let layout = encoded.layout;
    let zs = sess.g.slice_rows(encoded.tokens, 0, layout.n_z + layout.n_s)?;
    let mut parts = vec![zs];
    if let Some(t) = queue.stacked() {
        parts.push(sess.constant(t));
    }
    let empty = sess.p(&empty_token_name(encoded.modality))?;
    parts.push(sess.g.reshape(empty, &[1, layout.d_model])?);
    sess.g.concat_rows(&parts)
}

/// Cross-modal bidirectional mamba over both inputs; returns the output at
/// the final (empty-slot) position of each.
pub fn tsg_step(sess: &mut Session<'_>, in_rgb: Var, in_x: Var) -> Result<(Var, Var)> {
    if sess.g.shape(in_rgb) != sess.g.shape(in_x) {
        return Err(Error::Alignment(format!(
            "temporal generator inputs differ: {:?} vs {:?}",
            sess.g.shape(in_rgb),
            sess.g.shape(in_x)
        )));
    }
    let (y_rgb, y_x) = ssm::cross_mamba_block(
        sess,
        &block_prefix(Modality::Rgb),
        &block_prefix(Modality::X),
        in_rgb,
        in_x,
    )?;
    let last = sess.g.shape(y_rgb)[0] - 1;
    Ok((sess.g.row(y_rgb, last)?, sess.g.row(y_x, last)?))
}

pub fn init_tsg<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig) {
    let dims = MambaDims {
        d_model: cfg.d_model,
        d_inner: cfg.d_inner,
        state: cfg.state,
        conv_kernel: cfg.conv_kernel,
    };
    for m in Modality::BOTH {
        ssm::init_mamba(init, &block_prefix(m), dims);
        init.constant(&empty_token_name(m), &[cfg.d_model], 0.0);
    }
}
