//! Model configuration, parameter initialization, and the per-frame forward
//! pass: embed, encode with suppression, generate temporal tokens, fuse,
//! predict.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::bsi::{self, FilterSchedule};
use crate::encoder::{self, Encoded, Modality, ModalityImages};
use crate::error::{Error, Result};
use crate::fusion;
use crate::head::{self, HeadVars};
use crate::params::{Init, ParamStore, Session};
use crate::tsg::{self, TemporalQueue};

/// Network shape. The default is the toy configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub layers: usize,
    pub patch: usize,
    pub template_size: usize,
    pub search_size: usize,
    /// Temporal queue capacity.
    pub m: usize,
    pub d_inner: usize,
    /// SSM state size N.
    pub state: usize,
    pub conv_kernel: usize,
    /// Suppression ratio of each third of the encoder.
    pub lambda_stages: [f64; 3],
    /// Output channels of each head conv stage.
    pub head_channels: Vec<usize>,
    /// Weight of the template term in suppression scores.
    pub template_score_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            mlp_ratio: 4,
            layers: 12,
            patch: 8,
            template_size: 32,
            search_size: 64,
            m: 4,
            d_inner: 128,
            state: 8,
            conv_kernel: 4,
            lambda_stages: [0.0, 0.15, 0.30],
            head_channels: vec![32, 16, 8, 8],
            template_score_weight: 0.5,
        }
    }

    /// Full-size shape: 128/256 crops, patch 16, ViT-Base width.
    pub fn full_scale() -> Self {
        ModelConfig {
            d_model: 768,
            heads: 12,
            mlp_ratio: 4,
            layers: 12,
            patch: 16,
            template_size: 128,
            search_size: 256,
            m: 4,
            d_inner: 1536,
            state: 16,
            conv_kernel: 4,
            lambda_stages: [0.0, 0.15, 0.30],
            head_channels: vec![256, 128, 64, 32],
            template_score_weight: 0.5,
        }
    }

    pub fn grid_z(&self) -> (usize, usize) {
        let g = self.template_size / self.patch;
        (g, g)
    }

    pub fn grid_s(&self) -> (usize, usize) {
        let g = self.search_size / self.patch;
        (g, g)
    }

    pub fn n_z(&self) -> usize {
        let (h, w) = self.grid_z();
        2 * h * w
    }

    pub fn n_s(&self) -> usize {
        let (h, w) = self.grid_s();
        h * w
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn schedule(&self) -> Result<FilterSchedule> {
        FilterSchedule::staged(self.lambda_stages, self.layers)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("patch", self.patch),
            ("d_inner", self.d_inner),
            ("state", self.state),
            ("conv_kernel", self.conv_kernel),
            ("m", self.m),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return err(format!("{name} must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return err(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        for (name, size) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if size == 0 || size % self.patch != 0 {
                return err(format!("{name} {size} not a positive multiple of patch {}", self.patch));
            }
        }
        if self.head_channels.is_empty() || self.head_channels.contains(&0) {
            return err("head_channels must be nonempty and positive".into());
        }
        if !(0.0..=1.0).contains(&self.template_score_weight) {
            return err(format!(
                "template_score_weight {} outside [0, 1]",
                self.template_score_weight
            ));
        }
        self.schedule().map(|_| ())
    }
}

/// Configuration plus weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh weights from a seeded generator.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        encoder::init_encoder(&mut init, &cfg);
        bsi::init_bsi(&mut init, &cfg);
        tsg::init_tsg(&mut init, &cfg);
        fusion::init_fusion(&mut init, &cfg);
        head::init_head(&mut init, &cfg);
        Ok(Model { cfg, params })
    }

    /// Wraps loaded weights, checking every expected parameter is present
    /// with the expected shape.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Model::init(cfg.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Weights(format!(
                    "{name} has shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Weights(format!(
                "weights hold {} tensors, config expects {}",
                params.len(),
                reference.params.len()
            )));
        }
        Ok(Model { cfg, params })
    }
}

/// Template and search crops for both modalities.
#[derive(Clone, Copy, Debug)]
pub struct FrameImages<'a> {
    pub rgb: ModalityImages<'a>,
    pub x: ModalityImages<'a>,
}

/// Everything one frame's forward pass leaves on the graph.
#[derive(Clone, Debug)]
pub struct FrameForward {
    pub head: HeadVars,
    /// New temporal tokens, `[d_model]` each.
    pub t_rgb: Var,
    pub t_x: Var,
    pub encoded: Encoded,
}

/// One frame through the whole network. Queue contents enter as constants.
pub fn forward_frame(
    sess: &mut Session<'_>,
    cfg: &ModelConfig,
    images: &FrameImages<'_>,
    queue_rgb: &TemporalQueue,
    queue_x: &TemporalQueue,
    schedule: &FilterSchedule,
) -> Result<FrameForward> {
    let t_rgb = queue_rgb.stacked();
    let t_x = queue_x.stacked();
    let rgb = encoder::embed_tokens(sess, cfg, Modality::Rgb, images.rgb, t_rgb.as_ref())?;
    let x = encoder::embed_tokens(sess, cfg, Modality::X, images.x, t_x.as_ref())?;
    let encoded = encoder::encode(sess, cfg, rgb, x, schedule)?;
    let in_rgb = tsg::build_tsg_input(sess, &encoded.rgb, queue_rgb)?;
    let in_x = tsg::build_tsg_input(sess, &encoded.x, queue_x)?;
    let (t_rgb, t_x) = tsg::tsg_step(sess, in_rgb, in_x)?;
    let layout = encoded.rgb.layout;
    let zs = layout.n_z + layout.n_s;
    let zs_rgb = sess.g.slice_rows(encoded.rgb.tokens, 0, zs)?;
    let zs_x = sess.g.slice_rows(encoded.x.tokens, 0, zs)?;
    let fused = fusion::mamba_fuse(sess, zs_rgb, zs_x, layout.n_z, layout.grid_s)?;
    let head = head::head_forward(sess, &fused, cfg.head_channels.len())?;
    Ok(FrameForward {
        head,
        t_rgb,
        t_x,
        encoded,
    })
}
