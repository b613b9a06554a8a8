//! Visual mapping network: compresses `T` projected frame features into a
//! fixed number of video tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{cross_attention, self_attention_block, AttentionLayer, LayerNorm};
use crate::params::{Ctx, Group, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapperKind {
    /// Latent cross-attention stack seeded by learnable visual prompts.
    Vpn,
    /// One video token per frame: the projected features themselves.
    Linear,
}

#[derive(Clone, Debug)]
pub struct MapperBlock {
    pub cross: AttentionLayer,
    pub cross_norm: LayerNorm,
    pub slf: AttentionLayer,
    pub self_norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct VisualMapper {
    pub kind: MapperKind,
    pub dim: usize,
    /// `[D, M]` latent initialization; `None` for the linear mapper.
    pub prompts: Option<ParamId>,
    /// `[D, T_max]`.
    pub temporal: ParamId,
    pub blocks: Vec<MapperBlock>,
}

/// Video tokens plus which of them may be attended.
pub struct VideoTokens {
    pub tokens: Var,
    pub valid: Vec<bool>,
}

#[derive(Clone, Copy, Debug)]
pub struct MapperShape {
    pub kind: MapperKind,
    pub dim: usize,
    pub latents: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_frames: usize,
}

impl VisualMapper {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, shape: MapperShape, rng: &mut R) -> Result<Self> {
        let d = shape.dim;
        if shape.max_frames == 0 {
            return Err(Error::Config("mapper needs at least one frame slot".into()));
        }
        let temporal = store.add("mapper.temporal", Group::Rest, Tensor::randn(&[d, shape.max_frames], 0.02, rng));
        let (prompts, blocks) = match shape.kind {
            MapperKind::Linear => (None, Vec::new()),
            MapperKind::Vpn => {
                if shape.latents == 0 {
                    return Err(Error::Config("the latent mapper needs at least one visual prompt".into()));
                }
                let prompts = store.add("mapper.prompts", Group::Prompt, Tensor::randn(&[d, shape.latents], 0.02, rng));
                let mut blocks = Vec::with_capacity(shape.layers);
                for l in 0..shape.layers {
                    let p = format!("mapper.{l}");
                    blocks.push(MapperBlock {
                        cross: AttentionLayer::new(store, &format!("{p}.cross"), d, shape.heads, Group::Rest, rng)?,
                        cross_norm: LayerNorm::new(store, &format!("{p}.cross_norm"), d, Group::Rest, 1e-5),
                        slf: AttentionLayer::new(store, &format!("{p}.self"), d, shape.heads, Group::Rest, rng)?,
                        self_norm: LayerNorm::new(store, &format!("{p}.self_norm"), d, Group::Rest, 1e-5),
                    });
                }
                (Some(prompts), blocks)
            }
        };
        Ok(VisualMapper {
            kind: shape.kind,
            dim: d,
            prompts,
            temporal,
            blocks,
        })
    }

    /// Trainable entries outside the prompt group: blocks plus temporal embeddings.
    pub fn rest_param_count(shape: &MapperShape) -> usize {
        let blocks = match shape.kind {
            MapperKind::Vpn => shape.layers * Self::block_param_count(shape.dim),
            MapperKind::Linear => 0,
        };
        blocks + shape.dim * shape.max_frames
    }

    /// One cross-attention and one self-attention sublayer, each with its norm.
    pub fn block_param_count(dim: usize) -> usize {
        2 * (AttentionLayer::param_count(dim) + LayerNorm::param_count(dim))
    }

    pub fn prompt_param_count(shape: &MapperShape) -> usize {
        match shape.kind {
            MapperKind::Vpn => shape.dim * shape.latents,
            MapperKind::Linear => 0,
        }
    }

    /// Runs the mapper on `y: [D, T]` whose padded frames are marked invalid.
    pub fn map_video(&self, cx: &mut Ctx, y: Var, frame_valid: &[bool], dropout: f64) -> Result<VideoTokens> {
        let shape = cx.tape.shape(y).to_vec();
        if shape.len() != 2 || shape[0] != self.dim || shape[1] != frame_valid.len() {
            return Err(Error::shape("map_video", &shape, &[self.dim, frame_valid.len()]));
        }
        if !frame_valid.iter().any(|&v| v) {
            return Err(Error::Input("empty video: every frame is padding".into()));
        }
        let y = add_temporal_embeddings(cx, self.temporal, y)?;
        match (self.kind, self.prompts) {
            (MapperKind::Vpn, Some(prompts)) => {
                let mut z = cx.param(prompts)?;
                for block in &self.blocks {
                    z = cross_attention(cx, &block.cross, &block.cross_norm, z, y, Some(frame_valid), dropout)?;
                    z = self_attention_block(cx, &block.slf, &block.self_norm, z, dropout)?;
                }
                let m = cx.tape.shape(z)[1];
                Ok(VideoTokens { tokens: z, valid: vec![true; m] })
            }
            _ => {
                let tokens = cx.dropout(y, dropout)?;
                Ok(VideoTokens { tokens, valid: frame_valid.to_vec() })
            }
        }
    }
}

/// Adds the first `T` columns of `embeddings: [D, T_max]` to `y: [D, T]`.
pub fn add_temporal_embeddings(cx: &mut Ctx, embeddings: ParamId, y: Var) -> Result<Var> {
    let e = cx.param(embeddings)?;
    let t = cx.tape.shape(y)[1];
    let t_max = cx.tape.shape(e)[1];
    if t > t_max {
        return Err(Error::Config(format!("{t} frames exceed the {t_max} temporal embedding slots")));
    }
    let e = if t == t_max { e } else { cx.tape.slice(e, 1, 0, t)? };
    cx.tape.add(y, e)
}
