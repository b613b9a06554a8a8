//! Full model assembly: projector, visual mapper, prompt bank and frozen LM.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{FrozenLm, LmInputs, LmOutput, LmShape};
use crate::mapper::{MapperKind, MapperShape, VisualMapper};
use crate::params::{Ctx, Group, ParamStore};
use crate::prompts::{prompt_param_count, PromptMode, TextPromptSet};
use crate::tensor::{Tensor, Var};
use crate::video::FrameProjector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Maximum number of positions (video plus text).
    pub max_len: usize,
    pub tied_head: bool,
    pub adapters: bool,
    pub adapter_dim: usize,
    pub text_prompts: usize,
    pub reparam: bool,
    pub prompt_dim: usize,
    pub mapper: MapperKind,
    pub mapper_layers: usize,
    pub mapper_heads: usize,
    pub visual_prompts: usize,
    pub frame_dim: usize,
    pub frames: usize,
    pub projector_trainable: bool,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: 512,
            dim: 64,
            layers: 4,
            heads: 4,
            ffn_dim: 256,
            max_len: 128,
            tied_head: true,
            adapters: true,
            adapter_dim: 8,
            text_prompts: 10,
            reparam: true,
            prompt_dim: 16,
            mapper: MapperKind::Vpn,
            mapper_layers: 2,
            mapper_heads: 8,
            visual_prompts: 10,
            frame_dim: 768,
            frames: 10,
            projector_trainable: true,
            dropout: 0.1,
        }
    }

    /// Full-size constants; used for parameter accounting and shape checks only.
    pub fn full() -> Self {
        ModelConfig {
            vocab_size: 128_000,
            dim: 1536,
            layers: 24,
            heads: 24,
            ffn_dim: 6144,
            max_len: 512,
            adapter_dim: 192,
            prompt_dim: 192,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks: [(bool, &str); 8] = [
            (self.heads > 0 && self.dim.is_multiple_of(self.heads), "heads must divide dim"),
            (self.mapper_heads > 0 && self.dim.is_multiple_of(self.mapper_heads), "mapper_heads must divide dim"),
            (self.layers > 0, "layers must be positive"),
            (!self.adapters || self.adapter_dim > 0, "adapter_dim must be positive"),
            (self.mapper == MapperKind::Linear || self.visual_prompts > 0, "visual_prompts must be positive"),
            (self.frames > 0 && self.frame_dim > 0, "frames and frame_dim must be positive"),
            ((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)"),
            (!self.reparam || self.text_prompts == 0 || self.prompt_dim > 0, "prompt_dim must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None if self.video_len() >= self.max_len => Err(Error::Config(format!(
                "{} video tokens leave no room for text within max_len {}",
                self.video_len(),
                self.max_len
            ))),
            None => Ok(()),
        }
    }

    /// Number of video tokens prepended to the text.
    pub fn video_len(&self) -> usize {
        match self.mapper {
            MapperKind::Vpn => self.visual_prompts,
            MapperKind::Linear => self.frames,
        }
    }

    /// Room left for text tokens.
    pub fn max_text_len(&self) -> usize {
        self.max_len.saturating_sub(self.video_len())
    }

    pub fn lm_shape(&self) -> LmShape {
        LmShape {
            vocab: self.vocab_size,
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn_dim,
            max_len: self.max_len,
            adapter_dim: self.adapters.then_some(self.adapter_dim),
            tied_head: self.tied_head,
        }
    }

    pub fn mapper_shape(&self) -> MapperShape {
        MapperShape {
            kind: self.mapper,
            dim: self.dim,
            latents: self.visual_prompts,
            layers: self.mapper_layers,
            heads: self.mapper_heads,
            max_frames: self.frames,
        }
    }
}

/// Closed-form parameter accounting; prompts are counted in folded form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub frozen: usize,
    pub prompts: usize,
    pub adapters: usize,
    /// Mapper blocks plus temporal embeddings.
    pub mapper: usize,
    pub projector: usize,
    pub trainable: usize,
}

impl ParamCounts {
    pub fn of(config: &ModelConfig) -> Self {
        let ms = config.mapper_shape();
        let visual = VisualMapper::prompt_param_count(&ms);
        let text = prompt_param_count(config.layers, config.dim, config.text_prompts, 0);
        let prompts = text + visual;
        let adapters = FrozenLm::adapter_param_count(&config.lm_shape());
        let mapper = VisualMapper::rest_param_count(&ms);
        let proj = config.frame_dim * config.dim;
        let (projector, frozen_proj) = if config.projector_trainable { (proj, 0) } else { (0, proj) };
        ParamCounts {
            frozen: FrozenLm::frozen_param_count(&config.lm_shape()) + frozen_proj,
            prompts,
            adapters,
            mapper,
            projector,
            trainable: prompts + adapters + mapper + projector,
        }
    }

    pub fn prompt_fraction(&self) -> f64 {
        self.prompts as f64 / self.trainable as f64
    }
}

/// Model inputs for one item.
#[derive(Clone, Debug)]
pub struct ItemInput {
    /// `[F, T]` sampled frame features and their validity.
    pub video: Option<(Tensor, Vec<bool>)>,
    /// Token ids with `[MASK]` already in place.
    pub ids: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub lm: FrozenLm,
    pub mapper: VisualMapper,
    pub projector: FrameProjector,
    pub prompts: TextPromptSet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lm = FrozenLm::new(&mut store, config.lm_shape(), &mut rng)?;
        let projector = FrameProjector::new(&mut store, config.frame_dim, config.dim, config.projector_trainable, &mut rng);
        let mapper = VisualMapper::new(&mut store, config.mapper_shape(), &mut rng)?;
        let prompts = TextPromptSet::new(
            &mut store,
            config.layers,
            config.dim,
            config.text_prompts,
            config.reparam.then_some(config.prompt_dim),
            &mut rng,
        )?;
        Ok(Model { config, store, lm, mapper, projector, prompts })
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts::of(&self.config)
    }

    /// Folds reparametrized prompts in place; a no-op for other modes.
    pub fn fold_prompts(&mut self) -> Result<()> {
        if self.prompts.mode() == PromptMode::Reparam {
            self.prompts.fold(&mut self.store)?;
        }
        Ok(())
    }

    /// Applies `reparam`/`prompt_dim` to a model whose prompts are a plain
    /// table, as after loading a checkpoint. The table is reproduced exactly.
    pub fn set_reparam(&mut self, reparam: bool, prompt_dim: usize, seed: u64) -> Result<()> {
        match (reparam, self.prompts.mode()) {
            (true, PromptMode::Direct | PromptMode::Folded) => {
                self.prompts.reparametrize(&mut self.store, prompt_dim, &mut ChaCha8Rng::seed_from_u64(seed))?
            }
            (false, PromptMode::Reparam) => self.prompts.fold(&mut self.store)?,
            _ => {}
        }
        self.config.reparam = reparam;
        self.config.prompt_dim = prompt_dim;
        Ok(())
    }

    pub fn use_adapters(&self) -> bool {
        self.config.adapters
    }

    /// Video tokens for `[F, T]` features.
    pub fn video_tokens(&self, cx: &mut Ctx, frames: &Tensor, valid: &[bool], dropout: f64) -> Result<(Var, Vec<bool>)> {
        let y = cx.tape.constant(frames.clone());
        let y = self.projector.project(cx, y)?;
        let tokens = self.mapper.map_video(cx, y, valid, dropout)?;
        Ok((tokens.tokens, tokens.valid))
    }

    /// Encodes one item; `prompts` comes from [`TextPromptSet::materialize`]
    /// so that a batch shares a single prompt computation.
    pub fn encode(&self, cx: &mut Ctx, item: &ItemInput, prompts: &[crate::nn::PromptPair], dropout: f64) -> Result<LmOutput> {
        let video = match &item.video {
            Some((frames, valid)) => Some(self.video_tokens(cx, frames, valid, dropout)?),
            None => None,
        };
        let text = self.lm.embed_text(cx, &item.ids, &[])?;
        let inputs = LmInputs {
            video: video.as_ref().map(|(v, valid)| (*v, valid.as_slice())),
            prompts,
            use_adapters: self.use_adapters(),
            dropout,
            flip_adapter_grad: false,
        };
        self.lm.forward(cx, text, inputs)
    }

    /// Logits `[R, P]` at the listed text positions.
    pub fn text_logits(&self, cx: &mut Ctx, out: &LmOutput, text_positions: &[usize], rows: Option<&[usize]>) -> Result<Var> {
        let positions: Vec<usize> = text_positions.iter().map(|p| p + out.video_len).collect();
        self.lm.logits(cx, out.hidden, &positions, rows)
    }

    /// Mean cross-entropy over every labeled position of the batch. Labels
    /// index the head rows `rows` (or the full vocabulary).
    pub fn batch_loss(
        &self,
        cx: &mut Ctx,
        batch: &[(ItemInput, Vec<(usize, usize)>)],
        rows: Option<&[usize]>,
        dropout: f64,
    ) -> Result<Var> {
        let prompts = self.prompts.materialize(cx, dropout)?;
        let mut columns = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for (item, labels) in batch {
            if labels.is_empty() {
                return Err(Error::Input("item without masked positions".into()));
            }
            let out = self.encode(cx, item, &prompts, dropout)?;
            let positions: Vec<usize> = labels.iter().map(|(p, _)| *p).collect();
            columns.push(self.text_logits(cx, &out, &positions, rows)?);
            targets.extend(labels.iter().map(|(_, l)| *l));
        }
        let logits = if columns.len() == 1 { columns[0] } else { cx.tape.concat(&columns, 1)? };
        let logits = cx.tape.transpose(logits)?;
        cx.tape.cross_entropy(logits, &targets)
    }

    /// Restricted logits at a single text position, evaluated without a gradient.
    pub fn predict_logits(&self, item: &ItemInput, position: usize, rows: Option<&[usize]>) -> Result<Vec<f64>> {
        let mut tape = crate::tensor::Tape::new();
        let mut cx = Ctx::eval(&mut tape, &self.store);
        let prompts = self.prompts.materialize(&mut cx, 0.0)?;
        let out = self.encode(&mut cx, item, &prompts, 0.0)?;
        let logits = self.text_logits(&mut cx, &out, &[position], rows)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Every parameter in `group`, by name, for hashing and comparison.
    pub fn group_snapshot(&self, group: Group) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{CLS, MASK, SEP};

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 30,
            dim: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 16,
            max_len: 24,
            adapter_dim: 2,
            text_prompts: 3,
            prompt_dim: 4,
            mapper_heads: 2,
            visual_prompts: 3,
            frame_dim: 6,
            frames: 4,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn closed_form_counts_match_the_store() {
        for (mapper, reparam, proj) in [(MapperKind::Vpn, false, true), (MapperKind::Linear, false, false), (MapperKind::Vpn, true, true)] {
            let config = ModelConfig { mapper, reparam, projector_trainable: proj, ..tiny() };
            let mut model = Model::new(config, 1).unwrap();
            model.fold_prompts().unwrap();
            let c = model.param_counts();
            assert_eq!(model.store.count(Group::Frozen), c.frozen);
            assert_eq!(model.store.count(Group::Prompt), c.prompts);
            assert_eq!(model.store.count(Group::Rest), c.adapters + c.mapper + c.projector);
        }
    }

    #[test]
    fn full_scale_accounting() {
        let c = ParamCounts::of(&ModelConfig::full());
        assert_eq!(c.prompts, 752_640);
        assert_eq!(c.adapters, 28_394_496);
        assert_eq!(c.mapper, 2 * (8 * 1536 * 1536 + 4 * 1536) + 1536 * 10);
        let f = c.prompt_fraction();
        assert!((0.005..=0.015).contains(&f), "{f}");
    }

    #[test]
    fn batch_loss_runs_with_and_without_video() {
        let model = Model::new(tiny(), 2).unwrap();
        let frames = Tensor::randn(&[6, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let with_video = ItemInput { video: Some((frames, vec![true, true, true, false])), ids: vec![CLS, 7, MASK, SEP] };
        let text_only = ItemInput { video: None, ids: vec![CLS, MASK, 9, SEP] };
        let mut tape = crate::tensor::Tape::new();
        let mut cx = Ctx::eval(&mut tape, &model.store);
        let loss = model
            .batch_loss(&mut cx, &[(with_video, vec![(2, 5)]), (text_only, vec![(1, 6)])], None, 0.0)
            .unwrap();
        assert!(tape.value(loss).item().is_finite());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(matches!(Model::new(ModelConfig { heads: 3, ..tiny() }, 0), Err(Error::Config(_))));
        assert!(matches!(Model::new(ModelConfig { max_len: 3, ..tiny() }, 0), Err(Error::Config(_))));
    }
}
