//! Finite-difference gradient checks over every block type at small sizes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::mapper::{MapperKind, MapperShape, VisualMapper};
use crate::model::{ItemInput, Model, ModelConfig};
use crate::nn::{
    adapter_forward, cross_attention, lm_layer_forward_impl, prompted_self_attention, Adapter, AttentionLayer, FeedForward,
    LayerInputs, LayerNorm, LmLayer, PromptPair,
};
use crate::params::{check_param_grads, Ctx, Group, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::text::{CLS, MASK, SEP};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Deliberate backward bugs for exercising the checker itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the gradient flowing into the adapter's up-projection branch.
    AdapterSignFlip,
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockCheck {
    pub block: &'static str,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sum(y ⊙ R)` for a fixed random `R`, so every output entry matters.
fn probe(cx: &mut Ctx, y: Var, seed: u64) -> Result<Var> {
    let r = cx.tape.constant(Tensor::randn(cx.tape.shape(y), 1.0, &mut rng(seed)));
    let p = cx.tape.mul(y, r)?;
    Ok(cx.tape.sum(p))
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.iter().map(|(id, _)| id).collect()
}

fn report(block: &'static str, store: &ParamStore, loss: impl Fn(&mut Ctx) -> Result<Var>) -> Result<BlockCheck> {
    let r = check_param_grads(store, &all_ids(store), loss, EPS, TOL)?;
    Ok(BlockCheck { block, checked: r.checked, max_rel_error: r.max_rel_error, max_abs_error: r.max_abs_error, passed: r.passed })
}

/// Inputs are registered as parameters so their gradients are checked too.
fn input(store: &mut ParamStore, name: &str, shape: &[usize], seed: u64) -> ParamId {
    store.add(name, Group::Rest, Tensor::randn(shape, 1.0, &mut rng(seed)))
}

/// Adapter with both projections moved off their zero init.
fn live_adapter(store: &mut ParamStore, prefix: &str, d: usize, b: usize, seed: u64) -> Result<Adapter> {
    let a = Adapter::new(store, prefix, d, b, &mut rng(seed));
    store.set(a.w1, Tensor::randn(&[b, d], 0.5, &mut rng(seed + 1)))?;
    store.set(a.w2, Tensor::randn(&[d, b], 0.5, &mut rng(seed + 2)))?;
    store.set(a.b1, Tensor::randn(&[b], 0.1, &mut rng(seed + 3)))?;
    store.set(a.b2, Tensor::randn(&[d], 0.1, &mut rng(seed + 4)))?;
    Ok(a)
}

fn prompted_attention_block() -> Result<BlockCheck> {
    let mut s = ParamStore::new();
    let layer = AttentionLayer::new(&mut s, "attn", 8, 2, Group::Frozen, &mut rng(1))?;
    let z = input(&mut s, "z", &[8, 4], 2);
    let pk = input(&mut s, "pk", &[8, 3], 3);
    let pv = input(&mut s, "pv", &[8, 3], 4);
    let valid = [true, true, true, true, true, false, true];
    report("prompted_self_attention", &s, |cx| {
        let (zv, keys, values) = (cx.param(z)?, cx.param(pk)?, cx.param(pv)?);
        let y = prompted_self_attention(cx, &layer, zv, Some(PromptPair { keys, values }), Some(&valid))?;
        probe(cx, y, 5)
    })
}

fn cross_attention_block() -> Result<BlockCheck> {
    let mut s = ParamStore::new();
    let layer = AttentionLayer::new(&mut s, "ca", 8, 2, Group::Rest, &mut rng(6))?;
    let norm = LayerNorm::new(&mut s, "ln", 8, Group::Rest, 1e-5);
    let z = input(&mut s, "z", &[8, 3], 7);
    let y = input(&mut s, "y", &[8, 5], 8);
    let valid = [true, true, false, true, false];
    report("cross_attention", &s, |cx| {
        let (zv, yv) = (cx.param(z)?, cx.param(y)?);
        let out = cross_attention(cx, &layer, &norm, zv, yv, Some(&valid), 0.0)?;
        probe(cx, out, 9)
    })
}

fn adapter_block(fault: Option<Fault>) -> Result<BlockCheck> {
    let mut s = ParamStore::new();
    let a = live_adapter(&mut s, "ad", 8, 2, 10)?;
    let z = input(&mut s, "z", &[8, 4], 16);
    let flip = fault == Some(Fault::AdapterSignFlip);
    report("adapter", &s, |cx| {
        let zv = cx.param(z)?;
        let y = adapter_forward(cx, &a, zv, 0.0, flip)?;
        probe(cx, y, 17)
    })
}

fn layer_norm_block() -> Result<BlockCheck> {
    let mut s = ParamStore::new();
    let norm = LayerNorm::new(&mut s, "ln", 6, Group::Rest, 1e-5);
    s.set(norm.gain, Tensor::randn(&[6], 1.0, &mut rng(18)))?;
    s.set(norm.bias, Tensor::randn(&[6], 1.0, &mut rng(19)))?;
    let z = input(&mut s, "z", &[6, 4], 20);
    report("layer_norm", &s, |cx| {
        let zv = cx.param(z)?;
        let y = norm.forward(cx, zv)?;
        probe(cx, y, 21)
    })
}

fn feed_forward_block() -> Result<BlockCheck> {
    let mut s = ParamStore::new();
    let ffn = FeedForward::new(&mut s, "ffn", 6, 12, Group::Frozen, &mut rng(22));
    s.set(ffn.b1, Tensor::randn(&[12], 0.5, &mut rng(23)))?;
    let z = input(&mut s, "z", &[6, 3], 24);
    report("feed_forward", &s, |cx| {
        let zv = cx.param(z)?;
        let y = ffn.forward(cx, zv)?;
        probe(cx, y, 25)
    })
}

fn lm_layer_block(fault: Option<Fault>) -> Result<BlockCheck> {
    let mut s = ParamStore::new();
    let layer = LmLayer {
        attention: AttentionLayer::new(&mut s, "attn", 8, 2, Group::Frozen, &mut rng(26))?,
        ffn: FeedForward::new(&mut s, "ffn", 8, 16, Group::Frozen, &mut rng(27)),
        norm1: LayerNorm::new(&mut s, "ln1", 8, Group::Frozen, 1e-5),
        norm2: LayerNorm::new(&mut s, "ln2", 8, Group::Frozen, 1e-5),
        adapter1: Some(live_adapter(&mut s, "ad1", 8, 2, 28)?),
        adapter2: Some(live_adapter(&mut s, "ad2", 8, 2, 33)?),
    };
    let z = input(&mut s, "z", &[8, 4], 38);
    let pk = input(&mut s, "pk", &[8, 2], 39);
    let pv = input(&mut s, "pv", &[8, 2], 40);
    let flip = fault == Some(Fault::AdapterSignFlip);
    report("lm_layer", &s, |cx| {
        let (zv, keys, values) = (cx.param(z)?, cx.param(pk)?, cx.param(pv)?);
        let inputs = LayerInputs { prompts: Some(PromptPair { keys, values }), key_valid: None, dropout: 0.0, use_adapters: true };
        let y = lm_layer_forward_impl(cx, &layer, zv, inputs, flip)?;
        probe(cx, y, 41)
    })
}

fn mapper_block() -> Result<BlockCheck> {
    let mut s = ParamStore::new();
    let shape = MapperShape { kind: MapperKind::Vpn, dim: 8, latents: 3, layers: 2, heads: 2, max_frames: 5 };
    let mapper = VisualMapper::new(&mut s, shape, &mut rng(42))?;
    let y = input(&mut s, "y", &[8, 5], 43);
    let valid = [true, true, true, false, true];
    report("mapper_stack", &s, |cx| {
        let yv = cx.param(y)?;
        let out = mapper.map_video(cx, yv, &valid, 0.0)?;
        probe(cx, out.tokens, 44)
    })
}

fn model_loss_block() -> Result<BlockCheck> {
    let config = ModelConfig {
        vocab_size: 10,
        dim: 4,
        layers: 1,
        heads: 2,
        ffn_dim: 6,
        max_len: 12,
        tied_head: true,
        adapter_dim: 1,
        text_prompts: 2,
        prompt_dim: 2,
        mapper_layers: 1,
        mapper_heads: 2,
        visual_prompts: 2,
        frame_dim: 3,
        frames: 3,
        dropout: 0.0,
        ..ModelConfig::desk()
    };
    let mut model = Model::new(config, 45)?;
    for id in model.store.ids_in(Group::Rest) {
        if model.store.get(id)?.name.ends_with(".w2") && model.store.get(id)?.name.contains("adapter") {
            let shape = model.store.value(id).shape().to_vec();
            model.store.set(id, Tensor::randn(&shape, 0.5, &mut rng(46)))?;
        }
    }
    let frames = Tensor::randn(&[3, 3], 1.0, &mut rng(47));
    let batch = vec![
        (ItemInput { video: Some((frames, vec![true, false, true])), ids: vec![CLS, 5, MASK, MASK, SEP] }, vec![(2, 1), (3, 0)]),
        (ItemInput { video: None, ids: vec![CLS, MASK, 6, SEP] }, vec![(1, 2)]),
    ];
    let rows = [7usize, 8, 9];
    report("model_loss", &model.store, |cx| model.batch_loss(cx, &batch, Some(&rows), 0.0))
}

/// Runs every block check; `fault` plants a backward bug.
pub fn run_suite(fault: Option<Fault>) -> Result<Vec<BlockCheck>> {
    Ok(vec![
        prompted_attention_block()?,
        cross_attention_block()?,
        adapter_block(fault)?,
        layer_norm_block()?,
        feed_forward_block()?,
        lm_layer_block(fault)?,
        mapper_block()?,
        model_loss_block()?,
    ])
}
