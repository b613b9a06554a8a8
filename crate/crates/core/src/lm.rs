//! Frozen bidirectional encoder with a token classifier head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{lm_layer_forward_impl, Adapter, AttentionLayer, FeedForward, LayerInputs, LayerNorm, LmLayer, PromptPair};
use crate::params::{Ctx, Group, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

pub const MASK_ID: u32 = 3;

#[derive(Clone, Copy, Debug)]
pub struct LmShape {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    /// Adapter bottleneck; `None` builds no adapters.
    pub adapter_dim: Option<usize>,
    pub tied_head: bool,
}

#[derive(Clone, Debug)]
pub struct FrozenLm {
    pub shape: LmShape,
    /// `[V, D]`.
    pub token_emb: ParamId,
    /// `[S_max, D]`.
    pub pos_emb: ParamId,
    pub emb_norm: LayerNorm,
    pub layers: Vec<LmLayer>,
    /// `[V, D]` when untied.
    pub head_weight: Option<ParamId>,
    /// `[V]`.
    pub head_bias: ParamId,
}

/// Forward options beyond the token embeddings.
#[derive(Clone, Copy, Default)]
pub struct LmInputs<'a> {
    /// `[D, M]` video tokens and their validity.
    pub video: Option<(Var, &'a [bool])>,
    /// One pair per layer, or empty.
    pub prompts: &'a [PromptPair],
    pub use_adapters: bool,
    pub dropout: f64,
    #[doc(hidden)]
    pub flip_adapter_grad: bool,
}

pub struct LmOutput {
    /// `[D, K]` with `K = M + S`.
    pub hidden: Var,
    pub layer_outputs: Vec<Var>,
    /// Number of video positions at the front of `hidden`.
    pub video_len: usize,
}

impl FrozenLm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, shape: LmShape, rng: &mut R) -> Result<Self> {
        let (v, d) = (shape.vocab, shape.dim);
        if v <= MASK_ID as usize {
            return Err(Error::Config(format!("vocabulary of {v} cannot hold the special tokens")));
        }
        let f = Group::Frozen;
        // Unit-norm rows keep tied-head logits O(1) against layer-normed states.
        let std = 1.0 / (d as f64).sqrt();
        let token_emb = store.add("lm.token_emb", f, Tensor::randn(&[v, d], std, rng));
        let pos_emb = store.add("lm.pos_emb", f, Tensor::randn(&[shape.max_len, d], 0.1 * std, rng));
        let emb_norm = LayerNorm::new(store, "lm.emb_norm", d, f, 1e-5);
        let mut layers = Vec::with_capacity(shape.layers);
        for l in 0..shape.layers {
            let p = format!("lm.{l}");
            let attention = AttentionLayer::new(store, &format!("{p}.attn"), d, shape.heads, f, rng)?;
            let ffn = FeedForward::new(store, &format!("{p}.ffn"), d, shape.ffn, f, rng);
            let norm1 = LayerNorm::new(store, &format!("{p}.ln1"), d, f, 1e-5);
            let norm2 = LayerNorm::new(store, &format!("{p}.ln2"), d, f, 1e-5);
            let (adapter1, adapter2) = match shape.adapter_dim {
                Some(b) => (
                    Some(Adapter::new(store, &format!("{p}.adapter1"), d, b, rng)),
                    Some(Adapter::new(store, &format!("{p}.adapter2"), d, b, rng)),
                ),
                None => (None, None),
            };
            layers.push(LmLayer { attention, ffn, norm1, norm2, adapter1, adapter2 });
        }
        let head_weight = (!shape.tied_head)
            .then(|| store.add("lm.head_weight", f, Tensor::randn(&[v, d], 1.0 / (d as f64).sqrt(), rng)));
        let head_bias = store.add("lm.head_bias", f, Tensor::zeros(&[v]));
        Ok(FrozenLm {
            shape,
            token_emb,
            pos_emb,
            emb_norm,
            layers,
            head_weight,
            head_bias,
        })
    }

    pub fn frozen_param_count(shape: &LmShape) -> usize {
        let (v, d) = (shape.vocab, shape.dim);
        let layer = AttentionLayer::param_count(d) + FeedForward::param_count(d, shape.ffn) + 2 * LayerNorm::param_count(d);
        let head = if shape.tied_head { v } else { v * d + v };
        v * d + shape.max_len * d + LayerNorm::param_count(d) + shape.layers * layer + head
    }

    /// Two adapters per layer.
    pub fn adapter_param_count(shape: &LmShape) -> usize {
        shape
            .adapter_dim
            .map_or(0, |b| 2 * shape.layers * Adapter::param_count(shape.dim, b))
    }

    /// Token embeddings `[D, S]`, with the listed positions replaced by the mask token.
    pub fn embed_text(&self, cx: &mut Ctx, ids: &[u32], mask_positions: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        let mut rows = Vec::with_capacity(ids.len());
        for &id in ids {
            if id as usize >= self.shape.vocab {
                return Err(Error::Input(format!("token id {id} outside vocabulary of {}", self.shape.vocab)));
            }
            rows.push(id as usize);
        }
        for &p in mask_positions {
            *rows
                .get_mut(p)
                .ok_or_else(|| Error::Input(format!("mask position {p} beyond sequence of {}", ids.len())))? = MASK_ID as usize;
        }
        let table = cx.param(self.token_emb)?;
        let picked = cx.tape.select(table, 0, &rows)?;
        cx.tape.transpose(picked)
    }

    /// Runs the encoder over `[video | text]`.
    pub fn forward(&self, cx: &mut Ctx, text: Var, inputs: LmInputs<'_>) -> Result<LmOutput> {
        let (mut x, mut valid, video_len) = match inputs.video {
            Some((v, valid)) => {
                let m = cx.tape.shape(v)[1];
                if valid.len() != m {
                    return Err(Error::shape("video validity", &[valid.len()], &[m]));
                }
                (cx.tape.concat(&[v, text], 1)?, valid.to_vec(), m)
            }
            None => (text, Vec::new(), 0),
        };
        let k = cx.tape.shape(x)[1];
        if k > self.shape.max_len {
            return Err(Error::Config(format!(
                "sequence of {k} positions exceeds the maximum length {}",
                self.shape.max_len
            )));
        }
        if !inputs.prompts.is_empty() && inputs.prompts.len() != self.layers.len() {
            return Err(Error::shape("prompt pairs", &[inputs.prompts.len()], &[self.layers.len()]));
        }
        valid.resize(k, true);

        let pos = cx.param(self.pos_emb)?;
        let pos = cx.tape.slice(pos, 0, 0, k)?;
        let pos = cx.tape.transpose(pos)?;
        x = cx.tape.add(x, pos)?;
        x = self.emb_norm.forward(cx, x)?;
        x = cx.dropout(x, inputs.dropout)?;

        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        let all_valid = valid.iter().all(|&v| v);
        for (l, layer) in self.layers.iter().enumerate() {
            let prompts = inputs.prompts.get(l).copied();
            let n = prompts.map_or(0, |p| cx.tape.shape(p.keys)[1]);
            let mask = (!all_valid).then(|| {
                let mut m = vec![true; n];
                m.extend_from_slice(&valid);
                m
            });
            let layer_inputs = LayerInputs {
                prompts,
                key_valid: mask.as_deref(),
                dropout: inputs.dropout,
                use_adapters: inputs.use_adapters,
            };
            x = lm_layer_forward_impl(cx, layer, x, layer_inputs, inputs.flip_adapter_grad)?;
            layer_outputs.push(x);
        }
        Ok(LmOutput { hidden: x, layer_outputs, video_len })
    }

    /// Head logits `[R, P]` for hidden columns `positions`, restricted to the
    /// token rows `rows` (all rows when `None`).
    pub fn logits(&self, cx: &mut Ctx, hidden: Var, positions: &[usize], rows: Option<&[usize]>) -> Result<Var> {
        let h = cx.tape.select(hidden, 1, positions)?;
        let w = cx.param(self.head_weight.unwrap_or(self.token_emb))?;
        let b = cx.param(self.head_bias)?;
        let (w, b) = match rows {
            Some(rows) => {
                if let Some(&bad) = rows.iter().find(|&&r| r >= self.shape.vocab) {
                    return Err(Error::Vocab(format!("head row {bad} outside vocabulary of {}", self.shape.vocab)));
                }
                (cx.tape.select(w, 0, rows)?, cx.tape.select(b, 0, rows)?)
            }
            None => (w, b),
        };
        let logits = cx.tape.matmul(w, h)?;
        cx.tape.add_bias(logits, b)
    }
}

/// Head rows kept for a restricted answer vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RestrictedHead {
    /// Distinct token ids in first-appearance order; row `i` of the
    /// restricted logits is token `rows[i]`.
    pub rows: Vec<usize>,
    /// For each answer, indices into `rows` of its tokens.
    pub answer_rows: Vec<Vec<usize>>,
}

pub fn restrict_head(vocab_size: usize, answers: &[Vec<u32>]) -> Result<RestrictedHead> {
    let mut rows: Vec<usize> = Vec::new();
    let mut answer_rows = Vec::with_capacity(answers.len());
    for tokens in answers {
        if tokens.is_empty() {
            return Err(Error::Vocab("answer with no tokens".into()));
        }
        let mut idx = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let t = t as usize;
            if t >= vocab_size {
                return Err(Error::Vocab(format!("answer token {t} outside vocabulary of {vocab_size}")));
            }
            let i = match rows.iter().position(|&r| r == t) {
                Some(i) => i,
                None => {
                    rows.push(t);
                    rows.len() - 1
                }
            };
            idx.push(i);
        }
        answer_rows.push(idx);
    }
    Ok(RestrictedHead { rows, answer_rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::GradGroups;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn shape() -> LmShape {
        LmShape {
            vocab: 20,
            dim: 8,
            layers: 3,
            heads: 2,
            ffn: 16,
            max_len: 16,
            adapter_dim: Some(2),
            tied_head: true,
        }
    }

    #[test]
    fn embed_text_substitutes_mask_embedding() {
        let mut store = ParamStore::new();
        let lm = FrozenLm::new(&mut store, shape(), &mut rng(1)).unwrap();
        let mut tape = Tape::new();
        let mut cx = Ctx::eval(&mut tape, &store);
        let e = lm.embed_text(&mut cx, &[5, 6, 7], &[1]).unwrap();
        let e = tape.value(e).clone();
        let table = store.value(lm.token_emb);
        for r in 0..8 {
            assert_eq!(e.at(r, 0), table.at(5, r));
            assert_eq!(e.at(r, 1), table.at(MASK_ID as usize, r));
            assert_eq!(e.at(r, 2), table.at(7, r));
        }
        let mut cx = Ctx::eval(&mut tape, &store);
        assert!(matches!(lm.embed_text(&mut cx, &[20], &[]), Err(Error::Input(_))));
    }

    #[test]
    fn output_length_and_max_len_check() {
        let mut store = ParamStore::new();
        let lm = FrozenLm::new(&mut store, shape(), &mut rng(2)).unwrap();
        let mut tape = Tape::new();
        let mut cx = Ctx::eval(&mut tape, &store);
        let text = lm.embed_text(&mut cx, &[1, 5, 3, 2], &[]).unwrap();
        let video = cx.tape.constant(Tensor::randn(&[8, 3], 1.0, &mut rng(3)));
        let out = lm
            .forward(&mut cx, text, LmInputs { video: Some((video, &[true; 3])), use_adapters: true, ..Default::default() })
            .unwrap();
        assert_eq!(cx.tape.shape(out.hidden), &[8, 7]);
        let logits = lm.logits(&mut cx, out.hidden, &[5], None).unwrap();
        assert_eq!(cx.tape.shape(logits), &[20, 1]);

        let long = lm.embed_text(&mut cx, &[5; 17], &[]).unwrap();
        assert!(matches!(lm.forward(&mut cx, long, LmInputs::default()), Err(Error::Config(_))));
    }

    #[test]
    fn bidirectional_context() {
        let mut store = ParamStore::new();
        let lm = FrozenLm::new(&mut store, shape(), &mut rng(4)).unwrap();
        let masked_logits = |ids: &[u32]| {
            let mut tape = Tape::new();
            let mut cx = Ctx::eval(&mut tape, &store);
            let t = lm.embed_text(&mut cx, ids, &[2]).unwrap();
            let out = lm.forward(&mut cx, t, LmInputs::default()).unwrap();
            let l = lm.logits(&mut cx, out.hidden, &[2], None).unwrap();
            tape.value(l).clone()
        };
        let base = masked_logits(&[1, 5, 9, 6, 2]);
        assert!(base.max_abs_diff(&masked_logits(&[1, 5, 9, 7, 2])) > 1e-6);
        assert!(base.max_abs_diff(&masked_logits(&[1, 8, 9, 6, 2])) > 1e-6);
    }

    #[test]
    fn changing_a_layers_prompts_only_affects_that_layer_and_later() {
        let mut store = ParamStore::new();
        let lm = FrozenLm::new(&mut store, shape(), &mut rng(5)).unwrap();
        let prompts: Vec<(Tensor, Tensor)> = (0..3)
            .map(|l| (Tensor::randn(&[8, 2], 1.0, &mut rng(10 + l)), Tensor::randn(&[8, 2], 1.0, &mut rng(20 + l))))
            .collect();
        let run = |prompts: &[(Tensor, Tensor)]| {
            let mut tape = Tape::new();
            let mut cx = Ctx::eval(&mut tape, &store);
            let pairs: Vec<PromptPair> = prompts
                .iter()
                .map(|(k, v)| PromptPair { keys: cx.tape.constant(k.clone()), values: cx.tape.constant(v.clone()) })
                .collect();
            let t = lm.embed_text(&mut cx, &[1, 5, 6, 2], &[]).unwrap();
            let out = lm.forward(&mut cx, t, LmInputs { prompts: &pairs, ..Default::default() }).unwrap();
            out.layer_outputs.iter().map(|v| tape.value(*v).clone()).collect::<Vec<_>>()
        };
        let base = run(&prompts);
        let mut changed = prompts.clone();
        changed[1].0 = Tensor::randn(&[8, 2], 1.0, &mut rng(99));
        let after = run(&changed);
        assert!(base[0].bitwise_eq(&after[0]));
        assert!(base[1].max_abs_diff(&after[1]) > 1e-8);
        assert!(base[2].max_abs_diff(&after[2]) > 1e-8);
    }

    #[test]
    fn padded_video_positions_are_ignored() {
        let mut store = ParamStore::new();
        let lm = FrozenLm::new(&mut store, shape(), &mut rng(6)).unwrap();
        let run = |video: Tensor| {
            let mut tape = Tape::new();
            let mut cx = Ctx::eval(&mut tape, &store);
            let v = cx.tape.constant(video);
            let t = lm.embed_text(&mut cx, &[1, 5, 3, 2], &[]).unwrap();
            let out = lm
                .forward(&mut cx, t, LmInputs { video: Some((v, &[true, false])), ..Default::default() })
                .unwrap();
            let h = tape.value(out.hidden).clone();
            Tensor::new(&[8, 4], (0..8).flat_map(|r| (2..6).map(move |c| (r, c))).map(|(r, c)| h.at(r, c)).collect()).unwrap()
        };
        let video = Tensor::randn(&[8, 2], 1.0, &mut rng(7));
        let mut noisy = video.clone();
        for r in 0..8 {
            noisy.data_mut()[r * 2 + 1] += 4.0;
        }
        assert!(run(video).bitwise_eq(&run(noisy)));
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        let lm = FrozenLm::new(&mut store, shape(), &mut rng(8)).unwrap();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, GradGroups::TRAINABLE, None);
        let t = lm.embed_text(&mut cx, &[1, 5, 3, 2], &[2]).unwrap();
        let out = lm.forward(&mut cx, t, LmInputs { use_adapters: true, ..Default::default() }).unwrap();
        let l = lm.logits(&mut cx, out.hidden, &[2], None).unwrap();
        let lt = cx.tape.transpose(l).unwrap();
        let loss = cx.tape.cross_entropy(lt, &[7]).unwrap();
        let bindings = cx.bindings();
        let grads = tape.backward(loss).unwrap();
        for (id, v) in bindings {
            let p = store.get(id).unwrap();
            assert_eq!(grads.get(v).is_some(), p.group != Group::Frozen, "{}", p.name);
        }
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        for tied in [true, false] {
            let mut store = ParamStore::new();
            let s = LmShape { tied_head: tied, ..shape() };
            FrozenLm::new(&mut store, s, &mut rng(9)).unwrap();
            assert_eq!(store.count(Group::Frozen), FrozenLm::frozen_param_count(&s));
            assert_eq!(store.count(Group::Rest), FrozenLm::adapter_param_count(&s));
        }
        let full = LmShape {
            vocab: 128_000,
            dim: 1536,
            layers: 24,
            heads: 24,
            ffn: 6144,
            max_len: 512,
            adapter_dim: Some(192),
            tied_head: true,
        };
        assert_eq!(FrozenLm::adapter_param_count(&full), 2 * 24 * (2 * 192 * 1536 + 192 + 1536));
        assert_eq!(FrozenLm::adapter_param_count(&full), 28_394_496);
    }

    #[test]
    fn restricted_head_rows() {
        let h = restrict_head(100, &[vec![7]]).unwrap();
        assert_eq!(h.rows, vec![7]);
        let many: Vec<Vec<u32>> = (0..1000).map(|i| vec![i]).collect();
        assert_eq!(restrict_head(1000, &many).unwrap().rows.len(), 1000);
        let h = restrict_head(100, &[vec![9], vec![11, 12], vec![12]]).unwrap();
        assert_eq!(h.rows, vec![9, 11, 12]);
        assert_eq!(h.answer_rows, vec![vec![0], vec![1, 2], vec![2]]);
        assert!(matches!(restrict_head(10, &[vec![10]]), Err(Error::Vocab(_))));
    }
}
