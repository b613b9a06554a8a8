//! Transformer building blocks over `[D, K]` sequences.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Ctx, Group, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// Key and value prompts prepended to one attention layer, each `[D, N]`.
#[derive(Clone, Copy, Debug)]
pub struct PromptPair {
    pub keys: Var,
    pub values: Var,
}

/// Affine layer normalization over the feature axis of a `[D, K]` sequence.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, group: Group, eps: f64) -> Self {
        LayerNorm {
            gain: store.add(format!("{prefix}.gain"), group, Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{prefix}.bias"), group, Tensor::zeros(&[dim])),
            eps,
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let gain = cx.param(self.gain)?;
        let bias = cx.param(self.bias)?;
        cx.tape.layer_norm_axis(x, 0, gain, bias, self.eps)
    }
}

/// Multi-head attention with bias-free `D×D` projections.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub dim: usize,
    pub heads: usize,
}

/// Attention output plus the per-head weight matrices (`[K_query, K_keys]`).
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl AttentionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        group: Group,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let mut proj = |name: &str| store.add(format!("{prefix}.{name}"), group, Tensor::randn(&[dim, dim], std, rng));
        Ok(AttentionLayer {
            wq: proj("wq"),
            wk: proj("wk"),
            wv: proj("wv"),
            wo: proj("wo"),
            dim,
            heads,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        4 * dim * dim
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Queries from `queries: [D, Kq]`, keys and values from `source: [D, Kk]`
    /// with optional prompts prepended. `key_valid` covers the `N + Kk` key
    /// positions in that order; prompt positions are always attended.
    pub fn attend(
        &self,
        cx: &mut Ctx,
        queries: Var,
        source: Var,
        prompts: Option<PromptPair>,
        key_valid: Option<&[bool]>,
    ) -> Result<Attended> {
        let qs = cx.tape.shape(queries).to_vec();
        let ss = cx.tape.shape(source).to_vec();
        if qs.len() != 2 || ss.len() != 2 || qs[0] != self.dim || ss[0] != self.dim {
            return Err(Error::shape("attention", &qs, &ss));
        }
        let n_prompts = match prompts {
            Some(p) => {
                let ks = cx.tape.shape(p.keys).to_vec();
                let vs = cx.tape.shape(p.values).to_vec();
                if ks != vs || ks.len() != 2 || ks[0] != self.dim {
                    return Err(Error::shape("prompt pair", &ks, &vs));
                }
                ks[1]
            }
            None => 0,
        };
        let n_keys = n_prompts + ss[1];
        let valid: Option<Vec<bool>> = match key_valid {
            Some(mask) if mask.len() != n_keys => {
                return Err(Error::shape("attention mask", &[mask.len()], &[n_keys]));
            }
            Some(mask) => Some(
                mask.iter()
                    .enumerate()
                    .map(|(i, &m)| i < n_prompts || m)
                    .collect(),
            ),
            None => None,
        };

        let wq = cx.param(self.wq)?;
        let wk = cx.param(self.wk)?;
        let wv = cx.param(self.wv)?;
        let wo = cx.param(self.wo)?;
        let q = cx.tape.matmul(wq, queries)?;
        let mut k = cx.tape.matmul(wk, source)?;
        let mut v = cx.tape.matmul(wv, source)?;
        if let Some(p) = prompts {
            k = cx.tape.concat(&[p.keys, k], 1)?;
            v = cx.tape.concat(&[p.values, v], 1)?;
        }

        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = cx.tape.slice(q, 0, h * hd, hd)?;
            let kh = cx.tape.slice(k, 0, h * hd, hd)?;
            let vh = cx.tape.slice(v, 0, h * hd, hd)?;
            let qt = cx.tape.transpose(qh)?;
            let scores = cx.tape.matmul(qt, kh)?;
            let scores = cx.tape.scale(scores, scale);
            let attn = match &valid {
                Some(mask) => cx.tape.masked_softmax(scores, mask)?,
                None => cx.tape.softmax(scores, 1)?,
            };
            let at = cx.tape.transpose(attn)?;
            heads.push(cx.tape.matmul(vh, at)?);
            weights.push(attn);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            cx.tape.concat(&heads, 0)?
        };
        let output = cx.tape.matmul(wo, merged)?;
        Ok(Attended { output, weights })
    }
}

/// Self-attention over `z` with optional key/value prompts. Output length is
/// the query length regardless of the prompt count.
pub fn prompted_self_attention(
    cx: &mut Ctx,
    layer: &AttentionLayer,
    z: Var,
    prompts: Option<PromptPair>,
    key_valid: Option<&[bool]>,
) -> Result<Var> {
    Ok(layer.attend(cx, z, z, prompts, key_valid)?.output)
}

pub fn self_attention(cx: &mut Ctx, layer: &AttentionLayer, z: Var, key_valid: Option<&[bool]>) -> Result<Var> {
    prompted_self_attention(cx, layer, z, None, key_valid)
}

/// Post-norm cross-attention sublayer: `LN(z + CA(z, y))`.
pub fn cross_attention(
    cx: &mut Ctx,
    layer: &AttentionLayer,
    norm: &LayerNorm,
    z: Var,
    y: Var,
    frame_valid: Option<&[bool]>,
    dropout: f64,
) -> Result<Var> {
    let attended = layer.attend(cx, z, y, None, frame_valid)?.output;
    let attended = cx.dropout(attended, dropout)?;
    let residual = cx.tape.add(z, attended)?;
    norm.forward(cx, residual)
}

/// Post-norm self-attention sublayer: `LN(z + SA(z))`.
pub fn self_attention_block(cx: &mut Ctx, layer: &AttentionLayer, norm: &LayerNorm, z: Var, dropout: f64) -> Result<Var> {
    let attended = self_attention(cx, layer, z, None)?;
    let attended = cx.dropout(attended, dropout)?;
    let residual = cx.tape.add(z, attended)?;
    norm.forward(cx, residual)
}

/// Residual bottleneck `A(Z) = Z + W2·relu(W1·Z + b1) + b2`.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dim: usize,
    pub bottleneck: usize,
}

impl Adapter {
    /// `W1` ~ N(0, 0.02²), everything else zero: the adapter starts as the identity.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, bottleneck: usize, rng: &mut R) -> Self {
        Adapter {
            w1: store.add(format!("{prefix}.w1"), Group::Rest, Tensor::randn(&[bottleneck, dim], 0.02, rng)),
            b1: store.add(format!("{prefix}.b1"), Group::Rest, Tensor::zeros(&[bottleneck])),
            w2: store.add(format!("{prefix}.w2"), Group::Rest, Tensor::zeros(&[dim, bottleneck])),
            b2: store.add(format!("{prefix}.b2"), Group::Rest, Tensor::zeros(&[dim])),
            dim,
            bottleneck,
        }
    }

    pub fn param_count(dim: usize, bottleneck: usize) -> usize {
        2 * dim * bottleneck + dim + bottleneck
    }
}

pub fn adapter_apply(cx: &mut Ctx, adapter: &Adapter, z: Var, dropout: f64) -> Result<Var> {
    adapter_forward(cx, adapter, z, dropout, false)
}

pub(crate) fn adapter_forward(cx: &mut Ctx, adapter: &Adapter, z: Var, dropout: f64, flip_grad: bool) -> Result<Var> {
    let w1 = cx.param(adapter.w1)?;
    let b1 = cx.param(adapter.b1)?;
    let w2 = cx.param(adapter.w2)?;
    let b2 = cx.param(adapter.b2)?;
    let h = cx.tape.matmul(w1, z)?;
    let h = cx.tape.add_bias(h, b1)?;
    let h = cx.tape.relu(h);
    let up = cx.tape.matmul(w2, h)?;
    let mut up = cx.tape.add_bias(up, b2)?;
    if flip_grad {
        up = cx.tape.flip_grad(up);
    }
    let up = cx.dropout(up, dropout)?;
    cx.tape.add(z, up)
}

/// Two affine maps `D → F → D` with a GELU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, group: Group, rng: &mut R) -> Self {
        FeedForward {
            w1: store.add(
                format!("{prefix}.w1"),
                group,
                Tensor::randn(&[hidden, dim], 1.0 / (dim as f64).sqrt(), rng),
            ),
            b1: store.add(format!("{prefix}.b1"), group, Tensor::zeros(&[hidden])),
            w2: store.add(
                format!("{prefix}.w2"),
                group,
                Tensor::randn(&[dim, hidden], 1.0 / (hidden as f64).sqrt(), rng),
            ),
            b2: store.add(format!("{prefix}.b2"), group, Tensor::zeros(&[dim])),
        }
    }

    pub fn param_count(dim: usize, hidden: usize) -> usize {
        2 * dim * hidden + dim + hidden
    }

    pub fn forward(&self, cx: &mut Ctx, z: Var) -> Result<Var> {
        let w1 = cx.param(self.w1)?;
        let b1 = cx.param(self.b1)?;
        let w2 = cx.param(self.w2)?;
        let b2 = cx.param(self.b2)?;
        let h = cx.tape.matmul(w1, z)?;
        let h = cx.tape.add_bias(h, b1)?;
        let h = cx.tape.gelu(h);
        let o = cx.tape.matmul(w2, h)?;
        cx.tape.add_bias(o, b2)
    }
}

/// One encoder layer of the language model: frozen attention, feed-forward and
/// norms, with optional trainable adapters after each sublayer.
#[derive(Clone, Debug)]
pub struct LmLayer {
    pub attention: AttentionLayer,
    pub ffn: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub adapter1: Option<Adapter>,
    pub adapter2: Option<Adapter>,
}

/// Layer inputs beyond the sequence itself.
#[derive(Clone, Copy, Default)]
pub struct LayerInputs<'m> {
    pub prompts: Option<PromptPair>,
    /// Validity of the `N + K` key positions (prompts first).
    pub key_valid: Option<&'m [bool]>,
    pub dropout: f64,
    pub use_adapters: bool,
}

/// `u = LN1(A1(Z + SA(Z; P_K, P_V)))`, `out = LN2(A2(u + FFN(u)))`.
pub fn lm_layer_forward(cx: &mut Ctx, layer: &LmLayer, z: Var, inputs: LayerInputs<'_>) -> Result<Var> {
    lm_layer_forward_impl(cx, layer, z, inputs, false)
}

pub(crate) fn lm_layer_forward_impl(
    cx: &mut Ctx,
    layer: &LmLayer,
    z: Var,
    inputs: LayerInputs<'_>,
    flip_adapter_grad: bool,
) -> Result<Var> {
    let attended = prompted_self_attention(cx, &layer.attention, z, inputs.prompts, inputs.key_valid)?;
    let attended = cx.dropout(attended, inputs.dropout)?;
    let mut u = cx.tape.add(z, attended)?;
    if let (true, Some(a)) = (inputs.use_adapters, &layer.adapter1) {
        u = adapter_forward(cx, a, u, inputs.dropout, flip_adapter_grad)?;
    }
    let u = layer.norm1.forward(cx, u)?;
    let ff = layer.ffn.forward(cx, u)?;
    let ff = cx.dropout(ff, inputs.dropout)?;
    let mut out = cx.tape.add(u, ff)?;
    if let (true, Some(a)) = (inputs.use_adapters, &layer.adapter2) {
        out = adapter_forward(cx, a, out, inputs.dropout, flip_adapter_grad)?;
    }
    layer.norm2.forward(cx, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{check_param_grads, GradGroups};
    use crate::tensor::{grad_check, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn probe(cx: &mut Ctx, y: Var, seed: u64) -> Result<Var> {
        let w = Tensor::randn(cx.tape.shape(y), 1.0, &mut rng(seed));
        let w = cx.tape.constant(w);
        let p = cx.tape.mul(y, w)?;
        Ok(cx.tape.sum(p))
    }

    fn value_of(store: &ParamStore, f: impl Fn(&mut Ctx) -> Result<Var>) -> Tensor {
        let mut tape = Tape::new();
        let mut cx = Ctx::eval(&mut tape, store);
        let v = f(&mut cx).unwrap();
        tape.value(v).clone()
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        assert!(matches!(
            AttentionLayer::new(&mut store, "a", 6, 4, Group::Frozen, &mut rng(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_prompts_match_plain_attention_bitwise() {
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "a", 8, 2, Group::Frozen, &mut rng(1)).unwrap();
        let z = Tensor::randn(&[8, 5], 1.0, &mut rng(2));
        let plain = value_of(&store, |cx| {
            let zv = cx.tape.constant(z.clone());
            self_attention(cx, &layer, zv, None)
        });
        let prompted = value_of(&store, |cx| {
            let zv = cx.tape.constant(z.clone());
            prompted_self_attention(cx, &layer, zv, None, Some(&[true; 5]))
        });
        assert!(plain.bitwise_eq(&prompted));
    }

    #[test]
    fn hand_built_single_head_with_one_prompt() {
        // D=2, H=1, K=2, N=1.
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "a", 2, 1, Group::Frozen, &mut rng(3)).unwrap();
        let wq = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        let wk = Tensor::from_rows(&[vec![0.5, 0.0], vec![1.0, -1.0]]).unwrap();
        let wv = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        store.set(layer.wq, wq.clone()).unwrap();
        store.set(layer.wk, wk.clone()).unwrap();
        store.set(layer.wv, wv.clone()).unwrap();
        store.set(layer.wo, Tensor::eye(2)).unwrap();
        let z = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 1.5]]).unwrap();
        let pk = Tensor::from_rows(&[vec![0.3], vec![-0.7]]).unwrap();
        let pv = Tensor::from_rows(&[vec![1.0], vec![4.0]]).unwrap();

        let out = value_of(&store, |cx| {
            let zv = cx.tape.constant(z.clone());
            let keys = cx.tape.constant(pk.clone());
            let values = cx.tape.constant(pv.clone());
            prompted_self_attention(cx, &layer, zv, Some(PromptPair { keys, values }), None)
        });

        // Brute force: loops over explicit columns.
        let q = wq.matmul(&z).unwrap();
        let kz = wk.matmul(&z).unwrap();
        let vz = wv.matmul(&z).unwrap();
        let key_col = |j: usize| if j == 0 { pk.column(0) } else { kz.column(j - 1) };
        let val_col = |j: usize| if j == 0 { pv.column(0) } else { vz.column(j - 1) };
        for i in 0..2 {
            let qi = q.column(i);
            let scores: Vec<f64> = (0..3)
                .map(|j| key_col(j).iter().zip(&qi).map(|(a, b)| a * b).sum::<f64>() / 2f64.sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let total: f64 = e.iter().sum();
            for d in 0..2 {
                let expected: f64 = (0..3).map(|j| e[j] / total * val_col(j)[d]).sum();
                assert!((out.at(d, i) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_length_is_query_length_for_any_prompt_count() {
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "a", 8, 2, Group::Frozen, &mut rng(4)).unwrap();
        let z = Tensor::randn(&[8, 6], 1.0, &mut rng(5));
        for n in [1usize, 10, 50] {
            let mut tape = Tape::new();
            let mut cx = Ctx::eval(&mut tape, &store);
            let zv = cx.tape.constant(z.clone());
            let keys = cx.tape.constant(Tensor::randn(&[8, n], 1.0, &mut rng(n as u64)));
            let values = cx.tape.constant(Tensor::randn(&[8, n], 1.0, &mut rng(n as u64 + 1)));
            let att = layer
                .attend(&mut cx, zv, zv, Some(PromptPair { keys, values }), None)
                .unwrap();
            assert_eq!(cx.tape.shape(att.output), &[8, 6]);
            for w in att.weights {
                let wt = cx.tape.value(w);
                assert_eq!(wt.shape(), &[6, 6 + n]);
                for r in 0..6 {
                    let s: f64 = (0..6 + n).map(|c| wt.at(r, c)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn prompt_shape_and_mask_errors() {
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "a", 4, 2, Group::Frozen, &mut rng(6)).unwrap();
        let mut tape = Tape::new();
        let mut cx = Ctx::eval(&mut tape, &store);
        let z = cx.tape.constant(Tensor::zeros(&[4, 3]));
        let keys = cx.tape.constant(Tensor::zeros(&[4, 2]));
        let values = cx.tape.constant(Tensor::zeros(&[4, 3]));
        let err = prompted_self_attention(&mut cx, &layer, z, Some(PromptPair { keys, values }), None);
        assert!(matches!(err, Err(Error::Shape { .. })));
        let err = prompted_self_attention(&mut cx, &layer, z, Some(PromptPair { keys, values: keys }), Some(&[true; 3]));
        assert!(matches!(err, Err(Error::Shape { .. })));
        assert!(prompted_self_attention(&mut cx, &layer, z, Some(PromptPair { keys, values: keys }), Some(&[true; 5])).is_ok());
    }

    #[test]
    fn cross_attention_single_frame_has_unit_weights() {
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "ca", 8, 2, Group::Rest, &mut rng(7)).unwrap();
        let mut tape = Tape::new();
        let mut cx = Ctx::eval(&mut tape, &store);
        let z = cx.tape.constant(Tensor::randn(&[8, 3], 1.0, &mut rng(8)));
        let y = cx.tape.constant(Tensor::randn(&[8, 1], 1.0, &mut rng(9)));
        let att = layer.attend(&mut cx, z, y, None, None).unwrap();
        for w in att.weights {
            assert!(cx.tape.value(w).data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn cross_attention_matches_brute_force_and_keeps_query_length() {
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "ca", 8, 2, Group::Rest, &mut rng(10)).unwrap();
        let norm = LayerNorm::new(&mut store, "ln", 8, Group::Rest, 1e-5);
        let z = Tensor::randn(&[8, 3], 1.0, &mut rng(11));
        for t in [1usize, 5, 10] {
            let y = Tensor::randn(&[8, t], 1.0, &mut rng(12 + t as u64));
            let out = value_of(&store, |cx| {
                let zv = cx.tape.constant(z.clone());
                let yv = cx.tape.constant(y.clone());
                cross_attention(cx, &layer, &norm, zv, yv, None, 0.0)
            });
            assert_eq!(out.shape(), &[8, 3]);
            let expected = brute_cross_attention(&store, &layer, &z, &y);
            assert!(out.max_abs_diff(&expected) < 1e-10);
        }
    }

    /// Per-column loops, no tape: LN(z + Wo·concat_h(Σ_j softmax_j(q·k_j/√hd) v_j)).
    fn brute_cross_attention(store: &ParamStore, layer: &AttentionLayer, z: &Tensor, y: &Tensor) -> Tensor {
        let d = layer.dim;
        let hd = layer.head_dim();
        let q = store.value(layer.wq).matmul(z).unwrap();
        let k = store.value(layer.wk).matmul(y).unwrap();
        let v = store.value(layer.wv).matmul(y).unwrap();
        let (m, t) = (z.cols(), y.cols());
        let mut merged = vec![0.0; d * m];
        for h in 0..layer.heads {
            for i in 0..m {
                let s: Vec<f64> = (0..t)
                    .map(|j| (0..hd).map(|r| q.at(h * hd + r, i) * k.at(h * hd + r, j)).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                let tot: f64 = e.iter().sum();
                for r in 0..hd {
                    merged[(h * hd + r) * m + i] = (0..t).map(|j| e[j] / tot * v.at(h * hd + r, j)).sum();
                }
            }
        }
        let merged = Tensor::new(&[d, m], merged).unwrap();
        let o = store.value(layer.wo).matmul(&merged).unwrap();
        let mut out = vec![0.0; d * m];
        for i in 0..m {
            let col: Vec<f64> = (0..d).map(|r| z.at(r, i) + o.at(r, i)).collect();
            let mean = col.iter().sum::<f64>() / d as f64;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            for r in 0..d {
                out[r * m + i] = (col[r] - mean) / (var + 1e-5).sqrt();
            }
        }
        Tensor::new(&[d, m], out).unwrap()
    }

    #[test]
    fn adapter_identity_when_w2_zero_and_hand_case() {
        let mut store = ParamStore::new();
        let a = Adapter::new(&mut store, "ad", 4, 2, &mut rng(13));
        let z = Tensor::randn(&[4, 3], 1.0, &mut rng(14));
        let out = value_of(&store, |cx| {
            let zv = cx.tape.constant(z.clone());
            adapter_apply(cx, &a, zv, 0.0)
        });
        assert!(out.bitwise_eq(&z));

        let mut store = ParamStore::new();
        let a = Adapter::new(&mut store, "ad", 2, 1, &mut rng(15));
        store.set(a.w1, Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        store.set(a.w2, Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap()).unwrap();
        let z = Tensor::from_rows(&[vec![3.0], vec![5.0]]).unwrap();
        let out = value_of(&store, |cx| {
            let zv = cx.tape.constant(z.clone());
            adapter_apply(cx, &a, zv, 0.0)
        });
        assert_eq!(out.data(), &[6.0, 5.0]);
    }

    #[test]
    fn adapter_preserves_shape_for_any_length() {
        let mut store = ParamStore::new();
        let a = Adapter::new(&mut store, "ad", 8, 1, &mut rng(16));
        for k in [1usize, 4, 17] {
            let out = value_of(&store, |cx| {
                let zv = cx.tape.constant(Tensor::randn(&[8, k], 1.0, &mut rng(k as u64)));
                adapter_apply(cx, &a, zv, 0.0)
            });
            assert_eq!(out.shape(), &[8, k]);
        }
    }

    #[test]
    fn adapter_gradients() {
        let mut store = ParamStore::new();
        let a = Adapter::new(&mut store, "ad", 8, 1, &mut rng(17));
        // Move off the zero init so every path carries gradient.
        store.set(a.w2, Tensor::randn(&[8, 1], 0.5, &mut rng(18))).unwrap();
        store.set(a.w1, Tensor::randn(&[1, 8], 0.5, &mut rng(19))).unwrap();
        let z = Tensor::randn(&[8, 4], 1.0, &mut rng(20));
        let ids = [a.w1, a.b1, a.w2, a.b2];
        let r = check_param_grads(
            &store,
            &ids,
            |cx| {
                let zv = cx.tape.constant(z.clone());
                let y = adapter_apply(cx, &a, zv, 0.0)?;
                probe(cx, y, 21)
            },
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let r = grad_check(
            |tape, x| {
                let mut cx = Ctx::eval(tape, &store);
                let y = adapter_apply(&mut cx, &a, x, 0.0)?;
                probe(&mut cx, y, 21)
            },
            &z,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    fn lm_layer(store: &mut ParamStore, d: usize, heads: usize, seed: u64) -> LmLayer {
        let mut r = rng(seed);
        LmLayer {
            attention: AttentionLayer::new(store, "l.attn", d, heads, Group::Frozen, &mut r).unwrap(),
            ffn: FeedForward::new(store, "l.ffn", d, 2 * d, Group::Frozen, &mut r),
            norm1: LayerNorm::new(store, "l.ln1", d, Group::Frozen, 1e-5),
            norm2: LayerNorm::new(store, "l.ln2", d, Group::Frozen, 1e-5),
            adapter1: Some(Adapter::new(store, "l.ad1", d, 2, &mut r)),
            adapter2: Some(Adapter::new(store, "l.ad2", d, 2, &mut r)),
        }
    }

    #[test]
    fn zero_adapters_and_no_prompts_reduce_to_backbone_layer() {
        let mut store = ParamStore::new();
        let layer = lm_layer(&mut store, 8, 2, 22);
        let z = Tensor::randn(&[8, 5], 1.0, &mut rng(23));
        let adapted = value_of(&store, |cx| {
            let zv = cx.tape.constant(z.clone());
            lm_layer_forward(cx, &layer, zv, LayerInputs { use_adapters: true, ..Default::default() })
        });
        let bare = value_of(&store, |cx| {
            let zv = cx.tape.constant(z.clone());
            lm_layer_forward(cx, &layer, zv, LayerInputs::default())
        });
        assert!(adapted.bitwise_eq(&bare));
        assert_eq!(adapted.shape(), &[8, 5]);
    }

    #[test]
    fn layer_gradients_through_everything() {
        let mut store = ParamStore::new();
        let layer = lm_layer(&mut store, 8, 2, 24);
        for a in [&layer.adapter1, &layer.adapter2].into_iter().flatten() {
            store.set(a.w2, Tensor::randn(&[8, 2], 0.3, &mut rng(25))).unwrap();
        }
        let z = Tensor::randn(&[8, 4], 1.0, &mut rng(26));
        let pk = Tensor::randn(&[8, 3], 1.0, &mut rng(27));
        let pv = Tensor::randn(&[8, 3], 1.0, &mut rng(28));
        let pk_id = store.add("pk", Group::Prompt, pk);
        let pv_id = store.add("pv", Group::Prompt, pv);
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        let r = check_param_grads(
            &store,
            &ids,
            |cx| {
                let zv = cx.tape.constant(z.clone());
                let keys = cx.param(pk_id)?;
                let values = cx.param(pv_id)?;
                let y = lm_layer_forward(
                    cx,
                    &layer,
                    zv,
                    LayerInputs {
                        prompts: Some(PromptPair { keys, values }),
                        use_adapters: true,
                        ..Default::default()
                    },
                )?;
                probe(cx, y, 29)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn frozen_params_receive_no_gradient_in_trainable_pass() {
        let mut store = ParamStore::new();
        let layer = lm_layer(&mut store, 8, 2, 30);
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, GradGroups::TRAINABLE, None);
        let zv = cx.tape.constant(Tensor::randn(&[8, 4], 1.0, &mut rng(31)));
        let y = lm_layer_forward(&mut cx, &layer, zv, LayerInputs { use_adapters: true, ..Default::default() }).unwrap();
        let s = probe(&mut cx, y, 32).unwrap();
        let bindings = cx.bindings();
        let grads = tape.backward(s).unwrap();
        for (id, var) in bindings {
            let p = store.get(id).unwrap();
            assert_eq!(grads.get(var).is_some(), p.group != Group::Frozen, "{}", p.name);
        }
    }
}
