//! Transformer encoder building blocks: multi-head self-attention,
//! position-wise feed-forward, residual + layer-norm sublayers, sinusoidal
//! positional encodings, and boolean attention masks.
//!
//! Sublayers use the post-norm ordering, i.e. `LayerNorm(sublayer(x) + x)`.
//! Positional encodings are added once at the stack input, never inside
//! layers, so a stack without them is permutation-equivariant.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, TensorId};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask: expected {expected} entries for {n} tokens, got {got}")]
    WrongSize { n: usize, expected: usize, got: usize },
    #[error("mask: row {row} has no allowed positions")]
    EmptyRow { row: usize },
    #[error("mask: token {row} must be allowed to attend to itself")]
    MissingDiagonal { row: usize },
}

/// Boolean n x n attention mask; `allowed[i*n+j]` says token i may attend
/// to token j. Every row has at least one allowed position and the
/// diagonal is always allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n: usize, allowed: Vec<bool>) -> Result<Self, MaskError> {
        if allowed.len() != n * n {
            return Err(MaskError::WrongSize { n, expected: n * n, got: allowed.len() });
        }
        for i in 0..n {
            if !allowed[i * n + i] {
                return Err(MaskError::MissingDiagonal { row: i });
            }
            if !allowed[i * n..(i + 1) * n].iter().any(|&a| a) {
                return Err(MaskError::EmptyRow { row: i });
            }
        }
        Ok(AttentionMask { n, allowed })
    }

    /// All-pairs attention.
    pub fn full(n: usize) -> Self {
        AttentionMask { n, allowed: vec![true; n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// The mask for the token order `perm`, where `perm[i]` is the original
    /// index of the token now at position i.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, MaskError> {
        let n = self.n;
        if perm.len() != n {
            return Err(MaskError::WrongSize { n, expected: n, got: perm.len() });
        }
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allowed[i * n + j] = self.allows(perm[i], perm[j]);
            }
        }
        AttentionMask::new(n, allowed)
    }
}

/// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(...), with
/// positions counted from 0. `d` must be even.
pub fn sinusoidal_positional_encoding(n: usize, d: usize) -> Result<Tensor, TensorError> {
    if !d.is_multiple_of(2) {
        return Err(TensorError::ShapeMismatch {
            op: "positional_encoding",
            detail: format!("dimension must be even, got {d}"),
        });
    }
    Tensor::from_fn(n, d, |pos, j| {
        let i = j / 2;
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Parameters of one encoder layer: h per-head q/k/v projections (d x d_h),
/// the output projection (d x d), the two-layer feed-forward net, and two
/// layer-norm gain/bias pairs.
#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    pub w_o: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

/// Uniform init in ±sqrt(6 / (fan_in + fan_out)). Values are rounded
/// through f32 so that serialized parameters round-trip exactly.
pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound) as f32 as f64)
        .expect("finite init")
}

impl EncoderLayerParams {
    pub fn init(d: usize, heads: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        let d_h = d / heads;
        EncoderLayerParams {
            w_q: (0..heads).map(|_| glorot(d, d_h, &mut *rng)).collect(),
            w_k: (0..heads).map(|_| glorot(d, d_h, &mut *rng)).collect(),
            w_v: (0..heads).map(|_| glorot(d, d_h, &mut *rng)).collect(),
            w_o: glorot(d, d, &mut *rng),
            ffn_w1: glorot(d, d_ff, &mut *rng),
            ffn_b1: Tensor::zeros(1, d_ff),
            ffn_w2: glorot(d_ff, d, &mut *rng),
            ffn_b2: Tensor::zeros(1, d),
            ln1_gain: Tensor::from_fn(1, d, |_, _| 1.0).expect("ones"),
            ln1_bias: Tensor::zeros(1, d),
            ln2_gain: Tensor::from_fn(1, d, |_, _| 1.0).expect("ones"),
            ln2_bias: Tensor::zeros(1, d),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> EncoderLayerIds {
        EncoderLayerIds {
            w_q: self.w_q.iter().map(|t| tape.param(t)).collect(),
            w_k: self.w_k.iter().map(|t| tape.param(t)).collect(),
            w_v: self.w_v.iter().map(|t| tape.param(t)).collect(),
            w_o: tape.param(&self.w_o),
            ffn_w1: tape.param(&self.ffn_w1),
            ffn_b1: tape.param(&self.ffn_b1),
            ffn_w2: tape.param(&self.ffn_w2),
            ffn_b2: tape.param(&self.ffn_b2),
            ln1_gain: tape.param(&self.ln1_gain),
            ln1_bias: tape.param(&self.ln1_bias),
            ln2_gain: tape.param(&self.ln2_gain),
            ln2_bias: tape.param(&self.ln2_bias),
        }
    }

    pub(crate) fn tensors(&self) -> Vec<(&'static str, usize, &Tensor)> {
        let mut out = Vec::new();
        for (h, t) in self.w_q.iter().enumerate() {
            out.push(("w_q", h, t));
        }
        for (h, t) in self.w_k.iter().enumerate() {
            out.push(("w_k", h, t));
        }
        for (h, t) in self.w_v.iter().enumerate() {
            out.push(("w_v", h, t));
        }
        out.push(("w_o", 0, &self.w_o));
        out.push(("ffn_w1", 0, &self.ffn_w1));
        out.push(("ffn_b1", 0, &self.ffn_b1));
        out.push(("ffn_w2", 0, &self.ffn_w2));
        out.push(("ffn_b2", 0, &self.ffn_b2));
        out.push(("ln1_gain", 0, &self.ln1_gain));
        out.push(("ln1_bias", 0, &self.ln1_bias));
        out.push(("ln2_gain", 0, &self.ln2_gain));
        out.push(("ln2_bias", 0, &self.ln2_bias));
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<(&'static str, usize, &mut Tensor)> {
        let mut out = Vec::new();
        for (h, t) in self.w_q.iter_mut().enumerate() {
            out.push(("w_q", h, t));
        }
        for (h, t) in self.w_k.iter_mut().enumerate() {
            out.push(("w_k", h, t));
        }
        for (h, t) in self.w_v.iter_mut().enumerate() {
            out.push(("w_v", h, t));
        }
        out.push(("w_o", 0, &mut self.w_o));
        out.push(("ffn_w1", 0, &mut self.ffn_w1));
        out.push(("ffn_b1", 0, &mut self.ffn_b1));
        out.push(("ffn_w2", 0, &mut self.ffn_w2));
        out.push(("ffn_b2", 0, &mut self.ffn_b2));
        out.push(("ln1_gain", 0, &mut self.ln1_gain));
        out.push(("ln1_bias", 0, &mut self.ln1_bias));
        out.push(("ln2_gain", 0, &mut self.ln2_gain));
        out.push(("ln2_bias", 0, &mut self.ln2_bias));
        out
    }
}

/// Tape handles for one registered layer.
pub struct EncoderLayerIds {
    pub w_q: Vec<TensorId>,
    pub w_k: Vec<TensorId>,
    pub w_v: Vec<TensorId>,
    pub w_o: TensorId,
    pub ffn_w1: TensorId,
    pub ffn_b1: TensorId,
    pub ffn_w2: TensorId,
    pub ffn_b2: TensorId,
    pub ln1_gain: TensorId,
    pub ln1_bias: TensorId,
    pub ln2_gain: TensorId,
    pub ln2_bias: TensorId,
}

impl EncoderLayerIds {
    pub(crate) fn flat(&self) -> Vec<TensorId> {
        let mut out = Vec::new();
        out.extend(&self.w_q);
        out.extend(&self.w_k);
        out.extend(&self.w_v);
        out.extend([
            self.w_o,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
            self.ln1_gain,
            self.ln1_bias,
            self.ln2_gain,
            self.ln2_bias,
        ]);
        out
    }
}

/// A stack of identical encoder layers.
#[derive(Clone, Debug)]
pub struct EncoderStackParams {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: Vec<EncoderLayerParams>,
}

impl EncoderStackParams {
    pub fn init(d: usize, heads: usize, d_ff: usize, n_layers: usize, rng: &mut impl Rng) -> Result<Self, TensorError> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(TensorError::ShapeMismatch {
                op: "encoder_stack",
                detail: format!("{heads} heads must divide width {d}"),
            });
        }
        Ok(EncoderStackParams {
            d,
            heads,
            d_ff,
            layers: (0..n_layers).map(|_| EncoderLayerParams::init(d, heads, d_ff, &mut *rng)).collect(),
        })
    }

    pub fn register(&self, tape: &mut Tape) -> EncoderStackIds {
        EncoderStackIds { layers: self.layers.iter().map(|l| l.register(tape)).collect() }
    }
}

pub struct EncoderStackIds {
    pub layers: Vec<EncoderLayerIds>,
}

impl EncoderStackIds {
    pub(crate) fn flat(&self) -> Vec<TensorId> {
        self.layers.iter().flat_map(|l| l.flat()).collect()
    }
}

/// Multi-head self-attention (Q = K = V = x). Returns the output and the
/// per-head attention-weight matrices so mask behaviour can be inspected.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: TensorId,
    mask: &AttentionMask,
    p: &EncoderLayerIds,
) -> Result<(TensorId, Vec<TensorId>), TensorError> {
    let (n, _) = tape.shape(x);
    if mask.n() != n {
        return Err(TensorError::ShapeMismatch {
            op: "multi_head_attention",
            detail: format!("mask covers {} tokens, input has {n}", mask.n()),
        });
    }
    let d_h = tape.shape(p.w_q[0]).1;
    let inv_sqrt = 1.0 / (d_h as f64).sqrt();
    let mut heads = Vec::with_capacity(p.w_q.len());
    let mut weights = Vec::with_capacity(p.w_q.len());
    for i in 0..p.w_q.len() {
        let q = tape.matmul(x, p.w_q[i])?;
        let k = tape.matmul(x, p.w_k[i])?;
        let v = tape.matmul(x, p.w_v[i])?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let scaled = tape.scale(logits, inv_sqrt)?;
        let attn = tape.softmax(scaled, Some(mask.as_slice()))?;
        let head = tape.matmul(attn, v)?;
        heads.push(head);
        weights.push(attn);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = tape.matmul(cat, p.w_o)?;
    Ok((out, weights))
}

/// max{0, xW1 + b1} W2 + b2, applied per position.
pub fn feed_forward(tape: &mut Tape, x: TensorId, p: &EncoderLayerIds) -> Result<TensorId, TensorError> {
    let h = tape.matmul(x, p.ffn_w1)?;
    let h = tape.add_row(h, p.ffn_b1)?;
    let h = tape.relu(h)?;
    let out = tape.matmul(h, p.ffn_w2)?;
    tape.add_row(out, p.ffn_b2)
}

/// One layer: x' = LN(MHA(x) + x), x'' = LN(FFN(x') + x').
pub fn encoder_layer(
    tape: &mut Tape,
    x: TensorId,
    mask: &AttentionMask,
    p: &EncoderLayerIds,
) -> Result<(TensorId, Vec<TensorId>), TensorError> {
    let (attn_out, weights) = multi_head_attention(tape, x, mask, p)?;
    let res1 = tape.add(attn_out, x)?;
    let x1 = tape.layer_norm(res1, p.ln1_gain, p.ln1_bias, LAYER_NORM_EPS)?;
    let ffn_out = feed_forward(tape, x1, p)?;
    let res2 = tape.add(ffn_out, x1)?;
    let x2 = tape.layer_norm(res2, p.ln2_gain, p.ln2_bias, LAYER_NORM_EPS)?;
    Ok((x2, weights))
}

/// Apply all layers with the same mask. Also returns the attention
/// matrices per layer and head. A 0-layer stack is the identity.
pub fn encoder_stack(
    tape: &mut Tape,
    x: TensorId,
    mask: &AttentionMask,
    stack: &EncoderStackIds,
) -> Result<(TensorId, Vec<Vec<TensorId>>), TensorError> {
    let mut cur = x;
    let mut trace = Vec::with_capacity(stack.layers.len());
    for layer in &stack.layers {
        let (next, weights) = encoder_layer(tape, cur, mask, layer)?;
        cur = next;
        trace.push(weights);
    }
    Ok((cur, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }

    fn random_input(rng: &mut StdRng, n: usize, d: usize) -> Tensor {
        Tensor::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn positional_encoding_first_row_alternates_zero_one() {
        let pe = sinusoidal_positional_encoding(3, 6).unwrap();
        for j in 0..6 {
            let want = if j % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe.get(0, j), want);
        }
    }

    #[test]
    fn positional_encoding_second_row_analytic() {
        let pe = sinusoidal_positional_encoding(2, 4).unwrap();
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (j, w) in want.iter().enumerate() {
            assert!((pe.get(1, j) - w).abs() < 1e-15);
        }
    }

    #[test]
    fn positional_encoding_is_bounded() {
        let pe = sinusoidal_positional_encoding(1000, 512).unwrap();
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn positional_encoding_rejects_odd_dim() {
        assert!(sinusoidal_positional_encoding(4, 5).is_err());
    }

    #[test]
    fn mask_invariants_are_enforced() {
        assert!(AttentionMask::new(2, vec![true; 3]).is_err());
        // missing diagonal
        assert!(matches!(
            AttentionMask::new(2, vec![false, true, true, true]),
            Err(MaskError::MissingDiagonal { row: 0 })
        ));
        let ok = AttentionMask::new(2, vec![true, false, false, true]).unwrap();
        assert!(ok.allows(0, 0) && !ok.allows(0, 1));
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let mut r = rng(1);
        let p = EncoderLayerParams::init(4, 1, 8, &mut r);
        let x = random_input(&mut r, 1, 4);
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let ix = tape.leaf(&x);
        let (out, weights) = multi_head_attention(&mut tape, ix, &AttentionMask::full(1), &ids).unwrap();
        assert_eq!(tape.data(weights[0]), &[1.0]);
        // output = x W^v W^o
        let mut check = Tape::new();
        let cx = check.leaf(&x);
        let cv = check.leaf(&p.w_v[0]);
        let co = check.leaf(&p.w_o);
        let xv = check.matmul(cx, cv).unwrap();
        let want = check.matmul(xv, co).unwrap();
        for (a, b) in tape.data(out).iter().zip(check.data(want)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let mut r = rng(2);
        let p = EncoderLayerParams::init(4, 2, 8, &mut r);
        let row: Vec<f64> = (0..4).map(|j| 0.3 * (j as f64 + 1.0)).collect();
        let x = Tensor::new(2, 4, [row.clone(), row].concat()).unwrap();
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let ix = tape.leaf(&x);
        let (_, weights) = multi_head_attention(&mut tape, ix, &AttentionMask::full(2), &ids).unwrap();
        for &w in &weights {
            for v in tape.data(w) {
                assert!((v - 0.5).abs() < 1e-12);
            }
        }
    }

    /// Straight-line re-implementation of multi-head attention with plain
    /// loops, used as an independent oracle.
    fn mha_oracle(x: &Tensor, mask: &AttentionMask, p: &EncoderLayerParams) -> Vec<f64> {
        let n = x.rows();
        let d = x.cols();
        let h = p.w_q.len();
        let d_h = d / h;
        let matmul = |a: &[f64], b: &Tensor, m: usize, k: usize| -> Vec<f64> {
            let mut out = vec![0.0; m * b.cols()];
            for i in 0..m {
                for j in 0..b.cols() {
                    for t in 0..k {
                        out[i * b.cols() + j] += a[i * k + t] * b.get(t, j);
                    }
                }
            }
            out
        };
        let mut heads = Vec::new();
        for head in 0..h {
            let q = matmul(x.data(), &p.w_q[head], n, d);
            let k = matmul(x.data(), &p.w_k[head], n, d);
            let v = matmul(x.data(), &p.w_v[head], n, d);
            let mut out = vec![0.0; n * d_h];
            for i in 0..n {
                let mut logits = vec![f64::NEG_INFINITY; n];
                for j in 0..n {
                    if mask.allows(i, j) {
                        let mut dot = 0.0;
                        for t in 0..d_h {
                            dot += q[i * d_h + t] * k[j * d_h + t];
                        }
                        logits[j] = dot / (d_h as f64).sqrt();
                    }
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| if l.is_finite() { (l - max).exp() } else { 0.0 }).collect();
                let sum: f64 = exps.iter().sum();
                for j in 0..n {
                    let w = exps[j] / sum;
                    for t in 0..d_h {
                        out[i * d_h + t] += w * v[j * d_h + t];
                    }
                }
            }
            heads.push(out);
        }
        let mut cat = vec![0.0; n * d];
        for (hi, head) in heads.iter().enumerate() {
            for i in 0..n {
                for t in 0..d_h {
                    cat[i * d + hi * d_h + t] = head[i * d_h + t];
                }
            }
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                for t in 0..d {
                    out[i * d + j] += cat[i * d + t] * p.w_o.get(t, j);
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_straight_line_oracle() {
        let mut r = rng(3);
        let p = EncoderLayerParams::init(4, 2, 8, &mut r);
        let x = random_input(&mut r, 3, 4);
        let mask = AttentionMask::new(
            3,
            vec![
                true, true, false, //
                true, true, true, //
                false, true, true,
            ],
        )
        .unwrap();
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let ix = tape.leaf(&x);
        let (out, _) = multi_head_attention(&mut tape, ix, &mask, &ids).unwrap();
        let want = mha_oracle(&x, &mask, &p);
        for (a, b) in tape.data(out).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_masked_entries_are_zero() {
        let mut r = rng(4);
        let p = EncoderLayerParams::init(6, 2, 8, &mut r);
        let x = random_input(&mut r, 4, 6);
        let mut allowed = vec![true; 16];
        allowed[1] = false; // token 0 may not see token 1
        allowed[11] = false; // token 2 may not see token 3
        let mask = AttentionMask::new(4, allowed).unwrap();
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let ix = tape.leaf(&x);
        let (_, weights) = multi_head_attention(&mut tape, ix, &mask, &ids).unwrap();
        for &w in &weights {
            let data = tape.data(w);
            for i in 0..4 {
                let row = &data[i * 4..(i + 1) * 4];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert_eq!(data[1], 0.0);
            assert_eq!(data[11], 0.0);
        }
    }

    #[test]
    fn dead_relu_feed_forward_outputs_bias() {
        let mut r = rng(5);
        let mut p = EncoderLayerParams::init(4, 2, 6, &mut r);
        p.ffn_w1 = Tensor::zeros(4, 6);
        p.ffn_b1 = Tensor::zeros(1, 6);
        p.ffn_b2 = Tensor::row(vec![1.5, -0.5, 0.25, 2.0]).unwrap();
        let x = random_input(&mut r, 3, 4);
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let ix = tape.leaf(&x);
        let out = feed_forward(&mut tape, ix, &ids).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(tape.data(out)[i * 4 + j], p.ffn_b2.get(0, j));
            }
        }
    }

    #[test]
    fn feed_forward_is_position_wise() {
        let mut r = rng(6);
        let p = EncoderLayerParams::init(4, 2, 6, &mut r);
        let x = random_input(&mut r, 3, 4);
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let ix = tape.leaf(&x);
        let full = feed_forward(&mut tape, ix, &ids).unwrap();
        // row 1 alone gives the same values
        let row = x.slice_rows(1, 1).unwrap();
        let ir = tape.leaf(&row);
        let single = feed_forward(&mut tape, ir, &ids).unwrap();
        for j in 0..4 {
            assert!((tape.data(full)[4 + j] - tape.data(single)[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn feed_forward_matches_loop_oracle() {
        let mut r = rng(7);
        let p = EncoderLayerParams::init(4, 2, 6, &mut r);
        let x = random_input(&mut r, 3, 4);
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let ix = tape.leaf(&x);
        let out = feed_forward(&mut tape, ix, &ids).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mut want = p.ffn_b2.get(0, j);
                for t in 0..6 {
                    let mut pre = p.ffn_b1.get(0, t);
                    for u in 0..4 {
                        pre += x.get(i, u) * p.ffn_w1.get(u, t);
                    }
                    want += pre.max(0.0) * p.ffn_w2.get(t, j);
                }
                assert!((tape.data(out)[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_layer_preserves_shape() {
        let mut r = rng(8);
        let p = EncoderLayerParams::init(6, 2, 10, &mut r);
        for n in [1, 2, 5] {
            let x = random_input(&mut r, n, 6);
            let mut tape = Tape::new();
            let ids = p.register(&mut tape);
            let ix = tape.leaf(&x);
            let (out, _) = encoder_layer(&mut tape, ix, &AttentionMask::full(n), &ids).unwrap();
            assert_eq!(tape.shape(out), (n, 6));
        }
    }

    #[test]
    fn encoder_layer_is_permutation_equivariant_without_positions() {
        let mut r = rng(9);
        let p = EncoderLayerParams::init(4, 2, 8, &mut r);
        let x = random_input(&mut r, 4, 4);
        let mask = AttentionMask::new(
            4,
            vec![
                true, true, false, true, //
                true, true, true, false, //
                false, true, true, true, //
                true, false, true, true,
            ],
        )
        .unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted_x = Tensor::from_fn(4, 4, |i, j| x.get(perm[i], j)).unwrap();
        let permuted_mask = mask.permuted(&perm).unwrap();

        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let ix = tape.leaf(&x);
        let (base, _) = encoder_layer(&mut tape, ix, &mask, &ids).unwrap();
        let ipx = tape.leaf(&permuted_x);
        let (permuted, _) = encoder_layer(&mut tape, ipx, &permuted_mask, &ids).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let a = tape.data(permuted)[i * 4 + j];
                let b = tape.data(base)[perm[i] * 4 + j];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_token_cannot_influence_other_rows() {
        let mut r = rng(10);
        let p = EncoderLayerParams::init(4, 2, 8, &mut r);
        let x = random_input(&mut r, 3, 4);
        // nobody but token 1 itself may look at token 1
        let mask = AttentionMask::new(
            3,
            vec![
                true, false, true, //
                true, true, true, //
                true, false, true,
            ],
        )
        .unwrap();
        let mut perturbed = x.clone();
        for j in 0..4 {
            perturbed.data_mut()[4 + j] += 0.37 * (j as f64 + 1.0);
        }
        let mut tape = Tape::new();
        let ids = p.register(&mut tape);
        let ix = tape.leaf(&x);
        let (base, _) = encoder_layer(&mut tape, ix, &mask, &ids).unwrap();
        let ip = tape.leaf(&perturbed);
        let (moved, _) = encoder_layer(&mut tape, ip, &mask, &ids).unwrap();
        for i in [0usize, 2] {
            for j in 0..4 {
                assert_eq!(tape.data(base)[i * 4 + j], tape.data(moved)[i * 4 + j]);
            }
        }
    }

    #[test]
    fn zero_layer_stack_is_identity_and_one_layer_matches_layer() {
        let mut r = rng(11);
        let stack1 = EncoderStackParams::init(4, 2, 8, 1, &mut r).unwrap();
        let x = random_input(&mut r, 3, 4);
        let mask = AttentionMask::full(3);

        let mut tape = Tape::new();
        let empty = EncoderStackIds { layers: vec![] };
        let ix = tape.leaf(&x);
        let (same, trace) = encoder_stack(&mut tape, ix, &mask, &empty).unwrap();
        assert_eq!(same, ix);
        assert!(trace.is_empty());

        let ids = stack1.register(&mut tape);
        let (via_stack, _) = encoder_stack(&mut tape, ix, &mask, &ids).unwrap();
        let (via_layer, _) = encoder_layer(&mut tape, ix, &mask, &ids.layers[0]).unwrap();
        assert_eq!(tape.data(via_stack), tape.data(via_layer));
    }

    #[test]
    fn two_layer_stack_is_composition() {
        let mut r = rng(12);
        let stack = EncoderStackParams::init(4, 2, 8, 2, &mut r).unwrap();
        let x = random_input(&mut r, 3, 4);
        let mask = AttentionMask::full(3);
        let mut tape = Tape::new();
        let ids = stack.register(&mut tape);
        let ix = tape.leaf(&x);
        let (stacked, _) = encoder_stack(&mut tape, ix, &mask, &ids).unwrap();
        let (first, _) = encoder_layer(&mut tape, ix, &mask, &ids.layers[0]).unwrap();
        let (second, _) = encoder_layer(&mut tape, first, &mask, &ids.layers[1]).unwrap();
        assert_eq!(tape.data(stacked), tape.data(second));
    }

    #[test]
    fn stack_gradient_matches_finite_differences() {
        let mut r = rng(13);
        let stack = EncoderStackParams::init(4, 2, 6, 2, &mut r).unwrap();
        let x = random_input(&mut r, 3, 4);
        let target = random_input(&mut r, 3, 4);
        let mask = AttentionMask::full(3);

        let eval = |input: &Tensor| {
            let mut tape = Tape::new();
            let ids = stack.register(&mut tape);
            let ix = tape.param(input);
            let (out, _) = encoder_stack(&mut tape, ix, &mask, &ids).unwrap();
            let t = tape.leaf(&target);
            let loss = tape.mse(out, t).unwrap();
            (tape, ix, loss)
        };
        let (mut tape, ix, loss) = eval(&x);
        tape.backward(loss).unwrap();
        let analytic = tape.grad_or_zeros(ix);

        let h = 1e-5;
        for k in 0..x.numel() {
            let mut plus = x.clone();
            plus.data_mut()[k] += h;
            let mut minus = x.clone();
            minus.data_mut()[k] -= h;
            let (tp, _, lp) = eval(&plus);
            let (tm, _, lm) = eval(&minus);
            let fd = (tp.data(lp)[0] - tm.data(lm)[0]) / (2.0 * h);
            let rel = (analytic[k] - fd).abs() / analytic[k].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "coord {k}: analytic {} vs fd {fd}", analytic[k]);
        }
    }
}
