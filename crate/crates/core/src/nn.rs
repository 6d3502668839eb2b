//! Transformer building blocks shared by the tokenizer, the text-to-image
//! model and the dual encoder. Parameters are addressed by dotted names.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;
const MASK_FILL: f64 = -1e9;

/// Dropout configuration for one forward pass. A rate of zero never touches
/// the generator.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Dropout<'static> {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn apply<T: Element>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else { return Ok(x) };
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - self.rate));
        let shape = tape.value(x).shape().to_vec();
        let n = tape.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < self.rate { T::zero() } else { keep })
            .collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }
}

/// Attention mask where `allowed[q * keys + k]` permits query `q` to see key
/// `k`.
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub blocked: Arc<[bool]>,
    pub queries: usize,
    pub keys: usize,
}

impl AttnMask {
    pub fn from_allowed(allowed: &[bool], queries: usize, keys: usize) -> Self {
        assert_eq!(allowed.len(), queries * keys);
        Self { blocked: allowed.iter().map(|a| !a).collect(), queries, keys }
    }
}

pub fn init_linear<T: Element>(store: &mut ParamStore<T>, prefix: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) {
    store.init_trunc_normal(&format!("{prefix}.w"), &[din, dout], INIT_STD, rng);
    store.init_const(&format!("{prefix}.b"), &[dout], 0.0);
}

pub fn init_layer_norm<T: Element>(store: &mut ParamStore<T>, prefix: &str, d: usize) {
    store.init_const(&format!("{prefix}.g"), &[d], 1.0);
    store.init_const(&format!("{prefix}.b"), &[d], 0.0);
}

pub fn init_attention<T: Element>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    // keys carry no bias: softmax is invariant to it
    init_linear(store, &format!("{prefix}.q"), d, d, rng);
    store.init_trunc_normal(&format!("{prefix}.k.w"), &[d, d], INIT_STD, rng);
    init_linear(store, &format!("{prefix}.v"), d, d, rng);
    init_linear(store, &format!("{prefix}.o"), d, d, rng);
}

/// Pre-norm block: self-attention, optional cross-attention, MLP.
pub fn init_block<T: Element>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    d_mlp: usize,
    cross: bool,
    rng: &mut ChaCha8Rng,
) {
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    init_attention(store, &format!("{prefix}.attn"), d, rng);
    if cross {
        init_layer_norm(store, &format!("{prefix}.ln2"), d);
        init_attention(store, &format!("{prefix}.xattn"), d, rng);
    }
    init_layer_norm(store, &format!("{prefix}.ln3"), d);
    init_linear(store, &format!("{prefix}.fc1"), d, d_mlp, rng);
    init_linear(store, &format!("{prefix}.fc2"), d_mlp, d, rng);
}

pub fn linear<T: Element>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

pub fn layer_norm<T: Element>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let axis = tape.value(x).rank() - 1;
    let y = tape.layer_norm(x, axis, LN_EPS)?;
    let y = tape.mul(y, p.get(&format!("{prefix}.g"))?)?;
    tape.add(y, p.get(&format!("{prefix}.b"))?)
}

/// Multi-head attention of `q_in: [B, Lq, d]` over `kv_in: [B, Lk, d]`.
pub fn attention<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    mask: Option<&AttnMask>,
) -> Result<Var> {
    let qs = tape.value(q_in).shape().to_vec();
    let ks = tape.value(kv_in).shape().to_vec();
    let (b, lq, d) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    let dh = d / heads;
    let q = linear(tape, p, &format!("{prefix}.q"), q_in)?;
    let q = tape.scale(q, 1.0 / (dh as f64).sqrt())?;
    let k = tape.matmul(kv_in, p.get(&format!("{prefix}.k.w"))?)?;
    let v = linear(tape, p, &format!("{prefix}.v"), kv_in)?;
    let q = tape.reshape(q, &[b, lq, heads, dh])?;
    let q = tape.transpose(q, 1, 2)?;
    let k = tape.reshape(k, &[b, lk, heads, dh])?;
    let k = tape.transpose(k, 1, 2)?;
    let kt = tape.transpose(k, 2, 3)?;
    let v = tape.reshape(v, &[b, lk, heads, dh])?;
    let v = tape.transpose(v, 1, 2)?;
    let mut scores = tape.matmul(q, kt)?;
    if let Some(m) = mask {
        scores = tape.masked_fill(scores, m.blocked.clone(), &[m.queries, m.keys], MASK_FILL)?;
    }
    let probs = tape.softmax(scores, 3)?;
    let out = tape.matmul(probs, v)?;
    let out = tape.transpose(out, 1, 2)?;
    let out = tape.reshape(out, &[b, lq, d])?;
    linear(tape, p, &format!("{prefix}.o"), out)
}

pub fn mlp<T: Element>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, p, &format!("{prefix}.fc1"), x)?;
    let h = tape.gelu(h)?;
    linear(tape, p, &format!("{prefix}.fc2"), h)
}

/// Pre-norm transformer block. `ctx` enables cross-attention.
#[allow(clippy::too_many_arguments)]
pub fn block<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    ctx: Option<Var>,
    heads: usize,
    mask: Option<&AttnMask>,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let h = layer_norm(tape, p, &format!("{prefix}.ln1"), x)?;
    let h = attention(tape, p, &format!("{prefix}.attn"), h, h, heads, mask)?;
    let h = drop.apply(tape, h)?;
    let mut x = tape.add(x, h)?;
    if let Some(ctx) = ctx {
        let h = layer_norm(tape, p, &format!("{prefix}.ln2"), x)?;
        let h = attention(tape, p, &format!("{prefix}.xattn"), h, ctx, heads, None)?;
        let h = drop.apply(tape, h)?;
        x = tape.add(x, h)?;
    }
    let h = layer_norm(tape, p, &format!("{prefix}.ln3"), x)?;
    let h = mlp(tape, p, prefix, h)?;
    let h = drop.apply(tape, h)?;
    tape.add(x, h)
}

/// Number of parameters in one block with width `d` and hidden `d_mlp`.
pub fn block_param_count(d: usize, d_mlp: usize, cross: bool) -> usize {
    let attn = 4 * d * d + 3 * d;
    let ln = 2 * d;
    let mlp = d * d_mlp + d_mlp + d_mlp * d + d;
    let base = ln + attn + ln + mlp;
    if cross {
        base + ln + attn
    } else {
        base
    }
}
