//! Encoder-decoder transformer from text tokens to image tokens.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, AttnMask, Dropout};
use crate::optim::{adafactor_step, AdafactorConfig, Adam, AdamConfig, LrSchedule, OptimizerState};
use crate::params::{Bound, ParamStore};
use crate::tensor::{grad_check, Element, Tape, Tensor, Var};
use crate::textproc::{BOS, EOS, PAD, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub heads: usize,
    pub text_vocab: usize,
    pub image_vocab: usize,
    pub text_len: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub cond_dropout: f64,
    pub conv_kernel: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 4,
            d_model: 64,
            d_mlp: 256,
            heads: 4,
            text_vocab: 512,
            image_vocab: 64,
            text_len: 32,
            grid_h: 8,
            grid_w: 8,
            cond_dropout: 0.1,
            conv_kernel: 3,
            dropout: 0.1,
        }
    }
}

/// Published size variants: name, encoder layers, decoder layers, width,
/// MLP width, heads, nominal parameter count.
pub const PRESETS: [(&str, usize, usize, usize, usize, usize, f64); 4] = [
    ("350M", 12, 12, 1024, 4096, 16, 350e6),
    ("750M", 12, 36, 1024, 4096, 16, 750e6),
    ("3B", 12, 36, 2048, 8192, 32, 3e9),
    ("20B", 16, 64, 4096, 16384, 64, 20e9),
];

impl ModelConfig {
    /// Full-size configuration for a named preset (never instantiated in
    /// tests; used for parameter accounting).
    pub fn preset(name: &str) -> Result<Self> {
        let (_, enc, dec, d, mlp, heads, _) = PRESETS
            .iter()
            .copied()
            .find(|p| p.0 == name)
            .ok_or_else(|| Error::contract(format!("unknown preset `{name}`")))?;
        Ok(Self {
            enc_layers: enc,
            dec_layers: dec,
            d_model: d,
            d_mlp: mlp,
            heads,
            text_vocab: 16_000,
            image_vocab: 8192,
            text_len: 128,
            grid_h: 32,
            grid_w: 32,
            ..Self::default()
        })
    }

    pub fn image_len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("heads {} must divide d_model {}", self.heads, self.d_model));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.d_mlp == 0 {
            return bad("layer counts and d_mlp must be positive".into());
        }
        if self.text_len == 0 || self.text_len > 128 || self.image_len() == 0 {
            return bad(format!("text_len {} must be in 1..=128 and the grid nonempty", self.text_len));
        }
        if self.text_vocab <= UNK as usize || self.image_vocab < 2 {
            return bad("vocabularies too small".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) || !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout rates out of range".into());
        }
        Ok(())
    }

    /// Transformer-layer parameters, excluding embeddings and the output
    /// projection.
    pub fn non_embedding_params(&self) -> usize {
        let d = self.d_model;
        self.enc_layers * nn::block_param_count(d, self.d_mlp, false)
            + self.dec_layers * nn::block_param_count(d, self.d_mlp, true)
            + 4 * d
    }

    pub fn embedding_params(&self) -> usize {
        let d = self.d_model;
        (self.text_vocab + self.text_len + self.image_vocab + 1 + self.image_len()) * d + d * self.image_vocab + self.image_vocab
    }

    pub fn total_params(&self) -> usize {
        self.non_embedding_params() + self.embedding_params()
    }
}

/// Causal mask restricted to a Chebyshev window of radius `(k - 1) / 2` on
/// the image grid, row-major `[image_len, image_len]`.
pub fn conv_sparse_mask(grid_h: usize, grid_w: usize, k: usize) -> Result<Vec<bool>> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::contract(format!("conv kernel {k} must be odd and positive")));
    }
    let r = (k - 1) / 2;
    let n = grid_h * grid_w;
    let mut m = vec![false; n * n];
    for i in 0..n {
        let (ri, ci) = (i / grid_w, i % grid_w);
        for j in 0..=i {
            let (rj, cj) = (j / grid_w, j % grid_w);
            if ri.abs_diff(rj) <= r && ci.abs_diff(cj) <= r {
                m[i * n + j] = true;
            }
        }
    }
    Ok(m)
}

/// Right-pads (or truncates, keeping EOS last) to exactly `len` ids.
pub fn pad_text(ids: &[u32], len: usize) -> Vec<u32> {
    let mut v: Vec<u32> = ids.iter().copied().take(len).collect();
    if ids.len() > len && len > 0 {
        v[len - 1] = EOS;
    }
    v.resize(len, PAD);
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2Seq {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
}

/// Initialises the text embedding, positional table and encoder stack under
/// the names shared with the contrastive text tower.
pub fn init_text_encoder<T: Element>(
    p: &mut ParamStore<T>,
    vocab: usize,
    text_len: usize,
    layers: usize,
    d: usize,
    d_mlp: usize,
    rng: &mut ChaCha8Rng,
) {
    p.init_trunc_normal("text.emb", &[vocab, d], nn::INIT_STD, rng);
    p.init_trunc_normal("text.pos", &[text_len, d], nn::INIT_STD, rng);
    for l in 0..layers {
        nn::init_block(p, &format!("enc.blocks.{l}"), d, d_mlp, false, rng);
    }
    nn::init_layer_norm(p, "enc.ln", d);
}

/// Text encoder over padded ids `[batch, len]`, returning `[batch, len, d]`.
#[allow(clippy::too_many_arguments)]
pub fn encode_text<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    layers: usize,
    heads: usize,
    ids: &[u32],
    batch: usize,
    len: usize,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let h = tape.gather(p.get("text.emb")?, &idx, &[batch, len])?;
    let mut h = tape.add(h, p.get("text.pos")?)?;
    for l in 0..layers {
        h = nn::block(tape, p, &format!("enc.blocks.{l}"), h, None, heads, None, drop)?;
    }
    nn::layer_norm(tape, p, "enc.ln", h)
}

pub fn build_model(cfg: ModelConfig, seed: u64) -> Result<Seq2Seq> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let d = cfg.d_model;
    init_text_encoder(&mut p, cfg.text_vocab, cfg.text_len, cfg.enc_layers, d, cfg.d_mlp, &mut rng);
    p.init_trunc_normal("img.emb", &[cfg.image_vocab + 1, d], nn::INIT_STD, &mut rng);
    p.init_trunc_normal("img.pos", &[cfg.image_len(), d], nn::INIT_STD, &mut rng);
    for l in 0..cfg.dec_layers {
        nn::init_block(&mut p, &format!("dec.blocks.{l}"), d, cfg.d_mlp, true, &mut rng);
    }
    nn::init_layer_norm(&mut p, "dec.ln", d);
    nn::init_linear(&mut p, "head", d, cfg.image_vocab, &mut rng);
    Ok(Seq2Seq { cfg, params: p })
}

fn check_batch(cfg: &ModelConfig, text: &[Vec<u32>], image: &[Vec<u32>]) -> Result<()> {
    if text.is_empty() || text.len() != image.len() {
        return Err(Error::shape("forward_loss", format!("{} texts vs {} images", text.len(), image.len())));
    }
    for t in text {
        if t.len() != cfg.text_len {
            return Err(Error::shape("forward_loss", format!("text length {} != {}", t.len(), cfg.text_len)));
        }
        if let Some(&bad) = t.iter().find(|&&i| i as usize >= cfg.text_vocab) {
            return Err(Error::data(format!("text id {bad} outside vocabulary {}", cfg.text_vocab)));
        }
    }
    for im in image {
        if im.len() != cfg.image_len() {
            return Err(Error::shape("forward_loss", format!("image length {} != {}", im.len(), cfg.image_len())));
        }
        if let Some(&bad) = im.iter().find(|&&i| i as usize >= cfg.image_vocab) {
            return Err(Error::data(format!("image id {bad} outside vocabulary {}", cfg.image_vocab)));
        }
    }
    Ok(())
}

/// Decoder logits `[batch * image_len, K]` for teacher-forced inputs
/// (`BOS` followed by all but the last target).
pub fn decoder_logits<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    ctx: Var,
    image: &[Vec<u32>],
    mask: &AttnMask,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let b = image.len();
    let n = cfg.image_len();
    let bos = cfg.image_vocab;
    let mut inputs = Vec::with_capacity(b * n);
    for im in image {
        inputs.push(bos);
        inputs.extend(im[..n - 1].iter().map(|&t| t as usize));
    }
    let h = tape.gather(p.get("img.emb")?, &inputs, &[b, n])?;
    let mut h = tape.add(h, p.get("img.pos")?)?;
    for l in 0..cfg.dec_layers {
        h = nn::block(tape, p, &format!("dec.blocks.{l}"), h, Some(ctx), cfg.heads, Some(mask), drop)?;
    }
    let h = nn::layer_norm(tape, p, "dec.ln", h)?;
    let logits = nn::linear(tape, p, "head", h)?;
    tape.reshape(logits, &[b * n, cfg.image_vocab])
}

/// Decoder self-attention mask for `cfg`.
pub fn decoder_mask(cfg: &ModelConfig) -> Result<AttnMask> {
    let n = cfg.image_len();
    Ok(AttnMask::from_allowed(&conv_sparse_mask(cfg.grid_h, cfg.grid_w, cfg.conv_kernel)?, n, n))
}

/// Applies conditioning dropout: one uniform draw per example; examples
/// below `rate` get an all-PAD text.
pub fn drop_conditions(text: &[Vec<u32>], rate: f64, rng: &mut impl Rng) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.iter().map(Vec::len).sum());
    for t in text {
        let u: f64 = rng.random();
        if u < rate {
            out.extend(std::iter::repeat_n(PAD, t.len()));
        } else {
            out.extend_from_slice(t);
        }
    }
    out
}

/// Teacher-forced next-token cross-entropy, averaged over positions and
/// batch. Conditioning dropout and then activation dropout draw from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn forward_loss<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    text: &[Vec<u32>],
    image: &[Vec<u32>],
    rng: &mut ChaCha8Rng,
    cond_dropout: f64,
    dropout: f64,
) -> Result<Var> {
    check_batch(cfg, text, image)?;
    let b = text.len();
    let ids = drop_conditions(text, cond_dropout, rng);
    let mut drop = Dropout { rate: dropout, rng: (dropout > 0.0).then_some(rng) };
    let ctx = encode_text(tape, p, cfg.enc_layers, cfg.heads, &ids, b, cfg.text_len, &mut drop)?;
    let mask = decoder_mask(cfg)?;
    let logits = decoder_logits(tape, p, cfg, ctx, image, &mask, &mut drop)?;
    let targets: Vec<usize> = image.iter().flat_map(|im| im.iter().map(|&t| t as usize)).collect();
    tape.cross_entropy(logits, &targets, None)
}

impl Seq2Seq {
    /// Loss value without recording gradients.
    pub fn eval_loss(&self, text: &[Vec<u32>], image: &[Vec<u32>], seed: u64, cond_dropout: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = forward_loss(&mut tape, &p, &self.cfg, text, image, &mut rng, cond_dropout, 0.0)?;
        Ok(tape.value(l).item() as f64)
    }

    /// Full-sequence logits `[image_len, K]` for one example, no dropout.
    pub fn logits(&self, text: &[u32], image: &[u32]) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let text = vec![text.to_vec()];
        let image = vec![image.to_vec()];
        check_batch(&self.cfg, &text, &image)?;
        let ctx = encode_text(&mut tape, &p, self.cfg.enc_layers, self.cfg.heads, &text[0], 1, self.cfg.text_len, &mut Dropout::off())?;
        let mask = decoder_mask(&self.cfg)?;
        let l = decoder_logits(&mut tape, &p, &self.cfg, ctx, &image, &mask, &mut Dropout::off())?;
        Ok(tape.value(l).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub base_lr: f64,
    pub optimizer: Option<AdafactorConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 20_000, batch: 4, seed: 0, base_lr: 1e-3, optimizer: None }
    }
}

impl TrainConfig {
    /// Explicit optimizer settings, or the preset ones with the schedule
    /// rescaled to `steps` at `base_lr`.
    pub fn adafactor(&self) -> AdafactorConfig {
        self.optimizer.unwrap_or_else(|| AdafactorConfig {
            schedule: LrSchedule::scaled(self.steps as u64, self.base_lr),
            ..AdafactorConfig::default()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainStep {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// One optimizer step on a batch; returns the loss before the update.
pub fn train_step(
    model: &mut Seq2Seq,
    state: &mut OptimizerState,
    opt: &AdafactorConfig,
    text: &[Vec<u32>],
    image: &[Vec<u32>],
    rng: &mut ChaCha8Rng,
) -> Result<TrainStep> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, |_| true);
    let cfg = model.cfg.clone();
    let loss = forward_loss(&mut tape, &p, &cfg, text, image, rng, cfg.cond_dropout, cfg.dropout)?;
    let lv = tape.value(loss).item() as f64;
    if !lv.is_finite() {
        return Err(Error::Numeric(format!("loss is {lv}")));
    }
    let mut g = tape.backward(loss)?;
    let grads = p.grads(&mut g);
    drop(tape);
    let step = state.step as usize;
    let rep = adafactor_step(&mut model.params, &grads, state, opt)?;
    if !model.params.all_finite() {
        return Err(Error::Numeric(format!("non-finite weights after step {step}")));
    }
    Ok(TrainStep { step, loss: lv, lr: rep.lr, grad_norm: rep.grad_norm })
}

/// Trains on `(text, image)` pairs sampled uniformly with replacement.
pub fn train(
    model: &mut Seq2Seq,
    data: &[(Vec<u32>, Vec<u32>)],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&Seq2Seq, &TrainStep),
) -> Result<Vec<TrainStep>> {
    if data.is_empty() {
        return Err(Error::data("no training pairs"));
    }
    let opt = cfg.adafactor();
    let mut state = OptimizerState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut hist = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (text, image): (Vec<_>, Vec<_>) =
            (0..cfg.batch).map(|_| data[rng.random_range(0..data.len())].clone()).unzip();
        let rec = train_step(model, &mut state, &opt, &text, &image, &mut rng)?;
        on_step(model, &rec);
        hist.push(rec);
    }
    Ok(hist)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub mask_rate: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 1000, batch: 16, mask_rate: 0.15, lr: 1e-3, seed: 0 }
    }
}

const MLM_HEAD: &str = "mlm.head";

fn is_text_encoder_param(name: &str) -> bool {
    name.starts_with("text.") || name.starts_with("enc.")
}

/// Masked-token pretraining of the text encoder. Masked positions are
/// replaced with `UNK`; a temporary prediction head is trained alongside and
/// discarded. Batches without masked positions record loss 0 and skip the
/// update.
pub fn pretrain_text_encoder(model: &mut Seq2Seq, corpus: &[Vec<u32>], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::data("empty pretraining corpus"));
    }
    let mc = model.cfg.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: ParamStore<f32> = ParamStore::new();
    for (k, v) in model.params.iter().filter(|(k, _)| is_text_encoder_param(k)) {
        work.insert(k, v.clone());
    }
    nn::init_linear(&mut work, MLM_HEAD, mc.d_model, mc.text_vocab, &mut rng);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, warmup: 50, ..AdamConfig::default() });
    let mut hist = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut ids = Vec::with_capacity(cfg.batch * mc.text_len);
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for _ in 0..cfg.batch {
            let t = pad_text(&corpus[rng.random_range(0..corpus.len())], mc.text_len);
            for &tok in &t {
                let maskable = ![PAD, BOS, EOS].contains(&tok);
                let masked = maskable && rng.random::<f64>() < cfg.mask_rate;
                ids.push(if masked { UNK } else { tok });
                targets.push(tok as usize);
                weights.push(if masked { 1.0 } else { 0.0 });
            }
        }
        if weights.iter().all(|&w| w == 0.0) {
            hist.push(0.0);
            continue;
        }
        let mut tape = Tape::new();
        let p = work.bind(&mut tape, |_| true);
        let h = encode_text(&mut tape, &p, mc.enc_layers, mc.heads, &ids, cfg.batch, mc.text_len, &mut Dropout::off())?;
        let logits = nn::linear(&mut tape, &p, MLM_HEAD, h)?;
        let logits = tape.reshape(logits, &[cfg.batch * mc.text_len, mc.text_vocab])?;
        let loss = tape.cross_entropy(logits, &targets, Some(&weights))?;
        let lv = tape.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("pretraining loss is {lv}")));
        }
        let mut g = tape.backward(loss)?;
        adam.step(&mut work, &p.grads(&mut g))?;
        hist.push(lv);
    }
    work.remove(&format!("{MLM_HEAD}.w"));
    work.remove(&format!("{MLM_HEAD}.b"));
    for (k, v) in work.iter() {
        model.params.insert(k, v.clone());
    }
    Ok(hist)
}

/// Per-tensor gradients of the loss for a fixed rng seed, in f64.
pub fn loss_grads_f64(
    model: &Seq2Seq,
    text: &[Vec<u32>],
    image: &[Vec<u32>],
    seed: u64,
) -> Result<(f64, IndexMap<String, Tensor<f64>>)> {
    let params = model.params.cast::<f64>();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = forward_loss(&mut tape, &p, &model.cfg, text, image, &mut rng, model.cfg.cond_dropout, model.cfg.dropout)?;
    let mut g = tape.backward(l)?;
    Ok((tape.value(l).item(), p.grads(&mut g)))
}

/// Worst relative error of the loss gradient against central differences,
/// over every parameter element, in 64-bit. Dropout masks are replayed from
/// `seed` on every evaluation.
pub fn loss_grad_check(model: &Seq2Seq, text: &[Vec<u32>], image: &[Vec<u32>], seed: u64, eps: f64) -> Result<f64> {
    let params = model.params.cast::<f64>();
    let mut worst = 0.0f64;
    for (name, value) in params.iter() {
        let e = grad_check(
            |tape, v| {
                let mut p = params.bind(tape, |_| false);
                p.insert(name, v);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                forward_loss(tape, &p, &model.cfg, text, image, &mut rng, model.cfg.cond_dropout, model.cfg.dropout)
            },
            value,
            eps,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Id of the image begin-of-sequence token (one past the codebook).
pub fn image_bos(cfg: &ModelConfig) -> u32 {
    cfg.image_vocab as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_examples() {
        assert_eq!(conv_sparse_mask(2, 2, 1).unwrap(), vec![true, false, false, false, false, true, false, false, false, false, true, false, false, false, false, true]);
        let m = conv_sparse_mask(3, 3, 3).unwrap();
        let row4: Vec<usize> = (0..9).filter(|&j| m[4 * 9 + j]).collect();
        assert_eq!(row4, vec![0, 1, 2, 3, 4]);
        assert!(conv_sparse_mask(3, 3, 2).is_err());
    }

    #[test]
    fn table_rows_and_counts() {
        let c = ModelConfig::preset("350M").unwrap();
        assert_eq!((c.enc_layers, c.dec_layers, c.d_model, c.d_mlp, c.heads), (12, 12, 1024, 4096, 16));
        let rel = (c.non_embedding_params() as f64 - 350e6).abs() / 350e6;
        assert!(rel < 0.05, "{}", c.non_embedding_params());
    }

    #[test]
    fn count_matches_built_model() {
        let cfg = ModelConfig { d_model: 8, d_mlp: 16, heads: 2, enc_layers: 1, dec_layers: 1, text_vocab: 20, image_vocab: 5, text_len: 4, grid_h: 2, grid_w: 2, ..Default::default() };
        let m = build_model(cfg.clone(), 0).unwrap();
        assert_eq!(m.params.numel(), cfg.total_params());
        assert_eq!(m.params, build_model(cfg.clone(), 0).unwrap().params);
        assert!(build_model(ModelConfig { heads: 3, ..cfg }, 0).is_err());
    }

    #[test]
    fn pad_text_keeps_eos() {
        assert_eq!(pad_text(&[1, 9, 9, 2], 6), vec![1, 9, 9, 2, 0, 0]);
        assert_eq!(pad_text(&[1, 9, 9, 9, 2], 3), vec![1, 9, 2]);
    }
}
