//! Image tokenizer: patch transformer encoder, factorised l2-normalised
//! vector quantiser, patch transformer decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, Dropout};
use crate::optim::{Adam, AdamConfig};
use crate::par::Exec;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const CODEBOOK: &str = "codebook";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub image_side: usize,
    pub patch: usize,
    pub enc_width: usize,
    pub dec_width: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            patch: 4,
            enc_width: 64,
            dec_width: 64,
            enc_layers: 1,
            dec_layers: 1,
            heads: 4,
            mlp_ratio: 2,
            code_dim: 8,
            codebook_size: 64,
        }
    }
}

impl TokenizerConfig {
    pub fn grid(&self) -> usize {
        self.image_side / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.patch > 0
            && self.image_side.is_multiple_of(self.patch)
            && self.heads > 0
            && self.enc_width.is_multiple_of(self.heads)
            && self.dec_width.is_multiple_of(self.heads)
            && self.code_dim > 0
            && self.codebook_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid tokenizer config {self:?}")))
        }
    }
}

/// Result of quantising a batch of code vectors on a tape.
pub struct Quantized {
    pub indices: Vec<usize>,
    pub z_q: Var,
    pub codebook_loss: Var,
    pub commitment_loss: Var,
}

/// Nearest codebook row for each unit-norm row of `zhat`; ties go to the
/// lowest index.
pub fn nearest_codes<T: Element>(codebook: &[T], k: usize, zhat: &[T], d: usize) -> Vec<usize> {
    zhat.chunks_exact(d)
        .map(|row| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for i in 0..k {
                let e = &codebook[i * d..(i + 1) * d];
                let dist: f64 = row.iter().zip(e).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Quantises `z: [n, d_c]` against `codebook: [K, d_c]`. `z_q` carries the
/// selected rows forward and passes gradients to `z` unchanged.
pub fn quantize<T: Element>(tape: &mut Tape<T>, codebook: Var, z: Var) -> Result<Quantized> {
    let zs = tape.value(z).shape().to_vec();
    let cs = tape.value(codebook).shape().to_vec();
    if zs.len() != 2 || cs.len() != 2 || zs[1] != cs[1] {
        return Err(Error::shape("quantize", format!("z {zs:?} vs codebook {cs:?}")));
    }
    if !tape.value(z).is_finite() {
        return Err(Error::Numeric("non-finite encoder output".into()));
    }
    let (n, d) = (zs[0], zs[1]);
    let zhat = tape.l2_normalize(z, 1, 0.0)?;
    let indices = nearest_codes(tape.value(codebook).data(), cs[0], tape.value(zhat).data(), d);
    let e = tape.gather(codebook, &indices, &[n])?;
    let e_val = tape.value(e).clone();
    let z_q = tape.straight_through(z, e_val.clone())?;

    let zhat_sg = tape.constant(tape.value(zhat).clone());
    let diff = tape.sub(zhat_sg, e)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq, None)?;
    let codebook_loss = tape.scale(s, 1.0 / n as f64)?;

    let e_sg = tape.constant(e_val);
    let diff = tape.sub(zhat, e_sg)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq, None)?;
    let commitment_loss = tape.scale(s, 1.0 / n as f64)?;
    Ok(Quantized { indices, z_q, codebook_loss, commitment_loss })
}

/// Usage statistics of a token stream over a vocabulary of `k` ids.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CodebookStats {
    pub usage_fraction: f64,
    pub perplexity: f64,
}

pub fn codebook_stats(stream: &[usize], k: usize) -> Result<CodebookStats> {
    if stream.is_empty() {
        return Err(Error::data("empty token stream"));
    }
    let mut counts = vec![0usize; k];
    for &t in stream {
        if t >= k {
            return Err(Error::data(format!("token {t} outside vocabulary of {k}")));
        }
        counts[t] += 1;
    }
    let n = stream.len() as f64;
    let used = counts.iter().filter(|&&c| c > 0).count();
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(CodebookStats { usage_fraction: used as f64 / k as f64, perplexity: entropy.exp() })
}

/// Rearranges an `H x W x 3` image into `[(H/P)*(W/P), P*P*3]` patches in
/// row-major grid order.
pub fn patchify(img: &Image, p: usize) -> Result<Vec<f32>> {
    let (h, w) = (img.height(), img.width());
    if h % p != 0 || w % p != 0 {
        return Err(Error::shape("patchify", format!("{h}x{w} not divisible by patch {p}")));
    }
    let mut out = Vec::with_capacity(h * w * 3);
    for gy in 0..h / p {
        for gx in 0..w / p {
            for y in 0..p {
                for x in 0..p {
                    out.extend_from_slice(&img.pixel(gy * p + y, gx * p + x));
                }
            }
        }
    }
    Ok(out)
}

pub fn unpatchify(patches: &[f32], side: usize, p: usize) -> Result<Image> {
    let g = side / p;
    let mut img = Image::filled(side, side, [0.0; 3]);
    for gy in 0..g {
        for gx in 0..g {
            let base = (gy * g + gx) * p * p * 3;
            for y in 0..p {
                for x in 0..p {
                    let i = base + (y * p + x) * 3;
                    img.set_pixel(gy * p + y, gx * p + x, [patches[i], patches[i + 1], patches[i + 2]]);
                }
            }
        }
    }
    Ok(img)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    pub params: ParamStore<f32>,
}

fn init_decoder(store: &mut ParamStore<f32>, cfg: &TokenizerConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.dec_width;
    nn::init_linear(store, "dec.in", cfg.code_dim, d, rng);
    store.init_trunc_normal("dec.pos", &[cfg.tokens(), d], nn::INIT_STD, rng);
    for l in 0..cfg.dec_layers {
        nn::init_block(store, &format!("dec.blocks.{l}"), d, d * cfg.mlp_ratio, false, rng);
    }
    nn::init_layer_norm(store, "dec.ln", d);
    nn::init_linear(store, "dec.out", d, cfg.patch_dim(), rng);
}

fn random_unit_rows(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k {
        let row: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        data.extend(row.iter().map(|v| (v / n) as f32));
    }
    Tensor::new(vec![k, d], data).expect("shape matches")
}

/// Rescales every listed codebook row to unit norm.
fn renormalize_rows(codebook: &mut Tensor<f32>, rows: impl IntoIterator<Item = usize>) {
    let d = codebook.shape()[1];
    let data = codebook.data_mut();
    for r in rows {
        let row = &mut data[r * d..(r + 1) * d];
        let n = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
        }
    }
}

impl Tokenizer {
    pub fn new(cfg: TokenizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = cfg.enc_width;
        nn::init_linear(&mut p, "enc.in", cfg.patch_dim(), d, &mut rng);
        p.init_trunc_normal("enc.pos", &[cfg.tokens(), d], nn::INIT_STD, &mut rng);
        for l in 0..cfg.enc_layers {
            nn::init_block(&mut p, &format!("enc.blocks.{l}"), d, d * cfg.mlp_ratio, false, &mut rng);
        }
        nn::init_layer_norm(&mut p, "enc.ln", d);
        nn::init_linear(&mut p, "enc.proj", d, cfg.code_dim, &mut rng);
        p.insert(CODEBOOK, random_unit_rows(cfg.codebook_size, cfg.code_dim, &mut rng));
        init_decoder(&mut p, &cfg, &mut rng);
        Ok(Self { cfg, params: p })
    }

    pub fn codebook(&self) -> &Tensor<f32> {
        self.params.get(CODEBOOK).expect("codebook present")
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let s = self.cfg.image_side;
        if img.height() != s || img.width() != s {
            return Err(Error::shape("tokenize", format!("expected {s}x{s}, got {}x{}", img.height(), img.width())));
        }
        Ok(())
    }

    fn patches(&self, imgs: &[&Image]) -> Result<Tensor<f32>> {
        let mut data = Vec::new();
        for img in imgs {
            self.check_image(img)?;
            data.extend(patchify(img, self.cfg.patch)?);
        }
        Tensor::new(vec![imgs.len(), self.cfg.tokens(), self.cfg.patch_dim()], data)
    }

    /// Encoder up to the projected (unnormalised) codes `[B * T, d_c]`.
    fn encode(&self, tape: &mut Tape<f32>, p: &Bound, x: Var, batch: usize) -> Result<Var> {
        let mut drop = Dropout::off();
        let h = nn::linear(tape, p, "enc.in", x)?;
        let mut h = tape.add(h, p.get("enc.pos")?)?;
        for l in 0..self.cfg.enc_layers {
            h = nn::block(tape, p, &format!("enc.blocks.{l}"), h, None, self.cfg.heads, None, &mut drop)?;
        }
        let h = nn::layer_norm(tape, p, "enc.ln", h)?;
        let z = nn::linear(tape, p, "enc.proj", h)?;
        tape.reshape(z, &[batch * self.cfg.tokens(), self.cfg.code_dim])
    }

    /// Decoder from codes `[B * T, d_c]` to patches `[B, T, P*P*3]`.
    fn decode(&self, tape: &mut Tape<f32>, p: &Bound, zq: Var, batch: usize) -> Result<Var> {
        let mut drop = Dropout::off();
        let t = self.cfg.tokens();
        let zq = tape.reshape(zq, &[batch, t, self.cfg.code_dim])?;
        let h = nn::linear(tape, p, "dec.in", zq)?;
        let mut h = tape.add(h, p.get("dec.pos")?)?;
        for l in 0..self.cfg.dec_layers {
            h = nn::block(tape, p, &format!("dec.blocks.{l}"), h, None, self.cfg.heads, None, &mut drop)?;
        }
        let h = nn::layer_norm(tape, p, "dec.ln", h)?;
        nn::linear(tape, p, "dec.out", h)
    }

    pub fn tokenize(&self, img: &Image) -> Result<Vec<u32>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let x = tape.constant(self.patches(&[img])?);
        let z = self.encode(&mut tape, &p, x, 1)?;
        let zhat = tape.l2_normalize(z, 1, 0.0)?;
        let cb = self.codebook();
        let idx = nearest_codes(cb.data(), self.cfg.codebook_size, tape.value(zhat).data(), self.cfg.code_dim);
        Ok(idx.into_iter().map(|i| i as u32).collect())
    }

    pub fn detokenize(&self, tokens: &[u32]) -> Result<Image> {
        let k = self.cfg.codebook_size;
        if tokens.len() != self.cfg.tokens() {
            return Err(Error::shape("detokenize", format!("expected {} tokens, got {}", self.cfg.tokens(), tokens.len())));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= k) {
            return Err(Error::data(format!("token id {bad} >= codebook size {k}")));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let e = tape.gather(p.get(CODEBOOK)?, &ids, &[ids.len()])?;
        let out = self.decode(&mut tape, &p, e, 1)?;
        Ok(unpatchify(tape.value(out).data(), self.cfg.image_side, self.cfg.patch)?.clamped())
    }

    pub fn tokenize_batch(&self, imgs: &[Image], exec: Exec) -> Result<Vec<Vec<u32>>> {
        exec.map(imgs, |im| self.tokenize(im)).into_iter().collect()
    }

    pub fn detokenize_batch(&self, grids: &[Vec<u32>], exec: Exec) -> Result<Vec<Image>> {
        exec.map(grids, |g| self.detokenize(g)).into_iter().collect()
    }

    pub fn reconstruct(&self, img: &Image) -> Result<Image> {
        self.detokenize(&self.tokenize(img)?)
    }

    /// Replaces the decoder with a freshly initialised one of width `width`.
    pub fn rebuild_decoder(&mut self, width: usize, layers: usize, seed: u64) -> Result<()> {
        let names: Vec<String> = self.params.names().filter(|n| n.starts_with("dec.")).map(String::from).collect();
        for n in names {
            self.params.remove(&n);
        }
        self.cfg.dec_width = width;
        self.cfg.dec_layers = layers;
        self.cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_decoder(&mut self.params, &self.cfg, &mut rng);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub beta_commit: f64,
    /// Reinitialise codes unused over this many steps from current encoder
    /// outputs; 0 disables.
    pub restart_every: usize,
    /// No restarts after this fraction of training.
    pub restart_until: f64,
    /// Train only the decoder with encoder and codebook frozen.
    pub decoder_only: bool,
    pub seed: u64,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            lr: 2e-3,
            warmup: 100,
            beta_commit: 0.25,
            restart_every: 100,
            restart_until: 0.5,
            decoder_only: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TokenizerStep {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub codebook_loss: f64,
    pub commitment_loss: f64,
}

/// Trains with `mse + codebook_loss + beta * commitment` and renormalises the
/// codebook rows touched by each step. `on_step` sees the tokenizer after
/// each update.
pub fn train_tokenizer(
    tok: &mut Tokenizer,
    images: &[Image],
    cfg: &TokenizerTrainConfig,
    mut on_step: impl FnMut(&Tokenizer, &TokenizerStep),
) -> Result<Vec<TokenizerStep>> {
    if images.is_empty() {
        return Err(Error::data("no training images"));
    }
    for im in images {
        tok.check_image(im)?;
    }
    let k = tok.cfg.codebook_size;
    let dc = tok.cfg.code_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, warmup: cfg.warmup, ..AdamConfig::default() });
    let mut used = vec![false; k];
    let mut history = Vec::with_capacity(cfg.steps);
    let decoder_only = cfg.decoder_only;
    for step in 0..cfg.steps {
        let batch: Vec<&Image> = (0..cfg.batch).map(|_| &images[rng.random_range(0..images.len())]).collect();
        let b = batch.len();
        let mut tape = Tape::new();
        let p = tok.params.bind(&mut tape, |n| !decoder_only || n.starts_with("dec."));
        let x_val = tok.patches(&batch)?;
        let x = tape.constant(x_val.clone());
        let z = tok.encode(&mut tape, &p, x, b)?;
        let q = quantize(&mut tape, p.get(CODEBOOK)?, z)?;
        let out = tok.decode(&mut tape, &p, q.z_q, b)?;
        let target = tape.constant(x_val);
        let diff = tape.sub(out, target)?;
        let sq = tape.mul(diff, diff)?;
        let recon = tape.mean(sq, None)?;
        let commit = tape.scale(q.commitment_loss, cfg.beta_commit)?;
        let loss = tape.add(recon, q.codebook_loss)?;
        let loss = tape.add(loss, commit)?;
        let loss_v = tape.value(loss).item() as f64;
        if !loss_v.is_finite() {
            return Err(Error::Numeric(format!("tokenizer loss is {loss_v} at step {step}")));
        }
        let mut g = tape.backward(loss)?;
        let grads = p.grads(&mut g);
        let before = tok.codebook().clone();
        adam.step(&mut tok.params, &grads)?;
        let cb = tok.params.get_mut(CODEBOOK)?;
        let changed: Vec<usize> = (0..k)
            .filter(|&r| cb.data()[r * dc..(r + 1) * dc] != before.data()[r * dc..(r + 1) * dc])
            .collect();
        renormalize_rows(cb, changed);

        for &i in &q.indices {
            used[i] = true;
        }
        let restart_active = !decoder_only
            && cfg.restart_every > 0
            && (step as f64) < cfg.restart_until * cfg.steps as f64
            && (step + 1) % cfg.restart_every == 0;
        if restart_active {
            let zhat = tape.value(z).data().to_vec();
            let n = zhat.len() / dc;
            let cb = tok.params.get_mut(CODEBOOK)?;
            let dead: Vec<usize> = (0..k).filter(|&i| !used[i]).collect();
            for &r in &dead {
                let src = rng.random_range(0..n);
                cb.data_mut()[r * dc..(r + 1) * dc].copy_from_slice(&zhat[src * dc..(src + 1) * dc]);
            }
            renormalize_rows(cb, dead);
            used.iter_mut().for_each(|u| *u = false);
        }

        let rec = TokenizerStep {
            step,
            loss: loss_v,
            recon: tape.value(recon).item() as f64,
            codebook_loss: tape.value(q.codebook_loss).item() as f64,
            commitment_loss: tape.value(q.commitment_loss).item() as f64,
        };
        on_step(tok, &rec);
        history.push(rec);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_distance_example() {
        let mut tape = Tape::<f64>::new();
        let cb = tape.leaf(Tensor::from_f64s(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap(), true);
        let z = tape.leaf(Tensor::from_f64s(&[1, 2], &[0.9, 0.1]).unwrap(), true);
        let q = quantize(&mut tape, cb, z).unwrap();
        assert_eq!(q.indices, vec![0]);
        let n = (0.82f64).sqrt();
        let zv = tape_l2(&mut tape, z);
        let zhat = tape.value(zv).data().to_vec();
        assert!((zhat[0] - 0.9 / n).abs() < 1e-12 && (zhat[1] - 0.1 / n).abs() < 1e-12);
    }

    fn tape_l2(tape: &mut Tape<f64>, z: Var) -> Var {
        tape.l2_normalize(z, 1, 0.0).unwrap()
    }

    #[test]
    fn exact_entry_gives_zero_losses() {
        let mut tape = Tape::<f64>::new();
        let cb = tape.leaf(Tensor::from_f64s(&[3, 2], &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap(), true);
        let z = tape.leaf(Tensor::from_f64s(&[1, 2], &[0.0, 1.0]).unwrap(), true);
        let q = quantize(&mut tape, cb, z).unwrap();
        assert_eq!(q.indices, vec![1]);
        assert_eq!(tape.value(q.codebook_loss).item(), 0.0);
        assert_eq!(tape.value(q.commitment_loss).item(), 0.0);
    }

    #[test]
    fn straight_through_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let cb = tape.leaf(Tensor::from_f64s(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap(), true);
        let z = tape.leaf(Tensor::from_f64s(&[2, 2], &[0.3, -2.0, 5.0, 0.1]).unwrap(), true);
        let q = quantize(&mut tape, cb, z).unwrap();
        let s = tape.sum(q.z_q, None).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(z).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn zero_row_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let cb = tape.leaf(Tensor::from_f64s(&[1, 2], &[1.0, 0.0]).unwrap(), true);
        let z = tape.leaf(Tensor::zeros(&[1, 2]), true);
        assert!(matches!(quantize(&mut tape, cb, z), Err(Error::Numeric(_))));
    }

    #[test]
    fn ties_take_lowest_index() {
        let cb = [1.0f64, 0.0, 0.0, 1.0];
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(nearest_codes(&cb, 2, &[s, s], 2), vec![0]);
    }

    #[test]
    fn stats_examples() {
        let s = codebook_stats(&[0, 1, 2, 3], 4).unwrap();
        assert_eq!(s.usage_fraction, 1.0);
        assert!((s.perplexity - 4.0).abs() < 1e-12);
        let s = codebook_stats(&[5; 10], 64).unwrap();
        assert_eq!((s.usage_fraction, s.perplexity), (1.0 / 64.0, 1.0));
        let s = codebook_stats(&[0, 0, 1], 4).unwrap();
        let want = (-(2.0 / 3.0 * (2.0f64 / 3.0).ln() + 1.0 / 3.0 * (1.0f64 / 3.0).ln())).exp();
        assert!((s.perplexity - want).abs() < 1e-12);
        assert!((s.perplexity - 1.8899).abs() < 1e-4);
    }

    #[test]
    fn patchify_round_trip() {
        let bytes: Vec<u8> = (0..8 * 8 * 3).map(|i| i as u8).collect();
        let img = Image::from_rgb8(8, 8, &bytes).unwrap();
        let p = patchify(&img, 4).unwrap();
        assert_eq!(&p[..3], &img.data()[..3]);
        assert_eq!(unpatchify(&p, 8, 4).unwrap(), img);
    }

    fn tiny() -> TokenizerConfig {
        TokenizerConfig { image_side: 8, patch: 4, enc_width: 8, dec_width: 8, heads: 2, codebook_size: 4, code_dim: 2, ..Default::default() }
    }

    #[test]
    fn tokenize_is_deterministic_and_in_range() {
        let tok = Tokenizer::new(tiny(), 1).unwrap();
        let img = Image::filled(8, 8, [0.0; 3]);
        let a = tok.tokenize(&img).unwrap();
        assert_eq!(a, tok.tokenize(&img).unwrap());
        assert!(a.iter().all(|&t| t < 4));
        let out = tok.detokenize(&a).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(tok.detokenize(&[0, 1, 2, 4]).is_err());
        assert!(tok.tokenize(&Image::filled(6, 6, [0.0; 3])).is_err());
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut tok = Tokenizer::new(tiny(), 2).unwrap();
        let before = tok.params.clone();
        let imgs = vec![Image::filled(8, 8, [0.2; 3]), Image::filled(8, 8, [0.9; 3])];
        let cfg = TokenizerTrainConfig { steps: 3, batch: 2, lr: 0.0, restart_every: 0, ..Default::default() };
        train_tokenizer(&mut tok, &imgs, &cfg, |_, _| {}).unwrap();
        assert_eq!(tok.params, before);
    }
}
