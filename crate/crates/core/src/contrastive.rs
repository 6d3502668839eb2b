//! Dual image-text encoder trained with a symmetric in-batch contrastive
//! objective. Used as the reranking scorer, as a retrieval baseline and as a
//! feature extractor for FID.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, Dropout};
use crate::optim::{Adam, AdamConfig};
use crate::par::Exec;
use crate::params::{Bound, ParamStore};
use crate::seq2seq::{encode_text, init_text_encoder, pad_text};
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::textproc::PAD;
use crate::vq::patchify;

pub const TAU: &str = "tau";
pub const TAU_MIN: f64 = 1.0;
pub const TAU_MAX: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualEncoderConfig {
    pub d_model: usize,
    pub d_mlp: usize,
    pub heads: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub embed_dim: usize,
    pub image_side: usize,
    pub patch: usize,
    pub text_vocab: usize,
    pub text_len: usize,
    pub tau_init: f64,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_mlp: 256,
            heads: 4,
            image_layers: 2,
            text_layers: 2,
            embed_dim: 32,
            image_side: 32,
            patch: 8,
            text_vocab: 512,
            text_len: 32,
            tau_init: 1.0 / 0.07,
        }
    }
}

impl DualEncoderConfig {
    pub fn tokens(&self) -> usize {
        (self.image_side / self.patch).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_side.is_multiple_of(self.patch) {
            return Err(Error::contract(format!("patch {} must divide image side {}", self.patch, self.image_side)));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::contract(format!("heads {} must divide d_model {}", self.heads, self.d_model)));
        }
        if self.embed_dim == 0 || self.text_len == 0 || self.text_vocab == 0 {
            return Err(Error::contract("embed_dim, text_len and text_vocab must be positive"));
        }
        if !(TAU_MIN..=TAU_MAX).contains(&self.tau_init) {
            return Err(Error::contract(format!("tau_init {} outside [{TAU_MIN}, {TAU_MAX}]", self.tau_init)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    pub cfg: DualEncoderConfig,
    pub params: ParamStore<f32>,
}

/// Image patches `[B, T, P*P*3]` for a batch of renders.
fn patch_tensor<T: Element>(cfg: &DualEncoderConfig, imgs: &[&Image]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(imgs.len() * cfg.image_side * cfg.image_side * 3);
    for img in imgs {
        if img.height() != cfg.image_side || img.width() != cfg.image_side {
            return Err(Error::shape("dual_encoder", format!("expected {0}x{0} image", cfg.image_side)));
        }
        data.extend(patchify(img, cfg.patch)?.into_iter().map(|v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(vec![imgs.len(), cfg.tokens(), cfg.patch * cfg.patch * 3], data)
}

/// Mean-pooled image tower features `[B, d_model]`.
fn image_pooled<T: Element>(tape: &mut Tape<T>, p: &Bound, cfg: &DualEncoderConfig, patches: Tensor<T>) -> Result<Var> {
    let x = tape.constant(patches);
    let h = nn::linear(tape, p, "img.in", x)?;
    let mut h = tape.add(h, p.get("img.pos")?)?;
    for l in 0..cfg.image_layers {
        h = nn::block(tape, p, &format!("img.blocks.{l}"), h, None, cfg.heads, None, &mut Dropout::off())?;
    }
    let h = nn::layer_norm(tape, p, "img.ln", h)?;
    tape.mean(h, Some(1))
}

/// Text tower features `[B, d_model]`, averaged over non-PAD positions.
fn text_pooled<T: Element>(tape: &mut Tape<T>, p: &Bound, cfg: &DualEncoderConfig, texts: &[&[u32]]) -> Result<Var> {
    let b = texts.len();
    let len = cfg.text_len;
    let mut ids = Vec::with_capacity(b * len);
    let mut pool = Vec::with_capacity(b * len);
    for t in texts {
        if let Some(&bad) = t.iter().find(|&&i| i as usize >= cfg.text_vocab) {
            return Err(Error::data(format!("text id {bad} outside vocabulary {}", cfg.text_vocab)));
        }
        let padded = pad_text(t, len);
        let n = padded.iter().filter(|&&i| i != PAD).count().max(1);
        pool.extend(padded.iter().map(|&i| if i == PAD { T::zero() } else { T::from_f64_lossy(1.0 / n as f64) }));
        ids.extend(padded);
    }
    let h = encode_text(tape, p, cfg.text_layers, cfg.heads, &ids, b, len, &mut Dropout::off())?;
    let w = tape.constant(Tensor::new(vec![b, 1, len], pool)?);
    let pooled = tape.matmul(w, h)?;
    tape.reshape(pooled, &[b, cfg.d_model])
}

fn project<T: Element>(tape: &mut Tape<T>, p: &Bound, prefix: &str, pooled: Var) -> Result<Var> {
    let e = nn::linear(tape, p, prefix, pooled)?;
    tape.l2_normalize(e, 1, 0.0)
}

/// Symmetric in-batch cross-entropy over the temperature-scaled cosine
/// similarity matrix; row `i` of both inputs is a matched pair.
pub fn contrastive_loss<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &DualEncoderConfig,
    patches: Tensor<T>,
    texts: &[&[u32]],
) -> Result<Var> {
    let b = texts.len();
    if b < 2 {
        return Err(Error::contract("contrastive loss needs at least two pairs per batch"));
    }
    if patches.shape()[0] != b {
        return Err(Error::shape("contrastive_loss", format!("{} images vs {b} texts", patches.shape()[0])));
    }
    let pi = image_pooled(tape, p, cfg, patches)?;
    let ei = project(tape, p, "img.proj", pi)?;
    let pt = text_pooled(tape, p, cfg, texts)?;
    let et = project(tape, p, "txt.proj", pt)?;
    let ett = tape.transpose(et, 0, 1)?;
    let sims = tape.matmul(ei, ett)?;
    let flat = tape.reshape(sims, &[b * b, 1])?;
    let scaled = tape.matmul(flat, p.get(TAU)?)?;
    let logits = tape.reshape(scaled, &[b, b])?;
    let targets: Vec<usize> = (0..b).collect();
    let i2t = tape.cross_entropy(logits, &targets, None)?;
    let lt = tape.transpose(logits, 0, 1)?;
    let t2i = tape.cross_entropy(lt, &targets, None)?;
    let sum = tape.add(i2t, t2i)?;
    tape.scale(sum, 0.5)
}

impl DualEncoder {
    pub fn new(cfg: DualEncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = cfg.d_model;
        nn::init_linear(&mut p, "img.in", cfg.patch * cfg.patch * 3, d, &mut rng);
        p.init_trunc_normal("img.pos", &[cfg.tokens(), d], nn::INIT_STD, &mut rng);
        for l in 0..cfg.image_layers {
            nn::init_block(&mut p, &format!("img.blocks.{l}"), d, cfg.d_mlp, false, &mut rng);
        }
        nn::init_layer_norm(&mut p, "img.ln", d);
        nn::init_linear(&mut p, "img.proj", d, cfg.embed_dim, &mut rng);
        init_text_encoder(&mut p, cfg.text_vocab, cfg.text_len, cfg.text_layers, d, cfg.d_mlp, &mut rng);
        nn::init_linear(&mut p, "txt.proj", d, cfg.embed_dim, &mut rng);
        p.init_const(TAU, &[1, 1], cfg.tau_init);
        Ok(Self { cfg, params: p })
    }

    pub fn tau(&self) -> f64 {
        self.params.get(TAU).map(|t| t.data()[0] as f64).unwrap_or(f64::NAN)
    }

    /// Unit-norm image embeddings, one per image.
    pub fn embed_images(&self, imgs: &[Image], exec: Exec) -> Result<Vec<Vec<f32>>> {
        exec.map(imgs, |img| {
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, |_| false);
            let pooled = image_pooled(&mut tape, &p, &self.cfg, patch_tensor(&self.cfg, &[img])?)?;
            let e = project(&mut tape, &p, "img.proj", pooled)?;
            Ok(tape.value(e).data().to_vec())
        })
        .into_iter()
        .collect()
    }

    /// Unit-norm text embeddings for `BOS .. EOS` id sequences.
    pub fn embed_texts(&self, texts: &[Vec<u32>], exec: Exec) -> Result<Vec<Vec<f32>>> {
        exec.map(texts, |t| {
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, |_| false);
            let pooled = text_pooled(&mut tape, &p, &self.cfg, &[t])?;
            let e = project(&mut tape, &p, "txt.proj", pooled)?;
            Ok(tape.value(e).data().to_vec())
        })
        .into_iter()
        .collect()
    }

    /// Pooled image-tower features before projection, used for FID.
    pub fn image_features(&self, img: &Image) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let pooled = image_pooled(&mut tape, &p, &self.cfg, patch_tensor(&self.cfg, &[img])?)?;
        Ok(tape.value(pooled).data().iter().map(|&v| v as f64).collect())
    }

    /// Cosine of the projected image and text embeddings.
    pub fn alignment_score(&self, img: &Image, text: &[u32]) -> Result<f64> {
        let ei = self.embed_images(std::slice::from_ref(img), Exec::Sequential)?;
        let et = self.embed_texts(&[text.to_vec()], Exec::Sequential)?;
        Ok(cosine(&ei[0], &et[0]))
    }

    /// Loss on an explicit batch without updating the weights.
    pub fn batch_loss(&self, imgs: &[&Image], texts: &[&[u32]]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let l = contrastive_loss(&mut tape, &p, &self.cfg, patch_tensor(&self.cfg, imgs)?, texts)?;
        Ok(tape.value(l).item() as f64)
    }
}

/// Dot product of unit vectors accumulated in f64, clamped to `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub seed: u64,
}

impl Default for ContrastiveTrainConfig {
    fn default() -> Self {
        Self { steps: 4000, batch: 32, lr: 1e-3, warmup: 100, seed: 0 }
    }
}

/// Trains on `(image, text ids)` pairs. Each batch draws distinct pairs so
/// in-batch negatives never repeat the positive. Returns the loss history.
pub fn train_contrastive(
    enc: &mut DualEncoder,
    pairs: &[(Image, Vec<u32>)],
    cfg: &ContrastiveTrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if cfg.batch < 2 {
        return Err(Error::contract(format!("batch {} has no negatives", cfg.batch)));
    }
    if pairs.len() < cfg.batch {
        return Err(Error::data(format!("{} pairs cannot fill a batch of {}", pairs.len(), cfg.batch)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, warmup: cfg.warmup, ..AdamConfig::default() });
    let mut hist = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = index::sample(&mut rng, pairs.len(), cfg.batch);
        let imgs: Vec<&Image> = idx.iter().map(|i| &pairs[i].0).collect();
        let texts: Vec<&[u32]> = idx.iter().map(|i| pairs[i].1.as_slice()).collect();
        let mut tape = Tape::new();
        let p = enc.params.bind(&mut tape, |_| true);
        let loss = contrastive_loss(&mut tape, &p, &enc.cfg, patch_tensor(&enc.cfg, &imgs)?, &texts)?;
        let lv = tape.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("contrastive loss is {lv}")));
        }
        let mut g = tape.backward(loss)?;
        adam.step(&mut enc.params, &p.grads(&mut g))?;
        let tau = enc.params.get_mut(TAU)?;
        let t = tau.data()[0].clamp(TAU_MIN as f32, TAU_MAX as f32);
        tau.data_mut()[0] = t;
        on_step(step, lv);
        hist.push(lv);
    }
    Ok(hist)
}

/// Unit-norm image embeddings with their identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    pub ids: Vec<u64>,
    pub dim: usize,
    pub rows: Vec<f32>,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

/// Embeds `images`, identified by their position.
pub fn build_index(enc: &DualEncoder, images: &[Image], exec: Exec) -> Result<RetrievalIndex> {
    if images.is_empty() {
        return Err(Error::contract("cannot index an empty image set"));
    }
    let emb = enc.embed_images(images, exec)?;
    Ok(RetrievalIndex { ids: (0..images.len() as u64).collect(), dim: enc.cfg.embed_dim, rows: emb.concat() })
}

/// Exact top-`k` identifiers by cosine with `query`, descending, ties broken
/// by the lower identifier.
pub fn search(index: &RetrievalIndex, query: &[f32], k: usize) -> Result<Vec<u64>> {
    if k == 0 || k > index.len() {
        return Err(Error::contract(format!("k={k} outside 1..={}", index.len())));
    }
    if query.len() != index.dim {
        return Err(Error::shape("retrieve_nearest", format!("query dim {} vs index dim {}", query.len(), index.dim)));
    }
    let mut scored: Vec<(f64, u64)> = (0..index.len()).map(|i| (cosine(index.row(i), query), index.ids[i])).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id).collect())
}

pub fn retrieve_nearest(enc: &DualEncoder, index: &RetrievalIndex, text: &[u32], k: usize) -> Result<Vec<u64>> {
    let q = enc.embed_texts(&[text.to_vec()], Exec::Sequential)?;
    search(index, &q[0], k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DualEncoderConfig {
        DualEncoderConfig {
            d_model: 8,
            d_mlp: 16,
            heads: 2,
            image_layers: 1,
            text_layers: 1,
            embed_dim: 4,
            image_side: 8,
            patch: 4,
            text_vocab: 12,
            text_len: 6,
            ..Default::default()
        }
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let enc = DualEncoder::new(tiny(), 0).unwrap();
        let img = Image::filled(8, 8, [0.5; 3]);
        assert!(matches!(enc.batch_loss(&[&img], &[&[1, 5, 2]]), Err(Error::Contract(_))));
    }

    #[test]
    fn search_breaks_ties_by_id() {
        let index = RetrievalIndex { ids: vec![0, 1, 2], dim: 2, rows: vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0] };
        assert_eq!(search(&index, &[1.0, 0.0], 3).unwrap(), vec![1, 2, 0]);
        assert!(search(&index, &[1.0, 0.0], 4).is_err());
    }

    #[test]
    fn scores_are_cosines() {
        let enc = DualEncoder::new(tiny(), 1).unwrap();
        let img = Image::filled(8, 8, [0.2, 0.4, 0.9]);
        let s = enc.alignment_score(&img, &[1, 7, 2]).unwrap();
        assert!(s.abs() <= 1.0);
        let ei = enc.embed_images(&[img], Exec::Sequential).unwrap();
        let et = enc.embed_texts(&[vec![1, 7, 2]], Exec::Sequential).unwrap();
        assert_eq!(s, cosine(&ei[0], &et[0]));
    }
}
