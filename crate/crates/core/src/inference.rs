//! Guided autoregressive sampling with a key/value-cached decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Dropout, LN_EPS};
use crate::par::Exec;
use crate::params::ParamStore;
use crate::seq2seq::{conv_sparse_mask, encode_text, pad_text, ModelConfig, Seq2Seq};
use crate::superres::SuperRes;
use crate::tensor::{kernels, Tape};
use crate::textproc::{encode_text as encode_caption, SubwordVocab, PAD};
use crate::vq::Tokenizer;

/// `u + lambda * (c - u)`, evaluated as `lambda*c + (u - lambda*u)` with
/// fused multiply-adds so that both endpoints are reproduced exactly.
pub fn guided_logits(u: &[f64], c: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if u.len() != c.len() {
        return Err(Error::shape("guided_logits", format!("{} vs {}", u.len(), c.len())));
    }
    Ok(u.iter().zip(c).map(|(&u, &c)| lambda.mul_add(c, (-lambda).mul_add(u, u))).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { lambda: 1.2, temperature: 1.0, top_k: 0, n_samples: 16, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, image_vocab: usize) -> Result<()> {
        if self.lambda.is_nan() || self.lambda < 0.0 || self.temperature.is_nan() || self.temperature <= 0.0 || self.top_k > image_vocab || self.n_samples == 0 {
            return Err(Error::contract(format!("invalid sampler config {self:?}")));
        }
        Ok(())
    }
}

/// Per-sample generator: stream `index` of the seed.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Temperature, optional top-k, then a categorical draw.
pub fn draw(logits: &[f64], temperature: f64, top_k: usize, rng: &mut impl Rng) -> Result<usize> {
    let mut z: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
    if z.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN logit".into()));
    }
    if top_k > 0 && top_k < z.len() {
        let mut order: Vec<usize> = (0..z.len()).collect();
        order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
        for &i in &order[top_k..] {
            z[i] = f64::NEG_INFINITY;
        }
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Numeric("all logits are -inf".into()));
    }
    let w: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut r = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &wi) in w.iter().enumerate() {
        if wi > 0.0 {
            last = i;
            if r < wi {
                return Ok(i);
            }
            r -= wi;
        }
    }
    Ok(last)
}

struct Lin<'a> {
    w: &'a [f32],
    b: Option<&'a [f32]>,
    dout: usize,
}

impl<'a> Lin<'a> {
    fn new(p: &'a ParamStore<f32>, prefix: &str) -> Result<Self> {
        let w = p.get(&format!("{prefix}.w"))?;
        let b = p.contains(&format!("{prefix}.b")).then(|| p.get(&format!("{prefix}.b"))).transpose()?;
        Ok(Self { w: w.data(), b: b.map(|b| b.data()), dout: w.shape()[1] })
    }

    fn apply(&self, x: &[f32], out: &mut Vec<f32>) {
        out.clear();
        match self.b {
            Some(b) => out.extend_from_slice(b),
            None => out.resize(self.dout, 0.0),
        }
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.w[i * self.dout..(i + 1) * self.dout];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += xi * wv;
            }
        }
    }
}

struct Norm<'a> {
    g: &'a [f32],
    b: &'a [f32],
}

impl<'a> Norm<'a> {
    fn new(p: &'a ParamStore<f32>, prefix: &str) -> Result<Self> {
        Ok(Self { g: p.get(&format!("{prefix}.g"))?.data(), b: p.get(&format!("{prefix}.b"))?.data() })
    }

    fn apply(&self, x: &[f32], out: &mut Vec<f32>) {
        let n = x.len() as f32;
        let mean = x.iter().sum::<f32>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let r = 1.0 / (var + LN_EPS as f32).sqrt();
        out.clear();
        out.extend(x.iter().zip(self.g).zip(self.b).map(|((v, g), b)| (v - mean) * r * g + b));
    }
}

struct Layer<'a> {
    ln1: Norm<'a>,
    q: Lin<'a>,
    k: Lin<'a>,
    v: Lin<'a>,
    o: Lin<'a>,
    ln2: Norm<'a>,
    xq: Lin<'a>,
    xk: Lin<'a>,
    xv: Lin<'a>,
    xo: Lin<'a>,
    ln3: Norm<'a>,
    fc1: Lin<'a>,
    fc2: Lin<'a>,
}

/// Borrowed decoder weights for incremental decoding.
pub struct IncrementalDecoder<'a> {
    cfg: &'a ModelConfig,
    model: &'a Seq2Seq,
    emb: &'a [f32],
    pos: &'a [f32],
    layers: Vec<Layer<'a>>,
    ln: Norm<'a>,
    head: Lin<'a>,
    /// Allowed key positions for each query position.
    window: Vec<Vec<usize>>,
}

/// Cross-attention keys and values for one text condition.
pub struct Condition {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

/// Running state of one decoding stream.
pub struct DecodeState {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    pos: usize,
}

impl<'a> IncrementalDecoder<'a> {
    pub fn new(model: &'a Seq2Seq) -> Result<Self> {
        let cfg = &model.cfg;
        let p = &model.params;
        let mut layers = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            let pre = format!("dec.blocks.{l}");
            layers.push(Layer {
                ln1: Norm::new(p, &format!("{pre}.ln1"))?,
                q: Lin::new(p, &format!("{pre}.attn.q"))?,
                k: Lin::new(p, &format!("{pre}.attn.k"))?,
                v: Lin::new(p, &format!("{pre}.attn.v"))?,
                o: Lin::new(p, &format!("{pre}.attn.o"))?,
                ln2: Norm::new(p, &format!("{pre}.ln2"))?,
                xq: Lin::new(p, &format!("{pre}.xattn.q"))?,
                xk: Lin::new(p, &format!("{pre}.xattn.k"))?,
                xv: Lin::new(p, &format!("{pre}.xattn.v"))?,
                xo: Lin::new(p, &format!("{pre}.xattn.o"))?,
                ln3: Norm::new(p, &format!("{pre}.ln3"))?,
                fc1: Lin::new(p, &format!("{pre}.fc1"))?,
                fc2: Lin::new(p, &format!("{pre}.fc2"))?,
            });
        }
        let n = cfg.image_len();
        let mask = conv_sparse_mask(cfg.grid_h, cfg.grid_w, cfg.conv_kernel)?;
        let window = (0..n).map(|i| (0..n).filter(|&j| mask[i * n + j]).collect()).collect();
        Ok(Self {
            cfg,
            model,
            emb: p.get("img.emb")?.data(),
            pos: p.get("img.pos")?.data(),
            layers,
            ln: Norm::new(p, "dec.ln")?,
            head: Lin::new(p, "head")?,
            window,
        })
    }

    /// Encodes padded text ids once and projects them for every layer's
    /// cross-attention.
    pub fn condition(&self, text: &[u32]) -> Result<Condition> {
        let cfg = self.cfg;
        if text.len() != cfg.text_len {
            return Err(Error::shape("condition", format!("text length {} != {}", text.len(), cfg.text_len)));
        }
        if let Some(&bad) = text.iter().find(|&&t| t as usize >= cfg.text_vocab) {
            return Err(Error::data(format!("text id {bad} outside vocabulary")));
        }
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape, |_| false);
        let ctx = encode_text(&mut tape, &p, cfg.enc_layers, cfg.heads, text, 1, cfg.text_len, &mut Dropout::off())?;
        let ctx = tape.value(ctx).data();
        let d = cfg.d_model;
        let mut keys = Vec::with_capacity(self.layers.len());
        let mut values = Vec::with_capacity(self.layers.len());
        let mut buf = Vec::new();
        for layer in &self.layers {
            let mut k = Vec::with_capacity(cfg.text_len * d);
            let mut v = Vec::with_capacity(cfg.text_len * d);
            for t in 0..cfg.text_len {
                layer.xk.apply(&ctx[t * d..(t + 1) * d], &mut buf);
                k.extend_from_slice(&buf);
                layer.xv.apply(&ctx[t * d..(t + 1) * d], &mut buf);
                v.extend_from_slice(&buf);
            }
            keys.push(k);
            values.push(v);
        }
        Ok(Condition { keys, values, len: cfg.text_len })
    }

    pub fn start(&self) -> DecodeState {
        let cap = self.cfg.image_len() * self.cfg.d_model;
        DecodeState {
            keys: (0..self.layers.len()).map(|_| Vec::with_capacity(cap)).collect(),
            values: (0..self.layers.len()).map(|_| Vec::with_capacity(cap)).collect(),
            pos: 0,
        }
    }

    fn attend(&self, q: &[f32], keys: &[f32], values: &[f32], positions: &mut dyn Iterator<Item = usize>, out: &mut [f32]) {
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let pos: Vec<usize> = positions.collect();
        let mut scores = vec![0.0f32; pos.len()];
        out.iter_mut().for_each(|v| *v = 0.0);
        for h in 0..heads {
            let qh = &q[h * dh..(h + 1) * dh];
            for (s, &j) in scores.iter_mut().zip(&pos) {
                let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
                *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f32>() * scale;
            }
            let mut probs = vec![0.0f32; pos.len()];
            kernels::softmax(&scores, &mut probs, 1, pos.len(), 1);
            let oh = &mut out[h * dh..(h + 1) * dh];
            for (pr, &j) in probs.iter().zip(&pos) {
                let vh = &values[j * d + h * dh..j * d + (h + 1) * dh];
                for (o, v) in oh.iter_mut().zip(vh) {
                    *o += pr * v;
                }
            }
        }
    }

    /// Feeds `token` (the image BOS id at position 0) and returns the logits
    /// for the next position.
    pub fn step(&self, state: &mut DecodeState, cond: &Condition, token: usize) -> Result<Vec<f32>> {
        let d = self.cfg.d_model;
        let t = state.pos;
        if t >= self.cfg.image_len() {
            return Err(Error::contract("decoded past the image length"));
        }
        if token > self.cfg.image_vocab {
            return Err(Error::data(format!("image token {token} out of range")));
        }
        let mut x: Vec<f32> = self.emb[token * d..(token + 1) * d]
            .iter()
            .zip(&self.pos[t * d..(t + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let (mut h, mut q, mut k, mut v, mut a, mut o) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), vec![0.0; d], Vec::new());
        for (li, layer) in self.layers.iter().enumerate() {
            layer.ln1.apply(&x, &mut h);
            layer.q.apply(&h, &mut q);
            layer.k.apply(&h, &mut k);
            layer.v.apply(&h, &mut v);
            state.keys[li].extend_from_slice(&k);
            state.values[li].extend_from_slice(&v);
            self.attend(&q, &state.keys[li], &state.values[li], &mut self.window[t].iter().copied(), &mut a);
            layer.o.apply(&a, &mut o);
            x.iter_mut().zip(&o).for_each(|(x, o)| *x += o);

            layer.ln2.apply(&x, &mut h);
            layer.xq.apply(&h, &mut q);
            self.attend(&q, &cond.keys[li], &cond.values[li], &mut (0..cond.len), &mut a);
            layer.xo.apply(&a, &mut o);
            x.iter_mut().zip(&o).for_each(|(x, o)| *x += o);

            layer.ln3.apply(&x, &mut h);
            layer.fc1.apply(&h, &mut q);
            q.iter_mut().for_each(|v| *v = kernels::gelu(*v));
            layer.fc2.apply(&q, &mut o);
            x.iter_mut().zip(&o).for_each(|(x, o)| *x += o);
        }
        self.ln.apply(&x, &mut h);
        let mut logits = Vec::new();
        self.head.apply(&h, &mut logits);
        state.pos += 1;
        Ok(logits)
    }

    /// Samples one grid. Only the branches that the guidance weight needs
    /// are evaluated.
    pub fn sample(&self, cond: &Condition, uncond: &Condition, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<Vec<u32>> {
        let n = self.cfg.image_len();
        let need_c = cfg.lambda != 0.0;
        let need_u = cfg.lambda != 1.0;
        let mut sc = self.start();
        let mut su = self.start();
        let mut token = self.cfg.image_vocab;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let c: Option<Vec<f64>> = if need_c {
                Some(self.step(&mut sc, cond, token)?.into_iter().map(f64::from).collect())
            } else {
                None
            };
            let u: Option<Vec<f64>> = if need_u {
                Some(self.step(&mut su, uncond, token)?.into_iter().map(f64::from).collect())
            } else {
                None
            };
            let g = match (u, c) {
                (Some(u), Some(c)) => guided_logits(&u, &c, cfg.lambda)?,
                (Some(u), None) => u,
                (None, Some(c)) => c,
                (None, None) => unreachable!("at least one branch is needed"),
            };
            token = draw(&g, cfg.temperature, cfg.top_k, rng)?;
            out.push(token as u32);
        }
        Ok(out)
    }
}

/// Samples a token grid for padded `text` ids with the guided sampler.
pub fn sample_tokens(model: &Seq2Seq, text: &[u32], cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<Vec<u32>> {
    cfg.validate(model.cfg.image_vocab)?;
    let dec = IncrementalDecoder::new(model)?;
    let cond = dec.condition(text)?;
    let uncond = dec.condition(&vec![PAD; model.cfg.text_len])?;
    dec.sample(&cond, &uncond, cfg, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub prompt: String,
    pub grids: Vec<Vec<u32>>,
    pub images: Vec<Image>,
    pub scores: Option<Vec<f64>>,
    pub seed: u64,
}

/// Samples `cfg.n_samples` grids (sample `i` uses stream `i` of the seed),
/// decodes them and optionally upsamples.
pub fn generate(
    model: &Seq2Seq,
    tokenizer: &Tokenizer,
    sr: Option<&SuperRes>,
    vocab: &SubwordVocab,
    prompt: &str,
    cfg: &SamplerConfig,
    exec: Exec,
) -> Result<SampleBatch> {
    cfg.validate(model.cfg.image_vocab)?;
    if tokenizer.cfg.tokens() != model.cfg.image_len() || tokenizer.cfg.codebook_size != model.cfg.image_vocab {
        return Err(Error::contract("tokenizer grid or codebook does not match the model"));
    }
    let text = pad_text(&encode_caption(vocab, prompt, model.cfg.text_len)?, model.cfg.text_len);
    let dec = IncrementalDecoder::new(model)?;
    let cond = dec.condition(&text)?;
    let uncond = dec.condition(&vec![PAD; model.cfg.text_len])?;
    let grids = exec
        .map_range(cfg.n_samples, |i| dec.sample(&cond, &uncond, cfg, &mut sample_rng(cfg.seed, i as u64)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let images = exec
        .map(&grids, |g| {
            let img = tokenizer.detokenize(g)?;
            match sr {
                Some(sr) => sr.upsample(&img),
                None => Ok(img),
            }
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleBatch { prompt: prompt.to_string(), grids, images, scores: None, seed: cfg.seed })
}

/// Scores every image against the prompt and sorts descending; equal
/// scores keep their sampled order.
pub fn rerank(batch: SampleBatch, scorer: impl Fn(&Image, &str) -> f64) -> SampleBatch {
    let scores: Vec<f64> = batch.images.iter().map(|im| scorer(im, &batch.prompt)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    SampleBatch {
        grids: order.iter().map(|&i| batch.grids[i].clone()).collect(),
        images: order.iter().map(|&i| batch.images[i].clone()).collect(),
        scores: Some(order.iter().map(|&i| scores[i]).collect()),
        prompt: batch.prompt,
        seed: batch.seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::build_model;

    #[test]
    fn guidance_endpoints_and_example() {
        let u = [0.1, -3.7, 2.25];
        let c = [0.3, 5.1, -0.4];
        assert_eq!(guided_logits(&u, &c, 0.0).unwrap(), u);
        assert_eq!(guided_logits(&u, &c, 1.0).unwrap(), c);
        // 1.2 is not representable; the result is the correctly rounded value
        // of the formula for the stored lambda, which sits a couple of ulps
        // from the decimal -0.2.
        let g = guided_logits(&[0.0, 1.0], &[1.0, 0.0], 1.2).unwrap();
        assert_eq!(g, vec![1.2, 1.0 - 1.2]);
        assert!((g[1] - -0.2).abs() <= 1.2 * f64::EPSILON);
        assert!(guided_logits(&[0.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn top_k_one_is_greedy() {
        let l = [0.5, 2.0, 2.0, -1.0];
        for s in 0..20 {
            assert_eq!(draw(&l, 1.0, 1, &mut sample_rng(s, 0)).unwrap(), 1);
        }
        assert!(draw(&[f64::NEG_INFINITY; 3], 1.0, 0, &mut sample_rng(0, 0)).is_err());
    }

    fn tiny() -> Seq2Seq {
        let cfg = ModelConfig { d_model: 8, d_mlp: 16, heads: 2, enc_layers: 1, dec_layers: 2, text_vocab: 30, image_vocab: 6, text_len: 5, grid_h: 3, grid_w: 3, ..Default::default() };
        build_model(cfg, 3).unwrap()
    }

    #[test]
    fn cached_decoder_matches_full_forward() {
        let m = tiny();
        let text = vec![1, 7, 9, 2, 0];
        let image: Vec<u32> = vec![4, 0, 5, 1, 1, 3, 2, 0, 5];
        let full = m.logits(&text, &image).unwrap();
        let dec = IncrementalDecoder::new(&m).unwrap();
        let cond = dec.condition(&text).unwrap();
        let mut st = dec.start();
        let mut tok = m.cfg.image_vocab;
        for (t, &next) in image.iter().enumerate() {
            let l = dec.step(&mut st, &cond, tok).unwrap();
            for (a, b) in l.iter().zip(&full.data()[t * 6..(t + 1) * 6]) {
                assert!((a - b).abs() < 1e-4, "position {t}: {a} vs {b}");
            }
            tok = next as usize;
        }
    }

    #[test]
    fn lambda_zero_ignores_prompt() {
        let m = tiny();
        let cfg = SamplerConfig { lambda: 0.0, ..Default::default() };
        let a = sample_tokens(&m, &[1, 7, 9, 2, 0], &cfg, &mut sample_rng(5, 0)).unwrap();
        let b = sample_tokens(&m, &[1, 11, 2, 0, 0], &cfg, &mut sample_rng(5, 0)).unwrap();
        assert_eq!(a, b);
        let c = sample_tokens(&m, &[1, 7, 9, 2, 0], &cfg, &mut sample_rng(5, 0)).unwrap();
        assert_eq!(a, c);
    }
}
