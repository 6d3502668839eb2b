//! Residual convolutional 2x super-resolution network. The body runs at
//! input resolution; a nearest-neighbour upsample and a final conv produce a
//! correction added to the upsampled input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuperResConfig {
    pub blocks: usize,
    pub channels: usize,
}

impl Default for SuperResConfig {
    fn default() -> Self {
        Self { blocks: 4, channels: 32 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperRes {
    pub cfg: SuperResConfig,
    pub params: ParamStore<f32>,
}

fn init_conv(p: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, std: f64, rng: &mut ChaCha8Rng) {
    p.init_trunc_normal(&format!("{name}.w"), &[cout, cin, 3, 3], std, rng);
    p.init_const(&format!("{name}.b"), &[cout], 0.0);
}

fn to_nchw(imgs: &[&Image]) -> Result<Tensor<f32>> {
    let (h, w) = (imgs[0].height(), imgs[0].width());
    let mut data = vec![0.0f32; imgs.len() * 3 * h * w];
    for (b, img) in imgs.iter().enumerate() {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::shape("superres", "batch images differ in size"));
        }
        for y in 0..h {
            for x in 0..w {
                let px = img.pixel(y, x);
                for c in 0..3 {
                    data[((b * 3 + c) * h + y) * w + x] = px[c];
                }
            }
        }
    }
    Tensor::new(vec![imgs.len(), 3, h, w], data)
}

fn from_nchw(t: &[f32], b: usize, h: usize, w: usize) -> Image {
    let mut img = Image::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| t[((b * 3 + c) * h + y) * w + x]);
            img.set_pixel(y, x, px);
        }
    }
    img
}

/// Nearest-neighbour 2x upsample of `[B, C, H, W]` expressed as a gather so
/// gradients flow back to the source pixels.
fn upsample2(tape: &mut Tape<f32>, x: Var) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
    let flat = tape.reshape(x, &[bc * h * w, 1])?;
    let mut ids = Vec::with_capacity(bc * 4 * h * w);
    for p in 0..bc {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                ids.push((p * h + y / 2) * w + xx / 2);
            }
        }
    }
    let up = tape.gather(flat, &ids, &[ids.len()])?;
    tape.reshape(up, &[s[0], s[1], 2 * h, 2 * w])
}

impl SuperRes {
    pub fn new(cfg: SuperResConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = cfg.channels;
        let std = |fan_in: usize| (2.0 / (fan_in * 9) as f64).sqrt() * 0.5;
        init_conv(&mut p, "head", 3, c, std(3), &mut rng);
        for r in 0..cfg.blocks {
            init_conv(&mut p, &format!("res.{r}.conv1"), c, c, std(c), &mut rng);
            init_conv(&mut p, &format!("res.{r}.conv2"), c, c, std(c) * 0.1, &mut rng);
        }
        init_conv(&mut p, "tail", c, 3, 1e-3, &mut rng);
        Self { cfg, params: p }
    }

    fn conv(tape: &mut Tape<f32>, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = p.get(&format!("{name}.w"))?;
        let b = p.get(&format!("{name}.b"))?;
        tape.conv2d(x, w, Some(b), 1, 1)
    }

    /// Unclamped output `[B, 3, 2H, 2W]` for input `[B, 3, H, W]`.
    fn forward(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = Self::conv(tape, p, "head", x)?;
        h = tape.relu(h)?;
        for r in 0..self.cfg.blocks {
            let t = Self::conv(tape, p, &format!("res.{r}.conv1"), h)?;
            let t = tape.relu(t)?;
            let t = Self::conv(tape, p, &format!("res.{r}.conv2"), t)?;
            h = tape.add(h, t)?;
        }
        let h = upsample2(tape, h)?;
        let corr = Self::conv(tape, p, "tail", h)?;
        let base = upsample2(tape, x)?;
        tape.add(base, corr)
    }

    pub fn upsample(&self, img: &Image) -> Result<Image> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let x = tape.constant(to_nchw(&[img])?);
        let y = self.forward(&mut tape, &p, x)?;
        Ok(from_nchw(tape.value(y).data(), 0, 2 * img.height(), 2 * img.width()).clamped())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuperResTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SuperResTrainConfig {
    fn default() -> Self {
        Self { steps: 300, batch: 8, lr: 1e-3, seed: 0 }
    }
}

/// Fits `sr` on `(low, high)` pairs with pixel MSE; returns the loss history.
pub fn train_superres(sr: &mut SuperRes, pairs: &[(Image, Image)], cfg: &SuperResTrainConfig) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::data("no training pairs"));
    }
    for (lo, hi) in pairs {
        if hi.height() != 2 * lo.height() || hi.width() != 2 * lo.width() {
            return Err(Error::shape("train_superres", "target must be twice the input size"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, warmup: 20, ..AdamConfig::default() });
    let mut hist = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..pairs.len())).collect();
        let lo: Vec<&Image> = idx.iter().map(|&i| &pairs[i].0).collect();
        let hi: Vec<&Image> = idx.iter().map(|&i| &pairs[i].1).collect();
        let mut tape = Tape::new();
        let p = sr.params.bind(&mut tape, |_| true);
        let x = tape.constant(to_nchw(&lo)?);
        let t = tape.constant(to_nchw(&hi)?);
        let y = sr.forward(&mut tape, &p, x)?;
        let d = tape.sub(y, t)?;
        let sq = tape.mul(d, d)?;
        let loss = tape.mean(sq, None)?;
        let lv = tape.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("super-resolution loss is {lv}")));
        }
        let mut g = tape.backward(loss)?;
        adam.step(&mut sr.params, &p.grads(&mut g))?;
        hist.push(lv);
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_doubles_and_is_deterministic() {
        let sr = SuperRes::new(SuperResConfig { blocks: 1, channels: 4 }, 0);
        let img = Image::filled(6, 4, [0.3, 0.6, 0.9]);
        let a = sr.upsample(&img).unwrap();
        assert_eq!((a.height(), a.width()), (12, 8));
        assert_eq!(a, sr.upsample(&img).unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
