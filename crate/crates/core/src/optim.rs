//! Optimisers: a factored-second-moment (Adafactor-style) optimiser with an
//! int8 first moment for the text-to-image model, and plain Adam for the
//! auxiliary networks.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

/// Linear warm-up, constant plateau, then exponential decay to
/// `base_lr * final_ratio` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup: u64,
    pub decay_start: u64,
    pub total_steps: u64,
    pub final_ratio: f64,
}

impl LrSchedule {
    /// Large-scale constants: 5k warm-up, decay from 85k to 450k, final
    /// ratio 0.025, base rate 4.5e-5.
    pub const PRESET: LrSchedule = LrSchedule {
        base_lr: 4.5e-5,
        warmup: 5_000,
        decay_start: 85_000,
        total_steps: 450_000,
        final_ratio: 0.025,
    };

    /// Preset proportions rescaled linearly to `total_steps`.
    pub fn scaled(total_steps: u64, base_lr: f64) -> Self {
        let p = Self::PRESET;
        let frac = |x: u64| ((x as f64) * total_steps as f64 / p.total_steps as f64).round() as u64;
        Self {
            base_lr,
            warmup: frac(p.warmup),
            decay_start: frac(p.decay_start),
            total_steps,
            final_ratio: p.final_ratio,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.base_lr * step as f64 / self.warmup as f64;
        }
        if step <= self.decay_start || self.total_steps <= self.decay_start {
            return self.base_lr;
        }
        let t = ((step - self.decay_start) as f64 / (self.total_steps - self.decay_start) as f64).min(1.0);
        self.base_lr * self.final_ratio.powf(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdafactorConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for AdafactorConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.96,
            clip_norm: 4.0,
            weight_decay: 4.5e-2,
            schedule: LrSchedule::PRESET,
        }
    }
}

/// Diagnostics of one optimiser step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub lr: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

#[derive(Clone, Debug)]
enum SecondMoment {
    /// Row and column accumulators of a `rows x cols` view.
    Factored { row: Vec<f32>, col: Vec<f32> },
    Full(Vec<f32>),
}

/// First moment stored as int8 with one absmax scale per tensor.
#[derive(Clone, Debug)]
pub struct QuantizedMoment {
    pub values: Vec<i8>,
    pub scale: f32,
}

impl QuantizedMoment {
    fn zeros(n: usize) -> Self {
        Self { values: vec![0; n], scale: 0.0 }
    }

    pub fn quantize(m: &[f64]) -> Self {
        let absmax = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if absmax == 0.0 {
            return Self::zeros(m.len());
        }
        let scale = (absmax / 127.0) as f32;
        let values = m
            .iter()
            .map(|v| (v / scale as f64).round().clamp(-127.0, 127.0) as i8)
            .collect();
        Self { values, scale }
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.values.iter().map(|&q| q as f64 * self.scale as f64).collect()
    }
}

#[derive(Clone, Debug)]
struct Slot {
    second: SecondMoment,
    first: QuantizedMoment,
}

/// Optimiser state: step counter plus per-parameter slots.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub step: u64,
    slots: IndexMap<String, Slot>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of float accumulators held for the second moment of `name`.
    pub fn second_moment_len(&self, name: &str) -> Option<usize> {
        self.slots.get(name).map(|s| match &s.second {
            SecondMoment::Factored { row, col } => row.len() + col.len(),
            SecondMoment::Full(v) => v.len(),
        })
    }

    pub fn first_moment(&self, name: &str) -> Option<&QuantizedMoment> {
        self.slots.get(name).map(|s| &s.first)
    }
}

const EPS_SECOND: f64 = 1e-30;

fn check_grads<T: Element>(grads: &IndexMap<String, Tensor<T>>) -> Result<f64> {
    let mut sq = 0.0;
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
        }
        sq += g.sum_sq();
    }
    Ok(sq.sqrt())
}

/// One Adafactor step: global-norm clip, factored second moment, int8 first
/// moment, decoupled weight decay on matrices, scheduled learning rate.
pub fn adafactor_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut OptimizerState,
    cfg: &AdafactorConfig,
) -> Result<StepReport> {
    let grad_norm = check_grads(grads)?;
    let clip_scale = if grad_norm > cfg.clip_norm { cfg.clip_norm / grad_norm } else { 1.0 };
    let lr = cfg.schedule.lr(state.step);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for (name, grad) in grads {
        let param = params.get_mut(name)?;
        if param.shape() != grad.shape() {
            return Err(Error::shape("adafactor", format!("`{name}`: {:?} vs {:?}", param.shape(), grad.shape())));
        }
        let n = param.numel();
        let g: Vec<f64> = grad.data().iter().map(|v| v.as_f64() * clip_scale).collect();
        let matrix = param.rank() >= 2;
        let (rows, cols) = if matrix {
            let c = *param.shape().last().unwrap();
            (n / c, c)
        } else {
            (1, n)
        };
        let slot = state.slots.entry(name.clone()).or_insert_with(|| Slot {
            second: if matrix {
                SecondMoment::Factored { row: vec![0.0; rows], col: vec![0.0; cols] }
            } else {
                SecondMoment::Full(vec![0.0; n])
            },
            first: QuantizedMoment::zeros(n),
        });

        let b2 = cfg.beta2;
        let mut v_hat = vec![0.0f64; n];
        match &mut slot.second {
            SecondMoment::Factored { row, col } => {
                for i in 0..rows {
                    let m: f64 = g[i * cols..(i + 1) * cols].iter().map(|x| x * x + EPS_SECOND).sum::<f64>() / cols as f64;
                    row[i] = (b2 * row[i] as f64 + (1.0 - b2) * m) as f32;
                }
                let mut col_sq = vec![0.0f64; cols];
                for gr in g.chunks_exact(cols) {
                    col_sq.iter_mut().zip(gr).for_each(|(s, x)| *s += x * x + EPS_SECOND);
                }
                for (c, s) in col.iter_mut().zip(&col_sq) {
                    *c = (b2 * *c as f64 + (1.0 - b2) * (s / rows as f64)) as f32;
                }
                let row_mean = row.iter().map(|&r| r as f64).sum::<f64>() / rows as f64;
                let denom = row_mean.max(EPS_SECOND) * bc2;
                for (vr, &r) in v_hat.chunks_exact_mut(cols).zip(row.iter()) {
                    let rs = r as f64 / denom;
                    vr.iter_mut().zip(col.iter()).for_each(|(v, &c)| *v = rs * c as f64);
                }
            }
            SecondMoment::Full(v) => {
                for i in 0..n {
                    v[i] = (b2 * v[i] as f64 + (1.0 - b2) * (g[i] * g[i] + EPS_SECOND)) as f32;
                    v_hat[i] = v[i] as f64 / bc2;
                }
            }
        }

        let prev = slot.first.dequantize();
        let m: Vec<f64> = (0..n)
            .map(|i| {
                let u = g[i] / (v_hat[i].sqrt() + 1e-30);
                cfg.beta1 * prev[i] + (1.0 - cfg.beta1) * u
            })
            .collect();
        slot.first = QuantizedMoment::quantize(&m);

        let wd = if matrix { cfg.weight_decay } else { 0.0 };
        for (w, mi) in param.data_mut().iter_mut().zip(&m) {
            let wf = w.as_f64();
            let upd = lr * (mi / bc1) + lr * wd * wf;
            if upd != 0.0 {
                *w = T::from_f64_lossy(wf - upd);
            }
        }
    }
    state.step += 1;
    Ok(StepReport { lr, grad_norm, clip_scale })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: u64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.99, eps: 1e-8, warmup: 0, clip_norm: 1.0 }
    }
}

/// Adam with bias correction, optional linear warm-up and global-norm clip.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, moments: IndexMap::new() }
    }

    pub fn step<T: Element>(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &IndexMap<String, Tensor<T>>,
    ) -> Result<StepReport> {
        let grad_norm = check_grads(grads)?;
        let clip_scale = if self.cfg.clip_norm > 0.0 && grad_norm > self.cfg.clip_norm {
            self.cfg.clip_norm / grad_norm
        } else {
            1.0
        };
        self.step += 1;
        let lr = if self.step <= self.cfg.warmup {
            self.cfg.lr * self.step as f64 / self.cfg.warmup as f64
        } else {
            self.cfg.lr
        };
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, grad) in grads {
            let param = params.get_mut(name)?;
            let n = param.numel();
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (i, (w, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g.as_f64() * clip_scale;
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let upd = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.cfg.eps);
                if upd != 0.0 {
                    *w = T::from_f64_lossy(w.as_f64() - upd);
                }
            }
        }
        Ok(StepReport { lr, grad_norm, clip_scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f32]) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![2, vals.len() / 2], vals.to_vec()).unwrap());
        p.insert("b", Tensor::new(vec![2], vec![0.5, -0.5]).unwrap());
        p
    }

    fn grads(w: &[f32], b: &[f32]) -> IndexMap<String, Tensor<f32>> {
        let mut g = IndexMap::new();
        g.insert("w".to_string(), Tensor::new(vec![2, w.len() / 2], w.to_vec()).unwrap());
        g.insert("b".to_string(), Tensor::new(vec![2], b.to_vec()).unwrap());
        g
    }

    fn cfg() -> AdafactorConfig {
        AdafactorConfig { schedule: LrSchedule::scaled(1000, 1e-2), ..Default::default() }
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::PRESET;
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(5_000), 4.5e-5);
        assert_eq!(s.lr(85_000), 4.5e-5);
        assert!((s.lr(450_000) - 4.5e-5 * 0.025).abs() < 1e-18);
        assert!(s.lr(200_000) < 4.5e-5 && s.lr(200_000) > 4.5e-5 * 0.025);
        let d = LrSchedule::scaled(20_000, 1e-3);
        assert_eq!((d.warmup, d.decay_start), (222, 3_778));
    }

    #[test]
    fn zero_grads_without_decay_leave_weights() {
        let mut p = store(&[1.0, 2.0, 3.0, 4.0]);
        let before = p.clone();
        let mut st = OptimizerState::new();
        let c = AdafactorConfig { weight_decay: 0.0, ..cfg() };
        for _ in 0..20 {
            adafactor_step(&mut p, &grads(&[0.0; 4], &[0.0; 2]), &mut st, &c).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn clip_matches_prescaled_grads() {
        let c = cfg();
        let mut pa = store(&[1.0, 2.0, 3.0, 4.0]);
        let mut pb = pa.clone();
        let (mut sa, mut sb) = (OptimizerState::new(), OptimizerState::new());
        sa.step = 300;
        sb.step = 300;
        // global norm sqrt(4*16 + 0) = 8
        let ra = adafactor_step(&mut pa, &grads(&[4.0; 4], &[0.0; 2]), &mut sa, &c).unwrap();
        let rb = adafactor_step(&mut pb, &grads(&[2.0; 4], &[0.0; 2]), &mut sb, &c).unwrap();
        assert_eq!(ra.grad_norm, 8.0);
        assert_eq!(ra.clip_scale, 0.5);
        assert_eq!(rb.clip_scale, 1.0);
        assert_eq!(pa, pb);
    }

    #[test]
    fn factored_state_is_rows_plus_cols() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::<f32>::ones(&[6, 10]));
        let mut g = IndexMap::new();
        g.insert("w".to_string(), Tensor::<f32>::full(&[6, 10], 0.1));
        let mut st = OptimizerState::new();
        adafactor_step(&mut p, &g, &mut st, &cfg()).unwrap();
        assert_eq!(st.second_moment_len("w"), Some(16));
    }

    #[test]
    fn int8_moment_error_bounded_by_scale() {
        let m: Vec<f64> = (0..200).map(|i| ((i as f64) * 0.731).sin() * 0.02).collect();
        let q = QuantizedMoment::quantize(&m);
        for (a, b) in q.dequantize().iter().zip(&m) {
            assert!((a - b).abs() <= q.scale as f64 * 0.5 + 1e-12);
        }
    }

    #[test]
    fn nan_gradient_is_numeric_failure() {
        let mut p = store(&[1.0; 4]);
        let mut st = OptimizerState::new();
        let r = adafactor_step(&mut p, &grads(&[f32::NAN, 0.0, 0.0, 0.0], &[0.0; 2]), &mut st, &cfg());
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn adam_zero_lr_is_noop() {
        let mut p = store(&[1.0, 2.0, 3.0, 4.0]);
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..Default::default() });
        opt.step(&mut p, &grads(&[1.0; 4], &[1.0; 2])).unwrap();
        assert_eq!(p, before);
    }
}
