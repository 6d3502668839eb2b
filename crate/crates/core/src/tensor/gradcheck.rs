use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Op, OpKind, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative disagreement between the tape gradient of `f` at `x` and
/// central finite differences with step `eps`, in 64-bit arithmetic.
///
/// Relative error per component is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::contract("grad_check eps must be positive"));
    }
    if !x.is_finite() {
        return Err(Error::contract("grad_check input must be finite"));
    }
    let eval = |input: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(input, false);
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    // nearest power of two, so x +- h stays exact for dyadic x
    let h = 2f64.powi(eps.log2().round() as i32);
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        // divide by the step actually representable at this magnitude
        let step = plus.data()[i] - minus.data()[i];
        let numeric = (eval(plus)? - eval(minus)?) / step;
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.shape().is_empty() {
        return Err(Error::contract(format!("grad_check needs a scalar function, got {:?}", t.shape())));
    }
    Ok(t.item())
}

type Case = (OpKind, Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>, Tensor<f64>);

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    // keep magnitudes away from zero so relu has no kink within eps
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Reduces `y` to a scalar through a fixed random weighting, so that no
/// op output is hidden by a symmetric sum.
fn weigh(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(random(&shape, &mut rng));
    let p = tape.mul(y, w)?;
    tape.sum(p, None)
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut c: Vec<Case> = Vec::new();
    let k = |t: Tensor<f64>| move |tape: &mut Tape<f64>| tape.constant(t.clone());
    let b4 = k(random(&[4], rng));
    let full = k(random(&[3, 4], rng));
    for kind in [OpKind::Add, OpKind::Sub, OpKind::Mul] {
        let op = match kind {
            OpKind::Add => Op::Add,
            OpKind::Sub => Op::Sub,
            _ => Op::Mul,
        };
        let (op2, b) = (op.clone(), b4.clone());
        c.push((kind, Box::new(move |t, x| { let y = b(t); let r = t.apply(op2.clone(), &[x, y])?; weigh(t, r, 1) }), random(&[3, 4], rng)));
        let (op2, f) = (op.clone(), full.clone());
        c.push((kind, Box::new(move |t, x| { let y = f(t); let r = t.apply(op2.clone(), &[y, x])?; weigh(t, r, 2) }), random(&[4], rng)));
        let op2 = op.clone();
        c.push((kind, Box::new(move |t, x| { let r = t.apply(op2.clone(), &[x, x])?; weigh(t, r, 3) }), random(&[2, 3], rng)));
    }
    let w = k(random(&[4, 5], rng));
    c.push((OpKind::MatMul, Box::new(move |t, x| { let y = w(t); let r = t.matmul(x, y)?; weigh(t, r, 4) }), random(&[2, 3, 4], rng)));
    let a = k(random(&[2, 3, 4], rng));
    c.push((OpKind::MatMul, Box::new(move |t, x| { let y = a(t); let r = t.matmul(y, x)?; weigh(t, r, 5) }), random(&[2, 4, 3], rng)));
    c.push((OpKind::Reshape, Box::new(|t, x| { let r = t.reshape(x, &[2, 6])?; weigh(t, r, 6) }), random(&[3, 4], rng)));
    c.push((OpKind::Transpose, Box::new(|t, x| { let r = t.transpose(x, 0, 2)?; weigh(t, r, 7) }), random(&[2, 3, 4], rng)));
    c.push((OpKind::Slice, Box::new(|t, x| { let r = t.slice(x, 1, 1, 3)?; weigh(t, r, 8) }), random(&[2, 4, 3], rng)));
    let other = k(random(&[2, 2], rng));
    c.push((OpKind::Concat, Box::new(move |t, x| { let y = other(t); let r = t.concat(&[x, y, x], 1)?; weigh(t, r, 9) }), random(&[2, 3], rng)));
    c.push((OpKind::EmbeddingGather, Box::new(|t, x| { let r = t.gather(x, &[0, 2, 2, 4], &[2, 2])?; weigh(t, r, 10) }), random(&[5, 3], rng)));
    for axis in [0, 1] {
        c.push((OpKind::Softmax, Box::new(move |t, x| { let r = t.softmax(x, axis)?; weigh(t, r, 11) }), random(&[3, 4], rng)));
        c.push((OpKind::LogSoftmax, Box::new(move |t, x| { let r = t.log_softmax(x, axis)?; weigh(t, r, 12) }), random(&[3, 4], rng)));
        c.push((OpKind::LayerNorm, Box::new(move |t, x| { let r = t.layer_norm(x, axis, 1e-5)?; weigh(t, r, 13) }), random(&[3, 4], rng)));
        c.push((OpKind::L2Normalize, Box::new(move |t, x| { let r = t.l2_normalize(x, axis, 1e-12)?; weigh(t, r, 14) }), random(&[3, 4], rng)));
        c.push((OpKind::ReduceSum, Box::new(move |t, x| { let r = t.sum(x, Some(axis))?; weigh(t, r, 15) }), random(&[3, 4], rng)));
        c.push((OpKind::ReduceMean, Box::new(move |t, x| { let r = t.mean(x, Some(axis))?; weigh(t, r, 16) }), random(&[3, 4], rng)));
    }
    c.push((OpKind::ReduceMean, Box::new(|t, x| t.mean(x, None)), random(&[3, 4], rng)));
    c.push((OpKind::Gelu, Box::new(|t, x| { let r = t.gelu(x)?; weigh(t, r, 17) }), random(&[3, 4], rng)));
    c.push((OpKind::Relu, Box::new(|t, x| { let r = t.relu(x)?; weigh(t, r, 18) }), random(&[3, 4], rng)));
    let cw = k(random(&[3, 2, 3, 3], rng));
    let cb = k(random(&[3], rng));
    c.push((OpKind::Conv2d, Box::new(move |t, x| { let (w, b) = (cw(t), cb(t)); let r = t.conv2d(x, w, Some(b), 1, 1)?; weigh(t, r, 19) }), random(&[2, 2, 5, 4], rng)));
    let cx = k(random(&[1, 2, 5, 5], rng));
    c.push((OpKind::Conv2d, Box::new(move |t, w| { let x = cx(t); let r = t.conv2d(x, w, None, 2, 1)?; weigh(t, r, 20) }), random(&[2, 2, 3, 3], rng)));
    let mask: std::sync::Arc<[bool]> = vec![true, false, false, true].into();
    c.push((OpKind::MaskedFill, Box::new(move |t, x| { let r = t.masked_fill(x, mask.clone(), &[2, 2], -3.0)?; weigh(t, r, 21) }), random(&[3, 2, 2], rng)));
    c.push((OpKind::Scale, Box::new(|t, x| { let r = t.scale(x, -1.75)?; weigh(t, r, 22) }), random(&[3, 4], rng)));
    c.push((OpKind::CrossEntropyWithLogits, Box::new(|t, x| t.cross_entropy(x, &[0, 3, 4, 1], None)), random(&[4, 5], rng)));
    c.push((
        OpKind::CrossEntropyWithLogits,
        Box::new(|t, x| t.cross_entropy(x, &[2, 2, 0, 1], Some(&[1.0, 0.0, 0.5, 2.0]))),
        random(&[4, 5], rng),
    ));
    c
}

/// Worst relative gradient error per catalog op over a fixed set of
/// compositions with random 64-bit inputs.
pub fn catalog_sweep(seed: u64, eps: f64) -> Result<Vec<(OpKind, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<(OpKind, f64)> = OpKind::ALL.iter().map(|&k| (k, f64::NAN)).collect();
    for (kind, f, x) in cases(&mut rng) {
        let e = grad_check(&*f, &x, eps)?;
        let slot = worst.iter_mut().find(|(k, _)| *k == kind).expect("catalog kind");
        slot.1 = if slot.1.is_nan() { e } else { slot.1.max(e) };
    }
    Ok(worst)
}
