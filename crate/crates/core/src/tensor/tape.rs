use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom, Layout};
use super::{Element, Op, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Record {
    Leaf,
    Op(Op),
    /// Value supplied by the caller; gradient passes to the input unchanged.
    StraightThrough,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    record: Record,
    inputs: Vec<Var>,
    requires_grad: bool,
    saved: Vec<T>,
}

/// Gradients of a scalar root with respect to every reachable leaf that
/// requires a gradient.
#[derive(Debug, Default)]
pub struct GradMap<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T> GradMap<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor<T>)> {
        self.grads.iter()
    }
}

/// Wengert list of recorded operations. Confined to one thread.
#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Record::Leaf, Vec::new(), requires_grad, Vec::new())
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records `value` as the forward result while routing the gradient to
    /// `input` as identity (straight-through estimator).
    pub fn straight_through(&mut self, input: Var, value: Tensor<T>) -> Result<Var> {
        if value.shape() != self.value(input).shape() {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", value.shape(), self.value(input).shape()),
            ));
        }
        let rg = self.requires_grad(input);
        Ok(self.push(value, Record::StraightThrough, vec![input], rg, Vec::new()))
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        record: Record,
        inputs: Vec<Var>,
        requires_grad: bool,
        saved: Vec<T>,
    ) -> Var {
        self.nodes.push(Node { value, record, inputs, requires_grad, saved });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates a catalog op and records it.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let (value, saved) = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(&op, &vals)?
        };
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, Record::Op(op), inputs.to_vec(), rg, saved))
    }

    // Named helpers. They panic-free forward to `apply`.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[a])
    }

    pub fn transpose(&mut self, a: Var, ax0: usize, ax1: usize) -> Result<Var> {
        self.apply(Op::Transpose { axes: (ax0, ax1) }, &[a])
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn gather(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        self.apply(
            Op::EmbeddingGather { ids: ids.into(), ids_shape: ids_shape.to_vec() },
            &[table],
        )
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::LogSoftmax { axis }, &[a])
    }

    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { axis, eps }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        match bias {
            Some(b) => self.apply(Op::Conv2d { stride, pad }, &[x, w, b]),
            None => self.apply(Op::Conv2d { stride, pad }, &[x, w]),
        }
    }

    pub fn masked_fill(&mut self, a: Var, mask: Arc<[bool]>, mask_shape: &[usize], value: f64) -> Result<Var> {
        self.apply(Op::MaskedFill { mask, mask_shape: mask_shape.to_vec(), value }, &[a])
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Op::ReduceSum { axis }, &[a])
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Op::ReduceMean { axis }, &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale { factor }, &[a])
    }

    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        self.apply(Op::L2Normalize { axis, eps }, &[a])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        self.apply(
            Op::CrossEntropyWithLogits { targets: targets.into(), weights: weights.map(Into::into) },
            &[logits],
        )
    }

    /// Reverse pass from a scalar root. Gradients accumulate in tape order.
    pub fn backward(&self, root: Var) -> Result<GradMap<T>> {
        let root_node = &self.nodes[root.0];
        if !root_node.value.shape().is_empty() {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut out = GradMap::default();
        if !root_node.requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.record {
                Record::Leaf => {
                    if node.requires_grad {
                        out.grads.insert(Var(idx), g);
                    }
                }
                Record::StraightThrough => {
                    let input = node.inputs[0];
                    accumulate(&mut grads[input.0], g);
                }
                Record::Op(op) => {
                    let in_grads = self.op_backward(op, node, &g)?;
                    for (input, ig) in node.inputs.iter().zip(in_grads) {
                        if let Some(ig) = ig {
                            accumulate(&mut grads[input.0], ig);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn op_backward(&self, op: &Op, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let need: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
        let inp = |i: usize| &self.nodes[node.inputs[i].0].value;
        let out = &node.value;
        let gd = g.data();
        Ok(match op {
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (inp(0), inp(1));
                let (ad, bd) = (a.data(), b.data());
                let (na, nb) = (a.numel(), b.numel());
                if na == nb && !matches!(op, Op::Mul) {
                    let ga = need[0].then(|| Tensor { shape: a.shape().to_vec(), data: gd.to_vec() });
                    let gb = need[1].then(|| {
                        let data = match op {
                            Op::Sub => gd.iter().map(|&g| -g).collect(),
                            _ => gd.to_vec(),
                        };
                        Tensor { shape: b.shape().to_vec(), data }
                    });
                    return Ok(vec![ga, gb]);
                }
                let mut ga = need[0].then(|| vec![T::zero(); na]);
                let mut gb = need[1].then(|| vec![T::zero(); nb]);
                // The smaller operand repeats over consecutive chunks of the
                // output.
                let chunk = na.min(nb);
                for (c, gc) in gd.chunks_exact(chunk.max(1)).enumerate() {
                    let off = c * chunk;
                    let (ao, bo) = (if na == chunk { 0 } else { off }, if nb == chunk { 0 } else { off });
                    if let Some(ga) = ga.as_mut() {
                        let dst = &mut ga[ao..ao + chunk];
                        match op {
                            Op::Mul => dst.iter_mut().zip(gc).zip(&bd[bo..bo + chunk]).for_each(|((d, &g), &v)| *d = *d + g * v),
                            _ => dst.iter_mut().zip(gc).for_each(|(d, &g)| *d = *d + g),
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        let dst = &mut gb[bo..bo + chunk];
                        match op {
                            Op::Mul => dst.iter_mut().zip(gc).zip(&ad[ao..ao + chunk]).for_each(|((d, &g), &v)| *d = *d + g * v),
                            Op::Sub => dst.iter_mut().zip(gc).for_each(|(d, &g)| *d = *d - g),
                            _ => dst.iter_mut().zip(gc).for_each(|(d, &g)| *d = *d + g),
                        }
                    }
                }
                vec![
                    ga.map(|d| Tensor { shape: a.shape().to_vec(), data: d }),
                    gb.map(|d| Tensor { shape: b.shape().to_vec(), data: d }),
                ]
            }
            Op::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let r = a.rank();
                let (m, k) = (a.shape()[r - 2], a.shape()[r - 1]);
                let n = b.shape()[b.rank() - 1];
                let batch: usize = a.shape()[..r - 2].iter().product();
                let mut ga = None;
                let mut gb = None;
                if b.rank() == 2 {
                    let rows = batch * m;
                    if need[0] {
                        let mut d = vec![T::zero(); a.numel()];
                        kernels::gemm(rows, n, k, gd, Layout::Normal, b.data(), Layout::Transposed, T::zero(), &mut d);
                        ga = Some(d);
                    }
                    if need[1] {
                        let mut d = vec![T::zero(); b.numel()];
                        kernels::gemm(k, rows, n, a.data(), Layout::Transposed, gd, Layout::Normal, T::zero(), &mut d);
                        gb = Some(d);
                    }
                } else {
                    if need[0] {
                        let mut d = vec![T::zero(); a.numel()];
                        for bi in 0..batch {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                &gd[bi * m * n..],
                                Layout::Normal,
                                &b.data()[bi * k * n..],
                                Layout::Transposed,
                                T::zero(),
                                &mut d[bi * m * k..],
                            );
                        }
                        ga = Some(d);
                    }
                    if need[1] {
                        let mut d = vec![T::zero(); b.numel()];
                        for bi in 0..batch {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                &a.data()[bi * m * k..],
                                Layout::Transposed,
                                &gd[bi * m * n..],
                                Layout::Normal,
                                T::zero(),
                                &mut d[bi * k * n..],
                            );
                        }
                        gb = Some(d);
                    }
                }
                vec![
                    ga.map(|d| Tensor { shape: a.shape().to_vec(), data: d }),
                    gb.map(|d| Tensor { shape: b.shape().to_vec(), data: d }),
                ]
            }
            Op::Reshape { .. } => {
                vec![Some(Tensor { shape: inp(0).shape().to_vec(), data: gd.to_vec() })]
            }
            Op::Transpose { axes } => {
                let (lo, hi) = (axes.0.min(axes.1), axes.0.max(axes.1));
                let data = if lo == hi { gd.to_vec() } else { kernels::swap_axes(gd, out.shape(), lo, hi) };
                vec![Some(Tensor { shape: inp(0).shape().to_vec(), data })]
            }
            Op::Slice { axis, start, end } => {
                let a = inp(0);
                let (outer, len, inner) = kernels::split_axis(a.shape(), *axis);
                let w = end - start;
                let mut d = vec![T::zero(); a.numel()];
                for o in 0..outer {
                    let src = o * w * inner;
                    let dst = (o * len + start) * inner;
                    d[dst..dst + w * inner].copy_from_slice(&gd[src..src + w * inner]);
                }
                vec![Some(Tensor { shape: a.shape().to_vec(), data: d })]
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = kernels::split_axis(out.shape(), *axis);
                let mut res = Vec::with_capacity(node.inputs.len());
                let mut offset = 0;
                for (i, &v) in node.inputs.iter().enumerate() {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    if need[i] {
                        let mut d = vec![T::zero(); outer * len * inner];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            d[o * len * inner..(o + 1) * len * inner]
                                .copy_from_slice(&gd[src..src + len * inner]);
                        }
                        res.push(Some(Tensor { shape: self.nodes[v.0].value.shape().to_vec(), data: d }));
                    } else {
                        res.push(None);
                    }
                    offset += len;
                }
                res
            }
            Op::EmbeddingGather { ids, .. } => {
                let table = inp(0);
                let d = table.shape()[1];
                let mut gt = vec![T::zero(); table.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    for (x, &y) in dst.iter_mut().zip(&gd[row * d..(row + 1) * d]) {
                        *x = *x + y;
                    }
                }
                vec![Some(Tensor { shape: table.shape().to_vec(), data: gt })]
            }
            Op::Softmax { axis } => {
                let (outer, len, inner) = kernels::split_axis(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot = dot + gd[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            d[p] = y[p] * (gd[p] - dot);
                        }
                    }
                }
                vec![Some(Tensor { shape: out.shape().to_vec(), data: d })]
            }
            Op::LogSoftmax { axis } => {
                let (outer, len, inner) = kernels::split_axis(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut s = T::zero();
                        for j in 0..len {
                            s = s + gd[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            d[p] = gd[p] - y[p].exp() * s;
                        }
                    }
                }
                vec![Some(Tensor { shape: out.shape().to_vec(), data: d })]
            }
            Op::LayerNorm { axis, .. } => {
                let (outer, len, inner) = kernels::split_axis(out.shape(), *axis);
                let y = out.data();
                let n = T::from_usize(len).unwrap();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let rstd = node.saved[2 * (o * inner + i) + 1];
                        let mut mg = T::zero();
                        let mut mgy = T::zero();
                        for j in 0..len {
                            let p = base + j * inner;
                            mg = mg + gd[p];
                            mgy = mgy + gd[p] * y[p];
                        }
                        mg = mg / n;
                        mgy = mgy / n;
                        for j in 0..len {
                            let p = base + j * inner;
                            d[p] = rstd * (gd[p] - mg - y[p] * mgy);
                        }
                    }
                }
                vec![Some(Tensor { shape: out.shape().to_vec(), data: d })]
            }
            Op::Gelu => {
                let x = inp(0).data();
                let d = x.iter().zip(gd).map(|(&x, &g)| g * kernels::gelu_grad(x)).collect();
                vec![Some(Tensor { shape: out.shape().to_vec(), data: d })]
            }
            Op::Relu => {
                let x = inp(0).data();
                let d = x.iter().zip(gd).map(|(&x, &g)| if x > T::zero() { g } else { T::zero() }).collect();
                vec![Some(Tensor { shape: out.shape().to_vec(), data: d })]
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (inp(0), inp(1));
                let (nb, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (o_ch, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let geom = ConvGeom { channels: c, height: h, width: wd, kh, kw, stride: *stride, pad: *pad };
                let (oh, ow) = geom.out_hw();
                let ncols = oh * ow;
                let rows = geom.col_rows();
                let mut gx = need[0].then(|| vec![T::zero(); x.numel()]);
                let mut gw = need[1].then(|| vec![T::zero(); w.numel()]);
                let mut cols = vec![T::zero(); rows * ncols];
                let mut dcols = vec![T::zero(); rows * ncols];
                let img_len = c * h * wd;
                for bi in 0..nb {
                    let gout = &gd[bi * o_ch * ncols..(bi + 1) * o_ch * ncols];
                    if let Some(gw) = gw.as_mut() {
                        kernels::im2col(&x.data()[bi * img_len..(bi + 1) * img_len], &geom, &mut cols);
                        kernels::gemm(o_ch, ncols, rows, gout, Layout::Normal, &cols, Layout::Transposed, T::one(), gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        kernels::gemm(rows, o_ch, ncols, w.data(), Layout::Transposed, gout, Layout::Normal, T::zero(), &mut dcols);
                        kernels::col2im(&dcols, &geom, &mut gx[bi * img_len..(bi + 1) * img_len]);
                    }
                }
                let mut res = vec![
                    gx.map(|d| Tensor { shape: x.shape().to_vec(), data: d }),
                    gw.map(|d| Tensor { shape: w.shape().to_vec(), data: d }),
                ];
                if node.inputs.len() == 3 {
                    res.push(need[2].then(|| {
                        let mut gb = vec![T::zero(); o_ch];
                        for bi in 0..nb {
                            for (oc, gbv) in gb.iter_mut().enumerate() {
                                let s = (bi * o_ch + oc) * ncols;
                                *gbv = *gbv + gd[s..s + ncols].iter().copied().sum::<T>();
                            }
                        }
                        Tensor { shape: vec![o_ch], data: gb }
                    }));
                }
                res
            }
            Op::MaskedFill { mask, .. } => {
                let m = mask.len();
                let d = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| if mask[i % m] { T::zero() } else { g })
                    .collect();
                vec![Some(Tensor { shape: out.shape().to_vec(), data: d })]
            }
            Op::ReduceSum { axis } | Op::ReduceMean { axis } => {
                let a = inp(0);
                let mean = matches!(op, Op::ReduceMean { .. });
                let d = match axis {
                    None => {
                        let mut v = gd[0];
                        if mean {
                            v = v / T::from_usize(a.numel()).unwrap();
                        }
                        vec![v; a.numel()]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = kernels::split_axis(a.shape(), *ax);
                        let f = if mean { T::one() / T::from_usize(len).unwrap() } else { T::one() };
                        let mut d = vec![T::zero(); a.numel()];
                        for o in 0..outer {
                            for j in 0..len {
                                for i in 0..inner {
                                    d[(o * len + j) * inner + i] = gd[o * inner + i] * f;
                                }
                            }
                        }
                        d
                    }
                };
                vec![Some(Tensor { shape: a.shape().to_vec(), data: d })]
            }
            Op::Scale { factor } => {
                let f = T::from_f64_lossy(*factor);
                vec![Some(Tensor { shape: out.shape().to_vec(), data: gd.iter().map(|&g| g * f).collect() })]
            }
            Op::L2Normalize { axis, .. } => {
                let (outer, len, inner) = kernels::split_axis(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let norm = node.saved[o * inner + i];
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot = dot + gd[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            d[p] = (gd[p] - y[p] * dot) / norm;
                        }
                    }
                }
                vec![Some(Tensor { shape: out.shape().to_vec(), data: d })]
            }
            Op::CrossEntropyWithLogits { targets, weights } => {
                let logits = inp(0);
                let v = *logits.shape().last().unwrap();
                let probs = &node.saved;
                let total: f64 = match weights {
                    Some(w) => w.iter().sum(),
                    None => targets.len() as f64,
                };
                let mut d = vec![T::zero(); logits.numel()];
                if total > 0.0 {
                    for (row, &t) in targets.iter().enumerate() {
                        let w = weights.as_ref().map_or(1.0, |w| w[row]);
                        let coef = gd[0] * T::from_f64_lossy(w / total);
                        for j in 0..v {
                            let p = row * v + j;
                            let ind = if j == t { T::one() } else { T::zero() };
                            d[p] = coef * (probs[p] - ind);
                        }
                    }
                }
                vec![Some(Tensor { shape: logits.shape().to_vec(), data: d })]
            }
        })
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(g.data) {
                *a = *a + b;
            }
        }
    }
}

fn binary_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if is_suffix(b, a) {
        Ok(a.to_vec())
    } else if is_suffix(a, b) {
        Ok(b.to_vec())
    } else {
        Err(Error::shape(op, format!("{a:?} and {b:?} are not trailing-axis compatible")))
    }
}

fn forward<T: Element>(op: &Op, x: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<T>)> {
    let name = op.name();
    let arity = match op {
        Op::Concat { .. } => None,
        Op::Add | Op::Sub | Op::Mul | Op::MatMul => Some(2),
        Op::Conv2d { .. } => None,
        _ => Some(1),
    };
    if let Some(n) = arity {
        if x.len() != n {
            return Err(Error::shape(name, format!("expected {n} inputs, got {}", x.len())));
        }
    }
    let none = Vec::new;
    let t = |shape: Vec<usize>, data: Vec<T>| Tensor { shape, data };
    Ok(match op {
        Op::Add | Op::Sub | Op::Mul => {
            let shape = binary_shape(name, x[0].shape(), x[1].shape())?;
            let (a, b) = (x[0].data(), x[1].data());
            let (na, nb) = (a.len(), b.len());
            let numel: usize = shape.iter().product();
            let chunk = na.min(nb);
            let f = |u: T, v: T| match op {
                Op::Add => u + v,
                Op::Sub => u - v,
                _ => u * v,
            };
            let mut data = Vec::with_capacity(numel);
            if let Some(chunks) = numel.checked_div(chunk) {
                for c in 0..chunks {
                    let off = c * chunk;
                    let (ao, bo) = (if na == chunk { 0 } else { off }, if nb == chunk { 0 } else { off });
                    data.extend(a[ao..ao + chunk].iter().zip(&b[bo..bo + chunk]).map(|(&u, &v)| f(u, v)));
                }
            }
            (t(shape, data), none())
        }
        Op::MatMul => {
            let (a, b) = (x[0], x[1]);
            if a.rank() < 2 || b.rank() < 2 {
                return Err(Error::shape(name, format!("needs rank >= 2, got {:?} x {:?}", a.shape(), b.shape())));
            }
            let r = a.rank();
            let (m, k) = (a.shape()[r - 2], a.shape()[r - 1]);
            let (kb, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
            if k != kb {
                return Err(Error::shape(name, format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape())));
            }
            let lead = &a.shape()[..r - 2];
            let batch: usize = lead.iter().product();
            let mut shape = lead.to_vec();
            shape.extend([m, n]);
            let mut data = vec![T::zero(); batch * m * n];
            if b.rank() == 2 {
                kernels::gemm(batch * m, k, n, a.data(), Layout::Normal, b.data(), Layout::Normal, T::zero(), &mut data);
            } else {
                if b.shape()[..b.rank() - 2] != *lead {
                    return Err(Error::shape(name, format!("batch dims differ: {:?} x {:?}", a.shape(), b.shape())));
                }
                for bi in 0..batch {
                    kernels::gemm(
                        m,
                        k,
                        n,
                        &a.data()[bi * m * k..],
                        Layout::Normal,
                        &b.data()[bi * k * n..],
                        Layout::Normal,
                        T::zero(),
                        &mut data[bi * m * n..],
                    );
                }
            }
            (t(shape, data), none())
        }
        Op::Reshape { shape } => {
            let numel: usize = shape.iter().product();
            if numel != x[0].numel() {
                return Err(Error::shape(name, format!("cannot view {:?} as {shape:?}", x[0].shape())));
            }
            (t(shape.clone(), x[0].data().to_vec()), none())
        }
        Op::Transpose { axes } => {
            let s = x[0].shape();
            check_axis(name, s, axes.0)?;
            check_axis(name, s, axes.1)?;
            let (lo, hi) = (axes.0.min(axes.1), axes.0.max(axes.1));
            let mut shape = s.to_vec();
            shape.swap(lo, hi);
            let data = if lo == hi { x[0].data().to_vec() } else { kernels::swap_axes(x[0].data(), s, lo, hi) };
            (t(shape, data), none())
        }
        Op::Slice { axis, start, end } => {
            let s = x[0].shape();
            check_axis(name, s, *axis)?;
            if start >= end || *end > s[*axis] {
                return Err(Error::shape(name, format!("range {start}..{end} invalid for dim {}", s[*axis])));
            }
            let (outer, len, inner) = kernels::split_axis(s, *axis);
            let w = end - start;
            let mut data = Vec::with_capacity(outer * w * inner);
            for o in 0..outer {
                let src = (o * len + start) * inner;
                data.extend_from_slice(&x[0].data()[src..src + w * inner]);
            }
            let mut shape = s.to_vec();
            shape[*axis] = w;
            (t(shape, data), none())
        }
        Op::Concat { axis } => {
            if x.is_empty() {
                return Err(Error::shape(name, "no inputs"));
            }
            let s0 = x[0].shape();
            check_axis(name, s0, *axis)?;
            let mut total = 0;
            for xi in x {
                let s = xi.shape();
                let compatible = s.len() == s0.len()
                    && s.iter().zip(s0).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                if !compatible {
                    return Err(Error::shape(name, format!("{s:?} does not match {s0:?} off axis {axis}")));
                }
                total += s[*axis];
            }
            let (outer, _, inner) = kernels::split_axis(s0, *axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for xi in x {
                    let len = xi.shape()[*axis];
                    data.extend_from_slice(&xi.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = s0.to_vec();
            shape[*axis] = total;
            (t(shape, data), none())
        }
        Op::EmbeddingGather { ids, ids_shape } => {
            let table = x[0];
            if table.rank() != 2 {
                return Err(Error::shape(name, format!("table must be [V, d], got {:?}", table.shape())));
            }
            if ids_shape.iter().product::<usize>() != ids.len() {
                return Err(Error::shape(name, format!("{} ids do not fill {ids_shape:?}", ids.len())));
            }
            let (v, d) = (table.shape()[0], table.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids.iter() {
                if id >= v {
                    return Err(Error::shape(name, format!("id {id} out of range for vocabulary {v}")));
                }
                data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
            }
            let mut shape = ids_shape.clone();
            shape.push(d);
            (t(shape, data), none())
        }
        Op::Softmax { axis } | Op::LogSoftmax { axis } => {
            let s = x[0].shape();
            check_axis(name, s, *axis)?;
            let (outer, len, inner) = kernels::split_axis(s, *axis);
            let mut data = vec![T::zero(); x[0].numel()];
            if matches!(op, Op::Softmax { .. }) {
                kernels::softmax(x[0].data(), &mut data, outer, len, inner);
            } else {
                kernels::log_softmax(x[0].data(), &mut data, outer, len, inner);
            }
            (t(s.to_vec(), data), none())
        }
        Op::LayerNorm { axis, eps } => {
            let s = x[0].shape();
            check_axis(name, s, *axis)?;
            let (outer, len, inner) = kernels::split_axis(s, *axis);
            let mut data = vec![T::zero(); x[0].numel()];
            let mut stats = vec![T::zero(); 2 * outer * inner];
            kernels::layer_norm(x[0].data(), &mut data, &mut stats, outer, len, inner, T::from_f64_lossy(*eps));
            (t(s.to_vec(), data), stats)
        }
        Op::Gelu => (t(x[0].shape().to_vec(), x[0].data().iter().map(|&v| kernels::gelu(v)).collect()), none()),
        Op::Relu => (
            t(x[0].shape().to_vec(), x[0].data().iter().map(|&v| v.max(T::zero())).collect()),
            none(),
        ),
        Op::Conv2d { stride, pad } => {
            if !(x.len() == 2 || x.len() == 3) {
                return Err(Error::shape(name, format!("expected 2 or 3 inputs, got {}", x.len())));
            }
            let (xi, w) = (x[0], x[1]);
            if xi.rank() != 4 || w.rank() != 4 || xi.shape()[1] != w.shape()[1] || *stride == 0 {
                return Err(Error::shape(name, format!("input {:?} weight {:?}", xi.shape(), w.shape())));
            }
            let (nb, c, h, wd) = (xi.shape()[0], xi.shape()[1], xi.shape()[2], xi.shape()[3]);
            let (o_ch, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
            if h + 2 * pad < kh || wd + 2 * pad < kw {
                return Err(Error::shape(name, "kernel larger than padded input"));
            }
            if x.len() == 3 && x[2].shape() != [o_ch] {
                return Err(Error::shape(name, format!("bias {:?} for {o_ch} channels", x[2].shape())));
            }
            let geom = ConvGeom { channels: c, height: h, width: wd, kh, kw, stride: *stride, pad: *pad };
            let (oh, ow) = geom.out_hw();
            let ncols = oh * ow;
            let mut cols = vec![T::zero(); geom.col_rows() * ncols];
            let mut data = vec![T::zero(); nb * o_ch * ncols];
            let img_len = c * h * wd;
            for bi in 0..nb {
                kernels::im2col(&xi.data()[bi * img_len..(bi + 1) * img_len], &geom, &mut cols);
                let dst = &mut data[bi * o_ch * ncols..(bi + 1) * o_ch * ncols];
                if x.len() == 3 {
                    for (oc, &b) in x[2].data().iter().enumerate() {
                        dst[oc * ncols..(oc + 1) * ncols].fill(b);
                    }
                }
                let beta = if x.len() == 3 { T::one() } else { T::zero() };
                kernels::gemm(o_ch, geom.col_rows(), ncols, w.data(), Layout::Normal, &cols, Layout::Normal, beta, dst);
            }
            (t(vec![nb, o_ch, oh, ow], data), none())
        }
        Op::MaskedFill { mask, mask_shape, value } => {
            if !is_suffix(mask_shape, x[0].shape()) || mask_shape.iter().product::<usize>() != mask.len() {
                return Err(Error::shape(name, format!("mask {mask_shape:?} vs input {:?}", x[0].shape())));
            }
            let fill = T::from_f64_lossy(*value);
            let m = mask.len().max(1);
            let data = x[0]
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| if mask[i % m] { fill } else { v })
                .collect();
            (t(x[0].shape().to_vec(), data), none())
        }
        Op::ReduceSum { axis } | Op::ReduceMean { axis } => {
            let a = x[0];
            let mean = matches!(op, Op::ReduceMean { .. });
            match axis {
                None => {
                    let mut s: T = a.data().iter().copied().sum();
                    if mean {
                        s = s / T::from_usize(a.numel().max(1)).unwrap();
                    }
                    (Tensor::scalar(s), none())
                }
                Some(ax) => {
                    check_axis(name, a.shape(), *ax)?;
                    let (outer, len, inner) = kernels::split_axis(a.shape(), *ax);
                    let mut data = vec![T::zero(); outer * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                data[o * inner + i] = data[o * inner + i] + a.data()[(o * len + j) * inner + i];
                            }
                        }
                    }
                    if mean {
                        let f = T::from_usize(len).unwrap();
                        data.iter_mut().for_each(|v| *v = *v / f);
                    }
                    let mut shape = a.shape().to_vec();
                    shape.remove(*ax);
                    (t(shape, data), none())
                }
            }
        }
        Op::Scale { factor } => {
            let f = T::from_f64_lossy(*factor);
            (t(x[0].shape().to_vec(), x[0].data().iter().map(|&v| v * f).collect()), none())
        }
        Op::L2Normalize { axis, eps } => {
            let s = x[0].shape();
            check_axis(name, s, *axis)?;
            let (outer, len, inner) = kernels::split_axis(s, *axis);
            let e = T::from_f64_lossy(*eps);
            let xd = x[0].data();
            let mut data = vec![T::zero(); xd.len()];
            let mut norms = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut ss = T::zero();
                    for j in 0..len {
                        ss = ss + xd[base + j * inner] * xd[base + j * inner];
                    }
                    let norm = (ss + e).sqrt();
                    if norm == T::zero() {
                        return Err(Error::Numeric("l2_normalize of a zero vector".into()));
                    }
                    norms[o * inner + i] = norm;
                    for j in 0..len {
                        data[base + j * inner] = xd[base + j * inner] / norm;
                    }
                }
            }
            (t(s.to_vec(), data), norms)
        }
        Op::CrossEntropyWithLogits { targets, weights } => {
            let l = x[0];
            if l.rank() == 0 {
                return Err(Error::shape(name, "logits must have a class axis"));
            }
            let v = *l.shape().last().unwrap();
            let rows = l.numel() / v.max(1);
            if targets.len() != rows {
                return Err(Error::shape(name, format!("{} targets for {rows} rows", targets.len())));
            }
            if let Some(w) = weights {
                if w.len() != rows {
                    return Err(Error::shape(name, format!("{} weights for {rows} rows", w.len())));
                }
            }
            let mut probs = vec![T::zero(); l.numel()];
            kernels::softmax(l.data(), &mut probs, rows, v, 1);
            let total: f64 = weights.as_ref().map_or(rows as f64, |w| w.iter().sum());
            let mut loss = 0.0f64;
            for (row, &tgt) in targets.iter().enumerate() {
                if tgt >= v {
                    return Err(Error::shape(name, format!("target {tgt} out of range for {v} classes")));
                }
                let w = weights.as_ref().map_or(1.0, |w| w[row]);
                if w == 0.0 {
                    continue;
                }
                // log p = x_t - logsumexp(x)
                let xs = &l.data()[row * v..(row + 1) * v];
                let max = xs.iter().fold(f64::NEG_INFINITY, |m, &u| m.max(u.as_f64()));
                let lse = max + xs.iter().map(|&u| (u.as_f64() - max).exp()).sum::<f64>().ln();
                loss += w * (lse - xs[tgt].as_f64());
            }
            let value = if total > 0.0 { loss / total } else { 0.0 };
            (Tensor::scalar(T::from_f64_lossy(value)), probs)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[2, 2], &[1., 2., 3., 4.]));
        let i = tape.constant(t64(&[2, 2], &[1., 0., 0., 1.]));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn softmax_symmetric() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let s = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_matches_hand_formula() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[3], &[1., 2., 3.]));
        let y = tape.layer_norm(a, 0, 0.0).unwrap();
        // mean 2, biased variance 2/3
        let sd = (2.0f64 / 3.0).sqrt();
        let expect = [-1.0 / sd, 0.0, 1.0 / sd];
        for (got, want) in tape.value(y).data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
        let d = tape.value(y).data();
        let mean: f64 = d.iter().sum::<f64>() / 3.0;
        let var: f64 = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_square_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[1., 2., 3.]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq, None).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[2, 3], 0.5), true);
        let s = tape.sum(x, None).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn backward_constant_root_is_empty() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[4]));
        let s = tape.sum(x, None).unwrap();
        assert!(tape.backward(s).unwrap().is_empty());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[4]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { op, detail }) => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("[2, 3]"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = tape.constant(Tensor::ones(&[2]));
        assert!(matches!(tape.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn trailing_broadcast_add() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2, 3], &[0., 1., 2., 3., 4., 5.]), true);
        let b = tape.leaf(t64(&[3], &[10., 20., 30.]), true);
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[10., 21., 32., 13., 24., 35.]);
        let s = tape.sum(c, None).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2., 2., 2.]);
    }

    #[test]
    fn straight_through_passes_identity() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.3, -0.2]).unwrap(), true);
        let y = tape.straight_through(x, Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
        let s = tape.sum(y, None).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_zero_weight_is_zero() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(t64(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let loss = tape.cross_entropy(l, &[0, 1], Some(&[0.0, 0.0])).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(l).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
