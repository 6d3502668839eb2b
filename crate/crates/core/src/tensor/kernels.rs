//! Slice-level numeric kernels shared by the tape and the cached decoder.

use super::Element;

/// Layout of a matrix operand: row-major as stored, or transposed view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Normal,
    Transposed,
}

/// `c = a · b + beta * c` where `a` is `m×k` and `b` is `k×n` after applying
/// their layouts. Storage is row-major; a transposed operand is stored with
/// its un-transposed shape.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: out too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 || (la == Layout::Transposed && lb == Layout::Transposed) {
        small_gemm(m, k, n, a, la, b, lb, beta, c);
        return;
    }
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: bounds checked above for the dense extents implied by the
    // strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Direct loop for the empty-inner and doubly transposed cases.
#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Element>(m: usize, k: usize, n: usize, a: &[T], la: Layout, b: &[T], lb: Layout, beta: T, c: &mut [T]) {
    let a_at = |i: usize, p: usize| match la {
        Layout::Normal => a[i * k + p],
        Layout::Transposed => a[p * m + i],
    };
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        if beta == T::zero() {
            crow.iter_mut().for_each(|v| *v = T::zero());
        } else if beta != T::one() {
            crow.iter_mut().for_each(|v| *v = *v * beta);
        }
        match lb {
            Layout::Normal => {
                for p in 0..k {
                    let aip = a_at(i, p);
                    for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *cv = *cv + aip * bv;
                    }
                }
            }
            Layout::Transposed => {
                let arow = &a[i * k..(i + 1) * k];
                for (j, cv) in crow.iter_mut().enumerate() {
                    *cv = *cv + dot(arow, &b[j * k..(j + 1) * k]);
                }
            }
        }
    }
}

/// Dot product with eight independent accumulators.
pub fn dot<T: Element>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let (xs, ys) = (&x[c * 8..c * 8 + 8], &y[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + xs[l] * ys[l];
        }
    }
    let mut s = T::zero();
    for i in chunks * 8..x.len() {
        s = s + x[i] * y[i];
    }
    acc.iter().fold(s, |a, &b| a + b)
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Below this shifted logit `exp` underflows to zero in both precisions, so
/// masked entries skip the call.
const EXP_FLOOR: f64 = -800.0;

pub fn softmax<T: Element>(x: &[T], out: &mut [T], outer: usize, len: usize, inner: usize) {
    let floor = T::from_f64_lossy(EXP_FLOOR);
    if inner == 1 {
        for (xs, ys) in x.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
            let max = xs.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for (y, &v) in ys.iter_mut().zip(xs) {
                let d = v - max;
                *y = if d < floor { T::zero() } else { d.exp() };
                sum = sum + *y;
            }
            let inv = T::one() / sum;
            ys.iter_mut().for_each(|y| *y = *y * inv);
        }
        return;
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for j in 0..len {
                out[base + j * inner] = out[base + j * inner] * inv;
            }
        }
    }
}

pub fn log_softmax<T: Element>(x: &[T], out: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                sum = sum + (x[base + j * inner] - max).exp();
            }
            let lse = max + sum.ln();
            for j in 0..len {
                out[base + j * inner] = x[base + j * inner] - lse;
            }
        }
    }
}

/// Normalises each lane along the axis; writes `(mean, rstd)` per lane into
/// `stats` (length `2 * outer * inner`).
#[allow(clippy::too_many_arguments)]
pub fn layer_norm<T: Element>(
    x: &[T],
    out: &mut [T],
    stats: &mut [T],
    outer: usize,
    len: usize,
    inner: usize,
    eps: T,
) {
    let n = T::from_usize(len).unwrap();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mean = T::zero();
            for j in 0..len {
                mean = mean + x[base + j * inner];
            }
            mean = mean / n;
            let mut var = T::zero();
            for j in 0..len {
                let d = x[base + j * inner] - mean;
                var = var + d * d;
            }
            var = var / n;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..len {
                out[base + j * inner] = (x[base + j * inner] - mean) * rstd;
            }
            let lane = o * inner + i;
            stats[2 * lane] = mean;
            stats[2 * lane + 1] = rstd;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`, saturating cleanly at both ends.
fn tanh<T: Element>(u: T) -> T {
    let two = T::from_f64_lossy(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

pub fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + tanh(c * (x + a * x * x * x)))
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = tanh(u);
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Swaps axes `a < b` of a row-major array with shape `shape`.
pub fn swap_axes<T: Element>(x: &[T], shape: &[usize], a: usize, b: usize) -> Vec<T> {
    debug_assert!(a < b);
    let outer: usize = shape[..a].iter().product();
    let na = shape[a];
    let mid: usize = shape[a + 1..b].iter().product();
    let nb = shape[b];
    let inner: usize = shape[b + 1..].iter().product();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..na {
            for m in 0..mid {
                for j in 0..nb {
                    let src = (((o * na + i) * mid + m) * nb + j) * inner;
                    let dst = (((o * nb + j) * mid + m) * na + i) * inner;
                    out[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
                }
            }
        }
    }
    out
}

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.pad - self.kh) / self.stride + 1;
        let ow = (self.width + 2 * self.pad - self.kw) / self.stride + 1;
        (oh, ow)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Unfolds one `[C, H, W]` image into `[C*kh*kw, oh*ow]` columns.
pub fn im2col<T: Element>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let ncols = oh * ow;
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width
                        {
                            img[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub fn col2im<T: Element>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let ncols = oh * ow;
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        let idx = (c * g.height + iy as usize) * g.width + ix as usize;
                        img[idx] = img[idx] + src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, Layout::Transposed, &b, Layout::Normal, 0.0, &mut c);
        // aᵀ·b = [[1,3],[2,4]]·b
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, Layout::Normal, &b, Layout::Transposed, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn swap_axes_is_involution() {
        let shape = [2, 3, 4, 5];
        let x: Vec<f32> = (0..120).map(|v| v as f32).collect();
        let y = swap_axes(&x, &shape, 1, 3);
        let z = swap_axes(&y, &[2, 5, 4, 3], 1, 3);
        assert_eq!(x, z);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        let g = ConvGeom { channels: 2, height: 5, width: 4, kh: 3, kw: 3, stride: 1, pad: 1 };
        let img: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).sin()).collect();
        let (oh, ow) = g.out_hw();
        let mut cols = vec![0.0; g.col_rows() * oh * ow];
        im2col(&img, &g, &mut cols);
        let probe: Vec<f64> = (0..cols.len()).map(|v| (v as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&probe).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        col2im(&probe, &g, &mut back);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
