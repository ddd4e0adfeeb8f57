//! Raw slice kernels shared by the tape's forward and backward passes.

use super::NumericsError;

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, NumericsError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(NumericsError::Shape(format!(
                    "shapes {a:?} and {b:?} are not broadcast-compatible"
                )))
            }
        };
    }
    Ok(out)
}

/// Maps linear indices of a broadcast output back into a source tensor.
pub struct BroadcastMap {
    out_shape: Vec<usize>,
    strides: Vec<usize>,
}

impl BroadcastMap {
    pub fn new(src: &[usize], out: &[usize]) -> Self {
        let rank = out.len();
        let mut strides = vec![0; rank];
        let mut acc = 1;
        for i in (0..src.len()).rev() {
            let o = i + rank - src.len();
            strides[o] = if src[i] == 1 && out[o] != 1 { 0 } else { acc };
            acc *= src[i];
        }
        Self { out_shape: out.to_vec(), strides }
    }

    pub fn source(&self, mut linear: usize) -> usize {
        let mut off = 0;
        for i in (0..self.out_shape.len()).rev() {
            let d = self.out_shape[i];
            off += (linear % d) * self.strides[i];
            linear /= d;
        }
        off
    }

    /// Source offset for every output element, in output order.
    pub fn offsets(&self) -> Vec<usize> {
        let n: usize = self.out_shape.iter().product();
        let rank = self.out_shape.len();
        let mut out = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n {
            out.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += self.strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                off -= self.strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        out
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with four fixed-order partial sums.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for t in 0..len {
                max = max.max(x[base + t * inner]);
            }
            let mut sum = 0.0;
            for t in 0..len {
                let e = (x[base + t * inner] - max).exp();
                y[base + t * inner] = e;
                sum += e;
            }
            for t in 0..len {
                y[base + t * inner] /= sum;
            }
        }
    }
    y
}

pub fn softmax_backward(y: &[f64], dy: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut s = 0.0;
            for t in 0..len {
                s += y[base + t * inner] * dy[base + t * inner];
            }
            for t in 0..len {
                let k = base + t * inner;
                dx[k] = y[k] * (dy[k] - s);
            }
        }
    }
    dx
}

/// Log-softmax over the last axis.
pub fn log_softmax_rows(x: &[f64], len: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (row, out) in x.chunks(len).zip(y.chunks_mut(len)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for (o, v) in out.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    y
}

/// Output index permutation: `out[i] = x[src[i]]` for a transpose by `axes`.
pub fn permute_offsets(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut src = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        src.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, src)
}
