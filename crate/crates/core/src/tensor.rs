//! Dense row-major `f64` tensors.
//!
//! Every kernel the tape needs lives here as a plain function over values, so
//! code that does not need gradients can call them directly.
//!
//! Elementwise binary ops broadcast in a deliberately narrow way: operands are
//! viewed as 2-D `(rows, cols)` (rank 0 is `1x1`, rank 1 is `1xn`, higher ranks
//! fold all leading dims into rows), and a dimension of size 1 stretches to
//! match the other operand.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("holds {} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// 2-D view used by broadcasting and matrix kernels.
    pub fn dims2(&self) -> (usize, usize) {
        dims2(&self.shape)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.numel() != other.numel() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }
}

pub(crate) fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

/// Output shape of a broadcasting elementwise op.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if nb == 1 {
        return Ok(a.to_vec());
    }
    if na == 1 {
        return Ok(b.to_vec());
    }
    let (ra, ca) = dims2(a);
    let (rb, cb) = dims2(b);
    let rows_ok = ra == rb || ra == 1 || rb == 1;
    let cols_ok = ca == cb || ca == 1 || cb == 1;
    if !(rows_ok && cols_ok) {
        return Err(Error::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    let (r, c) = (ra.max(rb), ca.max(cb));
    if (ra, ca) == (r, c) {
        Ok(a.to_vec())
    } else if (rb, cb) == (r, c) {
        Ok(b.to_vec())
    } else {
        Ok(vec![r, c])
    }
}

pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        return a.zip_map(b, op, f);
    }
    let shape = broadcast_shape(op, &a.shape, &b.shape)?;
    let (r, c) = dims2(&shape);
    let (ra, ca) = a.dims2();
    let (rb, cb) = b.dims2();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ra == 1 { 0 } else { i };
        let ib = if rb == 1 { 0 } else { i };
        for j in 0..c {
            let ja = if ca == 1 { 0 } else { j };
            let jb = if cb == 1 { 0 } else { j };
            data.push(f(a.data[ia * ca + ja], b.data[ib * cb + jb]));
        }
    }
    Ok(Tensor { shape, data })
}

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let numel: usize = shape.iter().product();
    if numel == 1 {
        return Tensor {
            shape: shape.to_vec(),
            data: vec![grad.sum()],
        };
    }
    let (r, c) = grad.dims2();
    let (tr, tc) = dims2(shape);
    let mut out = vec![0.0; tr * tc];
    for i in 0..r {
        let oi = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let oj = if tc == 1 { 0 } else { j };
            out[oi * tc + oj] += grad.data[i * c + j];
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data: out,
    }
}

/// `a (m x k) * b (k x n)`; a rank-1 `b` is treated as a column and yields a rank-1 result.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        left: a.shape.clone(),
        right: b.shape.clone(),
    };
    if a.rank() != 2 || b.rank() == 0 || b.rank() > 2 {
        return Err(mismatch());
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (kb, n) = if b.rank() == 1 {
        (b.shape[0], 1)
    } else {
        (b.shape[0], b.shape[1])
    };
    if k != kb {
        return Err(mismatch());
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    let shape = if b.rank() == 1 { vec![m] } else { vec![m, n] };
    Ok(Tensor { shape, data: out })
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a^T (k x m)^T * b (k x n)` without materialising the transpose.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a (m x k) * b^T` where `b` is `n x k`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "transpose",
            shape: a.shape.clone(),
            reason: "expected a matrix".into(),
        });
    }
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = a.data[i * c + j];
        }
    }
    Ok(Tensor {
        shape: vec![c, r],
        data,
    })
}

/// Concatenation of matrices along `axis` (0 = rows, 1 = columns).
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::InvalidShape {
        op: "concat",
        shape: Vec::new(),
        reason: "no inputs".into(),
    })?;
    let (r0, c0) = first.dims2();
    match axis {
        0 => {
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let (r, c) = p.dims2();
                if c != c0 {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        left: first.shape.clone(),
                        right: p.shape.clone(),
                    });
                }
                rows += r;
                data.extend_from_slice(&p.data);
            }
            Ok(Tensor {
                shape: vec![rows, c0],
                data,
            })
        }
        1 => {
            let mut cols = 0;
            for p in parts {
                let (r, c) = p.dims2();
                if r != r0 {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        left: first.shape.clone(),
                        right: p.shape.clone(),
                    });
                }
                cols += c;
            }
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for p in parts {
                    data.extend_from_slice(p.row(i));
                }
            }
            Ok(Tensor {
                shape: vec![r0, cols],
                data,
            })
        }
        _ => Err(Error::InvalidShape {
            op: "concat",
            shape: first.shape.clone(),
            reason: format!("axis {axis} out of range"),
        }),
    }
}

/// Contiguous block `[start, start + len)` along `axis` of a matrix.
pub fn slice(a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = a.dims2();
    let bad = |reason: String| Error::InvalidShape {
        op: "slice",
        shape: a.shape.clone(),
        reason,
    };
    match axis {
        0 => {
            if start + len > r {
                return Err(bad(format!("rows {start}..{} out of range", start + len)));
            }
            Ok(Tensor {
                shape: vec![len, c],
                data: a.data[start * c..(start + len) * c].to_vec(),
            })
        }
        1 => {
            if start + len > c {
                return Err(bad(format!("cols {start}..{} out of range", start + len)));
            }
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&a.data[i * c + start..i * c + start + len]);
            }
            Ok(Tensor {
                shape: vec![r, len],
                data,
            })
        }
        _ => Err(bad(format!("axis {axis} out of range"))),
    }
}

/// Sum over one axis of the 2-D view; the reduced axis is kept with size 1.
pub fn sum_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    let (r, c) = a.dims2();
    match axis {
        0 => {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(a.row(i)) {
                    *o += v;
                }
            }
            Ok(Tensor {
                shape: vec![1, c],
                data: out,
            })
        }
        1 => Ok(Tensor {
            shape: vec![r, 1],
            data: (0..r).map(|i| a.row(i).iter().sum()).collect(),
        }),
        _ => Err(Error::InvalidShape {
            op: "sum_axis",
            shape: a.shape.clone(),
            reason: format!("axis {axis} out of range"),
        }),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sign with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Numerically stable `log(sum(exp(xs)))`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
