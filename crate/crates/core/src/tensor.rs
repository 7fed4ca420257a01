//! Dense row-major tensors and the raw kernels the tape builds on.

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array. The element count always equals the product of
/// the extents; a rank-0 tensor holds exactly one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows.len(), width]` matrix; every row must have the same width.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            if row.len() != width {
                return Err(invalid("ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), width], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(invalid(format!("item() on shape {:?}", self.shape)))
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Extent of everything past the leading axis.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[S] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|x| !x.is_zero()).count()
    }

    /// Stacks `[n_i, w]` tensors along the leading axis.
    pub fn concat_rows(parts: &[&Tensor<S>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Self::new(shape, data)
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows() || self.rank() == 0 {
            return Err(invalid(format!(
                "row slice {start}..{} of shape {:?}",
                start + len,
                self.shape
            )));
        }
        let w = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self::new(shape, self.data[start * w..(start + len) * w].to_vec())
    }
}

/// How a binary elementwise op lines up its operands: the smaller operand's
/// shape must be a trailing suffix of the larger one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// rhs repeats `reps` times along the leading dims of lhs
    Rhs {
        reps: usize,
    },
    Lhs {
        reps: usize,
    },
}

pub(crate) fn broadcast_plan(
    op: &'static str,
    left: &[usize],
    right: &[usize],
) -> Result<(Broadcast, Vec<usize>)> {
    let mismatch = || Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    };
    if left == right {
        return Ok((Broadcast::Same, left.to_vec()));
    }
    if right.len() < left.len() && left.ends_with(right) {
        let reps = left[..left.len() - right.len()].iter().product();
        return Ok((Broadcast::Rhs { reps }, left.to_vec()));
    }
    if left.len() < right.len() && right.ends_with(left) {
        let reps = right[..right.len() - left.len()].iter().product();
        return Ok((Broadcast::Lhs { reps }, right.to_vec()));
    }
    Err(mismatch())
}

pub(crate) fn zip_broadcast<S: Scalar>(
    plan: Broadcast,
    a: &[S],
    b: &[S],
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    match plan {
        Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Rhs { .. } => a
            .chunks_exact(b.len().max(1))
            .flat_map(|chunk| {
                chunk
                    .iter()
                    .zip(b)
                    .map(|(&x, &y)| f(x, y))
                    .collect::<Vec<_>>()
            })
            .collect(),
        Broadcast::Lhs { .. } => b
            .chunks_exact(a.len().max(1))
            .flat_map(|chunk| {
                a.iter()
                    .zip(chunk)
                    .map(|(&x, &y)| f(x, y))
                    .collect::<Vec<_>>()
            })
            .collect(),
    }
}

/// Folds a full-size gradient back onto an operand that was broadcast `reps` times.
pub(crate) fn reduce_broadcast<S: Scalar>(full: &[S], small_len: usize) -> Vec<S> {
    let mut out = vec![S::zero(); small_len];
    for chunk in full.chunks_exact(small_len.max(1)) {
        for (o, &g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

/// `a [m,k] · b [k,n]`
pub(crate) fn matmul_kernel<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av.is_zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · g` for `a [m,k]`, `g [m,n]` → `[k,n]`
pub(crate) fn matmul_tn_kernel<S: Scalar>(
    a: &[S],
    g: &[S],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av.is_zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// `g · bᵀ` for `g [m,n]`, `b [k,n]` → `[m,k]`
pub(crate) fn matmul_nt_kernel<S: Scalar>(
    g: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    }
    out
}
