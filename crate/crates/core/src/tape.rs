//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive as it is evaluated. Node parents always
//! precede the node, so a single reverse sweep over the recording is a valid
//! topological order for backpropagation.

use std::collections::HashMap;

use crate::error::{invalid, Error, Result};
use crate::params::{ParamStore, StoreId};
use crate::scalar::Scalar;
use crate::tensor::{
    broadcast_plan, matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, reduce_broadcast,
    zip_broadcast, Broadcast, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Constant,
    Param {
        store: StoreId,
        name: String,
    },
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, S),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    SqL2(usize),
    Relu(usize),
    Silu(usize),
    Sin(usize),
    Cos(usize),
    Reshape(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        src: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    param_cache: HashMap<(StoreId, String), Var>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward sweep: one optional gradient per recorded node.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    visits: usize,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Number of nodes the sweep visited; always the tape length.
    pub fn visits(&self) -> usize {
        self.visits
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<S> {
        self.value(v).item()
    }

    /// `(store, name)` for every parameter leaf on the tape.
    pub fn param_leaves(&self) -> Vec<(StoreId, &str)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param { store, name } => Some((*store, name.as_str())),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push("constant", value, Op::Constant)
    }

    /// Leaf bound to `store[name]`. Repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var> {
        let key = (store.id(), name.to_string());
        if let Some(&v) = self.param_cache.get(&key) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(
            "param",
            value,
            Op::Param {
                store: store.id(),
                name: name.to_string(),
            },
        )?;
        self.param_cache.insert(key, v);
        Ok(v)
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        make: impl Fn(usize, usize, Broadcast) -> Op<S>,
    ) -> Result<Var> {
        let (plan, shape) = broadcast_plan(op_name, self.value(a).shape(), self.value(b).shape())?;
        let data = zip_broadcast(plan, self.value(a).data(), self.value(b).data(), f);
        let value = Tensor::new(shape, data)?;
        self.push(op_name, value, make(a.0, b.0, plan))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, k: S) -> Result<Var> {
        let value = self.value(a).map(|x| x * k);
        self.push("scale", value, Op::Scale(a.0, k))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(
            "matmul",
            Tensor::new(vec![m, n], data)?,
            Op::MatMul(a.0, b.0),
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(invalid("mean of an empty tensor"));
        }
        let value = Tensor::scalar(t.sum() / S::from_usize_lossy(t.len()));
        self.push("mean", value, Op::Mean(a.0))
    }

    /// Sum over the trailing axis: `[.., n] → [..]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(invalid("sum_last on a scalar"));
        }
        let n = *t.shape().last().unwrap();
        let data: Vec<S> = t
            .data()
            .chunks_exact(n.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        let shape = t.shape()[..t.rank() - 1].to_vec();
        self.push("sum_last", Tensor::new(shape, data)?, Op::SumLast(a.0))
    }

    /// `Σ x²` as a scalar.
    pub fn sq_l2(&mut self, a: Var) -> Result<Var> {
        let s = self
            .value(a)
            .data()
            .iter()
            .fold(S::zero(), |acc, &x| acc + x * x);
        self.push("sq_l2", Tensor::scalar(s), Op::SqL2(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self
            .value(a)
            .map(|x| if x > S::zero() { x } else { S::zero() });
        self.push("relu", value, Op::Relu(a.0))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", value, Op::Silu(a.0))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(S::sin);
        self.push("sin", value, Op::Sin(a.0))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(S::cos);
        self.push("cos", value, Op::Cos(a.0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a.0))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(invalid(format!(
                "concat axis {axis} on rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.iter().map(|v| v.0).collect(),
                axis,
            },
        )
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        let shape = src.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(format!(
                "slice {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            data.extend_from_slice(&src.data()[base + start * inner..base + (start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        self.push(
            "slice",
            value,
            Op::Slice {
                src: a.0,
                axis,
                start,
                len,
            },
        )
    }

    /// Row lookup `table[ids[i]]` for a `[rows, width]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(invalid(format!(
                "embedding table must be 2-d, got {:?}",
                t.shape()
            )));
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::UnknownConcept { id, count: rows });
            }
            data.extend_from_slice(&t.data()[id * width..(id + 1) * width]);
        }
        let value = Tensor::new(vec![ids.len(), width], data)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        )
    }

    /// Reverse sweep from a scalar `root`, visiting every recorded node once.
    pub fn gradients(&self, root: Var) -> Result<Gradients<S>> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(root_value.shape(), S::one()));
        let mut visits = 0;
        for i in (0..self.nodes.len()).rev() {
            visits += 1;
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visits })
    }

    /// Backpropagates `root` and adds `∂root/∂p` into `store`'s accumulators
    /// for every leaf of `store` on this tape. Returns the visit count.
    pub fn backward(&self, root: Var, store: &mut ParamStore<S>) -> Result<usize> {
        let grads = self.gradients(root)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { store: id, name } = &node.op {
                if *id == store.id() {
                    if let Some(g) = &grads.grads[i] {
                        store.accumulate_grad(name, g)?;
                    }
                }
            }
        }
        Ok(grads.visits)
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let val = |j: usize| &self.nodes[j].value;
        match &self.nodes[i].op {
            Op::Constant | Op::Param { .. } => {}
            Op::Add(a, b, plan) => {
                let (ga, gb) = split_broadcast(*plan, g, val(*a), val(*b), |x| x, |x| x);
                accumulate(grads, *a, ga)?;
                accumulate(grads, *b, gb)?;
            }
            Op::Sub(a, b, plan) => {
                let (ga, gb) = split_broadcast(*plan, g, val(*a), val(*b), |x| x, |x| -x);
                accumulate(grads, *a, ga)?;
                accumulate(grads, *b, gb)?;
            }
            Op::Mul(a, b, plan) => {
                // d(a*b) = g*b for a and g*a for b, evaluated at full size first
                let (av, bv) = (val(*a), val(*b));
                let full_b = zip_broadcast(*plan, av.data(), bv.data(), |_, y| y);
                let full_a = zip_broadcast(*plan, av.data(), bv.data(), |x, _| x);
                let ga_full: Vec<S> = g.data().iter().zip(&full_b).map(|(&x, &y)| x * y).collect();
                let gb_full: Vec<S> = g.data().iter().zip(&full_a).map(|(&x, &y)| x * y).collect();
                let ga = match plan {
                    Broadcast::Lhs { .. } => reduce_broadcast(&ga_full, av.len()),
                    _ => ga_full,
                };
                let gb = match plan {
                    Broadcast::Rhs { .. } => reduce_broadcast(&gb_full, bv.len()),
                    _ => gb_full,
                };
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga)?)?;
                accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?)?;
            }
            Op::Scale(a, k) => accumulate(grads, *a, g.map(|x| x * *k))?,
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let ga = matmul_nt_kernel(g.data(), bv.data(), m, k, n);
                let gb = matmul_tn_kernel(av.data(), g.data(), m, k, n);
                accumulate(grads, *a, Tensor::new(vec![m, k], ga)?)?;
                accumulate(grads, *b, Tensor::new(vec![k, n], gb)?)?;
            }
            Op::Sum(a) => {
                let s = g.item()?;
                accumulate(grads, *a, Tensor::full(val(*a).shape(), s))?;
            }
            Op::Mean(a) => {
                let n = S::from_usize_lossy(val(*a).len());
                accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item()? / n))?;
            }
            Op::SumLast(a) => {
                let av = val(*a);
                let n = *av.shape().last().unwrap();
                let data: Vec<S> = g
                    .data()
                    .iter()
                    .flat_map(|&x| std::iter::repeat_n(x, n))
                    .collect();
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), data)?)?;
            }
            Op::SqL2(a) => {
                let two_g = S::lit(2.0) * g.item()?;
                accumulate(grads, *a, val(*a).map(|x| two_g * x))?;
            }
            Op::Relu(a) => {
                let data = unary_grad(
                    g,
                    val(*a),
                    |x| if x > S::zero() { S::one() } else { S::zero() },
                );
                accumulate(grads, *a, data)?;
            }
            Op::Silu(a) => {
                let data = unary_grad(g, val(*a), |x| {
                    let s = sigmoid(x);
                    s * (S::one() + x * (S::one() - s))
                });
                accumulate(grads, *a, data)?;
            }
            Op::Sin(a) => accumulate(grads, *a, unary_grad(g, val(*a), S::cos))?,
            Op::Cos(a) => accumulate(grads, *a, unary_grad(g, val(*a), |x| -x.sin()))?,
            Op::Reshape(a) => {
                accumulate(grads, *a, g.clone().reshape(val(*a).shape())?)?;
            }
            Op::Concat { parts, axis } => {
                let out_shape = g.shape();
                let (outer, inner) = outer_inner(out_shape, *axis);
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape();
                    let chunk = ps[*axis] * inner;
                    let mut data = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * row + offset;
                        data.extend_from_slice(&g.data()[base..base + chunk]);
                    }
                    accumulate(grads, p, Tensor::new(ps.to_vec(), data)?)?;
                    offset += chunk;
                }
            }
            Op::Slice {
                src,
                axis,
                start,
                len,
            } => {
                let ss = val(*src).shape();
                let (outer, inner) = outer_inner(ss, *axis);
                let mut data = vec![S::zero(); val(*src).len()];
                for o in 0..outer {
                    let base = o * ss[*axis] * inner + start * inner;
                    let from = o * len * inner;
                    data[base..base + len * inner]
                        .copy_from_slice(&g.data()[from..from + len * inner]);
                }
                accumulate(grads, *src, Tensor::new(ss.to_vec(), data)?)?;
            }
            Op::Embedding { table, ids } => {
                let ts = val(*table).shape();
                let width = ts[1];
                let mut data = vec![S::zero(); val(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut data[id * width..(id + 1) * width];
                    for (d, &x) in dst.iter_mut().zip(&g.data()[r * width..(r + 1) * width]) {
                        *d += x;
                    }
                }
                accumulate(grads, *table, Tensor::new(ts.to_vec(), data)?)?;
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn unary_grad<S: Scalar>(g: &Tensor<S>, x: &Tensor<S>, d: impl Fn(S) -> S) -> Tensor<S> {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .map(|(&gi, &xi)| gi * d(xi))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape as input")
}

fn split_broadcast<S: Scalar>(
    plan: Broadcast,
    g: &Tensor<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
    fa: impl Fn(S) -> S,
    fb: impl Fn(S) -> S,
) -> (Tensor<S>, Tensor<S>) {
    let ga_full: Vec<S> = g.data().iter().map(|&x| fa(x)).collect();
    let gb_full: Vec<S> = g.data().iter().map(|&x| fb(x)).collect();
    let ga = match plan {
        Broadcast::Lhs { .. } => reduce_broadcast(&ga_full, a.len()),
        _ => ga_full,
    };
    let gb = match plan {
        Broadcast::Rhs { .. } => reduce_broadcast(&gb_full, b.len()),
        _ => gb_full,
    };
    (
        Tensor::new(a.shape().to_vec(), ga).expect("lhs shape"),
        Tensor::new(b.shape().to_vec(), gb).expect("rhs shape"),
    )
}

fn accumulate<S: Scalar>(
    grads: &mut [Option<Tensor<S>>],
    j: usize,
    delta: Tensor<S>,
) -> Result<()> {
    match &mut grads[j] {
        Some(existing) => {
            for (e, &d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}
