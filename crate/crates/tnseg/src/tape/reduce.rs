//! Reductions and shape-manipulating tape operations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{accum_parent, Node, Op, Tape, Var};

impl Tape {
    /// Sum over an axis set. Reduced axes keep extent 1 when `keep` is set,
    /// otherwise they are removed (shape `[]` when every axis is reduced).
    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keep: bool) -> Result<Var> {
        self.reduce(x, axes, keep, false)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keep: bool) -> Result<Var> {
        self.reduce(x, axes, keep, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank().max(1)).collect();
        let axes = if self.value(x).rank() == 0 { vec![0] } else { axes };
        // Rank-0 input: nothing to reduce, pass through a reshape.
        if self.value(x).rank() == 0 {
            return self.reshape(x, &[]);
        }
        self.sum_axes(x, &axes, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() == 0 {
            return self.reshape(x, &[]);
        }
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.mean_axes(x, &axes, false)
    }

    /// Biased (population) variance over an axis set: the mean of squared
    /// deviations. Composed from primitives, so gradients come for free.
    pub fn var_axes(&mut self, x: Var, axes: &[usize], keep: bool) -> Result<Var> {
        let mu = self.mean_axes(x, axes, true)?;
        let shape = self.value(x).shape().to_vec();
        let mu_b = self.broadcast_to(mu, &shape)?;
        let d = self.sub(x, mu_b)?;
        let d2 = self.mul(d, d)?;
        self.mean_axes(d2, axes, keep)
    }

    fn reduce(&mut self, x: Var, axes: &[usize], keep: bool, mean: bool) -> Result<Var> {
        let op_name: &'static str = if mean { "mean" } else { "sum" };
        let shape = self.value(x).shape().to_vec();
        let plan = ReducePlan::new(op_name, &shape, axes, keep)?;
        let mut out = vec![0.0; plan.out_numel];
        for (i, &v) in self.value(x).data().iter().enumerate() {
            out[plan.out_index(i)] += v;
        }
        if mean {
            let c = plan.count as f64;
            for o in &mut out {
                *o /= c;
            }
        }
        let value = Tensor::new(&plan.out_shape, out)?;
        let req = self.requires(x);
        let op = if mean {
            Op::Mean { x, axes: axes.to_vec() }
        } else {
            Op::Sum { x, axes: axes.to_vec() }
        };
        Ok(self.push(value, op, req))
    }

    /// Replicates size-1 axes of `x` up to `target` (same rank required).
    pub fn broadcast_to(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let src = self.value(x).shape().to_vec();
        if src == target {
            // Degenerate broadcast; keep the graph simple with a reshape.
            return self.reshape(x, target);
        }
        if src.len() != target.len() {
            return Err(Error::InvalidShape {
                op: "broadcast",
                shape: src,
                msg: format!("rank mismatch with target {target:?}"),
            });
        }
        for (axis, (&s, &t)) in src.iter().zip(target).enumerate() {
            if s != t && s != 1 {
                return Err(Error::AxisMismatch { op: "broadcast", axis, left: s, right: t });
            }
        }
        let value = broadcast_values(self.value(x), target);
        let req = self.requires(x);
        Ok(self.push(value, Op::Broadcast { x }, req))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let req = self.requires(x);
        Ok(self.push(value, Op::Reshape { x }, req))
    }

    /// Stacks tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut cat_extent = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() {
                return Err(Error::InvalidShape {
                    op: "concat",
                    shape: s.to_vec(),
                    msg: "rank mismatch".into(),
                });
            }
            for (ax, (&a, &b)) in first.iter().zip(s).enumerate() {
                if ax != axis && a != b {
                    return Err(Error::AxisMismatch { op: "concat", axis: ax, left: a, right: b });
                }
            }
            cat_extent += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = cat_extent;

        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let out_row = cat_extent * inner;
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let mid = t.shape()[axis];
            let src = t.data();
            for o in 0..outer {
                let dst_base = o * out_row + offset * inner;
                let src_base = o * mid * inner;
                data[dst_base..dst_base + mid * inner]
                    .copy_from_slice(&src[src_base..src_base + mid * inner]);
            }
            offset += mid;
        }
        let req = parts.iter().any(|&p| self.requires(p));
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, req))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "narrow: range {start}..{} invalid for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let value = narrow_values(self.value(x), axis, start, len);
        let req = self.requires(x);
        Ok(self.push(value, Op::Narrow { x, axis, start }, req))
    }
}

struct ReducePlan {
    out_shape: Vec<usize>,
    out_numel: usize,
    count: usize,
    /// Per input axis: input stride and the matching output stride (0 if reduced).
    strides: Vec<(usize, usize)>,
}

impl ReducePlan {
    fn new(op: &'static str, shape: &[usize], axes: &[usize], keep: bool) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::EmptyReduction { op });
        }
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::InvalidArgument(format!(
                    "{op}: axis {a} out of range for rank {}",
                    shape.len()
                )));
            }
            reduced[a] = true;
        }
        let mut out_shape = Vec::new();
        for (i, &d) in shape.iter().enumerate() {
            if reduced[i] {
                if keep {
                    out_shape.push(1);
                }
            } else {
                out_shape.push(d);
            }
        }
        let out_numel = out_shape.iter().product();
        let count = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| reduced[*i])
            .map(|(_, &d)| d)
            .product();

        // Output strides aligned to the surviving axes of the input.
        let mut out_strides_per_in_axis = vec![0usize; shape.len()];
        let mut acc = 1usize;
        for i in (0..shape.len()).rev() {
            if !reduced[i] {
                out_strides_per_in_axis[i] = acc;
                acc *= shape[i];
            }
        }
        let mut in_strides = vec![1usize; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let strides = in_strides.into_iter().zip(out_strides_per_in_axis).collect();
        Ok(Self { out_shape, out_numel, count, strides })
    }

    fn out_index(&self, mut linear: usize) -> usize {
        let mut out = 0;
        for &(in_s, out_s) in &self.strides {
            let digit = linear / in_s;
            linear %= in_s;
            out += digit * out_s;
        }
        out
    }
}

fn broadcast_values(src: &Tensor, target: &[usize]) -> Tensor {
    let src_shape = src.shape();
    let mut out = vec![0.0; target.iter().product()];
    let src_strides = src.strides();
    let mut tgt_strides = vec![1usize; target.len()];
    for i in (0..target.len().saturating_sub(1)).rev() {
        tgt_strides[i] = tgt_strides[i + 1] * target[i + 1];
    }
    let data = src.data();
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        let mut si = 0;
        for ax in 0..target.len() {
            let digit = rem / tgt_strides[ax];
            rem %= tgt_strides[ax];
            if src_shape[ax] != 1 {
                si += digit * src_strides[ax];
            }
        }
        *slot = data[si];
    }
    Tensor::new(target, out).expect("computed shape")
}

fn narrow_values(src: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let shape = src.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mid = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut data = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let src_base = (o * mid + start) * inner;
        let dst_base = o * len * inner;
        data[dst_base..dst_base + len * inner]
            .copy_from_slice(&src.data()[src_base..src_base + len * inner]);
    }
    Tensor::new(&out_shape, data).expect("computed shape")
}

pub(crate) fn backward_sum(before: &mut [Node], x: Var, axes: &[usize], g: &Tensor, mean: bool) {
    let shape = before[x.0].value.shape().to_vec();
    let plan = ReducePlan::new("sum-bwd", &shape, axes, false).expect("validated in forward");
    let scale = if mean { 1.0 / plan.count as f64 } else { 1.0 };
    let gd = g.data();
    let mut dx = vec![0.0; before[x.0].value.numel()];
    for (i, slot) in dx.iter_mut().enumerate() {
        *slot = gd[plan.out_index(i)] * scale;
    }
    accum_parent(before, x, Tensor::new(&shape, dx).expect("same shape"));
}

pub(crate) fn backward_broadcast(before: &mut [Node], x: Var, g: &Tensor) {
    let src_shape = before[x.0].value.shape().to_vec();
    let target = g.shape();
    let src_strides = before[x.0].value.strides();
    let mut tgt_strides = vec![1usize; target.len()];
    for i in (0..target.len().saturating_sub(1)).rev() {
        tgt_strides[i] = tgt_strides[i + 1] * target[i + 1];
    }
    let mut dx = vec![0.0; before[x.0].value.numel()];
    for (o, &gv) in g.data().iter().enumerate() {
        let mut rem = o;
        let mut si = 0;
        for ax in 0..target.len() {
            let digit = rem / tgt_strides[ax];
            rem %= tgt_strides[ax];
            if src_shape[ax] != 1 {
                si += digit * src_strides[ax];
            }
        }
        dx[si] += gv;
    }
    accum_parent(before, x, Tensor::new(&src_shape, dx).expect("same shape"));
}

pub(crate) fn backward_reshape(before: &mut [Node], x: Var, g: &Tensor) {
    let shape = before[x.0].value.shape().to_vec();
    let dx = g.reshape(&shape).expect("same numel");
    accum_parent(before, x, dx);
}

pub(crate) fn backward_concat(before: &mut [Node], parts: &[Var], axis: usize, g: &Tensor) {
    let mut start = 0;
    for &p in parts {
        let len = before[p.0].value.shape()[axis];
        if before[p.0].requires {
            let dp = narrow_values(g, axis, start, len);
            accum_parent(before, p, dp);
        }
        start += len;
    }
}

pub(crate) fn backward_narrow(before: &mut [Node], x: Var, axis: usize, start: usize, g: &Tensor) {
    let shape = before[x.0].value.shape().to_vec();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mid = shape[axis];
    let len = g.shape()[axis];
    let mut dx = vec![0.0; before[x.0].value.numel()];
    for o in 0..outer {
        let dst_base = (o * mid + start) * inner;
        let src_base = o * len * inner;
        dx[dst_base..dst_base + len * inner]
            .copy_from_slice(&g.data()[src_base..src_base + len * inner]);
    }
    accum_parent(before, x, Tensor::new(&shape, dx).expect("same shape"));
}
