//! Elementwise tape operations: binary arithmetic, activations, clamping.
//!
//! Binary ops broadcast only between identical shapes or tensor-vs-scalar
//! (a one-element operand).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{accum_parent, Node, Op, Tape, Var};

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_values("add", a, b, |x, y| x + y)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Add(a, b), req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_values("sub", a, b, |x, y| x - y)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Sub(a, b), req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_values("mul", a, b, |x, y| x * y)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Mul(a, b), req))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.is_checked() && self.value(b).data().iter().any(|&y| y == 0.0) {
            return Err(Error::Domain { op: "div", msg: "division by zero".into() });
        }
        let v = self.binary_values("div", a, b, |x, y| x / y)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Div(a, b), req))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let req = self.requires(a);
        self.push(v, Op::AddScalar(a), req)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let req = self.requires(a);
        self.push(v, Op::MulScalar(a, s), req)
    }

    /// `s - x`, elementwise.
    pub fn scalar_sub(&mut self, s: f64, a: Var) -> Var {
        let v = self.value(a).map(|x| s - x);
        let req = self.requires(a);
        self.push(v, Op::ScalarSub(a), req)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let req = self.requires(a);
        self.push(v, Op::Exp(a), req)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.is_checked() && self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain { op: "log", msg: "log of a non-positive value".into() });
        }
        let v = self.value(a).map(f64::ln);
        let req = self.requires(a);
        Ok(self.push(v, Op::Log(a), req))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let req = self.requires(a);
        self.push(v, Op::Abs(a), req)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let req = self.requires(a);
        self.push(v, Op::Relu(a), req)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let req = self.requires(a);
        self.push(v, Op::LeakyRelu(a, slope), req)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid_scalar);
        let req = self.requires(a);
        self.push(v, Op::Sigmoid(a), req)
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside the band.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let req = self.requires(a);
        self.push(v, Op::Clamp(a, lo, hi), req)
    }

    fn binary_values(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            va.zip(vb, op, f)
        } else if vb.numel() == 1 {
            let s = vb.data()[0];
            Ok(va.map(|x| f(x, s)))
        } else if va.numel() == 1 {
            let s = va.data()[0];
            Ok(vb.map(|x| f(s, x)))
        } else {
            crate::tensor::same_shape(op, va.shape(), vb.shape())?;
            unreachable!("same_shape errors on mismatch");
        }
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Reduces an elementwise delta to the shape of operand `p`: identity when
/// shapes match, total sum when `p` was a broadcast scalar.
fn fit_to(before: &[Node], p: Var, delta: Tensor) -> Tensor {
    let target = before[p.0].value.shape();
    if delta.shape() == target {
        delta
    } else {
        debug_assert_eq!(before[p.0].value.numel(), 1);
        let s: f64 = delta.data().iter().sum();
        if target.is_empty() {
            Tensor::scalar(s)
        } else {
            Tensor::new(target, vec![s]).expect("one-element shape")
        }
    }
}

fn value_or_scalar<'a>(before: &'a [Node], v: Var, n: usize) -> ValueView<'a> {
    let t = &before[v.0].value;
    if t.numel() == n {
        ValueView::Full(t.data())
    } else {
        ValueView::Scalar(t.data()[0])
    }
}

enum ValueView<'a> {
    Full(&'a [f64]),
    Scalar(f64),
}

impl ValueView<'_> {
    fn at(&self, i: usize) -> f64 {
        match self {
            ValueView::Full(d) => d[i],
            ValueView::Scalar(s) => *s,
        }
    }
}

pub(crate) fn backward_add(before: &mut [Node], a: Var, b: Var, g: &Tensor) {
    let da = fit_to(before, a, g.clone());
    accum_parent(before, a, da);
    let db = fit_to(before, b, g.clone());
    accum_parent(before, b, db);
}

pub(crate) fn backward_sub(before: &mut [Node], a: Var, b: Var, g: &Tensor) {
    let da = fit_to(before, a, g.clone());
    accum_parent(before, a, da);
    let db = fit_to(before, b, g.scale(-1.0));
    accum_parent(before, b, db);
}

pub(crate) fn backward_mul(before: &mut [Node], a: Var, b: Var, g: &Tensor) {
    let n = g.numel();
    if before[a.0].requires {
        let vb = value_or_scalar(before, b, n);
        let da: Vec<f64> = g.data().iter().enumerate().map(|(i, &gi)| gi * vb.at(i)).collect();
        let da = fit_to(before, a, Tensor::new(g.shape(), da).expect("same shape"));
        accum_parent(before, a, da);
    }
    if before[b.0].requires {
        let va = value_or_scalar(before, a, n);
        let db: Vec<f64> = g.data().iter().enumerate().map(|(i, &gi)| gi * va.at(i)).collect();
        let db = fit_to(before, b, Tensor::new(g.shape(), db).expect("same shape"));
        accum_parent(before, b, db);
    }
}

pub(crate) fn backward_div(before: &mut [Node], a: Var, b: Var, g: &Tensor) {
    let n = g.numel();
    let vb_req = before[b.0].requires;
    if before[a.0].requires {
        let vb = value_or_scalar(before, b, n);
        let da: Vec<f64> = g.data().iter().enumerate().map(|(i, &gi)| gi / vb.at(i)).collect();
        let da = fit_to(before, a, Tensor::new(g.shape(), da).expect("same shape"));
        accum_parent(before, a, da);
    }
    if vb_req {
        let va = value_or_scalar(before, a, n);
        let vb = value_or_scalar(before, b, n);
        let db: Vec<f64> = g
            .data()
            .iter()
            .enumerate()
            .map(|(i, &gi)| {
                let bi = vb.at(i);
                -gi * va.at(i) / (bi * bi)
            })
            .collect();
        let db = fit_to(before, b, Tensor::new(g.shape(), db).expect("same shape"));
        accum_parent(before, b, db);
    }
}

pub(crate) fn backward_exp(before: &mut [Node], a: Var, out: &Tensor, g: &Tensor) {
    let da = g.zip(out, "exp-bwd", |gi, yi| gi * yi).expect("same shape");
    accum_parent(before, a, da);
}

pub(crate) fn backward_log(before: &mut [Node], a: Var, g: &Tensor) {
    let da = g.zip(&before[a.0].value, "log-bwd", |gi, xi| gi / xi).expect("same shape");
    accum_parent(before, a, da);
}

pub(crate) fn backward_abs(before: &mut [Node], a: Var, g: &Tensor) {
    // Subgradient 0 at the kink.
    let da = g
        .zip(&before[a.0].value, "abs-bwd", |gi, xi| {
            if xi > 0.0 {
                gi
            } else if xi < 0.0 {
                -gi
            } else {
                0.0
            }
        })
        .expect("same shape");
    accum_parent(before, a, da);
}

pub(crate) fn backward_relu(before: &mut [Node], a: Var, g: &Tensor) {
    let da = g
        .zip(&before[a.0].value, "relu-bwd", |gi, xi| if xi > 0.0 { gi } else { 0.0 })
        .expect("same shape");
    accum_parent(before, a, da);
}

pub(crate) fn backward_leaky_relu(before: &mut [Node], a: Var, slope: f64, g: &Tensor) {
    let da = g
        .zip(&before[a.0].value, "leaky-bwd", |gi, xi| if xi > 0.0 { gi } else { slope * gi })
        .expect("same shape");
    accum_parent(before, a, da);
}

pub(crate) fn backward_sigmoid(before: &mut [Node], a: Var, out: &Tensor, g: &Tensor) {
    let da = g.zip(out, "sigmoid-bwd", |gi, yi| gi * yi * (1.0 - yi)).expect("same shape");
    accum_parent(before, a, da);
}

pub(crate) fn backward_clamp(before: &mut [Node], a: Var, lo: f64, hi: f64, g: &Tensor) {
    let da = g
        .zip(&before[a.0].value, "clamp-bwd", |gi, xi| if xi > lo && xi < hi { gi } else { 0.0 })
        .expect("same shape");
    accum_parent(before, a, da);
}
