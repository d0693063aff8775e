//! Reverse-mode differentiation for training losses `L(w, theta, t)`.
//!
//! Gradients come from one backward sweep. Hessian-vector products differentiate
//! the recorded gradient a second time: `grad_w L . u` is itself a node on the
//! tape, so a second sweep gives `(d/dw)(grad_w L . u)` and
//! `(d/dtheta)(grad_w L . u)` together.

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// A scalar function of elementary parameters `w`, hyperparameters `theta`,
/// and an iteration index. Recording must be deterministic.
pub trait DiffFn {
    fn dim_w(&self) -> usize;
    fn dim_theta(&self) -> usize;
    fn record(&self, tape: &mut Tape, w: Var, theta: Var, t: usize) -> Result<Var>;
}

impl<F: DiffFn + ?Sized> DiffFn for &F {
    fn dim_w(&self) -> usize {
        (**self).dim_w()
    }
    fn dim_theta(&self) -> usize {
        (**self).dim_theta()
    }
    fn record(&self, tape: &mut Tape, w: Var, theta: Var, t: usize) -> Result<Var> {
        (**self).record(tape, w, theta, t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub value: f64,
    pub w: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Value, gradient and both Hessian-vector products at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrder {
    pub value: f64,
    pub grad_w: Vec<f64>,
    /// `(grad_w grad_w L) u`
    pub hvp_w: Vec<f64>,
    /// `u^T (grad_theta grad_w L)`
    pub hvp_theta: Vec<f64>,
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

/// Gradient of a function of a single vector.
pub fn grad(f: impl Fn(&mut Tape, Var) -> Var, at: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::row(at.to_vec()));
    let out = f(&mut tape, x);
    let [g] = tape.backward(out, &[x])[..] else { unreachable!() };
    tape.check_finite(&[out, g])?;
    Ok(tape.value(g).data().to_vec())
}

/// `L` and `grad_w L`; `theta` enters as a constant.
pub fn value_and_grad<F: DiffFn + ?Sized>(f: &F, w: &[f64], theta: &[f64], t: usize) -> Result<(f64, Vec<f64>)> {
    check_len("w", w.len(), f.dim_w())?;
    check_len("theta", theta.len(), f.dim_theta())?;
    let mut tape = Tape::new();
    let wv = tape.var(Tensor::row(w.to_vec()));
    let th = tape.constant(Tensor::row(theta.to_vec()));
    let out = f.record(&mut tape, wv, th, t)?;
    let [g] = tape.backward(out, &[wv])[..] else { unreachable!() };
    tape.check_finite(&[out, g])?;
    Ok((tape.value(out).item(), tape.value(g).data().to_vec()))
}

/// `L`, `grad_w L` and `grad_theta L`.
pub fn gradients<F: DiffFn + ?Sized>(f: &F, w: &[f64], theta: &[f64], t: usize) -> Result<Gradients> {
    check_len("w", w.len(), f.dim_w())?;
    check_len("theta", theta.len(), f.dim_theta())?;
    let mut tape = Tape::new();
    let wv = tape.var(Tensor::row(w.to_vec()));
    let th = tape.var(Tensor::row(theta.to_vec()));
    let out = f.record(&mut tape, wv, th, t)?;
    let [gw, gt] = tape.backward(out, &[wv, th])[..] else { unreachable!() };
    tape.check_finite(&[out, gw, gt])?;
    Ok(Gradients {
        value: tape.value(out).item(),
        w: tape.value(gw).data().to_vec(),
        theta: tape.value(gt).data().to_vec(),
    })
}

/// Gradient plus both Hessian-vector products against `u`, from one tape.
pub fn grad_and_hvps<F: DiffFn + ?Sized>(f: &F, w: &[f64], theta: &[f64], t: usize, u: &[f64]) -> Result<SecondOrder> {
    check_len("w", w.len(), f.dim_w())?;
    check_len("theta", theta.len(), f.dim_theta())?;
    check_len("probe vector", u.len(), f.dim_w())?;
    let mut tape = Tape::new();
    let wv = tape.var(Tensor::row(w.to_vec()));
    let th = tape.var(Tensor::row(theta.to_vec()));
    let out = f.record(&mut tape, wv, th, t)?;
    let [gw] = tape.backward(out, &[wv])[..] else { unreachable!() };
    let uv = tape.constant(Tensor::row(u.to_vec()));
    let directional = tape.dot(gw, uv);
    let [hw, ht] = tape.backward(directional, &[wv, th])[..] else { unreachable!() };
    tape.check_finite(&[out, gw, hw, ht])?;
    Ok(SecondOrder {
        value: tape.value(out).item(),
        grad_w: tape.value(gw).data().to_vec(),
        hvp_w: tape.value(hw).data().to_vec(),
        hvp_theta: tape.value(ht).data().to_vec(),
    })
}

pub fn hvp_ww<F: DiffFn + ?Sized>(f: &F, w: &[f64], theta: &[f64], t: usize, u: &[f64]) -> Result<Vec<f64>> {
    Ok(grad_and_hvps(f, w, theta, t, u)?.hvp_w)
}

pub fn hvp_thetaw<F: DiffFn + ?Sized>(f: &F, w: &[f64], theta: &[f64], t: usize, u: &[f64]) -> Result<Vec<f64>> {
    Ok(grad_and_hvps(f, w, theta, t, u)?.hvp_theta)
}

/// Wraps a closure as a [`DiffFn`].
pub struct FnLoss<C> {
    pub dim_w: usize,
    pub dim_theta: usize,
    pub body: C,
}

impl<C> DiffFn for FnLoss<C>
where
    C: Fn(&mut Tape, Var, Var, usize) -> Var,
{
    fn dim_w(&self) -> usize {
        self.dim_w
    }
    fn dim_theta(&self) -> usize {
        self.dim_theta
    }
    fn record(&self, tape: &mut Tape, w: Var, theta: Var, t: usize) -> Result<Var> {
        Ok((self.body)(tape, w, theta, t))
    }
}

#[cfg(test)]
mod tests;
