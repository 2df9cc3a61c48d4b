//! Dense `f64` tensors with tape-free reverse-mode differentiation.
//!
//! Every tensor produced by an operation keeps a handle to its parents and a
//! closure computing the vector-Jacobian product, so the graph is the tape.
//! Calling [`Tensor::backward`] on a scalar walks the graph in reverse
//! topological order and returns the gradients of every leaf that requires
//! them.
//!
//! Layout is always contiguous row-major; image tensors are NCHW.

mod conv;
mod gemm;
mod ops;

pub use conv::{conv2d_output_size, conv_transpose2d_output_size};

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on the current thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Vector-Jacobian product: receives the output gradient and a mask telling
/// which parents need a gradient, returns one optional gradient per parent.
type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Rc<Vec<f64>>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad_fn: None,
        }))
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "{} values cannot fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::leaf(shape.to_vec(), Rc::new(data), false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(shape.to_vec(), Rc::new(vec![0.0; numel(shape)]), false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::leaf(shape.to_vec(), Rc::new(vec![value; numel(shape)]), false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(Vec::new(), Rc::new(vec![value]), false)
    }

    /// A leaf that will receive a gradient from [`Tensor::backward`].
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(Tensor::leaf(t.0.shape.clone(), t.0.data.clone(), true))
    }

    /// Same values, cut from the graph. Shares storage.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    /// Same values as a fresh gradient-receiving leaf. Shares storage.
    pub fn requires_grad_leaf(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.0.data.clone(), true)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Rc<Vec<f64>>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Tensor::leaf(shape, data, false);
        }
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad: true,
            grad_fn: Some(GradFn {
                parents,
                backward: Box::new(backward),
            }),
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(Error::Shape(format!("expected a 4-d tensor, got {s:?}"))),
        }
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        self.0.data.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "item() needs a single element, shape is {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a single-element tensor.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward() needs a scalar, shape is {:?}",
                self.shape()
            )));
        }
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        if !self.requires_grad() {
            return Ok(Gradients { grads });
        }

        // Iterative post-order DFS; `order` ends up parents-before-children.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        grads.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(gf) = &t.0.grad_fn else { continue };
            let Some(g) = grads.remove(&t.id()) else { continue };
            let mask: Vec<bool> = gf.parents.iter().map(|p| p.requires_grad()).collect();
            let parent_grads = (gf.backward)(&g, &mask);
            for ((p, pg), needed) in gf.parents.iter().zip(parent_grads).zip(mask) {
                let Some(pg) = pg else { continue };
                if !needed {
                    continue;
                }
                debug_assert_eq!(pg.len(), p.numel());
                match grads.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(p.id(), pg);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tensor::backward`], keyed by tensor identity.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|g| g.as_slice())
    }

    /// Gradient of `t`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()])
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::Tensor;

    /// Central finite differences of `f` around `x`, one coordinate at a time.
    pub fn finite_diff(x: &[f64], shape: &[usize], h: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        let mut buf = x.to_vec();
        for i in 0..x.len() {
            let orig = buf[i];
            buf[i] = orig + h;
            let fp = f(&Tensor::from_vec(buf.clone(), shape).unwrap());
            buf[i] = orig - h;
            let fm = f(&Tensor::from_vec(buf.clone(), shape).unwrap());
            buf[i] = orig;
            out.push((fp - fm) / (2.0 * h));
        }
        out
    }

    pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().chain(a).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    pub fn lcg_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_accumulates_through_shared_parents() {
        let x = Tensor::parameter(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        // f = sum(x*x + x) -> df/dx = 2x + 1
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum();
        let g = y.backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let y = {
            let _g = no_grad();
            x.mul_scalar(2.0)
        };
        assert!(!y.requires_grad());
        assert!(x.mul_scalar(2.0).requires_grad());
    }

    #[test]
    fn detached_tensor_gets_no_gradient() {
        let x = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let d = x.detach();
        let y = x.mul(&d).unwrap().sum();
        let g = y.backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[1.0, 2.0]);
        assert!(g.get(&d).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
        assert!(x.mul_scalar(1.0).backward().is_err());
    }
}
