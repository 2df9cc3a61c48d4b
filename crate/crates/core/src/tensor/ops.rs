use std::rc::Rc;

use super::{numel, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        // derivative given (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let input = self.data_rc();
        let out = Rc::new(input.iter().map(|&v| f(v)).collect::<Vec<_>>());
        let out_c = out.clone();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            let gi = g
                .iter()
                .zip(input.iter().zip(out_c.iter()))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(gi)]
        })
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let out: Vec<f64> = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            Rc::new(out),
            vec![self.clone(), other.clone()],
            |g, m| {
                vec![m[0].then(|| g.to_vec()), m[1].then(|| g.to_vec())]
            },
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let out: Vec<f64> = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            Rc::new(out),
            vec![self.clone(), other.clone()],
            |g, m| {
                vec![
                    m[0].then(|| g.to_vec()),
                    m[1].then(|| g.iter().map(|v| -v).collect()),
                ]
            },
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let a = self.data_rc();
        let b = other.data_rc();
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            Rc::new(out),
            vec![self.clone(), other.clone()],
            move |g, m| {
                vec![
                    m[0].then(|| g.iter().zip(b.iter()).map(|(g, y)| g * y).collect()),
                    m[1].then(|| g.iter().zip(a.iter()).map(|(g, x)| g * x).collect()),
                ]
            },
        ))
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        self.unary(move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.unary(move |v| v + s, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    /// Subgradient 0 at the kink.
    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sqr(&self) -> Tensor {
        self.unary(|v| v * v, |x, _| 2.0 * x)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(
            move |v| if v > 0.0 { v } else { v * slope },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// Gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            move |v| v.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let total: f64 = self.data().iter().sum();
        Tensor::from_op(Vec::new(), Rc::new(vec![total]), vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum().mul_scalar(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data_rc(),
            vec![self.clone()],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    /// Contiguous slice `[start, start + len)` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if dim >= shape.len() || start + len > shape[dim] {
            return Err(Error::Shape(format!(
                "narrow(dim={dim}, start={start}, len={len}) out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        let d = shape[dim];
        let src = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[dim] = len;
        let in_numel = self.numel();
        Ok(Tensor::from_op(new_shape, Rc::new(out), vec![self.clone()], move |g, _| {
            let mut gi = vec![0.0; in_numel];
            for o in 0..outer {
                let base = (o * d + start) * inner;
                let gb = o * len * inner;
                gi[base..base + len * inner].copy_from_slice(&g[gb..gb + len * inner]);
            }
            vec![Some(gi)]
        }))
    }

    /// Concatenation along `dim`; all other extents must agree.
    pub fn cat(tensors: &[&Tensor], dim: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::Shape("cat of zero tensors".into()))?;
        let rank = first.shape().len();
        if dim >= rank {
            return Err(Error::Shape(format!("cat dim {dim} out of range for rank {rank}")));
        }
        for t in tensors {
            let s = t.shape();
            if s.len() != rank
                || s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(i, (a, b))| i != dim && a != b)
            {
                return Err(Error::Shape(format!(
                    "cat along {dim}: incompatible shapes {:?} and {:?}",
                    first.shape(),
                    s
                )));
            }
        }
        let outer: usize = first.shape()[..dim].iter().product();
        let inner: usize = first.shape()[dim + 1..].iter().product();
        let extents: Vec<usize> = tensors.iter().map(|t| t.shape()[dim]).collect();
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &e) in tensors.iter().zip(&extents) {
                let base = o * e * inner;
                out.extend_from_slice(&t.data()[base..base + e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[dim] = total;
        let parents: Vec<Tensor> = tensors.iter().map(|t| (*t).clone()).collect();
        Ok(Tensor::from_op(shape, Rc::new(out), parents, move |g, m| {
            let mut grads: Vec<Option<Vec<f64>>> = extents
                .iter()
                .zip(m)
                .map(|(&e, &need)| need.then(|| Vec::with_capacity(outer * e * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gi, &e) in grads.iter_mut().zip(&extents) {
                    if let Some(gi) = gi {
                        gi.extend_from_slice(&g[off..off + e * inner]);
                    }
                    off += e * inner;
                }
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::{finite_diff, lcg_vec, max_rel_err};
    use super::*;

    fn check_grad(shape: &[usize], seed: u64, f: impl Fn(&Tensor) -> Tensor) {
        let x0 = lcg_vec(numel(shape), seed);
        let x = Tensor::parameter(x0.clone(), shape).unwrap();
        let g = f(&x).backward().unwrap().get_or_zeros(&x);
        let fd = finite_diff(&x0, shape, 1e-5, |t| f(t).item().unwrap());
        let err = max_rel_err(&g, &fd);
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn elementwise_gradients() {
        check_grad(&[2, 3], 1, |x| x.tanh().sum());
        check_grad(&[2, 3], 2, |x| x.sigmoid().mul(x).unwrap().sum());
        check_grad(&[2, 3], 3, |x| x.exp().sqr().mean());
        check_grad(&[2, 3], 4, |x| x.add_scalar(3.0).ln().sum());
        check_grad(&[2, 3], 5, |x| x.sub(&x.tanh()).unwrap().mul_scalar(0.3).sum());
    }

    #[test]
    fn shape_op_gradients() {
        check_grad(&[2, 3, 4], 6, |x| {
            let a = x.narrow(1, 1, 2).unwrap();
            let b = x.narrow(2, 0, 3).unwrap();
            a.tanh().sum().add(&b.sqr().sum()).unwrap()
        });
        check_grad(&[2, 3, 2], 7, |x| {
            let a = x.narrow(1, 0, 1).unwrap();
            let c = Tensor::cat(&[&a, x, &a], 1).unwrap();
            c.tanh().mul(&c).unwrap().sum()
        });
        check_grad(&[2, 6], 8, |x| x.reshape(&[3, 4]).unwrap().narrow(0, 1, 2).unwrap().sqr().sum());
    }

    #[test]
    fn cat_then_narrow_roundtrips() {
        let a = Tensor::from_vec(lcg_vec(12, 9), &[1, 3, 2, 2]).unwrap();
        let b = Tensor::from_vec(lcg_vec(8, 10), &[1, 2, 2, 2]).unwrap();
        let c = Tensor::cat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 5, 2, 2]);
        assert_eq!(c.narrow(1, 0, 3).unwrap().data(), a.data());
        assert_eq!(c.narrow(1, 3, 2).unwrap().data(), b.data());
    }

    #[test]
    fn abs_and_clamp_subgradients() {
        let x = Tensor::parameter(vec![-2.0, 0.0, 0.5, 3.0], &[4]).unwrap();
        let g = x.abs().sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[-1.0, 0.0, 1.0, 1.0]);
        let g = x.clamp(-1.0, 1.0).sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[4]);
        assert!(a.add(&b).is_err());
        assert!(a.narrow(0, 1, 2).is_err());
        assert!(Tensor::cat(&[&a, &b], 0).is_err());
    }
}
