//! Spatial operators: convolution, transposed convolution, reflection padding
//! and instance normalization. Convolutions lower to GEMM through im2col; the
//! column buffer is rebuilt during the backward pass instead of being kept
//! alive between passes.

use std::rc::Rc;

use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col(img: &[f64], g: &Geometry, col: &mut [f64]) {
    let (h, w, k, s, p) = (g.height as isize, g.width as isize, g.kernel, g.stride as isize, g.pad as isize);
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = oh as isize * s + ki as isize - p;
                    let seg = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= h {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[(ih * w) as usize..((ih + 1) * w) as usize];
                    for (ow, v) in seg.iter_mut().enumerate() {
                        let iw = ow as isize * s + kj as isize - p;
                        *v = if iw >= 0 && iw < w { src[iw as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &Geometry, img: &mut [f64]) {
    let (h, w, k, s, p) = (g.height as isize, g.width as isize, g.kernel, g.stride as isize, g.pad as isize);
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let ih = oh as isize * s + ki as isize - p;
                    if ih < 0 || ih >= h {
                        continue;
                    }
                    let dst = &mut plane[(ih * w) as usize..((ih + 1) * w) as usize];
                    for ow in 0..g.out_w {
                        let iw = ow as isize * s + kj as isize - p;
                        if iw >= 0 && iw < w {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Output extent of a convolution, or `None` when the kernel does not fit.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

pub fn conv_transpose2d_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Option<usize> {
    let full = (input.checked_sub(1)?) * stride + kernel + output_pad;
    full.checked_sub(2 * pad).filter(|&v| v > 0)
}

fn add_bias(out: &mut [f64], bias: &[f64], batch: usize, plane: usize) {
    let ch = bias.len();
    for n in 0..batch {
        for (c, b) in bias.iter().enumerate() {
            let base = (n * ch + c) * plane;
            out[base..base + plane].iter_mut().for_each(|v| *v += b);
        }
    }
}

fn bias_grad(g: &[f64], batch: usize, ch: usize, plane: usize) -> Vec<f64> {
    let mut gb = vec![0.0; ch];
    for n in 0..batch {
        for (c, acc) in gb.iter_mut().enumerate() {
            let base = (n * ch + c) * plane;
            *acc += g[base..base + plane].iter().sum::<f64>();
        }
    }
    gb
}

fn check_bias(bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {channels} output channels",
                b.shape()
            )));
        }
    }
    Ok(())
}

impl Tensor {
    /// Zero-padded 2-d convolution. `weight` is `[out, in, k, k]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let (o, wc, kh, kw) = weight.dims4()?;
        if wc != c || kh != kw {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels, weight is {:?}",
                weight.shape()
            )));
        }
        check_bias(bias, o)?;
        let (Some(out_h), Some(out_w)) = (
            conv2d_output_size(h, kh, stride, pad),
            conv2d_output_size(w, kw, stride, pad),
        ) else {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh} does not fit input {h}x{w} with padding {pad}"
            )));
        };
        let geo = Geometry { channels: c, height: h, width: w, kernel: kh, stride, pad, out_h, out_w };
        let (rows, cols) = (geo.col_rows(), geo.col_cols());
        let x = self.data_rc();
        let wt = weight.data_rc();
        let mut out = vec![0.0; n * o * cols];
        let mut col = vec![0.0; rows * cols];
        let in_plane = c * h * w;
        for b in 0..n {
            im2col(&x[b * in_plane..(b + 1) * in_plane], &geo, &mut col);
            gemm(o, rows, cols, &wt, false, &col, false, 0.0, &mut out[b * o * cols..(b + 1) * o * cols]);
        }
        if let Some(bias) = bias {
            add_bias(&mut out, bias.data(), n, cols);
        }
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        Ok(Tensor::from_op(vec![n, o, out_h, out_w], Rc::new(out), parents, move |g, m| {
            let mut col = vec![0.0; rows * cols];
            let gx = m[0].then(|| {
                let mut gx = vec![0.0; n * in_plane];
                for b in 0..n {
                    gemm(rows, o, cols, &wt, true, &g[b * o * cols..(b + 1) * o * cols], false, 0.0, &mut col);
                    col2im(&col, &geo, &mut gx[b * in_plane..(b + 1) * in_plane]);
                }
                gx
            });
            let gw = m[1].then(|| {
                let mut gw = vec![0.0; o * rows];
                for b in 0..n {
                    im2col(&x[b * in_plane..(b + 1) * in_plane], &geo, &mut col);
                    gemm(o, cols, rows, &g[b * o * cols..(b + 1) * o * cols], false, &col, true, 1.0, &mut gw);
                }
                gw
            });
            let mut grads = vec![gx, gw];
            if m.len() > 2 {
                grads.push(m[2].then(|| bias_grad(g, n, o, cols)));
            }
            grads
        }))
    }

    /// Transposed convolution (the adjoint of [`Tensor::conv2d`] with the
    /// same kernel geometry). `weight` is `[in, out, k, k]`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Tensor> {
        let (n, ci, h, w) = self.dims4()?;
        let (wci, co, kh, kw) = weight.dims4()?;
        if wci != ci || kh != kw {
            return Err(Error::Shape(format!(
                "conv_transpose2d: input has {ci} channels, weight is {:?}",
                weight.shape()
            )));
        }
        if output_pad >= stride.max(1) {
            return Err(Error::Shape(format!(
                "conv_transpose2d: output padding {output_pad} must be smaller than stride {stride}"
            )));
        }
        check_bias(bias, co)?;
        let (Some(out_h), Some(out_w)) = (
            conv_transpose2d_output_size(h, kh, stride, pad, output_pad),
            conv_transpose2d_output_size(w, kw, stride, pad, output_pad),
        ) else {
            return Err(Error::Shape(format!(
                "conv_transpose2d: invalid geometry for input {h}x{w}"
            )));
        };
        // The transposed op scatters through the geometry of a forward conv
        // whose input is our output and whose output is our input.
        let geo = Geometry { channels: co, height: out_h, width: out_w, kernel: kh, stride, pad, out_h: h, out_w: w };
        let (rows, cols) = (geo.col_rows(), geo.col_cols());
        let x = self.data_rc();
        let wt = weight.data_rc();
        let out_plane = co * out_h * out_w;
        let in_plane = ci * cols;
        let mut out = vec![0.0; n * out_plane];
        let mut col = vec![0.0; rows * cols];
        for b in 0..n {
            gemm(rows, ci, cols, &wt, true, &x[b * in_plane..(b + 1) * in_plane], false, 0.0, &mut col);
            col2im(&col, &geo, &mut out[b * out_plane..(b + 1) * out_plane]);
        }
        if let Some(bias) = bias {
            add_bias(&mut out, bias.data(), n, out_h * out_w);
        }
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        Ok(Tensor::from_op(vec![n, co, out_h, out_w], Rc::new(out), parents, move |g, m| {
            let mut col = vec![0.0; rows * cols];
            let mut gx = m[0].then(|| vec![0.0; n * in_plane]);
            let mut gw = m[1].then(|| vec![0.0; ci * rows]);
            if gx.is_some() || gw.is_some() {
                for b in 0..n {
                    im2col(&g[b * out_plane..(b + 1) * out_plane], &geo, &mut col);
                    if let Some(gx) = gx.as_mut() {
                        gemm(ci, rows, cols, &wt, false, &col, false, 0.0, &mut gx[b * in_plane..(b + 1) * in_plane]);
                    }
                    if let Some(gw) = gw.as_mut() {
                        gemm(ci, cols, rows, &x[b * in_plane..(b + 1) * in_plane], false, &col, true, 1.0, gw);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if m.len() > 2 {
                grads.push(m[2].then(|| bias_grad(g, n, co, out_h * out_w)));
            }
            grads
        }))
    }

    /// Mirror padding without repeating the edge sample.
    pub fn reflection_pad2d(&self, pad: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if pad >= h || pad >= w {
            return Err(Error::Shape(format!(
                "reflection pad {pad} needs spatial dims larger than the pad, got {h}x{w}"
            )));
        }
        let reflect = |i: isize, len: usize| -> usize {
            let len = len as isize;
            let r = if i < 0 { -i } else if i >= len { 2 * len - 2 - i } else { i };
            r as usize
        };
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let rows: Rc<Vec<usize>> = Rc::new((0..oh).map(|i| reflect(i as isize - pad as isize, h)).collect());
        let cols: Rc<Vec<usize>> = Rc::new((0..ow).map(|j| reflect(j as isize - pad as isize, w)).collect());
        let x = self.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for &r in rows.iter() {
                out.extend(cols.iter().map(|&q| plane[r * w + q]));
            }
        }
        Ok(Tensor::from_op(vec![n, c, oh, ow], Rc::new(out), vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let plane = &mut gx[p * h * w..(p + 1) * h * w];
                let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                for (i, &r) in rows.iter().enumerate() {
                    for (j, &q) in cols.iter().enumerate() {
                        plane[r * w + q] += gp[i * ow + j];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Per-sample, per-channel normalization over the spatial plane, without
    /// affine parameters.
    pub fn instance_norm2d(&self, eps: f64) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        let plane = h * w;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; n * c];
        for p in 0..n * c {
            let src = &x[p * plane..(p + 1) * plane];
            let mean = src.iter().sum::<f64>() / plane as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[p] = is;
            for (o, v) in out[p * plane..(p + 1) * plane].iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
        }
        let out = Rc::new(out);
        let xhat = out.clone();
        Ok(Tensor::from_op(vec![n, c, h, w], out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for p in 0..n * c {
                let gp = &g[p * plane..(p + 1) * plane];
                let xp = &xhat[p * plane..(p + 1) * plane];
                let mg = gp.iter().sum::<f64>() / plane as f64;
                let mgx = gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>() / plane as f64;
                for ((o, gv), xv) in gx[p * plane..(p + 1) * plane].iter_mut().zip(gp).zip(xp) {
                    *o = (gv - mg - xv * mgx) * inv_std[p];
                }
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::{finite_diff, lcg_vec, max_rel_err};
    use super::*;

    /// Direct nested-loop convolution, independent of im2col.
    fn naive_conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], s: usize, p: usize) -> (Vec<f64>, usize, usize) {
        let [n, c, h, wd] = xs;
        let [o, _, k, _] = ws;
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (i * s + ki) as isize - p as isize;
                                    let iw = (j * s + kj) as isize - p as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                        acc += x[((b * c + ic) * h + ih as usize) * wd + iw as usize]
                                            * w[((oc * c + ic) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out[((b * o + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        (out, oh, ow)
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        for &(s, p, k) in &[(1, 0, 3), (2, 1, 3), (2, 1, 4), (1, 1, 4), (1, 3, 7)] {
            let xs = [2, 3, 9, 8];
            let ws = [4, 3, k, k];
            let x = lcg_vec(xs.iter().product(), 11);
            let w = lcg_vec(ws.iter().product(), 12);
            let (expect, oh, ow) = naive_conv(&x, xs, &w, ws, s, p);
            let got = Tensor::from_vec(x, &xs)
                .unwrap()
                .conv2d(&Tensor::from_vec(w, &ws).unwrap(), None, s, p)
                .unwrap();
            assert_eq!(got.shape(), &[2, 4, oh, ow]);
            assert!(max_rel_err(got.data(), &expect) < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> for equal kernel geometry.
        let (s, p, k) = (2, 1, 3);
        let x = Tensor::from_vec(lcg_vec(2 * 3 * 8 * 8, 21), &[2, 3, 8, 8]).unwrap();
        let w = Tensor::from_vec(lcg_vec(5 * 3 * k * k, 22), &[5, 3, k, k]).unwrap();
        let y_fwd = x.conv2d(&w, None, s, p).unwrap();
        let y = Tensor::from_vec(lcg_vec(y_fwd.numel(), 23), y_fwd.shape()).unwrap();
        // [out, in, k, k] reinterpreted as [in_t, out_t, k, k] for the transpose.
        let xt = y.conv_transpose2d(&w, None, s, p, 1).unwrap();
        assert_eq!(xt.shape(), x.shape());
        let lhs: f64 = y_fwd.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(xt.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn spatial_op_gradients_match_finite_differences() {
        let xs = [2, 2, 6, 6];
        let x0 = lcg_vec(xs.iter().product(), 31);
        let w1 = Tensor::from_vec(lcg_vec(3 * 2 * 3 * 3, 32), &[3, 2, 3, 3]).unwrap();
        let b1 = Tensor::from_vec(lcg_vec(3, 33), &[3]).unwrap();
        let wt = Tensor::from_vec(lcg_vec(3 * 2 * 3 * 3, 34), &[3, 2, 3, 3]).unwrap();
        let f = |x: &Tensor| -> Tensor {
            let a = x.reflection_pad2d(2).unwrap().conv2d(&w1, Some(&b1), 2, 1).unwrap();
            let a = a.instance_norm2d(1e-5).unwrap().tanh();
            let up = a.conv_transpose2d(&wt, None, 2, 1, 1).unwrap();
            up.tanh().mul(&up).unwrap().sum()
        };
        let x = Tensor::parameter(x0.clone(), &xs).unwrap();
        let g = f(&x).backward().unwrap().get_or_zeros(&x);
        let fd = finite_diff(&x0, &xs, 1e-5, |t| f(t).item().unwrap());
        assert!(max_rel_err(&g, &fd) < 1e-6, "err {}", max_rel_err(&g, &fd));
    }

    #[test]
    fn weight_and_bias_gradients_match_finite_differences() {
        let x = Tensor::from_vec(lcg_vec(2 * 2 * 5 * 5, 41), &[2, 2, 5, 5]).unwrap();
        let ws = [3, 2, 3, 3];
        let w0 = lcg_vec(ws.iter().product(), 42);
        let bias = Tensor::parameter(lcg_vec(3, 43), &[3]).unwrap();
        let wt = Tensor::parameter(lcg_vec(3 * 2 * 4 * 4, 44), &[3, 2, 4, 4]).unwrap();
        let f = |w: &Tensor, bias: &Tensor, wt: &Tensor| -> Tensor {
            let a = x.conv2d(w, Some(bias), 1, 1).unwrap().tanh();
            a.conv_transpose2d(wt, None, 2, 1, 0).unwrap().sqr().mean()
        };
        let w = Tensor::parameter(w0.clone(), &ws).unwrap();
        let grads = f(&w, &bias, &wt).backward().unwrap();
        let fd_w = finite_diff(&w0, &ws, 1e-5, |t| f(t, &bias, &wt).item().unwrap());
        assert!(max_rel_err(&grads.get_or_zeros(&w), &fd_w) < 1e-6);
        let fd_b = finite_diff(bias.data(), &[3], 1e-5, |t| f(&w, t, &wt).item().unwrap());
        assert!(max_rel_err(&grads.get_or_zeros(&bias), &fd_b) < 1e-6);
        let fd_t = finite_diff(wt.data(), wt.shape(), 1e-5, |t| f(&w, &bias, t).item().unwrap());
        assert!(max_rel_err(&grads.get_or_zeros(&wt), &fd_t) < 1e-6);
    }

    #[test]
    fn reflection_pad_mirrors_interior() {
        let x = Tensor::from_vec((0..9).map(f64::from).collect(), &[1, 1, 3, 3]).unwrap();
        let p = x.reflection_pad2d(1).unwrap();
        assert_eq!(p.shape(), &[1, 1, 5, 5]);
        assert_eq!(&p.data()[..5], &[4.0, 3.0, 4.0, 5.0, 4.0]);
        assert!(x.reflection_pad2d(3).is_err());
    }

    #[test]
    fn instance_norm_zero_mean_unit_variance() {
        let x = Tensor::from_vec(lcg_vec(2 * 3 * 4 * 4, 51), &[2, 3, 4, 4]).unwrap();
        let y = x.instance_norm2d(0.0).unwrap();
        for p in y.data().chunks(16) {
            let m = p.iter().sum::<f64>() / 16.0;
            let v = p.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn output_size_arithmetic() {
        assert_eq!(conv2d_output_size(256, 4, 2, 1), Some(128));
        assert_eq!(conv2d_output_size(32, 4, 1, 1), Some(31));
        assert_eq!(conv2d_output_size(2, 7, 1, 0), None);
        assert_eq!(conv_transpose2d_output_size(16, 3, 2, 1, 1), Some(32));
    }
}
