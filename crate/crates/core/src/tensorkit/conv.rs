//! Valid (unpadded) 2-D cross-correlation and max pooling kernels over NCHW tensors.

use super::Tensor;

const BLOCK: usize = 256;

#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(c: usize, h: usize, w: usize, k: usize, s: usize) -> Self {
        Self {
            c,
            h,
            w,
            k,
            s,
            ho: (h - k) / s + 1,
            wo: (w - k) / s + 1,
        }
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &Geom, cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                for oy in 0..g.ho {
                    let src = (c * g.h + oy * g.s + ki) * g.w + kj;
                    let dst = row + oy * g.wo;
                    if g.s == 1 {
                        cols[dst..dst + g.wo].copy_from_slice(&x[src..src + g.wo]);
                    } else {
                        for ox in 0..g.wo {
                            cols[dst + ox] = x[src + ox * g.s];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &Geom, dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                for oy in 0..g.ho {
                    let dst = (c * g.h + oy * g.s + ki) * g.w + kj;
                    let src = row + oy * g.wo;
                    for ox in 0..g.wo {
                        dx[dst + ox * g.s] += cols[src + ox];
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `x`: [N, C, H, W], `weight`: [F, C, k, k], `bias`: [F] → [N, F, Ho, Wo].
pub(crate) fn conv_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, k) = (weight.shape()[0], weight.shape()[2]);
    let g = Geom::new(c, h, w, k, stride);
    let (q, p) = (g.patch(), g.positions());
    let mut out = Tensor::zeros(&[n, f, g.ho, g.wo]);
    let mut cols = vec![0.0; q * p];
    let wd = weight.data();
    let bd = bias.data();
    for s in 0..n {
        im2col(&x.data()[s * c * h * w..(s + 1) * c * h * w], &g, &mut cols);
        let out_s = &mut out.data_mut()[s * f * p..(s + 1) * f * p];
        for start in (0..p).step_by(BLOCK) {
            let end = (start + BLOCK).min(p);
            for fi in 0..f {
                let orow = &mut out_s[fi * p + start..fi * p + end];
                orow.fill(bd[fi]);
                for qi in 0..q {
                    axpy(wd[fi * q + qi], &cols[qi * p + start..qi * p + end], orow);
                }
            }
        }
    }
    out
}

/// Gradients of [`conv_forward`]: (input grad if requested, weight grad, bias grad).
pub(crate) fn conv_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    need_input_grad: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, k) = (weight.shape()[0], weight.shape()[2]);
    let g = Geom::new(c, h, w, k, stride);
    let (q, p) = (g.patch(), g.positions());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[f]);
    let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
    let mut cols = vec![0.0; q * p];
    let mut dcols = vec![0.0; q * p];
    let wd = weight.data();
    for s in 0..n {
        im2col(&x.data()[s * c * h * w..(s + 1) * c * h * w], &g, &mut cols);
        let go = &grad_out.data()[s * f * p..(s + 1) * f * p];
        {
            let dwd = dw.data_mut();
            for fi in 0..f {
                let grow = &go[fi * p..(fi + 1) * p];
                for qi in 0..q {
                    dwd[fi * q + qi] += dot(grow, &cols[qi * p..(qi + 1) * p]);
                }
            }
        }
        for (fi, b) in db.data_mut().iter_mut().enumerate() {
            *b += go[fi * p..(fi + 1) * p].iter().sum::<f64>();
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(0.0);
            for start in (0..p).step_by(BLOCK) {
                let end = (start + BLOCK).min(p);
                for qi in 0..q {
                    let drow = &mut dcols[qi * p + start..qi * p + end];
                    for fi in 0..f {
                        axpy(wd[fi * q + qi], &go[fi * p + start..fi * p + end], drow);
                    }
                }
            }
            col2im_add(
                &dcols,
                &g,
                &mut dx.data_mut()[s * c * h * w..(s + 1) * c * h * w],
            );
        }
    }
    (dx, dw, db)
}

/// Window max over [N, C, H, W]; also returns the flat input index of each winner.
pub(crate) fn maxpool_forward(x: &Tensor, size: usize, stride: usize) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ho = (h - size) / stride + 1;
    let wo = (w - size) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    let od = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (oy * stride) * w + ox * stride;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * stride + dy) * w + ox * stride + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                od[o] = xd[best];
                arg.push(best);
                o += 1;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor,
) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation.
    fn naive(x: &Tensor, w: &Tensor, b: &Tensor, s: usize) -> Tensor {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (f, k) = (w.shape()[0], w.shape()[2]);
        let (ho, wo) = ((h - k) / s + 1, (wd - k) / s + 1);
        let mut out = Tensor::zeros(&[n, f, ho, wo]);
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[fi];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    acc += w.data()[((fi * c + ci) * k + ki) * k + kj]
                                        * x.data()
                                            [((ni * c + ci) * h + oy * s + ki) * wd + ox * s + kj];
                                }
                            }
                        }
                        out.data_mut()[((ni * f + fi) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], k: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| ((i as f64) * k).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matches_naive_convolution() {
        for (s, h) in [(1, 7), (2, 9), (3, 10)] {
            let x = ramp(&[2, 3, h, h + 1], 0.37);
            let w = ramp(&[4, 3, 3, 3], 0.91);
            let b = ramp(&[4], 1.3);
            let fast = conv_forward(&x, &w, &b, s);
            let slow = naive(&x, &w, &b, s);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_size_150_stride_2() {
        let x = Tensor::zeros(&[1, 3, 150, 150]);
        let w = Tensor::zeros(&[2, 3, 3, 3]);
        let out = conv_forward(&x, &w, &Tensor::zeros(&[2]), 2);
        assert_eq!(out.shape(), &[1, 2, 74, 74]);
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let (y, arg) = maxpool_forward(&x, 2, 2);
        assert_eq!(y.data(), &[5.0]);
        let g = maxpool_backward(x.shape(), &arg, &Tensor::filled(&[1, 1, 1, 1], 2.0));
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
