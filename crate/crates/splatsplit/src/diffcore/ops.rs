//! Differentiable tensor ops. Each method computes its forward value
//! eagerly, then records a backward closure over cloned inputs.
//!
//! Binary elementwise ops require identical shapes; the handful of
//! broadcast patterns the models need ([`Var::broadcast_row`],
//! [`Var::mul_col`], [`Var::add_bias`], [`Var::add_chan_bias`]) are
//! dedicated ops so shape bugs fail loudly instead of broadcasting quietly.

use super::graph::Var;
use super::scalar::{sigmoid, Scalar};
use super::tensor::Tensor;

fn matmul_raw<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dims disagree: {k} vs {k2}");
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            let brow = &b.data()[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    Tensor::new(&[m, n], out)
}

fn transpose2<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    Tensor::from_fn(&[n, m], |i| {
        let (r, c) = (i / m, i % m);
        a.data()[c * n + r]
    })
}

impl<T: Scalar> Var<T> {
    // ----- elementwise binary -----

    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let v = self.with_value(|a| other.with_value(|b| a.zip_map(b, |x, y| x + y)));
        self.graph().push_op(
            v,
            &[self, other],
            Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let v = self.with_value(|a| other.with_value(|b| a.zip_map(b, |x, y| x - y)));
        self.graph().push_op(
            v,
            &[self, other],
            Box::new(|g| vec![Some(g.clone()), Some(g.scale(-T::one()))]),
        )
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let a = self.value();
        let b = other.value();
        let v = a.zip_map(&b, |x, y| x * y);
        self.graph().push_op(
            v,
            &[self, other],
            Box::new(move |g| vec![Some(g.zip_map(&b, |gi, bi| gi * bi)), Some(g.zip_map(&a, |gi, ai| gi * ai))]),
        )
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        let a = self.value();
        let b = other.value();
        let v = a.zip_map(&b, |x, y| x / y);
        self.graph().push_op(
            v,
            &[self, other],
            Box::new(move |g| {
                let ga = g.zip_map(&b, |gi, bi| gi / bi);
                let gb = Tensor::from_fn(g.shape(), |i| {
                    let bi = b.data()[i];
                    -g.data()[i] * a.data()[i] / (bi * bi)
                });
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// `self * self` with the correct doubled gradient.
    pub fn square(&self) -> Var<T> {
        self.mul(self)
    }

    // ----- scalar affine and unary -----

    /// `k * self + c` elementwise.
    pub fn affine(&self, k: T, c: T) -> Var<T> {
        let v = self.with_value(|a| a.map(|x| k * x + c));
        self.graph()
            .push_op(v, &[self], Box::new(move |g| vec![Some(g.scale(k))]))
    }

    pub fn neg(&self) -> Var<T> {
        self.affine(-T::one(), T::zero())
    }

    pub fn scale(&self, k: T) -> Var<T> {
        self.affine(k, T::zero())
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        self.affine(T::one(), c)
    }

    pub fn abs(&self) -> Var<T> {
        let a = self.value();
        let v = a.map(|x| x.abs());
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| {
                // Subgradient 0 at the kink.
                vec![Some(g.zip_map(&a, |gi, ai| {
                    if ai > T::zero() {
                        gi
                    } else if ai < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    pub fn exp(&self) -> Var<T> {
        let v = self.with_value(|a| a.map(|x| x.exp()));
        let out = v.clone();
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| vec![Some(g.zip_map(&out, |gi, yi| gi * yi))]),
        )
    }

    pub fn ln(&self) -> Var<T> {
        let a = self.value();
        let v = a.map(|x| x.ln());
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| vec![Some(g.zip_map(&a, |gi, ai| gi / ai))]),
        )
    }

    pub fn sqrt(&self) -> Var<T> {
        let v = self.with_value(|a| a.map(|x| x.sqrt()));
        let out = v.clone();
        let half = T::c(0.5);
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| vec![Some(g.zip_map(&out, |gi, yi| gi * half / yi))]),
        )
    }

    pub fn sigmoid(&self) -> Var<T> {
        let v = self.with_value(|a| a.map(sigmoid));
        let out = v.clone();
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| vec![Some(g.zip_map(&out, |gi, yi| gi * yi * (T::one() - yi)))]),
        )
    }

    pub fn tanh(&self) -> Var<T> {
        let v = self.with_value(|a| a.map(|x| x.tanh()));
        let out = v.clone();
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| vec![Some(g.zip_map(&out, |gi, yi| gi * (T::one() - yi * yi)))]),
        )
    }

    pub fn relu(&self) -> Var<T> {
        let a = self.value();
        let v = a.map(|x| x.max(T::zero()));
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| {
                vec![Some(g.zip_map(&a, |gi, ai| if ai > T::zero() { gi } else { T::zero() }))]
            }),
        )
    }

    pub fn powf(&self, p: T) -> Var<T> {
        let a = self.value();
        let v = a.map(|x| x.powf(p));
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| {
                vec![Some(g.zip_map(&a, |gi, ai| gi * p * ai.powf(p - T::one())))]
            }),
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        let a = self.value();
        let v = a.map(|x| x.max(lo).min(hi));
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| {
                vec![Some(g.zip_map(&a, |gi, ai| {
                    if ai > lo && ai < hi {
                        gi
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    // ----- reductions -----

    pub fn sum(&self) -> Var<T> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let v = Tensor::scalar(a.sum_all());
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(&self) -> Var<T> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let n = T::c(a.numel() as f64);
        let v = Tensor::scalar(a.sum_all() / n);
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| vec![Some(Tensor::full(&shape, g.item() / n))]),
        )
    }

    // ----- linear algebra -----

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape().len(), 2, "matmul lhs must be rank 2");
        assert_eq!(b.shape().len(), 2, "matmul rhs must be rank 2");
        let v = matmul_raw(&a, &b);
        self.graph().push_op(
            v,
            &[self, other],
            Box::new(move |g| {
                let ga = matmul_raw(g, &transpose2(&b));
                let gb = matmul_raw(&transpose2(&a), g);
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// `[m,n] + [n]`, the bias term of a dense layer.
    pub fn add_bias(&self, bias: &Var<T>) -> Var<T> {
        let a = self.value();
        let b = bias.value();
        let (m, n) = (a.shape()[0], a.shape()[1]);
        assert_eq!(b.shape(), &[n], "bias shape {:?} vs row width {n}", b.shape());
        let v = Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i % n]);
        self.graph().push_op(
            v,
            &[self, bias],
            Box::new(move |g| {
                let mut gb = vec![T::zero(); n];
                for r in 0..m {
                    for c in 0..n {
                        gb[c] = gb[c] + g.data()[r * n + c];
                    }
                }
                vec![Some(g.clone()), Some(Tensor::new(&[n], gb))]
            }),
        )
    }

    /// Repeat a `[c]` vector into `[n, c]` rows.
    pub fn broadcast_row(&self, n: usize) -> Var<T> {
        let b = self.value();
        assert_eq!(b.shape().len(), 1, "broadcast_row input must be rank 1");
        let c = b.shape()[0];
        let v = Tensor::from_fn(&[n, c], |i| b.data()[i % c]);
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| {
                let mut gb = vec![T::zero(); c];
                for r in 0..n {
                    for j in 0..c {
                        gb[j] = gb[j] + g.data()[r * c + j];
                    }
                }
                vec![Some(Tensor::new(&[c], gb))]
            }),
        )
    }

    /// Scale row `i` of a `[n, c]` tensor by `col[i]`.
    pub fn mul_col(&self, col: &Var<T>) -> Var<T> {
        let a = self.value();
        let s = col.value();
        assert_eq!(a.shape().len(), 2, "mul_col lhs must be rank 2");
        let (n, c) = (a.shape()[0], a.shape()[1]);
        assert_eq!(s.shape(), &[n], "column shape {:?} vs {n} rows", s.shape());
        let v = Tensor::from_fn(&[n, c], |i| a.data()[i] * s.data()[i / c]);
        self.graph().push_op(
            v,
            &[self, col],
            Box::new(move |g| {
                let ga = Tensor::from_fn(&[n, c], |i| g.data()[i] * s.data()[i / c]);
                let mut gs = vec![T::zero(); n];
                for r in 0..n {
                    for j in 0..c {
                        gs[r] = gs[r] + g.data()[r * c + j] * a.data()[r * c + j];
                    }
                }
                vec![Some(ga), Some(Tensor::new(&[n], gs))]
            }),
        )
    }

    /// Normalize each row of a `[n, c]` tensor to unit length.
    pub fn normalize_rows(&self) -> Var<T> {
        let a = self.value();
        assert_eq!(a.shape().len(), 2, "normalize_rows input must be rank 2");
        let (n, c) = (a.shape()[0], a.shape()[1]);
        let eps = T::c(1e-24);
        let mut norms = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * c];
        for r in 0..n {
            let row = &a.data()[r * c..(r + 1) * c];
            let nrm = (row.iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
            norms[r] = nrm;
            for j in 0..c {
                out[r * c + j] = row[j] / nrm;
            }
        }
        let v = Tensor::new(&[n, c], out);
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); n * c];
                for r in 0..n {
                    let row = &a.data()[r * c..(r + 1) * c];
                    let grow = &g.data()[r * c..(r + 1) * c];
                    let nrm = norms[r];
                    let dot: T = row.iter().zip(grow).map(|(&x, &gi)| x * gi).sum();
                    let n3 = nrm * nrm * nrm;
                    for j in 0..c {
                        gx[r * c + j] = grow[j] / nrm - row[j] * dot / n3;
                    }
                }
                vec![Some(Tensor::new(&[n, c], gx))]
            }),
        )
    }

    // ----- shape -----

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let a = self.value();
        let orig = a.shape().to_vec();
        let v = a.reshaped(shape);
        self.graph()
            .push_op(v, &[self], Box::new(move |g| vec![Some(g.reshaped(&orig))]))
    }

    /// Contiguous slab `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let a = self.value();
        let shape = a.shape().to_vec();
        assert!(axis < shape.len(), "slice axis {axis} out of rank {}", shape.len());
        assert!(start + len <= shape[axis], "slice [{start}, {}) exceeds axis size {}", start + len, shape[axis]);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_n = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * axis_n * inner + start * inner;
            out.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let v = Tensor::new(&out_shape, out);
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&shape);
                for o in 0..outer {
                    let dst = o * axis_n * inner + start * inner;
                    let src = o * len * inner;
                    gx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }

    // ----- image ops (CHW layout) -----

    /// `[h,w,c] -> [c,h,w]`.
    pub fn hwc_to_chw(&self) -> Var<T> {
        let a = self.value();
        let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let v = Tensor::from_fn(&[c, h, w], |i| {
            let (ch, rest) = (i / (h * w), i % (h * w));
            let (y, x) = (rest / w, rest % w);
            a.data()[(y * w + x) * c + ch]
        });
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| {
                let gx = Tensor::from_fn(&[h, w, c], |i| {
                    let (y, rest) = (i / (w * c), i % (w * c));
                    let (x, ch) = (rest / c, rest % c);
                    g.data()[ch * h * w + y * w + x]
                });
                vec![Some(gx)]
            }),
        )
    }

    /// `[c,h,w] -> [h,w,c]`.
    pub fn chw_to_hwc(&self) -> Var<T> {
        let a = self.value();
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let v = Tensor::from_fn(&[h, w, c], |i| {
            let (y, rest) = (i / (w * c), i % (w * c));
            let (x, ch) = (rest / c, rest % c);
            a.data()[ch * h * w + y * w + x]
        });
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| {
                let gx = Tensor::from_fn(&[c, h, w], |i| {
                    let (ch, rest) = (i / (h * w), i % (h * w));
                    let (y, x) = (rest / w, rest % w);
                    g.data()[(y * w + x) * c + ch]
                });
                vec![Some(gx)]
            }),
        )
    }

    /// 2-d convolution, `[ci,h,w] * [co,ci,kh,kw] -> [co,oh,ow]`, zero padding.
    pub fn conv2d(&self, weight: &Var<T>, stride: usize, pad: usize) -> Var<T> {
        let x = self.value();
        let wt = weight.value();
        assert_eq!(x.shape().len(), 3, "conv2d input must be [c,h,w]");
        assert_eq!(wt.shape().len(), 4, "conv2d weight must be [o,c,kh,kw]");
        let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, ci2, kh, kw) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
        assert_eq!(ci, ci2, "conv2d channel mismatch: input {ci}, weight {ci2}");
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;

        let mut out = vec![T::zero(); co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for c in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc = acc
                                    + x.data()[c * h * w + iy as usize * w + ix as usize]
                                        * wt.data()[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let v = Tensor::new(&[co, oh, ow], out);
        self.graph().push_op(
            v,
            &[self, weight],
            Box::new(move |g| {
                // Adjoint of the forward loop: scatter each output gradient
                // back to the inputs and weights it was assembled from.
                let mut gx = vec![T::zero(); ci * h * w];
                let mut gw = vec![T::zero(); co * ci * kh * kw];
                for o in 0..co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g.data()[(o * oh + oy) * ow + ox];
                            for c in 0..ci {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = c * h * w + iy as usize * w + ix as usize;
                                        let wi = ((o * ci + c) * kh + ky) * kw + kx;
                                        gx[xi] = gx[xi] + go * wt.data()[wi];
                                        gw[wi] = gw[wi] + go * x.data()[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&[ci, h, w], gx)),
                    Some(Tensor::new(&[co, ci, kh, kw], gw)),
                ]
            }),
        )
    }

    /// `[c,h,w] + [c]`, per-channel bias.
    pub fn add_chan_bias(&self, bias: &Var<T>) -> Var<T> {
        let a = self.value();
        let b = bias.value();
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert_eq!(b.shape(), &[c], "channel bias shape {:?} vs {c} channels", b.shape());
        let hw = h * w;
        let v = Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i / hw]);
        self.graph().push_op(
            v,
            &[self, bias],
            Box::new(move |g| {
                let mut gb = vec![T::zero(); c];
                for ch in 0..c {
                    gb[ch] = g.data()[ch * hw..(ch + 1) * hw].iter().copied().sum();
                }
                vec![Some(g.clone()), Some(Tensor::new(&[c], gb))]
            }),
        )
    }

    /// Nearest-neighbor 2x upsample, `[c,h,w] -> [c,2h,2w]`.
    pub fn upsample2_nearest(&self) -> Var<T> {
        let a = self.value();
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let v = Tensor::from_fn(&[c, 2 * h, 2 * w], |i| {
            let (ch, rest) = (i / (4 * h * w), i % (4 * h * w));
            let (y, x) = (rest / (2 * w), rest % (2 * w));
            a.data()[ch * h * w + (y / 2) * w + x / 2]
        });
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            let xi = ch * h * w + (y / 2) * w + x / 2;
                            gx[xi] = gx[xi] + g.data()[(ch * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                vec![Some(Tensor::new(&[c, h, w], gx))]
            }),
        )
    }

    /// Zero-pad `[c,h,w]` by the given amounts on each edge.
    pub fn pad2d(&self, top: usize, bottom: usize, left: usize, right: usize) -> Var<T> {
        let a = self.value();
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (nh, nw) = (h + top + bottom, w + left + right);
        let mut out = Tensor::zeros(&[c, nh, nw]);
        for ch in 0..c {
            for y in 0..h {
                let src = ch * h * w + y * w;
                let dst = ch * nh * nw + (y + top) * nw + left;
                out.data_mut()[dst..dst + w].copy_from_slice(&a.data()[src..src + w]);
            }
        }
        self.graph().push_op(
            out,
            &[self],
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..h {
                        let src = ch * nh * nw + (y + top) * nw + left;
                        let dst = ch * h * w + y * w;
                        gx.data_mut()[dst..dst + w].copy_from_slice(&g.data()[src..src + w]);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Crop a `[c,h,w]` tensor to `[c,ch_h,ch_w]` starting at `(y0, x0)`.
    pub fn crop2d(&self, y0: usize, x0: usize, out_h: usize, out_w: usize) -> Var<T> {
        let a = self.value();
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert!(y0 + out_h <= h && x0 + out_w <= w, "crop exceeds input bounds");
        let mut out = Tensor::zeros(&[c, out_h, out_w]);
        for ch in 0..c {
            for y in 0..out_h {
                let src = ch * h * w + (y + y0) * w + x0;
                let dst = ch * out_h * out_w + y * out_w;
                out.data_mut()[dst..dst + out_w].copy_from_slice(&a.data()[src..src + out_w]);
            }
        }
        self.graph().push_op(
            out,
            &[self],
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..out_h {
                        let dst = ch * h * w + (y + y0) * w + x0;
                        let src = ch * out_h * out_w + y * out_w;
                        gx.data_mut()[dst..dst + out_w].copy_from_slice(&g.data()[src..src + out_w]);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Channelwise valid correlation with a fixed (non-learned) kernel.
    pub fn filter2d_valid(&self, kernel: &Tensor<T>) -> Var<T> {
        let a = self.value();
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
        assert!(h >= kh && w >= kw, "kernel larger than input");
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let k = kernel.clone();
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..kh {
                        for kx in 0..kw {
                            acc = acc
                                + a.data()[ch * h * w + (oy + ky) * w + ox + kx]
                                    * k.data()[ky * kw + kx];
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let v = Tensor::new(&[c, oh, ow], out);
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g.data()[(ch * oh + oy) * ow + ox];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let xi = ch * h * w + (oy + ky) * w + ox + kx;
                                    gx[xi] = gx[xi] + go * k.data()[ky * kw + kx];
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[c, h, w], gx))]
            }),
        )
    }

    // ----- encodings -----

    /// Sinusoidal positional encoding of a `[n,d]` tensor.
    ///
    /// Output rows are `[x?, sin(f0 x), cos(f0 x), sin(f1 x), ...]` with each
    /// block holding all `d` input dims; `x?` is present iff `include_input`.
    pub fn posenc(&self, freqs: &[T], include_input: bool) -> Var<T> {
        let a = self.value();
        assert_eq!(a.shape().len(), 2, "posenc input must be rank 2");
        let (n, d) = (a.shape()[0], a.shape()[1]);
        let fs: Vec<T> = freqs.to_vec();
        let inc = include_input as usize;
        let width = d * (inc + 2 * fs.len());
        let mut out = vec![T::zero(); n * width];
        for r in 0..n {
            let row = &a.data()[r * d..(r + 1) * d];
            let orow = &mut out[r * width..(r + 1) * width];
            if include_input {
                orow[..d].copy_from_slice(row);
            }
            for (fi, &f) in fs.iter().enumerate() {
                for j in 0..d {
                    let arg = f * row[j];
                    orow[(inc + 2 * fi) * d + j] = arg.sin();
                    orow[(inc + 2 * fi + 1) * d + j] = arg.cos();
                }
            }
        }
        let v = Tensor::new(&[n, width], out);
        self.graph().push_op(
            v,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); n * d];
                for r in 0..n {
                    let row = &a.data()[r * d..(r + 1) * d];
                    let grow = &g.data()[r * width..(r + 1) * width];
                    for j in 0..d {
                        let mut acc = if inc == 1 { grow[j] } else { T::zero() };
                        for (fi, &f) in fs.iter().enumerate() {
                            let arg = f * row[j];
                            acc = acc + f * arg.cos() * grow[(inc + 2 * fi) * d + j];
                            acc = acc - f * arg.sin() * grow[(inc + 2 * fi + 1) * d + j];
                        }
                        gx[r * d + j] = acc;
                    }
                }
                vec![Some(Tensor::new(&[n, d], gx))]
            }),
        )
    }
}

/// Concatenate along `axis`; all other dims must match.
pub fn concat<T: Scalar>(axis: usize, parts: &[&Var<T>]) -> Var<T> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    assert!(axis < base.len(), "concat axis {axis} out of rank {}", base.len());
    for v in &values[1..] {
        assert_eq!(v.shape().len(), base.len(), "concat rank mismatch");
        for (ax, (&s, &b)) in v.shape().iter().zip(&base).enumerate() {
            assert!(ax == axis || s == b, "concat shapes differ off-axis: {:?} vs {:?}", v.shape(), base);
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let axis_sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = axis_sizes.iter().sum();
    let mut out_shape = base.clone();
    out_shape[axis] = total;

    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &an) in values.iter().zip(&axis_sizes) {
            let block = an * inner;
            out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
        }
    }
    let value = Tensor::new(&out_shape, out);

    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    let graph = parts[0].graph();
    graph.push_op(
        value,
        parts,
        Box::new(move |g| {
            let mut grads: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            let total_inner = total * inner;
            for o in 0..outer {
                let mut off = 0usize;
                for (pi, &an) in axis_sizes.iter().enumerate() {
                    let block = an * inner;
                    let src = o * total_inner + off;
                    let dst = o * block;
                    grads[pi].data_mut()[dst..dst + block]
                        .copy_from_slice(&g.data()[src..src + block]);
                    off += block;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    )
}
