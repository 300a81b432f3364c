//! Reverse-mode autodiff over [`Tensor`].
//!
//! A [`Graph`] is a tape of nodes built by one forward pass. Ops record the
//! parent ids plus whatever small state their backward needs (convolutions
//! re-derive the im2col buffer instead of caching it). `backward` walks the
//! tape in reverse creation order, which is a valid topological order because
//! ops can only reference earlier nodes.

use std::cell::RefCell;

use rayon::prelude::*;

use crate::tensor::{Scalar, Tensor};

/// Node handle inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// How batch-norm nodes source their statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running stats are updated (training).
    BatchUpdate,
    /// Batch statistics; running stats untouched (gradient checks).
    Batch,
    /// Running statistics (inference).
    Running,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h_in: usize,
    w_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddConst(Var, S),
    /// Per-channel bias over NCHW.
    AddBiasChan(Var, Var),
    /// Per-last-dim bias.
    AddBiasLast(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    ConvT2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        out_pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Tensor<S>,
        inv_std: Tensor<S>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Tensor<S>,
        inv_std: Tensor<S>,
    },
    LeakyRelu(Var, S),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    Clamp(Var, S, S),
    Abs(Var),
    Square(Var),
    MeanAll(Var),
    BilinearResize(Var),
    Concat {
        axis: usize,
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Linear {
        x: Var,
        w: Var,
    },
    Bmm(Var, Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Broadcast0(Var),
    MeanAxis1(Var),
    ScalePerBatch {
        x: Var,
        s: Var,
    },
    ImgToTokens {
        x: Var,
        patch: usize,
    },
    CrossEntropy {
        logits: Var,
        softmax: Tensor<S>,
        targets: Vec<usize>,
    },
}

pub struct Graph<S: Scalar> {
    values: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Tensor<S>>>,
    pub bn_mode: BnMode,
}

impl<S: Scalar> Graph<S> {
    pub fn new(bn_mode: BnMode) -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
            bn_mode,
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if it was tracked.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    /// Constant input: no gradient tracked.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Re-enter a value as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.values[v.0].clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].zip(&self.values[b.0], |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].zip(&self.values[b.0], |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].zip(&self.values[b.0], |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let v = self.values[a.0].map(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_const(&mut self, a: Var, c: S) -> Var {
        let v = self.values[a.0].map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddConst(a, c), ng)
    }

    pub fn add_bias_chan(&mut self, x: Var, b: Var) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        assert!(xs.len() == 4, "add_bias_chan expects NCHW");
        let c = xs[1];
        assert_eq!(self.values[b.0].len(), c, "bias length != channels");
        let hw = xs[2] * xs[3];
        let mut out = self.values[x.0].clone();
        {
            let bv = self.values[b.0].data().to_vec();
            let od = out.data_mut();
            for n in 0..xs[0] {
                for ci in 0..c {
                    let base = (n * c + ci) * hw;
                    for i in 0..hw {
                        od[base + i] = od[base + i] + bv[ci];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddBiasChan(x, b), ng)
    }

    pub fn add_bias_last(&mut self, x: Var, b: Var) -> Var {
        let d = *self.values[x.0].shape().last().expect("bias on 0-d");
        assert_eq!(self.values[b.0].len(), d, "bias length != last dim");
        let mut out = self.values[x.0].clone();
        {
            let bv = self.values[b.0].data().to_vec();
            let od = out.data_mut();
            for (i, v) in od.iter_mut().enumerate() {
                *v = *v + bv[i % d];
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddBiasLast(x, b), ng)
    }

    /// 2-D convolution, NCHW input, OIHW weight, square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be OIHW");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let k = ws[2];
        let h_out = (xs[2] + 2 * pad - k) / stride + 1;
        let w_out = (xs[3] + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h_in: xs[2],
            w_in: xs[3],
            c_out: ws[0],
            k,
            stride,
            pad,
            h_out,
            w_out,
        };
        let out = conv2d_forward(&self.values[x.0], &self.values[w.0], geom);
        let ng = self.ng(x) || self.ng(w) || b.map(|bb| self.ng(bb)).unwrap_or(false);
        let y = self.push(out, Op::Conv2d { x, w, geom }, ng);
        match b {
            Some(bias) => self.add_bias_chan(y, bias),
            None => y,
        }
    }

    /// Transposed 2-D convolution, NCHW input, weight layout [C_in, C_out, k, k].
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        assert_eq!(xs.len(), 4, "conv_transpose2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv_transpose2d weight must be [Cin,Cout,k,k]");
        assert_eq!(xs[1], ws[0], "conv_transpose2d channel mismatch");
        let k = ws[2];
        let h_out = (xs[2] - 1) * stride + k + out_pad - 2 * pad;
        let w_out = (xs[3] - 1) * stride + k + out_pad - 2 * pad;
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h_in: xs[2],
            w_in: xs[3],
            c_out: ws[1],
            k,
            stride,
            pad,
            h_out,
            w_out,
        };
        let out = convt2d_forward(&self.values[x.0], &self.values[w.0], geom);
        let ng = self.ng(x) || self.ng(w) || b.map(|bb| self.ng(bb)).unwrap_or(false);
        let y = self.push(out, Op::ConvT2d { x, w, geom, out_pad }, ng);
        match b {
            Some(bias) => self.add_bias_chan(y, bias),
            None => y,
        }
    }

    /// Batch norm over NCHW channels. Running stats live outside the graph and
    /// are only touched in [`BnMode::BatchUpdate`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &RefCell<Tensor<S>>,
        running_var: &RefCell<Tensor<S>>,
        eps: S,
        momentum: S,
    ) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        assert_eq!(xs.len(), 4, "batch_norm expects NCHW");
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let count = S::from_usize(n * h * w).unwrap();
        let batch_stats = self.bn_mode != BnMode::Running;

        let (mean, var) = if batch_stats {
            let xv = self.values[x.0].data();
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for ci in 0..c {
                let mut s = S::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for i in 0..h * w {
                        s = s + xv[base + i];
                    }
                }
                mean[ci] = s / count;
            }
            for ci in 0..c {
                let mut s = S::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for i in 0..h * w {
                        let d = xv[base + i] - mean[ci];
                        s = s + d * d;
                    }
                }
                var[ci] = s / count;
            }
            (Tensor::from_vec(&[c], mean), Tensor::from_vec(&[c], var))
        } else {
            (running_mean.borrow().clone(), running_var.borrow().clone())
        };

        if self.bn_mode == BnMode::BatchUpdate {
            let one = S::one();
            let mut rm = running_mean.borrow_mut();
            let mut rv = running_var.borrow_mut();
            for ci in 0..c {
                rm.data_mut()[ci] = (one - momentum) * rm.data()[ci] + momentum * mean.data()[ci];
                rv.data_mut()[ci] = (one - momentum) * rv.data()[ci] + momentum * var.data()[ci];
            }
        }

        let inv_std = var.map(|v| S::one() / (v + eps).sqrt());
        let mut out = Tensor::zeros(&xs);
        {
            let xv = self.values[x.0].data();
            let gv = self.values[gamma.0].data();
            let bv = self.values[beta.0].data();
            let od = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    let (m, is, g, b) = (mean.data()[ci], inv_std.data()[ci], gv[ci], bv[ci]);
                    for i in 0..h * w {
                        od[base + i] = (xv[base + i] - m) * is * g + b;
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            ng,
        )
    }

    /// Layer norm over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        let d = *xs.last().expect("layer_norm on 0-d");
        let rows = self.values[x.0].len() / d;
        let dn = S::from_usize(d).unwrap();
        let mut mean = Tensor::zeros(&[rows]);
        let mut inv_std = Tensor::zeros(&[rows]);
        let mut out = Tensor::zeros(&xs);
        {
            let xv = self.values[x.0].data();
            let gv = self.values[gamma.0].data();
            let bv = self.values[beta.0].data();
            let od = out.data_mut();
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let m = row.iter().copied().sum::<S>() / dn;
                let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<S>() / dn;
                let is = S::one() / (var + eps).sqrt();
                mean.data_mut()[r] = m;
                inv_std.data_mut()[r] = is;
                for i in 0..d {
                    od[r * d + i] = (row[i] - m) * is * gv[i] + bv[i];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            ng,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Var {
        let v = self.values[x.0].map(|a| if a > S::zero() { a } else { a * slope });
        let ng = self.ng(x);
        self.push(v, Op::LeakyRelu(x, slope), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.values[x.0].map(|a| a.tanh());
        let ng = self.ng(x);
        self.push(v, Op::Tanh(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.values[x.0].map(gelu_fwd);
        let ng = self.ng(x);
        self.push(v, Op::Gelu(x), ng)
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_last(&self.values[x.0]);
        let ng = self.ng(x);
        self.push(v, Op::Softmax(x), ng)
    }

    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Var {
        let v = self.values[x.0].map(|a| if a < lo { lo } else if a > hi { hi } else { a });
        let ng = self.ng(x);
        self.push(v, Op::Clamp(x, lo, hi), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.values[x.0].map(|a| a.abs());
        let ng = self.ng(x);
        self.push(v, Op::Abs(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.values[x.0].map(|a| a * a);
        let ng = self.ng(x);
        self.push(v, Op::Square(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.values[x.0].mean());
        let ng = self.ng(x);
        self.push(v, Op::MeanAll(x), ng)
    }

    pub fn mean_abs(&mut self, x: Var) -> Var {
        let a = self.abs(x);
        self.mean_all(a)
    }

    pub fn mean_sq(&mut self, x: Var) -> Var {
        let a = self.square(x);
        self.mean_all(a)
    }

    /// Bilinear resize of NCHW maps with half-pixel centers.
    pub fn bilinear_resize(&mut self, x: Var, h_out: usize, w_out: usize) -> Var {
        let v = bilinear_forward(&self.values[x.0], h_out, w_out);
        let ng = self.ng(x);
        self.push(v, Op::BilinearResize(x), ng)
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.values[parts[0].0].shape().to_vec();
        let mut cat_len = 0;
        for p in parts {
            let s = self.values[p.0].shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (i, (&a, &b)) in s.iter().zip(first.iter()).enumerate() {
                if i != axis {
                    assert_eq!(a, b, "concat non-axis dim mismatch");
                }
            }
            cat_len += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = cat_len;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&shape);
        {
            let od = out.data_mut();
            let mut off = 0;
            for p in parts {
                let t = &self.values[p.0];
                let alen = t.shape()[axis];
                let tv = t.data();
                for o in 0..outer {
                    let src = &tv[o * alen * inner..(o + 1) * alen * inner];
                    let dst_base = (o * cat_len + off) * inner;
                    od[dst_base..dst_base + alen * inner].copy_from_slice(src);
                }
                off += alen;
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(
            out,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            ng,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        assert!(start + len <= xs[axis], "slice out of range");
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut shape = xs.clone();
        shape[axis] = len;
        let mut out = Tensor::zeros(&shape);
        {
            let xv = self.values[x.0].data();
            let od = out.data_mut();
            for o in 0..outer {
                let src = (o * xs[axis] + start) * inner;
                od[o * len * inner..(o + 1) * len * inner]
                    .copy_from_slice(&xv[src..src + len * inner]);
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Slice { x, axis, start }, ng)
    }

    /// x (N, Din) * w^T (Din, Dout) + b -> (N, Dout); w stored (Dout, Din).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        assert_eq!(xs.len(), 2, "linear input must be 2-D");
        assert_eq!(ws.len(), 2, "linear weight must be 2-D");
        assert_eq!(xs[1], ws[1], "linear inner dim mismatch");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, dout]);
        S::gemm(
            n,
            din,
            dout,
            S::one(),
            self.values[x.0].data(),
            din as isize,
            1,
            self.values[w.0].data(),
            1,
            din as isize,
            S::zero(),
            out.data_mut(),
            dout as isize,
            1,
        );
        let ng = self.ng(x) || self.ng(w) || b.map(|bb| self.ng(bb)).unwrap_or(false);
        let y = self.push(out, Op::Linear { x, w }, ng);
        match b {
            Some(bias) => self.add_bias_last(y, bias),
            None => y,
        }
    }

    /// Apply a linear layer over the last dim of a 3-D tensor.
    pub fn linear3(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        assert_eq!(xs.len(), 3, "linear3 input must be 3-D");
        let flat = self.reshape(x, &[xs[0] * xs[1], xs[2]]);
        let y = self.linear(flat, w, b);
        let dout = self.values[w.0].shape()[0];
        self.reshape(y, &[xs[0], xs[1], dout])
    }

    /// Batched matmul: (G, M, K) x (G, K, N) -> (G, M, N).
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let asx = self.values[a.0].shape().to_vec();
        let bsx = self.values[b.0].shape().to_vec();
        assert_eq!(asx.len(), 3, "bmm lhs must be 3-D");
        assert_eq!(bsx.len(), 3, "bmm rhs must be 3-D");
        assert_eq!(asx[0], bsx[0], "bmm group dim mismatch");
        assert_eq!(asx[2], bsx[1], "bmm inner dim mismatch");
        let (g, m, k, n) = (asx[0], asx[1], asx[2], bsx[2]);
        let mut out = Tensor::zeros(&[g, m, n]);
        {
            let av = self.values[a.0].data();
            let bv = self.values[b.0].data();
            out.data_mut()
                .par_chunks_mut(m * n)
                .enumerate()
                .for_each(|(gi, co)| {
                    S::gemm(
                        m,
                        k,
                        n,
                        S::one(),
                        &av[gi * m * k..(gi + 1) * m * k],
                        k as isize,
                        1,
                        &bv[gi * k * n..(gi + 1) * k * n],
                        n as isize,
                        1,
                        S::zero(),
                        co,
                        n as isize,
                        1,
                    );
                });
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Bmm(a, b), ng)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let v = permute_tensor(&self.values[x.0], perm);
        let ng = self.ng(x);
        self.push(
            v,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.values[x.0].reshaped(shape);
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Broadcast a tensor along a new leading batch axis.
    pub fn broadcast0(&mut self, x: Var, batch: usize) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        let mut shape = vec![batch];
        shape.extend_from_slice(&xs);
        let unit = self.values[x.0].data();
        let mut data = Vec::with_capacity(unit.len() * batch);
        for _ in 0..batch {
            data.extend_from_slice(unit);
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, data), Op::Broadcast0(x), ng)
    }

    /// (B, T, D) -> (B, D), mean over the token axis.
    pub fn mean_axis1(&mut self, x: Var) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        assert_eq!(xs.len(), 3, "mean_axis1 expects 3-D");
        let (b, t, d) = (xs[0], xs[1], xs[2]);
        let tn = S::from_usize(t).unwrap();
        let mut out = Tensor::zeros(&[b, d]);
        {
            let xv = self.values[x.0].data();
            let od = out.data_mut();
            for bi in 0..b {
                for ti in 0..t {
                    let base = (bi * t + ti) * d;
                    for di in 0..d {
                        od[bi * d + di] = od[bi * d + di] + xv[base + di];
                    }
                }
                for di in 0..d {
                    od[bi * d + di] = od[bi * d + di] / tn;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MeanAxis1(x), ng)
    }

    /// Scale each batch element of x (B, ...) by s (B).
    pub fn scale_per_batch(&mut self, x: Var, s: Var) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        let b = xs[0];
        assert_eq!(self.values[s.0].len(), b, "scale_per_batch batch mismatch");
        let per = self.values[x.0].len() / b;
        let mut out = self.values[x.0].clone();
        {
            let sv = self.values[s.0].data().to_vec();
            let od = out.data_mut();
            for bi in 0..b {
                for i in 0..per {
                    od[bi * per + i] = od[bi * per + i] * sv[bi];
                }
            }
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(out, Op::ScalePerBatch { x, s }, ng)
    }

    /// (B, C, H, W) -> (B, T, patch*patch*C) with T = (H/p)*(W/p); feature
    /// order inside a token is (c, py, px).
    pub fn img_to_tokens(&mut self, x: Var, patch: usize) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        assert_eq!(xs.len(), 4, "img_to_tokens expects NCHW");
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(h % patch == 0 && w % patch == 0, "image side not divisible by patch");
        let (gh, gw) = (h / patch, w / patch);
        let t = gh * gw;
        let f = patch * patch * c;
        let mut out = Tensor::zeros(&[b, t, f]);
        {
            let xv = self.values[x.0].data();
            let od = out.data_mut();
            for bi in 0..b {
                for gy in 0..gh {
                    for gx in 0..gw {
                        let ti = gy * gw + gx;
                        for ci in 0..c {
                            for py in 0..patch {
                                for px in 0..patch {
                                    let src = ((bi * c + ci) * h + gy * patch + py) * w
                                        + gx * patch
                                        + px;
                                    let dst = (bi * t + ti) * f
                                        + (ci * patch + py) * patch
                                        + px;
                                    od[dst] = xv[src];
                                }
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::ImgToTokens { x, patch }, ng)
    }

    /// Mean cross-entropy of logits (N, C) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let ls = self.values[logits.0].shape().to_vec();
        assert_eq!(ls.len(), 2, "cross_entropy expects (N, C) logits");
        assert_eq!(ls[0], targets.len(), "cross_entropy target count mismatch");
        let sm = softmax_last(&self.values[logits.0]);
        let n = ls[0];
        let c = ls[1];
        let mut loss = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < c, "target class out of range");
            loss = loss - sm.data()[i * c + t].max(S::of_f64(1e-300)).ln();
        }
        loss = loss / S::from_usize(n).unwrap();
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                softmax: sm,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.values[loss.0].len(), 1, "backward target must be scalar");
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::from_vec(
            self.values[loss.0].shape(),
            vec![S::one()],
        ));
        for i in (0..self.ops.len()).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.dispatch_backward(i, &gout);
            // Keep the grad available for callers (params read it after).
            self.grads[i] = Some(gout);
        }
    }

    fn acc(&mut self, v: Var, delta: Tensor<S>) {
        if !self.needs_grad[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn dispatch_backward(&mut self, i: usize, gout: &Tensor<S>) {
        // Ops are moved out to appease the borrow checker, then restored.
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, gout.clone());
                self.acc(*b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.acc(*a, gout.clone());
                self.acc(*b, gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = gout.zip(&self.values[b.0], |g, bv| g * bv);
                let db = gout.zip(&self.values[a.0], |g, av| g * av);
                self.acc(*a, da);
                self.acc(*b, db);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(*a, gout.map(|g| g * c));
            }
            Op::AddConst(a, _) => {
                self.acc(*a, gout.clone());
            }
            Op::AddBiasChan(x, b) => {
                let xs = self.values[x.0].shape().to_vec();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut db = Tensor::zeros(&[c]);
                {
                    let gv = gout.data();
                    let dbd = db.data_mut();
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let mut s = S::zero();
                            for i in 0..hw {
                                s = s + gv[base + i];
                            }
                            dbd[ci] = dbd[ci] + s;
                        }
                    }
                }
                self.acc(*x, gout.clone());
                self.acc(*b, db);
            }
            Op::AddBiasLast(x, b) => {
                let d = self.values[b.0].len();
                let mut db = Tensor::zeros(&[d]);
                {
                    let gv = gout.data();
                    let dbd = db.data_mut();
                    for (i, &g) in gv.iter().enumerate() {
                        dbd[i % d] = dbd[i % d] + g;
                    }
                }
                self.acc(*x, gout.clone());
                self.acc(*b, db);
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = conv2d_backward(
                    &self.values[x.0],
                    &self.values[w.0],
                    gout,
                    *geom,
                    self.needs_grad[x.0],
                    self.needs_grad[w.0],
                );
                if let Some(dx) = dx {
                    self.acc(*x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(*w, dw);
                }
            }
            Op::ConvT2d { x, w, geom, .. } => {
                let (dx, dw) = convt2d_backward(
                    &self.values[x.0],
                    &self.values[w.0],
                    gout,
                    *geom,
                    self.needs_grad[x.0],
                    self.needs_grad[w.0],
                );
                if let Some(dx) = dx {
                    self.acc(*x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(*w, dw);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let xs = self.values[x.0].shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let cnt = S::from_usize(n * h * w).unwrap();
                let xv = self.values[x.0].data();
                let gv = self.values[gamma.0].data();
                let gov = gout.data();
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                let mut dx = Tensor::zeros(&xs);
                for ci in 0..c {
                    let (m, is, g) = (mean.data()[ci], inv_std.data()[ci], gv[ci]);
                    // Accumulate per-channel sums of dy and dy*xhat.
                    let mut sum_dy = S::zero();
                    let mut sum_dy_xhat = S::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for i in 0..h * w {
                            let dy = gov[base + i];
                            let xhat = (xv[base + i] - m) * is;
                            sum_dy = sum_dy + dy;
                            sum_dy_xhat = sum_dy_xhat + dy * xhat;
                        }
                    }
                    dgamma.data_mut()[ci] = sum_dy_xhat;
                    dbeta.data_mut()[ci] = sum_dy;
                    let dxd = dx.data_mut();
                    if *batch_stats {
                        for ni in 0..n {
                            let base = (ni * c + ci) * h * w;
                            for i in 0..h * w {
                                let dy = gov[base + i];
                                let xhat = (xv[base + i] - m) * is;
                                dxd[base + i] = g
                                    * is
                                    * (dy - sum_dy / cnt - xhat * sum_dy_xhat / cnt);
                            }
                        }
                    } else {
                        for ni in 0..n {
                            let base = (ni * c + ci) * h * w;
                            for i in 0..h * w {
                                dxd[base + i] = gov[base + i] * g * is;
                            }
                        }
                    }
                }
                self.acc(*x, dx);
                self.acc(*gamma, dgamma);
                self.acc(*beta, dbeta);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xs = self.values[x.0].shape().to_vec();
                let d = *xs.last().unwrap();
                let rows = self.values[x.0].len() / d;
                let dn = S::from_usize(d).unwrap();
                let xv = self.values[x.0].data();
                let gv = self.values[gamma.0].data();
                let gov = gout.data();
                let mut dgamma = Tensor::zeros(&[d]);
                let mut dbeta = Tensor::zeros(&[d]);
                let mut dx = Tensor::zeros(&xs);
                for r in 0..rows {
                    let (m, is) = (mean.data()[r], inv_std.data()[r]);
                    let mut sum_dyg = S::zero();
                    let mut sum_dyg_xhat = S::zero();
                    for i in 0..d {
                        let xhat = (xv[r * d + i] - m) * is;
                        let dyg = gov[r * d + i] * gv[i];
                        sum_dyg = sum_dyg + dyg;
                        sum_dyg_xhat = sum_dyg_xhat + dyg * xhat;
                        dgamma.data_mut()[i] = dgamma.data_mut()[i] + gov[r * d + i] * xhat;
                        dbeta.data_mut()[i] = dbeta.data_mut()[i] + gov[r * d + i];
                    }
                    let dxd = dx.data_mut();
                    for i in 0..d {
                        let xhat = (xv[r * d + i] - m) * is;
                        let dyg = gov[r * d + i] * gv[i];
                        dxd[r * d + i] = is * (dyg - sum_dyg / dn - xhat * sum_dyg_xhat / dn);
                    }
                }
                self.acc(*x, dx);
                self.acc(*gamma, dgamma);
                self.acc(*beta, dbeta);
            }
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                let dx = gout.zip(&self.values[x.0], |g, xv| {
                    if xv > S::zero() {
                        g
                    } else {
                        g * slope
                    }
                });
                self.acc(*x, dx);
            }
            Op::Tanh(x) => {
                let dx = gout.zip(&self.values[i], |g, y| g * (S::one() - y * y));
                self.acc(*x, dx);
            }
            Op::Gelu(x) => {
                let dx = gout.zip(&self.values[x.0], |g, xv| g * gelu_grad(xv));
                self.acc(*x, dx);
            }
            Op::Softmax(x) => {
                let y = &self.values[i];
                let d = *y.shape().last().unwrap();
                let rows = y.len() / d;
                let mut dx = Tensor::zeros(y.shape());
                {
                    let yv = y.data();
                    let gv = gout.data();
                    let dxd = dx.data_mut();
                    for r in 0..rows {
                        let mut dot = S::zero();
                        for i2 in 0..d {
                            dot = dot + gv[r * d + i2] * yv[r * d + i2];
                        }
                        for i2 in 0..d {
                            dxd[r * d + i2] = yv[r * d + i2] * (gv[r * d + i2] - dot);
                        }
                    }
                }
                self.acc(*x, dx);
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let dx = gout.zip(&self.values[x.0], |g, xv| {
                    if xv > lo && xv < hi {
                        g
                    } else {
                        S::zero()
                    }
                });
                self.acc(*x, dx);
            }
            Op::Abs(x) => {
                let dx = gout.zip(&self.values[x.0], |g, xv| {
                    if xv > S::zero() {
                        g
                    } else if xv < S::zero() {
                        -g
                    } else {
                        S::zero()
                    }
                });
                self.acc(*x, dx);
            }
            Op::Square(x) => {
                let two = S::of_f64(2.0);
                let dx = gout.zip(&self.values[x.0], |g, xv| g * two * xv);
                self.acc(*x, dx);
            }
            Op::MeanAll(x) => {
                let n = self.values[x.0].len();
                let g = gout.item() / S::from_usize(n).unwrap();
                self.acc(*x, Tensor::full(self.values[x.0].shape(), g));
            }
            Op::BilinearResize(x) => {
                let dx = bilinear_backward(gout, self.values[x.0].shape());
                self.acc(*x, dx);
            }
            Op::Concat { axis, parts } => {
                let shape = self.values[i].shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let cat_len = shape[*axis];
                let mut off = 0;
                for p in parts {
                    let ps = self.values[p.0].shape().to_vec();
                    let alen = ps[*axis];
                    let mut dp = Tensor::zeros(&ps);
                    {
                        let gv = gout.data();
                        let dpd = dp.data_mut();
                        for o in 0..outer {
                            let src = (o * cat_len + off) * inner;
                            dpd[o * alen * inner..(o + 1) * alen * inner]
                                .copy_from_slice(&gv[src..src + alen * inner]);
                        }
                    }
                    self.acc(*p, dp);
                    off += alen;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.values[x.0].shape().to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let len = self.values[i].shape()[*axis];
                let mut dx = Tensor::zeros(&xs);
                {
                    let gv = gout.data();
                    let dxd = dx.data_mut();
                    for o in 0..outer {
                        let dst = (o * xs[*axis] + start) * inner;
                        dxd[dst..dst + len * inner]
                            .copy_from_slice(&gv[o * len * inner..(o + 1) * len * inner]);
                    }
                }
                self.acc(*x, dx);
            }
            Op::Linear { x, w } => {
                let xs = self.values[x.0].shape().to_vec();
                let ws = self.values[w.0].shape().to_vec();
                let (n, din, dout) = (xs[0], xs[1], ws[0]);
                if self.needs_grad[x.0] {
                    // dx = gout (n, dout) * w (dout, din)
                    let mut dx = Tensor::zeros(&[n, din]);
                    S::gemm(
                        n,
                        dout,
                        din,
                        S::one(),
                        gout.data(),
                        dout as isize,
                        1,
                        self.values[w.0].data(),
                        din as isize,
                        1,
                        S::zero(),
                        dx.data_mut(),
                        din as isize,
                        1,
                    );
                    self.acc(*x, dx);
                }
                if self.needs_grad[w.0] {
                    // dw = gout^T (dout, n) * x (n, din)
                    let mut dw = Tensor::zeros(&[dout, din]);
                    S::gemm(
                        dout,
                        n,
                        din,
                        S::one(),
                        gout.data(),
                        1,
                        dout as isize,
                        self.values[x.0].data(),
                        din as isize,
                        1,
                        S::zero(),
                        dw.data_mut(),
                        din as isize,
                        1,
                    );
                    self.acc(*w, dw);
                }
            }
            Op::Bmm(a, b) => {
                let asx = self.values[a.0].shape().to_vec();
                let bsx = self.values[b.0].shape().to_vec();
                let (_, m, k, n) = (asx[0], asx[1], asx[2], bsx[2]);
                if self.needs_grad[a.0] {
                    let mut da = Tensor::zeros(&asx);
                    {
                        let gv = gout.data();
                        let bv = self.values[b.0].data();
                        da.data_mut()
                            .par_chunks_mut(m * k)
                            .enumerate()
                            .for_each(|(gi, dao)| {
                                // da = gout (m,n) * b^T (n,k)
                                S::gemm(
                                    m,
                                    n,
                                    k,
                                    S::one(),
                                    &gv[gi * m * n..(gi + 1) * m * n],
                                    n as isize,
                                    1,
                                    &bv[gi * k * n..(gi + 1) * k * n],
                                    1,
                                    n as isize,
                                    S::zero(),
                                    dao,
                                    k as isize,
                                    1,
                                );
                            });
                    }
                    self.acc(*a, da);
                }
                if self.needs_grad[b.0] {
                    let mut db = Tensor::zeros(&bsx);
                    {
                        let gv = gout.data();
                        let av = self.values[a.0].data();
                        db.data_mut()
                            .par_chunks_mut(k * n)
                            .enumerate()
                            .for_each(|(gi, dbo)| {
                                // db = a^T (k,m) * gout (m,n)
                                S::gemm(
                                    k,
                                    m,
                                    n,
                                    S::one(),
                                    &av[gi * m * k..(gi + 1) * m * k],
                                    1,
                                    k as isize,
                                    &gv[gi * m * n..(gi + 1) * m * n],
                                    n as isize,
                                    1,
                                    S::zero(),
                                    dbo,
                                    n as isize,
                                    1,
                                );
                            });
                    }
                    self.acc(*b, db);
                }
            }
            Op::Permute { x, perm } => {
                let inv = invert_perm(perm);
                let dx = permute_tensor(gout, &inv);
                self.acc(*x, dx);
            }
            Op::Reshape(x) => {
                let dx = gout.reshaped(self.values[x.0].shape());
                self.acc(*x, dx);
            }
            Op::Broadcast0(x) => {
                let xs = self.values[x.0].shape().to_vec();
                let unit: usize = xs.iter().product();
                let b = gout.len() / unit;
                let mut dx = Tensor::zeros(&xs);
                {
                    let gv = gout.data();
                    let dxd = dx.data_mut();
                    for bi in 0..b {
                        for j in 0..unit {
                            dxd[j] = dxd[j] + gv[bi * unit + j];
                        }
                    }
                }
                self.acc(*x, dx);
            }
            Op::MeanAxis1(x) => {
                let xs = self.values[x.0].shape().to_vec();
                let (b, t, d) = (xs[0], xs[1], xs[2]);
                let tn = S::from_usize(t).unwrap();
                let mut dx = Tensor::zeros(&xs);
                {
                    let gv = gout.data();
                    let dxd = dx.data_mut();
                    for bi in 0..b {
                        for ti in 0..t {
                            for di in 0..d {
                                dxd[(bi * t + ti) * d + di] = gv[bi * d + di] / tn;
                            }
                        }
                    }
                }
                self.acc(*x, dx);
            }
            Op::ScalePerBatch { x, s } => {
                let xs = self.values[x.0].shape().to_vec();
                let b = xs[0];
                let per = self.values[x.0].len() / b;
                if self.needs_grad[x.0] {
                    let mut dx = gout.clone();
                    let sv = self.values[s.0].data().to_vec();
                    let dxd = dx.data_mut();
                    for bi in 0..b {
                        for i2 in 0..per {
                            dxd[bi * per + i2] = dxd[bi * per + i2] * sv[bi];
                        }
                    }
                    self.acc(*x, dx);
                }
                if self.needs_grad[s.0] {
                    let mut ds = Tensor::zeros(&[b]);
                    let gv = gout.data();
                    let xv = self.values[x.0].data();
                    for bi in 0..b {
                        let mut acc = S::zero();
                        for i2 in 0..per {
                            acc = acc + gv[bi * per + i2] * xv[bi * per + i2];
                        }
                        ds.data_mut()[bi] = acc;
                    }
                    self.acc(*s, ds);
                }
            }
            Op::ImgToTokens { x, patch } => {
                let xs = self.values[x.0].shape().to_vec();
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let p = *patch;
                let (gh, gw) = (h / p, w / p);
                let t = gh * gw;
                let f = p * p * c;
                let mut dx = Tensor::zeros(&xs);
                {
                    let gv = gout.data();
                    let dxd = dx.data_mut();
                    for bi in 0..b {
                        for gy in 0..gh {
                            for gx in 0..gw {
                                let ti = gy * gw + gx;
                                for ci in 0..c {
                                    for py in 0..p {
                                        for px in 0..p {
                                            let dst = ((bi * c + ci) * h + gy * p + py) * w
                                                + gx * p
                                                + px;
                                            let src =
                                                (bi * t + ti) * f + (ci * p + py) * p + px;
                                            dxd[dst] = gv[src];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.acc(*x, dx);
            }
            Op::CrossEntropy {
                logits,
                softmax,
                targets,
            } => {
                let n = targets.len();
                let c = softmax.shape()[1];
                let scale = gout.item() / S::from_usize(n).unwrap();
                let mut dl = softmax.clone();
                {
                    let d = dl.data_mut();
                    for (i2, &t) in targets.iter().enumerate() {
                        d[i2 * c + t] = d[i2 * c + t] - S::one();
                    }
                    for v in d.iter_mut() {
                        *v = *v * scale;
                    }
                }
                self.acc(*logits, dl);
            }
        }
        self.ops[i] = op;
    }
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_tensor<S: Scalar>(x: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    let xs = x.shape();
    assert_eq!(perm.len(), xs.len(), "permutation rank mismatch");
    let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
    let rank = xs.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * xs[i + 1];
    }
    let mut out = Tensor::zeros(&out_shape);
    let total = x.len();
    {
        let xv = x.data();
        let od = out.data_mut();
        let mut idx = vec![0usize; rank];
        for (j, slot) in od.iter_mut().enumerate().take(total) {
            // idx is the multi-index in the OUTPUT tensor.
            let mut src = 0;
            for d in 0..rank {
                src += idx[d] * in_strides[perm[d]];
            }
            *slot = xv[src];
            let _ = j;
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
    out
}

fn softmax_last<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let d = *x.shape().last().expect("softmax on 0-d");
    let rows = x.len() / d;
    let mut out = x.clone();
    let od = out.data_mut();
    for r in 0..rows {
        let row = &mut od[r * d..(r + 1) * d];
        let mx = row.iter().copied().fold(S::neg_infinity(), |a, b| a.max(b));
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::of_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = S::of_f64(0.044715);
    let half = S::of_f64(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of_f64(0.797_884_560_802_865_4);
    let a = S::of_f64(0.044715);
    let half = S::of_f64(0.5);
    let three = S::of_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

/// Gather conv windows: x (C,H,W) -> cols (C*k*k, oh*ow).
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [S],
) {
    let n = oh * ow;
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = ((ci * k + kh) * k + kw) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    let dst = row + oy * ow;
                    if iy < 0 || iy >= h as isize {
                        for v in &mut cols[dst..dst + ow] {
                            *v = S::zero();
                        }
                        continue;
                    }
                    let src_row = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kw) as isize - pad as isize;
                        cols[dst + ox] = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            x[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter cols back into an image, accumulating.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [S],
) {
    let n = oh * ow;
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = ((ci * k + kh) * k + kw) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + iy as usize) * w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kw) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let di = dst_row + ix as usize;
                            x[di] = x[di] + cols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, g: ConvGeom) -> Tensor<S> {
    let kk = g.c_in * g.k * g.k;
    let n = g.h_out * g.w_out;
    let mut out = Tensor::zeros(&[g.batch, g.c_out, g.h_out, g.w_out]);
    let xv = x.data();
    let wv = w.data();
    out.data_mut()
        .par_chunks_mut(g.c_out * n)
        .enumerate()
        .for_each(|(b, ob)| {
            let mut cols = vec![S::zero(); kk * n];
            im2col(
                &xv[b * g.c_in * g.h_in * g.w_in..(b + 1) * g.c_in * g.h_in * g.w_in],
                g.c_in,
                g.h_in,
                g.w_in,
                g.k,
                g.stride,
                g.pad,
                g.h_out,
                g.w_out,
                &mut cols,
            );
            S::gemm(
                g.c_out,
                kk,
                n,
                S::one(),
                wv,
                kk as isize,
                1,
                &cols,
                n as isize,
                1,
                S::zero(),
                ob,
                n as isize,
                1,
            );
        });
    out
}

fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gout: &Tensor<S>,
    g: ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Tensor<S>>, Option<Tensor<S>>) {
    let kk = g.c_in * g.k * g.k;
    let n = g.h_out * g.w_out;
    let xv = x.data();
    let wv = w.data();
    let gv = gout.data();

    let per_item: Vec<(Option<Vec<S>>, Option<Vec<S>>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let gslice = &gv[b * g.c_out * n..(b + 1) * g.c_out * n];
            let mut dx_b = None;
            let mut dw_b = None;
            if want_dw {
                let mut cols = vec![S::zero(); kk * n];
                im2col(
                    &xv[b * g.c_in * g.h_in * g.w_in..(b + 1) * g.c_in * g.h_in * g.w_in],
                    g.c_in,
                    g.h_in,
                    g.w_in,
                    g.k,
                    g.stride,
                    g.pad,
                    g.h_out,
                    g.w_out,
                    &mut cols,
                );
                // dW = gout (Cout, n) * cols^T (n, kk)
                let mut dw = vec![S::zero(); g.c_out * kk];
                S::gemm(
                    g.c_out,
                    n,
                    kk,
                    S::one(),
                    gslice,
                    n as isize,
                    1,
                    &cols,
                    1,
                    n as isize,
                    S::zero(),
                    &mut dw,
                    kk as isize,
                    1,
                );
                dw_b = Some(dw);
            }
            if want_dx {
                // dcols = W^T (kk, Cout) * gout (Cout, n)
                let mut dcols = vec![S::zero(); kk * n];
                S::gemm(
                    kk,
                    g.c_out,
                    n,
                    S::one(),
                    wv,
                    1,
                    kk as isize,
                    gslice,
                    n as isize,
                    1,
                    S::zero(),
                    &mut dcols,
                    n as isize,
                    1,
                );
                let mut dx = vec![S::zero(); g.c_in * g.h_in * g.w_in];
                col2im(
                    &dcols, g.c_in, g.h_in, g.w_in, g.k, g.stride, g.pad, g.h_out, g.w_out,
                    &mut dx,
                );
                dx_b = Some(dx);
            }
            (dx_b, dw_b)
        })
        .collect();

    let dx = if want_dx {
        let mut dx = Tensor::zeros(x.shape());
        let item = g.c_in * g.h_in * g.w_in;
        for (b, (dx_b, _)) in per_item.iter().enumerate() {
            dx.data_mut()[b * item..(b + 1) * item].copy_from_slice(dx_b.as_ref().unwrap());
        }
        Some(dx)
    } else {
        None
    };
    let dw = if want_dw {
        let mut dw = Tensor::zeros(w.shape());
        for (_, dw_b) in per_item.iter() {
            for (a, &d) in dw.data_mut().iter_mut().zip(dw_b.as_ref().unwrap().iter()) {
                *a = *a + d;
            }
        }
        Some(dw)
    } else {
        None
    };
    (dx, dw)
}

fn convt2d_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, g: ConvGeom) -> Tensor<S> {
    // cols = W^T (Cout*k*k, Cin) * x (Cin, hi*wi); out = scatter(cols).
    let kk = g.c_out * g.k * g.k;
    let hw_in = g.h_in * g.w_in;
    let mut out = Tensor::zeros(&[g.batch, g.c_out, g.h_out, g.w_out]);
    let xv = x.data();
    let wv = w.data();
    out.data_mut()
        .par_chunks_mut(g.c_out * g.h_out * g.w_out)
        .enumerate()
        .for_each(|(b, ob)| {
            let mut cols = vec![S::zero(); kk * hw_in];
            S::gemm(
                kk,
                g.c_in,
                hw_in,
                S::one(),
                wv,
                1,
                kk as isize,
                &xv[b * g.c_in * hw_in..(b + 1) * g.c_in * hw_in],
                hw_in as isize,
                1,
                S::zero(),
                &mut cols,
                hw_in as isize,
                1,
            );
            col2im(
                &cols, g.c_out, g.h_out, g.w_out, g.k, g.stride, g.pad, g.h_in, g.w_in, ob,
            );
        });
    out
}

fn convt2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gout: &Tensor<S>,
    g: ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Tensor<S>>, Option<Tensor<S>>) {
    let kk = g.c_out * g.k * g.k;
    let hw_in = g.h_in * g.w_in;
    let out_hw = g.h_out * g.w_out;
    let xv = x.data();
    let wv = w.data();
    let gv = gout.data();

    let per_item: Vec<(Option<Vec<S>>, Option<Vec<S>>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            // dcols = gather(gout) with the same window geometry.
            let mut dcols = vec![S::zero(); kk * hw_in];
            im2col(
                &gv[b * g.c_out * out_hw..(b + 1) * g.c_out * out_hw],
                g.c_out,
                g.h_out,
                g.w_out,
                g.k,
                g.stride,
                g.pad,
                g.h_in,
                g.w_in,
                &mut dcols,
            );
            let mut dx_b = None;
            let mut dw_b = None;
            if want_dx {
                // dx = W (Cin, kk) * dcols (kk, hw_in)
                let mut dx = vec![S::zero(); g.c_in * hw_in];
                S::gemm(
                    g.c_in,
                    kk,
                    hw_in,
                    S::one(),
                    wv,
                    kk as isize,
                    1,
                    &dcols,
                    hw_in as isize,
                    1,
                    S::zero(),
                    &mut dx,
                    hw_in as isize,
                    1,
                );
                dx_b = Some(dx);
            }
            if want_dw {
                // dW = x (Cin, hw_in) * dcols^T (hw_in, kk)
                let mut dw = vec![S::zero(); g.c_in * kk];
                S::gemm(
                    g.c_in,
                    hw_in,
                    kk,
                    S::one(),
                    &xv[b * g.c_in * hw_in..(b + 1) * g.c_in * hw_in],
                    hw_in as isize,
                    1,
                    &dcols,
                    1,
                    hw_in as isize,
                    S::zero(),
                    &mut dw,
                    kk as isize,
                    1,
                );
                dw_b = Some(dw);
            }
            (dx_b, dw_b)
        })
        .collect();

    let dx = if want_dx {
        let mut dx = Tensor::zeros(x.shape());
        for (b, (dx_b, _)) in per_item.iter().enumerate() {
            dx.data_mut()[b * g.c_in * hw_in..(b + 1) * g.c_in * hw_in]
                .copy_from_slice(dx_b.as_ref().unwrap());
        }
        Some(dx)
    } else {
        None
    };
    let dw = if want_dw {
        let mut dw = Tensor::zeros(w.shape());
        for (_, dw_b) in per_item.iter() {
            for (a, &d) in dw.data_mut().iter_mut().zip(dw_b.as_ref().unwrap().iter()) {
                *a = *a + d;
            }
        }
        Some(dw)
    } else {
        None
    };
    (dx, dw)
}

/// Per-axis bilinear taps with half-pixel centers.
pub(crate) fn lerp_taps(in_size: usize, out_size: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let src = src.clamp(0.0, (in_size - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_size - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn bilinear_forward<S: Scalar>(x: &Tensor<S>, h_out: usize, w_out: usize) -> Tensor<S> {
    let xs = x.shape();
    assert_eq!(xs.len(), 4, "bilinear_resize expects NCHW");
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let ty = lerp_taps(h, h_out);
    let tx = lerp_taps(w, w_out);
    let mut out = Tensor::zeros(&[b, c, h_out, w_out]);
    let xv = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let src = (bi * c + ci) * h * w;
            let dst = (bi * c + ci) * h_out * w_out;
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                let wy = S::of_f64(wy);
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let wx = S::of_f64(wx);
                    let one = S::one();
                    let v = (one - wy) * (one - wx) * xv[src + y0 * w + x0]
                        + (one - wy) * wx * xv[src + y0 * w + x1]
                        + wy * (one - wx) * xv[src + y1 * w + x0]
                        + wy * wx * xv[src + y1 * w + x1];
                    od[dst + oy * w_out + ox] = v;
                }
            }
        }
    }
    out
}

fn bilinear_backward<S: Scalar>(gout: &Tensor<S>, in_shape: &[usize]) -> Tensor<S> {
    let gs = gout.shape();
    let (b, c, h_out, w_out) = (gs[0], gs[1], gs[2], gs[3]);
    let (h, w) = (in_shape[2], in_shape[3]);
    let ty = lerp_taps(h, h_out);
    let tx = lerp_taps(w, w_out);
    let mut dx = Tensor::zeros(in_shape);
    let gv = gout.data();
    let dxd = dx.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let src = (bi * c + ci) * h_out * w_out;
            let dst = (bi * c + ci) * h * w;
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                let wy = S::of_f64(wy);
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let wx = S::of_f64(wx);
                    let g = gv[src + oy * w_out + ox];
                    let one = S::one();
                    dxd[dst + y0 * w + x0] = dxd[dst + y0 * w + x0] + (one - wy) * (one - wx) * g;
                    dxd[dst + y0 * w + x1] = dxd[dst + y0 * w + x1] + (one - wy) * wx * g;
                    dxd[dst + y1 * w + x0] = dxd[dst + y1 * w + x0] + wy * (one - wx) * g;
                    dxd[dst + y1 * w + x1] = dxd[dst + y1 * w + x1] + wy * wx * g;
                }
            }
        }
    }
    dx
}
