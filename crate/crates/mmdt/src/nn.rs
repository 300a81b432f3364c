//! Layers, parameter traversal, and the Adam optimizer.
//!
//! Networks are plain structs of layers. Every tensor a network owns is
//! reachable through [`TensorTree::visit`], which gives one traversal order
//! used for checkpoints, optimizer updates, freeze checks, and perturbation
//! in gradient tests.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Whether a tensor receives gradient updates or is a statistics buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

pub trait TensorVisitor<S: Scalar> {
    fn visit(&mut self, name: &str, kind: ParamKind, t: &mut Tensor<S>);
}

/// Anything whose tensors can be walked by name.
pub trait TensorTree<S: Scalar> {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor<S>);
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Clone out all tensors as (name, tensor) pairs in traversal order.
pub fn collect_tensors<S: Scalar>(tree: &mut dyn TensorTree<S>) -> Vec<(String, Tensor<S>)> {
    struct C<S>(Vec<(String, Tensor<S>)>);
    impl<S: Scalar> TensorVisitor<S> for C<S> {
        fn visit(&mut self, name: &str, _k: ParamKind, t: &mut Tensor<S>) {
            self.0.push((name.to_string(), t.clone()));
        }
    }
    let mut c = C(Vec::new());
    tree.visit("", &mut c);
    c.0
}

/// Overwrite tensors from a name -> tensor map. Returns names that were
/// missing from the map; shape mismatches panic (checkpoints are trusted
/// here — untrusted archives are validated at parse time).
pub fn load_tensors<S: Scalar>(
    tree: &mut dyn TensorTree<S>,
    map: &HashMap<String, Tensor<S>>,
) -> Vec<String> {
    struct L<'a, S: Scalar> {
        map: &'a HashMap<String, Tensor<S>>,
        missing: Vec<String>,
    }
    impl<S: Scalar> TensorVisitor<S> for L<'_, S> {
        fn visit(&mut self, name: &str, _k: ParamKind, t: &mut Tensor<S>) {
            match self.map.get(name) {
                Some(src) => {
                    assert_eq!(
                        src.shape(),
                        t.shape(),
                        "checkpoint tensor {name} has shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    );
                    *t = src.clone();
                }
                None => self.missing.push(name.to_string()),
            }
        }
    }
    let mut l = L {
        map,
        missing: Vec::new(),
    };
    tree.visit("", &mut l);
    l.missing
}

/// True when two trees hold bit-identical tensors in the same order.
pub fn trees_bit_equal<S: Scalar>(
    a: &mut dyn TensorTree<S>,
    b: &mut dyn TensorTree<S>,
) -> bool {
    let ta = collect_tensors(a);
    let tb = collect_tensors(b);
    ta.len() == tb.len()
        && ta
            .iter()
            .zip(tb.iter())
            .all(|((na, va), (nb, vb))| na == nb && va.bits_eq(vb))
}

/// Records which graph leaves correspond to which trainable parameters.
pub struct Binder {
    entries: Vec<(String, Var)>,
    frozen: bool,
}

impl Binder {
    /// Parameters become differentiable leaves and are recorded.
    pub fn trainable() -> Self {
        Binder {
            entries: Vec::new(),
            frozen: false,
        }
    }

    /// Parameters enter the graph as constants (inference / frozen copy).
    pub fn frozen() -> Self {
        Binder {
            entries: Vec::new(),
            frozen: true,
        }
    }

    pub fn leaf<S: Scalar>(&mut self, g: &mut Graph<S>, name: String, t: &Tensor<S>) -> Var {
        if self.frozen {
            g.input(t.clone())
        } else {
            let v = g.leaf(t.clone());
            self.entries.push((name, v));
            v
        }
    }

    /// Pull accumulated gradients out of a graph after `backward`.
    pub fn grads<S: Scalar>(&self, g: &Graph<S>) -> HashMap<String, Tensor<S>> {
        let mut out = HashMap::new();
        for (name, var) in &self.entries {
            if let Some(grad) = g.grad(*var) {
                out.entry(name.clone())
                    .and_modify(|t: &mut Tensor<S>| t.add_assign(grad))
                    .or_insert_with(|| grad.clone());
            }
        }
        out
    }
}

/// Adam with decoupled weight decay.
pub struct Adam<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub weight_decay: S,
    t: u64,
    state: HashMap<String, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr: S::of_f64(lr),
            beta1: S::of_f64(0.9),
            beta2: S::of_f64(0.999),
            eps: S::of_f64(1e-8),
            weight_decay: S::of_f64(weight_decay),
            t: 0,
            state: HashMap::new(),
        }
    }

    /// Apply one step to every trainable tensor that has a gradient.
    pub fn step(&mut self, tree: &mut dyn TensorTree<S>, grads: &HashMap<String, Tensor<S>>) {
        self.t += 1;
        struct A<'a, S: Scalar> {
            opt: &'a mut Adam<S>,
            grads: &'a HashMap<String, Tensor<S>>,
        }
        impl<S: Scalar> TensorVisitor<S> for A<'_, S> {
            fn visit(&mut self, name: &str, kind: ParamKind, t: &mut Tensor<S>) {
                if kind != ParamKind::Trainable {
                    return;
                }
                let Some(g) = self.grads.get(name) else {
                    return;
                };
                self.opt.update_one(name, t, g);
            }
        }
        let mut a = A { opt: self, grads };
        tree.visit("", &mut a);
    }

    fn update_one(&mut self, name: &str, p: &mut Tensor<S>, g: &Tensor<S>) {
        let (m, v) = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
        let one = S::one();
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = one - b1.powi(self.t as i32);
        let bc2 = one - b2.powi(self.t as i32);
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        let gd = g.data();
        for i in 0..pd.len() {
            md[i] = b1 * md[i] + (one - b1) * gd[i];
            vd[i] = b2 * vd[i] + (one - b2) * gd[i] * gd[i];
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] = pd[i]
                - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pd[i]);
        }
    }
}

fn uniform_init<S: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

#[derive(Clone)]
pub struct Conv2d<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = c_in * k * k;
        Conv2d {
            w: uniform_init(&[c_out, c_in, k, k], fan_in, rng),
            b: uniform_init(&[c_out], fan_in, rng),
            stride,
            pad,
        }
    }

    /// All-zero weights (used for heads that must start silent in tests).
    pub fn zero_out(&mut self) {
        self.w = Tensor::zeros(self.w.shape());
        self.b = Tensor::zeros(self.b.shape());
    }

    pub fn fwd(&self, g: &mut Graph<S>, bind: &mut Binder, prefix: &str, x: Var) -> Var {
        let w = bind.leaf(g, join(prefix, "w"), &self.w);
        let b = bind.leaf(g, join(prefix, "b"), &self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

impl<S: Scalar> TensorTree<S> for Conv2d<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor<S>) {
        v.visit(&join(prefix, "w"), ParamKind::Trainable, &mut self.w);
        v.visit(&join(prefix, "b"), ParamKind::Trainable, &mut self.b);
    }
}

#[derive(Clone)]
pub struct ConvT2d<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl<S: Scalar> ConvT2d<S> {
    /// Stride-2 3x3 upsampling layer (doubles the spatial side).
    pub fn upsample2<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let fan_in = c_in * 9;
        ConvT2d {
            w: uniform_init(&[c_in, c_out, 3, 3], fan_in, rng),
            b: uniform_init(&[c_out], fan_in, rng),
            stride: 2,
            pad: 1,
            out_pad: 1,
        }
    }

    pub fn fwd(&self, g: &mut Graph<S>, bind: &mut Binder, prefix: &str, x: Var) -> Var {
        let w = bind.leaf(g, join(prefix, "w"), &self.w);
        let b = bind.leaf(g, join(prefix, "b"), &self.b);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.pad, self.out_pad)
    }
}

impl<S: Scalar> TensorTree<S> for ConvT2d<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor<S>) {
        v.visit(&join(prefix, "w"), ParamKind::Trainable, &mut self.w);
        v.visit(&join(prefix, "b"), ParamKind::Trainable, &mut self.b);
    }
}

#[derive(Clone)]
pub struct BatchNorm2d<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: RefCell<Tensor<S>>,
    pub running_var: RefCell<Tensor<S>>,
    pub eps: S,
    pub momentum: S,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(&[channels], S::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: RefCell::new(Tensor::zeros(&[channels])),
            running_var: RefCell::new(Tensor::full(&[channels], S::one())),
            eps: S::of_f64(1e-5),
            momentum: S::of_f64(0.1),
        }
    }

    pub fn fwd(&self, g: &mut Graph<S>, bind: &mut Binder, prefix: &str, x: Var) -> Var {
        let gamma = bind.leaf(g, join(prefix, "gamma"), &self.gamma);
        let beta = bind.leaf(g, join(prefix, "beta"), &self.beta);
        g.batch_norm(
            x,
            gamma,
            beta,
            &self.running_mean,
            &self.running_var,
            self.eps,
            self.momentum,
        )
    }
}

impl<S: Scalar> TensorTree<S> for BatchNorm2d<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor<S>) {
        v.visit(&join(prefix, "gamma"), ParamKind::Trainable, &mut self.gamma);
        v.visit(&join(prefix, "beta"), ParamKind::Trainable, &mut self.beta);
        v.visit(
            &join(prefix, "running_mean"),
            ParamKind::Buffer,
            self.running_mean.get_mut(),
        );
        v.visit(
            &join(prefix, "running_var"),
            ParamKind::Buffer,
            self.running_var.get_mut(),
        );
    }
}

#[derive(Clone)]
pub struct Linear<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear {
            w: uniform_init(&[d_out, d_in], d_in, rng),
            b: uniform_init(&[d_out], d_in, rng),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[d_out, d_in]),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn fwd(&self, g: &mut Graph<S>, bind: &mut Binder, prefix: &str, x: Var) -> Var {
        let w = bind.leaf(g, join(prefix, "w"), &self.w);
        let b = bind.leaf(g, join(prefix, "b"), &self.b);
        g.linear(x, w, Some(b))
    }

    /// Apply over the last dim of a 3-D tensor.
    pub fn fwd3(&self, g: &mut Graph<S>, bind: &mut Binder, prefix: &str, x: Var) -> Var {
        let w = bind.leaf(g, join(prefix, "w"), &self.w);
        let b = bind.leaf(g, join(prefix, "b"), &self.b);
        g.linear3(x, w, Some(b))
    }
}

impl<S: Scalar> TensorTree<S> for Linear<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor<S>) {
        v.visit(&join(prefix, "w"), ParamKind::Trainable, &mut self.w);
        v.visit(&join(prefix, "b"), ParamKind::Trainable, &mut self.b);
    }
}

#[derive(Clone)]
pub struct LayerNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub eps: S,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(&[dim], S::one()),
            beta: Tensor::zeros(&[dim]),
            eps: S::of_f64(1e-6),
        }
    }

    pub fn fwd(&self, g: &mut Graph<S>, bind: &mut Binder, prefix: &str, x: Var) -> Var {
        let gamma = bind.leaf(g, join(prefix, "gamma"), &self.gamma);
        let beta = bind.leaf(g, join(prefix, "beta"), &self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

impl<S: Scalar> TensorTree<S> for LayerNorm<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor<S>) {
        v.visit(&join(prefix, "gamma"), ParamKind::Trainable, &mut self.gamma);
        v.visit(&join(prefix, "beta"), ParamKind::Trainable, &mut self.beta);
    }
}

/// Conv + BatchNorm + LeakyReLU(0.2), the workhorse block of the conv nets.
#[derive(Clone)]
pub struct ConvBnLrelu<S: Scalar> {
    pub conv: Conv2d<S>,
    pub bn: BatchNorm2d<S>,
}

impl<S: Scalar> ConvBnLrelu<S> {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        ConvBnLrelu {
            conv: Conv2d::new(c_in, c_out, 3, stride, 1, rng),
            bn: BatchNorm2d::new(c_out),
        }
    }

    pub fn fwd(&self, g: &mut Graph<S>, bind: &mut Binder, prefix: &str, x: Var) -> Var {
        let y = self.conv.fwd(g, bind, &join(prefix, "conv"), x);
        let y = self.bn.fwd(g, bind, &join(prefix, "bn"), y);
        g.leaky_relu(y, S::of_f64(0.2))
    }
}

impl<S: Scalar> TensorTree<S> for ConvBnLrelu<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor<S>) {
        self.conv.visit(&join(prefix, "conv"), v);
        self.bn.visit(&join(prefix, "bn"), v);
    }
}
