//! Trace retargeting network: two conv encoders (content image and source
//! trace), channel-concat fusion, residual blocks, and a transpose-conv
//! decoder emitting a trace adapted to the new content.

use rand::Rng;

use crate::data::Image;
use crate::disentangler::{resize_up, ForensicTrace};
use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, Var};
use crate::nn::{join, Binder, BatchNorm2d, Conv2d, ConvBnLrelu, ConvT2d, TensorTree, TensorVisitor};
use crate::tensor::{Scalar, Tensor};

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    /// First-stage width; the encoder ladder is (b, 2b, 4b, 8b).
    pub base_channels: usize,
    pub res_blocks: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            base_channels: 32,
            res_blocks: 4,
        }
    }
}

#[derive(Clone)]
struct Encoder<S: Scalar> {
    c11: ConvBnLrelu<S>,
    c12: ConvBnLrelu<S>,
    pool1: Conv2d<S>,
    c21: ConvBnLrelu<S>,
    c22: ConvBnLrelu<S>,
    pool2: Conv2d<S>,
    c31: ConvBnLrelu<S>,
    c32: ConvBnLrelu<S>,
    pool3: Conv2d<S>,
    c41: ConvBnLrelu<S>,
    c42: ConvBnLrelu<S>,
}

impl<S: Scalar> Encoder<S> {
    fn new<R: Rng>(b: usize, rng: &mut R) -> Self {
        Encoder {
            c11: ConvBnLrelu::new(3, b, 1, rng),
            c12: ConvBnLrelu::new(b, b, 1, rng),
            pool1: Conv2d::new(b, 2 * b, 3, 2, 1, rng),
            c21: ConvBnLrelu::new(2 * b, 2 * b, 1, rng),
            c22: ConvBnLrelu::new(2 * b, 2 * b, 1, rng),
            pool2: Conv2d::new(2 * b, 4 * b, 3, 2, 1, rng),
            c31: ConvBnLrelu::new(4 * b, 4 * b, 1, rng),
            c32: ConvBnLrelu::new(4 * b, 4 * b, 1, rng),
            pool3: Conv2d::new(4 * b, 8 * b, 3, 2, 1, rng),
            c41: ConvBnLrelu::new(8 * b, 8 * b, 1, rng),
            c42: ConvBnLrelu::new(8 * b, 8 * b, 1, rng),
        }
    }

    fn fwd(&self, g: &mut Graph<S>, bind: &mut Binder, p: &str, x: Var) -> Var {
        let slope = S::of_f64(SLOPE);
        let y = self.c11.fwd(g, bind, &join(p, "c11"), x);
        let y = self.c12.fwd(g, bind, &join(p, "c12"), y);
        let y = self.pool1.fwd(g, bind, &join(p, "pool1"), y);
        let y = g.leaky_relu(y, slope);
        let y = self.c21.fwd(g, bind, &join(p, "c21"), y);
        let y = self.c22.fwd(g, bind, &join(p, "c22"), y);
        let y = self.pool2.fwd(g, bind, &join(p, "pool2"), y);
        let y = g.leaky_relu(y, slope);
        let y = self.c31.fwd(g, bind, &join(p, "c31"), y);
        let y = self.c32.fwd(g, bind, &join(p, "c32"), y);
        let y = self.pool3.fwd(g, bind, &join(p, "pool3"), y);
        let y = g.leaky_relu(y, slope);
        let y = self.c41.fwd(g, bind, &join(p, "c41"), y);
        self.c42.fwd(g, bind, &join(p, "c42"), y)
    }
}

impl<S: Scalar> TensorTree<S> for Encoder<S> {
    fn visit(&mut self, p: &str, v: &mut dyn TensorVisitor<S>) {
        self.c11.visit(&join(p, "c11"), v);
        self.c12.visit(&join(p, "c12"), v);
        self.pool1.visit(&join(p, "pool1"), v);
        self.c21.visit(&join(p, "c21"), v);
        self.c22.visit(&join(p, "c22"), v);
        self.pool2.visit(&join(p, "pool2"), v);
        self.c31.visit(&join(p, "c31"), v);
        self.c32.visit(&join(p, "c32"), v);
        self.pool3.visit(&join(p, "pool3"), v);
        self.c41.visit(&join(p, "c41"), v);
        self.c42.visit(&join(p, "c42"), v);
    }
}

#[derive(Clone)]
struct ResBlock<S: Scalar> {
    a: ConvBnLrelu<S>,
    b_conv: Conv2d<S>,
    b_norm: BatchNorm2d<S>,
}

impl<S: Scalar> ResBlock<S> {
    fn new<R: Rng>(ch: usize, rng: &mut R) -> Self {
        ResBlock {
            a: ConvBnLrelu::new(ch, ch, 1, rng),
            b_conv: Conv2d::new(ch, ch, 3, 1, 1, rng),
            b_norm: BatchNorm2d::new(ch),
        }
    }

    fn fwd(&self, g: &mut Graph<S>, bind: &mut Binder, p: &str, x: Var) -> Var {
        let y = self.a.fwd(g, bind, &join(p, "a"), x);
        let y = self.b_conv.fwd(g, bind, &join(p, "b_conv"), y);
        let y = self.b_norm.fwd(g, bind, &join(p, "b_norm"), y);
        let y = g.add(x, y);
        g.leaky_relu(y, S::of_f64(SLOPE))
    }
}

impl<S: Scalar> TensorTree<S> for ResBlock<S> {
    fn visit(&mut self, p: &str, v: &mut dyn TensorVisitor<S>) {
        self.a.visit(&join(p, "a"), v);
        self.b_conv.visit(&join(p, "b_conv"), v);
        self.b_norm.visit(&join(p, "b_norm"), v);
    }
}

#[derive(Clone)]
struct Decoder<S: Scalar> {
    c11: ConvBnLrelu<S>,
    c12: ConvBnLrelu<S>,
    up1: ConvT2d<S>,
    c21: ConvBnLrelu<S>,
    c22: ConvBnLrelu<S>,
    up2: ConvT2d<S>,
    c31: ConvBnLrelu<S>,
    c32: ConvBnLrelu<S>,
    up3: ConvT2d<S>,
    c41: ConvBnLrelu<S>,
    c42: ConvBnLrelu<S>,
}

impl<S: Scalar> Decoder<S> {
    fn new<R: Rng>(b: usize, rng: &mut R) -> Self {
        Decoder {
            c11: ConvBnLrelu::new(8 * b, 8 * b, 1, rng),
            c12: ConvBnLrelu::new(8 * b, 8 * b, 1, rng),
            up1: ConvT2d::upsample2(8 * b, 4 * b, rng),
            c21: ConvBnLrelu::new(4 * b, 4 * b, 1, rng),
            c22: ConvBnLrelu::new(4 * b, 4 * b, 1, rng),
            up2: ConvT2d::upsample2(4 * b, 2 * b, rng),
            c31: ConvBnLrelu::new(2 * b, 2 * b, 1, rng),
            c32: ConvBnLrelu::new(2 * b, 2 * b, 1, rng),
            up3: ConvT2d::upsample2(2 * b, b, rng),
            c41: ConvBnLrelu::new(b, b, 1, rng),
            c42: ConvBnLrelu::new(b, b, 1, rng),
        }
    }

    fn fwd(&self, g: &mut Graph<S>, bind: &mut Binder, p: &str, x: Var) -> Var {
        let slope = S::of_f64(SLOPE);
        let y = self.c11.fwd(g, bind, &join(p, "c11"), x);
        let y = self.c12.fwd(g, bind, &join(p, "c12"), y);
        let y = self.up1.fwd(g, bind, &join(p, "up1"), y);
        let y = g.leaky_relu(y, slope);
        let y = self.c21.fwd(g, bind, &join(p, "c21"), y);
        let y = self.c22.fwd(g, bind, &join(p, "c22"), y);
        let y = self.up2.fwd(g, bind, &join(p, "up2"), y);
        let y = g.leaky_relu(y, slope);
        let y = self.c31.fwd(g, bind, &join(p, "c31"), y);
        let y = self.c32.fwd(g, bind, &join(p, "c32"), y);
        let y = self.up3.fwd(g, bind, &join(p, "up3"), y);
        let y = g.leaky_relu(y, slope);
        let y = self.c41.fwd(g, bind, &join(p, "c41"), y);
        self.c42.fwd(g, bind, &join(p, "c42"), y)
    }
}

impl<S: Scalar> TensorTree<S> for Decoder<S> {
    fn visit(&mut self, p: &str, v: &mut dyn TensorVisitor<S>) {
        self.c11.visit(&join(p, "c11"), v);
        self.c12.visit(&join(p, "c12"), v);
        self.up1.visit(&join(p, "up1"), v);
        self.c21.visit(&join(p, "c21"), v);
        self.c22.visit(&join(p, "c22"), v);
        self.up2.visit(&join(p, "up2"), v);
        self.c31.visit(&join(p, "c31"), v);
        self.c32.visit(&join(p, "c32"), v);
        self.up3.visit(&join(p, "up3"), v);
        self.c41.visit(&join(p, "c41"), v);
        self.c42.visit(&join(p, "c42"), v);
    }
}

/// The full retargeting network. Separate weights for the image and trace
/// encoders; fusion is channel concat plus a 1x1 projection.
#[derive(Clone)]
pub struct Synthesizer<S: Scalar> {
    pub cfg: SynthConfig,
    image_enc: Encoder<S>,
    trace_enc: Encoder<S>,
    fuse: Conv2d<S>,
    res: Vec<ResBlock<S>>,
    dec: Decoder<S>,
    pub head: Conv2d<S>,
}

impl<S: Scalar> Synthesizer<S> {
    pub fn new<R: Rng>(cfg: SynthConfig, rng: &mut R) -> Self {
        let b = cfg.base_channels;
        Synthesizer {
            cfg,
            image_enc: Encoder::new(b, rng),
            trace_enc: Encoder::new(b, rng),
            fuse: Conv2d::new(16 * b, 8 * b, 1, 1, 0, rng),
            res: (0..cfg.res_blocks).map(|_| ResBlock::new(8 * b, rng)).collect(),
            dec: Decoder::new(b, rng),
            head: Conv2d::new(b, 3, 3, 1, 1, rng),
        }
    }

    /// Graph forward: content batch and trace batch (B, 3, n, n) -> trace
    /// batch (B, 3, n, n) in [-1, 1].
    pub fn fwd(&self, g: &mut Graph<S>, bind: &mut Binder, prefix: &str, content: Var, trace: Var) -> Var {
        let f_img = self.image_enc.fwd(g, bind, &join(prefix, "image_enc"), content);
        let f_trc = self.trace_enc.fwd(g, bind, &join(prefix, "trace_enc"), trace);
        let fused = g.concat(1, &[f_img, f_trc]);
        let y = self.fuse.fwd(g, bind, &join(prefix, "fuse"), fused);
        let mut y = g.leaky_relu(y, S::of_f64(SLOPE));
        for (i, block) in self.res.iter().enumerate() {
            y = block.fwd(g, bind, &join(prefix, &format!("res{i}")), y);
        }
        let y = self.dec.fwd(g, bind, &join(prefix, "dec"), y);
        let y = self.head.fwd(g, bind, &join(prefix, "head"), y);
        g.tanh(y)
    }

    /// Inference: retarget a source trace to new content. Both inputs must
    /// share a spatial side divisible by 8.
    pub fn synthesize_trace(&self, content: &Image, trace_full: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (h, w) = (content.height(), content.width());
        let ts = trace_full.shape().to_vec();
        if ts != vec![3, h, w] {
            return Err(Error::Shape(format!(
                "trace shape {ts:?} does not match content {h}x{w}"
            )));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!("input side {h}x{w} not divisible by 8")));
        }
        let mut g = Graph::<S>::new(BnMode::Running);
        let mut bind = Binder::frozen();
        let c = g.input(content.to_chw().cast());
        let t = g.input(trace_full.reshaped(&[1, 3, h, w]).cast());
        let out = self.fwd(&mut g, &mut bind, "", c, t);
        Ok(g.value(out).cast::<f32>().reshape(&[3, h, w]))
    }

    /// Spatial side of the encoder feature grid for a given input side.
    pub fn feature_shape(&self, input_side: usize) -> (usize, usize, usize) {
        (input_side / 8, input_side / 8, 8 * self.cfg.base_channels)
    }
}

impl<S: Scalar> TensorTree<S> for Synthesizer<S> {
    fn visit(&mut self, p: &str, v: &mut dyn TensorVisitor<S>) {
        self.image_enc.visit(&join(p, "image_enc"), v);
        self.trace_enc.visit(&join(p, "trace_enc"), v);
        self.fuse.visit(&join(p, "fuse"), v);
        for (i, r) in self.res.iter_mut().enumerate() {
            r.visit(&join(p, &format!("res{i}")), v);
        }
        self.dec.visit(&join(p, "dec"), v);
        self.head.visit(&join(p, "head"), v);
    }
}

/// Additive recaptured reconstruction: clamp(I_G + G_hat, 0, 1).
pub fn reconstruct_recaptured(content: &Image, g_hat: &Tensor<f32>) -> Result<Image> {
    let (h, w) = (content.height(), content.width());
    if g_hat.shape() != [3, h, w] {
        return Err(Error::Shape(format!(
            "trace shape {:?} does not match content {h}x{w}",
            g_hat.shape()
        )));
    }
    let chw = content.to_chw().reshape(&[3, h, w]);
    let out = chw.zip(g_hat, |i, g| (i + g).clamp(0.0, 1.0));
    Ok(Image::from_chw(&out))
}

/// Assemble resize_up(C)*[use_c] + T*[use_t]; at least one flag must be set.
pub fn compose_partial_trace(
    trace: &ForensicTrace,
    use_c: bool,
    use_t: bool,
) -> Result<Tensor<f32>> {
    if !use_c && !use_t {
        return Err(Error::Param(
            "compose_partial_trace needs at least one of use_c/use_t".into(),
        ));
    }
    let n = trace.full_side();
    let mut out = Tensor::zeros(&[3, n, n]);
    if use_c {
        out.add_assign(&resize_up(&trace.c, n, n));
    }
    if use_t {
        out.add_assign(&trace.t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small(b: usize) -> Synthesizer<f32> {
        Synthesizer::new(
            SynthConfig {
                base_channels: b,
                res_blocks: 2,
            },
            &mut rng(1),
        )
    }

    #[test]
    fn encoder_features_at_standard_side() {
        // Full-width encoders map a 224 input to a 28x28x256 feature grid.
        let net: Synthesizer<f32> = Synthesizer::new(SynthConfig::default(), &mut rng(0));
        assert_eq!(net.feature_shape(224), (28, 28, 256));
        let mut g = Graph::new(BnMode::Running);
        let mut bind = Binder::frozen();
        let mut r = rng(2);
        let x = g.input(Tensor::rand_uniform(&[1, 3, 224, 224], 0.0, 1.0, &mut r));
        let f = net.image_enc.fwd(&mut g, &mut bind, "e", x);
        assert_eq!(g.shape(f), &[1, 256, 28, 28]);
    }

    #[test]
    fn zero_head_gives_zero_trace() {
        let mut net = small(2);
        net.head.zero_out();
        let content = crate::data::synth_document(32, 5);
        let trace = Tensor::full(&[3, 32, 32], 0.3);
        let out = net.synthesize_trace(&content, &trace).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesis_deterministic_and_in_range() {
        let net = small(2);
        let content = crate::data::synth_document(32, 6);
        let mut r = rng(3);
        let trace = Tensor::rand_uniform(&[3, 32, 32], -2.0, 2.0, &mut r);
        let a = net.synthesize_trace(&content, &trace).unwrap();
        let b = net.synthesize_trace(&content, &trace).unwrap();
        assert!(a.bits_eq(&b));
        assert!(a.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn shape_preserved_for_sides_divisible_by_8() {
        let net = small(2);
        for side in [32usize, 48, 64] {
            let content = crate::data::synth_document(side, 7);
            let trace = Tensor::zeros(&[3, side, side]);
            let out = net.synthesize_trace(&content, &trace).unwrap();
            assert_eq!(out.shape(), &[3, side, side]);
        }
        let content = crate::data::synth_document(30, 7);
        let trace = Tensor::zeros(&[3, 30, 30]);
        assert!(matches!(
            net.synthesize_trace(&content, &trace),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn reconstruct_recaptured_examples() {
        let n = 16;
        let ig = Image::filled(n, n, 0.3);
        let zero = Tensor::zeros(&[3, n, n]);
        assert_eq!(reconstruct_recaptured(&ig, &zero).unwrap(), ig);

        let g02 = Tensor::full(&[3, n, n], 0.2);
        let out = reconstruct_recaptured(&ig, &g02).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));

        let bright = Image::filled(n, n, 0.9);
        let g05 = Tensor::full(&[3, n, n], 0.5);
        let out = reconstruct_recaptured(&bright, &g05).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn partial_trace_composition() {
        let n = 32;
        let mut r = rng(9);
        let c = Tensor::rand_uniform(&[3, n / 4, n / 4], -1.0, 1.0, &mut r);
        let t = Tensor::rand_uniform(&[3, n, n], -1.0, 1.0, &mut r);
        let trace = ForensicTrace::assemble(c.clone(), t.clone()).unwrap();

        let both = compose_partial_trace(&trace, true, true).unwrap();
        assert!(both.zip(&trace.g, |a, b| a - b).max_abs() < 1e-6);

        let only_t = compose_partial_trace(&trace, false, true).unwrap();
        assert!(only_t.bits_eq(&t));

        let zero_c = ForensicTrace::assemble(Tensor::zeros(&[3, n / 4, n / 4]), t).unwrap();
        let only_c = compose_partial_trace(&zero_c, true, false).unwrap();
        assert!(only_c.data().iter().all(|&v| v == 0.0));

        assert!(matches!(
            compose_partial_trace(&trace, false, false),
            Err(Error::Param(_))
        ));
    }
}
