//! Encoder-decoder network that splits a document patch into a coarse
//! blur-content trace C, a full-resolution texture trace T, and their
//! assembly G = resize_up(C) + T, plus the subtractive genuine
//! reconstruction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{bilinear_forward, BnMode, Graph, Var};
use crate::nn::{join, Binder, Conv2d, ConvBnLrelu, ConvT2d, TensorTree, TensorVisitor};
use crate::tensor::{Scalar, Tensor};

/// Contract sides for one trace geometry: full side `n`, blur-content side
/// `l = n/4`, latent grid `n/8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceShapes {
    pub n: usize,
    pub l: usize,
    pub latent: (usize, usize, usize),
}

impl TraceShapes {
    pub fn for_side(n: usize, latent_channels: usize) -> Result<Self> {
        if n % 8 != 0 {
            return Err(Error::Shape(format!("trace side {n} not divisible by 8")));
        }
        let l = n / 4;
        let s = TraceShapes {
            n,
            l,
            latent: (n / 8, n / 8, latent_channels),
        };
        debug_assert!(s.n > s.l && s.n % s.l == 0);
        Ok(s)
    }

    /// The deployment geometry: 224 / 56 / (28, 28, 96).
    pub fn standard() -> Self {
        TraceShapes::for_side(224, 96).unwrap()
    }
}

/// Disentangled traces for one image. `g` is always the assembly of the
/// stored `c` and `t`.
#[derive(Debug, Clone)]
pub struct ForensicTrace {
    pub c: Tensor<f32>,
    pub t: Tensor<f32>,
    pub g: Tensor<f32>,
}

impl ForensicTrace {
    pub fn assemble(c: Tensor<f32>, t: Tensor<f32>) -> Result<Self> {
        let ls = c.shape().to_vec();
        let ts = t.shape().to_vec();
        if ls.len() != 3 || ts.len() != 3 || ls[0] != 3 || ts[0] != 3 {
            return Err(Error::Shape(format!(
                "trace components must be (3,l,l) and (3,n,n), got {ls:?} and {ts:?}"
            )));
        }
        if !c.all_finite() || !t.all_finite() {
            return Err(Error::Numeric("trace contains non-finite values".into()));
        }
        let up = resize_up(&c, ts[1], ts[2]);
        let g = up.zip(&t, |a, b| a + b);
        Ok(ForensicTrace { c, t, g })
    }

    pub fn full_side(&self) -> usize {
        self.t.shape()[1]
    }
}

/// Bilinear upsampling of a (3, l, l) map to (3, h, w), half-pixel centers.
pub fn resize_up<S: Scalar>(c: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let s = c.shape().to_vec();
    assert_eq!(s.len(), 3, "resize_up expects (C, h, w)");
    let four = c.reshaped(&[1, s[0], s[1], s[2]]);
    let out = bilinear_forward(&four, h, w);
    out.reshape(&[s[0], h, w])
}

#[derive(Debug, Clone, Copy)]
pub struct DisentangleConfig {
    /// First-stage channel count; the encoder ladder is (c, 2c, 4c).
    pub base_channels: usize,
    /// Expected input side (must be divisible by 8).
    pub input_side: usize,
}

impl Default for DisentangleConfig {
    fn default() -> Self {
        DisentangleConfig {
            base_channels: 24,
            input_side: 224,
        }
    }
}

/// Trace graph outputs of one forward pass.
pub struct TraceVars {
    pub c: Var,
    pub t: Var,
    pub g: Var,
}

#[derive(Clone)]
pub struct Disentangler<S: Scalar> {
    pub cfg: DisentangleConfig,
    pub shapes: TraceShapes,
    enc1: ConvBnLrelu<S>,
    enc2: ConvBnLrelu<S>,
    enc3: ConvBnLrelu<S>,
    dec1: ConvT2d<S>,
    dec1_norm: crate::nn::BatchNorm2d<S>,
    dec2: ConvT2d<S>,
    dec2_norm: crate::nn::BatchNorm2d<S>,
    dec3: ConvT2d<S>,
    dec3_norm: crate::nn::BatchNorm2d<S>,
    pub c_head: Conv2d<S>,
    pub t_head: Conv2d<S>,
}

impl<S: Scalar> Disentangler<S> {
    pub fn new<R: Rng>(cfg: DisentangleConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.base_channels;
        let shapes = TraceShapes::for_side(cfg.input_side, 4 * c)?;
        Ok(Disentangler {
            cfg,
            shapes,
            enc1: ConvBnLrelu::new(3, c, 2, rng),
            enc2: ConvBnLrelu::new(c, 2 * c, 2, rng),
            enc3: ConvBnLrelu::new(2 * c, 4 * c, 2, rng),
            dec1: ConvT2d::upsample2(4 * c, 2 * c, rng),
            dec1_norm: crate::nn::BatchNorm2d::new(2 * c),
            dec2: ConvT2d::upsample2(2 * c, c, rng),
            dec2_norm: crate::nn::BatchNorm2d::new(c),
            dec3: ConvT2d::upsample2(c, c, rng),
            dec3_norm: crate::nn::BatchNorm2d::new(c),
            c_head: Conv2d::new(2 * c, 3, 3, 1, 1, rng),
            t_head: Conv2d::new(c, 3, 3, 1, 1, rng),
        })
    }

    /// Build the trace graph for a batch (B, 3, n, n).
    pub fn fwd(&self, g: &mut Graph<S>, bind: &mut Binder, prefix: &str, x: Var) -> TraceVars {
        let slope = S::of_f64(0.2);
        let n = g.shape(x)[2];
        let e1 = self.enc1.fwd(g, bind, &join(prefix, "enc1"), x);
        let e2 = self.enc2.fwd(g, bind, &join(prefix, "enc2"), e1);
        let latent = self.enc3.fwd(g, bind, &join(prefix, "enc3"), e2);

        // Decoder with additive skips at matching resolutions.
        let d1 = self.dec1.fwd(g, bind, &join(prefix, "dec1"), latent);
        let d1 = g.add(d1, e2);
        let d1 = self.dec1_norm.fwd(g, bind, &join(prefix, "dec1_norm"), d1);
        let d1 = g.leaky_relu(d1, slope);

        let d2 = self.dec2.fwd(g, bind, &join(prefix, "dec2"), d1);
        let d2 = g.add(d2, e1);
        let d2 = self.dec2_norm.fwd(g, bind, &join(prefix, "dec2_norm"), d2);
        let d2 = g.leaky_relu(d2, slope);

        let d3 = self.dec3.fwd(g, bind, &join(prefix, "dec3"), d2);
        let d3 = self.dec3_norm.fwd(g, bind, &join(prefix, "dec3_norm"), d3);
        let d3 = g.leaky_relu(d3, slope);

        let c_raw = self.c_head.fwd(g, bind, &join(prefix, "c_head"), d1);
        let c = g.tanh(c_raw);
        let t_raw = self.t_head.fwd(g, bind, &join(prefix, "t_head"), d3);
        let t = g.tanh(t_raw);
        let c_up = g.bilinear_resize(c, n, n);
        let g_full = g.add(c_up, t);
        TraceVars { c, t, g: g_full }
    }

    /// Inference: disentangle one image into (C, T, G). Deterministic; uses
    /// running batch-norm statistics.
    pub fn disentangle(&self, img: &crate::data::Image) -> Result<ForensicTrace> {
        let n = self.shapes.n;
        if img.height() != n || img.width() != n {
            return Err(Error::Shape(format!(
                "disentangle expects {n}x{n} input, got {}x{}",
                img.height(),
                img.width()
            )));
        }
        let mut g = Graph::<S>::new(BnMode::Running);
        let mut bind = Binder::frozen();
        let x = g.input(img.to_chw().cast());
        let tv = self.fwd(&mut g, &mut bind, "", x);
        let l = self.shapes.l;
        let c: Tensor<f32> = g.value(tv.c).cast();
        let t: Tensor<f32> = g.value(tv.t).cast();
        ForensicTrace::assemble(c.reshape(&[3, l, l]), t.reshape(&[3, n, n]))
    }

    /// Zero both trace heads (silent-trace initialization used in tests).
    pub fn zero_heads(&mut self) {
        self.c_head.zero_out();
        self.t_head.zero_out();
    }
}

impl<S: Scalar> TensorTree<S> for Disentangler<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor<S>) {
        self.enc1.visit(&join(prefix, "enc1"), v);
        self.enc2.visit(&join(prefix, "enc2"), v);
        self.enc3.visit(&join(prefix, "enc3"), v);
        self.dec1.visit(&join(prefix, "dec1"), v);
        self.dec1_norm.visit(&join(prefix, "dec1_norm"), v);
        self.dec2.visit(&join(prefix, "dec2"), v);
        self.dec2_norm.visit(&join(prefix, "dec2_norm"), v);
        self.dec3.visit(&join(prefix, "dec3"), v);
        self.dec3_norm.visit(&join(prefix, "dec3_norm"), v);
        self.c_head.visit(&join(prefix, "c_head"), v);
        self.t_head.visit(&join(prefix, "t_head"), v);
    }
}

/// Subtractive genuine reconstruction: clamp(I - G, 0, 1).
pub fn reconstruct_genuine(img: &crate::data::Image, trace: &ForensicTrace) -> Result<crate::data::Image> {
    let n = trace.full_side();
    if img.height() != n || img.width() != n {
        return Err(Error::Shape(format!(
            "image {}x{} does not match trace side {n}",
            img.height(),
            img.width()
        )));
    }
    let chw = img.to_chw().reshape(&[3, n, n]);
    let out = chw.zip(&trace.g, |i, g| (i - g).clamp(0.0, 1.0));
    Ok(crate::data::Image::from_chw(&out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Straightforward per-pixel bilinear resampler used as an oracle.
    fn reference_bilinear(c: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
        let s = c.shape().to_vec();
        let (ch, h, w) = (s[0], s[1], s[2]);
        let mut out = Tensor::zeros(&[ch, oh, ow]);
        for ci in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5)
                        .clamp(0.0, (h - 1) as f64);
                    let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5)
                        .clamp(0.0, (w - 1) as f64);
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    let v00 = c.data()[(ci * h + y0) * w + x0];
                    let v01 = c.data()[(ci * h + y0) * w + x1];
                    let v10 = c.data()[(ci * h + y1) * w + x0];
                    let v11 = c.data()[(ci * h + y1) * w + x1];
                    out.data_mut()[(ci * oh + oy) * ow + ox] = (1.0 - fy) * (1.0 - fx) * v00
                        + (1.0 - fy) * fx * v01
                        + fy * (1.0 - fx) * v10
                        + fy * fx * v11;
                }
            }
        }
        out
    }

    #[test]
    fn resize_up_zeros_and_constant() {
        let z = Tensor::<f32>::zeros(&[3, 56, 56]);
        let up = resize_up(&z, 224, 224);
        assert_eq!(up.shape(), &[3, 224, 224]);
        assert!(up.data().iter().all(|&v| v == 0.0));

        let c = Tensor::<f32>::full(&[3, 56, 56], 0.37);
        let up = resize_up(&c, 224, 224);
        assert!(up.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn resize_up_matches_reference() {
        let mut r = rng(11);
        let c = Tensor::<f64>::rand_uniform(&[3, 56, 56], -1.0, 1.0, &mut r);
        let got = resize_up(&c, 224, 224);
        let want = reference_bilinear(&c, 224, 224);
        let diff = got.zip(&want, |a, b| a - b).max_abs();
        assert!(diff < 1e-6, "max abs diff {diff}");
    }

    #[test]
    fn resize_up_is_linear() {
        let mut r = rng(5);
        let a = Tensor::<f64>::rand_uniform(&[3, 8, 8], -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::rand_uniform(&[3, 8, 8], -1.0, 1.0, &mut r);
        let sum = a.zip(&b, |x, y| x + y);
        let lhs = resize_up(&sum, 32, 32);
        let rhs = resize_up(&a, 32, 32).zip(&resize_up(&b, 32, 32), |x, y| x + y);
        assert!(lhs.zip(&rhs, |x, y| x - y).max_abs() < 1e-12);
        let scaled = a.map(|v| 3.5 * v);
        let lhs = resize_up(&scaled, 32, 32);
        let rhs = resize_up(&a, 32, 32).map(|v| 3.5 * v);
        assert!(lhs.zip(&rhs, |x, y| x - y).max_abs() < 1e-12);
    }

    #[test]
    fn trace_shapes_at_standard_side() {
        let s = TraceShapes::standard();
        assert_eq!((s.n, s.l), (224, 56));
        assert_eq!(s.latent, (28, 28, 96));
        let mut r = rng(0);
        let net: Disentangler<f32> = Disentangler::new(DisentangleConfig::default(), &mut r).unwrap();
        let img = Image::filled(224, 224, 0.5);
        let trace = net.disentangle(&img).unwrap();
        assert_eq!(trace.c.shape(), &[3, 56, 56]);
        assert_eq!(trace.t.shape(), &[3, 224, 224]);
        assert_eq!(trace.g.shape(), &[3, 224, 224]);
    }

    #[test]
    fn wrong_input_side_is_shape_error() {
        let mut r = rng(0);
        let net: Disentangler<f32> = Disentangler::new(
            DisentangleConfig {
                base_channels: 2,
                input_side: 32,
            },
            &mut r,
        )
        .unwrap();
        let img = Image::filled(40, 32, 0.5);
        assert!(matches!(
            net.disentangle(&img),
            Err(crate::error::Error::Shape(_))
        ));
    }

    #[test]
    fn zeroed_heads_give_zero_traces() {
        let mut r = rng(1);
        let mut net: Disentangler<f32> = Disentangler::new(
            DisentangleConfig {
                base_channels: 4,
                input_side: 32,
            },
            &mut r,
        )
        .unwrap();
        net.zero_heads();
        let img = crate::data::synth_document(32, 9);
        let trace = net.disentangle(&img).unwrap();
        assert!(trace.c.data().iter().all(|&v| v == 0.0));
        assert!(trace.t.data().iter().all(|&v| v == 0.0));
        assert!(trace.g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disentangle_is_deterministic() {
        let mut r = rng(2);
        let net: Disentangler<f32> = Disentangler::new(
            DisentangleConfig {
                base_channels: 4,
                input_side: 32,
            },
            &mut r,
        )
        .unwrap();
        let img = crate::data::synth_document(32, 4);
        let a = net.disentangle(&img).unwrap();
        let b = net.disentangle(&img).unwrap();
        assert!(a.c.bits_eq(&b.c) && a.t.bits_eq(&b.t) && a.g.bits_eq(&b.g));
    }

    #[test]
    fn assembly_identity_and_ranges() {
        let mut r = rng(3);
        let net: Disentangler<f32> = Disentangler::new(
            DisentangleConfig {
                base_channels: 4,
                input_side: 32,
            },
            &mut r,
        )
        .unwrap();
        let img = crate::data::synth_document(32, 21);
        let trace = net.disentangle(&img).unwrap();
        let up = resize_up(&trace.c, 32, 32);
        let residual = trace.g.zip(&up.zip(&trace.t, |a, b| a + b), |g, s| g - s);
        assert!(residual.max_abs() <= 1e-6);
        assert!(trace.c.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(trace.t.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn reconstruct_examples() {
        let n = 32;
        let zero = ForensicTrace::assemble(
            Tensor::zeros(&[3, n / 4, n / 4]),
            Tensor::zeros(&[3, n, n]),
        )
        .unwrap();
        let img = crate::data::synth_document(n, 7);
        let rec = reconstruct_genuine(&img, &zero).unwrap();
        assert_eq!(rec, img);

        let half = Image::filled(n, n, 0.5);
        let t02 = ForensicTrace::assemble(
            Tensor::zeros(&[3, n / 4, n / 4]),
            Tensor::full(&[3, n, n], 0.2),
        )
        .unwrap();
        let rec = reconstruct_genuine(&half, &t02).unwrap();
        assert!(rec.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));

        let dim = Image::filled(n, n, 0.1);
        let t05 = ForensicTrace::assemble(
            Tensor::zeros(&[3, n / 4, n / 4]),
            Tensor::full(&[3, n, n], 0.5),
        )
        .unwrap();
        let rec = reconstruct_genuine(&dim, &t05).unwrap();
        assert!(rec.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruction_identity_where_unclamped() {
        let mut r = rng(8);
        let net: Disentangler<f32> = Disentangler::new(
            DisentangleConfig {
                base_channels: 4,
                input_side: 32,
            },
            &mut r,
        )
        .unwrap();
        let img = crate::data::synth_document(32, 13);
        let trace = net.disentangle(&img).unwrap();
        let rec = reconstruct_genuine(&img, &trace).unwrap();
        let chw = img.to_chw().reshape(&[3, 32, 32]);
        let rec_chw = rec.to_chw().reshape(&[3, 32, 32]);
        for i in 0..chw.len() {
            let (iv, gv) = (chw.data()[i], trace.g.data()[i]);
            if (0.0..=1.0).contains(&(iv - gv)) {
                assert!((rec_chw.data()[i] + gv - iv).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn gradient_of_mean_square_trace() {
        let mut r = rng(42);
        let mut net: Disentangler<f64> = Disentangler::new(
            DisentangleConfig {
                base_channels: 2,
                input_side: 16,
            },
            &mut r,
        )
        .unwrap();
        let mut data_rng = rng(43);
        let x = Tensor::<f64>::rand_uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut data_rng);

        let loss_of = |net: &mut Disentangler<f64>| -> (f64, _) {
            let mut g = Graph::new(BnMode::Batch);
            let mut bind = Binder::trainable();
            let xin = g.input(x.clone());
            let tv = net.fwd(&mut g, &mut bind, "", xin);
            let loss = g.mean_sq(tv.g);
            g.backward(loss);
            (g.value(loss).item(), bind.grads(&g))
        };
        let report = crate::gradcheck::grad_check(
            &mut net,
            |n| loss_of(n),
            |n| loss_of(n).0,
            25,
            1e-5,
            7,
        );
        report.assert_below(1e-4);
    }
}
