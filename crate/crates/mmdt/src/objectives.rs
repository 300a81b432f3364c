//! Multi-scale patch discriminators and the training objectives: pixel,
//! regularizer, least-squares adversarial (discriminator/generator), and
//! their weighted total.
//!
//! Convention pinned here and relied on by the tests: every expectation is
//! the plain mean over all elements involved (batch, channels, pixels), and
//! per-scale terms are summed over the three scales.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, Var};
use crate::nn::{join, Binder, Conv2d, TensorTree, TensorVisitor};
use crate::tensor::{Scalar, Tensor};

/// Loss balance. `lambda*` weight the total; `alpha*` weight the trace
/// regularizer's genuine/recaptured halves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 10.0,
            alpha1: 10.0,
            alpha2: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.alpha1,
            self.alpha2,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Param(format!("loss weights must be >= 0: {all:?}")));
        }
        Ok(())
    }
}

fn mean_f64<S: Scalar>(t: &Tensor<S>) -> f64 {
    t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.len() as f64
}

fn mean_abs_f64<S: Scalar>(t: &Tensor<S>) -> f64 {
    t.data().iter().map(|v| v.as_f64().abs()).sum::<f64>() / t.len() as f64
}

fn mean_sq_shifted<S: Scalar>(t: &Tensor<S>, shift: f64) -> f64 {
    t.data()
        .iter()
        .map(|v| {
            let d = v.as_f64() - shift;
            d * d
        })
        .sum::<f64>()
        / t.len() as f64
}

/// Mean absolute difference between two equal-shape tensors.
pub fn pixel_loss<S: Scalar>(recon: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    if recon.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "pixel_loss shapes differ: {:?} vs {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    Ok(mean_abs_f64(&recon.zip(target, |a, b| a - b)))
}

/// alpha1 * mean-square of genuine traces + alpha2 * mean-square of
/// recaptured traces. Each half is the mean over every element in its batch.
pub fn regularizer_loss<S: Scalar>(
    genuine_traces: &[Tensor<S>],
    recaptured_traces: &[Tensor<S>],
    w: &LossWeights,
) -> Result<f64> {
    if genuine_traces.is_empty() || recaptured_traces.is_empty() {
        return Err(Error::Batch("regularizer_loss needs both batches non-empty".into()));
    }
    let ms = |batch: &[Tensor<S>]| -> f64 {
        let total: f64 = batch
            .iter()
            .map(|t| t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
            .sum();
        let count: usize = batch.iter().map(|t| t.len()).sum();
        total / count as f64
    };
    Ok(w.alpha1 * ms(genuine_traces) + w.alpha2 * ms(recaptured_traces))
}

/// Score maps the bank produced for the four image groups, three scales each.
pub struct DiscScores<S> {
    pub real_genuine: Vec<Tensor<S>>,
    pub recon_genuine: Vec<Tensor<S>>,
    pub real_recaptured: Vec<Tensor<S>>,
    pub recon_recaptured: Vec<Tensor<S>>,
}

fn check_scales<S>(maps: &[Vec<Tensor<S>>]) -> Result<()> {
    for m in maps {
        if m.len() != 3 {
            return Err(Error::Shape(format!(
                "expected score maps for 3 scales, got {}",
                m.len()
            )));
        }
    }
    Ok(())
}

/// Least-squares discriminator objective: reals to 1, reconstructions to 0,
/// summed over the three scales.
pub fn discriminator_loss<S: Scalar>(scores: &DiscScores<S>) -> Result<f64> {
    check_scales(&[
        scores.real_genuine.clone(),
        scores.recon_genuine.clone(),
        scores.real_recaptured.clone(),
        scores.recon_recaptured.clone(),
    ])?;
    let mut total = 0.0;
    for n in 0..3 {
        total += mean_sq_shifted(&scores.real_genuine[n], 1.0)
            + mean_sq_shifted(&scores.recon_genuine[n], 0.0)
            + mean_sq_shifted(&scores.real_recaptured[n], 1.0)
            + mean_sq_shifted(&scores.recon_recaptured[n], 0.0);
    }
    Ok(total)
}

/// Least-squares generator objective: both reconstructions pushed to 1.
pub fn generator_loss<S: Scalar>(
    recon_genuine: &[Tensor<S>],
    recon_recaptured: &[Tensor<S>],
) -> Result<f64> {
    check_scales(&[recon_genuine.to_vec(), recon_recaptured.to_vec()])?;
    let mut total = 0.0;
    for n in 0..3 {
        total += mean_sq_shifted(&recon_genuine[n], 1.0) + mean_sq_shifted(&recon_recaptured[n], 1.0);
    }
    Ok(total)
}

/// L = l1*L_R + l2*L_G + l3*L_D + l4*L_P.
pub fn total_loss(l_r: f64, l_g: f64, l_d: f64, l_p: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("L_R", l_r), ("L_G", l_g), ("L_D", l_d), ("L_P", l_p)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is not finite: {v}")));
        }
    }
    Ok(w.lambda1 * l_r + w.lambda2 * l_g + w.lambda3 * l_d + w.lambda4 * l_p)
}

#[derive(Debug, Clone, Copy)]
pub struct DiscConfig {
    pub base_channels: usize,
    /// Full-resolution input side; the other two scales halve it twice.
    pub input_side: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            base_channels: 32,
            input_side: 224,
        }
    }
}

/// One patch discriminator: 8 conv layers with 3 stride-2 downsamplings,
/// widths b,b,2b,2b,4b,4b,8b then a 1-channel score conv (side/8 map).
#[derive(Clone)]
pub struct Discriminator<S: Scalar> {
    layers: Vec<Conv2d<S>>,
}

impl<S: Scalar> Discriminator<S> {
    fn new<R: Rng>(b: usize, rng: &mut R) -> Self {
        let layers = vec![
            Conv2d::new(3, b, 3, 2, 1, rng),
            Conv2d::new(b, b, 3, 1, 1, rng),
            Conv2d::new(b, 2 * b, 3, 2, 1, rng),
            Conv2d::new(2 * b, 2 * b, 3, 1, 1, rng),
            Conv2d::new(2 * b, 4 * b, 3, 2, 1, rng),
            Conv2d::new(4 * b, 4 * b, 3, 1, 1, rng),
            Conv2d::new(4 * b, 8 * b, 3, 1, 1, rng),
            Conv2d::new(8 * b, 1, 3, 1, 1, rng),
        ];
        Discriminator { layers }
    }

    fn fwd(&self, g: &mut Graph<S>, bind: &mut Binder, p: &str, x: Var) -> Var {
        let slope = S::of_f64(0.2);
        let mut y = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            y = layer.fwd(g, bind, &join(p, &format!("conv{i}")), y);
            if i != last {
                y = g.leaky_relu(y, slope);
            }
        }
        y
    }

    /// Zero the final score conv (silent discriminator, used in tests).
    pub fn zero_score_layer(&mut self) {
        self.layers.last_mut().unwrap().zero_out();
    }
}

impl<S: Scalar> TensorTree<S> for Discriminator<S> {
    fn visit(&mut self, p: &str, v: &mut dyn TensorVisitor<S>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit(&join(p, &format!("conv{i}")), v);
        }
    }
}

/// Three discriminators at full, half, and quarter resolution.
#[derive(Clone)]
pub struct DiscriminatorBank<S: Scalar> {
    pub cfg: DiscConfig,
    pub d1: Discriminator<S>,
    pub d2: Discriminator<S>,
    pub d3: Discriminator<S>,
}

impl<S: Scalar> DiscriminatorBank<S> {
    pub fn new<R: Rng>(cfg: DiscConfig, rng: &mut R) -> Self {
        DiscriminatorBank {
            cfg,
            d1: Discriminator::new(cfg.base_channels, rng),
            d2: Discriminator::new(cfg.base_channels, rng),
            d3: Discriminator::new(cfg.base_channels, rng),
        }
    }

    /// Graph forward on a (B, 3, n, n) batch: score maps at sides
    /// n/8, n/16, n/32 (28/14/7 at n = 224).
    pub fn fwd_scores(&self, g: &mut Graph<S>, bind: &mut Binder, p: &str, image: Var) -> [Var; 3] {
        let side = g.shape(image)[2];
        let half = g.bilinear_resize(image, side / 2, side / 2);
        let quarter = g.bilinear_resize(image, side / 4, side / 4);
        [
            self.d1.fwd(g, bind, &join(p, "d1"), image),
            self.d2.fwd(g, bind, &join(p, "d2"), half),
            self.d3.fwd(g, bind, &join(p, "d3"), quarter),
        ]
    }

    /// Inference: score maps for one image at the configured side.
    pub fn discriminate(&self, image: &crate::data::Image) -> Result<Vec<Tensor<f32>>> {
        let n = self.cfg.input_side;
        if image.height() != n || image.width() != n {
            return Err(Error::Shape(format!(
                "discriminate expects {n}x{n}, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        let mut g = Graph::<S>::new(BnMode::Running);
        let mut bind = Binder::frozen();
        let x = g.input(image.to_chw().cast());
        let maps = self.fwd_scores(&mut g, &mut bind, "", x);
        Ok(maps
            .iter()
            .map(|&m| {
                let s = g.shape(m).to_vec();
                g.value(m).cast::<f32>().reshape(&[s[2], s[3]])
            })
            .collect())
    }
}

impl<S: Scalar> TensorTree<S> for DiscriminatorBank<S> {
    fn visit(&mut self, p: &str, v: &mut dyn TensorVisitor<S>) {
        self.d1.visit(&join(p, "d1"), v);
        self.d2.visit(&join(p, "d2"), v);
        self.d3.visit(&join(p, "d3"), v);
    }
}

/// Graph version of the mean-square distance to a constant target.
pub fn graph_lsgan_term<S: Scalar>(g: &mut Graph<S>, score_map: Var, target: f64) -> Var {
    let shifted = g.add_const(score_map, S::of_f64(-target));
    g.mean_sq(shifted)
}

/// Graph version of [`pixel_loss`].
pub fn graph_pixel_loss<S: Scalar>(g: &mut Graph<S>, recon: Var, target: Var) -> Var {
    let d = g.sub(recon, target);
    g.mean_abs(d)
}

/// Graph version of [`regularizer_loss`] on stacked batch tensors.
pub fn graph_regularizer_loss<S: Scalar>(
    g: &mut Graph<S>,
    genuine_trace: Var,
    recaptured_trace: Var,
    w: &LossWeights,
) -> Var {
    let ms_g = g.mean_sq(genuine_trace);
    let ms_r = g.mean_sq(recaptured_trace);
    let a = g.scale(ms_g, S::of_f64(w.alpha1));
    let b = g.scale(ms_r, S::of_f64(w.alpha2));
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn const_maps(v: f64) -> Vec<Tensor<f64>> {
        (0..3).map(|i| Tensor::full(&[1, 1, 4 >> i, 4 >> i], v)).collect()
    }

    #[test]
    fn pixel_loss_examples() {
        let a = Tensor::<f64>::full(&[2, 3], 0.6);
        let b = Tensor::<f64>::full(&[2, 3], 0.5);
        assert!((pixel_loss(&a, &a).unwrap()).abs() < 1e-15);
        assert!((pixel_loss(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        let c = Tensor::<f64>::zeros(&[3, 2]);
        assert!(matches!(pixel_loss(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn pixel_loss_matches_brute_force() {
        let mut r = rng(4);
        let a = Tensor::<f64>::rand_uniform(&[8, 8, 3], 0.0, 1.0, &mut r);
        let b = Tensor::<f64>::rand_uniform(&[8, 8, 3], 0.0, 1.0, &mut r);
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += (a.data()[i] - b.data()[i]).abs();
        }
        let oracle = acc / a.len() as f64;
        assert!((pixel_loss(&a, &b).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn regularizer_examples() {
        let w = LossWeights::default();
        let zero = vec![Tensor::<f64>::zeros(&[3, 4, 4])];
        assert_eq!(regularizer_loss(&zero, &zero, &w).unwrap(), 0.0);

        let g01 = vec![Tensor::<f64>::full(&[3, 4, 4], 0.1)];
        let got = regularizer_loss(&g01, &zero, &w).unwrap();
        assert!((got - 0.1).abs() < 1e-12, "10 * 0.01 = 0.1, got {got}");

        let r1 = vec![Tensor::<f64>::full(&[3, 4, 4], 1.0)];
        let got = regularizer_loss(&zero, &r1, &w).unwrap();
        assert!((got - 1e-4).abs() < 1e-15);

        assert!(matches!(
            regularizer_loss::<f64>(&[], &r1, &w),
            Err(Error::Batch(_))
        ));
    }

    #[test]
    fn lsgan_losses_at_constant_scores() {
        // D == 1 on reals, 0 on reconstructions: everything at target.
        let scores = DiscScores {
            real_genuine: const_maps(1.0),
            recon_genuine: const_maps(0.0),
            real_recaptured: const_maps(1.0),
            recon_recaptured: const_maps(0.0),
        };
        assert_eq!(discriminator_loss(&scores).unwrap(), 0.0);

        // D == 0.5 everywhere: 4 * 0.25 per scale, 3 scales.
        let half = DiscScores {
            real_genuine: const_maps(0.5),
            recon_genuine: const_maps(0.5),
            real_recaptured: const_maps(0.5),
            recon_recaptured: const_maps(0.5),
        };
        assert!((discriminator_loss(&half).unwrap() - 3.0).abs() < 1e-12);

        // Inverted: 4 * 1.0 per scale.
        let inv = DiscScores {
            real_genuine: const_maps(0.0),
            recon_genuine: const_maps(1.0),
            real_recaptured: const_maps(0.0),
            recon_recaptured: const_maps(1.0),
        };
        assert!((discriminator_loss(&inv).unwrap() - 12.0).abs() < 1e-12);

        assert_eq!(generator_loss(&const_maps(1.0), &const_maps(1.0)).unwrap(), 0.0);
        assert!((generator_loss(&const_maps(0.0), &const_maps(0.0)).unwrap() - 6.0).abs() < 1e-12);
        assert!((generator_loss(&const_maps(0.5), &const_maps(0.5)).unwrap() - 1.5).abs() < 1e-12);

        let two = vec![Tensor::<f64>::zeros(&[1, 1, 2, 2]); 2];
        assert!(matches!(
            generator_loss(&two, &const_maps(0.0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn lsgan_matches_scalar_brute_force_on_1x1_maps() {
        let mut r = rng(77);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..12).map(|_| r.random_range(-2.0..2.0)).collect();
            let maps = |off: usize| -> Vec<Tensor<f64>> {
                (0..3).map(|n| Tensor::full(&[1, 1, 1, 1], vals[off + n])).collect()
            };
            let scores = DiscScores {
                real_genuine: maps(0),
                recon_genuine: maps(3),
                real_recaptured: maps(6),
                recon_recaptured: maps(9),
            };
            let mut want_d = 0.0;
            let mut want_g = 0.0;
            for n in 0..3 {
                want_d += (vals[n] - 1.0).powi(2)
                    + vals[3 + n].powi(2)
                    + (vals[6 + n] - 1.0).powi(2)
                    + vals[9 + n].powi(2);
                want_g += (vals[3 + n] - 1.0).powi(2) + (vals[9 + n] - 1.0).powi(2);
            }
            assert!((discriminator_loss(&scores).unwrap() - want_d).abs() < 1e-9);
            assert!(
                (generator_loss(&scores.recon_genuine, &scores.recon_recaptured).unwrap() - want_g)
                    .abs()
                    < 1e-9
            );
        }
    }

    #[test]
    fn total_loss_examples_and_linearity() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        let got = total_loss(0.1, 1.5, 3.0, 0.2, &w).unwrap();
        assert!((got - 6.6).abs() < 1e-12, "expected 6.6, got {got}");

        let mut w0 = w;
        w0.lambda4 = 0.0;
        let a = total_loss(0.3, 0.4, 0.5, 99.0, &w0).unwrap();
        let b = total_loss(0.3, 0.4, 0.5, -7.0, &w0).unwrap();
        assert_eq!(a, b);

        // Unit-vector evaluation recovers each coefficient.
        assert_eq!(total_loss(1.0, 0.0, 0.0, 0.0, &w).unwrap(), w.lambda1);
        assert_eq!(total_loss(0.0, 1.0, 0.0, 0.0, &w).unwrap(), w.lambda2);
        assert_eq!(total_loss(0.0, 0.0, 1.0, 0.0, &w).unwrap(), w.lambda3);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 1.0, &w).unwrap(), w.lambda4);

        assert!(matches!(
            total_loss(f64::NAN, 0.0, 0.0, 0.0, &w),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn discriminate_map_sides() {
        let bank: DiscriminatorBank<f32> =
            DiscriminatorBank::new(DiscConfig::default(), &mut rng(5));
        let img = crate::data::synth_document(224, 1);
        let maps = bank.discriminate(&img).unwrap();
        assert_eq!(maps[0].shape(), &[28, 28]);
        assert_eq!(maps[1].shape(), &[14, 14]);
        assert_eq!(maps[2].shape(), &[7, 7]);

        let wrong = crate::data::synth_document(112, 1);
        assert!(matches!(bank.discriminate(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn zeroed_score_layers_give_zero_maps_and_determinism() {
        let mut bank: DiscriminatorBank<f32> = DiscriminatorBank::new(
            DiscConfig {
                base_channels: 4,
                input_side: 32,
            },
            &mut rng(6),
        );
        let img = crate::data::synth_document(32, 2);
        let a = bank.discriminate(&img).unwrap();
        let b = bank.discriminate(&img).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!(x.bits_eq(y));
        }
        bank.d1.zero_score_layer();
        bank.d2.zero_score_layer();
        bank.d3.zero_score_layer();
        let maps = bank.discriminate(&img).unwrap();
        assert!(maps.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn graph_losses_match_pure_functions() {
        let mut r = rng(8);
        let a = Tensor::<f64>::rand_uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut r);
        let b = Tensor::<f64>::rand_uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut r);
        let w = LossWeights::default();

        let mut g = Graph::new(BnMode::Batch);
        let va = g.input(a.clone());
        let vb = g.input(b.clone());
        let lp = graph_pixel_loss(&mut g, va, vb);
        assert!((g.value(lp).item() - pixel_loss(&a, &b).unwrap()).abs() < 1e-12);

        let lr = graph_regularizer_loss(&mut g, va, vb, &w);
        let want = regularizer_loss(&[a.clone()], &[b.clone()], &w).unwrap();
        assert!((g.value(lr).item() - want).abs() < 1e-12);

        let term = graph_lsgan_term(&mut g, va, 1.0);
        let want = mean_sq_shifted(&a, 1.0);
        assert!((g.value(term).item() - want).abs() < 1e-12);
    }
}
