//! Central-difference verification of analytic gradients.
//!
//! Runs in f64: the probe perturbs sampled trainable coordinates by `step`,
//! re-evaluates the loss, and compares the symmetric difference quotient
//! against the analytic gradient from backprop.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{ParamKind, TensorTree, TensorVisitor};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Coordinate with the worst agreement, for diagnostics.
    pub worst: String,
}

impl GradCheckReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel_err < tol,
            "gradient check failed: max rel err {:.3e} >= {:.1e} at {} ({} coords checked)",
            self.max_rel_err,
            tol,
            self.worst,
            self.checked
        );
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

struct Lister(Vec<(String, usize)>);
impl TensorVisitor<f64> for Lister {
    fn visit(&mut self, name: &str, kind: ParamKind, t: &mut Tensor<f64>) {
        if kind == ParamKind::Trainable {
            self.0.push((name.to_string(), t.len()));
        }
    }
}

struct Poke<'a> {
    name: &'a str,
    idx: usize,
    delta: f64,
}
impl TensorVisitor<f64> for Poke<'_> {
    fn visit(&mut self, name: &str, kind: ParamKind, t: &mut Tensor<f64>) {
        if kind == ParamKind::Trainable && name == self.name {
            t.data_mut()[self.idx] += self.delta;
        }
    }
}

/// Compare analytic gradients against central differences on `samples`
/// randomly chosen trainable coordinates.
///
/// `loss_and_grads` evaluates the loss once and returns its analytic
/// parameter gradients; `loss_only` must be the same function of the
/// parameters (and must not mutate persistent state such as running
/// batch-norm statistics).
pub fn grad_check<T: TensorTree<f64> + ?Sized>(
    tree: &mut T,
    loss_and_grads: impl FnOnce(&mut T) -> (f64, HashMap<String, Tensor<f64>>),
    mut loss_only: impl FnMut(&mut T) -> f64,
    samples: usize,
    step: f64,
    seed: u64,
) -> GradCheckReport {
    let mut lister = Lister(Vec::new());
    tree.visit("", &mut lister);
    let coords = lister.0;
    let total: usize = coords.iter().map(|(_, l)| l).sum();
    assert!(total > 0, "no trainable coordinates to check");

    let (_, grads) = loss_and_grads(tree);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut picked = None;
        for (name, len) in &coords {
            if flat < *len {
                picked = Some((name.clone(), flat));
                break;
            }
            flat -= len;
        }
        let (name, idx) = picked.unwrap();

        tree.visit(
            "",
            &mut Poke {
                name: &name,
                idx,
                delta: step,
            },
        );
        let plus = loss_only(tree);
        tree.visit(
            "",
            &mut Poke {
                name: &name,
                idx,
                delta: -2.0 * step,
            },
        );
        let minus = loss_only(tree);
        tree.visit(
            "",
            &mut Poke {
                name: &name,
                idx,
                delta: step,
            },
        );

        let fd = (plus - minus) / (2.0 * step);
        let analytic = grads
            .get(&name)
            .map(|g| g.data()[idx])
            .unwrap_or(0.0);
        let err = rel_err(analytic, fd);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = format!("{name}[{idx}] analytic={analytic:.6e} fd={fd:.6e}");
        }
        report.checked += 1;
    }
    report
}
