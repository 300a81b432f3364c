//! Alternating training loop for the disentangler, synthesizer, and
//! discriminator bank.
//!
//! Each step runs the generation and self-supervision parts; the
//! discriminator part runs on even-numbered epochs only (epochs are
//! 1-based, so training starts with a discriminator-free warm-up epoch).
//! The self-supervision branch re-disentangles the synthesized recaptured
//! image with a parameter snapshot taken at the start of the epoch.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{extract_patches, DatasetManifest, Image, Label, PatchMode};
use crate::disentangler::Disentangler;
use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, Var};
use crate::nn::{Adam, Binder, TensorTree, TensorVisitor};
use crate::objectives::{
    graph_lsgan_term, graph_pixel_loss, graph_regularizer_loss, DiscriminatorBank, LossWeights,
};
use crate::synthesizer::Synthesizer;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Part {
    Generation,
    SelfSupervision,
    Discriminator,
}

/// Parts executed in a given 1-based epoch: all three on even epochs, the
/// two generator-side parts on odd epochs.
pub fn schedule(epoch: usize) -> Result<Vec<Part>> {
    if epoch < 1 {
        return Err(Error::Param(format!("epoch {epoch} must be >= 1")));
    }
    if epoch % 2 == 0 {
        Ok(vec![Part::Generation, Part::SelfSupervision, Part::Discriminator])
    } else {
        Ok(vec![Part::Generation, Part::SelfSupervision])
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_iterations: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Iterations per epoch; defaults to ceil(dataset_size / batch_size).
    pub epoch_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            batch_size: 4,
            total_iterations: 100_000,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 1000,
            epoch_size: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Param(format!("learning_rate {}", self.learning_rate)));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Param(format!(
                "batch_size {} must be even and >= 2 (half genuine, half recaptured)",
                self.batch_size
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Param("checkpoint_every must be >= 1".into()));
        }
        if self.epoch_size == Some(0) {
            return Err(Error::Param("epoch_size must be >= 1".into()));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub iteration: usize,
    pub l_r: f64,
    pub l_g: f64,
    pub l_d: f64,
    pub l_p: f64,
    pub total: f64,
}

/// Everything a training run owns.
pub struct TrainState<S: Scalar> {
    pub cfg: TrainConfig,
    pub iteration: usize,
    /// 1-based epoch counter.
    pub epoch: usize,
    pub epoch_size: usize,
    pub disentangler: Disentangler<S>,
    pub synthesizer: Synthesizer<S>,
    pub bank: DiscriminatorBank<S>,
    /// Snapshot of the disentangler as of the current epoch start.
    pub frozen: Disentangler<S>,
    opt_gen: Adam<S>,
    opt_disc: Adam<S>,
    rng: ChaCha8Rng,
    pub last_checkpoint: Option<PathBuf>,
}

/// The generator-side parameter set (disentangler + synthesizer) viewed as
/// one tree so a single optimizer covers both.
struct GenPair<'a, S: Scalar> {
    dis: &'a mut Disentangler<S>,
    syn: &'a mut Synthesizer<S>,
}

impl<S: Scalar> TensorTree<S> for GenPair<'_, S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor<S>) {
        self.dis.visit(&crate::nn::join(prefix, "dis"), v);
        self.syn.visit(&crate::nn::join(prefix, "syn"), v);
    }
}

impl<S: Scalar> TrainState<S> {
    pub fn new(
        cfg: TrainConfig,
        dataset_size: usize,
        disentangler: Disentangler<S>,
        synthesizer: Synthesizer<S>,
        bank: DiscriminatorBank<S>,
    ) -> Result<Self> {
        cfg.validate()?;
        let epoch_size = cfg
            .epoch_size
            .unwrap_or_else(|| dataset_size.div_ceil(cfg.batch_size).max(1));
        let frozen = disentangler.clone();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(TrainState {
            opt_gen: Adam::new(cfg.learning_rate, 0.0),
            opt_disc: Adam::new(cfg.learning_rate, 0.0),
            cfg,
            iteration: 0,
            epoch: 1,
            epoch_size,
            disentangler,
            synthesizer,
            bank,
            frozen,
            rng,
            last_checkpoint: None,
        })
    }

    fn stack(images: &[&Image]) -> Tensor<S> {
        let (h, w) = (images[0].height(), images[0].width());
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            data.extend(img.to_chw().data().iter().map(|&v| S::of_f64(v as f64)));
        }
        Tensor::from_vec(&[images.len(), 3, h, w], data)
    }

    /// One full training step on a half-genuine / half-recaptured batch.
    pub fn train_step(&mut self, genuine: &[&Image], recaptured: &[&Image]) -> Result<StepLosses> {
        if genuine.is_empty() || recaptured.is_empty() || genuine.len() != recaptured.len() {
            return Err(Error::Batch(format!(
                "need equal non-empty halves, got {} genuine / {} recaptured",
                genuine.len(),
                recaptured.len()
            )));
        }
        let w = self.cfg.weights;
        let parts = schedule(self.epoch)?;
        let x_g_t = Self::stack(genuine);
        let x_r_t = Self::stack(recaptured);

        // ---- Generation + self-supervision: one graph, generator grads.
        let mut g = Graph::<S>::new(BnMode::BatchUpdate);
        let mut bind_gen = Binder::trainable();
        let mut bind_frozen = Binder::frozen();
        let x_g = g.input(x_g_t.clone());
        let x_r = g.input(x_r_t.clone());

        let tr_g = self.disentangler.fwd(&mut g, &mut bind_gen, "dis", x_g);
        let tr_r = self.disentangler.fwd(&mut g, &mut bind_gen, "dis", x_r);

        // Pseudo-genuine from the recaptured input: clamp(I_R - G(I_R)).
        let neg_tr = g.scale(tr_r.g, S::of_f64(-1.0));
        let recon_gen_raw = g.add(x_r, neg_tr);
        let recon_gen = g.clamp(recon_gen_raw, S::zero(), S::one());

        // Retarget the recaptured trace onto genuine content.
        let g_hat = self
            .synthesizer
            .fwd(&mut g, &mut bind_gen, "syn", x_g, tr_r.g);
        let recon_rec_raw = g.add(x_g, g_hat);
        let recon_rec = g.clamp(recon_rec_raw, S::zero(), S::one());

        let l_r_var = graph_regularizer_loss(&mut g, tr_g.g, tr_r.g, &w);

        // Adversarial generator terms through a constant-parameter bank.
        let fake_g_scores = self.bank.fwd_scores(&mut g, &mut bind_frozen, "bank", recon_gen);
        let fake_r_scores = self.bank.fwd_scores(&mut g, &mut bind_frozen, "bank", recon_rec);
        let mut l_g_var: Option<Var> = None;
        for n in 0..3 {
            let a = graph_lsgan_term(&mut g, fake_g_scores[n], 1.0);
            let b = graph_lsgan_term(&mut g, fake_r_scores[n], 1.0);
            let s = g.add(a, b);
            l_g_var = Some(match l_g_var {
                Some(acc) => g.add(acc, s),
                None => s,
            });
        }
        let l_g_var = l_g_var.unwrap();

        // Self-supervision: re-disentangle the synthesized image with the
        // epoch-start snapshot (batch statistics, buffers untouched).
        g.bn_mode = BnMode::Batch;
        let tr_frozen = self.frozen.fwd(&mut g, &mut bind_frozen, "frozen", recon_rec);
        g.bn_mode = BnMode::BatchUpdate;
        let neg_fr = g.scale(tr_frozen.g, S::of_f64(-1.0));
        let pseudo_raw = g.add(recon_rec, neg_fr);
        let pseudo_genuine = g.clamp(pseudo_raw, S::zero(), S::one());
        let l_p_var = graph_pixel_loss(&mut g, pseudo_genuine, x_g);

        let lr_w = g.scale(l_r_var, S::of_f64(w.lambda1));
        let lg_w = g.scale(l_g_var, S::of_f64(w.lambda2));
        let lp_w = g.scale(l_p_var, S::of_f64(w.lambda4));
        let partial = g.add(lr_w, lg_w);
        let gen_obj = g.add(partial, lp_w);

        let l_r = g.value(l_r_var).item().as_f64();
        let l_g = g.value(l_g_var).item().as_f64();
        let l_p = g.value(l_p_var).item().as_f64();

        if !(l_r.is_finite() && l_g.is_finite() && l_p.is_finite()) {
            return Err(self.numeric_error(l_r, l_g, l_p));
        }

        g.backward(gen_obj);
        let grads = bind_gen.grads(&g);
        let recon_gen_val: Tensor<S> = g.value(recon_gen).clone();
        let recon_rec_val: Tensor<S> = g.value(recon_rec).clone();
        drop(g);
        let mut pair = GenPair {
            dis: &mut self.disentangler,
            syn: &mut self.synthesizer,
        };
        self.opt_gen.step(&mut pair, &grads);

        // ---- Discriminator pass: scores on reals and detached fakes.
        // Always evaluated for the loss log; parameters update only when
        // the schedule includes the discriminator part.
        let update_disc = parts.contains(&Part::Discriminator);
        let mut g2 = Graph::<S>::new(BnMode::Batch);
        let mut bind_d = if update_disc {
            Binder::trainable()
        } else {
            Binder::frozen()
        };
        let rx_g = g2.input(x_g_t);
        let rx_r = g2.input(x_r_t);
        let fx_g = g2.input(recon_gen_val);
        let fx_r = g2.input(recon_rec_val);
        let real_g_scores = self.bank.fwd_scores(&mut g2, &mut bind_d, "", rx_g);
        let real_r_scores = self.bank.fwd_scores(&mut g2, &mut bind_d, "", rx_r);
        let fake_g_scores = self.bank.fwd_scores(&mut g2, &mut bind_d, "", fx_g);
        let fake_r_scores = self.bank.fwd_scores(&mut g2, &mut bind_d, "", fx_r);
        let mut l_d_var: Option<Var> = None;
        for n in 0..3 {
            let a = graph_lsgan_term(&mut g2, real_g_scores[n], 1.0);
            let b = graph_lsgan_term(&mut g2, fake_g_scores[n], 0.0);
            let c = graph_lsgan_term(&mut g2, real_r_scores[n], 1.0);
            let d = graph_lsgan_term(&mut g2, fake_r_scores[n], 0.0);
            let ab = g2.add(a, b);
            let cd = g2.add(c, d);
            let s = g2.add(ab, cd);
            l_d_var = Some(match l_d_var {
                Some(acc) => g2.add(acc, s),
                None => s,
            });
        }
        let l_d_var = l_d_var.unwrap();
        let l_d = g2.value(l_d_var).item().as_f64();
        if !l_d.is_finite() {
            return Err(self.numeric_error(l_r, l_g, l_p));
        }
        if update_disc {
            g2.backward(l_d_var);
            let d_grads = bind_d.grads(&g2);
            self.opt_disc.step(&mut self.bank, &d_grads);
        }
        drop(g2);

        let total = crate::objectives::total_loss(l_r, l_g, l_d, l_p, &w)?;

        self.iteration += 1;
        if self.iteration % self.epoch_size == 0 {
            self.epoch += 1;
            self.frozen = self.disentangler.clone();
        }

        Ok(StepLosses {
            iteration: self.iteration,
            l_r,
            l_g,
            l_d,
            l_p,
            total,
        })
    }

    fn numeric_error(&self, l_r: f64, l_g: f64, l_p: f64) -> Error {
        Error::Numeric(format!(
            "non-finite loss at iteration {} (L_R={l_r}, L_G={l_g}, L_P={l_p}); last good checkpoint: {}",
            self.iteration,
            self.last_checkpoint
                .as_deref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "<none>".into()),
        ))
    }

    /// Mean pixel loss of the self-supervision branch over held-out pairs.
    pub fn validation_pixel_loss(&self, genuine: &[Image], recaptured: &[Image]) -> Result<f64> {
        let pairs = genuine.len().min(recaptured.len());
        if pairs == 0 {
            return Err(Error::Batch("validation sets must be non-empty".into()));
        }
        let mut acc = 0.0;
        for i in 0..pairs {
            let gs = [&genuine[i]];
            let rs = [&recaptured[i]];
            let x_g_t = Self::stack(&gs);
            let x_r_t = Self::stack(&rs);
            let mut g = Graph::<S>::new(BnMode::Batch);
            let mut bind = Binder::frozen();
            let x_g = g.input(x_g_t);
            let x_r = g.input(x_r_t);
            let tr_r = self.disentangler.fwd(&mut g, &mut bind, "dis", x_r);
            let g_hat = self.synthesizer.fwd(&mut g, &mut bind, "syn", x_g, tr_r.g);
            let recon_raw = g.add(x_g, g_hat);
            let recon = g.clamp(recon_raw, S::zero(), S::one());
            let tr_frozen = self.frozen.fwd(&mut g, &mut bind, "frozen", recon);
            let neg = g.scale(tr_frozen.g, S::of_f64(-1.0));
            let pseudo_raw = g.add(recon, neg);
            let pseudo = g.clamp(pseudo_raw, S::zero(), S::one());
            let lp = graph_pixel_loss(&mut g, pseudo, x_g);
            acc += g.value(lp).item().as_f64();
        }
        Ok(acc / pairs as f64)
    }

    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "disentangle-train".into());
        meta.insert("iteration".into(), self.iteration.to_string());
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert(
            "dis.base_channels".into(),
            self.disentangler.cfg.base_channels.to_string(),
        );
        meta.insert(
            "dis.input_side".into(),
            self.disentangler.cfg.input_side.to_string(),
        );
        meta.insert(
            "syn.base_channels".into(),
            self.synthesizer.cfg.base_channels.to_string(),
        );
        meta.insert(
            "syn.res_blocks".into(),
            self.synthesizer.cfg.res_blocks.to_string(),
        );
        meta.insert(
            "bank.base_channels".into(),
            self.bank.cfg.base_channels.to_string(),
        );
        meta.insert(
            "bank.input_side".into(),
            self.bank.cfg.input_side.to_string(),
        );
        let mut all = AllNets {
            dis: &mut self.disentangler,
            syn: &mut self.synthesizer,
            bank: &mut self.bank,
        };
        crate::checkpoint::save_net(&mut all, meta, path)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let mut all = AllNets {
            dis: &mut self.disentangler,
            syn: &mut self.synthesizer,
            bank: &mut self.bank,
        };
        crate::checkpoint::load_net(&mut all, path)?;
        self.frozen = self.disentangler.clone();
        Ok(())
    }
}

/// All three networks as one tree (checkpoint layout).
pub struct AllNets<'a, S: Scalar> {
    pub dis: &'a mut Disentangler<S>,
    pub syn: &'a mut Synthesizer<S>,
    pub bank: &'a mut DiscriminatorBank<S>,
}

impl<S: Scalar> TensorTree<S> for AllNets<'_, S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn TensorVisitor<S>) {
        self.dis.visit(&crate::nn::join(prefix, "dis"), v);
        self.syn.visit(&crate::nn::join(prefix, "syn"), v);
        self.bank.visit(&crate::nn::join(prefix, "bank"), v);
    }
}

/// Rebuild the three networks from a training checkpoint's metadata and
/// tensors.
pub fn load_stack<S: Scalar>(
    path: &Path,
) -> Result<(Disentangler<S>, Synthesizer<S>, DiscriminatorBank<S>)> {
    let archive = crate::checkpoint::Archive::load(path)?;
    let get = |key: &str| -> Result<usize> {
        archive
            .metadata
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::State(format!("checkpoint metadata missing {key}")))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut dis = Disentangler::new(
        crate::disentangler::DisentangleConfig {
            base_channels: get("dis.base_channels")?,
            input_side: get("dis.input_side")?,
        },
        &mut rng,
    )?;
    let mut syn = Synthesizer::new(
        crate::synthesizer::SynthConfig {
            base_channels: get("syn.base_channels")?,
            res_blocks: get("syn.res_blocks")?,
        },
        &mut rng,
    );
    let mut bank = DiscriminatorBank::new(
        crate::objectives::DiscConfig {
            base_channels: get("bank.base_channels")?,
            input_side: get("bank.input_side")?,
        },
        &mut rng,
    );
    {
        let mut all = AllNets {
            dis: &mut dis,
            syn: &mut syn,
            bank: &mut bank,
        };
        crate::checkpoint::load_net_from(&mut all, &archive)?;
    }
    Ok((dis, syn, bank))
}

/// Patches grouped by label, ready for batching.
pub struct TrainData {
    pub genuine: Vec<Image>,
    pub recaptured: Vec<Image>,
}

impl TrainData {
    /// Load every manifest image and cut training patches of `patch_side`
    /// (images already at the patch size pass through unchanged).
    pub fn load(manifest: &DatasetManifest, root: &Path, patch_side: usize) -> Result<Self> {
        let mut genuine = Vec::new();
        let mut recaptured = Vec::new();
        for e in &manifest.entries {
            let img = Image::load(&root.join(&e.image_ref))?;
            let patches = if img.height() == patch_side && img.width() == patch_side {
                vec![img]
            } else {
                extract_patches(&img, patch_side, PatchMode::Train)?
            };
            match e.label {
                Label::Genuine => genuine.extend(patches),
                Label::Recaptured => recaptured.extend(patches),
            }
        }
        if genuine.is_empty() || recaptured.is_empty() {
            return Err(Error::Batch(
                "training data must contain both labels".into(),
            ));
        }
        Ok(TrainData {
            genuine,
            recaptured,
        })
    }
}

/// Deterministic reshuffle-and-cycle index sampler.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Cycler {
            order: (0..n).collect(),
            pos: n, // force shuffle on first draw
        }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.pos >= self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Run the full loop: `total_iterations` steps, CSV/log/checkpoint output
/// when `out_dir` is given. Returns the per-step loss history.
pub fn train<S: Scalar>(
    state: &mut TrainState<S>,
    data: &TrainData,
    val: Option<&TrainData>,
    out_dir: Option<&Path>,
) -> Result<Vec<StepLosses>> {
    let mut csv: Option<fs::File> = None;
    let mut log: Option<fs::File> = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut c = fs::File::create(dir.join("losses.csv")).map_err(|e| Error::io(dir, e))?;
        writeln!(c, "iter,L_R,L_G,L_D,L_P,L").map_err(|e| Error::io(dir, e))?;
        csv = Some(c);
        log = Some(fs::File::create(dir.join("train.log")).map_err(|e| Error::io(dir, e))?);
    }

    let half = state.cfg.batch_size / 2;
    let mut gen_cycle = Cycler::new(data.genuine.len());
    let mut rec_cycle = Cycler::new(data.recaptured.len());
    let mut history = Vec::with_capacity(state.cfg.total_iterations);
    let mut best_val = f64::INFINITY;

    while state.iteration < state.cfg.total_iterations {
        let mut rng = state.rng.clone();
        let gi = gen_cycle.draw(&mut rng, half);
        let ri = rec_cycle.draw(&mut rng, half);
        state.rng = rng;
        let gs: Vec<&Image> = gi.iter().map(|&i| &data.genuine[i]).collect();
        let rs: Vec<&Image> = ri.iter().map(|&i| &data.recaptured[i]).collect();
        let losses = state.train_step(&gs, &rs)?;

        if let Some(c) = csv.as_mut() {
            writeln!(
                c,
                "{},{:.9},{:.9},{:.9},{:.9},{:.9}",
                losses.iteration, losses.l_r, losses.l_g, losses.l_d, losses.l_p, losses.total
            )
            .map_err(|e| Error::io("losses.csv", e))?;
        }
        if losses.iteration % 100 == 0 {
            if let Some(l) = log.as_mut() {
                writeln!(
                    l,
                    "iter {} epoch {} L_R {:.6} L_G {:.6} L_D {:.6} L_P {:.6} L {:.6}",
                    losses.iteration, state.epoch, losses.l_r, losses.l_g, losses.l_d,
                    losses.l_p, losses.total
                )
                .map_err(|e| Error::io("train.log", e))?;
            }
        }
        if losses.iteration % state.cfg.checkpoint_every == 0
            || losses.iteration == state.cfg.total_iterations
        {
            if let Some(dir) = out_dir {
                let path = dir.join(format!("ckpt_{:07}.ckpt", losses.iteration));
                state.save_checkpoint(&path)?;
                if let Some(v) = val {
                    let vl = state.validation_pixel_loss(&v.genuine, &v.recaptured)?;
                    if let Some(l) = log.as_mut() {
                        writeln!(l, "iter {} validation L_P {vl:.6}", losses.iteration)
                            .map_err(|e| Error::io("train.log", e))?;
                    }
                    if vl < best_val {
                        best_val = vl;
                        let best = dir.join("best.ckpt");
                        state.save_checkpoint(&best)?;
                        state.last_checkpoint = Some(path.clone());
                    }
                }
            }
        }
        history.push(losses);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disentangler::DisentangleConfig;
    use crate::nn::{collect_tensors, trees_bit_equal};
    use crate::objectives::DiscConfig;
    use crate::synthesizer::SynthConfig;

    const SIDE: usize = 16;

    fn tiny_state(seed: u64, weights: LossWeights) -> TrainState<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dis = Disentangler::new(
            DisentangleConfig {
                base_channels: 2,
                input_side: SIDE,
            },
            &mut rng,
        )
        .unwrap();
        let syn = Synthesizer::new(
            SynthConfig {
                base_channels: 2,
                res_blocks: 1,
            },
            &mut rng,
        );
        let bank = DiscriminatorBank::new(
            DiscConfig {
                base_channels: 2,
                input_side: SIDE,
            },
            &mut rng,
        );
        let cfg = TrainConfig {
            total_iterations: 6,
            checkpoint_every: 100,
            epoch_size: Some(2),
            weights,
            seed,
            ..TrainConfig::default()
        };
        TrainState::new(cfg, 8, dis, syn, bank).unwrap()
    }

    fn tiny_data(seed: u64) -> TrainData {
        let genuine: Vec<Image> = (0..4)
            .map(|i| crate::data::synth_document(SIDE, seed + i))
            .collect();
        let params = crate::data::recapture_preset("base", seed).unwrap();
        let recaptured: Vec<Image> = (0..4)
            .map(|i| {
                let doc = crate::data::synth_document(SIDE, seed + 100 + i);
                crate::data::simulate_recapture(&doc, &params).unwrap()
            })
            .collect();
        TrainData {
            genuine,
            recaptured,
        }
    }

    #[test]
    fn schedule_parts() {
        assert_eq!(
            schedule(2).unwrap(),
            vec![Part::Generation, Part::SelfSupervision, Part::Discriminator]
        );
        assert_eq!(schedule(3).unwrap(), vec![Part::Generation, Part::SelfSupervision]);
        assert!(matches!(schedule(0), Err(Error::Param(_))));
    }

    #[test]
    fn frozen_snapshot_fixed_within_epoch() {
        let mut st = tiny_state(1, LossWeights::default());
        let data = tiny_data(5);
        // epoch_size = 2: after one step the snapshot must still equal the
        // epoch-start (initial) parameters even though the live net moved.
        let before = collect_tensors(&mut st.frozen);
        let gs: Vec<&Image> = data.genuine.iter().take(1).collect();
        let rs: Vec<&Image> = data.recaptured.iter().take(1).collect();
        st.train_step(&gs, &rs).unwrap();
        let after = collect_tensors(&mut st.frozen);
        assert_eq!(before.len(), after.len());
        for ((na, ta), (nb, tb)) in before.iter().zip(after.iter()) {
            assert_eq!(na, nb);
            assert!(ta.bits_eq(tb), "frozen tensor {na} changed mid-epoch");
        }
        assert!(!trees_bit_equal(&mut st.disentangler, &mut st.frozen));
        // Second step closes the epoch; snapshot refreshes to the live net.
        st.train_step(&gs, &rs).unwrap();
        assert!(trees_bit_equal(&mut st.disentangler, &mut st.frozen));
    }

    #[test]
    fn discriminator_unchanged_on_odd_epochs() {
        let mut st = tiny_state(2, LossWeights::default());
        let data = tiny_data(6);
        let before = collect_tensors(&mut st.bank);
        let gs: Vec<&Image> = data.genuine.iter().take(1).collect();
        let rs: Vec<&Image> = data.recaptured.iter().take(1).collect();
        // Epoch 1 (odd): no discriminator part.
        st.train_step(&gs, &rs).unwrap();
        let after = collect_tensors(&mut st.bank);
        for ((na, ta), (_, tb)) in before.iter().zip(after.iter()) {
            assert!(ta.bits_eq(tb), "bank tensor {na} changed on an odd epoch");
        }
        // Step 2 closes epoch 1; steps 3-4 run in epoch 2 (even) and must
        // move the bank.
        st.train_step(&gs, &rs).unwrap();
        st.train_step(&gs, &rs).unwrap();
        let after = collect_tensors(&mut st.bank);
        assert!(before.iter().zip(after.iter()).any(|((_, a), (_, b))| !a.bits_eq(b)));
    }

    #[test]
    fn zero_weights_and_no_disc_leave_params_fixed() {
        let w = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            alpha1: 0.0,
            alpha2: 0.0,
        };
        let mut st = tiny_state(3, w);
        let data = tiny_data(7);
        let before_d = collect_tensors(&mut st.disentangler);
        let before_s = collect_tensors(&mut st.synthesizer);
        let gs: Vec<&Image> = data.genuine.iter().take(1).collect();
        let rs: Vec<&Image> = data.recaptured.iter().take(1).collect();
        st.train_step(&gs, &rs).unwrap(); // epoch 1: no discriminator update
        // Weights are identical; batch-norm running buffers may move.
        let after_d = collect_tensors(&mut st.disentangler);
        for ((name, a), (_, b)) in before_d.iter().zip(after_d.iter()) {
            if name.contains("running_") {
                continue;
            }
            assert!(a.bits_eq(b), "disentangler {name} moved under zero weights");
        }
        let after_s = collect_tensors(&mut st.synthesizer);
        for ((name, a), (_, b)) in before_s.iter().zip(after_s.iter()) {
            if name.contains("running_") {
                continue;
            }
            assert!(a.bits_eq(b), "synthesizer {name} moved under zero weights");
        }
    }

    #[test]
    fn zeroed_heads_step0_loss_identities() {
        let mut st = tiny_state(4, LossWeights::default());
        st.disentangler.zero_heads();
        st.frozen = st.disentangler.clone();
        let data = tiny_data(8);
        let gs: Vec<&Image> = data.genuine.iter().take(2).collect();
        let rs: Vec<&Image> = data.recaptured.iter().take(2).collect();

        // With zero trace heads, G == 0 so L_R == 0 and the pseudo-genuine
        // equals clamp(I_G + G_hat) minus the (zero) frozen trace.
        let x_g = TrainState::<f32>::stack(&gs);
        let g_hat = {
            let mut g = Graph::<f32>::new(BnMode::Batch);
            let mut bind = Binder::frozen();
            let xg = g.input(x_g.clone());
            let xr = g.input(TrainState::<f32>::stack(&rs));
            let tr_r = st.disentangler.fwd(&mut g, &mut bind, "dis", xr);
            let gh = st.synthesizer.fwd(&mut g, &mut bind, "syn", xg, tr_r.g);
            g.value(gh).clone()
        };
        let recon = x_g.zip(&g_hat, |i, t| (i + t).clamp(0.0, 1.0));
        let want_lp = crate::objectives::pixel_loss(&recon, &x_g).unwrap();

        let losses = st.train_step(&gs, &rs).unwrap();
        assert_eq!(losses.l_r, 0.0);
        assert!(
            (losses.l_p - want_lp).abs() < 1e-5,
            "L_P {} vs expected {}",
            losses.l_p,
            want_lp
        );
    }

    #[test]
    fn training_is_deterministic() {
        let run = || -> Vec<StepLosses> {
            let mut st = tiny_state(9, LossWeights::default());
            let data = tiny_data(11);
            train(&mut st, &data, None, None).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.total.to_bits(), y.total.to_bits(), "loss traces diverge");
        }
    }

    #[test]
    fn zero_iterations_returns_immediately() {
        let mut st = tiny_state(10, LossWeights::default());
        st.cfg.total_iterations = 0;
        let data = tiny_data(12);
        let before = collect_tensors(&mut st.disentangler);
        let history = train(&mut st, &data, None, None).unwrap();
        assert!(history.is_empty());
        let after = collect_tensors(&mut st.disentangler);
        for ((_, a), (_, b)) in before.iter().zip(after.iter()) {
            assert!(a.bits_eq(b));
        }
    }

    #[test]
    fn csv_has_one_row_per_iteration() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = tiny_state(11, LossWeights::default());
        st.cfg.total_iterations = 5;
        let data = tiny_data(13);
        train(&mut st, &data, Some(&data), Some(dir.path())).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 6, "header + 5 rows");
        assert_eq!(lines[0], "iter,L_R,L_G,L_D,L_P,L");
    }

    #[test]
    fn bad_batches_rejected() {
        let mut st = tiny_state(12, LossWeights::default());
        let data = tiny_data(14);
        let gs: Vec<&Image> = data.genuine.iter().take(2).collect();
        let rs: Vec<&Image> = data.recaptured.iter().take(1).collect();
        assert!(matches!(st.train_step(&gs, &rs), Err(Error::Batch(_))));
        assert!(matches!(st.train_step(&[], &[]), Err(Error::Batch(_))));
    }
}
