//! Patch- and image-level scoring, majority voting, AUC/EER, and the
//! cross-domain protocol runner.
//!
//! Score convention, pinned project-wide: higher score = more likely
//! recaptured. AUC is the rank-sum probability that a recaptured sample
//! outscores a genuine one (ties count half). EER sweeps thresholds at
//! -inf, every midpoint of consecutive pooled scores, and +inf, takes the
//! point minimizing |FPR - FNR|, and reports (FPR + FNR)/2 there; ties
//! resolve to the lowest finite threshold.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::classifier::{MmdtClassifier, ModalityBundle, ModalitySet, TraceProvider};
use crate::data::{extract_patches, DatasetManifest, Image, Label, PatchMode};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Per-image scoring record.
#[derive(Debug, Clone)]
pub struct ScoredSample {
    pub image_id: String,
    pub patch_scores: Vec<f64>,
    pub patch_votes: Vec<Label>,
    pub label: Label,
}

impl ScoredSample {
    pub fn new(
        image_id: String,
        patch_scores: Vec<f64>,
        patch_votes: Vec<Label>,
        label: Label,
    ) -> Result<Self> {
        if patch_scores.is_empty() || patch_scores.len() != patch_votes.len() {
            return Err(Error::Vote(format!(
                "scores/votes must be non-empty and equal length ({} vs {})",
                patch_scores.len(),
                patch_votes.len()
            )));
        }
        if patch_scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Vote("patch scores must lie in [0,1]".into()));
        }
        Ok(ScoredSample {
            image_id,
            patch_scores,
            patch_votes,
            label,
        })
    }

    pub fn image_score(&self) -> f64 {
        self.patch_scores.iter().sum::<f64>() / self.patch_scores.len() as f64
    }

    pub fn vote(&self) -> Label {
        majority_vote(&self.patch_votes).expect("non-empty by construction")
    }
}

/// Strict majority; an exact tie resolves to recaptured.
pub fn majority_vote(votes: &[Label]) -> Result<Label> {
    if votes.is_empty() {
        return Err(Error::Vote("majority_vote on empty input".into()));
    }
    let recaptured = votes.iter().filter(|v| **v == Label::Recaptured).count();
    let genuine = votes.len() - recaptured;
    Ok(if recaptured >= genuine {
        Label::Recaptured
    } else {
        Label::Genuine
    })
}

/// Arithmetic mean of patch scores.
pub fn image_score(patch_scores: &[f64]) -> Result<f64> {
    if patch_scores.is_empty() {
        return Err(Error::Vote("image_score on empty input".into()));
    }
    Ok(patch_scores.iter().sum::<f64>() / patch_scores.len() as f64)
}

fn split_by_label(scores: &[f64], labels: &[Label]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric("scores/labels length mismatch".into()));
    }
    let genuine: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l == Label::Genuine)
        .map(|(s, _)| *s)
        .collect();
    let recaptured: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l == Label::Recaptured)
        .map(|(s, _)| *s)
        .collect();
    if genuine.is_empty() || recaptured.is_empty() {
        return Err(Error::Metric("both classes must be present".into()));
    }
    Ok((genuine, recaptured))
}

/// Rank-sum AUC: P(recaptured score > genuine score) with ties at 0.5.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (genuine, recaptured) = split_by_label(scores, labels)?;
    // Average ranks over the pooled sample.
    let mut pooled: Vec<(f64, bool)> = genuine
        .iter()
        .map(|&s| (s, false))
        .chain(recaptured.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores must be comparable"));
    let n = pooled.len();
    let mut rank_sum_rec = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // Ranks are 1-based; tied entries share the average rank.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for p in pooled.iter().take(j + 1).skip(i) {
            if p.1 {
                rank_sum_rec += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_r = recaptured.len() as f64;
    let n_g = genuine.len() as f64;
    let u = rank_sum_rec - n_r * (n_r + 1.0) / 2.0;
    Ok(u / (n_r * n_g))
}

/// Threshold sweep for the equal error rate. Returns (EER, threshold).
pub fn eer(scores: &[f64], labels: &[Label]) -> Result<(f64, f64)> {
    let (genuine, recaptured) = split_by_label(scores, labels)?;
    let mut pooled: Vec<f64> = scores.to_vec();
    pooled.sort_by(|a, b| a.partial_cmp(b).expect("scores must be comparable"));
    // Candidates: -inf, midpoints of consecutive pooled scores (equal pairs
    // collapse to the score itself), +inf.
    let mut candidates = vec![f64::NEG_INFINITY];
    for w in pooled.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.push(f64::INFINITY);
    candidates.dedup();

    // Decision rule: recaptured iff score >= t.
    let rates = |t: f64| -> (f64, f64) {
        let fpr = genuine.iter().filter(|&&s| s >= t).count() as f64 / genuine.len() as f64;
        let fnr = recaptured.iter().filter(|&&s| s < t).count() as f64 / recaptured.len() as f64;
        (fpr, fnr)
    };

    let mut best: Option<(f64, f64, f64)> = None; // (|diff|, threshold, eer)
    for &t in &candidates {
        let (fpr, fnr) = rates(t);
        let diff = (fpr - fnr).abs();
        let e = (fpr + fnr) / 2.0;
        let better = match best {
            None => true,
            Some((bd, bt, _)) => {
                diff < bd - 1e-15
                    || ((diff - bd).abs() <= 1e-15 && t.is_finite() && (!bt.is_finite() || t < bt))
            }
        };
        if better {
            best = Some((diff, t, e));
        }
    }
    let (_, t, e) = best.expect("candidate list is never empty");
    Ok((e, t))
}

/// Aggregate metrics for one protocol run.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub protocol_name: String,
    pub auc: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub patch_auc: f64,
    pub patch_eer: f64,
    pub samples: Vec<ScoredSample>,
}

impl EvalReport {
    pub fn summary_line(&self) -> String {
        format!(
            "protocol {} images {} auc {:.4} eer {:.4} eer_threshold {:.6} patch_auc {:.4} patch_eer {:.4}",
            self.protocol_name,
            self.samples.len(),
            self.auc,
            self.eer,
            self.eer_threshold,
            self.patch_auc,
            self.patch_eer
        )
    }

    /// One record per image plus a trailing summary record.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for sm in &self.samples {
            let _ = writeln!(
                s,
                "image\t{}\t{}\t{}\t{:.6}\t{}",
                sm.image_id,
                sm.label.as_str(),
                sm.patch_scores.len(),
                sm.image_score(),
                sm.vote().as_str()
            );
        }
        let _ = writeln!(
            s,
            "summary\t{}\t{:.6}\t{:.6}\t{:.6}",
            self.protocol_name, self.auc, self.eer, self.eer_threshold
        );
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Anything that turns a patch into a recaptured-probability. The real
/// implementation wraps the classifier; tests can inject oracles.
pub trait PatchScorer {
    fn score_patches(&self, patches: &[Image]) -> Result<Vec<f64>>;
}

pub struct ClassifierScorer<'a, S: Scalar> {
    pub model: &'a MmdtClassifier<S>,
    pub provider: &'a dyn TraceProvider,
    pub active: ModalitySet,
    /// Zero the RGB plane before scoring (trace-only probing).
    pub zero_rgb: bool,
}

impl<S: Scalar> PatchScorer for ClassifierScorer<'_, S> {
    fn score_patches(&self, patches: &[Image]) -> Result<Vec<f64>> {
        let mut bundles = Vec::with_capacity(patches.len());
        for p in patches {
            let trace = self.provider.trace_for(p)?;
            let mut b = ModalityBundle::new(p, &trace, self.active)?;
            if self.zero_rgb {
                b = b.with_zeroed_rgb();
            }
            bundles.push(b);
        }
        let probs = self.model.classify_batch(&bundles)?;
        Ok(probs.iter().map(|&(_, pr)| pr as f64).collect())
    }
}

/// Score every manifest image with eval-mode patches, aggregate to image
/// level, and compute the protocol report.
pub fn run_protocol(
    scorer: &dyn PatchScorer,
    protocol_name: &str,
    manifest: &DatasetManifest,
    data_root: &Path,
    patch_side: usize,
) -> Result<EvalReport> {
    let mut samples = Vec::with_capacity(manifest.entries.len());
    let mut patch_scores_all = Vec::new();
    let mut patch_labels_all = Vec::new();
    for entry in &manifest.entries {
        let img = Image::load(&data_root.join(&entry.image_ref))?;
        let patches = if img.height() == patch_side && img.width() == patch_side {
            vec![img]
        } else {
            extract_patches(&img, patch_side, PatchMode::Eval)?
        };
        let scores = scorer.score_patches(&patches).map_err(|e| {
            Error::State(format!("scoring {} failed: {e}", entry.image_ref.display()))
        })?;
        let votes: Vec<Label> = scores
            .iter()
            .map(|&s| {
                if s >= 0.5 {
                    Label::Recaptured
                } else {
                    Label::Genuine
                }
            })
            .collect();
        for &s in &scores {
            patch_scores_all.push(s);
            patch_labels_all.push(entry.label);
        }
        samples.push(ScoredSample::new(
            entry.image_ref.display().to_string(),
            scores,
            votes,
            entry.label,
        )?);
    }
    samples.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let image_scores: Vec<f64> = samples.iter().map(|s| s.image_score()).collect();
    let image_labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let auc_v = auc(&image_scores, &image_labels)?;
    let (eer_v, thr) = eer(&image_scores, &image_labels)?;
    let patch_auc = auc(&patch_scores_all, &patch_labels_all)?;
    let (patch_eer, _) = eer(&patch_scores_all, &patch_labels_all)?;
    Ok(EvalReport {
        protocol_name: protocol_name.to_string(),
        auc: auc_v,
        eer: eer_v,
        eer_threshold: thr,
        patch_auc,
        patch_eer,
        samples,
    })
}

/// Exhaustive O(n^2) pair-counting AUC, used as the test oracle.
pub fn auc_brute_force(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (genuine, recaptured) = split_by_label(scores, labels)?;
    let mut acc = 0.0;
    for &r in &recaptured {
        for &g in &genuine {
            acc += if r > g {
                1.0
            } else if r == g {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(acc / (genuine.len() * recaptured.len()) as f64)
}

/// Full-sweep EER oracle sharing the stated threshold convention.
pub fn eer_brute_force(scores: &[f64], labels: &[Label]) -> Result<(f64, f64)> {
    let (genuine, recaptured) = split_by_label(scores, labels)?;
    let mut pooled: Vec<f64> = scores.to_vec();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut candidates = vec![f64::NEG_INFINITY, f64::INFINITY];
    for w in pooled.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for &t in &candidates {
        let fpr = genuine.iter().filter(|&&s| s >= t).count() as f64 / genuine.len() as f64;
        let fnr = recaptured.iter().filter(|&&s| s < t).count() as f64 / recaptured.len() as f64;
        let diff = (fpr - fnr).abs();
        let e = (fpr + fnr) / 2.0;
        let better = match best {
            None => true,
            Some((bd, bt, _)) => {
                diff < bd - 1e-15
                    || ((diff - bd).abs() <= 1e-15 && t.is_finite() && (!bt.is_finite() || t < bt))
            }
        };
        if better {
            best = Some((diff, t, e));
        }
    }
    let (_, t, e) = best.unwrap();
    Ok((e, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use Label::{Genuine as G, Recaptured as R};

    #[test]
    fn majority_vote_examples() {
        assert_eq!(majority_vote(&[R, R, G]).unwrap(), R);
        assert_eq!(majority_vote(&[R, G]).unwrap(), R); // tie -> recaptured
        assert_eq!(majority_vote(&[G, G, R]).unwrap(), G);
        assert!(matches!(majority_vote(&[]), Err(Error::Vote(_))));
    }

    #[test]
    fn majority_vote_permutation_invariant() {
        let votes = [R, G, R, G, R];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        use rand::seq::SliceRandom;
        for _ in 0..20 {
            let mut v = votes.to_vec();
            v.shuffle(&mut rng);
            assert_eq!(majority_vote(&v).unwrap(), R);
        }
    }

    #[test]
    fn image_score_examples() {
        assert!((image_score(&[0.2, 0.4]).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(image_score(&[0.7]).unwrap(), 0.7);
        assert_eq!(image_score(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(image_score(&[]), Err(Error::Vote(_))));
    }

    #[test]
    fn auc_examples() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [G, G, R, R];
        assert_eq!(auc(&s, &l).unwrap(), 1.0);

        let s = [0.8, 0.9, 0.1, 0.2];
        assert_eq!(auc(&s, &l).unwrap(), 0.0);

        let s = [0.1, 0.7, 0.3, 0.9];
        let l = [G, G, R, R];
        assert!((auc(&s, &l).unwrap() - 0.75).abs() < 1e-12);

        assert!(matches!(auc(&[0.1, 0.2], &[G, G]), Err(Error::Metric(_))));
    }

    #[test]
    fn eer_examples() {
        // Perfect separation: EER 0 at the (single) separating midpoint.
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [G, G, R, R];
        let (e, t) = eer(&s, &l).unwrap();
        assert_eq!(e, 0.0);
        assert!((t - 0.5).abs() < 1e-12);

        // Interleaved: hand sweep gives (0.5, 0.5).
        let s = [0.1, 0.7, 0.3, 0.9];
        let (e, t) = eer(&s, &l).unwrap();
        assert!((e - 0.5).abs() < 1e-12);
        assert!((t - 0.5).abs() < 1e-12);

        // All identical scores: EER 0.5 at the shared value.
        let s = [0.4, 0.4, 0.4, 0.4];
        let (e, t) = eer(&s, &l).unwrap();
        assert!((e - 0.5).abs() < 1e-12);
        assert_eq!(t, 0.4);
    }

    #[test]
    fn eer_zero_iff_perfectly_separable() {
        let l = [G, G, R, R];
        let (e, _) = eer(&[0.1, 0.3, 0.31, 0.9], &l).unwrap();
        assert_eq!(e, 0.0);
        let (e, _) = eer(&[0.1, 0.31, 0.3, 0.9], &l).unwrap();
        assert!(e > 0.0);
    }

    #[test]
    fn auc_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 40;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<Label> = (0..n).map(|i| if i % 3 == 0 { G } else { R }).collect();
        let base = auc(&scores, &labels).unwrap();

        // Strictly increasing transforms leave AUC unchanged.
        let exp_scores: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        assert!((auc(&exp_scores, &labels).unwrap() - base).abs() < 1e-12);
        let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 11.0).collect();
        assert!((auc(&affine, &labels).unwrap() - base).abs() < 1e-12);

        // Tie-free scores: flipping labels complements the AUC.
        let flipped: Vec<Label> = labels
            .iter()
            .map(|l| if *l == G { R } else { G })
            .collect();
        assert!((auc(&scores, &flipped).unwrap() + base - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_brute_force_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..60 {
            let n = rng.random_range(2..60);
            let n_g = rng.random_range(1..n.max(2));
            let mut scores = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                // Quantized scores force ties.
                let q: f64 = if case % 2 == 0 { 8.0 } else { 1000.0 };
                scores.push((rng.random_range(0.0..1.0f64) * q).round() / q);
                labels.push(if i < n_g.max(1) { G } else { R });
            }
            if !labels.contains(&R) {
                labels[n - 1] = R;
            }
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_brute_force(&scores, &labels).unwrap();
            assert!((fast - slow).abs() < 1e-9, "case {case}: {fast} vs {slow}");

            let (fe, ft) = eer(&scores, &labels).unwrap();
            let (se, st) = eer_brute_force(&scores, &labels).unwrap();
            assert!((fe - se).abs() < 1e-6, "case {case}: eer {fe} vs {se}");
            assert!(
                (ft - st).abs() < 1e-9 || (!ft.is_finite() && !st.is_finite()),
                "case {case}: thr {ft} vs {st}"
            );
        }
    }

    struct FixedScorer(f64);
    impl PatchScorer for FixedScorer {
        fn score_patches(&self, patches: &[Image]) -> Result<Vec<f64>> {
            Ok(vec![self.0; patches.len()])
        }
    }

    /// Scores by mean brightness: synthetic recaptures are dithered and
    /// darker/lighter in a label-correlated way only when built that way.
    struct OracleScorer;
    impl PatchScorer for OracleScorer {
        fn score_patches(&self, patches: &[Image]) -> Result<Vec<f64>> {
            // Patch files are named by label in the fixture, but the scorer
            // only sees pixels; the fixture encodes the label in the pixels.
            Ok(patches
                .iter()
                .map(|p| if p.get(0, 0, 0) > 0.5 { 1.0 } else { 0.0 })
                .collect())
        }
    }

    fn protocol_fixture() -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("genuine")).unwrap();
        std::fs::create_dir_all(dir.path().join("recaptured")).unwrap();
        let mut entries = Vec::new();
        for i in 0..3 {
            let img = Image::filled(16, 16, 0.1);
            let rel = std::path::PathBuf::from("genuine").join(format!("g{i}.png"));
            img.save_png(&dir.path().join(&rel)).unwrap();
            entries.push(crate::data::ManifestEntry {
                image_ref: rel,
                label: G,
                domain_tag: "fix".into(),
            });
        }
        for i in 0..3 {
            let img = Image::filled(16, 16, 0.9);
            let rel = std::path::PathBuf::from("recaptured").join(format!("r{i}.png"));
            img.save_png(&dir.path().join(&rel)).unwrap();
            entries.push(crate::data::ManifestEntry {
                image_ref: rel,
                label: R,
                domain_tag: "fix".into(),
            });
        }
        let manifest = DatasetManifest::new(entries, 0).unwrap();
        (dir, manifest)
    }

    #[test]
    fn run_protocol_constant_scorer_gives_half_auc() {
        let (dir, manifest) = protocol_fixture();
        let report =
            run_protocol(&FixedScorer(0.5), "fixture", &manifest, dir.path(), 16).unwrap();
        assert!((report.auc - 0.5).abs() < 1e-12);
        assert!(report.eer.is_finite());
        assert_eq!(report.samples.len(), 6);
    }

    #[test]
    fn run_protocol_oracle_scorer_is_perfect() {
        let (dir, manifest) = protocol_fixture();
        let report = run_protocol(&OracleScorer, "fixture", &manifest, dir.path(), 16).unwrap();
        assert_eq!(report.auc, 1.0);
        assert_eq!(report.eer, 0.0);
        // Votes follow the scores.
        for s in &report.samples {
            assert_eq!(s.vote(), s.label);
        }
        let text = report.to_text();
        assert!(text.lines().count() == 7);
        assert!(text.contains("summary\tfixture"));
    }
}
