//! Command-line surface tying the pipeline together.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{
    finetune, DisentanglerProvider, LabeledBundles, MmdtClassifier, TraceProvider,
};
use crate::config::RunConfig;
use crate::data::{
    extract_patches, ingest_dataset, split_manifest, synth_dataset, DatasetManifest, Image,
    Label, PatchMode,
};
use crate::disentangler::{DisentangleConfig, Disentangler, ForensicTrace};
use crate::error::{Error, Result};
use crate::evaluation::{run_protocol, ClassifierScorer};
use crate::objectives::DiscConfig;
use crate::synthesizer::SynthConfig;
use crate::objectives::DiscriminatorBank;
use crate::synthesizer::Synthesizer;
use crate::trainer::{load_stack, train, TrainData, TrainState};

#[derive(Parser)]
#[command(
    name = "mmdt",
    about = "Document recapture detection: trace disentanglement, synthesis, and multi-modal classification",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic desk dataset (n genuine + n recaptured PNGs).
    SynthData {
        #[arg(long)]
        out: PathBuf,
        /// Images per class.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side in pixels (divisible by 16).
        #[arg(long, default_value_t = 48)]
        side: usize,
        /// Simulator preset: base | shifted.
        #[arg(long, default_value = "base")]
        preset: String,
    },
    /// Train the disentangler, synthesizer, and discriminators.
    TrainDisentangle {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (genuine/ + recaptured/, optional manifest.tsv).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write per-patch trace archives (<stem>.C / <stem>.T + traces.tsv).
    ExportTraces {
        /// Training checkpoint with the disentangler weights.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the multi-modal classifier (adapters + head only).
    TrainMmdt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training checkpoint holding the frozen disentangler.
        #[arg(long, conflicts_with = "traces")]
        disentangler: Option<PathBuf>,
        /// Directory produced by export-traces.
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a test set and report AUC/EER.
    Eval {
        /// Classifier checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "traces")]
        disentangler: Option<PathBuf>,
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        protocol: String,
    },
    /// Export (G+1)/2 visualization PNGs for every patch.
    VizTraces {
        /// Training checkpoint with the disentangler weights.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Entry point used by `main`; returns the process exit code.
pub fn run_from_env() -> i32 {
    run(std::env::args_os().collect())
}

pub fn run(argv: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let _ = e.print();
                    1
                }
            };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::SynthData {
            out,
            n,
            seed,
            side,
            preset,
        } => cmd_synth_data(&out, n, seed, side, &preset),
        Cmd::TrainDisentangle {
            config,
            data,
            out,
            seed,
        } => cmd_train_disentangle(config.as_deref(), &data, &out, seed),
        Cmd::ExportTraces { model, data, out } => cmd_export_traces(&model, &data, &out),
        Cmd::TrainMmdt {
            config,
            data,
            out,
            disentangler,
            traces,
            seed,
        } => cmd_train_mmdt(
            config.as_deref(),
            &data,
            &out,
            disentangler.as_deref(),
            traces.as_deref(),
            seed,
        ),
        Cmd::Eval {
            model,
            data,
            out,
            disentangler,
            traces,
            protocol,
        } => cmd_eval(
            &model,
            &data,
            &out,
            disentangler.as_deref(),
            traces.as_deref(),
            &protocol,
        ),
        Cmd::VizTraces { model, data, out } => cmd_viz_traces(&model, &data, &out),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Use manifest.tsv when present, otherwise ingest the directory layout.
fn resolve_manifest(data_dir: &Path) -> Result<DatasetManifest> {
    let manifest_path = data_dir.join("manifest.tsv");
    if manifest_path.is_file() {
        DatasetManifest::load(&manifest_path)
    } else {
        let ingestion = ingest_dataset(data_dir)?;
        for r in &ingestion.rejects {
            eprintln!("reject: {} ({})", r.path.display(), r.reason);
        }
        Ok(ingestion.manifest)
    }
}

fn cmd_synth_data(out: &Path, n: usize, seed: u64, side: usize, preset: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::Param("--n must be >= 1".into()));
    }
    if side % 16 != 0 {
        return Err(Error::Param(format!(
            "--side {side} must be divisible by 16"
        )));
    }
    let manifest = synth_dataset(out, n, side, seed, preset)?;
    println!(
        "wrote {} images ({} genuine, {} recaptured) under {}",
        manifest.entries.len(),
        manifest.count(Label::Genuine),
        manifest.count(Label::Recaptured),
        out.display()
    );
    Ok(())
}

fn cmd_train_disentangle(
    config: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.data.seed = s;
    }
    let manifest = resolve_manifest(data_dir)?;
    let [train_m, val_m, _test_m] = split_manifest(
        &manifest,
        (cfg.data.split_train, cfg.data.split_val, cfg.data.split_test),
        cfg.data.seed,
    )?;
    let side = cfg.train.patch_side;
    let data = TrainData::load(&train_m, data_dir, side)?;
    let val = TrainData::load(&val_m, data_dir, side)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let dis: Disentangler<f32> = Disentangler::new(
        DisentangleConfig {
            base_channels: 24,
            input_side: side,
        },
        &mut rng,
    )?;
    let syn: Synthesizer<f32> = Synthesizer::new(SynthConfig::default(), &mut rng);
    let bank: DiscriminatorBank<f32> = DiscriminatorBank::new(
        DiscConfig {
            base_channels: 32,
            input_side: side,
        },
        &mut rng,
    );
    let dataset_size = data.genuine.len() + data.recaptured.len();
    let mut state = TrainState::new(cfg.to_train_config(), dataset_size, dis, syn, bank)?;
    let history = train(&mut state, &data, Some(&val), Some(out))?;
    let final_path = out.join("final.ckpt");
    state.save_checkpoint(&final_path)?;
    if let Some(last) = history.last() {
        println!(
            "trained {} iterations: L_R {:.6} L_G {:.6} L_D {:.6} L_P {:.6} L {:.6}",
            last.iteration, last.l_r, last.l_g, last.l_d, last.l_p, last.total
        );
    }
    println!("final checkpoint: {}", final_path.display());
    Ok(())
}

/// Labeled eval-mode patches with stable ids `<file_stem>_p<index>`.
fn enumerate_patches(
    manifest: &DatasetManifest,
    root: &Path,
    side: usize,
) -> Result<Vec<(String, Image, Label)>> {
    let mut out = Vec::new();
    for e in &manifest.entries {
        let img = Image::load(&root.join(&e.image_ref))?;
        let patches = if img.height() == side && img.width() == side {
            vec![img]
        } else {
            extract_patches(&img, side, PatchMode::Eval)?
        };
        let stem = e
            .image_ref
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("patch")
            .to_string();
        let dir_tag = match e.label {
            Label::Genuine => "g",
            Label::Recaptured => "r",
        };
        for (k, p) in patches.into_iter().enumerate() {
            out.push((format!("{dir_tag}_{stem}_p{k:03}"), p, e.label));
        }
    }
    Ok(out)
}

fn content_hash(patch: &Image) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(patch.height().to_le_bytes());
    h.update(patch.width().to_le_bytes());
    for v in patch.data() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_export_traces(model: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let (dis, _syn, _bank) = load_stack::<f32>(model)?;
    let manifest = resolve_manifest(data_dir)?;
    let side = dis.cfg.input_side;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut index = fs::File::create(out.join("traces.tsv")).map_err(|e| Error::io(out, e))?;
    let patches = enumerate_patches(&manifest, data_dir, side)?;
    for (stem, patch, _) in &patches {
        let trace = dis.disentangle(patch)?;
        let write_one = |name: &str, t: &crate::tensor::Tensor<f32>, ext: &str| -> Result<()> {
            let archive = crate::checkpoint::Archive {
                entries: vec![(
                    name.to_string(),
                    crate::checkpoint::ArchiveTensor::F32(t.clone()),
                )],
                metadata: Default::default(),
            };
            archive.save(&out.join(format!("{stem}.{ext}")))
        };
        write_one("C", &trace.c, "C")?;
        write_one("T", &trace.t, "T")?;
        writeln!(index, "{stem}\t{}", content_hash(patch)).map_err(|e| Error::io(out, e))?;
    }
    println!("exported traces for {} patches to {}", patches.len(), out.display());
    Ok(())
}

/// Trace lookup over an export-traces directory, keyed by patch content.
struct ExportedTraces {
    dir: PathBuf,
    by_hash: HashMap<String, String>,
}

impl ExportedTraces {
    fn open(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("traces.tsv"))
            .map_err(|e| Error::io(dir.join("traces.tsv"), e))?;
        let mut by_hash = HashMap::new();
        for line in text.lines() {
            if let Some((stem, hash)) = line.split_once('\t') {
                by_hash.insert(hash.to_string(), stem.to_string());
            }
        }
        Ok(ExportedTraces {
            dir: dir.to_path_buf(),
            by_hash,
        })
    }
}

impl TraceProvider for ExportedTraces {
    fn trace_for(&self, patch: &Image) -> Result<ForensicTrace> {
        let hash = content_hash(patch);
        let stem = self.by_hash.get(&hash).ok_or_else(|| {
            Error::State(format!("no exported trace for patch with hash {hash}"))
        })?;
        crate::classifier::DiskTraceProvider {
            dir: self.dir.clone(),
        }
        .load_pair(stem)
    }
}

enum Provider<'a> {
    Net(DisentanglerProvider<'a>),
    Disk(ExportedTraces),
}

impl TraceProvider for Provider<'_> {
    fn trace_for(&self, patch: &Image) -> Result<ForensicTrace> {
        match self {
            Provider::Net(p) => p.trace_for(patch),
            Provider::Disk(p) => p.trace_for(patch),
        }
    }
}

fn make_provider<'a>(
    disentangler: Option<&'a Disentangler<f32>>,
    traces: Option<&Path>,
) -> Result<Provider<'a>> {
    match (disentangler, traces) {
        (Some(net), None) => Ok(Provider::Net(DisentanglerProvider {
            net,
            cache_dir: None,
        })),
        (None, Some(dir)) => Ok(Provider::Disk(ExportedTraces::open(dir)?)),
        _ => Err(Error::Param(
            "exactly one of --disentangler / --traces is required".into(),
        )),
    }
}

fn cmd_train_mmdt(
    config: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    disentangler: Option<&Path>,
    traces: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.classifier.seed = s;
        cfg.data.seed = s;
    }
    let manifest = resolve_manifest(data_dir)?;
    let [train_m, val_m, _] = split_manifest(
        &manifest,
        (cfg.data.split_train, cfg.data.split_val, cfg.data.split_test),
        cfg.data.seed,
    )?;
    let side = cfg.classifier.input_side;

    let stack;
    let provider = match (disentangler, traces) {
        (Some(path), None) => {
            stack = load_stack::<f32>(path)?;
            make_provider(Some(&stack.0), None)?
        }
        (None, dir) => make_provider(None, dir)?,
        _ => return Err(Error::Param("pass one of --disentangler / --traces".into())),
    };

    let collect = |m: &DatasetManifest| -> Result<Vec<(Image, Label)>> {
        Ok(enumerate_patches(m, data_dir, side)?
            .into_iter()
            .map(|(_, img, label)| (img, label))
            .collect())
    };
    let train_patches = collect(&train_m)?;
    let val_patches = collect(&val_m)?;
    let active = cfg.classifier.modalities;
    let train_set = LabeledBundles::build(&train_patches, &provider, active)?;
    let val_set = LabeledBundles::build(&val_patches, &provider, active)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.classifier.seed);
    let mut model: MmdtClassifier<f32> = MmdtClassifier::new(cfg.to_backbone_config(), &mut rng)?;
    let history = finetune(&mut model, &train_set, &val_set, &cfg.to_finetune_config())?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("classifier.ckpt");
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("modalities".to_string(), active.tag());
    meta.insert("trained_on".to_string(), data_dir.display().to_string());
    model.save(&path, meta)?;
    for (epoch, (loss, acc)) in history.iter().enumerate() {
        println!("epoch {} train_loss {loss:.6} val_acc {acc:.4}", epoch + 1);
    }
    println!("classifier checkpoint: {}", path.display());
    Ok(())
}

fn cmd_eval(
    model: &Path,
    data_dir: &Path,
    out: &Path,
    disentangler: Option<&Path>,
    traces: Option<&Path>,
    protocol: &str,
) -> Result<()> {
    let archive = crate::checkpoint::Archive::load(model)?;
    // The modality set travels in the checkpoint metadata.
    let active = archive
        .metadata
        .get("modalities")
        .map(|s| crate::classifier::ModalitySet::parse(s))
        .transpose()?
        .unwrap_or_else(crate::classifier::ModalitySet::all);
    let model: MmdtClassifier<f32> = MmdtClassifier::load_from_archive(&archive)?;
    let manifest = resolve_manifest(data_dir)?;
    let stack;
    let provider = match (disentangler, traces) {
        (Some(path), None) => {
            stack = load_stack::<f32>(path)?;
            make_provider(Some(&stack.0), None)?
        }
        (None, dir) => make_provider(None, dir)?,
        _ => return Err(Error::Param("pass one of --disentangler / --traces".into())),
    };
    let scorer = ClassifierScorer {
        model: &model,
        provider: &provider,
        active,
        zero_rgb: false,
    };
    let report = run_protocol(
        &scorer,
        protocol,
        &manifest,
        data_dir,
        model.cfg.input_side,
    )?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report.save(&out.join("report.txt"))?;
    println!("{}", report.summary_line());
    Ok(())
}

fn cmd_viz_traces(model: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let (dis, _syn, _bank) = load_stack::<f32>(model)?;
    let manifest = resolve_manifest(data_dir)?;
    let side = dis.cfg.input_side;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let patches = enumerate_patches(&manifest, data_dir, side)?;
    for (stem, patch, _) in &patches {
        let trace = dis.disentangle(patch)?;
        // Map [-1, 1] to display range.
        let vis = trace.g.map(|v| (v + 1.0) / 2.0);
        let img = Image::from_chw(&vis);
        img.save_png(&out.join(format!("{stem}.G.png")))?;
    }
    println!("wrote {} trace visualizations to {}", patches.len(), out.display());
    Ok(())
}
