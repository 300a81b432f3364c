//! Dataset ingestion, patch extraction, stratified splitting, and the
//! synthetic recapture simulator used for desk-scale runs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// H x W x 3 image, values in [0, 1], row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image buffer length {} does not match {height}x{width}x3",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("image contains non-finite values".into()));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Image {
            height,
            width,
            data: vec![v; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    /// Pack into a (1, 3, H, W) tensor for the networks.
    pub fn to_chw(&self) -> crate::tensor::Tensor<f32> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[(c * h + y) * w + x] = self.data[(y * w + x) * 3 + c];
                }
            }
        }
        crate::tensor::Tensor::from_vec(&[1, 3, h, w], out)
    }

    /// Inverse of [`Image::to_chw`] for a (1, 3, H, W) or (3, H, W) tensor.
    pub fn from_chw(t: &crate::tensor::Tensor<f32>) -> Self {
        let s = t.shape();
        let (c, h, w) = match s.len() {
            4 => (s[1], s[2], s[3]),
            3 => (s[0], s[1], s[2]),
            _ => panic!("from_chw expects a 3-D or 4-D tensor, got {s:?}"),
        };
        assert_eq!(c, 3, "from_chw expects 3 channels");
        let tv = t.data();
        let mut data = vec![0f32; h * w * 3];
        for ci in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[(y * w + x) * 3 + ci] = tv[(ci * h + y) * w + x];
                }
            }
        }
        Image {
            height: h,
            width: w,
            data,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 255.0)
            .collect();
        Image::new(h, w, data)
    }

    /// Save as 8-bit PNG (values clamped and rounded).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [
                    to_u8(self.get(y, x, 0)),
                    to_u8(self.get(y, x, 1)),
                    to_u8(self.get(y, x, 2)),
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Genuine,
    Recaptured,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Genuine => "genuine",
            Label::Recaptured => "recaptured",
        }
    }

    pub fn parse(s: &str) -> Result<Label> {
        match s {
            "genuine" => Ok(Label::Genuine),
            "recaptured" => Ok(Label::Recaptured),
            other => Err(Error::Manifest(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_ref: PathBuf,
    pub label: Label,
    pub domain_tag: String,
}

/// Ordered list of dataset samples plus the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, seed: u64) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Manifest("manifest has no entries".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.image_ref.clone()) {
                return Err(Error::Manifest(format!(
                    "duplicate image_ref {:?}",
                    e.image_ref
                )));
            }
        }
        Ok(DatasetManifest { entries, seed })
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    /// Serialize as `<relative_path>\t<label>\t<domain_tag>` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\n",
                e.image_ref.display(),
                e.label.as_str(),
                e.domain_tag
            ));
        }
        s
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let path = parts
                .next()
                .filter(|p| !p.is_empty())
                .ok_or_else(|| Error::Manifest(format!("line {}: missing path", i + 1)))?;
            let label = parts
                .next()
                .ok_or_else(|| Error::Manifest(format!("line {}: missing label", i + 1)))?;
            let tag = parts
                .next()
                .ok_or_else(|| Error::Manifest(format!("line {}: missing domain tag", i + 1)))?;
            if parts.next().is_some() {
                return Err(Error::Manifest(format!(
                    "line {}: too many fields",
                    i + 1
                )));
            }
            entries.push(ManifestEntry {
                image_ref: PathBuf::from(path),
                label: Label::parse(label)?,
                domain_tag: tag.to_string(),
            });
        }
        DatasetManifest::new(entries, 0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }
}

/// A file skipped at ingestion and why.
#[derive(Debug, Clone)]
pub struct Reject {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug)]
pub struct Ingestion {
    pub manifest: DatasetManifest,
    pub rejects: Vec<Reject>,
}

/// Walk `<root>/genuine` and `<root>/recaptured`, one entry per usable file,
/// in lexicographic order of relative path. Unusable files land in `rejects`.
pub fn ingest_dataset(root: &Path) -> Result<Ingestion> {
    let mut entries = Vec::new();
    let mut rejects = Vec::new();
    for (sub, label) in [("genuine", Label::Genuine), ("recaptured", Label::Recaptured)] {
        let dir = root.join(sub);
        if !dir.is_dir() {
            return Err(Error::Ingest(format!(
                "missing subdirectory {:?} under {:?}",
                sub, root
            )));
        }
        let mut names: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|r| r.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for path in names {
            let rel = PathBuf::from(sub).join(path.file_name().unwrap());
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| e.to_ascii_lowercase())
                .unwrap_or_default();
            if ext != "png" && ext != "bmp" {
                rejects.push(Reject {
                    path: rel,
                    reason: format!("unsupported extension {ext:?}"),
                });
                continue;
            }
            let size = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
            if size == 0 {
                rejects.push(Reject {
                    path: rel,
                    reason: "zero-size file".into(),
                });
                continue;
            }
            if image::ImageReader::open(&path)
                .and_then(|r| r.with_guessed_format())
                .ok()
                .and_then(|r| r.format())
                .is_none()
            {
                rejects.push(Reject {
                    path: rel,
                    reason: "unreadable image header".into(),
                });
                continue;
            }
            entries.push(ManifestEntry {
                image_ref: rel,
                label,
                domain_tag: String::new(),
            });
        }
    }
    entries.sort_by(|a, b| a.image_ref.cmp(&b.image_ref));
    Ok(Ingestion {
        manifest: DatasetManifest::new(entries, 0)?,
        rejects,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchMode {
    /// Non-overlapping grid; right/bottom remainders are discarded.
    Train,
    /// Grid plus edge-snapped patches so every pixel is covered.
    Eval,
}

/// Cut `size` x `size` patches out of an image, row-major.
pub fn extract_patches(image: &Image, size: usize, mode: PatchMode) -> Result<Vec<Image>> {
    let (h, w) = (image.height(), image.width());
    if h < size || w < size {
        return Err(Error::Patch(format!(
            "image {h}x{w} smaller than patch size {size}"
        )));
    }
    let full_rows = h / size;
    let full_cols = w / size;
    let (rows, cols) = match mode {
        PatchMode::Train => (full_rows, full_cols),
        PatchMode::Eval => (
            full_rows + usize::from(h % size != 0),
            full_cols + usize::from(w % size != 0),
        ),
    };
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let y0 = (r * size).min(h - size);
        for c in 0..cols {
            let x0 = (c * size).min(w - size);
            let mut data = Vec::with_capacity(size * size * 3);
            for y in 0..size {
                let base = ((y0 + y) * w + x0) * 3;
                data.extend_from_slice(&image.data()[base..base + size * 3]);
            }
            out.push(Image {
                height: size,
                width: size,
                data,
            });
        }
    }
    Ok(out)
}

/// Knobs of the synthetic print-and-reacquire channel. The all-identity
/// configuration maps any image to itself exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RecaptureParams {
    /// Pre-print blur, px.
    pub blur_sigma1: f32,
    /// Halftone strength in [0, 1]; 0 disables dithering.
    pub dither_blend: f32,
    /// Bayer matrix side, one of {2, 4, 8}.
    pub dither_cell: usize,
    pub color_gain: [f32; 3],
    pub color_offset: [f32; 3],
    /// Reacquisition blur, px.
    pub blur_sigma2: f32,
    pub noise_std: f32,
    pub seed: u64,
}

impl RecaptureParams {
    pub fn identity() -> Self {
        RecaptureParams {
            blur_sigma1: 0.0,
            dither_blend: 0.0,
            dither_cell: 2,
            color_gain: [1.0; 3],
            color_offset: [0.0; 3],
            blur_sigma2: 0.0,
            noise_std: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma1.is_finite() && self.blur_sigma1 >= 0.0) {
            return Err(Error::Param(format!("blur_sigma1 {} < 0", self.blur_sigma1)));
        }
        if !(self.blur_sigma2.is_finite() && self.blur_sigma2 >= 0.0) {
            return Err(Error::Param(format!("blur_sigma2 {} < 0", self.blur_sigma2)));
        }
        if !(self.dither_blend.is_finite() && (0.0..=1.0).contains(&self.dither_blend)) {
            return Err(Error::Param(format!(
                "dither_blend {} outside [0,1]",
                self.dither_blend
            )));
        }
        if ![2, 4, 8].contains(&self.dither_cell) {
            return Err(Error::Param(format!(
                "dither_cell {} not in {{2,4,8}}",
                self.dither_cell
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Param(format!("noise_std {} < 0", self.noise_std)));
        }
        for v in self.color_gain.iter().chain(self.color_offset.iter()) {
            if !v.is_finite() {
                return Err(Error::Param("non-finite color parameter".into()));
            }
        }
        Ok(())
    }
}

/// Bayer threshold matrix of side n (n in {2, 4, 8}), entries 0..n^2-1.
pub fn bayer_matrix(n: usize) -> Vec<u32> {
    assert!(n.is_power_of_two() && n >= 2);
    let mut m = vec![0u32, 2, 3, 1]; // 2x2 base
    let mut side = 2;
    while side < n {
        let ns = side * 2;
        let mut next = vec![0u32; ns * ns];
        for y in 0..side {
            for x in 0..side {
                let v = 4 * m[y * side + x];
                next[y * ns + x] = v;
                next[y * ns + x + side] = v + 2;
                next[(y + side) * ns + x] = v + 3;
                next[(y + side) * ns + x + side] = v + 1;
            }
        }
        m = next;
        side = ns;
    }
    m
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k = Vec::with_capacity(2 * radius + 1);
    let s2 = 2.0 * sigma * sigma;
    for i in 0..=2 * radius {
        let d = i as f32 - radius as f32;
        k.push((-d * d / s2).exp());
    }
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with replicated edges. sigma <= 0 is a no-op.
fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let radius = k.len() / 2;
    let (h, w) = (img.height(), img.width());
    let mut tmp = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let xx = (x + i).saturating_sub(radius).min(w - 1);
                    acc += kv * img.get(y, xx, c);
                }
                tmp.set(y, x, c, acc);
            }
        }
    }
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let yy = (y + i).saturating_sub(radius).min(h - 1);
                    acc += kv * tmp.get(yy, x, c);
                }
                out.set(y, x, c, acc);
            }
        }
    }
    out
}

/// Deterministic synthetic recapture channel:
/// blur -> ordered-dither blend -> affine color -> blur -> seeded noise -> clamp.
pub fn simulate_recapture(genuine: &Image, params: &RecaptureParams) -> Result<Image> {
    params.validate()?;
    let mut img = gaussian_blur(genuine, params.blur_sigma1);

    if params.dither_blend > 0.0 {
        let n = params.dither_cell;
        let bayer = bayer_matrix(n);
        let nf = (n * n) as f32;
        let blend = params.dither_blend;
        let (h, w) = (img.height(), img.width());
        for y in 0..h {
            for x in 0..w {
                let t = (bayer[(y % n) * n + (x % n)] as f32 + 0.5) / nf;
                for c in 0..3 {
                    let v = img.get(y, x, c);
                    let d = if v > t { 1.0 } else { 0.0 };
                    img.set(y, x, c, blend * d + (1.0 - blend) * v);
                }
            }
        }
    }

    {
        let (h, w) = (img.height(), img.width());
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = img.get(y, x, c) * params.color_gain[c] + params.color_offset[c];
                    img.set(y, x, c, v.clamp(0.0, 1.0));
                }
            }
        }
    }

    let mut img = gaussian_blur(&img, params.blur_sigma2);

    if params.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        for v in img.data_mut() {
            let n: f32 = StandardNormal.sample(&mut rng);
            *v += params.noise_std * n;
        }
    }

    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(img)
}

/// Label-stratified split into (train, val, test). Deterministic in `seed`.
pub fn split_manifest(
    manifest: &DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<[DatasetManifest; 3]> {
    let rs = [ratios.0, ratios.1, ratios.2];
    if rs.iter().any(|&r| r <= 0.0) {
        return Err(Error::Split(format!("ratios {rs:?} must be positive")));
    }
    if (rs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("ratios {rs:?} do not sum to 1")));
    }
    let mut parts: [Vec<ManifestEntry>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for label in [Label::Genuine, Label::Recaptured] {
        let mut idx: Vec<usize> = manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == label)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 3 {
            return Err(Error::Split(format!(
                "label {:?} has {} entries, fewer than 3 split parts",
                label,
                idx.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (label as u64).wrapping_mul(0x9e3779b9));
        idx.shuffle(&mut rng);
        // Largest-remainder allocation keeps each part within one entry of
        // its exact share.
        let n = idx.len();
        let exact: Vec<f64> = rs.iter().map(|r| r * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut rem: usize = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &p in &order {
            if rem == 0 {
                break;
            }
            counts[p] += 1;
            rem -= 1;
        }
        // Every part must see at least one entry of this class.
        if counts.iter().any(|&c| c == 0) {
            let max = (0..3).max_by_key(|&p| counts[p]).unwrap();
            for p in 0..3 {
                if counts[p] == 0 {
                    counts[p] += 1;
                    counts[max] -= 1;
                }
            }
        }
        let mut cursor = 0;
        for (p, &cnt) in counts.iter().enumerate() {
            for &i in &idx[cursor..cursor + cnt] {
                parts[p].push(manifest.entries[i].clone());
            }
            cursor += cnt;
        }
    }
    let build = |mut v: Vec<ManifestEntry>| -> Result<DatasetManifest> {
        v.sort_by(|a, b| a.image_ref.cmp(&b.image_ref));
        DatasetManifest::new(v, seed)
    };
    let [a, b, c] = parts;
    Ok([build(a)?, build(b)?, build(c)?])
}

/// Synthetic document-like patch: smooth background with a header band and
/// text-like dark strokes. Deterministic in the seed.
pub fn synth_document(side: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::filled(side, side, 0.0);
    // Paper-like background with a gentle diagonal shade.
    let base = [
        0.86 + rng.random_range(-0.05..0.05f32),
        0.86 + rng.random_range(-0.05..0.05f32),
        0.82 + rng.random_range(-0.05..0.05f32),
    ];
    let shade = rng.random_range(0.02..0.08f32);
    for y in 0..side {
        for x in 0..side {
            let g = shade * (x + y) as f32 / (2 * side) as f32;
            for c in 0..3 {
                img.set(y, x, c, (base[c] - g).clamp(0.0, 1.0));
            }
        }
    }
    // Header band in a saturated color.
    let band_h = side / 8 + rng.random_range(0..side / 8);
    let band = [
        rng.random_range(0.1..0.9f32),
        rng.random_range(0.1..0.9f32),
        rng.random_range(0.1..0.9f32),
    ];
    for y in 0..band_h {
        for x in 0..side {
            for c in 0..3 {
                img.set(y, x, c, band[c]);
            }
        }
    }
    // Text lines: short dark strokes with random gaps.
    let ink = rng.random_range(0.0..0.25f32);
    let line_h = (side / 16).max(2);
    let mut y = band_h + line_h;
    while y + line_h < side {
        let mut x = rng.random_range(1..side / 8);
        while x + 2 < side {
            let len = rng.random_range(2..side / 6 + 2).min(side - x - 1);
            if rng.random_range(0.0..1.0f32) < 0.75 {
                for yy in y..y + line_h - 1 {
                    for xx in x..x + len {
                        for c in 0..3 {
                            img.set(yy, xx, c, ink);
                        }
                    }
                }
            }
            x += len + rng.random_range(1..side / 12 + 2);
        }
        y += line_h + rng.random_range(1..line_h + 1);
    }
    img
}

/// Domain presets for the simulator.
pub fn recapture_preset(name: &str, seed: u64) -> Result<RecaptureParams> {
    match name {
        "base" => Ok(RecaptureParams {
            blur_sigma1: 0.7,
            dither_blend: 0.65,
            dither_cell: 4,
            color_gain: [1.03, 0.98, 1.01],
            color_offset: [0.012, -0.008, 0.0],
            blur_sigma2: 0.5,
            noise_std: 0.012,
            seed,
        }),
        "shifted" => Ok(RecaptureParams {
            blur_sigma1: 1.1,
            dither_blend: 0.75,
            dither_cell: 8,
            color_gain: [0.97, 1.03, 0.99],
            color_offset: [-0.015, 0.01, 0.008],
            blur_sigma2: 0.7,
            noise_std: 0.02,
            seed,
        }),
        other => Err(Error::Param(format!("unknown recapture preset {other:?}"))),
    }
}

/// Generate a synthetic desk dataset on disk: `n` genuine and `n` recaptured
/// PNGs plus a manifest. Fully deterministic in (n, side, seed, preset).
pub fn synth_dataset(
    out_dir: &Path,
    n: usize,
    side: usize,
    seed: u64,
    preset: &str,
) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir.join("genuine")).map_err(|e| Error::io(out_dir, e))?;
    fs::create_dir_all(out_dir.join("recaptured")).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::new();
    for i in 0..n {
        let doc = synth_document(side, seed.wrapping_add(i as u64));
        let rel = PathBuf::from("genuine").join(format!("g{i:04}.png"));
        doc.save_png(&out_dir.join(&rel))?;
        entries.push(ManifestEntry {
            image_ref: rel,
            label: Label::Genuine,
            domain_tag: preset.to_string(),
        });
    }
    for i in 0..n {
        // Distinct documents for the recaptured half so content and label
        // are not confounded by shared layouts.
        let doc = synth_document(side, seed.wrapping_add(0x10_0000 + i as u64));
        let params = recapture_preset(preset, seed.wrapping_add(0x20_0000 + i as u64))?;
        let rec = simulate_recapture(&doc, &params)?;
        let rel = PathBuf::from("recaptured").join(format!("r{i:04}.png"));
        rec.save_png(&out_dir.join(&rel))?;
        entries.push(ManifestEntry {
            image_ref: rel,
            label: Label::Recaptured,
            domain_tag: preset.to_string(),
        });
    }
    entries.sort_by(|a, b| a.image_ref.cmp(&b.image_ref));
    let manifest = DatasetManifest::new(entries, seed)?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(h: usize, w: usize) -> Image {
        let mut img = Image::filled(h, w, 0.0);
        for y in 0..h {
            for x in 0..w {
                let v = ((x / 7 + y / 5) % 2) as f32 * 0.5 + 0.25;
                for c in 0..3 {
                    img.set(y, x, c, v);
                }
            }
        }
        img
    }

    #[test]
    fn patches_train_grid() {
        let img = checker(448, 448);
        let p = extract_patches(&img, 224, PatchMode::Train).unwrap();
        assert_eq!(p.len(), 4);
        let img = checker(500, 300);
        let p = extract_patches(&img, 224, PatchMode::Train).unwrap();
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn patches_too_small() {
        let img = checker(223, 300);
        assert!(matches!(
            extract_patches(&img, 224, PatchMode::Train),
            Err(Error::Patch(_))
        ));
        assert!(matches!(
            extract_patches(&img, 224, PatchMode::Eval),
            Err(Error::Patch(_))
        ));
    }

    #[test]
    fn patches_eval_cover_all_pixels() {
        for (h, w) in [(224, 224), (300, 500), (449, 300), (224, 671)] {
            let img = checker(h, w);
            let patches = extract_patches(&img, 224, PatchMode::Eval).unwrap();
            let rows = h / 224 + usize::from(h % 224 != 0);
            let cols = w / 224 + usize::from(w % 224 != 0);
            assert_eq!(patches.len(), rows * cols);
            // Edge-snapped anchors: reconstruct coverage.
            let mut covered = vec![false; h * w];
            let mut k = 0;
            for r in 0..rows {
                let y0 = (r * 224).min(h - 224);
                for c in 0..cols {
                    let x0 = (c * 224).min(w - 224);
                    let p = &patches[k];
                    k += 1;
                    assert_eq!((p.height(), p.width()), (224, 224));
                    for y in 0..224 {
                        for x in 0..224 {
                            assert_eq!(p.get(y, x, 0), img.get(y0 + y, x0 + x, 0));
                            covered[(y0 + y) * w + (x0 + x)] = true;
                        }
                    }
                }
            }
            assert!(covered.iter().all(|&c| c));
        }
    }

    #[test]
    fn recapture_identity_is_exact() {
        let img = checker(32, 40);
        let out = simulate_recapture(&img, &RecaptureParams::identity()).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn recapture_bayer2_on_mid_gray() {
        // Thresholds (b + 0.5) / 4 for b in [[0,2],[3,1]]:
        //   [[0.125, 0.625], [0.875, 0.375]]  =>  0.5 dithers to [[1,0],[0,1]].
        let img = Image::filled(6, 6, 0.5);
        let params = RecaptureParams {
            dither_blend: 1.0,
            dither_cell: 2,
            ..RecaptureParams::identity()
        };
        let out = simulate_recapture(&img, &params).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let expect = if (y % 2) == (x % 2) { 1.0 } else { 0.0 };
                assert_eq!(out.get(y, x, 0), expect, "at ({y},{x})");
            }
        }
    }

    #[test]
    fn recapture_deterministic() {
        let img = synth_document(40, 3);
        let params = recapture_preset("base", 17).unwrap();
        let a = simulate_recapture(&img, &params).unwrap();
        let b = simulate_recapture(&img, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recapture_rejects_bad_params() {
        let img = checker(16, 16);
        let bad = RecaptureParams {
            blur_sigma1: -1.0,
            ..RecaptureParams::identity()
        };
        assert!(matches!(
            simulate_recapture(&img, &bad),
            Err(Error::Param(_))
        ));
        let bad = RecaptureParams {
            dither_blend: 1.5,
            ..RecaptureParams::identity()
        };
        assert!(matches!(
            simulate_recapture(&img, &bad),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn bayer_matrices_are_permutations() {
        for n in [2usize, 4, 8] {
            let m = bayer_matrix(n);
            let mut seen = vec![false; n * n];
            for &v in &m {
                assert!(!seen[v as usize]);
                seen[v as usize] = true;
            }
        }
        assert_eq!(bayer_matrix(2), vec![0, 2, 3, 1]);
    }

    fn tiny_manifest(ng: usize, nr: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for i in 0..ng {
            entries.push(ManifestEntry {
                image_ref: PathBuf::from(format!("genuine/g{i}.png")),
                label: Label::Genuine,
                domain_tag: "t".into(),
            });
        }
        for i in 0..nr {
            entries.push(ManifestEntry {
                image_ref: PathBuf::from(format!("recaptured/r{i}.png")),
                label: Label::Recaptured,
                domain_tag: "t".into(),
            });
        }
        DatasetManifest::new(entries, 0).unwrap()
    }

    #[test]
    fn split_stratified_counts() {
        let m = tiny_manifest(10, 10);
        let [tr, va, te] = split_manifest(&m, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(tr.entries.len(), 16);
        assert_eq!(va.entries.len(), 2);
        assert_eq!(te.entries.len(), 2);
        assert_eq!(tr.count(Label::Genuine), 8);
        assert_eq!(va.count(Label::Genuine), 1);
        assert_eq!(te.count(Label::Recaptured), 1);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let m = tiny_manifest(10, 10);
        assert!(matches!(
            split_manifest(&m, (0.5, 0.5, 0.5), 7),
            Err(Error::Split(_))
        ));
        assert!(matches!(
            split_manifest(&m, (1.0, -0.5, 0.5), 7),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn split_rejects_tiny_class() {
        let m = tiny_manifest(2, 10);
        assert!(matches!(
            split_manifest(&m, (0.8, 0.1, 0.1), 7),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn split_deterministic() {
        let m = tiny_manifest(9, 13);
        let a = split_manifest(&m, (0.6, 0.2, 0.2), 42).unwrap();
        let b = split_manifest(&m, (0.6, 0.2, 0.2), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let m = tiny_manifest(3, 4);
        let text = m.to_text();
        let back = DatasetManifest::parse_str(&text).unwrap();
        assert_eq!(m.entries, back.entries);
        assert!(DatasetManifest::parse_str("a.png\tbogus\tt\n").is_err());
        assert!(DatasetManifest::parse_str("").is_err());
        assert!(DatasetManifest::parse_str("a\tgenuine\tt\na\tgenuine\tt\n").is_err());
    }
}
