//! Shared domain types and the on-disk dataset format.
//!
//! Array layouts used throughout the crate:
//! * image: `[c, h, w]`
//! * rater masks and expertness: `[n, K, h, w]` (rater, structure, row, column)
//! * fused labels and predictions: `[K, h, w]`
//!
//! A dataset directory holds `manifest.json`, one 16-bit PNG per image
//! (`<id>.png`) and one 16-bit grayscale PNG per rater mask
//! (`<id>_s<structure>_r<rater>.png`). Values map linearly, 0 to 0.0 and
//! 65535 to 1.0.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// Tolerance for the per-pixel simplex constraint on expertness weights.
pub const SIMPLEX_TOL: f64 = 1e-5;
/// Tolerance for the convex-hull bound on fused labels.
pub const HULL_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct MultiRaterSample {
    pub sample_id: String,
    /// `[c, h, w]`, values in `[0, 1]`.
    pub image: Array3<f64>,
    /// `[n, K, h, w]`, values in `[0, 1]`.
    pub masks: Array4<f64>,
    pub label: u8,
}

impl MultiRaterSample {
    pub fn raters(&self) -> usize {
        self.masks.dim().0
    }

    pub fn structures(&self) -> usize {
        self.masks.dim().1
    }

    pub fn dims(&self) -> Dims {
        let (c, h, w) = self.image.dim();
        let (n, k, _, _) = self.masks.dim();
        Dims { n, k, h, w, c }
    }

    /// One rater's `[K, h, w]` annotation.
    pub fn rater_masks(&self, rater: usize) -> Array3<f64> {
        self.masks.index_axis(Axis(0), rater).to_owned()
    }
}

/// Every invariant violation of `sample`, one entry per field and condition.
pub fn validate_sample(sample: &MultiRaterSample) -> Vec<String> {
    let mut out = Vec::new();
    let (c, h, w) = sample.image.dim();
    let (n, k, mh, mw) = sample.masks.dim();
    if sample.sample_id.is_empty() {
        out.push("sample_id: must be non-empty".to_string());
    } else if sample
        .sample_id
        .chars()
        .any(|ch| !(ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' || ch == '.'))
    {
        out.push(format!(
            "sample_id: `{}` must use only [A-Za-z0-9._-]",
            sample.sample_id
        ));
    }
    if c != 1 && c != 3 {
        out.push(format!("image: channel count c={c} must be 1 or 3"));
    }
    if n < 2 {
        out.push(format!("masks: rater count n={n} must be at least 2"));
    }
    if k < 1 {
        out.push(format!("masks: structure count K={k} must be at least 1"));
    }
    if (mh, mw) != (h, w) {
        out.push(format!(
            "masks: spatial size {mh}x{mw} differs from image size {h}x{w}"
        ));
    }
    if let Some(msg) = range_violation(sample.image.iter().copied()) {
        out.push(format!("image: {msg}"));
    }
    if let Some(msg) = range_violation(sample.masks.iter().copied()) {
        out.push(format!("masks: {msg}"));
    }
    if sample.label > 1 {
        out.push(format!("label: {} must be 0 or 1", sample.label));
    }
    out
}

fn range_violation(values: impl Iterator<Item = f64>) -> Option<String> {
    let mut bad = 0usize;
    let mut first = None;
    for v in values {
        if !(0.0..=1.0).contains(&v) {
            bad += 1;
            first.get_or_insert(v);
        }
    }
    first.map(|v| format!("{bad} value(s) outside [0, 1] (first: {v})"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    dims: Dims,
    samples: Vec<MultiRaterSample>,
    metadata: BTreeMap<String, serde_json::Value>,
}

impl Dataset {
    /// Validates every sample and the dataset-level invariants.
    pub fn new(
        split: Split,
        dims: Dims,
        samples: Vec<MultiRaterSample>,
        mut metadata: BTreeMap<String, serde_json::Value>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            let mut violations = validate_sample(s);
            if s.dims() != dims {
                violations.push(format!(
                    "dims: sample has {:?}, dataset declares {:?}",
                    s.dims(),
                    dims
                ));
            }
            if !seen.insert(s.sample_id.as_str()) {
                violations.push("sample_id: duplicated within dataset".into());
            }
            if !violations.is_empty() {
                return Err(Error::validation(
                    format!("sample `{}`", s.sample_id),
                    violations,
                ));
            }
        }
        for (key, value) in [
            ("n", dims.n),
            ("K", dims.k),
            ("h", dims.h),
            ("w", dims.w),
            ("c", dims.c),
        ] {
            metadata.insert(key.to_string(), serde_json::Value::from(value));
        }
        Ok(Self {
            split,
            dims,
            samples,
            metadata,
        })
    }

    /// Builds a dataset whose dims are taken from its first sample.
    pub fn from_samples(
        split: Split,
        samples: Vec<MultiRaterSample>,
        metadata: BTreeMap<String, serde_json::Value>,
    ) -> Result<Self> {
        let dims = samples.first().map(MultiRaterSample::dims).ok_or_else(|| {
            Error::Precondition("cannot infer dims from an empty sample list".into())
        })?;
        Self::new(split, dims, samples, metadata)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn samples(&self) -> &[MultiRaterSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, serde_json::Value> {
        &self.metadata
    }

    /// Sets a free-form metadata entry. The dimension keys are reserved.
    pub fn set_metadata(&mut self, key: &str, value: serde_json::Value) -> Result<()> {
        if ["n", "K", "h", "w", "c"].contains(&key) {
            return Err(Error::Precondition(format!(
                "metadata key `{key}` is derived from the samples"
            )));
        }
        self.metadata.insert(key.to_string(), value);
        Ok(())
    }

    pub fn get(&self, sample_id: &str) -> Option<&MultiRaterSample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// First `count` samples as a new dataset of the same split.
    pub fn truncated(&self, count: usize) -> Dataset {
        let mut d = self.clone();
        d.samples.truncate(count);
        d
    }

    /// Copy with every value rounded to the 16-bit storage grid.
    pub fn quantized(&self) -> Dataset {
        let mut d = self.clone();
        for s in &mut d.samples {
            s.image.mapv_inplace(quantize);
            s.masks.mapv_inplace(quantize);
        }
        d
    }
}

/// Rounds a `[0, 1]` value to the nearest 16-bit level.
pub fn quantize(v: f64) -> f64 {
    to_u16(v) as f64 / 65535.0
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Per-pixel, per-rater convex weights, `[n, K, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertnessMap {
    weights: Array4<f64>,
}

impl ExpertnessMap {
    pub fn new(weights: Array4<f64>) -> Result<Self> {
        let map = Self { weights };
        let violations = map.violations();
        if violations.is_empty() {
            Ok(map)
        } else {
            Err(Error::validation("expertness map", violations))
        }
    }

    pub(crate) fn new_unchecked(weights: Array4<f64>) -> Self {
        Self { weights }
    }

    /// Uniform `1/n` weights.
    pub fn uniform(n: usize, k: usize, h: usize, w: usize) -> Self {
        Self {
            weights: Array4::from_elem((n, k, h, w), 1.0 / n as f64),
        }
    }

    pub fn weights(&self) -> &Array4<f64> {
        &self.weights
    }

    pub fn into_weights(self) -> Array4<f64> {
        self.weights
    }

    pub fn raters(&self) -> usize {
        self.weights.dim().0
    }

    /// Worst deviation of a per-pixel rater sum from 1.
    pub fn max_simplex_error(&self) -> f64 {
        self.weights
            .sum_axis(Axis(0))
            .iter()
            .fold(0.0f64, |m, &s| m.max((s - 1.0).abs()))
    }

    /// Mean weight of each rater over all pixels and structures.
    pub fn mean_per_rater(&self) -> Vec<f64> {
        self.weights
            .outer_iter()
            .map(|r| r.mean().unwrap_or(0.0))
            .collect()
    }

    /// `[n][K]` mean weights.
    pub fn mean_per_rater_structure(&self) -> Vec<Vec<f64>> {
        self.weights
            .outer_iter()
            .map(|r| r.outer_iter().map(|s| s.mean().unwrap_or(0.0)).collect())
            .collect()
    }

    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(msg) = range_violation(self.weights.iter().copied()) {
            out.push(format!("weights: {msg}"));
        }
        let err = self.max_simplex_error();
        if !(err <= SIMPLEX_TOL) {
            out.push(format!(
                "weights: per-pixel rater sum deviates from 1 by {err:e}"
            ));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    MajorityVote,
    DfgtRaw,
    DfgtTransrob,
    DfgtFourier,
    DfgtExpg,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::MajorityVote => "majority_vote",
            Provenance::DfgtRaw => "dfgt_raw",
            Provenance::DfgtTransrob => "dfgt_transrob",
            Provenance::DfgtFourier => "dfgt_fourier",
            Provenance::DfgtExpg => "dfgt_expg",
        }
    }
}

/// Soft ground truth, `[K, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedLabel {
    pub values: Array3<f64>,
    pub provenance: Provenance,
}

impl FusedLabel {
    /// Largest excursion of the label outside the per-pixel `[min, max]` over raters.
    pub fn hull_violation(&self, masks: &Array4<f64>) -> f64 {
        let mut worst = 0.0f64;
        for ((k, y, x), &v) in self.values.indexed_iter() {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for r in 0..masks.dim().0 {
                let m = masks[[r, k, y, x]];
                lo = lo.min(m);
                hi = hi.max(m);
            }
            worst = worst.max(lo - v).max(v - hi);
        }
        worst
    }

    pub fn structure(&self, k: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), k)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

/// Per-epoch training log; epochs run 1, 2, 3, ...
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, mean_loss: f64, metrics: BTreeMap<String, f64>) {
        let epoch = self.records.len() + 1;
        self.records.push(EpochRecord {
            epoch,
            mean_loss,
            metrics,
        });
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_loss).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.epoch != i + 1 {
                return Err(Error::validation(
                    "train history",
                    vec![format!(
                        "record {i} has epoch {}, expected {}",
                        r.epoch,
                        i + 1
                    )],
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    h: usize,
    w: usize,
    c: usize,
    split: Split,
    metadata: BTreeMap<String, serde_json::Value>,
    samples: Vec<ManifestSample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSample {
    id: String,
    label: u8,
    image: String,
    /// `masks[structure][rater]`
    masks: Vec<Vec<String>>,
}

pub fn mask_file_name(sample_id: &str, structure: usize, rater: usize) -> String {
    format!("{sample_id}_s{structure}_r{rater}.png")
}

pub fn image_file_name(sample_id: &str) -> String {
    format!("{sample_id}.png")
}

/// Encodes a `[0, 1]` grid as a 16-bit grayscale PNG.
pub fn encode_gray16(plane: ArrayView2<f64>) -> Result<Vec<u8>> {
    let (h, w) = plane.dim();
    let buf: Vec<u16> = plane.iter().map(|&v| to_u16(v)).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer sized from grid");
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}

fn encode_image(image: &Array3<f64>) -> Result<Vec<u8>> {
    let (c, h, w) = image.dim();
    if c == 1 {
        return encode_gray16(image.index_axis(Axis(0), 0));
    }
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push(to_u16(image[[ch, y, x]]));
            }
        }
    }
    let img: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer sized from grid");
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}

/// Decodes a PNG into a `[c, h, w]` grid with values in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let c = if img.color().has_color() { 3 } else { 1 };
    let mut out = Array3::<f64>::zeros((c, h, w));
    if c == 1 {
        let g = img.to_luma16();
        for (x, y, p) in g.enumerate_pixels() {
            out[[0, y as usize, x as usize]] = p.0[0] as f64 / 65535.0;
        }
    } else {
        let rgb = img.to_rgb16();
        for (x, y, p) in rgb.enumerate_pixels() {
            for ch in 0..3 {
                out[[ch, y as usize, x as usize]] = p.0[ch] as f64 / 65535.0;
            }
        }
    }
    Ok(out)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the manifest last, via a temporary file, so a failed save never leaves a manifest behind.
pub(crate) fn write_manifest_atomically(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    write_file(&tmp, bytes)?;
    let dst = dir.join(name);
    fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dims = dataset.dims();
    let mut entries = Vec::with_capacity(dataset.len());
    for s in dataset.samples() {
        let image = image_file_name(&s.sample_id);
        write_file(&dir.join(&image), &encode_image(&s.image)?)?;
        let mut masks = Vec::with_capacity(dims.k);
        for k in 0..dims.k {
            let mut per_rater = Vec::with_capacity(dims.n);
            for r in 0..dims.n {
                let name = mask_file_name(&s.sample_id, k, r);
                let plane = s.masks.index_axis(Axis(0), r);
                write_file(
                    &dir.join(&name),
                    &encode_gray16(plane.index_axis(Axis(0), k))?,
                )?;
                per_rater.push(name);
            }
            masks.push(per_rater);
        }
        entries.push(ManifestSample {
            id: s.sample_id.clone(),
            label: s.label,
            image,
            masks,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        n: dims.n,
        k: dims.k,
        h: dims.h,
        w: dims.w,
        c: dims.c,
        split: dataset.split,
        metadata: dataset.metadata().clone(),
        samples: entries,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_manifest_atomically(dir, MANIFEST_FILE, &bytes)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::Format(format!(
            "missing {MANIFEST_FILE} in {}",
            dir.display()
        )));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "manifest version {} unsupported (expected {FORMAT_VERSION})",
            manifest.version
        )));
    }
    let dims = Dims {
        n: manifest.n,
        k: manifest.k,
        h: manifest.h,
        w: manifest.w,
        c: manifest.c,
    };
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let image = read_png(&dir.join(&entry.image))?;
        if entry.masks.len() != dims.k || entry.masks.iter().any(|m| m.len() != dims.n) {
            return Err(Error::validation(
                format!("sample `{}`", entry.id),
                vec![format!(
                    "masks: manifest must list {} x {} files",
                    dims.k, dims.n
                )],
            ));
        }
        let (mut mh, mut mw) = (0, 0);
        let mut planes = Vec::with_capacity(dims.k * dims.n);
        for files in &entry.masks {
            for f in files {
                let plane = read_png(&dir.join(f))?;
                let (pc, ph, pw) = plane.dim();
                if pc != 1 {
                    return Err(Error::validation(
                        format!("sample `{}`", entry.id),
                        vec![format!("masks: {f} must be single-channel")],
                    ));
                }
                (mh, mw) = (ph, pw);
                planes.push(plane);
            }
        }
        let (_, ih, iw) = image.dim();
        if (mh, mw) != (ih, iw) || planes.iter().any(|p| p.dim() != (1, mh, mw)) {
            return Err(Error::validation(
                format!("sample `{}`", entry.id),
                vec![format!(
                    "masks: spatial size {mh}x{mw} differs from image size {ih}x{iw}"
                )],
            ));
        }
        let mut masks = Array4::<f64>::zeros((dims.n, dims.k, mh, mw));
        for k in 0..dims.k {
            for r in 0..dims.n {
                masks
                    .index_axis_mut(Axis(0), r)
                    .index_axis_mut(Axis(0), k)
                    .assign(&planes[k * dims.n + r].index_axis(Axis(0), 0));
            }
        }
        samples.push(MultiRaterSample {
            sample_id: entry.id.clone(),
            image,
            masks,
            label: entry.label,
        });
    }
    Dataset::new(manifest.split, dims, samples, manifest.metadata)
}
