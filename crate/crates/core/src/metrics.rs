//! Evaluation quantities: thresholded soft Dice, rank AUC, the vertical
//! cup-to-disc ratio, and the spectral high-frequency energy fraction.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Reported vCDR values are clipped to this ceiling.
pub const VCDR_CLIP: f64 = 1.5;

/// Dice averaged over binarizations at each threshold. Foreground is `value > t`;
/// a threshold at which both binarizations are empty scores 1.
pub fn soft_dice(pred: ArrayView2<f64>, gt: ArrayView2<f64>, thresholds: &[f64]) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "soft_dice: prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if thresholds.is_empty() {
        return Err(Error::Precondition("soft_dice: no thresholds".into()));
    }
    let mut total = 0.0;
    for &t in thresholds {
        let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            let pa = p > t;
            let gb = g > t;
            a += pa as usize;
            b += gb as usize;
            inter += (pa && gb) as usize;
        }
        total += if a + b == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (a + b) as f64
        };
    }
    Ok(total / thresholds.len() as f64)
}

/// Mann-Whitney AUC: probability that a positive outranks a negative, ties counting half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes (got {pos} positive, {neg} negative)"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("auc: NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tie groups, in half-units to stay exact.
    let mut pos_rank_sum2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u64; // twice the mean 1-based rank of the group
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                pos_rank_sum2 += rank2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    let u2 = pos_rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / 2.0 / (p * n) as f64)
}

fn foreground_row_extent(mask: ArrayView2<f64>, threshold: f64) -> Option<usize> {
    let mut first = None;
    let mut last = 0;
    for (y, row) in mask.outer_iter().enumerate() {
        if row.iter().any(|&v| v > threshold) {
            first.get_or_insert(y);
            last = y;
        }
    }
    first.map(|f| last - f + 1)
}

/// Vertical extent of foreground rows in the cup over that of the disc, clipped to [`VCDR_CLIP`].
pub fn vcdr(cup: ArrayView2<f64>, disc: ArrayView2<f64>, threshold: f64) -> Result<f64> {
    if cup.dim() != disc.dim() {
        return Err(Error::Shape(format!(
            "vcdr: cup {:?} vs disc {:?}",
            cup.dim(),
            disc.dim()
        )));
    }
    let disc_extent = foreground_row_extent(disc, threshold)
        .ok_or_else(|| Error::UndefinedMetric("vcdr: empty disc".into()))?;
    let cup_extent = foreground_row_extent(cup, threshold).unwrap_or(0);
    Ok((cup_extent as f64 / disc_extent as f64).min(VCDR_CLIP))
}

/// 2-D DFT of a real grid.
pub(crate) fn fft2(map: ArrayView2<f64>) -> Array2<Complex<f64>> {
    let (h, w) = map.dim();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut data: Array2<Complex<f64>> = map.mapv(|v| Complex::new(v, 0.0));
    for mut row in data.rows_mut() {
        let mut buf: Vec<_> = row.to_vec();
        row_fft.process(&mut buf);
        row.assign(&ndarray::Array1::from(buf));
    }
    for mut col in data.columns_mut() {
        let mut buf: Vec<_> = col.to_vec();
        col_fft.process(&mut buf);
        col.assign(&ndarray::Array1::from(buf));
    }
    data
}

/// Normalized radial frequency of a DFT bin: 0 at DC, 1 at the Nyquist frequency along one axis.
pub(crate) fn radial_frequency(ky: usize, kx: usize, h: usize, w: usize) -> f64 {
    let fy = ky.min(h - ky) as f64 / h as f64;
    let fx = kx.min(w - kx) as f64 / w as f64;
    (fy * fy + fx * fx).sqrt() / 0.5
}

/// Fraction of the mean-subtracted map's spectral energy above `cutoff_fraction` of Nyquist.
pub fn high_freq_energy(map: ArrayView2<f64>, cutoff_fraction: f64) -> Result<f64> {
    let (h, w) = map.dim();
    if h < 4 || w < 4 {
        return Err(Error::Precondition(format!(
            "high_freq_energy needs at least 4x4, got {h}x{w}"
        )));
    }
    let mean = map.mean().unwrap_or(0.0);
    let centered = map.mapv(|v| v - mean);
    let spectrum = fft2(centered.view());
    let (mut total, mut high) = (0.0, 0.0);
    for ((ky, kx), c) in spectrum.indexed_iter() {
        let e = c.norm_sqr();
        total += e;
        if radial_frequency(ky, kx, h, w) > cutoff_fraction {
            high += e;
        }
    }
    // Round-off in a constant map leaves energies near 1e-30; treat as empty.
    let scale = map.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if total <= 1e-24 * scale * scale * (h * w) as f64 {
        return Ok(0.0);
    }
    Ok((high / total).clamp(0.0, 1.0))
}

/// Flat summary written by the report stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean soft Dice per structure.
    pub dice: Vec<f64>,
    pub auc: Option<f64>,
    pub vcdr: Option<Vec<f64>>,
    pub high_freq_fraction: Option<f64>,
    pub samples: usize,
}

impl MetricReport {
    pub fn to_key_values(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        for (k, d) in self.dice.iter().enumerate() {
            kv.insert(format!("dice.s{k}"), format!("{d:.6}"));
        }
        if let Some(a) = self.auc {
            kv.insert("auc".into(), format!("{a:.6}"));
        }
        if let Some(v) = &self.vcdr {
            let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
            kv.insert("vcdr.mean".into(), format!("{mean:.6}"));
            kv.insert("vcdr.count".into(), v.len().to_string());
        }
        if let Some(h) = self.high_freq_fraction {
            kv.insert("high_freq_fraction".into(), format!("{h:.6}"));
        }
        kv.insert("samples".into(), self.samples.to_string());
        kv
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_key_values() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
