//! Evaluation harness: per-rater Dice, self-fusion Dice, diagnosis AUC of
//! predicted masks, and the fusion-strategy comparison, plus key-value report
//! files and simple PNG plots.
//!
//! Every Dice figure is computed per image and then averaged over the split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{write_file, Dataset, Split, TrainHistory};
use crate::dfgt::{build_dfgt, DFGTDataset, DFGTHyper, Method};
use crate::diagnet::DiagnosisNet;
use crate::error::{Error, Result};
use crate::fusion::majority_vote;
use crate::metrics::{auc, soft_dice, DEFAULT_THRESHOLDS};

pub const AGGREGATION: &str = "per-image soft Dice, then mean over images";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split: Split,
    pub thresholds: Vec<f64>,
    /// DF-GT variants scored next to majority vote.
    pub methods: Vec<Method>,
    pub output: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            methods: Method::ALL.to_vec(),
            output: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.thresholds.is_empty() {
            v.push("thresholds: must be nonempty".to_string());
        }
        for t in &self.thresholds {
            if !(*t > 0.0 && *t < 1.0) {
                v.push(format!("thresholds: {t} outside (0, 1)"));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::validation("eval config", v))
        }
    }
}

fn check_alignment(preds: usize, samples: usize) -> Result<()> {
    if preds != samples {
        return Err(Error::Shape(format!(
            "{preds} predictions for {samples} samples"
        )));
    }
    Ok(())
}

fn per_structure_dice(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    pred.outer_iter()
        .zip(target.outer_iter())
        .map(|(p, t)| soft_dice(p, t, thresholds))
        .collect()
}

/// Mean soft Dice of the predictions against each rater, `[n][K]`.
pub fn eval_against_raters(
    preds: &[Array3<f64>],
    dataset: &Dataset,
    thresholds: &[f64],
) -> Result<Vec<Vec<f64>>> {
    check_alignment(preds.len(), dataset.len())?;
    let dims = dataset.dims();
    let mut table = vec![vec![0.0; dims.k]; dims.n];
    for (pred, sample) in preds.iter().zip(dataset.samples()) {
        for (r, row) in table.iter_mut().enumerate() {
            let d = per_structure_dice(pred, &sample.rater_masks(r), thresholds)?;
            row.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
    }
    let inv = 1.0 / preds.len().max(1) as f64;
    table.iter_mut().flatten().for_each(|v| *v *= inv);
    Ok(table)
}

/// Mean soft Dice of the predictions against the fused labels, per structure.
pub fn eval_self_fusion(
    preds: &[Array3<f64>],
    targets: &[&Array3<f64>],
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    check_alignment(preds.len(), targets.len())?;
    let k = preds.first().map(|p| p.dim().0).unwrap_or(0);
    let mut acc = vec![0.0; k];
    for (p, t) in preds.iter().zip(targets) {
        let d = per_structure_dice(p, t, thresholds)?;
        acc.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / preds.len().max(1) as f64;
    Ok(acc.into_iter().map(|a| a * inv).collect())
}

/// Self-fusion targets for a DF-GT set, in dataset order.
pub fn dfgt_targets<'a>(dataset: &Dataset, dfgt: &'a DFGTDataset) -> Result<Vec<&'a Array3<f64>>> {
    dataset
        .samples()
        .iter()
        .map(|s| {
            dfgt.get(&s.sample_id)
                .map(|e| &e.label.values)
                .ok_or_else(|| {
                    Error::Precondition(format!("no fused label for sample {}", s.sample_id))
                })
        })
        .collect()
}

/// AUC of the frozen network's probabilities with the predicted masks as input.
pub fn eval_diagnosis(preds: &[Array3<f64>], dataset: &Dataset, net: &DiagnosisNet) -> Result<f64> {
    check_alignment(preds.len(), dataset.len())?;
    let scores = preds
        .iter()
        .zip(dataset.samples())
        .map(|(p, s)| net.predict(&s.image, p))
        .collect::<Result<Vec<_>>>()?;
    auc(&scores, &dataset.labels())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionRow {
    /// `majority_vote` or a DF-GT provenance tag.
    pub name: String,
    pub auc: f64,
    /// Mean soft Dice of the fused labels against majority vote, per structure.
    pub dice_vs_mv: Vec<f64>,
}

/// Scores already fused label sets. The majority-vote row comes first.
pub fn compare_labels(
    dataset: &Dataset,
    net: &DiagnosisNet,
    fused: &[(String, Vec<Array3<f64>>)],
    thresholds: &[f64],
) -> Result<Vec<FusionRow>> {
    if !net.is_frozen() {
        return Err(Error::Precondition(
            "the diagnosis network must be frozen".into(),
        ));
    }
    let mv: Vec<Array3<f64>> = dataset
        .samples()
        .iter()
        .map(|s| majority_vote(&s.masks).values)
        .collect();
    let mv_refs: Vec<&Array3<f64>> = mv.iter().collect();
    let mut rows = Vec::with_capacity(fused.len() + 1);
    rows.push(FusionRow {
        name: "majority_vote".into(),
        auc: eval_diagnosis(&mv, dataset, net)?,
        dice_vs_mv: eval_self_fusion(&mv, &mv_refs, thresholds)?,
    });
    for (name, labels) in fused {
        rows.push(FusionRow {
            name: name.clone(),
            auc: eval_diagnosis(labels, dataset, net)?,
            dice_vs_mv: eval_self_fusion(labels, &mv_refs, thresholds)?,
        });
    }
    Ok(rows)
}

/// Fused labels of a DF-GT set in dataset order.
pub fn dfgt_labels(dataset: &Dataset, dfgt: &DFGTDataset) -> Result<Vec<Array3<f64>>> {
    Ok(dfgt_targets(dataset, dfgt)?.into_iter().cloned().collect())
}

/// Builds DF-GT with every method on `dataset` and compares it with majority vote.
pub fn compare_fusions(
    dataset: &Dataset,
    net: &DiagnosisNet,
    methods: &[Method],
    base: &DFGTHyper,
    thresholds: &[f64],
) -> Result<Vec<FusionRow>> {
    let mut fused = Vec::with_capacity(methods.len());
    for &m in methods {
        let hyper = DFGTHyper {
            method: m,
            ..base.clone()
        };
        let d = build_dfgt(net, dataset, &hyper)?;
        fused.push((
            m.provenance().as_str().to_string(),
            dfgt_labels(dataset, &d)?,
        ));
    }
    compare_labels(dataset, net, &fused, thresholds)
}

/// Key-value report with a reproducibility header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub title: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub entries: BTreeMap<String, String>,
}

impl Report {
    pub fn new(title: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            config_hash: config_hash.into(),
            ..Self::default()
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.entries.insert(key.into(), value.to_string());
        self
    }

    pub fn insert_f64(&mut self, key: impl Into<String>, value: f64) -> &mut Self {
        self.insert(key, format!("{value:.6}"))
    }

    pub fn add_rater_table(&mut self, prefix: &str, table: &[Vec<f64>]) {
        for (r, row) in table.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                self.insert_f64(format!("{prefix}.rater{r}.s{k}"), *v);
            }
        }
    }

    pub fn add_fusion_rows(&mut self, prefix: &str, rows: &[FusionRow]) {
        for row in rows {
            self.insert_f64(format!("{prefix}.{}.auc", row.name), row.auc);
            for (k, d) in row.dice_vs_mv.iter().enumerate() {
                self.insert_f64(format!("{prefix}.{}.dice_vs_mv.s{k}", row.name), *d);
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.title);
        let _ = writeln!(s, "# aggregation: {AGGREGATION}");
        let _ = writeln!(s, "# config_hash: {}", self.config_hash);
        for (name, seed) in &self.seeds {
            let _ = writeln!(s, "# seed.{name}: {seed}");
        }
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_file(path, self.to_text().as_bytes())
    }

    /// Parses the body of a written report, ignoring header lines.
    pub fn parse_entries(text: &str) -> BTreeMap<String, String> {
        text.lines()
            .filter(|l| !l.starts_with('#'))
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}

const PALETTE: [[u8; 3]; 6] = [
    [90, 90, 90],
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
];

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: [u8; 3]) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, Rgb(c));
        }
    }
}

fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}

/// Bar chart of values in `[0, 1]`, one colored bar per entry in order, with
/// gridlines at every 0.1.
pub fn bar_chart_png(values: &[f64]) -> Result<Vec<u8>> {
    let (w, h, pad) = (40 + 50 * values.len() as u32, 240u32, 20u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let plot_h = h - 2 * pad;
    for i in 0..=10 {
        let y = h - pad - plot_h * i / 10;
        fill(&mut img, pad, y, w - pad, y + 1, [220, 220, 220]);
    }
    for (i, v) in values.iter().enumerate() {
        let bar = (v.clamp(0.0, 1.0) * plot_h as f64).round() as u32;
        let x0 = pad + 10 + 50 * i as u32;
        fill(
            &mut img,
            x0,
            h - pad - bar,
            x0 + 36,
            h - pad,
            PALETTE[i % PALETTE.len()],
        );
    }
    fill(&mut img, pad, h - pad, w - pad, h - pad + 1, [0, 0, 0]);
    encode_png(&img)
}

/// Loss curves on a shared axis scaled to the largest loss.
pub fn loss_curves_png(histories: &[&TrainHistory]) -> Result<Vec<u8>> {
    let (w, h, pad) = (400u32, 240u32, 20u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    fill(&mut img, pad, h - pad, w - pad, h - pad + 1, [0, 0, 0]);
    fill(&mut img, pad, pad, pad + 1, h - pad, [0, 0, 0]);
    let max_loss = histories
        .iter()
        .flat_map(|h| h.losses())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let max_epochs = histories.iter().map(|h| h.len()).max().unwrap_or(0);
    if max_loss <= 0.0 || max_epochs == 0 {
        return encode_png(&img);
    }
    let (pw, ph) = ((w - 2 * pad - 1) as f64, (h - 2 * pad - 1) as f64);
    for (i, hist) in histories.iter().enumerate() {
        let color = PALETTE[(i + 1) % PALETTE.len()];
        let pts: Vec<(f64, f64)> = hist
            .losses()
            .iter()
            .enumerate()
            .map(|(e, l)| {
                let x = pad as f64 + 1.0 + pw * e as f64 / (max_epochs - 1).max(1) as f64;
                let y = (h - pad) as f64 - 1.0 - ph * (l / max_loss).clamp(0.0, 1.0);
                (x, y)
            })
            .collect();
        for seg in pts.windows(2) {
            let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
            let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
            for t in 0..=steps {
                let f = t as f64 / steps as f64;
                let (x, y) = (x0 + (x1 - x0) * f, y0 + (y1 - y0) * f);
                fill(
                    &mut img,
                    x as u32,
                    y as u32,
                    x as u32 + 2,
                    y as u32 + 2,
                    color,
                );
            }
        }
        if let [(x, y)] = pts.as_slice() {
            fill(
                &mut img,
                *x as u32,
                *y as u32,
                *x as u32 + 3,
                *y as u32 + 3,
                color,
            );
        }
    }
    encode_png(&img)
}

/// Predicted structure `k` from every map.
pub fn structure_planes(preds: &[Array3<f64>], k: usize) -> Vec<ndarray::Array2<f64>> {
    preds
        .iter()
        .map(|p| p.index_axis(Axis(0), k).to_owned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{MultiRaterSample, Split};
    use crate::diagnet::{self, DiagConfig};
    use crate::nn::layers::Widths;
    use ndarray::Array4;

    fn toy_dataset() -> Dataset {
        let samples = (0..2)
            .map(|i| {
                let masks = Array4::from_shape_fn((3, 2, 4, 4), |(r, k, y, x)| {
                    (((r + k + i) * 3 + y * 4 + x) % 7) as f64 / 7.0
                });
                MultiRaterSample {
                    sample_id: format!("s{i}"),
                    image: Array3::from_shape_fn((1, 4, 4), |(_, y, x)| {
                        ((y + x + i) % 5) as f64 / 4.0
                    }),
                    masks,
                    label: i as u8,
                }
            })
            .collect();
        Dataset::from_samples(Split::Test, samples, BTreeMap::new()).unwrap()
    }

    fn net() -> DiagnosisNet {
        diagnet::build(DiagConfig {
            image_channels: 1,
            structures: 2,
            widths: Widths(vec![4, 4]),
            seed: 0,
        })
        .unwrap()
        .freeze()
    }

    #[test]
    fn config_thresholds_are_checked() {
        assert!(EvalConfig::default().validate().is_ok());
        for bad in [vec![], vec![0.0], vec![0.5, 1.0]] {
            let c = EvalConfig {
                thresholds: bad,
                ..EvalConfig::default()
            };
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn rater_table_matches_direct_metric_calls() {
        let d = toy_dataset();
        let preds: Vec<Array3<f64>> = d.samples().iter().map(|s| s.rater_masks(1)).collect();
        let t = eval_against_raters(&preds, &d, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.iter().all(|row| row.len() == 2));
        assert_eq!(t[1], vec![1.0, 1.0]);
        for r in [0, 2] {
            for k in 0..2 {
                let want = d
                    .samples()
                    .iter()
                    .zip(&preds)
                    .map(|(s, p)| {
                        soft_dice(
                            p.index_axis(Axis(0), k),
                            s.rater_masks(r).index_axis(Axis(0), k),
                            &DEFAULT_THRESHOLDS,
                        )
                        .unwrap()
                    })
                    .sum::<f64>()
                    / 2.0;
                assert!((t[r][k] - want).abs() < 1e-15);
            }
        }
        assert!(eval_against_raters(&preds[..1], &d, &DEFAULT_THRESHOLDS).is_err());
    }

    #[test]
    fn self_fusion_identity_and_disjoint() {
        let a = Array3::from_shape_fn((1, 4, 4), |(_, _, x)| if x < 2 { 1.0 } else { 0.0 });
        let b = a.mapv(|v| 1.0 - v);
        assert_eq!(
            eval_self_fusion(&[a.clone()], &[&a], &DEFAULT_THRESHOLDS).unwrap(),
            vec![1.0]
        );
        assert_eq!(
            eval_self_fusion(&[a.clone()], &[&b], &DEFAULT_THRESHOLDS).unwrap(),
            vec![0.0]
        );
        assert!(eval_self_fusion(&[a.clone(), a.clone()], &[&a], &DEFAULT_THRESHOLDS).is_err());
    }

    #[test]
    fn diagnosis_auc_is_well_defined_for_constant_maps() {
        let d = toy_dataset();
        let preds = vec![Array3::from_elem((2, 4, 4), 0.5); 2];
        let a = eval_diagnosis(&preds, &d, &net()).unwrap();
        assert!((0.0..=1.0).contains(&a));
        let single =
            Dataset::from_samples(Split::Test, d.samples()[..1].to_vec(), BTreeMap::new()).unwrap();
        assert!(matches!(
            eval_diagnosis(&preds[..1], &single, &net()),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn identical_raters_tie_every_method() {
        let base = toy_dataset();
        let samples = base
            .samples()
            .iter()
            .map(|s| {
                let one = s.masks.index_axis(Axis(0), 0).to_owned();
                let masks = ndarray::stack(Axis(0), &[one.view(), one.view(), one.view()]).unwrap();
                MultiRaterSample { masks, ..s.clone() }
            })
            .collect();
        let d = Dataset::from_samples(Split::Test, samples, BTreeMap::new()).unwrap();
        let hyper = DFGTHyper {
            steps: 3,
            ..DFGTHyper::default()
        };
        let rows = compare_fusions(&d, &net(), &Method::ALL, &hyper, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(rows[0].name, "majority_vote");
        assert_eq!(rows.len(), 5);
        for r in &rows[1..] {
            assert!((r.auc - rows[0].auc).abs() < 1e-6);
            assert!(r.dice_vs_mv.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn report_text_is_deterministic_and_parses() {
        let mut r = Report::new("eval", "abc123");
        r.seed("global", 7).insert_f64("x", 0.5).insert("n", 3);
        let text = r.to_text();
        assert!(text.contains("# config_hash: abc123"));
        assert!(text.contains(AGGREGATION));
        assert_eq!(text, r.clone().to_text());
        let kv = Report::parse_entries(&text);
        assert_eq!(kv["x"], "0.500000");
        assert_eq!(kv["n"], "3");
    }

    #[test]
    fn plots_decode_as_png() {
        let bars = bar_chart_png(&[0.2, 0.9, 1.3]).unwrap();
        let img = image::load_from_memory(&bars).unwrap();
        assert_eq!(img.height(), 240);
        let mut h = TrainHistory::new();
        for l in [1.0, 0.5, 0.25] {
            h.push(l, BTreeMap::new());
        }
        let curves = loss_curves_png(&[&h, &TrainHistory::new()]).unwrap();
        assert!(image::load_from_memory(&curves).is_ok());
        assert_eq!(
            curves,
            loss_curves_png(&[&h, &TrainHistory::new()]).unwrap()
        );
    }
}
