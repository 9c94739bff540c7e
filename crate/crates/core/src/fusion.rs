//! Label-fusion algebra: softmax-normalized expertness, weighted fusion of
//! rater masks, and the majority-vote baseline.

use ndarray::{Array3, Array4, Axis};

use crate::data::{ExpertnessMap, FusedLabel, Provenance};
use crate::error::{Error, Result};
use crate::nn::kernels::softmax_lane;

/// Unconstrained per-pixel, per-rater scores, `[n, K, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertnessLogits {
    values: Array4<f64>,
}

impl ExpertnessLogits {
    pub fn new(values: Array4<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation(
                "expertness logits",
                vec![format!("values: non-finite entry {bad}")],
            ));
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize, k: usize, h: usize, w: usize) -> Self {
        Self {
            values: Array4::zeros((n, k, h, w)),
        }
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array4<f64> {
        self.values
    }
}

/// Softmax over the rater axis at every (structure, pixel).
pub fn normalize_expertness(logits: &ExpertnessLogits) -> ExpertnessMap {
    ExpertnessMap::new_unchecked(softmax_raters(logits.values.clone()))
}

pub(crate) fn softmax_raters(mut values: Array4<f64>) -> Array4<f64> {
    for lane in values.lanes_mut(Axis(0)) {
        softmax_lane(lane);
    }
    values
}

/// `sum_i masks_i * weights_i`, accumulated in rater order.
pub fn fuse(masks: &Array4<f64>, expertness: &ExpertnessMap) -> Result<FusedLabel> {
    fuse_with(masks, expertness.weights(), Provenance::DfgtRaw)
}

pub(crate) fn fuse_with(
    masks: &Array4<f64>,
    weights: &Array4<f64>,
    provenance: Provenance,
) -> Result<FusedLabel> {
    if masks.dim() != weights.dim() {
        return Err(Error::Shape(format!(
            "fuse: masks {:?} vs expertness {:?}",
            masks.dim(),
            weights.dim()
        )));
    }
    let (_, k, h, w) = masks.dim();
    let mut values = Array3::<f64>::zeros((k, h, w));
    for (m, wt) in masks.outer_iter().zip(weights.outer_iter()) {
        ndarray::Zip::from(&mut values)
            .and(&m)
            .and(&wt)
            .for_each(|acc, &s, &e| *acc += s * e);
    }
    Ok(FusedLabel { values, provenance })
}

/// Fusion under an expertness map, tagged with the given provenance.
pub fn fuse_as(
    masks: &Array4<f64>,
    expertness: &ExpertnessMap,
    provenance: Provenance,
) -> Result<FusedLabel> {
    fuse_with(masks, expertness.weights(), provenance)
}

/// Pixelwise mean over raters. Uses the same accumulation as [`fuse`] with
/// weights `1/n`, so uniform-expertness fusion reproduces it bit for bit.
pub fn majority_vote(masks: &Array4<f64>) -> FusedLabel {
    let (n, k, h, w) = masks.dim();
    let uniform = Array4::from_elem((n, k, h, w), 1.0 / n as f64);
    fuse_with(masks, &uniform, Provenance::MajorityVote).expect("shapes agree by construction")
}
