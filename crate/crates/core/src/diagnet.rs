//! Segmentation-assisted diagnosis classifier over `image ⊕ mask`.
//!
//! Four stride-2 residual blocks (64 -> 32 -> 16 -> 8 -> 4 at the default
//! size), global average pooling and a one-unit logistic head. Once
//! pretrained the network is frozen: it only supplies losses, input
//! gradients and per-block features.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array3, Array4, Axis, Ix3, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TrainHistory};
use crate::error::{Error, Result};
use crate::fusion::{majority_vote, ExpertnessLogits};
use crate::nn::checkpoint;
use crate::nn::kernels::{bce_with_logit, sigmoid};
use crate::nn::layers::{Dense, ResBlock, Widths};
use crate::nn::{Adam, ParamStore, Session, Tensor, Var};

pub const CHECKPOINT_KIND: &str = "diagnosis_net";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagConfig {
    pub image_channels: usize,
    pub structures: usize,
    #[serde(default)]
    pub widths: Widths,
    #[serde(default)]
    pub seed: u64,
}

impl DiagConfig {
    pub fn new(image_channels: usize, structures: usize, seed: u64) -> Self {
        Self {
            image_channels,
            structures,
            widths: Widths::default(),
            seed,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.image_channels + self.structures
    }

    fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.image_channels == 0 || self.structures == 0 {
            v.push("channels: image and structure counts must be positive".to_string());
        }
        if self.widths.0.is_empty() || self.widths.0.contains(&0) {
            v.push(format!(
                "widths: {:?} must be non-empty and positive",
                self.widths.0
            ));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::validation("diagnosis config", v))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DiagHyper {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr: 1e-4,
            seed: 0,
        }
    }
}

impl DiagHyper {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("batch_size: must be positive".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("lr: {} must be positive", self.lr));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::validation("diagnosis hyperparameters", v))
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiagnosisNet {
    config: DiagConfig,
    store: ParamStore,
    blocks: Vec<ResBlock>,
    head: Dense,
    frozen: bool,
}

impl PartialEq for DiagnosisNet {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.frozen == other.frozen
            && self.store.digest() == other.store.digest()
    }
}

fn layout(config: &DiagConfig, rng: &mut ChaCha8Rng) -> (ParamStore, Vec<ResBlock>, Dense) {
    let mut store = ParamStore::new();
    let mut cin = config.input_channels();
    let mut blocks = Vec::with_capacity(config.widths.0.len());
    for (i, &w) in config.widths.0.iter().enumerate() {
        blocks.push(ResBlock::new(
            &mut store,
            rng,
            &format!("block{}", i + 1),
            cin,
            w,
        ));
        cin = w;
    }
    let head = Dense::new(&mut store, rng, "head", cin, 1, true, 1.0);
    (store, blocks, head)
}

/// Deterministic initialization from `config.seed`.
pub fn build(config: DiagConfig) -> Result<DiagnosisNet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (store, blocks, head) = layout(&config, &mut rng);
    Ok(DiagnosisNet {
        config,
        store,
        blocks,
        head,
        frozen: false,
    })
}

impl DiagnosisNet {
    pub fn config(&self) -> &DiagConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// SHA-256 of the parameters.
    pub fn digest(&self) -> String {
        self.store.digest()
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Channel count of each block's output.
    pub fn block_widths(&self) -> &[usize] {
        &self.config.widths.0
    }

    /// Records the network on `s`. Returns the pre-sigmoid logit (`[1, 1]`) and each block's output.
    pub fn forward(&self, s: &mut Session, x: Var) -> (Var, Vec<Var>) {
        let mut h = x;
        let mut features = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.forward(s, h);
            features.push(h);
        }
        let pooled = s.tape.global_avg_pool(h);
        let width = s.tape.value(pooled).len();
        let row = s.tape.reshape(pooled, &[1, width]);
        (self.head.forward(s, row), features)
    }

    fn check_inputs(&self, image: &Array3<f64>, mask: &Array3<f64>) -> Result<()> {
        let (c, h, w) = image.dim();
        let (k, mh, mw) = mask.dim();
        if c != self.config.image_channels || k != self.config.structures || (h, w) != (mh, mw) {
            return Err(Error::Shape(format!(
                "diagnosis net expects image [{}, h, w] and mask [{}, h, w], got {:?} and {:?}",
                self.config.image_channels,
                self.config.structures,
                image.dim(),
                mask.dim()
            )));
        }
        Ok(())
    }

    fn input(&self, image: &Array3<f64>, mask: &Array3<f64>) -> Result<Tensor> {
        self.check_inputs(image, mask)?;
        Ok(ndarray::concatenate(Axis(0), &[image.view(), mask.view()])
            .expect("spatial sizes checked")
            .into_dyn())
    }

    pub fn predict_logit(&self, image: &Array3<f64>, mask: &Array3<f64>) -> Result<f64> {
        let x = self.input(image, mask)?;
        let mut s = Session::new(&self.store, false);
        let x = s.tape.constant(x);
        let (logit, _) = self.forward(&mut s, x);
        Ok(s.tape.scalar(logit))
    }

    /// Disease probability for `image` `[c, h, w]` and `mask` `[K, h, w]`.
    pub fn predict(&self, image: &Array3<f64>, mask: &Array3<f64>) -> Result<f64> {
        self.predict_logit(image, mask).map(sigmoid)
    }

    /// Binary cross-entropy of the prediction against `label`.
    pub fn loss(&self, image: &Array3<f64>, mask: &Array3<f64>, label: u8) -> Result<f64> {
        self.predict_logit(image, mask)
            .map(|z| bce_with_logit(z, label as f64))
    }

    /// Each block's output, `[C_k, H_k, W_k]`; spatial size halves per block.
    pub fn feature_maps(
        &self,
        image: &Array3<f64>,
        mask: &Array3<f64>,
    ) -> Result<Vec<Array3<f64>>> {
        let x = self.input(image, mask)?;
        let mut s = Session::new(&self.store, false);
        let x = s.tape.constant(x);
        let (_, features) = self.forward(&mut s, x);
        Ok(features
            .into_iter()
            .map(|f| {
                s.tape
                    .value(f)
                    .clone()
                    .into_dimensionality::<Ix3>()
                    .expect("block outputs are 3-D")
            })
            .collect())
    }

    /// Diagnosis loss of `image ⊕ fuse(masks, softmax(logits))` and its gradient
    /// with respect to the logits. The parameters enter as constants.
    pub fn loss_and_grad(
        &self,
        image: &Array3<f64>,
        masks: &Array4<f64>,
        logits: &ExpertnessLogits,
        label: u8,
    ) -> Result<(f64, Array4<f64>)> {
        if !self.frozen {
            return Err(Error::Precondition(
                "loss_and_grad requires a frozen network".into(),
            ));
        }
        let (_, k, h, w) = masks.dim();
        if logits.values().dim() != masks.dim() {
            return Err(Error::Shape(format!(
                "logits {:?} vs masks {:?}",
                logits.values().dim(),
                masks.dim()
            )));
        }
        self.check_inputs(image, &Array3::zeros((k, h, w)))?;
        let mut s = Session::new(&self.store, false);
        let z = s.tape.leaf(logits.values().clone().into_dyn());
        let (loss, _) = self.fused_loss(&mut s, image, masks, z, label);
        let value = s.tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numerical {
                step: 0,
                detail: format!("non-finite diagnosis loss {value}"),
            });
        }
        let mut grads = s.tape.backward(loss);
        let g = grads
            .take(z)
            .expect("logits are a differentiable leaf")
            .into_dimensionality()
            .expect("gradient matches logits");
        Ok((value, g))
    }

    /// Records `BCE(net(image ⊕ Σ_i masks_i · softmax(z)_i), label)` on the session.
    /// `z` holds `[n, K, h, w]` logits. Returns the loss and the fused label node.
    pub fn fused_loss(
        &self,
        s: &mut Session,
        image: &Array3<f64>,
        masks: &Array4<f64>,
        z: Var,
        label: u8,
    ) -> (Var, Var) {
        let weights = s.tape.softmax(z, 0);
        let m = s.tape.constant(masks.clone().into_dyn());
        let weighted = s.tape.mul(weights, m);
        let fused = s.tape.sum_axis0(weighted);
        let img = s.tape.constant(image.clone().into_dyn());
        let x = s.tape.concat0(&[img, fused]);
        let (logit, _) = self.forward(s, x);
        let target = Arc::new(Tensor::from_elem(IxDyn(&[1, 1]), label as f64));
        (s.tape.bce_with_logits(logit, target), fused)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "config": self.config, "frozen": self.frozen });
        checkpoint::write(path, CHECKPOINT_KIND, &meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store) = checkpoint::read(path, CHECKPOINT_KIND)?;
        Self::from_checkpoint(meta, store)
    }

    pub fn from_checkpoint(meta: serde_json::Value, store: ParamStore) -> Result<Self> {
        let config: DiagConfig = serde_json::from_value(meta["config"].clone())?;
        let frozen = meta["frozen"].as_bool().unwrap_or(false);
        let mut net = build(config)?;
        if net.store.names() != store.names()
            || net
                .store
                .iter()
                .zip(store.iter())
                .any(|((_, a), (_, b))| a.shape() != b.shape())
        {
            return Err(Error::Format(
                "checkpoint parameters do not match the declared architecture".into(),
            ));
        }
        net.store = store;
        net.frozen = frozen;
        Ok(net)
    }
}

/// Fits the network with BCE on `image ⊕ majority_vote(masks)` and returns it frozen.
pub fn pretrain(
    net: DiagnosisNet,
    dataset: &Dataset,
    hyper: &DiagHyper,
) -> Result<(DiagnosisNet, TrainHistory)> {
    hyper.validate()?;
    if net.frozen {
        return Err(Error::Precondition(
            "pretrain requires an unfrozen network".into(),
        ));
    }
    let labels = dataset.labels();
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Precondition(format!(
            "pretraining needs both classes; split has {positives} positive of {}",
            labels.len()
        )));
    }
    let dims = dataset.dims();
    if dims.c != net.config.image_channels || dims.k != net.config.structures {
        return Err(Error::Shape(format!(
            "dataset has c={}, K={} but the network expects c={}, K={}",
            dims.c, dims.k, net.config.image_channels, net.config.structures
        )));
    }
    let inputs: Vec<(Tensor, Arc<Tensor>)> = dataset
        .samples()
        .iter()
        .map(|s| {
            let mv = majority_vote(&s.masks).values;
            let x = net.input(&s.image, &mv)?;
            Ok((
                x,
                Arc::new(Tensor::from_elem(IxDyn(&[1, 1]), s.label as f64)),
            ))
        })
        .collect::<Result<_>>()?;

    let mut net = net;
    let mut history = TrainHistory::new();
    let mut adam = Adam::new(hyper.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let mut total: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (x, target) = &inputs[i];
                let mut s = Session::new(&net.store, true);
                let x = s.tape.constant(x.clone());
                let (logit, _) = net.forward(&mut s, x);
                let loss = s.tape.bce_with_logits(logit, target.clone());
                let value = s.tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Numerical {
                        step: epoch,
                        detail: format!("non-finite pretraining loss on sample {i}"),
                    });
                }
                epoch_loss += value;
                let mut grads = s.tape.backward(loss);
                let g = s.param_grads(&mut grads);
                match &mut total {
                    None => total = Some(g),
                    Some(t) => t.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                }
            }
            let mut g = total.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            g.iter_mut().for_each(|t| t.mapv_inplace(|v| v * scale));
            adam.step(net.store.tensors_mut(), &g);
        }
        history.push(epoch_loss / inputs.len() as f64, Default::default());
    }
    Ok((net.freeze(), history))
}
