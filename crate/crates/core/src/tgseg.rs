//! Take-and-Give segmentation network.
//!
//! A residual encoder-decoder whose decoder is bridged to a frozen diagnosis
//! network. At each connected block the Give module lets encoder patches
//! attend over diagnosis patches; the Take module lets the result attend over
//! decoder patches, and its output is added back into the decoder feature
//! before the transposed-convolution upsampling.
//!
//! The diagnosis network needs a mask input. It receives a stop-gradient
//! coarse prediction from an auxiliary 1x1 head on the first encoder block
//! (or zeros, if configured), which is trained with its own BCE term.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3, Axis, Ix3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TrainHistory};
use crate::dfgt::DFGTDataset;
use crate::diagnet::DiagnosisNet;
use crate::error::{Error, Result};
use crate::nn::checkpoint;
use crate::nn::layers::{Conv2d, Deconv2x, Dense, ResBlock, Widths};
use crate::nn::{Adam, ParamStore, Session, Tensor, Var};

pub const CHECKPOINT_KIND: &str = "tg_seg_net";
/// Upper bound on the number of patches per attention sequence.
pub const MAX_PATCHES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagMaskInput {
    /// The auxiliary head's coarse prediction, with gradients stopped.
    Coarse,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub image_channels: usize,
    pub structures: usize,
    pub h: usize,
    pub w: usize,
    #[serde(default)]
    pub widths: Widths,
    /// 1-based encoder blocks bridged to the diagnosis network.
    pub connected: BTreeSet<usize>,
    /// Common channel width of the projected features at each block.
    pub bridge_widths: Vec<usize>,
    pub heads: usize,
    pub diag_mask: DiagMaskInput,
    pub seed: u64,
}

impl SegConfig {
    pub fn new(image_channels: usize, structures: usize, h: usize, w: usize, seed: u64) -> Self {
        Self {
            image_channels,
            structures,
            h,
            w,
            widths: Widths::default(),
            connected: [1, 2, 3].into_iter().collect(),
            bridge_widths: vec![8, 16, 32, 64],
            heads: 4,
            diag_mask: DiagMaskInput::Coarse,
            seed,
        }
    }

    pub fn with_blocks(mut self, blocks: &[usize]) -> Self {
        self.connected = blocks.iter().copied().collect();
        self
    }

    /// Spatial size of block `k` (1-based) output.
    pub fn block_size(&self, k: usize) -> (usize, usize) {
        (self.h >> k, self.w >> k)
    }

    /// Smallest power-of-two patch with at most [`MAX_PATCHES`] patches at block `k`.
    pub fn patch_size(&self, k: usize) -> usize {
        let (h, w) = self.block_size(k);
        let mut p = 1;
        while (h / p) * (w / p) > MAX_PATCHES && h % (2 * p) == 0 && w % (2 * p) == 0 {
            p *= 2;
        }
        p
    }

    pub fn validate(&self, diag: &DiagnosisNet) -> Result<()> {
        let mut v = Vec::new();
        let blocks = self.widths.0.len();
        if blocks == 0 {
            v.push("widths: at least one block".to_string());
        }
        let scale = 1usize << blocks;
        if self.h % scale != 0 || self.w % scale != 0 {
            v.push(format!(
                "h, w: {}x{} must be divisible by {scale}",
                self.h, self.w
            ));
        }
        for &k in &self.connected {
            if k == 0 || k > blocks {
                v.push(format!("connected: block {k} outside 1..={blocks}"));
                continue;
            }
            let cb = self.bridge_widths.get(k - 1).copied().unwrap_or(0);
            if cb == 0 {
                v.push(format!("bridge_widths: missing width for block {k}"));
                continue;
            }
            let p = self.patch_size(k);
            let d = p * p * cb;
            if self.heads == 0 || d % self.heads != 0 {
                v.push(format!(
                    "heads: {} must divide the token width {d} of block {k}",
                    self.heads
                ));
            }
        }
        if !self.connected.is_empty() {
            let dc = diag.config();
            if dc.image_channels != self.image_channels || dc.structures != self.structures {
                v.push(
                    "diagnosis network channel layout differs from the segmentation config".into(),
                );
            }
            if dc.widths.0.len() < self.connected.iter().max().copied().unwrap_or(0) {
                v.push("diagnosis network has fewer blocks than the connected set needs".into());
            }
            if !diag.is_frozen() {
                v.push("diagnosis network must be frozen".into());
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::validation("segmentation config", v))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight of the auxiliary coarse-head BCE term.
    pub aux_weight: f64,
}

impl Default for SegHyper {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 16,
            lr: 1e-4,
            seed: 0,
            aux_weight: 1.0,
        }
    }
}

impl SegHyper {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("batch_size: must be positive".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("lr: {} must be positive", self.lr));
        }
        if !(self.aux_weight >= 0.0) {
            v.push("aux_weight: must be non-negative".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::validation("segmentation hyperparameters", v))
        }
    }
}

/// Multi-head attention weights: query, key, value and output maps.
#[derive(Clone, Debug)]
pub struct AttnParams {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub merge: Dense,
    pub heads: usize,
    pub width: usize,
}

impl AttnParams {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Self {
        let mk = |store: &mut ParamStore, rng: &mut R, part: &str| {
            Dense::new(
                store,
                rng,
                &format!("{name}.{part}"),
                width,
                width,
                true,
                1.0,
            )
        };
        Self {
            q: mk(store, rng, "q"),
            k: mk(store, rng, "k"),
            v: mk(store, rng, "v"),
            merge: mk(store, rng, "merge"),
            heads,
            width,
        }
    }
}

/// `MLP(f) = GELU(f W1) W2`, without biases.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: Dense,
    pub w2: Dense,
}

impl Mlp {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
    ) -> Self {
        Self {
            w1: Dense::new(
                store,
                rng,
                &format!("{name}.w1"),
                width,
                width,
                false,
                2f64.sqrt(),
            ),
            w2: Dense::new(store, rng, &format!("{name}.w2"), width, width, false, 1.0),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.w1.forward(s, x);
        let h = s.tape.gelu(h);
        self.w2.forward(s, h)
    }
}

/// Attention output and the per-head affinity matrices `[N_q, N_k]`.
pub struct AttnOut {
    pub out: Var,
    pub affinities: Vec<Var>,
}

/// `softmax(q(Q) k(K)^T / sqrt(d)) v(V)` per head, heads concatenated and merged.
/// `d` is the full token width.
pub fn attention(
    s: &mut Session,
    p: &AttnParams,
    query: Var,
    key: Var,
    value: Var,
) -> Result<AttnOut> {
    let widths = [query, key, value].map(|v| s.tape.value(v).shape().to_vec());
    for w in &widths {
        if w.len() != 2 || w[1] != p.width {
            return Err(Error::Shape(format!(
                "attention expects [N, {}] sequences, got {:?}",
                p.width, widths
            )));
        }
    }
    if widths[1][0] != widths[2][0] {
        return Err(Error::Shape(format!(
            "attention key and value lengths differ: {} vs {}",
            widths[1][0], widths[2][0]
        )));
    }
    if p.heads == 0 || p.width % p.heads != 0 {
        return Err(Error::Shape(format!(
            "{} heads do not divide width {}",
            p.heads, p.width
        )));
    }
    let q = p.q.forward(s, query);
    let k = p.k.forward(s, key);
    let v = p.v.forward(s, value);
    let dh = p.width / p.heads;
    let scale = 1.0 / (p.width as f64).sqrt();
    let mut outs = Vec::with_capacity(p.heads);
    let mut affinities = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qh = s.tape.slice_cols(q, a, b);
        let kh = s.tape.slice_cols(k, a, b);
        let vh = s.tape.slice_cols(v, a, b);
        let kt = s.tape.transpose(kh);
        let scores = s.tape.matmul(qh, kt);
        let scores = s.tape.scale(scores, scale);
        let aff = s.tape.softmax(scores, 1);
        outs.push(s.tape.matmul(aff, vh));
        affinities.push(aff);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        s.tape.concat_cols(&outs)
    };
    Ok(AttnOut {
        out: p.merge.forward(s, cat),
        affinities,
    })
}

/// Fixed 2-D sinusoidal encoding of the patch grid, `[N, P*P*C]`.
/// The first half of each vector encodes the patch row, the second half the column.
pub fn positional_encoding(h: usize, w: usize, c: usize, p: usize) -> Result<Array2<f64>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!(
            "patch size {p} does not divide {h}x{w}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let d = p * p * c;
    let half = d / 2;
    let enc = |pos: usize, j: usize, span: usize| -> f64 {
        let pair = j / 2;
        let freq = 1.0 / 10000f64.powf(2.0 * pair as f64 / span.max(1) as f64);
        let angle = pos as f64 * freq;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    };
    Ok(Array2::from_shape_fn((gh * gw, d), |(n, j)| {
        let (gy, gx) = (n / gw, n % gw);
        if j < half {
            enc(gy, j, half)
        } else {
            enc(gx, j - half, d - half)
        }
    }))
}

/// Give and Take parameters plus channel projections for one connected block.
#[derive(Clone, Debug)]
pub struct Bridge {
    pub block: usize,
    pub patch: usize,
    pub bridge_width: usize,
    pub proj_enc: Conv2d,
    pub proj_diag: Conv2d,
    pub proj_dec: Conv2d,
    pub back: Conv2d,
    pub give_attn: AttnParams,
    pub give_mlp: Mlp,
    pub take_attn: AttnParams,
    pub take_mlp: Mlp,
    pub encoding: Arc<Tensor>,
}

impl Bridge {
    pub fn token_width(&self) -> usize {
        self.patch * self.patch * self.bridge_width
    }

    /// Parameter-name prefixes owned by the Give and Take modules.
    pub fn prefixes(&self) -> [String; 2] {
        [
            format!("b{}.give", self.block),
            format!("b{}.take", self.block),
        ]
    }
}

fn add_encoding(s: &mut Session, x: Var, e: &Arc<Tensor>) -> Var {
    let e = s.tape.shared(e.clone(), false);
    s.tape.add(x, e)
}

/// `MLP(Attention(f_se + E, f_d + E, f_d))` on patched, projected features.
pub fn give_module(s: &mut Session, b: &Bridge, enc_seq: Var, diag_seq: Var) -> Result<Var> {
    let q = add_encoding(s, enc_seq, &b.encoding);
    let k = add_encoding(s, diag_seq, &b.encoding);
    let a = attention(s, &b.give_attn, q, k, diag_seq)?;
    Ok(b.give_mlp.forward(s, a.out))
}

/// `MLP(Attention(f̂_d + E, f_sd + E, f_sd))` on patched features; returns the
/// attention result too, for inspection.
pub fn take_tokens(
    s: &mut Session,
    b: &Bridge,
    given: Var,
    dec_seq: Var,
) -> Result<(Var, AttnOut)> {
    let q = add_encoding(s, given, &b.encoding);
    let k = add_encoding(s, dec_seq, &b.encoding);
    let a = attention(s, &b.take_attn, q, k, dec_seq)?;
    let out = b.take_mlp.forward(s, a.out);
    Ok((out, a))
}

/// Take module followed by upsampling: the Take tokens are unpatchified,
/// projected back to the decoder width and added to the decoder feature,
/// which `up` then doubles in size.
pub fn take_module(
    s: &mut Session,
    b: &Bridge,
    given: Var,
    dec_feature: Var,
    up: &Deconv2x,
) -> Result<Var> {
    let dec_proj = b.proj_dec.forward(s, dec_feature);
    let dec_seq = s.tape.patchify(dec_proj, b.patch);
    let (tokens, _) = take_tokens(s, b, given, dec_seq)?;
    let shape = s.tape.value(dec_proj).shape().to_vec();
    let grid = s
        .tape
        .unpatchify(tokens, b.patch, shape[0], shape[1], shape[2]);
    let back = b.back.forward(s, grid);
    let merged = s.tape.add(dec_feature, back);
    Ok(up.forward(s, merged))
}

#[derive(Clone, Debug)]
pub struct TGSegNet {
    config: SegConfig,
    store: ParamStore,
    encoder: Vec<ResBlock>,
    aux: Option<Conv2d>,
    bridges: BTreeMap<usize, Bridge>,
    ups: Vec<Deconv2x>,
    merges: Vec<Conv2d>,
    head: Conv2d,
    diag: Arc<DiagnosisNet>,
}

fn layout(
    config: &SegConfig,
    diag: &DiagnosisNet,
) -> Result<(
    ParamStore,
    Vec<ResBlock>,
    Option<Conv2d>,
    BTreeMap<usize, Bridge>,
    Vec<Deconv2x>,
    Vec<Conv2d>,
    Conv2d,
)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let widths = &config.widths.0;
    let mut encoder = Vec::with_capacity(widths.len());
    let mut cin = config.image_channels;
    for (i, &w) in widths.iter().enumerate() {
        encoder.push(ResBlock::new(
            &mut store,
            &mut rng,
            &format!("enc{}", i + 1),
            cin,
            w,
        ));
        cin = w;
    }
    let aux =
        (!config.connected.is_empty() && config.diag_mask == DiagMaskInput::Coarse).then(|| {
            Conv2d::new(
                &mut store,
                &mut rng,
                "aux",
                widths[0],
                config.structures,
                1,
                1,
                1.0,
            )
        });
    let mut bridges = BTreeMap::new();
    for &k in &config.connected {
        let cb = config.bridge_widths[k - 1];
        let wk = widths[k - 1];
        let dk = diag.block_widths()[k - 1];
        let p = config.patch_size(k);
        let d = p * p * cb;
        let (hk, wk_sp) = config.block_size(k);
        let name = format!("b{k}");
        bridges.insert(
            k,
            Bridge {
                block: k,
                patch: p,
                bridge_width: cb,
                proj_enc: Conv2d::new(
                    &mut store,
                    &mut rng,
                    &format!("{name}.proj_enc"),
                    wk,
                    cb,
                    1,
                    1,
                    1.0,
                ),
                proj_diag: Conv2d::new(
                    &mut store,
                    &mut rng,
                    &format!("{name}.proj_diag"),
                    dk,
                    cb,
                    1,
                    1,
                    1.0,
                ),
                proj_dec: Conv2d::new(
                    &mut store,
                    &mut rng,
                    &format!("{name}.proj_dec"),
                    wk,
                    cb,
                    1,
                    1,
                    1.0,
                ),
                back: Conv2d::new(
                    &mut store,
                    &mut rng,
                    &format!("{name}.back"),
                    cb,
                    wk,
                    1,
                    1,
                    0.5,
                ),
                give_attn: AttnParams::new(
                    &mut store,
                    &mut rng,
                    &format!("{name}.give.attn"),
                    d,
                    config.heads,
                ),
                give_mlp: Mlp::new(&mut store, &mut rng, &format!("{name}.give.mlp"), d),
                take_attn: AttnParams::new(
                    &mut store,
                    &mut rng,
                    &format!("{name}.take.attn"),
                    d,
                    config.heads,
                ),
                take_mlp: Mlp::new(&mut store, &mut rng, &format!("{name}.take.mlp"), d),
                encoding: Arc::new(positional_encoding(hk, wk_sp, cb, p)?.into_dyn()),
            },
        );
    }
    // Decoder level k upsamples block k's feature to block k-1's size.
    let mut ups = Vec::with_capacity(widths.len());
    let mut merges = Vec::with_capacity(widths.len());
    for k in (1..=widths.len()).rev() {
        let from = widths[k - 1];
        let to = if k >= 2 { widths[k - 2] } else { widths[0] };
        let skip = if k >= 2 {
            widths[k - 2]
        } else {
            config.image_channels
        };
        ups.push(Deconv2x::new(
            &mut store,
            &mut rng,
            &format!("dec{k}.up"),
            from,
            to,
        ));
        merges.push(Conv2d::new(
            &mut store,
            &mut rng,
            &format!("dec{k}.merge"),
            to + skip,
            to,
            3,
            1,
            2f64.sqrt(),
        ));
    }
    let head = Conv2d::new(
        &mut store,
        &mut rng,
        "head",
        widths[0],
        config.structures,
        1,
        1,
        1.0,
    );
    Ok((store, encoder, aux, bridges, ups, merges, head))
}

/// Deterministic initialization from `config.seed`, bridged to the frozen `diag`.
pub fn build(config: SegConfig, diag: Arc<DiagnosisNet>) -> Result<TGSegNet> {
    config.validate(&diag)?;
    let (store, encoder, aux, bridges, ups, merges, head) = layout(&config, &diag)?;
    Ok(TGSegNet {
        config,
        store,
        encoder,
        aux,
        bridges,
        ups,
        merges,
        head,
        diag,
    })
}

/// Nodes of one forward pass.
pub struct Forward {
    /// Pre-sigmoid output `[K, h, w]`.
    pub logits: Var,
    /// Upsampled coarse-head logits, when the coarse head exists.
    pub aux_logits: Option<Var>,
}

impl TGSegNet {
    pub fn config(&self) -> &SegConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn diagnosis(&self) -> &Arc<DiagnosisNet> {
        &self.diag
    }

    /// Upsampler of decoder level `k`, which doubles block `k`'s feature size.
    pub fn upsampler(&self, k: usize) -> &Deconv2x {
        &self.ups[self.config.widths.0.len() - k]
    }

    pub fn bridges(&self) -> &BTreeMap<usize, Bridge> {
        &self.bridges
    }

    fn check_image(&self, image: &Array3<f64>) -> Result<()> {
        let want = (self.config.image_channels, self.config.h, self.config.w);
        if image.dim() != want {
            return Err(Error::Shape(format!(
                "image {:?}, expected {want:?}",
                image.dim()
            )));
        }
        Ok(())
    }

    /// Records the network on `s`, which must be bound to this net's parameters.
    pub fn forward_on(&self, s: &mut Session, image: &Array3<f64>) -> Result<Forward> {
        self.check_image(image)?;
        let x = s.tape.constant(image.clone().into_dyn());
        let mut enc = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for block in &self.encoder {
            h = block.forward(s, h);
            enc.push(h);
        }
        let aux_logits = self.aux.as_ref().map(|aux| {
            let coarse = aux.forward(s, enc[0]);
            s.tape.upsample2x(coarse)
        });
        let diag_features = if self.bridges.is_empty() {
            Vec::new()
        } else {
            let (k, hh, ww) = (self.config.structures, self.config.h, self.config.w);
            let mask = match aux_logits {
                Some(a) => s
                    .tape
                    .value(a)
                    .mapv(crate::nn::kernels::sigmoid)
                    .into_dimensionality::<Ix3>()
                    .expect("3-D"),
                None => Array3::zeros((k, hh, ww)),
            };
            self.diag.feature_maps(image, &mask)?
        };
        let blocks = self.encoder.len();
        let mut d = enc[blocks - 1];
        for (i, k) in (1..=blocks).rev().enumerate() {
            let up = &self.ups[i];
            let upsampled = match self.bridges.get(&k) {
                Some(b) => {
                    let e = b.proj_enc.forward(s, enc[k - 1]);
                    let e = s.tape.patchify(e, b.patch);
                    let f = s.tape.constant(diag_features[k - 1].clone().into_dyn());
                    let f = b.proj_diag.forward(s, f);
                    let f = s.tape.patchify(f, b.patch);
                    let given = give_module(s, b, e, f)?;
                    take_module(s, b, given, d, up)?
                }
                None => up.forward(s, d),
            };
            let skip = if k >= 2 { enc[k - 2] } else { x };
            let cat = s.tape.concat0(&[upsampled, skip]);
            let merged = self.merges[i].forward(s, cat);
            d = s.tape.gelu(merged);
        }
        Ok(Forward {
            logits: self.head.forward(s, d),
            aux_logits,
        })
    }

    /// Per-structure probabilities `[K, h, w]`.
    pub fn forward(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        let mut s = Session::new(&self.store, false);
        let f = self.forward_on(&mut s, image)?;
        let y = s.tape.sigmoid(f.logits);
        Ok(s.tape
            .value(y)
            .clone()
            .into_dimensionality()
            .expect("3-D output"))
    }

    pub fn predict_dataset(&self, dataset: &Dataset) -> Result<Vec<Array3<f64>>> {
        dataset
            .samples()
            .iter()
            .map(|s| self.forward(&s.image))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.config,
            "diagnosis_digest": self.diag.digest(),
        });
        checkpoint::write(path, CHECKPOINT_KIND, &meta, &self.store)
    }

    /// Loads a checkpoint; `diag` must be the network it was trained against.
    pub fn load(path: &Path, diag: Arc<DiagnosisNet>) -> Result<Self> {
        let (meta, store) = checkpoint::read(path, CHECKPOINT_KIND)?;
        let config: SegConfig = serde_json::from_value(meta["config"].clone())?;
        if meta["diagnosis_digest"].as_str() != Some(diag.digest().as_str()) {
            return Err(Error::Format(
                "segmentation checkpoint was trained against a different diagnosis network".into(),
            ));
        }
        let mut net = build(config, diag)?;
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
        Ok(net)
    }
}

/// Fits the network to the soft DF-GT labels with pixelwise BCE.
/// The history records the mean segmentation BCE per epoch; the auxiliary
/// term is reported under the `aux_bce` metric.
pub fn train(
    net: TGSegNet,
    dfgt: &DFGTDataset,
    images: &Dataset,
    hyper: &SegHyper,
) -> Result<(TGSegNet, TrainHistory)> {
    hyper.validate()?;
    let dfgt_ids: BTreeSet<&str> = dfgt.entries.iter().map(|e| e.sample_id.as_str()).collect();
    let image_ids: BTreeSet<&str> = images
        .samples()
        .iter()
        .map(|s| s.sample_id.as_str())
        .collect();
    if dfgt_ids != image_ids {
        let missing: Vec<_> = image_ids.symmetric_difference(&dfgt_ids).take(5).collect();
        return Err(Error::validation(
            "segmentation training set",
            vec![format!(
                "DF-GT and image sample ids differ (e.g. {missing:?})"
            )],
        ));
    }
    let digest_before = net.diag.digest();
    let pairs: Vec<(&Array3<f64>, Arc<Tensor>)> = images
        .samples()
        .iter()
        .map(|s| {
            let e = dfgt.get(&s.sample_id).expect("ids checked");
            (&s.image, Arc::new(e.label.values.clone().into_dyn()))
        })
        .collect();
    let mut net = net;
    let mut history = TrainHistory::new();
    let mut adam = Adam::new(hyper.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let (mut seg_total, mut aux_total) = (0.0, 0.0);
        for batch in order.chunks(hyper.batch_size) {
            let mut total: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (image, target) = &pairs[i];
                let mut s = Session::new(&net.store, true);
                let f = net.forward_on(&mut s, image)?;
                let seg = s.tape.bce_with_logits(f.logits, target.clone());
                let mut loss = seg;
                seg_total += s.tape.scalar(seg);
                if let Some(a) = f.aux_logits {
                    let aux = s.tape.bce_with_logits(a, target.clone());
                    aux_total += s.tape.scalar(aux);
                    let weighted = s.tape.scale(aux, hyper.aux_weight);
                    loss = s.tape.add(seg, weighted);
                }
                let value = s.tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Numerical {
                        step: epoch,
                        detail: format!("non-finite segmentation loss on sample {i}"),
                    });
                }
                let mut grads = s.tape.backward(loss);
                let g = s.param_grads(&mut grads);
                match &mut total {
                    None => total = Some(g),
                    Some(t) => t.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                }
            }
            let mut g = total.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            g.iter_mut().for_each(|t| t.mapv_inplace(|v| v * inv));
            adam.step(net.store.tensors_mut(), &g);
        }
        let count = pairs.len() as f64;
        let mut metrics = BTreeMap::new();
        if net.aux.is_some() {
            metrics.insert("aux_bce".to_string(), aux_total / count);
        }
        history.push(seg_total / count, metrics);
    }
    if net.diag.digest() != digest_before {
        return Err(Error::Precondition(
            "diagnosis network changed during training".into(),
        ));
    }
    Ok((net, history))
}

/// Rows of a patched `[C, H, W]` feature as an owned matrix.
pub fn patchify(feature: &Array3<f64>, p: usize) -> Result<Array2<f64>> {
    let (_, h, w) = feature.dim();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!(
            "patch size {p} does not divide {h}x{w}"
        )));
    }
    Ok(crate::nn::tape::patchify_array(feature.view(), p))
}

pub fn unpatchify(
    seq: &Array2<f64>,
    p: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Result<Array3<f64>> {
    if p == 0 || h % p != 0 || w % p != 0 || seq.dim() != ((h / p) * (w / p), p * p * c) {
        return Err(Error::Shape(format!(
            "sequence {:?} is not a {c}x{h}x{w} grid in {p}x{p} patches",
            seq.dim()
        )));
    }
    Ok(crate::nn::tape::unpatchify_array(seq.view(), p, c, h, w))
}

/// Mean over samples of the soft Dice of each structure.
pub fn mean_dice(
    preds: &[Array3<f64>],
    targets: &[&Array3<f64>],
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let k = preds[0].dim().0;
    let mut acc = vec![0.0; k];
    for (p, t) in preds.iter().zip(targets) {
        for (s, a) in acc.iter_mut().enumerate() {
            *a += crate::metrics::soft_dice(
                p.index_axis(Axis(0), s),
                t.index_axis(Axis(0), s),
                thresholds,
            )?;
        }
    }
    Ok(acc.into_iter().map(|a| a / preds.len() as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnet::{self, DiagConfig};
    use ndarray::Array2;
    use rand::Rng;

    fn diag() -> Arc<DiagnosisNet> {
        Arc::new(
            diagnet::build(DiagConfig {
                image_channels: 1,
                structures: 2,
                widths: Widths(vec![4, 8, 8, 8]),
                seed: 1,
            })
            .unwrap()
            .freeze(),
        )
    }

    fn small_config(blocks: &[usize]) -> SegConfig {
        SegConfig {
            widths: Widths(vec![4, 8, 8, 8]),
            bridge_widths: vec![4, 4, 8, 8],
            ..SegConfig::new(1, 2, 32, 32, 3).with_blocks(blocks)
        }
    }

    fn random(shape: (usize, usize), seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn patch_sizes_keep_sequences_short() {
        let c = SegConfig::new(1, 2, 64, 64, 0);
        assert_eq!(
            (1..=4).map(|k| c.patch_size(k)).collect::<Vec<_>>(),
            vec![4, 2, 1, 1]
        );
    }

    #[test]
    fn patchify_cases() {
        let g = Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let seq = patchify(&g, 1).unwrap();
        assert_eq!(seq, ndarray::arr2(&[[1.0], [2.0], [3.0], [4.0]]));
        assert_eq!(patchify(&g, 2).unwrap().dim(), (1, 4));
        assert!(patchify(&g, 3).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array3::from_shape_fn((3, 8, 8), |_| rng.random::<f64>());
        assert_eq!(
            unpatchify(&patchify(&x, 2).unwrap(), 2, 3, 8, 8).unwrap(),
            x
        );
    }

    #[test]
    fn positional_encoding_is_injective_and_bounded() {
        let e = positional_encoding(8, 8, 2, 2).unwrap();
        assert_eq!(e.dim(), (16, 8));
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        for a in 0..16 {
            for b in a + 1..16 {
                assert!(e
                    .row(a)
                    .iter()
                    .zip(e.row(b).iter())
                    .any(|(x, y)| (x - y).abs() > 1e-9));
            }
        }
        assert_eq!(e, positional_encoding(8, 8, 2, 2).unwrap());
        assert_eq!(positional_encoding(4, 4, 1, 4).unwrap().dim(), (1, 16));
    }

    fn identity_attention(store: &mut ParamStore, width: usize, heads: usize) -> AttnParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AttnParams::new(store, &mut rng, "a", width, heads);
        for d in [&p.q, &p.k, &p.v, &p.merge] {
            let eye = Tensor::from_shape_fn(ndarray::IxDyn(&[width, width]), |i| {
                if i[0] == i[1] {
                    1.0
                } else {
                    0.0
                }
            });
            let idx = d.weight.index();
            *store.tensors_mut().nth(idx).unwrap() = eye;
        }
        p
    }

    fn brute_force_attention(
        q: &Array2<f64>,
        k: &Array2<f64>,
        v: &Array2<f64>,
        heads: usize,
    ) -> Array2<f64> {
        let (n, d) = q.dim();
        let dh = d / heads;
        let mut out = Array2::zeros((n, d));
        for h in 0..heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..k.nrows())
                    .map(|j| {
                        (0..dh)
                            .map(|c| q[[i, h * dh + c]] * k[[j, h * dh + c]])
                            .sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    out[[i, h * dh + c]] =
                        (0..k.nrows()).map(|j| e[j] / z * v[[j, h * dh + c]]).sum();
                }
            }
        }
        out
    }

    #[test]
    fn identity_attention_matches_brute_force() {
        for heads in [1, 2] {
            let mut store = ParamStore::new();
            let p = identity_attention(&mut store, 4, heads);
            let q = ndarray::arr2(&[[0.5, -1.0, 0.25, 2.0], [1.5, 0.0, -0.5, 1.0]]);
            let k = ndarray::arr2(&[[1.0, 0.5, -0.25, 0.0], [-1.0, 2.0, 0.75, 0.5]]);
            let v = ndarray::arr2(&[[0.1, 0.2, 0.3, 0.4], [-0.4, 0.3, -0.2, 0.1]]);
            let mut s = Session::new(&store, false);
            let (qv, kv, vv) = (
                s.tape.constant(q.clone().into_dyn()),
                s.tape.constant(k.clone().into_dyn()),
                s.tape.constant(v.clone().into_dyn()),
            );
            let out = attention(&mut s, &p, qv, kv, vv).unwrap();
            let got = s
                .tape
                .value(out.out)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let want = brute_force_attention(&q, &k, &v, heads);
            assert!(got
                .iter()
                .zip(want.iter())
                .all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn single_patch_attention_returns_merged_value() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AttnParams::new(&mut store, &mut rng, "a", 8, 4);
        let mut s = Session::new(&store, false);
        let q = s.tape.constant(random((1, 8), 1).into_dyn());
        let kv = s.tape.constant(random((1, 8), 2).into_dyn());
        let out = attention(&mut s, &p, q, kv, kv).unwrap();
        for a in &out.affinities {
            assert_eq!(
                s.tape.value(*a).iter().copied().collect::<Vec<_>>(),
                vec![1.0]
            );
        }
        let v = p.v.forward(&mut s, kv);
        let merged = p.merge.forward(&mut s, v);
        assert!(s
            .tape
            .value(out.out)
            .iter()
            .zip(s.tape.value(merged).iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn affinity_rows_sum_to_one_and_widths_are_checked() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AttnParams::new(&mut store, &mut rng, "a", 8, 4);
        let mut s = Session::new(&store, false);
        let q = s
            .tape
            .constant(random((5, 8), 1).mapv(|v| v * 30.0).into_dyn());
        let kv = s.tape.constant(random((7, 8), 2).into_dyn());
        let out = attention(&mut s, &p, q, kv, kv).unwrap();
        assert_eq!(s.tape.value(out.out).shape(), &[5, 8]);
        for a in &out.affinities {
            let a = s
                .tape
                .value(*a)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            assert!(a.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-12));
        }
        let bad = s.tape.constant(random((7, 6), 3).into_dyn());
        assert!(matches!(
            attention(&mut s, &p, q, bad, bad),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn give_with_zero_mlp_is_zero_and_keeps_shape() {
        let net = build(small_config(&[1]), diag()).unwrap();
        let b = &net.bridges[&1];
        let mut store = net.store.clone();
        let ids = [b.give_mlp.w1.weight.index(), b.give_mlp.w2.weight.index()];
        for (i, t) in store.tensors_mut().enumerate() {
            if ids.contains(&i) {
                t.fill(0.0);
            }
        }
        let d = b.token_width();
        let n = b.encoding.shape()[0];
        let mut s = Session::new(&store, false);
        let e = s.tape.constant(random((n, d), 1).into_dyn());
        let f = s.tape.constant(random((n, d), 2).into_dyn());
        let out = give_module(&mut s, b, e, f).unwrap();
        assert_eq!(s.tape.value(out).shape(), &[n, d]);
        assert!(s.tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn give_is_patch_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 4;
        let bridge = Bridge {
            block: 1,
            patch: 1,
            bridge_width: d,
            proj_enc: Conv2d::new(&mut store, &mut rng, "pe", 1, 1, 1, 1, 1.0),
            proj_diag: Conv2d::new(&mut store, &mut rng, "pd", 1, 1, 1, 1, 1.0),
            proj_dec: Conv2d::new(&mut store, &mut rng, "pc", 1, 1, 1, 1, 1.0),
            back: Conv2d::new(&mut store, &mut rng, "bk", 1, 1, 1, 1, 1.0),
            give_attn: AttnParams::new(&mut store, &mut rng, "g", d, 2),
            give_mlp: Mlp::new(&mut store, &mut rng, "gm", d),
            take_attn: AttnParams::new(&mut store, &mut rng, "t", d, 2),
            take_mlp: Mlp::new(&mut store, &mut rng, "tm", d),
            encoding: Arc::new(positional_encoding(2, 2, d, 1).unwrap().into_dyn()),
        };
        let e = random((4, d), 7);
        let f = random((4, d), 8);
        let run = |b: &Bridge, e: &Array2<f64>, f: &Array2<f64>| {
            let mut s = Session::new(&store, false);
            let (ev, fv) = (
                s.tape.constant(e.clone().into_dyn()),
                s.tape.constant(f.clone().into_dyn()),
            );
            let out = give_module(&mut s, b, ev, fv).unwrap();
            s.tape
                .value(out)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
        };
        let base = run(&bridge, &e, &f);
        let perm = [2usize, 0, 3, 1];
        let mut permuted = bridge.clone();
        let enc = (*bridge.encoding)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        permuted.encoding = Arc::new(enc.select(Axis(0), &perm).into_dyn());
        let out = run(
            &permuted,
            &e.select(Axis(0), &perm),
            &f.select(Axis(0), &perm),
        );
        let want = base.select(Axis(0), &perm);
        assert!(out
            .iter()
            .zip(want.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn forward_shapes_range_and_determinism() {
        let net = build(small_config(&[1, 2, 3]), diag()).unwrap();
        let img = Array3::from_shape_fn((1, 32, 32), |(_, y, x)| {
            ((y * 7 + x * 3) % 11) as f64 / 10.0
        });
        let a = net.forward(&img).unwrap();
        assert_eq!(a.dim(), (2, 32, 32));
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(a, net.forward(&img).unwrap());
        assert!(net.forward(&Array3::zeros((1, 16, 16))).is_err());
    }

    #[test]
    fn take_doubles_size_and_reuses_attention() {
        let net = build(small_config(&[2]), diag()).unwrap();
        let b = &net.bridges[&2];
        let (h, w) = net.config.block_size(2);
        let mut s = Session::new(&net.store, false);
        let given = s
            .tape
            .constant(random((b.encoding.shape()[0], b.token_width()), 1).into_dyn());
        let dec = s.tape.constant(
            Array3::from_shape_fn((8, h, w), |(c, y, x)| ((c + y + x) % 5) as f64 / 4.0).into_dyn(),
        );
        let up = &net.ups[4 - 2];
        let out = take_module(&mut s, b, given, dec, up).unwrap();
        assert_eq!(s.tape.value(out).shape(), &[4, 2 * h, 2 * w]);

        let dp = b.proj_dec.forward(&mut s, dec);
        let seq = s.tape.patchify(dp, b.patch);
        let (_, attn) = take_tokens(&mut s, b, given, seq).unwrap();
        let q = add_encoding(&mut s, given, &b.encoding);
        let k = add_encoding(&mut s, seq, &b.encoding);
        let direct = attention(&mut s, &b.take_attn, q, k, seq).unwrap();
        assert_eq!(s.tape.value(attn.out), s.tape.value(direct.out));
    }

    #[test]
    fn unconnected_net_has_no_bridge_parameters() {
        let net = build(small_config(&[]), diag()).unwrap();
        assert!(net.bridges.is_empty());
        assert!(net
            .store
            .names()
            .iter()
            .all(|n| !n.starts_with('b') && n != "aux.weight"));
        let out = net.forward(&Array3::zeros((1, 32, 32))).unwrap();
        assert_eq!(out.dim(), (2, 32, 32));
    }

    #[test]
    fn invalid_blocks_are_rejected() {
        assert!(build(small_config(&[5]), diag()).is_err());
    }

    fn toy_sets(count: usize) -> (Dataset, DFGTDataset) {
        use crate::dfgt::{self, DFGTHyper, Method};
        use crate::synthgen::{self, SynthSpec};
        let spec = SynthSpec {
            h: 32,
            w: 32,
            train: count,
            val: 0,
            test: 0,
            seed: 11,
            ..SynthSpec::default()
        };
        let mut spec = spec;
        spec.geometry.disc_radius = [6.0, 9.0];
        let out = synthgen::generate_dataset(&spec).unwrap();
        let hyper = DFGTHyper {
            steps: 2,
            ..DFGTHyper::with_method(Method::Raw)
        };
        let d = dfgt::build_dfgt(&diag(), &out.train.dataset, &hyper).unwrap();
        (out.train.dataset, d)
    }

    #[test]
    fn one_step_moves_every_bridge_and_spares_diagnosis() {
        let (images, labels) = toy_sets(2);
        let net = build(small_config(&[1, 2, 3]), diag()).unwrap();
        let before = net.store.clone();
        let digest = net.diag.digest();
        let hyper = SegHyper {
            epochs: 1,
            batch_size: 2,
            lr: 1e-3,
            ..SegHyper::default()
        };
        let (trained, history) = train(net, &labels, &images, &hyper).unwrap();
        assert_eq!(history.losses().len(), 1);
        assert_eq!(trained.diag.digest(), digest);
        for b in trained.bridges.values() {
            for prefix in b.prefixes() {
                let moved = before
                    .iter()
                    .zip(trained.store.iter())
                    .filter(|((n, _), _)| n.starts_with(&prefix))
                    .any(|((_, a), (_, b))| a != b);
                assert!(moved, "{prefix} did not change");
            }
        }
    }

    #[test]
    fn zero_epochs_leave_net_unchanged_and_ids_are_checked() {
        let (images, labels) = toy_sets(2);
        let net = build(small_config(&[2]), diag()).unwrap();
        let digest = net.store.digest();
        let hyper = SegHyper {
            epochs: 0,
            ..SegHyper::default()
        };
        let (same, history) = train(net.clone(), &labels, &images, &hyper).unwrap();
        assert_eq!(same.store.digest(), digest);
        assert!(history.losses().is_empty());
        let fewer = images.truncated(1);
        assert!(matches!(
            train(net, &labels, &fewer, &hyper),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let d = diag();
        let net = build(small_config(&[1, 3]), d.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.ckpt");
        net.save(&path).unwrap();
        let back = TGSegNet::load(&path, d.clone()).unwrap();
        let img = Array3::from_shape_fn((1, 32, 32), |(_, y, x)| ((y * 5 + x) % 9) as f64 / 8.0);
        assert_eq!(net.forward(&img).unwrap(), back.forward(&img).unwrap());
        let other = Arc::new(
            diagnet::build(DiagConfig {
                seed: 2,
                ..d.config().clone()
            })
            .unwrap()
            .freeze(),
        );
        assert!(TGSegNet::load(&path, other).is_err());
    }
}
