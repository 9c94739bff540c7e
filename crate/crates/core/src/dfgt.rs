//! Diagnosis-first ground truth: per-sample expertness maps that minimize the
//! frozen classifier's loss on the fused label.
//!
//! Four parameterizations share one Adam loop: raw logits, logits seen through
//! random small warps, logits held as a 2-D Hartley spectrum, and a coordinate
//! network generating the logits pixel by pixel. Every optimizer returns its
//! best iterate, so the final loss never exceeds the uniform-fusion loss.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{
    Array1, Array2, Array3, Array4, ArrayView2, Axis, Ix1, Ix2, IxDyn, LinalgScalar, ScalarOperand,
};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    encode_gray16, read_png, write_file, write_manifest_atomically, Dataset, ExpertnessMap,
    FusedLabel, MultiRaterSample, Provenance,
};
use crate::diagnet::DiagnosisNet;
use crate::error::{Error, Result};
use crate::fusion::{fuse_as, softmax_raters, ExpertnessLogits};
use crate::metrics::{fft2, radial_frequency};
use crate::nn::params::init_normal;
use crate::nn::{Adam, Session, Tensor};
use crate::resample::SamplingGrid;
use crate::synthgen::mix64;

pub const MANIFEST_FILE: &str = "dfgt_manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Raw,
    TransRob,
    Fourier,
    ExpG,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Raw, Method::TransRob, Method::Fourier, Method::ExpG];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::TransRob => "transrob",
            Method::Fourier => "fourier",
            Method::ExpG => "expg",
        }
    }

    pub fn provenance(self) -> Provenance {
        match self {
            Method::Raw => Provenance::DfgtRaw,
            Method::TransRob => Provenance::DfgtTransrob,
            Method::Fourier => Provenance::DfgtFourier,
            Method::ExpG => Provenance::DfgtExpg,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::validation(
                    "method",
                    vec![format!("`{s}` is not one of raw, transrob, fourier, expg")],
                )
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformSpec {
    pub rotation_deg: f64,
    pub scale: [f64; 2],
    pub translation_px: f64,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            rotation_deg: 5.0,
            scale: [0.95, 1.05],
            translation_px: 2.0,
        }
    }
}

impl TransformSpec {
    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.scale == [1.0, 1.0] && self.translation_px == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FourierSpec {
    /// Scale spectrum coefficients by the inverse of their radial frequency.
    pub inverse_frequency: bool,
}

impl Default for FourierSpec {
    fn default() -> Self {
        Self {
            inverse_frequency: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpGSpec {
    pub hidden: usize,
    /// Standard deviation scale of the first layer, which sets the generator's spatial bandwidth.
    pub input_gain: f64,
    /// One generator for all samples instead of one per sample.
    pub shared: bool,
}

impl Default for ExpGSpec {
    fn default() -> Self {
        Self {
            hidden: 64,
            input_gain: 1.0,
            shared: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DFGTHyper {
    pub steps: usize,
    pub lr: f64,
    pub method: Method,
    #[serde(default)]
    pub transform: TransformSpec,
    #[serde(default)]
    pub fourier: FourierSpec,
    #[serde(default)]
    pub expg: ExpGSpec,
    pub seed: u64,
}

impl Default for DFGTHyper {
    fn default() -> Self {
        Self {
            steps: 125,
            lr: 1e-2,
            method: Method::ExpG,
            transform: TransformSpec::default(),
            fourier: FourierSpec::default(),
            expg: ExpGSpec::default(),
            seed: 0,
        }
    }
}

impl DFGTHyper {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.steps == 0 {
            v.push("steps: must be at least 1".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("lr: {} must be positive", self.lr));
        }
        let t = &self.transform;
        if !(t.rotation_deg >= 0.0 && t.translation_px >= 0.0) {
            v.push("transform: rotation and translation ranges must be non-negative".into());
        }
        if !(t.scale[0] > 0.0 && t.scale[0] <= t.scale[1]) {
            v.push(format!("transform.scale: invalid range {:?}", t.scale));
        }
        if self.expg.hidden == 0 {
            v.push("expg.hidden: must be positive".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::validation("dfgt hyperparameters", v))
        }
    }
}

/// Result of one per-sample optimization.
#[derive(Clone, Debug)]
pub struct Optimized {
    pub expertness: ExpertnessMap,
    /// Logits of the returned iterate.
    pub logits: Array4<f64>,
    /// Loss at every iterate, starting with the uniform-expertness loss.
    pub trace: Vec<f64>,
    /// Index into `trace` of the returned iterate.
    pub best_step: usize,
}

impl Optimized {
    pub fn initial_loss(&self) -> f64 {
        self.trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        self.trace[self.best_step]
    }
}

/// Stable FNV-1a hash, used to key per-sample streams by id.
pub(crate) fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn sample_rng(seed: u64, sample_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(mix64(seed) ^ fnv1a(sample_id)))
}

fn check(net: &DiagnosisNet, hyper: &DFGTHyper, expected: Method) -> Result<()> {
    hyper.validate()?;
    if hyper.method != expected {
        return Err(Error::Precondition(format!(
            "hyper.method is {}, expected {expected}",
            hyper.method
        )));
    }
    if !net.is_frozen() {
        return Err(Error::Precondition(
            "the diagnosis network must be frozen".into(),
        ));
    }
    Ok(())
}

fn numerical(step: usize, loss: f64) -> Error {
    Error::Numerical {
        step,
        detail: format!("non-finite diagnosis loss {loss}"),
    }
}

/// Adam over `params`; `eval` returns the loss at the current iterate, the
/// descent gradient, and the logits the iterate stands for.
fn descend(
    steps: usize,
    lr: f64,
    mut params: Vec<Tensor>,
    mut eval: impl FnMut(&[Tensor], usize) -> Result<(f64, Vec<Tensor>, Array4<f64>)>,
    mut final_eval: impl FnMut(&[Tensor]) -> Result<(f64, Array4<f64>)>,
) -> Result<(Vec<f64>, usize, Array4<f64>, Vec<Tensor>)> {
    let mut adam = Adam::new(lr);
    let mut trace = Vec::with_capacity(steps + 1);
    let mut best: Option<(usize, Array4<f64>, Vec<Tensor>)> = None;
    for step in 0..steps {
        let (loss, grads, logits) = eval(&params, step)?;
        if !loss.is_finite() {
            return Err(numerical(step, loss));
        }
        if best.is_none() || loss < trace[best.as_ref().unwrap().0] {
            best = Some((step, logits, params.clone()));
        }
        trace.push(loss);
        adam.step(params.iter_mut(), &grads);
    }
    let (loss, logits) = final_eval(&params)?;
    if !loss.is_finite() {
        return Err(numerical(steps, loss));
    }
    let best_loss = trace[best.as_ref().unwrap().0];
    trace.push(loss);
    if loss < best_loss {
        best = Some((steps, logits, params));
    }
    let (best_step, logits, params) = best.expect("at least one step");
    Ok((trace, best_step, logits, params))
}

fn finish(trace: Vec<f64>, best_step: usize, logits: Array4<f64>) -> Optimized {
    Optimized {
        expertness: ExpertnessMap::new_unchecked(softmax_raters(logits.clone())),
        logits,
        trace,
        best_step,
    }
}

fn logits_of(t: &Tensor) -> Array4<f64> {
    t.clone().into_dimensionality().expect("4-D logits")
}

/// Plain gradient descent on the pre-softmax logits, starting from zero.
pub fn optimize_raw(
    net: &DiagnosisNet,
    sample: &MultiRaterSample,
    hyper: &DFGTHyper,
) -> Result<Optimized> {
    check(net, hyper, Method::Raw)?;
    raw_loop(net, sample, hyper)
}

fn raw_loop(net: &DiagnosisNet, sample: &MultiRaterSample, hyper: &DFGTHyper) -> Result<Optimized> {
    let dim = sample.masks.shape().to_vec();
    let eval_at = |l: &Array4<f64>| {
        net.loss_and_grad(
            &sample.image,
            &sample.masks,
            &ExpertnessLogits::new(l.clone())?,
            sample.label,
        )
    };
    let (trace, best, logits, _) = descend(
        hyper.steps,
        hyper.lr,
        vec![Tensor::zeros(IxDyn(&dim))],
        |p, _| {
            let l = logits_of(&p[0]);
            let (loss, g) = eval_at(&l)?;
            Ok((loss, vec![g.into_dyn()], l))
        },
        |p| {
            let l = logits_of(&p[0]);
            Ok((eval_at(&l)?.0, l))
        },
    )?;
    Ok(finish(trace, best, logits))
}

/// Draws a random small rotation, scale and shift from `spec`.
pub fn random_transform<R: Rng>(
    spec: &TransformSpec,
    h: usize,
    w: usize,
    rng: &mut R,
) -> SamplingGrid {
    let mut draw = |lo: f64, hi: f64| {
        if lo < hi {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };
    let angle = draw(-spec.rotation_deg, spec.rotation_deg).to_radians();
    let scale = draw(spec.scale[0], spec.scale[1]);
    let ty = draw(-spec.translation_px, spec.translation_px);
    let tx = draw(-spec.translation_px, spec.translation_px);
    let center = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    SamplingGrid::affine(h, w, center, angle, scale, (ty, tx))
}

fn map_planes(x: &Array4<f64>, mut f: impl FnMut(ArrayView2<f64>) -> Array2<f64>) -> Array4<f64> {
    let mut out = Array4::zeros(x.raw_dim());
    for (mut o, i) in out.outer_iter_mut().zip(x.outer_iter()) {
        for (mut op, ip) in o.outer_iter_mut().zip(i.outer_iter()) {
            op.assign(&f(ip));
        }
    }
    out
}

/// Optimizes logits through a fresh random warp each step; the gradient is
/// carried back to the unwarped logits by the warp's adjoint.
pub fn optimize_transrob(
    net: &DiagnosisNet,
    sample: &MultiRaterSample,
    hyper: &DFGTHyper,
) -> Result<Optimized> {
    check(net, hyper, Method::TransRob)?;
    if hyper.transform.is_identity() {
        return raw_loop(net, sample, hyper);
    }
    let (_, _, h, w) = sample.masks.dim();
    let mut rng = sample_rng(hyper.seed, &sample.sample_id);
    let eval_at = |l: &Array4<f64>| {
        net.loss_and_grad(
            &sample.image,
            &sample.masks,
            &ExpertnessLogits::new(l.clone())?,
            sample.label,
        )
    };
    let (trace, best, logits, _) = descend(
        hyper.steps,
        hyper.lr,
        vec![Tensor::zeros(IxDyn(sample.masks.shape()))],
        |p, _| {
            let l = logits_of(&p[0]);
            let (loss, _) = eval_at(&l)?;
            let grid = random_transform(&hyper.transform, h, w, &mut rng);
            let warped = map_planes(&l, |pl| grid.apply(pl));
            let (_, g) = eval_at(&warped)?;
            let back = map_planes(&g, |pl| grid.adjoint(pl));
            Ok((loss, vec![back.into_dyn()], l))
        },
        |p| {
            let l = logits_of(&p[0]);
            Ok((eval_at(&l)?.0, l))
        },
    )?;
    Ok(finish(trace, best, logits))
}

/// Orthonormal 2-D discrete Hartley transform; it is its own inverse and adjoint.
pub fn hartley2(plane: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    let norm = 1.0 / ((h * w) as f64).sqrt();
    fft2(plane).mapv(|c| (c.re - c.im) * norm)
}

/// Per-coefficient amplitude applied to spectrum parameters.
pub fn spectrum_scale(h: usize, w: usize, spec: &FourierSpec) -> Array2<f64> {
    if !spec.inverse_frequency {
        return Array2::ones((h, w));
    }
    let floor = 2.0 / h.max(w) as f64;
    Array2::from_shape_fn((h, w), |(ky, kx)| {
        (floor / radial_frequency(ky, kx, h, w).max(floor)).min(1.0)
    })
}

/// Spatial logits from spectrum parameters.
pub fn spectrum_to_logits(spectrum: &Array4<f64>, scale: &Array2<f64>) -> Array4<f64> {
    map_planes(spectrum, |p| hartley2((&p * scale).view()))
}

/// Optimizes the logits' Hartley spectrum, one spectrum per (rater, structure).
pub fn optimize_fourier(
    net: &DiagnosisNet,
    sample: &MultiRaterSample,
    hyper: &DFGTHyper,
) -> Result<Optimized> {
    check(net, hyper, Method::Fourier)?;
    let (_, _, h, w) = sample.masks.dim();
    let scale = spectrum_scale(h, w, &hyper.fourier);
    let eval_at = |l: &Array4<f64>| {
        net.loss_and_grad(
            &sample.image,
            &sample.masks,
            &ExpertnessLogits::new(l.clone())?,
            sample.label,
        )
    };
    let (trace, best, logits, _) = descend(
        hyper.steps,
        hyper.lr,
        vec![Tensor::zeros(IxDyn(sample.masks.shape()))],
        |p, _| {
            let l = spectrum_to_logits(&logits_of(&p[0]), &scale);
            let (loss, g) = eval_at(&l)?;
            let gs = map_planes(&g, |pl| &hartley2(pl) * &scale);
            Ok((loss, vec![gs.into_dyn()], l))
        },
        |p| {
            let l = spectrum_to_logits(&logits_of(&p[0]), &scale);
            Ok((eval_at(&l)?.0, l))
        },
    )?;
    Ok(finish(trace, best, logits))
}

/// Weights of the coordinate generator: four per-pixel affine layers
/// `2 -> hidden -> hidden -> hidden -> n*K` with tanh in between.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpGParams {
    pub raters: usize,
    pub structures: usize,
    /// `[w0, b0, w1, b1, w2, b2, w3, b3]`, weights stored `[in, out]`.
    pub tensors: Vec<Tensor>,
}

impl ExpGParams {
    /// Small random hidden layers and a zero output layer, so the first map is uniform.
    pub fn init<R: Rng>(raters: usize, structures: usize, spec: &ExpGSpec, rng: &mut R) -> Self {
        let hdim = spec.hidden;
        let gain = 5.0 / 3.0;
        let out = raters * structures;
        let tensors = vec![
            init_normal(rng, &[2, hdim], 1, spec.input_gain),
            Tensor::zeros(IxDyn(&[hdim])),
            init_normal(rng, &[hdim, hdim], hdim, gain),
            Tensor::zeros(IxDyn(&[hdim])),
            init_normal(rng, &[hdim, hdim], hdim, gain),
            Tensor::zeros(IxDyn(&[hdim])),
            Tensor::zeros(IxDyn(&[hdim, out])),
            Tensor::zeros(IxDyn(&[out])),
        ];
        Self {
            raters,
            structures,
            tensors,
        }
    }

    /// Logits `[n, K, h, w]` at every pixel of an `h x w` grid.
    pub fn generate(&self, h: usize, w: usize) -> Array4<f64> {
        let layers = GenLayers::<f32>::cast(&self.tensors);
        let (z, _) = layers.forward(&coordinate_grid(h, w).mapv(|v| v as f32));
        pixels_to_logits(&z, self.raters, self.structures, h, w)
    }

    pub fn expertness(&self, h: usize, w: usize) -> ExpertnessMap {
        ExpertnessMap::new_unchecked(softmax_raters(self.generate(h, w)))
    }
}

/// Coordinates normalized to `[-1, 1]`, one row `(y, x)` per pixel in row-major order.
pub fn coordinate_grid(h: usize, w: usize) -> Array2<f64> {
    let norm = |i: usize, n: usize| {
        if n > 1 {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        } else {
            0.0
        }
    };
    Array2::from_shape_fn((h * w, 2), |(p, c)| {
        if c == 0 {
            norm(p / w, h)
        } else {
            norm(p % w, w)
        }
    })
}

/// Scalar type of the generator kernel. Optimization runs in `f32`, which
/// halves the cost of the per-pixel matrix products; `f64` serves as reference.
pub trait GenScalar: Float + FromPrimitive + ToPrimitive + LinalgScalar + ScalarOperand {}

impl GenScalar for f32 {}
impl GenScalar for f64 {}

fn tanh<T: GenScalar>(x: T) -> T {
    let two = T::one() + T::one();
    let e = (two * x.abs()).exp();
    let t = T::one() - two / (e + T::one());
    if x < T::zero() {
        -t
    } else {
        t
    }
}

/// The generator as plain matrices; forward and backward without a tape.
#[derive(Clone, Debug)]
pub struct GenLayers<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

impl<T: GenScalar> GenLayers<T> {
    pub fn cast(tensors: &[Tensor]) -> Self {
        let conv = |v: f64| T::from_f64(v).expect("representable weight");
        let mut weights = Vec::with_capacity(4);
        let mut biases = Vec::with_capacity(4);
        for pair in tensors.chunks(2) {
            weights.push(
                pair[0]
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("2-D weight")
                    .mapv(conv),
            );
            biases.push(
                pair[1]
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("1-D bias")
                    .mapv(conv),
            );
        }
        Self { weights, biases }
    }

    /// Pixel-major output `[h*w, n*K]` and the hidden activations.
    pub fn forward(&self, coords: &Array2<T>) -> (Array2<T>, Vec<Array2<T>>) {
        let last = self.weights.len() - 1;
        let mut hidden: Vec<Array2<T>> = Vec::with_capacity(last);
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut y = hidden.last().unwrap_or(coords).dot(w) + b;
            if l == last {
                return (y, hidden);
            }
            y.mapv_inplace(tanh);
            hidden.push(y);
        }
        unreachable!("generator has at least one layer")
    }

    /// Parameter gradients in `ExpGParams::tensors` order, given `dL/d output`.
    pub fn backward(
        &self,
        coords: &Array2<T>,
        hidden: &[Array2<T>],
        grad_out: Array2<T>,
    ) -> Vec<Tensor> {
        let back = |a: &Array2<T>| a.mapv(|v| v.to_f64().expect("finite")).into_dyn();
        let mut grads = vec![Tensor::zeros(IxDyn(&[0])); 2 * self.weights.len()];
        let mut g = grad_out;
        for l in (0..self.weights.len()).rev() {
            let input = if l == 0 { coords } else { &hidden[l - 1] };
            grads[2 * l] = back(&input.t().dot(&g));
            grads[2 * l + 1] = g
                .sum_axis(Axis(0))
                .mapv(|v| v.to_f64().expect("finite"))
                .into_dyn();
            if l > 0 {
                let mut gi = g.dot(&self.weights[l].t());
                gi.zip_mut_with(input, |d, &y| *d = *d * (T::one() - y * y));
                g = gi;
            }
        }
        grads
    }
}

fn pixels_to_logits<T: GenScalar>(
    z: &Array2<T>,
    n: usize,
    k: usize,
    h: usize,
    w: usize,
) -> Array4<f64> {
    Array4::from_shape_fn((n, k, h, w), |(i, s, y, x)| {
        z[[y * w + x, i * k + s]].to_f64().expect("finite")
    })
}

fn logits_to_pixels(g: &Array4<f64>) -> Array2<f32> {
    let (n, k, h, w) = g.dim();
    Array2::from_shape_fn((h * w, n * k), |(p, c)| {
        g[[c / k, c % k, p / w, p % w]] as f32
    })
}

/// Diagnosis loss of one sample at the given logits, with its gradient when asked.
fn sample_loss(
    net: &DiagnosisNet,
    sample: &MultiRaterSample,
    logits: &Array4<f64>,
    want_grad: bool,
) -> (f64, Option<Array4<f64>>) {
    let mut s = Session::new(net.params(), false);
    let z = if want_grad {
        s.tape.leaf(logits.clone().into_dyn())
    } else {
        s.tape.constant(logits.clone().into_dyn())
    };
    let (loss, _) = net.fused_loss(&mut s, &sample.image, &sample.masks, z, sample.label);
    let value = s.tape.scalar(loss);
    if !want_grad || !value.is_finite() {
        return (value, None);
    }
    let g = s.tape.backward(loss).take(z).expect("logits leaf");
    (value, Some(g.into_dimensionality().expect("4-D gradient")))
}

/// Optimizes a fresh coordinate generator for one sample.
pub fn optimize_expg(
    net: &DiagnosisNet,
    sample: &MultiRaterSample,
    hyper: &DFGTHyper,
) -> Result<(Optimized, ExpGParams)> {
    check(net, hyper, Method::ExpG)?;
    let (n, k, h, w) = sample.masks.dim();
    let mut rng = sample_rng(hyper.seed, &sample.sample_id);
    let init = ExpGParams::init(n, k, &hyper.expg, &mut rng);
    let coords = coordinate_grid(h, w).mapv(|v| v as f32);
    let run = |p: &[Tensor], want_grad: bool| -> (f64, Vec<Tensor>, Array4<f64>) {
        let layers = GenLayers::<f32>::cast(p);
        let (z, hidden) = layers.forward(&coords);
        let logits = pixels_to_logits(&z, n, k, h, w);
        let (value, g) = sample_loss(net, sample, &logits, want_grad);
        let grads = g.map_or_else(Vec::new, |g| {
            layers.backward(&coords, &hidden, logits_to_pixels(&g))
        });
        (value, grads, logits)
    };
    let (trace, best, logits, params) = descend(
        hyper.steps,
        hyper.lr,
        init.tensors.clone(),
        |p, _| Ok(run(p, true)),
        |p| {
            let (l, _, z) = run(p, false);
            Ok((l, z))
        },
    )?;
    let params = ExpGParams {
        raters: n,
        structures: k,
        tensors: params,
    };
    Ok((finish(trace, best, logits), params))
}

/// One generator shared by every sample, fitted to the mean loss.
pub fn optimize_expg_shared(
    net: &DiagnosisNet,
    samples: &[MultiRaterSample],
    hyper: &DFGTHyper,
) -> Result<(Vec<Optimized>, ExpGParams)> {
    check(net, hyper, Method::ExpG)?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Precondition("shared generator needs at least one sample".into()))?;
    let (n, k, h, w) = first.masks.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(hyper.seed));
    let init = ExpGParams::init(n, k, &hyper.expg, &mut rng);
    let coords = coordinate_grid(h, w).mapv(|v| v as f32);
    let per_sample =
        |p: &[Tensor], want_grad: bool| -> Result<(Vec<f64>, Vec<Tensor>, Array4<f64>)> {
            let layers = GenLayers::<f32>::cast(p);
            let (z, hidden) = layers.forward(&coords);
            let logits = pixels_to_logits(&z, n, k, h, w);
            let mut losses = Vec::with_capacity(samples.len());
            let mut total: Option<Array4<f64>> = None;
            for sample in samples {
                if sample.masks.dim() != (n, k, h, w) {
                    return Err(Error::Shape(format!(
                        "sample {} has masks {:?}, expected {:?}",
                        sample.sample_id,
                        sample.masks.dim(),
                        (n, k, h, w)
                    )));
                }
                let (value, g) = sample_loss(net, sample, &logits, want_grad);
                losses.push(value);
                if let Some(g) = g {
                    match &mut total {
                        None => total = Some(g),
                        Some(t) => *t += &g,
                    }
                }
            }
            let grads = match total {
                Some(t) if want_grad && losses.iter().all(|l| l.is_finite()) => {
                    let t = t / samples.len() as f64;
                    layers.backward(&coords, &hidden, logits_to_pixels(&t))
                }
                _ => Vec::new(),
            };
            Ok((losses, grads, logits))
        };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let history: RefCell<Vec<Vec<f64>>> = RefCell::new(Vec::new());
    let (_, best, logits, params) = descend(
        hyper.steps,
        hyper.lr,
        init.tensors.clone(),
        |p, _| {
            let (l, g, z) = per_sample(p, true)?;
            let m = mean(&l);
            history.borrow_mut().push(l);
            Ok((m, g, z))
        },
        |p| {
            let (l, _, z) = per_sample(p, false)?;
            let m = mean(&l);
            history.borrow_mut().push(l);
            Ok((m, z))
        },
    )?;
    let expertness = ExpertnessMap::new_unchecked(softmax_raters(logits.clone()));
    let history = history.into_inner();
    let out = (0..samples.len())
        .map(|i| {
            let per: Vec<f64> = history.iter().map(|h| h[i]).collect();
            Optimized {
                expertness: expertness.clone(),
                logits: logits.clone(),
                trace: per,
                best_step: best,
            }
        })
        .collect();
    Ok((
        out,
        ExpGParams {
            raters: n,
            structures: k,
            tensors: params,
        },
    ))
}

/// Runs the optimizer selected by `hyper.method` on one sample.
pub fn optimize(
    net: &DiagnosisNet,
    sample: &MultiRaterSample,
    hyper: &DFGTHyper,
) -> Result<Optimized> {
    match hyper.method {
        Method::Raw => optimize_raw(net, sample, hyper),
        Method::TransRob => optimize_transrob(net, sample, hyper),
        Method::Fourier => optimize_fourier(net, sample, hyper),
        Method::ExpG => optimize_expg(net, sample, hyper).map(|(o, _)| o),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DFGTEntry {
    pub sample_id: String,
    /// Stored on the 16-bit grid, so the persisted label is exactly this one.
    pub label: FusedLabel,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_step: usize,
    /// Mean weight per rater and structure, `[n][K]`.
    pub mean_expertness: Vec<Vec<f64>>,
    /// Full map; present for freshly built datasets, absent after loading.
    pub expertness: Option<ExpertnessMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedSample {
    pub sample_id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DFGTDataset {
    pub method: Method,
    pub hyper: DFGTHyper,
    pub entries: Vec<DFGTEntry>,
    pub failed: Vec<FailedSample>,
    /// Hash of the run configuration that produced the labels, if known.
    pub config_hash: Option<String>,
}

impl DFGTDataset {
    pub fn get(&self, sample_id: &str) -> Option<&DFGTEntry> {
        self.entries.iter().find(|e| e.sample_id == sample_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Mean over samples and pixels of each rater's weight, per structure.
    pub fn mean_expertness(&self) -> Vec<Vec<f64>> {
        let Some(first) = self.entries.first() else {
            return Vec::new();
        };
        let mut acc = vec![vec![0.0; first.mean_expertness[0].len()]; first.mean_expertness.len()];
        for e in &self.entries {
            for (a, m) in acc.iter_mut().zip(&e.mean_expertness) {
                a.iter_mut().zip(m).for_each(|(x, y)| *x += y);
            }
        }
        let inv = 1.0 / self.entries.len() as f64;
        acc.iter_mut().flatten().for_each(|v| *v *= inv);
        acc
    }
}

fn entry(sample: &MultiRaterSample, opt: Optimized, provenance: Provenance) -> Result<DFGTEntry> {
    let mut label = fuse_as(&sample.masks, &opt.expertness, provenance)?;
    label.values.mapv_inplace(crate::data::quantize);
    Ok(DFGTEntry {
        sample_id: sample.sample_id.clone(),
        label,
        initial_loss: opt.initial_loss(),
        final_loss: opt.final_loss(),
        best_step: opt.best_step,
        mean_expertness: opt.expertness.mean_per_rater_structure(),
        expertness: Some(opt.expertness),
    })
}

/// Optimizes every sample independently. Failures are recorded and skipped.
pub fn build_dfgt(net: &DiagnosisNet, dataset: &Dataset, hyper: &DFGTHyper) -> Result<DFGTDataset> {
    hyper.validate()?;
    if !net.is_frozen() {
        return Err(Error::Precondition(
            "the diagnosis network must be frozen".into(),
        ));
    }
    let provenance = hyper.method.provenance();
    let mut entries = Vec::with_capacity(dataset.len());
    let mut failed = Vec::new();
    if hyper.method == Method::ExpG && hyper.expg.shared {
        let (opts, _) = optimize_expg_shared(net, dataset.samples(), hyper)?;
        for (sample, opt) in dataset.samples().iter().zip(opts) {
            entries.push(entry(sample, opt, provenance)?);
        }
    } else {
        for sample in dataset.samples() {
            match optimize(net, sample, hyper) {
                Ok(opt) => entries.push(entry(sample, opt, provenance)?),
                Err(e @ (Error::Numerical { .. } | Error::Shape(_))) => failed.push(FailedSample {
                    sample_id: sample.sample_id.clone(),
                    error: e.to_string(),
                }),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(DFGTDataset {
        method: hyper.method,
        hyper: hyper.clone(),
        entries,
        failed,
        config_hash: None,
    })
}

pub fn label_file_name(sample_id: &str, structure: usize) -> String {
    format!("{sample_id}_s{structure}.png")
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    sample_id: String,
    files: Vec<String>,
    initial_loss: f64,
    final_loss: f64,
    best_step: usize,
    mean_expertness: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    method: Method,
    provenance: Provenance,
    hyper: DFGTHyper,
    config_hash: Option<String>,
    structures: usize,
    h: usize,
    w: usize,
    mean_expertness: Vec<Vec<f64>>,
    samples: Vec<ManifestEntry>,
    failed: Vec<FailedSample>,
}

/// Fused labels as 16-bit PNGs plus a sidecar manifest, written last.
pub fn save_dfgt(d: &DFGTDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (k, h, w) = d
        .entries
        .first()
        .map(|e| e.label.values.dim())
        .unwrap_or((0, 0, 0));
    let mut samples = Vec::with_capacity(d.entries.len());
    for e in &d.entries {
        let mut files = Vec::with_capacity(k);
        for s in 0..k {
            let name = label_file_name(&e.sample_id, s);
            write_file(&dir.join(&name), &encode_gray16(e.label.structure(s))?)?;
            files.push(name);
        }
        samples.push(ManifestEntry {
            sample_id: e.sample_id.clone(),
            files,
            initial_loss: e.initial_loss,
            final_loss: e.final_loss,
            best_step: e.best_step,
            mean_expertness: e.mean_expertness.clone(),
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        method: d.method,
        provenance: d.method.provenance(),
        hyper: d.hyper.clone(),
        config_hash: d.config_hash.clone(),
        structures: k,
        h,
        w,
        mean_expertness: d.mean_expertness(),
        samples,
        failed: d.failed.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_manifest_atomically(dir, MANIFEST_FILE, &bytes)
}

pub fn load_dfgt(dir: &Path) -> Result<DFGTDataset> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::Format(format!(
            "missing DF-GT manifest {}",
            path.display()
        )));
    }
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&text)?;
    if m.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported DF-GT manifest version {}",
            m.version
        )));
    }
    let mut entries = Vec::with_capacity(m.samples.len());
    for s in m.samples {
        let mut values = Array3::zeros((m.structures, m.h, m.w));
        for (k, f) in s.files.iter().enumerate() {
            let plane = read_png(&dir.join(f))?;
            if plane.dim() != (1, m.h, m.w) {
                return Err(Error::validation(
                    format!("DF-GT sample `{}`", s.sample_id),
                    vec![format!(
                        "{f}: shape {:?}, expected 1x{}x{}",
                        plane.dim(),
                        m.h,
                        m.w
                    )],
                ));
            }
            values
                .index_axis_mut(Axis(0), k)
                .assign(&plane.index_axis(Axis(0), 0));
        }
        entries.push(DFGTEntry {
            sample_id: s.sample_id,
            label: FusedLabel {
                values,
                provenance: m.provenance,
            },
            initial_loss: s.initial_loss,
            final_loss: s.final_loss,
            best_step: s.best_step,
            mean_expertness: s.mean_expertness,
            expertness: None,
        });
    }
    Ok(DFGTDataset {
        method: m.method,
        hyper: m.hyper,
        entries,
        failed: m.failed,
        config_hash: m.config_hash,
    })
}

/// Per-sample losses keyed by id, for reports.
pub fn loss_table(d: &DFGTDataset) -> BTreeMap<String, (f64, f64)> {
    d.entries
        .iter()
        .map(|e| (e.sample_id.clone(), (e.initial_loss, e.final_loss)))
        .collect()
}
