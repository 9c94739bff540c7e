//! Synthetic fundus-like benchmark: a disc and a nested cup whose vertical
//! ratio decides the label, annotated by raters with controllable biases.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{quantize, Dataset, Dims, MultiRaterSample, Split};
use crate::error::{Error, Result};
use crate::metrics::vcdr;
use crate::resample::{gaussian_blur, SamplingGrid};

pub const DISC: usize = 0;
pub const CUP: usize = 1;
pub const STRUCTURES: usize = 2;

/// Width of the linear boundary ramp of rendered ellipses, in pixels.
const RAMP_PX: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaterProfile {
    pub name: String,
    pub cup_scale: f64,
    /// Half-width of a uniform per-sample perturbation added to `cup_scale`.
    #[serde(default)]
    pub cup_scale_spread: f64,
    pub boundary_jitter_px: f64,
    pub diagnosis_informed: bool,
    /// Extra cup multiplier applied on positive cases when `diagnosis_informed`.
    #[serde(default = "default_boost")]
    pub positive_boost: f64,
    pub smoothing_radius_px: f64,
}

fn default_boost() -> f64 {
    1.2
}

impl RaterProfile {
    pub fn identity(name: &str) -> Self {
        Self {
            name: name.to_string(),
            cup_scale: 1.0,
            cup_scale_spread: 0.0,
            boundary_jitter_px: 0.0,
            diagnosis_informed: false,
            positive_boost: default_boost(),
            smoothing_radius_px: 0.0,
        }
    }

    pub fn effective_cup_scale(&self, label: u8) -> f64 {
        if self.diagnosis_informed && label == 1 {
            self.cup_scale * self.positive_boost
        } else {
            self.cup_scale
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.cup_scale > 0.0 && self.cup_scale.is_finite()) {
            v.push(format!(
                "{}: cup_scale {} must be positive",
                self.name, self.cup_scale
            ));
        }
        if !(self.positive_boost > 0.0 && self.positive_boost.is_finite()) {
            v.push(format!(
                "{}: positive_boost {} must be positive",
                self.name, self.positive_boost
            ));
        }
        if !(self.cup_scale_spread >= 0.0 && self.cup_scale_spread < self.cup_scale) {
            v.push(format!(
                "{}: cup_scale_spread {} must lie in [0, cup_scale)",
                self.name, self.cup_scale_spread
            ));
        }
        if !(self.boundary_jitter_px >= 0.0) {
            v.push(format!(
                "{}: boundary_jitter_px must be non-negative",
                self.name
            ));
        }
        if !(self.smoothing_radius_px >= 0.0) {
            v.push(format!(
                "{}: smoothing_radius_px must be non-negative",
                self.name
            ));
        }
        v
    }

    fn is_identity(&self, label: u8) -> bool {
        self.effective_cup_scale(label) == 1.0
            && self.cup_scale_spread == 0.0
            && self.boundary_jitter_px == 0.0
            && self.smoothing_radius_px == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometrySpec {
    /// Vertical disc radius range in pixels.
    pub disc_radius: [f64; 2],
    /// Range of the latent vertical cup-to-disc ratio.
    pub true_vcdr: [f64; 2],
    /// Horizontal over vertical radius range for both ellipses.
    pub aspect: [f64; 2],
    pub center_jitter_px: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub texture_amplitude: f64,
    pub streak_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub raters: Vec<RaterProfile>,
    pub vcdr_threshold: f64,
    pub geometry: GeometrySpec,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        Self {
            disc_radius: [12.0, 18.0],
            true_vcdr: [0.45, 0.72],
            aspect: [0.9, 1.1],
            center_jitter_px: 3.0,
        }
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            texture_amplitude: 0.05,
            streak_count: 4,
        }
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        let jitter = 1.0;
        let spread = 0.6;
        Self {
            train: 200,
            val: 20,
            test: 100,
            h: 64,
            w: 64,
            c: 1,
            raters: vec![
                RaterProfile::identity("identity"),
                RaterProfile {
                    cup_scale: 1.15,
                    cup_scale_spread: spread,
                    boundary_jitter_px: jitter,
                    ..RaterProfile::identity("over")
                },
                RaterProfile {
                    cup_scale: 0.85,
                    cup_scale_spread: spread,
                    boundary_jitter_px: jitter,
                    ..RaterProfile::identity("under")
                },
                RaterProfile {
                    diagnosis_informed: true,
                    boundary_jitter_px: jitter,
                    ..RaterProfile::identity("informed")
                },
            ],
            vcdr_threshold: 0.6,
            geometry: GeometrySpec::default(),
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.raters.len() < 2 {
            v.push(format!(
                "raters: need at least 2, got {}",
                self.raters.len()
            ));
        }
        for r in &self.raters {
            v.extend(r.violations());
        }
        if self.c != 1 && self.c != 3 {
            v.push(format!("c: {} must be 1 or 3", self.c));
        }
        if self.h < 16 || self.w < 16 {
            v.push(format!(
                "h, w: {}x{} below the 16x16 minimum",
                self.h, self.w
            ));
        }
        let t = self.vcdr_threshold;
        if !(t > 0.0 && t < 1.0) {
            v.push(format!("vcdr_threshold: {t} must lie in (0, 1)"));
        }
        let [lo, hi] = self.geometry.true_vcdr;
        if !(lo < t && t < hi) {
            v.push(format!(
                "geometry.true_vcdr: [{lo}, {hi}] must straddle the threshold {t}"
            ));
        }
        if !(lo > 0.0 && hi < 1.0) {
            v.push(format!(
                "geometry.true_vcdr: [{lo}, {hi}] must lie within (0, 1)"
            ));
        }
        let [r0, r1] = self.geometry.disc_radius;
        let [a0, a1] = self.geometry.aspect;
        if !(r0 > 2.0 && r0 <= r1) {
            v.push(format!("geometry.disc_radius: invalid range [{r0}, {r1}]"));
        }
        if !(a0 > 0.0 && a0 <= a1) {
            v.push(format!("geometry.aspect: invalid range [{a0}, {a1}]"));
        }
        let reach = r1 * a1.max(1.0) + self.geometry.center_jitter_px + RAMP_PX;
        if 2.0 * reach >= self.h.min(self.w) as f64 {
            v.push(format!(
                "geometry: disc of radius up to {reach:.1} px does not fit a {}x{} grid",
                self.h, self.w
            ));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::validation("synth spec", v))
        }
    }
}

/// The pre-rater geometry of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub sample_id: String,
    /// `[K, h, w]` with the disc at index 0 and the cup at index 1.
    pub masks: Array3<f64>,
    /// Ratio of the rendered masks at threshold 0.5.
    pub vcdr: f64,
}

#[derive(Clone, Debug)]
pub struct SynthSplit {
    pub dataset: Dataset,
    pub latents: Vec<LatentSample>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub train: SynthSplit,
    pub val: SynthSplit,
    pub test: SynthSplit,
}

impl SynthOutput {
    pub fn split(&self, split: Split) -> &SynthSplit {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn split_index(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

/// SplitMix64 finalizer, used to derive independent per-sample streams.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let key = mix64(mix64(mix64(seed) ^ split_index(split)) ^ index as u64);
    ChaCha8Rng::seed_from_u64(key)
}

/// Filled ellipse with a linear boundary ramp; exactly 0.5 on the nominal outline.
pub fn soft_ellipse(h: usize, w: usize, center: (f64, f64), radii: (f64, f64)) -> Array2<f64> {
    let (ry, rx) = radii;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dy = (y as f64 - center.0) / ry;
        let dx = (x as f64 - center.1) / rx;
        let rho = (dy * dy + dx * dx).sqrt();
        // Radial distance to the outline along the ray through the pixel.
        let reach = if rho > 0.0 {
            let (uy, ux) = (dy / rho, dx / rho);
            ((uy * ry).powi(2) + (ux * rx).powi(2)).sqrt()
        } else {
            ry.min(rx)
        };
        let signed = (rho - 1.0) * reach;
        (0.5 - signed / RAMP_PX).clamp(0.0, 1.0)
    })
}

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn latent_geometry<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Array3<f64> {
    let g = &spec.geometry;
    let (h, w) = (spec.h, spec.w);
    let j = g.center_jitter_px;
    let cy = (h as f64 - 1.0) / 2.0
        + if j > 0.0 {
            rng.random_range(-j..j)
        } else {
            0.0
        };
    let cx = (w as f64 - 1.0) / 2.0
        + if j > 0.0 {
            rng.random_range(-j..j)
        } else {
            0.0
        };
    let rd = uniform(rng, g.disc_radius);
    let disc_aspect = uniform(rng, g.aspect);
    let ratio = uniform(rng, g.true_vcdr);
    let cup_aspect = uniform(rng, g.aspect)
        .min(disc_aspect / ratio.max(1e-6) * 0.95)
        .max(0.5);
    let rc = ratio * rd;
    // Cup sits slightly off-centre, always inside the disc.
    let room = (rd - rc) * 0.3;
    let oy = if room > 0.0 {
        rng.random_range(-room..room)
    } else {
        0.0
    };
    let mut out = Array3::zeros((STRUCTURES, h, w));
    out.index_axis_mut(Axis(0), DISC)
        .assign(&soft_ellipse(h, w, (cy, cx), (rd, rd * disc_aspect)));
    let cup = soft_ellipse(h, w, (cy + oy, cx), (rc, rc * cup_aspect));
    let disc = out.index_axis(Axis(0), DISC).to_owned();
    out.index_axis_mut(Axis(0), CUP).assign(
        &ndarray::Zip::from(&cup)
            .and(&disc)
            .map_collect(|&c, &d| c.min(d)),
    );
    out
}

fn centroid(plane: &Array2<f64>) -> (f64, f64) {
    let (mut m, mut sy, mut sx) = (0.0, 0.0, 0.0);
    for ((y, x), &v) in plane.indexed_iter() {
        m += v;
        sy += v * y as f64;
        sx += v * x as f64;
    }
    if m <= 0.0 {
        let (h, w) = plane.dim();
        ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
    } else {
        (sy / m, sx / m)
    }
}

/// Smooth random displacement field whose per-axis RMS is `amplitude` pixels.
/// Wavelengths span a quarter to half of the grid, so opposite edges of a
/// structure move independently rather than the structure translating as a whole.
fn jitter_grid<R: Rng>(h: usize, w: usize, amplitude: f64, rng: &mut R) -> SamplingGrid {
    const WAVES: usize = 3;
    let mut waves = Vec::with_capacity(2 * WAVES);
    for _ in 0..2 * WAVES {
        let cycles: f64 = rng.random_range(2.0..4.0);
        let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let fy = cycles * dir.sin() * std::f64::consts::TAU / h as f64;
        let fx = cycles * dir.cos() * std::f64::consts::TAU / w as f64;
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        // Unit-variance term: a sinusoid of amplitude sqrt(2).
        let amp: f64 = if rng.random::<bool>() {
            2f64.sqrt()
        } else {
            -(2f64.sqrt())
        };
        waves.push((fy, fx, phase, amp));
    }
    let norm = amplitude / (WAVES as f64).sqrt();
    SamplingGrid::from_fn(h, w, |y, x| {
        let field = |ws: &[(f64, f64, f64, f64)]| -> f64 {
            ws.iter()
                .map(|&(fy, fx, p, a)| a * (fy * y as f64 + fx * x as f64 + p).sin())
                .sum::<f64>()
                * norm
        };
        (
            y as f64 + field(&waves[..WAVES]),
            x as f64 + field(&waves[WAVES..]),
        )
    })
}

/// One rater's annotation of the latent `[K, h, w]` masks (disc, cup).
///
/// The cup is rescaled about its centroid by the profile's effective scale,
/// both structures share one smooth jitter field, optional Gaussian smoothing
/// follows, and finally the cup is clipped to the disc.
pub fn rater_annotate<R: Rng>(
    latent: &Array3<f64>,
    profile: &RaterProfile,
    label: u8,
    rng: &mut R,
) -> Array3<f64> {
    let (k, h, w) = latent.dim();
    assert_eq!(
        k, STRUCTURES,
        "rater_annotate expects disc and cup channels"
    );
    if profile.is_identity(label) {
        return latent.clone();
    }
    let mut out = latent.clone();
    let mut scale = profile.effective_cup_scale(label);
    if profile.cup_scale_spread > 0.0 {
        scale += rng.random_range(-profile.cup_scale_spread..=profile.cup_scale_spread);
    }
    if scale != 1.0 {
        let cup = latent.index_axis(Axis(0), CUP).to_owned();
        let c = centroid(&cup);
        let grid = SamplingGrid::affine(h, w, c, 0.0, scale, (0.0, 0.0));
        out.index_axis_mut(Axis(0), CUP)
            .assign(&grid.apply(cup.view()));
    }
    if profile.boundary_jitter_px > 0.0 {
        let grid = jitter_grid(h, w, profile.boundary_jitter_px, rng);
        for mut plane in out.outer_iter_mut() {
            let moved = grid.apply(plane.view());
            plane.assign(&moved);
        }
    }
    if profile.smoothing_radius_px > 0.0 {
        for mut plane in out.outer_iter_mut() {
            let smooth = gaussian_blur(plane.view(), profile.smoothing_radius_px);
            plane.assign(&smooth);
        }
    }
    let disc = out.index_axis(Axis(0), DISC).to_owned();
    out.index_axis_mut(Axis(0), CUP)
        .zip_mut_with(&disc, |c, &d| *c = c.min(d));
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

fn render_image<R: Rng>(spec: &SynthSpec, latent: &Array3<f64>, rng: &mut R) -> Array3<f64> {
    let (h, w) = (spec.h, spec.w);
    let raw = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0));
    let texture = gaussian_blur(raw.view(), 2.0);
    let peak = texture
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let mut base = Array2::from_shape_fn((h, w), |(y, x)| {
        0.25 + spec.noise.texture_amplitude * texture[[y, x]] / peak
            + 0.35 * latent[[DISC, y, x]]
            + 0.12 * latent[[CUP, y, x]]
    });
    for _ in 0..spec.noise.streak_count {
        let (y0, x0) = (
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
        );
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (sa, ca) = angle.sin_cos();
        let depth = rng.random_range(0.08..0.18);
        for ((y, x), v) in base.indexed_iter_mut() {
            let d = ((y as f64 - y0) * ca - (x as f64 - x0) * sa).abs();
            *v -= depth * (1.0 - d / 1.5).max(0.0);
        }
    }
    let mut img = Array3::zeros((spec.c, h, w));
    for (ch, mut plane) in img.outer_iter_mut().enumerate() {
        let tint = 1.0 - 0.15 * ch as f64;
        plane.assign(&base.mapv(|v| (v * tint).clamp(0.0, 1.0)));
    }
    img
}

/// Generates one split. Each sample draws from its own stream keyed by
/// `(seed, split, index)`, so samples are independent of generation order.
pub fn generate_split(spec: &SynthSpec, split: Split) -> Result<SynthSplit> {
    spec.validate()?;
    let n = spec.raters.len();
    let mut samples = Vec::with_capacity(spec.count(split));
    let mut latents = Vec::with_capacity(spec.count(split));
    let mut clipped = Vec::new();
    for index in 0..spec.count(split) {
        let mut rng = sample_rng(spec.seed, split, index);
        let sample_id = format!("{}_{index:04}", split.as_str());
        let latent = latent_geometry(spec, &mut rng);
        let v = vcdr(
            latent.index_axis(Axis(0), CUP),
            latent.index_axis(Axis(0), DISC),
            0.5,
        )?;
        let label = u8::from(v > spec.vcdr_threshold);
        let image = render_image(spec, &latent, &mut rng);
        let mut masks = Array4::zeros((n, STRUCTURES, spec.h, spec.w));
        for (r, profile) in spec.raters.iter().enumerate() {
            let annotated = rater_annotate(&latent, profile, label, &mut rng);
            if cup_was_clipped(&latent, profile, label, &annotated) {
                clipped.push(format!("{sample_id}/{}", profile.name));
            }
            masks.slice_mut(s![r, .., .., ..]).assign(&annotated);
        }
        samples.push(MultiRaterSample {
            sample_id: sample_id.clone(),
            image: image.mapv(quantize),
            masks: masks.mapv(quantize),
            label,
        });
        latents.push(LatentSample {
            sample_id,
            masks: latent,
            vcdr: v,
        });
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("generator".into(), serde_json::Value::from("synthgen"));
    metadata.insert("seed".into(), serde_json::Value::from(spec.seed));
    metadata.insert("synth_spec".into(), serde_json::to_value(spec)?);
    metadata.insert("clipped_cups".into(), serde_json::to_value(&clipped)?);
    let dims = Dims {
        n,
        k: STRUCTURES,
        h: spec.h,
        w: spec.w,
        c: spec.c,
    };
    Ok(SynthSplit {
        dataset: Dataset::new(split, dims, samples, metadata)?,
        latents,
    })
}

fn cup_was_clipped(
    latent: &Array3<f64>,
    profile: &RaterProfile,
    label: u8,
    annotated: &Array3<f64>,
) -> bool {
    // A scaled cup whose nominal vertical reach passes the disc's.
    let scale = profile.effective_cup_scale(label);
    if scale <= 1.0 {
        return false;
    }
    let rows = |plane: ndarray::ArrayView2<f64>| -> usize {
        plane
            .outer_iter()
            .filter(|r| r.iter().any(|&v| v > 0.5))
            .count()
    };
    let cup_rows = rows(latent.index_axis(Axis(0), CUP)) as f64 * scale;
    cup_rows > rows(annotated.index_axis(Axis(0), DISC)) as f64
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<SynthOutput> {
    Ok(SynthOutput {
        train: generate_split(spec, Split::Train)?,
        val: generate_split(spec, Split::Val)?,
        test: generate_split(spec, Split::Test)?,
    })
}
