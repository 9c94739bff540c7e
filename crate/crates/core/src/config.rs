//! Run configuration: one TOML file driving every pipeline stage, with
//! per-stage content hashes used to detect stale artifacts.
//!
//! Stage `seed` fields are offsets added to the global seed.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Split;
use crate::dfgt::{DFGTHyper, Method};
use crate::diagnet::{DiagConfig, DiagHyper};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::synthgen::SynthSpec;
use crate::tgseg::{DiagMaskInput, SegConfig, SegHyper};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Root of all stage outputs. Relative paths resolve against the config file's directory.
    pub root: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            root: PathBuf::from("run"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegSection {
    pub blocks: Vec<usize>,
    pub bridge_widths: Vec<usize>,
    pub heads: usize,
    pub diag_mask: DiagMaskInput,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub aux_weight: f64,
    pub seed: u64,
}

impl Default for SegSection {
    fn default() -> Self {
        let h = SegHyper::default();
        let c = SegConfig::new(1, 1, 64, 64, 0);
        Self {
            blocks: c.connected.into_iter().collect(),
            bridge_widths: c.bridge_widths,
            heads: c.heads,
            diag_mask: c.diag_mask,
            epochs: h.epochs,
            batch_size: h.batch_size,
            lr: h.lr,
            aux_weight: h.aux_weight,
            seed: h.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DfgtSection {
    #[serde(flatten)]
    pub hyper: DFGTHyper,
    /// Splits that receive fused labels.
    pub splits: Vec<Split>,
}

impl Default for DfgtSection {
    fn default() -> Self {
        Self {
            hyper: DFGTHyper::default(),
            splits: vec![Split::Train, Split::Test],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthSpec,
    pub diagnosis: DiagHyper,
    pub dfgt: DfgtSection,
    pub segmentation: SegSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            paths: Paths::default(),
            synth: SynthSpec::default(),
            diagnosis: DiagHyper::default(),
            dfgt: DfgtSection::default(),
            segmentation: SegSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Pretrain,
    Dfgt,
    Train,
    Eval,
}

fn j<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config values serialize")
}

fn sha_hex(parts: &[&serde_json::Value]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(serde_json::to_vec(p).expect("config values serialize"));
        h.update([0u8]);
    }
    hex::encode(h.finalize())[..16].to_string()
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: RunConfig =
            toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file; a relative `paths.root` is anchored at the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_toml_str(&text)?;
        if c.paths.root.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            c.paths.root = base.join(&c.paths.root);
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.version != CONFIG_VERSION {
            v.push(format!(
                "version: {} is not supported (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        let collect = |v: &mut Vec<String>, r: Result<()>| {
            if let Err(e) = r {
                v.push(e.to_string());
            }
        };
        collect(&mut v, self.synth_spec().validate());
        collect(&mut v, self.diag_hyper().validate());
        collect(&mut v, self.dfgt_hyper().validate());
        collect(&mut v, self.seg_hyper().validate());
        collect(&mut v, self.eval.validate());
        let seg = &self.segmentation;
        if seg.blocks.iter().collect::<BTreeSet<_>>().len() != seg.blocks.len() {
            v.push("segmentation.blocks: duplicate entries".into());
        }
        if self.dfgt.splits.is_empty() {
            v.push("dfgt.splits: must be nonempty".into());
        }
        if !self.dfgt.splits.contains(&Split::Train) {
            v.push("dfgt.splits: must include train".into());
        }
        if !self.dfgt.splits.contains(&self.eval.split) {
            v.push(format!(
                "dfgt.splits: must include the eval split {}",
                self.eval.split.as_str()
            ));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::validation("run config", v))
        }
    }

    fn stage_seed(&self, offset: u64) -> u64 {
        self.seed.wrapping_add(offset)
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.stage_seed(self.synth.seed),
            ..self.synth.clone()
        }
    }

    pub fn diag_hyper(&self) -> DiagHyper {
        DiagHyper {
            seed: self.stage_seed(self.diagnosis.seed),
            ..self.diagnosis.clone()
        }
    }

    pub fn diag_config(&self) -> DiagConfig {
        DiagConfig::new(self.synth.c, 2, self.diag_hyper().seed)
    }

    pub fn dfgt_hyper(&self) -> DFGTHyper {
        DFGTHyper {
            seed: self.stage_seed(self.dfgt.hyper.seed),
            ..self.dfgt.hyper.clone()
        }
    }

    pub fn seg_hyper(&self) -> SegHyper {
        let s = &self.segmentation;
        SegHyper {
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            seed: self.stage_seed(s.seed),
            aux_weight: s.aux_weight,
        }
    }

    pub fn seg_config(&self) -> SegConfig {
        let s = &self.segmentation;
        SegConfig {
            connected: s.blocks.iter().copied().collect(),
            bridge_widths: s.bridge_widths.clone(),
            heads: s.heads,
            diag_mask: s.diag_mask,
            ..SegConfig::new(
                self.synth.c,
                2,
                self.synth.h,
                self.synth.w,
                self.seg_hyper().seed,
            )
        }
    }

    /// Content hash of everything a stage's output depends on, upstream stages included.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let synth = sha_hex(&[&j(&self.synth_spec())]);
        if stage == Stage::Synth {
            return synth;
        }
        let diag = sha_hex(&[
            &synth.clone().into(),
            &j(&self.diag_hyper()),
            &j(&self.diag_config()),
        ]);
        if stage == Stage::Pretrain {
            return diag;
        }
        let dfgt = sha_hex(&[
            &diag.clone().into(),
            &j(&self.dfgt_hyper()),
            &j(&self.dfgt.splits),
        ]);
        if stage == Stage::Dfgt {
            return dfgt;
        }
        let train = sha_hex(&[
            &dfgt.clone().into(),
            &j(&self.seg_hyper()),
            &j(&self.seg_config()),
        ]);
        if stage == Stage::Train {
            return train;
        }
        let mut eval = self.eval.clone();
        eval.output = None;
        sha_hex(&[&train.into(), &j(&eval)])
    }

    pub fn dataset_dir(&self, split: Split) -> PathBuf {
        self.paths.root.join("data").join(split.as_str())
    }

    pub fn diagnosis_checkpoint(&self) -> PathBuf {
        self.paths.root.join("checkpoints").join("diagnosis.ckpt")
    }

    pub fn dfgt_dir(&self, method: Method, split: Split) -> PathBuf {
        self.paths
            .root
            .join("dfgt")
            .join(method.as_str())
            .join(split.as_str())
    }

    pub fn seg_checkpoint(&self, method: Method) -> PathBuf {
        self.paths
            .root
            .join("checkpoints")
            .join(format!("tgseg_{}.ckpt", method.as_str()))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.eval
            .output
            .clone()
            .unwrap_or_else(|| self.paths.root.join("reports"))
    }
}
