//! Pipeline stages behind the `diffseg` executable.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use diffseg::config::{RunConfig, Stage};
use diffseg::data::{load_dataset, save_dataset, Dataset, Split, TrainHistory};
use diffseg::dfgt::{
    build_dfgt, load_dfgt, loss_table, save_dfgt, DFGTDataset, Method,
    MANIFEST_FILE as DFGT_MANIFEST,
};
use diffseg::diagnet::{self, DiagnosisNet};
use diffseg::eval::{
    bar_chart_png, compare_labels, dfgt_labels, dfgt_targets, eval_against_raters, eval_diagnosis,
    eval_self_fusion, loss_curves_png, Report,
};
use diffseg::synthgen::generate_dataset;
use diffseg::tgseg::{self, TGSegNet};
use diffseg::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "diffseg",
    version,
    about = "Diagnosis-first label fusion and Take-and-Give segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic multi-rater dataset.
    Synth(StageArgs),
    /// Train and freeze the diagnosis network.
    Pretrain(StageArgs),
    /// Optimize expertness maps and write DF-GT labels.
    Dfgt(StageArgs),
    /// Train the segmentation network on DF-GT labels.
    Train(StageArgs),
    /// Evaluate the trained segmentation network.
    Eval(StageArgs),
    /// Compare fusion strategies and draw plots.
    Report(StageArgs),
}

#[derive(Debug, Args)]
pub struct StageArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub method: Option<Method>,
    /// Connected blocks, e.g. `1,2,3`; `none` disables every bridge.
    #[arg(long)]
    pub blocks: Option<String>,
    /// Overrides the output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failed command: exit code plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Validation { .. }
            | Error::Format(_)
            | Error::Precondition(_)
            | Error::Shape(_) => EXIT_VALIDATION,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

pub fn parse_blocks(s: &str) -> Result<Vec<usize>, String> {
    let t = s.trim().trim_start_matches('{').trim_end_matches('}');
    if t.is_empty() || t.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    let mut out = BTreeSet::new();
    for part in t.split(',') {
        let p = part.trim();
        let p = p.strip_prefix(['B', 'b']).unwrap_or(p);
        let k: usize = p.parse().map_err(|_| format!("invalid block `{part}`"))?;
        out.insert(k);
    }
    Ok(out.into_iter().collect())
}

fn resolve_config(args: &StageArgs) -> Result<RunConfig, Failure> {
    if !args.config.is_file() {
        return Err(Failure::validation(format!(
            "config file not found: {}",
            args.config.display()
        )));
    }
    let mut c = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        c.seed = seed;
    }
    if let Some(m) = args.method {
        c.dfgt.hyper.method = m;
    }
    if let Some(b) = &args.blocks {
        c.segmentation.blocks = parse_blocks(b).map_err(|e| Failure {
            code: EXIT_USAGE,
            message: e,
        })?;
    }
    if let Some(out) = &args.out {
        c.paths.root = out.clone();
    }
    c.validate()?;
    Ok(c)
}

/// Sidecar written next to a checkpoint.
#[derive(Debug, Serialize, Deserialize)]
struct Stamp {
    config_hash: String,
    digest: String,
    losses: Vec<f64>,
}

fn stamp_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

fn write_stamp(checkpoint: &Path, stamp: &Stamp) -> Outcome {
    let mut bytes = serde_json::to_vec_pretty(stamp).map_err(Error::from)?;
    bytes.push(b'\n');
    let path = stamp_path(checkpoint);
    std::fs::write(&path, bytes).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn require(path: &Path, what: &str, hint: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::validation(format!(
            "missing {what}: {} (run `diffseg {hint}` first)",
            path.display()
        )))
    }
}

fn stale(what: &str, found: Option<&str>, expected: &str, hint: &str) -> Outcome {
    if found == Some(expected) {
        Ok(())
    } else {
        Err(Failure::validation(format!(
            "stale {what}: built for config hash {}, current config needs {expected} (rerun `diffseg {hint}`)",
            found.unwrap_or("<none>")
        )))
    }
}

fn load_split(c: &RunConfig, split: Split) -> Result<Dataset, Failure> {
    let dir = c.dataset_dir(split);
    require(
        &dir.join(diffseg::data::MANIFEST_FILE),
        "dataset manifest",
        "synth",
    )?;
    let d = load_dataset(&dir)?;
    let found = d.metadata().get("config_hash").and_then(|v| v.as_str());
    stale(
        &format!("{} dataset", split.as_str()),
        found,
        &c.stage_hash(Stage::Synth),
        "synth",
    )?;
    Ok(d)
}

fn load_diagnosis(c: &RunConfig) -> Result<DiagnosisNet, Failure> {
    let path = c.diagnosis_checkpoint();
    require(&path, "diagnosis checkpoint", "pretrain")?;
    require(&stamp_path(&path), "diagnosis checkpoint stamp", "pretrain")?;
    let stamp = read_stamp(&path)?;
    stale(
        "diagnosis checkpoint",
        Some(&stamp.config_hash),
        &c.stage_hash(Stage::Pretrain),
        "pretrain",
    )?;
    let net = DiagnosisNet::load(&path)?;
    if net.digest() != stamp.digest {
        return Err(Failure::validation(format!(
            "{} does not match its stamp",
            path.display()
        )));
    }
    Ok(net)
}

fn read_stamp(checkpoint: &Path) -> Result<Stamp, Failure> {
    let path = stamp_path(checkpoint);
    let text = std::fs::read_to_string(&path).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
}

fn load_labels(c: &RunConfig, split: Split) -> Result<DFGTDataset, Failure> {
    let method = c.dfgt.hyper.method;
    let dir = c.dfgt_dir(method, split);
    require(
        &dir.join(DFGT_MANIFEST),
        "DF-GT manifest",
        &format!("dfgt --method {}", method.as_str()),
    )?;
    let d = load_dfgt(&dir)?;
    stale(
        "DF-GT labels",
        d.config_hash.as_deref(),
        &c.stage_hash(Stage::Dfgt),
        "dfgt",
    )?;
    Ok(d)
}

fn history_from(losses: &[f64]) -> TrainHistory {
    let mut h = TrainHistory::new();
    for &l in losses {
        h.push(l, Default::default());
    }
    h
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, bytes).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn create_dir(path: &Path) -> Outcome {
    std::fs::create_dir_all(path).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

pub fn cmd_synth(c: &RunConfig) -> Outcome {
    let spec = c.synth_spec();
    let out = generate_dataset(&spec)?;
    let hash = c.stage_hash(Stage::Synth);
    for split in Split::ALL {
        let mut d = out.split(split).dataset.clone();
        d.set_metadata("config_hash", hash.clone().into())?;
        save_dataset(&d, &c.dataset_dir(split))?;
        let pos = d.labels().iter().filter(|&&l| l == 1).count();
        println!(
            "{}: {} samples, {} positive, {} negative",
            split.as_str(),
            d.len(),
            pos,
            d.len() - pos
        );
    }
    println!("config_hash = {hash}");
    Ok(())
}

pub fn cmd_pretrain(c: &RunConfig) -> Outcome {
    let train = load_split(c, Split::Train)?;
    let net = diagnet::build(c.diag_config())?;
    let (net, history) = diagnet::pretrain(net, &train, &c.diag_hyper())?;
    let path = c.diagnosis_checkpoint();
    create_dir(path.parent().expect("checkpoint has a parent"))?;
    net.save(&path)?;
    write_stamp(
        &path,
        &Stamp {
            config_hash: c.stage_hash(Stage::Pretrain),
            digest: net.digest(),
            losses: history.losses(),
        },
    )?;
    let l = history.losses();
    if let (Some(first), Some(last)) = (l.first(), l.last()) {
        println!("epochs {}: loss {first:.6} -> {last:.6}", l.len());
    }
    println!("checkpoint {}", path.display());
    Ok(())
}

pub fn cmd_dfgt(c: &RunConfig) -> Outcome {
    let net = load_diagnosis(c)?;
    let hyper = c.dfgt_hyper();
    let hash = c.stage_hash(Stage::Dfgt);
    for &split in &c.dfgt.splits {
        let data = load_split(c, split)?;
        let mut d = build_dfgt(&net, &data, &hyper)?;
        d.config_hash = Some(hash.clone());
        let dir = c.dfgt_dir(hyper.method, split);
        save_dfgt(&d, &dir)?;
        let table = loss_table(&d);
        let improved = table.values().filter(|(a, b)| b <= a).count();
        println!(
            "{} {}: {} labels, {} failed, {improved} with loss at or below uniform fusion",
            hyper.method.as_str(),
            split.as_str(),
            d.len(),
            d.failed.len()
        );
        for f in &d.failed {
            eprintln!("  failed {}: {}", f.sample_id, f.error);
        }
    }
    Ok(())
}

pub fn cmd_train(c: &RunConfig) -> Outcome {
    let diag = Arc::new(load_diagnosis(c)?);
    let train = load_split(c, Split::Train)?;
    let labels = load_labels(c, Split::Train)?;
    let usable = aligned(&train, &labels)?;
    let net = tgseg::build(c.seg_config(), diag)?;
    let (net, history) = tgseg::train(net, &labels, &usable, &c.seg_hyper())?;
    let path = c.seg_checkpoint(c.dfgt.hyper.method);
    create_dir(path.parent().expect("checkpoint has a parent"))?;
    net.save(&path)?;
    write_stamp(
        &path,
        &Stamp {
            config_hash: c.stage_hash(Stage::Train),
            digest: net.params().digest(),
            losses: history.losses(),
        },
    )?;
    let l = history.losses();
    if let (Some(first), Some(last)) = (l.first(), l.last()) {
        println!("epochs {}: loss {first:.6} -> {last:.6}", l.len());
    }
    println!("checkpoint {}", path.display());
    Ok(())
}

/// Samples that received a fused label. Optimizer failures are skipped.
fn aligned(data: &Dataset, labels: &DFGTDataset) -> Result<Dataset, Failure> {
    let kept: Vec<_> = data
        .samples()
        .iter()
        .filter(|s| labels.get(&s.sample_id).is_some())
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Failure::validation("no sample has a fused label"));
    }
    Ok(Dataset::new(
        data.split,
        data.dims(),
        kept,
        data.metadata().clone(),
    )?)
}

fn load_seg(c: &RunConfig, diag: Arc<DiagnosisNet>) -> Result<TGSegNet, Failure> {
    let path = c.seg_checkpoint(c.dfgt.hyper.method);
    require(&path, "segmentation checkpoint", "train")?;
    let stamp = read_stamp(&path)?;
    stale(
        "segmentation checkpoint",
        Some(&stamp.config_hash),
        &c.stage_hash(Stage::Train),
        "train",
    )?;
    Ok(TGSegNet::load(&path, diag)?)
}

fn new_report(c: &RunConfig, title: &str, stage: Stage) -> Report {
    let mut r = Report::new(title, c.stage_hash(stage));
    r.seed("global", c.seed)
        .seed("synth", c.synth_spec().seed)
        .seed("diagnosis", c.diag_hyper().seed)
        .seed("dfgt", c.dfgt_hyper().seed)
        .seed("segmentation", c.seg_hyper().seed);
    r
}

pub fn cmd_eval(c: &RunConfig) -> Outcome {
    let diag = Arc::new(load_diagnosis(c)?);
    let net = load_seg(c, diag.clone())?;
    let split = c.eval.split;
    let labels = load_labels(c, split)?;
    let data = aligned(&load_split(c, split)?, &labels)?;
    let th = &c.eval.thresholds;
    let preds = net.predict_dataset(&data)?;
    let method = c.dfgt.hyper.method;
    let mut r = new_report(
        c,
        &format!(
            "segmentation evaluation ({}, {})",
            method.as_str(),
            split.as_str()
        ),
        Stage::Eval,
    );
    r.insert("split", split.as_str())
        .insert("method", method.as_str())
        .insert("samples", data.len())
        .insert("blocks", format!("{:?}", c.segmentation.blocks));
    r.add_rater_table("dice", &eval_against_raters(&preds, &data, th)?);
    for (k, v) in eval_self_fusion(&preds, &dfgt_targets(&data, &labels)?, th)?
        .iter()
        .enumerate()
    {
        r.insert_f64(format!("self_fusion.s{k}"), *v);
    }
    match eval_diagnosis(&preds, &data, &diag) {
        Ok(a) => {
            r.insert_f64("diagnosis_auc", a);
        }
        Err(Error::UndefinedMetric(m)) => {
            r.insert("diagnosis_auc", format!("undefined ({m})"));
        }
        Err(e) => return Err(e.into()),
    }
    let path = c.report_dir().join(format!("eval_{}.txt", method.as_str()));
    r.write(&path)?;
    print!("{}", r.to_text());
    println!("report {}", path.display());
    Ok(())
}

pub fn cmd_report(c: &RunConfig) -> Outcome {
    let diag = load_diagnosis(c)?;
    let split = c.eval.split;
    let data = load_split(c, split)?;
    let mut fused = Vec::new();
    for &m in &c.eval.methods {
        let mut mc = c.clone();
        mc.dfgt.hyper.method = m;
        let dir = mc.dfgt_dir(m, split);
        let expected = mc.stage_hash(Stage::Dfgt);
        let labels = match load_dfgt(&dir) {
            Ok(d) if d.config_hash.as_deref() == Some(expected.as_str()) && d.failed.is_empty() => {
                d
            }
            _ => {
                println!(
                    "building {} labels for {} in memory",
                    m.as_str(),
                    split.as_str()
                );
                build_dfgt(&diag, &data, &mc.dfgt_hyper())?
            }
        };
        fused.push((
            m.provenance().as_str().to_string(),
            dfgt_labels(&data, &labels)?,
        ));
    }
    let rows = compare_labels(&data, &diag, &fused, &c.eval.thresholds)?;
    let mut r = new_report(
        c,
        &format!("fusion comparison ({})", split.as_str()),
        Stage::Dfgt,
    );
    r.insert("split", split.as_str())
        .insert("samples", data.len());
    r.add_fusion_rows("fusion", &rows);
    let dir = c.report_dir();
    r.write(&dir.join("fusion_report.txt"))?;
    let aucs: Vec<f64> = rows.iter().map(|row| row.auc).collect();
    write_bytes(&dir.join("fusion_auc.png"), &bar_chart_png(&aucs)?)?;
    let mut histories = vec![history_from(&read_stamp(&c.diagnosis_checkpoint())?.losses)];
    for m in Method::ALL {
        let ckpt = c.seg_checkpoint(m);
        if stamp_path(&ckpt).is_file() {
            histories.push(history_from(&read_stamp(&ckpt)?.losses));
        }
    }
    let refs: Vec<&TrainHistory> = histories.iter().collect();
    write_bytes(&dir.join("loss_curves.png"), &loss_curves_png(&refs)?)?;
    for row in &rows {
        println!("{:<16} auc {:.4}", row.name, row.auc);
    }
    println!("report {}", dir.join("fusion_report.txt").display());
    Ok(())
}

/// Runs one command and returns its exit code. Errors go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let (args, stage): (&StageArgs, fn(&RunConfig) -> Outcome) = match &cli.command {
        Command::Synth(a) => (a, cmd_synth),
        Command::Pretrain(a) => (a, cmd_pretrain),
        Command::Dfgt(a) => (a, cmd_dfgt),
        Command::Train(a) => (a, cmd_train),
        Command::Eval(a) => (a, cmd_eval),
        Command::Report(a) => (a, cmd_report),
    };
    match resolve_config(args).and_then(|c| stage(&c)) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_sets_parse() {
        assert_eq!(parse_blocks("1,2,3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_blocks("{B1, B3}").unwrap(), vec![1, 3]);
        assert_eq!(parse_blocks("none").unwrap(), Vec::<usize>::new());
        assert_eq!(parse_blocks("").unwrap(), Vec::<usize>::new());
        assert!(parse_blocks("1,x").is_err());
    }

    #[test]
    fn errors_map_to_exit_codes() {
        assert_eq!(
            Failure::from(Error::Format("x".into())).code,
            EXIT_VALIDATION
        );
        assert_eq!(
            Failure::from(Error::Numerical {
                step: 1,
                detail: "nan".into()
            })
            .code,
            EXIT_RUNTIME
        );
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["diffseg"]), EXIT_USAGE);
        assert_eq!(run(["diffseg", "synth"]), EXIT_USAGE);
        assert_eq!(
            run(["diffseg", "synth", "--config", "x", "--method", "bogus"]),
            EXIT_USAGE
        );
        assert_eq!(run(["diffseg", "--help"]), EXIT_OK);
    }
}
