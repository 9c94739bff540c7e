//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion;
//! run with `cargo test -p diffseg-core --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, Array3, Array4, Axis, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diffseg::data::{load_dataset, save_dataset, Dataset, ExpertnessMap};
use diffseg::dfgt::{build_dfgt, optimize, save_dfgt, DFGTDataset, DFGTHyper, Method};
use diffseg::diagnet::{self, DiagConfig, DiagHyper, DiagnosisNet};
use diffseg::eval::{
    compare_labels, dfgt_labels, dfgt_targets, eval_against_raters, eval_self_fusion, Report,
};
use diffseg::fusion::{fuse, majority_vote, normalize_expertness, ExpertnessLogits};
use diffseg::metrics::{auc, high_freq_energy, soft_dice, vcdr, DEFAULT_THRESHOLDS};
use diffseg::nn::{ParamStore, Session};
use diffseg::synthgen::{generate_dataset, SynthOutput, SynthSpec, CUP, DISC};
use diffseg::tgseg::{
    self, attention, give_module, patchify, take_module, unpatchify, AttnParams, SegConfig,
    SegHyper,
};

struct Line {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
    budget: f64,
}

#[derive(Default)]
struct Ledger {
    lines: Vec<Line>,
}

impl Ledger {
    fn record(
        &mut self,
        id: &'static str,
        name: &'static str,
        budget: f64,
        started: Instant,
        pass: bool,
        detail: String,
    ) {
        let secs = started.elapsed().as_secs_f64();
        let pass = pass && secs < budget;
        let line = Line {
            id,
            name,
            pass,
            detail,
            secs,
            budget,
        };
        println!("{}", render(&line));
        self.lines.push(line);
    }
}

fn render(l: &Line) -> String {
    format!(
        "[{}] criterion {} {}: {} ({:.1}s of {:.0}s)",
        if l.pass { "PASS" } else { "FAIL" },
        l.id,
        l.name,
        l.detail,
        l.secs,
        l.budget
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Artifacts shared by criteria 3-7: default synthetic set, pretrained
/// diagnosis network, and ExpG DF-GT for the train and test splits.
struct Pipeline {
    data: SynthOutput,
    net: DiagnosisNet,
    train_dfgt: DFGTDataset,
    test_dfgt: DFGTDataset,
    secs: f64,
}

fn pipeline() -> Pipeline {
    let t = Instant::now();
    let spec = SynthSpec::default();
    let data = generate_dataset(&spec).expect("default synthetic set");
    let (net, _) = diagnet::pretrain(
        diagnet::build(DiagConfig::new(spec.c, 2, 0)).unwrap(),
        &data.train.dataset,
        &DiagHyper::default(),
    )
    .expect("pretraining");
    let hyper = DFGTHyper::default();
    let train_dfgt = build_dfgt(&net, &data.train.dataset, &hyper).expect("train DF-GT");
    let test_dfgt = build_dfgt(&net, &data.test.dataset, &hyper).expect("test DF-GT");
    Pipeline {
        data,
        net,
        train_dfgt,
        test_dfgt,
        secs: t.elapsed().as_secs_f64(),
    }
}

fn criterion_1(ledger: &mut Ledger) {
    let t = Instant::now();
    let spec = SynthSpec {
        train: 3,
        val: 0,
        test: 0,
        ..SynthSpec::default()
    };
    let data = generate_dataset(&spec).unwrap().train.dataset;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..3u64 {
        let net = diagnet::build(DiagConfig::new(1, 2, seed))
            .unwrap()
            .freeze();
        let sample = &data.samples()[seed as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let base = Array4::from_shape_fn(sample.masks.dim(), |_| rng.random_range(-1.0..1.0));
        let logits = ExpertnessLogits::new(base.clone()).unwrap();
        let (_, grad) = net
            .loss_and_grad(&sample.image, &sample.masks, &logits, sample.label)
            .unwrap();
        // Coordinates where the raters disagree; elsewhere the gradient is identically zero.
        let (n, k, h, w) = sample.masks.dim();
        let informative: Vec<[usize; 4]> = (0..k)
            .flat_map(|s| (0..h).flat_map(move |y| (0..w).map(move |x| (s, y, x))))
            .filter(|&(s, y, x)| {
                let v: Vec<f64> = (0..n).map(|r| sample.masks[[r, s, y, x]]).collect();
                v.iter().cloned().fold(f64::MIN, f64::max)
                    - v.iter().cloned().fold(f64::MAX, f64::min)
                    > 1e-3
            })
            .flat_map(|(s, y, x)| (0..n).map(move |r| [r, s, y, x]))
            .collect();
        for _ in 0..16 {
            let idx = informative[rng.random_range(0..informative.len())];
            let eval = |d: f64| {
                let mut l = base.clone();
                l[idx] += d;
                net.loss_and_grad(
                    &sample.image,
                    &sample.masks,
                    &ExpertnessLogits::new(l).unwrap(),
                    sample.label,
                )
                .unwrap()
                .0
            };
            let fd = (eval(1e-3) - eval(-1e-3)) / 2e-3;
            let g = grad[idx];
            let err = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
            worst = worst.max(err);
            checked += 1;
        }
    }
    ledger.record(
        "1",
        "gradient correctness",
        60.0,
        t,
        worst < 1e-3,
        format!("{checked} coordinates, worst relative error {worst:.2e} (< 1e-3)"),
    );
}

fn brute_dice(p: &Array2<f64>, g: &Array2<f64>, th: &[f64]) -> f64 {
    let mut total = 0.0;
    for &t in th {
        let (mut a, mut b, mut i) = (0usize, 0usize, 0usize);
        for y in 0..p.nrows() {
            for x in 0..p.ncols() {
                let pa = p[[y, x]] > t;
                let gb = g[[y, x]] > t;
                a += pa as usize;
                b += gb as usize;
                i += (pa && gb) as usize;
            }
        }
        total += if a + b == 0 {
            1.0
        } else {
            2.0 * i as f64 / (a + b) as f64
        };
    }
    total / th.len() as f64
}

fn brute_auc(s: &[f64], l: &[u8]) -> f64 {
    let mut twice = 0u64;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &li) in l.iter().enumerate() {
        if li == 1 {
            p += 1;
        } else {
            n += 1;
            continue;
        }
        for (j, &lj) in l.iter().enumerate() {
            if lj == 0 {
                twice += if s[i] > s[j] {
                    2
                } else if s[i] == s[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice as f64 / 2.0 / (p * n) as f64
}

fn criterion_2(ledger: &mut Ledger) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut dice_ok = 0;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        // Coarse levels produce ties with the thresholds as well as generic values.
        let draw = |rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((h, w), |_| {
                if rng.random_bool(0.3) {
                    rng.random_range(0..=10) as f64 / 10.0
                } else {
                    rng.random::<f64>()
                }
            })
        };
        let (p, g) = (draw(&mut rng), draw(&mut rng));
        if soft_dice(p.view(), g.view(), &DEFAULT_THRESHOLDS).unwrap()
            == brute_dice(&p, &g, &DEFAULT_THRESHOLDS)
        {
            dice_ok += 1;
        }
    }
    let mut auc_ok = 0;
    for _ in 0..100 {
        let len = rng.random_range(2..=20);
        let mut labels: Vec<u8> = (0..len).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..len)
            .map(|_| rng.random_range(0..8) as f64 / 7.0)
            .collect();
        if auc(&scores, &labels).unwrap() == brute_auc(&scores, &labels) {
            auc_ok += 1;
        }
    }
    let hand_auc = auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    let a = Array2::from_shape_fn((8, 8), |(y, x)| ((y * 8 + x) % 9) as f64 / 9.0);
    let left = Array2::from_shape_fn((4, 4), |(_, x)| if x < 2 { 1.0 } else { 0.0 });
    let right = left.mapv(|v| 1.0 - v);
    let identity = soft_dice(a.view(), a.view(), &DEFAULT_THRESHOLDS).unwrap();
    let disjoint = soft_dice(left.view(), right.view(), &DEFAULT_THRESHOLDS).unwrap();
    let pass =
        dice_ok == 100 && auc_ok == 100 && hand_auc == 0.75 && identity == 1.0 && disjoint == 0.0;
    ledger.record(
        "2",
        "metric oracles",
        60.0,
        t,
        pass,
        format!(
            "dice {dice_ok}/100 exact, auc {auc_ok}/100 exact, hand auc {hand_auc}, identity {identity}, disjoint {disjoint}"
        ),
    );
}

fn criterion_3(ledger: &mut Ledger, maps: &[&ExpertnessMap]) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mv_exact = true;
    for _ in 0..50 {
        let dims = (
            rng.random_range(2..6),
            rng.random_range(1..3),
            rng.random_range(1..9),
            rng.random_range(1..9),
        );
        let masks = Array4::from_shape_fn(dims, |_| rng.random::<f64>());
        let uniform =
            normalize_expertness(&ExpertnessLogits::zeros(dims.0, dims.1, dims.2, dims.3));
        mv_exact &= fuse(&masks, &uniform).unwrap().values == majority_vote(&masks).values;
    }
    // 1000 random pixels, each with its own rater count and logits.
    let mut hull = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..8);
        let masks = Array4::from_shape_fn((n, 1, 1, 1), |_| rng.random::<f64>());
        let logits = Array4::from_shape_fn((n, 1, 1, 1), |_| rng.random_range(-20.0..20.0));
        let m = normalize_expertness(&ExpertnessLogits::new(logits).unwrap());
        hull = hull.max(fuse(&masks, &m).unwrap().hull_violation(&masks));
    }
    let simplex = maps
        .iter()
        .map(|m| m.max_simplex_error())
        .fold(0.0f64, f64::max);
    let pass = mv_exact && hull <= 1e-6 && simplex <= 1e-5;
    ledger.record(
        "3",
        "fusion algebra",
        60.0,
        t,
        pass,
        format!(
            "uniform fusion == MV exactly: {mv_exact}; hull violation {hull:.1e}; simplex error {simplex:.1e} over {} optimizer outputs",
            maps.len()
        ),
    );
}

fn criterion_4(ledger: &mut Ledger, p: &Pipeline) {
    let t = Instant::now();
    let descended = p
        .train_dfgt
        .entries
        .iter()
        .filter(|e| e.final_loss <= e.initial_loss)
        .count();
    let total = p.data.train.dataset.len();
    let frac = descended as f64 / total as f64;
    let test = &p.data.test.dataset;
    let labels = dfgt_labels(test, &p.test_dfgt).unwrap();
    let rows = compare_labels(
        test,
        &p.net,
        &[("dfgt_expg".into(), labels)],
        &DEFAULT_THRESHOLDS,
    )
    .unwrap();
    let (mv_auc, dfgt_auc) = (rows[0].auc, rows[1].auc);
    let n = p.data.train.dataset.dims().n;
    let informed = p.data.train.dataset.metadata()["synth_spec"]["raters"]
        .as_array()
        .unwrap()
        .iter()
        .position(|r| r["diagnosis_informed"].as_bool() == Some(true))
        .unwrap();
    let mean_exp = mean(
        &p.train_dfgt
            .entries
            .iter()
            .map(|e| mean(&e.mean_expertness[informed]))
            .collect::<Vec<_>>(),
    );
    let (a, b, c) = (
        frac >= 0.9,
        dfgt_auc >= mv_auc + 0.03,
        mean_exp > 1.0 / n as f64,
    );
    let secs = p.secs + t.elapsed().as_secs_f64();
    let started = Instant::now() - std::time::Duration::from_secs_f64(secs);
    ledger.record(
        "4",
        "DF-GT descent and utility",
        900.0,
        started,
        a && b && c && p.train_dfgt.failed.is_empty(),
        format!(
            "(a) {descended}/{total} train samples at or below uniform loss [{}]; (b) test AUC ExpG {dfgt_auc:.4} vs MV {mv_auc:.4} [{}]; (c) informed rater expertness {mean_exp:.4} vs 1/n {:.4} [{}]",
            ok(a),
            ok(b),
            1.0 / n as f64,
            ok(c)
        ),
    );
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "miss"
    }
}

fn map_energy(m: &ExpertnessMap) -> f64 {
    let w = m.weights();
    let (n, k, _, _) = w.dim();
    let mut e = 0.0;
    for r in 0..n {
        for s in 0..k {
            e += high_freq_energy(w.index_axis(Axis(0), r).index_axis(Axis(0), s), 0.25).unwrap();
        }
    }
    e / (n * k) as f64
}

fn criterion_5(ledger: &mut Ledger, p: &Pipeline) -> Vec<ExpertnessMap> {
    let t = Instant::now();
    let samples = &p.data.test.dataset.samples()[..20];
    let mut energy = BTreeMap::new();
    let mut maps = Vec::new();
    for m in [Method::Raw, Method::TransRob, Method::Fourier] {
        let hyper = DFGTHyper::with_method(m);
        let mut e = Vec::new();
        for s in samples {
            let o = optimize(&p.net, s, &hyper).unwrap();
            e.push(map_energy(&o.expertness));
            maps.push(o.expertness);
        }
        energy.insert(m.as_str(), mean(&e));
    }
    let expg: Vec<f64> = samples
        .iter()
        .map(|s| {
            map_energy(
                p.test_dfgt
                    .get(&s.sample_id)
                    .unwrap()
                    .expertness
                    .as_ref()
                    .unwrap(),
            )
        })
        .collect();
    let (raw, tr, fo, ex) = (
        energy["raw"],
        energy["transrob"],
        energy["fourier"],
        mean(&expg),
    );
    let pass = ex <= 0.5 * raw && tr <= raw && fo <= raw;
    ledger.record(
        "5",
        "ExpG smoothness",
        600.0,
        t,
        pass,
        format!("mean high-frequency fraction over 20 maps: expg {ex:.4}, raw {raw:.4}, transrob {tr:.4}, fourier {fo:.4}"),
    );
    maps
}

fn criterion_6(ledger: &mut Ledger, p: &Pipeline) {
    let t = Instant::now();
    let train = p.data.train.dataset.truncated(32);
    let train_targets = DFGTDataset {
        entries: p.train_dfgt.entries[..train.len()].to_vec(),
        ..p.train_dfgt.clone()
    };
    let test = &p.data.test.dataset;
    let targets = dfgt_targets(test, &p.test_dfgt).unwrap();
    let net = Arc::new(p.net.clone());
    let mut dice = BTreeMap::<&str, Vec<f64>>::new();
    let mut halved = true;
    let mut ratios = Vec::new();
    for seed in 0..3u64 {
        for (name, blocks) in [("bridged", vec![1, 2, 3]), ("plain", vec![])] {
            let config = SegConfig::new(1, 2, 64, 64, seed).with_blocks(&blocks);
            let hyper = SegHyper {
                epochs: 30,
                batch_size: 8,
                lr: 1e-3,
                seed,
                ..SegHyper::default()
            };
            let seg = tgseg::build(config, net.clone()).unwrap();
            let (seg, history) = tgseg::train(seg, &train_targets, &train, &hyper).unwrap();
            let l = history.losses();
            let ratio = l[l.len() - 1] / l[0];
            halved &= ratio <= 0.5;
            ratios.push(ratio);
            let preds = seg.predict_dataset(test).unwrap();
            dice.entry(name).or_default().push(mean(
                &eval_self_fusion(&preds, &targets, &DEFAULT_THRESHOLDS).unwrap(),
            ));
        }
    }
    let (b, n) = (mean(&dice["bridged"]), mean(&dice["plain"]));
    ledger.record(
        "6",
        "Take-and-Give benefit",
        1200.0,
        t,
        b >= n && halved,
        format!(
            "mean DF-GT test Dice bridged {b:.4} vs plain {n:.4}; worst final/first loss ratio {:.3} (<= 0.5)",
            ratios.iter().cloned().fold(0.0, f64::max)
        ),
    );
}

fn criterion_7(ledger: &mut Ledger, p: &Pipeline) {
    let t = Instant::now();
    let (mut d, mut m) = (Vec::new(), Vec::new());
    for s in p
        .data
        .test
        .dataset
        .samples()
        .iter()
        .filter(|s| s.label == 1)
    {
        let fused = &p.test_dfgt.get(&s.sample_id).unwrap().label.values;
        let mv = majority_vote(&s.masks).values;
        let v = |x: &Array3<f64>| {
            vcdr(x.index_axis(Axis(0), CUP), x.index_axis(Axis(0), DISC), 0.5).unwrap()
        };
        d.push(v(fused));
        m.push(v(&mv));
    }
    let (dm, mm) = (mean(&d), mean(&m));
    ledger.record(
        "7",
        "vCDR direction",
        120.0,
        t,
        dm >= mm,
        format!(
            "{} positive test cases: mean vCDR ExpG {dm:.4} vs MV {mm:.4}",
            d.len()
        ),
    );
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_file() {
            out.insert(
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            );
        }
    }
    out
}

/// Small fixed-seed pipeline writing its artifacts under `root`.
fn mini_run(root: &Path) -> (DiagnosisNet, Dataset) {
    let spec = SynthSpec {
        train: 8,
        val: 0,
        test: 6,
        seed: 8,
        ..SynthSpec::default()
    };
    let out = generate_dataset(&spec).unwrap();
    save_dataset(&out.train.dataset, &root.join("train")).unwrap();
    save_dataset(&out.test.dataset, &root.join("test")).unwrap();
    let train = load_dataset(&root.join("train")).unwrap();
    let test = load_dataset(&root.join("test")).unwrap();
    let (net, _) = diagnet::pretrain(
        diagnet::build(DiagConfig::new(1, 2, 8)).unwrap(),
        &train,
        &DiagHyper {
            epochs: 2,
            batch_size: 4,
            ..DiagHyper::default()
        },
    )
    .unwrap();
    let hyper = DFGTHyper {
        steps: 10,
        ..DFGTHyper::default()
    };
    let labels = build_dfgt(&net, &test, &hyper).unwrap();
    save_dfgt(&labels, &root.join("dfgt")).unwrap();
    let mut report = Report::new("determinism", "mini");
    report.seed("synth", 8);
    let fused = vec![(
        "dfgt_expg".to_string(),
        dfgt_labels(&test, &labels).unwrap(),
    )];
    report.add_fusion_rows(
        "fusion",
        &compare_labels(&test, &net, &fused, &DEFAULT_THRESHOLDS).unwrap(),
    );
    let mv: Vec<Array3<f64>> = test
        .samples()
        .iter()
        .map(|s| majority_vote(&s.masks).values)
        .collect();
    report.add_rater_table(
        "dice",
        &eval_against_raters(&mv, &test, &DEFAULT_THRESHOLDS).unwrap(),
    );
    report
        .write(&root.join("report").join("report.txt"))
        .unwrap();
    (net, test)
}

fn criterion_8(ledger: &mut Ledger) {
    let t = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (net, test) = mini_run(a.path());
    mini_run(b.path());
    let mut same = BTreeMap::new();
    for sub in ["train", "test", "dfgt", "report"] {
        let (x, y) = (
            dir_bytes(&a.path().join(sub)),
            dir_bytes(&b.path().join(sub)),
        );
        same.insert(sub, !x.is_empty() && x == y);
    }
    let ck = a.path().join("diag.ckpt");
    net.save(&ck).unwrap();
    let back = DiagnosisNet::load(&ck).unwrap();
    let bits = |n: &DiagnosisNet| -> Vec<u64> {
        test.samples()
            .iter()
            .map(|s| {
                n.predict(&s.image, &majority_vote(&s.masks).values)
                    .unwrap()
                    .to_bits()
            })
            .collect()
    };
    let diag_same = bits(&net) == bits(&back);
    let frozen = Arc::new(net);
    let seg = tgseg::build(SegConfig::new(1, 2, 64, 64, 8), frozen.clone()).unwrap();
    let sk = a.path().join("seg.ckpt");
    seg.save(&sk).unwrap();
    let seg_back = tgseg::TGSegNet::load(&sk, frozen).unwrap();
    let seg_same = seg.predict_dataset(&test).unwrap() == seg_back.predict_dataset(&test).unwrap();
    let pass = same.values().all(|&v| v) && diag_same && seg_same;
    ledger.record(
        "8",
        "determinism and round trips",
        300.0,
        t,
        pass,
        format!("byte-identical reruns {same:?}; diagnosis checkpoint {diag_same}; segmentation checkpoint {seg_same}"),
    );
}

fn criterion_9(ledger: &mut Ledger) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let p = AttnParams::new(&mut store, &mut rng, "a", 16, 4);
    let mut rows_ok = true;
    for _ in 0..20 {
        let (nq, nk) = (rng.random_range(1..12), rng.random_range(1..12));
        let mut s = Session::new(&store, false);
        let q = s
            .tape
            .constant(Array2::from_shape_fn((nq, 16), |_| rng.random_range(-5.0..5.0)).into_dyn());
        let kv = s
            .tape
            .constant(Array2::from_shape_fn((nk, 16), |_| rng.random_range(-5.0..5.0)).into_dyn());
        let out = attention(&mut s, &p, q, kv, kv).unwrap();
        for a in &out.affinities {
            let a = s
                .tape
                .value(*a)
                .clone()
                .into_dimensionality::<Ix2>()
                .unwrap();
            rows_ok &= a.rows().into_iter().all(|r| (r.sum() - 1.0).abs() <= 1e-6);
        }
    }

    let grid = Array3::from_shape_fn((3, 8, 8), |_| rng.random::<f64>());
    let round_trip = unpatchify(&patchify(&grid, 2).unwrap(), 2, 3, 8, 8).unwrap() == grid;
    let single = patchify(&grid, 8).unwrap().nrows() == 1;

    // N = 1: affinity is [[1]] and the output is merge(v(value)).
    let mut s = Session::new(&store, false);
    let q = s
        .tape
        .constant(Array2::from_shape_fn((1, 16), |_| rng.random::<f64>()).into_dyn());
    let kv = s
        .tape
        .constant(Array2::from_shape_fn((1, 16), |_| rng.random::<f64>()).into_dyn());
    let out = attention(&mut s, &p, q, kv, kv).unwrap();
    let v = p.v.forward(&mut s, kv);
    let merged = p.merge.forward(&mut s, v);
    let n1 = out
        .affinities
        .iter()
        .all(|a| s.tape.value(*a).iter().all(|&x| x == 1.0))
        && s.tape
            .value(out.out)
            .iter()
            .zip(s.tape.value(merged).iter())
            .all(|(a, b)| (a - b).abs() < 1e-12);

    // Identity projections on two patches against softmax(QK^T / sqrt(d)) V by hand.
    let mut id_store = ParamStore::new();
    let ip = AttnParams::new(&mut id_store, &mut rng, "i", 2, 1);
    for (i, t) in id_store.tensors_mut().enumerate() {
        let is_weight = [ip.q.weight, ip.k.weight, ip.v.weight, ip.merge.weight]
            .iter()
            .any(|w| w.index() == i);
        t.mapv_inplace(|_| 0.0);
        if is_weight {
            t[[0, 0]] = 1.0;
            t[[1, 1]] = 1.0;
        }
    }
    let qm = ndarray::arr2(&[[1.0, 0.0], [0.5, 2.0]]);
    let km = ndarray::arr2(&[[0.0, 1.0], [1.0, 1.0]]);
    let vm = ndarray::arr2(&[[3.0, -1.0], [0.0, 2.0]]);
    let mut s = Session::new(&id_store, false);
    let (qv, kv2, vv) = (
        s.tape.constant(qm.clone().into_dyn()),
        s.tape.constant(km.clone().into_dyn()),
        s.tape.constant(vm.clone().into_dyn()),
    );
    let got = attention(&mut s, &ip, qv, kv2, vv).unwrap();
    let got = s
        .tape
        .value(got.out)
        .clone()
        .into_dimensionality::<Ix2>()
        .unwrap();
    let mut brute_ok = true;
    for i in 0..2 {
        let sc: Vec<f64> = (0..2)
            .map(|j| (qm[[i, 0]] * km[[j, 0]] + qm[[i, 1]] * km[[j, 1]]) / 2f64.sqrt())
            .collect();
        let z = sc[0].exp() + sc[1].exp();
        for c in 0..2 {
            let want = (sc[0].exp() * vm[[0, c]] + sc[1].exp() * vm[[1, c]]) / z;
            brute_ok &= (got[[i, c]] - want).abs() < 1e-12;
        }
    }

    // Give and Take shape contracts on a small bridged network.
    let diag = Arc::new(
        diagnet::build(DiagConfig {
            widths: diffseg::nn::layers::Widths(vec![4, 8, 8, 8]),
            ..DiagConfig::new(1, 2, 0)
        })
        .unwrap()
        .freeze(),
    );
    let net = tgseg::build(
        SegConfig {
            widths: diffseg::nn::layers::Widths(vec![4, 8, 8, 8]),
            bridge_widths: vec![4, 4, 8, 8],
            ..SegConfig::new(1, 2, 32, 32, 0)
        },
        diag,
    )
    .unwrap();
    let mut shapes_ok = true;
    for (k, b) in net.bridges() {
        let (h, w) = net.config().block_size(*k);
        let mut s = Session::new(net.params(), false);
        let tokens = (b.encoding.shape()[0], b.token_width());
        let e = s
            .tape
            .constant(Array2::from_shape_fn(tokens, |_| rng.random::<f64>()).into_dyn());
        let f = s
            .tape
            .constant(Array2::from_shape_fn(tokens, |_| rng.random::<f64>()).into_dyn());
        let given = give_module(&mut s, b, e, f).unwrap();
        shapes_ok &= s.tape.value(given).shape() == [tokens.0, tokens.1];
        let width = net.config().widths.0[k - 1];
        let dec = s
            .tape
            .constant(Array3::from_shape_fn((width, h, w), |_| rng.random::<f64>()).into_dyn());
        let up = net.upsampler(*k);
        let out = take_module(&mut s, b, given, dec, up).unwrap();
        let shape = s.tape.value(out).shape().to_vec();
        shapes_ok &= shape[1] == 2 * h && shape[2] == 2 * w;
    }
    let pass = rows_ok && round_trip && single && n1 && brute_ok && shapes_ok;
    ledger.record(
        "9",
        "attention and shape suite",
        60.0,
        t,
        pass,
        format!(
            "rows sum to 1: {rows_ok}; patchify round trip: {round_trip}; single patch: {single}; N=1: {n1}; brute force: {brute_ok}; Give/Take shapes: {shapes_ok}"
        ),
    );
}

#[test]
fn acceptance_criteria() {
    let mut ledger = Ledger::default();
    criterion_1(&mut ledger);
    criterion_2(&mut ledger);
    criterion_9(&mut ledger);
    criterion_8(&mut ledger);
    let p = pipeline();
    criterion_4(&mut ledger, &p);
    criterion_7(&mut ledger, &p);
    let extra = criterion_5(&mut ledger, &p);
    let mut maps: Vec<&ExpertnessMap> = p
        .train_dfgt
        .entries
        .iter()
        .chain(&p.test_dfgt.entries)
        .filter_map(|e| e.expertness.as_ref())
        .collect();
    maps.extend(extra.iter());
    criterion_3(&mut ledger, &maps);
    criterion_6(&mut ledger, &p);

    ledger.lines.sort_by_key(|l| l.id);
    println!("\nacceptance summary");
    for l in &ledger.lines {
        println!("{}", render(l));
    }
    let failed: Vec<&str> = ledger
        .lines
        .iter()
        .filter(|l| !l.pass)
        .map(|l| l.id)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
