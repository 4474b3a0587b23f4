//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line to the
//! real stdout (not the captured test output) and then asserts.
//!
//! Criteria are serialized through a lock so that the timed ones are not
//! measured while another criterion competes for the CPU.

mod common;

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::Case;
use sadcl::checkpoint;
use sadcl::config::RunConfig;
use sadcl::contrastive::{pscl_loss, sscl_loss, MemoryBank, ProjectedPrototypes, PrototypeBank, Snapshot, Temperature};
use sadcl::data::{generate, Dataset, TileLayout};
use sadcl::export::attention_records;
use sadcl::graph::Graph;
use sadcl::labels::{ScoreMatrix, TargetMatrix};
use sadcl::metrics::{average_precision, evaluate, EvalMode};
use sadcl::objective::bce_loss;
use sadcl::rng::Rng;
use sadcl::train::{loss_log, Trainer};
use sadcl::verify::gradient_suite;
use sadcl::Tensor;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(number: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {number} {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn note(text: &str) {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn train(config: RunConfig, data: &Dataset) -> Trainer<f32> {
    let mut t = Trainer::<f32>::new(config, data).unwrap();
    let epochs = t.config.epochs;
    t.train_until(data, epochs, &mut |_| {}).unwrap();
    t
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_1_gradient_suite() {
    let _lock = serial();
    let start = Instant::now();
    let reports = gradient_suite(0, 20, false).unwrap();
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| format!("{} {:.2e}", r.name, r.max_rel_error)).collect::<Vec<_>>().join(", ");
    let pass = reports.iter().all(|r| r.passed() && r.instances == 20) && elapsed <= Duration::from_secs(60);
    report(1, "gradient suite", pass, &format!("{worst}; {:.1}s", elapsed.as_secs_f64()));
    assert!(pass);
}

#[test]
fn criterion_2_oracle_equivalence() {
    let _lock = serial();
    let start = Instant::now();
    let mut rng = Rng::new(2);
    let mut worst = 0f64;
    for _ in 0..200 {
        let case = Case::random(&mut rng);
        let (s, p) = case.losses(&case.x);
        worst = worst.max((s - case.sscl_reference()).abs()).max((p - case.pscl_reference()).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-10 && elapsed <= Duration::from_secs(30);
    report(2, "oracle equivalence", pass, &format!("max abs diff {worst:.1e} over 200 instances; {:.2}s", elapsed.as_secs_f64()));
    assert!(pass);
}

fn batch(g: &mut Graph<f64>, data: &[f64], shape: &[usize]) -> sadcl::graph::Var {
    g.constant(Tensor::from_f64(shape, data).unwrap()).unwrap()
}

#[test]
fn criterion_3_closed_form_spot_values() {
    let _lock = serial();
    let tau = Temperature::new(1.0).unwrap();
    let ln2 = 2f64.ln();

    let mut g = Graph::new();
    let x = batch(&mut g, &[1.0, 0.0, 1.0, 0.0], &[2, 1, 2]);
    let y = TargetMatrix::from_rows(&[vec![1], vec![1]]).unwrap();
    let l = sscl_loss(&mut g, x, &y, &Snapshot::empty(2), tau).unwrap();
    let identical = g.value(l).item();

    // prototype (1, 0) between a positive and a negative at equal similarity
    let mut g = Graph::new();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let x = batch(&mut g, &[s, s, s, -s], &[2, 1, 2]);
    let y = TargetMatrix::from_rows(&[vec![1], vec![0]]).unwrap();
    let c = batch(&mut g, &[1.0, 0.0], &[1, 2]);
    let protos = ProjectedPrototypes { vectors: Some(c), classes: vec![0] };
    let l = pscl_loss(&mut g, &protos, x, &y, &Snapshot::empty(2), tau).unwrap();
    let symmetric = g.value(l).item();

    let mut g = Graph::new();
    let sc = batch(&mut g, &[0.5], &[1, 1]);
    let l = bce_loss(&mut g, sc, &TargetMatrix::from_rows(&[vec![1]]).unwrap()).unwrap();
    let half = g.value(l).item();

    let mut g = Graph::new();
    let x = batch(&mut g, &[1.0, 0.0, 9.0, 9.0, 1.0, 0.0, 9.0, 9.0, 9.0, 9.0, 0.0, 1.0], &[3, 2, 2]);
    let y = TargetMatrix::from_rows(&[vec![1, 0], vec![1, 0], vec![0, 1]]).unwrap();
    let l = sscl_loss(&mut g, x, &y, &Snapshot::empty(2), tau).unwrap();
    let three = g.value(l).item();
    let three_want = 2.0 * (1.0 + (-1f64).exp()).ln();

    let pass = identical == 0.0
        && (symmetric - ln2).abs() <= 1e-10
        && (half - ln2).abs() <= 1e-10
        && (three - three_want).abs() <= 1e-10;
    report(
        3,
        "closed-form spot values",
        pass,
        &format!(
            "identical pair {identical}, symmetric PSCL {symmetric:.12}, BCE(0.5) {half:.12}, three-anchor {three:.12} vs {three_want:.12}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_metric_oracle() {
    let _lock = serial();
    let ap = average_precision(&[0.9, 0.8, 0.3], &[true, false, true]).unwrap();
    let scores = ScoreMatrix::new(2, 3, vec![0.9, 0.8, 0.1, 0.2, 0.7, 0.6]).unwrap();
    let y = TargetMatrix::from_rows(&[vec![1, 0, 0], vec![0, 1, 1]]).unwrap();
    let top = evaluate(&scores, &y, EvalMode::TopK { k: 2 }).unwrap();
    let mut perfect_ok = true;
    // three positives per image so that top-3 can be exact as well
    for mode in [EvalMode::all(), EvalMode::top3()] {
        let y = TargetMatrix::from_rows(&[vec![1, 0, 1, 1, 0], vec![0, 1, 1, 1, 0], vec![1, 1, 0, 0, 1]]).unwrap();
        let r = evaluate(&ScoreMatrix::from_targets(&y), &y, mode).unwrap();
        perfect_ok &= [r.map, r.cp, r.cr, r.cf1, r.op, r.or, r.of1].iter().all(|&v| v == 1.0);
    }
    let pass = (ap - 5.0 / 6.0).abs() <= 1e-12
        && (top.op - 0.75).abs() <= 1e-12
        && (top.or - 1.0).abs() <= 1e-12
        && (top.of1 - 6.0 / 7.0).abs() <= 1e-12
        && perfect_ok;
    report(
        4,
        "metric oracle",
        pass,
        &format!("AP {ap:.12}, top-2 OP {} OR {} OF1 {:.12}, perfect predictor all ones: {perfect_ok}", top.op, top.or, top.of1),
    );
    assert!(pass);
}

#[test]
fn criterion_5_desk_scale_training() {
    let _lock = serial();
    let config = RunConfig::default();
    let data = generate(&config.synthetic_spec()).unwrap();
    let start = Instant::now();
    let t = train(config, &data);
    let elapsed = start.elapsed();
    let map = t.evaluate(&data).unwrap()[0].map;
    let pass = map >= 0.90 && t.epoch <= 30 && elapsed <= Duration::from_secs(600);
    report(
        5,
        "desk-scale training",
        pass,
        &format!("test mAP {map:.4} after {} epochs; {:.0}s", t.epoch, elapsed.as_secs_f64()),
    );
    assert!(pass);
}

/// Epoch budget of each ablation run.
const ABLATION_EPOCHS: usize = 10;

#[test]
fn criterion_6_ablation_direction() {
    let _lock = serial();
    let rows = [("BCE", false, false), ("+SSCL", true, false), ("+PSCL", false, true), ("+both", true, true)];
    let seeds = 0..5u64;
    let mut table: Vec<Vec<f64>> = vec![Vec::new(); rows.len()];
    for seed in seeds.clone() {
        let mut base = RunConfig {
            data_noise: 0.6,
            data_seed: seed,
            seed,
            epochs: ABLATION_EPOCHS,
            ..RunConfig::default()
        };
        let data = generate(&base.synthetic_spec()).unwrap();
        for (r, &(_, sscl, pscl)) in rows.iter().enumerate() {
            base.sscl_on = sscl;
            base.pscl_on = pscl;
            let t = train(base.clone(), &data);
            table[r].push(t.evaluate(&data).unwrap()[0].map);
        }
    }
    let mut text = format!("ablation, noise 0.6, {ABLATION_EPOCHS} epochs, test mAP per seed\n  {:<6}", "config");
    for s in seeds {
        text.push_str(&format!(" {:>8}", format!("seed {s}")));
    }
    text.push_str(&format!(" {:>8}\n", "median"));
    for (r, (name, _, _)) in rows.iter().enumerate() {
        text.push_str(&format!("  {name:<6}"));
        for v in &table[r] {
            text.push_str(&format!(" {v:>8.4}"));
        }
        text.push_str(&format!(" {:>8.4}\n", median(table[r].clone())));
    }
    note(&text);
    let (bce, full) = (median(table[0].clone()), median(table[3].clone()));
    let pass = full >= bce;
    report(6, "ablation direction", pass, &format!("median full {full:.4} vs BCE-only {bce:.4}"));
    assert!(pass);
}

#[test]
fn criterion_7_structural_invariants() {
    let _lock = serial();
    let mut rng = Rng::new(7);

    let config = RunConfig {
        epochs: 1,
        data_train_size: 64,
        data_test_size: 32,
        ..RunConfig::default()
    };
    let data = generate(&config.synthetic_spec()).unwrap();
    let t = train(config, &data);
    let mut worst_row = 0f64;
    for rec in attention_records(&t, &data.test).unwrap() {
        for row in &rec.rows {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }

    let mut capacity_ok = true;
    let mut bank = MemoryBank::<f64>::new(4, 2, 3);
    for op in 0..1000u64 {
        if op % 100 == 0 {
            bank = MemoryBank::new(4, 2, rng.below(5));
        }
        let n = 1 + rng.below(4);
        let mut y = TargetMatrix::zeros(n, 4);
        for i in 0..n {
            for j in 0..4 {
                y.set(i, j, rng.uniform() < 0.5);
            }
        }
        bank.push(&Tensor::from_fn(&[n, 4, 2], |_| rng.normal()), &y, &vec![0; n], op).unwrap();
        capacity_ok &= (0..4).all(|j| bank.len(j) <= bank.capacity());
        capacity_ok &= bank.snapshot(rng.below(20)).len() <= bank.total();
    }

    let (l, d, eps) = (3, 3, 0.8);
    let mut convex_ok = true;
    let mut screening_ok = true;
    for _ in 0..1000 {
        let mut protos = PrototypeBank::<f64>::new(l, d, eps).unwrap();
        let n = 1 + rng.below(4);
        let feats = Tensor::from_fn(&[n, l, d], |_| 3.0 * rng.normal());
        let scores = Tensor::from_fn(&[n, l], |_| rng.uniform());
        let mut y = TargetMatrix::zeros(n, l);
        for i in 0..n {
            for j in 0..l {
                y.set(i, j, rng.uniform() < 0.6);
            }
        }
        protos.update(&feats, &y, &scores).unwrap();
        for j in 0..l {
            let admitted: Vec<usize> = (0..n).filter(|&i| y.get(i, j) && scores.data()[i * l + j] >= eps).collect();
            screening_ok &= protos.counts()[j] == admitted.len() as u64;
            if let Some(mean) = protos.mean(j) {
                for (k, v) in mean.iter().enumerate() {
                    let coords = admitted.iter().map(|&i| feats.row(i * l + j)[k]);
                    let lo = coords.clone().fold(f64::INFINITY, f64::min);
                    let hi = coords.fold(f64::NEG_INFINITY, f64::max);
                    convex_ok &= *v >= lo - 1e-12 && *v <= hi + 1e-12;
                }
            }
        }
    }
    let pass = worst_row <= 1e-6 && capacity_ok && convex_ok && screening_ok;
    report(
        7,
        "structural invariants",
        pass,
        &format!(
            "attention row-sum error {worst_row:.1e}; capacity {capacity_ok}; convexity {convex_ok}; screening {screening_ok}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_determinism_and_resume() {
    let _lock = serial();
    let config = RunConfig {
        epochs: 3,
        data_train_size: 96,
        data_test_size: 32,
        deterministic: true,
        ..RunConfig::default()
    };
    let data = generate(&config.synthetic_spec()).unwrap();
    let run = |stop: Option<usize>| {
        let mut logs = Vec::new();
        let mut t = Trainer::<f32>::new(config.clone(), &data).unwrap();
        if let Some(e) = stop {
            t.train_until(&data, e, &mut |r| logs.push(*r)).unwrap();
            t = checkpoint::from_text(&checkpoint::to_text(&t)).unwrap();
        }
        t.train_until(&data, config.epochs, &mut |r| logs.push(*r)).unwrap();
        (loss_log(&logs), checkpoint::to_text(&t))
    };
    let (a, ca) = run(None);
    let (b, cb) = run(None);
    let (c, cc) = run(Some(1));
    let identical = a == b && ca == cb;
    let resumed = a == c && ca == cc;
    let pass = identical && resumed;
    report(
        8,
        "determinism and resume",
        pass,
        &format!("{} loss-log lines; repeat identical {identical}; resume identical {resumed}", a.lines().count()),
    );
    assert!(pass);
}

#[test]
fn criterion_9_attention_localization() {
    let _lock = serial();
    let config = RunConfig {
        data_noise: 0.0,
        data_cardinality: 1.0,
        data_train_size: 4000,
        data_test_size: 1000,
        data_seed: 9,
        seed: 9,
        epochs: 10,
        ..RunConfig::default()
    };
    let full = generate(&config.synthetic_spec()).unwrap();
    let single = |s: &sadcl::data::Split| {
        let idx: Vec<usize> = (0..s.len()).filter(|&i| s.targets.row(i).iter().map(|&v| v as usize).sum::<usize>() == 1).collect();
        s.select(&idx)
    };
    let data = Dataset {
        spec: full.spec.clone(),
        train: single(&full.train),
        test: single(&full.test),
    };
    let t = train(config.clone(), &data);
    let layout = TileLayout::new(config.data_grid_h, config.data_grid_w, config.data_classes).unwrap();
    let records = attention_records(&t, &data.test).unwrap();
    let mut localized = 0;
    for rec in &records {
        let j = data.test.targets.row(rec.image).iter().position(|&v| v == 1).unwrap();
        let mass: f64 = layout.cells(j).iter().map(|&c| rec.rows[j][c]).sum();
        if mass > 0.5 {
            localized += 1;
        }
    }
    let share = localized as f64 / records.len() as f64;
    let pass = share >= 0.8;
    report(
        9,
        "attention localization",
        pass,
        &format!(
            "{localized}/{} single-class test images put > 0.5 of the class's attention on its tile ({:.1}%); train {} images",
            records.len(),
            100.0 * share,
            data.train.len()
        ),
    );
    assert!(pass);
}
