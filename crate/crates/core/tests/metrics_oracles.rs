//! Metrics against brute-force rank and confusion-count references.

use sadcl::labels::{ScoreMatrix, TargetMatrix};
use sadcl::metrics::{average_precision, evaluate, predictions, EvalMode};
use sadcl::rng::Rng;

/// Precision at each positive's rank, ranks ordered by descending score
/// with ties broken by ascending index.
fn brute_force_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            let hits = order[..=rank].iter().filter(|&&k| labels[k]).count();
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / positives as f64)
}

fn random_case(rng: &mut Rng) -> (Vec<f64>, Vec<bool>) {
    let n = 1 + rng.below(20);
    // coarse scores so that ties occur
    let scores = (0..n).map(|_| (rng.uniform() * 6.0).floor() / 6.0).collect();
    let labels = (0..n).map(|_| rng.uniform() < 0.4).collect();
    (scores, labels)
}

#[test]
fn ap_matches_brute_force_on_random_instances() {
    let mut rng = Rng::new(41);
    for _ in 0..200 {
        let (s, l) = random_case(&mut rng);
        assert_eq!(average_precision(&s, &l), brute_force_ap(&s, &l));
    }
}

#[test]
fn reversed_ranking_follows_the_closed_form() {
    let mut rng = Rng::new(42);
    for _ in 0..200 {
        let p = 1 + rng.below(6);
        let f = rng.below(6);
        // all negatives above all positives
        let scores: Vec<f64> = (0..f + p).map(|i| 1.0 - i as f64 / (f + p) as f64).collect();
        let labels: Vec<bool> = (0..f + p).map(|i| i >= f).collect();
        let want = (1..=p).map(|m| m as f64 / (m + f) as f64).sum::<f64>() / p as f64;
        assert!((average_precision(&scores, &labels).unwrap() - want).abs() < 1e-15);
    }
}

#[test]
fn ap_is_invariant_under_monotone_transforms() {
    let mut rng = Rng::new(43);
    for _ in 0..200 {
        let (s, l) = random_case(&mut rng);
        let t: Vec<f64> = s.iter().map(|&v| (3.0 * v).exp() - 2.0).collect();
        assert_eq!(average_precision(&s, &l), average_precision(&t, &l));
    }
}

fn random_matrix(rng: &mut Rng) -> (ScoreMatrix, TargetMatrix) {
    let (n, l) = (1 + rng.below(8), 1 + rng.below(6));
    let scores = ScoreMatrix::new(n, l, (0..n * l).map(|_| rng.uniform()).collect()).unwrap();
    let mut y = TargetMatrix::zeros(n, l);
    for i in 0..n {
        for j in 0..l {
            y.set(i, j, rng.uniform() < 0.4);
        }
    }
    (scores, y)
}

#[test]
fn reports_match_confusion_count_references() {
    let mut rng = Rng::new(44);
    for _ in 0..200 {
        let (s, y) = random_matrix(&mut rng);
        let (n, l) = (s.rows(), s.classes());
        for mode in [EvalMode::all(), EvalMode::top3(), EvalMode::TopK { k: 1 }] {
            let pred = predictions(&s, mode);
            if let EvalMode::TopK { k } = mode {
                for i in 0..n {
                    assert_eq!(pred[i * l..(i + 1) * l].iter().filter(|&&p| p).count(), k.min(l));
                }
            }
            let r = evaluate(&s, &y, mode).unwrap();
            let (mut tp, mut np, mut ng) = (0.0, 0.0, 0.0);
            let mut precisions = Vec::new();
            let mut recalls = Vec::new();
            let mut aps = Vec::new();
            for j in 0..l {
                let col: Vec<bool> = (0..n).map(|i| y.get(i, j)).collect();
                let hits = (0..n).filter(|&i| pred[i * l + j] && col[i]).count() as f64;
                let predicted = (0..n).filter(|&i| pred[i * l + j]).count() as f64;
                let actual = col.iter().filter(|&&c| c).count() as f64;
                tp += hits;
                np += predicted;
                ng += actual;
                if actual > 0.0 {
                    recalls.push(hits / actual);
                    if predicted > 0.0 {
                        precisions.push(hits / predicted);
                    }
                    let scores: Vec<f64> = (0..n).map(|i| s.get(i, j)).collect();
                    aps.push(brute_force_ap(&scores, &col).unwrap());
                }
                assert_eq!(r.per_class_ap[j], if actual > 0.0 { aps.last().copied() } else { None });
            }
            let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
            let f1 = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            let op = if np > 0.0 { tp / np } else { 0.0 };
            let or = if ng > 0.0 { tp / ng } else { 0.0 };
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
            assert!(close(r.map, mean(&aps)));
            assert!(close(r.cp, mean(&precisions)) && close(r.cr, mean(&recalls)));
            assert!(close(r.cf1, f1(mean(&precisions), mean(&recalls))));
            assert!(close(r.op, op) && close(r.or, or) && close(r.of1, f1(op, or)));
            assert!(r.of1 <= 1.0 && r.cf1 <= 1.0);
        }
    }
}
