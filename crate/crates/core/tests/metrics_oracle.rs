//! Metrics against naive quadratic-time oracles, plus end-to-end evaluation
//! properties.

mod common;

use common::oracle::{instance, oracle_map, oracle_topk, Instance};

use proptest::prelude::*;
use qks_core::eval::{self, evaluate_scores, mean_ap, topk_prf, Task};
use qks_core::io::{InMemorySplit, Split};
use qks_core::numerics::Rng;
use qks_core::{LabelEmbeddingTable, QksModel};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_match_brute_force(inst in instance()) {
        let Instance { scores, ann, cand, k } = &inst;
        match (mean_ap(scores, ann, cand), oracle_map(scores, ann, cand)) {
            (Ok(m), Some(o)) => prop_assert!((m.map - o).abs() <= 1e-12),
            (Err(_), None) => {}
            (got, want) => prop_assert!(false, "mean_ap {got:?} vs oracle {want:?}"),
        }
        match (topk_prf(scores, ann, *k, cand), oracle_topk(scores, ann, *k, cand)) {
            (Ok(p), Some((op, or, of))) => {
                prop_assert!((p.precision - op).abs() <= 1e-12);
                prop_assert!((p.recall - or).abs() <= 1e-12);
                prop_assert!((p.f1 - of).abs() <= 1e-12);
            }
            (Err(_), None) => {}
            (got, want) => prop_assert!(false, "topk {got:?} vs oracle {want:?}"),
        }
    }

    #[test]
    fn metrics_depend_only_on_ranking(inst in instance()) {
        let Instance { scores, ann, cand, k } = &inst;
        let warped: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|&v| (3.0 * v).exp() + v.powi(3)).collect()).collect();
        let a = evaluate_scores(scores, ann, cand, Task::Gzsl, &[*k]);
        let b = evaluate_scores(&warped, ann, cand, Task::Gzsl, &[*k]);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "only one side errored"),
        }
    }

    #[test]
    fn zsl_ignores_seen_labels(inst in instance(), noise in prop::collection::vec(-1e3f64..1e3, 10)) {
        let Instance { scores, ann, cand, k } = &inst;
        let mut perturbed = scores.clone();
        for row in &mut perturbed {
            for (l, v) in row.iter_mut().enumerate() {
                if !cand.contains(&l) {
                    *v += noise[l];
                }
            }
        }
        let a = evaluate_scores(scores, ann, cand, Task::Zsl, &[*k]).ok();
        let b = evaluate_scores(&perturbed, ann, cand, Task::Zsl, &[*k]).ok();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn hand_derived_values() {
    let ap = eval::average_precision(&[4.0, 3.0, 2.0, 1.0], &[true, false, true, false]).unwrap();
    assert!((ap - 0.833333).abs() < 1e-6);
    for n in 1..=10 {
        let scores: Vec<f64> = (0..n).rev().map(|v| v as f64).collect();
        let mut rel = vec![false; n];
        rel[n - 1] = true;
        assert!((eval::average_precision(&scores, &rel).unwrap() - 1.0 / n as f64).abs() < 1e-12);
    }
}

fn tiny_model(seed: u64) -> (common::Loaded, QksModel<f32>) {
    let data = common::load(&common::tiny_run(seed, 0));
    let model = QksModel::init(data.run.model.clone(), &mut Rng::new(seed)).unwrap();
    (data, model)
}

#[test]
fn gzsl_without_unseen_labels_equals_seen_only() {
    let (data, model) = tiny_model(8);
    let all_seen = LabelEmbeddingTable::new(
        data.labels.vectors().clone(),
        vec![true; data.labels.len()],
        (0..data.labels.len()).map(|i| format!("l{i}")).collect(),
    )
    .unwrap();
    let gzsl = eval::evaluate_split(&model, &data.test, &all_seen, Task::Gzsl, &[3, 5]).unwrap();
    let scores: Vec<Vec<f64>> = eval::score_images(&model, &data.test, &all_seen)
        .unwrap()
        .iter()
        .map(|s| s.scores_f64())
        .collect();
    let seen: Vec<usize> = (0..all_seen.len()).collect();
    let direct = evaluate_scores(&scores, &data.test.labels, &seen, Task::Gzsl, &[3, 5]).unwrap();
    assert_eq!(gzsl, direct);
    assert!(Task::Zsl.candidates(&all_seen).is_err());
}

#[test]
fn untrained_model_report_is_well_formed() {
    let (data, model) = tiny_model(9);
    for task in [Task::Zsl, Task::Gzsl] {
        let r = eval::evaluate_split(&model, &data.test, &data.labels, task, &[3]).unwrap();
        assert!((0.0..=1.0).contains(&r.map));
        assert_eq!(r.n_images, data.test.len());
        let back: eval::EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}

/// Frozen from the brute-force oracles above on a fixed tiny checkpoint.
const GOLDEN: [(Task, f64, f64, f64); 2] = [
    (Task::Zsl, 0.364876017884, 11.0 / 39.0, 11.0 / 27.0),
    (Task::Gzsl, 0.397551975635, 11.0 / 72.0, 22.0 / 123.0),
];

#[test]
fn fixed_checkpoint_matches_golden_report() {
    let run = common::tiny_run(21, 30);
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::generate(&run, &dir.path().join("data"));
    let out = qks_core::train::train(&manifest, &run, dir.path().join("run")).unwrap();
    let test = InMemorySplit::<f32>::load(&manifest, Split::Test).unwrap();
    let labels = manifest.label_table::<f32>().unwrap();
    let scores: Vec<Vec<f64>> = eval::score_images(&out.model, &test, &labels)
        .unwrap()
        .iter()
        .map(|s| s.scores_f64())
        .collect();
    for (task, map, p3, f3) in GOLDEN {
        let r = eval::evaluate_checkpoint(&out.checkpoint, &manifest, task, Some(&run)).unwrap();
        let cand = task.candidates(&labels).unwrap();
        let (op, _, of) = oracle_topk(&scores, &test.labels, 3, &cand).unwrap();
        let om = oracle_map(&scores, &test.labels, &cand).unwrap();
        println!("{task}: mAP {:.12} P@3 {:.12} F1@3 {:.12}", r.map, r.at(3).unwrap().precision, r.at(3).unwrap().f1);
        assert!((r.map - om).abs() <= 1e-12 && (r.at(3).unwrap().f1 - of).abs() <= 1e-12);
        assert!((r.map - map).abs() <= 1e-9, "{task} mAP");
        assert!((r.at(3).unwrap().precision - p3).abs() <= 1e-9, "{task} P@3");
        assert!((r.at(3).unwrap().f1 - f3).abs() <= 1e-9, "{task} F1@3");
        assert!((op - p3).abs() <= 1e-9);
    }
}
