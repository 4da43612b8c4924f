use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use csc_core::conformal::{build_set_with, calibrate, cardinality_bound, rank_scores};
use csc_core::eval::{calibrate_round, compute_round_metrics, split_cal_test, PARTITION_FIELD};
use csc_core::pool::{entropy_weights, linear_pool, shannon_entropy, uniform_weights};
use csc_core::sim::oracle::{oracle_coverage, oracle_quantile};
use csc_core::sim::{generate_population, SimParams};
use csc_core::stopping::{conformal_stop, consensus_stop, round_prediction_set, unanimous_label};
use csc_core::transcript::{record_from_line, record_to_line};
use csc_core::{CalibrationResult, DebateRecord, Distribution, ScoreKind, WeightVector, Weighting};

fn dist(k: usize) -> impl Strategy<Value = Distribution> {
    prop::collection::vec(0.0f64..1.0, k).prop_map(move |mut raw| {
        if raw.iter().all(|&v| v == 0.0) {
            raw[0] = 1.0;
        }
        let sum: f64 = raw.iter().sum();
        Distribution::validate(raw.iter().map(|v| v / sum).collect(), k).unwrap()
    })
}

fn dist_any() -> impl Strategy<Value = Distribution> {
    (2usize..=10).prop_flat_map(dist)
}

fn beliefs() -> impl Strategy<Value = (Vec<Distribution>, WeightVector)> {
    (2usize..=8, 1usize..=5).prop_flat_map(|(k, n)| {
        (prop::collection::vec(dist(k), n), prop::collection::vec(0.01f64..1.0, n)).prop_map(|(ds, raw)| {
            let sum: f64 = raw.iter().sum();
            (ds, WeightVector::new(raw.iter().map(|w| w / sum).collect()).unwrap())
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn quantile_matches_oracle(
        scores in prop::collection::vec(prop_oneof![0.0f64..1.0, (0u8..10).prop_map(|v| v as f64 / 10.0)], 1..200),
        alpha in 0.001f64..0.999,
    ) {
        let got = calibrate(&scores, alpha, 0, ScoreKind::Prob).unwrap();
        prop_assert_eq!(got.q_hat.to_bits(), oracle_quantile(&scores, alpha).unwrap().to_bits());
        prop_assert!(got.saturated == (got.q_hat == 1.0 && ((scores.len() + 1) as f64 * (1.0 - alpha)).ceil() as usize > scores.len()) || !got.saturated);
    }

    #[test]
    fn pool_stays_on_the_simplex((ds, w) in beliefs()) {
        let p = linear_pool(&ds, &w).unwrap();
        assert_abs_diff_eq!(p.probs().iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        prop_assert!(p.probs().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn pool_lies_between_agent_extremes((ds, w) in beliefs()) {
        let p = linear_pool(&ds, &w).unwrap();
        for y in 0..p.len() {
            let lo = ds.iter().map(|d| d.probs()[y]).fold(f64::INFINITY, f64::min);
            let hi = ds.iter().map(|d| d.probs()[y]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p.probs()[y] >= lo - 1e-12 && p.probs()[y] <= hi + 1e-12);
        }
    }

    #[test]
    fn entropy_weights_favour_sharper_agents((ds, _) in beliefs(), lambda in 0.1f64..5.0) {
        let w = entropy_weights(&ds, lambda).unwrap();
        assert_abs_diff_eq!(w.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        for i in 0..ds.len() {
            for j in 0..ds.len() {
                if shannon_entropy(&ds[i]) < shannon_entropy(&ds[j]) - 1e-12 {
                    prop_assert!(w.weights()[i] >= w.weights()[j]);
                }
            }
        }
    }

    #[test]
    fn zero_lambda_entropy_weights_are_uniform((ds, _) in beliefs()) {
        let w = entropy_weights(&ds, 0.0).unwrap();
        let u = uniform_weights(ds.len()).unwrap();
        for (a, b) in w.weights().iter().zip(u.weights()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn sets_are_nested_in_the_threshold(d in dist_any(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        for kind in [ScoreKind::Prob, ScoreKind::Rank] {
            prop_assert!(build_set_with(&d, lo, kind).is_subset_of(&build_set_with(&d, hi, kind)));
        }
    }

    #[test]
    fn prob_sets_respect_the_cardinality_bound(d in dist_any(), q in 0.0f64..1.0) {
        let set = build_set_with(&d, q, ScoreKind::Prob);
        prop_assert!(set.len() <= cardinality_bound(q, d.len()));
    }

    #[test]
    fn rank_sets_are_top_prefixes(d in dist_any(), q in 0.0f64..=1.0) {
        let set = build_set_with(&d, q, ScoreKind::Rank);
        let scores = rank_scores(&d);
        // every member scores no more than every non-member
        for &m in set.members() {
            for y in (0..d.len()).filter(|y| !set.contains(*y)) {
                prop_assert!(scores[m] <= scores[y]);
            }
        }
        prop_assert!(build_set_with(&d, 1.0, ScoreKind::Rank).len() == d.len());
    }

    #[test]
    fn transcripts_round_trip(seed in 0u64..1000, k in 2usize..6, n in 1usize..4, t in 1usize..4) {
        let params = SimParams {
            num_labels: k,
            num_agents: n,
            num_rounds: t,
            num_questions: 3,
            agent_accuracy: vec![0.6; n],
            seed,
            ..SimParams::default()
        };
        for r in generate_population(&params).unwrap() {
            prop_assert_eq!(record_from_line(&record_to_line(&r), 1).unwrap(), r);
        }
    }
}

fn corpus(seed: u64, sycophancy: f64) -> Vec<DebateRecord> {
    let params = SimParams { num_questions: 400, sycophancy, seed, ..SimParams::default() };
    generate_population(&params).unwrap()
}

fn per_round(records: &[&DebateRecord], alpha: f64, weighting: Weighting, kind: ScoreKind) -> BTreeMap<usize, CalibrationResult> {
    (0..records[0].num_rounds())
        .map(|t| (t, calibrate_round(records, alpha, t, weighting, kind).unwrap()))
        .collect()
}

fn cal_test(records: &[DebateRecord], seed: u64) -> (Vec<&DebateRecord>, Vec<&DebateRecord>) {
    let split = &split_cal_test(records, PARTITION_FIELD, 0.5, seed).unwrap()[0];
    let pick = |ids: &[String]| records.iter().filter(|r| ids.iter().any(|i| i == r.question_id())).collect::<Vec<_>>();
    (pick(&split.cal_ids), pick(&split.test_ids))
}

#[test]
fn coverage_matches_independent_oracle() {
    for seed in 0..5 {
        let records = corpus(seed, 0.3);
        let (cal, test) = cal_test(&records, seed);
        for alpha in [0.05, 0.1, 0.2] {
            let cals = per_round(&cal, alpha, Weighting::Uniform, ScoreKind::Prob);
            let owned: Vec<DebateRecord> = test.iter().map(|r| (*r).clone()).collect();
            for t in 0..4 {
                let m = compute_round_metrics(&test, &cals, t, Weighting::Uniform).unwrap();
                let oracle = oracle_coverage(&owned, &cals[&t], t).unwrap();
                assert_eq!(m.coverage, oracle, "seed {seed} alpha {alpha} round {t}");
            }
        }
    }
}

#[test]
fn conformal_stop_is_the_first_singleton_round() {
    let records = corpus(9, 0.5);
    let (cal, test) = cal_test(&records, 9);
    for kind in [ScoreKind::Prob, ScoreKind::Rank] {
        let weighting = Weighting::Entropy { lambda: 1.0 };
        let cals = per_round(&cal, 0.1, weighting, kind);
        for r in &test {
            let out = conformal_stop(r, &cals, weighting).unwrap();
            let sizes: Vec<usize> =
                (0..4).map(|t| round_prediction_set(r, t, &cals[&t], weighting).unwrap().len()).collect();
            match sizes.iter().position(|&s| s == 1) {
                Some(t) => assert!(out.resolved && out.stop_round == t),
                None => assert!(!out.resolved && out.stop_round == 3),
            }
        }
    }
}

#[test]
fn consensus_stop_is_the_first_unanimous_round() {
    for r in &corpus(4, 0.8) {
        let out = consensus_stop(r);
        let first = (0..r.num_rounds()).find(|&t| unanimous_label(r, t).is_some());
        assert_eq!(out.resolved, first.is_some());
        if let Some(t) = first {
            assert_eq!(out.stop_round, t);
            assert_eq!(out.answer, unanimous_label(r, t));
        }
    }
}

#[test]
fn zero_sycophancy_freezes_beliefs() {
    for r in &corpus(2, 0.0) {
        for t in 1..r.num_rounds() {
            for i in 0..r.num_agents() {
                assert_eq!(r.belief(t, i).dist, r.belief(0, i).dist);
            }
        }
    }
}

fn final_disagreement(records: &[DebateRecord]) -> f64 {
    let last = records[0].num_rounds() - 1;
    let mut total = 0.0;
    for r in records {
        let ds = r.round_dists(last);
        for i in 0..ds.len() {
            for j in i + 1..ds.len() {
                total += ds[i].probs().iter().zip(ds[j].probs()).map(|(a, b)| (a - b).abs()).sum::<f64>();
            }
        }
    }
    total / records.len() as f64
}

#[test]
fn more_sycophancy_means_more_agreement() {
    let levels = [0.0, 0.2, 0.5, 0.8];
    let gaps: Vec<f64> = levels
        .iter()
        .map(|&s| (0..5).map(|seed| final_disagreement(&corpus(seed, s))).sum::<f64>())
        .collect();
    for w in gaps.windows(2) {
        assert!(w[1] < w[0], "{gaps:?}");
    }
}

#[test]
fn near_perfect_agents_agree_on_the_truth_at_round_zero() {
    let params = SimParams {
        num_questions: 200,
        agent_accuracy: vec![0.999_999; 3],
        concentration: 30.0,
        seed: 5,
        ..SimParams::default()
    };
    for r in generate_population(&params).unwrap() {
        assert_eq!(unanimous_label(&r, 0), r.truth());
    }
}
