//! Metric oracles: brute-force all-pairs AUC and per-threshold AUPR
//! references, monotone-transform invariance, mask-perturbation immunity.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use tnseg::metrics::{auc, aupr, evaluate, DEFAULT_THRESHOLD};
use tnseg::tensor::Tensor;

/// Fraction of (positive, negative) pairs ranked correctly, ties half.
fn auc_bruteforce(scores: &[f64], labels: &[bool]) -> f64 {
    let mut good = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                good += 1.0;
            } else if scores[i] == scores[j] {
                good += 0.5;
            }
        }
    }
    good / pairs
}

/// Precision-recall step area with a full rescan at every distinct score.
fn aupr_bruteforce(scores: &[f64], labels: &[bool]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut area = 0.0;
    let mut recall_prev = 0.0;
    for &t in &thresholds {
        let tp = scores
            .iter()
            .zip(labels)
            .filter(|&(&s, &l)| s >= t && l)
            .count() as f64;
        let predicted = scores.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / n_pos;
        let precision = tp / predicted;
        area += (recall - recall_prev) * precision;
        recall_prev = recall;
    }
    area
}

fn random_case(rng: &mut ChaCha12Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(2..=200);
    loop {
        // Quantized scores so ties actually occur.
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..50) as f64) / 50.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let pos = labels.iter().filter(|&&l| l).count();
        if pos > 0 && pos < n {
            return (scores, labels);
        }
    }
}

#[test]
fn auc_matches_all_pairs_oracle_on_500_random_arrays() {
    let mut rng = ChaCha12Rng::seed_from_u64(1234);
    for case in 0..500 {
        let (scores, labels) = random_case(&mut rng);
        let fast = auc(&scores, &labels).unwrap();
        let slow = auc_bruteforce(&scores, &labels);
        assert!((fast - slow).abs() < 1e-12, "case {case}: {fast} vs {slow}");
    }
}

#[test]
fn aupr_matches_per_threshold_oracle_on_500_random_arrays() {
    let mut rng = ChaCha12Rng::seed_from_u64(4321);
    for case in 0..500 {
        let (scores, labels) = random_case(&mut rng);
        let fast = aupr(&scores, &labels).unwrap();
        let slow = aupr_bruteforce(&scores, &labels);
        assert!((fast - slow).abs() < 1e-12, "case {case}: {fast} vs {slow}");
    }
}

#[test]
fn masked_out_pixels_never_influence_metrics() {
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    for _ in 0..20 {
        let n = 40;
        let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<f64> = (0..n).map(|i| f64::from(i % 3 == 0)).collect();
        let mask: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.7))).collect();
        if {
            let pos = labels.iter().zip(&mask).filter(|(&l, &m)| m == 1.0 && l == 1.0).count();
            let tot = mask.iter().filter(|&&m| m == 1.0).count();
            pos == 0 || pos == tot
        } {
            continue;
        }
        let shape = [n];
        let p = Tensor::new(&shape, probs.clone()).unwrap();
        let y = Tensor::new(&shape, labels.clone()).unwrap();
        let m = Tensor::new(&shape, mask.clone()).unwrap();
        let base = evaluate(&p, &y, &m, DEFAULT_THRESHOLD).unwrap();

        // scramble every masked-out score and label
        let mut probs2 = probs.clone();
        let mut labels2 = labels.clone();
        for i in 0..n {
            if mask[i] == 0.0 {
                probs2[i] = rng.gen_range(0.0..1.0);
                labels2[i] = f64::from(rng.gen_bool(0.5));
            }
        }
        let p2 = Tensor::new(&shape, probs2).unwrap();
        let y2 = Tensor::new(&shape, labels2).unwrap();
        let perturbed = evaluate(&p2, &y2, &m, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(base.auc, perturbed.auc);
        assert_eq!(base.aupr, perturbed.aupr);
        assert_eq!(base.f1, perturbed.f1);
        assert_eq!(base.acc, perturbed.acc);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Ranking metrics only see the order of scores, so any strictly
    /// monotone transform leaves them unchanged.
    #[test]
    fn ranking_metrics_invariant_under_monotone_transforms(
        raw in prop::collection::vec((0u8..40, prop::bool::ANY), 4..120)
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 40.0).collect();
        let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
        let pos = labels.iter().filter(|&&l| l).count();
        prop_assume!(pos > 0 && pos < labels.len());

        let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp() - 0.5).collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&transformed, &labels).unwrap());
        prop_assert_eq!(aupr(&scores, &labels).unwrap(), aupr(&transformed, &labels).unwrap());
    }
}
