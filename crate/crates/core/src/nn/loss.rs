use super::NnError;

/// Probability clamp used by every log-probability in the crate.
pub const PROB_EPS: f64 = 1e-7;

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    if logits.is_empty() {
        return Vec::new();
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `-log softmax(logits)[target]`, computed through log-sum-exp.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<f64, NnError> {
    if target >= logits.len() {
        return Err(NnError::TargetOutOfRange {
            target,
            classes: logits.len(),
        });
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    Ok((lse - logits[target]).max(0.0))
}

/// Binary cross entropy with `p` clamped into `[PROB_EPS, 1 - PROB_EPS]`.
pub fn binary_cross_entropy(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

pub fn mean_binary_cross_entropy(p: &[f64], y: &[f64]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    p.iter().zip(y).map(|(pi, yi)| binary_cross_entropy(*pi, *yi)).sum::<f64>() / p.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let l = softmax_cross_entropy(&[0.3; 4], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.386294361).abs() < 1e-9);
    }

    #[test]
    fn large_margin_gives_zero_loss() {
        let l = softmax_cross_entropy(&[0.0, 800.0, 0.0], 1).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn out_of_range_target() {
        assert_eq!(
            softmax_cross_entropy(&[1.0, 2.0], 2),
            Err(NnError::TargetOutOfRange { target: 2, classes: 2 })
        );
    }

    #[test]
    fn bce_reference_points() {
        assert!((binary_cross_entropy(0.5, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(binary_cross_entropy(1.0 - PROB_EPS, 1.0) < 1.1e-7);
        // clamped at the boundary, so never infinite
        assert!(binary_cross_entropy(0.0, 1.0).is_finite());
    }

    #[test]
    fn random_logits_match_direct_formula() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(2..9);
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let t = rng.random_range(0..n);
            let z: f64 = logits.iter().map(|x: &f64| x.exp()).sum();
            let direct = -(logits[t].exp() / z).ln();
            assert!((softmax_cross_entropy(&logits, t).unwrap() - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn batch_bce_matches_direct_formula() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let p: Vec<f64> = (0..64).map(|_| rng.random_range(0.01..0.99)).collect();
        let y: Vec<f64> = (0..64).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let direct: f64 = p
            .iter()
            .zip(&y)
            .map(|(p, y)| if *y == 1.0 { -p.ln() } else { -(1.0 - p).ln() })
            .sum::<f64>()
            / 64.0;
        assert!((mean_binary_cross_entropy(&p, &y) - direct).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let s = softmax(&logits);
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(s.iter().all(|p| *p > 0.0));
        }

        #[test]
        fn losses_are_non_negative(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..10),
            pick in 0usize..10,
            p in 0.0f64..=1.0,
            y in proptest::bool::ANY,
        ) {
            let t = pick % logits.len();
            prop_assert!(softmax_cross_entropy(&logits, t).unwrap() >= 0.0);
            let target = if y { 1.0 } else { 0.0 };
            prop_assert!(binary_cross_entropy(p, target) >= 0.0);
        }
    }
}
