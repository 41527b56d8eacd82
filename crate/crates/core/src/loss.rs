//! Per-pixel segmentation losses and the Dice metric.

/// Additive smoothing in the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;
/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside the
/// cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn label(y: u8) -> f64 {
    if y != 0 {
        1.0
    } else {
        0.0
    }
}

/// Mean binary cross-entropy over pixels.
pub fn cross_entropy_loss(probs: &[f64], mask: &[u8]) -> f64 {
    debug_assert_eq!(probs.len(), mask.len());
    let total: f64 = probs
        .iter()
        .zip(mask)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y != 0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / probs.len() as f64
}

/// d(mean CE)/d(logit). Zero where the probability sits in the clamp.
pub fn cross_entropy_logit_grad(probs: &[f64], mask: &[u8]) -> Vec<f64> {
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(mask)
        .map(|(&p, &y)| {
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                0.0
            } else {
                (p - label(y)) / n
            }
        })
        .collect()
}

/// `1 − (2Σpy + ε)/(Σp + Σy + ε)`.
pub fn soft_dice_loss(probs: &[f64], mask: &[u8]) -> f64 {
    let (inter, sum) = dice_terms(probs, mask);
    1.0 - (2.0 * inter + DICE_SMOOTH) / (sum + DICE_SMOOTH)
}

fn dice_terms(probs: &[f64], mask: &[u8]) -> (f64, f64) {
    probs.iter().zip(mask).fold((0.0, 0.0), |(i, s), (&p, &y)| {
        let y = label(y);
        (i + p * y, s + p + y)
    })
}

/// Gradient of the soft Dice loss with respect to the probabilities.
pub fn soft_dice_prob_grad(probs: &[f64], mask: &[u8]) -> Vec<f64> {
    let (inter, sum) = dice_terms(probs, mask);
    let den = sum + DICE_SMOOTH;
    let num = 2.0 * inter + DICE_SMOOTH;
    mask.iter()
        .map(|&y| -(2.0 * label(y) * den - num) / (den * den))
        .collect()
}

/// `2|P∩G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice_score(pred: &[u8], truth: &[u8]) -> f64 {
    debug_assert_eq!(pred.len(), truth.len());
    let (mut both, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(truth) {
        let (p, g) = (p != 0, g != 0);
        both += usize::from(p && g);
        np += usize::from(p);
        ng += usize::from(g);
    }
    if np + ng == 0 {
        1.0
    } else {
        2.0 * both as f64 / (np + ng) as f64
    }
}

/// Hard mask at probability 0.5 (logit 0).
pub fn threshold(logits: &[f64]) -> Vec<u8> {
    logits.iter().map(|&z| u8::from(z >= 0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cross_entropy_examples() {
        let mask = [1u8, 0, 1, 0];
        assert!(cross_entropy_loss(&[1.0, 0.0, 1.0, 0.0], &mask) <= 1e-6);
        assert!((cross_entropy_loss(&[0.5; 4], &mask) - 2f64.ln()).abs() < 1e-12);

        let probs: [f64; 4] = [0.2, 0.7, 0.9, 0.4];
        let mut looped = 0.0;
        for i in 0..4 {
            let y = f64::from(mask[i]);
            looped += -(y * probs[i].ln() + (1.0 - y) * (1.0 - probs[i]).ln());
        }
        assert!((cross_entropy_loss(&probs, &mask) - looped / 4.0).abs() < 1e-12);
    }

    #[test]
    fn soft_dice_examples() {
        let mask = [1u8, 0, 1, 1, 0, 0, 0, 1];
        let p = mask.len() as f64;
        let exact: Vec<f64> = mask.iter().map(|&y| f64::from(y)).collect();
        assert!(soft_dice_loss(&exact, &mask) <= 1.0 / (2.0 * p));
        let inverted: Vec<f64> = exact.iter().map(|y| 1.0 - y).collect();
        assert!((soft_dice_loss(&inverted, &mask) - (1.0 - DICE_SMOOTH / (p + DICE_SMOOTH))).abs() < 1e-12);
        assert_eq!(soft_dice_loss(&[0.0; 8], &[0u8; 8]), 0.0);
    }

    #[test]
    fn dice_score_examples() {
        let a = [1u8, 1, 0, 0, 1];
        assert_eq!(dice_score(&a, &a), 1.0);
        assert_eq!(dice_score(&[1, 1, 0, 0], &[0, 0, 1, 1]), 0.0);
        assert_eq!(dice_score(&[0, 0], &[0, 0]), 1.0);
        // |P| = 4, |G| = 6, overlap 3.
        let pred = [1u8, 1, 1, 1, 0, 0, 0, 0, 0];
        let truth = [1u8, 1, 1, 0, 1, 1, 1, 0, 0];
        assert!((dice_score(&pred, &truth) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn saturated_cross_entropy_has_no_gradient() {
        let g = cross_entropy_logit_grad(&[1.0 - 1e-12, 1e-12], &[1, 0]);
        assert!(g.iter().all(|x| x.abs() < 1e-6));
    }

    proptest! {
        #[test]
        fn soft_dice_gradient_matches_finite_differences(
            probs in proptest::collection::vec(0.05f64..0.95, 1..24),
            bits in proptest::collection::vec(0u8..2, 24),
        ) {
            let mask = &bits[..probs.len()];
            let g = soft_dice_prob_grad(&probs, mask);
            let h = 1e-6;
            for i in 0..probs.len() {
                let mut up = probs.clone();
                let mut dn = probs.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (soft_dice_loss(&up, mask) - soft_dice_loss(&dn, mask)) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() < 1e-5);
            }
        }

        #[test]
        fn dice_score_symmetric_and_bounded(
            a in proptest::collection::vec(0u8..2, 1..40),
            b in proptest::collection::vec(0u8..2, 40),
        ) {
            let b = &b[..a.len()];
            let d = dice_score(&a, b);
            prop_assert_eq!(d, dice_score(b, &a));
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
