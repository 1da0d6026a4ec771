//! Focal binary cross-entropy over per-class logits.

use crate::error::Result;
use crate::numeric::{Matrix, Tape, Var};

pub const DEFAULT_ALPHA: f64 = 0.25;
pub const DEFAULT_GAMMA: f64 = 2.0;
/// `-log p_t` is evaluated at `max(p_t, PROB_FLOOR)`.
pub const PROB_FLOOR: f64 = 1e-12;

fn alpha_t(y: f64, alpha: f64) -> f64 {
    if y > 0.5 {
        alpha
    } else {
        1.0 - alpha
    }
}

/// One class term from a probability `p = sigmoid(logit)`.
pub fn focal_from_prob(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p_t = if y > 0.5 { p } else { 1.0 - p };
    alpha_t(y, alpha) * (1.0 - p_t).powf(gamma) * -(p_t.max(PROB_FLOOR)).ln()
}

/// `softplus(x) = ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Value and derivative of one class term with respect to its logit.
///
/// With `s = ±1` for the label and `u = s·z`, `p_t = σ(u)` and `1 - p_t = σ(-u)`
/// are formed directly so that neither tail loses precision.
pub fn focal_term(logit: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let s = if y > 0.5 { 1.0 } else { -1.0 };
    let u = s * logit;
    let q = crate::numeric::sigmoid(-u);
    let floor = -PROB_FLOOR.ln();
    let raw = softplus(-u);
    let (nll, clamped) = if raw > floor { (floor, true) } else { (raw, false) };
    let a = alpha_t(y, alpha);
    let qg = q.powf(gamma);
    let value = a * qg * nll;
    let open = if clamped { 0.0 } else { 1.0 };
    let d_du = -a * qg * (gamma * (1.0 - q) * nll + q * open);
    (value, s * d_du)
}

/// Summed focal loss over classes.
pub fn focal_bce(logits: &[f64], labels: &[f64], alpha: f64, gamma: f64) -> f64 {
    assert_eq!(logits.len(), labels.len(), "logit and label lengths differ");
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| focal_term(z, y, alpha, gamma).0)
        .sum()
}

/// Records the focal loss of a 1×C (or C×1) logit node on the tape.
pub fn focal_loss(tape: &mut Tape, logits: Var, labels: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
    let z = tape.value(logits).clone();
    assert_eq!(z.len(), labels.len(), "logit and label lengths differ");
    let mut total = 0.0;
    let grad = Matrix::from_vec(
        z.rows(),
        z.cols(),
        z.as_slice()
            .iter()
            .zip(labels)
            .map(|(&zi, &y)| {
                let (v, g) = focal_term(zi, y, alpha, gamma);
                total += v;
                g
            })
            .collect(),
    )?;
    tape.scalar_fn(logits, total, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bce(z: f64, y: f64) -> f64 {
        let p = 1.0 / (1.0 + (-z).exp());
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    }

    #[test]
    fn defaults() {
        assert_eq!(DEFAULT_ALPHA, 0.25);
        assert_eq!(DEFAULT_GAMMA, 2.0);
    }

    #[test]
    fn half_bce_at_gamma_zero() {
        for &z in &[-6.0, -1.3, -0.2, 0.0, 0.4, 2.2, 7.5] {
            for &y in &[0.0, 1.0] {
                let (v, _) = focal_term(z, y, 0.5, 0.0);
                assert!((v - 0.5 * bce(z, y)).abs() < 1e-12, "z={z} y={y}");
            }
        }
    }

    #[test]
    fn single_term_anchor() {
        let expected = 0.25 * 0.01 * -(0.9f64.ln());
        assert!((focal_from_prob(0.9, 1.0, 0.25, 2.0) - expected).abs() < 1e-15);
        let (v, _) = focal_term(9f64.ln(), 1.0, 0.25, 2.0);
        assert!((v - expected).abs() < 1e-9);
        assert!((expected - 2.634e-4).abs() < 1e-7);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        for &z in &[-800.0, -40.0, 40.0, 800.0] {
            for &y in &[0.0, 1.0] {
                let (v, g) = focal_term(z, y, 0.25, 2.0);
                assert!(v.is_finite() && g.is_finite());
                assert!(v <= 0.75 * -(PROB_FLOOR.ln()) + 1e-9);
            }
        }
    }

    #[test]
    fn tape_gradient_matches_closed_form() {
        let mut params = crate::numeric::ParamSet::new();
        let id = params.add("z", Matrix::row_vector(&[0.3, -1.2, 2.0]));
        let labels = [1.0, 0.0, 0.0];
        let report = crate::numeric::gradcheck(&mut params, 1e-6, |tape, p| {
            let z = tape.param(p, id);
            focal_loss(tape, z, &labels, 0.25, 2.0)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-7, "{report:?}");
    }

    proptest! {
        #[test]
        fn gradient_matches_differences(z in -12.0f64..12.0, y in 0u8..2, alpha in 0.0f64..1.0, gamma in 0.0f64..5.0) {
            let y = f64::from(y);
            let h = 1e-6;
            let (_, g) = focal_term(z, y, alpha, gamma);
            let numeric = (focal_term(z + h, y, alpha, gamma).0 - focal_term(z - h, y, alpha, gamma).0) / (2.0 * h);
            let err = (g - numeric).abs() / 1f64.max(g.abs()).max(numeric.abs());
            prop_assert!(err < 1e-5, "analytic {g} numeric {numeric}");
        }

        #[test]
        fn non_negative_and_monotone(p1 in 0.001f64..0.999, p2 in 0.001f64..0.999, alpha in 0.0f64..1.0, gamma in 0.0f64..4.0) {
            prop_assert!(focal_from_prob(p1, 1.0, alpha, gamma) >= 0.0);
            prop_assert!(focal_from_prob(p1, 0.0, alpha, gamma) >= 0.0);
            let (lo, hi) = if p1 < p2 { (p1, p2) } else { (p2, p1) };
            if hi - lo > 1e-6 && alpha > 0.0 {
                prop_assert!(focal_from_prob(hi, 1.0, alpha, gamma) < focal_from_prob(lo, 1.0, alpha, gamma));
            }
        }
    }
}
