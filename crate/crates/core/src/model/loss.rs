use crate::embedding::EmbeddingVector;

/// Contrastive loss `y d^2 + (1 - y) max(0, margin - d)^2` with Euclidean `d`.
pub fn contrastive_loss(
    a: &EmbeddingVector,
    b: &EmbeddingVector,
    same_user: bool,
    margin: f64,
) -> f64 {
    contrastive_loss_grad(a, b, if same_user { 1.0 } else { 0.0 }, margin).0
}

/// Loss and its gradient with respect to `a`; the gradient with respect to
/// `b` is the negation.
pub fn contrastive_loss_grad(a: &[f64], b: &[f64], label: f64, margin: f64) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let sq: f64 = diff.iter().map(|v| v * v).sum();
    let d = sq.sqrt();
    let hinge = (margin - d).max(0.0);
    let loss = label * sq + (1.0 - label) * hinge * hinge;
    // d/da of d^2 is 2 diff; d/da of hinge^2 is -2 hinge diff / d.
    let impostor = if hinge > 0.0 && d > 0.0 {
        -2.0 * hinge / d
    } else {
        0.0
    };
    let coef = 2.0 * label + (1.0 - label) * impostor;
    (loss, diff.into_iter().map(|v| coef * v).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn identical_genuine_pair_is_zero() {
        let a = ev(&[0.3, -0.2, 0.9]);
        assert_eq!(contrastive_loss(&a, &a, true, 1.5), 0.0);
    }

    #[test]
    fn impostor_beyond_margin_is_zero() {
        assert_eq!(
            contrastive_loss(&ev(&[0.0, 0.0]), &ev(&[3.0, 4.0]), false, 1.5),
            0.0
        );
        assert_eq!(
            contrastive_loss(&ev(&[0.0, 0.0]), &ev(&[0.9, 1.2]), false, 1.5),
            0.0
        );
    }

    #[test]
    fn impostor_inside_margin() {
        let l = contrastive_loss(&ev(&[0.0, 0.0]), &ev(&[0.3, 0.4]), false, 1.5);
        assert!((l - 1.0).abs() < 1e-15);
    }

    #[test]
    fn genuine_is_squared_distance() {
        let l = contrastive_loss(&ev(&[0.0, 0.0]), &ev(&[3.0, 4.0]), true, 1.5);
        assert_eq!(l, 25.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = [0.2, -0.4, 0.1];
        let b = [0.5, 0.3, -0.2];
        for label in [0.0, 1.0] {
            let (_, g) = contrastive_loss_grad(&a, &b, label, 1.5);
            for k in 0..3 {
                let step = 1e-6;
                let mut p = a;
                let mut m = a;
                p[k] += step;
                m[k] -= step;
                let fd = (contrastive_loss_grad(&p, &b, label, 1.5).0
                    - contrastive_loss_grad(&m, &b, label, 1.5).0)
                    / (2.0 * step);
                assert!((fd - g[k]).abs() < 1e-8);
            }
        }
    }
}
