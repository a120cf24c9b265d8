//! Training losses. Each returns the mean loss and its gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability clamp applied before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Class value excluded from the multi-class loss and from IoU counts.
pub const IGNORE_LABEL: usize = 255;

/// Mean binary cross-entropy between probabilities and `{0, 1}` targets.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            axis: "pixels",
            left: pred.len(),
            right: target.len(),
        });
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            (-t / p + (1.0 - t) / (1.0 - p)) / n
        })
        .collect();
    Ok((loss / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Mean per-pixel softmax cross-entropy over non-ignored pixels.
///
/// `target` holds class indices for every `(n, h, w)` of `logits` (`[N, H, W]`
/// or `[N, 1, H, W]`); pixels labelled [`IGNORE_LABEL`] get zero gradient.
pub fn softmax_ce_loss(logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let (n, k, h, w) = logits.dims4()?;
    let plane = h * w;
    if target.len() != n * plane {
        return Err(Error::ShapeMismatch {
            axis: "pixels",
            left: n * plane,
            right: target.len(),
        });
    }
    let x = logits.data();
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    let mut counted = 0usize;
    for ni in 0..n {
        for p in 0..plane {
            let label = target.data()[ni * plane + p];
            let class = label as usize;
            if class == IGNORE_LABEL && label == IGNORE_LABEL as f64 {
                continue;
            }
            if label < 0.0 || label.fract() != 0.0 || class >= k {
                return Err(Error::InvalidMask {
                    value: label,
                    task: format!("{k}-class loss"),
                });
            }
            let at = |c: usize| (ni * k + c) * plane + p;
            let max = (0..k).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..k).map(|c| (x[at(c)] - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - x[at(class)];
            for c in 0..k {
                grad[at(c)] = (x[at(c)] - log_z).exp();
            }
            grad[at(class)] -= 1.0;
            counted += 1;
        }
    }
    if counted == 0 {
        return Ok((0.0, Tensor::new(logits.shape().to_vec(), grad)?));
    }
    let scale = 1.0 / counted as f64;
    for g in &mut grad {
        *g *= scale;
    }
    Ok((total * scale, Tensor::new(logits.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_perfect_and_uninformed() {
        let t = Tensor::new(vec![4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (l, _) = bce_loss(&t, &t).unwrap();
        assert!(l <= 1e-11);
        let (l, _) = bce_loss(&Tensor::full(&[4], 0.5).unwrap(), &t).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_shape_mismatch() {
        let a = Tensor::zeros(&[3]).unwrap();
        let b = Tensor::zeros(&[4]).unwrap();
        assert!(bce_loss(&a, &b).is_err());
    }

    #[test]
    fn ce_closed_forms() {
        let logits = Tensor::new(vec![1, 2, 1, 1], vec![10.0, -10.0]).unwrap();
        let target = Tensor::zeros(&[1, 1, 1]).unwrap();
        let (l, _) = softmax_ce_loss(&logits, &target).unwrap();
        assert!(l <= 1e-8);

        let logits = Tensor::full(&[1, 4, 2, 2], 0.7).unwrap();
        let target = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let (l, _) = softmax_ce_loss(&logits, &target).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn ce_ignores_reserved_label() {
        let logits = Tensor::new(vec![1, 3, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let target = Tensor::full(&[1, 1, 2], 255.0).unwrap();
        let (l, g) = softmax_ce_loss(&logits, &target).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));

        let target = Tensor::new(vec![1, 1, 2], vec![255.0, 1.0]).unwrap();
        let (_, g) = softmax_ce_loss(&logits, &target).unwrap();
        for c in 0..3 {
            assert_eq!(g.at4(0, c, 0, 0), 0.0);
        }
    }

    #[test]
    fn ce_rejects_out_of_range_labels() {
        let logits = Tensor::zeros(&[1, 2, 1, 1]).unwrap();
        let target = Tensor::full(&[1, 1, 1], 2.0).unwrap();
        assert!(matches!(softmax_ce_loss(&logits, &target), Err(Error::InvalidMask { .. })));
    }
}
