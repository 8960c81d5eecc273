//! Small numeric primitives shared by the loss functions and models.

use ndarray::{Array1, Array2};

/// Probability floor used inside every logarithm; keeps losses finite.
pub const LOG_EPS: f64 = 1e-8;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// ln with the [`LOG_EPS`] floor.
pub fn safe_ln(p: f64) -> f64 {
    p.max(LOG_EPS).ln()
}

/// Index of the row maximum for every row.
pub fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                .map(|(i, _)| i)
                .expect("nonempty row")
        })
        .collect()
}

/// Row maxima (prediction confidence for probability rows).
pub fn max_rows(probs: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter(
        probs
            .rows()
            .into_iter()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
    )
}

/// One-hot encode `labels` into a (batch, num_classes) matrix.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((labels.len(), num_classes));
    for (i, &l) in labels.iter().enumerate() {
        assert!(l < num_classes, "label {l} out of range for {num_classes} classes");
        out[[i, l]] = 1.0;
    }
    out
}

/// Mean cross-entropy between one-hot targets and probability rows.
pub fn cross_entropy_probs(targets: &Array2<f64>, probs: &Array2<f64>) -> f64 {
    assert_eq!(targets.dim(), probs.dim(), "shape mismatch");
    let batch = targets.nrows() as f64;
    let mut total = 0.0;
    for (t_row, p_row) in targets.rows().into_iter().zip(probs.rows()) {
        for (&t, &p) in t_row.iter().zip(p_row.iter()) {
            if t != 0.0 {
                total -= t * safe_ln(p);
            }
        }
    }
    total / batch
}

/// Gradient of mean softmax cross-entropy with respect to the logits:
/// `(softmax(logits) - onehot) / batch`.
pub fn softmax_ce_grad(probs: &Array2<f64>, targets: &Array2<f64>) -> Array2<f64> {
    let batch = probs.nrows() as f64;
    (probs - targets) / batch
}

/// Mean accuracy of argmax predictions against integer labels.
pub fn accuracy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let preds = argmax_rows(probs);
    let correct = preds
        .iter()
        .zip(labels.iter())
        .filter(|(p, l)| p == l)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        let p = softmax_rows(&logits);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax_rows(&Array2::zeros((2, 7)));
        for v in p.iter() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        // perfect prediction
        let t = array![[0.0, 0.0, 1.0]];
        assert!((cross_entropy_probs(&t, &t) - 0.0).abs() < 1e-12);
        // uniform over 7
        let t = one_hot(&[0], 7);
        let p = Array2::from_elem((1, 7), 1.0 / 7.0);
        assert!((cross_entropy_probs(&t, &p) - (7.0f64).ln()).abs() < 1e-12);
        // zero probability at the true class clamps instead of NaN
        let p = array![[0.0, 1.0, 0.0]];
        let t = array![[1.0, 0.0, 0.0]];
        let loss = cross_entropy_probs(&t, &p);
        assert!(loss.is_finite());
        assert!((loss - (-(LOG_EPS.ln()))).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert!(sigmoid(1000.0) <= 1.0);
        assert!(sigmoid(-1000.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
