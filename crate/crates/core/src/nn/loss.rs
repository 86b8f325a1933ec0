use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Batch-mean softmax cross-entropy over `[N, classes]` logits.
///
/// Returns the mean loss and its gradient with respect to the logits
/// (`(softmax − one_hot) / N`).
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let n = logits.batch();
    let classes = logits.features();
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for a batch of {n}", labels.len())));
    }
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = 0.0f64;
    for (i, (&label, g)) in labels.iter().zip(grad.chunks_exact_mut(classes)).enumerate() {
        if label >= classes {
            return Err(Error::Label(format!("label {label} out of range for {classes} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label].as_f64();
        for (c, (gv, v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v.as_f64() - log_z).exp();
            let target = if c == label { 1.0 } else { 0.0 };
            *gv = T::from_f64((p - target) / n as f64);
        }
    }
    Ok((total / n as f64, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Batch-mean cosine spectral-angle loss `1 − cos(output, target)` per row.
///
/// A zero target row is rejected as degenerate.
pub fn cosine_sa_loss<T: Scalar>(output: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if output.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "output shape {:?} differs from target shape {:?}",
            output.shape(),
            target.shape()
        )));
    }
    let n = output.batch();
    let d = output.features();
    let mut grad = vec![T::zero(); output.len()];
    let mut total = 0.0;
    for (i, g) in grad.chunks_exact_mut(d).enumerate() {
        let (o, t) = (output.row(i), target.row(i));
        let (mut oo, mut tt, mut ot) = (0.0f64, 0.0f64, 0.0f64);
        for (&a, &b) in o.iter().zip(t) {
            let (a, b) = (a.as_f64(), b.as_f64());
            oo += a * a;
            tt += b * b;
            ot += a * b;
        }
        if tt == 0.0 {
            return Err(Error::Degenerate(format!("row {i}: cosine loss needs a non-zero target")));
        }
        let nt = tt.sqrt();
        if oo == 0.0 {
            // No direction to compare: count the row as orthogonal and push
            // the output towards the target.
            total += 1.0;
            for (gv, &b) in g.iter_mut().zip(t) {
                *gv = T::from_f64(-b.as_f64() / nt / n as f64);
            }
            continue;
        }
        let no = oo.sqrt();
        let cos = ot / (no * nt);
        total += 1.0 - cos;
        // d(1 − cos)/do = −(t / (|o||t|) − cos · o / |o|²)
        for ((gv, &a), &b) in g.iter_mut().zip(o).zip(t) {
            let v = -(b.as_f64() / (no * nt) - cos * a.as_f64() / oo);
            *gv = T::from_f64(v / n as f64);
        }
    }
    Ok((total / n as f64, Tensor::new(output.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, grad) = softmax_cross_entropy(&t(&[1, 3], &[0.0, 0.0, 0.0]), &[1]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!((grad.data()[1] + 2.0 / 3.0).abs() < 1e-12);

        let (loss, _) = softmax_cross_entropy(&t(&[1, 3], &[1.0, 0.0, 0.0]), &[0]).unwrap();
        let e = std::f64::consts::E;
        assert!((loss + (e / (e + 2.0)).ln()).abs() < 1e-12);
        assert!((loss - 0.5514).abs() < 1e-4);

        let (loss, _) = softmax_cross_entropy(&t(&[1, 3], &[800.0, 0.0, -3.0]), &[0]).unwrap();
        assert!(loss < 1e-300 || loss == 0.0);

        assert!(matches!(
            softmax_cross_entropy(&t(&[1, 3], &[0.0; 3]), &[3]),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn cosine_examples() {
        let a = t(&[1, 3], &[0.3, 0.5, 0.9]);
        let (loss, grad) = cosine_sa_loss(&a, &a).unwrap();
        assert!(loss.abs() < 1e-15);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));

        let scaled = t(&[1, 3], &[0.6, 1.0, 1.8]);
        assert!(cosine_sa_loss(&scaled, &a).unwrap().0.abs() < 1e-15);

        let (loss, _) = cosine_sa_loss(&t(&[1, 2], &[1.0, 0.0]), &t(&[1, 2], &[0.0, 1.0])).unwrap();
        assert_eq!(loss, 1.0);

        assert!(matches!(
            cosine_sa_loss(&t(&[1, 2], &[0.0, 1.0]), &t(&[1, 2], &[0.0, 0.0])),
            Err(Error::Degenerate(_))
        ));
        let (loss, grad) = cosine_sa_loss(&t(&[1, 2], &[0.0, 0.0]), &t(&[1, 2], &[0.0, 2.0])).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(grad.data(), &[0.0, -1.0]);
    }

    #[test]
    fn cosine_gradient_is_orthogonal_to_output() {
        let o = t(&[1, 4], &[0.3, -0.2, 0.7, 0.1]);
        let y = t(&[1, 4], &[0.5, 0.4, 0.2, 0.9]);
        let (_, g) = cosine_sa_loss(&o, &y).unwrap();
        let dot: f64 = g.data().iter().zip(o.data()).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-14);
    }
}
