//! Scalar losses with their exact gradients.

use crate::error::{invalid, Result};

use super::tensor::{self, Tensor};

/// Mean squared difference and its gradient with respect to `a`.
pub fn loss_mse(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor)> {
    a.check_same_shape(b, "mse")?;
    let n = a.len() as f64;
    let diff = a.sub(b)?;
    let value = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((value, diff.scale(2.0 / n)))
}

/// Mean binary cross-entropy on logits. Uses
/// `max(x,0) − x·t + ln(1 + e^{−|x|})`, which never overflows.
pub fn loss_bce_logits(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    logits.check_same_shape(targets, "bce")?;
    if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(invalid("bce targets must be 0 or 1"));
    }
    let n = logits.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &t) in logits.data().iter().zip(targets.data()) {
        value += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        grad.push((sigmoid(x) - t) / n);
    }
    Ok((value / n, Tensor::new(logits.shape().to_vec(), grad)?))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `1 − cos(f_ref, f)` with `f_ref` held constant. Both inputs are treated
/// as flat vectors.
pub fn loss_cosine_distance(f_ref: &Tensor, f: &Tensor) -> Result<(f64, Tensor)> {
    if f_ref.len() != f.len() {
        return Err(crate::error::shape_err(format!(
            "cosine distance: {} vs {}",
            f_ref.len(),
            f.len()
        )));
    }
    let r = f_ref.data();
    let v = f.data();
    let (nr, nv) = (tensor::norm(r), tensor::norm(v));
    if nr == 0.0 || nv == 0.0 {
        return Err(invalid("cosine distance of a zero-norm feature"));
    }
    let cos = tensor::dot(r, v)? / (nr * nv);
    // d cos / d v = r/(|r||v|) − cos · v/|v|²
    let grad: Vec<f64> = r
        .iter()
        .zip(v)
        .map(|(&ri, &vi)| -(ri / (nr * nv) - cos * vi / (nv * nv)))
        .collect();
    let value = (1.0 - cos).clamp(0.0, 2.0);
    Ok((value, Tensor::new(f.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let a = Tensor::vector(vec![1.0, -2.0]);
        let (v, g) = loss_mse(&a, &a).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.max_abs(), 0.0);
        let (v, g) = loss_mse(&Tensor::vector(vec![2.0]), &Tensor::vector(vec![0.0])).unwrap();
        assert_eq!(v, 4.0);
        assert_eq!(g.data(), &[4.0]);
        assert!(loss_mse(&a, &Tensor::vector(vec![1.0])).is_err());
    }

    #[test]
    fn bce_examples() {
        let (v, _) = loss_bce_logits(&Tensor::vector(vec![0.0]), &Tensor::vector(vec![1.0])).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        let (v, g) = loss_bce_logits(&Tensor::vector(vec![50.0]), &Tensor::vector(vec![1.0])).unwrap();
        assert!(v.is_finite() && v < 1e-20);
        assert!(g.data()[0].abs() < 1e-20);
        let (v, _) = loss_bce_logits(&Tensor::vector(vec![-800.0]), &Tensor::vector(vec![1.0])).unwrap();
        assert!((v - 800.0).abs() < 1e-9);
        assert!(loss_bce_logits(&Tensor::vector(vec![0.0]), &Tensor::vector(vec![0.5])).is_err());
    }

    #[test]
    fn cosine_distance_examples() {
        let f = Tensor::vector(vec![0.3, -1.0, 2.0]);
        assert!(loss_cosine_distance(&f, &f).unwrap().0.abs() < 1e-15);
        let (v, _) = loss_cosine_distance(&f, &f.scale(-1.0)).unwrap();
        assert!((v - 2.0).abs() < 1e-15);
        assert!(loss_cosine_distance(&f, &Tensor::zeros(&[3])).is_err());
    }
}
