//! Value-level versions of the graph primitives.

use super::graph::cross_entropy_value;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `x @ w + b` for `x: [n, d]`, `w: [d, o]`, `b: [o]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || w.shape().len() != 2 || x.cols() != w.rows() {
        return Err(Error::shape("linear_forward", x.shape(), w.shape()));
    }
    if b.shape() != [w.cols()] {
        return Err(Error::shape("linear_forward", w.shape(), b.shape()));
    }
    let mut y = x.matmul(w)?.into_data();
    let o = w.cols();
    for (i, v) in y.iter_mut().enumerate() {
        *v += b.data()[i % o];
    }
    Tensor::from_parts(vec![x.rows(), o], y)
}

/// Elementwise `max(0, x)`. The subgradient at 0 is taken to be 0.
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::EmptyBatch("mse_loss"));
    }
    if pred.len() != target.len() {
        return Err(Error::shape("mse_loss", pred.shape(), target.shape()));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Mean negative log-softmax of the true class. Labels are 1-based.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            logits.shape(),
            &[labels.len()],
        ));
    }
    cross_entropy_value(logits, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_examples() {
        let y = linear_forward(
            &m(&[&[1.0, 0.0]]),
            &m(&[&[2.0], &[3.0]]),
            &Tensor::vector(vec![0.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(y.data(), &[2.0]);
        let y = linear_forward(
            &m(&[&[0.0, 0.0]]),
            &m(&[&[-7.0], &[0.3]]),
            &Tensor::vector(vec![5.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(y.data(), &[5.0]);
        let y = linear_forward(
            &m(&[&[1.0, 1.0]]),
            &m(&[&[1.0], &[1.0]]),
            &Tensor::vector(vec![1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let err = linear_forward(
            &m(&[&[1.0, 0.0, 2.0]]),
            &m(&[&[2.0], &[3.0]]),
            &Tensor::vector(vec![0.0]).unwrap(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 1]"), "{msg}");
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::vector(vec![-3.0, -0.5]).unwrap();
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = Tensor::vector(vec![0.1, 4.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn mse_examples() {
        let v = |d: &[f64]| Tensor::vector(d.to_vec()).unwrap();
        assert_eq!(mse_loss(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(mse_loss(&v(&[0.0]), &v(&[2.0])).unwrap(), 4.0);
        assert_eq!(mse_loss(&v(&[1.0, 3.0]), &v(&[2.0, 5.0])).unwrap(), 2.5);
        assert!(matches!(
            mse_loss(&Tensor::zeros(&[0]), &Tensor::zeros(&[0])),
            Err(Error::EmptyBatch(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(&[3, 5]);
        let l = cross_entropy(&uniform, &[1, 3, 5]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);

        let sharp = m(&[&[100.0, 0.0, 0.0]]);
        assert!(cross_entropy(&sharp, &[1]).unwrap() < 1e-6);

        // ln(1 + e^-1)
        let l = cross_entropy(&m(&[&[1.0, 0.0]]), &[1]).unwrap();
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_range() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            cross_entropy(&logits, &[0]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            cross_entropy(&logits, &[4]),
            Err(Error::Validation(_))
        ));
    }
}
