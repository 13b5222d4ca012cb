//! Mean squared error.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Returns `mean((pred - target)^2)` and its gradient `2 (pred - target) / count`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse: prediction {} vs target {}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("mse of empty tensors".into()));
    }
    let n = T::of(pred.len() as f64);
    let two = T::of(2.0);
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = T::zero();
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        sum += d * d;
        *g = two * d / n;
    }
    Ok((sum / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_inputs_have_zero_loss_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::<f64>::randn(Shape::new(1, 1, 3, 3), 1.0, &mut rng);
        let (l, g) = mse_loss(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_element_hand_case() {
        let s = Shape::new(1, 1, 1, 1);
        let p = Tensor::from_vec(s, vec![2.0f64]).unwrap();
        let t = Tensor::from_vec(s, vec![0.0f64]).unwrap();
        let (l, g) = mse_loss(&p, &t).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g.data(), &[4.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Shape::new(1, 1, 3, 3);
        let p = Tensor::<f64>::randn(s, 1.0, &mut rng);
        let t = Tensor::<f64>::randn(s, 1.0, &mut rng);
        let (_, g) = mse_loss(&p, &t).unwrap();
        let h = 1e-6;
        for i in 0..p.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let n = (mse_loss(&a, &t).unwrap().0 - mse_loss(&b, &t).unwrap().0) / (2.0 * h);
            let rel = (g.data()[i] - n).abs() / g.data()[i].abs().max(n.abs());
            assert!(rel < 1e-8, "element {i}: {rel}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 3));
        assert!(matches!(mse_loss(&a, &b), Err(Error::Shape(_))));
    }
}
