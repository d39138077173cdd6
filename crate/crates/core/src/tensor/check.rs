//! Finite-difference gradient oracle.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::parallel;

/// Central-difference gradient of a scalar-valued function:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` per coordinate. Coordinates are
/// independent, so they are evaluated data-parallel.
pub fn finite_diff_grad<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T> + Sync,
{
    // NaN-safe positivity check.
    if h.partial_cmp(&T::ZERO) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Contract("finite_diff_grad: h must be > 0".into()));
    }
    let two_h = h + h;
    let results = parallel::map_indexed(x.numel(), |i| -> Result<T> {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] += -h;
        Ok((f(&plus)? - f(&minus)?) / two_h)
    });
    let mut grad = Vec::with_capacity(x.numel());
    for r in results {
        grad.push(r?);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let x = Tensor::new(vec![4], vec![0.3f64, -1.0, 2.0, 0.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().copied().sum()), &x, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn gradient_of_square_at_three() {
        let x = Tensor::new(vec![1], vec![3.0f64]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        assert!(finite_diff_grad(|t| Ok(t.data()[0]), &x, 0.0).is_err());
    }
}
