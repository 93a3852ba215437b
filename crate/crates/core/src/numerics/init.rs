use rand::Rng;

use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Fan-in and fan-out for a shape: a 1-axis tensor is treated as a single row.
fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [rows, cols] => (*rows, *cols),
        [rows, rest @ ..] => (*rows, rest.iter().product()),
    }
}

pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = fans(shape);
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot/Xavier uniform initialization on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<S: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<S> {
    let bound = xavier_bound(shape);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64_lossy(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn variance_matches_uniform_law() {
        let t: Tensor<f64> = xavier_init(&[100, 100], &mut ChaCha8Rng::seed_from_u64(1));
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / 200.0;
        assert!((var / expected - 1.0).abs() < 0.2, "variance {var} vs {expected}");
    }

    #[test]
    fn seeded_draws_repeat_and_stay_in_bounds() {
        let a: Tensor<f32> = xavier_init(&[7, 3], &mut ChaCha8Rng::seed_from_u64(9));
        let b: Tensor<f32> = xavier_init(&[7, 3], &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let bound = xavier_bound(&[7, 3]) as f32;
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }
}
