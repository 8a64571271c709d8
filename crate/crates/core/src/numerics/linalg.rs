use rand::Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// Haar-ish random orthogonal `n × n` matrix: modified Gram–Schmidt on a
/// Gaussian matrix, computed in f64. Rows are orthonormal.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(r) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let data = rows.into_iter().flatten().map(|x| x as f32).collect();
    Tensor::from_parts(vec![n, n], data)
}
