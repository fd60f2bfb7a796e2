//! Small dense-vector helpers. Parameter vectors here are short (d ≈ 8),
//! so plain slices beat pulling a matrix library into the hot loops.

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm_sq(x: &[f64]) -> f64 {
    dot(x, x)
}

pub fn norm(x: &[f64]) -> f64 {
    norm_sq(x).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| a - b).collect()
}

pub fn scale(alpha: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| alpha * v).collect()
}

pub fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_ops() {
        let x = [3.0, 4.0];
        assert_eq!(norm(&x), 5.0);
        let mut y = vec![1.0, 1.0];
        axpy(2.0, &x, &mut y);
        assert_eq!(y, vec![7.0, 9.0]);
        assert_eq!(sub(&y, &x), vec![4.0, 5.0]);
        assert_eq!(dist(&[0.0, 0.0], &x), 5.0);
        assert!(!all_finite(&[1.0, f64::NAN]));
    }
}
