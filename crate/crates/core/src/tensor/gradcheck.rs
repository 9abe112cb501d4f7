//! Central finite-difference gradient oracle.
//!
//! The oracle only ever calls the forward function, so it is independent of
//! the reverse-mode implementation it is used to check.

/// Central differences of `f` at `x` for every coordinate.
pub fn numerical_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let coords: Vec<usize> = (0..x.len()).collect();
    numerical_grad_at(&mut f, x, &coords, eps)
}

/// Central differences of `f` at `x` for the listed coordinates only.
pub fn numerical_grad_at(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    eps: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both
/// vectors are (numerically) zero.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic() {
        let g = numerical_grad(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!(rel_error(&g, &[12.0, 2.0]) < 1e-8);
    }
}
