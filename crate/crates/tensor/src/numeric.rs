//! Finite-difference helpers for verifying backward rules.

use crate::Real;

/// Central-difference gradient of `f` at `x` with the given step.
pub fn central_difference<T: Real>(mut f: impl FnMut(&[T]) -> T, x: &[T], step: T) -> Vec<T> {
    let mut probe = x.to_vec();
    let two = T::of(2.0);
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (two * step)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or the absolute difference norm when both
/// vectors are below `1e-12` in norm.
pub fn relative_error<T: Real>(analytic: &[T], numeric: &[T]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(&a, &b)| a.as_f64() - b.as_f64()));
    let scale = norm(&mut analytic.iter().map(|a| a.as_f64())).max(norm(&mut numeric.iter().map(|b| b.as_f64())));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
