//! Circular (wrap-around) geometry helpers.
//!
//! Stimulus positions live on an interval `[0, L)` whose ends are glued
//! together; distances, means, and innovations must respect that topology.

/// Wrap `x` into `[0, length)`.
pub fn wrap_position(x: f64, length: f64) -> f64 {
    let r = x.rem_euclid(length);
    // rem_euclid can return `length` itself when x is a tiny negative number.
    if r >= length {
        r - length
    } else {
        r
    }
}

/// Signed difference `a - b` wrapped into `[-length/2, length/2)`.
pub fn wrap_signed(delta: f64, length: f64) -> f64 {
    let half = 0.5 * length;
    wrap_position(delta + half, length) - half
}

/// Shortest circular distance between `a` and `b` on `[0, length)`.
pub fn circular_distance(a: f64, b: f64, length: f64) -> f64 {
    wrap_signed(a - b, length).abs()
}

/// Circular center of mass of non-negative `weights` placed at `centers` on
/// `[0, length)`, via the resultant-vector (phase) method.
///
/// Returns `None` when the total mass is zero or the resultant vector is too
/// short to define a direction (e.g. perfectly uniform weights); callers
/// decide what a sensible fallback is.
pub fn circular_center_of_mass(weights: &[f64], centers: &[f64], length: f64) -> Option<f64> {
    assert_eq!(weights.len(), centers.len(), "weights/centers length mismatch");
    let two_pi = std::f64::consts::TAU;
    let mut sin_sum = 0.0;
    let mut cos_sum = 0.0;
    let mut mass = 0.0;
    for (&w, &c) in weights.iter().zip(centers) {
        let phase = two_pi * c / length;
        sin_sum += w * phase.sin();
        cos_sum += w * phase.cos();
        mass += w;
    }
    if mass <= 0.0 {
        return None;
    }
    let resultant = (sin_sum * sin_sum + cos_sum * cos_sum).sqrt();
    if resultant <= 1e-9 * mass {
        return None;
    }
    let angle = sin_sum.atan2(cos_sum);
    Some(wrap_position(angle / two_pi * length, length))
}

/// Linear (non-circular) center of mass; `None` when total mass is zero.
pub fn linear_center_of_mass(weights: &[f64], centers: &[f64]) -> Option<f64> {
    assert_eq!(weights.len(), centers.len(), "weights/centers length mismatch");
    let mass: f64 = weights.iter().sum();
    if mass <= 0.0 {
        return None;
    }
    Some(weights.iter().zip(centers).map(|(w, c)| w * c).sum::<f64>() / mass)
}
