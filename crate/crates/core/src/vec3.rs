//! Minimal 3-vector helpers on `[f64; 3]`.

pub type Vec3 = [f64; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Unit vector for elevation `theta` (from +z) and azimuth `phi` (from +x).
#[inline]
pub fn from_angles(theta: f64, phi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [st * cp, st * sp, ct]
}

/// Inverse of [`from_angles`]: `(theta, phi)` with theta in [0, π], phi in (−π, π].
#[inline]
pub fn to_angles(d: Vec3) -> (f64, f64) {
    let n = norm(d);
    let theta = (d[2] / n).clamp(-1.0, 1.0).acos();
    let phi = d[1].atan2(d[0]);
    (theta, phi)
}

/// Angle between two directions in radians.
pub fn angle_between(a: Vec3, b: Vec3) -> f64 {
    let c = dot(a, b) / (norm(a) * norm(b));
    c.clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angles_round_trip() {
        for &(t, p) in &[(0.3, 1.2), (2.9, -3.0), (1.57, 0.0), (0.01, -0.5)] {
            let (t2, p2) = to_angles(from_angles(t, p));
            assert!((t - t2).abs() < 1e-12);
            assert!((p - p2).abs() < 1e-12);
        }
    }
}
