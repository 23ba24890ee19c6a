//! Ray construction, stratified coarse depths, max-blur weight filtering,
//! piecewise-linear CDF construction with inverse-transform fine sampling,
//! and conical-frustum moments.

use rand::Rng;

use crate::vec3::{self, Vec3};
use crate::{Error, Result};

/// Depth of the first sample on every ray. Zero would put the first
/// frustum's apex at the receiver.
pub const T_ORIGIN: f64 = 1e-3;

/// Default cone aspect ratio (base radius / height), about sin(0.1°).
pub const DEFAULT_CONE_RATIO: f64 = 0.0017;

/// Additive nudge separating coincident fine depths.
pub const DEPTH_NUDGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit vector pointing from the receiver toward the source.
    pub direction: Vec3,
    pub cone_ratio: f64,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vec3, direction: Vec3, cone_ratio: f64) -> Result<Self> {
        let n = vec3::norm(direction);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::invalid("ray direction must be a non-zero finite vector"));
        }
        if !(cone_ratio > 0.0) {
            return Err(Error::invalid(format!("cone ratio must be > 0, got {cone_ratio}")));
        }
        Ok(Ray {
            origin,
            direction: vec3::scale(direction, 1.0 / n),
            cone_ratio,
        })
    }

    pub fn from_angles(origin: Vec3, theta: f64, phi: f64, cone_ratio: f64) -> Result<Self> {
        Ray::new(origin, vec3::from_angles(theta, phi), cone_ratio)
    }

    pub fn at(&self, t: f64) -> Vec3 {
        vec3::add(self.origin, vec3::scale(self.direction, t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Coarse,
    Fine,
}

/// Sorted interval endpoints `t_1 < … < t_{m+1}` along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPartition {
    pub depths: Vec<f64>,
    pub stage: Stage,
}

impl DepthPartition {
    pub fn intervals(&self) -> usize {
        self.depths.len().saturating_sub(1)
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.depths.windows(2).all(|w| w[0] < w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    /// Number of intervals per ray.
    pub m: usize,
    pub t_near: f64,
    pub t_far: f64,
    /// Base sampling density added to the fine-stage CDF.
    pub epsilon: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            m: 128,
            t_near: T_ORIGIN,
            t_far: 15.0,
            epsilon: 0.01,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::invalid(format!("sampler m must be >= 2, got {}", self.m)));
        }
        if !(self.t_near >= 0.0 && self.t_near < self.t_far && self.t_far > T_ORIGIN) {
            return Err(Error::invalid(format!(
                "sampling range must satisfy 0 <= t_near < t_far, got [{}, {}]",
                self.t_near, self.t_far
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::invalid("epsilon must be >= 0"));
        }
        Ok(())
    }
}

/// Pushes `t` after the last element, nudging it up if needed to keep the
/// sequence strictly increasing.
fn push_increasing(out: &mut Vec<f64>, t: f64) {
    let t = match out.last() {
        Some(&prev) if t <= prev => prev + DEPTH_NUDGE.max(prev * f64::EPSILON * 4.0),
        _ => t,
    };
    out.push(t);
}

/// Stratified depths from explicit per-stratum uniforms in [0, 1).
pub fn stratified_from_uniforms(cfg: &SamplerConfig, uniforms: &[f64]) -> DepthPartition {
    debug_assert_eq!(uniforms.len(), cfg.m);
    let width = (cfg.t_far - cfg.t_near) / cfg.m as f64;
    let mut depths = Vec::with_capacity(cfg.m + 1);
    depths.push(T_ORIGIN);
    for (j, &u) in uniforms.iter().enumerate() {
        let lo = cfg.t_near + j as f64 * width;
        push_increasing(&mut depths, lo + u * width);
    }
    DepthPartition {
        depths,
        stage: Stage::Coarse,
    }
}

/// One uniform draw per stratum of `[t_near, t_far]`, preceded by
/// [`T_ORIGIN`].
pub fn stratified_coarse<R: Rng + ?Sized>(cfg: &SamplerConfig, rng: &mut R) -> DepthPartition {
    let u: Vec<f64> = (0..cfg.m).map(|_| rng.gen::<f64>()).collect();
    stratified_from_uniforms(cfg, &u)
}

/// Max-blur filter `0.5(max(w[k-1], w[k]) + max(w[k], w[k+1]))` with edge
/// replication.
pub fn filter_weights(w: &[f64]) -> Vec<f64> {
    let n = w.len();
    (0..n)
        .map(|k| {
            let prev = w[k.saturating_sub(1)];
            let next = w[(k + 1).min(n - 1)];
            0.5 * (prev.max(w[k]) + w[k].max(next))
        })
        .collect()
}

/// Normalized piecewise-linear CDF over `[t_1, t_{m+1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseCdf {
    knots: Vec<f64>,
    /// CDF values at the knots; `cum[0] = 0`, `cum[m] = 1`.
    cum: Vec<f64>,
}

impl PiecewiseCdf {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.cum
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], *self.knots.last().unwrap())
    }

    /// Evaluates F(t), clamped to [0, 1] outside the domain.
    pub fn eval(&self, t: f64) -> f64 {
        let (lo, hi) = self.domain();
        if t <= lo {
            return 0.0;
        }
        if t >= hi {
            return 1.0;
        }
        let k = self.knots.partition_point(|&x| x <= t) - 1;
        let frac = (t - self.knots[k]) / (self.knots[k + 1] - self.knots[k]);
        self.cum[k] + frac * (self.cum[k + 1] - self.cum[k])
    }

    /// Probability density (derivative of F) at `t`.
    pub fn density(&self, t: f64) -> f64 {
        let (lo, hi) = self.domain();
        if t < lo || t >= hi {
            return 0.0;
        }
        let k = self.knots.partition_point(|&x| x <= t) - 1;
        (self.cum[k + 1] - self.cum[k]) / (self.knots[k + 1] - self.knots[k])
    }

    /// Solves F(t) = u analytically on the segment holding `u`. Zero-mass
    /// segments are never selected.
    pub fn invert(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let m = self.knots.len() - 1;
        let mut k = self.cum[1..].partition_point(|&c| c <= u);
        if k >= m {
            // u == 1: last segment carrying mass.
            k = (0..m).rev().find(|&i| self.cum[i + 1] > self.cum[i]).unwrap_or(m - 1);
        }
        let mass = self.cum[k + 1] - self.cum[k];
        let (a, b) = (self.knots[k], self.knots[k + 1]);
        if mass <= 0.0 {
            return a;
        }
        let frac = ((u - self.cum[k]) / mass).clamp(0.0, 1.0);
        a + frac * (b - a)
    }
}

/// Builds the normalized CDF `F(t) = (t − t_1)ε + Σ_{i<k} w'_i + frac·w'_k`
/// over the partition.
pub fn build_cdf(partition: &DepthPartition, filtered: &[f64], epsilon: f64) -> Result<PiecewiseCdf> {
    let m = partition.intervals();
    if filtered.len() != m {
        return Err(Error::Shape {
            context: "build_cdf weights",
            expected: m,
            found: filtered.len(),
        });
    }
    if filtered.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("CDF weights must be finite and non-negative"));
    }
    let t = &partition.depths;
    let mut cum = Vec::with_capacity(m + 1);
    let mut acc = 0.0;
    cum.push(0.0);
    for k in 0..m {
        acc += filtered[k];
        cum.push((t[k + 1] - t[0]) * epsilon + acc);
    }
    let total = cum[m];
    if !(total > 0.0) {
        return Err(Error::Degenerate(
            "CDF has zero total mass (all weights zero and epsilon = 0)".into(),
        ));
    }
    for c in cum.iter_mut() {
        *c /= total;
    }
    cum[m] = 1.0;
    Ok(PiecewiseCdf {
        knots: t.clone(),
        cum,
    })
}

/// Inverse-transform depths from explicit uniforms: inverted, sorted, made
/// strictly increasing and preceded by [`T_ORIGIN`].
pub fn inverse_cdf_from_uniforms(cdf: &PiecewiseCdf, uniforms: &[f64]) -> DepthPartition {
    let mut samples: Vec<f64> = uniforms.iter().map(|&u| cdf.invert(u)).collect();
    samples.sort_by(|a, b| a.total_cmp(b));
    let mut depths = Vec::with_capacity(samples.len() + 1);
    depths.push(T_ORIGIN);
    for t in samples {
        push_increasing(&mut depths, t);
    }
    DepthPartition {
        depths,
        stage: Stage::Fine,
    }
}

pub fn inverse_cdf_sample<R: Rng + ?Sized>(cdf: &PiecewiseCdf, m: usize, rng: &mut R) -> DepthPartition {
    let u: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
    inverse_cdf_from_uniforms(cdf, &u)
}

/// Axial mean and variance plus per-axis radial variance of a conical
/// frustum `[t_lo, t_hi]` with aspect ratio `cone_ratio`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrustumMoments {
    pub mu_t: f64,
    pub sigma_t: f64,
    pub sigma_r: f64,
}

/// Closed-form frustum moments under the volume measure `π ṙ² t² dt`.
///
/// Expressed through the interval midpoint `c` and half-width `h`, which is
/// algebraically identical to the power-difference ratios but has no
/// cancellation when `h ≪ c`.
pub fn frustum_moments(t_lo: f64, t_hi: f64, cone_ratio: f64) -> Result<FrustumMoments> {
    if !(t_lo > 0.0) {
        return Err(Error::invalid(format!("frustum t_lo must be > 0, got {t_lo}")));
    }
    if !(t_hi > t_lo) {
        return Err(Error::invalid(format!(
            "frustum bounds must satisfy t_lo < t_hi, got [{t_lo}, {t_hi}]"
        )));
    }
    Ok(frustum_moments_unchecked(t_lo, t_hi, cone_ratio))
}

#[inline]
pub(crate) fn frustum_moments_unchecked(t_lo: f64, t_hi: f64, cone_ratio: f64) -> FrustumMoments {
    let c = 0.5 * (t_lo + t_hi);
    let h = 0.5 * (t_hi - t_lo);
    let c2 = c * c;
    let h2 = h * h;
    let h4 = h2 * h2;
    let denom = 3.0 * c2 + h2;
    let mu_t = c + 2.0 * c * h2 / denom;
    let sigma_t = h2 / 3.0 - (4.0 / 15.0) * h4 * (12.0 * c2 - h2) / (denom * denom);
    let sigma_r =
        cone_ratio * cone_ratio * (c2 / 4.0 + (5.0 / 12.0) * h2 - (4.0 / 15.0) * h4 / denom);
    FrustumMoments {
        mu_t,
        sigma_t: sigma_t.max(0.0),
        sigma_r: sigma_r.max(0.0),
    }
}

/// Moment-matched Gaussian of one frustum in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrustumGaussian {
    pub mu: Vec3,
    pub sigma_t: f64,
    pub sigma_r: f64,
    pub mu_t: f64,
    /// Diagonal of `Σ_t d̂d̂ᵀ + Σ_r (I − d̂d̂ᵀ)`.
    pub diag_world: Vec3,
}

pub fn frustum_gaussian(ray: &Ray, t_lo: f64, t_hi: f64) -> Result<FrustumGaussian> {
    let m = frustum_moments(t_lo, t_hi, ray.cone_ratio)?;
    Ok(gaussian_from_moments(ray, m))
}

#[inline]
pub(crate) fn gaussian_from_moments(ray: &Ray, m: FrustumMoments) -> FrustumGaussian {
    let d = ray.direction;
    let diag = |i: usize| m.sigma_t * d[i] * d[i] + m.sigma_r * (1.0 - d[i] * d[i]);
    FrustumGaussian {
        mu: ray.at(m.mu_t),
        sigma_t: m.sigma_t,
        sigma_r: m.sigma_r,
        mu_t: m.mu_t,
        diag_world: [diag(0), diag(1), diag(2)],
    }
}

/// Gaussians for every interval of a partition.
pub fn partition_gaussians(ray: &Ray, partition: &DepthPartition) -> Vec<FrustumGaussian> {
    partition
        .depths
        .windows(2)
        .map(|w| gaussian_from_moments(ray, frustum_moments_unchecked(w[0], w[1], ray.cone_ratio)))
        .collect()
}
