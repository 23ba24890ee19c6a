//! Scale-consistent positional encoding (PE), integrated positional encoding
//! (IPE), directional encoding and their hybrid concatenation.
//!
//! Coordinates are normalized per axis as `x' = (x − x_min)·q` with
//! `q = 2^{−⌊log2 range⌋}`; the level count per axis is
//! `L = 1 + ⌈log2(range / d_min)⌉`. Both exponents are computed from the
//! binary representation, so scaling a scene by a power of two changes `q`
//! and `L` exactly and leaves `x'` bit-identical.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::sampling::FrustumGaussian;
use crate::vec3::Vec3;
use crate::{Error, Result};

pub const DEFAULT_D_MIN: f64 = 0.02;
pub const DEFAULT_DIR_LEVELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl SceneBounds {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|a| !(max[a] > min[a]) || !min[a].is_finite() || !max[a].is_finite()) {
            return Err(Error::invalid(format!(
                "scene bounds must satisfy max > min on every axis, got {min:?}..{max:?}"
            )));
        }
        Ok(SceneBounds { min, max })
    }

    pub fn range(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn scaled(&self, s: f64) -> SceneBounds {
        SceneBounds {
            min: self.min.map(|v| v * s),
            max: self.max.map(|v| v * s),
        }
    }
}

/// Which encoding blocks feed the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncodingMode {
    Hybrid,
    PeOnly,
    IpeOnly,
}

impl EncodingMode {
    pub fn from_flags(use_pe: bool, use_ipe: bool) -> Result<Self> {
        match (use_pe, use_ipe) {
            (true, true) => Ok(EncodingMode::Hybrid),
            (true, false) => Ok(EncodingMode::PeOnly),
            (false, true) => Ok(EncodingMode::IpeOnly),
            (false, false) => Err(Error::Config(
                "at least one of PE and IPE must be enabled".into(),
            )),
        }
    }

    fn pe(self) -> bool {
        matches!(self, EncodingMode::Hybrid | EncodingMode::PeOnly)
    }

    fn ipe(self) -> bool {
        matches!(self, EncodingMode::Hybrid | EncodingMode::IpeOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub d_min: f64,
    pub levels: [usize; 3],
    pub q: [f64; 3],
    /// Per-axis offset subtracted before scaling (`x_min`, or 0 when scale
    /// consistency is disabled).
    pub offset: [f64; 3],
    pub dir_levels: usize,
    pub mode: EncodingMode,
    pub scale_consistent: bool,
}

/// ⌊log2 x⌋ for positive finite normal `x`, read from the exponent bits.
pub fn floor_log2(x: f64) -> i32 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    if exp == 0 {
        // Subnormal; not expected for physical ranges.
        return x.log2().floor() as i32;
    }
    exp - 1023
}

/// ⌈log2 x⌉, exact for powers of two.
pub fn ceil_log2(x: f64) -> i32 {
    let f = floor_log2(x);
    if x == 2f64.powi(f) {
        f
    } else {
        f + 1
    }
}

/// Builds the scale-consistent configuration from the scene extent.
pub fn make_encoding_config(bounds: &SceneBounds, d_min: f64) -> Result<EncodingConfig> {
    if !(d_min > 0.0) {
        return Err(Error::invalid(format!("d_min must be > 0, got {d_min}")));
    }
    let min_range = (0..3).map(|a| bounds.range(a)).fold(f64::INFINITY, f64::min);
    if d_min >= min_range {
        return Err(Error::invalid(format!(
            "d_min ({d_min}) must be smaller than the smallest scene range ({min_range})"
        )));
    }
    let mut levels = [0usize; 3];
    let mut q = [0.0; 3];
    for a in 0..3 {
        let r = bounds.range(a);
        levels[a] = (1 + ceil_log2(r / d_min)) as usize;
        q[a] = 2f64.powi(-floor_log2(r));
    }
    Ok(EncodingConfig {
        d_min,
        levels,
        q,
        offset: bounds.min,
        dir_levels: DEFAULT_DIR_LEVELS,
        mode: EncodingMode::Hybrid,
        scale_consistent: true,
    })
}

impl EncodingConfig {
    /// Replaces the per-axis level counts (e.g. to mirror a published table).
    pub fn with_levels(mut self, levels: [usize; 3]) -> Result<Self> {
        if levels.contains(&0) {
            return Err(Error::invalid("encoding levels must be >= 1"));
        }
        self.levels = levels;
        Ok(self)
    }

    pub fn with_mode(mut self, mode: EncodingMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_dir_levels(mut self, dir_levels: usize) -> Self {
        self.dir_levels = dir_levels;
        self
    }

    /// Disables scale-consistent normalization: coordinates enter the
    /// sinusoids as raw world values (`q = 1`, no offset).
    pub fn without_scale_consistency(mut self) -> Self {
        self.q = [1.0; 3];
        self.offset = [0.0; 3];
        self.scale_consistent = false;
        self
    }

    pub fn total_levels(&self) -> usize {
        self.levels.iter().sum()
    }

    pub fn spatial_len(&self) -> usize {
        let blocks = usize::from(self.mode.pe()) + usize::from(self.mode.ipe());
        2 * blocks * self.total_levels() + 3
    }

    pub fn directional_len(&self) -> usize {
        4 * self.dir_levels
    }

    #[inline]
    pub fn normalize(&self, x: f64, axis: usize) -> f64 {
        (x - self.offset[axis]) * self.q[axis]
    }

    /// Writes the spatial encoding `PE(μ') ‖ IPE(μ', Σ') ‖ μ'` of one frustum.
    pub fn encode_spatial_into(&self, g: &FrustumGaussian, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.spatial_len());
        let mut mu_n = [0.0; 3];
        let mut var_n = [0.0; 3];
        for a in 0..3 {
            mu_n[a] = self.normalize(g.mu[a], a);
            var_n[a] = self.q[a] * self.q[a] * g.diag_world[a];
        }
        let mut pos = 0;
        if self.mode.pe() {
            for a in 0..3 {
                let n = 2 * self.levels[a];
                pe_into(mu_n[a], self.levels[a], &mut out[pos..pos + n]);
                pos += n;
            }
        }
        if self.mode.ipe() {
            for a in 0..3 {
                let n = 2 * self.levels[a];
                ipe_axis_into(mu_n[a], var_n[a], self.levels[a], &mut out[pos..pos + n]);
                pos += n;
            }
        }
        out[pos..pos + 3].copy_from_slice(&mu_n);
    }

    pub fn encode_directional_into(&self, theta: f64, phi: f64, out: &mut [f64]) {
        let l = self.dir_levels;
        pe_into(theta, l, &mut out[..2 * l]);
        pe_into(phi, l, &mut out[2 * l..4 * l]);
    }
}

/// Normalized coordinate along one axis.
pub fn normalize_coord(x: f64, axis: usize, cfg: &EncodingConfig) -> f64 {
    cfg.normalize(x, axis)
}

/// `[sin(2^l π x), cos(2^l π x)]` for `l = 0..levels`.
pub fn pe_scale_consistent(x_norm: f64, levels: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * levels];
    pe_into(x_norm, levels, &mut out);
    out
}

#[inline]
fn pe_into(x: f64, levels: usize, out: &mut [f64]) {
    let mut freq = PI;
    for l in 0..levels {
        let (s, c) = (freq * x).sin_cos();
        out[2 * l] = s;
        out[2 * l + 1] = c;
        freq *= 2.0;
    }
}

#[inline]
fn ipe_axis_into(mu: f64, var: f64, levels: usize, out: &mut [f64]) {
    let mut freq = PI;
    for l in 0..levels {
        let damp = (-0.5 * freq * freq * var).exp();
        let (s, c) = (freq * mu).sin_cos();
        out[2 * l] = s * damp;
        out[2 * l + 1] = c * damp;
        freq *= 2.0;
    }
}

/// Expected PE under the frustum Gaussian, per axis x ‖ y ‖ z.
pub fn ipe_scale_consistent(g: &FrustumGaussian, cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = vec![0.0; 2 * cfg.total_levels()];
    let mut pos = 0;
    for a in 0..3 {
        let n = 2 * cfg.levels[a];
        let mu = cfg.normalize(g.mu[a], a);
        let var = cfg.q[a] * cfg.q[a] * g.diag_world[a];
        ipe_axis_into(mu, var, cfg.levels[a], &mut out[pos..pos + n]);
        pos += n;
    }
    out
}

/// Classic PE of the elevation and azimuth angles (radians), θ ‖ φ.
pub fn directional_encoding(theta: f64, phi: f64, dir_levels: usize) -> Vec<f64> {
    let mut out = vec![0.0; 4 * dir_levels];
    pe_into(theta, dir_levels, &mut out[..2 * dir_levels]);
    pe_into(phi, dir_levels, &mut out[2 * dir_levels..]);
    out
}

/// Network input for one frustum.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub spatial: Vec<f64>,
    pub directional: Vec<f64>,
}

impl EncodedSample {
    pub fn dims(&self) -> (usize, usize) {
        (self.spatial.len(), self.directional.len())
    }
}

pub fn hybrid_encode(g: &FrustumGaussian, theta: f64, phi: f64, cfg: &EncodingConfig) -> EncodedSample {
    let mut spatial = vec![0.0; cfg.spatial_len()];
    cfg.encode_spatial_into(g, &mut spatial);
    let mut directional = vec![0.0; cfg.directional_len()];
    cfg.encode_directional_into(theta, phi, &mut directional);
    EncodedSample {
        spatial,
        directional,
    }
}
