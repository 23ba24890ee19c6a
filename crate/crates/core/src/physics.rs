//! Electromagnetic primitives: intrinsic impedance, complex Snell refraction,
//! Fresnel TE/TM reflection coefficients, the polarization-averaged
//! reflection amplitude, per-path interaction attenuation ζ, and free-space
//! loss/phase.
//!
//! Time convention is `e^{+jωt}`: lossy media have refractive indices with a
//! non-positive imaginary part and fields decay as `e^{-jk n z}`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Vacuum permeability, CODATA 2018 (H/m).
pub const MU_0: f64 = 1.256_637_062_12e-6;
/// Vacuum permittivity, CODATA 2018 (F/m).
pub const EPSILON_0: f64 = 8.854_187_812_8e-12;

/// Homogeneous, isotropic, non-magnetic medium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: String,
    /// Relative permittivity.
    pub eps_r: f64,
    /// Conductivity (S/m).
    pub sigma: f64,
    /// Relative permeability. Always 1.
    #[serde(default = "unit_mu")]
    pub mu_r: f64,
}

fn unit_mu() -> f64 {
    1.0
}

impl Material {
    pub fn new(name: impl Into<String>, eps_r: f64, sigma: f64) -> Result<Self> {
        let m = Material {
            name: name.into(),
            eps_r,
            sigma,
            mu_r: 1.0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn vacuum() -> Self {
        Material {
            name: "air".into(),
            eps_r: 1.0,
            sigma: 0.0,
            mu_r: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_r.is_finite() && self.eps_r >= 1.0) {
            return Err(Error::invalid(format!(
                "material {}: eps_r must be >= 1, got {}",
                self.name, self.eps_r
            )));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::invalid(format!(
                "material {}: sigma must be >= 0, got {}",
                self.name, self.sigma
            )));
        }
        if self.mu_r != 1.0 {
            return Err(Error::invalid(format!(
                "material {}: only non-magnetic media (mu_r = 1) are supported, got {}",
                self.name, self.mu_r
            )));
        }
        Ok(())
    }

    /// Complex relative permittivity `eps_r − j·sigma/(ω·ε0)`.
    pub fn complex_permittivity(&self, f: f64) -> Complex64 {
        let omega = 2.0 * PI * f;
        Complex64::new(self.eps_r, -self.sigma / (omega * EPSILON_0))
    }

    /// Complex refractive index (principal root, non-positive imaginary part).
    pub fn refractive_index(&self, f: f64) -> Complex64 {
        (self.complex_permittivity(f) * self.mu_r).sqrt()
    }
}

/// Frequency-dependent material model `eps_r = a·f^b`, `sigma = c·f^d` with
/// `f` in GHz, as tabulated in ITU-R P.2040.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItuMaterialModel {
    pub name: &'static str,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl ItuMaterialModel {
    pub fn at(&self, f_hz: f64) -> Material {
        let f_ghz = f_hz / 1e9;
        Material {
            name: self.name.to_string(),
            eps_r: self.a * f_ghz.powf(self.b),
            sigma: self.c * f_ghz.powf(self.d),
            mu_r: 1.0,
        }
    }
}

/// Default building materials. These are configuration, not ground truth.
pub const ITU_MATERIALS: [ItuMaterialModel; 5] = [
    ItuMaterialModel { name: "concrete", a: 5.24, b: 0.0, c: 0.0462, d: 0.7822 },
    ItuMaterialModel { name: "brick", a: 3.91, b: 0.0, c: 0.0238, d: 0.16 },
    ItuMaterialModel { name: "gypsum", a: 2.73, b: 0.0, c: 0.0085, d: 0.9395 },
    ItuMaterialModel { name: "wood", a: 1.99, b: 0.0, c: 0.0047, d: 1.0718 },
    ItuMaterialModel { name: "glass", a: 6.31, b: 0.0, c: 0.0036, d: 1.3394 },
];

/// Looks up a built-in material (or `air`) evaluated at `f` Hz.
pub fn builtin_material(name: &str, f: f64) -> Option<Material> {
    if name.eq_ignore_ascii_case("air") || name.eq_ignore_ascii_case("vacuum") {
        return Some(Material::vacuum());
    }
    ITU_MATERIALS
        .iter()
        .find(|m| m.name.eq_ignore_ascii_case(name))
        .map(|m| m.at(f))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaterialFile {
    material: Vec<MaterialEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaterialEntry {
    name: String,
    eps_r: f64,
    sigma: f64,
    mu_r: f64,
}

/// Parses a material table:
///
/// ```toml
/// [[material]]
/// name = "gypsum"
/// eps_r = 2.73
/// sigma = 0.019
/// mu_r = 1.0
/// ```
pub fn parse_material_table(text: &str) -> Result<Vec<Material>> {
    let file: MaterialFile =
        toml::from_str(text).map_err(|e| Error::Config(format!("material table: {e}")))?;
    file.material
        .into_iter()
        .map(|e| {
            let m = Material {
                name: e.name,
                eps_r: e.eps_r,
                sigma: e.sigma,
                mu_r: e.mu_r,
            };
            m.validate().map(|_| m)
        })
        .collect()
}

pub fn load_material_table(path: &Path) -> Result<Vec<Material>> {
    parse_material_table(&std::fs::read_to_string(path)?)
}

/// One specular reflection at a planar interface.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionEvent {
    /// Incidence angle from the surface normal, in [0, π/2).
    pub theta_i: f64,
    /// Medium the wave arrives from.
    pub material_in: Material,
    /// Medium on the far side of the interface.
    pub material_out: Material,
    pub frequency: f64,
}

impl ReflectionEvent {
    pub fn new(theta_i: f64, material_in: Material, material_out: Material, frequency: f64) -> Result<Self> {
        if !(0.0..PI / 2.0).contains(&theta_i) {
            return Err(Error::invalid(format!(
                "incidence angle must lie in [0, pi/2), got {theta_i}"
            )));
        }
        if !(frequency > 0.0) {
            return Err(Error::invalid(format!("frequency must be > 0, got {frequency}")));
        }
        Ok(ReflectionEvent {
            theta_i,
            material_in,
            material_out,
            frequency,
        })
    }
}

/// Power weights of the TE and TM components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarizationWeights {
    pub w_perp: f64,
    pub w_par: f64,
}

impl Default for PolarizationWeights {
    fn default() -> Self {
        PolarizationWeights {
            w_perp: 0.5,
            w_par: 0.5,
        }
    }
}

impl PolarizationWeights {
    pub fn new(w_perp: f64, w_par: f64) -> Result<Self> {
        if w_perp < 0.0 || w_par < 0.0 || ((w_perp + w_par) - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "polarization weights must be non-negative and sum to 1, got ({w_perp}, {w_par})"
            )));
        }
        Ok(PolarizationWeights { w_perp, w_par })
    }
}

/// Intrinsic impedance `sqrt(jωμ / (σ + jωε))`, principal root.
pub fn intrinsic_impedance(material: &Material, f: f64) -> Result<Complex64> {
    if !(f > 0.0) {
        return Err(Error::invalid(format!("frequency must be > 0, got {f}")));
    }
    let omega = 2.0 * PI * f;
    let mu = MU_0 * material.mu_r;
    let eps = EPSILON_0 * material.eps_r;
    let num = Complex64::new(0.0, omega * mu);
    let den = Complex64::new(material.sigma, omega * eps);
    Ok((num / den).sqrt())
}

/// Cosine of the transmission angle, on the branch whose transmitted wave
/// decays (or is purely propagating) into the far medium.
fn transmission_cosine(theta_i: f64, n_in: Complex64, n_out: Complex64) -> Complex64 {
    let sin_t = n_in * theta_i.sin() / n_out;
    let mut cos_t = (Complex64::new(1.0, 0.0) - sin_t * sin_t).sqrt();
    // e^{-jk n cosθt z} must not grow with z.
    if (n_out * cos_t).im > 0.0 {
        cos_t = -cos_t;
    }
    cos_t
}

/// Complex transmission angle from Snell's law `n_i sinθ_i = n_t sinθ_t`.
pub fn transmission_angle(theta_i: f64, mat_incident: &Material, mat_other: &Material, f: f64) -> Result<Complex64> {
    if !(0.0..PI / 2.0).contains(&theta_i) {
        return Err(Error::invalid(format!(
            "incidence angle must lie in [0, pi/2), got {theta_i}"
        )));
    }
    if !(f > 0.0) {
        return Err(Error::invalid(format!("frequency must be > 0, got {f}")));
    }
    if mat_incident == mat_other {
        return Ok(Complex64::new(theta_i, 0.0));
    }
    let n_in = mat_incident.refractive_index(f);
    let n_out = mat_other.refractive_index(f);
    let sin_t = n_in * theta_i.sin() / n_out;
    let cos_t = transmission_cosine(theta_i, n_in, n_out);
    // atan2 on complex arguments: θ = −j·ln(cosθ + j·sinθ).
    let i = Complex64::new(0.0, 1.0);
    Ok(-i * (cos_t + i * sin_t).ln())
}

/// Fresnel amplitude reflection coefficients `(r_perp, r_par)` for TE and TM
/// polarization.
///
/// Written in impedance form with `eta_1` the far medium and `eta_2` the
/// incidence medium:
/// `r_perp = (η1 cosθi − η2 cosθt)/(η1 cosθi + η2 cosθt)`,
/// `r_par  = (η2 cosθi − η1 cosθt)/(η2 cosθi + η1 cosθt)`.
/// With this assignment `r_par` carries the Brewster zero.
pub fn fresnel_coefficients(event: &ReflectionEvent) -> Result<(Complex64, Complex64)> {
    let f = event.frequency;
    let eta_in = intrinsic_impedance(&event.material_in, f)?;
    let eta_out = intrinsic_impedance(&event.material_out, f)?;
    if eta_in.norm() == 0.0 && eta_out.norm() == 0.0 {
        return Err(Error::Degenerate("both intrinsic impedances are zero".into()));
    }
    let cos_i = Complex64::new(event.theta_i.cos(), 0.0);
    let cos_t = if event.material_in == event.material_out {
        cos_i
    } else {
        transmission_cosine(
            event.theta_i,
            event.material_in.refractive_index(f),
            event.material_out.refractive_index(f),
        )
    };
    let (eta1, eta2) = (eta_out, eta_in);

    let den_perp = eta1 * cos_i + eta2 * cos_t;
    let den_par = eta2 * cos_i + eta1 * cos_t;
    if den_perp.norm() == 0.0 || den_par.norm() == 0.0 {
        return Err(Error::Degenerate("vanishing Fresnel denominator".into()));
    }
    let r_perp = (eta1 * cos_i - eta2 * cos_t) / den_perp;
    let r_par = (eta2 * cos_i - eta1 * cos_t) / den_par;
    Ok((r_perp, r_par))
}

/// Polarization-averaged reflection amplitude `sqrt(w⊥|r⊥|² + w∥|r∥|²)`.
pub fn reflection_amplitude(r_perp: Complex64, r_par: Complex64, w: PolarizationWeights) -> f64 {
    (w.w_perp * r_perp.norm_sqr() + w.w_par * r_par.norm_sqr()).sqrt()
}

/// A surface interaction along a propagation path.
#[derive(Debug, Clone, PartialEq)]
pub enum Interaction {
    Reflection(ReflectionEvent),
    Transmission,
    Scattering,
    Diffraction,
}

/// Interaction attenuation ζ of a path: zero as soon as any non-reflection
/// interaction is present, otherwise the product of reflection amplitudes.
pub fn path_zeta(events: &[Interaction], w: PolarizationWeights) -> Result<f64> {
    if events
        .iter()
        .any(|e| !matches!(e, Interaction::Reflection(_)))
    {
        return Ok(0.0);
    }
    let mut zeta = 1.0;
    for e in events {
        if let Interaction::Reflection(ev) = e {
            let (rp, rl) = fresnel_coefficients(ev)?;
            zeta *= reflection_amplitude(rp, rl, w);
        }
    }
    Ok(zeta)
}

/// Free-space amplitude factor `c / (4π d fc)`.
pub fn free_space_amplitude(d: f64, fc: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::invalid(format!("distance must be > 0, got {d}")));
    }
    if !(fc > 0.0) {
        return Err(Error::invalid(format!("carrier must be > 0, got {fc}")));
    }
    Ok(fspl_amplitude(d, fc))
}

#[inline]
pub(crate) fn fspl_amplitude(d: f64, fc: f64) -> f64 {
    SPEED_OF_LIGHT / (4.0 * PI * d * fc)
}

/// Propagation phasor `e^{−j2π fc d / c}`.
#[inline]
pub fn path_phasor(d: f64, fc: f64) -> Complex64 {
    let phase = -2.0 * PI * fc * d / SPEED_OF_LIGHT;
    Complex64::from_polar(1.0, phase)
}

/// Complex gain of a path with distance `d` and interaction attenuation `zeta`.
pub fn path_gain(d: f64, zeta: f64, fc: f64) -> Result<Complex64> {
    Ok(path_phasor(d, fc) * (zeta * free_space_amplitude(d, fc)?))
}

/// One row of a Fresnel sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FresnelRow {
    pub theta_deg: f64,
    pub r_perp: Complex64,
    pub r_par: Complex64,
}

impl FresnelRow {
    pub fn power_perp(&self) -> f64 {
        self.r_perp.norm_sqr()
    }
    pub fn power_par(&self) -> f64 {
        self.r_par.norm_sqr()
    }
}

/// Sweeps the incidence angle from 0° to `max_deg` (inclusive when hit
/// exactly) in `step_deg` increments.
pub fn fresnel_sweep(
    material_in: &Material,
    material_out: &Material,
    f: f64,
    step_deg: f64,
    max_deg: f64,
) -> Result<Vec<FresnelRow>> {
    if !(step_deg > 0.0) || !(max_deg < 90.0) {
        return Err(Error::invalid(
            "sweep step must be > 0 and the final angle below 90 degrees",
        ));
    }
    let n = (max_deg / step_deg + 1e-9).floor() as usize;
    (0..=n)
        .map(|i| {
            let theta_deg = i as f64 * step_deg;
            let ev = ReflectionEvent::new(
                theta_deg.to_radians(),
                material_in.clone(),
                material_out.clone(),
                f,
            )?;
            let (r_perp, r_par) = fresnel_coefficients(&ev)?;
            Ok(FresnelRow {
                theta_deg,
                r_perp,
                r_par,
            })
        })
        .collect()
}

pub const FRESNEL_CSV_HEADER: &str = "theta_deg,re_r_perp,im_r_perp,re_r_par,im_r_par,R_perp,R_par";

pub fn fresnel_csv(rows: &[FresnelRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(FRESNEL_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{:.4},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            r.theta_deg,
            r.r_perp.re,
            r.r_perp.im,
            r.r_par.re,
            r.r_par.im,
            r.power_perp(),
            r.power_par()
        );
    }
    out
}
