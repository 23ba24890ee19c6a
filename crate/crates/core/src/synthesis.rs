//! Volumetric channel synthesis and the NMSE loss.
//!
//! Gradients with respect to complex quantities follow one convention
//! throughout: for a real loss `L(z)` the gradient is `∂L/∂Re z + j·∂L/∂Im z`,
//! so that `dL = Re(conj(g)·dz)`.

use num_complex::Complex64;

use crate::physics::{fspl_amplitude, path_phasor};
use crate::sampling::DepthPartition;
use crate::{Error, Result};

/// Floor applied when NMSE is expressed in decibels.
pub const DB_FLOOR: f64 = -100.0;

pub const DEFAULT_COARSE_WEIGHT: f64 = 0.1;
pub const DEFAULT_FINE_WEIGHT: f64 = 0.9;

/// Network output along one ray together with the geometry needed to
/// synthesize its channel contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct RayPrediction {
    pub depths: DepthPartition,
    pub sigma: Vec<f64>,
    pub x: Vec<Complex64>,
    pub mu_t: Vec<f64>,
    /// Interaction attenuation shared by every interval of the ray.
    pub zeta: f64,
}

impl RayPrediction {
    fn check(&self) -> Result<()> {
        let m = self.depths.intervals();
        for (ctx, n) in [
            ("ray sigma", self.sigma.len()),
            ("ray x", self.x.len()),
            ("ray mu_t", self.mu_t.len()),
        ] {
            if n != m {
                return Err(Error::Shape {
                    context: ctx,
                    expected: m,
                    found: n,
                });
            }
        }
        if let Some(&bad) = self.mu_t.iter().find(|&&t| !(t > 0.0)) {
            return Err(Error::invalid(format!("expected distances must be > 0, got {bad}")));
        }
        Ok(())
    }
}

/// Interval widths of a partition.
pub fn interval_widths(depths: &DepthPartition) -> Vec<f64> {
    depths.depths.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Emission weights `ν_k = (1 − e^{−σ_k Δ_k}) ∏_{l<k} e^{−σ_l Δ_l}`.
pub fn emission_weights(sigma: &[f64], depths: &DepthPartition) -> Result<Vec<f64>> {
    if sigma.len() != depths.intervals() {
        return Err(Error::Shape {
            context: "emission sigma",
            expected: depths.intervals(),
            found: sigma.len(),
        });
    }
    if sigma.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::invalid("densities must be non-negative"));
    }
    Ok(weights_and_transmittance(sigma, &interval_widths(depths)).0)
}

/// Returns `(ν, T)` where `T_k = exp(−Σ_{l<k} σ_l Δ_l)`.
pub(crate) fn weights_and_transmittance(sigma: &[f64], widths: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut nu = Vec::with_capacity(sigma.len());
    let mut trans = Vec::with_capacity(sigma.len());
    let mut optical = 0.0f64;
    for (&s, &d) in sigma.iter().zip(widths) {
        let t = (-optical).exp();
        let tau = s * d;
        nu.push(-(-tau).exp_m1() * t);
        trans.push(t);
        optical += tau;
    }
    (nu, trans)
}

/// Per-interval complex propagation factor `FSPL(μ_t)·e^{−j2πμ_t f/c}·ζ`.
fn propagation(mu_t: &[f64], zeta: f64, fc: f64) -> impl Iterator<Item = Complex64> + '_ {
    mu_t.iter().map(move |&t| path_phasor(t, fc) * (fspl_amplitude(t, fc) * zeta))
}

/// Channel contribution of one ray.
pub fn synthesize_ray(pred: &RayPrediction, fc: f64) -> Result<Complex64> {
    pred.check()?;
    if pred.sigma.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::invalid("densities must be non-negative"));
    }
    let (nu, _) = weights_and_transmittance(&pred.sigma, &interval_widths(&pred.depths));
    Ok(synthesize_with_weights(pred, &nu, fc))
}

fn synthesize_with_weights(pred: &RayPrediction, nu: &[f64], fc: f64) -> Complex64 {
    propagation(&pred.mu_t, pred.zeta, fc)
        .zip(nu)
        .zip(&pred.x)
        .fold(Complex64::new(0.0, 0.0), |acc, ((a, &n), &x)| acc + a * n * x)
}

/// Gradients of a loss with respect to one ray's network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RayGradient {
    pub d_sigma: Vec<f64>,
    pub d_x: Vec<Complex64>,
}

/// Forward plus reverse pass for one ray given the upstream gradient `g` of
/// the loss with respect to the ray's CFR.
pub fn synthesize_ray_backward(pred: &RayPrediction, fc: f64, g: Complex64) -> Result<(Complex64, RayGradient)> {
    pred.check()?;
    let widths = interval_widths(&pred.depths);
    let (nu, trans) = weights_and_transmittance(&pred.sigma, &widths);
    let a: Vec<Complex64> = propagation(&pred.mu_t, pred.zeta, fc).collect();
    let m = nu.len();
    let mut h = Complex64::new(0.0, 0.0);
    let mut d_x = Vec::with_capacity(m);
    let mut d_nu = Vec::with_capacity(m);
    for k in 0..m {
        let c = a[k] * nu[k];
        h += c * pred.x[k];
        d_x.push(g * c.conj());
        d_nu.push((g.conj() * a[k] * pred.x[k]).re);
    }
    // ∂ν_k/∂σ_k = Δ_k e^{−σ_kΔ_k} T_k and ∂ν_j/∂σ_k = −Δ_k ν_j for j > k.
    let mut d_sigma = vec![0.0; m];
    let mut tail = 0.0;
    for k in (0..m).rev() {
        let own = d_nu[k] * widths[k] * (-pred.sigma[k] * widths[k]).exp() * trans[k];
        d_sigma[k] = own - widths[k] * tail;
        tail += d_nu[k] * nu[k];
    }
    Ok((h, RayGradient { d_sigma, d_x }))
}

/// Receiver CFR as the ordered sum of ray contributions.
pub fn synthesize_receiver(rays: &[Complex64]) -> Complex64 {
    rays.iter().fold(Complex64::new(0.0, 0.0), |acc, &h| acc + h)
}

fn check_pair(pred: &[Complex64], truth: &[Complex64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            context: "nmse batch",
            expected: truth.len(),
            found: pred.len(),
        });
    }
    let denom: f64 = truth.iter().map(|h| h.norm_sqr()).sum();
    if !(denom > 0.0) {
        return Err(Error::Degenerate("NMSE undefined for an all-zero truth batch".into()));
    }
    Ok(denom)
}

/// Batch NMSE `Σ|Ĥ − H|² / Σ|H|²` (linear scale).
pub fn nmse(pred: &[Complex64], truth: &[Complex64]) -> Result<f64> {
    let denom = check_pair(pred, truth)?;
    let num: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).norm_sqr()).sum();
    Ok(num / denom)
}

/// NMSE and its gradient with respect to each prediction.
pub fn nmse_with_grad(pred: &[Complex64], truth: &[Complex64]) -> Result<(f64, Vec<Complex64>)> {
    let denom = check_pair(pred, truth)?;
    let mut num = 0.0;
    let grad = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let e = p - t;
            num += e.norm_sqr();
            e * (2.0 / denom)
        })
        .collect();
    Ok((num / denom, grad))
}

/// `10·log10(x)` clamped below at [`DB_FLOOR`].
pub fn to_db(x: f64) -> f64 {
    if x > 0.0 {
        (10.0 * x.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

pub fn nmse_db(pred: &[Complex64], truth: &[Complex64]) -> Result<f64> {
    nmse(pred, truth).map(to_db)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub coarse: f64,
    pub fine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            coarse: DEFAULT_COARSE_WEIGHT,
            fine: DEFAULT_FINE_WEIGHT,
        }
    }
}

impl LossWeights {
    pub fn new(coarse: f64, fine: f64) -> Result<Self> {
        if !(coarse >= 0.0 && fine >= 0.0) || (coarse + fine - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative and sum to 1, got ({coarse}, {fine})"
            )));
        }
        Ok(LossWeights { coarse, fine })
    }
}

/// Two-stage loss `w_c·NMSE(H_c) + w_f·NMSE(H_f)`.
pub fn training_loss(coarse: &[Complex64], fine: &[Complex64], truth: &[Complex64], w: LossWeights) -> Result<f64> {
    Ok(w.coarse * nmse(coarse, truth)? + w.fine * nmse(fine, truth)?)
}

/// Loss value plus gradients with respect to the coarse and fine batches.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub coarse_nmse: f64,
    pub fine_nmse: f64,
    pub d_coarse: Vec<Complex64>,
    pub d_fine: Vec<Complex64>,
}

pub fn training_loss_with_grad(
    coarse: &[Complex64],
    fine: &[Complex64],
    truth: &[Complex64],
    w: LossWeights,
) -> Result<LossGradient> {
    let (nc, mut dc) = nmse_with_grad(coarse, truth)?;
    let (nf, mut df) = nmse_with_grad(fine, truth)?;
    dc.iter_mut().for_each(|g| *g *= w.coarse);
    df.iter_mut().for_each(|g| *g *= w.fine);
    Ok(LossGradient {
        loss: w.coarse * nc + w.fine * nf,
        coarse_nmse: nc,
        fine_nmse: nf,
        d_coarse: dc,
        d_fine: df,
    })
}
