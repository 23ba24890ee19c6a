//! Two-stage (coarse → fine) ray rendering through the shared network, used
//! identically by training, evaluation and prediction.
//!
//! Rays are processed in fixed-size micro-batches. For training, a first
//! pass renders every ray and accumulates per-target channels; the loss
//! gradient with respect to each target is then pushed back through the
//! synthesis and the network micro-batch by micro-batch. Activations are
//! kept between the passes when they fit in [`CACHE_ROW_BUDGET`] rows and
//! recomputed otherwise; both routes give bit-identical gradients.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::encoding::EncodingConfig;
use crate::network::{Batch, ForwardCache, Mlp, NetworkOutput, OutputGrad};
use crate::par::{self, Execution};
use crate::sampling::{self, DepthPartition, Ray, SamplerConfig};
use crate::seed;
use crate::synthesis::{self, LossWeights, RayPrediction};
use crate::vec3::Vec3;
use crate::{Error, Result};

/// Target number of network rows per micro-batch.
pub const MICRO_BATCH_ROWS: usize = 4096;

/// Above this many rows per stage, activations are recomputed in the
/// backward pass instead of being held.
pub const CACHE_ROW_BUDGET: usize = 65_536;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub sampler: SamplerConfig,
    /// Fine-stage sample count (defaults to the coarse count).
    pub fine_m: usize,
    pub cone_ratio: f64,
    pub carrier: f64,
    pub encoding: EncodingConfig,
    /// When false every ray uses ζ = 1.
    pub use_zeta: bool,
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if self.fine_m < 2 {
            return Err(Error::Config(format!("fine sample count must be >= 2, got {}", self.fine_m)));
        }
        if !(self.cone_ratio > 0.0) {
            return Err(Error::Config("cone ratio must be > 0".into()));
        }
        if !(self.carrier > 0.0) {
            return Err(Error::Config("carrier must be > 0".into()));
        }
        Ok(())
    }
}

/// One ray to render: cast from `origin` along `(theta, phi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayQuery {
    pub origin: Vec3,
    pub theta: f64,
    pub phi: f64,
    pub zeta: f64,
    /// Key for the ray's coarse and fine sampling streams.
    pub seed: u64,
}

/// Both stages of one rendered ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayRender {
    pub coarse: RayPrediction,
    pub fine: RayPrediction,
    pub h_coarse: Complex64,
    pub h_fine: Complex64,
}

impl RayRender {
    /// Fine-stage expected depth with the largest emission weight.
    pub fn peak_depth(&self) -> Option<f64> {
        let nu = synthesis::emission_weights(&self.fine.sigma, &self.fine.depths).ok()?;
        nu.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| self.fine.mu_t[k])
    }
}

struct Encoded {
    batch: Batch,
    partitions: Vec<DepthPartition>,
    mu_t: Vec<Vec<f64>>,
}

fn build_ray(settings: &RenderSettings, q: &RayQuery) -> Result<Ray> {
    Ray::from_angles(q.origin, q.theta, q.phi, settings.cone_ratio)
}

/// Encodes every frustum of every ray into one row-major batch.
fn encode(
    settings: &RenderSettings,
    rays: &[RayQuery],
    partitions: Vec<DepthPartition>,
    exec: Execution,
) -> Result<Encoded> {
    let enc: &EncodingConfig = &settings.encoding;
    let s_len = enc.spatial_len();
    let d_len = enc.directional_len();
    let per_ray = par::map(exec, rays, |i, q| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let ray = build_ray(settings, q)?;
        let gs = sampling::partition_gaussians(&ray, &partitions[i]);
        let mut spatial = vec![0.0; gs.len() * s_len];
        let mut dir = vec![0.0; gs.len() * d_len];
        let mut mu_t = Vec::with_capacity(gs.len());
        for (k, g) in gs.iter().enumerate() {
            enc.encode_spatial_into(g, &mut spatial[k * s_len..(k + 1) * s_len]);
            mu_t.push(g.mu_t);
        }
        enc.encode_directional_into(q.theta, q.phi, &mut dir[..d_len]);
        for k in 1..gs.len() {
            dir.copy_within(0..d_len, k * d_len);
        }
        Ok((spatial, dir, mu_t))
    });
    let rows: usize = partitions.iter().map(|p| p.intervals()).sum();
    let mut batch = Batch {
        spatial: Vec::with_capacity(rows * s_len),
        directional: Vec::with_capacity(rows * d_len),
        rows,
    };
    let mut mu_ts = Vec::with_capacity(rays.len());
    for r in per_ray {
        let (s, d, m) = r?;
        batch.spatial.extend_from_slice(&s);
        batch.directional.extend_from_slice(&d);
        mu_ts.push(m);
    }
    Ok(Encoded {
        batch,
        partitions,
        mu_t: mu_ts,
    })
}

fn coarse_partitions(settings: &RenderSettings, rays: &[RayQuery]) -> Vec<DepthPartition> {
    rays.iter()
        .map(|q| {
            let mut rng = seed::rng_from(&[q.seed, seed::stream::COARSE]);
            sampling::stratified_coarse(&settings.sampler, &mut rng)
        })
        .collect()
}

/// Splits the flat network output back into per-ray predictions.
fn predictions(settings: &RenderSettings, rays: &[RayQuery], enc: &Encoded, out: &NetworkOutput) -> Vec<RayPrediction> {
    let mut offset = 0;
    rays.iter()
        .zip(&enc.partitions)
        .zip(&enc.mu_t)
        .map(|((q, part), mu_t)| {
            let m = part.intervals();
            let r = offset..offset + m;
            offset += m;
            RayPrediction {
                depths: part.clone(),
                sigma: out.sigma[r.clone()].to_vec(),
                x: out.x_re[r.clone()]
                    .iter()
                    .zip(&out.x_im[r])
                    .map(|(&re, &im)| Complex64::new(re, im))
                    .collect(),
                mu_t: mu_t.clone(),
                zeta: if settings.use_zeta { q.zeta } else { 1.0 },
            }
        })
        .collect()
}

fn fine_partitions(settings: &RenderSettings, rays: &[RayQuery], coarse: &[RayPrediction]) -> Result<Vec<DepthPartition>> {
    rays.iter()
        .zip(coarse)
        .map(|(q, c)| {
            let nu = synthesis::emission_weights(&c.sigma, &c.depths)?;
            let cdf = sampling::build_cdf(&c.depths, &sampling::filter_weights(&nu), settings.sampler.epsilon)?;
            let mut rng = seed::rng_from(&[q.seed, seed::stream::FINE]);
            Ok(sampling::inverse_cdf_sample(&cdf, settings.fine_m, &mut rng))
        })
        .collect()
}

struct StageState {
    enc: Encoded,
    preds: Vec<RayPrediction>,
    cache: Option<ForwardCache>,
}

struct MicroState {
    range: std::ops::Range<usize>,
    coarse: StageState,
    fine: StageState,
}

fn render_micro(
    mlp: &Mlp,
    settings: &RenderSettings,
    rays: &[RayQuery],
    fine_override: Option<&[DepthPartition]>,
    keep_cache: bool,
    exec: Execution,
) -> Result<(StageState, StageState)> {
    let run = |enc: &Encoded| -> Result<(NetworkOutput, Option<ForwardCache>)> {
        if keep_cache {
            let (o, c) = mlp.forward_train(&enc.batch, exec)?;
            Ok((o, Some(c)))
        } else {
            Ok((mlp.forward(&enc.batch, exec)?, None))
        }
    };
    let c_enc = encode(settings, rays, coarse_partitions(settings, rays), exec)?;
    let (c_out, c_cache) = run(&c_enc)?;
    let c_preds = predictions(settings, rays, &c_enc, &c_out);
    let f_parts = match fine_override {
        Some(p) => p.to_vec(),
        None => fine_partitions(settings, rays, &c_preds)?,
    };
    let f_enc = encode(settings, rays, f_parts, exec)?;
    let (f_out, f_cache) = run(&f_enc)?;
    let f_preds = predictions(settings, rays, &f_enc, &f_out);
    Ok((
        StageState {
            enc: c_enc,
            preds: c_preds,
            cache: c_cache,
        },
        StageState {
            enc: f_enc,
            preds: f_preds,
            cache: f_cache,
        },
    ))
}

fn micro_ranges(settings: &RenderSettings, n: usize) -> Vec<std::ops::Range<usize>> {
    let per = (MICRO_BATCH_ROWS / settings.sampler.m.max(settings.fine_m)).max(1);
    (0..n).step_by(per).map(|s| s..(s + per).min(n)).collect()
}

fn ray_channels(settings: &RenderSettings, st: &StageState) -> Result<Vec<Complex64>> {
    st.preds
        .iter()
        .map(|p| synthesis::synthesize_ray(p, settings.carrier))
        .collect()
}

/// Renders rays (coarse and fine) without retaining activations.
pub fn render_rays(mlp: &Mlp, settings: &RenderSettings, rays: &[RayQuery], exec: Execution) -> Result<Vec<RayRender>> {
    settings.validate()?;
    let mut out = Vec::with_capacity(rays.len());
    for r in micro_ranges(settings, rays.len()) {
        let (c, f) = render_micro(mlp, settings, &rays[r], None, false, exec)?;
        let hc = ray_channels(settings, &c)?;
        let hf = ray_channels(settings, &f)?;
        for (((cp, fp), h_coarse), h_fine) in c.preds.into_iter().zip(f.preds).zip(hc).zip(hf) {
            out.push(RayRender {
                coarse: cp,
                fine: fp,
                h_coarse,
                h_fine,
            });
        }
    }
    Ok(out)
}

/// Rays grouped into supervision targets. Each ray contributes to exactly
/// one target; a target's predicted channel is the ordered sum of its rays.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub rays: Vec<RayQuery>,
    pub ray_target: Vec<usize>,
    pub targets: Vec<Complex64>,
}

impl TrainingBatch {
    pub fn validate(&self) -> Result<()> {
        if self.rays.len() != self.ray_target.len() {
            return Err(Error::Shape {
                context: "ray targets",
                expected: self.rays.len(),
                found: self.ray_target.len(),
            });
        }
        if let Some(&t) = self.ray_target.iter().find(|&&t| t >= self.targets.len()) {
            return Err(Error::invalid(format!("ray target {t} out of range")));
        }
        Ok(())
    }
}

/// Loss value, per-stage NMSE and the parameter gradient of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    pub coarse_nmse: f64,
    pub fine_nmse: f64,
    pub h_coarse: Vec<Complex64>,
    pub h_fine: Vec<Complex64>,
    pub grad: Vec<f64>,
}

/// Per-target channels from per-ray channels, summed in ray order.
pub fn aggregate(ray_target: &[usize], n_targets: usize, h: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); n_targets];
    for (&t, &v) in ray_target.iter().zip(h) {
        out[t] += v;
    }
    out
}

/// Evaluates the two-stage loss of a batch and its gradient with respect
/// to every network parameter.
pub fn loss_and_gradient(
    mlp: &Mlp,
    settings: &RenderSettings,
    batch: &TrainingBatch,
    weights: LossWeights,
    exec: Execution,
) -> Result<BatchGradient> {
    loss_and_gradient_impl(mlp, settings, batch, None, weights, exec)
}

/// Like [`loss_and_gradient`] but with the fine-stage depths supplied, so
/// the loss is a smooth function of the parameters alone.
pub fn loss_and_gradient_with_fine(
    mlp: &Mlp,
    settings: &RenderSettings,
    batch: &TrainingBatch,
    fine: &[DepthPartition],
    weights: LossWeights,
    exec: Execution,
) -> Result<BatchGradient> {
    if fine.len() != batch.rays.len() {
        return Err(Error::Shape {
            context: "fine partitions",
            expected: batch.rays.len(),
            found: fine.len(),
        });
    }
    loss_and_gradient_impl(mlp, settings, batch, Some(fine), weights, exec)
}

fn loss_and_gradient_impl(
    mlp: &Mlp,
    settings: &RenderSettings,
    batch: &TrainingBatch,
    fine: Option<&[DepthPartition]>,
    weights: LossWeights,
    exec: Execution,
) -> Result<BatchGradient> {
    settings.validate()?;
    batch.validate()?;
    let ranges = micro_ranges(settings, batch.rays.len());
    let rows = batch.rays.len() * settings.sampler.m.max(settings.fine_m);
    let keep = rows <= CACHE_ROW_BUDGET;

    let mut micro = Vec::with_capacity(ranges.len());
    let mut hc_rays = Vec::with_capacity(batch.rays.len());
    let mut hf_rays = Vec::with_capacity(batch.rays.len());
    for r in ranges {
        let (c, f) = render_micro(mlp, settings, &batch.rays[r.clone()], fine.map(|p| &p[r.clone()]), keep, exec)?;
        hc_rays.extend(ray_channels(settings, &c)?);
        hf_rays.extend(ray_channels(settings, &f)?);
        micro.push(MicroState {
            range: r,
            coarse: c,
            fine: f,
        });
    }
    let n_t = batch.targets.len();
    let h_coarse = aggregate(&batch.ray_target, n_t, &hc_rays);
    let h_fine = aggregate(&batch.ray_target, n_t, &hf_rays);
    let lg = synthesis::training_loss_with_grad(&h_coarse, &h_fine, &batch.targets, weights)?;

    let mut grad = vec![0.0; mlp.param_count()];
    for mut ms in micro {
        let targets = &batch.ray_target[ms.range.clone()];
        for (stage, upstream) in [(&mut ms.coarse, &lg.d_coarse), (&mut ms.fine, &lg.d_fine)] {
            let mut up = OutputGrad::zeros(stage.enc.batch.rows);
            let mut offset = 0;
            for (p, &t) in stage.preds.iter().zip(targets) {
                let (_, rg) = synthesis::synthesize_ray_backward(p, settings.carrier, upstream[t])?;
                for (k, (ds, dx)) in rg.d_sigma.iter().zip(&rg.d_x).enumerate() {
                    up.d_sigma[offset + k] = *ds;
                    up.d_x_re[offset + k] = dx.re;
                    up.d_x_im[offset + k] = dx.im;
                }
                offset += p.sigma.len();
            }
            let cache = match stage.cache.take() {
                Some(c) => c,
                None => mlp.forward_train(&stage.enc.batch, exec)?.1,
            };
            let g = mlp.backward(&stage.enc.batch, &cache, &up, false, exec)?;
            for (acc, v) in grad.iter_mut().zip(&g.params) {
                *acc += v;
            }
        }
    }
    Ok(BatchGradient {
        loss: lg.loss,
        coarse_nmse: lg.coarse_nmse,
        fine_nmse: lg.fine_nmse,
        h_coarse,
        h_fine,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{make_encoding_config, SceneBounds};
    use crate::network::Architecture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn settings(m: usize) -> RenderSettings {
        let bounds = SceneBounds::new([0.0; 3], [4.0, 3.0, 2.0]).unwrap();
        RenderSettings {
            sampler: SamplerConfig {
                m,
                t_far: 8.0,
                ..SamplerConfig::default()
            },
            fine_m: m,
            cone_ratio: sampling::DEFAULT_CONE_RATIO,
            carrier: 2.4e9,
            encoding: make_encoding_config(&bounds, 0.25).unwrap().with_dir_levels(2),
            use_zeta: true,
        }
    }

    fn small_mlp(s: &RenderSettings, seed: u64) -> Mlp {
        let arch = Architecture {
            input_width: s.encoding.spatial_len(),
            dir_width: s.encoding.directional_len(),
            trunk_layers: 3,
            trunk_width: 8,
            feature_width: 6,
            head_width: 8,
            skip_at: 1,
        };
        Mlp::new(arch, seed).unwrap()
    }

    fn batch(n_rays: usize, seed: u64) -> TrainingBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rays: Vec<RayQuery> = (0..n_rays)
            .map(|i| RayQuery {
                origin: [rng.gen_range(0.5..3.5), rng.gen_range(0.5..2.5), rng.gen_range(0.5..1.5)],
                theta: rng.gen_range(0.1..3.0),
                phi: rng.gen_range(-3.0..3.0),
                zeta: rng.gen_range(0.3..1.0),
                seed: i as u64 * 31 + seed,
            })
            .collect();
        let ray_target: Vec<usize> = (0..n_rays).map(|i| (i * 3 / n_rays).min(2)).collect();
        TrainingBatch {
            rays,
            ray_target,
            targets: vec![
                Complex64::new(2e-3, -1e-3),
                Complex64::new(0.0, 0.0),
                Complex64::new(-1e-3, 5e-4),
            ],
        }
    }

    #[test]
    fn modes_agree_and_are_deterministic() {
        let s = settings(16);
        let mlp = small_mlp(&s, 4);
        let b = batch(7, 1);
        let seq = loss_and_gradient(&mlp, &s, &b, LossWeights::default(), Execution::Sequential).unwrap();
        let par = loss_and_gradient(&mlp, &s, &b, LossWeights::default(), Execution::Parallel).unwrap();
        assert_eq!(seq, par);
        let rr = render_rays(&mlp, &s, &b.rays, Execution::Parallel).unwrap();
        let hf: Vec<Complex64> = rr.iter().map(|r| r.h_fine).collect();
        assert_eq!(aggregate(&b.ray_target, 3, &hf), seq.h_fine);
        let ideal = RayQuery { zeta: 0.0, ..b.rays[0] };
        let blocked = render_rays(&mlp, &s, &[ideal], Execution::Sequential).unwrap();
        assert_eq!(blocked[0].h_fine, Complex64::new(0.0, 0.0));
        let mut off = s.clone();
        off.use_zeta = false;
        let unblocked = render_rays(&mlp, &off, &[ideal], Execution::Sequential).unwrap();
        assert!(unblocked[0].fine.zeta == 1.0 && unblocked[0].h_fine.norm() > 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Fine depths depend on the parameters through the coarse densities
        // but are not differentiated; freeze them for the comparison.
        let s = settings(8);
        let mut mlp = small_mlp(&s, 8);
        let b = batch(5, 2);
        let w = LossWeights::default();
        let fine: Vec<DepthPartition> = render_rays(&mlp, &s, &b.rays, Execution::Sequential)
            .unwrap()
            .into_iter()
            .map(|r| r.fine.depths)
            .collect();
        let g = loss_and_gradient_with_fine(&mlp, &s, &b, &fine, w, Execution::Parallel).unwrap();
        assert_eq!(g, loss_and_gradient(&mlp, &s, &b, w, Execution::Parallel).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        for _ in 0..60 {
            let i = rng.gen_range(0..mlp.param_count());
            let h = 1e-6;
            let orig = mlp.params()[i];
            mlp.params_mut()[i] = orig + h;
            let fp = loss_and_gradient_with_fine(&mlp, &s, &b, &fine, w, Execution::Parallel).unwrap().loss;
            mlp.params_mut()[i] = orig - h;
            let fm = loss_and_gradient_with_fine(&mlp, &s, &b, &fine, w, Execution::Parallel).unwrap().loss;
            mlp.params_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = g.grad[i];
            let scale = fd.abs().max(an.abs());
            if scale < 1e-7 {
                continue;
            }
            checked += 1;
            assert!((fd - an).abs() / scale < 1e-4, "param {i}: fd {fd} analytic {an}");
        }
        assert!(checked > 20);
    }
}
