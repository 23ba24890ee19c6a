use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wrf_core::config::RunConfig;
use wrf_core::dataset::{builtin_room, generate_dataset, image_method_paths, Dataset, GenerationConfig};
use wrf_core::encoding::{make_encoding_config, pe_scale_consistent, SceneBounds};
use wrf_core::par::Execution;
use wrf_core::physics::{fresnel_coefficients, path_gain, Material, PolarizationWeights, ReflectionEvent};
use wrf_core::sampling::{
    build_cdf, filter_weights, frustum_moments, inverse_cdf_sample, stratified_coarse, DepthPartition,
    SamplerConfig, Stage,
};
use wrf_core::synthesis::{emission_weights, nmse, synthesize_ray, RayPrediction};
use wrf_core::Complex64;

fn partition(depths: Vec<f64>) -> DepthPartition {
    DepthPartition {
        depths,
        stage: Stage::Coarse,
    }
}

fn increasing(lo: f64, gaps: &[f64]) -> Vec<f64> {
    let mut d = vec![lo];
    for g in gaps {
        d.push(d.last().unwrap() + g);
    }
    d
}

proptest! {
    #[test]
    fn fresnel_is_passive(theta in 0.0..1.55f64, eps in 1.0..30.0f64, sigma in 0.0..5.0f64, f in 1e8..1e11f64) {
        let m = Material::new("m", eps, sigma).unwrap();
        let ev = ReflectionEvent::new(theta, Material::vacuum(), m, f).unwrap();
        let (rs, rp) = fresnel_coefficients(&ev).unwrap();
        prop_assert!(rs.norm() <= 1.0 + 1e-12);
        prop_assert!(rp.norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn matched_media_do_not_reflect(theta in 0.0..1.55f64, eps in 1.0..30.0f64) {
        let m = Material::new("m", eps, 0.0).unwrap();
        let ev = ReflectionEvent::new(theta, m.clone(), m, 2.4e9).unwrap();
        let (rs, rp) = fresnel_coefficients(&ev).unwrap();
        prop_assert!(rs.norm() < 1e-12 && rp.norm() < 1e-12);
    }

    #[test]
    fn telescoping_and_range(sigma in prop::collection::vec(0.0..50.0f64, 1..40), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaps: Vec<f64> = sigma.iter().map(|_| rng.gen_range(1e-4..0.5)).collect();
        let p = partition(increasing(1e-3, &gaps));
        let nu = emission_weights(&sigma, &p).unwrap();
        let total: f64 = sigma.iter().zip(&gaps).map(|(s, g)| s * g).sum();
        let sum: f64 = nu.iter().sum();
        prop_assert!((sum + (-total).exp() - 1.0).abs() <= 1e-12);
        prop_assert!(nu.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn ray_synthesis_is_linear(re in -3.0..3.0f64, im in -3.0..3.0f64, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 8;
        let gaps: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..0.5)).collect();
        let depths = increasing(0.2, &gaps);
        let mu_t = depths.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let pred = RayPrediction {
            depths: partition(depths),
            sigma: (0..m).map(|_| rng.gen_range(0.0..3.0)).collect(),
            x: (0..m).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect(),
            mu_t,
            zeta: rng.gen_range(0.0..1.0),
        };
        let c = Complex64::new(re, im);
        let mut scaled = pred.clone();
        scaled.x.iter_mut().for_each(|x| *x *= c);
        let a = synthesize_ray(&pred, 2.4e9).unwrap() * c;
        let b = synthesize_ray(&scaled, 2.4e9).unwrap();
        prop_assert!((a - b).norm() <= 1e-12 * (1.0 + a.norm()));
    }

    #[test]
    fn nmse_is_scale_invariant(s in 0.01..100.0f64, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = || Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let truth: Vec<Complex64> = (0..6).map(|_| c()).collect();
        let pred: Vec<Complex64> = (0..6).map(|_| c()).collect();
        let a = nmse(&pred, &truth).unwrap();
        let ps: Vec<_> = pred.iter().map(|p| p * s).collect();
        let ts: Vec<_> = truth.iter().map(|t| t * s).collect();
        prop_assert!((a - nmse(&ps, &ts).unwrap()).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn frustum_mean_lies_inside(t_lo in 1e-3..20.0f64, frac in 1e-6..2.0f64, r in 1e-4..0.1f64) {
        let t_hi = t_lo * (1.0 + frac);
        let mo = frustum_moments(t_lo, t_hi, r).unwrap();
        prop_assert!(mo.mu_t >= t_lo && mo.mu_t <= t_hi);
        prop_assert!(mo.sigma_t >= 0.0 && mo.sigma_r > 0.0);
        prop_assert!(mo.sigma_t <= (t_hi - t_lo).powi(2) / 4.0);
    }

    #[test]
    fn sampler_partitions_are_ordered(m in 2usize..64, eps in 0.0..0.5f64, seed in 0u64..1000) {
        let cfg = SamplerConfig { m, epsilon: eps, ..SamplerConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coarse = stratified_coarse(&cfg, &mut rng);
        prop_assert_eq!(coarse.intervals(), m);
        prop_assert!(coarse.is_strictly_increasing());
        prop_assert!(coarse.depths[0] >= cfg.t_near && *coarse.depths.last().unwrap() <= cfg.t_far);
        let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cdf = build_cdf(&coarse, &filter_weights(&w), eps.max(1e-3)).unwrap();
        let fine = inverse_cdf_sample(&cdf, m, &mut rng);
        prop_assert!(fine.is_strictly_increasing());
        prop_assert!(fine.depths[0] >= coarse.depths[0] && *fine.depths.last().unwrap() <= *coarse.depths.last().unwrap());
    }

    #[test]
    fn pe_entries_are_bounded(x in 0.0..1.0f64, levels in 1usize..12) {
        let pe = pe_scale_consistent(x, levels);
        prop_assert_eq!(pe.len(), 2 * levels);
        prop_assert!(pe.iter().all(|v| v.abs() <= 1.0));
        for pair in pe.chunks(2) {
            prop_assert!((pair[0].powi(2) + pair[1].powi(2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_a_room_adds_one_level(l in 1.0..40.0f64, w in 1.0..40.0f64, h in 1.0..10.0f64) {
        let b = SceneBounds::new([0.0; 3], [l, w, h]).unwrap();
        let a = make_encoding_config(&b, 0.02).unwrap();
        let d = make_encoding_config(&b.scaled(2.0), 0.02).unwrap();
        for axis in 0..3 {
            prop_assert_eq!(d.levels[axis], a.levels[axis] + 1);
        }
    }

    #[test]
    fn image_paths_match_gain_and_geometry(x in 0.5..7.5f64, y in 0.5..4.5f64, z in 0.5..2.5f64) {
        let room = builtin_room([8.0, 5.0, 3.0], "gypsum", 2.4e9).unwrap();
        let tx = [2.0, 1.5, 2.0];
        let paths = image_method_paths(&room, tx, [x, y, z], 2, PolarizationWeights::default()).unwrap();
        let los = paths.iter().find(|p| p.reflection_order() == 0).unwrap();
        let d = ((x - 2.0).powi(2) + (y - 1.5).powi(2) + (z - 2.0).powi(2)).sqrt();
        prop_assert!((los.distance - d).abs() < 1e-12);
        for p in &paths {
            prop_assert!(p.distance >= d - 1e-12);
            prop_assert!(p.zeta >= 0.0 && p.zeta <= 1.0);
            let g = path_gain(p.distance, p.zeta, 2.4e9).unwrap();
            prop_assert!((g - p.gain).norm() <= 1e-15);
            prop_assert!((0.0..=PI).contains(&p.theta));
        }
    }
}

#[test]
fn config_round_trips_through_toml() {
    for name in ["scene-a", "scene-b"] {
        let c = RunConfig::preset(name).unwrap();
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }
}

#[test]
fn config_rejects_unknown_keys() {
    let err = RunConfig::from_toml_str("preset = \"scene-a\"\n[trainer]\nlearning_rate = 0.1\n");
    assert!(err.is_err());
}

#[test]
fn dataset_generation_is_deterministic_and_round_trips() {
    let room = builtin_room([6.0, 4.0, 3.0], "concrete", 2.4e9).unwrap();
    let g = GenerationConfig {
        n_receivers: 25,
        seed: 5,
        ..GenerationConfig::default()
    };
    let a = generate_dataset(&room, [1.0, 1.0, 1.5], &g, Execution::Parallel).unwrap();
    let b = generate_dataset(&room, [1.0, 1.0, 1.5], &g, Execution::Sequential).unwrap();
    let bytes = a.to_bytes().unwrap();
    assert_eq!(bytes, b.to_bytes().unwrap());
    assert_eq!(Dataset::from_bytes(&bytes).unwrap(), a);
}

#[test]
fn example_config_matches_preset() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml");
    let mut c = RunConfig::load(&path).unwrap();
    let preset = RunConfig::preset("scene-a").unwrap();
    c.paths = preset.paths.clone();
    assert_eq!(c, preset);
}
