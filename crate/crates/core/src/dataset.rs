//! Ground-truth channels for shoebox rooms via the image method, receiver
//! sampling with DoA noise and negative directions, splits, and the binary
//! dataset file.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, Reader, Writer};
use crate::par::{self, Execution};
use crate::physics::{self, Interaction, Material, PolarizationWeights, ReflectionEvent};
use crate::seed;
use crate::vec3::{self, Vec3};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const SPEC: container::Spec = container::Spec {
    kind: "dataset",
    magic: *b"WRFDATA\0",
    version: FORMAT_VERSION,
};

/// Wall faces in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Wall {
    XMin,
    XMax,
    YMin,
    YMax,
    ZMin,
    ZMax,
}

impl Wall {
    pub const ALL: [Wall; 6] = [Wall::XMin, Wall::XMax, Wall::YMin, Wall::YMax, Wall::ZMin, Wall::ZMax];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn axis(self) -> usize {
        self.index() / 2
    }

    pub fn is_max(self) -> bool {
        self.index() % 2 == 1
    }

    pub fn from_index(i: usize) -> Option<Wall> {
        Wall::ALL.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        ["-x", "+x", "-y", "+y", "-z", "+z"][self.index()]
    }
}

/// Axis-aligned room `[0, dims]` with one material per face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub dims: Vec3,
    /// Indexed by [`Wall::index`].
    pub wall_materials: [Material; 6],
    /// Carrier frequency (Hz).
    pub carrier: f64,
}

impl Room {
    pub fn new(dims: Vec3, wall_materials: [Material; 6], carrier: f64) -> Result<Self> {
        let room = Room {
            dims,
            wall_materials,
            carrier,
        };
        room.validate()?;
        Ok(room)
    }

    pub fn uniform(dims: Vec3, material: Material, carrier: f64) -> Result<Self> {
        Room::new(dims, std::array::from_fn(|_| material.clone()), carrier)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::invalid(format!("room dimensions must be > 0, got {:?}", self.dims)));
        }
        if !(self.carrier > 0.0 && self.carrier.is_finite()) {
            return Err(Error::invalid(format!("carrier must be > 0, got {}", self.carrier)));
        }
        for m in &self.wall_materials {
            m.validate()?;
        }
        Ok(())
    }

    pub fn contains_strictly(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] > 0.0 && p[a] < self.dims[a])
    }
}

/// One specular path from the transmitter to a receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    /// Unfolded path length (m).
    pub distance: f64,
    /// Arrival direction at the receiver (pointing toward the virtual source).
    pub theta: f64,
    pub phi: f64,
    /// Walls hit, in propagation order from the transmitter.
    pub walls: Vec<Wall>,
    /// Incidence angle of each bounce, aligned with `walls`.
    pub incidence_angles: Vec<f64>,
    pub zeta: f64,
    pub gain: Complex64,
    /// Virtual source position.
    pub image: Vec3,
}

impl PathRecord {
    pub fn reflection_order(&self) -> usize {
        self.walls.len()
    }

    pub fn delay(&self) -> f64 {
        self.distance / physics::SPEED_OF_LIGHT
    }
}

/// Mirror images of coordinate `s` in `[0, len]` reached with exactly `k`
/// reflections: `2nL + s` takes `2|n|` bounces and `2nL − s` takes `|2n − 1|`.
fn axis_images(s: f64, len: f64, k: usize) -> Vec<f64> {
    let kf = k as f64;
    match k {
        0 => vec![s],
        _ if k.is_multiple_of(2) => vec![-kf * len + s, kf * len + s],
        _ => vec![(1.0 - kf) * len - s, (1.0 + kf) * len - s],
    }
}

/// All specular paths with at most `max_order` reflections.
pub fn image_method_paths(
    room: &Room,
    tx: Vec3,
    rx: Vec3,
    max_order: usize,
    weights: PolarizationWeights,
) -> Result<Vec<PathRecord>> {
    room.validate()?;
    if !room.contains_strictly(tx) {
        return Err(Error::invalid(format!("transmitter {tx:?} is not inside the room")));
    }
    if !room.contains_strictly(rx) {
        return Err(Error::invalid(format!("receiver {rx:?} is not inside the room")));
    }
    let air = Material::vacuum();
    let mut paths = Vec::new();
    for order in 0..=max_order {
        for kx in 0..=order {
            for ky in 0..=order - kx {
                let kz = order - kx - ky;
                let ix = axis_images(tx[0], room.dims[0], kx);
                let iy = axis_images(tx[1], room.dims[1], ky);
                let iz = axis_images(tx[2], room.dims[2], kz);
                for &x in &ix {
                    for &y in &iy {
                        for &z in &iz {
                            paths.push(build_path(room, &air, [x, y, z], [kx, ky, kz], rx, weights)?);
                        }
                    }
                }
            }
        }
    }
    Ok(paths)
}

fn build_path(
    room: &Room,
    air: &Material,
    image: Vec3,
    counts: [usize; 3],
    rx: Vec3,
    weights: PolarizationWeights,
) -> Result<PathRecord> {
    let d = vec3::sub(rx, image);
    let distance = vec3::norm(d);
    // Order bounces by where the unfolded segment image→rx crosses each
    // lattice plane.
    let mut bounces: Vec<(f64, Wall, f64)> = Vec::new();
    for a in 0..3 {
        if counts[a] == 0 {
            continue;
        }
        let cos_inc = d[a].abs() / distance;
        let theta_i = cos_inc.clamp(-1.0, 1.0).acos();
        // Lattice planes lie between image and receiver coordinates.
        let len = room.dims[a];
        let (p0, p1) = (image[a], rx[a]);
        let mut planes: Vec<f64> = Vec::with_capacity(counts[a]);
        let (lo, hi) = if p0 < p1 { (p0, p1) } else { (p1, p0) };
        let mut j = (lo / len).floor() as i64;
        while (j as f64) * len < hi {
            let plane = j as f64 * len;
            if plane > lo {
                planes.push(plane);
            }
            j += 1;
        }
        if planes.len() != counts[a] {
            return Err(Error::Degenerate(format!(
                "image construction inconsistent on axis {a}: {} planes for {} reflections",
                planes.len(),
                counts[a]
            )));
        }
        let frac = |plane: f64| (plane - p0) / (p1 - p0);
        planes.sort_by(|x, y| frac(*x).total_cmp(&frac(*y)));
        for &plane in &planes {
            // Plane j·len is the low wall when j is even, the high wall when odd.
            let j = (plane / len).round() as i64;
            let wall = Wall::from_index(2 * a + usize::from(j.rem_euclid(2) == 1)).unwrap();
            bounces.push((frac(plane), wall, theta_i));
        }
    }
    bounces.sort_by(|x, y| x.0.total_cmp(&y.0));
    let walls: Vec<Wall> = bounces.iter().map(|b| b.1).collect();
    let incidence_angles: Vec<f64> = bounces.iter().map(|b| b.2).collect();
    let events = bounces
        .iter()
        .map(|&(_, wall, th)| {
            ReflectionEvent::new(th, air.clone(), room.wall_materials[wall.index()].clone(), room.carrier)
                .map(Interaction::Reflection)
        })
        .collect::<Result<Vec<_>>>()?;
    let zeta = physics::path_zeta(&events, weights)?;
    let gain = physics::path_gain(distance, zeta, room.carrier)?;
    let (theta, phi) = vec3::to_angles(vec3::sub(image, rx));
    Ok(PathRecord {
        distance,
        theta,
        phi,
        walls,
        incidence_angles,
        zeta,
        gain,
        image,
    })
}

/// Knobs for receiver-level sample construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub max_order: usize,
    pub negatives: usize,
    /// Half-width of the uniform DoA perturbation (degrees); 0 disables it.
    pub doa_noise_deg: f64,
    /// Minimum separation of negative directions from true DoAs (degrees).
    pub negative_margin_deg: f64,
    pub polarization: PolarizationWeights,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            max_order: 3,
            negatives: 10,
            doa_noise_deg: 0.1,
            negative_margin_deg: 1.0,
            polarization: PolarizationWeights::default(),
        }
    }
}

/// All supervision derived for one receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSample {
    pub receiver: Vec3,
    pub paths: Vec<PathRecord>,
    pub cfr: Complex64,
    /// Perturbed `(θ, φ)` per path, aligned with `paths`.
    pub noisy_doas: Vec<(f64, f64)>,
    pub negative_doas: Vec<(f64, f64)>,
}

/// Uniform direction on the unit sphere as `(θ, φ)`.
pub fn uniform_direction<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let u: f64 = rng.gen();
    let v: f64 = rng.gen();
    let theta = (1.0 - 2.0 * u).clamp(-1.0, 1.0).acos();
    let phi = 2.0 * PI * v - PI;
    (theta, phi)
}

/// Builds the sample for one receiver. Returns `Ok(None)` when no path
/// reaches the receiver.
pub fn build_sample<R: Rng + ?Sized>(
    room: &Room,
    tx: Vec3,
    rx: Vec3,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<Option<ChannelSample>> {
    let paths = image_method_paths(room, tx, rx, cfg.max_order, cfg.polarization)?;
    if paths.is_empty() {
        return Ok(None);
    }
    let cfr = paths.iter().fold(Complex64::new(0.0, 0.0), |acc, p| acc + p.gain);
    let noise = cfg.doa_noise_deg.to_radians();
    let noisy_doas = paths
        .iter()
        .map(|p| {
            if noise > 0.0 {
                let dt = rng.gen_range(-noise..=noise);
                let dp = rng.gen_range(-noise..=noise);
                ((p.theta + dt).clamp(0.0, PI), p.phi + dp)
            } else {
                (p.theta, p.phi)
            }
        })
        .collect();
    let dirs: Vec<Vec3> = paths.iter().map(|p| vec3::from_angles(p.theta, p.phi)).collect();
    let margin = cfg.negative_margin_deg.to_radians();
    let mut negative_doas = Vec::with_capacity(cfg.negatives);
    let mut attempts = 0usize;
    while negative_doas.len() < cfg.negatives {
        attempts += 1;
        if attempts > 1000 * (cfg.negatives + 1) {
            return Err(Error::Degenerate(
                "could not place negative directions away from the true DoAs".into(),
            ));
        }
        let (t, p) = uniform_direction(rng);
        let d = vec3::from_angles(t, p);
        if dirs.iter().all(|&q| vec3::angle_between(d, q) >= margin) {
            negative_doas.push((t, p));
        }
    }
    Ok(Some(ChannelSample {
        receiver: rx,
        paths,
        cfr,
        noisy_doas,
        negative_doas,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Split> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

/// Dataset generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub n_receivers: usize,
    pub seed: u64,
    /// Minimum receiver distance from every wall (m).
    pub margin: f64,
    /// Train and validation fractions; the rest is test.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub sample: SampleConfig,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            n_receivers: 500,
            seed: 0,
            margin: 0.1,
            train_fraction: 0.8,
            val_fraction: 0.1,
            sample: SampleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub room: Room,
    pub tx: Vec3,
    pub config: GenerationConfig,
    pub samples: Vec<ChannelSample>,
    /// Split of each sample, aligned with `samples`.
    pub splits: Vec<Split>,
}

/// Split assignment for `n` items: a seeded shuffle cut into
/// train/val/test by rounded fractions.
pub fn assign_splits(n: usize, train: f64, val: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_from(&[seed, seed::stream::SPLIT]));
    let n_train = ((n as f64) * train).round() as usize;
    let n_val = (((n as f64) * val).round() as usize).min(n - n_train.min(n));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

pub fn generate_dataset(room: &Room, tx: Vec3, cfg: &GenerationConfig, exec: Execution) -> Result<Dataset> {
    room.validate()?;
    if cfg.n_receivers == 0 {
        return Err(Error::invalid("n_receivers must be >= 1"));
    }
    if !room.contains_strictly(tx) {
        return Err(Error::invalid(format!("transmitter {tx:?} is not inside the room")));
    }
    if room.dims.iter().any(|&d| d <= 2.0 * cfg.margin) {
        return Err(Error::invalid("room is too small for the receiver margin"));
    }
    if !(cfg.train_fraction >= 0.0 && cfg.val_fraction >= 0.0 && cfg.train_fraction + cfg.val_fraction <= 1.0) {
        return Err(Error::invalid("split fractions must be non-negative and sum to <= 1"));
    }
    let built = par::map_range(exec, cfg.n_receivers, |i| {
        let mut rng = seed::rng_from(&[cfg.seed, seed::stream::RECEIVER, i as u64]);
        let rx: Vec3 = std::array::from_fn(|a| rng.gen_range(cfg.margin..room.dims[a] - cfg.margin));
        build_sample(room, tx, rx, &cfg.sample, &mut rng)
    });
    let mut samples = Vec::with_capacity(cfg.n_receivers);
    for s in built {
        if let Some(s) = s? {
            samples.push(s);
        }
    }
    let splits = assign_splits(samples.len(), cfg.train_fraction, cfg.val_fraction, cfg.seed);
    Ok(Dataset {
        room: room.clone(),
        tx,
        config: cfg.clone(),
        samples,
        splits,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    room: Room,
    tx: Vec3,
    config: GenerationConfig,
    n_samples: usize,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            room: self.room.clone(),
            tx: self.tx,
            config: self.config.clone(),
            n_samples: self.samples.len(),
        })
        .map_err(|e| SPEC.header_error(e))?;
        let mut w = Writer::default();
        for (s, split) in self.samples.iter().zip(&self.splits) {
            w.u8(split.code());
            w.u32(s.paths.len() as u32);
            w.u32(s.negative_doas.len() as u32);
            w.f64s(&s.receiver);
            w.f64(s.cfr.re);
            w.f64(s.cfr.im);
            for (p, &(nt, np)) in s.paths.iter().zip(&s.noisy_doas) {
                w.f64s(&[p.distance, p.theta, p.phi, nt, np, p.zeta, p.gain.re, p.gain.im]);
                w.f64s(&p.image);
                w.u8(p.walls.len() as u8);
                for (wall, &ang) in p.walls.iter().zip(&p.incidence_angles) {
                    w.u8(wall.index() as u8);
                    w.f64(ang);
                }
            }
            for &(t, p) in &s.negative_doas {
                w.f64(t);
                w.f64(p);
            }
        }
        Ok(SPEC.encode(&header, &w.buf))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let (header, body) = SPEC.decode(bytes)?;
        let header: Header = serde_json::from_slice(header).map_err(|e| SPEC.header_error(e))?;
        header.room.validate().map_err(|e| SPEC.header_error(e))?;
        let mut r = Reader::new(body);
        let mut samples = Vec::with_capacity(header.n_samples);
        let mut splits = Vec::with_capacity(header.n_samples);
        let body_err = |e: String| SPEC.body_error(e);
        for _ in 0..header.n_samples {
            let split = Split::from_code(r.u8().map_err(body_err)?)
                .ok_or_else(|| SPEC.body_error("invalid split code"))?;
            let n_paths = r.u32().map_err(body_err)? as usize;
            let n_neg = r.u32().map_err(body_err)? as usize;
            let rx = r.f64s(3).map_err(body_err)?;
            let cfr = Complex64::new(r.f64().map_err(body_err)?, r.f64().map_err(body_err)?);
            let mut paths = Vec::with_capacity(n_paths.min(1 << 16));
            let mut noisy = Vec::with_capacity(n_paths.min(1 << 16));
            for _ in 0..n_paths {
                let v = r.f64s(8).map_err(body_err)?;
                let image = r.f64s(3).map_err(body_err)?;
                let order = r.u8().map_err(body_err)? as usize;
                let mut walls = Vec::with_capacity(order);
                let mut angles = Vec::with_capacity(order);
                for _ in 0..order {
                    let wi = r.u8().map_err(body_err)? as usize;
                    walls.push(Wall::from_index(wi).ok_or_else(|| SPEC.body_error("invalid wall index"))?);
                    angles.push(r.f64().map_err(body_err)?);
                }
                noisy.push((v[3], v[4]));
                paths.push(PathRecord {
                    distance: v[0],
                    theta: v[1],
                    phi: v[2],
                    walls,
                    incidence_angles: angles,
                    zeta: v[5],
                    gain: Complex64::new(v[6], v[7]),
                    image: [image[0], image[1], image[2]],
                });
            }
            let mut negs = Vec::with_capacity(n_neg.min(1 << 16));
            for _ in 0..n_neg {
                negs.push((r.f64().map_err(body_err)?, r.f64().map_err(body_err)?));
            }
            samples.push(ChannelSample {
                receiver: [rx[0], rx[1], rx[2]],
                paths,
                cfr,
                noisy_doas: noisy,
                negative_doas: negs,
            });
            splits.push(split);
        }
        if !r.finished() {
            return Err(SPEC.body_error("unexpected bytes after last record"));
        }
        Ok(Dataset {
            room: header.room,
            tx: header.tx,
            config: header.config,
            samples,
            splits,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_bytes(&std::fs::read(path)?)
    }

    /// Per-path table, one row per (receiver, path).
    pub fn paths_csv(&self) -> String {
        let mut out = String::from(PATHS_CSV_HEADER);
        out.push('\n');
        for (i, (s, split)) in self.samples.iter().zip(&self.splits).enumerate() {
            for (j, (p, &(nt, np))) in s.paths.iter().zip(&s.noisy_doas).enumerate() {
                let walls: Vec<&str> = p.walls.iter().map(|w| w.label()).collect();
                let _ = writeln!(
                    out,
                    "{i},{},{},{},{},{j},{},{},{},{},{},{},{},{},{},{},{}",
                    split.name(),
                    s.receiver[0],
                    s.receiver[1],
                    s.receiver[2],
                    p.reflection_order(),
                    p.distance,
                    p.delay(),
                    p.theta,
                    p.phi,
                    nt,
                    np,
                    p.zeta,
                    p.gain.re,
                    p.gain.im,
                    walls.join(" "),
                );
            }
        }
        out
    }
}

pub const PATHS_CSV_HEADER: &str = "receiver_id,split,rx_x,rx_y,rx_z,path_id,order,distance_m,delay_s,theta,phi,noisy_theta,noisy_phi,zeta,gain_re,gain_im,walls";

/// Convenience for CLI and tests: scene-style room with a named built-in material.
pub fn builtin_room(dims: Vec3, material: &str, carrier: f64) -> Result<Room> {
    let m = physics::builtin_material(material, carrier)
        .ok_or_else(|| Error::invalid(format!("unknown material {material:?}")))?;
    Room::uniform(dims, m, carrier)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::FormatError;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn room() -> Room {
        builtin_room([8.0, 5.0, 3.0], "concrete", 2.4e9).unwrap()
    }

    fn mixed_room() -> Room {
        let f = 2.4e9;
        let names = ["concrete", "brick", "glass", "wood", "gypsum", "concrete"];
        Room::new(
            [6.0, 4.0, 3.0],
            std::array::from_fn(|i| physics::builtin_material(names[i], f).unwrap()),
            f,
        )
        .unwrap()
    }

    const TX: Vec3 = [2.0, 1.5, 2.5];
    const RX: Vec3 = [5.5, 3.2, 1.1];

    #[test]
    fn line_of_sight_only() {
        let p = image_method_paths(&room(), TX, RX, 0, PolarizationWeights::default()).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p[0].distance - vec3::norm(vec3::sub(TX, RX))).abs() < 1e-12);
        assert_eq!(p[0].zeta, 1.0);
        assert!(p[0].walls.is_empty());
    }

    #[test]
    fn floor_reflection_geometry() {
        let p = image_method_paths(&room(), TX, RX, 1, PolarizationWeights::default()).unwrap();
        assert_eq!(p.len(), 7);
        let floor = p.iter().find(|p| p.walls == vec![Wall::ZMin]).unwrap();
        let mirror = [TX[0], TX[1], -TX[2]];
        assert!((floor.distance - vec3::norm(vec3::sub(mirror, RX))).abs() < 1e-12);
        // Specular point on z = 0 where the mirrored segment crosses it.
        let s = TX[2] / (TX[2] + RX[2]);
        let hit = [TX[0] + s * (RX[0] - TX[0]), TX[1] + s * (RX[1] - TX[1]), 0.0];
        let incoming = vec3::sub(hit, TX);
        let expected = (TX[2] / vec3::norm(incoming)).acos();
        assert!((floor.incidence_angles[0] - expected).abs() < 1e-12);
        // DoA points from the receiver toward the image.
        let dir = vec3::from_angles(floor.theta, floor.phi);
        let to_img = vec3::scale(vec3::sub(mirror, RX), 1.0 / floor.distance);
        assert!(vec3::norm(vec3::sub(dir, to_img)) < 1e-12);
    }

    #[test]
    fn path_counts_by_order() {
        for (order, n) in [(0, 1), (1, 7), (2, 25), (3, 63)] {
            let p = image_method_paths(&room(), TX, RX, order, PolarizationWeights::default()).unwrap();
            assert_eq!(p.len(), n, "order {order}");
        }
    }

    #[test]
    fn outside_positions_rejected() {
        let w = PolarizationWeights::default();
        assert!(image_method_paths(&room(), [9.0, 1.0, 1.0], RX, 3, w).is_err());
        assert!(image_method_paths(&room(), TX, [1.0, 1.0, 0.0], 3, w).is_err());
    }

    /// Independent construction: mirror the receiver across every admissible
    /// wall sequence (propagation order reversed), then trace the unfolded
    /// segment back through the room and keep only sequences whose specular
    /// points land on the named faces in order.
    fn brute_force(room: &Room, tx: Vec3, rx: Vec3, max_order: usize) -> Vec<(f64, f64, usize)> {
        let mirror = |p: Vec3, w: Wall| {
            let mut q = p;
            let a = w.axis();
            let plane = if w.is_max() { room.dims[a] } else { 0.0 };
            q[a] = 2.0 * plane - p[a];
            q
        };
        let mut seqs: Vec<Vec<Wall>> = vec![vec![]];
        let mut frontier: Vec<Vec<Wall>> = vec![vec![]];
        for _ in 0..max_order {
            let mut next = Vec::new();
            for s in &frontier {
                for w in Wall::ALL {
                    if s.last() != Some(&w) {
                        let mut t = s.clone();
                        t.push(w);
                        next.push(t);
                    }
                }
            }
            seqs.extend(next.iter().cloned());
            frontier = next;
        }
        let air = Material::vacuum();
        let mut out = Vec::new();
        'seq: for seq in seqs {
            let mut pos = tx;
            let mut events = Vec::new();
            let mut total = 0.0;
            for i in 0..seq.len() {
                // Receiver imaged across the remaining walls, last wall first.
                let mut target = rx;
                for &w in seq[i..].iter().rev() {
                    target = mirror(target, w);
                }
                let w = seq[i];
                let a = w.axis();
                let plane = if w.is_max() { room.dims[a] } else { 0.0 };
                let dir = vec3::sub(target, pos);
                if dir[a].abs() < 1e-15 {
                    continue 'seq;
                }
                let s = (plane - pos[a]) / dir[a];
                if !(s > 1e-12 && s < 1.0 - 1e-12) {
                    continue 'seq;
                }
                let hit = vec3::add(pos, vec3::scale(dir, s));
                for b in 0..3 {
                    if b != a && !(hit[b] >= 0.0 && hit[b] <= room.dims[b]) {
                        continue 'seq;
                    }
                }
                let seg = vec3::sub(hit, pos);
                let cos_i = seg[a].abs() / vec3::norm(seg);
                total += vec3::norm(seg);
                events.push(Interaction::Reflection(
                    ReflectionEvent::new(
                        cos_i.acos(),
                        air.clone(),
                        room.wall_materials[w.index()].clone(),
                        room.carrier,
                    )
                    .unwrap(),
                ));
                pos = hit;
            }
            total += vec3::norm(vec3::sub(rx, pos));
            let zeta = physics::path_zeta(&events, PolarizationWeights::default()).unwrap();
            out.push((total, zeta, seq.len()));
        }
        out
    }

    fn sorted(mut v: Vec<(f64, f64, usize)>) -> Vec<(f64, f64, usize)> {
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        v
    }

    #[test]
    fn matches_receiver_mirroring_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = mixed_room();
        for _ in 0..20 {
            let tx: Vec3 = std::array::from_fn(|a| rng.gen_range(0.2..r.dims[a] - 0.2));
            let rx: Vec3 = std::array::from_fn(|a| rng.gen_range(0.2..r.dims[a] - 0.2));
            let ours = image_method_paths(&r, tx, rx, 3, PolarizationWeights::default()).unwrap();
            let ours = sorted(ours.iter().map(|p| (p.distance, p.zeta, p.reflection_order())).collect());
            let oracle = sorted(brute_force(&r, tx, rx, 3));
            assert_eq!(ours.len(), oracle.len());
            for (a, b) in ours.iter().zip(&oracle) {
                assert!((a.0 - b.0).abs() < 1e-9, "{a:?} vs {b:?}");
                assert!((a.1 - b.1).abs() < 1e-9, "{a:?} vs {b:?}");
                assert_eq!(a.2, b.2);
            }
        }
    }

    #[test]
    fn reciprocity_and_monotone_orders() {
        let r = mixed_room();
        let w = PolarizationWeights::default();
        let key = |p: &PathRecord| (p.distance, p.zeta, p.reflection_order());
        let fwd = sorted(image_method_paths(&r, TX, [4.0, 1.0, 0.7], 3, w).unwrap().iter().map(key).collect());
        let back = sorted(image_method_paths(&r, [4.0, 1.0, 0.7], TX, 3, w).unwrap().iter().map(key).collect());
        for (a, b) in fwd.iter().zip(&back) {
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9 && a.2 == b.2);
        }
        for k in 0..3 {
            let lower = image_method_paths(&r, TX, RX, k, w).unwrap();
            let upper = image_method_paths(&r, TX, RX, k + 1, w).unwrap();
            for p in &lower {
                assert!(upper.iter().any(|q| q.walls == p.walls && q.distance == p.distance));
            }
        }
    }

    #[test]
    fn gains_rederivable() {
        let paths = image_method_paths(&mixed_room(), TX, RX, 3, PolarizationWeights::default()).unwrap();
        for p in &paths {
            let g = physics::path_gain(p.distance, p.zeta, 2.4e9).unwrap();
            assert!((g - p.gain).norm() < 1e-12);
            assert!(p.reflection_order() <= 3);
            assert!(p.zeta > 0.0 && p.zeta <= 1.0);
        }
    }

    #[test]
    fn sample_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = SampleConfig::default();
        let s = build_sample(&room(), TX, RX, &cfg, &mut rng).unwrap().unwrap();
        let sum = s.paths.iter().fold(Complex64::new(0.0, 0.0), |a, p| a + p.gain);
        assert_eq!(s.cfr, sum);
        assert_eq!(s.negative_doas.len(), 10);
        let lim = 0.1f64.to_radians() * (1.0 + 1e-12);
        for (p, &(t, ph)) in s.paths.iter().zip(&s.noisy_doas) {
            assert!((p.theta - t).abs() <= lim && (p.phi - ph).abs() <= lim);
        }
        for &(t, ph) in &s.negative_doas {
            let d = vec3::from_angles(t, ph);
            for p in &s.paths {
                let q = vec3::from_angles(p.theta, p.phi);
                assert!(vec3::angle_between(d, q) >= 1f64.to_radians());
            }
        }
        cfg.doa_noise_deg = 0.0;
        let s = build_sample(&room(), TX, RX, &cfg, &mut rng).unwrap().unwrap();
        for (p, &(t, ph)) in s.paths.iter().zip(&s.noisy_doas) {
            assert_eq!((p.theta, p.phi), (t, ph));
        }
    }

    fn small_dataset(seed: u64) -> Dataset {
        let cfg = GenerationConfig {
            n_receivers: 40,
            seed,
            ..GenerationConfig::default()
        };
        generate_dataset(&room(), TX, &cfg, Execution::Parallel).unwrap()
    }

    #[test]
    fn generation_is_deterministic_and_split() {
        let a = small_dataset(9);
        let b = small_dataset(9);
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let seq = generate_dataset(
            &room(),
            TX,
            &GenerationConfig {
                n_receivers: 40,
                seed: 9,
                ..GenerationConfig::default()
            },
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(seq, a);
        assert_ne!(small_dataset(10).to_bytes().unwrap(), a.to_bytes().unwrap());
        assert_eq!(a.indices(Split::Train).len(), 32);
        assert_eq!(a.indices(Split::Val).len(), 4);
        assert_eq!(a.indices(Split::Test).len(), 4);
        for s in &a.samples {
            assert!((0..3).all(|k| s.receiver[k] >= 0.1 && s.receiver[k] <= a.room.dims[k] - 0.1));
            assert!(s.paths.iter().all(|p| p.reflection_order() <= 3));
        }
        assert!(generate_dataset(&room(), TX, &GenerationConfig { n_receivers: 0, ..Default::default() }, Execution::Sequential).is_err());
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let d = small_dataset(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.wrfd");
        d.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), d);

        let bytes = d.to_bytes().unwrap();
        let err = |b: &[u8]| match Dataset::from_bytes(b) {
            Err(Error::Format { source, .. }) => source,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut corrupt = bytes.clone();
        let mid = corrupt.len() / 2;
        corrupt[mid] ^= 0xff;
        assert!(matches!(err(&corrupt), FormatError::Checksum { .. }));
        let mut old = bytes.clone();
        old[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(err(&old), FormatError::Version { found: 0, .. }));
        assert!(matches!(err(&bytes[..bytes.len() - 10]), FormatError::Truncated { .. }));
    }

    #[test]
    fn csv_has_one_row_per_path() {
        let d = small_dataset(2);
        let csv = d.paths_csv();
        let rows = csv.lines().count() - 1;
        assert_eq!(rows, d.samples.iter().map(|s| s.paths.len()).sum::<usize>());
        assert!(csv.starts_with(PATHS_CSV_HEADER));
    }
}
