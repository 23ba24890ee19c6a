//! `wrf`: dataset generation, training, evaluation and diagnostics.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O or file
//! format error, 3 numeric failure, 4 training stopped at the iteration cap,
//! 130 training interrupted (a checkpoint is still written).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use serde_json::json;

use wrf_core::checkpoint::Checkpoint;
use wrf_core::config::{scene_preset, RunConfig};
use wrf_core::dataset::{self, Dataset, Split};
use wrf_core::encoding::{self, SceneBounds};
use wrf_core::par::Execution;
use wrf_core::physics::{self, Material};
use wrf_core::pipeline;
use wrf_core::sampling::{self, Ray};
use wrf_core::trainer::{self, LogRow, RunHooks, StopReason, Trainer};

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_CAP: u8 = 4;
const EXIT_INTERRUPTED: u8 = 130;

const DATASET_FILE: &str = "dataset.wrfd";
const MANIFEST_FILE: &str = "manifest.json";
const PATHS_FILE: &str = "paths.csv";
const CHECKPOINT_FILE: &str = "checkpoint.wrfc";
const LOG_FILE: &str = "train_log.csv";
const CONFIG_ECHO_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "wrf", version, about = "Physics-informed wireless radiance field")]
struct Cli {
    /// Run on one thread (results are identical either way).
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a shoebox room and write a dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict the CFR at a receiver for a list of DoAs.
    Predict(PredictArgs),
    /// Dump PE and IPE vectors of one frustum as CSV.
    InspectEncoding(InspectArgs),
    /// Reflection coefficients versus incidence angle as CSV.
    FresnelTable(FresnelArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Preset supplying defaults for every other flag.
    #[arg(long, default_value = "scene-a")]
    preset: String,
    /// Room size as LxWxH in metres.
    #[arg(long)]
    room: Option<String>,
    /// Transmitter position x,y,z.
    #[arg(long)]
    tx: Option<String>,
    /// Number of receivers.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    material: Option<String>,
    /// Carrier frequency in Hz.
    #[arg(long)]
    fc: Option<f64>,
    #[arg(long, default_value_t = 3)]
    max_order: usize,
    #[arg(long)]
    negatives: Option<usize>,
    /// Also write the per-path table as CSV.
    #[arg(long)]
    paths_csv: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (flat dotted keys over a preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, default_value = "scene-a")]
    preset: String,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ablate_scale_consistent: bool,
    #[arg(long)]
    ablate_ipe: bool,
    /// Drop the PE branch (IPE-only encoding).
    #[arg(long)]
    ablate_pe: bool,
    #[arg(long)]
    ablate_zeta: bool,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Pause (checkpoint and exit 0) once this many iterations are done.
    #[arg(long)]
    stop_at: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory for the per-receiver and per-path CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Receiver position x,y,z.
    #[arg(long)]
    rx: String,
    /// Direction of arrival θ,φ[,ζ] in radians; repeat per ray.
    #[arg(long = "doa", allow_hyphen_values = true)]
    doas: Vec<String>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, default_value = "scene-a")]
    preset: String,
    /// Room size LxWxH overriding the preset.
    #[arg(long)]
    room: Option<String>,
    #[arg(long)]
    origin: String,
    #[arg(long, allow_hyphen_values = true)]
    theta: f64,
    #[arg(long, allow_hyphen_values = true)]
    phi: f64,
    #[arg(long)]
    t_lo: f64,
    #[arg(long)]
    t_hi: f64,
    #[arg(long, default_value_t = sampling::DEFAULT_CONE_RATIO)]
    cone_ratio: f64,
    #[arg(long, default_value_t = encoding::DEFAULT_D_MIN)]
    d_min: f64,
}

#[derive(Args)]
struct FresnelArgs {
    #[arg(long)]
    material: String,
    /// Incidence-side medium.
    #[arg(long, default_value = "air")]
    from: String,
    #[arg(long)]
    fc: f64,
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    #[arg(long, default_value_t = 89.9)]
    max: f64,
    /// Write `fresnel.csv` into this directory instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, exec),
        Command::Train(a) => train(a, exec),
        Command::Eval(a) => eval(a, exec),
        Command::Predict(a) => predict(a, exec),
        Command::InspectEncoding(a) => inspect_encoding(a),
        Command::FresnelTable(a) => fresnel_table(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<wrf_core::Error>() {
            return match core {
                wrf_core::Error::Io(_) | wrf_core::Error::Format { .. } => EXIT_IO,
                wrf_core::Error::NonFinite(_) | wrf_core::Error::Degenerate(_) => EXIT_NUMERIC,
                _ => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

fn parse_floats(s: &str, seps: &[char], n: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(|c| seps.contains(&c))
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("malformed {what} {s:?}")))?;
    if v.len() != n || v.iter().any(|x| !x.is_finite()) {
        return Err(usage(format!("{what} {s:?} must have {n} finite numbers")));
    }
    Ok(v)
}

fn parse_vec3(s: &str, what: &str) -> Result<[f64; 3]> {
    let v = parse_floats(s, &[',', 'x', 'X'], 3, what)?;
    Ok([v[0], v[1], v[2]])
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(wrf_core::Error::InvalidArgument(msg.into()))
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn gen_data(a: GenDataArgs, exec: Execution) -> Result<u8> {
    let preset = scene_preset(&a.preset)?;
    let dims = match &a.room {
        Some(r) => parse_vec3(r, "room")?,
        None => preset.room,
    };
    let tx = match &a.tx {
        Some(t) => parse_vec3(t, "tx")?,
        None => preset.tx,
    };
    let material = a.material.clone().unwrap_or_else(|| preset.material.to_string());
    let fc = a.fc.unwrap_or(preset.carrier);
    let room = dataset::builtin_room(dims, &material, fc)?;
    let mut cfg = preset.generation(a.seed);
    cfg.n_receivers = a.n.unwrap_or(preset.n_receivers);
    cfg.sample.max_order = a.max_order;
    cfg.sample.negatives = a.negatives.unwrap_or(preset.negatives);
    if !room.contains_strictly(tx) {
        return Err(usage(format!("transmitter {tx:?} is not inside the room {dims:?}")));
    }
    let ds = dataset::generate_dataset(&room, tx, &cfg, exec)?;

    create_out_dir(&a.out)?;
    ds.save(&a.out.join(DATASET_FILE))?;
    let counts = |s: Split| ds.indices(s).len();
    let n_paths: usize = ds.samples.iter().map(|s| s.paths.len()).sum();
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "tool_version": env!("CARGO_PKG_VERSION"),
        "dataset_format_version": dataset::FORMAT_VERSION,
        "dataset_file": DATASET_FILE,
        "preset": a.preset,
        "seed": a.seed,
        "room": dims,
        "tx": tx,
        "material": material,
        "fc": fc,
        "n_receivers": cfg.n_receivers,
        "max_order": cfg.sample.max_order,
        "negatives": cfg.sample.negatives,
        "generation": cfg,
        "wall_materials": room.wall_materials,
        "counts": {
            "train": counts(Split::Train),
            "val": counts(Split::Val),
            "test": counts(Split::Test),
            "paths": n_paths,
        },
    });
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(a.out.join(MANIFEST_FILE), text)?;
    if a.paths_csv {
        fs::write(a.out.join(PATHS_FILE), ds.paths_csv())?;
    }
    println!(
        "wrote {} receivers ({} paths) to {}",
        ds.samples.len(),
        n_paths,
        a.out.join(DATASET_FILE).display()
    );
    Ok(0)
}

fn resolve_train_config(a: &TrainArgs, from_checkpoint: Option<&RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&a.config, from_checkpoint) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(c)) => c.clone(),
        (None, None) => RunConfig::preset(&a.preset)?,
    };
    if let Some(s) = a.seed {
        cfg.trainer.seed = s;
    }
    if a.ablate_scale_consistent {
        cfg.ablation.scale_consistent = false;
    }
    if a.ablate_ipe {
        cfg.ablation.use_ipe = false;
    }
    if a.ablate_pe {
        cfg.ablation.use_pe = false;
    }
    if a.ablate_zeta {
        cfg.ablation.zeta_compensation = false;
    }
    if let Some(d) = &a.dataset {
        cfg.paths.dataset = d.display().to_string();
    }
    if let Some(o) = &a.out {
        cfg.paths.out = o.display().to_string();
    }
    if cfg.paths.dataset.is_empty() {
        return Err(usage("no dataset given (--dataset or paths.dataset)"));
    }
    if cfg.paths.out.is_empty() {
        return Err(usage("no output directory given (--out or paths.out)"));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs, exec: Execution) -> Result<u8> {
    let resumed = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let cfg = resolve_train_config(&a, resumed.as_ref().map(|c| &c.config))?;
    let ds = Dataset::load(Path::new(&cfg.paths.dataset))
        .with_context(|| format!("loading dataset {}", cfg.paths.dataset))?;
    let out = PathBuf::from(&cfg.paths.out);
    create_out_dir(&out)?;
    let mut t = match resumed {
        Some(ck) => Trainer::with_state(&ds, cfg.clone(), ck.state, exec)?,
        None => Trainer::new(&ds, cfg.clone(), exec)?,
    };
    fs::write(out.join(CONFIG_ECHO_FILE), cfg.to_toml_string()?)?;

    // The log is rewritten from the checkpoint's rows, then appended to.
    let mut log = BufWriter::new(File::create(out.join(LOG_FILE))?);
    log.write_all(trainer::log_csv_preamble(&t.flags()).as_bytes())?;
    for r in &t.state.log {
        writeln!(log, "{}", r.csv_line())?;
    }
    log.flush()?;

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst)).context("installing Ctrl-C handler")?;
    }
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut on_log = |r: &LogRow| -> wrf_core::Result<()> {
        writeln!(log, "{}", r.csv_line())?;
        log.flush()?;
        if let Some(v) = r.val_db {
            eprintln!(
                "iter {} train_loss_db {:.3} val_db {:.3} lr {:.3e} blocks {}",
                r.iteration,
                r.train_loss_db.unwrap_or(f64::NAN),
                v,
                r.lr,
                r.active_blocks
            );
        }
        Ok(())
    };
    let mut on_checkpoint = |t: &Trainer| Checkpoint::from_trainer(t).save(&ckpt_path);
    let reason = t.run(RunHooks {
        stop_at: a.stop_at,
        interrupt: Some(&stop),
        on_log: Some(&mut on_log),
        on_checkpoint: Some(&mut on_checkpoint),
    });
    // Whatever happened, keep the latest state.
    let mut final_state = Checkpoint::from_trainer(&t);
    final_state.state.elapsed = t.wall_time();
    final_state.save(&ckpt_path)?;
    let reason = reason?;
    let best = t.state.history.best_db.map(|b| format!("{b:.4}")).unwrap_or_else(|| "none".into());
    println!(
        "stop={reason:?} iterations={} best_val_db={best} checkpoint={}",
        t.state.iteration,
        ckpt_path.display()
    );
    Ok(match reason {
        StopReason::Converged | StopReason::Paused => 0,
        StopReason::IterationCap => EXIT_CAP,
        StopReason::Interrupted => EXIT_INTERRUPTED,
    })
}

fn eval(a: EvalArgs, exec: Execution) -> Result<u8> {
    let split: Split = a.split.parse().map_err(|e: wrf_core::Error| anyhow!(e))?;
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let ds = Dataset::load(&a.dataset).with_context(|| format!("loading dataset {}", a.dataset.display()))?;
    let settings = ck.config.render_settings(&ds.room)?;
    let idx = ds.indices(split);
    let report = trainer::evaluate(ck.mlp(), &settings, &ds, split, &idx, ck.config.trainer.seed, exec)?;
    if let Some(out) = &a.out {
        create_out_dir(out)?;
        fs::write(out.join(format!("eval_{}_receivers.csv", split.name())), report.receivers_csv())?;
        fs::write(out.join(format!("eval_{}_paths.csv", split.name())), report.paths_csv())?;
    }
    println!("{}", report.summary());
    Ok(0)
}

fn predict(a: PredictArgs, exec: Execution) -> Result<u8> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let rx = parse_vec3(&a.rx, "receiver position")?;
    let mut doas = Vec::with_capacity(a.doas.len());
    for d in &a.doas {
        let v = d
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| usage(format!("malformed DoA {d:?}")))?;
        let (theta, phi, zeta) = match v[..] {
            [t, p] => (t, p, 1.0),
            [t, p, z] => (t, p, z),
            _ => return Err(usage(format!("DoA {d:?} must be θ,φ or θ,φ,ζ"))),
        };
        if !(theta.is_finite() && phi.is_finite() && (0.0..=1.0).contains(&zeta)) {
            return Err(usage(format!("DoA {d:?} out of range")));
        }
        doas.push((theta, phi, zeta));
    }
    let settings = ck.render_settings()?;
    let rays = trainer::receiver_rays(rx, &doas, ck.config.trainer.seed);
    let renders = pipeline::render_rays(ck.mlp(), &settings, &rays, exec)?;
    let h: Complex64 = renders.iter().map(|r| r.h_fine).sum();
    let depth = |d: Option<f64>| d.map(|x| x.to_string()).unwrap_or_default();
    match a.format {
        Format::Csv => {
            println!("ray,theta,phi,zeta,re,im,abs,peak_depth");
            for (k, (r, q)) in renders.iter().zip(&rays).enumerate() {
                println!(
                    "{k},{},{},{},{},{},{},{}",
                    q.theta,
                    q.phi,
                    q.zeta,
                    r.h_fine.re,
                    r.h_fine.im,
                    r.h_fine.norm(),
                    depth(r.peak_depth())
                );
            }
            println!("total,,,,{},{},{},", h.re, h.im, h.norm());
        }
        Format::Text => {
            println!("cfr {:+.9e} {:+.9e}j |H| {:.9e}", h.re, h.im, h.norm());
            for (k, (r, q)) in renders.iter().zip(&rays).enumerate() {
                println!(
                    "ray {k} theta {:.6} phi {:.6} zeta {:.6} |h| {:.6e} peak_depth {}",
                    q.theta,
                    q.phi,
                    q.zeta,
                    r.h_fine.norm(),
                    depth(r.peak_depth())
                );
            }
        }
    }
    Ok(0)
}

fn inspect_encoding(a: InspectArgs) -> Result<u8> {
    let dims = match &a.room {
        Some(r) => parse_vec3(r, "room")?,
        None => scene_preset(&a.preset)?.room,
    };
    let origin = parse_vec3(&a.origin, "origin")?;
    let bounds = SceneBounds::new([0.0; 3], dims)?;
    let cfg = encoding::make_encoding_config(&bounds, a.d_min)?;
    let ray = Ray::from_angles(origin, a.theta, a.phi, a.cone_ratio)?;
    let g = sampling::frustum_gaussian(&ray, a.t_lo, a.t_hi)?;
    let ipe = encoding::ipe_scale_consistent(&g, &cfg);
    let mut out = String::from("axis,level,normalized_mu,pe_sin,pe_cos,ipe_sin,ipe_cos\n");
    let mut pos = 0;
    for (axis, name) in ["x", "y", "z"].iter().enumerate() {
        let mu = cfg.normalize(g.mu[axis], axis);
        let pe = encoding::pe_scale_consistent(mu, cfg.levels[axis]);
        for l in 0..cfg.levels[axis] {
            out.push_str(&format!(
                "{name},{l},{mu},{},{},{},{}\n",
                pe[2 * l],
                pe[2 * l + 1],
                ipe[pos + 2 * l],
                ipe[pos + 2 * l + 1]
            ));
        }
        pos += 2 * cfg.levels[axis];
    }
    print!("{out}");
    Ok(0)
}

fn material_at(name: &str, fc: f64) -> Result<Material> {
    physics::builtin_material(name, fc).ok_or_else(|| usage(format!("unknown material {name:?}")))
}

fn fresnel_table(a: FresnelArgs) -> Result<u8> {
    let from = material_at(&a.from, a.fc)?;
    let to = material_at(&a.material, a.fc)?;
    let rows = physics::fresnel_sweep(&from, &to, a.fc, a.step, a.max)?;
    let csv = physics::fresnel_csv(&rows);
    match &a.out {
        Some(dir) => {
            create_out_dir(dir)?;
            fs::write(dir.join("fresnel.csv"), csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_parsing() {
        assert_eq!(parse_vec3("8x5x3", "room").unwrap(), [8.0, 5.0, 3.0]);
        assert_eq!(parse_vec3("2,1.5,2", "tx").unwrap(), [2.0, 1.5, 2.0]);
        assert!(parse_vec3("1,2", "tx").is_err());
        assert!(parse_vec3("a,b,c", "tx").is_err());
        assert_eq!(exit_code(&parse_vec3("1,2", "tx").unwrap_err()), EXIT_USAGE);
    }

    #[test]
    fn error_codes() {
        let io = anyhow::Error::new(wrf_core::Error::Io(std::io::Error::other("x")));
        assert_eq!(exit_code(&io), EXIT_IO);
        let nf = anyhow::Error::new(wrf_core::Error::NonFinite("x".into()));
        assert_eq!(exit_code(&nf), EXIT_NUMERIC);
        assert_eq!(exit_code(&nf.context("wrapped")), EXIT_NUMERIC);
    }
}
