//! Training checkpoints.
//!
//! A checkpoint holds the run config, the room (so prediction works without
//! the dataset), every piece of trainer state and the optimizer moments. The
//! JSON header carries scalars and logs; the body carries the parameter,
//! first-moment and second-moment vectors as little-endian f64. Floats
//! round-trip bit-exactly, which is what makes resume exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::container::{self, Reader, Writer};
use crate::dataset::Room;
use crate::network::{Architecture, Mlp};
use crate::optim::{AdamConfig, Optimizer, PlateauConfig, PlateauScheduler};
use crate::pipeline::RenderSettings;
use crate::trainer::{CurriculumState, LogRow, Trainer, TrainerState, ValidationHistory};
use crate::Result;

pub const FORMAT_VERSION: u32 = 1;

const SPEC: container::Spec = container::Spec {
    kind: "checkpoint",
    magic: *b"WRFCKPT\0",
    version: FORMAT_VERSION,
};

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    room: Room,
    architecture: Architecture,
    iteration: u64,
    elapsed: f64,
    adam: AdamConfig,
    lr: f64,
    step: u64,
    skipped_steps: u64,
    plateau: PlateauConfig,
    /// `None` while the scheduler has seen no metric.
    plateau_best: Option<f64>,
    plateau_bad_evals: u32,
    plateau_reductions: u32,
    curriculum: CurriculumState,
    history: ValidationHistory,
    log: Vec<LogRow>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub room: Room,
    pub state: TrainerState,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            config: t.config.clone(),
            room: t.dataset.room.clone(),
            state: t.state.clone(),
        }
    }

    pub fn render_settings(&self) -> Result<RenderSettings> {
        self.config.render_settings(&self.room)
    }

    pub fn mlp(&self) -> &Mlp {
        &self.state.mlp
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let st = &self.state;
        let opt = &st.optimizer;
        let sched = &opt.scheduler;
        let header = Header {
            config: self.config.clone(),
            room: self.room.clone(),
            architecture: *st.mlp.architecture(),
            iteration: st.iteration,
            elapsed: st.elapsed,
            adam: opt.config,
            lr: opt.lr,
            step: opt.step,
            skipped_steps: opt.skipped_steps,
            plateau: sched.config,
            plateau_best: sched.best.is_finite().then_some(sched.best),
            plateau_bad_evals: sched.bad_evals,
            plateau_reductions: sched.reductions,
            curriculum: st.curriculum,
            history: st.history.clone(),
            log: st.log.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| SPEC.header_error(e))?;
        let mut w = Writer::default();
        w.u64(st.mlp.param_count() as u64);
        w.f64s(st.mlp.params());
        w.f64s(&opt.m);
        w.f64s(&opt.v);
        Ok(SPEC.encode(&header, &w.buf))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let (h, body) = SPEC.decode(bytes)?;
        let h: Header = serde_json::from_slice(h).map_err(|e| SPEC.header_error(e))?;
        h.architecture.validate().map_err(|e| SPEC.header_error(e))?;
        let expected = Mlp::count_for(&h.architecture);
        let mut r = Reader::new(body);
        let n = r.u64().map_err(|e| SPEC.body_error(e))? as usize;
        if n != expected {
            return Err(SPEC.body_error(format!(
                "parameter count {n} does not match architecture ({expected})"
            )));
        }
        let params = r.f64s(n).map_err(|e| SPEC.body_error(e))?;
        let m = r.f64s(n).map_err(|e| SPEC.body_error(e))?;
        let v = r.f64s(n).map_err(|e| SPEC.body_error(e))?;
        if !r.finished() {
            return Err(SPEC.body_error("trailing bytes in body"));
        }
        let mut mlp = Mlp::new(h.architecture, 0)?;
        mlp.set_params(&params)?;
        let optimizer = Optimizer {
            config: h.adam,
            lr: h.lr,
            step: h.step,
            m,
            v,
            scheduler: PlateauScheduler {
                config: h.plateau,
                best: h.plateau_best.unwrap_or(f64::INFINITY),
                bad_evals: h.plateau_bad_evals,
                reductions: h.plateau_reductions,
            },
            skipped_steps: h.skipped_steps,
        };
        Ok(Checkpoint {
            config: h.config,
            room: h.room,
            state: TrainerState {
                mlp,
                optimizer,
                curriculum: h.curriculum,
                history: h.history,
                log: h.log,
                iteration: h.iteration,
                elapsed: h.elapsed,
            },
        })
    }

    /// Writes via a temporary sibling and a rename, so an interrupted save
    /// never leaves a torn file behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}
