use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{checkpoint, TrainConfig, TrainState};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::networks::Model;
use crate::translator;

/// Receives training progress. All methods default to doing nothing.
pub trait TrainSink {
    /// Called once before the first step, with the initial or resumed state.
    fn start(&mut self, _state: &TrainState, _cfg: &TrainConfig, _data: &Dataset) -> Result<()> {
        Ok(())
    }

    /// Called after every step; `state.step` counts the finished step.
    fn step(&mut self, _state: &TrainState, _cfg: &TrainConfig, _data: &Dataset, _report: &LossReport) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _state: &TrainState, _cfg: &TrainConfig) -> Result<()> {
        Ok(())
    }
}

pub struct NullSink;

impl TrainSink for NullSink {}

/// Keeps serialised checkpoints in memory.
#[derive(Default)]
pub struct MemorySink {
    /// `(step, archive bytes)` in the order written.
    pub checkpoints: Vec<(u64, Vec<u8>)>,
}

impl TrainSink for MemorySink {
    fn checkpoint(&mut self, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
        self.checkpoints.push((state.step, checkpoint::to_bytes(state, cfg)?));
        Ok(())
    }
}

/// Writes a run directory: `losses.jsonl`, `checkpoints/step_N.safetensors`
/// and `grids/grid_stepN_route.png`.
pub struct RunDirSink {
    dir: PathBuf,
    losses: Option<BufWriter<File>>,
}

pub const LOSSES_FILE: &str = "losses.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const GRID_DIR: &str = "grids";

impl RunDirSink {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into(), losses: None }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_DIR)
    }

    /// Keeps the records of steps before `step` and drops the rest, so a
    /// resumed run does not duplicate lines.
    fn truncate_losses(path: &Path, step: u64) -> Result<Vec<String>> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(path, e)),
        };
        let mut kept = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let r: LossReport =
                serde_json::from_str(&line).map_err(|e| Error::format(path, format!("bad loss record: {e}")))?;
            if r.step < step {
                kept.push(line);
            }
        }
        Ok(kept)
    }
}

impl TrainSink for RunDirSink {
    fn start(&mut self, state: &TrainState, cfg: &TrainConfig, data: &Dataset) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.dir.join(LOSSES_FILE);
        let kept = if state.step > 0 { Self::truncate_losses(&path, state.step)? } else { Vec::new() };
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for line in kept {
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        self.losses = Some(w);
        if cfg.grid_every > 0 && state.step == 0 {
            let model = Model::new(cfg.net.clone(), state.params.clone());
            translator::write_training_grids(&self.dir.join(GRID_DIR), 0, &model, data)?;
        }
        Ok(())
    }

    fn step(&mut self, state: &TrainState, cfg: &TrainConfig, data: &Dataset, report: &LossReport) -> Result<()> {
        let path = self.dir.join(LOSSES_FILE);
        let w = self.losses.as_mut().expect("start is called first");
        writeln!(w, "{}", report.to_json_line()).map_err(|e| Error::io(&path, e))?;
        if cfg.grid_every > 0 && state.step.is_multiple_of(cfg.grid_every) {
            w.flush().map_err(|e| Error::io(&path, e))?;
            let model = Model::new(cfg.net.clone(), state.params.clone());
            translator::write_training_grids(&self.dir.join(GRID_DIR), state.step, &model, data)?;
        }
        Ok(())
    }

    fn checkpoint(&mut self, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
        if let Some(w) = self.losses.as_mut() {
            w.flush().map_err(|e| Error::io(self.dir.join(LOSSES_FILE), e))?;
        }
        let path = self.checkpoint_dir().join(checkpoint::file_name(state.step));
        checkpoint::save(&path, state, cfg).map_err(|e| match e {
            Error::Io { path, source } => Error::Io {
                path,
                source: std::io::Error::new(source.kind(), format!("checkpoint at step {}: {source}", state.step)),
            },
            other => other,
        })
    }
}
