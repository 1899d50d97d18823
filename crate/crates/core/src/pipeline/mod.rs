//! Staged, resumable, config-driven pipeline runs.
//!
//! A run directory holds the resolved config (`config.txt`, `config.sha256`),
//! a manifest of completed stages with their artifacts, and the artifacts
//! themselves. Every stage is deterministic given the config.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod stages;

use std::path::{Path, PathBuf};
use std::time::Instant;

pub use ablation::{ablation_suite, parse_axes, AblationAxis, AblationResult};
pub use config::{ContrastiveSetting, GuidanceMode, NegativeSource, RunConfig};
pub use manifest::{Manifest, StageRecord};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenData,
    Pretrain,
    Contrastive,
    TrainGen,
    Cotrain,
    Sample,
    Evaluate,
    Interpret,
    Report,
    Ablate,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::GenData,
        Stage::Pretrain,
        Stage::Contrastive,
        Stage::TrainGen,
        Stage::Cotrain,
        Stage::Sample,
        Stage::Evaluate,
        Stage::Interpret,
        Stage::Report,
        Stage::Ablate,
    ];

    /// The single-run pipeline in execution order.
    pub const PIPELINE: [Stage; 8] = [
        Stage::GenData,
        Stage::Pretrain,
        Stage::Contrastive,
        Stage::TrainGen,
        Stage::Cotrain,
        Stage::Sample,
        Stage::Evaluate,
        Stage::Interpret,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Pretrain => "pretrain",
            Stage::Contrastive => "contrastive",
            Stage::TrainGen => "train-gen",
            Stage::Cotrain => "cotrain",
            Stage::Sample => "sample",
            Stage::Evaluate => "evaluate",
            Stage::Interpret => "interpret",
            Stage::Report => "report",
            Stage::Ablate => "ablate",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }

    /// Stages whose markers must exist before this one starts.
    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::GenData | Stage::Ablate => &[],
            Stage::Pretrain | Stage::TrainGen => &[Stage::GenData],
            Stage::Contrastive => &[Stage::Pretrain],
            Stage::Cotrain => &[Stage::Contrastive, Stage::TrainGen],
            Stage::Sample | Stage::Interpret => &[Stage::Cotrain],
            Stage::Evaluate => &[Stage::Sample],
            Stage::Report => &[Stage::Evaluate, Stage::Interpret],
        }
    }

    /// Transitive prerequisites, in [`Stage::ALL`] order.
    pub fn upstream(self) -> Vec<Stage> {
        let mut out = Vec::new();
        let mut todo: Vec<Stage> = self.prerequisites().to_vec();
        while let Some(s) = todo.pop() {
            if !out.contains(&s) {
                out.push(s);
                todo.extend_from_slice(s.prerequisites());
            }
        }
        out.sort();
        out
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether a stage request did any work.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    /// Already complete under the same config.
    Skipped,
    /// Artifacts taken from another run with the same stage fingerprint.
    Reused,
}

pub struct Run {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub manifest: Manifest,
}

impl Run {
    /// Open (or create) a run directory and record the resolved config.
    pub fn open(dir: &Path, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest::load_or_default(&dir.join(manifest::MANIFEST_FILE))?;
        let mut run = Self {
            dir: dir.to_path_buf(),
            cfg,
            manifest,
        };
        std::fs::write(run.dir.join("config.txt"), run.cfg.to_text())?;
        std::fs::write(run.dir.join("config.sha256"), format!("{}\n", run.cfg.hash()))?;
        run.manifest.config_hash = run.cfg.hash();
        run.save_manifest()?;
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn save_manifest(&self) -> Result<()> {
        self.manifest.save(&self.dir.join(manifest::MANIFEST_FILE))
    }

    /// Whether `stage` is recorded as complete under the current config.
    pub fn is_current(&self, stage: Stage) -> bool {
        self.manifest
            .stages
            .get(&stage)
            .is_some_and(|r| r.hash == self.cfg.stage_hash(stage))
    }

    /// Check the prerequisites of `stage`. With `resume`, missing ones are
    /// run first; otherwise they are an error naming the missing stage.
    /// A prerequisite completed under a different config is always an error.
    fn ensure_prerequisites(&mut self, stage: Stage, resume: bool, donors: &[PathBuf]) -> Result<()> {
        for &p in stage.prerequisites() {
            match self.manifest.stages.get(&p) {
                None if resume => {
                    self.run_stage_with(p, true, donors)?;
                }
                None => {
                    return Err(Error::Prerequisite {
                        stage: stage.name().into(),
                        missing: p.name().into(),
                    })
                }
                Some(rec) if rec.hash != self.cfg.stage_hash(p) => {
                    return Err(Error::Config(format!(
                        "config hash mismatch on resume: stage `{p}` in {} was produced under a different config",
                        self.dir.display()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn run_stage(&mut self, stage: Stage, resume: bool) -> Result<Outcome> {
        self.run_stage_with(stage, resume, &[])
    }

    /// Run one stage. A stage already complete under the same config is a
    /// no-op. Before computing, `donors` (other run directories) are
    /// searched for the same stage fingerprint and their artifacts linked
    /// in instead.
    pub fn run_stage_with(&mut self, stage: Stage, resume: bool, donors: &[PathBuf]) -> Result<Outcome> {
        if stage == Stage::Ablate {
            return Err(Error::Config("the ablation suite runs through `ablation_suite`".into()));
        }
        self.ensure_prerequisites(stage, resume, donors)?;
        if self.is_current(stage) {
            return Ok(Outcome::Skipped);
        }
        self.invalidate(stage)?;
        let hash = self.cfg.stage_hash(stage);
        for d in donors {
            if let Some(rec) = Manifest::load_or_default(&d.join(manifest::MANIFEST_FILE))?.stages.get(&stage) {
                if rec.hash == hash {
                    for a in &rec.artifacts {
                        link_or_copy(&d.join(a), &self.dir.join(a))?;
                    }
                    self.manifest.stages.insert(stage, rec.clone());
                    self.save_manifest()?;
                    return Ok(Outcome::Reused);
                }
            }
        }
        let start = Instant::now();
        let artifacts = stages::execute(self, stage)?;
        self.record(stage, artifacts, start.elapsed().as_secs_f64())?;
        Ok(Outcome::Ran)
    }

    pub(crate) fn record(&mut self, stage: Stage, artifacts: Vec<String>, seconds: f64) -> Result<()> {
        self.manifest.stages.insert(
            stage,
            StageRecord {
                hash: self.cfg.stage_hash(stage),
                seconds,
                artifacts,
            },
        );
        self.save_manifest()
    }

    /// Drop the records and artifacts of `stage` and everything downstream.
    fn invalidate(&mut self, stage: Stage) -> Result<()> {
        let doomed: Vec<Stage> = self
            .manifest
            .stages
            .keys()
            .copied()
            .filter(|&s| s == stage || s.upstream().contains(&stage))
            .collect();
        for s in doomed {
            if let Some(rec) = self.manifest.stages.remove(&s) {
                for a in rec.artifacts {
                    let p = self.dir.join(&a);
                    if p.is_dir() {
                        std::fs::remove_dir_all(&p)?;
                    } else if p.exists() {
                        std::fs::remove_file(&p)?;
                    }
                }
            }
        }
        self.save_manifest()
    }

    /// Run the whole single-run pipeline.
    pub fn run_all(&mut self) -> Result<()> {
        for s in Stage::PIPELINE {
            self.run_stage(s, false)?;
        }
        Ok(())
    }
}

fn link_or_copy(from: &Path, to: &Path) -> Result<()> {
    if let Some(d) = to.parent() {
        std::fs::create_dir_all(d)?;
    }
    if to.exists() {
        std::fs::remove_file(to)?;
    }
    if std::fs::hard_link(from, to).is_err() {
        std::fs::copy(from, to)?;
    }
    Ok(())
}
