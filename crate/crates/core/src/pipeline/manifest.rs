//! Stage completion markers, artifact lists and timings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::Stage;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    /// Fingerprint of the config keys the stage depends on.
    pub hash: String,
    pub seconds: f64,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub config_hash: String,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config = config.txt");
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        for (stage, rec) in &self.stages {
            let _ = writeln!(s, "\nstage = {stage}");
            let _ = writeln!(s, "hash = {}", rec.hash);
            let _ = writeln!(s, "seconds = {:.3}", rec.seconds);
            for a in &rec.artifacts {
                let _ = writeln!(s, "artifact = {a}");
            }
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut m = Manifest::default();
        let mut current: Option<Stage> = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once(" = ").ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            match (k, current) {
                ("config", _) => {}
                ("config_hash", _) => m.config_hash = v.to_string(),
                ("stage", _) => {
                    let s = Stage::from_name(v).map_err(|_| bad(format!("unknown stage `{v}`")))?;
                    m.stages.insert(
                        s,
                        StageRecord {
                            hash: String::new(),
                            seconds: 0.0,
                            artifacts: Vec::new(),
                        },
                    );
                    current = Some(s);
                }
                (_, None) => return Err(bad(format!("`{k}` outside a stage block"))),
                ("hash", Some(s)) => m.stages.get_mut(&s).expect("inserted").hash = v.to_string(),
                ("seconds", Some(s)) => {
                    m.stages.get_mut(&s).expect("inserted").seconds = v.parse().map_err(|_| bad(format!("bad seconds `{v}`")))?
                }
                ("artifact", Some(s)) => m.stages.get_mut(&s).expect("inserted").artifacts.push(v.to_string()),
                _ => return Err(bad(format!("unknown key `{k}`"))),
            }
        }
        Ok(m)
    }

    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::parse(&std::fs::read_to_string(path)?, path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Every path the manifest accounts for, including itself and the
    /// stored config.
    pub fn all_paths(&self) -> Vec<String> {
        let mut out = vec![MANIFEST_FILE.to_string(), "config.txt".into(), "config.sha256".into()];
        for r in self.stages.values() {
            out.extend(r.artifacts.iter().cloned());
        }
        out
    }
}
