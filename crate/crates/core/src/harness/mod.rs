//! Experiment runner: seeded sweeps over presets, one CSV table per
//! experiment and a JSON manifest per run.

mod exec;
mod experiments;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use exec::{map_seeds, Executor};
pub use experiments::*;

use crate::config::{preset, Config, DefenseKind, PolicyKind, Regime};
use crate::error::{ConfigError, HarnessError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExperimentId {
    E1,
    E2,
    E3,
    E4,
    E5,
    E6,
    E7,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 7] =
        [ExperimentId::E1, ExperimentId::E2, ExperimentId::E3, ExperimentId::E4, ExperimentId::E5, ExperimentId::E6, ExperimentId::E7];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::E1 => "E1",
            ExperimentId::E2 => "E2",
            ExperimentId::E3 => "E3",
            ExperimentId::E4 => "E4",
            ExperimentId::E5 => "E5",
            ExperimentId::E6 => "E6",
            ExperimentId::E7 => "E7",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name().eq_ignore_ascii_case(s))
    }

    /// Stem of the main CSV file.
    pub fn stem(self) -> &'static str {
        match self {
            ExperimentId::E1 => "e1_tlb_miss",
            ExperimentId::E2 => "e2_llc_evict",
            ExperimentId::E3 => "e3_selection",
            ExperimentId::E4 => "e4_pairs",
            ExperimentId::E5 => "e5_padding",
            ExperimentId::E6 => "e6_escalation",
            ExperimentId::E7 => "e7_defenses",
        }
    }

    pub fn default_reps(self) -> u32 {
        match self {
            ExperimentId::E1 => 10,
            ExperimentId::E2 => 5,
            ExperimentId::E3 => 5,
            ExperimentId::E4 => 4,
            ExperimentId::E5 => 5,
            ExperimentId::E6 | ExperimentId::E7 => 20,
        }
    }
}

/// Sweep parameters; unset fields take per-experiment defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    /// E1/E2 eviction-set sizes.
    pub sizes: Option<Vec<u32>>,
    /// E1/E2 trials per size.
    pub trials: Option<u32>,
    /// E2 LLC policies; `None` entries stand for the preset's own policy.
    pub policies: Option<Vec<Option<PolicyKind>>>,
    /// E3 selection targets per seed.
    pub targets: Option<u32>,
    /// E4 candidate pairs per seed.
    pub candidates: Option<u32>,
    /// E5 per-round padding cycles.
    pub paddings: Option<Vec<u64>>,
    /// E7 credential-spray processes used against CTA.
    pub cred_spray: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment: ExperimentId,
    pub preset: String,
    #[serde(default)]
    pub defense: Option<DefenseKind>,
    #[serde(default)]
    pub regime: Option<Regime>,
    #[serde(default)]
    pub sweep: Sweep,
    pub reps: u32,
    /// First seed; repetitions use consecutive seeds.
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn new(experiment: ExperimentId, preset: &str) -> Self {
        ExperimentSpec {
            experiment,
            preset: preset.into(),
            defense: None,
            regime: None,
            sweep: Sweep::default(),
            reps: experiment.default_reps(),
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if preset(&self.preset).is_none() {
            return Err(ConfigError::Invalid { path: "preset".into(), msg: format!("unknown preset `{}`", self.preset) });
        }
        if self.reps == 0 {
            return Err(ConfigError::Invalid { path: "reps".into(), msg: "must be positive".into() });
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.reps as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    /// `base` with this spec's defense and regime applied.
    pub fn apply(&self, base: &Config) -> Config {
        let mut cfg = base.clone();
        if let Some(d) = self.defense {
            cfg.machine.os.defense.kind = d;
        }
        if let Some(r) = self.regime {
            cfg.attack.regime = r;
        }
        cfg
    }
}

/// One CSV file's contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub csv: String,
    pub rows: usize,
}

/// Row types with a fixed column list.
pub trait Row: Serialize {
    const HEADER: &'static [&'static str];
}

impl Table {
    pub fn from_rows<R: Row>(name: &str, rows: &[R]) -> Result<Table, HarnessError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        let csv_err = |e: csv::Error| HarnessError::Runtime(format!("csv: {e}"));
        w.write_record(R::HEADER).map_err(csv_err)?;
        for r in rows {
            w.serialize(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Runtime(format!("csv: {e}")))?;
        Ok(Table { name: name.into(), csv: String::from_utf8(bytes).expect("csv is utf-8"), rows: rows.len() })
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub spec: ExperimentSpec,
    pub config_hash: String,
    pub tables: Vec<Table>,
    /// Named JSON documents (event logs).
    pub documents: Vec<(String, serde_json::Value)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub file: String,
    pub experiment: ExperimentId,
    pub rows: Option<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub experiment: ExperimentId,
    pub preset: String,
    pub defense: Option<DefenseKind>,
    pub regime: Option<Regime>,
    pub seed: u64,
    pub reps: u32,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    /// Hash of the base configuration, before per-run overrides.
    pub config_hash: String,
    pub seed: u64,
    pub runs: Vec<ManifestRun>,
    pub files: Vec<ManifestFile>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// git-describe style version of this build.
pub fn version_string() -> String {
    match option_env!("WALKHAMMER_DESCRIBE") {
        Some(d) if !d.is_empty() => d.to_string(),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes every table and document of `outputs` into `dir` plus a manifest
/// naming each file.
pub fn emit_report(dir: &Path, base: &Config, seed: u64, outputs: &[ExperimentOutput]) -> Result<Manifest, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut runs = Vec::new();
    for out in outputs {
        let s = &out.spec;
        runs.push(ManifestRun {
            experiment: s.experiment,
            preset: s.preset.clone(),
            defense: s.defense,
            regime: s.regime,
            seed: s.seed,
            reps: s.reps,
            config_hash: out.config_hash.clone(),
        });
        for t in &out.tables {
            let name = t.file_name();
            std::fs::write(dir.join(&name), &t.csv)?;
            files.push(ManifestFile { file: name, experiment: s.experiment, rows: Some(t.rows), sha256: sha256_hex(t.csv.as_bytes()) });
        }
        for (name, doc) in &out.documents {
            let text = serde_json::to_string_pretty(doc).expect("json value");
            let name = format!("{name}.json");
            std::fs::write(dir.join(&name), &text)?;
            files.push(ManifestFile { file: name, experiment: s.experiment, rows: None, sha256: sha256_hex(text.as_bytes()) });
        }
    }
    let m = Manifest { tool: "walkhammer".into(), version: version_string(), config_hash: base.hash(), seed, runs, files };
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    std::fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(m)
}
