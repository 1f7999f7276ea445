//! Structured run configuration shared by every CLI subcommand.
//!
//! One JSON file carries all sections; each subcommand reads the parts it
//! needs. `--seed`, `--out-dir` and `--threads` override the file, and the
//! fully resolved snapshot is written to `config.lock` in the output
//! directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ComparisonEntry, DataPolicy, TrainSchedule, TrainSettings, Variant};
use crate::mint::MintConfig;
use crate::phantom::PhantomConfig;
use crate::synthgen::GanTrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    /// 0 lets rayon pick the thread count.
    pub threads: usize,
    pub k_folds: usize,
    /// Manifest of an existing cohort (takes precedence over `phantom`
    /// when both could apply).
    pub cohort_manifest: Option<String>,
    pub phantom: PhantomConfig,
    pub gan: GanTrainConfig,
    pub schedule: TrainSchedule,
    pub mint: MintConfig,
    /// Apply slice-wise CLAHE to synthetic PET before training/testing.
    pub clahe: bool,
    pub clahe_tiles: (usize, usize),
    pub clahe_clip: f32,
    pub clahe_bins: usize,
    /// Variant/policy for single-model subcommands (`train-clf`,
    /// `evaluate`).
    pub variant: String,
    pub train_policy: String,
    pub test_policy: String,
    /// Comparison grid for `compare`.
    pub entries: Vec<EntryConfig>,
    /// Synthetic-share percentages for `sweep`.
    pub ratios: Vec<u8>,
    pub generator_checkpoint: Option<String>,
    /// Label attached to rows in metrics.csv.
    pub experiment: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryConfig {
    pub name: String,
    pub variant: String,
    pub train_policy: String,
    pub test_policy: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: "runs/out".into(),
            threads: 0,
            k_folds: 5,
            cohort_manifest: None,
            phantom: PhantomConfig::default(),
            gan: GanTrainConfig::default(),
            schedule: TrainSchedule::default(),
            mint: MintConfig::default(),
            clahe: false,
            clahe_tiles: (8, 8),
            clahe_clip: 2.0,
            clahe_bins: 256,
            variant: "mint".into(),
            train_policy: "real_pet".into(),
            test_policy: "real_pet".into(),
            entries: Vec::new(),
            ratios: vec![0, 20, 40, 60, 80, 100],
            generator_checkpoint: None,
            experiment: "experiment".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| format!("malformed config {}: {e}", path.display()))
    }

    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        out_dir: Option<String>,
        threads: Option<usize>,
    ) {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(d) = out_dir {
            self.out_dir = d;
        }
        if let Some(t) = threads {
            self.threads = t;
        }
    }

    /// Resolved snapshot for `config.lock` (stable field order).
    pub fn lock_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            schedule: self.schedule.clone(),
            mint: self.mint,
            clahe: self.clahe,
            clahe_tiles: self.clahe_tiles,
            clahe_clip: self.clahe_clip,
            clahe_bins: self.clahe_bins,
        }
    }

    pub fn parse_variant(&self) -> Result<Variant, String> {
        Variant::parse(&self.variant).ok_or_else(|| format!("unknown variant {:?}", self.variant))
    }

    pub fn parse_policy(&self, s: &str) -> Result<DataPolicy, String> {
        DataPolicy::parse(s).ok_or_else(|| {
            format!("unknown data policy {s:?} (real_pet|synth_pet|none|mixed:<0-100>)")
        })
    }

    pub fn comparison_entries(&self) -> Result<Vec<ComparisonEntry>, String> {
        if self.entries.is_empty() {
            return Err("compare needs at least two entries in the config".into());
        }
        self.entries
            .iter()
            .map(|e| {
                Ok(ComparisonEntry {
                    name: e.name.clone(),
                    variant: Variant::parse(&e.variant)
                        .ok_or_else(|| format!("entry {}: unknown variant {}", e.name, e.variant))?,
                    train_policy: self.parse_policy(&e.train_policy)?,
                    test_policy: self.parse_policy(&e.test_policy)?,
                })
            })
            .collect()
    }
}

/// Install the global rayon pool when a thread count is requested.
/// Results are bitwise independent of the pool size; this only controls
/// resource usage.
pub fn resolve_threads(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}
