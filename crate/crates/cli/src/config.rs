//! TOML run configuration. Every section has defaults, unknown keys are
//! rejected, and the global seed is copied into every seeded section when the
//! configuration is resolved.

use std::fs;
use std::path::{Path, PathBuf};

use dabs_core::acbs::AcbsConfig;
use dabs_core::controls::{RegionBands, StressParams};
use dabs_core::corpus::GenSpec;
use dabs_core::costbench::{CostProfile, TimingConfig, WorkloadSpec};
use dabs_core::dora::DoraConfig;
use dabs_core::encoder::EncoderConfig;
use dabs_core::objectives::AdamWConfig;
use dabs_core::{Ablation, Component, DabsError, LossWeights, ModelConfig, Result, TrainConfig};
use serde::{Deserialize, Serialize};

pub const RESOLVED_NAME: &str = "resolved-config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker count. Every command runs on one thread; values above 1 are
    /// accepted and recorded.
    pub threads: usize,
    /// Trained model directory for commands that read one.
    pub checkpoint: Option<PathBuf>,
    pub data: DataSection,
    pub generate: GenSpec,
    pub component: Component,
    pub ablations: Vec<Ablation>,
    pub encoder: EncoderConfig,
    pub dora: DoraConfig,
    pub acbs: AcbsConfig,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub workload: WorkloadSpec,
    pub timing: TimingConfig,
    pub bench: BenchSection,
    pub probes: ProbeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("dabs-out"),
            threads: 1,
            checkpoint: None,
            data: DataSection::default(),
            generate: GenSpec::default(),
            component: Component::Full,
            ablations: Vec::new(),
            encoder: EncoderConfig { d: 32, layers: 6, heads: 2, ffn_mult: 2, ..Default::default() },
            dora: DoraConfig::default(),
            acbs: AcbsConfig { heads: 2, ..Default::default() },
            loss: LossWeights::default(),
            train: TrainSection::default(),
            workload: WorkloadSpec { length_dist: vec![(24, 1.0)], ..Default::default() },
            timing: TimingConfig::default(),
            bench: BenchSection::default(),
            probes: ProbeSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// JSONL corpus.
    pub path: Option<PathBuf>,
    /// Separate test corpus; otherwise `path` is split.
    pub test: Option<PathBuf>,
    /// Held-out fraction when no separate test file is given.
    pub test_fraction: f64,
    pub split_seed: u64,
    pub min_count: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { path: None, test: None, test_fraction: 0.2, split_seed: 0, min_count: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub clip: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { epochs: t.epochs, batch_size: t.batch_size, optimizer: t.optimizer, clip: t.clip }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Simulated,
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub mode: BenchMode,
    pub m_values: Vec<usize>,
    /// Cost profile for simulated mode; analytic FLOPs of the model when absent.
    pub profile: Option<CostProfile>,
    pub nonreuse_pays_dora: bool,
    /// Sentences used to measure the stage profile.
    pub profile_sentences: usize,
    /// Converts a FLOPs profile to service seconds for the simulated queue.
    pub flops_per_second: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            mode: BenchMode::Simulated,
            m_values: (1..=16).collect(),
            profile: None,
            nonreuse_pays_dora: false,
            profile_sentences: 16,
            flops_per_second: 1e9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub seeds: Vec<u64>,
    pub bands: Option<RegionBands>,
    pub rand2l_trials: usize,
    pub rand2l_seed: u64,
    pub stress: StressParams,
    pub shuffle_seed: u64,
    pub k_values: Vec<usize>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            bands: None,
            rand2l_trials: 20,
            rand2l_seed: 0,
            stress: StressParams::default(),
            shuffle_seed: 7,
            k_values: vec![2, 4, 6],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| DabsError::Input(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DabsError::Config(format!("cannot serialize config: {e}")))
    }

    /// Copies the global seed into the seeded sections and validates.
    pub fn resolve(mut self) -> Result<Self> {
        if self.threads == 0 {
            return Err(DabsError::Config("threads must be at least 1".into()));
        }
        self.generate.seed = self.seed;
        self.workload.seed = self.seed;
        self.generate.validate()?;
        self.loss.validate()?;
        self.train_config(self.seed).validate()?;
        Ok(self)
    }

    /// Model configuration after the component preset and ablations.
    pub fn model_config(&self, vocab_size: usize, seed: u64) -> (ModelConfig, LossWeights) {
        let mut cfg = ModelConfig {
            encoder: EncoderConfig { vocab_size, ..self.encoder.clone() },
            dora: self.dora.clone(),
            acbs: self.acbs.clone(),
            seed,
        };
        self.component.apply(&mut cfg);
        let mut weights = self.loss;
        for a in &self.ablations {
            a.apply(&mut cfg, &mut weights);
        }
        (cfg, weights)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            optimizer: self.train.optimizer,
            clip: self.train.clip,
            seed,
            loss: self.loss,
        }
    }

    /// Writes the resolved copy into the output directory.
    pub fn write_resolved(&self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join(RESOLVED_NAME), self.to_toml()?)?;
        Ok(())
    }
}
