//! The run configuration file.
//!
//! TOML with one table per stage. Every table rejects unknown keys, and every
//! key has a default, so an empty file is a valid configuration.
//!
//! ```toml
//! [run]
//! arch = "lenet"
//! seed = 0
//!
//! [data]
//! name = "mnist"
//!
//! [search]
//! sparsity = 0.9
//! epochs = 30
//! warmup = "magnitude"
//!
//! [search.optimizer]
//! lr0 = 0.03
//!
//! [sweep]
//! sparsities = [0.5, 0.7, 0.9]
//! ```

use std::path::{Path, PathBuf};

use jackpot::criteria::{Criterion, CriterionConfig};
use jackpot::experiment::SuiteConfig;
use jackpot::nn::{Schedule, SgdConfig};
use jackpot::search::SearchConfig;
use jackpot::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataName {
    Mnist,
    Cifar10,
    /// Gaussian blobs; see the `synth_*` keys.
    Synth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub arch: String,
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub precision: Precision,
    /// Model checkpoint written by `pretrain` and read by later stages.
    /// Defaults to `<out-dir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Fill the `wall_clock_s` column. Breaks byte-identical reruns.
    pub timing: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { arch: "lenet".into(), seed: 0, precision: Precision::F32, checkpoint: None, timing: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub name: DataName,
    /// Dataset root; `--data-dir` and `JACKPOT_DATA_DIR` take precedence.
    pub dir: Option<PathBuf>,
    /// Stratified training subset size; 0 keeps everything. CIFAR-10
    /// defaults to 10000 when this is left unset.
    pub train_subset: Option<usize>,
    /// Training-time crop and flip; CIFAR-10 only.
    pub augment: bool,
    pub synth_classes: usize,
    pub synth_dim: usize,
    pub synth_per_class: usize,
    pub synth_test_per_class: usize,
    pub synth_separation: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            name: DataName::Mnist,
            dir: None,
            train_subset: None,
            augment: true,
            synth_classes: 4,
            synth_dim: 16,
            synth_per_class: 100,
            synth_test_per_class: 50,
            synth_separation: 3.0,
        }
    }
}

pub const CIFAR_DEFAULT_SUBSET: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    pub criterion: Criterion,
    pub sparsity: f64,
    pub options: CriterionConfig,
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection { criterion: Criterion::Magnitude, sparsity: 0.9, options: CriterionConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// When nonempty, `score` and `search` run once per listed sparsity
    /// instead of at their own `sparsity`.
    pub sparsities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub sparsity: f64,
    /// Mask file; defaults to the `search` output at `sparsity`.
    pub masks: Option<PathBuf>,
    pub optimizer: SgdConfig,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection { sparsity: 0.9, masks: None, optimizer: jackpot::experiment::default_finetune_optimizer() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub data: DataSection,
    pub pretrain: SgdConfig,
    pub score: ScoreSection,
    pub search: SearchConfig,
    pub sweep: SweepSection,
    pub finetune: FinetuneSection,
    pub experiment: SuiteConfig,
}

pub fn default_pretrain() -> SgdConfig {
    SgdConfig { lr0: 0.05, momentum: 0.9, weight_decay: 5e-4, epochs: 30, schedule: Schedule::Cosine, batch_size: 64 }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            run: RunSection::default(),
            data: DataSection::default(),
            pretrain: default_pretrain(),
            score: ScoreSection::default(),
            search: SearchConfig::default(),
            sweep: SweepSection::default(),
            finetune: FinetuneSection::default(),
            experiment: SuiteConfig::default(),
        }
    }
}

fn overlay(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => overlay(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Keys whose values are derived from `[run] seed` and may not be set directly.
const DERIVED_KEYS: [(&str, &str); 2] = [("search", "seed"), ("experiment.search", "seed")];

impl Config {
    /// Parses `text` layered over [`Config::default`]. A partially given
    /// table keeps the defaults of its stage for the keys it leaves out, so
    /// `[search.optimizer] lr0 = 0.1` keeps the search batch size and decay.
    pub fn parse(text: &str, origin: &str) -> Result<Config> {
        let err = |e: toml::de::Error| Error::Config(format!("{}: {}", origin, e.to_string().trim_end()));
        // strict pass over the raw text: unknown keys and bad types, with line numbers
        toml::from_str::<Config>(text).map_err(err)?;
        let raw: toml::Table = toml::from_str(text).map_err(err)?;
        for (table, key) in DERIVED_KEYS {
            let mut node = Some(&raw);
            for part in table.split('.') {
                node = node.and_then(|t| t.get(part)).and_then(toml::Value::as_table);
            }
            if node.is_some_and(|t| t.contains_key(key)) {
                return Err(Error::Config(format!("{}: [{}] {} is derived from [run] seed; set that (or --seed) instead", origin, table, key)));
            }
        }
        let mut merged = toml::Table::try_from(Config::default()).map_err(|e| Error::Config(e.to_string()))?;
        overlay(&mut merged, raw);
        let cfg: Config = toml::Value::Table(merged).try_into().map_err(err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.run.arch.parse::<jackpot::nn::Arch>()?;
        self.pretrain.validate()?;
        jackpot::masking::check_sparsity(self.score.sparsity)?;
        self.search.validate()?;
        for &p in &self.sweep.sparsities {
            jackpot::masking::check_sparsity(p)?;
        }
        jackpot::masking::check_sparsity(self.finetune.sparsity)?;
        self.finetune.optimizer.validate()?;
        self.experiment.validate()
    }
}
