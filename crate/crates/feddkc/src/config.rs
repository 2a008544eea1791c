//! Run configuration: a flat, line-oriented `key = value` format with
//! `[section]` headers and `#` comments. Parsing is dependency-free so config
//! diffs stay reviewable and the parser itself is easy to audit.
//!
//! Sections and keys:
//!
//! ```text
//! [dataset]   kind (synth|csv), classes, per_class, features, spread,
//!             data_seed, path, test_fraction
//! [partition] clients, alpha
//! [train]     learning_rate, batch_size, weight_decay, beta, local_epochs,
//!             server_epochs, kl_direction (target-first|prediction-first)
//! [refine]    strategy (none|kkr|skr|generalized-kkr), target_peak,
//!             target_entropy, tolerance, kernel (affine:<k>,<b> | exp),
//!             bisect_lower, bisect_upper, bisect_max_expand, bisect_max_iters
//! [run]       rounds, seeds (comma-separated), output_dir,
//!             dump_refinement_events (true|false)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::neural::{KlDirection, TrainConfig};
use crate::refine::{BisectionConfig, KernelSpec, RefinementConfig, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Synth {
        classes: usize,
        per_class: usize,
        features: usize,
        spread: f64,
        data_seed: u64,
    },
    Csv {
        path: PathBuf,
    },
}

impl DatasetSpec {
    /// Materializes the dataset (loads or synthesizes).
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Synth {
                classes,
                per_class,
                features,
                spread,
                data_seed,
            } => data::synth_blobs(*classes, *per_class, *features, *spread, *data_seed),
            DatasetSpec::Csv { path } => data::load_csv(path),
        }
    }

    /// Class count without materializing the samples (reads only the CSV
    /// header for file-backed datasets).
    pub fn class_count(&self) -> Result<usize> {
        match self {
            DatasetSpec::Synth { classes, .. } => Ok(*classes),
            DatasetSpec::Csv { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig {
                    field: "dataset.path".into(),
                    msg: format!("{}: {e}", path.display()),
                })?;
                let header = text
                    .lines()
                    .map(str::trim)
                    .find(|l| !l.is_empty() && !l.starts_with('#'))
                    .ok_or_else(|| Error::InvalidConfig {
                        field: "dataset.path".into(),
                        msg: "file has no header line".into(),
                    })?;
                let classes = header.split(',').nth(1).and_then(|c| c.trim().parse().ok());
                classes.ok_or_else(|| Error::InvalidConfig {
                    field: "dataset.path".into(),
                    msg: format!("bad header `{header}`, expected `d,C`"),
                })
            }
        }
    }
}

/// Serializable refinement settings; [`RefinementConfig`] is built from
/// these (kernels are closures and cannot round-trip through a manifest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSettings {
    pub strategy: Strategy,
    pub target_peak: f64,
    pub target_entropy: f64,
    pub tolerance: f64,
    pub kernel: KernelChoice,
    pub bisect_lower: f64,
    pub bisect_upper: f64,
    pub bisect_max_expand: usize,
    pub bisect_max_iters: usize,
}

impl Default for RefineSettings {
    fn default() -> Self {
        let bis = BisectionConfig::default();
        Self {
            strategy: Strategy::None,
            target_peak: 0.11,
            target_entropy: 3.3,
            tolerance: 1e-3,
            kernel: KernelChoice::Affine { k: 1.0, b: 1.0 },
            bisect_lower: bis.lower,
            bisect_upper: bis.upper,
            bisect_max_expand: bis.max_expand,
            bisect_max_iters: bis.max_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelChoice {
    Affine { k: f64, b: f64 },
    Exp,
}

impl RefineSettings {
    pub fn to_refinement_config(&self) -> Result<RefinementConfig> {
        let kernel = match self.kernel {
            KernelChoice::Affine { k, b } => KernelSpec::linear_affine(k, b)?,
            KernelChoice::Exp => KernelSpec::exponential(),
        };
        Ok(RefinementConfig {
            strategy: self.strategy,
            target_peak: self.target_peak,
            target_entropy: self.target_entropy,
            tolerance: self.tolerance,
            bisection: BisectionConfig {
                lower: self.bisect_lower,
                upper: self.bisect_upper,
                max_expand: self.bisect_max_expand,
                f_tol: self.tolerance / 2.0,
                max_iters: self.bisect_max_iters,
            },
            kernel,
        })
    }
}

/// Everything a reproducible run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub test_fraction: f64,
    pub clients: usize,
    pub alpha: f64,
    pub train: TrainConfig,
    pub refine: RefineSettings,
    pub rounds: u32,
    /// Each seed is a fully independent run: model init, partition, and
    /// batching all derive from it via the stream-splitting rule.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub dump_refinement_events: bool,
}

impl RunConfig {
    /// Full semantic validation; reads the CSV header when needed so the
    /// class-dependent refinement bounds can be checked up front.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::InvalidConfig {
                field: "dataset.test_fraction".into(),
                msg: format!("must be in [0, 1), got {}", self.test_fraction),
            });
        }
        match &self.dataset {
            DatasetSpec::Synth {
                classes,
                per_class,
                features,
                spread,
                ..
            } => {
                if *classes == 0 || *per_class == 0 || *features == 0 {
                    return Err(Error::InvalidConfig {
                        field: "dataset".into(),
                        msg: "classes, per_class, and features must be positive".into(),
                    });
                }
                if !(*spread >= 0.0) {
                    return Err(Error::InvalidConfig {
                        field: "dataset.spread".into(),
                        msg: format!("must be >= 0, got {spread}"),
                    });
                }
            }
            DatasetSpec::Csv { path } => {
                if !path.exists() {
                    return Err(Error::InvalidConfig {
                        field: "dataset.path".into(),
                        msg: format!("{} does not exist", path.display()),
                    });
                }
            }
        }
        if self.clients == 0 {
            return Err(Error::InvalidConfig {
                field: "partition.clients".into(),
                msg: "need at least one client".into(),
            });
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig {
                field: "partition.alpha".into(),
                msg: format!("must be positive, got {}", self.alpha),
            });
        }
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig {
                field: "run.seeds".into(),
                msg: "need at least one seed".into(),
            });
        }
        let classes = self.dataset.class_count()?;
        let refinement = self.refine.to_refinement_config().map_err(|e| {
            Error::InvalidConfig {
                field: "refine.kernel".into(),
                msg: e.to_string(),
            }
        })?;
        refinement.validate(classes).map_err(|e| {
            let field = match self.refine.strategy {
                Strategy::Skr => "refine.target_entropy",
                _ => "refine.target_peak",
            };
            Error::InvalidConfig {
                field: field.into(),
                msg: e.to_string(),
            }
        })?;
        Ok(())
    }
}

/// Parsed lines: (section, key) -> (value, line number).
struct RawConfig {
    entries: BTreeMap<(String, String), (String, usize)>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or(Error::Parse {
                    line: line_no,
                    msg: format!("malformed section header `{line}`"),
                })?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: line_no,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let section = section.clone().ok_or(Error::Parse {
                line: line_no,
                msg: "key before any [section] header".into(),
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "empty key".into(),
                });
            }
            if entries
                .insert((section.clone(), key.clone()), (value.trim().to_string(), line_no))
                .is_some()
            {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("duplicate key `{section}.{key}`"),
                });
            }
        }
        Ok(Self { entries })
    }

    fn take(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        self.entries.remove(&(section.to_string(), key.to_string()))
    }

    fn take_parse<T: std::str::FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(section, key) {
            None => Ok(None),
            Some((value, line)) => value.parse().map(Some).map_err(|e| Error::Parse {
                line,
                msg: format!("bad value for {section}.{key}: {e}"),
            }),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(((section, key), (_, line))) = self.entries.into_iter().next() {
            return Err(Error::Parse {
                line,
                msg: format!("unknown key `{section}.{key}`"),
            });
        }
        Ok(())
    }
}

fn require<T>(value: Option<T>, section: &str, key: &str) -> Result<T> {
    value.ok_or_else(|| Error::InvalidConfig {
        field: format!("{section}.{key}"),
        msg: "missing required key".into(),
    })
}

/// Parses the text format into a [`RunConfig`]. Syntax and type errors carry
/// line numbers; semantic checks live in [`RunConfig::validate`].
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut raw = RawConfig::parse(text)?;

    let kind: String = require(raw.take_parse("dataset", "kind")?, "dataset", "kind")?;
    let dataset = match kind.as_str() {
        "synth" => DatasetSpec::Synth {
            classes: require(raw.take_parse("dataset", "classes")?, "dataset", "classes")?,
            per_class: require(raw.take_parse("dataset", "per_class")?, "dataset", "per_class")?,
            features: require(raw.take_parse("dataset", "features")?, "dataset", "features")?,
            spread: raw.take_parse("dataset", "spread")?.unwrap_or(1.0),
            data_seed: raw.take_parse("dataset", "data_seed")?.unwrap_or(0),
        },
        "csv" => DatasetSpec::Csv {
            path: PathBuf::from(require(
                raw.take("dataset", "path").map(|(v, _)| v),
                "dataset",
                "path",
            )?),
        },
        other => {
            return Err(Error::InvalidConfig {
                field: "dataset.kind".into(),
                msg: format!("expected `synth` or `csv`, got `{other}`"),
            })
        }
    };
    let test_fraction = raw.take_parse("dataset", "test_fraction")?.unwrap_or(0.2);

    let clients = require(raw.take_parse("partition", "clients")?, "partition", "clients")?;
    let alpha = require(raw.take_parse("partition", "alpha")?, "partition", "alpha")?;

    let train_defaults = TrainConfig::default();
    let kl_direction = match raw.take("train", "kl_direction") {
        None => KlDirection::TargetFirst,
        Some((v, line)) => match v.as_str() {
            "target-first" => KlDirection::TargetFirst,
            "prediction-first" => KlDirection::PredictionFirst,
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("bad train.kl_direction `{other}`"),
                })
            }
        },
    };
    let train = TrainConfig {
        learning_rate: raw
            .take_parse("train", "learning_rate")?
            .unwrap_or(train_defaults.learning_rate),
        batch_size: raw
            .take_parse("train", "batch_size")?
            .unwrap_or(train_defaults.batch_size),
        weight_decay: raw
            .take_parse("train", "weight_decay")?
            .unwrap_or(train_defaults.weight_decay),
        beta: raw.take_parse("train", "beta")?.unwrap_or(train_defaults.beta),
        local_epochs: raw
            .take_parse("train", "local_epochs")?
            .unwrap_or(train_defaults.local_epochs),
        server_epochs: raw
            .take_parse("train", "server_epochs")?
            .unwrap_or(train_defaults.server_epochs),
        seed: 0, // overwritten per run from [run] seeds
        kl_direction,
    };

    let refine_defaults = RefineSettings::default();
    let strategy = match raw.take("refine", "strategy") {
        None => Strategy::None,
        Some((v, line)) => match v.as_str() {
            "none" => Strategy::None,
            "kkr" => Strategy::Kkr,
            "skr" => Strategy::Skr,
            "generalized-kkr" => Strategy::GeneralizedKkr,
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("bad refine.strategy `{other}`"),
                })
            }
        },
    };
    let kernel = match raw.take("refine", "kernel") {
        None => refine_defaults.kernel.clone(),
        Some((v, line)) => parse_kernel(&v).map_err(|msg| Error::Parse { line, msg })?,
    };
    let refine = RefineSettings {
        strategy,
        target_peak: raw
            .take_parse("refine", "target_peak")?
            .unwrap_or(refine_defaults.target_peak),
        target_entropy: raw
            .take_parse("refine", "target_entropy")?
            .unwrap_or(refine_defaults.target_entropy),
        tolerance: raw
            .take_parse("refine", "tolerance")?
            .unwrap_or(refine_defaults.tolerance),
        kernel,
        bisect_lower: raw
            .take_parse("refine", "bisect_lower")?
            .unwrap_or(refine_defaults.bisect_lower),
        bisect_upper: raw
            .take_parse("refine", "bisect_upper")?
            .unwrap_or(refine_defaults.bisect_upper),
        bisect_max_expand: raw
            .take_parse("refine", "bisect_max_expand")?
            .unwrap_or(refine_defaults.bisect_max_expand),
        bisect_max_iters: raw
            .take_parse("refine", "bisect_max_iters")?
            .unwrap_or(refine_defaults.bisect_max_iters),
    };

    let rounds = require(raw.take_parse("run", "rounds")?, "run", "rounds")?;
    let seeds = match raw.take("run", "seeds") {
        None => {
            return Err(Error::InvalidConfig {
                field: "run.seeds".into(),
                msg: "missing required key".into(),
            })
        }
        Some((v, line)) => {
            let mut seeds = Vec::new();
            for part in v.split(',') {
                let part = part.trim();
                if part.is_empty() {
                    continue;
                }
                seeds.push(part.parse::<u64>().map_err(|e| Error::Parse {
                    line,
                    msg: format!("bad seed `{part}`: {e}"),
                })?);
            }
            seeds
        }
    };
    let output_dir = PathBuf::from(require(
        raw.take("run", "output_dir").map(|(v, _)| v),
        "run",
        "output_dir",
    )?);
    let dump_refinement_events = raw
        .take_parse("run", "dump_refinement_events")?
        .unwrap_or(false);

    raw.finish()?;
    Ok(RunConfig {
        dataset,
        test_fraction,
        clients,
        alpha,
        train,
        refine,
        rounds,
        seeds,
        output_dir,
        dump_refinement_events,
    })
}

fn parse_kernel(value: &str) -> std::result::Result<KernelChoice, String> {
    if value == "exp" {
        return Ok(KernelChoice::Exp);
    }
    if let Some(params) = value.strip_prefix("affine:") {
        let mut parts = params.split(',').map(str::trim);
        let k = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| format!("bad affine kernel `{value}`"))?;
        let b = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| format!("bad affine kernel `{value}`"))?;
        if parts.next().is_some() {
            return Err(format!("bad affine kernel `{value}`"));
        }
        return Ok(KernelChoice::Affine { k, b });
    }
    Err(format!(
        "unknown kernel `{value}` (expected `affine:<k>,<b>` or `exp`)"
    ))
}

/// Reads and parses a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

/// The run manifest: the fully-resolved config, the seed this run used, and
/// the code version. Re-running a manifest reproduces the run exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(config: &RunConfig, seed: u64) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: config.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Manifest> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig {
            field: "manifest".into(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        Manifest::from_json(&std::fs::read_to_string(path)?)
    }
}
