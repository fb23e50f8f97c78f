//! Flat `key = value` experiment configuration.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ldc_core::classifier::TrainableRows;
use ldc_core::dataio::read_embedding_file;
use ldc_core::protocol::{make_plan, BaselineKind, Benchmark, Episode};
use ldc_core::SampleSet;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{0}` given twice")]
    Duplicate(String),
    #[error("bad value for `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Everything a run needs, validated up front.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub bench: Benchmark,
    /// Replaces the synthetic generator when set.
    pub embeddings: Option<PathBuf>,
    pub methods: Vec<BaselineKind>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            bench: Benchmark::default(),
            embeddings: None,
            methods: BaselineKind::ALL.to_vec(),
            seeds: (0..10).collect(),
            out_dir: PathBuf::from("results"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue { key: key.into(), message: e.to_string() })
}

/// Comma-separated ids, where `a..b` expands to the half-open range.
pub fn parse_seeds(key: &str, value: &str) -> Result<Vec<u64>, ConfigError> {
    let mut out = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (parse(key, a.trim())?, parse(key, b.trim())?);
                if a >= b {
                    return Err(ConfigError::BadValue { key: key.into(), message: format!("empty range {part}") });
                }
                out.extend(a..b);
            }
            None => out.push(parse(key, part)?),
        }
    }
    let unique: BTreeSet<_> = out.iter().collect();
    if out.is_empty() || unique.len() != out.len() {
        return Err(ConfigError::BadValue { key: key.into(), message: "need distinct seeds".into() });
    }
    Ok(out)
}

fn parse_trainable(key: &str, value: &str) -> Result<TrainableRows, ConfigError> {
    match value {
        "all" => Ok(TrainableRows::All),
        "new_only" => Ok(TrainableRows::From(0)),
        other => Err(ConfigError::BadValue { key: key.into(), message: format!("expected all or new_only, got {other:?}") }),
    }
}

impl ExperimentConfig {
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate(key.into()));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::parse_str(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let b = &mut self.bench;
        let p = &mut b.protocol;
        match key {
            "n_classes" => b.synth.n_classes = parse(key, v)?,
            "dim" => b.synth.dim = parse(key, v)?,
            "samples_per_class" => b.synth.samples_per_class = parse(key, v)?,
            "mean_separation" => b.synth.mean_separation = parse(key, v)?,
            "cov_scale" => b.synth.cov_scale = parse(key, v)?,
            "cov_anisotropy" => b.synth.cov_anisotropy = parse(key, v)?,
            "rotation_spread" => b.synth.rotation_spread = parse(key, v)?,
            "embeddings" => self.embeddings = Some(PathBuf::from(v)),
            "n_base" => b.n_base = parse(key, v)?,
            "n_way" => b.n_way = parse(key, v)?,
            "k_shot" => b.k_shot = parse(key, v)?,
            "shot_mode" => b.shot_mode = parse(key, v)?,
            "scale" => p.scale = parse(key, v)?,
            "batch_size" => p.batch_size = parse(key, v)?,
            "base_epochs" => p.base_epochs = parse(key, v)?,
            "base_lr" => p.base_lr = parse(key, v)?,
            "inc_epochs" => p.inc_epochs = parse(key, v)?,
            "inc_lr" => p.inc_lr = parse(key, v)?,
            "trainable" => p.trainable = parse_trainable(key, v)?,
            "pcu_samples" => p.samples_per_class = parse(key, v)?,
            "recur_iters" => p.recur_iters = parse(key, v)?,
            "pcu_epochs" => p.pcu_epochs = parse(key, v)?,
            "pcu_lr" => p.pcu_lr = parse(key, v)?,
            "matching_weight" => p.matching_weight = parse(key, v)?,
            "divergence" => p.divergence = parse(key, v)?,
            "test_fraction" => p.test_fraction = parse(key, v)?,
            "empirical_k" => p.empirical_k = parse(key, v)?,
            "methods" => {
                self.methods = v
                    .split(',')
                    .map(str::trim)
                    .filter(|m| !m.is_empty())
                    .map(|m| parse(key, m))
                    .collect::<Result<_, _>>()?;
            }
            "seeds" => self.seeds = parse_seeds(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: ldc_core::LdcError| ConfigError::Invalid(e.to_string());
        if self.methods.is_empty() {
            return Err(ConfigError::Invalid("no methods selected".into()));
        }
        let unique: BTreeSet<_> = self.methods.iter().map(|m| m.name()).collect();
        if unique.len() != self.methods.len() {
            return Err(ConfigError::Invalid("a method is listed twice".into()));
        }
        self.bench.protocol.validate().map_err(invalid)?;
        if self.embeddings.is_none() {
            self.bench.validate().map_err(invalid)?;
        }
        Ok(())
    }

    /// Loads the embedding file, if any, and checks it against the split.
    pub fn source(&self) -> Result<DataSource, ConfigError> {
        let Some(path) = &self.embeddings else {
            return Ok(DataSource::Synthetic);
        };
        let invalid = |e: ldc_core::LdcError| ConfigError::Invalid(format!("{}: {e}", path.display()));
        let set = read_embedding_file(path).map_err(invalid)?;
        let classes = set.classes();
        if classes != (0..classes.len()).collect::<Vec<_>>() {
            return Err(ConfigError::Invalid(format!("{}: labels must be 0..n without gaps", path.display())));
        }
        let b = &self.bench;
        make_plan(classes.len(), b.n_base, b.n_way, b.k_shot, 0).map_err(invalid)?;
        Ok(DataSource::File(set))
    }
}

#[derive(Clone, Debug)]
pub enum DataSource {
    Synthetic,
    File(SampleSet),
}

impl DataSource {
    pub fn episode(&self, bench: &Benchmark, seed: u64) -> ldc_core::Result<Episode> {
        match self {
            DataSource::Synthetic => bench.episode(seed),
            DataSource::File(set) => bench.episode_from(set, None, seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = ExperimentConfig::parse_str("# nothing\n\n").unwrap();
        assert_eq!(cfg.seeds, (0..10).collect::<Vec<_>>());
        assert_eq!(cfg.methods.len(), 3);
        assert_eq!(cfg.bench, Benchmark::default());
    }

    #[test]
    fn shipped_default_config_matches_defaults() {
        let cfg = ExperimentConfig::parse_str(include_str!("../../../configs/default.conf")).unwrap();
        let def = ExperimentConfig::default();
        assert_eq!(cfg.bench, def.bench);
        assert_eq!((cfg.methods, cfg.seeds, cfg.out_dir), (def.methods, def.seeds, def.out_dir));
        ExperimentConfig::parse_str(include_str!("../../../configs/quick.conf")).unwrap();
    }

    #[test]
    fn values_are_typed_and_applied() {
        let cfg = ExperimentConfig::parse_str(
            "dim = 8\nmethods = ldc, prototype_only\nseeds = 3, 5..7\ndivergence = w2 # inline\ntrainable = new_only\n",
        )
        .unwrap();
        assert_eq!(cfg.bench.synth.dim, 8);
        assert_eq!(cfg.methods, vec![BaselineKind::Ldc, BaselineKind::PrototypeOnly]);
        assert_eq!(cfg.seeds, vec![3, 5, 6]);
        assert_eq!(cfg.bench.protocol.divergence.name(), "w2");
        assert_eq!(cfg.bench.protocol.trainable, TrainableRows::From(0));
    }

    #[test]
    fn errors_name_the_problem() {
        let err = ExperimentConfig::parse_str("dimm = 3\n").unwrap_err();
        assert!(err.to_string().contains("dimm"), "{err}");
        assert!(matches!(ExperimentConfig::parse_str("dim 3"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(ExperimentConfig::parse_str("dim = 3\ndim = 4"), Err(ConfigError::Duplicate(_))));
        assert!(matches!(ExperimentConfig::parse_str("dim = three"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(ExperimentConfig::parse_str("seeds = 4..4"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(ExperimentConfig::parse_str("seeds = 1,1"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(ExperimentConfig::parse_str("n_way = 3"), Err(ConfigError::Invalid(_))));
        assert!(matches!(ExperimentConfig::parse_str("base_lr = -0.1"), Err(ConfigError::Invalid(_))));
        assert!(matches!(ExperimentConfig::parse_str("methods = ldc, ldc"), Err(ConfigError::Invalid(_))));
    }
}
