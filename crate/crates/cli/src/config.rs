//! Run configuration: one TOML file per run, overridden by global flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use herbrx_core::augment::AugmentConfig;
use herbrx_core::data::{FoldConfig, SynthConfig};
use herbrx_core::lda::LdaConfig;
use herbrx_core::metrics::AvoidanceMode;
use herbrx_core::model::{ArchitectureSpec, TrainConfig, Variant};
use herbrx_core::{stable_hash, Error};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// `id<TAB>image<TAB>herb|herb` manifest.
    pub manifest: Option<PathBuf>,
    /// `variant<TAB>canonical` alias list.
    pub aliases: Option<PathBuf>,
    /// Frozen vocabulary file; built from the manifest when absent.
    pub vocabulary: Option<PathBuf>,
    /// COMMON / TABOO pair table for the logic score.
    pub rules: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub avoidance: AvoidanceMode,
    /// Images per inference chunk.
    pub predict_chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { avoidance: AvoidanceMode::default(), predict_chunk: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    /// A herb is frequent when it occurs in more than this many prescriptions.
    pub frequent_threshold: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig { frequent_threshold: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; when set it replaces every section seed.
    pub seed: Option<u64>,
    pub preset: String,
    pub variant: String,
    pub fold: usize,
    pub augment: bool,
    /// Parent of run directories, `runs` when unset.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub paths: Paths,
    pub train: TrainConfig,
    pub lda: LdaConfig,
    pub augmentation: AugmentConfig,
    pub synth: SynthConfig,
    pub folds: FoldConfig,
    pub eval: EvalConfig,
    pub stats: StatsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            preset: "mini".into(),
            variant: "2cnn-aux".into(),
            fold: 0,
            augment: false,
            out: None,
            paths: Paths::default(),
            train: TrainConfig::default(),
            lda: LdaConfig::default(),
            augmentation: AugmentConfig::default(),
            synth: SynthConfig::default(),
            folds: FoldConfig::default(),
            eval: EvalConfig::default(),
            stats: StatsConfig::default(),
        }
    }
}

/// Flag values that win over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub fold: Option<usize>,
    pub variant: Option<String>,
    pub augment: bool,
    pub preset: Option<String>,
}

fn config_error(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig { field: field.into(), reason: reason.into() }
}

impl RunConfig {
    /// Parses a config file. Relative paths resolve against the file's
    /// directory. An `[lda]` table that sets `topics` without `alpha` gets
    /// `alpha = 50 / topics`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.manifest, &mut cfg.paths.aliases, &mut cfg.paths.vocabulary, &mut cfg.paths.rules]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(out) = cfg.out.as_mut().filter(|o| o.is_relative()) {
            *out = base.join(&*out);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text)?;
        let lda = table.get("lda").and_then(toml::Value::as_table);
        let derive_alpha = lda.is_some_and(|t| t.contains_key("topics") && !t.contains_key("alpha"));
        let mut cfg: RunConfig = toml::from_str(text)?;
        if derive_alpha {
            cfg.lda.alpha = 50.0 / cfg.lda.topics.max(1) as f64;
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if let Some(f) = o.fold {
            self.fold = f;
        }
        if let Some(v) = &o.variant {
            self.variant = v.clone();
        }
        if let Some(p) = &o.preset {
            self.preset = p.clone();
        }
        self.augment |= o.augment;
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.lda.seed = s;
            self.augmentation.seed = s;
            self.synth.seed = s;
            self.folds.seed = s;
        }
    }

    pub fn variant(&self) -> Result<Variant, Error> {
        self.variant.parse()
    }

    /// Resolves the architecture for a vocabulary size and topic count.
    pub fn architecture(&self, herb_count: usize, topic_count: Option<usize>) -> Result<ArchitectureSpec, Error> {
        let spec = ArchitectureSpec::preset(&self.preset, self.variant()?, herb_count, topic_count)?;
        spec.validate()?;
        Ok(spec)
    }

    fn check_path(field: &str, path: &Option<PathBuf>) -> Result<(), Error> {
        match path {
            Some(p) if !p.is_file() => Err(config_error(field, format!("file not found: {}", p.display()))),
            _ => Ok(()),
        }
    }

    /// Checks field values and that every referenced file exists.
    pub fn validate(&self) -> Result<(), Error> {
        self.variant()?;
        if !["paper", "mini"].contains(&self.preset.as_str()) {
            return Err(config_error("preset", format!("unknown preset `{}` (paper, mini)", self.preset)));
        }
        if self.fold >= self.folds.folds {
            return Err(config_error(
                "fold",
                format!("fold {} out of range for {} folds", self.fold, self.folds.folds),
            ));
        }
        if self.eval.predict_chunk == 0 {
            return Err(config_error("eval.predict_chunk", "must be positive"));
        }
        self.train.validate()?;
        self.lda.validate()?;
        self.augmentation.validate()?;
        self.synth.validate()?;
        Self::check_path("paths.manifest", &self.paths.manifest)?;
        Self::check_path("paths.aliases", &self.paths.aliases)?;
        Self::check_path("paths.vocabulary", &self.paths.vocabulary)?;
        Self::check_path("paths.rules", &self.paths.rules)?;
        Ok(())
    }

    pub fn manifest(&self) -> Result<&Path, Error> {
        self.paths.manifest.as_deref().ok_or_else(|| config_error("paths.manifest", "required by this command"))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Creates `<out>/<command>-<digest>`, where the digest covers the effective
/// config and the command arguments, and stores the config copy in it.
pub fn run_dir(cfg: &RunConfig, command: &str, args: &[String]) -> Result<PathBuf> {
    let text = cfg.to_toml()?;
    let key = format!("{command}\n{}\n{text}", args.join("\n"));
    let dir =
        cfg.out.as_deref().unwrap_or(Path::new("runs")).join(format!("{command}-{:016x}", stable_hash(key.as_bytes())));
    fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    fs::write(dir.join("config.toml"), text)?;
    Ok(dir)
}
