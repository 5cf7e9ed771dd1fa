//! Pipeline configuration: flat `key = value` text, with command-line
//! overrides applied on top of the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use symlevel_core::dataset::{preset_profile, SymmetryProfile, PRESETS};
use symlevel_core::format::kv;
use symlevel_core::pseudolabel::{default_k, GaussianMode};
use symlevel_core::training::TrainConfig;
use symlevel_core::{Family, ModelConfig};

/// Environment variable that may point at a directory of MNIST IDX files.
pub const MNIST_DIR_VAR: &str = "SYMLEVEL_MNIST_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusSource {
    Glyph,
    Idx,
}

impl std::str::FromStr for CorpusSource {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "glyph" => Ok(Self::Glyph),
            "idx" | "mnist" => Ok(Self::Idx),
            other => bail!("unknown corpus `{other}` (expected glyph or idx)"),
        }
    }
}

impl CorpusSource {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Glyph => "glyph",
            Self::Idx => "idx",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub preset: String,
    /// Explicit per-class specs such as `uniform:30,uniform:90`; takes
    /// precedence over `preset`.
    pub profile: Option<String>,
    pub corpus: CorpusSource,
    pub idx_dir: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub family: Option<Family>,
    pub k: Option<usize>,
    pub gaussian_mode: GaussianMode,
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub theta: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preset: "multiple".into(),
            profile: None,
            corpus: CorpusSource::Glyph,
            idx_dir: None,
            classes: 10,
            per_class: 200,
            train_frac: 0.8,
            val_frac: 0.1,
            family: None,
            k: None,
            gaussian_mode: GaussianMode::default(),
            seed: 0,
            out: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(),
            theta: TrainConfig::boundary(),
        }
    }
}

fn train_keys(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("epochs", cfg.epochs.to_string()),
        ("lr", cfg.lr.to_string()),
        ("warmup_epochs", cfg.warmup_epochs.to_string()),
        ("lambda2", cfg.lambda2.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("holdout_fraction", cfg.holdout_fraction.to_string()),
    ]
}

fn set_train_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "epochs" => cfg.epochs = value.parse()?,
        "lr" => cfg.lr = value.parse()?,
        "warmup_epochs" => cfg.warmup_epochs = value.parse()?,
        "lambda2" => cfg.lambda2 = value.parse()?,
        "batch_size" => cfg.batch_size = value.parse()?,
        "holdout_fraction" => cfg.holdout_fraction = value.parse()?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl PipelineConfig {
    /// Parses config text, then applies `overrides` (`key=value`) in order.
    /// Unknown keys are rejected.
    pub fn parse(text: &str, source_name: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut entries: Vec<(String, String, String)> = kv::parse(text, source_name)?
            .into_iter()
            .map(|e| (e.key, e.value, format!("{source_name}:{}", e.line)))
            .collect();
        for (k, v) in overrides {
            entries.retain(|(key, _, _)| key != k);
            entries.push((k.clone(), v.clone(), format!("override `{k}`")));
        }
        let mut cfg = Self::default();
        let mut model_lines = String::new();
        for (key, value, origin) in &entries {
            cfg.set(key, value, &mut model_lines)
                .with_context(|| format!("{origin}: invalid setting `{key} = {value}`"))?;
        }
        if !model_lines.is_empty() {
            cfg.model = ModelConfig::from_kv(&model_lines, source_name)?;
        }
        cfg.model.family = cfg.family()?;
        cfg.model.seed = cfg.seed;
        cfg.pretrain.seed = cfg.seed;
        cfg.theta.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text, &p.display().to_string(), overrides)
            }
            None => Self::parse("", "<defaults>", overrides),
        }
    }

    fn set(&mut self, key: &str, value: &str, model_lines: &mut String) -> Result<()> {
        if let Some(k) = key.strip_prefix("model.") {
            if k == "family" || k == "seed" {
                bail!("set `{k}` at the top level; it applies to every stage");
            }
            model_lines.push_str(&format!("{k} = {value}\n"));
            return Ok(());
        }
        if let Some(k) = key.strip_prefix("pretrain.") {
            if set_train_key(&mut self.pretrain, k, value)? {
                return Ok(());
            }
        }
        if let Some(k) = key.strip_prefix("theta.") {
            if set_train_key(&mut self.theta, k, value)? {
                return Ok(());
            }
        }
        match key {
            "preset" => self.preset = value.to_string(),
            "profile" => self.profile = (!value.is_empty()).then(|| value.to_string()),
            "corpus" => self.corpus = value.parse()?,
            "idx_dir" => self.idx_dir = Some(PathBuf::from(value)),
            "classes" => self.classes = value.parse()?,
            "per_class" => self.per_class = value.parse()?,
            "train_frac" => self.train_frac = value.parse()?,
            "val_frac" => self.val_frac = value.parse()?,
            "family" => self.family = Some(value.parse()?),
            "k" => self.k = Some(value.parse()?),
            "gaussian_mode" => self.gaussian_mode = value.parse()?,
            "seed" => self.seed = value.parse()?,
            "out" => self.out = PathBuf::from(value),
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.per_class == 0 {
            bail!("classes and per_class must be positive");
        }
        if !(self.train_frac > 0.0 && self.val_frac >= 0.0 && self.train_frac + self.val_frac < 1.0) {
            bail!("split fractions must leave room for a test split");
        }
        if self.profile.is_none() && !PRESETS.contains(&self.preset.as_str()) {
            bail!("unknown preset `{}` (expected one of {})", self.preset, PRESETS.join(", "));
        }
        let profile = self.profile()?;
        if profile.len() != self.classes {
            bail!("profile covers {} classes but classes = {}", profile.len(), self.classes);
        }
        if let Some(f) = profile.family() {
            if f != self.family()? {
                bail!("family {} does not match the {} profile", self.family()?, f);
            }
        }
        self.model.validate()?;
        Ok(())
    }

    /// Per-class symmetry specs from `profile` or the named preset.
    pub fn profile(&self) -> Result<SymmetryProfile> {
        Ok(match &self.profile {
            Some(list) => SymmetryProfile::parse_list(list)?,
            None => preset_profile(&self.preset, self.classes)?,
        })
    }

    /// The explicit family, or the family shared by the profile.
    pub fn family(&self) -> Result<Family> {
        if let Some(f) = self.family {
            return Ok(f);
        }
        let profile = match &self.profile {
            Some(list) => SymmetryProfile::parse_list(list)?,
            None => preset_profile(&self.preset, self.classes)?,
        };
        profile
            .family()
            .context("the profile mixes families; set `family` explicitly")
    }

    pub fn k(&self) -> Result<usize> {
        Ok(self.k.unwrap_or(default_k(self.family()?)))
    }

    /// The IDX directory from the config or the environment.
    pub fn idx_dir(&self) -> Option<PathBuf> {
        self.idx_dir
            .clone()
            .or_else(|| std::env::var_os(MNIST_DIR_VAR).map(PathBuf::from))
    }

    /// Settings that determine the generated data.
    pub fn data_kv(&self) -> String {
        kv::render([
            ("preset", self.preset.clone()),
            ("profile", self.profile.clone().unwrap_or_default()),
            ("corpus", self.corpus.as_str().to_string()),
            ("idx_dir", self.idx_dir().map(|p| p.display().to_string()).unwrap_or_default()),
            ("classes", self.classes.to_string()),
            ("per_class", self.per_class.to_string()),
            ("train_frac", self.train_frac.to_string()),
            ("val_frac", self.val_frac.to_string()),
            ("image_size", self.model.image_size.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    pub fn pretrain_kv(&self) -> String {
        format!("{}{}", self.model.to_kv(), kv::render(train_keys(&self.pretrain)))
    }

    pub fn pseudolabel_kv(&self) -> Result<String> {
        Ok(kv::render([
            ("family", self.family()?.to_string()),
            ("k", self.k()?.to_string()),
            ("gaussian_mode", format!("{:?}", self.gaussian_mode)),
        ]))
    }

    pub fn theta_kv(&self) -> String {
        kv::render(train_keys(&self.theta))
    }
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .with_context(|| format!("expected key=value, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
