use akt_core::data::{DatasetProfile, MultiConceptMode};
use akt_core::attention::Activation;
use akt_core::model::{AktConfig, Variant};
use akt_core::training::{GridSpec, TrainConfig};
use akt_core::AktError;
use anyhow::Result;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Everything a training-type command needs, fully materialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub precision: Precision,
    pub profile: String,
    pub model: AktConfig,
    pub train: TrainConfig,
    /// When present, `train` searches this grid on validation AUC.
    pub grid: Option<GridSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            precision: Precision::F32,
            profile: "generic".into(),
            model: AktConfig::default(),
            train: TrainConfig::default(),
            grid: None,
        }
    }
}

pub const PRESETS: [&str; 3] = ["standard", "standard-grid", "desk"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = RunConfig::default();
        Ok(match name {
            "standard" => base,
            "standard-grid" => RunConfig { grid: Some(GridSpec::full()), ..base },
            "desk" => RunConfig {
                model: AktConfig { dim: 32, heads: 4, head_widths: vec![64, 32], ..base.model },
                train: TrainConfig { learning_rate: 2e-3, max_epochs: 20, patience: 3, ..base.train },
                ..base
            },
            other => {
                return Err(AktError::config(format!("unknown preset {other:?}; known: {}", PRESETS.join(", "))).into())
            }
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| AktError::config(format!("config: {e}")).into())
    }

    pub fn profile(&self) -> Result<DatasetProfile> {
        Ok(DatasetProfile::parse(&self.profile)?)
    }
}

/// Config sources and per-field flag overrides, applied in that order:
/// defaults, preset, config file, flags.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run config
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Named starting point: standard, standard-grid, desk
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub precision: Option<Precision>,
    /// Dataset profile: generic, assist2009, assist2015, assist2017, statics2011
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub encoder_depth: Option<usize>,
    #[arg(long)]
    pub retriever_depth: Option<usize>,
    /// Comma-separated hidden widths of the prediction head
    #[arg(long, value_delimiter = ',')]
    pub head_widths: Option<Vec<usize>>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// repeat or average
    #[arg(long)]
    pub multi_concept: Option<String>,
    #[arg(long)]
    pub pair_variation: Option<bool>,
    #[arg(long)]
    pub additive_decay: Option<bool>,
    #[arg(long)]
    pub attention_dropout: Option<bool>,
    #[arg(long)]
    pub share_query_key: Option<bool>,
    /// softplus or relu
    #[arg(long)]
    pub activation: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Use "inf" to disable clipping
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub fold_workers: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.preset {
            Some(p) => RunConfig::preset(p)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| AktError::config(format!("reading config {}: {e}", path.display())))?;
            // a file only overrides what it names, on top of the preset
            let file: toml::Table = toml::from_str(&text).map_err(|e| AktError::config(format!("config: {e}")))?;
            let mut merged = toml::Table::try_from(&cfg).map_err(|e| AktError::config(e.to_string()))?;
            merge(&mut merged, file);
            cfg = RunConfig::from_toml(&toml::to_string(&merged).map_err(|e| AktError::config(e.to_string()))?)?;
        }
        let m = &mut cfg.model;
        let t = &mut cfg.train;
        if let Some(v) = &self.variant {
            m.variant = Variant::parse(v)?;
        }
        set(&mut m.dim, self.dim);
        set(&mut m.heads, self.heads);
        if self.ffn_dim.is_some() {
            m.ffn_dim = self.ffn_dim;
        }
        set(&mut m.dropout, self.dropout);
        set(&mut m.encoder_depth, self.encoder_depth);
        set(&mut m.retriever_depth, self.retriever_depth);
        set(&mut m.head_widths, self.head_widths.clone());
        set(&mut m.max_len, self.max_len);
        if let Some(mode) = &self.multi_concept {
            m.multi_concept = MultiConceptMode::parse(mode)?;
        }
        set(&mut m.pair_variation, self.pair_variation);
        set(&mut m.additive_decay, self.additive_decay);
        set(&mut m.attention_dropout, self.attention_dropout);
        set(&mut m.share_query_key, self.share_query_key);
        if let Some(a) = &self.activation {
            m.activation = match a.as_str() {
                "softplus" => Activation::Softplus,
                "relu" => Activation::Relu,
                other => return Err(AktError::config(format!("unknown activation {other:?}")).into()),
            };
        }
        set(&mut t.learning_rate, self.lr);
        set(&mut t.max_epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        if let Some(n) = self.max_grad_norm {
            t.max_grad_norm = n.is_finite().then_some(n);
        }
        set(&mut t.patience, self.patience);
        set(&mut t.seed, self.seed);
        set(&mut t.fold, self.fold);
        set(&mut t.folds, self.folds);
        set(&mut t.fold_workers, self.fold_workers);
        set(&mut cfg.precision, self.precision);
        set(&mut cfg.profile, self.profile.clone());
        cfg.profile()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_preset() {
        let args = ConfigArgs { preset: Some("desk".into()), dim: Some(16), max_grad_norm: Some(f64::INFINITY), ..Default::default() };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.model.dim, 16);
        assert_eq!(cfg.model.heads, 4);
        assert_eq!(cfg.train.max_grad_norm, None);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::preset("standard-grid").unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_preset_and_field() {
        assert!(RunConfig::preset("nope").is_err());
        assert!(RunConfig::from_toml("[model]\nwidth = 3\n").is_err());
    }

    #[test]
    fn partial_file() {
        let cfg = RunConfig::from_toml("[model]\nvariant = \"akt-nr\"\ndim = 64\n[train]\nmax_grad_norm = 10.0\n").unwrap();
        assert_eq!(cfg.model.variant, Variant::AktNr);
        assert_eq!(cfg.model.heads, 8);
        assert_eq!(cfg.train.max_grad_norm, Some(10.0));
    }
}
