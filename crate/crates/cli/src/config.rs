//! Run configuration: a TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tprnn::data::{gen_synthetic, load_csv, Ratios, SeriesDataset, SyntheticSpec};
use tprnn::interaction::RnnKind;
use tprnn::model::{Fusion, ModelConfig, Variant};
use tprnn::pyramid::{BranchSet, Mixing};
use tprnn::training::TrainConfig;
use tprnn::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds the synthetic generator, parameter initialization, shuffling and dropout.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// CSV file; the synthetic preset is used when absent.
    pub path: Option<PathBuf>,
    /// Chronological train:val:test shares, e.g. "0.7:0.1:0.2" or "6:2:2".
    pub ratios: String,
    /// Noise level of the built-in synthetic preset.
    pub noise_std: f64,
    /// Full generator spec, replacing the preset. Its seed is overridden by the run seed.
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            ratios: "0.7:0.1:0.2".into(),
            noise_std: 0.1,
            synthetic: None,
        }
    }
}

/// Model settings; the channel count comes from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub input_len: usize,
    pub horizon: usize,
    pub num_scales: usize,
    pub global_len: usize,
    pub hidden: Option<usize>,
    pub d_ff: Option<usize>,
    pub dropout: f64,
    pub rnn: RnnKind,
    pub branches: Option<BranchSet>,
    pub window: usize,
    pub stride: usize,
    pub mixing: Mixing,
    pub fusion: Fusion,
    pub variant: Variant,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(96, 24, 1);
        Self {
            input_len: m.input_len,
            horizon: m.horizon,
            num_scales: m.num_scales,
            global_len: m.global_len,
            hidden: m.hidden,
            d_ff: m.d_ff,
            dropout: m.dropout,
            rnn: m.rnn,
            branches: None,
            window: m.window,
            stride: m.stride,
            mixing: m.mixing,
            fusion: m.fusion,
            variant: m.variant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Global-information lengths to try.
    pub values: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            values: (1..=10).collect(),
        }
    }
}

/// Flag values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub ratios: Option<String>,
    pub noise: Option<f64>,
    pub input_len: Option<usize>,
    pub horizon: Option<usize>,
    pub scales: Option<usize>,
    pub global_len: Option<usize>,
    pub variant: Option<Variant>,
    pub rnn: Option<RnnKind>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub patience: Option<usize>,
    pub threads: Option<usize>,
    pub sweep_values: Option<Vec<usize>>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Defaults, then the optional file, then flags; validated before returning.
    pub fn resolve(file: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(o);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        set(&mut self.seed, &o.seed);
        set(&mut self.out, &o.out);
        if o.dataset.is_some() {
            self.data.path = o.dataset.clone();
        }
        set(&mut self.data.ratios, &o.ratios);
        set(&mut self.data.noise_std, &o.noise);
        set(&mut self.model.input_len, &o.input_len);
        set(&mut self.model.horizon, &o.horizon);
        set(&mut self.model.num_scales, &o.scales);
        set(&mut self.model.global_len, &o.global_len);
        set(&mut self.model.variant, &o.variant);
        set(&mut self.model.rnn, &o.rnn);
        set(&mut self.train.max_epochs, &o.epochs);
        set(&mut self.train.batch_size, &o.batch_size);
        set(&mut self.train.lr, &o.lr);
        set(&mut self.train.patience, &o.patience);
        set(&mut self.train.threads, &o.threads);
        set(&mut self.sweep.values, &o.sweep_values);
        self.train.seed = self.seed;
    }

    /// Checks everything that does not depend on the dataset contents.
    pub fn validate(&self) -> Result<()> {
        self.ratios()?;
        self.train.validate()?;
        if !(self.data.noise_std >= 0.0 && self.data.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise std must be finite and non-negative, got {}",
                self.data.noise_std
            )));
        }
        // The channel count only affects parameter shapes, not validity.
        self.model_config(1).validate()
    }

    pub fn ratios(&self) -> Result<Ratios> {
        self.data.ratios.parse()
    }

    pub fn model_config(&self, channels: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            input_len: m.input_len,
            horizon: m.horizon,
            channels,
            num_scales: m.num_scales,
            global_len: m.global_len,
            hidden: m.hidden,
            d_ff: m.d_ff,
            dropout: m.dropout,
            rnn: m.rnn,
            branches: m.branches.clone().unwrap_or_else(BranchSet::full),
            window: m.window,
            stride: m.stride,
            mixing: m.mixing,
            fusion: m.fusion,
            variant: m.variant,
            seed: self.seed,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let mut spec = self
            .data
            .synthetic
            .clone()
            .unwrap_or_else(|| SyntheticSpec::multiscale(self.data.noise_std, self.seed));
        spec.seed = self.seed;
        spec
    }

    /// Human-readable description of where the series comes from.
    pub fn source(&self) -> String {
        match &self.data.path {
            Some(p) => p.display().to_string(),
            None => "synthetic".into(),
        }
    }

    /// Loads the raw series, then splits and z-scores it for the configured window.
    pub fn dataset(&self) -> Result<SeriesDataset> {
        self.dataset_for(self.model.input_len, self.model.horizon)
    }

    pub fn dataset_for(&self, input_len: usize, horizon: usize) -> Result<SeriesDataset> {
        self.raw_dataset()?
            .with_splits(self.ratios()?, input_len, horizon)?
            .normalized()
    }

    pub fn raw_dataset(&self) -> Result<SeriesDataset> {
        match &self.data.path {
            Some(p) => load_csv(p),
            None => gen_synthetic(&self.synthetic_spec()),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses a value through its serde name, e.g. "gru" or "per_horizon".
pub fn parse_named<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let mut cfg =
            RunConfig::from_toml("seed = 3\n[model]\nhorizon = 12\nglobal_len = 4\n").unwrap();
        assert_eq!(cfg.model.input_len, 96);
        cfg.apply(&Overrides {
            global_len: Some(5),
            ..Default::default()
        });
        assert_eq!(
            (cfg.seed, cfg.model.horizon, cfg.model.global_len),
            (3, 12, 5)
        );
        assert_eq!(cfg.train.seed, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "bogus = 1",
            "[model]\nlayers = 3",
            "[train]\nmomentum = 0.9",
            "[data]\nfile = 'x'",
        ] {
            assert!(
                matches!(RunConfig::from_toml(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn invalid_values_fail_validation() {
        for text in [
            "[data]\nratios = '1:1'",
            "[model]\nglobal_len = 40",
            "[train]\nlr = -1.0",
            "[data]\nnoise_std = -0.5",
        ] {
            let cfg = RunConfig::from_toml(text).unwrap();
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn named_values_parse() {
        assert_eq!(parse_named::<RnnKind>("gru").unwrap(), RnnKind::Gru);
        assert_eq!(parse_named::<Variant>("no_all").unwrap(), Variant::NoAll);
        assert!(parse_named::<RnnKind>("transformer").is_err());
    }
}
