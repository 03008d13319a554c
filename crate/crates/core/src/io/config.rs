use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetConfig, Variant};
use crate::error::{Error, Result};
use crate::models::{Activation, BlackBoxSpec, DecoderSpec};
use crate::nn::{InitKind, InitScheme};
use crate::train::{LossKind, TrainConfig, ZeroPadConfig, ZeroPadLayout};

pub const SECTIONS: [&str; 6] = ["data", "blackbox", "decoder", "train", "eval", "experiment"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub top_fraction: f64,
    pub ig_steps: usize,
    /// Abnormal test images in the overlap study (0 = all).
    pub overlap_images: usize,
    pub histogram_bins: usize,
    pub fpfn_per_category: usize,
    /// Test images in SSIM comparisons (0 = all).
    pub ssim_images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top_fraction: 0.01,
            ig_steps: 50,
            overlap_images: 0,
            histogram_bins: 50,
            fpfn_per_category: 10,
            ssim_images: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub stability_schemes: Vec<InitKind>,
    pub encoder_depths: Vec<usize>,
    pub decoder_depths: Vec<usize>,
    pub zeropad_layout: ZeroPadLayout,
    pub zeropad_sigmas: Vec<f64>,
    pub zeropad_threshold: f64,
    pub zeropad_stage1_lr: f64,
    pub zeropad_stage1_max_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            stability_schemes: InitKind::ALL.to_vec(),
            encoder_depths: crate::models::ENCODER_DEPTHS.to_vec(),
            decoder_depths: crate::models::DECODER_DEPTHS.to_vec(),
            zeropad_layout: ZeroPadLayout::Blocked,
            zeropad_sigmas: ZeroPadConfig::DEFAULT_SIGMAS.to_vec(),
            zeropad_threshold: 1e-2,
            zeropad_stage1_lr: 1e-3,
            zeropad_stage1_max_epochs: 50,
        }
    }
}

/// Every setting of a run. Seeds of all components come from
/// `experiment.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub blackbox: BlackBoxSpec,
    pub blackbox_train: TrainConfig,
    pub decoder: DecoderSpec,
    pub train: TrainConfig,
    pub init: InitScheme,
    pub eval: EvalConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DatasetConfig::default(),
            blackbox: BlackBoxSpec::default(),
            blackbox_train: TrainConfig::default(),
            decoder: DecoderSpec::default(),
            train: TrainConfig::default().with_loss(LossKind::Mse),
            init: InitScheme::glorot(0),
            eval: EvalConfig::default(),
            experiment: ExperimentConfig::default(),
        }
        .with_seed(0)
    }
}

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(section, key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Defaults overridden by the given text, then validated.
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("INI syntax: {e}")))?;
        let mut cfg = RunConfig::default();
        for (section, props) in ini.iter() {
            let section = match section {
                Some(s) => s,
                None if props.is_empty() => continue,
                None => return Err(Error::Config("keys must appear inside a section".into())),
            };
            if !SECTIONS.contains(&section) {
                return Err(Error::Config(format!("unknown section [{section}]")));
            }
            for (key, value) in props.iter() {
                cfg.set(section, key, value)?;
            }
        }
        let seed = cfg.experiment.seed;
        cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Propagates the master seed to every component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.experiment.seed = seed;
        self.data.seed = seed;
        self.init.seed = seed;
        self.train.seed = seed;
        self.blackbox_train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.blackbox.validate()?;
        self.decoder.validate()?;
        self.blackbox_train.validate()?;
        self.train.validate()?;
        let e = &self.eval;
        if !(e.top_fraction > 0.0 && e.top_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "[eval] top_fraction {} outside (0, 1]",
                e.top_fraction
            )));
        }
        if e.ig_steps == 0 || e.histogram_bins == 0 {
            return Err(Error::Config(
                "[eval] ig_steps and histogram_bins must be positive".into(),
            ));
        }
        let x = &self.experiment;
        if x.stability_schemes.len() < 2 {
            return Err(Error::Config(
                "[experiment] stability_schemes needs at least two schemes".into(),
            ));
        }
        if !(self.init.normal_std > 0.0 && self.init.uniform_limit > 0.0) {
            return Err(Error::Config(
                "[train] normal_std and uniform_limit must be positive".into(),
            ));
        }
        for d in &x.encoder_depths {
            BlackBoxSpec {
                conv_layers: *d,
                ..self.blackbox
            }
            .validate()?;
        }
        for c in &x.decoder_depths {
            DecoderSpec {
                conv_layers: *c,
                ..self.decoder
            }
            .validate()?;
        }
        if x.zeropad_sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config(
                "[experiment] zeropad_sigmas must be finite and non-negative".into(),
            ));
        }
        if x.zeropad_stage1_max_epochs == 0 || !(x.zeropad_stage1_lr.is_finite() && x.zeropad_stage1_lr >= 0.0) {
            return Err(Error::Config("[experiment] invalid zero-pad stage-1 settings".into()));
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let p = |v: &str| -> Result<f64> { parse(section, key, v) };
        let u = |v: &str| -> Result<usize> { parse(section, key, v) };
        let b = |v: &str| -> Result<bool> { parse(section, key, v) };
        let d = &mut self.data;
        match (section, key) {
            ("data", "image_size") => d.image_size = u(value)?,
            ("data", "train_per_class") => d.train_per_class = u(value)?,
            ("data", "val_per_class") => d.val_per_class = u(value)?,
            ("data", "test_per_class") => d.test_per_class = u(value)?,
            ("data", "variant") => d.variant = named(section, key, Variant::parse(value.trim()))?,
            ("data", "tumor_amplitude") => d.tumor.amplitude = p(value)?,
            ("data", "tumor_width") => d.tumor.width = p(value)?,
            ("data", "mean_clusters") => d.background.mean_clusters = p(value)?,
            ("data", "mean_blobs_per_cluster") => d.background.mean_blobs_per_cluster = p(value)?,
            ("data", "cluster_spread") => d.background.cluster_spread = p(value)?,
            ("data", "blob_width") => d.background.blob_width = p(value)?,
            ("data", "blob_amplitude") => d.background.blob_amplitude = p(value)?,
            ("blackbox", "conv_layers") => self.blackbox.conv_layers = u(value)?,
            ("blackbox", "filters") => self.blackbox.filters = u(value)?,
            ("blackbox", "kernel") => self.blackbox.kernel = u(value)?,
            ("blackbox", "lr") => self.blackbox_train.lr = p(value)?,
            ("blackbox", "patience") => self.blackbox_train.patience = u(value)?,
            ("blackbox", "max_epochs") => self.blackbox_train.max_epochs = u(value)?,
            ("blackbox", "batch_size") => self.blackbox_train.batch_size = u(value)?,
            ("blackbox", "restore_best") => self.blackbox_train.restore_best = b(value)?,
            ("decoder", "conv_layers") => self.decoder.conv_layers = u(value)?,
            ("decoder", "filters") => self.decoder.filters = u(value)?,
            ("decoder", "kernel") => self.decoder.kernel = u(value)?,
            ("decoder", "upsample_activation") => {
                self.decoder.upsample_activation = named(section, key, Activation::parse(value.trim()))?;
            }
            ("decoder", "penultimate_activation") => {
                self.decoder.penultimate_activation = named(section, key, Activation::parse(value.trim()))?;
            }
            ("train", "lr") => self.train.lr = p(value)?,
            ("train", "patience") => self.train.patience = u(value)?,
            ("train", "max_epochs") => self.train.max_epochs = u(value)?,
            ("train", "batch_size") => self.train.batch_size = u(value)?,
            ("train", "restore_best") => self.train.restore_best = b(value)?,
            ("train", "init") => self.init.kind = named(section, key, InitKind::parse(value.trim()))?,
            ("train", "normal_std") => self.init.normal_std = p(value)?,
            ("train", "uniform_limit") => self.init.uniform_limit = p(value)?,
            ("train", "zero_output_init") => self.init.zero_output = b(value)?,
            ("eval", "top_fraction") => self.eval.top_fraction = p(value)?,
            ("eval", "ig_steps") => self.eval.ig_steps = u(value)?,
            ("eval", "overlap_images") => self.eval.overlap_images = u(value)?,
            ("eval", "histogram_bins") => self.eval.histogram_bins = u(value)?,
            ("eval", "fpfn_per_category") => self.eval.fpfn_per_category = u(value)?,
            ("eval", "ssim_images") => self.eval.ssim_images = u(value)?,
            ("experiment", "seed") => self.experiment.seed = parse(section, key, value)?,
            ("experiment", "stability_schemes") => {
                self.experiment.stability_schemes = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| named(section, key, InitKind::parse(s)))
                    .collect::<Result<_>>()?
            }
            ("experiment", "encoder_depths") => self.experiment.encoder_depths = parse_list(section, key, value)?,
            ("experiment", "decoder_depths") => self.experiment.decoder_depths = parse_list(section, key, value)?,
            ("experiment", "zeropad_layout") => {
                self.experiment.zeropad_layout = named(section, key, ZeroPadLayout::parse(value.trim()))?
            }
            ("experiment", "zeropad_sigmas") => self.experiment.zeropad_sigmas = parse_list(section, key, value)?,
            ("experiment", "zeropad_threshold") => self.experiment.zeropad_threshold = p(value)?,
            ("experiment", "zeropad_stage1_lr") => self.experiment.zeropad_stage1_lr = p(value)?,
            ("experiment", "zeropad_stage1_max_epochs") => self.experiment.zeropad_stage1_max_epochs = u(value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}` in [{section}]"))),
        }
        Ok(())
    }

    /// The fully resolved configuration in the same INI form it is read from.
    pub fn to_ini(&self) -> String {
        let d = &self.data;
        let bt = &self.blackbox_train;
        let t = &self.train;
        let e = &self.eval;
        let x = &self.experiment;
        let mut s = String::new();
        let mut section = |name: &str, rows: Vec<(&str, String)>| {
            let _ = writeln!(s, "[{name}]");
            for (k, v) in rows {
                let _ = writeln!(s, "{k} = {v}");
            }
            s.push('\n');
        };
        section(
            "data",
            vec![
                ("image_size", d.image_size.to_string()),
                ("train_per_class", d.train_per_class.to_string()),
                ("val_per_class", d.val_per_class.to_string()),
                ("test_per_class", d.test_per_class.to_string()),
                ("variant", d.variant.name().into()),
                ("tumor_amplitude", d.tumor.amplitude.to_string()),
                ("tumor_width", d.tumor.width.to_string()),
                ("mean_clusters", d.background.mean_clusters.to_string()),
                (
                    "mean_blobs_per_cluster",
                    d.background.mean_blobs_per_cluster.to_string(),
                ),
                ("cluster_spread", d.background.cluster_spread.to_string()),
                ("blob_width", d.background.blob_width.to_string()),
                ("blob_amplitude", d.background.blob_amplitude.to_string()),
            ],
        );
        section(
            "blackbox",
            vec![
                ("conv_layers", self.blackbox.conv_layers.to_string()),
                ("filters", self.blackbox.filters.to_string()),
                ("kernel", self.blackbox.kernel.to_string()),
                ("lr", bt.lr.to_string()),
                ("patience", bt.patience.to_string()),
                ("max_epochs", bt.max_epochs.to_string()),
                ("batch_size", bt.batch_size.to_string()),
                ("restore_best", bt.restore_best.to_string()),
            ],
        );
        section(
            "decoder",
            vec![
                ("conv_layers", self.decoder.conv_layers.to_string()),
                ("filters", self.decoder.filters.to_string()),
                ("kernel", self.decoder.kernel.to_string()),
                ("upsample_activation", self.decoder.upsample_activation.name().into()),
                (
                    "penultimate_activation",
                    self.decoder.penultimate_activation.name().into(),
                ),
            ],
        );
        section(
            "train",
            vec![
                ("lr", t.lr.to_string()),
                ("patience", t.patience.to_string()),
                ("max_epochs", t.max_epochs.to_string()),
                ("batch_size", t.batch_size.to_string()),
                ("restore_best", t.restore_best.to_string()),
                ("init", self.init.kind.name().into()),
                ("normal_std", self.init.normal_std.to_string()),
                ("uniform_limit", self.init.uniform_limit.to_string()),
                ("zero_output_init", self.init.zero_output.to_string()),
            ],
        );
        section(
            "eval",
            vec![
                ("top_fraction", e.top_fraction.to_string()),
                ("ig_steps", e.ig_steps.to_string()),
                ("overlap_images", e.overlap_images.to_string()),
                ("histogram_bins", e.histogram_bins.to_string()),
                ("fpfn_per_category", e.fpfn_per_category.to_string()),
                ("ssim_images", e.ssim_images.to_string()),
            ],
        );
        let schemes: Vec<&str> = x.stability_schemes.iter().map(|k| k.name()).collect();
        section(
            "experiment",
            vec![
                ("seed", x.seed.to_string()),
                ("stability_schemes", schemes.join(", ")),
                ("encoder_depths", join(&x.encoder_depths)),
                ("decoder_depths", join(&x.decoder_depths)),
                ("zeropad_layout", x.zeropad_layout.name().into()),
                ("zeropad_sigmas", join(&x.zeropad_sigmas)),
                ("zeropad_threshold", x.zeropad_threshold.to_string()),
                ("zeropad_stage1_lr", x.zeropad_stage1_lr.to_string()),
                ("zeropad_stage1_max_epochs", x.zeropad_stage1_max_epochs.to_string()),
            ],
        );
        s
    }

    /// Distillation settings (MSE).
    pub fn distill_config(&self) -> TrainConfig {
        self.train.with_loss(LossKind::Mse)
    }

    /// Black-box training settings (BCE).
    pub fn blackbox_config(&self) -> TrainConfig {
        self.blackbox_train.with_loss(LossKind::Bce)
    }

    pub fn zero_pad_config(&self) -> ZeroPadConfig {
        let x = &self.experiment;
        let stage1 = TrainConfig {
            lr: x.zeropad_stage1_lr,
            max_epochs: x.zeropad_stage1_max_epochs,
            ..self.train
        };
        let mut z = ZeroPadConfig::new(self.decoder, stage1, self.distill_config(), self.init);
        z.layout = x.zeropad_layout;
        z.sigmas = x.zeropad_sigmas.clone();
        z.convergence_threshold = x.zeropad_threshold;
        z.eval_images = self.eval.ssim_images;
        z.top_fraction = self.eval.top_fraction;
        z
    }
}

fn named<T>(section: &str, key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Config(format!("[{section}] {key}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_echo_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_ini_str(&cfg.to_ini()).unwrap(), cfg);
        let text = "[data]\ntumor_amplitude = 0.7\n[experiment]\nseed = 9\ndecoder_depths = 0, 5\n";
        let cfg = RunConfig::from_ini_str(text).unwrap();
        assert_eq!(cfg.data.tumor.amplitude, 0.7);
        assert_eq!(cfg.data.seed, 9);
        assert_eq!(cfg.init.seed, 9);
        assert_eq!(cfg.experiment.decoder_depths, vec![0, 5]);
        assert_eq!(RunConfig::from_ini_str(&cfg.to_ini()).unwrap(), cfg);
    }

    #[test]
    fn shipped_desk_config_parses() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.ini");
        let cfg = RunConfig::from_path(&path).unwrap();
        assert_eq!(cfg.blackbox.filters, 4);
        assert_eq!(cfg.decoder.filters, 8);
        assert_eq!(cfg.train.seed, 2024);
        assert!(cfg.init.zero_output);
    }

    #[test]
    fn every_echoed_key_is_accepted() {
        let echo = RunConfig::default().to_ini();
        let mut section = String::new();
        for line in echo.lines().filter(|l| !l.is_empty()) {
            if line.starts_with('[') {
                section = line.to_string();
                continue;
            }
            let text = format!("{section}\n{line}\n");
            assert!(RunConfig::from_ini_str(&text).is_ok(), "{text}");
        }
    }

    #[test]
    fn unknown_keys_sections_and_bad_values_are_errors() {
        for text in [
            "[data]\ntumour_amplitude = 1\n",
            "[model]\nfilters = 3\n",
            "[data]\nimage_size = big\n",
            "[data]\nimage_size = 48\n",
            "[decoder]\nconv_layers = 4\n",
            "[train]\ninit = he_normal\n",
            "stray = 1\n",
        ] {
            let err = RunConfig::from_ini_str(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }
}
