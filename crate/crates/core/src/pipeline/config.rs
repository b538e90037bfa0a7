//! Experiment configuration as flat `key = value` text.
//!
//! Keys carry a section prefix (`feature.`, `loss.`, `stage.`, `arch.`).
//! Serialisation lists every key in a fixed order so two configs can be
//! compared line by line.

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::losses::LossWeights;
use crate::vocoder::GenerateMode;

/// Hyper-parameters of the training and cloning stages.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Upper bound on initial training epochs (early stopping may end sooner).
    pub train_epochs: usize,
    /// Epochs of separate vocoder training during initial training.
    pub vocoder_epochs: usize,
    pub adapt_acoustic_epochs: usize,
    pub adapt_vocoder_epochs: usize,
    pub weld_epochs: usize,
    /// Probability that a vocoder conditioning frame is generated during welding.
    pub mixin_rate: f64,
    /// Multiplies the text encoder's σ at synthesis time.
    pub inference_std_scale: f64,
    pub early_stop_patience: usize,
    /// Every n-th utterance of each speaker is held out for validation.
    pub validation_every: usize,
    /// Scored frames per vocoder training crop.
    pub crop_frames: usize,
    pub seed: u64,
    pub weld_enabled: bool,
    pub adapt_cycle: bool,
    pub vocoder_mode: GenerateMode,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            learning_rate: 0.1,
            batch_size: 8,
            train_epochs: 200,
            vocoder_epochs: 20,
            adapt_acoustic_epochs: 256,
            adapt_vocoder_epochs: 128,
            weld_epochs: 64,
            mixin_rate: 0.9,
            inference_std_scale: 0.1,
            early_stop_patience: 10,
            validation_every: 10,
            crop_frames: 4,
            seed: 0,
            weld_enabled: true,
            adapt_cycle: true,
            vocoder_mode: GenerateMode::Sample,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("stage.learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mixin_rate) {
            return Err(Error::config("stage.mixin_rate must lie in [0, 1]"));
        }
        if !(self.inference_std_scale >= 0.0 && self.inference_std_scale.is_finite()) {
            return Err(Error::config("stage.inference_std_scale must be ≥ 0"));
        }
        if self.batch_size == 0 || self.crop_frames == 0 || self.validation_every < 2 {
            return Err(Error::config(
                "stage.batch_size and stage.crop_frames must be positive, stage.validation_every ≥ 2",
            ));
        }
        Ok(())
    }
}

/// Network sizes and structural toggles.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchOptions {
    pub channels: usize,
    pub latent: usize,
    pub text_decoder: bool,
    pub vocoder_channels: usize,
    pub vocoder_skip: usize,
    pub vocoder_dilations: Vec<usize>,
}

impl Default for ArchOptions {
    fn default() -> Self {
        ArchOptions {
            channels: 64,
            latent: 64,
            text_decoder: true,
            vocoder_channels: 32,
            vocoder_skip: 32,
            vocoder_dilations: vec![1, 2, 4, 8, 16, 32, 64, 1, 2, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub features: FeatureConfig,
    pub weights: LossWeights,
    pub stage: StageConfig,
    pub arch: ArchOptions,
}

pub const PRESETS: [&str; 3] = ["scenario-a", "scenario-b", "toy"];

impl ExperimentConfig {
    /// Named presets. `scenario-a` and `scenario-b` differ only in the
    /// vocoder and welding epoch budgets; `toy` shrinks the networks and
    /// budgets so a full run on the toy corpus takes minutes.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        c.stage.learning_rate = 1e-3;
        match name {
            "scenario-a" => {}
            "scenario-b" => {
                c.stage.adapt_vocoder_epochs = 64;
                c.stage.weld_epochs = 32;
            }
            "toy" => {
                c.arch.channels = 32;
                c.arch.latent = 16;
                c.stage.learning_rate = 5e-3;
                c.stage.batch_size = 4;
                c.stage.train_epochs = 100;
                c.stage.vocoder_epochs = 2;
                c.stage.adapt_acoustic_epochs = 30;
                c.stage.adapt_vocoder_epochs = 4;
                c.stage.weld_epochs = 4;
            }
            other => {
                return Err(Error::config(format!(
                    "unknown preset `{other}` (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    /// Overrides of the adaptation budgets for the scenario letters `A`/`B`.
    pub fn apply_epoch_preset(&mut self, letter: &str) -> Result<()> {
        let (ac, voc, weld) = match letter {
            "A" | "a" => (256, 128, 64),
            "B" | "b" => (256, 64, 32),
            other => {
                return Err(Error::config(format!(
                    "unknown epoch preset `{other}` (expected A or B)"
                )))
            }
        };
        self.stage.adapt_acoustic_epochs = ac;
        self.stage.adapt_vocoder_epochs = voc;
        self.stage.weld_epochs = weld;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.weights.validate()?;
        self.stage.validate()?;
        let a = &self.arch;
        if a.channels < 2 || !a.channels.is_multiple_of(2) || a.latent == 0 {
            return Err(Error::config(
                "arch.channels must be even and ≥ 2, arch.latent positive",
            ));
        }
        if a.vocoder_channels == 0 || a.vocoder_skip == 0 || a.vocoder_dilations.is_empty() {
            return Err(Error::config("vocoder sizes must be positive"));
        }
        Ok(())
    }

    /// Every key with its current value, in serialisation order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = &self.features;
        let w = &self.weights;
        let s = &self.stage;
        let a = &self.arch;
        let dil: Vec<String> = a.vocoder_dilations.iter().map(usize::to_string).collect();
        vec![
            ("feature.sample_rate", f.sample_rate.to_string()),
            ("feature.window_ms", f.window_ms.to_string()),
            ("feature.shift_ms", f.shift_ms.to_string()),
            ("feature.n_mels", f.n_mels.to_string()),
            ("feature.f_min", f.f_min.to_string()),
            ("feature.f_max", f.f_max.map_or("none".into(), |v| v.to_string())),
            ("feature.eps_floor", f.eps_floor.to_string()),
            ("feature.center", f.center.to_string()),
            ("feature.bits", f.bits.to_string()),
            ("loss.alpha_sts", w.alpha_sts.to_string()),
            ("loss.alpha_stt", w.alpha_stt.to_string()),
            ("loss.beta", w.beta.to_string()),
            ("loss.gamma", w.gamma.to_string()),
            ("loss.alpha_sup", w.alpha_sup.to_string()),
            ("stage.learning_rate", s.learning_rate.to_string()),
            ("stage.batch_size", s.batch_size.to_string()),
            ("stage.train_epochs", s.train_epochs.to_string()),
            ("stage.vocoder_epochs", s.vocoder_epochs.to_string()),
            ("stage.adapt_acoustic_epochs", s.adapt_acoustic_epochs.to_string()),
            ("stage.adapt_vocoder_epochs", s.adapt_vocoder_epochs.to_string()),
            ("stage.weld_epochs", s.weld_epochs.to_string()),
            ("stage.mixin_rate", s.mixin_rate.to_string()),
            ("stage.inference_std_scale", s.inference_std_scale.to_string()),
            ("stage.early_stop_patience", s.early_stop_patience.to_string()),
            ("stage.validation_every", s.validation_every.to_string()),
            ("stage.crop_frames", s.crop_frames.to_string()),
            ("stage.seed", s.seed.to_string()),
            ("stage.weld_enabled", s.weld_enabled.to_string()),
            ("stage.adapt_cycle", s.adapt_cycle.to_string()),
            (
                "stage.vocoder_mode",
                match s.vocoder_mode {
                    GenerateMode::Sample => "sample".into(),
                    GenerateMode::Argmax => "argmax".into(),
                },
            ),
            ("arch.channels", a.channels.to_string()),
            ("arch.latent", a.latent.to_string()),
            ("arch.text_decoder", a.text_decoder.to_string()),
            ("arch.vocoder_channels", a.vocoder_channels.to_string()),
            ("arch.vocoder_skip", a.vocoder_skip.to_string()),
            ("arch.vocoder_dilations", dil.join(",")),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
        }
        let v = value.trim();
        let f = &mut self.features;
        let w = &mut self.weights;
        let s = &mut self.stage;
        let a = &mut self.arch;
        match key {
            "feature.sample_rate" => f.sample_rate = num(key, v)?,
            "feature.window_ms" => f.window_ms = num(key, v)?,
            "feature.shift_ms" => f.shift_ms = num(key, v)?,
            "feature.n_mels" => f.n_mels = num(key, v)?,
            "feature.f_min" => f.f_min = num(key, v)?,
            "feature.f_max" => f.f_max = if v == "none" { None } else { Some(num(key, v)?) },
            "feature.eps_floor" => f.eps_floor = num(key, v)?,
            "feature.center" => f.center = num(key, v)?,
            "feature.bits" => f.bits = num(key, v)?,
            "loss.alpha_sts" => w.alpha_sts = num(key, v)?,
            "loss.alpha_stt" => w.alpha_stt = num(key, v)?,
            "loss.beta" => w.beta = num(key, v)?,
            "loss.gamma" => w.gamma = num(key, v)?,
            "loss.alpha_sup" => w.alpha_sup = num(key, v)?,
            "stage.learning_rate" => s.learning_rate = num(key, v)?,
            "stage.batch_size" => s.batch_size = num(key, v)?,
            "stage.train_epochs" => s.train_epochs = num(key, v)?,
            "stage.vocoder_epochs" => s.vocoder_epochs = num(key, v)?,
            "stage.adapt_acoustic_epochs" => s.adapt_acoustic_epochs = num(key, v)?,
            "stage.adapt_vocoder_epochs" => s.adapt_vocoder_epochs = num(key, v)?,
            "stage.weld_epochs" => s.weld_epochs = num(key, v)?,
            "stage.mixin_rate" => s.mixin_rate = num(key, v)?,
            "stage.inference_std_scale" => s.inference_std_scale = num(key, v)?,
            "stage.early_stop_patience" => s.early_stop_patience = num(key, v)?,
            "stage.validation_every" => s.validation_every = num(key, v)?,
            "stage.crop_frames" => s.crop_frames = num(key, v)?,
            "stage.seed" => s.seed = num(key, v)?,
            "stage.weld_enabled" => s.weld_enabled = num(key, v)?,
            "stage.adapt_cycle" => s.adapt_cycle = num(key, v)?,
            "stage.vocoder_mode" => {
                s.vocoder_mode = match v {
                    "sample" => GenerateMode::Sample,
                    "argmax" => GenerateMode::Argmax,
                    _ => return Err(Error::config("`stage.vocoder_mode` must be sample or argmax")),
                }
            }
            "arch.channels" => a.channels = num(key, v)?,
            "arch.latent" => a.latent = num(key, v)?,
            "arch.text_decoder" => a.text_decoder = num(key, v)?,
            "arch.vocoder_channels" => a.vocoder_channels = num(key, v)?,
            "arch.vocoder_skip" => a.vocoder_skip = num(key, v)?,
            "arch.vocoder_dilations" => {
                a.vocoder_dilations = v.split(',').map(|d| num(key, d.trim())).collect::<Result<_>>()?
            }
            _ => return Err(Error::config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Keys whose values differ between `self` and `other`.
    pub fn diff(&self, other: &ExperimentConfig) -> Vec<&'static str> {
        self.entries()
            .into_iter()
            .zip(other.entries())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_for_every_preset() {
        for p in PRESETS {
            let c = ExperimentConfig::preset(p).unwrap();
            assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn scenario_presets_differ_only_in_budgets() {
        let a = ExperimentConfig::preset("scenario-a").unwrap();
        let b = ExperimentConfig::preset("scenario-b").unwrap();
        assert_eq!(a.diff(&b), vec!["stage.adapt_vocoder_epochs", "stage.weld_epochs"]);
        assert_eq!(a.stage.adapt_acoustic_epochs, 256);
        assert_eq!((b.stage.adapt_vocoder_epochs, b.stage.weld_epochs), (64, 32));
    }

    #[test]
    fn defaults_match_documented_values() {
        let c = ExperimentConfig::default();
        assert_eq!(c.stage.learning_rate, 0.1);
        assert_eq!(c.stage.mixin_rate, 0.9);
        assert_eq!(c.stage.inference_std_scale, 0.1);
        assert_eq!(c.stage.early_stop_patience, 10);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut c = ExperimentConfig::default();
        assert!(c.set("stage.nope", "1").is_err());
        assert!(c.set("stage.mixin_rate", "lots").is_err());
        c.set("stage.mixin_rate", "1.5").unwrap();
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::parse("loss.beta = -1").is_err());
        assert!(ExperimentConfig::parse("no equals sign").is_err());
    }
}
