//! Flat `key = value` run configuration shared by every command.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Unknown and repeated keys are errors, so a file that loads is
//! always fully resolved against the defaults.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::model::{ModelConfig, NoiseMode, NoiseSpec};
use crate::training::TrainConfig;

/// One configurable key with its help text.
#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
}

macro_rules! run_config {
    ($($name:ident: $ty:ty = $default:expr, $help:literal;)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(pub $name: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($name: $default,)* }
            }
        }

        pub const KEYS: &[Key] = &[$(Key { name: stringify!($name), help: $help },)*];

        impl RunConfig {
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($name) => Some(self.$name.to_string()),)*
                    _ => None,
                }
            }

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => self.$name = parse_value(key, value)?,)*
                    _ => return Err(unknown_key(key)),
                }
                Ok(())
            }
        }
    };
}

run_config! {
    hidden: usize = 32, "hidden units per recurrent layer";
    embed: usize = 32, "word embedding width";
    attr_embed: usize = 32, "attribute embedding width";
    layers: usize = 2, "stacked layers per recurrent network";
    noise_mode: NoiseMode = NoiseMode::Utterance, "utterance (phredGAN_u) or word (phredGAN_w) noise";
    noise_dim: usize = 32, "width of the injected noise vector";
    alpha: f64 = 1.0, "noise variance: stored in the model at train time, used for decoding elsewhere";
    softmax_samples: usize = 512, "negatives of the sampled training softmax";
    max_vocab: usize = 50000, "vocabulary cap including reserved tokens";
    lambda_g: f64 = 1.0, "weight of the adversarial generator loss (0 = MLE only)";
    lambda_m: f64 = 1.0, "weight of the MLE loss";
    acc_d_th: f64 = 0.99, "discriminator updates only while D_acc is below this";
    acc_g_th: f64 = 0.75, "adversarial generator updates only while D_acc reaches this";
    learning_rate: f64 = 0.5, "SGD step size";
    clip_norm: f64 = 5.0, "global gradient norm clip";
    epochs: u64 = 10, "training epochs";
    batch_size: usize = 8, "dialogues per step";
    seed: u64 = 1, "seed for initialization, shuffling, noise and sampling";
    noise_variance: f64 = 1.0, "noise variance while training";
    samples: usize = 64, "noise samples L per context";
    max_len: usize = 20, "longest decoded response in tokens";
    train_file: String = "data/synth.train".into(), "training corpus (JSONL)";
    dev_file: String = "data/synth.dev".into(), "development corpus for the noise search";
    test_file: String = "data/synth.test".into(), "test corpus for eval and generate";
    checkpoint: String = "runs/model.phrd".into(), "checkpoint path";
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
}

fn unknown_key(key: &str) -> Error {
    let known: Vec<&str> = KEYS.iter().map(|k| k.name).collect();
    Error::Config(format!("unknown key {key:?}; known keys: {}", known.join(", ")))
}

impl std::fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: {key} given twice", i + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string())?;
        Ok(())
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            mode: self.noise_mode,
            alpha: self.alpha,
            dim: self.noise_dim,
        }
    }

    pub fn model_config(&self, vocab_size: usize, attributes: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            attributes,
            hidden: self.hidden,
            embed: self.embed,
            attr_embed: self.attr_embed,
            layers: self.layers,
            noise: self.noise(),
            softmax_samples: self.softmax_samples,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda_g: self.lambda_g,
            lambda_m: self.lambda_m,
            acc_d_th: self.acc_d_th,
            acc_g_th: self.acc_g_th,
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            noise_variance: self.noise_variance,
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            alpha: self.alpha,
            samples: self.samples,
            max_len: self.max_len,
            seed: self.seed,
        }
    }
}

impl std::fmt::Display for RunConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for key in KEYS {
            writeln!(f, "{} = {}", key.name, self.get(key.name).expect("listed key"))?;
        }
        Ok(())
    }
}
