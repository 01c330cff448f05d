//! Plain-text `key = value` run configuration.
//!
//! Every key has a default, unknown or repeated keys are rejected, and
//! [`RunConfig::to_text`] writes the fully resolved configuration back out.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use vqdiff_core::denoiser::{DenoiserConfig, DenoiserTrainConfig};
use vqdiff_core::diffusion::NoiseSchedule;
use vqdiff_core::eval::{ClassifierConfig, ClassifierTrainConfig};
use vqdiff_core::numerics::AdamWConfig;
use vqdiff_core::vqvae::{VqTrainConfig, VqVaeConfig};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn optimizer(self) -> AdamWConfig {
        match self {
            Self::Desk => AdamWConfig::desk(),
            Self::Paper => AdamWConfig::paper(),
        }
    }
}

impl FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(format!("profile must be desk or paper, got {other}")),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        })
    }
}

macro_rules! run_config {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            /// Every key in serialization order.
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $( stringify!($field) => {
                        self.$field = parse_value(value)?;
                        Ok(())
                    } )*
                    _ => Err(format!("unknown key {key}")),
                }
            }

            /// The resolved configuration, one `key = value` line per field.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( writeln!(out, "{} = {}", stringify!($field), show_value(&self.$field)).unwrap(); )*
                out
            }
        }
    };
}

fn parse_value<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("bad value {value:?}: {e}"))
}

trait ShowValue {
    fn show(&self) -> String;
}

impl ShowValue for PathBuf {
    fn show(&self) -> String {
        self.display().to_string()
    }
}

macro_rules! show_display {
    ($($t:ty),*) => { $( impl ShowValue for $t { fn show(&self) -> String { self.to_string() } } )* };
}
show_display!(u64, u32, u16, usize, f64, Profile);

fn show_value<T: ShowValue>(v: &T) -> String {
    v.show()
}

run_config! {
    seed: u64 = 0,
    /// Optimizer hyperparameters: `desk` or `paper`.
    profile: Profile = Profile::Desk,
    /// One subdirectory of MIDI files per composer label.
    midi_dir: PathBuf = PathBuf::from("midi"),
    out_dir: PathBuf = PathBuf::from("run"),
    segment_frames: usize = vqdiff_core::music::DEFAULT_SEGMENT_FRAMES,
    frame_rate: f64 = vqdiff_core::music::DEFAULT_FRAME_RATE,
    codebook_size: usize = 32,
    code_dim: usize = 16,
    downsample: usize = 4,
    vq_hidden: usize = 32,
    vq_kernel: usize = 4,
    vq_beta: f64 = 0.25,
    vq_steps: usize = 2000,
    vq_batch: usize = 8,
    dead_code_steps: usize = 500,
    diffusion_steps: usize = vqdiff_core::diffusion::DEFAULT_STEPS,
    alpha_bar_final: f64 = vqdiff_core::diffusion::DEFAULT_ALPHA_BAR_FINAL,
    gamma_bar_final: f64 = vqdiff_core::diffusion::DEFAULT_GAMMA_BAR_FINAL,
    aux_weight: f64 = vqdiff_core::diffusion::DEFAULT_AUX_WEIGHT,
    denoiser_blocks: usize = 2,
    d_model: usize = 64,
    heads: usize = 4,
    ffn_mult: usize = 4,
    denoiser_steps: usize = 2000,
    denoiser_batch: usize = 8,
    /// Keep only this many most likely classes when sampling; 0 disables truncation.
    top_k: usize = 0,
    classifier_channels: usize = 32,
    classifier_pool: usize = 4,
    classifier_steps: usize = 300,
    classifier_batch: usize = 16,
    /// Every n-th segment per label is held out from classifier training.
    holdout_stride: usize = 5,
    ticks_per_quarter: u16 = 480,
    tempo: u32 = crate::midi::DEFAULT_TEMPO,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_owned()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|m| Error::Config(format!("line {}: {m}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Hex SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.codebook_size < 2 {
            return bad(format!("codebook_size must be >= 2, got {}", self.codebook_size));
        }
        if self.diffusion_steps == 0 {
            return bad("diffusion_steps must be >= 1".into());
        }
        if !(self.frame_rate > 0.0) {
            return bad(format!("frame_rate must be positive, got {}", self.frame_rate));
        }
        if self.segment_frames == 0 || !self.segment_frames.is_multiple_of(self.downsample.max(1)) {
            return bad(format!(
                "segment_frames {} must be a positive multiple of downsample {}",
                self.segment_frames, self.downsample
            ));
        }
        if self.holdout_stride < 2 {
            return bad("holdout_stride must be >= 2".into());
        }
        self.vqvae()
            .validate()
            .and_then(|_| self.denoiser(2).validate())
            .map_err(|e| Error::Config(e.to_string()))?;
        self.schedule().map(|_| ())
    }

    pub fn vqvae(&self) -> VqVaeConfig {
        VqVaeConfig {
            codebook_size: self.codebook_size,
            code_dim: self.code_dim,
            downsample: self.downsample,
            hidden: self.vq_hidden,
            kernel: self.vq_kernel,
            beta: self.vq_beta,
        }
    }

    pub fn vq_train(&self) -> VqTrainConfig {
        VqTrainConfig {
            steps: self.vq_steps,
            batch_size: self.vq_batch,
            optimizer: AdamWConfig {
                weight_decay: 0.0,
                ..self.profile.optimizer()
            },
            dead_code_steps: self.dead_code_steps,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.segment_frames / self.downsample.max(1)
    }

    pub fn denoiser(&self, styles: usize) -> DenoiserConfig {
        DenoiserConfig {
            classes: self.codebook_size,
            seq_len: self.seq_len(),
            styles,
            steps: self.diffusion_steps,
            d_model: self.d_model,
            blocks: self.denoiser_blocks,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn denoiser_train(&self) -> DenoiserTrainConfig {
        DenoiserTrainConfig {
            steps: self.denoiser_steps,
            batch_size: self.denoiser_batch,
            optimizer: self.profile.optimizer(),
            aux_weight: self.aux_weight,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(
            self.diffusion_steps,
            self.codebook_size,
            self.gamma_bar_final,
            self.alpha_bar_final,
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn classifier(&self, classes: usize) -> ClassifierConfig {
        ClassifierConfig {
            channels: self.classifier_channels,
            pool: self.classifier_pool,
            ..ClassifierConfig::new(classes)
        }
    }

    pub fn classifier_train(&self) -> ClassifierTrainConfig {
        ClassifierTrainConfig {
            steps: self.classifier_steps,
            batch_size: self.classifier_batch,
            optimizer: self.profile.optimizer(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig {
            seed: 99,
            profile: Profile::Paper,
            out_dir: PathBuf::from("some dir/x"),
            alpha_bar_final: 0.015,
            segment_frames: 64,
            ..RunConfig::default()
        };
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.to_text().lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn comments_defaults_and_errors() {
        let cfg = RunConfig::parse("# run\nseed = 7  # trailing\n\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.codebook_size, 32);
        for bad in [
            "seed = x",
            "bogus = 1",
            "seed = 1\nseed = 2",
            "seed",
            "codebook_size = 1",
            "segment_frames = 66",
            "profile = huge",
            "alpha_bar_final = 0.5\ngamma_bar_final = 0.6",
            "d_model = 30\nheads = 4",
        ] {
            let err = RunConfig::parse(bad).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad}: {err}");
        }
    }

    #[test]
    fn paper_profile_uses_full_scale_optimizer() {
        let cfg = RunConfig::parse("profile = paper").unwrap();
        let opt = cfg.denoiser_train().optimizer;
        assert_eq!((opt.lr, opt.beta1, opt.beta2, opt.warmup_steps), (4.5e-4, 0.9, 0.96, 5000));
        assert_eq!(cfg.vq_train().optimizer.weight_decay, 0.0);
    }
}
