use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::graph::{Activation, NormKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhaseType {
    OnePhase,
    TwoPhase,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PosEncoding {
    Sinusoidal,
    Fourier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    ScaledDotProduct,
}

/// Lowercase with separators dropped, so `Leaky_ReLU`, `leaky-relu` and
/// `leaky_relu` name the same choice.
fn canonical(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

macro_rules! named_choice {
    ($ty:ty, $what:literal, $(($variant:expr, $name:literal)),+ $(,)?) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let c = canonical(s);
                $(if c == canonical($name) { return Ok($variant); })+
                Err(Error::Config(format!(
                    "unknown {} `{}` (expected one of: {})",
                    $what,
                    s,
                    [$($name),+].join(", ")
                )))
            }
        }
    };
}

named_choice!(PhaseType, "phase type", (PhaseType::OnePhase, "1phase"), (PhaseType::TwoPhase, "2phase"), (PhaseType::Iterative, "iterative"));
named_choice!(PosEncoding, "positional encoding", (PosEncoding::Sinusoidal, "sinusoidal"), (PosEncoding::Fourier, "fourier"));
named_choice!(AttentionKind, "attention", (AttentionKind::ScaledDotProduct, "scaled_dot_product"));
named_choice!(
    Activation,
    "activation",
    (Activation::Relu, "relu"),
    (Activation::LeakyRelu, "leaky_relu"),
    (Activation::Sigmoid, "sigmoid"),
    (Activation::Tanh, "tanh"),
);
named_choice!(NormKind, "norm type", (NormKind::Layer, "layer"), (NormKind::Batch, "batch"), (NormKind::Instance, "instance"));

mod named {
    use super::*;

    pub fn serialize<T: fmt::Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr<Err = Error>,
        D: Deserializer<'de>,
    {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Norm genes also accept a boolean "use layer norm" flag: `true` selects
/// layer norm and `false` batch norm.
mod norm_gene {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Flag(bool),
        Name(String),
    }

    pub fn serialize<S: Serializer>(v: &NormKind, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NormKind, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Flag(true) => Ok(NormKind::Layer),
            Repr::Flag(false) => Ok(NormKind::Batch),
            Repr::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// One point of the architecture and training search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genome {
    pub learning_rate: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub gaussian_noise: f64,
    pub time_warping: bool,
    pub time_masking: bool,
    pub window_size: usize,
    #[serde(with = "named")]
    pub pos_encoding: PosEncoding,
    pub dim_feedforward: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    #[serde(with = "named")]
    pub activation: Activation,
    #[serde(with = "named")]
    pub attention: AttentionKind,
    /// Must equal the feature count of the data.
    pub n_heads: usize,
    pub use_linear_embedding: bool,
    #[serde(with = "norm_gene")]
    pub norm_type: NormKind,
    pub self_conditioning: bool,
    pub ffn_layers: usize,
    #[serde(with = "named")]
    pub phase_type: PhaseType,
}

pub mod ranges {
    pub const LEARNING_RATE: (f64, f64) = (1e-5, 1e-1);
    pub const DROPOUT: (f64, f64) = (0.1, 0.5);
    pub const BATCH_SIZE: (usize, usize, usize) = (16, 128, 16);
    pub const GAUSSIAN_NOISE: (f64, f64) = (1e-4, 1e-1);
    pub const WINDOW_SIZE: (usize, usize) = (10, 30);
    pub const DIM_FEEDFORWARD: (usize, usize) = (8, 128);
    pub const LAYERS: (usize, usize) = (1, 3);
}

/// Genes that crossover exchanges and mutation resamples. `attention` has a
/// single choice and `n_heads` is fixed by the data, so neither is listed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gene {
    LearningRate,
    Dropout,
    BatchSize,
    GaussianNoise,
    TimeWarping,
    TimeMasking,
    WindowSize,
    PosEncoding,
    DimFeedforward,
    EncoderLayers,
    DecoderLayers,
    Activation,
    UseLinearEmbedding,
    NormType,
    SelfConditioning,
    FfnLayers,
    PhaseType,
}

impl Gene {
    pub const ALL: [Gene; 17] = [
        Gene::LearningRate,
        Gene::Dropout,
        Gene::BatchSize,
        Gene::GaussianNoise,
        Gene::TimeWarping,
        Gene::TimeMasking,
        Gene::WindowSize,
        Gene::PosEncoding,
        Gene::DimFeedforward,
        Gene::EncoderLayers,
        Gene::DecoderLayers,
        Gene::Activation,
        Gene::UseLinearEmbedding,
        Gene::NormType,
        Gene::SelfConditioning,
        Gene::FfnLayers,
        Gene::PhaseType,
    ];
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

fn pick<T: Copy, R: Rng + ?Sized>(rng: &mut R, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

impl Genome {
    /// Draws every gene from its search distribution; `n_heads` is set to the
    /// feature count `m`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, m: usize) -> Genome {
        let mut g = Genome {
            learning_rate: 0.0,
            dropout: 0.0,
            batch_size: 0,
            gaussian_noise: 0.0,
            time_warping: false,
            time_masking: false,
            window_size: 0,
            pos_encoding: PosEncoding::Sinusoidal,
            dim_feedforward: 0,
            encoder_layers: 0,
            decoder_layers: 0,
            activation: Activation::Relu,
            attention: AttentionKind::ScaledDotProduct,
            n_heads: m,
            use_linear_embedding: false,
            norm_type: NormKind::Layer,
            self_conditioning: false,
            ffn_layers: 0,
            phase_type: PhaseType::OnePhase,
        };
        for gene in Gene::ALL {
            g.resample(gene, rng);
        }
        g
    }

    pub fn resample<R: Rng + ?Sized>(&mut self, gene: Gene, rng: &mut R) {
        use ranges::*;
        match gene {
            Gene::LearningRate => self.learning_rate = log_uniform(rng, LEARNING_RATE),
            Gene::Dropout => self.dropout = rng.random_range(DROPOUT.0..=DROPOUT.1),
            Gene::BatchSize => {
                let (lo, hi, step) = BATCH_SIZE;
                self.batch_size = step * rng.random_range(lo / step..=hi / step);
            }
            Gene::GaussianNoise => self.gaussian_noise = log_uniform(rng, GAUSSIAN_NOISE),
            Gene::TimeWarping => self.time_warping = rng.random(),
            Gene::TimeMasking => self.time_masking = rng.random(),
            Gene::WindowSize => self.window_size = rng.random_range(WINDOW_SIZE.0..=WINDOW_SIZE.1),
            Gene::PosEncoding => self.pos_encoding = pick(rng, &[PosEncoding::Sinusoidal, PosEncoding::Fourier]),
            Gene::DimFeedforward => {
                let (lo, hi) = DIM_FEEDFORWARD;
                let v = log_uniform(rng, (lo as f64, hi as f64)).round() as usize;
                self.dim_feedforward = v.clamp(lo, hi);
            }
            Gene::EncoderLayers => self.encoder_layers = rng.random_range(LAYERS.0..=LAYERS.1),
            Gene::DecoderLayers => self.decoder_layers = rng.random_range(LAYERS.0..=LAYERS.1),
            Gene::Activation => self.activation = pick(rng, &Activation::ALL),
            Gene::UseLinearEmbedding => self.use_linear_embedding = rng.random(),
            Gene::NormType => self.norm_type = pick(rng, &NormKind::ALL),
            Gene::SelfConditioning => self.self_conditioning = rng.random(),
            Gene::FfnLayers => self.ffn_layers = rng.random_range(LAYERS.0..=LAYERS.1),
            Gene::PhaseType => {
                self.phase_type = pick(rng, &[PhaseType::OnePhase, PhaseType::TwoPhase, PhaseType::Iterative])
            }
        }
    }

    /// Copies one gene from `other`.
    pub fn inherit(&mut self, gene: Gene, other: &Genome) {
        match gene {
            Gene::LearningRate => self.learning_rate = other.learning_rate,
            Gene::Dropout => self.dropout = other.dropout,
            Gene::BatchSize => self.batch_size = other.batch_size,
            Gene::GaussianNoise => self.gaussian_noise = other.gaussian_noise,
            Gene::TimeWarping => self.time_warping = other.time_warping,
            Gene::TimeMasking => self.time_masking = other.time_masking,
            Gene::WindowSize => self.window_size = other.window_size,
            Gene::PosEncoding => self.pos_encoding = other.pos_encoding,
            Gene::DimFeedforward => self.dim_feedforward = other.dim_feedforward,
            Gene::EncoderLayers => self.encoder_layers = other.encoder_layers,
            Gene::DecoderLayers => self.decoder_layers = other.decoder_layers,
            Gene::Activation => self.activation = other.activation,
            Gene::UseLinearEmbedding => self.use_linear_embedding = other.use_linear_embedding,
            Gene::NormType => self.norm_type = other.norm_type,
            Gene::SelfConditioning => self.self_conditioning = other.self_conditioning,
            Gene::FfnLayers => self.ffn_layers = other.ffn_layers,
            Gene::PhaseType => self.phase_type = other.phase_type,
        }
    }

    /// Every out-of-range field, in declaration order.
    pub fn violations(&self) -> Vec<Error> {
        use ranges::*;
        let mut out = Vec::new();
        let mut check = |ok: bool, field: &'static str, value: String, range: &'static str| {
            if !ok {
                out.push(Error::Validation { field, value, range });
            }
        };
        let within = |v: f64, (lo, hi): (f64, f64)| v.is_finite() && v >= lo && v <= hi;
        let layers = |v: usize| (LAYERS.0..=LAYERS.1).contains(&v);
        check(
            within(self.learning_rate, LEARNING_RATE),
            "learning_rate",
            self.learning_rate.to_string(),
            "[1e-5, 1e-1]",
        );
        check(within(self.dropout, DROPOUT), "dropout", self.dropout.to_string(), "[0.1, 0.5]");
        check(
            (BATCH_SIZE.0..=BATCH_SIZE.1).contains(&self.batch_size) && self.batch_size.is_multiple_of(BATCH_SIZE.2),
            "batch_size",
            self.batch_size.to_string(),
            "{16, 32, ..., 128}",
        );
        check(
            within(self.gaussian_noise, GAUSSIAN_NOISE),
            "gaussian_noise",
            self.gaussian_noise.to_string(),
            "[1e-4, 1e-1]",
        );
        check(
            (WINDOW_SIZE.0..=WINDOW_SIZE.1).contains(&self.window_size),
            "window_size",
            self.window_size.to_string(),
            "[10, 30]",
        );
        check(
            (DIM_FEEDFORWARD.0..=DIM_FEEDFORWARD.1).contains(&self.dim_feedforward),
            "dim_feedforward",
            self.dim_feedforward.to_string(),
            "[8, 128]",
        );
        check(layers(self.encoder_layers), "encoder_layers", self.encoder_layers.to_string(), "[1, 3]");
        check(layers(self.decoder_layers), "decoder_layers", self.decoder_layers.to_string(), "[1, 3]");
        check(self.n_heads >= 1, "n_heads", self.n_heads.to_string(), "feature count (>= 1)");
        check(layers(self.ffn_layers), "ffn_layers", self.ffn_layers.to_string(), "[1, 3]");
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Validates the ranges and that the head count equals the feature count.
    pub fn validate_for(&self, m: usize) -> Result<()> {
        self.validate()?;
        if self.n_heads != m {
            return Err(Error::Validation {
                field: "n_heads",
                value: self.n_heads.to_string(),
                range: "equal to the feature count of the data",
            });
        }
        Ok(())
    }

    /// Whether the model carries a condition channel next to the input.
    pub fn has_condition(&self) -> bool {
        self.self_conditioning || self.phase_type != PhaseType::OnePhase
    }

    pub fn decoder_count(&self) -> usize {
        if self.phase_type == PhaseType::TwoPhase {
            2
        } else {
            1
        }
    }

    pub fn from_json(text: &str) -> Result<Genome> {
        let g: Genome = serde_json::from_str(text)?;
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genome serializes")
    }
}
