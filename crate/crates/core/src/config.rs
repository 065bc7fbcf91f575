//! Model and training hyperparameters with their `key = value` text form.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::container::{decode_kv, encode_kv};
use crate::error::{Error, Result};

macro_rules! text_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Argument(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

text_enum!(
    /// Where entity maps are merged with the background.
    FusionLevel {
        Late => "late",
        Mid => "mid",
        Early => "early",
        Pixel => "pixel",
    }
);

impl FusionLevel {
    /// Composition resolution as a divisor of the output size.
    pub fn downscale(self) -> usize {
        match self {
            FusionLevel::Late | FusionLevel::Pixel => 1,
            FusionLevel::Mid => 2,
            FusionLevel::Early => 4,
        }
    }
}

text_enum!(
    /// How per-step latents are produced.
    LatentScheme {
        Ours => "ours",
        NoZ => "no_z",
        Fp => "fp",
        Lp => "lp",
    }
);

impl LatentScheme {
    /// True when one global draw drives the whole rollout.
    pub fn is_global(self) -> bool {
        matches!(self, LatentScheme::Ours | LatentScheme::NoZ)
    }
}

text_enum!(
    Baseline {
        Ours => "ours",
        NoFactor => "no_factor",
        NoEdge => "no_edge",
    }
);

text_enum!(
    GraphKind {
        Full => "full",
        SelfOnly => "self",
    }
);

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub seed: u64,
    pub canvas: usize,
    pub horizon: usize,
    pub n_entities: usize,
    pub latent_dim: usize,
    pub appearance_dim: usize,
    pub crop_extent: usize,
    pub patch_size: usize,
    pub feature_channels: usize,
    pub refine_width: usize,
    pub refine_units: usize,
    pub decoder_width: usize,
    pub norm_groups: usize,
    pub predictor_hidden: usize,
    pub predictor_blocks: usize,
    pub leaky_slope: f64,
    pub lambda_loc: f64,
    pub lambda_kl: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub checkpoint_every: usize,
    pub start_jitter: usize,
    pub fusion: FusionLevel,
    pub latent_scheme: LatentScheme,
    pub graph: GraphKind,
    pub baseline: Baseline,
}

/// Constant background weight in the weighted-average composition.
pub const BACKGROUND_MASK: f64 = 0.1;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seed: 0,
            canvas: 64,
            horizon: 16,
            n_entities: 3,
            latent_dim: 8,
            appearance_dim: 32,
            crop_extent: 20,
            patch_size: 16,
            feature_channels: 32,
            refine_width: 16,
            refine_units: 3,
            decoder_width: 16,
            norm_groups: 4,
            predictor_hidden: 64,
            predictor_blocks: 4,
            leaky_slope: 0.2,
            lambda_loc: 100.0,
            lambda_kl: 1e-3,
            learning_rate: 1e-4,
            batch_size: 4,
            steps: 2000,
            checkpoint_every: 500,
            start_jitter: 0,
            fusion: FusionLevel::Late,
            latent_scheme: LatentScheme::Ours,
            graph: GraphKind::Full,
            baseline: Baseline::Ours,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

impl ModelConfig {
    /// A reduced configuration for smoke runs and tests: 32x32 canvas, short
    /// horizon, narrow layers.
    pub fn small() -> Self {
        ModelConfig {
            canvas: 32,
            horizon: 3,
            latent_dim: 4,
            appearance_dim: 8,
            crop_extent: 10,
            patch_size: 8,
            feature_channels: 8,
            refine_width: 8,
            refine_units: 2,
            predictor_hidden: 16,
            predictor_blocks: 2,
            decoder_width: 8,
            batch_size: 2,
            ..ModelConfig::default()
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "canvas",
        "horizon",
        "n_entities",
        "latent_dim",
        "appearance_dim",
        "crop_extent",
        "patch_size",
        "feature_channels",
        "refine_width",
        "refine_units",
        "decoder_width",
        "norm_groups",
        "predictor_hidden",
        "predictor_blocks",
        "leaky_slope",
        "lambda_loc",
        "lambda_kl",
        "learning_rate",
        "batch_size",
        "steps",
        "checkpoint_every",
        "start_jitter",
        "fusion",
        "latent_scheme",
        "graph",
        "baseline",
    ];

    /// Set one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "canvas" => self.canvas = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "n_entities" => self.n_entities = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "appearance_dim" => self.appearance_dim = parse(key, value)?,
            "crop_extent" => self.crop_extent = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "feature_channels" => self.feature_channels = parse(key, value)?,
            "refine_width" => self.refine_width = parse(key, value)?,
            "refine_units" => self.refine_units = parse(key, value)?,
            "decoder_width" => self.decoder_width = parse(key, value)?,
            "norm_groups" => self.norm_groups = parse(key, value)?,
            "predictor_hidden" => self.predictor_hidden = parse(key, value)?,
            "predictor_blocks" => self.predictor_blocks = parse(key, value)?,
            "leaky_slope" => self.leaky_slope = parse(key, value)?,
            "lambda_loc" => self.lambda_loc = parse(key, value)?,
            "lambda_kl" => self.lambda_kl = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "start_jitter" => self.start_jitter = parse(key, value)?,
            "fusion" => self.fusion = value.parse()?,
            "latent_scheme" => self.latent_scheme = value.parse()?,
            "graph" => self.graph = value.parse()?,
            "baseline" => self.baseline = value.parse()?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "canvas" => self.canvas.to_string(),
            "horizon" => self.horizon.to_string(),
            "n_entities" => self.n_entities.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "appearance_dim" => self.appearance_dim.to_string(),
            "crop_extent" => self.crop_extent.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "feature_channels" => self.feature_channels.to_string(),
            "refine_width" => self.refine_width.to_string(),
            "refine_units" => self.refine_units.to_string(),
            "decoder_width" => self.decoder_width.to_string(),
            "norm_groups" => self.norm_groups.to_string(),
            "predictor_hidden" => self.predictor_hidden.to_string(),
            "predictor_blocks" => self.predictor_blocks.to_string(),
            "leaky_slope" => self.leaky_slope.to_string(),
            "lambda_loc" => self.lambda_loc.to_string(),
            "lambda_kl" => self.lambda_kl.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "start_jitter" => self.start_jitter.to_string(),
            "fusion" => self.fusion.to_string(),
            "latent_scheme" => self.latent_scheme.to_string(),
            "graph" => self.graph.to_string(),
            "baseline" => self.baseline.to_string(),
            _ => return None,
        })
    }

    pub fn apply(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        encode_kv(Self::KEYS.iter().map(|&k| (k, self.get(k).unwrap())))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&decode_kv(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The adjacency the predictor uses, taking the No-Edge baseline into account.
    pub fn effective_graph(&self) -> GraphKind {
        if self.baseline == Baseline::NoEdge {
            GraphKind::SelfOnly
        } else {
            self.graph
        }
    }

    pub fn fusion_size(&self) -> usize {
        self.canvas / self.fusion.downscale()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.canvas < 32 || !self.canvas.is_multiple_of(8) {
            return fail(format!("canvas {} must be >= 32 and divisible by 8", self.canvas));
        }
        if self.patch_size < 4 || !(self.patch_size / 4).is_power_of_two() || !self.patch_size.is_multiple_of(4) {
            return fail(format!("patch_size {} must be 4 * 2^k", self.patch_size));
        }
        if self.crop_extent == 0 || self.crop_extent > self.canvas {
            return fail(format!("crop_extent {} must be in 1..=canvas", self.crop_extent));
        }
        let ups = self.fusion.downscale().trailing_zeros() as usize;
        if self.fusion != FusionLevel::Pixel && self.refine_units < ups.max(1) {
            return fail(format!(
                "{} fusion needs at least {} refinement units",
                self.fusion,
                ups.max(1)
            ));
        }
        if self.latent_dim == 0 || self.appearance_dim == 0 || self.predictor_blocks == 0 {
            return fail("latent_dim, appearance_dim and predictor_blocks must be positive".into());
        }
        if self.batch_size == 0 || self.n_entities == 0 {
            return fail("batch_size and n_entities must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.lambda_loc >= 0.0) || !(self.lambda_kl >= 0.0) {
            return fail("learning_rate and loss weights must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = ModelConfig::default();
        assert_eq!(c.lambda_loc, 100.0);
        assert_eq!(c.lambda_kl, 1e-3);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.latent_dim, 8);
        assert_eq!(c.appearance_dim, 32);
        assert_eq!(c.predictor_blocks, 4);
        assert_eq!(c.horizon, 16);
        c.validate().unwrap();
    }

    #[test]
    fn text_roundtrip() {
        let mut c = ModelConfig::default();
        c.fusion = FusionLevel::Mid;
        c.latent_scheme = LatentScheme::Lp;
        c.lambda_kl = 0.25;
        let back = ModelConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_values_are_rejected() {
        assert!("sideways".parse::<FusionLevel>().is_err());
        assert!("bogus".parse::<LatentScheme>().is_err());
        assert!("bogus".parse::<Baseline>().is_err());
        assert!(ModelConfig::from_text("nope = 1").is_err());
    }
}
