//! Compositional stochastic video prediction.
//!
//! Scenes are sets of entities (a location and an appearance vector each) plus a
//! background. A graph network predicts entity states forward in time, driven by
//! a per-step latent derived from one global Gaussian draw, and a decoder renders
//! every entity into a feature patch and mask, warps both into place and blends
//! them with the background before a convolutional refinement.

pub mod autograd;
pub mod config;
pub mod container;
pub mod datagen;
pub mod decoder;
pub mod error;
pub mod evalkit;
pub mod float;
pub mod frontend;
pub mod gradcheck;
mod kernels;
pub mod latent;
pub mod model;
pub mod nn;
pub mod predictor;
pub mod tensor;
pub mod training;

pub use autograd::{Graph, Var};
pub use config::{Baseline, FusionLevel, GraphKind, LatentScheme, ModelConfig};
pub use datagen::{DatasetManifest, VideoSequence};
pub use error::{Error, Result};
pub use evalkit::{best_of_k, BestOfKResult, EvalOptions, EvalReport, FrameMetrics};
pub use frontend::{Adjacency, EntityState, SceneState};
pub use latent::{ChaChaNoise, GaussianParams, NoiseSource};
pub use model::{build_model, LatentMode, Model, Outputs, Rollouts};
pub use tensor::Tensor;
pub use training::{train, train_run, RunDir, TrainOptions, Trainer};
