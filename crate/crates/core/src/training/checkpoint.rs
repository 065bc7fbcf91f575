//! Checkpoint files: parameters, optimizer moments, config snapshot and RNG state.
//!
//! A checkpoint is one tensor container (see [`crate::container`]) holding
//! `param/<name>` (F32), `adam_m/<name>` and `adam_v/<name>` (F32, present once
//! the optimizer has touched the parameter) and the metadata keys `format`,
//! `config` (the `key = value` config text), `step`, `adam_step`, `rng_seed`
//! and `rng_position`. Training batches and noise are pure functions of
//! `(rng_seed, rng_position)`, so these two keys are the complete RNG state.

use std::path::Path;

use crate::config::ModelConfig;
use crate::container::{Container, RawTensor};
use crate::error::{Error, Result};
use crate::model::{build_model, Model};
use crate::nn::Adam;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "compvid-checkpoint-v1";

/// Training progress stored next to the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub rng_seed: u64,
    pub adam_step: u64,
    pub adam_m: Vec<Tensor<f32>>,
    pub adam_v: Vec<Tensor<f32>>,
}

impl TrainState {
    pub fn fresh(model: &Model) -> Self {
        let empty = vec![Tensor::zeros([0]); model.params.len()];
        TrainState {
            step: 0,
            rng_seed: model.config.seed,
            adam_step: 0,
            adam_m: empty.clone(),
            adam_v: empty,
        }
    }

    pub fn from_adam(step: u64, rng_seed: u64, adam: &Adam<f32>) -> Self {
        let (m, v) = adam.moments();
        TrainState {
            step,
            rng_seed,
            adam_step: adam.steps_taken(),
            adam_m: m.to_vec(),
            adam_v: v.to_vec(),
        }
    }
}

fn tensor_raw(t: &Tensor<f32>) -> RawTensor {
    RawTensor::f32(t.shape().to_vec(), t.data())
}

pub fn save_checkpoint(path: &Path, model: &Model, state: &TrainState) -> Result<()> {
    let mut c = Container::new();
    for (i, (name, value)) in model.params.iter().enumerate() {
        c.insert(format!("param/{name}"), tensor_raw(value));
        if let Some(m) = state.adam_m.get(i).filter(|m| !m.is_empty()) {
            c.insert(format!("adam_m/{name}"), tensor_raw(m));
        }
        if let Some(v) = state.adam_v.get(i).filter(|v| !v.is_empty()) {
            c.insert(format!("adam_v/{name}"), tensor_raw(v));
        }
    }
    let meta = [
        ("format", CHECKPOINT_FORMAT.to_string()),
        ("config", model.config.to_text()),
        ("step", state.step.to_string()),
        ("adam_step", state.adam_step.to_string()),
        ("rng_seed", state.rng_seed.to_string()),
        ("rng_position", state.step.to_string()),
    ];
    for (k, v) in meta {
        c.metadata.insert(k.into(), v);
    }
    c.write(path)
}

fn parse_u64(c: &Container, key: &str) -> Result<u64> {
    c.meta(key)?
        .parse()
        .map_err(|_| Error::format(key, "expected an unsigned integer"))
}

fn read_tensor(raw: &RawTensor, expect: &[usize], field: &str) -> Result<Tensor<f32>> {
    if raw.shape != expect {
        return Err(Error::format(field, format!("shape {:?}, model expects {expect:?}", raw.shape)));
    }
    Ok(Tensor::new(expect.to_vec(), raw.to_f32()))
}

/// Rebuild the model described by a checkpoint and load its parameters.
pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainState)> {
    let c = Container::read(path)?;
    let format = c.meta("format")?;
    if format != CHECKPOINT_FORMAT {
        return Err(Error::format("format", format!("expected {CHECKPOINT_FORMAT}, found {format}")));
    }
    let config = ModelConfig::from_text(c.meta("config")?)?;
    let mut model = build_model(&config)?;
    let n = model.params.len();
    let mut adam_m = Vec::with_capacity(n);
    let mut adam_v = Vec::with_capacity(n);
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.name(id).to_string();
        let shape = model.params.get(id).shape().to_vec();
        let field = format!("param/{name}");
        *model.params.get_mut(id) = read_tensor(c.tensor(&field)?, &shape, &field)?;
        for (prefix, out) in [("adam_m", &mut adam_m), ("adam_v", &mut adam_v)] {
            let field = format!("{prefix}/{name}");
            out.push(match c.tensors.get(&field) {
                Some(raw) => read_tensor(raw, &shape, &field)?,
                None => Tensor::zeros([0]),
            });
        }
    }
    let expected = n + c.tensors.keys().filter(|k| !k.starts_with("param/")).count();
    if c.tensors.len() != expected {
        return Err(Error::format("param", "checkpoint holds parameters the model does not have"));
    }
    let state = TrainState {
        step: parse_u64(&c, "step")?,
        rng_seed: parse_u64(&c, "rng_seed")?,
        adam_step: parse_u64(&c, "adam_step")?,
        adam_m,
        adam_v,
    };
    if parse_u64(&c, "rng_position")? != state.step {
        return Err(Error::format("rng_position", "does not match the step counter"));
    }
    Ok((model, state))
}
