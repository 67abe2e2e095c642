#![allow(dead_code)]

pub mod fd;

use fairmeta::data::{self, Prepared};
use fairmeta::model::{ModelLayout, ModelParams};
use fairmeta::synth::{self, SynthConfig};
use fairmeta::trainer::{self, Mode, TrainerConfig};

/// Small synthetic dataset, cheap enough for many training runs.
pub fn toy(n_users: usize, bias: f64, seed: u64) -> Prepared {
    let cfg = SynthConfig {
        n_users,
        n_items: 120,
        ratings_per_user: 20,
        bias_strength: bias,
        seed,
        ..SynthConfig::default()
    };
    let raw = synth::generate(&cfg).expect("synthetic data");
    data::prepare(raw, "gender", (0.7, 0.1, 0.2), seed).expect("prepare")
}

pub fn toy_config(mode: Mode, epochs: usize) -> TrainerConfig {
    TrainerConfig {
        mode,
        epochs,
        batch_size: 8,
        inner_steps: 2,
        ..TrainerConfig::default()
    }
}

pub fn layout(p: &Prepared) -> ModelLayout {
    ModelLayout::for_prepared(p).expect("layout")
}

pub fn init(p: &Prepared, seed: u64) -> ModelParams {
    trainer::initial_params(layout(p), seed)
}

pub fn bits(p: &ModelParams) -> Vec<u64> {
    p.tensors().iter().flat_map(|t| t.values().iter().map(|v| v.to_bits())).collect()
}
