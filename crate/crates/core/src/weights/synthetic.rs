//! Deterministic stand-in weights with the exact GPT-2 tensor layout.
//!
//! Each tensor is filled from a counter-based SplitMix64 stream keyed by the
//! FNV-1a hash of its name, so any element can be reproduced independently
//! (the fixture generator in `scripts/make_fixtures.py` does exactly that).
//! Values are `offset + scale·u` with `u` uniform in `[-1, 1)`; the scale
//! depends on the tensor's role so activations stay in a realistic range.

use crate::tensor::Tensor;
use crate::weights::{ModelConfig, TensorMap};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xCBF2_9CE4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

fn splitmix(base: u64, counter: u64) -> u64 {
    let mut z = base.wrapping_add(counter.wrapping_mul(GOLDEN));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `(scale, offset)` for a tensor name.
fn role(name: &str) -> (f64, f64) {
    match name {
        "wte.weight" => return (0.2, 0.0),
        "wpe.weight" => return (0.05, 0.0),
        _ => {}
    }
    let parts: Vec<&str> = name.split('.').collect();
    let module = if name.starts_with("h.") {
        parts[parts.len() - 2]
    } else {
        parts[0]
    };
    let kind = parts[parts.len() - 1];
    if module.starts_with("ln") {
        return if kind == "weight" { (0.2, 1.0) } else { (0.05, 0.0) };
    }
    if kind == "bias" {
        (0.02, 0.0)
    } else if name.ends_with("mlp.c_proj.weight") {
        (0.03, 0.0)
    } else {
        (0.05, 0.0)
    }
}

/// Fill one named tensor.
pub fn synthetic_tensor(name: &str, shape: Vec<usize>, seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let base = fnv1a64(name.as_bytes()) ^ seed;
    let (scale, offset) = role(name);
    let data = (1..=n as u64)
        .map(|i| {
            let u = (splitmix(base, i) >> 40) as f64 / 16_777_216.0;
            ((u * 2.0 - 1.0) * scale + offset) as f32
        })
        .collect();
    Tensor::new(shape, data).expect("shape product matches")
}

/// Every tensor of a checkpoint for `config`, under canonical names.
/// Seed 0 reproduces the committed reference fixtures.
pub fn synthetic_tensors(config: &ModelConfig, seed: u64) -> TensorMap {
    config
        .tensor_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let t = synthetic_tensor(&name, shape, seed);
            (name, t)
        })
        .collect()
}
