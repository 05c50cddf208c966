//! Inputs shared by the benchmarks.

use glassgpt_core::{SamplerRng, Tensor};

pub const PARAGRAPH: &str = "Data visualization empowers users to explore how a \
transformer turns text into predictions. Each token is embedded, passed through \
twelve blocks of attention and feed-forward layers, and finally projected onto \
the vocabulary — 50,257 candidates, ranked by probability. 日本語のテキストや絵文字 🚀 \
also go through the same byte-level pipeline.";

/// Uniform values in `[-scale, scale)` from a fixed seed.
pub fn random_tensor(shape: Vec<usize>, scale: f32, seed: u64) -> Tensor {
    let mut rng = SamplerRng::new(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.next_f64() as f32 * 2.0 - 1.0) * scale)
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}
