//! Deterministic inputs for the benchmarks, at desk-default sizes.

use rand::Rng;
use rand_distr::StandardNormal;

use cogcap_core::contrastive::AlignmentData;
use cogcap_core::data::generate_dataset;
use cogcap_core::seed::rng_for;
use cogcap_core::{GenerationConfig, PreprocessConfig, Tensor};

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, "bench");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Rows scaled to unit norm.
pub fn unit_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut t = randn(&[rows, cols], seed);
    for row in t.data_mut().chunks_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// Preprocessed default dataset.
pub fn desk_data() -> AlignmentData {
    let ds = generate_dataset(&GenerationConfig::default()).unwrap();
    AlignmentData::prepare(&ds, &PreprocessConfig::default()).unwrap()
}
