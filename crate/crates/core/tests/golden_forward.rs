//! Pins the forward pass of a fixed seed + toy config to a recorded golden
//! vector, guarding against silent behavior changes in initialization or the
//! encoder math. The fixture was recorded from the first run.

use serde::Deserialize;

use twinrec_core::encoder::{encode, ModelConfig, Parameters};
use twinrec_core::ItemId;

#[derive(Deserialize)]
struct Golden {
    config: ModelConfig,
    init_seed: u64,
    prefix: Vec<ItemId>,
    output: Vec<f64>,
}

#[test]
fn forward_matches_recorded_golden_vector_bitwise() {
    let raw = include_str!("data/golden_forward.json");
    let golden: Golden = serde_json::from_str(raw).unwrap();
    let params = Parameters::init(golden.config, golden.init_seed);
    let z = encode(&params, &golden.prefix).unwrap();
    assert_eq!(z.vector.len(), golden.output.len());
    for (i, (&got, &want)) in z.vector.iter().zip(&golden.output).enumerate() {
        assert_eq!(
            got.to_bits(),
            want.to_bits(),
            "dim {i}: {got:e} vs golden {want:e}"
        );
    }
}
