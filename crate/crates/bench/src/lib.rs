//! Shared fixtures for the criterion benchmarks in `benches/`.

use std::path::PathBuf;

use gasnet_core::{Model, Scenario};

/// Assembles one of the bundled scenarios under `scenarios/`.
pub fn bundled(name: &str) -> Model {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    let scenario = Scenario::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
    Model::from_scenario(&scenario).unwrap_or_else(|e| panic!("{name}: {e}"))
}
