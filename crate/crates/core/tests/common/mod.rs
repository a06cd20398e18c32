#![allow(dead_code)]

use std::path::PathBuf;

use gasnet_core::{Model, Scenario};

pub fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn load(name: &str) -> Scenario {
    Scenario::load(&scenarios().join(name)).unwrap()
}

pub fn model(name: &str) -> Model {
    Model::from_scenario(&load(name)).unwrap()
}

/// Single-pipe scenario document with extra top-level keys and tables.
pub fn single_pipe(keys: &str, tables: &str) -> String {
    format!(
        r#"network = "networks/single_pipe.toml"
horizon = 1.0
time_steps = 32
{keys}

[steady_state]
entry_pressure = {{ in = 2.0 }}
entry_flux = {{ in = 0.5 }}

[state_box.p1]
p = [1.0, 3.5]
q = [-0.5, 1.5]

[grid]
nodes_per_meter = 16
{tables}"#
    )
}

pub fn model_from(doc: &str) -> gasnet_core::Result<Model> {
    Model::from_scenario(&Scenario::from_toml(doc, scenarios())?)
}
