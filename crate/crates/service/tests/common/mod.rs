#![allow(dead_code)]

use std::path::Path;

use factor_core::model::{build_model, ModelConfig, ModelState};
use factor_service::http::ServiceConfig;

pub fn model() -> ModelState {
    build_model(&ModelConfig::compact(), 5).unwrap()
}

pub fn config(state_dir: &Path) -> ServiceConfig {
    ServiceConfig {
        state_dir: state_dir.to_path_buf(),
        ..ServiceConfig::default()
    }
}

pub fn request(seed: u64) -> String {
    format!(
        r#"{{
  "prompt": "a red square moving",
  "entities": [
    {{"description": "square", "first_box": [0.0, 0.0, 0.4, 0.4], "last_box": [0.5, 0.5, 0.9, 0.9], "reference": "red-square"}}
  ],
  "decode": {{"steps": 4, "seed": {seed}}}
}}"#
    )
}
