//! On-disk TOML schema for graph specs.
//!
//! ```toml
//! version = 1
//! envs = ["e1", "e2"]
//!
//! [prior_x1]
//! e1 = 0.5
//! e2 = 0.6
//!
//! [cond_y_given_x1]
//! x1_0 = 0.1
//! x1_1 = 0.9
//!
//! [cond_x2_given_y]
//! y_0 = 0.1
//! y_1 = 0.9
//!
//! [cond_x3_given_x1x2]
//! x1_0_x2_0 = 0.0
//! x1_0_x2_1 = 0.5
//! x1_1_x2_0 = 0.5
//! x1_1_x2_1 = 1.0
//! ```
//!
//! `prior_x1` is keyed by environment id and must cover exactly the ids
//! listed in `envs`. The remaining tables are fixed-key.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BinaryGraphSpec, OracleError};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SpecFile {
    version: u32,
    envs: Vec<String>,
    prior_x1: BTreeMap<String, f64>,
    cond_y_given_x1: CondY,
    cond_x2_given_y: CondX2,
    cond_x3_given_x1x2: CondX3,
}

#[derive(Serialize, Deserialize)]
struct CondY {
    x1_0: f64,
    x1_1: f64,
}

#[derive(Serialize, Deserialize)]
struct CondX2 {
    y_0: f64,
    y_1: f64,
}

#[derive(Serialize, Deserialize)]
struct CondX3 {
    x1_0_x2_0: f64,
    x1_0_x2_1: f64,
    x1_1_x2_0: f64,
    x1_1_x2_1: f64,
}

pub fn spec_to_toml(spec: &BinaryGraphSpec) -> Result<String, OracleError> {
    spec.validate()?;
    let file = SpecFile {
        version: FORMAT_VERSION,
        envs: spec.envs.clone(),
        prior_x1: spec
            .envs
            .iter()
            .cloned()
            .zip(spec.prior_x1.iter().copied())
            .collect(),
        cond_y_given_x1: CondY {
            x1_0: spec.cond_y_given_x1[0],
            x1_1: spec.cond_y_given_x1[1],
        },
        cond_x2_given_y: CondX2 {
            y_0: spec.cond_x2_given_y[0],
            y_1: spec.cond_x2_given_y[1],
        },
        cond_x3_given_x1x2: CondX3 {
            x1_0_x2_0: spec.cond_x3_given_x1x2[0],
            x1_0_x2_1: spec.cond_x3_given_x1x2[1],
            x1_1_x2_0: spec.cond_x3_given_x1x2[2],
            x1_1_x2_1: spec.cond_x3_given_x1x2[3],
        },
    };
    toml::to_string(&file).map_err(|e| OracleError::SpecFile(e.to_string()))
}

pub fn spec_from_toml(text: &str) -> Result<BinaryGraphSpec, OracleError> {
    // toml's errors carry line/column context in their Display output.
    let file: SpecFile =
        toml::from_str(text).map_err(|e| OracleError::SpecFile(e.to_string()))?;
    if file.version != FORMAT_VERSION {
        return Err(OracleError::SpecFile(format!(
            "unsupported spec version {} (expected {FORMAT_VERSION})",
            file.version
        )));
    }
    if file.envs.is_empty() {
        return Err(OracleError::SpecFile("envs must not be empty".into()));
    }
    let mut prior_x1 = Vec::with_capacity(file.envs.len());
    for env in &file.envs {
        match file.prior_x1.get(env) {
            Some(p) => prior_x1.push(*p),
            None => {
                return Err(OracleError::SpecFile(format!(
                    "prior_x1 is missing environment \"{env}\""
                )))
            }
        }
    }
    if file.prior_x1.len() != file.envs.len() {
        return Err(OracleError::SpecFile(format!(
            "prior_x1 has {} entries for {} environments",
            file.prior_x1.len(),
            file.envs.len()
        )));
    }
    let spec = BinaryGraphSpec {
        envs: file.envs,
        prior_x1,
        cond_y_given_x1: [file.cond_y_given_x1.x1_0, file.cond_y_given_x1.x1_1],
        cond_x2_given_y: [file.cond_x2_given_y.y_0, file.cond_x2_given_y.y_1],
        cond_x3_given_x1x2: [
            file.cond_x3_given_x1x2.x1_0_x2_0,
            file.cond_x3_given_x1x2.x1_0_x2_1,
            file.cond_x3_given_x1x2.x1_1_x2_0,
            file.cond_x3_given_x1x2.x1_1_x2_1,
        ],
    };
    spec.validate()?;
    Ok(spec)
}

pub fn write_spec_file(path: &Path, spec: &BinaryGraphSpec) -> Result<(), OracleError> {
    let text = spec_to_toml(spec)?;
    std::fs::write(path, text)
        .map_err(|e| OracleError::SpecFile(format!("writing {}: {e}", path.display())))
}

pub fn read_spec_file(path: &Path) -> Result<BinaryGraphSpec, OracleError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| OracleError::SpecFile(format!("reading {}: {e}", path.display())))?;
    spec_from_toml(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        for spec in [
            BinaryGraphSpec::toy_single_env(),
            BinaryGraphSpec::toy_two_env(),
        ] {
            let text = spec_to_toml(&spec).unwrap();
            let back = spec_from_toml(&text).unwrap();
            assert_eq!(spec, back);
        }
    }

    #[test]
    fn parse_error_reports_location() {
        let err = spec_from_toml("version = 1\nenvs = [\"e1\"\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line"), "expected line info, got: {msg}");
    }

    #[test]
    fn missing_env_prior_is_rejected() {
        let spec = BinaryGraphSpec::toy_two_env();
        let text = spec_to_toml(&spec).unwrap().replace("e2 = 0.6", "e3 = 0.6");
        let err = spec_from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("e2"), "{err}");
    }

    #[test]
    fn out_of_range_probability_is_rejected_on_parse() {
        let spec = BinaryGraphSpec::toy_single_env();
        let text = spec_to_toml(&spec).unwrap().replace("x1_1 = 0.9", "x1_1 = 1.9");
        assert!(spec_from_toml(&text).is_err());
    }
}
