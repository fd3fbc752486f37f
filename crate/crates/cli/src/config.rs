//! JSON configuration overlay and resolved-configuration echo.
//!
//! Precedence: command-line flags, then the `--config` file, then built-in
//! defaults. Keys are the long flag names in snake case.

use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Keys that change where results go or how fast they arrive, not what they are.
const NOT_ECHOED: [&str; 6] = ["threads", "output", "log", "save_model", "checkpoint_dir", "config"];

/// Applies the file named by `config` to the parsed arguments.
pub fn resolve<T: Serialize + DeserializeOwned>(
    args: T,
    config: Option<&Path>,
    matches: &ArgMatches,
) -> Result<T, CliError> {
    let Some(path) = config else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let file: Map<String, Value> = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("config {} is not a JSON object: {e}", path.display())))?;
    let Value::Object(mut current) = serde_json::to_value(&args).expect("arguments serialize") else {
        unreachable!("arguments serialize to an object")
    };
    for (key, value) in file {
        if !current.contains_key(&key) {
            return Err(CliError::usage(format!("unknown configuration key \"{key}\"")));
        }
        if matches.value_source(&key) != Some(ValueSource::CommandLine) {
            current.insert(key, value);
        }
    }
    serde_json::from_value(Value::Object(current))
        .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
}

/// `key = value` lines for every option that affects results, sorted by key.
pub fn describe<T: Serialize>(args: &T) -> Vec<String> {
    let Value::Object(map) = serde_json::to_value(args).expect("arguments serialize") else {
        return Vec::new();
    };
    map.iter()
        .filter(|(k, _)| !NOT_ECHOED.contains(&k.as_str()))
        .map(|(k, v)| format!("{k} = {v}"))
        .collect()
}
