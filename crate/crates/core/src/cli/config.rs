//! JSON config files layered under command-line flags.
//!
//! Precedence, highest first: flag, environment variable (oracle settings
//! only), config file, built-in default.

use std::fs;
use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::CliError;

/// Overlay the keys of `config` onto `args`, skipping anything the user set
/// on the command line or through the environment.
pub fn merge<T>(args: &T, config: Option<&Path>, matches: &ArgMatches) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned,
{
    let mut current = serde_json::to_value(args).expect("arguments serialize");
    let Some(path) = config else {
        return Ok(serde_json::from_value(current).expect("arguments round-trip"));
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
    let parsed: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
    let Value::Object(overrides) = parsed else {
        return Err(CliError::Usage(format!("config file {}: expected a JSON object", path.display())));
    };
    let fields = current.as_object_mut().expect("arguments serialize to an object");
    for (key, value) in overrides {
        if !fields.contains_key(&key) {
            return Err(CliError::Usage(format!("config file {}: unknown setting {key:?}", path.display())));
        }
        let from_user = matches!(matches.value_source(&key), Some(ValueSource::CommandLine | ValueSource::EnvVariable));
        if !from_user {
            fields.insert(key, value);
        }
    }
    serde_json::from_value(current).map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))
}

/// Write the settings a run actually used.
pub fn write_snapshot<T: Serialize>(settings: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(settings).expect("settings serialize");
    text.push('\n');
    crate::dataset_io::write_text(path, &text).map_err(CliError::from)
}
