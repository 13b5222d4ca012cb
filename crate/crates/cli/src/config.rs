//! Flat TOML run configuration: file values overlaid by command-line flags, unknown keys
//! rejected, and the fully resolved settings written beside each output.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::CliError;

/// Merges `flags` (unset options skipped) over the optional config file and deserializes the
/// result into the resolved settings type, which fills defaults and rejects unknown keys.
pub fn resolve<F: Serialize, S: DeserializeOwned>(flags: &F, file: Option<&Path>) -> anyhow::Result<S> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    // Unset flags serialize as absent keys, so only explicit flags override the file.
    table.extend(toml::Table::try_from(flags)?);
    S::deserialize(table).map_err(|e| CliError::Usage(format!("configuration: {e}")).into())
}

/// `<output>.config.toml`.
pub fn snapshot_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".config.toml");
    output.with_file_name(name)
}

pub fn write_snapshot<S: Serialize>(settings: &S, output: &Path) -> anyhow::Result<()> {
    let text = toml::to_string(settings)?;
    depthsr::dataio::atomic_write(&snapshot_path(output), text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize)]
    struct Flags {
        #[serde(skip_serializing_if = "Option::is_none")]
        a: Option<u32>,
        #[serde(skip_serializing_if = "Option::is_none")]
        b: Option<String>,
    }

    #[derive(Debug, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Settings {
        #[serde(default)]
        a: u32,
        b: String,
    }

    #[test]
    fn flags_override_file_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "a = 3\nb = \"file\"\n").unwrap();
        let s: Settings = resolve(&Flags { a: None, b: Some("flag".into()) }, Some(&path)).unwrap();
        assert_eq!(s, Settings { a: 3, b: "flag".into() });

        std::fs::write(&path, "a = 3\nb = \"x\"\nbogus = 1\n").unwrap();
        let err = resolve::<_, Settings>(&Flags { a: None, b: None }, Some(&path)).unwrap_err();
        assert!(matches!(err.downcast_ref::<CliError>(), Some(CliError::Usage(_))));
    }

    #[test]
    fn snapshot_sits_beside_output() {
        assert_eq!(snapshot_path(Path::new("out/x.pgm")), Path::new("out/x.pgm.config.toml"));
    }
}
