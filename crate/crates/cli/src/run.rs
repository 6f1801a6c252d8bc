//! Output directories and provenance records.

use std::path::{Path, PathBuf};
use std::time::SystemTime;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const OUTPUT_ROOT_ENV: &str = "TASSEL_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// `explicit` when given, otherwise a fresh `<root>/<command>-<UTC time>`
/// directory. Created if missing.
pub fn run_dir(root: Option<&Path>, command: &str, explicit: Option<&Path>) -> Result<PathBuf> {
    let dir = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let root = root.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
            let stamp: String = humantime::format_rfc3339_seconds(SystemTime::now())
                .to_string()
                .chars()
                .filter(char::is_ascii_digit)
                .collect();
            let base = format!("{command}-{}-{}", &stamp[..8], &stamp[8..]);
            let mut dir = root.join(&base);
            let mut n = 1;
            while dir.exists() {
                n += 1;
                dir = root.join(format!("{base}-{n}"));
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

#[derive(Serialize)]
struct Provenance<'a> {
    tool: String,
    command: &'a str,
    args: Vec<String>,
}

/// Writes the resolved configuration and the invocation into `dir`.
pub fn write_provenance(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    write_file(&dir.join("config.toml"), cfg.to_toml()?)?;
    let prov = Provenance {
        tool: format!("tassel {}", env!("CARGO_PKG_VERSION")),
        command,
        args: std::env::args().skip(1).collect(),
    };
    write_json(&dir.join("command.json"), &prov)
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}
