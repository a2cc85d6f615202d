use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::json;
use tcsis_core::SequenceState;

use crate::config::{ExperimentConfig, TOOL_VERSION};
use crate::error::{user, CliError, CliResult};

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::User(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::User(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `resolved_config.json` with the tool version and the command that ran.
pub fn write_resolved(dir: &Path, command: &str, cfg: &ExperimentConfig, extra: serde_json::Value) -> CliResult<()> {
    ensure_dir(dir)?;
    let doc = json!({
        "tool_version": TOOL_VERSION,
        "command": command,
        "config": cfg,
        "derived": extra,
    });
    write_json(&dir.join("resolved_config.json"), &doc)
}

/// One row per sample, columns `token_0..token_{d-1}`.
pub fn write_samples(path: &Path, samples: &[SequenceState]) -> CliResult<()> {
    let d = samples.first().map(|s| s.dim()).unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..d).map(|i| format!("token_{i}")))?;
    for s in samples {
        w.write_record(s.tokens().iter().map(|t| t.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path, vocab: usize) -> CliResult<Vec<SequenceState>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    for (i, h) in headers.iter().enumerate() {
        if h != format!("token_{i}") {
            return user(format!("{}: unexpected column `{h}` at position {i}", path.display()));
        }
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let tokens = rec
            .iter()
            .map(|f| f.trim().parse::<u8>())
            .collect::<Result<Vec<u8>, _>>()
            .map_err(|e| CliError::User(format!("{}: row {}: {e}", path.display(), line + 1)))?;
        let state = SequenceState::new(tokens, vocab)
            .map_err(|e| CliError::User(format!("{}: row {}: {e}", path.display(), line + 1)))?;
        out.push(state);
    }
    if out.is_empty() {
        return user(format!("{} contains no samples", path.display()));
    }
    Ok(out)
}
