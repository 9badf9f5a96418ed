use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use tempfile::NamedTempFile;

/// Writes `bytes` to a temp file next to `path` and renames it into place,
/// so `path` is either absent, the old file, or complete.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir).with_context(|| format!("creating a temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `<path><suffix>`, e.g. `gen.jsonl` → `gen.jsonl.config.json`.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write_sidecar<C: Serialize>(out: &Path, command: &str, config: &C) -> Result<()> {
    #[derive(Serialize)]
    struct Sidecar<'a, C> {
        command: &'a str,
        version: &'a str,
        #[serde(flatten)]
        config: &'a C,
    }
    let sidecar = Sidecar {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config,
    };
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    write_atomic(&with_suffix(out, ".config.json"), text.as_bytes())
}

/// Serializes one JSON object per line.
pub fn jsonl<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

/// Writes atomically to `out`, or to stdout when there is no path.
pub fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

/// Sentences from a `sample` JSONL file (`tokens` arrays) or plain text.
pub fn read_sentences(path: &Path, lowercase: bool) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<String> = if line.starts_with('{') {
            #[derive(serde::Deserialize)]
            struct Row {
                tokens: Vec<String>,
            }
            let row: Row = serde_json::from_str(line)
                .with_context(|| format!("{}:{}: expected an object with a tokens array", path.display(), i + 1))?;
            row.tokens
        } else {
            line.split_whitespace().map(str::to_string).collect()
        };
        out.push(if lowercase {
            tokens.into_iter().map(|t| t.to_lowercase()).collect()
        } else {
            tokens
        });
    }
    Ok(out)
}
