//! JSON-lines report emission. All long-running operations append one JSON
//! object per record to an output file so runs can be inspected and resumed
//! without parsing free-form logs.

use crate::error::{Error, Result};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Append-only JSON-lines writer.
pub struct JsonLines {
    path: PathBuf,
    file: std::fs::File,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(JsonLines { path: path.to_path_buf(), file })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::internal(format!("record encode: {e}")))?;
        writeln!(self.file, "{line}")?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// One scalar observation on a loss curve.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint<'a> {
    pub stage: u8,
    pub step: usize,
    pub loss_name: &'a str,
    pub value: f64,
}

pub fn read_lines(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::internal(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.jsonl");
        {
            let mut w = JsonLines::create(&path).unwrap();
            w.write(&CurvePoint { stage: 1, step: 0, loss_name: "agg", value: 0.5 }).unwrap();
            w.write(&CurvePoint { stage: 1, step: 1, loss_name: "agg", value: 0.25 }).unwrap();
        }
        {
            let mut w = JsonLines::create(&path).unwrap();
            w.write(&CurvePoint { stage: 2, step: 0, loss_name: "hinge", value: 0.1 }).unwrap();
        }
        let rows = read_lines(&path).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2]["stage"], 2);
        assert_eq!(rows[0]["loss_name"], "agg");
    }
}
