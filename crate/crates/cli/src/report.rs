//! Report emission: CSV tables with a schema comment line, a JSON mirror
//! with identical field names, and atomic file writes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde_json::{Map, Value};

/// First line of every CSV report.
pub const SCHEMA_LINE: &str = "# schema=distilkit.v1";

/// Schema tag mirrored into JSON reports.
pub const SCHEMA: &str = "distilkit.v1";

/// Writes `bytes` to `path` via a temp file in the same directory plus a
/// rename, so readers never observe a partial file. A command invocation
/// owns its output paths exclusively, which makes the fixed temp name safe.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// A rectangular report: named columns and JSON-typed cells.
#[derive(Debug, Clone)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Table {
        Table { columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the header");
        self.rows.push(row);
    }

    /// CSV rendering: the schema comment, the header, then one line per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SCHEMA_LINE);
        out.push('\n');
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(csv_cell).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// JSON mirror: `{"schema": ..., "rows": [{column: value, ...}, ...]}`.
    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|row| {
                let mut obj = Map::new();
                for (c, v) in self.columns.iter().zip(row) {
                    obj.insert(c.clone(), v.clone());
                }
                Value::Object(obj)
            })
            .collect();
        serde_json::json!({ "schema": SCHEMA, "rows": rows })
    }
}

/// One CSV cell. Strings are quoted only when they contain a delimiter;
/// numbers and booleans use their shortest round-trip form.
fn csv_cell(v: &Value) -> String {
    match v {
        Value::String(s) => {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.clone()
            }
        }
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// The `.json` sibling of a report path.
pub fn json_sibling(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the CSV at `csv_path` and the JSON mirror next to it.
pub fn write_table(csv_path: &Path, table: &Table) -> anyhow::Result<()> {
    atomic_write(csv_path, table.to_csv().as_bytes())?;
    let json = serde_json::to_string_pretty(&table.to_json())?;
    atomic_write(&json_sibling(csv_path), json.as_bytes())?;
    Ok(())
}

/// Writes a standalone JSON document atomically.
pub fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    atomic_write(path, serde_json::to_string_pretty(value)?.as_bytes())
}

/// Formats a float cell; finite values round-trip, non-finite become the
/// strings "inf"/"-inf"/"nan" (JSON has no non-finite numbers).
pub fn num(v: f64) -> Value {
    match serde_json::Number::from_f64(v) {
        Some(n) => Value::Number(n),
        None if v == f64::INFINITY => Value::String("inf".into()),
        None if v == f64::NEG_INFINITY => Value::String("-inf".into()),
        None => Value::String("nan".into()),
    }
}
