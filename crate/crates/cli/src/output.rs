//! CSV and sidecar assembly. Files are staged next to their final paths
//! and renamed together once every byte is written, so a failed run never
//! leaves a truncated table behind.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;

/// One in-memory CSV table with a fixed header.
pub struct Table {
    name: String,
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: impl Into<String>, header: &[&'static str]) -> Self {
        Self { name: name.into(), header: header.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    fn render(&self) -> String {
        let mut text = String::new();
        let _ = writeln!(text, "{}", self.header.join(","));
        for row in &self.rows {
            let _ = writeln!(text, "{}", row.join(","));
        }
        text
    }
}

/// Formats a float with the shortest digits that parse back to the same
/// value; integers and special values stay readable.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// An empty CSV field for metrics a run does not define.
pub fn blank() -> String {
    String::new()
}

/// Everything the sidecar records about one resolved sweep point.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PointRecord {
    pub delta: f64,
    pub delta_actual: f64,
    pub n: usize,
    pub p: usize,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct Sidecar<'a> {
    command: &'a str,
    tool_version: &'a str,
    /// The configuration after overrides, rounding, and substitutions;
    /// reruns with this block reproduce the outputs bit for bit.
    config: &'a ExperimentConfig,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    points: Vec<PointRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    notes: Vec<String>,
    outputs: Vec<String>,
}

/// Collects tables and notes for one command invocation, then writes the
/// CSV files plus a JSON sidecar in a single commit step.
pub struct Bundle<'a> {
    command: &'a str,
    dir: PathBuf,
    stem: String,
    config: &'a ExperimentConfig,
    points: Vec<PointRecord>,
    notes: Vec<String>,
    tables: Vec<Table>,
}

impl<'a> Bundle<'a> {
    pub fn new(command: &'a str, stem: &str, config: &'a ExperimentConfig) -> Self {
        Self {
            command,
            dir: config.output_dir.clone(),
            stem: stem.to_string(),
            config,
            points: Vec::new(),
            notes: Vec::new(),
            tables: Vec::new(),
        }
    }

    /// The main table, named after the output stem.
    pub fn table(&mut self, header: &[&'static str]) -> &mut Table {
        let name = format!("{}.csv", self.stem);
        self.named_table_inner(name, header)
    }

    /// A secondary table, `{stem}_{suffix}.csv`.
    pub fn suffixed_table(&mut self, suffix: &str, header: &[&'static str]) -> &mut Table {
        let name = format!("{}_{suffix}.csv", self.stem);
        self.named_table_inner(name, header)
    }

    fn named_table_inner(&mut self, name: String, header: &[&'static str]) -> &mut Table {
        self.tables.push(Table::new(name, header));
        self.tables.last_mut().expect("just pushed")
    }

    pub fn record_point(&mut self, point: PointRecord) {
        if !self.points.iter().any(|q| q.delta == point.delta && q.n == point.n) {
            self.points.push(point);
        }
    }

    /// A resolution note mirrored into the sidecar (cap reductions,
    /// substituted parameters, measured wall times).
    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    /// Writes every table and the sidecar, staging first and renaming only
    /// after all content is on disk. Returns the final paths.
    pub fn commit(self) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&self.dir)
            .with_context(|| format!("creating output directory {}", self.dir.display()))?;
        let mut outputs: Vec<String> = self.tables.iter().map(|t| t.name.clone()).collect();
        let sidecar_name = format!("{}.json", self.stem);
        outputs.push(sidecar_name.clone());

        let sidecar = Sidecar {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION"),
            config: self.config,
            points: self.points,
            notes: self.notes,
            outputs: outputs.clone(),
        };
        let mut staged: Vec<(PathBuf, PathBuf)> = Vec::new();
        let mut stage = |name: &str, content: String| -> Result<()> {
            let final_path = self.dir.join(name);
            let tmp_path = self.dir.join(format!("{name}.tmp"));
            std::fs::write(&tmp_path, content)
                .with_context(|| format!("writing {}", tmp_path.display()))?;
            staged.push((tmp_path, final_path));
            Ok(())
        };
        for table in &self.tables {
            stage(&table.name, table.render())?;
        }
        let mut json = serde_json::to_string_pretty(&sidecar).context("encoding sidecar")?;
        json.push('\n');
        stage(&sidecar_name, json)?;

        let mut finals = Vec::with_capacity(staged.len());
        for (tmp, final_path) in staged {
            std::fs::rename(&tmp, &final_path)
                .with_context(|| format!("renaming into {}", final_path.display()))?;
            finals.push(final_path);
        }
        Ok(finals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_render_header_then_rows() {
        let mut t = Table::new("x.csv", &["a", "b"]);
        t.push(vec![num(1.0), num(0.5)]);
        assert_eq!(t.render(), "a,b\n1,0.5\n");
    }

    #[test]
    fn numbers_round_trip_exactly() {
        for v in [0.38025, 1e-60, 0.1 + 0.2, f64::MAX] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn commit_writes_tables_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = ExperimentConfig::default();
        config.output_dir = dir.path().to_path_buf();
        let mut bundle = Bundle::new("simulate", "run", &config);
        bundle.table(&["delta"]).push(vec![num(0.3)]);
        bundle.note("example");
        let paths = bundle.commit().unwrap();
        assert_eq!(paths.len(), 2);
        let csv = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
        assert_eq!(csv, "delta\n0.3\n");
        let sidecar = std::fs::read_to_string(dir.path().join("run.json")).unwrap();
        let value: serde_json::Value = serde_json::from_str(&sidecar).unwrap();
        assert_eq!(value["command"], "simulate");
        assert_eq!(value["outputs"][0], "run.csv");
        assert!(dir
            .path()
            .read_dir()
            .unwrap()
            .all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
    }
}
