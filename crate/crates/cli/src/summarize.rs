use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SummarizeError {
    #[error("no metric files given")]
    NoFiles,
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path} has no header row")]
    NoHeader { path: PathBuf },
    #[error(
        "schema mismatch in {path}: missing columns [{}], unexpected columns [{}]",
        .missing.join(", "),
        .extra.join(", ")
    )]
    SchemaMismatch {
        path: PathBuf,
        missing: Vec<String>,
        extra: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ColumnStats {
    pub column: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub last: f64,
    /// Mean over rows of the final task, for streams with a `task` column.
    pub last_task_mean: Option<f64>,
}

impl ColumnStats {
    pub fn headline(&self) -> f64 {
        self.last_task_mean.unwrap_or(self.mean)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FileSummary {
    pub path: String,
    pub rows: usize,
    pub columns: Vec<ColumnStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub header: Vec<String>,
    pub files: Vec<FileSummary>,
}

fn read(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>), SummarizeError> {
    let err = |source| SummarizeError::Read {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(err)?;
    let header: Vec<String> = rdr.headers().map_err(err)?.iter().map(str::to_string).collect();
    if header.is_empty() {
        return Err(SummarizeError::NoHeader { path: path.into() });
    }
    let rows = rdr.records().collect::<Result<Vec<_>, _>>().map_err(err)?;
    Ok((header, rows))
}

fn column_stats(header: &[String], rows: &[csv::StringRecord]) -> Vec<ColumnStats> {
    let task_col = header.iter().position(|h| h == "task");
    let last_task = task_col.and_then(|c| rows.last().map(|r| r[c].to_string()));
    let mut out = Vec::new();
    for (c, name) in header.iter().enumerate() {
        if rows.is_empty() || Some(c) == task_col {
            continue;
        }
        let values: Option<Vec<f64>> = rows.iter().map(|r| r[c].parse::<f64>().ok()).collect();
        let Some(values) = values else { continue };
        let n = values.len() as f64;
        let last_task_mean = task_col.map(|tc| {
            let tail: Vec<f64> = rows
                .iter()
                .zip(&values)
                .filter(|(r, _)| Some(&r[tc]) == last_task.as_deref())
                .map(|(_, &v)| v)
                .collect();
            tail.iter().sum::<f64>() / tail.len() as f64
        });
        out.push(ColumnStats {
            column: name.clone(),
            mean: values.iter().sum::<f64>() / n,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            last: *values.last().expect("non-empty"),
            last_task_mean,
        });
    }
    out
}

/// Aggregates metric CSVs that share one header. Files whose header differs
/// from the first are rejected with the offending columns named.
pub fn summarize(paths: &[PathBuf]) -> Result<Summary, SummarizeError> {
    let Some(first) = paths.first() else {
        return Err(SummarizeError::NoFiles);
    };
    let (header, _) = read(first)?;
    let mut files = Vec::new();
    for path in paths {
        let (h, rows) = read(path)?;
        if h != header {
            let want: BTreeSet<&String> = header.iter().collect();
            let got: BTreeSet<&String> = h.iter().collect();
            let mut missing: Vec<String> = want.difference(&got).map(|s| s.to_string()).collect();
            let extra: Vec<String> = got.difference(&want).map(|s| s.to_string()).collect();
            if missing.is_empty() && extra.is_empty() {
                missing.push("(column order differs)".into());
            }
            return Err(SummarizeError::SchemaMismatch {
                path: path.clone(),
                missing,
                extra,
            });
        }
        files.push(FileSummary {
            path: path.display().to_string(),
            rows: rows.len(),
            columns: column_stats(&header, &rows),
        });
    }
    Ok(Summary { header, files })
}

impl Summary {
    /// One line per file; numeric columns show the last-task mean when the
    /// stream has tasks and the overall mean otherwise.
    pub fn table(&self) -> String {
        let cols: Vec<&str> = self
            .header
            .iter()
            .map(String::as_str)
            .filter(|c| self.files.iter().any(|f| f.columns.iter().any(|s| s.column == *c)) && *c != "step")
            .collect();
        let path_w = self.files.iter().map(|f| f.path.len()).max().unwrap_or(4).max(4);
        let widths: Vec<usize> = cols.iter().map(|c| c.len().max(11)).collect();
        let mut out = String::new();
        let _ = write!(out, "{:<path_w$}  {:>6}", "file", "rows");
        for (c, w) in cols.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for f in &self.files {
            let _ = write!(out, "{:<path_w$}  {:>6}", f.path, f.rows);
            for (c, w) in cols.iter().zip(&widths) {
                match f.columns.iter().find(|s| s.column == *c) {
                    Some(s) => {
                        let _ = write!(out, "  {:>w$.4e}", s.headline());
                    }
                    None => {
                        let _ = write!(out, "  {:>w$}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn aggregates_last_task() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "step,task,acc,v\n1,0,0.2,1;2\n2,1,0.4,1;2\n3,1,0.6,1;2\n");
        let s = summarize(&[a]).unwrap();
        let f = &s.files[0];
        assert_eq!(f.rows, 3);
        let acc = f.columns.iter().find(|c| c.column == "acc").unwrap();
        assert!((acc.last_task_mean.unwrap() - 0.5).abs() < 1e-15);
        assert!((acc.mean - 0.4).abs() < 1e-15);
        assert!(f.columns.iter().all(|c| c.column != "v"));
        assert!(s.table().contains("acc"));
    }

    #[test]
    fn schema_mismatch_names_columns() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "step,loss,acc\n1,2,3\n");
        let b = write(dir.path(), "b.csv", "step,loss,accuracy\n1,2,3\n");
        match summarize(&[a, b]) {
            Err(SummarizeError::SchemaMismatch { missing, extra, .. }) => {
                assert_eq!(missing, vec!["acc"]);
                assert_eq!(extra, vec!["accuracy"]);
            }
            other => panic!("{other:?}"),
        }
    }
}
