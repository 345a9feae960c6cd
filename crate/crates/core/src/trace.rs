use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Per-epoch loss table written as CSV next to checkpoints.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossTrace {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LossTrace {
    pub fn new(columns: &[&str]) -> Self {
        LossTrace { columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&(i + 1).to_string());
            for v in r {
                out.push(',');
                out.push_str(&format!("{v:.9e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}
