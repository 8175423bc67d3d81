//! CSV plumbing shared by every writer: a `# config_hash=... seed=...`
//! comment line, a header row, then comma-separated rows with floats printed
//! to 17 significant digits.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

/// 17 significant digits, round-trippable.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        CsvTable {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, w: &mut impl Write, comment: &str) -> Result<()> {
        writeln!(w, "# {comment}")?;
        writeln!(w, "{}", self.header.join(","))?;
        for row in &self.rows {
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, comment: &str) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w, comment)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_string(&self, comment: &str) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf, comment).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8")
    }

    /// Column index by name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// The provenance comment every CSV starts with.
pub fn provenance(config_hash: &str, seed: u64) -> String {
    format!("config_hash={config_hash} seed={seed}")
}
