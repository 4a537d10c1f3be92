//! CSV and summary writers.
//!
//! Every CSV starts with one `# schema: ...` line naming the table and its
//! version, followed by the header row.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// A table under construction. Rows are flushed to disk by [`Table::flush`],
/// so partial results survive a later failure.
#[derive(Debug)]
pub struct Table {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
    width: usize,
}

impl Table {
    pub fn create(dir: &Path, name: &str, header: &[&str]) -> Result<Self> {
        let path = dir.join(format!("{name}.csv"));
        let mut file = fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        use std::io::Write;
        writeln!(file, "# schema: varred/{name}/v{SCHEMA_VERSION}").map_err(|e| HarnessError::io(&path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header).map_err(|e| csv_io(&path, e))?;
        Ok(Table { path, writer, width: header.len() })
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        assert_eq!(row.len(), self.width, "row width for {}", self.path.display());
        let mut fields = Vec::with_capacity(row.len());
        for c in &row {
            if let Cell::F(v) = c {
                if !v.is_finite() {
                    return Err(HarnessError::Numerical(format!("non-finite value written to {}", self.path.display())));
                }
            }
            fields.push(c.to_string());
        }
        self.writer.write_record(&fields).map_err(|e| csv_io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| HarnessError::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for Table {
    fn drop(&mut self) {
        let _ = self.writer.flush();
    }
}

fn csv_io(path: &Path, e: csv::Error) -> HarnessError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => HarnessError::io(path, source),
        other => HarnessError::Input(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    F(f64),
    U(u64),
    S(String),
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::F(v) => write!(f, "{v:e}"),
            Cell::U(v) => write!(f, "{v}"),
            Cell::S(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::U(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::U(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::S(v.to_owned())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::S(v)
    }
}

#[macro_export]
macro_rules! row {
    ($($x:expr),* $(,)?) => { vec![$($crate::output::Cell::from($x)),*] };
}

/// SHA-256 over each input framed as `blob <len>\0<bytes>`, in order.
pub fn content_hash(inputs: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for bytes in inputs {
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(bytes);
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Key/value run summary written to `summary.txt`.
#[derive(Debug, Default, Clone)]
pub struct Summary {
    entries: Vec<(String, String)>,
    config_echo: String,
}

impl Summary {
    pub fn new(config_echo: String) -> Self {
        Summary { entries: Vec::new(), config_echo }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let v = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = v,
            None => self.entries.push((key.to_owned(), v)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("summary.txt");
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}: {v}");
        }
        s.push_str("\n# config\n");
        s.push_str(&self.config_echo);
        fs::write(&path, s).map_err(|e| HarnessError::io(&path, e))?;
        Ok(path)
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}
