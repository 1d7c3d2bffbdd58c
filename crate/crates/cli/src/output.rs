//! Artifact writing. Every file is read back and decoded as its own type
//! before the run may succeed.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use periodic_homog::fieldio::{decode_field, encode_field, field_csv};
use periodic_homog::torus::ScalarField;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub path: String,
    pub kind: String,
    pub bytes: u64,
}

pub struct Outputs {
    dir: PathBuf,
    pub files: Vec<FileEntry>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Outputs { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write(&mut self, name: &str, kind: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileEntry { path: name.into(), kind: kind.into(), bytes: bytes.len() as u64 });
        Ok(path)
    }

    /// Pretty JSON; decoded back into `T` and re-encoded to the same bytes.
    pub fn json<T: Serialize + DeserializeOwned>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        let path = self.write(name, "json", text.as_bytes())?;
        let back: T = serde_json::from_slice(&fs::read(&path)?).with_context(|| format!("{name} does not decode"))?;
        let mut again = serde_json::to_string_pretty(&back)?;
        again.push('\n');
        ensure!(again == text, "{name} does not survive a decode/encode round trip");
        Ok(())
    }

    /// Binary field file plus its CSV twin.
    pub fn field(&mut self, stem: &str, comps: &[ScalarField], names: &[&str]) -> Result<()> {
        let bytes = encode_field(comps)?;
        let path = self.write(&format!("{stem}.tfld"), "field", &bytes)?;
        let back = decode_field(&fs::read(&path)?).with_context(|| format!("{stem}.tfld does not decode"))?;
        ensure!(back.components.len() == comps.len(), "{stem}.tfld component count changed");
        for (a, b) in back.components.iter().zip(comps) {
            ensure!(
                a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{stem}.tfld values changed on decode"
            );
        }
        let csv_text = field_csv(comps, names)?;
        let path = self.write(&format!("{stem}.csv"), "csv", csv_text.as_bytes())?;
        check_csv(&path, comps[0].grid().dim() + comps.len(), Some(comps[0].grid().len()))
    }

    /// RFC-4180 table of numbers.
    pub fn table(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            ensure!(r.len() == header.len(), "{name}: row width {} != {}", r.len(), header.len());
            w.write_record(r.iter().map(|v| v.to_string()))?;
        }
        let bytes = w.into_inner().context("flushing csv")?;
        let path = self.write(name, "csv", &bytes)?;
        check_csv(&path, header.len(), Some(rows.len()))
    }
}

fn check_csv(path: &Path, width: usize, rows: Option<usize>) -> Result<()> {
    let mut r = csv::Reader::from_path(path)?;
    ensure!(r.headers()?.len() == width, "{}: header width", path.display());
    let mut count = 0;
    for rec in r.records() {
        let rec = rec?;
        ensure!(rec.len() == width, "{}: ragged row {count}", path.display());
        for cell in rec.iter() {
            if cell.parse::<f64>().is_err() {
                bail!("{}: non-numeric cell `{cell}` in row {count}", path.display());
            }
        }
        count += 1;
    }
    if let Some(n) = rows {
        ensure!(count == n, "{}: expected {n} rows, found {count}", path.display());
    }
    Ok(())
}
