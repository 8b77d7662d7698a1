//! Run directories: manifest, CSV and JSON artifacts, binary vector sidecars.
//!
//! Everything except `timing.json` is a function of the configuration and
//! the seed, so two runs of the same configuration produce identical bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::Result;

/// Magic bytes of the vector sidecar format.
pub const SIDECAR_MAGIC: &[u8; 8] = b"MPVEC\x00\x01\x00";

pub struct ResultStore {
    dir: PathBuf,
    files: Vec<String>,
    timing: Vec<(String, f64)>,
}

/// Formats a float for CSV: shortest round-trip representation, `.` decimal.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        // `Debug` is the shortest representation that parses back exactly
        format!("{x:?}")
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

impl ResultStore {
    /// Creates `{root}/{tag}_{unix seconds}`, adding a counter on collision.
    pub fn create(root: &Path, tag: &str) -> Result<Self> {
        fs::create_dir_all(root)?;
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut dir = root.join(format!("{tag}_{stamp}"));
        let mut k = 1;
        while dir.exists() {
            k += 1;
            dir = root.join(format!("{tag}_{stamp}-{k}"));
        }
        fs::create_dir(&dir)?;
        Ok(ResultStore { dir, files: Vec::new(), timing: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    pub fn write_csv<R: AsRef<[String]>>(&mut self, name: &str, header: &[&str], rows: &[R]) -> Result<()> {
        let path = self.path(name);
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&path)
            .map_err(csv_err)?;
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(r.as_ref()).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| std::io::Error::other(e.to_string()))?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(path, text)?;
        Ok(())
    }

    /// Sidecar layout: magic, `u64` count, `u64` length, then the vectors as
    /// little-endian `f64`, one after another.
    pub fn write_vectors(&mut self, name: &str, vectors: &[&[f64]]) -> Result<()> {
        let len = vectors.first().map_or(0, |v| v.len());
        let path = self.path(name);
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        f.write_all(SIDECAR_MAGIC)?;
        f.write_all(&(vectors.len() as u64).to_le_bytes())?;
        f.write_all(&(len as u64).to_le_bytes())?;
        for v in vectors {
            assert_eq!(v.len(), len, "sidecar vectors must share one length");
            for x in v.iter() {
                f.write_all(&x.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    /// Runs `body` and records its wall time under `stage`.
    pub fn timed<T>(&mut self, stage: &str, body: impl FnOnce(&mut Self) -> T) -> T {
        let clock = Instant::now();
        let out = body(self);
        self.timing.push((stage.to_string(), clock.elapsed().as_secs_f64()));
        out
    }

    /// Writes `timing.json`, which is excluded from the reproducibility contract.
    pub fn finish(&mut self) -> Result<()> {
        let map: serde_json::Map<String, serde_json::Value> =
            self.timing.iter().map(|(k, v)| (k.clone(), serde_json::json!(v))).collect();
        let text = serde_json::to_string_pretty(&map).map_err(|e| std::io::Error::other(e.to_string()))?;
        fs::write(self.dir.join("timing.json"), text + "\n")?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Io(std::io::Error::other(e.to_string()))
}

/// Reads a vector sidecar back.
pub fn read_vectors(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path)?;
    let bad = || crate::Error::Parse(format!("{} is not a vector sidecar", path.display()));
    if bytes.len() < 24 || &bytes[..8] != SIDECAR_MAGIC {
        return Err(bad());
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap()) as usize;
    let (count, len) = (word(8), word(16));
    if bytes.len() != 24 + 8 * count * len {
        return Err(bad());
    }
    Ok((0..count)
        .map(|k| {
            (0..len)
                .map(|i| {
                    let o = 24 + 8 * (k * len + i);
                    f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap())
                })
                .collect()
        })
        .collect())
}
