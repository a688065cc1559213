//! Shared versioned binary container (JSON header + named raw
//! little-endian f64 arrays) used for every dataset and checkpoint, plus
//! deterministic CSV metrics writing.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::rng::fnv1a;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DTC1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    seed: u64,
    config: String,
    arrays: Vec<ArrayEntry>,
}

/// A named bundle of tensors with provenance (kind, seed, config echo).
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub seed: u64,
    /// JSON echo of the configuration that produced the artifact.
    pub config_json: String,
    arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, seed: u64, config_json: &str) -> Self {
        Container {
            kind: kind.into(),
            seed,
            config_json: config_json.to_string(),
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::checkpoint(format!("missing array '{name}' in '{}'", self.kind)))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// FNV-1a hash of the embedded config JSON; used for checkpoint
    /// compatibility checks.
    pub fn config_hash(&self) -> u64 {
        fnv1a(self.config_json.as_bytes())
    }

    /// Store a parameter set as one array per parameter.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.arrays.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    /// Load values back into a parameter set with matching names/shapes.
    pub fn read_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        for id in params.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}/{}", params.name(id));
            let stored = self.get(&name)?;
            if stored.shape() != params.get(id).shape() {
                return Err(Error::checkpoint(format!(
                    "array '{name}' has shape {:?}, expected {:?}",
                    stored.shape(),
                    params.get(id).shape()
                )));
            }
            params.get_mut(id).data_mut().copy_from_slice(stored.data());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            seed: self.seed,
            config: self.config_json.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(n, t)| ArrayEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut f = fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        for (_, t) in &self.arrays {
            for v in t.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Container> {
        let mut f = fs::File::open(path).map_err(|e| {
            Error::checkpoint(format!("cannot open '{}': {e}", path.display()))
        })?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::checkpoint(format!(
                "'{}' is not a container (bad magic)",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        f.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)?;
        if header.version != FORMAT_VERSION {
            return Err(Error::checkpoint(format!(
                "container version {} unsupported (expected {FORMAT_VERSION})",
                header.version
            )));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in &header.arrays {
            if entry.dtype != "f64" {
                return Err(Error::checkpoint(format!(
                    "array '{}' has dtype '{}', expected f64",
                    entry.name, entry.dtype
                )));
            }
            let numel: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; numel * 8];
            f.read_exact(&mut bytes)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data).unwrap()));
        }
        Ok(Container {
            kind: header.kind,
            seed: header.seed,
            config_json: header.config,
            arrays,
        })
    }

    /// Require a specific kind, reporting a schema diff otherwise.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::checkpoint(format!(
                "container kind mismatch: found '{}', expected '{kind}'",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Append-style CSV writer with a fixed column schema. Values print with
/// Rust's shortest-roundtrip float formatting, so identical runs produce
/// byte-identical files.
pub struct CsvWriter {
    file: fs::File,
    columns: usize,
}

impl CsvWriter {
    pub fn create(path: &Path, columns: &[&str]) -> Result<CsvWriter> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut file = fs::File::create(path)?;
        writeln!(file, "{}", columns.join(","))?;
        Ok(CsvWriter { file, columns: columns.len() })
    }

    pub fn row(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.columns {
            return Err(Error::contract(format!(
                "csv row has {} values, schema has {}",
                values.len(),
                self.columns
            )));
        }
        let line: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
        writeln!(self.file, "{}", line.join(","))?;
        Ok(())
    }
}

/// Minimal CSV reader for the files written by [`CsvWriter`].
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::checkpoint(format!("empty csv '{}'", path.display())))?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for v in line.split(',') {
            row.push(
                v.parse::<f64>()
                    .map_err(|e| Error::Serde(format!("bad csv value '{v}': {e}")))?,
            );
        }
        rows.push(row);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut c = Container::new("test", 7, "{\"a\":1}");
        c.push("w", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap());
        c.push("b", Tensor::from_vec(vec![0.25]));
        c.save(&path).unwrap();
        let back = Container::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
    }

    #[test]
    fn rewrites_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("a.ckpt");
        let path_b = dir.path().join("b.ckpt");
        let mut c = Container::new("test", 7, "{}");
        c.push("w", Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        c.save(&path_a).unwrap();
        c.save(&path_b).unwrap();
        assert_eq!(fs::read(&path_a).unwrap(), fs::read(&path_b).unwrap());
    }

    #[test]
    fn missing_array_is_checkpoint_error() {
        let c = Container::new("test", 0, "{}");
        assert!(matches!(c.get("nope"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = CsvWriter::create(&path, &["iter", "loss"]).unwrap();
        w.row(&[0.0, 1.25]).unwrap();
        w.row(&[1.0, 0.5]).unwrap();
        drop(w);
        let (header, rows) = read_csv(&path).unwrap();
        assert_eq!(header, vec!["iter", "loss"]);
        assert_eq!(rows, vec![vec![0.0, 1.25], vec![1.0, 0.5]]);
    }
}
