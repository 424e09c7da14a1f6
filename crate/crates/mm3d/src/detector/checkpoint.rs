//! Checkpoint format: `MM3DCKPT1` header, the parameter manifest as text,
//! then raw little-endian f64 payloads in manifest order. The 2D and volume
//! models share one manifest, which makes weight transfer a byte-level no-op.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{MmError, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &str = "MM3DCKPT1";

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut header = String::new();
    header.push_str(CHECKPOINT_MAGIC);
    header.push('\n');
    header.push_str(&format!("params {}\n", store.len()));
    for p in store.params() {
        header.push_str(&p.name);
        for d in &p.shape {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
    }
    header.push_str("data\n");
    let mut bytes = header.into_bytes();
    for p in store.params() {
        for &v in &p.value {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| MmError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| MmError::io(path, e))?;
    Ok(())
}

/// A parsed checkpoint: ordered (name, shape, values).
#[derive(Debug)]
pub struct Checkpoint {
    pub entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn by_name(&self) -> BTreeMap<&str, (&[usize], &[f64])> {
        self.entries
            .iter()
            .map(|(n, s, v)| (n.as_str(), (s.as_slice(), v.as_slice())))
            .collect()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| MmError::io(path, e))?;
    let data_marker = b"data\n";
    let header_end = find_subslice(&bytes, data_marker)
        .ok_or_else(|| MmError::format(path, 0, "missing data marker"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| MmError::format(path, 0, "header is not valid utf-8"))?;
    let mut lines = header.lines();
    let magic = lines.next().unwrap_or("");
    if magic != CHECKPOINT_MAGIC {
        return Err(MmError::format(
            path,
            0,
            format!("bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
        ));
    }
    let count_line = lines
        .next()
        .ok_or_else(|| MmError::format(path, 0, "missing params count"))?;
    let count: usize = count_line
        .strip_prefix("params ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| MmError::format(path, 0, format!("bad params line {count_line:?}")))?;

    let mut names = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| MmError::format(path, 0, "manifest shorter than declared"))?;
        let mut toks = line.split_whitespace();
        let name = toks
            .next()
            .ok_or_else(|| MmError::format(path, 0, "empty manifest line"))?
            .to_string();
        let shape: Vec<usize> = toks
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| MmError::format(path, 0, format!("bad dim {t:?} for {name}")))
            })
            .collect::<Result<_>>()?;
        names.push((name, shape));
    }

    let mut offset = header_end + data_marker.len();
    let mut entries = Vec::with_capacity(count);
    for (name, shape) in names {
        let n: usize = shape.iter().product();
        let need = n * 8;
        if offset + need > bytes.len() {
            return Err(MmError::format(
                path,
                offset as u64,
                format!(
                    "truncated payload for {name}: expected {need} bytes, got {}",
                    bytes.len() - offset
                ),
            ));
        }
        let mut values = Vec::with_capacity(n);
        for chunk in bytes[offset..offset + need].chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
        }
        offset += need;
        entries.push((name, shape, values));
    }
    if offset != bytes.len() {
        return Err(MmError::format(
            path,
            offset as u64,
            format!("{} trailing bytes after declared payload", bytes.len() - offset),
        ));
    }
    Ok(Checkpoint { entries })
}

/// Load a checkpoint into a parameter store by name equality.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransferReport {
    /// Model parameters with no checkpoint entry.
    pub missing: Vec<String>,
    /// Checkpoint entries with no model parameter.
    pub unexpected: Vec<String>,
    /// Names that were loaded.
    pub loaded: usize,
}

impl TransferReport {
    pub fn is_exact(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty()
    }
}

impl std::fmt::Display for TransferReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "loaded {} parameters", self.loaded)?;
        writeln!(f, "missing {}", self.missing.len())?;
        for n in &self.missing {
            writeln!(f, "  missing {n}")?;
        }
        writeln!(f, "unexpected {}", self.unexpected.len())?;
        for n in &self.unexpected {
            writeln!(f, "  unexpected {n}")?;
        }
        Ok(())
    }
}

pub fn transfer_weights(ckpt: &Checkpoint, store: &mut ParamStore) -> Result<TransferReport> {
    let mut report = TransferReport::default();
    let model_names: Vec<String> = store.params().iter().map(|p| p.name.clone()).collect();
    let by_name = ckpt.by_name();
    for name in &model_names {
        match by_name.get(name.as_str()) {
            Some(&(shape, values)) => {
                let id = store.index_of(name).expect("name from store");
                let expected = store.param(id).shape.clone();
                if shape != expected.as_slice() {
                    return Err(MmError::ShapeMismatch {
                        name: name.clone(),
                        expected,
                        found: shape.to_vec(),
                    });
                }
                store.value_mut(id).copy_from_slice(values);
                report.loaded += 1;
            }
            None => report.missing.push(name.clone()),
        }
    }
    let model_set: std::collections::BTreeSet<&str> =
        model_names.iter().map(|s| s.as_str()).collect();
    for (name, _, _) in &ckpt.entries {
        if !model_set.contains(name.as_str()) {
            report.unexpected.push(name.clone());
        }
    }
    Ok(report)
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::super::{Model, ModelConfig};
    use super::*;

    fn tmpfile(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("mm3d_ckpt_{tag}_{}.ckpt", std::process::id()))
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let model = Model::new(ModelConfig { heads: 2, ..ModelConfig::default() });
        let path = tmpfile("roundtrip");
        save_checkpoint(&model.store, &path).expect("save");
        let ckpt = load_checkpoint(&path).expect("load");
        let mut other = Model::new(ModelConfig { heads: 2, seed: 99, ..ModelConfig::default() });
        assert_ne!(model.store.flatten(), other.store.flatten());
        let report = transfer_weights(&ckpt, &mut other.store).expect("transfer");
        assert!(report.is_exact(), "{report}");
        assert_eq!(model.store.flatten(), other.store.flatten());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn truncated_payload_is_reported_with_offset() {
        let model = Model::new(ModelConfig { heads: 1, ..ModelConfig::default() });
        let path = tmpfile("truncated");
        save_checkpoint(&model.store, &path).expect("save");
        let bytes = std::fs::read(&path).expect("read");
        std::fs::write(&path, &bytes[..bytes.len() - 9]).expect("truncate");
        let err = load_checkpoint(&path).expect_err("must fail");
        let msg = err.to_string();
        assert!(msg.contains("truncated payload") && msg.contains("byte"), "{msg}");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let model = Model::new(ModelConfig { heads: 1, ..ModelConfig::default() });
        let path = tmpfile("shape");
        save_checkpoint(&model.store, &path).expect("save");
        let ckpt = load_checkpoint(&path).expect("load");
        let mut other = Model::new(ModelConfig { heads: 1, proposals: 12, ..ModelConfig::default() });
        let err = transfer_weights(&ckpt, &mut other.store).expect_err("must fail");
        assert!(err.to_string().contains("proposals.boxes"), "{err}");
        std::fs::remove_file(&path).ok();
    }
}
