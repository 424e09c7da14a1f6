//! On-disk dataset layout: one binary voxel file per volume plus a
//! line-oriented index file.
//!
//! Volume file: magic `MM3DVOL1`, u32 LE slices/height/width, then raw
//! little-endian f32 voxels. Index file: `MM3DIDX1` header, then per case a
//! `case` line, two `volume` lines, optional `finding` lines, and `end`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{MmError, Result};

use super::{Case, Dataset, Finding, Label, Laterality, Split, View, Volume};

pub const VOLUME_MAGIC: &[u8; 8] = b"MM3DVOL1";
pub const INDEX_MAGIC: &str = "MM3DIDX1";

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let volumes = dir.join("volumes");
    fs::create_dir_all(&volumes).map_err(|e| MmError::io(&volumes, e))?;
    let mut index = String::new();
    index.push_str(INDEX_MAGIC);
    index.push('\n');
    index.push_str(&format!("cases {}\n", dataset.cases.len()));
    for case in &dataset.cases {
        let cc_rel = format!("volumes/{}_cc.vol", case.id);
        let mlo_rel = format!("volumes/{}_mlo.vol", case.id);
        write_volume(&case.cc, &dir.join(&cc_rel))?;
        write_volume(&case.mlo, &dir.join(&mlo_rel))?;
        index.push_str(&format!(
            "case id={} label={} split={} annotated={}\n",
            case.id,
            case.label.as_str(),
            case.split.as_str(),
            u8::from(case.annotated)
        ));
        index.push_str(&format!(
            "volume view=cc file={} laterality={}\n",
            cc_rel,
            laterality_str(case.cc.laterality)
        ));
        index.push_str(&format!(
            "volume view=mlo file={} laterality={}\n",
            mlo_rel,
            laterality_str(case.mlo.laterality)
        ));
        for (view, findings) in [("cc", &case.findings_cc), ("mlo", &case.findings_mlo)] {
            for f in findings.iter() {
                index.push_str(&format!(
                    "finding view={view} box={},{},{},{} z_best={} z_range={},{} malignant={}\n",
                    f.bbox[0],
                    f.bbox[1],
                    f.bbox[2],
                    f.bbox[3],
                    f.z_best,
                    f.z_range.0,
                    f.z_range.1,
                    u8::from(f.malignant)
                ));
            }
        }
        index.push_str("end\n");
    }
    let index_path = dir.join("index.txt");
    fs::write(&index_path, index).map_err(|e| MmError::io(&index_path, e))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join("index.txt");
    let text = fs::read_to_string(&index_path).map_err(|e| MmError::io(&index_path, e))?;
    let mut lines = text.lines().enumerate();

    let (_, magic) = lines
        .next()
        .ok_or_else(|| MmError::format(&index_path, 0, "empty index file"))?;
    if magic != INDEX_MAGIC {
        return Err(MmError::format(
            &index_path,
            0,
            format!("bad index magic {magic:?}, expected {INDEX_MAGIC:?}"),
        ));
    }
    let (_, count_line) = lines
        .next()
        .ok_or_else(|| MmError::format(&index_path, 0, "missing cases count"))?;
    let declared: usize = count_line
        .strip_prefix("cases ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| MmError::format(&index_path, 0, format!("bad cases line {count_line:?}")))?;

    let mut cases = Vec::with_capacity(declared);
    let mut current: Option<CaseBuilder> = None;
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fail = |msg: String| MmError::format(&index_path, lineno as u64 + 1, msg);
        let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
        match kind {
            "case" => {
                if current.is_some() {
                    return Err(fail("case line before previous case ended".into()));
                }
                current = Some(CaseBuilder::parse(rest).map_err(fail)?);
            }
            "volume" => {
                let b = current.as_mut().ok_or_else(|| fail("volume line outside case".into()))?;
                b.parse_volume(rest, dir).map_err(fail)?;
            }
            "finding" => {
                let b = current.as_mut().ok_or_else(|| fail("finding line outside case".into()))?;
                b.parse_finding(rest).map_err(fail)?;
            }
            "end" => {
                let b = current.take().ok_or_else(|| fail("end line outside case".into()))?;
                cases.push(b.build().map_err(fail)?);
            }
            other => return Err(fail(format!("unknown record {other:?}"))),
        }
    }
    if current.is_some() {
        return Err(MmError::format(&index_path, 0, "unterminated case at end of index"));
    }
    if cases.len() != declared {
        return Err(MmError::format(
            &index_path,
            0,
            format!("index declares {declared} cases but contains {}", cases.len()),
        ));
    }
    Ok(Dataset { cases })
}

fn laterality_str(l: Laterality) -> &'static str {
    match l {
        Laterality::Left => "left",
        Laterality::Right => "right",
    }
}

struct CaseBuilder {
    id: String,
    label: Label,
    split: Split,
    annotated: bool,
    cc: Option<Volume>,
    mlo: Option<Volume>,
    findings_cc: Vec<Finding>,
    findings_mlo: Vec<Finding>,
}

fn kv<'a>(rest: &'a str, key: &str) -> std::result::Result<&'a str, String> {
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix(key) {
            if let Some(v) = v.strip_prefix('=') {
                return Ok(v);
            }
        }
    }
    Err(format!("missing field {key}= in {rest:?}"))
}

impl CaseBuilder {
    fn parse(rest: &str) -> std::result::Result<Self, String> {
        let id = kv(rest, "id")?.to_string();
        let label = match kv(rest, "label")? {
            "malignant" => Label::Malignant,
            "benign" => Label::Benign,
            "negative" => Label::Negative,
            other => return Err(format!("case {id}: unknown label {other:?}")),
        };
        let split = match kv(rest, "split")? {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(format!("case {id}: unknown split {other:?}")),
        };
        let annotated = kv(rest, "annotated")? == "1";
        Ok(CaseBuilder {
            id,
            label,
            split,
            annotated,
            cc: None,
            mlo: None,
            findings_cc: Vec::new(),
            findings_mlo: Vec::new(),
        })
    }

    fn parse_volume(&mut self, rest: &str, dir: &Path) -> std::result::Result<(), String> {
        let view = match kv(rest, "view")? {
            "cc" => View::Cc,
            "mlo" => View::Mlo,
            other => return Err(format!("case {}: unknown view {other:?}", self.id)),
        };
        let file = kv(rest, "file")?;
        let laterality = match kv(rest, "laterality")? {
            "left" => Laterality::Left,
            "right" => Laterality::Right,
            other => return Err(format!("case {}: unknown laterality {other:?}", self.id)),
        };
        let path = dir.join(file);
        if !path.exists() {
            return Err(format!("case {}: missing volume file {file}", self.id));
        }
        let mut vol =
            read_volume(&path).map_err(|e| format!("case {}: {e}", self.id))?;
        vol.view = view;
        vol.laterality = laterality;
        match view {
            View::Cc => self.cc = Some(vol),
            View::Mlo => self.mlo = Some(vol),
        }
        Ok(())
    }

    fn parse_finding(&mut self, rest: &str) -> std::result::Result<(), String> {
        let view = match kv(rest, "view")? {
            "cc" => View::Cc,
            "mlo" => View::Mlo,
            other => return Err(format!("case {}: unknown view {other:?}", self.id)),
        };
        let bbox_raw = kv(rest, "box")?;
        let parts: Vec<f64> = bbox_raw
            .split(',')
            .map(|s| s.parse::<f64>().map_err(|_| format!("case {}: bad box value {s:?}", self.id)))
            .collect::<std::result::Result<_, _>>()?;
        if parts.len() != 4 {
            return Err(format!("case {}: box needs 4 values, got {}", self.id, parts.len()));
        }
        let z_best: usize = kv(rest, "z_best")?
            .parse()
            .map_err(|_| format!("case {}: bad z_best", self.id))?;
        let zr = kv(rest, "z_range")?;
        let (lo, hi) = zr
            .split_once(',')
            .ok_or_else(|| format!("case {}: bad z_range {zr:?}", self.id))?;
        let z_range = (
            lo.parse().map_err(|_| format!("case {}: bad z_range low", self.id))?,
            hi.parse().map_err(|_| format!("case {}: bad z_range high", self.id))?,
        );
        let malignant = kv(rest, "malignant")? == "1";
        let f = Finding { bbox: [parts[0], parts[1], parts[2], parts[3]], z_best, z_range, malignant };
        match view {
            View::Cc => self.findings_cc.push(f),
            View::Mlo => self.findings_mlo.push(f),
        }
        Ok(())
    }

    fn build(self) -> std::result::Result<Case, String> {
        let cc = self.cc.ok_or(format!("case {}: missing cc volume", self.id))?;
        let mlo = self.mlo.ok_or(format!("case {}: missing mlo volume", self.id))?;
        Ok(Case {
            id: self.id,
            label: self.label,
            split: self.split,
            annotated: self.annotated,
            cc,
            mlo,
            findings_cc: self.findings_cc,
            findings_mlo: self.findings_mlo,
        })
    }
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(20 + v.voxels.len() * 4);
    bytes.extend_from_slice(VOLUME_MAGIC);
    for dim in [v.slices, v.height, v.width] {
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &x in &v.voxels {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| MmError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| MmError::io(path, e))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| MmError::io(path, e))?;
    read_volume_bytes(&bytes, path)
}

fn read_volume_bytes(bytes: &[u8], path: &Path) -> Result<Volume> {
    if bytes.len() < 8 || &bytes[0..8] != VOLUME_MAGIC {
        return Err(MmError::format(path, 0, "bad or missing volume magic"));
    }
    if bytes.len() < 20 {
        return Err(MmError::format(
            path,
            8,
            format!("truncated header: expected 20 bytes, got {}", bytes.len()),
        ));
    }
    let dim = |i: usize| {
        u32::from_le_bytes([bytes[8 + 4 * i], bytes[9 + 4 * i], bytes[10 + 4 * i], bytes[11 + 4 * i]])
            as usize
    };
    let (s, h, w) = (dim(0), dim(1), dim(2));
    if s == 0 || h == 0 || w == 0 {
        return Err(MmError::format(path, 8, format!("degenerate dims {s}x{h}x{w}")));
    }
    let expected = 20 + s * h * w * 4;
    if bytes.len() != expected {
        return Err(MmError::format(
            path,
            20,
            format!("payload length mismatch: expected {expected} bytes, got {}", bytes.len()),
        ));
    }
    let mut voxels = Vec::with_capacity(s * h * w);
    for chunk in bytes[20..].chunks_exact(4) {
        voxels.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Ok(Volume {
        slices: s,
        height: h,
        width: w,
        voxels,
        view: View::Cc,
        laterality: Laterality::Left,
    })
}

/// Stable content hash of a dataset directory (index + volume bytes).
pub fn dataset_fingerprint(dir: &Path) -> Result<u64> {
    let mut hash = 0xcbf29ce484222325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    let index_path = dir.join("index.txt");
    let index = fs::read(&index_path).map_err(|e| MmError::io(&index_path, e))?;
    eat(&index);
    let mut files: Vec<PathBuf> = fs::read_dir(dir.join("volumes"))
        .map_err(|e| MmError::io(dir.join("volumes"), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    files.sort();
    for f in files {
        let bytes = fs::read(&f).map_err(|e| MmError::io(&f, e))?;
        eat(&bytes);
    }
    Ok(hash)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_dataset, PhantomConfig};
    use super::*;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("mm3d_io_test_{tag}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).expect("create temp dir");
        dir
    }

    fn tiny_dataset() -> Dataset {
        let cfg = PhantomConfig { slices: 8, ..PhantomConfig::default() };
        generate_dataset(&cfg, 5, 40, [0.6, 0.2, 0.2]).expect("dataset")
    }

    #[test]
    fn roundtrip_is_lossless() {
        let dir = tmpdir("roundtrip");
        let ds = tiny_dataset();
        write_dataset(&ds, &dir).expect("write");
        let back = read_dataset(&dir).expect("read");
        assert_eq!(ds, back);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_volume_reports_expected_vs_actual() {
        let dir = tmpdir("truncated");
        let ds = tiny_dataset();
        write_dataset(&ds, &dir).expect("write");
        let victim = dir.join(format!("volumes/{}_cc.vol", ds.cases[0].id));
        let bytes = fs::read(&victim).expect("read file");
        fs::write(&victim, &bytes[..bytes.len() - 7]).expect("truncate");
        let err = read_dataset(&dir).expect_err("must fail");
        let msg = err.to_string();
        assert!(msg.contains("expected") && msg.contains("got"), "message {msg:?}");
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_magic_is_reported_at_offset_zero() {
        let dir = tmpdir("magic");
        let ds = tiny_dataset();
        write_dataset(&ds, &dir).expect("write");
        let victim = dir.join(format!("volumes/{}_mlo.vol", ds.cases[0].id));
        let mut bytes = fs::read(&victim).expect("read file");
        bytes[0] = b'X';
        fs::write(&victim, &bytes).expect("corrupt");
        let err = read_dataset(&dir).expect_err("must fail");
        assert!(err.to_string().contains("magic"), "{err}");
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_volume_file_names_the_case() {
        let dir = tmpdir("missing");
        let ds = tiny_dataset();
        write_dataset(&ds, &dir).expect("write");
        let victim = dir.join(format!("volumes/{}_cc.vol", ds.cases[2].id));
        fs::remove_file(&victim).expect("remove");
        let err = read_dataset(&dir).expect_err("must fail");
        assert!(
            err.to_string().contains(&ds.cases[2].id),
            "error should name the case: {err}"
        );
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let dir = tmpdir("fingerprint");
        let ds = tiny_dataset();
        write_dataset(&ds, &dir).expect("write");
        let a = dataset_fingerprint(&dir).expect("hash");
        let b = dataset_fingerprint(&dir).expect("hash");
        assert_eq!(a, b);
        let victim = dir.join(format!("volumes/{}_cc.vol", ds.cases[0].id));
        let mut bytes = fs::read(&victim).expect("read");
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&victim, &bytes).expect("flip");
        let c = dataset_fingerprint(&dir).expect("hash");
        assert_ne!(a, c);
        fs::remove_dir_all(&dir).ok();
    }
}
