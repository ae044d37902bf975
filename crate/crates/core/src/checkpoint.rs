//! Checkpoint archives and backbone transplantation.
//!
//! File layout:
//!
//! ```text
//! magic    8 bytes   "GPCKPT\r\n"
//! hlen     u64 LE    length of the JSON header
//! header   hlen      {"format_version":1,"meta":{..},"arrays":[{name,dtype,shape,offset,length}]}
//! payload            little-endian row-major array data, offsets relative to payload start
//! digest   32 bytes  SHA-256 of everything before it
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 8] = b"GPCKPT\r\n";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Allowed top-level key namespaces.
pub const NAMESPACES: &[&str] = &["backbone.", "head.", "projector.", "predictor.", "det_backbone."];
pub const BACKBONE_PREFIXES: &[&str] = &["backbone.", "det_backbone."];

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checksum mismatch: file is truncated or corrupted")]
    Checksum,
    #[error("not a checkpoint archive (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("unknown checkpoint method `{0}` (expected generalist, supervised or simsiam)")]
    UnknownMethod(String),
    #[error("array key `{0}` is outside the known namespaces")]
    BadNamespace(String),
    #[error("array `{name}`: shape {shape:?} needs {expected} values, got {actual}")]
    BadLength {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape conflict for `{key}`: source {source_shape:?} vs target {target_shape:?}")]
    ShapeConflict {
        key: String,
        source_shape: Vec<usize>,
        target_shape: Vec<usize>,
    },
    #[error("strict transplant failed; unmatched source keys: [{}]; unfilled target keys: [{}]", .unmatched.join(", "), .unfilled.join(", "))]
    Incomplete {
        unmatched: Vec<String>,
        unfilled: Vec<String>,
    },
    #[error("source checkpoint has no backbone keys")]
    NoBackbone,
    #[error("missing backbone keys: [{}]", .0.join(", "))]
    MissingKeys(Vec<String>),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Generalist,
    Supervised,
    Simsiam,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Generalist => "generalist",
            Method::Supervised => "supervised",
            Method::Simsiam => "simsiam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "generalist" => Ok(Method::Generalist),
            "supervised" => Ok(Method::Supervised),
            "simsiam" => Ok(Method::Simsiam),
            other => Err(CheckpointError::UnknownMethod(other.to_string())),
        }
    }

    /// Short file-name prefix: `sup`, `sim`, or `base`.
    pub fn short(self) -> &'static str {
        match self {
            Method::Generalist => "base",
            Method::Supervised => "sup",
            Method::Simsiam => "sim",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    /// ImageNet channel statistics, in [0, 1] pixel units.
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub method: Method,
    pub dataset: String,
    pub epochs: u64,
    pub normalization: Normalization,
    pub parent_checksum: Option<String>,
    /// Backbone variant name, e.g. `resnet50` or `tiny`.
    pub backbone: String,
    /// Free-form extra fields, kept sorted.
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl CheckpointMeta {
    pub fn new(method: Method, dataset: impl Into<String>, backbone: impl Into<String>) -> Self {
        Self {
            method,
            dataset: dataset.into(),
            epochs: 0,
            normalization: Normalization::default(),
            parent_checksum: None,
            backbone: backbone.into(),
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawMeta {
    method: String,
    dataset: String,
    epochs: u64,
    normalization: Normalization,
    #[serde(default)]
    parent_checksum: Option<String>,
    backbone: String,
    #[serde(default)]
    extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            ArrayData::F32(v) => v.clone(),
            ArrayData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

/// A named n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(CheckpointError::BadLength {
                name: String::new(),
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, ArrayData::F32(data))
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: BTreeMap<String, Array>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: RawMeta,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn namespace_ok(key: &str) -> bool {
    NAMESPACES.iter().any(|ns| key.starts_with(ns) && key.len() > ns.len())
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, array: Array) -> Result<()> {
        let key = key.into();
        if !namespace_ok(&key) {
            return Err(CheckpointError::BadNamespace(key));
        }
        self.arrays.insert(key, array);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Array> {
        self.arrays.get(key)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    /// Keys in any backbone namespace.
    pub fn backbone_keys(&self) -> Vec<&str> {
        self.keys().filter(|k| backbone_suffix(k).is_some()).collect()
    }

    /// Name to shape map, the skeleton view of this checkpoint.
    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.arrays
            .iter()
            .map(|(k, a)| (k.clone(), a.shape.clone()))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, array) in &self.arrays {
            if !namespace_ok(name) {
                return Err(CheckpointError::BadNamespace(name.clone()));
            }
            let offset = payload.len() as u64;
            array.data.write_le(&mut payload);
            entries.push(ArrayEntry {
                name: name.clone(),
                dtype: array.data.dtype().to_string(),
                shape: array.shape.clone(),
                offset,
                length: payload.len() as u64 - offset,
            });
        }
        let m = &self.meta;
        let header = Header {
            format_version: FORMAT_VERSION,
            meta: RawMeta {
                method: m.method.as_str().to_string(),
                dataset: m.dataset.clone(),
                epochs: m.epochs,
                normalization: m.normalization.clone(),
                parent_checksum: m.parent_checksum.clone(),
                backbone: m.backbone.clone(),
                extra: m.extra.clone(),
            },
            arrays: entries,
        };
        let header = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
            return Err(CheckpointError::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        if &body[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes"));
        let hlen = usize::try_from(hlen).map_err(|_| CheckpointError::Header("header length overflow".into()))?;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| CheckpointError::Header("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[16..header_end])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(header.format_version));
        }
        let payload = &body[header_end..];
        let raw = header.meta;
        let meta = CheckpointMeta {
            method: Method::parse(&raw.method)?,
            dataset: raw.dataset,
            epochs: raw.epochs,
            normalization: raw.normalization,
            parent_checksum: raw.parent_checksum,
            backbone: raw.backbone,
            extra: raw.extra,
        };
        let mut arrays = BTreeMap::new();
        for e in header.arrays {
            if !namespace_ok(&e.name) {
                return Err(CheckpointError::BadNamespace(e.name));
            }
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(CheckpointError::Header(format!("unknown dtype `{other}`"))),
            };
            let numel = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Header(format!("shape overflow for `{}`", e.name)))?;
            let start = usize::try_from(e.offset).ok();
            let len = usize::try_from(e.length).ok();
            let range = start
                .zip(len)
                .and_then(|(s, l)| s.checked_add(l).map(|end| s..end))
                .filter(|r| r.end <= payload.len())
                .ok_or_else(|| CheckpointError::Header(format!("array `{}` lies outside the payload", e.name)))?;
            let raw = &payload[range];
            if raw.len() != numel.checked_mul(width).unwrap_or(usize::MAX) {
                return Err(CheckpointError::BadLength {
                    name: e.name,
                    shape: e.shape,
                    expected: numel,
                    actual: raw.len() / width,
                });
            }
            let data = if width == 4 {
                ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )
            } else {
                ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                )
            };
            if arrays.insert(e.name.clone(), Array { shape: e.shape, data }).is_some() {
                return Err(CheckpointError::Header(format!("duplicate array `{}`", e.name)));
            }
        }
        Ok(Self { meta, arrays })
    }

    /// Writes atomically: a temp file in the target directory, then rename.
    /// Returns the hex SHA-256 of the written file.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes).map_err(io_err(path))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a file, the value stored as `parent_checksum` by children.
pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}

/// Atomic write for arbitrary artifacts (manifests, CSVs).
pub fn save_bytes_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    write_atomic(path, bytes)
}

/// Part of the key after a backbone namespace, e.g. `stem.conv.weight`.
pub fn backbone_suffix(key: &str) -> Option<&str> {
    BACKBONE_PREFIXES.iter().find_map(|p| key.strip_prefix(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransplantMode {
    Strict,
    Permissive,
}

/// Outcome of a transplant.
///
/// `matched` and `newly_initialized` partition the target keys. `skipped`
/// holds source keys outside the backbone namespaces (projector, predictor,
/// heads); `unmatched` holds source backbone keys with no target slot.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TransplantReport {
    /// `(source key, target key)` pairs.
    pub matched: Vec<(String, String)>,
    pub skipped: Vec<String>,
    pub unmatched: Vec<String>,
    pub newly_initialized: Vec<String>,
}

impl TransplantReport {
    pub fn target_count(&self) -> usize {
        self.matched.len() + self.newly_initialized.len()
    }
}

/// Copies backbone arrays from `source` into a copy of `target`, matching
/// on the name after the backbone namespace, so `backbone.x` can fill
/// `det_backbone.x`. Target arrays that are not filled keep their values.
///
/// A shape conflict is always fatal. Strict mode also fails when any source
/// backbone key has no target or any target backbone key is left unfilled.
pub fn transplant_backbone(
    source: &Checkpoint,
    target: &Checkpoint,
    mode: TransplantMode,
) -> Result<(Checkpoint, TransplantReport)> {
    let mut by_suffix: BTreeMap<&str, &str> = BTreeMap::new();
    let mut report = TransplantReport::default();
    for key in source.keys() {
        match backbone_suffix(key) {
            Some(suffix) => {
                if by_suffix.insert(suffix, key).is_some() {
                    return Err(CheckpointError::Header(format!(
                        "source has more than one backbone array named `{suffix}`"
                    )));
                }
            }
            None => report.skipped.push(key.to_string()),
        }
    }
    if by_suffix.is_empty() {
        return Err(CheckpointError::NoBackbone);
    }

    let mut out = target.clone();
    let mut used = std::collections::BTreeSet::new();
    let mut unfilled = Vec::new();
    for (tkey, tarr) in &target.arrays {
        let Some(suffix) = backbone_suffix(tkey) else {
            report.newly_initialized.push(tkey.clone());
            continue;
        };
        let Some(&skey) = by_suffix.get(suffix) else {
            unfilled.push(tkey.clone());
            report.newly_initialized.push(tkey.clone());
            continue;
        };
        let sarr = &source.arrays[skey];
        if sarr.shape != tarr.shape {
            return Err(CheckpointError::ShapeConflict {
                key: tkey.clone(),
                source_shape: sarr.shape.clone(),
                target_shape: tarr.shape.clone(),
            });
        }
        out.arrays.insert(tkey.clone(), sarr.clone());
        used.insert(suffix);
        report.matched.push((skey.to_string(), tkey.clone()));
    }
    report.unmatched = by_suffix
        .iter()
        .filter(|(s, _)| !used.contains(*s))
        .map(|(_, k)| k.to_string())
        .collect();
    if mode == TransplantMode::Strict && (!report.unmatched.is_empty() || !unfilled.is_empty()) {
        return Err(CheckpointError::Incomplete {
            unmatched: report.unmatched,
            unfilled,
        });
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_ckpt(seed: u64) -> Checkpoint {
        let mut rng = crate::seed::rng(seed);
        let mut c = Checkpoint::new(CheckpointMeta::new(Method::Generalist, "imagenet", "tiny"));
        for (k, shape) in [
            ("backbone.stem.conv.weight", vec![4, 3, 3, 3]),
            ("backbone.stem.bn.running_var", vec![4]),
            ("head.classifier.weight", vec![2, 4]),
        ] {
            let n = shape.iter().product();
            c.insert(k, Array::f32(shape, (0..n).map(|_| rng.random::<f32>() - 0.5).collect()).unwrap())
                .unwrap();
        }
        c.insert("projector.0.weight", Array::new(vec![2], ArrayData::F64(vec![f64::MIN_POSITIVE, -0.0])).unwrap())
            .unwrap();
        c
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut c = random_ckpt(1);
        c.meta.epochs = 7;
        c.meta.extra.insert("note".into(), serde_json::json!({"k": [1, 2]}));
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        let ArrayData::F64(v) = &back.arrays["projector.0.weight"].data else { panic!() };
        assert_eq!(v[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncation_and_corruption_fail_checksum() {
        let bytes = random_ckpt(2).to_bytes().unwrap();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Checksum)));
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::Checksum)));
    }

    #[test]
    fn unknown_method_is_fatal() {
        let bytes = random_ckpt(3).to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[16..16 + hlen].to_vec()).unwrap();
        let header = header.replace("\"generalist\"", "\"moco\"");
        let mut body = Vec::new();
        body.extend_from_slice(MAGIC);
        body.extend_from_slice(&(header.len() as u64).to_le_bytes());
        body.extend_from_slice(header.as_bytes());
        body.extend_from_slice(&bytes[16 + hlen..bytes.len() - 32]);
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        assert!(matches!(Checkpoint::from_bytes(&body), Err(CheckpointError::UnknownMethod(m)) if m == "moco"));
    }

    #[test]
    fn keys_must_be_namespaced() {
        let mut c = random_ckpt(4);
        assert!(c.insert("conv1.weight", Array::f32(vec![1], vec![0.0]).unwrap()).is_err());
        assert!(c.insert("backbone.", Array::f32(vec![1], vec![0.0]).unwrap()).is_err());
    }

    #[test]
    fn parent_checksum_chain() {
        let dir = tempfile::tempdir().unwrap();
        let parent = dir.path().join("generalist.ckpt");
        let digest = random_ckpt(5).save(&parent).unwrap();
        assert_eq!(digest, file_checksum(&parent).unwrap());
        let mut child = random_ckpt(6);
        child.meta.method = Method::Simsiam;
        child.meta.parent_checksum = Some(file_checksum(&parent).unwrap());
        let child_path = dir.path().join("sim.ckpt");
        child.save(&child_path).unwrap();
        let loaded = Checkpoint::load(&child_path).unwrap();
        assert_eq!(loaded.meta.parent_checksum.as_deref(), Some(digest.as_str()));
    }

    #[test]
    fn transplant_into_own_skeleton_is_identity() {
        let c = random_ckpt(7);
        let (out, report) = transplant_backbone(&c, &c, TransplantMode::Strict).unwrap();
        assert_eq!(out, c);
        assert_eq!(report.matched.len(), 2);
        assert_eq!(report.newly_initialized, vec!["head.classifier.weight", "projector.0.weight"]);
        assert_eq!(report.skipped, vec!["head.classifier.weight", "projector.0.weight"]);
        assert_eq!(report.target_count(), c.len());
    }

    #[test]
    fn transplant_across_namespaces_and_idempotence() {
        let src = random_ckpt(8);
        let mut target = Checkpoint::new(CheckpointMeta::new(Method::Simsiam, "x", "tiny"));
        for (k, a) in &src.arrays {
            if let Some(s) = backbone_suffix(k) {
                let zeros = Array::f32(a.shape.clone(), vec![0.0; a.numel()]).unwrap();
                target.insert(format!("det_backbone.{s}"), zeros).unwrap();
            }
        }
        target.insert("head.fpn.w", Array::f32(vec![1], vec![0.5]).unwrap()).unwrap();
        let (once, _) = transplant_backbone(&src, &target, TransplantMode::Strict).unwrap();
        assert_eq!(once.arrays["det_backbone.stem.conv.weight"], src.arrays["backbone.stem.conv.weight"]);
        assert_eq!(once.arrays["head.fpn.w"], target.arrays["head.fpn.w"]);
        let (twice, _) = transplant_backbone(&src, &once, TransplantMode::Strict).unwrap();
        assert_eq!(twice, once);
    }

    #[test]
    fn renamed_key_reported_unmatched_in_permissive_mode() {
        let target = random_ckpt(9);
        let mut mutant = target.clone();
        let a = mutant.arrays.remove("backbone.stem.bn.running_var").unwrap();
        mutant.insert("backbone.stem.bn.running_varx", a).unwrap();
        let (_, report) = transplant_backbone(&mutant, &target, TransplantMode::Permissive).unwrap();
        assert_eq!(report.unmatched, vec!["backbone.stem.bn.running_varx"]);
        assert!(report.newly_initialized.contains(&"backbone.stem.bn.running_var".to_string()));
        assert!(matches!(
            transplant_backbone(&mutant, &target, TransplantMode::Strict),
            Err(CheckpointError::Incomplete { .. })
        ));
    }

    #[test]
    fn shape_conflict_is_fatal_in_both_modes() {
        let target = random_ckpt(10);
        let mut src = target.clone();
        src.arrays.insert("backbone.stem.bn.running_var".into(), Array::f32(vec![5], vec![1.0; 5]).unwrap());
        for mode in [TransplantMode::Strict, TransplantMode::Permissive] {
            assert!(matches!(
                transplant_backbone(&src, &target, mode),
                Err(CheckpointError::ShapeConflict { .. })
            ));
        }
    }
}
