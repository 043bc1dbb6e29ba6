//! On-disk formats: raw volumes with a text header, and the dataset manifest.
//!
//! A volume `name` is stored as `name.raw` (little-endian samples, C order)
//! next to `name.hdr`:
//!
//! ```text
//! format = lungrisk-volume
//! shape = 64 64 64
//! spacing = 2.5 1.4 1.4
//! dtype = f32
//! order = C
//! origin_offset = 0 0 0
//! ```

use crate::error::{Error, Result};
use crate::losses::{RegionAnnotation, Side};
use crate::phantom::RiskRecord;
use crate::volume::Volume;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

const FORMAT_TAG: &str = "lungrisk-volume";

/// Sample type of a stored volume.
pub trait VoxelType: Copy + Default {
    const DTYPE: &'static str;
    const BYTES: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl VoxelType for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl VoxelType for u8 {
    const DTYPE: &'static str = "u8";
    const BYTES: usize = 1;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn get(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `stem.hdr` and `stem.raw`.
pub fn write_volume<T: VoxelType>(stem: &Path, v: &Volume<T>) -> Result<()> {
    let [a, b, c] = v.shape();
    let [s0, s1, s2] = v.spacing;
    let [o0, o1, o2] = v.origin_offset;
    let header = format!(
        "format = {FORMAT_TAG}\nshape = {a} {b} {c}\nspacing = {s0} {s1} {s2}\ndtype = {}\norder = C\norigin_offset = {o0} {o1} {o2}\n",
        T::DTYPE
    );
    let mut raw = Vec::with_capacity(v.len() * T::BYTES);
    for &x in v.data.iter() {
        x.put(&mut raw);
    }
    write_file(&with_ext(stem, "hdr"), header.as_bytes())?;
    write_file(&with_ext(stem, "raw"), &raw)
}

fn parse_triple<T: std::str::FromStr>(value: &str, key: &str, path: &Path) -> Result<[T; 3]> {
    let parts: Vec<T> = value
        .split_whitespace()
        .map(|p| p.parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Data(format!("{}: `{key}` is not a list of numbers", path.display())))?;
    parts
        .try_into()
        .map_err(|_| Error::Data(format!("{}: `{key}` needs three values", path.display())))
}

/// Reads a volume written by [`write_volume`], checking dtype and size.
pub fn read_volume<T: VoxelType>(stem: &Path) -> Result<Volume<T>> {
    let hdr_path = with_ext(stem, "hdr");
    let text = read_text(&hdr_path)?;
    let mut fields = BTreeMap::new();
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("{}: malformed line `{line}`", hdr_path.display())))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let field = |k: &str| {
        fields
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("{}: missing `{k}`", hdr_path.display())))
    };
    if field("format")? != FORMAT_TAG {
        return Err(Error::Data(format!("{}: not a volume header", hdr_path.display())));
    }
    if field("dtype")? != T::DTYPE {
        return Err(Error::Data(format!(
            "{}: dtype {} where {} was expected",
            hdr_path.display(),
            field("dtype")?,
            T::DTYPE
        )));
    }
    if field("order")? != "C" {
        return Err(Error::Data(format!(
            "{}: only C order is supported",
            hdr_path.display()
        )));
    }
    let shape: [usize; 3] = parse_triple(field("shape")?, "shape", &hdr_path)?;
    let spacing: [f64; 3] = parse_triple(field("spacing")?, "spacing", &hdr_path)?;
    let origin_offset: [i64; 3] = match fields.get("origin_offset") {
        Some(v) => parse_triple(v, "origin_offset", &hdr_path)?,
        None => [0; 3],
    };
    let raw_path = with_ext(stem, "raw");
    let raw = read_file(&raw_path)?;
    let n: usize = shape.iter().product();
    if raw.len() != n * T::BYTES {
        return Err(Error::Data(format!(
            "{}: {} bytes for shape {shape:?} of {}",
            raw_path.display(),
            raw.len(),
            T::DTYPE
        )));
    }
    let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::get).collect();
    let data = Array3::from_shape_vec((shape[0], shape[1], shape[2]), data)
        .map_err(|e| Error::Data(format!("{}: {e}", raw_path.display())))?;
    let mut v = Volume::new(data, spacing).map_err(|e| Error::Data(format!("{}: {e}", hdr_path.display())))?;
    v.origin_offset = origin_offset;
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    /// Extra held-out scans, all carrying a nodule, for attention analyses.
    Probe,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Probe => "probe",
        }
    }
}

/// One manifest row. Paths are relative to the dataset directory and name
/// volume stems (without `.hdr` / `.raw`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: String,
    pub split: Split,
    pub volume: String,
    pub lobe_mask: String,
    #[serde(default, with = "empty_as_none")]
    pub nodule_mask: Option<String>,
    pub event: u8,
    pub time_years: f64,
    #[serde(default, with = "empty_as_none")]
    pub lobe_label: Option<u8>,
    #[serde(default, with = "empty_as_none")]
    pub side_label: Option<Side>,
}

mod empty_as_none {
    use serde::de::DeserializeOwned;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<T: Serialize, S: Serializer>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => x.serialize(s),
            None => s.serialize_str(""),
        }
    }

    pub fn deserialize<'de, T: DeserializeOwned, D: Deserializer<'de>>(d: D) -> Result<Option<T>, D::Error> {
        let raw = String::deserialize(d)?;
        if raw.is_empty() {
            return Ok(None);
        }
        let quoted = serde_json::Value::String(raw.clone());
        serde_json::from_value(quoted)
            .or_else(|_| serde_json::from_str(&raw))
            .map(Some)
            .map_err(serde::de::Error::custom)
    }
}

impl ManifestRow {
    pub fn record(&self) -> RiskRecord {
        RiskRecord {
            sample_id: self.sample_id.clone(),
            event: self.event == 1,
            time_years: self.time_years,
        }
    }

    /// Lobe and side labels; the patch mask is attached after preprocessing.
    pub fn region_labels(&self) -> RegionAnnotation {
        RegionAnnotation {
            nodule_patch_mask: None,
            lobe_label: self.lobe_label,
            side_label: self.side_label,
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

pub fn write_manifest(dir: &Path, rows: &[ManifestRow]) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    write_file(&path, &bytes)
}

/// Reads and checks the manifest: unique ids, valid records and labels.
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = read_file(&path)?;
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(bytes.as_slice());
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (line, row) in r.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("{} row {}: {e}", path.display(), line + 1)))?;
        if !seen.insert(row.sample_id.clone()) {
            return Err(Error::Data(format!(
                "{}: duplicate sample_id {}",
                path.display(),
                row.sample_id
            )));
        }
        if row.event > 1 {
            return Err(Error::Data(format!(
                "{}: event must be 0 or 1 for {}",
                path.display(),
                row.sample_id
            )));
        }
        row.record()
            .validate()
            .and_then(|_| row.region_labels().validate(None))
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{} lists no samples", path.display())));
    }
    Ok(rows)
}
