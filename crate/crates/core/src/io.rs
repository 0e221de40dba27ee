//! File formats and dataset ingestion.
//!
//! Every format has a byte-level reader/writer pair (`decode_*` /
//! `encode_*`) plus thin path wrappers. Rasters use PFM (floats) and binary
//! PGM (class ids); occupancy grids use the `SOG1` container; model
//! parameters use the `SDPT` checkpoint. Multi-byte integers in the binary
//! containers are little-endian.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::{Matrix, ParamSet};
use crate::geometry::{CameraIntrinsics, GeometryError, LabeledCloud};
use crate::raster::{Raster, UNLABELED};
use crate::voxel::{resolve_semantics, GridSpec, OccupancyGrid, SemanticGrid, VoxelError, FREE};

pub const SOG_MAGIC: &[u8; 4] = b"SOG1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}", path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<IoError>,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated data: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("maxval {0} unsupported (8-bit only)")]
    MaxvalUnsupported(u32),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("duplicate frame id {0:?}")]
    DuplicateFrameId(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("line {line}: {message}")]
    BadLine { line: usize, message: String },
    #[error("missing key {0:?}")]
    MissingKey(String),
    #[error("key {key:?}: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("checkpoint slot {index}: {message}")]
    CheckpointMismatch { index: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
}

impl IoError {
    fn file(path: &Path, source: std::io::Error) -> Self {
        IoError::File {
            path: path.to_path_buf(),
            source,
        }
    }

    fn in_file(self, path: &Path) -> Self {
        match self {
            e @ (IoError::File { .. } | IoError::InFile { .. }) => e,
            e => IoError::InFile {
                path: path.to_path_buf(),
                source: Box::new(e),
            },
        }
    }

    /// The underlying error with any file context removed.
    pub fn root(&self) -> &IoError {
        match self {
            IoError::InFile { source, .. } => source.root(),
            e => e,
        }
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| IoError::file(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|e| IoError::file(path, e))
}

/// Splits off `count` whitespace-delimited header tokens, skipping `#`
/// comments, and returns them with the offset just past the single
/// whitespace byte that ends the last token.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize), IoError> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(IoError::MalformedHeader(format!(
                "expected {count} header fields, found {}",
                tokens.len()
            )));
        }
        let tok =
            std::str::from_utf8(&bytes[start..i]).map_err(|_| IoError::MalformedHeader("non-ASCII header".into()))?;
        tokens.push(tok.to_string());
    }
    if i >= bytes.len() {
        return Err(IoError::MalformedHeader("header not terminated".into()));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(tok: &str, what: &str) -> Result<usize, IoError> {
    match tok.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(IoError::MalformedHeader(format!("bad {what} {tok:?}"))),
    }
}

/// Grayscale PFM. Rows are stored bottom-to-top; either endianness is read.
pub fn decode_pfm(bytes: &[u8]) -> Result<Raster<f32>, IoError> {
    let (tok, offset) = header_tokens(bytes, 4)?;
    if tok[0] != "Pf" {
        return Err(IoError::MalformedHeader(format!("expected \"Pf\", found {:?}", tok[0])));
    }
    let w = parse_dim(&tok[1], "width")?;
    let h = parse_dim(&tok[2], "height")?;
    let scale: f64 = tok[3]
        .parse()
        .ok()
        .filter(|s: &f64| s.is_finite() && *s != 0.0)
        .ok_or_else(|| IoError::MalformedHeader(format!("bad scale {:?}", tok[3])))?;
    let little = scale < 0.0;
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| IoError::MalformedHeader("dimensions overflow".into()))?;
    let body = &bytes[offset..];
    if body.len() < expected {
        return Err(IoError::TruncatedData {
            expected,
            found: body.len(),
        });
    }
    let mut data = vec![0f32; w * h];
    for (k, chunk) in body[..expected].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let value = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row_from_bottom, u) = (k / w, k % w);
        data[(h - 1 - row_from_bottom) * w + u] = value;
    }
    Ok(Raster::from_vec(w, h, data).expect("sized by construction"))
}

/// Always little-endian (scale `-1.0`).
pub fn encode_pfm(r: &Raster<f32>) -> Vec<u8> {
    let (w, h) = r.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for v in (0..h).rev() {
        for u in 0..w {
            out.extend_from_slice(&r.at(u, v).to_le_bytes());
        }
    }
    out
}

pub fn read_pfm(path: &Path) -> Result<Raster<f32>, IoError> {
    decode_pfm(&read_bytes(path)?).map_err(|e| e.in_file(path))
}

pub fn write_pfm(path: &Path, r: &Raster<f32>) -> Result<(), IoError> {
    write_bytes(path, &encode_pfm(r))
}

/// PFM as `f64` disparity.
pub fn read_disparity(path: &Path) -> Result<Raster<f64>, IoError> {
    Ok(read_pfm(path)?.map(|&x| x as f64))
}

/// Narrowing `f64 -> f32` write of a disparity raster.
pub fn write_disparity(path: &Path, r: &Raster<f64>) -> Result<(), IoError> {
    write_pfm(path, &r.map(|&x| x as f32))
}

/// Binary PGM (`P5`) with an 8-bit maxval; one class id per byte.
pub fn decode_pgm(bytes: &[u8]) -> Result<Raster<u8>, IoError> {
    let (tok, offset) = header_tokens(bytes, 4)?;
    if tok[0] != "P5" {
        return Err(IoError::MalformedHeader(format!("expected \"P5\", found {:?}", tok[0])));
    }
    let w = parse_dim(&tok[1], "width")?;
    let h = parse_dim(&tok[2], "height")?;
    let maxval: u32 = tok[3]
        .parse()
        .map_err(|_| IoError::MalformedHeader(format!("bad maxval {:?}", tok[3])))?;
    if maxval == 0 {
        return Err(IoError::MalformedHeader("maxval 0".into()));
    }
    if maxval > 255 {
        return Err(IoError::MaxvalUnsupported(maxval));
    }
    let expected = w
        .checked_mul(h)
        .ok_or_else(|| IoError::MalformedHeader("dimensions overflow".into()))?;
    let body = &bytes[offset..];
    if body.len() < expected {
        return Err(IoError::TruncatedData {
            expected,
            found: body.len(),
        });
    }
    Ok(Raster::from_vec(w, h, body[..expected].to_vec()).expect("sized by construction"))
}

pub fn encode_pgm(r: &Raster<u8>) -> Vec<u8> {
    let (w, h) = r.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(r.as_slice());
    out
}

pub fn read_pgm(path: &Path) -> Result<Raster<u8>, IoError> {
    decode_pgm(&read_bytes(path)?).map_err(|e| e.in_file(path))
}

pub fn write_pgm(path: &Path, r: &Raster<u8>) -> Result<(), IoError> {
    write_bytes(path, &encode_pgm(r))
}

/// What a `SOG1` file holds: per-voxel point counts and resolved labels.
/// Grid geometry is stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct SogGrid {
    pub spec: GridSpec,
    pub counts: Vec<u32>,
    pub labels: Vec<u8>,
}

impl SogGrid {
    pub fn from_occupancy(grid: &OccupancyGrid) -> Self {
        let SemanticGrid { spec, labels } = resolve_semantics(grid);
        Self {
            spec,
            counts: grid.counts.clone(),
            labels,
        }
    }

    pub fn semantic(&self) -> SemanticGrid {
        SemanticGrid {
            spec: self.spec,
            labels: self.labels.clone(),
        }
    }

    /// Occupancy grid whose histograms put each voxel's whole count on its
    /// resolved label; voxels whose points were all unlabeled get none.
    pub fn to_occupancy(&self) -> OccupancyGrid {
        let mut grid = OccupancyGrid::empty(self.spec);
        grid.counts.clone_from(&self.counts);
        for (idx, (&c, &l)) in self.counts.iter().zip(&self.labels).enumerate() {
            if c > 0 && l != FREE {
                grid.histograms.insert(idx, BTreeMap::from([(l, c)]));
            }
        }
        grid
    }

    pub fn occupied(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

pub fn encode_sog(grid: &SogGrid) -> Vec<u8> {
    let n = grid.spec.voxel_count();
    debug_assert_eq!(grid.counts.len(), n);
    debug_assert_eq!(grid.labels.len(), n);
    let mut out = Vec::with_capacity(32 + 5 * n);
    out.extend_from_slice(SOG_MAGIC);
    for d in grid.spec.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(grid.spec.voxel_size as f32).to_le_bytes());
    for o in grid.spec.origin {
        out.extend_from_slice(&(o as f32).to_le_bytes());
    }
    for c in &grid.counts {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out.extend_from_slice(&grid.labels);
    out
}

const SOG_HEADER: usize = 4 + 3 * 4 + 4 + 3 * 4;

pub fn decode_sog(bytes: &[u8]) -> Result<SogGrid, IoError> {
    if bytes.len() < 4 {
        return Err(IoError::SizeMismatch {
            expected: SOG_HEADER,
            found: bytes.len(),
        });
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if &magic != SOG_MAGIC {
        return Err(IoError::BadMagic(magic));
    }
    if bytes.len() < SOG_HEADER {
        return Err(IoError::SizeMismatch {
            expected: SOG_HEADER,
            found: bytes.len(),
        });
    }
    let word = |k: usize| [bytes[4 + 4 * k], bytes[5 + 4 * k], bytes[6 + 4 * k], bytes[7 + 4 * k]];
    let dims = [0, 1, 2].map(|k| u32::from_le_bytes(word(k)) as usize);
    let voxel_size = f32::from_le_bytes(word(3)) as f64;
    let origin = [4, 5, 6].map(|k| f32::from_le_bytes(word(k)) as f64);
    let spec = GridSpec::new(dims, voxel_size, origin)?;
    let n = spec.voxel_count();
    let expected = n
        .checked_mul(5)
        .and_then(|b| b.checked_add(SOG_HEADER))
        .ok_or(IoError::SizeMismatch {
            expected: usize::MAX,
            found: bytes.len(),
        })?;
    if bytes.len() != expected {
        return Err(IoError::SizeMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let counts = bytes[SOG_HEADER..SOG_HEADER + 4 * n]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let labels = bytes[SOG_HEADER + 4 * n..].to_vec();
    Ok(SogGrid { spec, counts, labels })
}

pub fn read_sog(path: &Path) -> Result<SogGrid, IoError> {
    decode_sog(&read_bytes(path)?).map_err(|e| e.in_file(path))
}

pub fn write_sog(path: &Path, grid: &SogGrid) -> Result<(), IoError> {
    write_bytes(path, &encode_sog(grid))
}

/// One manifest row. Paths are resolved against the manifest's directory;
/// existence is only checked when the frame is read.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: String,
    pub disparity: PathBuf,
    pub labels: PathBuf,
    pub scale: f64,
}

/// CSV with header `frame_id,disparity,labels[,scale]`. An empty or absent
/// scale means 1.0.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<FrameRecord>, IoError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let (id_col, disp_col, label_col) = match (column("frame_id"), column("disparity"), column("labels")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(IoError::Manifest(
                "header must contain frame_id, disparity and labels".into(),
            ))
        }
    };
    let scale_col = column("scale");
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let frame_id = field(id_col).to_string();
        if frame_id.is_empty() {
            return Err(IoError::Manifest(format!("row {}: empty frame_id", row + 1)));
        }
        if !seen.insert(frame_id.clone()) {
            return Err(IoError::DuplicateFrameId(frame_id));
        }
        let scale = match scale_col.map(field).unwrap_or("") {
            "" => 1.0,
            s => s
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v > 0.0)
                .ok_or_else(|| IoError::BadValue {
                    key: format!("scale ({frame_id})"),
                    value: s.to_string(),
                })?,
        };
        records.push(FrameRecord {
            disparity: base_dir.join(field(disp_col)),
            labels: base_dir.join(field(label_col)),
            frame_id,
            scale,
        });
    }
    Ok(records)
}

pub fn load_manifest(path: &Path) -> Result<Vec<FrameRecord>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new("."))).map_err(|e| e.in_file(path))
}

/// Flat `key = value` lines; blank lines and `#` comments ignored, later
/// keys override earlier ones.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, IoError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| IoError::BadLine {
            line: i + 1,
            message: format!("expected key=value, found {line:?}"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(IoError::BadLine {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.insert(key.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, String>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    parse_key_values(&text).map_err(|e| e.in_file(path))
}

fn number(map: &BTreeMap<String, String>, key: &str) -> Result<f64, IoError> {
    let raw = map.get(key).ok_or_else(|| IoError::MissingKey(key.into()))?;
    raw.parse().map_err(|_| IoError::BadValue {
        key: key.into(),
        value: raw.clone(),
    })
}

pub fn parse_intrinsics(text: &str) -> Result<CameraIntrinsics, IoError> {
    let map = parse_key_values(text)?;
    let k = CameraIntrinsics::new(
        number(&map, "f_x")?,
        number(&map, "f_y")?,
        number(&map, "o_x")?,
        number(&map, "o_y")?,
        number(&map, "b")?,
    )?;
    Ok(k)
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    parse_intrinsics(&text).map_err(|e| e.in_file(path))
}

/// One `x y z label` line per point; unlabeled points carry 255.
pub fn format_cloud_ascii(cloud: &LabeledCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 32);
    for p in &cloud.points {
        let _ = writeln!(out, "{} {} {} {}", p.x, p.y, p.z, p.label.unwrap_or(UNLABELED));
    }
    out
}

pub fn write_cloud_ascii(path: &Path, cloud: &LabeledCloud) -> Result<(), IoError> {
    write_bytes(path, format_cloud_ascii(cloud).as_bytes())
}

/// A parameter as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub index: usize,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode_checkpoint(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (index, p) in params.iter().enumerate() {
        out.extend_from_slice(&(index as u32).to_le_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in p.value.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], IoError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(IoError::TruncatedData {
                expected: self.at.saturating_add(n),
                found: self.bytes.len(),
            })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointEntry>, IoError> {
    let mut cur = Cursor { bytes, at: 0 };
    let m = cur.take(4)?;
    let magic = [m[0], m[1], m[2], m[3]];
    if &magic != CHECKPOINT_MAGIC {
        return Err(IoError::BadMagic(magic));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let index = cur.u32()? as usize;
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let raw = cur.take(len.checked_mul(8).ok_or(IoError::TruncatedData {
            expected: usize::MAX,
            found: bytes.len(),
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        entries.push(CheckpointEntry { index, shape, data });
    }
    if cur.at != bytes.len() {
        return Err(IoError::SizeMismatch {
            expected: cur.at,
            found: bytes.len(),
        });
    }
    Ok(entries)
}

/// Overwrite parameter values from a checkpoint; every slot must be present
/// exactly once with a matching shape.
pub fn load_checkpoint_into(params: &mut ParamSet, entries: &[CheckpointEntry]) -> Result<(), IoError> {
    if entries.len() != params.len() {
        return Err(IoError::CheckpointMismatch {
            index: entries.len(),
            message: format!("checkpoint has {} slots, model has {}", entries.len(), params.len()),
        });
    }
    let mut seen = vec![false; params.len()];
    for e in entries {
        if e.index >= params.len() || std::mem::replace(&mut seen[e.index], true) {
            return Err(IoError::CheckpointMismatch {
                index: e.index,
                message: "index out of range or repeated".into(),
            });
        }
        let p = params.get_mut(e.index);
        if p.shape != e.shape {
            return Err(IoError::CheckpointMismatch {
                index: e.index,
                message: format!("shape {:?} vs model {:?}", e.shape, p.shape),
            });
        }
        p.value = Matrix::from_shape_vec(p.value.raw_dim(), e.data.clone()).expect("shape checked");
        p.grad = None;
    }
    Ok(())
}

pub fn write_checkpoint(path: &Path, params: &ParamSet) -> Result<(), IoError> {
    write_bytes(path, &encode_checkpoint(params))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>, IoError> {
    decode_checkpoint(&read_bytes(path)?).map_err(|e| e.in_file(path))
}
