// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary containers and trace manifests.
//!
//! Array blob (`.saet`), little-endian:
//!
//! | bytes      | field                                    |
//! |------------|------------------------------------------|
//! | 4          | magic `SAET`                             |
//! | 4          | version `u32` (= 1)                      |
//! | 1          | dtype `u8`: 1 f32, 2 f64, 3 u16, 4 u32   |
//! | 4          | ndim `u32` (>= 1)                        |
//! | 8 * ndim   | dims `u64`, row-major, each >= 1         |
//! | payload    | `product(dims)` elements                 |
//!
//! Segmentation raster (`.saes`): magic `SAES`, version `u32`, width `u32`,
//! height `u32`, then `width * height` `u16` category ids row-major
//! (65535 = unlabeled).
//!
//! A trace is a JSON manifest plus per-step blobs referenced by paths
//! relative to the manifest's directory.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::fsutil::write_atomic;
use crate::reliability::NextTokenStats;
use crate::seg_align::SegmentationMap;
use crate::trace::{AttentionTrace, HeadRows, ObjectFlag, PatchGrid, StepRecord};

pub const BLOB_MAGIC: [u8; 4] = *b"SAET";
pub const RASTER_MAGIC: [u8; 4] = *b"SAES";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    U16,
    U32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::U16 => 3,
            DType::U32 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U16),
            4 => Some(DType::U32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U16 => 2,
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U16(Vec<u16>),
    U32(Vec<u32>),
}

impl BlobData {
    pub fn dtype(&self) -> DType {
        match self {
            BlobData::F32(_) => DType::F32,
            BlobData::F64(_) => DType::F64,
            BlobData::U16(_) => DType::U16,
            BlobData::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::F64(v) => v.len(),
            BlobData::U16(v) => v.len(),
            BlobData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            BlobData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            BlobData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            BlobData::U16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            BlobData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_le_bytes(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => BlobData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => BlobData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U16 => BlobData::U16(
                bytes
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U32 => BlobData::U32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

/// A typed, shaped array.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayBlob {
    shape: Vec<usize>,
    data: BlobData,
}

impl ArrayBlob {
    pub fn new(shape: Vec<usize>, data: BlobData) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Validation("blob shape must have at least one dimension".into()));
        }
        if shape.contains(&0) {
            return Err(Error::Validation(format!("blob shape {shape:?} has a zero dimension")));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Validation(format!("blob shape {shape:?} overflows")))?;
        if count != data.len() {
            return Err(Error::LengthMismatch {
                expected: count,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &BlobData {
        &self.data
    }

    pub fn into_data(self) -> BlobData {
        self.data
    }

    /// Float payload widened to `f64`; integer blobs yield `None`.
    pub fn to_f64(&self) -> Option<Vec<f64>> {
        match &self.data {
            BlobData::F32(v) => Some(v.iter().map(|&x| f64::from(x)).collect()),
            BlobData::F64(v) => Some(v.clone()),
            _ => None,
        }
    }

    pub fn header_len(&self) -> usize {
        4 + 4 + 1 + 4 + 8 * self.shape.len()
    }

    pub fn encoded_len(&self) -> usize {
        self.header_len() + self.data.len() * self.dtype().size()
    }
}

struct CountingWriter<W> {
    inner: W,
    offset: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<(), FormatError> {
        self.inner.write_all(bytes).map_err(|source| FormatError::Io {
            offset: self.offset,
            source,
        })?;
        self.offset += bytes.len() as u64;
        Ok(())
    }

    fn flush(&mut self) -> Result<(), FormatError> {
        self.inner.flush().map_err(|source| FormatError::Io {
            offset: self.offset,
            source,
        })
    }
}

/// Serializes a blob; returns the number of bytes written.
pub fn write_blob<W: Write>(blob: &ArrayBlob, sink: W) -> Result<u64, FormatError> {
    let mut w = CountingWriter { inner: sink, offset: 0 };
    w.put(&BLOB_MAGIC)?;
    w.put(&FORMAT_VERSION.to_le_bytes())?;
    w.put(&[blob.dtype().code()])?;
    w.put(&(blob.shape.len() as u32).to_le_bytes())?;
    for &d in &blob.shape {
        w.put(&(d as u64).to_le_bytes())?;
    }
    w.put(&blob.data.to_le_bytes())?;
    w.flush()?;
    Ok(w.offset)
}

struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    /// Reads up to `buf.len()` bytes, stopping early only at end of input.
    fn fill(&mut self, buf: &mut [u8]) -> Result<usize, FormatError> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => break,
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(source) => {
                    return Err(FormatError::Io {
                        offset: self.offset + got as u64,
                        source,
                    })
                }
            }
        }
        Ok(got)
    }

    fn exact<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        let mut buf = [0u8; N];
        let got = self.fill(&mut buf)?;
        if got < N {
            return Err(FormatError::Truncated {
                offset: self.offset,
                expected: N as u64,
                actual: got as u64,
            });
        }
        self.offset += N as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.exact()?))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.exact()?))
    }

    /// Reads exactly `len` payload bytes without consuming anything beyond them.
    fn payload(&mut self, len: u64) -> Result<Vec<u8>, FormatError> {
        let mut buf = Vec::new();
        let start = self.offset;
        (&mut self.inner)
            .take(len)
            .read_to_end(&mut buf)
            .map_err(|source| FormatError::Io { offset: start, source })?;
        if (buf.len() as u64) < len {
            return Err(FormatError::Truncated {
                offset: start,
                expected: len,
                actual: buf.len() as u64,
            });
        }
        self.offset += len;
        Ok(buf)
    }
}

fn check_magic<R: Read>(r: &mut OffsetReader<R>, expected: [u8; 4]) -> Result<(), FormatError> {
    let found = r.exact::<4>()?;
    if found != expected {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(&expected).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    let at = r.offset;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion { offset: at, version });
    }
    Ok(())
}

/// Parses one blob from `source`, reading no further than its declared payload.
pub fn read_blob<R: Read>(source: R) -> Result<ArrayBlob, FormatError> {
    let mut r = OffsetReader {
        inner: source,
        offset: 0,
    };
    check_magic(&mut r, BLOB_MAGIC)?;
    let at = r.offset;
    let [code] = r.exact::<1>()?;
    let dtype = DType::from_code(code).ok_or(FormatError::UnknownDtype { offset: at, code })?;
    let at = r.offset;
    let ndim = r.u32()?;
    if ndim == 0 {
        return Err(FormatError::InvalidShape {
            offset: at,
            reason: "ndim is 0".into(),
        });
    }
    let mut shape = Vec::with_capacity(ndim.min(64) as usize);
    let mut count: u64 = 1;
    for i in 0..ndim {
        let at = r.offset;
        let d = r.u64()?;
        if d == 0 {
            return Err(FormatError::InvalidShape {
                offset: at,
                reason: format!("dimension {i} is 0"),
            });
        }
        count = count.checked_mul(d).ok_or_else(|| FormatError::InvalidShape {
            offset: at,
            reason: "element count overflows".into(),
        })?;
        shape.push(usize::try_from(d).map_err(|_| FormatError::InvalidShape {
            offset: at,
            reason: format!("dimension {d} does not fit this platform"),
        })?);
    }
    let bytes = count
        .checked_mul(dtype.size() as u64)
        .ok_or_else(|| FormatError::InvalidShape {
            offset: r.offset,
            reason: "payload size overflows".into(),
        })?;
    let payload = r.payload(bytes)?;
    Ok(ArrayBlob {
        shape,
        data: BlobData::from_le_bytes(dtype, &payload),
    })
}

pub fn read_blob_file(path: &Path) -> Result<ArrayBlob> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_blob(io::BufReader::new(file)).map_err(|e| Error::format(path, e))
}

pub fn write_blob_file(path: &Path, blob: &ArrayBlob) -> Result<()> {
    let mut buf = Vec::with_capacity(blob.encoded_len());
    write_blob(blob, &mut buf).map_err(|e| Error::format(path, e))?;
    write_atomic(path, &buf)
}

pub fn write_raster<W: Write>(seg: &SegmentationMap, sink: W) -> Result<u64, FormatError> {
    let mut w = CountingWriter { inner: sink, offset: 0 };
    w.put(&RASTER_MAGIC)?;
    w.put(&FORMAT_VERSION.to_le_bytes())?;
    w.put(&(seg.width() as u32).to_le_bytes())?;
    w.put(&(seg.height() as u32).to_le_bytes())?;
    let body: Vec<u8> = seg.as_slice().iter().flat_map(|c| c.to_le_bytes()).collect();
    w.put(&body)?;
    w.flush()?;
    Ok(w.offset)
}

pub fn read_raster<R: Read>(source: R) -> Result<SegmentationMap, FormatError> {
    let mut r = OffsetReader {
        inner: source,
        offset: 0,
    };
    check_magic(&mut r, RASTER_MAGIC)?;
    let at = r.offset;
    let width = r.u32()? as u64;
    let height = r.u32()? as u64;
    if width == 0 || height == 0 {
        return Err(FormatError::InvalidShape {
            offset: at,
            reason: format!("raster is {width}x{height}"),
        });
    }
    let payload = r.payload(width * height * 2)?;
    let cats = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(SegmentationMap::new(width as usize, height as usize, cats).expect("raster size checked above"))
}

pub fn read_raster_file(path: &Path) -> Result<SegmentationMap> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_raster(io::BufReader::new(file)).map_err(|e| Error::format(path, e))
}

pub fn write_raster_file(path: &Path, seg: &SegmentationMap) -> Result<()> {
    let mut buf = Vec::new();
    write_raster(seg, &mut buf).map_err(|e| Error::format(path, e))?;
    write_atomic(path, &buf)
}

/// JSON manifest describing one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceManifest {
    pub image_id: String,
    pub n_visual: usize,
    pub m_text: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub grid: PatchGrid,
    pub steps: Vec<StepEntry>,
    pub has_logits: bool,
    /// One entry per step, aligned with `steps`.
    #[serde(default)]
    pub baseline_scalars: Option<Vec<NextTokenStats>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepEntry {
    pub index: usize,
    pub token: String,
    /// `[L, H, n]` float blob.
    pub attn: String,
    /// `[L, H]` float blob.
    pub mass: String,
    #[serde(default)]
    pub logits: Option<String>,
    #[serde(default)]
    pub object: Option<ObjectFlag>,
}

fn load_float_blob(path: &Path, expected: &[usize], what: &str, k: usize) -> Result<Vec<f64>> {
    let blob = read_blob_file(path)?;
    if blob.shape() != expected {
        return Err(Error::Validation(format!(
            "step {k}: {what} blob {} has shape {:?}, expected {expected:?}",
            path.display(),
            blob.shape()
        )));
    }
    blob.to_f64().ok_or_else(|| {
        Error::Validation(format!(
            "step {k}: {what} blob {} has integer dtype {:?}",
            path.display(),
            blob.dtype()
        ))
    })
}

pub fn read_manifest(path: &Path) -> Result<TraceManifest> {
    crate::fsutil::read_json_file(path)
}

/// Loads and fully validates a trace from its manifest.
pub fn load_trace(manifest_path: &Path) -> Result<AttentionTrace> {
    let m = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let ctx = |msg: String| Error::Validation(format!("{}: {msg}", manifest_path.display()));

    if m.grid.rows * m.grid.cols != m.n_visual {
        return Err(ctx(format!(
            "grid {} has {} tokens but n_visual is {}",
            m.grid,
            m.grid.len(),
            m.n_visual
        )));
    }
    if let Some(b) = &m.baseline_scalars {
        if b.len() != m.steps.len() {
            return Err(ctx(format!(
                "baseline_scalars has {} entries for {} steps",
                b.len(),
                m.steps.len()
            )));
        }
    }
    let (l, h, n) = (m.num_layers, m.num_heads, m.n_visual);
    let mut steps = Vec::with_capacity(m.steps.len());
    for (pos, entry) in m.steps.iter().enumerate() {
        let k = entry.index;
        if entry.logits.is_some() != m.has_logits {
            return Err(ctx(format!(
                "step {k}: has_logits is {} but the step {} a logits blob",
                m.has_logits,
                if entry.logits.is_some() { "has" } else { "lacks" }
            )));
        }
        let attn = load_float_blob(&base.join(&entry.attn), &[l, h, n], "attn", k)?;
        let mass = load_float_blob(&base.join(&entry.mass), &[l, h], "mass", k)?;
        let logits = match &entry.logits {
            Some(p) => Some(HeadRows::new(
                l,
                h,
                n,
                load_float_blob(&base.join(p), &[l, h, n], "logits", k)?,
            )?),
            None => None,
        };
        steps.push(StepRecord {
            index: k,
            token: entry.token.clone(),
            attn: HeadRows::new(l, h, n, attn)?,
            mass,
            logits,
            object: entry.object.clone(),
            next_token: m.baseline_scalars.as_ref().map(|b| b[pos]),
        });
    }
    AttentionTrace::new(m.image_id, m.m_text, l, h, m.grid, steps).map_err(|e| ctx(e.to_string()))
}

/// Filesystem-safe stem for an image id.
pub fn file_stem(image_id: &str) -> String {
    image_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `trace` as `<dir>/<image_id>.json` plus blobs under `<dir>/<image_id>/`.
pub fn save_trace(trace: &AttentionTrace, dir: &Path) -> Result<PathBuf> {
    let stem = file_stem(trace.image_id());
    let blob_dir = dir.join(&stem);
    let (l, h, n) = (trace.num_layers(), trace.num_heads(), trace.n_visual());
    let mut entries = Vec::with_capacity(trace.steps().len());
    for step in trace.steps() {
        let k = step.index;
        let name = |kind: &str| format!("{stem}/step_{k:04}.{kind}.saet");
        let attn = ArrayBlob::new(vec![l, h, n], BlobData::F64(step.attn.as_slice().to_vec()))?;
        write_blob_file(&dir.join(name("attn")), &attn)?;
        let mass = ArrayBlob::new(vec![l, h], BlobData::F64(step.mass.clone()))?;
        write_blob_file(&dir.join(name("mass")), &mass)?;
        let logits = match &step.logits {
            Some(rows) => {
                let blob = ArrayBlob::new(vec![l, h, n], BlobData::F64(rows.as_slice().to_vec()))?;
                write_blob_file(&dir.join(name("logits")), &blob)?;
                Some(name("logits"))
            }
            None => None,
        };
        entries.push(StepEntry {
            index: k,
            token: step.token.clone(),
            attn: name("attn"),
            mass: name("mass"),
            logits,
            object: step.object.clone(),
        });
    }
    fs::create_dir_all(&blob_dir).map_err(|e| Error::io(&blob_dir, e))?;
    let manifest = TraceManifest {
        image_id: trace.image_id().to_owned(),
        n_visual: n,
        m_text: trace.m_text(),
        num_layers: l,
        num_heads: h,
        grid: trace.grid(),
        steps: entries,
        has_logits: trace.has_logits(),
        baseline_scalars: trace
            .has_baselines()
            .then(|| trace.steps().iter().map(|s| s.next_token.expect("checked")).collect()),
    };
    let path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    write_atomic(&path, json.as_bytes())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_blob() -> ArrayBlob {
        ArrayBlob::new(vec![2, 2], BlobData::F32(vec![1.0, 0.0, 0.0, 1.0])).unwrap()
    }

    #[test]
    fn identity_blob_is_45_bytes() {
        let mut buf = Vec::new();
        let n = write_blob(&identity_blob(), &mut buf).unwrap();
        assert_eq!(n, 45);
        assert_eq!(buf.len(), 45);
        assert_eq!(&buf[..4], b"SAET");
        assert_eq!(read_blob(&buf[..]).unwrap(), identity_blob());
    }

    #[test]
    fn empty_shape_rejected() {
        assert!(ArrayBlob::new(vec![], BlobData::F32(vec![])).is_err());
        assert!(ArrayBlob::new(vec![2, 0], BlobData::F32(vec![])).is_err());
        assert!(ArrayBlob::new(vec![3], BlobData::F32(vec![1.0])).is_err());
    }

    #[test]
    fn bad_magic() {
        let mut buf = Vec::new();
        write_blob(&identity_blob(), &mut buf).unwrap();
        buf[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_blob(&buf[..]), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn unknown_dtype() {
        let mut buf = Vec::new();
        write_blob(&identity_blob(), &mut buf).unwrap();
        buf[8] = 9;
        assert!(matches!(
            read_blob(&buf[..]),
            Err(FormatError::UnknownDtype { offset: 8, code: 9 })
        ));
    }

    #[test]
    fn truncated_payload_names_sizes() {
        let blob = ArrayBlob::new(vec![100], BlobData::F32(vec![0.5; 100])).unwrap();
        let mut buf = Vec::new();
        write_blob(&blob, &mut buf).unwrap();
        let header = blob.header_len();
        buf.truncate(header + 50 * 4);
        match read_blob(&buf[..]) {
            Err(FormatError::Truncated {
                offset,
                expected,
                actual,
            }) => {
                assert_eq!(offset as usize, header);
                assert_eq!((expected, actual), (400, 200));
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn reader_stops_at_payload_end() {
        let mut buf = Vec::new();
        write_blob(&identity_blob(), &mut buf).unwrap();
        buf.extend_from_slice(b"trailing");
        let mut cursor = io::Cursor::new(buf);
        read_blob(&mut cursor).unwrap();
        assert_eq!(cursor.position(), 45);
    }

    #[test]
    fn truncated_header() {
        assert!(matches!(
            read_blob(&b"SA"[..]),
            Err(FormatError::Truncated {
                offset: 0,
                expected: 4,
                actual: 2
            })
        ));
    }

    #[test]
    fn raster_round_trip() {
        let seg = SegmentationMap::new(3, 2, vec![0, 1, 2, u16::MAX, 7, 7]).unwrap();
        let mut buf = Vec::new();
        assert_eq!(write_raster(&seg, &mut buf).unwrap(), 16 + 12);
        assert_eq!(read_raster(&buf[..]).unwrap(), seg);
        assert!(matches!(read_blob(&buf[..]), Err(FormatError::BadMagic { .. })));
    }

    struct FailAfter(usize);

    impl Write for FailAfter {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            if self.0 < buf.len() {
                return Err(io::Error::other("disk full"));
            }
            self.0 -= buf.len();
            Ok(buf.len())
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn sink_failure_reports_offset() {
        match write_blob(&identity_blob(), FailAfter(9)) {
            Err(FormatError::Io { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("expected I/O error, got {other:?}"),
        }
    }
}
