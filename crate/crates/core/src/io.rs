//! On-disk formats.
//!
//! Tensor file (`AFT1`), all integers little-endian:
//!
//! ```text
//! offset 0   4 bytes   magic "AFT1"
//! offset 4   u32       rank r
//! offset 8   r × u32   dims, outermost first
//! then       Π dims × f32 (IEEE-754, little-endian), row-major
//! ```
//!
//! Bundle file (`AFB1`), used for model parameters:
//!
//! ```text
//! 4 bytes magic "AFB1"
//! u32 kind length, kind bytes (UTF-8)
//! u32 section count
//! per section: u32 name length, name bytes (UTF-8), one AFT1 record
//! ```
//!
//! Masks are 8-bit binary PGM (`P5`, maxval ≤ 255) thresholded at `> 127`, or AFT1
//! tensors thresholded at `> 0.5`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mask::AnomalyMask;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"AFT1";
pub const BUNDLE_MAGIC: &[u8; 4] = b"AFB1";

/// Arbitrary-rank f32 array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn from_f64(dims: &[usize], data: &[f64]) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            dims: dims.iter().map(|&d| d as u32).collect(),
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.reserve(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Decode one record from the front of `bytes`, returning it and the bytes consumed.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<(Self, usize)> {
        let mut cur = Cursor { bytes, pos: 0, path };
        let magic = cur.take(4)?;
        if magic != TENSOR_MAGIC {
            return Err(Error::format(path, format!("bad tensor magic {magic:?}")));
        }
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(Error::format(path, format!("unsupported rank {rank}")));
        }
        let dims: Vec<u32> = (0..rank).map(|_| cur.u32()).collect::<Result<_>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| Error::format(path, "dimension product overflows"))?;
        let payload = cur.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::format(path, "payload size overflows"))?,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((Self { dims, data }, cur.pos))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated: need {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8 name"))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

pub fn save_raw(path: impl AsRef<Path>, raw: &RawTensor) -> Result<()> {
    let mut buf = Vec::new();
    raw.encode(&mut buf);
    write_file(path.as_ref(), &buf)
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<RawTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let (raw, used) = RawTensor::decode(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(raw)
}

/// Save a `C×H×W` tensor (payload rounded to f32).
pub fn save_tensor(path: impl AsRef<Path>, x: &Tensor) -> Result<()> {
    save_raw(path, &RawTensor::from_f64(&x.shape(), x.data()))
}

/// Load a rank-3 tensor; rank-2 files load as `1×H×W`.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let raw = load_raw(path)?;
    raw_to_tensor(raw, path)
}

fn raw_to_tensor(raw: RawTensor, path: &Path) -> Result<Tensor> {
    let dims = raw.dims_usize();
    let (c, h, w) = match dims.as_slice() {
        [c, h, w] => (*c, *h, *w),
        [h, w] => (1, *h, *w),
        _ => {
            return Err(Error::format(
                path,
                format!("expected rank 2 or 3 image tensor, got dims {dims:?}"),
            ))
        }
    };
    Tensor::from_vec(c, h, w, raw.to_f64())
}

/// Named sections plus a kind tag, e.g. model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub kind: String,
    pub sections: Vec<(String, RawTensor)>,
}

impl Bundle {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, raw: RawTensor) {
        self.sections.push((name.into(), raw));
    }

    pub fn get(&self, name: &str) -> Option<&RawTensor> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, raw) in &self.sections {
            put_str(&mut out, name);
            raw.encode(&mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, path };
        if cur.take(4)? != BUNDLE_MAGIC {
            return Err(Error::format(path, "bad bundle magic"));
        }
        let kind = cur.string()?;
        let n = cur.u32()? as usize;
        let mut sections = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = cur.string()?;
            let (raw, used) = RawTensor::decode(&bytes[cur.pos..], path)?;
            cur.pos += used;
            sections.push((name, raw));
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after bundle"));
        }
        Ok(Self { kind, sections })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path)?, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// 8-bit grayscale image as read from a binary PGM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Pgm> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pgm(&bytes, path)
}

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Pgm> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(path, "not a binary PGM (missing P5 magic)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "malformed PGM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed PGM header number"))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            path,
            format!("unsupported PGM depth (maxval {maxval}); only 8-bit is supported"),
        ));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "malformed PGM header terminator"));
    }
    pos += 1;
    let n = width * height;
    if bytes.len() - pos < n {
        return Err(Error::format(path, "truncated PGM payload"));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        pixels: bytes[pos..pos + n].to_vec(),
    })
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    write_file(path.as_ref(), &buf)
}

pub fn save_mask(path: impl AsRef<Path>, m: &AnomalyMask) -> Result<()> {
    let px: Vec<u8> = m.data().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    write_pgm(path, m.width(), m.height(), &px)
}

/// Load a mask from PGM (`pixel > 127`) or AFT1 (`value > 0.5`), detected by magic.
pub fn load_mask(path: impl AsRef<Path>) -> Result<AnomalyMask> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.starts_with(TENSOR_MAGIC) {
        let (raw, _) = RawTensor::decode(&bytes, path)?;
        let x = raw_to_tensor(raw, path)?;
        if x.channels() != 1 {
            return Err(Error::format(path, "mask tensor must have one channel"));
        }
        return Ok(AnomalyMask::from_fn(x.height(), x.width(), |i, j| x.get(0, i, j) > 0.5));
    }
    let pgm = parse_pgm(&bytes, path)?;
    AnomalyMask::from_vec(
        pgm.height,
        pgm.width,
        pgm.pixels.iter().map(|&p| u8::from(p > 127)).collect(),
    )
}

/// Load an image as a tensor: AFT1 directly, PGM scaled to `[0, 1]` as `1×H×W`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.starts_with(TENSOR_MAGIC) {
        let (raw, _) = RawTensor::decode(&bytes, path)?;
        return raw_to_tensor(raw, path);
    }
    let pgm = parse_pgm(&bytes, path)?;
    let scale = f64::from(pgm.maxval);
    Tensor::from_vec(
        1,
        pgm.height,
        pgm.width,
        pgm.pixels.iter().map(|&p| f64::from(p) / scale).collect(),
    )
}

/// One background/mask pair of a dataset laid out like MVTec:
///
/// ```text
/// <root>/<category>/train/good/<stem>.{aft,pgm}                  backgrounds
/// <root>/<category>/ground_truth/<anomaly_type>/<stem>_mask.{pgm,aft}   masks
/// ```
///
/// Each mask pairs with the background carrying the same stem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub category: String,
    pub anomaly_type: String,
    pub background: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(path)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

impl DatasetIndex {
    pub fn scan(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let mut entries = Vec::new();
        for cat_dir in sorted_dir(&root)?.into_iter().filter(|p| p.is_dir()) {
            let category = file_name(&cat_dir);
            let gt = cat_dir.join("ground_truth");
            if !gt.is_dir() {
                continue;
            }
            let good = cat_dir.join("train").join("good");
            for type_dir in sorted_dir(&gt)?.into_iter().filter(|p| p.is_dir()) {
                let anomaly_type = file_name(&type_dir);
                for mask in sorted_dir(&type_dir)? {
                    let name = file_name(&mask);
                    let Some(stem) = name
                        .strip_suffix("_mask.pgm")
                        .or_else(|| name.strip_suffix("_mask.aft"))
                    else {
                        continue;
                    };
                    let candidates: Vec<PathBuf> = ["aft", "pgm"]
                        .iter()
                        .map(|ext| good.join(format!("{stem}.{ext}")))
                        .filter(|p| p.is_file())
                        .collect();
                    let background = match candidates.as_slice() {
                        [one] => one.clone(),
                        [] => {
                            return Err(Error::Dataset(format!(
                                "mask {} has no background {stem}.{{aft,pgm}} in {}",
                                mask.display(),
                                good.display()
                            )))
                        }
                        _ => {
                            return Err(Error::Dataset(format!(
                                "mask {} matches more than one background",
                                mask.display()
                            )))
                        }
                    };
                    entries.push(DatasetEntry {
                        category: category.clone(),
                        anomaly_type: anomaly_type.clone(),
                        background,
                        mask,
                    });
                }
            }
        }
        Ok(Self { root, entries })
    }

    /// Load every pair, checking spatial sizes agree.
    pub fn load_all(&self) -> Result<Vec<(Tensor, AnomalyMask)>> {
        self.entries
            .iter()
            .map(|e| {
                let x = load_image(&e.background)?;
                let m = load_mask(&e.mask)?;
                m.ensure_matches(&x).map_err(|_| {
                    Error::Dataset(format!(
                        "size mismatch between {} and {}",
                        e.background.display(),
                        e.mask.display()
                    ))
                })?;
                Ok((x, m))
            })
            .collect()
    }
}
