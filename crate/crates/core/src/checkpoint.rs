//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SAVECKPT"            8 ASCII bytes
//! version: u32          = 1
//! record_count: u32
//! record*:
//!   name_len: u16, name: UTF-8
//!   rank: u8, dims: u32 * rank
//!   payload: f64 * prod(dims), row-major
//! ```
//!
//! Spectral layers are stored as four records suffixed `.U`, `.sigma`, `.V`
//! and `.delta`, so loading never re-runs an SVD.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::spectral::SpectralLayer;

pub const MAGIC: &[u8; 8] = b"SAVECKPT";
pub const VERSION: u32 = 1;

const SPECTRAL_SUFFIXES: [&str; 4] = [".U", ".sigma", ".V", ".delta"];

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Record {
    pub fn matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    pub fn vector(name: impl Into<String>, v: &[f64]) -> Self {
        Self {
            name: name.into(),
            dims: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims.as_slice() {
            [r, c] => Matrix::from_vec(*r, *c, self.data.clone()),
            other => Err(Error::Malformed(format!(
                "record {} has rank {} where a matrix was expected",
                self.name,
                other.len()
            ))),
        }
    }

    pub fn to_vector(&self) -> Result<Vec<f64>> {
        match self.dims.as_slice() {
            [_] => Ok(self.data.clone()),
            other => Err(Error::Malformed(format!(
                "record {} has rank {} where a vector was expected",
                self.name,
                other.len()
            ))),
        }
    }
}

pub fn spectral_records(layer: &SpectralLayer) -> [Record; 4] {
    [
        Record::matrix(format!("{}.U", layer.name), &layer.u),
        Record::vector(format!("{}.sigma", layer.name), &layer.sigma),
        Record::matrix(format!("{}.V", layer.name), &layer.v),
        Record::vector(format!("{}.delta", layer.name), &layer.delta),
    ]
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(records.len())
        .map_err(|_| Error::DimOverflow("record count exceeds u32".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for rec in records {
        let name = rec.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::DimOverflow(format!("record name too long: {}", rec.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        let rank = u8::try_from(rec.dims.len())
            .map_err(|_| Error::DimOverflow(format!("tensor rank too large in {}", rec.name)))?;
        out.push(rank);
        for &d in &rec.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::DimOverflow(format!("dim {d} in {}", rec.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        let expected: usize = rec.dims.iter().product();
        if expected != rec.data.len() {
            return Err(Error::Malformed(format!(
                "record {} declares {expected} values but holds {}",
                rec.name,
                rec.data.len()
            )));
        }
        for v in &rec.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Malformed(format!("record {i} name is not UTF-8")))?
            .to_owned();
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dim")? as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::DimOverflow(format!("payload size of {name}")))?;
        let payload = r.take(len, &name)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(Record { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after last record",
            bytes.len() - r.pos
        )));
    }
    Ok(records)
}

pub fn write_records(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    fs::write(path, encode(records)?)?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    decode(&fs::read(path)?)
}

/// Spectral layers plus any other (frozen) tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub spectral: Vec<SpectralLayer>,
    pub frozen: Vec<Record>,
}

impl Checkpoint {
    pub fn to_records(&self) -> Vec<Record> {
        let mut out: Vec<Record> = self.spectral.iter().flat_map(spectral_records).collect();
        out.extend(self.frozen.iter().cloned());
        out
    }

    /// Groups `.U/.sigma/.V/.delta` quadruples back into spectral layers.
    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        let mut spectral = Vec::new();
        let mut frozen = Vec::new();
        let mut i = 0;
        while i < records.len() {
            let name = &records[i].name;
            if let Some(base) = name.strip_suffix(SPECTRAL_SUFFIXES[0]) {
                let group = records.get(i..i + 4).ok_or_else(|| {
                    Error::Malformed(format!("spectral layer {base} is missing records"))
                })?;
                for (rec, suffix) in group.iter().zip(SPECTRAL_SUFFIXES) {
                    if rec.name != format!("{base}{suffix}") {
                        return Err(Error::Malformed(format!(
                            "expected {base}{suffix}, found {}",
                            rec.name
                        )));
                    }
                }
                spectral.push(SpectralLayer::from_parts(
                    base,
                    group[0].to_matrix()?,
                    group[1].to_vector()?,
                    group[2].to_matrix()?,
                    group[3].to_vector()?,
                )?);
                i += 4;
            } else {
                frozen.push(records[i].clone());
                i += 1;
            }
        }
        Ok(Self { spectral, frozen })
    }
}

pub fn save_checkpoint(
    layers: &[SpectralLayer],
    frozen: &[Record],
    path: impl AsRef<Path>,
) -> Result<()> {
    let ckpt = Checkpoint {
        spectral: layers.to_vec(),
        frozen: frozen.to_vec(),
    };
    write_records(path, &ckpt.to_records())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_records(read_records(path)?)
}
