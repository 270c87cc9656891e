//! Binary formats.
//!
//! `TTE1` holds a TT or TR embedding:
//!
//! ```text
//! "TTE1" | kind u8 (0 TT, 1 TR) | dtype u8 (0 f64) | n u16
//! n x (r_in, i_dim, j_dim, r_out) as u32 | vocab u64
//! core payloads in order, row-major over (r_in, i, j, r_out)
//! ```
//!
//! `DMAT` holds a dense matrix:
//!
//! ```text
//! "DMAT" | dtype u8 | rows u64 | cols u64 | row-major payload
//! ```
//!
//! Everything is little-endian. Readers validate the whole file before
//! returning anything.

use std::fs;
use std::path::Path;

use crate::embedding::{EmbeddingLayer, TtEmbedding, Weights};
use crate::error::{FormatError, IoError};
use crate::plan::FactorizationPlan;
use crate::ring::TrMatrix;
use crate::tensor::DenseMatrix;
use crate::tt::{TtCore, TtMatrix};

pub const TTE_MAGIC: [u8; 4] = *b"TTE1";
pub const DMAT_MAGIC: [u8; 4] = *b"DMAT";
pub const DTYPE_F64: u8 = 0;
/// Reserved for `f32`; rejected by every reader.
pub const DTYPE_F32: u8 = 1;
pub const KIND_TT: u8 = 0;
pub const KIND_TR: u8 = 1;

const TTE_FIXED: usize = 8;
const TTE_CORE_RECORD: usize = 16;
const DMAT_HEADER: usize = 21;

type FResult<T> = std::result::Result<T, FormatError>;

pub fn encode_tte(emb: &TtEmbedding) -> Vec<u8> {
    let cores = emb.chain().cores();
    let payload: usize = cores.iter().map(|c| c.len() * 8).sum();
    let mut out = Vec::with_capacity(TTE_FIXED + cores.len() * TTE_CORE_RECORD + 8 + payload);
    out.extend_from_slice(&TTE_MAGIC);
    out.push(if emb.weights().is_ring() { KIND_TR } else { KIND_TT });
    out.push(DTYPE_F64);
    out.extend_from_slice(&(cores.len() as u16).to_le_bytes());
    for c in cores {
        for d in c.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    out.extend_from_slice(&(emb.vocab() as u64).to_le_bytes());
    for c in cores {
        for v in c.to_row_major() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn need(&self, expected: usize) -> FResult<()> {
        if self.bytes.len() < expected {
            return Err(FormatError::Truncated {
                expected,
                actual: self.bytes.len(),
            });
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u8(&mut self) -> u8 {
        self.take(1)[0]
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take(2).try_into().expect("2 bytes"))
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().expect("4 bytes"))
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().expect("8 bytes"))
    }

    fn f64s(&mut self, n: usize, reject_non_finite: bool) -> FResult<Vec<f64>> {
        (0..n)
            .map(|_| {
                let offset = self.pos;
                let v = f64::from_le_bytes(self.take(8).try_into().expect("8 bytes"));
                if reject_non_finite && !v.is_finite() {
                    return Err(FormatError::NonFinite { offset });
                }
                Ok(v)
            })
            .collect()
    }
}

fn check_magic(bytes: &[u8], magic: [u8; 4]) -> FResult<()> {
    let found = &bytes[..bytes.len().min(4)];
    if found != &magic[..found.len()] {
        return Err(FormatError::BadMagic {
            offset: 0,
            expected: magic,
            found: found.to_vec(),
        });
    }
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            expected: 4,
            actual: bytes.len(),
        });
    }
    Ok(())
}

fn check_dtype(dtype: u8) -> FResult<()> {
    if dtype != DTYPE_F64 {
        return Err(FormatError::UnsupportedDtype(dtype));
    }
    Ok(())
}

fn payload_end(header: usize, values: usize) -> FResult<usize> {
    values
        .checked_mul(8)
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| FormatError::Header("payload size overflows".into()))
}

fn finish(r: &Reader, end: usize) -> FResult<()> {
    if r.bytes.len() < end {
        return Err(FormatError::Truncated {
            expected: end,
            actual: r.bytes.len(),
        });
    }
    if r.bytes.len() > end {
        return Err(FormatError::TrailingBytes {
            extra: r.bytes.len() - end,
        });
    }
    Ok(())
}

pub fn decode_tte(bytes: &[u8]) -> FResult<TtEmbedding> {
    check_magic(bytes, TTE_MAGIC)?;
    let mut r = Reader { bytes, pos: 4 };
    r.need(TTE_FIXED)?;
    let kind = r.u8();
    if kind != KIND_TT && kind != KIND_TR {
        return Err(FormatError::UnknownKind(kind));
    }
    check_dtype(r.u8())?;
    let n = r.u16() as usize;
    if n == 0 {
        return Err(FormatError::Header("core count is 0".into()));
    }
    let header = TTE_FIXED + n * TTE_CORE_RECORD + 8;
    r.need(header)?;
    let dims: Vec<[usize; 4]> = (0..n)
        .map(|_| [r.u32() as usize, r.u32() as usize, r.u32() as usize, r.u32() as usize])
        .collect();
    let vocab = r.u64();
    for (k, d) in dims.iter().enumerate() {
        if d.contains(&0) {
            return Err(FormatError::Header(format!("core {k} has a zero extent: {d:?}")));
        }
    }
    for k in 0..n - 1 {
        if dims[k][3] != dims[k + 1][0] {
            return Err(FormatError::RankChain(format!(
                "core {k} r_out {} != core {} r_in {}",
                dims[k][3],
                k + 1,
                dims[k + 1][0]
            )));
        }
    }
    let (first, last) = (dims[0][0], dims[n - 1][3]);
    if kind == KIND_TT && (first != 1 || last != 1) {
        return Err(FormatError::RankChain(format!(
            "TT boundary ranks must be 1, got r_in {first} and r_out {last}"
        )));
    }
    if kind == KIND_TR && first != last {
        return Err(FormatError::RankChain(format!(
            "ring closure mismatch: first r_in {first}, last r_out {last}"
        )));
    }
    let mut values = 0usize;
    for d in &dims {
        let size = d
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| FormatError::Header("core size overflows".into()))?;
        values = values
            .checked_add(size)
            .ok_or_else(|| FormatError::Header("payload size overflows".into()))?;
    }
    finish(&r, payload_end(header, values)?)?;

    let rows: Vec<usize> = dims.iter().map(|d| d[1]).collect();
    let cols: Vec<usize> = dims.iter().map(|d| d[2]).collect();
    let ranks: Vec<usize> = dims[..n - 1].iter().map(|d| d[3]).collect();
    let vocab = usize::try_from(vocab).map_err(|_| FormatError::Header(format!("vocab {vocab} too large")))?;
    let plan = FactorizationPlan::new(rows, cols, ranks, vocab).map_err(|e| FormatError::Header(e.to_string()))?;
    let cores = dims
        .iter()
        .map(|&d| {
            let v = r.f64s(d.iter().product(), true)?;
            TtCore::from_row_major(d, &v).map_err(|e| FormatError::Header(e.to_string()))
        })
        .collect::<FResult<Vec<_>>>()?;
    let weights: Weights = if kind == KIND_TT {
        TtMatrix::new(cores, plan).map_err(|e| FormatError::Header(e.to_string()))?.into()
    } else {
        TrMatrix::new(cores, plan).map_err(|e| FormatError::Header(e.to_string()))?.into()
    };
    Ok(TtEmbedding::new(weights))
}

pub fn encode_dmat(m: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(DMAT_HEADER + m.data().len() * 8);
    out.extend_from_slice(&DMAT_MAGIC);
    out.push(DTYPE_F64);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dmat(bytes: &[u8]) -> FResult<DenseMatrix> {
    check_magic(bytes, DMAT_MAGIC)?;
    let mut r = Reader { bytes, pos: 4 };
    r.need(5)?;
    check_dtype(r.u8())?;
    r.need(DMAT_HEADER)?;
    let (rows, cols) = (r.u64(), r.u64());
    if rows == 0 || cols == 0 {
        return Err(FormatError::Header(format!("matrix shape {rows}x{cols} is empty")));
    }
    let count = usize::try_from(rows)
        .ok()
        .zip(usize::try_from(cols).ok())
        .and_then(|(a, b)| a.checked_mul(b))
        .ok_or_else(|| FormatError::Header(format!("matrix shape {rows}x{cols} overflows")))?;
    finish(&r, payload_end(DMAT_HEADER, count)?)?;
    let data = r.f64s(count, false)?;
    DenseMatrix::new(rows as usize, cols as usize, data).map_err(|e| FormatError::Header(e.to_string()))
}

pub fn save_tt(path: impl AsRef<Path>, emb: &TtEmbedding) -> Result<(), IoError> {
    Ok(fs::write(path, encode_tte(emb))?)
}

pub fn load_tt(path: impl AsRef<Path>) -> Result<TtEmbedding, IoError> {
    Ok(decode_tte(&fs::read(path)?)?)
}

pub fn save_dmat(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<(), IoError> {
    Ok(fs::write(path, encode_dmat(m))?)
}

pub fn load_dmat(path: impl AsRef<Path>) -> Result<DenseMatrix, IoError> {
    Ok(decode_dmat(&fs::read(path)?)?)
}
