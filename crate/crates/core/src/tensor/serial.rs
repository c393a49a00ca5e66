//! Little-endian binary tensor records.
//!
//! Layout, in order:
//!
//! | field        | encoding                              |
//! |--------------|---------------------------------------|
//! | magic        | 4 bytes, ASCII `MCCL`                 |
//! | version      | u32                                   |
//! | rank         | u32                                   |
//! | extents      | `rank` × u64                          |
//! | element type | u8 (1 = f32, 2 = f64, 3 = u8)         |
//! | payload      | row-major elements, little-endian     |

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MCCL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ElementType {
    F32 = 1,
    F64 = 2,
    U8 = 3,
}

impl ElementType {
    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Self::F32),
            2 => Some(Self::F64),
            3 => Some(Self::U8),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
            Self::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64(Tensor),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Record {
    pub fn shape(&self) -> &[usize] {
        match self {
            Record::F32 { shape, .. } | Record::U8 { shape, .. } => shape,
            Record::F64(t) => t.shape(),
        }
    }

    fn element_type(&self) -> ElementType {
        match self {
            Record::F32 { .. } => ElementType::F32,
            Record::F64(_) => ElementType::F64,
            Record::U8 { .. } => ElementType::U8,
        }
    }

    /// Widens any float payload to an `f64` tensor.
    pub fn into_tensor(self) -> Result<Tensor> {
        match self {
            Record::F64(t) => Ok(t),
            Record::F32 { shape, data } => {
                Tensor::new(shape, data.into_iter().map(f64::from).collect())
            }
            Record::U8 { shape, data } => {
                Tensor::new(shape, data.into_iter().map(f64::from).collect())
            }
        }
    }
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "tensor record",
        reason: reason.into(),
    }
}

pub fn write_record<W: Write>(mut w: W, record: &Record) -> std::io::Result<()> {
    let shape = record.shape();
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&[record.element_type() as u8])?;
    let mut buf = Vec::new();
    match record {
        Record::F32 { data, .. } => data.iter().for_each(|x| buf.extend(x.to_le_bytes())),
        Record::F64(t) => t.data().iter().for_each(|x| buf.extend(x.to_le_bytes())),
        Record::U8 { data, .. } => buf.extend_from_slice(data),
    }
    w.write_all(&buf)
}

pub fn read_record<R: Read>(mut r: R) -> Result<Record> {
    let io = |e: std::io::Error| format_err(e.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(format_err(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(io)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word).map_err(io)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank > 16 {
        return Err(format_err(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut ext = [0u8; 8];
        r.read_exact(&mut ext).map_err(io)?;
        shape.push(u64::from_le_bytes(ext) as usize);
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(io)?;
    let ty = ElementType::from_tag(tag[0])
        .ok_or_else(|| format_err(format!("unknown element tag {}", tag[0])))?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err("extent overflow"))?;
    let mut raw = vec![0u8; n * ty.width()];
    r.read_exact(&mut raw).map_err(io)?;
    let record = match ty {
        ElementType::F32 => Record::F32 {
            data: raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            shape,
        },
        ElementType::F64 => Record::F64(Tensor::new(
            shape,
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )?),
        ElementType::U8 => Record::U8 { shape, data: raw },
    };
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes_are_fixed() {
        let t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_record(&mut buf, &Record::F64(t)).unwrap();
        assert_eq!(&buf[..4], b"MCCL");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..20], &2u64.to_le_bytes());
        assert_eq!(buf[20], 2);
        assert_eq!(&buf[21..29], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 21 + 16);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::scalar(3.0);
        let mut buf = Vec::new();
        write_record(&mut buf, &Record::F64(t)).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_record(bad.as_slice()).is_err());
        assert!(read_record(&buf[..buf.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn records_round_trip(
            dims in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| (seed as f64).sin() * i as f64).collect();
            let t = Tensor::new(dims.clone(), data).unwrap();
            let labels = Record::U8 { shape: dims.clone(), data: (0..n).map(|i| (i % 7) as u8).collect() };
            for rec in [Record::F64(t), labels] {
                let mut buf = Vec::new();
                write_record(&mut buf, &rec).unwrap();
                prop_assert_eq!(read_record(buf.as_slice()).unwrap(), rec);
            }
        }
    }
}
