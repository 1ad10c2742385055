//! Little-endian binary snapshots of datasets and global-model checkpoints.
//!
//! Dataset layout:
//!
//! ```text
//! "FSDS" | u32 version | u8 kind | u32 n | u32 input_dim | u32 target_dim
//!        | n × (input_dim f64, target_dim f64)
//! ```
//!
//! Checkpoint layout:
//!
//! ```text
//! "FSCK" | u32 version | u32 round | u64 config_hash | u32 dim | dim f64
//!        | u8 has_moments | [dim f64 m | dim f64 v]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{Dataset, Example};
use crate::model::ModelKind;
use crate::{Error, Moments, ParamVector, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"FSDS";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub round: u32,
    pub config_hash: u64,
    pub w: ParamVector,
    pub moments: Option<Moments>,
}

pub fn write_dataset<W: Write>(out: &mut W, data: &Dataset) -> Result<()> {
    out.write_all(&DATASET_MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&[data.kind().code()])?;
    for n in [data.len(), data.input_dim(), data.target_dim()] {
        out.write_all(&to_u32(n)?.to_le_bytes())?;
    }
    for ex in data.examples() {
        write_f64s(out, &ex.input)?;
        write_f64s(out, &ex.target)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(input: &mut R) -> Result<Dataset> {
    expect_header(input, DATASET_MAGIC)?;
    let code = read_u8(input)?;
    let kind = ModelKind::from_code(code).ok_or_else(|| Error::Format(format!("unknown model kind code {code}")))?;
    let n = read_u32(input)? as usize;
    let input_dim = read_u32(input)? as usize;
    let target_dim = read_u32(input)? as usize;
    let mut examples = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let input_v = read_f64s(input, input_dim)?;
        let target = read_f64s(input, target_dim)?;
        examples.push(Example { input: input_v, target });
    }
    Dataset::new(kind, input_dim, target_dim, examples)
}

pub fn save_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(&mut out, data)?;
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

impl Checkpoint {
    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(&CHECKPOINT_MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&self.round.to_le_bytes())?;
        out.write_all(&self.config_hash.to_le_bytes())?;
        out.write_all(&to_u32(self.w.len())?.to_le_bytes())?;
        write_f64s(out, self.w.as_slice())?;
        match &self.moments {
            None => out.write_all(&[0])?,
            Some(m) => {
                out.write_all(&[1])?;
                write_f64s(out, m.m.as_slice())?;
                write_f64s(out, m.v.as_slice())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(input: &mut R) -> Result<Self> {
        expect_header(input, CHECKPOINT_MAGIC)?;
        let round = read_u32(input)?;
        let mut hash = [0u8; 8];
        input.read_exact(&mut hash)?;
        let dim = read_u32(input)? as usize;
        let w = ParamVector::from_vec(read_f64s(input, dim)?)?;
        let moments = match read_u8(input)? {
            0 => None,
            1 => Some(Moments {
                m: ParamVector::from_vec(read_f64s(input, dim)?)?,
                v: ParamVector::from_vec(read_f64s(input, dim)?)?,
            }),
            other => return Err(Error::Format(format!("bad moments flag {other}"))),
        };
        Ok(Checkpoint {
            round,
            config_hash: u64::from_le_bytes(hash),
            w,
            moments,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::read(&mut BufReader::new(File::open(path)?))
    }
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))
}

fn expect_header<R: Read>(input: &mut R, magic: [u8; 4]) -> Result<()> {
    let mut got = [0u8; 4];
    input.read_exact(&mut got)?;
    if got != magic {
        return Err(Error::Format(format!("bad magic {got:?}")));
    }
    let version = read_u32(input)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    Ok(())
}

fn read_u8<R: Read>(input: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    input.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_f64s<W: Write>(out: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = [0u8; 8];
    (0..n)
        .map(|_| {
            input.read_exact(&mut buf)?;
            Ok(f64::from_le_bytes(buf))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    #[test]
    fn dataset_round_trip_in_memory() {
        let ds = synth_dataset(ModelKind::MlpSoftdiceSegmenter, 9, 7).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        assert_eq!(&buf[..4], b"FSDS");
        assert_eq!(buf.len(), 4 + 4 + 1 + 12 + 7 * (64 + 64) * 8);
        assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn checkpoint_round_trip_with_moments() {
        let ck = Checkpoint {
            round: 12,
            config_hash: 0xDEAD_BEEF_0123_4567,
            w: ParamVector::from_vec(vec![1.5, -0.0, 3.25]).unwrap(),
            moments: Some(Moments {
                m: ParamVector::from_vec(vec![0.1, 0.2, 0.3]).unwrap(),
                v: ParamVector::from_vec(vec![1.0, 2.0, 3.0]).unwrap(),
            }),
        };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::read(&mut bytes.as_slice()).unwrap(), ck);
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let ck = Checkpoint {
            round: 1,
            config_hash: 2,
            w: ParamVector::zeros(4),
            moments: None,
        };
        let bytes = ck.to_bytes();
        assert!(read_dataset(&mut bytes.as_slice()).is_err());
        assert!(Checkpoint::read(&mut &bytes[..bytes.len() - 3]).is_err());
    }
}
