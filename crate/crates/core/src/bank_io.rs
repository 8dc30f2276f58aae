//! Binary column format for reference banks, with a JSON provenance sidecar.
//!
//! Layout, all little-endian:
//! `b"REFBANK\0"`, version `u32`, flags `u32` (bit 0 scores, bit 1
//! log-likelihoods), `n_ref u64`, `d u64`, then points row-major, scores
//! row-major if present, log-likelihoods if present, all as `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snis::ReferenceBank;

pub const MAGIC: &[u8; 8] = b"REFBANK\0";
pub const VERSION: u32 = 1;
const FLAG_SCORES: u32 = 1;
const FLAG_LOGLIK: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankProvenance {
    pub seed: u64,
    pub target: String,
    pub n_ref: usize,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

pub fn write_bank_to<W: Write>(bank: &ReferenceBank, mut w: W) -> Result<()> {
    let mut flags = 0;
    if bank.scores().is_some() {
        flags |= FLAG_SCORES;
    }
    if bank.log_likelihoods().is_some() {
        flags |= FLAG_LOGLIK;
    }
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(flags)?;
    w.write_u64::<LittleEndian>(bank.n_ref() as u64)?;
    w.write_u64::<LittleEndian>(bank.dim() as u64)?;
    for v in bank.points().iter() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    if let Some(s) = bank.scores() {
        for v in s.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    if let Some(l) = bank.log_likelihoods() {
        for v in l.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_column<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; len];
    r.read_f64_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

pub fn read_bank_from<R: Read>(mut r: R) -> Result<ReferenceBank> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a reference bank file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported bank version {version}")));
    }
    let flags = r.read_u32::<LittleEndian>()?;
    if flags & !(FLAG_SCORES | FLAG_LOGLIK) != 0 {
        return Err(Error::Format(format!("unknown bank flags {flags:#x}")));
    }
    let n = usize::try_from(r.read_u64::<LittleEndian>()?).map_err(|_| Error::Format("n_ref overflows".into()))?;
    let d = usize::try_from(r.read_u64::<LittleEndian>()?).map_err(|_| Error::Format("dim overflows".into()))?;
    let len = n
        .checked_mul(d)
        .ok_or_else(|| Error::Format("bank size overflows".into()))?;
    let shape_err = |_| Error::Format("column length does not match header".into());
    let points = Array2::from_shape_vec((n, d), read_column(&mut r, len)?).map_err(shape_err)?;
    let mut bank = ReferenceBank::new(points)?;
    if flags & FLAG_SCORES != 0 {
        bank = bank.with_scores(Array2::from_shape_vec((n, d), read_column(&mut r, len)?).map_err(shape_err)?)?;
    }
    if flags & FLAG_LOGLIK != 0 {
        bank = bank.with_log_likelihoods(Array1::from(read_column(&mut r, n)?))?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after bank body".into()));
    }
    Ok(bank)
}

/// Sidecar path: the bank path with a `.json` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_bank(path: &Path, bank: &ReferenceBank, provenance: Option<&BankProvenance>) -> Result<()> {
    write_bank_to(bank, BufWriter::new(File::create(path)?))?;
    if let Some(p) = provenance {
        serde_json::to_writer_pretty(BufWriter::new(File::create(sidecar_path(path))?), p)?;
    }
    Ok(())
}

/// Read a bank and, when present, its sidecar.
pub fn read_bank(path: &Path) -> Result<(ReferenceBank, Option<BankProvenance>)> {
    let bank = read_bank_from(BufReader::new(File::open(path)?))?;
    let side = sidecar_path(path);
    let provenance = if side.exists() {
        Some(serde_json::from_reader(BufReader::new(File::open(side)?))?)
    } else {
        None
    };
    Ok((bank, provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bank() -> ReferenceBank {
        ReferenceBank::new(array![[1.0, -2.0], [0.5, f64::MIN_POSITIVE], [3.0, 4.0]])
            .unwrap()
            .with_scores(array![[-1.0, 2.0], [0.0, 0.0], [1e300, -3.0]])
            .unwrap()
            .with_log_likelihoods(array![-0.5, -1.5, f64::NEG_INFINITY])
            .unwrap()
    }

    #[test]
    fn round_trip_bitwise() {
        let b = bank();
        let mut buf = Vec::new();
        write_bank_to(&b, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 4 + 8 + 8 + 8 * (6 + 6 + 3));
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(buf[12], 3);
        let back = read_bank_from(buf.as_slice()).unwrap();
        assert_eq!(back, b);

        let plain = ReferenceBank::new(array![[1.0], [2.0]]).unwrap();
        let mut buf = Vec::new();
        write_bank_to(&plain, &mut buf).unwrap();
        let back = read_bank_from(buf.as_slice()).unwrap();
        assert!(back.scores().is_none() && back.log_likelihoods().is_none());
        assert_eq!(back, plain);
    }

    #[test]
    fn rejects_corrupt_input() {
        let mut buf = Vec::new();
        write_bank_to(&bank(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_bank_from(bad.as_slice()), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(read_bank_from(bad.as_slice()), Err(Error::Format(_))));
        assert!(read_bank_from(&buf[..buf.len() - 3]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_bank_from(long.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn file_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.bin");
        let prov = BankProvenance {
            seed: 42,
            target: "bimodal2d".into(),
            n_ref: 3,
            dim: 2,
            note: None,
        };
        write_bank(&path, &bank(), Some(&prov)).unwrap();
        let (b, p) = read_bank(&path).unwrap();
        assert_eq!(b, bank());
        assert_eq!(p, Some(prov));
        std::fs::remove_file(sidecar_path(&path)).unwrap();
        assert_eq!(read_bank(&path).unwrap().1, None);
    }
}
