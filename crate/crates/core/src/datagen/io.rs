//! Binary dataset file.
//!
//! Little-endian throughout:
//!
//! ```text
//! header: b"REBODATA" | u32 version (1) | u32 C | u32 N | 6 x u64 cohort counts (L U W S O T)
//! record: u64 id | u8 cohort (ASCII) | u32 label (0xFFFFFFFF = none) | N*3 f64 points, row-major
//! ```
//!
//! Records follow the header in id order; the record count equals the sum of
//! the cohort counts.

use std::io::{Read, Write};

use super::{Cohort, CohortCounts, Dataset, Sample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"REBODATA";
pub const VERSION: u32 = 1;
pub const NO_LABEL: u32 = u32::MAX;

fn read_exact<const K: usize, R: Read>(r: &mut R) -> Result<[u8; K]> {
    let mut buf = [0u8; K];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4, _>(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8, _>(r)?))
}

pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    let counts = ds.counts();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ds.classes as u32).to_le_bytes())?;
    w.write_all(&(ds.points as u32).to_le_bytes())?;
    for c in Cohort::ALL {
        w.write_all(&(counts.get(c) as u64).to_le_bytes())?;
    }
    let mut order: Vec<&Sample> = ds.samples().iter().collect();
    order.sort_by_key(|s| s.id);
    for s in order {
        w.write_all(&s.id.to_le_bytes())?;
        w.write_all(&[s.cohort.as_char() as u8])?;
        let label = s.label.map_or(NO_LABEL, |y| y as u32);
        w.write_all(&label.to_le_bytes())?;
        for v in s.points.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    if &read_exact::<8, _>(&mut r)? != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let classes = read_u32(&mut r)? as usize;
    let n = read_u32(&mut r)? as usize;
    let mut counts = CohortCounts::default();
    for c in Cohort::ALL {
        counts.set(c, read_u64(&mut r)? as usize);
    }
    let mut samples = Vec::with_capacity(counts.total());
    for _ in 0..counts.total() {
        let id = read_u64(&mut r)?;
        let cohort = Cohort::from_char(read_exact::<1, _>(&mut r)?[0] as char)?;
        let label = match read_u32(&mut r)? {
            NO_LABEL => None,
            y => Some(y as usize),
        };
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n * 3 {
            data.push(f64::from_le_bytes(read_exact::<8, _>(&mut r)?));
        }
        let points = Tensor::new(vec![n, 3], data)
            .map_err(|e| Error::Format(format!("sample {id}: {e}")))?;
        samples.push(Sample {
            id,
            points,
            label,
            cohort,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    let ds = Dataset::new(classes, n, samples)?;
    if ds.counts() != counts {
        return Err(Error::Format("cohort counts disagree with header".into()));
    }
    Ok(ds)
}
