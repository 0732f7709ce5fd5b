//! Binary tensor container and small artifact writers (CSV, PGM).
//!
//! Container layout: magic "AMFT", version u32, rank u32, one u64 per
//! extent, then the row-major float64 payload, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{AmfError, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AMFT";
pub const VERSION: u32 = 1;

pub fn write_tensor<F: Real>(path: &Path, t: &Tensor<F>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
    for &d in t.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in t.data() {
        w.write_f64::<LittleEndian>(v.to_f64_lossy())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor<F: Real>(path: &Path) -> Result<Tensor<F>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AmfError::Container(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(AmfError::Container(format!("unsupported version {version}")));
    }
    let rank = r.read_u32::<LittleEndian>()? as usize;
    if rank > 8 {
        return Err(AmfError::Container(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(F::lit(r.read_f64::<LittleEndian>()?));
    }
    Tensor::from_vec(&shape, data)
}

/// CSV with a header row, UTF-8, LF line endings.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// 8-bit binary PGM (P5), values scaled so the max maps to 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(AmfError::shape("pgm value count"));
    }
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.amft");
        std::fs::write(&path, b"NOPE\0\0\0\0").unwrap();
        assert!(read_tensor::<f64>(&path).is_err());
    }

    proptest! {
        #[test]
        fn container_round_trips(rank in 1usize..4, seed in any::<u64>()) {
            let mut s = crate::rng::Stream::new(seed, "proptest-io");
            let shape: Vec<usize> = (0..rank).map(|_| 1 + s.below(5)).collect();
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| s.uniform_range(-1e6, 1e6)).collect();
            let t = Tensor::from_vec(&shape, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.amft");
            write_tensor(&path, &t).unwrap();
            let back: Tensor<f64> = read_tensor(&path).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
