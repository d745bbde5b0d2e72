//! CTR1 tensor files: `b"CTR1"`, u32 rank, u32 dims[rank], then the values as
//! little-endian f64, row-major. All integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"CTR1";

pub fn write_tensor<T: Real, W: Write>(mut w: W, t: &Tensor<T>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<T: Real, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected CTR1")));
    }
    let rank = read_u32(&mut r)? as usize;
    let shape = (0..rank)
        .map(|_| read_u32(&mut r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        data.push(T::lit(f64::from_le_bytes(b)));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    Tensor::new(shape, data)
}

pub fn save_tensor<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_tensor(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let t = Tensor::<f64>::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expect = b"CTR1".to_vec();
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-2.5f64).to_le_bytes());
        assert_eq!(buf, expect);
        assert_eq!(read_tensor::<f64, _>(&buf[..]).unwrap(), t);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_tensor::<f64, _>(&b"CTR2\0\0\0\0"[..]), Err(Error::Format(_))));
        let t = Tensor::<f64>::zeros(&[3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.pop();
        assert!(read_tensor::<f64, _>(&buf[..]).is_err());
    }
}
