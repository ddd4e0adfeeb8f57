//! DLT1 tensor files: `b"DLT1"`, `u32` rank, `u32` extents, then `f32`
//! payload in row-major order. All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"DLT1";

#[derive(Debug, thiserror::Error)]
pub enum TensorIoError {
    #[error("bad magic bytes {0:?}, expected DLT1")]
    BadMagic([u8; 4]),
    #[error("invalid tensor header: {0}")]
    Header(String),
    #[error("truncated tensor payload")]
    Truncated,
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<(), TensorIoError> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), TensorIoError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorIoError::Truncated,
        _ => TensorIoError::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorIoError> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, TensorIoError> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(TensorIoError::BadMagic(magic));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(TensorIoError::Header(format!("rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = read_u32(r)? as usize;
        if d == 0 {
            return Err(TensorIoError::Header("zero extent".into()));
        }
        shape.push(d);
    }
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 4];
    read_exact_or_truncated(r, &mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| TensorIoError::Header(e.to_string()))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<(), TensorIoError> {
    let file = File::create(path).map_err(|source| TensorIoError::File { path: path.display().to_string(), source })?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor, TensorIoError> {
    let file = File::open(path).map_err(|source| TensorIoError::File { path: path.display().to_string(), source })?;
    read_tensor(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"DLT1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 24);
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::ones(&[3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensor(&mut bad.as_slice()), Err(TensorIoError::BadMagic(_))));
        let cut = &buf[..buf.len() - 2];
        assert!(matches!(read_tensor(&mut &cut[..]), Err(TensorIoError::Truncated)));
    }

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(0.5);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(read_tensor(&mut buf.as_slice()).unwrap().item(), 0.5);
    }
}
