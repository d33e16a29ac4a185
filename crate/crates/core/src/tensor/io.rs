//! Tensor container files: magic `CVT1`, u8 rank, little-endian u32 extents,
//! then the row-major f32 payload in little-endian order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Result, Tensor, TensorError, MAX_NDIM};

const MAGIC: &[u8; 4] = b"CVT1";

pub fn write_tensor(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[tensor.shape().len() as u8])?;
    for &d in tensor.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let mut ndim = [0u8; 1];
    r.read_exact(&mut ndim)?;
    let ndim = ndim[0] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(TensorError::Format(format!(
            "{}: unsupported rank {ndim}",
            path.display()
        )));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(TensorError::Format(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cvt");
        let t = Tensor::from_vec(&[2, 3, 1], vec![0.5, -1.25, 3e-8, f32::MIN_POSITIVE, 7.0, -0.0])
            .unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_layout_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cvt");
        let t = Tensor::from_vec(&[1, 2], vec![1.0f32, 2.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"CVT1");
        assert_eq!(bytes[4], 2);
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 13 + 8);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cvt");
        std::fs::write(&path, b"NOPE\x01\x01\x00\x00\x00\x00\x00\x80\x3f").unwrap();
        assert!(matches!(
            read_tensor(&path),
            Err(TensorError::Format(_))
        ));
    }
}
