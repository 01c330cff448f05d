//! Named-tensor checkpoints.
//!
//! Layout, all little-endian: magic `VQDT`, version `u32`, tensor count `u32`,
//! then per tensor a `u32` name length, the UTF-8 name, a `u32` rank, `u64`
//! dims, and the `f64` payload.

use std::io::{Read, Write};
use std::path::Path;

use vqdiff_core::numerics::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VQDT";
pub const VERSION: u32 = 1;

const MAX_RANK: usize = 8;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> std::result::Result<&'a [u8], String> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| format!("truncated at byte {pos}"))?;
    let out = &bytes[*pos..end];
    *pos = end;
    Ok(out)
}

fn u32_at(bytes: &[u8], pos: &mut usize) -> std::result::Result<u32, String> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().unwrap()))
}

/// Parses a checkpoint image.
pub fn decode_tensors(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != MAGIC {
        return Err("not a VQDT checkpoint".into());
    }
    let version = u32_at(bytes, &mut pos)?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let count = u32_at(bytes, &mut pos)? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u32_at(bytes, &mut pos)? as usize;
        let name = std::str::from_utf8(take(bytes, &mut pos, len)?)
            .map_err(|_| format!("tensor name before byte {pos} is not UTF-8"))?
            .to_owned();
        let rank = u32_at(bytes, &mut pos)? as usize;
        if rank > MAX_RANK {
            return Err(format!("tensor {name} has rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().unwrap());
            let d = usize::try_from(d).map_err(|_| format!("tensor {name} dimension {d} too large"))?;
            numel = numel.checked_mul(d).ok_or_else(|| format!("tensor {name} is too large"))?;
            shape.push(d);
        }
        let raw = take(bytes, &mut pos, numel.checked_mul(8).ok_or("tensor too large")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        out.push((name, t));
    }
    if pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - pos));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(Error::io(path))?;
    write_tensors(std::io::BufWriter::new(file), tensors).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(Error::io(path))?;
    decode_tensors(&bytes).map_err(|m| Error::format(path, m))
}

/// Removes and returns the tensor called `name`.
pub fn take_named(tensors: &mut Vec<(String, Tensor)>, name: &str, path: &Path) -> Result<Tensor> {
    let i = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::format(path, format!("checkpoint lacks tensor {name}")))?;
    Ok(tensors.remove(i).1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let tensors = vec![
            ("a".to_string(), Tensor::new([2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 3.0]).unwrap()),
            ("scalar".to_string(), Tensor::scalar(std::f64::consts::PI)),
            ("empty".to_string(), Tensor::new([0], vec![]).unwrap()),
        ];
        let mut buf = Vec::new();
        write_tensors(&mut buf, &tensors).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let back = decode_tensors(&buf).unwrap();
        assert_eq!(back.len(), 3);
        for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn corrupt_images_are_rejected() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("w".into(), Tensor::zeros([4]))]).unwrap();
        for cut in 0..buf.len() {
            assert!(decode_tensors(&buf[..cut]).is_err());
        }
        let mut extra = buf.clone();
        extra.push(0);
        assert!(decode_tensors(&extra).is_err());
        let mut wrong = buf;
        wrong[4] = 9;
        assert!(decode_tensors(&wrong).unwrap_err().contains("version"));
    }
}
