//! Checkpoint format: a flat archive of named tensors behind a version
//! header. Layout, all little-endian:
//!
//! ```text
//! magic "EFCP" | u16 version | u32 entry count
//! per entry: u32 name_len | name bytes | u8 rank | u32 dims[rank] | f64 data
//! ```
//!
//! Read errors carry the file path and the byte offset where parsing failed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

use super::graph::ParamSet;
use super::nd::NdArray;

const MAGIC: &[u8; 4] = b"EFCP";
const VERSION: u16 = 1;

pub fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    let file = File::create(path).with_context(|| format!("create checkpoint {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, a) in params.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[a.shape.len() as u8])?;
        for &d in &a.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &a.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    r: BufReader<File>,
    path: &'a Path,
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r.read_exact(&mut buf).with_context(|| {
            format!("checkpoint {} truncated at byte {}", self.path.display(), self.offset)
        })?;
        self.offset += n;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let file = File::open(path).with_context(|| format!("open checkpoint {}", path.display()))?;
    let mut c = Cursor { r: BufReader::new(file), path, offset: 0 };

    let magic = c.take(4)?;
    if magic != MAGIC {
        bail!("checkpoint {}: bad magic at byte 0 (not a checkpoint file)", path.display());
    }
    let ver = c.take(2)?;
    let ver = u16::from_le_bytes([ver[0], ver[1]]);
    if ver != VERSION {
        bail!("checkpoint {}: unsupported version {} at byte 4", path.display(), ver);
    }
    let count = c.u32()?;

    let mut ps = ParamSet::new();
    for _ in 0..count {
        let name_at = c.offset;
        let name_len = c.u32()? as usize;
        if name_len > 4096 {
            bail!("checkpoint {}: implausible name length {} at byte {}", path.display(), name_len, name_at);
        }
        let name = String::from_utf8(c.take(name_len)?).map_err(|_| {
            anyhow::anyhow!("checkpoint {}: name is not UTF-8 at byte {}", path.display(), name_at + 4)
        })?;
        let rank = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let dim_at = c.offset;
            let d = c.u32()? as usize;
            if d == 0 {
                bail!("checkpoint {}: zero extent in shape of {:?} at byte {}", path.display(), name, dim_at);
            }
            shape.push(d);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
            .collect();
        ps.insert(&name, NdArray::from_vec(&shape, data));
    }
    Ok(ps)
}

/// FNV-1a over the raw file bytes; stable fingerprint for freeze contracts
/// (change detection, not cryptography).
pub fn file_checksum(path: &Path) -> Result<u64> {
    let mut f = File::open(path).with_context(|| format!("open {}", path.display()))?;
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut buf = [0u8; 8192];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        for &b in &buf[..n] {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100_0000_01b3);
        }
    }
    Ok(hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("a.weight", NdArray::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, f64::MAX]));
        ps.insert("a.bias", NdArray::from_vec(&[1, 3], vec![0.1, 0.2, 0.3]));
        ps.insert("z", NdArray::scalar(-7.0));
        ps
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = std::env::temp_dir().join("editfield-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");
        let ps = sample_params();
        save_params(&path, &ps).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back.len(), ps.len());
        for (name, a) in ps.iter() {
            let b = back.get(name);
            assert_eq!(a.shape, b.shape);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn checksum_stable_and_sensitive() {
        let dir = std::env::temp_dir().join("editfield-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("sum1.ckpt");
        let p2 = dir.join("sum2.ckpt");
        save_params(&p1, &sample_params()).unwrap();
        save_params(&p2, &sample_params()).unwrap();
        assert_eq!(file_checksum(&p1).unwrap(), file_checksum(&p2).unwrap());

        let mut other = sample_params();
        other.get_mut("z").data[0] = -7.0000001;
        save_params(&p2, &other).unwrap();
        assert_ne!(file_checksum(&p1).unwrap(), file_checksum(&p2).unwrap());
        std::fs::remove_file(&p1).unwrap();
        std::fs::remove_file(&p2).unwrap();
    }

    #[test]
    fn bad_magic_reports_path() {
        let dir = std::env::temp_dir().join("editfield-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.ckpt");
        std::fs::write(&path, b"NOPE-not-a-checkpoint").unwrap();
        let err = load_params(&path).unwrap_err();
        let msg = format!("{}", err);
        assert!(msg.contains("junk.ckpt") && msg.contains("bad magic"), "{}", msg);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = std::env::temp_dir().join("editfield-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.ckpt");
        save_params(&path, &sample_params()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_params(&path).unwrap_err();
        let msg = format!("{:#}", err);
        assert!(msg.contains("truncated at byte"), "{}", msg);
        std::fs::remove_file(&path).unwrap();
    }
}
