//! Binary tensor container used for checkpoints and dataset fixtures.
//!
//! Layout, all integers little-endian: magic `SNNW`, version `u32`,
//! `u32` byte length and UTF-8 header text, then per tensor `u32` rank,
//! `rank` x `u32` dims and the `f32` data.

use std::fs;
use std::path::Path;

use crate::arch::ArchSpec;
use crate::error::{Result, SnnError};
use crate::network::Network;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SNNW";
pub const VERSION: u32 = 1;

pub fn encode(header: &str, tensors: &[&Tensor]) -> Vec<u8> {
    let body: usize = tensors.iter().map(|t| 4 + 4 * t.rank() + 4 * t.numel()).sum();
    let mut out = Vec::with_capacity(12 + header.len() + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format!("truncated while reading {what} at byte {}", self.pos));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(String, Vec<Tensor>), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err("bad magic (expected SNNW)".into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported version {version} (expected {VERSION})"));
    }
    let len = r.u32("header length")? as usize;
    let header = std::str::from_utf8(r.take(len, "header")?)
        .map_err(|_| "header is not UTF-8".to_string())?
        .to_string();
    let mut tensors = Vec::new();
    while r.pos < bytes.len() {
        let rank = r.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(format!("implausible tensor rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor size overflows")?;
        let raw = r.take(numel.checked_mul(4).ok_or("tensor size overflows")?, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| e.to_string())?);
    }
    Ok((header, tensors))
}

pub fn write_tensor_file(path: &Path, header: &str, tensors: &[&Tensor]) -> Result<()> {
    fs::write(path, encode(header, tensors))?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<(String, Vec<Tensor>)> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|reason| SnnError::format(path, reason))
}

/// Saves the architecture text and every parameter in build order.
pub fn save_checkpoint(network: &Network, path: &Path) -> Result<()> {
    let tensors: Vec<&Tensor> = network.params().iter().map(|p| &p.value).collect();
    write_tensor_file(path, &network.spec().to_text(), &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let (header, tensors) = read_tensor_file(path)?;
    let spec = ArchSpec::from_text(&header).map_err(|e| SnnError::format(path, e.to_string()))?;
    Network::from_parts(&spec, tensors).map_err(|e| SnnError::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{count_params, Mode, PruneSchedule};

    fn small() -> Network {
        let spec = ArchSpec::squeezenet(5, Mode::Snn)
            .with_schedule(PruneSchedule::Tail2)
            .scale_width(0.125);
        Network::build(&spec, 11).unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.snnw");
        let net = small();
        save_checkpoint(&net, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.spec(), net.spec());
        for (a, b) in back.params().iter().zip(net.params()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(back.param_count(), count_params(net.spec()));
    }

    #[test]
    fn corrupt_files_rejected() {
        let net = small();
        let tensors: Vec<&Tensor> = net.params().iter().map(|p| &p.value).collect();
        let good = encode(&net.spec().to_text(), &tensors);
        assert!(decode(&good).is_ok());

        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(decode(&magic).unwrap_err().contains("magic"));

        let mut version = good.clone();
        version[4] = 9;
        assert!(decode(&version).unwrap_err().contains("version"));

        assert!(decode(&good[..good.len() - 3]).unwrap_err().contains("truncated"));
        assert!(decode(&good[..10]).is_err());
    }

    #[test]
    fn missing_tensor_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.snnw");
        let net = small();
        let tensors: Vec<&Tensor> = net.params().iter().map(|p| &p.value).skip(1).collect();
        write_tensor_file(&path, &net.spec().to_text(), &tensors).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
