//! Binary checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "EPSD"            4 bytes magic
//! version           u16 (currently 1)
//! arch length       u32, then that many UTF-8 bytes (Arch descriptor)
//! seed              u64
//! param count       u64, then f64 × count (flat parameter vector)
//! mask length       u64, then ceil(len / 8) bytes, LSB-first packed bits
//! ```

use std::io::{Read, Write};

use super::{Arch, Mask, MaskedModel};
use crate::error::{bail, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EPSD";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint<W: Write>(model: &MaskedModel, mut out: W) -> Result<()> {
    let arch = model.arch().to_string();
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(arch.len() as u32).to_le_bytes())?;
    out.write_all(arch.as_bytes())?;
    out.write_all(&model.seed().to_le_bytes())?;
    out.write_all(&(model.params().len() as u64).to_le_bytes())?;
    for p in model.params() {
        out.write_all(&p.to_le_bytes())?;
    }
    out.write_all(&(model.mask().len() as u64).to_le_bytes())?;
    out.write_all(&pack_bits(model.mask().bits()))?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<MaskedModel> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        bail!(Format, "bad checkpoint magic {magic:?}");
    }
    let version = u16::from_le_bytes(read_array(&mut input)?);
    if version != CHECKPOINT_VERSION {
        bail!(Format, "unsupported checkpoint version {version}");
    }
    let arch_len = u32::from_le_bytes(read_array(&mut input)?) as usize;
    let mut arch_bytes = vec![0u8; arch_len];
    read_exact(&mut input, &mut arch_bytes)?;
    let arch: Arch = String::from_utf8(arch_bytes)
        .map_err(|_| Error::Format("architecture descriptor is not UTF-8".into()))?
        .parse()
        .map_err(|e| Error::Format(format!("architecture descriptor: {e}")))?;
    let seed = u64::from_le_bytes(read_array(&mut input)?);
    let count = u64::from_le_bytes(read_array(&mut input)?) as usize;
    let layout = arch.layout()?;
    if count != layout.num_params {
        bail!(Format, "checkpoint stores {count} parameters, {arch} has {}", layout.num_params);
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        params.push(f64::from_le_bytes(read_array(&mut input)?));
    }
    let mask_len = u64::from_le_bytes(read_array(&mut input)?) as usize;
    if mask_len != layout.num_maskable {
        bail!(Format, "checkpoint mask has {mask_len} entries, {arch} has {}", layout.num_maskable);
    }
    let mut packed = vec![0u8; mask_len.div_ceil(8)];
    read_exact(&mut input, &mut packed)?;
    let mask = Mask::from_bools(unpack_bits(&packed, mask_len));
    MaskedModel::from_parts(arch, params, mask, seed)
}

pub(crate) fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub(crate) fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect()
}

pub(crate) fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_array<R: Read, const N: usize>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(input, &mut buf)?;
    Ok(buf)
}
