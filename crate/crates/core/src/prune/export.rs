//! Mask and saliency export.
//!
//! Mask file, little-endian: `"EPSM"`, u16 version, u64 weight count,
//! u32 sparsity in per-mille (rounded), then LSB-first packed keep bits.

use std::io::{Read, Write};

use super::SaliencyMap;
use crate::error::{bail, Result};
use crate::model::checkpoint::{pack_bits, read_array, read_exact, unpack_bits};
use crate::model::{Layout, Mask};

pub const MASK_MAGIC: &[u8; 4] = b"EPSM";
pub const MASK_VERSION: u16 = 1;

pub fn write_mask_file<W: Write>(mask: &Mask, mut out: W) -> Result<()> {
    out.write_all(MASK_MAGIC)?;
    out.write_all(&MASK_VERSION.to_le_bytes())?;
    out.write_all(&(mask.len() as u64).to_le_bytes())?;
    let per_mille = (mask.sparsity() * 1000.0).round() as u32;
    out.write_all(&per_mille.to_le_bytes())?;
    out.write_all(&pack_bits(mask.bits()))?;
    Ok(())
}

/// Returns the mask and the stored per-mille sparsity.
pub fn read_mask_file<R: Read>(mut input: R) -> Result<(Mask, u32)> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic)?;
    if &magic != MASK_MAGIC {
        bail!(Format, "bad mask magic {magic:?}");
    }
    let version = u16::from_le_bytes(read_array(&mut input)?);
    if version != MASK_VERSION {
        bail!(Format, "unsupported mask version {version}");
    }
    let count = u64::from_le_bytes(read_array(&mut input)?) as usize;
    let per_mille = u32::from_le_bytes(read_array(&mut input)?);
    let mut packed = vec![0u8; count.div_ceil(8)];
    read_exact(&mut input, &mut packed)?;
    Ok((Mask::from_bools(unpack_bits(&packed, count)), per_mille))
}

/// CSV with columns `flat_index,layer,score`.
pub fn write_saliency_csv<W: Write>(saliency: &SaliencyMap, layout: &Layout, mut out: W) -> Result<()> {
    if saliency.len() != layout.num_maskable {
        bail!(Shape, "saliency has {} entries, layout has {}", saliency.len(), layout.num_maskable);
    }
    writeln!(out, "flat_index,layer,score")?;
    for (i, s) in saliency.scores.iter().enumerate() {
        writeln!(out, "{i},{},{s:e}", layout.layer_of(i))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use crate::prune::Criterion;

    #[test]
    fn mask_file_round_trip() {
        let m = Mask::from_bools((0..21).map(|i| i % 3 != 0).collect());
        let mut buf = Vec::new();
        write_mask_file(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"EPSM");
        let (back, pm) = read_mask_file(&buf[..]).unwrap();
        assert_eq!(back, m);
        assert_eq!(pm, 333);
        assert!(read_mask_file(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn saliency_csv_rows() {
        let layout = Arch::Mlp(vec![2, 2, 1]).layout().unwrap();
        let s = SaliencyMap::from_raw(vec![1.0; 6], Criterion::Magnitude, 0, "none".into()).unwrap();
        let mut buf = Vec::new();
        write_saliency_csv(&s, &layout, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], "flat_index,layer,score");
        assert!(lines[5].starts_with("4,1,"));
    }
}
