use super::{Layout, Mask};
use crate::error::{bail, Result};

/// Structured mask: one keep flag per output channel of every layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMask {
    pub layers: Vec<Vec<bool>>,
}

impl ChannelMask {
    pub fn ones(layout: &Layout) -> Self {
        Self { layers: layout.layers.iter().map(|l| vec![true; l.channels()]).collect() }
    }

    pub fn num_channels(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Element-granularity mask: each weight inherits its channel's flag.
    pub fn expand(&self, layout: &Layout) -> Result<Mask> {
        if self.layers.len() != layout.layers.len() {
            bail!(Shape, "channel mask has {} layers, model has {}", self.layers.len(), layout.layers.len());
        }
        let mut bits = Vec::with_capacity(layout.num_maskable);
        for (flags, layer) in self.layers.iter().zip(&layout.layers) {
            if flags.len() != layer.channels() {
                bail!(Shape, "layer expects {} channel flags, got {}", layer.channels(), flags.len());
            }
            bits.extend((0..layer.weight_len).map(|i| flags[layer.channel_of(i)]));
        }
        Ok(Mask::from_bools(bits))
    }

    /// Inverse of [`expand`](Self::expand); fails unless every channel is
    /// uniformly kept or uniformly pruned.
    pub fn contract(mask: &Mask, layout: &Layout) -> Result<Self> {
        if mask.len() != layout.num_maskable {
            bail!(Shape, "mask length {} != maskable count {}", mask.len(), layout.num_maskable);
        }
        let mut layers = Vec::with_capacity(layout.layers.len());
        for layer in &layout.layers {
            let mut flags: Vec<Option<bool>> = vec![None; layer.channels()];
            for i in 0..layer.weight_len {
                let bit = mask.kept(layer.weight_offset + i);
                let slot = &mut flags[layer.channel_of(i)];
                match *slot {
                    None => *slot = Some(bit),
                    Some(prev) if prev != bit => {
                        bail!(Shape, "mask is not channel-aligned at weight {}", layer.weight_offset + i)
                    }
                    Some(_) => {}
                }
            }
            layers.push(flags.into_iter().map(|f| f.unwrap_or(true)).collect());
        }
        Ok(Self { layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, CnnSpec, ConvSpec};
    use proptest::prelude::*;

    fn cnn_layout() -> Layout {
        Arch::Cnn(CnnSpec {
            input: [2, 5, 5],
            convs: vec![ConvSpec { out_channels: 3, kernel: 3, padding: 1 }],
            hidden: vec![4],
            classes: 2,
        })
        .layout()
        .unwrap()
    }

    #[test]
    fn dense_channel_is_a_column() {
        let layout = Arch::Mlp(vec![3, 2]).layout().unwrap();
        let cm = ChannelMask { layers: vec![vec![true, false]] };
        let m = cm.expand(&layout).unwrap();
        assert_eq!(m.bits(), &[true, false, true, false, true, false]);
    }

    #[test]
    fn conv_channel_is_a_block() {
        let layout = cnn_layout();
        let cm = ChannelMask { layers: vec![vec![true, false, true], vec![true; 4], vec![true; 2]] };
        let m = cm.expand(&layout).unwrap();
        let per = 2 * 9;
        assert!(m.bits()[..per].iter().all(|&b| b));
        assert!(m.bits()[per..2 * per].iter().all(|&b| !b));
        assert!(m.bits()[2 * per..3 * per].iter().all(|&b| b));
    }

    #[test]
    fn unaligned_mask_is_rejected() {
        let layout = Arch::Mlp(vec![3, 2]).layout().unwrap();
        let m = Mask::from_bools(vec![true, false, false, false, true, false]);
        assert!(ChannelMask::contract(&m, &layout).is_err());
    }

    proptest! {
        #[test]
        fn expand_then_contract_round_trips(bits in proptest::collection::vec(any::<bool>(), 9)) {
            let layout = cnn_layout();
            let cm = ChannelMask { layers: vec![bits[..3].to_vec(), bits[3..7].to_vec(), bits[7..].to_vec()] };
            let back = ChannelMask::contract(&cm.expand(&layout).unwrap(), &layout).unwrap();
            prop_assert_eq!(back, cm);
        }
    }
}
