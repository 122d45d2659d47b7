//! Maskable MLPs and small CNNs.
//!
//! Parameters live in one flat vector (see [`Layout`]). Weights are maskable,
//! biases never are. Every forward pass multiplies weights by the mask, so a
//! model evaluates identically before and after [`MaskedModel::apply_mask`].

mod arch;
mod channel;
pub(crate) mod checkpoint;

pub use arch::{Arch, CnnSpec, ConvSpec, LayerInfo, LayerKind, Layout};
pub use channel::ChannelMask;
pub use checkpoint::{read_checkpoint, write_checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Binary pruning mask over the maskable parameters (`true` = kept).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn ones(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn from_bools(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn kept(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn zeros(&self) -> usize {
        self.0.iter().filter(|&&b| !b).count()
    }

    pub fn sparsity(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.zeros() as f64 / self.0.len() as f64
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Every entry pruned here is also pruned in `later`.
    pub fn is_subset_zero_of(&self, later: &Mask) -> bool {
        self.0.len() == later.0.len() && self.0.iter().zip(&later.0).all(|(&a, &b)| a || !b)
    }
}

/// A network plus its pruning mask and the seed it was initialized from.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedModel {
    arch: Arch,
    layout: Layout,
    params: Vec<f64>,
    mask: Mask,
    seed: u64,
}

/// Builds a model with He-uniform weights (`U(±√(6/fan_in))`), zero biases
/// and an all-ones mask.
pub fn build_model(arch: &Arch, seed: u64) -> Result<MaskedModel> {
    let layout = arch.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; layout.num_params];
    for layer in &layout.layers {
        let bound = (6.0 / layer.fan_in() as f64).sqrt();
        for w in &mut params[layer.weight_range()] {
            *w = rng.random_range(-bound..bound);
        }
    }
    let mask = Mask::ones(layout.num_maskable);
    Ok(MaskedModel { arch: arch.clone(), layout, params, mask, seed })
}

impl MaskedModel {
    /// Assembles a model from raw parts, validating lengths.
    pub fn from_parts(arch: Arch, params: Vec<f64>, mask: Mask, seed: u64) -> Result<Self> {
        let layout = arch.layout()?;
        if params.len() != layout.num_params {
            bail!(Shape, "{arch} has {} parameters, got {}", layout.num_params, params.len());
        }
        if mask.len() != layout.num_maskable {
            bail!(Shape, "{arch} has {} maskable weights, mask has {}", layout.num_maskable, mask.len());
        }
        Ok(Self { arch, layout, params, mask, seed })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn num_params(&self) -> usize {
        self.layout.num_params
    }

    pub fn num_maskable(&self) -> usize {
        self.layout.num_maskable
    }

    pub fn classes(&self) -> usize {
        self.layout.classes
    }

    /// Replaces the parameter vector, keeping the mask.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::from_parts(self.arch.clone(), params, self.mask.clone(), self.seed)
    }

    /// Parameters with the mask multiplied into the weights.
    pub fn effective_params(&self) -> Vec<f64> {
        let mut p = self.params.clone();
        for (w, &keep) in p.iter_mut().zip(self.mask.bits()) {
            if !keep {
                *w = 0.0;
            }
        }
        p
    }

    /// Installs `mask` and zeroes the pruned weights; kept weights are untouched.
    pub fn apply_mask(&self, mask: &Mask) -> Result<Self> {
        if mask.len() != self.num_maskable() {
            bail!(Shape, "mask length {} != maskable count {}", mask.len(), self.num_maskable());
        }
        let mut out = self.clone();
        out.mask = mask.clone();
        out.params = out.effective_params();
        Ok(out)
    }

    /// `1 − nonzero maskable weights / maskable weights`, from the effective weights.
    pub fn weight_sparsity(&self) -> f64 {
        let nonzero = self.effective_params()[..self.num_maskable()].iter().filter(|&&w| w != 0.0).count();
        1.0 - nonzero as f64 / self.num_maskable() as f64
    }

    /// Logits for a batch `x` shaped `[N, ...input_shape]` (or `[N, numel]`).
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::<f64>::new();
        let params = tape.leaf(Tensor::new(vec![self.num_params()], self.effective_params())?);
        let input = tape.leaf(x.clone());
        let out = record_logits(&self.layout, &mut tape, params, input)?;
        Ok(tape.value(out).clone())
    }
}

/// Records the network on `tape`, reading every layer from the flat `params` leaf.
pub fn record_logits<T: Scalar>(layout: &Layout, tape: &mut Tape<T>, params: Var, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let batch = shape[0];
    let numel: usize = shape[1..].iter().product();
    if numel != layout.input_numel() || shape.len() < 2 {
        bail!(Shape, "input {shape:?} does not match model input {:?}", layout.input_shape);
    }
    let mut h = x;
    for layer in &layout.layers {
        let w = tape.slice(params, layer.weight_offset, layer.weight_shape())?;
        let b = tape.slice(params, layer.bias_offset, vec![layer.bias_len])?;
        h = match layer.kind {
            LayerKind::Dense { inputs, .. } => {
                if tape.shape(h).len() != 2 {
                    h = tape.reshape(h, vec![batch, inputs])?;
                }
                let z = tape.matmul(h, w)?;
                tape.add(z, b)?
            }
            LayerKind::Conv { in_ch, padding, in_hw, .. } => {
                if tape.shape(h).len() != 4 {
                    h = tape.reshape(h, vec![batch, in_ch, in_hw.0, in_hw.1])?;
                }
                let z = tape.conv2d(h, w, padding)?;
                tape.add(z, b)?
            }
        };
        if layer.relu {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}
