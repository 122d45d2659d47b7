use std::fmt;
use std::str::FromStr;

use crate::error::{bail, Error, Result};

/// One convolution stage of a [`CnnSpec`]; always followed by ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

/// Small CNN: conv stages, then a flatten into dense hidden layers and a head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnnSpec {
    /// `(channels, height, width)` of one input example.
    pub input: [usize; 3],
    pub convs: Vec<ConvSpec>,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

/// Network architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arch {
    /// Layer widths from input to logits; at least two entries.
    Mlp(Vec<usize>),
    Cnn(CnnSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Weight stored `[inputs, outputs]`; output unit `j` is column `j`.
    Dense { inputs: usize, outputs: usize },
    /// Weight stored `[out_ch, in_ch, k, k]`; output channel `o` is block `o`.
    Conv { in_ch: usize, out_ch: usize, kernel: usize, padding: usize, in_hw: (usize, usize) },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub kind: LayerKind,
    pub relu: bool,
    pub weight_offset: usize,
    pub weight_len: usize,
    pub bias_offset: usize,
    pub bias_len: usize,
}

impl LayerInfo {
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense { inputs, outputs } => vec![inputs, outputs],
            LayerKind::Conv { in_ch, out_ch, kernel, .. } => vec![out_ch, in_ch, kernel, kernel],
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv { in_ch, kernel, .. } => in_ch * kernel * kernel,
        }
    }

    /// Number of output channels (conv) or output units (dense).
    pub fn channels(&self) -> usize {
        match self.kind {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv { out_ch, .. } => out_ch,
        }
    }

    /// Output channel of the weight at `local` (index within this layer).
    pub fn channel_of(&self, local: usize) -> usize {
        match self.kind {
            LayerKind::Dense { outputs, .. } => local % outputs,
            LayerKind::Conv { out_ch, .. } => local / (self.weight_len / out_ch),
        }
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.weight_offset + self.weight_len
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.bias_offset..self.bias_offset + self.bias_len
    }
}

/// Flat parameter layout: every layer's weights (layer-major, row-major inside
/// a layer), followed by every layer's bias. The weight prefix is exactly the
/// maskable set, in mask order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub layers: Vec<LayerInfo>,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub num_maskable: usize,
    pub num_params: usize,
}

impl Layout {
    /// Layer that owns maskable index `flat`.
    pub fn layer_of(&self, flat: usize) -> usize {
        self.layers.partition_point(|l| l.weight_offset + l.weight_len <= flat)
    }

    pub fn input_numel(&self) -> usize {
        self.input_shape.iter().product()
    }
}

impl Arch {
    pub fn classes(&self) -> usize {
        match self {
            Arch::Mlp(sizes) => *sizes.last().unwrap_or(&0),
            Arch::Cnn(spec) => spec.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Arch::Mlp(sizes) => {
                if sizes.len() < 2 {
                    bail!(Config, "mlp needs at least input and output widths, got {sizes:?}");
                }
                if sizes.contains(&0) {
                    bail!(Config, "mlp layer widths must be positive, got {sizes:?}");
                }
            }
            Arch::Cnn(spec) => {
                if spec.input.contains(&0) || spec.classes == 0 || spec.hidden.contains(&0) {
                    bail!(Config, "cnn dimensions must be positive: {spec:?}");
                }
                let (mut h, mut w) = (spec.input[1], spec.input[2]);
                for c in &spec.convs {
                    if c.out_channels == 0 || c.kernel == 0 {
                        bail!(Config, "conv stage needs positive channels and kernel: {c:?}");
                    }
                    if h + 2 * c.padding < c.kernel || w + 2 * c.padding < c.kernel {
                        bail!(Config, "kernel {} does not fit a {h}×{w} map with padding {}", c.kernel, c.padding);
                    }
                    h = h + 2 * c.padding - c.kernel + 1;
                    w = w + 2 * c.padding - c.kernel + 1;
                }
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<Layout> {
        self.validate()?;
        let mut kinds = Vec::new();
        let input_shape = match self {
            Arch::Mlp(sizes) => {
                for pair in sizes.windows(2) {
                    kinds.push(LayerKind::Dense { inputs: pair[0], outputs: pair[1] });
                }
                vec![sizes[0]]
            }
            Arch::Cnn(spec) => {
                let [mut ch, mut h, mut w] = spec.input;
                for c in &spec.convs {
                    kinds.push(LayerKind::Conv {
                        in_ch: ch,
                        out_ch: c.out_channels,
                        kernel: c.kernel,
                        padding: c.padding,
                        in_hw: (h, w),
                    });
                    h = h + 2 * c.padding - c.kernel + 1;
                    w = w + 2 * c.padding - c.kernel + 1;
                    ch = c.out_channels;
                }
                let mut width = ch * h * w;
                for &hdim in spec.hidden.iter().chain(std::iter::once(&spec.classes)) {
                    kinds.push(LayerKind::Dense { inputs: width, outputs: hdim });
                    width = hdim;
                }
                spec.input.to_vec()
            }
        };
        let n = kinds.len();
        let mut layers = Vec::with_capacity(n);
        let mut offset = 0;
        for (i, kind) in kinds.iter().enumerate() {
            let weight_len = match *kind {
                LayerKind::Dense { inputs, outputs } => inputs * outputs,
                LayerKind::Conv { in_ch, out_ch, kernel, .. } => out_ch * in_ch * kernel * kernel,
            };
            let bias_len = match *kind {
                LayerKind::Dense { outputs, .. } => outputs,
                LayerKind::Conv { out_ch, .. } => out_ch,
            };
            layers.push(LayerInfo {
                kind: *kind,
                relu: i + 1 < n,
                weight_offset: offset,
                weight_len,
                bias_offset: 0,
                bias_len,
            });
            offset += weight_len;
        }
        let num_maskable = offset;
        for layer in &mut layers {
            layer.bias_offset = offset;
            offset += layer.bias_len;
        }
        Ok(Layout { layers, input_shape, classes: self.classes(), num_maskable, num_params: offset })
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Mlp(sizes) => {
                let s: Vec<String> = sizes.iter().map(usize::to_string).collect();
                write!(f, "mlp:{}", s.join("-"))
            }
            Arch::Cnn(spec) => {
                let convs: Vec<String> =
                    spec.convs.iter().map(|c| format!("{}k{}p{}", c.out_channels, c.kernel, c.padding)).collect();
                let hidden: Vec<String> = spec.hidden.iter().map(usize::to_string).collect();
                let [c, h, w] = spec.input;
                write!(f, "cnn:in={c}x{h}x{w};conv={};hidden={};classes={}", convs.join(","), hidden.join(","), spec.classes)
            }
        }
    }
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| Error::Config(format!("bad {what} '{s}'")))
}

fn parse_list(s: &str, sep: char, what: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(sep).map(|p| parse_usize(p, what)).collect()
}

impl FromStr for Arch {
    type Err = Error;

    /// Parses the descriptor produced by `Display`, e.g. `mlp:2-64-64-4` or
    /// `cnn:in=1x8x8;conv=4k3p0;hidden=;classes=10`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let arch = if let Some(rest) = s.strip_prefix("mlp:") {
            Arch::Mlp(parse_list(rest, '-', "mlp width")?)
        } else if let Some(rest) = s.strip_prefix("cnn:") {
            let mut input = None;
            let mut convs = Vec::new();
            let mut hidden = Vec::new();
            let mut classes = None;
            for part in rest.split(';') {
                let (key, value) =
                    part.split_once('=').ok_or_else(|| Error::Config(format!("bad cnn descriptor part '{part}'")))?;
                match key.trim() {
                    "in" => {
                        let dims = parse_list(value, 'x', "input dim")?;
                        let dims: [usize; 3] =
                            dims.try_into().map_err(|_| Error::Config(format!("cnn input needs CxHxW, got '{value}'")))?;
                        input = Some(dims);
                    }
                    "conv" => {
                        for stage in value.split(',').filter(|v| !v.trim().is_empty()) {
                            let (ch, rest) = stage
                                .split_once('k')
                                .ok_or_else(|| Error::Config(format!("bad conv stage '{stage}'")))?;
                            let (k, p) = rest.split_once('p').unwrap_or((rest, "0"));
                            convs.push(ConvSpec {
                                out_channels: parse_usize(ch, "channels")?,
                                kernel: parse_usize(k, "kernel")?,
                                padding: parse_usize(p, "padding")?,
                            });
                        }
                    }
                    "hidden" => hidden = parse_list(value, ',', "hidden width")?,
                    "classes" => classes = Some(parse_usize(value, "classes")?),
                    other => bail!(Config, "unknown cnn descriptor key '{other}'"),
                }
            }
            Arch::Cnn(CnnSpec {
                input: input.ok_or_else(|| Error::Config("cnn descriptor lacks in=".into()))?,
                convs,
                hidden,
                classes: classes.ok_or_else(|| Error::Config("cnn descriptor lacks classes=".into()))?,
            })
        } else {
            bail!(Config, "unknown architecture '{s}'")
        };
        arch.validate()?;
        Ok(arch)
    }
}
