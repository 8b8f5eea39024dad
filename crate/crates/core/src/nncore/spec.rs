use std::fmt;
use std::str::FromStr;

use super::ShapeError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        (input >= self.window).then(|| (input - self.window) / self.stride + 1)
    }
}

/// Cross-channel local response normalization:
/// `y_c = x_c / (k + alpha * sum_{j in window(c)} x_j^2)^beta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrnSpec {
    pub size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
}

impl Default for LrnSpec {
    fn default() -> Self {
        LrnSpec {
            size: 5,
            alpha: 1e-4,
            beta: 0.75,
            k: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    MaxPool(PoolSpec),
    Lrn(LrnSpec),
    Relu,
    Dropout { p: f64 },
    FullyConnected { out: usize },
    SoftmaxXent,
}

impl LayerSpec {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Conv(_) | LayerSpec::FullyConnected { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::MaxPool(_) => "maxpool",
            LayerSpec::Lrn(_) => "lrn",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::FullyConnected { .. } => "fc",
            LayerSpec::SoftmaxXent => "softmax",
        }
    }

    fn validate(&self, index: usize) -> Result<(), ShapeError> {
        let bad = |reason: &str| {
            Err(ShapeError::InvalidLayer {
                index,
                reason: reason.to_string(),
            })
        };
        match *self {
            LayerSpec::Conv(c) => {
                if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                    return bad("conv needs out_channels, kernel and stride >= 1");
                }
            }
            LayerSpec::MaxPool(p) => {
                if p.window == 0 || p.stride == 0 {
                    return bad("maxpool needs window and stride >= 1");
                }
            }
            LayerSpec::Lrn(l) => {
                if l.size == 0 || !(l.alpha >= 0.0) || !(l.beta >= 0.0) || !(l.k > 0.0) {
                    return bad("lrn needs size >= 1, alpha >= 0, beta >= 0, k > 0");
                }
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return bad("dropout probability must lie in [0, 1)");
                }
            }
            LayerSpec::FullyConnected { out } => {
                if out == 0 {
                    return bad("fc width must be >= 1");
                }
            }
            LayerSpec::Relu | LayerSpec::SoftmaxXent => {}
        }
        Ok(())
    }

    /// Output shape for the given input shape.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>, ShapeError> {
        let mismatch = |reason: &str| ShapeError::LayerInput {
            index,
            kind: self.kind(),
            input: input.to_vec(),
            reason: reason.to_string(),
        };
        match *self {
            LayerSpec::Conv(c) => {
                let [_, h, w] = three_d(input).ok_or_else(|| mismatch("expected (c, h, w)"))?;
                let oh = c.output_extent(h).ok_or_else(|| mismatch("kernel exceeds padded input"))?;
                let ow = c.output_extent(w).ok_or_else(|| mismatch("kernel exceeds padded input"))?;
                Ok(vec![c.out_channels, oh, ow])
            }
            LayerSpec::MaxPool(p) => {
                let [ch, h, w] = three_d(input).ok_or_else(|| mismatch("expected (c, h, w)"))?;
                let oh = p.output_extent(h).ok_or_else(|| mismatch("window exceeds input"))?;
                let ow = p.output_extent(w).ok_or_else(|| mismatch("window exceeds input"))?;
                Ok(vec![ch, oh, ow])
            }
            LayerSpec::Lrn(_) => {
                three_d(input).ok_or_else(|| mismatch("expected (c, h, w)"))?;
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::FullyConnected { out } => Ok(vec![out]),
            LayerSpec::SoftmaxXent => {
                if input.len() != 1 {
                    return Err(mismatch("expected a flat logit vector"));
                }
                Ok(input.to_vec())
            }
        }
    }
}

fn three_d(shape: &[usize]) -> Option<[usize; 3]> {
    match *shape {
        [c, h, w] => Some([c, h, w]),
        _ => None,
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv(c) => write!(
                f,
                "conv {} {} {} {}",
                c.out_channels, c.kernel, c.stride, c.pad
            ),
            LayerSpec::MaxPool(p) => write!(f, "maxpool {} {}", p.window, p.stride),
            LayerSpec::Lrn(l) => write!(f, "lrn {} {} {} {}", l.size, l.alpha, l.beta, l.k),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Dropout { p } => write!(f, "dropout {p}"),
            LayerSpec::FullyConnected { out } => write!(f, "fc {out}"),
            LayerSpec::SoftmaxXent => write!(f, "softmax"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = ShapeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse_err = || ShapeError::Descriptor(format!("cannot parse layer `{s}`"));
        let mut parts = s.split_whitespace();
        let kind = parts.next().ok_or_else(parse_err)?;
        let args: Vec<&str> = parts.collect();
        let int = |i: usize| -> Result<usize, ShapeError> {
            args.get(i)
                .and_then(|a| a.parse().ok())
                .ok_or_else(parse_err)
        };
        let real = |i: usize| -> Result<f64, ShapeError> {
            args.get(i)
                .and_then(|a| a.parse().ok())
                .ok_or_else(parse_err)
        };
        let arity = |n: usize| -> Result<(), ShapeError> {
            if args.len() == n {
                Ok(())
            } else {
                Err(parse_err())
            }
        };
        let layer = match kind {
            "conv" => {
                arity(4)?;
                LayerSpec::Conv(ConvSpec {
                    out_channels: int(0)?,
                    kernel: int(1)?,
                    stride: int(2)?,
                    pad: int(3)?,
                })
            }
            "maxpool" => {
                arity(2)?;
                LayerSpec::MaxPool(PoolSpec {
                    window: int(0)?,
                    stride: int(1)?,
                })
            }
            "lrn" => {
                if args.is_empty() {
                    LayerSpec::Lrn(LrnSpec::default())
                } else {
                    arity(4)?;
                    LayerSpec::Lrn(LrnSpec {
                        size: int(0)?,
                        alpha: real(1)?,
                        beta: real(2)?,
                        k: real(3)?,
                    })
                }
            }
            "relu" => {
                arity(0)?;
                LayerSpec::Relu
            }
            "dropout" => {
                arity(1)?;
                LayerSpec::Dropout { p: real(0)? }
            }
            "fc" => {
                arity(1)?;
                LayerSpec::FullyConnected { out: int(0)? }
            }
            "softmax" => {
                arity(0)?;
                LayerSpec::SoftmaxXent
            }
            _ => return Err(parse_err()),
        };
        Ok(layer)
    }
}

/// Weight initialization: Gaussian weights with zero mean, constant biases.
#[derive(Clone, Debug, PartialEq)]
pub struct InitConfig {
    pub weight_std: f64,
    pub bias: f64,
    /// Per weight layer (1-based) standard deviation overrides.
    pub layer_std: Vec<(usize, f64)>,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            weight_std: 0.01,
            bias: 0.0,
            layer_std: Vec::new(),
        }
    }
}

impl InitConfig {
    pub fn std_for(&self, weight_layer: usize) -> f64 {
        self.layer_std
            .iter()
            .rev()
            .find(|(l, _)| *l == weight_layer)
            .map(|&(_, s)| s)
            .unwrap_or(self.weight_std)
    }
}

/// An ordered, shape-checked layer stack ending in a softmax cross-entropy head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    input: [usize; 3],
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    pub init: InitConfig,
}

impl ModelSpec {
    pub fn new(input: [usize; 3], layers: Vec<LayerSpec>) -> Result<Self, ShapeError> {
        if input.contains(&0) {
            return Err(ShapeError::ZeroExtent(input.to_vec()));
        }
        if layers.is_empty() {
            return Err(ShapeError::Descriptor("empty layer stack".into()));
        }
        let mut shapes = vec![input.to_vec()];
        for (index, layer) in layers.iter().enumerate() {
            layer.validate(index)?;
            if matches!(layer, LayerSpec::SoftmaxXent) && index + 1 != layers.len() {
                return Err(ShapeError::InvalidLayer {
                    index,
                    reason: "softmax must be the final layer".into(),
                });
            }
            let out = layer.output_shape(index, shapes.last().unwrap())?;
            if out.contains(&0) {
                return Err(ShapeError::ZeroExtent(out));
            }
            shapes.push(out);
        }
        if !matches!(layers.last(), Some(LayerSpec::SoftmaxXent)) {
            return Err(ShapeError::Descriptor(
                "layer stack must end in softmax".into(),
            ));
        }
        if !layers.iter().any(LayerSpec::has_weights) {
            return Err(ShapeError::Descriptor("no weight layers".into()));
        }
        Ok(ModelSpec {
            input,
            layers,
            shapes,
            init: InitConfig::default(),
        })
    }

    pub fn with_init(mut self, init: InitConfig) -> Self {
        self.init = init;
        self
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Input shape of layer `index`; `index == layers().len()` gives the output shape.
    pub fn shape_at(&self, index: usize) -> &[usize] {
        &self.shapes[index]
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map(|s| s[0]).unwrap_or(0)
    }

    /// Number of layers that carry weights (conv and fully connected), `L`.
    pub fn num_weight_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.has_weights()).count()
    }

    /// Indices into `layers()` of the weight layers, in order.
    pub fn weight_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_weights())
            .map(|(i, _)| i)
            .collect()
    }

    /// (weight shape, bias shape) of the layer at `index`, if it carries weights.
    pub fn param_shapes(&self, index: usize) -> Option<(Vec<usize>, Vec<usize>)> {
        let input = &self.shapes[index];
        match self.layers[index] {
            LayerSpec::Conv(c) => Some((
                vec![c.out_channels, input[0], c.kernel, c.kernel],
                vec![c.out_channels],
            )),
            LayerSpec::FullyConnected { out } => {
                Some((vec![out, input.iter().product()], vec![out]))
            }
            _ => None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight_layer_indices()
            .into_iter()
            .filter_map(|i| self.param_shapes(i))
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum()
    }

    /// Canonical architecture descriptor; the checkpoint fingerprint hashes this text.
    pub fn descriptor(&self) -> String {
        self.to_string()
    }

    /// Same architecture with a different classifier width.
    pub fn with_num_classes(&self, classes: usize) -> Result<Self, ShapeError> {
        let mut layers = self.layers.clone();
        if let Some(LayerSpec::FullyConnected { out }) = layers
            .iter_mut()
            .rev()
            .find(|l| matches!(l, LayerSpec::FullyConnected { .. }))
        {
            *out = classes;
        }
        Ok(ModelSpec::new(self.input, layers)?.with_init(self.init.clone()))
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input;
        write!(f, "input {c}x{h}x{w}")?;
        for layer in &self.layers {
            write!(f, " | {layer}")?;
        }
        Ok(())
    }
}

impl FromStr for ModelSpec {
    type Err = ShapeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split('|').map(str::trim);
        let head = parts.next().unwrap_or_default();
        let dims = head
            .strip_prefix("input")
            .map(str::trim)
            .ok_or_else(|| ShapeError::Descriptor(format!("missing input shape in `{head}`")))?;
        let extents: Vec<usize> = dims
            .split('x')
            .map(|d| d.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| ShapeError::Descriptor(format!("bad input shape `{dims}`")))?;
        let input: [usize; 3] = extents
            .try_into()
            .map_err(|_| ShapeError::Descriptor(format!("input shape `{dims}` is not c x h x w")))?;
        let layers = parts.map(str::parse).collect::<Result<Vec<_>, _>>()?;
        ModelSpec::new(input, layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelSpec {
        "input 1x12x12 | conv 6 5 1 2 | relu | maxpool 2 2 | lrn 5 0.0001 0.75 1 | fc 10 | softmax"
            .parse()
            .unwrap()
    }

    #[test]
    fn shapes_follow_the_stack() {
        let spec = tiny();
        assert_eq!(spec.shape_at(1), &[6, 12, 12]);
        assert_eq!(spec.shape_at(3), &[6, 6, 6]);
        assert_eq!(spec.shape_at(5), &[10]);
        assert_eq!(spec.num_classes(), 10);
        assert_eq!(spec.num_weight_layers(), 2);
        assert_eq!(spec.param_shapes(0).unwrap().0, vec![6, 1, 5, 5]);
        assert_eq!(spec.param_shapes(4).unwrap().0, vec![10, 216]);
    }

    #[test]
    fn descriptor_round_trips() {
        let spec = tiny();
        let again: ModelSpec = spec.descriptor().parse().unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!("input 0x4x4 | fc 2 | softmax".parse::<ModelSpec>().is_err());
        assert!("input 1x4x4 | conv 2 5 1 0 | fc 2 | softmax"
            .parse::<ModelSpec>()
            .is_err());
        assert!("input 1x4x4 | maxpool 5 1 | fc 2 | softmax"
            .parse::<ModelSpec>()
            .is_err());
        assert!("input 1x4x4 | conv 2 3 0 0 | fc 2 | softmax"
            .parse::<ModelSpec>()
            .is_err());
        assert!("input 1x4x4 | fc 2 | dropout 1 | softmax"
            .parse::<ModelSpec>()
            .is_err());
        assert!("input 1x4x4 | fc 2".parse::<ModelSpec>().is_err());
        assert!("input 1x4x4 | softmax | fc 2 | softmax"
            .parse::<ModelSpec>()
            .is_err());
    }

    #[test]
    fn bare_lrn_takes_defaults() {
        let l: LayerSpec = "lrn".parse().unwrap();
        assert_eq!(l, LayerSpec::Lrn(LrnSpec::default()));
    }
}
