use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use super::layers::{self, DropoutMode, Want};
use super::{LayerSpec, LayerState, ModelSpec, Scalar, ShapeError, Tensor};

/// A layer stack together with the parameters of each weight layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    spec: ModelSpec,
    layers: Vec<LayerState<T>>,
    /// Spec layer index -> weight layer ordinal.
    slot: Vec<Option<usize>>,
}

/// How dropout layers behave during a forward pass.
pub enum ForwardMode<'a, T> {
    Eval,
    /// Draw fresh masks.
    Train(&'a mut dyn RngCore),
    /// Reuse masks recorded by an earlier pass, indexed by spec layer.
    Replay(&'a [Option<Vec<T>>]),
}

#[derive(Debug)]
enum Aux<T> {
    None,
    Argmax(Vec<usize>),
    Scale(Tensor<T>),
    Mask(Option<Vec<T>>),
}

/// Activations recorded by a forward pass for the matching backward pass.
#[derive(Debug)]
pub struct ForwardCache<T> {
    inputs: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
    logits: Tensor<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn logits(&self) -> &Tensor<T> {
        &self.logits
    }

    /// Dropout masks used, by spec layer index; replayable via [`ForwardMode::Replay`].
    pub fn masks(&self) -> Vec<Option<Vec<T>>> {
        self.aux
            .iter()
            .map(|a| match a {
                Aux::Mask(m) => m.clone(),
                _ => None,
            })
            .collect()
    }
}

/// Accumulated parameter gradients; `None` for frozen layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    layers: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_for(model: &Model<T>) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| {
                    (!l.frozen).then(|| {
                        (
                            Tensor::zeros(l.weights.shape()),
                            Tensor::zeros(l.bias.shape()),
                        )
                    })
                })
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<Option<(Tensor<T>, Tensor<T>)>>) -> Self {
        Gradients { layers }
    }

    /// Gradient of weight layer `i` (0-based), if it is trainable.
    pub fn layer(&self, i: usize) -> Option<&(Tensor<T>, Tensor<T>)> {
        self.layers.get(i).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn scale(&mut self, factor: T) {
        for (w, b) in self.layers.iter_mut().flatten() {
            w.scale(factor);
            b.scale(factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|(w, b)| w.is_finite() && b.is_finite())
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(spec: ModelSpec, layers: Vec<LayerState<T>>) -> Result<Self, ShapeError> {
        let indices = spec.weight_layer_indices();
        if indices.len() != layers.len() {
            return Err(ShapeError::Parameter {
                layer: layers.len(),
                reason: format!(
                    "spec has {} weight layers, got {}",
                    indices.len(),
                    layers.len()
                ),
            });
        }
        for (ordinal, (&index, state)) in indices.iter().zip(&layers).enumerate() {
            let (w, b) = spec.param_shapes(index).expect("weight layer");
            if state.weights.shape() != w.as_slice() || state.bias.shape() != b.as_slice() {
                return Err(ShapeError::Parameter {
                    layer: ordinal + 1,
                    reason: format!(
                        "expected weights {w:?} and bias {b:?}, found {:?} and {:?}",
                        state.weights.shape(),
                        state.bias.shape()
                    ),
                });
            }
        }
        let mut slot = vec![None; spec.layers().len()];
        for (ordinal, &index) in indices.iter().enumerate() {
            slot[index] = Some(ordinal);
        }
        Ok(Model { spec, layers, slot })
    }

    /// Gaussian weights with the spec's init standard deviations, constant
    /// biases; every layer trainable and tagged as random.
    pub fn init_gaussian<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Self {
        let layers = spec
            .weight_layer_indices()
            .into_iter()
            .enumerate()
            .map(|(ordinal, index)| {
                let (w, b) = spec.param_shapes(index).expect("weight layer");
                let std = spec.init.std_for(ordinal + 1);
                let data = (0..w.iter().product::<usize>())
                    .map(|_| T::from(std * rng.sample::<f64, _>(StandardNormal)).unwrap())
                    .collect();
                LayerState::new(
                    Tensor::from_vec(&w, data).expect("weight shape"),
                    Tensor::filled(&b, T::from(spec.init.bias).unwrap()),
                )
            })
            .collect();
        Model::new(spec, layers).expect("initialized layers match their spec")
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Weight layers in order (index 0 is weight layer 1).
    pub fn layers(&self) -> &[LayerState<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerState<T>] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<LayerState<T>> {
        self.layers
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            layers: self.layers.iter().map(LayerState::cast).collect(),
            slot: self.slot.clone(),
        }
    }

    /// L2 norm of each weight layer's weights, for diagnostics.
    pub fn layer_norms(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.weights.l2_norm()).collect()
    }

    pub fn forward(
        &self,
        image: &Tensor<T>,
        mut mode: ForwardMode<'_, T>,
    ) -> Result<ForwardCache<T>, ShapeError> {
        let expected = self.spec.input_shape();
        if image.shape() != expected {
            return Err(ShapeError::Mismatch {
                what: "model input",
                expected: format!("{expected:?}"),
                found: image.shape().to_vec(),
            });
        }
        let specs = self.spec.layers();
        let mut inputs = Vec::with_capacity(specs.len());
        let mut aux = Vec::with_capacity(specs.len());
        let mut x = image.clone();
        for (i, layer) in specs.iter().enumerate() {
            let (y, a) = match layer {
                LayerSpec::Conv(c) => {
                    let state = &self.layers[self.slot[i].unwrap()];
                    (layers::conv_forward(&x, state, c)?, Aux::None)
                }
                LayerSpec::FullyConnected { .. } => {
                    let state = &self.layers[self.slot[i].unwrap()];
                    (layers::fc_forward(&x, state)?, Aux::None)
                }
                LayerSpec::MaxPool(p) => {
                    let (y, arg) = layers::maxpool_forward(&x, p)?;
                    (y, Aux::Argmax(arg))
                }
                LayerSpec::Lrn(l) => {
                    let (y, scale) = layers::lrn_forward(&x, l)?;
                    (y, Aux::Scale(scale))
                }
                LayerSpec::Relu => (layers::relu(&x), Aux::None),
                LayerSpec::Dropout { p } => match &mut mode {
                    ForwardMode::Eval => (x.clone(), Aux::Mask(None)),
                    ForwardMode::Train(rng) => {
                        let (y, mask) = layers::dropout_forward(&x, *p, DropoutMode::Train, &mut **rng);
                        (y, Aux::Mask(mask))
                    }
                    ForwardMode::Replay(masks) => match masks.get(i).and_then(Option::as_ref) {
                        Some(mask) => (layers::apply_mask(&x, mask), Aux::Mask(Some(mask.clone()))),
                        None => (x.clone(), Aux::Mask(None)),
                    },
                },
                LayerSpec::SoftmaxXent => break,
            };
            inputs.push(std::mem::replace(&mut x, y));
            aux.push(a);
        }
        Ok(ForwardCache {
            inputs,
            aux,
            logits: x,
        })
    }

    /// Eval-mode logits for one image.
    pub fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
        Ok(self.forward(image, ForwardMode::Eval)?.logits)
    }

    /// Index of the first trainable weight layer in spec order, if any.
    fn lowest_trainable(&self) -> Option<usize> {
        self.slot
            .iter()
            .enumerate()
            .find(|(_, s)| s.is_some_and(|o| !self.layers[o].frozen))
            .map(|(i, _)| i)
    }

    /// Back-propagates the cross-entropy loss of `label` through a cached
    /// forward pass, adding parameter gradients into `grads`. Returns the loss.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        label: usize,
        grads: &mut Gradients<T>,
    ) -> Result<T, ShapeError> {
        let (loss, mut g) = layers::softmax_xent(&cache.logits, label)?;
        let Some(stop) = self.lowest_trainable() else {
            return Ok(loss);
        };
        for i in (stop..cache.inputs.len()).rev() {
            let input = &cache.inputs[i];
            let need_input = i > stop;
            match (&self.spec.layers()[i], &cache.aux[i]) {
                (LayerSpec::Conv(c), _) => {
                    let ordinal = self.slot[i].unwrap();
                    let state = &self.layers[ordinal];
                    let want = Want {
                        input: need_input,
                        params: !state.frozen,
                    };
                    let pg = layers::conv_backward(input, &state.weights, c, &g, want)?;
                    accumulate(grads, ordinal, pg.weights, pg.bias);
                    match pg.input {
                        Some(gi) => g = gi,
                        None => break,
                    }
                }
                (LayerSpec::FullyConnected { .. }, _) => {
                    let ordinal = self.slot[i].unwrap();
                    let state = &self.layers[ordinal];
                    let want = Want {
                        input: need_input,
                        params: !state.frozen,
                    };
                    let pg = layers::fc_backward(input, &state.weights, &g, want)?;
                    accumulate(grads, ordinal, pg.weights, pg.bias);
                    match pg.input {
                        Some(gi) => g = gi,
                        None => break,
                    }
                }
                (LayerSpec::MaxPool(_), Aux::Argmax(arg)) => {
                    g = layers::maxpool_backward(input.shape(), arg, &g);
                }
                (LayerSpec::Lrn(l), Aux::Scale(scale)) => {
                    g = layers::lrn_backward(input, scale, l, &g)?;
                }
                (LayerSpec::Relu, _) => g = layers::relu_backward(input, &g),
                (LayerSpec::Dropout { .. }, Aux::Mask(mask)) => {
                    if let Some(mask) = mask {
                        g = layers::apply_mask(&g, mask);
                    }
                }
                _ => unreachable!("cache does not match the layer stack"),
            }
        }
        Ok(loss)
    }

    /// Mean loss and mean gradient over a minibatch. Examples are processed in
    /// order so the reduction is deterministic.
    pub fn batch_gradients<'b>(
        &self,
        batch: impl IntoIterator<Item = (&'b Tensor<T>, usize)>,
        rng: &mut dyn RngCore,
    ) -> Result<(T, Gradients<T>), ShapeError> {
        let mut grads = Gradients::zeros_for(self);
        let mut total = T::zero();
        let mut count = 0usize;
        for (image, label) in batch {
            let cache = self.forward(image, ForwardMode::Train(&mut *rng))?;
            total = total + self.backward(&cache, label, &mut grads)?;
            count += 1;
        }
        if count > 0 {
            let inv = T::one() / T::from(count).unwrap();
            grads.scale(inv);
            total = total * inv;
        }
        Ok((total, grads))
    }
}

fn accumulate<T: Scalar>(
    grads: &mut Gradients<T>,
    ordinal: usize,
    weights: Option<Tensor<T>>,
    bias: Option<Tensor<T>>,
) {
    if let (Some(Some((gw, gb))), Some(w), Some(b)) = (grads.layers.get_mut(ordinal), weights, bias) {
        gw.add_assign(&w);
        gb.add_assign(&b);
    }
}
