use crate::error::{Error, Result};
use crate::nn::layer::{self, Conv, LayerParams, LayerSpec, Pool};
use crate::nn::loss;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// An ordered chain of layers with their parameters and a per-layer
/// trainable flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    /// Output shape of every layer.
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<LayerParams>>,
    trainable: Vec<bool>,
}

/// Outputs of every layer for one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationRecord {
    pub input: Tensor,
    pub outputs: Vec<Tensor>,
}

impl ActivationRecord {
    /// Output of the last layer (class probabilities for a classifier).
    pub fn output(&self) -> &Tensor {
        self.outputs.last().expect("record of an empty model")
    }

    /// Output of layer `p - 2`: the vector the ensemble averages.
    pub fn features(&self) -> Option<&Tensor> {
        let n = self.outputs.len();
        (n >= 3).then(|| &self.outputs[n - 3])
    }
}

/// Per-layer parameter gradients, shaped like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Option<LayerParams>>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Gradients { layers: model.params.iter().map(|p| p.as_ref().map(|p| p.zeros_like())).collect() }
    }

    pub fn layers(&self) -> &[Option<LayerParams>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.layers
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flatten().flat_map(|p| p.values())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flatten().flat_map(|p| p.values_mut())
    }

    pub fn len(&self) -> usize {
        self.layers.iter().flatten().map(|p| p.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// L2 norm over all layers' entries taken together.
    pub fn l2_norm(&self) -> f64 {
        self.layers.iter().flatten().map(|p| p.squared_norm()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|p| p.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    pub fn is_congruent(&self, other: &Gradients) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => {
                    a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape()
                }
                (None, None) => true,
                _ => false,
            })
    }

    /// `self += other`, elementwise.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if !self.is_congruent(other) {
            return Err(Error::contract("gradient shapes differ"));
        }
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
        Ok(())
    }
}

/// Glorot-uniform weights and zero biases.
fn init_params(spec: &LayerSpec, input: &[usize], rng: &mut RngStream) -> Option<LayerParams> {
    let (wshape, bshape) = spec.param_shapes(input)?;
    let (fan_in, fan_out) = match *spec {
        LayerSpec::Conv2D { out_channels, kernel_h, kernel_w, .. } => {
            let area = kernel_h * kernel_w;
            (area * input[2], area * out_channels)
        }
        LayerSpec::Dense { out_features } => (input[0], out_features),
        _ => unreachable!(),
    };
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut weight = Tensor::zeros(&wshape);
    for w in weight.data_mut() {
        *w = rng.uniform(-limit, limit);
    }
    Some(LayerParams { weight, bias: Tensor::zeros(&bshape) })
}

fn walk_shapes(specs: &[LayerSpec], input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::contract(format!("invalid input shape {input_shape:?}")));
    }
    let mut shapes = Vec::with_capacity(specs.len());
    let mut current = input_shape.to_vec();
    for (i, spec) in specs.iter().enumerate() {
        current = spec.output_shape(&current, i)?;
        shapes.push(current.clone());
    }
    Ok(shapes)
}

impl Model {
    /// Build a classifier with freshly initialized parameters.
    ///
    /// The chain must end in `Dense` followed by `Softmax`.
    pub fn build(specs: &[LayerSpec], input_shape: &[usize], seed: u64) -> Result<Model> {
        let n = specs.len();
        if n < 2 || specs[n - 1] != LayerSpec::Softmax || !matches!(specs[n - 2], LayerSpec::Dense { .. }) {
            return Err(Error::ShapeMismatch {
                layer: n.saturating_sub(1),
                detail: "a classifier must end with Dense followed by Softmax".into(),
            });
        }
        let shapes = walk_shapes(specs, input_shape)?;
        let mut rng = RngStream::new(seed);
        let mut params = Vec::with_capacity(n);
        let mut prev = input_shape;
        for (spec, shape) in specs.iter().zip(&shapes) {
            params.push(init_params(spec, prev, &mut rng));
            prev = shape;
        }
        Ok(Model {
            input_shape: input_shape.to_vec(),
            specs: specs.to_vec(),
            shapes,
            params,
            trainable: vec![true; n],
        })
    }

    /// A chain with all parameters zero. Any layer sequence is accepted as long
    /// as the shapes line up.
    pub fn zeros(specs: &[LayerSpec], input_shape: &[usize]) -> Result<Model> {
        let shapes = walk_shapes(specs, input_shape)?;
        let mut params = Vec::with_capacity(specs.len());
        let mut prev = input_shape;
        for (spec, shape) in specs.iter().zip(&shapes) {
            params.push(spec.param_shapes(prev).map(|(w, b)| LayerParams {
                weight: Tensor::zeros(&w),
                bias: Tensor::zeros(&b),
            }));
            prev = shape;
        }
        Ok(Model {
            input_shape: input_shape.to_vec(),
            specs: specs.to_vec(),
            shapes,
            params,
            trainable: vec![true; specs.len()],
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map(Vec::as_slice).unwrap_or(&self.input_shape)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layer_count(&self) -> usize {
        self.specs.len()
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn set_trainable(&mut self, layer: usize, trainable: bool) {
        self.trainable[layer] = trainable;
    }

    /// Freeze the last `count` layers.
    pub fn freeze_last(&mut self, count: usize) {
        let n = self.trainable.len();
        for t in &mut self.trainable[n.saturating_sub(count)..] {
            *t = false;
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(|p| p.len()).sum()
    }

    /// All parameters, layer by layer, weight before bias.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flatten().flat_map(|p| p.values().copied()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::PayloadShape { expected: self.param_count(), actual: values.len() });
        }
        for (dst, &src) in self.params.iter_mut().flatten().flat_map(|p| p.values_mut()).zip(values) {
            *dst = src;
        }
        Ok(())
    }

    /// True when both models have the same layer chain and input shape.
    pub fn same_architecture(&self, other: &Model) -> bool {
        self.specs == other.specs && self.input_shape == other.input_shape
    }

    pub fn forward(&self, input: &Tensor) -> Result<ActivationRecord> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::contract(format!(
                "input shape {:?} does not match model input {:?}",
                input.shape(),
                self.input_shape
            )));
        }
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.specs.len());
        for i in 0..self.specs.len() {
            let x = if i == 0 { input } else { &outputs[i - 1] };
            let out = self.layer_forward(i, x);
            if !out.is_finite() {
                return Err(Error::NonFinite { layer: i });
            }
            outputs.push(out);
        }
        Ok(ActivationRecord { input: input.clone(), outputs })
    }

    /// Forward pass over a flat example laid out in the model's input shape.
    pub fn forward_slice(&self, input: &[f64]) -> Result<ActivationRecord> {
        let t = Tensor::new(self.input_shape.clone(), input.to_vec())?;
        self.forward(&t)
    }

    /// Final-layer output for a flat example.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        let record = self.forward_slice(input)?;
        Ok(record.outputs.into_iter().last().map(Tensor::into_data).unwrap_or_default())
    }

    fn layer_forward(&self, i: usize, x: &Tensor) -> Tensor {
        let spec = &self.specs[i];
        let mut out = Tensor::zeros(&self.shapes[i]);
        match spec {
            LayerSpec::Conv2D { .. } => {
                let conv = Conv::new(spec, x.shape(), &self.shapes[i]);
                conv.forward(x.data(), self.params[i].as_ref().unwrap(), out.data_mut());
            }
            LayerSpec::MaxPool2D { .. } => {
                Pool::new(spec, x.shape(), &self.shapes[i]).forward(x.data(), out.data_mut());
            }
            LayerSpec::Flatten => out.data_mut().copy_from_slice(x.data()),
            LayerSpec::Dense { .. } => {
                layer::dense_forward(x.data(), self.params[i].as_ref().unwrap(), out.data_mut())
            }
            LayerSpec::ReLU => {
                for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                    *o = v.max(0.0);
                }
            }
            LayerSpec::Softmax => layer::softmax(x.data(), out.data_mut()),
        }
        out
    }

    fn check_record(&self, record: &ActivationRecord) -> Result<()> {
        let ok = record.input.shape() == self.input_shape.as_slice()
            && record.outputs.len() == self.specs.len()
            && record.outputs.iter().zip(&self.shapes).all(|(t, s)| t.shape() == s.as_slice());
        if ok {
            Ok(())
        } else {
            Err(Error::contract("activation record does not belong to this model"))
        }
    }

    /// Gradient of the single-example loss against a one-hot `label`.
    /// Frozen layers get zero-filled gradients.
    pub fn backward(&self, record: &ActivationRecord, label: &[f64]) -> Result<Gradients> {
        self.check_record(record)?;
        if self.specs.last() != Some(&LayerSpec::Softmax) {
            return Err(Error::contract("loss gradient needs a model ending in Softmax"));
        }
        let dprobs = loss::cce_grad(record.output().data(), label)?;
        self.backward_from(record, dprobs)
    }

    /// Backpropagate an arbitrary gradient of the final output.
    pub fn backward_from(&self, record: &ActivationRecord, dout: Vec<f64>) -> Result<Gradients> {
        self.check_record(record)?;
        if dout.len() != record.output().len() {
            return Err(Error::contract("output gradient has the wrong length"));
        }
        let mut grads = Gradients::zeros_like(self);
        // input gradients are only needed down to the first trainable
        // parameterized layer
        let lowest = (0..self.specs.len())
            .find(|&i| self.trainable[i] && self.params[i].is_some())
            .unwrap_or(self.specs.len());
        let mut upstream = dout;
        for i in (lowest..self.specs.len()).rev() {
            let x = if i == 0 { &record.input } else { &record.outputs[i - 1] };
            let need_dx = i > lowest;
            let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
            let grad = if self.trainable[i] { grads.layers[i].as_mut() } else { None };
            let spec = &self.specs[i];
            match spec {
                LayerSpec::Conv2D { .. } => {
                    let conv = Conv::new(spec, x.shape(), &self.shapes[i]);
                    let p = self.params[i].as_ref().unwrap();
                    conv.backward(x.data(), p, &upstream, grad, need_dx.then_some(&mut dx[..]));
                }
                LayerSpec::Dense { .. } => {
                    let p = self.params[i].as_ref().unwrap();
                    layer::dense_backward(x.data(), p, &upstream, grad, need_dx.then_some(&mut dx[..]));
                }
                LayerSpec::MaxPool2D { .. } => {
                    if need_dx {
                        Pool::new(spec, x.shape(), &self.shapes[i]).backward(x.data(), &upstream, &mut dx);
                    }
                }
                LayerSpec::Flatten => {
                    if need_dx {
                        dx.copy_from_slice(&upstream);
                    }
                }
                LayerSpec::ReLU => {
                    if need_dx {
                        for ((d, &u), &v) in dx.iter_mut().zip(&upstream).zip(x.data()) {
                            *d = if v > 0.0 { u } else { 0.0 };
                        }
                    }
                }
                LayerSpec::Softmax => {
                    if need_dx {
                        layer::softmax_backward(record.outputs[i].data(), &upstream, &mut dx);
                    }
                }
            }
            if need_dx && dx.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: i });
            }
            upstream = dx;
        }
        Ok(grads)
    }

    /// Forward and backward for one labelled example. Returns the gradient,
    /// the example's loss and its predicted probabilities.
    pub fn example_gradient(&self, input: &[f64], class: usize) -> Result<(Gradients, f64, Vec<f64>)> {
        let classes = self.output_shape()[0];
        if class >= classes {
            return Err(Error::contract(format!("label {class} out of range for {classes} classes")));
        }
        let label = loss::one_hot(class, classes);
        let record = self.forward_slice(input)?;
        let grads = self.backward(&record, &label)?;
        let probs = record.outputs.last().unwrap().data().to_vec();
        let l = loss::loss_unchecked(&probs, &label);
        Ok((grads, l, probs))
    }

    /// Mean gradient and mean loss over a batch of labelled examples.
    pub fn batch_gradient(&self, inputs: &[&[f64]], classes: &[usize]) -> Result<(Gradients, f64)> {
        if inputs.is_empty() || inputs.len() != classes.len() {
            return Err(Error::contract("batch must be non-empty with one label per input"));
        }
        let mut total = Gradients::zeros_like(self);
        let mut loss_sum = 0.0;
        for (x, &c) in inputs.iter().zip(classes) {
            let (g, l, _) = self.example_gradient(x, c)?;
            total.accumulate(&g)?;
            loss_sum += l;
        }
        let n = inputs.len() as f64;
        total.scale(1.0 / n);
        Ok((total, loss_sum / n))
    }

    /// Split into layers `1..=p-2` (backbone) and `p-1, p` (head).
    pub fn split(&self) -> Result<(Model, Model)> {
        let p = self.specs.len();
        if p < 3 {
            return Err(Error::contract(format!("cannot split a model with {p} layers")));
        }
        let cut = p - 2;
        let backbone = Model {
            input_shape: self.input_shape.clone(),
            specs: self.specs[..cut].to_vec(),
            shapes: self.shapes[..cut].to_vec(),
            params: self.params[..cut].to_vec(),
            trainable: self.trainable[..cut].to_vec(),
        };
        let head = Model {
            input_shape: self.shapes[cut - 1].clone(),
            specs: self.specs[cut..].to_vec(),
            shapes: self.shapes[cut..].to_vec(),
            params: self.params[cut..].to_vec(),
            trainable: self.trainable[cut..].to_vec(),
        };
        Ok((backbone, head))
    }

    /// Stack `head` on top of `backbone`.
    pub fn compose(backbone: &Model, head: &Model) -> Result<Model> {
        if backbone.output_shape() != head.input_shape() {
            return Err(Error::ShapeMismatch {
                layer: backbone.layer_count(),
                detail: format!(
                    "backbone emits {:?} but head expects {:?}",
                    backbone.output_shape(),
                    head.input_shape()
                ),
            });
        }
        let mut m = backbone.clone();
        m.specs.extend_from_slice(&head.specs);
        m.shapes.extend(head.shapes.iter().cloned());
        m.params.extend(head.params.iter().cloned());
        m.trainable.extend_from_slice(&head.trainable);
        Ok(m)
    }
}

/// Reference classifier for 28×28 grayscale digits.
pub fn reference_mnist() -> (Vec<LayerSpec>, Vec<usize>) {
    (reference_chain(10), vec![28, 28, 1])
}

/// Same chain sized for `height`×`width` grayscale images and `classes` outputs.
pub fn reference_image(height: usize, width: usize, classes: usize) -> (Vec<LayerSpec>, Vec<usize>) {
    (reference_chain(classes), vec![height, width, 1])
}

fn reference_chain(classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(8, 3),
        LayerSpec::ReLU,
        LayerSpec::pool(2),
        LayerSpec::conv(16, 3),
        LayerSpec::ReLU,
        LayerSpec::pool(2),
        LayerSpec::Flatten,
        LayerSpec::dense(32),
        LayerSpec::ReLU,
        LayerSpec::dense(classes),
        LayerSpec::Softmax,
    ]
}
