//! A static layer graph with hand-written backward passes.
//!
//! Layers are listed in topological order; each names its inputs either as
//! the network input or an earlier layer, which is enough to express the
//! skip fusions of the FCN family. The trailing softmax layer is applied by
//! the loss and by inference, never inside `forward`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{weighted_softmax_loss, ClassWeights};
use super::ops;
use super::params::Params;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::gridmap::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Relu,
    MaxPool,
    Deconv,
    FuseSum,
    Score1x1,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Input,
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<Source>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    fn base(name: &str, kind: LayerKind, inputs: Vec<Source>) -> Self {
        LayerSpec {
            name: name.to_owned(),
            kind,
            inputs,
            kernel: 0,
            stride: 1,
            pad: 0,
            in_channels: 0,
            out_channels: 0,
        }
    }

    /// Square `kernel` convolution, stride 1, "same" padding.
    pub fn conv(name: &str, input: Source, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec {
            kernel,
            pad: kernel / 2,
            in_channels,
            out_channels,
            ..Self::base(name, LayerKind::Conv, vec![input])
        }
    }

    pub fn relu(name: &str, input: Source) -> Self {
        Self::base(name, LayerKind::Relu, vec![input])
    }

    pub fn maxpool(name: &str, input: Source) -> Self {
        LayerSpec {
            kernel: 2,
            stride: 2,
            ..Self::base(name, LayerKind::MaxPool, vec![input])
        }
    }

    pub fn score(name: &str, input: Source, in_channels: usize, classes: usize) -> Self {
        LayerSpec {
            kernel: 1,
            in_channels,
            out_channels: classes,
            ..Self::base(name, LayerKind::Score1x1, vec![input])
        }
    }

    /// Learned upsampling by `stride` with a `2·stride` kernel.
    pub fn deconv(name: &str, input: Source, channels: usize, stride: usize) -> Self {
        LayerSpec {
            kernel: 2 * stride,
            stride,
            pad: stride / 2,
            in_channels: channels,
            out_channels: channels,
            ..Self::base(name, LayerKind::Deconv, vec![input])
        }
    }

    pub fn fuse_sum(name: &str, a: Source, b: Source) -> Self {
        Self::base(name, LayerKind::FuseSum, vec![a, b])
    }

    pub fn softmax(name: &str, input: Source) -> Self {
        Self::base(name, LayerKind::Softmax, vec![input])
    }

    fn has_bias(&self) -> bool {
        matches!(self.kind, LayerKind::Conv | LayerKind::Score1x1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub in_channels: usize,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Checks wiring and channel/stride consistency.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::arg("network has no layers"));
        }
        let mut channels = Vec::with_capacity(self.layers.len());
        let mut scales = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let src = |s: &Source| -> Result<(usize, f64)> {
                match *s {
                    Source::Input => Ok((self.in_channels, 1.0)),
                    Source::Layer(j) if j < i => Ok((channels[j], scales[j])),
                    Source::Layer(j) => Err(Error::arg(format!("layer {} reads layer {j}, which is not earlier", l.name))),
                }
            };
            let want_inputs = if l.kind == LayerKind::FuseSum { 2 } else { 1 };
            if l.inputs.len() != want_inputs {
                return Err(Error::arg(format!("layer {} needs {want_inputs} inputs", l.name)));
            }
            if l.stride == 0 {
                return Err(Error::arg(format!("layer {} has stride 0", l.name)));
            }
            let (c, s) = src(&l.inputs[0])?;
            let (out_c, out_s) = match l.kind {
                LayerKind::Conv | LayerKind::Score1x1 => {
                    if c != l.in_channels {
                        return Err(Error::shape(format!("layer {} expects {} channels, gets {c}", l.name, l.in_channels)));
                    }
                    (l.out_channels, s * l.stride as f64)
                }
                LayerKind::Deconv => {
                    if c != l.in_channels || l.kernel != 2 * l.stride {
                        return Err(Error::shape(format!("layer {}: bad deconv geometry", l.name)));
                    }
                    (l.out_channels, s / l.stride as f64)
                }
                LayerKind::MaxPool => (c, s * 2.0),
                LayerKind::Relu | LayerKind::Softmax => (c, s),
                LayerKind::FuseSum => {
                    let (c2, s2) = src(&l.inputs[1])?;
                    if c2 != c || s2 != s {
                        return Err(Error::shape(format!(
                            "layer {} fuses mismatched maps ({c} ch @ /{s} vs {c2} ch @ /{s2})",
                            l.name
                        )));
                    }
                    (c, s)
                }
            };
            if l.kind == LayerKind::Softmax && i + 1 != self.layers.len() {
                return Err(Error::arg("softmax must be the last layer"));
            }
            channels.push(out_c);
            scales.push(out_s);
        }
        let last = self.layers.len() - 1;
        if channels[last] != self.classes {
            return Err(Error::shape(format!("network emits {} channels, expected {}", channels[last], self.classes)));
        }
        if scales[last] != 1.0 {
            return Err(Error::shape(format!("network output is at scale 1/{}, expected full resolution", scales[last])));
        }
        Ok(())
    }

    /// Product of all pooling strides along the deepest path; input sides
    /// must be divisible by it.
    pub fn total_downsample(&self) -> usize {
        let mut scale = vec![1usize; self.layers.len()];
        let mut best = 1;
        for (i, l) in self.layers.iter().enumerate() {
            let s = match l.inputs[0] {
                Source::Input => 1,
                Source::Layer(j) => scale[j],
            };
            scale[i] = match l.kind {
                LayerKind::MaxPool => s * 2,
                LayerKind::Conv | LayerKind::Score1x1 => s * l.stride,
                _ => s,
            };
            best = best.max(scale[i]);
        }
        best
    }

    /// Static multiply-add count (×2) of one forward pass on an `h × w` input.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let mut dims: Vec<(usize, usize, usize)> = Vec::with_capacity(self.layers.len());
        let mut total = 0u64;
        for l in &self.layers {
            let (c, ih, iw) = match l.inputs[0] {
                Source::Input => (self.in_channels, h, w),
                Source::Layer(j) => dims[j],
            };
            let out = match l.kind {
                LayerKind::Conv | LayerKind::Score1x1 => {
                    let oh = (ih + 2 * l.pad - l.kernel) / l.stride + 1;
                    let ow = (iw + 2 * l.pad - l.kernel) / l.stride + 1;
                    total += 2 * (l.out_channels * c * l.kernel * l.kernel * oh * ow) as u64;
                    (l.out_channels, oh, ow)
                }
                LayerKind::Deconv => {
                    total += 2 * (l.in_channels * l.out_channels * l.kernel * l.kernel * ih * iw) as u64;
                    (l.out_channels, ih * l.stride, iw * l.stride)
                }
                LayerKind::MaxPool => {
                    total += (c * ih * iw) as u64;
                    (c, ih / 2, iw / 2)
                }
                LayerKind::Relu | LayerKind::FuseSum | LayerKind::Softmax => {
                    total += (c * ih * iw) as u64;
                    (c, ih, iw)
                }
            };
            dims.push(out);
        }
        total
    }
}

/// Activations of one forward pass.
pub struct Forward<F> {
    pub activations: Vec<Tensor<F>>,
    argmax: Vec<Option<Vec<usize>>>,
    logits_layer: usize,
}

impl<F: Real> Forward<F> {
    pub fn logits(&self) -> &Tensor<F> {
        &self.activations[self.logits_layer]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<F> {
    spec: NetworkSpec,
    params: Params<F>,
    /// `(weight slot, bias slot)` per layer.
    slots: Vec<(Option<usize>, Option<usize>)>,
}

impl<F: Real> Network<F> {
    /// He-uniform convolutions, bilinear deconvolutions, zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut slots = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let w = match l.kind {
                LayerKind::Conv | LayerKind::Score1x1 => {
                    let fan_in = (l.in_channels * l.kernel * l.kernel) as f64;
                    let bound = (6.0 / fan_in).sqrt();
                    let shape = [l.out_channels, l.in_channels, l.kernel, l.kernel];
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| F::from_f64(rng.gen_range(-bound..bound))).collect();
                    Some(params.push(format!("{}.weight", l.name), Tensor::from_vec(&shape, data)?))
                }
                LayerKind::Deconv => Some(params.push(format!("{}.weight", l.name), ops::bilinear_kernel(l.in_channels, l.stride))),
                _ => None,
            };
            let b = l
                .has_bias()
                .then(|| params.push(format!("{}.bias", l.name), Tensor::zeros(&[l.out_channels])));
            slots.push((w, b));
        }
        Ok(Network { spec, params, slots })
    }

    /// Replaces the parameters, checking names and shapes against a fresh
    /// initialisation.
    pub fn with_params(spec: NetworkSpec, params: Params<F>) -> Result<Self> {
        let template = Self::init(spec, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::shape(format!(
                "weights hold {} tensors, network {} needs {}",
                params.len(),
                template.spec.name,
                template.params.len()
            )));
        }
        for (a, b) in template.params.iter().zip(params.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::shape(format!(
                    "weight tensor {} {:?} does not match expected {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        Ok(Network { params, ..template })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<F> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn cast<G: Real>(&self) -> Network<G> {
        Network {
            spec: self.spec.clone(),
            params: self.params.cast(),
            slots: self.slots.clone(),
        }
    }

    fn check_input(&self, input: &Tensor<F>) -> Result<()> {
        let (_, c, h, w) = input.dims4()?;
        let d = self.spec.total_downsample();
        if c != self.spec.in_channels || h % d != 0 || w % d != 0 {
            return Err(Error::shape(format!(
                "{} needs {} channels and sides divisible by {d}, got {c}x{h}x{w}",
                self.spec.name, self.spec.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor<F>) -> Result<Forward<F>> {
        self.check_input(input)?;
        let n = self.spec.layers.len();
        let mut acts: Vec<Tensor<F>> = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        let mut logits_layer = n - 1;
        for (i, l) in self.spec.layers.iter().enumerate() {
            let src = |s: Source| -> &Tensor<F> {
                match s {
                    Source::Input => input,
                    Source::Layer(j) => &acts[j],
                }
            };
            let x = src(l.inputs[0]);
            let (w, b) = self.slots[i];
            let mut pool_idx = None;
            let out = match l.kind {
                LayerKind::Conv | LayerKind::Score1x1 => {
                    ops::conv2d(x, self.params.get(w.unwrap()), b.map(|s| self.params.get(s)), l.stride, l.pad)?
                }
                LayerKind::Relu => ops::relu(x),
                LayerKind::MaxPool => {
                    let (y, idx) = ops::maxpool2x2(x)?;
                    pool_idx = Some(idx);
                    y
                }
                LayerKind::Deconv => ops::deconv2d(x, self.params.get(w.unwrap()), l.stride)?,
                LayerKind::FuseSum => ops::fuse_sum(x, src(l.inputs[1]))?,
                LayerKind::Softmax => {
                    // logits stay un-normalised; consumers apply softmax
                    logits_layer = match l.inputs[0] {
                        Source::Layer(j) => j,
                        Source::Input => return Err(Error::arg("softmax directly on the input")),
                    };
                    Tensor::zeros(&[0])
                }
            };
            acts.push(out);
            argmax.push(pool_idx);
        }
        Ok(Forward {
            activations: acts,
            argmax,
            logits_layer,
        })
    }

    pub fn logits(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let mut fw = self.forward(input)?;
        Ok(fw.activations.swap_remove(fw.logits_layer))
    }

    /// Backpropagates `grad_logits`; returns per-parameter gradients (in
    /// parameter order) and the gradient with respect to the input.
    pub fn backward(&self, input: &Tensor<F>, fw: &Forward<F>, grad_logits: Tensor<F>) -> Result<(Vec<Tensor<F>>, Tensor<F>)> {
        let n = self.spec.layers.len();
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; n];
        let mut grad_input = Tensor::zeros(input.shape());
        let mut param_grads = self.params.zeros_like();
        if grad_logits.shape() != fw.logits().shape() {
            return Err(Error::shape(format!(
                "logit gradient {:?} vs logits {:?}",
                grad_logits.shape(),
                fw.logits().shape()
            )));
        }
        grads[fw.logits_layer] = Some(grad_logits);

        fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], grad_input: &mut Tensor<F>, to: Source, g: Tensor<F>) -> Result<()> {
            match to {
                Source::Input => grad_input.add_assign(&g),
                Source::Layer(j) => match &mut grads[j] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => {
                        *slot = Some(g);
                        Ok(())
                    }
                },
            }
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let l = &self.spec.layers[i];
            let src_act = |s: Source| -> &Tensor<F> {
                match s {
                    Source::Input => input,
                    Source::Layer(j) => &fw.activations[j],
                }
            };
            let x = src_act(l.inputs[0]);
            let (w, b) = self.slots[i];
            match l.kind {
                LayerKind::Conv | LayerKind::Score1x1 => {
                    let cg = ops::conv2d_backward(x, self.params.get(w.unwrap()), l.stride, l.pad, &g)?;
                    param_grads[w.unwrap()].add_assign(&cg.weight)?;
                    if let Some(bs) = b {
                        param_grads[bs].add_assign(&cg.bias)?;
                    }
                    accumulate(&mut grads, &mut grad_input, l.inputs[0], cg.input)?;
                }
                LayerKind::Relu => {
                    let gi = ops::relu_backward(x, &g)?;
                    accumulate(&mut grads, &mut grad_input, l.inputs[0], gi)?;
                }
                LayerKind::MaxPool => {
                    let idx = fw.argmax[i].as_ref().expect("pool layers record argmax");
                    let gi = ops::maxpool2x2_backward(x.shape(), idx, &g)?;
                    accumulate(&mut grads, &mut grad_input, l.inputs[0], gi)?;
                }
                LayerKind::Deconv => {
                    let dg = ops::deconv2d_backward(x, self.params.get(w.unwrap()), l.stride, &g)?;
                    param_grads[w.unwrap()].add_assign(&dg.weight)?;
                    accumulate(&mut grads, &mut grad_input, l.inputs[0], dg.input)?;
                }
                LayerKind::FuseSum => {
                    accumulate(&mut grads, &mut grad_input, l.inputs[0], g.clone())?;
                    accumulate(&mut grads, &mut grad_input, l.inputs[1], g)?;
                }
                LayerKind::Softmax => {}
            }
        }
        Ok((param_grads, grad_input))
    }

    /// Weighted loss and its parameter gradients for one batch.
    pub fn loss_and_grads(&self, input: &Tensor<F>, labels: &[Label], weights: &ClassWeights) -> Result<(F, Vec<Tensor<F>>)> {
        let fw = self.forward(input)?;
        let (loss, grad) = weighted_softmax_loss(fw.logits(), labels, weights)?;
        let (grads, _) = self.backward(input, &fw, grad)?;
        Ok((loss, grads))
    }

    pub fn loss(&self, input: &Tensor<F>, labels: &[Label], weights: &ClassWeights) -> Result<F> {
        let logits = self.logits(input)?;
        Ok(weighted_softmax_loss(&logits, labels, weights)?.0)
    }
}

/// `|a - n| / max(|a| + |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest relative error between backprop and central differences over
/// every parameter of `net`.
pub fn grad_check(net: &Network<f64>, input: &Tensor<f64>, labels: &[Label], weights: &ClassWeights, eps: f64) -> Result<f64> {
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::arg(format!("eps must be in [1e-6, 1e-4], got {eps}")));
    }
    let (_, analytic) = net.loss_and_grads(input, labels, weights)?;
    let mut probe = net.clone();
    let mut worst = 0f64;
    for (slot, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let orig = probe.params.get(slot).data()[k];
            probe.params.get_mut(slot).data_mut()[k] = orig + eps;
            let up = probe.loss(input, labels, weights)?;
            probe.params.get_mut(slot).data_mut()[k] = orig - eps;
            let down = probe.loss(input, labels, weights)?;
            probe.params.get_mut(slot).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Same comparison for the gradient with respect to the network input.
pub fn grad_check_input(net: &Network<f64>, input: &Tensor<f64>, labels: &[Label], weights: &ClassWeights, eps: f64) -> Result<f64> {
    let fw = net.forward(input)?;
    let (_, g) = weighted_softmax_loss(fw.logits(), labels, weights)?;
    let (_, analytic) = net.backward(input, &fw, g)?;
    let mut x = input.clone();
    let mut worst = 0f64;
    for k in 0..x.len() {
        let orig = x.data()[k];
        x.data_mut()[k] = orig + eps;
        let up = net.loss(&x, labels, weights)?;
        x.data_mut()[k] = orig - eps;
        let down = net.loss(&x, labels, weights)?;
        x.data_mut()[k] = orig;
        worst = worst.max(relative_error(analytic.data()[k], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(layers: Vec<LayerSpec>, in_channels: usize) -> NetworkSpec {
        NetworkSpec {
            name: "tiny".into(),
            in_channels,
            classes: 2,
            layers,
        }
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_labels(n: usize, seed: u64) -> Vec<Label> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Label::from(rng.gen_bool(0.3))).collect()
    }

    #[test]
    fn single_1x1_conv_gradients() {
        let spec = tiny_spec(
            vec![
                LayerSpec::score("score", Source::Input, 3, 2),
                LayerSpec::softmax("prob", Source::Layer(0)),
            ],
            3,
        );
        let net = Network::<f64>::init(spec, 1).unwrap();
        let x = random_input(&[1, 3, 4, 4], 2);
        let y = random_labels(16, 3);
        let err = grad_check(&net, &x, &y, &ClassWeights::dynamic(5.0).unwrap(), 1e-5).unwrap();
        assert!(err < 1e-7, "max rel err {err}");
    }

    #[test]
    fn two_layer_conv_relu_gradients() {
        let spec = tiny_spec(
            vec![
                LayerSpec::conv("conv1", Source::Input, 2, 3, 3),
                LayerSpec::relu("relu1", Source::Layer(0)),
                LayerSpec::conv("conv2", Source::Layer(1), 3, 2, 3),
                LayerSpec::softmax("prob", Source::Layer(2)),
            ],
            2,
        );
        let net = Network::<f64>::init(spec, 4).unwrap();
        let x = random_input(&[1, 2, 5, 5], 5);
        let y = random_labels(25, 6);
        let err = grad_check(&net, &x, &y, &ClassWeights::dynamic(3.0).unwrap(), 1e-5).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
        let err = grad_check_input(&net, &x, &y, &ClassWeights::uniform(), 1e-5).unwrap();
        assert!(err < 1e-4, "input max rel err {err}");
    }

    #[test]
    fn uniform_weights_give_identical_gradients() {
        let spec = tiny_spec(
            vec![
                LayerSpec::conv("conv1", Source::Input, 2, 2, 3),
                LayerSpec::softmax("prob", Source::Layer(0)),
            ],
            2,
        );
        let net = Network::<f64>::init(spec, 9).unwrap();
        let x = random_input(&[1, 2, 4, 4], 10);
        let y = random_labels(16, 11);
        let fw = net.forward(&x).unwrap();
        let (_, gw) = weighted_softmax_loss(fw.logits(), &y, &ClassWeights::uniform()).unwrap();
        let (_, gu) = super::super::loss::softmax_loss(fw.logits(), &y).unwrap();
        let (a, _) = net.backward(&x, &fw, gw).unwrap();
        let (b, _) = net.backward(&x, &fw, gu).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn spec_validation_catches_bad_wiring() {
        let bad_channels = tiny_spec(
            vec![
                LayerSpec::conv("conv1", Source::Input, 4, 2, 3),
                LayerSpec::softmax("prob", Source::Layer(0)),
            ],
            3,
        );
        assert!(bad_channels.validate().is_err());
        let low_res = tiny_spec(
            vec![
                LayerSpec::score("s", Source::Input, 3, 2),
                LayerSpec::maxpool("p", Source::Layer(0)),
                LayerSpec::softmax("prob", Source::Layer(1)),
            ],
            3,
        );
        assert!(low_res.validate().is_err());
        let forward_ref = tiny_spec(
            vec![
                LayerSpec::relu("r", Source::Layer(1)),
                LayerSpec::score("s", Source::Input, 3, 2),
            ],
            3,
        );
        assert!(forward_ref.validate().is_err());
    }
}
