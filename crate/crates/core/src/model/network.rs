//! Sequential networks built from 3x3 convolutions, ReLU, 2x2 max-pooling and
//! affine layers, with a hand-written reverse pass.
//!
//! Tensors are flat channel-major buffers for a single sample. Batches are
//! processed sample by sample, so a sample's logits and gradients never depend
//! on what else is in its batch.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scalar::{matmul, Mat, Scalar};
use super::LabelDistribution;
use crate::error::{Error, Result};
use crate::rng;

/// Architecture of a network; enough to rebuild it from a parameter file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchDescriptor {
    /// conv(3→32) relu conv(32→32) relu pool conv(32→64) relu conv(64→64) relu
    /// pool, affine(→256) relu, affine(→classes).
    DeskNet {
        num_classes: usize,
        channels: usize,
        image_size: usize,
    },
    /// Single affine map from the flattened image to logits.
    Linear {
        num_classes: usize,
        input_shape: [usize; 3],
    },
    /// affine(→hidden) relu affine(→classes) on the flattened image.
    Mlp {
        num_classes: usize,
        input_shape: [usize; 3],
        hidden: usize,
    },
}

impl ArchDescriptor {
    pub fn num_classes(&self) -> usize {
        match self {
            ArchDescriptor::DeskNet { num_classes, .. }
            | ArchDescriptor::Linear { num_classes, .. }
            | ArchDescriptor::Mlp { num_classes, .. } => *num_classes,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            ArchDescriptor::DeskNet {
                channels,
                image_size,
                ..
            } => [*channels, *image_size, *image_size],
            ArchDescriptor::Linear { input_shape, .. } | ArchDescriptor::Mlp { input_shape, .. } => *input_shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named parameter tensors stored in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry>,
    data: Vec<T>,
}

impl<T: Scalar> ParamSet<T> {
    fn empty() -> Self {
        Self {
            entries: Vec::new(),
            data: Vec::new(),
        }
    }

    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.data.len();
        let entry = ParamEntry { name, shape, offset };
        self.data.resize(offset + entry.len(), T::ZERO);
        self.entries.push(entry);
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.data[e.offset..e.offset + e.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let e = self.entries.iter().find(|e| e.name == name)?.clone();
        Some(&mut self.data[e.offset..e.offset + e.len()])
    }

    fn slice(&self, idx: usize) -> &[T] {
        let e = &self.entries[idx];
        &self.data[e.offset..e.offset + e.len()]
    }

    /// SHA-256 of the little-endian bytes of every value (as f64).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.data {
            h.update(v.to_f64().to_le_bytes());
        }
        hex(&h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerKind {
    Conv3x3 {
        cin: usize,
        cout: usize,
        height: usize,
        width: usize,
    },
    Relu,
    MaxPool2 {
        channels: usize,
        height: usize,
        width: usize,
    },
    Linear {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    name: String,
    kind: LayerKind,
    weight: Option<usize>,
    bias: Option<usize>,
    in_len: usize,
    out_len: usize,
}

enum Aux<T> {
    None,
    Cols(Vec<T>),
    Argmax(Vec<u32>),
}

struct Tape<T> {
    outputs: Vec<Vec<T>>,
    aux: Vec<Aux<T>>,
}

/// Gradient information for one sample.
#[derive(Debug, Clone)]
pub struct SampleGrad<T> {
    pub loss: T,
    pub logits: Vec<T>,
    pub input_grad: Option<Vec<T>>,
}

/// The differentiable classifier interface used by attacks, training and
/// evaluation. Implementations must be deterministic in evaluation mode.
pub trait Classifier<T: Scalar>: Send + Sync {
    fn descriptor(&self) -> &ArchDescriptor;
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
    /// Logits for a single flattened input.
    fn logits(&self, input: &[T]) -> Result<Vec<T>>;
    /// Cross-entropy against `target` for one input, scaled by `scale`.
    /// Parameter gradients are added into `param_grad` when given; the input
    /// gradient is returned when `want_input` is set.
    fn loss_and_grad(
        &self,
        input: &[T],
        target: &LabelDistribution,
        scale: T,
        param_grad: Option<&mut [T]>,
        want_input: bool,
    ) -> Result<SampleGrad<T>>;

    fn num_classes(&self) -> usize {
        self.descriptor().num_classes()
    }

    fn input_shape(&self) -> [usize; 3] {
        self.descriptor().input_shape()
    }

    fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }
}

/// A sequential network with owned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    descriptor: ArchDescriptor,
    layers: Vec<Layer>,
    params: ParamSet<T>,
}

struct Builder<T> {
    layers: Vec<Layer>,
    params: ParamSet<T>,
    shape: [usize; 3],
}

impl<T: Scalar> Builder<T> {
    fn conv(&mut self, name: &str, cout: usize) {
        let [cin, height, width] = self.shape;
        let weight = self.params.push(format!("{name}.weight"), vec![cout, cin, 3, 3]);
        let bias = self.params.push(format!("{name}.bias"), vec![cout]);
        self.layers.push(Layer {
            name: name.into(),
            kind: LayerKind::Conv3x3 {
                cin,
                cout,
                height,
                width,
            },
            weight: Some(weight),
            bias: Some(bias),
            in_len: cin * height * width,
            out_len: cout * height * width,
        });
        self.shape = [cout, height, width];
    }

    fn relu(&mut self, name: &str) {
        let len = self.shape.iter().product();
        self.layers.push(Layer {
            name: name.into(),
            kind: LayerKind::Relu,
            weight: None,
            bias: None,
            in_len: len,
            out_len: len,
        });
    }

    fn pool(&mut self, name: &str) {
        let [channels, height, width] = self.shape;
        self.layers.push(Layer {
            name: name.into(),
            kind: LayerKind::MaxPool2 {
                channels,
                height,
                width,
            },
            weight: None,
            bias: None,
            in_len: channels * height * width,
            out_len: channels * (height / 2) * (width / 2),
        });
        self.shape = [channels, height / 2, width / 2];
    }

    fn linear(&mut self, name: &str, outputs: usize) {
        let inputs: usize = self.shape.iter().product();
        let weight = self.params.push(format!("{name}.weight"), vec![outputs, inputs]);
        let bias = self.params.push(format!("{name}.bias"), vec![outputs]);
        self.layers.push(Layer {
            name: name.into(),
            kind: LayerKind::Linear { inputs, outputs },
            weight: Some(weight),
            bias: Some(bias),
            in_len: inputs,
            out_len: outputs,
        });
        self.shape = [outputs, 1, 1];
    }
}

/// Build the desk-scale reference network, initialised from a stream seeded
/// by `seed` (see [`Network::from_descriptor`]).
pub fn build_reference_net(num_classes: usize, image_size: usize, seed: u64) -> Result<Network<f32>> {
    Network::from_descriptor(
        ArchDescriptor::DeskNet {
            num_classes,
            channels: 3,
            image_size,
        },
        seed,
    )
}

/// Scale of the final layer's initial weights relative to He-normal.
pub const HEAD_INIT_SCALE: f64 = 0.01;

impl<T: Scalar> Network<T> {
    /// Construct and initialise a network for `descriptor`.
    ///
    /// Weights are He-normal, except the final layer whose weights are scaled
    /// by [`HEAD_INIT_SCALE`]. The first layer's biases are set to
    /// `-0.5·Σw` per output unit, which centres mid-grey input; all other
    /// biases start at zero.
    pub fn from_descriptor(descriptor: ArchDescriptor, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(descriptor)?;
        let mut r = rng::stream(seed);
        let weighted: Vec<usize> = (0..net.layers.len()).filter(|&i| net.layers[i].weight.is_some()).collect();
        for (rank, &li) in weighted.iter().enumerate() {
            let layer = &net.layers[li];
            let fan_in = match layer.kind {
                LayerKind::Conv3x3 { cin, .. } => cin * 9,
                LayerKind::Linear { inputs, .. } => inputs,
                _ => unreachable!("only conv and linear layers carry weights"),
            };
            let mut std = (2.0 / fan_in as f64).sqrt();
            if rank + 1 == weighted.len() {
                std *= HEAD_INIT_SCALE;
            }
            let normal = Normal::new(0.0, std).expect("valid std");
            let w = net.params.entries[layer.weight.expect("weighted")].clone();
            for v in &mut net.params.data[w.offset..w.offset + w.len()] {
                *v = T::from_f64(normal.sample(&mut r));
            }
            if rank == 0 {
                let b = net.params.entries[layer.bias.expect("weighted layers have biases")].clone();
                let per = w.len() / b.len();
                for o in 0..b.len() {
                    let sum: f64 = net.params.data[w.offset + o * per..w.offset + (o + 1) * per]
                        .iter()
                        .map(|v| v.to_f64())
                        .sum();
                    net.params.data[b.offset + o] = T::from_f64(-0.5 * sum);
                }
            }
        }
        Ok(net)
    }

    /// All parameters zero.
    pub fn zeroed(descriptor: ArchDescriptor) -> Result<Self> {
        let num_classes = descriptor.num_classes();
        if num_classes < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        let shape = descriptor.input_shape();
        if shape.contains(&0) {
            return Err(Error::invalid("input shape has a zero dimension"));
        }
        let mut b = Builder {
            layers: Vec::new(),
            params: ParamSet::empty(),
            shape,
        };
        match descriptor {
            ArchDescriptor::DeskNet { image_size, .. } => {
                if image_size % 4 != 0 {
                    return Err(Error::invalid(format!(
                        "DeskNet needs an image size divisible by 4, got {image_size}"
                    )));
                }
                b.conv("conv1", 32);
                b.relu("relu1");
                b.conv("conv2", 32);
                b.relu("relu2");
                b.pool("pool1");
                b.conv("conv3", 64);
                b.relu("relu3");
                b.conv("conv4", 64);
                b.relu("relu4");
                b.pool("pool2");
                b.linear("fc1", 256);
                b.relu("relu5");
                b.linear("fc2", num_classes);
            }
            ArchDescriptor::Linear { .. } => b.linear("fc", num_classes),
            ArchDescriptor::Mlp { hidden, .. } => {
                if hidden == 0 {
                    return Err(Error::invalid("hidden layer has no units"));
                }
                b.linear("fc1", hidden);
                b.relu("relu1");
                b.linear("fc2", num_classes);
            }
        }
        Ok(Self {
            descriptor,
            layers: b.layers,
            params: b.params,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            descriptor: self.descriptor.clone(),
            layers: self.layers.clone(),
            params: self.params.cast(),
        }
    }

    /// Names of the layers in execution order.
    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        let expected: usize = self.descriptor.input_shape().iter().product();
        if input.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "input has {} values, network expects {expected}",
                input.len()
            )));
        }
        Ok(())
    }

    fn run_forward(&self, input: &[T], keep: bool) -> Result<(Vec<T>, Option<Tape<T>>)> {
        self.check_input(input)?;
        let mut tape = keep.then(|| Tape {
            outputs: Vec::with_capacity(self.layers.len()),
            aux: Vec::with_capacity(self.layers.len()),
        });
        let mut current: Vec<T> = input.to_vec();
        for layer in &self.layers {
            let (out, aux) = self.layer_forward(layer, &current, keep);
            if !out.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(layer.name.clone()));
            }
            if let Some(t) = tape.as_mut() {
                t.outputs.push(out.clone());
                t.aux.push(aux);
            }
            current = out;
        }
        Ok((current, tape))
    }

    fn layer_forward(&self, layer: &Layer, input: &[T], keep: bool) -> (Vec<T>, Aux<T>) {
        match layer.kind {
            LayerKind::Conv3x3 {
                cin,
                cout,
                height,
                width,
            } => {
                let hw = height * width;
                let cols = im2col(input, cin, height, width);
                let w = self.params.slice(layer.weight.unwrap());
                let b = self.params.slice(layer.bias.unwrap());
                let mut out = vec![T::ZERO; cout * hw];
                for (plane, &bias) in out.chunks_mut(hw).zip(b) {
                    plane.fill(bias);
                }
                matmul(Mat::new(w, cout, cin * 9), Mat::new(&cols, cin * 9, hw), &mut out, true);
                (out, if keep { Aux::Cols(cols) } else { Aux::None })
            }
            LayerKind::Relu => (
                input
                    .iter()
                    .map(|&v| if v > T::ZERO { v } else { T::ZERO })
                    .collect(),
                Aux::None,
            ),
            LayerKind::MaxPool2 {
                channels,
                height,
                width,
            } => {
                let (oh, ow) = (height / 2, width / 2);
                let mut out = Vec::with_capacity(channels * oh * ow);
                let mut arg = Vec::with_capacity(if keep { channels * oh * ow } else { 0 });
                for c in 0..channels {
                    for y in 0..oh {
                        for x in 0..ow {
                            let base = (c * height + 2 * y) * width + 2 * x;
                            let mut best = base;
                            for idx in [base + 1, base + width, base + width + 1] {
                                if input[idx] > input[best] {
                                    best = idx;
                                }
                            }
                            out.push(input[best]);
                            if keep {
                                arg.push(best as u32);
                            }
                        }
                    }
                }
                (out, if keep { Aux::Argmax(arg) } else { Aux::None })
            }
            LayerKind::Linear { inputs, outputs } => {
                let w = self.params.slice(layer.weight.unwrap());
                let mut out = self.params.slice(layer.bias.unwrap()).to_vec();
                matmul(Mat::new(w, outputs, inputs), Mat::new(input, inputs, 1), &mut out, true);
                (out, Aux::None)
            }
        }
    }

    fn run_backward(
        &self,
        input: &[T],
        tape: &Tape<T>,
        dlogits: Vec<T>,
        mut param_grad: Option<&mut [T]>,
        want_input: bool,
    ) -> Option<Vec<T>> {
        let mut grad = dlogits;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let layer_in: &[T] = if i == 0 { input } else { &tape.outputs[i - 1] };
            let need_dx = i > 0 || want_input;
            if !need_dx && param_grad.is_none() {
                return None;
            }
            let mut dx = if need_dx {
                vec![T::ZERO; layer.in_len]
            } else {
                Vec::new()
            };
            match layer.kind {
                LayerKind::Conv3x3 {
                    cin,
                    cout,
                    height,
                    width,
                } => {
                    let hw = height * width;
                    let Aux::Cols(cols) = &tape.aux[i] else {
                        unreachable!("conv tape holds columns")
                    };
                    if let Some(pg) = param_grad.as_deref_mut() {
                        let we = &self.params.entries[layer.weight.unwrap()];
                        matmul(
                            Mat::new(&grad, cout, hw),
                            Mat::new(cols, cin * 9, hw).t(),
                            &mut pg[we.offset..we.offset + we.len()],
                            true,
                        );
                        let be = &self.params.entries[layer.bias.unwrap()];
                        for (g, plane) in pg[be.offset..be.offset + be.len()]
                            .iter_mut()
                            .zip(grad.chunks(hw))
                        {
                            *g += plane.iter().copied().sum::<T>();
                        }
                    }
                    if need_dx {
                        let w = self.params.slice(layer.weight.unwrap());
                        let mut dcols = vec![T::ZERO; cin * 9 * hw];
                        matmul(
                            Mat::new(w, cout, cin * 9).t(),
                            Mat::new(&grad, cout, hw),
                            &mut dcols,
                            false,
                        );
                        col2im(&dcols, cin, height, width, &mut dx);
                    }
                }
                LayerKind::Relu => {
                    if need_dx {
                        for ((d, &g), &o) in dx.iter_mut().zip(&grad).zip(&tape.outputs[i]) {
                            *d = if o > T::ZERO { g } else { T::ZERO };
                        }
                    }
                }
                LayerKind::MaxPool2 { .. } => {
                    if need_dx {
                        let Aux::Argmax(arg) = &tape.aux[i] else {
                            unreachable!("pool tape holds argmax")
                        };
                        for (&g, &a) in grad.iter().zip(arg) {
                            dx[a as usize] += g;
                        }
                    }
                }
                LayerKind::Linear { inputs, outputs } => {
                    if let Some(pg) = param_grad.as_deref_mut() {
                        let we = &self.params.entries[layer.weight.unwrap()];
                        matmul(
                            Mat::new(&grad, outputs, 1),
                            Mat::new(layer_in, 1, inputs),
                            &mut pg[we.offset..we.offset + we.len()],
                            true,
                        );
                        let be = &self.params.entries[layer.bias.unwrap()];
                        for (p, &g) in pg[be.offset..be.offset + be.len()].iter_mut().zip(&grad) {
                            *p += g;
                        }
                    }
                    if need_dx {
                        let w = self.params.slice(layer.weight.unwrap());
                        matmul(
                            Mat::new(w, outputs, inputs).t(),
                            Mat::new(&grad, outputs, 1),
                            &mut dx,
                            false,
                        );
                    }
                }
            }
            grad = dx;
        }
        want_input.then_some(grad)
    }
}

impl<T: Scalar> Classifier<T> for Network<T> {
    fn descriptor(&self) -> &ArchDescriptor {
        &self.descriptor
    }

    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn logits(&self, input: &[T]) -> Result<Vec<T>> {
        Ok(self.run_forward(input, false)?.0)
    }

    fn loss_and_grad(
        &self,
        input: &[T],
        target: &LabelDistribution,
        scale: T,
        param_grad: Option<&mut [T]>,
        want_input: bool,
    ) -> Result<SampleGrad<T>> {
        if target.len() != self.num_classes() {
            return Err(Error::ShapeMismatch(format!(
                "target over {} classes, network has {}",
                target.len(),
                self.num_classes()
            )));
        }
        if let Some(pg) = param_grad.as_deref() {
            if pg.len() != self.params.len() {
                return Err(Error::ShapeMismatch("parameter gradient buffer size".into()));
            }
        }
        let (logits, tape) = self.run_forward(input, true)?;
        let (loss, mut dlogits) = softmax_cross_entropy(&logits, target);
        for d in &mut dlogits {
            *d *= scale;
        }
        let input_grad = self.run_backward(input, &tape.unwrap(), dlogits, param_grad, want_input);
        Ok(SampleGrad {
            loss,
            logits,
            input_grad,
        })
    }
}

/// Loss `-Σ q_i log softmax(z)_i` (log-sum-exp stabilised) and its gradient
/// `softmax(z) - q` with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], target: &LabelDistribution) -> (T, Vec<T>) {
    let max = logits
        .iter()
        .copied()
        .fold(logits[0], |m, v| if v > m { v } else { m });
    let sum: T = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let mut loss = T::ZERO;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &q) in logits.iter().zip(target.weights()) {
        let q = T::from_f64(q);
        if q != T::ZERO {
            loss += q * (lse - z);
        }
        grad.push((z - lse).exp() - q);
    }
    (loss, grad)
}

fn im2col<T: Scalar>(input: &[T], cin: usize, height: usize, width: usize) -> Vec<T> {
    let hw = height * width;
    let mut cols = vec![T::ZERO; cin * 9 * hw];
    for c in 0..cin {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..height {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * width..(sy as usize + 1) * width];
                    let dst = &mut row[y * width..(y + 1) * width];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..width - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..width - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], cin: usize, height: usize, width: usize, out: &mut [T]) {
    let hw = height * width;
    for c in 0..cin {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..height {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * width..(sy as usize + 1) * width];
                    let src = &row[y * width..(y + 1) * width];
                    match kx {
                        0 => dst[..width - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, &s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..width - 1])
                            .for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
}

/// Random-normal parameter perturbation helper for tests and fixtures.
pub fn randomize_params<T: Scalar, R: Rng>(params: &mut ParamSet<T>, std: f64, r: &mut R) {
    let normal = Normal::new(0.0, std).expect("valid std");
    for v in params.data_mut() {
        *v = T::from_f64(normal.sample(r));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(input: &[f64], w: &[f64], b: &[f64], cin: usize, cout: usize, h: usize, wd: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * h * wd];
        for o in 0..cout {
            for y in 0..h {
                for x in 0..wd {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky - 1, x as isize + kx - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w[((o * cin + c) * 3 + ky as usize) * 3 + kx as usize]
                                    * input[(c * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out[(o * h + y) * wd + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let net: Network<f64> = Network::from_descriptor(
            ArchDescriptor::DeskNet {
                num_classes: 3,
                channels: 3,
                image_size: 8,
            },
            5,
        )
        .unwrap();
        let mut r = rng::stream(1);
        let input: Vec<f64> = (0..3 * 64).map(|_| r.random::<f64>()).collect();
        let layer = &net.layers[0];
        let (out, _) = net.layer_forward(layer, &input, false);
        let expected = direct_conv(
            &input,
            net.params.tensor("conv1.weight").unwrap(),
            net.params.tensor("conv1.bias").unwrap(),
            3,
            32,
            8,
            8,
        );
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut r = rng::stream(9);
        let (cin, h, w) = (2, 5, 4);
        let x: Vec<f64> = (0..cin * h * w).map(|_| r.random::<f64>() - 0.5).collect();
        let c: Vec<f64> = (0..cin * 9 * h * w).map(|_| r.random::<f64>() - 0.5).collect();
        let lhs: f64 = im2col(&x, cin, h, w).iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, cin, h, w, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_picks_window_maximum() {
        let net: Network<f64> = Network::zeroed(ArchDescriptor::DeskNet {
            num_classes: 2,
            channels: 3,
            image_size: 4,
        })
        .unwrap();
        let pool = net.layers.iter().find(|l| l.name == "pool1").unwrap().clone();
        let LayerKind::MaxPool2 { channels, height, width } = pool.kind else {
            panic!()
        };
        assert_eq!((channels, height, width), (32, 4, 4));
        let input: Vec<f64> = (0..32 * 16).map(|i| ((i * 7) % 13) as f64).collect();
        let (out, _) = net.layer_forward(&pool, &input, false);
        assert_eq!(out.len(), 32 * 4);
        let m = input[0].max(input[1]).max(input[4]).max(input[5]);
        assert_eq!(out[0], m);
    }

    #[test]
    fn rejects_bad_shapes() {
        let net = build_reference_net(4, 8, 0).unwrap();
        assert!(matches!(net.logits(&[0.0; 10]), Err(Error::ShapeMismatch(_))));
        assert!(build_reference_net(1, 8, 0).is_err());
        assert!(build_reference_net(4, 10, 0).is_err());
    }

    #[test]
    fn non_finite_activation_names_the_layer() {
        let mut net = build_reference_net(4, 8, 0).unwrap();
        net.params_mut().tensor_mut("conv2.bias").unwrap()[0] = f32::INFINITY;
        match net.logits(&vec![0.5; 3 * 64]) {
            Err(Error::NonFinite(layer)) => assert_eq!(layer, "conv2"),
            other => panic!("{other:?}"),
        }
    }
}
