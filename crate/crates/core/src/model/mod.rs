//! Classifier abstraction, the DeskNet reference network, soft-label
//! cross-entropy and the momentum-SGD optimizer.

mod checkpoint;
mod network;
mod optim;
mod scalar;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, CheckpointManifest, TensorRecord};
pub use network::{
    build_reference_net, randomize_params, softmax_cross_entropy, ArchDescriptor, Classifier,
    Network, ParamEntry, ParamSet, SampleGrad,
};
pub use optim::{Sgd, SgdConfig, TrainState};
pub use scalar::Scalar;

pub(crate) use network::hex;

/// Samples per gradient-accumulation chunk. Chunks are summed in a fixed
/// order, so parameter gradients do not depend on the thread count.
const GRAD_CHUNK: usize = 8;

/// Probability vector over classes used as a (soft) training target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    weights: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("label distribution over zero classes"));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("label weights must be finite and non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("label weights sum to {sum}, not 1")));
        }
        Ok(Self { weights })
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::UnknownClass(class));
        }
        let mut weights = vec![0.0; num_classes];
        weights[class] = 1.0;
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn check_batch<T>(inputs: &[&[T]], targets: &[LabelDistribution]) -> Result<()> {
    if inputs.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if inputs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    Ok(())
}

/// Logits for every input of a batch.
pub fn forward<T: Scalar, M: Classifier<T> + ?Sized>(model: &M, inputs: &[&[T]]) -> Result<Vec<Vec<T>>> {
    inputs.par_iter().map(|x| model.logits(x)).collect()
}

/// Mean over the batch of the soft-label cross-entropy.
pub fn cross_entropy<T: Scalar>(logits: &[Vec<T>], targets: &[LabelDistribution]) -> Result<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (row, q) in logits.iter().zip(targets) {
        if row.len() != q.len() {
            return Err(Error::ShapeMismatch("logit row and target lengths differ".into()));
        }
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        total += softmax_cross_entropy(row, q).0.to_f64();
    }
    Ok(total / logits.len() as f64)
}

/// Gradient of the batch-mean cross-entropy with respect to each input.
pub fn grad_input<T: Scalar, M: Classifier<T> + ?Sized>(
    model: &M,
    inputs: &[&[T]],
    targets: &[LabelDistribution],
) -> Result<Vec<Vec<T>>> {
    check_batch(inputs, targets)?;
    let scale = T::ONE / T::from_f64(inputs.len() as f64);
    inputs
        .par_iter()
        .zip(targets)
        .map(|(x, q)| {
            Ok(model
                .loss_and_grad(x, q, scale, None, true)?
                .input_grad
                .expect("input gradient requested"))
        })
        .collect()
}

/// Batch-mean loss, its parameter gradient, and the logits of every input.
pub struct BatchGrad<T> {
    pub loss: f64,
    pub param_grad: Vec<T>,
    pub logits: Vec<Vec<T>>,
}

/// Gradient of the batch-mean cross-entropy with respect to the parameters.
pub fn grad_params<T: Scalar, M: Classifier<T> + ?Sized>(
    model: &M,
    inputs: &[&[T]],
    targets: &[LabelDistribution],
) -> Result<BatchGrad<T>> {
    check_batch(inputs, targets)?;
    let n = inputs.len();
    let scale = T::ONE / T::from_f64(n as f64);
    let p = model.params().len();
    let chunks: Vec<(Vec<T>, Vec<(T, Vec<T>)>)> = inputs
        .par_chunks(GRAD_CHUNK)
        .zip(targets.par_chunks(GRAD_CHUNK))
        .map(|(xs, qs)| {
            let mut g = vec![T::ZERO; p];
            let per = xs
                .iter()
                .zip(qs)
                .map(|(x, q)| {
                    let s = model.loss_and_grad(x, q, scale, Some(&mut g), false)?;
                    Ok((s.loss, s.logits))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((g, per))
        })
        .collect::<Result<_>>()?;
    let mut param_grad = vec![T::ZERO; p];
    let mut loss = 0.0;
    let mut logits = Vec::with_capacity(n);
    for (g, per) in chunks {
        for (a, b) in param_grad.iter_mut().zip(g) {
            *a += b;
        }
        for (l, z) in per {
            loss += l.to_f64();
            logits.push(z);
        }
    }
    Ok(BatchGrad {
        loss: loss / n as f64,
        param_grad,
        logits,
    })
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
