//! L2 projected gradient descent.
//!
//! Untargeted attacks ascend the cross-entropy of the true label; targeted
//! attacks descend the cross-entropy of a chosen target. Each step moves by
//! `step_size` along the L2-normalised gradient, projects back onto the
//! ε-ball and then clamps the adversarial image into [0, 1]; the perturbation
//! is recomputed from the clamped image, so both constraints hold after
//! every step.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Sample};
use crate::error::{Error, Result};
use crate::model::{argmax, softmax_cross_entropy, Classifier, LabelDistribution};
use crate::numfmt::sig9;
use crate::rng;
use crate::taxonomy::SemanticTargetSet;

pub const DEFAULT_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Untargeted,
    Targeted(usize),
}

impl AttackMode {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMode::Untargeted => "untargeted",
            AttackMode::Targeted(_) => "targeted",
        }
    }

    pub fn target(&self) -> Option<usize> {
        match self {
            AttackMode::Untargeted => None,
            AttackMode::Targeted(t) => Some(*t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackInit {
    #[default]
    Zero,
    RandomInBall,
}

/// Norm of the constraint set. Only L2 is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f32,
    pub steps: usize,
    pub step_size: f32,
    pub mode: AttackMode,
    pub init: AttackInit,
    pub norm: Norm,
    pub clamp: (f32, f32),
}

/// `2.5 · ε / steps`.
pub fn default_step_size(epsilon: f32, steps: usize) -> f32 {
    2.5 * epsilon / steps as f32
}

impl AttackConfig {
    /// Ten-step L2 attack with the default step size and zero initialisation.
    pub fn new(epsilon: f32, mode: AttackMode) -> Self {
        Self::with_steps(epsilon, DEFAULT_STEPS, mode)
    }

    pub fn with_steps(epsilon: f32, steps: usize, mode: AttackMode) -> Self {
        Self {
            epsilon,
            steps,
            step_size: default_step_size(epsilon, steps),
            mode,
            init: AttackInit::Zero,
            norm: Norm::L2,
            clamp: (0.0, 1.0),
        }
    }

    pub fn init(mut self, init: AttackInit) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("attack needs at least one step"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.clamp.0 < self.clamp.1) {
            return Err(Error::invalid("clamp range is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationResult {
    pub delta: Vec<f32>,
    pub adversarial_image: Image,
    /// Target reached (targeted) or label changed (untargeted).
    pub success: bool,
    /// Loss before every step followed by the loss at the final perturbation
    /// (`steps + 1` values).
    pub loss_trace: Vec<f64>,
    pub pred_class: usize,
    /// Steps whose gradient had zero norm and left the perturbation unchanged.
    pub zero_grad_steps: Vec<usize>,
    /// Input-gradient evaluations spent.
    pub grad_evals: usize,
}

impl PerturbationResult {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace is never empty")
    }
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Radial projection onto the L2 ball of radius `epsilon`, in place.
pub fn project_l2_in_place(delta: &mut [f32], epsilon: f32) {
    let norm = l2(delta);
    if norm > epsilon as f64 {
        let scale = (epsilon as f64 / norm) as f32;
        for d in delta.iter_mut() {
            *d *= scale;
        }
    }
}

pub fn project_l2(delta: &[f32], epsilon: f32) -> Vec<f32> {
    let mut out = delta.to_vec();
    project_l2_in_place(&mut out, epsilon);
    out
}

/// Replace `delta` by `clamp(x + delta) − x`; returns the adversarial pixels.
fn clamp_adjust(x: &[f32], delta: &mut [f32], clamp: (f32, f32)) -> Vec<f32> {
    x.iter()
        .zip(delta.iter_mut())
        .map(|(&xi, d)| {
            let a = (xi + *d).clamp(clamp.0, clamp.1);
            *d = a - xi;
            a
        })
        .collect()
}

/// One PGD update. Returns the new perturbation and whether the gradient was
/// zero (in which case the perturbation is returned unchanged).
pub fn pgd_step(x: &[f32], delta: &[f32], grad: &[f32], cfg: &AttackConfig) -> (Vec<f32>, bool) {
    match step_inner(x, delta, grad, cfg) {
        Some((next, _)) => (next, false),
        None => (delta.to_vec(), true),
    }
}

/// New perturbation and adversarial pixels, or `None` for a zero gradient.
fn step_inner(x: &[f32], delta: &[f32], grad: &[f32], cfg: &AttackConfig) -> Option<(Vec<f32>, Vec<f32>)> {
    let gnorm = l2(grad);
    if gnorm == 0.0 {
        return None;
    }
    let sign = match cfg.mode {
        AttackMode::Untargeted => 1.0,
        AttackMode::Targeted(_) => -1.0,
    };
    let scale = (sign * cfg.step_size as f64 / gnorm) as f32;
    let mut next: Vec<f32> = delta
        .iter()
        .zip(grad)
        .map(|(&d, &g)| d + scale * g)
        .collect();
    project_l2_in_place(&mut next, cfg.epsilon);
    let adv = clamp_adjust(x, &mut next, cfg.clamp);
    Some((next, adv))
}

fn random_in_ball<R: Rng>(len: usize, epsilon: f32, r: &mut R) -> Vec<f32> {
    let dir: Vec<f64> = (0..len).map(|_| StandardNormal.sample(r)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let radius = epsilon as f64 * r.random::<f64>().powf(1.0 / len as f64);
    dir.iter().map(|v| (v / norm * radius) as f32).collect()
}

/// Run the configured attack on one sample. The model is only read.
pub fn run_pgd<M, R>(model: &M, sample: &Sample, cfg: &AttackConfig, r: &mut R) -> Result<PerturbationResult>
where
    M: Classifier<f32> + ?Sized,
    R: Rng,
{
    cfg.validate()?;
    let classes = model.num_classes();
    let y = sample.fine_label;
    if y >= classes {
        return Err(Error::UnknownClass(y));
    }
    let label = match cfg.mode {
        AttackMode::Untargeted => LabelDistribution::one_hot(y, classes)?,
        AttackMode::Targeted(t) if t == y => {
            return Err(Error::invalid(format!(
                "targeted attack toward the true class {y}"
            )))
        }
        AttackMode::Targeted(t) => LabelDistribution::one_hot(t, classes)?,
    };
    let x = &sample.image.pixels;
    let mut delta = match cfg.init {
        AttackInit::Zero => vec![0.0; x.len()],
        AttackInit::RandomInBall => random_in_ball(x.len(), cfg.epsilon, r),
    };
    let mut adv = clamp_adjust(x, &mut delta, cfg.clamp);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut zero_grad_steps = Vec::new();
    for step in 0..cfg.steps {
        let g = model.loss_and_grad(&adv, &label, 1.0, None, true)?;
        let loss = g.loss as f64;
        trace.push(loss);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("attack loss at step {step} (trace {trace:?})")));
        }
        match step_inner(x, &delta, g.input_grad.as_deref().expect("requested"), cfg) {
            Some((next, next_adv)) => {
                delta = next;
                adv = next_adv;
            }
            None => zero_grad_steps.push(step),
        }
    }
    let logits = model.logits(&adv)?;
    let final_loss = softmax_cross_entropy(&logits, &label).0 as f64;
    if !final_loss.is_finite() {
        return Err(Error::NonFinite(format!("final attack loss (trace {trace:?})")));
    }
    trace.push(final_loss);
    let pred_class = argmax(&logits);
    let success = match cfg.mode {
        AttackMode::Untargeted => pred_class != y,
        AttackMode::Targeted(t) => pred_class == t,
    };
    let img = &sample.image;
    Ok(PerturbationResult {
        delta,
        adversarial_image: Image::new(img.channels, img.height, img.width, adv)?,
        success,
        loss_trace: trace,
        pred_class,
        zero_grad_steps,
        grad_evals: cfg.steps,
    })
}

/// Attack many samples against one frozen model. Job `i` draws from the
/// stream `derive(seed, i)`, so results equal running [`run_pgd`] per sample.
pub fn run_pgd_batch<M>(model: &M, jobs: &[(&Sample, AttackConfig)], seed: u64) -> Result<Vec<PerturbationResult>>
where
    M: Classifier<f32> + ?Sized,
{
    jobs.par_iter()
        .enumerate()
        .map(|(i, (sample, cfg))| run_pgd(model, sample, cfg, &mut rng::stream(rng::derive(seed, i as u64))))
        .collect()
}

/// Uniform draw from the semantic target set of `y`.
pub fn sample_target<R: Rng + ?Sized>(y: usize, targets: &SemanticTargetSet, r: &mut R) -> Result<usize> {
    let set = targets.get(y)?;
    if set.is_empty() {
        return Err(Error::invalid(format!("class {y} has an empty target set")));
    }
    Ok(set[r.random_range(0..set.len())])
}

/// One row of an attack sweep CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRecord {
    pub sample_id: usize,
    pub mode: AttackMode,
    pub epsilon: f32,
    pub success: bool,
    pub final_loss: f64,
    pub pred_class: usize,
}

pub fn write_attack_csv<W: Write>(records: &[AttackRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "sample_id",
        "mode",
        "epsilon",
        "target_class",
        "success",
        "final_loss",
        "pred_class",
    ])?;
    for r in records {
        w.write_record([
            r.sample_id.to_string(),
            r.mode.name().to_string(),
            sig9(r.epsilon as f64),
            r.mode.target().map(|t| t.to_string()).unwrap_or_default(),
            r.success.to_string(),
            sig9(r.final_loss),
            r.pred_class.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchDescriptor, Network};
    use crate::taxonomy::SemanticTargetSet;

    #[test]
    fn projection_cases() {
        let inside = vec![0.3, 0.4]; // norm 0.5
        assert_eq!(project_l2(&inside, 1.0), inside);
        let outside = vec![3.0, 4.0]; // norm 5
        let p = project_l2(&outside, 1.0);
        assert!((l2(&p) - 1.0).abs() < 1e-6);
        assert!((p[0] / p[1] - 0.75).abs() < 1e-6);
        assert_eq!(project_l2(&p, 1.0), p);
        assert_eq!(project_l2(&[0.0; 4], 1.0), vec![0.0; 4]);
    }

    #[test]
    fn default_step_sizes() {
        assert_eq!(AttackConfig::new(1.0, AttackMode::Untargeted).step_size, 0.25);
        assert_eq!(AttackConfig::new(2.5, AttackMode::Untargeted).step_size, 0.625);
        assert_eq!(AttackConfig::new(1.0, AttackMode::Untargeted).steps, 10);
        assert!(AttackConfig::new(0.0, AttackMode::Untargeted).validate().is_err());
        assert!(AttackConfig::with_steps(1.0, 0, AttackMode::Untargeted).validate().is_err());
    }

    #[test]
    fn zero_gradient_leaves_delta() {
        let x = vec![0.5f32; 6];
        let d = vec![0.1f32, 0.0, -0.1, 0.0, 0.0, 0.0];
        let cfg = AttackConfig::new(1.0, AttackMode::Untargeted);
        let (next, zero) = pgd_step(&x, &d, &[0.0; 6], &cfg);
        assert!(zero);
        assert_eq!(next, d);
    }

    #[test]
    fn first_step_length() {
        let x = vec![0.5f32; 8];
        let g: Vec<f32> = (0..8).map(|i| i as f32 - 3.5).collect();
        for eps in [0.2f32, 0.5, 1.0] {
            let cfg = AttackConfig::new(eps, AttackMode::Untargeted);
            let (next, _) = pgd_step(&x, &[0.0; 8], &g, &cfg);
            // no coordinate leaves [0,1] here, so clamping is inactive
            let expected = cfg.step_size.min(eps) as f64;
            assert!((l2(&next) - expected).abs() < 1e-6, "{eps}");
        }
    }

    /// Two-class linear softmax: the input gradient of the loss is a multiple of
    /// w1 − w0, so one step moves along ±(w1 − w0).
    #[test]
    fn linear_model_step_direction() {
        let mut net: Network<f32> = Network::zeroed(ArchDescriptor::Linear {
            num_classes: 2,
            input_shape: [1, 1, 4],
        })
        .unwrap();
        let w = [0.3f32, -0.2, 0.5, 0.1, -0.4, 0.6, 0.0, 0.2];
        net.params_mut().tensor_mut("fc.weight").unwrap().copy_from_slice(&w);
        let diff: Vec<f32> = (0..4).map(|i| w[4 + i] - w[i]).collect();
        let sample = Sample {
            image: Image::new(1, 1, 4, vec![0.5; 4]).unwrap(),
            fine_label: 0,
            coarse_label: 0,
        };
        let dn = l2(&diff);
        for (mode, sign) in [(AttackMode::Untargeted, 1.0), (AttackMode::Targeted(1), 1.0)] {
            let cfg = AttackConfig::with_steps(0.1, 1, mode);
            let res = run_pgd(&net, &sample, &cfg, &mut rng::stream(0)).unwrap();
            let dnorm = l2(&res.delta);
            // both raise the class-1 logit: untargeted ascends loss(y=0), targeted descends loss(t=1)
            let cos: f64 = res.delta.iter().zip(&diff).map(|(&a, &b)| (a * b) as f64).sum::<f64>() / (dnorm * dn);
            assert!((cos - sign).abs() < 1e-5, "{mode:?} cos {cos}");
        }
    }

    #[test]
    fn targeted_attack_toward_true_class_rejected() {
        let net = crate::model::build_reference_net(3, 4, 0).unwrap();
        let sample = Sample {
            image: Image::zeros(3, 4, 4),
            fine_label: 1,
            coarse_label: 0,
        };
        let cfg = AttackConfig::new(1.0, AttackMode::Targeted(1));
        assert!(run_pgd(&net, &sample, &cfg, &mut rng::stream(0)).is_err());
    }

    #[test]
    fn batched_equals_unbatched() {
        let net = crate::model::build_reference_net(4, 8, 2).unwrap();
        let mut r = rng::stream(3);
        let samples: Vec<Sample> = (0..5)
            .map(|i| Sample {
                image: Image::new(3, 8, 8, (0..192).map(|_| r.random::<f32>()).collect()).unwrap(),
                fine_label: i % 4,
                coarse_label: 0,
            })
            .collect();
        let jobs: Vec<(&Sample, AttackConfig)> = samples
            .iter()
            .map(|s| {
                let mode = if s.fine_label == 0 { AttackMode::Untargeted } else { AttackMode::Targeted(0) };
                (s, AttackConfig::new(0.7, mode).init(AttackInit::RandomInBall))
            })
            .collect();
        let batch = run_pgd_batch(&net, &jobs, 99).unwrap();
        for (i, (s, cfg)) in jobs.iter().enumerate() {
            let single = run_pgd(&net, s, cfg, &mut rng::stream(rng::derive(99, i as u64))).unwrap();
            assert_eq!(single, batch[i]);
        }
    }

    #[test]
    fn target_sampling() {
        let one = SemanticTargetSet { k: 1, targets: vec![vec![2], vec![0], vec![1]] };
        let mut r = rng::stream(1);
        for _ in 0..20 {
            assert_eq!(sample_target(0, &one, &mut r).unwrap(), 2);
        }
        let empty = SemanticTargetSet { k: 0, targets: vec![vec![], vec![]] };
        assert!(sample_target(0, &empty, &mut r).is_err());
        assert!(sample_target(7, &one, &mut r).is_err());
    }

    #[test]
    fn attack_csv_columns() {
        let mut buf = Vec::new();
        write_attack_csv(
            &[AttackRecord {
                sample_id: 3,
                mode: AttackMode::Targeted(5),
                epsilon: 2.5,
                success: true,
                final_loss: 0.125,
                pred_class: 5,
            }],
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "sample_id,mode,epsilon,target_class,success,final_loss,pred_class\n3,targeted,2.50000000,5,true,0.125000000,5\n"
        );
    }
}
