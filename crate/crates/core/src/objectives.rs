//! Training objectives, recipes and the six named presets.
//!
//! A recipe is an ordered list of stages, each pairing an objective with an
//! epoch count. Parameters carry across stage boundaries; momentum buffers are
//! reset at the start of every stage.

use std::fmt;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, AttackMode, DEFAULT_STEPS};
use crate::data::{augment, batch_indices, AugmentationConfig, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{
    argmax, grad_params, ArchDescriptor, Classifier, LabelDistribution, Network, SgdConfig, TrainState,
};
use crate::numfmt::sig9;
use crate::rng;
use crate::taxonomy::{ClassTaxonomy, SemanticTargetSet};

/// Default divisor applied to paper-scale epoch counts at desk scale.
pub const DESK_FACTOR: usize = 20;

pub const PRESET_NAMES: [&str; 6] = ["Standard", "AdvRobust", "LE-SmT", "HE-SmT", "HE-SmT-LM", "ST"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Standard,
    UntargetedAdversarial { epsilon: f32 },
    SemanticTargeted { epsilon: f32, label_modification: bool },
}

impl Objective {
    pub fn epsilon(&self) -> Option<f32> {
        match *self {
            Objective::Standard => None,
            Objective::UntargetedAdversarial { epsilon } | Objective::SemanticTargeted { epsilon, .. } => {
                Some(epsilon)
            }
        }
    }

    pub fn is_adversarial(&self) -> bool {
        !matches!(self, Objective::Standard)
    }

    /// The same objective with ε multiplied by `factor`.
    pub fn scale_epsilon(&self, factor: f32) -> Objective {
        match *self {
            Objective::Standard => Objective::Standard,
            Objective::UntargetedAdversarial { epsilon } => Objective::UntargetedAdversarial {
                epsilon: epsilon * factor,
            },
            Objective::SemanticTargeted {
                epsilon,
                label_modification,
            } => Objective::SemanticTargeted {
                epsilon: epsilon * factor,
                label_modification,
            },
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Objective::Standard => write!(f, "standard"),
            Objective::UntargetedAdversarial { epsilon } => write!(f, "untargeted_adversarial[eps={epsilon}]"),
            Objective::SemanticTargeted {
                epsilon,
                label_modification,
            } => {
                let lm = if label_modification { ";lm" } else { "" };
                write!(f, "semantic_targeted[eps={epsilon}{lm}]")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingStage {
    pub objective: Objective,
    pub epochs: usize,
}

impl TrainingStage {
    pub fn new(objective: Objective, epochs: usize) -> Self {
        Self { objective, epochs }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("a stage needs at least one epoch"));
        }
        if let Some(eps) = self.objective.epsilon() {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::invalid(format!("stage epsilon must be positive, got {eps}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply the rate by `gamma` at each listed (global, zero-based) epoch.
    MultiStep { milestones: Vec<usize>, gamma: f32 },
}

impl LrSchedule {
    pub fn rate(&self, base: f32, epoch: usize) -> f32 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::MultiStep { milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * gamma.powi(passed as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub lr: f32,
    pub batch_size: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// `None` disables augmentation.
    pub augmentation: Option<AugmentationConfig>,
    pub attack_steps: usize,
    /// Ramp ε linearly over this many epochs at the start of each adversarial
    /// stage (epoch `e` of the stage uses `ε·min(1, (e+1)/n)`); 0 disables.
    #[serde(default)]
    pub epsilon_warmup_epochs: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            lr: 0.1,
            batch_size: 100,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_schedule: LrSchedule::Constant,
            augmentation: Some(AugmentationConfig::default()),
            attack_steps: DEFAULT_STEPS,
            epsilon_warmup_epochs: 0,
        }
    }
}

impl Hyperparameters {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.attack_steps == 0 {
            return Err(Error::invalid("attack steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub name: String,
    pub stages: Vec<TrainingStage>,
    #[serde(default)]
    pub hyperparameters: Hyperparameters,
}

impl Recipe {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid(format!("recipe {} has no stages", self.name)));
        }
        for s in &self.stages {
            s.validate()?;
        }
        self.hyperparameters.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    pub fn needs_targets(&self) -> bool {
        self.stages
            .iter()
            .any(|s| matches!(s.objective, Objective::SemanticTargeted { .. }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scale {
    Paper,
    Desk { factor: usize },
}

impl Scale {
    pub fn desk() -> Self {
        Scale::Desk { factor: DESK_FACTOR }
    }

    pub fn epochs(&self, paper: usize) -> usize {
        match *self {
            Scale::Paper => paper,
            Scale::Desk { factor } => paper.div_ceil(factor.max(1)).max(1),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::desk()),
            other => Err(Error::invalid(format!("unknown scale {other:?}; expected paper or desk"))),
        }
    }
}

/// Named training configuration.
pub fn preset(name: &str, scale: Scale) -> Result<Recipe> {
    use Objective::*;
    let st = |epsilon, label_modification| SemanticTargeted {
        epsilon,
        label_modification,
    };
    let paper: Vec<(Objective, usize)> = match name {
        "Standard" => vec![(Standard, 200)],
        "AdvRobust" => vec![(UntargetedAdversarial { epsilon: 1.0 }, 200)],
        "LE-SmT" => vec![(st(1.0, false), 200)],
        "HE-SmT" => vec![(st(2.5, false), 200)],
        "HE-SmT-LM" => vec![(st(2.5, true), 300)],
        "ST" => vec![(st(2.5, true), 200), (Standard, 100)],
        other => {
            return Err(Error::invalid(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(Recipe {
        name: name.to_string(),
        stages: paper
            .into_iter()
            .map(|(objective, epochs)| TrainingStage::new(objective, scale.epochs(epochs)))
            .collect(),
        hyperparameters: Hyperparameters::default(),
    })
}

/// Training target for a (possibly perturbed) example.
pub fn make_label(y: usize, t: Option<usize>, label_modification: bool, num_classes: usize) -> Result<LabelDistribution> {
    match t {
        Some(t) if label_modification => {
            if t == y {
                return Err(Error::invalid(format!("label modification with target equal to the true class {y}")));
            }
            if t >= num_classes {
                return Err(Error::UnknownClass(t));
            }
            let mut w = vec![0.0; num_classes];
            w[y] = 0.5;
            w[t] = 0.5;
            LabelDistribution::new(w)
        }
        _ => LabelDistribution::one_hot(y, num_classes),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub loss: f64,
    pub samples: usize,
    pub correct: usize,
    pub attacks: usize,
    pub successes: usize,
    pub grad_evals: usize,
}

impl StepStats {
    fn absorb(&mut self, other: &StepStats) {
        self.loss += other.loss * other.samples as f64;
        self.samples += other.samples;
        self.correct += other.correct;
        self.attacks += other.attacks;
        self.successes += other.successes;
        self.grad_evals += other.grad_evals;
    }
}

/// One optimisation step on `batch`: augment, perturb according to the stage
/// objective against the frozen pre-step parameters, then take an SGD step.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&Sample],
    stage: &TrainingStage,
    hyper: &Hyperparameters,
    targets: Option<&SemanticTargetSet>,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let classes = state.model.descriptor().num_classes();
    let inputs: Vec<Sample> = match &hyper.augmentation {
        Some(cfg) => batch.iter().map(|s| augment(s, cfg, &mut state.rng)).collect(),
        None => batch.iter().map(|&s| s.clone()).collect(),
    };
    let mut stats = StepStats {
        samples: batch.len(),
        ..StepStats::default()
    };
    let (images, labels): (Vec<Vec<f32>>, Vec<LabelDistribution>) = match stage.objective {
        Objective::Standard => {
            let labels = inputs
                .iter()
                .map(|s| LabelDistribution::one_hot(s.fine_label, classes))
                .collect::<Result<_>>()?;
            (inputs.into_iter().map(|s| s.image.pixels).collect(), labels)
        }
        Objective::UntargetedAdversarial { epsilon } => {
            let jobs: Vec<(&Sample, AttackConfig)> = inputs
                .iter()
                .map(|s| (s, AttackConfig::with_steps(epsilon, hyper.attack_steps, AttackMode::Untargeted)))
                .collect();
            let results = attack::run_pgd_batch(&state.model, &jobs, state.rng.random())?;
            let labels = inputs
                .iter()
                .map(|s| LabelDistribution::one_hot(s.fine_label, classes))
                .collect::<Result<_>>()?;
            stats.attacks = results.len();
            stats.successes = results.iter().filter(|r| r.success).count();
            stats.grad_evals = results.iter().map(|r| r.grad_evals).sum();
            (results.into_iter().map(|r| r.adversarial_image.pixels).collect(), labels)
        }
        Objective::SemanticTargeted {
            epsilon,
            label_modification,
        } => {
            let targets = targets.ok_or_else(|| Error::invalid("semantic targeting needs target sets"))?;
            let mut chosen = Vec::with_capacity(inputs.len());
            for s in &inputs {
                chosen.push(attack::sample_target(s.fine_label, targets, &mut state.rng)?);
            }
            let jobs: Vec<(&Sample, AttackConfig)> = inputs
                .iter()
                .zip(&chosen)
                .map(|(s, &t)| (s, AttackConfig::with_steps(epsilon, hyper.attack_steps, AttackMode::Targeted(t))))
                .collect();
            let results = attack::run_pgd_batch(&state.model, &jobs, state.rng.random())?;
            let labels = inputs
                .iter()
                .zip(&chosen)
                .map(|(s, &t)| make_label(s.fine_label, Some(t), label_modification, classes))
                .collect::<Result<_>>()?;
            stats.attacks = results.len();
            stats.successes = results.iter().filter(|r| r.success).count();
            stats.grad_evals = results.iter().map(|r| r.grad_evals).sum();
            (results.into_iter().map(|r| r.adversarial_image.pixels).collect(), labels)
        }
    };
    let refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
    let grad = grad_params(&state.model, &refs, &labels)?;
    let lr = hyper.lr_schedule.rate(hyper.lr, state.epoch);
    state.sgd_step(&grad.param_grad, lr)?;
    stats.loss = grad.loss;
    stats.correct = grad
        .logits
        .iter()
        .zip(batch)
        .filter(|(z, s)| argmax(z) == s.fine_label)
        .count();
    Ok(stats)
}

/// Per-epoch training log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// One-based global epoch.
    pub epoch: usize,
    pub stage: usize,
    pub objective: String,
    pub mean_loss: f64,
    pub train_acc: f64,
    /// Absent for standard stages.
    pub attack_success_rate: Option<f64>,
    pub grad_evals: usize,
}

/// Run one epoch of `stage` over a freshly shuffled `dataset`.
pub fn train_epoch(
    state: &mut TrainState,
    dataset: &Dataset,
    stage_index: usize,
    stage: &TrainingStage,
    hyper: &Hyperparameters,
    targets: Option<&SemanticTargetSet>,
) -> Result<EpochLog> {
    let order = batch_indices(dataset.len(), hyper.batch_size, state.rng.random())?;
    let mut total = StepStats::default();
    for idx in order {
        let batch: Vec<&Sample> = idx.iter().map(|&i| &dataset.samples[i]).collect();
        let s = train_step(state, &batch, stage, hyper, targets)?;
        total.absorb(&s);
    }
    state.epoch += 1;
    Ok(EpochLog {
        epoch: state.epoch,
        stage: stage_index,
        objective: stage.objective.to_string(),
        mean_loss: total.loss / total.samples as f64,
        train_acc: total.correct as f64 / total.samples as f64,
        attack_success_rate: (total.attacks > 0).then(|| total.successes as f64 / total.attacks as f64),
        grad_evals: total.grad_evals,
    })
}

pub fn write_training_log<W: Write>(rows: &[EpochLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "stage", "objective", "mean_loss", "train_acc", "attack_success_rate"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.stage.to_string(),
            r.objective.clone(),
            sig9(r.mean_loss),
            sig9(r.train_acc),
            r.attack_success_rate.map(sig9).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// When a checkpoint is due.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointEvent {
    pub stage: usize,
    /// Global epochs completed.
    pub epoch: usize,
    pub stage_end: bool,
}

impl CheckpointEvent {
    pub fn label(&self) -> String {
        if self.stage_end {
            format!("stage{}-end", self.stage)
        } else {
            format!("epoch{:04}", self.epoch)
        }
    }
}

#[derive(Default)]
pub struct RecipeOptions<'a> {
    /// Defaults to DeskNet sized for the dataset.
    pub architecture: Option<ArchDescriptor>,
    /// Also checkpoint every this many global epochs.
    pub checkpoint_every: Option<usize>,
    pub on_checkpoint: Option<&'a mut dyn FnMut(&TrainState, CheckpointEvent) -> Result<()>>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochLog)>,
}

#[derive(Debug, Clone)]
pub struct RecipeOutcome {
    pub state: TrainState,
    pub log: Vec<EpochLog>,
    pub checkpoints: Vec<CheckpointEvent>,
    /// Parameter checksum at the end of each stage.
    pub stage_checksums: Vec<String>,
}

/// DeskNet sized for the samples of `dataset`.
pub fn desk_architecture(dataset: &Dataset) -> Result<ArchDescriptor> {
    let [channels, h, w] = dataset
        .image_shape()
        .ok_or_else(|| Error::invalid("cannot size a network for an empty dataset"))?;
    if h != w {
        return Err(Error::ShapeMismatch(format!("DeskNet needs square images, got {h}×{w}")));
    }
    Ok(ArchDescriptor::DeskNet {
        num_classes: dataset.num_classes,
        channels,
        image_size: h,
    })
}

/// Fresh training state: parameters from `derive(seed, 0)`, training stream
/// from `derive(seed, 1)`.
pub fn initial_state(architecture: ArchDescriptor, hyper: &Hyperparameters, seed: u64) -> Result<TrainState> {
    let model = Network::from_descriptor(architecture, rng::derive(seed, 0))?;
    Ok(TrainState::new(model, hyper.sgd(), rng::stream(rng::derive(seed, 1))))
}

/// Execute every stage of `recipe` in order from a fresh initialisation.
pub fn run_recipe(
    recipe: &Recipe,
    dataset: &Dataset,
    taxonomy: &ClassTaxonomy,
    targets: Option<&SemanticTargetSet>,
    seed: u64,
    mut opts: RecipeOptions<'_>,
) -> Result<RecipeOutcome> {
    recipe.validate()?;
    dataset.validate(taxonomy)?;
    if recipe.needs_targets() {
        let t = targets.ok_or_else(|| Error::invalid(format!("recipe {} needs semantic target sets", recipe.name)))?;
        if t.num_classes() != taxonomy.num_fine() {
            return Err(Error::ShapeMismatch(format!(
                "target sets cover {} classes, taxonomy has {}",
                t.num_classes(),
                taxonomy.num_fine()
            )));
        }
    }
    let arch = match opts.architecture.clone() {
        Some(a) => a,
        None => desk_architecture(dataset)?,
    };
    if arch.num_classes() != taxonomy.num_fine() {
        return Err(Error::ShapeMismatch(format!(
            "architecture has {} outputs, taxonomy has {} classes",
            arch.num_classes(),
            taxonomy.num_fine()
        )));
    }
    let hyper = &recipe.hyperparameters;
    let mut state = initial_state(arch, hyper, seed)?;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut stage_checksums = Vec::new();
    for (si, stage) in recipe.stages.iter().enumerate() {
        state.optimizer.reset();
        for e in 0..stage.epochs {
            let active = match hyper.epsilon_warmup_epochs {
                0 => *stage,
                n => TrainingStage {
                    objective: stage.objective.scale_epsilon(((e + 1) as f32 / n as f32).min(1.0)),
                    ..*stage
                },
            };
            let row = train_epoch(&mut state, dataset, si, &active, hyper, targets)?;
            if let Some(f) = opts.on_epoch.as_mut() {
                f(&row);
            }
            log.push(row);
            let stage_end = e + 1 == stage.epochs;
            let periodic = opts.checkpoint_every.is_some_and(|n| n > 0 && state.epoch % n == 0);
            if stage_end || periodic {
                let ev = CheckpointEvent {
                    stage: si,
                    epoch: state.epoch,
                    stage_end,
                };
                if let Some(f) = opts.on_checkpoint.as_mut() {
                    f(&state, ev)?;
                }
                checkpoints.push(ev);
            }
        }
        stage_checksums.push(state.model.params().checksum());
    }
    Ok(RecipeOutcome {
        state,
        log,
        checkpoints,
        stage_checksums,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::taxonomy::{build_similarity_matrix, build_target_sets};

    #[test]
    fn labels() {
        assert_eq!(make_label(1, None, false, 4).unwrap().weights(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(make_label(1, Some(3), false, 4).unwrap().weights(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(make_label(1, Some(3), true, 4).unwrap().weights(), &[0.0, 0.5, 0.0, 0.5]);
        assert!(make_label(2, Some(2), true, 4).is_err());
        assert!(make_label(1, Some(9), true, 4).is_err());
    }

    #[test]
    fn paper_presets() {
        let adv = preset("AdvRobust", Scale::Paper).unwrap();
        assert_eq!(adv.stages, vec![TrainingStage::new(Objective::UntargetedAdversarial { epsilon: 1.0 }, 200)]);
        let st = preset("ST", Scale::desk()).unwrap();
        assert_eq!(st.stages.iter().map(|s| s.epochs).collect::<Vec<_>>(), vec![10, 5]);
        assert_eq!(st.stages[0].objective.epsilon(), Some(2.5));
        let lm = preset("HE-SmT-LM", Scale::desk()).unwrap();
        assert_eq!(lm.stages[0].epochs, 15);
        assert!(preset("Robust", Scale::Paper).is_err());
        assert_eq!(Scale::Desk { factor: 7 }.epochs(100), 15);
        assert_eq!(Scale::Desk { factor: 500 }.epochs(100), 1);
    }

    #[test]
    fn recipe_round_trips_through_json() {
        for name in PRESET_NAMES {
            let r = preset(name, Scale::Paper).unwrap();
            let back: Recipe = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
            assert_eq!(back, r);
        }
    }

    #[test]
    fn lr_schedule() {
        let s = LrSchedule::MultiStep {
            milestones: vec![2, 4],
            gamma: 0.5,
        };
        let rates: Vec<f32> = (0..6).map(|e| s.rate(0.1, e)).collect();
        assert_eq!(rates, vec![0.1, 0.1, 0.05, 0.05, 0.025, 0.025]);
    }

    fn tiny() -> (Dataset, ClassTaxonomy, SemanticTargetSet) {
        let (ds, tax) = generate_synthetic(&SyntheticSpec {
            num_classes: 6,
            images_per_class: 4,
            image_size: 8,
            seed: 5,
        })
        .unwrap();
        let targets = build_target_sets(&build_similarity_matrix(&tax), 2).unwrap();
        (ds, tax, targets)
    }

    fn small_recipe(stages: Vec<TrainingStage>) -> Recipe {
        Recipe {
            name: "test".into(),
            stages,
            hyperparameters: Hyperparameters {
                batch_size: 8,
                lr: 0.02,
                attack_steps: 3,
                ..Hyperparameters::default()
            },
        }
    }

    #[test]
    fn semantic_epoch_budget_and_targets() {
        let (ds, tax, targets) = tiny();
        let recipe = small_recipe(vec![TrainingStage::new(
            Objective::SemanticTargeted {
                epsilon: 1.0,
                label_modification: true,
            },
            2,
        )]);
        let out = run_recipe(&recipe, &ds, &tax, Some(&targets), 1, RecipeOptions::default()).unwrap();
        for row in &out.log {
            assert_eq!(row.grad_evals, 3 * ds.len());
            assert!(row.attack_success_rate.is_some());
        }
        let std = small_recipe(vec![TrainingStage::new(Objective::Standard, 1)]);
        let out = run_recipe(&std, &ds, &tax, None, 1, RecipeOptions::default()).unwrap();
        assert_eq!(out.log[0].grad_evals, 0);
        assert_eq!(out.log[0].attack_success_rate, None);
    }

    #[test]
    fn semantic_recipe_requires_targets() {
        let (ds, tax, _) = tiny();
        let recipe = small_recipe(vec![TrainingStage::new(
            Objective::SemanticTargeted {
                epsilon: 1.0,
                label_modification: false,
            },
            1,
        )]);
        assert!(run_recipe(&recipe, &ds, &tax, None, 1, RecipeOptions::default()).is_err());
    }

    #[test]
    fn checkpoints_and_stage_boundaries() {
        let (ds, tax, targets) = tiny();
        let recipe = small_recipe(vec![
            TrainingStage::new(Objective::UntargetedAdversarial { epsilon: 0.5 }, 3),
            TrainingStage::new(Objective::Standard, 2),
        ]);
        let mut seen: Vec<(CheckpointEvent, String, f32)> = Vec::new();
        let mut cb = |s: &TrainState, ev: CheckpointEvent| {
            let m = s.optimizer.buffer.iter().map(|v| v.abs()).fold(0.0, f32::max);
            seen.push((ev, s.model.params().checksum(), m));
            Ok(())
        };
        let out = run_recipe(
            &recipe,
            &ds,
            &tax,
            Some(&targets),
            3,
            RecipeOptions {
                checkpoint_every: Some(2),
                on_checkpoint: Some(&mut cb),
                ..RecipeOptions::default()
            },
        )
        .unwrap();
        let labels: Vec<String> = seen.iter().map(|(e, _, _)| e.label()).collect();
        assert_eq!(labels, vec!["epoch0002", "stage0-end", "epoch0004", "stage1-end"]);
        assert_eq!(out.log.len(), 5);
        assert_eq!(out.state.epoch, 5);
        // parameters at the stage-0 checkpoint are those the second stage started from
        assert_eq!(seen[1].1, out.stage_checksums[0]);
        assert_eq!(seen[3].1, out.state.model.params().checksum());
        assert!(seen[1].2 > 0.0);
    }

    #[test]
    fn two_single_epoch_stages_give_two_checkpoints() {
        let (ds, tax, _) = tiny();
        let recipe = small_recipe(vec![
            TrainingStage::new(Objective::Standard, 1),
            TrainingStage::new(Objective::Standard, 1),
        ]);
        let out = run_recipe(&recipe, &ds, &tax, None, 0, RecipeOptions::default()).unwrap();
        assert_eq!(out.log.len(), 2);
        assert_eq!(out.checkpoints.len(), 2);
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let (ds, tax, targets) = tiny();
        let recipe = small_recipe(vec![
            TrainingStage::new(
                Objective::SemanticTargeted {
                    epsilon: 1.5,
                    label_modification: true,
                },
                2,
            ),
            TrainingStage::new(Objective::Standard, 1),
        ]);
        let a = run_recipe(&recipe, &ds, &tax, Some(&targets), 11, RecipeOptions::default()).unwrap();
        let b = run_recipe(&recipe, &ds, &tax, Some(&targets), 11, RecipeOptions::default()).unwrap();
        assert_eq!(a.stage_checksums, b.stage_checksums);
        assert_eq!(a.log, b.log);
        let c = run_recipe(&recipe, &ds, &tax, Some(&targets), 12, RecipeOptions::default()).unwrap();
        assert_ne!(a.stage_checksums, c.stage_checksums);
    }

    #[test]
    fn standard_step_does_not_attack() {
        let (ds, tax, _) = tiny();
        let arch = desk_architecture(&ds).unwrap();
        let hyper = small_recipe(vec![]).hyperparameters;
        let mut state = initial_state(arch, &hyper, 0).unwrap();
        let batch: Vec<&Sample> = ds.samples.iter().take(4).collect();
        let before = state.model.params().checksum();
        let s = train_step(&mut state, &batch, &TrainingStage::new(Objective::Standard, 1), &hyper, None).unwrap();
        assert_eq!((s.attacks, s.grad_evals), (0, 0));
        assert_ne!(state.model.params().checksum(), before);
        let _ = tax;
    }

    #[test]
    fn training_log_csv() {
        let mut buf = Vec::new();
        write_training_log(
            &[EpochLog {
                epoch: 1,
                stage: 0,
                objective: Objective::SemanticTargeted {
                    epsilon: 2.5,
                    label_modification: true,
                }
                .to_string(),
                mean_loss: 2.0,
                train_acc: 0.25,
                attack_success_rate: Some(0.5),
                grad_evals: 10,
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,stage,objective,mean_loss,train_acc,attack_success_rate\n1,0,semantic_targeted[eps=2.5;lm],2.00000000,0.250000000,0.500000000\n"
        );
    }
}
