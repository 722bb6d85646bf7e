//! Run configuration, experiment orchestration and the on-disk layout used
//! by the command-line tool.
//!
//! Every output directory receives `config.json` (the resolved
//! configuration) and `manifest.json` before any result is written, and
//! `checksums.json` (SHA-256 of every other file) once the command is done.

pub mod chart;
pub mod cli;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{write_attack_csv, AttackInit, DEFAULT_STEPS};
use crate::corruption::{
    build_corrupted_set, load_precomputed_corruption_set, CorruptionKind, CorruptionSpec, ParameterTable,
};
use crate::data::{balanced_taxonomy, load_cifar100_dir, synthetic_for_taxonomy, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{
    adversarial_sweep, aggregate_by_severity, compare_models, corruption_sweep, write_records_csv,
    write_reports_csv, Comparison, Condition, Metric, SeverityAggregate, SeverityReport, DEFAULT_EPSILONS,
};
use crate::model::{hex, Checkpoint, Classifier, Network};
use crate::numfmt::{opt_sig9, sig9};
use crate::objectives::{
    preset, run_recipe, write_training_log, EpochLog, Hyperparameters, LrSchedule, Recipe, RecipeOptions, Scale,
    TrainingStage,
};
use crate::rng;
use crate::taxonomy::{build_similarity_matrix, build_target_sets, ClassTaxonomy, SemanticTargetSet, SimilarityMatrix};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKSUM_FILE: &str = "checksums.json";
pub const ADV_REPORTS: &str = "adv_reports.json";
pub const CORRUPTION_REPORTS: &str = "corruption_reports.json";
pub const FINAL_CHECKPOINT: &str = "final.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TaxonomySource {
    /// The bundled CIFAR-100 hierarchy.
    Cifar100,
    File { path: PathBuf },
    /// Two-level synthetic tree with about `sqrt(n)` groups.
    Balanced { num_classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Directory holding `train.bin` and `test.bin`.
    Cifar100 { dir: PathBuf },
    /// Images generated for the configured taxonomy.
    Synthetic {
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_image_size")]
        image_size: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Datasets written by `gen-data`.
    Saved { train: PathBuf, test: PathBuf },
}

fn default_train_per_class() -> usize {
    20
}

fn default_test_per_class() -> usize {
    10
}

fn default_image_size() -> usize {
    32
}

/// Hyperparameter fields that replace the recipe's defaults when present.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperOverrides {
    #[serde(default)]
    pub lr: Option<f32>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub momentum: Option<f32>,
    #[serde(default)]
    pub weight_decay: Option<f32>,
    #[serde(default)]
    pub lr_schedule: Option<LrSchedule>,
    /// `false` disables crop/flip augmentation.
    #[serde(default)]
    pub augment: Option<bool>,
    #[serde(default)]
    pub attack_steps: Option<usize>,
    #[serde(default)]
    pub epsilon_warmup_epochs: Option<usize>,
}

impl HyperOverrides {
    pub fn apply(&self, h: &mut Hyperparameters) {
        if let Some(v) = self.lr {
            h.lr = v;
        }
        if let Some(v) = self.batch_size {
            h.batch_size = v;
        }
        if let Some(v) = self.momentum {
            h.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            h.weight_decay = v;
        }
        if let Some(v) = &self.lr_schedule {
            h.lr_schedule = v.clone();
        }
        if self.augment == Some(false) {
            h.augmentation = None;
        }
        if let Some(v) = self.attack_steps {
            h.attack_steps = v;
        }
        if let Some(v) = self.epsilon_warmup_epochs {
            h.epsilon_warmup_epochs = v;
        }
    }
}

/// Either a named preset at some scale or inline stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeSpec {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default = "Scale::desk")]
    pub scale: Scale,
    #[serde(default)]
    pub name: Option<String>,
    /// Inline stages; epochs are used as given.
    #[serde(default)]
    pub stages: Option<Vec<TrainingStage>>,
    #[serde(default)]
    pub hyperparameters: HyperOverrides,
}

impl Default for RecipeSpec {
    fn default() -> Self {
        Self {
            preset: Some("Standard".into()),
            scale: Scale::desk(),
            name: None,
            stages: None,
            hyperparameters: HyperOverrides::default(),
        }
    }
}

impl RecipeSpec {
    pub fn resolve(&self) -> Result<Recipe> {
        let mut recipe = match (&self.preset, &self.stages) {
            (Some(_), Some(_)) => {
                return Err(Error::config("recipe", "give either `preset` or `stages`, not both"));
            }
            (None, None) => return Err(Error::config("recipe", "needs `preset` or `stages`")),
            (Some(name), None) => {
                let mut r = preset(name, self.scale).map_err(|e| Error::config("recipe.preset", e.to_string()))?;
                if let Some(n) = &self.name {
                    r.name = n.clone();
                }
                r
            }
            (None, Some(stages)) => Recipe {
                name: self.name.clone().unwrap_or_else(|| "custom".into()),
                stages: stages.clone(),
                hyperparameters: Hyperparameters::default(),
            },
        };
        self.hyperparameters.apply(&mut recipe.hyperparameters);
        recipe
            .validate()
            .map_err(|e| Error::config("recipe", e.to_string()))?;
        Ok(recipe)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackGrid {
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f32>,
}

fn default_epsilons() -> Vec<f32> {
    DEFAULT_EPSILONS.to_vec()
}

impl Default for AttackGrid {
    fn default() -> Self {
        Self {
            epsilons: default_epsilons(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum CorruptionSource {
    Native {
        #[serde(default = "all_kinds")]
        kinds: Vec<CorruptionKind>,
        #[serde(default = "all_severities")]
        severities: Vec<u8>,
    },
    Precomputed {
        manifest: PathBuf,
    },
}

fn all_kinds() -> Vec<CorruptionKind> {
    CorruptionKind::ALL.to_vec()
}

fn all_severities() -> Vec<u8> {
    vec![1, 2, 3, 4, 5]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_k() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub taxonomy: Option<TaxonomySource>,
    #[serde(default)]
    pub dataset: Option<DatasetSource>,
    /// Restrict taxonomy and data to these fine classes.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
    #[serde(default)]
    pub recipe: RecipeSpec,
    #[serde(default)]
    pub attack: AttackGrid,
    #[serde(default)]
    pub corruptions: Vec<CorruptionSource>,
    /// Defaults to the bundled table.
    #[serde(default)]
    pub corruption_table: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub target_k: usize,
    /// Evaluate on at most this many test images per class.
    #[serde(default)]
    pub eval_per_class: Option<usize>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

fn absolutize(p: &mut PathBuf, base: &Path) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parse JSON; relative paths are resolved against `base`.
    pub fn from_json(text: &str, base: Option<&Path>) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        if let Some(base) = base {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
        Self::from_json(&text, Some(&base))
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(TaxonomySource::File { path }) = &mut self.taxonomy {
            absolutize(path, base);
        }
        match &mut self.dataset {
            Some(DatasetSource::Cifar100 { dir }) => absolutize(dir, base),
            Some(DatasetSource::Saved { train, test }) => {
                absolutize(train, base);
                absolutize(test, base);
            }
            _ => {}
        }
        for c in &mut self.corruptions {
            if let CorruptionSource::Precomputed { manifest } = c {
                absolutize(manifest, base);
            }
        }
        if let Some(p) = &mut self.corruption_table {
            absolutize(p, base);
        }
        if let Some(p) = &mut self.output_dir {
            absolutize(p, base);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let set: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if set.len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds repeat"));
        }
        if self.target_k == 0 {
            return Err(Error::config("target_k", "must be at least 1"));
        }
        let eps = &self.attack.epsilons;
        if eps.is_empty() {
            return Err(Error::config("attack.epsilons", "grid is empty"));
        }
        if eps.iter().any(|e| !(e.is_finite() && *e >= 0.0)) || eps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("attack.epsilons", "must be finite, non-negative and strictly ascending"));
        }
        if let Some(classes) = &self.classes {
            if classes.len() < 2 {
                return Err(Error::config("classes", "a subset needs at least two classes"));
            }
        }
        if self.eval_per_class == Some(0) {
            return Err(Error::config("eval_per_class", "must be at least 1"));
        }
        for (i, c) in self.corruptions.iter().enumerate() {
            if let CorruptionSource::Native { kinds, severities } = c {
                if kinds.is_empty() || severities.is_empty() {
                    return Err(Error::config(format!("corruptions[{i}]"), "no kinds or severities"));
                }
                if let Some(s) = severities.iter().find(|s| !(1..=5).contains(*s)) {
                    return Err(Error::config(format!("corruptions[{i}].severities"), format!("severity {s} outside 1..=5")));
                }
            }
        }
        self.recipe.resolve()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Fully resolved configuration, including the expanded recipe.
    pub fn resolved_json(&self) -> Result<String> {
        let view = serde_json::json!({
            "config": self,
            "resolved_recipe": self.recipe.resolve()?,
        });
        Ok(serde_json::to_string_pretty(&view)?)
    }

    fn taxonomy_source(&self) -> Result<&TaxonomySource> {
        self.taxonomy
            .as_ref()
            .ok_or_else(|| Error::config("taxonomy", "required field is missing"))
    }

    fn dataset_source(&self) -> Result<&DatasetSource> {
        self.dataset
            .as_ref()
            .ok_or_else(|| Error::config("dataset", "required field is missing"))
    }

    /// Taxonomy after the optional class restriction, plus the original
    /// indices of the kept classes.
    pub fn load_taxonomy(&self) -> Result<(ClassTaxonomy, Option<Vec<usize>>)> {
        let base = match self.taxonomy_source()? {
            TaxonomySource::Cifar100 => ClassTaxonomy::cifar100(),
            TaxonomySource::File { path } => ClassTaxonomy::load(path).map_err(|e| match e {
                Error::File { .. } => Error::config("taxonomy.path", e.to_string()),
                other => other,
            })?,
            TaxonomySource::Balanced { num_classes } => {
                balanced_taxonomy(*num_classes).map_err(|e| Error::config("taxonomy.num_classes", e.to_string()))?
            }
        };
        match &self.classes {
            None => Ok((base, None)),
            Some(names) => {
                let names: Vec<&str> = names.iter().map(String::as_str).collect();
                let (sub, original) = base
                    .restrict(&names)
                    .map_err(|e| Error::config("classes", e.to_string()))?;
                Ok((sub, Some(original)))
            }
        }
    }

    /// One split of the configured dataset, in the taxonomy's label space.
    pub fn load_split(&self, tax: &ClassTaxonomy, original: Option<&[usize]>, split: Split) -> Result<Dataset> {
        let ds = match self.dataset_source()? {
            DatasetSource::Cifar100 { dir } => {
                if !dir.is_dir() {
                    return Err(Error::config("dataset.dir", format!("{} is not a directory", dir.display())));
                }
                let (train, test) = load_cifar100_dir(dir)?;
                let ds = if split == Split::Train { train } else { test };
                match original {
                    Some(o) => ds.restrict_classes(o, tax)?,
                    None => ds,
                }
            }
            DatasetSource::Synthetic {
                train_per_class,
                test_per_class,
                image_size,
                seed,
            } => {
                let per_class = if split == Split::Train { *train_per_class } else { *test_per_class };
                synthetic_for_taxonomy(tax, per_class, *image_size, *seed, split)?
            }
            DatasetSource::Saved { train, test } => {
                let (field, path) = if split == Split::Train {
                    ("dataset.train", train)
                } else {
                    ("dataset.test", test)
                };
                if !path.is_file() {
                    return Err(Error::config(field, format!("{} does not exist", path.display())));
                }
                Dataset::load(path)?
            }
        };
        ds.validate(tax)?;
        Ok(match (split, self.eval_per_class) {
            (Split::Test, Some(n)) => ds.take_per_class(n),
            _ => ds,
        })
    }

    fn parameter_table(&self) -> Result<ParameterTable> {
        match &self.corruption_table {
            None => Ok(ParameterTable::default()),
            Some(p) => ParameterTable::load(p).map_err(|e| Error::config("corruption_table", e.to_string())),
        }
    }
}

/// Choices fixed by this implementation that affect results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignDecisions {
    pub initialization: String,
    pub attack_init: AttackInit,
    pub attack_steps: usize,
    pub attack_step_size: String,
    pub path_similarity: String,
    pub target_tie_break: String,
    pub prediction_tie_break: String,
    #[serde(default)]
    pub corruption_parameters: Option<serde_json::Value>,
}

impl DesignDecisions {
    fn current(table: Option<&ParameterTable>) -> Self {
        Self {
            initialization: "he-normal; first-layer bias centres mid-grey input; final layer scaled by 0.01".into(),
            attack_init: AttackInit::Zero,
            attack_steps: DEFAULT_STEPS,
            attack_step_size: "2.5*epsilon/steps".into(),
            path_similarity: "1/(d+1)".into(),
            target_tie_break: "ascending class index".into(),
            prediction_tie_break: "lowest class index".into(),
            corruption_parameters: table.map(|t| serde_json::from_str(&t.to_json()).expect("table json")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    #[serde(default)]
    pub config: Option<RunConfig>,
    #[serde(default)]
    pub recipe: Option<Recipe>,
    pub decisions: DesignDecisions,
    /// SHA-256 of every input.
    pub inputs: BTreeMap<String, String>,
}

fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::file(path, e))?))
}

/// Digest of labels and pixels.
pub fn dataset_digest(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    for s in &ds.samples {
        h.update((s.fine_label as u64).to_le_bytes());
        h.update((s.coarse_label as u64).to_le_bytes());
        for v in &s.image.pixels {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::file(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::file(path, e))?))
}

/// Write config and manifest into `out`. A directory already holding a
/// different manifest is refused.
fn begin_run(out: &Path, config: Option<&RunConfig>, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    let text = serde_json::to_string_pretty(manifest)?;
    let path = out.join(MANIFEST_FILE);
    if path.exists() {
        let existing = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        if existing != text {
            return Err(Error::invalid(format!(
                "{} already holds a different run; choose another output directory",
                out.display()
            )));
        }
    }
    if let Some(cfg) = config {
        write_file(&out.join(CONFIG_FILE), cfg.to_json())?;
    }
    write_file(&path, text)
}

fn list_files(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            list_files(&p, root, out)?;
        } else if p.strip_prefix(root).map(|r| r != Path::new(CHECKSUM_FILE)).unwrap_or(false) {
            out.push(p);
        }
    }
    Ok(())
}

/// Digest every file under `out` into `checksums.json`.
pub fn write_checksums(out: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    list_files(out, out, &mut files)?;
    let mut sums = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(out).expect("listed under root");
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        sums.insert(key, file_digest(&f)?);
    }
    write_file(&out.join(CHECKSUM_FILE), serde_json::to_string_pretty(&sums)?)?;
    Ok(sums)
}

/// A checkpoint under evaluation and the name it is reported under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelRef {
    pub name: String,
    pub path: PathBuf,
}

impl ModelRef {
    /// `name=path`, or a bare path named after its parent directory and stem.
    pub fn parse(arg: &str) -> Self {
        if let Some((name, path)) = arg.split_once('=') {
            if !name.is_empty() && !name.contains(['/', '\\']) {
                return Self {
                    name: name.into(),
                    path: path.into(),
                };
            }
        }
        let path = PathBuf::from(arg);
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let parent = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned());
        let name = match parent {
            Some(p) => format!("{p}/{stem}"),
            None => stem,
        };
        Self { name, path }
    }
}

/// One model's evaluation reports as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub model: String,
    pub checkpoint_sha256: String,
    pub reports: Vec<SeverityReport>,
    #[serde(default)]
    pub aggregates: Vec<SeverityAggregate>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub seed: u64,
    pub dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub final_checksum: String,
    pub checkpoints: Vec<PathBuf>,
    pub log: Vec<EpochLog>,
}

/// Train the configured recipe once per seed. Seed `s` writes
/// `seed-<s>/checkpoints/<label>.json`, `seed-<s>/final.json` and
/// `seed-<s>/training_log.csv`.
pub fn cmd_train(
    cfg: &RunConfig,
    out: &Path,
    mut on_epoch: Option<&mut dyn FnMut(u64, &EpochLog)>,
) -> Result<Vec<TrainSummary>> {
    let recipe = cfg.recipe.resolve()?;
    let (tax, original) = cfg.load_taxonomy()?;
    let train = cfg.load_split(&tax, original.as_deref(), Split::Train)?;
    let sim = build_similarity_matrix(&tax);
    let targets = if recipe.needs_targets() {
        Some(build_target_sets(&sim, cfg.target_k).map_err(|e| Error::config("target_k", e.to_string()))?)
    } else {
        None
    };
    let mut inputs = BTreeMap::new();
    inputs.insert("taxonomy".into(), sha256_hex(tax.to_json().as_bytes()));
    inputs.insert("train_set".into(), dataset_digest(&train));
    let manifest = RunManifest {
        command: "train".into(),
        code_version: code_version(),
        config: Some(cfg.clone()),
        recipe: Some(recipe.clone()),
        decisions: DesignDecisions::current(None),
        inputs,
    };
    begin_run(out, Some(cfg), &manifest)?;

    let mut summaries = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let dir = out.join(format!("seed-{seed}"));
        let ck_dir = dir.join("checkpoints");
        let mut written = Vec::new();
        let mut save = |state: &crate::model::TrainState, ev: crate::objectives::CheckpointEvent| -> Result<()> {
            let path = ck_dir.join(format!("{}.json", ev.label()));
            Checkpoint::write(state, &path, Some(ev.stage), Some(&ev.label()))?;
            written.push(path);
            Ok(())
        };
        let mut log_epoch = |row: &EpochLog| {
            if let Some(f) = on_epoch.as_mut() {
                f(seed, row);
            }
        };
        let outcome = run_recipe(
            &recipe,
            &train,
            &tax,
            targets.as_ref(),
            seed,
            RecipeOptions {
                architecture: None,
                checkpoint_every: cfg.checkpoint_every,
                on_checkpoint: Some(&mut save),
                on_epoch: Some(&mut log_epoch),
            },
        )?;
        let final_checkpoint = dir.join(FINAL_CHECKPOINT);
        let m = Checkpoint::write(
            &outcome.state,
            &final_checkpoint,
            Some(recipe.stages.len() - 1),
            Some("final"),
        )?;
        write_training_log(&outcome.log, create(&dir.join("training_log.csv"))?)?;
        summaries.push(TrainSummary {
            seed,
            dir,
            final_checkpoint,
            final_checksum: m.param_checksum,
            checkpoints: written,
            log: outcome.log,
        });
    }
    write_checksums(out)?;
    Ok(summaries)
}

fn load_model(model: &ModelRef, tax: &ClassTaxonomy, test: &Dataset) -> Result<(Network<f32>, String)> {
    let ck = Checkpoint::read(&model.path)?;
    let arch = ck.state.model.descriptor().clone();
    if arch.num_classes() != tax.num_fine() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint {} has {} outputs, taxonomy has {} classes",
            model.path.display(),
            arch.num_classes(),
            tax.num_fine()
        )));
    }
    if let Some(shape) = test.image_shape() {
        if arch.input_shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint {} expects inputs {:?}, data has {:?}",
                model.path.display(),
                arch.input_shape(),
                shape
            )));
        }
    }
    Ok((ck.state.model, file_digest(&model.path)?))
}

fn metric_panels(title_suffix: &str, x_label: &str, lines: &[(String, Vec<(f64, &SeverityReport)>)]) -> Vec<chart::Panel> {
    Metric::ALL
        .iter()
        .rev()
        .map(|&m| chart::Panel {
            title: match m {
                Metric::CoarseAccuracyOfMistakes => format!("Coarse accuracy of mistakes{title_suffix}"),
                Metric::AvgMistakePathSimilarity => format!("Average mistake path similarity{title_suffix}"),
            },
            x_label: x_label.into(),
            y_label: m.name().into(),
            series: lines
                .iter()
                .map(|(name, pts)| chart::Series {
                    name: name.clone(),
                    points: pts.iter().map(|(x, r)| (*x, r.metric(m))).collect(),
                })
                .collect(),
            y_range: None,
        })
        .collect()
}

fn eps_points(reports: &[SeverityReport]) -> Vec<(f64, &SeverityReport)> {
    reports
        .iter()
        .filter_map(|r| match r.condition {
            Condition::Adversarial { epsilon } => Some((epsilon as f64, r)),
            _ => None,
        })
        .collect()
}

fn aggregate_panels(lines: &[(String, Vec<SeverityAggregate>)]) -> Vec<chart::Panel> {
    let panel = |title: &str, y: &str, f: fn(&SeverityAggregate) -> Option<f64>| chart::Panel {
        title: title.into(),
        x_label: "severity".into(),
        y_label: y.into(),
        series: lines
            .iter()
            .map(|(name, aggs)| chart::Series {
                name: name.clone(),
                points: aggs.iter().map(|a| (a.severity as f64, f(a))).collect(),
            })
            .collect(),
        y_range: None,
    };
    vec![
        panel("Coarse accuracy of mistakes by severity", "coarse_acc_mistakes", |a| {
            a.mean_coarse_accuracy_of_mistakes
        }),
        panel("Average mistake path similarity by severity", "avg_path_sim", |a| {
            a.mean_avg_mistake_path_similarity
        }),
    ]
}

pub fn write_aggregates_csv<W: std::io::Write>(aggs: &[SeverityAggregate], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["severity", "kinds", "coarse_acc_mistakes", "avg_path_sim"])?;
    for a in aggs {
        w.write_record([
            a.severity.to_string(),
            a.kinds.to_string(),
            opt_sig9(a.mean_coarse_accuracy_of_mistakes),
            opt_sig9(a.mean_avg_mistake_path_similarity),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn condition_file_tag(c: &Condition) -> String {
    match c {
        Condition::Clean => "clean".into(),
        Condition::Adversarial { epsilon } => format!("eps_{epsilon}"),
        Condition::Corruption { kind, severity } => format!("{kind}_{severity}"),
    }
}

/// Adversarial ε-sweep of one checkpoint on the configured test set.
pub fn cmd_eval_adv(cfg: &RunConfig, model: &ModelRef, out: &Path) -> Result<Vec<SeverityReport>> {
    let (tax, original) = cfg.load_taxonomy()?;
    let test = cfg.load_split(&tax, original.as_deref(), Split::Test)?;
    let sim = build_similarity_matrix(&tax);
    let (net, digest) = load_model(model, &tax, &test)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("checkpoint".into(), digest.clone());
    inputs.insert("taxonomy".into(), sha256_hex(tax.to_json().as_bytes()));
    inputs.insert("test_set".into(), dataset_digest(&test));
    let manifest = RunManifest {
        command: "eval-adv".into(),
        code_version: code_version(),
        config: Some(cfg.clone()),
        recipe: None,
        decisions: DesignDecisions::current(None),
        inputs,
    };
    begin_run(out, Some(cfg), &manifest)?;

    let results = adversarial_sweep(&net, &test, &tax, &sim, &cfg.attack.epsilons, cfg.seeds[0])?;
    let reports: Vec<SeverityReport> = results.iter().map(|r| r.report.clone()).collect();
    for r in &results {
        let tag = condition_file_tag(&r.report.condition);
        write_records_csv(&r.records, create(&out.join("records").join(format!("{tag}.csv")))?)?;
    }
    let attacks: Vec<_> = results.iter().flat_map(|r| r.attacks.iter().cloned()).collect();
    write_attack_csv(&attacks, create(&out.join("adv_attacks.csv"))?)?;
    write_reports_csv(&reports, create(&out.join("adv_reports.csv"))?)?;
    let file = ResultFile {
        model: model.name.clone(),
        checkpoint_sha256: digest,
        reports: reports.clone(),
        aggregates: Vec::new(),
    };
    write_file(&out.join(ADV_REPORTS), serde_json::to_string_pretty(&file)?)?;
    let lines = vec![(model.name.clone(), eps_points(&reports))];
    write_file(&out.join("adv_sweep.svg"), chart::render(&metric_panels(" vs ε", "ε (L2)", &lines)))?;
    write_checksums(out)?;
    Ok(reports)
}

/// Corrupted versions of the configured test set, one per (kind, severity).
pub fn corrupted_sets(cfg: &RunConfig, tax: &ClassTaxonomy, original: Option<&[usize]>, test: &Dataset) -> Result<Vec<Dataset>> {
    if cfg.corruptions.is_empty() {
        return Err(Error::config("corruptions", "no corruption sources configured"));
    }
    let table = cfg.parameter_table()?;
    let mut sets = Vec::new();
    for (i, src) in cfg.corruptions.iter().enumerate() {
        match src {
            CorruptionSource::Native { kinds, severities } => {
                for &kind in kinds {
                    for &severity in severities {
                        let ki = CorruptionKind::ALL.iter().position(|k| *k == kind).expect("known kind") as u64;
                        let seed = rng::derive(cfg.seeds[0], 0x100 + 8 * ki + severity as u64);
                        let spec = CorruptionSpec::new(kind, severity, seed)?;
                        sets.push(build_corrupted_set(test, &spec, &table)?);
                    }
                }
            }
            CorruptionSource::Precomputed { manifest } => {
                if !manifest.is_file() {
                    return Err(Error::config(
                        format!("corruptions[{i}].manifest"),
                        format!("{} does not exist", manifest.display()),
                    ));
                }
                let loaded = match original {
                    None => load_precomputed_corruption_set(manifest, tax)?,
                    Some(o) => {
                        let (base, _) = RunConfig {
                            classes: None,
                            ..cfg.clone()
                        }
                        .load_taxonomy()?;
                        load_precomputed_corruption_set(manifest, &base)?
                            .into_iter()
                            .map(|ds| {
                                let provenance = ds.provenance.clone();
                                let mut sub = ds.restrict_classes(o, tax)?;
                                sub.provenance = provenance;
                                Ok(sub)
                            })
                            .collect::<Result<Vec<_>>>()?
                    }
                };
                for ds in loaded {
                    sets.push(match cfg.eval_per_class {
                        Some(n) => ds.take_per_class(n),
                        None => ds,
                    });
                }
            }
        }
    }
    let mut seen = BTreeSet::new();
    for ds in &sets {
        let (kind, severity) = ds.provenance.corruption().expect("corrupted provenance");
        if !seen.insert((kind.to_string(), severity)) {
            return Err(Error::config("corruptions", format!("{kind} severity {severity} appears twice")));
        }
    }
    Ok(sets)
}

/// Evaluate each checkpoint on every configured corruption. With several
/// models each gets a subdirectory named after it; the severity chart has
/// one line per model.
pub fn cmd_eval_corrupt(cfg: &RunConfig, models: &[ModelRef], out: &Path) -> Result<Vec<ResultFile>> {
    if models.is_empty() {
        return Err(Error::config("--checkpoint", "at least one checkpoint is required"));
    }
    let names: BTreeSet<&str> = models.iter().map(|m| m.name.as_str()).collect();
    if names.len() != models.len() {
        return Err(Error::config("--checkpoint", "model names repeat; use name=path"));
    }
    let (tax, original) = cfg.load_taxonomy()?;
    let test = cfg.load_split(&tax, original.as_deref(), Split::Test)?;
    let sim = build_similarity_matrix(&tax);
    let table = cfg.parameter_table()?;
    let mut loaded = Vec::with_capacity(models.len());
    let mut inputs = BTreeMap::new();
    for m in models {
        let (net, digest) = load_model(m, &tax, &test)?;
        inputs.insert(format!("checkpoint:{}", m.name), digest.clone());
        loaded.push((m, net, digest));
    }
    inputs.insert("taxonomy".into(), sha256_hex(tax.to_json().as_bytes()));
    inputs.insert("test_set".into(), dataset_digest(&test));
    for (i, src) in cfg.corruptions.iter().enumerate() {
        if let CorruptionSource::Precomputed { manifest } = src {
            if manifest.is_file() {
                inputs.insert(format!("corruptions[{i}]"), file_digest(manifest)?);
            }
        }
    }
    let manifest = RunManifest {
        command: "eval-corrupt".into(),
        code_version: code_version(),
        config: Some(cfg.clone()),
        recipe: None,
        decisions: DesignDecisions::current(Some(&table)),
        inputs,
    };
    begin_run(out, Some(cfg), &manifest)?;

    let sets = corrupted_sets(cfg, &tax, original.as_deref(), &test)?;
    let mut files = Vec::with_capacity(models.len());
    for (m, net, digest) in loaded {
        let (grid, records) = corruption_sweep(&net, &sets, &tax, &sim)?;
        let dir = if models.len() == 1 { out.to_path_buf() } else { out.join(&m.name) };
        for (r, recs) in grid.reports.iter().zip(&records) {
            let tag = condition_file_tag(&r.condition);
            write_records_csv(recs, create(&dir.join("records").join(format!("{tag}.csv")))?)?;
        }
        write_reports_csv(&grid.reports, create(&dir.join("corruption_reports.csv"))?)?;
        write_aggregates_csv(&grid.aggregates, create(&dir.join("corruption_aggregates.csv"))?)?;
        let file = ResultFile {
            model: m.name.clone(),
            checkpoint_sha256: digest,
            reports: grid.reports,
            aggregates: grid.aggregates,
        };
        write_file(&dir.join(CORRUPTION_REPORTS), serde_json::to_string_pretty(&file)?)?;
        files.push(file);
    }
    let lines: Vec<(String, Vec<SeverityAggregate>)> =
        files.iter().map(|f| (f.model.clone(), f.aggregates.clone())).collect();
    write_file(&out.join("corruption_severity.svg"), chart::render(&aggregate_panels(&lines)))?;
    write_checksums(out)?;
    Ok(files)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub adversarial: Option<Comparison>,
    pub corruption: Option<Comparison>,
}

fn read_result(path: &Path) -> Result<ResultFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_comparison(out: &Path, family: &str, files: &[ResultFile], cmp: &Comparison) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(&out.join(format!("{family}_win_counts.csv")))?);
    w.write_record(["model", "metric", "level", "wins", "ties"])?;
    for c in &cmp.win_counts {
        w.write_record([c.model.clone(), c.metric.name().into(), c.level.clone(), c.wins.to_string(), c.ties.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create(&out.join(format!("{family}_outcomes.csv")))?);
    w.write_record(["condition", "metric", "winner", "tied"])?;
    for o in &cmp.outcomes {
        w.write_record([
            o.condition.to_string(),
            o.metric.name().into(),
            o.winner.clone().unwrap_or_else(|| "-".into()),
            o.tied.join(";"),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create(&out.join(format!("{family}_reports.csv")))?);
    let mut header_done = false;
    for f in files {
        let mut buf = Vec::new();
        write_reports_csv(&f.reports, &mut buf)?;
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(buf.as_slice());
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if i == 0 {
                if !header_done {
                    let mut h = vec!["model".to_string()];
                    h.extend(rec.iter().map(String::from));
                    w.write_record(&h)?;
                    header_done = true;
                }
                continue;
            }
            let mut row = vec![f.model.clone()];
            row.extend(rec.iter().map(String::from));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Compare the evaluation results found in `dirs` and write win-count
/// tables plus overlaid charts.
pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<ReportSummary> {
    if dirs.is_empty() {
        return Err(Error::config("dirs", "at least one result directory is required"));
    }
    let mut families: BTreeMap<&str, Vec<Option<ResultFile>>> = BTreeMap::new();
    let mut inputs = BTreeMap::new();
    for (family, file) in [("adversarial", ADV_REPORTS), ("corruption", CORRUPTION_REPORTS)] {
        let mut found = Vec::new();
        for d in dirs {
            let p = d.join(file);
            found.push(if p.is_file() {
                inputs.insert(p.display().to_string(), file_digest(&p)?);
                Some(read_result(&p)?)
            } else {
                None
            });
        }
        families.insert(family, found);
    }
    let mut missing = Vec::new();
    for (family, found) in &families {
        let have = found.iter().filter(|f| f.is_some()).count();
        if have > 0 && have < found.len() {
            for (d, f) in dirs.iter().zip(found) {
                if f.is_none() {
                    missing.push(format!("{}: {family} reports", d.display()));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::GridMismatch { missing });
    }
    if families.values().all(|f| f.iter().all(Option::is_none)) {
        return Err(Error::invalid("no evaluation reports found in the given directories"));
    }
    let manifest = RunManifest {
        command: "report".into(),
        code_version: code_version(),
        config: None,
        recipe: None,
        decisions: DesignDecisions::current(None),
        inputs,
    };
    begin_run(out, None, &manifest)?;

    let mut summary = ReportSummary {
        adversarial: None,
        corruption: None,
    };
    for (family, found) in families {
        if found.iter().any(Option::is_none) {
            continue;
        }
        let mut files: Vec<ResultFile> = found.into_iter().flatten().collect();
        let mut seen = BTreeSet::new();
        for (f, d) in files.iter_mut().zip(dirs) {
            if !seen.insert(f.model.clone()) {
                f.model = format!("{} ({})", f.model, d.display());
                seen.insert(f.model.clone());
            }
        }
        let named: Vec<(String, Vec<SeverityReport>)> =
            files.iter().map(|f| (f.model.clone(), f.reports.clone())).collect();
        let cmp = compare_models(&named)?;
        write_comparison(out, family, &files, &cmp)?;
        if family == "adversarial" {
            let lines: Vec<(String, Vec<(f64, &SeverityReport)>)> =
                files.iter().map(|f| (f.model.clone(), eps_points(&f.reports))).collect();
            write_file(&out.join("adversarial_sweep.svg"), chart::render(&metric_panels(" vs ε", "ε (L2)", &lines)))?;
            summary.adversarial = Some(cmp);
        } else {
            let lines: Vec<(String, Vec<SeverityAggregate>)> = files
                .iter()
                .map(|f| {
                    let aggs = if f.aggregates.is_empty() { aggregate_by_severity(&f.reports) } else { f.aggregates.clone() };
                    (f.model.clone(), aggs)
                })
                .collect();
            write_file(&out.join("corruption_severity.svg"), chart::render(&aggregate_panels(&lines)))?;
            summary.corruption = Some(cmp);
        }
    }
    write_file(
        &out.join("comparison.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "adversarial": summary.adversarial,
            "corruption": summary.corruption,
        }))?,
    )?;
    write_checksums(out)?;
    Ok(summary)
}

/// Write the resolved taxonomy, its similarity matrix and the semantic
/// target sets.
pub fn cmd_make_targets(cfg: &RunConfig, out: &Path) -> Result<SemanticTargetSet> {
    let (tax, _) = cfg.load_taxonomy()?;
    let sim: SimilarityMatrix = build_similarity_matrix(&tax);
    let targets = build_target_sets(&sim, cfg.target_k).map_err(|e| Error::config("target_k", e.to_string()))?;
    let mut inputs = BTreeMap::new();
    inputs.insert("taxonomy".into(), sha256_hex(tax.to_json().as_bytes()));
    let manifest = RunManifest {
        command: "make-targets".into(),
        code_version: code_version(),
        config: Some(cfg.clone()),
        recipe: None,
        decisions: DesignDecisions::current(None),
        inputs,
    };
    begin_run(out, Some(cfg), &manifest)?;
    write_file(&out.join("taxonomy.json"), tax.to_json())?;
    sim.write_csv(create(&out.join("similarity.csv"))?)?;
    write_file(&out.join("targets.json"), serde_json::to_string_pretty(&targets)?)?;
    write_checksums(out)?;
    Ok(targets)
}

/// Materialise the configured train and test sets as `train.json` and
/// `test.json` (each with a sibling `.f32` tensor file).
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<(Dataset, Dataset)> {
    let (tax, original) = cfg.load_taxonomy()?;
    let train = cfg.load_split(&tax, original.as_deref(), Split::Train)?;
    let test = cfg.load_split(&tax, original.as_deref(), Split::Test)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("taxonomy".into(), sha256_hex(tax.to_json().as_bytes()));
    let manifest = RunManifest {
        command: "gen-data".into(),
        code_version: code_version(),
        config: Some(cfg.clone()),
        recipe: None,
        decisions: DesignDecisions::current(None),
        inputs,
    };
    begin_run(out, Some(cfg), &manifest)?;
    write_file(&out.join("taxonomy.json"), tax.to_json())?;
    train.save(out.join("train.json"))?;
    test.save(out.join("test.json"))?;
    write_checksums(out)?;
    Ok((train, test))
}

/// Human-readable one-line summary of a report.
pub fn report_line(r: &SeverityReport) -> String {
    format!(
        "{} top1={} mistakes={} coarse_acc_mistakes={} avg_path_sim={}",
        r.condition,
        sig9(r.top1_accuracy),
        r.n_mistakes,
        opt_sig9(r.coarse_accuracy_of_mistakes),
        opt_sig9(r.avg_mistake_path_similarity)
    )
}
