//! Mistake-severity metrics and the evaluation sweeps.
//!
//! Both severity metrics are computed over mistakes only: the mean path
//! similarity between predicted and true class, and the fraction of mistakes
//! that stay inside the true coarse class. With no mistakes both are absent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, AttackMode, AttackRecord, DEFAULT_STEPS};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{argmax, Classifier};
use crate::numfmt::{opt_sig9, sig9};
use crate::taxonomy::{ClassTaxonomy, SimilarityMatrix};

/// The evaluation grid used when none is configured.
pub const DEFAULT_EPSILONS: [f32; 8] = [0.0, 0.25, 0.5, 1.0, 1.5, 1.75, 2.0, 2.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: usize,
    pub true_fine: usize,
    pub pred_fine: usize,
    pub true_coarse: usize,
    pub pred_coarse: usize,
}

impl EvalRecord {
    pub fn new(sample_id: usize, true_fine: usize, pred_fine: usize, tax: &ClassTaxonomy) -> Result<Self> {
        Ok(Self {
            sample_id,
            true_fine,
            pred_fine,
            true_coarse: tax.coarse_of(true_fine)?,
            pred_coarse: tax.coarse_of(pred_fine)?,
        })
    }

    pub fn is_mistake(&self) -> bool {
        self.pred_fine != self.true_fine
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "condition", rename_all = "snake_case")]
pub enum Condition {
    Clean,
    Adversarial { epsilon: f32 },
    Corruption { kind: String, severity: u8 },
}

impl Condition {
    fn name(&self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Adversarial { .. } => "adversarial",
            Condition::Corruption { .. } => "corruption",
        }
    }

    /// Grouping level for win counts: the ε or the severity.
    pub fn level(&self) -> String {
        match self {
            Condition::Clean => "clean".into(),
            Condition::Adversarial { epsilon } => format!("eps={epsilon}"),
            Condition::Corruption { severity, .. } => format!("severity={severity}"),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Clean => write!(f, "clean"),
            Condition::Adversarial { epsilon } => write!(f, "adversarial[eps={epsilon}]"),
            Condition::Corruption { kind, severity } => write!(f, "{kind}[severity={severity}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityReport {
    pub condition: Condition,
    pub n_total: usize,
    pub n_mistakes: usize,
    pub top1_accuracy: f64,
    pub avg_mistake_path_similarity: Option<f64>,
    pub coarse_accuracy_of_mistakes: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    AvgMistakePathSimilarity,
    CoarseAccuracyOfMistakes,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::AvgMistakePathSimilarity, Metric::CoarseAccuracyOfMistakes];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::AvgMistakePathSimilarity => "avg_path_sim",
            Metric::CoarseAccuracyOfMistakes => "coarse_acc_mistakes",
        }
    }
}

impl SeverityReport {
    pub fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::AvgMistakePathSimilarity => self.avg_mistake_path_similarity,
            Metric::CoarseAccuracyOfMistakes => self.coarse_accuracy_of_mistakes,
        }
    }
}

/// Predict every sample; ties go to the lowest class index.
pub fn evaluate<M>(model: &M, dataset: &Dataset, tax: &ClassTaxonomy) -> Result<Vec<EvalRecord>>
where
    M: Classifier<f32> + ?Sized,
{
    check_label_space(model, dataset, tax)?;
    let preds: Vec<usize> = dataset
        .samples
        .par_iter()
        .map(|s| model.logits(&s.image.pixels).map(|z| argmax(&z)))
        .collect::<Result<_>>()?;
    dataset
        .samples
        .iter()
        .zip(preds)
        .enumerate()
        .map(|(i, (s, p))| EvalRecord::new(i, s.fine_label, p, tax))
        .collect()
}

fn check_label_space<M>(model: &M, dataset: &Dataset, tax: &ClassTaxonomy) -> Result<()>
where
    M: Classifier<f32> + ?Sized,
{
    if model.num_classes() != tax.num_fine() || dataset.num_classes != tax.num_fine() {
        return Err(Error::ShapeMismatch(format!(
            "model predicts {} classes, dataset has {}, taxonomy has {}",
            model.num_classes(),
            dataset.num_classes,
            tax.num_fine()
        )));
    }
    Ok(())
}

/// Summarise `records` under `condition`.
pub fn severity_report(
    records: &[EvalRecord],
    sim: &SimilarityMatrix,
    tax: &ClassTaxonomy,
    condition: Condition,
) -> Result<SeverityReport> {
    if records.is_empty() {
        return Err(Error::invalid("no records to summarise"));
    }
    if sim.len() != tax.num_fine() {
        return Err(Error::ShapeMismatch(format!(
            "similarity matrix covers {} classes, taxonomy has {}",
            sim.len(),
            tax.num_fine()
        )));
    }
    // Aggregating by (true, pred) pair and summing in index order makes the
    // result independent of record order.
    let mut pairs: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut coarse_hits = 0usize;
    let mut mistakes = 0usize;
    for r in records {
        if r.true_coarse != tax.coarse_of(r.true_fine)? || r.pred_coarse != tax.coarse_of(r.pred_fine)? {
            return Err(Error::invalid(format!(
                "record {} has coarse labels inconsistent with the taxonomy",
                r.sample_id
            )));
        }
        if r.is_mistake() {
            mistakes += 1;
            *pairs.entry((r.true_fine, r.pred_fine)).or_default() += 1;
            if r.pred_coarse == r.true_coarse {
                coarse_hits += 1;
            }
        }
    }
    let (avg, coarse) = if mistakes == 0 {
        (None, None)
    } else {
        let total: f64 = pairs
            .iter()
            .map(|(&(t, p), &n)| n as f64 * sim.get(t, p))
            .sum();
        (
            Some(total / mistakes as f64),
            Some(coarse_hits as f64 / mistakes as f64),
        )
    };
    Ok(SeverityReport {
        condition,
        n_total: records.len(),
        n_mistakes: mistakes,
        top1_accuracy: 1.0 - mistakes as f64 / records.len() as f64,
        avg_mistake_path_similarity: avg,
        coarse_accuracy_of_mistakes: coarse,
    })
}

/// Report, the records behind it, and (for attacked conditions) per-sample
/// attack outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionResult {
    pub report: SeverityReport,
    pub records: Vec<EvalRecord>,
    pub attacks: Vec<AttackRecord>,
}

/// Untargeted L2 PGD at each ε (zero-initialised, default step size); ε = 0
/// evaluates clean images.
pub fn adversarial_sweep<M>(
    model: &M,
    dataset: &Dataset,
    tax: &ClassTaxonomy,
    sim: &SimilarityMatrix,
    epsilons: &[f32],
    seed: u64,
) -> Result<Vec<ConditionResult>>
where
    M: Classifier<f32> + ?Sized,
{
    if epsilons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("epsilons must be strictly ascending"));
    }
    if epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
        return Err(Error::invalid("epsilons must be finite and non-negative"));
    }
    check_label_space(model, dataset, tax)?;
    let mut out = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        if eps == 0.0 {
            let records = evaluate(model, dataset, tax)?;
            let report = severity_report(&records, sim, tax, Condition::Adversarial { epsilon: 0.0 })?;
            out.push(ConditionResult {
                report,
                records,
                attacks: Vec::new(),
            });
            continue;
        }
        let cfg = AttackConfig::with_steps(eps, DEFAULT_STEPS, AttackMode::Untargeted);
        let jobs: Vec<(&Sample, AttackConfig)> = dataset.samples.iter().map(|s| (s, cfg)).collect();
        let results = attack::run_pgd_batch(model, &jobs, seed)?;
        let mut records = Vec::with_capacity(results.len());
        let mut attacks = Vec::with_capacity(results.len());
        for (i, (s, r)) in dataset.samples.iter().zip(&results).enumerate() {
            records.push(EvalRecord::new(i, s.fine_label, r.pred_class, tax)?);
            attacks.push(AttackRecord {
                sample_id: i,
                mode: AttackMode::Untargeted,
                epsilon: eps,
                success: r.success,
                final_loss: r.final_loss(),
                pred_class: r.pred_class,
            });
        }
        let report = severity_report(&records, sim, tax, Condition::Adversarial { epsilon: eps })?;
        out.push(ConditionResult {
            report,
            records,
            attacks,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityAggregate {
    pub severity: u8,
    pub kinds: usize,
    /// Mean over kinds whose metric is present.
    pub mean_coarse_accuracy_of_mistakes: Option<f64>,
    pub mean_avg_mistake_path_similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionGrid {
    pub reports: Vec<SeverityReport>,
    pub aggregates: Vec<SeverityAggregate>,
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Aggregate per-severity means over the corruption kinds present.
pub fn aggregate_by_severity(reports: &[SeverityReport]) -> Vec<SeverityAggregate> {
    let mut by: BTreeMap<u8, Vec<&SeverityReport>> = BTreeMap::new();
    for r in reports {
        if let Condition::Corruption { severity, .. } = r.condition {
            by.entry(severity).or_default().push(r);
        }
    }
    by.into_iter()
        .map(|(severity, rs)| SeverityAggregate {
            severity,
            kinds: rs.len(),
            mean_coarse_accuracy_of_mistakes: mean_present(rs.iter().map(|r| r.coarse_accuracy_of_mistakes)),
            mean_avg_mistake_path_similarity: mean_present(rs.iter().map(|r| r.avg_mistake_path_similarity)),
        })
        .collect()
}

/// One report per corrupted set, plus per-severity aggregates.
pub fn corruption_sweep<M>(
    model: &M,
    sets: &[Dataset],
    tax: &ClassTaxonomy,
    sim: &SimilarityMatrix,
) -> Result<(CorruptionGrid, Vec<Vec<EvalRecord>>)>
where
    M: Classifier<f32> + ?Sized,
{
    let mut reports = Vec::with_capacity(sets.len());
    let mut all_records = Vec::with_capacity(sets.len());
    for ds in sets {
        let (kind, severity) = ds.provenance.corruption().ok_or_else(|| {
            Error::invalid("corruption sweep given a dataset without corruption provenance")
        })?;
        let condition = Condition::Corruption {
            kind: kind.to_string(),
            severity,
        };
        let records = evaluate(model, ds, tax)?;
        reports.push(severity_report(&records, sim, tax, condition)?);
        all_records.push(records);
    }
    let aggregates = aggregate_by_severity(&reports);
    Ok((CorruptionGrid { reports, aggregates }, all_records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionOutcome {
    pub condition: Condition,
    pub metric: Metric,
    /// Sole holder of the strictly best value.
    pub winner: Option<String>,
    /// Models sharing the best value when it is not unique.
    pub tied: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinCount {
    pub model: String,
    pub metric: Metric,
    pub level: String,
    pub wins: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub outcomes: Vec<ConditionOutcome>,
    pub win_counts: Vec<WinCount>,
}

/// Rank models per condition and metric. A model wins only when its value is
/// strictly greater than every other model's; shared maxima count as ties.
/// Models with an absent metric do not compete for that condition.
pub fn compare_models(models: &[(String, Vec<SeverityReport>)]) -> Result<Comparison> {
    let Some((_, first)) = models.first() else {
        return Err(Error::invalid("no models to compare"));
    };
    let keys: Vec<String> = first.iter().map(|r| r.condition.to_string()).collect();
    let key_set: BTreeSet<&String> = keys.iter().collect();
    if key_set.len() != keys.len() {
        return Err(Error::invalid("duplicate condition in report grid"));
    }
    let mut lookup: Vec<BTreeMap<String, &SeverityReport>> = Vec::new();
    for (name, reports) in models {
        let map: BTreeMap<String, &SeverityReport> =
            reports.iter().map(|r| (r.condition.to_string(), r)).collect();
        let have: BTreeSet<&String> = map.keys().collect();
        if have != key_set || map.len() != reports.len() {
            let mut missing: Vec<String> = key_set
                .symmetric_difference(&have)
                .map(|k| format!("{name}: {k}"))
                .collect();
            if missing.is_empty() {
                missing.push(format!("{name}: duplicate condition"));
            }
            return Err(Error::GridMismatch { missing });
        }
        lookup.push(map);
    }
    let mut counts: BTreeMap<(String, Metric, String), (usize, usize)> = BTreeMap::new();
    for (name, _) in models {
        for r in first {
            for m in Metric::ALL {
                counts.entry((name.clone(), m, r.condition.level())).or_default();
            }
        }
    }
    let mut outcomes = Vec::new();
    for (key, r0) in keys.iter().zip(first) {
        for m in Metric::ALL {
            let values: Vec<(usize, f64)> = lookup
                .iter()
                .enumerate()
                .filter_map(|(i, map)| map[key].metric(m).map(|v| (i, v)))
                .collect();
            let best = values.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
            let holders: Vec<usize> = values.iter().filter(|&&(_, v)| v == best).map(|&(i, _)| i).collect();
            let level = r0.condition.level();
            let (winner, tied) = match holders.as_slice() {
                [] => (None, Vec::new()),
                [w] => {
                    counts.get_mut(&(models[*w].0.clone(), m, level)).unwrap().0 += 1;
                    (Some(models[*w].0.clone()), Vec::new())
                }
                many => {
                    for &i in many {
                        counts.get_mut(&(models[i].0.clone(), m, level.clone())).unwrap().1 += 1;
                    }
                    (None, many.iter().map(|&i| models[i].0.clone()).collect())
                }
            };
            outcomes.push(ConditionOutcome {
                condition: r0.condition.clone(),
                metric: m,
                winner,
                tied,
            });
        }
    }
    // keep model order as given
    let mut win_counts = Vec::new();
    for (name, _) in models {
        for ((n, metric, level), (wins, ties)) in &counts {
            if n == name {
                win_counts.push(WinCount {
                    model: n.clone(),
                    metric: *metric,
                    level: level.clone(),
                    wins: *wins,
                    ties: *ties,
                });
            }
        }
    }
    Ok(Comparison { outcomes, win_counts })
}

/// Flat report table.
pub fn write_reports_csv<W: Write>(reports: &[SeverityReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "condition",
        "epsilon_or_severity",
        "kind",
        "top1",
        "n_mistakes",
        "avg_path_sim",
        "coarse_acc_mistakes",
    ])?;
    for r in reports {
        let (level, kind) = match &r.condition {
            Condition::Clean => (String::new(), String::new()),
            Condition::Adversarial { epsilon } => (sig9(*epsilon as f64), String::new()),
            Condition::Corruption { kind, severity } => (severity.to_string(), kind.clone()),
        };
        w.write_record([
            r.condition.name().to_string(),
            level,
            kind,
            sig9(r.top1_accuracy),
            r.n_mistakes.to_string(),
            opt_sig9(r.avg_mistake_path_similarity),
            opt_sig9(r.coarse_accuracy_of_mistakes),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_records_csv<W: Write>(records: &[EvalRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(["sample_id", "true_fine", "pred_fine", "true_coarse", "pred_coarse"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<EvalRecord>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
