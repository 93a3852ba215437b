//! AUC, prediction dumps and the variant comparison table.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, IdMaps, InteractionSequence};
use crate::error::{AktError, Result};
use crate::model::{AktConfig, AktModel, Variant};
use crate::scalar::Scalar;
use crate::training::{cross_validate, CvSummary, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub learner_id: String,
    pub position: usize,
    pub question: Option<u32>,
    pub concept: u32,
    pub label: u8,
    pub prob: f64,
}

/// Pooled predictions over every real (learner, position) of a split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub rows: Vec<Prediction>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.prob).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn auc(&self) -> Result<f64> {
        auc(&self.probs(), &self.labels())
    }

    /// Evaluation-mode predictions of `model` on every position of `sequences`.
    pub fn from_model<S: Scalar>(model: &AktModel<S>, sequences: &[InteractionSequence]) -> Result<Self> {
        let per_seq: Vec<Vec<S>> = sequences.par_iter().map(|s| model.predict_sequence(s)).collect::<Result<_>>()?;
        let mut rows = Vec::with_capacity(per_seq.iter().map(Vec::len).sum());
        for (seq, probs) in sequences.iter().zip(per_seq) {
            for (t, (it, p)) in seq.interactions.iter().zip(probs).enumerate() {
                rows.push(Prediction {
                    learner_id: seq.learner_id.clone(),
                    position: t,
                    question: it.question,
                    concept: it.concepts[0],
                    label: it.response,
                    prob: p.to_f64_lossless(),
                });
            }
        }
        Ok(PredictionSet { rows })
    }

    /// CSV with columns `learner_id, position, question_id, concept_id, label, prob`,
    /// ids translated back through `maps` when available.
    pub fn write_csv<W: Write>(&self, maps: &IdMaps, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["learner_id", "position", "question_id", "concept_id", "label", "prob"])?;
        for r in &self.rows {
            let question = match r.question {
                Some(q) => maps.question_name(q).map_or_else(|| q.to_string(), str::to_string),
                None => String::new(),
            };
            let concept = maps.concept_name(r.concept).map_or_else(|| r.concept.to_string(), str::to_string);
            w.write_record([
                r.learner_id.as_str(),
                &r.position.to_string(),
                &question,
                &concept,
                &r.label.to_string(),
                &r.prob.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Area under the ROC curve via the rank-sum statistic, ties counted as 1/2.
///
/// Ranks are kept doubled so the statistic is an exact integer and the result
/// is the single rounding of `2U / (2·P·N)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(AktError::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(AktError::Metric(format!("label {bad} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(AktError::Metric("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count() as u128;
    let negatives = labels.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(AktError::Metric("AUC is undefined when only one class is present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum over positives of twice their (1-based, tie-averaged) rank
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg_rank = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += pos_in_group * twice_avg_rank;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - positives * (positives + 1);
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub folds: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Full cross-validation output per variant, in row order.
    pub runs: Vec<CvSummary>,
}

impl AblationTable {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["variant", "mean_auc", "std_auc", "folds"])?;
        for r in &self.rows {
            w.write_record([r.variant.name(), &format!("{:.6}", r.mean_auc), &format!("{:.6}", r.std_auc), &r.folds.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>18} {:>6}", "variant", "test AUC", "folds")?;
        for r in &self.rows {
            writeln!(f, "{:<14} {:>9.4} ± {:<6.4} {:>6}", r.variant.name(), r.mean_auc, r.std_auc, r.folds)?;
        }
        Ok(())
    }
}

/// Cross-validate every variant with otherwise identical settings.
pub fn ablation_suite<S: Scalar>(
    dataset: &Dataset,
    variants: &[Variant],
    model: &AktConfig,
    train: &TrainConfig,
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for &variant in variants {
        let cfg = AktConfig { variant, ..model.clone() };
        let summary = cross_validate::<S>(dataset, &cfg, train)?;
        table.rows.push(AblationRow {
            variant,
            mean_auc: summary.mean_test_auc,
            std_auc: summary.std_test_auc,
            folds: summary.records.len(),
        });
        table.runs.push(summary);
    }
    Ok(table)
}
