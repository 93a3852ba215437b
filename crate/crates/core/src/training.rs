//! Training loop, early stopping and k-fold orchestration.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    expand_multi_concept, kfold_split, learner_ids, make_batches, truncate, Dataset, FoldData, InteractionSequence,
    DEFAULT_BATCH_SIZE, DEFAULT_FOLDS,
};
use crate::error::{AktError, Result};
use crate::evaluation::PredictionSet;
use crate::model::{AktConfig, AktModel};
use crate::numerics::{adam_step, global_norm, AdamConfig, OptimizerState, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// `None` disables clipping (the "∞" grid value).
    pub max_grad_norm: Option<f64>,
    pub patience: usize,
    pub seed: u64,
    /// Fold used by single-fold training.
    pub fold: usize,
    pub folds: usize,
    /// Folds trained concurrently by `cross_validate`.
    pub fold_workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            max_epochs: 300,
            batch_size: DEFAULT_BATCH_SIZE,
            max_grad_norm: None,
            patience: 10,
            seed: 0,
            fold: 0,
            folds: DEFAULT_FOLDS,
            fold_workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(AktError::config("patience must be at least 1"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(AktError::config("batch_size and max_epochs must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AktError::config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if let Some(n) = self.max_grad_norm {
            if n.is_nan() || n <= 0.0 {
                return Err(AktError::config(format!("max_grad_norm {n} must be positive")));
            }
        }
        if self.fold >= self.folds {
            return Err(AktError::config(format!("fold {} out of range for {} folds", self.fold, self.folds)));
        }
        if self.fold_workers == 0 {
            return Err(AktError::config("fold_workers must be at least 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            max_grad_norm: self.max_grad_norm.filter(|n| n.is_finite()),
            ..AdamConfig::default()
        }
    }
}

/// SplitMix64 mix of a base seed with two stream indices.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ b.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stop after `patience` consecutive epochs without a strictly better score.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: None, best_epoch: 0, since_best: 0 }
    }

    /// Returns true when `score` is a new best.
    pub fn update(&mut self, epoch: usize, score: f64) -> bool {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best.map(|b| (self.best_epoch, b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    EarlyStopped,
    Diverged { epoch: usize, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Summed BCE over all training interactions of the epoch.
    pub train_loss: f64,
    pub train_loss_per_interaction: f64,
    pub mean_grad_norm: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fold: usize,
    pub status: RunStatus,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub test_interactions: usize,
    pub wall_time_secs: f64,
    pub model_config: AktConfig,
    pub train_config: TrainConfig,
    pub scalar: String,
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }
}

fn val_auc<S: Scalar>(model: &AktModel<S>, sequences: &[InteractionSequence]) -> Result<Option<f64>> {
    if sequences.is_empty() {
        return Ok(None);
    }
    PredictionSet::from_model(model, sequences)?.auc().map(Some)
}

/// Train on `data.train`, early-stop on `data.val` AUC, restore the best
/// parameters and evaluate `data.test` once. With an empty validation split
/// every epoch runs and the final parameters are kept.
///
/// A non-finite loss or gradient ends training with `RunStatus::Diverged`; the
/// record and the best parameters seen so far are kept.
pub fn train_fold<S: Scalar>(model: &mut AktModel<S>, data: &FoldData, cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(AktError::Data("training split is empty".into()));
    }
    let started = Instant::now();
    let mut optimizer = OptimizerState::new(cfg.adam(), &model.params);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_params: Option<ParamStore<S>> = None;
    let mut epochs = Vec::new();
    let mut status = RunStatus::Completed;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, cfg.fold as u64, epoch as u64));
        let batches = make_batches(&data.train, cfg.batch_size, Some(&mut shuffle));
        let (mut loss, mut count, mut norm_sum) = (0.0, 0usize, 0.0);
        for (b, batch) in batches.iter().enumerate() {
            let seed = derive_seed(cfg.seed, (cfg.fold as u64) << 32 | epoch as u64, b as u64);
            let mut out = match model.batch_gradients(batch, true, seed) {
                Ok(out) => out,
                Err(AktError::Numerical(message)) => {
                    status = RunStatus::Diverged { epoch, message };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let batch_loss = out.loss_sum.to_f64_lossless();
            if !batch_loss.is_finite() {
                status = RunStatus::Diverged { epoch, message: format!("non-finite loss in batch {b}") };
                break 'epochs;
            }
            let scale = S::one() / S::from_usize_lossy(out.count);
            for g in out.grads.iter_mut().flatten() {
                g.scale_inplace(scale);
            }
            norm_sum += global_norm(&out.grads);
            match adam_step(&mut model.params, &mut out.grads, &mut optimizer) {
                Ok(()) => {}
                Err(AktError::Numerical(message)) => {
                    status = RunStatus::Diverged { epoch, message };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            loss += batch_loss;
            count += out.count;
        }
        let auc = val_auc(model, &data.val)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss,
            train_loss_per_interaction: loss / count as f64,
            mean_grad_norm: norm_sum / batches.len() as f64,
            val_auc: auc,
        });
        if let Some(auc) = auc {
            if stopper.update(epoch, auc) {
                best_params = Some(model.params.clone());
            }
            if stopper.should_stop() {
                status = RunStatus::EarlyStopped;
                break;
            }
        }
    }

    if let Some(best) = best_params {
        model.params = best;
    }
    let test_interactions = data.test.iter().map(InteractionSequence::len).sum();
    let test_auc = if data.test.is_empty() || (matches!(status, RunStatus::Diverged { .. }) && stopper.best().is_none()) {
        None
    } else {
        Some(PredictionSet::from_model(model, &data.test)?.auc()?)
    };
    let best = stopper.best();
    Ok(RunRecord {
        fold: cfg.fold,
        status,
        best_epoch: best.map(|b| b.0).or_else(|| epochs.last().map(|e| e.epoch)),
        best_val_auc: best.map(|b| b.1),
        epochs,
        test_auc,
        test_interactions,
        wall_time_secs: started.elapsed().as_secs_f64(),
        model_config: model.config.clone(),
        train_config: cfg.clone(),
        scalar: std::any::type_name::<S>().into(),
    })
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub records: Vec<RunRecord>,
    pub mean_test_auc: f64,
    pub std_test_auc: f64,
}

impl CvSummary {
    pub fn from_records(records: Vec<RunRecord>) -> Self {
        let aucs: Vec<f64> = records.iter().filter_map(|r| r.test_auc).collect();
        let (mean_test_auc, std_test_auc) = mean_std(&aucs).unwrap_or((f64::NAN, f64::NAN));
        CvSummary { records, mean_test_auc, std_test_auc }
    }

    pub fn any_diverged(&self) -> bool {
        self.records.iter().any(RunRecord::diverged)
    }
}

/// Sequences as the model sees them: multi-concept rows expanded per the
/// model's mode and long sequences cut into `max_len` chunks.
pub fn prepare_sequences(dataset: &Dataset, model: &AktConfig) -> Vec<InteractionSequence> {
    truncate(expand_multi_concept(dataset.sequences.clone(), model.multi_concept), model.max_len)
}

/// Build and train the model of one fold.
pub fn run_fold<S: Scalar>(
    dataset: &Dataset,
    model_cfg: &AktConfig,
    train_cfg: &TrainConfig,
) -> Result<(AktModel<S>, RunRecord)> {
    train_cfg.validate()?;
    let sequences = prepare_sequences(dataset, model_cfg);
    let folds = kfold_split(&sequences, train_cfg.folds, train_cfg.seed)?;
    let fold = &folds[train_cfg.fold];
    if !fold.is_partition_of(&learner_ids(&sequences)) {
        return Err(AktError::Data(format!("fold {} is not a partition of the learners", fold.index)));
    }
    let data = fold.select(&sequences);
    let mut model = AktModel::build(model_cfg.clone(), dataset.meta, derive_seed(train_cfg.seed, train_cfg.fold as u64, 0))?;
    let record = train_fold(&mut model, &data, train_cfg)?;
    Ok((model, record))
}

/// Train every fold and aggregate test AUC (population std across folds).
pub fn cross_validate<S: Scalar>(dataset: &Dataset, model_cfg: &AktConfig, train_cfg: &TrainConfig) -> Result<CvSummary> {
    train_cfg.validate()?;
    let run = |fold: usize| {
        let cfg = TrainConfig { fold, ..train_cfg.clone() };
        run_fold::<S>(dataset, model_cfg, &cfg).map(|(_, record)| record)
    };
    let records: Vec<RunRecord> = if train_cfg.fold_workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(train_cfg.fold_workers)
            .build()
            .map_err(|e| AktError::config(e.to_string()))?;
        pool.install(|| (0..train_cfg.folds).into_par_iter().map(run).collect::<Result<_>>())?
    } else {
        (0..train_cfg.folds).map(run).collect::<Result<_>>()?
    };
    Ok(CvSummary::from_records(records))
}

/// Hyperparameter grid searched on validation AUC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub dims: Vec<usize>,
    pub dropouts: Vec<f64>,
    /// `f64::INFINITY` stands for an unbounded norm.
    pub max_grad_norms: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::full()
    }
}

impl GridSpec {
    /// Every combination of 2 dims, 6 dropouts, 3 norm limits and 3 learning rates.
    pub fn full() -> Self {
        GridSpec {
            dims: vec![256, 512],
            dropouts: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25],
            max_grad_norms: vec![1.0, 10.0, f64::INFINITY],
            learning_rates: vec![5e-6, 1e-5, 1e-4],
        }
    }

    pub fn combinations(&self) -> Vec<(usize, f64, Option<f64>, f64)> {
        let mut out = Vec::new();
        for &d in &self.dims {
            for &p in &self.dropouts {
                for &n in &self.max_grad_norms {
                    for &lr in &self.learning_rates {
                        out.push((d, p, n.is_finite().then_some(n), lr));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTrial {
    pub dim: usize,
    pub dropout: f64,
    pub max_grad_norm: Option<f64>,
    pub learning_rate: f64,
    pub best_val_auc: Option<f64>,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub trials: Vec<GridTrial>,
    /// Record of the selected trial; its test AUC is the only test evaluation.
    pub selected: RunRecord,
}

/// Train every grid point on one fold without looking at its test split, pick
/// the best validation AUC, then score the test split once.
pub fn grid_search<S: Scalar>(
    dataset: &Dataset,
    base_model: &AktConfig,
    base_train: &TrainConfig,
    grid: &GridSpec,
) -> Result<(AktModel<S>, GridResult)> {
    base_train.validate()?;
    let sequences = prepare_sequences(dataset, base_model);
    let fold = &kfold_split(&sequences, base_train.folds, base_train.seed)?[base_train.fold];
    let FoldData { train, val, test } = fold.select(&sequences);
    if val.is_empty() {
        return Err(AktError::Data("grid search needs a validation split".into()));
    }
    let search = FoldData { train, val, test: Vec::new() };
    let mut trials = Vec::new();
    let mut best: Option<(f64, AktModel<S>, RunRecord)> = None;
    for (dim, dropout, max_grad_norm, learning_rate) in grid.combinations() {
        let model_cfg = AktConfig { dim, dropout, ..base_model.clone() };
        let train_cfg = TrainConfig { max_grad_norm, learning_rate, ..base_train.clone() };
        let seed = derive_seed(train_cfg.seed, train_cfg.fold as u64, 0);
        let mut model = AktModel::build(model_cfg, dataset.meta, seed)?;
        let record = train_fold(&mut model, &search, &train_cfg)?;
        trials.push(GridTrial {
            dim,
            dropout,
            max_grad_norm,
            learning_rate,
            best_val_auc: record.best_val_auc,
            diverged: record.diverged(),
        });
        if let Some(auc) = record.best_val_auc {
            if best.as_ref().is_none_or(|(b, _, _)| auc > *b) {
                best = Some((auc, model, record));
            }
        }
    }
    let (_, model, mut selected) =
        best.ok_or_else(|| AktError::Numerical("no grid point produced a validation AUC".into()))?;
    if !test.is_empty() {
        selected.test_auc = Some(PredictionSet::from_model(&model, &test)?.auc()?);
        selected.test_interactions = test.iter().map(InteractionSequence::len).sum();
    }
    Ok((model, GridResult { trials, selected }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[0.8, 0.8, 0.8, 0.8, 0.85]).unwrap();
        assert!((m - 0.81).abs() < 1e-12);
        assert!((s - 0.02).abs() < 1e-12);
        assert_eq!(mean_std(&[0.7; 5]).unwrap().1, 0.0);
        assert_eq!(mean_std(&[]), None);
    }

    #[test]
    fn patience_one_stops_after_two_epochs() {
        let mut s = EarlyStopper::new(1);
        assert!(s.update(1, 0.7));
        assert!(!s.should_stop());
        assert!(!s.update(2, 0.6));
        assert!(s.should_stop());
        assert_eq!(s.best(), Some((1, 0.7)));
    }

    #[test]
    fn ties_do_not_reset_patience() {
        let mut s = EarlyStopper::new(2);
        s.update(1, 0.7);
        s.update(2, 0.7);
        s.update(3, 0.7);
        assert!(s.should_stop());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { fold: 5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { max_grad_norm: Some(0.0), ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn infinite_norm_means_no_clipping() {
        let cfg = TrainConfig { max_grad_norm: Some(f64::INFINITY), ..TrainConfig::default() };
        assert_eq!(cfg.adam().max_grad_norm, None);
    }

    #[test]
    fn full_grid_size() {
        assert_eq!(GridSpec::full().combinations().len(), 2 * 6 * 3 * 3);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 1), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(7, 3, 4), derive_seed(7, 3, 4));
    }
}
