use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate_auc, train_one, Checkpoint, Result, TrainConfig, TrainError};
use crate::clinical::{score_patients, ScoringTable};
use crate::data::{split_folds, Cohort, DataError, FeatureSequence, FoldSplit};
use crate::layers::Variant;
use crate::metrics::auc;

/// Inputs shared by every variant: preprocessed sequences, plus the raw
/// cohort and scoring table used by the clinical baseline.
#[derive(Debug, Clone)]
pub struct CvData {
    pub sequences: Vec<FeatureSequence>,
    pub clinical: Option<(Cohort, ScoringTable)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub variant: Variant,
    pub seed: u64,
    /// Test AUC of each fold's selected checkpoint.
    pub fold_auc: Vec<f64>,
    /// Arithmetic mean of `fold_auc`.
    pub mean_auc: f64,
    pub best_epochs: Vec<usize>,
    pub val_auc: Vec<f64>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct CvRun {
    pub report: CvReport,
    pub split: FoldSplit,
    /// One per fold; empty for the clinical baseline.
    pub checkpoints: Vec<Checkpoint>,
}

/// Model-initialisation seed for one fold.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn pick<'a>(by_id: &BTreeMap<&str, &'a FeatureSequence>, ids: &[String]) -> Result<Vec<FeatureSequence>> {
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| TrainError::Data(DataError::Invalid(format!("no sequence for patient {id:?}"))))
        })
        .collect()
}

/// Stratified k-fold cross-validation. Each fold trains on its training
/// ids, selects on its validation ids and reports AUC on its test ids.
pub fn cross_validate(data: &CvData, cfg: &TrainConfig) -> Result<CvRun> {
    cfg.validate()?;
    let labels: Vec<(String, bool)> = data.sequences.iter().map(|s| (s.patient_id.clone(), s.label)).collect();
    let split = split_folds(&labels, cfg.folds, cfg.val_fraction, cfg.seed)?;
    let by_id: BTreeMap<&str, &FeatureSequence> =
        data.sequences.iter().map(|s| (s.patient_id.as_str(), s)).collect();

    let per_fold: Vec<Result<(f64, usize, f64, Option<Checkpoint>)>> = split
        .folds
        .par_iter()
        .enumerate()
        .map(|(k, fold)| -> Result<_> {
            let wrap = |e: TrainError| TrainError::Fold {
                fold: k,
                source: Box::new(e),
            };
            let test_ids: BTreeSet<&String> = fold.test.iter().collect();
            assert!(
                fold.train.iter().chain(&fold.validation).all(|id| !test_ids.contains(id)),
                "fold {k}: a test patient leaked into training or validation"
            );
            let test = pick(&by_id, &fold.test).map_err(wrap)?;
            let test_labels: Vec<bool> = test.iter().map(|s| s.label).collect();
            if cfg.variant == Variant::Clinical {
                let (cohort, table) = data
                    .clinical
                    .as_ref()
                    .ok_or_else(|| wrap(TrainError::Config("clinical baseline needs the raw cohort and a scoring table".into())))?;
                let scores = score_patients(cohort, &fold.test, table).map_err(|e| wrap(e.into()))?;
                let a = auc(&scores, &test_labels).map_err(|e| wrap(e.into()))?;
                return Ok((a, 0, f64::NAN, None));
            }
            let train = pick(&by_id, &fold.train).map_err(wrap)?;
            let val = pick(&by_id, &fold.validation).map_err(wrap)?;
            let fold_cfg = TrainConfig {
                seed: fold_seed(cfg.seed, k),
                ..cfg.clone()
            };
            let out = train_one(&train, &val, &fold_cfg).map_err(wrap)?;
            let model = out.checkpoint.model().map_err(wrap)?;
            let a = evaluate_auc(&model, &test).map_err(wrap)?;
            Ok((a, out.checkpoint.epoch, out.checkpoint.val_auc, Some(out.checkpoint)))
        })
        .collect();

    let mut fold_auc = Vec::new();
    let mut best_epochs = Vec::new();
    let mut val_auc = Vec::new();
    let mut checkpoints = Vec::new();
    for r in per_fold {
        let (a, e, v, c) = r?;
        fold_auc.push(a);
        best_epochs.push(e);
        val_auc.push(v);
        checkpoints.extend(c);
    }
    let mean_auc = fold_auc.iter().sum::<f64>() / fold_auc.len() as f64;
    Ok(CvRun {
        report: CvReport {
            variant: cfg.variant,
            seed: cfg.seed,
            fold_auc,
            mean_auc,
            best_epochs,
            val_auc,
            config: cfg.clone(),
        },
        split,
        checkpoints,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub variant: Variant,
    pub mean_auc: f64,
    /// Sample standard deviation across seeds; 0 for a single seed.
    pub sd_auc: f64,
    /// Cross-validated mean AUC for each seed, in the order given.
    pub per_seed: Vec<f64>,
}

/// Cross-validates every variant under every seed and sorts the rows by
/// mean AUC, best first.
pub fn compare(data: &CvData, variants: &[Variant], seeds: &[u64], base: &TrainConfig) -> Result<Vec<CompareRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(TrainError::Config("compare needs at least one variant and one seed".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..seeds.len()).map(move |s| (v, s)))
        .collect();
    let results: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(v, s)| {
            let cfg = TrainConfig {
                variant: variants[v],
                seed: seeds[s],
                ..base.clone()
            };
            Ok(cross_validate(data, &cfg)?.report.mean_auc)
        })
        .collect();
    let mut rows: Vec<CompareRow> = variants
        .iter()
        .map(|&variant| CompareRow {
            variant,
            mean_auc: 0.0,
            sd_auc: 0.0,
            per_seed: Vec::new(),
        })
        .collect();
    for (&(v, _), r) in jobs.iter().zip(results) {
        rows[v].per_seed.push(r?);
    }
    for row in &mut rows {
        let n = row.per_seed.len() as f64;
        row.mean_auc = row.per_seed.iter().sum::<f64>() / n;
        row.sd_auc = if row.per_seed.len() > 1 {
            (row.per_seed.iter().map(|x| (x - row.mean_auc).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
    }
    rows.sort_by(|a, b| b.mean_auc.total_cmp(&a.mean_auc).then(a.variant.cmp(&b.variant)));
    Ok(rows)
}
