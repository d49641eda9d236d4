//! Cohort records, preprocessing and synthetic data.

mod folds;
mod io;
mod preprocess;
mod record;
mod sequence;
mod synth;

pub use folds::{split_folds, Fold, FoldSplit};
pub use io::{load_cohort, load_cohort_from, write_cohort, write_cohort_to, STATIC_FILE, VISITS_FILE};
pub use preprocess::{
    apply_scaling, assemble_features, cohort_medians, forward_fill, minmax_normalize, preprocess, prevalence_filter,
    preprocess_with_layout, restrict_modalities,
    PreprocessOptions, Preprocessed, ScalingEntry, ScalingTable, DEFAULT_PREVALENCE,
};
pub use record::{Catalog, Cohort, Modality, PatientRecord, Scope, VarKind, Variable, Visit};
pub use sequence::FeatureSequence;
pub use synth::{generate_synthetic_cohort, PlantedTruth, SynthConfig, SyntheticCohort};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),
    #[error("{file}, line {line}: {msg}")]
    Parse { file: String, line: u64, msg: String },
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
