use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    /// Test fold of every patient.
    pub assignments: BTreeMap<String, usize>,
    pub folds: Vec<Fold>,
}

impl FoldSplit {
    /// Checks the partition and disjointness contracts.
    pub fn verify(&self) -> Result<(), DataError> {
        let all: BTreeSet<&String> = self.assignments.keys().collect();
        let mut seen = BTreeSet::new();
        for (k, f) in self.folds.iter().enumerate() {
            let test: BTreeSet<&String> = f.test.iter().collect();
            let train: BTreeSet<&String> = f.train.iter().collect();
            let val: BTreeSet<&String> = f.validation.iter().collect();
            if !test.is_disjoint(&train) || !test.is_disjoint(&val) || !train.is_disjoint(&val) {
                return Err(DataError::Invalid(format!("fold {k} lists a patient in two roles")));
            }
            let union: BTreeSet<&String> = test.iter().chain(&train).chain(&val).copied().collect();
            if union != all {
                return Err(DataError::Invalid(format!("fold {k} does not cover the cohort")));
            }
            for id in &f.test {
                if self.assignments.get(id) != Some(&k) || !seen.insert(id) {
                    return Err(DataError::Invalid(format!("patient {id:?} is misassigned in fold {k}")));
                }
            }
        }
        if seen.len() != all.len() {
            return Err(DataError::Invalid("test folds do not partition the cohort".into()));
        }
        Ok(())
    }
}

fn sub_seed(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stratified `k`-fold split. Each class is shuffled and dealt round-robin
/// into test folds; `val_fraction` of each class in a fold's remaining
/// patients is held out for validation. Input order is irrelevant: ids are
/// sorted before any randomness is applied.
pub fn split_folds(labels: &[(String, bool)], k: usize, val_fraction: f64, seed: u64) -> Result<FoldSplit, DataError> {
    if k < 2 {
        return Err(DataError::Invalid(format!("need at least 2 folds, got {k}")));
    }
    if labels.len() < k {
        return Err(DataError::Invalid(format!("{} patients cannot fill {k} folds", labels.len())));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(DataError::Invalid(format!("validation fraction {val_fraction} is outside [0, 1)")));
    }
    let mut sorted: Vec<&(String, bool)> = labels.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(DataError::Invalid("duplicate patient ids".into()));
    }
    let mut pos: Vec<String> = sorted.iter().filter(|p| p.1).map(|p| p.0.clone()).collect();
    let mut neg: Vec<String> = sorted.iter().filter(|p| !p.1).map(|p| p.0.clone()).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(DataError::Invalid("both outcome classes must be present".into()));
    }
    let mut rng = sub_seed(seed, 0);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let mut assignments = BTreeMap::new();
    let mut tests: Vec<Vec<String>> = vec![Vec::new(); k];
    // Negatives continue the deal where positives stopped so fold sizes
    // differ by at most one.
    for (i, id) in pos.iter().chain(&neg).enumerate() {
        assignments.insert(id.clone(), i % k);
        tests[i % k].push(id.clone());
    }
    let label_of: BTreeMap<&str, bool> = labels.iter().map(|(id, l)| (id.as_str(), *l)).collect();

    let mut folds = Vec::with_capacity(k);
    for (f, test) in tests.into_iter().enumerate() {
        let mut rng = sub_seed(seed, 1 + f as u64);
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for class in [true, false] {
            let mut members: Vec<String> = assignments
                .iter()
                .filter(|(id, fold)| **fold != f && label_of[id.as_str()] == class)
                .map(|(id, _)| id.clone())
                .collect();
            members.shuffle(&mut rng);
            let mut n_val = (val_fraction * members.len() as f64).round() as usize;
            if val_fraction > 0.0 && members.len() >= 2 {
                n_val = n_val.clamp(1, members.len() - 1);
            }
            validation.extend(members.drain(..n_val));
            train.extend(members);
        }
        train.sort();
        validation.sort();
        let mut test = test;
        test.sort();
        folds.push(Fold { train, validation, test });
    }
    let split = FoldSplit { assignments, folds };
    split.verify()?;
    Ok(split)
}
