use crate::tensor::Tensor;

use super::DataError;

/// One patient's preprocessed `T×D` feature matrix.
///
/// Rows whose mask entry is `false` are padding: they hold zeros and are
/// ignored by every encoder, attention block and pooling step.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub matrix: Tensor,
    pub mask: Vec<bool>,
    pub feature_names: Vec<String>,
    pub patient_id: String,
    pub label: bool,
}

impl FeatureSequence {
    pub fn new(
        patient_id: impl Into<String>,
        rows: Vec<Vec<f64>>,
        feature_names: Vec<String>,
        label: bool,
    ) -> Result<Self, DataError> {
        let t = rows.len();
        let d = feature_names.len();
        if t == 0 || d == 0 {
            return Err(DataError::Invalid("feature sequence needs at least one row and one column".into()));
        }
        let mut data = Vec::with_capacity(t * d);
        for (i, r) in rows.into_iter().enumerate() {
            if r.len() != d {
                return Err(DataError::Invalid(format!("row {i} has {} values, expected {d}", r.len())));
            }
            data.extend(r);
        }
        Ok(Self {
            matrix: Tensor::new(vec![t, d], data)?,
            mask: vec![true; t],
            feature_names,
            patient_id: patient_id.into(),
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn width(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn unmasked(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.width();
        &self.matrix.data()[i * d..(i + 1) * d]
    }

    /// Appends zero rows marked as padding until the sequence has `total` rows.
    pub fn padded(&self, total: usize) -> Self {
        let mut out = self.clone();
        if total <= self.len() {
            return out;
        }
        let d = self.width();
        let mut data = self.matrix.data().to_vec();
        data.resize(total * d, 0.0);
        out.matrix = Tensor::new(vec![total, d], data).expect("padding keeps shape consistent");
        out.mask.resize(total, false);
        out
    }

    /// Keeps only the named columns, in the given order.
    pub fn select_columns(&self, names: &[String]) -> Result<Self, DataError> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.feature_names
                    .iter()
                    .position(|f| f == n)
                    .ok_or_else(|| DataError::UnknownVariable(n.clone()))
            })
            .collect::<Result<_, _>>()?;
        let t = self.len();
        let mut data = Vec::with_capacity(t * idx.len());
        for i in 0..t {
            let row = self.row(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        Ok(Self {
            matrix: Tensor::new(vec![t, idx.len()], data)?,
            mask: self.mask.clone(),
            feature_names: names.to_vec(),
            patient_id: self.patient_id.clone(),
            label: self.label,
        })
    }
}
