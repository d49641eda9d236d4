use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::record::{Catalog, Cohort, Modality, PatientRecord, Scope, VarKind};
use super::{DataError, FeatureSequence};

/// A longitudinal variable is kept only if more than this fraction of
/// patients have at least one observation of it.
pub const DEFAULT_PREVALENCE: f64 = 0.95;

/// Drops longitudinal variables observed by at most `threshold` of the
/// patients. Static variables are untouched.
pub fn prevalence_filter(cohort: &Cohort, threshold: f64) -> Result<Cohort, DataError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(DataError::Invalid(format!("prevalence threshold {threshold} is outside (0, 1]")));
    }
    if cohort.is_empty() {
        return Err(DataError::Invalid("cannot filter an empty cohort".into()));
    }
    let n = cohort.len() as f64;
    let mut dropped = BTreeSet::new();
    let mut report = Vec::new();
    for v in cohort.catalog.longitudinal() {
        let count = cohort.records.iter().filter(|r| r.observed(&v.name)).count();
        let frac = count as f64 / n;
        if frac <= threshold {
            dropped.insert(v.name.clone());
        }
        report.push(format!("{} {:.3}", v.name, frac));
    }
    let total = cohort.catalog.longitudinal().count();
    if dropped.len() == total {
        return Err(DataError::Invalid(format!(
            "prevalence threshold {threshold} removes every longitudinal variable (observed fractions: {})",
            report.join(", ")
        )));
    }
    let mut out = cohort.clone();
    out.catalog.retain(|v| !dropped.contains(&v.name));
    for r in &mut out.records {
        for visit in &mut r.visits {
            visit.values.retain(|k, _| !dropped.contains(k));
        }
    }
    Ok(out)
}

/// Removes every variable whose modality is not listed.
pub fn restrict_modalities(cohort: &Cohort, keep: &[Modality]) -> Cohort {
    let drop: BTreeSet<String> = cohort
        .catalog
        .variables
        .iter()
        .filter(|v| !keep.contains(&v.modality))
        .map(|v| v.name.clone())
        .collect();
    let mut out = cohort.clone();
    out.catalog.retain(|v| !drop.contains(&v.name));
    for r in &mut out.records {
        r.static_numeric.retain(|k, _| !drop.contains(k));
        r.static_binary.retain(|k, _| !drop.contains(k));
        for visit in &mut r.visits {
            visit.values.retain(|k, _| !drop.contains(k));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingEntry {
    pub variable: String,
    pub min: f64,
    pub max: f64,
}

impl ScalingEntry {
    pub fn apply(&self, x: f64) -> f64 {
        if self.max > self.min {
            ((x - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

/// Per-variable `(min, max)` pairs, persisted as TOML.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScalingTable {
    #[serde(rename = "variable", default)]
    pub entries: Vec<ScalingEntry>,
}

impl ScalingTable {
    pub fn get(&self, name: &str) -> Option<&ScalingEntry> {
        self.entries.iter().find(|e| e.variable == name)
    }

    pub fn to_toml(&self) -> Result<String, DataError> {
        toml::to_string(self).map_err(|e| DataError::Invalid(format!("scaling table: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self, DataError> {
        toml::from_str(text).map_err(|e| DataError::Invalid(format!("scaling table: {e}")))
    }
}

fn numeric_values<'a>(cohort: &'a Cohort, name: &'a str, scope: Scope) -> Box<dyn Iterator<Item = f64> + 'a> {
    match scope {
        Scope::Longitudinal => Box::new(
            cohort
                .records
                .iter()
                .flat_map(move |r| r.visits.iter().filter_map(move |v| v.values.get(name).copied())),
        ),
        Scope::Static => Box::new(cohort.records.iter().filter_map(move |r| r.static_numeric.get(name).copied())),
    }
}

/// Cohort-wide min-max scaling of every numeric variable to `[0, 1]`.
/// Constant variables map to 0; binary flags are left alone.
pub fn minmax_normalize(cohort: &Cohort) -> Result<(Cohort, ScalingTable), DataError> {
    let mut table = ScalingTable::default();
    for v in &cohort.catalog.variables {
        if v.kind() != VarKind::Numeric {
            continue;
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for x in numeric_values(cohort, &v.name, v.scope()) {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        if lo.is_finite() {
            table.entries.push(ScalingEntry {
                variable: v.name.clone(),
                min: lo,
                max: hi,
            });
        }
    }
    let out = apply_scaling(cohort, &table)?;
    Ok((out, table))
}

/// Rescales with a stored table. Values outside the recorded range are
/// clamped so unseen cohorts still land in `[0, 1]`.
pub fn apply_scaling(cohort: &Cohort, table: &ScalingTable) -> Result<Cohort, DataError> {
    let lookup: BTreeMap<&str, &ScalingEntry> = table.entries.iter().map(|e| (e.variable.as_str(), e)).collect();
    let scale = |name: &str, x: &mut f64| -> Result<(), DataError> {
        let e = lookup
            .get(name)
            .ok_or_else(|| DataError::Invalid(format!("no scaling entry for {name:?}")))?;
        *x = e.apply(*x);
        Ok(())
    };
    let mut out = cohort.clone();
    for r in &mut out.records {
        for (k, x) in r.static_numeric.iter_mut() {
            scale(k, x)?;
        }
        for visit in &mut r.visits {
            for (k, x) in visit.values.iter_mut() {
                scale(k, x)?;
            }
        }
    }
    Ok(out)
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

/// Median of every numeric variable over all of its observations in the
/// cohort (every visit for longitudinal variables).
pub fn cohort_medians(cohort: &Cohort) -> BTreeMap<String, f64> {
    cohort
        .catalog
        .variables
        .iter()
        .filter(|v| v.kind() == VarKind::Numeric)
        .filter_map(|v| median(numeric_values(cohort, &v.name, v.scope()).collect()).map(|m| (v.name.clone(), m)))
        .collect()
}

/// Carries the last observation of each longitudinal variable forward.
/// Gaps before the first observation, and missing static numerics, take
/// the cohort median; missing flags become 0.
pub fn forward_fill(
    record: &PatientRecord,
    catalog: &Catalog,
    medians: &BTreeMap<String, f64>,
) -> Result<PatientRecord, DataError> {
    record.validate()?;
    let backstop = |name: &str| {
        medians
            .get(name)
            .copied()
            .ok_or_else(|| DataError::Invalid(format!("no cohort median for {name:?}")))
    };
    let mut out = record.clone();
    for v in catalog.longitudinal() {
        let mut last: Option<f64> = None;
        for visit in &mut out.visits {
            match visit.values.get(&v.name) {
                Some(x) => last = Some(*x),
                None => {
                    let fill = match last {
                        Some(x) => x,
                        None => backstop(&v.name)?,
                    };
                    visit.values.insert(v.name.clone(), fill);
                }
            }
        }
    }
    for v in catalog.static_numeric() {
        if !out.static_numeric.contains_key(&v.name) {
            out.static_numeric.insert(v.name.clone(), backstop(&v.name)?);
        }
    }
    for v in catalog.binary() {
        out.static_binary.entry(v.name.clone()).or_insert(false);
    }
    Ok(out)
}

/// Builds the `T×D` matrix for one imputed, normalized record. Row `i` is
/// visit `i`'s longitudinal values followed by the static numerics and the
/// binary flags, in catalog order.
pub fn assemble_features(record: &PatientRecord, catalog: &Catalog) -> Result<FeatureSequence, DataError> {
    record.validate()?;
    for name in record.variable_names() {
        if catalog.get(name).is_none() {
            return Err(DataError::UnknownVariable(name.to_string()));
        }
    }
    let missing = |name: &str| DataError::Invalid(format!("patient {:?} has no value for {name:?}", record.patient_id));
    let mut tail = Vec::new();
    for v in catalog.static_numeric() {
        tail.push(*record.static_numeric.get(&v.name).ok_or_else(|| missing(&v.name))?);
    }
    for v in catalog.binary() {
        let b = *record.static_binary.get(&v.name).ok_or_else(|| missing(&v.name))?;
        tail.push(if b { 1.0 } else { 0.0 });
    }
    let longs: Vec<&str> = catalog.longitudinal().map(|v| v.name.as_str()).collect();
    let mut rows = Vec::with_capacity(record.visits.len());
    for visit in &record.visits {
        let mut row = Vec::with_capacity(longs.len() + tail.len());
        for name in &longs {
            row.push(*visit.values.get(*name).ok_or_else(|| missing(name))?);
        }
        row.extend_from_slice(&tail);
        if let Some(x) = row.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(DataError::Invalid(format!(
                "patient {:?} has unnormalized value {x}",
                record.patient_id
            )));
        }
        rows.push(row);
    }
    FeatureSequence::new(record.patient_id.clone(), rows, catalog.feature_order(), record.label)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub prevalence: f64,
    pub modalities: Vec<Modality>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            prevalence: DEFAULT_PREVALENCE,
            modalities: Modality::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    /// Filtered, normalized and imputed records.
    pub cohort: Cohort,
    pub scaling: ScalingTable,
    pub medians: BTreeMap<String, f64>,
    /// One sequence per record, in cohort order.
    pub sequences: Vec<FeatureSequence>,
}

/// Modality selection, prevalence filter, min-max scaling, forward fill and
/// assembly, in that order.
pub fn preprocess(cohort: &Cohort, opts: &PreprocessOptions) -> Result<Preprocessed, DataError> {
    cohort.validate()?;
    let selected = restrict_modalities(cohort, &opts.modalities);
    let filtered = prevalence_filter(&selected, opts.prevalence)?;
    let (mut normalized, scaling) = minmax_normalize(&filtered)?;
    let medians = cohort_medians(&normalized);
    let mut sequences = Vec::with_capacity(normalized.len());
    for r in &mut normalized.records {
        *r = forward_fill(r, &normalized.catalog, &medians)?;
        sequences.push(assemble_features(r, &normalized.catalog)?);
    }
    Ok(Preprocessed {
        cohort: normalized,
        scaling,
        medians,
        sequences,
    })
}

/// Rebuilds sequences with a fixed column layout, e.g. the one stored in a
/// checkpoint. Scaling comes from `scaling` when given, otherwise from this
/// cohort; no prevalence filter is applied.
pub fn preprocess_with_layout(
    cohort: &Cohort,
    feature_names: &[String],
    scaling: Option<&ScalingTable>,
) -> Result<Vec<FeatureSequence>, DataError> {
    cohort.validate()?;
    for name in feature_names {
        if cohort.catalog.get(name).is_none() {
            return Err(DataError::UnknownVariable(name.clone()));
        }
    }
    let mut selected = cohort.clone();
    selected.catalog.retain(|v| feature_names.contains(&v.name));
    let keep: BTreeSet<&str> = feature_names.iter().map(String::as_str).collect();
    for r in &mut selected.records {
        r.static_numeric.retain(|k, _| keep.contains(k.as_str()));
        r.static_binary.retain(|k, _| keep.contains(k.as_str()));
        for v in &mut r.visits {
            v.values.retain(|k, _| keep.contains(k.as_str()));
        }
    }
    let normalized = match scaling {
        Some(t) => apply_scaling(&selected, t)?,
        None => minmax_normalize(&selected)?.0,
    };
    let medians = cohort_medians(&normalized);
    normalized
        .records
        .iter()
        .map(|r| {
            let filled = forward_fill(r, &normalized.catalog, &medians)?;
            assemble_features(&filled, &normalized.catalog)?.select_columns(feature_names)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::record::{Variable, Visit};

    fn visit(day: i64, vals: &[(&str, f64)]) -> Visit {
        Visit {
            day,
            values: vals.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    fn record(id: &str, visits: Vec<Visit>) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            static_numeric: BTreeMap::new(),
            static_binary: BTreeMap::new(),
            visits,
            label: false,
        }
    }

    fn cohort(records: Vec<PatientRecord>, vars: &[&str]) -> Cohort {
        Cohort {
            records,
            catalog: Catalog::new(vars.iter().map(|v| Variable::parse(v).unwrap()).collect()).unwrap(),
        }
    }

    #[test]
    fn minmax_examples() {
        let c = cohort(
            vec![record(
                "a",
                vec![
                    visit(0, &[("labs:x", 2.0), ("labs:k", 7.0)]),
                    visit(1, &[("labs:x", 4.0), ("labs:k", 7.0)]),
                    visit(2, &[("labs:x", 6.0), ("labs:k", 7.0)]),
                ],
            )],
            &["labs:x", "labs:k"],
        );
        let (n, table) = minmax_normalize(&c).unwrap();
        let xs: Vec<f64> = n.records[0].visits.iter().map(|v| v.values["labs:x"]).collect();
        let ks: Vec<f64> = n.records[0].visits.iter().map(|v| v.values["labs:k"]).collect();
        assert_eq!(xs, vec![0.0, 0.5, 1.0]);
        assert_eq!(ks, vec![0.0; 3]);
        assert_eq!(table.get("labs:x").unwrap().max, 6.0);
        let text = table.to_toml().unwrap();
        assert_eq!(ScalingTable::from_toml(&text).unwrap(), table);
    }

    #[test]
    fn forward_fill_examples() {
        let cat = Catalog::new(vec![Variable::parse("labs:x").unwrap()]).unwrap();
        let med = BTreeMap::from([("labs:x".to_string(), 0.3)]);
        let r = record("a", vec![visit(0, &[("labs:x", 1.0)]), visit(1, &[]), visit(2, &[])]);
        let f = forward_fill(&r, &cat, &med).unwrap();
        assert_eq!(f.visits.iter().map(|v| v.values["labs:x"]).collect::<Vec<_>>(), vec![1.0; 3]);
        let r = record("b", vec![visit(0, &[]), visit(1, &[("labs:x", 0.4)])]);
        let f = forward_fill(&r, &cat, &med).unwrap();
        assert_eq!(f.visits.iter().map(|v| v.values["labs:x"]).collect::<Vec<_>>(), vec![0.3, 0.4]);
        let full = record("c", vec![visit(0, &[("labs:x", 0.1)]), visit(1, &[("labs:x", 0.2)])]);
        assert_eq!(forward_fill(&full, &cat, &med).unwrap(), full);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }

    #[test]
    fn prevalence_examples() {
        let recs: Vec<PatientRecord> = (0..4)
            .map(|i| {
                let mut vals = vec![("labs:all", 1.0)];
                if i % 2 == 0 {
                    vals.push(("labs:half", 1.0));
                }
                record(&format!("p{i}"), vec![visit(0, &vals)])
            })
            .collect();
        let c = cohort(recs, &["labs:all", "labs:half"]);
        let f = prevalence_filter(&c, 0.95).unwrap();
        assert_eq!(f.catalog.feature_order(), vec!["labs:all"]);
        assert!(f.records.iter().all(|r| !r.observed("labs:half")));
        assert!(prevalence_filter(&c, 1.0).is_err());
        assert!(prevalence_filter(&c, 0.0).is_err());
    }

    #[test]
    fn assembly_shape_and_static_repetition() {
        let mut r = record("a", vec![visit(0, &[("labs:x", 0.2)]), visit(3, &[("labs:x", 0.9)])]);
        r.static_numeric.insert("demographic:age".into(), 0.5);
        r.static_binary.insert("history:obesity".into(), true);
        let cat = Catalog::new(
            ["history:obesity", "demographic:age", "labs:x"]
                .iter()
                .map(|v| Variable::parse(v).unwrap())
                .collect(),
        )
        .unwrap();
        let s = assemble_features(&r, &cat).unwrap();
        assert_eq!(s.matrix.shape(), &[2, 3]);
        assert_eq!(s.row(0), &[0.2, 0.5, 1.0]);
        assert_eq!(s.row(1), &[0.9, 0.5, 1.0]);
        let mut bad = r.clone();
        bad.visits[0].values.insert("labs:ghost".into(), 0.1);
        assert!(matches!(assemble_features(&bad, &cat), Err(DataError::UnknownVariable(_))));
    }
}
