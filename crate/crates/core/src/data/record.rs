use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Source of a variable. Labs and vitals are longitudinal; the rest are
/// recorded once at admission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Labs,
    Vitals,
    Demographic,
    History,
    Imaging,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Labs,
        Modality::Vitals,
        Modality::Demographic,
        Modality::History,
        Modality::Imaging,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Labs => "labs",
            Modality::Vitals => "vitals",
            Modality::Demographic => "demographic",
            Modality::History => "history",
            Modality::Imaging => "imaging",
        }
    }

    pub fn scope(self) -> Scope {
        match self {
            Modality::Labs | Modality::Vitals => Scope::Longitudinal,
            _ => Scope::Static,
        }
    }

    pub fn kind(self) -> VarKind {
        match self {
            Modality::History => VarKind::Binary,
            _ => VarKind::Numeric,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DataError::Invalid(format!("unknown modality {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarKind {
    Numeric,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    Static,
    Longitudinal,
}

/// A cataloged variable. `name` is the full column header,
/// `<modality>:<short name>`, e.g. `labs:ferritin`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub modality: Modality,
}

impl Variable {
    pub fn parse(header: &str) -> Result<Self, DataError> {
        let (prefix, rest) = header
            .split_once(':')
            .ok_or_else(|| DataError::Invalid(format!("column {header:?} lacks a '<modality>:' prefix")))?;
        if rest.is_empty() {
            return Err(DataError::Invalid(format!("column {header:?} has an empty name")));
        }
        Ok(Self {
            name: header.to_string(),
            modality: prefix.parse()?,
        })
    }

    pub fn new(modality: Modality, short: &str) -> Self {
        Self {
            name: format!("{}:{short}", modality.name()),
            modality,
        }
    }

    pub fn kind(&self) -> VarKind {
        self.modality.kind()
    }

    pub fn scope(&self) -> Scope {
        self.modality.scope()
    }
}

/// Ordered variable list; its order fixes the feature column order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Catalog {
    pub variables: Vec<Variable>,
}

impl Catalog {
    pub fn new(variables: Vec<Variable>) -> Result<Self, DataError> {
        let mut seen = BTreeSet::new();
        for v in &variables {
            if !seen.insert(&v.name) {
                return Err(DataError::Invalid(format!("duplicate variable {:?}", v.name)));
            }
        }
        Ok(Self { variables })
    }

    pub fn get(&self, name: &str) -> Option<&Variable> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn longitudinal(&self) -> impl Iterator<Item = &Variable> {
        self.variables.iter().filter(|v| v.scope() == Scope::Longitudinal)
    }

    pub fn static_numeric(&self) -> impl Iterator<Item = &Variable> {
        self.variables
            .iter()
            .filter(|v| v.scope() == Scope::Static && v.kind() == VarKind::Numeric)
    }

    pub fn binary(&self) -> impl Iterator<Item = &Variable> {
        self.variables.iter().filter(|v| v.kind() == VarKind::Binary)
    }

    /// Feature columns: longitudinal values, then static numerics, then
    /// binary flags, each in catalog order.
    pub fn feature_order(&self) -> Vec<String> {
        self.longitudinal()
            .chain(self.static_numeric())
            .chain(self.binary())
            .map(|v| v.name.clone())
            .collect()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&Variable) -> bool) {
        self.variables.retain(|v| keep(v));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub day: i64,
    /// Observed values; an absent key is a missing observation.
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub static_numeric: BTreeMap<String, f64>,
    pub static_binary: BTreeMap<String, bool>,
    pub visits: Vec<Visit>,
    /// Death by day 60.
    pub label: bool,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.visits.is_empty() {
            return Err(DataError::Invalid(format!("patient {:?} has no visits", self.patient_id)));
        }
        if self.visits.windows(2).any(|w| w[0].day >= w[1].day) {
            return Err(DataError::Invalid(format!(
                "patient {:?} has visit days that are not strictly increasing",
                self.patient_id
            )));
        }
        Ok(())
    }

    /// Every variable name the record references.
    pub fn variable_names(&self) -> BTreeSet<&str> {
        let mut out: BTreeSet<&str> = self.static_numeric.keys().map(String::as_str).collect();
        out.extend(self.static_binary.keys().map(String::as_str));
        for v in &self.visits {
            out.extend(v.values.keys().map(String::as_str));
        }
        out
    }

    pub fn observed(&self, variable: &str) -> bool {
        self.visits.iter().any(|v| v.values.contains_key(variable))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cohort {
    pub records: Vec<PatientRecord>,
    pub catalog: Catalog,
}

impl Cohort {
    pub fn validate(&self) -> Result<(), DataError> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(&r.patient_id) {
                return Err(DataError::Invalid(format!("duplicate patient id {:?}", r.patient_id)));
            }
            r.validate()?;
            for name in r.variable_names() {
                if self.catalog.get(name).is_none() {
                    return Err(DataError::UnknownVariable(name.to_string()));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<(String, bool)> {
        self.records.iter().map(|r| (r.patient_id.clone(), r.label)).collect()
    }

    pub fn get(&self, patient_id: &str) -> Option<&PatientRecord> {
        self.records.iter().find(|r| r.patient_id == patient_id)
    }
}
