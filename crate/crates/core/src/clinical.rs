//! Additive admission-severity score used as a non-learned baseline.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Cohort, PatientRecord};

#[derive(Debug, Error)]
pub enum ClinicalError {
    #[error("scoring table: {0}")]
    Parse(String),
    #[error("variable {name:?}: {reason}")]
    Bracket { name: String, reason: String },
    #[error("scoring table has no rules")]
    Empty,
    #[error("maximum achievable score {achievable} exceeds the declared maximum {declared}")]
    MaxExceeded { achievable: u32, declared: u32 },
    #[error("patient {0:?} has no visits")]
    NoVisits(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub low: f64,
    pub high: f64,
    pub points: u32,
}

/// Point brackets for one variable; `[low, high)` intervals that tile
/// `range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableRule {
    pub name: String,
    #[serde(default = "full_range")]
    pub range: [f64; 2],
    pub brackets: Vec<Bracket>,
}

fn full_range() -> [f64; 2] {
    [f64::NEG_INFINITY, f64::INFINITY]
}

impl VariableRule {
    fn validate(&self) -> Result<(), ClinicalError> {
        let err = |reason: String| ClinicalError::Bracket {
            name: self.name.clone(),
            reason,
        };
        if self.brackets.is_empty() {
            return Err(err("no brackets".into()));
        }
        if self.brackets.iter().any(|b| b.low.is_nan() || b.high.is_nan() || b.low >= b.high) {
            return Err(err("every bracket needs low < high".into()));
        }
        let mut sorted = self.brackets.clone();
        sorted.sort_by(|a, b| a.low.total_cmp(&b.low));
        if sorted[0].low != self.range[0] {
            return Err(err(format!("brackets start at {} but the range starts at {}", sorted[0].low, self.range[0])));
        }
        for w in sorted.windows(2) {
            if w[1].low < w[0].high {
                return Err(err(format!("brackets [{}, {}) and [{}, {}) overlap", w[0].low, w[0].high, w[1].low, w[1].high)));
            }
            if w[1].low > w[0].high {
                return Err(err(format!("gap between {} and {}", w[0].high, w[1].low)));
            }
        }
        let end = sorted.last().expect("nonempty").high;
        if end != self.range[1] {
            return Err(err(format!("brackets end at {end} but the range ends at {}", self.range[1])));
        }
        Ok(())
    }

    /// Points for `x`; 0 when `x` falls outside the declared range.
    pub fn points(&self, x: f64) -> u32 {
        self.brackets
            .iter()
            .find(|b| b.low <= x && x < b.high)
            .map_or(0, |b| b.points)
    }

    fn max_points(&self) -> u32 {
        self.brackets.iter().map(|b| b.points).max().unwrap_or(0)
    }
}

/// Bonus awarded once when any listed flag is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChronicRule {
    pub name: String,
    pub flags: Vec<String>,
    pub points: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringTable {
    pub max_total: u32,
    #[serde(rename = "variable", default)]
    pub variables: Vec<VariableRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<VariableRule>,
    #[serde(default)]
    pub chronic: Vec<ChronicRule>,
}

const EXAMPLE: &str = include_str!("../assets/clinical_example.toml");

impl ScoringTable {
    pub fn from_toml(text: &str) -> Result<Self, ClinicalError> {
        let t: Self = toml::from_str(text).map_err(|e| ClinicalError::Parse(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_toml(&self) -> Result<String, ClinicalError> {
        toml::to_string(self).map_err(|e| ClinicalError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ClinicalError> {
        let text = std::fs::read_to_string(path).map_err(|e| ClinicalError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The table bundled for the synthetic generator's variables.
    pub fn example() -> Self {
        Self::from_toml(EXAMPLE).expect("bundled table is valid")
    }

    pub fn rules(&self) -> impl Iterator<Item = &VariableRule> {
        self.variables.iter().chain(self.age.as_ref())
    }

    pub fn validate(&self) -> Result<(), ClinicalError> {
        if self.variables.is_empty() && self.age.is_none() && self.chronic.is_empty() {
            return Err(ClinicalError::Empty);
        }
        let mut names = std::collections::BTreeSet::new();
        for r in self.rules() {
            r.validate()?;
            if !names.insert(&r.name) {
                return Err(ClinicalError::Bracket {
                    name: r.name.clone(),
                    reason: "listed twice".into(),
                });
            }
        }
        let achievable = self.rules().map(VariableRule::max_points).sum::<u32>()
            + self.chronic.iter().map(|c| c.points).sum::<u32>();
        if achievable > self.max_total {
            return Err(ClinicalError::MaxExceeded {
                achievable,
                declared: self.max_total,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalScore {
    pub patient_id: String,
    pub total: u32,
    pub breakdown: BTreeMap<String, u32>,
}

/// Scores the admission (first) visit plus static variables. A variable
/// with no value at admission earns 0 points.
pub fn clinical_score(record: &PatientRecord, table: &ScoringTable) -> Result<ClinicalScore, ClinicalError> {
    let first = record
        .visits
        .first()
        .ok_or_else(|| ClinicalError::NoVisits(record.patient_id.clone()))?;
    let mut breakdown = BTreeMap::new();
    for rule in table.rules() {
        let value = first
            .values
            .get(&rule.name)
            .or_else(|| record.static_numeric.get(&rule.name));
        breakdown.insert(rule.name.clone(), value.map_or(0, |x| rule.points(*x)));
    }
    for c in &table.chronic {
        let hit = c.flags.iter().any(|f| record.static_binary.get(f) == Some(&true));
        breakdown.insert(c.name.clone(), if hit { c.points } else { 0 });
    }
    Ok(ClinicalScore {
        patient_id: record.patient_id.clone(),
        total: breakdown.values().sum(),
        breakdown,
    })
}

/// Score mapped monotonically into (0, 1) so it can stand in for a model
/// risk.
pub fn clinical_risk(score: &ClinicalScore, table: &ScoringTable) -> f64 {
    (f64::from(score.total) + 0.5) / (f64::from(table.max_total) + 1.0)
}

/// Raw scores for the named patients, in the given order.
pub fn score_patients(cohort: &Cohort, ids: &[String], table: &ScoringTable) -> Result<Vec<f64>, ClinicalError> {
    ids.iter()
        .map(|id| {
            let r = cohort
                .get(id)
                .ok_or_else(|| ClinicalError::Parse(format!("patient {id:?} not in cohort")))?;
            Ok(f64::from(clinical_score(r, table)?.total))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Visit;

    const SINGLE: &str = "max_total = 10\n[[variable]]\nname = \"labs:x\"\nbrackets = [{ low = 0.0, high = 10.0, points = 0 }, { low = 10.0, high = inf, points = 4 }]\nrange = [0.0, inf]\n";

    fn rec(vals: &[(&str, f64)]) -> PatientRecord {
        PatientRecord {
            patient_id: "p".into(),
            static_numeric: BTreeMap::new(),
            static_binary: BTreeMap::new(),
            visits: vec![Visit {
                day: 0,
                values: vals.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            }],
            label: false,
        }
    }

    #[test]
    fn single_bracket_lookup() {
        let t = ScoringTable::from_toml(SINGLE).unwrap();
        assert_eq!(clinical_score(&rec(&[("labs:x", 12.0)]), &t).unwrap().total, 4);
        assert_eq!(clinical_score(&rec(&[("labs:x", 3.0)]), &t).unwrap().total, 0);
        assert_eq!(clinical_score(&rec(&[]), &t).unwrap().total, 0);
    }

    #[test]
    fn overlap_and_gap_name_the_variable() {
        let overlap = SINGLE.replace("low = 10.0, high = inf", "low = 9.0, high = inf");
        let e = ScoringTable::from_toml(&overlap).unwrap_err();
        assert!(e.to_string().contains("labs:x") && e.to_string().contains("overlap"), "{e}");
        let gap = SINGLE.replace("low = 10.0, high = inf", "low = 11.0, high = inf");
        let e = ScoringTable::from_toml(&gap).unwrap_err();
        assert!(e.to_string().contains("labs:x") && e.to_string().contains("gap"), "{e}");
        let cap = SINGLE.replace("max_total = 10", "max_total = 3");
        assert!(matches!(ScoringTable::from_toml(&cap), Err(ClinicalError::MaxExceeded { .. })));
        assert!(matches!(ScoringTable::from_toml("max_total = 5\n"), Err(ClinicalError::Empty)));
    }

    #[test]
    fn example_table_round_trips() {
        let t = ScoringTable::example();
        assert_eq!(ScoringTable::from_toml(&t.to_toml().unwrap()).unwrap(), t);
        assert!(t.max_total == 71);
    }

    #[test]
    fn chronic_bonus_awarded_once() {
        let t = ScoringTable::example();
        let mut r = rec(&[]);
        r.static_binary.insert("history:obesity".into(), true);
        r.static_binary.insert("history:diabetes_mellitus".into(), true);
        assert_eq!(clinical_score(&r, &t).unwrap().breakdown["chronic_health"], 2);
    }

    #[test]
    fn later_visits_ignored() {
        let t = ScoringTable::from_toml(SINGLE).unwrap();
        let mut r = rec(&[("labs:x", 1.0)]);
        r.visits.push(Visit {
            day: 1,
            values: BTreeMap::from([("labs:x".to_string(), 50.0)]),
        });
        assert_eq!(clinical_score(&r, &t).unwrap().total, 0);
    }
}
