use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::record::{Catalog, Cohort, Modality, PatientRecord, Variable, Visit};
use super::DataError;

/// Lab panel: (name, mean, sd) in raw units.
const LABS: [(&str, f64, f64); 24] = [
    ("fibrinogen", 450.0, 120.0),
    ("c_reactive_protein", 80.0, 50.0),
    ("prothrombin_inr", 1.2, 0.2),
    ("prothrombin_time", 13.0, 2.0),
    ("lactate_dehydrogenase", 350.0, 120.0),
    ("d_dimer", 1.5, 1.0),
    ("albumin", 3.4, 0.5),
    ("ferritin", 800.0, 400.0),
    ("alanine_aminotransferase", 45.0, 25.0),
    ("aspartate_aminotransferase", 50.0, 25.0),
    ("chloride", 102.0, 4.0),
    ("protein", 6.5, 0.7),
    ("alkaline_phosphatase", 90.0, 30.0),
    ("bilirubin", 0.8, 0.4),
    ("calcium", 8.7, 0.6),
    ("creatinine", 1.1, 0.5),
    ("glucose", 140.0, 45.0),
    ("hematocrit", 38.0, 5.0),
    ("hemoglobin", 12.5, 1.8),
    ("potassium", 4.1, 0.5),
    ("platelets", 230.0, 80.0),
    ("erythrocytes", 4.3, 0.6),
    ("sodium", 138.0, 4.0),
    ("leukocytes", 9.0, 4.0),
];

const VITALS: [(&str, f64, f64); 4] = [
    ("heart_rate", 88.0, 15.0),
    ("respiratory_rate", 21.0, 5.0),
    ("systolic_bp", 125.0, 18.0),
    ("oxygen_saturation", 94.0, 3.0),
];

/// Rarely ordered tests that the prevalence filter is expected to drop.
const SPARSE: [(&str, f64, f64); 2] = [("interleukin_6", 40.0, 30.0), ("procalcitonin", 0.5, 0.4)];

const HISTORY: [&str; 4] = ["hypertension", "obesity", "hyperlipidemia", "diabetes_mellitus"];

/// Variables whose admission values rise (or fall, for a negative sign)
/// with the latent severity.
const SEVERITY_LOADINGS: [(&str, f64); 6] = [
    ("vitals:heart_rate", 1.0),
    ("vitals:respiratory_rate", 1.0),
    ("vitals:oxygen_saturation", -1.0),
    ("labs:creatinine", 1.0),
    ("labs:leukocytes", 1.0),
    ("labs:sodium", -0.5),
];

/// Generator settings. All value-level quantities are in units of the
/// variable's standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub visits_mean: f64,
    pub visits_sd: f64,
    pub visits_min: usize,
    pub visits_max: usize,
    /// Number of lab variables taken from the panel (at most 24).
    pub n_labs: usize,
    /// Number of vital signs (at most 4).
    pub n_vitals: usize,
    /// Number of sparse labs (at most 2).
    pub n_sparse: usize,
    /// Fraction of patients who ever have a sparse lab drawn.
    pub sparse_prevalence: f64,
    /// Per-cell probability that a longitudinal value is missing. Planted
    /// event cells are always observed.
    pub missing_rate: f64,
    /// Per adjacent visit pair and variable, probability that the two
    /// values swap places (measurement order jitter).
    pub interleave: f64,
    /// Size of a planted event.
    pub spike: f64,
    /// Number of consecutive visits a planted event lasts (clipped at the
    /// stay's ends).
    pub event_length: usize,
    /// Fraction of patients carrying the ordered two-event motif.
    pub motif_rate: f64,
    /// Fraction of motif carriers whose two events come in reversed order,
    /// a decoy that carries no risk.
    pub motif_reverse: f64,
    pub motif_features: [String; 2],
    /// Early feature and late feature of the long-range interaction.
    pub long_range_features: [String; 2],
    /// Probability of each of the two long-range events, independently.
    pub long_range_rate: f64,
    pub intercept: f64,
    pub motif_coef: f64,
    pub long_range_coef: f64,
    pub severity_coef: f64,
    /// Scale of logistic label noise; 0 makes labels a deterministic
    /// function of the planted latents.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 365,
            visits_mean: 10.0,
            visits_sd: 4.0,
            visits_min: 3,
            visits_max: 20,
            n_labs: 24,
            n_vitals: 4,
            n_sparse: 2,
            sparse_prevalence: 0.6,
            missing_rate: 0.1,
            interleave: 0.0,
            spike: 4.0,
            event_length: 3,
            motif_rate: 0.5,
            motif_reverse: 0.0,
            motif_features: ["labs:d_dimer".into(), "labs:ferritin".into()],
            long_range_features: ["labs:lactate_dehydrogenase".into(), "labs:albumin".into()],
            long_range_rate: 0.5,
            intercept: -1.5,
            motif_coef: 3.0,
            long_range_coef: 0.0,
            severity_coef: 0.8,
            noise: 1.0,
        }
    }
}

impl SynthConfig {
    /// Same cohort shape with every planted coefficient set to zero.
    pub fn null(&self) -> Self {
        Self {
            motif_coef: 0.0,
            long_range_coef: 0.0,
            severity_coef: 0.0,
            ..self.clone()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, DataError> {
        let cfg: Self = toml::from_str(text).map_err(|e| DataError::Invalid(format!("generator config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, DataError> {
        toml::to_string(self).map_err(|e| DataError::Invalid(format!("generator config: {e}")))
    }

    pub fn catalog(&self) -> Result<Catalog, DataError> {
        let mut vars = Vec::new();
        vars.extend(LABS[..self.n_labs].iter().map(|(n, ..)| Variable::new(Modality::Labs, n)));
        vars.extend(SPARSE[..self.n_sparse].iter().map(|(n, ..)| Variable::new(Modality::Labs, n)));
        vars.extend(VITALS[..self.n_vitals].iter().map(|(n, ..)| Variable::new(Modality::Vitals, n)));
        vars.push(Variable::new(Modality::Demographic, "age"));
        vars.push(Variable::new(Modality::Imaging, "rale"));
        vars.extend(HISTORY.iter().map(|n| Variable::new(Modality::History, n)));
        Catalog::new(vars)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if self.n_labs + self.n_vitals == 0 {
            return bad("at least one longitudinal variable is required".into());
        }
        if self.n_labs > LABS.len() || self.n_vitals > VITALS.len() || self.n_sparse > SPARSE.len() {
            return bad(format!(
                "variable counts exceed the panel ({} labs, {} vitals, {} sparse)",
                LABS.len(),
                VITALS.len(),
                SPARSE.len()
            ));
        }
        if self.visits_min == 0 || self.visits_min > self.visits_max {
            return bad("visit bounds must satisfy 1 <= visits_min <= visits_max".into());
        }
        if self.visits_min < 3 && (self.motif_rate > 0.0 || self.long_range_coef != 0.0) {
            return bad("planted events need visits_min >= 3".into());
        }
        if self.event_length == 0 {
            return bad("event_length must be positive".into());
        }
        if !(self.visits_sd >= 0.0 && self.visits_mean.is_finite()) {
            return bad("visit count distribution is invalid".into());
        }
        for (name, p) in [
            ("missing_rate", self.missing_rate),
            ("interleave", self.interleave),
            ("motif_rate", self.motif_rate),
            ("motif_reverse", self.motif_reverse),
            ("long_range_rate", self.long_range_rate),
            ("sparse_prevalence", self.sparse_prevalence),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.missing_rate >= 1.0 {
            return bad("missing_rate must be below 1".into());
        }
        let coefs = [
            self.spike,
            self.intercept,
            self.motif_coef,
            self.long_range_coef,
            self.severity_coef,
            self.noise,
        ];
        if coefs.iter().any(|c| !c.is_finite()) || self.noise < 0.0 {
            return bad("coefficients must be finite and noise nonnegative".into());
        }
        let cat = self.catalog()?;
        for name in self.motif_features.iter().chain(&self.long_range_features) {
            match cat.get(name) {
                Some(v) if v.modality.scope() == super::Scope::Longitudinal => {}
                _ => return bad(format!("planted feature {name:?} is not a generated longitudinal variable")),
            }
        }
        if self.motif_features[0] == self.motif_features[1] || self.long_range_features[0] == self.long_range_features[1] {
            return bad("planted feature pairs need two distinct variables".into());
        }
        Ok(())
    }
}

/// Latent quantities behind one synthetic label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub patient_id: String,
    /// +1 for the forward motif, −1 for the reversed decoy, 0 for none.
    /// Only the forward order carries risk.
    pub motif: i8,
    /// 1 when both the early and the late event occurred.
    pub long_range: i8,
    pub severity: f64,
    /// Noise-free label logit; the Bayes-optimal score.
    pub logit: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub cohort: Cohort,
    pub truth: Vec<PlantedTruth>,
}

fn stats(name: &str) -> (f64, f64) {
    let (modality, short) = name.split_once(':').expect("catalog names carry a prefix");
    let table: &[(&str, f64, f64)] = match modality {
        "vitals" => &VITALS,
        _ if SPARSE.iter().any(|s| s.0 == short) => &SPARSE,
        _ => &LABS,
    };
    let (_, m, s) = table.iter().find(|e| e.0 == short).expect("generated variable");
    (*m, *s)
}

fn logistic(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random_range(f64::EPSILON..1.0);
    (u / (1.0 - u)).ln()
}

/// Generates a cohort whose label can depend on an ordered pair of short
/// elevation episodes (optionally with a reversed, risk-free decoy), on the
/// co-occurrence of an early and a late episode in two other variables, and
/// on an admission severity latent that also drives demographics, history
/// and imaging. Events last `event_length` visits; single-visit spikes are
/// barely learnable at the default training budget. The default weights
/// the motif and severity and leaves the long-range pair unweighted.
pub fn generate_synthetic_cohort(cfg: &SynthConfig, seed: u64) -> Result<SyntheticCohort, DataError> {
    cfg.validate()?;
    let catalog = cfg.catalog()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let longs: Vec<String> = catalog.longitudinal().map(|v| v.name.clone()).collect();
    let sparse: Vec<String> = SPARSE[..cfg.n_sparse].iter().map(|(n, ..)| format!("labs:{n}")).collect();
    let width = (cfg.n_patients as f64).log10().floor() as usize + 1;

    let mut records = Vec::with_capacity(cfg.n_patients);
    let mut truth = Vec::with_capacity(cfg.n_patients);
    for i in 0..cfg.n_patients {
        let id = format!("P{:0width$}", i + 1);
        let t = (cfg.visits_mean + cfg.visits_sd * std.sample(&mut rng)).round();
        let t = (t.max(cfg.visits_min as f64) as usize).min(cfg.visits_max);
        let severity = std.sample(&mut rng);

        // Latent z-scores, one row per visit.
        let mut z: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for name in &longs {
            let base = 0.6 * std.sample(&mut rng);
            let mut e = 0.5 * std.sample(&mut rng);
            let mut col = Vec::with_capacity(t);
            for _ in 0..t {
                col.push(base + e);
                e = 0.6 * e + 0.4 * std.sample(&mut rng);
            }
            z.insert(name, col);
        }
        for (name, load) in SEVERITY_LOADINGS {
            if let Some(col) = z.get_mut(name) {
                let mut w = 1.0;
                for x in col.iter_mut() {
                    *x += load * w * severity;
                    w *= 0.7;
                }
            }
        }

        let mut pinned: Vec<(&str, usize)> = Vec::new();
        let len = cfg.event_length;
        let mut plant = |name: &str, from: usize, z: &mut BTreeMap<&str, Vec<f64>>| {
            let col = z.get_mut(name).expect("validated");
            for k in from..(from + len).min(t) {
                col[k] += cfg.spike;
                pinned.push((longs.iter().find(|n| n.as_str() == name).expect("validated"), k));
            }
        };
        let motif: i8 = if rng.random_bool(cfg.motif_rate) {
            let gap = rng.random_range(1..=2usize);
            let p = rng.random_range(0..t - gap);
            let forward = !rng.random_bool(cfg.motif_reverse);
            let (first, second) = if forward {
                (&cfg.motif_features[0], &cfg.motif_features[1])
            } else {
                (&cfg.motif_features[1], &cfg.motif_features[0])
            };
            plant(first, p, &mut z);
            plant(second, p + gap, &mut z);
            if forward {
                1
            } else {
                -1
            }
        } else {
            0
        };
        let [early, late] = &cfg.long_range_features;
        let early_event = rng.random_bool(cfg.long_range_rate);
        let late_event = rng.random_bool(cfg.long_range_rate);
        if early_event {
            let at = rng.random_range(0..2usize);
            plant(early, at, &mut z);
        }
        if late_event {
            plant(late, t.saturating_sub(len), &mut z);
        }

        if cfg.interleave > 0.0 {
            for (name, col) in z.iter_mut() {
                for k in 0..t - 1 {
                    let locked = pinned.iter().any(|(n, at)| n == name && (*at == k || *at == k + 1));
                    if !locked && rng.random_bool(cfg.interleave) {
                        col.swap(k, k + 1);
                    }
                }
            }
        }

        let has_sparse: Vec<bool> = sparse.iter().map(|_| rng.random_bool(cfg.sparse_prevalence)).collect();
        let mut day = 0i64;
        let mut visits = Vec::with_capacity(t);
        for k in 0..t {
            let mut values = BTreeMap::new();
            for name in &longs {
                let is_pinned = pinned.iter().any(|(n, at)| n == name && *at == k);
                let sparse_idx = sparse.iter().position(|s| s == name);
                let observed = match sparse_idx {
                    Some(j) => has_sparse[j] && rng.random_bool(0.5),
                    None => is_pinned || !rng.random_bool(cfg.missing_rate),
                };
                if observed {
                    let (m, s) = stats(name);
                    values.insert(name.clone(), m + s * z[name.as_str()][k]);
                }
            }
            visits.push(Visit { day, values });
            day += rng.random_range(1..=3i64);
        }

        let mut static_numeric = BTreeMap::new();
        let age = 62.0 + 13.0 * (0.5 * severity + 0.866 * std.sample(&mut rng));
        static_numeric.insert("demographic:age".to_string(), age.clamp(18.0, 100.0).round());
        let rale = 18.0 + 9.0 * (0.5 * severity + 0.866 * std.sample(&mut rng));
        static_numeric.insert("imaging:rale".to_string(), rale.clamp(0.0, 48.0).round());
        let mut static_binary = BTreeMap::new();
        let p_flag = 1.0 / (1.0 + (0.9 - 0.4 * severity).exp());
        for h in HISTORY {
            static_binary.insert(format!("history:{h}"), rng.random_bool(p_flag));
        }

        let long_range = i8::from(early_event && late_event);
        let logit = cfg.intercept
            + cfg.motif_coef * f64::from(i8::from(motif == 1))
            + cfg.long_range_coef * f64::from(long_range)
            + cfg.severity_coef * severity;
        let label = logit + cfg.noise * logistic(&mut rng) > 0.0;

        records.push(PatientRecord {
            patient_id: id.clone(),
            static_numeric,
            static_binary,
            visits,
            label,
        });
        truth.push(PlantedTruth {
            patient_id: id,
            motif,
            long_range,
            severity,
            logit,
        });
    }
    let cohort = Cohort { records, catalog };
    cohort.validate()?;
    Ok(SyntheticCohort { cohort, truth })
}
