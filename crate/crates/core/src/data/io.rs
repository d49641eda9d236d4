use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::record::{Catalog, Cohort, PatientRecord, Scope, VarKind, Variable, Visit};
use super::DataError;

pub const STATIC_FILE: &str = "static.csv";
pub const VISITS_FILE: &str = "visits.csv";

fn parse_err(file: &str, line: u64, msg: impl Into<String>) -> DataError {
    DataError::Parse {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

fn open(dir: &Path, name: &str) -> Result<File, DataError> {
    File::open(dir.join(name)).map_err(|e| DataError::Io(format!("{}: {e}", dir.join(name).display())))
}

struct Header {
    id: usize,
    key: usize,
    vars: Vec<(usize, Variable)>,
}

fn read_header(
    file: &str,
    headers: &csv::StringRecord,
    key: &str,
    scope: Scope,
) -> Result<Header, DataError> {
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(file, 1, format!("missing required column {name:?}")))
    };
    let id = find("patient_id")?;
    let key_idx = find(key)?;
    let mut vars = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if i == id || i == key_idx {
            continue;
        }
        let v = Variable::parse(h).map_err(|e| parse_err(file, 1, e.to_string()))?;
        if v.scope() != scope {
            return Err(parse_err(
                file,
                1,
                format!("column {h:?} has the wrong scope for this file"),
            ));
        }
        vars.push((i, v));
    }
    Ok(Header { id, key: key_idx, vars })
}

fn parse_number(file: &str, line: u64, column: &str, raw: &str) -> Result<Option<f64>, DataError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    let v: f64 = raw
        .parse()
        .map_err(|_| parse_err(file, line, format!("column {column:?}: cannot parse {raw:?} as a number")))?;
    if !v.is_finite() {
        return Err(parse_err(file, line, format!("column {column:?}: non-finite value {raw:?}")));
    }
    Ok(Some(v))
}

fn parse_flag(file: &str, line: u64, column: &str, raw: &str) -> Result<Option<bool>, DataError> {
    match raw.trim() {
        "" => Ok(None),
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        other => Err(parse_err(file, line, format!("column {column:?}: expected 0 or 1, got {other:?}"))),
    }
}

/// Reads `static.csv` and `visits.csv` from `dir`.
pub fn load_cohort(dir: &Path) -> Result<Cohort, DataError> {
    load_cohort_from(open(dir, STATIC_FILE)?, open(dir, VISITS_FILE)?)
}

/// Parses a cohort from the two delimited-text streams.
pub fn load_cohort_from(static_src: impl Read, visits_src: impl Read) -> Result<Cohort, DataError> {
    let mut sr = csv::ReaderBuilder::new().has_headers(true).from_reader(static_src);
    let sh = sr.headers().map_err(|e| parse_err(STATIC_FILE, 1, e.to_string()))?.clone();
    let sh = read_header(STATIC_FILE, &sh, "label", Scope::Static)?;

    let mut records: Vec<PatientRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for row in sr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(STATIC_FILE, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let id = row[sh.id].trim().to_string();
        if id.is_empty() {
            return Err(parse_err(STATIC_FILE, line, "empty patient_id"));
        }
        let label = parse_flag(STATIC_FILE, line, "label", &row[sh.key])?
            .ok_or_else(|| parse_err(STATIC_FILE, line, "missing label"))?;
        let mut rec = PatientRecord {
            patient_id: id.clone(),
            static_numeric: BTreeMap::new(),
            static_binary: BTreeMap::new(),
            visits: Vec::new(),
            label,
        };
        for (i, v) in &sh.vars {
            match v.kind() {
                VarKind::Numeric => {
                    if let Some(x) = parse_number(STATIC_FILE, line, &v.name, &row[*i])? {
                        rec.static_numeric.insert(v.name.clone(), x);
                    }
                }
                VarKind::Binary => {
                    if let Some(b) = parse_flag(STATIC_FILE, line, &v.name, &row[*i])? {
                        rec.static_binary.insert(v.name.clone(), b);
                    }
                }
            }
        }
        if index.insert(id.clone(), records.len()).is_some() {
            return Err(parse_err(STATIC_FILE, line, format!("duplicate patient_id {id:?}")));
        }
        records.push(rec);
    }

    let mut vr = csv::ReaderBuilder::new().has_headers(true).from_reader(visits_src);
    let vh = vr.headers().map_err(|e| parse_err(VISITS_FILE, 1, e.to_string()))?.clone();
    let vh = read_header(VISITS_FILE, &vh, "day_index", Scope::Longitudinal)?;
    for row in vr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(VISITS_FILE, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let id = row[vh.id].trim();
        let &ri = index
            .get(id)
            .ok_or_else(|| parse_err(VISITS_FILE, line, format!("patient_id {id:?} is not in {STATIC_FILE}")))?;
        let raw_day = row[vh.key].trim();
        let day: i64 = raw_day
            .parse()
            .map_err(|_| parse_err(VISITS_FILE, line, format!("day_index {raw_day:?} is not an integer")))?;
        let mut values = BTreeMap::new();
        for (i, v) in &vh.vars {
            if let Some(x) = parse_number(VISITS_FILE, line, &v.name, &row[*i])? {
                values.insert(v.name.clone(), x);
            }
        }
        records[ri].visits.push(Visit { day, values });
    }

    for r in &mut records {
        r.visits.sort_by_key(|v| v.day);
    }
    let catalog = Catalog::new(vh.vars.into_iter().chain(sh.vars).map(|(_, v)| v).collect())?;
    let cohort = Cohort { records, catalog };
    cohort.validate()?;
    Ok(cohort)
}

fn fmt_num(x: Option<&f64>) -> String {
    // `Display` for f64 prints the shortest string that parses back to the
    // same bits.
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the cohort as `static.csv` and `visits.csv` under `dir`.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io(format!("{}: {e}", dir.display())))?;
    let create = |name: &str| File::create(dir.join(name)).map_err(|e| DataError::Io(format!("{name}: {e}")));
    write_cohort_to(cohort, create(STATIC_FILE)?, create(VISITS_FILE)?)
}

pub fn write_cohort_to(cohort: &Cohort, static_dst: impl Write, visits_dst: impl Write) -> Result<(), DataError> {
    cohort.validate()?;
    let io = |e: csv::Error| DataError::Io(e.to_string());
    let statics: Vec<&Variable> = cohort
        .catalog
        .variables
        .iter()
        .filter(|v| v.scope() == Scope::Static)
        .collect();
    let longs: Vec<&Variable> = cohort.catalog.longitudinal().collect();

    let mut w = csv::Writer::from_writer(static_dst);
    let mut head = vec!["patient_id".to_string(), "label".to_string()];
    head.extend(statics.iter().map(|v| v.name.clone()));
    w.write_record(&head).map_err(io)?;
    for r in &cohort.records {
        let mut row = vec![r.patient_id.clone(), u8::from(r.label).to_string()];
        for v in &statics {
            row.push(match v.kind() {
                VarKind::Numeric => fmt_num(r.static_numeric.get(&v.name)),
                VarKind::Binary => r.static_binary.get(&v.name).map(|b| u8::from(*b).to_string()).unwrap_or_default(),
            });
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| DataError::Io(e.to_string()))?;

    let mut w = csv::Writer::from_writer(visits_dst);
    let mut head = vec!["patient_id".to_string(), "day_index".to_string()];
    head.extend(longs.iter().map(|v| v.name.clone()));
    w.write_record(&head).map_err(io)?;
    for r in &cohort.records {
        for visit in &r.visits {
            let mut row = vec![r.patient_id.clone(), visit.day.to_string()];
            row.extend(longs.iter().map(|v| fmt_num(visit.values.get(&v.name))));
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush().map_err(|e| DataError::Io(e.to_string()))?;
    Ok(())
}
