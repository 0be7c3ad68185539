//! CSV ingestion for longitudinal data in the layout
//! `subject_id,visit,y,x1..xp,z1..zq`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use gplsim_core::{Error, LongitudinalDataset, SubjectBlock};

use crate::error::{CliError, Result};

/// Column layout inferred from the header.
#[derive(Debug)]
struct Layout {
    subject: usize,
    visit: usize,
    y: usize,
    /// Column index of x1..xp, in order.
    x: Vec<usize>,
    /// Column index of z1..zq, in order.
    z: Vec<usize>,
}

fn covariate_index(name: &str, prefix: char) -> Option<usize> {
    let rest = name.strip_prefix(prefix)?;
    let idx: usize = rest.parse().ok()?;
    (idx >= 1).then_some(idx)
}

fn parse_header(headers: &csv::StringRecord) -> Result<Layout> {
    let mut subject = None;
    let mut visit = None;
    let mut y = None;
    let mut x: HashMap<usize, usize> = HashMap::new();
    let mut z: HashMap<usize, usize> = HashMap::new();
    for (col, raw) in headers.iter().enumerate() {
        let name = raw.trim();
        match name {
            "subject_id" => subject = Some(col),
            "visit" => visit = Some(col),
            "y" => y = Some(col),
            _ => {
                if let Some(idx) = covariate_index(name, 'x') {
                    x.insert(idx, col);
                } else if let Some(idx) = covariate_index(name, 'z') {
                    z.insert(idx, col);
                } else {
                    return Err(Error::Parse {
                        line: 1,
                        msg: format!("unknown column `{name}`"),
                    }
                    .into());
                }
            }
        }
    }

    let mut missing = Vec::new();
    if subject.is_none() {
        missing.push("subject_id".to_string());
    }
    if visit.is_none() {
        missing.push("visit".to_string());
    }
    if y.is_none() {
        missing.push("y".to_string());
    }
    for (prefix, map) in [('x', &x), ('z', &z)] {
        let max = map.keys().max().copied().unwrap_or(0);
        if max == 0 {
            missing.push(format!("{prefix}1"));
            continue;
        }
        for idx in 1..=max {
            if !map.contains_key(&idx) {
                missing.push(format!("{prefix}{idx}"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Schema(missing).into());
    }

    let p = x.keys().max().copied().unwrap_or(0);
    let q = z.keys().max().copied().unwrap_or(0);
    Ok(Layout {
        subject: subject.unwrap(),
        visit: visit.unwrap(),
        y: y.unwrap(),
        x: (1..=p).map(|i| x[&i]).collect(),
        z: (1..=q).map(|i| z[&i]).collect(),
    })
}

struct Row {
    visit_order: f64,
    y: f64,
    x: Vec<f64>,
    z: Vec<f64>,
}

fn parse_field(record: &csv::StringRecord, col: usize, name: &str, line: usize) -> Result<f64> {
    let raw = record.get(col).ok_or_else(|| Error::Parse {
        line,
        msg: format!("row too short; missing `{name}`"),
    })?;
    raw.trim().parse::<f64>().map_err(|_| {
        Error::Parse {
            line,
            msg: format!("`{name}` value `{raw}` is not a number"),
        }
        .into()
    })
}

/// Reads a longitudinal dataset, grouping rows by `subject_id` (in first
/// appearance order) and ordering each subject's rows by `visit`. With
/// `standardize`, continuous covariate columns (more than two distinct
/// values) are centered and scaled to unit sample variance.
pub fn ingest_csv(path: &Path, standardize: bool) -> Result<LongitudinalDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => CliError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => CliError::Config(format!("{}: {e}", path.display())),
        })?;
    let layout = parse_header(reader.headers().map_err(|e| csv_parse_error(&e))?)?;

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<Row>> = HashMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for result in reader.records() {
        let record = result.map_err(|e| csv_parse_error(&e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let subject = record
            .get(layout.subject)
            .ok_or_else(|| Error::Parse { line, msg: "missing subject_id".into() })?
            .to_string();
        let visit_raw = record
            .get(layout.visit)
            .ok_or_else(|| Error::Parse { line, msg: "missing visit".into() })?
            .to_string();
        if !seen.insert((subject.clone(), visit_raw.clone())) {
            return Err(Error::DuplicateVisit { subject, visit: visit_raw }.into());
        }
        let visit_order = parse_field(&record, layout.visit, "visit", line)?;
        let y = parse_field(&record, layout.y, "y", line)?;
        let x = layout
            .x
            .iter()
            .enumerate()
            .map(|(i, &c)| parse_field(&record, c, &format!("x{}", i + 1), line))
            .collect::<Result<Vec<f64>>>()?;
        let z = layout
            .z
            .iter()
            .enumerate()
            .map(|(i, &c)| parse_field(&record, c, &format!("z{}", i + 1), line))
            .collect::<Result<Vec<f64>>>()?;
        if !rows.contains_key(&subject) {
            order.push(subject.clone());
        }
        rows.entry(subject).or_default().push(Row { visit_order, y, x, z });
    }
    if order.is_empty() {
        return Err(Error::Parse { line: 2, msg: "no data rows".into() }.into());
    }

    let p = layout.x.len();
    let q = layout.z.len();
    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut rs = rows.remove(&id).expect("grouped above");
        rs.sort_by(|a, b| a.visit_order.total_cmp(&b.visit_order));
        let m = rs.len();
        let y = DVector::from_iterator(m, rs.iter().map(|r| r.y));
        let x = DMatrix::from_fn(m, p, |j, k| rs[j].x[k]);
        let z = DMatrix::from_fn(m, q, |j, k| rs[j].z[k]);
        subjects.push(SubjectBlock { id, y, x, z });
    }

    if standardize {
        standardize_covariates(&mut subjects, p, q);
    }
    LongitudinalDataset::new(subjects).map_err(CliError::Core)
}

fn csv_parse_error(e: &csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse { line, msg: e.to_string() }.into()
}

/// Centers and scales each continuous covariate column (x then z) across all
/// observations; binary and constant columns are left untouched.
fn standardize_covariates(subjects: &mut [SubjectBlock], p: usize, q: usize) {
    for (is_x, k) in (0..p).map(|k| (true, k)).chain((0..q).map(|k| (false, k))) {
        let values: Vec<f64> = subjects
            .iter()
            .flat_map(|s| {
                let col = if is_x { s.x.column(k) } else { s.z.column(k) };
                col.iter().copied().collect::<Vec<f64>>()
            })
            .collect();
        let distinct: BTreeSet<u64> = values.iter().map(|v| v.to_bits()).collect();
        if distinct.len() <= 2 {
            continue;
        }
        let count = values.len() as f64;
        let mean = values.iter().sum::<f64>() / count;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1.0);
        if var <= 0.0 {
            continue;
        }
        let sd = var.sqrt();
        for s in subjects.iter_mut() {
            let mut col = if is_x { s.x.column_mut(k) } else { s.z.column_mut(k) };
            for v in col.iter_mut() {
                *v = (*v - mean) / sd;
            }
        }
    }
}
