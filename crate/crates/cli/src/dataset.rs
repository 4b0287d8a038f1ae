//! Subject-level CSV input.
//!
//! Header: `id, enroll_time, arm, outcome, pi_1, …, pi_J[, x_1, …]`. The
//! `pi_a` columns are the design's assignment probabilities for the
//! subject; covariate columns start with `x_`. Outcomes may be empty for
//! subjects whose arm is not analysed.

use std::io::{Read, Write};
use std::path::Path;

use platform_gp::estimator::Subject;

use crate::error::{io_error, CliError};

/// Tolerance on `Σ_a pi_a = 1`.
pub const PROB_SUM_TOL: f64 = 1e-6;

const FIXED: [&str; 4] = ["id", "enroll_time", "arm", "outcome"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
    pub n_arms: usize,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    /// Keep only the named covariate columns, in the given order.
    pub fn select_covariates(&self, names: &[String]) -> Result<Dataset, CliError> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.covariate_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| CliError::Input(format!("covariate column `{n}` is not in the dataset")))
            })
            .collect::<Result<_, _>>()?;
        let subjects = self
            .subjects
            .iter()
            .map(|s| Subject {
                covariates: idx.iter().map(|&i| s.covariates[i]).collect(),
                ..s.clone()
            })
            .collect();
        Ok(Dataset {
            subjects,
            n_arms: self.n_arms,
            covariate_names: names.to_vec(),
        })
    }
}

fn field_err(row: usize, col: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("row {row}, column `{col}`: {msg}"))
}

fn number(row: usize, col: &str, raw: &str) -> Result<f64, CliError> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| field_err(row, col, format!("`{raw}` is not a number")))?;
    if !v.is_finite() {
        return Err(field_err(row, col, format!("`{raw}` is not finite")));
    }
    Ok(v)
}

/// Parse and validate. Row numbers in errors count data rows from 1.
pub fn parse_dataset<R: Read>(reader: R) -> Result<Dataset, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Input(format!("cannot read header: {e}")))?
        .iter()
        .map(String::from)
        .collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let fixed: Vec<usize> = FIXED
        .iter()
        .map(|n| col(n).ok_or_else(|| CliError::Input(format!("missing required column `{n}`"))))
        .collect::<Result<_, _>>()?;
    let mut pi_cols = Vec::new();
    while let Some(c) = col(&format!("pi_{}", pi_cols.len() + 1)) {
        pi_cols.push(c);
    }
    if pi_cols.is_empty() {
        return Err(CliError::Input(
            "missing assignment-probability columns `pi_1`, `pi_2`, …".into(),
        ));
    }
    let mut cov_cols = Vec::new();
    let mut covariate_names = Vec::new();
    for (i, h) in header.iter().enumerate() {
        if fixed.contains(&i) || pi_cols.contains(&i) {
            continue;
        }
        if h.starts_with("x_") {
            cov_cols.push(i);
            covariate_names.push(h.clone());
        } else if h.starts_with("pi_") {
            return Err(CliError::Input(format!(
                "column `{h}` breaks the consecutive numbering pi_1..pi_{}",
                pi_cols.len()
            )));
        } else {
            return Err(CliError::Input(format!(
                "unexpected column `{h}`; covariate columns must start with `x_`"
            )));
        }
    }
    let n_arms = pi_cols.len();

    let mut subjects = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| CliError::Input(format!("row {row}: {e}")))?;
        if rec.len() != header.len() {
            return Err(CliError::Input(format!(
                "row {row}: {} fields, header has {}",
                rec.len(),
                header.len()
            )));
        }
        let id = rec[fixed[0]].to_string();
        if id.is_empty() {
            return Err(field_err(row, "id", "empty"));
        }
        let enroll_time = number(row, "enroll_time", &rec[fixed[1]])?;
        let arm: usize = rec[fixed[2]]
            .parse()
            .map_err(|_| field_err(row, "arm", format!("`{}` is not an arm number", &rec[fixed[2]])))?;
        if arm == 0 || arm > n_arms {
            return Err(field_err(row, "arm", format!("arm {arm} outside 1..={n_arms}")));
        }
        let raw_y = &rec[fixed[3]];
        let outcome = if raw_y.is_empty() || raw_y.eq_ignore_ascii_case("na") {
            None
        } else {
            Some(number(row, "outcome", raw_y)?)
        };
        let mut rand_probs = Vec::with_capacity(n_arms);
        for (a, &c) in pi_cols.iter().enumerate() {
            let name = format!("pi_{}", a + 1);
            let p = number(row, &name, &rec[c])?;
            if !(0.0..=1.0).contains(&p) {
                return Err(field_err(row, &name, format!("probability {p} outside [0, 1]")));
            }
            rand_probs.push(p);
        }
        let total: f64 = rand_probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(CliError::Input(format!(
                "row {row}: assignment probabilities sum to {total}, not 1"
            )));
        }
        let covariates = cov_cols
            .iter()
            .zip(&covariate_names)
            .map(|(&c, name)| number(row, name, &rec[c]))
            .collect::<Result<_, _>>()?;
        subjects.push(Subject {
            id,
            enroll_time,
            arm,
            outcome,
            covariates,
            rand_probs,
        });
    }
    if subjects.is_empty() {
        return Err(CliError::Input("dataset has no rows".into()));
    }
    Ok(Dataset {
        subjects,
        n_arms,
        covariate_names,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let f = std::fs::File::open(path).map_err(|e| io_error(path, e))?;
    parse_dataset(f).map_err(|e| match e {
        CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Write subjects in the input format. Floats use the shortest exact
/// representation, so parsing the output gives back identical values.
pub fn write_dataset<W: Write>(subjects: &[Subject], n_arms: usize, w: W) -> Result<(), CliError> {
    let p = subjects.first().map_or(0, |s| s.covariates.len());
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
    header.extend((1..=n_arms).map(|a| format!("pi_{a}")));
    header.extend((1..=p).map(|d| format!("x_{d}")));
    let io = |e: csv::Error| CliError::Io(e.to_string());
    wtr.write_record(&header).map_err(io)?;
    for s in subjects {
        let mut rec = vec![
            s.id.clone(),
            s.enroll_time.to_string(),
            s.arm.to_string(),
            s.outcome.map(|v| v.to_string()).unwrap_or_default(),
        ];
        rec.extend((1..=n_arms).map(|a| s.prob(a).to_string()));
        rec.extend(s.covariates.iter().map(|v| v.to_string()));
        wtr.write_record(&rec).map_err(io)?;
    }
    wtr.flush().map_err(|e| CliError::Io(e.to_string()))
}
