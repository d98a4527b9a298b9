use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::MethodReport;

pub const RESULTS_HEADER: &str =
    "method,repetition,group,n_test,coverage,mean_length,infinite_fraction,seed";

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub method: String,
    pub repetition: usize,
    pub group: String,
    pub n_test: usize,
    pub coverage: f64,
    pub mean_length: f64,
    pub infinite_fraction: f64,
    pub seed: u64,
}

/// Flattens reports into rows, one per `(method, repetition, group)`.
pub fn results_rows(reports: &[MethodReport]) -> Vec<ResultsRow> {
    reports
        .iter()
        .flat_map(|r| {
            r.labeled_groups()
                .into_iter()
                .map(move |(group, g)| ResultsRow {
                    method: r.method.name().to_string(),
                    repetition: r.repetition,
                    group,
                    n_test: g.n_test,
                    coverage: g.coverage,
                    mean_length: g.mean_length,
                    infinite_fraction: g.infinite_fraction,
                    seed: r.seed,
                })
        })
        .collect()
}

/// `printf("%g")`: six significant digits, trailing zeros removed.
pub fn format_g(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Writes rows sorted by `(method, repetition, group)` under the fixed header.
pub fn write_results<W: Write>(writer: W, rows: &[ResultsRow]) -> Result<()> {
    let mut sorted: Vec<&ResultsRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.method, a.repetition, &a.group).cmp(&(&b.method, b.repetition, &b.group))
    });
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RESULTS_HEADER.split(','))?;
    for r in sorted {
        w.write_record([
            r.method.clone(),
            r.repetition.to_string(),
            r.group.clone(),
            r.n_test.to_string(),
            format_g(r.coverage),
            format_g(r.mean_length),
            format_g(r.infinite_fraction),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_results(rows: &[ResultsRow], path: &Path) -> Result<()> {
    write_results(std::fs::File::create(path)?, rows)
}

pub fn read_results<R: Read>(reader: R) -> Result<Vec<ResultsRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<&str> = rdr.headers()?.iter().collect();
    if header.join(",") != RESULTS_HEADER {
        return Err(Error::Config(format!(
            "unexpected results header `{}`",
            header.join(",")
        )));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
