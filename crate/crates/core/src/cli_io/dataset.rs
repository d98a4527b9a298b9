use std::io::{Read, Write};
use std::path::Path;

use crate::data_model::{MaskedDataset, MISSING};
use crate::error::{Error, Result};
use crate::missingness::{gen_mcar_masks, McarSpec};

/// A dataset read from CSV together with its column names.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvDataset {
    pub data: MaskedDataset,
    pub feature_names: Vec<String>,
    pub target: String,
}

/// Loads a CSV with a header row. Every column other than `target` is a
/// feature; cells equal to one of `na_tokens` (after trimming) are missing.
pub fn load_csv_dataset(path: &Path, target: &str, na_tokens: &[String]) -> Result<MaskedDataset> {
    Ok(read_csv_dataset(std::fs::File::open(path)?, target, na_tokens)?.data)
}

pub fn read_csv_dataset<R: Read>(
    reader: R,
    target: &str,
    na_tokens: &[String],
) -> Result<CsvDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let t = header
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| Error::MissingTargetColumn(target.to_string()))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != t)
        .map(|(_, h)| h.clone())
        .collect();
    let d = feature_names.len();
    let is_na = |cell: &str| na_tokens.iter().any(|tok| tok == cell);
    let parse = |row: usize, col: usize, cell: &str| -> Result<f64> {
        match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::Parse {
                row,
                column: header[col].clone(),
                value: cell.to_string(),
            }),
        }
    };

    let mut x = Vec::new();
    let mut masks = Vec::new();
    let mut y = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if rec.len() != header.len() {
            return Err(Error::LengthMismatch {
                expected: header.len(),
                got: rec.len(),
            });
        }
        let mut bits = Vec::with_capacity(d);
        for (j, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if j == t {
                if is_na(cell) {
                    return Err(Error::MissingTarget { row });
                }
                y.push(parse(row, j, cell)?);
            } else if is_na(cell) {
                bits.push(true);
                x.push(MISSING);
            } else {
                bits.push(false);
                x.push(parse(row, j, cell)?);
            }
        }
        masks.push(crate::data_model::MaskPattern::new(bits));
    }
    Ok(CsvDataset {
        data: MaskedDataset::new(x, masks, y, d)?,
        feature_names,
        target: target.to_string(),
    })
}

/// Writes `data` with a header; missing cells become `NA`. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_csv_dataset<W: Write>(
    writer: W,
    data: &MaskedDataset,
    feature_names: Option<&[String]>,
    target: &str,
) -> Result<()> {
    let d = data.dim();
    let names: Vec<String> = match feature_names {
        Some(n) => {
            crate::error::check_len(d, n.len())?;
            n.to_vec()
        }
        None => (1..=d).map(|j| format!("x{j}")).collect(),
    };
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(names.iter().map(String::as_str).chain([target]))?;
    for i in 0..data.n() {
        let mut rec: Vec<String> = (0..d)
            .map(|j| {
                data.get(i, j)
                    .map_or_else(|| "NA".to_string(), |v| v.to_string())
            })
            .collect();
        rec.push(data.response(i).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Adds MCAR missingness at rate `p` on `columns`. Existing missing cells stay
/// missing; values hidden by the new masks are kept as ground truth.
pub fn inject_mcar(
    data: &MaskedDataset,
    columns: &[usize],
    p: f64,
    seed: u64,
) -> Result<MaskedDataset> {
    let d = data.dim();
    if let Some(&j) = columns.iter().find(|&&j| j >= d) {
        return Err(Error::invalid(
            "columns",
            format!("index {j} out of range for d = {d}"),
        ));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("p", format!("{p} not in [0, 1]")));
    }
    if p == 0.0 || data.n() == 0 || columns.is_empty() {
        return Ok(data.clone());
    }
    let fresh = gen_mcar_masks(
        data.n(),
        d,
        &McarSpec::with_columns(p, columns.to_vec()),
        seed,
    )?;
    let masks = data
        .masks()
        .iter()
        .zip(&fresh)
        .map(|(a, b)| a.union(b))
        .collect();
    data.remask(masks)
}
