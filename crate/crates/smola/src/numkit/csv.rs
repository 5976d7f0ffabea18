//! Matrix CSV format: a header line `rows,cols`, then one comma-separated
//! line per row. Values are written with 17 significant digits, which
//! round-trips every finite `f64` exactly.

use super::Matrix;
use crate::error::{Result, SmolaError};

pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    out.push_str(&format!("{},{}\n", m.rows(), m.cols()));
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<Matrix> {
    let corrupt = |reason: String| SmolaError::Corrupt {
        path: "<csv>".to_string(),
        reason,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| corrupt("missing header line".to_string()))?;
    let mut dims = header.split(',');
    let rows: usize = dims
        .next()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| corrupt(format!("bad header {header:?}")))?;
    let cols: usize = dims
        .next()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| corrupt(format!("bad header {header:?}")))?;
    if dims.next().is_some() {
        return Err(corrupt(format!("bad header {header:?}")));
    }

    let mut data = Vec::with_capacity(rows * cols);
    for (i, line) in lines.enumerate() {
        if i >= rows {
            return Err(corrupt(format!("more than {rows} data rows")));
        }
        for field in line.split(',') {
            let value: f64 = field
                .trim()
                .parse()
                .map_err(|_| corrupt(format!("row {i}: unparseable value {field:?}")))?;
            if !value.is_finite() {
                return Err(corrupt(format!("row {i}: non-finite value {field:?}")));
            }
            data.push(value);
        }
        if data.len() != (i + 1) * cols {
            return Err(corrupt(format!(
                "row {i}: expected {cols} values, have {}",
                data.len() - i * cols
            )));
        }
    }
    if data.len() != rows * cols {
        return Err(corrupt(format!(
            "expected {rows} rows, found {}",
            data.len() / cols.max(1)
        )));
    }
    Matrix::from_vec(rows, cols, data)
}
