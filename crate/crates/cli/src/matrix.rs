//! Plain-text matrices: one row per line, comma, tab or space separated.
//! Blank lines and lines starting with `#` are skipped.

use std::fs;
use std::path::Path;

use imbanid::error::{Error, Result};
use ndarray::Array2;

pub fn parse(text: &str) -> Result<Array2<f64>> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>().map_err(|e| Error::MalformedRows { line: idx + 1, reason: format!("{t:?}: {e}") })
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::MalformedRows { line: idx + 1, reason: format!("{} values, expected {c}", row.len()) })
            }
            _ => {}
        }
        if let Some(col) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonfiniteValue { row: rows, col });
        }
        values.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Shape("matrix file has no rows".into()))?;
    Ok(Array2::from_shape_vec((rows, cols), values).expect("rows x cols values"))
}

pub fn read(path: &Path) -> Result<Array2<f64>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_separators() {
        let m = parse("# p\n0.5, 0.5\n0.25\t0.75\n\n1 0\n").unwrap();
        assert_eq!(m.dim(), (3, 2));
        assert_eq!(m[[1, 1]], 0.75);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(matches!(parse("1 0\n1\n"), Err(Error::MalformedRows { line: 2, .. })));
        assert!(matches!(parse("1 x\n"), Err(Error::MalformedRows { line: 1, .. })));
        assert!(matches!(parse("1 NaN\n"), Err(Error::NonfiniteValue { row: 0, col: 1 })));
        assert!(parse("# nothing\n").is_err());
    }
}
