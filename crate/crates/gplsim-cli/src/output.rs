//! Output helpers: deterministic number formatting and small CSV writers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{CliError, Result};

/// Shortest representation that parses back to the same bits, so emitted
/// CSVs are round-trippable.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Writes a CSV file from a header and stringified rows.
pub fn write_csv<I, R>(path: &Path, header: &str, rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: AsRef<str>,
{
    let mut out = String::with_capacity(4096);
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(row.as_ref());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })
}

/// Joins already-formatted fields with commas.
pub fn csv_row(fields: &[String]) -> String {
    let mut row = String::new();
    for (i, f) in fields.iter().enumerate() {
        if i > 0 {
            row.push(',');
        }
        let _ = write!(row, "{f}");
    }
    row
}

/// Reads back a CSV written by this crate: returns (header, rows of fields).
pub fn read_csv(path: &Path) -> Result<(String, Vec<Vec<String>>)> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Config(format!("{}: empty file", path.display())))?
        .to_string();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formatting_round_trips_bitwise() {
        for v in [0.1, 1.0 / 3.0, -2.5e-17, 1e300, f64::INFINITY, 0.0, -0.75] {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v} -> {s}");
        }
    }

    #[test]
    fn csv_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![
            csv_row(&["a".into(), fmt_f64(0.1)]),
            csv_row(&["b".into(), fmt_f64(-3.5)]),
        ];
        write_csv(&path, "name,value", rows).unwrap();
        let (header, back) = read_csv(&path).unwrap();
        assert_eq!(header, "name,value");
        assert_eq!(back.len(), 2);
        assert_eq!(back[0][1].parse::<f64>().unwrap(), 0.1);
        assert_eq!(back[1][0], "b");
    }
}
