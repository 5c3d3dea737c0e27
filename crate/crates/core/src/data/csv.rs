use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{CimdlError, Result};
use crate::model::FeatureBatch;

/// Plain numeric CSV, one matrix row per line. Blank lines are skipped.
pub fn read_csv_features(path: impl AsRef<Path>) -> Result<FeatureBatch> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CimdlError::io(path, e))?;
    parse_csv(&text, path)
}

fn parse_csv(text: &str, path: &Path) -> Result<FeatureBatch> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len() as u64;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fmt_err = |message: String| CimdlError::Format {
            path: path.to_path_buf(),
            offset: start,
            message,
        };
        let before = data.len();
        for field in trimmed.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| fmt_err(format!("line {}: {field:?} is not a number", rows + 1)))?;
            data.push(v);
        }
        let width = data.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(fmt_err(format!(
                    "line {} has {width} fields, expected {c} (ragged CSV)",
                    rows + 1
                )))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| CimdlError::Format {
        path: path.to_path_buf(),
        offset: 0,
        message: "CSV file has no rows".into(),
    })?;
    FeatureBatch::new(Array2::from_shape_vec((rows, cols), data).expect("rectangular"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn parses_rectangular() {
        let x = parse_csv("1,2,3\n4, 5.5 ,-6\n\n", Path::new("t.csv")).unwrap();
        assert_eq!(x.as_array(), &array![[1.0, 2.0, 3.0], [4.0, 5.5, -6.0]]);
    }

    #[test]
    fn rejects_ragged_and_garbage() {
        let err = parse_csv("1,2\n3\n", Path::new("t.csv"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("ragged"), "{err}");
        assert!(parse_csv("1,x\n", Path::new("t.csv")).is_err());
        assert!(parse_csv("\n\n", Path::new("t.csv")).is_err());
    }
}
