//! Loaders for the raw benchmark datasets.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Labelled feature rows.
#[derive(Debug, Clone)]
pub struct LabelledData {
    pub features: DMatrix<f64>,
    pub labels: Vec<u32>,
    pub n_classes: usize,
}

/// UCI letter format: a capital-letter label then 16 integer features,
/// comma separated.
pub fn parse_letter(text: &str) -> Result<LabelledData> {
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label = fields.next().unwrap_or("").trim();
        let c = label.chars().next().filter(|c| c.is_ascii_uppercase() && label.len() == 1);
        let Some(c) = c else {
            return Err(Error::Data(format!("line {}: bad label `{label}`", line_no + 1)));
        };
        let values: std::result::Result<Vec<f64>, _> = fields.map(|f| f.trim().parse::<f64>()).collect();
        let values = values.map_err(|e| Error::Data(format!("line {}: {e}", line_no + 1)))?;
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Data(format!(
                    "line {}: expected {w} features, got {}",
                    line_no + 1,
                    values.len()
                )))
            }
            _ => {}
        }
        labels.push(c as u32 - 'A' as u32);
        rows.extend(values);
    }
    let width = width.ok_or(Error::Data("no rows".into()))?;
    Ok(LabelledData {
        features: DMatrix::from_row_slice(labels.len(), width, &rows),
        n_classes: 26,
        labels,
    })
}

pub fn load_letter(path: &Path) -> Result<LabelledData> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_letter(&text)
}

/// One `(user, item, rating)` triple with raw ids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: u32,
    pub item: u32,
    pub rating: u8,
}

/// MovieLens `u.data`: tab-separated user, item, rating, timestamp.
pub fn parse_ratings(text: &str) -> Result<Vec<Rating>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 3 {
            return Err(Error::Data(format!("line {}: expected at least 3 fields", line_no + 1)));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<u32>()
                .map_err(|e| Error::Data(format!("line {}: {e}", line_no + 1)))
        };
        let rating = parse(f[2])?;
        if rating > 5 {
            return Err(Error::Data(format!("line {}: rating {rating} outside 0..=5", line_no + 1)));
        }
        out.push(Rating {
            user: parse(f[0])?,
            item: parse(f[1])?,
            rating: rating as u8,
        });
    }
    Ok(out)
}

pub fn load_ratings(path: &Path) -> Result<Vec<Rating>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_ratings(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn letter_rows() {
        let d = parse_letter("T,2,8\nA,5,12\n").unwrap();
        assert_eq!(d.labels, vec![19, 0]);
        assert_eq!(d.features[(1, 1)], 12.0);
        assert!(parse_letter("t,1,2").is_err());
        assert!(parse_letter("A,1,2\nB,1").is_err());
        assert!(parse_letter("A,x").is_err());
    }

    #[test]
    fn rating_rows() {
        let r = parse_ratings("196\t242\t3\t881250949\n186\t302\t3\t891717742\n").unwrap();
        assert_eq!(r[0], Rating { user: 196, item: 242, rating: 3 });
        assert!(parse_ratings("1\t2\n").is_err());
        assert!(parse_ratings("1\t2\t9\t0\n").is_err());
        assert!(parse_ratings("1\tx\t3\t0\n").is_err());
    }
}
