//! Cumulative acceptance rates and expected accepted-token counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-request cumulative acceptance rates.
///
/// Row `i`, column `j` holds the probability that draft tokens `1..=j` of
/// request `i` are all accepted. The bonus position (`j = 0`, rate 1) is
/// implicit and never stored.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ArTable {
    rows: Vec<Vec<f64>>,
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{name} must lie in [0, 1], got {p}"
        )))
    }
}

/// Cumulative rate after one more draft token with the given confidence.
pub fn extend_ar(prefix_ar: f64, confidence: f64) -> Result<f64> {
    check_probability("prefix acceptance rate", prefix_ar)?;
    check_probability("confidence", confidence)?;
    Ok(prefix_ar * confidence)
}

impl ArTable {
    /// `batch_size` empty rows.
    pub fn empty(batch_size: usize) -> Self {
        Self {
            rows: vec![Vec::new(); batch_size],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let table = Self { rows };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            let mut prev = 1.0;
            for &ar in row {
                check_probability("acceptance rate", ar)?;
                if ar > prev {
                    return Err(Error::InvalidArgument(format!(
                        "row {i} is not non-increasing ({ar} after {prev})"
                    )));
                }
                prev = ar;
            }
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row_lens(&self) -> Vec<usize> {
        self.rows.iter().map(Vec::len).collect()
    }

    /// Cumulative rate of the last stored token in `row`, or 1 for an empty row.
    pub fn last(&self, row: usize) -> f64 {
        self.rows[row].last().copied().unwrap_or(1.0)
    }

    /// Append one draft position to every row from per-request confidences.
    pub fn push_confidences(&mut self, confidences: &[f64]) -> Result<()> {
        if confidences.len() != self.rows.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} confidences for {} rows",
                confidences.len(),
                self.rows.len()
            )));
        }
        let extended = confidences
            .iter()
            .enumerate()
            .map(|(i, &c)| extend_ar(self.last(i), c))
            .collect::<Result<Vec<_>>>()?;
        for (row, ar) in self.rows.iter_mut().zip(extended) {
            row.push(ar);
        }
        Ok(())
    }

    /// Append a single confidence to one row.
    pub fn push(&mut self, row: usize, confidence: f64) -> Result<()> {
        let ar = extend_ar(self.last(row), confidence)?;
        self.rows[row].push(ar);
        Ok(())
    }

    pub fn truncate_row(&mut self, row: usize, len: usize) {
        self.rows[row].truncate(len);
    }

    /// Keep only the first `lens[i]` entries of every row.
    pub fn truncated(&self, lens: &[usize]) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .zip(lens)
                .map(|(row, &n)| row[..n.min(row.len())].to_vec())
                .collect(),
        }
    }
}

/// Expected number of tokens produced by verifying `table`, bonus included.
pub fn expected_accepted(table: &ArTable) -> f64 {
    table
        .rows
        .iter()
        .map(|row| 1.0 + row.iter().sum::<f64>())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn extend_examples() {
        assert_eq!(extend_ar(1.0, 0.8).unwrap(), 0.8);
        assert!((extend_ar(0.8, 0.5).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(extend_ar(0.37, 0.0).unwrap(), 0.0);
        assert!(extend_ar(1.2, 0.5).is_err());
        assert!(extend_ar(0.5, -0.1).is_err());
    }

    #[test]
    fn expected_examples() {
        assert_eq!(expected_accepted(&ArTable::empty(2)), 2.0);
        let t = ArTable::from_rows(vec![vec![0.8, 0.4]]).unwrap();
        assert!((expected_accepted(&t) - 2.2).abs() < 1e-12);
        let t = ArTable::from_rows(vec![vec![1.0; 5]; 3]).unwrap();
        assert_eq!(expected_accepted(&t), 18.0);
    }

    #[test]
    fn rejects_increasing_rows() {
        assert!(ArTable::from_rows(vec![vec![0.5, 0.6]]).is_err());
        assert!(ArTable::from_rows(vec![vec![1.5]]).is_err());
    }

    proptest! {
        #[test]
        fn appending_adds_exactly_the_new_rate(
            confs in proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, 0..6), 1..6),
            extra in 0.0f64..=1.0,
            pick in 0usize..6,
        ) {
            let mut table = ArTable::empty(confs.len());
            for (i, row) in confs.iter().enumerate() {
                for &c in row {
                    table.push(i, c).unwrap();
                }
            }
            prop_assert!(table.validate().is_ok());
            let row = pick % confs.len();
            let before = expected_accepted(&table);
            table.push(row, extra).unwrap();
            let after = expected_accepted(&table);
            prop_assert!(after >= before);
            prop_assert!((after - before - table.last(row)).abs() < 1e-12);

            let total: usize = table.row_lens().iter().sum();
            let bs = table.batch_size() as f64;
            prop_assert!(after >= bs && after <= bs + total as f64 + 1e-12);
        }
    }
}
