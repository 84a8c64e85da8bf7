//! Continual-learning metrics over a lower-triangular accuracy matrix.
//!
//! Row k holds test accuracy (percent) on tasks 0..=k measured after
//! training on task k, so row lengths grow by one each task.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix::default()
    }

    /// Appends the row measured after task `rows()` finished training.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let expect = self.rows.len() + 1;
        if row.len() != expect {
            return Err(Error::InvalidArgument(format!(
                "accuracy row {} must have {} entries, got {}",
                self.rows.len(),
                expect,
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 100.0) {
            return Err(Error::InvalidArgument(format!(
                "accuracy {bad} outside [0, 100]"
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    /// a[k][j]: accuracy on task j after training task k (j <= k).
    pub fn get(&self, k: usize, j: usize) -> Result<f64> {
        self.rows
            .get(k)
            .and_then(|r| r.get(j))
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no entry ({k}, {j}) in the matrix")))
    }

    pub fn row(&self, k: usize) -> Result<&[f64]> {
        self.rows
            .get(k)
            .map(|r| r.as_slice())
            .ok_or_else(|| Error::InvalidArgument(format!("no row {k} in the matrix")))
    }

    /// Mean accuracy over all tasks seen by step k.
    pub fn avg_accuracy(&self, k: usize) -> Result<f64> {
        let row = self.row(k)?;
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Mean drop from each earlier task's best accuracy to its accuracy now,
    /// over tasks 0..k. Undefined at the first task.
    pub fn forgetting(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "forgetting needs at least two tasks".into(),
            ));
        }
        let row = self.row(k)?;
        let mut total = 0.0;
        for j in 0..k {
            let mut best = f64::NEG_INFINITY;
            for l in j..k {
                best = best.max(self.rows[l][j]);
            }
            total += best - row[j];
        }
        Ok(total / k as f64)
    }
}

/// Mean and sample standard deviation (n - 1 denominator); a single value
/// reports zero spread.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot summarize an empty sample".into(),
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// "90.7 ± 0.8" styling used in run reports.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.1} \u{b1} {std:.1}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f64]]) -> AccuracyMatrix {
        let mut m = AccuracyMatrix::new();
        for r in rows {
            m.push_row(r.to_vec()).unwrap();
        }
        m
    }

    #[test]
    fn row_length_and_range_are_validated() {
        let mut m = AccuracyMatrix::new();
        assert!(m.push_row(vec![50.0, 60.0]).is_err());
        m.push_row(vec![50.0]).unwrap();
        assert!(m.push_row(vec![50.0]).is_err());
        assert!(m.push_row(vec![50.0, 101.0]).is_err());
        assert!(m.push_row(vec![50.0, f64::NAN]).is_err());
        m.push_row(vec![40.0, 90.0]).unwrap();
        assert_eq!(m.rows(), 2);
    }

    #[test]
    fn average_accuracy_is_the_row_mean() {
        let m = matrix(&[&[90.0], &[80.0, 70.0], &[60.0, 90.0, 30.0]]);
        assert!((m.avg_accuracy(0).unwrap() - 90.0).abs() < 1e-12);
        assert!((m.avg_accuracy(1).unwrap() - 75.0).abs() < 1e-12);
        assert!((m.avg_accuracy(2).unwrap() - 60.0).abs() < 1e-12);
    }

    #[test]
    fn forgetting_uses_the_running_best() {
        // Task 0: best seen before step 2 is max(90, 80) = 90, now 60 -> 30.
        // Task 1: best before step 2 is 70, now 90 -> -20 (improvement).
        let m = matrix(&[&[90.0], &[80.0, 70.0], &[60.0, 90.0, 30.0]]);
        let f2 = m.forgetting(2).unwrap();
        assert!((f2 - (30.0 - 20.0) / 2.0).abs() < 1e-12, "{f2}");
        let f1 = m.forgetting(1).unwrap();
        assert!((f1 - 10.0).abs() < 1e-12);
        assert!(m.forgetting(0).is_err());
    }

    #[test]
    fn forgetting_matches_brute_force_on_random_matrices() {
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 100.0
        };
        for _ in 0..50 {
            let k_max = 2 + (next() as usize % 7);
            let mut m = AccuracyMatrix::new();
            for k in 0..k_max {
                m.push_row((0..=k).map(|_| next()).collect()).unwrap();
            }
            for k in 1..k_max {
                // Direct transcription of the definition.
                let mut acc = 0.0;
                for j in 0..k {
                    let best = (j..k)
                        .map(|l| m.get(l, j).unwrap())
                        .fold(f64::NEG_INFINITY, f64::max);
                    acc += best - m.get(k, j).unwrap();
                }
                let expected = acc / k as f64;
                assert!((m.forgetting(k).unwrap() - expected).abs() < 1e-12);
                let row_mean =
                    (0..=k).map(|j| m.get(k, j).unwrap()).sum::<f64>() / (k + 1) as f64;
                assert!((m.avg_accuracy(k).unwrap() - row_mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn summary_statistics() {
        let (mean, std) = mean_std(&[88.0, 90.0, 92.0]).unwrap();
        assert!((mean - 90.0).abs() < 1e-12);
        assert!((std - 2.0).abs() < 1e-12);
        let (m1, s1) = mean_std(&[77.7]).unwrap();
        assert_eq!((m1, s1), (77.7, 0.0));
        assert!(mean_std(&[]).is_err());
        assert_eq!(format_mean_std(90.66, 0.84), "90.7 \u{b1} 0.8");
    }
}
