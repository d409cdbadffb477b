//! Incremental accuracy bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaefError};

/// Lower-triangular accuracy table: row `i` holds the accuracy on tasks
/// `0..=i` measured after training through task `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    /// Builds the table from complete rows, validating shape and range.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the next stage; it must cover exactly one more task than the
    /// previous row.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let expected = self.rows.len() + 1;
        if row.len() != expected {
            return Err(SaefError::LengthMismatch { expected, actual: row.len() });
        }
        if let Some(&bad) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(SaefError::Config(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        self.rows.get(stage).and_then(|r| r.get(task)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Mean accuracy over seen tasks after `stage`.
    pub fn stage_mean(&self, stage: usize) -> Option<f64> {
        let row = self.rows.get(stage)?;
        Some(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Average of the per-stage means.
    pub fn average_incremental(&self) -> Result<f64> {
        if self.rows.is_empty() {
            return Err(SaefError::Empty("accuracy matrix"));
        }
        let total: f64 = (0..self.rows.len()).filter_map(|i| self.stage_mean(i)).sum();
        Ok(total / self.rows.len() as f64)
    }

    /// Mean accuracy over all tasks after the last stage.
    pub fn last(&self) -> Result<f64> {
        self.rows
            .len()
            .checked_sub(1)
            .and_then(|i| self.stage_mean(i))
            .ok_or(SaefError::Empty("accuracy matrix"))
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_task_collapses() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.73]]).unwrap();
        assert_eq!(m.average_incremental().unwrap(), 0.73);
        assert_eq!(m.last().unwrap(), 0.73);
    }

    #[test]
    fn two_stage_example() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.6]]).unwrap();
        assert!((m.average_incremental().unwrap() - 0.8).abs() < 1e-12);
        assert!((m.last().unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn all_ones() {
        let m = AccuracyMatrix::from_rows((1..=5).map(|n| vec![1.0; n]).collect()).unwrap();
        assert_eq!(m.average_incremental().unwrap(), 1.0);
        assert_eq!(m.last().unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(AccuracyMatrix::from_rows(vec![vec![0.5, 0.5]]).is_err());
        assert!(AccuracyMatrix::from_rows(vec![vec![1.5]]).is_err());
        assert!(AccuracyMatrix::new().average_incremental().is_err());
        assert!(AccuracyMatrix::new().last().is_err());
    }
}
