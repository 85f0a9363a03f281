//! The lower-triangular results matrix and the continual-learning metric
//! suite derived from it: AP (mean diagonal), FP (mean last row),
//! Fgt = AP - FP, plus optional held-out GP/IP means.

use crate::error::{Result, SliceError};
use serde::{Deserialize, Serialize};

/// Lower-triangular T x T score matrix: `scores[i][j]` (j <= i) is the
/// score on task j after training through task i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsMatrix {
    t: usize,
    rows: Vec<Vec<f64>>,
}

impl ResultsMatrix {
    pub fn new(t: usize) -> Result<Self> {
        if t == 0 {
            return Err(SliceError::InvalidConfig(
                "results matrix needs at least one task".into(),
            ));
        }
        Ok(ResultsMatrix {
            t,
            rows: Vec::new(),
        })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Append the scores produced after training stage `rows.len()`;
    /// row i must contain exactly i + 1 entries.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let stage = self.rows.len();
        if stage >= self.t {
            return Err(SliceError::InvalidConfig(format!(
                "matrix already has all {} rows",
                self.t
            )));
        }
        if row.len() != stage + 1 {
            return Err(SliceError::UnpopulatedEntry {
                row: stage,
                col: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(SliceError::InvalidConfig(format!(
                "non-finite score in row {stage}"
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.t
    }

    pub fn get(&self, i: usize, j: usize) -> Result<f64> {
        if i >= self.rows.len() || j > i {
            return Err(SliceError::UnpopulatedEntry { row: i, col: j });
        }
        Ok(self.rows[i][j])
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// CSV form: header `after_task,score_task_0,...`, one row per stage,
    /// empty cells above the diagonal.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("after_task");
        for j in 0..self.t {
            out.push_str(&format!(",score_task_{j}"));
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&i.to_string());
            for j in 0..self.t {
                out.push(',');
                if j < row.len() {
                    out.push_str(&format!("{}", row[j]));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Held-out suite scores feeding the GP/IP stand-ins.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HeldOutScores {
    pub gp: Vec<f64>,
    pub ip: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub ap: f64,
    pub fp: f64,
    pub fgt: f64,
    pub gp: Option<f64>,
    pub ip: Option<f64>,
    pub per_task_final: Vec<f64>,
    /// GP/IP are desk-scale stand-ins over held-out synthetic tasks, not
    /// benchmark scores.
    pub held_out_note: Option<String>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Derive the metric suite from a fully populated results matrix.
pub fn compute_metrics(
    matrix: &ResultsMatrix,
    held_out: Option<&HeldOutScores>,
) -> Result<MetricsSummary> {
    if !matrix.is_complete() {
        return Err(SliceError::UnpopulatedEntry {
            row: matrix.rows().len(),
            col: 0,
        });
    }
    let t = matrix.t();
    let diagonal: Vec<f64> = (0..t).map(|i| matrix.rows()[i][i]).collect();
    let last_row = &matrix.rows()[t - 1];
    let ap = mean(&diagonal);
    let fp = mean(last_row);
    let (gp, ip, note) = match held_out {
        None => (None, None, None),
        Some(h) => (
            (!h.gp.is_empty()).then(|| mean(&h.gp)),
            (!h.ip.is_empty()).then(|| mean(&h.ip)),
            Some("GP/IP are desk-scale stand-ins over held-out synthetic tasks".to_string()),
        ),
    };
    Ok(MetricsSummary {
        ap,
        fp,
        fgt: ap - fp,
        gp,
        ip,
        per_task_final: last_row.clone(),
        held_out_note: note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn matrix(rows: &[&[f64]]) -> ResultsMatrix {
        let mut m = ResultsMatrix::new(rows.len()).unwrap();
        for row in rows {
            m.push_row(row.to_vec()).unwrap();
        }
        m
    }

    #[test]
    fn constant_matrix_has_zero_forgetting() {
        let m = matrix(&[&[7.0], &[7.0, 7.0], &[7.0, 7.0, 7.0]]);
        let s = compute_metrics(&m, None).unwrap();
        assert_relative_eq!(s.ap, 7.0);
        assert_relative_eq!(s.fp, 7.0);
        assert_relative_eq!(s.fgt, 0.0);
    }

    #[test]
    fn hand_worked_two_by_two() {
        let m = matrix(&[&[10.0], &[8.0, 12.0]]);
        let s = compute_metrics(&m, None).unwrap();
        assert_relative_eq!(s.ap, 11.0);
        assert_relative_eq!(s.fp, 10.0);
        assert_relative_eq!(s.fgt, 1.0);
    }

    #[test]
    fn backward_transfer_gives_negative_forgetting() {
        let m = matrix(&[&[5.0], &[9.0, 7.0]]);
        let s = compute_metrics(&m, None).unwrap();
        assert_relative_eq!(s.fgt, -2.0);
    }

    #[test]
    fn forgetting_is_identically_ap_minus_fp() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let t = rng.random_range(1..7usize);
            let mut m = ResultsMatrix::new(t).unwrap();
            for i in 0..t {
                let row: Vec<f64> = (0..=i).map(|_| rng.random_range(0.0..100.0)).collect();
                m.push_row(row).unwrap();
            }
            let s = compute_metrics(&m, None).unwrap();
            assert_eq!(s.fgt, s.ap - s.fp);
            assert!(s.fgt.abs() <= 100.0);
        }
    }

    #[test]
    fn incomplete_matrix_is_rejected() {
        let mut m = ResultsMatrix::new(2).unwrap();
        m.push_row(vec![5.0]).unwrap();
        assert!(matches!(
            compute_metrics(&m, None),
            Err(SliceError::UnpopulatedEntry { .. })
        ));
    }

    #[test]
    fn wrong_row_length_is_rejected() {
        let mut m = ResultsMatrix::new(3).unwrap();
        assert!(m.push_row(vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn held_out_means_populate_gp_ip() {
        let m = matrix(&[&[10.0]]);
        let held = HeldOutScores {
            gp: vec![50.0, 70.0],
            ip: vec![30.0],
        };
        let s = compute_metrics(&m, Some(&held)).unwrap();
        assert_relative_eq!(s.gp.unwrap(), 60.0);
        assert_relative_eq!(s.ip.unwrap(), 30.0);
        assert!(s.held_out_note.is_some());
    }

    #[test]
    fn csv_layout_matches_contract() {
        let m = matrix(&[&[10.0], &[8.0, 12.0]]);
        let csv = m.to_csv();
        let expected = "after_task,score_task_0,score_task_1\n0,10,\n1,8,12\n";
        assert_eq!(csv, expected);
    }
}
