use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub epochs: Vec<EpochMetrics>,
    pub final_train_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    /// `(radius, fraction of matches within radius)`.
    pub curve: Vec<(f64, f64)>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl MetricsReport {
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_accuracy,test_accuracy\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", e.epoch, e.loss, opt(e.train_accuracy), opt(e.test_accuracy));
        }
        s
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("radius,fraction\n");
        for (r, f) in &self.curve {
            let _ = writeln!(s, "{r},{f}");
        }
        s
    }

    /// Writes `metrics.csv` and, when present, `curve.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("metrics.csv");
        std::fs::write(&p, self.epochs_csv()).map_err(|e| Error::io(&p, e))?;
        if !self.curve.is_empty() {
            let p = dir.join("curve.csv");
            std::fs::write(&p, self.curve_csv()).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Fraction of `errors` at most `r`, for each `r` in `radii`.
pub fn geodesic_error_curve(errors: &[f64], radii: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    radii
        .iter()
        .map(|&r| {
            let within = sorted.partition_point(|&e| e <= r);
            let frac = if sorted.is_empty() { 0.0 } else { within as f64 / sorted.len() as f64 };
            (r, frac)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn curve_counts_inclusive() {
        let c = geodesic_error_curve(&[0.0, 0.0, 0.5, 1.0], &[0.0, 0.5, 0.99, 1.0]);
        assert_eq!(c, vec![(0.0, 0.5), (0.5, 0.75), (0.99, 0.75), (1.0, 1.0)]);
    }

    #[test]
    fn csv_layout() {
        let r = MetricsReport {
            epochs: vec![EpochMetrics {
                epoch: 1,
                loss: 0.5,
                train_accuracy: Some(0.25),
                test_accuracy: None,
            }],
            curve: vec![(0.0, 0.1)],
            ..Default::default()
        };
        assert_eq!(r.epochs_csv(), "epoch,loss,train_accuracy,test_accuracy\n1,0.5,0.25,\n");
        assert_eq!(r.curve_csv(), "radius,fraction\n0,0.1\n");
    }

    proptest! {
        #[test]
        fn curve_is_a_cdf(errors in prop::collection::vec(0.0f64..5.0, 1..50)) {
            let max = errors.iter().copied().fold(0.0, f64::max);
            let mut radii: Vec<f64> = (0..20).map(|i| max * i as f64 / 20.0).collect();
            radii.push(max);
            let c = geodesic_error_curve(&errors, &radii);
            prop_assert!(c.windows(2).all(|w| w[0].1 <= w[1].1));
            prop_assert!(c[0].1 >= 0.0);
            prop_assert_eq!(c.last().unwrap().1, 1.0);
        }
    }
}
