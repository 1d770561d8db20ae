//! Pixel accuracy, mean class accuracy and mean IoU from confusion counts.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};

/// `K x K` pixel counts; rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub miou: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every non-ignored pixel of `gt` with its prediction.
    pub fn update(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::dim(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let k = self.classes;
        for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
            if g == IGNORE {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(Error::Input(format!(
                    "class id out of range at pixel {i}: gt={g}, pred={p}, K={k}"
                )));
            }
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g != IGNORE {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim("cannot merge confusion matrices of different K"));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn row(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    fn col(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }

    /// Per-class accuracy, `None` for classes absent from the ground truth.
    pub fn class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let r = self.row(c);
                (r > 0).then(|| self.get(c, c) as f64 / r as f64)
            })
            .collect()
    }

    /// Per-class IoU, `None` for classes absent from both ground truth and prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let union = self.row(c) + self.col(c) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn scores(&self) -> Result<Scores> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Input("confusion matrix is empty".into()));
        }
        let trace: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        let mean = |v: Vec<Option<f64>>| {
            let kept: Vec<f64> = v.into_iter().flatten().collect();
            kept.iter().sum::<f64>() / kept.len() as f64
        };
        Ok(Scores {
            pixel_acc: trace as f64 / total as f64,
            mean_acc: mean(self.class_accuracy()),
            miou: mean(self.class_iou()),
        })
    }
}

/// Named score rows rendered as CSV or aligned text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreReport {
    pub rows: Vec<(String, Scores)>,
}

impl ScoreReport {
    pub fn push(&mut self, name: impl Into<String>, s: Scores) {
        self.rows.push((name.into(), s));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,pa,ma,miou\n");
        for (name, s) in &self.rows {
            let _ = writeln!(out, "{name},{:.6},{:.6},{:.6}", s.pixel_acc, s.mean_acc, s.miou);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<width$}  {:>8}  {:>8}  {:>8}\n", "name", "PA", "MA", "mIoU");
        for (name, s) in &self.rows {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>8.2}  {:>8.2}  {:>8.2}",
                100.0 * s.pixel_acc,
                100.0 * s.mean_acc,
                100.0 * s.miou
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(v: &[u8]) -> LabelMap {
        LabelMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn hand_case() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&lm(&[0, 1, 1, 1]), &lm(&[0, 0, 1, 1])).unwrap();
        let s = cm.scores().unwrap();
        assert!((s.pixel_acc - 0.75).abs() < 1e-12);
        assert!((s.mean_acc - 0.75).abs() < 1e-12);
        assert!((s.miou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let mut cm = ConfusionMatrix::new(3);
        let l = lm(&[0, 1, 2, 2, 1]);
        cm.update(&l, &l).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(g, p) > 0, g == p);
            }
        }
        let s = cm.scores().unwrap();
        assert_eq!((s.pixel_acc, s.mean_acc, s.miou), (1.0, 1.0, 1.0));
    }

    #[test]
    fn ignore_and_errors() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&lm(&[0, 1]), &lm(&[IGNORE, IGNORE])).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.scores().is_err());
        assert!(matches!(cm.update(&lm(&[0, 2]), &lm(&[0, 1])), Err(Error::Input(_))));
        assert!(matches!(cm.update(&lm(&[0]), &lm(&[0, 1])), Err(Error::Dimension(_))));
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn report_formats() {
        let mut r = ScoreReport::default();
        r.push("rgb_only", Scores { pixel_acc: 0.5, mean_acc: 0.25, miou: 0.125 });
        assert_eq!(r.to_csv(), "name,pa,ma,miou\nrgb_only,0.500000,0.250000,0.125000\n");
        assert!(r.to_text().contains("12.50"));
    }
}
