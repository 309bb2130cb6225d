//! Confusion matrix, IoU and pixel accuracy.

use crate::error::{Error, Result};

/// `C×C` counts; rows are ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

/// Per-class IoU (`None` where the class is absent from both truth and
/// prediction), their mean, and pixel accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub pixels: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add every pixel whose truth is not `ignore`.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
        }
        let c = self.classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == ignore {
                continue;
            }
            if p as usize >= c || t as usize >= c {
                return Err(Error::invalid(format!("class id {} out of range for {c} classes", p.max(t))));
            }
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("confusion matrices differ in class count"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `tp / (tp + fp + fn)` per class, `None` for an empty union.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.count(k, k);
                let row: u64 = (0..c).map(|j| self.count(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.count(i, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union; 0 when there are none.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.classes).map(|k| self.count(k, k)).sum();
        diag as f64 / total as f64
    }

    pub fn report(&self) -> MiouReport {
        MiouReport {
            per_class: self.iou(),
            miou: self.miou(),
            pixel_accuracy: self.pixel_accuracy(),
            pixels: self.total(),
        }
    }
}

impl MiouReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.per_class.iter().enumerate() {
            match v {
                Some(v) => s.push_str(&format!("class {k}: IoU {v:.4}\n")),
                None => s.push_str(&format!("class {k}: absent\n")),
            }
        }
        s.push_str(&format!(
            "mIoU {:.4}\npixel accuracy {:.4}\npixels {}\n",
            self.miou, self.pixel_accuracy, self.pixels
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let mut cm = ConfusionMatrix::new(3);
        let t = [0, 1, 2, 2, 1];
        cm.accumulate(&t, &t, 255).unwrap();
        assert_eq!(cm.miou(), 1.0);
        assert_eq!(cm.pixel_accuracy(), 1.0);
    }

    #[test]
    fn complement_is_zero() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[1, 1, 0, 0], &[0, 0, 1, 1], 255).unwrap();
        assert_eq!(cm.miou(), 0.0);
    }

    #[test]
    fn worked_two_by_two() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1], 255).unwrap();
        let iou = cm.iou();
        assert_eq!(iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((cm.miou() - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(cm.pixel_accuracy(), 0.75);
    }

    #[test]
    fn ignored_and_absent() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&[0, 1, 3], &[0, 1, 255], 255).unwrap();
        assert_eq!(cm.total(), 2);
        assert_eq!(cm.iou(), vec![Some(1.0), Some(1.0), None, None]);
        assert_eq!(cm.miou(), 1.0);
    }

    #[test]
    fn out_of_range() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&[2], &[0], 255).is_err());
        assert!(cm.accumulate(&[0, 1], &[0], 255).is_err());
    }
}
