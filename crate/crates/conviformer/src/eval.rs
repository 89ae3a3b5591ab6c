//! Evaluation: top-1 accuracy and macro-F1 from a confusion matrix.

use std::fmt;

/// Per-class confusion counts for a single-label problem.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    n_classes: usize,
    /// counts[truth * n_classes + pred]
    counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    Empty,
    ClassOutOfRange { id: usize, n_classes: usize },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Empty => write!(f, "evaluation needs at least one sample"),
            EvalError::ClassOutOfRange { id, n_classes } => {
                write!(f, "class {id} out of range ({n_classes} classes)")
            }
        }
    }
}

impl std::error::Error for EvalError {}

impl ConfusionMatrix {
    pub fn from_pairs(
        n_classes: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, EvalError> {
        let mut counts = vec![0usize; n_classes * n_classes];
        let mut total = 0;
        for (truth, pred) in pairs {
            if truth >= n_classes {
                return Err(EvalError::ClassOutOfRange { id: truth, n_classes });
            }
            if pred >= n_classes {
                return Err(EvalError::ClassOutOfRange { id: pred, n_classes });
            }
            counts[truth * n_classes + pred] += 1;
            total += 1;
        }
        if total == 0 {
            return Err(EvalError::Empty);
        }
        Ok(ConfusionMatrix { n_classes, counts })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, class: usize) -> usize {
        self.counts[class * self.n_classes + class]
    }

    pub fn predicted(&self, class: usize) -> usize {
        (0..self.n_classes).map(|t| self.counts[t * self.n_classes + class]).sum()
    }

    pub fn actual(&self, class: usize) -> usize {
        self.counts[class * self.n_classes..(class + 1) * self.n_classes].iter().sum()
    }
}

/// Per-class precision/recall/F1. A class absent from both predictions and
/// truth scores 0 across the board (the macro mean includes it).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub top1: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScore>,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let mut per_class = Vec::with_capacity(cm.n_classes());
        let mut f1_sum = 0.0;
        let mut correct = 0;
        for c in 0..cm.n_classes() {
            let tp = cm.true_positives(c);
            let pred = cm.predicted(c);
            let actual = cm.actual(c);
            correct += tp;
            let precision = if pred > 0 { tp as f64 / pred as f64 } else { 0.0 };
            let recall = if actual > 0 { tp as f64 / actual as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            f1_sum += f1;
            per_class.push(ClassScore { precision, recall, f1, support: actual });
        }
        EvalReport {
            top1: correct as f64 / cm.total() as f64,
            macro_f1: f1_sum / cm.n_classes() as f64,
            per_class,
            n_samples: cm.total(),
        }
    }

    pub fn from_pairs(
        n_classes: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, EvalError> {
        Ok(Self::from_confusion(&ConfusionMatrix::from_pairs(n_classes, pairs)?))
    }
}

/// Row-wise argmax over [N, C] logits.
pub fn argmax_rows<T: crate::tensor::Element>(logits: &[T], n_classes: usize) -> Vec<usize> {
    logits
        .chunks(n_classes)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn perfect_predictions_score_one() {
        let pairs: Vec<(usize, usize)> = (0..12).map(|i| (i % 3, i % 3)).collect();
        let r = EvalReport::from_pairs(3, pairs).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.n_samples, 12);
    }

    #[test]
    fn constant_predictor_on_balanced_two_class() {
        // truth alternates; predictor always says 0
        let pairs: Vec<(usize, usize)> = (0..10).map(|i| (i % 2, 0)).collect();
        let r = EvalReport::from_pairs(2, pairs).unwrap();
        assert!((r.top1 - 0.5).abs() < 1e-12);
        // class 0: P=0.5, R=1 -> F1 = 2/3; class 1: F1 = 0
        assert!((r.macro_f1 - (2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_contributes_zero() {
        // 3 classes declared, class 2 never appears anywhere
        let pairs = vec![(0, 0), (1, 1), (0, 0), (1, 0)];
        let r = EvalReport::from_pairs(3, pairs).unwrap();
        assert_eq!(r.per_class[2].f1, 0.0);
        assert_eq!(r.per_class[2].support, 0);
        let two_class = EvalReport::from_pairs(2, vec![(0, 0), (1, 1), (0, 0), (1, 0)]).unwrap();
        let expect = (two_class.per_class[0].f1 + two_class.per_class[1].f1) / 3.0;
        assert!((r.macro_f1 - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_and_out_of_range_rejected() {
        assert!(matches!(
            EvalReport::from_pairs(3, Vec::new()),
            Err(EvalError::Empty)
        ));
        assert!(matches!(
            EvalReport::from_pairs(2, vec![(0, 5)]),
            Err(EvalError::ClassOutOfRange { id: 5, .. })
        ));
    }

    /// Independent oracle: counts assembled by brute force per class.
    #[test]
    fn random_predictions_match_confusion_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let n = 200;
        let c = 7;
        let pairs: Vec<(usize, usize)> = (0..n)
            .map(|_| (rng.gen_range(0..c), rng.gen_range(0..c)))
            .collect();
        let r = EvalReport::from_pairs(c, pairs.clone()).unwrap();

        let mut f1_sum = 0.0;
        let mut correct = 0usize;
        for class in 0..c {
            let tp = pairs.iter().filter(|(t, p)| *t == class && *p == class).count();
            let fp = pairs.iter().filter(|(t, p)| *t != class && *p == class).count();
            let fneg = pairs.iter().filter(|(t, p)| *t == class && *p != class).count();
            correct += tp;
            let f1 = if 2 * tp + fp + fneg > 0 {
                2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
            } else {
                0.0
            };
            f1_sum += f1;
        }
        assert!((r.top1 - correct as f64 / n as f64).abs() < 1e-9);
        assert!((r.macro_f1 - f1_sum / c as f64).abs() < 1e-9);
    }

    #[test]
    fn argmax_rows_picks_first_max() {
        let logits = vec![0.1f32, 0.9, 0.9, 0.3, 0.2, 0.1];
        assert_eq!(argmax_rows(&logits, 3), vec![1, 0]);
    }
}
