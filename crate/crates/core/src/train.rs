//! Pieces shared by every training loop: input normalization, early
//! stopping, train/validation splits and small matrix helpers.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::SimRng;

/// Per-dimension affine standardization fitted on data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Standard deviations below `1e-8` are replaced by 1.
    pub const MIN_STD: f64 = 1e-8;

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(rows: &Array2<f64>) -> Self {
        let n = rows.nrows().max(1) as f64;
        let dim = rows.ncols();
        let mut mean = vec![0.0; dim];
        let mut std = vec![0.0; dim];
        for row in rows.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for row in rows.rows() {
            for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt();
            if s.is_nan() || *s < Self::MIN_STD {
                *s = 1.0;
            }
        }
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn denormalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.mean.len() == self.std.len()
            && self.mean.iter().all(|m| m.is_finite())
            && self.std.iter().all(|s| s.is_finite() && *s >= Self::MIN_STD)
    }
}

/// Loss curves of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub train_curve: Vec<f64>,
    /// Validation loss per epoch; entry 0 is measured before any update.
    pub val_curve: Vec<f64>,
    pub best_val: f64,
    pub best_epoch: usize,
}

impl TrainReport {
    /// Running minimum of the validation curve.
    pub fn best_so_far(&self) -> Vec<f64> {
        running_min(&self.val_curve)
    }
}

pub fn running_min(xs: &[f64]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    xs.iter()
        .map(|&x| {
            best = best.min(x);
            best
        })
        .collect()
}

/// Patience-based early stopping on a loss to be minimized.
#[derive(Debug, Clone)]
pub(crate) struct EarlyStopping {
    pub best: f64,
    pub best_epoch: usize,
    patience: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(initial: f64, patience: usize) -> Self {
        Self {
            best: initial,
            best_epoch: 0,
            patience,
            bad_epochs: 0,
        }
    }

    /// Records the loss of `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

/// Splits `0..n` into (train, validation) index sets by shuffling with `rng`.
/// With fewer than two items the validation set reuses the training set.
pub(crate) fn split_indices(n: usize, val_frac: f64, rng: &mut SimRng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64) * val_frac).round() as usize;
    let n_val = n_val.clamp(usize::from(val_frac > 0.0 && n >= 2), n.saturating_sub(1));
    if n_val == 0 {
        return (idx.clone(), idx);
    }
    let val = idx.split_off(n - n_val);
    (idx, val)
}

pub(crate) fn rows_to_array(rows: &[Vec<f64>], width: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), width));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(&src[..]));
    }
    out
}

pub(crate) fn row_vec(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape")
}

/// Number of minibatches per epoch, honouring an optional cap.
pub(crate) fn batches_per_epoch(n: usize, batch: usize, cap: Option<usize>) -> usize {
    let full = n.div_ceil(batch.max(1));
    cap.map_or(full, |c| full.min(c)).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn normalizer_round_trip() {
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64 * 0.7 - 2.0);
        let n = Normalizer::fit(&x);
        let back = n.denormalize(&n.normalize(&x));
        assert!((&back - &x).iter().all(|d| d.abs() <= 1e-12));
    }

    #[test]
    fn constant_column_gets_unit_std() {
        let x = Array2::from_elem((4, 2), 3.0);
        let n = Normalizer::fit(&x);
        assert_eq!(n.std, vec![1.0, 1.0]);
        assert!(n.is_valid());
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let mut rng = SimRng::seed_from_u64(0);
        let (tr, va) = split_indices(20, 0.1, &mut rng);
        assert_eq!(va.len(), 2);
        let mut all: Vec<_> = tr.iter().chain(&va).copied().collect();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn early_stopping_counts_patience() {
        let mut es = EarlyStopping::new(10.0, 2);
        assert!(es.observe(1, 9.0));
        assert!(!es.observe(2, 9.5));
        assert!(!es.should_stop());
        assert!(!es.observe(3, 9.0));
        assert!(es.should_stop());
        assert_eq!(es.best_epoch, 1);
    }
}
