//! Pieces shared by every training loop.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite loss during {stage} training at epoch {epoch} (last good checkpoint: {})",
        last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Diverged {
        stage: &'static str,
        epoch: usize,
        last_good: Option<PathBuf>,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Shuffled index batches covering `0..n`; the last batch may be short.
pub fn shuffled_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Stops training once the monitored loss has failed to improve on its best
/// value for more than `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    /// Records one epoch; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            (true, false)
        } else {
            self.bad_epochs += 1;
            (false, self.bad_epochs > self.patience)
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let b = shuffled_batches(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn zero_patience_stops_at_first_increase() {
        let mut es = EarlyStopping::new(0);
        assert_eq!(es.observe(0, 1.0), (true, false));
        assert_eq!(es.observe(1, 0.8), (true, false));
        assert_eq!(es.observe(2, 0.9), (false, true));
        assert_eq!(es.best(), Some((1, 0.8)));
    }

    #[test]
    fn patience_tolerates_plateaus() {
        let mut es = EarlyStopping::new(2);
        es.observe(0, 1.0);
        assert!(!es.observe(1, 1.1).1);
        assert!(!es.observe(2, 1.2).1);
        assert!(es.observe(3, 1.3).1);
    }
}
