use serde::{Deserialize, Serialize};

/// Halve-on-plateau learning-rate rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    /// Improvement below this margin does not count.
    pub threshold: f64,
    pub best: Option<f64>,
    pub since_improvement: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self { lr, factor, patience, threshold: 1e-6, best: None, since_improvement: 0 }
    }

    /// Records one epoch's validation loss; returns true if the rate was reduced.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(b) => val_loss < b - self.threshold,
        };
        if improved {
            self.best = Some(val_loss);
            self.since_improvement = 0;
            return false;
        }
        self.since_improvement += 1;
        if self.since_improvement >= self.patience {
            self.lr *= self.factor;
            self.since_improvement = 0;
            return true;
        }
        false
    }
}

/// 1-based epochs after which the rate halves for a loss sequence.
pub fn halving_epochs(losses: &[f64], patience: usize) -> Vec<usize> {
    let mut s = PlateauSchedule::new(1.0, 0.5, patience);
    losses.iter().enumerate().filter(|(_, &l)| s.observe(l)).map(|(i, _)| i + 1).collect()
}
