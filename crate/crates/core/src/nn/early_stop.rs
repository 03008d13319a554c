#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Patience-based stopping on a validation loss that must strictly decrease.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    epoch: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience: patience.max(1),
            epoch: 0,
            best: None,
            since_best: 0,
        }
    }

    /// Records the loss of the next epoch (epochs are numbered from 1).
    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.epoch += 1;
        match self.best {
            Some((_, best)) if loss >= best => self.since_best += 1,
            _ => {
                self.best = Some((self.epoch, loss));
                self.since_best = 0;
            }
        }
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    /// True when the most recent epoch set a new best.
    pub fn improved(&self) -> bool {
        self.best.is_some_and(|(e, _)| e == self.epoch)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.map(|(_, l)| l)
    }
}

/// Replays a loss history: returns the epoch after which training stops (if
/// it does) and the best epoch.
pub fn early_stop(val_losses: &[f64], patience: usize) -> (Option<usize>, usize) {
    let mut s = EarlyStopper::new(patience);
    for (i, &l) in val_losses.iter().enumerate() {
        if s.observe(l) == StopDecision::Stop {
            return (Some(i + 1), s.best_epoch().unwrap_or(1));
        }
    }
    (None, s.best_epoch().unwrap_or(0))
}
