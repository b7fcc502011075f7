//! Chronological training with per-timestamp optimizer steps.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::config::{Config, SelectOn};
use crate::data::{Split, TkgDataset};
use crate::engine::{step, ReprMode, StepOptions, StreamState};
use crate::error::Result;
use crate::evaluator::{evaluate, EvalContext};
use crate::model::Model;
use crate::optim::Adam;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_mrr_emerging: f64,
    pub valid_mrr_all: f64,
    pub seconds: f64,
    pub param_count: usize,
}

/// Patience-based early stopping on a metric to maximise.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Record an epoch's metric; true when it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub epoch: usize,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct EpochSummary {
    pub mean_loss: f64,
    pub queries: usize,
    pub seconds: f64,
    /// Memory state at the end of the epoch's training stream.
    pub final_state: StreamState,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let optimizer = Adam::new(model.config.lr, model.params.values());
        Self {
            model,
            optimizer,
            epoch: 0,
            steps: 0,
        }
    }

    /// One chronological pass over the training window, starting from a
    /// fresh stream state. Optimizer moments carry over between epochs.
    pub fn train_epoch(&mut self, data: &TkgDataset) -> Result<EpochSummary> {
        let start = Instant::now();
        let mut state = StreamState::fresh(&self.model);
        let (lo, hi) = data.split_window(Split::Train)?;
        let (mut loss_sum, mut queries) = (0.0, 0usize);
        for (_, facts) in data.stream(lo, hi) {
            let out = step(&self.model, &state, facts, StepOptions::train(self.steps))?;
            self.optimizer.step(self.model.params.values_mut(), &out.grads)?;
            loss_sum += out.loss * facts.len() as f64;
            queries += facts.len();
            self.steps += 1;
            state.apply(out.commit)?;
        }
        self.epoch += 1;
        Ok(EpochSummary {
            mean_loss: if queries > 0 { loss_sum / queries as f64 } else { 0.0 },
            queries,
            seconds: start.elapsed().as_secs_f64(),
            final_state: state,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: Model,
    pub best_epoch: usize,
    pub curve: Vec<EpochMetrics>,
}

/// Train with validation-based early stopping and keep the best model.
/// `data` must be split; it is trained as given, so apply any horizon
/// truncation beforehand.
pub fn fit(model: Model, data: &TkgDataset, on_epoch: &mut dyn FnMut(&EpochMetrics)) -> Result<FitOutcome> {
    let cfg: Config = model.config.clone();
    let ctx = EvalContext::new(data, cfg.filter)?;
    let mut trainer = Trainer::new(model);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = trainer.model.clone();
    let mut curve = Vec::new();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let summary = trainer.train_epoch(data)?;
        let report = evaluate(&trainer.model, data, &ctx, Split::Valid, ReprMode::Full)?;
        let all = report.slice("all").mrr;
        let emerging = report.slice("emerging").mrr;
        let metric = match cfg.select_on {
            SelectOn::Emerging if !emerging.is_nan() => emerging,
            _ => all,
        };
        let m = EpochMetrics {
            epoch,
            train_loss: summary.mean_loss,
            valid_mrr_emerging: emerging,
            valid_mrr_all: all,
            seconds: start.elapsed().as_secs_f64(),
            param_count: trainer.model.params.total(),
        };
        on_epoch(&m);
        curve.push(m);
        if stopper.observe(epoch, metric) {
            best = trainer.model.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    Ok(FitOutcome {
        best,
        best_epoch: stopper.best_epoch,
        curve,
    })
}

pub fn write_curve(curve: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "epoch,train_loss,valid_mrr_emerging,valid_mrr_all,seconds,param_count")?;
    for m in curve {
        writeln!(
            w,
            "{},{},{},{},{:.3},{}",
            m.epoch, m.train_loss, m.valid_mrr_emerging, m.valid_mrr_all, m.seconds, m.param_count
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_arithmetic() {
        let mut s = EarlyStopping::new(10);
        let mut stopped = None;
        for epoch in 1..=200 {
            let metric = if epoch <= 3 { epoch as f64 } else { 1.0 };
            s.observe(epoch, metric);
            if s.should_stop() {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(13));
        assert_eq!(s.best_epoch, 3);
    }

    #[test]
    fn nan_metric_never_improves() {
        let mut s = EarlyStopping::new(1);
        assert!(!s.observe(1, f64::NAN));
        assert!(s.should_stop());
    }
}
