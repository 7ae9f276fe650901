//! Mini-batch training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{PicError, Result};
use crate::metrics;
use crate::network::CascadeModel;
use crate::optim::{self, OptState};
use crate::synthdata::{labels_for, stack, ActivitySample, ActivityTaxonomy};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub train_loss: f64,
    /// Metric on the evaluation set; `None` without one.
    pub eval_metric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    /// CSV with a leading `# format_version=1 config=<json>` comment line.
    pub fn to_csv(&self, cfg: &RunConfig) -> String {
        let mut out = format!(
            "# format_version={} config={}\nepoch,train_loss,eval_metric\n",
            crate::persist::FORMAT_VERSION,
            cfg.to_canonical_json()
        );
        for r in &self.records {
            let m = r.eval_metric.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{}", r.epoch, r.train_loss, m).unwrap();
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: CascadeModel,
    /// Checkpoint with the best evaluation metric (the final model when no
    /// evaluation set is given).
    pub best: CascadeModel,
    pub best_epoch: Option<usize>,
    pub history: History,
    pub opt_state: OptState,
}

/// Training that stopped early. `last_good` is the model after the last
/// completed step.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: PicError,
    pub last_good: Box<CascadeModel>,
    pub history: History,
}

/// Seeded stream for batch order; distinct from the initialization stream.
fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

fn eval_metric(model: &CascadeModel, samples: &[ActivitySample], tax: &ActivityTaxonomy, threads: usize) -> Result<f64> {
    let x = stack(samples)?;
    let labels = labels_for(samples, model.task(), tax)?;
    let logits = model.predict(&x, threads)?;
    Ok(metrics::evaluate(&logits, &labels)?.value)
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch updates from `model`.
pub fn train(
    model: CascadeModel,
    train_set: &[ActivitySample],
    eval_set: &[ActivitySample],
    tax: &ActivityTaxonomy,
    cfg: &RunConfig,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let mut model = model;
    let mut history = History::default();
    macro_rules! bail {
        ($e:expr) => {
            return Err(TrainFailure {
                error: $e,
                last_good: Box::new(model),
                history,
            })
        };
    }
    if train_set.is_empty() {
        bail!(PicError::Validation("empty training set".into()));
    }
    let mut opt = OptState::new(&cfg.optimizer, &model.params());
    let mut rng = shuffle_rng(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, CascadeModel)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<ActivitySample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let step = stack(&batch)
                .and_then(|x| Ok((x, labels_for(&batch, model.task(), tax)?)))
                .and_then(|(x, y)| model.loss_and_grads(&x, &y));
            let step = match step {
                Ok(s) if s.loss.is_finite() => s,
                Ok(s) => bail!(PicError::Divergence {
                    epoch,
                    reason: format!("loss became {}", s.loss),
                }),
                Err(PicError::NonFinite(op)) => bail!(PicError::Divergence {
                    epoch,
                    reason: format!("non-finite value in {op}"),
                }),
                Err(e) => bail!(e),
            };
            let mut trial = model.clone();
            let updated = {
                let mut params = trial.params_mut();
                optim::step(&mut params, &step.grads, &mut opt)
            };
            if let Err(e) = updated {
                bail!(e);
            }
            if trial.params().iter().any(|(_, t)| !t.is_finite()) {
                bail!(PicError::Divergence {
                    epoch,
                    reason: "parameters became non-finite".into(),
                });
            }
            trial.apply_batch_stats(&step.batch_stats);
            model = trial;
            loss_sum += step.per_sample.iter().sum::<f64>();
        }
        // Replace the lagging moving averages with statistics of the whole
        // training set under the current parameters.
        if let Err(e) = stack(train_set).and_then(|x| model.calibrate(&x)) {
            bail!(e);
        }
        let eval_metric = if eval_set.is_empty() {
            None
        } else {
            match eval_metric(&model, eval_set, tax, cfg.threads) {
                Ok(m) => Some(m),
                Err(e) => bail!(e),
            }
        };
        if let Some(m) = eval_metric {
            if best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                best = Some((m, epoch, model.clone()));
            }
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            eval_metric,
        });
    }
    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (Some(e), m),
        None => (None, model.clone()),
    };
    Ok(TrainOutcome {
        model,
        best: best_model,
        best_epoch,
        history,
        opt_state: opt,
    })
}
