//! Training loop: Adam on mini-batches, periodic validation, learning-rate
//! halving on plateau, early stopping and best-checkpoint selection.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ProbingExample, TaskSpec};
use crate::error::{Error, Result};
use crate::metrics::{score, MetricsReport};
use crate::nn::DropoutKey;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::probe::{bce_loss, Probe};
use crate::scalar::Scalar;
use crate::store::{EmbeddingStore, LayeredEmbeddings};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub stop_patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            batch_size: 64,
            eval_interval: 1000,
            lr_patience: 5,
            lr_factor: 0.5,
            stop_patience: 20,
            adam: AdamConfig::default(),
            seed: 0,
            max_steps: 200_000,
        }
    }
}

impl TrainConfig {
    // `!(x > 0.0)` also rejects NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("eval_interval", self.eval_interval),
            ("lr_patience", self.lr_patience),
            ("stop_patience", self.stop_patience),
            ("max_steps", self.max_steps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config("lr_factor must lie in (0, 1)".into()));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EarlyStop,
    MaxSteps,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxSteps => "max_steps",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub valid_f1: f64,
    pub valid_loss: f64,
    /// Learning rate in effect after this evaluation was processed.
    pub lr: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EvalRecord>,
    pub stop_reason: StopReason,
    pub best_step: usize,
    pub best_f1: f64,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["step", "valid_f1", "valid_loss", "lr", "improved"])?;
        for r in &self.records {
            csv.write_record([
                r.step.to_string(),
                r.valid_f1.to_string(),
                r.valid_loss.to_string(),
                r.lr.to_string(),
                u8::from(r.improved).to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }
}

/// What the schedule decided after one validation result.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Observation {
    pub improved: bool,
    pub lr_halved: bool,
    pub stop: bool,
}

/// Plateau bookkeeping shared by the LR reduction and early stopping.
/// Improvement means a strictly higher F1 than every earlier evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    best: Option<f64>,
    since_improvement: usize,
    since_reduction: usize,
    lr_patience: usize,
    lr_factor: f64,
    stop_patience: usize,
}

impl PlateauSchedule {
    pub fn new(config: &TrainConfig) -> Self {
        PlateauSchedule {
            lr: config.lr,
            best: None,
            since_improvement: 0,
            since_reduction: 0,
            lr_patience: config.lr_patience,
            lr_factor: config.lr_factor,
            stop_patience: config.stop_patience,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, f1: f64) -> Observation {
        let mut obs = Observation::default();
        if self.best.is_none_or(|b| f1 > b) {
            self.best = Some(f1);
            self.since_improvement = 0;
            self.since_reduction = 0;
            obs.improved = true;
            return obs;
        }
        self.since_improvement += 1;
        self.since_reduction += 1;
        if self.since_reduction >= self.lr_patience {
            self.lr *= self.lr_factor;
            self.since_reduction = 0;
            obs.lr_halved = true;
        }
        obs.stop = self.since_improvement >= self.stop_patience;
        obs
    }
}

/// One target ready for the probe: subtoken spans and gold indicators.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTarget {
    pub sentence: usize,
    pub spans: Vec<(usize, usize)>,
    pub gold: Vec<bool>,
    /// Word length of the first span.
    pub word_len: usize,
}

/// Examples joined with their embeddings, held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sentences: Vec<LayeredEmbeddings>,
    pub targets: Vec<PreparedTarget>,
}

impl Dataset {
    /// Looks every example up in `store` by its sentence id (falling back to
    /// the example's position) and maps word spans to subtoken spans.
    pub fn build(
        examples: &[ProbingExample],
        store: &EmbeddingStore,
        task: &TaskSpec,
    ) -> Result<Self> {
        let sentences = examples
            .iter()
            .enumerate()
            .map(|(i, ex)| store.get(ex.sentence_id(i)).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(examples, sentences, task)
    }

    pub fn from_parts(
        examples: &[ProbingExample],
        sentences: Vec<LayeredEmbeddings>,
        task: &TaskSpec,
    ) -> Result<Self> {
        if examples.len() != sentences.len() {
            return Err(Error::Data(
                "one embedded sentence per example required".into(),
            ));
        }
        let mut targets = Vec::new();
        for (i, (ex, emb)) in examples.iter().zip(&sentences).enumerate() {
            if emb.word_count() != ex.word_count() {
                return Err(Error::Data(format!(
                    "sentence {}: {} words in text, {} in store alignment",
                    emb.sentence_id,
                    ex.word_count(),
                    emb.word_count()
                )));
            }
            for t in &ex.targets {
                let mut spans = vec![emb.map_span(t.span1)];
                match (task.arity.span_count(), t.span2) {
                    (2, Some(s2)) => spans.push(emb.map_span(s2)),
                    (1, None) => {}
                    _ => {
                        return Err(Error::Data(format!(
                            "sentence {}: target arity does not match task {}",
                            emb.sentence_id, task.name
                        )))
                    }
                }
                targets.push(PreparedTarget {
                    sentence: i,
                    spans,
                    gold: task.encode(t)?,
                    word_len: t.span1.len(),
                });
            }
        }
        Ok(Dataset { sentences, targets })
    }

    pub fn golds(&self) -> Vec<Vec<bool>> {
        self.targets.iter().map(|t| t.gold.clone()).collect()
    }

    /// Same sentences, only the targets accepted by `keep`.
    pub fn filter(&self, keep: impl Fn(&PreparedTarget) -> bool) -> Dataset {
        Dataset {
            sentences: self.sentences.clone(),
            targets: self.targets.iter().filter(|t| keep(t)).cloned().collect(),
        }
    }
}

/// Eval-mode predictions over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub mean_loss: f64,
    pub probabilities: Vec<Vec<f64>>,
}

pub fn evaluate<T: Scalar>(probe: &Probe<T>, data: &Dataset) -> Result<Evaluation> {
    let mut probabilities = Vec::with_capacity(data.targets.len());
    let mut total = 0.0;
    for t in &data.targets {
        let (pred, _) = probe.forward(&data.sentences[t.sentence], &t.spans, None)?;
        total += bce_loss(&pred.probabilities, &t.gold).to_f64_lossy();
        probabilities.push(
            pred.probabilities
                .iter()
                .map(|p| p.to_f64_lossy())
                .collect::<Vec<f64>>(),
        );
    }
    let report = score(
        &probabilities,
        &data.golds(),
        crate::probe::DECISION_THRESHOLD,
    )?;
    let mean_loss = if data.targets.is_empty() {
        0.0
    } else {
        total / data.targets.len() as f64
    };
    Ok(Evaluation {
        report,
        mean_loss,
        probabilities,
    })
}

/// Fixed-seed reshuffling stream of target indices.
struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        BatchStream {
            order,
            cursor: 0,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

/// Trains `probe` and returns the parameters with the best validation F1.
pub fn train(
    mut probe: Probe<f64>,
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
) -> Result<(Probe<f64>, TrainLog)> {
    config.validate()?;
    if train.targets.is_empty() || valid.targets.is_empty() {
        return Err(Error::Data(
            "training and validation sets must both contain targets".into(),
        ));
    }
    let mut stream = BatchStream::new(train.targets.len(), config.seed);
    let mut adam = AdamState::new(&probe.params, config.adam);
    let mut schedule = PlateauSchedule::new(config);
    let mut grads = probe.params.zeros_like();
    let mut best = probe.clone();
    let mut best_step = 0;
    let mut records = Vec::new();
    let mut step = 0;
    let scale = 1.0 / config.batch_size as f64;

    let stop_reason = loop {
        for t in grads.tensors_mut() {
            t.fill(0.0);
        }
        let batch = stream.next_batch(config.batch_size);
        let mut batch_loss = 0.0;
        for (item, &idx) in batch.iter().enumerate() {
            let target = &train.targets[idx];
            let key = DropoutKey {
                seed: config.seed,
                step: step as u64,
                item: item as u64,
            };
            let (pred, cache) =
                probe.forward(&train.sentences[target.sentence], &target.spans, Some(key))?;
            batch_loss += bce_loss(&pred.probabilities, &target.gold);
            probe.backward(&cache, &target.gold, scale, &mut grads)?;
        }
        if !batch_loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("batch loss {batch_loss}"),
            });
        }
        adam_step(&mut probe.params, &grads, &mut adam, schedule.lr)?;
        step += 1;

        let at_cap = step >= config.max_steps;
        if step % config.eval_interval == 0 || at_cap {
            let eval = evaluate(&probe, valid)?;
            if !eval.mean_loss.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("validation loss {}", eval.mean_loss),
                });
            }
            let obs = schedule.observe(eval.report.f1);
            if obs.improved {
                best = probe.clone();
                best_step = step;
            }
            records.push(EvalRecord {
                step,
                valid_f1: eval.report.f1,
                valid_loss: eval.mean_loss,
                lr: schedule.lr,
                improved: obs.improved,
            });
            if obs.stop {
                break StopReason::EarlyStop;
            }
        }
        if at_cap {
            break StopReason::MaxSteps;
        }
    };

    let best_f1 = schedule.best().unwrap_or(0.0);
    Ok((
        best,
        TrainLog {
            records,
            stop_reason,
            best_step,
            best_f1,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_plateau_schedule() {
        let config = TrainConfig::default();
        let mut schedule = PlateauSchedule::new(&config);
        let mut halvings = Vec::new();
        let mut stopped_at = None;
        let mut lrs = Vec::new();
        for eval in 1..=25 {
            let obs = schedule.observe(1.0 - eval as f64 * 0.01);
            lrs.push(schedule.lr);
            if obs.lr_halved {
                halvings.push(eval);
            }
            if obs.stop {
                stopped_at = Some(eval);
                break;
            }
        }
        assert_eq!(halvings, vec![6, 11, 16, 21]);
        assert_eq!(stopped_at, Some(21));
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*lrs.last().unwrap(), 5e-4 / 16.0);
    }

    #[test]
    fn improvement_resets_counters() {
        let mut schedule = PlateauSchedule::new(&TrainConfig::default());
        for f1 in [0.5, 0.4, 0.4, 0.4, 0.4] {
            assert!(!schedule.observe(f1).lr_halved);
        }
        assert!(schedule.observe(0.6).improved);
        for _ in 0..4 {
            assert!(!schedule.observe(0.6).lr_halved);
        }
        assert!(schedule.observe(0.6).lr_halved);
    }

    #[test]
    fn batches_cover_every_target_each_epoch() {
        let mut stream = BatchStream::new(10, 3);
        let mut first: Vec<usize> = stream.next_batch(10);
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let mut again = BatchStream::new(10, 3);
        let _ = again.next_batch(10);
        assert_eq!(stream.next_batch(7), again.next_batch(7));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr_factor: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
