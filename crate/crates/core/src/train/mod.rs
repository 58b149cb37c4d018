//! Teacher-forced training, checkpoints and the experiment drivers built
//! on top of them.

mod adam;
mod checkpoint;
mod config;
mod experiments;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, ParamEntry, CHECKPOINT_BLOB, CHECKPOINT_MANIFEST};
pub use config::{DataConfig, Profile, TrainConfig};
pub use experiments::{
    evaluate, inspect_gate, run_ablations, AblationRow, AblationRun, AblationTable, Decoding, Evaluation, GateEntry,
    GateReport, GeneratedRecord, ViewMasses,
};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::captioning::{TokenSequence, Vocabulary};
use crate::data::{load_dataset, split, synth_generate, Example, Split};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::ReportModel;
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_metrics: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

pub fn write_log(out: &mut impl Write, records: &[LogRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub model: ReportModel,
    /// Parameters of the best validation epoch: highest BLEU-4 when
    /// validation decoding is on, lowest loss otherwise, final parameters
    /// without a validation split.
    pub params: ParamStore<f32>,
    pub final_params: ParamStore<f32>,
    pub best_epoch: usize,
    pub steps: u64,
    pub log: Vec<LogRecord>,
    pub history: Vec<EpochRecord>,
    pub split: Split,
}

impl TrainOutcome {
    pub fn step_records(&self) -> impl Iterator<Item = &StepRecord> {
        self.log.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            LogRecord::Epoch(_) => None,
        })
    }
}

/// Loads the dataset named by the config, or synthesises it.
pub fn load_examples(config: &TrainConfig) -> Result<Vec<Example>> {
    match &config.data.dir {
        Some(dir) => load_dataset(dir),
        None => synth_generate(&config.data.synth),
    }
}

pub fn split_examples(config: &TrainConfig, n: usize) -> Result<Split> {
    let [a, b, c] = config.data.split;
    split(n, (a, b, c), config.seed)
}

fn encode_reports(model: &ReportModel, examples: &[&Example]) -> Result<Vec<TokenSequence>> {
    examples
        .iter()
        .map(|e| {
            let seq = model.vocab.encode(&e.report);
            if seq.len() > model.config.max_len {
                return Err(Error::SequenceTooLong {
                    len: seq.len(),
                    max: model.config.max_len,
                });
            }
            Ok(seq)
        })
        .collect()
}

/// Mean loss and token accuracy over examples, without gradients.
pub fn score_examples(
    model: &ReportModel,
    params: &ParamStore<f32>,
    examples: &[&Example],
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let seqs = encode_reports(model, examples)?;
    let (mut loss, mut correct, mut counted) = (0.0, 0, 0);
    for (e, s) in examples.iter().zip(&seqs) {
        let (l, c, n) = model.score(params, &e.bundle, s)?;
        loss += l;
        correct += c;
        counted += n;
    }
    Ok((loss / examples.len() as f64, correct as f64 / counted.max(1) as f64))
}

fn diverged(step: u64, params: &ParamStore<f32>, cause: &str) -> Error {
    let detail = match params.first_non_finite() {
        Some(name) => format!("{cause}; first non-finite parameter: `{name}`"),
        None => {
            let (name, max) = params
                .iter()
                .map(|(_, n, t)| (n, t.data().iter().fold(0f32, |m, v| m.max(v.abs()))))
                .fold(("", 0f32), |a, b| if b.1 > a.1 { b } else { a });
            format!("{cause}; all parameters finite, largest magnitude {max} in `{name}`")
        }
    };
    Error::Diverged { step, detail }
}

/// Trains a fresh model on the training split of `examples`.
pub fn train(config: &TrainConfig, examples: &[Example]) -> Result<TrainOutcome> {
    config.validate()?;
    let first = examples.first().ok_or(Error::EmptyCorpus)?;
    let parts = split_examples(config, examples.len())?;
    if parts.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let train_set: Vec<&Example> = parts.train.iter().map(|&i| &examples[i]).collect();
    let val_set: Vec<&Example> = parts.val.iter().map(|&i| &examples[i]).collect();
    let vocab = Vocabulary::from_corpus(train_set.iter().map(|e| e.report.as_str()));
    let (model, init_params) = ReportModel::new::<f32>(
        config.model.clone(),
        vocab,
        first.bundle.anatomy_labels.clone(),
        config.seed,
    )?;
    train_model(config, model, init_params, &train_set, &val_set, parts)
}

/// Runs the optimisation loop from given initial parameters.
pub fn train_model(
    config: &TrainConfig,
    model: ReportModel,
    mut params: ParamStore<f32>,
    train_set: &[&Example],
    val_set: &[&Example],
    parts: Split,
) -> Result<TrainOutcome> {
    let seqs = encode_reports(&model, train_set)?;
    let mut adam = Adam::new(&params);
    let mut log = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let scale = 1.0 / batch.len() as f32;
            let mut sum: Vec<Option<Tensor<f32>>> = vec![None; params.len()];
            let mut loss = 0.0;
            for &i in &batch {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &params, true);
                let example_loss = model
                    .loss(&ctx, &train_set[i].bundle, &seqs[i])
                    .and_then(|l| Ok((l, tape.backward(l)?)));
                let (l, mut grads) = match example_loss {
                    Ok(v) => v,
                    Err(Error::Tensor(TensorError::NonFinite { op })) => {
                        return Err(diverged(step + 1, &params, &format!("non-finite value in `{op}`")));
                    }
                    Err(e) => return Err(e),
                };
                loss += l.value().item() as f64;
                for (slot, g) in sum.iter_mut().zip(ctx.param_grads(&mut grads)) {
                    match (slot.as_mut(), g) {
                        (Some(s), Some(g)) => {
                            for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        (None, Some(g)) => *slot = Some(g),
                        _ => {}
                    }
                }
            }
            loss /= batch.len() as f64;
            let mut sq = 0.0f64;
            for g in sum.iter_mut().flatten() {
                for v in g.data_mut() {
                    *v *= scale;
                    sq += (*v as f64) * (*v as f64);
                }
            }
            let grad_norm = sq.sqrt();
            if !grad_norm.is_finite() || !loss.is_finite() {
                return Err(diverged(step + 1, &params, "non-finite loss or gradient"));
            }
            let clipped = grad_norm > config.clip_norm;
            if clipped {
                let c = (config.clip_norm / grad_norm) as f32;
                for g in sum.iter_mut().flatten() {
                    for v in g.data_mut() {
                        *v *= c;
                    }
                }
            }
            adam.step(&mut params, &sum, config.lr)?;
            step += 1;
            if params.first_non_finite().is_some() {
                return Err(diverged(step, &params, "optimizer produced a non-finite parameter"));
            }
            epoch_loss += loss;
            epoch_steps += 1;
            log.push(LogRecord::Step(StepRecord {
                step,
                epoch,
                loss,
                lr: config.lr,
                grad_norm,
                clipped,
            }));
        }
        if epoch_steps == 0 {
            break;
        }
        let mut record = EpochRecord {
            epoch,
            step,
            train_loss: epoch_loss / epoch_steps as f64,
            val_loss: None,
            val_accuracy: None,
            val_metrics: None,
        };
        if !val_set.is_empty() {
            let (vl, va) = score_examples(&model, &params, val_set)?;
            record.val_loss = Some(vl);
            record.val_accuracy = Some(va);
            if config.val_metrics {
                let limit = config.val_limit.unwrap_or(val_set.len()).min(val_set.len());
                if limit > 0 {
                    let eval = evaluate(&model, &params, &val_set[..limit], Decoding::Greedy, None)?;
                    record.val_metrics = Some(eval.metrics);
                }
            }
            // Higher is better: validation BLEU-4 when decoded, else -loss.
            let key = record.val_metrics.map_or(-vl, |m| m.bleu_4);
            if best.as_ref().is_none_or(|(b, _, _)| key > *b) {
                best = Some((key, epoch, params.clone()));
            }
        }
        log.push(LogRecord::Epoch(record.clone()));
        history.push(record);
    }

    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (history.len().saturating_sub(1), params.clone()),
    };
    Ok(TrainOutcome {
        model,
        params: best_params,
        final_params: params,
        best_epoch,
        steps: step,
        log,
        history,
        split: parts,
    })
}
