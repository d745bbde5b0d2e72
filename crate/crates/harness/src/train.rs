use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clustr_core::attention::Session;
use clustr_core::model::{build_model, count_params, save_checkpoint, Model, ModelConfig};
use clustr_core::numerics::{io, Real, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Precision, RunConfig};
use crate::dataset::{stream_rng, Dataset, BATCH_STREAM};
use crate::error::{HarnessError, Result};
use crate::optim::{cosine_lr, AdamW};
use crate::report::{emit_report, to_json, MetricsFile, MetricsRecord, ReportFormat, METRICS_SCHEMA_VERSION};

/// Epoch-wise shuffled mini-batches; the order depends only on the seed.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, BATCH_STREAM);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchSampler { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: String,
    pub precision: String,
    pub seed: u64,
    pub params: usize,
    pub steps_run: usize,
    pub final_loss: f64,
    pub final_train_accuracy: f64,
    /// First step whose measured training accuracy reached the target.
    pub reached_target_at: Option<usize>,
    pub attention_macs: u64,
    pub kv_tokens: u64,
}

pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub records: Vec<MetricsRecord>,
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of the dataset classified correctly.
pub fn accuracy<T: Real>(model: &Model<T>, data: &Dataset) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(64) {
        let logits = model.forward(&data.batch::<T>(chunk))?;
        correct += chunk
            .iter()
            .enumerate()
            .filter(|&(r, &i)| argmax(logits.row(r)) == data.labels[i])
            .count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Attention multiplies per image, per layer, and the total KV tokens over
/// layers and scales, from one instrumented forward pass.
pub fn probe_macs<T: Real>(model: &Model<T>, image: &Tensor<T>) -> Result<(BTreeMap<String, u64>, u64)> {
    let mut s = Session::new(&model.params);
    model.forward_image(&mut s, image)?;
    let mut macs = BTreeMap::new();
    let mut kv = 0u64;
    for t in &s.traces {
        *macs.entry(t.layer.clone()).or_insert(0) += t.measured_macs;
        kv += t.kv_tokens.iter().map(|&k| k as u64).sum::<u64>();
    }
    Ok((macs, kv))
}

/// One forward/backward pass; gradients are left in the parameter store.
fn loss_and_grads<T: Real>(model: &mut Model<T>, batch: &Tensor<T>, labels: &[usize]) -> clustr_core::Result<(f64, f64)> {
    let (loss, acc, grads) = {
        let mut s = Session::new(&model.params);
        let logits = model.forward_batch(&mut s, batch)?;
        let loss = s.graph.cross_entropy(logits, labels)?;
        let lv = s.graph.value(loss).data()[0].as_f64();
        if !lv.is_finite() {
            return Err(clustr_core::Error::Numeric(format!("loss is {lv}")));
        }
        let lt = s.graph.value(logits);
        let hits = labels.iter().enumerate().filter(|&(r, &l)| argmax(lt.row(r)) == l).count();
        (lv, hits as f64 / labels.len() as f64, s.graph.backward(loss)?)
    };
    model.params.zero_grad();
    grads.accumulate_into(&mut model.params);
    Ok((loss, acc))
}

fn dump_batch<T: Real>(dir: &Path, step: usize, idx: &[usize], data: &Dataset, batch: &Tensor<T>, err: &str) -> Result<PathBuf> {
    let dump = dir.join("nan_dump");
    std::fs::create_dir_all(&dump)?;
    io::save_tensor(dump.join("batch.ctr1"), &batch.convert::<f64>())?;
    let info = serde_json::json!({
        "step": step,
        "indices": idx,
        "labels": data.labels_of(idx),
        "error": err,
    });
    std::fs::write(dump.join("batch.json"), to_json(&info)?)?;
    Ok(dump)
}

/// Trains a freshly initialized model. Writes metrics, a summary and
/// optionally a checkpoint when `out` is given.
pub fn train<T: Real>(run: &RunConfig, model_cfg: &ModelConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    run.validate()?;
    if data.size != model_cfg.input_resolution || data.channels != model_cfg.in_channels {
        return Err(HarnessError::Config(format!(
            "dataset images are {0}×{0}×{1}, the model expects {2}×{2}×{3}",
            data.size, data.channels, model_cfg.input_resolution, model_cfg.in_channels
        )));
    }
    if data.classes > model_cfg.num_classes {
        return Err(HarnessError::Config(format!(
            "{} classes but the head has {} outputs",
            data.classes, model_cfg.num_classes
        )));
    }
    if data.is_empty() {
        return Err(HarnessError::Config("empty dataset".into()));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let opt_cfg = &run.optimizer;
    let mut model = build_model::<T>(model_cfg, run.seed)?;
    let mut opt = AdamW::new(opt_cfg, &model.params);
    let mut sampler = BatchSampler::new(data.len(), run.seed);
    let (layer_macs, kv_tokens) = probe_macs(&model, &data.batch::<T>(&[0]).reshape(vec![data.size, data.size, data.channels])?)?;
    let attention_macs: u64 = layer_macs.values().sum();
    let start = Instant::now();
    let mut records = Vec::with_capacity(opt_cfg.steps);
    let mut reached = None;
    let mut last_acc = f64::NAN;

    for step in 0..opt_cfg.steps {
        let idx = sampler.next_batch(opt_cfg.batch_size);
        let batch = data.batch::<T>(&idx);
        let labels = data.labels_of(&idx);
        let lr = cosine_lr(opt_cfg, step);
        let (loss, batch_acc) = match loss_and_grads(&mut model, &batch, &labels) {
            Ok(v) => v,
            Err(e) if e.is_numeric() => {
                let msg = format!("step {step}: {e}");
                let note = match out {
                    Some(dir) => format!("; batch dumped to {}", dump_batch(dir, step, &idx, data, &batch, &msg)?.display()),
                    None => String::new(),
                };
                return Err(HarnessError::Numeric(format!("{msg}{note}")));
            }
            Err(e) => return Err(e.into()),
        };
        opt.step(&mut model.params, lr);

        let last = step + 1 == opt_cfg.steps;
        let train_accuracy = if (step + 1) % run.train.eval_every == 0 || last {
            let a = accuracy(&model, data)?;
            last_acc = a;
            Some(a)
        } else {
            None
        };
        records.push(MetricsRecord {
            step,
            loss,
            batch_accuracy: batch_acc,
            train_accuracy,
            lr,
            wall_time: if run.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
            attention_macs,
            layer_macs: layer_macs.clone(),
        });
        if let (Some(a), Some(target)) = (train_accuracy, run.train.target_accuracy) {
            if a >= target {
                reached = Some(step);
                break;
            }
        }
    }
    if records.last().is_some_and(|r| r.train_accuracy.is_none()) {
        last_acc = accuracy(&model, data)?;
        records.last_mut().unwrap().train_accuracy = Some(last_acc);
    }

    let summary = TrainSummary {
        variant: model_cfg.variant.clone(),
        precision: T::NAME.to_string(),
        seed: run.seed,
        params: count_params(&model),
        steps_run: records.len(),
        final_loss: records.last().map_or(f64::NAN, |r| r.loss),
        final_train_accuracy: last_acc,
        reached_target_at: reached,
        attention_macs,
        kv_tokens,
    };
    if let Some(dir) = out {
        let file = MetricsFile {
            schema_version: METRICS_SCHEMA_VERSION,
            seed: run.seed,
            precision: T::NAME.to_string(),
            records: records.clone(),
        };
        emit_report(&file, ReportFormat::Csv, dir.join("metrics.csv"))?;
        emit_report(&file, ReportFormat::Json, dir.join("metrics.json"))?;
        std::fs::write(dir.join("summary.json"), to_json(&summary)?)?;
        if run.train.checkpoint {
            save_checkpoint(dir.join("checkpoint"), &model)?;
        }
    }
    Ok(TrainOutcome { summary, records })
}

/// `train` with the model, dataset and precision taken from the run config.
pub fn train_run(run: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    run.validate()?;
    let cfg = run.model_config()?;
    let data = run.dataset.load(run.seed, &run.base_dir)?;
    match run.precision {
        Precision::F32 => train::<f32>(run, &cfg, &data, out),
        Precision::F64 => train::<f64>(run, &cfg, &data, out),
    }
}
