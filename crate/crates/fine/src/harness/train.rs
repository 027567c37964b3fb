//! The training loop: two-pass critic/encoder optimization, queue
//! maintenance, per-step loss logging, per-epoch validation metrics, and
//! checkpointing with exact resume.

use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::data::{compute_all_metrics, Dataset, ModalityBatch, Metrics, Split};
use crate::dcq::{accon_loss, QueueState};
use crate::ftre::rotation_shuffle;
use crate::fusion::{total_loss, LossReport};
use crate::numcore::{rng_from_seed, rng_restore, rng_state, Rng, Scalar, Tensor};
use crate::{Error, Result};

use super::checkpoint::{params_to_blobs, restore_params, Checkpoint, OptState};
use super::config::RunConfig;
use super::model::FineModel;
use super::opt::{warmup_scale, AdamW};

pub const LOSS_CSV_HEADER: &str =
    "step,l_mp,l_up,l_cl,l_aux,i_sha,i_uni,i_str,i_utr,l_recon,l_total";

/// Seed of the batch shuffle for one epoch, derived without consuming the
/// model RNG so resume can rebuild the same order.
fn epoch_shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch as u64 + 1)
}

/// Per-bin label counts of the training split (queue capacities).
fn train_bin_counts<S: Scalar>(queue_probe: &QueueState<S>, dataset: &Dataset) -> Vec<usize> {
    let mut counts = vec![0usize; queue_probe.config().bins];
    for &i in dataset.split_indices(Split::Train) {
        let (bin, _) = queue_probe.bin_of(dataset.labels[i] as f64);
        counts[bin] += 1;
    }
    counts
}

pub struct TrainState<S: Scalar> {
    pub cfg: RunConfig,
    pub model: FineModel<S>,
    pub queue: QueueState<S>,
    pub model_opt: AdamW<S>,
    pub critic_opt: AdamW<S>,
    pub rng: Rng,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
}

impl<S: Scalar> TrainState<S> {
    pub fn fresh(cfg: &RunConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(cfg.seed);
        let model = FineModel::new(cfg, &dataset.manifest, &mut rng)?;
        // probe queue for bin geometry, then the real queue with counts
        let probe = QueueState::<S>::new(model.accon.clone(), &vec![0; model.accon.bins])?;
        let counts = train_bin_counts(&probe, dataset);
        let queue = QueueState::new(model.accon.clone(), &counts)?;
        let model_opt = AdamW::new(
            model.model_params().into_iter().map(|(_, t)| t).collect(),
            cfg.lr,
            cfg.weight_decay,
        );
        let critic_opt = AdamW::new(
            model.critic_params().into_iter().map(|(_, t)| t).collect(),
            cfg.critic_lr,
            0.0,
        );
        Ok(TrainState {
            cfg: cfg.clone(),
            model,
            queue,
            model_opt,
            critic_opt,
            rng,
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, dataset: &Dataset) -> Result<Self> {
        let mut state = Self::fresh(&ck.config, dataset)?;
        let mut params = state.model.model_params();
        params.extend(state.model.critic_params());
        restore_params(&params, &ck.params)?;
        state
            .model_opt
            .restore(ck.model_opt.step_count, &ck.model_opt.m, &ck.model_opt.v);
        state
            .critic_opt
            .restore(ck.critic_opt.step_count, &ck.critic_opt.m, &ck.critic_opt.v);
        state.queue.restore(&ck.queue)?;
        state.rng = rng_restore(&ck.rng);
        state.epoch = ck.epoch;
        state.step_in_epoch = ck.step_in_epoch;
        state.global_step = ck.global_step;
        Ok(state)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = self.model.model_params();
        params.extend(self.model.critic_params());
        let (ms, mm, mv) = self.model_opt.state();
        let (cs, cm, cv) = self.critic_opt.state();
        Checkpoint {
            version: 1,
            config: self.cfg.clone(),
            epoch: self.epoch,
            step_in_epoch: self.step_in_epoch,
            global_step: self.global_step,
            rng: rng_state(&self.rng),
            queue: self.queue.snapshot(),
            params: params_to_blobs(&params),
            model_opt: OptState {
                step_count: ms,
                m: mm,
                v: mv,
            },
            critic_opt: OptState {
                step_count: cs,
                m: cm,
                v: cv,
            },
        }
    }

    /// Total optimizer steps covered by warmup.
    fn warmup_steps(&self, steps_per_epoch: usize) -> u64 {
        (self.cfg.warmup_frac * self.cfg.epochs as f64 * steps_per_epoch as f64).round() as u64
    }

    /// One optimization step. Order: forward and losses, critic pass,
    /// encoder/optimizer step, queue update.
    pub fn train_step(&mut self, batch: &ModalityBatch<S>, lr_scale: f64) -> Result<LossReport> {
        let b = batch.batch_size();
        let offset = self.rng.gen_range(0..usize::MAX);
        let shuffle = rotation_shuffle(b, offset);

        let fwd = self.model.forward(batch, &shuffle)?;

        let l_cl = if self.model.disable_dcq {
            Tensor::scalar(S::zero())
        } else {
            let (loss, stats) = accon_loss(
                &fwd.z,
                &batch.label_values,
                &self.queue,
                &self.model.accon,
            )?;
            self.queue.diag.skipped_anchors += stats.skipped_anchors as u64;
            if stats.contributing_anchors == 0 {
                self.queue.diag.empty_pool_events += 1;
            }
            loss
        };

        let total = total_loss(
            &fwd.y_hat,
            &fwd.y_unimodal,
            &batch.labels,
            &l_cl,
            &fwd.l_aux,
            &fwd.l_mi,
            fwd.mi_breakdown,
            &self.model.weights,
        )?;

        if let Some(critic_loss) = self.model.critic_loss(&fwd)? {
            self.critic_opt.zero_grad();
            critic_loss.backward()?;
            self.critic_opt.step(lr_scale);
        }

        self.model_opt.zero_grad();
        total.total.backward()?;
        self.model_opt.step(lr_scale);

        if !self.model.disable_dcq {
            self.queue
                .update(&fwd.z.detach(), &batch.label_values)?;
        }

        self.global_step += 1;
        self.step_in_epoch += 1;
        Ok(total.report)
    }
}

fn csv_line(step: u64, r: &LossReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        step,
        r.l_mp,
        r.l_up,
        r.l_cl,
        r.l_aux,
        r.mi.i_sha,
        r.mi.i_uni,
        r.mi.i_str,
        r.mi.i_utr,
        r.mi.l_recon,
        r.l_total
    )
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Predictions over one split, in manifest order.
pub fn predict_split<S: Scalar>(
    model: &FineModel<S>,
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for batch in dataset.batches::<S>(split, batch_size, None)? {
        let shuffle = rotation_shuffle(batch.batch_size(), 0);
        let fwd = model.forward(&batch, &shuffle)?;
        preds.extend(fwd.y_hat.to_vec().iter().map(|v| v.as_f64()));
        labels.extend(batch.label_values.iter().copied());
    }
    Ok((preds, labels))
}

pub fn eval_metrics<S: Scalar>(
    model: &FineModel<S>,
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
) -> Result<Metrics> {
    let (preds, labels) = predict_split(model, dataset, split, batch_size)?;
    compute_all_metrics(&preds, &labels)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub acc2: f64,
    pub f1: f64,
    pub acc7: f64,
    pub mse: f64,
    pub train_l_total_median: f64,
    pub queue_len: usize,
    pub queue_updates: u64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub epochs_run: usize,
    pub final_val: Metrics,
    pub epoch_medians: Vec<f64>,
}

/// Run training to completion, writing losses.csv, metrics.jsonl, and
/// checkpoints under `out_dir`. Resumes from `cfg.resume` when set.
pub fn train<S: Scalar>(cfg: &RunConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir.join("checkpoints"))?;

    let mut state = if cfg.resume.is_empty() {
        TrainState::<S>::fresh(cfg, dataset)?
    } else {
        let ck = Checkpoint::load(Path::new(&cfg.resume))?;
        TrainState::<S>::from_checkpoint(&ck, dataset)?
    };

    let mut losses = File::create(out_dir.join("losses.csv"))?;
    writeln!(losses, "{LOSS_CSV_HEADER}")?;
    let mut metrics_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("metrics.jsonl"))?;

    let n_train = dataset.split_indices(Split::Train).len();
    let steps_per_epoch = n_train.div_ceil(cfg.batch_size);
    let warmup_steps = state.warmup_steps(steps_per_epoch);

    let mut epoch_medians = Vec::new();
    let mut final_val = None;
    let start_epoch = state.epoch;
    for epoch in start_epoch..cfg.epochs {
        state.epoch = epoch;
        let shuffle_seed = epoch_shuffle_seed(state.cfg.seed, epoch);
        let batches = dataset.batches::<S>(Split::Train, cfg.batch_size, Some(shuffle_seed))?;
        let skip = if epoch == start_epoch {
            state.step_in_epoch
        } else {
            0
        };
        let mut epoch_losses = Vec::new();
        for batch in batches.iter().skip(skip) {
            let lr_scale = warmup_scale(state.global_step, warmup_steps);
            let report = state.train_step(batch, lr_scale).map_err(|e| match e {
                Error::TrainingStep { component, details } => Error::TrainingStep {
                    component,
                    details: format!("step {}: {details}", state.global_step),
                },
                other => other,
            })?;
            writeln!(losses, "{}", csv_line(state.global_step, &report))?;
            epoch_losses.push(report.l_total);
            if cfg.ckpt_every_steps > 0 && state.global_step % cfg.ckpt_every_steps as u64 == 0 {
                state
                    .checkpoint()
                    .save(&out_dir.join(format!("checkpoints/step_{:06}.json", state.global_step)))?;
            }
        }
        state.step_in_epoch = 0;
        state.epoch = epoch + 1;

        let val = eval_metrics(&state.model, dataset, Split::Val, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            split: "val",
            acc2: val.acc2,
            f1: val.f1,
            acc7: val.acc7,
            mse: val.mse,
            train_l_total_median: median(epoch_losses.clone()),
            queue_len: state.queue.total_len(),
            queue_updates: state.queue.diag.updates,
        };
        writeln!(metrics_file, "{}", serde_json::to_string(&record)?)?;
        epoch_medians.push(record.train_l_total_median);
        final_val = Some(val);

        state
            .checkpoint()
            .save(&out_dir.join(format!("checkpoints/epoch_{:04}.json", epoch)))?;
        state.checkpoint().save(&out_dir.join("checkpoints/latest.json"))?;
    }

    Ok(TrainSummary {
        out_dir: out_dir.to_path_buf(),
        epochs_run: cfg.epochs - start_epoch,
        final_val: final_val.ok_or_else(|| Error::Config("no epochs were run".into()))?,
        epoch_medians,
    })
}

/// Mean cross-modal cosine similarity (same sample, different modality)
/// of the shared task-relevant vectors and of the unique ones. The gap
/// between the two quantifies the shared/unique separation.
pub fn disentanglement_gap<S: Scalar>(
    model: &FineModel<S>,
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut str_sum = 0.0;
    let mut utr_sum = 0.0;
    let mut count = 0usize;
    for batch in dataset.batches::<S>(split, batch_size, None)? {
        let shuffle = rotation_shuffle(batch.batch_size(), 0);
        let fwd = model.forward(&batch, &shuffle)?;
        let b = batch.batch_size();
        let d = fwd.blocks[0].0.shape()[1];
        let cos = |x: &[f64], y: &[f64]| {
            let dot: f64 = x.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (nx * ny).max(1e-12)
        };
        let strs: Vec<Vec<f64>> = fwd
            .blocks
            .iter()
            .map(|(s, _)| s.to_vec().iter().map(|v| v.as_f64()).collect())
            .collect();
        let utrs: Vec<Vec<f64>> = fwd
            .blocks
            .iter()
            .map(|(_, u)| u.to_vec().iter().map(|v| v.as_f64()).collect())
            .collect();
        for i in 0..b {
            for (ma, mb) in [(0usize, 1usize), (0, 2), (1, 2)] {
                str_sum += cos(
                    &strs[ma][i * d..(i + 1) * d],
                    &strs[mb][i * d..(i + 1) * d],
                );
                utr_sum += cos(
                    &utrs[ma][i * d..(i + 1) * d],
                    &utrs[mb][i * d..(i + 1) * d],
                );
                count += 1;
            }
        }
    }
    Ok((str_sum / count as f64, utr_sum / count as f64))
}

/// Load a checkpoint and evaluate one split; returns the metrics and the
/// single structured record line that `eval` prints.
pub fn evaluate(ckpt_path: &Path, dataset: &Dataset, split: Split) -> Result<(Metrics, String)> {
    let ck = Checkpoint::load(ckpt_path)?;
    match ck.config.precision {
        crate::numcore::PrecisionMode::Single => evaluate_as::<f32>(&ck, dataset, split),
        crate::numcore::PrecisionMode::Double => evaluate_as::<f64>(&ck, dataset, split),
    }
}

fn evaluate_as<S: Scalar>(
    ck: &Checkpoint,
    dataset: &Dataset,
    split: Split,
) -> Result<(Metrics, String)> {
    let state = TrainState::<S>::from_checkpoint(ck, dataset)?;
    let m = eval_metrics(&state.model, dataset, split, ck.config.batch_size)?;
    let record = serde_json::json!({
        "split": split.name(),
        "epoch": ck.epoch,
        "global_step": ck.global_step,
        "acc2": m.acc2,
        "f1": m.f1,
        "acc7": m.acc7,
        "mse": m.mse,
    });
    Ok((m, serde_json::to_string(&record)?))
}
