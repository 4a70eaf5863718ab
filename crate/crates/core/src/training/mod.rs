//! Optimization loop with deterministic batching and augmentation.

mod config;
mod optim;

pub use config::{TrainConfig, CONFIG_VERSION};
pub use optim::{clip_global_norm, lr_schedule, AdamState, AdamW};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, to_input, AugmentConfig, Normalization};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{infer_inputs, macro_f1, prepare};
use crate::evidential::predict;
use crate::losses::{loss_weight, make_targets, total_loss_weighted, LossBreakdown, VplTarget};
use crate::model::{Model, ModelInput};
use crate::synth::LabeledSample;

/// Images used to estimate the input normalization.
const NORM_SAMPLES: usize = 512;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Augmentation seed of sample `index` in `epoch`.
pub fn aug_seed(run_seed: u64, epoch: u64, index: u64) -> u64 {
    mix(mix(mix(run_seed ^ 0xA076_1D64_78BD_642F) ^ epoch) ^ index)
}

fn epoch_order(run_seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(
        mix(run_seed ^ 0xE703_7ED1_A0B4_28DB) ^ epoch,
    ));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub w: f64,
    /// Batch mean of the per-sample total;
    /// `ml_left + ml_right + w·(kld_left + kld_right) + (1 − w)·geometric`.
    pub loss: f64,
    pub ml_left: f64,
    pub ml_right: f64,
    pub kld_left: f64,
    pub kld_right: f64,
    pub geometric: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: f64,
    pub val_f1: f64,
    pub val_accuracy: f64,
    pub improved: bool,
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step(StepRecord),
    Eval(EvalRecord),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights with the best validation F1 (the initial weights when no step ran).
    pub best: Checkpoint,
    pub log: Vec<LogRecord>,
    pub steps_run: usize,
    pub stopped_early: bool,
}

struct Prepared<'a> {
    cfg: &'a TrainConfig,
    aug: AugmentConfig,
    norm: Normalization,
    data: &'a [LabeledSample],
}

impl Prepared<'_> {
    fn chunk(&self, model: &Model<f32>, idx: &[usize], epoch: u64, w: f64) -> Result<(Vec<f32>, LossBreakdown, bool)> {
        let mut inputs: Vec<ModelInput> = Vec::with_capacity(idx.len());
        let mut meta = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = augment(&self.data[i], aug_seed(self.cfg.seed, epoch, i as u64), &self.aug)?;
            let (u, v) = s.vp.uv().ok_or(Error::WarpDegenerate(0))?;
            meta.push((
                make_targets(s.label_left, s.label_right, self.cfg.classes),
                VplTarget {
                    vp: [u, v],
                    vl: s.vl.normal(),
                },
            ));
            inputs.push(to_input(&s.image, &self.norm));
        }
        let refs: Vec<&ModelInput> = inputs.iter().collect();
        let (outs, trace) = model.forward_train(&refs)?;
        let mut sum = LossBreakdown::default();
        let mut finite = true;
        let grads_out: Vec<_> = outs
            .iter()
            .zip(&meta)
            .map(|(o, (t, gt))| {
                let (b, g) = total_loss_weighted(o, t, gt, w, self.cfg.use_vpl);
                finite &= b.total.is_finite();
                sum.accumulate(&b, 1.0);
                g
            })
            .collect();
        Ok((model.backward(&trace, &grads_out), sum, finite))
    }
}

fn snapshot(
    model: &Model<f32>,
    opt: &AdamW,
    cfg: &TrainConfig,
    norm: Normalization,
    step: usize,
    f1: Option<f64>,
) -> Checkpoint {
    Checkpoint {
        optimizer: Some(opt.state.clone()),
        train_config: Some(cfg.clone()),
        step: step as u64,
        val_f1: f1,
        ..Checkpoint::from_model(model, norm)
    }
}

/// Runs training; every log record is also passed to `sink` as it happens.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    sink: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::DataEmpty);
    }
    let mcfg = cfg.model();
    let expected = (mcfg.input_width as u32, mcfg.input_height as u32);
    if let Some(s) = train_set.iter().find(|s| s.image.dimensions() != expected) {
        return Err(Error::ShapeMismatch(format!(
            "training image is {:?}, model expects {expected:?}",
            s.image.dimensions()
        )));
    }
    let mut model = Model::<f32>::new(mcfg, cfg.seed)?;
    let norm = Normalization::estimate(train_set.iter().take(NORM_SAMPLES).map(|s| &s.image));
    let layout = model.layout().clone();
    let mut opt = AdamW::new(layout.len(), cfg.weight_decay);
    let mut best = snapshot(&model, &opt, cfg, norm, 0, None);
    let mut log = Vec::new();
    if cfg.max_steps == 0 {
        return Ok(TrainOutcome {
            best,
            log,
            steps_run: 0,
            stopped_early: false,
        });
    }

    let prep = Prepared {
        cfg,
        aug: cfg.augment(),
        norm,
        data: train_set,
    };
    let val_images: Vec<_> = val_set.iter().map(|s| &s.image).collect();
    let val_inputs = prepare(&model, &norm, &val_images)?;
    let val_labels: Vec<_> = val_set.iter().map(|s| (s.label_left, s.label_right)).collect();

    let n = train_set.len();
    let bs = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let mut order = Vec::new();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_step = 0usize;
    let mut steps_run = 0;
    let mut stopped_early = false;

    for step in 0..cfg.max_steps {
        let epoch = step / steps_per_epoch;
        let pos = step % steps_per_epoch;
        if pos == 0 {
            order = epoch_order(cfg.seed, epoch as u64, n);
        }
        let batch = &order[pos * bs..((pos + 1) * bs).min(n)];
        let w = loss_weight(step, cfg.max_steps);
        let lr = lr_schedule(step, cfg.base_lr, cfg.warmup_steps, cfg.max_steps);

        let chunks: Vec<&[usize]> = batch.chunks(cfg.chunk_size).collect();
        let results: Vec<Result<_>> = chunks
            .par_iter()
            .map(|c| prep.chunk(&model, c, epoch as u64, w))
            .collect();
        let mut grads = vec![0f32; layout.len()];
        let mut sum = LossBreakdown::default();
        for r in results {
            let (g, b, finite) = r?;
            if !finite {
                return Err(Error::NonFiniteLoss { step, batch_index: pos });
            }
            for (a, x) in grads.iter_mut().zip(&g) {
                *a += x;
            }
            sum.accumulate(&b, 1.0);
        }
        let inv = 1.0 / batch.len() as f64;
        let mut mean = LossBreakdown::default();
        mean.accumulate(&sum, inv);
        for g in grads.iter_mut() {
            *g *= inv as f32;
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        opt.step(&layout, model.params_mut(), &grads, lr);
        steps_run = step + 1;

        let rec = LogRecord::Step(StepRecord {
            step,
            epoch,
            lr,
            w,
            loss: mean.total,
            ml_left: mean.ml_left,
            ml_right: mean.ml_right,
            kld_left: mean.kld_left,
            kld_right: mean.kld_right,
            geometric: mean.geometric,
            grad_norm,
        });
        sink(&rec);
        log.push(rec);

        if steps_run % cfg.eval_every == 0 || steps_run == cfg.max_steps {
            let preds = infer_inputs(&model, &val_inputs)?
                .iter()
                .map(|i| predict(&i.output))
                .collect::<Result<Vec<_>>>()?;
            let report = macro_f1(&preds, &val_labels)?;
            let improved = report.macro_f1 > best_f1;
            if improved {
                best_f1 = report.macro_f1;
                best_step = steps_run;
                best = snapshot(&model, &opt, cfg, norm, steps_run, Some(report.macro_f1));
            }
            let rec = LogRecord::Eval(EvalRecord {
                step: steps_run,
                epoch: steps_run as f64 / steps_per_epoch as f64,
                val_f1: report.macro_f1,
                val_accuracy: report.accuracy,
                improved,
            });
            sink(&rec);
            log.push(rec);
            if steps_run - best_step >= cfg.early_stop_patience * steps_per_epoch && cfg.early_stop_patience > 0 {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        log,
        steps_run,
        stopped_early,
    })
}
