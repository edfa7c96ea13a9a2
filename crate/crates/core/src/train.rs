//! Training: two-phase recipe (pretraining with halting disabled, then
//! halting finetuning on the weighted objective), AdamW/SGD optimizers with
//! cosine decay, gradient clipping, per-epoch checkpoints and JSON-line
//! metrics.
//!
//! Batches are evaluated sample-parallel on per-thread model clones with
//! per-sample tapes; gradients merge in sample order so results are
//! bit-identical regardless of thread count.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, TrainState};
use crate::data::{make_batches, Dataset, NormStats};
use crate::energy::{estimate_energy, OpCount, E_AC_PJ, E_MAC_PJ};
use crate::error::{Error, Result};
use crate::halting::AccumulationMode;
use crate::layers::BnMode;
use crate::loss::{self, LossReport};
use crate::model::{ForwardOpts, HeadKind, Model};
use crate::params::Param;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[serde(rename = "adamw")]
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    HaltingFinetune,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::HaltingFinetune => "halting_finetune",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub phase: Phase,
    pub log_every: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub cosine_decay: bool,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            optimizer: OptimizerKind::AdamW,
            phase: Phase::Pretrain,
            log_every: 10,
            seed: 7,
            grad_clip: 5.0,
            cosine_decay: true,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// One metrics line per logged step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub phase: String,
    pub step: u64,
    pub task_loss: f64,
    pub ponder_loss: f64,
    pub overall: f64,
    pub acc: f64,
    pub avg_tokens: f64,
    pub sops: f64,
}

pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    momentum: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, momentum: f64, numels: &[usize]) -> Self {
        Optimizer {
            kind,
            weight_decay,
            momentum,
            m: numels.iter().map(|&n| vec![0.0; n]).collect(),
            v: numels.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn apply(&mut self, idx: usize, lr: f64, param: &mut Param<f32>, grad: &[f32]) {
        let wd = self.weight_decay as f32;
        let lr = lr as f32;
        match self.kind {
            OptimizerKind::AdamW => {
                let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
                let bc1 = 1.0 - (0.9f64).powi(self.t as i32);
                let bc2 = 1.0 - (0.999f64).powi(self.t as i32);
                let m = &mut self.m[idx];
                let v = &mut self.v[idx];
                param.update(|w| {
                    for i in 0..w.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                        let mh = m[i] / bc1 as f32;
                        let vh = v[i] / bc2 as f32;
                        w[i] -= lr * (mh / (vh.sqrt() + eps) + wd * w[i]);
                    }
                });
            }
            OptimizerKind::SgdMomentum => {
                let mu = self.momentum as f32;
                let m = &mut self.m[idx];
                param.update(|w| {
                    for i in 0..w.len() {
                        m[i] = mu * m[i] + grad[i];
                        w[i] -= lr * (m[i] + wd * w[i]);
                    }
                });
            }
        }
    }

    pub fn state_tensors(&self, names: &[String]) -> Vec<(String, Vec<f32>, Vec<usize>)> {
        let mut out = Vec::new();
        out.push(("opt.t".to_string(), vec![self.t as f32], vec![1]));
        for (i, name) in names.iter().enumerate() {
            out.push((format!("opt.m.{name}"), self.m[i].clone(), vec![self.m[i].len()]));
            if self.kind == OptimizerKind::AdamW {
                out.push((format!("opt.v.{name}"), self.v[i].clone(), vec![self.v[i].len()]));
            }
        }
        out
    }

    pub fn load_state(&mut self, names: &[String], ckpt: &Checkpoint) -> Result<()> {
        let get = |key: &str| -> Result<Vec<f32>> {
            ckpt.tensors
                .get(key)
                .map(|(d, _)| d.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))
        };
        self.t = get("opt.t")?[0] as u64;
        for (i, name) in names.iter().enumerate() {
            self.m[i] = get(&format!("opt.m.{name}"))?;
            if self.kind == OptimizerKind::AdamW {
                self.v[i] = get(&format!("opt.v.{name}"))?;
            }
        }
        Ok(())
    }
}

fn cosine_lr(base: f64, step: u64, total: u64, enabled: bool) -> f64 {
    if !enabled || total == 0 {
        return base;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

struct SampleOutput {
    grads: Vec<Option<Vec<f32>>>,
    report: LossReport,
    correct: bool,
    avg_tokens: f64,
    sops: u64,
    nan_dump: Option<String>,
}

fn forward_opts_for(phase: Phase, eps_train: f64, grad: bool) -> ForwardOpts {
    ForwardOpts {
        grad,
        halting: phase == Phase::HaltingFinetune,
        eps: Some(eps_train),
        accumulation: AccumulationMode::TwoDimensional,
        bn_mode: BnMode::Batch,
        injection: None,
    }
}

fn run_sample(
    model: &mut Model<f32>,
    image: &[f32],
    label: usize,
    phase: Phase,
) -> Result<SampleOutput> {
    let cfg = model.config().clone();
    let opts = forward_opts_for(phase, cfg.eps_train, true);
    let pass = model.forward(image, &opts)?;
    let (loss_tensor, report) = match phase {
        Phase::Pretrain => {
            let task = loss::task_loss(&pass.tape, &pass.logits_averaged, label)?;
            let report = LossReport {
                task_loss: task.scalar_value() as f64,
                ponder_loss: loss::ponder_value(&pass.trace, cfg.ponder_counts_prehalt),
                overall: task.scalar_value() as f64,
                delta_p: 0.0,
            };
            (task, report)
        }
        Phase::HaltingFinetune => {
            let task = loss::task_loss(&pass.tape, &pass.logits_mean_field, label)?;
            let ponder = loss::ponder_loss(
                &pass.tape,
                &pass.trace,
                &pass.probabilities,
                cfg.ponder_counts_prehalt,
            )?;
            let (overall, report) = loss::overall_loss(&pass.tape, &task, &ponder, cfg.delta_p)?;
            (overall, report)
        }
    };
    if !report.overall.is_finite() {
        return Ok(SampleOutput {
            grads: Vec::new(),
            report,
            correct: false,
            avg_tokens: pass.avg_tokens,
            sops: pass.counts.total_acs(),
            nan_dump: Some(pass.trace.to_csv("# non-finite loss diagnostic dump")),
        });
    }
    let grads = pass.tape.backward(&loss_tensor)?;
    let mut gvec = Vec::new();
    model.visit_params(&mut |p| {
        gvec.push(
            p.node_on(&pass.tape)
                .and_then(|n| grads.by_node(n))
                .map(|s| s.to_vec()),
        );
    });
    let logits = match phase {
        Phase::Pretrain => pass.logits_vec(HeadKind::Averaged),
        Phase::HaltingFinetune => pass.logits_vec(HeadKind::MeanField),
    };
    Ok(SampleOutput {
        grads: gvec,
        report,
        correct: Model::<f32>::predict(&logits) == label,
        avg_tokens: pass.avg_tokens,
        sops: pass.counts.total_acs(),
        nan_dump: None,
    })
}

pub struct TrainOutcome {
    pub steps: u64,
    pub epochs_run: usize,
    pub history: Vec<StepMetrics>,
}

/// Train one phase. `resume` continues from a checkpoint written by this
/// function (same phase and optimizer); metrics append to `log` as JSON
/// lines.
pub fn train_phase(
    model: &mut Model<f32>,
    data: &Dataset,
    norm: &NormStats,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
    log: Option<&mut dyn Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_phase_bounded(model, data, norm, cfg, resume, log, checkpoint_dir, None)
}

/// `train_phase` that stops after `limit_epochs` epochs of this call while
/// keeping the learning-rate horizon of the full `cfg.epochs`, so an
/// interrupted-and-resumed run reproduces an uninterrupted one.
#[allow(clippy::too_many_arguments)]
pub fn train_phase_bounded(
    model: &mut Model<f32>,
    data: &Dataset,
    norm: &NormStats,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
    mut log: Option<&mut dyn Write>,
    checkpoint_dir: Option<&Path>,
    limit_epochs: Option<u64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    let normalized: Vec<(Vec<f32>, usize)> = data
        .images
        .iter()
        .map(|img| (norm.apply(&img.pixels), img.label))
        .collect();

    let mut param_names = Vec::new();
    let mut numels = Vec::new();
    model.visit_params(&mut |p| {
        param_names.push(p.name().to_string());
        numels.push(p.numel());
    });
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay, cfg.momentum, &numels);
    let mut start_epoch = 0u64;
    let mut step = 0u64;
    if let Some(ckpt) = resume {
        let ts = ckpt
            .manifest
            .train_state
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no train state".into()))?;
        if ts.phase != cfg.phase.as_str() {
            return Err(Error::Config(format!(
                "resume phase {} vs config {}",
                ts.phase,
                cfg.phase.as_str()
            )));
        }
        opt.load_state(&param_names, ckpt)?;
        start_epoch = ts.epoch;
        step = ts.step;
    }
    let steps_per_epoch = make_batches(data.len(), cfg.batch, cfg.seed, 0)?.len() as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let mut history = Vec::new();

    let end_epoch = match limit_epochs {
        Some(lim) => (start_epoch + lim).min(cfg.epochs as u64),
        None => cfg.epochs as u64,
    };
    for epoch in start_epoch..end_epoch {
        for batch in make_batches(data.len(), cfg.batch, cfg.seed, epoch)? {
            let clones: Vec<Model<f32>> = batch.iter().map(|_| model.clone()).collect();
            let results: Vec<Result<SampleOutput>> = clones
                .into_par_iter()
                .zip(batch.par_iter())
                .map(|(mut m, &i)| {
                    let (image, label) = &normalized[i];
                    run_sample(&mut m, image, *label, cfg.phase)
                })
                .collect();

            let mut merged: Vec<Vec<f32>> = numels.iter().map(|&n| vec![0.0; n]).collect();
            let mut task_sum = 0.0;
            let mut ponder_sum = 0.0;
            let mut overall_sum = 0.0;
            let mut correct = 0usize;
            let mut avg_tokens_sum = 0.0;
            let mut sops_sum = 0u64;
            let n = batch.len() as f64;
            for r in results {
                let out = r?;
                if let Some(dump) = out.nan_dump {
                    let dump_path = checkpoint_dir
                        .map(|d| d.join("nan_dump.csv"))
                        .unwrap_or_else(|| std::env::temp_dir().join("stas_nan_dump.csv"));
                    let _ = std::fs::write(&dump_path, dump);
                    return Err(Error::Numeric(format!(
                        "non-finite loss at step {}; halting trace dumped to {}",
                        step,
                        dump_path.display()
                    )));
                }
                for (acc, g) in merged.iter_mut().zip(&out.grads) {
                    if let Some(g) = g {
                        for (a, &gi) in acc.iter_mut().zip(g) {
                            *a += gi;
                        }
                    }
                }
                task_sum += out.report.task_loss;
                ponder_sum += out.report.ponder_loss;
                overall_sum += out.report.overall;
                correct += out.correct as usize;
                avg_tokens_sum += out.avg_tokens;
                sops_sum += out.sops;
            }
            let inv_n = 1.0 / n as f32;
            for g in &mut merged {
                for v in g.iter_mut() {
                    *v *= inv_n;
                }
            }
            clip_gradients(&mut merged, cfg.grad_clip);

            let lr = cosine_lr(cfg.lr, step, total_steps, cfg.cosine_decay);
            opt.begin_step();
            let mut idx = 0;
            model.visit_params(&mut |p| {
                opt.apply(idx, lr, p, &merged[idx]);
                idx += 1;
            });
            step += 1;

            let metrics = StepMetrics {
                phase: cfg.phase.as_str().to_string(),
                step,
                task_loss: task_sum / n,
                ponder_loss: ponder_sum / n,
                overall: overall_sum / n,
                acc: correct as f64 / n,
                avg_tokens: avg_tokens_sum / n,
                sops: sops_sum as f64 / n,
            };
            if step % cfg.log_every as u64 == 0 || step == total_steps {
                if let Some(w) = log.as_deref_mut() {
                    writeln!(w, "{}", serde_json::to_string(&metrics).unwrap())?;
                }
            }
            history.push(metrics);
        }
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(dir, model, &opt, &param_names, cfg, epoch + 1, step, norm)?;
        }
    }
    Ok(TrainOutcome {
        steps: step,
        epochs_run: (end_epoch - start_epoch) as usize,
        history,
    })
}

fn clip_gradients(grads: &mut [Vec<f32>], clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let mut norm_sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            norm_sq += (v as f64) * (v as f64);
        }
    }
    let norm = norm_sq.sqrt();
    if norm > clip {
        let scale = (clip / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn save_checkpoint(
    dir: &Path,
    model: &mut Model<f32>,
    opt: &Optimizer,
    param_names: &[String],
    cfg: &TrainConfig,
    epoch: u64,
    step: u64,
    norm: &NormStats,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let state = TrainState {
        phase: cfg.phase.as_str().to_string(),
        epoch,
        step,
        optimizer: match cfg.optimizer {
            OptimizerKind::AdamW => "adamw".to_string(),
            OptimizerKind::SgdMomentum => "sgd_momentum".to_string(),
        },
    };
    let extra = opt.state_tensors(param_names);
    let path = dir.join(format!("epoch_{epoch:03}.stas"));
    checkpoint::save(&path, model, &extra, Some(state.clone()), Some(norm.clone()))?;
    let latest = dir.join("latest.stas");
    checkpoint::save(&latest, model, &extra, Some(state), Some(norm.clone()))?;
    Ok(path)
}

/// Calibrate batchnorm running statistics on (up to) `max_samples` of the
/// given split, sequentially.
pub fn calibrate_bn(model: &mut Model<f32>, data: &Dataset, norm: &NormStats, max_samples: usize) -> Result<()> {
    let opts = ForwardOpts {
        bn_mode: BnMode::BatchUpdateRunning,
        halting: false,
        ..Default::default()
    };
    for img in data.images.iter().take(max_samples) {
        let x = norm.apply(&img.pixels);
        model.forward(&x, &opts)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalOpts {
    pub eps: Option<f64>,
    pub head: HeadKind,
    pub halting: bool,
    pub accumulation: AccumulationMode,
    pub bn_mode: BnMode,
}

impl Default for EvalOpts {
    fn default() -> Self {
        EvalOpts {
            eps: None,
            head: HeadKind::MeanField,
            halting: true,
            accumulation: AccumulationMode::TwoDimensional,
            bn_mode: BnMode::Batch,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub avg_tokens: f64,
    pub energy_j: f64,
    pub sops: f64,
    pub macs: f64,
    pub samples: usize,
}

/// Deterministic full-split evaluation (states reset per sample).
pub fn evaluate(
    model: &Model<f32>,
    data: &Dataset,
    norm: &NormStats,
    opts: &EvalOpts,
) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Config("empty evaluation dataset".into()));
    }
    let fwd = ForwardOpts {
        grad: false,
        halting: opts.halting,
        eps: opts.eps,
        accumulation: opts.accumulation,
        bn_mode: opts.bn_mode,
        injection: None,
    };
    let clones: Vec<Model<f32>> = data.images.iter().map(|_| model.clone()).collect();
    let per_sample: Vec<Result<(bool, f64, OpCount)>> = clones
        .into_par_iter()
        .zip(data.images.par_iter())
        .map(|(mut m, img)| {
            let x = norm.apply(&img.pixels);
            let pass = m.forward(&x, &fwd)?;
            let pred = Model::<f32>::predict(&pass.logits_vec(opts.head));
            Ok((pred == img.label, pass.avg_tokens, pass.counts))
        })
        .collect();
    let mut correct = 0usize;
    let mut avg_tokens = 0.0;
    let mut counts = OpCount::new();
    for r in per_sample {
        let (ok, at, c) = r?;
        correct += ok as usize;
        avg_tokens += at;
        counts.merge(&c);
    }
    let n = data.len();
    let energy = estimate_energy(&counts, E_MAC_PJ, E_AC_PJ)? / n as f64;
    Ok(EvalMetrics {
        accuracy: correct as f64 / n as f64,
        avg_tokens: avg_tokens / n as f64,
        energy_j: energy,
        sops: counts.total_acs() as f64 / n as f64,
        macs: counts.total_macs() as f64 / n as f64,
        samples: n,
    })
}
