//! Training loops and the two stages: teacher schedule search and
//! retraining, then student schedule search and retraining under
//! distillation.

pub mod checkpoint;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, PolicyList};
use crate::dataio::{self, Dataset};
use crate::error::{Error, Result};
use crate::kdloss::{self, KdConfig};
use crate::nets::{ArchDescriptor, Mode, Model, SgdConfig};
use crate::pba::{self, derive_rng, PbaConfig, Schedule, SearchOutcome};
use crate::quant::QuantConfig;
use crate::tensor::{Graph, Tensor, Var};

const LR_DECAY: f32 = 0.1;
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 3;
const EVAL_BATCH: usize = 256;

const STREAM_INIT: u64 = 1;
const STREAM_SEARCH: u64 = 2;
const STREAM_RETRAIN: u64 = 3;
const STREAM_SPLIT: u64 = 4;
const STREAM_ORDER: u64 = 5;
const STREAM_IMAGE: u64 = 6;

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    derive_rng(seed, parts).gen()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl OptimConfig {
    pub const FULL_PRECISION: OptimConfig = OptimConfig {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 5e-4,
    };
    pub const QUANTIZED: OptimConfig = OptimConfig {
        lr: 1e-3,
        momentum: 0.9,
        weight_decay: 1e-5,
    };

    /// Step decay by 0.1 after every 30% of `total` epochs.
    pub fn at(&self, epoch: usize, total: usize) -> SgdConfig {
        let interval = kdloss::default_decay_interval(total);
        SgdConfig {
            lr: self.lr * LR_DECAY.powi((epoch / interval) as i32),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// One row of a training log.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub task: f64,
    pub kd_soft: f64,
    pub kd_intra: f64,
    pub kd_inter: f64,
    pub lambda: f64,
    pub lr: f64,
    pub val_accuracy: f64,
}

/// Frozen teacher plus distillation settings.
#[derive(Debug, Clone, Copy)]
pub struct Distill<'a> {
    pub teacher: &'a Model,
    pub cfg: &'a KdConfig,
}

/// Re-augment every image for `epoch`: random crop and flip, then the policy
/// if one is given. Each image draws from its own stream, so results do not
/// depend on the policy's presence beyond what it applies.
pub fn augment_images(ds: &Dataset, policy: Option<&PolicyList>, seed: u64, epoch: usize) -> Result<Tensor<f32>> {
    let out: Vec<Tensor<f32>> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = derive_rng(seed, &[STREAM_IMAGE, epoch as u64, i as u64]);
            let img = augment::baseline_augment(&ds.image(i), &mut rng);
            match policy {
                Some(p) => augment::apply_policy(&img, p, &mut rng),
                None => img,
            }
        })
        .collect();
    Tensor::stack(&out)
}

fn batch_of(images: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let per: usize = images.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).unwrap()
}

/// Pair student taps with the deepest teacher taps of the same count.
fn paired<'v>(teacher: &'v [Var], student: &[Var]) -> Result<&'v [Var]> {
    if student.len() > teacher.len() {
        return Err(Error::Config(format!(
            "student exposes {} taps, teacher only {}",
            student.len(),
            teacher.len()
        )));
    }
    Ok(&teacher[teacher.len() - student.len()..])
}

#[derive(Default)]
struct Sums {
    n: f64,
    total: f64,
    task: f64,
    soft: f64,
    intra: f64,
    inter: f64,
}

/// One pass over `data` with the given policy. Batches of a single image
/// are skipped since batch statistics and sample relations need two.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut Model,
    data: &Dataset,
    policy: Option<&PolicyList>,
    kd: Option<Distill<'_>>,
    sgd: &SgdConfig,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<EpochLog> {
    if model.descriptor().classes != data.classes() {
        return Err(Error::Validation(format!(
            "model has {} classes, data {}",
            model.descriptor().classes,
            data.classes()
        )));
    }
    if let Some(d) = &kd {
        if d.teacher.mode() != Mode::Eval {
            return Err(Error::Usage("teacher must be in eval mode".into()));
        }
    }
    model.set_mode(Mode::Train);
    let images = augment_images(data, policy, seed, epoch)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut derive_rng(seed, &[STREAM_ORDER, epoch as u64]));
    let lambda = kd.map_or(0.0, |d| d.cfg.lambda(epoch));
    let mut sums = Sums::default();
    for idx in order.chunks(batch_size.max(2)) {
        if idx.len() < 2 {
            continue;
        }
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
        let x = batch_of(&images, idx);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = model.forward_with_taps(&mut g, xv, true)?;
        let task = kdloss::task_loss(&mut g, out.logits, &labels)?;
        let task_v = f64::from(g.value(task).data()[0]);
        let mut parts = (0.0, 0.0, 0.0);
        let mut kd_loss = None;
        if let Some(d) = kd.filter(|d| d.cfg.terms.any()) {
            let tout = d.teacher.forward_with_taps(&mut g, xv, false)?;
            let mut terms: Vec<Var> = Vec::new();
            if d.cfg.terms.soft {
                let t = kdloss::soft_label_loss(&mut g, tout.logits, out.logits, d.cfg.temperature as f32)?;
                parts.0 = f64::from(g.value(t).data()[0]);
                terms.push(t);
            }
            if d.cfg.terms.intra {
                let sv = out.tap_view();
                let tv = tout.tap_view();
                let t = kdloss::intra_loss(&mut g, paired(&tv, &sv)?, &sv)?;
                parts.1 = f64::from(g.value(t).data()[0]);
                terms.push(t);
            }
            if d.cfg.terms.inter {
                let t = kdloss::inter_loss(&mut g, paired(&tout.taps, &out.taps)?, &out.taps, d.cfg.svd_rank)?;
                parts.2 = f64::from(g.value(t).data()[0]);
                terms.push(t);
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t)?;
            }
            kd_loss = Some(g.scale(acc, lambda as f32));
        }
        let grads = g.backward(task)?;
        model.accumulate(&grads, &out.params)?;
        if let Some(k) = kd_loss {
            let kg = g.backward(k)?;
            let mut flat: Vec<Option<Vec<f32>>> = out.params.iter().map(|&v| kg.get(v).map(<[f32]>::to_vec)).collect();
            kdloss::clip_kd_gradients(&mut flat, kd.unwrap().cfg.kd_grad_clip);
            model.accumulate_flat(&flat)?;
        }
        model.sgd_step(sgd)?;
        model.apply_bn_stats(&out.bn_stats);
        let report = kdloss::ii_kd_total(task_v, parts.0, parts.1, parts.2, kd.map_or(&KdConfig::ii_kd(1), |d| d.cfg), epoch);
        let w = idx.len() as f64;
        sums.n += w;
        sums.total += w * if kd.is_some() { report.total } else { task_v };
        sums.task += w * task_v;
        sums.soft += w * parts.0;
        sums.intra += w * parts.1;
        sums.inter += w * parts.2;
    }
    let n = sums.n.max(1.0);
    Ok(EpochLog {
        epoch,
        train_loss: sums.total / n,
        task: sums.task / n,
        kd_soft: sums.soft / n,
        kd_intra: sums.intra / n,
        kd_inter: sums.inter / n,
        lambda,
        lr: f64::from(sgd.lr),
        val_accuracy: f64::NAN,
    })
}

/// Top-1 accuracy in eval mode without augmentation.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if model.descriptor().classes != data.classes() {
        return Err(Error::Validation(format!(
            "model predicts {} classes, labels have {}",
            model.descriptor().classes,
            data.classes()
        )));
    }
    if data.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty split".into()));
    }
    let mut m = model.clone();
    m.set_mode(Mode::Eval);
    let logits = m.predict(data.images(), EVAL_BATCH)?;
    let pred = logits.argmax_rows()?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Settings shared by both training stages.
#[derive(Debug, Clone, Copy)]
pub struct TrainSpec<'a> {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub schedule: Option<&'a Schedule>,
    pub kd: Option<Distill<'a>>,
}

/// Train for `spec.epochs`, evaluating on `val` after every epoch. Aborts
/// when the loss is not finite, or stays above ten times the first epoch's
/// loss for three epochs in a row.
pub fn train(model: &mut Model, data: &Dataset, val: &Dataset, spec: &TrainSpec<'_>) -> Result<Vec<EpochLog>> {
    let mut log = Vec::with_capacity(spec.epochs);
    let mut initial = None;
    let mut high = 0;
    for e in 0..spec.epochs {
        let policy = spec.schedule.map(|s| s.policy_for(e, spec.epochs));
        let sgd = spec.optim.at(e, spec.epochs);
        let mut row = train_epoch(model, data, policy, spec.kd, &sgd, spec.batch_size, spec.seed, e)?;
        if !row.train_loss.is_finite() {
            return Err(Error::Divergence {
                epoch: e,
                reason: format!("training loss is {}", row.train_loss),
            });
        }
        let base = *initial.get_or_insert(row.train_loss);
        if row.train_loss > DIVERGENCE_FACTOR * base {
            high += 1;
            if high >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence {
                    epoch: e,
                    reason: format!(
                        "loss {:.4} above {DIVERGENCE_FACTOR}× the initial {base:.4} for {high} epochs",
                        row.train_loss
                    ),
                });
            }
        } else {
            high = 0;
        }
        row.val_accuracy = evaluate(model, val)?;
        debug!(
            "epoch {e}: loss {:.4} task {:.4} lambda {:.4} val {:.4}",
            row.train_loss, row.task, row.lambda, row.val_accuracy
        );
        log.push(row);
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSettings {
    pub population: usize,
    pub epochs: usize,
    pub exploit_interval: usize,
    /// Images in the reduced training split.
    pub train_size: usize,
    /// Held-out images that score each trial.
    pub val_size: usize,
}

/// Teacher stage settings.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaConfig {
    pub teacher: ArchDescriptor,
    pub search: SearchSettings,
    pub retrain_epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

/// Student stage settings.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaConfig {
    pub student: ArchDescriptor,
    pub quant: Option<QuantConfig>,
    /// Start from the teacher's weights (same architecture required).
    pub init_from_teacher: bool,
    pub kd: KdConfig,
    pub search: SearchSettings,
    pub retrain_epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub schedule: Schedule,
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub accuracy: f64,
    pub search: SearchOutcome<Model>,
}

fn search_config(s: &SearchSettings, seed: u64) -> PbaConfig {
    PbaConfig {
        population: s.population,
        epochs: s.epochs,
        exploit_interval: s.exploit_interval,
        seed: derive_seed(seed, &[STREAM_SEARCH]),
    }
}

fn search(
    settings: &SearchSettings,
    seed: u64,
    train: &Dataset,
    batch_size: usize,
    optim: OptimConfig,
    kd: Option<Distill<'_>>,
    init: impl Fn(usize) -> Result<Model>,
) -> Result<SearchOutcome<Model>> {
    let (sub_train, sub_val) = dataio::make_reduced(
        train,
        settings.train_size,
        settings.val_size,
        derive_seed(seed, &[STREAM_SPLIT]),
    )?;
    let cfg = search_config(settings, seed);
    let mut models = Vec::with_capacity(settings.population);
    for t in 0..settings.population {
        models.push(init(t)?);
    }
    let epochs = settings.epochs;
    pba::run_search(
        &cfg,
        |t| models[t].clone(),
        |model, policy, trial, epoch| {
            let sgd = optim.at(epoch, epochs);
            let stream = derive_seed(cfg.seed, &[trial as u64]);
            train_epoch(model, &sub_train, Some(policy), kd, &sgd, batch_size, stream, epoch)?;
            evaluate(model, &sub_val)
        },
    )
}

/// Search the teacher's schedule on a reduced split of `train_set`.
pub fn alpha_search(cfg: &AlphaConfig, train_set: &Dataset) -> Result<SearchOutcome<Model>> {
    info!("teacher search: population {}, {} epochs", cfg.search.population, cfg.search.epochs);
    search(&cfg.search, cfg.seed, train_set, cfg.batch_size, cfg.optim, None, |t| {
        Model::new(cfg.teacher.clone(), None, derive_seed(cfg.seed, &[STREAM_INIT, t as u64]))
    })
}

/// Train a fresh teacher on all of `train_set` under `schedule`.
pub fn alpha_retrain(
    cfg: &AlphaConfig,
    schedule: &Schedule,
    train_set: &Dataset,
    val: &Dataset,
) -> Result<(Model, Vec<EpochLog>)> {
    let mut model = Model::new(cfg.teacher.clone(), None, derive_seed(cfg.seed, &[STREAM_INIT, u64::MAX]))?;
    info!("teacher retrain: {} epochs", cfg.retrain_epochs);
    let log = train(
        &mut model,
        train_set,
        val,
        &TrainSpec {
            epochs: cfg.retrain_epochs,
            batch_size: cfg.batch_size,
            optim: cfg.optim,
            seed: derive_seed(cfg.seed, &[STREAM_RETRAIN]),
            schedule: Some(schedule),
            kd: None,
        },
    )?;
    model.set_mode(Mode::Eval);
    Ok((model, log))
}

/// Teacher search followed by teacher retraining.
pub fn stage_alpha(cfg: &AlphaConfig, train_set: &Dataset, val: &Dataset) -> Result<StageOutput> {
    let outcome = alpha_search(cfg, train_set)?;
    let schedule = outcome.schedule.clone();
    let (model, log) = alpha_retrain(cfg, &schedule, train_set, val)?;
    let accuracy = evaluate(&model, val)?;
    Ok(StageOutput {
        schedule,
        model,
        log,
        accuracy,
        search: outcome,
    })
}

/// A student built per `cfg`: fresh, or a copy of the teacher's weights.
pub fn init_student(cfg: &BetaConfig, teacher: &Model, index: u64) -> Result<Model> {
    let mut m = Model::new(cfg.student.clone(), cfg.quant, derive_seed(cfg.seed, &[STREAM_INIT, index]))?;
    if cfg.init_from_teacher {
        m.init_from(teacher)?;
    }
    Ok(m)
}

fn frozen(teacher: &Model) -> Result<Model> {
    let mut t = teacher.clone();
    t.set_mode(Mode::Eval);
    Ok(t)
}

/// Retrain a student on all of `train` under `schedule` (baseline
/// augmentation only when `None`) with the distillation terms of `cfg`.
pub fn train_student(
    cfg: &BetaConfig,
    teacher: &Model,
    train_set: &Dataset,
    val: &Dataset,
    schedule: Option<&Schedule>,
) -> Result<(Model, Vec<EpochLog>)> {
    cfg.kd.validate()?;
    let t = frozen(teacher)?;
    let mut student = init_student(cfg, &t, u64::MAX)?;
    let log = train(
        &mut student,
        train_set,
        val,
        &TrainSpec {
            epochs: cfg.retrain_epochs,
            batch_size: cfg.batch_size,
            optim: cfg.optim,
            seed: derive_seed(cfg.seed, &[STREAM_RETRAIN]),
            schedule,
            kd: Some(Distill { teacher: &t, cfg: &cfg.kd }),
        },
    )?;
    student.set_mode(Mode::Eval);
    Ok((student, log))
}

/// Search the student's schedule with the teacher frozen and distillation
/// active; fitness comes from the students only.
pub fn beta_search(cfg: &BetaConfig, teacher: &Model, train_set: &Dataset) -> Result<SearchOutcome<Model>> {
    cfg.kd.validate()?;
    let t = frozen(teacher)?;
    info!("student search: population {}, {} epochs", cfg.search.population, cfg.search.epochs);
    search(
        &cfg.search,
        cfg.seed,
        train_set,
        cfg.batch_size,
        cfg.optim,
        Some(Distill { teacher: &t, cfg: &cfg.kd }),
        |i| init_student(cfg, &t, i as u64),
    )
}

/// Student search followed by student retraining under the found schedule.
pub fn stage_beta(cfg: &BetaConfig, teacher: &Model, train_set: &Dataset, val: &Dataset) -> Result<StageOutput> {
    let outcome = beta_search(cfg, teacher, train_set)?;
    let schedule = outcome.schedule.clone();
    info!("student retrain: {} epochs", cfg.retrain_epochs);
    let (model, log) = train_student(cfg, teacher, train_set, val, Some(&schedule))?;
    let accuracy = evaluate(&model, val)?;
    Ok(StageOutput {
        schedule,
        model,
        log,
        accuracy,
        search: outcome,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::Operator;
    use crate::dataio::synth_shapes;
    use crate::kdloss::KdTerms;

    fn tiny_arch() -> ArchDescriptor {
        ArchDescriptor::tapcnn(3, 8, vec![4, 8], 2).unwrap()
    }

    #[test]
    fn lr_steps() {
        let o = OptimConfig::FULL_PRECISION;
        assert_eq!(o.at(0, 10).lr, 0.1);
        assert_eq!(o.at(2, 10).lr, 0.1);
        assert!((o.at(3, 10).lr - 0.01).abs() < 1e-9);
        assert!((o.at(9, 10).lr - 1e-4).abs() < 1e-9);
    }

    #[test]
    fn null_policy_matches_no_policy() {
        let ds = synth_shapes(6, 2, 8, 0).unwrap();
        let a = augment_images(&ds, None, 5, 2).unwrap();
        let b = augment_images(&ds, Some(&PolicyList::null()), 5, 2).unwrap();
        assert_eq!(a, b);
        let mut p = PolicyList::null();
        p.set(Operator::Invert, 0, 10, 0).unwrap();
        assert_ne!(augment_images(&ds, Some(&p), 5, 2).unwrap(), a);
    }

    #[test]
    fn constant_predictor_scores_one_over_c() {
        let ds = synth_shapes(12, 3, 8, 1).unwrap();
        let d = ArchDescriptor::tapcnn(3, 8, vec![4, 8], 3).unwrap();
        let mut m = Model::new(d, None, 0).unwrap();
        m.set_state("head.weight", Tensor::zeros(&[8, 3])).unwrap();
        m.set_state("head.bias", Tensor::new(vec![3], vec![0.0, 1.0, 0.0]).unwrap()).unwrap();
        assert!((evaluate(&m, &ds).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let wrong = synth_shapes(4, 2, 8, 1).unwrap();
        assert!(evaluate(&m, &wrong).is_err());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let ds = synth_shapes(64, 2, 8, 2).unwrap();
        let run = || {
            let mut m = Model::new(tiny_arch(), None, 1).unwrap();
            let log = train(
                &mut m,
                &ds,
                &ds,
                &TrainSpec {
                    epochs: 3,
                    batch_size: 16,
                    optim: OptimConfig::FULL_PRECISION,
                    seed: 9,
                    schedule: None,
                    kd: None,
                },
            )
            .unwrap();
            (m.param_hash(), log)
        };
        let (h1, l1) = run();
        let (h2, l2) = run();
        assert_eq!(h1, h2);
        assert_eq!(l1, l2);
        assert!(l1[2].train_loss < l1[0].train_loss);
    }

    #[test]
    fn kd_leaves_teacher_untouched_and_reports_lambda() {
        let ds = synth_shapes(32, 2, 8, 3).unwrap();
        let mut teacher = Model::new(tiny_arch(), None, 4).unwrap();
        teacher.set_mode(Mode::Eval);
        let before = teacher.param_hash();
        let cfg = BetaConfig {
            student: tiny_arch(),
            quant: Some(QuantConfig::new(2).unwrap()),
            init_from_teacher: true,
            kd: KdConfig { svd_rank: 2, ..KdConfig::ii_kd(4) },
            search: SearchSettings { population: 2, epochs: 2, exploit_interval: 1, train_size: 16, val_size: 8 },
            retrain_epochs: 4,
            batch_size: 8,
            optim: OptimConfig::QUANTIZED,
            seed: 5,
        };
        let (_, log) = train_student(&cfg, &teacher, &ds, &ds, None).unwrap();
        assert_eq!(teacher.param_hash(), before);
        let lambdas: Vec<f64> = log.iter().map(|r| r.lambda).collect();
        assert_eq!(lambdas, vec![0.4, 0.4, 0.2, 0.2]);
        assert!(log.iter().all(|r| r.kd_intra >= 0.0 && r.kd_inter >= 0.0));
    }

    #[test]
    fn without_kd_and_with_null_schedule_reduces_to_plain_training() {
        let ds = synth_shapes(24, 2, 8, 6).unwrap();
        let mut teacher = Model::new(tiny_arch(), None, 4).unwrap();
        teacher.set_mode(Mode::Eval);
        let cfg = BetaConfig {
            student: tiny_arch(),
            quant: Some(QuantConfig::new(4).unwrap()),
            init_from_teacher: true,
            kd: KdConfig { terms: KdTerms::NONE, ..KdConfig::ii_kd(2) },
            search: SearchSettings { population: 2, epochs: 2, exploit_interval: 1, train_size: 12, val_size: 6 },
            retrain_epochs: 2,
            batch_size: 8,
            optim: OptimConfig::QUANTIZED,
            seed: 8,
        };
        let null = Schedule { per_epoch: vec![PolicyList::null(); 2] };
        let (a, la) = train_student(&cfg, &teacher, &ds, &ds, Some(&null)).unwrap();
        let (b, lb) = train_student(&cfg, &teacher, &ds, &ds, None).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        assert_eq!(la, lb);
    }
}
