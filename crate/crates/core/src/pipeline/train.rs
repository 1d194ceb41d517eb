use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::{Stage, TrainConfig};
use super::metrics::{top1, write_metrics_csv, MetricsRecord};
use super::optim::{lr_factor, Optimizer};
use crate::augment::{guided_batch, standard_augment, AugmentConfig, GuidedKind, Policy};
use crate::backend::{Gradients, RngStream, Tape, Tensor, Var};
use crate::data::{make_batches, Dataset, Split};
use crate::distill::{ce_label_smoothing, kd_loss, tgda_total_loss, LossBreakdown};
use crate::error::{Error, Result};
use crate::models::{Mode, Model};

/// Everything a finished stage produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Parameters at the best validation epoch (or the last epoch when
    /// there is no validation split).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub records: Vec<MetricsRecord>,
    pub config: TrainConfig,
}

impl RunOutput {
    pub fn best_epoch(&self) -> usize {
        self.best.epoch
    }

    pub fn test_record(&self) -> Option<&MetricsRecord> {
        self.records.iter().find(|r| r.split == Split::Test)
    }
}

/// Writes artifacts into `out` when given: `config.json`, `metrics.csv`,
/// `best.ckpt` and `last.ckpt`.
#[derive(Clone, Debug, Default)]
pub struct RunDir(pub Option<PathBuf>);

impl RunDir {
    pub fn new(dir: Option<&Path>) -> Result<Self> {
        if let Some(d) = dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(RunDir(dir.map(Path::to_path_buf)))
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        if let Some(d) = &self.0 {
            let p = d.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn config(&self, cfg: &TrainConfig) -> Result<()> {
        self.write("config.json", serde_json::to_string_pretty(cfg)?.as_bytes())
    }

    pub fn metrics(&self, records: &[MetricsRecord]) -> Result<()> {
        if let Some(d) = &self.0 {
            write_metrics_csv(&d.join("metrics.csv"), records)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        if self.0.is_some() {
            self.write(name, &ckpt.to_bytes()?)?;
        }
        Ok(())
    }
}

/// A model with its optimizer and the stream driving stochastic depth.
pub(crate) struct Learner {
    pub model: Model<f32>,
    pub opt: Optimizer,
    pub rng: RngStream,
}

impl Learner {
    pub fn new(model: Model<f32>, cfg: &TrainConfig, salt: u64) -> Self {
        Learner {
            model,
            opt: Optimizer::new(cfg.optimizer.clone()),
            rng: RngStream::derive(cfg.seed, &[0xD0, salt]),
        }
    }
}

pub(crate) fn concat0(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::dim("concat0", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

pub(crate) fn take_grads(g: &mut Gradients<f32>, vars: &[(String, Var)]) -> BTreeMap<String, Tensor<f32>> {
    vars.iter()
        .filter_map(|(n, v)| g.take(*v).map(|t| (n.clone(), t)))
        .collect()
}

pub(crate) fn grads_of(tape: &mut Tape<f32>, loss: Var, vars: &[(String, Var)]) -> Result<BTreeMap<String, Tensor<f32>>> {
    Ok(take_grads(&mut tape.backward(loss)?, vars))
}

pub(crate) fn scalar(tape: &Tape<f32>, v: Var) -> f64 {
    tape.value(v).item() as f64
}

pub(crate) fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, step, loss })
    }
}

/// Per-sample stream for data preparation: `(seed, epoch, sample, purpose)`.
pub(crate) fn sample_rng(seed: u64, epoch: usize, sample: usize, purpose: u64) -> RngStream {
    RngStream::derive(seed, &[epoch as u64, sample as u64, purpose])
}

/// Runs `f` over `0..n`, on `workers` threads when more than one. Results
/// keep their index order.
fn ordered_map<R: Send>(n: usize, workers: usize, f: impl Fn(usize) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

/// Stacks the preprocessed images of `indices` into `(N, 3, S, S)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn prepare_batch(
    ds: &Dataset,
    indices: &[usize],
    policy: Policy,
    size: usize,
    aug: &AugmentConfig,
    seed: u64,
    epoch: usize,
    workers: usize,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let m = &ds.manifest;
    let views = ordered_map(indices.len(), workers, |k| {
        let i = indices[k];
        let mut rng = sample_rng(seed, epoch, i, 0);
        standard_augment(&ds.images[i], policy, size, &m.mean, &m.std, aug, &mut rng)
    })?;
    let labels = indices.iter().map(|&i| ds.label(i)).collect();
    Ok((Tensor::stack(&views)?, labels))
}

pub(crate) fn guided_rngs(seed: u64, epoch: usize, indices: &[usize]) -> Vec<RngStream> {
    indices.iter().map(|&i| sample_rng(seed, epoch, i, 1)).collect()
}

/// Preprocessed evaluation batches of one split.
pub struct EvalSet {
    pub split: Split,
    pub batches: Vec<(Tensor<f32>, Vec<usize>)>,
}

impl EvalSet {
    pub fn new(ds: &Dataset, split: Split, size: usize, batch_size: usize, workers: usize) -> Result<Self> {
        let aug = AugmentConfig::default();
        let batches = make_batches(&ds.manifest, split, batch_size, 0, 0)?
            .iter()
            .map(|idx| prepare_batch(ds, idx, Policy::Eval, size, &aug, 0, 0, workers))
            .collect::<Result<_>>()?;
        Ok(EvalSet { split, batches })
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Eval-mode top-1, unsmoothed cross-entropy and (with a teacher) the
/// distillation gap on original images.
pub fn evaluate_model(
    model: &Model<f32>,
    set: &EvalSet,
    epoch: usize,
    teacher: Option<(&Model<f32>, f64, bool)>,
) -> Result<MetricsRecord> {
    if set.is_empty() {
        return Err(Error::Data(format!("split {} is empty", set.split.as_str())));
    }
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    let (mut ce_sum, mut kd_sum) = (0.0, 0.0);
    for (x, y) in &set.batches {
        let logits = model.graph.infer(&model.params, x)?;
        let mut tape = Tape::<f32>::new();
        let lv = tape.constant(logits.clone());
        let ce = ce_label_smoothing(&mut tape, lv, y, 0.0)?;
        ce_sum += scalar(&tape, ce) * y.len() as f64;
        if let Some((t, tau, tau_sq)) = teacher {
            let tl = t.graph.infer(&t.params, x)?;
            let tv = tape.constant(tl);
            let kd = kd_loss(&mut tape, lv, tv, tau, tau_sq)?;
            kd_sum += scalar(&tape, kd) * y.len() as f64;
        }
        preds.extend(logits.argmax_rows());
        labels.extend_from_slice(y);
    }
    let n = labels.len() as f64;
    Ok(MetricsRecord {
        epoch,
        split: set.split,
        top1: top1(&preds, &labels),
        loss_ce: ce_sum / n,
        loss_kd_org: kd_sum / n,
        loss_kd_aug: 0.0,
        wall_time_s: 0.0,
    })
}

/// Eval-mode metrics of a checkpoint on one split.
pub fn evaluate(ckpt: &Checkpoint, ds: &Dataset, split: Split) -> Result<MetricsRecord> {
    let model = ckpt.to_model()?;
    check_task(&model, ds, "checkpoint")?;
    let set = EvalSet::new(ds, split, model.graph.input_size, 64, 1)?;
    let mut r = evaluate_model(&model, &set, ckpt.epoch, None)?;
    r.epoch = ckpt.epoch;
    Ok(r)
}

fn check_task(model: &Model<f32>, ds: &Dataset, what: &str) -> Result<()> {
    let classes = ds.manifest.num_classes();
    if model.graph.num_classes != classes {
        return Err(Error::ArchitectureMismatch(format!(
            "{what} has {} classes, dataset has {classes}",
            model.graph.num_classes
        )));
    }
    if model.graph.input_size > ds.manifest.image_size {
        return Err(Error::Geometry {
            op: "evaluate",
            detail: format!(
                "{what} expects {0}x{0} inputs, dataset images are {1}x{1}",
                model.graph.input_size, ds.manifest.image_size
            ),
        });
    }
    Ok(())
}

/// Fresh model for `cfg`, optionally warm-started.
pub(crate) fn build_model(cfg: &TrainConfig, ds: &Dataset, salt: u64) -> Result<Model<f32>> {
    let spec = cfg.arch_spec(ds.manifest.num_classes())?;
    let model = match &cfg.init_checkpoint {
        Some(p) => Checkpoint::load(p)?.to_model_as(&spec)?,
        None => Model::build(&spec, crate::backend::derive_seed(cfg.seed, &[0x1417, salt]))?,
    };
    check_task(&model, ds, "model")?;
    Ok(model)
}

/// Epoch bookkeeping shared by every training loop.
pub(crate) struct Tracker<'a> {
    pub cfg: &'a TrainConfig,
    pub dir: RunDir,
    pub start: Instant,
    pub records: Vec<MetricsRecord>,
    pub best_top1: Option<f64>,
    pub best: Option<Checkpoint>,
    pub val: EvalSet,
    pub test: EvalSet,
}

pub(crate) struct EpochSums {
    pub breakdown: LossBreakdown,
    pub samples: usize,
    pub preds: Vec<usize>,
    pub labels: Vec<usize>,
}

impl EpochSums {
    pub fn new() -> Self {
        EpochSums {
            breakdown: LossBreakdown::default(),
            samples: 0,
            preds: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn add(&mut self, b: LossBreakdown, logits: &Tensor<f32>, labels: &[usize]) {
        let n = labels.len() as f64;
        self.breakdown.ce += b.ce * n;
        self.breakdown.kd_org += b.kd_org * n;
        self.breakdown.kd_aug += b.kd_aug * n;
        self.samples += labels.len();
        self.preds.extend(logits.argmax_rows());
        self.labels.extend_from_slice(labels);
    }
}

impl<'a> Tracker<'a> {
    pub fn new(cfg: &'a TrainConfig, ds: &Dataset, out: Option<&Path>) -> Result<Self> {
        let dir = RunDir::new(out)?;
        dir.config(cfg)?;
        let eval = |s| EvalSet::new(ds, s, cfg.input_size, cfg.batch_size.max(64), cfg.workers);
        Ok(Tracker {
            cfg,
            dir,
            start: Instant::now(),
            records: Vec::new(),
            best_top1: None,
            best: None,
            val: eval(Split::Val)?,
            test: eval(Split::Test)?,
        })
    }

    fn wall(&self) -> f64 {
        if self.cfg.log_wall_time {
            self.start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    fn ckpt(&self, model: &Model<f32>, epoch: usize, rng: &RngStream, metrics: &MetricsRecord) -> Result<Checkpoint> {
        Ok(Checkpoint::from_model(
            model,
            serde_json::to_value(self.cfg)?,
            epoch,
            Some(rng.state()),
            serde_json::to_value(metrics)?,
        ))
    }

    /// Records an epoch, updates the best checkpoint and rewrites artifacts.
    pub fn end_epoch(
        &mut self,
        epoch: usize,
        sums: EpochSums,
        model: &Model<f32>,
        rng: &RngStream,
        teacher: Option<(&Model<f32>, f64, bool)>,
    ) -> Result<Checkpoint> {
        let n = sums.samples.max(1) as f64;
        let train = MetricsRecord {
            epoch,
            split: Split::Train,
            top1: top1(&sums.preds, &sums.labels),
            loss_ce: sums.breakdown.ce / n,
            loss_kd_org: sums.breakdown.kd_org / n,
            loss_kd_aug: sums.breakdown.kd_aug / n,
            wall_time_s: self.wall(),
        };
        self.records.push(train.clone());
        let selection = if self.val.is_empty() {
            train
        } else {
            let mut v = evaluate_model(model, &self.val, epoch, teacher)?;
            v.wall_time_s = self.wall();
            self.records.push(v.clone());
            v
        };
        let last = self.ckpt(model, epoch, rng, &selection)?;
        let improved = self.val.is_empty() || self.best_top1.is_none_or(|b| selection.top1 > b);
        if improved {
            self.best_top1 = Some(selection.top1);
            self.best = Some(last.clone());
            self.dir.checkpoint("best.ckpt", &last)?;
        }
        self.dir.checkpoint("last.ckpt", &last)?;
        self.dir.metrics(&self.records)?;
        log::info!(
            "epoch {epoch}: {} top1 {:.4} ce {:.4}",
            selection.split.as_str(),
            selection.top1,
            selection.loss_ce
        );
        Ok(last)
    }

    /// Evaluates the best checkpoint on the test split and finalizes.
    pub fn finish(mut self, last: Checkpoint, teacher: Option<(&Model<f32>, f64, bool)>) -> Result<RunOutput> {
        let best = self.best.take().unwrap_or_else(|| last.clone());
        if !self.test.is_empty() {
            let model = best.to_model()?;
            let mut t = evaluate_model(&model, &self.test, best.epoch, teacher)?;
            t.wall_time_s = self.wall();
            self.records.push(t);
            self.dir.metrics(&self.records)?;
        }
        Ok(RunOutput {
            best,
            last,
            records: self.records,
            config: self.cfg.clone(),
        })
    }
}

pub(crate) fn step_lr(cfg: &TrainConfig, opt: &Optimizer, step: usize, steps_per_epoch: usize) -> f64 {
    let total = cfg.epochs * steps_per_epoch;
    let warmup = (cfg.warmup_epochs() * steps_per_epoch as f64).round() as usize;
    opt.base_lr() * lr_factor(&cfg.schedule, warmup, step, total)
}

fn require_stage(cfg: &TrainConfig, stage: Stage) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != stage {
        return Err(Error::Config(format!("expected a {stage:?} config, got {:?}", cfg.stage)));
    }
    Ok(())
}

/// Fails unless `store`'s checksum still equals `before`.
pub fn verify_frozen(before: &str, model: &Model<f32>) -> Result<()> {
    let now = model.params.checksum();
    if now == before {
        Ok(())
    } else {
        Err(Error::FrozenTeacher {
            before: before.to_string(),
            after: now,
        })
    }
}

/// Stage 1: the attention teacher, trained with cross-entropy on original
/// images and on crop/drop views built from its own current attention.
pub fn train_teacher(cfg: &TrainConfig, ds: &Dataset, out: Option<&Path>) -> Result<RunOutput> {
    require_stage(cfg, Stage::Teacher)?;
    let mut learner = Learner::new(build_model(cfg, ds, 0)?, cfg, 0);
    if !learner.model.graph.arch.is_teacher() {
        return Err(Error::Config(format!(
            "teacher stage needs an attention-producing architecture (teacher_pam_* or teacher_cam_*), got {}",
            cfg.arch
        )));
    }
    let mut tracker = Tracker::new(cfg, ds, out)?;
    let mut step = 0;
    let mut last = None;
    for epoch in 1..=cfg.epochs {
        let batches = make_batches(&ds.manifest, Split::Train, cfg.batch_size, epoch, cfg.seed)?;
        let mut sums = EpochSums::new();
        for idx in &batches {
            let lr = step_lr(cfg, &learner.opt, step, batches.len());
            let (x, labels) =
                prepare_batch(ds, idx, Policy::Train, cfg.input_size, &cfg.augment, cfg.seed, epoch, cfg.workers)?;
            let mut tape = Tape::new().with_finite_checks(cfg.finite_checks);
            let bind = learner.model.params.bind(&mut tape, true);
            let vars: Vec<(String, Var)> = bind.vars().map(|(n, v)| (n.clone(), *v)).collect();
            let graph = &learner.model.graph;
            let xv = tape.constant(x.clone());
            let org = graph.forward_mode(&mut tape, &bind, xv, Mode::Train, Some(&mut learner.rng))?;
            let maps = tape.value(org.attention.expect("teacher heads produce attention")).clone();
            let ce_org = ce_label_smoothing(&mut tape, org.logits, &labels, cfg.loss.label_smoothing)?;
            check_finite(scalar(&tape, ce_org), epoch, step)?;
            let mut rngs = guided_rngs(cfg.seed, epoch, idx);
            let x_aug = guided_batch(&x, &maps, GuidedKind::for_step(step), &cfg.augment, &mut rngs)?;
            let av = tape.constant(x_aug);
            let aug = graph.forward_mode(&mut tape, &bind, av, Mode::Train, Some(&mut learner.rng))?;
            let ce_aug = ce_label_smoothing(&mut tape, aug.logits, &labels, cfg.loss.label_smoothing)?;
            let total = tape.add(ce_org, ce_aug)?;
            let loss = tape.scale(total, cfg.loss.alpha)?;
            let value = scalar(&tape, loss);
            check_finite(value, epoch, step)?;
            let b = LossBreakdown {
                ce: scalar(&tape, ce_org),
                ..Default::default()
            };
            sums.add(b, tape.value(org.logits), &labels);
            let grads = grads_of(&mut tape, loss, &vars)?;
            drop(bind);
            let p = &mut learner.model.params;
            p.apply_bn_stats(&org.bn_stats, cfg.bn_momentum)?;
            p.apply_bn_stats(&aug.bn_stats, cfg.bn_momentum)?;
            learner.opt.step(p, &grads, lr)?;
            step += 1;
        }
        last = Some(tracker.end_epoch(epoch, sums, &learner.model, &learner.rng, None)?);
    }
    tracker.finish(last.expect("at least one epoch"), None)
}

/// Loads the frozen teacher named by a student config.
pub fn load_teacher(cfg: &TrainConfig, ds: &Dataset) -> Result<Model<f32>> {
    let path = cfg
        .teacher_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("student stage requires teacher_checkpoint".into()))?;
    let teacher = Checkpoint::load(path)?.to_model()?;
    check_task(&teacher, ds, "teacher")?;
    if teacher.graph.input_size != cfg.input_size {
        return Err(Error::ArchitectureMismatch(format!(
            "teacher input size {} differs from student input size {}",
            teacher.graph.input_size, cfg.input_size
        )));
    }
    if !teacher.graph.arch.is_teacher() {
        return Err(Error::ArchitectureMismatch(
            "teacher checkpoint does not produce attention maps".into(),
        ));
    }
    Ok(teacher)
}

/// Stage 2: a student supervised by the frozen teacher on original images
/// and on one attention-guided view per image. With `beta = 0` the teacher
/// is not consulted and this is plain supervised training.
pub fn train_student(cfg: &TrainConfig, ds: &Dataset, out: Option<&Path>) -> Result<RunOutput> {
    require_stage(cfg, Stage::Student)?;
    let teacher = load_teacher(cfg, ds)?;
    train_student_with(cfg, &teacher, ds, out)
}

/// [`train_student`] with an in-memory teacher.
pub fn train_student_with(cfg: &TrainConfig, teacher: &Model<f32>, ds: &Dataset, out: Option<&Path>) -> Result<RunOutput> {
    require_stage(cfg, Stage::Student)?;
    let frozen = teacher.params.checksum();
    let mut learner = Learner::new(build_model(cfg, ds, 1)?, cfg, 1);
    let distill = cfg.loss.beta > 0.0;
    let teacher_ref = Some((teacher, cfg.loss.tau, cfg.loss.kd_tau_squared));
    let mut tracker = Tracker::new(cfg, ds, out)?;
    let mut step = 0;
    let mut last = None;
    for epoch in 1..=cfg.epochs {
        verify_frozen(&frozen, teacher)?;
        let batches = make_batches(&ds.manifest, Split::Train, cfg.batch_size, epoch, cfg.seed)?;
        let mut sums = EpochSums::new();
        for idx in &batches {
            let lr = step_lr(cfg, &learner.opt, step, batches.len());
            let (x, labels) =
                prepare_batch(ds, idx, Policy::Train, cfg.input_size, &cfg.augment, cfg.seed, epoch, cfg.workers)?;
            let n = labels.len();
            let mut tape = Tape::new().with_finite_checks(cfg.finite_checks);
            let bind = learner.model.params.bind(&mut tape, true);
            let vars: Vec<(String, Var)> = bind.vars().map(|(n, v)| (n.clone(), *v)).collect();
            let graph = &learner.model.graph;
            let (loss, b, s_org, stats) = if distill {
                let (t_org, maps) = teacher.graph.infer_full(&teacher.params, &x)?;
                let maps = maps.expect("teacher verified to produce attention");
                let mut rngs = guided_rngs(cfg.seed, epoch, idx);
                let x_aug = guided_batch(&x, &maps, GuidedKind::for_step(step), &cfg.augment, &mut rngs)?;
                let t_aug = teacher.graph.infer(&teacher.params, &x_aug)?;
                let xv = tape.constant(concat0(&x, &x_aug)?);
                let out = graph.forward_mode(&mut tape, &bind, xv, Mode::Train, Some(&mut learner.rng))?;
                let s_org = tape.slice(out.logits, 0, 0, n)?;
                let s_aug = tape.slice(out.logits, 0, n, n)?;
                let (to, ta) = (tape.constant(t_org), tape.constant(t_aug));
                let (loss, b) = tgda_total_loss(&mut tape, s_org, s_aug, to, ta, &labels, &cfg.loss)?;
                (loss, b, s_org, out.bn_stats)
            } else {
                let xv = tape.constant(x);
                let out = graph.forward_mode(&mut tape, &bind, xv, Mode::Train, Some(&mut learner.rng))?;
                let ce = ce_label_smoothing(&mut tape, out.logits, &labels, cfg.loss.label_smoothing)?;
                let b = LossBreakdown {
                    ce: scalar(&tape, ce),
                    ..Default::default()
                };
                (tape.scale(ce, cfg.loss.alpha)?, b, out.logits, out.bn_stats)
            };
            check_finite(scalar(&tape, loss), epoch, step)?;
            sums.add(b, tape.value(s_org), &labels);
            let grads = grads_of(&mut tape, loss, &vars)?;
            drop(bind);
            learner.model.params.apply_bn_stats(&stats, cfg.bn_momentum)?;
            learner.opt.step(&mut learner.model.params, &grads, lr)?;
            step += 1;
        }
        let t = if distill { teacher_ref } else { None };
        last = Some(tracker.end_epoch(epoch, sums, &learner.model, &learner.rng, t)?);
    }
    verify_frozen(&frozen, teacher)?;
    let t = if distill { teacher_ref } else { None };
    tracker.finish(last.expect("at least one epoch"), t)
}
