//! The four-row component ablation: attention module, training order and
//! a student-to-teacher loss.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Stage, TrainConfig};
use super::train::{
    build_model, concat0, guided_rngs, prepare_batch, scalar, step_lr, take_grads, train_student_with, train_teacher,
    EpochSums, Learner, RunOutput, Tracker,
};
use crate::augment::{guided_batch, GuidedKind, Policy};
use crate::backend::{Tape, Var};
use crate::data::{make_batches, Dataset, Split};
use crate::distill::{ce_label_smoothing, kd_loss, tgda_total_loss};
use crate::error::{Error, Result};
use crate::models::{ArchSpec, AttentionKind, Mode};

/// Recorded as `teacher_checkpoint` of ablation students.
pub const IN_MEMORY_TEACHER: &str = "<in-memory>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub pam: bool,
    pub two_stage: bool,
    pub student_to_teacher: bool,
}

pub const ABLATION_ROWS: [(&str, AblationSetting); 4] = [
    (
        "a",
        AblationSetting {
            pam: false,
            two_stage: false,
            student_to_teacher: false,
        },
    ),
    (
        "b",
        AblationSetting {
            pam: false,
            two_stage: false,
            student_to_teacher: true,
        },
    ),
    (
        "c",
        AblationSetting {
            pam: true,
            two_stage: false,
            student_to_teacher: false,
        },
    ),
    (
        "d",
        AblationSetting {
            pam: true,
            two_stage: true,
            student_to_teacher: false,
        },
    ),
];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: &'static str,
    pub setting: AblationSetting,
    /// Student test record at its best validation epoch.
    pub test: super::MetricsRecord,
}

/// Teacher config with its attention head switched to `kind`.
pub fn with_attention(cfg: &TrainConfig, num_classes: usize, kind: AttentionKind) -> Result<TrainConfig> {
    let mut spec = cfg.arch_spec(num_classes)?;
    match &mut spec {
        ArchSpec::Teacher(t) => t.attention = kind,
        _ => return Err(Error::Config(format!("ablation teacher {} is not a teacher architecture", cfg.arch))),
    }
    let mut out = cfg.clone();
    out.arch_spec = Some(spec);
    Ok(out)
}

/// Teacher and student trained together from scratch. The student sees the
/// same TGDA objective as in stage 2 against the live teacher; the teacher
/// sees cross-entropy on both views, plus `beta * KD(teacher <- student)`
/// when `student_to_teacher` is set.
pub fn train_one_stage(
    teacher_cfg: &TrainConfig,
    student_cfg: &TrainConfig,
    student_to_teacher: bool,
    ds: &Dataset,
    out: Option<&Path>,
) -> Result<RunOutput> {
    teacher_cfg.validate()?;
    student_cfg.validate()?;
    if teacher_cfg.input_size != student_cfg.input_size {
        return Err(Error::Config("teacher and student input sizes differ".into()));
    }
    let cfg = student_cfg;
    let mut teacher = Learner::new(build_model(teacher_cfg, ds, 0)?, teacher_cfg, 0);
    if !teacher.model.graph.arch.is_teacher() {
        return Err(Error::Config(format!("{} does not produce attention maps", teacher_cfg.arch)));
    }
    let mut student = Learner::new(build_model(cfg, ds, 1)?, cfg, 1);
    let w = &cfg.loss;
    let mut tracker = Tracker::new(cfg, ds, out)?;
    let mut step = 0;
    let mut last = None;
    for epoch in 1..=cfg.epochs {
        let batches = make_batches(&ds.manifest, Split::Train, cfg.batch_size, epoch, cfg.seed)?;
        let mut sums = EpochSums::new();
        for idx in &batches {
            let lr_s = step_lr(cfg, &student.opt, step, batches.len());
            let lr_t = step_lr(teacher_cfg, &teacher.opt, step, batches.len());
            let (x, labels) =
                prepare_batch(ds, idx, Policy::Train, cfg.input_size, &cfg.augment, cfg.seed, epoch, cfg.workers)?;
            let n = labels.len();
            let mut tape = Tape::new().with_finite_checks(cfg.finite_checks);
            let tb = teacher.model.params.bind(&mut tape, true);
            let sb = student.model.params.bind(&mut tape, true);
            let vars = |b: &crate::models::Binding<'_, f32>| -> Vec<(String, Var)> {
                b.vars().map(|(n, v)| (n.clone(), *v)).collect()
            };
            let (tvars, svars) = (vars(&tb), vars(&sb));

            let xv = tape.constant(x.clone());
            let t_org = teacher
                .model
                .graph
                .forward_mode(&mut tape, &tb, xv, Mode::Train, Some(&mut teacher.rng))?;
            let maps = tape.value(t_org.attention.expect("checked teacher")).clone();
            let mut rngs = guided_rngs(cfg.seed, epoch, idx);
            let x_aug = guided_batch(&x, &maps, GuidedKind::for_step(step), &cfg.augment, &mut rngs)?;
            let av = tape.constant(x_aug.clone());
            let t_aug = teacher
                .model
                .graph
                .forward_mode(&mut tape, &tb, av, Mode::Train, Some(&mut teacher.rng))?;
            let both = tape.constant(concat0(&x, &x_aug)?);
            let s = student
                .model
                .graph
                .forward_mode(&mut tape, &sb, both, Mode::Train, Some(&mut student.rng))?;
            let s_org = tape.slice(s.logits, 0, 0, n)?;
            let s_aug = tape.slice(s.logits, 0, n, n)?;

            let (s_loss, b) = tgda_total_loss(&mut tape, s_org, s_aug, t_org.logits, t_aug.logits, &labels, w)?;
            let ls = teacher_cfg.loss.label_smoothing;
            let ce_o = ce_label_smoothing(&mut tape, t_org.logits, &labels, ls)?;
            let ce_a = ce_label_smoothing(&mut tape, t_aug.logits, &labels, ls)?;
            let mut t_loss = tape.add(ce_o, ce_a)?;
            if student_to_teacher {
                let kd = kd_loss(&mut tape, t_org.logits, s_org, w.tau, w.kd_tau_squared)?;
                let kd = tape.scale(kd, w.beta)?;
                t_loss = tape.add(t_loss, kd)?;
            }
            let loss = tape.add(s_loss, t_loss)?;
            super::train::check_finite(scalar(&tape, loss), epoch, step)?;
            sums.add(b, tape.value(s_org), &labels);

            let mut g = tape.backward(loss)?;
            let (t_grads, s_grads) = (take_grads(&mut g, &tvars), take_grads(&mut g, &svars));
            drop((tb, sb));
            let tp = &mut teacher.model.params;
            tp.apply_bn_stats(&t_org.bn_stats, teacher_cfg.bn_momentum)?;
            tp.apply_bn_stats(&t_aug.bn_stats, teacher_cfg.bn_momentum)?;
            teacher.opt.step(tp, &t_grads, lr_t)?;
            student.model.params.apply_bn_stats(&s.bn_stats, cfg.bn_momentum)?;
            student.opt.step(&mut student.model.params, &s_grads, lr_s)?;
            step += 1;
        }
        let t = Some((&teacher.model, w.tau, w.kd_tau_squared));
        last = Some(tracker.end_epoch(epoch, sums, &student.model, &student.rng, t)?);
    }
    let t = Some((&teacher.model, w.tau, w.kd_tau_squared));
    tracker.finish(last.expect("at least one epoch"), t)
}

/// Runs one ablation row and returns the student's outcome.
pub fn run_ablation_row(
    setting: AblationSetting,
    teacher_cfg: &TrainConfig,
    student_cfg: &TrainConfig,
    ds: &Dataset,
    out: Option<&Path>,
) -> Result<RunOutput> {
    let kind = if setting.pam { AttentionKind::Pam } else { AttentionKind::Cam };
    let tcfg = with_attention(teacher_cfg, ds.manifest.num_classes(), kind)?;
    if setting.two_stage {
        if setting.student_to_teacher {
            return Err(Error::Config("a student-to-teacher loss needs one-stage training".into()));
        }
        let teacher = train_teacher(&tcfg, ds, out.map(|o| o.join("teacher")).as_deref())?;
        let teacher = teacher.best.to_model()?;
        train_student_with(student_cfg, &teacher, ds, out.map(|o| o.join("student")).as_deref())
    } else {
        train_one_stage(&tcfg, student_cfg, setting.student_to_teacher, ds, out)
    }
}

/// All four rows; `out/<label>/` receives each row's artifacts and
/// `out/ablation.csv` the table.
pub fn run_ablation(
    teacher_cfg: &TrainConfig,
    student_cfg: &TrainConfig,
    ds: &Dataset,
    dataset_name: &str,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    if teacher_cfg.stage != Stage::Teacher || student_cfg.stage != Stage::Student {
        return Err(Error::Config("ablation needs a teacher config and a student config".into()));
    }
    // every row trains its own teacher; the student never loads one from disk
    let mut student_cfg = student_cfg.clone();
    student_cfg.teacher_checkpoint = Some(IN_MEMORY_TEACHER.into());
    let mut rows = Vec::new();
    for (label, setting) in ABLATION_ROWS {
        let dir = out.map(|o| o.join(label));
        let run = run_ablation_row(setting, teacher_cfg, &student_cfg, ds, dir.as_deref())?;
        let test = run
            .test_record()
            .cloned()
            .ok_or_else(|| Error::Data("ablation needs a non-empty test split".into()))?;
        log::info!("ablation row {label}: test top1 {:.4}", test.top1);
        rows.push(AblationRow { label, setting, test });
    }
    if let Some(o) = out {
        let p = o.join("ablation.csv");
        std::fs::write(&p, ablation_csv(&rows, dataset_name)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow], dataset_name: &str) -> String {
    let mut s = format!("row,pam,two_stage,student_to_teacher_loss,{dataset_name}_top1\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.label, r.setting.pam, r.setting.two_stage, r.setting.student_to_teacher, r.test.top1
        )
        .unwrap();
    }
    s
}
