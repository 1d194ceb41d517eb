use std::fs;
use std::path::PathBuf;

use serde_json::json;
use tgda_core::data::{render_in_memory, Dataset, Split, SyntheticSpec};
use tgda_core::models::{preset, Model};
use tgda_core::pipeline::*;
use tgda_core::{Error, ErrorClass, RngStream, Tensor};

fn dataset(classes: usize, per_class: usize, size: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        num_classes: classes,
        train_per_class: per_class,
        val_per_class: 2,
        test_per_class: 2,
        image_size: size,
        cue_size: 4,
        seed,
        ..SyntheticSpec::default()
    };
    let (m, images) = render_in_memory(&spec).unwrap();
    Dataset::from_parts(m, images).unwrap()
}

fn teacher_cfg(epochs: usize) -> TrainConfig {
    resolve_config(
        Some(json!({
            "stage": "teacher",
            "arch": "teacher_pam_lrnet_tiny",
            "epochs": epochs,
            "batch_size": 4,
            "input_size": 32,
        })),
        &[],
    )
    .unwrap()
}

fn student_cfg(epochs: usize, teacher: &std::path::Path) -> TrainConfig {
    resolve_config(
        Some(json!({
            "stage": "student",
            "arch": "lrnet_tiny",
            "epochs": epochs,
            "batch_size": 4,
            "input_size": 32,
            "teacher_checkpoint": teacher,
        })),
        &[],
    )
    .unwrap()
}

fn tmp(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("tgda-pipeline-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn trained_teacher(ds: &Dataset, dir: &std::path::Path) -> PathBuf {
    let run = train_teacher(&teacher_cfg(1), ds, Some(dir)).unwrap();
    let p = dir.join("best.ckpt");
    assert!(p.exists());
    assert_eq!(run.best.epoch, 1);
    p
}

#[test]
fn identical_runs_write_identical_metrics() {
    let ds = dataset(3, 4, 32, 1);
    let (a, b) = (tmp("det-a"), tmp("det-b"));
    let ta = trained_teacher(&ds, &a);
    let tb = trained_teacher(&ds, &b);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(&ta).unwrap(), fs::read(&tb).unwrap());

    let (sa, sb) = (a.join("student"), b.join("student"));
    train_student(&student_cfg(2, &ta), &ds, Some(&sa)).unwrap();
    train_student(&student_cfg(2, &ta), &ds, Some(&sb)).unwrap();
    let csv = fs::read_to_string(sa.join("metrics.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(sb.join("metrics.csv")).unwrap());
    assert!(csv.starts_with(CSV_HEADER));
    assert!(sa.join("config.json").exists() && sa.join("last.ckpt").exists());
}

#[test]
fn checkpoint_round_trip_preserves_logits_exactly() {
    let arch = preset("teacher_pam_lrnet_tiny", 5, 32).unwrap();
    let model = Model::<f32>::build(&arch, 3).unwrap();
    let ckpt = Checkpoint::from_model(&model, json!({"note": "x"}), 7, Some(RngStream::new(2).state()), json!(null));
    let dir = tmp("ckpt");
    let path = dir.join("m.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.epoch, 7);
    assert_eq!(back.config, json!({"note": "x"}));
    let restored = back.to_model().unwrap();
    let x = RngStream::new(9).normal_tensor::<f32>(&[2, 3, 32, 32], 1.0);
    let (l0, a0) = model.graph.infer_full(&model.params, &x).unwrap();
    let (l1, a1) = restored.graph.infer_full(&restored.params, &x).unwrap();
    assert_eq!(l0.data(), l1.data());
    assert_eq!(a0.unwrap().data(), a1.unwrap().data());
    assert_eq!(restored.params.checksum(), model.params.checksum());
}

#[test]
fn corrupt_and_mismatched_checkpoints_fail() {
    let arch = preset("lrnet_tiny", 4, 32).unwrap();
    let model = Model::<f32>::build(&arch, 0).unwrap();
    let bytes = Checkpoint::from_model(&model, json!({}), 0, None, json!({})).to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Checkpoint(_))));
    let ok = Checkpoint::from_bytes(&bytes).unwrap();
    let other = preset("lrnet_tiny", 5, 32).unwrap();
    assert!(matches!(ok.to_model_as(&other), Err(Error::ArchitectureMismatch(_))));
    assert_eq!(Error::Checkpoint(String::new()).class(), ErrorClass::Data);
}

#[test]
fn teacher_is_frozen_across_student_training() {
    let ds = dataset(3, 4, 32, 2);
    let dir = tmp("frozen");
    let tpath = trained_teacher(&ds, &dir);
    let teacher = Checkpoint::load(&tpath).unwrap().to_model().unwrap();
    let before = teacher.params.checksum();
    train_student_with(&student_cfg(1, &tpath), &teacher, &ds, None).unwrap();
    assert_eq!(teacher.params.checksum(), before);
    verify_frozen(&before, &teacher).unwrap();

    let mut touched = teacher.clone();
    let (_, w) = touched.params.params_mut().next().unwrap();
    w.data_mut()[0] += 1e-3;
    let err = verify_frozen(&before, &touched).unwrap_err();
    assert!(matches!(err, Error::FrozenTeacher { .. }));
    assert_eq!(err.class(), ErrorClass::Numerical);
}

#[test]
fn beta_zero_is_plain_supervised_training() {
    let ds = dataset(3, 4, 32, 3);
    let dir = tmp("beta0");
    let tpath = trained_teacher(&ds, &dir);
    let mut cfg = student_cfg(1, &tpath);
    cfg.loss.beta = 0.0;
    let run = train_student(&cfg, &ds, None).unwrap();
    assert!(run
        .records
        .iter()
        .all(|r| r.loss_kd_org == 0.0 && r.loss_kd_aug == 0.0 && r.loss_ce > 0.0));
}

#[test]
fn self_distillation_starts_at_zero_gap() {
    let ds = dataset(3, 4, 32, 4);
    let dir = tmp("selfkd");
    let tpath = trained_teacher(&ds, &dir);
    let teacher = Checkpoint::load(&tpath).unwrap().to_model().unwrap();
    let student = Checkpoint::load(&tpath).unwrap().to_model().unwrap();
    let set = EvalSet::new(&ds, Split::Val, 32, 8, 1).unwrap();
    let r = evaluate_model(&student, &set, 0, Some((&teacher, 7.0, true))).unwrap();
    // f32 rounding, amplified by tau^2 = 49
    assert!(r.loss_kd_org.abs() < 1e-4, "{}", r.loss_kd_org);

    let mut cfg = student_cfg(1, &tpath);
    cfg.arch = "teacher_pam_lrnet_tiny".into();
    cfg.init_checkpoint = Some(tpath.clone());
    train_student(&cfg, &ds, None).unwrap();
}

fn constant_model(classes: usize, class: usize) -> Model<f32> {
    let arch = preset("lrnet_tiny", classes, 32).unwrap();
    let mut m = Model::<f32>::build(&arch, 0).unwrap();
    m.params.param_mut("head.fc.weight").unwrap().data_mut().fill(0.0);
    let b = m.params.param_mut("head.fc.bias").unwrap();
    b.data_mut().fill(0.0);
    b.data_mut()[class] = 1.0;
    m
}

#[test]
fn constant_predictor_scores_one_over_classes() {
    let ds = dataset(4, 2, 32, 5);
    let m = constant_model(4, 2);
    let ckpt = Checkpoint::from_model(&m, json!({}), 3, None, json!({}));
    let r = evaluate(&ckpt, &ds, Split::Test).unwrap();
    assert_eq!(r.top1, 0.25);
    assert_eq!(r.epoch, 3);
    assert_eq!(r, evaluate(&ckpt, &ds, Split::Test).unwrap());
}

#[test]
fn hand_built_split_matches_manual_count() {
    let mut ds = dataset(3, 2, 32, 6);
    // four test samples labelled 1, 1, 0, 2; the model always answers 1
    let keep: Vec<usize> = ds.manifest.split_indices(Split::Test)[..4].to_vec();
    let mut samples = Vec::new();
    let mut images = Vec::new();
    for (k, (&i, class)) in keep.iter().zip([1, 1, 0, 2]).enumerate() {
        let mut s = ds.manifest.samples[i].clone();
        s.class = class;
        s.path = format!("test/x/{k}.png");
        samples.push(s);
        images.push(ds.images[i].clone());
    }
    ds.manifest.samples = samples;
    let ds = Dataset::from_parts(ds.manifest, images).unwrap();
    let ckpt = Checkpoint::from_model(&constant_model(3, 1), json!({}), 0, None, json!({}));
    let r = evaluate(&ckpt, &ds, Split::Test).unwrap();
    assert_eq!(r.top1, 0.5);
    // logits (0, 1, 0): per-sample ce = ln(2 + e) - [label == 1]
    let ce = (2.0 + std::f64::consts::E).ln() - 0.5;
    assert!((r.loss_ce - ce).abs() < 1e-6);
    assert!(matches!(evaluate(&ckpt, &ds, Split::Val), Err(Error::Data(_))));
}

#[test]
fn epochs_increase_and_best_tracks_validation() {
    let ds = dataset(3, 4, 32, 7);
    let run = train_teacher(&teacher_cfg(3), &ds, None).unwrap();
    for split in [Split::Train, Split::Val] {
        let e: Vec<usize> = run.records.iter().filter(|r| r.split == split).map(|r| r.epoch).collect();
        assert_eq!(e, vec![1, 2, 3]);
    }
    let val: Vec<&MetricsRecord> = run.records.iter().filter(|r| r.split == Split::Val).collect();
    let best = val.iter().find(|r| r.epoch == run.best_epoch()).unwrap();
    assert!(val.iter().filter(|r| r.epoch <= best.epoch).all(|r| r.top1 <= best.top1));
    assert!(val.iter().filter(|r| r.epoch < best.epoch).all(|r| r.top1 < best.top1));
    let test = run.test_record().unwrap();
    assert_eq!(test.epoch, run.best_epoch());
    assert_eq!(run.last.epoch, 3);
}

#[test]
fn non_finite_inputs_abort_with_divergence() {
    let mut ds = dataset(3, 4, 32, 8);
    for img in ds.images.iter_mut() {
        img.data_mut().fill(f32::NAN);
    }
    let err = train_teacher(&teacher_cfg(1), &ds, None).unwrap_err();
    assert!(matches!(err, Error::Divergence { epoch: 1, step: 0, .. }), "{err}");
    assert_eq!(err.class(), ErrorClass::Numerical);
}

#[test]
fn stage_contracts_are_enforced() {
    let ds = dataset(3, 2, 32, 9);
    let mut t = teacher_cfg(1);
    t.arch = "lrnet_tiny".into();
    assert!(matches!(train_teacher(&t, &ds, None), Err(Error::Config(_))));

    let doc = json!({"stage": "student", "arch": "lrnet_tiny", "input_size": 32});
    assert!(matches!(resolve_config(Some(doc), &[]), Err(Error::Config(_))));

    // a teacher for a different class count
    let dir = tmp("mismatch");
    let other = dataset(4, 2, 32, 9);
    let tpath = trained_teacher(&other, &dir);
    let err = train_student(&student_cfg(1, &tpath), &ds, None).unwrap_err();
    assert!(matches!(err, Error::ArchitectureMismatch(_)), "{err}");
    assert!(matches!(
        train_student(&student_cfg(1, &dir.join("missing.ckpt")), &ds, None),
        Err(Error::Io { .. })
    ));
}

#[test]
fn ablation_emits_four_rows() {
    let ds = dataset(3, 2, 32, 10);
    let dir = tmp("ablation");
    let t = teacher_cfg(1);
    let mut s = student_cfg(1, &dir.join("unused.ckpt"));
    s.teacher_checkpoint = None;
    assert!(matches!(run_ablation(&s, &s, &ds, "synthetic", None), Err(Error::Config(_))));
    let rows = run_ablation(&t, &s, &ds, "synthetic", Some(&dir)).unwrap();
    assert_eq!(rows.iter().map(|r| r.label).collect::<Vec<_>>(), ["a", "b", "c", "d"]);
    let csv = fs::read_to_string(dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "row,pam,two_stage,student_to_teacher_loss,synthetic_top1");
    assert!(lines[4].starts_with("d,true,true,false,"));
    assert!(dir.join("d/teacher/best.ckpt").exists() && dir.join("a/metrics.csv").exists());
}

#[test]
fn one_stage_training_updates_both_models() {
    let ds = dataset(3, 2, 32, 11);
    let t = teacher_cfg(1);
    let s = student_cfg(1, &PathBuf::from("unused"));
    let run = train_one_stage(&t, &s, true, &ds, None).unwrap();
    let train = run.records.iter().find(|r| r.split == Split::Train).unwrap();
    assert!(train.loss_kd_org > 0.0 && train.loss_kd_aug > 0.0);
    let x = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
    let m = run.best.to_model().unwrap();
    assert!(m.graph.infer(&m.params, &x).unwrap().is_finite());
}
