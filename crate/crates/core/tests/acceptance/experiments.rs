//! The distillation-gain and ablation experiments at a configurable scale.

use std::time::Instant;

use serde_json::{json, Value};
use tgda_core::data::{render_in_memory, Dataset, SyntheticSpec};
use tgda_core::pipeline::{resolve_config, run_ablation, train_student_with, train_teacher, TrainConfig};

use super::{verdict, Outcome};

pub const FULL_7: &str = "TGDA gain at full scale (LRNet-18 + PAM 60 epochs, LRNet-18 120 epochs, 3 seeds): pass --include-ignored";
pub const FULL_8: &str = "ablation ordering at full scale (3 seeds): pass --include-ignored";

pub struct Scale {
    pub name: &'static str,
    pub data: SyntheticSpec,
    pub teacher: Value,
    pub student: Value,
    pub seeds: Vec<u64>,
}

impl Scale {
    /// The default benchmark with the documented epoch counts.
    pub fn full() -> Self {
        Scale {
            name: "full",
            data: SyntheticSpec::default(),
            teacher: json!({"arch": "teacher_pam_lrnet18", "epochs": 60}),
            student: json!({"arch": "lrnet18", "epochs": 120}),
            seeds: vec![0, 1, 2],
        }
    }

    /// Small backbones on an easier, smaller benchmark, sized for a single
    /// CPU core.
    pub fn reduced() -> Self {
        Scale {
            name: "reduced",
            data: SyntheticSpec {
                train_per_class: 100,
                val_per_class: 20,
                test_per_class: 50,
                similarity: 0.3,
                ..SyntheticSpec::default()
            },
            teacher: json!({"arch": "teacher_pam_lrnet_tiny", "epochs": 30}),
            student: json!({"arch": "lrnet_tiny", "epochs": 30}),
            seeds: vec![0, 1, 2],
        }
    }

    fn dataset(&self, seed: u64) -> Dataset {
        let spec = SyntheticSpec { seed, ..self.data.clone() };
        let (m, images) = render_in_memory(&spec).expect("valid synthetic spec");
        Dataset::from_parts(m, images).expect("rendered dataset is consistent")
    }

    fn config(&self, stage: &str, base: &Value, seed: u64, extra: &[String]) -> TrainConfig {
        let mut doc = base.clone();
        let o = doc.as_object_mut().unwrap();
        o.insert("stage".into(), stage.into());
        o.insert("seed".into(), seed.into());
        o.insert("input_size".into(), self.data.image_size.into());
        if stage == "student" {
            o.insert("teacher_checkpoint".into(), "<in-memory>".into());
        }
        resolve_config(Some(doc), extra).expect("valid experiment config")
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pct(v: &[f64]) -> String {
    v.iter().map(|x| format!("{:.1}", 100.0 * x)).collect::<Vec<_>>().join("/")
}

fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn runtime_note(secs: f64, limit_min: Option<f64>) -> (bool, String) {
    let minutes = secs / 60.0;
    match limit_min {
        Some(limit) if cores() >= 8 => (minutes <= limit, format!("{minutes:.1} min (limit {limit} min)")),
        Some(_) => (true, format!("{minutes:.1} min on {} core(s), time limit applies to 8 cores", cores())),
        None => (true, format!("{minutes:.1} min")),
    }
}

/// Mean test top1 of the distilled student against the `beta = 0`
/// baseline over the configured seeds.
pub fn tgda_gain(scale: &Scale) -> Outcome {
    let start = Instant::now();
    let (mut tgda, mut base, mut teach) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in &scale.seeds {
        let ds = scale.dataset(seed);
        let run = || -> tgda_core::Result<(f64, f64, f64)> {
            let t = train_teacher(&scale.config("teacher", &scale.teacher, seed, &[]), &ds, None)?;
            let teacher = t.best.to_model()?;
            let s = train_student_with(&scale.config("student", &scale.student, seed, &[]), &teacher, &ds, None)?;
            let b_cfg = scale.config("student", &scale.student, seed, &["loss.beta=0".into()]);
            let b = train_student_with(&b_cfg, &teacher, &ds, None)?;
            let top1 = |r: &tgda_core::pipeline::RunOutput| r.test_record().map_or(f64::NAN, |m| m.top1);
            Ok((top1(&t), top1(&s), top1(&b)))
        };
        match run() {
            Ok((t, s, b)) => {
                teach.push(t);
                tgda.push(s);
                base.push(b);
            }
            Err(e) => return verdict(false, format!("{} TGDA experiment, seed {seed}: {e}", scale.name)),
        }
    }
    let gain = mean(&tgda) - mean(&base);
    let limit = (scale.name == "full").then_some(60.0);
    let (in_time, time) = runtime_note(start.elapsed().as_secs_f64(), limit);
    verdict(
        gain >= 0.05 && in_time,
        format!(
            "{} TGDA gain {:+.1} points (need +5.0): student {} vs baseline {} test top1 %, teacher {}; {time}",
            scale.name,
            100.0 * gain,
            pct(&tgda),
            pct(&base),
            pct(&teach)
        ),
    )
}

/// Row (d) strictly best and every one-stage row 20 points below it, on
/// seed-averaged test top1.
pub fn ablation(scale: &Scale) -> Outcome {
    let start = Instant::now();
    let mut per_row = vec![Vec::new(); 4];
    for &seed in &scale.seeds {
        let ds = scale.dataset(seed);
        let t = scale.config("teacher", &scale.teacher, seed, &[]);
        let s = scale.config("student", &scale.student, seed, &[]);
        match run_ablation(&t, &s, &ds, "synthetic", None) {
            Ok(rows) => rows.iter().enumerate().for_each(|(i, r)| per_row[i].push(r.test.top1)),
            Err(e) => return verdict(false, format!("{} ablation, seed {seed}: {e}", scale.name)),
        }
    }
    let m: Vec<f64> = per_row.iter().map(|r| mean(r)).collect();
    let d = m[3];
    let ok = m[..3].iter().all(|&x| x < d && d - x >= 0.20);
    let (_, time) = runtime_note(start.elapsed().as_secs_f64(), None);
    verdict(
        ok,
        format!(
            "{} ablation mean test top1 %: a {:.1} b {:.1} c {:.1} d {:.1} (d must lead every one-stage row by 20); per seed a {} b {} c {} d {}; {time}",
            scale.name,
            100.0 * m[0],
            100.0 * m[1],
            100.0 * m[2],
            100.0 * d,
            pct(&per_row[0]),
            pct(&per_row[1]),
            pct(&per_row[2]),
            pct(&per_row[3])
        ),
    )
}
