use std::collections::BTreeMap;

use super::config::{OptimizerConfig, ScheduleConfig};
use crate::backend::Tensor;
use crate::error::{Error, Result};
use crate::models::ParamStore;

/// Learning-rate multiplier at `step` of `total` steps.
pub fn lr_factor(schedule: &ScheduleConfig, warmup_steps: usize, step: usize, total: usize) -> f64 {
    if step < warmup_steps {
        return (step + 1) as f64 / warmup_steps as f64;
    }
    match schedule {
        ScheduleConfig::Cosine { .. } => {
            let span = total.saturating_sub(warmup_steps).max(1);
            let t = (step - warmup_steps) as f64 / span as f64;
            0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
        }
        ScheduleConfig::Step { milestones, gamma, .. } => {
            let progress = step as f64 / total.max(1) as f64;
            gamma.powi(milestones.iter().filter(|&&m| progress >= m).count() as i32)
        }
    }
}

/// Per-tensor optimizer state, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: BTreeMap<String, Vec<f32>>,
    second: BTreeMap<String, Vec<f32>>,
    steps: u64,
}

/// Weight decay skips vectors and scalars (biases, norm affines, layer
/// scales).
fn decays(t: &Tensor<f32>) -> bool {
    t.ndim() >= 2
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Optimizer {
            cfg,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn base_lr(&self) -> f64 {
        self.cfg.lr()
    }

    /// One update of every parameter named in `grads` at learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        self.steps += 1;
        for (name, g) in grads {
            let p = params.param_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let decay = decays(p);
            match self.cfg {
                OptimizerConfig::Adamw {
                    weight_decay,
                    betas,
                    eps,
                    ..
                } => {
                    let n = p.numel();
                    let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let (b1, b2) = (betas[0], betas[1]);
                    let c1 = 1.0 - b1.powi(self.steps as i32);
                    let c2 = 1.0 - b2.powi(self.steps as i32);
                    let wd = if decay { lr * weight_decay } else { 0.0 };
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gi = gi as f64;
                        *mi = (b1 * *mi as f64 + (1.0 - b1) * gi) as f32;
                        *vi = (b2 * *vi as f64 + (1.0 - b2) * gi * gi) as f32;
                        let mhat = *mi as f64 / c1;
                        let vhat = *vi as f64 / c2;
                        let wf = *w as f64;
                        *w = (wf - wd * wf - lr * mhat / (vhat.sqrt() + eps)) as f32;
                    }
                }
                OptimizerConfig::Sgd {
                    momentum,
                    weight_decay,
                    ..
                } => {
                    let n = p.numel();
                    let buf = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let wd = if decay { weight_decay } else { 0.0 };
                    for ((w, &gi), b) in p.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                        let d = gi as f64 + wd * *w as f64;
                        *b = (momentum * *b as f64 + d) as f32;
                        *w = (*w as f64 - lr * *b as f64) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_warms_up_then_decays() {
        let s = ScheduleConfig::Cosine { warmup_epochs: None };
        assert_eq!(lr_factor(&s, 4, 0, 20), 0.25);
        assert_eq!(lr_factor(&s, 4, 3, 20), 1.0);
        assert_eq!(lr_factor(&s, 4, 4, 20), 1.0);
        assert!((lr_factor(&s, 4, 12, 20) - 0.5).abs() < 1e-12);
        assert!(lr_factor(&s, 4, 19, 20) < 0.01);
    }

    #[test]
    fn step_schedule_decays_at_milestones() {
        let s = ScheduleConfig::Step {
            warmup_epochs: Some(0.0),
            milestones: vec![0.6, 0.8],
            gamma: 0.1,
        };
        assert_eq!(lr_factor(&s, 0, 59, 100), 1.0);
        assert!((lr_factor(&s, 0, 60, 100) - 0.1).abs() < 1e-12);
        assert!((lr_factor(&s, 0, 85, 100) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert_param("w", Tensor::from_vec(vec![1.0f32, -1.0])).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::Adamw {
            lr: 0.1,
            weight_decay: 0.0,
            betas: [0.9, 0.999],
            eps: 1e-8,
        });
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![3.0f32, -0.5]))]);
        opt.step(&mut store, &grads, 0.1).unwrap();
        let w = store.param("w").unwrap().data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let mut store = ParamStore::new();
        store.insert_param("w", Tensor::<f32>::new(vec![1, 1], vec![2.0]).unwrap()).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::Sgd {
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.1,
        });
        let g = BTreeMap::from([("w".to_string(), Tensor::<f32>::new(vec![1, 1], vec![1.0]).unwrap())]);
        opt.step(&mut store, &g, 0.5).unwrap();
        // d = 1 + 0.1 * 2 = 1.2; w = 2 - 0.6
        assert!((store.param("w").unwrap().data()[0] - 1.4).abs() < 1e-6);
        opt.step(&mut store, &g, 0.5).unwrap();
        // d = 1.14; buf = 1.08 + 1.14 = 2.22; w = 1.4 - 1.11
        assert!((store.param("w").unwrap().data()[0] - 0.29).abs() < 1e-5);
    }
}
