//! Finite-difference checks of every differentiable primitive, the model
//! building blocks and the training losses, in f64.

use crate::backend::{grad_check, RngStream, Tape, Tensor, Var};
use crate::distill::{ce_label_smoothing, kd_loss, tgda_total_loss, LossWeights};
use crate::error::{Error, Result};
use crate::models::graph::{bilinear_attention_pool, residual_branch};
use crate::models::Mode;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-5;

type CaseFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    f: CaseFn,
}

#[derive(Clone, Debug)]
pub struct GradResult {
    pub name: &'static str,
    /// Largest relative error; NaN when the case could not be evaluated.
    pub max_rel_error: f64,
    /// Why the case failed, if it did.
    pub failure: Option<String>,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Contracts a tensor output against fixed pseudo-random weights so every
/// output element gets a distinct upstream gradient.
fn project(t: &mut Tape<f64>, y: Var, salt: u64) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = RngStream::derive(0x6A7D, &[salt]).normal_tensor::<f64>(&shape, 1.0);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

/// A case whose tensor output is projected to a scalar.
fn proj(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> GradCase {
    let salt = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    case(name, inputs, move |t, v| {
        let y = f(t, v)?;
        project(t, y, salt)
    })
}

pub fn suite() -> Vec<GradCase> {
    let mut rng = RngStream::new(20);
    let mut n = |shape: &[usize]| rng.normal_tensor::<f64>(shape, 1.0);
    let pos = |t: Tensor<f64>| t.map(|v| v.abs() + 0.5);
    let labels = vec![0usize, 2, 1];
    vec![
        proj("add", vec![n(&[2, 3]), n(&[2, 3])], |t, v| t.add(v[0], v[1])),
        proj("add_broadcast", vec![n(&[2, 3]), n(&[1, 3])], |t, v| t.add(v[0], v[1])),
        proj("sub", vec![n(&[2, 3]), n(&[2, 1])], |t, v| t.sub(v[0], v[1])),
        proj("mul", vec![n(&[2, 3]), n(&[2, 3])], |t, v| t.mul(v[0], v[1])),
        proj("div", vec![n(&[2, 3]), pos(n(&[1, 3]))], |t, v| t.div(v[0], v[1])),
        proj("scale", vec![n(&[4])], |t, v| t.scale(v[0], -1.7)),
        proj("add_scalar", vec![n(&[4])], |t, v| t.add_scalar(v[0], 0.3)),
        proj("relu", vec![n(&[3, 4])], |t, v| t.relu(v[0])),
        proj("gelu", vec![n(&[3, 4])], |t, v| t.gelu(v[0])),
        proj("exp", vec![n(&[5])], |t, v| t.exp(v[0])),
        proj("ln", vec![pos(n(&[5]))], |t, v| t.ln(v[0])),
        proj("sqrt", vec![pos(n(&[5]))], |t, v| t.sqrt(v[0])),
        proj("signed_sqrt", vec![n(&[6]).map(|v| v + v.signum() * 0.2)], |t, v| t.signed_sqrt(v[0], 1e-3)),
        case("sum", vec![n(&[2, 3])], |t, v| t.sum(v[0])),
        case("mean", vec![n(&[2, 3])], |t, v| t.mean(v[0])),
        proj("sum_axes", vec![n(&[2, 3, 4])], |t, v| t.sum_axes(v[0], &[0, 2], false)),
        proj("mean_axes", vec![n(&[2, 3, 4])], |t, v| t.mean_axes(v[0], &[1], true)),
        proj("global_avg_pool2d", vec![n(&[2, 3, 3, 2])], |t, v| t.global_avg_pool2d(v[0])),
        proj("token_mean_pool", vec![n(&[2, 5, 3])], |t, v| t.token_mean_pool(v[0], 2)),
        proj("reshape", vec![n(&[2, 6])], |t, v| t.reshape(v[0], &[3, 4])),
        proj("permute", vec![n(&[2, 3, 4])], |t, v| t.permute(v[0], &[2, 0, 1])),
        proj("transpose", vec![n(&[3, 4])], |t, v| t.transpose(v[0])),
        proj("expand", vec![n(&[1, 3, 1])], |t, v| t.expand(v[0], &[2, 3, 4])),
        proj("concat", vec![n(&[2, 3]), n(&[2, 2])], |t, v| t.concat(&[v[0], v[1]], 1)),
        proj("slice", vec![n(&[4, 3])], |t, v| t.slice(v[0], 0, 1, 2)),
        proj("matmul", vec![n(&[2, 3, 4]), n(&[2, 4, 2])], |t, v| t.matmul(v[0], v[1])),
        proj("matmul_t", vec![n(&[4, 3]), n(&[2, 4])], |t, v| t.matmul_t(v[0], v[1], true, true)),
        proj("linear", vec![n(&[2, 5, 4]), n(&[3, 4]), n(&[3])], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        proj("conv2d", vec![n(&[2, 2, 5, 5]), n(&[3, 2, 3, 3]), n(&[3])], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        proj("conv2d_strided", vec![n(&[1, 2, 6, 6]), n(&[2, 2, 3, 3])], |t, v| t.conv2d(v[0], v[1], None, 2, 0)),
        proj("batch_norm_train", vec![n(&[3, 2, 2, 2]), n(&[2]), n(&[2])], |t, v| {
            Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
        }),
        proj("batch_norm_train_tokens", vec![n(&[2, 3, 4]), n(&[4]), n(&[4])], |t, v| {
            Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
        }),
        proj("batch_norm_eval", vec![n(&[2, 2, 3, 3]), n(&[2]), n(&[2])], |t, v| {
            let mean = Tensor::from_vec(vec![0.3, -0.2]);
            let var = Tensor::from_vec(vec![0.5, 2.0]);
            t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
        }),
        proj("max_pool2d", vec![n(&[1, 2, 5, 5])], |t, v| t.max_pool2d(v[0], 3, 2, 1)),
        proj("bilinear_resize", vec![n(&[1, 2, 3, 4])], |t, v| t.bilinear_resize(v[0], 5, 7)),
        proj("softmax", vec![n(&[3, 4])], |t, v| t.softmax(v[0], 2.0)),
        proj("log_softmax", vec![n(&[3, 4])], |t, v| t.log_softmax(v[0], 0.7)),
        proj("residual_branch", vec![n(&[2, 3]), n(&[2, 3]), n(&[3])], |t, v| {
            residual_branch(t, v[0], v[1], v[2], 0.0, Mode::Eval, None)
        }),
        proj("bilinear_attention_pool", vec![n(&[2, 3, 2, 2]), pos(n(&[2, 2, 2, 2]))], |t, v| {
            bilinear_attention_pool(t, v[0], v[1])
        }),
        case("ce_label_smoothing", vec![n(&[3, 4])], move |t, v| ce_label_smoothing(t, v[0], &[0, 3, 1], 0.1)),
        case("kd_loss", vec![n(&[3, 4])], |t, v| {
            let teacher = t.constant(RngStream::new(5).normal_tensor::<f64>(&[3, 4], 2.0));
            kd_loss(t, v[0], teacher, 4.0, true)
        }),
        case("tgda_total_loss", vec![n(&[3, 3]), n(&[3, 3])], move |t, v| {
            let mut r = RngStream::new(6);
            let to = t.constant(r.normal_tensor::<f64>(&[3, 3], 1.5));
            let ta = t.constant(r.normal_tensor::<f64>(&[3, 3], 1.5));
            let w = LossWeights {
                tau: 2.0,
                ..LossWeights::default()
            };
            Ok(tgda_total_loss(t, v[0], v[1], to, ta, &labels, &w)?.0)
        }),
    ]
}

pub fn run_case(c: &GradCase, eps: f64, tol: f64) -> GradResult {
    let (max_rel_error, failure) = match grad_check(&c.f, &c.inputs, eps, tol) {
        Ok(e) => (e, None),
        Err(Error::GradCheck { max_rel_error, .. }) => {
            (max_rel_error, Some(format!("relative error {max_rel_error:.3e} >= {tol:.0e}")))
        }
        Err(e) => (f64::NAN, Some(e.to_string())),
    };
    GradResult {
        name: c.name,
        max_rel_error,
        failure,
    }
}

/// Every case in [`suite`], in order.
pub fn run_suite(eps: f64, tol: f64) -> Vec<GradResult> {
    suite().iter().map(|c| run_case(c, eps, tol)).collect()
}
