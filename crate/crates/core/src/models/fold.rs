//! Absorbs eval-mode batch norms into adjacent linear maps.
//!
//! Eval-mode BN is the per-channel affine map `x * a + c` with
//! `a = gamma / sqrt(var + eps)` and `c = beta - mean * a`. When it follows a
//! convolution it is merged into the conv's output channels; when it precedes
//! a linear layer (transformer pre-norms, the classifier norm) it is merged
//! into the linear layer's input columns.

use super::graph::{Head, Layer, ModelGraph, BN_EPS};
use super::params::ParamStore;
use crate::backend::{Element, Tensor};
use crate::error::{Error, Result};

/// Per-channel `(a, c)` for the batch norm `name`, with its tensors removed
/// from the store.
fn take_bn<T: Element>(store: &mut ParamStore<T>, name: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let missing = || Error::Contract(format!("fold: missing batch norm tensors for {name}"));
    let g = store.remove_param(&format!("{name}.weight")).ok_or_else(missing)?;
    let b = store.remove_param(&format!("{name}.bias")).ok_or_else(missing)?;
    let m = store.remove_buffer(&format!("{name}.running_mean")).ok_or_else(missing)?;
    let v = store.remove_buffer(&format!("{name}.running_var")).ok_or_else(missing)?;
    let mut a = Vec::with_capacity(g.numel());
    let mut c = Vec::with_capacity(g.numel());
    for i in 0..g.numel() {
        let ai = g.data()[i].to_f64_lossy() / (v.data()[i].to_f64_lossy() + BN_EPS).sqrt();
        a.push(ai);
        c.push(b.data()[i].to_f64_lossy() - m.data()[i].to_f64_lossy() * ai);
    }
    Ok((a, c))
}

/// Conv `name` followed by BN: scales output channels and adds a bias.
fn fold_into_conv<T: Element>(store: &mut ParamStore<T>, conv: &str, had_bias: bool, bn: &str) -> Result<()> {
    let (a, c) = take_bn(store, bn)?;
    let w = store.param_mut(&format!("{conv}.weight"))?;
    let per = w.numel() / a.len();
    for (o, chunk) in w.data_mut().chunks_mut(per).enumerate() {
        chunk.iter_mut().for_each(|v| *v = T::lit(v.to_f64_lossy() * a[o]));
    }
    let bias_name = format!("{conv}.bias");
    let old = if had_bias {
        store.remove_param(&bias_name).map(|t| t.data().iter().map(|v| v.to_f64_lossy()).collect())
    } else {
        None
    };
    let old: Vec<f64> = old.unwrap_or_else(|| vec![0.0; a.len()]);
    let bias = Tensor::from_fn(&[a.len()], |o| T::lit(old[o] * a[o] + c[o]));
    store.insert_param(bias_name, bias)
}

/// BN followed by linear `name` (weight `(out, in)`): scales input columns
/// and shifts the bias by `W c`.
fn fold_into_linear<T: Element>(store: &mut ParamStore<T>, bn: &str, linear: &str, had_bias: bool) -> Result<()> {
    let (a, c) = take_bn(store, bn)?;
    let w = store.param_mut(&format!("{linear}.weight"))?;
    let in_f = a.len();
    let out_f = w.numel() / in_f;
    let mut shift = vec![0.0; out_f];
    for (o, row) in w.data_mut().chunks_mut(in_f).enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            let wf = v.to_f64_lossy();
            shift[o] += wf * c[i];
            *v = T::lit(wf * a[i]);
        }
    }
    let bias_name = format!("{linear}.bias");
    let old: Vec<f64> = if had_bias {
        store
            .remove_param(&bias_name)
            .map(|t| t.data().iter().map(|v| v.to_f64_lossy()).collect())
            .unwrap_or_else(|| vec![0.0; out_f])
    } else {
        vec![0.0; out_f]
    };
    store.insert_param(bias_name, Tensor::from_fn(&[out_f], |o| T::lit(old[o] + shift[o])))
}

fn fold_layers<T: Element>(layers: &[Layer], store: &mut ParamStore<T>) -> Result<Vec<Layer>> {
    let mut out = Vec::with_capacity(layers.len());
    let mut i = 0;
    while i < layers.len() {
        match (&layers[i], layers.get(i + 1)) {
            (Layer::Conv2d(s), Some(Layer::BatchNorm { name, .. })) => {
                fold_into_conv(store, &s.name, s.bias, name)?;
                let mut s = s.clone();
                s.bias = true;
                out.push(Layer::Conv2d(s));
                i += 2;
            }
            (Layer::BatchNorm { name, .. }, Some(Layer::Linear(s))) => {
                fold_into_linear(store, name, &s.name, s.bias)?;
                let mut s = s.clone();
                s.bias = true;
                out.push(Layer::Linear(s));
                i += 2;
            }
            (Layer::Residual { body, shortcut }, _) => {
                out.push(Layer::Residual {
                    body: fold_layers(body, store)?,
                    shortcut: fold_layers(shortcut, store)?,
                });
                i += 1;
            }
            (Layer::TransformerBlock(b), _) => {
                let mut b = b.clone();
                if b.norm1 {
                    fold_into_linear(store, &format!("{}.norm1", b.name), &b.qkv().name, true)?;
                    b.norm1 = false;
                }
                if b.norm2 {
                    fold_into_linear(store, &format!("{}.norm2", b.name), &b.fc1().name, true)?;
                    b.norm2 = false;
                }
                out.push(Layer::TransformerBlock(b));
                i += 1;
            }
            (l, _) => {
                out.push(l.clone());
                i += 1;
            }
        }
    }
    Ok(out)
}

/// Returns an eval-only graph with every foldable batch norm removed, and
/// the matching parameters.
pub fn fold_batch_norms<T: Element>(model: &ModelGraph, store: &ParamStore<T>) -> Result<(ModelGraph, ParamStore<T>)> {
    model.check_store(store)?;
    let mut store = store.clone();
    let body = fold_layers(&model.body, &mut store)?;
    let head = match &model.head {
        Head::Classifier { layers, cam } => Head::Classifier {
            layers: fold_layers(layers, &mut store)?,
            cam: *cam,
        },
        Head::Pam(p) => {
            let mut p = p.clone();
            if p.bn {
                fold_into_conv(&mut store, &p.conv().name, p.conv_bias, &p.bn_name())?;
                p.bn = false;
                p.conv_bias = true;
            }
            Head::Pam(p)
        }
    };
    let folded = ModelGraph {
        body,
        head,
        ..model.clone()
    };
    folded.check_store(&store)?;
    Ok((folded, store))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct FoldCheckReport {
    pub arch: String,
    pub samples: usize,
    pub max_logit_deviation: f64,
    pub norm_ops_before: usize,
    pub norm_ops_after: usize,
    pub flops_before: u64,
    pub flops_after: u64,
    pub params_before: usize,
    pub params_after: usize,
}

/// Gives every batch norm non-trivial running statistics and affine
/// parameters, as a trained network would have.
pub fn randomize_norm_stats<T: Element>(store: &mut ParamStore<T>, seed: u64) {
    let mut rng = crate::backend::RngStream::new(seed);
    let names: Vec<String> = store.buffers().map(|(k, _)| k.clone()).collect();
    for n in names {
        let b = store.buffer_mut(&n).expect("listed");
        let var = n.ends_with("running_var");
        for v in b.data_mut() {
            let r = if var { rng.uniform_in(0.5, 2.0) } else { 0.2 * rng.normal() };
            *v = T::lit(r);
        }
    }
    let bns: std::collections::BTreeSet<String> = store
        .buffers()
        .filter_map(|(k, _)| k.strip_suffix(".running_mean").map(String::from))
        .collect();
    let norms: Vec<String> = store
        .params()
        .map(|(k, _)| k.clone())
        .filter(|k| k.rsplit_once('.').is_some_and(|(owner, _)| bns.contains(owner)))
        .collect();
    for n in norms {
        for v in store.param_mut(&n).expect("declared").data_mut() {
            *v = *v + T::lit(0.1 * rng.normal());
        }
    }
}

/// Folds `graph` (f32, randomized norm statistics) and compares eval logits
/// on `samples` standard-normal inputs against the unfolded network.
pub fn fold_check(arch: &super::ArchSpec, samples: usize, seed: u64) -> Result<FoldCheckReport> {
    let mut model = super::Model::<f32>::build(arch, seed)?;
    randomize_norm_stats(&mut model.params, seed ^ 0xF01D);
    let (folded, fparams) = fold_batch_norms(&model.graph, &model.params)?;
    let s = model.graph.input_size;
    let mut rng = crate::backend::RngStream::derive(seed, &[0xF01D]);
    let mut worst = 0.0f64;
    let chunk = 16;
    let mut done = 0;
    while done < samples {
        let n = chunk.min(samples - done);
        let x = rng.normal_tensor::<f32>(&[n, 3, s, s], 1.0);
        let a = model.graph.infer(&model.params, &x)?;
        let b = folded.infer(&fparams, &x)?;
        worst = worst.max(a.max_abs_diff(&b));
        done += n;
    }
    let before = super::count_flops(&model.graph, &[1, 3, s, s])?;
    let after = super::count_flops(&folded, &[1, 3, s, s])?;
    Ok(FoldCheckReport {
        arch: serde_json::to_string(arch)?,
        samples,
        max_logit_deviation: worst,
        norm_ops_before: before.norm_ops,
        norm_ops_after: after.norm_ops,
        flops_before: before.total,
        flops_after: after.total,
        params_before: model.params.num_params(),
        params_after: fparams.num_params(),
    })
}
