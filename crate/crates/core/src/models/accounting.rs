//! Parameter and FLOP accounting by shape propagation.
//!
//! Per-layer FLOP formulas (N = batch, all counts exact integers):
//!
//! | layer | FLOPs |
//! |---|---|
//! | conv2d | `2 * N*Cout*Ho*Wo * Cin*K*K`, plus `N*Cout*Ho*Wo` with bias |
//! | linear | `2 * rows * in * out`, plus `rows * out` with bias |
//! | batch norm (eval) | `2` per element (scale and shift) |
//! | relu, gelu | `1` per element |
//! | max pool | `K*K` per output element |
//! | global / token mean pool | `1` per input element pooled |
//! | residual add, position add, layer scale | `1` per element |
//! | attention scores, weighted sum | `2 * N*heads*T*T*dh` each |
//! | score scaling | `1` per score |
//! | softmax | `3` per element |
//! | bilinear attention pool | `2 * N*M*C*H*W`, plus `5` per pooled element for signed sqrt, L2 normalization and scaling |
//!
//! Register concatenation, tokenization and reshapes are free.

use super::graph::{BlockSpec, ConvSpec, Head, Layer, LinearSpec, ModelGraph};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopReport {
    pub total: u64,
    /// Number of normalization layers executed in one forward pass.
    pub norm_ops: usize,
    pub norm_flops: u64,
    /// FLOPs by top-level layer name.
    pub per_layer: Vec<(String, u64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Act {
    Spatial { n: usize, c: usize, h: usize, w: usize },
    Tokens { n: usize, t: usize, d: usize },
    Flat { n: usize, f: usize },
}

impl Act {
    fn numel(self) -> u64 {
        (match self {
            Act::Spatial { n, c, h, w } => n * c * h * w,
            Act::Tokens { n, t, d } => n * t * d,
            Act::Flat { n, f } => n * f,
        }) as u64
    }

    fn channels(self) -> usize {
        match self {
            Act::Spatial { c, .. } => c,
            Act::Tokens { d, .. } => d,
            Act::Flat { f, .. } => f,
        }
    }
}

struct Counter {
    report: FlopReport,
}

fn bad(layer: &str, act: Act) -> Error {
    Error::Accounting(format!("layer {layer} cannot consume activation {act:?}"))
}

impl Counter {
    fn norm(&mut self, act: Act) -> u64 {
        let f = 2 * act.numel();
        self.report.norm_ops += 1;
        self.report.norm_flops += f;
        f
    }

    fn conv(&mut self, s: &ConvSpec, act: Act) -> Result<(Act, u64)> {
        let Act::Spatial { n, c, h, w } = act else { return Err(bad(&s.name, act)) };
        if c != s.in_ch {
            return Err(Error::Accounting(format!("{} expects {} channels, got {c}", s.name, s.in_ch)));
        }
        let ext = |x: usize| {
            (x + 2 * s.padding)
                .checked_sub(s.kernel)
                .map(|v| v / s.stride + 1)
                .ok_or_else(|| Error::Accounting(format!("{}: kernel exceeds input", s.name)))
        };
        let (ho, wo) = (ext(h)?, ext(w)?);
        let out = (n * s.out_ch * ho * wo) as u64;
        let mut f = 2 * out * (s.in_ch * s.kernel * s.kernel) as u64;
        if s.bias {
            f += out;
        }
        Ok((Act::Spatial { n, c: s.out_ch, h: ho, w: wo }, f))
    }

    fn linear(&mut self, s: &LinearSpec, act: Act) -> Result<(Act, u64)> {
        let (rows, feat) = match act {
            Act::Tokens { n, t, d } => (n * t, d),
            Act::Flat { n, f } => (n, f),
            Act::Spatial { .. } => return Err(bad(&s.name, act)),
        };
        if feat != s.in_f {
            return Err(Error::Accounting(format!("{} expects {} features, got {feat}", s.name, s.in_f)));
        }
        let out = (rows * s.out_f) as u64;
        let mut f = 2 * out * s.in_f as u64;
        if s.bias {
            f += out;
        }
        let act = match act {
            Act::Tokens { n, t, .. } => Act::Tokens { n, t, d: s.out_f },
            _ => Act::Flat { n: rows, f: s.out_f },
        };
        Ok((act, f))
    }

    fn block(&mut self, b: &BlockSpec, act: Act) -> Result<(Act, u64)> {
        let Act::Tokens { n, t, d } = act else { return Err(bad(&b.name, act)) };
        let mut f = 0;
        if b.norm1 {
            f += self.norm(act);
        }
        f += self.linear(&b.qkv(), act)?.1;
        let dh = d / b.heads;
        let scores = (n * b.heads * t * t) as u64;
        f += 2 * scores * dh as u64; // q k^T
        f += scores; // 1/sqrt(dh)
        f += 3 * scores; // softmax
        f += 2 * scores * dh as u64; // attn v
        f += self.linear(&b.proj(), act)?.1;
        f += 2 * act.numel(); // layer scale + residual add
        if b.norm2 {
            f += self.norm(act);
        }
        let (hidden, f1) = self.linear(&b.fc1(), act)?;
        f += f1 + hidden.numel(); // gelu
        f += self.linear(&b.fc2(), hidden)?.1;
        f += 2 * act.numel();
        Ok((Act::Tokens { n, t, d }, f))
    }

    fn layer(&mut self, l: &Layer, act: Act) -> Result<(Act, u64)> {
        match l {
            Layer::Conv2d(s) => self.conv(s, act),
            Layer::BatchNorm { name, channels } => {
                if act.channels() != *channels {
                    return Err(Error::Accounting(format!("{name} expects {channels} channels")));
                }
                Ok((act, self.norm(act)))
            }
            Layer::Relu | Layer::Gelu => Ok((act, act.numel())),
            Layer::MaxPool2d { kernel, stride, padding } => {
                let Act::Spatial { n, c, h, w } = act else { return Err(bad("max_pool2d", act)) };
                let ext = |x: usize| (x + 2 * padding - kernel) / stride + 1;
                let out = Act::Spatial { n, c, h: ext(h), w: ext(w) };
                Ok((out, out.numel() * (kernel * kernel) as u64))
            }
            Layer::GlobalAvgPool => {
                let Act::Spatial { n, c, .. } = act else { return Err(bad("global_avg_pool", act)) };
                Ok((Act::Flat { n, f: c }, act.numel()))
            }
            Layer::Linear(s) => self.linear(s, act),
            Layer::Residual { body, shortcut } => {
                let (b, fb) = self.layers(body, act)?;
                let (s, fs) = self.layers(shortcut, act)?;
                if b != s {
                    return Err(Error::Accounting(format!("residual branches disagree: {b:?} vs {s:?}")));
                }
                Ok((b, fb + fs + 2 * b.numel()))
            }
            Layer::Tokenize => {
                let Act::Spatial { n, c, h, w } = act else { return Err(bad("tokenize", act)) };
                Ok((Act::Tokens { n, t: h * w, d: c }, 0))
            }
            Layer::SinusoidalPos2d { .. } => Ok((act, act.numel())),
            Layer::Registers { count, .. } => {
                let Act::Tokens { n, t, d } = act else { return Err(bad("registers", act)) };
                Ok((Act::Tokens { n, t: t + count, d }, 0))
            }
            Layer::TransformerBlock(b) => self.block(b, act),
            Layer::TokenMeanPool { skip } => {
                let Act::Tokens { n, t, d } = act else { return Err(bad("token_mean_pool", act)) };
                if *skip >= t {
                    return Err(Error::Accounting(format!("cannot skip {skip} of {t} tokens")));
                }
                Ok((Act::Flat { n, f: d }, ((t - skip) * n * d) as u64))
            }
        }
    }

    fn layers(&mut self, layers: &[Layer], mut act: Act) -> Result<(Act, u64)> {
        let mut total = 0;
        for l in layers {
            let (a, f) = self.layer(l, act)?;
            act = a;
            total += f;
        }
        Ok((act, total))
    }
}

pub(crate) fn layer_name(l: &Layer) -> String {
    match l {
        Layer::Conv2d(s) => s.name.clone(),
        Layer::BatchNorm { name, .. } => name.clone(),
        Layer::Linear(s) => s.name.clone(),
        Layer::Residual { body, .. } => match body.first() {
            Some(Layer::Conv2d(s)) => s.name.rsplit_once('.').map(|(p, _)| p.to_string()).unwrap_or_default(),
            _ => "residual".into(),
        },
        Layer::TransformerBlock(b) => b.name.clone(),
        Layer::Registers { name, .. } => name.clone(),
        Layer::Relu => "relu".into(),
        Layer::Gelu => "gelu".into(),
        Layer::MaxPool2d { .. } => "max_pool2d".into(),
        Layer::GlobalAvgPool => "global_avg_pool".into(),
        Layer::Tokenize => "tokenize".into(),
        Layer::SinusoidalPos2d { .. } => "pos_enc".into(),
        Layer::TokenMeanPool { .. } => "token_mean_pool".into(),
    }
}

pub fn count_params(model: &ModelGraph) -> usize {
    model.count_params()
}

/// Eval-mode forward FLOPs for an NCHW input shape.
pub fn count_flops(model: &ModelGraph, input_shape: &[usize]) -> Result<FlopReport> {
    let [n, c, h, w] = *input_shape else {
        return Err(Error::dim("count_flops", format!("expected NCHW input shape, got {input_shape:?}")));
    };
    let mut k = Counter {
        report: FlopReport::default(),
    };
    let mut act = Act::Spatial { n, c, h, w };
    let record = |k: &mut Counter, name: String, f: u64| {
        k.report.total += f;
        k.report.per_layer.push((name, f));
    };
    for l in &model.body {
        let (a, f) = k.layer(l, act)?;
        act = a;
        record(&mut k, layer_name(l), f);
    }
    match &model.head {
        Head::Classifier { layers, .. } => {
            for l in layers {
                let (a, f) = k.layer(l, act)?;
                act = a;
                record(&mut k, layer_name(l), f);
            }
        }
        Head::Pam(p) => {
            let Act::Spatial { n, c, h, w } = act else { return Err(bad(&p.name, act)) };
            let (maps, mut f) = k.conv(&p.conv(), act)?;
            if p.bn {
                f += k.norm(maps);
            }
            f += maps.numel();
            let pooled = (n * p.parts * c) as u64;
            f += 2 * pooled * (h * w) as u64 + 5 * pooled;
            f += k.linear(&p.fc, Act::Flat { n, f: p.parts * c })?.1;
            record(&mut k, p.name.clone(), f);
        }
    }
    Ok(k.report)
}
