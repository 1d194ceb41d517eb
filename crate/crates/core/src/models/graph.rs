use serde::{Deserialize, Serialize};

use super::arch::ArchSpec;
use super::params::{Binding, ParamStore};
use super::posenc::sinusoidal_pos_enc_2d;
use crate::backend::{BnBatchStats, Element, RngStream, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSpec {
    pub name: String,
    pub in_f: usize,
    pub out_f: usize,
    pub bias: bool,
    /// Normal init with this std; PyTorch-style uniform fan-in init otherwise.
    pub normal_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub drop_prob: f64,
    pub layerscale_init: f64,
    /// Pre-attention batch norm; cleared once folded into `qkv`.
    pub norm1: bool,
    /// Pre-MLP batch norm; cleared once folded into `fc1`.
    pub norm2: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PamSpec {
    pub name: String,
    pub in_ch: usize,
    pub parts: usize,
    pub feature_scale: f64,
    pub conv_bias: bool,
    pub bn: bool,
    pub fc: LinearSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(ConvSpec),
    BatchNorm { name: String, channels: usize },
    Relu,
    Gelu,
    MaxPool2d { kernel: usize, stride: usize, padding: usize },
    GlobalAvgPool,
    Linear(LinearSpec),
    /// `relu(body(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual { body: Vec<Layer>, shortcut: Vec<Layer> },
    /// NCHW -> (N, H*W, C), row-major over the grid.
    Tokenize,
    SinusoidalPos2d { h: usize, w: usize, dim: usize },
    /// Prepends `count` learned tokens.
    Registers { name: String, count: usize, dim: usize },
    TransformerBlock(BlockSpec),
    /// Mean over tokens `[skip, T)`.
    TokenMeanPool { skip: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    /// Plain classifier; with `cam` set, class activation maps of the final
    /// linear layer are reported as attention.
    Classifier { layers: Vec<Layer>, cam: bool },
    Pam(PamSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    Uniform(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub buffer: bool,
}

/// A network as an ordered list of layers over named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub arch: ArchSpec,
    pub input_size: usize,
    pub num_classes: usize,
    pub body: Vec<Layer>,
    pub head: Head,
    pub mode: Mode,
}

pub struct ForwardOutput<T> {
    pub logits: Var,
    /// Output of the body, before the head.
    pub features: Var,
    pub attention: Option<Var>,
    pub bn_stats: Vec<(String, BnBatchStats<T>)>,
}

fn decl(out: &mut Vec<ParamDecl>, name: String, shape: Vec<usize>, init: Init) {
    out.push(ParamDecl {
        name,
        shape,
        init,
        buffer: false,
    });
}

fn bn_decls(out: &mut Vec<ParamDecl>, name: &str, c: usize) {
    decl(out, format!("{name}.weight"), vec![c], Init::Ones);
    decl(out, format!("{name}.bias"), vec![c], Init::Zeros);
    for (b, init) in [("running_mean", Init::Zeros), ("running_var", Init::Ones)] {
        out.push(ParamDecl {
            name: format!("{name}.{b}"),
            shape: vec![c],
            init,
            buffer: true,
        });
    }
}

fn conv_decls(out: &mut Vec<ParamDecl>, s: &ConvSpec) {
    let std = (2.0 / (s.out_ch * s.kernel * s.kernel) as f64).sqrt();
    decl(
        out,
        format!("{}.weight", s.name),
        vec![s.out_ch, s.in_ch, s.kernel, s.kernel],
        Init::Normal(std),
    );
    if s.bias {
        decl(out, format!("{}.bias", s.name), vec![s.out_ch], Init::Zeros);
    }
}

fn linear_decls(out: &mut Vec<ParamDecl>, s: &LinearSpec) {
    let (w, b) = match s.normal_std {
        Some(std) => (Init::Normal(std), Init::Zeros),
        None => {
            let bound = 1.0 / (s.in_f as f64).sqrt();
            (Init::Uniform(bound), Init::Uniform(bound))
        }
    };
    decl(out, format!("{}.weight", s.name), vec![s.out_f, s.in_f], w);
    if s.bias {
        decl(out, format!("{}.bias", s.name), vec![s.out_f], b);
    }
}

fn block_linear(block: &str, part: &str, in_f: usize, out_f: usize) -> LinearSpec {
    LinearSpec {
        name: format!("{block}.{part}"),
        in_f,
        out_f,
        bias: true,
        normal_std: Some(0.02),
    }
}

impl BlockSpec {
    pub fn qkv(&self) -> LinearSpec {
        block_linear(&self.name, "attn.qkv", self.dim, 3 * self.dim)
    }
    pub fn proj(&self) -> LinearSpec {
        block_linear(&self.name, "attn.proj", self.dim, self.dim)
    }
    pub fn fc1(&self) -> LinearSpec {
        block_linear(&self.name, "mlp.fc1", self.dim, self.mlp_hidden)
    }
    pub fn fc2(&self) -> LinearSpec {
        block_linear(&self.name, "mlp.fc2", self.mlp_hidden, self.dim)
    }
}

impl PamSpec {
    pub fn conv(&self) -> ConvSpec {
        ConvSpec {
            name: format!("{}.conv", self.name),
            in_ch: self.in_ch,
            out_ch: self.parts,
            kernel: 1,
            stride: 1,
            padding: 0,
            bias: self.conv_bias,
        }
    }
    pub fn bn_name(&self) -> String {
        format!("{}.bn", self.name)
    }
}

fn layer_decls(layer: &Layer, out: &mut Vec<ParamDecl>) {
    match layer {
        Layer::Conv2d(s) => conv_decls(out, s),
        Layer::BatchNorm { name, channels } => bn_decls(out, name, *channels),
        Layer::Linear(s) => linear_decls(out, s),
        Layer::Residual { body, shortcut } => {
            body.iter().chain(shortcut).for_each(|l| layer_decls(l, out));
        }
        Layer::Registers { name, count, dim } => decl(out, name.clone(), vec![1, *count, *dim], Init::Normal(0.02)),
        Layer::TransformerBlock(b) => {
            if b.norm1 {
                bn_decls(out, &format!("{}.norm1", b.name), b.dim);
            }
            linear_decls(out, &b.qkv());
            linear_decls(out, &b.proj());
            decl(out, format!("{}.ls1", b.name), vec![b.dim], Init::Const(b.layerscale_init));
            if b.norm2 {
                bn_decls(out, &format!("{}.norm2", b.name), b.dim);
            }
            linear_decls(out, &b.fc1());
            linear_decls(out, &b.fc2());
            decl(out, format!("{}.ls2", b.name), vec![b.dim], Init::Const(b.layerscale_init));
        }
        Layer::Relu
        | Layer::Gelu
        | Layer::MaxPool2d { .. }
        | Layer::GlobalAvgPool
        | Layer::Tokenize
        | Layer::SinusoidalPos2d { .. }
        | Layer::TokenMeanPool { .. } => {}
    }
}

fn name_key(name: &str) -> u64 {
    // FNV-1a; only needs to be stable, not strong
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct Cx<'a, 'b, T> {
    tape: &'a mut Tape<T>,
    bind: &'a Binding<'b, T>,
    mode: Mode,
    rng: Option<&'a mut RngStream>,
    stats: Vec<(String, BnBatchStats<T>)>,
}

impl<T: Element> Cx<'_, '_, T> {
    fn p(&self, name: &str) -> Result<Var> {
        self.bind.var(name)
    }

    fn conv(&mut self, s: &ConvSpec, x: Var) -> Result<Var> {
        let w = self.p(&format!("{}.weight", s.name))?;
        let b = if s.bias { Some(self.p(&format!("{}.bias", s.name))?) } else { None };
        self.tape.conv2d(x, w, b, s.stride, s.padding)
    }

    fn linear(&mut self, s: &LinearSpec, x: Var) -> Result<Var> {
        let w = self.p(&format!("{}.weight", s.name))?;
        let b = if s.bias { Some(self.p(&format!("{}.bias", s.name))?) } else { None };
        self.tape.linear(x, w, b)
    }

    fn bn(&mut self, name: &str, x: Var) -> Result<Var> {
        let g = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, g, b, BN_EPS)?;
                self.stats.push((name.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.bind.buffer(&format!("{name}.running_mean"))?;
                let rv = self.bind.buffer(&format!("{name}.running_var"))?;
                self.tape.batch_norm_eval(x, g, b, rm, rv, BN_EPS)
            }
        }
    }

    fn layers(&mut self, layers: &[Layer], mut x: Var) -> Result<Var> {
        for l in layers {
            x = self.layer(l, x)?;
        }
        Ok(x)
    }

    fn layer(&mut self, layer: &Layer, x: Var) -> Result<Var> {
        match layer {
            Layer::Conv2d(s) => self.conv(s, x),
            Layer::BatchNorm { name, .. } => self.bn(name, x),
            Layer::Relu => self.tape.relu(x),
            Layer::Gelu => self.tape.gelu(x),
            Layer::MaxPool2d { kernel, stride, padding } => self.tape.max_pool2d(x, *kernel, *stride, *padding),
            Layer::GlobalAvgPool => self.tape.global_avg_pool2d(x),
            Layer::Linear(s) => self.linear(s, x),
            Layer::Residual { body, shortcut } => {
                let b = self.layers(body, x)?;
                let s = self.layers(shortcut, x)?;
                let sum = self.tape.add(b, s)?;
                self.tape.relu(sum)
            }
            Layer::Tokenize => {
                let [n, c, h, w] = *self.tape.shape(x) else {
                    return Err(Error::dim("tokenize", format!("expected NCHW, got {:?}", self.tape.shape(x))));
                };
                let flat = self.tape.reshape(x, &[n, c, h * w])?;
                self.tape.permute(flat, &[0, 2, 1])
            }
            Layer::SinusoidalPos2d { h, w, dim } => {
                let pe: Tensor<T> = sinusoidal_pos_enc_2d(*h, *w, *dim)?.cast();
                let pe = self.tape.constant(pe);
                self.tape.add(x, pe)
            }
            Layer::Registers { name, count, dim } => {
                let n = self.tape.shape(x)[0];
                let r = self.p(name)?;
                let r = self.tape.expand(r, &[n, *count, *dim])?;
                self.tape.concat(&[r, x], 1)
            }
            Layer::TransformerBlock(b) => self.block(b, x),
            Layer::TokenMeanPool { skip } => self.tape.token_mean_pool(x, *skip),
        }
    }

    fn block(&mut self, b: &BlockSpec, x: Var) -> Result<Var> {
        let [n, t, d] = *self.tape.shape(x) else {
            return Err(Error::dim("transformer_block", format!("expected (N, T, C), got {:?}", self.tape.shape(x))));
        };
        let (heads, dh) = (b.heads, d / b.heads);

        let h = if b.norm1 { self.bn(&format!("{}.norm1", b.name), x)? } else { x };
        let qkv = self.linear(&b.qkv(), h)?;
        let qkv = self.tape.reshape(qkv, &[n, t, 3, heads, dh])?;
        let qkv = self.tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = self.tape.reshape(qkv, &[3, n * heads, t, dh])?;
        let mut qkv_parts = [x; 3];
        for (i, slot) in qkv_parts.iter_mut().enumerate() {
            let s = self.tape.slice(qkv, 0, i, 1)?;
            *slot = self.tape.reshape(s, &[n * heads, t, dh])?;
        }
        let [q, k, v] = qkv_parts;
        let scores = self.tape.matmul_t(q, k, false, true)?;
        let scores = self.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = self.tape.softmax(scores, 1.0)?;
        let o = self.tape.matmul(attn, v)?;
        let o = self.tape.reshape(o, &[n, heads, t, dh])?;
        let o = self.tape.permute(o, &[0, 2, 1, 3])?;
        let o = self.tape.reshape(o, &[n, t, d])?;
        let o = self.linear(&b.proj(), o)?;
        let ls1 = self.p(&format!("{}.ls1", b.name))?;
        let x = residual_branch(self.tape, x, o, ls1, b.drop_prob, self.mode, self.rng.as_deref_mut())?;

        let h = if b.norm2 { self.bn(&format!("{}.norm2", b.name), x)? } else { x };
        let h = self.linear(&b.fc1(), h)?;
        let h = self.tape.gelu(h)?;
        let h = self.linear(&b.fc2(), h)?;
        let ls2 = self.p(&format!("{}.ls2", b.name))?;
        residual_branch(self.tape, x, h, ls2, b.drop_prob, self.mode, self.rng.as_deref_mut())
    }
}

/// `x + keep * (gamma * branch)`, where in train mode `keep` is a per-sample
/// Bernoulli(1 - drop_prob) / (1 - drop_prob) draw and in eval mode it is 1.
pub fn residual_branch<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    branch: Var,
    gamma: Var,
    drop_prob: f64,
    mode: Mode,
    rng: Option<&mut RngStream>,
) -> Result<Var> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::param("residual_branch", format!("drop_prob must be in [0, 1), got {drop_prob}")));
    }
    let scaled = tape.mul(branch, gamma)?;
    let scaled = if mode == Mode::Train && drop_prob > 0.0 {
        let rng = rng.ok_or_else(|| Error::Contract("stochastic depth needs an rng stream in train mode".into()))?;
        let shape = tape.shape(x).to_vec();
        let mut mask_shape = vec![1; shape.len()];
        mask_shape[0] = shape[0];
        let keep = 1.0 - drop_prob;
        let mask = Tensor::from_fn(&mask_shape, |_| {
            if rng.bernoulli(keep) {
                T::lit(1.0 / keep)
            } else {
                T::zero()
            }
        });
        let mask = tape.constant(mask);
        tape.mul(scaled, mask)?
    } else {
        scaled
    };
    tape.add(x, scaled)
}

/// Attention maps `relu(bn(conv1x1(features)))`, one per part.
pub fn pam_forward<T: Element>(
    tape: &mut Tape<T>,
    bind: &Binding<'_, T>,
    spec: &PamSpec,
    features: Var,
    mode: Mode,
    stats: &mut Vec<(String, BnBatchStats<T>)>,
) -> Result<Var> {
    let mut cx = Cx {
        tape,
        bind,
        mode,
        rng: None,
        stats: Vec::new(),
    };
    let mut a = cx.conv(&spec.conv(), features)?;
    if spec.bn {
        a = cx.bn(&spec.bn_name(), a)?;
    }
    let a = cx.tape.relu(a)?;
    stats.append(&mut cx.stats);
    Ok(a)
}

/// Per-part weighted spatial means of `features` under `maps`, concatenated,
/// signed-square-rooted and L2 normalized. Returns `(N, M * C)`.
pub fn bilinear_attention_pool<T: Element>(tape: &mut Tape<T>, features: Var, maps: Var) -> Result<Var> {
    let pooled = attention_part_features(tape, features, maps)?;
    let s = tape.signed_sqrt(pooled, 1e-12)?;
    let sq = tape.mul(s, s)?;
    let ss = tape.sum_axes(sq, &[1], true)?;
    let ss = tape.add_scalar(ss, 1e-12)?;
    let norm = tape.sqrt(ss)?;
    tape.div(s, norm)
}

/// The raw part vectors `f_k = mean_hw A_k(h, w) F(:, h, w)`, `(N, M * C)`.
pub fn attention_part_features<T: Element>(tape: &mut Tape<T>, features: Var, maps: Var) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    let ms = tape.shape(maps).to_vec();
    if fs.len() != 4 || ms.len() != 4 || fs[0] != ms[0] || fs[2..] != ms[2..] {
        return Err(Error::dim("bilinear_attention_pool", format!("features {fs:?} vs maps {ms:?}")));
    }
    let (n, c, m, hw) = (fs[0], fs[1], ms[1], fs[2] * fs[3]);
    let f = tape.reshape(features, &[n, c, hw])?;
    let a = tape.reshape(maps, &[n, m, hw])?;
    let p = tape.matmul_t(a, f, false, true)?;
    let p = tape.scale(p, 1.0 / hw as f64)?;
    tape.reshape(p, &[n, m * c])
}

impl ModelGraph {
    pub fn param_decls(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        self.body.iter().for_each(|l| layer_decls(l, &mut out));
        match &self.head {
            Head::Classifier { layers, .. } => layers.iter().for_each(|l| layer_decls(l, &mut out)),
            Head::Pam(p) => {
                conv_decls(&mut out, &p.conv());
                if p.bn {
                    bn_decls(&mut out, &p.bn_name(), p.parts);
                }
                linear_decls(&mut out, &p.fc);
            }
        }
        out
    }

    /// Total trainable parameter count, from the layer specs alone.
    pub fn count_params(&self) -> usize {
        self.param_decls()
            .iter()
            .filter(|d| !d.buffer)
            .map(|d| d.shape.iter().product::<usize>())
            .sum()
    }

    /// Fresh parameters; each tensor draws from its own stream keyed by
    /// `(seed, name)`, so adding a layer never perturbs the others.
    pub fn init_params<T: Element>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for d in self.param_decls() {
            let mut rng = RngStream::derive(seed, &[name_key(&d.name)]);
            let t = match d.init {
                Init::Zeros => Tensor::zeros(&d.shape),
                Init::Ones => Tensor::ones(&d.shape),
                Init::Const(v) => Tensor::full(&d.shape, T::lit(v)),
                Init::Normal(std) => rng.normal_tensor(&d.shape, std),
                Init::Uniform(b) => rng.uniform_tensor(&d.shape, -b, b),
            };
            if d.buffer {
                store.insert_buffer(d.name, t)?;
            } else {
                store.insert_param(d.name, t)?;
            }
        }
        Ok(store)
    }

    /// Checks that `store` holds exactly the tensors this graph declares.
    pub fn check_store<T: Element>(&self, store: &ParamStore<T>) -> Result<()> {
        let decls = self.param_decls();
        let mut expected = 0;
        for d in &decls {
            let t = if d.buffer { store.buffer(&d.name) } else { store.param(&d.name) };
            let t = t.map_err(|_| Error::ArchitectureMismatch(format!("missing tensor {}", d.name)))?;
            if t.shape() != d.shape.as_slice() {
                return Err(Error::ArchitectureMismatch(format!(
                    "{} has shape {:?}, architecture expects {:?}",
                    d.name,
                    t.shape(),
                    d.shape
                )));
            }
            expected += 1;
        }
        let held = store.params().count() + store.buffers().count();
        if held != expected {
            return Err(Error::ArchitectureMismatch(format!(
                "store holds {held} tensors, architecture declares {expected}"
            )));
        }
        Ok(())
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn has_stochastic_layers(&self) -> bool {
        fn any(layers: &[Layer]) -> bool {
            layers.iter().any(|l| match l {
                Layer::TransformerBlock(b) => b.drop_prob > 0.0,
                Layer::Residual { body, shortcut } => any(body) || any(shortcut),
                _ => false,
            })
        }
        any(&self.body)
    }

    /// Records a forward pass of `x` (NCHW) in the graph's current mode.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding<'_, T>,
        x: Var,
        rng: Option<&mut RngStream>,
    ) -> Result<ForwardOutput<T>> {
        self.forward_mode(tape, bind, x, self.mode, rng)
    }

    pub fn forward_mode<T: Element>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding<'_, T>,
        x: Var,
        mode: Mode,
        rng: Option<&mut RngStream>,
    ) -> Result<ForwardOutput<T>> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.input_size || shape[3] != self.input_size {
            return Err(Error::dim(
                "model_forward",
                format!("expected (N, 3, {0}, {0}), got {shape:?}", self.input_size),
            ));
        }
        let mut cx = Cx {
            tape,
            bind,
            mode,
            rng,
            stats: Vec::new(),
        };
        let features = cx.layers(&self.body, x)?;
        let (logits, attention) = match &self.head {
            Head::Classifier { layers, cam } => {
                let logits = cx.layers(layers, features)?;
                let attention = if *cam { Some(cam_maps(&mut cx, layers, features)?) } else { None };
                (logits, attention)
            }
            Head::Pam(p) => {
                let mut stats = Vec::new();
                let maps = pam_forward(cx.tape, bind, p, features, mode, &mut stats)?;
                cx.stats.append(&mut stats);
                let pooled = bilinear_attention_pool(cx.tape, features, maps)?;
                let pooled = cx.tape.scale(pooled, p.feature_scale)?;
                (cx.linear(&p.fc, pooled)?, Some(maps))
            }
        };
        Ok(ForwardOutput {
            logits,
            features,
            attention,
            bn_stats: cx.stats,
        })
    }

    /// Eval-mode output shape after every top-level body layer.
    pub fn body_shapes<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Vec<(String, Vec<usize>)>> {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, false);
        let mut v = tape.constant(x.clone());
        let mut cx = Cx {
            tape: &mut tape,
            bind: &bind,
            mode: Mode::Eval,
            rng: None,
            stats: Vec::new(),
        };
        let mut out = Vec::with_capacity(self.body.len());
        for l in &self.body {
            v = cx.layer(l, v)?;
            out.push((super::accounting::layer_name(l), cx.tape.shape(v).to_vec()));
        }
        Ok(out)
    }

    /// Eval-mode logits for a batch, with no gradient bookkeeping.
    pub fn infer<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.infer_full(store, x)?.0)
    }

    /// Eval-mode logits and attention maps (if the head produces any).
    pub fn infer_full<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_mode(&mut tape, &bind, xv, Mode::Eval, None)?;
        let attention = out.attention.map(|a| tape.value(a).clone());
        Ok((tape.value(out.logits).clone(), attention))
    }
}

/// `relu(W F)` per class for a `[GlobalAvgPool, Linear]` head, detached.
fn cam_maps<T: Element>(cx: &mut Cx<'_, '_, T>, head: &[Layer], features: Var) -> Result<Var> {
    let Some(Layer::Linear(fc)) = head.last() else {
        return Err(Error::Contract("class activation maps need a linear classifier".into()));
    };
    let [n, c, h, w] = *cx.tape.shape(features) else {
        return Err(Error::dim("cam", "expected NCHW features"));
    };
    let f = cx.tape.detach(features);
    let wv = cx.p(&format!("{}.weight", fc.name))?;
    let wv = cx.tape.detach(wv);
    let f = cx.tape.reshape(f, &[n, c, h * w])?;
    let f = cx.tape.permute(f, &[0, 2, 1])?;
    let m = cx.tape.matmul_t(f, wv, false, true)?;
    let m = cx.tape.permute(m, &[0, 2, 1])?;
    let m = cx.tape.reshape(m, &[n, fc.out_f, h, w])?;
    cx.tape.relu(m)
}
