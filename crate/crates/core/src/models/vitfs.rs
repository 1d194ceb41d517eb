use super::arch::VitfsConfig;
use super::graph::{BlockSpec, ConvSpec, Head, Layer, LinearSpec};
use super::resnet::{bn, conv};
use crate::error::{Error, Result};

pub fn validate_vitfs(c: &VitfsConfig) -> Result<()> {
    let fail = |m: String| Err(Error::Config(format!("vitfs: {m}")));
    if c.heads == 0 || c.embed_dim % c.heads != 0 {
        return fail(format!("embed_dim {} not divisible by heads {}", c.embed_dim, c.heads));
    }
    if c.embed_dim == 0 || c.embed_dim % 4 != 0 {
        return fail(format!("embed_dim {} must be a positive multiple of 4", c.embed_dim));
    }
    if c.patch_size < 2 || !c.patch_size.is_power_of_two() {
        return fail(format!("patch_size {} must be a power of two >= 2", c.patch_size));
    }
    if c.input_size == 0 || c.input_size % c.patch_size != 0 {
        return fail(format!("input_size {} not divisible by patch_size {}", c.input_size, c.patch_size));
    }
    let stem_layers = c.patch_size.trailing_zeros() as usize;
    if c.embed_dim % (1 << (stem_layers - 1)) != 0 {
        return fail(format!("embed_dim {} cannot be halved {} times for the stem", c.embed_dim, stem_layers - 1));
    }
    if !(0.0..1.0).contains(&c.stochastic_depth_rate) || c.layerscale_init < 0.0 || c.mlp_ratio <= 0.0 {
        return fail("stochastic depth must be in [0, 1), layerscale init >= 0, mlp ratio > 0".into());
    }
    if c.depth == 0 || c.num_classes == 0 {
        return fail("depth and num_classes must be positive".into());
    }
    Ok(())
}

/// Stride-2 conv stem, fixed positions, registers, BN transformer blocks,
/// mean over patch tokens, BN, linear head.
pub fn build_vitfs(c: &VitfsConfig) -> Result<(Vec<Layer>, Head)> {
    validate_vitfs(c)?;
    let stem_layers = c.patch_size.trailing_zeros() as usize;
    let mut body = Vec::new();
    let mut in_ch = 3;
    for i in 0..stem_layers {
        let out = c.embed_dim >> (stem_layers - 1 - i);
        body.push(conv(format!("stem.conv{i}"), in_ch, out, 3, 2));
        body.push(bn(format!("stem.bn{i}"), out));
        body.push(Layer::Relu);
        in_ch = out;
    }
    body.push(Layer::Conv2d(ConvSpec {
        name: "stem.proj".into(),
        in_ch,
        out_ch: c.embed_dim,
        kernel: 1,
        stride: 1,
        padding: 0,
        bias: true,
    }));
    let grid = c.input_size / c.patch_size;
    body.push(Layer::Tokenize);
    body.push(Layer::SinusoidalPos2d {
        h: grid,
        w: grid,
        dim: c.embed_dim,
    });
    if c.num_registers > 0 {
        body.push(Layer::Registers {
            name: "registers".into(),
            count: c.num_registers,
            dim: c.embed_dim,
        });
    }
    let hidden = (c.embed_dim as f64 * c.mlp_ratio).round() as usize;
    for i in 0..c.depth {
        let drop_prob = if c.depth > 1 {
            c.stochastic_depth_rate * i as f64 / (c.depth - 1) as f64
        } else {
            0.0
        };
        body.push(Layer::TransformerBlock(BlockSpec {
            name: format!("blocks.{i}"),
            dim: c.embed_dim,
            heads: c.heads,
            mlp_hidden: hidden,
            drop_prob,
            layerscale_init: c.layerscale_init,
            norm1: true,
            norm2: true,
        }));
    }
    let head = Head::Classifier {
        layers: vec![
            Layer::TokenMeanPool { skip: c.num_registers },
            bn("head.bn".into(), c.embed_dim),
            Layer::Linear(LinearSpec {
                name: "head.fc".into(),
                in_f: c.embed_dim,
                out_f: c.num_classes,
                bias: true,
                normal_std: Some(0.02),
            }),
        ],
        cam: false,
    };
    Ok((body, head))
}
