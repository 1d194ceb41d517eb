use serde::{Deserialize, Serialize};

use super::graph::{Head, LinearSpec, ModelGraph, Mode, PamSpec};
use super::{lrnet, resnet, vitfs};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrnetConfig {
    pub stage_widths: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    #[serde(default = "default_stem_stride")]
    pub stem_stride: usize,
    #[serde(default = "default_stem_kernel")]
    pub stem_kernel: usize,
    #[serde(default = "default_stage_strides")]
    pub stage_strides: Vec<usize>,
    pub num_classes: usize,
    pub input_size: usize,
}

fn default_stem_stride() -> usize {
    2
}
fn default_stem_kernel() -> usize {
    7
}
fn default_stage_strides() -> Vec<usize> {
    vec![1, 2, 2, 2, 2]
}

/// Standard four-stage ResNet with a 4x stem, kept for size comparisons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResnetConfig {
    pub stage_widths: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub num_classes: usize,
    pub input_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitfsConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_registers: usize,
    pub layerscale_init: f64,
    pub stochastic_depth_rate: f64,
    pub num_classes: usize,
    pub input_size: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Learned part attention module feeding bilinear attention pooling.
    Pam,
    /// Plain pooled classifier; attention comes from class activation maps.
    Cam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub backbone: Box<ArchSpec>,
    #[serde(default = "default_attention")]
    pub attention: AttentionKind,
    #[serde(default = "default_parts")]
    pub parts: usize,
    #[serde(default = "default_feature_scale")]
    pub feature_scale: f64,
}

fn default_attention() -> AttentionKind {
    AttentionKind::Pam
}
fn default_parts() -> usize {
    32
}
fn default_feature_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchSpec {
    Lrnet(LrnetConfig),
    Resnet(ResnetConfig),
    Vitfs(VitfsConfig),
    Teacher(TeacherConfig),
}

impl ArchSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            ArchSpec::Lrnet(c) => c.num_classes,
            ArchSpec::Resnet(c) => c.num_classes,
            ArchSpec::Vitfs(c) => c.num_classes,
            ArchSpec::Teacher(t) => t.backbone.num_classes(),
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            ArchSpec::Lrnet(c) => c.input_size,
            ArchSpec::Resnet(c) => c.input_size,
            ArchSpec::Vitfs(c) => c.input_size,
            ArchSpec::Teacher(t) => t.backbone.input_size(),
        }
    }

    /// Sets class count and input size everywhere they occur.
    pub fn set_task(&mut self, num_classes: usize, input_size: usize) {
        match self {
            ArchSpec::Lrnet(c) => (c.num_classes, c.input_size) = (num_classes, input_size),
            ArchSpec::Resnet(c) => (c.num_classes, c.input_size) = (num_classes, input_size),
            ArchSpec::Vitfs(c) => (c.num_classes, c.input_size) = (num_classes, input_size),
            ArchSpec::Teacher(t) => t.backbone.set_task(num_classes, input_size),
        }
    }

    pub fn is_teacher(&self) -> bool {
        matches!(self, ArchSpec::Teacher(_))
    }

    pub fn build(&self) -> Result<ModelGraph> {
        let (body, head) = match self {
            ArchSpec::Lrnet(c) => lrnet::build_lrnet(c)?,
            ArchSpec::Resnet(c) => resnet::build_resnet(c)?,
            ArchSpec::Vitfs(c) => vitfs::build_vitfs(c)?,
            ArchSpec::Teacher(t) => build_teacher(t)?,
        };
        Ok(ModelGraph {
            arch: self.clone(),
            input_size: self.input_size(),
            num_classes: self.num_classes(),
            body,
            head,
            mode: Mode::Train,
        })
    }
}

fn build_teacher(t: &TeacherConfig) -> Result<(Vec<super::graph::Layer>, Head)> {
    let (body, head, channels) = match t.backbone.as_ref() {
        ArchSpec::Lrnet(c) => {
            let (b, h) = lrnet::build_lrnet(c)?;
            (b, h, *c.stage_widths.last().unwrap())
        }
        ArchSpec::Resnet(c) => {
            let (b, h) = resnet::build_resnet(c)?;
            (b, h, *c.stage_widths.last().unwrap())
        }
        other => {
            return Err(Error::Config(format!(
                "teacher backbone must be convolutional, got {}",
                kind_name(other)
            )))
        }
    };
    match t.attention {
        AttentionKind::Cam => {
            let Head::Classifier { layers, .. } = head else { unreachable!() };
            Ok((body, Head::Classifier { layers, cam: true }))
        }
        AttentionKind::Pam => {
            if t.parts == 0 {
                return Err(Error::Config("teacher needs at least one attention part".into()));
            }
            let pam = PamSpec {
                name: "pam".into(),
                in_ch: channels,
                parts: t.parts,
                feature_scale: t.feature_scale,
                conv_bias: false,
                bn: true,
                fc: LinearSpec {
                    name: "head.fc".into(),
                    in_f: t.parts * channels,
                    out_f: t.backbone.num_classes(),
                    bias: true,
                    normal_std: None,
                },
            };
            Ok((body, Head::Pam(pam)))
        }
    }
}

fn kind_name(a: &ArchSpec) -> &'static str {
    match a {
        ArchSpec::Lrnet(_) => "lrnet",
        ArchSpec::Resnet(_) => "resnet",
        ArchSpec::Vitfs(_) => "vitfs",
        ArchSpec::Teacher(_) => "teacher",
    }
}

pub fn lrnet_config(blocks: [usize; 5], widths: [usize; 5], num_classes: usize, input_size: usize) -> LrnetConfig {
    LrnetConfig {
        stage_widths: widths.to_vec(),
        stage_blocks: blocks.to_vec(),
        stem_stride: 2,
        stem_kernel: 7,
        stage_strides: default_stage_strides(),
        num_classes,
        input_size,
    }
}

pub fn vitfs_t_config(num_classes: usize, input_size: usize) -> VitfsConfig {
    VitfsConfig {
        patch_size: 16,
        embed_dim: 192,
        depth: 12,
        heads: 3,
        mlp_ratio: 4.0,
        num_registers: 4,
        layerscale_init: 1e-4,
        stochastic_depth_rate: 0.1,
        num_classes,
        input_size,
    }
}

const LRNET_WIDTHS: [usize; 5] = [32, 64, 128, 256, 512];

/// Names accepted by [`preset`].
pub const PRESETS: &[&str] = &[
    "lrnet18",
    "lrnet34",
    "lrnet_tiny",
    "vitfs_t",
    "vitfs_tiny",
    "resnet18",
    "teacher_pam_<backbone>",
    "teacher_cam_<backbone>",
];

/// Architecture by preset name.
///
/// `lrnet_tiny` and `vitfs_tiny` are narrow variants for quick CPU runs.
/// `teacher_pam_<backbone>` wraps any convolutional preset with a part
/// attention head; `teacher_cam_<backbone>` keeps the plain classifier and
/// reports class activation maps instead.
pub fn preset(name: &str, num_classes: usize, input_size: usize) -> Result<ArchSpec> {
    if let Some(backbone) = name.strip_prefix("teacher_pam_") {
        return teacher(backbone, AttentionKind::Pam, num_classes, input_size);
    }
    if let Some(backbone) = name.strip_prefix("teacher_cam_") {
        return teacher(backbone, AttentionKind::Cam, num_classes, input_size);
    }
    let spec = match name {
        "lrnet18" => ArchSpec::Lrnet(lrnet_config([1, 2, 2, 2, 2], LRNET_WIDTHS, num_classes, input_size)),
        "lrnet34" => ArchSpec::Lrnet(lrnet_config([2, 3, 4, 4, 2], LRNET_WIDTHS, num_classes, input_size)),
        "lrnet_tiny" => ArchSpec::Lrnet(lrnet_config([1, 1, 1, 1, 1], [8, 16, 32, 64, 128], num_classes, input_size)),
        "resnet18" => ArchSpec::Resnet(ResnetConfig {
            stage_widths: vec![64, 128, 256, 512],
            stage_blocks: vec![2, 2, 2, 2],
            num_classes,
            input_size,
        }),
        "vitfs_t" => ArchSpec::Vitfs(vitfs_t_config(num_classes, input_size)),
        "vitfs_tiny" => ArchSpec::Vitfs(VitfsConfig {
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            num_registers: 2,
            layerscale_init: 1e-4,
            stochastic_depth_rate: 0.0,
            num_classes,
            input_size,
        }),
        other => {
            return Err(Error::Config(format!(
                "unknown architecture preset {other:?}; known: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(spec)
}

fn teacher(backbone: &str, attention: AttentionKind, num_classes: usize, input_size: usize) -> Result<ArchSpec> {
    let backbone = preset(backbone, num_classes, input_size)?;
    let spec = ArchSpec::Teacher(TeacherConfig {
        backbone: Box::new(backbone),
        attention,
        parts: default_parts(),
        feature_scale: default_feature_scale(),
    });
    spec.build()?;
    Ok(spec)
}
