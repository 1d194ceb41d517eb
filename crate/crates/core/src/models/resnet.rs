use super::arch::ResnetConfig;
use super::graph::{ConvSpec, Head, Layer, LinearSpec};
use crate::error::{Error, Result};

pub(crate) fn conv(name: String, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Layer {
    Layer::Conv2d(ConvSpec {
        name,
        in_ch,
        out_ch,
        kernel,
        stride,
        padding: kernel / 2,
        bias: false,
    })
}

pub(crate) fn bn(name: String, channels: usize) -> Layer {
    Layer::BatchNorm { name, channels }
}

/// Two 3x3 conv + BN, identity shortcut or 1x1 projection when the shape changes.
pub fn basic_block(name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Layer {
    let body = vec![
        conv(format!("{name}.conv1"), in_ch, out_ch, 3, stride),
        bn(format!("{name}.bn1"), out_ch),
        Layer::Relu,
        conv(format!("{name}.conv2"), out_ch, out_ch, 3, 1),
        bn(format!("{name}.bn2"), out_ch),
    ];
    let shortcut = if stride != 1 || in_ch != out_ch {
        vec![
            conv(format!("{name}.down.conv"), in_ch, out_ch, 1, stride),
            bn(format!("{name}.down.bn"), out_ch),
        ]
    } else {
        Vec::new()
    };
    Layer::Residual { body, shortcut }
}

pub(crate) fn stages(layers: &mut Vec<Layer>, mut in_ch: usize, widths: &[usize], blocks: &[usize], strides: &[usize]) {
    for (s, ((&w, &nb), &st)) in widths.iter().zip(blocks).zip(strides).enumerate() {
        for b in 0..nb {
            let stride = if b == 0 { st } else { 1 };
            layers.push(basic_block(&format!("stage{}.block{b}", s + 1), in_ch, w, stride));
            in_ch = w;
        }
    }
}

pub(crate) fn gap_classifier(in_f: usize, num_classes: usize) -> Head {
    Head::Classifier {
        layers: vec![
            Layer::GlobalAvgPool,
            Layer::Linear(LinearSpec {
                name: "head.fc".into(),
                in_f,
                out_f: num_classes,
                bias: true,
                normal_std: None,
            }),
        ],
        cam: false,
    }
}

/// Reference ResNet: 7x7 stride-2 stem, 3x3 stride-2 max pool, four stages.
pub fn build_resnet(c: &ResnetConfig) -> Result<(Vec<Layer>, Head)> {
    if c.stage_widths.len() != 4 || c.stage_blocks.len() != 4 {
        return Err(Error::Config("resnet needs exactly four stage widths and block counts".into()));
    }
    if c.num_classes == 0 || c.input_size == 0 || c.input_size % 32 != 0 {
        return Err(Error::Config(format!(
            "resnet needs classes >= 1 and an input size divisible by 32, got {} / {}",
            c.num_classes, c.input_size
        )));
    }
    let w0 = c.stage_widths[0];
    let mut body = vec![
        conv("stem.conv".into(), 3, w0, 7, 2),
        bn("stem.bn".into(), w0),
        Layer::Relu,
        Layer::MaxPool2d {
            kernel: 3,
            stride: 2,
            padding: 1,
        },
    ];
    stages(&mut body, w0, &c.stage_widths, &c.stage_blocks, &[1, 2, 2, 2]);
    Ok((body, gap_classifier(c.stage_widths[3], c.num_classes)))
}
