use super::arch::LrnetConfig;
use super::graph::{Head, Layer};
use super::resnet::{bn, conv, gap_classifier, stages};
use crate::error::{Error, Result};

pub fn validate_lrnet(c: &LrnetConfig) -> Result<()> {
    let fail = |m: String| Err(Error::Config(format!("lrnet: {m}")));
    if c.stage_widths.len() != 5 || c.stage_blocks.len() != 5 || c.stage_strides.len() != 5 {
        return fail("exactly five stage widths, block counts and strides are required".into());
    }
    if c.stage_strides[0] != 1 {
        return fail(format!("the first stage must keep resolution, got stride {}", c.stage_strides[0]));
    }
    let reduction = c.stem_stride * c.stage_strides.iter().product::<usize>();
    if reduction != 32 {
        return fail(format!("stem stride times stage strides must be 32, got {reduction}"));
    }
    if c.stage_blocks.contains(&0) || c.stage_widths.contains(&0) || c.stem_kernel % 2 == 0 {
        return fail("block counts and widths must be positive and the stem kernel odd".into());
    }
    if c.num_classes == 0 || c.input_size == 0 || c.input_size % 32 != 0 {
        return fail(format!(
            "needs classes >= 1 and an input size divisible by 32, got {} / {}",
            c.num_classes, c.input_size
        ));
    }
    Ok(())
}

/// Stem conv + BN + ReLU with no pooling, then five residual stages.
pub fn build_lrnet(c: &LrnetConfig) -> Result<(Vec<Layer>, Head)> {
    validate_lrnet(c)?;
    let w0 = c.stage_widths[0];
    let mut body = vec![
        conv("stem.conv".into(), 3, w0, c.stem_kernel, c.stem_stride),
        bn("stem.bn".into(), w0),
        Layer::Relu,
    ];
    stages(&mut body, w0, &c.stage_widths, &c.stage_blocks, &c.stage_strides);
    Ok((body, gap_classifier(c.stage_widths[4], c.num_classes)))
}
