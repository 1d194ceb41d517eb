//! Network definitions: LRNet, ViTFS, the reference ResNet and the
//! attention teacher, with parameter/FLOP accounting and BN folding.

pub mod accounting;
pub mod arch;
pub mod fold;
pub mod graph;
pub mod lrnet;
pub mod params;
pub mod posenc;
pub mod resnet;
pub mod vitfs;

pub use accounting::{count_flops, count_params, FlopReport};
pub use arch::{preset, ArchSpec, AttentionKind, LrnetConfig, ResnetConfig, TeacherConfig, VitfsConfig};
pub use fold::{fold_batch_norms, fold_check, FoldCheckReport};
pub use graph::{
    attention_part_features, bilinear_attention_pool, pam_forward, residual_branch, ForwardOutput, Head, Layer,
    ModelGraph, Mode,
};
pub use params::{Binding, ParamStore};
pub use posenc::sinusoidal_pos_enc_2d;

use crate::backend::Element;
use crate::error::Result;

/// A graph together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub graph: ModelGraph,
    pub params: ParamStore<T>,
}

impl<T: Element> Model<T> {
    pub fn build(arch: &ArchSpec, seed: u64) -> Result<Self> {
        let graph = arch.build()?;
        let params = graph.init_params(seed)?;
        Ok(Model { graph, params })
    }

    pub fn from_parts(graph: ModelGraph, params: ParamStore<T>) -> Result<Self> {
        graph.check_store(&params)?;
        Ok(Model { graph, params })
    }
}
