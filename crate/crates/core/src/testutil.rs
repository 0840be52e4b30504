use crate::autograd::Var;
use crate::backbone::{BackboneConfig, Graph};
use crate::ensemble::PatchConfig;
use crate::error::Result;
use crate::gradcheck::{check_params, worst};
use crate::params::{EmbedDims, ModelConfig, ParamStore};

pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        d: 8,
        heads: 2,
        head_dim: 4,
        ffn_width: 16,
        dropout: 0.0,
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: tiny_backbone(),
        patch: PatchConfig {
            slices_a: 2,
            slices_b: 2,
            max_blocks: 4,
            proj_depth: 1,
        },
        embed: EmbedDims { d_a: 12, d_b: 8, d_p: 6 },
        func_layers: 1,
        text_layers: 1,
        lord_layers: 1,
        k2: 3,
        max_words: 6,
        vocab_size: 16,
        init_temperature: 0.07,
    }
}

/// Worst per-tensor relative error between tape and central-difference
/// gradients over every parameter in `store`.
pub fn fd_param_check(store: &ParamStore, f: impl Fn(&mut Graph) -> Result<Var>) -> f64 {
    worst(&check_params(store, &[], 1e-5, f).unwrap())
}
