use serde::Serialize;

use super::config::{derive_dims, ModelConfig};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamGroup {
    pub name: &'static str,
    pub count: usize,
}

/// Learnable parameter totals per module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub groups: Vec<ParamGroup>,
    pub total: usize,
}

impl ParamCount {
    pub fn group(&self, name: &str) -> usize {
        self.groups.iter().find(|g| g.name == name).map_or(0, |g| g.count)
    }

    /// Total in millions.
    pub fn millions(&self) -> f64 {
        self.total as f64 / 1e6
    }
}

fn conv(c_in: usize, c_out: usize, k: usize) -> usize {
    c_out * c_in * k * k + c_out
}

fn linear(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

/// Parameters of one Transformer block of width `d` with FFN factor `f`.
pub fn trans_block_params(d: usize, f: usize) -> usize {
    let norms = 2 * 2 * d;
    let attn = 4 * linear(d, d);
    let ffn = linear(d, f * d) + linear(f * d, d);
    norms + attn + ffn
}

/// Closed-form learnable parameter count. Batch-norm running statistics are
/// buffers and not counted.
pub fn count_params(cfg: &ModelConfig) -> Result<ParamCount> {
    let dims = derive_dims(cfg)?;
    let l = cfg.levels;

    let encoder: usize = dims
        .levels
        .iter()
        .map(|lv| {
            let c = lv.channels;
            let c_in = if lv.level == 0 { cfg.in_channels } else { c / 2 };
            conv(c_in, c, 3) + conv(c, c, 3) + conv(c_in, c, cfg.skip_kernel) + 3 * 2 * c
        })
        .sum();
    let dsl: usize = dims.levels[..l]
        .iter()
        .filter_map(|lv| lv.dsl_channels.map(|o| linear(lv.channels, o)))
        .sum();
    let pos = dims.tokens * dims.levels[l].token_dim;
    let blocks: usize = dims
        .levels
        .iter()
        .map(|lv| cfg.blocks * trans_block_params(lv.token_dim, cfg.ffn_factor))
        .sum();
    let proj: usize = (1..=l)
        .map(|i| linear(dims.levels[i].token_dim, dims.levels[i - 1].token_dim))
        .sum();
    let head = conv(dims.head_channels, cfg.classes, 1);

    let groups = vec![
        ParamGroup { name: "encoder", count: encoder },
        ParamGroup { name: "skip_dsl", count: dsl },
        ParamGroup { name: "bridge_pos", count: pos },
        ParamGroup { name: "decoder_blocks", count: blocks },
        ParamGroup { name: "decoder_proj", count: proj },
        ParamGroup { name: "head", count: head },
    ];
    let total = groups.iter().map(|g| g.count).sum();
    Ok(ParamCount { groups, total })
}
