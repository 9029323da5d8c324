//! Graph constructors for the three model families.

use crate::autodiff::{GraphBuilder, NodeId, OpGraph};
use crate::field::CHANNELS;
use crate::Result;

/// Stack of stride-1 periodic 3×3 convolutions with tanh between layers and
/// a zero-initialized head, plus the residual connection. Every op commutes
/// with grid translations, so the whole map is exactly equivariant.
pub fn equiv_ref(grid: usize, layers: usize, width: usize) -> Result<OpGraph> {
    let mut b = GraphBuilder::new(&[CHANNELS, grid, grid]);
    let input = b.input();
    let mut cur = input;
    for l in 1..=layers {
        let last = l == layers;
        let out_ch = if last { CHANNELS } else { width };
        cur = b.conv_opts(cur, out_ch, 3, last)?;
        if !last {
            cur = b.tanh(cur)?;
        }
    }
    let out = b.add(cur, input)?;
    b.finish(out)
}

/// Encoder stage width: `width` at full resolution, doubled once below it.
fn stage_width(width: usize, d: usize) -> usize {
    if d == 0 {
        width
    } else {
        2 * width
    }
}

/// Multiscale conv emulator: conv+tanh stages, 2×2 average-pool encoder,
/// nearest-neighbour upsampling with skip concatenation, zero-init head,
/// residual output.
pub fn conv_unet(grid: usize, depth: usize, width: usize) -> Result<OpGraph> {
    let mut b = GraphBuilder::new(&[CHANNELS, grid, grid]);
    let input = b.input();

    let mut skips: Vec<NodeId> = Vec::with_capacity(depth);
    let mut cur = b.conv(input, stage_width(width, 0), 3)?;
    cur = b.tanh(cur)?;
    skips.push(cur);
    for d in 1..=depth {
        cur = b.avg_pool2(cur)?;
        cur = b.conv(cur, stage_width(width, d), 3)?;
        cur = b.tanh(cur)?;
        if d < depth {
            skips.push(cur);
        }
    }
    for d in (0..depth).rev() {
        cur = b.upsample2(cur)?;
        cur = b.concat_channels(cur, skips[d])?;
        cur = b.conv(cur, stage_width(width, d), 3)?;
        cur = b.tanh(cur)?;
    }
    let head = b.conv_opts(cur, CHANNELS, 3, true)?;
    let out = b.add(head, input)?;
    b.finish(out)
}

/// Patch-token emulator: stride-p patch embedding, optional learned position
/// embeddings, then `layers` blocks of single-head attention and a per-token
/// tanh channel mix, both residual. A zero-init per-token head maps back to
/// patches.
pub fn patch_mixer(
    grid: usize,
    patch: usize,
    layers: usize,
    width: usize,
    pos_embed: bool,
) -> Result<OpGraph> {
    let mut b = GraphBuilder::new(&[CHANNELS, grid, grid]);
    let input = b.input();

    let mut cur = b.patch_embed(input, width, patch)?;
    if pos_embed {
        cur = b.param_add(cur)?;
    }
    let scale = 1.0 / (width as f64).sqrt();
    for _ in 0..layers {
        let q = b.dense(cur, width)?;
        let k = b.dense(cur, width)?;
        let v = b.dense(cur, width)?;
        let scores = b.matmul(q, k, true)?;
        let scaled = b.scale(scores, scale)?;
        let attn = b.softmax_rows(scaled)?;
        let gathered = b.matmul(attn, v, false)?;
        cur = b.add(cur, gathered)?;

        let mixed = b.dense(cur, width)?;
        let mixed = b.tanh(mixed)?;
        cur = b.add(cur, mixed)?;
    }
    let head = b.dense_opts(cur, CHANNELS * patch * patch, true)?;
    let delta = b.patch_unembed(head, CHANNELS, patch)?;
    let out = b.add(delta, input)?;
    b.finish(out)
}
