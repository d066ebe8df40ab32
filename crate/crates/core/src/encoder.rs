//! Hierarchical shifted-window transformer encoder.
//!
//! Four stages; every stage after the first starts with a 2x2 patch merge
//! (half resolution, double width), and each stage runs pairs of blocks that
//! alternate regular and cyclically shifted window attention. When a stage's
//! grid is no larger than the configured window, the stage uses one window
//! covering the whole grid and no shift.

use std::sync::Arc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Initializer, Scope};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
/// Additive score for token pairs that must not attend to each other.
pub const MASK_VALUE: f64 = -1e4;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub in_chans: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            img_size: 64,
            patch_size: 4,
            in_chans: 3,
            embed_dim: 32,
            depths: vec![2, 2, 2, 2],
            heads: vec![2, 4, 8, 16],
            window: 4,
            mlp_ratio: 4.0,
        }
    }
}

impl EncoderConfig {
    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    /// Token grid side length of `stage`.
    pub fn stage_resolution(&self, stage: usize) -> usize {
        (self.img_size / self.patch_size) >> stage
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Window side actually used at `stage`.
    pub fn stage_window(&self, stage: usize) -> usize {
        self.window.min(self.stage_resolution(stage))
    }

    /// Shift of the second block of each pair at `stage`.
    pub fn stage_shift(&self, stage: usize) -> usize {
        if self.stage_resolution(stage) <= self.window {
            0
        } else {
            self.window / 2
        }
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        ((dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.img_size == 0 || self.patch_size == 0 || self.embed_dim == 0 || self.in_chans == 0 {
            return bad("encoder sizes must be positive".into());
        }
        if !self.img_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "img_size {} not divisible by patch_size {}",
                self.img_size, self.patch_size
            ));
        }
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return bad(format!(
                "depths {:?} and heads {:?} must be non-empty and the same length",
                self.depths, self.heads
            ));
        }
        if self.window == 0 || !(self.mlp_ratio > 0.0) {
            return bad("window and mlp_ratio must be positive".into());
        }
        let grid = self.img_size / self.patch_size;
        if !grid.is_multiple_of(1 << (self.num_stages() - 1)) {
            return bad(format!(
                "token grid {grid} cannot be halved {} times",
                self.num_stages() - 1
            ));
        }
        if !grid.is_multiple_of(self.window) {
            return bad(format!("token grid {grid} not divisible by window {}", self.window));
        }
        for s in 0..self.num_stages() {
            let (res, win) = (self.stage_resolution(s), self.stage_window(s));
            if res % win != 0 {
                return bad(format!("stage {s}: grid {res} not divisible by window {win}"));
            }
            if self.depths[s] == 0 || !self.depths[s].is_multiple_of(2) {
                return bad(format!(
                    "stage {s}: depth {} must be a positive even number",
                    self.depths[s]
                ));
            }
            if self.heads[s] == 0 || !self.stage_dim(s).is_multiple_of(self.heads[s]) {
                return bad(format!(
                    "stage {s}: width {} not divisible by {} heads",
                    self.stage_dim(s),
                    self.heads[s]
                ));
            }
        }
        Ok(())
    }
}

fn shape4(x: Var<'_>, what: &str) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(x.shape())
        .map_err(|_| Error::dim(format!("{what} expects a rank-4 tensor, got {:?}", x.shape())))
}

/// `x @ weight + bias` over the last axis.
pub(crate) fn linear<'t>(x: Var<'t>, p: &Scope<'_, 't>) -> Result<Var<'t>> {
    x.matmul(p.var("weight")?)?.add(p.var("bias")?)
}

pub(crate) fn norm<'t>(x: Var<'t>, p: &Scope<'_, 't>) -> Result<Var<'t>> {
    x.layer_norm(p.var("weight")?, p.var("bias")?, NORM_EPS)
}

/// Splits `[N, 3, H, W]` into `patch x patch` tiles, maps each flattened tile
/// linearly to `embed_dim` channels and normalizes: `[N, H/p, W/p, C]`.
pub fn patch_embed<'t>(image: Var<'t>, p: &Scope<'_, 't>, cfg: &EncoderConfig) -> Result<Var<'t>> {
    let [n, c, h, w] = shape4(image, "patch_embed")?;
    let ps = cfg.patch_size;
    if h % ps != 0 || w % ps != 0 || c != cfg.in_chans {
        return Err(Error::dim(format!(
            "patch_embed: image {:?} incompatible with patch {ps} / {} channels",
            image.shape(),
            cfg.in_chans
        )));
    }
    let (gh, gw) = (h / ps, w / ps);
    let tiles = image
        .reshape([n, c, gh, ps, gw, ps])?
        .permute([0, 2, 4, 1, 3, 5])?
        .reshape([n, gh, gw, c * ps * ps])?;
    norm(linear(tiles, &p.sub("proj"))?, &p.sub("norm"))
}

/// Non-overlapping `window x window` tiles of a channel-last map, with the
/// batch folded into the window axis: `[N * nW, window^2, C]`.
#[derive(Debug, Clone, Copy)]
pub struct WindowGrid<'t> {
    pub windows: Var<'t>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    /// Cyclic shift `(dy, dx)` applied to the map before partitioning.
    pub shift: (isize, isize),
}

impl WindowGrid<'_> {
    pub fn windows_per_image(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }
}

pub fn window_partition<'t>(x: Var<'t>, window: usize) -> Result<WindowGrid<'t>> {
    let [n, h, w, c] = shape4(x, "window_partition")?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::dim(format!(
            "window_partition: {h}x{w} not divisible by window {window}"
        )));
    }
    let m = window;
    let windows = x
        .reshape([n, h / m, m, w / m, m, c])?
        .permute([0, 1, 3, 2, 4, 5])?
        .reshape([n * (h / m) * (w / m), m * m, c])?;
    Ok(WindowGrid {
        windows,
        batch: n,
        height: h,
        width: w,
        window,
        shift: (0, 0),
    })
}

pub fn window_reverse<'t>(grid: &WindowGrid<'t>) -> Result<Var<'t>> {
    let shape = grid.windows.shape();
    let m = grid.window;
    let (nh, nw) = (grid.height / m, grid.width / m);
    if shape.len() != 3 || shape[0] != grid.batch * nh * nw || shape[1] != m * m {
        return Err(Error::dim(format!(
            "window_reverse: windows {shape:?} do not match grid {}x{}x{} / {m}",
            grid.batch, grid.height, grid.width
        )));
    }
    let c = shape[2];
    grid.windows
        .reshape([grid.batch, nh, nw, m, m, c])?
        .permute([0, 1, 3, 2, 4, 5])?
        .reshape([grid.batch, grid.height, grid.width, c])
}

/// `out[y][x] = in[(y + dy) mod H][(x + dx) mod W]` on `[N, H, W, C]`.
pub fn cyclic_shift<'t>(x: Var<'t>, dy: isize, dx: isize) -> Result<Var<'t>> {
    shape4(x, "cyclic_shift")?;
    x.roll(&[0, dy, dx, 0])
}

/// Additive attention mask for windows taken after a cyclic shift by
/// `shift`: `[nW, window^2, window^2]`, zero for token pairs that come from
/// the same contiguous region of the unshifted map and [`MASK_VALUE`]
/// otherwise.
pub fn shift_attention_mask(height: usize, width: usize, window: usize, shift: usize) -> Result<Tensor> {
    if window == 0 || !height.is_multiple_of(window) || !width.is_multiple_of(window) {
        return Err(Error::dim(format!(
            "shift_attention_mask: {height}x{width} not divisible by window {window}"
        )));
    }
    if shift >= window {
        return Err(Error::Parameter(format!(
            "shift {shift} must be smaller than window {window}"
        )));
    }
    let bands = |n: usize| {
        let cuts = [n - window, n - shift, n];
        move |i: usize| cuts.iter().position(|&c| i < c).unwrap_or(2)
    };
    let (band_y, band_x) = (bands(height), bands(width));
    let region = |y: usize, x: usize| band_y(y) * 3 + band_x(x);
    let (nh, nw, l) = (height / window, width / window, window * window);
    let mut data = Vec::with_capacity(nh * nw * l * l);
    for wy in 0..nh {
        for wx in 0..nw {
            let ids: Vec<usize> = (0..l)
                .map(|t| region(wy * window + t / window, wx * window + t % window))
                .collect();
            for &a in &ids {
                data.extend(ids.iter().map(|&b| if a == b { 0.0 } else { MASK_VALUE }));
            }
        }
    }
    Tensor::new([nh * nw, l, l], data)
}

/// Index into the `(2M-1)^2` relative-position table for every token pair of
/// an `M x M` window, row-major over `(query, key)`.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let m = window as isize;
    let coords: Vec<(isize, isize)> = (0..m * m).map(|t| (t / m, t % m)).collect();
    let mut idx = Vec::with_capacity(coords.len() * coords.len());
    for &(qy, qx) in &coords {
        for &(ky, kx) in &coords {
            idx.push(((qy - ky + m - 1) * (2 * m - 1) + (qx - kx + m - 1)) as usize);
        }
    }
    idx
}

/// Multi-head self-attention inside each window of `grid`, plus the
/// attention probabilities `[N * nW, heads, L, L]`.
///
/// Parameters under `p`: `qkv.{weight,bias}`, `proj.{weight,bias}` and
/// `relative_position_bias_table: [(2M-1)^2, heads]`.
pub fn window_msa_detailed<'t>(
    grid: &WindowGrid<'t>,
    p: &Scope<'_, 't>,
    heads: usize,
    mask: Option<Var<'t>>,
) -> Result<(WindowGrid<'t>, Var<'t>)> {
    let &[b, l, c] = grid.windows.shape().as_slice() else {
        return Err(Error::dim("window_msa expects [windows, tokens, channels]"));
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::dim(format!("window_msa: {c} channels over {heads} heads")));
    }
    let d = c / heads;
    let qkv = linear(grid.windows, &p.sub("qkv"))?
        .reshape([b, l, 3, heads, d])?
        .permute([2, 0, 3, 1, 4])?;
    let part = |i| qkv.narrow(0, i, 1)?.reshape([b, heads, l, d]);
    let (q, k, v) = (part(0)?.scale((d as f64).powf(-0.5))?, part(1)?, part(2)?);

    let table = p.var("relative_position_bias_table")?;
    let bias = table
        .index_select(Arc::new(relative_position_index(grid.window)))?
        .reshape([l, l, heads])?
        .permute([2, 0, 1])?;
    let mut scores = q.matmul_t(k)?.add(bias)?;
    if let Some(mask) = mask {
        let nw = grid.windows_per_image();
        if mask.shape() != [nw, l, l] {
            return Err(Error::dim(format!(
                "window_msa: mask {:?}, expected [{nw}, {l}, {l}]",
                mask.shape()
            )));
        }
        scores = scores
            .reshape([b / nw, nw, heads, l, l])?
            .add(mask.reshape([nw, 1, l, l])?)?
            .reshape([b, heads, l, l])?;
    }
    let probs = scores.softmax()?;
    let out = probs.matmul(v)?.permute([0, 2, 1, 3])?.reshape([b, l, c])?;
    let out = linear(out, &p.sub("proj"))?;
    Ok((WindowGrid { windows: out, ..*grid }, probs))
}

pub fn window_msa<'t>(
    grid: &WindowGrid<'t>,
    p: &Scope<'_, 't>,
    heads: usize,
    mask: Option<Var<'t>>,
) -> Result<WindowGrid<'t>> {
    window_msa_detailed(grid, p, heads, mask).map(|(g, _)| g)
}

/// Window attention on a channel-last map, optionally on the cyclically
/// shifted grid (with the region mask), returned in the original layout.
pub fn shifted_window_attention<'t>(
    x: Var<'t>,
    p: &Scope<'_, 't>,
    heads: usize,
    window: usize,
    shift: usize,
) -> Result<Var<'t>> {
    let [_, h, w, _] = shape4(x, "window attention")?;
    let tape = x.tape();
    let s = shift as isize;
    let shifted = if shift > 0 { cyclic_shift(x, s, s)? } else { x };
    let grid = WindowGrid {
        shift: (s, s),
        ..window_partition(shifted, window)?
    };
    let mask = if shift > 0 {
        Some(tape.constant(shift_attention_mask(h, w, window, shift)?))
    } else {
        None
    };
    let out = window_reverse(&window_msa(&grid, p, heads, mask)?)?;
    if shift > 0 {
        cyclic_shift(out, -s, -s)
    } else {
        Ok(out)
    }
}

fn mlp<'t>(x: Var<'t>, p: &Scope<'_, 't>) -> Result<Var<'t>> {
    linear(linear(x, &p.sub("fc1"))?.gelu()?, &p.sub("fc2"))
}

/// One pre-norm transformer block with residuals:
/// `x + attn(LN(x))`, then `+ MLP(LN(.))`.
pub fn swin_block<'t>(
    x: Var<'t>,
    p: &Scope<'_, 't>,
    heads: usize,
    window: usize,
    shift: usize,
) -> Result<Var<'t>> {
    let attn = shifted_window_attention(norm(x, &p.sub("norm1"))?, &p.sub("attn"), heads, window, shift)?;
    let x = x.add(attn)?;
    x.add(mlp(norm(x, &p.sub("norm2"))?, &p.sub("mlp"))?)
}

/// A regular-window block followed by a shifted-window block. `p` holds
/// `blocks.{first}` and `blocks.{first + 1}`.
pub fn swin_block_pair<'t>(
    x: Var<'t>,
    p: &Scope<'_, 't>,
    first: usize,
    heads: usize,
    window: usize,
    shift: usize,
) -> Result<Var<'t>> {
    let x = swin_block(x, &p.sub(format!("blocks.{first}")), heads, window, 0)?;
    swin_block(x, &p.sub(format!("blocks.{}", first + 1)), heads, window, shift)
}

/// Concatenates each 2x2 neighbourhood (4C), normalizes, and projects to 2C.
pub fn patch_merge<'t>(x: Var<'t>, p: &Scope<'_, 't>) -> Result<Var<'t>> {
    let [n, h, w, c] = shape4(x, "patch_merge")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("patch_merge needs even extents, got {h}x{w}")));
    }
    // Channel order within the 4C vector: (y0,x0), (y1,x0), (y0,x1), (y1,x1).
    let merged = x
        .reshape([n, h / 2, 2, w / 2, 2, c])?
        .permute([0, 1, 3, 4, 2, 5])?
        .reshape([n, h / 2, w / 2, 4 * c])?;
    norm(merged, &p.sub("norm"))?.matmul(p.var("reduction.weight")?)
}

/// Patch-embedding features plus the output of every stage.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<'t> {
    /// `[N, H/p, W/p, C]`, before any transformer block.
    pub patch: Var<'t>,
    /// Stage outputs, `[N, H/p/2^s, W/p/2^s, C*2^s]`.
    pub stages: Vec<Var<'t>>,
}

pub fn encode<'t>(image: Var<'t>, p: &Scope<'_, 't>, cfg: &EncoderConfig) -> Result<FeaturePyramid<'t>> {
    let [_, _, h, w] = shape4(image, "encode")?;
    if h != cfg.img_size || w != cfg.img_size {
        return Err(Error::dim(format!(
            "encode: image {h}x{w}, configured for {0}x{0}",
            cfg.img_size
        )));
    }
    let patch = patch_embed(image, &p.sub("patch_embed"), cfg)?;
    let mut stages = Vec::with_capacity(cfg.num_stages());
    let mut x = patch;
    for s in 0..cfg.num_stages() {
        let sp = p.sub(format!("stages.{s}"));
        if s > 0 {
            x = patch_merge(x, &sp.sub("merge"))?;
        }
        for first in (0..cfg.depths[s]).step_by(2) {
            x = swin_block_pair(x, &sp, first, cfg.heads[s], cfg.stage_window(s), cfg.stage_shift(s))?;
        }
        stages.push(x);
    }
    Ok(FeaturePyramid { patch, stages })
}

/// Parameters of one window-attention unit of width `dim`.
pub(crate) fn init_attention(init: &mut Initializer, prefix: &str, dim: usize, heads: usize, window: usize) {
    init.linear(&format!("{prefix}.qkv"), dim, 3 * dim, true);
    init.linear(&format!("{prefix}.proj"), dim, dim, true);
    let side = 2 * window - 1;
    init.zeros(&format!("{prefix}.relative_position_bias_table"), vec![side * side, heads]);
}

pub(crate) fn init_mlp(init: &mut Initializer, prefix: &str, dim: usize, hidden: usize) {
    init.linear(&format!("{prefix}.fc1"), dim, hidden, true);
    init.linear(&format!("{prefix}.fc2"), hidden, dim, true);
}

pub fn init_block(init: &mut Initializer, prefix: &str, dim: usize, heads: usize, window: usize, hidden: usize) {
    init.norm(&format!("{prefix}.norm1"), dim);
    init_attention(init, &format!("{prefix}.attn"), dim, heads, window);
    init.norm(&format!("{prefix}.norm2"), dim);
    init_mlp(init, &format!("{prefix}.mlp"), dim, hidden);
}

pub fn init_encoder(init: &mut Initializer, prefix: &str, cfg: &EncoderConfig) {
    let patch_in = cfg.in_chans * cfg.patch_size * cfg.patch_size;
    init.linear(&format!("{prefix}.patch_embed.proj"), patch_in, cfg.embed_dim, true);
    init.norm(&format!("{prefix}.patch_embed.norm"), cfg.embed_dim);
    for s in 0..cfg.num_stages() {
        let dim = cfg.stage_dim(s);
        if s > 0 {
            let prev = cfg.stage_dim(s - 1);
            init.norm(&format!("{prefix}.stages.{s}.merge.norm"), 4 * prev);
            init.linear(&format!("{prefix}.stages.{s}.merge.reduction"), 4 * prev, dim, false);
        }
        for j in 0..cfg.depths[s] {
            init_block(
                init,
                &format!("{prefix}.stages.{s}.blocks.{j}"),
                dim,
                cfg.heads[s],
                cfg.stage_window(s),
                cfg.mlp_hidden(dim),
            );
        }
    }
}
