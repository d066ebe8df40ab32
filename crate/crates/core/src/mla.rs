//! Multi-level aggregation over a channel-first pyramid of equal width.
//!
//! Level 0 is the finest; each following level halves the resolution.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Initializer, Scope};

/// Every intermediate of the aggregation, kept for inspection.
#[derive(Debug, Clone)]
pub struct MlaState<'t> {
    pub z1: Vec<Var<'t>>,
    pub z2: Vec<Var<'t>>,
    pub z3: Vec<Var<'t>>,
    /// Full-resolution logits per level.
    pub level_maps: Vec<Var<'t>>,
    pub fused_map: Var<'t>,
}

fn nchw(x: Var<'_>) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(x.shape())
        .map_err(|_| Error::dim(format!("expected [N, C, H, W], got {:?}", x.shape())))
}

/// Checks that `coarse` has exactly half the resolution of `fine`.
fn check_pair(fine: Var<'_>, coarse: Var<'_>) -> Result<()> {
    let (f, c) = (nchw(fine)?, nchw(coarse)?);
    if f[0] != c[0] || f[2] != 2 * c[2] || f[3] != 2 * c[3] {
        return Err(Error::dim(format!(
            "pyramid levels {:?} and {:?} are not a 2x pair",
            fine.shape(),
            coarse.shape()
        )));
    }
    Ok(())
}

fn conv<'t>(x: Var<'t>, p: &Scope<'_, 't>, padding: usize) -> Result<Var<'t>> {
    x.conv2d(p.var("weight")?, p.var("bias")?, padding, 1)
}

/// `z2[top] = conv3x3(z1[top])`; below it
/// `z2[i] = conv3x3(concat(z1[i], up2(z1[i + 1])))`.
pub fn top_down<'t>(z1: &[Var<'t>], p: &Scope<'_, 't>) -> Result<Vec<Var<'t>>> {
    let top = z1.len().checked_sub(1).ok_or_else(|| Error::dim("top_down on an empty pyramid"))?;
    let mut z2 = Vec::with_capacity(z1.len());
    for i in 0..=top {
        let input = if i == top {
            nchw(z1[i])?;
            z1[i]
        } else {
            check_pair(z1[i], z1[i + 1])?;
            let [_, _, h, w] = nchw(z1[i])?;
            Var::concat(&[z1[i], z1[i + 1].resize(h, w)?], 1)?
        };
        z2.push(conv(input, &p.sub(i), 1)?);
    }
    Ok(z2)
}

/// `z3[0] = z2[0]`; above it `z3[i] = z2[i] + avgpool2(z3[i - 1])`.
pub fn bottom_up<'t>(z2: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
    let mut z3: Vec<Var<'t>> = Vec::with_capacity(z2.len());
    for (i, &z) in z2.iter().enumerate() {
        if i == 0 {
            nchw(z)?;
            z3.push(z);
            continue;
        }
        check_pair(z2[i - 1], z)?;
        if z.shape()[1] != z2[i - 1].shape()[1] {
            return Err(Error::dim(format!(
                "bottom_up: widths differ between levels {} and {i}",
                i - 1
            )));
        }
        z3.push(z.add(z3[i - 1].avg_pool(2)?)?);
    }
    Ok(z3)
}

/// One 1x1 head per level, resized to `full_res`, and a 1x1 fusion over the
/// stacked level maps. Parameters under `p.head.{i}` and `p.fuse`.
pub fn predict_and_fuse<'t>(
    z3: &[Var<'t>],
    p: &Scope<'_, 't>,
    full_res: (usize, usize),
) -> Result<(Vec<Var<'t>>, Var<'t>)> {
    if z3.is_empty() {
        return Err(Error::dim("predict_and_fuse on an empty pyramid"));
    }
    let level_maps = z3
        .iter()
        .enumerate()
        .map(|(i, &z)| conv(z, &p.sub(format!("head.{i}")), 0)?.resize(full_res.0, full_res.1))
        .collect::<Result<Vec<_>>>()?;
    let fused = conv(Var::concat(&level_maps, 1)?, &p.sub("fuse"), 0)?;
    Ok((level_maps, fused))
}

/// Full aggregation. With `aggregate` off the levels go straight to the
/// heads (`z2 = z3 = z1`).
pub fn mla_forward<'t>(
    z1: Vec<Var<'t>>,
    p: &Scope<'_, 't>,
    full_res: (usize, usize),
    aggregate: bool,
) -> Result<MlaState<'t>> {
    let (z2, z3) = if aggregate {
        let z2 = top_down(&z1, &p.sub("top_down"))?;
        let z3 = bottom_up(&z2)?;
        (z2, z3)
    } else {
        (z1.clone(), z1.clone())
    };
    let (level_maps, fused_map) = predict_and_fuse(&z3, p, full_res)?;
    Ok(MlaState {
        z1,
        z2,
        z3,
        level_maps,
        fused_map,
    })
}

pub fn init_mla(init: &mut Initializer, prefix: &str, width: usize, levels: usize, aggregate: bool) {
    if aggregate {
        for i in 0..levels {
            let inp = if i + 1 == levels { width } else { 2 * width };
            init.conv(&format!("{prefix}.top_down.{i}"), inp, width, 3);
        }
    }
    for i in 0..levels {
        init.conv(&format!("{prefix}.head.{i}"), width, 1, 1);
    }
    init.conv(&format!("{prefix}.fuse"), levels, 1, 1);
}
