//! Graph construction for the projector.

use crate::error::{Error, Result};
use crate::numeric::{ConvGeometry, Graph, NormMode, NormStats, Tensor, Var};
use crate::pwtp::config::PwtpConfig;
use crate::pwtp::params::{PwtpParams, PwtpVars};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Handles to the intermediate results of one projector pass over `G` segments.
#[derive(Clone, Debug)]
pub struct PwtpNodes {
    /// `[G·H·W, T, D]`
    pub bases: Var,
    /// `[G·H·W, D, C]`
    pub coeffs: Var,
    /// Projection `x̂` as temporal fibers, `[G·H·W, T, C]`.
    pub projected: Var,
    /// Residual `p = x - x̂` as temporal fibers, `[G·H·W, T, C]`.
    pub residual: Var,
    /// Dynamic appearance `[G, H, W, C]`.
    pub da: Var,
    /// Mean over segments of the per-segment ENoPR.
    pub enopr: Var,
    /// One entry per bottleneck block when normalizing with batch statistics.
    pub norm_stats: Vec<NormStats>,
}

pub(crate) fn check_clip(shape: &[usize], cfg: &PwtpConfig, in_channels: usize) -> Result<()> {
    let [_, t, h, w, c] = *shape else {
        return Err(Error::ShapeMismatch(format!(
            "expected segments x T x H x W x C, got {shape:?}"
        )));
    };
    if t != cfg.frames {
        return Err(Error::ShapeMismatch(format!(
            "segment has {t} frames, configuration expects T={}",
            cfg.frames
        )));
    }
    if c != in_channels {
        return Err(Error::ShapeMismatch(format!(
            "clip has {c} channels, parameters expect {in_channels}"
        )));
    }
    if h < cfg.kernel || w < cfg.kernel {
        return Err(Error::ClipTooSmall {
            height: h,
            width: w,
            kernel: cfg.kernel,
        });
    }
    Ok(())
}

/// Per-frame aggregation conv: `[N, H, W, C] -> [N, ceil(H/s), ceil(W/s), C']`.
pub(crate) fn aggregate(g: &mut Graph, vars: &PwtpVars, cfg: &PwtpConfig, frames: Var) -> Var {
    g.conv2d(
        frames,
        vars.conv,
        None,
        ConvGeometry::new(cfg.kernel, cfg.stride),
    )
}

/// Basis MLP on descriptor rows `[N, T(T-1)/2] -> [N, T·D]`.
pub(crate) fn mlp(
    g: &mut Graph,
    vars: &PwtpVars,
    params: &PwtpParams,
    descriptors: Var,
    mode: NormMode,
) -> (Var, Vec<NormStats>) {
    let mut h = g.linear(descriptors, vars.expand.0, Some(vars.expand.1));
    h = g.gelu(h);
    let mut stats = Vec::new();
    for (bv, bp) in vars.blocks.iter().zip(&params.blocks) {
        let (n, s) = g.batch_norm(h, bv.gamma, bv.beta, NORM_EPS, mode, &bp.running_stats());
        stats.extend(s);
        let d = g.linear(n, bv.down.0, Some(bv.down.1));
        let d = g.gelu(d);
        let u = g.linear(d, bv.up.0, Some(bv.up.1));
        let u = g.gelu(u);
        h = g.add(h, u);
    }
    (g.linear(h, vars.out.0, Some(vars.out.1)), stats)
}

/// MLP output on the coarse grid `[G, h, w, T·D]` to bases `[G·H·W, T, D]`.
pub(crate) fn upsample_bases(
    g: &mut Graph,
    cfg: &PwtpConfig,
    coarse: Var,
    target: (usize, usize),
) -> Var {
    let [gs, h, w, _] = *g.shape(coarse) else {
        unreachable!()
    };
    let (th, tw) = target;
    let full = if (h, w) == (th, tw) {
        coarse
    } else {
        g.upsample_bilinear(coarse, th, tw)
    };
    g.reshape(full, &[gs * th * tw, cfg.frames, cfg.rank])
}

/// Bases for a `[G, T, H, W, C]` clip stack, without projecting.
pub(crate) fn bases_graph(
    g: &mut Graph,
    vars: &PwtpVars,
    params: &PwtpParams,
    cfg: &PwtpConfig,
    clip: Var,
    mode: NormMode,
) -> (Var, Vec<NormStats>) {
    let [gs, t, h, w, c] = *g.shape(clip) else {
        unreachable!()
    };
    let frames = g.reshape(clip, &[gs * t, h, w, c]);
    let agg = aggregate(g, vars, cfg, frames);
    let [_, gh, gw, cp] = *g.shape(agg) else {
        unreachable!()
    };
    let agg = g.reshape(agg, &[gs, t, gh * gw, cp]);
    let u = g.pairwise_gram(agg);
    let u = g.reshape(u, &[gs * gh * gw, cfg.descriptor_len()]);
    let (out, stats) = mlp(g, vars, params, u, mode);
    let coarse = g.reshape(out, &[gs, gh, gw, cfg.basis_width()]);
    (upsample_bases(g, cfg, coarse, (h, w)), stats)
}

/// Least-squares projection of fibers `[N, T, C]` onto bases `[N, T, D]`.
/// Returns `(coeffs, projected)`.
pub(crate) fn project_fibers(
    g: &mut Graph,
    bases: Var,
    fibers: Var,
    ridge: f64,
) -> Result<(Var, Var)> {
    let gram = g.batch_matmul(bases, bases, true);
    let rhs = g.batch_matmul(bases, fibers, true);
    let coeffs = g.spd_solve(gram, rhs, ridge)?;
    let projected = g.batch_matmul(bases, coeffs, false);
    Ok((coeffs, projected))
}

/// Full projector pass over a `[G, T, H, W, C]` clip stack.
pub fn forward_graph(
    g: &mut Graph,
    vars: &PwtpVars,
    params: &PwtpParams,
    cfg: &PwtpConfig,
    clip: Var,
    mode: NormMode,
) -> Result<PwtpNodes> {
    check_clip(g.shape(clip), cfg, params.in_channels())?;
    let [gs, t, h, w, c] = *g.shape(clip) else {
        unreachable!()
    };
    let (bases, norm_stats) = bases_graph(g, vars, params, cfg, clip, mode);
    let fibers = g.permute(clip, &[0, 2, 3, 1, 4]);
    let fibers = g.reshape(fibers, &[gs * h * w, t, c]);
    let (coeffs, projected) = project_fibers(g, bases, fibers, cfg.ridge)?;
    let residual = g.sub(fibers, projected);
    let grid = g.reshape(residual, &[gs, h, w, t, c]);
    let da = g.mean_axis(grid, 3);
    let energy = g.sum_squares(residual);
    let enopr = g.scale(energy, 1.0 / (gs * h * w * c) as f64);
    Ok(PwtpNodes {
        bases,
        coeffs,
        projected,
        residual,
        da,
        enopr,
        norm_stats,
    })
}

/// Bases for a clip stack with parameters bound as constants.
pub(crate) fn bases_only(
    params: &PwtpParams,
    cfg: &PwtpConfig,
    clip: &Tensor,
    mode: NormMode,
) -> Result<Tensor> {
    check_clip(clip.shape(), cfg, params.in_channels())?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(clip.clone());
    let (bases, _) = bases_graph(&mut g, &vars, params, cfg, x, mode);
    Ok(g.value(bases).clone())
}
