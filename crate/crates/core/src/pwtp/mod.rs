//! Pixel-wise temporal projection.
//!
//! Each spatial position `i` of a `T`-frame segment gets its own basis
//! `A_i ∈ R^{T×D}`, generated from the segment by an aggregation conv, pairwise
//! temporal descriptors and a small MLP. The temporal fiber `x_i ∈ R^{T×C}` is
//! projected onto the column space of `A_i`; the projection is the static
//! appearance, the residual carries what changes, and its temporal mean is the
//! dynamic appearance frame of the segment.

pub mod config;
pub mod forward;
pub mod params;

pub use config::{MlpConfig, PwtpConfig};
pub use forward::{forward_graph, PwtpNodes};
pub use params::{PwtpParams, PwtpVars};

use crate::error::{Error, Result};
use crate::numeric::{Graph, NormMode, Tensor};

/// Decomposition of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentDecomposition {
    /// Projection `x̂`, `[T, H, W, C]`.
    pub static_appearance: Tensor,
    /// `p = x - x̂`, `[T, H, W, C]`.
    pub residual: Tensor,
    /// Temporal mean of the residual, `[H, W, C]`.
    pub da: Tensor,
    /// `[H·W, T, D]`
    pub bases: Tensor,
    /// `[H·W, D, C]`
    pub coeffs: Tensor,
}

/// Result of running the projector over every segment of a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct PwtpOutput {
    /// `[S, H, W, C]`
    pub da: Tensor,
    pub segments: Vec<SegmentDecomposition>,
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::ShapeMismatch(format!(
            "{what} must have rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Fibers `[H·W, T, C]` back to frames `[T, H, W, C]`.
fn fibers_to_frames(fibers: &Tensor, t: usize, h: usize, w: usize, c: usize) -> Tensor {
    fibers
        .clone()
        .reshape(&[h, w, t, c])
        .expect("fiber layout")
        .permute(&[2, 0, 1, 3])
}

/// Spatial aggregation of a `[T, H, W, C]` segment to `[T, ceil(H/s), ceil(W/s), C']`.
pub fn aggregate_conv(x: &Tensor, params: &PwtpParams, cfg: &PwtpConfig) -> Result<Tensor> {
    expect_rank(x, 4, "segment")?;
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    forward::check_clip(&shape, cfg, params.in_channels())?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = forward::aggregate(&mut g, &vars, cfg, xv);
    Ok(g.value(y).clone())
}

/// Temporal relation descriptors of an aggregated segment `[T, h, w, C']`:
/// one row per position holding `<x̃_t1, x̃_t2> / C'` for `t1 < t2` in ascending order.
pub fn temporal_descriptors(aggregated: &Tensor) -> Result<Tensor> {
    expect_rank(aggregated, 4, "aggregated segment")?;
    let [t, h, w, c] = *aggregated.shape() else {
        unreachable!()
    };
    if t < 2 {
        return Err(Error::InvalidConfig("descriptors need T >= 2".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(aggregated.clone().reshape(&[1, t, h * w, c])?);
    let u = g.pairwise_gram(x);
    g.value(u).clone().reshape(&[h * w, t * (t - 1) / 2])
}

/// Per-pixel bases `[H·W, T, D]` from descriptors on an `h x w` grid.
pub fn generate_bases(
    descriptors: &Tensor,
    grid: (usize, usize),
    params: &PwtpParams,
    cfg: &PwtpConfig,
    target: (usize, usize),
    mode: NormMode,
) -> Result<Tensor> {
    let (gh, gw) = grid;
    if descriptors.shape() != [gh * gw, cfg.descriptor_len()] {
        return Err(Error::ShapeMismatch(format!(
            "descriptors {:?} do not match grid {gh}x{gw} with T={}",
            descriptors.shape(),
            cfg.frames
        )));
    }
    if !descriptors.is_finite() {
        return Err(Error::Malformed(
            "descriptors contain non-finite values".into(),
        ));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let u = g.constant(descriptors.clone());
    let (out, _) = forward::mlp(&mut g, &vars, params, u, mode);
    let coarse = g.reshape(out, &[1, gh, gw, cfg.basis_width()]);
    let bases = forward::upsample_bases(&mut g, cfg, coarse, target);
    Ok(g.value(bases).clone())
}

/// Least-squares projection of a `[T, H, W, C]` segment onto per-pixel bases.
///
/// Returns `(y, x̂)` with `y_i = (A_iᵀA_i + ridge I)⁻¹ A_iᵀ x_i` shaped `[H·W, D, C]`
/// and `x̂_i = A_i y_i` shaped like `x`.
pub fn project(x: &Tensor, bases: &Tensor, ridge: f64) -> Result<(Tensor, Tensor)> {
    expect_rank(x, 4, "segment")?;
    expect_rank(bases, 3, "bases")?;
    let [t, h, w, c] = *x.shape() else {
        unreachable!()
    };
    if bases.shape()[..2] != [h * w, t] {
        return Err(Error::ShapeMismatch(format!(
            "bases {:?} do not fit segment {:?}",
            bases.shape(),
            x.shape()
        )));
    }
    let mut g = Graph::new();
    let fibers = g.constant(x.permute(&[1, 2, 0, 3]).reshape(&[h * w, t, c])?);
    let a = g.constant(bases.clone());
    let (coeffs, projected) = forward::project_fibers(&mut g, a, fibers, ridge)?;
    Ok((
        g.value(coeffs).clone(),
        fibers_to_frames(g.value(projected), t, h, w, c),
    ))
}

/// `p = x - x̂` and its temporal mean `p̄`, `[H, W, C]`.
pub fn residual_and_da(x: &Tensor, projected: &Tensor) -> Result<(Tensor, Tensor)> {
    expect_rank(x, 4, "segment")?;
    let p = x.sub(projected)?;
    let mut g = Graph::new();
    let pv = g.constant(p.clone());
    let da = g.mean_axis(pv, 0);
    Ok((p, g.value(da).clone()))
}

/// Run the projector on every segment of a `[S, T, H, W, C]` clip.
///
/// With [`NormMode::Batch`] the MLP normalization uses statistics over all
/// positions of all segments of this clip; with [`NormMode::Running`] the
/// stored running averages.
pub fn pwtp_forward(
    clip: &Tensor,
    params: &PwtpParams,
    cfg: &PwtpConfig,
    mode: NormMode,
) -> Result<PwtpOutput> {
    forward::check_clip(clip.shape(), cfg, params.in_channels())?;
    let [s, t, h, w, c] = *clip.shape() else {
        unreachable!()
    };
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(clip.clone());
    let nodes = forward_graph(&mut g, &vars, params, cfg, x, mode)?;
    let da = g.value(nodes.da).clone();
    let (hw, d) = (h * w, cfg.rank);
    let take = |v: crate::numeric::Var, per: usize, shape: &[usize], seg: usize| {
        let data = g.value(v).data()[seg * per..(seg + 1) * per].to_vec();
        Tensor::new(shape, data).unwrap()
    };
    let segments = (0..s)
        .map(|seg| {
            let fibers = |v| take(v, hw * t * c, &[hw, t, c], seg);
            SegmentDecomposition {
                static_appearance: fibers_to_frames(&fibers(nodes.projected), t, h, w, c),
                residual: fibers_to_frames(&fibers(nodes.residual), t, h, w, c),
                da: da.index_axis0(seg),
                bases: take(nodes.bases, hw * t * d, &[hw, t, d], seg),
                coeffs: take(nodes.coeffs, hw * d * c, &[hw, d, c], seg),
            }
        })
        .collect();
    Ok(PwtpOutput { da, segments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    fn tiny_cfg() -> PwtpConfig {
        PwtpConfig {
            frames: 4,
            rank: 1,
            kernel: 3,
            stride: 2,
            channels: 4,
            ..PwtpConfig::default()
        }
    }

    #[test]
    fn identity_kernel_passes_frames_through() {
        let cfg = PwtpConfig {
            kernel: 1,
            stride: 1,
            channels: 3,
            ..tiny_cfg()
        };
        let mut params = PwtpParams::init(&cfg, 3, &mut Rng::new(1)).unwrap();
        params.conv = Tensor::zeros(&[1, 1, 3, 3]);
        for c in 0..3 {
            params.conv.set(&[0, 0, c, c], 1.0);
        }
        let x = Tensor::from_fn(&[4, 5, 5, 3], |i| (i % 13) as f64 / 13.0);
        assert_eq!(aggregate_conv(&x, &params, &cfg).unwrap(), x);
        params.conv = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(aggregate_conv(&x, &params, &cfg)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn default_geometry_reduces_by_stride() {
        let cfg = PwtpConfig::default();
        let params = PwtpParams::init(&cfg, 3, &mut Rng::new(1)).unwrap();
        let x = Tensor::full(&[8, 32, 32, 3], 0.5);
        let y = aggregate_conv(&x, &params, &cfg).unwrap();
        assert_eq!(y.shape(), &[8, 4, 4, 24]);
    }

    #[test]
    fn clip_smaller_than_kernel_is_rejected() {
        let cfg = PwtpConfig::default();
        let params = PwtpParams::init(&cfg, 3, &mut Rng::new(1)).unwrap();
        let x = Tensor::full(&[8, 8, 32, 3], 0.5);
        assert!(matches!(
            aggregate_conv(&x, &params, &cfg),
            Err(Error::ClipTooSmall { .. })
        ));
    }

    #[test]
    fn scalar_descriptors() {
        let x = Tensor::new(&[3, 1, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let u = temporal_descriptors(&x).unwrap();
        assert_eq!(u.shape(), &[1, 3]);
        assert_eq!(u.data(), &[2.0, 3.0, 6.0]);
    }

    #[test]
    fn constant_frames_give_constant_descriptors() {
        let v = [0.5, -1.0, 2.0];
        let x = Tensor::from_fn(&[5, 2, 2, 3], |i| v[i % 3]);
        let u = temporal_descriptors(&x).unwrap();
        let want = v.iter().map(|a| a * a).sum::<f64>() / 3.0;
        assert!(u.data().iter().all(|&e| (e - want).abs() < 1e-15));
        assert_eq!(
            temporal_descriptors(&Tensor::zeros(&[8, 1, 1, 2]))
                .unwrap()
                .shape(),
            &[1, 28]
        );
    }

    #[test]
    fn bases_shape_and_identity_upsampling() {
        let cfg = PwtpConfig::default();
        let params = PwtpParams::init(&cfg, 3, &mut Rng::new(2)).unwrap();
        let u = Tensor::from_fn(&[16, 28], |i| (i % 7) as f64 * 0.1);
        let a = generate_bases(&u, (4, 4), &params, &cfg, (32, 32), NormMode::Batch).unwrap();
        assert_eq!(a.shape(), &[1024, 8, 1]);

        let unit = PwtpConfig {
            stride: 1,
            kernel: 1,
            ..cfg.clone()
        };
        let coarse = generate_bases(&u, (4, 4), &params, &unit, (4, 4), NormMode::Batch).unwrap();
        // s = 1: bases at grid resolution equal the raw MLP rows
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let uv = g.constant(u.clone());
        let (out, _) = forward::mlp(&mut g, &vars, &params, uv, NormMode::Batch);
        assert_eq!(coarse.data(), g.value(out).data());
    }

    #[test]
    fn mean_projection_example() {
        let x = Tensor::new(&[2, 1, 1, 1], vec![3.0, 5.0]).unwrap();
        let a = Tensor::new(&[1, 2, 1], vec![1.0, 1.0]).unwrap();
        let (y, xh) = project(&x, &a, 0.0).unwrap();
        assert_eq!(y.data(), &[8.0 / 2.0]);
        assert_eq!(xh.data(), &[4.0, 4.0]);
        let (p, da) = residual_and_da(&x, &xh).unwrap();
        assert_eq!(p.data(), &[-1.0, 1.0]);
        assert_eq!(da.data(), &[0.0]);
    }

    #[test]
    fn axis_projection_example() {
        let x = Tensor::new(&[2, 1, 1, 1], vec![3.0, 5.0]).unwrap();
        let a = Tensor::new(&[1, 2, 1], vec![1.0, 0.0]).unwrap();
        let (_, xh) = project(&x, &a, 0.0).unwrap();
        assert_eq!(xh.data(), &[3.0, 0.0]);
    }

    #[test]
    fn perfect_projection_has_no_residual() {
        let x = Tensor::from_fn(&[4, 2, 2, 3], |i| i as f64);
        let (p, da) = residual_and_da(&x, &x).unwrap();
        assert!(p.data().iter().chain(da.data()).all(|&v| v == 0.0));
        let p2 = Tensor::new(&[2, 1, 1, 1], vec![1.0, -1.0]).unwrap();
        let (_, da) = residual_and_da(&p2, &Tensor::zeros(&[2, 1, 1, 1])).unwrap();
        assert_eq!(da.data(), &[0.0]);
    }

    #[test]
    fn singular_basis_is_reported() {
        let x = Tensor::full(&[2, 1, 2, 1], 1.0);
        let a = Tensor::new(&[2, 2, 1], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            project(&x, &a, 0.0),
            Err(Error::SingularBasis { index: 1 })
        ));
    }

    #[test]
    fn static_clip_has_no_dynamic_appearance() {
        let cfg = PwtpConfig {
            ridge: 0.0,
            ..PwtpConfig::default()
        };
        let mut params = PwtpParams::init(&cfg, 3, &mut Rng::new(3)).unwrap();
        params.out.weight = Tensor::zeros(params.out.weight.shape());
        let frame: Vec<f64> = Rng::new(8).uniform(32 * 32 * 3);
        let clip = Tensor::from_fn(&[1, 8, 32, 32, 3], |i| frame[i % frame.len()]);
        let out = pwtp_forward(&clip, &params, &cfg, NormMode::Batch).unwrap();
        assert!(out.da.max_abs() < 1e-12, "{}", out.da.max_abs());
    }

    #[test]
    fn forward_per_segment_outputs() {
        let cfg = tiny_cfg();
        let params = PwtpParams::init(&cfg, 3, &mut Rng::new(4)).unwrap();
        let mut rng = Rng::new(5);
        let clip = Tensor::from_fn(&[4, 4, 8, 8, 3], |_| rng.next_f64());
        let out = pwtp_forward(&clip, &params, &cfg, NormMode::Batch).unwrap();
        assert_eq!(out.da.shape(), &[4, 8, 8, 3]);
        assert_eq!(out.segments.len(), 4);
        for (s, seg) in out.segments.iter().enumerate() {
            let x = clip.index_axis0(s);
            assert_eq!(seg.residual, x.sub(&seg.static_appearance).unwrap());
            let recon = seg.static_appearance.add(&seg.residual).unwrap();
            for ((r, xv), xh) in recon
                .data()
                .iter()
                .zip(x.data())
                .zip(seg.static_appearance.data())
            {
                assert!((r - xv).abs() <= f64::EPSILON * (xv.abs() + xh.abs()));
            }
        }
        // deterministic
        let again = pwtp_forward(&clip, &params, &cfg, NormMode::Batch).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn init_bases_have_full_rank() {
        let cfg = PwtpConfig {
            rank: 3,
            ..PwtpConfig::default()
        };
        let params = PwtpParams::init(&cfg, 3, &mut Rng::new(6)).unwrap();
        let mut rng = Rng::new(7);
        let clip = Tensor::from_fn(&[1, 8, 32, 32, 3], |_| rng.next_f64());
        let bases = forward::bases_only(&params, &cfg, &clip, NormMode::Batch).unwrap();
        assert_eq!(bases.shape(), &[1024, 8, 3]);
        assert!(bases.is_finite());
    }
}
