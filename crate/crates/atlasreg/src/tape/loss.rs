//! Differentiable building blocks of the loss terms: zero-padded box sums,
//! forward differences, and graph builders assembling the full objective.

use super::{Graph, Var};
use crate::losses::{LossConfig, SimKind, WeightMap};
use crate::nd::NdArray;
use crate::tape::real::Real;

/// Zero-padded box filter of odd width `j`, applied separably over all axes.
pub(crate) fn box_sum_fwd<T: Real>(x: &NdArray<T>, j: usize) -> NdArray<T> {
    let r = j / 2;
    let shape = x.shape.clone();
    let mut cur = x.data.clone();
    let mut next = vec![T::ZERO; cur.len()];
    for ax in 0..shape.len() {
        let len = shape[ax];
        let stride: usize = shape[ax + 1..].iter().product();
        let outer: usize = shape[..ax].iter().product();
        for o in 0..outer {
            for b in 0..stride {
                let base = o * len * stride + b;
                // Sliding window over [i-r, i+r].
                let mut acc = T::ZERO;
                for t in 0..=r.min(len - 1) {
                    acc += cur[base + t * stride];
                }
                for i in 0..len {
                    next[base + i * stride] = acc;
                    if i + 1 + r < len {
                        acc += cur[base + (i + 1 + r) * stride];
                    }
                    if i >= r {
                        acc -= cur[base + (i - r) * stride];
                    }
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    NdArray::from_vec(&shape, cur)
}

/// Forward difference along spatial `axis` of a [C, spatial...] array, with
/// zeros on the trailing slice.
pub(crate) fn diff_axis_fwd<T: Real>(x: &NdArray<T>, axis: usize) -> NdArray<T> {
    let spatial = &x.shape[1..];
    let len = spatial[axis];
    let stride: usize = spatial[axis + 1..].iter().product();
    let outer: usize = x.shape[0] * spatial[..axis].iter().product::<usize>();
    let mut out = vec![T::ZERO; x.len()];
    for o in 0..outer {
        for b in 0..stride {
            let base = o * len * stride + b;
            for i in 0..len - 1 {
                let here = base + i * stride;
                out[here] = x.data[here + stride] - x.data[here];
            }
        }
    }
    NdArray::from_vec(&x.shape, out)
}

pub(crate) fn diff_axis_bwd<T: Real>(
    gout: &NdArray<T>,
    in_shape: &[usize],
    axis: usize,
    gx: &mut NdArray<T>,
) {
    let spatial = &in_shape[1..];
    let len = spatial[axis];
    let stride: usize = spatial[axis + 1..].iter().product();
    let outer: usize = in_shape[0] * spatial[..axis].iter().product::<usize>();
    for o in 0..outer {
        for b in 0..stride {
            let base = o * len * stride + b;
            for i in 0..len {
                let here = base + i * stride;
                let mut g = T::ZERO;
                if i >= 1 {
                    g += gout.data[here - stride];
                }
                if i < len - 1 {
                    g -= gout.data[here];
                }
                gx.data[here] += g;
            }
        }
    }
}

/// (1/M) sum_p W(p) (A(p) - Y(p))^2 with constant atlas and weights.
pub fn masked_mse_graph<T: Real>(
    g: &mut Graph<T>,
    atlas: Var,
    warped: Var,
    w: &WeightMap,
) -> Var {
    let diff = g.sub(atlas, warped);
    let sq = g.square(diff);
    let wn: NdArray<T> = NdArray {
        shape: vec![w.data.len()],
        data: w
            .data
            .iter()
            .map(|&v| T::from_f64(v / w.m as f64))
            .collect(),
    };
    g.weighted_sum_all(sq, wn)
}

/// Windowed CC built from box sums; matches `losses::local_cc`.
pub fn local_cc_graph<T: Real>(
    g: &mut Graph<T>,
    atlas: Var,
    warped: Var,
    w: &WeightMap,
    j: usize,
    eps: f64,
) -> Var {
    let rank = g.value(atlas).rank();
    let inv_k = T::from_f64(1.0 / (j as f64).powi(rank as i32));

    let ay = g.mul(atlas, warped);
    let aa = g.square(atlas);
    let yy = g.square(warped);

    let sa = g.box_sum(atlas, j);
    let sy = g.box_sum(warped, j);
    let say = g.box_sum(ay, j);
    let saa = g.box_sum(aa, j);
    let syy = g.box_sum(yy, j);

    // cross = say - sa*sy/k ; var_a = saa - sa^2/k ; var_y = syy - sy^2/k
    let sasy = g.mul(sa, sy);
    let sasy_k = g.scale(sasy, inv_k);
    let cross = g.sub(say, sasy_k);

    let sa2 = g.square(sa);
    let sa2k = g.scale(sa2, inv_k);
    let var_a = g.sub(saa, sa2k);

    let sy2 = g.square(sy);
    let sy2k = g.scale(sy2, inv_k);
    let var_y = g.sub(syy, sy2k);

    let num = g.square(cross);
    let vv = g.mul(var_a, var_y);
    let den = g.offset(vv, T::from_f64(eps));
    let cc = g.div(num, den);

    let wn: NdArray<T> = NdArray {
        shape: vec![w.data.len()],
        data: w
            .data
            .iter()
            .map(|&v| T::from_f64(v / w.m as f64))
            .collect(),
    };
    let cc_flat = g.reshape(cc, &[w.data.len()]);
    g.weighted_sum_all(cc_flat, wn)
}

/// Mean squared forward-difference gradient of a [n, spatial...] field,
/// normalized by the voxel count.
pub fn diffusion_graph<T: Real>(g: &mut Graph<T>, field: Var) -> Var {
    let shape = g.value(field).shape.clone();
    let n_spatial = shape.len() - 1;
    let voxels: usize = shape[1..].iter().product();
    let mut acc: Option<Var> = None;
    for ax in 0..n_spatial {
        let d = g.diff_axis(field, ax);
        let sq = g.square(d);
        let s = g.sum_all(sq);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s),
        });
    }
    let total = acc.expect("at least one spatial axis");
    g.scale(total, T::from_f64(1.0 / voxels as f64))
}

/// Similarity + lambda-weighted regularizers; returns (total, sim,
/// diffusion_weighted, scaling_weighted).
pub fn total_loss_graph<T: Real>(
    g: &mut Graph<T>,
    atlas_flat: Var,
    warped_flat: Var,
    field: Var,
    theta: Var,
    w: &WeightMap,
    cfg: &LossConfig,
) -> (Var, Var, Var, Var) {
    let n = g.value(field).shape[0];
    let sim = match cfg.sim_kind {
        SimKind::Mse => masked_mse_graph(g, atlas_flat, warped_flat, w),
        SimKind::Cc => {
            let atlas_sp = g.reshape(atlas_flat, &w.shape);
            let warped_sp = g.reshape(warped_flat, &w.shape);
            let cc = local_cc_graph(g, atlas_sp, warped_sp, w, cfg.cc_window, cfg.cc_epsilon);
            let neg = g.scale(cc, T::from_f64(-1.0));
            g.offset(neg, T::ONE)
        }
    };
    let diff_raw = diffusion_graph(g, field);
    let diff = g.scale(diff_raw, T::from_f64(cfg.lambda_diffusion));
    let pen_raw = g.scaling_penalty(theta, n);
    let pen = g.scale(pen_raw, T::from_f64(cfg.lambda_scaling));
    let t1 = g.add(sim, diff);
    let total = g.add(t1, pen);
    (total, sim, diff, pen)
}
