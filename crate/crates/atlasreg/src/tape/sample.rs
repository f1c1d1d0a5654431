//! Differentiable point transforms and image sampling: the pieces a warp is
//! built from on the tape. Coordinates are stored planar, [n, N].

use super::{Graph, Var};
use crate::geometry::interp;
use crate::nd::NdArray;
use crate::tape::real::Real;

/// theta holds the top n rows of a homogeneous matrix, flat [n*(n+1)].
/// out[i][v] = sum_j theta[i][j] * pts[j][v] + theta[i][n].
pub(crate) fn affine_points_fwd<T: Real>(theta: &NdArray<T>, pts: &NdArray<T>) -> NdArray<T> {
    let n = pts.shape[0];
    let npts = pts.shape[1];
    assert_eq!(theta.len(), n * (n + 1), "theta length");
    let mut out = vec![T::ZERO; n * npts];
    for i in 0..n {
        let row = &theta.data[i * (n + 1)..(i + 1) * (n + 1)];
        let dst = &mut out[i * npts..(i + 1) * npts];
        for d in dst.iter_mut() {
            *d = row[n];
        }
        for (j, &coef) in row.iter().take(n).enumerate() {
            let src = &pts.data[j * npts..(j + 1) * npts];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += coef * s;
            }
        }
    }
    NdArray::from_vec(&[n, npts], out)
}

pub(crate) fn affine_points_bwd<T: Real>(
    g: &Graph<T>,
    theta: Var,
    pts: Var,
    gout: &NdArray<T>,
    grads: &mut [Option<NdArray<T>>],
) {
    let thv = &g.nodes[theta.0].value;
    let ptv = &g.nodes[pts.0].value;
    let n = ptv.shape[0];
    let npts = ptv.shape[1];

    g.accum(grads, theta, |gt| {
        for i in 0..n {
            let go = &gout.data[i * npts..(i + 1) * npts];
            for j in 0..n {
                let src = &ptv.data[j * npts..(j + 1) * npts];
                let mut acc = T::ZERO;
                for (&a, &b) in go.iter().zip(src) {
                    acc += a * b;
                }
                gt.data[i * (n + 1) + j] += acc;
            }
            let mut acc = T::ZERO;
            for &a in go {
                acc += a;
            }
            gt.data[i * (n + 1) + n] += acc;
        }
    });

    g.accum(grads, pts, |gp| {
        for i in 0..n {
            let go = &gout.data[i * npts..(i + 1) * npts];
            for j in 0..n {
                let coef = thv.data[i * (n + 1) + j];
                let dst = &mut gp.data[j * npts..(j + 1) * npts];
                for (d, &a) in dst.iter_mut().zip(go) {
                    *d += coef * a;
                }
            }
        }
    });
}

/// Multilinear sampling of a single-channel image at planar coordinates,
/// zero outside the grid. Output is flat [N].
pub(crate) fn sample_image_fwd<T: Real>(img: &NdArray<T>, coords: &NdArray<T>) -> NdArray<T> {
    let n = coords.shape[0];
    let npts = coords.shape[1];
    assert_eq!(img.rank(), n, "image rank vs coordinate rank");
    let mut out = vec![T::ZERO; npts];
    match n {
        2 => {
            let (s0, s1) = (img.shape[0], img.shape[1]);
            let (c0, c1) = (&coords.data[..npts], &coords.data[npts..]);
            for v in 0..npts {
                out[v] =
                    interp::sample2(&img.data, s0, s1, c0[v].to_f64(), c1[v].to_f64()).value;
            }
        }
        3 => {
            let (s0, s1, s2) = (img.shape[0], img.shape[1], img.shape[2]);
            let c0 = &coords.data[..npts];
            let c1 = &coords.data[npts..2 * npts];
            let c2 = &coords.data[2 * npts..];
            for v in 0..npts {
                out[v] = interp::sample3(
                    &img.data,
                    s0,
                    s1,
                    s2,
                    c0[v].to_f64(),
                    c1[v].to_f64(),
                    c2[v].to_f64(),
                )
                .value;
            }
        }
        r => panic!("sample rank {r} unsupported"),
    }
    NdArray::from_vec(&[npts], out)
}

pub(crate) fn sample_image_bwd<T: Real>(
    g: &Graph<T>,
    img: Var,
    coords: Var,
    gout: &NdArray<T>,
    grads: &mut [Option<NdArray<T>>],
) {
    let iv = &g.nodes[img.0].value;
    let cv = &g.nodes[coords.0].value;
    let n = cv.shape[0];
    let npts = cv.shape[1];
    let need_img = g.nodes[img.0].needs_grad;
    let need_coords = g.nodes[coords.0].needs_grad;

    if need_coords {
        g.accum(grads, coords, |gc| match n {
            2 => {
                let (s0, s1) = (iv.shape[0], iv.shape[1]);
                for v in 0..npts {
                    let go = gout.data[v];
                    let s = interp::sample2(
                        &iv.data,
                        s0,
                        s1,
                        cv.data[v].to_f64(),
                        cv.data[npts + v].to_f64(),
                    );
                    gc.data[v] += go * s.grad[0];
                    gc.data[npts + v] += go * s.grad[1];
                }
            }
            3 => {
                let (s0, s1, s2) = (iv.shape[0], iv.shape[1], iv.shape[2]);
                for v in 0..npts {
                    let go = gout.data[v];
                    let s = interp::sample3(
                        &iv.data,
                        s0,
                        s1,
                        s2,
                        cv.data[v].to_f64(),
                        cv.data[npts + v].to_f64(),
                        cv.data[2 * npts + v].to_f64(),
                    );
                    gc.data[v] += go * s.grad[0];
                    gc.data[npts + v] += go * s.grad[1];
                    gc.data[2 * npts + v] += go * s.grad[2];
                }
            }
            r => panic!("sample rank {r} unsupported"),
        });
    }

    if need_img {
        g.accum(grads, img, |gi| match n {
            2 => {
                let (s0, s1) = (iv.shape[0], iv.shape[1]);
                for v in 0..npts {
                    interp::scatter2(
                        &mut gi.data,
                        s0,
                        s1,
                        cv.data[v].to_f64(),
                        cv.data[npts + v].to_f64(),
                        gout.data[v],
                    );
                }
            }
            3 => {
                let (s0, s1, s2) = (iv.shape[0], iv.shape[1], iv.shape[2]);
                for v in 0..npts {
                    interp::scatter3(
                        &mut gi.data,
                        s0,
                        s1,
                        s2,
                        cv.data[v].to_f64(),
                        cv.data[npts + v].to_f64(),
                        cv.data[2 * npts + v].to_f64(),
                        gout.data[v],
                    );
                }
            }
            r => panic!("sample rank {r} unsupported"),
        });
    }
}

/// Constant planar grid of all voxel-index coordinates for a spatial shape.
pub fn identity_grid<T: Real>(spatial: &[usize]) -> NdArray<T> {
    let n = spatial.len();
    let total: usize = spatial.iter().product();
    let mut data = vec![T::ZERO; n * total];
    let mut idx = vec![0usize; n];
    for v in 0..total {
        for a in 0..n {
            data[a * total + v] = T::from_f64(idx[a] as f64);
        }
        for a in (0..n).rev() {
            idx[a] += 1;
            if idx[a] < spatial[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    NdArray::from_vec(&[n, total], data)
}
