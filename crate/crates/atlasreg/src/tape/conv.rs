//! Convolutions via im2col + GEMM, plus nearest-neighbor upsampling.
//!
//! Layout: activations [C, s0, s1(, s2)], weights [Cout, Cin, k, k(, k)],
//! 'same' zero padding of k/2, stride 1 or 2.

use super::{Graph, Var};
use crate::nd::NdArray;
use crate::tape::real::Real;

pub(crate) fn out_spatial(input: &[usize], k: usize, stride: usize) -> Vec<usize> {
    let p = k / 2;
    input
        .iter()
        .map(|&s| (s + 2 * p - k) / stride + 1)
        .collect()
}

/// Fills `col` (shape [Cin*k^rank, N]) from `x`; `col` must be zeroed.
fn im2col<T: Real>(x: &NdArray<T>, k: usize, stride: usize, out_sp: &[usize], col: &mut [T]) {
    let cin = x.shape[0];
    let p = (k / 2) as isize;
    match x.shape.len() - 1 {
        2 => {
            let (s0, s1) = (x.shape[1], x.shape[2]);
            let (o0, o1) = (out_sp[0], out_sp[1]);
            let n = o0 * o1;
            for ci in 0..cin {
                let plane = &x.data[ci * s0 * s1..(ci + 1) * s0 * s1];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let dst_plane = &mut col[row * n..(row + 1) * n];
                        for oy in 0..o0 {
                            let iy = (oy * stride) as isize + ky as isize - p;
                            if iy < 0 || iy as usize >= s0 {
                                continue;
                            }
                            let src_row = &plane[(iy as usize) * s1..(iy as usize + 1) * s1];
                            let dst_row = &mut dst_plane[oy * o1..(oy + 1) * o1];
                            if stride == 1 {
                                // Valid ox range for contiguous copy.
                                let kxo = kx as isize - p;
                                let lo = (-kxo).max(0) as usize;
                                let hi = ((s1 as isize - kxo).min(o1 as isize)).max(0) as usize;
                                if hi > lo {
                                    dst_row[lo..hi].copy_from_slice(
                                        &src_row[(lo as isize + kxo) as usize
                                            ..(hi as isize + kxo) as usize],
                                    );
                                }
                            } else {
                                for (ox, d) in dst_row.iter_mut().enumerate() {
                                    let ix = (ox * stride) as isize + kx as isize - p;
                                    if ix >= 0 && (ix as usize) < s1 {
                                        *d = src_row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        3 => {
            let (s0, s1, s2) = (x.shape[1], x.shape[2], x.shape[3]);
            let (o0, o1, o2) = (out_sp[0], out_sp[1], out_sp[2]);
            let n = o0 * o1 * o2;
            for ci in 0..cin {
                let vol = &x.data[ci * s0 * s1 * s2..(ci + 1) * s0 * s1 * s2];
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let row = ((ci * k + kz) * k + ky) * k + kx;
                            let dst_vol = &mut col[row * n..(row + 1) * n];
                            for oz in 0..o0 {
                                let iz = (oz * stride) as isize + kz as isize - p;
                                if iz < 0 || iz as usize >= s0 {
                                    continue;
                                }
                                for oy in 0..o1 {
                                    let iy = (oy * stride) as isize + ky as isize - p;
                                    if iy < 0 || iy as usize >= s1 {
                                        continue;
                                    }
                                    let src_row = &vol[((iz as usize) * s1 + iy as usize) * s2..];
                                    let dst_row = &mut dst_vol
                                        [(oz * o1 + oy) * o2..(oz * o1 + oy) * o2 + o2];
                                    if stride == 1 {
                                        let kxo = kx as isize - p;
                                        let lo = (-kxo).max(0) as usize;
                                        let hi =
                                            ((s2 as isize - kxo).min(o2 as isize)).max(0) as usize;
                                        if hi > lo {
                                            dst_row[lo..hi].copy_from_slice(
                                                &src_row[(lo as isize + kxo) as usize
                                                    ..(hi as isize + kxo) as usize],
                                            );
                                        }
                                    } else {
                                        for (ox, d) in dst_row.iter_mut().enumerate() {
                                            let ix =
                                                (ox * stride) as isize + kx as isize - p;
                                            if ix >= 0 && (ix as usize) < s2 {
                                                *d = src_row[ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        r => panic!("conv rank {r} unsupported"),
    }
}

/// Scatter-add of `col` (shape [K, N]) back into an input-shaped buffer.
fn col2im_add<T: Real>(col: &[T], k: usize, stride: usize, out_sp: &[usize], gx: &mut NdArray<T>) {
    let cin = gx.shape[0];
    let p = (k / 2) as isize;
    match gx.shape.len() - 1 {
        2 => {
            let (s0, s1) = (gx.shape[1], gx.shape[2]);
            let (o0, o1) = (out_sp[0], out_sp[1]);
            let n = o0 * o1;
            for ci in 0..cin {
                let plane = &mut gx.data[ci * s0 * s1..(ci + 1) * s0 * s1];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let src_plane = &col[row * n..(row + 1) * n];
                        for oy in 0..o0 {
                            let iy = (oy * stride) as isize + ky as isize - p;
                            if iy < 0 || iy as usize >= s0 {
                                continue;
                            }
                            let dst_row = &mut plane[(iy as usize) * s1..(iy as usize + 1) * s1];
                            let src_row = &src_plane[oy * o1..(oy + 1) * o1];
                            for (ox, &s) in src_row.iter().enumerate() {
                                let ix = (ox * stride) as isize + kx as isize - p;
                                if ix >= 0 && (ix as usize) < s1 {
                                    dst_row[ix as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
        3 => {
            let (s0, s1, s2) = (gx.shape[1], gx.shape[2], gx.shape[3]);
            let (o0, o1, o2) = (out_sp[0], out_sp[1], out_sp[2]);
            let n = o0 * o1 * o2;
            for ci in 0..cin {
                let vol = &mut gx.data[ci * s0 * s1 * s2..(ci + 1) * s0 * s1 * s2];
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let row = ((ci * k + kz) * k + ky) * k + kx;
                            let src_vol = &col[row * n..(row + 1) * n];
                            for oz in 0..o0 {
                                let iz = (oz * stride) as isize + kz as isize - p;
                                if iz < 0 || iz as usize >= s0 {
                                    continue;
                                }
                                for oy in 0..o1 {
                                    let iy = (oy * stride) as isize + ky as isize - p;
                                    if iy < 0 || iy as usize >= s1 {
                                        continue;
                                    }
                                    let base = ((iz as usize) * s1 + iy as usize) * s2;
                                    let src_row =
                                        &src_vol[(oz * o1 + oy) * o2..(oz * o1 + oy) * o2 + o2];
                                    for (ox, &s) in src_row.iter().enumerate() {
                                        let ix = (ox * stride) as isize + kx as isize - p;
                                        if ix >= 0 && (ix as usize) < s2 {
                                            vol[base + ix as usize] += s;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        r => panic!("conv rank {r} unsupported"),
    }
}

#[cfg(test)]
pub(crate) fn conv_fwd<T: Real>(
    x: &NdArray<T>,
    w: &NdArray<T>,
    b: &NdArray<T>,
    stride: usize,
) -> NdArray<T> {
    conv_fwd_keep(x, w, b, stride, false).0
}

/// Forward convolution; optionally hands back the im2col buffer so the
/// backward pass does not have to rebuild it.
pub(crate) fn conv_fwd_keep<T: Real>(
    x: &NdArray<T>,
    w: &NdArray<T>,
    b: &NdArray<T>,
    stride: usize,
    keep_col: bool,
) -> (NdArray<T>, Option<Box<[T]>>) {
    let rank = x.shape.len() - 1;
    let cout = w.shape[0];
    let cin = w.shape[1];
    assert_eq!(cin, x.shape[0], "conv input channels");
    assert_eq!(b.len(), cout);
    let k = w.shape[2];
    let out_sp = out_spatial(&x.shape[1..], k, stride);
    let n: usize = out_sp.iter().product();
    let kk = cin * k.pow(rank as u32);

    let mut col = vec![T::ZERO; kk * n];
    im2col(x, k, stride, &out_sp, &mut col);

    let mut out = vec![T::ZERO; cout * n];
    unsafe {
        T::gemm(
            cout,
            kk,
            n,
            T::ONE,
            w.data.as_ptr(),
            kk as isize,
            1,
            col.as_ptr(),
            n as isize,
            1,
            T::ZERO,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    for c in 0..cout {
        let bias = b.data[c];
        for v in &mut out[c * n..(c + 1) * n] {
            *v += bias;
        }
    }
    let mut shape = vec![cout];
    shape.extend_from_slice(&out_sp);
    let kept = keep_col.then(|| col.into_boxed_slice());
    (NdArray::from_vec(&shape, out), kept)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_bwd<T: Real>(
    g: &Graph<T>,
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    cached_col: Option<&[T]>,
    gout: &NdArray<T>,
    grads: &mut [Option<NdArray<T>>],
) {
    let xv = &g.nodes[x.0].value;
    let wv = &g.nodes[w.0].value;
    let rank = xv.shape.len() - 1;
    let cout = wv.shape[0];
    let cin = wv.shape[1];
    let k = wv.shape[2];
    let out_sp = out_spatial(&xv.shape[1..], k, stride);
    let n: usize = out_sp.iter().product();
    let kk = cin * k.pow(rank as u32);

    // Bias gradient.
    g.accum(grads, b, |gb| {
        for c in 0..cout {
            let mut acc = T::ZERO;
            for &v in &gout.data[c * n..(c + 1) * n] {
                acc += v;
            }
            gb.data[c] += acc;
        }
    });

    let need_w = g.nodes[w.0].needs_grad;
    let need_x = g.nodes[x.0].needs_grad;
    if !need_w && !need_x {
        return;
    }

    if need_w {
        // dW[M,K] += dY[M,N] * col[K,N]^T
        let rebuilt: Option<Vec<T>> = if cached_col.is_none() {
            let mut col = vec![T::ZERO; kk * n];
            im2col(xv, k, stride, &out_sp, &mut col);
            Some(col)
        } else {
            None
        };
        let col: &[T] = cached_col.unwrap_or_else(|| rebuilt.as_deref().unwrap());
        g.accum(grads, w, |gw| unsafe {
            T::gemm(
                cout,
                n,
                kk,
                T::ONE,
                gout.data.as_ptr(),
                n as isize,
                1,
                col.as_ptr(),
                1,
                n as isize,
                T::ONE,
                gw.data.as_mut_ptr(),
                kk as isize,
                1,
            );
        });
    }

    if need_x {
        // dcol[K,N] = W^T[K,M] * dY[M,N], then scatter back.
        let mut dcol = vec![T::ZERO; kk * n];
        unsafe {
            T::gemm(
                kk,
                cout,
                n,
                T::ONE,
                wv.data.as_ptr(),
                1,
                kk as isize,
                gout.data.as_ptr(),
                n as isize,
                1,
                T::ZERO,
                dcol.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        g.accum(grads, x, |gx| {
            col2im_add(&dcol, k, stride, &out_sp, gx);
        });
    }
}

pub(crate) fn upsample_nearest_fwd<T: Real>(x: &NdArray<T>) -> NdArray<T> {
    let c = x.shape[0];
    match x.shape.len() - 1 {
        2 => {
            let (s0, s1) = (x.shape[1], x.shape[2]);
            let (d0, d1) = (s0 * 2, s1 * 2);
            let mut out = vec![T::ZERO; c * d0 * d1];
            for ch in 0..c {
                let src = &x.data[ch * s0 * s1..(ch + 1) * s0 * s1];
                let dst = &mut out[ch * d0 * d1..(ch + 1) * d0 * d1];
                for i in 0..d0 {
                    let si = i >> 1;
                    for j in 0..d1 {
                        dst[i * d1 + j] = src[si * s1 + (j >> 1)];
                    }
                }
            }
            NdArray::from_vec(&[c, d0, d1], out)
        }
        3 => {
            let (s0, s1, s2) = (x.shape[1], x.shape[2], x.shape[3]);
            let (d0, d1, d2) = (s0 * 2, s1 * 2, s2 * 2);
            let mut out = vec![T::ZERO; c * d0 * d1 * d2];
            for ch in 0..c {
                let src = &x.data[ch * s0 * s1 * s2..(ch + 1) * s0 * s1 * s2];
                let dst = &mut out[ch * d0 * d1 * d2..(ch + 1) * d0 * d1 * d2];
                for i in 0..d0 {
                    for j in 0..d1 {
                        let base = ((i >> 1) * s1 + (j >> 1)) * s2;
                        for l in 0..d2 {
                            dst[(i * d1 + j) * d2 + l] = src[base + (l >> 1)];
                        }
                    }
                }
            }
            NdArray::from_vec(&[c, d0, d1, d2], out)
        }
        r => panic!("upsample rank {r} unsupported"),
    }
}

pub(crate) fn upsample_nearest_bwd<T: Real>(
    gout: &NdArray<T>,
    in_shape: &[usize],
    gx: &mut NdArray<T>,
) {
    let c = in_shape[0];
    match in_shape.len() - 1 {
        2 => {
            let (s0, s1) = (in_shape[1], in_shape[2]);
            let (d0, d1) = (s0 * 2, s1 * 2);
            for ch in 0..c {
                let src = &gout.data[ch * d0 * d1..(ch + 1) * d0 * d1];
                let dst = &mut gx.data[ch * s0 * s1..(ch + 1) * s0 * s1];
                for i in 0..d0 {
                    let si = i >> 1;
                    for j in 0..d1 {
                        dst[si * s1 + (j >> 1)] += src[i * d1 + j];
                    }
                }
            }
        }
        3 => {
            let (s0, s1, s2) = (in_shape[1], in_shape[2], in_shape[3]);
            let (d0, d1, d2) = (s0 * 2, s1 * 2, s2 * 2);
            for ch in 0..c {
                let src = &gout.data[ch * d0 * d1 * d2..(ch + 1) * d0 * d1 * d2];
                let dst = &mut gx.data[ch * s0 * s1 * s2..(ch + 1) * s0 * s1 * s2];
                for i in 0..d0 {
                    for j in 0..d1 {
                        let base = ((i >> 1) * s1 + (j >> 1)) * s2;
                        for l in 0..d2 {
                            dst[base + (l >> 1)] += src[(i * d1 + j) * d2 + l];
                        }
                    }
                }
            }
        }
        r => panic!("upsample rank {r} unsupported"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_stride1() {
        // 1-channel image through a kernel with a single center 1.
        let x = NdArray::from_vec(&[1, 4, 5], (0..20).map(|v| v as f64).collect());
        let mut wdata = vec![0.0; 9];
        wdata[4] = 1.0;
        let w = NdArray::from_vec(&[1, 1, 3, 3], wdata);
        let b = NdArray::zeros(&[1]);
        let y = conv_fwd(&x, &w, &b, 1);
        assert_eq!(y.shape, vec![1, 4, 5]);
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn conv_matches_naive_loops() {
        // Random-ish deterministic conv cross-checked against nested loops.
        let (cin, cout, s0, s1) = (3, 4, 7, 6);
        let x = NdArray::from_vec(
            &[cin, s0, s1],
            (0..cin * s0 * s1)
                .map(|i| ((i * 29 + 7) % 13) as f64 / 13.0 - 0.4)
                .collect(),
        );
        let w = NdArray::from_vec(
            &[cout, cin, 3, 3],
            (0..cout * cin * 9)
                .map(|i| ((i * 17 + 3) % 11) as f64 / 11.0 - 0.5)
                .collect(),
        );
        let b = NdArray::from_vec(&[cout], vec![0.1, -0.2, 0.3, 0.0]);
        for stride in [1usize, 2] {
            let y = conv_fwd(&x, &w, &b, stride);
            let osp = out_spatial(&[s0, s1], 3, stride);
            for co in 0..cout {
                for oy in 0..osp[0] {
                    for ox in 0..osp[1] {
                        let mut acc = b.data[co];
                        for ci in 0..cin {
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy >= 0
                                        && iy < s0 as isize
                                        && ix >= 0
                                        && ix < s1 as isize
                                    {
                                        acc += x.data
                                            [(ci * s0 + iy as usize) * s1 + ix as usize]
                                            * w.data[((co * cin + ci) * 3 + ky) * 3 + kx];
                                    }
                                }
                            }
                        }
                        let got = y.data[(co * osp[0] + oy) * osp[1] + ox];
                        assert!((got - acc).abs() < 1e-12, "stride {stride} mismatch");
                    }
                }
            }
        }
    }

    #[test]
    fn conv3d_shapes() {
        let x = NdArray::<f64>::zeros(&[2, 8, 8, 8]);
        let w = NdArray::<f64>::zeros(&[5, 2, 3, 3, 3]);
        let b = NdArray::<f64>::zeros(&[5]);
        assert_eq!(conv_fwd(&x, &w, &b, 2).shape, vec![5, 4, 4, 4]);
        assert_eq!(conv_fwd(&x, &w, &b, 1).shape, vec![5, 8, 8, 8]);
    }

    #[test]
    fn upsample_roundtrip_shapes() {
        let x = NdArray::from_vec(&[2, 2, 3], (0..12).map(|v| v as f64).collect());
        let y = upsample_nearest_fwd(&x);
        assert_eq!(y.shape, vec![2, 4, 6]);
        assert_eq!(y.at(&[1, 3, 5]), x.at(&[1, 1, 2]));
        let mut gx = NdArray::zeros(&[2, 2, 3]);
        upsample_nearest_bwd(&NdArray::filled(&[2, 4, 6], 1.0), &[2, 2, 3], &mut gx);
        assert!(gx.data.iter().all(|&v| v == 4.0));
    }
}
