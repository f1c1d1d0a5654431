//! Multilinear interpolation with a zero-padding convention: coordinates
//! outside the grid contribute zero. Shared by the plain samplers in this
//! module and by the differentiable warp ops on the tape.

use crate::tape::real::Real;

/// Value and d(value)/d(coordinate) of bilinear sampling at (p0, p1).
#[derive(Debug, Clone, Copy)]
pub struct Sample2<T> {
    pub value: T,
    pub grad: [T; 2],
}

/// Value and d(value)/d(coordinate) of trilinear sampling at (p0, p1, p2).
#[derive(Debug, Clone, Copy)]
pub struct Sample3<T> {
    pub value: T,
    pub grad: [T; 3],
}

#[inline(always)]
fn cell(p: f64) -> (isize, f64) {
    let i0 = p.floor();
    (i0 as isize, p - i0)
}

#[inline(always)]
fn fetch<T: Real>(data: &[T], idx: isize, size: usize) -> T {
    if idx >= 0 && (idx as usize) < size {
        data[idx as usize]
    } else {
        T::ZERO
    }
}

pub fn sample2<T: Real>(data: &[T], s0: usize, s1: usize, p0: f64, p1: f64) -> Sample2<T> {
    let (i0, f0) = cell(p0);
    let (i1, f1) = cell(p1);
    let f0 = T::from_f64(f0);
    let f1 = T::from_f64(f1);
    let g0 = T::ONE - f0;
    let g1 = T::ONE - f1;

    let row = |i: isize| -> (T, T) {
        if i < 0 || i as usize >= s0 {
            return (T::ZERO, T::ZERO);
        }
        let base = (i as usize) * s1;
        let a = fetch(&data[base..base + s1], i1, s1);
        let b = fetch(&data[base..base + s1], i1 + 1, s1);
        (a, b)
    };
    let (v00, v01) = row(i0);
    let (v10, v11) = row(i0 + 1);

    let top = v00 * g1 + v01 * f1;
    let bot = v10 * g1 + v11 * f1;
    let value = top * g0 + bot * f0;
    let d0 = bot - top;
    let d1 = (v01 - v00) * g0 + (v11 - v10) * f0;
    Sample2 {
        value,
        grad: [d0, d1],
    }
}

pub fn sample3<T: Real>(
    data: &[T],
    s0: usize,
    s1: usize,
    s2: usize,
    p0: f64,
    p1: f64,
    p2: f64,
) -> Sample3<T> {
    let (i0, f0) = cell(p0);
    let (i1, f1) = cell(p1);
    let (i2, f2) = cell(p2);
    let f0 = T::from_f64(f0);
    let f1 = T::from_f64(f1);
    let f2 = T::from_f64(f2);
    let g0 = T::ONE - f0;
    let g1 = T::ONE - f1;
    let g2 = T::ONE - f2;

    // Bilinear sample of plane i along axes 1,2 plus its two in-plane partials.
    let plane = |i: isize| -> (T, T, T) {
        if i < 0 || i as usize >= s0 {
            return (T::ZERO, T::ZERO, T::ZERO);
        }
        let base = (i as usize) * s1 * s2;
        let sl = &data[base..base + s1 * s2];
        let row = |j: isize| -> (T, T) {
            if j < 0 || j as usize >= s1 {
                return (T::ZERO, T::ZERO);
            }
            let b = (j as usize) * s2;
            (fetch(&sl[b..b + s2], i2, s2), fetch(&sl[b..b + s2], i2 + 1, s2))
        };
        let (v00, v01) = row(i1);
        let (v10, v11) = row(i1 + 1);
        let top = v00 * g2 + v01 * f2;
        let bot = v10 * g2 + v11 * f2;
        let value = top * g1 + bot * f1;
        let d1 = bot - top;
        let d2 = (v01 - v00) * g1 + (v11 - v10) * f1;
        (value, d1, d2)
    };

    let (va, da1, da2) = plane(i0);
    let (vb, db1, db2) = plane(i0 + 1);
    Sample3 {
        value: va * g0 + vb * f0,
        grad: [vb - va, da1 * g0 + db1 * f0, da2 * g0 + db2 * f0],
    }
}

/// Adds `g` times the bilinear weights into the 4 cell corners (the adjoint
/// of `sample2` with respect to the grid values).
pub fn scatter2<T: Real>(data: &mut [T], s0: usize, s1: usize, p0: f64, p1: f64, g: T) {
    let (i0, f0) = cell(p0);
    let (i1, f1) = cell(p1);
    let f0 = T::from_f64(f0);
    let f1 = T::from_f64(f1);
    let g0 = T::ONE - f0;
    let g1 = T::ONE - f1;
    let mut add = |a: isize, b: isize, w: T| {
        if a >= 0 && (a as usize) < s0 && b >= 0 && (b as usize) < s1 {
            data[(a as usize) * s1 + b as usize] += g * w;
        }
    };
    add(i0, i1, g0 * g1);
    add(i0, i1 + 1, g0 * f1);
    add(i0 + 1, i1, f0 * g1);
    add(i0 + 1, i1 + 1, f0 * f1);
}

/// Trilinear counterpart of `scatter2`.
#[allow(clippy::too_many_arguments)]
pub fn scatter3<T: Real>(
    data: &mut [T],
    s0: usize,
    s1: usize,
    s2: usize,
    p0: f64,
    p1: f64,
    p2: f64,
    g: T,
) {
    let (i0, f0) = cell(p0);
    let (i1, f1) = cell(p1);
    let (i2, f2) = cell(p2);
    let f0 = T::from_f64(f0);
    let f1 = T::from_f64(f1);
    let f2 = T::from_f64(f2);
    let g0 = T::ONE - f0;
    let g1 = T::ONE - f1;
    let g2 = T::ONE - f2;
    let mut add = |a: isize, b: isize, cc: isize, w: T| {
        if a >= 0
            && (a as usize) < s0
            && b >= 0
            && (b as usize) < s1
            && cc >= 0
            && (cc as usize) < s2
        {
            data[((a as usize) * s1 + b as usize) * s2 + cc as usize] += g * w;
        }
    };
    add(i0, i1, i2, g0 * g1 * g2);
    add(i0, i1, i2 + 1, g0 * g1 * f2);
    add(i0, i1 + 1, i2, g0 * f1 * g2);
    add(i0, i1 + 1, i2 + 1, g0 * f1 * f2);
    add(i0 + 1, i1, i2, f0 * g1 * g2);
    add(i0 + 1, i1, i2 + 1, f0 * g1 * f2);
    add(i0 + 1, i1 + 1, i2, f0 * f1 * g2);
    add(i0 + 1, i1 + 1, i2 + 1, f0 * f1 * f2);
}

/// Multilinear sample of a rank-2 or rank-3 grid at one point.
pub fn sample_nd<T: Real>(data: &[T], shape: &[usize], point: &[f64]) -> T {
    match shape.len() {
        2 => sample2(data, shape[0], shape[1], point[0], point[1]).value,
        3 => sample3(
            data, shape[0], shape[1], shape[2], point[0], point[1], point[2],
        )
        .value,
        r => panic!("unsupported rank {r}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_points_are_exact() {
        let data = vec![0.1, 0.7, 0.3, 0.9, 0.2, 0.5];
        for i in 0..2usize {
            for j in 0..3usize {
                let s = sample2(&data, 2, 3, i as f64, j as f64);
                assert_eq!(s.value, data[i * 3 + j]);
            }
        }
    }

    #[test]
    fn midpoint_is_average() {
        // 1-D axis case embedded in a 2-D grid: values 0.2 and 0.6 along axis 1.
        let data = vec![0.2, 0.6];
        let s = sample2(&data, 1, 2, 0.0, 0.5);
        assert!((s.value - 0.4f64).abs() < 1e-15);
    }

    #[test]
    fn far_outside_is_zero() {
        let data = vec![1.0; 16];
        let s = sample2(&data, 4, 4, -5.0, -5.0);
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let data: Vec<f64> = (0..25).map(|i| ((i * 37 % 11) as f64) / 11.0).collect();
        let (p0, p1) = (1.3, 2.6);
        let s = sample2(&data, 5, 5, p0, p1);
        let h = 1e-7;
        let d0 = (sample2(&data, 5, 5, p0 + h, p1).value - sample2(&data, 5, 5, p0 - h, p1).value)
            / (2.0 * h);
        let d1 = (sample2(&data, 5, 5, p0, p1 + h).value - sample2(&data, 5, 5, p0, p1 - h).value)
            / (2.0 * h);
        assert!((s.grad[0] - d0).abs() < 1e-6);
        assert!((s.grad[1] - d1).abs() < 1e-6);
    }

    #[test]
    fn trilinear_matches_separable_construction() {
        // Linear ramp field: interpolation must reproduce the ramp exactly.
        let mut data = vec![0.0f64; 4 * 4 * 4];
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    data[(a * 4 + b) * 4 + c] = 0.1 * a as f64 + 0.2 * b as f64 + 0.3 * c as f64;
                }
            }
        }
        let s = sample3(&data, 4, 4, 4, 1.25, 2.5, 0.75);
        let expect = 0.1 * 1.25 + 0.2 * 2.5 + 0.3 * 0.75;
        assert!((s.value - expect).abs() < 1e-12);
        assert!((s.grad[0] - 0.1).abs() < 1e-12);
        assert!((s.grad[1] - 0.2).abs() < 1e-12);
        assert!((s.grad[2] - 0.3).abs() < 1e-12);
    }
}
