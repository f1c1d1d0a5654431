//! The training objective: masked similarity (MSE or windowed CC), diffusion
//! regularization of the dense field, and a singular-value scaling penalty on
//! the affine map.
//!
//! These are the plain, readable reference implementations; the autodiff tape
//! carries its own differentiable versions which are cross-checked against
//! these in tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{grad_forward, singular_values, AffineMap, BinaryMask, DisplacementField, GridImage};

/// Per-voxel nonnegative loss weights. `m` counts the nonzero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub m: usize,
}

impl WeightMap {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch("weight map shape/data".into()));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("weights must be finite and >= 0"));
        }
        let m = data.iter().filter(|&&v| v != 0.0).count();
        if m == 0 {
            return Err(Error::DegenerateMask);
        }
        Ok(WeightMap { shape, data, m })
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        let data: Vec<f64> = mask.data.iter().map(|&v| v as f64).collect();
        let m = data.iter().filter(|&&v| v != 0.0).count();
        WeightMap {
            shape: mask.shape.clone(),
            data,
            m,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        WeightMap {
            shape: shape.to_vec(),
            data: vec![1.0; len],
            m: len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimKind {
    Mse,
    Cc,
}

/// Configuration of the total loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub sim_kind: SimKind,
    pub lambda_diffusion: f64,
    pub lambda_scaling: f64,
    /// Window edge length for the windowed CC; odd.
    pub cc_window: usize,
    pub cc_epsilon: f64,
    pub brain_weight_factor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            sim_kind: SimKind::Mse,
            lambda_diffusion: 0.8,
            lambda_scaling: 0.0,
            cc_window: 9,
            cc_epsilon: 1e-5,
            brain_weight_factor: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cc_window % 2 == 0 || self.cc_window < 3 {
            return Err(Error::invalid("cc_window must be odd and >= 3"));
        }
        if self.lambda_diffusion < 0.0 || self.lambda_scaling < 0.0 {
            return Err(Error::invalid("lambdas must be >= 0"));
        }
        if !(self.cc_epsilon > 0.0) {
            return Err(Error::invalid("cc_epsilon must be > 0"));
        }
        if !(self.brain_weight_factor > 0.0) {
            return Err(Error::invalid("brain_weight_factor must be > 0"));
        }
        Ok(())
    }
}

/// Weighted per-term loss values; the regularizers are stored already scaled
/// by their lambdas so the terms sum to `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub sim: f64,
    pub diffusion: f64,
    pub scaling: f64,
    pub total: f64,
}

fn check_same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Weighted mean squared error: (1/M) sum_p W(p) (A(p) - Y(p))^2.
pub fn masked_mse(a: &GridImage, y: &GridImage, w: &WeightMap) -> Result<f64> {
    check_same_shape(&a.shape, &y.shape, "masked_mse images")?;
    check_same_shape(&a.shape, &w.shape, "masked_mse weights")?;
    if w.m == 0 {
        return Err(Error::DegenerateMask);
    }
    let mut acc = 0.0;
    for ((av, yv), wv) in a.data.iter().zip(&y.data).zip(&w.data) {
        if *wv != 0.0 {
            let d = av - yv;
            acc += wv * d * d;
        }
    }
    Ok(acc / w.m as f64)
}

/// Windowed cross-correlation similarity, averaged over the weight map.
///
/// At each voxel the numerator is the squared local covariance and the
/// denominator the product of local variances plus `eps`; window sums are
/// zero-padded at the borders and the window has j^rank taps.
pub fn local_cc(a: &GridImage, y: &GridImage, w: &WeightMap, j: usize, eps: f64) -> Result<f64> {
    check_same_shape(&a.shape, &y.shape, "local_cc images")?;
    check_same_shape(&a.shape, &w.shape, "local_cc weights")?;
    if j % 2 == 0 || j < 3 {
        return Err(Error::invalid("cc window must be odd and >= 3"));
    }
    let n = a.rank();
    let r = (j / 2) as isize;
    let k = (j as f64).powi(n as i32);

    // Window sums with zero padding, then mean removal against the full
    // j^n-tap window.
    let cc_from_sums = |sa: f64, sy: f64, say: f64, saa: f64, syy: f64| -> f64 {
        let cross = say - sa * sy / k;
        let var_a = saa - sa * sa / k;
        let var_y = syy - sy * sy / k;
        (cross * cross) / (var_a * var_y + eps)
    };

    let shape = &a.shape;
    let mut acc = 0.0;
    match n {
        2 => {
            let (s0, s1) = (shape[0] as isize, shape[1] as isize);
            for i in 0..s0 {
                for jx in 0..s1 {
                    let wv = w.data[(i * s1 + jx) as usize];
                    if wv == 0.0 {
                        continue;
                    }
                    let (mut sa, mut sy, mut say, mut saa, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for a0 in (i - r).max(0)..=(i + r).min(s0 - 1) {
                        for a1 in (jx - r).max(0)..=(jx + r).min(s1 - 1) {
                            let off = (a0 * s1 + a1) as usize;
                            let av = a.data[off];
                            let yv = y.data[off];
                            sa += av;
                            sy += yv;
                            say += av * yv;
                            saa += av * av;
                            syy += yv * yv;
                        }
                    }
                    acc += wv * cc_from_sums(sa, sy, say, saa, syy);
                }
            }
        }
        3 => {
            let (s0, s1, s2) = (shape[0] as isize, shape[1] as isize, shape[2] as isize);
            for i in 0..s0 {
                for jx in 0..s1 {
                    for kx in 0..s2 {
                        let wv = w.data[((i * s1 + jx) * s2 + kx) as usize];
                        if wv == 0.0 {
                            continue;
                        }
                        let (mut sa, mut sy, mut say, mut saa, mut syy) =
                            (0.0, 0.0, 0.0, 0.0, 0.0);
                        for a0 in (i - r).max(0)..=(i + r).min(s0 - 1) {
                            for a1 in (jx - r).max(0)..=(jx + r).min(s1 - 1) {
                                for a2 in (kx - r).max(0)..=(kx + r).min(s2 - 1) {
                                    let off = ((a0 * s1 + a1) * s2 + a2) as usize;
                                    let av = a.data[off];
                                    let yv = y.data[off];
                                    sa += av;
                                    sy += yv;
                                    say += av * yv;
                                    saa += av * av;
                                    syy += yv * yv;
                                }
                            }
                        }
                        acc += wv * cc_from_sums(sa, sy, say, saa, syy);
                    }
                }
            }
        }
        _ => return Err(Error::invalid("local_cc supports rank 2 or 3")),
    }
    Ok(acc / w.m as f64)
}

/// Mean squared Frobenius norm of the forward-difference field gradient,
/// normalized by the number of grid points.
pub fn diffusion_energy(u: &DisplacementField) -> Result<f64> {
    let g = grad_forward(u)?;
    let total = u.num_voxels() as f64;
    Ok(g.data.iter().map(|v| v * v).sum::<f64>() / total)
}

/// L1 distance of the affine map's singular values from 1.
pub fn scaling_penalty(t: &AffineMap) -> f64 {
    singular_values(t).iter().map(|s| (s - 1.0).abs()).sum()
}

/// Full loss of one registration: similarity + lambda-weighted regularizers.
pub fn total_loss(
    a: &GridImage,
    y_final: &GridImage,
    u: &DisplacementField,
    t: &AffineMap,
    w: &WeightMap,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let sim = match cfg.sim_kind {
        SimKind::Mse => masked_mse(a, y_final, w)?,
        SimKind::Cc => 1.0 - local_cc(a, y_final, w, cfg.cc_window, cfg.cc_epsilon)?,
    };
    let diffusion = cfg.lambda_diffusion * diffusion_energy(u)?;
    let scaling = cfg.lambda_scaling * scaling_penalty(t);
    Ok(LossBreakdown {
        sim,
        diffusion,
        scaling,
        total: sim + diffusion + scaling,
    })
}

/// W = S_A with brain voxels upweighted by `factor` when a brain mask is given.
pub fn build_weight_map(
    s_a: &BinaryMask,
    s_brain: Option<&BinaryMask>,
    factor: f64,
) -> Result<WeightMap> {
    if !(factor > 0.0) {
        return Err(Error::invalid("weight factor must be > 0"));
    }
    match s_brain {
        None => Ok(WeightMap::from_mask(s_a)),
        Some(b) => {
            check_same_shape(&s_a.shape, &b.shape, "weight map masks")?;
            for (sa, sb) in s_a.data.iter().zip(&b.data) {
                if *sb == 1 && *sa == 0 {
                    return Err(Error::invalid(
                        "brain mask must be contained in the atlas mask",
                    ));
                }
            }
            let data: Vec<f64> = s_a
                .data
                .iter()
                .zip(&b.data)
                .map(|(&sa, &sb)| sa as f64 + (factor - 1.0) * sb as f64)
                .collect();
            WeightMap::new(s_a.shape.clone(), data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_affine, AffineParams};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(shape: &[usize], data: Vec<f64>) -> GridImage {
        GridImage {
            shape: shape.to_vec(),
            data,
        }
    }

    fn smooth_textured(s: usize, seed: u64) -> GridImage {
        // Random image smoothed with a small box filter, scaled into [0,1];
        // textured enough that every CC window sees variation.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..s * s).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut out = vec![0.0; s * s];
        for i in 0..s {
            for j in 0..s {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for di in -1i32..=1 {
                    for dj in -1i32..=1 {
                        let a = i as i32 + di;
                        let b = j as i32 + dj;
                        if a >= 0 && a < s as i32 && b >= 0 && b < s as i32 {
                            acc += raw[a as usize * s + b as usize];
                            cnt += 1.0;
                        }
                    }
                }
                out[i * s + j] = acc / cnt;
            }
        }
        img(&[s, s], out)
    }

    #[test]
    fn masked_mse_zero_on_identical() {
        let a = smooth_textured(8, 1);
        let w = WeightMap::ones(&[8, 8]);
        assert_eq!(masked_mse(&a, &a, &w).unwrap(), 0.0);
    }

    #[test]
    fn masked_mse_hand_value() {
        let a = img(&[2, 2], vec![0.5, 0.2, 0.1, 1.0]);
        let y = img(&[2, 2], vec![0.0, 0.9, 0.3, 0.8]);
        let w = WeightMap::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = masked_mse(&a, &y, &w).unwrap();
        assert!((v - 0.145).abs() < 1e-15);
    }

    #[test]
    fn masked_mse_excludes_outside_mask() {
        let a = img(&[2, 2], vec![0.5, 0.2, 0.1, 1.0]);
        let mut y = a.clone();
        y.data[1] = 0.9; // differs only at a voxel we will mask out
        let masked = WeightMap::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let all = WeightMap::ones(&[2, 2]);
        assert_eq!(masked_mse(&a, &y, &masked).unwrap(), 0.0);
        assert!(masked_mse(&a, &y, &all).unwrap() > 0.0);
    }

    #[test]
    fn masked_mse_shape_mismatch() {
        let a = img(&[2, 2], vec![0.0; 4]);
        let y = img(&[2, 3], vec![0.0; 6]);
        let w = WeightMap::ones(&[2, 2]);
        assert!(matches!(
            masked_mse(&a, &y, &w),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn local_cc_perfect_correlation() {
        let a = smooth_textured(16, 2);
        let w = WeightMap::ones(&[16, 16]);
        let v = local_cc(&a, &a, &w, 9, 1e-5).unwrap();
        assert!((v - 1.0).abs() < 1e-3, "cc = {v}");
    }

    /// Weight map covering voxels whose full window stays inside the grid
    /// (the zero-padded exterior breaks intensity relations at the border,
    /// same as a segmentation mask keeps the loss away from the frame edge).
    fn interior_weights(s: usize, j: usize) -> WeightMap {
        let r = j / 2;
        let mut data = vec![0.0; s * s];
        for i in r..s - r {
            for jx in r..s - r {
                data[i * s + jx] = 1.0;
            }
        }
        WeightMap::new(vec![s, s], data).unwrap()
    }

    #[test]
    fn local_cc_affine_intensity_invariance() {
        let a = smooth_textured(16, 3);
        let y = img(
            &[16, 16],
            a.data.iter().map(|v| 0.5 * v + 0.2).collect::<Vec<_>>(),
        );
        let w = interior_weights(16, 9);
        let v = local_cc(&a, &y, &w, 9, 1e-5).unwrap();
        assert!((v - 1.0).abs() < 1e-3, "cc = {v}");
    }

    #[test]
    fn local_cc_constant_target_contributes_zero() {
        let a = smooth_textured(12, 4);
        let y = img(&[12, 12], vec![0.5; 144]);
        let w = interior_weights(12, 9);
        let v = local_cc(&a, &y, &w, 9, 1e-5).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn diffusion_cases() {
        let mut f = DisplacementField::zeros(&[4, 4]);
        for v in f.data.iter_mut() {
            *v = -1.25;
        }
        assert_eq!(diffusion_energy(&f).unwrap(), 0.0);

        // u(x,y) = (0.1 x, 0) on 4x4: twelve interior stencils of 0.1 squared.
        let mut f = DisplacementField::zeros(&[4, 4]);
        for i in 0..4 {
            for j in 0..4 {
                f.data[(i * 4 + j) * 2] = 0.1 * i as f64;
            }
        }
        let v = diffusion_energy(&f).unwrap();
        assert!((v - 0.0075).abs() < 1e-15, "{v}");
    }

    #[test]
    fn diffusion_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (s0, s1) = (6, 5);
        let mut f = DisplacementField::zeros(&[s0, s1]);
        for v in f.data.iter_mut() {
            *v = rng.random_range(-3.0..3.0);
        }
        let fast = diffusion_energy(&f).unwrap();
        let mut acc = 0.0;
        for i in 0..s0 {
            for j in 0..s1 {
                for comp in 0..2 {
                    let here = f.at(&[i, j])[comp];
                    if i + 1 < s0 {
                        let d = f.at(&[i + 1, j])[comp] - here;
                        acc += d * d;
                    }
                    if j + 1 < s1 {
                        let d = f.at(&[i, j + 1])[comp] - here;
                        acc += d * d;
                    }
                }
            }
        }
        let oracle = acc / (s0 * s1) as f64;
        assert!((fast - oracle).abs() < 1e-10);
    }

    #[test]
    fn diffusion_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut f = DisplacementField::zeros(&[6, 6]);
        for v in f.data.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let base = diffusion_energy(&f).unwrap();
        for v in f.data.chunks_exact_mut(2) {
            v[0] += 5.0;
            v[1] -= 3.0;
        }
        let shifted = diffusion_energy(&f).unwrap();
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn scaling_penalty_cases() {
        assert_eq!(scaling_penalty(&AffineMap::identity(2)), 0.0);

        let mut p = AffineParams::neutral(2);
        p.rotation = vec![37.0];
        let rot = make_affine(&p, &[0.0, 0.0]).unwrap();
        assert!(scaling_penalty(&rot).abs() < 1e-9);

        let mut t = AffineMap::identity(2);
        t.m[0] = 2.0;
        t.m[4] = 0.5;
        assert!((scaling_penalty(&t) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn scaling_penalty_rotation_invariant() {
        let t = AffineMap::new(2, vec![1.3, 0.2, 5.0, -0.1, 0.6, -2.0, 0.0, 0.0, 1.0]).unwrap();
        let base = scaling_penalty(&t);
        let mut p = AffineParams::neutral(2);
        p.rotation = vec![123.0];
        let r = make_affine(&p, &[0.0, 0.0]).unwrap();
        assert!((scaling_penalty(&r.compose(&t)) - base).abs() < 1e-9);
        assert!((scaling_penalty(&t.compose(&r)) - base).abs() < 1e-9);
    }

    #[test]
    fn total_loss_perfect_registration() {
        let a = smooth_textured(8, 6);
        let u = DisplacementField::zeros(&[8, 8]);
        let mut p = AffineParams::neutral(2);
        p.rotation = vec![77.0];
        let t = make_affine(&p, &[3.5, 3.5]).unwrap();
        let w = WeightMap::ones(&[8, 8]);
        let cfg = LossConfig {
            lambda_diffusion: 1.7,
            lambda_scaling: 2.3,
            ..LossConfig::default()
        };
        let b = total_loss(&a, &a, &u, &t, &w, &cfg).unwrap();
        assert!(b.total.abs() < 1e-6, "{b:?}");
    }

    #[test]
    fn total_loss_reduces_to_similarity() {
        let a = smooth_textured(8, 7);
        let y = smooth_textured(8, 8);
        let u = DisplacementField::zeros(&[8, 8]);
        let t = AffineMap::identity(2);
        let w = WeightMap::ones(&[8, 8]);
        let cfg = LossConfig {
            lambda_diffusion: 0.0,
            lambda_scaling: 0.0,
            ..LossConfig::default()
        };
        let b = total_loss(&a, &y, &u, &t, &w, &cfg).unwrap();
        assert_eq!(b.total, masked_mse(&a, &y, &w).unwrap());
    }

    #[test]
    fn total_loss_breakdown_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = smooth_textured(8, 9);
        let y = smooth_textured(8, 10);
        let mut u = DisplacementField::zeros(&[8, 8]);
        for v in u.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let t = AffineMap::new(2, vec![1.2, 0.1, 3.0, -0.2, 0.9, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = WeightMap::ones(&[8, 8]);
        let cfg = LossConfig {
            lambda_diffusion: 0.8,
            lambda_scaling: 0.004,
            ..LossConfig::default()
        };
        let b = total_loss(&a, &y, &u, &t, &w, &cfg).unwrap();
        assert!((b.sim + b.diffusion + b.scaling - b.total).abs() < 1e-12);
    }

    #[test]
    fn build_weight_map_cases() {
        // 100-voxel atlas mask, 30-voxel brain mask.
        let s_a = BinaryMask::new(vec![10, 10], vec![1u8; 100]).unwrap();
        let s_brain = BinaryMask::new(vec![10, 10], {
            let mut d = vec![0u8; 100];
            for v in d.iter_mut().take(30) {
                *v = 1;
            }
            d
        })
        .unwrap();

        let w = build_weight_map(&s_a, None, 2.0).unwrap();
        assert_eq!(w.data, WeightMap::from_mask(&s_a).data);

        let w = build_weight_map(&s_a, Some(&s_brain), 1.0).unwrap();
        assert_eq!(w.data, WeightMap::from_mask(&s_a).data);

        let w = build_weight_map(&s_a, Some(&s_brain), 2.0).unwrap();
        assert_eq!(w.data.iter().sum::<f64>(), 130.0);
        assert_eq!(w.m, 100);

        // Brain not contained in atlas mask -> invalid.
        let narrow = BinaryMask::new(vec![10, 10], {
            let mut d = vec![1u8; 100];
            d[99] = 0;
            d
        })
        .unwrap();
        let everywhere = BinaryMask::new(vec![10, 10], vec![1u8; 100]).unwrap();
        assert!(build_weight_map(&narrow, Some(&everywhere), 2.0).is_err());
    }
}
