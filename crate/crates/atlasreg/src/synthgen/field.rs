//! Smooth random displacement fields: i.i.d. uniform noise per component,
//! Gaussian-convolved, normalized to unit maximum voxel magnitude, scaled.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::DisplacementField;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Zero-padded separable convolution of a scalar lattice along every axis.
fn smooth_scalar(data: &mut Vec<f64>, shape: &[usize], kernel: &[f64]) {
    let radius = kernel.len() / 2;
    let mut next = vec![0.0; data.len()];
    for ax in 0..shape.len() {
        let len = shape[ax];
        let stride: usize = shape[ax + 1..].iter().product();
        let outer: usize = shape[..ax].iter().product();
        for o in 0..outer {
            for b in 0..stride {
                let base = o * len * stride + b;
                for i in 0..len {
                    let mut acc = 0.0;
                    let lo = i.saturating_sub(radius);
                    let hi = (i + radius).min(len - 1);
                    for t in lo..=hi {
                        acc += data[base + t * stride] * kernel[t + radius - i];
                    }
                    next[base + i * stride] = acc;
                }
            }
        }
        std::mem::swap(data, &mut next);
    }
}

/// Draws a smooth random field: uniform [-1,1] noise per component smoothed
/// with a Gaussian of the given sigma, max voxel magnitude normalized to 1,
/// then scaled by `alpha`.
pub fn smooth_random_field(
    rng: &mut ChaCha8Rng,
    spatial: &[usize],
    sigma: f64,
    alpha: f64,
) -> DisplacementField {
    let n = spatial.len();
    let total: usize = spatial.iter().product();
    let kernel = gaussian_kernel(sigma);

    // Per-component planes, drawn in component order.
    let mut planes: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p: Vec<f64> = (0..total).map(|_| rng.random_range(-1.0..1.0)).collect();
        smooth_scalar(&mut p, spatial, &kernel);
        planes.push(p);
    }

    let mut max_mag: f64 = 0.0;
    for v in 0..total {
        let m: f64 = planes.iter().map(|p| p[v] * p[v]).sum::<f64>().sqrt();
        max_mag = max_mag.max(m);
    }
    let scale = if max_mag > 0.0 { alpha / max_mag } else { 0.0 };

    let mut data = vec![0.0; total * n];
    for v in 0..total {
        for (a, p) in planes.iter().enumerate() {
            data[v * n + a] = p[v] * scale;
        }
    }
    DisplacementField {
        spatial: spatial.to_vec(),
        n,
        data,
    }
}
