//! The 3-D volume path: padding/rescaling to 64^3, the rotation/translation/
//! zoom augmentation chain, and synthetic stand-in volumes (smoothed
//! ellipsoid with an interior blob) for exercising it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{grid_center, interp, make_affine, warp, AffineParams, GridImage, WarpMode};

pub const VOLUME_EDGE: usize = 64;

/// Pads the volume with zeros to a cube of the largest axis, rescales to
/// 64^3 by trilinear interpolation, and min-max normalizes to [0, 1].
pub fn preprocess_volume(vol: &GridImage) -> Result<GridImage> {
    if vol.rank() != 3 {
        return Err(Error::invalid("preprocess_volume needs a 3-D volume"));
    }
    if vol.shape.iter().any(|&s| s == 0) {
        return Err(Error::invalid("degenerate zero-extent axis"));
    }
    let cube = *vol.shape.iter().max().unwrap();
    let offsets: Vec<usize> = vol.shape.iter().map(|&s| (cube - s) / 2).collect();

    let mut padded = vec![0.0f64; cube * cube * cube];
    for i in 0..vol.shape[0] {
        for j in 0..vol.shape[1] {
            let src = &vol.data[(i * vol.shape[1] + j) * vol.shape[2]..][..vol.shape[2]];
            let dst_base = ((i + offsets[0]) * cube + (j + offsets[1])) * cube + offsets[2];
            padded[dst_base..dst_base + vol.shape[2]].copy_from_slice(src);
        }
    }

    let edge = VOLUME_EDGE;
    let scale = cube as f64 / edge as f64;
    let mut out = vec![0.0f64; edge * edge * edge];
    for i in 0..edge {
        let p0 = (i as f64 + 0.5) * scale - 0.5;
        for j in 0..edge {
            let p1 = (j as f64 + 0.5) * scale - 0.5;
            for k in 0..edge {
                let p2 = (k as f64 + 0.5) * scale - 0.5;
                out[(i * edge + j) * edge + k] =
                    interp::sample3(&padded, cube, cube, cube, p0, p1, p2).value;
            }
        }
    }

    let lo = out.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 1e-12 {
        for v in &mut out {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        for v in &mut out {
            *v = 0.0;
        }
    }
    Ok(GridImage {
        shape: vec![edge; 3],
        data: out,
    })
}

/// One augmentation draw: quarter turn about a random axis, an extra 0-30
/// degree rotation about the same axis, translation in [-15, 15] per axis,
/// anisotropic zoom in [0.9, 1.3].
pub fn draw_augment_params(rng: &mut ChaCha8Rng) -> AffineParams {
    let axis = rng.random_range(0..3usize);
    let quarter = [90.0, 180.0, 270.0][rng.random_range(0..3usize)];
    let extra = rng.random_range(0.0..30.0);
    let mut rotation = vec![0.0; 3];
    rotation[axis] = quarter + extra;
    AffineParams {
        rotation,
        translation: vec![
            rng.random_range(-15.0..15.0),
            rng.random_range(-15.0..15.0),
            rng.random_range(-15.0..15.0),
        ],
        zoom: vec![
            rng.random_range(0.9..1.3),
            rng.random_range(0.9..1.3),
            rng.random_range(0.9..1.3),
        ],
        shear_x: 0.0,
    }
}

/// Applies the full augmentation chain as one composed affine warp about the
/// volume center.
pub fn augment_volume(vol: &GridImage, rng: &mut ChaCha8Rng) -> Result<GridImage> {
    if vol.rank() != 3 {
        return Err(Error::invalid("augment_volume needs a 3-D volume"));
    }
    let params = draw_augment_params(rng);
    let t = make_affine(&params, &grid_center(&vol.shape))?;
    let mut out = warp(vol, &t, None, WarpMode::Composed)?;
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Streams originals plus `per_volume` augmentations each, in order; the
/// k-th augmentation of volume i is seeded deterministically.
pub struct AugmentPipeline<'a> {
    volumes: &'a [GridImage],
    per_volume: usize,
    base_seed: u64,
    cursor: usize,
}

impl<'a> AugmentPipeline<'a> {
    pub fn new(volumes: &'a [GridImage], per_volume: usize, base_seed: u64) -> Self {
        AugmentPipeline {
            volumes,
            per_volume,
            base_seed,
            cursor: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.volumes.len() * (1 + self.per_volume)
    }
}

impl Iterator for AugmentPipeline<'_> {
    type Item = Result<GridImage>;

    fn next(&mut self) -> Option<Self::Item> {
        let stride = 1 + self.per_volume;
        if self.cursor >= self.volumes.len() * stride {
            return None;
        }
        let vi = self.cursor / stride;
        let k = self.cursor % stride;
        self.cursor += 1;
        if k == 0 {
            return Some(Ok(self.volumes[vi].clone()));
        }
        let seed = self
            .base_seed
            .wrapping_add((vi * self.per_volume + (k - 1)) as u64)
            .wrapping_add(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Some(augment_volume(&self.volumes[vi], &mut rng))
    }
}

/// Synthetic stand-in volumes: a smoothed random ellipsoid body with a
/// brighter interior blob, at a random non-cubic shape.
pub fn make_standin_volumes(count: usize, base_seed: u64) -> Vec<GridImage> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(i as u64));
            let shape: Vec<usize> = (0..3).map(|_| rng.random_range(40..72usize)).collect();
            let center: Vec<f64> = shape
                .iter()
                .map(|&s| (s as f64 - 1.0) / 2.0 + rng.random_range(-4.0..4.0))
                .collect();
            let semi: Vec<f64> = shape
                .iter()
                .map(|&s| s as f64 * rng.random_range(0.22..0.36))
                .collect();
            let blob_center: Vec<f64> = center
                .iter()
                .zip(&semi)
                .map(|(&c, &r)| c + rng.random_range(-0.3..0.3) * r)
                .collect();
            let blob_semi: Vec<f64> = semi.iter().map(|&r| r * 0.4).collect();

            let mut data = vec![0.0f64; shape.iter().product()];
            for i0 in 0..shape[0] {
                for i1 in 0..shape[1] {
                    for i2 in 0..shape[2] {
                        let p = [i0 as f64, i1 as f64, i2 as f64];
                        let d_body: f64 = (0..3)
                            .map(|a| ((p[a] - center[a]) / semi[a]).powi(2))
                            .sum();
                        let d_blob: f64 = (0..3)
                            .map(|a| ((p[a] - blob_center[a]) / blob_semi[a]).powi(2))
                            .sum();
                        let mut v = 0.0;
                        if d_body <= 1.0 {
                            // Soft falloff toward the boundary.
                            v = 0.35 + 0.3 * (1.0 - d_body);
                            if d_blob <= 1.0 {
                                v = 0.75 + 0.2 * (1.0 - d_blob);
                            }
                        }
                        data[(i0 * shape[1] + i1) * shape[2] + i2] = v.clamp(0.0, 1.0);
                    }
                }
            }
            GridImage { shape, data }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AffineMap;

    #[test]
    fn preprocess_shapes_and_identity() {
        let vols = make_standin_volumes(1, 7);
        let out = preprocess_volume(&vols[0]).unwrap();
        assert_eq!(out.shape, vec![64, 64, 64]);

        // An already normalized 64^3 volume passes through unchanged.
        let pre = preprocess_volume(&out).unwrap();
        let diff = pre
            .data
            .iter()
            .zip(&out.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-6, "max diff {diff}");

        // Constant zero volume stays zero.
        let zero = GridImage {
            shape: vec![40, 50, 60],
            data: vec![0.0; 40 * 50 * 60],
        };
        let z = preprocess_volume(&zero).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quarter_turn_is_a_lattice_permutation() {
        let vols = make_standin_volumes(1, 9);
        let vol = preprocess_volume(&vols[0]).unwrap();
        let params = AffineParams {
            translation: vec![0.0; 3],
            rotation: vec![0.0, 0.0, 90.0],
            zoom: vec![1.0; 3],
            shear_x: 0.0,
        };
        let t = make_affine(&params, &grid_center(&vol.shape)).unwrap();
        let out = warp(&vol, &t, None, WarpMode::Composed).unwrap();
        // Pull-back by a 90-degree turn about axis 2: the sampling point of
        // (i, j, k) is (63 - j, i, k), an exact lattice location.
        for i in (0..64).step_by(7) {
            for j in (0..64).step_by(5) {
                for k in (0..64).step_by(9) {
                    let expect = vol.at(&[63 - j, i, k]);
                    assert!(
                        (out.at(&[i, j, k]) - expect).abs() < 1e-12,
                        "mismatch at {i},{j},{k}"
                    );
                }
            }
        }
        let _ = AffineMap::identity(3);
    }

    #[test]
    fn augmentation_counts_and_range() {
        let vols: Vec<GridImage> = make_standin_volumes(3, 21)
            .iter()
            .map(|v| preprocess_volume(v).unwrap())
            .collect();
        let pipe = AugmentPipeline::new(&vols, 4, 33);
        assert_eq!(pipe.total(), 15);
        let mut seen = 0;
        for item in AugmentPipeline::new(&vols, 4, 33) {
            let vol = item.unwrap();
            assert_eq!(vol.shape, vec![64, 64, 64]);
            assert!(vol.data.iter().all(|&v| (-1e-6..=1.0 + 1e-6).contains(&v)));
            seen += 1;
        }
        assert_eq!(seen, 15);
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let vols = vec![preprocess_volume(&make_standin_volumes(1, 2)[0]).unwrap()];
        let a: Vec<GridImage> = AugmentPipeline::new(&vols, 3, 5)
            .map(|r| r.unwrap())
            .collect();
        let b: Vec<GridImage> = AugmentPipeline::new(&vols, 3, 5)
            .map(|r| r.unwrap())
            .collect();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn augment_draw_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let p = draw_augment_params(&mut rng);
            let nonzero: Vec<&f64> = p.rotation.iter().filter(|&&r| r != 0.0).collect();
            assert_eq!(nonzero.len(), 1);
            assert!(*nonzero[0] >= 90.0 && *nonzero[0] < 300.0);
            assert!(p.translation.iter().all(|t| (-15.0..15.0).contains(t)));
            assert!(p.zoom.iter().all(|z| (0.9..1.3).contains(z)));
        }
    }
}
