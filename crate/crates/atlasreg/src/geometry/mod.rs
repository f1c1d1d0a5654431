//! Coordinate grids, affine and dense transforms, differentiable resampling,
//! transform composition and small-matrix decompositions.
//!
//! Conventions used throughout the crate:
//! - voxel-index coordinates, unit spacing, axis 0 first;
//! - affine maps use pull-back semantics: `T` maps output (atlas) coordinates
//!   to input-image sampling coordinates;
//! - sampling outside the grid returns 0.

pub mod interp;
pub mod svd;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::NdArray;

/// Scalar intensity grid (2-D or 3-D), intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GridImage {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl GridImage {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() != 2 && shape.len() != 3 {
            return Err(Error::invalid(format!(
                "GridImage rank must be 2 or 3, got {}",
                shape.len()
            )));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} does not match data length {}",
                shape,
                data.len()
            )));
        }
        let mut out = data;
        for v in &mut out {
            if !v.is_finite() {
                return Err(Error::invalid("non-finite intensity"));
            }
            if *v < -1e-9 || *v > 1.0 + 1e-9 {
                return Err(Error::invalid(format!("intensity {v} outside [0,1]")));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(GridImage { shape, data: out })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        GridImage {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            off = off * self.shape[i] + ix;
        }
        self.data[off]
    }

    /// Center of the grid in voxel coordinates, (s - 1) / 2 per axis.
    pub fn center(&self) -> Vec<f64> {
        grid_center(&self.shape)
    }
}

pub fn grid_center(shape: &[usize]) -> Vec<f64> {
    shape.iter().map(|&s| (s as f64 - 1.0) / 2.0).collect()
}

/// Homogeneous (n+1)x(n+1) affine transform, row-major, last row [0,..,0,1].
///
/// Invertibility is not an invariant: network outputs may be near-singular
/// during training. Operations that need the inverse check the determinant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub n: usize,
    /// (n+1)^2 entries, row-major.
    pub m: Vec<f64>,
}

impl AffineMap {
    pub fn new(n: usize, m: Vec<f64>) -> Result<Self> {
        if n != 2 && n != 3 {
            return Err(Error::invalid(format!("affine rank must be 2 or 3, got {n}")));
        }
        if m.len() != (n + 1) * (n + 1) {
            return Err(Error::ShapeMismatch(format!(
                "affine matrix for n={n} needs {} entries, got {}",
                (n + 1) * (n + 1),
                m.len()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite affine entry"));
        }
        for j in 0..=n {
            let want = if j == n { 1.0 } else { 0.0 };
            if m[n * (n + 1) + j] != want {
                return Err(Error::invalid("affine last row must be [0,..,0,1]"));
            }
        }
        Ok(AffineMap { n, m })
    }

    pub fn identity(n: usize) -> Self {
        let k = n + 1;
        let mut m = vec![0.0; k * k];
        for i in 0..k {
            m[i * k + i] = 1.0;
        }
        AffineMap { n, m }
    }

    #[inline]
    pub fn entry(&self, r: usize, c: usize) -> f64 {
        self.m[r * (self.n + 1) + c]
    }

    /// Upper n x n linear block, row-major.
    pub fn linear_block(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                out[r * n + c] = self.entry(r, c);
            }
        }
        out
    }

    /// Matrix product self * rhs (apply rhs first).
    pub fn compose(&self, rhs: &AffineMap) -> AffineMap {
        assert_eq!(self.n, rhs.n);
        let k = self.n + 1;
        let mut m = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let mut s = 0.0;
                for l in 0..k {
                    s += self.m[i * k + l] * rhs.m[l * k + j];
                }
                m[i * k + j] = s;
            }
        }
        AffineMap { n: self.n, m }
    }

    /// Applies the map to one point.
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let n = self.n;
        debug_assert_eq!(p.len(), n);
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = self.entry(i, n);
            for j in 0..n {
                s += self.entry(i, j) * p[j];
            }
            *o = s;
        }
        out
    }

    pub fn det_linear(&self) -> f64 {
        let a = self.linear_block();
        match self.n {
            2 => a[0] * a[3] - a[1] * a[2],
            3 => {
                a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
                    + a[2] * (a[3] * a[7] - a[4] * a[6])
            }
            _ => unreachable!(),
        }
    }
}

/// Human-readable affine parameters; assembled into a matrix by [`make_affine`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    /// Translation per axis, pixels.
    pub translation: Vec<f64>,
    /// Rotation angles in degrees: one angle for n=2 (in the axis-0/axis-1
    /// plane), three for n=3 (about axes 0, 1, 2, applied in that order).
    pub rotation: Vec<f64>,
    /// Zoom factor per axis, > 0.
    pub zoom: Vec<f64>,
    /// Shear angle in degrees, applied along axis 0 proportional to axis 1.
    pub shear_x: f64,
}

impl AffineParams {
    pub fn neutral(n: usize) -> Self {
        AffineParams {
            translation: vec![0.0; n],
            rotation: vec![0.0; if n == 2 { 1 } else { 3 }],
            zoom: vec![1.0; n],
            shear_x: 0.0,
        }
    }

    pub fn rank(&self) -> usize {
        self.translation.len()
    }
}

/// Dense per-voxel displacement, stored spatial-major with the n components
/// contiguous per voxel. Defined on the atlas grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub spatial: Vec<usize>,
    pub n: usize,
    pub data: Vec<f64>,
}

impl DisplacementField {
    pub fn new(spatial: Vec<usize>, n: usize, data: Vec<f64>) -> Result<Self> {
        if spatial.len() != n || (n != 2 && n != 3) {
            return Err(Error::invalid(format!(
                "displacement field rank {n} vs spatial {:?}",
                spatial
            )));
        }
        if spatial.iter().product::<usize>() * n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "field data length {} does not match spatial {:?} x {n}",
                data.len(),
                spatial
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite displacement component"));
        }
        Ok(DisplacementField { spatial, n, data })
    }

    pub fn zeros(spatial: &[usize]) -> Self {
        let n = spatial.len();
        DisplacementField {
            spatial: spatial.to_vec(),
            n,
            data: vec![0.0; spatial.iter().product::<usize>() * n],
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.spatial.iter().product()
    }

    /// Displacement vector at a voxel index.
    pub fn at(&self, idx: &[usize]) -> &[f64] {
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            off = off * self.spatial[i] + ix;
        }
        &self.data[off * self.n..(off + 1) * self.n]
    }

    /// Linear interpolation of the field at a continuous point, zero outside.
    pub fn interp_at(&self, p: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        let mut corner = vec![0isize; n];
        let mut frac = vec![0.0f64; n];
        for a in 0..n {
            let f = p[a].floor();
            corner[a] = f as isize;
            frac[a] = p[a] - f;
        }
        for mask in 0..(1usize << n) {
            let mut w = 1.0;
            let mut off = 0usize;
            let mut inside = true;
            for a in 0..n {
                let hi = (mask >> a) & 1 == 1;
                let ix = corner[a] + if hi { 1 } else { 0 };
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
                if ix < 0 || ix as usize >= self.spatial[a] {
                    inside = false;
                    break;
                }
                off = off * self.spatial[a] + ix as usize;
            }
            if inside && w != 0.0 {
                let base = off * n;
                for a in 0..n {
                    out[a] += w * self.data[base + a];
                }
            }
        }
        out
    }

    /// Maximum per-voxel Euclidean magnitude.
    pub fn max_magnitude(&self) -> f64 {
        let n = self.n;
        self.data
            .chunks_exact(n)
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Per-voxel {0,1} mask with at least one set voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch("mask shape/data".into()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        if !data.iter().any(|&v| v == 1) {
            return Err(Error::DegenerateMask);
        }
        Ok(BinaryMask { shape, data })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn at(&self, idx: &[usize]) -> u8 {
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            off = off * self.shape[i] + ix;
        }
        self.data[off]
    }
}

/// Evaluation points in continuous atlas coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub n: usize,
    /// Flat storage, `n` coordinates per point.
    pub pts: Vec<f64>,
}

impl LandmarkSet {
    pub fn new(n: usize, pts: Vec<f64>) -> Result<Self> {
        if pts.len() % n != 0 || pts.len() / n < 2 {
            return Err(Error::invalid("landmark set needs at least 2 points"));
        }
        if pts.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite landmark"));
        }
        Ok(LandmarkSet { n, pts })
    }

    pub fn count(&self) -> usize {
        self.pts.len() / self.n
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.pts.chunks_exact(self.n)
    }
}

/// How [`warp`] combines the affine map with the dense field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpMode {
    /// Single sampling pass: O(x) = I(T (x + u(x))).
    Composed,
    /// Two sampling passes: I_a(x) = I(T x), then O(x) = I_a(x + u(x)).
    Sequential,
}

/// Assembles T = Translate(t) . C . Rotate . Shear . Zoom . C^-1 where C
/// moves `center` to the origin, so rotation/shear/zoom act about `center`.
pub fn make_affine(params: &AffineParams, center: &[f64]) -> Result<AffineMap> {
    let n = params.rank();
    if n != 2 && n != 3 {
        return Err(Error::invalid("affine params must be rank 2 or 3"));
    }
    let want_rot = if n == 2 { 1 } else { 3 };
    if params.rotation.len() != want_rot || params.zoom.len() != n || center.len() != n {
        return Err(Error::invalid("affine parameter lengths inconsistent"));
    }
    let all = params
        .translation
        .iter()
        .chain(&params.rotation)
        .chain(&params.zoom)
        .chain(std::iter::once(&params.shear_x));
    for v in all {
        if !v.is_finite() {
            return Err(Error::invalid("non-finite affine parameter"));
        }
    }
    if params.zoom.iter().any(|&z| z <= 0.0) {
        return Err(Error::invalid("zoom must be > 0"));
    }

    let k = n + 1;
    let translate = |t: &[f64]| {
        let mut m = AffineMap::identity(n);
        for i in 0..n {
            m.m[i * k + n] = t[i];
        }
        m
    };

    let mut rot = AffineMap::identity(n);
    if n == 2 {
        let a = params.rotation[0].to_radians();
        let (s, c) = a.sin_cos();
        rot.m[0] = c;
        rot.m[1] = -s;
        rot.m[k] = s;
        rot.m[k + 1] = c;
    } else {
        // Rotations about axes 0, 1, 2 composed in that order.
        for (axis, &deg) in params.rotation.iter().enumerate() {
            if deg == 0.0 {
                continue;
            }
            let a = deg.to_radians();
            let (s, c) = a.sin_cos();
            let (p, q) = match axis {
                0 => (1, 2),
                1 => (2, 0),
                _ => (0, 1),
            };
            let mut r = AffineMap::identity(n);
            r.m[p * k + p] = c;
            r.m[p * k + q] = -s;
            r.m[q * k + p] = s;
            r.m[q * k + q] = c;
            rot = rot.compose(&r);
        }
    }

    let mut shear = AffineMap::identity(n);
    shear.m[1] = params.shear_x.to_radians().tan();

    let mut zoom = AffineMap::identity(n);
    for i in 0..n {
        zoom.m[i * k + i] = params.zoom[i];
    }

    let neg_center: Vec<f64> = center.iter().map(|&c| -c).collect();
    let t = translate(&params.translation)
        .compose(&translate(center))
        .compose(&rot)
        .compose(&shear)
        .compose(&zoom)
        .compose(&translate(&neg_center));
    Ok(t)
}

/// Inverts an affine map; errors if the linear block is near-singular.
pub fn invert_affine(t: &AffineMap) -> Result<AffineMap> {
    let n = t.n;
    let det = t.det_linear();
    if det.abs() <= 1e-8 {
        return Err(Error::SingularTransform(det.abs()));
    }
    let a = t.linear_block();
    let inv = match n {
        2 => vec![a[3] / det, -a[1] / det, -a[2] / det, a[0] / det],
        3 => {
            let cof = |r1: usize, c1: usize, r2: usize, c2: usize| {
                a[r1 * 3 + c1] * a[r2 * 3 + c2] - a[r1 * 3 + c2] * a[r2 * 3 + c1]
            };
            vec![
                cof(1, 1, 2, 2) / det,
                -cof(0, 1, 2, 2) / det,
                cof(0, 1, 1, 2) / det,
                -cof(1, 0, 2, 2) / det,
                cof(0, 0, 2, 2) / det,
                -cof(0, 0, 1, 2) / det,
                cof(1, 0, 2, 1) / det,
                -cof(0, 0, 2, 1) / det,
                cof(0, 0, 1, 1) / det,
            ]
        }
        _ => unreachable!(),
    };
    let k = n + 1;
    let mut m = vec![0.0; k * k];
    m[k * k - 1] = 1.0;
    for r in 0..n {
        for c in 0..n {
            m[r * k + c] = inv[r * n + c];
        }
    }
    // -A^-1 b
    for r in 0..n {
        let mut s = 0.0;
        for c in 0..n {
            s += inv[r * n + c] * t.entry(c, n);
        }
        m[r * k + n] = -s;
    }
    Ok(AffineMap { n, m })
}

/// Applies the affine map to every landmark. Points may leave the grid.
pub fn map_points(t: &AffineMap, pts: &LandmarkSet) -> LandmarkSet {
    assert_eq!(t.n, pts.n);
    let mut out = Vec::with_capacity(pts.pts.len());
    for p in pts.iter() {
        out.extend_from_slice(&t.apply(p));
    }
    LandmarkSet { n: pts.n, pts: out }
}

/// Moves each point by the interpolated field: p -> p + u(p).
/// Points must lie inside the field's grid.
pub fn displace_points(u: &DisplacementField, pts: &LandmarkSet) -> Result<LandmarkSet> {
    if u.n != pts.n {
        return Err(Error::ShapeMismatch("field/landmark rank".into()));
    }
    let mut out = Vec::with_capacity(pts.pts.len());
    for p in pts.iter() {
        for (a, &c) in p.iter().enumerate() {
            if c < 0.0 || c > (u.spatial[a] - 1) as f64 {
                return Err(Error::OutOfDomain(p.to_vec()));
            }
        }
        let d = u.interp_at(p);
        for a in 0..u.n {
            out.push(p[a] + d[a]);
        }
    }
    Ok(LandmarkSet { n: pts.n, pts: out })
}

/// Multilinear interpolation of `img` at each coordinate (flat, rank entries
/// per point). Coordinates outside the grid return 0.
pub fn sample_linear(img: &GridImage, coords: &[f64]) -> Vec<f64> {
    let n = img.rank();
    assert_eq!(coords.len() % n, 0);
    coords
        .chunks_exact(n)
        .map(|p| interp::sample_nd(&img.data, &img.shape, p))
        .collect()
}

/// Backward-warps `img` through the affine map and optional dense field.
/// Output lives on the atlas grid: the field's grid when `u` is given,
/// otherwise the input grid.
pub fn warp(
    img: &GridImage,
    t: &AffineMap,
    u: Option<&DisplacementField>,
    mode: WarpMode,
) -> Result<GridImage> {
    let n = img.rank();
    if t.n != n {
        return Err(Error::ShapeMismatch("affine rank vs image rank".into()));
    }
    if let Some(f) = u {
        if f.n != n {
            return Err(Error::ShapeMismatch("field rank vs image rank".into()));
        }
    }
    let out_shape: Vec<usize> = u.map(|f| f.spatial.clone()).unwrap_or_else(|| img.shape.clone());

    let sample_affine = |src: &GridImage, out_shape: &[usize]| -> Vec<f64> {
        let mut out = Vec::with_capacity(out_shape.iter().product());
        let mut idx = vec![0usize; n];
        let total: usize = out_shape.iter().product();
        let mut p = vec![0.0f64; n];
        for _ in 0..total {
            for a in 0..n {
                p[a] = idx[a] as f64;
            }
            let q = t.apply(&p);
            out.push(interp::sample_nd(&src.data, &src.shape, &q));
            bump(&mut idx, out_shape);
        }
        out
    };

    let data = match (u, mode) {
        (None, _) => sample_affine(img, &out_shape),
        (Some(f), WarpMode::Composed) => {
            let total: usize = out_shape.iter().product();
            let mut out = Vec::with_capacity(total);
            let mut idx = vec![0usize; n];
            let mut p = vec![0.0f64; n];
            for v in 0..total {
                let d = &f.data[v * n..(v + 1) * n];
                for a in 0..n {
                    p[a] = idx[a] as f64 + d[a];
                }
                let q = t.apply(&p);
                out.push(interp::sample_nd(&img.data, &img.shape, &q));
                bump(&mut idx, &out_shape);
            }
            out
        }
        (Some(f), WarpMode::Sequential) => {
            let mid = GridImage {
                shape: out_shape.clone(),
                data: sample_affine(img, &out_shape),
            };
            let total: usize = out_shape.iter().product();
            let mut out = Vec::with_capacity(total);
            let mut idx = vec![0usize; n];
            let mut p = vec![0.0f64; n];
            for v in 0..total {
                let d = &f.data[v * n..(v + 1) * n];
                for a in 0..n {
                    p[a] = idx[a] as f64 + d[a];
                }
                out.push(interp::sample_nd(&mid.data, &mid.shape, &p));
                bump(&mut idx, &out_shape);
            }
            out
        }
    };
    Ok(GridImage {
        shape: out_shape,
        data,
    })
}

#[inline]
fn bump(idx: &mut [usize], shape: &[usize]) {
    for a in (0..idx.len()).rev() {
        idx[a] += 1;
        if idx[a] < shape[a] {
            return;
        }
        idx[a] = 0;
    }
}

/// Singular values of the upper n x n block, sorted descending.
pub fn singular_values(t: &AffineMap) -> Vec<f64> {
    svd::svd_small(&t.linear_block(), t.n).sigma
}

/// Forward finite differences du_i/dx_j with zeros on the trailing slice of
/// each axis. Output shape: spatial x n x n, indexed [voxel][component i][axis j].
pub fn grad_forward(u: &DisplacementField) -> Result<NdArray<f64>> {
    let n = u.n;
    if u.spatial.iter().any(|&s| s < 2) {
        return Err(Error::invalid("grad_forward needs spatial extent >= 2"));
    }
    let mut shape = u.spatial.clone();
    shape.push(n);
    shape.push(n);
    let total = u.num_voxels();
    let mut out = vec![0.0; total * n * n];

    // Strides of the voxel index (in voxels, not components).
    let mut strides = vec![1usize; n];
    for a in (0..n - 1).rev() {
        strides[a] = strides[a + 1] * u.spatial[a + 1];
    }

    let mut idx = vec![0usize; n];
    for v in 0..total {
        for j in 0..n {
            if idx[j] + 1 < u.spatial[j] {
                let w = v + strides[j];
                for i in 0..n {
                    out[(v * n + i) * n + j] = u.data[w * n + i] - u.data[v * n + i];
                }
            }
        }
        bump(&mut idx, &u.spatial);
    }
    Ok(NdArray::from_vec(&shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_image(s0: usize, s1: usize) -> GridImage {
        let mut data = vec![0.0; s0 * s1];
        for i in 0..s0 {
            for j in 0..s1 {
                data[i * s1 + j] = ((i * 31 + j * 17) % 97) as f64 / 96.0;
            }
        }
        GridImage {
            shape: vec![s0, s1],
            data,
        }
    }

    #[test]
    fn make_affine_neutral_is_identity() {
        let t = make_affine(&AffineParams::neutral(2), &[5.0, 7.0]).unwrap();
        assert_eq!(t, AffineMap::identity(2));
    }

    #[test]
    fn make_affine_pure_translation() {
        let mut p = AffineParams::neutral(2);
        p.translation = vec![3.0, 4.0];
        let t = make_affine(&p, &[0.0, 0.0]).unwrap();
        assert_eq!(t.entry(0, 2), 3.0);
        assert_eq!(t.entry(1, 2), 4.0);
        assert_eq!(t.entry(0, 0), 1.0);
        assert_eq!(t.entry(0, 1), 0.0);
    }

    #[test]
    fn rotation_quarter_turn_maps_unit_x_to_unit_y() {
        let mut p = AffineParams::neutral(2);
        p.rotation = vec![90.0];
        let t = make_affine(&p, &[0.0, 0.0]).unwrap();
        let pts = LandmarkSet::new(2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let out = map_points(&t, &pts);
        let q: Vec<f64> = out.iter().next().unwrap().to_vec();
        assert!((q[0] - 0.0).abs() < 1e-12);
        assert!((q[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invert_affine_cases() {
        let id = AffineMap::identity(2);
        assert_eq!(invert_affine(&id).unwrap(), id);

        let mut p = AffineParams::neutral(2);
        p.translation = vec![3.0, 4.0];
        let t = make_affine(&p, &[0.0, 0.0]).unwrap();
        let inv = invert_affine(&t).unwrap();
        assert_eq!(inv.entry(0, 2), -3.0);
        assert_eq!(inv.entry(1, 2), -4.0);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let p = AffineParams {
                translation: vec![rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)],
                rotation: vec![rng.random_range(0.0..360.0)],
                zoom: vec![rng.random_range(0.6..1.4), rng.random_range(0.6..1.4)],
                shear_x: rng.random_range(0.0..25.0),
            };
            let t = make_affine(&p, &[63.5, 63.5]).unwrap();
            let inv = invert_affine(&t).unwrap();
            let prod = t.compose(&inv);
            let id = AffineMap::identity(2);
            let err = prod
                .m
                .iter()
                .zip(&id.m)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "roundtrip error {err}");
        }
    }

    #[test]
    fn invert_rejects_near_singular() {
        let mut t = AffineMap::identity(2);
        t.m[0] = 1e-10;
        t.m[4] = 1e-10;
        assert!(matches!(
            invert_affine(&t),
            Err(Error::SingularTransform(_))
        ));
    }

    #[test]
    fn map_points_identity_and_zoom() {
        let pts = LandmarkSet::new(2, vec![1.0, 1.0, 2.0, 5.0]).unwrap();
        let id = AffineMap::identity(2);
        assert_eq!(map_points(&id, &pts).pts, pts.pts);

        let mut p = AffineParams::neutral(2);
        p.zoom = vec![2.0, 2.0];
        let t = make_affine(&p, &[0.0, 0.0]).unwrap();
        let out = map_points(&t, &pts);
        assert!((out.pts[0] - 2.0).abs() < 1e-12);
        assert!((out.pts[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn map_points_matches_per_point_oracle() {
        // Composite rotation+zoom against an independent matrix-vector product.
        let mut p = AffineParams::neutral(2);
        p.rotation = vec![30.0];
        p.zoom = vec![1.5, 1.5];
        let t = make_affine(&p, &[0.0, 0.0]).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts_raw: Vec<f64> = (0..20).map(|_| rng.random_range(-10.0..10.0)).collect();
        let pts = LandmarkSet::new(2, pts_raw.clone()).unwrap();
        let out = map_points(&t, &pts);
        for (k, p2) in pts_raw.chunks(2).enumerate() {
            let ox = t.m[0] * p2[0] + t.m[1] * p2[1] + t.m[2];
            let oy = t.m[3] * p2[0] + t.m[4] * p2[1] + t.m[5];
            assert!((out.pts[2 * k] - ox).abs() < 1e-12);
            assert!((out.pts[2 * k + 1] - oy).abs() < 1e-12);
        }
    }

    #[test]
    fn roundtrip_points_through_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = AffineParams {
            translation: vec![12.0, -7.0],
            rotation: vec![200.0],
            zoom: vec![1.3, 0.8],
            shear_x: 15.0,
        };
        let t = make_affine(&p, &[63.5, 63.5]).unwrap();
        let inv = invert_affine(&t).unwrap();
        let raw: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..127.0)).collect();
        let pts = LandmarkSet::new(2, raw.clone()).unwrap();
        let back = map_points(&inv, &map_points(&t, &pts));
        for (a, b) in back.pts.iter().zip(&raw) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn displace_points_cases() {
        let zero = DisplacementField::zeros(&[8, 8]);
        let pts = LandmarkSet::new(2, vec![2.0, 3.0, 5.0, 5.5]).unwrap();
        assert_eq!(displace_points(&zero, &pts).unwrap().pts, pts.pts);

        let mut f = DisplacementField::zeros(&[8, 8]);
        for v in 0..64 {
            f.data[v * 2] = 2.0;
        }
        let out = displace_points(&f, &pts).unwrap();
        assert_eq!(out.pts, vec![4.0, 3.0, 7.0, 5.5]);

        // Linear field u(x, y) = (0.1 x, 0): interpolation of a linear field
        // is exact, so (5, 3) -> (5.5, 3).
        let mut f = DisplacementField::zeros(&[8, 8]);
        for i in 0..8 {
            for j in 0..8 {
                f.data[(i * 8 + j) * 2] = 0.1 * i as f64;
            }
        }
        let pts = LandmarkSet::new(2, vec![5.0, 3.0, 1.0, 1.0]).unwrap();
        let out = displace_points(&f, &pts).unwrap();
        assert!((out.pts[0] - 5.5).abs() < 1e-12);
        assert!((out.pts[1] - 3.0).abs() < 1e-12);

        let outside = LandmarkSet::new(2, vec![-1.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            displace_points(&f, &outside),
            Err(Error::OutOfDomain(_))
        ));
    }

    #[test]
    fn sample_linear_contract() {
        let img = ramp_image(6, 6);
        // Lattice points exact.
        let coords = vec![2.0, 3.0, 5.0, 5.0];
        let vals = sample_linear(&img, &coords);
        assert_eq!(vals[0], img.at(&[2, 3]));
        assert_eq!(vals[1], img.at(&[5, 5]));
        // Outside -> 0.
        assert_eq!(sample_linear(&img, &[-5.0, -5.0])[0], 0.0);
        // Piecewise linear along each axis at quarter points.
        for q in [0.25, 0.5, 0.75] {
            let v = sample_linear(&img, &[2.0 + q, 3.0])[0];
            let expect = img.at(&[2, 3]) * (1.0 - q) + img.at(&[3, 3]) * q;
            assert!((v - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn warp_identity_is_bit_exact() {
        let img = ramp_image(16, 16);
        let id = AffineMap::identity(2);
        let zero = DisplacementField::zeros(&[16, 16]);
        for mode in [WarpMode::Composed, WarpMode::Sequential] {
            let out = warp(&img, &id, Some(&zero), mode).unwrap();
            assert_eq!(out.data, img.data);
        }
        let out = warp(&img, &id, None, WarpMode::Composed).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn warp_integer_translation_shifts_with_zero_fill() {
        let img = ramp_image(8, 8);
        let mut p = AffineParams::neutral(2);
        p.translation = vec![2.0, 0.0];
        let t = make_affine(&p, &[0.0, 0.0]).unwrap();
        let out = warp(&img, &t, None, WarpMode::Composed).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let expect = if i + 2 < 8 { img.at(&[i + 2, j]) } else { 0.0 };
                assert_eq!(out.at(&[i, j]), expect);
            }
        }
    }

    #[test]
    fn composed_vs_sequential_differ_but_stay_close() {
        // Two sampling passes accumulate one extra interpolation; on a smooth
        // image with a sigma-5 field the modes stay close but not equal.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let smooth = crate::synthgen::smooth_random_field(&mut rng, &[64, 64], 3.0, 1.0);
        let img = GridImage {
            shape: vec![64, 64],
            data: (0..64 * 64)
                .map(|v| ((smooth.data[v * 2] + 1.0) / 2.0).clamp(0.0, 1.0))
                .collect(),
        };
        let field = crate::synthgen::smooth_random_field(&mut rng, &[64, 64], 5.0, 8.0);
        let p = AffineParams {
            translation: vec![3.0, -2.0],
            rotation: vec![20.0],
            zoom: vec![1.1, 0.9],
            shear_x: 5.0,
        };
        let t = make_affine(&p, &[31.5, 31.5]).unwrap();
        let a = warp(&img, &t, Some(&field), WarpMode::Composed).unwrap();
        let b = warp(&img, &t, Some(&field), WarpMode::Sequential).unwrap();
        let diff = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 0.0, "modes unexpectedly identical");
        assert!(diff < 0.05, "modes diverge too much: {diff}");
        // Golden value measured once on this seeded configuration.
        assert!((diff - 0.031143387135666474).abs() < 1e-12, "measured {diff:.18}");
    }

    #[test]
    fn singular_value_cases() {
        assert_eq!(singular_values(&AffineMap::identity(2)), vec![1.0, 1.0]);

        let mut t = AffineMap::identity(2);
        t.m[0] = 2.0;
        t.m[4] = 0.5;
        let s = singular_values(&t);
        assert!((s[0] - 2.0).abs() < 1e-12 && (s[1] - 0.5).abs() < 1e-12);

        // [[0,-2],[1,0]]: orthogonal columns with norms 2 and 1.
        let t = AffineMap::new(2, vec![0.0, -2.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let s = singular_values(&t);
        assert!((s[0] - 2.0).abs() < 1e-12 && (s[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_values_rotation_invariant() {
        let t = AffineMap::new(2, vec![1.4, 0.3, 0.0, -0.2, 0.7, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let base = singular_values(&t);
        for deg in [37.0, 120.0, 301.0] {
            let mut p = AffineParams::neutral(2);
            p.rotation = vec![deg];
            let r = make_affine(&p, &[0.0, 0.0]).unwrap();
            for composed in [r.compose(&t), t.compose(&r)] {
                let s = singular_values(&composed);
                for (a, b) in s.iter().zip(&base) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn grad_forward_cases() {
        // Constant field -> zero gradient.
        let mut f = DisplacementField::zeros(&[4, 4]);
        for v in f.data.iter_mut() {
            *v = 3.7;
        }
        let g = grad_forward(&f).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));

        // u(x,y) = (0.1 x, 0): du_x/dx = 0.1 except on the last slice of x.
        let mut f = DisplacementField::zeros(&[4, 4]);
        for i in 0..4 {
            for j in 0..4 {
                f.data[(i * 4 + j) * 2] = 0.1 * i as f64;
            }
        }
        let g = grad_forward(&f).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let v = g.at(&[i, j, 0, 0]);
                let expect = if i < 3 { 0.1 } else { 0.0 };
                assert!((v - expect).abs() < 1e-12);
                assert_eq!(g.at(&[i, j, 1, 0]), 0.0);
                assert_eq!(g.at(&[i, j, 0, 1]), 0.0);
            }
        }
    }

    #[test]
    fn grad_forward_matches_stencil_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (s0, s1) = (7, 9);
        let mut f = DisplacementField::zeros(&[s0, s1]);
        for v in f.data.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let g = grad_forward(&f).unwrap();
        // Independent double-loop stencil.
        for i in 0..s0 {
            for j in 0..s1 {
                for comp in 0..2 {
                    let here = f.at(&[i, j])[comp];
                    let dx = if i + 1 < s0 {
                        f.at(&[i + 1, j])[comp] - here
                    } else {
                        0.0
                    };
                    let dy = if j + 1 < s1 {
                        f.at(&[i, j + 1])[comp] - here
                    } else {
                        0.0
                    };
                    assert!((g.at(&[i, j, comp, 0]) - dx).abs() < 1e-12);
                    assert!((g.at(&[i, j, comp, 1]) - dy).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grad_forward_rejects_tiny_extent() {
        let f = DisplacementField::zeros(&[1, 4]);
        assert!(grad_forward(&f).is_err());
    }
}
