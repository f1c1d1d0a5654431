//! Rasterization of the classic 10-ellipse head phantom (contrast-enhanced
//! intensity variant, the one in common use for grayscale display).

use crate::error::{Error, Result};
use crate::geometry::GridImage;

/// (x0, y0, a, b, phi_deg, additive intensity); coordinates in [-1, 1].
const ELLIPSES: [(f64, f64, f64, f64, f64, f64); 10] = [
    (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
    (0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
    (-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
    (0.0, -0.606, 0.023, 0.023, 0.0, 0.1),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
];

/// Rasterizes the phantom at size x size, intensities clipped to [0, 1].
/// Phantom x maps to image axis 0, phantom y to axis 1.
pub fn shepp_logan(size: usize) -> Result<GridImage> {
    if size < 32 {
        return Err(Error::invalid(format!(
            "phantom size must be >= 32, got {size}"
        )));
    }
    let mut data = vec![0.0f64; size * size];
    let scale = 2.0 / (size as f64 - 1.0);
    for i0 in 0..size {
        let x = i0 as f64 * scale - 1.0;
        for i1 in 0..size {
            let y = i1 as f64 * scale - 1.0;
            let mut v = 0.0;
            for &(x0, y0, a, b, phi, add) in ELLIPSES.iter() {
                let (s, c) = phi.to_radians().sin_cos();
                let dx = x - x0;
                let dy = y - y0;
                let xr = c * dx + s * dy;
                let yr = -s * dx + c * dy;
                if (xr / a) * (xr / a) + (yr / b) * (yr / b) <= 1.0 {
                    v += add;
                }
            }
            data[i0 * size + i1] = v.clamp(0.0, 1.0);
        }
    }
    Ok(GridImage {
        shape: vec![size, size],
        data,
    })
}
