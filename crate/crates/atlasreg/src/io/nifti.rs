//! Minimal NIfTI-1 reader/writer for this project's artifacts: float64
//! scalar grids and vector displacement volumes, gzip-compressed. 2-D images
//! go out as (nx, ny, 1); fields as (nx, ny, nz, 1, n) with the vector
//! intent code. Gzip headers carry no timestamp so identical inputs produce
//! identical bytes.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::{Compression, GzBuilder};

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, DisplacementField, GridImage};

const HDR_SIZE: usize = 348;
const DT_FLOAT64: i16 = 64;
const DT_FLOAT32: i16 = 16;
const INTENT_VECTOR: i16 = 1007;

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}
fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}
fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn build_header(dims: &[usize], intent_code: i16) -> Vec<u8> {
    let mut h = vec![0u8; HDR_SIZE + 4]; // +4 extension flag bytes
    put_i32(&mut h, 0, 348);
    put_i16(&mut h, 40, dims.len() as i16);
    for (i, &d) in dims.iter().enumerate() {
        put_i16(&mut h, 42 + 2 * i, d as i16);
    }
    for i in dims.len()..7 {
        put_i16(&mut h, 42 + 2 * i, 1);
    }
    put_i16(&mut h, 68, intent_code);
    put_i16(&mut h, 70, DT_FLOAT64);
    put_i16(&mut h, 72, 64); // bitpix
    for i in 0..8 {
        put_f32(&mut h, 76 + 4 * i, 1.0); // unit pixdim
    }
    put_f32(&mut h, 108, 352.0); // vox_offset
    put_f32(&mut h, 112, 1.0); // scl_slope
    h[344] = b'n';
    h[345] = b'+';
    h[346] = b'1';
    h[347] = 0;
    h
}

fn write_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = GzBuilder::new().mtime(0).write(f, Compression::default());
    enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
    enc.finish().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    f.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Parsed {
    dims: Vec<usize>,
    intent: i16,
    data: Vec<f64>,
}

fn parse(path: &Path, bytes: &[u8]) -> Result<Parsed> {
    if bytes.len() < HDR_SIZE + 4 {
        return Err(Error::Format(format!("{}: header too short", path.display())));
    }
    let ndim = i16::from_le_bytes([bytes[40], bytes[41]]) as usize;
    if ndim == 0 || ndim > 7 {
        return Err(Error::Format(format!("{}: bad ndim {ndim}", path.display())));
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        dims.push(i16::from_le_bytes([bytes[42 + 2 * i], bytes[43 + 2 * i]]) as usize);
    }
    let intent = i16::from_le_bytes([bytes[68], bytes[69]]);
    let datatype = i16::from_le_bytes([bytes[70], bytes[71]]);
    let vox_offset = f32::from_le_bytes(bytes[108..112].try_into().unwrap()) as usize;
    let total: usize = dims.iter().product();
    let data = match datatype {
        DT_FLOAT64 => {
            let need = vox_offset + total * 8;
            if bytes.len() < need {
                return Err(Error::Format(format!("{}: truncated data", path.display())));
            }
            bytes[vox_offset..need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        DT_FLOAT32 => {
            let need = vox_offset + total * 4;
            if bytes.len() < need {
                return Err(Error::Format(format!("{}: truncated data", path.display())));
            }
            bytes[vox_offset..need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        dt => {
            return Err(Error::Format(format!(
                "{}: unsupported datatype {dt}",
                path.display()
            )))
        }
    };
    Ok(Parsed { dims, intent, data })
}

/// Scalar grid -> axis-0-fastest NIfTI order.
fn image_to_file_order(shape: &[usize], data: &[f64]) -> Vec<f64> {
    match shape.len() {
        2 => {
            let (s0, s1) = (shape[0], shape[1]);
            let mut out = Vec::with_capacity(data.len());
            for y in 0..s1 {
                for x in 0..s0 {
                    out.push(data[x * s1 + y]);
                }
            }
            out
        }
        3 => {
            let (s0, s1, s2) = (shape[0], shape[1], shape[2]);
            let mut out = Vec::with_capacity(data.len());
            for z in 0..s2 {
                for y in 0..s1 {
                    for x in 0..s0 {
                        out.push(data[(x * s1 + y) * s2 + z]);
                    }
                }
            }
            out
        }
        r => panic!("rank {r}"),
    }
}

fn image_from_file_order(shape: &[usize], data: &[f64]) -> Vec<f64> {
    match shape.len() {
        2 => {
            let (s0, s1) = (shape[0], shape[1]);
            let mut out = vec![0.0; data.len()];
            let mut it = data.iter();
            for y in 0..s1 {
                for x in 0..s0 {
                    out[x * s1 + y] = *it.next().unwrap();
                }
            }
            out
        }
        3 => {
            let (s0, s1, s2) = (shape[0], shape[1], shape[2]);
            let mut out = vec![0.0; data.len()];
            let mut it = data.iter();
            for z in 0..s2 {
                for y in 0..s1 {
                    for x in 0..s0 {
                        out[(x * s1 + y) * s2 + z] = *it.next().unwrap();
                    }
                }
            }
            out
        }
        r => panic!("rank {r}"),
    }
}

pub fn write_image(path: &Path, img: &GridImage) -> Result<()> {
    let dims: Vec<usize> = match img.rank() {
        2 => vec![img.shape[0], img.shape[1], 1],
        _ => img.shape.clone(),
    };
    let mut bytes = build_header(&dims, 0);
    for v in image_to_file_order(&img.shape, &img.data) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_gz(path, &bytes)
}

pub fn read_image(path: &Path) -> Result<GridImage> {
    let bytes = read_maybe_gz(path)?;
    let p = parse(path, &bytes)?;
    // Squeeze trailing singleton dims down to rank 2.
    let mut dims = p.dims.clone();
    while dims.len() > 2 && dims.last() == Some(&1) {
        dims.pop();
    }
    if dims.len() != 2 && dims.len() != 3 {
        return Err(Error::Format(format!(
            "{}: expected a 2-D or 3-D image, dims {:?}",
            path.display(),
            p.dims
        )));
    }
    Ok(GridImage {
        data: image_from_file_order(&dims, &p.data),
        shape: dims,
    })
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let img = GridImage {
        shape: mask.shape.clone(),
        data: mask.data.iter().map(|&v| v as f64).collect(),
    };
    write_image(path, &img)
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = read_image(path)?;
    BinaryMask::new(
        img.shape,
        img.data.iter().map(|&v| if v > 0.5 { 1 } else { 0 }).collect(),
    )
}

pub fn write_field(path: &Path, field: &DisplacementField) -> Result<()> {
    let n = field.n;
    let dims: Vec<usize> = match n {
        2 => vec![field.spatial[0], field.spatial[1], 1, 1, 2],
        _ => vec![
            field.spatial[0],
            field.spatial[1],
            field.spatial[2],
            1,
            3,
        ],
    };
    let total = field.num_voxels();
    let mut bytes = build_header(&dims, INTENT_VECTOR);
    // Component is the slowest axis in file order.
    let spatial_file: Vec<usize> = field.spatial.clone();
    for comp in 0..n {
        let plane: Vec<f64> = (0..total).map(|v| field.data[v * n + comp]).collect();
        for v in image_to_file_order(&spatial_file, &plane) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_gz(path, &bytes)
}

pub fn read_field(path: &Path) -> Result<DisplacementField> {
    let bytes = read_maybe_gz(path)?;
    let p = parse(path, &bytes)?;
    if p.dims.len() != 5 {
        return Err(Error::Format(format!(
            "{}: expected a 5-D vector volume, dims {:?}",
            path.display(),
            p.dims
        )));
    }
    if p.intent != INTENT_VECTOR {
        return Err(Error::Format(format!(
            "{}: missing vector intent code",
            path.display()
        )));
    }
    let n = p.dims[4];
    let spatial: Vec<usize> = if n == 2 {
        vec![p.dims[0], p.dims[1]]
    } else {
        vec![p.dims[0], p.dims[1], p.dims[2]]
    };
    let total: usize = spatial.iter().product();
    let mut data = vec![0.0; total * n];
    for comp in 0..n {
        let plane = image_from_file_order(&spatial, &p.data[comp * total..(comp + 1) * total]);
        for (v, &val) in plane.iter().enumerate() {
            data[v * n + comp] = val;
        }
    }
    DisplacementField::new(spatial, n, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn image_roundtrip_2d_and_3d() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);

        let img = GridImage {
            shape: vec![5, 7],
            data: (0..35).map(|_| rng.random_range(0.0..1.0)).collect(),
        };
        let p = dir.path().join("img2.nii.gz");
        write_image(&p, &img).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(img, back);

        let vol = GridImage {
            shape: vec![4, 5, 6],
            data: (0..120).map(|_| rng.random_range(0.0..1.0)).collect(),
        };
        let p = dir.path().join("img3.nii.gz");
        write_image(&p, &vol).unwrap();
        assert_eq!(read_image(&p).unwrap(), vol);
    }

    #[test]
    fn field_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut f = DisplacementField::zeros(&[6, 5]);
        for v in f.data.iter_mut() {
            *v = rng.random_range(-10.0..10.0);
        }
        let p = dir.path().join("f.nii.gz");
        write_field(&p, &f).unwrap();
        assert_eq!(read_field(&p).unwrap(), f);

        let mut f3 = DisplacementField::zeros(&[3, 4, 5]);
        for v in f3.data.iter_mut() {
            *v = rng.random_range(-10.0..10.0);
        }
        let p = dir.path().join("f3.nii.gz");
        write_field(&p, &f3).unwrap();
        assert_eq!(read_field(&p).unwrap(), f3);
    }

    #[test]
    fn writes_are_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let img = GridImage {
            shape: vec![8, 8],
            data: (0..64).map(|i| (i as f64) / 64.0).collect(),
        };
        let p1 = dir.path().join("a.nii.gz");
        let p2 = dir.path().join("b.nii.gz");
        write_image(&p1, &img).unwrap();
        write_image(&p2, &img).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = BinaryMask::new(vec![4, 4], {
            let mut d = vec![0u8; 16];
            d[5] = 1;
            d[6] = 1;
            d
        })
        .unwrap();
        let p = dir.path().join("m.nii.gz");
        write_mask(&p, &mask).unwrap();
        assert_eq!(read_mask(&p).unwrap(), mask);
    }
}
