//! Ground-truth benchmark construction: the deformed phantom atlas, the two
//! synthetic 2-D datasets with known inverse transforms and landmarks, and
//! the 3-D preprocessing/augmentation pipeline with synthetic stand-in
//! volumes.

pub mod field;
pub mod phantom;
pub mod volume3d;

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    make_affine, warp, AffineMap, AffineParams, BinaryMask, DisplacementField, GridImage,
    LandmarkSet, WarpMode,
};
use crate::io;

pub use field::smooth_random_field;
pub use phantom::shepp_logan;
pub use volume3d::{augment_volume, make_standin_volumes, preprocess_volume, AugmentPipeline};

const ATLAS_SEED_SALT: u64 = 0x41544c41_u64; // distinct stream from sample seeds

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Displacement magnitude in pixels.
    pub alpha: f64,
    pub sigma_range: [f64; 2],
    pub translation_range: [f64; 2],
    pub rotation_range: [f64; 2],
    pub zoom_range: [f64; 2],
    pub shear_range: [f64; 2],
    pub counts: SplitCounts,
    pub ellipse_count_range: [usize; 2],
    pub base_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 128,
            alpha: 40.0,
            sigma_range: [3.0, 7.0],
            translation_range: [0.0, 40.0],
            rotation_range: [0.0, 360.0],
            zoom_range: [0.5, 1.5],
            shear_range: [0.0, 30.0],
            counts: SplitCounts {
                train: 3000,
                val: 100,
                test: 100,
            },
            ellipse_count_range: [2, 6],
            base_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 64 {
            return Err(Error::invalid("image_size must be >= 64"));
        }
        if self.alpha < 0.0 {
            return Err(Error::invalid("alpha must be >= 0"));
        }
        for (name, r) in [
            ("sigma_range", &self.sigma_range),
            ("translation_range", &self.translation_range),
            ("rotation_range", &self.rotation_range),
            ("zoom_range", &self.zoom_range),
            ("shear_range", &self.shear_range),
        ] {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return Err(Error::invalid(format!("bad {name}: {r:?}")));
            }
        }
        if self.zoom_range[0] <= 0.0 {
            return Err(Error::invalid("zoom must be > 0"));
        }
        if self.sigma_range[0] <= 0.0 {
            return Err(Error::invalid("sigma must be > 0"));
        }
        if self.ellipse_count_range[0] > self.ellipse_count_range[1] {
            return Err(Error::invalid("bad ellipse_count_range"));
        }
        Ok(())
    }
}

/// One benchmark target with its generating (inverse) transforms.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub target: GridImage,
    pub gt_affine_inv: AffineMap,
    pub gt_field_inv: DisplacementField,
    pub seed: u64,
}

fn draw_in(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// Draws the ground-truth affine (the pull-back map applied to the atlas),
/// assembled about the image center.
pub fn sample_gt_affine(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<AffineMap> {
    let params = AffineParams {
        translation: vec![
            draw_in(rng, cfg.translation_range),
            draw_in(rng, cfg.translation_range),
        ],
        rotation: vec![draw_in(rng, cfg.rotation_range)],
        zoom: vec![draw_in(rng, cfg.zoom_range), draw_in(rng, cfg.zoom_range)],
        shear_x: draw_in(rng, cfg.shear_range),
    };
    let c = (cfg.image_size as f64 - 1.0) / 2.0;
    make_affine(&params, &[c, c])
}

/// Draws the ground-truth dense displacement: sigma uniform in range, then a
/// normalized smooth random field scaled by alpha.
pub fn sample_gt_field(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    size: usize,
) -> DisplacementField {
    let sigma = draw_in(rng, cfg.sigma_range);
    field::smooth_random_field(rng, &[size, size], sigma, cfg.alpha)
}

// ---------------------------------------------------------------------------
// Atlas, mask and landmarks
// ---------------------------------------------------------------------------

fn close_mask(data: &[bool], s0: usize, s1: usize) -> Vec<bool> {
    // Morphological closing with a 3x3 box.
    let dilate = |src: &[bool]| -> Vec<bool> {
        let mut out = vec![false; src.len()];
        for i in 0..s0 {
            for j in 0..s1 {
                'win: for di in -1i32..=1 {
                    for dj in -1i32..=1 {
                        let a = i as i32 + di;
                        let b = j as i32 + dj;
                        if a >= 0
                            && a < s0 as i32
                            && b >= 0
                            && b < s1 as i32
                            && src[a as usize * s1 + b as usize]
                        {
                            out[i * s1 + j] = true;
                            break 'win;
                        }
                    }
                }
            }
        }
        out
    };
    let erode = |src: &[bool]| -> Vec<bool> {
        let mut out = vec![true; src.len()];
        for i in 0..s0 {
            for j in 0..s1 {
                'win: for di in -1i32..=1 {
                    for dj in -1i32..=1 {
                        let a = i as i32 + di;
                        let b = j as i32 + dj;
                        let v = if a >= 0 && a < s0 as i32 && b >= 0 && b < s1 as i32 {
                            src[a as usize * s1 + b as usize]
                        } else {
                            false
                        };
                        if !v {
                            out[i * s1 + j] = false;
                            break 'win;
                        }
                    }
                }
            }
        }
        out
    };
    erode(&dilate(data))
}

/// Moore-neighbor boundary trace of the outer contour, clockwise from the
/// first set pixel in scan order. Returns ordered boundary pixel centers.
fn trace_contour(mask: &[bool], s0: usize, s1: usize) -> Vec<(f64, f64)> {
    let at = |i: isize, j: isize| -> bool {
        i >= 0 && j >= 0 && (i as usize) < s0 && (j as usize) < s1 && mask[i as usize * s1 + j as usize]
    };
    let start = (0..s0 * s1).find(|&v| mask[v]).expect("nonempty mask");
    let start = ((start / s1) as isize, (start % s1) as isize);

    // 8-neighborhood in clockwise order.
    const NBR: [(isize, isize); 8] = [
        (-1, 0),
        (-1, 1),
        (0, 1),
        (1, 1),
        (1, 0),
        (1, -1),
        (0, -1),
        (-1, -1),
    ];
    let mut contour = vec![start];
    let mut cur = start;
    let mut backtrack = 6usize; // came from the west
    loop {
        let mut found = None;
        for k in 0..8 {
            let dir = (backtrack + 1 + k) % 8;
            let cand = (cur.0 + NBR[dir].0, cur.1 + NBR[dir].1);
            if at(cand.0, cand.1) {
                found = Some((cand, dir));
                break;
            }
        }
        let Some((next, dir)) = found else {
            break; // isolated pixel
        };
        if next == start && contour.len() > 2 {
            break;
        }
        contour.push(next);
        cur = next;
        backtrack = (dir + 4) % 8;
    }
    contour
        .into_iter()
        .map(|(i, j)| (i as f64, j as f64))
        .collect()
}

/// `count` points uniformly spaced by arc length along the closed polygon.
fn resample_by_arc_length(poly: &[(f64, f64)], count: usize) -> Vec<(f64, f64)> {
    let m = poly.len();
    let mut cum = Vec::with_capacity(m + 1);
    cum.push(0.0);
    for k in 0..m {
        let (a, b) = (poly[k], poly[(k + 1) % m]);
        let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        cum.push(cum[k] + d);
    }
    let total = *cum.last().unwrap();
    let mut out = Vec::with_capacity(count);
    let mut seg = 0usize;
    for k in 0..count {
        let t = total * k as f64 / count as f64;
        while seg + 1 < cum.len() - 1 && cum[seg + 1] <= t {
            seg += 1;
        }
        let (a, b) = (poly[seg], poly[(seg + 1) % m]);
        let denom = (cum[seg + 1] - cum[seg]).max(1e-12);
        let f = (t - cum[seg]) / denom;
        out.push((a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1)));
    }
    out
}

/// Local intensity extrema strictly inside the mask, ranked by contrast,
/// greedily thinned by a minimum separation.
fn interior_extrema(
    img: &GridImage,
    mask: &[bool],
    s0: usize,
    s1: usize,
    count: usize,
) -> Vec<(f64, f64)> {
    // Erode the mask a few steps so candidates sit strictly inside.
    let mut eroded: Vec<bool> = mask.to_vec();
    for _ in 0..3 {
        let src = eroded.clone();
        for i in 0..s0 {
            for j in 0..s1 {
                if !src[i * s1 + j] {
                    continue;
                }
                let mut keep = true;
                'win: for di in -1i32..=1 {
                    for dj in -1i32..=1 {
                        let a = i as i32 + di;
                        let b = j as i32 + dj;
                        if a < 0 || a >= s0 as i32 || b < 0 || b >= s1 as i32 {
                            keep = false;
                            break 'win;
                        }
                        if !src[a as usize * s1 + b as usize] {
                            keep = false;
                            break 'win;
                        }
                    }
                }
                eroded[i * s1 + j] = keep;
            }
        }
    }

    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for i in 2..s0 - 2 {
        for j in 2..s1 - 2 {
            if !eroded[i * s1 + j] {
                continue;
            }
            let v = img.at(&[i, j]);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut mean = 0.0;
            for di in -2i32..=2 {
                for dj in -2i32..=2 {
                    let w = img.at(&[(i as i32 + di) as usize, (j as i32 + dj) as usize]);
                    lo = lo.min(w);
                    hi = hi.max(w);
                    mean += w;
                }
            }
            mean /= 25.0;
            if v >= hi || v <= lo {
                candidates.push(((v - mean).abs(), i, j));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut picked: Vec<(f64, f64)> = Vec::new();
    for min_dist in [6.0f64, 4.0, 2.0, 0.0] {
        for &(_, i, j) in &candidates {
            if picked.len() >= count {
                break;
            }
            let p = (i as f64, j as f64);
            let ok = picked
                .iter()
                .all(|q| ((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).sqrt() >= min_dist)
                && !picked.contains(&p);
            if ok {
                picked.push(p);
            }
        }
        if picked.len() >= count {
            break;
        }
    }
    picked.truncate(count);
    picked
}

/// Builds the atlas (a nonrigidly deformed phantom), its segmentation and a
/// landmark set of 64 boundary points plus 16 interior extrema.
pub fn make_atlas(cfg: &SynthConfig, seed: u64) -> Result<(GridImage, BinaryMask, LandmarkSet)> {
    cfg.validate()?;
    let size = cfg.image_size;
    let base = phantom::shepp_logan(size)?;

    // One fixed smooth deformation per seed: magnitude alpha/2, sigma 5.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deform = field::smooth_random_field(&mut rng, &[size, size], 5.0, cfg.alpha / 2.0);
    let atlas = warp(
        &base,
        &AffineMap::identity(2),
        Some(&deform),
        WarpMode::Composed,
    )?;

    let raw: Vec<bool> = atlas.data.iter().map(|&v| v > 0.0).collect();
    let closed = close_mask(&raw, size, size);
    if !closed.iter().any(|&v| v) {
        return Err(Error::GenerationFailure("empty atlas mask".into()));
    }
    let mask = BinaryMask {
        shape: vec![size, size],
        data: closed.iter().map(|&v| v as u8).collect(),
    };

    let contour = trace_contour(&closed, size, size);
    if contour.len() < 8 {
        return Err(Error::GenerationFailure("degenerate atlas contour".into()));
    }
    let boundary = resample_by_arc_length(&contour, 64);
    let interior = interior_extrema(&atlas, &closed, size, size, 16);
    if interior.len() < 16 {
        return Err(Error::GenerationFailure(format!(
            "only {} interior extrema found",
            interior.len()
        )));
    }

    let mut pts = Vec::with_capacity((64 + 16) * 2);
    for (a, b) in boundary.into_iter().chain(interior) {
        pts.push(a);
        pts.push(b);
    }
    let landmarks = LandmarkSet::new(2, pts)?;
    Ok((atlas, mask, landmarks))
}

// ---------------------------------------------------------------------------
// Target synthesis
// ---------------------------------------------------------------------------

/// Fills interior holes: keeps every pixel not reachable from the border
/// through the mask complement.
fn filled_support(mask: &[bool], s0: usize, s1: usize) -> Vec<bool> {
    let mut outside = vec![false; s0 * s1];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for i in 0..s0 {
        for &j in &[0, s1 - 1] {
            if !mask[i * s1 + j] && !outside[i * s1 + j] {
                outside[i * s1 + j] = true;
                stack.push((i, j));
            }
        }
    }
    for j in 0..s1 {
        for &i in &[0, s0 - 1] {
            if !mask[i * s1 + j] && !outside[i * s1 + j] {
                outside[i * s1 + j] = true;
                stack.push((i, j));
            }
        }
    }
    while let Some((i, j)) = stack.pop() {
        let push = |a: usize, b: usize, outside: &mut Vec<bool>, stack: &mut Vec<(usize, usize)>| {
            if !mask[a * s1 + b] && !outside[a * s1 + b] {
                outside[a * s1 + b] = true;
                stack.push((a, b));
            }
        };
        if i > 0 {
            push(i - 1, j, &mut outside, &mut stack);
        }
        if i + 1 < s0 {
            push(i + 1, j, &mut outside, &mut stack);
        }
        if j > 0 {
            push(i, j - 1, &mut outside, &mut stack);
        }
        if j + 1 < s1 {
            push(i, j + 1, &mut outside, &mut stack);
        }
    }
    outside.iter().map(|&o| !o).collect()
}

fn paint_background(cfg: &SynthConfig, rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let mut bg = vec![0.0f64; size * size];
    let count = rng.random_range(cfg.ellipse_count_range[0]..=cfg.ellipse_count_range[1]);
    for _ in 0..count {
        let c0 = rng.random_range(0.0..size as f64);
        let c1 = rng.random_range(0.0..size as f64);
        let r0: f64 = rng.random_range(10.0..40.0);
        let r1: f64 = rng.random_range(10.0..40.0);
        let phi = rng.random_range(0.0..180.0f64).to_radians();
        let intensity = rng.random_range(0.2..0.9);
        let (s, c) = phi.sin_cos();
        let reach = r0.max(r1).ceil() as isize;
        let lo0 = ((c0 as isize) - reach).max(0) as usize;
        let hi0 = ((c0 as isize) + reach).min(size as isize - 1) as usize;
        let lo1 = ((c1 as isize) - reach).max(0) as usize;
        let hi1 = ((c1 as isize) + reach).min(size as isize - 1) as usize;
        for i in lo0..=hi0 {
            for j in lo1..=hi1 {
                let dx = i as f64 - c0;
                let dy = j as f64 - c1;
                let xr = c * dx + s * dy;
                let yr = -s * dx + c * dy;
                if (xr / r0) * (xr / r0) + (yr / r1) * (yr / r1) <= 1.0 {
                    bg[i * size + j] = intensity;
                }
            }
        }
    }
    bg
}

/// Renders one target by sequential pull-back sampling (affine pass first,
/// then the dense pass), optionally compositing background ellipses behind
/// the warped object.
pub fn synthesize_pair(
    atlas: &GridImage,
    cfg: &SynthConfig,
    seed: u64,
    variant: Variant,
) -> Result<SamplePair> {
    cfg.validate()?;
    let size = cfg.image_size;
    if atlas.shape != [size, size] {
        return Err(Error::ShapeMismatch("atlas vs configured image size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt_affine_inv = sample_gt_affine(cfg, &mut rng)?;
    let gt_field_inv = sample_gt_field(cfg, &mut rng, size);

    // Affine first, then nonrigid: two sampling passes.
    let mid = warp(atlas, &gt_affine_inv, None, WarpMode::Composed)?;
    let mut target = warp(
        &mid,
        &AffineMap::identity(2),
        Some(&gt_field_inv),
        WarpMode::Composed,
    )?;

    if variant == Variant::Background {
        let bg = paint_background(cfg, &mut rng, size);
        // The object occludes the ellipses: carry its (hole-filled) support
        // through the same two warps and keep object pixels where it lands.
        let support = filled_support(
            &atlas.data.iter().map(|&v| v > 0.0).collect::<Vec<bool>>(),
            size,
            size,
        );
        let support_img = GridImage {
            shape: vec![size, size],
            data: support.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        };
        let mid_s = warp(&support_img, &gt_affine_inv, None, WarpMode::Composed)?;
        let warped_support = warp(
            &mid_s,
            &AffineMap::identity(2),
            Some(&gt_field_inv),
            WarpMode::Composed,
        )?;
        for ((tv, &sv), &bv) in target
            .data
            .iter_mut()
            .zip(&warped_support.data)
            .zip(&bg)
        {
            if sv < 0.5 {
                *tv = bv;
            }
        }
    }

    for v in &mut target.data {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(SamplePair {
        target,
        gt_affine_inv,
        gt_field_inv,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Dataset directory layout and manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub img: String,
    pub gt: String,
    pub field: String,
    pub seed: u64,
    pub img_crc32: String,
    pub field_crc32: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtSidecar {
    pub affine_inv: AffineMap,
    pub field: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub variant: Variant,
    pub config: SynthConfig,
    pub atlas: String,
    pub mask: String,
    pub landmarks: String,
    pub train: Vec<SampleEntry>,
    pub val: Vec<SampleEntry>,
    pub test: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Result<&[SampleEntry]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }

    /// Checks that every referenced file exists and counts match the config.
    pub fn validate(&self, root: &Path) -> Result<()> {
        for rel in [&self.atlas, &self.mask, &self.landmarks] {
            let p = root.join(rel);
            if !p.is_file() {
                return Err(Error::GenerationFailure(format!(
                    "missing dataset file {}",
                    p.display()
                )));
            }
        }
        let counts = [
            (self.train.len(), self.config.counts.train, "train"),
            (self.val.len(), self.config.counts.val, "val"),
            (self.test.len(), self.config.counts.test, "test"),
        ];
        for (got, want, name) in counts {
            if got != want {
                return Err(Error::GenerationFailure(format!(
                    "{name} split has {got} entries, config says {want}"
                )));
            }
        }
        for entry in self.train.iter().chain(&self.val).chain(&self.test) {
            for rel in [&entry.img, &entry.gt, &entry.field] {
                let p = root.join(rel);
                if !p.is_file() {
                    return Err(Error::GenerationFailure(format!(
                        "missing sample file {}",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn write_sample(
    root: &Path,
    split: &str,
    index: usize,
    pair: &SamplePair,
) -> Result<SampleEntry> {
    let img_rel = format!("{split}/{index:04}_img.nii.gz");
    let gt_rel = format!("{split}/{index:04}_gt.json");
    let field_rel = format!("{split}/{index:04}_field.nii.gz");
    io::nifti::write_image(&root.join(&img_rel), &pair.target)?;
    io::nifti::write_field(&root.join(&field_rel), &pair.gt_field_inv)?;
    io::write_json(
        &root.join(&gt_rel),
        &GtSidecar {
            affine_inv: pair.gt_affine_inv.clone(),
            field: field_rel.clone(),
            seed: pair.seed,
        },
    )?;
    Ok(SampleEntry {
        img_crc32: io::file_crc32(&root.join(&img_rel))?,
        field_crc32: io::file_crc32(&root.join(&field_rel))?,
        img: img_rel,
        gt: gt_rel,
        field: field_rel,
        seed: pair.seed,
    })
}

/// Generates a full dataset under `out_dir`: atlas, mask, landmarks, all
/// three splits and the manifest. Per-sample seeds are `base_seed + index`
/// over a global sample index, so parallel and serial generation agree.
pub fn generate_dataset(
    cfg: &SynthConfig,
    variant: Variant,
    out_dir: &Path,
    jobs: usize,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for split in ["train", "val", "test"] {
        std::fs::create_dir_all(out_dir.join(split)).map_err(|e| Error::io(out_dir, e))?;
    }

    let (atlas, mask, landmarks) = make_atlas(cfg, cfg.base_seed ^ ATLAS_SEED_SALT)?;
    io::nifti::write_image(&out_dir.join("atlas.nii.gz"), &atlas)?;
    io::nifti::write_mask(&out_dir.join("mask.nii.gz"), &mask)?;
    io::write_json(&out_dir.join("landmarks.json"), &landmarks)?;

    let plan: Vec<(String, usize, u64)> = {
        let mut v = Vec::new();
        let mut global = 0u64;
        for (split, count) in [
            ("train", cfg.counts.train),
            ("val", cfg.counts.val),
            ("test", cfg.counts.test),
        ] {
            for index in 0..count {
                v.push((split.to_string(), index, cfg.base_seed + global));
                global += 1;
            }
        }
        v
    };

    let jobs = jobs.max(1);
    let entries: Vec<Result<(String, usize, SampleEntry)>> = if jobs == 1 {
        plan.iter()
            .map(|(split, index, seed)| {
                let pair = synthesize_pair(&atlas, cfg, *seed, variant)?;
                Ok((split.clone(), *index, write_sample(out_dir, split, *index, &pair)?))
            })
            .collect()
    } else {
        std::thread::scope(|scope| {
            let chunks: Vec<&[(String, usize, u64)]> =
                plan.chunks(plan.len().div_ceil(jobs)).collect();
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| {
                    let atlas = &atlas;
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|(split, index, seed)| {
                                let pair = synthesize_pair(atlas, cfg, *seed, variant)?;
                                Ok((
                                    split.clone(),
                                    *index,
                                    write_sample(out_dir, split, *index, &pair)?,
                                ))
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("generation worker panicked"))
                .collect()
        })
    };

    let mut manifest = DatasetManifest {
        schema_version: 1,
        variant,
        config: cfg.clone(),
        atlas: "atlas.nii.gz".into(),
        mask: "mask.nii.gz".into(),
        landmarks: "landmarks.json".into(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut buckets: Vec<(String, usize, SampleEntry)> = Vec::with_capacity(entries.len());
    for e in entries {
        buckets.push(e?);
    }
    buckets.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    for (split, _, entry) in buckets {
        match split.as_str() {
            "train" => manifest.train.push(entry),
            "val" => manifest.val.push(entry),
            _ => manifest.test.push(entry),
        }
    }

    io::write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = io::read_json(&dir.join("manifest.json"))?;
    manifest.validate(dir)?;
    Ok(manifest)
}

pub struct AtlasBundle {
    pub atlas: GridImage,
    pub mask: BinaryMask,
    pub landmarks: LandmarkSet,
}

pub fn load_atlas(dir: &Path, manifest: &DatasetManifest) -> Result<AtlasBundle> {
    Ok(AtlasBundle {
        atlas: io::nifti::read_image(&dir.join(&manifest.atlas))?,
        mask: io::nifti::read_mask(&dir.join(&manifest.mask))?,
        landmarks: io::read_json(&dir.join(&manifest.landmarks))?,
    })
}

pub fn load_sample(dir: &Path, entry: &SampleEntry) -> Result<SamplePair> {
    let target = io::nifti::read_image(&dir.join(&entry.img))?;
    let gt: GtSidecar = io::read_json(&dir.join(&entry.gt))?;
    let field = io::nifti::read_field(&dir.join(&entry.field))?;
    Ok(SamplePair {
        target,
        gt_affine_inv: gt.affine_inv,
        gt_field_inv: field,
        seed: gt.seed,
    })
}

/// Just the target image of a sample (what the training loop needs).
pub fn load_target(dir: &Path, entry: &SampleEntry) -> Result<GridImage> {
    io::nifti::read_image(&dir.join(&entry.img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::displace_points;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            image_size: 64,
            counts: SplitCounts {
                train: 4,
                val: 2,
                test: 2,
            },
            base_seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn atlas_is_reproducible_with_landmarks() {
        let cfg = small_cfg();
        let (a1, m1, l1) = make_atlas(&cfg, 3).unwrap();
        let (a2, m2, l2) = make_atlas(&cfg, 3).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(m1, m2);
        assert_eq!(l1, l2);
        assert_eq!(l1.count(), 80);

        // All landmarks inside the grid; boundary points within 1 px of the
        // mask contour.
        let s = cfg.image_size as f64 - 1.0;
        for p in l1.iter() {
            assert!(p[0] >= 0.0 && p[0] <= s && p[1] >= 0.0 && p[1] <= s);
        }
        let boundary_ok = l1.iter().take(64).all(|p| {
            let mut near = false;
            'scan: for di in -1i32..=1 {
                for dj in -1i32..=1 {
                    let i = (p[0].round() as i32 + di).clamp(0, 63) as usize;
                    let j = (p[1].round() as i32 + dj).clamp(0, 63) as usize;
                    let on = m1.at(&[i, j]) == 1;
                    let interior = i > 0
                        && i < 63
                        && j > 0
                        && j < 63
                        && m1.at(&[i - 1, j]) == 1
                        && m1.at(&[i + 1, j]) == 1
                        && m1.at(&[i, j - 1]) == 1
                        && m1.at(&[i, j + 1]) == 1;
                    if on && !interior {
                        near = true;
                        break 'scan;
                    }
                }
            }
            near
        });
        assert!(boundary_ok);
    }

    #[test]
    fn gt_affine_parameters_stay_in_range() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let t = sample_gt_affine(&cfg, &mut rng).unwrap();
            // The determinant of the linear block is the zoom product (shear
            // and rotation are unimodular), so it must stay within range.
            let det = t.det_linear().abs();
            assert!(det >= 0.25 - 1e-9 && det <= 2.25 + 1e-9, "det {det}");
        }

        // Collapsed ranges give the identity.
        let mut fixed = cfg.clone();
        fixed.translation_range = [0.0, 0.0];
        fixed.rotation_range = [0.0, 0.0];
        fixed.zoom_range = [1.0, 1.0];
        fixed.shear_range = [0.0, 0.0];
        let t = sample_gt_affine(&fixed, &mut rng).unwrap();
        assert_eq!(t, AffineMap::identity(2));
    }

    #[test]
    fn neutral_pair_reproduces_atlas() {
        let mut cfg = small_cfg();
        cfg.alpha = 0.0;
        cfg.translation_range = [0.0, 0.0];
        cfg.rotation_range = [0.0, 0.0];
        cfg.zoom_range = [1.0, 1.0];
        cfg.shear_range = [0.0, 0.0];
        let (atlas, _, _) = make_atlas(&cfg, 3).unwrap();
        let pair = synthesize_pair(&atlas, &cfg, 77, Variant::Plain).unwrap();
        let diff = atlas
            .data
            .iter()
            .zip(&pair.target.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-6, "max diff {diff}");
    }

    #[test]
    fn stored_transforms_rebuild_the_target_exactly() {
        // Same code path as generation: affine pass then dense pass.
        let cfg = small_cfg();
        let (atlas, _, _) = make_atlas(&cfg, 3).unwrap();
        let pair = synthesize_pair(&atlas, &cfg, 21, Variant::Plain).unwrap();
        let mid = warp(&atlas, &pair.gt_affine_inv, None, WarpMode::Composed).unwrap();
        let rebuilt = warp(
            &mid,
            &AffineMap::identity(2),
            Some(&pair.gt_field_inv),
            WarpMode::Composed,
        )
        .unwrap();
        let diff = rebuilt
            .data
            .iter()
            .zip(&pair.target.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn pair_generation_is_bit_deterministic() {
        let cfg = small_cfg();
        let (atlas, _, _) = make_atlas(&cfg, 3).unwrap();
        let a = synthesize_pair(&atlas, &cfg, 5, Variant::Background).unwrap();
        let b = synthesize_pair(&atlas, &cfg, 5, Variant::Background).unwrap();
        assert_eq!(a.target, b.target);
        assert_eq!(a.gt_affine_inv, b.gt_affine_inv);
        assert_eq!(a.gt_field_inv, b.gt_field_inv);
    }

    #[test]
    fn nonzero_target_pixels_trace_back_into_support() {
        // Back-tracing oracle: map 100 random nonzero target pixels through
        // the recorded transforms and check the atlas support there.
        let cfg = small_cfg();
        let (atlas, mask, _) = make_atlas(&cfg, 3).unwrap();
        let pair = synthesize_pair(&atlas, &cfg, 9, Variant::Plain).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let nonzero: Vec<usize> = (0..pair.target.data.len())
            .filter(|&v| pair.target.data[v] > 1e-3)
            .collect();
        assert!(nonzero.len() > 100);
        let size = cfg.image_size;
        for _ in 0..100 {
            let v = nonzero[rng.random_range(0..nonzero.len())];
            let p = vec![(v / size) as f64, (v % size) as f64];
            // target(x) = atlas(affine_inv(x + field_inv(x)))
            let lp = LandmarkSet::new(2, vec![p[0], p[1], 0.0, 0.0]).unwrap();
            let moved = displace_points(&pair.gt_field_inv, &lp).unwrap();
            let q = pair.gt_affine_inv.apply(&moved.pts[0..2]);
            let qi = [
                q[0].round().clamp(0.0, size as f64 - 1.0) as usize,
                q[1].round().clamp(0.0, size as f64 - 1.0) as usize,
            ];
            // Allow a 1-px halo: interpolation spreads support.
            let mut ok = false;
            for di in -1i32..=1 {
                for dj in -1i32..=1 {
                    let a = (qi[0] as i32 + di).clamp(0, size as i32 - 1) as usize;
                    let b = (qi[1] as i32 + dj).clamp(0, size as i32 - 1) as usize;
                    if mask.at(&[a, b]) == 1 {
                        ok = true;
                    }
                }
            }
            assert!(ok, "pixel {v} traced to {qi:?} outside support");
        }
    }

    #[test]
    fn background_variant_adds_clutter() {
        let cfg = small_cfg();
        let (atlas, mask, _) = make_atlas(&cfg, 3).unwrap();
        let mut with_clutter = 0;
        for seed in 0..10 {
            let plain = synthesize_pair(&atlas, &cfg, seed, Variant::Plain).unwrap();
            let bg = synthesize_pair(&atlas, &cfg, seed, Variant::Background).unwrap();
            // Same transforms, so any extra nonzero pixels are ellipses.
            assert_eq!(plain.gt_affine_inv, bg.gt_affine_inv);
            let extra = bg
                .target
                .data
                .iter()
                .zip(&plain.target.data)
                .filter(|(b, p)| **b > 0.0 && **p == 0.0)
                .count();
            if extra > 0 {
                with_clutter += 1;
            }
        }
        assert!(with_clutter >= 9, "only {with_clutter}/10 had clutter");
        let _ = mask;
    }

    #[test]
    fn dataset_generation_roundtrip() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&cfg, Variant::Plain, dir.path(), 2).unwrap();
        assert_eq!(manifest.train.len(), 4);
        assert_eq!(manifest.val.len(), 2);
        assert_eq!(manifest.test.len(), 2);
        manifest.validate(dir.path()).unwrap();

        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded, manifest);

        // Stored target regenerates bit-exactly from its recorded seed.
        let bundle = load_atlas(dir.path(), &manifest).unwrap();
        for entry in manifest.val.iter() {
            let pair = load_sample(dir.path(), entry).unwrap();
            let regen = synthesize_pair(&bundle.atlas, &cfg, entry.seed, Variant::Plain).unwrap();
            assert_eq!(pair.target, regen.target);
            assert_eq!(pair.gt_affine_inv, regen.gt_affine_inv);
            assert_eq!(pair.gt_field_inv, regen.gt_field_inv);
        }
    }

    #[test]
    fn dataset_regeneration_is_byte_identical() {
        let cfg = small_cfg();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, Variant::Plain, d1.path(), 1).unwrap();
        generate_dataset(&cfg, Variant::Plain, d2.path(), 2).unwrap();
        let m1 = std::fs::read(d1.path().join("manifest.json")).unwrap();
        let m2 = std::fs::read(d2.path().join("manifest.json")).unwrap();
        assert_eq!(m1, m2);
        let i1 = std::fs::read(d1.path().join("train/0000_img.nii.gz")).unwrap();
        let i2 = std::fs::read(d2.path().join("train/0000_img.nii.gz")).unwrap();
        assert_eq!(i1, i2);
    }
}
