//! The two-part registration network: an affine regression stage (strided
//! encoder, global average pooling, fully connected head emitting the top
//! rows of the homogeneous matrix) followed by a dense U-shaped stage that
//! predicts the voxelwise displacement field. Both stages run on the autodiff
//! tape so the warps stay differentiable end to end.

pub mod checkpoint;

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AffineMap, BinaryMask, DisplacementField, GridImage, WarpMode};
use crate::nd::NdArray;
use crate::tape::real::Real;
use crate::tape::sample::identity_grid;
use crate::tape::{Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Spatial rank n (2 or 3).
    pub rank: usize,
    pub encoder_channels_affine: Vec<usize>,
    pub fc_widths: Vec<usize>,
    pub encoder_channels_dense: Vec<usize>,
    /// First `encoder_channels_dense.len()` entries are the up-path convs,
    /// the rest run at full resolution before the flow head.
    pub decoder_channels_dense: Vec<usize>,
    pub leaky_slope: f64,
    pub kernel_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            rank: 2,
            encoder_channels_affine: vec![16, 32, 64, 128],
            fc_widths: vec![500, 500],
            encoder_channels_dense: vec![16, 32, 32, 32],
            decoder_channels_dense: vec![32, 32, 32, 32, 8, 8],
            leaky_slope: 0.2,
            kernel_size: 3,
        }
    }
}

impl NetworkConfig {
    /// Output length of the affine head: n * (n + 1).
    pub fn m_len(&self) -> usize {
        self.rank * (self.rank + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank != 2 && self.rank != 3 {
            return Err(Error::invalid("network rank must be 2 or 3"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::invalid("kernel_size must be odd"));
        }
        if self.encoder_channels_affine.is_empty() || self.encoder_channels_dense.is_empty() {
            return Err(Error::invalid("encoder channel lists must be nonempty"));
        }
        if self.decoder_channels_dense.len() < self.encoder_channels_dense.len() {
            return Err(Error::invalid(
                "decoder must have at least one conv per encoder level",
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid("leaky_slope must be in (0,1)"));
        }
        Ok(())
    }

    fn check_input_shape(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.rank {
            return Err(Error::ShapeMismatch(format!(
                "rank-{} network on shape {shape:?}",
                self.rank
            )));
        }
        let levels = self
            .encoder_channels_affine
            .len()
            .max(self.encoder_channels_dense.len());
        let div = 1usize << levels;
        for &s in shape {
            if s % div != 0 {
                return Err(Error::invalid(format!(
                    "spatial extent {s} must be divisible by 2^{levels}"
                )));
            }
        }
        if shape.iter().any(|&s| s != shape[0]) {
            return Err(Error::invalid(
                "network input must have equal spatial extents",
            ));
        }
        Ok(())
    }
}

/// All trainable arrays, keyed by layer name. Ordered map so iteration,
/// initialization and checkpointing are deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real> {
    pub config: NetworkConfig,
    pub seed: u64,
    pub arrays: BTreeMap<String, NdArray<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn param_count(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            seed: self.seed,
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>()))
                .collect(),
        }
    }
}

/// Everything the forward pass produces for one target image.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub affine: AffineMap,
    pub field: DisplacementField,
    /// I(phi_a(x)) on the atlas grid (not segmented; intermediate output).
    pub warped_affine: GridImage,
    /// I(phi_a . phi_d(x)) on the atlas grid.
    pub warped_final: GridImage,
    /// S_A(x) * warped_final(x).
    pub warped_segmented: GridImage,
}

fn kernel_volume(k: usize, rank: usize) -> usize {
    k.pow(rank as u32)
}

struct InitCtx<'a, T: Real> {
    rng: &'a mut ChaCha8Rng,
    arrays: BTreeMap<String, NdArray<T>>,
    slope: f64,
}

impl<T: Real> InitCtx<'_, T> {
    fn uniform_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) {
        let bound = gain * (6.0 / ((1.0 + self.slope * self.slope) * fan_in as f64)).sqrt();
        let len: usize = shape.iter().product();
        let data: Vec<T> = (0..len)
            .map(|_| T::from_f64(self.rng.random_range(-bound..bound)))
            .collect();
        self.arrays
            .insert(name.to_string(), NdArray::from_vec(shape, data));
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.arrays.insert(name.to_string(), NdArray::zeros(shape));
    }

    fn explicit(&mut self, name: &str, arr: NdArray<T>) {
        self.arrays.insert(name.to_string(), arr);
    }
}

/// Fan-in-scaled random initialization; the affine head gets zero weights and
/// an identity-transform bias so the untrained network outputs the identity.
pub fn init_params<T: Real>(cfg: &NetworkConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let n = cfg.rank;
    let k = cfg.kernel_size;
    let kv = kernel_volume(k, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = InitCtx {
        rng: &mut rng,
        arrays: BTreeMap::new(),
        slope: cfg.leaky_slope,
    };

    let conv_shape = |cout: usize, cin: usize| -> Vec<usize> {
        let mut s = vec![cout, cin];
        s.extend(std::iter::repeat(k).take(n));
        s
    };

    // Affine encoder.
    let mut cin = 2;
    for (i, &c) in cfg.encoder_channels_affine.iter().enumerate() {
        ctx.uniform_fan_in(&format!("affine.enc{i}.w"), &conv_shape(c, cin), cin * kv, 1.0);
        ctx.zeros(&format!("affine.enc{i}.b"), &[c]);
        cin = c;
    }
    // Fully connected trunk after global average pooling.
    let mut fin = cin;
    for (i, &width) in cfg.fc_widths.iter().enumerate() {
        ctx.uniform_fan_in(&format!("affine.fc{i}.w"), &[width, fin], fin, 1.0);
        ctx.zeros(&format!("affine.fc{i}.b"), &[width]);
        fin = width;
    }
    // Identity-initialized head.
    let m = cfg.m_len();
    ctx.zeros("affine.head.w", &[m, fin]);
    let mut id_bias = vec![T::ZERO; m];
    for i in 0..n {
        id_bias[i * (n + 1) + i] = T::ONE;
    }
    ctx.explicit("affine.head.b", NdArray::from_vec(&[m], id_bias));

    // Dense encoder.
    let mut cin = 2;
    for (i, &c) in cfg.encoder_channels_dense.iter().enumerate() {
        ctx.uniform_fan_in(&format!("dense.enc{i}.w"), &conv_shape(c, cin), cin * kv, 1.0);
        ctx.zeros(&format!("dense.enc{i}.b"), &[c]);
        cin = c;
    }
    // Decoder: level convs with skip concats, then full-resolution convs.
    let enc = &cfg.encoder_channels_dense;
    let levels = enc.len();
    let mut ch = enc[levels - 1];
    for (i, &c) in cfg.decoder_channels_dense.iter().enumerate() {
        ctx.uniform_fan_in(&format!("dense.dec{i}.w"), &conv_shape(c, ch), ch * kv, 1.0);
        ctx.zeros(&format!("dense.dec{i}.b"), &[c]);
        ch = c;
        if i < levels {
            // After the conv at this scale the activation is upsampled and
            // concatenated with the matching skip (the raw input pair at the
            // final level).
            ch += if i + 1 < levels { enc[levels - 2 - i] } else { 2 };
        }
    }
    // Flow head: small random init so the initial field is near zero.
    ctx.uniform_fan_in("dense.flow.w", &conv_shape(n, ch), ch * kv, 0.01);
    ctx.zeros("dense.flow.b", &[n]);

    Ok(ModelParams {
        config: cfg.clone(),
        seed,
        arrays: ctx.arrays,
    })
}

/// Loads every parameter array into the graph; trainable or frozen.
pub fn param_vars<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    trainable: bool,
) -> BTreeMap<String, Var> {
    params
        .arrays
        .iter()
        .map(|(name, arr)| {
            let v = if trainable {
                g.param(arr.clone())
            } else {
                g.constant(arr.clone())
            };
            (name.clone(), v)
        })
        .collect()
}

fn affine_stage_graph<T: Real>(
    g: &mut Graph<T>,
    vars: &BTreeMap<String, Var>,
    cfg: &NetworkConfig,
    input2: Var,
) -> Var {
    let slope = T::from_f64(cfg.leaky_slope);
    let mut x = input2;
    for i in 0..cfg.encoder_channels_affine.len() {
        let w = vars[&format!("affine.enc{i}.w")];
        let b = vars[&format!("affine.enc{i}.b")];
        let y = g.conv(x, w, b, 2);
        x = g.leaky_relu(y, slope);
    }
    let mut f = g.gap(x);
    for i in 0..cfg.fc_widths.len() {
        let w = vars[&format!("affine.fc{i}.w")];
        let b = vars[&format!("affine.fc{i}.b")];
        let y = g.linear(f, w, b);
        f = g.relu(y);
    }
    g.linear(f, vars["affine.head.w"], vars["affine.head.b"])
}

/// The head regresses the transform in normalized [-1, 1] coordinates so all
/// its outputs live on comparable scales; a constant linear map converts the
/// rows to voxel units:
///   A_pix = A_norm,  t_pix = c - A_norm c + (s/2) t_norm
/// which is exact at the identity (t_pix = c - c = 0).
fn norm_to_pixel_theta<T: Real>(g: &mut Graph<T>, theta_norm: Var, n: usize, size: usize) -> Var {
    let m = n * (n + 1);
    let c = (size as f64 - 1.0) / 2.0;
    let half = size as f64 / 2.0;
    let mut mat = vec![T::ZERO; m * m];
    let mut bias = vec![T::ZERO; m];
    for i in 0..n {
        for j in 0..n {
            // Linear block passes through untouched.
            let row = i * (n + 1) + j;
            mat[row * m + row] = T::ONE;
        }
        let trow = i * (n + 1) + n;
        bias[trow] = T::from_f64(c);
        mat[trow * m + trow] = T::from_f64(half);
        for j in 0..n {
            mat[trow * m + i * (n + 1) + j] = T::from_f64(-c);
        }
    }
    let mat = g.constant(NdArray::from_vec(&[m, m], mat));
    let bias = g.constant(NdArray::from_vec(&[m], bias));
    g.linear(theta_norm, mat, bias)
}

fn dense_stage_graph<T: Real>(
    g: &mut Graph<T>,
    vars: &BTreeMap<String, Var>,
    cfg: &NetworkConfig,
    input2: Var,
) -> Var {
    let slope = T::from_f64(cfg.leaky_slope);
    let levels = cfg.encoder_channels_dense.len();

    let mut skips = Vec::with_capacity(levels);
    let mut x = input2;
    for i in 0..levels {
        let w = vars[&format!("dense.enc{i}.w")];
        let b = vars[&format!("dense.enc{i}.b")];
        let y = g.conv(x, w, b, 2);
        x = g.leaky_relu(y, slope);
        skips.push(x);
    }

    x = skips[levels - 1];
    for i in 0..cfg.decoder_channels_dense.len() {
        let w = vars[&format!("dense.dec{i}.w")];
        let b = vars[&format!("dense.dec{i}.b")];
        let y = g.conv(x, w, b, 1);
        x = g.leaky_relu(y, slope);
        if i < levels {
            let up = g.upsample_nearest(x);
            let skip = if i + 1 < levels {
                skips[levels - 2 - i]
            } else {
                input2
            };
            x = g.concat_c(&[up, skip]);
        }
    }
    g.conv(x, vars["dense.flow.w"], vars["dense.flow.b"], 1)
}

/// Tape handles to the stages' outputs inside one forward graph.
pub struct ForwardGraph {
    pub theta: Var,
    /// [n, spatial...] displacement field.
    pub field: Var,
    /// Flat [N] image I(phi_a(x)).
    pub warped_affine: Var,
    /// Flat [N] image I(phi_a . phi_d(x)) (per warp mode).
    pub warped_final: Var,
}

pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    vars: &BTreeMap<String, Var>,
    cfg: &NetworkConfig,
    img: &NdArray<T>,
    atlas: &NdArray<T>,
    mode: WarpMode,
    two_stage: bool,
) -> ForwardGraph {
    let n = cfg.rank;
    let spatial = img.shape.clone();
    let total: usize = spatial.iter().product();

    let mut chan_shape = vec![1usize];
    chan_shape.extend_from_slice(&spatial);
    let img_c = g.constant(NdArray::from_vec(&chan_shape, img.data.clone()));
    let atlas_c = g.constant(NdArray::from_vec(&chan_shape, atlas.data.clone()));
    let img_sp = g.constant(img.clone());
    let grid = g.constant(identity_grid::<T>(&spatial));

    let theta = if two_stage {
        let input2 = g.concat_c(&[img_c, atlas_c]);
        let theta_norm = affine_stage_graph(g, vars, cfg, input2);
        norm_to_pixel_theta(g, theta_norm, n, spatial[0])
    } else {
        let mut id = vec![T::ZERO; n * (n + 1)];
        for i in 0..n {
            id[i * (n + 1) + i] = T::ONE;
        }
        g.constant(NdArray::from_vec(&[n * (n + 1)], id))
    };

    // I_a = I(phi_a(x)), also the dense stage input.
    let affine_coords = g.affine_points(theta, grid);
    let warped_affine = g.sample_image(img_sp, affine_coords);

    let ia_c = g.reshape(warped_affine, &chan_shape);
    let dense_in = g.concat_c(&[ia_c, atlas_c]);
    let field = dense_stage_graph(g, vars, cfg, dense_in);

    let field_flat = g.reshape(field, &[n, total]);
    let pts = g.add(grid, field_flat);
    let warped_final = match mode {
        WarpMode::Composed => {
            let coords = g.affine_points(theta, pts);
            g.sample_image(img_sp, coords)
        }
        WarpMode::Sequential => {
            let mid = g.reshape(warped_affine, &spatial);
            g.sample_image(mid, pts)
        }
    };

    ForwardGraph {
        theta,
        field,
        warped_affine,
        warped_final,
    }
}

fn theta_to_affine(n: usize, theta: &[f64]) -> AffineMap {
    let k = n + 1;
    let mut m = vec![0.0; k * k];
    m[k * k - 1] = 1.0;
    for i in 0..n {
        for j in 0..k {
            m[i * k + j] = theta[i * k + j];
        }
    }
    AffineMap { n, m }
}

fn field_to_displacement(n: usize, spatial: &[usize], planar: &NdArray<f64>) -> DisplacementField {
    let total: usize = spatial.iter().product();
    let mut data = vec![0.0; total * n];
    for a in 0..n {
        for v in 0..total {
            data[v * n + a] = planar.data[a * total + v];
        }
    }
    DisplacementField {
        spatial: spatial.to_vec(),
        n,
        data,
    }
}

fn check_pair(cfg: &NetworkConfig, img: &GridImage, atlas: &GridImage) -> Result<()> {
    cfg.validate()?;
    if img.shape != atlas.shape {
        return Err(Error::ShapeMismatch(format!(
            "target {:?} vs atlas {:?}",
            img.shape, atlas.shape
        )));
    }
    cfg.check_input_shape(&img.shape)
}

/// Runs the affine stage alone: the raw head vector and the assembled map.
pub fn affine_stage<T: Real>(
    params: &ModelParams<T>,
    img: &GridImage,
    atlas: &GridImage,
) -> Result<(Vec<f64>, AffineMap)> {
    let cfg = &params.config;
    check_pair(cfg, img, atlas)?;
    let mut g: Graph<T> = Graph::new();
    let vars = param_vars(&mut g, params, false);

    let mut chan_shape = vec![1usize];
    chan_shape.extend_from_slice(&img.shape);
    let img_c = g.constant(NdArray::from_vec(
        &chan_shape,
        img.data.iter().map(|&v| T::from_f64(v)).collect(),
    ));
    let atlas_c = g.constant(NdArray::from_vec(
        &chan_shape,
        atlas.data.iter().map(|&v| T::from_f64(v)).collect(),
    ));
    let input2 = g.concat_c(&[img_c, atlas_c]);
    let theta_norm = affine_stage_graph(&mut g, &vars, cfg, input2);
    let theta = norm_to_pixel_theta(&mut g, theta_norm, cfg.rank, img.shape[0]);
    let vec: Vec<f64> = g.value(theta).data.iter().map(|v| v.to_f64()).collect();
    let map = theta_to_affine(cfg.rank, &vec);
    Ok((vec, map))
}

/// Runs the dense stage alone on an affinely registered image.
pub fn dense_stage<T: Real>(
    params: &ModelParams<T>,
    img_a: &GridImage,
    atlas: &GridImage,
) -> Result<DisplacementField> {
    let cfg = &params.config;
    check_pair(cfg, img_a, atlas)?;
    let mut g: Graph<T> = Graph::new();
    let vars = param_vars(&mut g, params, false);

    let mut chan_shape = vec![1usize];
    chan_shape.extend_from_slice(&img_a.shape);
    let a = g.constant(NdArray::from_vec(
        &chan_shape,
        img_a.data.iter().map(|&v| T::from_f64(v)).collect(),
    ));
    let b = g.constant(NdArray::from_vec(
        &chan_shape,
        atlas.data.iter().map(|&v| T::from_f64(v)).collect(),
    ));
    let input2 = g.concat_c(&[a, b]);
    let field = dense_stage_graph(&mut g, &vars, cfg, input2);
    let planar = g.value(field).cast::<f64>();
    Ok(field_to_displacement(cfg.rank, &img_a.shape, &planar))
}

fn run_forward<T: Real>(
    params: &ModelParams<T>,
    img: &GridImage,
    atlas: &GridImage,
    s_a: &BinaryMask,
    mode: WarpMode,
    two_stage: bool,
) -> Result<RegistrationResult> {
    let cfg = &params.config;
    check_pair(cfg, img, atlas)?;
    if s_a.shape != atlas.shape {
        return Err(Error::ShapeMismatch("mask vs atlas".into()));
    }
    let img_t: NdArray<T> = NdArray::from_vec(
        &img.shape,
        img.data.iter().map(|&v| T::from_f64(v)).collect(),
    );
    let atlas_t: NdArray<T> = NdArray::from_vec(
        &atlas.shape,
        atlas.data.iter().map(|&v| T::from_f64(v)).collect(),
    );

    let mut g: Graph<T> = Graph::new();
    let vars = param_vars(&mut g, params, false);
    let fg = forward_graph(&mut g, &vars, cfg, &img_t, &atlas_t, mode, two_stage);

    let n = cfg.rank;
    let theta: Vec<f64> = g.value(fg.theta).data.iter().map(|v| v.to_f64()).collect();
    let affine = theta_to_affine(n, &theta);
    let field = field_to_displacement(n, &img.shape, &g.value(fg.field).cast::<f64>());

    let to_img = |v: Var, g: &Graph<T>| -> GridImage {
        GridImage {
            shape: img.shape.clone(),
            data: g.value(v).data.iter().map(|x| x.to_f64()).collect(),
        }
    };
    let warped_affine = to_img(fg.warped_affine, &g);
    let warped_final = to_img(fg.warped_final, &g);
    let warped_segmented = GridImage {
        shape: img.shape.clone(),
        data: warped_final
            .data
            .iter()
            .zip(&s_a.data)
            .map(|(&v, &m)| v * m as f64)
            .collect(),
    };

    Ok(RegistrationResult {
        affine,
        field,
        warped_affine,
        warped_final,
        warped_segmented,
    })
}

/// Full two-stage forward pass.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    img: &GridImage,
    atlas: &GridImage,
    s_a: &BinaryMask,
    mode: WarpMode,
) -> Result<RegistrationResult> {
    run_forward(params, img, atlas, s_a, mode, true)
}

/// Baseline without the affine stage: phi_a stays the identity and the dense
/// stage sees the raw target.
pub fn dense_only_forward<T: Real>(
    params: &ModelParams<T>,
    img: &GridImage,
    atlas: &GridImage,
    s_a: &BinaryMask,
    mode: WarpMode,
) -> Result<RegistrationResult> {
    run_forward(params, img, atlas, s_a, mode, false)
}
