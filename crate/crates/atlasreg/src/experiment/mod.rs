//! Training loop, target registration error, evaluation and hyperparameter
//! sweeps over the loss lambdas.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    displace_points, AffineMap, BinaryMask, DisplacementField, GridImage, LandmarkSet, WarpMode,
};
use crate::losses::{LossConfig, WeightMap};
use crate::nd::NdArray;
use crate::network::checkpoint::{self, LoadedParams};
use crate::network::{
    self, forward_graph, init_params, param_vars, ModelParams, NetworkConfig, RegistrationResult,
};
use crate::synthgen::{self, DatasetManifest, SampleEntry};
use crate::tape::loss::total_loss_graph;
use crate::tape::real::Real;
use crate::tape::Graph;

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;

/// The four config sections of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetBundle {
    pub synth: crate::synthgen::SynthConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

/// Desk-scale preset: 128^2 images, 1500 training samples, 250 epochs, a
/// slimmer network and f32 arithmetic so a run fits on a workstation CPU.
pub fn desk_preset() -> PresetBundle {
    PresetBundle {
        synth: crate::synthgen::SynthConfig {
            counts: crate::synthgen::SplitCounts {
                train: 1500,
                val: 100,
                test: 100,
            },
            ..Default::default()
        },
        network: NetworkConfig {
            encoder_channels_affine: vec![8, 16, 32, 32],
            fc_widths: vec![64, 64],
            encoder_channels_dense: vec![8, 16, 16, 16],
            decoder_channels_dense: vec![16, 16, 16, 8, 8],
            ..NetworkConfig::default()
        },
        train: TrainConfig {
            epochs: 250,
            learning_rate: 3e-4,
            precision: Precision::F32,
            ..TrainConfig::default()
        },
        loss: LossConfig {
            lambda_diffusion: 0.8,
            lambda_scaling: 0.0,
            ..LossConfig::default()
        },
    }
}

/// Full-scale preset: 3000 training samples, 500 epochs, the default
/// network widths.
pub fn paper_preset() -> PresetBundle {
    PresetBundle {
        synth: crate::synthgen::SynthConfig::default(),
        network: NetworkConfig::default(),
        train: TrainConfig {
            epochs: 500,
            learning_rate: 1e-4,
            precision: Precision::F32,
            ..TrainConfig::default()
        },
        loss: LossConfig {
            lambda_diffusion: 0.8,
            lambda_scaling: 0.0,
            ..LossConfig::default()
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TwoStage,
    DenseOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub warp_mode: WarpMode,
    pub model_kind: ModelKind,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 1,
            epochs: 500,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            warp_mode: WarpMode::Sequential,
            model_kind: ModelKind::TwoStage,
            precision: Precision::F64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if self.epochs == 0 {
            // epochs == 0 is allowed operationally (returns the init) but a
            // config asking for training should have at least one epoch.
        }
        if self.batch_size != 1 {
            return Err(Error::invalid("only batch_size 1 is supported"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::invalid("adam betas must be in (0,1)"));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub step: usize,
    pub sim: f64,
    pub diffusion: f64,
    pub scaling: f64,
    pub total: f64,
}

pub fn curves_to_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("epoch,step,sim,diffusion,scaling,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.step, r.sim, r.diffusion, r.scaling, r.total
        ));
    }
    out
}

/// A trained model in its training precision.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    F32(ModelParams<f32>),
    F64(ModelParams<f64>),
}

impl TrainedModel {
    pub fn config(&self) -> &NetworkConfig {
        match self {
            TrainedModel::F32(p) => &p.config,
            TrainedModel::F64(p) => &p.config,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            TrainedModel::F32(p) => checkpoint::save(p, path),
            TrainedModel::F64(p) => checkpoint::save(p, path),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(match checkpoint::load(path)? {
            LoadedParams::F32(p) => TrainedModel::F32(p),
            LoadedParams::F64(p) => TrainedModel::F64(p),
        })
    }

    pub fn infer(
        &self,
        kind: ModelKind,
        img: &GridImage,
        atlas: &GridImage,
        mask: &BinaryMask,
        mode: WarpMode,
    ) -> Result<RegistrationResult> {
        match (self, kind) {
            (TrainedModel::F32(p), ModelKind::TwoStage) => {
                network::forward(p, img, atlas, mask, mode)
            }
            (TrainedModel::F32(p), ModelKind::DenseOnly) => {
                network::dense_only_forward(p, img, atlas, mask, mode)
            }
            (TrainedModel::F64(p), ModelKind::TwoStage) => {
                network::forward(p, img, atlas, mask, mode)
            }
            (TrainedModel::F64(p), ModelKind::DenseOnly) => {
                network::dense_only_forward(p, img, atlas, mask, mode)
            }
        }
    }
}

/// A dataset directory opened for training/evaluation.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub atlas: GridImage,
    pub mask: BinaryMask,
    pub landmarks: LandmarkSet,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = synthgen::load_manifest(root)?;
        let bundle = synthgen::load_atlas(root, &manifest)?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            atlas: bundle.atlas,
            mask: bundle.mask,
            landmarks: bundle.landmarks,
        })
    }

    pub fn split(&self, name: &str) -> Result<&[SampleEntry]> {
        self.manifest.split(name)
    }

    pub fn target(&self, entry: &SampleEntry) -> Result<GridImage> {
        synthgen::load_target(&self.root, entry)
    }

    pub fn sample(&self, entry: &SampleEntry) -> Result<synthgen::SamplePair> {
        synthgen::load_sample(&self.root, entry)
    }
}

/// Per-epoch observer; receives the epoch index, that epoch's mean loss and
/// a snapshot of the current model.
pub type EpochHook<'a> = Option<&'a mut dyn FnMut(usize, f64, &TrainedModel)>;

struct Adam<T: Real> {
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
}

impl<T: Real> Adam<T> {
    fn new(params: &ModelParams<T>, cfg: &TrainConfig) -> Self {
        let zeros = |p: &ModelParams<T>| -> BTreeMap<String, Vec<T>> {
            p.arrays
                .iter()
                .map(|(k, a)| (k.clone(), vec![T::ZERO; a.len()]))
                .collect()
        };
        Adam {
            m: zeros(params),
            v: zeros(params),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_epsilon,
            lr: cfg.learning_rate,
        }
    }

    fn step(&mut self, params: &mut ModelParams<T>, grads: &BTreeMap<String, NdArray<T>>) {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let c1 = T::from_f64(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let c2 = T::from_f64(1.0 / (1.0 - self.beta2.powi(self.t as i32)));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);

        for (name, g) in grads {
            let p = params.arrays.get_mut(name).expect("unknown param");
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                let m_hat = m[i] * c1;
                let v_hat = v[i] * c2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

fn shuffled_order(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn train_typed<T: Real>(
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    ds: &Dataset,
    wrap: impl Fn(ModelParams<T>) -> TrainedModel,
    mut hook: EpochHook,
) -> Result<(TrainedModel, Vec<CurveRow>)> {
    let mut params: ModelParams<T> = init_params(net_cfg, train_cfg.seed)?;
    let entries = ds.split("train")?;
    let mut curves = Vec::with_capacity(train_cfg.epochs * entries.len());
    if train_cfg.epochs == 0 || entries.is_empty() {
        return Ok((wrap(params), curves));
    }

    let two_stage = train_cfg.model_kind == ModelKind::TwoStage;
    let w = WeightMap::from_mask(&ds.mask);
    let spatial = ds.atlas.shape.clone();
    let total: usize = spatial.iter().product();
    let atlas_t: NdArray<T> = NdArray::from_vec(
        &spatial,
        ds.atlas.data.iter().map(|&v| T::from_f64(v)).collect(),
    );
    let atlas_flat_data: Vec<T> = atlas_t.data.clone();

    // All training targets resident in the training precision.
    let targets: Vec<NdArray<T>> = entries
        .iter()
        .map(|e| {
            let img = ds.target(e)?;
            if img.shape != spatial {
                return Err(Error::ShapeMismatch("target vs atlas shape".into()));
            }
            Ok(NdArray::from_vec(
                &spatial,
                img.data.iter().map(|&v| T::from_f64(v)).collect(),
            ))
        })
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(&params, train_cfg);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ SHUFFLE_SALT);

    for epoch in 0..train_cfg.epochs {
        let order = shuffled_order(&mut shuffle_rng, targets.len());
        let mut epoch_loss = 0.0;
        for (step, &si) in order.iter().enumerate() {
            let mut g: Graph<T> = Graph::new();
            let vars = param_vars(&mut g, &params, true);
            let fg = forward_graph(
                &mut g,
                &vars,
                net_cfg,
                &targets[si],
                &atlas_t,
                train_cfg.warp_mode,
                two_stage,
            );
            let atlas_flat = g.constant(NdArray::from_vec(&[total], atlas_flat_data.clone()));
            let (lt, ls, ld, lp) =
                total_loss_graph(&mut g, atlas_flat, fg.warped_final, fg.field, fg.theta, &w, loss_cfg);

            let loss_val = g.scalar_value(lt);
            if !loss_val.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            curves.push(CurveRow {
                epoch,
                step,
                sim: g.scalar_value(ls),
                diffusion: g.scalar_value(ld),
                scaling: g.scalar_value(lp),
                total: loss_val,
            });
            epoch_loss += loss_val;

            let grads = g.backward(lt);
            let named: BTreeMap<String, NdArray<T>> = vars
                .iter()
                .filter_map(|(name, var)| grads[var.0].clone().map(|g| (name.clone(), g)))
                .collect();
            adam.step(&mut params, &named);
        }
        if let Some(h) = hook.as_mut() {
            let snapshot = wrap(params.clone());
            h(epoch, epoch_loss / targets.len() as f64, &snapshot);
        }
    }
    Ok((wrap(params), curves))
}

/// Trains one model on the dataset's train split. Deterministic for a fixed
/// seed: initialization, per-epoch data order and every update are seeded.
pub fn train(
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    ds: &Dataset,
    hook: EpochHook,
) -> Result<(TrainedModel, Vec<CurveRow>)> {
    train_cfg.validate()?;
    loss_cfg.validate()?;
    match train_cfg.precision {
        Precision::F32 => train_typed::<f32>(net_cfg, train_cfg, loss_cfg, ds, TrainedModel::F32, hook),
        Precision::F64 => train_typed::<f64>(net_cfg, train_cfg, loss_cfg, ds, TrainedModel::F64, hook),
    }
}

/// Landmark-chain registration error: each point goes through the predicted
/// transforms then the stored ground-truth inverses; the distance back to the
/// start is the error. The ground-truth field is interpolated with zero
/// extension off its grid.
pub fn tre(
    gt_affine_inv: &AffineMap,
    gt_field_inv: &DisplacementField,
    pred_affine: &AffineMap,
    pred_field: &DisplacementField,
    landmarks: &LandmarkSet,
) -> Result<(f64, Vec<f64>)> {
    let n = landmarks.n;
    // Innermost first: y = pred_affine (x + pred_field(x)).
    let moved = displace_points(pred_field, landmarks)?;
    let mut per_point = Vec::with_capacity(landmarks.count());
    for (x, yin) in landmarks.iter().zip(moved.iter()) {
        let y = pred_affine.apply(yin);
        let d = gt_field_inv.interp_at(&y);
        let z_in: Vec<f64> = (0..n).map(|a| y[a] + d[a]).collect();
        let z = gt_affine_inv.apply(&z_in);
        let err: f64 = (0..n).map(|a| (z[a] - x[a]).powi(2)).sum::<f64>().sqrt();
        per_point.push(err);
    }
    let mean = per_point.iter().sum::<f64>() / per_point.len() as f64;
    Ok((mean, per_point))
}

/// Per-split registration error statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TREReport {
    pub split: String,
    pub per_sample: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl TREReport {
    fn from_values(split: &str, per_sample: Vec<f64>) -> Self {
        let n = per_sample.len();
        let mean = per_sample.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (per_sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        TREReport {
            split: split.to_string(),
            per_sample,
            mean,
            std,
        }
    }
}

fn evaluate_with(
    ds: &Dataset,
    split: &str,
    mut predict: impl FnMut(&GridImage) -> Result<(AffineMap, DisplacementField)>,
) -> Result<TREReport> {
    let entries = ds.split(split)?;
    if entries.is_empty() {
        return Err(Error::invalid(format!("split '{split}' is empty")));
    }
    let mut per_sample = Vec::with_capacity(entries.len());
    for entry in entries {
        let pair = ds.sample(entry)?;
        let (pred_affine, pred_field) = predict(&pair.target)?;
        let (mean, _) = tre(
            &pair.gt_affine_inv,
            &pair.gt_field_inv,
            &pred_affine,
            &pred_field,
            &ds.landmarks,
        )?;
        per_sample.push(mean);
    }
    Ok(TREReport::from_values(split, per_sample))
}

/// Runs the model over a split and aggregates per-sample mean TRE.
pub fn evaluate(
    model: &TrainedModel,
    kind: ModelKind,
    ds: &Dataset,
    split: &str,
) -> Result<TREReport> {
    evaluate_with(ds, split, |target| {
        let r = model.infer(kind, target, &ds.atlas, &ds.mask, WarpMode::Composed)?;
        Ok((r.affine, r.field))
    })
}

/// Mean scaling penalty of the predicted affines over a split.
pub fn mean_scaling_penalty(
    model: &TrainedModel,
    kind: ModelKind,
    ds: &Dataset,
    split: &str,
) -> Result<f64> {
    let entries = ds.split(split)?;
    if entries.is_empty() {
        return Err(Error::invalid(format!("split '{split}' is empty")));
    }
    let mut acc = 0.0;
    for entry in entries {
        let target = ds.target(entry)?;
        let r = model.infer(kind, &target, &ds.atlas, &ds.mask, WarpMode::Composed)?;
        acc += crate::losses::scaling_penalty(&r.affine);
    }
    Ok(acc / entries.len() as f64)
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub model_kind: ModelKind,
    pub lambda_diffusion: f64,
    pub lambda_scaling: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub train: Option<(f64, f64)>,
    pub val: Option<(f64, f64)>,
    pub test: Option<(f64, f64)>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("model_kind,lambda_diffusion,lambda_scaling,split,tre_mean,tre_std,n\n");
        for r in &self.rows {
            let kind = match r.cell.model_kind {
                ModelKind::TwoStage => "two_stage",
                ModelKind::DenseOnly => "dense_only",
            };
            for (split, stats) in [("train", r.train), ("val", r.val), ("test", r.test)] {
                if let Some((mean, std)) = stats {
                    out.push_str(&format!(
                        "{kind},{},{},{split},{mean},{std},1\n",
                        r.cell.lambda_diffusion, r.cell.lambda_scaling
                    ));
                }
            }
            if let Some(err) = &r.error {
                out.push_str(&format!(
                    "{kind},{},{},error,,,{}\n",
                    r.cell.lambda_diffusion,
                    r.cell.lambda_scaling,
                    err.replace(',', ";")
                ));
            }
        }
        out
    }
}

/// Directory-friendly identifier for a sweep cell.
pub fn cell_id(cell: &SweepCell) -> String {
    let kind = match cell.model_kind {
        ModelKind::TwoStage => "two_stage",
        ModelKind::DenseOnly => "dense_only",
    };
    format!(
        "{kind}_d{}_s{}",
        cell.lambda_diffusion, cell.lambda_scaling
    )
}

/// Trains one model per grid cell (shared seed), evaluates train/val for
/// every cell and test only for the best-val cell. Cell failures are
/// recorded and the sweep continues. With a run directory, each cell's
/// checkpoint and loss curves land under `<dir>/<cell-id>/`.
pub fn sweep(
    cells: &[SweepCell],
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    ds: &Dataset,
    jobs: usize,
    run_dir: Option<&Path>,
) -> Result<SweepTable> {
    if cells.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    let jobs = jobs.max(1);

    let run_cell = |cell: &SweepCell| -> (SweepRow, Option<TrainedModel>) {
        let mut tc = train_cfg.clone();
        tc.model_kind = cell.model_kind;
        let mut lc = loss_cfg.clone();
        lc.lambda_diffusion = cell.lambda_diffusion;
        lc.lambda_scaling = cell.lambda_scaling;
        let outcome = train(net_cfg, &tc, &lc, ds, None).and_then(|(model, curves)| {
            if let Some(dir) = run_dir {
                let cell_dir = dir.join(cell_id(cell));
                std::fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
                model.save(&cell_dir.join("checkpoint.ckpt"))?;
                std::fs::write(cell_dir.join("curves.csv"), curves_to_csv(&curves))
                    .map_err(|e| Error::io(&cell_dir, e))?;
            }
            let train_rep = evaluate(&model, cell.model_kind, ds, "train")?;
            let val_rep = evaluate(&model, cell.model_kind, ds, "val")?;
            Ok((model, train_rep, val_rep))
        });
        match outcome {
            Ok((model, train_rep, val_rep)) => (
                SweepRow {
                    cell: *cell,
                    train: Some((train_rep.mean, train_rep.std)),
                    val: Some((val_rep.mean, val_rep.std)),
                    test: None,
                    error: None,
                },
                Some(model),
            ),
            Err(e) => (
                SweepRow {
                    cell: *cell,
                    train: None,
                    val: None,
                    test: None,
                    error: Some(e.to_string()),
                },
                None,
            ),
        }
    };

    // Cells are independent; run them on a small worker pool.
    let results: Vec<(SweepRow, Option<TrainedModel>)> = if jobs == 1 {
        cells.iter().map(run_cell).collect()
    } else {
        std::thread::scope(|scope| {
            let chunks: Vec<&[SweepCell]> = cells.chunks(cells.len().div_ceil(jobs)).collect();
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| scope.spawn(move || chunk.iter().map(run_cell).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        })
    };

    let mut rows: Vec<SweepRow> = Vec::with_capacity(results.len());
    let mut models: Vec<Option<TrainedModel>> = Vec::with_capacity(results.len());
    for (row, model) in results {
        rows.push(row);
        models.push(model);
    }

    // Test only the configuration chosen on validation.
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.val.map(|(mean, _)| (i, mean)))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    if let Some((i, _)) = best {
        if let Some(model) = &models[i] {
            let test_rep = evaluate(model, rows[i].cell.model_kind, ds, "test")?;
            rows[i].test = Some((test_rep.mean, test_rep.std));
        }
    }
    Ok(SweepTable { rows })
}
