//! Global learning: choose training cells, evaluate the losses on the
//! network, and run the per-frame optimization loop.

use std::time::Instant;

use log::warn;
use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fusion::{integrate_frame, FusionConfig, GridStore, SurfaceSet};
use crate::mlpfield::{
    adam_step, forward_with_gradient, loss_gradients, AdamConfig, AdamState, EmbeddingConfig, FieldParams,
    NetworkConfig, PointLoss, PointLossEval, Real,
};
use crate::sampling::{block_irregularity, normal_render_from, pixel_normals, sample_pixels, sample_points, SamplingConfig};
use crate::scene::DepthFrame;
use crate::{Error, Result};

/// Guards the cosine denominator against zero-length vectors.
pub const COSINE_EPS: f64 = 1e-8;

/// Loss weights and the per-frame training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Cells with `|D|` below this are near-surface, meters.
    pub truncation: f64,
    /// Sharpness of the exponential penalty on negative free-space predictions.
    pub beta: f64,
    pub near_surface_weight: f64,
    pub grad_weight: f64,
    pub eikonal_weight: f64,
    /// Optimization iterations per frame.
    pub iterations: usize,
    /// History cells drawn per iteration.
    pub history_samples: usize,
    pub disable_current_grids: bool,
    pub disable_history_grids: bool,
    /// Apply the gradient-direction loss to near-surface cells only.
    pub grad_near_surface_only: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            truncation: 0.10,
            beta: 5.0,
            near_surface_weight: 3.38,
            grad_weight: 0.00018,
            eikonal_weight: 0.0268,
            iterations: 10,
            history_samples: 2048,
            disable_current_grids: false,
            disable_history_grids: false,
            grad_near_surface_only: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        if !(self.truncation > 0.0 && self.truncation.is_finite()) {
            return Err(Error::config(key("truncation"), "must be positive"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config(key("beta"), "must be positive"));
        }
        for (k, v) in [
            ("near_surface_weight", self.near_surface_weight),
            ("grad_weight", self.grad_weight),
            ("eikonal_weight", self.eikonal_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key(k), "must be non-negative"));
            }
        }
        if self.iterations == 0 {
            return Err(Error::config(key("iterations"), "must be at least 1"));
        }
        if self.disable_current_grids && self.disable_history_grids {
            return Err(Error::config(
                key("disable_history_grids"),
                "current and history grids cannot both be disabled",
            ));
        }
        if !self.disable_history_grids && self.history_samples == 0 {
            return Err(Error::config(key("history_samples"), "must be at least 1"));
        }
        Ok(())
    }

    fn is_near(&self, d: f64) -> bool {
        d.abs() < self.truncation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridSource {
    Current,
    History,
}

/// One supervised cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainItem {
    pub center: [f64; 3],
    pub distance: f64,
    /// Unit fused gradient, or zero when the fused directions cancelled.
    pub gradient: [f64; 3],
    pub near_surface: bool,
    pub source: GridSource,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainBatch {
    pub items: Vec<TrainItem>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count(&self, source: GridSource) -> usize {
        self.items.iter().filter(|i| i.source == source).count()
    }

    pub fn centers<T: Real>(&self) -> Vec<[T; 3]> {
        self.items.iter().map(|i| i.center.map(T::from_f64)).collect()
    }
}

/// All cells of the current frame plus `history_samples` cells drawn
/// uniformly without replacement from every cell ever updated. A history draw
/// that is also a current cell is kept once, labelled current.
pub fn select_train_grids<R: Rng + ?Sized>(store: &GridStore, cfg: &LossConfig, rng: &mut R) -> Result<TrainBatch> {
    if store.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let item = |idx: &[i64; 3], source| {
        let cell = store.get(idx).expect("indexed cell exists");
        let center = store.cell_center(idx);
        TrainItem {
            center: [center.x, center.y, center.z],
            distance: cell.distance,
            gradient: cell.unit_gradient().into(),
            near_surface: cfg.is_near(cell.distance),
            source,
        }
    };
    let mut items = Vec::new();
    if !cfg.disable_current_grids {
        items.extend(store.current().iter().map(|idx| item(idx, GridSource::Current)));
    }
    if !cfg.disable_history_grids {
        let n = cfg.history_samples.min(store.len());
        for i in sample(rng, store.len(), n).into_iter() {
            let (idx, _) = store.history_at(i).expect("index in range");
            if cfg.disable_current_grids || !store.current().contains(idx) {
                items.push(item(idx, GridSource::History));
            }
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(TrainBatch { items })
}

/// Per-cell distance loss: `λ_ns |f − D|` near the surface, otherwise
/// `max(0, e^{−βf} − 1, f − D)`.
pub fn sdf_loss(pred: f64, distance: f64, cfg: &LossConfig) -> f64 {
    sdf_loss_and_slope(pred, distance, cfg).0
}

fn sdf_loss_and_slope(pred: f64, distance: f64, cfg: &LossConfig) -> (f64, f64) {
    if cfg.is_near(distance) {
        let r = pred - distance;
        let slope = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        return (cfg.near_surface_weight * r.abs(), cfg.near_surface_weight * slope);
    }
    let exp = (-cfg.beta * pred).exp();
    let (neg, over) = (exp - 1.0, pred - distance);
    if neg > 0.0 && neg >= over {
        (neg, -cfg.beta * exp)
    } else if over > 0.0 {
        (over, 1.0)
    } else {
        (0.0, 0.0)
    }
}

/// Cosine distance `1 − ⟨g, G⟩ / (‖g‖‖G‖ + ε)`.
pub fn grad_loss(pred_grad: &[f64; 3], target: &[f64; 3]) -> f64 {
    grad_loss_and_slope(&Vector3::from(*pred_grad), &Vector3::from(*target)).0
}

fn grad_loss_and_slope(g: &Vector3<f64>, target: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let (ng, nt) = (g.norm(), target.norm());
    let denom = ng * nt + COSINE_EPS;
    let dot = g.dot(target);
    let mut slope = -target / denom;
    if ng > 0.0 {
        slope += g * (dot * nt / (ng * denom * denom));
    }
    (1.0 - dot / denom, slope)
}

/// `|‖g‖ − 1|` in free space, zero near the surface.
pub fn eik_loss(pred_grad: &[f64; 3], distance: f64, cfg: &LossConfig) -> f64 {
    eik_loss_and_slope(&Vector3::from(*pred_grad), distance, cfg).0
}

fn eik_loss_and_slope(g: &Vector3<f64>, distance: f64, cfg: &LossConfig) -> (f64, Vector3<f64>) {
    if cfg.is_near(distance) {
        return (0.0, Vector3::zeros());
    }
    let n = g.norm();
    let r = n - 1.0;
    let slope = if n > 0.0 && r != 0.0 { g * (r.signum() / n) } else { Vector3::zeros() };
    (r.abs(), slope)
}

/// Batch means of the three loss terms and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sdf: f64,
    pub grad: f64,
    pub eik: f64,
    pub total: f64,
}

/// Full per-item loss and its derivatives.
fn item_loss(item: &TrainItem, pred: f64, grad: &Vector3<f64>, cfg: &LossConfig) -> PointLossEval<f64> {
    let (sdf, d_pred) = sdf_loss_and_slope(pred, item.distance, cfg);
    let target = Vector3::from(item.gradient);
    let use_grad = target.norm() > 0.0 && (item.near_surface || !cfg.grad_near_surface_only);
    let (g_loss, g_slope) = if use_grad {
        grad_loss_and_slope(grad, &target)
    } else {
        (0.0, Vector3::zeros())
    };
    let (e_loss, e_slope) = eik_loss_and_slope(grad, item.distance, cfg);
    let d_grad = g_slope * cfg.grad_weight + e_slope * cfg.eikonal_weight;
    PointLossEval {
        value: sdf + cfg.grad_weight * g_loss + cfg.eikonal_weight * e_loss,
        terms: [sdf, g_loss, e_loss],
        d_pred,
        d_grad: d_grad.into(),
    }
}

struct BatchLoss<'a> {
    items: &'a [TrainItem],
    cfg: &'a LossConfig,
}

impl<T: Real> PointLoss<T> for BatchLoss<'_> {
    fn eval(&self, index: usize, pred: T, grad: [T; 3]) -> PointLossEval<T> {
        let g = Vector3::from(grad.map(Real::to_f64));
        let e = item_loss(&self.items[index], Real::to_f64(pred), &g, self.cfg);
        PointLossEval {
            value: T::from_f64(e.value),
            terms: e.terms.map(T::from_f64),
            d_pred: T::from_f64(e.d_pred),
            d_grad: e.d_grad.map(T::from_f64),
        }
    }
}

fn breakdown(terms: [f64; 3], cfg: &LossConfig) -> LossBreakdown {
    LossBreakdown {
        sdf: terms[0],
        grad: terms[1],
        eik: terms[2],
        total: terms[0] + cfg.grad_weight * terms[1] + cfg.eikonal_weight * terms[2],
    }
}

/// Mean loss of the network on `batch`.
pub fn total_loss<T: Real>(batch: &TrainBatch, params: &FieldParams<T>, cfg: &LossConfig) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (pred, grad) = forward_with_gradient(params, &batch.centers::<T>())?;
    let mut terms = [0.0; 3];
    for (i, item) in batch.items.iter().enumerate() {
        let g = Vector3::from(grad[i].map(Real::to_f64));
        let e = item_loss(item, Real::to_f64(pred[i]), &g, cfg);
        for j in 0..3 {
            terms[j] += e.terms[j];
        }
    }
    let n = batch.len() as f64;
    Ok(breakdown(terms.map(|t| t / n), cfg))
}

/// Mean loss on `batch` and its gradient with respect to every parameter.
pub fn batch_gradients<T: Real>(
    batch: &TrainBatch,
    params: &FieldParams<T>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<T>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let loss = BatchLoss {
        items: &batch.items,
        cfg,
    };
    let lg = loss_gradients(params, &batch.centers::<T>(), &loss)?;
    Ok((breakdown(lg.terms, cfg), lg.grads))
}

/// One optimizer update on `batch`; returns the loss before the update.
pub fn train_step<T: Real>(
    batch: &TrainBatch,
    params: &mut FieldParams<T>,
    adam: &mut AdamState<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let (loss, grads) = batch_gradients(batch, params, cfg)?;
    adam_step(params, &grads, adam)?;
    Ok(loss)
}

/// Configuration of the whole mapping pipeline.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub sampling: SamplingConfig,
    pub fusion: FusionConfig,
    pub embedding: EmbeddingConfig,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampling.validate("sampling")?;
        self.fusion.validate("fusion")?;
        self.embedding.validate("embedding")?;
        self.network.validate("network")?;
        self.loss.validate("loss")?;
        self.optimizer.validate("optimizer")
    }
}

const STREAM_INIT: u64 = 0;
const STREAM_SAMPLING: u64 = 1;
const STREAM_TRAINING: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Summary of one processed frame, one line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame: usize,
    /// Set when the frame contributed nothing; holds the reason.
    pub skipped: Option<String>,
    pub pixels: usize,
    pub fused_points: usize,
    pub current_cells: usize,
    pub history_cells: usize,
    pub batch_sizes: Vec<usize>,
    pub losses: Vec<LossBreakdown>,
    pub seconds: f64,
}

impl FrameReport {
    fn skipped(frame: usize, reason: String, history_cells: usize) -> Self {
        Self {
            frame,
            skipped: Some(reason),
            pixels: 0,
            fused_points: 0,
            current_cells: 0,
            history_cells,
            batch_sizes: Vec::new(),
            losses: Vec::new(),
            seconds: 0.0,
        }
    }
}

/// Full mapping state: the grid, the network and its optimizer, and the
/// random streams, all derived from one seed.
#[derive(Debug, Clone)]
pub struct Pipeline<T: Real> {
    config: PipelineConfig,
    params: FieldParams<T>,
    adam: AdamState<T>,
    store: GridStore,
    sampling_rng: ChaCha8Rng,
    training_rng: ChaCha8Rng,
    frames: usize,
}

impl<T: Real> Pipeline<T> {
    pub fn new(config: PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = FieldParams::init(
            config.embedding.clone(),
            config.network.clone(),
            &mut stream_rng(seed, STREAM_INIT),
        );
        let adam = AdamState::new(config.optimizer.clone(), params.len());
        let store = GridStore::from_config(&config.fusion);
        Ok(Self {
            config,
            params,
            adam,
            store,
            sampling_rng: stream_rng(seed, STREAM_SAMPLING),
            training_rng: stream_rng(seed, STREAM_TRAINING),
            frames: 0,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn params(&self) -> &FieldParams<T> {
        &self.params
    }

    pub fn store(&self) -> &GridStore {
        &self.store
    }

    /// Frames that have been integrated.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Samples, fuses and trains on one frame. A frame without valid pixels
    /// is skipped and reported as such.
    pub fn train_frame(&mut self, frame: &DepthFrame) -> Result<FrameReport> {
        let start = Instant::now();
        frame.validate()?;
        if frame.valid_count() == 0 {
            warn!("frame {}: no valid pixels, skipped", frame.index);
            return Ok(FrameReport::skipped(frame.index, "no valid pixels".into(), self.store.len()));
        }
        let cfg = &self.config;
        let normals = pixel_normals(frame);
        let cosines = normal_render_from(frame, &normals);
        let xi = block_irregularity(frame, &cosines, &cfg.sampling);
        let selection = sample_pixels(frame, &xi, &cfg.sampling, &mut self.sampling_rng)?;
        let rays = selection
            .pixels
            .iter()
            .map(|&p| sample_points(p, frame, &cfg.sampling, &mut self.sampling_rng))
            .collect::<Result<Vec<_>>>()?;
        let w = frame.width();
        let surface = SurfaceSet::from_rays(&rays, |(u, v)| normals[v * w + u]);
        let fused = integrate_frame(&mut self.store, &rays, &surface, &cfg.fusion, frame.index)?;
        self.frames += 1;

        let mut batch_sizes = Vec::with_capacity(cfg.loss.iterations);
        let mut losses = Vec::with_capacity(cfg.loss.iterations);
        for _ in 0..cfg.loss.iterations {
            let batch = select_train_grids(&self.store, &cfg.loss, &mut self.training_rng)?;
            batch_sizes.push(batch.len());
            losses.push(train_step(&batch, &mut self.params, &mut self.adam, &cfg.loss)?);
        }
        Ok(FrameReport {
            frame: frame.index,
            skipped: None,
            pixels: selection.pixels.len(),
            fused_points: fused,
            current_cells: self.store.current().len(),
            history_cells: self.store.len(),
            batch_sizes,
            losses,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

fn is_frame_data_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Frame { .. }
            | Error::InvalidPose(_)
            | Error::InvalidCamera(_)
            | Error::NoValidPixels
            | Error::InvalidPixel { .. }
            | Error::SurfaceTooClose { .. }
    )
}

/// Trains on `frames` in order. After every `checkpoint_every` processed
/// stream items, and after the last one, `on_checkpoint` is called with the
/// pipeline and the number of items consumed so far. Unreadable or invalid
/// frames are skipped and reported; other errors abort.
pub fn run_sequence<T: Real, I, F>(
    pipeline: &mut Pipeline<T>,
    frames: I,
    checkpoint_every: usize,
    mut on_frame: impl FnMut(&FrameReport) -> Result<()>,
    mut on_checkpoint: F,
) -> Result<usize>
where
    I: IntoIterator<Item = Result<DepthFrame>>,
    F: FnMut(&Pipeline<T>, usize) -> Result<()>,
{
    if checkpoint_every == 0 {
        return Err(Error::config("checkpoint_every", "must be at least 1"));
    }
    let mut frames = frames.into_iter().peekable();
    if frames.peek().is_none() {
        return Err(Error::EmptyStream);
    }
    let mut count = 0;
    let mut checkpoints = 0;
    while let Some(item) = frames.next() {
        let report = match item.and_then(|f| pipeline.train_frame(&f)) {
            Ok(r) => r,
            Err(e) if is_frame_data_error(&e) => {
                warn!("stream item {count}: {e}; skipped");
                FrameReport::skipped(count, e.to_string(), pipeline.store.len())
            }
            Err(e) => return Err(e),
        };
        on_frame(&report)?;
        count += 1;
        if count % checkpoint_every == 0 || frames.peek().is_none() {
            on_checkpoint(pipeline, count)?;
            checkpoints += 1;
        }
    }
    Ok(checkpoints)
}
