//! Run configuration and the commands built on it: `run`, `eval`, `ablate`
//! and `render-dataset`.
//!
//! Everything random derives from [`RunConfig::seed`]. Every file written
//! here goes through a write-then-rename, so an interrupted run never leaves
//! a truncated artifact behind.

use std::cell::RefCell;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::evalout::{evaluate, export_slice, extract_mesh, EvalConfig, EvalRegion, MetricsReport};
use crate::fusion::FusionConfig;
use crate::io_util::{read_to_string, write_atomic};
use crate::mlpfield::{
    checkpoint_dtype, load_checkpoint, save_checkpoint, AdamConfig, Dtype, EmbeddingConfig, FieldParams,
    NetworkConfig, Real,
};
use crate::sampling::{PixelMode, SamplingConfig};
use crate::scene::{
    generate_trajectory, load_dataset, render_depth, save_dataset, CameraModel, DepthFrame, Primitive,
    RenderOptions, Scene, TrajectoryPolicy,
};
use crate::trainer::{run_sequence, FrameReport, LossConfig, Pipeline, PipelineConfig};
use crate::{Error, Result};

/// Offset mixed into the run seed for evaluation sampling.
const EVAL_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;
/// Offset mixed into the run seed for depth noise.
const NOISE_SEED_MIX: u64 = 0xD1B5_4A32_D192_ED03;

/// Seed used for the evaluation samples of a run seeded with `seed`.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ EVAL_SEED_MIX
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenePreset {
    /// [`Scene::demo_room`].
    DemoRoom,
}

/// A scene built from an optional preset plus extra primitives.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub preset: Option<ScenePreset>,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn build(&self, key: &str) -> Result<Scene> {
        let mut scene = match self.preset {
            Some(ScenePreset::DemoRoom) => Scene::demo_room(),
            None => Scene::new(Vec::new()),
        };
        scene.primitives.extend(self.primitives.iter().cloned());
        scene.validate().map_err(|e| match e {
            Error::Config { key: k, reason } => Error::config(format!("{key}{}", k.trim_start_matches("scene")), reason),
            other => other,
        })?;
        Ok(scene)
    }
}

/// Symmetric pinhole camera described by its field of view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, degrees.
    pub hfov_deg: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            hfov_deg: 70.0,
            near: 0.05,
            far: 8.0,
        }
    }
}

impl CameraSpec {
    pub fn model(&self) -> CameraModel {
        CameraModel::with_fov(self.width, self.height, self.hfov_deg, self.near, self.far)
    }

    fn validate(&self, key: &str) -> Result<()> {
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return Err(Error::config(format!("{key}.hfov_deg"), "must lie in (0, 180)"));
        }
        self.model()
            .validate()
            .map_err(|e| Error::config(key, e.to_string()))
    }
}

/// Frames rendered on the fly from an analytic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    pub scene: SceneSpec,
    pub camera: CameraSpec,
    pub trajectory: TrajectoryPolicy,
    pub frames: usize,
    /// Minimum distance from every camera position to the nearest surface, meters.
    pub clearance: f64,
    pub surface_tolerance: f64,
    pub max_steps: usize,
    /// Gaussian depth noise, meters; 0 renders noiseless depth.
    pub noise_std: f64,
    /// Meters per stored unit when materialized with `render-dataset`.
    pub depth_scale: f64,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        let render = RenderOptions::default();
        Self {
            scene: SceneSpec {
                preset: Some(ScenePreset::DemoRoom),
                primitives: Vec::new(),
            },
            camera: CameraSpec::default(),
            trajectory: TrajectoryPolicy::Orbit {
                center: [0.0, 0.0, 1.5],
                radius: 1.6,
                height: 0.0,
                start_deg: 0.0,
                sweep_deg: 360.0,
                target: Some([0.0, 0.0, 0.8]),
            },
            frames: 100,
            clearance: 0.2,
            surface_tolerance: render.surface_tolerance,
            max_steps: render.max_steps,
            noise_std: render.noise_std,
            depth_scale: 2e-4,
        }
    }
}

/// Frames read from a dataset directory. `scene` is the ground truth used
/// for metrics; when absent, `scene.json` inside the directory is used if it
/// exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub path: PathBuf,
    #[serde(default)]
    pub scene: Option<SceneSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Synthetic(SyntheticSource),
    Dataset(DatasetSource),
}

impl Default for Source {
    fn default() -> Self {
        Source::Synthetic(SyntheticSource::default())
    }
}

/// A boxed stream of frames, lazily rendered or loaded.
pub type FrameStream = Box<dyn Iterator<Item = Result<DepthFrame>>>;

fn default_checkpoint_every() -> usize {
    10
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Train and store parameters in 64-bit floats.
    #[serde(default)]
    pub f64: bool,
    #[serde(default)]
    pub source: Source,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults for every block, with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            out: None,
            checkpoint_every: default_checkpoint_every(),
            f64: false,
            source: Source::default(),
            sampling: SamplingConfig::default(),
            fusion: FusionConfig::default(),
            embedding: EmbeddingConfig::default(),
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Parses a TOML document. Errors name the offending key path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "<root>".to_string() } else { path };
            Error::config(key, e.into_inner().message().trim().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is representable as TOML")
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            sampling: self.sampling.clone(),
            fusion: self.fusion.clone(),
            embedding: self.embedding.clone(),
            network: self.network.clone(),
            loss: self.loss.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Checks every block; errors name the key path.
    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be at least 1"));
        }
        self.pipeline().validate()?;
        self.eval.validate("eval")?;
        match &self.source {
            Source::Synthetic(s) => {
                s.scene.build("source.scene")?;
                s.camera.validate("source.camera")?;
                if s.frames == 0 {
                    return Err(Error::config("source.frames", "must be at least 1"));
                }
                if !(s.clearance >= 0.0) {
                    return Err(Error::config("source.clearance", "must be non-negative"));
                }
                if !(s.surface_tolerance > 0.0) {
                    return Err(Error::config("source.surface_tolerance", "must be positive"));
                }
                if s.max_steps == 0 {
                    return Err(Error::config("source.max_steps", "must be at least 1"));
                }
                if !(s.noise_std >= 0.0) {
                    return Err(Error::config("source.noise_std", "must be non-negative"));
                }
                if !(s.depth_scale > 0.0) {
                    return Err(Error::config("source.depth_scale", "must be positive"));
                }
            }
            Source::Dataset(d) => {
                if let Some(spec) = &d.scene {
                    spec.build("source.scene")?;
                }
            }
        }
        Ok(())
    }

    /// Applies command-line overrides.
    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if o.f64 {
            self.f64 = true;
        }
        if let Some(k) = o.checkpoint_every {
            self.checkpoint_every = k;
        }
    }

    fn out_dir(&self) -> Result<PathBuf> {
        self.out
            .clone()
            .ok_or_else(|| Error::config("out", "no output directory given"))
    }

    /// The ground-truth scene, if the source has one.
    pub fn truth(&self) -> Result<Option<Scene>> {
        match &self.source {
            Source::Synthetic(s) => s.scene.build("source.scene").map(Some),
            Source::Dataset(d) => match &d.scene {
                Some(spec) => spec.build("source.scene").map(Some),
                None => {
                    let path = d.path.join("scene.json");
                    if path.exists() {
                        let scene: Scene = serde_json::from_str(&read_to_string(&path)?)?;
                        scene.validate()?;
                        Ok(Some(scene))
                    } else {
                        Ok(None)
                    }
                }
            },
        }
    }

    /// Opens the frame stream. Synthetic frames are rendered lazily.
    pub fn frames(&self) -> Result<FrameStream> {
        match &self.source {
            Source::Synthetic(s) => {
                let scene = s.scene.build("source.scene")?;
                let camera = s.camera.model();
                let poses = generate_trajectory(&scene, s.frames, &s.trajectory, s.clearance)?;
                let opts = RenderOptions {
                    surface_tolerance: s.surface_tolerance,
                    max_steps: s.max_steps,
                    noise_std: s.noise_std,
                    noise_seed: self.seed ^ NOISE_SEED_MIX,
                };
                Ok(Box::new(
                    poses
                        .into_iter()
                        .enumerate()
                        .map(move |(i, pose)| render_depth(&scene, &pose, &camera, i, &opts)),
                ))
            }
            Source::Dataset(d) => Ok(Box::new(load_dataset(&d.path)?.into_iter())),
        }
    }
}

/// Command-line overrides of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub f64: bool,
    pub checkpoint_every: Option<usize>,
}

/// Written next to every checkpoint so it can be evaluated on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    /// Stream items consumed when the checkpoint was taken.
    pub frames: usize,
    pub dtype: Dtype,
    /// Region used by the in-run metrics.
    pub region: EvalRegion,
}

/// Outcome of [`run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub frames: usize,
    pub skipped_frames: usize,
    pub checkpoints: Vec<PathBuf>,
    /// Metric snapshots, one per checkpoint; empty without ground truth.
    pub series: Vec<MetricsReport>,
}

impl RunSummary {
    pub fn final_metrics(&self) -> Option<&MetricsReport> {
        self.series.last()
    }
}

pub fn checkpoint_path(out: &Path, frames: usize) -> PathBuf {
    out.join("checkpoints").join(format!("frame_{frames:06}.ckpt"))
}

fn info_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Runs the full pipeline and writes all artifacts under the output
/// directory:
///
/// - `config.toml`: the resolved configuration
/// - `log.ndjson`: one frame report per line
/// - `checkpoints/frame_NNNNNN.ckpt` plus a `.json` sidecar
/// - `metrics/frame_NNNNNN.json` and `metrics_series.json`, when ground truth exists
/// - `metrics.json`, `mesh.ply`, `grid.txt` and, if configured, `slice.csv`/`slice.ppm`
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    if cfg.f64 {
        run_typed::<f64>(cfg, &out)
    } else {
        run_typed::<f32>(cfg, &out)
    }
}

fn run_typed<T: Real>(cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    let truth = cfg.truth()?;
    let frames = cfg.frames()?;
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let mut pipeline = Pipeline::<T>::new(cfg.pipeline(), cfg.seed)?;
    let seed = eval_seed(cfg.seed);

    let log = RefCell::new(String::new());
    let mut skipped = 0;
    let mut checkpoints = Vec::new();
    let mut series = Vec::new();
    let mut last_region = None;
    run_sequence(
        &mut pipeline,
        frames,
        cfg.checkpoint_every,
        |report: &FrameReport| {
            if report.skipped.is_some() {
                skipped += 1;
            } else if let Some(l) = report.losses.last() {
                info!(
                    "frame {}: {} cells, batch {}, loss {:.5}, {:.2}s",
                    report.frame,
                    report.history_cells,
                    report.batch_sizes.last().copied().unwrap_or(0),
                    l.total,
                    report.seconds
                );
            }
            let mut log = log.borrow_mut();
            log.push_str(&serde_json::to_string(report)?);
            log.push('\n');
            Ok(())
        },
        |p: &Pipeline<T>, count| {
            write_atomic(&out.join("log.ndjson"), log.borrow().as_bytes())?;
            if p.store().is_empty() {
                return Ok(());
            }
            let region = match &cfg.eval.region {
                Some(r) => r.clone(),
                None => EvalRegion::observed(p.store())?,
            };
            let path = checkpoint_path(out, count);
            save_checkpoint(&path, p.params())?;
            write_json(
                &info_path(&path),
                &CheckpointInfo {
                    frames: count,
                    dtype: checkpoint_dtype(&path)?,
                    region: region.clone(),
                },
            )?;
            checkpoints.push(path);
            if let Some(scene) = &truth {
                let (report, _) = evaluate(
                    p.params(),
                    scene,
                    &region,
                    &cfg.eval,
                    seed,
                    count,
                    cfg.eval.mesh_at_checkpoints,
                )?;
                info!("checkpoint {count}: sdf error {:.4} m", report.sdf_error_m);
                write_json(&out.join("metrics").join(format!("frame_{count:06}.json")), &report)?;
                series.push(report);
            }
            last_region = Some(region);
            Ok(())
        },
    )?;

    let frames = pipeline.frames() + skipped;
    let region = last_region.ok_or(Error::EmptyBatch)?;
    pipeline.store().write_snapshot(&out.join("grid.txt"))?;
    let mesh = match (&truth, series.last_mut()) {
        (Some(scene), Some(last)) => {
            let (report, mesh) = evaluate(pipeline.params(), scene, &region, &cfg.eval, seed, frames, true)?;
            *last = report;
            write_json(&out.join("metrics").join(format!("frame_{frames:06}.json")), last)?;
            write_json(&out.join("metrics.json"), last)?;
            write_json(&out.join("metrics_series.json"), &series)?;
            mesh.expect("mesh requested")
        }
        _ => extract_mesh(pipeline.params(), region.min, region.max, cfg.eval.mesh_resolution)?,
    };
    mesh.write_ply(&out.join("mesh.ply"))?;
    if let Some(spec) = &cfg.eval.slice {
        export_slice(pipeline.params(), spec, Some((pipeline.store(), cfg.eval.mask_radius)))?
            .write(out, "slice")?;
    }
    Ok(RunSummary {
        frames,
        skipped_frames: skipped,
        checkpoints,
        series,
    })
}

/// Recomputes both metrics for a saved checkpoint without training. The
/// region comes from the config, or else from the checkpoint's sidecar.
/// With `out`, writes `metrics.json`, `mesh.ply` and any configured slice
/// there.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Result<MetricsReport> {
    cfg.validate()?;
    if !checkpoint.exists() {
        return Err(Error::Checkpoint(format!("{} does not exist", checkpoint.display())));
    }
    match checkpoint_dtype(checkpoint)? {
        Dtype::F32 => eval_typed::<f32>(cfg, checkpoint, out),
        Dtype::F64 => eval_typed::<f64>(cfg, checkpoint, out),
    }
}

fn eval_typed<T: Real>(cfg: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Result<MetricsReport> {
    let params: FieldParams<T> = load_checkpoint(checkpoint)?;
    params.expect_architecture(&cfg.embedding, &cfg.network)?;
    let scene = cfg
        .truth()?
        .ok_or_else(|| Error::config("source.scene", "evaluation needs a ground-truth scene"))?;
    let sidecar = info_path(checkpoint);
    let info: Option<CheckpointInfo> = if sidecar.exists() {
        Some(serde_json::from_str(&read_to_string(&sidecar)?)?)
    } else {
        None
    };
    let region = match (&cfg.eval.region, &info) {
        (Some(r), _) => r.clone(),
        (None, Some(i)) => i.region.clone(),
        (None, None) => {
            return Err(Error::config(
                "eval.region",
                format!("required: no sidecar {} to take it from", sidecar.display()),
            ))
        }
    };
    let frames = info.map_or(0, |i| i.frames);
    let (report, mesh) = evaluate(&params, &scene, &region, &cfg.eval, eval_seed(cfg.seed), frames, true)?;
    if let Some(out) = out {
        write_json(&out.join("metrics.json"), &report)?;
        mesh.expect("mesh requested").write_ply(&out.join("mesh.ply"))?;
        if let Some(spec) = &cfg.eval.slice {
            export_slice(&params, spec, None)?.write(out, "slice")?;
        }
    }
    Ok(report)
}

/// The ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Uniform-random pixel selection instead of irregularity-weighted.
    RandomSampling,
    NoCurrentGrids,
    NoHistoryGrids,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::RandomSampling, Ablation::NoCurrentGrids, Ablation::NoHistoryGrids];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::RandomSampling => "random-sampling",
            Ablation::NoCurrentGrids => "no-current-grids",
            Ablation::NoHistoryGrids => "no-history-grids",
        }
    }

    /// `cfg` with this ablation switched on.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::RandomSampling => c.sampling.mode = PixelMode::UniformRandom,
            Ablation::NoCurrentGrids => c.loss.disable_current_grids = true,
            Ablation::NoHistoryGrids => c.loss.disable_history_grids = true,
        }
        c
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
                Error::config("ablation", format!("unknown ablation `{s}`; expected one of {}", known.join(", ")))
            })
    }
}

/// Base and ablated metric series side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ablation: Ablation,
    pub base: Vec<MetricsReport>,
    pub ablated: Vec<MetricsReport>,
}

/// Runs the base config into `<out>/base` and the ablated one into
/// `<out>/<ablation>` on the same seed and frames, then writes
/// `<out>/ablation.json`.
pub fn ablate(cfg: &RunConfig, ablation: Ablation) -> Result<AblationReport> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    if cfg.truth()?.is_none() {
        return Err(Error::config("source.scene", "ablation needs a ground-truth scene"));
    }
    let mut base = cfg.clone();
    base.out = Some(out.join("base"));
    let mut ablated = ablation.apply(cfg);
    ablated.out = Some(out.join(ablation.name()));
    let report = AblationReport {
        ablation,
        base: run(&base)?.series,
        ablated: run(&ablated)?.series,
    };
    write_json(&out.join("ablation.json"), &report)?;
    Ok(report)
}

/// Renders the synthetic source into a dataset directory (see
/// [`crate::scene::load_dataset`]) and stores the scene as `scene.json`.
/// Returns the number of frames written.
pub fn render_dataset(cfg: &RunConfig) -> Result<usize> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let Source::Synthetic(s) = &cfg.source else {
        return Err(Error::config("source.kind", "render-dataset needs a synthetic source"));
    };
    if s.camera.far / s.depth_scale > u16::MAX as f64 {
        return Err(Error::config(
            "source.depth_scale",
            format!("too fine for 16-bit depth up to {} m", s.camera.far),
        ));
    }
    let frames = cfg.frames()?.collect::<Result<Vec<_>>>()?;
    save_dataset(&out, &frames, s.depth_scale)?;
    write_json(&out.join("scene.json"), &s.scene.build("source.scene")?)?;
    Ok(frames.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::with_seed(7);
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn seed_is_mandatory() {
        let e = RunConfig::from_toml("checkpoint_every = 5\n").unwrap_err();
        assert!(e.to_string().contains("seed"), "{e}");
    }

    #[test]
    fn unknown_keys_are_errors_with_paths() {
        let e = RunConfig::from_toml("seed = 1\n[loss]\ngrad_wieght = 0.1\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("loss") && msg.contains("grad_wieght"), "{msg}");
        let e = RunConfig::from_toml("seed = 1\n[source]\nkind = \"synthetic\"\nframez = 3\n").unwrap_err();
        assert!(e.to_string().contains("framez"), "{e}");
    }

    #[test]
    fn negative_grad_weight_names_key() {
        let cfg = RunConfig::from_toml("seed = 1\n[loss]\ngrad_weight = -0.5\n").unwrap();
        let e = cfg.validate().unwrap_err();
        assert!(e.to_string().contains("loss.grad_weight"), "{e}");
    }

    #[test]
    fn zero_samples_and_bad_scene_name_keys() {
        let mut cfg = RunConfig::with_seed(1);
        cfg.eval.sdf_samples = 0;
        assert!(cfg.validate().unwrap_err().to_string().contains("eval.sdf_samples"));
        let mut cfg = RunConfig::with_seed(1);
        if let Source::Synthetic(s) = &mut cfg.source {
            s.scene.primitives.push(Primitive::Sphere {
                center: [0.0; 3],
                radius: -1.0,
            });
        }
        assert!(cfg.validate().unwrap_err().to_string().contains("source.scene.primitives[8]"));
    }

    #[test]
    fn ablation_names_parse() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("no-grids".parse::<Ablation>().unwrap_err().to_string().contains("unknown ablation"));
        let cfg = RunConfig::with_seed(1);
        assert!(Ablation::NoHistoryGrids.apply(&cfg).loss.disable_history_grids);
        assert_eq!(Ablation::RandomSampling.apply(&cfg).sampling.mode, PixelMode::UniformRandom);
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = RunConfig::with_seed(1);
        cfg.apply_overrides(&Overrides {
            seed: Some(9),
            out: Some("x".into()),
            f64: true,
            checkpoint_every: Some(3),
        });
        assert_eq!((cfg.seed, cfg.f64, cfg.checkpoint_every), (9, true, 3));
        assert_eq!(cfg.out.as_deref(), Some(Path::new("x")));
    }

    #[test]
    fn synthetic_stream_renders_every_frame() {
        let mut cfg = RunConfig::with_seed(1);
        if let Source::Synthetic(s) = &mut cfg.source {
            s.frames = 3;
            s.camera.width = 32;
            s.camera.height = 24;
        }
        let frames: Vec<_> = cfg.frames().unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(frames.len(), 3);
        assert!(frames.iter().all(|f| f.valid_count() == 32 * 24));
    }
}
