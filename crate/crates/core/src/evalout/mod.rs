//! Reading the learned field back out: dense queries, slices, zero-level
//! set meshes, and the two accuracy metrics (SDF error over a sampled region
//! and mesh completion against the true surface).

mod mesh;
mod slice;
mod tables;

pub use mesh::{closest_point_on_triangle, distance_brute_force, marching_cubes, Lattice, Mesh, MeshBvh};
pub use slice::{distance_color, export_slice, Axis, Slice, SliceSpec, COLOR_CLIP};

use std::f64::consts::PI;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fusion::GridStore;
use crate::mlpfield::{forward_batch, FieldParams, Real};
use crate::scene::{Primitive, Scene};
use crate::{Error, Result};

/// Predicted signed distance at every point.
pub fn query_field<T: Real>(params: &FieldParams<T>, points: &[[f64; 3]]) -> Result<Vec<f64>> {
    if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { what: "query point", index: i });
    }
    let pts: Vec<[T; 3]> = points.iter().map(|p| p.map(T::from_f64)).collect();
    Ok(forward_batch(params, &pts)?.into_iter().map(Real::to_f64).collect())
}

/// Marching-cubes mesh of the network's zero level set inside `[min, max]`.
pub fn extract_mesh<T: Real>(params: &FieldParams<T>, min: [f64; 3], max: [f64; 3], resolution: f64) -> Result<Mesh> {
    let mut lattice = Lattice::covering(min, max, resolution)?;
    lattice.values = query_field(params, &lattice.points())?;
    marching_cubes(&lattice)
}

/// Ground-truth signed distance; `None` where the truth is unknown.
pub trait DistanceTruth: Sync {
    fn distance(&self, p: &Point3<f64>) -> Option<f64>;
}

impl DistanceTruth for Scene {
    fn distance(&self, p: &Point3<f64>) -> Option<f64> {
        Some(self.sdf(p))
    }
}

/// Ground-truth distances on a regular lattice, trilinearly interpolated.
/// Points outside the lattice are unknown.
#[derive(Debug, Clone)]
pub struct TruthGrid {
    pub lattice: Lattice,
}

impl TruthGrid {
    pub fn from_scene(scene: &Scene, min: [f64; 3], max: [f64; 3], spacing: f64) -> Result<Self> {
        let lattice = Lattice::covering(min, max, spacing)?.sample(|q| scene.sdf(&Point3::from(*q)));
        Ok(Self { lattice })
    }
}

impl DistanceTruth for TruthGrid {
    fn distance(&self, p: &Point3<f64>) -> Option<f64> {
        let l = &self.lattice;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let x = (p[a] - l.origin[a]) / l.spacing;
            let last = (l.dims[a] - 1) as f64;
            if !(0.0..=last).contains(&x) {
                return None;
            }
            let i = (x.floor() as usize).min(l.dims[a] - 2);
            base[a] = i;
            frac[a] = x - i as f64;
        }
        let mut v = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = base;
            for a in 0..3 {
                if corner >> a & 1 == 1 {
                    idx[a] += 1;
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            v += w * l.values[(idx[2] * l.dims[1] + idx[1]) * l.dims[0] + idx[0]];
        }
        Some(v)
    }
}

/// A declared evaluation region: an axis-aligned box, optionally restricted
/// to points whose true distance is non-negative (unknown counts as zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRegion {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub free_space_only: bool,
}

impl EvalRegion {
    /// Free space inside the bounding box of every updated grid cell.
    pub fn observed(store: &GridStore) -> Result<Self> {
        let (lo, hi) = store
            .bounds()
            .ok_or_else(|| Error::EmptyRegion("no grid cell has been updated".into()))?;
        Ok(Self {
            min: lo.into(),
            max: hi.into(),
            free_space_only: true,
        })
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        if (0..3).any(|a| !(self.max[a] > self.min[a]) || !self.min[a].is_finite() || !self.max[a].is_finite()) {
            return Err(Error::config(key, "region bounds must be finite with max > min"));
        }
        Ok(())
    }

    fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - 1e-9 && p[a] <= self.max[a] + 1e-9)
    }
}

const MAX_TRIES_PER_SAMPLE: usize = 1000;

/// `n` points uniform in `region` (rejection-sampled against the free-space
/// condition when requested), reproducible from `seed`.
pub fn sample_region(truth: &dyn DistanceTruth, region: &EvalRegion, n: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    region.validate("region")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n {
        tries += 1;
        if tries > MAX_TRIES_PER_SAMPLE * n.max(1) {
            return Err(Error::EmptyRegion(format!(
                "found {} of {n} free-space points in {:?}..{:?}",
                out.len(),
                region.min,
                region.max
            )));
        }
        let p: [f64; 3] = std::array::from_fn(|a| rng.gen_range(region.min[a]..region.max[a]));
        if region.free_space_only && truth.distance(&Point3::from(p)).unwrap_or(0.0) < 0.0 {
            continue;
        }
        out.push(p);
    }
    Ok(out)
}

/// Mean `|f(q) − truth(q)|` over `points`; unknown truth counts as zero.
pub fn sdf_error<T: Real>(params: &FieldParams<T>, truth: &dyn DistanceTruth, points: &[[f64; 3]]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyRegion("no evaluation points".into()));
    }
    let pred = query_field(params, points)?;
    let sum: f64 = points
        .iter()
        .zip(&pred)
        .map(|(p, f)| (f - truth.distance(&Point3::from(*p)).unwrap_or(0.0)).abs())
        .sum();
    Ok(sum / points.len() as f64)
}

/// Mean over `truth_points` of the exact distance to the nearest point of
/// `pred`, or `None` for an empty mesh (infinite completion error).
pub fn mesh_completion(truth_points: &[Point3<f64>], pred: &Mesh) -> Result<Option<f64>> {
    if truth_points.is_empty() {
        return Err(Error::EmptyRegion("no ground-truth surface samples".into()));
    }
    if pred.is_empty() {
        return Ok(None);
    }
    let bvh = MeshBvh::new(pred);
    let d: Vec<f64> = truth_points
        .par_iter()
        .map(|p| bvh.distance(p).expect("non-empty mesh"))
        .collect();
    Ok(Some(d.iter().sum::<f64>() / d.len() as f64))
}

fn orthonormal_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = n.cross(&helper).normalize();
    (u, n.cross(&u))
}

/// Area of the surface that `sample_on` draws from.
fn proposal_area(p: &Primitive, region: &EvalRegion) -> f64 {
    match p {
        Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
        Primitive::Box { half_extents: h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
        Primitive::Plane { point, normal } => {
            let (lo, hi) = plane_rect(point, normal, region);
            (hi[0] - lo[0]) * (hi[1] - lo[1])
        }
    }
}

/// Extent of the region's corners projected onto the plane's basis.
fn plane_rect(point: &[f64; 3], normal: &[f64; 3], region: &EvalRegion) -> ([f64; 2], [f64; 2]) {
    let n = Vector3::from(*normal).normalize();
    let (u, v) = orthonormal_basis(&n);
    let o = Vector3::from(*point);
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for c in 0..8 {
        let corner = Vector3::from(std::array::from_fn::<f64, 3, _>(|a| {
            if c >> a & 1 == 1 {
                region.max[a]
            } else {
                region.min[a]
            }
        }));
        let rel = corner - o;
        for (k, axis) in [u, v].iter().enumerate() {
            let s = rel.dot(axis);
            lo[k] = lo[k].min(s);
            hi[k] = hi[k].max(s);
        }
    }
    (lo, hi)
}

fn sample_on<R: Rng + ?Sized>(p: &Primitive, region: &EvalRegion, rng: &mut R) -> Point3<f64> {
    match p {
        Primitive::Sphere { center, radius } => {
            let d = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            Point3::from(*center) + d.normalize() * *radius
        }
        Primitive::Box { center, half_extents: h } => {
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let x = rng.gen::<f64>() * (areas[0] + areas[1] + areas[2]);
            let axis = if x < areas[0] {
                0
            } else if x < areas[0] + areas[1] {
                1
            } else {
                2
            };
            let mut q: [f64; 3] = std::array::from_fn(|a| rng.gen_range(-h[a]..h[a]));
            q[axis] = if rng.gen::<bool>() { h[axis] } else { -h[axis] };
            Point3::from(Vector3::from(*center) + Vector3::from(q))
        }
        Primitive::Plane { point, normal } => {
            let n = Vector3::from(*normal).normalize();
            let (u, v) = orthonormal_basis(&n);
            let (lo, hi) = plane_rect(point, normal, region);
            let (s, t) = (rng.gen_range(lo[0]..=hi[0]), rng.gen_range(lo[1]..=hi[1]));
            Point3::from(Vector3::from(*point) + u * s + v * t)
        }
    }
}

/// `n` points uniform by area over the visible surface of `scene` inside
/// `region` (surface patches buried inside another primitive are excluded).
pub fn sample_scene_surface(scene: &Scene, region: &EvalRegion, n: usize, seed: u64) -> Result<Vec<Point3<f64>>> {
    region.validate("region")?;
    let areas: Vec<f64> = scene.primitives.iter().map(|p| proposal_area(p, region)).collect();
    let total: f64 = areas.iter().sum();
    if !(total > 0.0) {
        return Err(Error::EmptyRegion("scene has no surface".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n {
        tries += 1;
        if tries > MAX_TRIES_PER_SAMPLE * n.max(1) {
            return Err(Error::EmptyRegion("no scene surface inside the region".into()));
        }
        let mut x = rng.gen::<f64>() * total;
        let mut k = 0;
        while k + 1 < areas.len() && x >= areas[k] {
            x -= areas[k];
            k += 1;
        }
        let p = sample_on(&scene.primitives[k], region, &mut rng);
        if region.contains(&p) && scene.sdf(&p) > -1e-9 {
            out.push(p);
        }
    }
    Ok(out)
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Points drawn for the SDF error.
    pub sdf_samples: usize,
    /// Ground-truth surface points for mesh completion.
    pub completion_samples: usize,
    /// Marching-cubes lattice spacing, meters.
    pub mesh_resolution: f64,
    /// Evaluation region; the observed free space when absent.
    pub region: Option<EvalRegion>,
    /// Optional slice written with every evaluation.
    pub slice: Option<SliceSpec>,
    /// Slice cells farther than this from every updated cell are masked, meters.
    pub mask_radius: f64,
    /// Also extract and score the mesh at intermediate checkpoints, not only
    /// at the end of a run.
    pub mesh_at_checkpoints: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sdf_samples: 10_000,
            completion_samples: 10_000,
            mesh_resolution: 0.05,
            region: None,
            slice: None,
            mask_radius: 0.1,
            mesh_at_checkpoints: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        if self.sdf_samples == 0 {
            return Err(Error::config(key("sdf_samples"), "must be at least 1"));
        }
        if self.completion_samples == 0 {
            return Err(Error::config(key("completion_samples"), "must be at least 1"));
        }
        if !(self.mesh_resolution > 0.0 && self.mesh_resolution.is_finite()) {
            return Err(Error::config(key("mesh_resolution"), "must be positive"));
        }
        if let Some(r) = &self.region {
            r.validate(&key("region"))?;
        }
        if let Some(s) = &self.slice {
            s.validate(&key("slice"))?;
        }
        if !(self.mask_radius >= 0.0) {
            return Err(Error::config(key("mask_radius"), "must be non-negative"));
        }
        Ok(())
    }
}

/// One metrics snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Frames consumed when the snapshot was taken.
    pub checkpoint: usize,
    pub sdf_error_m: f64,
    /// `None` when the mesh was not evaluated or came out empty (infinite error).
    pub mesh_completion_m: Option<f64>,
    pub mesh_evaluated: bool,
    pub mesh_empty: bool,
    pub n_samples: usize,
    pub completion_samples: usize,
    pub seed: u64,
    pub region: EvalRegion,
}

/// Computes the metrics of `params` against an analytic scene over `region`.
/// The mesh is extracted and scored only when `with_mesh` is set, since that
/// dominates the cost. Returns the report and the mesh, if extracted.
pub fn evaluate<T: Real>(
    params: &FieldParams<T>,
    scene: &Scene,
    region: &EvalRegion,
    cfg: &EvalConfig,
    seed: u64,
    checkpoint: usize,
    with_mesh: bool,
) -> Result<(MetricsReport, Option<Mesh>)> {
    cfg.validate("eval")?;
    region.validate("eval.region")?;
    let points = sample_region(scene, region, cfg.sdf_samples, seed)?;
    let sdf = sdf_error(params, scene, &points)?;
    let mut report = MetricsReport {
        checkpoint,
        sdf_error_m: sdf,
        mesh_completion_m: None,
        mesh_evaluated: with_mesh,
        mesh_empty: false,
        n_samples: points.len(),
        completion_samples: 0,
        seed,
        region: region.clone(),
    };
    if !with_mesh {
        return Ok((report, None));
    }
    let mesh = extract_mesh(params, region.min, region.max, cfg.mesh_resolution)?;
    let surface = sample_scene_surface(scene, region, cfg.completion_samples, seed.wrapping_add(1))?;
    let completion = mesh_completion(&surface, &mesh)?;
    report.mesh_completion_m = completion;
    report.mesh_empty = completion.is_none();
    report.completion_samples = surface.len();
    Ok((report, Some(mesh)))
}
