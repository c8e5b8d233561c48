//! Local updating: per-point signed distances against the current frame's
//! surface points, fused into a sparse axis-aligned grid with exponentially
//! decaying weights.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::{IndexMap, IndexSet};
use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sampling::{RaySample, SampleKind};
use crate::spatial::KdTree;
use crate::{Error, Result};

pub type CellIndex = [i64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Decay rate of the point weight with distance (1/m).
    pub decay: f64,
    pub min_weight: f64,
    pub max_weight: f64,
    /// Cell edge length (m).
    pub resolution: f64,
    /// World position of the corner of cell (0, 0, 0).
    pub origin: [f64; 3],
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            decay: 50.0,
            min_weight: 1e-5,
            max_weight: 10.0,
            resolution: 0.05,
            origin: [0.0; 3],
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        if !(self.decay > 0.0) {
            return Err(Error::config(key("decay"), "must be positive"));
        }
        if !(self.min_weight > 0.0 && self.min_weight <= 1.0) {
            return Err(Error::config(key("min_weight"), "must lie in (0, 1]"));
        }
        if !(self.max_weight > 0.0) {
            return Err(Error::config(key("max_weight"), "must be positive"));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::config(key("resolution"), "must be positive"));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::config(key("origin"), "must be finite"));
        }
        Ok(())
    }
}

/// Surface points observed in the current frame (one per sampled pixel) with
/// their normals.
pub struct SurfaceSet {
    tree: KdTree,
    normals: Vec<Vector3<f64>>,
}

impl SurfaceSet {
    /// `normals[i]` must be a unit normal for `points[i]`.
    pub fn new(points: Vec<Point3<f64>>, normals: Vec<Vector3<f64>>) -> Self {
        assert_eq!(points.len(), normals.len());
        Self {
            tree: KdTree::new(points),
            normals,
        }
    }

    /// Surface set of a frame's rays. A ray whose pixel has no normal estimate
    /// uses the direction back to the camera.
    pub fn from_rays(rays: &[RaySample], pixel_normal: impl Fn((usize, usize)) -> Option<Vector3<f64>>) -> Self {
        let points = rays.iter().map(RaySample::surface_point).collect();
        let normals = rays
            .iter()
            .map(|r| pixel_normal(r.pixel).unwrap_or(-r.direction))
            .collect();
        Self::new(points, normals)
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        self.tree.points()
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn nearest(&self, p: &Point3<f64>) -> Option<(usize, f64)> {
        self.tree.nearest(p)
    }
}

/// Signed distance and distance-gradient direction of a ray sample.
///
/// `d = sgn(D − l) · |p − x*|` with `x*` the nearest surface point. The returned
/// direction is the gradient of that signed distance, `sgn(d) · (p − x*) / |p − x*|`:
/// away from the surface in free space, toward it behind the surface. Surface
/// samples (`l == D`) get `d = 0` and the pixel normal.
pub fn capture_distance(
    p: &Point3<f64>,
    depth: f64,
    surface_depth: f64,
    pixel_normal: &Vector3<f64>,
    surface: &SurfaceSet,
) -> Result<(f64, Vector3<f64>)> {
    let (nearest, dist2) = surface.nearest(p).ok_or(Error::EmptySurface)?;
    if depth == surface_depth {
        return Ok((0.0, *pixel_normal));
    }
    let sign = if surface_depth > depth { 1.0 } else { -1.0 };
    let dist = dist2.sqrt();
    if dist == 0.0 {
        return Ok((0.0, surface.normals[nearest]));
    }
    let g = (p - surface.points()[nearest]) * (sign / dist);
    Ok((sign * dist, g))
}

/// `max(exp(−ε·|d|), w_min)`.
pub fn point_weight(d: f64, cfg: &FusionConfig) -> f64 {
    (-cfg.decay * d.abs()).exp().max(cfg.min_weight)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub distance: f64,
    pub weight: f64,
    /// Weighted running average of the incoming directions (not normalized).
    pub gradient: Vector3<f64>,
    pub last_frame: usize,
}

impl Default for GridCell {
    fn default() -> Self {
        Self {
            distance: 0.0,
            weight: 0.0,
            gradient: Vector3::zeros(),
            last_frame: 0,
        }
    }
}

impl GridCell {
    /// Unit gradient direction, or zero if the average cancelled out.
    pub fn unit_gradient(&self) -> Vector3<f64> {
        let n = self.gradient.norm();
        if n > 0.0 {
            self.gradient / n
        } else {
            Vector3::zeros()
        }
    }
}

/// Weighted running-average update of one cell. Distance and gradient use the
/// previous weight in the denominator; the stored weight saturates at `max_weight`.
pub fn fuse_point(cell: &GridCell, d: f64, w: f64, g: &Vector3<f64>, max_weight: f64) -> GridCell {
    let denom = cell.weight + w;
    GridCell {
        distance: (cell.weight * cell.distance + w * d) / denom,
        weight: denom.min(max_weight),
        gradient: (cell.gradient * cell.weight + g * w) / denom,
        last_frame: cell.last_frame,
    }
}

/// Sparse grid of fused cells.
///
/// Cells are kept in first-touch order, which makes iteration and random
/// selection reproducible. Every stored cell has positive weight, so the key
/// set is exactly the set of historically updated cells.
#[derive(Debug, Clone)]
pub struct GridStore {
    resolution: f64,
    origin: Point3<f64>,
    cells: IndexMap<CellIndex, GridCell>,
    current: IndexSet<CellIndex>,
}

impl GridStore {
    pub fn new(resolution: f64, origin: Point3<f64>) -> Self {
        assert!(resolution > 0.0);
        Self {
            resolution,
            origin,
            cells: IndexMap::new(),
            current: IndexSet::new(),
        }
    }

    pub fn from_config(cfg: &FusionConfig) -> Self {
        Self::new(cfg.resolution, Point3::from(cfg.origin))
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Point3<f64> {
        self.origin
    }

    pub fn cell_index(&self, p: &Point3<f64>) -> CellIndex {
        let rel = (p - self.origin) / self.resolution;
        [rel.x.floor() as i64, rel.y.floor() as i64, rel.z.floor() as i64]
    }

    pub fn cell_center(&self, idx: &CellIndex) -> Point3<f64> {
        self.origin
            + Vector3::new(
                idx[0] as f64 + 0.5,
                idx[1] as f64 + 0.5,
                idx[2] as f64 + 0.5,
            ) * self.resolution
    }

    pub fn get(&self, idx: &CellIndex) -> Option<&GridCell> {
        self.cells.get(idx)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// All historically updated cells, in first-touch order.
    pub fn cells(&self) -> &IndexMap<CellIndex, GridCell> {
        &self.cells
    }

    /// Cells touched by the most recent frame, in first-touch order.
    pub fn current(&self) -> &IndexSet<CellIndex> {
        &self.current
    }

    /// History cell at position `i` in first-touch order.
    pub fn history_at(&self, i: usize) -> Option<(&CellIndex, &GridCell)> {
        self.cells.get_index(i)
    }

    /// Axis-aligned bounds of all updated cells (cell boxes, not centers).
    pub fn bounds(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        let mut keys = self.cells.keys();
        let first = *keys.next()?;
        let (mut lo, mut hi) = (first, first);
        for k in keys {
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
        }
        let corner = |i: CellIndex| {
            self.origin + Vector3::new(i[0] as f64, i[1] as f64, i[2] as f64) * self.resolution
        };
        Some((corner(lo), corner([hi[0] + 1, hi[1] + 1, hi[2] + 1])))
    }

    /// Starts a new frame: the current set becomes empty.
    pub fn begin_frame(&mut self) {
        self.current.clear();
    }

    /// Fuses one observation into the cell containing `p`.
    pub fn fuse(&mut self, p: &Point3<f64>, d: f64, w: f64, g: &Vector3<f64>, cfg: &FusionConfig, frame: usize) {
        let idx = self.cell_index(p);
        let cell = self.cells.entry(idx).or_default();
        let mut updated = fuse_point(cell, d, w, g, cfg.max_weight);
        updated.last_frame = frame;
        *cell = updated;
        self.current.insert(idx);
    }

    /// Text dump: a header line then `i j k D W Gx Gy Gz last_frame` per cell.
    pub fn snapshot(&self) -> String {
        let mut s = format!(
            "# grid resolution {} origin {} {} {} cells {}\n",
            self.resolution,
            self.origin.x,
            self.origin.y,
            self.origin.z,
            self.cells.len()
        );
        for (k, c) in &self.cells {
            writeln!(
                s,
                "{} {} {} {} {} {} {} {} {}",
                k[0], k[1], k[2], c.distance, c.weight, c.gradient.x, c.gradient.y, c.gradient.z, c.last_frame
            )
            .unwrap();
        }
        s
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        crate::io_util::write_atomic(path, self.snapshot().as_bytes())
    }

    /// Parses the output of [`GridStore::snapshot`]. The current-frame set is
    /// not part of the dump and comes back empty.
    pub fn parse_snapshot(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Shape(format!("grid snapshot: {m}"));
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty"))?.split_whitespace().collect();
        if header.len() != 10 || header[1] != "grid" {
            return Err(bad("malformed header"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let mut store = GridStore::new(
            num(header[3])?,
            Point3::new(num(header[5])?, num(header[6])?, num(header[7])?),
        );
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 9 {
                return Err(bad("record needs 9 fields"));
            }
            let int = |s: &str| s.parse::<i64>().map_err(|_| bad("bad index"));
            let idx = [int(f[0])?, int(f[1])?, int(f[2])?];
            let cell = GridCell {
                distance: num(f[3])?,
                weight: num(f[4])?,
                gradient: Vector3::new(num(f[5])?, num(f[6])?, num(f[7])?),
                last_frame: f[8].parse().map_err(|_| bad("bad frame"))?,
            };
            store.cells.insert(idx, cell);
        }
        Ok(store)
    }
}

/// Per-point capture results for a frame, in ray-major, sample-minor order.
pub fn capture_frame(
    rays: &[RaySample],
    surface: &SurfaceSet,
) -> Result<Vec<(Point3<f64>, f64, Vector3<f64>)>> {
    let per_ray: Vec<Result<Vec<_>>> = rays
        .par_iter()
        .enumerate()
        .map(|(r, ray)| {
            let normal = surface.normals()[r];
            ray.samples
                .iter()
                .map(|s| {
                    let (d, g) = if s.kind == SampleKind::Surface {
                        (0.0, normal)
                    } else {
                        capture_distance(&s.point, s.depth, ray.surface_depth, &normal, surface)?
                    };
                    Ok((s.point, d, g))
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(rays.iter().map(|r| r.samples.len()).sum());
    for r in per_ray {
        out.extend(r?);
    }
    Ok(out)
}

/// Fuses every sample of a frame into the store. `surface` must have been
/// built from the same `rays` (one surface point per ray, same order).
/// Returns the number of fused points.
pub fn integrate_frame(
    store: &mut GridStore,
    rays: &[RaySample],
    surface: &SurfaceSet,
    cfg: &FusionConfig,
    frame: usize,
) -> Result<usize> {
    store.begin_frame();
    if rays.is_empty() {
        return Ok(0);
    }
    if surface.len() != rays.len() {
        return Err(Error::Shape(format!(
            "surface set has {} points for {} rays",
            surface.len(),
            rays.len()
        )));
    }
    let captured = capture_frame(rays, surface)?;
    for (p, d, g) in &captured {
        store.fuse(p, *d, point_weight(*d, cfg), g, cfg, frame);
    }
    Ok(captured.len())
}
