//! Active sampling: pixels are allocated to image blocks in proportion to how
//! irregular each block looks (depth variance plus normal-rendering variance),
//! then each chosen pixel's ray is sampled densely in free space, around the
//! surface, and at the surface itself.

use nalgebra::{Point3, Vector3};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scene::DepthFrame;
use crate::{Error, Result};

/// Number of blocks along each image axis.
pub const BLOCKS_PER_AXIS: usize = 8;
pub const NUM_BLOCKS: usize = BLOCKS_PER_AXIS * BLOCKS_PER_AXIS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelMode {
    Irregularity,
    UniformRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Pixels sampled per frame.
    pub pixels_per_frame: usize,
    pub depth_weight: f64,
    pub normal_weight: f64,
    pub stratified_samples: usize,
    pub near_surface_samples: usize,
    /// Minimum ray depth (m).
    pub min_depth: f64,
    /// Maximum distance sampled behind the surface (m).
    pub behind_surface: f64,
    /// Standard deviation of near-surface samples (m).
    pub near_surface_std: f64,
    pub mode: PixelMode,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            pixels_per_frame: 200,
            depth_weight: 0.7,
            normal_weight: 0.3,
            stratified_samples: 22,
            near_surface_samples: 5,
            min_depth: 0.07,
            behind_surface: 0.10,
            near_surface_std: 0.10,
            mode: PixelMode::Irregularity,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        if self.pixels_per_frame < NUM_BLOCKS {
            return Err(Error::config(key("pixels_per_frame"), format!("must be >= {NUM_BLOCKS}")));
        }
        if !(self.depth_weight >= 0.0) {
            return Err(Error::config(key("depth_weight"), "must be >= 0"));
        }
        if !(self.normal_weight >= 0.0) {
            return Err(Error::config(key("normal_weight"), "must be >= 0"));
        }
        if self.depth_weight == 0.0 && self.normal_weight == 0.0 {
            return Err(Error::config(key("depth_weight"), "depth and normal weights are both zero"));
        }
        if self.stratified_samples == 0 {
            return Err(Error::config(key("stratified_samples"), "must be >= 1"));
        }
        for (name, v) in [
            ("min_depth", self.min_depth),
            ("behind_surface", self.behind_surface),
            ("near_surface_std", self.near_surface_std),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key(name), "must be positive"));
            }
        }
        Ok(())
    }

    pub fn samples_per_ray(&self) -> usize {
        self.stratified_samples + self.near_surface_samples + 1
    }
}

/// Per-pixel unit normals in the world frame, oriented toward the camera.
///
/// Normals come from the cross product of central differences of the
/// back-projected depth image, so a pixel is invalid unless it and its four
/// neighbours all have depth.
pub fn pixel_normals(frame: &DepthFrame) -> Vec<Option<Vector3<f64>>> {
    let (w, h) = (frame.width(), frame.height());
    let origin = frame.origin();
    let mut out = vec![None; w * h];
    if w < 3 || h < 3 {
        return out;
    }
    for v in 1..h - 1 {
        for u in 1..w - 1 {
            let (Some(p), Some(l), Some(r), Some(t), Some(b)) = (
                frame.back_project(u, v),
                frame.back_project(u - 1, v),
                frame.back_project(u + 1, v),
                frame.back_project(u, v - 1),
                frame.back_project(u, v + 1),
            ) else {
                continue;
            };
            let n = (r - l).cross(&(b - t));
            let norm = n.norm();
            if !(norm > 0.0) {
                continue;
            }
            let mut n = n / norm;
            if n.dot(&(origin - p)) < 0.0 {
                n = -n;
            }
            out[v * w + u] = Some(n);
        }
    }
    out
}

/// Normal rendering image: cosine between each pixel's surface normal and the
/// camera's viewing direction (reversed optical axis), so a flat surface
/// renders as a constant.
pub fn normal_render(frame: &DepthFrame) -> Vec<Option<f64>> {
    normal_render_from(frame, &pixel_normals(frame))
}

pub(crate) fn normal_render_from(
    frame: &DepthFrame,
    normals: &[Option<Vector3<f64>>],
) -> Vec<Option<f64>> {
    let view = -(frame.pose.rotation.matrix() * Vector3::z());
    normals
        .iter()
        .map(|n| Some((*n)?.dot(&view).clamp(-1.0, 1.0)))
        .collect()
}

/// Pixel range `[start, end)` covered by block `k` of `n` along an axis of
/// length `len`; the last block absorbs the remainder.
fn block_span(k: usize, len: usize) -> (usize, usize) {
    let size = len / BLOCKS_PER_AXIS;
    let end = if k + 1 == BLOCKS_PER_AXIS { len } else { (k + 1) * size };
    (k * size, end)
}

fn block_pixels(frame: &DepthFrame, b: usize) -> impl Iterator<Item = (usize, usize)> {
    let (u0, u1) = block_span(b % BLOCKS_PER_AXIS, frame.width());
    let (v0, v1) = block_span(b / BLOCKS_PER_AXIS, frame.height());
    (v0..v1).flat_map(move |v| (u0..u1).map(move |u| (u, v)))
}

fn population_variance(values: impl Iterator<Item = f64>) -> Option<f64> {
    let vals: Vec<f64> = values.collect();
    if vals.len() < 2 {
        return None;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    Some(vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

/// Irregularity of each of the 8x8 blocks (row-major, block row first).
pub fn block_irregularity(
    frame: &DepthFrame,
    cosines: &[Option<f64>],
    cfg: &SamplingConfig,
) -> Vec<f64> {
    let w = frame.width();
    (0..NUM_BLOCKS)
        .map(|b| {
            let Some(var_d) =
                population_variance(block_pixels(frame, b).filter_map(|(u, v)| frame.depth_at(u, v)))
            else {
                return 0.0;
            };
            let var_n =
                population_variance(block_pixels(frame, b).filter_map(|(u, v)| cosines[v * w + u]))
                    .unwrap_or(0.0);
            cfg.depth_weight * var_d + cfg.normal_weight * var_n
        })
        .collect()
}

/// Splits `total` into integer counts proportional to `weights`. Every count
/// is the floor or the ceiling of its real-valued share and the counts sum to
/// `total`. The leftover units after flooring go to blocks chosen by
/// systematic sampling over the fractional remainders, so block `b` is rounded
/// up with probability equal to its remainder and the expected count equals
/// the share exactly. Returns `None` when the weights sum to zero.
pub fn allocate_counts<R: Rng + ?Sized>(weights: &[f64], total: usize, rng: &mut R) -> Option<Vec<usize>> {
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) {
        return None;
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let left = total.saturating_sub(counts.iter().sum());
    if left == 0 {
        return Some(counts);
    }
    let fracs: Vec<f64> = quotas.iter().map(|q| q - q.floor()).collect();
    let spacing = fracs.iter().sum::<f64>() / left as f64;
    let mut next = rng.gen::<f64>() * spacing;
    let mut given = 0;
    let mut acc = 0.0;
    for (i, f) in fracs.iter().enumerate() {
        acc += f;
        while given < left && next < acc {
            counts[i] += 1;
            given += 1;
            next += spacing;
        }
    }
    // Rounding in the running sums can leave the last unit unassigned.
    if given < left {
        let i = fracs.iter().rposition(|f| *f > 0.0).unwrap_or(weights.len() - 1);
        counts[i] += left - given;
    }
    Some(counts)
}

/// Pixels chosen for one frame together with the per-block counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSelection {
    pub pixels: Vec<(usize, usize)>,
    pub block_counts: Vec<usize>,
}

/// Chooses `pixels_per_frame` valid pixels. In irregularity mode block `b`
/// receives `M * ξ_b / Σξ` pixels (randomized floor-or-ceiling rounding); uniform mode,
/// or an all-zero `ξ`, draws uniformly over all valid pixels.
pub fn sample_pixels<R: Rng + ?Sized>(
    frame: &DepthFrame,
    irregularity: &[f64],
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<PixelSelection> {
    let w = frame.width();
    let valid_in_block: Vec<Vec<(usize, usize)>> = (0..NUM_BLOCKS)
        .map(|b| {
            block_pixels(frame, b)
                .filter(|&(u, v)| frame.depth[v * w + u].is_some())
                .collect()
        })
        .collect();
    let total_valid: usize = valid_in_block.iter().map(Vec::len).sum();
    if total_valid == 0 {
        return Err(Error::NoValidPixels);
    }
    let m = cfg.pixels_per_frame;
    let allocation = match cfg.mode {
        PixelMode::Irregularity => allocate_counts(irregularity, m, rng),
        PixelMode::UniformRandom => None,
    };
    let mut pixels = Vec::with_capacity(m);
    let block_counts = match allocation {
        Some(counts) => {
            for (b, &count) in counts.iter().enumerate() {
                pixels.extend(draw(&valid_in_block[b], count, rng));
            }
            counts
        }
        None => {
            let all: Vec<(usize, usize)> = valid_in_block.iter().flatten().copied().collect();
            let mut counts = vec![0; NUM_BLOCKS];
            for (u, v) in draw(&all, m, rng) {
                let bu = (u / (frame.width() / BLOCKS_PER_AXIS).max(1)).min(BLOCKS_PER_AXIS - 1);
                let bv = (v / (frame.height() / BLOCKS_PER_AXIS).max(1)).min(BLOCKS_PER_AXIS - 1);
                counts[bv * BLOCKS_PER_AXIS + bu] += 1;
                pixels.push((u, v));
            }
            counts
        }
    };
    Ok(PixelSelection {
        pixels,
        block_counts,
    })
}

// Uniform draw of `count` items; without replacement when possible.
fn draw<R: Rng + ?Sized>(
    pool: &[(usize, usize)],
    count: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    if count == 0 || pool.is_empty() {
        return Vec::new();
    }
    if count <= pool.len() {
        index::sample(rng, pool.len(), count)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..count).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Stratified,
    NearSurface,
    Surface,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSample {
    /// z-depth along the pixel ray (m).
    pub depth: f64,
    pub point: Point3<f64>,
    pub kind: SampleKind,
}

/// All samples along one pixel ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySample {
    pub pixel: (usize, usize),
    /// Observed surface depth at the pixel.
    pub surface_depth: f64,
    /// Unit viewing direction in the world frame.
    pub direction: Vector3<f64>,
    /// Stratified samples first, then near-surface samples, then the surface.
    pub samples: Vec<PointSample>,
}

impl RaySample {
    pub fn surface_point(&self) -> Point3<f64> {
        self.samples.last().expect("ray has a surface sample").point
    }
}

/// Samples `N_f` stratified depths over `[l_min, D + δ]`, `N_s` clamped
/// Gaussian depths around `D`, and `D` itself, and lifts them to world points
/// `o + l · T_wc K⁻¹ [u, v, 1]`.
pub fn sample_points<R: Rng + ?Sized>(
    pixel: (usize, usize),
    frame: &DepthFrame,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<RaySample> {
    let (u, v) = pixel;
    let surface = frame.depth_at(u, v).ok_or(Error::InvalidPixel { u, v })?;
    let (lo, hi) = (cfg.min_depth, surface + cfg.behind_surface);
    if hi <= lo {
        return Err(Error::SurfaceTooClose { u, v });
    }
    let ray = frame.ray(u, v);
    let origin = frame.origin();
    let at = |depth: f64, kind| PointSample {
        depth,
        point: origin + ray * depth,
        kind,
    };
    let mut samples = Vec::with_capacity(cfg.samples_per_ray());
    let step = (hi - lo) / cfg.stratified_samples as f64;
    for k in 0..cfg.stratified_samples {
        let l = lo + (k as f64 + rng.gen::<f64>()) * step;
        samples.push(at(l.min(hi), SampleKind::Stratified));
    }
    let gauss = Normal::new(surface, cfg.near_surface_std).expect("positive std");
    for _ in 0..cfg.near_surface_samples {
        let l = gauss.sample(rng).clamp(lo, hi);
        samples.push(at(l, SampleKind::NearSurface));
    }
    samples.push(at(surface, SampleKind::Surface));
    Ok(RaySample {
        pixel,
        surface_depth: surface,
        direction: ray.normalize(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{look_at, render_depth, CameraModel, Primitive, RenderOptions, Scene};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraModel {
        CameraModel::with_fov(65, 49, 60.0, 0.05, 10.0)
    }

    fn plane_frame(tilt_deg: f64) -> DepthFrame {
        let t = tilt_deg.to_radians();
        let scene = Scene::new(vec![Primitive::Plane {
            point: [0.0, 0.0, 0.0],
            normal: [t.sin(), 0.0, t.cos()],
        }]);
        let pose = look_at(&Point3::new(0.0, 0.0, 3.0), &Point3::origin());
        render_depth(&scene, &pose, &cam(), 0, &RenderOptions::default()).unwrap()
    }

    fn synthetic(depth: Vec<Option<f64>>, w: usize, h: usize) -> DepthFrame {
        DepthFrame {
            depth,
            pose: look_at(&Point3::origin(), &Point3::new(0.0, 0.0, 1.0)),
            camera: CameraModel::with_fov(w, h, 60.0, 0.05, 10.0),
            index: 0,
        }
    }

    #[test]
    fn frontal_plane_renders_unit_cosine() {
        let f = plane_frame(0.0);
        let cos = normal_render(&f);
        let c = cos[24 * 65 + 32].unwrap();
        assert!((c - 1.0).abs() < 1e-6, "{c}");
        assert!(cos[0].is_none(), "border pixel has no neighbours");
    }

    #[test]
    fn tilted_plane_center_cosine() {
        let f = plane_frame(60.0);
        let c = normal_render(&f)[24 * 65 + 32].unwrap();
        assert!((c.abs() - 0.5).abs() < 0.02, "{c}");
    }

    #[test]
    fn invalid_neighbour_invalidates_pixel() {
        let mut f = plane_frame(0.0);
        f.depth[24 * 65 + 33] = None;
        let cos = normal_render(&f);
        assert!(cos[24 * 65 + 32].is_none());
        assert!(cos[24 * 65 + 34].is_none());
        assert!(cos[20 * 65 + 20].is_some());
    }

    #[test]
    fn constant_depth_has_zero_irregularity() {
        let f = synthetic(vec![Some(2.0); 64 * 48], 64, 48);
        let xi = block_irregularity(&f, &normal_render(&f), &SamplingConfig::default());
        assert_eq!(xi.len(), NUM_BLOCKS);
        assert!(xi.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn two_depth_block_variance() {
        // 16x16 image: block 0 covers pixels 0..2 x 0..2
        let mut depth = vec![None; 256];
        depth[0] = Some(1.0);
        depth[1] = Some(3.0);
        let f = synthetic(depth, 16, 16);
        let cos = vec![Some(0.5); 256];
        let cfg = SamplingConfig::default();
        let xi = block_irregularity(&f, &cos, &cfg);
        assert!((xi[0] - 0.7).abs() < 1e-12);
        assert!(xi[1..].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn scaling_depth_scales_depth_term_by_four() {
        let f = plane_frame(40.0);
        let cfg = SamplingConfig {
            normal_weight: 0.0,
            ..Default::default()
        };
        let cos = normal_render(&f);
        let a = block_irregularity(&f, &cos, &cfg);
        let mut g = f.clone();
        g.depth.iter_mut().flatten().for_each(|d| *d *= 2.0);
        let b = block_irregularity(&g, &cos, &cfg);
        for (x, y) in a.iter().zip(&b) {
            assert!((y - 4.0 * x).abs() <= 1e-9 * y.abs().max(1e-12));
        }
    }

    #[test]
    fn remainder_pixels_go_to_last_block() {
        assert_eq!(block_span(7, 65), (56, 65));
        assert_eq!(block_span(0, 65), (0, 8));
    }

    #[test]
    fn equal_weights_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let counts = allocate_counts(&[1.0; 64], 200, &mut rng).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), 200);
        // 200 / 64 = 3.125: eight blocks get the remainder pixels
        assert_eq!(counts.iter().filter(|c| **c == 4).count(), 8);
        assert!(counts.iter().all(|c| *c == 3 || *c == 4));
    }

    #[test]
    fn rounded_counts_are_unbiased() {
        let weights = [0.3, 1.0, 0.05, 2.2, 0.7];
        let sum: f64 = weights.iter().sum();
        let m = 37;
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut totals = [0usize; 5];
        for _ in 0..n {
            for (t, c) in totals.iter_mut().zip(allocate_counts(&weights, m, &mut rng).unwrap()) {
                *t += c;
            }
        }
        for (t, w) in totals.iter().zip(&weights) {
            let share = m as f64 * w / sum;
            let frac = share - share.floor();
            // per-draw count is floor + Bernoulli(frac); allow 5 sigma
            let tol = 5.0 * (frac * (1.0 - frac) / n as f64).sqrt() + 1e-12;
            assert!((*t as f64 / n as f64 - share).abs() <= tol, "{t} vs {share}");
        }
    }

    #[test]
    fn single_hot_block_gets_everything() {
        let mut xi = vec![0.0; 64];
        xi[17] = 0.3;
        let counts = allocate_counts(&xi, 200, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(counts[17], 200);
        let f = plane_frame(20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sel = sample_pixels(&f, &xi, &SamplingConfig::default(), &mut rng).unwrap();
        assert_eq!(sel.pixels.len(), 200);
        let (u0, u1) = block_span(1, 65);
        let (v0, v1) = block_span(2, 49);
        assert!(sel
            .pixels
            .iter()
            .all(|&(u, v)| (u0..u1).contains(&u) && (v0..v1).contains(&v)));
    }

    #[test]
    fn zero_irregularity_falls_back_to_uniform() {
        let f = plane_frame(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sel = sample_pixels(&f, &[0.0; 64], &SamplingConfig::default(), &mut rng).unwrap();
        assert_eq!(sel.pixels.len(), 200);
        assert_eq!(sel.block_counts.iter().sum::<usize>(), 200);
    }

    #[test]
    fn no_valid_pixels_is_an_error() {
        let f = synthetic(vec![None; 64 * 48], 64, 48);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = sample_pixels(&f, &[1.0; 64], &SamplingConfig::default(), &mut rng);
        assert!(matches!(r, Err(Error::NoValidPixels)));
    }

    proptest! {
        #[test]
        fn rounding_is_tight(weights in prop::collection::vec(0.0f64..10.0, 64), m in 64usize..1000, seed in 0u64..1000) {
            prop_assume!(weights.iter().sum::<f64>() > 0.0);
            let counts = allocate_counts(&weights, m, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(counts.iter().sum::<usize>(), m);
            let sum: f64 = weights.iter().sum();
            for (c, w) in counts.iter().zip(&weights) {
                prop_assert!((*c as f64 - m as f64 * w / sum).abs() < 1.0);
            }
        }
    }

    #[test]
    fn ray_samples_are_stratified_and_bounded() {
        let f = plane_frame(0.0);
        let cfg = SamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ray = sample_points((30, 20), &f, &cfg, &mut rng).unwrap();
        assert_eq!(ray.samples.len(), 28);
        let d = ray.surface_depth;
        let h = (d + cfg.behind_surface - cfg.min_depth) / 22.0;
        for (k, s) in ray.samples[..22].iter().enumerate() {
            assert_eq!(s.kind, SampleKind::Stratified);
            let lo = cfg.min_depth + k as f64 * h;
            assert!(s.depth >= lo - 1e-12 && s.depth <= lo + h + 1e-12);
        }
        for s in &ray.samples {
            assert!(s.depth >= cfg.min_depth && s.depth <= d + cfg.behind_surface);
            let expected = f.origin() + f.ray(30, 20) * s.depth;
            assert!((s.point - expected).norm() < 1e-12);
        }
        let surf = ray.samples.last().unwrap();
        assert_eq!(surf.kind, SampleKind::Surface);
        assert_eq!(surf.depth, d);
        // the plane is z = 0
        assert!(surf.point.z.abs() < 1e-3);
    }

    #[test]
    fn near_surface_draws_are_centered() {
        let f = plane_frame(0.0);
        let cfg = SamplingConfig {
            stratified_samples: 1,
            near_surface_samples: 10_000,
            behind_surface: 10.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ray = sample_points((32, 24), &f, &cfg, &mut rng).unwrap();
        let near: Vec<f64> = ray
            .samples
            .iter()
            .filter(|s| s.kind == SampleKind::NearSurface)
            .map(|s| s.depth)
            .collect();
        let mean = near.iter().sum::<f64>() / near.len() as f64;
        assert!((mean - ray.surface_depth).abs() < 3.0 * cfg.near_surface_std / 100.0);
    }

    #[test]
    fn sample_points_errors() {
        let mut f = plane_frame(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        f.depth[0] = None;
        assert!(matches!(
            sample_points((0, 0), &f, &SamplingConfig::default(), &mut rng),
            Err(Error::InvalidPixel { .. })
        ));
        let cfg = SamplingConfig {
            min_depth: 5.0,
            ..Default::default()
        };
        assert!(matches!(
            sample_points((32, 24), &f, &cfg, &mut rng),
            Err(Error::SurfaceTooClose { .. })
        ));
    }

    #[test]
    fn config_validation_names_keys() {
        let cfg = SamplingConfig {
            pixels_per_frame: 10,
            ..Default::default()
        };
        let e = cfg.validate("sampling").unwrap_err().to_string();
        assert!(e.contains("sampling.pixels_per_frame"), "{e}");
        let cfg = SamplingConfig {
            depth_weight: 0.0,
            normal_weight: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate("sampling").is_err());
    }
}
