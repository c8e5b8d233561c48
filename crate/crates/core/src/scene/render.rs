use nalgebra::Point3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CameraModel, DepthFrame, Pose, Scene};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    /// Sphere tracing stops once the scene distance drops below this (meters).
    pub surface_tolerance: f64,
    pub max_steps: usize,
    /// Standard deviation of additive Gaussian depth noise; 0 disables it.
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            surface_tolerance: 1e-4,
            max_steps: 512,
            noise_std: 0.0,
            noise_seed: 0,
        }
    }
}

/// Renders a z-depth image by sphere tracing the scene distance field.
pub fn render_depth(
    scene: &Scene,
    pose: &Pose,
    camera: &CameraModel,
    index: usize,
    opts: &RenderOptions,
) -> Result<DepthFrame> {
    camera.validate()?;
    super::camera::validate_rotation(pose.rotation.matrix())?;
    let origin = Point3::from(pose.translation.vector);
    let rows: Vec<Result<Vec<Option<f64>>>> = (0..camera.height)
        .into_par_iter()
        .map(|v| {
            (0..camera.width)
                .map(|u| {
                    let ray = pose.rotation * camera.unproject(u, v);
                    let scale = ray.norm();
                    if !(scale.is_finite() && scale > 0.0) {
                        return Err(Error::DegenerateRay { u, v });
                    }
                    let dir = ray / scale;
                    let Some(t) = trace(scene, &origin, &dir, camera.far * scale, opts) else {
                        return Ok(None);
                    };
                    let depth = t / scale;
                    Ok(Some(depth).filter(|d| *d > camera.near && *d < camera.far))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect();
    let mut depth = Vec::with_capacity(camera.width * camera.height);
    for row in rows {
        depth.extend(row?);
    }
    if opts.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.noise_seed);
        rng.set_stream(index as u64);
        let noise = Normal::new(0.0, opts.noise_std).expect("positive std");
        for d in depth.iter_mut() {
            if let Some(z) = d {
                let noisy = *z + noise.sample(&mut rng);
                *d = Some(noisy).filter(|n| *n > camera.near && *n < camera.far);
            }
        }
    }
    Ok(DepthFrame {
        depth,
        pose: *pose,
        camera: *camera,
        index,
    })
}

// Distance along the unit direction to the first surface hit, if any.
fn trace(
    scene: &Scene,
    origin: &Point3<f64>,
    dir: &nalgebra::Vector3<f64>,
    max_t: f64,
    opts: &RenderOptions,
) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..opts.max_steps {
        let d = scene.sdf(&(origin + dir * t));
        if d < opts.surface_tolerance {
            return Some(t);
        }
        t += d;
        if t >= max_t {
            return None;
        }
    }
    None
}
