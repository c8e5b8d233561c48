use nalgebra::{IsometryMatrix3, Matrix3, Point3, Rotation3, Translation3, Vector3};
use serde::{Deserialize, Serialize};

use super::{Pose, Scene};
use crate::{Error, Result};

/// How camera positions are laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryPolicy {
    /// Horizontal circle around `center`, always looking at `target`
    /// (defaults to `center`). Frame `i` sits at angle
    /// `start_deg + sweep_deg * i / n`.
    Orbit {
        center: [f64; 3],
        radius: f64,
        #[serde(default)]
        height: f64,
        #[serde(default)]
        start_deg: f64,
        #[serde(default = "full_turn")]
        sweep_deg: f64,
        #[serde(default)]
        target: Option<[f64; 3]>,
    },
    /// Boustrophedon sweep over the parallelogram spanned by `row_axis` and
    /// `col_axis` from `start`, with a fixed viewing direction.
    Lawnmower {
        start: [f64; 3],
        row_axis: [f64; 3],
        col_axis: [f64; 3],
        rows: usize,
        look_dir: [f64; 3],
    },
}

fn full_turn() -> f64 {
    360.0
}

/// World-from-camera pose at `eye` with the optical axis toward `target`.
/// World +z is "up"; image rows run downward.
pub fn look_at(eye: &Point3<f64>, target: &Point3<f64>) -> Pose {
    look_along(eye, &(target - eye))
}

fn look_along(eye: &Point3<f64>, dir: &Vector3<f64>) -> Pose {
    let forward = dir.normalize();
    let up = if forward.cross(&Vector3::z()).norm() < 1e-6 {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_columns(&[right, down, forward]);
    IsometryMatrix3::from_parts(
        Translation3::from(eye.coords),
        Rotation3::from_matrix_unchecked(r),
    )
}

/// Generates `n` camera poses, each at least `clearance` meters from any
/// surface.
pub fn generate_trajectory(
    scene: &Scene,
    n: usize,
    policy: &TrajectoryPolicy,
    clearance: f64,
) -> Result<Vec<Pose>> {
    if n == 0 {
        return Err(Error::Trajectory("need at least one frame".into()));
    }
    let poses: Vec<Pose> = match policy {
        TrajectoryPolicy::Orbit {
            center,
            radius,
            height,
            start_deg,
            sweep_deg,
            target,
        } => {
            let c = Point3::from(*center);
            let target = target.map(Point3::from).unwrap_or(c);
            (0..n)
                .map(|i| {
                    let a = (start_deg + sweep_deg * i as f64 / n as f64).to_radians();
                    let eye = c + Vector3::new(radius * a.cos(), radius * a.sin(), *height);
                    look_at(&eye, &target)
                })
                .collect()
        }
        TrajectoryPolicy::Lawnmower {
            start,
            row_axis,
            col_axis,
            rows,
            look_dir,
        } => {
            let dir = Vector3::from(*look_dir);
            if dir.norm() < 1e-12 || *rows == 0 {
                return Err(Error::Trajectory("degenerate lawnmower parameters".into()));
            }
            let path = lawnmower_path(
                Point3::from(*start),
                Vector3::from(*row_axis),
                Vector3::from(*col_axis),
                *rows,
            );
            resample_polyline(&path, n)
                .into_iter()
                .map(|eye| look_along(&eye, &dir))
                .collect()
        }
    };
    for (i, pose) in poses.iter().enumerate() {
        let eye = Point3::from(pose.translation.vector);
        let d = scene.sdf(&eye);
        if d < clearance {
            return Err(Error::Trajectory(format!(
                "camera {i} at ({:.3}, {:.3}, {:.3}) is {d:.3} m from a surface (clearance {clearance})",
                eye.x, eye.y, eye.z
            )));
        }
    }
    Ok(poses)
}

fn lawnmower_path(
    start: Point3<f64>,
    row: Vector3<f64>,
    col: Vector3<f64>,
    rows: usize,
) -> Vec<Point3<f64>> {
    let mut pts = Vec::with_capacity(2 * rows);
    for r in 0..rows {
        let offset = if rows > 1 {
            col * (r as f64 / (rows - 1) as f64)
        } else {
            Vector3::zeros()
        };
        let a = start + offset;
        let b = a + row;
        if r % 2 == 0 {
            pts.extend([a, b]);
        } else {
            pts.extend([b, a]);
        }
    }
    pts
}

// `n` points spaced evenly by arc length along the polyline, ends included.
fn resample_polyline(path: &[Point3<f64>], n: usize) -> Vec<Point3<f64>> {
    let seg: Vec<f64> = path.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    let total: f64 = seg.iter().sum();
    if n == 1 || total == 0.0 {
        return vec![path[0]; n];
    }
    (0..n)
        .map(|i| {
            let mut s = total * i as f64 / (n - 1) as f64;
            for (k, len) in seg.iter().enumerate() {
                if s <= *len || k == seg.len() - 1 {
                    let t = if *len > 0.0 { (s / len).min(1.0) } else { 0.0 };
                    return path[k] + (path[k + 1] - path[k]) * t;
                }
                s -= len;
            }
            unreachable!("non-empty polyline")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Primitive;

    fn sphere() -> Scene {
        Scene::new(vec![Primitive::Sphere {
            center: [0.0; 3],
            radius: 1.0,
        }])
    }

    fn orbit() -> TrajectoryPolicy {
        TrajectoryPolicy::Orbit {
            center: [0.0; 3],
            radius: 3.0,
            height: 0.0,
            start_deg: 0.0,
            sweep_deg: 360.0,
            target: None,
        }
    }

    #[test]
    fn orbit_quarter_turns_look_at_center() {
        let poses = generate_trajectory(&sphere(), 4, &orbit(), 0.1).unwrap();
        assert_eq!(poses.len(), 4);
        for (i, p) in poses.iter().enumerate() {
            let a = (90.0 * i as f64).to_radians();
            let eye = p.translation.vector;
            assert!((eye - Vector3::new(3.0 * a.cos(), 3.0 * a.sin(), 0.0)).norm() < 1e-12);
            let forward = p.rotation * Vector3::z();
            assert!((forward + eye.normalize()).norm() < 1e-9);
            let det = p.rotation.matrix().determinant();
            assert!((det - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_frame_and_clearance() {
        let scene = sphere();
        assert_eq!(generate_trajectory(&scene, 1, &orbit(), 0.1).unwrap().len(), 1);
        assert!(generate_trajectory(&scene, 0, &orbit(), 0.1).is_err());
        let inside = TrajectoryPolicy::Orbit {
            center: [0.0; 3],
            radius: 0.5,
            height: 0.0,
            start_deg: 0.0,
            sweep_deg: 360.0,
            target: None,
        };
        assert!(generate_trajectory(&scene, 3, &inside, 0.1).is_err());
    }

    #[test]
    fn lawnmower_positions_clear_of_surfaces() {
        let scene = Scene::demo_room();
        let policy = TrajectoryPolicy::Lawnmower {
            start: [1.5, -1.5, 1.0],
            row_axis: [0.0, 3.0, 0.0],
            col_axis: [0.0, 0.0, 1.5],
            rows: 3,
            look_dir: [-1.0, 0.0, 0.0],
        };
        let poses = generate_trajectory(&scene, 25, &policy, 0.2).unwrap();
        assert_eq!(poses.len(), 25);
        assert!((poses[0].translation.vector - Vector3::new(1.5, -1.5, 1.0)).norm() < 1e-12);
        for p in &poses {
            assert!(scene.sdf(&Point3::from(p.translation.vector)) >= 0.2);
            assert!((p.rotation * Vector3::z() - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-9);
        }
    }

    #[test]
    fn look_at_straight_down_is_valid() {
        let p = look_at(&Point3::new(0.0, 0.0, 2.0), &Point3::origin());
        let det = p.rotation.matrix().determinant();
        assert!((det - 1.0).abs() < 1e-9);
        assert!((p.rotation * Vector3::z() + Vector3::z()).norm() < 1e-9);
    }
}
