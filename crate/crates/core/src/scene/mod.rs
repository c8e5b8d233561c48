//! Analytic scenes with exact signed-distance oracles, plus everything needed
//! to turn them into posed depth frames.
//!
//! Sign convention: positive in free space, negative inside solids. A scene is
//! the union of its primitives, so its distance is the pointwise minimum.

mod camera;
mod dataset;
mod render;
mod trajectory;

pub use camera::{CameraModel, DepthFrame, Pose};
pub use dataset::{load_dataset, save_dataset, DatasetMeta};
pub use render::{render_depth, RenderOptions};
pub use trajectory::{generate_trajectory, look_at, TrajectoryPolicy};

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

/// A solid with a closed-form signed distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box given by its center and half extents.
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    /// Half-space solid. `normal` points into free space; the solid lies behind
    /// the plane through `point`.
    Plane { point: [f64; 3], normal: [f64; 3] },
}

impl Primitive {
    pub fn sdf(&self, q: &Point3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => {
                (q - Point3::from(*center)).norm() - radius
            }
            Primitive::Box {
                center,
                half_extents,
            } => {
                let rel = q - Point3::from(*center);
                let d = rel.abs() - Vector3::from(*half_extents);
                let outside = d.map(|v| v.max(0.0)).norm();
                let inside = d.x.max(d.y).max(d.z).min(0.0);
                outside + inside
            }
            Primitive::Plane { point, normal } => {
                let n = Vector3::from(*normal).normalize();
                n.dot(&(q - Point3::from(*point)))
            }
        }
    }

    fn validate(&self, key: &str) -> crate::Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let ok = match self {
            Primitive::Sphere { center, radius } => finite(center) && *radius > 0.0,
            Primitive::Box {
                center,
                half_extents,
            } => finite(center) && half_extents.iter().all(|h| *h > 0.0 && h.is_finite()),
            Primitive::Plane { point, normal } => {
                finite(point) && finite(normal) && Vector3::from(*normal).norm() > 1e-12
            }
        };
        if ok {
            Ok(())
        } else {
            Err(crate::Error::config(key, "degenerate primitive parameters"))
        }
    }
}

/// Union of analytic primitives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        Self { primitives }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.primitives.is_empty() {
            return Err(crate::Error::config("scene.primitives", "scene needs at least one primitive"));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            p.validate(&format!("scene.primitives[{i}]"))?;
        }
        Ok(())
    }

    /// Exact signed distance under the union rule.
    ///
    /// Exact everywhere in free space; inside overlapping solids it is an upper
    /// bound on the penetration depth.
    pub fn sdf(&self, q: &Point3<f64>) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.sdf(q))
            .fold(f64::INFINITY, f64::min)
    }

    /// Closed room with walls at `min`/`max` (the interior is free space).
    pub fn room(min: [f64; 3], max: [f64; 3]) -> Self {
        let mut primitives = Vec::with_capacity(6);
        for axis in 0..3 {
            let mut n = [0.0; 3];
            n[axis] = 1.0;
            primitives.push(Primitive::Plane { point: min, normal: n });
            n[axis] = -1.0;
            primitives.push(Primitive::Plane { point: max, normal: n });
        }
        Self { primitives }
    }

    /// The 4 m room used by the convergence experiments: a floating sphere of
    /// radius 0.5 m and a box resting on the floor.
    pub fn demo_room() -> Self {
        let mut scene = Self::room([-2.0, -2.0, 0.0], [2.0, 2.0, 4.0]);
        scene.primitives.push(Primitive::Sphere {
            center: [0.5, 0.4, 1.0],
            radius: 0.5,
        });
        scene.primitives.push(Primitive::Box {
            center: [-0.8, -0.6, 0.4],
            half_extents: [0.35, 0.3, 0.4],
        });
        scene
    }

    /// Bounding box of the bounded primitives (spheres and boxes), if any.
    pub fn object_bounds(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut any = false;
        for p in &self.primitives {
            let (c, h) = match p {
                Primitive::Sphere { center, radius } => (*center, [*radius; 3]),
                Primitive::Box {
                    center,
                    half_extents,
                } => (*center, *half_extents),
                Primitive::Plane { .. } => continue,
            };
            any = true;
            for k in 0..3 {
                lo[k] = lo[k].min(c[k] - h[k]);
                hi[k] = hi[k].max(c[k] + h[k]);
            }
        }
        any.then_some((lo, hi))
    }
}

/// Convenience free function mirroring [`Scene::sdf`].
pub fn scene_sdf(scene: &Scene, q: &Point3<f64>) -> f64 {
    scene.sdf(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_sphere() -> Scene {
        Scene::new(vec![Primitive::Sphere {
            center: [0.0; 3],
            radius: 1.0,
        }])
    }

    #[test]
    fn sphere_distances() {
        let s = unit_sphere();
        assert_eq!(s.sdf(&Point3::new(2.0, 0.0, 0.0)), 1.0);
        assert_eq!(s.sdf(&Point3::new(0.0, 0.0, 0.0)), -1.0);
    }

    #[test]
    fn union_takes_minimum() {
        let s = Scene::new(vec![
            Primitive::Sphere {
                center: [3.0, 0.0, 0.0],
                radius: 1.0,
            },
            Primitive::Sphere {
                center: [-3.0, 0.0, 0.0],
                radius: 1.0,
            },
        ]);
        assert_eq!(s.sdf(&Point3::origin()), 2.0);
    }

    #[test]
    fn box_inside_and_corner() {
        let b = Primitive::Box {
            center: [0.0; 3],
            half_extents: [1.0, 2.0, 3.0],
        };
        assert_eq!(b.sdf(&Point3::origin()), -1.0);
        let corner = b.sdf(&Point3::new(2.0, 3.0, 3.0));
        assert!((corner - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(b.sdf(&Point3::new(0.0, 0.0, 5.0)), 2.0);
    }

    #[test]
    fn room_interior_distance_is_nearest_wall() {
        let room = Scene::room([-2.0, -2.0, 0.0], [2.0, 2.0, 4.0]);
        assert!((room.sdf(&Point3::new(1.5, 0.0, 2.0)) - 0.5).abs() < 1e-12);
        assert!((room.sdf(&Point3::new(0.0, 0.0, 0.25)) - 0.25).abs() < 1e-12);
        assert!(room.sdf(&Point3::new(3.0, 0.0, 2.0)) < 0.0);
    }

    #[test]
    fn validation_rejects_empty_and_degenerate() {
        assert!(Scene::new(vec![]).validate().is_err());
        let bad = Scene::new(vec![Primitive::Sphere {
            center: [0.0; 3],
            radius: -1.0,
        }]);
        assert!(bad.validate().is_err());
        assert!(Scene::demo_room().validate().is_ok());
    }

    fn arb_primitive() -> impl Strategy<Value = Primitive> {
        let v = || prop::array::uniform3(-2.0f64..2.0);
        prop_oneof![
            (v(), 0.1f64..2.0).prop_map(|(c, r)| Primitive::Sphere { center: c, radius: r }),
            (v(), prop::array::uniform3(0.1f64..2.0)).prop_map(|(c, h)| Primitive::Box {
                center: c,
                half_extents: h
            }),
            (v(), v()).prop_filter("nonzero normal", |(_, n)| {
                Vector3::from(*n).norm() > 1e-3
            })
            .prop_map(|(p, n)| Primitive::Plane { point: p, normal: n }),
        ]
    }

    proptest! {
        #[test]
        fn primitives_are_one_lipschitz(
            prim in arb_primitive(),
            a in prop::array::uniform3(-4.0f64..4.0),
            b in prop::array::uniform3(-4.0f64..4.0),
        ) {
            let (a, b) = (Point3::from(a), Point3::from(b));
            prop_assert!((prim.sdf(&a) - prim.sdf(&b)).abs() <= (a - b).norm() + 1e-9);
        }
    }
}
