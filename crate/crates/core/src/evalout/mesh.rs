//! Triangle meshes: marching-cubes extraction, PLY output, surface sampling
//! and exact point-to-mesh distance.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rayon::prelude::*;

use super::tables::{CORNERS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE};
use crate::io_util::write_atomic;
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    /// Unit normals pointing toward the positive side of the field.
    pub normals: Option<Vec<[f64; 3]>>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Fails if an index is out of range or a triangle repeats a vertex.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= n) {
                return Err(Error::Shape(format!("triangle {t} indexes past {n} vertices")));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::Shape(format!("triangle {t} repeats a vertex")));
            }
        }
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(Error::Shape(format!("{} normals for {n} vertices", normals.len())));
            }
        }
        Ok(())
    }

    pub fn triangle(&self, t: usize) -> [Point3<f64>; 3] {
        self.triangles[t].map(|i| Point3::from(self.vertices[i]))
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        (b - a).cross(&(c - a)).norm() * 0.5
    }

    /// ASCII PLY with vertex normals when present.
    pub fn to_ply(&self) -> String {
        let mut s = String::new();
        s.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(s, "element vertex {}", self.vertices.len());
        s.push_str("property float x\nproperty float y\nproperty float z\n");
        if self.normals.is_some() {
            s.push_str("property float nx\nproperty float ny\nproperty float nz\n");
        }
        let _ = writeln!(s, "element face {}", self.triangles.len());
        s.push_str("property list uchar int vertex_indices\nend_header\n");
        for (i, v) in self.vertices.iter().enumerate() {
            let _ = write!(s, "{} {} {}", v[0], v[1], v[2]);
            if let Some(n) = &self.normals {
                let _ = write!(s, " {} {} {}", n[i][0], n[i][1], n[i][2]);
            }
            s.push('\n');
        }
        for t in &self.triangles {
            let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_ply().as_bytes())
    }

    /// `n` points distributed uniformly by area over the surface.
    pub fn sample_surface<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Point3<f64>> {
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in 0..self.triangles.len() {
            total += self.area(t);
            cumulative.push(total);
        }
        if !(total > 0.0) {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                let x = rng.gen::<f64>() * total;
                let t = cumulative.partition_point(|&c| c <= x).min(cumulative.len() - 1);
                let [a, b, c] = self.triangle(t);
                let (mut r1, mut r2) = (rng.gen::<f64>(), rng.gen::<f64>());
                if r1 + r2 > 1.0 {
                    r1 = 1.0 - r1;
                    r2 = 1.0 - r2;
                }
                a + (b - a) * r1 + (c - a) * r2
            })
            .collect()
    }
}

/// Field values on a regular lattice, `x` fastest.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub origin: [f64; 3],
    pub spacing: f64,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
}

impl Lattice {
    /// Lattice of `ceil(extent / spacing) + 1` points per axis starting at `min`.
    pub fn covering(min: [f64; 3], max: [f64; 3], spacing: f64) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::config("resolution", "must be positive"));
        }
        let mut dims = [0; 3];
        for a in 0..3 {
            let extent = max[a] - min[a];
            if !(extent > 0.0 && extent.is_finite()) {
                return Err(Error::config("bounds", "must have positive extent on every axis"));
            }
            dims[a] = (extent / spacing).ceil() as usize + 1;
            if dims[a] < 3 {
                return Err(Error::config("bounds", "must span at least two cells per axis"));
            }
        }
        Ok(Self {
            origin: min,
            spacing,
            dims,
            values: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing,
            self.origin[1] + j as f64 * self.spacing,
            self.origin[2] + k as f64 * self.spacing,
        ]
    }

    /// All lattice points in storage order.
    pub fn points(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.len());
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    out.push(self.point(i, j, k));
                }
            }
        }
        out
    }

    /// Fills the values by evaluating `f` at every point.
    pub fn sample(mut self, f: impl Fn(&[f64; 3]) -> f64 + Sync + Send) -> Self {
        self.values = self.points().par_iter().map(f).collect();
        self
    }

    fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    /// Central-difference gradient at a lattice point (one-sided at borders).
    fn gradient(&self, c: [usize; 3]) -> Vector3<f64> {
        let mut g = Vector3::zeros();
        for a in 0..3 {
            let (mut lo, mut hi) = (c, c);
            if c[a] > 0 {
                lo[a] -= 1;
            }
            if c[a] + 1 < self.dims[a] {
                hi[a] += 1;
            }
            let span = (hi[a] - lo[a]) as f64 * self.spacing;
            g[a] = (self.value(hi[0], hi[1], hi[2]) - self.value(lo[0], lo[1], lo[2])) / span;
        }
        g
    }
}

/// Zero-level set of the lattice field. Vertices sit on lattice edges at the
/// linear interpolation of the endpoint values and are shared between
/// neighbouring cubes; triangles are wound so that their normals point toward
/// positive values.
pub fn marching_cubes(lattice: &Lattice) -> Result<Mesh> {
    if lattice.values.len() != lattice.len() {
        return Err(Error::Shape(format!(
            "lattice has {} values for {} points",
            lattice.values.len(),
            lattice.len()
        )));
    }
    if let Some(i) = lattice.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "field value", index: i });
    }
    let [nx, ny, nz] = lattice.dims;
    let mut mesh = Mesh::default();
    let mut normals = Vec::new();
    let mut edge_vertex: HashMap<(usize, u8), usize> = HashMap::new();
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let corner = |c: usize| [i + CORNERS[c][0], j + CORNERS[c][1], k + CORNERS[c][2]];
                let vals: [f64; 8] = std::array::from_fn(|c| {
                    let [a, b, d] = corner(c);
                    lattice.value(a, b, d)
                });
                let mut case = 0usize;
                for (c, v) in vals.iter().enumerate() {
                    if *v < 0.0 {
                        case |= 1 << c;
                    }
                }
                let edges = EDGE_TABLE[case];
                if edges == 0 {
                    continue;
                }
                let mut ids = [usize::MAX; 12];
                for (e, id) in ids.iter_mut().enumerate() {
                    if edges & (1 << e) == 0 {
                        continue;
                    }
                    let [c0, c1] = EDGE_CORNERS[e];
                    let (p0, p1) = (corner(c0), corner(c1));
                    let (v0, v1) = (vals[c0], vals[c1]);
                    let t = v0 / (v0 - v1);
                    let (i0, i1) = (lattice.index(p0[0], p0[1], p0[2]), lattice.index(p1[0], p1[1], p1[2]));
                    // a crossing exactly at a lattice point is shared by all its edges
                    let key = if t == 0.0 {
                        (i0, 3)
                    } else if t == 1.0 {
                        (i1, 3)
                    } else {
                        let axis = (0..3).find(|&a| p0[a] != p1[a]).expect("edge spans one axis") as u8;
                        (i0.min(i1), axis)
                    };
                    *id = *edge_vertex.entry(key).or_insert_with(|| {
                        let x0 = Vector3::from(lattice.point(p0[0], p0[1], p0[2]));
                        let x1 = Vector3::from(lattice.point(p1[0], p1[1], p1[2]));
                        let x = x0 + (x1 - x0) * t;
                        let g = lattice.gradient(p0) * (1.0 - t) + lattice.gradient(p1) * t;
                        let n = if g.norm() > 0.0 { g.normalize() } else { g };
                        mesh.vertices.push(x.into());
                        normals.push(n.into());
                        mesh.vertices.len() - 1
                    });
                }
                for tri in TRI_TABLE[case].chunks_exact(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let mut t = [ids[tri[0] as usize], ids[tri[1] as usize], ids[tri[2] as usize]];
                    let [a, b, c] = t.map(|v| Vector3::from(mesh.vertices[v]));
                    let face = (b - a).cross(&(c - a));
                    if face == Vector3::zeros() {
                        continue;
                    }
                    let field: Vector3<f64> = t.iter().map(|&v| Vector3::from(normals[v])).sum();
                    if face.dot(&field) < 0.0 {
                        t.swap(1, 2);
                    }
                    mesh.triangles.push(t);
                }
            }
        }
    }
    mesh.normals = Some(normals);
    Ok(mesh)
}

/// Closest point to `p` on triangle `abc`.
pub fn closest_point_on_triangle(p: &Point3<f64>, a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> Point3<f64> {
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(&ap), ac.dot(&ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(&bp), ac.dot(&bp));
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(&cp), ac.dot(&cp));
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = va + vb + vc;
    if denom.abs() < f64::MIN_POSITIVE {
        // collinear vertices: fall back to the nearest edge
        return [(*a, *b), (*b, *c), (*c, *a)]
            .into_iter()
            .map(|(s, e)| closest_on_segment(p, &s, &e))
            .min_by(|x, y| (x - p).norm_squared().total_cmp(&(y - p).norm_squared()))
            .expect("three edges");
    }
    let (v, w) = (vb / denom, vc / denom);
    a + ab * v + ac * w
}

fn closest_on_segment(p: &Point3<f64>, a: &Point3<f64>, b: &Point3<f64>) -> Point3<f64> {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return *a;
    }
    a + ab * ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
}

/// Distance from `p` to `mesh` by scanning every triangle.
pub fn distance_brute_force(mesh: &Mesh, p: &Point3<f64>) -> Option<f64> {
    (0..mesh.triangles.len())
        .map(|t| {
            let [a, b, c] = mesh.triangle(t);
            (closest_point_on_triangle(p, &a, &b, &c) - p).norm()
        })
        .min_by(f64::total_cmp)
}

#[derive(Debug, Clone)]
struct Node {
    lo: Point3<f64>,
    hi: Point3<f64>,
    /// Leaf: triangle range in `order`; inner: child indices.
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
}

/// Bounding-volume hierarchy over a mesh's triangles for exact nearest-surface queries.
pub struct MeshBvh<'a> {
    mesh: &'a Mesh,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

const BVH_LEAF: usize = 4;

impl<'a> MeshBvh<'a> {
    pub fn new(mesh: &'a Mesh) -> Self {
        let mut bvh = Self {
            mesh,
            order: (0..mesh.triangles.len()).collect(),
            nodes: Vec::new(),
        };
        if !mesh.triangles.is_empty() {
            let centroids: Vec<Point3<f64>> = (0..mesh.triangles.len())
                .map(|t| {
                    let [a, b, c] = mesh.triangle(t);
                    Point3::from((a.coords + b.coords + c.coords) / 3.0)
                })
                .collect();
            bvh.build(0, mesh.triangles.len(), &centroids);
        }
        bvh
    }

    fn bounds(&self, start: usize, end: usize) -> (Point3<f64>, Point3<f64>) {
        let mut lo = Point3::from([f64::INFINITY; 3]);
        let mut hi = Point3::from([f64::NEG_INFINITY; 3]);
        for &t in &self.order[start..end] {
            for v in self.mesh.triangle(t) {
                lo = lo.inf(&v);
                hi = hi.sup(&v);
            }
        }
        (lo, hi)
    }

    fn build(&mut self, start: usize, end: usize, centroids: &[Point3<f64>]) -> usize {
        let (lo, hi) = self.bounds(start, end);
        let id = self.nodes.len();
        self.nodes.push(Node {
            lo,
            hi,
            start,
            end,
            children: None,
        });
        if end - start > BVH_LEAF {
            let axis = (hi - lo).imax();
            let mid = (start + end) / 2;
            self.order[start..end].select_nth_unstable_by(mid - start, |&x, &y| {
                centroids[x][axis].total_cmp(&centroids[y][axis]).then(x.cmp(&y))
            });
            let left = self.build(start, mid, centroids);
            let right = self.build(mid, end, centroids);
            self.nodes[id].children = Some((left, right));
        }
        id
    }

    fn box_distance2(node: &Node, p: &Point3<f64>) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let d = (node.lo[a] - p[a]).max(p[a] - node.hi[a]).max(0.0);
            d2 += d * d;
        }
        d2
    }

    /// Exact distance from `p` to the nearest point of the mesh.
    pub fn distance(&self, p: &Point3<f64>) -> Option<f64> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if Self::box_distance2(node, p) >= best {
                continue;
            }
            match node.children {
                Some((l, r)) => {
                    let (dl, dr) = (
                        Self::box_distance2(&self.nodes[l], p),
                        Self::box_distance2(&self.nodes[r], p),
                    );
                    // visit the nearer child first
                    if dl <= dr {
                        stack.push(r);
                        stack.push(l);
                    } else {
                        stack.push(l);
                        stack.push(r);
                    }
                }
                None => {
                    for &t in &self.order[node.start..node.end] {
                        let [a, b, c] = self.mesh.triangle(t);
                        best = best.min((closest_point_on_triangle(p, &a, &b, &c) - p).norm_squared());
                    }
                }
            }
        }
        Some(best.sqrt())
    }
}
