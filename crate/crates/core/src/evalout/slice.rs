//! Planar cross-sections of the learned field.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use super::query_field;
use crate::fusion::GridStore;
use crate::io_util::write_atomic;
use crate::mlpfield::{FieldParams, Real};
use crate::spatial::KdTree;
use crate::{Error, Result};

/// Distances at or beyond this magnitude get the fully saturated color, meters.
pub const COLOR_CLIP: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// The two world axes spanning the slice plane, in (column, row) order.
    fn plane_axes(self) -> [usize; 2] {
        match self {
            Axis::X => [1, 2],
            Axis::Y => [0, 2],
            Axis::Z => [0, 1],
        }
    }
}

/// An axis-aligned slice: the plane `axis = value`, clipped to a rectangle
/// in the two remaining coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSpec {
    pub axis: Axis,
    pub value: f64,
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub resolution: f64,
}

impl SliceSpec {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::config(format!("{prefix}.resolution"), "must be positive"));
        }
        if !self.value.is_finite() || (0..2).any(|a| !(self.max[a] > self.min[a]) || !self.max[a].is_finite()) {
            return Err(Error::config(format!("{prefix}.max"), "bounds must be finite and non-degenerate"));
        }
        Ok(())
    }

    /// `(columns, rows)`: `ceil(extent / resolution)` per axis.
    pub fn dims(&self) -> (usize, usize) {
        let n = |a: usize| ((self.max[a] - self.min[a]) / self.resolution).ceil() as usize;
        (n(0), n(1))
    }

    /// World position of the center of cell `(col, row)`.
    pub fn point(&self, col: usize, row: usize) -> [f64; 3] {
        let mut p = [0.0; 3];
        p[self.axis.index()] = self.value;
        let [a, b] = self.axis.plane_axes();
        p[a] = self.min[0] + (col as f64 + 0.5) * self.resolution;
        p[b] = self.min[1] + (row as f64 + 0.5) * self.resolution;
        p
    }
}

/// Predicted distances over a slice, row-major with row 0 at `min[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub spec: SliceSpec,
    pub cols: usize,
    pub rows: usize,
    pub values: Vec<f64>,
    /// `true` where the nearest updated grid cell is farther than the mask radius.
    pub mask: Option<Vec<bool>>,
}

/// Evaluates the field over `spec`. With `observed = Some((store, radius))`
/// the slice also carries a mask of cells farther than `radius` from every
/// updated grid cell center; values are emitted everywhere regardless.
pub fn export_slice<T: Real>(
    params: &FieldParams<T>,
    spec: &SliceSpec,
    observed: Option<(&GridStore, f64)>,
) -> Result<Slice> {
    spec.validate("slice")?;
    let (cols, rows) = spec.dims();
    let points: Vec<[f64; 3]> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (c, r)))
        .map(|(c, r)| spec.point(c, r))
        .collect();
    let values = query_field(params, &points)?;
    let mask = observed.map(|(store, radius)| {
        let centers: Vec<Point3<f64>> = store.cells().keys().map(|k| store.cell_center(k)).collect();
        let tree = KdTree::new(centers);
        points
            .iter()
            .map(|p| match tree.nearest(&Point3::from(*p)) {
                Some((_, d2)) => d2.sqrt() > radius,
                None => true,
            })
            .collect()
    });
    Ok(Slice {
        spec: spec.clone(),
        cols,
        rows,
        values,
        mask,
    })
}

/// Diverging color for a signed distance: white at zero, red inside
/// (negative), blue in free space, saturating at `±COLOR_CLIP`.
pub fn distance_color(d: f64) -> [u8; 3] {
    let t = (d / COLOR_CLIP).clamp(-1.0, 1.0);
    let fade = (255.0 * (1.0 - t.abs())).round() as u8;
    if t >= 0.0 {
        [fade, fade, 255]
    } else {
        [255, fade, fade]
    }
}

const CONTOUR: [u8; 3] = [0, 0, 0];
const MASKED: [u8; 3] = [128, 128, 128];

impl Slice {
    pub fn value(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Cells where the field changes sign toward the next column or row.
    pub fn zero_crossings(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = self.value(c, r);
                let right = c + 1 < self.cols && (self.value(c + 1, r) < 0.0) != (v < 0.0);
                let up = r + 1 < self.rows && (self.value(c, r + 1) < 0.0) != (v < 0.0);
                if right || up {
                    out.push((c, r));
                }
            }
        }
        out
    }

    /// CSV: a `#` header line with the slice geometry, then one line per row.
    pub fn to_csv(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "# axis={:?} value={} min={},{} max={},{} resolution={} cols={} rows={}\n",
            s.axis, s.value, s.min[0], s.min[1], s.max[0], s.max[1], s.resolution, self.cols, self.rows
        );
        for r in 0..self.rows {
            let line: Vec<String> = (0..self.cols).map(|c| self.value(c, r).to_string()).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    /// Binary PPM with the top image row at `max[1]`. Masked cells are gray and
    /// zero crossings black.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        let mut pixels = vec![[0u8; 3]; self.cols * self.rows];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let i = r * self.cols + c;
                pixels[i] = match &self.mask {
                    Some(m) if m[i] => MASKED,
                    _ => distance_color(self.values[i]),
                };
            }
        }
        for (c, r) in self.zero_crossings() {
            pixels[r * self.cols + c] = CONTOUR;
        }
        for r in (0..self.rows).rev() {
            for px in &pixels[r * self.cols..(r + 1) * self.cols] {
                out.extend_from_slice(px);
            }
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.ppm`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.ppm")), &self.to_ppm())
    }
}
