//! Thin-plate-spline solving, point mapping and image warping.
//!
//! A spline is fitted between a `source` and a `target` set of control points.
//! Solving happens in a normalized frame: the source bounding box is shifted to
//! the origin and scaled isotropically by its larger side. Isotropic scaling
//! leaves the spline map unchanged (the side conditions absorb the
//! `r² log s²` term into the affine part), so the frame only affects
//! conditioning.
//!
//! Warping is backward: each output pixel `p` reads the input at
//! `apply_tps(C, p)` where `C` maps the regular grid onto the predicted mesh.
//! Because the system matrix depends only on the fixed source grid, the
//! sampled coordinate is a linear combination of the target points; see
//! [`TpsSystem::basis`].

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{sample_plane, ImageBuf};

/// Largest 1-norm condition number accepted for the spline system.
pub const MAX_CONDITION: f64 = 1e12;

/// A `rows × cols` lattice of control points in pixel coordinates, stored
/// row-major as `(x, y)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeshGridRepr", into = "MeshGridRepr")]
pub struct MeshGrid {
    rows: usize,
    cols: usize,
    points: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct MeshGridRepr {
    rows: usize,
    cols: usize,
    points: Vec<[f64; 2]>,
}

impl TryFrom<MeshGridRepr> for MeshGrid {
    type Error = Error;

    fn try_from(r: MeshGridRepr) -> Result<Self> {
        MeshGrid::new(r.rows, r.cols, r.points)
    }
}

impl From<MeshGrid> for MeshGridRepr {
    fn from(m: MeshGrid) -> Self {
        MeshGridRepr {
            rows: m.rows,
            cols: m.cols,
            points: m.points,
        }
    }
}

impl MeshGrid {
    pub fn new(rows: usize, cols: usize, points: Vec<[f64; 2]>) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::Argument(format!(
                "mesh must be at least 2x2, got {rows}x{cols}"
            )));
        }
        if points.len() != rows * cols {
            return Err(Error::Argument(format!(
                "mesh {rows}x{cols} needs {} points, got {}",
                rows * cols,
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Argument("mesh contains non-finite coordinates".into()));
        }
        Ok(Self { rows, cols, points })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn point(&self, row: usize, col: usize) -> [f64; 2] {
        self.points[row * self.cols + col]
    }

    pub fn same_dims(&self, other: &MeshGrid) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Same lattice shape with new point coordinates.
    pub fn with_points(&self, points: Vec<[f64; 2]>) -> Result<MeshGrid> {
        MeshGrid::new(self.rows, self.cols, points)
    }

    /// Maps every point through `f`.
    pub fn map_points(&self, mut f: impl FnMut([f64; 2]) -> [f64; 2]) -> MeshGrid {
        MeshGrid {
            rows: self.rows,
            cols: self.cols,
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> MeshGrid {
        self.map_points(|[x, y]| [x + dx, y + dy])
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> MeshGrid {
        self.map_points(|[x, y]| [x * sx, y * sy])
    }

    /// Outer ring of the lattice in traversal order: top row left to right,
    /// right column downwards, bottom row right to left, left column upwards.
    pub fn boundary_ring(&self) -> Vec<[f64; 2]> {
        let (r, c) = (self.rows, self.cols);
        let mut ring = Vec::with_capacity(2 * (r + c) - 4);
        ring.extend((0..c).map(|j| self.point(0, j)));
        ring.extend((1..r).map(|i| self.point(i, c - 1)));
        ring.extend((0..c - 1).rev().map(|j| self.point(r - 1, j)));
        ring.extend((1..r - 1).rev().map(|i| self.point(i, 0)));
        ring
    }

    /// Root-mean-square point distance to another mesh of equal shape.
    pub fn rmse(&self, other: &MeshGrid) -> f64 {
        assert!(self.same_dims(other), "mesh shapes differ");
        let ss: f64 = self
            .points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
            .sum();
        (ss / self.len() as f64).sqrt()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<MeshGrid> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Evenly spaced lattice spanning `[x0, x1] × [y0, y1]` inclusive.
pub fn regular_grid(
    rows: usize,
    cols: usize,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
) -> Result<MeshGrid> {
    if rows < 2 || cols < 2 {
        return Err(Error::Argument(format!(
            "grid must be at least 2x2, got {rows}x{cols}"
        )));
    }
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::Argument(format!(
            "degenerate grid bounds [{x0}, {x1}] x [{y0}, {y1}]"
        )));
    }
    let mut points = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let y = y0 + (y1 - y0) * i as f64 / (rows - 1) as f64;
        for j in 0..cols {
            let x = x0 + (x1 - x0) * j as f64 / (cols - 1) as f64;
            points.push([x, y]);
        }
    }
    MeshGrid::new(rows, cols, points)
}

/// Regular grid whose corners sit on the corner pixel centers of a
/// `width × height` raster.
pub fn frame_grid(rows: usize, cols: usize, width: usize, height: usize) -> Result<MeshGrid> {
    regular_grid(
        rows,
        cols,
        0.0,
        0.0,
        width.saturating_sub(1) as f64,
        height.saturating_sub(1) as f64,
    )
}

/// `φ(r) = ‖r‖² log ‖r‖²`, with `φ(0) = 0`.
pub fn tps_kernel(r: [f64; 2]) -> f64 {
    kernel_r2(r[0] * r[0] + r[1] * r[1])
}

#[inline]
pub(crate) fn kernel_r2(r2: f64) -> f64 {
    if r2 > 0.0 {
        r2 * r2.ln()
    } else {
        0.0
    }
}

/// Gradient of `φ` with respect to `r`: `2 r (log ‖r‖² + 1)`.
#[inline]
pub(crate) fn kernel_grad(r: [f64; 2]) -> [f64; 2] {
    let r2 = r[0] * r[0] + r[1] * r[1];
    if r2 > 0.0 {
        let s = 2.0 * (r2.ln() + 1.0);
        [s * r[0], s * r[1]]
    } else {
        [0.0, 0.0]
    }
}

/// Translation and isotropic scale into the solving frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub origin: [f64; 2],
    pub scale: f64,
}

impl Frame {
    pub(crate) fn of_points(points: &[[f64; 2]]) -> Frame {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        Frame {
            origin: lo,
            scale: if extent > 0.0 { extent } else { 1.0 },
        }
    }

    #[inline]
    pub fn to_unit(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.origin[0]) / self.scale,
            (p[1] - self.origin[1]) / self.scale,
        ]
    }

    #[inline]
    pub fn from_unit(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0] * self.scale + self.origin[0],
            p[1] * self.scale + self.origin[1],
        ]
    }
}

/// The factored `(k+3) × (k+3)` spline system for a fixed source point set.
///
/// Holds the explicit inverse so repeated solves against new targets, and the
/// linear target-to-coordinate basis, are cheap.
#[derive(Debug, Clone)]
pub struct TpsSystem {
    frame: Frame,
    source: MeshGrid,
    unit_source: Vec<[f64; 2]>,
    inverse: DMatrix<f64>,
    condition: f64,
}

impl TpsSystem {
    /// Factors the system for `source`. `damping` adds a bending-energy
    /// regularizer to the kernel diagonal (0 gives exact interpolation).
    pub fn new(source: &MeshGrid, damping: f64) -> Result<TpsSystem> {
        let k = source.len();
        if k < 3 {
            return Err(Error::Argument(format!("need at least 3 control points, got {k}")));
        }
        check_duplicates(source.points())?;
        let frame = Frame::of_points(source.points());
        let unit_source: Vec<[f64; 2]> =
            source.points().iter().map(|&p| frame.to_unit(p)).collect();
        let system = assemble(&unit_source, damping);
        let norm = one_norm(&system);
        let inverse = system.try_inverse().ok_or_else(|| {
            Error::Numerical("spline system is singular (collinear control points?)".into())
        })?;
        let condition = norm * one_norm(&inverse);
        if !condition.is_finite() || condition > MAX_CONDITION {
            return Err(Error::Numerical(format!(
                "spline system is ill-conditioned: 1-norm condition {condition:.3e} exceeds {MAX_CONDITION:.0e}"
            )));
        }
        Ok(TpsSystem {
            frame,
            source: source.clone(),
            unit_source,
            inverse,
            condition,
        })
    }

    pub fn source(&self) -> &MeshGrid {
        &self.source
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    /// 1-norm condition number of the assembled system.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Coefficients mapping the source onto `target`.
    pub fn solve(&self, target: &MeshGrid) -> Result<TpsCoefficients> {
        let k = self.source.len();
        if target.len() != k {
            return Err(Error::Argument(format!(
                "target has {} points, source has {k}",
                target.len()
            )));
        }
        let mut rhs = DMatrix::<f64>::zeros(k + 3, 2);
        for (i, &t) in target.points().iter().enumerate() {
            let u = self.frame.to_unit(t);
            rhs[(i, 0)] = u[0];
            rhs[(i, 1)] = u[1];
        }
        let sol = &self.inverse * rhs;
        let weights = (0..k).map(|i| [sol[(i, 0)], sol[(i, 1)]]).collect();
        let affine = [
            [sol[(k, 0)], sol[(k, 1)]],
            [sol[(k + 1, 0)], sol[(k + 1, 1)]],
            [sol[(k + 2, 0)], sol[(k + 2, 1)]],
        ];
        Ok(TpsCoefficients {
            frame: self.frame,
            source: self.source.clone(),
            unit_source: self.unit_source.clone(),
            weights,
            affine,
        })
    }

    /// Per-target-point weights `b_j(u)` such that the mapped coordinate of `u`
    /// is `Σ_j b_j(u) · target_j` (pixel units). The weights sum to one.
    pub fn basis(&self, u: [f64; 2]) -> Vec<f64> {
        let mut out = vec![0.0; self.source.len()];
        let mut lift = vec![0.0; self.source.len() + 3];
        self.basis_into(u, &mut lift, &mut out);
        out
    }

    /// Allocation-free form of [`TpsSystem::basis`]; `lift` needs `k + 3`
    /// slots and `out` needs `k`.
    pub fn basis_into(&self, u: [f64; 2], lift: &mut [f64], out: &mut [f64]) {
        let k = self.source.len();
        let un = self.frame.to_unit(u);
        for (l, s) in lift.iter_mut().zip(&self.unit_source) {
            *l = kernel_r2((un[0] - s[0]).powi(2) + (un[1] - s[1]).powi(2));
        }
        lift[k] = 1.0;
        lift[k + 1] = un[0];
        lift[k + 2] = un[1];
        // The target block of the inverse is its first k columns; the system is
        // symmetric, so read rows instead for contiguous access.
        for (j, o) in out.iter_mut().enumerate() {
            let row = self.inverse.column(j);
            *o = row.iter().zip(lift.iter()).map(|(a, b)| a * b).sum();
        }
    }
}

fn check_duplicates(points: &[[f64; 2]]) -> Result<()> {
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            if a == b {
                return Err(Error::Numerical(format!(
                    "duplicate control point ({}, {}) makes the spline system singular",
                    a[0], a[1]
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn assemble(unit_source: &[[f64; 2]], damping: f64) -> DMatrix<f64> {
    let k = unit_source.len();
    let mut m = DMatrix::<f64>::zeros(k + 3, k + 3);
    for i in 0..k {
        for j in 0..k {
            let d = [
                unit_source[i][0] - unit_source[j][0],
                unit_source[i][1] - unit_source[j][1],
            ];
            m[(i, j)] = tps_kernel(d);
        }
        m[(i, i)] += damping;
        m[(i, k)] = 1.0;
        m[(k, i)] = 1.0;
        m[(i, k + 1)] = unit_source[i][0];
        m[(k + 1, i)] = unit_source[i][0];
        m[(i, k + 2)] = unit_source[i][1];
        m[(k + 2, i)] = unit_source[i][1];
    }
    m
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solved spline: nonlinear `weights` (k × 2) and `affine` rows for the
/// constant, x and y terms, all expressed in the normalized frame.
#[derive(Debug, Clone)]
pub struct TpsCoefficients {
    frame: Frame,
    source: MeshGrid,
    unit_source: Vec<[f64; 2]>,
    pub weights: Vec<[f64; 2]>,
    pub affine: [[f64; 2]; 3],
}

impl TpsCoefficients {
    pub fn source(&self) -> &MeshGrid {
        &self.source
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    /// Maps a pixel-space point.
    #[inline]
    pub fn apply(&self, u: [f64; 2]) -> [f64; 2] {
        let un = self.frame.to_unit(u);
        let a = &self.affine;
        let mut out = [
            a[0][0] + a[1][0] * un[0] + a[2][0] * un[1],
            a[0][1] + a[1][1] * un[0] + a[2][1] * un[1],
        ];
        for (w, s) in self.weights.iter().zip(&self.unit_source) {
            let phi = kernel_r2((un[0] - s[0]).powi(2) + (un[1] - s[1]).powi(2));
            out[0] += w[0] * phi;
            out[1] += w[1] * phi;
        }
        self.frame.from_unit(out)
    }

    /// Jacobian `∂apply/∂u` (row = output axis).
    pub fn jacobian(&self, u: [f64; 2]) -> [[f64; 2]; 2] {
        let un = self.frame.to_unit(u);
        let a = &self.affine;
        // Output and input share the frame scale, so it cancels.
        let mut j = [[a[1][0], a[2][0]], [a[1][1], a[2][1]]];
        for (w, s) in self.weights.iter().zip(&self.unit_source) {
            let g = kernel_grad([un[0] - s[0], un[1] - s[1]]);
            j[0][0] += w[0] * g[0];
            j[0][1] += w[0] * g[1];
            j[1][0] += w[1] * g[0];
            j[1][1] += w[1] * g[1];
        }
        j
    }

    /// Largest violation of the side conditions `Σw = 0`, `Σw·x = Σw·y = 0`.
    pub fn side_condition_residual(&self) -> f64 {
        let mut sums = [0.0f64; 6];
        for (w, s) in self.weights.iter().zip(&self.unit_source) {
            for a in 0..2 {
                sums[a] += w[a];
                sums[2 + a] += w[a] * s[0];
                sums[4 + a] += w[a] * s[1];
            }
        }
        sums.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_weight(&self) -> f64 {
        self.weights
            .iter()
            .flatten()
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

/// Fits the spline carrying `source` points onto `target` points.
pub fn solve_tps(source: &MeshGrid, target: &MeshGrid) -> Result<TpsCoefficients> {
    if source.len() != target.len() {
        return Err(Error::Argument(format!(
            "source has {} points, target has {}",
            source.len(),
            target.len()
        )));
    }
    TpsSystem::new(source, 0.0)?.solve(target)
}

pub fn apply_tps(c: &TpsCoefficients, u: [f64; 2]) -> [f64; 2] {
    c.apply(u)
}

/// Dense per-pixel sampling coordinates for an output raster.
#[derive(Debug, Clone)]
pub struct CoordMap {
    pub width: usize,
    pub height: usize,
    pub coords: Vec<[f64; 2]>,
}

impl CoordMap {
    /// Evaluates `f` at every output pixel center.
    pub fn from_fn(
        width: usize,
        height: usize,
        f: impl Fn([f64; 2]) -> [f64; 2] + Sync,
    ) -> CoordMap {
        let mut coords = vec![[0.0; 2]; width * height];
        coords
            .par_chunks_mut(width)
            .enumerate()
            .for_each(|(y, row)| {
                for (x, c) in row.iter_mut().enumerate() {
                    *c = f([x as f64, y as f64]);
                }
            });
        CoordMap {
            width,
            height,
            coords,
        }
    }

    /// Reads every channel of `img` at the mapped coordinates.
    pub fn sample(&self, img: &ImageBuf) -> ImageBuf {
        let ch = img.channels();
        let mut data = vec![0.0; self.width * self.height * ch];
        data.par_chunks_mut(self.width * ch)
            .zip(self.coords.par_chunks(self.width))
            .for_each(|(row, coords)| {
                for (x, c) in coords.iter().enumerate() {
                    for k in 0..ch {
                        row[x * ch + k] = sample_plane(
                            img.data(),
                            img.width(),
                            img.height(),
                            ch,
                            k,
                            c[0],
                            c[1],
                        )
                        .value;
                    }
                }
            });
        ImageBuf::new(self.width, self.height, ch, data).expect("sampled values are finite")
    }
}

/// Dewarps `img`: the spline carries `regular` onto `predicted`, and output
/// pixel `p` reads `img` at the image of `p`.
pub fn warp_image(
    img: &ImageBuf,
    predicted: &MeshGrid,
    regular: &MeshGrid,
    out_w: usize,
    out_h: usize,
) -> Result<ImageBuf> {
    if !predicted.same_dims(regular) {
        return Err(Error::Argument(format!(
            "mesh shapes differ: {}x{} vs {}x{}",
            predicted.rows(),
            predicted.cols(),
            regular.rows(),
            regular.cols()
        )));
    }
    if out_w == 0 || out_h == 0 {
        return Err(Error::Argument("output size must be at least 1x1".into()));
    }
    let coeffs = solve_tps(regular, predicted)?;
    Ok(CoordMap::from_fn(out_w, out_h, |p| coeffs.apply(p)).sample(img))
}

#[inline]
fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// True when every cell keeps the orientation of a regular grid under both
/// diagonal triangulations (no fold-over).
pub fn validate_mesh(m: &MeshGrid) -> bool {
    (0..m.rows() - 1).all(|i| (0..m.cols() - 1).all(|j| cell_is_valid(m, i, j)))
}

/// Orientation test of the cell whose top-left node is `(i, j)`.
pub(crate) fn cell_is_valid(m: &MeshGrid, i: usize, j: usize) -> bool {
    let p00 = m.point(i, j);
    let p01 = m.point(i, j + 1);
    let p10 = m.point(i + 1, j);
    let p11 = m.point(i + 1, j + 1);
    cross(p00, p01, p11) > 0.0
        && cross(p00, p11, p10) > 0.0
        && cross(p00, p01, p10) > 0.0
        && cross(p01, p11, p10) > 0.0
}
