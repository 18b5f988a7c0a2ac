//! Seeded synthetic mesh deformations and mesh-region masks.
//!
//! Offsets are drawn from a smooth Gaussian random field over the control
//! lattice: i.i.d. standard normals are blurred by a separable Gaussian kernel
//! (width `correlation` cells) and renormalized to unit marginal variance, then
//! scaled to `sigma · min(W, H)` pixels and clamped. The generator is ChaCha8
//! seeded through `SeedableRng::seed_from_u64`, which is portable across
//! platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::tps::{frame_grid, solve_tps, validate_mesh, CoordMap, MeshGrid, TpsCoefficients};

/// Name of the random generator, recorded in reports.
pub const RNG_NAME: &str = "ChaCha8Rng(seed_from_u64)";

/// Fresh draws attempted after the first one when a mesh folds.
pub const MAX_RESAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationSpec {
    pub seed: u64,
    /// Offset standard deviation as a fraction of `min(W, H)`.
    pub sigma: f64,
    /// Lattice shape `(rows, cols)`.
    pub grid: (usize, usize),
    /// Offsets are clamped to `± clamp · sigma · min(W, H)`.
    pub clamp: f64,
    /// Correlation length of the offset field, in lattice cells.
    pub correlation: f64,
}

impl DeformationSpec {
    pub fn new(seed: u64, sigma: f64) -> Self {
        Self {
            seed,
            sigma,
            grid: (9, 9),
            clamp: 3.0,
            correlation: 1.5,
        }
    }

    pub fn with_grid(mut self, rows: usize, cols: usize) -> Self {
        self.grid = (rows, cols);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Argument(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.clamp > 0.0) {
            return Err(Error::Argument(format!("clamp must be > 0, got {}", self.clamp)));
        }
        if !(self.correlation >= 0.0) {
            return Err(Error::Argument(format!(
                "correlation must be >= 0, got {}",
                self.correlation
            )));
        }
        if self.grid.0 < 2 || self.grid.1 < 2 {
            return Err(Error::Argument(format!(
                "grid must be at least 2x2, got {}x{}",
                self.grid.0, self.grid.1
            )));
        }
        Ok(())
    }
}

/// Row-normalized-in-L2 smoothing matrix for one lattice axis.
fn smoothing_kernel(n: usize, correlation: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            if correlation == 0.0 {
                return (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect();
            }
            let row: Vec<f64> = (0..n)
                .map(|j| {
                    let d = i as f64 - j as f64;
                    (-d * d / (2.0 * correlation * correlation)).exp()
                })
                .collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.into_iter().map(|v| v / norm).collect()
        })
        .collect()
}

/// Unit-variance smooth field on a `rows × cols` lattice.
fn smooth_field(rng: &mut ChaCha8Rng, rows: usize, cols: usize, correlation: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    let kr = smoothing_kernel(rows, correlation);
    let kc = smoothing_kernel(cols, correlation);
    // Separable blur: along columns, then rows. Each kernel row has unit L2
    // norm, so the output has unit marginal variance.
    let mut tmp = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            tmp[i * cols + j] = (0..cols).map(|l| kc[j][l] * white[i * cols + l]).sum();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = (0..rows).map(|l| kr[i][l] * tmp[l * cols + j]).sum();
        }
    }
    out
}

/// Regular frame grid plus seeded, clamped, smooth Gaussian offsets. Folded
/// draws are rejected and redrawn up to [`MAX_RESAMPLES`] times.
pub fn random_mesh(spec: &DeformationSpec, width: usize, height: usize) -> Result<MeshGrid> {
    spec.validate()?;
    let (rows, cols) = spec.grid;
    let base = frame_grid(rows, cols, width, height)?;
    let scale = spec.sigma * width.min(height) as f64;
    let limit = spec.clamp * scale;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..=MAX_RESAMPLES {
        let fx = smooth_field(&mut rng, rows, cols, spec.correlation);
        let fy = smooth_field(&mut rng, rows, cols, spec.correlation);
        let points = base
            .points()
            .iter()
            .zip(fx.iter().zip(&fy))
            .map(|(p, (dx, dy))| {
                [
                    p[0] + (scale * dx).clamp(-limit, limit),
                    p[1] + (scale * dy).clamp(-limit, limit),
                ]
            })
            .collect();
        let mesh = base.with_points(points)?;
        if validate_mesh(&mesh) {
            return Ok(mesh);
        }
    }
    Err(Error::Generation(format!(
        "no fold-free mesh in {} draws (seed {}, sigma {})",
        MAX_RESAMPLES + 1,
        spec.seed,
        spec.sigma
    )))
}

/// Newton inversion of a spline map, seeded by an approximate inverse.
fn invert_point(forward: &TpsCoefficients, guess: [f64; 2], target: [f64; 2]) -> [f64; 2] {
    let mut x = guess;
    for _ in 0..12 {
        let f = forward.apply(x);
        let r = [f[0] - target[0], f[1] - target[1]];
        if r[0].abs() < 1e-10 && r[1].abs() < 1e-10 {
            return x;
        }
        let j = forward.jacobian(x);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-12 {
            break;
        }
        x[0] -= (j[1][1] * r[0] - j[0][1] * r[1]) / det;
        x[1] -= (-j[1][0] * r[0] + j[0][0] * r[1]) / det;
        if !(x[0].is_finite() && x[1].is_finite()) {
            break;
        }
    }
    let f = forward.apply(x);
    if (f[0] - target[0]).hypot(f[1] - target[1]) < 1e-6 {
        x
    } else {
        guess
    }
}

/// Coordinates `T⁻¹(q)` for every pixel `q`, where `T` carries `regular` onto
/// `mesh`.
pub fn inverse_map(
    mesh: &MeshGrid,
    regular: &MeshGrid,
    width: usize,
    height: usize,
) -> Result<CoordMap> {
    let forward = solve_tps(regular, mesh)?;
    let reverse = solve_tps(mesh, regular)?;
    Ok(CoordMap::from_fn(width, height, |q| {
        invert_point(&forward, reverse.apply(q), q)
    }))
}

/// Deforms `img` so that its regular frame grid lands on `mesh`:
/// `D(q) = img(T⁻¹(q))`. `warp_image(D, mesh, regular)` undoes it.
pub fn apply_deformation(img: &ImageBuf, mesh: &MeshGrid) -> Result<ImageBuf> {
    let regular = frame_grid(mesh.rows(), mesh.cols(), img.width(), img.height())?;
    Ok(inverse_map(mesh, &regular, img.width(), img.height())?.sample(img))
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let orient = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| {
        (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    };
    let d1 = orient(a, b, c);
    let d2 = orient(a, b, d);
    let d3 = orient(c, d, a);
    let d4 = orient(c, d, b);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// True when no two non-adjacent edges of the closed polygon cross.
pub fn is_simple_polygon(ring: &[[f64; 2]]) -> bool {
    let n = ring.len();
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_cross(a, b, ring[j], ring[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

/// Shoelace area of a closed polygon.
pub fn polygon_area(ring: &[[f64; 2]]) -> f64 {
    let n = ring.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    twice.abs() / 2.0
}

/// Binary mask of pixel centers inside the mesh's outer ring (even-odd rule).
pub fn mesh_region_mask(mesh: &MeshGrid, width: usize, height: usize) -> Result<ImageBuf> {
    let ring = mesh.boundary_ring();
    if !is_simple_polygon(&ring) {
        return Err(Error::Geometry("mesh boundary intersects itself".into()));
    }
    let n = ring.len();
    let mut data = vec![0.0; width * height];
    let mut xs = Vec::with_capacity(n);
    for y in 0..height {
        let py = y as f64;
        xs.clear();
        for i in 0..n {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            if (a[1] > py) != (b[1] > py) {
                xs.push(a[0] + (py - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
            }
        }
        xs.sort_by(f64::total_cmp);
        let row = &mut data[y * width..(y + 1) * width];
        for pair in xs.chunks_exact(2) {
            // Centers with pair[0] <= x < pair[1] have an odd crossing count to
            // their right.
            let start = pair[0].ceil().max(0.0);
            let end = pair[1].min(width as f64);
            let mut x = start;
            while x < end {
                row[x as usize] = 1.0;
                x += 1.0;
            }
        }
    }
    Ok(ImageBuf::gray_unchecked(width, height, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tps::{regular_grid, warp_image};

    #[test]
    fn zero_sigma_is_regular() {
        let m = random_mesh(&DeformationSpec::new(5, 0.0), 64, 48).unwrap();
        assert_eq!(m, frame_grid(9, 9, 64, 48).unwrap());
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let spec = DeformationSpec::new(42, 0.04);
        assert_eq!(random_mesh(&spec, 200, 160).unwrap(), random_mesh(&spec, 200, 160).unwrap());
        let other = DeformationSpec::new(43, 0.04);
        assert_ne!(random_mesh(&spec, 200, 160).unwrap(), random_mesh(&other, 200, 160).unwrap());
    }

    #[test]
    fn offsets_respect_clamp() {
        let mut spec = DeformationSpec::new(3, 0.05);
        spec.clamp = 0.5;
        let m = random_mesh(&spec, 100, 100).unwrap();
        let base = frame_grid(9, 9, 100, 100).unwrap();
        for (p, b) in m.points().iter().zip(base.points()) {
            assert!((p[0] - b[0]).abs() <= 2.5 + 1e-12 && (p[1] - b[1]).abs() <= 2.5 + 1e-12);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = DeformationSpec::new(0, -0.1);
        assert!(matches!(random_mesh(&spec, 10, 10), Err(Error::Argument(_))));
        spec.sigma = 0.1;
        spec.clamp = 0.0;
        assert!(matches!(random_mesh(&spec, 10, 10), Err(Error::Argument(_))));
    }

    #[test]
    fn uncorrelated_large_offsets_fail_to_generate() {
        let mut spec = DeformationSpec::new(1, 0.08);
        spec.correlation = 0.0;
        assert!(matches!(random_mesh(&spec, 512, 512), Err(Error::Generation(_))));
    }

    #[test]
    fn regular_mesh_deformation_is_identity() {
        let img = ImageBuf::from_fn(30, 20, |x, y| ((x * 3 + y * 5) % 7) as f64 / 6.0);
        let out = apply_deformation(&img, &frame_grid(9, 9, 30, 20).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn translation_mesh_shifts_interior() {
        let img = ImageBuf::from_fn(32, 24, |x, y| ((x * 11 + y * 3) % 13) as f64 / 12.0);
        let mesh = frame_grid(5, 5, 32, 24).unwrap().translated(2.0, 1.0);
        let out = apply_deformation(&img, &mesh).unwrap();
        for y in 1..24 {
            for x in 2..32 {
                assert!((out.get(x, y, 0) - img.get(x - 2, y - 1, 0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deformation_is_undone_by_dewarping() {
        let img = ImageBuf::from_fn(96, 96, |x, y| {
            0.5 + 0.25 * ((x as f64 / 7.0).sin() + (y as f64 / 5.0).cos())
        });
        let mesh = random_mesh(&DeformationSpec::new(9, 0.03), 96, 96).unwrap();
        let warped = apply_deformation(&img, &mesh).unwrap();
        let regular = frame_grid(9, 9, 96, 96).unwrap();
        let back = warp_image(&warped, &mesh, &regular, 96, 96).unwrap();
        let forward = solve_tps(&regular, &mesh).unwrap();
        // Compare where the round trip stays inside the frame.
        let mut err = 0.0;
        let mut n = 0;
        for y in 0..96 {
            for x in 0..96 {
                let q = forward.apply([x as f64, y as f64]);
                if q[0] > 2.0 && q[1] > 2.0 && q[0] < 93.0 && q[1] < 93.0 {
                    err += (back.get(x, y, 0) - img.get(x, y, 0)).abs();
                    n += 1;
                }
            }
        }
        assert!(n > 4000);
        assert!(err / (n as f64) < 0.01, "{}", err / n as f64);
    }

    #[test]
    fn full_frame_mask_and_half_mask() {
        let mask = mesh_region_mask(&frame_grid(9, 9, 20, 10).unwrap(), 20, 10).unwrap();
        let ones = mask.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 19 * 9);
        for y in 0..9 {
            for x in 0..19 {
                assert_eq!(mask.get(x, y, 0), 1.0);
            }
        }
        let left = regular_grid(3, 3, -0.5, -0.5, 9.5, 9.5).unwrap();
        let mask = mesh_region_mask(&left, 20, 10).unwrap();
        for y in 0..10 {
            for x in 0..20 {
                assert_eq!(mask.get(x, y, 0), if x < 10 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn mask_area_tracks_shoelace() {
        for seed in 0..10 {
            // Shift into the raster interior so no part of the region is clipped.
            let mesh = random_mesh(&DeformationSpec::new(seed, 0.04), 256, 256)
                .unwrap()
                .translated(70.0, 70.0);
            let mask = mesh_region_mask(&mesh, 400, 400).unwrap();
            let count = mask.data().iter().sum::<f64>();
            let area = polygon_area(&mesh.boundary_ring());
            assert!(((count - area) / area).abs() < 0.01, "{count} vs {area}");
        }
    }

    #[test]
    fn self_intersecting_boundary_is_rejected() {
        let mut pts = regular_grid(3, 3, 0.0, 0.0, 10.0, 10.0).unwrap().points().to_vec();
        pts.swap(0, 2);
        let bad = MeshGrid::new(3, 3, pts).unwrap();
        assert!(matches!(mesh_region_mask(&bad, 12, 12), Err(Error::Geometry(_))));
    }
}
