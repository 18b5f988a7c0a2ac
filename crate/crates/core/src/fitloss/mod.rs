//! Mesh fitting by direct gradient descent, with the rectification and mutual
//! transformation losses behind a two-stage coarse-to-fine fitter.
//!
//! The fitter registers a warped input against its flat reference. The coarse
//! stage runs over a resolution pyramid that stops at half the working size and
//! minimizes `L_rect + λ·L_mutual`. The refinement stage fits a fresh mesh on
//! the coarsely dewarped image at the working size with `L_rect` alone. The
//! two warps are composed analytically and the input is resampled once.
//!
//! For the mutual term, the input is perturbed into `D1` and the flat
//! reference into `D2`, each by a seeded random mesh. The document mesh of `D1`
//! is the current estimate pushed through the first perturbation, and the mesh
//! of `D2` is the second perturbation itself. Two perturbations of the input
//! alone would make the term independent of the reference, and so of the mesh
//! being fitted.

mod lattice;
mod moving;
mod optim;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{apply_deformation, mesh_region_mask, random_mesh, DeformationSpec};
use crate::error::{Error, Result};
use crate::fourier::{check_beta, fourier_convert, Blank, FourierConfig, BETA_TRAIN, DEFAULT_BLANK};
use crate::image::{resize, sample_plane, to_grayscale, write_atomically, ImageBuf};
use crate::tps::{
    frame_grid, solve_tps, validate_mesh, warp_image, CoordMap, MeshGrid, TpsCoefficients,
    TpsSystem,
};

use lattice::{l1_term, Lattice, LinearWarp, DEAD_ZONE};
use moving::MovingSpline;
use optim::{optimize, Control, Evaluation, Objective};

/// Smallest pyramid level, in pixels along the longer side.
const MIN_LEVEL: usize = 48;

/// Optimizer and pipeline settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Mesh shape `(rows, cols)`.
    pub grid: (usize, usize),
    /// Weight of the mutual loss in the coarse objective.
    pub lambda: f64,
    pub beta_train: f64,
    pub iters_coarse: usize,
    pub iters_refine: usize,
    /// Base learning rate, in pixels of the level being fitted.
    pub step: f64,
    /// Longer side of the finest loss raster.
    pub working_size: usize,
    /// Seed for the mutual-loss perturbations.
    pub seed: u64,
    /// Perturbation scale for the mutual loss, as a fraction of `min(W, H)`.
    pub mutual_sigma: f64,
    pub use_mutual: bool,
    pub use_fourier: bool,
    pub use_refine: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            grid: (9, 9),
            lambda: 0.5,
            beta_train: BETA_TRAIN,
            iters_coarse: 400,
            iters_refine: 200,
            step: 0.5,
            working_size: 384,
            seed: 0,
            mutual_sigma: 0.03,
            use_mutual: true,
            use_fourier: true,
            use_refine: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Argument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        check_beta(self.beta_train)?;
        if self.iters_coarse == 0 || self.iters_refine == 0 {
            return Err(Error::Argument("iteration budgets must be >= 1".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Argument(format!("step must be > 0, got {}", self.step)));
        }
        if self.grid.0 < 2 || self.grid.1 < 2 {
            return Err(Error::Argument(format!(
                "grid must be at least 2x2, got {}x{}",
                self.grid.0, self.grid.1
            )));
        }
        if self.working_size < 8 {
            return Err(Error::Argument(format!(
                "working size must be >= 8, got {}",
                self.working_size
            )));
        }
        if !(self.mutual_sigma >= 0.0 && self.mutual_sigma.is_finite()) {
            return Err(Error::Argument(format!(
                "mutual sigma must be >= 0, got {}",
                self.mutual_sigma
            )));
        }
        Ok(())
    }
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub loss_rect: f64,
    pub loss_mutual: f64,
    pub loss_total: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Coarse mesh in input pixel coordinates.
    pub mesh_coarse: MeshGrid,
    /// Refinement mesh, in the coordinates of the coarsely dewarped image.
    pub mesh_refined: MeshGrid,
    /// The regular grid carried through both warps: where each reference
    /// grid point is read from in the input.
    pub mesh_composed: MeshGrid,
    pub dewarped: ImageBuf,
    pub loss_trace: Vec<TracePoint>,
    pub converged: bool,
}

fn require_gray(img: &ImageBuf, what: &str) -> Result<()> {
    if img.channels() != 1 {
        return Err(Error::Argument(format!("{what} must be grayscale")));
    }
    Ok(())
}

/// Mean absolute difference of two equally sized grayscale images.
pub fn rectification_loss(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    require_gray(a, "rectification input")?;
    require_gray(b, "rectification target")?;
    if !a.same_shape(b) {
        return Err(Error::Argument(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.pixel_count() as f64)
}

fn masked_l1(a: &ImageBuf, b: &ImageBuf, mask: &ImageBuf) -> Result<f64> {
    let area: f64 = mask.data().iter().sum();
    if area <= 0.0 {
        return Err(Error::Numerical("document mask has zero area".into()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .zip(mask.data())
        .map(|((x, y), m)| (x - y).abs() * m)
        .sum();
    Ok(sum / area)
}

/// Mutual transformation loss: `D1` carried by the spline `M1 → M2` onto the
/// frame of `D2` is compared with `D2` inside the region of `M2`, and the
/// reverse, each as a masked mean absolute difference.
pub fn mutual_loss(d1: &ImageBuf, d2: &ImageBuf, m1: &MeshGrid, m2: &MeshGrid) -> Result<f64> {
    require_gray(d1, "D1")?;
    require_gray(d2, "D2")?;
    if !d1.same_shape(d2) {
        return Err(Error::Argument("D1 and D2 differ in size".into()));
    }
    if !m1.same_dims(m2) {
        return Err(Error::Argument("M1 and M2 differ in shape".into()));
    }
    let (w, h) = (d1.width(), d1.height());
    let t12 = warp_image(d1, m1, m2, w, h)?;
    let t21 = warp_image(d2, m2, m1, w, h)?;
    let mask2 = mesh_region_mask(m2, w, h)?;
    let mask1 = mesh_region_mask(m1, w, h)?;
    Ok(masked_l1(&t12, d2, &mask2)? + masked_l1(&t21, d1, &mask1)?)
}

/// `rect + λ · mutual`.
pub fn coarse_loss(rect: f64, mutual: f64, lambda: f64) -> f64 {
    rect + lambda * mutual
}

/// Rectification loss of `img_hf` dewarped by `mesh` against `target_hf`. The
/// reference grid spans the target frame.
pub fn mesh_loss(img_hf: &ImageBuf, target_hf: &ImageBuf, mesh: &MeshGrid) -> Result<f64> {
    let (w, h) = (target_hf.width(), target_hf.height());
    let regular = frame_grid(mesh.rows(), mesh.cols(), w, h)?;
    rectification_loss(&warp_image(img_hf, mesh, &regular, w, h)?, target_hf)
}

/// Exact gradient of [`mesh_loss`] with respect to the mesh points.
///
/// The sampling coordinate of output pixel `p` is `Σ_j b_j(p) · mesh_j`, with
/// `b_j` fixed by the reference grid, so the gradient is
/// `Σ_p sign(diff_p) · ∇img(s(p)) · b_j(p) / N`.
pub fn mesh_gradient(
    img_hf: &ImageBuf,
    target_hf: &ImageBuf,
    mesh: &MeshGrid,
) -> Result<Vec<[f64; 2]>> {
    require_gray(img_hf, "image")?;
    require_gray(target_hf, "target")?;
    if !validate_mesh(mesh) {
        return Err(Error::Geometry("mesh is folded".into()));
    }
    let (w, h) = (target_hf.width(), target_hf.height());
    let regular = frame_grid(mesh.rows(), mesh.cols(), w, h)?;
    let system = TpsSystem::new(&regular, 0.0)?;
    let k = mesh.len();
    let pts = mesh.points();
    let rows: Vec<Vec<[f64; 2]>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut acc = vec![[0.0; 2]; k];
            let mut lift = vec![0.0; k + 3];
            let mut b = vec![0.0; k];
            for x in 0..w {
                system.basis_into([x as f64, y as f64], &mut lift, &mut b);
                let mut c = [0.0; 2];
                for (bj, p) in b.iter().zip(pts) {
                    c[0] += bj * p[0];
                    c[1] += bj * p[1];
                }
                let s = sample_plane(img_hf.data(), img_hf.width(), img_hf.height(), 1, 0, c[0], c[1]);
                let diff = s.value - target_hf.get(x, y, 0);
                if diff.abs() <= DEAD_ZONE {
                    continue;
                }
                let g = [diff.signum() * s.d_dx, diff.signum() * s.d_dy];
                for (a, bj) in acc.iter_mut().zip(&b) {
                    a[0] += g[0] * bj;
                    a[1] += g[1] * bj;
                }
            }
            acc
        })
        .collect();
    let mut grad = vec![[0.0; 2]; k];
    for row in rows {
        for (g, r) in grad.iter_mut().zip(row) {
            g[0] += r[0];
            g[1] += r[1];
        }
    }
    let n = (w * h) as f64;
    Ok(grad.into_iter().map(|g| [g[0] / n, g[1] / n]).collect())
}

/// Per-axis map between a full-resolution frame and a resized level, with
/// pixel-center alignment.
#[derive(Debug, Clone, Copy)]
struct Scale {
    sx: f64,
    sy: f64,
}

impl Scale {
    fn between(from: (usize, usize), to: (usize, usize)) -> Scale {
        Scale {
            sx: to.0 as f64 / from.0 as f64,
            sy: to.1 as f64 / from.1 as f64,
        }
    }

    fn is_identity(&self) -> bool {
        self.sx == 1.0 && self.sy == 1.0
    }

    fn forward(&self, p: [f64; 2]) -> [f64; 2] {
        if self.is_identity() {
            return p;
        }
        [(p[0] + 0.5) * self.sx - 0.5, (p[1] + 0.5) * self.sy - 0.5]
    }

    fn backward(&self, p: [f64; 2]) -> [f64; 2] {
        if self.is_identity() {
            return p;
        }
        [(p[0] + 0.5) / self.sx - 0.5, (p[1] + 0.5) / self.sy - 0.5]
    }

    fn points(&self, pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
        pts.iter().map(|&p| self.forward(p)).collect()
    }

    /// Gradient on level coordinates to gradient on full coordinates.
    fn pull(&self, g: [f64; 2]) -> [f64; 2] {
        [g[0] * self.sx, g[1] * self.sy]
    }

    fn mean(&self) -> f64 {
        0.5 * (self.sx + self.sy)
    }
}

fn dims(img: &ImageBuf) -> (usize, usize) {
    (img.width(), img.height())
}

/// Dimensions with the longer side scaled to at most `longest`.
fn fit_dims(w: usize, h: usize, longest: usize) -> (usize, usize) {
    let f = (longest as f64 / w.max(h) as f64).min(1.0);
    (
        ((w as f64 * f).round() as usize).max(2),
        ((h as f64 * f).round() as usize).max(2),
    )
}

fn lattice_stride(w: usize, h: usize) -> usize {
    (w.min(h) / 64).clamp(1, 4)
}

/// Rectification loss of one level: `src` read through the spline carrying the
/// reference grid onto the mesh, compared with `tgt`.
struct RectTerm {
    warp: LinearWarp,
    src: ImageBuf,
    tgt: ImageBuf,
    /// Mesh coordinates to `src` level coordinates.
    scale: Scale,
    /// High-pass applied to the warped source before comparison.
    hp: Option<FourierConfig>,
}

impl RectTerm {
    /// `regular` spans a frame of `frame` pixels; `tgt` is that frame resized.
    fn new(
        src: ImageBuf,
        tgt: ImageBuf,
        regular: &MeshGrid,
        frame: (usize, usize),
        scale: Scale,
        stride: usize,
        hp: Option<FourierConfig>,
    ) -> Result<RectTerm> {
        let tgt_scale = Scale::between(frame, dims(&tgt));
        let level_regular = regular.with_points(tgt_scale.points(regular.points()))?;
        let system = TpsSystem::new(&level_regular, 0.0)?;
        let lattice = Lattice::new(tgt.width(), tgt.height(), stride)?;
        Ok(RectTerm {
            warp: LinearWarp::new(&system, lattice),
            src,
            tgt,
            scale,
            hp,
        })
    }

    fn evaluate(&self, mesh: &MeshGrid) -> Result<(f64, Vec<[f64; 2]>)> {
        let nodes = self.warp.node_coords(&self.scale.points(mesh.points()));
        let filter = self.hp.as_ref().map(|c| move |img: &ImageBuf| highpass(img, c));
        let out = l1_term(&self.warp.lattice, &nodes, &self.src, &self.tgt, None, as_filter(&filter))?;
        let grad = self
            .warp
            .pullback(&out.node_grad)
            .into_iter()
            .map(|g| self.scale.pull(g))
            .collect();
        Ok((out.loss, grad))
    }
}

/// Full-resolution material for the mutual term, built once per fit.
struct MutualSource {
    p1: TpsCoefficients,
    p2: MeshGrid,
    d1: ImageBuf,
    d2: ImageBuf,
}

impl MutualSource {
    fn new(input: &ImageBuf, target: &ImageBuf, cfg: &FitConfig) -> Result<MutualSource> {
        let (rows, cols) = cfg.grid;
        let spec1 = DeformationSpec::new(cfg.seed, cfg.mutual_sigma).with_grid(rows, cols);
        let spec2 = DeformationSpec::new(cfg.seed.wrapping_add(1), cfg.mutual_sigma).with_grid(rows, cols);
        let p1 = random_mesh(&spec1, input.width(), input.height())?;
        let p2 = random_mesh(&spec2, target.width(), target.height())?;
        let d1 = apply_deformation(input, &p1)?;
        let d2 = apply_deformation(target, &p2)?;
        let p1 = solve_tps(&frame_grid(rows, cols, input.width(), input.height())?, &p1)?;
        Ok(MutualSource { p1, p2, d1, d2 })
    }
}

/// The mutual term at one level.
struct MutualTerm {
    p1: TpsCoefficients,
    in_scale: Scale,
    /// Spline from the fixed `M2` onto `M1`, over the `D2` level raster.
    warp12: LinearWarp,
    m2_level: Vec<[f64; 2]>,
    mask2: Vec<f64>,
    /// Output lattice of `T21`, over the `D1` level raster.
    lat21: Lattice,
    /// Sampled rasters and their compared (possibly high-passed) views.
    d1: ImageBuf,
    d2: ImageBuf,
    d1_view: ImageBuf,
    d2_view: ImageBuf,
    hp: Option<FourierConfig>,
    rows: usize,
    cols: usize,
    last_mask1: Option<ImageBuf>,
}

impl MutualTerm {
    fn evaluate(&mut self, mesh: &MeshGrid) -> Result<(f64, Vec<[f64; 2]>)> {
        let m1: Vec<[f64; 2]> = mesh.points().iter().map(|&p| self.p1.apply(p)).collect();
        let m1l = self.in_scale.points(&m1);

        let nodes = self.warp12.node_coords(&m1l);
        let filter = self.hp.as_ref().map(|c| move |img: &ImageBuf| highpass(img, c));
        let t12 = l1_term(
            &self.warp12.lattice,
            &nodes,
            &self.d1,
            &self.d2_view,
            Some(&self.mask2),
            as_filter(&filter),
        )?;
        let mut g = self.warp12.pullback(&t12.node_grad);

        let spline = MovingSpline::new(&m1l, &self.m2_level)?;
        let nodes = spline.node_coords(&self.lat21);
        let m1_mesh = MeshGrid::new(self.rows, self.cols, m1l)?;
        match mesh_region_mask(&m1_mesh, self.lat21.width, self.lat21.height) {
            Ok(mask) => self.last_mask1 = Some(mask),
            Err(Error::Geometry(_)) if self.last_mask1.is_some() => {}
            Err(e) => return Err(e),
        }
        let mask1 = self.last_mask1.as_ref().expect("mask set above");
        let t21 = l1_term(&self.lat21, &nodes, &self.d2, &self.d1_view, Some(mask1.data()), as_filter(&filter))?;
        for (a, b) in g.iter_mut().zip(spline.source_gradient(&self.lat21, &t21.node_grad)) {
            a[0] += b[0];
            a[1] += b[1];
        }

        // Back through the level scale and the first perturbation.
        let grad = mesh
            .points()
            .iter()
            .zip(g)
            .map(|(&p, gl)| {
                let gf = self.in_scale.pull(gl);
                let j = self.p1.jacobian(p);
                [j[0][0] * gf[0] + j[1][0] * gf[1], j[0][1] * gf[0] + j[1][1] * gf[1]]
            })
            .collect();
        Ok((t12.loss + t21.loss, grad))
    }
}

struct StageObjective {
    rect: RectTerm,
    mutual: Option<MutualTerm>,
    lambda: f64,
}

impl Objective for StageObjective {
    fn evaluate(&mut self, mesh: &MeshGrid) -> Result<Evaluation> {
        let (rect, mut grad) = self.rect.evaluate(mesh)?;
        let mut mutual = 0.0;
        if let Some(term) = self.mutual.as_mut() {
            let (l, g) = term.evaluate(mesh)?;
            mutual = l;
            for (a, b) in grad.iter_mut().zip(g) {
                a[0] += self.lambda * b[0];
                a[1] += self.lambda * b[1];
            }
        }
        Ok(Evaluation {
            rect,
            mutual,
            total: coarse_loss(rect, mutual, self.lambda),
            grad,
        })
    }
}

/// Settings for a single-resolution fit.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub iters: usize,
    /// Learning rate in pixels.
    pub step: f64,
    /// Coordinate lattice spacing; 1 evaluates every pixel exactly.
    pub stride: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            iters: 200,
            step: 0.5,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageFit {
    pub mesh: MeshGrid,
    pub loss_trace: Vec<TracePoint>,
    pub converged: bool,
}

/// Fits `init` (input coordinates) so that `input_hf` dewarped by it matches
/// `target_hf`, at the given resolution, with the L1 loss alone.
pub fn fit_mesh(
    input_hf: &ImageBuf,
    target_hf: &ImageBuf,
    init: &MeshGrid,
    stage: &StageConfig,
) -> Result<StageFit> {
    require_gray(input_hf, "input")?;
    require_gray(target_hf, "target")?;
    if stage.iters == 0 || !(stage.step > 0.0) {
        return Err(Error::Argument("stage needs iters >= 1 and step > 0".into()));
    }
    if !validate_mesh(init) {
        return Err(Error::Geometry("initial mesh is folded".into()));
    }
    let regular = frame_grid(init.rows(), init.cols(), target_hf.width(), target_hf.height())?;
    let rect = RectTerm::new(
        input_hf.clone(),
        target_hf.clone(),
        &regular,
        dims(target_hf),
        Scale { sx: 1.0, sy: 1.0 },
        stage.stride,
        None,
    )?;
    let mut obj = StageObjective {
        rect,
        mutual: None,
        lambda: 0.0,
    };
    let mut trace = Vec::new();
    let out = optimize(&mut obj, &Control::identity(init.clone()), stage.iters, stage.step, &mut trace)?;
    Ok(StageFit {
        mesh: out.mesh,
        loss_trace: trace,
        converged: out.converged,
    })
}

/// Grayscale halving pyramid, finest first, starting at `base` dimensions.
fn pyramid(img: &ImageBuf, base: (usize, usize), levels: usize) -> Result<Vec<ImageBuf>> {
    let mut out = vec![resize(img, base.0, base.1)?];
    for _ in 1..levels {
        let last = out.last().expect("non-empty");
        let next = resize(last, (last.width() / 2).max(2), (last.height() / 2).max(2))?;
        out.push(next);
    }
    Ok(out)
}

/// High-pass content of `img`: the Fourier-converted image minus the uniform
/// blank level. Zero padding then means "no detail" rather than a dark frame
/// against a bright converted page.
fn highpass(img: &ImageBuf, fc: &FourierConfig) -> Result<ImageBuf> {
    Ok(fourier_convert(img, fc)?.map(|v| v - DEFAULT_BLANK))
}

fn as_filter<F: Fn(&ImageBuf) -> Result<ImageBuf>>(f: &Option<F>) -> Option<lattice::Filter<'_>> {
    f.as_ref().map(|f| f as lattice::Filter<'_>)
}

/// Source, compared target and post-warp filter for one term. With the
/// converter on, the source is warped raw and high-passed afterwards, so the
/// comparison does not depend on the filter commuting with the warp.
fn views(src: ImageBuf, tgt: ImageBuf, cfg: &FitConfig) -> Result<(ImageBuf, ImageBuf, Option<FourierConfig>)> {
    if !cfg.use_fourier {
        return Ok((src, tgt, None));
    }
    let fc = FourierConfig::new(cfg.beta_train, Blank::Uniform(DEFAULT_BLANK))?;
    let tgt = highpass(&tgt, &fc)?;
    Ok((src, tgt, Some(fc)))
}

/// Control grid size along one axis at coarse `level` (1 = finest): the mesh
/// size at level 1, halving the spacing count per level above, at least 2.
fn control_dim(mesh_dim: usize, level: usize) -> usize {
    (((mesh_dim - 1) >> (level - 1)) + 1).max(2)
}

/// Pyramid levels of the coarse stage: half the working size and below, down
/// to [`MIN_LEVEL`]; at least one level.
fn coarse_levels(work_long: usize) -> usize {
    let mut n = 1;
    let mut size = work_long / 2;
    while size / 2 >= MIN_LEVEL {
        size /= 2;
        n += 1;
    }
    n
}

/// Two-stage dewarping of `input` against its flat reference `target`.
pub fn coarse_to_fine_dewarp(input: &ImageBuf, target: &ImageBuf, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let in_gray = to_grayscale(input);
    let tg_gray = to_grayscale(target);
    let (rows, cols) = cfg.grid;
    let in_dims = dims(input);
    let tg_dims = dims(target);
    let regular = frame_grid(rows, cols, tg_dims.0, tg_dims.1)?;
    let init = frame_grid(rows, cols, in_dims.0, in_dims.1)?;

    let work_long = cfg.working_size.min(tg_dims.0.max(tg_dims.1));
    let in_work = fit_dims(in_dims.0, in_dims.1, work_long);
    let tg_work = fit_dims(tg_dims.0, tg_dims.1, work_long);
    let n_coarse = coarse_levels(work_long);

    // Pyramids hold the working level at index 0; the coarse stage uses 1..=n.
    let in_pyr = pyramid(&in_gray, in_work, n_coarse + 1)?;
    let tg_pyr = pyramid(&tg_gray, tg_work, n_coarse + 1)?;
    let mutual_src = if cfg.use_mutual && cfg.lambda > 0.0 {
        Some(MutualSource::new(&in_gray, &tg_gray, cfg)?)
    } else {
        None
    };
    let (d1_pyr, d2_pyr) = match &mutual_src {
        Some(ms) => (
            pyramid(&ms.d1, in_work, n_coarse + 1)?,
            pyramid(&ms.d2, tg_work, n_coarse + 1)?,
        ),
        None => (Vec::new(), Vec::new()),
    };

    let mut trace = Vec::new();
    let mut mesh = init;
    let mut converged = true;
    let per_level = (cfg.iters_coarse / n_coarse).max(1);
    for level in (1..=n_coarse).rev() {
        let (src, tgt, hp) = views(in_pyr[level].clone(), tg_pyr[level].clone(), cfg)?;
        let in_scale = Scale::between(in_dims, dims(&src));
        let tg_scale = Scale::between(tg_dims, dims(&tgt));
        let stride = lattice_stride(tgt.width(), tgt.height());
        let rect = RectTerm::new(src, tgt, &regular, tg_dims, in_scale, stride, hp)?;
        let mutual = match &mutual_src {
            Some(ms) => {
                let d1 = d1_pyr[level].clone();
                let d2 = d2_pyr[level].clone();
                let (d1, d2_view, hp) = views(d1, d2.clone(), cfg)?;
                let (d2, d1_view, _) = views(d2, d1.clone(), cfg)?;
                let m2_level = tg_scale.points(ms.p2.points());
                let m2_mesh = MeshGrid::new(rows, cols, m2_level.clone())?;
                let system = TpsSystem::new(&m2_mesh, 0.0)?;
                let lat12 = Lattice::new(d2.width(), d2.height(), stride)?;
                let mask2 = mesh_region_mask(&m2_mesh, d2.width(), d2.height())?.into_data();
                Some(MutualTerm {
                    p1: ms.p1.clone(),
                    in_scale,
                    warp12: LinearWarp::new(&system, lat12),
                    m2_level,
                    mask2,
                    lat21: Lattice::new(d1.width(), d1.height(), stride)?,
                    d1,
                    d2,
                    d1_view,
                    d2_view,
                    hp,
                    rows,
                    cols,
                    last_mask1: None,
                })
            }
            None => None,
        };
        let mut obj = StageObjective {
            rect,
            mutual,
            lambda: cfg.lambda,
        };
        let iters = if level == 1 {
            cfg.iters_coarse - per_level * (n_coarse - 1)
        } else {
            per_level
        };
        let ctrl = Control::coarse(mesh.clone(), control_dim(rows, level), control_dim(cols, level))?;
        let out = optimize(&mut obj, &ctrl, iters.max(1), cfg.step / in_scale.mean(), &mut trace)?;
        mesh = out.mesh;
        converged = out.converged;
    }
    let coarse = solve_tps(&regular, &mesh)?;

    let refined = if cfg.use_refine {
        // Coarse output at the working size, read from the working-size input.
        let work_in = &in_pyr[0];
        let in_scale = Scale::between(in_dims, dims(work_in));
        let tg_scale = Scale::between(tg_dims, tg_work);
        let map = CoordMap::from_fn(tg_work.0, tg_work.1, |q| {
            in_scale.forward(coarse.apply(tg_scale.backward(q)))
        });
        let (src, tgt, hp) = views(map.sample(work_in), tg_pyr[0].clone(), cfg)?;
        let stride = lattice_stride(tgt.width(), tgt.height());
        let rect = RectTerm::new(src, tgt, &regular, tg_dims, tg_scale, stride, hp)?;
        let mut obj = StageObjective {
            rect,
            mutual: None,
            lambda: 0.0,
        };
        let out = optimize(&mut obj, &Control::identity(regular.clone()), cfg.iters_refine, cfg.step / tg_scale.mean(), &mut trace)?;
        converged &= out.converged;
        Some(out.mesh)
    } else {
        None
    };

    let (mesh_refined, map) = match &refined {
        Some(r) => {
            let fine = solve_tps(&regular, r)?;
            let map = CoordMap::from_fn(tg_dims.0, tg_dims.1, |p| coarse.apply(fine.apply(p)));
            (r.clone(), map)
        }
        None => (
            regular.clone(),
            CoordMap::from_fn(tg_dims.0, tg_dims.1, |p| coarse.apply(p)),
        ),
    };
    let mesh_composed = mesh_refined.map_points(|p| coarse.apply(p));
    Ok(FitResult {
        mesh_coarse: mesh,
        mesh_refined,
        mesh_composed,
        dewarped: map.sample(input),
        loss_trace: trace,
        converged,
    })
}

/// Writes the trace as CSV: `iteration,loss_rect,loss_mutual,loss_total`.
pub fn write_loss_trace(path: &Path, trace: &[TracePoint]) -> Result<()> {
    write_atomically(path, |f| {
        let mut w = std::io::BufWriter::new(f);
        writeln!(w, "iteration,loss_rect,loss_mutual,loss_total")?;
        for t in trace {
            writeln!(
                w,
                "{},{:e},{:e},{:e}",
                t.iteration, t.loss_rect, t.loss_mutual, t.loss_total
            )?;
        }
        w.flush()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{smooth_texture, text_page};
    use crate::tps::regular_grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize) -> ImageBuf {
        ImageBuf::from_fn(w, h, |x, y| (x as f64 * 0.37 + y as f64 * 0.11).sin() * 0.5 + 0.5)
    }

    #[test]
    fn rectification_loss_basics() {
        let a = ramp(13, 9);
        assert_eq!(rectification_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((rectification_loss(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        let c = ramp(9, 13);
        assert!(matches!(rectification_loss(&a, &c), Err(Error::Argument(_))));
    }

    #[test]
    fn rectification_loss_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = ImageBuf::from_fn(17, 11, |_, _| rng.gen());
        let b = ImageBuf::from_fn(17, 11, |_, _| rng.gen());
        let mut sum = 0.0;
        for y in 0..11 {
            for x in 0..17 {
                sum += (a.get(x, y, 0) - b.get(x, y, 0)).abs();
            }
        }
        assert!((rectification_loss(&a, &b).unwrap() - sum / 187.0).abs() < 1e-12);
    }

    #[test]
    fn coarse_loss_weights_the_mutual_term() {
        assert!((coarse_loss(0.2, 0.4, 0.5) - 0.4).abs() < 1e-15);
        assert_eq!(coarse_loss(0.2, 0.4, 0.0), 0.2);
    }

    #[test]
    fn mutual_loss_vanishes_for_equal_pairs() {
        let d = ramp(40, 32);
        let m = frame_grid(5, 5, 40, 32).unwrap();
        assert!(mutual_loss(&d, &d, &m, &m).unwrap() < 1e-12);
    }

    #[test]
    fn mutual_loss_with_equal_meshes_is_masked_l1() {
        let d1 = ramp(40, 32);
        let d2 = d1.map(|v| 1.0 - v);
        let m = frame_grid(5, 5, 40, 32).unwrap();
        let mask = mesh_region_mask(&m, 40, 32).unwrap();
        let direct = masked_l1(&d1, &d2, &mask).unwrap() + masked_l1(&d2, &d1, &mask).unwrap();
        assert!((mutual_loss(&d1, &d2, &m, &m).unwrap() - direct).abs() < 1e-9);
    }

    #[test]
    fn mutual_loss_prefers_true_meshes() {
        let page = smooth_texture(96, 96, 12.0, 5);
        for seed in 0..4u64 {
            let m1 = random_mesh(&DeformationSpec::new(seed, 0.03).with_grid(5, 5), 96, 96).unwrap();
            let m2 = random_mesh(&DeformationSpec::new(seed + 50, 0.03).with_grid(5, 5), 96, 96).unwrap();
            let d1 = apply_deformation(&page, &m1).unwrap();
            let d2 = apply_deformation(&page, &m2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let off = m2.map_points(|p| [p[0] + rng.gen_range(-5.0..5.0), p[1] + rng.gen_range(-5.0..5.0)]);
            let truth = mutual_loss(&d1, &d2, &m1, &m2).unwrap();
            assert!(truth < mutual_loss(&d1, &d2, &m1, &off).unwrap(), "seed {seed}");
        }
    }

    #[test]
    fn uniform_images_give_zero_gradient() {
        let a = ImageBuf::filled(30, 24, 0.3);
        let b = ImageBuf::filled(30, 24, 0.7);
        let m = regular_grid(4, 4, 2.3, 1.8, 26.7, 21.1).unwrap();
        let g = mesh_gradient(&a, &b, &m).unwrap();
        assert!(g.iter().all(|v| v[0].abs() < 1e-15 && v[1].abs() < 1e-15));
    }

    #[test]
    fn gradient_vanishes_at_the_optimum() {
        let a = ramp(30, 24);
        let m = frame_grid(4, 4, 30, 24).unwrap();
        let g = mesh_gradient(&a, &a, &m).unwrap();
        let norm: f64 = g.iter().map(|v| v[0] * v[0] + v[1] * v[1]).sum::<f64>().sqrt();
        assert!(norm < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let target = smooth_texture(48, 40, 16.0, 1);
        let input = smooth_texture(48, 40, 16.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mesh = regular_grid(4, 4, 4.0, 4.0, 43.0, 35.0)
            .unwrap()
            .map_points(|p| [p[0] + rng.gen_range(-1.5..1.5), p[1] + rng.gen_range(-1.5..1.5)]);
        let g = mesh_gradient(&input, &target, &mesh).unwrap();
        let h = 0.05;
        let mut good = 0;
        for k in 0..mesh.len() {
            for axis in 0..2 {
                let shift = |d: f64| {
                    let mut pts = mesh.points().to_vec();
                    pts[k][axis] += d;
                    mesh_loss(&input, &target, &mesh.with_points(pts).unwrap()).unwrap()
                };
                let fd = (shift(h) - shift(-h)) / (2.0 * h);
                let an = g[k][axis];
                if (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6) + 2e-5 {
                    good += 1;
                }
            }
        }
        assert!(good as f64 >= 0.95 * (2 * mesh.len()) as f64, "{good}/{}", 2 * mesh.len());
    }

    #[test]
    fn fit_on_identical_images_keeps_the_regular_grid() {
        let img = ramp(64, 48);
        let init = frame_grid(5, 5, 64, 48).unwrap();
        let fit = fit_mesh(&img, &img, &init, &StageConfig::default()).unwrap();
        assert_eq!(fit.mesh, init);
        assert!(fit.loss_trace[0].loss_total < 1e-12);
    }

    #[test]
    fn fit_mesh_rejects_folded_init() {
        let img = ramp(32, 32);
        let mut pts = frame_grid(3, 3, 32, 32).unwrap().points().to_vec();
        pts.swap(3, 5);
        let bad = MeshGrid::new(3, 3, pts).unwrap();
        assert!(matches!(
            fit_mesh(&img, &img, &bad, &StageConfig::default()),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn fit_mesh_recovers_a_small_shift() {
        let page = smooth_texture(96, 96, 10.0, 2);
        let shift = 2.0;
        let input = ImageBuf::from_fn(96, 96, |x, y| {
            sample_plane(page.data(), 96, 96, 1, 0, x as f64 - shift, y as f64).value
        });
        let init = frame_grid(3, 3, 96, 96).unwrap();
        let stage = StageConfig { iters: 300, step: 0.3, stride: 1 };
        let fit = fit_mesh(&input, &page, &init, &stage).unwrap();
        let truth = init.translated(shift, 0.0);
        // Interior node only: the ring borders zero padding.
        let (p, q) = (fit.mesh.point(1, 1), truth.point(1, 1));
        assert!((p[0] - q[0]).hypot(p[1] - q[1]) < 0.25, "{p:?} vs {q:?}");
    }

    #[test]
    fn best_so_far_is_nonincreasing() {
        let page = text_page(128, 128, 4);
        let gt = random_mesh(&DeformationSpec::new(4, 0.03), 128, 128).unwrap();
        let input = apply_deformation(&page, &gt).unwrap();
        let init = frame_grid(9, 9, 128, 128).unwrap();
        let fit = fit_mesh(&input, &page, &init, &StageConfig { iters: 40, ..Default::default() }).unwrap();
        let mut best = f64::INFINITY;
        let mut last = f64::INFINITY;
        for t in &fit.loss_trace {
            assert!(t.loss_total.is_finite());
            best = best.min(t.loss_total);
            assert!(best <= last);
            last = best;
        }
        assert!(validate_mesh(&fit.mesh));
        assert!(mesh_loss(&input, &page, &fit.mesh).unwrap() <= fit.loss_trace[0].loss_total);
    }

    #[test]
    fn flat_input_is_a_fixed_point() {
        let page = text_page(192, 160, 1);
        let cfg = FitConfig { iters_coarse: 20, iters_refine: 10, ..FitConfig::default() };
        let out = coarse_to_fine_dewarp(&page, &page, &FitConfig { use_mutual: false, ..cfg }).unwrap();
        let regular = frame_grid(9, 9, 192, 160).unwrap();
        assert!(out.mesh_coarse.rmse(&regular) < 1e-9);
        assert!(out.mesh_refined.rmse(&regular) < 1e-9);
        let diff = rectification_loss(&out.dewarped, &page).unwrap();
        assert!(diff < 1e-4, "{diff}");
    }

    #[test]
    fn pipeline_is_deterministic() {
        let page = text_page(160, 160, 9);
        let gt = random_mesh(&DeformationSpec::new(9, 0.04), 160, 160).unwrap();
        let input = apply_deformation(&page, &gt).unwrap();
        let cfg = FitConfig { iters_coarse: 30, iters_refine: 10, working_size: 128, ..FitConfig::default() };
        let a = coarse_to_fine_dewarp(&input, &page, &cfg).unwrap();
        let b = coarse_to_fine_dewarp(&input, &page, &cfg).unwrap();
        assert_eq!(a.mesh_composed, b.mesh_composed);
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.dewarped.data(), b.dewarped.data());
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig::default().validate().is_ok());
        assert!(FitConfig { lambda: -1.0, ..FitConfig::default() }.validate().is_err());
        assert!(FitConfig { beta_train: 0.7, ..FitConfig::default() }.validate().is_err());
        assert!(FitConfig { iters_refine: 0, ..FitConfig::default() }.validate().is_err());
        assert!(FitConfig { grid: (1, 9), ..FitConfig::default() }.validate().is_err());
    }

    #[test]
    fn level_schedule() {
        assert_eq!(coarse_levels(384), 3);
        assert_eq!(coarse_levels(64), 1);
        assert_eq!(control_dim(9, 1), 9);
        assert_eq!(control_dim(9, 2), 5);
        assert_eq!(control_dim(9, 3), 3);
        assert_eq!(control_dim(9, 5), 2);
    }

    #[test]
    fn loss_trace_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let trace = vec![TracePoint { iteration: 0, loss_rect: 0.5, loss_mutual: 0.25, loss_total: 0.625 }];
        write_loss_trace(&path, &trace).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,loss_rect,loss_mutual,loss_total");
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("0,"));
    }
}
