//! Adam-style descent on mesh points with fold rejection and best tracking.

use super::TracePoint;
use crate::error::{Error, Result};
use crate::tps::{cell_is_valid, frame_grid, regular_grid, validate_mesh, MeshGrid, TpsSystem};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;
/// Halvings tried when a step would fold the mesh.
pub(crate) const MAX_HALVINGS: usize = 8;
/// Relative best-loss improvement required over the trailing window.
pub(crate) const MIN_IMPROVEMENT: f64 = 1e-4;
/// Final learning rate as a fraction of the initial one.
const DECAY_TO: f64 = 0.1;

pub(crate) struct Evaluation {
    pub rect: f64,
    pub mutual: f64,
    pub total: f64,
    pub grad: Vec<[f64; 2]>,
}

pub(crate) trait Objective {
    fn evaluate(&mut self, mesh: &MeshGrid) -> Result<Evaluation>;
}

pub(crate) struct Outcome {
    pub mesh: MeshGrid,
    pub converged: bool,
}

/// Mesh as a linear function of a parameter set:
/// `mesh_j = base_j + Σ_c u[j][c] · δ_c`. The identity control has one
/// parameter per mesh point; coarser controls interpolate a smaller grid of
/// displacements with a spline, which damps short-range aliasing during the
/// coarse levels.
pub(crate) struct Control {
    base: MeshGrid,
    n: usize,
    /// `k × n` row-major weights, or `None` for the identity.
    u: Option<Vec<f64>>,
}

impl Control {
    pub fn identity(base: MeshGrid) -> Control {
        let n = base.len();
        Control { base, n, u: None }
    }

    /// Displacements on a `rows × cols` grid spread over the mesh by the
    /// spline through that grid. Falls back to the identity when the grid is
    /// at least as fine as the mesh.
    pub fn coarse(base: MeshGrid, rows: usize, cols: usize) -> Result<Control> {
        if rows >= base.rows() && cols >= base.cols() {
            return Ok(Control::identity(base));
        }
        let (r, c) = (base.rows(), base.cols());
        let unit = frame_grid(r, c, c, r)?;
        let ctrl = regular_grid(rows, cols, 0.0, 0.0, (c - 1) as f64, (r - 1) as f64)?;
        let system = TpsSystem::new(&ctrl, 0.0)?;
        let n = ctrl.len();
        let mut u = Vec::with_capacity(base.len() * n);
        for &q in unit.points() {
            u.extend(system.basis(q));
        }
        Ok(Control { base, n, u: Some(u) })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn mesh(&self, delta: &[[f64; 2]]) -> Result<MeshGrid> {
        let pts = match &self.u {
            None => self
                .base
                .points()
                .iter()
                .zip(delta)
                .map(|(p, d)| [p[0] + d[0], p[1] + d[1]])
                .collect(),
            Some(u) => self
                .base
                .points()
                .iter()
                .zip(u.chunks(self.n))
                .map(|(p, w)| {
                    let mut q = *p;
                    for (wc, d) in w.iter().zip(delta) {
                        q[0] += wc * d[0];
                        q[1] += wc * d[1];
                    }
                    q
                })
                .collect(),
        };
        self.base.with_points(pts)
    }

    /// Gradient on mesh points to gradient on parameters.
    pub fn pull(&self, grad: &[[f64; 2]]) -> Vec<[f64; 2]> {
        match &self.u {
            None => grad.to_vec(),
            Some(u) => {
                let mut out = vec![[0.0; 2]; self.n];
                for (g, w) in grad.iter().zip(u.chunks(self.n)) {
                    for (o, wc) in out.iter_mut().zip(w) {
                        o[0] += wc * g[0];
                        o[1] += wc * g[1];
                    }
                }
                out
            }
        }
    }

    /// Parameter with the largest weight on mesh point `j`.
    fn dominant(&self, j: usize) -> usize {
        match &self.u {
            None => j,
            Some(u) => {
                let w = &u[j * self.n..(j + 1) * self.n];
                (0..self.n)
                    .max_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()))
                    .expect("non-empty control")
            }
        }
    }
}

fn step(
    ctrl: &Control,
    delta: &[[f64; 2]],
    dir: &[[f64; 2]],
    scale: f64,
    held: &[bool],
) -> Result<(Vec<[f64; 2]>, MeshGrid)> {
    let d: Vec<[f64; 2]> = delta
        .iter()
        .zip(dir)
        .zip(held)
        .map(|((p, s), &h)| if h { *p } else { [p[0] - scale * s[0], p[1] - scale * s[1]] })
        .collect();
    let mesh = ctrl.mesh(&d)?;
    Ok((d, mesh))
}

/// Applies `dir` at `rate`, halving up to [`MAX_HALVINGS`] times while the
/// mesh folds. If every halving folds, the parameters driving the cells that
/// still fold are held for this step and the rest move at the full rate.
fn advance(
    ctrl: &Control,
    delta: &[[f64; 2]],
    dir: &[[f64; 2]],
    rate: f64,
) -> Result<(Vec<[f64; 2]>, MeshGrid)> {
    let mut held = vec![false; ctrl.len()];
    let mut scale = rate;
    for _ in 0..=MAX_HALVINGS {
        let (d, mesh) = step(ctrl, delta, dir, scale, &held)?;
        if validate_mesh(&mesh) {
            return Ok((d, mesh));
        }
        scale *= 0.5;
    }
    loop {
        let (d, mesh) = step(ctrl, delta, dir, rate, &held)?;
        let mut folded = false;
        let mut changed = false;
        for i in 0..mesh.rows() - 1 {
            for j in 0..mesh.cols() - 1 {
                if cell_is_valid(&mesh, i, j) {
                    continue;
                }
                folded = true;
                for (r, c) in [(i, j), (i, j + 1), (i + 1, j), (i + 1, j + 1)] {
                    let n = ctrl.dominant(r * mesh.cols() + c);
                    changed |= !held[n];
                    held[n] = true;
                }
            }
        }
        if !folded {
            return Ok((d, mesh));
        }
        if !changed {
            // Holding every parameter reproduces the current, valid mesh.
            held.iter_mut().for_each(|h| *h = true);
        }
    }
}

/// Runs up to `iters` updates of the parameters of `ctrl`, starting from zero
/// displacement, with learning rate `lr` (mesh units), appending one trace
/// entry per evaluated iterate. Stops early once the best loss improves by
/// less than [`MIN_IMPROVEMENT`] (relative) over the last tenth of the
/// budget, which counts as converged.
pub(crate) fn optimize(
    obj: &mut dyn Objective,
    ctrl: &Control,
    iters: usize,
    lr: f64,
    trace: &mut Vec<TracePoint>,
) -> Result<Outcome> {
    let k = ctrl.len();
    let window = (iters / 10).max(5);
    let mut delta = vec![[0.0; 2]; k];
    let mut mesh = ctrl.mesh(&delta)?;
    let mut m = vec![[0.0; 2]; k];
    let mut v = vec![[0.0; 2]; k];
    let mut best = (f64::INFINITY, mesh.clone());
    let mut history = Vec::with_capacity(iters + 1);
    let mut converged = false;
    for t in 0..=iters {
        let ev = obj.evaluate(&mesh)?;
        if !ev.total.is_finite() || ev.grad.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at iteration {t}"
            )));
        }
        trace.push(TracePoint {
            iteration: trace.len(),
            loss_rect: ev.rect,
            loss_mutual: ev.mutual,
            loss_total: ev.total,
        });
        if ev.total < best.0 {
            best = (ev.total, mesh.clone());
        }
        history.push(best.0);
        if t >= window {
            let old = history[t - window];
            if old - best.0 <= MIN_IMPROVEMENT * old.abs() {
                converged = true;
                break;
            }
        }
        if t == iters {
            break;
        }
        let grad = ctrl.pull(&ev.grad);
        let step_t = (t + 1) as i32;
        let rate = lr * DECAY_TO.powf(t as f64 / iters.max(1) as f64);
        let mut dir = vec![[0.0; 2]; k];
        for j in 0..k {
            for a in 0..2 {
                let g = grad[j][a];
                m[j][a] = BETA1 * m[j][a] + (1.0 - BETA1) * g;
                v[j][a] = BETA2 * v[j][a] + (1.0 - BETA2) * g * g;
                let mh = m[j][a] / (1.0 - BETA1.powi(step_t));
                let vh = v[j][a] / (1.0 - BETA2.powi(step_t));
                dir[j][a] = mh / (vh.sqrt() + EPS);
            }
        }
        (delta, mesh) = advance(ctrl, &delta, &dir, rate)?;
    }
    Ok(Outcome {
        mesh: best.1,
        converged,
    })
}
