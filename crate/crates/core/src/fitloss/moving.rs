//! Spline warps whose source points move, with the adjoint gradient of a loss
//! with respect to those source points.
//!
//! The coefficients are `X = L(s)⁻¹ [Y; 0]`. For an upstream gradient `G_X`
//! on `X`, the gradient on the system matrix is `-L⁻¹ G_X Xᵀ` (L symmetric),
//! which is then pushed onto the kernel and affine entries that depend on `s`.
//! The solving frame is held fixed while differentiating; the map does not
//! depend on it, so this gives the total derivative.

use nalgebra::DMatrix;

use super::lattice::Lattice;
use crate::error::{Error, Result};
use crate::tps::{assemble, kernel_grad, kernel_r2, Frame};

pub(crate) struct MovingSpline {
    frame: Frame,
    unit_source: Vec<[f64; 2]>,
    inverse: DMatrix<f64>,
    /// `(k + 3) × 2` coefficients: kernel weights then affine rows.
    coef: DMatrix<f64>,
}

impl MovingSpline {
    pub fn new(source: &[[f64; 2]], target: &[[f64; 2]]) -> Result<MovingSpline> {
        let k = source.len();
        let frame = Frame::of_points(source);
        let unit_source: Vec<[f64; 2]> = source.iter().map(|&p| frame.to_unit(p)).collect();
        let inverse = assemble(&unit_source, 0.0)
            .try_inverse()
            .ok_or_else(|| Error::Numerical("moving spline system is singular".into()))?;
        let mut rhs = DMatrix::<f64>::zeros(k + 3, 2);
        for (i, &t) in target.iter().enumerate() {
            let u = frame.to_unit(t);
            rhs[(i, 0)] = u[0];
            rhs[(i, 1)] = u[1];
        }
        let coef = &inverse * rhs;
        Ok(MovingSpline {
            frame,
            unit_source,
            inverse,
            coef,
        })
    }

    fn lift_into(&self, q: [f64; 2], lift: &mut [f64]) -> [f64; 2] {
        let k = self.unit_source.len();
        let u = self.frame.to_unit(q);
        for (l, s) in lift.iter_mut().zip(&self.unit_source) {
            *l = kernel_r2((u[0] - s[0]).powi(2) + (u[1] - s[1]).powi(2));
        }
        lift[k] = 1.0;
        lift[k + 1] = u[0];
        lift[k + 2] = u[1];
        u
    }

    pub fn node_coords(&self, lat: &Lattice) -> Vec<[f64; 2]> {
        let k = self.unit_source.len();
        let mut lift = vec![0.0; k + 3];
        lat.nodes()
            .into_iter()
            .map(|q| {
                self.lift_into(q, &mut lift);
                let mut c = [0.0; 2];
                for (i, l) in lift.iter().enumerate() {
                    c[0] += self.coef[(i, 0)] * l;
                    c[1] += self.coef[(i, 1)] * l;
                }
                self.frame.from_unit(c)
            })
            .collect()
    }

    /// Gradient with respect to the source points (pixel units) given the
    /// gradient with respect to the lattice node coordinates.
    pub fn source_gradient(&self, lat: &Lattice, node_grad: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let k = self.unit_source.len();
        let scale = self.frame.scale;
        let mut gx = DMatrix::<f64>::zeros(k + 3, 2);
        let mut grad = vec![[0.0; 2]; k];
        let mut lift = vec![0.0; k + 3];
        for (q, g) in lat.nodes().into_iter().zip(node_grad) {
            if g[0] == 0.0 && g[1] == 0.0 {
                continue;
            }
            // Upstream gradient on the unit-frame output.
            let gu = [g[0] * scale, g[1] * scale];
            let u = self.lift_into(q, &mut lift);
            for (i, l) in lift.iter().enumerate() {
                gx[(i, 0)] += l * gu[0];
                gx[(i, 1)] += l * gu[1];
            }
            // Direct dependence of φ(u - s_j) on s_j.
            for (j, s) in self.unit_source.iter().enumerate() {
                let wg = self.coef[(j, 0)] * gu[0] + self.coef[(j, 1)] * gu[1];
                let d = kernel_grad([u[0] - s[0], u[1] - s[1]]);
                grad[j][0] -= wg * d[0];
                grad[j][1] -= wg * d[1];
            }
        }
        let lambda = &self.inverse * gx;
        let e = -(&lambda * self.coef.transpose());
        for i in 0..k {
            let si = self.unit_source[i];
            for j in 0..k {
                if i == j {
                    continue;
                }
                let sj = self.unit_source[j];
                let d = kernel_grad([si[0] - sj[0], si[1] - sj[1]]);
                let w = e[(i, j)] + e[(j, i)];
                grad[i][0] += w * d[0];
                grad[i][1] += w * d[1];
            }
            grad[i][0] += e[(i, k + 1)] + e[(k + 1, i)];
            grad[i][1] += e[(i, k + 2)] + e[(k + 2, i)];
        }
        for g in &mut grad {
            g[0] /= scale;
            g[1] /= scale;
        }
        grad
    }
}
