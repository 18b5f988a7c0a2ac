//! Coarse coordinate lattices and the masked L1 warp term.
//!
//! Sampling coordinates are evaluated exactly at lattice nodes and bilinearly
//! interpolated in between. With stride 1 every pixel is a node and the
//! coordinates are exact. Gradients are taken with respect to the node
//! coordinates, so the loss and its gradient are always consistent.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{sample_plane, ImageBuf};
use crate::tps::TpsSystem;

/// Residuals smaller than this are treated as exact matches: their L1
/// subgradient is zero.
pub(crate) const DEAD_ZONE: f64 = 1e-10;

/// Node positions along one axis and, for every pixel, the segment it falls in
/// plus its fractional position.
fn axis(n: usize, stride: usize) -> (Vec<f64>, Vec<(usize, f64)>) {
    let mut nodes: Vec<usize> = (0..n).step_by(stride.max(1)).collect();
    if *nodes.last().expect("n >= 1") != n - 1 {
        nodes.push(n - 1);
    }
    let mut seg = 0;
    let per_pixel = (0..n)
        .map(|x| {
            while seg + 2 < nodes.len() && x >= nodes[seg + 1] {
                seg += 1;
            }
            let (a, b) = (nodes[seg], nodes[seg + 1]);
            (seg, (x - a) as f64 / (b - a) as f64)
        })
        .collect();
    (nodes.into_iter().map(|v| v as f64).collect(), per_pixel)
}

#[derive(Debug, Clone)]
pub(crate) struct Lattice {
    pub width: usize,
    pub height: usize,
    pub nx: usize,
    pub ny: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
    px: Vec<(usize, f64)>,
    py: Vec<(usize, f64)>,
    /// Pixel row range of each band between consecutive node rows.
    bands: Vec<(usize, usize)>,
}

impl Lattice {
    pub fn new(width: usize, height: usize, stride: usize) -> Result<Lattice> {
        if width < 2 || height < 2 {
            return Err(Error::Argument(format!(
                "raster {width}x{height} is too small for a coordinate lattice"
            )));
        }
        let (xs, px) = axis(width, stride);
        let (ys, py) = axis(height, stride);
        let ny = ys.len();
        let mut bands = vec![(0, 0); ny - 1];
        for (y, &(seg, _)) in py.iter().enumerate() {
            if bands[seg].1 == 0 {
                bands[seg].0 = y;
            }
            bands[seg].1 = y + 1;
        }
        Ok(Lattice {
            width,
            height,
            nx: xs.len(),
            ny,
            xs,
            ys,
            px,
            py,
            bands,
        })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    /// Node positions, row-major.
    pub fn nodes(&self) -> Vec<[f64; 2]> {
        self.ys
            .iter()
            .flat_map(|&y| self.xs.iter().map(move |&x| [x, y]))
            .collect()
    }
}

/// Sampling coordinates that are linear in the target points of a spline with
/// a fixed source: `coord(node) = Σ_j basis[node][j] · target_j`.
pub(crate) struct LinearWarp {
    pub lattice: Lattice,
    k: usize,
    basis: Vec<f64>,
}

impl LinearWarp {
    pub fn new(system: &TpsSystem, lattice: Lattice) -> LinearWarp {
        let k = system.source().len();
        let nodes = lattice.nodes();
        let mut basis = vec![0.0; nodes.len() * k];
        basis
            .par_chunks_mut(k)
            .zip(nodes.par_iter())
            .for_each_init(
                || vec![0.0; k + 3],
                |lift, (out, &q)| system.basis_into(q, lift, out),
            );
        LinearWarp { lattice, k, basis }
    }

    pub fn node_coords(&self, target: &[[f64; 2]]) -> Vec<[f64; 2]> {
        debug_assert_eq!(target.len(), self.k);
        self.basis
            .par_chunks(self.k)
            .map(|b| {
                let mut c = [0.0; 2];
                for (w, t) in b.iter().zip(target) {
                    c[0] += w * t[0];
                    c[1] += w * t[1];
                }
                c
            })
            .collect()
    }

    /// Transposed map: gradient with respect to the target points given the
    /// gradient with respect to node coordinates.
    pub fn pullback(&self, node_grad: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let mut out = vec![[0.0; 2]; self.k];
        for (b, g) in self.basis.chunks(self.k).zip(node_grad) {
            if g[0] == 0.0 && g[1] == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(b) {
                o[0] += w * g[0];
                o[1] += w * g[1];
            }
        }
        out
    }
}

pub(crate) struct TermOut {
    pub loss: f64,
    pub node_grad: Vec<[f64; 2]>,
}

/// A linear, self-adjoint filter applied to warped rasters before comparison.
pub(crate) type Filter<'a> = &'a dyn Fn(&ImageBuf) -> Result<ImageBuf>;

/// `src` sampled at the bilinearly interpolated lattice coordinates, with the
/// sampler's spatial derivatives, for every output pixel.
struct Sampled {
    value: Vec<f64>,
    d_dx: Vec<f64>,
    d_dy: Vec<f64>,
}

fn bilinear_weights(lat: &Lattice, x: usize, y: usize) -> (usize, [f64; 4]) {
    let (ix, tx) = lat.px[x];
    let ty = lat.py[y].1;
    (
        ix,
        [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty],
    )
}

fn sample_all(lat: &Lattice, nodes: &[[f64; 2]], src: &ImageBuf) -> Sampled {
    let nx = lat.nx;
    let (sw, sh) = (src.width(), src.height());
    let sdata = src.data();
    let bands: Vec<Vec<(f64, f64, f64)>> = lat
        .bands
        .par_iter()
        .enumerate()
        .map(|(band, &(y0, y1))| {
            let top = &nodes[band * nx..(band + 1) * nx];
            let bot = &nodes[(band + 1) * nx..(band + 2) * nx];
            let mut out = Vec::with_capacity((y1 - y0) * lat.width);
            for y in y0..y1 {
                for x in 0..lat.width {
                    let (ix, w) = bilinear_weights(lat, x, y);
                    let c = [
                        w[0] * top[ix][0] + w[1] * top[ix + 1][0] + w[2] * bot[ix][0] + w[3] * bot[ix + 1][0],
                        w[0] * top[ix][1] + w[1] * top[ix + 1][1] + w[2] * bot[ix][1] + w[3] * bot[ix + 1][1],
                    ];
                    let s = sample_plane(sdata, sw, sh, 1, 0, c[0], c[1]);
                    out.push((s.value, s.d_dx, s.d_dy));
                }
            }
            out
        })
        .collect();
    let n = lat.width * lat.height;
    let mut sampled = Sampled {
        value: Vec::with_capacity(n),
        d_dx: Vec::with_capacity(n),
        d_dy: Vec::with_capacity(n),
    };
    for (v, dx, dy) in bands.into_iter().flatten() {
        sampled.value.push(v);
        sampled.d_dx.push(dx);
        sampled.d_dy.push(dy);
    }
    sampled
}

/// `Σ_p weight(p) · ∇src(s(p))` spread onto the lattice nodes.
fn accumulate(lat: &Lattice, sampled: &Sampled, weight: &[f64]) -> Vec<[f64; 2]> {
    let nx = lat.nx;
    let partials: Vec<Vec<[f64; 2]>> = lat
        .bands
        .par_iter()
        .map(|&(y0, y1)| {
            let mut grad = vec![[0.0; 2]; 2 * nx];
            for y in y0..y1 {
                for x in 0..lat.width {
                    let i = y * lat.width + x;
                    let e = weight[i];
                    if e == 0.0 {
                        continue;
                    }
                    let g = [e * sampled.d_dx[i], e * sampled.d_dy[i]];
                    let (ix, w) = bilinear_weights(lat, x, y);
                    for (slot, wk) in [ix, ix + 1, nx + ix, nx + ix + 1].into_iter().zip(w) {
                        grad[slot][0] += wk * g[0];
                        grad[slot][1] += wk * g[1];
                    }
                }
            }
            grad
        })
        .collect();
    // Fixed-order reduction keeps results independent of the worker count.
    let mut node_grad = vec![[0.0; 2]; lat.len()];
    for (band, g) in partials.into_iter().enumerate() {
        for (slot, v) in g.into_iter().enumerate() {
            let n = band * nx + slot;
            node_grad[n][0] += v[0];
            node_grad[n][1] += v[1];
        }
    }
    node_grad
}

/// Masked mean absolute difference between `src` sampled at the lattice
/// coordinates and `tgt`, with its gradient with respect to the node
/// coordinates. Without a mask every pixel counts. With a `filter`, the
/// warped raster is filtered before the comparison, so `tgt` must already be
/// filtered; the filter must be linear and self-adjoint.
pub(crate) fn l1_term(
    lat: &Lattice,
    nodes: &[[f64; 2]],
    src: &ImageBuf,
    tgt: &ImageBuf,
    mask: Option<&[f64]>,
    filter: Option<Filter>,
) -> Result<TermOut> {
    debug_assert_eq!(nodes.len(), lat.len());
    debug_assert_eq!((tgt.width(), tgt.height()), (lat.width, lat.height));
    let denom = match mask {
        Some(m) => m.iter().sum::<f64>(),
        None => (lat.width * lat.height) as f64,
    };
    if denom <= 0.0 {
        return Err(Error::Numerical("loss mask has zero area".into()));
    }
    let sampled = sample_all(lat, nodes, src);
    let compared = match filter {
        Some(f) => f(&ImageBuf::gray_unchecked(lat.width, lat.height, sampled.value.clone()))?.into_data(),
        None => sampled.value.clone(),
    };
    let inv = 1.0 / denom;
    let mut loss = 0.0;
    let mut weight = vec![0.0; compared.len()];
    for (i, (c, t)) in compared.iter().zip(tgt.data()).enumerate() {
        let m = mask.map_or(1.0, |m| m[i]);
        if m == 0.0 {
            continue;
        }
        let diff = c - t;
        loss += m * diff.abs();
        if diff.abs() > DEAD_ZONE {
            weight[i] = m * diff.signum() * inv;
        }
    }
    if let Some(f) = filter {
        weight = f(&ImageBuf::gray_unchecked(lat.width, lat.height, weight))?.into_data();
    }
    Ok(TermOut {
        loss: loss * inv,
        node_grad: accumulate(lat, &sampled, &weight),
    })
}
