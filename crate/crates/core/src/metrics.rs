//! Image and recognition metrics: MS-SSIM, local distortion (LD) and
//! character error rate (CER), plus corpus evaluation with a JSON report.
//!
//! LD uses a pyramid block-matching flow. Its values are only comparable with
//! other LD values from this implementation.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, resize, to_grayscale, write_atomically, ImageBuf};

/// Per-scale exponents, finest first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
/// Smallest side that still leaves one window position at the fifth scale.
pub const MS_SSIM_MIN_SIDE: usize = 176;

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering of a `w × h` plane.
fn filter_valid(data: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> (Vec<f64>, usize, usize) {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|t| k[t] * tmp[(y + t) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean contrast-structure term and mean full SSIM at one scale.
fn ssim_terms(a: &[f64], b: &[f64], w: usize, h: usize) -> (f64, f64) {
    let k = gaussian_window();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (mu1, ow, oh) = filter_valid(a, w, h, &k);
    let (mu2, ..) = filter_valid(b, w, h, &k);
    let (e11, ..) = filter_valid(&aa, w, h, &k);
    let (e22, ..) = filter_valid(&bb, w, h, &k);
    let (e12, ..) = filter_valid(&ab, w, h, &k);
    let n = (ow * oh) as f64;
    let (mut cs_sum, mut ssim_sum) = (0.0, 0.0);
    for i in 0..ow * oh {
        let (m1, m2) = (mu1[i], mu2[i]);
        let s11 = e11[i] - m1 * m1;
        let s22 = e22[i] - m2 * m2;
        let s12 = e12[i] - m1 * m2;
        let cs = (2.0 * s12 + SSIM_C2) / (s11 + s22 + SSIM_C2);
        let l = (2.0 * m1 * m2 + SSIM_C1) / (m1 * m1 + m2 * m2 + SSIM_C1);
        cs_sum += cs;
        ssim_sum += l * cs;
    }
    (cs_sum / n, ssim_sum / n)
}

/// 2×2 mean followed by decimation; odd trailing rows and columns drop.
fn downsample(data: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (nw, nh) = (w / 2, h / 2);
    let mut out = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        for x in 0..nw {
            let i = 2 * y * w + 2 * x;
            out.push(0.25 * (data[i] + data[i + 1] + data[i + w] + data[i + w + 1]));
        }
    }
    (out, nw, nh)
}

/// Five-scale structural similarity of two grayscale images in `[0, 1]`.
/// Negative per-scale terms are clamped to zero before exponentiation.
pub fn ms_ssim(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    if a.channels() != 1 || b.channels() != 1 {
        return Err(Error::Argument("MS-SSIM needs grayscale images".into()));
    }
    if !a.same_shape(b) {
        return Err(Error::Argument(format!(
            "MS-SSIM images differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (w, h) = (a.width(), a.height());
    if w.min(h) < MS_SSIM_MIN_SIDE {
        return Err(Error::Argument(format!(
            "MS-SSIM needs both sides >= {MS_SSIM_MIN_SIDE}, got {w}x{h}"
        )));
    }
    let (mut x, mut y) = (a.data().to_vec(), b.data().to_vec());
    let (mut cw, mut ch) = (w, h);
    let mut score = 1.0;
    for (s, weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (cs, full) = ssim_terms(&x, &y, cw, ch);
        let term = if s + 1 == MS_SSIM_WEIGHTS.len() { full } else { cs };
        score *= term.max(0.0).powf(*weight);
        if s + 1 < MS_SSIM_WEIGHTS.len() {
            let (nx, nw, nh) = downsample(&x, cw, ch);
            let (ny, ..) = downsample(&y, cw, ch);
            x = nx;
            y = ny;
            cw = nw;
            ch = nh;
        }
    }
    Ok(score)
}

/// Block side used by [`local_distortion`].
pub const LD_BLOCK: usize = 16;
/// Search radius at the coarsest pyramid level.
pub const LD_SEARCH: i64 = 24;
/// Pyramid levels of the block matcher.
pub const LD_LEVELS: usize = 3;
/// Blocks with variance below this carry no texture.
pub const LD_MIN_VARIANCE: f64 = 1e-4;
const LD_SPACING: usize = 8;
const LD_REFINE: i64 = 2;

struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn half(&self) -> Plane {
        let (data, w, h) = downsample(&self.data, self.w, self.h);
        Plane { w, h, data }
    }
}

/// Zero-mean sum of squared differences between the block of `r` centered at
/// `(cx, cy)` and the block of `d` displaced by `(dx, dy)`, averaged over the
/// pixels inside `d`. `None` when less than half the block overlaps.
fn block_cost(r: &Plane, d: &Plane, cx: i64, cy: i64, dx: i64, dy: i64, half: i64) -> Option<f64> {
    let mut n = 0usize;
    let (mut sr, mut sd) = (0.0, 0.0);
    let mut pairs = Vec::with_capacity((4 * half * half) as usize);
    for y in cy - half..cy + half {
        for x in cx - half..cx + half {
            let (qx, qy) = (x + dx, y + dy);
            if x < 0 || y < 0 || x >= r.w as i64 || y >= r.h as i64 {
                continue;
            }
            if qx < 0 || qy < 0 || qx >= d.w as i64 || qy >= d.h as i64 {
                continue;
            }
            let a = r.data[y as usize * r.w + x as usize];
            let b = d.data[qy as usize * d.w + qx as usize];
            sr += a;
            sd += b;
            pairs.push((a, b));
            n += 1;
        }
    }
    if n * 2 < (4 * half * half) as usize {
        return None;
    }
    let (mr, md) = (sr / n as f64, sd / n as f64);
    Some(pairs.iter().map(|(a, b)| ((a - mr) - (b - md)).powi(2)).sum::<f64>() / n as f64)
}

fn block_variance(r: &Plane, cx: i64, cy: i64, half: i64) -> f64 {
    let mut vals = Vec::new();
    for y in (cy - half).max(0)..(cy + half).min(r.h as i64) {
        for x in (cx - half).max(0)..(cx + half).min(r.w as i64) {
            vals.push(r.data[y as usize * r.w + x as usize]);
        }
    }
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
}

/// Best integer displacement within `radius` of `start`.
fn search(r: &Plane, d: &Plane, c: (i64, i64), start: (i64, i64), radius: i64, half: i64) -> (i64, i64) {
    let mut best = (f64::INFINITY, start);
    for dy in start.1 - radius..=start.1 + radius {
        for dx in start.0 - radius..=start.0 + radius {
            if let Some(cost) = block_cost(r, d, c.0, c.1, dx, dy, half) {
                // Ties go to the smaller displacement for determinism.
                let better = cost < best.0
                    || (cost == best.0 && dx * dx + dy * dy < best.1 .0.pow(2) + best.1 .1.pow(2));
                if better {
                    best = (cost, (dx, dy));
                }
            }
        }
    }
    best.1
}

/// Vertex offset of the parabola through `(-1, a)`, `(0, b)`, `(1, c)`, clamped
/// to half a pixel.
fn parabola_peak(a: f64, b: f64, c: f64) -> f64 {
    let den = a - 2.0 * b + c;
    if den > 0.0 {
        (0.5 * (a - c) / den).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean displacement magnitude (pixels) between `dewarped` and `reference`.
///
/// Blocks of [`LD_BLOCK`] pixels on an 8-pixel grid of the reference are
/// matched in `dewarped` over a [`LD_LEVELS`]-level pyramid, starting with a
/// ±[`LD_SEARCH`] search at the coarsest level and refining by ±2 at finer
/// levels. The finest match gets a parabolic subpixel fit, the field is
/// median-filtered over 5×5 blocks, and the mean is taken over textured
/// blocks. `dewarped` is resized to the reference size first.
pub fn local_distortion(dewarped: &ImageBuf, reference: &ImageBuf) -> Result<f64> {
    let reference = to_grayscale(reference);
    let (w, h) = (reference.width(), reference.height());
    if w < 4 * LD_BLOCK || h < 4 * LD_BLOCK {
        return Err(Error::Argument(format!(
            "LD needs images of at least {0}x{0}, got {w}x{h}",
            4 * LD_BLOCK
        )));
    }
    let dewarped = resize(&to_grayscale(dewarped), w, h)?;
    let mut r_pyr = vec![Plane { w, h, data: reference.into_data() }];
    let mut d_pyr = vec![Plane { w, h, data: dewarped.into_data() }];
    for _ in 1..LD_LEVELS {
        let r = r_pyr.last().expect("non-empty").half();
        let d = d_pyr.last().expect("non-empty").half();
        r_pyr.push(r);
        d_pyr.push(d);
    }
    let half = (LD_BLOCK / 2) as i64;
    let centers: Vec<(i64, i64)> = (half as usize..=h - half as usize)
        .step_by(LD_SPACING)
        .flat_map(|y| {
            (half as usize..=w - half as usize)
                .step_by(LD_SPACING)
                .map(move |x| (x as i64, y as i64))
        })
        .collect();
    let nx = (half as usize..=w - half as usize).step_by(LD_SPACING).count();
    let ny = centers.len() / nx;

    let textured: Vec<bool> = centers
        .iter()
        .map(|&c| block_variance(&r_pyr[0], c.0, c.1, half) >= LD_MIN_VARIANCE)
        .collect();
    let n_textured = textured.iter().filter(|&&t| t).count();
    if n_textured * 2 < centers.len() {
        return Err(Error::MetricUndefined(format!(
            "textureless image: only {n_textured} of {} blocks have variance >= {LD_MIN_VARIANCE:e}",
            centers.len()
        )));
    }

    let field: Vec<[f64; 2]> = centers
        .par_iter()
        .map(|&(cx, cy)| {
            let mut d = (0i64, 0i64);
            for level in (0..LD_LEVELS).rev() {
                let f = 1i64 << level;
                let c = (cx / f, cy / f);
                let radius = if level + 1 == LD_LEVELS { LD_SEARCH } else { LD_REFINE };
                d = search(&r_pyr[level], &d_pyr[level], c, d, radius, half);
                if level > 0 {
                    d = (2 * d.0, 2 * d.1);
                }
            }
            let (r, dp) = (&r_pyr[0], &d_pyr[0]);
            let cost = |dx, dy| block_cost(r, dp, cx, cy, dx, dy, half);
            let sub = |a: Option<f64>, b: Option<f64>, c: Option<f64>| match (a, b, c) {
                (Some(a), Some(b), Some(c)) => parabola_peak(a, b, c),
                _ => 0.0,
            };
            let c0 = cost(d.0, d.1);
            [
                d.0 as f64 + sub(cost(d.0 - 1, d.1), c0, cost(d.0 + 1, d.1)),
                d.1 as f64 + sub(cost(d.0, d.1 - 1), c0, cost(d.0, d.1 + 1)),
            ]
        })
        .collect();

    // 5×5 median over textured neighbors, then the mean magnitude over
    // textured blocks.
    let mut total = 0.0;
    for iy in 0..ny {
        for ix in 0..nx {
            let i = iy * nx + ix;
            if !textured[i] {
                continue;
            }
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for jy in iy.saturating_sub(2)..(iy + 3).min(ny) {
                for jx in ix.saturating_sub(2)..(ix + 3).min(nx) {
                    let j = jy * nx + jx;
                    if textured[j] {
                        xs.push(field[j][0]);
                        ys.push(field[j][1]);
                    }
                }
            }
            total += median(xs).hypot(median(ys));
        }
    }
    Ok(total / n_textured as f64)
}

/// Collapses whitespace runs to single spaces and trims the ends.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Levenshtein distance over Unicode scalar values divided by the reference
/// length, after whitespace normalization.
pub fn cer(hypothesis: &str, reference: &str) -> Result<f64> {
    let h = normalize_text(hypothesis);
    let r = normalize_text(reference);
    let n = r.chars().count();
    if n == 0 {
        return Err(Error::Argument("CER reference text is empty".into()));
    }
    Ok(strsim::levenshtein(&h, &r) as f64 / n as f64)
}

/// One manifest entry. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    #[serde(default)]
    pub name: Option<String>,
    pub dewarped: PathBuf,
    pub reference: PathBuf,
    /// OCR output for the dewarped image.
    #[serde(default)]
    pub ocr_text: Option<PathBuf>,
    /// Ground-truth text of the reference.
    #[serde(default)]
    pub reference_text: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ms_ssim: Option<f64>,
    pub ld: Option<f64>,
    pub cer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub name: String,
    pub ms_ssim: Option<f64>,
    pub ld: Option<f64>,
    pub cer: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aggregate: Aggregate,
    pub images: Vec<ImageReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<EvalReport> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = self.to_json()?;
        write_atomically(path, |f| std::io::Write::write_all(f, json.as_bytes()))
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Metrics of one pair. Failures of individual metrics are collected into the
/// error field rather than aborting.
fn evaluate_pair(pair: &EvalPair) -> ImageReport {
    let name = pair
        .name
        .clone()
        .unwrap_or_else(|| pair.dewarped.display().to_string());
    let mut report = ImageReport {
        name,
        ms_ssim: None,
        ld: None,
        cer: None,
        error: None,
    };
    let mut errors = Vec::new();
    let images = load_image(&pair.dewarped).and_then(|d| Ok((d, load_image(&pair.reference)?)));
    match images {
        Ok((d, r)) => {
            let r = to_grayscale(&r);
            match resize(&to_grayscale(&d), r.width(), r.height()) {
                Ok(d) => {
                    match ms_ssim(&d, &r) {
                        Ok(v) => report.ms_ssim = Some(v),
                        Err(e) => errors.push(format!("ms_ssim: {e}")),
                    }
                    match local_distortion(&d, &r) {
                        Ok(v) => report.ld = Some(v),
                        Err(e) => errors.push(format!("ld: {e}")),
                    }
                }
                Err(e) => errors.push(e.to_string()),
            }
        }
        Err(e) => errors.push(e.to_string()),
    }
    match (&pair.ocr_text, &pair.reference_text) {
        (Some(h), Some(r)) => match read_text(h).and_then(|h| cer(&h, &read_text(r)?)) {
            Ok(v) => report.cer = Some(v),
            Err(e) => errors.push(format!("cer: {e}")),
        },
        (None, None) => {}
        _ => errors.push("cer: both ocr_text and reference_text are needed".into()),
    }
    if !errors.is_empty() {
        report.error = Some(errors.join("; "));
    }
    report
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Evaluates every pair; per-image failures are recorded, not raised.
/// Aggregates are unweighted means over the images where a metric exists.
pub fn evaluate_corpus(pairs: &[EvalPair]) -> EvalReport {
    let images: Vec<ImageReport> = pairs.par_iter().map(evaluate_pair).collect();
    EvalReport {
        aggregate: Aggregate {
            ms_ssim: mean_of(images.iter().map(|i| i.ms_ssim)),
            ld: mean_of(images.iter().map(|i| i.ld)),
            cer: mean_of(images.iter().map(|i| i.cer)),
        },
        images,
    }
}

/// Reads a manifest: a JSON list of [`EvalPair`]. Relative paths are resolved
/// against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<EvalPair>> {
    let text = read_text(path)?;
    let mut pairs: Vec<EvalPair> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    for pair in &mut pairs {
        fix(&mut pair.dewarped);
        fix(&mut pair.reference);
        if let Some(p) = pair.ocr_text.as_mut() {
            fix(p);
        }
        if let Some(p) = pair.reference_text.as_mut() {
            fix(p);
        }
    }
    Ok(pairs)
}
