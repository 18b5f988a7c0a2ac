//! Seeded synthetic content for tests and demos: a flat text page, smooth and
//! fine random textures, and a smooth illumination falloff.
//!
//! The page is a light sheet inset on a dark textured desk. The desk stays
//! close to the zero padding used by the samplers, so regions a deformation
//! pushes out of frame cost little, while its texture pins down the mesh
//! points that fall outside the sheet.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::image::ImageBuf;

/// Sheet brightness of [`text_page`].
pub const SHEET: f64 = 0.94;
/// Ink brightness of [`text_page`].
pub const INK: f64 = 0.08;

/// Brightness range of the desk around the sheet.
pub const DESK_LO: f64 = 0.0;
pub const DESK_HI: f64 = 0.12;

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;
const ALPHABET: usize = 48;

/// Axis-aligned rectangle `[x0, x1) × [y0, y1)` in continuous pixel units,
/// where pixel `(i, j)` covers `[i - 0.5, i + 0.5) × [j - 0.5, j + 0.5)`.
#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

/// Paints `rect` with `value` using exact box-filter coverage.
fn fill_rect(data: &mut [f64], width: usize, height: usize, rect: Rect, value: f64) {
    let xa = (rect.x0 + 0.5).floor().max(0.0) as usize;
    let ya = (rect.y0 + 0.5).floor().max(0.0) as usize;
    let xb = ((rect.x1 + 0.5).ceil() as usize).min(width);
    let yb = ((rect.y1 + 0.5).ceil() as usize).min(height);
    for y in ya..yb {
        let cy = (rect.y1.min(y as f64 + 0.5) - rect.y0.max(y as f64 - 0.5)).max(0.0);
        if cy == 0.0 {
            continue;
        }
        for x in xa..xb {
            let cx = (rect.x1.min(x as f64 + 0.5) - rect.x0.max(x as f64 - 0.5)).max(0.0);
            let cover = cx * cy;
            let p = &mut data[y * width + x];
            *p += (value - *p) * cover;
        }
    }
}

/// Random 5×7 bitmaps with a stem or bar in each so every glyph has ink.
fn alphabet(rng: &mut ChaCha8Rng) -> Vec<[bool; GLYPH_W * GLYPH_H]> {
    (0..ALPHABET)
        .map(|_| {
            let mut g = [false; GLYPH_W * GLYPH_H];
            let stem = rng.gen_range(0..GLYPH_W);
            for r in 0..GLYPH_H {
                g[r * GLYPH_W + stem] = true;
            }
            let bar = rng.gen_range(0..GLYPH_H);
            for c in 0..GLYPH_W {
                g[bar * GLYPH_W + c] = rng.gen_bool(0.8);
            }
            for cell in g.iter_mut() {
                if rng.gen_bool(0.18) {
                    *cell = true;
                }
            }
            g
        })
        .collect()
}

struct Pen<'a> {
    data: &'a mut [f64],
    width: usize,
    height: usize,
    glyphs: Vec<[bool; GLYPH_W * GLYPH_H]>,
}

impl Pen<'_> {
    fn glyph(&mut self, id: usize, x: f64, y: f64, cell: f64) {
        let g = self.glyphs[id];
        for r in 0..GLYPH_H {
            for c in 0..GLYPH_W {
                if g[r * GLYPH_W + c] {
                    let rect = Rect {
                        x0: x + c as f64 * cell,
                        y0: y + r as f64 * cell,
                        x1: x + (c + 1) as f64 * cell,
                        y1: y + (r + 1) as f64 * cell,
                    };
                    fill_rect(self.data, self.width, self.height, rect, INK);
                }
            }
        }
    }

    fn rect(&mut self, rect: Rect, value: f64) {
        fill_rect(self.data, self.width, self.height, rect, value);
    }
}

/// Dark textured background in `[DESK_LO, DESK_HI]`: fine grain plus
/// structure on the scale of a few glyph lines.
fn desk(width: usize, height: usize, seed: u64) -> ImageBuf {
    let short = width.min(height) as f64;
    let grain = noise_texture(width, height, seed);
    let waves = smooth_texture(width, height, 0.03 * short, seed ^ 0x5eed);
    let fine = grain.data();
    ImageBuf::from_fn(width, height, |x, y| {
        let v = 0.5 * fine[y * width + x] + 0.5 * waves.get(x, y, 0);
        DESK_LO + (DESK_HI - DESK_LO) * v
    })
}

/// A flat synthetic document: a light sheet inset on a dark desk, with
/// a heading and ragged paragraphs of pseudo-glyph words around one figure box.
/// Glyph size scales with `min(width, height) / 256`.
pub fn text_page(width: usize, height: usize, seed: u64) -> ImageBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let short = width.min(height) as f64;
    let unit = (short / 256.0).max(0.5);
    let inset = (0.09 * short).round();
    let mut data = desk(width, height, rng.gen()).into_data();
    let sheet = Rect {
        x0: inset - 0.5,
        y0: inset - 0.5,
        x1: width as f64 - inset - 0.5,
        y1: height as f64 - inset - 0.5,
    };
    let glyphs = alphabet(&mut rng);
    let mut pen = Pen {
        data: &mut data,
        width,
        height,
        glyphs,
    };
    pen.rect(sheet, SHEET);

    let margin = (0.05 * short).round();
    let left = sheet.x0 + margin;
    let right = sheet.x1 - margin;
    let bottom = sheet.y1 - margin;
    let mut y = sheet.y0 + margin;

    // Heading: larger glyphs, centered-ish.
    let big = 1.5 * unit;
    let advance_big = (GLYPH_W as f64 + 1.5) * big;
    let n_head = rng.gen_range(6..12).min(((right - left) / advance_big) as usize);
    let mut x = left + rng.gen_range(0.0..=(right - left - n_head as f64 * advance_big).max(0.0));
    for _ in 0..n_head {
        let id = rng.gen_range(0..ALPHABET);
        pen.glyph(id, x, y, big);
        x += advance_big;
    }
    y += (GLYPH_H as f64 + 6.0) * big;

    let cell = unit;
    let advance = (GLYPH_W as f64 + 1.0) * cell;
    let line = (GLYPH_H as f64 + 4.0) * cell;
    let mut figure_done = false;
    while y + GLYPH_H as f64 * cell < bottom {
        // One figure box somewhere in the body.
        if !figure_done && y > sheet.y0 + 0.3 * (sheet.y1 - sheet.y0) {
            figure_done = true;
            let fw = rng.gen_range(0.3..0.6) * (right - left);
            let fh = (rng.gen_range(5..9) as f64 * line).min(bottom - y - line);
            if fh > 2.0 * line {
                let fx = left + rng.gen_range(0.0..(right - left - fw));
                let frame = Rect { x0: fx, y0: y, x1: fx + fw, y1: y + fh };
                pen.rect(frame, 0.35);
                let t = 1.5 * cell;
                pen.rect(
                    Rect { x0: fx + t, y0: y + t, x1: fx + fw - t, y1: y + fh - t },
                    0.75,
                );
                // Diagonal steps inside the figure.
                let steps = 6;
                for s in 0..steps {
                    let sx = fx + t + (s as f64 + 0.5) * (fw - 2.0 * t) / steps as f64;
                    let sy = y + fh - t - (s as f64 + 1.0) * (fh - 2.0 * t) / (steps + 1) as f64;
                    pen.rect(Rect { x0: sx - 2.0 * cell, y0: sy, x1: sx + 2.0 * cell, y1: y + fh - t }, 0.45);
                }
                y += fh + line;
                continue;
            }
        }
        // A paragraph: indented first line, ragged last line.
        let n_lines = rng.gen_range(2..7);
        for li in 0..n_lines {
            if y + GLYPH_H as f64 * cell >= bottom {
                break;
            }
            let mut x = left + if li == 0 { 3.0 * advance } else { 0.0 };
            let end = if li + 1 == n_lines {
                left + rng.gen_range(0.25..0.8) * (right - left)
            } else {
                right
            };
            loop {
                let len = rng.gen_range(1..9);
                if x + len as f64 * advance > end {
                    break;
                }
                for _ in 0..len {
                    let id = rng.gen_range(0..ALPHABET);
                    pen.glyph(id, x, y, cell);
                    x += advance;
                }
                x += advance;
            }
            y += line;
        }
        y += 0.6 * line;
    }
    ImageBuf::gray_unchecked(width, height, data)
}

/// Smooth random texture in `[0, 1]`: a sum of random plane waves whose
/// wavelengths are at least `min_wavelength` pixels.
pub fn smooth_texture(width: usize, height: usize, min_wavelength: f64, seed: u64) -> ImageBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..12)
        .map(|_| {
            let wl = min_wavelength * rng.gen_range(1.0..3.0);
            let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / wl;
            (k * th.cos(), k * th.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.5..1.0))
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    ImageBuf::from_fn(width, height, |x, y| {
        let s: f64 = waves
            .iter()
            .map(|&(kx, ky, ph, a)| a * (kx * x as f64 + ky * y as f64 + ph).sin())
            .sum();
        0.5 + 0.45 * s / norm
    })
}

/// Fine random texture: white noise blurred by a small binomial kernel and
/// stretched to `[0, 1]`. Suitable for block matching.
pub fn noise_texture(width: usize, height: usize, seed: u64) -> ImageBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white: Vec<f64> = (0..width * height)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let k = [1.0, 4.0, 6.0, 4.0, 1.0];
    let blur = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; width * height];
        for y in 0..height {
            for x in 0..width {
                let mut s = 0.0;
                for (t, w) in k.iter().enumerate() {
                    let o = t as i64 - 2;
                    let (xx, yy) = if horizontal {
                        ((x as i64 + o).rem_euclid(width as i64) as usize, y)
                    } else {
                        (x, (y as i64 + o).rem_euclid(height as i64) as usize)
                    };
                    s += w * src[yy * width + xx];
                }
                out[y * width + x] = s / 16.0;
            }
        }
        out
    };
    let smooth = blur(&blur(&white, true), false);
    let (lo, hi) = smooth
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let data = smooth.iter().map(|v| (v - lo) / (hi - lo)).collect();
    ImageBuf::gray_unchecked(width, height, data)
}

/// Multiplicative illumination gain in `[1 - strength, 1]`: a random linear
/// falloff combined with a broad Gaussian shadow blob.
pub fn smooth_shadow(width: usize, height: usize, strength: f64, seed: u64) -> ImageBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (w, h) = (width as f64, height as f64);
    let cx = rng.gen_range(0.0..w);
    let cy = rng.gen_range(0.0..h);
    let rad = rng.gen_range(0.3..0.6) * w.max(h);
    let raw: Vec<f64> = (0..height)
        .flat_map(|y| (0..width).map(move |x| (x as f64, y as f64)))
        .map(|(x, y)| {
            let ramp = (x / w - 0.5) * th.cos() + (y / h - 0.5) * th.sin();
            let blob = (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * rad * rad)).exp();
            ramp + blob
        })
        .collect();
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let data = raw
        .iter()
        .map(|v| 1.0 - strength * (v - lo) / (hi - lo))
        .collect();
    ImageBuf::gray_unchecked(width, height, data)
}

/// Pixelwise product of an image with a single-channel gain field.
pub fn apply_gain(img: &ImageBuf, gain: &ImageBuf) -> ImageBuf {
    assert_eq!(
        (img.width(), img.height()),
        (gain.width(), gain.height()),
        "gain field size differs"
    );
    let c = img.channels();
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * gain.data()[i / c])
        .collect();
    ImageBuf::new(img.width(), img.height(), c, data).expect("finite product")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn page_is_deterministic_and_bounded() {
        let a = text_page(256, 256, 3);
        assert_eq!(a, text_page(256, 256, 3));
        assert_ne!(a, text_page(256, 256, 4));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // Desk at the corner, sheet and ink inside.
        assert!((DESK_LO..=DESK_HI).contains(&a.get(0, 0, 0)));
        let inked = a.data().iter().filter(|&&v| v < 0.5 && v > DESK_HI).count();
        assert!(inked > 2000, "{inked}");
    }

    #[test]
    fn box_coverage_is_exact() {
        let mut d = vec![0.0; 16];
        fill_rect(&mut d, 4, 4, Rect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }, 1.0);
        assert_eq!(d[0], 0.25);
        assert_eq!(d[1], 0.25);
        assert_eq!(d[4], 0.25);
        assert_eq!(d[5], 0.25);
        assert_eq!(d.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn textures_span_unit_range() {
        let n = noise_texture(64, 48, 1);
        let lo = n.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = n.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        let s = smooth_texture(64, 48, 30.0, 1);
        assert!(s.data().iter().all(|v| (0.05..=0.95).contains(v)));
    }

    #[test]
    fn shadow_gain_range() {
        let g = smooth_shadow(80, 60, 0.5, 2);
        let lo = g.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = g.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((lo - 0.5).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        let img = ImageBuf::filled(80, 60, 0.8);
        let shaded = apply_gain(&img, &g);
        assert!((shaded.get(3, 4, 0) - 0.8 * g.get(3, 4, 0)).abs() < 1e-15);
    }
}
