//! Centered 2-D DFT and the blank-paper spectral swap used for photometric
//! restoration.
//!
//! Spectra are stored centered: the DC bin sits at row `⌊H/2⌋`, column
//! `⌊W/2⌋`, and the signed frequency of stored row `i` is `i − ⌊H/2⌋`. The
//! forward transform is unnormalized; [`ifft2`] applies `1/(H·W)`.

use std::path::PathBuf;

use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::image::{load_image, resize, to_grayscale, ImageBuf};

/// Block ratio used on the loss path.
pub const BETA_TRAIN: f64 = 0.06;
/// Block ratio used for recognition-time restoration.
pub const BETA_RESTORE: f64 = 0.008;
/// Intensity of the default uniform blank page.
pub const DEFAULT_BLANK: f64 = 0.96;

/// Imaginary residue above which [`ifft2`] reports a non-real spectrum.
const MAX_IMAG_RESIDUE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub width: usize,
    pub height: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrum {
    /// Bin at signed frequencies `(h, w)` (wrapped into range).
    pub fn at(&self, h: i64, w: i64) -> Complex<f64> {
        let row = (h + (self.height / 2) as i64).rem_euclid(self.height as i64) as usize;
        let col = (w + (self.width / 2) as i64).rem_euclid(self.width as i64) as usize;
        let i = row * self.width + col;
        Complex::new(self.re[i], self.im[i])
    }

    /// `Σ |X|²` over all bins.
    pub fn energy(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .sum()
    }
}

/// Source of the blank-paper spectrum.
#[derive(Debug, Clone, PartialEq)]
pub enum Blank {
    /// A uniform page; its spectrum is DC only.
    Uniform(f64),
    /// An image loaded from disk and resized to the document.
    File(PathBuf),
    /// An in-memory image, resized to the document.
    Image(ImageBuf),
}

impl Default for Blank {
    fn default() -> Self {
        Blank::Uniform(DEFAULT_BLANK)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FourierConfig {
    pub beta: f64,
    pub blank: Blank,
}

impl FourierConfig {
    pub fn new(beta: f64, blank: Blank) -> Result<Self> {
        check_beta(beta)?;
        if let Blank::Uniform(v) = blank {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Argument(format!(
                    "uniform blank intensity must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(Self { beta, blank })
    }

    pub fn training() -> Self {
        Self {
            beta: BETA_TRAIN,
            blank: Blank::default(),
        }
    }

    pub fn restoration() -> Self {
        Self {
            beta: BETA_RESTORE,
            blank: Blank::default(),
        }
    }
}

pub fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=0.5).contains(&beta) {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "beta must lie in [0, 0.5], got {beta}"
        )))
    }
}

fn transform_2d(width: usize, height: usize, buf: &mut [Complex<f64>], dir: FftDirection) {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft(width, dir);
    let mut scratch = vec![Complex::default(); row_fft.get_inplace_scratch_len()];
    for row in buf.chunks_exact_mut(width) {
        row_fft.process_with_scratch(row, &mut scratch);
    }
    let col_fft = planner.plan_fft(height, dir);
    scratch.resize(col_fft.get_inplace_scratch_len(), Complex::default());
    let mut column = vec![Complex::default(); height];
    for x in 0..width {
        for (y, c) in column.iter_mut().enumerate() {
            *c = buf[y * width + x];
        }
        col_fft.process_with_scratch(&mut column, &mut scratch);
        for (y, c) in column.iter().enumerate() {
            buf[y * width + x] = *c;
        }
    }
}

/// Centered, unnormalized forward transform of a grayscale image.
pub fn fft2(img: &ImageBuf) -> Result<Spectrum> {
    if img.channels() != 1 {
        return Err(Error::Argument(format!(
            "fft2 expects a grayscale image, got {} channels",
            img.channels()
        )));
    }
    let (w, h) = (img.width(), img.height());
    let mut buf: Vec<Complex<f64>> = img.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    transform_2d(w, h, &mut buf, FftDirection::Forward);
    let (cy, cx) = (h / 2, w / 2);
    let mut re = vec![0.0; w * h];
    let mut im = vec![0.0; w * h];
    for y in 0..h {
        let row = (y + cy) % h;
        for x in 0..w {
            let col = (x + cx) % w;
            let v = buf[y * w + x];
            re[row * w + col] = v.re;
            im[row * w + col] = v.im;
        }
    }
    Ok(Spectrum {
        width: w,
        height: h,
        re,
        im,
    })
}

/// Inverse of [`fft2`], scaled by `1/(H·W)`. The output is not clamped.
pub fn ifft2(s: &Spectrum) -> Result<ImageBuf> {
    let (w, h) = (s.width, s.height);
    if w == 0 || h == 0 || s.re.len() != w * h || s.im.len() != w * h {
        return Err(Error::Argument("malformed spectrum".into()));
    }
    let (cy, cx) = (h / 2, w / 2);
    let mut buf = vec![Complex::default(); w * h];
    for y in 0..h {
        let row = (y + cy) % h;
        for x in 0..w {
            let col = (x + cx) % w;
            buf[y * w + x] = Complex::new(s.re[row * w + col], s.im[row * w + col]);
        }
    }
    transform_2d(w, h, &mut buf, FftDirection::Inverse);
    let norm = 1.0 / (w * h) as f64;
    let residue = buf.iter().fold(0.0f64, |m, c| m.max((c.im * norm).abs()));
    if !(residue <= MAX_IMAG_RESIDUE) {
        return Err(Error::Numerical(format!(
            "inverse transform left imaginary residue {residue:.3e}; spectrum is not conjugate-symmetric"
        )));
    }
    ImageBuf::new(w, h, 1, buf.iter().map(|c| c.re * norm).collect())
}

/// Half-extents `(⌊βH⌋, ⌊βW⌋)` of the replaced low-frequency block.
pub fn block_half_extent(height: usize, width: usize, beta: f64) -> (usize, usize) {
    (
        (beta * height as f64).floor() as usize,
        (beta * width as f64).floor() as usize,
    )
}

/// High-pass mask on the centered grid: 0 where `|h| ≤ ⌊βH⌋` and
/// `|w| ≤ ⌊βW⌋`, 1 elsewhere. Row-major, `height × width`.
pub fn highpass_mask(height: usize, width: usize, beta: f64) -> Result<Vec<u8>> {
    check_beta(beta)?;
    let (bh, bw) = block_half_extent(height, width, beta);
    let (cy, cx) = ((height / 2) as i64, (width / 2) as i64);
    let mut mask = vec![1u8; height * width];
    for row in 0..height {
        let fh = (row as i64 - cy).unsigned_abs() as usize;
        if fh > bh {
            continue;
        }
        for col in 0..width {
            let fw = (col as i64 - cx).unsigned_abs() as usize;
            if fw <= bw {
                mask[row * width + col] = 0;
            }
        }
    }
    Ok(mask)
}

fn blank_plane(blank: &Blank, like: &ImageBuf, channel: usize) -> Result<Option<ImageBuf>> {
    let img = match blank {
        Blank::Uniform(_) => return Ok(None),
        Blank::File(path) => load_image(path)?,
        Blank::Image(img) => img.clone(),
    };
    let img = resize(&img, like.width(), like.height())?;
    let plane = if img.channels() == 1 {
        img
    } else if like.channels() == 1 {
        to_grayscale(&img)
    } else {
        img.channel(channel)
    };
    Ok(Some(plane))
}

fn convert_plane(plane: &ImageBuf, beta: f64, blank: &Blank, blank_img: Option<&ImageBuf>) -> Result<ImageBuf> {
    let mut spec = fft2(plane)?;
    let mask = highpass_mask(spec.height, spec.width, beta)?;
    match (blank, blank_img) {
        (_, Some(b)) => {
            let bs = fft2(b)?;
            for (i, &m) in mask.iter().enumerate() {
                if m == 0 {
                    spec.re[i] = bs.re[i];
                    spec.im[i] = bs.im[i];
                }
            }
        }
        (Blank::Uniform(v), None) => {
            for (i, &m) in mask.iter().enumerate() {
                if m == 0 {
                    spec.re[i] = 0.0;
                    spec.im[i] = 0.0;
                }
            }
            let dc = (spec.height / 2) * spec.width + spec.width / 2;
            spec.re[dc] = v * (spec.height * spec.width) as f64;
        }
        _ => unreachable!("file and image blanks are always materialized"),
    }
    ifft2(&spec)
}

/// Replaces the low-frequency block of the (grayscale-converted) image with
/// the blank page's: `x' = M·x + (1 − M)·x_blank`. Output is unclamped.
pub fn fourier_convert(img: &ImageBuf, cfg: &FourierConfig) -> Result<ImageBuf> {
    check_beta(cfg.beta)?;
    let gray = to_grayscale(img);
    let blank = blank_plane(&cfg.blank, &gray, 0)?;
    convert_plane(&gray, cfg.beta, &cfg.blank, blank.as_ref())
}

/// Channel-wise variant of [`fourier_convert`] that keeps color.
pub fn fourier_convert_channels(img: &ImageBuf, cfg: &FourierConfig) -> Result<ImageBuf> {
    check_beta(cfg.beta)?;
    if img.channels() == 1 {
        return fourier_convert(img, cfg);
    }
    let planes = (0..img.channels())
        .map(|c| {
            let blank = blank_plane(&cfg.blank, img, c)?;
            convert_plane(&img.channel(c), cfg.beta, &cfg.blank, blank.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    ImageBuf::from_channels(&planes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, seed: u64) -> ImageBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuf::from_fn(w, h, |_, _| rng.gen())
    }

    fn max_diff(a: &ImageBuf, b: &ImageBuf) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn constant_image_has_dc_only() {
        let s = fft2(&ImageBuf::filled(6, 5, 0.25)).unwrap();
        for h in -2..=2 {
            for w in -3..3 {
                let v = s.at(h, w);
                if h == 0 && w == 0 {
                    assert!((v.re - 0.25 * 30.0).abs() < 1e-12 && v.im.abs() < 1e-12);
                } else {
                    assert!(v.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn impulse_has_flat_magnitude() {
        let img = ImageBuf::from_fn(7, 4, |x, y| if x == 0 && y == 0 { 1.0 } else { 0.0 });
        let s = fft2(&img).unwrap();
        for (r, i) in s.re.iter().zip(&s.im) {
            assert!(((r * r + i * i).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_edge_cases() {
        let dc = Spectrum {
            width: 4,
            height: 3,
            re: {
                let mut v = vec![0.0; 12];
                v[4 + 2] = 0.7 * 12.0;
                v
            },
            im: vec![0.0; 12],
        };
        let img = ifft2(&dc).unwrap();
        assert!(img.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
        let zero = Spectrum {
            width: 3,
            height: 3,
            re: vec![0.0; 9],
            im: vec![0.0; 9],
        };
        assert!(ifft2(&zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn asymmetric_spectrum_is_rejected() {
        let mut s = fft2(&random(8, 8, 1)).unwrap();
        s.im[3] += 5.0;
        assert!(matches!(ifft2(&s), Err(Error::Numerical(_))));
    }

    #[test]
    fn round_trip_16x16() {
        let img = random(16, 16, 2);
        let back = ifft2(&fft2(&img).unwrap()).unwrap();
        assert!(max_diff(&img, &back) < 1e-10);
    }

    #[test]
    fn mask_examples() {
        let m = highpass_mask(8, 8, 0.0).unwrap();
        assert_eq!(m.iter().filter(|&&v| v == 0).count(), 1);
        assert_eq!(m[4 * 8 + 4], 0);

        let m = highpass_mask(8, 8, 0.25).unwrap();
        assert_eq!(m.iter().filter(|&&v| v == 0).count(), 25);
        for row in 0..8 {
            for col in 0..8 {
                let inside = (2..=6).contains(&row) && (2..=6).contains(&col);
                assert_eq!(m[row * 8 + col] == 0, inside, "({row},{col})");
            }
        }

        for (h, w) in [(8, 8), (7, 9), (6, 5)] {
            assert!(highpass_mask(h, w, 0.5).unwrap().iter().all(|&v| v == 0));
        }
        assert!(highpass_mask(8, 8, 0.7).is_err());
        assert!(highpass_mask(8, 8, -0.1).is_err());
    }

    #[test]
    fn mask_is_point_symmetric_and_monotone() {
        for (h, w) in [(7usize, 7usize), (8, 8), (15, 16), (32, 32), (9, 12)] {
            let mut prev_zeros = 0;
            for step in 0..50 {
                let beta = step as f64 * 0.01;
                let m = highpass_mask(h, w, beta).unwrap();
                let (cy, cx) = ((h / 2) as i64, (w / 2) as i64);
                for row in 0..h as i64 {
                    for col in 0..w as i64 {
                        let (fh, fw) = (row - cy, col - cx);
                        let r2 = (-fh + cy).rem_euclid(h as i64);
                        let c2 = (-fw + cx).rem_euclid(w as i64);
                        assert_eq!(
                            m[(row * w as i64 + col) as usize],
                            m[(r2 * w as i64 + c2) as usize]
                        );
                    }
                }
                let zeros = m.iter().filter(|&&v| v == 0).count();
                assert!(zeros >= prev_zeros);
                prev_zeros = zeros;
            }
        }
    }

    #[test]
    fn self_blank_is_identity() {
        let img = random(20, 14, 3);
        for beta in [0.0, 0.06, 0.2, 0.5] {
            let cfg = FourierConfig::new(beta, Blank::Image(img.clone())).unwrap();
            assert!(max_diff(&fourier_convert(&img, &cfg).unwrap(), &img) < 1e-8);
        }
    }

    #[test]
    fn uniform_swap_closed_form() {
        let img = ImageBuf::filled(24, 18, 0.5);
        let cfg = FourierConfig::new(0.06, Blank::Uniform(1.0)).unwrap();
        let out = fourier_convert(&img, &cfg).unwrap();
        assert!(out.data().iter().all(|v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn uniform_blank_matches_materialized_blank() {
        let img = random(21, 16, 4);
        let a = fourier_convert(&img, &FourierConfig::new(0.1, Blank::Uniform(0.9)).unwrap()).unwrap();
        let b = fourier_convert(
            &img,
            &FourierConfig::new(0.1, Blank::Image(ImageBuf::filled(21, 16, 0.9))).unwrap(),
        )
        .unwrap();
        assert!(max_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn missing_blank_file_is_io_error() {
        let cfg = FourierConfig::new(0.06, Blank::File("/nonexistent/blank.png".into())).unwrap();
        let err = fourier_convert(&ImageBuf::filled(4, 4, 0.5), &cfg).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn color_conversion_keeps_channels() {
        let r = random(10, 8, 5);
        let g = random(10, 8, 6);
        let b = random(10, 8, 7);
        let rgb = ImageBuf::from_channels(&[r.clone(), g, b]).unwrap();
        let cfg = FourierConfig::restoration();
        let out = fourier_convert_channels(&rgb, &cfg).unwrap();
        assert_eq!(out.channels(), 3);
        let red = fourier_convert(&r, &cfg).unwrap();
        assert!(max_diff(&out.channel(0), &red) < 1e-12);
    }
}
