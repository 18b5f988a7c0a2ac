//! Float raster images with file I/O and differentiable bilinear sampling.
//!
//! Pixel centers sit at integer coordinates: `(0, 0)` is the center of the
//! top-left pixel. Sampling outside the raster reads zero.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageError, ImageReader};

use crate::error::{Error, Result};

/// Luma weights applied by [`to_grayscale`].
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Row-major, channel-interleaved raster of `f64` intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Argument(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Argument(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite pixel value {v}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Single-channel image filled with `value`.
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        Self {
            width,
            height,
            channels: 1,
            data: vec![value; width * height],
        }
    }

    /// Single-channel image evaluated pixel by pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    /// Builds a single-channel image from a raw buffer without the finiteness
    /// scan; callers guarantee the invariants.
    pub(crate) fn gray_unchecked(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Extracts channel `c` as a grayscale image.
    pub fn channel(&self, c: usize) -> ImageBuf {
        assert!(c < self.channels, "channel {c} out of range");
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        ImageBuf::gray_unchecked(self.width, self.height, data)
    }

    /// Interleaves equally sized grayscale planes into one image.
    pub fn from_channels(planes: &[ImageBuf]) -> Result<ImageBuf> {
        let first = planes
            .first()
            .ok_or_else(|| Error::Argument("no channel planes given".into()))?;
        let (w, h) = (first.width, first.height);
        if planes.iter().any(|p| p.width != w || p.height != h || p.channels != 1) {
            return Err(Error::Argument("channel planes differ in shape".into()));
        }
        let n = planes.len();
        let mut data = vec![0.0; w * h * n];
        for (c, plane) in planes.iter().enumerate() {
            for (i, v) in plane.data.iter().enumerate() {
                data[i * n + c] = *v;
            }
        }
        ImageBuf::new(w, h, n, data)
    }

    /// Applies `f` to every intensity.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuf {
        ImageBuf {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn same_shape(&self, other: &ImageBuf) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Value and analytic partial derivatives of the bilinear surface at a point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleGrad {
    pub value: f64,
    pub d_dx: f64,
    pub d_dy: f64,
}

/// Loads an 8-bit PNG or binary PGM/PPM; intensities are scaled to `[0, 1]`
/// and any alpha channel is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuf> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| match e {
        ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, bytes) = match decoded {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageLumaA8(b) => (1, drop_alpha(b.as_raw(), 2)),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        DynamicImage::ImageRgba8(b) => (3, drop_alpha(b.as_raw(), 4)),
        other => {
            return Err(Error::Format(format!(
                "{}: only 8-bit gray/RGB images are supported, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    ImageBuf::new(width, height, channels, data)
}

fn drop_alpha(raw: &[u8], stride: usize) -> Vec<u8> {
    raw.chunks_exact(stride)
        .flat_map(|px| px[..stride - 1].iter().copied())
        .collect()
}

/// Quantizes an intensity to a byte: clamp to `[0, 1]`, scale, round half up.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes `img` as PNG or binary PGM/PPM, chosen by file extension. The file is
/// written to a temporary sibling and renamed into place.
pub fn save_image(img: &ImageBuf, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let color = if img.channels == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    let (w, h) = (img.width as u32, img.height as u32);

    let subtype = match ext.as_str() {
        "png" => None,
        "pgm" if img.channels == 1 => Some(PnmSubtype::Graymap(SampleEncoding::Binary)),
        "ppm" if img.channels == 3 => Some(PnmSubtype::Pixmap(SampleEncoding::Binary)),
        "pnm" if img.channels == 1 => Some(PnmSubtype::Graymap(SampleEncoding::Binary)),
        "pnm" => Some(PnmSubtype::Pixmap(SampleEncoding::Binary)),
        "pgm" | "ppm" => {
            return Err(Error::Argument(format!(
                "{}: extension does not match a {}-channel image",
                path.display(),
                img.channels
            )))
        }
        _ => {
            return Err(Error::Format(format!(
                "{}: unknown output extension (use .png, .pgm, .ppm)",
                path.display()
            )))
        }
    };

    write_atomically(path, |file| {
        let mut writer = BufWriter::new(file);
        let res = match subtype {
            None => PngEncoder::new(&mut writer).write_image(&bytes, w, h, color),
            Some(sub) => PnmEncoder::new(&mut writer)
                .with_subtype(sub)
                .write_image(&bytes, w, h, color),
        };
        res.map_err(|e| match e {
            ImageError::IoError(io) => io,
            other => std::io::Error::other(other.to_string()),
        })?;
        writer.flush()
    })
}

/// Writes through a temporary file in the destination directory, then renames.
pub fn write_atomically(
    path: &Path,
    write: impl FnOnce(&mut File) -> std::io::Result<()>,
) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    write(tmp.as_file_mut()).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Converts to one channel using [`LUMA_WEIGHTS`]; grayscale input is copied.
pub fn to_grayscale(img: &ImageBuf) -> ImageBuf {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2])
        .collect();
    ImageBuf::gray_unchecked(img.width, img.height, data)
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize(img: &ImageBuf, new_w: usize, new_h: usize) -> Result<ImageBuf> {
    if new_w == 0 || new_h == 0 {
        return Err(Error::Argument(format!(
            "resize target must be at least 1x1, got {new_w}x{new_h}"
        )));
    }
    if new_w == img.width && new_h == img.height {
        return Ok(img.clone());
    }
    let xs = axis_taps(img.width, new_w);
    let ys = axis_taps(img.height, new_h);
    let c = img.channels;
    let mut data = Vec::with_capacity(new_w * new_h * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let a = img.get(x0, y0, ch);
                let b = img.get(x1, y0, ch);
                let cc = img.get(x0, y1, ch);
                let d = img.get(x1, y1, ch);
                let top = a + (b - a) * fx;
                let bottom = cc + (d - cc) * fx;
                data.push(top + (bottom - top) * fy);
            }
        }
    }
    ImageBuf::new(new_w, new_h, c, data)
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Samples channel 0 of `img` at `(x, y)` with zero padding.
pub fn bilinear_sample(img: &ImageBuf, x: f64, y: f64) -> SampleGrad {
    bilinear_sample_channel(img, 0, x, y)
}

/// Samples channel `c` of `img` at `(x, y)` with zero padding. The derivatives
/// are those of the bilinear surface and are piecewise constant per cell along
/// their own axis.
#[inline]
pub fn bilinear_sample_channel(img: &ImageBuf, c: usize, x: f64, y: f64) -> SampleGrad {
    sample_plane(&img.data, img.width, img.height, img.channels, c, x, y)
}

#[inline]
pub(crate) fn sample_plane(
    data: &[f64],
    width: usize,
    height: usize,
    stride: usize,
    c: usize,
    x: f64,
    y: f64,
) -> SampleGrad {
    let xf = x.floor();
    let yf = y.floor();
    let fx = x - xf;
    let fy = y - yf;
    let (w, h) = (width as i64, height as i64);
    // Far outside: every neighbor is padding.
    if !(xf >= -1.0 && yf >= -1.0 && xf < w as f64 && yf < h as f64) {
        return SampleGrad::default();
    }
    let x0 = xf as i64;
    let y0 = yf as i64;
    let at = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            0.0
        } else {
            data[((yi * w + xi) as usize) * stride + c]
        }
    };
    let a = at(x0, y0);
    let b = at(x0 + 1, y0);
    let cc = at(x0, y0 + 1);
    let d = at(x0 + 1, y0 + 1);
    let top = a + (b - a) * fx;
    let bottom = cc + (d - cc) * fx;
    SampleGrad {
        value: top + (bottom - top) * fy,
        d_dx: (1.0 - fy) * (b - a) + fy * (d - cc),
        d_dy: bottom - top,
    }
}
