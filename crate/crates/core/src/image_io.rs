//! Image container, binary PGM/PPM codec, noise synthesis and quality metrics.
//!
//! Samples live in `[0, 1]`. Files are 8-bit binary netpbm (`P5` gray, `P6`
//! RGB) with maxval 255; a sample `v` is written as `round_half_up(clamp(v) * 255)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::RngCore;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::real::Real;

/// Reported instead of infinity when two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Luminance weights applied to (R, G, B).
pub const LUMA_WEIGHTS: [f64; 3] = [0.2989, 0.5870, 0.1140];

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed header at byte {offset}: {reason}")]
    Header { offset: usize, reason: String },
    #[error("unsupported maxval {value} at byte {offset} (only 255 is accepted)")]
    Maxval { offset: usize, value: u32 },
    #[error("truncated payload at byte {offset}: expected {expected} bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("expected {expected} channels, got {got}")]
    Channels { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense `height x width x channels` image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

/// The `f64` image every pipeline consumes and produces.
pub type ImagePlane = Image<f64>;

impl<T: Copy + Default> Image<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![T::default(); height * width * channels],
        }
    }

    pub fn from_vec(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<T>,
    ) -> Result<Self, ImageError> {
        if data.len() != height * width * channels {
            return Err(ImageError::Shape(format!(
                "{height}x{width}x{channels} needs {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[self.idx(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: T) {
        let i = self.idx(row, col, ch);
        self.data[i] = v;
    }

    pub fn same_shape<U>(&self, other: &Image<U>) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn map<U: Copy + Default>(&self, mut f: impl FnMut(T) -> U) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the `height x width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image<T> {
        assert!(top + height <= self.height && left + width <= self.width);
        let mut data = Vec::with_capacity(height * width * self.channels);
        for r in top..top + height {
            let start = self.idx(r, left, 0);
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Image {
            height,
            width,
            channels: self.channels,
            data,
        }
    }
}

impl ImagePlane {
    /// Converts to the network element type.
    pub fn cast<T: Real>(&self) -> Image<T> {
        self.map(T::of)
    }

    /// Values rounded onto the 8-bit grid, i.e. what a save/load cycle returns.
    pub fn quantized(&self) -> ImagePlane {
        self.map(|v| quantize(v) as f64 / 255.0)
    }
}

/// `round_half_up(clamp(v, 0, 1) * 255)`.
#[inline]
pub fn quantize(v: f64) -> u8 {
    let s = v.clamp(0.0, 1.0) * 255.0;
    (s + 0.5).floor().min(255.0) as u8
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<(usize, u32), ImageError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::Header {
                offset: start,
                reason: format!("expected {what}"),
            });
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        let value = text.parse::<u32>().map_err(|_| ImageError::Header {
            offset: start,
            reason: format!("{what} out of range"),
        })?;
        Ok((start, value))
    }
}

/// Parses a binary PGM (`P5`) or PPM (`P6`) byte stream.
pub fn decode_pnm(bytes: &[u8]) -> Result<ImagePlane, ImageError> {
    if bytes.len() < 2 {
        return Err(ImageError::Header {
            offset: 0,
            reason: "missing magic number".into(),
        });
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => {
            return Err(ImageError::Header {
                offset: 0,
                reason: "magic number must be P5 or P6".into(),
            })
        }
    };
    let mut rd = HeaderReader { bytes, pos: 2 };
    let (woff, width) = rd.number("width")?;
    let (hoff, height) = rd.number("height")?;
    let (moff, maxval) = rd.number("maxval")?;
    if width == 0 || height == 0 {
        let offset = if width == 0 { woff } else { hoff };
        return Err(ImageError::Header {
            offset,
            reason: "zero image dimension".into(),
        });
    }
    if maxval != 255 {
        return Err(ImageError::Maxval {
            offset: moff,
            value: maxval,
        });
    }
    match bytes.get(rd.pos) {
        Some(b) if b.is_ascii_whitespace() => rd.pos += 1,
        _ => {
            return Err(ImageError::Header {
                offset: rd.pos,
                reason: "expected a single whitespace byte after maxval".into(),
            })
        }
    }
    let (height, width) = (height as usize, width as usize);
    let expected = height * width * channels;
    let payload = &bytes[rd.pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            offset: rd.pos + payload.len(),
            expected,
            found: payload.len(),
        });
    }
    let data = payload[..expected]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(Image {
        height,
        width,
        channels,
        data,
    })
}

/// Serializes as `P5`/`P6` with single-space/newline separators.
pub fn encode_pnm(img: &ImagePlane) -> Result<Vec<u8>, ImageError> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(ImageError::Channels {
                expected: 3,
                got: c,
            })
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImagePlane, ImageError> {
    decode_pnm(&fs::read(path)?)
}

/// Writes through a sibling temp file and a rename, so a failed write never
/// leaves a partial image behind.
pub fn save_image(img: &ImagePlane, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let bytes = encode_pnm(img)?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(())
}

/// Writes to a temporary sibling file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Additive white Gaussian noise. `sigma` is on the 8-bit scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

/// Standard normal samples by Box-Muller over xoshiro256++.
///
/// Uniforms are the top 53 bits of a `u64` mapped to `(0, 1]`, so the log is
/// always finite. Both outputs of each transform are used.
pub struct GaussianStream {
    rng: Xoshiro256PlusPlus,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        GaussianStream {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare: None,
        }
    }

    fn uniform_open0(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open0();
        let u2 = self.uniform_open0();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * theta.sin());
        radius * theta.cos()
    }
}

/// Returns `img + sigma/255 * g`, unclamped.
pub fn add_awgn(img: &ImagePlane, spec: NoiseSpec) -> ImagePlane {
    assert!(spec.sigma >= 0.0, "noise sigma must be non-negative");
    if spec.sigma == 0.0 {
        return img.clone();
    }
    let scale = spec.sigma / 255.0;
    let mut g = GaussianStream::new(spec.seed);
    img.map(|v| v + scale * g.next_normal())
}

pub fn mse(a: &ImagePlane, b: &ImagePlane) -> Result<f64, ImageError> {
    if !a.same_shape(b) {
        return Err(ImageError::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio on the `[0, 1]` scale, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64, ImageError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

pub fn luminance(img: &ImagePlane) -> Result<ImagePlane, ImageError> {
    if img.channels != 3 {
        return Err(ImageError::Channels {
            expected: 3,
            got: img.channels,
        });
    }
    let [wr, wg, wb] = LUMA_WEIGHTS;
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| wr * p[0] + wg * p[1] + wb * p[2])
        .collect();
    Ok(Image {
        height: img.height,
        width: img.width,
        channels: 1,
        data,
    })
}
