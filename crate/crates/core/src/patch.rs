//! Patch machinery between an image and the network's matrix inputs.
//!
//! Coordinates passed as `center` are always in the coordinates of the
//! unpadded image; [`PaddedImage`] carries the margin and does the shift.
//! A patch vector is the row-major, channel-interleaved flattening of a
//! `side x side x channels` block.

use rayon::prelude::*;
use thiserror::Error;

use crate::image_io::{luminance, Image, ImagePlane};
use crate::real::Real;

#[derive(Debug, Error, PartialEq)]
pub enum PatchError {
    #[error("invalid patch configuration: {0}")]
    Config(String),
    #[error("mirror margin {margin} must be smaller than the image side {side}")]
    MarginTooLarge { margin: usize, side: usize },
    #[error("patch centered at ({row}, {col}) does not fit in a {height}x{width} image")]
    OutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("search window around ({row}, {col}) yields {found} candidates, need {needed}")]
    TooFewCandidates {
        row: usize,
        col: usize,
        found: usize,
        needed: usize,
    },
    #[error("image {height}x{width} is smaller than twice the patch side {side}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        side: usize,
    },
    #[error("pixel ({row}, {col}) received no patch coverage")]
    ZeroCoverage { row: usize, col: usize },
}

/// Patch geometry and grouping parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    /// Side of a square patch, odd.
    pub patch_side: usize,
    /// 1 (gray) or 3 (color).
    pub channels: usize,
    /// Group size: the seed patch plus `k - 1` neighbors.
    pub k: usize,
    /// Side of the square search window, odd.
    pub window: usize,
}

impl PatchConfig {
    pub const DEFAULT_WINDOW: usize = 37;
    pub const DEFAULT_K: usize = 14;

    pub fn gray() -> Self {
        PatchConfig {
            patch_side: 7,
            channels: 1,
            k: Self::DEFAULT_K,
            window: Self::DEFAULT_WINDOW,
        }
    }

    pub fn color() -> Self {
        PatchConfig {
            patch_side: 5,
            channels: 3,
            k: Self::DEFAULT_K,
            window: Self::DEFAULT_WINDOW,
        }
    }

    /// Patch vector length.
    pub fn n(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }

    pub fn margin(&self) -> usize {
        self.patch_side / 2
    }

    pub fn validate(&self) -> Result<(), PatchError> {
        let bad = |msg: String| Err(PatchError::Config(msg));
        if self.patch_side % 2 == 0 {
            return bad(format!("patch side {} must be odd", self.patch_side));
        }
        if self.window % 2 == 0 {
            return bad(format!("search window {} must be odd", self.window));
        }
        if self.window < self.patch_side {
            return bad(format!(
                "search window {} is smaller than the patch side {}",
                self.window, self.patch_side
            ));
        }
        if self.k == 0 {
            return bad("group size k must be at least 1".into());
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("{} channels (expected 1 or 3)", self.channels));
        }
        Ok(())
    }
}

/// Reflects an out-of-range index back inside `0..len`, excluding the border
/// sample itself (`-1 -> 1`, `len -> len - 2`).
#[inline]
pub fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let last = len as isize - 1;
    let r = if i < 0 {
        -i
    } else if i > last {
        2 * last - i
    } else {
        i
    };
    debug_assert!((0..=last).contains(&r), "reflection of {i} in {len}");
    r as usize
}

pub fn mirror_pad<T: Copy + Default>(img: &Image<T>, margin: usize) -> Result<Image<T>, PatchError> {
    let side = img.height.min(img.width);
    if margin >= side {
        return Err(PatchError::MarginTooLarge { margin, side });
    }
    let (h, w) = (img.height + 2 * margin, img.width + 2 * margin);
    let mut out = Image::zeros(h, w, img.channels);
    for r in 0..h {
        let sr = reflect(r as isize - margin as isize, img.height);
        for c in 0..w {
            let sc = reflect(c as isize - margin as isize, img.width);
            let src = img.idx(sr, sc, 0);
            let dst = out.idx(r, c, 0);
            out.data[dst..dst + img.channels].copy_from_slice(&img.data[src..src + img.channels]);
        }
    }
    Ok(out)
}

/// Copies the patch centered at `(row, col)` of `img` into `out`.
pub fn extract_patch_into<T: Copy + Default>(
    img: &Image<T>,
    center: (usize, usize),
    side: usize,
    out: &mut [T],
) -> Result<(), PatchError> {
    let m = side / 2;
    let (row, col) = center;
    if row < m || col < m || row + m >= img.height || col + m >= img.width {
        return Err(PatchError::OutOfBounds {
            row,
            col,
            height: img.height,
            width: img.width,
        });
    }
    let span = side * img.channels;
    debug_assert_eq!(out.len(), side * span);
    for dr in 0..side {
        let start = img.idx(row + dr - m, col - m, 0);
        out[dr * span..(dr + 1) * span].copy_from_slice(&img.data[start..start + span]);
    }
    Ok(())
}

/// The extraction operator: the patch of `img` centered at `center` (in `img`'s
/// own coordinates).
pub fn extract_patch<T: Copy + Default>(
    img: &Image<T>,
    center: (usize, usize),
    cfg: &PatchConfig,
) -> Result<Vec<T>, PatchError> {
    let mut out = vec![T::default(); cfg.patch_side * cfg.patch_side * img.channels];
    extract_patch_into(img, center, cfg.patch_side, &mut out)?;
    Ok(out)
}

/// An image mirror-padded so that every original pixel is a valid patch center.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedImage<T> {
    pub image: Image<T>,
    pub margin: usize,
    /// Unpadded height.
    pub height: usize,
    /// Unpadded width.
    pub width: usize,
}

impl<T: Copy + Default> PaddedImage<T> {
    pub fn new(img: &Image<T>, margin: usize) -> Result<Self, PatchError> {
        Ok(PaddedImage {
            image: mirror_pad(img, margin)?,
            margin,
            height: img.height,
            width: img.width,
        })
    }

    pub fn channels(&self) -> usize {
        self.image.channels
    }

    /// Patch centered at unpadded pixel `center`.
    pub fn patch_into(&self, center: (usize, usize), side: usize, out: &mut [T]) -> Result<(), PatchError> {
        if center.0 >= self.height || center.1 >= self.width {
            return Err(PatchError::OutOfBounds {
                row: center.0,
                col: center.1,
                height: self.height,
                width: self.width,
            });
        }
        extract_patch_into(
            &self.image,
            (center.0 + self.margin, center.1 + self.margin),
            side,
            out,
        )
    }

    pub fn patch(&self, center: (usize, usize), side: usize) -> Result<Vec<T>, PatchError> {
        let mut out = vec![T::default(); side * side * self.channels()];
        self.patch_into(center, side, &mut out)?;
        Ok(out)
    }

    /// Removes the padding again.
    pub fn unpadded(&self) -> Image<T> {
        self.image.crop(self.margin, self.margin, self.height, self.width)
    }
}

/// Which grid a group was searched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Plane {
    Full,
    Phase(Phase),
}

/// Sampling phase of a half-resolution plane: row parity then column parity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    EvenEven,
    EvenOdd,
    OddEven,
    OddOdd,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::EvenEven, Phase::EvenOdd, Phase::OddEven, Phase::OddOdd];

    pub fn of(row: usize, col: usize) -> Phase {
        Phase::ALL[2 * (row % 2) + col % 2]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// `(row parity, column parity)`.
    pub fn offsets(self) -> (usize, usize) {
        let i = self.index();
        (i / 2, i % 2)
    }
}

/// A seed patch and its nearest neighbors.
///
/// The `n x k` matrix is not stored; [`PatchGroup::matrix_into`] gathers it
/// from the plane the group was found on, column `j` being the patch at
/// `members[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGroup {
    pub plane: Plane,
    /// Seed location in the coordinates of the searched plane.
    pub seed: (usize, usize),
    /// `k` patch centers; `members[0] == seed`, the rest by ascending distance.
    pub members: Vec<(usize, usize)>,
    /// `dist[0]` is the unbiased sample variance of the seed patch,
    /// `dist[j]` the squared distance from seed to `members[j]`.
    pub dist: Vec<f64>,
}

impl PatchGroup {
    pub fn k(&self) -> usize {
        self.members.len()
    }

    /// Writes the group matrix (`n x k`, row-major) gathered from `img`.
    pub fn matrix_into<T: Copy + Default>(
        &self,
        img: &PaddedImage<T>,
        side: usize,
        scratch: &mut [T],
        out: &mut [T],
    ) -> Result<(), PatchError> {
        let k = self.k();
        let n = scratch.len();
        debug_assert_eq!(out.len(), n * k);
        for (j, &m) in self.members.iter().enumerate() {
            img.patch_into(m, side, scratch)?;
            for (i, &v) in scratch.iter().enumerate() {
                out[i * k + j] = v;
            }
        }
        Ok(())
    }

    pub fn matrix<T: Copy + Default>(&self, img: &PaddedImage<T>, side: usize) -> Result<Vec<T>, PatchError> {
        let n = side * side * img.channels();
        let mut scratch = vec![T::default(); n];
        let mut out = vec![T::default(); n * self.k()];
        self.matrix_into(img, side, &mut scratch, &mut out)?;
        Ok(out)
    }
}

/// Unbiased sample variance.
pub fn sample_variance<T: Real>(v: &[T]) -> T {
    let n = v.len();
    if n < 2 {
        return T::zero();
    }
    let mean = v.iter().copied().sum::<T>() / T::of(n as f64);
    v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / T::of((n - 1) as f64)
}

/// Plane used for neighbor search: the image itself when gray, its luminance when color.
pub fn search_plane(img: &ImagePlane) -> ImagePlane {
    if img.channels == 3 {
        luminance(img).expect("three channels")
    } else {
        img.clone()
    }
}

/// Smallest number of window candidates any seed of an `height x width` plane sees.
fn min_candidates(height: usize, width: usize, window: usize) -> usize {
    let half = window / 2;
    (half + 1).min(height) * (half + 1).min(width)
}

/// Windowed k-nearest-neighbor grouping around `center`.
///
/// Candidates are all patch centers of `plane` inside the `window x window`
/// square around `center`, clipped to the plane. Distances are squared
/// Euclidean over every channel of `plane`. Ties go to the candidate met
/// first in row-major scan order; the seed is never its own neighbor.
pub fn knn_group(
    plane: &PaddedImage<f64>,
    center: (usize, usize),
    cfg: &PatchConfig,
) -> Result<PatchGroup, PatchError> {
    knn_group_on(plane, center, cfg, Plane::Full)
}

fn knn_group_on(
    plane: &PaddedImage<f64>,
    center: (usize, usize),
    cfg: &PatchConfig,
    tag: Plane,
) -> Result<PatchGroup, PatchError> {
    let side = cfg.patch_side;
    let half = cfg.window / 2;
    let (row, col) = center;
    let r0 = row.saturating_sub(half);
    let r1 = (row + half).min(plane.height - 1);
    let c0 = col.saturating_sub(half);
    let c1 = (col + half).min(plane.width - 1);
    let found = (r1 - r0 + 1) * (c1 - c0 + 1);
    if found < cfg.k {
        return Err(PatchError::TooFewCandidates {
            row,
            col,
            found,
            needed: cfg.k,
        });
    }
    let seed = plane.patch(center, side)?;
    let mut cand = vec![0.0; seed.len()];
    // Sorted ascending by distance; insertion after equal keys keeps scan order.
    let keep = cfg.k - 1;
    let mut best: Vec<(f64, (usize, usize))> = Vec::with_capacity(keep + 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            if (r, c) == center || keep == 0 {
                continue;
            }
            plane.patch_into((r, c), side, &mut cand)?;
            let d: f64 = seed
                .iter()
                .zip(&cand)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if best.len() == keep && d >= best[keep - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, (r, c)));
            best.truncate(keep);
        }
    }
    let mut members = Vec::with_capacity(cfg.k);
    let mut dist = Vec::with_capacity(cfg.k);
    members.push(center);
    dist.push(sample_variance(&seed));
    for (d, m) in best {
        members.push(m);
        dist.push(d);
    }
    Ok(PatchGroup {
        plane: tag,
        seed: center,
        members,
        dist,
    })
}

/// Groups for every pixel of the plane, in row-major seed order.
pub fn group_all(plane: &PaddedImage<f64>, cfg: &PatchConfig) -> Result<Vec<PatchGroup>, PatchError> {
    let needed = cfg.k;
    let found = min_candidates(plane.height, plane.width, cfg.window);
    if found < needed {
        return Err(PatchError::TooFewCandidates {
            row: 0,
            col: 0,
            found,
            needed,
        });
    }
    (0..plane.height * plane.width)
        .into_par_iter()
        .map(|i| knn_group(plane, (i / plane.width, i % plane.width), cfg))
        .collect()
}

/// 1D taps of the separable low-pass kernel `[1 2 1]^T [1 2 1] / 16`.
pub const LOWPASS_TAPS: [f64; 3] = [0.25, 0.5, 0.25];

/// Geometry of the sub-lattice a pixel belongs to when filtering with `stride`.
#[inline]
fn lattice(i: usize, len: usize, stride: usize) -> (usize, usize, usize) {
    let phase = i % stride;
    let pos = i / stride;
    let count = (len - phase).div_ceil(stride);
    (phase, pos, count)
}

/// Convolves with the low-pass kernel, mirror boundary. With `stride > 1`
/// each of the `stride x stride` interleaved sub-lattices is filtered on its
/// own (neighbors are `stride` pixels apart and reflect inside the lattice).
pub fn lowpass<T: Real>(img: &Image<T>, stride: usize) -> Image<T> {
    let pass = |src: &Image<T>, vertical: bool| {
        let mut out = Image::zeros(src.height, src.width, src.channels);
        for r in 0..src.height {
            for c in 0..src.width {
                let (i, len) = if vertical { (r, src.height) } else { (c, src.width) };
                let (phase, pos, count) = lattice(i, len, stride);
                for (t, &tap) in LOWPASS_TAPS.iter().enumerate() {
                    let j = phase + stride * reflect(pos as isize + t as isize - 1, count);
                    let (sr, sc) = if vertical { (j, c) } else { (r, j) };
                    for ch in 0..src.channels {
                        let v = out.get(r, c, ch) + T::of(tap) * src.get(sr, sc, ch);
                        out.set(r, c, ch, v);
                    }
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Exact adjoint of [`lowpass`] (differs from it only at the borders).
pub fn lowpass_adjoint<T: Real>(img: &Image<T>, stride: usize) -> Image<T> {
    let pass = |src: &Image<T>, vertical: bool| {
        let mut out = Image::zeros(src.height, src.width, src.channels);
        for r in 0..src.height {
            for c in 0..src.width {
                let (i, len) = if vertical { (r, src.height) } else { (c, src.width) };
                let (phase, pos, count) = lattice(i, len, stride);
                for (t, &tap) in LOWPASS_TAPS.iter().enumerate() {
                    let j = phase + stride * reflect(pos as isize + t as isize - 1, count);
                    let (dr, dc) = if vertical { (j, c) } else { (r, j) };
                    for ch in 0..src.channels {
                        let v = out.get(dr, dc, ch) + T::of(tap) * src.get(r, c, ch);
                        out.set(dr, dc, ch, v);
                    }
                }
            }
        }
        out
    };
    pass(&pass(img, false), true)
}

/// Two-scale pyramid: the padded input and the four padded half-resolution
/// phase planes of its low-passed version.
#[derive(Clone, Debug)]
pub struct ScalePyramid<T> {
    pub full: PaddedImage<T>,
    /// Low-passed input, unpadded.
    pub filtered: Image<T>,
    /// Indexed by [`Phase::index`].
    pub phases: [PaddedImage<T>; 4],
}

/// Samples `img` at rows `r0, r0+2, ...` and columns `c0, c0+2, ...`.
pub fn subsample<T: Copy + Default>(img: &Image<T>, phase: Phase) -> Image<T> {
    let (r0, c0) = phase.offsets();
    let h = (img.height - r0).div_ceil(2);
    let w = (img.width - c0).div_ceil(2);
    let mut out = Image::zeros(h, w, img.channels);
    for r in 0..h {
        for c in 0..w {
            let src = img.idx(r0 + 2 * r, c0 + 2 * c, 0);
            let dst = out.idx(r, c, 0);
            out.data[dst..dst + img.channels].copy_from_slice(&img.data[src..src + img.channels]);
        }
    }
    out
}

pub fn build_pyramid<T: Real>(img: &Image<T>, cfg: &PatchConfig) -> Result<ScalePyramid<T>, PatchError> {
    let side = cfg.patch_side;
    if img.height < 2 * side || img.width < 2 * side {
        return Err(PatchError::ImageTooSmall {
            height: img.height,
            width: img.width,
            side,
        });
    }
    let m = cfg.margin();
    let filtered = lowpass(img, 1);
    let phase = |p: Phase| PaddedImage::new(&subsample(&filtered, p), m);
    Ok(ScalePyramid {
        full: PaddedImage::new(img, m)?,
        phases: [
            phase(Phase::EvenEven)?,
            phase(Phase::EvenOdd)?,
            phase(Phase::OddEven)?,
            phase(Phase::OddOdd)?,
        ],
        filtered,
    })
}

/// Phase plane and in-plane coordinates holding full-resolution pixel `center`.
pub fn phase_coords(center: (usize, usize)) -> (Phase, (usize, usize)) {
    (Phase::of(center.0, center.1), (center.0 / 2, center.1 / 2))
}

/// Second-scale group of full-resolution pixel `center`, searched inside the
/// single phase plane that contains it.
pub fn second_scale_group(
    pyr: &ScalePyramid<f64>,
    center: (usize, usize),
    cfg: &PatchConfig,
) -> Result<PatchGroup, PatchError> {
    let (phase, at) = phase_coords(center);
    knn_group_on(&pyr.phases[phase.index()], at, cfg, Plane::Phase(phase))
}

/// Second-scale groups for every full-resolution pixel, row-major.
pub fn second_scale_group_all(pyr: &ScalePyramid<f64>, cfg: &PatchConfig) -> Result<Vec<PatchGroup>, PatchError> {
    for p in &pyr.phases {
        let found = min_candidates(p.height, p.width, cfg.window);
        if found < cfg.k {
            return Err(PatchError::TooFewCandidates {
                row: 0,
                col: 0,
                found,
                needed: cfg.k,
            });
        }
    }
    let (h, w) = (pyr.full.height, pyr.full.width);
    (0..h * w)
        .into_par_iter()
        .map(|i| second_scale_group(pyr, (i / w, i % w), cfg))
        .collect()
}

/// Placement of a set of patches on a canvas.
///
/// Patch sample `(a, b)` of the patch at `center` lands on canvas pixel
/// `center + stride * ((a, b) - margin)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLayout {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub side: usize,
    pub stride: usize,
    pub centers: Vec<(usize, usize)>,
}

impl PatchLayout {
    /// Every pixel of a padded canvas as a stride-1 center.
    pub fn dense(padded_height: usize, padded_width: usize, channels: usize, side: usize) -> Self {
        let m = side / 2;
        let mut centers = Vec::with_capacity((padded_height - 2 * m) * (padded_width - 2 * m));
        for r in m..padded_height - m {
            for c in m..padded_width - m {
                centers.push((r, c));
            }
        }
        PatchLayout {
            height: padded_height,
            width: padded_width,
            channels,
            side,
            stride: 1,
            centers,
        }
    }

    pub fn n(&self) -> usize {
        self.side * self.side * self.channels
    }

    fn check(&self) -> Result<(), PatchError> {
        let reach = self.stride * (self.side / 2);
        for &(r, c) in &self.centers {
            if r < reach || c < reach || r + reach >= self.height || c + reach >= self.width {
                return Err(PatchError::OutOfBounds {
                    row: r,
                    col: c,
                    height: self.height,
                    width: self.width,
                });
            }
        }
        Ok(())
    }

    #[inline]
    fn for_each_sample(&self, center: (usize, usize), mut f: impl FnMut(usize, usize)) {
        let m = self.side / 2;
        let ch = self.channels;
        let mut p = 0;
        for a in 0..self.side {
            let r = center.0 + self.stride * a - self.stride * m;
            for b in 0..self.side {
                let c = center.1 + self.stride * b - self.stride * m;
                let base = (r * self.width + c) * ch;
                for q in 0..ch {
                    f(p, base + q);
                    p += 1;
                }
            }
        }
    }

    /// `sum_i w_i R_i^T p_i` over the flattened `patches` buffer (`len = centers * n`).
    pub fn scatter<T: Real>(&self, patches: &[T], weights: Option<&[T]>) -> Vec<T> {
        let n = self.n();
        debug_assert_eq!(patches.len(), self.centers.len() * n);
        let mut acc = vec![T::zero(); self.height * self.width * self.channels];
        for (i, &center) in self.centers.iter().enumerate() {
            let w = weights.map_or(T::one(), |w| w[i]);
            let patch = &patches[i * n..(i + 1) * n];
            self.for_each_sample(center, |p, dst| acc[dst] += w * patch[p]);
        }
        acc
    }

    /// Diagonal of `sum_i w_i R_i^T R_i`.
    pub fn coverage<T: Real>(&self, weights: Option<&[T]>) -> Vec<T> {
        let mut acc = vec![T::zero(); self.height * self.width * self.channels];
        for (i, &center) in self.centers.iter().enumerate() {
            let w = weights.map_or(T::one(), |w| w[i]);
            self.for_each_sample(center, |_, dst| acc[dst] += w);
        }
        acc
    }

    /// `R_i x` for every center, concatenated.
    pub fn gather<T: Real>(&self, canvas: &[T]) -> Vec<T> {
        let n = self.n();
        let mut out = vec![T::zero(); self.centers.len() * n];
        out.par_chunks_mut(n)
            .zip(self.centers.par_iter())
            .for_each(|(patch, &center)| self.for_each_sample(center, |p, src| patch[p] = canvas[src]));
        out
    }
}

/// Weighted overlap averaging: `(sum w_i R_i^T R_i)^-1 sum w_i R_i^T z_i`.
///
/// `patches` pairs each canvas-coordinate center with its patch vector. With
/// `post_filter` the averaged canvas is low-passed afterwards (per
/// sub-lattice when `stride == 2`).
pub fn aggregate<T: Real>(
    patches: &[((usize, usize), Vec<T>)],
    weights: &[T],
    shape: (usize, usize, usize),
    cfg: &PatchConfig,
    stride: usize,
    post_filter: bool,
) -> Result<Image<T>, PatchError> {
    let (height, width, channels) = shape;
    let layout = PatchLayout {
        height,
        width,
        channels,
        side: cfg.patch_side,
        stride,
        centers: patches.iter().map(|(c, _)| *c).collect(),
    };
    layout.check()?;
    let flat: Vec<T> = patches.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if flat.len() != patches.len() * layout.n() {
        return Err(PatchError::Config("patch vector length does not match the layout".into()));
    }
    let num = layout.scatter(&flat, Some(weights));
    let den = layout.coverage(Some(weights));
    let mut data = Vec::with_capacity(num.len());
    for (i, (&a, &d)) in num.iter().zip(&den).enumerate() {
        if d == T::zero() {
            let pixel = i / channels;
            return Err(PatchError::ZeroCoverage {
                row: pixel / width,
                col: pixel % width,
            });
        }
        data.push(a / d);
    }
    let img = Image {
        height,
        width,
        channels,
        data,
    };
    Ok(if post_filter { lowpass(&img, stride) } else { img })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::{add_awgn, NoiseSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImagePlane {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        Image::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn arange(h: usize, w: usize, c: usize) -> ImagePlane {
        Image::from_vec(h, w, c, (0..h * w * c).map(|i| i as f64).collect()).unwrap()
    }

    fn cfg(side: usize, k: usize, window: usize) -> PatchConfig {
        PatchConfig {
            patch_side: side,
            channels: 1,
            k,
            window,
        }
    }

    #[test]
    fn reflection_excludes_border() {
        let row = Image::from_vec(1, 3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let tall = Image::from_vec(3, 3, 1, [row.data.clone(), row.data.clone(), row.data.clone()].concat())
            .unwrap();
        let padded = mirror_pad(&tall, 1).unwrap();
        assert_eq!(&padded.data[5..10], &[2.0, 1.0, 2.0, 3.0, 2.0]);
        assert_eq!(mirror_pad(&tall, 0).unwrap(), tall);
        assert_eq!(
            mirror_pad(&tall, 3),
            Err(PatchError::MarginTooLarge { margin: 3, side: 3 })
        );
    }

    #[test]
    fn every_pixel_gets_a_patch() {
        let img = random_image(7, 7, 1, 1);
        let padded = PaddedImage::new(&img, 3).unwrap();
        let mut count = 0;
        for r in 0..7 {
            for c in 0..7 {
                padded.patch((r, c), 7).unwrap();
                count += 1;
            }
        }
        assert_eq!(count, 49);
        assert_eq!(PatchLayout::dense(13, 13, 1, 7).centers.len(), 49);
    }

    #[test]
    fn extraction_matches_index_arithmetic() {
        let img = arange(6, 5, 3);
        let c = PatchConfig {
            patch_side: 3,
            channels: 3,
            k: 1,
            window: 3,
        };
        for r in 1..5 {
            for col in 1..4 {
                let p = extract_patch(&img, (r, col), &c).unwrap();
                let mut expect = Vec::new();
                for dr in 0..3 {
                    for dc in 0..3 {
                        for ch in 0..3 {
                            expect.push((((r + dr - 1) * 5 + (col + dc - 1)) * 3 + ch) as f64);
                        }
                    }
                }
                assert_eq!(p, expect);
            }
        }
        let constant = Image::from_vec(3, 3, 1, vec![0.4; 9]).unwrap();
        assert_eq!(extract_patch(&constant, (1, 1), &cfg(3, 1, 3)).unwrap(), vec![0.4; 9]);
        assert!(matches!(
            extract_patch(&constant, (0, 1), &cfg(3, 1, 3)),
            Err(PatchError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn extraction_adjoint_identity() {
        let y = random_image(9, 8, 1, 3);
        let layout = PatchLayout {
            height: 9,
            width: 8,
            channels: 1,
            side: 5,
            stride: 1,
            centers: vec![(4, 3)],
        };
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let p: Vec<f64> = (0..25).map(|_| rng.random()).collect();
        let ry = layout.gather(&y.data);
        let rtp = layout.scatter(&p, None);
        let lhs: f64 = ry.iter().zip(&p).map(|(a, b)| a * b).sum();
        let rhs: f64 = y.data.iter().zip(&rtp).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    /// Exhaustive windowed search written independently of `knn_group`.
    fn brute_force_group(plane: &PaddedImage<f64>, center: (usize, usize), c: &PatchConfig) -> PatchGroup {
        let half = c.window as isize / 2;
        let seed = plane.patch(center, c.patch_side).unwrap();
        let mut all = Vec::new();
        for r in 0..plane.height as isize {
            for col in 0..plane.width as isize {
                let inside = (r - center.0 as isize).abs() <= half && (col - center.1 as isize).abs() <= half;
                if !inside || (r as usize, col as usize) == center {
                    continue;
                }
                let p = plane.patch((r as usize, col as usize), c.patch_side).unwrap();
                let d: f64 = seed.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
                all.push((d, r as usize * plane.width + col as usize, (r as usize, col as usize)));
            }
        }
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mean = seed.iter().sum::<f64>() / seed.len() as f64;
        let var = seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (seed.len() - 1) as f64;
        let mut members = vec![center];
        let mut dist = vec![var];
        for (d, _, m) in all.into_iter().take(c.k - 1) {
            members.push(m);
            dist.push(d);
        }
        PatchGroup {
            plane: Plane::Full,
            seed: center,
            members,
            dist,
        }
    }

    #[test]
    fn knn_matches_brute_force_on_random_planes() {
        let c = cfg(3, 5, 9);
        for seed in 0..5 {
            let plane = PaddedImage::new(&random_image(16, 16, 1, seed), 1).unwrap();
            let groups = group_all(&plane, &c).unwrap();
            for g in &groups {
                let oracle = brute_force_group(&plane, g.seed, &c);
                assert_eq!(g, &oracle);
                assert!(g.dist[1..].windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn knn_constant_image_uses_scan_order() {
        let plane = PaddedImage::new(&Image::from_vec(8, 8, 1, vec![0.3; 64]).unwrap(), 1).unwrap();
        let g = knn_group(&plane, (4, 4), &cfg(3, 4, 5)).unwrap();
        assert_eq!(g.members, vec![(4, 4), (2, 2), (2, 3), (2, 4)]);
        assert!(g.dist.iter().all(|&d| d == 0.0));
        let g = knn_group(&plane, (0, 0), &cfg(3, 4, 5)).unwrap();
        assert_eq!(g.members, vec![(0, 0), (0, 1), (0, 2), (1, 0)]);
    }

    #[test]
    fn knn_rejects_small_windows() {
        let plane = PaddedImage::new(&random_image(8, 8, 1, 0), 1).unwrap();
        let err = knn_group(&plane, (0, 0), &cfg(3, 5, 3)).unwrap_err();
        assert_eq!(
            err,
            PatchError::TooFewCandidates {
                row: 0,
                col: 0,
                found: 4,
                needed: 5
            }
        );
        assert!(group_all(&plane, &cfg(3, 5, 3)).is_err());
    }

    #[test]
    fn seed_variance_entry_is_unbiased() {
        let plane = PaddedImage::new(&random_image(10, 10, 1, 9), 2).unwrap();
        let g = knn_group(&plane, (5, 5), &cfg(5, 3, 7)).unwrap();
        let p = plane.patch((5, 5), 5).unwrap();
        let mean = p.iter().sum::<f64>() / 25.0;
        let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 24.0;
        assert!((g.dist[0] - var).abs() < 1e-15);
    }

    #[test]
    fn color_grouping_searches_luminance_but_carries_color() {
        let img = random_image(10, 10, 3, 2);
        let c = PatchConfig {
            patch_side: 3,
            channels: 3,
            k: 4,
            window: 5,
        };
        let luma = PaddedImage::new(&search_plane(&img), 1).unwrap();
        let color = PaddedImage::new(&img, 1).unwrap();
        let g = knn_group(&luma, (5, 5), &c).unwrap();
        let oracle = brute_force_group(&luma, (5, 5), &c);
        assert_eq!(g.members, oracle.members);
        let z = g.matrix(&color, 3).unwrap();
        assert_eq!(z.len(), 27 * 4);
        let seed = color.patch((5, 5), 3).unwrap();
        for (i, v) in seed.iter().enumerate() {
            assert_eq!(z[i * 4], *v);
        }
    }

    #[test]
    fn lowpass_impulse_and_dc() {
        let mut img = Image::<f64>::zeros(7, 7, 1);
        img.set(3, 3, 0, 1.0);
        let f = lowpass(&img, 1);
        let expect = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
        for dr in 0..3 {
            for dc in 0..3 {
                assert_eq!(f.get(2 + dr, 2 + dc, 0), expect[dr][dc] / 16.0);
            }
        }
        assert_eq!(f.data.iter().sum::<f64>(), 1.0);
        let c = Image::from_vec(6, 6, 1, vec![0.7f64; 36]).unwrap();
        assert!(lowpass(&c, 1).data.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn lowpass_nulls_checkerboard() {
        let board = Image::from_vec(6, 6, 1, (0..36).map(|i| if (i / 6 + i % 6) % 2 == 0 { 1.0 } else { -1.0 }).collect())
            .unwrap();
        let f = lowpass(&board, 1);
        // Direct 3x3 evaluation on interior pixels.
        for r in 1..5 {
            for c in 1..5 {
                let mut acc = 0.0;
                for dr in 0..3 {
                    for dc in 0..3 {
                        let w = [1.0, 2.0, 1.0][dr] * [1.0, 2.0, 1.0][dc] / 16.0;
                        acc += w * board.get(r + dr - 1, c + dc - 1, 0);
                    }
                }
                assert_eq!(acc, 0.0);
                assert_eq!(f.get(r, c, 0), 0.0);
            }
        }
    }

    #[test]
    fn lowpass_adjoint_is_exact() {
        for stride in [1, 2] {
            let x = random_image(9, 7, 2, 10 + stride as u64);
            let y = random_image(9, 7, 2, 20 + stride as u64);
            let lhs: f64 = lowpass(&x, stride).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data.iter().zip(&lowpass_adjoint(&y, stride).data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "stride {stride}");
        }
    }

    #[test]
    fn phases_reinterleave_to_filtered_image() {
        let img = random_image(13, 12, 1, 5);
        let c = cfg(5, 3, 7);
        let pyr = build_pyramid(&img, &c).unwrap();
        let mut re = Image::<f64>::zeros(13, 12, 1);
        for p in Phase::ALL {
            let (r0, c0) = p.offsets();
            let plane = pyr.phases[p.index()].unpadded();
            for r in 0..plane.height {
                for col in 0..plane.width {
                    re.set(r0 + 2 * r, c0 + 2 * col, 0, plane.get(r, col, 0));
                }
            }
        }
        assert_eq!(re, pyr.filtered);
        assert_eq!(pyr.phases[Phase::EvenEven.index()].height, 7);
        assert_eq!(pyr.phases[Phase::OddOdd.index()].height, 6);
        assert!(matches!(build_pyramid(&random_image(9, 20, 1, 0), &c), Err(PatchError::ImageTooSmall { .. })));
    }

    #[test]
    fn second_scale_center_correspondence() {
        let img = random_image(14, 14, 1, 6);
        let c = cfg(3, 4, 5);
        let pyr = build_pyramid(&img, &c).unwrap();
        for r in 0..14 {
            for col in 0..14 {
                let g = second_scale_group(&pyr, (r, col), &c).unwrap();
                let (phase, at) = phase_coords((r, col));
                assert_eq!(g.plane, Plane::Phase(phase));
                assert_eq!(phase.offsets(), (r % 2, col % 2));
                assert_eq!(g.seed, (r / 2, col / 2));
                let z = g.matrix(&pyr.phases[phase.index()], 3).unwrap();
                // Center sample of the seed column: row 4 of the 9x4 matrix.
                let direct: f64 = (0..3)
                    .flat_map(|dr| (0..3).map(move |dc| (dr, dc)))
                    .map(|(dr, dc)| {
                        let w = [1.0, 2.0, 1.0][dr] * [1.0, 2.0, 1.0][dc] / 16.0;
                        let rr = reflect(r as isize + dr as isize - 1, 14);
                        let cc = reflect(col as isize + dc as isize - 1, 14);
                        w * img.get(rr, cc, 0)
                    })
                    .sum();
                assert!((z[4 * 4] - direct).abs() < 1e-15, "({r},{col})");
                assert_eq!(at, g.seed);
            }
        }
        let constant = Image::from_vec(12, 12, 1, vec![0.2; 144]).unwrap();
        let pyr = build_pyramid(&constant, &c).unwrap();
        let g = second_scale_group(&pyr, (5, 6), &c).unwrap();
        let z = g.matrix(&pyr.phases[g.plane_phase().index()], 3).unwrap();
        assert!(z.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    impl PatchGroup {
        fn plane_phase(&self) -> Phase {
            match self.plane {
                Plane::Phase(p) => p,
                Plane::Full => panic!("full plane"),
            }
        }
    }

    fn all_patches(img: &Image<f64>, side: usize) -> Vec<((usize, usize), Vec<f64>)> {
        let m = side / 2;
        let mut out = Vec::new();
        for r in m..img.height - m {
            for c in m..img.width - m {
                out.push(((r, c), extract_patch(img, (r, c), &cfg(side, 1, side)).unwrap()));
            }
        }
        out
    }

    #[test]
    fn aggregation_left_inverts_extraction() {
        let img = random_image(10, 11, 3, 8);
        let c = PatchConfig {
            patch_side: 3,
            channels: 3,
            k: 1,
            window: 3,
        };
        let padded = mirror_pad(&img, 1).unwrap();
        let patches = all_patches(&padded, 3);
        let ones = vec![1.0; patches.len()];
        let out = aggregate(&patches, &ones, (12, 13, 3), &c, 1, false).unwrap();
        for (a, b) in out.data.iter().zip(&padded.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_patch_ignores_weight() {
        let p: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let out = aggregate(&[((1, 1), p.clone())], &[3.7], (3, 3, 1), &cfg(3, 1, 3), 1, false).unwrap();
        for (a, b) in out.data.iter().zip(&p) {
            assert!((a - b).abs() < 1e-15);
        }
        let err = aggregate(&[((1, 1), p)], &[1.0], (4, 3, 1), &cfg(3, 1, 3), 1, false).unwrap_err();
        assert_eq!(err, PatchError::ZeroCoverage { row: 3, col: 0 });
    }

    /// Assembles `A = sum w_i R_i^T R_i` and `b = sum w_i R_i^T z_i` as dense
    /// matrices from explicit selection matrices and solves `A x = b`.
    fn dense_aggregate(
        patches: &[((usize, usize), Vec<f64>)],
        weights: &[f64],
        h: usize,
        w: usize,
        side: usize,
    ) -> Vec<f64> {
        let dim = h * w;
        let n = side * side;
        let m = side / 2;
        let mut a = vec![0.0; dim * dim];
        let mut b = vec![0.0; dim];
        for (((r, c), z), &wt) in patches.iter().zip(weights) {
            let mut sel = vec![0.0; n * dim];
            for dr in 0..side {
                for dc in 0..side {
                    sel[(dr * side + dc) * dim + (r + dr - m) * w + (c + dc - m)] = 1.0;
                }
            }
            for i in 0..dim {
                for j in 0..dim {
                    let mut s = 0.0;
                    for p in 0..n {
                        s += sel[p * dim + i] * sel[p * dim + j];
                    }
                    a[i * dim + j] += wt * s;
                }
                for p in 0..n {
                    b[i] += wt * sel[p * dim + i] * z[p];
                }
            }
        }
        // Gaussian elimination with partial pivoting.
        for col in 0..dim {
            let piv = (col..dim).max_by(|&x, &y| a[x * dim + col].abs().total_cmp(&a[y * dim + col].abs())).unwrap();
            for j in 0..dim {
                a.swap(col * dim + j, piv * dim + j);
            }
            b.swap(col, piv);
            for row in col + 1..dim {
                let f = a[row * dim + col] / a[col * dim + col];
                for j in col..dim {
                    a[row * dim + j] -= f * a[col * dim + j];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; dim];
        for row in (0..dim).rev() {
            let mut s = b[row];
            for j in row + 1..dim {
                s -= a[row * dim + j] * x[j];
            }
            x[row] = s / a[row * dim + row];
        }
        x
    }

    #[test]
    fn weighted_aggregation_matches_dense_solve() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(77);
        let side = 3;
        let mut patches = Vec::new();
        for r in 1..9 {
            for c in 1..9 {
                patches.push(((r, c), (0..9).map(|_| rng.random::<f64>()).collect::<Vec<_>>()));
            }
        }
        let weights: Vec<f64> = (0..patches.len()).map(|_| 0.1 + rng.random::<f64>()).collect();
        let out = aggregate(&patches, &weights, (10, 10, 1), &cfg(side, 1, side), 1, false).unwrap();
        let oracle = dense_aggregate(&patches, &weights, 10, 10, side);
        for (a, b) in out.data.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn stride_two_aggregation_equals_per_phase_processing() {
        let img = random_image(12, 12, 1, 31);
        let c = cfg(3, 1, 3);
        let mut patches = Vec::new();
        let mut per_phase = Image::<f64>::zeros(12, 12, 1);
        for p in Phase::ALL {
            let plane = subsample(&img, p);
            let (r0, c0) = p.offsets();
            // Stride-2 centers on the full canvas must keep the footprint inside.
            let mut local = Vec::new();
            for r in 1..5 {
                for col in 1..5 {
                    let z = extract_patch(&plane, (r, col), &c).unwrap();
                    local.push(((r, col), z.clone()));
                    patches.push(((r0 + 2 * r, c0 + 2 * col), z));
                }
            }
            let ones = vec![1.0; local.len()];
            let agg = aggregate(&local, &ones, (6, 6, 1), &c, 1, true).unwrap();
            for r in 0..6 {
                for col in 0..6 {
                    per_phase.set(r0 + 2 * r, c0 + 2 * col, 0, agg.get(r, col, 0));
                }
            }
        }
        let ones = vec![1.0; patches.len()];
        let strided = aggregate(&patches, &ones, (12, 12, 1), &c, 2, true).unwrap();
        for (a, b) in strided.data.iter().zip(&per_phase.data) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn interior_outputs_are_translation_equivariant() {
        let big = random_image(24, 24, 1, 40);
        let a = big.crop(0, 0, 20, 20);
        let b = big.crop(2, 2, 20, 20);
        let c = cfg(3, 4, 5);
        let pa = PaddedImage::new(&a, 1).unwrap();
        let pb = PaddedImage::new(&b, 1).unwrap();
        for r in 4..14 {
            for col in 4..14 {
                let ga = knn_group(&pa, (r + 2, col + 2), &c).unwrap();
                let gb = knn_group(&pb, (r, col), &c).unwrap();
                assert_eq!(ga.dist, gb.dist);
                let shifted: Vec<_> = gb.members.iter().map(|&(x, y)| (x + 2, y + 2)).collect();
                assert_eq!(ga.members, shifted);
            }
        }
        let la = lowpass(&a, 1);
        let lb = lowpass(&b, 1);
        for r in 1..17 {
            for col in 1..17 {
                assert_eq!(la.get(r + 2, col + 2, 0), lb.get(r, col, 0));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn knn_equals_exhaustive_search(seed in any::<u64>(), quant in prop::bool::ANY) {
            let mut img = random_image(16, 16, 1, seed);
            if quant {
                // Coarse values force many exact ties.
                img = img.map(|v| (v * 3.0).floor() / 3.0);
            }
            let c = cfg(3, 5, 9);
            let plane = PaddedImage::new(&img, 1).unwrap();
            for g in group_all(&plane, &c).unwrap() {
                prop_assert_eq!(&g, &brute_force_group(&plane, g.seed, &c));
            }
        }

        #[test]
        fn unit_weight_aggregation_inverts_extraction(seed in any::<u64>(), h in 5usize..12, w in 5usize..12) {
            let noisy = add_awgn(&random_image(h, w, 1, seed), NoiseSpec { sigma: 30.0, seed });
            let padded = mirror_pad(&noisy, 2).unwrap();
            let patches = all_patches(&padded, 5);
            let ones = vec![1.0; patches.len()];
            let out = aggregate(&patches, &ones, (h + 4, w + 4, 1), &cfg(5, 1, 5), 1, false).unwrap();
            for (a, b) in out.data.iter().zip(&padded.data) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
