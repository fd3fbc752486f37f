//! Everything about one input image that does not depend on the parameters:
//! padded planes, patch groups at both scales and the aggregation layouts.

use std::ops::Range;

use rayon::prelude::*;

use super::{ArchDescriptor, NetError};
use crate::image_io::{Image, ImagePlane};
use crate::nn::Tensor;
use crate::patch::{
    build_pyramid, group_all, lowpass, lowpass_adjoint, search_plane, second_scale_group_all, PaddedImage,
    PatchGroup, PatchLayout, Phase,
};
use crate::real::Real;

/// A noisy image ready for the network.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub side: usize,
    pub full: PaddedImage<T>,
    /// Low-passed half-resolution planes, indexed by [`Phase::index`].
    pub phases: [PaddedImage<T>; 4],
    /// One group per pixel, row-major.
    pub groups1: Vec<PatchGroup>,
    pub groups2: Vec<PatchGroup>,
    /// Stride-1 layout over the padded full-resolution canvas, row-major.
    pub layout1: PatchLayout,
    cover1: Vec<T>,
    phase_layouts: [PatchLayout; 4],
    phase_cover: [Vec<T>; 4],
    /// Pixel indices whose scale-2 patch lives in each phase, in layout order.
    phase_members: [Vec<usize>; 4],
}

fn padded_cast<T: Real>(p: &PaddedImage<f64>) -> PaddedImage<T> {
    PaddedImage {
        image: p.image.cast(),
        margin: p.margin,
        height: p.height,
        width: p.width,
    }
}

impl<T: Real> Prepared<T> {
    /// Pads, builds the pyramid and groups every pixel at both scales.
    /// Color images are searched on their luminance.
    pub fn new(img: &ImagePlane, arch: &ArchDescriptor) -> Result<Self, NetError> {
        if img.channels != arch.channels {
            return Err(NetError::Channels {
                model: arch.channels,
                image: img.channels,
            });
        }
        let cfg = arch.patch_config();
        cfg.validate()?;
        let pyr = build_pyramid(img, &cfg)?;
        let (groups1, groups2) = if img.channels == 1 {
            (group_all(&pyr.full, &cfg)?, second_scale_group_all(&pyr, &cfg)?)
        } else {
            let luma = search_plane(img);
            let spyr = build_pyramid(&luma, &cfg)?;
            (group_all(&spyr.full, &cfg)?, second_scale_group_all(&spyr, &cfg)?)
        };
        let side = cfg.patch_side;
        let (h, w, ch) = (img.height, img.width, img.channels);
        let layout1 = PatchLayout::dense(pyr.full.image.height, pyr.full.image.width, ch, side);
        let cover1 = layout1.coverage(None);
        let phase_layouts = Phase::ALL.map(|p| {
            let plane = &pyr.phases[p.index()].image;
            PatchLayout::dense(plane.height, plane.width, ch, side)
        });
        let phase_cover = phase_layouts.clone().map(|l| l.coverage(None));
        let phase_members = Phase::ALL.map(|p| {
            let (r0, c0) = p.offsets();
            let plane = &pyr.phases[p.index()];
            let mut v = Vec::with_capacity(plane.height * plane.width);
            for a in 0..plane.height {
                for b in 0..plane.width {
                    v.push((r0 + 2 * a) * w + c0 + 2 * b);
                }
            }
            v
        });
        Ok(Prepared {
            height: h,
            width: w,
            channels: ch,
            side,
            full: padded_cast(&pyr.full),
            phases: pyr.phases.each_ref().map(padded_cast),
            groups1,
            groups2,
            layout1,
            cover1,
            phase_layouts,
            phase_cover,
            phase_members,
        })
    }

    /// Number of patch groups per scale (one per pixel).
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n(&self) -> usize {
        self.side * self.side * self.channels
    }

    pub fn k(&self) -> usize {
        self.groups1.first().map_or(0, PatchGroup::k)
    }

    fn groups(&self, scale: usize) -> &[PatchGroup] {
        if scale == 1 {
            &self.groups1
        } else {
            &self.groups2
        }
    }

    fn plane(&self, g: &PatchGroup) -> &PaddedImage<T> {
        match g.plane {
            crate::patch::Plane::Full => &self.full,
            crate::patch::Plane::Phase(p) => &self.phases[p.index()],
        }
    }

    /// Group matrices `[len, n, k]` of the given scale for pixels `range`.
    pub fn z_batch(&self, scale: usize, range: Range<usize>) -> Tensor<T> {
        let (n, k) = (self.n(), self.k());
        let groups = &self.groups(scale)[range];
        let mut data = vec![T::zero(); groups.len() * n * k];
        data.par_chunks_mut(n * k)
            .zip(groups.par_iter())
            .for_each_init(
                || vec![T::zero(); n],
                |scratch, (out, g)| {
                    g.matrix_into(self.plane(g), self.side, scratch, out)
                        .expect("group members lie inside their plane")
                },
            );
        Tensor::from_vec(&[groups.len(), n, k], data).expect("shape")
    }

    /// Weight-net inputs `[len, k, 1]`.
    pub fn dist_batch(&self, scale: usize, range: Range<usize>) -> Tensor<T> {
        let groups = &self.groups(scale)[range];
        let k = self.k();
        let data = groups.iter().flat_map(|g| g.dist.iter().map(|&d| T::of(d))).collect();
        Tensor::from_vec(&[groups.len(), k, 1], data).expect("shape")
    }

    /// Noisy seed patches `z_i` (concatenated `n`-vectors) for pixels `range`.
    pub fn seed_patches(&self, range: Range<usize>) -> Vec<T> {
        let n = self.n();
        let w = self.width;
        let mut out = vec![T::zero(); range.len() * n];
        out.par_chunks_mut(n).zip(range.into_par_iter()).for_each(|(p, i)| {
            self.full.patch_into((i / w, i % w), self.side, p).expect("pixel inside image")
        });
        out
    }

    /// Unweighted aggregate-and-re-extract of one patch per pixel.
    ///
    /// Scale 1 works on the full-resolution canvas. Scale 2 builds one canvas
    /// per phase plane and low-passes it before re-extraction.
    pub fn agg(&self, scale: usize, p: &[T]) -> Vec<T> {
        let n = self.n();
        if scale == 1 {
            let mut canvas = self.layout1.scatter(p, None);
            divide(&mut canvas, &self.cover1);
            return self.layout1.gather(&canvas);
        }
        let mut out = vec![T::zero(); p.len()];
        for ph in 0..4 {
            let members = &self.phase_members[ph];
            let layout = &self.phase_layouts[ph];
            let local: Vec<T> = members.iter().flat_map(|&i| p[i * n..(i + 1) * n].iter().copied()).collect();
            let mut canvas = layout.scatter(&local, None);
            divide(&mut canvas, &self.phase_cover[ph]);
            let filtered = lowpass(&as_image(layout, canvas), 1);
            let back = layout.gather(&filtered.data);
            for (j, &i) in members.iter().enumerate() {
                out[i * n..(i + 1) * n].copy_from_slice(&back[j * n..(j + 1) * n]);
            }
        }
        out
    }

    /// Adjoint of [`Prepared::agg`].
    pub fn agg_adjoint(&self, scale: usize, dp: &[T]) -> Vec<T> {
        let n = self.n();
        if scale == 1 {
            let mut canvas = self.layout1.scatter(dp, None);
            divide(&mut canvas, &self.cover1);
            return self.layout1.gather(&canvas);
        }
        let mut out = vec![T::zero(); dp.len()];
        for ph in 0..4 {
            let members = &self.phase_members[ph];
            let layout = &self.phase_layouts[ph];
            let local: Vec<T> = members.iter().flat_map(|&i| dp[i * n..(i + 1) * n].iter().copied()).collect();
            let canvas = layout.scatter(&local, None);
            let mut canvas = lowpass_adjoint(&as_image(layout, canvas), 1).data;
            divide(&mut canvas, &self.phase_cover[ph]);
            let back = layout.gather(&canvas);
            for (j, &i) in members.iter().enumerate() {
                out[i * n..(i + 1) * n].copy_from_slice(&back[j * n..(j + 1) * n]);
            }
        }
        out
    }

    /// Weighted overlap average of the output patches, cropped to the image.
    /// Also returns the padded-canvas numerator and denominator.
    pub fn combine(&self, zhat: &[T], weights: &[T]) -> (Image<T>, Vec<T>, Vec<T>) {
        let num = self.layout1.scatter(zhat, Some(weights));
        let den = self.layout1.coverage(Some(weights));
        let canvas: Vec<T> = num.iter().zip(&den).map(|(&a, &d)| a / d).collect();
        (self.crop(&canvas), num, den)
    }

    /// Unpadded window of a padded full-resolution canvas.
    pub fn crop(&self, canvas: &[T]) -> Image<T> {
        let m = self.full.margin;
        let pw = self.layout1.width;
        let ch = self.channels;
        let mut data = Vec::with_capacity(self.len() * ch);
        for r in 0..self.height {
            let start = ((r + m) * pw + m) * ch;
            data.extend_from_slice(&canvas[start..start + self.width * ch]);
        }
        Image {
            height: self.height,
            width: self.width,
            channels: ch,
            data,
        }
    }

    /// Adjoint of [`Prepared::crop`]: zero ring around the image.
    pub fn uncrop(&self, img: &Image<T>) -> Vec<T> {
        let m = self.full.margin;
        let pw = self.layout1.width;
        let ch = self.channels;
        let mut canvas = vec![T::zero(); self.layout1.height * pw * ch];
        for r in 0..self.height {
            let start = ((r + m) * pw + m) * ch;
            let src = r * self.width * ch;
            canvas[start..start + self.width * ch].copy_from_slice(&img.data[src..src + self.width * ch]);
        }
        canvas
    }
}

fn divide<T: Real>(canvas: &mut [T], cover: &[T]) {
    for (v, &c) in canvas.iter_mut().zip(cover) {
        *v /= c;
    }
}

fn as_image<T>(layout: &PatchLayout, data: Vec<T>) -> Image<T> {
    Image {
        height: layout.height,
        width: layout.width,
        channels: layout.channels,
        data,
    }
}
