//! Inference with bounded memory.
//!
//! Batch norms use running statistics, so everything except the two
//! aggregation steps is independent per pixel. The groups are processed in
//! chunks twice: once up to the projections `P` of both scales, then, after
//! aggregation, again through the fusion head. Only `n` values per pixel and
//! scale are kept between the passes.

use super::forward::{front, fuse, patch_weights, post};
use super::{ModelParams, NetError, Prepared};
use crate::image_io::{psnr, Image, ImagePlane};
use crate::nn::{Mode, Tensor};
use crate::real::Real;

/// Groups per chunk in [`denoise_with`].
pub const DEFAULT_CHUNK: usize = 4096;

#[derive(Clone, Debug)]
pub struct DenoiseOptions {
    pub chunk: usize,
    /// Overrides the search window stored in the model.
    pub window: Option<usize>,
    /// Keep the denoised patches `zhat_i` in the result.
    pub keep_patches: bool,
    /// Clean image to report PSNR against.
    pub reference: Option<ImagePlane>,
}

impl Default for DenoiseOptions {
    fn default() -> Self {
        DenoiseOptions {
            chunk: DEFAULT_CHUNK,
            window: None,
            keep_patches: false,
            reference: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenoiseResult {
    /// Same shape as the input, not clamped.
    pub image: ImagePlane,
    /// `zhat_i` per pixel, concatenated, when requested.
    pub patches: Option<Vec<f64>>,
    pub psnr: Option<f64>,
}

/// Denoises one image with the model's own search window.
pub fn denoise<T: Real>(model: &ModelParams<T>, noisy: &ImagePlane) -> Result<ImagePlane, NetError> {
    Ok(denoise_with(model, noisy, &DenoiseOptions::default())?.image)
}

pub fn denoise_with<T: Real>(
    model: &ModelParams<T>,
    noisy: &ImagePlane,
    opts: &DenoiseOptions,
) -> Result<DenoiseResult, NetError> {
    let mut arch = model.arch;
    if let Some(w) = opts.window {
        arch.window = w;
    }
    arch.validate().map_err(NetError::Arch)?;
    if !noisy.data.iter().all(|v| v.is_finite()) {
        return Err(NetError::NonFinite("input image".into()));
    }
    let prep = Prepared::<T>::new(noisy, &arch)?;
    let (img, zhat) = denoise_prepared(model, &prep, opts.chunk.max(1))?;
    let image = img.map(|v| v.f64());
    let psnr = match &opts.reference {
        Some(r) => Some(psnr(&image, r)?),
        None => None,
    };
    Ok(DenoiseResult {
        image,
        patches: opts.keep_patches.then(|| zhat.iter().map(|v| v.f64()).collect()),
        psnr,
    })
}

pub(crate) fn denoise_prepared<T: Real>(
    model: &ModelParams<T>,
    prep: &Prepared<T>,
    chunk: usize,
) -> Result<(Image<T>, Vec<T>), NetError> {
    let n = model.arch.n();
    let len = prep.len();
    let ranges: Vec<_> = (0..len).step_by(chunk).map(|s| s..(s + chunk).min(len)).collect();
    let mut unused = Vec::new();
    let mut ptilde = Vec::with_capacity(2);
    for scale in [1, 2] {
        let mut p = Vec::with_capacity(len * n);
        for r in &ranges {
            let z = prep.z_batch(scale, r.clone());
            let fr = front(model, scale, z, &prep.dist_batch(scale, r.clone()), Mode::Eval, &mut unused)?;
            p.extend_from_slice(&fr.p.data);
        }
        ptilde.push(prep.agg(scale, &p));
    }
    let mut zhat = prep.seed_patches(0..len);
    for r in &ranges {
        let mut f1 = Vec::with_capacity(2);
        let mut fagg = Vec::with_capacity(2);
        for scale in [1, 2] {
            let z = prep.z_batch(scale, r.clone());
            let fr = front(model, scale, z, &prep.dist_batch(scale, r.clone()), Mode::Eval, &mut unused)?;
            let pt = Tensor::from_vec(&[r.len(), n, 1], ptilde[scale - 1][r.start * n..r.end * n].to_vec())?;
            fagg.push(post(model, scale, &pt)?);
            f1.push(fr.f1);
        }
        let fu = fuse(model, [&f1[0], &fagg[0], &f1[1], &fagg[1]], Mode::Eval, &mut unused)?;
        for (z, &res) in zhat[r.start * n..r.end * n].iter_mut().zip(&fu.r.data) {
            *z -= res;
        }
    }
    let (weights, _) = patch_weights(&zhat, n, model.beta.data[0]);
    let (img, _, _) = prep.combine(&zhat, &weights);
    if !img.data.iter().all(|v| v.is_finite()) {
        return Err(NetError::NonFinite("denoised image".into()));
    }
    Ok((img, zhat))
}
