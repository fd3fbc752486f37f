//! Batched forward pass with caches, and the hand-scheduled backward pass.
//!
//! All patch groups of all images in a batch form one `[count, rows, cols]`
//! tensor per stage, so batch normalization pools over the whole batch.
//! The two aggregation steps and the final recombination run per image.

use rayon::prelude::*;

use super::{ModelParams, NetError, Prepared, WeightNet};
use crate::image_io::{Image, ImagePlane};
use crate::nn::{relu, relu_backward, BnCache, BnStats, Mode, NnError, Tensor};
use crate::patch::sample_variance;
use crate::real::Real;

/// Batch statistics to fold into the running averages, by batch-norm name.
pub type BnUpdates<T> = Vec<(String, BnStats<T>)>;

pub(crate) struct WnetTrace<T> {
    /// Input of every FC layer: the distances, then each hidden activation.
    inputs: Vec<Tensor<T>>,
    bn: Vec<BnCache<T>>,
    pub(crate) out: Tensor<T>,
}

/// Column weights for every group: `FC -> (BN -> ReLU -> FC) x 6`.
pub fn weight_net_forward<T: Real>(net: &WeightNet<T>, dist: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
    Ok(wnet_forward(net, dist, mode, "", &mut Vec::new())?.out)
}

fn wnet_forward<T: Real>(
    net: &WeightNet<T>,
    dist: &Tensor<T>,
    mode: Mode,
    prefix: &str,
    stats: &mut BnUpdates<T>,
) -> Result<WnetTrace<T>, NnError> {
    let mut inputs = vec![dist.clone()];
    let mut caches = Vec::with_capacity(net.bn.len());
    let mut h = net.fc[0].forward(dist)?;
    for (i, bn) in net.bn.iter().enumerate() {
        let (y, cache, st) = bn.forward(&h, mode)?;
        if let Some(s) = st {
            stats.push((format!("{prefix}.wnet.bn{i}"), s));
        }
        caches.push(cache);
        let a = relu(&y);
        h = net.fc[i + 1].forward(&a)?;
        inputs.push(a);
    }
    Ok(WnetTrace {
        inputs,
        bn: caches,
        out: h,
    })
}

fn wnet_backward<T: Real>(net: &mut WeightNet<T>, tr: &WnetTrace<T>, dw: Tensor<T>) -> Result<(), NnError> {
    let mut d = dw;
    for i in (0..net.fc.len()).rev() {
        let (dx, g) = net.fc[i].backward(&tr.inputs[i], &d)?;
        net.fc[i].accumulate(&g);
        if i == 0 {
            break;
        }
        let db = relu_backward(&tr.inputs[i], &dx);
        let (dh, bg) = net.bn[i - 1].backward(&tr.bn[i - 1], &db)?;
        net.bn[i - 1].accumulate(&bg);
        d = dh;
    }
    Ok(())
}

/// `Z diag(w)` for every item: column `j` of `z` scaled by `w[j]`.
pub fn apply_column_weights<T: Real>(z: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (count, n, k) = z.batch_dims();
    debug_assert_eq!(w.len(), count * k);
    let mut out = Tensor::zeros(&[count, n, k]);
    out.data
        .par_chunks_mut(n * k)
        .zip(z.data.par_chunks(n * k))
        .zip(w.data.par_chunks(k))
        .for_each(|((o, zi), wi)| {
            for (row_o, row_z) in o.chunks_exact_mut(k).zip(zi.chunks_exact(k)) {
                for ((a, &b), &c) in row_o.iter_mut().zip(row_z).zip(wi) {
                    *a = b * c;
                }
            }
        });
    out
}

/// Gradient of the column weights: `dw[j] = sum_a dZw[a, j] Z[a, j]`.
fn column_weights_backward<T: Real>(z: &Tensor<T>, dzw: &Tensor<T>) -> Tensor<T> {
    let (count, n, k) = z.batch_dims();
    let mut dw = Tensor::zeros(&[count, k, 1]);
    dw.data
        .par_chunks_mut(k)
        .zip(z.data.par_chunks(n * k))
        .zip(dzw.data.par_chunks(n * k))
        .for_each(|((d, zi), gi)| {
            for (row_z, row_g) in zi.chunks_exact(k).zip(gi.chunks_exact(k)) {
                for ((a, &b), &c) in d.iter_mut().zip(row_z).zip(row_g) {
                    *a += b * c;
                }
            }
        });
    dw
}

/// Everything of one branch up to the image-domain projection `P`.
pub(crate) struct Front<T> {
    wnet: WnetTrace<T>,
    z: Tensor<T>,
    zw: Tensor<T>,
    f0: Tensor<T>,
    tbr1: Option<BnCache<T>>,
    pub(crate) f1: Tensor<T>,
    pub(crate) p: Tensor<T>,
}

pub(crate) fn front<T: Real>(
    model: &ModelParams<T>,
    scale: usize,
    z: Tensor<T>,
    dist: &Tensor<T>,
    mode: Mode,
    stats: &mut BnUpdates<T>,
) -> Result<Front<T>, NnError> {
    let wnet = wnet_forward(model.weight_net(scale), dist, mode, model.weight_net_prefix(scale), stats)?;
    let b = model.branch(scale);
    let zw = apply_column_weights(&z, &wnet.out);
    let f0 = relu(&b.tr0.forward(&zw)?);
    let (tbr1, f1) = match &b.tbr1 {
        Some(t) => {
            let (y, cache, st) = t.bn.forward(&t.sl.forward(&f0)?, mode)?;
            if let Some(s) = st {
                stats.push((format!("s{scale}.tbr1.bn"), s));
            }
            (Some(cache), relu(&y))
        }
        None => (None, f0.clone()),
    };
    let p = b.t_pre.forward(&f1)?;
    Ok(Front {
        wnet,
        z,
        zw,
        f0,
        tbr1,
        f1,
        p,
    })
}

/// Features computed from the aggregated projection `P~`.
pub(crate) fn post<T: Real>(model: &ModelParams<T>, scale: usize, ptilde: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    Ok(relu(&model.branch(scale).tr_post.forward(ptilde)?))
}

pub(crate) struct FusionTrace<T> {
    x: Tensor<T>,
    c2: BnCache<T>,
    g1: Tensor<T>,
    tbr3: Option<BnCache<T>>,
    g2: Tensor<T>,
    pub(crate) r: Tensor<T>,
}

/// Column concatenation `[s1-direct | s1-agg | s2-direct | s2-agg]`.
fn concat_cols<T: Real>(parts: [&Tensor<T>; 4]) -> Tensor<T> {
    let (count, f, k) = parts[0].batch_dims();
    let c = 4 * k;
    let mut x = Tensor::zeros(&[count, f, c]);
    x.data.par_chunks_mut(f * c).enumerate().for_each(|(i, xi)| {
        for (s, part) in parts.iter().enumerate() {
            let pi = part.item(i);
            for a in 0..f {
                xi[a * c + s * k..a * c + (s + 1) * k].copy_from_slice(&pi[a * k..(a + 1) * k]);
            }
        }
    });
    x
}

fn split_cols<T: Real>(x: &Tensor<T>, k: usize) -> [Tensor<T>; 4] {
    let (count, f, c) = x.batch_dims();
    std::array::from_fn(|s| {
        let mut part = Tensor::zeros(&[count, f, k]);
        part.data.par_chunks_mut(f * k).enumerate().for_each(|(i, pi)| {
            let xi = x.item(i);
            for a in 0..f {
                pi[a * k..(a + 1) * k].copy_from_slice(&xi[a * c + s * k..a * c + (s + 1) * k]);
            }
        });
        part
    })
}

pub(crate) fn fuse<T: Real>(
    model: &ModelParams<T>,
    parts: [&Tensor<T>; 4],
    mode: Mode,
    stats: &mut BnUpdates<T>,
) -> Result<FusionTrace<T>, NnError> {
    let fu = &model.fusion;
    let x = concat_cols(parts);
    let (y, c2, st) = fu.tbr2.bn.forward(&fu.tbr2.sl.forward(&x)?, mode)?;
    if let Some(s) = st {
        stats.push(("fuse.tbr2.bn".into(), s));
    }
    let g1 = relu(&y);
    let (tbr3, g2) = match &fu.tbr3 {
        Some(t) => {
            let (y, cache, st) = t.bn.forward(&t.sl.forward(&g1)?, mode)?;
            if let Some(s) = st {
                stats.push(("fuse.tbr3.bn".into(), s));
            }
            (Some(cache), relu(&y))
        }
        None => (None, g1.clone()),
    };
    let r = fu.t4.forward(&g2)?;
    Ok(FusionTrace {
        x,
        c2,
        g1,
        tbr3,
        g2,
        r,
    })
}

/// `exp(-beta * var(zhat_i))` per patch, and the variances.
pub(crate) fn patch_weights<T: Real>(zhat: &[T], n: usize, beta: T) -> (Vec<T>, Vec<T>) {
    let vars: Vec<T> = zhat.par_chunks(n).map(sample_variance).collect();
    let w = vars.iter().map(|&v| (-beta * v).exp()).collect();
    (w, vars)
}

fn concat<T: Real>(parts: Vec<Tensor<T>>) -> Tensor<T> {
    let (_, r, c) = parts[0].batch_dims();
    let count = parts.iter().map(|p| p.batch_dims().0).sum::<usize>();
    let data = parts.into_iter().flat_map(|p| p.data).collect();
    Tensor::from_vec(&[count, r, c], data).expect("shape")
}

/// Cached intermediate values of a batch forward pass.
pub struct Trace<T> {
    fronts: [Front<T>; 2],
    ptilde: [Tensor<T>; 2],
    fagg: [Tensor<T>; 2],
    fusion: FusionTrace<T>,
    zhat: Vec<T>,
    vars: Vec<T>,
    weights: Vec<T>,
    canvases: Vec<(Vec<T>, Vec<T>)>,
    offsets: Vec<usize>,
}

impl<T: Real> Trace<T> {
    /// Denoised patches `zhat_i`, concatenated over the batch.
    pub fn patches(&self) -> &[T] {
        &self.zhat
    }

    /// Final aggregation weights.
    pub fn weights(&self) -> &[T] {
        &self.weights
    }
}

fn per_item<T: Real>(items: &[Prepared<T>], offsets: &[usize], n: usize, data: &[T], f: impl Fn(&Prepared<T>, &[T]) -> Vec<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for (item, w) in items.iter().zip(offsets.windows(2)) {
        out.extend(f(item, &data[w[0] * n..w[1] * n]));
    }
    out
}

/// Runs the network on every group of every image and recombines the
/// denoised patches into one output image per input.
pub fn forward_batch<T: Real>(
    model: &ModelParams<T>,
    items: &[Prepared<T>],
    mode: Mode,
) -> Result<(Vec<Image<T>>, Trace<T>, BnUpdates<T>), NetError> {
    if items.is_empty() {
        return Err(NetError::Arch("empty batch".into()));
    }
    let arch = &model.arch;
    let n = arch.n();
    for it in items {
        if it.n() != n || it.k() != arch.k {
            return Err(NetError::Arch(format!(
                "image prepared for n={}, k={} but the model has n={n}, k={}",
                it.n(),
                it.k(),
                arch.k
            )));
        }
    }
    let mut offsets = vec![0];
    for it in items {
        offsets.push(offsets.last().unwrap() + it.len());
    }
    let total = *offsets.last().unwrap();
    let mut stats = Vec::new();
    let mut fronts = Vec::with_capacity(2);
    let mut ptilde = Vec::with_capacity(2);
    let mut fagg = Vec::with_capacity(2);
    for scale in [1, 2] {
        let z = concat(items.iter().map(|it| it.z_batch(scale, 0..it.len())).collect());
        let dist = concat(items.iter().map(|it| it.dist_batch(scale, 0..it.len())).collect());
        let fr = front(model, scale, z, &dist, mode, &mut stats)?;
        let pt = per_item(items, &offsets, n, &fr.p.data, |it, p| it.agg(scale, p));
        let pt = Tensor::from_vec(&[total, n, 1], pt)?;
        fagg.push(post(model, scale, &pt)?);
        ptilde.push(pt);
        fronts.push(fr);
    }
    let fusion = fuse(model, [&fronts[0].f1, &fagg[0], &fronts[1].f1, &fagg[1]], mode, &mut stats)?;
    let seeds: Vec<T> = items.iter().flat_map(|it| it.seed_patches(0..it.len())).collect();
    let zhat: Vec<T> = seeds.iter().zip(&fusion.r.data).map(|(&z, &r)| z - r).collect();
    let beta = model.beta.data[0];
    let (weights, vars) = patch_weights(&zhat, n, beta);
    let mut outputs = Vec::with_capacity(items.len());
    let mut canvases = Vec::with_capacity(items.len());
    for (it, w) in items.iter().zip(offsets.windows(2)) {
        let (img, num, den) = it.combine(&zhat[w[0] * n..w[1] * n], &weights[w[0]..w[1]]);
        outputs.push(img);
        canvases.push((num, den));
    }
    let trace = Trace {
        fronts: fronts.try_into().ok().expect("two scales"),
        ptilde: ptilde.try_into().ok().expect("two scales"),
        fagg: fagg.try_into().ok().expect("two scales"),
        fusion,
        zhat,
        vars,
        weights,
        canvases,
        offsets,
    };
    Ok((outputs, trace, stats))
}

/// Mean squared error over all samples of the batch, and its gradient.
pub fn mse_loss<T: Real>(outputs: &[Image<T>], targets: &[ImagePlane]) -> Result<(f64, Vec<Image<T>>), NetError> {
    let count: usize = targets.iter().map(|t| t.data.len()).sum();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(outputs.len());
    for (o, t) in outputs.iter().zip(targets) {
        if o.height != t.height || o.width != t.width || o.channels != t.channels {
            return Err(NetError::Image(crate::image_io::ImageError::Shape(format!(
                "output {}x{}x{} vs target {}x{}x{}",
                o.height, o.width, o.channels, t.height, t.width, t.channels
            ))));
        }
        let scale = 2.0 / count as f64;
        let mut g = Image::zeros(o.height, o.width, o.channels);
        for ((d, &a), &b) in g.data.iter_mut().zip(&o.data).zip(&t.data) {
            let e = a.f64() - b;
            loss += e * e;
            *d = T::of(scale * e);
        }
        grads.push(g);
    }
    Ok((loss / count as f64, grads))
}

/// Accumulates parameter gradients of `sum <d_out, outputs>` into the model.
pub fn backward_batch<T: Real>(
    model: &mut ModelParams<T>,
    items: &[Prepared<T>],
    trace: &Trace<T>,
    d_out: &[Image<T>],
) -> Result<(), NetError> {
    let n = model.arch.n();
    let k = model.arch.k;
    let beta = model.beta.data[0];
    let total = *trace.offsets.last().unwrap();
    let denom = T::of((n - 1) as f64);
    let mut dr = vec![T::zero(); total * n];
    let mut dbeta_parts = vec![T::zero(); total];
    for (b, (it, w)) in items.iter().zip(trace.offsets.windows(2)).enumerate() {
        let (num, den) = &trace.canvases[b];
        let d_canvas = it.uncrop(&d_out[b]);
        let dn: Vec<T> = d_canvas.iter().zip(den).map(|(&g, &d)| g / d).collect();
        let dd: Vec<T> = dn.iter().zip(num.iter().zip(den)).map(|(&g, (&a, &d))| -g * a / d).collect();
        let gn = it.layout1.gather(&dn);
        let gd = it.layout1.gather(&dd);
        dr[w[0] * n..w[1] * n]
            .par_chunks_mut(n)
            .zip(dbeta_parts[w[0]..w[1]].par_iter_mut())
            .enumerate()
            .for_each(|(l, (d, db))| {
                let g = w[0] + l;
                let zh = &trace.zhat[g * n..(g + 1) * n];
                let gnl = &gn[l * n..(l + 1) * n];
                let dw = zh.iter().zip(gnl).map(|(&a, &b)| a * b).sum::<T>() + gd[l * n..(l + 1) * n].iter().copied().sum::<T>();
                let wl = trace.weights[g];
                *db = -dw * wl * trace.vars[g];
                let dvar = -dw * wl * beta;
                let mean = zh.iter().copied().sum::<T>() / T::of(n as f64);
                for a in 0..n {
                    let dz = wl * gnl[a] + dvar * T::of(2.0) * (zh[a] - mean) / denom;
                    d[a] = -dz;
                }
            });
    }
    let dbeta = dbeta_parts.iter().copied().sum::<T>();
    model.beta.add_grad(&[dbeta]);

    let fu_tr = &trace.fusion;
    let dr = Tensor::from_vec(&[total, n, 1], dr)?;
    let (dg2, g) = model.fusion.t4.backward(&fu_tr.g2, &dr)?;
    model.fusion.t4.accumulate(&g);
    let dg1 = match (&mut model.fusion.tbr3, &fu_tr.tbr3) {
        (Some(t), Some(cache)) => {
            let db = relu_backward(&fu_tr.g2, &dg2);
            let (du, bg) = t.bn.backward(cache, &db)?;
            t.bn.accumulate(&bg);
            let (dx, g) = t.sl.backward(&fu_tr.g1, &du)?;
            t.sl.accumulate(&g);
            dx
        }
        _ => dg2,
    };
    let db = relu_backward(&fu_tr.g1, &dg1);
    let t2 = &mut model.fusion.tbr2;
    let (du, bg) = t2.bn.backward(&fu_tr.c2, &db)?;
    t2.bn.accumulate(&bg);
    let (dx, g) = t2.sl.backward(&fu_tr.x, &du)?;
    t2.sl.accumulate(&g);
    let [df1_1, dfagg_1, df1_2, dfagg_2] = split_cols(&dx, k);

    for (si, (df1, dfagg)) in [(df1_1, dfagg_1), (df1_2, dfagg_2)].into_iter().enumerate() {
        let scale = si + 1;
        let fr = &trace.fronts[si];
        let br = model.branch_mut(scale);
        let dq = relu_backward(&trace.fagg[si], &dfagg);
        let (dpt, g) = br.tr_post.backward(&trace.ptilde[si], &dq)?;
        br.tr_post.accumulate(&g);
        let dp = per_item(items, &trace.offsets, n, &dpt.data, |it, d| it.agg_adjoint(scale, d));
        let dp = Tensor::from_vec(&[total, n, 1], dp)?;
        let (mut df1_total, g) = br.t_pre.backward(&fr.f1, &dp)?;
        br.t_pre.accumulate(&g);
        for (a, &b) in df1_total.data.iter_mut().zip(&df1.data) {
            *a += b;
        }
        let df0 = match (&mut br.tbr1, &fr.tbr1) {
            (Some(t), Some(cache)) => {
                let db = relu_backward(&fr.f1, &df1_total);
                let (du, bg) = t.bn.backward(cache, &db)?;
                t.bn.accumulate(&bg);
                let (dx, g) = t.sl.backward(&fr.f0, &du)?;
                t.sl.accumulate(&g);
                dx
            }
            _ => df1_total,
        };
        let dpre = relu_backward(&fr.f0, &df0);
        let (dzw, g) = br.tr0.backward(&fr.zw, &dpre)?;
        br.tr0.accumulate(&g);
        let dw = column_weights_backward(&fr.z, &dzw);
        wnet_backward(model.weight_net_mut(scale), &fr.wnet, dw)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ArchDescriptor;
    use crate::nn::testutil::rand_tensor;
    use crate::nn::{grad_check, GradCheckOptions, Parameterized};
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random(h: usize, w: usize, c: usize, seed: u64) -> ImagePlane {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        Image::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Gives every parameter (including the zero-initialized head and beta) a
    /// random nonzero value so that no gradient path is trivially dead.
    pub(crate) fn randomize<T: Real>(model: &mut ModelParams<T>, seed: u64, scale: f64) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        model.visit_params_mut(&mut |name, t| {
            for v in t.data.iter_mut() {
                let r: f64 = rng.random_range(-1.0..1.0);
                *v = if name.ends_with(".scale") {
                    T::of(1.0 + 0.2 * r)
                } else if name == "beta" {
                    T::of(2.0 + r)
                } else {
                    *v + T::of(scale * r)
                };
            }
        });
    }

    #[test]
    fn column_weights_match_diagonal_multiply() {
        let z = rand_tensor(&[2, 4, 3], 1);
        let w = rand_tensor(&[2, 3, 1], 2);
        let out = apply_column_weights(&z, &w);
        for i in 0..2 {
            for a in 0..4 {
                for j in 0..3 {
                    let dense: f64 = (0..3)
                        .map(|q| z.item(i)[a * 3 + q] * if q == j { w.item(i)[j] } else { 0.0 })
                        .sum();
                    assert_eq!(out.item(i)[a * 3 + j], dense);
                }
            }
        }
        let ones = Tensor::from_vec(&[2, 3, 1], vec![1.0; 6]).unwrap();
        assert_eq!(apply_column_weights(&z, &ones).data, z.data);
    }

    #[test]
    fn zero_weight_net_gives_zero_weights() {
        let mut m = ModelParams::<f64>::init(ArchDescriptor::tiny(), 1);
        let net = m.weight_net_mut(1);
        for fc in &mut net.fc {
            fc.w.data.iter_mut().for_each(|v| *v = 0.0);
            fc.b.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let d = rand_tensor(&[5, 6, 1], 3);
        let w = weight_net_forward(m.weight_net(1), &d, Mode::Train).unwrap();
        assert!(w.data.iter().all(|&v| v == 0.0));
    }

    fn end_to_end_gradient_check(mode: Mode) {
        let arch = ArchDescriptor::shrunk();
        let noisy = random(8, 8, 1, 11);
        let clean = random(8, 8, 1, 12);
        let items = vec![Prepared::<f64>::new(&noisy, &arch).unwrap()];
        let targets = vec![clean];
        let mut model = ModelParams::<f64>::init(arch, 5);
        randomize(&mut model, 6, 0.3);
        let loss = |m: &ModelParams<f64>| {
            let (out, _, _) = forward_batch(m, &items, mode).unwrap();
            mse_loss(&out, &targets).unwrap().0
        };
        let analytic = |m: &mut ModelParams<f64>| {
            m.zero_grads();
            let (out, trace, _) = forward_batch(m, &items, mode).unwrap();
            let (l, d) = mse_loss(&out, &targets).unwrap();
            backward_batch(m, &items, &trace, &d).unwrap();
            l
        };
        let opts = GradCheckOptions {
            tolerance: 1e-4,
            max_coords_per_tensor: Some(6),
            ..Default::default()
        };
        let report = grad_check(&mut model, analytic, loss, &opts);
        assert!(report.passed(), "{:?}", &report.failures[..report.failures.len().min(5)]);
        assert!(report.checked > 200);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        end_to_end_gradient_check(Mode::Train);
    }

    #[test]
    fn eval_mode_gradients_match_finite_differences() {
        end_to_end_gradient_check(Mode::Eval);
    }

    #[test]
    fn batch_statistics_cover_every_batch_norm() {
        let arch = ArchDescriptor::tiny();
        let m = ModelParams::<f64>::init(arch, 1);
        let items = vec![Prepared::<f64>::new(&random(12, 12, 1, 1), &arch).unwrap()];
        let (_, _, stats) = forward_batch(&m, &items, Mode::Train).unwrap();
        let mut names = Vec::new();
        m.visit_bn(&mut |n, _| names.push(n.to_string()));
        let got: Vec<_> = stats.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(got.len(), names.len());
        for n in names {
            assert!(got.contains(&n), "{n}");
        }
        let (_, _, none) = forward_batch(&m, &items, Mode::Eval).unwrap();
        assert!(none.is_empty());
    }
}
