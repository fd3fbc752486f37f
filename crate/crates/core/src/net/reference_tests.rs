//! Whole-network checks against a deliberately naive single-threaded
//! re-implementation that only shares the patch groups with the library.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::*;
use crate::image_io::{Image, ImagePlane};
use crate::nn::{BatchNorm, Mode, Parameterized, SepLinear};
use crate::patch::{reflect, Plane, LOWPASS_TAPS};

fn random(h: usize, w: usize, c: usize, seed: u64) -> ImagePlane {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    Image::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn randomized(arch: ArchDescriptor, seed: u64) -> ModelParams<f64> {
    let mut m = ModelParams::<f64>::init(arch, seed);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed.wrapping_mul(7919));
    m.visit_params_mut(&mut |name, t| {
        for v in t.data.iter_mut() {
            let r: f64 = rng.random_range(-1.0..1.0);
            *v = if name == "beta" { 4.0 } else { *v + 0.15 * r };
        }
    });
    m.visit_buffers_mut(&mut |name, t| {
        for v in t.data.iter_mut() {
            let r: f64 = rng.random_range(0.0..1.0);
            *v = if name.ends_with("var") { 0.5 + r } else { 0.4 * (r - 0.5) };
        }
    });
    m
}

/// Row-major `rows x cols` matrix.
type Mat = (usize, usize, Vec<f64>);

fn sl(l: &SepLinear<f64>, z: &Mat) -> Mat {
    let (ir, ic) = (l.w1.dims[1], l.w2.dims[0]);
    assert_eq!((z.0, z.1), (ir, ic));
    let (or, oc) = (l.w1.dims[0], l.w2.dims[1]);
    let mut out = vec![0.0; or * oc];
    for a in 0..or {
        for j in 0..oc {
            let mut s = l.b.data[a * oc + j];
            for p in 0..ir {
                for q in 0..ic {
                    s += l.w1.data[a * ir + p] * z.2[p * ic + q] * l.w2.data[q * oc + j];
                }
            }
            out[a * oc + j] = s;
        }
    }
    (or, oc, out)
}

fn bn(b: &BatchNorm<f64>, x: &Mat) -> Mat {
    let mut out = x.2.clone();
    for r in 0..x.0 {
        for c in 0..x.1 {
            let v = x.2[r * x.1 + c];
            out[r * x.1 + c] = b.scale.data[r] * (v - b.running_mean.data[r]) / (b.running_var.data[r] + b.epsilon).sqrt()
                + b.shift.data[r];
        }
    }
    (x.0, x.1, out)
}

fn relu(x: Mat) -> Mat {
    (x.0, x.1, x.2.into_iter().map(|v| v.max(0.0)).collect())
}

fn weight_net(net: &WeightNet<f64>, d: &[f64]) -> Vec<f64> {
    let fc = |i: usize, x: &[f64]| -> Vec<f64> {
        let l = &net.fc[i];
        let k = x.len();
        (0..k)
            .map(|o| l.b.data[o] + (0..k).map(|p| l.w.data[o * k + p] * x[p]).sum::<f64>())
            .collect()
    };
    let mut h = fc(0, d);
    for i in 0..6 {
        let a = relu(bn(&net.bn[i], &(h.len(), 1, h))).2;
        h = fc(i + 1, &a);
    }
    h
}

/// Image sampled with mirror reflection.
fn at(img: &ImagePlane, r: isize, c: isize, ch: usize) -> f64 {
    img.get(reflect(r, img.height), reflect(c, img.width), ch)
}

fn patch(img: &ImagePlane, center: (usize, usize), side: usize) -> Vec<f64> {
    let m = (side / 2) as isize;
    let mut v = Vec::new();
    for a in 0..side as isize {
        for b in 0..side as isize {
            for ch in 0..img.channels {
                v.push(at(img, center.0 as isize + a - m, center.1 as isize + b - m, ch));
            }
        }
    }
    v
}

fn filtered(img: &ImagePlane) -> ImagePlane {
    let mut out = Image::zeros(img.height, img.width, img.channels);
    for r in 0..img.height {
        for c in 0..img.width {
            for ch in 0..img.channels {
                let mut s = 0.0;
                for (i, ti) in LOWPASS_TAPS.iter().enumerate() {
                    for (j, tj) in LOWPASS_TAPS.iter().enumerate() {
                        s += ti * tj * at(img, r as isize + i as isize - 1, c as isize + j as isize - 1, ch);
                    }
                }
                out.set(r, c, ch, s);
            }
        }
    }
    out
}

fn phase_plane(f: &ImagePlane, r0: usize, c0: usize) -> ImagePlane {
    let h = (f.height - r0).div_ceil(2);
    let w = (f.width - c0).div_ceil(2);
    let mut out = Image::zeros(h, w, f.channels);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..f.channels {
                out.set(r, c, ch, f.get(r0 + 2 * r, c0 + 2 * c, ch));
            }
        }
    }
    out
}

/// Average of patches placed at `centers` (unpadded coords) on a canvas
/// padded by `m`, optionally low-passed, then re-extracted at the same centers.
fn agg(h: usize, w: usize, ch: usize, side: usize, centers: &[(usize, usize)], p: &[Vec<f64>], lp: bool) -> Vec<Vec<f64>> {
    let m = side / 2;
    let (ph, pw) = (h + 2 * m, w + 2 * m);
    let mut num = ImagePlane::zeros(ph, pw, ch);
    let mut den = ImagePlane::zeros(ph, pw, ch);
    for (&(r, c), v) in centers.iter().zip(p) {
        let mut i = 0;
        for a in 0..side {
            for b in 0..side {
                for q in 0..ch {
                    num.set(r + a, c + b, q, num.get(r + a, c + b, q) + v[i]);
                    den.set(r + a, c + b, q, den.get(r + a, c + b, q) + 1.0);
                    i += 1;
                }
            }
        }
    }
    let mut canvas = Image::zeros(ph, pw, ch);
    for i in 0..canvas.data.len() {
        canvas.data[i] = num.data[i] / den.data[i];
    }
    if lp {
        canvas = filtered(&canvas);
    }
    centers
        .iter()
        .map(|&(r, c)| {
            let mut v = Vec::new();
            for a in 0..side {
                for b in 0..side {
                    for q in 0..ch {
                        v.push(canvas.get(r + a, c + b, q));
                    }
                }
            }
            v
        })
        .collect()
}

fn naive_denoise(model: &ModelParams<f64>, noisy: &ImagePlane) -> ImagePlane {
    let arch = model.arch;
    let (h, w, ch) = (noisy.height, noisy.width, noisy.channels);
    let (side, k) = (arch.patch_side, arch.k);
    let n = arch.n();
    let m = side / 2;
    let groups = Prepared::<f64>::new(noisy, &arch).unwrap();
    let f = filtered(noisy);
    let planes: Vec<ImagePlane> = (0..4).map(|p| phase_plane(&f, p / 2, p % 2)).collect();
    let mut f1 = vec![Vec::new(), Vec::new()];
    let mut proj = vec![Vec::new(), Vec::new()];
    for scale in [1, 2] {
        let b = model.branch(scale);
        let gs = if scale == 1 { &groups.groups1 } else { &groups.groups2 };
        for g in gs {
            let src = match g.plane {
                Plane::Full => noisy,
                Plane::Phase(p) => &planes[p.index()],
            };
            let wts = weight_net(model.weight_net(scale), &g.dist);
            let mut z = vec![0.0; n * k];
            for (j, &mem) in g.members.iter().enumerate() {
                for (a, v) in patch(src, mem, side).into_iter().enumerate() {
                    z[a * k + j] = v * wts[j];
                }
            }
            let mut x = relu(sl(&b.tr0, &(n, k, z)));
            if let Some(t) = &b.tbr1 {
                x = relu(bn(&t.bn, &sl(&t.sl, &x)));
            }
            proj[scale - 1].push(sl(&b.t_pre, &x).2);
            f1[scale - 1].push(x);
        }
    }
    let centers1: Vec<_> = (0..h * w).map(|i| (i / w, i % w)).collect();
    let pt1 = agg(h, w, ch, side, &centers1, &proj[0], false);
    let mut pt2 = vec![Vec::new(); h * w];
    for (p, plane) in planes.iter().enumerate() {
        let (r0, c0) = (p / 2, p % 2);
        let centers: Vec<_> = (0..plane.height * plane.width).map(|i| (i / plane.width, i % plane.width)).collect();
        let full: Vec<usize> = centers.iter().map(|&(a, b)| (r0 + 2 * a) * w + c0 + 2 * b).collect();
        let local: Vec<_> = full.iter().map(|&i| proj[1][i].clone()).collect();
        for (v, &i) in agg(plane.height, plane.width, ch, side, &centers, &local, true).into_iter().zip(&full) {
            pt2[i] = v;
        }
    }
    let beta = model.beta.data[0];
    let mut num = ImagePlane::zeros(h + 2 * m, w + 2 * m, ch);
    let mut den = ImagePlane::zeros(h + 2 * m, w + 2 * m, ch);
    for i in 0..h * w {
        let fagg1 = relu(sl(&model.scale1.tr_post, &(n, 1, pt1[i].clone())));
        let fagg2 = relu(sl(&model.scale2.tr_post, &(n, 1, pt2[i].clone())));
        let fd = arch.feature_dim;
        let mut x = vec![0.0; fd * 4 * k];
        for a in 0..fd {
            for (s, part) in [&f1[0][i], &fagg1, &f1[1][i], &fagg2].iter().enumerate() {
                for j in 0..k {
                    x[a * 4 * k + s * k + j] = part.2[a * k + j];
                }
            }
        }
        let fu = &model.fusion;
        let mut g = relu(bn(&fu.tbr2.bn, &sl(&fu.tbr2.sl, &(fd, 4 * k, x))));
        if let Some(t) = &fu.tbr3 {
            g = relu(bn(&t.bn, &sl(&t.sl, &g)));
        }
        let r = sl(&fu.t4, &g).2;
        let (row, col) = centers1[i];
        let zhat: Vec<f64> = patch(noisy, (row, col), side).iter().zip(&r).map(|(a, b)| a - b).collect();
        let mean = zhat.iter().sum::<f64>() / n as f64;
        let var = zhat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let wt = (-beta * var).exp();
        let mut q = 0;
        for a in 0..side {
            for b in 0..side {
                for c in 0..ch {
                    num.set(row + a, col + b, c, num.get(row + a, col + b, c) + wt * zhat[q]);
                    den.set(row + a, col + b, c, den.get(row + a, col + b, c) + wt);
                    q += 1;
                }
            }
        }
    }
    let mut out = Image::zeros(h, w, ch);
    for r in 0..h {
        for c in 0..w {
            for q in 0..ch {
                out.set(r, c, q, num.get(r + m, c + m, q) / den.get(r + m, c + m, q));
            }
        }
    }
    out
}

fn max_diff(a: &ImagePlane, b: &ImagePlane) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matches_naive_reference_gray() {
    for arch in [ArchDescriptor::tiny(), ArchDescriptor { variant: Variant::Small, ..ArchDescriptor::tiny() }] {
        let m = randomized(arch, 21);
        let noisy = random(18, 17, 1, 22);
        let fast = denoise(&m, &noisy).unwrap();
        let slow = naive_denoise(&m, &noisy);
        assert!(max_diff(&fast, &slow) < 1e-10, "{:?}: {}", arch.variant, max_diff(&fast, &slow));
    }
}

#[test]
fn matches_naive_reference_color_shared_weight_net() {
    let arch = ArchDescriptor {
        channels: 3,
        patch_side: 3,
        share_weight_net: true,
        ..ArchDescriptor::tiny()
    };
    let m = randomized(arch, 23);
    let noisy = random(12, 13, 3, 24);
    let fast = denoise(&m, &noisy).unwrap();
    let slow = naive_denoise(&m, &noisy);
    assert!(max_diff(&fast, &slow) < 1e-10);
}

#[test]
fn golden_snapshot_32x32() {
    let arch = ArchDescriptor::tiny();
    let m = randomized(arch, 31);
    let noisy = random(32, 32, 1, 32);
    let out = denoise(&m, &noisy).unwrap();
    let slow = naive_denoise(&m, &noisy);
    assert!(max_diff(&out, &slow) < 1e-10);
    let sum: f64 = out.data.iter().sum();
    let probe = [out.data[0], out.data[500], out.data[1023]];
    assert!((sum - GOLDEN_SUM).abs() < 1e-9, "sum {sum:.15}");
    for (p, g) in probe.iter().zip(GOLDEN_PROBE) {
        assert!((p - g).abs() < 1e-12, "probe {probe:?}");
    }
}

const GOLDEN_SUM: f64 = 561.017433948528264;
const GOLDEN_PROBE: [f64; 3] = [0.8864498623558364, 0.4113673977801386, 0.6793123042426092];

#[test]
fn fusion_order_matters() {
    let arch = ArchDescriptor::tiny();
    let m = randomized(arch, 41);
    let noisy = random(16, 16, 1, 42);
    let base = denoise(&m, &noisy).unwrap();
    let mut swapped = m.clone();
    std::mem::swap(&mut swapped.scale1, &mut swapped.scale2);
    assert!(max_diff(&base, &denoise(&swapped, &noisy).unwrap()) > 1e-6);
}

#[test]
fn shifted_input_gives_shifted_output_in_the_interior() {
    let arch = ArchDescriptor::tiny();
    let m = randomized(arch, 51);
    let big = random(82, 82, 1, 52);
    let a = denoise(&m, &big.crop(0, 0, 80, 80)).unwrap();
    let b = denoise(&m, &big.crop(2, 2, 80, 80)).unwrap();
    // Receptive field of the tiny architecture, second-scale path included.
    let margin = 30;
    for r in margin..80 - margin {
        for c in margin..80 - margin {
            assert!((a.get(r + 2, c + 2, 0) - b.get(r, c, 0)).abs() < 1e-5);
        }
    }
}

#[test]
fn thread_count_does_not_change_bits() {
    let arch = ArchDescriptor::tiny();
    let m = randomized(arch, 61).cast::<f32>();
    let noisy = random(24, 24, 1, 62);
    let clean = random(24, 24, 1, 63);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            let out = denoise(&m, &noisy).unwrap();
            let mut mm = m.clone();
            let items = vec![Prepared::<f32>::new(&noisy, &arch).unwrap()];
            let (o, trace, _) = forward_batch(&mm, &items, Mode::Train).unwrap();
            let (_, d) = mse_loss(&o, std::slice::from_ref(&clean)).unwrap();
            backward_batch(&mut mm, &items, &trace, &d).unwrap();
            let mut grads = Vec::new();
            mm.visit_params(&mut |_, t| grads.extend(t.grad.clone().unwrap().iter().map(|v| v.to_bits())));
            (out.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), grads)
        })
    };
    assert_eq!(run(1), run(4));
}
