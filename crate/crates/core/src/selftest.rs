//! Built-in verification suites.
//!
//! Each suite compares a production code path against an independent
//! oracle: finite differences, an explicit Kronecker product, a dense
//! linear-algebra aggregation, exhaustive patch search, and direct
//! parameter tallies.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::image_io::{Image, ImagePlane};
use crate::net::{backward_batch, count_params, forward_batch, mse_loss, ArchDescriptor, ModelParams, Prepared, Variant};
use crate::nn::{grad_check, BatchNorm, GradCheckOptions, Linear, Mode, Parameterized, SepLinear, Tensor};
use crate::patch::{aggregate, group_all, lowpass, PaddedImage, PatchConfig, PatchGroup, Plane};

/// Deliberate defects used to confirm that the suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the analytic `W1` gradient of the separable layer by 1.05.
    SlBackward,
}

#[derive(Clone, Debug, Default)]
pub struct SelftestOptions {
    pub fault: Option<Fault>,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SelftestReport {
    pub suites: Vec<SuiteResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        !self.suites.is_empty() && self.suites.iter().all(|s| s.passed)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.suites.iter().filter(|s| !s.passed).map(|s| s.name).collect()
    }

    /// One line per suite, then a summary line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.suites {
            let _ = writeln!(
                s,
                "{} {:<16} {:>6.2}s  {}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.seconds,
                r.detail
            );
        }
        let ok = self.suites.iter().filter(|r| r.passed).count();
        let _ = writeln!(s, "{ok}/{} suites passed", self.suites.len());
        s
    }
}

type Outcome = Result<String, String>;

/// Runs every suite.
pub fn run_selftest(opts: &SelftestOptions) -> SelftestReport {
    let suites: [(&'static str, &dyn Fn() -> Outcome); 6] = [
        ("gradient_check", &|| gradient_suite(opts.fault)),
        ("kronecker", &kronecker_suite),
        ("aggregation", &aggregation_suite),
        ("knn", &knn_suite),
        ("param_counts", &param_count_suite),
        ("pyramid", &pyramid_suite),
    ];
    let mut report = SelftestReport::default();
    for (name, run) in suites {
        let start = Instant::now();
        let outcome = run();
        let seconds = start.elapsed().as_secs_f64();
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        report.suites.push(SuiteResult {
            name,
            passed,
            detail,
            seconds,
        });
    }
    report
}

fn rand_tensor(rng: &mut Xoshiro256PlusPlus, dims: &[usize]) -> Tensor<f64> {
    let len = dims.iter().product();
    Tensor::from_vec(dims, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("dims")
}

fn random_image(rng: &mut Xoshiro256PlusPlus, h: usize, w: usize, c: usize) -> ImagePlane {
    Image::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).expect("shape")
}

/// A layer plus its input, so that input gradients are checked too.
struct Probe<L> {
    layer: L,
    x: Tensor<f64>,
    visit: fn(&L, &mut dyn FnMut(&str, &Tensor<f64>)),
    visit_mut: fn(&mut L, &mut dyn FnMut(&str, &mut Tensor<f64>)),
}

impl<L> Parameterized<f64> for Probe<L> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
        (self.visit)(&self.layer, f);
        f("x", &self.x);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
        (self.visit_mut)(&mut self.layer, f);
        f("x", &mut self.x);
    }
}

fn zero_all(p: &mut impl Parameterized<f64>) {
    p.visit_params_mut(&mut |_, t| t.zero_grad());
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

fn check(label: &str, report: crate::nn::GradCheckReport, lines: &mut Vec<String>) -> Result<(), String> {
    if report.passed() {
        lines.push(format!("{label} {:.1e}", report.max_rel_error));
        Ok(())
    } else {
        let f = &report.failures[0];
        Err(format!(
            "{label}: {}[{}] analytic {:.6e} numeric {:.6e} (rel err {:.2e})",
            f.tensor, f.index, f.analytic, f.numeric, f.rel_error
        ))
    }
}

fn gradient_suite(fault: Option<Fault>) -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0x6ead);
    let strict = GradCheckOptions::default();
    let mut lines = Vec::new();

    let u = rand_tensor(&mut rng, &[3, 4, 1]);
    let mut fc = Probe {
        layer: Linear::new(rand_tensor(&mut rng, &[4, 5]), rand_tensor(&mut rng, &[4])).map_err(|e| e.to_string())?,
        x: rand_tensor(&mut rng, &[3, 5, 1]),
        visit: |l: &Linear<f64>, f| {
            f("fc.w", &l.w);
            f("fc.b", &l.b);
        },
        visit_mut: |l: &mut Linear<f64>, f| {
            f("fc.w", &mut l.w);
            f("fc.b", &mut l.b);
        },
    };
    let r = grad_check(
        &mut fc,
        |p| {
            zero_all(p);
            let (dx, g) = p.layer.backward(&p.x, &u).expect("shapes");
            p.layer.accumulate(&g);
            p.x.add_grad(&dx.data);
            dot(&p.layer.forward(&p.x).expect("shapes"), &u)
        },
        |p| dot(&p.layer.forward(&p.x).expect("shapes"), &u),
        &strict,
    );
    check("fc", r, &mut lines)?;

    let u = rand_tensor(&mut rng, &[2, 3, 6]);
    let mut sl = Probe {
        layer: SepLinear::new(
            rand_tensor(&mut rng, &[3, 5]),
            rand_tensor(&mut rng, &[4, 6]),
            rand_tensor(&mut rng, &[3, 6]),
        )
        .map_err(|e| e.to_string())?,
        x: rand_tensor(&mut rng, &[2, 5, 4]),
        visit: |l: &SepLinear<f64>, f| l.visit_params(&mut |n, t| f(&format!("sl.{n}"), t)),
        visit_mut: |l: &mut SepLinear<f64>, f| l.visit_params_mut(&mut |n, t| f(&format!("sl.{n}"), t)),
    };
    let r = grad_check(
        &mut sl,
        |p| {
            zero_all(p);
            let (dx, mut g) = p.layer.backward(&p.x, &u).expect("shapes");
            if fault == Some(Fault::SlBackward) {
                g.w1.iter_mut().for_each(|v| *v *= 1.05);
            }
            p.layer.accumulate(&g);
            p.x.add_grad(&dx.data);
            dot(&p.layer.forward(&p.x).expect("shapes"), &u)
        },
        |p| dot(&p.layer.forward(&p.x).expect("shapes"), &u),
        &strict,
    );
    check("sl", r, &mut lines)?;

    for mode in [Mode::Train, Mode::Eval] {
        let mut bn = BatchNorm::<f64>::new(3);
        bn.scale = rand_tensor(&mut rng, &[3]);
        bn.shift = rand_tensor(&mut rng, &[3]);
        bn.running_mean = rand_tensor(&mut rng, &[3]);
        bn.running_var.data = (0..3).map(|_| rng.random_range(0.5..1.5)).collect();
        let u = rand_tensor(&mut rng, &[2, 3, 4]);
        let mut probe = Probe {
            layer: bn,
            x: rand_tensor(&mut rng, &[2, 3, 4]),
            visit: |l: &BatchNorm<f64>, f| {
                f("bn.scale", &l.scale);
                f("bn.shift", &l.shift);
            },
            visit_mut: |l: &mut BatchNorm<f64>, f| {
                f("bn.scale", &mut l.scale);
                f("bn.shift", &mut l.shift);
            },
        };
        let r = grad_check(
            &mut probe,
            |p| {
                zero_all(p);
                let (y, cache, _) = p.layer.forward(&p.x, mode).expect("shapes");
                let (dx, g) = p.layer.backward(&cache, &u).expect("shapes");
                p.layer.accumulate(&g);
                p.x.add_grad(&dx.data);
                dot(&y, &u)
            },
            |p| dot(&p.layer.forward(&p.x, mode).expect("shapes").0, &u),
            &strict,
        );
        check(if mode == Mode::Train { "bn(train)" } else { "bn(eval)" }, r, &mut lines)?;
    }

    let arch = ArchDescriptor::shrunk();
    let noisy = random_image(&mut rng, 8, 8, 1);
    let clean = random_image(&mut rng, 8, 8, 1);
    let items = vec![Prepared::<f64>::new(&noisy, &arch).map_err(|e| e.to_string())?];
    let targets = vec![clean];
    let mut model = ModelParams::<f64>::init(arch, 7);
    model.visit_params_mut(&mut |name, t| {
        for v in t.data.iter_mut() {
            *v = if name == "beta" { 2.0 } else { *v + 0.3 * rng.random_range(-1.0..1.0) };
        }
    });
    let r = grad_check(
        &mut model,
        |m| {
            m.zero_grads();
            let (out, trace, _) = forward_batch(m, &items, Mode::Train).expect("forward");
            let (l, d) = mse_loss(&out, &targets).expect("loss");
            backward_batch(m, &items, &trace, &d).expect("backward");
            l
        },
        |m| mse_loss(&forward_batch(m, &items, Mode::Train).expect("forward").0, &targets).expect("loss").0,
        &GradCheckOptions {
            tolerance: 1e-4,
            max_coords_per_tensor: Some(4),
            ..Default::default()
        },
    );
    check("network", r, &mut lines)?;
    Ok(lines.join(", "))
}

/// `(W2^T kron W1) vec(Z) + vec(B)` with column-major `vec`.
fn kronecker_apply(w1: &Tensor<f64>, w2: &Tensor<f64>, b: &Tensor<f64>, z: &[f64]) -> Vec<f64> {
    let (or, ir) = (w1.dims[0], w1.dims[1]);
    let (ic, oc) = (w2.dims[0], w2.dims[1]);
    let (rows, cols) = (or * oc, ir * ic);
    let mut kron = vec![0.0; rows * cols];
    for bi in 0..oc {
        for bj in 0..ic {
            let s = w2.data[bj * oc + bi];
            for i in 0..or {
                for j in 0..ir {
                    kron[(bi * or + i) * cols + bj * ir + j] = s * w1.data[i * ir + j];
                }
            }
        }
    }
    let vz: Vec<f64> = (0..cols).map(|q| z[(q % ir) * ic + q / ir]).collect();
    let mut out = vec![0.0; rows];
    for (r, o) in out.iter_mut().enumerate() {
        *o = kron[r * cols..(r + 1) * cols].iter().zip(&vz).map(|(a, b)| a * b).sum::<f64>() + b.data[(r % or) * oc + r / or];
    }
    // Back to row-major `or x oc`.
    (0..rows).map(|q| out[(q % oc) * or + q / oc]).collect()
}

fn kronecker_suite() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0x4b50);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (ir, or, ic, oc) = (
            rng.random_range(1..7),
            rng.random_range(1..7),
            rng.random_range(1..7),
            rng.random_range(1..7),
        );
        let layer = SepLinear::new(
            rand_tensor(&mut rng, &[or, ir]),
            rand_tensor(&mut rng, &[ic, oc]),
            rand_tensor(&mut rng, &[or, oc]),
        )
        .map_err(|e| e.to_string())?;
        let z = rand_tensor(&mut rng, &[1, ir, ic]);
        let got = layer.forward(&z).map_err(|e| e.to_string())?;
        let want = kronecker_apply(&layer.w1, &layer.w2, &layer.b, &z.data);
        for (a, b) in got.data.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        if worst > 1e-12 {
            return Err(format!("shape ({ir}x{ic}) -> ({or}x{oc}): difference {worst:.2e}"));
        }
    }
    Ok(format!("100 shapes, max difference {worst:.1e}"))
}

/// Solves `A x = y` by Gaussian elimination with partial pivoting.
fn dense_solve(mut a: Vec<f64>, mut y: Vec<f64>) -> Vec<f64> {
    let n = y.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs())).expect("rows");
        for c in 0..n {
            a.swap(col * n + c, piv * n + c);
        }
        y.swap(col, piv);
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f != 0.0 {
                for c in col..n {
                    a[r * n + c] -= f * a[col * n + c];
                }
                y[r] -= f * y[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r * n + c] * x[c]).sum();
        x[r] = (y[r] - s) / a[r * n + r];
    }
    x
}

fn aggregation_suite() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0xa66);
    let (h, w, side) = (10usize, 10usize, 3usize);
    let cfg = PatchConfig {
        patch_side: side,
        channels: 1,
        k: 2,
        window: 3,
    };
    let half = side / 2;
    let centers: Vec<(usize, usize)> = (half..h - half).flat_map(|r| (half..w - half).map(move |c| (r, c))).collect();
    let patches: Vec<((usize, usize), Vec<f64>)> = centers
        .iter()
        .map(|&c| (c, (0..side * side).map(|_| rng.random::<f64>()).collect()))
        .collect();
    let weights: Vec<f64> = centers.iter().map(|_| rng.random_range(0.1..2.0)).collect();
    let got = aggregate(&patches, &weights, (h, w, 1), &cfg, 1, false).map_err(|e| e.to_string())?;
    // sum_i w_i R_i^T R_i x = sum_i w_i R_i^T p_i, with R_i as explicit selection rows.
    let npx = h * w;
    let mut a = vec![0.0; npx * npx];
    let mut y = vec![0.0; npx];
    for ((center, p), &wt) in patches.iter().zip(&weights) {
        let rows: Vec<usize> = (0..side * side)
            .map(|q| (center.0 + q / side - half) * w + center.1 + q % side - half)
            .collect();
        for (q, &pix) in rows.iter().enumerate() {
            a[pix * npx + pix] += wt;
            y[pix] += wt * p[q];
        }
    }
    let want = dense_solve(a, y);
    let err = got.data.iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    if err > 1e-9 {
        return Err(format!("weighted aggregation differs from the dense solve by {err:.2e}"));
    }
    let img = random_image(&mut rng, h, w, 1);
    let truth: Vec<((usize, usize), Vec<f64>)> = centers
        .iter()
        .map(|&(r, c)| {
            let p = (0..side * side).map(|q| img.get(r + q / side - half, c + q % side - half, 0)).collect();
            ((r, c), p)
        })
        .collect();
    let back = aggregate(&truth, &vec![1.0; centers.len()], (h, w, 1), &cfg, 1, false).map_err(|e| e.to_string())?;
    let inv = back.data.iter().zip(&img.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    if inv > 1e-12 {
        return Err(format!("aggregating true patches is off by {inv:.2e}"));
    }
    Ok(format!("dense oracle {err:.1e}, left inverse {inv:.1e}"))
}

fn brute_force(plane: &PaddedImage<f64>, center: (usize, usize), cfg: &PatchConfig) -> PatchGroup {
    let half = (cfg.window / 2) as isize;
    let seed = plane.patch(center, cfg.patch_side).expect("inside");
    let mut all = Vec::new();
    for r in 0..plane.height {
        for c in 0..plane.width {
            let near = (r as isize - center.0 as isize).abs() <= half && (c as isize - center.1 as isize).abs() <= half;
            if near && (r, c) != center {
                let p = plane.patch((r, c), cfg.patch_side).expect("inside");
                let d: f64 = seed.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
                all.push((d, r * plane.width + c, (r, c)));
            }
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mean = seed.iter().sum::<f64>() / seed.len() as f64;
    let var = seed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (seed.len() - 1) as f64;
    let mut members = vec![center];
    let mut dist = vec![var];
    for (d, _, m) in all.into_iter().take(cfg.k - 1) {
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

fn knn_suite() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0x4e4e);
    let cfg = PatchConfig {
        patch_side: 5,
        channels: 1,
        k: 6,
        window: 11,
    };
    let images = 50;
    for i in 0..images {
        // Quantized values produce exact distance ties.
        let img = random_image(&mut rng, 16, 16, 1).map(|v| (v * 4.0).floor() / 4.0);
        let plane = PaddedImage::new(&img, cfg.margin()).map_err(|e| e.to_string())?;
        let groups = group_all(&plane, &cfg).map_err(|e| e.to_string())?;
        for g in groups {
            let want = brute_force(&plane, g.seed, &cfg);
            if g != want {
                return Err(format!("image {i}, seed {:?}: {:?} vs {:?}", g.seed, g.members, want.members));
            }
        }
    }
    Ok(format!("{images} images of 16x16, every pixel"))
}

fn param_count_suite() -> Outcome {
    let full = ArchDescriptor::gray(Variant::Full);
    let small = ArchDescriptor::gray(Variant::Small);
    let tally = |a: ArchDescriptor| ModelParams::<f32>::init(a, 0).param_count();
    let (nf, ns) = (tally(full), tally(small));
    if nf != count_params(&full) || ns != count_params(&small) {
        return Err(format!(
            "descriptor counts {} / {} disagree with instantiated {nf} / {ns}",
            count_params(&full),
            count_params(&small)
        ));
    }
    for (got, table) in [(nf, 61_600.0), (ns, 40_200.0)] {
        let rel = (got as f64 - table).abs() / table;
        if rel > 0.02 {
            return Err(format!("{got} parameters is {:.1}% away from {table}", 100.0 * rel));
        }
    }
    let mut removed = 0;
    ModelParams::<f32>::init(full, 0).visit_params(&mut |name, t| {
        if ["s1.tbr1.", "s2.tbr1.", "fuse.tbr3."].iter().any(|p| name.starts_with(p)) {
            removed += t.len();
        }
    });
    if nf - ns != removed {
        return Err(format!("variants differ by {} but the removed blocks hold {removed}", nf - ns));
    }
    Ok(format!("full {nf}, small {ns}, removed blocks {removed}"))
}

fn pyramid_suite() -> Outcome {
    let mut img = Image::<f64>::zeros(9, 9, 1);
    img.set(4, 4, 0, 1.0);
    let f = lowpass(&img, 1);
    let taps = [1.0, 2.0, 1.0];
    for r in 0..9 {
        for c in 0..9 {
            let (dr, dc) = (r as isize - 4, c as isize - 4);
            let want = if dr.abs() <= 1 && dc.abs() <= 1 {
                taps[(dr + 1) as usize] * taps[(dc + 1) as usize] / 16.0
            } else {
                0.0
            };
            if f.get(r, c, 0) != want {
                return Err(format!("impulse response at ({r}, {c}) is {} not {want}", f.get(r, c, 0)));
            }
        }
    }
    Ok("3x3 binomial impulse response".into())
}
