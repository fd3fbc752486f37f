//! The complete parameter set of one network instance.

use super::arch::{ArchDescriptor, SlSpec, Variant, WEIGHT_NET_DEPTH};
use crate::image_io::GaussianStream;
use crate::nn::{BatchNorm, BnStats, Linear, Parameterized, SepLinear, Tensor};
use crate::real::Real;

/// Separable layer followed by batch normalization (and a ReLU, applied by the network).
#[derive(Clone, Debug, PartialEq)]
pub struct Tbr<T> {
    pub sl: SepLinear<T>,
    pub bn: BatchNorm<T>,
}

/// `FC -> (BN -> ReLU -> FC) x 6`, mapping group distances to column weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightNet<T> {
    pub fc: Vec<Linear<T>>,
    pub bn: Vec<BatchNorm<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T> {
    /// `None` when the model shares the scale-1 weight net.
    pub weight_net: Option<WeightNet<T>>,
    pub tr0: SepLinear<T>,
    /// Absent in the small variant.
    pub tbr1: Option<Tbr<T>>,
    pub t_pre: SepLinear<T>,
    pub tr_post: SepLinear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fusion<T> {
    pub tbr2: Tbr<T>,
    /// Absent in the small variant.
    pub tbr3: Option<Tbr<T>>,
    pub t4: SepLinear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub arch: ArchDescriptor,
    pub scale1: Branch<T>,
    pub scale2: Branch<T>,
    pub fusion: Fusion<T>,
    /// Scalar sharpness of the final variance-based patch weights.
    pub beta: Tensor<T>,
}

struct Init {
    rng: GaussianStream,
}

impl Init {
    fn normal<T: Real>(&mut self, len: usize, std: f64) -> Vec<T> {
        (0..len).map(|_| T::of(std * self.rng.next_normal())).collect()
    }

    /// He-normal `W1`; `W2` is the identity when square, an average over
    /// columns when reducing to one column, and a broadcast when expanding.
    fn sl<T: Real>(&mut self, s: &SlSpec, zero_w1: bool) -> SepLinear<T> {
        let w1 = if zero_w1 {
            vec![T::zero(); s.out_rows * s.in_rows]
        } else {
            self.normal(s.out_rows * s.in_rows, (2.0 / s.in_rows as f64).sqrt())
        };
        let mut w2 = vec![T::zero(); s.in_cols * s.out_cols];
        if s.in_cols == s.out_cols {
            for i in 0..s.in_cols {
                w2[i * s.out_cols + i] = T::one();
            }
        } else if s.out_cols == 1 {
            w2.iter_mut().for_each(|v| *v = T::of(1.0 / s.in_cols as f64));
        } else {
            w2.iter_mut().for_each(|v| *v = T::one());
        }
        SepLinear {
            w1: Tensor::param(&[s.out_rows, s.in_rows], w1),
            w2: Tensor::param(&[s.in_cols, s.out_cols], w2),
            b: Tensor::param(&[s.out_rows, s.out_cols], vec![T::zero(); s.out_rows * s.out_cols]),
        }
    }

    /// Hidden layers are He-normal; the last layer starts at zero weights and
    /// unit bias, so every column weight is 1 at initialization.
    fn weight_net<T: Real>(&mut self, k: usize) -> WeightNet<T> {
        let fc = (0..WEIGHT_NET_DEPTH)
            .map(|i| {
                if i + 1 == WEIGHT_NET_DEPTH {
                    Linear {
                        w: Tensor::param(&[k, k], vec![T::zero(); k * k]),
                        b: Tensor::param(&[k], vec![T::one(); k]),
                    }
                } else {
                    Linear {
                        w: Tensor::param(&[k, k], self.normal(k * k, (2.0 / k as f64).sqrt())),
                        b: Tensor::param(&[k], vec![T::zero(); k]),
                    }
                }
            })
            .collect();
        let bn = (0..WEIGHT_NET_DEPTH - 1).map(|_| BatchNorm::new(k)).collect();
        WeightNet { fc, bn }
    }
}

impl<T: Real> ModelParams<T> {
    /// Fresh parameters. The residual head starts with a zero `W1`, so an
    /// untrained model returns its input patches unchanged.
    pub fn init(arch: ArchDescriptor, seed: u64) -> Self {
        let mut init = Init {
            rng: GaussianStream::new(seed),
        };
        let branch = |scale: usize, init: &mut Init| {
            let specs = arch.branch_layers(scale);
            let find = |suffix: &str| specs.iter().find(|s| s.name.ends_with(suffix)).expect("layer");
            let weight_net = if scale == 2 && arch.share_weight_net {
                None
            } else {
                Some(init.weight_net(arch.k))
            };
            Branch {
                weight_net,
                tr0: init.sl(find("tr0"), false),
                tbr1: (arch.variant == Variant::Full).then(|| Tbr {
                    sl: init.sl(find("tbr1"), false),
                    bn: BatchNorm::new(arch.feature_dim),
                }),
                t_pre: init.sl(find("t_pre"), false),
                tr_post: init.sl(find("tr_post"), false),
            }
        };
        let scale1 = branch(1, &mut init);
        let scale2 = branch(2, &mut init);
        let specs = arch.fusion_layers();
        let fusion = Fusion {
            tbr2: Tbr {
                sl: init.sl(&specs[0], false),
                bn: BatchNorm::new(arch.feature_dim),
            },
            tbr3: (arch.variant == Variant::Full).then(|| Tbr {
                sl: init.sl(&specs[1], false),
                bn: BatchNorm::new(arch.feature_dim),
            }),
            t4: init.sl(specs.last().expect("t4"), true),
        };
        ModelParams {
            arch,
            scale1,
            scale2,
            fusion,
            beta: Tensor::param(&[1], vec![T::zero()]),
        }
    }

    pub fn weight_net(&self, scale: usize) -> &WeightNet<T> {
        match (scale, &self.scale2.weight_net) {
            (2, Some(w)) => w,
            _ => self.scale1.weight_net.as_ref().expect("scale-1 weight net"),
        }
    }

    pub fn weight_net_mut(&mut self, scale: usize) -> &mut WeightNet<T> {
        if scale == 2 && self.scale2.weight_net.is_some() {
            self.scale2.weight_net.as_mut().expect("checked")
        } else {
            self.scale1.weight_net.as_mut().expect("scale-1 weight net")
        }
    }

    /// Prefix of the weight net used at `scale` (`s1` when shared).
    pub fn weight_net_prefix(&self, scale: usize) -> &'static str {
        if scale == 2 && self.scale2.weight_net.is_some() {
            "s2"
        } else {
            "s1"
        }
    }

    pub fn branch_mut(&mut self, scale: usize) -> &mut Branch<T> {
        if scale == 1 {
            &mut self.scale1
        } else {
            &mut self.scale2
        }
    }

    pub fn branch(&self, scale: usize) -> &Branch<T> {
        if scale == 1 {
            &self.scale1
        } else {
            &self.scale2
        }
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, t| t.zero_grad());
    }

    /// Batch-norm running statistics, by name.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.visit_bn(&mut |name, bn| {
            f(&format!("{name}.running_mean"), &bn.running_mean);
            f(&format!("{name}.running_var"), &bn.running_var);
        });
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.visit_bn_mut(&mut |name, bn| {
            f(&format!("{name}.running_mean"), &mut bn.running_mean);
            f(&format!("{name}.running_var"), &mut bn.running_var);
        });
    }

    pub fn visit_bn(&self, f: &mut dyn FnMut(&str, &BatchNorm<T>)) {
        for (scale, b) in [(1, &self.scale1), (2, &self.scale2)] {
            if let Some(w) = &b.weight_net {
                for (i, bn) in w.bn.iter().enumerate() {
                    f(&format!("s{scale}.wnet.bn{i}"), bn);
                }
            }
            if let Some(t) = &b.tbr1 {
                f(&format!("s{scale}.tbr1.bn"), &t.bn);
            }
        }
        f("fuse.tbr2.bn", &self.fusion.tbr2.bn);
        if let Some(t) = &self.fusion.tbr3 {
            f("fuse.tbr3.bn", &t.bn);
        }
    }

    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&str, &mut BatchNorm<T>)) {
        for (scale, b) in [(1, &mut self.scale1), (2, &mut self.scale2)] {
            if let Some(w) = &mut b.weight_net {
                for (i, bn) in w.bn.iter_mut().enumerate() {
                    f(&format!("s{scale}.wnet.bn{i}"), bn);
                }
            }
            if let Some(t) = &mut b.tbr1 {
                f(&format!("s{scale}.tbr1.bn"), &mut t.bn);
            }
        }
        f("fuse.tbr2.bn", &mut self.fusion.tbr2.bn);
        if let Some(t) = &mut self.fusion.tbr3 {
            f("fuse.tbr3.bn", &mut t.bn);
        }
    }

    /// Folds batch statistics from a training forward pass into the running averages.
    pub fn apply_bn_stats(&mut self, stats: &[(String, BnStats<T>)]) {
        for (name, s) in stats {
            let mut hit = false;
            self.visit_bn_mut(&mut |n, bn| {
                if n == name {
                    bn.update_running(s);
                    hit = true;
                }
            });
            debug_assert!(hit, "unknown batch norm {name}");
        }
    }

    /// Every tensor, parameters then buffers, for serialization.
    pub fn visit_all(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.visit_params(f);
        self.visit_buffers(f);
    }

    pub fn visit_all_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.visit_params_mut(f);
        self.visit_buffers_mut(f);
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::init(self.arch, 0);
        let mut src = Vec::new();
        self.visit_all(&mut |_, t| src.push(t.data.iter().map(|v| U::of(v.f64())).collect::<Vec<U>>()));
        let mut i = 0;
        out.visit_all_mut(&mut |_, t| {
            t.data = std::mem::take(&mut src[i]);
            i += 1;
        });
        out
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit_all(&mut |_, t| ok &= t.is_finite());
        ok
    }
}

fn visit_sl<T>(name: &str, l: &SepLinear<T>, f: &mut dyn FnMut(&str, &Tensor<T>)) {
    f(&format!("{name}.w1"), &l.w1);
    f(&format!("{name}.w2"), &l.w2);
    f(&format!("{name}.b"), &l.b);
}

fn visit_sl_mut<T>(name: &str, l: &mut SepLinear<T>, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
    f(&format!("{name}.w1"), &mut l.w1);
    f(&format!("{name}.w2"), &mut l.w2);
    f(&format!("{name}.b"), &mut l.b);
}

fn visit_bn_params<T>(name: &str, bn: &BatchNorm<T>, f: &mut dyn FnMut(&str, &Tensor<T>)) {
    f(&format!("{name}.scale"), &bn.scale);
    f(&format!("{name}.shift"), &bn.shift);
}

fn visit_bn_params_mut<T>(name: &str, bn: &mut BatchNorm<T>, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
    f(&format!("{name}.scale"), &mut bn.scale);
    f(&format!("{name}.shift"), &mut bn.shift);
}

impl<T> Parameterized<T> for ModelParams<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (scale, b) in [(1, &self.scale1), (2, &self.scale2)] {
            let p = format!("s{scale}");
            if let Some(w) = &b.weight_net {
                for (i, fc) in w.fc.iter().enumerate() {
                    f(&format!("{p}.wnet.fc{i}.w"), &fc.w);
                    f(&format!("{p}.wnet.fc{i}.b"), &fc.b);
                }
                for (i, bn) in w.bn.iter().enumerate() {
                    visit_bn_params(&format!("{p}.wnet.bn{i}"), bn, f);
                }
            }
            visit_sl(&format!("{p}.tr0"), &b.tr0, f);
            if let Some(t) = &b.tbr1 {
                visit_sl(&format!("{p}.tbr1"), &t.sl, f);
                visit_bn_params(&format!("{p}.tbr1.bn"), &t.bn, f);
            }
            visit_sl(&format!("{p}.t_pre"), &b.t_pre, f);
            visit_sl(&format!("{p}.tr_post"), &b.tr_post, f);
        }
        visit_sl("fuse.tbr2", &self.fusion.tbr2.sl, f);
        visit_bn_params("fuse.tbr2.bn", &self.fusion.tbr2.bn, f);
        if let Some(t) = &self.fusion.tbr3 {
            visit_sl("fuse.tbr3", &t.sl, f);
            visit_bn_params("fuse.tbr3.bn", &t.bn, f);
        }
        visit_sl("fuse.t4", &self.fusion.t4, f);
        f("beta", &self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (scale, b) in [(1, &mut self.scale1), (2, &mut self.scale2)] {
            let p = format!("s{scale}");
            if let Some(w) = &mut b.weight_net {
                for (i, fc) in w.fc.iter_mut().enumerate() {
                    f(&format!("{p}.wnet.fc{i}.w"), &mut fc.w);
                    f(&format!("{p}.wnet.fc{i}.b"), &mut fc.b);
                }
                for (i, bn) in w.bn.iter_mut().enumerate() {
                    visit_bn_params_mut(&format!("{p}.wnet.bn{i}"), bn, f);
                }
            }
            visit_sl_mut(&format!("{p}.tr0"), &mut b.tr0, f);
            if let Some(t) = &mut b.tbr1 {
                visit_sl_mut(&format!("{p}.tbr1"), &mut t.sl, f);
                visit_bn_params_mut(&format!("{p}.tbr1.bn"), &mut t.bn, f);
            }
            visit_sl_mut(&format!("{p}.t_pre"), &mut b.t_pre, f);
            visit_sl_mut(&format!("{p}.tr_post"), &mut b.tr_post, f);
        }
        visit_sl_mut("fuse.tbr2", &mut self.fusion.tbr2.sl, f);
        visit_bn_params_mut("fuse.tbr2.bn", &mut self.fusion.tbr2.bn, f);
        if let Some(t) = &mut self.fusion.tbr3 {
            visit_sl_mut("fuse.tbr3", &mut t.sl, f);
            visit_bn_params_mut("fuse.tbr3.bn", &mut t.bn, f);
        }
        visit_sl_mut("fuse.t4", &mut self.fusion.t4, f);
        f("beta", &mut self.beta);
    }
}
