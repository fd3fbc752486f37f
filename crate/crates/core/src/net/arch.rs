//! Architecture descriptor and the layer-size table derived from it.

use crate::patch::PatchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Full network.
    Full,
    /// Reduced network without the second per-scale block and the second fusion block.
    Small,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "lidia",
            Variant::Small => "lidia-s",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s.to_ascii_lowercase().as_str() {
            "lidia" | "full" => Some(Variant::Full),
            "lidia-s" | "lidia_s" | "small" => Some(Variant::Small),
            _ => None,
        }
    }
}

/// Everything that fixes the shapes of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub variant: Variant,
    /// Patch side; `n = patch_side^2 * channels`.
    pub patch_side: usize,
    pub channels: usize,
    /// Group size.
    pub k: usize,
    /// Feature rows inside the per-scale and fusion blocks.
    pub feature_dim: usize,
    /// Default search window stored with the model.
    pub window: usize,
    /// Use one weight net for both scales instead of one per scale.
    pub share_weight_net: bool,
}

/// Shape of one separable layer: `in_rows x in_cols -> out_rows x out_cols`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlSpec {
    pub name: String,
    pub in_rows: usize,
    pub out_rows: usize,
    pub in_cols: usize,
    pub out_cols: usize,
    pub batch_norm: bool,
}

impl SlSpec {
    /// `W1`, `W2`, `B` and, when present, the batch-norm scale and shift.
    pub fn param_count(&self) -> usize {
        self.out_rows * self.in_rows
            + self.in_cols * self.out_cols
            + self.out_rows * self.out_cols
            + if self.batch_norm { 2 * self.out_rows } else { 0 }
    }
}

/// Number of fully connected layers in a weight net.
pub const WEIGHT_NET_DEPTH: usize = 7;

impl ArchDescriptor {
    /// Grayscale network: 7x7 patches, 14-member groups, 64 features.
    pub fn gray(variant: Variant) -> Self {
        ArchDescriptor {
            variant,
            patch_side: 7,
            channels: 1,
            k: 14,
            feature_dim: 64,
            window: PatchConfig::DEFAULT_WINDOW,
            share_weight_net: false,
        }
    }

    /// Color network: 5x5x3 patches, 80 features.
    pub fn color(variant: Variant) -> Self {
        ArchDescriptor {
            variant,
            patch_side: 5,
            channels: 3,
            k: 14,
            feature_dim: 80,
            window: PatchConfig::DEFAULT_WINDOW,
            share_weight_net: false,
        }
    }

    /// Small grayscale configuration for quick training runs:
    /// 5x5 patches, groups of 6, 16 features, 11x11 search.
    pub fn tiny() -> Self {
        ArchDescriptor {
            variant: Variant::Full,
            patch_side: 5,
            channels: 1,
            k: 6,
            feature_dim: 16,
            window: 11,
            share_weight_net: false,
        }
    }

    /// Smallest useful configuration, for gradient checks:
    /// 3x3 patches, groups of 3, 8 features, 5x5 search.
    pub fn shrunk() -> Self {
        ArchDescriptor {
            variant: Variant::Full,
            patch_side: 3,
            channels: 1,
            k: 3,
            feature_dim: 8,
            window: 5,
            share_weight_net: false,
        }
    }

    pub fn n(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }

    pub fn fused_cols(&self) -> usize {
        4 * self.k
    }

    pub fn is_color(&self) -> bool {
        self.channels == 3
    }

    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig {
            patch_side: self.patch_side,
            channels: self.channels,
            k: self.k,
            window: self.window,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.patch_config().validate().map_err(|e| e.to_string())?;
        if self.feature_dim == 0 {
            return Err("feature dimension must be positive".into());
        }
        if self.k < 2 {
            return Err("group size must be at least 2".into());
        }
        Ok(())
    }

    /// Per-scale blocks for scale 1 or 2, in forward order.
    pub fn branch_layers(&self, scale: usize) -> Vec<SlSpec> {
        let (n, f, k) = (self.n(), self.feature_dim, self.k);
        let p = format!("s{scale}.");
        let mut v = vec![SlSpec {
            name: format!("{p}tr0"),
            in_rows: n,
            out_rows: f,
            in_cols: k,
            out_cols: k,
            batch_norm: false,
        }];
        if self.variant == Variant::Full {
            v.push(SlSpec {
                name: format!("{p}tbr1"),
                in_rows: f,
                out_rows: f,
                in_cols: k,
                out_cols: k,
                batch_norm: true,
            });
        }
        v.push(SlSpec {
            name: format!("{p}t_pre"),
            in_rows: f,
            out_rows: n,
            in_cols: k,
            out_cols: 1,
            batch_norm: false,
        });
        v.push(SlSpec {
            name: format!("{p}tr_post"),
            in_rows: n,
            out_rows: f,
            in_cols: 1,
            out_cols: k,
            batch_norm: false,
        });
        v
    }

    /// Fusion blocks, in forward order.
    pub fn fusion_layers(&self) -> Vec<SlSpec> {
        let (n, f, c) = (self.n(), self.feature_dim, self.fused_cols());
        let mut v = vec![SlSpec {
            name: "fuse.tbr2".into(),
            in_rows: f,
            out_rows: f,
            in_cols: c,
            out_cols: c,
            batch_norm: true,
        }];
        if self.variant == Variant::Full {
            v.push(SlSpec {
                name: "fuse.tbr3".into(),
                in_rows: f,
                out_rows: f,
                in_cols: c,
                out_cols: c,
                batch_norm: true,
            });
        }
        v.push(SlSpec {
            name: "fuse.t4".into(),
            in_rows: f,
            out_rows: n,
            in_cols: c,
            out_cols: 1,
            batch_norm: false,
        });
        v
    }

    /// All separable layers of the network.
    pub fn sl_layers(&self) -> Vec<SlSpec> {
        let mut v = self.branch_layers(1);
        v.extend(self.branch_layers(2));
        v.extend(self.fusion_layers());
        v
    }

    pub fn weight_net_count(&self) -> usize {
        if self.share_weight_net {
            1
        } else {
            2
        }
    }

    /// Seven `k x k` FC layers plus six `k`-channel batch norms.
    pub fn weight_net_params(&self) -> usize {
        let k = self.k;
        WEIGHT_NET_DEPTH * (k * k + k) + (WEIGHT_NET_DEPTH - 1) * 2 * k
    }
}

/// Learnable parameter count of a descriptor (batch-norm running statistics excluded).
pub fn count_params(arch: &ArchDescriptor) -> usize {
    arch.sl_layers().iter().map(SlSpec::param_count).sum::<usize>()
        + arch.weight_net_count() * arch.weight_net_params()
        + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn within(count: usize, target: f64, tol: f64) -> bool {
        ((count as f64) - target).abs() / target <= tol
    }

    #[test]
    fn gray_layer_table() {
        let a = ArchDescriptor::gray(Variant::Full);
        let shapes: Vec<_> = a
            .sl_layers()
            .iter()
            .map(|s| (s.name.clone(), (s.in_rows, s.out_rows), (s.in_cols, s.out_cols)))
            .collect();
        assert_eq!(shapes[0], ("s1.tr0".into(), (49, 64), (14, 14)));
        assert_eq!(shapes[1], ("s1.tbr1".into(), (64, 64), (14, 14)));
        assert_eq!(shapes[2], ("s1.t_pre".into(), (64, 49), (14, 1)));
        assert_eq!(shapes[3], ("s1.tr_post".into(), (49, 64), (1, 14)));
        assert_eq!(shapes[8], ("fuse.tbr2".into(), (64, 64), (56, 56)));
        assert_eq!(shapes[9], ("fuse.tbr3".into(), (64, 64), (56, 56)));
        assert_eq!(shapes[10], ("fuse.t4".into(), (64, 49), (56, 1)));
    }

    #[test]
    fn counts_match_reported_sizes() {
        let full = count_params(&ArchDescriptor::gray(Variant::Full));
        let small = count_params(&ArchDescriptor::gray(Variant::Small));
        let color = count_params(&ArchDescriptor::color(Variant::Full));
        assert_eq!(full, 61_984);
        assert_eq!(small, 40_408);
        assert_eq!(color, 94_590);
        assert!(within(full, 61_600.0, 0.02));
        assert!(within(small, 40_200.0, 0.02));
        assert!(within(color, 94_000.0, 0.02));
    }

    #[test]
    fn small_variant_drops_exactly_three_blocks() {
        let a = ArchDescriptor::gray(Variant::Full);
        let removed: usize = a
            .sl_layers()
            .iter()
            .filter(|s| s.name.ends_with("tbr1") || s.name == "fuse.tbr3")
            .map(SlSpec::param_count)
            .sum();
        assert_eq!(
            count_params(&a) - count_params(&ArchDescriptor::gray(Variant::Small)),
            removed
        );
    }

    #[test]
    fn color_uses_wider_transforms() {
        let a = ArchDescriptor::color(Variant::Full);
        let l = a.sl_layers();
        assert_eq!((l[0].in_rows, l[0].out_rows), (75, 80));
        assert_eq!((l[1].in_rows, l[1].out_rows), (80, 80));
        assert_eq!((l[2].in_rows, l[2].out_rows), (80, 75));
    }
}
