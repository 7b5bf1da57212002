//! Channel selection and feature-map fusion between the two stage-II branches.
//!
//! `p` is the fraction of channels *replaced*: channel `c` of the output comes
//! from the fusing (instance-wise, head-biased) branch when `c` is in the mask
//! and from the fused (class-balanced) branch otherwise. The number of replaced
//! channels is `floor(d * p)`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// A fresh uniform subset on every call.
    Random,
    First,
    Middle,
    Last,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 4] = [
        SelectionStrategy::First,
        SelectionStrategy::Middle,
        SelectionStrategy::Last,
        SelectionStrategy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::Random => "random",
            SelectionStrategy::First => "first",
            SelectionStrategy::Middle => "middle",
            SelectionStrategy::Last => "last",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("strategy", format!("unknown selection strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionMask {
    d: usize,
    replaced: Vec<usize>,
    strategy: SelectionStrategy,
}

impl FusionMask {
    pub fn channels(&self) -> usize {
        self.d
    }

    /// Sorted channel indices taken from the fusing branch.
    pub fn replaced(&self) -> &[usize] {
        &self.replaced
    }

    pub fn strategy(&self) -> SelectionStrategy {
        self.strategy
    }

    /// Per-channel flags, `true` where the fusing branch wins.
    pub fn from_donor(&self) -> Vec<bool> {
        let mut flags = vec![false; self.d];
        for &c in &self.replaced {
            flags[c] = true;
        }
        flags
    }
}

/// `floor(d * p)`, tolerant of representation error at exact integers.
pub fn replaced_count(d: usize, p: f64) -> usize {
    let exact = d as f64 * p;
    ((exact + exact.abs() * 1e-12).floor() as usize).min(d)
}

pub fn select_channels(
    d: usize,
    p: f64,
    strategy: SelectionStrategy,
    rng: &mut Rng,
) -> Result<FusionMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("p", format!("{p} is outside [0, 1]")));
    }
    if d == 0 {
        return Err(Error::invalid("d", "at least one channel is required"));
    }
    let k = replaced_count(d, p);
    let replaced = match strategy {
        SelectionStrategy::First => (0..k).collect(),
        SelectionStrategy::Middle => {
            let start = (d - k) / 2;
            (start..start + k).collect()
        }
        SelectionStrategy::Last => (d - k..d).collect(),
        SelectionStrategy::Random => {
            let mut perm: Vec<usize> = (0..d).collect();
            perm.shuffle(rng);
            perm.truncate(k);
            perm.sort_unstable();
            perm
        }
    };
    Ok(FusionMask {
        d,
        replaced,
        strategy,
    })
}

/// Non-mutating channel substitution over `(batch, d, h, w)` maps. The fusing
/// branch contributes only features; its labels never enter.
pub fn fuse_feature_maps(
    fused_branch: &Tensor,
    fusing_branch: &Tensor,
    mask: &FusionMask,
) -> Result<Tensor> {
    if fused_branch.rank() != 4 || fused_branch.dim(1) != mask.d {
        return Err(Error::shape(
            "fused branch",
            &[
                fused_branch.shape().first().copied().unwrap_or(0),
                mask.d,
                0,
                0,
            ],
            fused_branch.shape(),
        ));
    }
    fusing_branch.ensure_shape("fusing branch", fused_branch.shape())?;
    Ok(tape::fuse_values(
        fused_branch,
        fusing_branch,
        &mask.from_donor(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn r() -> crate::rng::Rng {
        rng::stream(0, "fusion-test", 0)
    }

    #[test]
    fn sequential_strategies() {
        let m = select_channels(10, 0.3, SelectionStrategy::First, &mut r()).unwrap();
        assert_eq!(m.replaced(), &[0, 1, 2]);
        let m = select_channels(8, 0.5, SelectionStrategy::Middle, &mut r()).unwrap();
        assert_eq!(m.replaced(), &[2, 3, 4, 5]);
        let m = select_channels(8, 0.25, SelectionStrategy::Last, &mut r()).unwrap();
        assert_eq!(m.replaced(), &[6, 7]);
    }

    #[test]
    fn count_truncates() {
        let m = select_channels(512, 0.3, SelectionStrategy::Random, &mut r()).unwrap();
        assert_eq!(m.replaced().len(), 153);
        assert_eq!(replaced_count(100, 0.29), 29);
        assert_eq!(replaced_count(7, 1.0), 7);
        assert_eq!(replaced_count(7, 0.0), 0);
    }

    #[test]
    fn p_out_of_range() {
        for p in [-0.01, 1.01, f64::NAN] {
            assert!(matches!(
                select_channels(4, p, SelectionStrategy::First, &mut r()),
                Err(Error::Validation { .. })
            ));
        }
    }

    fn maps(tag: f32) -> Tensor {
        let data = (0..2 * 4 * 2 * 2).map(|i| tag + i as f32).collect();
        Tensor::new(vec![2, 4, 2, 2], data).unwrap()
    }

    #[test]
    fn endpoint_ratios_are_identities() {
        let (a, b) = (maps(0.0), maps(100.0));
        let m0 = select_channels(4, 0.0, SelectionStrategy::Random, &mut r()).unwrap();
        assert!(fuse_feature_maps(&a, &b, &m0).unwrap().bit_eq(&a));
        let m1 = select_channels(4, 1.0, SelectionStrategy::Random, &mut r()).unwrap();
        assert!(fuse_feature_maps(&a, &b, &m1).unwrap().bit_eq(&b));
    }

    #[test]
    fn first_half_channels() {
        let a = Tensor::new(vec![1, 4, 1, 1], vec![10., 11., 12., 13.]).unwrap();
        let b = Tensor::new(vec![1, 4, 1, 1], vec![20., 21., 22., 23.]).unwrap();
        let m = select_channels(4, 0.5, SelectionStrategy::First, &mut r()).unwrap();
        let out = fuse_feature_maps(&a, &b, &m).unwrap();
        assert_eq!(out.data(), &[20., 21., 12., 13.]);
        assert_eq!(a.data(), &[10., 11., 12., 13.]);
    }

    #[test]
    fn shape_mismatch() {
        let m = select_channels(4, 0.5, SelectionStrategy::First, &mut r()).unwrap();
        let short = Tensor::zeros(&[1, 4, 2, 2]);
        assert!(matches!(
            fuse_feature_maps(&maps(0.0), &short, &m),
            Err(Error::Shape { .. })
        ));
        let m3 = select_channels(3, 0.5, SelectionStrategy::First, &mut r()).unwrap();
        assert!(fuse_feature_maps(&maps(0.0), &maps(1.0), &m3).is_err());
    }

    #[test]
    fn random_selection_is_uniform() {
        let mut g = r();
        let mut hits = [0usize; 16];
        let calls = 50_000;
        for _ in 0..calls {
            for &c in select_channels(16, 0.5, SelectionStrategy::Random, &mut g)
                .unwrap()
                .replaced()
            {
                hits[c] += 1;
            }
        }
        for h in hits {
            assert!((h as f64 / calls as f64 - 0.5).abs() < 0.02);
        }
    }

    proptest! {
        #[test]
        fn every_channel_comes_from_exactly_one_side(
            d in 1usize..24,
            p in 0.0f64..=1.0,
            strat in 0usize..4,
            seed in any::<u64>(),
        ) {
            let strategy = SelectionStrategy::ALL[strat];
            let mut g = rng::stream(seed, "prop", 0);
            let m = select_channels(d, p, strategy, &mut g).unwrap();
            prop_assert_eq!(m.replaced().len(), replaced_count(d, p));
            prop_assert!(m.replaced().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(m.replaced().iter().all(|&c| c < d));

            let a = Tensor::new(vec![2, d, 1, 2], (0..4 * d).map(|i| i as f32).collect()).unwrap();
            let b = Tensor::new(vec![2, d, 1, 2], (0..4 * d).map(|i| -1.0 - i as f32).collect()).unwrap();
            let out = fuse_feature_maps(&a, &b, &m).unwrap();
            let flags = m.from_donor();
            for n in 0..2 {
                for (c, &take) in flags.iter().enumerate() {
                    let s = (n * d + c) * 2;
                    let src = if take { &b } else { &a };
                    for j in s..s + 2 {
                        prop_assert_eq!(out.data()[j].to_bits(), src.data()[j].to_bits());
                    }
                }
            }
        }
    }
}
