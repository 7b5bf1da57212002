//! Class-aware samplers and deterministic batch streams.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::ClassCounts;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Every class equally likely.
    ClassBalanced,
    /// Proportional to class frequency; the natural long-tailed distribution.
    InstanceWise,
    /// Proportional to inverse class frequency.
    Reverse,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 3] = [
        SamplerKind::ClassBalanced,
        SamplerKind::InstanceWise,
        SamplerKind::Reverse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::ClassBalanced => "class_balanced",
            SamplerKind::InstanceWise => "instance_wise",
            SamplerKind::Reverse => "reverse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "class_balanced" | "cb" | "bs" => Ok(SamplerKind::ClassBalanced),
            "instance_wise" | "iw" | "is" => Ok(SamplerKind::InstanceWise),
            "reverse" | "rs" => Ok(SamplerKind::Reverse),
            other => Err(Error::invalid(
                "sampler",
                format!("unknown sampler {other:?}"),
            )),
        }
    }
}

/// Per-class sampling probabilities.
pub fn sampler_rates(kind: SamplerKind, counts: &ClassCounts) -> Vec<f64> {
    let c = counts.counts();
    match kind {
        SamplerKind::ClassBalanced => vec![1.0 / c.len() as f64; c.len()],
        SamplerKind::InstanceWise => {
            let total = counts.total() as f64;
            c.iter().map(|&n| n as f64 / total).collect()
        }
        SamplerKind::Reverse => {
            let inv: Vec<f64> = c.iter().map(|&n| 1.0 / n as f64).collect();
            let z: f64 = inv.iter().sum();
            inv.iter().map(|v| v / z).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub rates: Vec<f64>,
    pub counts: ClassCounts,
    pub seed: u64,
}

impl SamplerSpec {
    pub fn new(kind: SamplerKind, counts: &ClassCounts, seed: u64) -> Result<Self> {
        let spec = Self {
            kind,
            rates: sampler_rates(kind, counts),
            counts: counts.clone(),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.len() != self.counts.classes() {
            return Err(Error::invalid("rates", "one rate per class is required"));
        }
        if self.rates.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::invalid("rates", "every rate must be positive"));
        }
        let sum: f64 = self.rates.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("rates", format!("sum to {sum}, not 1")));
        }
        Ok(())
    }

    fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.rates
            .iter()
            .map(|r| {
                acc += r;
                acc
            })
            .collect()
    }
}

fn draw_class(cdf: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Draws `epoch_len` sample indices in batches of `batch_size` (the last batch
/// may be short). `class_index[c]` lists the dataset rows of class `c`.
/// The stream depends only on `(spec.seed, spec.kind, epoch)`.
pub fn draw_epoch(
    spec: &SamplerSpec,
    class_index: &[Vec<usize>],
    epoch: u64,
    epoch_len: usize,
    batch_size: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || epoch_len < batch_size {
        return Err(Error::invalid(
            "batch_size",
            format!("need epoch_len ({epoch_len}) >= batch_size ({batch_size}) >= 1"),
        ));
    }
    if class_index.len() != spec.rates.len() {
        return Err(Error::invalid(
            "class_index",
            "one index list per class is required",
        ));
    }
    if let Some(c) = class_index.iter().position(Vec::is_empty) {
        return Err(Error::invalid(
            "class_index",
            format!("class {c} has no samples"),
        ));
    }
    let cdf = spec.cdf();
    let mut rng = rng::stream(spec.seed, spec.kind.name(), epoch);
    let mut batches = Vec::with_capacity(epoch_len.div_ceil(batch_size));
    let mut remaining = epoch_len;
    while remaining > 0 {
        let n = remaining.min(batch_size);
        let batch = (0..n)
            .map(|_| {
                let members = &class_index[draw_class(&cdf, &mut rng)];
                members[rng.random_range(0..members.len())]
            })
            .collect();
        batches.push(batch);
        remaining -= n;
    }
    Ok(batches)
}

/// L1 distance between the empirical class frequencies of `num_draws` draws
/// and the target rates.
pub fn empirical_rate_error(spec: &SamplerSpec, num_draws: usize, rng: &mut Rng) -> Result<f64> {
    if num_draws == 0 {
        return Err(Error::invalid("num_draws", "must be at least 1"));
    }
    let cdf = spec.cdf();
    let mut hits = vec![0usize; cdf.len()];
    for _ in 0..num_draws {
        hits[draw_class(&cdf, rng)] += 1;
    }
    Ok(hits
        .iter()
        .zip(&spec.rates)
        .map(|(&h, &r)| (h as f64 / num_draws as f64 - r).abs())
        .sum())
}
