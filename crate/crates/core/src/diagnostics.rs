//! Evaluation metrics, prediction histograms, decision-boundary grids and the
//! head/tail force analysis of the fused classifier.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{self, TENSOR_MAGIC};
use crate::data::{DatasetBundle, Split, SplitPartition};
use crate::error::{Error, Result};
use crate::fusion::FusionMask;
use crate::model::{pooled_features, predict_logits, ModelState, CLASSIFIER_WEIGHT};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: f64,
    pub head: Option<f64>,
    pub medium: Option<f64>,
    pub tail: Option<f64>,
    /// `None` for classes with no test samples.
    pub per_class: Vec<Option<f64>>,
    pub support: Vec<usize>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    pub fn from_predictions(
        labels: &[usize],
        predictions: &[usize],
        classes: usize,
        partition: &SplitPartition,
    ) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::shape(
                "predictions",
                &[labels.len()],
                &[predictions.len()],
            ));
        }
        if labels.is_empty() {
            return Err(Error::invalid("test set", "no samples to evaluate"));
        }
        if partition.assignment.len() != classes {
            return Err(Error::invalid(
                "partition",
                "one split tag per class is required",
            ));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= classes || p >= classes {
                return Err(Error::invalid(
                    "labels",
                    format!("class index outside 0..{classes}"),
                ));
            }
            confusion[y][p] += 1;
        }
        let support: Vec<usize> = confusion.iter().map(|row| row.iter().sum()).collect();
        let per_class = (0..classes)
            .map(|c| (support[c] > 0).then(|| confusion[c][c] as f64 / support[c] as f64))
            .collect();
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let split_acc = |split: Split| {
            let (hit, n) = partition
                .members(split)
                .fold((0, 0), |(h, n), c| (h + confusion[c][c], n + support[c]));
            (n > 0).then(|| hit as f64 / n as f64)
        };
        let report = Self {
            overall: correct as f64 / labels.len() as f64,
            head: split_acc(Split::Head),
            medium: split_acc(Split::Medium),
            tail: split_acc(Split::Tail),
            per_class,
            support,
            confusion,
        };
        report.check_consistency(partition)?;
        Ok(report)
    }

    pub fn split(&self, split: Split) -> Option<f64> {
        match split {
            Split::Head => self.head,
            Split::Medium => self.medium,
            Split::Tail => self.tail,
        }
    }

    /// Overall accuracy equals the confusion trace ratio, and each split
    /// accuracy is the support-weighted mean of its members' accuracies.
    pub fn check_consistency(&self, partition: &SplitPartition) -> Result<()> {
        let total: usize = self.support.iter().sum();
        let trace: usize = (0..self.confusion.len())
            .map(|c| self.confusion[c][c])
            .sum();
        if (self.overall - trace as f64 / total as f64).abs() > 1e-12 {
            return Err(Error::Invariant(
                "overall accuracy disagrees with confusion".into(),
            ));
        }
        for split in Split::ALL {
            let (num, den) = partition.members(split).fold((0.0, 0usize), |(a, n), c| {
                (
                    a + self.per_class[c].unwrap_or(0.0) * self.support[c] as f64,
                    n + self.support[c],
                )
            });
            let rebuilt = (den > 0).then(|| num / den as f64);
            let ok = match (rebuilt, self.split(split)) {
                (None, None) => true,
                (Some(a), Some(b)) => (a - b).abs() <= 1e-9,
                _ => false,
            };
            if !ok {
                return Err(Error::Invariant(format!(
                    "{} accuracy disagrees with per-class accuracies",
                    split.name()
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |a| format!("{a:.6}"));
        format!(
            "head,medium,tail,all\n{},{},{},{:.6}\n",
            fmt(self.head),
            fmt(self.medium),
            fmt(self.tail),
            self.overall
        )
    }
}

/// Argmax predictions, ties toward the lower class index.
pub fn predict(model: &ModelState, x: &Tensor) -> Result<Vec<usize>> {
    Ok(predict_logits(model, x)?.argmax_rows())
}

pub fn evaluate(
    model: &ModelState,
    test: &DatasetBundle,
    partition: &SplitPartition,
) -> Result<MetricsReport> {
    let predictions = predict(model, &test.features)?;
    MetricsReport::from_predictions(&test.labels, &predictions, model.classes, partition)
}

/// Frequency of each predicted label over the samples whose true class is a
/// tail class. Sums to one.
pub fn prediction_histogram(
    model: &ModelState,
    data: &DatasetBundle,
    partition: &SplitPartition,
) -> Result<Vec<f64>> {
    if partition.members(Split::Tail).next().is_none() {
        return Err(Error::invalid("partition", "there are no tail classes"));
    }
    let (x, _) = data.subset_by_label(|y| partition.of(y) == Split::Tail);
    if x.dim(0) == 0 {
        return Err(Error::invalid("data", "no samples from tail classes"));
    }
    let mut hist = vec![0.0; model.classes];
    let predictions = predict(model, &x)?;
    for &p in &predictions {
        hist[p] += 1.0;
    }
    let n = predictions.len() as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    Ok(hist)
}

/// Histogram mass falling on head, medium and tail classes.
pub fn split_mass(hist: &[f64], partition: &SplitPartition) -> [f64; 3] {
    let mut mass = [0.0; 3];
    for (c, &h) in hist.iter().enumerate() {
        let slot = match partition.of(c) {
            Split::Head => 0,
            Split::Medium => 1,
            Split::Tail => 2,
        };
        mass[slot] += h;
    }
    mass
}

// ---------------------------------------------------------------------------
// Force analysis.
//
// For a head class h and a tail class t, each vector is split by a channel
// mask into a retained part (kept from the original sample, written `r`) and a
// fused part (taken from the donor, written `u`). With w the classifier rows
// and f the features:
//
//   misclassified tail:   w_t·f_t < w_h·f_t
//   fused tail wins:      w_t^r·f_t^r + w_t^u·f_h^u > w_h^r·f_t^r + w_h^u·f_h^u
//   correct head:         w_h·f_h > w_t·f_h
//   correct tail:         w_t·f_t > w_h·f_t
//   fused head as head:   w_h^r·f_h^r + w_h^u·f_t^u > w_t^r·f_h^r + w_t^u·f_t^u
//
// Then
//   misclassified tail ∧ fused tail wins ⇒ w_h^u·Δu > w_t^u·Δu
//   correct head ∧ fused tail wins       ⇒ w_t^r·Δr > w_h^r·Δr
//   correct tail ∧ fused head as head    ⇒ w_t^r·Δr > w_h^r·Δr
// with Δu = f_t^u − f_h^u and Δr = f_t^r − f_h^r.
// ---------------------------------------------------------------------------

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `cos` of the angle between `a` and `b`; `None` when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    (na > 0.0 && nb > 0.0).then(|| dot(a, b) / (na * nb))
}

/// Classifier rows and features of one head/tail pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairVectors {
    pub w_head: Vec<f64>,
    pub w_tail: Vec<f64>,
    pub f_head: Vec<f64>,
    pub f_tail: Vec<f64>,
}

struct Parts {
    r: Vec<f64>,
    u: Vec<f64>,
}

fn split_parts(v: &[f64], fused: &[bool]) -> Parts {
    let mut p = Parts {
        r: Vec::new(),
        u: Vec::new(),
    };
    for (&x, &is_fused) in v.iter().zip(fused) {
        if is_fused {
            p.u.push(x);
        } else {
            p.r.push(x);
        }
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    PremiseFailed,
    Degenerate,
    Holds,
    Violated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialOutcome {
    pub fused_part: Outcome,
    pub retained_part: Outcome,
    pub correct_tail: Outcome,
}

const REL_TOL: f64 = 1e-6;

/// `lhs > rhs` up to a relative tolerance against the magnitude of the terms
/// that were summed to produce them.
fn strictly_greater(lhs: f64, rhs: f64, scale: f64) -> bool {
    lhs - rhs > -REL_TOL * scale.max(f64::MIN_POSITIVE)
}

fn judge(premises: bool, degenerate: bool, conclusion: bool) -> Outcome {
    match (degenerate, premises, conclusion) {
        (true, _, _) => Outcome::Degenerate,
        (false, false, _) => Outcome::PremiseFailed,
        (false, true, true) => Outcome::Holds,
        (false, true, false) => Outcome::Violated,
    }
}

/// Evaluates the three implications on one pair. `fused[c]` marks channel `c`
/// as belonging to the fused part.
pub fn check_trial(v: &PairVectors, fused: &[bool]) -> TrialOutcome {
    let (wh, wt) = (split_parts(&v.w_head, fused), split_parts(&v.w_tail, fused));
    let (fh, ft) = (split_parts(&v.f_head, fused), split_parts(&v.f_tail, fused));
    let du = sub(&ft.u, &fh.u);
    let dr = sub(&ft.r, &fh.r);

    let zt_tail = dot(&wt.r, &ft.r) + dot(&wt.u, &ft.u);
    let zh_tail = dot(&wh.r, &ft.r) + dot(&wh.u, &ft.u);
    let zt_head = dot(&wt.r, &fh.r) + dot(&wt.u, &fh.u);
    let zh_head = dot(&wh.r, &fh.r) + dot(&wh.u, &fh.u);
    // Tail sample with its fused part taken from the head sample, and the
    // head sample with its fused part taken from the tail sample.
    let zt_mix_tail = dot(&wt.r, &ft.r) + dot(&wt.u, &fh.u);
    let zh_mix_tail = dot(&wh.r, &ft.r) + dot(&wh.u, &fh.u);
    let zh_mix_head = dot(&wh.r, &fh.r) + dot(&wh.u, &ft.u);
    let zt_mix_head = dot(&wt.r, &fh.r) + dot(&wt.u, &ft.u);

    let misclassified_tail = zt_tail < zh_tail;
    let correct_tail = zt_tail > zh_tail;
    let correct_head = zh_head > zt_head;
    let fused_tail_wins = zt_mix_tail > zh_mix_tail;
    let fused_head_as_head = zh_mix_head > zt_mix_head;

    let scale = [
        zt_tail,
        zh_tail,
        zt_head,
        zh_head,
        zt_mix_tail,
        zh_mix_tail,
        zh_mix_head,
        zt_mix_head,
    ]
    .iter()
    .map(|z| z.abs())
    .fold(0.0, f64::max)
        + 1.0;
    let scale = scale * 4.0;

    let du_norm = norm(&du);
    let u_degenerate = du_norm == 0.0;
    let u_holds = strictly_greater(dot(&wh.u, &du), dot(&wt.u, &du), scale)
        && (u_degenerate
            || strictly_greater(
                norm(&wh.u) * cosine(&wh.u, &du).unwrap_or(0.0),
                norm(&wt.u) * cosine(&wt.u, &du).unwrap_or(0.0),
                scale / du_norm,
            ));
    let r_degenerate = norm(&dr) == 0.0;
    let r_holds = strictly_greater(dot(&wt.r, &dr), dot(&wh.r, &dr), scale);

    TrialOutcome {
        fused_part: judge(misclassified_tail && fused_tail_wins, u_degenerate, u_holds),
        retained_part: judge(correct_head && fused_tail_wins, r_degenerate, r_holds),
        correct_tail: judge(correct_tail && fused_head_as_head, r_degenerate, r_holds),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub premises_met: usize,
    pub holds: usize,
    pub violations: usize,
    pub degenerate: usize,
    pub skipped: usize,
}

impl Tally {
    fn add(&mut self, o: Outcome) {
        match o {
            Outcome::PremiseFailed => self.skipped += 1,
            Outcome::Degenerate => self.degenerate += 1,
            Outcome::Holds => {
                self.premises_met += 1;
                self.holds += 1;
            }
            Outcome::Violated => {
                self.premises_met += 1;
                self.violations += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImplicationReport {
    pub trials: usize,
    pub fused_part: Tally,
    pub retained_part: Tally,
    pub correct_tail: Tally,
}

impl ImplicationReport {
    pub fn violations(&self) -> usize {
        self.fused_part.violations + self.retained_part.violations + self.correct_tail.violations
    }
}

/// Draws `num_trials` Gaussian pairs in `d` dimensions; the last `d - split_k`
/// channels form the fused part.
pub fn rationale_implication_test(
    num_trials: usize,
    d: usize,
    split_k: usize,
    rng: &mut Rng,
) -> Result<ImplicationReport> {
    if split_k < 1 || split_k >= d {
        return Err(Error::invalid(
            "split_k",
            format!("need 1 <= k < d, got k = {split_k}, d = {d}"),
        ));
    }
    let fused: Vec<bool> = (0..d).map(|c| c >= split_k).collect();
    let mut report = ImplicationReport {
        trials: num_trials,
        fused_part: Tally::default(),
        retained_part: Tally::default(),
        correct_tail: Tally::default(),
    };
    let draw = |rng: &mut Rng| -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(rng)).collect() };
    for _ in 0..num_trials {
        let v = PairVectors {
            w_head: draw(rng),
            w_tail: draw(rng),
            f_head: draw(rng),
            f_tail: draw(rng),
        };
        let o = check_trial(&v, &fused);
        report.fused_part.add(o.fused_part);
        report.retained_part.add(o.retained_part);
        report.correct_tail.add(o.correct_tail);
    }
    Ok(report)
}

/// `|w|cos θ` projections of the head and tail classifier rows onto the
/// feature difference `f_t − f_h`, separately for the fused and retained
/// channels. Undefined (None) where the relevant difference has zero norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceProxies {
    pub fused_head: Option<f64>,
    pub fused_tail: Option<f64>,
    pub retained_tail: Option<f64>,
    pub retained_head: Option<f64>,
    pub cos_fused_head: Option<f64>,
    pub cos_fused_tail: Option<f64>,
    pub cos_retained_tail: Option<f64>,
    pub cos_retained_head: Option<f64>,
    /// `fused_head − fused_tail`.
    pub fused_gap: Option<f64>,
    /// `retained_tail − retained_head`.
    pub retained_gap: Option<f64>,
}

pub fn force_proxies(v: &PairVectors, fused: &[bool]) -> ForceProxies {
    let (wh, wt) = (split_parts(&v.w_head, fused), split_parts(&v.w_tail, fused));
    let (fh, ft) = (split_parts(&v.f_head, fused), split_parts(&v.f_tail, fused));
    let du = sub(&ft.u, &fh.u);
    let dr = sub(&ft.r, &fh.r);
    let project = |w: &[f64], d: &[f64]| {
        let n = norm(d);
        (n > 0.0).then(|| dot(w, d) / n)
    };
    let fused_head = project(&wh.u, &du);
    let fused_tail = project(&wt.u, &du);
    let retained_tail = project(&wt.r, &dr);
    let retained_head = project(&wh.r, &dr);
    ForceProxies {
        fused_head,
        fused_tail,
        retained_tail,
        retained_head,
        cos_fused_head: cosine(&wh.u, &du),
        cos_fused_tail: cosine(&wt.u, &du),
        cos_retained_tail: cosine(&wt.r, &dr),
        cos_retained_head: cosine(&wh.r, &dr),
        fused_gap: fused_head.zip(fused_tail).map(|(a, b)| a - b),
        retained_gap: retained_tail.zip(retained_head).map(|(a, b)| a - b),
    }
}

/// Force proxies on a trained model, with class-mean pooled training features
/// standing in for `f_h` and `f_t`.
pub fn rationale_measure(
    model: &ModelState,
    data: &DatasetBundle,
    mask: &FusionMask,
    head_class: usize,
    tail_class: usize,
) -> Result<ForceProxies> {
    let d = model.spec.feature_dim();
    if mask.channels() != d {
        return Err(Error::invalid(
            "mask",
            format!("covers {} channels, model has {d}", mask.channels()),
        ));
    }
    for c in [head_class, tail_class] {
        if c >= model.classes {
            return Err(Error::invalid(
                "class",
                format!("{c} outside 0..{}", model.classes),
            ));
        }
    }
    let mean_feature = |class: usize| -> Result<Vec<f64>> {
        let (x, _) = data.subset_by_label(|y| y == class);
        let n = x.dim(0);
        if n == 0 {
            return Err(Error::invalid("class", format!("{class} has no samples")));
        }
        let f = pooled_features(model, &x)?;
        let mut m = vec![0.0f64; d];
        for i in 0..n {
            for (acc, &v) in m.iter_mut().zip(f.row(i)) {
                *acc += v as f64;
            }
        }
        Ok(m.into_iter().map(|v| v / n as f64).collect())
    };
    let w = &model
        .classifier
        .get(CLASSIFIER_WEIGHT)
        .expect("classifier weight present")
        .value;
    let row = |c: usize| w.row(c).iter().map(|&v| v as f64).collect::<Vec<_>>();
    let v = PairVectors {
        w_head: row(head_class),
        w_tail: row(tail_class),
        f_head: mean_feature(head_class)?,
        f_tail: mean_feature(tail_class)?,
    };
    Ok(force_proxies(&v, &mask.from_donor()))
}

// ---------------------------------------------------------------------------
// Decision-boundary grids for 2-D inputs.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridBounds {
    pub x_min: f32,
    pub x_max: f32,
    pub y_min: f32,
    pub y_max: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryGrid {
    pub bounds: GridBounds,
    pub resolution: usize,
    pub xs: Vec<f32>,
    pub ys: Vec<f32>,
    /// Row-major: `labels[row * resolution + col]` is the prediction at
    /// `(xs[col], ys[row])`.
    pub labels: Vec<usize>,
}

fn linspace(lo: f32, hi: f32, n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f32 / (n - 1) as f32)
        .collect()
}

pub fn boundary_grid(
    model: &ModelState,
    bounds: GridBounds,
    resolution: usize,
) -> Result<BoundaryGrid> {
    if model.spec.in_dims() != 2 {
        return Err(Error::invalid(
            "model",
            format!(
                "boundary grids need 2-D inputs, model takes {}",
                model.spec.in_dims()
            ),
        ));
    }
    if resolution < 2 {
        return Err(Error::invalid("resolution", "must be at least 2"));
    }
    if !(bounds.x_min < bounds.x_max && bounds.y_min < bounds.y_max) {
        return Err(Error::invalid(
            "bounds",
            "min must be below max on both axes",
        ));
    }
    let xs = linspace(bounds.x_min, bounds.x_max, resolution);
    let ys = linspace(bounds.y_min, bounds.y_max, resolution);
    let mut points = Vec::with_capacity(2 * resolution * resolution);
    for &y in &ys {
        for &x in &xs {
            points.push(x);
            points.push(y);
        }
    }
    let labels = predict(
        model,
        &Tensor::new(vec![resolution * resolution, 2], points)?,
    )?;
    Ok(BoundaryGrid {
        bounds,
        resolution,
        xs,
        ys,
        labels,
    })
}

impl BoundaryGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,label\n");
        for (row, &y) in self.ys.iter().enumerate() {
            for (col, &x) in self.xs.iter().enumerate() {
                let _ = writeln!(out, "{x},{y},{}", self.labels[row * self.resolution + col]);
            }
        }
        out
    }

    /// Coloured cells for the grid plus one dot per sample.
    pub fn to_svg(&self, samples: Option<(&Tensor, &[usize])>) -> String {
        const PALETTE: [&str; 10] = [
            "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
            "#bcbd22", "#17becf",
        ];
        const SIZE: f32 = 600.0;
        let b = self.bounds;
        let sx = |x: f32| (x - b.x_min) / (b.x_max - b.x_min) * SIZE;
        let sy = |y: f32| SIZE - (y - b.y_min) / (b.y_max - b.y_min) * SIZE;
        let cell = SIZE / (self.resolution - 1) as f32;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
        );
        for (row, &y) in self.ys.iter().enumerate() {
            for (col, &x) in self.xs.iter().enumerate() {
                let label = self.labels[row * self.resolution + col];
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{}" fill-opacity="0.35"/>"#,
                    sx(x) - cell / 2.0,
                    sy(y) - cell / 2.0,
                    PALETTE[label % PALETTE.len()]
                );
            }
        }
        if let Some((x, labels)) = samples {
            for (i, &label) in labels.iter().enumerate() {
                let p = x.row(i);
                let _ = writeln!(
                    out,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" stroke="black" stroke-width="0.4"/>"#,
                    sx(p[0]),
                    sy(p[1]),
                    PALETTE[label % PALETTE.len()]
                );
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Pooled features of every sample, written as tensors `embeddings` and
/// `labels` in an H2TTENS1 container.
pub fn dump_embeddings(path: &Path, model: &ModelState, data: &DatasetBundle) -> Result<()> {
    let f = pooled_features(model, &data.features)?;
    let labels = Tensor::new(
        vec![data.len()],
        data.labels.iter().map(|&y| y as f32).collect(),
    )?;
    container::write_file(
        path,
        TENSOR_MAGIC,
        &[
            ("embeddings".to_string(), f),
            ("labels".to_string(), labels),
        ],
    )
}
