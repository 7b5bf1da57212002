//! Acceptance gate. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use h2t_core::data::{synth_gaussian_longtail, ClassCounts, Split};
use h2t_core::diagnostics::{
    evaluate, prediction_histogram, rationale_implication_test, split_mass,
};
use h2t_core::experiment::{
    cmd_ablate_sampler, cmd_ablate_selection, cmd_diagnose, cmd_gen_data, cmd_sweep_p, cmd_train,
    median, prepare_data, run_stage1, ExperimentConfig, MANIFEST,
};
use h2t_core::fusion::{fuse_feature_maps, replaced_count, select_channels, SelectionStrategy};
use h2t_core::gradcheck::finite_diff_check_with;
use h2t_core::model::{BackboneSpec, ModelState};
use h2t_core::rng;
use h2t_core::sampling::{empirical_rate_error, SamplerKind, SamplerSpec};
use h2t_core::tape::Tape;
use h2t_core::train::{
    assert_frozen_backbone, finetune_stage2_h2t, finetune_stage2_plain, train_stage1_from,
    FusionSettings, TrainSchedule,
};
use h2t_core::{container, Tensor};
use rand::Rng as _;

type Outcome = Result<String, String>;

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    if t > limit {
        Err(format!(
            "took {:.1}s, limit {:.0}s",
            t.as_secs_f64(),
            limit.as_secs_f64()
        ))
    } else {
        Ok(())
    }
}

fn random_tensor(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    for i in 0..100u64 {
        let mut r = rng::stream(i, "acceptance.gradcheck", 0);
        let classes = r.random_range(2..5);
        let batch = r.random_range(2..5);
        let spec = if i % 2 == 0 {
            BackboneSpec::Mlp {
                in_dims: r.random_range(2..6),
                hidden: vec![r.random_range(2..6)],
                feature_dim: r.random_range(2..7),
            }
        } else {
            BackboneSpec::TinyConv {
                in_channels: r.random_range(1..3),
                height: 4,
                width: r.random_range(4..6),
                hidden_channels: r.random_range(1..3),
                feature_dim: r.random_range(2..4),
            }
        };
        let model =
            ModelState::init(spec.clone(), classes, i % 3 == 0, i).map_err(|e| e.to_string())?;
        let x = random_tensor(&[batch, spec.in_dims()], &mut r);
        let donor = random_tensor(&[batch, spec.in_dims()], &mut r);
        let y: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes)).collect();
        let fused_path = i % 4 >= 2;
        let p = r.random_range(0.0..=1.0);
        let mask = select_channels(spec.feature_dim(), p, SelectionStrategy::Random, &mut r)
            .map_err(|e| e.to_string())?
            .from_donor();
        let report = finite_diff_check_with(&model, 3e-3, 24, |m: &ModelState, tape: &mut Tape| {
            let xv = tape.input(x.clone());
            let a = m.forward_features(tape, xv)?;
            let pooled = if fused_path {
                let dv = tape.input(donor.clone());
                let b = m.forward_features(tape, dv)?;
                let mixed = tape.fuse(a.feature_map, b.feature_map, &mask)?;
                tape.global_avg_pool(mixed)?
            } else {
                a.pooled
            };
            let z = m.forward_logits(tape, pooled)?;
            tape.softmax_xent(z, &y)
        })
        .map_err(|e| e.to_string())?;
        worst = worst.max(report.max_relative_error);
        checked += report.checked;
        skipped += report.skipped_kinks;
    }
    within(Duration::from_secs(30), start)?;
    let detail = format!(
        "max relative error {worst:.2e} over {checked} entries ({skipped} kink-crossing skipped)"
    );
    if worst < 1e-3 && checked > 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sampler_fidelity() -> Outcome {
    let start = Instant::now();
    let counts = ExperimentConfig::default()
        .counts()
        .map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, kind) in SamplerKind::ALL.into_iter().enumerate() {
        let spec = SamplerSpec::new(kind, &counts, 0).map_err(|e| e.to_string())?;
        let mut r = rng::stream(0, "acceptance.sampler", i as u64);
        let e = empirical_rate_error(&spec, 100_000, &mut r).map_err(|e| e.to_string())?;
        ok &= e < 0.01;
        parts.push(format!("{} {e:.5}", kind.name()));
    }
    within(Duration::from_secs(5), start)?;
    let detail = format!("L1 error at 100000 draws: {}", parts.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fusion_exactness() -> Outcome {
    let mut r = rng::stream(0, "acceptance.fusion", 0);
    for trial in 0..1000 {
        let d = r.random_range(1..65);
        let p = match trial % 10 {
            0 => 0.0,
            1 => 1.0,
            _ => r.random_range(0.0..=1.0),
        };
        let strategy = SelectionStrategy::ALL[r.random_range(0..4)];
        let (b, h, w) = (
            r.random_range(1..4),
            r.random_range(1..3),
            r.random_range(1..3),
        );
        let a = random_tensor(&[b, d, h, w], &mut r);
        let src = random_tensor(&[b, d, h, w], &mut r);
        let mask = select_channels(d, p, strategy, &mut r).map_err(|e| e.to_string())?;
        if mask.replaced().len() != replaced_count(d, p)
            || mask.replaced().len() != (d as f64 * p).floor() as usize
        {
            return Err(format!(
                "d={d} p={p}: {} channels replaced",
                mask.replaced().len()
            ));
        }
        let out = fuse_feature_maps(&a, &src, &mask).map_err(|e| e.to_string())?;
        if p == 0.0 && !out.bit_eq(&a) {
            return Err(format!("d={d}: p=0 differs from the fused branch"));
        }
        if p == 1.0 && !out.bit_eq(&src) {
            return Err(format!("d={d}: p=1 differs from the fusing branch"));
        }
        let flags = mask.from_donor();
        let plane = h * w;
        for n in 0..b {
            for (c, &take) in flags.iter().enumerate() {
                let s = (n * d + c) * plane;
                let range = s..s + plane;
                let o = &out.data()[range.clone()];
                let from_a = o
                    .iter()
                    .zip(&a.data()[range.clone()])
                    .all(|(x, y)| x.to_bits() == y.to_bits());
                let from_b = o
                    .iter()
                    .zip(&src.data()[range])
                    .all(|(x, y)| x.to_bits() == y.to_bits());
                if from_a == from_b || from_b != take {
                    return Err(format!(
                        "d={d} p={p} {strategy:?}: channel {c} is not an exact copy of its source"
                    ));
                }
            }
        }
    }
    Ok("1000 random (d, p, strategy) triples exact".into())
}

fn freeze_contract() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for i in 0..10u64 {
        let mut r = rng::stream(i, "acceptance.freeze", 0);
        let conv = i % 2 == 1;
        let spec = if conv {
            BackboneSpec::TinyConv {
                in_channels: 1,
                height: 4,
                width: 4,
                hidden_channels: 2,
                feature_dim: 4,
            }
        } else {
            BackboneSpec::Mlp {
                in_dims: 4,
                hidden: vec![8],
                feature_dim: 8,
            }
        };
        let counts = ClassCounts::new(vec![40, 20, 8, 4]).unwrap();
        let data = synth_gaussian_longtail(&counts, spec.in_dims(), 3.0, i, 5)
            .map_err(|e| e.to_string())?;
        let sched = TrainSchedule {
            stage1_epochs: 2,
            stage2_epochs: r.random_range(1..4),
            batch_size: 16,
            stage2_lr: Some(r.random_range(0.001..0.1)),
            weight_decay: if i % 3 == 0 { 1e-4 } else { 0.0 },
            reinit_classifier: i % 4 == 0,
            seed: i,
            ..TrainSchedule::default()
        };
        let model = ModelState::init(spec.clone(), 4, i % 2 == 0, i).map_err(|e| e.to_string())?;
        let (stage1, _) =
            train_stage1_from(model, &data.train, &sched).map_err(|e| e.to_string())?;
        let ckpt = dir.path().join(format!("stage1_{i}.ckpt"));
        container::save_checkpoint(&ckpt, &stage1).map_err(|e| e.to_string())?;
        let fusion = FusionSettings {
            p: r.random_range(0.0..=1.0),
            strategy: SelectionStrategy::ALL[r.random_range(0..4)],
            fusing_sampler: SamplerKind::ALL[r.random_range(0..3)],
            seed: i,
            mask_seed: i + 100,
            ..FusionSettings::default()
        };
        let (stage2, _) = finetune_stage2_h2t(&stage1, &data.train, &sched, &fusion)
            .map_err(|e| e.to_string())?;
        let reloaded = container::load_checkpoint(&ckpt, spec).map_err(|e| e.to_string())?;
        let report = assert_frozen_backbone(&reloaded, &stage2).map_err(|e| e.to_string())?;
        if !report.passed {
            return Err(format!("config {i}: {:?} changed", report.first_difference));
        }
        if stage2
            .classifier
            .first_difference(&stage1.classifier)
            .is_none()
        {
            return Err(format!("config {i}: classifier did not train"));
        }
    }
    Ok("10 randomized stage-II runs left the backbone bit-identical".into())
}

fn rationale_algebra() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut total = 0;
    for (d, k) in [(8, 4), (16, 4), (16, 12)] {
        let mut r = rng::stream(0, "acceptance.rationale", (d * 100 + k) as u64);
        let rep = rationale_implication_test(100_000, d, k, &mut r).map_err(|e| e.to_string())?;
        total += rep.violations();
        parts.push(format!(
            "(d={d},k={k}) premises {}/{}/{} violations {}",
            rep.fused_part.premises_met,
            rep.retained_part.premises_met,
            rep.correct_tail.premises_met,
            rep.violations()
        ));
    }
    within(Duration::from_secs(20), start)?;
    let detail = parts.join("; ");
    if total == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct SeedRun {
    base: h2t_core::diagnostics::MetricsReport,
    h2t: h2t_core::diagnostics::MetricsReport,
    full: h2t_core::diagnostics::MetricsReport,
    reverse: h2t_core::diagnostics::MetricsReport,
    stage1_mass: [f64; 3],
}

fn seed_runs() -> Result<Vec<SeedRun>, String> {
    let s = |e: h2t_core::Error| e.to_string();
    (0..5u64)
        .map(|seed| {
            let cfg = ExperimentConfig::default().with_seed(seed);
            let prep = prepare_data(&cfg).map_err(s)?;
            let (stage1, _) = run_stage1(&cfg, &prep.data.train).map_err(s)?;
            let hist =
                prediction_histogram(&stage1, &prep.data.test, &prep.partition).map_err(s)?;
            let run = |p: f64, fusing: SamplerKind| {
                let fusion = FusionSettings {
                    p,
                    fusing_sampler: fusing,
                    ..cfg.fusion_settings()
                };
                let (m, _) =
                    finetune_stage2_h2t(&stage1, &prep.data.train, &cfg.schedule, &fusion)?;
                evaluate(&m, &prep.data.test, &prep.partition)
            };
            Ok(SeedRun {
                base: run(0.0, SamplerKind::InstanceWise).map_err(s)?,
                h2t: run(0.3, SamplerKind::InstanceWise).map_err(s)?,
                full: run(1.0, SamplerKind::InstanceWise).map_err(s)?,
                reverse: run(0.3, SamplerKind::Reverse).map_err(s)?,
                stage1_mass: split_mass(&hist, &prep.partition),
            })
        })
        .collect()
}

fn med(runs: &[SeedRun], f: impl Fn(&SeedRun) -> Option<f64>) -> f64 {
    median(&runs.iter().filter_map(f).collect::<Vec<_>>()).unwrap_or(f64::NAN)
}

fn qualitative_effect(runs: &[SeedRun], start: Instant) -> Outcome {
    within(Duration::from_secs(600), start)?;
    let tail_base = med(runs, |r| r.base.split(Split::Tail));
    let tail_h2t = med(runs, |r| r.h2t.split(Split::Tail));
    let head_base = med(runs, |r| r.base.split(Split::Head));
    let head_full = med(runs, |r| r.full.split(Split::Head));
    let all_is = med(runs, |r| Some(r.h2t.overall));
    let all_rs = med(runs, |r| Some(r.reverse.overall));
    let a = tail_h2t > tail_base;
    let b = head_full < head_base;
    let c = all_is >= all_rs;
    let detail = format!(
        "(a) tail p=0.3 {tail_h2t:.4} vs p=0 {tail_base:.4} [{}]; (b) head p=1 {head_full:.4} vs p=0 {head_base:.4} [{}]; (c) all BS+IS {all_is:.4} vs BS+RS {all_rs:.4} [{}]",
        pass(a),
        pass(b),
        pass(c)
    );
    if a && b && c {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "fail"
    }
}

fn head_collapse(runs: &[SeedRun]) -> Outcome {
    let head = med(runs, |r| Some(r.stage1_mass[0]));
    let tail = med(runs, |r| Some(r.stage1_mass[2]));
    let detail = format!("stage-I tail-sample prediction mass: head {head:.4}, tail {tail:.4}");
    if head > tail {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn manifest(dir: &Path) -> Result<String, String> {
    std::fs::read_to_string(dir.join(MANIFEST)).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let s = |e: h2t_core::Error| e.to_string();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::default().with_seed(7);
    cfg.schedule.stage1_epochs = 20;
    let seeds = [1u64, 2];
    let mut commands = 0;
    for pass in ["a", "b"] {
        let dir = root.path().join(pass);
        let jobs = if pass == "a" { 1 } else { 3 };
        cmd_gen_data(&cfg, &dir.join("gen")).map_err(s)?;
        cmd_train(&cfg, &dir.join("train"), None).map_err(s)?;
        cmd_train(
            &cfg,
            &dir.join("resume"),
            Some(&dir.join("train").join("stage1.ckpt")),
        )
        .map_err(s)?;
        cmd_diagnose(&dir.join("train")).map_err(s)?;
        cmd_sweep_p(&cfg, &[0.0, 0.3, 1.0], &seeds, &dir.join("sweep"), jobs).map_err(s)?;
        cmd_ablate_sampler(&cfg, &SamplerKind::ALL, &seeds, &dir.join("sampler"), jobs)
            .map_err(s)?;
        cmd_ablate_selection(
            &cfg,
            &SelectionStrategy::ALL,
            &seeds,
            &dir.join("selection"),
            jobs,
        )
        .map_err(s)?;
    }
    for sub in [
        "gen",
        "train",
        "resume",
        "train/diagnostics",
        "sweep",
        "sampler",
        "selection",
    ] {
        let a = manifest(&root.path().join("a").join(sub))?;
        let b = manifest(&root.path().join("b").join(sub))?;
        if a != b || a.trim().is_empty() {
            return Err(format!("{sub}: MANIFEST differs between identical runs"));
        }
        commands += 1;
    }
    Ok(format!("{commands} command outputs reproduced bit-identical MANIFESTs (sweeps with 1 vs 3 workers)"))
}

fn p0_equivalence() -> Outcome {
    let s = |e: h2t_core::Error| e.to_string();
    let mut cfg = ExperimentConfig::default();
    cfg.schedule.stage1_epochs = 10;
    let prep = prepare_data(&cfg).map_err(s)?;
    let (stage1, _) = run_stage1(&cfg, &prep.data.train).map_err(s)?;
    let (_, plain) = finetune_stage2_plain(
        &stage1,
        &prep.data.train,
        &cfg.schedule,
        SamplerKind::ClassBalanced,
        3,
    )
    .map_err(s)?;
    let mut worst = 0.0f32;
    for fusing in [SamplerKind::ClassBalanced, SamplerKind::InstanceWise] {
        let fusion = FusionSettings {
            p: 0.0,
            fusing_sampler: fusing,
            seed: 3,
            mask_seed: 3,
            ..FusionSettings::default()
        };
        let (_, fused) =
            finetune_stage2_h2t(&stage1, &prep.data.train, &cfg.schedule, &fusion).map_err(s)?;
        if fused.step_losses.len() != plain.step_losses.len() {
            return Err("step counts differ".into());
        }
        for (a, b) in fused.step_losses.iter().zip(&plain.step_losses) {
            worst = worst.max((a - b).abs());
        }
    }
    let detail = format!("{} steps, max |Δloss| {worst:.1e}", plain.step_losses.len());
    if worst <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| match &outcome {
        Ok(d) => println!("criterion {n} PASS {name}: {d}"),
        Err(d) => {
            failed += 1;
            println!("criterion {n} FAIL {name}: {d}");
        }
    };
    report(1, "gradient correctness", gradient_correctness());
    report(2, "sampler fidelity", sampler_fidelity());
    report(3, "fusion exactness", fusion_exactness());
    report(4, "freeze contract", freeze_contract());
    report(5, "rationale algebra", rationale_algebra());
    let start = Instant::now();
    match seed_runs() {
        Ok(runs) => {
            report(
                6,
                "qualitative fusion effect",
                qualitative_effect(&runs, start),
            );
            report(7, "stage-I head bias on tail samples", head_collapse(&runs));
        }
        Err(e) => {
            report(6, "qualitative fusion effect", Err(e.clone()));
            report(7, "stage-I head bias on tail samples", Err(e));
        }
    }
    report(8, "determinism", determinism());
    report(9, "p = 0 equivalence", p0_equivalence());
    if failed > 0 {
        println!("acceptance: {failed} of 9 criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all 9 criteria passed");
}
