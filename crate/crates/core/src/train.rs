//! Two-stage training: representation learning on instance-wise batches, then
//! classifier re-training on fused features with the backbone frozen.

use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::fusion::{select_channels, SelectionStrategy};
use crate::loss::softmax_xent_loss;
use crate::model::{BackboneSpec, ModelState};
use crate::optim::{apply_weight_decay, sgd_step};
use crate::rng;
use crate::sampling::{draw_epoch, SamplerKind, SamplerSpec};
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Initial stage-I learning rate.
    pub lr: f32,
    /// Constant stage-II learning rate; defaults to a tenth of the final
    /// stage-I rate.
    pub stage2_lr: Option<f32>,
    pub momentum: f32,
    pub batch_size: usize,
    /// Stage-I decay points as fractions of `stage1_epochs`.
    pub milestones: Vec<f64>,
    pub lr_decay: f32,
    pub weight_decay: f32,
    pub reinit_classifier: bool,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            stage1_epochs: 100,
            stage2_epochs: 10,
            lr: 0.1,
            stage2_lr: None,
            momentum: 0.9,
            batch_size: 64,
            milestones: vec![0.8, 0.9],
            lr_decay: 0.1,
            weight_decay: 0.0,
            reinit_classifier: false,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs == 0 {
            return Err(Error::invalid(
                "schedule.stage1_epochs",
                "must be at least 1",
            ));
        }
        if self.stage2_epochs == 0 {
            return Err(Error::invalid(
                "schedule.stage2_epochs",
                "must be at least 1",
            ));
        }
        // Zero is accepted so a run can be used as a null-update control.
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("schedule.lr", "must be finite and >= 0"));
        }
        if let Some(lr) = self.stage2_lr {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::invalid(
                    "schedule.stage2_lr",
                    "must be finite and >= 0",
                ));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("schedule.momentum", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("schedule.batch_size", "must be at least 1"));
        }
        if self.milestones.iter().any(|m| !(*m > 0.0 && *m <= 1.0)) {
            return Err(Error::invalid(
                "schedule.milestones",
                "fractions must lie in (0, 1]",
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("schedule.lr_decay", "must lie in (0, 1]"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid(
                "schedule.weight_decay",
                "must be finite and >= 0",
            ));
        }
        Ok(())
    }

    fn milestone_epochs(&self) -> Vec<usize> {
        self.milestones
            .iter()
            .map(|m| (m * self.stage1_epochs as f64).round() as usize)
            .collect()
    }

    /// Stage-I learning rate for a zero-based epoch.
    pub fn stage1_lr(&self, epoch: usize) -> f32 {
        let decays = self
            .milestone_epochs()
            .iter()
            .filter(|&&m| epoch >= m)
            .count();
        self.lr * self.lr_decay.powi(decays as i32)
    }

    pub fn stage2_lr(&self) -> f32 {
        self.stage2_lr
            .unwrap_or_else(|| 0.1 * self.stage1_lr(self.stage1_epochs - 1))
    }
}

/// Branch samplers, mask strategy and ratio for stage II.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSettings {
    /// Fraction of channels taken from the fusing branch.
    pub p: f64,
    pub strategy: SelectionStrategy,
    pub fused_sampler: SamplerKind,
    pub fusing_sampler: SamplerKind,
    /// Seeds the branch samplers and a re-initialized classifier.
    pub seed: u64,
    /// Seeds the random channel masks.
    pub mask_seed: u64,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self {
            p: 0.3,
            strategy: SelectionStrategy::Random,
            fused_sampler: SamplerKind::ClassBalanced,
            fusing_sampler: SamplerKind::InstanceWise,
            seed: 0,
            mask_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    pub epoch_losses: Vec<f32>,
    pub step_losses: Vec<f32>,
    pub learning_rates: Vec<f32>,
    pub config: serde_json::Value,
    pub backbone_digest: String,
    pub classifier_digest: String,
}

impl RunRecord {
    fn new(stage: &str, config: serde_json::Value) -> Self {
        Self {
            stage: stage.to_string(),
            epoch_losses: Vec::new(),
            step_losses: Vec::new(),
            learning_rates: Vec::new(),
            config,
            backbone_digest: String::new(),
            classifier_digest: String::new(),
        }
    }

    fn finish(mut self, model: &ModelState) -> Self {
        self.backbone_digest = model.backbone.digest();
        self.classifier_digest = model.classifier.digest();
        self
    }
}

fn diverged(stage: &str, epoch: usize, step: usize, loss: f32) -> Error {
    Error::Diverged {
        stage: stage.to_string(),
        epoch,
        step,
        loss,
    }
}

/// Turns numeric failures inside a step into a divergence report that names
/// the step.
fn step_error(stage: &str, epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(_) => diverged(stage, epoch, step, f32::NAN),
        other => other,
    }
}

fn check_batch_size(data: &DatasetBundle, sched: &TrainSchedule) -> Result<()> {
    if sched.batch_size > data.len() {
        return Err(Error::invalid(
            "schedule.batch_size",
            format!(
                "{} exceeds the {} training samples",
                sched.batch_size,
                data.len()
            ),
        ));
    }
    Ok(())
}

/// Stage I from a fresh He-uniform model without classifier bias.
pub fn train_stage1(
    data: &DatasetBundle,
    spec: BackboneSpec,
    sched: &TrainSchedule,
) -> Result<(ModelState, RunRecord)> {
    let model = ModelState::init(spec, data.classes(), false, sched.seed)?;
    train_stage1_from(model, data, sched)
}

/// Stage I: instance-wise batches, cross-entropy, SGD on every parameter.
pub fn train_stage1_from(
    mut model: ModelState,
    data: &DatasetBundle,
    sched: &TrainSchedule,
) -> Result<(ModelState, RunRecord)> {
    sched.validate()?;
    data.validate()?;
    check_batch_size(data, sched)?;
    if model.classes != data.classes() {
        return Err(Error::invalid(
            "model",
            "class count differs from the dataset",
        ));
    }
    model.backbone.set_trainable(true);
    model.classifier.set_trainable(true);
    model.zero_grad();

    let class_index = data.class_index();
    let sampler = SamplerSpec::new(
        SamplerKind::InstanceWise,
        &data.counts,
        rng::derive_seed(sched.seed, "stage1.sampler"),
    )?;
    let mut record = RunRecord::new("stage1", serde_json::to_value(sched)?);

    for epoch in 0..sched.stage1_epochs {
        let lr = sched.stage1_lr(epoch);
        let batches = draw_epoch(
            &sampler,
            &class_index,
            epoch as u64,
            data.len(),
            sched.batch_size,
        )?;
        let mut total = 0.0f64;
        for (step, batch) in batches.iter().enumerate() {
            let x = data.features.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let loss = (|| {
                let mut tape = Tape::new();
                let xv = tape.input(x);
                let feats = model.forward_features(&mut tape, xv)?;
                let z = model.forward_logits(&mut tape, feats.pooled)?;
                softmax_xent_loss(&mut tape, z, &y, &mut model)
            })()
            .map_err(|e| step_error("stage1", epoch, step, e))?;
            if !loss.is_finite() {
                return Err(diverged("stage1", epoch, step, loss));
            }
            apply_weight_decay(&mut model.backbone, sched.weight_decay);
            apply_weight_decay(&mut model.classifier, sched.weight_decay);
            sgd_step(&mut model.backbone, lr, sched.momentum);
            sgd_step(&mut model.classifier, lr, sched.momentum);
            record.step_losses.push(loss);
            total += loss as f64 * batch.len() as f64;
        }
        let mean = (total / data.len() as f64) as f32;
        log::debug!("stage1 epoch {epoch} lr {lr} loss {mean:.5}");
        record.epoch_losses.push(mean);
        record.learning_rates.push(lr);
    }
    let record = record.finish(&model);
    Ok((model, record))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeReport {
    pub passed: bool,
    pub first_difference: Option<String>,
}

/// Passes iff every backbone tensor is bit-identical. Classifier changes are
/// ignored.
pub fn assert_frozen_backbone(before: &ModelState, after: &ModelState) -> Result<FreezeReport> {
    if before.spec != after.spec {
        return Err(Error::invalid(
            "backbone spec",
            "models have different backbones",
        ));
    }
    let first_difference = before.backbone.first_difference(&after.backbone);
    Ok(FreezeReport {
        passed: first_difference.is_none(),
        first_difference,
    })
}

fn enter_stage2(model: &ModelState, sched: &TrainSchedule, seed: u64) -> ModelState {
    let mut model = model.clone();
    if sched.reinit_classifier {
        let bias = model.has_classifier_bias();
        model.init_classifier(bias, rng::derive_seed(seed, "stage2.classifier"));
    }
    model.backbone.set_trainable(false);
    model.classifier.set_trainable(true);
    model.classifier.reset_momentum();
    model.zero_grad();
    model
}

fn check_frozen(entry: &ModelState, model: &ModelState, epoch: usize) -> Result<()> {
    if let Some(name) = entry.backbone.first_difference(&model.backbone) {
        return Err(Error::Invariant(format!(
            "backbone parameter {name} changed during stage-II epoch {epoch}"
        )));
    }
    Ok(())
}

/// Stage II with feature fusion. Each step pairs a fused-branch batch with a
/// fusing-branch batch, swaps the masked channels of the fused-branch feature
/// map for those of the fusing branch, pools, classifies, and takes the loss
/// against the fused-branch labels. Only the classifier is updated.
pub fn finetune_stage2_h2t(
    model: &ModelState,
    data: &DatasetBundle,
    sched: &TrainSchedule,
    fusion: &FusionSettings,
) -> Result<(ModelState, RunRecord)> {
    sched.validate()?;
    data.validate()?;
    check_batch_size(data, sched)?;
    if !(0.0..=1.0).contains(&fusion.p) {
        return Err(Error::invalid(
            "fusion.p",
            format!("{} is outside [0, 1]", fusion.p),
        ));
    }
    let entry = enter_stage2(model, sched, fusion.seed);
    let mut model = entry.clone();
    let class_index = data.class_index();
    let fused = SamplerSpec::new(
        fusion.fused_sampler,
        &data.counts,
        rng::derive_seed(fusion.seed, "stage2.fused"),
    )?;
    let fusing = SamplerSpec::new(
        fusion.fusing_sampler,
        &data.counts,
        rng::derive_seed(fusion.seed, "stage2.fusing"),
    )?;
    let mut mask_rng = rng::stream(fusion.mask_seed, "stage2.mask", 0);
    let d = model.spec.feature_dim();
    let lr = sched.stage2_lr();
    let config = serde_json::json!({ "schedule": sched, "fusion": fusion });
    let mut record = RunRecord::new("stage2", config);

    for epoch in 0..sched.stage2_epochs {
        let e = epoch as u64;
        let fused_batches = draw_epoch(&fused, &class_index, e, data.len(), sched.batch_size)?;
        let fusing_batches = draw_epoch(&fusing, &class_index, e, data.len(), sched.batch_size)?;
        let mut total = 0.0f64;
        for (step, (fb, ib)) in fused_batches.iter().zip(&fusing_batches).enumerate() {
            let mask = select_channels(d, fusion.p, fusion.strategy, &mut mask_rng)?;
            let y: Vec<usize> = fb.iter().map(|&i| data.labels[i]).collect();
            let loss = (|| {
                let mut tape = Tape::new();
                let xb = tape.input(data.features.select_rows(fb));
                let xi = tape.input(data.features.select_rows(ib));
                let fb_feats = model.forward_features(&mut tape, xb)?;
                let fi_feats = model.forward_features(&mut tape, xi)?;
                let mixed = tape.fuse(
                    fb_feats.feature_map,
                    fi_feats.feature_map,
                    &mask.from_donor(),
                )?;
                let pooled = tape.global_avg_pool(mixed)?;
                let z = model.forward_logits(&mut tape, pooled)?;
                softmax_xent_loss(&mut tape, z, &y, &mut model)
            })()
            .map_err(|e| step_error("stage2", epoch, step, e))?;
            if !loss.is_finite() {
                return Err(diverged("stage2", epoch, step, loss));
            }
            apply_weight_decay(&mut model.classifier, sched.weight_decay);
            sgd_step(&mut model.classifier, lr, sched.momentum);
            sgd_step(&mut model.backbone, lr, sched.momentum);
            record.step_losses.push(loss);
            total += loss as f64 * fb.len() as f64;
        }
        check_frozen(&entry, &model, epoch)?;
        let mean = (total / data.len() as f64) as f32;
        log::debug!("stage2 epoch {epoch} loss {mean:.5}");
        record.epoch_losses.push(mean);
        record.learning_rates.push(lr);
    }
    let record = record.finish(&model);
    Ok((model, record))
}

/// Stage II without fusion: classifier re-training on fused-branch batches
/// alone. Uses the same sampler streams as [`finetune_stage2_h2t`].
pub fn finetune_stage2_plain(
    model: &ModelState,
    data: &DatasetBundle,
    sched: &TrainSchedule,
    fused_sampler: SamplerKind,
    seed: u64,
) -> Result<(ModelState, RunRecord)> {
    sched.validate()?;
    data.validate()?;
    check_batch_size(data, sched)?;
    let entry = enter_stage2(model, sched, seed);
    let mut model = entry.clone();
    let class_index = data.class_index();
    let fused = SamplerSpec::new(
        fused_sampler,
        &data.counts,
        rng::derive_seed(seed, "stage2.fused"),
    )?;
    let lr = sched.stage2_lr();
    let config =
        serde_json::json!({ "schedule": sched, "fused_sampler": fused_sampler, "seed": seed });
    let mut record = RunRecord::new("stage2_plain", config);

    for epoch in 0..sched.stage2_epochs {
        let batches = draw_epoch(
            &fused,
            &class_index,
            epoch as u64,
            data.len(),
            sched.batch_size,
        )?;
        let mut total = 0.0f64;
        for (step, fb) in batches.iter().enumerate() {
            let y: Vec<usize> = fb.iter().map(|&i| data.labels[i]).collect();
            let loss = (|| {
                let mut tape = Tape::new();
                let xb = tape.input(data.features.select_rows(fb));
                let feats = model.forward_features(&mut tape, xb)?;
                let z = model.forward_logits(&mut tape, feats.pooled)?;
                softmax_xent_loss(&mut tape, z, &y, &mut model)
            })()
            .map_err(|e| step_error("stage2", epoch, step, e))?;
            if !loss.is_finite() {
                return Err(diverged("stage2", epoch, step, loss));
            }
            apply_weight_decay(&mut model.classifier, sched.weight_decay);
            sgd_step(&mut model.classifier, lr, sched.momentum);
            sgd_step(&mut model.backbone, lr, sched.momentum);
            record.step_losses.push(loss);
            total += loss as f64 * fb.len() as f64;
        }
        check_frozen(&entry, &model, epoch)?;
        record.epoch_losses.push((total / data.len() as f64) as f32);
        record.learning_rates.push(lr);
    }
    let record = record.finish(&model);
    Ok((model, record))
}
