//! One- and two-stage (abnormal-first) training.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::checkpoint::parameter_digest;
use crate::data::TensorSet;
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossPlan};
use crate::metrics::{evaluate, ScoreMatrix};
use crate::optim::{OptimizerKind, Optimizer};
use crate::tensor::ops::NormMode;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFilter {
    All,
    AbnormalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub filter: DataFilter,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Probability of mirroring each training sample; 0 disables.
    #[serde(default)]
    pub flip_prob: f64,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingPlan {
    pub stages: Vec<StageSpec>,
    pub loss: LossPlan,
    #[serde(default)]
    pub precision: Precision,
    /// Set from the experiment seed rather than the plan itself.
    #[serde(skip)]
    pub seed: u64,
}

/// Fine-tuning learning rate relative to the first stage.
pub const STAGE2_LR_FACTOR: f64 = 0.1;

impl TrainingPlan {
    pub fn one_stage(stage: StageSpec, loss: LossKind, seed: u64) -> Self {
        TrainingPlan {
            stages: vec![StageSpec {
                filter: DataFilter::All,
                ..stage
            }],
            loss: LossPlan::Uniform(loss),
            precision: Precision::F32,
            seed,
        }
    }

    /// Abnormal-only stage followed by `stage2_epochs` on all samples at a
    /// tenth of the learning rate.
    pub fn two_stage(stage1: StageSpec, stage2_epochs: usize, loss: LossPlan, seed: u64) -> Self {
        let first = StageSpec {
            filter: DataFilter::AbnormalOnly,
            ..stage1
        };
        let second = StageSpec {
            filter: DataFilter::All,
            epochs: stage2_epochs,
            learning_rate: stage1.learning_rate * STAGE2_LR_FACTOR,
            ..stage1
        };
        TrainingPlan {
            stages: vec![first, second],
            loss,
            precision: Precision::F32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.stages.len()) {
            return Err(Error::Config(format!("plans have 1 or 2 stages, got {}", self.stages.len())));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate().map_err(|e| Error::Config(format!("stage {}: {e}", i + 1)))?;
        }
        self.loss.validate(self.stages.len())
    }
}

/// The five training strategies compared in the strategy ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    OneStageBce,
    OneStageFocal,
    TwoStageBce,
    TwoStageFocal,
    TwoStageBceFocal,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::OneStageBce,
        Strategy::OneStageFocal,
        Strategy::TwoStageBce,
        Strategy::TwoStageFocal,
        Strategy::TwoStageBceFocal,
    ];

    pub fn header(self) -> &'static str {
        match self {
            Strategy::OneStageBce => "1S-BCE",
            Strategy::OneStageFocal => "1S-Focal",
            Strategy::TwoStageBce => "2S-BCE",
            Strategy::TwoStageFocal => "2S-Focal",
            Strategy::TwoStageBceFocal => "2S-BCE+Focal",
        }
    }

    /// Builds the plan from a shared stage template: one-stage strategies
    /// train `one_stage_epochs` on everything, two-stage ones train
    /// `stage1_epochs` abnormal-only then `stage2_epochs` on everything.
    pub fn plan(self, template: StageSpec, budget: EpochBudget, focal: LossKind, seed: u64) -> TrainingPlan {
        let one = StageSpec {
            epochs: budget.one_stage,
            ..template
        };
        let two = StageSpec {
            epochs: budget.stage1,
            ..template
        };
        match self {
            Strategy::OneStageBce => TrainingPlan::one_stage(one, LossKind::Bce, seed),
            Strategy::OneStageFocal => TrainingPlan::one_stage(one, focal, seed),
            Strategy::TwoStageBce => TrainingPlan::two_stage(two, budget.stage2, LossPlan::Uniform(LossKind::Bce), seed),
            Strategy::TwoStageFocal => TrainingPlan::two_stage(two, budget.stage2, LossPlan::Uniform(focal), seed),
            Strategy::TwoStageBceFocal => {
                TrainingPlan::two_stage(two, budget.stage2, LossPlan::Staged(vec![LossKind::Bce, focal]), seed)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochBudget {
    pub one_stage: usize,
    pub stage1: usize,
    pub stage2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub loss: f64,
    pub val_mean_auc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBoundary {
    pub stage: usize,
    pub samples: usize,
    pub start_digest: String,
    pub end_digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
    pub stages: Vec<StageBoundary>,
}

impl RunHistory {
    /// One JSON object per epoch, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Records with wall-clock times zeroed, for comparing runs.
    pub fn without_timing(&self) -> RunHistory {
        let mut h = self.clone();
        h.epochs.iter_mut().for_each(|r| r.seconds = 0.0);
        h
    }
}

/// Indices of samples with at least one positive label, in order.
pub fn filter_abnormal(set: &TensorSet) -> Vec<usize> {
    (0..set.len()).filter(|&i| set.label_row(i).contains(&1)).collect()
}

fn stage_indices(set: &TensorSet, filter: DataFilter) -> Vec<usize> {
    match filter {
        DataFilter::All => (0..set.len()).collect(),
        DataFilter::AbnormalOnly => filter_abnormal(set),
    }
}

/// Post-sigmoid scores for every sample in `set`, computed in eval mode.
pub fn predict<T: Element>(model: &Model<T>, set: &TensorSet, batch_size: usize, class_names: &[String]) -> Result<ScoreMatrix> {
    let previous = model.mode();
    model.set_mode(NormMode::Eval);
    let mut scores = Vec::with_capacity(set.labels.len());
    let all: Vec<usize> = (0..set.len()).collect();
    let result = (|| {
        for chunk in all.chunks(batch_size.max(1)) {
            let (x, _) = set.batch::<T>(chunk, None);
            let logits = model.classify(&x)?.detach();
            scores.extend(logits.to_f64_vec().into_iter().map(|z| 1.0 / (1.0 + (-z).exp())));
        }
        Ok::<_, Error>(())
    })();
    model.set_mode(previous);
    result?;
    ScoreMatrix::new(scores, set.labels.iter().map(|&y| y == 1).collect(), class_names.to_vec())
}

fn validation_auc<T: Element>(model: &Model<T>, val: &TensorSet, batch: usize) -> Result<Option<f64>> {
    let names: Vec<String> = (0..val.num_labels).map(|i| format!("class{i}")).collect();
    match evaluate(&predict(model, val, batch, &names)?) {
        Ok(r) => Ok(Some(r.mean_auc)),
        Err(Error::AllClassesDegenerate(_)) | Err(Error::InvalidArgument { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Trains `model` in place for one stage. Shuffling and flips use a stream
/// derived from `(seed, stage, epoch)`.
#[allow(clippy::too_many_arguments)]
pub fn run_stage<T: Element>(
    model: &Model<T>,
    train: &TensorSet,
    val: Option<&TensorSet>,
    spec: &StageSpec,
    stage: usize,
    loss: LossKind,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    spec.validate()?;
    let indices = stage_indices(train, spec.filter);
    if indices.is_empty() {
        return Err(Error::EmptyStage);
    }
    let store = model.params();
    let mut opt = Optimizer::new(spec.optimizer, store);
    let mut records = Vec::with_capacity(spec.epochs);
    for epoch in 1..=spec.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((stage as u64) << 32) | epoch as u64);
        let mut order = indices.clone();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = order
            .iter()
            .map(|_| spec.flip_prob > 0.0 && rng.random_bool(spec.flip_prob))
            .collect();

        model.set_mode(NormMode::Train);
        let mut total = 0.0;
        for (batch, flip) in order.chunks(spec.batch_size).zip(flips.chunks(spec.batch_size)) {
            let (x, y) = train.batch::<T>(batch, Some(flip));
            store.zero_grad();
            let l = loss.apply(&model.classify(&x)?, &y)?;
            l.backward()?;
            opt.step(store, spec.learning_rate);
            total += l.item().to_f64().unwrap() * batch.len() as f64;
        }
        let val_mean_auc = match val {
            Some(v) => validation_auc(model, v, spec.batch_size.max(64))?,
            None => None,
        };
        let record = EpochRecord {
            stage,
            epoch,
            loss: total / order.len() as f64,
            val_mean_auc,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        records.push(record);
    }
    model.set_mode(NormMode::Eval);
    Ok(records)
}

/// Runs every stage of `plan` in order on the same model, each stage
/// filtering the same training set.
pub fn run_plan<T: Element>(
    model: &Model<T>,
    train: &TensorSet,
    val: Option<&TensorSet>,
    plan: &TrainingPlan,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RunHistory> {
    plan.validate()?;
    let mut history = RunHistory::default();
    for (i, spec) in plan.stages.iter().enumerate() {
        let stage = i + 1;
        let loss = plan.loss.resolve(stage)?;
        let start_digest = parameter_digest(model.params());
        let records = run_stage(model, train, val, spec, stage, loss, plan.seed, on_epoch).map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })?;
        history.epochs.extend(records);
        history.stages.push(StageBoundary {
            stage,
            samples: stage_indices(train, spec.filter).len(),
            start_digest,
            end_digest: parameter_digest(model.params()),
        });
    }
    Ok(history)
}
