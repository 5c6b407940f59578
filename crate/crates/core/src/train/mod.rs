//! Curriculum pretraining on synthetic priors.
//!
//! Each optimizer step draws a batch of prior datasets, splits every dataset
//! into labelled context rows and query rows, averages the query
//! cross-entropy over the batch by accumulating gradients over micro-batches,
//! clips the global gradient norm and applies Adam. Stages grow the dataset
//! size; the last stage trains only the ICL transformer.

pub mod checkpoint;
pub mod optim;
pub mod schedule;
pub mod split;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batching, ModelConfig, TabIcl, COLUMN_PREFIX, ROW_PREFIX};
use crate::prior::{sample_dataset, PriorConfig};
use crate::seed;
use crate::tensor::Graph;

pub use optim::{Adam, AdamConfig, GradSet};
pub use schedule::LrSchedule;
pub use split::{split_dataset, Task};

/// Paper-scale datasets per optimizer step.
pub const PAPER_DATASETS_PER_STEP: usize = 512;
/// Stream stride separating replacement draws for datasets that cannot be split.
const RETRY_STRIDE: u64 = 1 << 40;
const MAX_TASK_RETRIES: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum SizeLaw {
    Fixed { n: usize },
    LogUniform { lo: usize, hi: usize },
    Uniform { lo: usize, hi: usize },
}

impl SizeLaw {
    pub fn bounds(&self) -> (usize, usize) {
        match *self {
            SizeLaw::Fixed { n } => (n, n),
            SizeLaw::LogUniform { lo, hi } | SizeLaw::Uniform { lo, hi } => (lo, hi),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        match *self {
            SizeLaw::Fixed { n } => n,
            SizeLaw::LogUniform { lo, hi } => {
                let u = rng.random_range((lo as f64).ln()..=(hi as f64).ln());
                (u.exp().round() as usize).clamp(lo, hi)
            }
            SizeLaw::Uniform { lo, hi } => rng.random_range(lo..=hi),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    All,
    IclOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    pub micro_batch: usize,
    pub sizes: SizeLaw,
    pub steps: u64,
    pub datasets_per_step: usize,
    pub scope: Scope,
    pub schedule: LrSchedule,
    pub max_features: usize,
}

impl StageConfig {
    pub fn micro_steps(&self) -> usize {
        self.datasets_per_step / self.micro_batch.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.micro_batch == 0 || self.datasets_per_step % self.micro_batch != 0 {
            return Err(Error::Config(format!(
                "stage {}: {} datasets per step do not split into micro-batches of {}",
                self.stage, self.datasets_per_step, self.micro_batch
            )));
        }
        let (lo, hi) = self.sizes.bounds();
        if lo < split::MIN_SPLIT_ROWS || lo > hi {
            return Err(Error::Config(format!("stage {}: dataset sizes {lo}..={hi}", self.stage)));
        }
        if self.stage == 3 && self.scope != Scope::IclOnly {
            return Err(Error::Config("stage 3 must train the ICL transformer only".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub stages: Vec<StageConfig>,
    pub prior: PriorConfig,
    pub adam: AdamConfig,
    /// Held-out prior datasets used to measure stage progress.
    pub heldout_datasets: usize,
    pub seed: u64,
}

impl CurriculumConfig {
    /// Full-scale schedule: 160K steps at 1024 rows (N_B = 4), 2K steps at
    /// log-uniform 1K-40K rows, 50 ICL-only steps at 40K-60K rows; 512
    /// datasets per step throughout.
    pub fn paper(seed: u64) -> Self {
        let dps = PAPER_DATASETS_PER_STEP;
        CurriculumConfig {
            profile: Profile::Paper,
            model: ModelConfig::paper(),
            stages: vec![
                StageConfig {
                    stage: 1,
                    micro_batch: 4,
                    sizes: SizeLaw::Fixed { n: 1024 },
                    steps: 160_000,
                    datasets_per_step: dps,
                    scope: Scope::All,
                    schedule: LrSchedule::cosine(schedule::COSINE_PERIOD_PAPER),
                    max_features: crate::prior::MAX_FEATURES,
                },
                StageConfig {
                    stage: 2,
                    micro_batch: 1,
                    sizes: SizeLaw::LogUniform { lo: 1_000, hi: 40_000 },
                    steps: 2_000,
                    datasets_per_step: dps,
                    scope: Scope::All,
                    schedule: LrSchedule::polynomial(),
                    max_features: crate::prior::MAX_FEATURES,
                },
                StageConfig {
                    stage: 3,
                    micro_batch: 1,
                    sizes: SizeLaw::Uniform { lo: 40_000, hi: 60_000 },
                    steps: 50,
                    datasets_per_step: dps,
                    scope: Scope::IclOnly,
                    schedule: LrSchedule::Constant { lr: schedule::POLY_LR_END },
                    max_features: crate::prior::MAX_FEATURES,
                },
            ],
            prior: PriorConfig { seed, ..PriorConfig::default() },
            adam: AdamConfig::default(),
            heldout_datasets: 64,
            seed,
        }
    }

    /// Workstation schedule: 300 steps at 256 rows, 50 steps at log-uniform
    /// 256-2048 rows, 10 ICL-only steps at 2048-4096 rows.
    pub fn desk(seed: u64) -> Self {
        let max_features = DESK_MAX_FEATURES;
        CurriculumConfig {
            profile: Profile::Desk,
            model: ModelConfig::desk(),
            stages: vec![
                StageConfig {
                    stage: 1,
                    micro_batch: 4,
                    sizes: SizeLaw::Fixed { n: 256 },
                    steps: schedule::COSINE_PERIOD_DESK,
                    datasets_per_step: DESK_STAGE1_DATASETS,
                    scope: Scope::All,
                    schedule: LrSchedule::cosine_desk(schedule::COSINE_PERIOD_DESK),
                    max_features,
                },
                StageConfig {
                    stage: 2,
                    micro_batch: 1,
                    sizes: SizeLaw::LogUniform { lo: 256, hi: 2048 },
                    steps: 30,
                    datasets_per_step: DESK_STAGE2_DATASETS,
                    scope: Scope::All,
                    schedule: LrSchedule::polynomial(),
                    max_features,
                },
                StageConfig {
                    stage: 3,
                    micro_batch: 1,
                    sizes: SizeLaw::Uniform { lo: 2048, hi: 4096 },
                    steps: 10,
                    datasets_per_step: DESK_STAGE3_DATASETS,
                    scope: Scope::IclOnly,
                    schedule: LrSchedule::Constant { lr: schedule::POLY_LR_END },
                    max_features,
                },
            ],
            prior: PriorConfig {
                seed,
                max_features,
                ..PriorConfig::default()
            },
            adam: AdamConfig::default(),
            heldout_datasets: 32,
            seed,
        }
    }

    pub fn for_profile(profile: Profile, seed: u64) -> Self {
        match profile {
            Profile::Paper => Self::paper(seed),
            Profile::Desk => Self::desk(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prior.validate()?;
        for s in &self.stages {
            s.validate()?;
        }
        if self.stages.windows(2).any(|w| w[0].stage >= w[1].stage) {
            return Err(Error::Config("stages must be listed in increasing order".into()));
        }
        Ok(())
    }

    /// Prior used by one stage: the base prior with the stage's feature cap
    /// and a stream of its own.
    pub fn stage_prior(&self, stage: &StageConfig) -> PriorConfig {
        let (lo, hi) = stage.sizes.bounds();
        PriorConfig {
            min_samples: lo,
            max_samples: hi,
            max_features: stage.max_features.min(self.prior.max_features),
            min_features: self.prior.min_features.min(stage.max_features),
            seed: seed::derive_named(self.seed, &format!("prior-stage-{}", stage.stage)),
            ..self.prior.clone()
        }
    }
}

pub const DESK_MAX_FEATURES: usize = 20;
pub const DESK_STAGE1_DATASETS: usize = 8;
pub const DESK_STAGE2_DATASETS: usize = 8;
pub const DESK_STAGE3_DATASETS: usize = 4;

/// One prior dataset turned into a task. Datasets that fail to generate or
/// cannot be split with every class on both sides are replaced by a fresh draw.
pub fn prior_task(prior: &PriorConfig, index: u64, n: usize, split_seed: u64) -> Result<Task> {
    let mut last = None;
    for retry in 0..MAX_TASK_RETRIES {
        let idx = index.wrapping_add(retry.wrapping_mul(RETRY_STRIDE));
        let ds = match sample_dataset(prior, idx, Some(n)) {
            Ok(ds) => ds,
            Err(e) => {
                last = Some(e);
                continue;
            }
        };
        let mut rng = seed::rng(seed::derive(split_seed, idx));
        match split_dataset(&ds.x, &ds.y, ds.classes, &mut rng) {
            Ok(task) => return Ok(task),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Degenerate("no task".into())))
}

/// Tasks for one optimizer step, grouped into micro-batches of equal row count.
pub fn step_tasks(config: &CurriculumConfig, stage: &StageConfig, step: u64) -> Result<Vec<Vec<Task>>> {
    let prior = config.stage_prior(stage);
    let size_seed = seed::derive_named(prior.seed, "sizes");
    let split_seed = seed::derive_named(prior.seed, "splits");
    let nb = stage.micro_batch;
    let per_step = stage.datasets_per_step as u64;
    (0..stage.micro_steps())
        .into_par_iter()
        .map(|mb| {
            let mut rng = seed::rng(seed::derive(size_seed, step * per_step + mb as u64));
            let n = stage.sizes.sample(&mut rng);
            (0..nb)
                .map(|j| prior_task(&prior, step * per_step + (mb * nb + j) as u64, n, split_seed))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Held-out tasks drawn from a stream disjoint from training, sized by the
/// first stage's law so that progress is comparable across stages.
pub fn heldout_tasks(config: &CurriculumConfig, count: usize) -> Result<Vec<Task>> {
    let Some(first) = config.stages.first() else {
        return Ok(Vec::new());
    };
    let mut prior = config.stage_prior(first);
    prior.seed = seed::derive_named(config.seed, "heldout");
    let split_seed = seed::derive_named(prior.seed, "splits");
    let mut rng = seed::rng(seed::derive_named(prior.seed, "sizes"));
    let sizes: Vec<usize> = (0..count).map(|_| first.sizes.sample(&mut rng)).collect();
    sizes
        .into_par_iter()
        .enumerate()
        .map(|(i, n)| prior_task(&prior, i as u64, n, split_seed))
        .collect()
}

/// Sum of `weight * loss(task)` over tasks in a single graph, with gradients
/// of the trainable parameters.
pub fn micro_batch_grads(model: &TabIcl<f32>, tasks: &[Task], scope: Scope, weight: f64) -> Result<(f64, GradSet)> {
    let mut g = Graph::<f32>::new();
    let mut total = None;
    for task in tasks {
        let loss = match scope {
            Scope::All => model.loss_graph(&mut g, &task.x, &task.y_train, &task.y_test, task.classes)?,
            Scope::IclOnly => {
                let h = model.row_embeddings(&task.x, task.n_train(), Batching::default())?;
                let hv = g.input(h);
                let fused = model.icl.fuse_labels(&mut g, &model.params, hv, &task.y_train, task.classes)?;
                let logits = model.icl.forward(&mut g, &model.params, fused, task.n_train())?;
                g.cross_entropy(logits, &task.y_test, task.classes)?
            }
        };
        let scaled = g.scale(loss, weight);
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled)?,
        });
    }
    let total = total.ok_or_else(|| Error::Input("empty micro-batch".into()))?;
    let value = g.value(total).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let grads = g.backward(total)?;
    Ok((value, grads.into_params()))
}

/// Mean query-row loss without gradients.
pub fn mean_loss(model: &TabIcl<f32>, tasks: &[Task]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Input("no tasks".into()));
    }
    let losses = tasks
        .par_iter()
        .map(|t| {
            let mut g = Graph::<f32>::inference();
            let l = model.loss_graph(&mut g, &t.x, &t.y_train, &t.y_test, t.classes)?;
            Ok(g.value(l).data()[0] as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / tasks.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    /// Mean loss over the step's datasets (NaN when skipped).
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub micro_steps: usize,
    pub skipped: bool,
}

/// Accumulates gradients over micro-batches (each weighted so the total is
/// the mean loss), clips the global norm and takes one Adam step. A
/// non-finite loss or gradient skips the update.
pub fn train_step(
    model: &mut TabIcl<f32>,
    micro_batches: &[Vec<Task>],
    scope: Scope,
    opt: &mut Adam,
    lr: f64,
) -> Result<StepOutcome> {
    let total: usize = micro_batches.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Input("empty step".into()));
    }
    let weight = 1.0 / total as f64;
    let frozen = &*model;
    let parts: Vec<Result<(f64, GradSet)>> = micro_batches
        .par_iter()
        .map(|mb| micro_batch_grads(frozen, mb, scope, weight))
        .collect();
    let skipped = |micro_steps| StepOutcome {
        loss: f64::NAN,
        grad_norm: f64::NAN,
        clipped_norm: 0.0,
        micro_steps,
        skipped: true,
    };
    let mut loss = 0.0;
    let mut grads = GradSet::new();
    for part in parts {
        match part {
            Ok((l, g)) => {
                loss += l;
                optim::accumulate(&mut grads, g);
            }
            Err(Error::NonFinite { .. }) => return Ok(skipped(micro_batches.len())),
            Err(e) => return Err(e),
        }
    }
    if !optim::grads_finite(&grads) {
        return Ok(skipped(micro_batches.len()));
    }
    let grad_norm = optim::clip_global_norm(&mut grads, opt.config.clip_norm);
    let clipped_norm = optim::global_norm(&grads);
    opt.step(&mut model.params, &grads, lr);
    Ok(StepOutcome {
        loss,
        grad_norm,
        clipped_norm,
        micro_steps: micro_batches.len(),
        skipped: false,
    })
}

/// Restricts the trainable parameters to the stage scope.
pub fn apply_scope(model: &mut TabIcl<f32>, scope: Scope) {
    model.params.set_all_trainable(true);
    if scope == Scope::IclOnly {
        model.params.set_trainable_prefix(COLUMN_PREFIX, false);
        model.params.set_trainable_prefix(ROW_PREFIX, false);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// Global optimizer step across stages.
    pub step: u64,
    pub stage: u8,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub steps: u64,
    pub skipped_steps: u64,
    pub heldout_before: f64,
    pub heldout_after: f64,
    pub checkpoint: Option<PathBuf>,
}

pub struct CurriculumResult {
    pub model: TabIcl<f32>,
    pub log: Vec<LossRecord>,
    pub stages: Vec<StageReport>,
}

/// Runs one stage on `model`, appending to `log`. `heldout` tasks are scored
/// before and after the stage.
pub fn run_stage(
    config: &CurriculumConfig,
    stage: &StageConfig,
    model: &mut TabIcl<f32>,
    opt: &mut Adam,
    heldout: &[Task],
    log: &mut Vec<LossRecord>,
    on_step: &mut dyn FnMut(&LossRecord, &StepOutcome),
) -> Result<StageReport> {
    stage.validate()?;
    apply_scope(model, stage.scope);
    let heldout_before = if heldout.is_empty() { f64::NAN } else { mean_loss(model, heldout)? };
    let mut skipped_steps = 0;
    for step in 0..stage.steps {
        let batch = step_tasks(config, stage, step)?;
        let lr = stage.schedule.lr_at(step);
        let outcome = train_step(model, &batch, stage.scope, opt, lr)?;
        if outcome.skipped {
            skipped_steps += 1;
        }
        let record = LossRecord {
            step: log.len() as u64,
            stage: stage.stage,
            lr,
            loss: outcome.loss,
        };
        on_step(&record, &outcome);
        log.push(record);
    }
    let heldout_after = if heldout.is_empty() { f64::NAN } else { mean_loss(model, heldout)? };
    model.params.set_all_trainable(true);
    Ok(StageReport {
        stage: stage.stage,
        steps: stage.steps,
        skipped_steps,
        heldout_before,
        heldout_after,
        checkpoint: None,
    })
}

/// Runs every stage in order from a fresh model. With `out_dir`, writes
/// `stage{k}.ckpt` after each stage and `loss.csv` at the end.
pub fn run_curriculum(
    config: &CurriculumConfig,
    out_dir: Option<&Path>,
    meta: serde_json::Value,
    on_step: &mut dyn FnMut(&LossRecord, &StepOutcome),
) -> Result<CurriculumResult> {
    config.validate()?;
    let mut model = TabIcl::<f32>::new(config.model.clone(), seed::derive_named(config.seed, "init"))?;
    let mut opt = Adam::new(config.adam);
    let mut log = Vec::new();
    let mut stages = Vec::new();
    let heldout = heldout_tasks(config, config.heldout_datasets)?;
    for stage in &config.stages {
        let mut report = run_stage(config, stage, &mut model, &mut opt, &heldout, &mut log, on_step)?;
        if let Some(dir) = out_dir {
            let path = dir.join(format!("stage{}.ckpt", stage.stage));
            let stage_meta = serde_json::json!({ "stage": stage.stage, "steps": log.len(), "run": meta });
            checkpoint::save(&path, &model, stage_meta)?;
            report.checkpoint = Some(path);
        }
        stages.push(report);
    }
    if let Some(dir) = out_dir {
        write_loss_csv(std::fs::File::create(dir.join("loss.csv"))?, &log)?;
    }
    Ok(CurriculumResult { model, log, stages })
}

/// `step,stage,lr,loss` rows.
pub fn write_loss_csv<W: Write>(w: W, log: &[LossRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "stage", "lr", "loss"]).map_err(crate::column::csv_io)?;
    for r in log {
        out.write_record([r.step.to_string(), r.stage.to_string(), format!("{:e}", r.lr), r.loss.to_string()])
            .map_err(crate::column::csv_io)?;
    }
    out.flush()?;
    Ok(())
}
