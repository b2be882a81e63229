//! Training host: loss and batch gradients over a toy model, and the main
//! loop tying importance scoring, threshold scheduling, rank growth, and
//! optimizer updates together.
//!
//! Loop shape per step t = 1..=T: at a rank-update boundary past warm-up and
//! while budget remains, score every site, compute k, grow the top-k sites,
//! and charge the budget; then take one gradient step with linear
//! learning-rate decay and decoupled weight decay.

pub mod model;
pub mod optim;
pub mod task;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterCheckpoint, InitPolicy, Role};
use crate::error::{Error, Result};
use crate::importance::{NormVariant, OpCounter, ScoreBoard, ScoreSnapshot};
use crate::linalg::{Matrix, RngState};
use crate::scheduler::{BudgetState, GrowthEngine, GrowthEvent, ScheduleConfig};

pub use model::{Activation, AdapterBuild, ModelConfig, SiteGrad, SiteWeight, Topology, ToyModel};
pub use optim::OptimizerKind;
pub use task::{Sample, Target, TaskConfig, TaskData, TaskKind};

/// RNG stream labels; every random draw in a run descends from the run seed
/// through one of these.
pub mod streams {
    pub const W0: u64 = 1;
    pub const TASK: u64 = 2;
    pub const DATA: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const ADAPTER_BASE: u64 = 0x100;
    pub const GROWTH_BASE: u64 = 0x10_000;
}

/// Whether sites run the triangular adapter or the plain-LoRA baseline
/// (`D` fixed to the identity, no growth, `L`/`U` frozen).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    Triadapt,
    LoraBaseline,
}

/// Full training configuration for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_beta")]
    pub beta1: f64,
    #[serde(default = "default_beta")]
    pub beta2: f64,
    #[serde(default = "default_true")]
    pub orth_enabled: bool,
    #[serde(default = "default_orth_coefficient")]
    pub orth_coefficient: f64,
    #[serde(default = "default_norm_variant")]
    pub norm_variant: NormVariant,
    #[serde(default = "default_init_policy")]
    pub init_policy: InitPolicy,
    #[serde(default)]
    pub lora_dropout: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_adapter_mode")]
    pub adapter_mode: AdapterMode,
    /// Fixed rank of the plain-LoRA baseline.
    #[serde(default = "default_lora_rank")]
    pub lora_rank: usize,
    pub schedule: ScheduleConfig,
    #[serde(default = "default_r_ref")]
    pub r_ref: usize,
    #[serde(default = "default_r_init")]
    pub r_init: usize,
    #[serde(default = "default_delta_r")]
    pub delta_r: usize,
    pub seed: u64,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adamw
}
fn default_beta() -> f64 {
    0.85
}
fn default_true() -> bool {
    true
}
fn default_orth_coefficient() -> f64 {
    0.1
}
fn default_norm_variant() -> NormVariant {
    NormVariant::ByRank
}
fn default_init_policy() -> InitPolicy {
    InitPolicy::Gaussian
}
fn default_alpha() -> f64 {
    16.0
}
fn default_epsilon() -> f64 {
    1e-6
}
fn default_init_std() -> f64 {
    0.02
}
fn default_adapter_mode() -> AdapterMode {
    AdapterMode::Triadapt
}
fn default_lora_rank() -> usize {
    4
}
fn default_r_ref() -> usize {
    8
}
fn default_r_init() -> usize {
    1
}
fn default_delta_r() -> usize {
    1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(Error::Config("lora_dropout must lie in [0, 1)".into()));
        }
        if self.orth_coefficient < 0.0 {
            return Err(Error::Config("orth_coefficient must be nonnegative".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be at least 1".into()));
        }
        self.schedule.validate()?;
        if self.r_init == 0 || self.r_init > self.r_ref {
            return Err(Error::Config(format!(
                "r_init ({}) must lie in [1, r_ref = {}]",
                self.r_init, self.r_ref
            )));
        }
        if self.delta_r == 0 {
            return Err(Error::Config("delta_r must be at least 1".into()));
        }
        Ok(())
    }

    /// Adapter construction parameters implied by this config.
    pub fn adapter_build(&self) -> AdapterBuild {
        AdapterBuild {
            alpha: self.alpha,
            epsilon: self.epsilon,
            init_std: self.init_std,
            lora_baseline_rank: match self.adapter_mode {
                AdapterMode::Triadapt => None,
                AdapterMode::LoraBaseline => Some(self.lora_rank),
            },
        }
    }
}

/// One per-step metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetric {
    pub t: usize,
    pub loss: f64,
    pub lr: f64,
    /// Remaining rank budget (0 in baseline mode, which has no budget).
    pub budget: i64,
    /// Unweighted orthogonality penalty summed over sites.
    pub orth: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankEntry {
    pub layer: usize,
    pub role: Role,
    pub rank: usize,
}

/// Everything a finished (or aborted) run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResult {
    pub steps: Vec<StepMetric>,
    pub growth_events: Vec<GrowthEvent>,
    pub score_snapshots: Vec<ScoreSnapshot>,
    pub final_ranks: Vec<RankEntry>,
    pub initial_eval_loss: f64,
    /// NaN when the run aborted before the final evaluation.
    pub final_eval_loss: f64,
    /// Instrumented float-op count of all importance evaluations.
    pub score_flops: u64,
    pub budget_final: i64,
    pub checkpoints: Vec<AdapterCheckpoint>,
}

/// A failed run still carries the partial record accumulated so far.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub partial: Box<TrainResult>,
}

struct LossParts {
    task: f64,
    orth: f64,
}

impl LossParts {
    fn total(&self, cfg: &TrainConfig) -> f64 {
        if cfg.orth_enabled {
            self.task + cfg.orth_coefficient * self.orth
        } else {
            self.task
        }
    }
}

fn column_count(batch: &[Sample]) -> usize {
    batch.iter().map(|s| s.x.cols()).sum()
}

/// Per-column loss and scaled upstream gradient for one sample. The
/// normalizer (total column count across the batch, and the output dimension
/// for the squared error) is folded into the upstream so batch gradients
/// aggregate by plain summation.
fn sample_loss_and_upstream(
    pred: &Matrix,
    target: &Target,
    total_cols: usize,
) -> Result<(f64, Matrix)> {
    let out = pred.rows();
    let mut upstream = Matrix::zeros(out, pred.cols());
    let mut loss = 0.0;
    match target {
        Target::Regression(y) => {
            if y.shape() != pred.shape() {
                return Err(Error::dim(
                    "regression target",
                    format!("{:?}", pred.shape()),
                    format!("{:?}", y.shape()),
                ));
            }
            let scale = 1.0 / (total_cols * out) as f64;
            for j in 0..pred.cols() {
                for i in 0..out {
                    let diff = pred.get(i, j) - y.get(i, j);
                    loss += diff * diff * scale;
                    upstream.set(i, j, 2.0 * diff * scale);
                }
            }
        }
        Target::Classification(labels) => {
            if labels.len() != pred.cols() {
                return Err(Error::dim(
                    "classification target",
                    format!("{} columns", pred.cols()),
                    format!("{} labels", labels.len()),
                ));
            }
            let scale = 1.0 / total_cols as f64;
            for (j, label) in labels.iter().enumerate() {
                if *label >= out {
                    return Err(Error::Config(format!(
                        "label {label} out of range for {out} classes"
                    )));
                }
                let logits = pred.col(j);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                loss += -(exps[*label] / sum).ln() * scale;
                for i in 0..out {
                    let soft = exps[i] / sum;
                    let indicator = if i == *label { 1.0 } else { 0.0 };
                    upstream.set(i, j, (soft - indicator) * scale);
                }
            }
        }
    }
    Ok((loss, upstream))
}

fn batch_loss_and_grads(
    model: &ToyModel,
    batch: &[Sample],
    cfg: &TrainConfig,
    mut dropout_rng: Option<&mut RngState>,
) -> Result<(LossParts, Vec<SiteGrad>)> {
    if batch.is_empty() {
        return Err(Error::Config("batch must be nonempty".into()));
    }
    let total_cols = column_count(batch);
    let mut grads = model::empty_grads(model);
    let mut task_loss = 0.0;
    for sample in batch {
        let (pred, cache) =
            model.forward_train(&sample.x, cfg.lora_dropout, dropout_rng.as_deref_mut())?;
        let (loss, upstream) = sample_loss_and_upstream(&pred, &sample.target, total_cols)?;
        task_loss += loss;
        model.backward(&cache, &upstream, 1.0, &mut grads)?;
    }

    let mut orth_total = 0.0;
    for (index, (_, site)) in model.sites().iter().enumerate() {
        if let SiteWeight::Adapted(state) = site {
            orth_total += state.orth_penalty();
            if cfg.orth_enabled {
                let (oga, ogb) = state.orth_grads();
                if let SiteGrad::Adapter(acc) = &mut grads[index] {
                    optim::add_orth_grads(acc, &oga, &ogb, cfg.orth_coefficient)?;
                }
            }
        }
    }
    if cfg.adapter_mode == AdapterMode::LoraBaseline {
        // D stays the identity: no transform gradients in baseline mode.
        for g in grads.iter_mut() {
            if let SiteGrad::Adapter(acc) = g {
                acc.gl = Matrix::zeros(acc.gl.rows(), acc.gl.cols());
                acc.gu = Matrix::zeros(acc.gu.rows(), acc.gu.cols());
            }
        }
    }
    Ok((
        LossParts {
            task: task_loss,
            orth: orth_total,
        },
        grads,
    ))
}

/// Loss (task plus weighted orthogonality penalty when enabled) and
/// mean-aggregated per-site gradients over a batch. Frozen base weights
/// receive no gradient. A non-finite loss is a numerical-failure error
/// naming the first offending site (step 0 marks a call outside the
/// training loop). Dropout is off on this surface; the training loop
/// threads its own dropout stream.
pub fn loss_and_grads(
    model: &ToyModel,
    batch: &[Sample],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<SiteGrad>)> {
    let (parts, grads) = batch_loss_and_grads(model, batch, cfg, None)?;
    let loss = parts.total(cfg);
    if !loss.is_finite() {
        return Err(Error::Numerical {
            step: 0,
            site: model.first_nonfinite_site(&batch[0].x),
        });
    }
    Ok((loss, grads))
}

/// The plain-LoRA comparison arm: same contract as [`loss_and_grads`] with
/// `D` fixed to the identity and growth disabled. The config must be in
/// baseline mode.
pub fn lora_baseline_step(
    model: &ToyModel,
    batch: &[Sample],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<SiteGrad>)> {
    if cfg.adapter_mode != AdapterMode::LoraBaseline {
        return Err(Error::Config(
            "lora_baseline_step requires adapter_mode = lora_baseline".into(),
        ));
    }
    loss_and_grads(model, batch, cfg)
}

/// Single-head attention forward over token columns (thin wrapper over the
/// model forward, restricted to the attention topology).
pub fn attention_forward(model: &ToyModel, x: &Matrix) -> Result<Matrix> {
    if model.topology() != Topology::AttentionBlock {
        return Err(Error::Config(
            "attention_forward requires the attention_block topology".into(),
        ));
    }
    model.forward_eval(x)
}

/// Mean task loss over a sample set (no dropout, no regularizer).
pub fn eval_loss(model: &ToyModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set must be nonempty".into()));
    }
    let total_cols = column_count(samples);
    let mut loss = 0.0;
    for sample in samples {
        let pred = model.forward_eval(&sample.x)?;
        let (l, _) = sample_loss_and_upstream(&pred, &sample.target, total_cols)?;
        loss += l;
    }
    Ok(loss)
}

/// Linear learning-rate decay: full rate at step 1, `lr/T` at the last step.
fn lr_at(cfg: &TrainConfig, t: usize) -> f64 {
    let total = cfg.schedule.total_steps as f64;
    cfg.learning_rate * (1.0 - (t as f64 - 1.0) / total)
}

fn sample_batch(data: &TaskData, cfg: &TrainConfig, rng: &mut RngState) -> Vec<Sample> {
    (0..cfg.batch_size)
        .map(|_| data.train[rng.next_index(data.train.len())].clone())
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn collect_result(
    model: &ToyModel,
    steps: Vec<StepMetric>,
    events: Vec<GrowthEvent>,
    snapshots: Vec<ScoreSnapshot>,
    initial_eval_loss: f64,
    final_eval_loss: f64,
    score_flops: u64,
    budget_final: i64,
) -> TrainResult {
    let final_ranks = model
        .adapter_states()
        .iter()
        .map(|s| RankEntry {
            layer: s.site_id().layer,
            role: s.site_id().role,
            rank: s.rank(),
        })
        .collect();
    let checkpoints = model.adapter_states().iter().map(|s| s.checkpoint()).collect();
    TrainResult {
        steps,
        growth_events: events,
        score_snapshots: snapshots,
        final_ranks,
        initial_eval_loss,
        final_eval_loss,
        score_flops,
        budget_final,
        checkpoints,
    }
}

fn partial_result(
    model: &ToyModel,
    steps: &[StepMetric],
    engine: Option<&GrowthEngine>,
    board: &ScoreBoard,
    initial_eval_loss: f64,
    flops: u64,
) -> TrainResult {
    collect_result(
        model,
        steps.to_vec(),
        engine.map(|e| e.events().to_vec()).unwrap_or_default(),
        board.snapshots().to_vec(),
        initial_eval_loss,
        f64::NAN,
        flops,
        engine.map(|e| e.budget().remaining()).unwrap_or(0),
    )
}

/// Runs the full training procedure on an already-built model. On failure
/// the partial record accumulated so far is returned alongside the error.
pub fn run_training(
    model: &mut ToyModel,
    data: &TaskData,
    cfg: &TrainConfig,
) -> std::result::Result<TrainResult, TrainFailure> {
    run_training_inner(model, data, cfg)
}

fn fail(error: Error, partial: TrainResult) -> TrainFailure {
    TrainFailure {
        error,
        partial: Box::new(partial),
    }
}

fn run_training_inner(
    model: &mut ToyModel,
    data: &TaskData,
    cfg: &TrainConfig,
) -> std::result::Result<TrainResult, TrainFailure> {
    if let Err(e) = cfg.validate() {
        let partial = partial_result(model, &[], None, &ScoreBoard::new(), f64::NAN, 0);
        return Err(fail(e, partial));
    }
    if data.train.is_empty() {
        let partial = partial_result(model, &[], None, &ScoreBoard::new(), f64::NAN, 0);
        return Err(fail(Error::Config("training set is empty".into()), partial));
    }

    let root = RngState::new(cfg.seed);
    let mut data_rng = root.derive(streams::DATA);
    let mut dropout_rng = root.derive(streams::DROPOUT);
    let triadapt = cfg.adapter_mode == AdapterMode::Triadapt;

    let site_ids = model.adapter_site_ids();
    let mut growth_rngs: Vec<RngState> = site_ids
        .iter()
        .map(|id| root.derive(streams::GROWTH_BASE + id.stream_label()))
        .collect();

    let mut engine = if triadapt && !site_ids.is_empty() {
        let budget = match BudgetState::new(cfg.r_ref, site_ids.len(), cfg.r_init, cfg.delta_r) {
            Ok(b) => b,
            Err(e) => {
                let partial = partial_result(model, &[], None, &ScoreBoard::new(), f64::NAN, 0);
                return Err(fail(e, partial));
            }
        };
        match GrowthEngine::new(cfg.schedule.clone(), budget) {
            Ok(e) => Some(e),
            Err(e) => {
                let partial = partial_result(model, &[], None, &ScoreBoard::new(), f64::NAN, 0);
                return Err(fail(e, partial));
            }
        }
    } else {
        None
    };

    let mut board = ScoreBoard::new();
    let mut counter = OpCounter::new();
    for state in model.adapter_states() {
        board.register(state, cfg.norm_variant);
    }
    let mut optimizer =
        optim::Optimizer::new(model, cfg.optimizer, cfg.weight_decay, cfg.beta1, cfg.beta2);

    let initial_eval_loss = match eval_loss(model, &data.eval) {
        Ok(l) => l,
        Err(e) => {
            let partial = partial_result(model, &[], engine.as_ref(), &board, f64::NAN, 0);
            return Err(fail(e, partial));
        }
    };
    let mut steps: Vec<StepMetric> = Vec::with_capacity(cfg.schedule.total_steps);

    for t in 1..=cfg.schedule.total_steps {
        // Rank-update boundary: score, threshold, grow, charge.
        if let Some(eng) = engine.as_mut() {
            if eng.is_boundary(t) && !eng.exhausted() {
                let scores =
                    board.evaluate(t, model.adapter_states_mut(), cfg.norm_variant, &mut counter);
                let delta_r = cfg.delta_r;
                let event = match eng.update(t, &scores, |site| model.can_grow(site, delta_r)) {
                    Ok(ev) => ev,
                    Err(e) => {
                        let partial = partial_result(model, &steps, Some(eng), &board, initial_eval_loss, counter.flops);
                        return Err(fail(e, partial));
                    }
                };
                if let Some(event) = event {
                    for site in &event.selected {
                        let adapter_index =
                            site_ids.iter().position(|id| id == site).expect("known site");
                        let model_index = model
                            .sites()
                            .iter()
                            .position(|(id, _)| id == site)
                            .expect("known site");
                        let state = model.adapter_state_mut(*site).expect("adapter site");
                        state
                            .grow_rank(
                                delta_r,
                                cfg.init_policy,
                                cfg.init_std,
                                &mut growth_rngs[adapter_index],
                            )
                            .expect("growth pre-filtered by capacity");
                        let new_rank = model.adapter_state(*site).expect("adapter site").rank();
                        optimizer.grow_site(model_index, new_rank);
                    }
                }
            }
        }

        let batch = sample_batch(data, cfg, &mut data_rng);
        let dropout = (cfg.lora_dropout > 0.0).then_some(&mut dropout_rng);
        let step_result = batch_loss_and_grads(model, &batch, cfg, dropout);
        let (parts, grads) = match step_result {
            Ok(v) => v,
            Err(e) => {
                let partial = partial_result(model, &steps, engine.as_ref(), &board, initial_eval_loss, counter.flops);
                return Err(fail(e, partial));
            }
        };
        let loss = parts.total(cfg);
        if !loss.is_finite() {
            let site = model.first_nonfinite_site(&batch[0].x);
            let partial = partial_result(model, &steps, engine.as_ref(), &board, initial_eval_loss, counter.flops);
            return Err(fail(Error::Numerical { step: t, site }, partial));
        }

        let lr = lr_at(cfg, t);
        if let Err(e) = optimizer.apply(model, &grads, lr, triadapt) {
            let partial = partial_result(model, &steps, engine.as_ref(), &board, initial_eval_loss, counter.flops);
            return Err(fail(e, partial));
        }

        steps.push(StepMetric {
            t,
            loss,
            lr,
            budget: engine.as_ref().map(|e| e.budget().remaining()).unwrap_or(0),
            orth: parts.orth,
        });
    }

    // Final bookkeeping evaluation after the last optimizer step, so the
    // last snapshot (and each site's norm record) is recomputable from the
    // serialized final checkpoint during offline verification.
    if cfg.adapter_mode == AdapterMode::Triadapt {
        board.evaluate(
            cfg.schedule.total_steps,
            model.adapter_states_mut(),
            cfg.norm_variant,
            &mut counter,
        );
    }

    let final_eval_loss = match eval_loss(model, &data.eval) {
        Ok(l) => l,
        Err(e) => {
            let partial = partial_result(model, &steps, engine.as_ref(), &board, initial_eval_loss, counter.flops);
            return Err(fail(e, partial));
        }
    };
    let budget_final = engine.as_ref().map(|e| e.budget().remaining()).unwrap_or(0);
    Ok(collect_result(
        model,
        steps,
        engine.map(|e| e.into_events()).unwrap_or_default(),
        board.into_snapshots(),
        initial_eval_loss,
        final_eval_loss,
        counter.flops,
        budget_final,
    ))
}

/// Result of the full fine-tuning comparison arm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullFinetuneResult {
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

/// Trains a fully-trainable copy of the model (identical frozen starting
/// weights, no adapters) with the same optimizer settings: the learnability
/// oracle the adapter runs are compared against.
pub fn run_full_finetune(
    base: &ToyModel,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<FullFinetuneResult> {
    cfg.validate()?;
    let mut model = base.to_full_finetune();
    let root = RngState::new(cfg.seed);
    let mut data_rng = root.derive(streams::DATA);
    let mut optimizer =
        optim::Optimizer::new(&model, cfg.optimizer, cfg.weight_decay, cfg.beta1, cfg.beta2);

    let initial_eval_loss = eval_loss(&model, &data.eval)?;
    for t in 1..=cfg.schedule.total_steps {
        let batch = sample_batch(data, cfg, &mut data_rng);
        let (parts, grads) = batch_loss_and_grads(&model, &batch, cfg, None)?;
        if !parts.task.is_finite() {
            return Err(Error::Numerical {
                step: t,
                site: model.first_nonfinite_site(&batch[0].x),
            });
        }
        optimizer.apply(&mut model, &grads, lr_at(cfg, t), true)?;
    }
    let final_eval_loss = eval_loss(&model, &data.eval)?;
    Ok(FullFinetuneResult {
        initial_eval_loss,
        final_eval_loss,
    })
}
