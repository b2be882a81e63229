//! Experiment configuration, execution, persistence, and offline audit.
//!
//! A run is described by one TOML file with strict schema (unknown keys are
//! fatal). Executing it produces, per seed, a self-contained JSON run record
//! plus a checkpoint file in the adapter JSON layout and two delimited
//! metrics streams, and a `{mean, std}` summary across seeds. `verify`
//! replays the bookkeeping in a record from first principles and reports
//! every mismatch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterCheckpoint, InitPolicy, Role, SiteId};
use crate::error::{Error, Result};
use crate::importance::{NormVariant, ScoreSnapshot};
use crate::scheduler::{linear_k, nonlinear_k, GrowthEvent, ScheduleConfig, ThresholdMode};
use crate::trainer::{
    self, run_training, AdapterMode, ModelConfig, OptimizerKind, RankEntry, StepMetric,
    TaskConfig, ToyModel, TrainConfig, TrainResult,
};

/// `[experiment]` section: where results go and which seeds run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSettings {
    pub output_dir: String,
    pub seeds: Vec<u64>,
}

/// `[train]` section: optimizer and adapter settings shared by all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
    #[serde(default = "defaults::optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "defaults::beta")]
    pub beta1: f64,
    #[serde(default = "defaults::beta")]
    pub beta2: f64,
    #[serde(default = "defaults::yes")]
    pub orth_enabled: bool,
    #[serde(default = "defaults::orth_coefficient")]
    pub orth_coefficient: f64,
    #[serde(default = "defaults::norm_variant")]
    pub norm_variant: NormVariant,
    #[serde(default = "defaults::init_policy")]
    pub init_policy: InitPolicy,
    #[serde(default)]
    pub lora_dropout: f64,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default = "defaults::init_std")]
    pub init_std: f64,
    #[serde(default = "defaults::adapter_mode")]
    pub adapter_mode: AdapterMode,
    #[serde(default = "defaults::lora_rank")]
    pub lora_rank: usize,
}

/// `[schedule]` section: growth calendar, threshold rule, and budget sizing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSettings {
    pub mode: ThresholdMode,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub incre_interval: usize,
    #[serde(default = "defaults::k_fixed")]
    pub k_fixed: usize,
    #[serde(default = "defaults::r_ref")]
    pub r_ref: usize,
    #[serde(default = "defaults::r_init")]
    pub r_init: usize,
    #[serde(default = "defaults::delta_r")]
    pub delta_r: usize,
}

mod defaults {
    use super::*;

    pub fn optimizer() -> OptimizerKind {
        OptimizerKind::Adamw
    }
    pub fn beta() -> f64 {
        0.85
    }
    pub fn yes() -> bool {
        true
    }
    pub fn orth_coefficient() -> f64 {
        0.1
    }
    pub fn norm_variant() -> NormVariant {
        NormVariant::ByRank
    }
    pub fn init_policy() -> InitPolicy {
        InitPolicy::Gaussian
    }
    pub fn alpha() -> f64 {
        16.0
    }
    pub fn epsilon() -> f64 {
        1e-6
    }
    pub fn init_std() -> f64 {
        0.02
    }
    pub fn adapter_mode() -> AdapterMode {
        AdapterMode::Triadapt
    }
    pub fn lora_rank() -> usize {
        4
    }
    pub fn k_fixed() -> usize {
        1
    }
    pub fn r_ref() -> usize {
        8
    }
    pub fn r_init() -> usize {
        1
    }
    pub fn delta_r() -> usize {
        1
    }
}

/// Complete experiment description; round-trips losslessly through TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSettings,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub train: TrainSettings,
    pub schedule: ScheduleSettings,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.model.validate()?;
        self.task.validate()?;
        if self.task.input_dim != self.model.input_dim
            || self.task.output_dim != self.model.output_dim
        {
            return Err(Error::Config(format!(
                "task dims {}x{} do not match model dims {}x{}",
                self.task.input_dim,
                self.task.output_dim,
                self.model.input_dim,
                self.model.output_dim
            )));
        }
        // Full validation of the assembled per-seed config.
        self.train_config(self.experiment.seeds[0]).validate()
    }

    /// Assembles the runtime training config for one seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            optimizer: self.train.optimizer,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            orth_enabled: self.train.orth_enabled,
            orth_coefficient: self.train.orth_coefficient,
            norm_variant: self.train.norm_variant,
            init_policy: self.train.init_policy,
            lora_dropout: self.train.lora_dropout,
            alpha: self.train.alpha,
            epsilon: self.train.epsilon,
            init_std: self.train.init_std,
            adapter_mode: self.train.adapter_mode,
            lora_rank: self.train.lora_rank,
            schedule: ScheduleConfig {
                mode: self.schedule.mode,
                warmup_steps: self.schedule.warmup_steps,
                total_steps: self.schedule.total_steps,
                incre_interval: self.schedule.incre_interval,
                k_fixed: self.schedule.k_fixed,
            },
            r_ref: self.schedule.r_ref,
            r_init: self.schedule.r_init,
            delta_r: self.schedule.delta_r,
            seed,
        }
    }

    /// Short content-derived identifier, stable across re-runs. The output
    /// directory is excluded: where results land does not change what the
    /// experiment is.
    pub fn run_id(&self) -> String {
        let mut identity = self.clone();
        identity.experiment.output_dir = String::new();
        let canonical = identity.to_toml_string().unwrap_or_default();
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(6).fold(String::new(), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        })
    }
}

/// Self-contained record of one seed's run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub steps: Vec<StepMetric>,
    pub growth_events: Vec<GrowthEvent>,
    pub score_snapshots: Vec<ScoreSnapshot>,
    pub final_ranks: Vec<RankEntry>,
    pub initial_eval_loss: f64,
    /// Absent when the run aborted on a numerical failure.
    pub final_eval_loss: Option<f64>,
    pub score_flops: u64,
    pub budget_final: i64,
    /// Wall-clock seconds; the only nondeterministic field, excluded from
    /// [`RunRecord::deterministic_json`].
    pub wall_clock_secs: f64,
    /// Checkpoint file name, sibling of the record file.
    pub checkpoint_file: String,
}

impl RunRecord {
    /// Canonical JSON with the wall-clock field zeroed: two runs of the same
    /// config and seed produce byte-identical output.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut clone = self.clone();
        clone.wall_clock_secs = 0.0;
        serde_json::to_string_pretty(&clone).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }

    pub fn checkpoint_path(&self, record_path: &Path) -> PathBuf {
        record_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&self.checkpoint_file)
    }
}

fn seed_stem(run_id: &str, seed: u64) -> String {
    format!("{run_id}_seed{seed}")
}

fn write_metrics_tsv(path: &Path, steps: &[StepMetric]) -> Result<()> {
    let mut out = String::from("t\tloss\tlr\tbudget\torth\n");
    for s in steps {
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", s.t, s.loss, s.lr, s.budget, s.orth);
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_scores_tsv(path: &Path, snapshots: &[ScoreSnapshot]) -> Result<()> {
    let mut out = String::from("t\tsite\tnorm\tscore\n");
    for s in snapshots {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", s.t, s.site, s.norm, s.score);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Aggregate statistic over seeds: mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

/// Multi-seed summary written next to the per-seed records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub run_id: String,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MeanStd>,
}

/// Paths produced by [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<PathBuf>,
    pub summary: PathBuf,
}

fn record_from_result(
    config: &ExperimentConfig,
    run_id: &str,
    seed: u64,
    result: &TrainResult,
    wall_clock_secs: f64,
) -> RunRecord {
    RunRecord {
        run_id: run_id.to_string(),
        seed,
        config: config.clone(),
        steps: result.steps.clone(),
        growth_events: result.growth_events.clone(),
        score_snapshots: result.score_snapshots.clone(),
        final_ranks: result.final_ranks.clone(),
        initial_eval_loss: result.initial_eval_loss,
        final_eval_loss: result.final_eval_loss.is_finite().then_some(result.final_eval_loss),
        score_flops: result.score_flops,
        budget_final: result.budget_final,
        wall_clock_secs,
        checkpoint_file: format!("{}.checkpoint.json", seed_stem(run_id, seed)),
    }
}

fn write_seed_files(
    dir: &Path,
    record: &RunRecord,
    checkpoints: &[AdapterCheckpoint],
    result: &TrainResult,
) -> Result<PathBuf> {
    let stem = seed_stem(&record.run_id, record.seed);
    let record_path = dir.join(format!("{stem}.record.json"));
    let json =
        serde_json::to_string_pretty(record).map_err(|e| Error::Schema(e.to_string()))?;
    fs::write(&record_path, json)?;
    let ck_json =
        serde_json::to_string_pretty(checkpoints).map_err(|e| Error::Schema(e.to_string()))?;
    fs::write(dir.join(&record.checkpoint_file), ck_json)?;
    write_metrics_tsv(&dir.join(format!("{stem}.metrics.tsv")), &result.steps)?;
    write_scores_tsv(&dir.join(format!("{stem}.scores.tsv")), &result.score_snapshots)?;
    Ok(record_path)
}

/// Executes the experiment: one training run per seed, records and metrics
/// streams on disk, plus an aggregate summary. A numerical failure still
/// flushes the partial record before the error propagates.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let run_id = config.run_id();
    let dir = PathBuf::from(&config.experiment.output_dir);
    fs::create_dir_all(&dir)?;

    let mut records = Vec::new();
    let mut finals = Vec::new();
    let mut initials = Vec::new();
    let mut ranks_added = Vec::new();
    let mut flops = Vec::new();

    for &seed in &config.experiment.seeds {
        let cfg = config.train_config(seed);
        let data = trainer::task::generate(&config.task, seed)?;
        let mut model = ToyModel::build(&config.model, &cfg.adapter_build(), seed)?;
        let started = Instant::now();
        match run_training(&mut model, &data, &cfg) {
            Ok(result) => {
                let record = record_from_result(
                    config,
                    &run_id,
                    seed,
                    &result,
                    started.elapsed().as_secs_f64(),
                );
                let path = write_seed_files(&dir, &record, &result.checkpoints, &result)?;
                records.push(path);
                initials.push(result.initial_eval_loss);
                finals.push(result.final_eval_loss);
                // Growth happens only outside baseline mode; baseline ranks
                // are fixed at lora_rank from the start.
                let added: usize = if cfg.adapter_mode == AdapterMode::Triadapt {
                    result
                        .final_ranks
                        .iter()
                        .map(|r| r.rank.saturating_sub(cfg.r_init))
                        .sum()
                } else {
                    0
                };
                ranks_added.push(added as f64);
                flops.push(result.score_flops as f64);
            }
            Err(failure) => {
                let record = record_from_result(
                    config,
                    &run_id,
                    seed,
                    &failure.partial,
                    started.elapsed().as_secs_f64(),
                );
                write_seed_files(&dir, &record, &failure.partial.checkpoints, &failure.partial)?;
                return Err(failure.error);
            }
        }
    }

    let mut metrics = BTreeMap::new();
    metrics.insert("initial_eval_loss".to_string(), mean_std(&initials));
    metrics.insert("final_eval_loss".to_string(), mean_std(&finals));
    metrics.insert("total_rank_added".to_string(), mean_std(&ranks_added));
    metrics.insert("score_flops".to_string(), mean_std(&flops));
    let summary = Summary {
        run_id: run_id.clone(),
        seeds: config.experiment.seeds.clone(),
        metrics,
    };
    let summary_path = dir.join(format!("{run_id}.summary.json"));
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Schema(e.to_string()))?,
    )?;
    Ok(RunOutput {
        records,
        summary: summary_path,
    })
}

/// Rank-table export of one record: a wide layer-by-role table and a
/// long-format file for external plotting.
#[derive(Debug, Clone)]
pub struct RankTable {
    pub wide_tsv: String,
    pub long_tsv: String,
}

pub fn export_rank_table(record: &RunRecord) -> RankTable {
    let roles: Vec<Role> = {
        let mut present: Vec<Role> = Vec::new();
        let canonical = [
            Role::Query,
            Role::Key,
            Role::Value,
            Role::Intermediate,
            Role::AttnOutput,
            Role::Output,
            Role::Dense,
        ];
        for role in canonical {
            if record.final_ranks.iter().any(|r| r.role == role) {
                present.push(role);
            }
        }
        present
    };
    let mut layers: Vec<usize> = record.final_ranks.iter().map(|r| r.layer).collect();
    layers.sort_unstable();
    layers.dedup();

    let mut wide = String::from("layer");
    for role in &roles {
        let _ = write!(wide, "\t{}", role.short_name());
    }
    wide.push('\n');
    for layer in &layers {
        let _ = write!(wide, "{layer}");
        for role in &roles {
            let rank = record
                .final_ranks
                .iter()
                .find(|r| r.layer == *layer && r.role == *role)
                .map(|r| r.rank.to_string())
                .unwrap_or_default();
            let _ = write!(wide, "\t{rank}");
        }
        wide.push('\n');
    }

    let mut long = String::from("layer\trole\trank\n");
    let mut sorted = record.final_ranks.clone();
    sorted.sort_by_key(|r| (r.layer, SiteId::new(r.layer, r.role)));
    for r in &sorted {
        let _ = writeln!(long, "{}\t{}\t{}", r.layer, r.role.short_name(), r.rank);
    }
    RankTable {
        wide_tsv: wide,
        long_tsv: long,
    }
}

/// Writes both rank-table files next to the record (or into `out_dir`).
pub fn export_rank_table_files(record_path: &Path, out_dir: Option<&Path>) -> Result<RankTable> {
    let record = RunRecord::load(record_path)?;
    let table = export_rank_table(&record);
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| record_path.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    let stem = seed_stem(&record.run_id, record.seed);
    fs::write(dir.join(format!("{stem}.ranks.tsv")), &table.wide_tsv)?;
    fs::write(dir.join(format!("{stem}.ranks_long.tsv")), &table.long_tsv)?;
    Ok(table)
}

/// One verification check result.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Full verification report; mismatches are content, not errors.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<VerifyCheck>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(VerifyCheck {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

const SCORE_TOL: f64 = 1e-12;

/// Replays a record's bookkeeping from first principles: triangular
/// invariants of the checkpoints, the score chain (including recomputing the
/// final norms from the raw checkpoint matrices), threshold legality of
/// every growth event, budget conservation, and the calendar rules.
pub fn verify(record_path: &Path) -> Result<VerifyReport> {
    let record = RunRecord::load(record_path)?;
    let ck_path = record.checkpoint_path(record_path);
    let ck_text = fs::read_to_string(&ck_path)?;
    let checkpoints: Vec<AdapterCheckpoint> =
        serde_json::from_str(&ck_text).map_err(|e| Error::Schema(format!("{}: {e}", ck_path.display())))?;

    let mut report = VerifyReport { checks: Vec::new() };
    let cfg = &record.config;
    let complete = record.final_eval_loss.is_some();

    // 1. Structural invariants of every checkpoint.
    let mut bad = Vec::new();
    for ck in &checkpoints {
        let shapes_ok = ck.a.shape() == (ck.r, ck.n)
            && ck.b.shape() == (ck.d, ck.r)
            && ck.l.shape() == (ck.r, ck.r)
            && ck.u.shape() == (ck.r, ck.r);
        if !shapes_ok || !ck.l.is_lower_triangular() || !ck.u.is_strictly_upper_triangular() {
            bad.push(ck.site_id.to_string());
        }
    }
    report.push(
        "triangular_invariants",
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} checkpoints structurally valid", checkpoints.len())
        } else {
            format!("violations at {bad:?}")
        },
    );

    // 2. Score chain: every snapshot's score equals the difference of
    // consecutive normalized norms for its site.
    let mut chain_fail = String::new();
    let mut last_norm: BTreeMap<SiteId, f64> = BTreeMap::new();
    for snap in &record.score_snapshots {
        match last_norm.get(&snap.site) {
            None => {
                if snap.score != 0.0 {
                    chain_fail = format!("site {} at t={} has nonzero baseline score", snap.site, snap.t);
                    break;
                }
            }
            Some(prev) => {
                let expected = snap.norm - prev;
                if (snap.score - expected).abs() > SCORE_TOL {
                    chain_fail = format!(
                        "site {} at t={}: score {} but norm difference {}",
                        snap.site, snap.t, snap.score, expected
                    );
                    break;
                }
            }
        }
        last_norm.insert(snap.site, snap.norm);
    }
    report.push(
        "score_chain",
        chain_fail.is_empty(),
        if chain_fail.is_empty() {
            format!("{} snapshots consistent", record.score_snapshots.len())
        } else {
            chain_fail
        },
    );

    // 3. Final norms recomputed brute-force from the raw checkpoint L and U
    // (only meaningful for completed runs, which end with a bookkeeping
    // evaluation).
    if complete && cfg.train.adapter_mode == AdapterMode::Triadapt {
        let mut fail = String::new();
        for ck in &checkpoints {
            let mut sumsq = 0.0;
            for i in 0..ck.r {
                for j in 0..ck.r {
                    let v = ck.l.get(i, j) + ck.u.get(i, j);
                    sumsq += v * v;
                }
            }
            let raw = sumsq.sqrt();
            let normalized = cfg.train.norm_variant.apply(raw, ck.r);
            match last_norm.get(&ck.site_id) {
                Some(stored) if (stored - normalized).abs() <= SCORE_TOL => {}
                Some(stored) => {
                    fail = format!(
                        "site {}: final snapshot norm {} but checkpoint recomputes to {}",
                        ck.site_id, stored, normalized
                    );
                    break;
                }
                None => {
                    fail = format!("site {} has no snapshots", ck.site_id);
                    break;
                }
            }
            if (ck.norm_record.prev_norm - raw).abs() > SCORE_TOL || ck.norm_record.prev_rank != ck.r {
                fail = format!("site {}: stale norm record in checkpoint", ck.site_id);
                break;
            }
        }
        report.push(
            "final_norm_oracle",
            fail.is_empty(),
            if fail.is_empty() {
                "checkpoint norms match the snapshot stream".to_string()
            } else {
                fail
            },
        );
    }

    // 4. Growth events: threshold legality, charge arithmetic, chaining,
    // calendar and gate rules.
    let m = checkpoints.len().max(record.final_ranks.len());
    let mut event_fail = String::new();
    let r0 = (cfg.schedule.r_ref * m) as i64;
    let mut expected_before = r0 - (cfg.schedule.r_init * m) as i64;
    for (index, e) in record.growth_events.iter().enumerate() {
        if e.t <= cfg.schedule.warmup_steps
            || (e.t - cfg.schedule.warmup_steps) % cfg.schedule.incre_interval != 0
            || e.t > cfg.schedule.total_steps
        {
            event_fail = format!("event {index} at t={} violates the growth calendar", e.t);
            break;
        }
        if e.r_before != expected_before {
            event_fail = format!(
                "event {index} at t={}: budget before is {} but the recurrence gives {}",
                e.t, e.r_before, expected_before
            );
            break;
        }
        if e.r_before <= 0 {
            event_fail = format!("event {index} at t={} ran with exhausted budget {}", e.t, e.r_before);
            break;
        }
        let k_expected = match cfg.schedule.mode {
            ThresholdMode::Linear => linear_k(
                e.r_before,
                e.t,
                cfg.schedule.warmup_steps,
                cfg.schedule.total_steps,
                m,
            )?,
            ThresholdMode::Nonlinear => nonlinear_k(
                e.r_before,
                e.t,
                cfg.schedule.warmup_steps,
                cfg.schedule.total_steps,
                m,
            )?,
            ThresholdMode::FixedK => cfg.schedule.k_fixed.min(m),
        };
        if e.k != k_expected {
            event_fail = format!(
                "event {index} at t={}: recorded k={} but recomputation gives {}",
                e.t, e.k, k_expected
            );
            break;
        }
        if e.selected.is_empty() || e.selected.len() > e.k {
            event_fail = format!(
                "event {index} at t={}: {} selected sites with k={}",
                e.t,
                e.selected.len(),
                e.k
            );
            break;
        }
        let charge = (cfg.schedule.delta_r * e.selected.len()) as i64;
        if e.r_after != e.r_before - charge {
            event_fail = format!(
                "event {index} at t={}: charge mismatch {} -> {}",
                e.t, e.r_before, e.r_after
            );
            break;
        }
        expected_before = e.r_after;
    }
    report.push(
        "growth_events",
        event_fail.is_empty(),
        if event_fail.is_empty() {
            format!("{} events legal", record.growth_events.len())
        } else {
            event_fail
        },
    );

    // 5. Budget conservation against the final state.
    if cfg.train.adapter_mode == AdapterMode::Triadapt {
        let grown: usize = record.growth_events.iter().map(|e| e.selected.len()).sum();
        let expected_final = if record.growth_events.is_empty() && record.budget_final == r0 {
            // Warm-up covered the run: the initial allocation never happened.
            r0
        } else {
            r0 - (cfg.schedule.r_init * m) as i64 - (cfg.schedule.delta_r * grown) as i64
        };
        let conserved = record.budget_final == expected_final;
        let mut detail = format!(
            "r_init*M + delta_r*sum(k) = {} vs R0 - R_final = {}",
            (cfg.schedule.r_init * m) as i64 + (cfg.schedule.delta_r * grown) as i64,
            r0 - record.budget_final
        );
        // Rank table must agree with the growth log.
        let total_rank: usize = record.final_ranks.iter().map(|r| r.rank).sum();
        let expected_rank = cfg.schedule.r_init * m + cfg.schedule.delta_r * grown;
        let ranks_ok = total_rank == expected_rank;
        if !ranks_ok {
            detail = format!("final ranks sum to {total_rank}, growth log implies {expected_rank}");
        }
        // Checkpoint ranks must match the rank table.
        let ck_ok = checkpoints.iter().all(|ck| {
            record
                .final_ranks
                .iter()
                .any(|r| r.layer == ck.site_id.layer && r.role == ck.site_id.role && r.rank == ck.r)
        });
        report.push(
            "budget_conservation",
            conserved && ranks_ok && ck_ok,
            detail,
        );
    }

    // 6. Per-step budget stream is consistent with the events. The initial
    // allocation is deducted at the first boundary whether or not a growth
    // event fired there (the gate may close right after it, or every site
    // may already be at its cap).
    let mut stream_fail = String::new();
    if cfg.train.adapter_mode == AdapterMode::Triadapt {
        let first_boundary = cfg.schedule.warmup_steps + cfg.schedule.incre_interval;
        let mut expected = r0;
        let mut events = record.growth_events.iter().peekable();
        for s in &record.steps {
            if s.t == first_boundary && expected == r0 {
                expected = r0 - (cfg.schedule.r_init * m) as i64;
            }
            while let Some(e) = events.peek() {
                if e.t <= s.t {
                    expected = e.r_after;
                    events.next();
                } else {
                    break;
                }
            }
            if s.budget != expected {
                stream_fail = format!("step {}: budget {} but events imply {}", s.t, s.budget, expected);
                break;
            }
        }
        report.push(
            "budget_stream",
            stream_fail.is_empty(),
            if stream_fail.is_empty() {
                "per-step budget matches the event log".to_string()
            } else {
                stream_fail
            },
        );
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml(outdir: &str) -> String {
        format!(
            r#"
[experiment]
output_dir = "{outdir}"
seeds = [1, 2]

[model]
topology = "mlp"
input_dim = 8
output_dim = 8
hidden_dims = [6]
activation = "tanh"

[task]
kind = "regression"
input_dim = 8
output_dim = 8
teacher_rank = 2
samples = 40
noise_std = 0.02
seed = 7

[train]
learning_rate = 0.02
batch_size = 8
orth_enabled = false
init_std = 0.1

[schedule]
mode = "linear"
warmup_steps = 10
total_steps = 80
incre_interval = 10
r_ref = 3
"#
        )
    }

    #[test]
    fn config_round_trips_losslessly() {
        let cfg = ExperimentConfig::from_toml_str(&minimal_toml("out")).unwrap();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.run_id(), back.run_id());
    }

    #[test]
    fn unknown_keys_are_fatal_and_named() {
        let mut text = minimal_toml("out");
        text.push_str("\n[absurd]\nx = 1\n");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));

        let text = minimal_toml("out").replace(
            "warmup_steps = 10",
            "warmup_steps = 10\nfinal_warmup = 5",
        );
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("final_warmup"), "got: {msg}");
    }

    #[test]
    fn mismatched_task_and_model_dims_rejected() {
        let text = minimal_toml("out").replace("input_dim = 8\noutput_dim = 8\nteacher_rank", "input_dim = 9\noutput_dim = 8\nteacher_rank");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err}");
    }

    #[test]
    fn mean_std_matches_hand_computation() {
        let ms = mean_std(&[1.0, 2.0, 3.0]);
        assert!((ms.mean - 2.0).abs() < 1e-15);
        assert!((ms.std - 1.0).abs() < 1e-15);
        let single = mean_std(&[5.0]);
        assert_eq!(single.std, 0.0);
    }
}
