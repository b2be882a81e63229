//! Synthetic desk-scale tasks with planted low-rank teachers, replacing real
//! benchmark datasets. Because the teacher is known, rank-allocation behavior
//! can be checked against ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngState};
use crate::trainer::streams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `y = M* x + noise` per token, `M*` a planted low-rank matrix.
    Regression,
    /// Labels `argmax(M* x + noise)` per token, softmax cross-entropy loss.
    Classification,
}

/// Task configuration. The split into train and eval is deterministic under
/// the seed; when `seed` is absent the run seed is used, so different run
/// seeds see different data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub teacher_rank: usize,
    pub samples: usize,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Tokens per sample; 1 for plain vector tasks.
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_noise_std() -> f64 {
    0.02
}

fn default_seq_len() -> usize {
    1
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("task dims must be positive".into()));
        }
        if self.teacher_rank == 0 || self.teacher_rank > self.input_dim.min(self.output_dim) {
            return Err(Error::Config(format!(
                "teacher_rank ({}) must lie in [1, min(n, d) = {}]",
                self.teacher_rank,
                self.input_dim.min(self.output_dim)
            )));
        }
        if self.samples < 5 {
            return Err(Error::Config("need at least 5 samples".into()));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be at least 1".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-token targets of one sample.
#[derive(Debug, Clone)]
pub enum Target {
    Regression(Matrix),
    Classification(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// Token columns, `input_dim x seq_len`.
    pub x: Matrix,
    pub target: Target,
}

/// Materialized dataset with a deterministic 80/20 train/eval split.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub kind: TaskKind,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub teacher: Matrix,
}

/// Generates the dataset. The planted teacher is `P Q^T` rescaled so its
/// Frobenius norm is `sqrt(output_dim)`, which puts per-entry targets at
/// unit scale for unit-normal inputs.
pub fn generate(cfg: &TaskConfig, run_seed: u64) -> Result<TaskData> {
    cfg.validate()?;
    let seed = cfg.seed.unwrap_or(run_seed);
    let mut rng = RngState::new(seed).derive(streams::TASK);

    let p = Matrix::gaussian(cfg.output_dim, cfg.teacher_rank, 1.0, &mut rng)?;
    let q = Matrix::gaussian(cfg.input_dim, cfg.teacher_rank, 1.0, &mut rng)?;
    let raw = p.matmul(&q.transpose())?;
    let teacher = raw.scale((cfg.output_dim as f64).sqrt() / raw.frobenius_norm());

    let mut samples = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let x = Matrix::gaussian(cfg.input_dim, cfg.seq_len, 1.0, &mut rng)?;
        let clean = teacher.matmul(&x)?;
        let target = match cfg.kind {
            TaskKind::Regression => {
                let mut y = clean;
                if cfg.noise_std > 0.0 {
                    for i in 0..y.rows() {
                        for j in 0..y.cols() {
                            let v = y.get(i, j) + rng.next_gaussian(cfg.noise_std);
                            y.set(i, j, v);
                        }
                    }
                }
                Target::Regression(y)
            }
            TaskKind::Classification => {
                let mut labels = Vec::with_capacity(cfg.seq_len);
                for j in 0..cfg.seq_len {
                    let mut logits = clean.col(j);
                    if cfg.noise_std > 0.0 {
                        for v in logits.iter_mut() {
                            *v += rng.next_gaussian(cfg.noise_std);
                        }
                    }
                    let label = logits
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    labels.push(label);
                }
                Target::Classification(labels)
            }
        };
        samples.push(Sample { x, target });
    }

    let train_len = (cfg.samples * 4) / 5;
    let eval = samples.split_off(train_len.max(1));
    Ok(TaskData {
        kind: cfg.kind,
        train: samples,
        eval,
        teacher,
    })
}
