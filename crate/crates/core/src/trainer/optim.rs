//! Gradient-based parameter updates with decoupled weight decay.
//!
//! Two update rules behind one config switch: plain gradient descent and
//! AdamW-style moment estimation. Weight decay is decoupled in both
//! (`w -= lr * wd * w` alongside the gradient step), so exact zeros in the
//! triangular masks stay exact.

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterGrads;
use crate::error::Result;
use crate::linalg::Matrix;
use crate::trainer::model::{SiteGrad, SiteWeight, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Moments {
    m: Matrix,
    v: Matrix,
}

impl Moments {
    fn zeros(rows: usize, cols: usize) -> Self {
        Moments {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
        }
    }

    /// Embeds the old moments in the top-left of a larger zero matrix,
    /// matching how grown factors keep their old block.
    fn grow_to(&mut self, rows: usize, cols: usize) {
        let mut m = Matrix::zeros(rows, cols);
        let mut v = Matrix::zeros(rows, cols);
        for i in 0..self.m.rows() {
            for j in 0..self.m.cols() {
                m.set(i, j, self.m.get(i, j));
                v.set(i, j, self.v.get(i, j));
            }
        }
        self.m = m;
        self.v = v;
    }
}

#[derive(Debug, Clone)]
enum SiteOptState {
    Adapter {
        a: Moments,
        b: Moments,
        l: Moments,
        u: Moments,
    },
    Plain(Moments),
    Frozen,
}

/// Scalar parameters of the update rule, copyable so per-site updates do not
/// fight the borrow on the moment buffers.
#[derive(Debug, Clone, Copy)]
struct Rule {
    kind: OptimizerKind,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
}

fn update_matrix(rule: Rule, w: &mut Matrix, g: &Matrix, mom: &mut Moments, lr: f64, bias_t: usize) {
    debug_assert_eq!(w.shape(), g.shape());
    let decay = 1.0 - lr * rule.weight_decay;
    match rule.kind {
        OptimizerKind::Sgd => {
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    let v = w.get(i, j) * decay - lr * g.get(i, j);
                    w.set(i, j, v);
                }
            }
        }
        OptimizerKind::Adamw => {
            let bc1 = 1.0 - rule.beta1.powi(bias_t as i32);
            let bc2 = 1.0 - rule.beta2.powi(bias_t as i32);
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    let gij = g.get(i, j);
                    let m = rule.beta1 * mom.m.get(i, j) + (1.0 - rule.beta1) * gij;
                    let v = rule.beta2 * mom.v.get(i, j) + (1.0 - rule.beta2) * gij * gij;
                    mom.m.set(i, j, m);
                    mom.v.set(i, j, v);
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    let new = w.get(i, j) * decay - lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    w.set(i, j, new);
                }
            }
        }
    }
}

/// Optimizer over every trainable site of a model.
#[derive(Debug, Clone)]
pub struct Optimizer {
    rule: Rule,
    step: usize,
    states: Vec<SiteOptState>,
}

impl Optimizer {
    pub fn new(
        model: &ToyModel,
        kind: OptimizerKind,
        weight_decay: f64,
        beta1: f64,
        beta2: f64,
    ) -> Self {
        let states = model
            .sites()
            .iter()
            .map(|(_, w)| match w {
                SiteWeight::Adapted(s) => SiteOptState::Adapter {
                    a: Moments::zeros(s.rank(), s.input_dim()),
                    b: Moments::zeros(s.output_dim(), s.rank()),
                    l: Moments::zeros(s.rank(), s.rank()),
                    u: Moments::zeros(s.rank(), s.rank()),
                },
                SiteWeight::Plain { weight, trainable } => {
                    if *trainable {
                        SiteOptState::Plain(Moments::zeros(weight.rows(), weight.cols()))
                    } else {
                        SiteOptState::Frozen
                    }
                }
            })
            .collect();
        Optimizer {
            rule: Rule {
                kind,
                weight_decay,
                beta1,
                beta2,
            },
            step: 0,
            states,
        }
    }

    /// Resizes the moment buffers of a grown site; new entries start at zero.
    pub fn grow_site(&mut self, site_index: usize, new_rank: usize) {
        if let SiteOptState::Adapter { a, b, l, u } = &mut self.states[site_index] {
            a.grow_to(new_rank, a.m.cols());
            b.grow_to(b.m.rows(), new_rank);
            l.grow_to(new_rank, new_rank);
            u.grow_to(new_rank, new_rank);
        }
    }

    /// Applies one optimizer step at learning rate `lr` using the aggregated
    /// batch gradients. `train_transform = false` freezes `L` and `U`
    /// (the plain-LoRA baseline trains only `A` and `B`).
    pub fn apply(
        &mut self,
        model: &mut ToyModel,
        grads: &[SiteGrad],
        lr: f64,
        train_transform: bool,
    ) -> Result<()> {
        self.step += 1;
        let bias_t = self.step;
        let rule = self.rule;
        for index in 0..grads.len() {
            match (&grads[index], model.site_weight_mut(index), &mut self.states[index]) {
                (
                    SiteGrad::Adapter(g),
                    SiteWeight::Adapted(state),
                    SiteOptState::Adapter { a, b, l, u },
                ) => {
                    let params = state.params_mut();
                    update_matrix(rule, params.a, &g.ga, a, lr, bias_t);
                    update_matrix(rule, params.b, &g.gb, b, lr, bias_t);
                    if train_transform {
                        update_matrix(rule, params.l, &g.gl, l, lr, bias_t);
                        update_matrix(rule, params.u, &g.gu, u, lr, bias_t);
                    }
                }
                (
                    SiteGrad::Plain(g),
                    SiteWeight::Plain {
                        weight,
                        trainable: true,
                    },
                    SiteOptState::Plain(mom),
                ) => {
                    update_matrix(rule, weight, g, mom, lr, bias_t);
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Adds the orthogonality-penalty gradients (scaled by the regularization
/// coefficient) onto a site's task gradients.
pub fn add_orth_grads(grads: &mut AdapterGrads, ga: &Matrix, gb: &Matrix, coef: f64) -> Result<()> {
    grads.ga = grads.ga.add(&ga.scale(coef))?;
    grads.gb = grads.gb.add(&gb.scale(coef))?;
    Ok(())
}
