//! Toy host models the adapters attach to: a plain MLP stack and a single
//! single-head attention block with all six projection roles adapted.
//!
//! A sample is a matrix whose columns are token vectors. The MLP maps each
//! column independently; the attention block couples columns through the
//! softmax attention weights. Every site processes one column vector at a
//! time, so adapter gradients are plain per-column outer products.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterGrads, AdapterState, InitPolicy, Role, SiteId};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngState};

/// Pointwise nonlinearity between MLP layers (never applied after the last
/// layer) and inside the attention block's feed-forward half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    fn derivative(&self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Mlp,
    AttentionBlock,
}

/// Host-model shape and initialization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub topology: Topology,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Hidden widths for the MLP topology.
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    /// Feed-forward width of the attention block; defaults to `input_dim`.
    #[serde(default)]
    pub ffn_dim: Option<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Std of the frozen base weights; defaults to `1/sqrt(fan_in)` per site.
    #[serde(default)]
    pub w0_std: Option<f64>,
    /// Indices (in site order) of sites kept frozen-plain instead of adapted.
    #[serde(default)]
    pub frozen_sites: Vec<usize>,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        match self.topology {
            Topology::Mlp => {
                if self.hidden_dims.contains(&0) {
                    return Err(Error::Config("hidden_dims must be positive".into()));
                }
            }
            Topology::AttentionBlock => {
                if self.ffn_dim == Some(0) {
                    return Err(Error::Config("ffn_dim must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Weight shapes in site order: MLP layers front to back, or the six
    /// attention roles in computation order Wq, Wk, Wv, Wa, Wm, Wo.
    fn site_specs(&self) -> Vec<(SiteId, usize, usize)> {
        match self.topology {
            Topology::Mlp => {
                let mut dims = vec![self.input_dim];
                dims.extend(&self.hidden_dims);
                dims.push(self.output_dim);
                (0..dims.len() - 1)
                    .map(|l| (SiteId::new(l, Role::Dense), dims[l + 1], dims[l]))
                    .collect()
            }
            Topology::AttentionBlock => {
                let n = self.input_dim;
                let m = self.ffn_dim.unwrap_or(n);
                vec![
                    (SiteId::new(0, Role::Query), n, n),
                    (SiteId::new(0, Role::Key), n, n),
                    (SiteId::new(0, Role::Value), n, n),
                    (SiteId::new(0, Role::AttnOutput), n, n),
                    (SiteId::new(0, Role::Intermediate), m, n),
                    (SiteId::new(0, Role::Output), self.output_dim, m),
                ]
            }
        }
    }
}

/// Adapter construction settings shared by every site.
#[derive(Debug, Clone, Copy)]
pub struct AdapterBuild {
    pub alpha: f64,
    pub epsilon: f64,
    pub init_std: f64,
    /// When set, sites start at this rank with `D` fixed to the identity
    /// (plain-LoRA baseline mode).
    pub lora_baseline_rank: Option<usize>,
}

/// One weight site of the host model.
#[derive(Debug, Clone)]
pub enum SiteWeight {
    Adapted(AdapterState),
    Plain { weight: Matrix, trainable: bool },
}

impl SiteWeight {
    fn forward(&self, x: &[f64], branch_x: &[f64]) -> Result<Vec<f64>> {
        match self {
            SiteWeight::Adapted(state) => state.forward_split(x, branch_x),
            SiteWeight::Plain { weight, .. } => weight.matvec(x),
        }
    }

    pub fn frozen_weight(&self) -> &Matrix {
        match self {
            SiteWeight::Adapted(state) => state.w0(),
            SiteWeight::Plain { weight, .. } => weight,
        }
    }
}

/// Per-site gradient accumulated over a batch.
#[derive(Debug, Clone)]
pub enum SiteGrad {
    Adapter(AdapterGrads),
    Plain(Matrix),
    /// Frozen site: nothing to update.
    None,
}

/// Cached per-column inputs recorded during a training forward pass, in the
/// order the site consumed them.
#[derive(Debug, Default, Clone)]
struct SiteTape {
    /// (input column, adapter-branch input column after dropout).
    calls: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Everything the backward pass needs from one forward pass over a sample.
#[derive(Debug, Clone)]
pub struct TrainCache {
    tapes: Vec<SiteTape>,
    /// MLP: pre-activation matrix per layer. Attention: pre-activation of
    /// the feed-forward half.
    preacts: Vec<Matrix>,
    /// Attention only: softmax weights (queries in rows) and the V matrix.
    attn_weights: Option<Matrix>,
    values: Option<Matrix>,
    queries: Option<Matrix>,
    keys: Option<Matrix>,
}

/// Dropout on the adapter branch input: each coordinate is zeroed with
/// probability `p` and survivors are scaled by `1/(1-p)`.
struct BranchDropout<'r> {
    p: f64,
    rng: Option<&'r mut RngState>,
}

impl BranchDropout<'_> {
    fn apply(&mut self, x: &[f64]) -> Vec<f64> {
        match (&mut self.rng, self.p > 0.0) {
            (Some(rng), true) => {
                let keep = 1.0 - self.p;
                x.iter()
                    .map(|v| {
                        let u = ((rng.next_u64() >> 11) as f64) / ((1u64 << 53) as f64);
                        if u < self.p {
                            0.0
                        } else {
                            v / keep
                        }
                    })
                    .collect()
            }
            _ => x.to_vec(),
        }
    }
}

/// Host model with an ordered list of weight sites.
#[derive(Debug, Clone)]
pub struct ToyModel {
    topology: Topology,
    activation: Activation,
    sites: Vec<(SiteId, SiteWeight)>,
    input_dim: usize,
    output_dim: usize,
}

// Attention site indices in computation order.
const QI: usize = 0;
const KI: usize = 1;
const VI: usize = 2;
const AI: usize = 3;
const MI: usize = 4;
const OI: usize = 5;

impl ToyModel {
    /// Builds the model with deterministic initialization: frozen bases from
    /// the `w0` stream of `seed`, each site's adapter from its own stream.
    pub fn build(cfg: &ModelConfig, adapter: &AdapterBuild, seed: u64) -> Result<ToyModel> {
        cfg.validate()?;
        let root = RngState::new(seed);
        let mut w0_rng = root.derive(crate::trainer::streams::W0);
        let mut sites = Vec::new();
        for (index, (site_id, d, n)) in cfg.site_specs().into_iter().enumerate() {
            let std = cfg.w0_std.unwrap_or(1.0 / (n as f64).sqrt());
            let w0 = Matrix::gaussian(d, n, std, &mut w0_rng)?;
            let weight = if cfg.frozen_sites.contains(&index) {
                SiteWeight::Plain {
                    weight: w0,
                    trainable: false,
                }
            } else {
                let mut site_rng =
                    root.derive(crate::trainer::streams::ADAPTER_BASE + site_id.stream_label());
                let mut state = AdapterState::init(
                    site_id,
                    w0,
                    adapter.alpha,
                    adapter.epsilon,
                    adapter.init_std,
                    &mut site_rng,
                )?;
                if let Some(rank) = adapter.lora_baseline_rank {
                    if rank > 1 {
                        state.grow_rank(rank - 1, InitPolicy::Gaussian, adapter.init_std, &mut site_rng)?;
                        // Re-zero B: baseline adapters start at the frozen base.
                        *state.params_mut().b = Matrix::zeros(state.output_dim(), rank);
                    }
                    state.set_identity_transform();
                }
                SiteWeight::Adapted(state)
            };
            sites.push((site_id, weight));
        }
        Ok(ToyModel {
            topology: cfg.topology,
            activation: cfg.activation,
            sites,
            input_dim: cfg.input_dim,
            output_dim: cfg.output_dim,
        })
    }

    /// Same topology and identical frozen weights, but every site a plain
    /// trainable matrix: the full fine-tuning arm.
    pub fn to_full_finetune(&self) -> ToyModel {
        let sites = self
            .sites
            .iter()
            .map(|(id, w)| {
                (
                    *id,
                    SiteWeight::Plain {
                        weight: w.frozen_weight().clone(),
                        trainable: true,
                    },
                )
            })
            .collect();
        ToyModel {
            topology: self.topology,
            activation: self.activation,
            sites,
            input_dim: self.input_dim,
            output_dim: self.output_dim,
        }
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn sites(&self) -> &[(SiteId, SiteWeight)] {
        &self.sites
    }

    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    pub fn adapter_site_ids(&self) -> Vec<SiteId> {
        self.sites
            .iter()
            .filter(|(_, w)| matches!(w, SiteWeight::Adapted(_)))
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn adapter_states(&self) -> Vec<&AdapterState> {
        self.sites
            .iter()
            .filter_map(|(_, w)| match w {
                SiteWeight::Adapted(s) => Some(s),
                _ => None,
            })
            .collect()
    }

    pub fn adapter_states_mut(&mut self) -> Vec<&mut AdapterState> {
        self.sites
            .iter_mut()
            .filter_map(|(_, w)| match w {
                SiteWeight::Adapted(s) => Some(s),
                _ => None,
            })
            .collect()
    }

    pub fn adapter_state(&self, site: SiteId) -> Option<&AdapterState> {
        self.sites.iter().find_map(|(id, w)| match w {
            SiteWeight::Adapted(s) if *id == site => Some(s),
            _ => None,
        })
    }

    pub fn adapter_state_mut(&mut self, site: SiteId) -> Option<&mut AdapterState> {
        self.sites.iter_mut().find_map(|(id, w)| match w {
            SiteWeight::Adapted(s) if *id == site => Some(s),
            _ => None,
        })
    }

    pub fn site_weight_mut(&mut self, index: usize) -> &mut SiteWeight {
        &mut self.sites[index].1
    }

    /// Whether the site can still take `delta_r` more rank.
    pub fn can_grow(&self, site: SiteId, delta_r: usize) -> bool {
        self.adapter_state(site)
            .map(|s| s.rank() + delta_r <= s.rank_cap())
            .unwrap_or(false)
    }

    /// Evaluation forward pass (no dropout, no caches).
    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        let (out, _) = self.forward_inner(x, &mut BranchDropout { p: 0.0, rng: None }, false)?;
        Ok(out)
    }

    /// Training forward pass; records the tape needed by [`ToyModel::backward`].
    pub fn forward_train(
        &self,
        x: &Matrix,
        dropout_p: f64,
        dropout_rng: Option<&mut RngState>,
    ) -> Result<(Matrix, TrainCache)> {
        let mut dropout = BranchDropout {
            p: dropout_p,
            rng: dropout_rng,
        };
        let (out, cache) = self.forward_inner(x, &mut dropout, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    fn forward_inner(
        &self,
        x: &Matrix,
        dropout: &mut BranchDropout,
        want_cache: bool,
    ) -> Result<(Matrix, Option<TrainCache>)> {
        if x.rows() != self.input_dim {
            return Err(Error::dim(
                "model forward",
                format!("input dim {}", self.input_dim),
                format!("{} rows", x.rows()),
            ));
        }
        let mut cache = want_cache.then(|| TrainCache {
            tapes: vec![SiteTape::default(); self.sites.len()],
            preacts: Vec::new(),
            attn_weights: None,
            values: None,
            queries: None,
            keys: None,
        });
        match self.topology {
            Topology::Mlp => self.forward_mlp(x, dropout, &mut cache),
            Topology::AttentionBlock => self.forward_attention(x, dropout, &mut cache),
        }
        .map(|out| (out, cache))
    }

    /// Applies one site to every column of `z`, recording the tape.
    fn apply_site(
        &self,
        index: usize,
        z: &Matrix,
        dropout: &mut BranchDropout,
        cache: &mut Option<TrainCache>,
    ) -> Result<Matrix> {
        let site = &self.sites[index].1;
        let mut cols = Vec::with_capacity(z.cols());
        for j in 0..z.cols() {
            let x = z.col(j);
            let branch = match site {
                SiteWeight::Adapted(_) => dropout.apply(&x),
                SiteWeight::Plain { .. } => x.clone(),
            };
            let h = site.forward(&x, &branch)?;
            if let Some(c) = cache.as_mut() {
                c.tapes[index].calls.push((x, branch));
            }
            cols.push(h);
        }
        Ok(Matrix::from_cols(&cols))
    }

    fn activate(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                out.set(i, j, self.activation.apply(m.get(i, j)));
            }
        }
        out
    }

    fn forward_mlp(
        &self,
        x: &Matrix,
        dropout: &mut BranchDropout,
        cache: &mut Option<TrainCache>,
    ) -> Result<Matrix> {
        let last = self.sites.len() - 1;
        let mut z = x.clone();
        for index in 0..self.sites.len() {
            let pre = self.apply_site(index, &z, dropout, cache)?;
            z = if index < last { self.activate(&pre) } else { pre.clone() };
            if let Some(c) = cache.as_mut() {
                c.preacts.push(pre);
            }
        }
        Ok(z)
    }

    fn forward_attention(
        &self,
        x: &Matrix,
        dropout: &mut BranchDropout,
        cache: &mut Option<TrainCache>,
    ) -> Result<Matrix> {
        let q = self.apply_site(QI, x, dropout, cache)?;
        let k = self.apply_site(KI, x, dropout, cache)?;
        let v = self.apply_site(VI, x, dropout, cache)?;
        let weights = attention_weights(&q, &k)?;
        // combined column j = sum_i weights[j][i] * v_i
        let combined = v.matmul(&weights.transpose())?;
        let proj = self.apply_site(AI, &combined, dropout, cache)?;
        let pre = self.apply_site(MI, &proj, dropout, cache)?;
        let hidden = self.activate(&pre);
        let out = self.apply_site(OI, &hidden, dropout, cache)?;
        if let Some(c) = cache.as_mut() {
            c.preacts.push(pre);
            c.attn_weights = Some(weights);
            c.values = Some(v);
            c.queries = Some(q);
            c.keys = Some(k);
        }
        Ok(out)
    }

    /// Backward pass over one sample. Parameter gradients (scaled by
    /// `weight`) accumulate into `grads`, which must be aligned with the site
    /// list. Returns nothing: input gradients are not needed at the model
    /// boundary.
    pub fn backward(
        &self,
        cache: &TrainCache,
        upstream: &Matrix,
        weight: f64,
        grads: &mut [SiteGrad],
    ) -> Result<()> {
        match self.topology {
            Topology::Mlp => self.backward_mlp(cache, upstream, weight, grads),
            Topology::AttentionBlock => self.backward_attention(cache, upstream, weight, grads),
        }
    }

    /// Pushes one column's gradient through a site: accumulates parameter
    /// gradients and returns the gradient with respect to the site input.
    fn site_column_backward(
        &self,
        index: usize,
        call: &(Vec<f64>, Vec<f64>),
        upstream: &[f64],
        weight: f64,
        grads: &mut [SiteGrad],
    ) -> Result<Vec<f64>> {
        let (x, branch_x) = call;
        match &self.sites[index].1 {
            SiteWeight::Adapted(state) => {
                let g = state.analytic_grads(branch_x, upstream)?;
                match &mut grads[index] {
                    SiteGrad::Adapter(acc) => acc.accumulate(&g, weight)?,
                    other => *other = SiteGrad::Adapter(scale_grads(&g, weight)),
                }
                // Input gradient: W0 path on x plus the adapter branch. When
                // dropout zeroed a coordinate, its branch contribution is
                // zero; the surviving coordinates were scaled in the forward
                // pass, so the chain factor is branch_x[i] / x[i]. Dropout is
                // off on every test path that checks gradients exactly.
                let mut gx = state.w0().matvec_transposed(upstream)?;
                let branch_grad = state.branch_input_gradient(upstream)?;
                for i in 0..gx.len() {
                    let factor = if x[i] == 0.0 {
                        1.0
                    } else {
                        branch_x[i] / x[i]
                    };
                    gx[i] += factor * branch_grad[i];
                }
                Ok(gx)
            }
            SiteWeight::Plain { weight: w, trainable } => {
                if *trainable {
                    let gw = outer_scaled(upstream, x, weight);
                    match &mut grads[index] {
                        SiteGrad::Plain(acc) => *acc = acc.add(&gw)?,
                        other => *other = SiteGrad::Plain(gw),
                    }
                }
                w.matvec_transposed(upstream)
            }
        }
    }

    fn backward_mlp(
        &self,
        cache: &TrainCache,
        upstream: &Matrix,
        weight: f64,
        grads: &mut [SiteGrad],
    ) -> Result<()> {
        let last = self.sites.len() - 1;
        let cols = upstream.cols();
        // Gradient w.r.t. each layer's pre-activation, walking backwards.
        let mut g = upstream.clone();
        for index in (0..self.sites.len()).rev() {
            if index < last {
                // Chain through the activation that followed this layer.
                let pre = &cache.preacts[index];
                let mut gated = g.clone();
                for i in 0..g.rows() {
                    for j in 0..cols {
                        gated.set(i, j, g.get(i, j) * self.activation.derivative(pre.get(i, j)));
                    }
                }
                g = gated;
            }
            let mut input_grads = Vec::with_capacity(cols);
            for j in 0..cols {
                let gx = self.site_column_backward(
                    index,
                    &cache.tapes[index].calls[j],
                    &g.col(j),
                    weight,
                    grads,
                )?;
                input_grads.push(gx);
            }
            g = Matrix::from_cols(&input_grads);
        }
        Ok(())
    }

    fn backward_attention(
        &self,
        cache: &TrainCache,
        upstream: &Matrix,
        weight: f64,
        grads: &mut [SiteGrad],
    ) -> Result<()> {
        let cols = upstream.cols();
        let weights = cache.attn_weights.as_ref().expect("attention cache");
        let v = cache.values.as_ref().expect("attention cache");
        let q = cache.queries.as_ref().expect("attention cache");
        let k = cache.keys.as_ref().expect("attention cache");
        let pre = &cache.preacts[0];
        let d_k = q.rows() as f64;

        // Wo, then the activation, then Wm, then Wa.
        let mut d_hidden = Vec::with_capacity(cols);
        for j in 0..cols {
            d_hidden.push(self.site_column_backward(
                OI,
                &cache.tapes[OI].calls[j],
                &upstream.col(j),
                weight,
                grads,
            )?);
        }
        let mut d_pre = Matrix::from_cols(&d_hidden);
        for i in 0..d_pre.rows() {
            for j in 0..cols {
                d_pre.set(i, j, d_pre.get(i, j) * self.activation.derivative(pre.get(i, j)));
            }
        }
        let mut d_proj = Vec::with_capacity(cols);
        for j in 0..cols {
            d_proj.push(self.site_column_backward(
                MI,
                &cache.tapes[MI].calls[j],
                &d_pre.col(j),
                weight,
                grads,
            )?);
        }
        let mut d_combined = Vec::with_capacity(cols);
        for j in 0..cols {
            d_combined.push(self.site_column_backward(
                AI,
                &cache.tapes[AI].calls[j],
                &d_proj[j],
                weight,
                grads,
            )?);
        }
        let d_combined = Matrix::from_cols(&d_combined);

        // combined = V * weights^T: dV = dC * weights, dweights = dC^T V.
        let d_values = d_combined.matmul(weights)?;
        let d_weights = d_combined.transpose().matmul(v)?;

        // Row softmax backward: dS_ji = W_ji (dW_ji - sum_i' dW_ji' W_ji').
        let t = weights.rows();
        let mut d_scores = Matrix::zeros(t, t);
        for j in 0..t {
            let dot: f64 = (0..t).map(|i| d_weights.get(j, i) * weights.get(j, i)).sum();
            for i in 0..t {
                d_scores.set(j, i, weights.get(j, i) * (d_weights.get(j, i) - dot));
            }
        }

        // scores_ji = q_j . k_i / sqrt(d_k).
        let scale = 1.0 / d_k.sqrt();
        let d_q = k.matmul(&d_scores.transpose())?.scale(scale);
        let d_kmat = q.matmul(&d_scores)?.scale(scale);

        for j in 0..cols {
            self.site_column_backward(QI, &cache.tapes[QI].calls[j], &d_q.col(j), weight, grads)?;
            self.site_column_backward(KI, &cache.tapes[KI].calls[j], &d_kmat.col(j), weight, grads)?;
            self.site_column_backward(VI, &cache.tapes[VI].calls[j], &d_values.col(j), weight, grads)?;
        }
        Ok(())
    }

    /// Scans a forward pass for the first site producing a non-finite value,
    /// for numerical-failure diagnostics.
    pub fn first_nonfinite_site(&self, x: &Matrix) -> Option<SiteId> {
        let mut dropout = BranchDropout { p: 0.0, rng: None };
        let mut cache = None;
        // Re-run the forward site by site; the first site whose output is not
        // finite is the culprit.
        let probe = |m: &Matrix| m.as_slice().iter().all(|v| v.is_finite());
        match self.topology {
            Topology::Mlp => {
                let last = self.sites.len() - 1;
                let mut z = x.clone();
                for index in 0..self.sites.len() {
                    let pre = self.apply_site(index, &z, &mut dropout, &mut cache).ok()?;
                    if !probe(&pre) {
                        return Some(self.sites[index].0);
                    }
                    z = if index < last { self.activate(&pre) } else { pre };
                }
                None
            }
            Topology::AttentionBlock => {
                for index in [QI, KI, VI, AI, MI, OI] {
                    let out = self.apply_site(index, x, &mut dropout, &mut cache).ok()?;
                    if !probe(&out) {
                        return Some(self.sites[index].0);
                    }
                }
                None
            }
        }
    }
}

/// Row-stochastic attention weights `softmax(Q^T K / sqrt(d_k))`; row `j`
/// holds query `j`'s distribution over key positions.
pub fn attention_weights(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    if q.rows() != k.rows() {
        return Err(Error::dim(
            "attention scores",
            format!("{} query dims", q.rows()),
            format!("{} key dims", k.rows()),
        ));
    }
    let t = q.cols();
    let scale = 1.0 / (q.rows() as f64).sqrt();
    let mut weights = Matrix::zeros(t, t);
    for j in 0..t {
        let qj = q.col(j);
        let mut row: Vec<f64> = (0..t)
            .map(|i| {
                let ki = k.col(i);
                scale * qj.iter().zip(&ki).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for (i, s) in row.iter().enumerate() {
            weights.set(j, i, s / sum);
        }
    }
    Ok(weights)
}

fn outer_scaled(u: &[f64], v: &[f64], c: f64) -> Matrix {
    let mut m = Matrix::zeros(u.len(), v.len());
    for (i, ui) in u.iter().enumerate() {
        for (j, vj) in v.iter().enumerate() {
            m.set(i, j, c * ui * vj);
        }
    }
    m
}

fn scale_grads(g: &AdapterGrads, c: f64) -> AdapterGrads {
    AdapterGrads {
        ga: g.ga.scale(c),
        gb: g.gb.scale(c),
        gl: g.gl.scale(c),
        gu: g.gu.scale(c),
    }
}

/// Fresh gradient slots aligned with the model's site list.
pub fn empty_grads(model: &ToyModel) -> Vec<SiteGrad> {
    model.sites().iter().map(|_| SiteGrad::None).collect()
}
