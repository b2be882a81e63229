//! One adapted weight site: a frozen base matrix `W0` plus trainable low-rank
//! factors `B`, `A` and a square transformation `D = L + U` split into a
//! lower-triangular part (which owns the diagonal) and a strictly
//! upper-triangular part.
//!
//! The adapted forward map is `h = W0 x + alpha/(r + epsilon) * B (L + U) A x`,
//! always evaluated right-to-left as matrix–vector products; the dense
//! `delta_weight` product exists only for tests and export.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngState};

/// Which weight matrix a site adapts. The six attention-block roles follow
/// the usual transformer naming; `Dense` is used by plain MLP layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "Wq")]
    Query,
    #[serde(rename = "Wk")]
    Key,
    #[serde(rename = "Wv")]
    Value,
    #[serde(rename = "Wm")]
    Intermediate,
    #[serde(rename = "Wa")]
    AttnOutput,
    #[serde(rename = "Wo")]
    Output,
    #[serde(rename = "dense")]
    Dense,
}

impl Role {
    /// The six attention-block roles, in canonical column order.
    pub const ATTENTION: [Role; 6] = [
        Role::Query,
        Role::Key,
        Role::Value,
        Role::Intermediate,
        Role::AttnOutput,
        Role::Output,
    ];

    pub fn short_name(&self) -> &'static str {
        match self {
            Role::Query => "Wq",
            Role::Key => "Wk",
            Role::Value => "Wv",
            Role::Intermediate => "Wm",
            Role::AttnOutput => "Wa",
            Role::Output => "Wo",
            Role::Dense => "dense",
        }
    }
}

/// Identifies one adapter site: layer index plus matrix role.
///
/// The derived ordering (layer first, then role in declaration order) is the
/// deterministic tie-break used everywhere scores are ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub role: Role,
}

impl SiteId {
    pub fn new(layer: usize, role: Role) -> Self {
        SiteId { layer, role }
    }

    /// Stable small integer used to derive per-site RNG streams.
    pub fn stream_label(&self) -> u64 {
        let role_ix = Role::ATTENTION
            .iter()
            .position(|r| r == &self.role)
            .unwrap_or(6) as u64;
        (self.layer as u64) * 8 + role_ix
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.role.short_name())
    }
}

/// Raw Frobenius norm of `L + U` and the rank at the time it was taken.
/// Stored unnormalized so the normalization variant can be applied at
/// scoring time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub prev_norm: f64,
    pub prev_rank: usize,
}

/// How new blocks are filled during rank growth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// All new blocks of A, B, L, U get Gaussian entries. The adapted
    /// function jumps at the growth step.
    Gaussian,
    /// New B columns and the U_up coupling block are zeroed and the scaling
    /// factor is folded into alpha, so the adapted function is preserved
    /// across the growth step; the new subspace trains in from zero.
    ZeroB,
}

/// Gradients of a scalar loss with respect to the four trainable factors.
/// `gl` and `gu` carry zeros at their structurally-zero positions.
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub ga: Matrix,
    pub gb: Matrix,
    pub gl: Matrix,
    pub gu: Matrix,
}

impl AdapterGrads {
    pub fn zeros_like(state: &AdapterState) -> Self {
        AdapterGrads {
            ga: Matrix::zeros(state.rank, state.input_dim()),
            gb: Matrix::zeros(state.output_dim(), state.rank),
            gl: Matrix::zeros(state.rank, state.rank),
            gu: Matrix::zeros(state.rank, state.rank),
        }
    }

    /// `self += c * other`, used for batch aggregation.
    pub fn accumulate(&mut self, other: &AdapterGrads, c: f64) -> Result<()> {
        self.ga = self.ga.add(&other.ga.scale(c))?;
        self.gb = self.gb.add(&other.gb.scale(c))?;
        self.gl = self.gl.add(&other.gl.scale(c))?;
        self.gu = self.gu.add(&other.gu.scale(c))?;
        Ok(())
    }
}

/// Mutable views of the four trainable factors, for the optimizer.
pub struct AdapterParamsMut<'a> {
    pub a: &'a mut Matrix,
    pub b: &'a mut Matrix,
    pub l: &'a mut Matrix,
    pub u: &'a mut Matrix,
}

/// Self-describing serialized form of one adapter site (everything except the
/// frozen base weight). Float payloads survive a JSON round-trip bit-exactly:
/// serialization uses shortest round-trip decimal encoding.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterCheckpoint {
    pub site_id: SiteId,
    pub d: usize,
    pub n: usize,
    pub r: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub a: Matrix,
    pub b: Matrix,
    pub l: Matrix,
    pub u: Matrix,
    pub norm_record: NormRecord,
}

/// One TriAdaptLoRA weight site.
#[derive(Debug, Clone)]
pub struct AdapterState {
    site_id: SiteId,
    w0: Matrix,
    a: Matrix,
    b: Matrix,
    l: Matrix,
    u: Matrix,
    rank: usize,
    alpha: f64,
    epsilon: f64,
    norm_record: NormRecord,
}

impl AdapterState {
    /// Fresh site at rank 1: `A` Gaussian, `B` zero (so the adapted function
    /// starts exactly at the frozen base), `L` a 1x1 Gaussian, `U` empty by
    /// the strictly-upper convention.
    pub fn init(
        site_id: SiteId,
        w0: Matrix,
        alpha: f64,
        epsilon: f64,
        std: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        if !w0.is_finite() {
            return Err(Error::Config(format!("W0 for site {site_id} is not finite")));
        }
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::Config(format!(
                "epsilon must be nonnegative, got {epsilon}"
            )));
        }
        let (d, n) = w0.shape();
        let a = Matrix::gaussian(1, n, std, rng)?;
        let b = Matrix::zeros(d, 1);
        let l = Matrix::gaussian(1, 1, std, rng)?;
        let u = Matrix::zeros(1, 1);
        let norm_record = NormRecord {
            prev_norm: l.add(&u)?.frobenius_norm(),
            prev_rank: 1,
        };
        Ok(AdapterState {
            site_id,
            w0,
            a,
            b,
            l,
            u,
            rank: 1,
            alpha,
            epsilon,
            norm_record,
        })
    }

    /// Builds a site from explicit factors, validating shapes and the
    /// triangular invariants. Used by tests and by the LoRA baseline mode.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        site_id: SiteId,
        w0: Matrix,
        a: Matrix,
        b: Matrix,
        l: Matrix,
        u: Matrix,
        alpha: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let (d, n) = w0.shape();
        let r = a.rows();
        if a.cols() != n || b.shape() != (d, r) || l.shape() != (r, r) || u.shape() != (r, r) {
            return Err(Error::dim(
                "adapter factors",
                format!("W0 {d}x{n}, r {r}"),
                format!(
                    "A {:?}, B {:?}, L {:?}, U {:?}",
                    a.shape(),
                    b.shape(),
                    l.shape(),
                    u.shape()
                ),
            ));
        }
        if r > d.min(n) {
            return Err(Error::Capacity {
                site: site_id,
                requested: r,
                cap: d.min(n),
            });
        }
        if !l.is_lower_triangular() || !u.is_strictly_upper_triangular() {
            return Err(Error::Config(format!(
                "site {site_id}: L must be lower triangular and U strictly upper triangular"
            )));
        }
        let norm_record = NormRecord {
            prev_norm: l.add(&u)?.frobenius_norm(),
            prev_rank: r,
        };
        Ok(AdapterState {
            site_id,
            w0,
            a,
            b,
            l,
            u,
            rank: r,
            alpha,
            epsilon,
            norm_record,
        })
    }

    pub fn site_id(&self) -> SiteId {
        self.site_id
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Hard rank cap `min(n, d)`.
    pub fn rank_cap(&self) -> usize {
        self.input_dim().min(self.output_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.w0.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn l(&self) -> &Matrix {
        &self.l
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn norm_record(&self) -> NormRecord {
        self.norm_record
    }

    pub fn set_norm_record(&mut self, record: NormRecord) {
        self.norm_record = record;
    }

    /// Effective scaling factor `alpha / (r + epsilon)`.
    pub fn scale(&self) -> f64 {
        self.alpha / (self.rank as f64 + self.epsilon)
    }

    pub fn params_mut(&mut self) -> AdapterParamsMut<'_> {
        AdapterParamsMut {
            a: &mut self.a,
            b: &mut self.b,
            l: &mut self.l,
            u: &mut self.u,
        }
    }

    /// Fixes `D` to the identity (`L = I`, `U = 0`), reducing the site to a
    /// plain LoRA adapter `h = W0 x + s B A x`.
    pub fn set_identity_transform(&mut self) {
        self.l = Matrix::identity(self.rank);
        self.u = Matrix::zeros(self.rank, self.rank);
        self.norm_record = NormRecord {
            prev_norm: self.l.frobenius_norm(),
            prev_rank: self.rank,
        };
    }

    /// `(L + U) v` without materializing `D`.
    fn transform_vec(&self, v: &[f64]) -> Vec<f64> {
        let lv = self.l.matvec(v).expect("rank-sized vector");
        let uv = self.u.matvec(v).expect("rank-sized vector");
        lv.iter().zip(&uv).map(|(a, b)| a + b).collect()
    }

    /// `(L + U)^T v`.
    fn transform_vec_transposed(&self, v: &[f64]) -> Vec<f64> {
        let lv = self.l.matvec_transposed(v).expect("rank-sized vector");
        let uv = self.u.matvec_transposed(v).expect("rank-sized vector");
        lv.iter().zip(&uv).map(|(a, b)| a + b).collect()
    }

    /// Adapted forward pass: `W0 x + s * B (L + U) A x`, four matrix–vector
    /// products, O(r n + r^2 + d r) on top of the frozen product.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_split(x, x)
    }

    /// Forward pass where the adapter branch sees `branch_x` instead of `x`
    /// (used for adapter-branch dropout); `W0` always sees `x`.
    pub fn forward_split(&self, x: &[f64], branch_x: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.w0.matvec(x)?;
        let ax = self.a.matvec(branch_x)?;
        let dax = self.transform_vec(&ax);
        let bdax = self.b.matvec(&dax)?;
        let s = self.scale();
        for (hi, bi) in h.iter_mut().zip(&bdax) {
            *hi += s * bi;
        }
        Ok(h)
    }

    /// Dense incremental matrix `s * B (L + U) A`. For tests and export only;
    /// the training path never materializes it.
    pub fn delta_weight(&self) -> Matrix {
        let d = self.l.add(&self.u).expect("same shape");
        self.b
            .matmul(&d)
            .and_then(|bd| bd.matmul(&self.a))
            .expect("shapes validated at construction")
            .scale(self.scale())
    }

    /// Grows the rank by `delta_r`, appending Gaussian rows to `A`, columns
    /// to `B`, and L-shaped blocks to `L` and `U` while keeping every
    /// existing entry bit-identical.
    ///
    /// New entries are drawn in a fixed order (A rows, B columns, L_down,
    /// L_aug, U_up, U_aug, row-major, triangular blocks only over their
    /// feasible positions) so growth is reproducible from the stream position.
    pub fn grow_rank(
        &mut self,
        delta_r: usize,
        policy: InitPolicy,
        std: f64,
        rng: &mut RngState,
    ) -> Result<()> {
        if delta_r == 0 {
            return Err(Error::Config("delta_r must be at least 1".into()));
        }
        let old_r = self.rank;
        let new_r = old_r + delta_r;
        if new_r > self.rank_cap() {
            return Err(Error::Capacity {
                site: self.site_id,
                requested: new_r,
                cap: self.rank_cap(),
            });
        }
        if !std.is_finite() || std <= 0.0 {
            return Err(Error::Config(format!(
                "growth init std must be positive, got {std}"
            )));
        }
        let n = self.input_dim();
        let d = self.output_dim();

        // A: old rows on top, delta_r Gaussian rows appended.
        let mut a = Matrix::zeros(new_r, n);
        for i in 0..old_r {
            for j in 0..n {
                a.set(i, j, self.a.get(i, j));
            }
        }
        for i in old_r..new_r {
            for j in 0..n {
                a.set(i, j, rng.next_gaussian(std));
            }
        }

        // B: old columns on the left, delta_r new columns appended.
        let mut b = Matrix::zeros(d, new_r);
        for i in 0..d {
            for j in 0..old_r {
                b.set(i, j, self.b.get(i, j));
            }
        }
        if policy == InitPolicy::Gaussian {
            for i in 0..d {
                for j in old_r..new_r {
                    b.set(i, j, rng.next_gaussian(std));
                }
            }
        }

        // L: old block top-left, dense L_down bottom-left, lower-triangular
        // L_aug bottom-right, zeros top-right.
        let mut l = Matrix::zeros(new_r, new_r);
        for i in 0..old_r {
            for j in 0..=i {
                l.set(i, j, self.l.get(i, j));
            }
        }
        for i in old_r..new_r {
            for j in 0..old_r {
                l.set(i, j, rng.next_gaussian(std));
            }
        }
        for i in old_r..new_r {
            for j in old_r..=i {
                l.set(i, j, rng.next_gaussian(std));
            }
        }

        // U: old block top-left, dense U_up top-right, strictly-upper U_aug
        // bottom-right, zeros bottom-left. Under zero_b the U_up coupling
        // block stays zero; otherwise the grown adapter would still perturb
        // the function through the old B columns.
        let mut u = Matrix::zeros(new_r, new_r);
        for i in 0..old_r {
            for j in (i + 1)..old_r {
                u.set(i, j, self.u.get(i, j));
            }
        }
        if policy == InitPolicy::Gaussian {
            for i in 0..old_r {
                for j in old_r..new_r {
                    u.set(i, j, rng.next_gaussian(std));
                }
            }
        }
        for i in old_r..new_r {
            for j in (i + 1)..new_r {
                u.set(i, j, rng.next_gaussian(std));
            }
        }

        if policy == InitPolicy::ZeroB {
            // The effective scale alpha/(r + eps) would shrink the existing
            // contribution when r grows; fold the ratio into alpha so the
            // adapted function is preserved across the growth step.
            let old_denom = old_r as f64 + self.epsilon;
            let new_denom = new_r as f64 + self.epsilon;
            self.alpha = self.alpha * new_denom / old_denom;
        }

        self.a = a;
        self.b = b;
        self.l = l;
        self.u = u;
        self.rank = new_r;
        // norm_record intentionally untouched: scoring compares across the
        // rank-update interval.
        Ok(())
    }

    /// Orthogonality penalty over the rank dimension:
    /// `||A A^T - I_r||_F^2 + ||B^T B - I_r||_F^2`.
    pub fn orth_penalty(&self) -> f64 {
        let gram_a = self.a.matmul(&self.a.transpose()).expect("r x r");
        let gram_b = self.b.transpose().matmul(&self.b).expect("r x r");
        let eye = Matrix::identity(self.rank);
        let da = gram_a.sub(&eye).expect("same shape").frobenius_norm();
        let db = gram_b.sub(&eye).expect("same shape").frobenius_norm();
        da * da + db * db
    }

    /// Gradients of `orth_penalty` with respect to `A` and `B`:
    /// `4 (A A^T - I) A` and `4 B (B^T B - I)`.
    pub fn orth_grads(&self) -> (Matrix, Matrix) {
        let eye = Matrix::identity(self.rank);
        let gram_a = self.a.matmul(&self.a.transpose()).expect("r x r");
        let ga = gram_a
            .sub(&eye)
            .and_then(|m| m.matmul(&self.a))
            .expect("shapes fixed")
            .scale(4.0);
        let gram_b = self.b.transpose().matmul(&self.b).expect("r x r");
        let gb = self
            .b
            .matmul(&gram_b.sub(&eye).expect("same shape"))
            .expect("shapes fixed")
            .scale(4.0);
        (ga, gb)
    }

    /// Analytic gradients of a scalar loss with upstream `g = dL/dh` at input
    /// `x`, with triangular masks projecting `gl`/`gu` onto the feasible set:
    ///
    /// ```text
    /// gB = s g (D A x)^T        gA = s (D^T B^T g) x^T
    /// gL = lower(s B^T g (A x)^T)   gU = strict_upper(s B^T g (A x)^T)
    /// ```
    pub fn analytic_grads(&self, x: &[f64], upstream: &[f64]) -> Result<AdapterGrads> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(
                "analytic_grads input",
                format!("{}", self.input_dim()),
                format!("{}", x.len()),
            ));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::dim(
                "analytic_grads upstream",
                format!("{}", self.output_dim()),
                format!("{}", upstream.len()),
            ));
        }
        let s = self.scale();
        let r = self.rank;
        let ax = self.a.matvec(x)?;
        let dax = self.transform_vec(&ax);
        let btg = self.b.matvec_transposed(upstream)?;

        let gb = outer(upstream, &dax, s);
        let core = outer(&btg, &ax, s);
        let gl = core.lower_mask()?;
        let gu = core.upper_mask()?;
        let dtbtg = self.transform_vec_transposed(&btg);
        let ga = outer(&dtbtg, x, s);

        debug_assert_eq!(ga.shape(), (r, self.input_dim()));
        debug_assert_eq!(gb.shape(), (self.output_dim(), r));
        Ok(AdapterGrads { ga, gb, gl, gu })
    }

    /// Gradient of the loss with respect to the site input:
    /// `W0^T g + s A^T D^T B^T g`. Used to chain through host models.
    pub fn input_gradient(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        let mut gx = self.w0.matvec_transposed(upstream)?;
        let btg = self.b.matvec_transposed(upstream)?;
        let dtbtg = self.transform_vec_transposed(&btg);
        let atd = self.a.matvec_transposed(&dtbtg)?;
        let s = self.scale();
        for (g, v) in gx.iter_mut().zip(&atd) {
            *g += s * v;
        }
        Ok(gx)
    }

    /// Like `input_gradient` but only through the adapter branch (the `W0`
    /// path handled separately), for the dropout-split forward.
    pub fn branch_input_gradient(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        let btg = self.b.matvec_transposed(upstream)?;
        let dtbtg = self.transform_vec_transposed(&btg);
        let atd = self.a.matvec_transposed(&dtbtg)?;
        Ok(atd.iter().map(|v| self.scale() * v).collect())
    }

    /// Serializable view of the trainable state (frozen `W0` excluded).
    pub fn checkpoint(&self) -> AdapterCheckpoint {
        AdapterCheckpoint {
            site_id: self.site_id,
            d: self.output_dim(),
            n: self.input_dim(),
            r: self.rank,
            alpha: self.alpha,
            epsilon: self.epsilon,
            a: self.a.clone(),
            b: self.b.clone(),
            l: self.l.clone(),
            u: self.u.clone(),
            norm_record: self.norm_record,
        }
    }

    /// Structural invariant check: shape consistency plus exact
    /// triangularity of `L` and `U`.
    pub fn check_invariants(&self) -> Result<()> {
        let (d, n) = self.w0.shape();
        let r = self.rank;
        if self.a.shape() != (r, n)
            || self.b.shape() != (d, r)
            || self.l.shape() != (r, r)
            || self.u.shape() != (r, r)
        {
            return Err(Error::Config(format!("site {}: inconsistent shapes", self.site_id)));
        }
        if r < 1 || r > d.min(n) {
            return Err(Error::Config(format!(
                "site {}: rank {r} outside [1, {}]",
                self.site_id,
                d.min(n)
            )));
        }
        if !self.l.is_lower_triangular() {
            return Err(Error::Config(format!(
                "site {}: L has nonzero entries above the diagonal",
                self.site_id
            )));
        }
        if !self.u.is_strictly_upper_triangular() {
            return Err(Error::Config(format!(
                "site {}: U has nonzero entries on or below the diagonal",
                self.site_id
            )));
        }
        Ok(())
    }
}

fn outer(u: &[f64], v: &[f64], scale: f64) -> Matrix {
    let mut m = Matrix::zeros(u.len(), v.len());
    for (i, ui) in u.iter().enumerate() {
        for (j, vj) in v.iter().enumerate() {
            m.set(i, j, scale * ui * vj);
        }
    }
    m
}
