//! Information operator, information-equation solves, efficiency bounds and
//! cross-fitted one-step estimators.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fitting::{fit_low_rank, naive_category_fit, FitConfig, FitReport};
use crate::geometry::{ScoreMatrix, TangentCoords, TangentFrame};
use crate::model::{all_atoms, estimate_sampling, fisher_info, indicator, logistic, validate_battles, Battle, SamplingModel};

/// Importance weights above this are treated as overlap failures.
pub const MAX_IMPORTANCE_WEIGHT: f64 = 1e6;
/// Relative eigenvalue cutoff for the pseudo-inverse of K.
pub const PINV_RTOL: f64 = 1e-8;
/// Allowed relative residual of the restricted information equation.
pub const RESIDUAL_TOL: f64 = 1e-6;
/// Largest coordinate dimension solved densely under [`SolveRoute::Auto`].
pub const DENSE_LIMIT: usize = 400;

/// `d₂(d₁−1)/2`, the reciprocal of the uniform-design average of `⟨H,X⟩²/‖H‖²`
/// on zero-sum matrices.
pub fn pairwise_dimension(d1: usize, d2: usize) -> f64 {
    d2 as f64 * (d1 as f64 - 1.0) / 2.0
}

// ---------------------------------------------------------------------------
// Information operator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Empirical,
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Edge {
    p: u32,
    q: u32,
    w: f64,
}

/// Fisher-weighted design operator stored as one weighted edge list per
/// category; category `u` acts through the Laplacian `L_u = Σ w (e_p−e_q)(e_p−e_q)ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoOperator {
    d1: usize,
    d2: usize,
    edges: Vec<Vec<Edge>>,
    normalization: Normalization,
}

impl InfoOperator {
    /// `(1/n) Σ_i b_i I(clip(η̂_i)) X_i ⊗ X_i` over `battles` with battle weights
    /// `b_i` and `n = Σ b_i`.
    pub fn plugin(battles: &[Battle], estimate: &ScoreMatrix, logit_clip: Option<f64>) -> Result<Self> {
        let (d1, d2) = (estimate.n_models(), estimate.n_categories());
        let total = validate_battles(battles, d1, d2)?;
        let mut agg: HashMap<(usize, usize, usize), f64> = HashMap::with_capacity(battles.len());
        let t = estimate.entries();
        for b in battles {
            let mut eta = b.atom.inner(t);
            if let Some(c) = logit_clip {
                eta = eta.clamp(-c, c);
            }
            let (p, q) = b.atom.ordered();
            *agg.entry((b.atom.category(), p, q)).or_insert(0.0) += b.weight * fisher_info(eta) / total;
        }
        let mut keys: Vec<_> = agg.into_iter().collect();
        keys.sort_unstable_by_key(|a| a.0);
        let mut edges = vec![Vec::new(); d2];
        for ((u, p, q), w) in keys {
            edges[u].push(Edge { p: p as u32, q: q as u32, w });
        }
        Ok(Self { d1, d2, edges, normalization: Normalization::Empirical })
    }

    /// Exact expectation `Σ_x p(x) I(⟨T,x⟩) x ⊗ x` over all atoms.
    pub fn population(truth: &ScoreMatrix, sampling: &SamplingModel) -> Result<Self> {
        sampling.check_truth(truth)?;
        let (d1, d2) = (truth.n_models(), truth.n_categories());
        let t = truth.entries();
        let mut edges = vec![Vec::with_capacity(d1 * (d1 - 1) / 2); d2];
        for a in all_atoms(d1, d2) {
            let w = sampling.atom_probability_unchecked(&a) * fisher_info(a.inner(t));
            if w > 0.0 {
                edges[a.category()].push(Edge { p: a.first() as u32, q: a.second() as u32, w });
            }
        }
        Ok(Self { d1, d2, edges, normalization: Normalization::Population })
    }

    pub fn n_models(&self) -> usize {
        self.d1
    }

    pub fn n_categories(&self) -> usize {
        self.d2
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn pairwise_dimension(&self) -> f64 {
        pairwise_dimension(self.d1, self.d2)
    }

    pub fn n_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Dense `L_u`.
    pub fn laplacian(&self, u: usize) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.d1, self.d1);
        for e in &self.edges[u] {
            let (p, q) = (e.p as usize, e.q as usize);
            l[(p, p)] += e.w;
            l[(q, q)] += e.w;
            l[(p, q)] -= e.w;
            l[(q, p)] -= e.w;
        }
        l
    }

    fn check(&self, h: &DMatrix<f64>) -> Result<()> {
        if h.shape() != (self.d1, self.d2) {
            return Err(Error::Dimension(format!(
                "matrix is {}×{}, operator is {}×{}",
                h.nrows(),
                h.ncols(),
                self.d1,
                self.d2
            )));
        }
        Ok(())
    }

    /// `(G H)_{·,u} = L_u h_u`.
    pub fn apply(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(h)?;
        Ok(self.apply_unchecked(h))
    }

    fn apply_unchecked(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.d1, self.d2);
        for (u, edges) in self.edges.iter().enumerate() {
            let col = h.column(u);
            let mut o = out.column_mut(u);
            for e in edges {
                let (p, q) = (e.p as usize, e.q as usize);
                let c = e.w * (col[p] - col[q]);
                o[p] += c;
                o[q] -= c;
            }
        }
        out
    }

    /// `⟨H, G H⟩`.
    pub fn quadratic(&self, h: &DMatrix<f64>) -> Result<f64> {
        self.check(h)?;
        let mut s = 0.0;
        for (u, edges) in self.edges.iter().enumerate() {
            for e in edges {
                let d = h[(e.p as usize, u)] - h[(e.q as usize, u)];
                s += e.w * d * d;
            }
        }
        Ok(s)
    }

    fn check_frame(&self, frame: &TangentFrame) -> Result<()> {
        if frame.n_models() != self.d1 || frame.n_categories() != self.d2 {
            return Err(Error::Dimension(format!(
                "frame is {}×{}, operator is {}×{}",
                frame.n_models(),
                frame.n_categories(),
                self.d1,
                self.d2
            )));
        }
        Ok(())
    }

    /// `K θ` without forming `K` or any dense `d₁×d₂` matrix.
    fn apply_k(&self, frame: &TangentFrame, theta: &DVector<f64>) -> DVector<f64> {
        let (d1, d2, r) = (self.d1, self.d2, frame.rank());
        let na = d2 * r;
        let s = theta.as_slice();
        let a = DMatrix::from_column_slice(d2, r, &s[..na]);
        let c = DMatrix::from_column_slice(d1 - 1, r, &s[na..]);
        let qc = frame.q() * c;
        let (u_f, v_f) = (frame.u(), frame.v());
        let mut ga = DMatrix::<f64>::zeros(d2, r);
        let mut z = DMatrix::<f64>::zeros(d1, r);
        for (u, edges) in self.edges.iter().enumerate() {
            for e in edges {
                let (p, q) = (e.p as usize, e.q as usize);
                let mut diff = 0.0;
                for k in 0..r {
                    diff += (u_f[(p, k)] - u_f[(q, k)]) * a[(u, k)] + (qc[(p, k)] - qc[(q, k)]) * v_f[(u, k)];
                }
                let cw = e.w * diff;
                for k in 0..r {
                    ga[(u, k)] += cw * (u_f[(p, k)] - u_f[(q, k)]);
                    let vz = cw * v_f[(u, k)];
                    z[(p, k)] += vz;
                    z[(q, k)] -= vz;
                }
            }
        }
        let gc = frame.q().transpose() * z;
        let mut out = Vec::with_capacity(theta.len());
        out.extend_from_slice(ga.as_slice());
        out.extend_from_slice(gc.as_slice());
        DVector::from_vec(out)
    }
}

/// Assembles `K = Jᵀ blkdiag(L_u) J` block by block.
pub fn build_k(frame: &TangentFrame, op: &InfoOperator) -> Result<DMatrix<f64>> {
    op.check_frame(frame)?;
    let (d1, d2, r) = (op.d1, op.d2, frame.rank());
    let m = d1 - 1;
    let na = d2 * r;
    let dim = na + m * r;
    let (u_f, v_f, q_f) = (frame.u(), frame.v(), frame.q());
    let mut k_mat = DMatrix::zeros(dim, dim);
    let mut lq = DMatrix::zeros(d1, m);
    for u in 0..d2 {
        // L_u Q and L_u U from the edge list.
        lq.fill(0.0);
        let mut lu = DMatrix::<f64>::zeros(d1, r);
        for e in &op.edges[u] {
            let (p, q) = (e.p as usize, e.q as usize);
            for j in 0..m {
                let c = e.w * (q_f[(p, j)] - q_f[(q, j)]);
                lq[(p, j)] += c;
                lq[(q, j)] -= c;
            }
            for j in 0..r {
                let c = e.w * (u_f[(p, j)] - u_f[(q, j)]);
                lu[(p, j)] += c;
                lu[(q, j)] -= c;
            }
        }
        let ulu = u_f.transpose() * &lu;
        let ulq = u_f.transpose() * &lq;
        let qlq = q_f.transpose() * &lq;
        for k in 0..r {
            for k2 in 0..r {
                k_mat[(u + k * d2, u + k2 * d2)] += ulu[(k, k2)];
            }
        }
        for k in 0..r {
            for k2 in 0..r {
                let v = v_f[(u, k2)];
                for i in 0..m {
                    let x = ulq[(k, i)] * v;
                    let (row, col) = (u + k * d2, na + i + k2 * m);
                    k_mat[(row, col)] += x;
                    k_mat[(col, row)] += x;
                }
            }
        }
        for k in 0..r {
            for k2 in 0..r {
                let vv = v_f[(u, k)] * v_f[(u, k2)];
                if vv == 0.0 {
                    continue;
                }
                for i in 0..m {
                    for i2 in 0..m {
                        k_mat[(na + i + k * m, na + i2 + k2 * m)] += vv * qlq[(i, i2)];
                    }
                }
            }
        }
    }
    Ok(k_mat)
}

// ---------------------------------------------------------------------------
// Information equation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveRoute {
    Auto,
    Dense,
    Iterative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoSolution {
    /// Least-favorable direction `H★ ∈ 𝕋`.
    pub direction: DMatrix<f64>,
    /// `⟨P_𝕋 Γ, H★⟩`.
    pub bound: f64,
    /// `‖P_𝕋(G H★) − P_𝕋 Γ‖_F / ‖P_𝕋 Γ‖_F`, zero when `P_𝕋 Γ` vanishes.
    pub residual: f64,
}

enum Factor {
    Dense { vecs: DMatrix<f64>, inv: DVector<f64>, min_retained: f64 },
    Iterative { diag_inv: DVector<f64> },
}

/// Solver for `P G P H = P Γ` on a fixed frame and operator; dense
/// factorizations are reused across right-hand sides.
pub struct InfoSolver<'a> {
    frame: &'a TangentFrame,
    op: &'a InfoOperator,
    factor: Factor,
}

impl<'a> InfoSolver<'a> {
    pub fn new(frame: &'a TangentFrame, op: &'a InfoOperator, route: SolveRoute) -> Result<Self> {
        op.check_frame(frame)?;
        let dense = match route {
            SolveRoute::Dense => true,
            SolveRoute::Iterative => false,
            SolveRoute::Auto => frame.coord_dim() <= DENSE_LIMIT,
        };
        let factor = if dense {
            let k = build_k(frame, op)?;
            let eig = k.symmetric_eigen();
            let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, b| a.max(*b));
            let cut = PINV_RTOL * lmax;
            let mut min_retained = f64::INFINITY;
            let inv = eig.eigenvalues.map(|l| {
                if l > cut && l > 0.0 {
                    min_retained = min_retained.min(l);
                    1.0 / l
                } else {
                    0.0
                }
            });
            Factor::Dense { vecs: eig.eigenvectors, inv, min_retained }
        } else {
            Factor::Iterative { diag_inv: k_diagonal(frame, op).map(|d| if d > 0.0 { 1.0 / d } else { 0.0 }) }
        };
        Ok(Self { frame, op, factor })
    }

    fn solve_coords(&self, g: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        match &self.factor {
            Factor::Dense { vecs, inv, min_retained } => {
                let y = vecs.transpose() * g;
                let y = y.component_mul(inv);
                Ok((vecs * y, *min_retained))
            }
            Factor::Iterative { diag_inv } => self.pcg(g, diag_inv),
        }
    }

    /// Jacobi-preconditioned conjugate gradients on `K θ = g`; `K` is singular
    /// but `g` lies in its range, so the iterates stay in the range as well.
    fn pcg(&self, g: &DVector<f64>, diag_inv: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        let n = g.len();
        let gnorm = g.norm();
        let mut x = DVector::zeros(n);
        if gnorm == 0.0 {
            return Ok((x, f64::NAN));
        }
        let mut r = g.clone();
        let mut z = r.component_mul(diag_inv);
        let mut p = z.clone();
        let mut rz = r.dot(&z);
        let mut min_curv = f64::INFINITY;
        let max_iter = 20 * n.max(50);
        for _ in 0..max_iter {
            let kp = self.op.apply_k(self.frame, &p);
            let pkp = p.dot(&kp);
            if !(pkp > 0.0) {
                break;
            }
            min_curv = min_curv.min(pkp / p.norm_squared());
            let alpha = rz / pkp;
            x.axpy(alpha, &p, 1.0);
            r.axpy(-alpha, &kp, 1.0);
            if r.norm() <= 1e-11 * gnorm {
                break;
            }
            z = r.component_mul(diag_inv);
            let rz_new = r.dot(&z);
            let beta = rz_new / rz;
            rz = rz_new;
            p *= beta;
            p += &z;
        }
        Ok((x, min_curv))
    }

    pub fn solve(&self, gamma: &DMatrix<f64>) -> Result<InfoSolution> {
        let g = self.frame.matrix_to_coords(gamma)?.to_vector();
        let pg = self.frame.project_unchecked(gamma);
        let pg_norm = pg.norm();
        let (d1, d2, r) = (self.frame.n_models(), self.frame.n_categories(), self.frame.rank());
        if pg_norm <= 1e-12 * gamma.norm() || pg_norm == 0.0 {
            return Ok(InfoSolution { direction: DMatrix::zeros(d1, d2), bound: 0.0, residual: 0.0 });
        }
        let (theta, min_eig) = self.solve_coords(&g)?;
        let coords = TangentCoords::from_vector(&theta, d1, d2, r)?;
        let direction = self.frame.coords_to_matrix(&coords)?;
        let residual = (self.frame.project_unchecked(&self.op.apply_unchecked(&direction)) - &pg).norm() / pg_norm;
        if !(residual <= RESIDUAL_TOL) {
            return Err(Error::IllConditioned { residual, min_eigenvalue: min_eig });
        }
        Ok(InfoSolution { bound: g.dot(&theta), direction, residual })
    }
}

/// Diagonal of `K`, used as a preconditioner.
fn k_diagonal(frame: &TangentFrame, op: &InfoOperator) -> DVector<f64> {
    let (d1, d2, r) = (op.d1, op.d2, frame.rank());
    let m = d1 - 1;
    let (u_f, v_f, q_f) = (frame.u(), frame.v(), frame.q());
    let mut diag = DVector::zeros(d2 * r + m * r);
    // (Q_p − Q_q)_i² summed with weight (v_u,k)² over edges.
    let mut cc = DMatrix::<f64>::zeros(m, r);
    for (u, edges) in op.edges.iter().enumerate() {
        let mut sq = DVector::<f64>::zeros(m);
        for e in edges {
            let (p, q) = (e.p as usize, e.q as usize);
            for k in 0..r {
                let d = u_f[(p, k)] - u_f[(q, k)];
                diag[u + k * d2] += e.w * d * d;
            }
            for i in 0..m {
                let d = q_f[(p, i)] - q_f[(q, i)];
                sq[i] += e.w * d * d;
            }
        }
        for k in 0..r {
            let v2 = v_f[(u, k)] * v_f[(u, k)];
            for i in 0..m {
                cc[(i, k)] += v2 * sq[i];
            }
        }
    }
    for k in 0..r {
        for i in 0..m {
            diag[d2 * r + i + k * m] = cc[(i, k)];
        }
    }
    diag
}

/// `H★` solving `P_𝕋 G P_𝕋 H★ = P_𝕋 Γ`.
pub fn solve_information_equation(frame: &TangentFrame, op: &InfoOperator, gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(InfoSolver::new(frame, op, SolveRoute::Auto)?.solve(gamma)?.direction)
}

/// `g_θᵀ K† g_θ = ⟨P_𝕋 Γ, H★⟩`.
pub fn efficiency_bound(frame: &TangentFrame, op: &InfoOperator, gamma: &DMatrix<f64>) -> Result<f64> {
    Ok(InfoSolver::new(frame, op, SolveRoute::Auto)?.solve(gamma)?.bound)
}

/// Second moment of the influence term `w(x)·s̃·⟨c_pw P_𝕋 Γ, X⟩` under the
/// population law of `sampling` at `truth`; `importance` toggles the weights.
pub fn whitened_oracle_variance(
    frame: &TangentFrame,
    truth: &ScoreMatrix,
    sampling: &SamplingModel,
    gamma: &DMatrix<f64>,
    importance: bool,
) -> Result<f64> {
    sampling.check_truth(truth)?;
    let (d1, d2) = (truth.n_models(), truth.n_categories());
    let h = frame.project(gamma)? * pairwise_dimension(d1, d2);
    let t = truth.entries();
    let uniform = sampling.uniform_probability();
    let mut v = 0.0;
    for a in all_atoms(d1, d2) {
        let p = sampling.atom_probability_unchecked(&a);
        if p == 0.0 {
            continue;
        }
        let x = a.inner(&h);
        if x == 0.0 {
            continue;
        }
        let w = if importance { uniform / p } else { 1.0 };
        v += p * w * w * x * x / fisher_info(a.inner(t));
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Entrywise diagnostic
// ---------------------------------------------------------------------------

/// Largest entrywise ℓ₁ norm of `A⁺ E_ω` over all basis matrices, divided
/// by `2 c_pw`. Exact, so restricted to `d₁ d₂ ≤ 2000`.
pub fn entrywise_inverse_diagnostic(frame: &TangentFrame, op: &InfoOperator) -> Result<f64> {
    let (d1, d2) = (op.d1, op.d2);
    if d1 * d2 > 2000 {
        return Err(Error::TooLarge(format!("{d1}×{d2} exceeds the 2000-entry diagnostic limit")));
    }
    let solver = InfoSolver::new(frame, op, SolveRoute::Dense)?;
    let mut worst: f64 = 0.0;
    let mut e = DMatrix::zeros(d1, d2);
    for u in 0..d2 {
        for p in 0..d1 {
            e[(p, u)] = 1.0;
            let h = solver.solve(&e)?.direction;
            worst = worst.max(h.iter().map(|x| x.abs()).sum());
            e[(p, u)] = 0.0;
        }
    }
    Ok(worst / (2.0 * op.pairwise_dimension()))
}

// ---------------------------------------------------------------------------
// Targets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum FunctionalSpec {
    /// `Σ c · T[model, category]` over `((model, category), c)` terms.
    LinearEntry(Vec<((usize, usize), f64)>),
    /// `σ(T[a,u] − T[b,u])`.
    WinProb { a: usize, b: usize, category: usize },
    /// `T[a,u] − T[b,u]`.
    CategoryContrast { a: usize, b: usize, category: usize },
}

impl FunctionalSpec {
    pub fn entry(model: usize, category: usize) -> Self {
        Self::LinearEntry(vec![((model, category), 1.0)])
    }

    pub fn validate(&self, d1: usize, d2: usize) -> Result<()> {
        let idx = |m: usize, u: usize| -> Result<()> {
            if m >= d1 || u >= d2 {
                return Err(Error::Index(format!("entry ({m}, {u}) outside {d1}×{d2}")));
            }
            Ok(())
        };
        match self {
            Self::LinearEntry(terms) => {
                if terms.is_empty() {
                    return Err(Error::DegenerateTarget("linear target has no terms".into()));
                }
                for ((m, u), c) in terms {
                    idx(*m, *u)?;
                    if !c.is_finite() {
                        return Err(Error::Domain(format!("coefficient {c} is not finite")));
                    }
                }
            }
            Self::WinProb { a, b, category } | Self::CategoryContrast { a, b, category } => {
                idx(*a, *category)?;
                idx(*b, *category)?;
                if a == b {
                    return Err(Error::DegenerateTarget(format!("model {a} compared with itself has zero gradient")));
                }
            }
        }
        Ok(())
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, Self::WinProb { .. })
    }

    pub fn value(&self, t: &DMatrix<f64>) -> f64 {
        match self {
            Self::LinearEntry(terms) => terms.iter().map(|((m, u), c)| c * t[(*m, *u)]).sum(),
            Self::WinProb { a, b, category } => logistic(t[(*a, *category)] - t[(*b, *category)]),
            Self::CategoryContrast { a, b, category } => t[(*a, *category)] - t[(*b, *category)],
        }
    }

    pub fn gradient(&self, t: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(t.nrows(), t.ncols());
        match self {
            Self::LinearEntry(terms) => {
                for ((m, u), c) in terms {
                    g[(*m, *u)] += c;
                }
            }
            Self::WinProb { a, b, category } => {
                let s = fisher_info(t[(*a, *category)] - t[(*b, *category)]);
                g[(*a, *category)] += s;
                g[(*b, *category)] -= s;
            }
            Self::CategoryContrast { a, b, category } => {
                g[(*a, *category)] += 1.0;
                g[(*b, *category)] -= 1.0;
            }
        }
        g
    }
}

/// Plug-in gradient `∇ψ(T)`.
pub fn functional_gradient(spec: &FunctionalSpec, t: &ScoreMatrix) -> Result<DMatrix<f64>> {
    spec.validate(t.n_models(), t.n_categories())?;
    Ok(spec.gradient(t.entries()))
}

// ---------------------------------------------------------------------------
// Cross-fitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MethodTag {
    Efficient,
    Whitened,
    IpwKnown,
    IpwEstimated,
    EfficientNonuniform,
    Naive,
}

impl MethodTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Efficient => "efficient",
            Self::Whitened => "whitened",
            Self::IpwKnown => "ipw_known",
            Self::IpwEstimated => "ipw_estimated",
            Self::EfficientNonuniform => "efficient_nonuniform",
            Self::Naive => "naive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Efficient, Self::Whitened, Self::IpwKnown, Self::IpwEstimated, Self::EfficientNonuniform, Self::Naive]
            .into_iter()
            .find(|m| m.as_str() == s)
    }

    /// Whether the method uses the operator-inverse direction.
    pub fn is_efficient(&self) -> bool {
        matches!(self, Self::Efficient | Self::EfficientNonuniform)
    }
}

impl std::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One-step variants; IPW carries the design or asks for it to be estimated.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Efficient,
    Whitened,
    IpwKnown(SamplingModel),
    IpwEstimated,
    EfficientNonuniform,
}

impl Method {
    pub fn tag(&self) -> MethodTag {
        match self {
            Self::Efficient => MethodTag::Efficient,
            Self::Whitened => MethodTag::Whitened,
            Self::IpwKnown(_) => MethodTag::IpwKnown,
            Self::IpwEstimated => MethodTag::IpwEstimated,
            Self::EfficientNonuniform => MethodTag::EfficientNonuniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub estimate: f64,
    pub variance: f64,
    pub standard_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    /// Total battle weight (the number of battles when all weights are 1).
    pub n_used: f64,
    pub method: MethodTag,
    pub folds: usize,
    pub warnings: Vec<String>,
}

pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("confidence level must lie in (0,1), got {level}")));
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(0.5 + level / 2.0))
}

impl EstimateReport {
    fn new(estimate: f64, variance: f64, n: f64, level: f64, method: MethodTag, folds: usize) -> Result<Self> {
        let z = normal_quantile(level)?;
        let se = (variance / n).sqrt();
        let mut warnings = Vec::new();
        if variance == 0.0 {
            warnings.push("estimated variance is zero".to_string());
        }
        Ok(Self {
            estimate,
            variance,
            standard_error: se,
            ci_low: estimate - z * se,
            ci_high: estimate + z * se,
            level,
            n_used: n,
            method,
            folds,
            warnings,
        })
    }

    /// Same estimate and SE at a different confidence level.
    pub fn at_level(&self, level: f64) -> Result<Self> {
        let z = normal_quantile(level)?;
        Ok(Self {
            ci_low: self.estimate - z * self.standard_error,
            ci_high: self.estimate + z * self.standard_error,
            level,
            ..self.clone()
        })
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossFitConfig {
    pub folds: usize,
    pub seed: u64,
    pub fit: FitConfig,
    pub level: f64,
}

impl CrossFitConfig {
    pub fn new(fit: FitConfig) -> Self {
        Self { folds: 6, seed: 0, fit, level: 0.95 }
    }
}

/// Nuisance fits on each out-of-fold sample.
#[derive(Debug, Clone)]
pub struct FoldFit {
    pub fit: FitReport,
    pub operator: InfoOperator,
    /// Indices of the battles evaluated with this fold's nuisance.
    pub eval: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CrossFit {
    d1: usize,
    d2: usize,
    total_weight: f64,
    folds: Vec<FoldFit>,
    clip: f64,
}

/// Seeded fold labels: position `i` of a random permutation goes to fold `i mod K`.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (i, b) in perm.into_iter().enumerate() {
        out[b] = i % folds;
    }
    out
}

impl CrossFit {
    pub fn new(battles: &[Battle], d1: usize, d2: usize, cfg: &CrossFitConfig) -> Result<Self> {
        let total_weight = validate_battles(battles, d1, d2)?;
        if cfg.folds < 2 {
            return Err(Error::Domain(format!("cross-fitting needs at least 2 folds, got {}", cfg.folds)));
        }
        if battles.len() < cfg.folds {
            return Err(Error::Empty(format!("{} battles cannot fill {} folds", battles.len(), cfg.folds)));
        }
        let labels = fold_assignment(battles.len(), cfg.folds, cfg.seed);
        let mut folds = Vec::with_capacity(cfg.folds);
        for k in 0..cfg.folds {
            let wrap = |e: Error| Error::Fold { fold: k, source: Box::new(e) };
            let train: Vec<Battle> = battles.iter().zip(&labels).filter(|(_, l)| **l != k).map(|(b, _)| *b).collect();
            let eval: Vec<usize> = (0..battles.len()).filter(|i| labels[*i] == k).collect();
            let fit = fit_low_rank(&train, d1, d2, &cfg.fit).map_err(wrap)?;
            let operator = InfoOperator::plugin(&train, &fit.estimate, Some(2.0 * cfg.fit.clip_bound)).map_err(wrap)?;
            folds.push(FoldFit { fit, operator, eval });
        }
        Ok(Self { d1, d2, total_weight, folds, clip: cfg.fit.clip_bound })
    }

    pub fn folds(&self) -> &[FoldFit] {
        &self.folds
    }

    pub fn n_folds(&self) -> usize {
        self.folds.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d1, self.d2)
    }

    /// Clip bound used by the nuisance fits.
    pub fn clip_bound(&self) -> f64 {
        self.clip
    }

    /// Cross-fitted one-step estimate for `spec` with the given method.
    pub fn one_step(&self, battles: &[Battle], spec: &FunctionalSpec, method: &Method, level: f64) -> Result<EstimateReport> {
        let mut out = self.one_step_batch(battles, std::slice::from_ref(spec), method, level)?;
        Ok(out.pop().expect("one report per target"))
    }

    /// One-step estimates for several targets; per-fold factorizations and
    /// scores are shared across targets.
    pub fn one_step_batch(
        &self,
        battles: &[Battle],
        specs: &[FunctionalSpec],
        method: &Method,
        level: f64,
    ) -> Result<Vec<EstimateReport>> {
        for spec in specs {
            spec.validate(self.d1, self.d2)?;
        }
        let k_folds = self.folds.len() as f64;
        let n = self.total_weight;
        let assigned: usize = self.folds.iter().map(|f| f.eval.len()).sum();
        if assigned != battles.len() {
            return Err(Error::Dimension(format!(
                "cross-fit covers {assigned} battles but {} were supplied",
                battles.len()
            )));
        }
        let c_pw = pairwise_dimension(self.d1, self.d2);
        let mut fold_estimates = vec![Vec::with_capacity(self.folds.len()); specs.len()];
        let mut second_moment = vec![0.0; specs.len()];
        for (k, fold) in self.folds.iter().enumerate() {
            let wrap = |e: Error| Error::Fold { fold: k, source: Box::new(e) };
            let t_hat = fold.fit.estimate.entries();
            let frame = &fold.fit.frame;
            let scores = self.fold_scores(battles, k, method).map_err(wrap)?;
            let solver = if method.tag().is_efficient() {
                Some(InfoSolver::new(frame, &fold.operator, SolveRoute::Auto).map_err(wrap)?)
            } else {
                None
            };
            for (j, spec) in specs.iter().enumerate() {
                let gamma = spec.gradient(t_hat);
                let direction = match &solver {
                    Some(s) => s.solve(&gamma).map_err(wrap)?.direction,
                    None => frame.project_unchecked(&gamma) * c_pw,
                };
                let mut correction = 0.0;
                for (&i, &s) in fold.eval.iter().zip(&scores) {
                    let b = &battles[i];
                    let phi = s * b.atom.inner(&direction);
                    correction += b.weight * phi;
                    second_moment[j] += b.weight * phi * phi;
                }
                fold_estimates[j].push(spec.value(t_hat) + k_folds / n * correction);
            }
        }
        fold_estimates
            .iter()
            .zip(second_moment)
            .map(|(f, m2)| {
                let estimate = f.iter().sum::<f64>() / k_folds;
                EstimateReport::new(estimate, m2 / n, n, level, method.tag(), self.folds.len())
            })
            .collect()
    }

    /// Importance-weighted (whitened) scores of fold `k`'s evaluation battles
    /// under that fold's nuisance fit.
    fn fold_scores(&self, battles: &[Battle], k: usize, method: &Method) -> Result<Vec<f64>> {
        let fold = &self.folds[k];
        let t_hat = fold.fit.estimate.entries();
        let estimated;
        let sampling = match method {
            Method::IpwKnown(s) => {
                if s.n_models() != self.d1 || s.n_categories() != self.d2 {
                    return Err(Error::Dimension("sampling model does not match the data".into()));
                }
                Some(s)
            }
            Method::IpwEstimated => {
                let train: Vec<Battle> = self
                    .folds
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != k)
                    .flat_map(|(_, f)| f.eval.iter().map(|&i| battles[i]))
                    .collect();
                estimated = estimate_sampling(&train, self.d1, self.d2)?;
                Some(&estimated)
            }
            _ => None,
        };
        let at = |i: usize| move |e: Error| Error::AtBattle { index: i, source: Box::new(e) };
        fold.eval
            .iter()
            .map(|&i| {
                let b = &battles[i];
                let eta = b.atom.inner(t_hat);
                let s = if method.tag().is_efficient() {
                    indicator(b.first_wins) - logistic(eta)
                } else {
                    crate::model::whitened_score(b.first_wins, eta).map_err(at(i))?
                };
                let w = match sampling {
                    Some(sm) => {
                        let w = sm.importance_weight(&b.atom).map_err(at(i))?;
                        if w > MAX_IMPORTANCE_WEIGHT {
                            return Err(Error::Overlap(format!("importance weight {w:e} at battle {i}")));
                        }
                        w
                    }
                    None => 1.0,
                };
                Ok(w * s)
            })
            .collect()
    }
}

fn single_method(
    battles: &[Battle],
    d1: usize,
    d2: usize,
    spec: &FunctionalSpec,
    cfg: &CrossFitConfig,
    method: Method,
) -> Result<EstimateReport> {
    spec.validate(d1, d2)?;
    CrossFit::new(battles, d1, d2, cfg)?.one_step(battles, spec, &method, cfg.level)
}

/// Cross-fitted efficient one-step estimator.
pub fn efficient_one_step(battles: &[Battle], d1: usize, d2: usize, spec: &FunctionalSpec, cfg: &CrossFitConfig) -> Result<EstimateReport> {
    single_method(battles, d1, d2, spec, cfg, Method::Efficient)
}

/// Cross-fitted score-whitened one-step estimator.
pub fn whitened_one_step(battles: &[Battle], d1: usize, d2: usize, spec: &FunctionalSpec, cfg: &CrossFitConfig) -> Result<EstimateReport> {
    single_method(battles, d1, d2, spec, cfg, Method::Whitened)
}

/// Score-whitened estimator with importance weights from a known design or
/// from a product-form estimate on the out-of-fold battles.
pub fn ipw_one_step(
    battles: &[Battle],
    d1: usize,
    d2: usize,
    spec: &FunctionalSpec,
    cfg: &CrossFitConfig,
    sampling: Option<SamplingModel>,
) -> Result<EstimateReport> {
    let method = match sampling {
        Some(s) => Method::IpwKnown(s),
        None => Method::IpwEstimated,
    };
    single_method(battles, d1, d2, spec, cfg, method)
}

/// Efficient estimator under a non-uniform design; the plug-in operator is
/// built from the data and already reflects the design.
pub fn efficient_nonuniform_one_step(
    battles: &[Battle],
    d1: usize,
    d2: usize,
    spec: &FunctionalSpec,
    cfg: &CrossFitConfig,
) -> Result<EstimateReport> {
    single_method(battles, d1, d2, spec, cfg, Method::EfficientNonuniform)
}

fn center_gradient(g: &DMatrix<f64>) -> DMatrix<f64> {
    crate::geometry::center_columns(g)
}

/// Plug-in estimate from the per-category ridge fits with a delta-method
/// standard error from the inverse Hessian of each category.
pub fn naive_estimate(battles: &[Battle], d1: usize, d2: usize, spec: &FunctionalSpec, level: f64) -> Result<EstimateReport> {
    spec.validate(d1, d2)?;
    let n = validate_battles(battles, d1, d2)?;
    let mut t = DMatrix::zeros(d1, d2);
    let mut cats: Vec<usize> = match spec {
        FunctionalSpec::LinearEntry(terms) => terms.iter().map(|((_, u), _)| *u).collect(),
        FunctionalSpec::WinProb { category, .. } | FunctionalSpec::CategoryContrast { category, .. } => vec![*category],
    };
    cats.sort_unstable();
    cats.dedup();
    let mut fits = Vec::new();
    for &u in &cats {
        let fit = naive_category_fit(battles, d1, u)?;
        let mean = fit.scores.mean();
        let mut col = fit.expand(d1);
        col.add_scalar_mut(-mean * fit.models.len() as f64 / d1 as f64);
        t.set_column(u, &col);
        fits.push(fit);
    }
    let grad = center_gradient(&spec.gradient(&t));
    let mut var_total = 0.0;
    for fit in &fits {
        let cov = fit.covariance()?;
        let g = DVector::from_iterator(fit.models.len(), fit.models.iter().map(|&m| grad[(m, fit.category)]));
        var_total += g.dot(&(&cov * &g));
    }
    // Report the variance on the per-observation scale like the one-step methods.
    EstimateReport::new(spec.value(&t), var_total * n, n, level, MethodTag::Naive, 0)
}
