//! Low-rank, column-centered matrix geometry.
//!
//! Score matrices live in the zero-sum gauge: every column (category) sums to
//! zero along the model axis. A rank-r matrix `U Σ Vᵀ` in that gauge has the
//! tangent space
//!
//! ```text
//! 𝕋 = { U Aᵀ + Q C Vᵀ : A ∈ ℝ^{d₂×r}, C ∈ ℝ^{(d₁-1)×r} }
//! ```
//!
//! where `Q` is an orthonormal basis of the complement of the all-ones vector.
//! The orthogonal projector onto 𝕋 is
//!
//! ```text
//! P(H) = P_U H + (Q₁ − P_U) H P_V,   Q₁ = I − 𝟙𝟙ᵀ/d₁
//! ```
//!
//! and the two blocks are mutually orthogonal because `𝟙ᵀU = 0`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tolerance for orthonormality checks on frames.
pub const ORTHO_TOL: f64 = 1e-10;
/// Per-model tolerance for column sums (scaled by d₁).
pub const CENTER_TOL: f64 = 1e-8;

/// Dense latent score matrix (models × categories) in the zero-sum gauge with
/// bounded entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    entries: DMatrix<f64>,
    bound: f64,
}

impl ScoreMatrix {
    pub fn new(entries: DMatrix<f64>, bound: f64) -> Result<Self> {
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::Domain(format!("entry bound must be positive, got {bound}")));
        }
        let d1 = entries.nrows();
        if d1 < 2 {
            return Err(Error::Dimension("need at least two models".into()));
        }
        for (u, col) in entries.column_iter().enumerate() {
            let s = col.sum();
            if !s.is_finite() || s.abs() > CENTER_TOL * d1 as f64 {
                return Err(Error::Invariant(format!("column {u} sums to {s:e}")));
            }
        }
        let max = max_abs(&entries);
        if max > bound + 1e-8 {
            return Err(Error::Invariant(format!("max |entry| {max} exceeds bound {bound}")));
        }
        Ok(Self { entries, bound })
    }

    pub fn zeros(d1: usize, d2: usize, bound: f64) -> Result<Self> {
        Self::new(DMatrix::zeros(d1, d2), bound)
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn n_models(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_categories(&self) -> usize {
        self.entries.ncols()
    }

    pub fn get(&self, model: usize, category: usize) -> f64 {
        self.entries[(model, category)]
    }
}

/// Orthonormal factors of a rank-r centered matrix together with the
/// ones-complement basis used to coordinatize its tangent space.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentFrame {
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    q: DMatrix<f64>,
    singular_values: DVector<f64>,
}

/// Coordinates `(A, C)` of a tangent direction `U Aᵀ + Q C Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentCoords {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl TangentCoords {
    /// Stacks `[vec(A); vec(C)]` (column-major).
    pub fn to_vector(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.a.len() + self.c.len());
        out.extend_from_slice(self.a.as_slice());
        out.extend_from_slice(self.c.as_slice());
        DVector::from_vec(out)
    }

    pub fn from_vector(theta: &DVector<f64>, d1: usize, d2: usize, r: usize) -> Result<Self> {
        let na = d2 * r;
        let nc = (d1 - 1) * r;
        if theta.len() != na + nc {
            return Err(Error::Dimension(format!(
                "coordinate vector has length {}, expected {}",
                theta.len(),
                na + nc
            )));
        }
        let s = theta.as_slice();
        Ok(Self {
            a: DMatrix::from_column_slice(d2, r, &s[..na]),
            c: DMatrix::from_column_slice(d1 - 1, r, &s[na..]),
        })
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.a.dot(&other.a) + self.c.dot(&other.c)
    }
}

impl TangentFrame {
    /// Builds a frame from orthonormal `u` (d₁×r, columns orthogonal to 𝟙)
    /// and `v` (d₂×r).
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>, singular_values: DVector<f64>) -> Result<Self> {
        let d1 = u.nrows();
        let r = u.ncols();
        if v.ncols() != r || singular_values.len() != r {
            return Err(Error::Dimension(format!(
                "frame rank mismatch: U has {r} columns, V has {}, {} singular values",
                v.ncols(),
                singular_values.len()
            )));
        }
        if d1 < 2 {
            return Err(Error::Dimension("need at least two models".into()));
        }
        let eye = DMatrix::<f64>::identity(r, r);
        if (u.transpose() * &u - &eye).amax() > ORTHO_TOL * 100.0
            || (v.transpose() * &v - &eye).amax() > ORTHO_TOL * 100.0
        {
            return Err(Error::Invariant("frame factors are not orthonormal".into()));
        }
        for k in 0..r {
            if u.column(k).sum().abs() > CENTER_TOL {
                return Err(Error::Invariant(format!("column {k} of U is not orthogonal to 1")));
            }
        }
        if singular_values.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Invariant("negative singular value".into()));
        }
        Ok(Self { q: ones_complement_basis(d1), u, v, singular_values })
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn n_models(&self) -> usize {
        self.u.nrows()
    }

    pub fn n_categories(&self) -> usize {
        self.v.nrows()
    }

    /// Dimension of the (redundant) `(A, C)` coordinate space.
    pub fn coord_dim(&self) -> usize {
        (self.n_categories() + self.n_models() - 1) * self.rank()
    }

    /// `U Σ Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (k, s) in self.singular_values.iter().enumerate() {
            us.column_mut(k).scale_mut(*s);
        }
        us * self.v.transpose()
    }

    fn check_dims(&self, h: &DMatrix<f64>) -> Result<()> {
        if h.nrows() != self.n_models() || h.ncols() != self.n_categories() {
            return Err(Error::Dimension(format!(
                "matrix is {}×{}, frame is {}×{}",
                h.nrows(),
                h.ncols(),
                self.n_models(),
                self.n_categories()
            )));
        }
        Ok(())
    }

    /// Orthogonal projection onto the tangent space.
    pub fn project(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dims(h)?;
        Ok(self.project_unchecked(h))
    }

    pub(crate) fn project_unchecked(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let ut_h = self.u.transpose() * h;
        let mut hv = h * &self.v;
        center_columns_in_place(&mut hv);
        let ut_hv = self.u.transpose() * &hv;
        hv -= &self.u * ut_hv;
        let mut out = &self.u * ut_h;
        out.gemm(1.0, &hv, &self.v.transpose(), 1.0);
        out
    }

    /// `U Aᵀ + Q C Vᵀ`.
    pub fn coords_to_matrix(&self, coords: &TangentCoords) -> Result<DMatrix<f64>> {
        let (d1, d2, r) = (self.n_models(), self.n_categories(), self.rank());
        if coords.a.shape() != (d2, r) || coords.c.shape() != (d1 - 1, r) {
            return Err(Error::Dimension("coordinate blocks do not match frame".into()));
        }
        let mut out = &self.u * coords.a.transpose();
        let qc = &self.q * &coords.c;
        out.gemm(1.0, &qc, &self.v.transpose(), 1.0);
        Ok(out)
    }

    /// Adjoint of [`coords_to_matrix`](Self::coords_to_matrix): `(HᵀU, QᵀHV)`.
    pub fn matrix_to_coords(&self, h: &DMatrix<f64>) -> Result<TangentCoords> {
        self.check_dims(h)?;
        Ok(TangentCoords {
            a: h.transpose() * &self.u,
            c: self.q.transpose() * (h * &self.v),
        })
    }
}

/// Orthonormal basis of `𝟙^⊥ ⊂ ℝ^d` from the Householder reflection that
/// maps `e₁` to `𝟙/√d`; the returned columns are columns 2..d of that
/// reflection.
pub fn ones_complement_basis(d: usize) -> DMatrix<f64> {
    assert!(d >= 2, "ones-complement basis needs d >= 2");
    let inv_sqrt = 1.0 / (d as f64).sqrt();
    let mut w = DVector::from_element(d, -inv_sqrt);
    w[0] += 1.0;
    // w = e₁ − 𝟙/√d, ‖w‖² = 2 − 2/√d
    let ww = w.norm_squared();
    let mut q = DMatrix::zeros(d, d - 1);
    for j in 1..d {
        let coef = 2.0 * w[j] / ww;
        for i in 0..d {
            let e = if i == j { 1.0 } else { 0.0 };
            q[(i, j - 1)] = e - coef * w[i];
        }
    }
    q
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Applies `I − 𝟙𝟙ᵀ/d₁` on the left.
pub fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    center_columns_in_place(&mut out);
    out
}

pub fn center_columns_in_place(m: &mut DMatrix<f64>) {
    let d1 = m.nrows() as f64;
    for mut col in m.column_iter_mut() {
        let mean = col.sum() / d1;
        col.add_scalar_mut(-mean);
    }
}

/// Entrywise projection onto `[−bound, bound]`.
pub fn clip_entries(m: &DMatrix<f64>, bound: f64) -> DMatrix<f64> {
    m.map(|x| x.clamp(-bound, bound))
}

/// Alternating projections between the box `[−bound, bound]` and the
/// zero-sum subspace; returns a matrix that is centered and bounded.
pub fn clip_and_center(m: &DMatrix<f64>, bound: f64) -> DMatrix<f64> {
    let d1 = m.nrows() as f64;
    let mut out = m.clone();
    for _ in 0..10_000 {
        center_columns_in_place(&mut out);
        if max_abs(&out) <= bound + 1e-10 {
            break;
        }
        out.apply(|x| *x = x.clamp(-bound, bound));
        if out.column_iter().all(|c| c.sum().abs() <= 1e-10 * d1) {
            break;
        }
    }
    out
}

/// Rank-r truncation together with the frame of the retained factors.
#[derive(Debug, Clone)]
pub struct Truncation {
    pub matrix: DMatrix<f64>,
    pub frame: TangentFrame,
    /// Set when σ_r and σ_{r+1} coincide within 1e−12 and the split is not
    /// unique; the first r in decomposition order are kept.
    pub ambiguous: bool,
}

/// Best rank-r approximation of the column-centered input.
pub fn truncate_rank(m: &DMatrix<f64>, r: usize) -> Result<Truncation> {
    let (d1, d2) = m.shape();
    if r == 0 || r > d1.min(d2) || r > d1 - 1 {
        return Err(Error::Dimension(format!("rank {r} invalid for {d1}×{d2} centered matrix")));
    }
    let q = ones_complement_basis(d1);
    // SVD of Qᵀ M keeps the left factor inside 𝟙^⊥ even for zero singular values.
    let reduced = q.transpose() * m;
    let svd = reduced.svd(true, true);
    let (uu, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let ambiguous = order.len() > r
        && (svd.singular_values[order[r - 1]] - svd.singular_values[order[r]]).abs() <= 1e-12;
    let mut u_small = DMatrix::zeros(d1 - 1, r);
    let mut v = DMatrix::zeros(d2, r);
    let mut s = DVector::zeros(r);
    for (k, &idx) in order.iter().take(r).enumerate() {
        u_small.set_column(k, &uu.column(idx));
        v.set_column(k, &vt.row(idx).transpose());
        s[k] = svd.singular_values[idx];
    }
    let u = &q * u_small;
    let frame = TangentFrame { u, v, q, singular_values: s };
    Ok(Truncation { matrix: frame.reconstruct(), frame, ambiguous })
}

/// Rank-r truncation of `center(left) rightᵀ` without forming a dense SVD:
/// thin QR of both factors followed by an r×r SVD.
pub fn truncate_factored(left: &DMatrix<f64>, right: &DMatrix<f64>, r: usize) -> Result<Truncation> {
    let d1 = left.nrows();
    let d2 = right.nrows();
    let k = left.ncols();
    if right.ncols() != k {
        return Err(Error::Dimension("factor widths differ".into()));
    }
    if r == 0 || r > k || r > d2 || r > d1 - 1 {
        return Err(Error::Dimension(format!("rank {r} invalid for factors of width {k}")));
    }
    let q = ones_complement_basis(d1);
    let reduced_left = q.transpose() * left;
    let ql = reduced_left.qr();
    let qr = right.clone().qr();
    let core = ql.r() * qr.r().transpose();
    let svd = core.svd(true, true);
    let (w, zt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let ambiguous = order.len() > r
        && (svd.singular_values[order[r - 1]] - svd.singular_values[order[r]]).abs() <= 1e-12;
    let mut wk = DMatrix::zeros(k, r);
    let mut zk = DMatrix::zeros(k, r);
    let mut s = DVector::zeros(r);
    for (j, &idx) in order.iter().take(r).enumerate() {
        wk.set_column(j, &w.column(idx));
        zk.set_column(j, &zt.row(idx).transpose());
        s[j] = svd.singular_values[idx];
    }
    let u = &q * (ql.q() * wk);
    let v = qr.q() * zk;
    let frame = TangentFrame { u, v, q, singular_values: s };
    Ok(Truncation { matrix: frame.reconstruct(), frame, ambiguous })
}

/// Clips row norms at `tau`, then right-multiplies by `(ṼᵀṼ)^{-1/2}` so the
/// result has orthonormal columns.
pub fn trim_orthonormalize(v: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("row-norm cap must be positive, got {tau}")));
    }
    let mut clipped = v.clone();
    for mut row in clipped.row_iter_mut() {
        let n = row.norm();
        if n > tau {
            row.scale_mut(tau / n);
        }
    }
    let gram = clipped.transpose() * &clipped;
    let eig = gram.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 1e-12 * max.max(f64::MIN_POSITIVE)) {
        return Err(Error::RankDeficient(format!(
            "clipped Gram has eigenvalues in [{min:e}, {max:e}]"
        )));
    }
    let inv_sqrt = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()));
    let w = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
    Ok(clipped * w)
}
