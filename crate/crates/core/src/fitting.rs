//! Initial estimation: spectral start, alternating minimization of the BTL
//! likelihood over low-rank factors, row/column entrywise refinement and the
//! per-category baseline.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{clip_and_center, max_abs, truncate_factored, truncate_rank, ScoreMatrix, TangentFrame, Truncation};
use crate::model::{fisher_info, logistic, nll, validate_battles, Battle};

// ---------------------------------------------------------------------------
// Offset logistic regression
// ---------------------------------------------------------------------------

const MAX_STACK_DIM: usize = 8;

/// Row-major design for an offset logistic regression.
#[derive(Debug, Clone, Copy)]
pub struct LogisticProblem<'a> {
    pub dim: usize,
    pub features: &'a [f64],
    pub offsets: &'a [f64],
    pub outcomes: &'a [bool],
    pub weights: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub ridge: f64,
    pub ball_radius: Option<f64>,
    pub record_trace: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { max_iter: 50, tol: 1e-6, ridge: 0.0, ball_radius: None, record_trace: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticSolution {
    pub theta: DVector<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub fell_back: bool,
    pub objective: f64,
    /// Objective after every accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

impl<'a> LogisticProblem<'a> {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.outcomes.len();
        if self.features.len() != n * self.dim || self.offsets.len() != n || self.weights.len() != n {
            return Err(Error::Dimension(format!(
                "logistic problem with {n} outcomes has {} feature values, {} offsets, {} weights (dim {})",
                self.features.len(),
                self.offsets.len(),
                self.weights.len(),
                self.dim
            )));
        }
        Ok(())
    }

    #[inline]
    fn eta(&self, i: usize, theta: &[f64]) -> f64 {
        let x = &self.features[i * self.dim..(i + 1) * self.dim];
        self.offsets[i] + x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Weighted negative log-likelihood plus `ridge/2 ‖θ‖²`.
    pub fn objective(&self, theta: &[f64], ridge: f64) -> f64 {
        let mut f = 0.5 * ridge * theta.iter().map(|t| t * t).sum::<f64>();
        for i in 0..self.len() {
            f += self.weights[i] * nll(self.outcomes[i], self.eta(i, theta));
        }
        f
    }

    /// Gradient and Hessian at `theta`; the objective is not recomputed.
    fn derivatives(&self, theta: &[f64], ridge: f64, grad: &mut DVector<f64>, hess: &mut DMatrix<f64>) {
        let k = self.dim;
        let mut g = [0.0f64; MAX_STACK_DIM];
        let mut h = [0.0f64; MAX_STACK_DIM * MAX_STACK_DIM];
        if k > MAX_STACK_DIM {
            return self.derivatives_dense(theta, ridge, grad, hess);
        }
        for i in 0..self.len() {
            let x = &self.features[i * k..(i + 1) * k];
            let eta = self.offsets[i] + x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
            let w = self.weights[i];
            let p = logistic(eta);
            let resid = w * (p - if self.outcomes[i] { 1.0 } else { 0.0 });
            let curv = w * p * (1.0 - p);
            for a in 0..k {
                g[a] += resid * x[a];
                let cx = curv * x[a];
                let row = &mut h[a * MAX_STACK_DIM..a * MAX_STACK_DIM + k];
                for b in a..k {
                    row[b] += cx * x[b];
                }
            }
        }
        for a in 0..k {
            grad[a] = g[a] + ridge * theta[a];
            for b in a..k {
                let v = h[a * MAX_STACK_DIM + b] + if a == b { ridge } else { 0.0 };
                hess[(a, b)] = v;
                hess[(b, a)] = v;
            }
        }
    }

    fn derivatives_dense(&self, theta: &[f64], ridge: f64, grad: &mut DVector<f64>, hess: &mut DMatrix<f64>) {
        let k = self.dim;
        grad.fill(0.0);
        hess.fill(0.0);
        for i in 0..self.len() {
            let eta = self.eta(i, theta);
            let w = self.weights[i];
            let p = logistic(eta);
            let resid = w * (p - if self.outcomes[i] { 1.0 } else { 0.0 });
            let curv = w * p * (1.0 - p);
            let x = &self.features[i * k..(i + 1) * k];
            for a in 0..k {
                grad[a] += resid * x[a];
                let cx = curv * x[a];
                for b in a..k {
                    hess[(a, b)] += cx * x[b];
                }
            }
        }
        for a in 0..k {
            grad[a] += ridge * theta[a];
            hess[(a, a)] += ridge;
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
    }

    fn lipschitz(&self, ridge: f64) -> f64 {
        let k = self.dim;
        let mut l = ridge;
        for i in 0..self.len() {
            let x = &self.features[i * k..(i + 1) * k];
            l += 0.25 * self.weights[i] * x.iter().map(|v| v * v).sum::<f64>();
        }
        l.max(1e-12)
    }
}

fn project_ball(theta: &mut DVector<f64>, radius: Option<f64>) {
    if let Some(r) = radius {
        let n = theta.norm();
        if n > r {
            theta.scale_mut(r / n);
        }
    }
}

fn projected_grad_norm(theta: &DVector<f64>, grad: &DVector<f64>, radius: Option<f64>) -> f64 {
    let mut step = theta - grad;
    project_ball(&mut step, radius);
    (theta - step).norm()
}

/// Objective increases below this relative size are treated as rounding.
const OBJECTIVE_RTOL: f64 = 1e-12;

/// Projected Newton with step halving on a ridge-regularized offset logistic
/// likelihood. Falls back to projected gradient steps if the gradient norm
/// grows on five consecutive iterations or the Hessian cannot be factored.
pub fn solve_logistic(problem: &LogisticProblem<'_>, init: &[f64], opts: &NewtonOptions) -> Result<LogisticSolution> {
    problem.check()?;
    let k = problem.dim;
    if init.len() != k {
        return Err(Error::Dimension(format!("initial point has length {}, expected {k}", init.len())));
    }
    let mut theta = DVector::from_column_slice(init);
    project_ball(&mut theta, opts.ball_radius);
    let mut grad = DVector::zeros(k);
    let mut hess = DMatrix::zeros(k, k);
    let mut f = problem.objective(theta.as_slice(), opts.ridge);
    problem.derivatives(theta.as_slice(), opts.ridge, &mut grad, &mut hess);
    let mut trace = Vec::new();
    if opts.record_trace {
        trace.push(f);
    }
    let mut fell_back = false;
    let mut increases = 0usize;
    let mut prev_gnorm = grad.norm();
    let mut pg = projected_grad_norm(&theta, &grad, opts.ball_radius);
    let mut iterations = 0;
    let mut lipschitz = None;

    while iterations < opts.max_iter && pg >= opts.tol {
        iterations += 1;
        let newton_dir = if fell_back {
            None
        } else {
            hess.clone().cholesky().map(|c| -c.solve(&grad))
        };
        let dir = match newton_dir {
            Some(d) if d.iter().all(|v| v.is_finite()) => d,
            _ => {
                fell_back = true;
                let l = *lipschitz.get_or_insert_with(|| problem.lipschitz(opts.ridge));
                -&grad / l
            }
        };
        let mut t = 1.0;
        let mut accepted = None;
        let slack = OBJECTIVE_RTOL * f.abs().max(1.0);
        for _ in 0..=30 {
            let mut cand = &theta + &dir * t;
            project_ball(&mut cand, opts.ball_radius);
            let fc = problem.objective(cand.as_slice(), opts.ridge);
            if fc <= f + slack {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc)) = accepted else { break };
        theta = cand;
        f = fc;
        problem.derivatives(theta.as_slice(), opts.ridge, &mut grad, &mut hess);
        if opts.record_trace {
            trace.push(f);
        }
        let gnorm = grad.norm();
        if gnorm > prev_gnorm {
            increases += 1;
            if increases >= 5 {
                fell_back = true;
            }
        } else {
            increases = 0;
        }
        prev_gnorm = gnorm;
        pg = projected_grad_norm(&theta, &grad, opts.ball_radius);
    }
    Ok(LogisticSolution {
        theta,
        iterations,
        grad_norm: pg,
        converged: pg < opts.tol,
        fell_back,
        objective: f,
        trace,
    })
}

/// Constrained offset logistic regression on explicit feature vectors.
/// Fails if the iteration budget runs out with the projected gradient still
/// above `100·tol`.
pub fn row_logistic_solve(
    features: &[DVector<f64>],
    offsets: &[f64],
    outcomes: &[bool],
    ball_radius: f64,
    ridge: f64,
) -> Result<DVector<f64>> {
    row_logistic_solve_with(features, offsets, outcomes, ball_radius, ridge, 100, 1e-8)
}

pub fn row_logistic_solve_with(
    features: &[DVector<f64>],
    offsets: &[f64],
    outcomes: &[bool],
    ball_radius: f64,
    ridge: f64,
    max_iter: usize,
    tol: f64,
) -> Result<DVector<f64>> {
    let dim = features.first().map(|x| x.len()).unwrap_or(0);
    if features.iter().any(|x| x.len() != dim) {
        return Err(Error::Dimension("feature vectors have inconsistent lengths".into()));
    }
    let flat: Vec<f64> = features.iter().flat_map(|x| x.iter().copied()).collect();
    let weights = vec![1.0; outcomes.len()];
    let problem = LogisticProblem { dim, features: &flat, offsets, outcomes, weights: &weights };
    let opts = NewtonOptions { max_iter, tol, ridge, ball_radius: Some(ball_radius), record_trace: false };
    let sol = solve_logistic(&problem, &vec![0.0; dim], &opts)?;
    if !sol.converged && sol.grad_norm > 100.0 * tol {
        return Err(Error::Convergence { iterations: sol.iterations, grad_norm: sol.grad_norm });
    }
    Ok(sol.theta)
}

// ---------------------------------------------------------------------------
// Configuration and reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefinementSplits {
    Off,
    ThreeWay,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub rank: usize,
    pub altmin_rounds: usize,
    pub clip_bound: f64,
    pub newton_max_iter: usize,
    pub newton_tol: f64,
    pub ridge: f64,
    pub refinement_splits: RefinementSplits,
    /// Seed for the three-way split; unused when splits are off.
    pub split_seed: u64,
}

impl FitConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            altmin_rounds: 3,
            clip_bound: 7.0,
            newton_max_iter: 50,
            newton_tol: 1e-6,
            ridge: 1e-6,
            refinement_splits: RefinementSplits::Off,
            split_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::Domain("rank must be at least 1".into()));
        }
        if !(self.clip_bound > 0.0) || !self.clip_bound.is_finite() {
            return Err(Error::Domain(format!("clip bound must be positive, got {}", self.clip_bound)));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::Domain(format!("ridge must be nonnegative, got {}", self.ridge)));
        }
        if !(self.newton_tol > 0.0) {
            return Err(Error::Domain("Newton tolerance must be positive".into()));
        }
        if self.newton_max_iter == 0 {
            return Err(Error::Domain("Newton iteration budget must be positive".into()));
        }
        Ok(())
    }

    fn newton(&self, ball_radius: Option<f64>) -> NewtonOptions {
        NewtonOptions {
            max_iter: self.newton_max_iter,
            tol: self.newton_tol,
            ridge: self.ridge,
            ball_radius,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTimings {
    pub spectral: Duration,
    pub altmin: Duration,
    pub refine: Duration,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub estimate: ScoreMatrix,
    pub frame: TangentFrame,
    pub newton_iterations: usize,
    /// Weighted negative log-likelihood of the estimate on the battles it was fit to.
    pub neg_log_lik: f64,
    pub timings: StageTimings,
    /// Subproblems that switched to gradient steps.
    pub fallbacks: usize,
    /// Subproblems that ran out of iterations.
    pub unconverged: usize,
    /// Rows (models) and columns (categories) left at their initial values.
    pub unobserved_rows: Vec<usize>,
    pub unobserved_columns: Vec<usize>,
    pub ambiguous_truncation: bool,
}

/// Weighted BTL negative log-likelihood of `t` on `battles`.
pub fn neg_log_likelihood(t: &DMatrix<f64>, battles: &[Battle]) -> f64 {
    battles.iter().map(|b| b.weight * nll(b.first_wins, b.atom.inner(t))).sum()
}

// ---------------------------------------------------------------------------
// Battle indexing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Appearance {
    category: usize,
    opponent: usize,
    won: bool,
    weight: f64,
}

struct BattleIndex {
    by_category: Vec<Vec<usize>>,
    by_model: Vec<Vec<Appearance>>,
}

impl BattleIndex {
    fn new(battles: &[Battle], d1: usize, d2: usize) -> Self {
        let mut by_category = vec![Vec::new(); d2];
        let mut by_model = vec![Vec::new(); d1];
        for (i, b) in battles.iter().enumerate() {
            let a = b.atom;
            by_category[a.category()].push(i);
            by_model[a.first()].push(Appearance {
                category: a.category(),
                opponent: a.second(),
                won: b.first_wins,
                weight: b.weight,
            });
            by_model[a.second()].push(Appearance {
                category: a.category(),
                opponent: a.first(),
                won: !b.first_wins,
                weight: b.weight,
            });
        }
        Self { by_category, by_model }
    }
}

#[derive(Default)]
struct Workspace {
    features: Vec<f64>,
    offsets: Vec<f64>,
    outcomes: Vec<bool>,
    weights: Vec<f64>,
}

impl Workspace {
    fn clear(&mut self) {
        self.features.clear();
        self.offsets.clear();
        self.outcomes.clear();
        self.weights.clear();
    }

    fn problem(&self, dim: usize) -> LogisticProblem<'_> {
        LogisticProblem {
            dim,
            features: &self.features,
            offsets: &self.offsets,
            outcomes: &self.outcomes,
            weights: &self.weights,
        }
    }
}

#[derive(Default)]
struct SolveStats {
    iterations: usize,
    fallbacks: usize,
    unconverged: usize,
}

impl SolveStats {
    fn record(&mut self, s: &LogisticSolution) {
        self.iterations += s.iterations;
        self.fallbacks += usize::from(s.fell_back);
        self.unconverged += usize::from(!s.converged);
    }
}

/// Solves one column problem: features `θ_first − θ_second`, no offset.
fn column_step(
    battles: &[Battle],
    idx: &[usize],
    rows: &DMatrix<f64>,
    init: &[f64],
    opts: &NewtonOptions,
    ws: &mut Workspace,
) -> Result<LogisticSolution> {
    let k = rows.ncols();
    ws.clear();
    for &i in idx {
        let b = &battles[i];
        let (p, q) = (b.atom.first(), b.atom.second());
        for j in 0..k {
            ws.features.push(rows[(p, j)] - rows[(q, j)]);
        }
        ws.offsets.push(0.0);
        ws.outcomes.push(b.first_wins);
        ws.weights.push(b.weight);
    }
    solve_logistic(&ws.problem(k), init, opts)
}

fn row_slice(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

// ---------------------------------------------------------------------------
// Spectral initialization
// ---------------------------------------------------------------------------

/// Signed-outcome moment matrix: per (model, category), four times the mean
/// of `±(y − ½)` over that model's battles in the category.
pub fn spectral_moments(battles: &[Battle], d1: usize, d2: usize) -> Result<DMatrix<f64>> {
    validate_battles(battles, d1, d2)?;
    let mut sum = DMatrix::<f64>::zeros(d1, d2);
    let mut count = DMatrix::<f64>::zeros(d1, d2);
    for b in battles {
        let u = b.atom.category();
        let s = if b.first_wins { 0.5 } else { -0.5 };
        sum[(b.atom.first(), u)] += b.weight * s;
        sum[(b.atom.second(), u)] -= b.weight * s;
        count[(b.atom.first(), u)] += b.weight;
        count[(b.atom.second(), u)] += b.weight;
    }
    Ok(sum.zip_map(&count, |s, c| if c > 0.0 { 4.0 * s / c } else { 0.0 }))
}

fn spectral_truncation(battles: &[Battle], d1: usize, d2: usize, r: usize, clip: f64) -> Result<(ScoreMatrix, Truncation)> {
    let m = spectral_moments(battles, d1, d2)?;
    let t = truncate_rank(&crate::geometry::center_columns(&m), r)?;
    let est = ScoreMatrix::new(clip_and_center(&t.matrix, clip), clip)?;
    Ok((est, t))
}

/// Column-centered, rank-r, clipped spectral estimate.
pub fn spectral_init(battles: &[Battle], d1: usize, d2: usize, r: usize, clip: f64) -> Result<ScoreMatrix> {
    Ok(spectral_truncation(battles, d1, d2, r, clip)?.0)
}

fn split_factors(frame: &TangentFrame) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut l = frame.u().clone();
    let mut r = frame.v().clone();
    for (k, s) in frame.singular_values().iter().enumerate() {
        let h = s.sqrt();
        l.column_mut(k).scale_mut(h);
        r.column_mut(k).scale_mut(h);
    }
    (l, r)
}

// ---------------------------------------------------------------------------
// Alternating minimization
// ---------------------------------------------------------------------------

fn check_dims(d1: usize, d2: usize, cfg: &FitConfig) -> Result<()> {
    cfg.validate()?;
    if d1 < 2 || d2 < 1 {
        return Err(Error::Dimension(format!("need at least 2 models and 1 category, got {d1}×{d2}")));
    }
    if cfg.rank > d2 || cfg.rank > d1 - 1 {
        return Err(Error::Dimension(format!("rank {} too large for {d1}×{d2}", cfg.rank)));
    }
    Ok(())
}

/// Alternating minimization of the BTL likelihood over `T = L Rᵀ`, started
/// from the spectral estimate. Category factors are refit with the model
/// factors fixed, then every model row is refit independently against the
/// previous round's opponents. Each round ends with centering, rank-r
/// truncation and entry clipping.
pub fn altmin_fit(battles: &[Battle], d1: usize, d2: usize, cfg: &FitConfig) -> Result<FitReport> {
    check_dims(d1, d2, cfg)?;
    validate_battles(battles, d1, d2)?;
    let start = Instant::now();
    let (spectral, trunc) = spectral_truncation(battles, d1, d2, cfg.rank, cfg.clip_bound)?;
    let spectral_time = start.elapsed();
    let start = Instant::now();
    let index = BattleIndex::new(battles, d1, d2);
    let (mut left, mut right) = split_factors(&trunc.frame);
    let mut frame = trunc.frame;
    let mut ambiguous = trunc.ambiguous;
    let mut estimate = spectral;
    let mut stats = SolveStats::default();
    let mut ws = Workspace::default();
    let opts = cfg.newton(None);
    let r = cfg.rank;

    for _ in 0..cfg.altmin_rounds {
        for (u, idx) in index.by_category.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let sol = column_step(battles, idx, &left, &row_slice(&right, u), &opts, &mut ws)?;
            stats.record(&sol);
            right.set_row(u, &sol.theta.transpose());
        }
        let previous = left.clone();
        for (p, apps) in index.by_model.iter().enumerate() {
            if apps.is_empty() {
                continue;
            }
            ws.clear();
            for a in apps {
                let mut off = 0.0;
                for j in 0..r {
                    let v = right[(a.category, j)];
                    ws.features.push(v);
                    off -= previous[(a.opponent, j)] * v;
                }
                ws.offsets.push(off);
                ws.outcomes.push(a.won);
                ws.weights.push(a.weight);
            }
            let sol = solve_logistic(&ws.problem(r), &row_slice(&previous, p), &opts)?;
            stats.record(&sol);
            left.set_row(p, &sol.theta.transpose());
        }
        let t = truncate_factored(&left, &right, r)?;
        ambiguous = t.ambiguous;
        estimate = ScoreMatrix::new(clip_and_center(&t.matrix, cfg.clip_bound), cfg.clip_bound)?;
        (left, right) = split_factors(&t.frame);
        frame = t.frame;
    }

    let unobserved_rows = (0..d1).filter(|&p| index.by_model[p].is_empty()).collect();
    let unobserved_columns = (0..d2).filter(|&u| index.by_category[u].is_empty()).collect();
    Ok(FitReport {
        neg_log_lik: neg_log_likelihood(estimate.entries(), battles),
        estimate,
        frame,
        newton_iterations: stats.iterations,
        timings: StageTimings { spectral: spectral_time, altmin: start.elapsed(), refine: Duration::ZERO },
        fallbacks: stats.fallbacks,
        unconverged: stats.unconverged,
        unobserved_rows,
        unobserved_columns,
        ambiguous_truncation: ambiguous,
    })
}

// ---------------------------------------------------------------------------
// Entrywise refinement
// ---------------------------------------------------------------------------

/// Seeded partition of `0..n` into three near-equal folds.
pub fn three_way_split(n: usize, seed: u64) -> [Vec<usize>; 3] {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (i, b) in perm.into_iter().enumerate() {
        out[i % 3].push(b);
    }
    for f in out.iter_mut() {
        f.sort_unstable();
    }
    out
}

fn subset(battles: &[Battle], idx: &[usize]) -> Vec<Battle> {
    idx.iter().map(|&i| battles[i]).collect()
}

/// Row-wise then column-wise offset logistic refinement of a low-rank
/// initializer. Row `u` regresses its outcomes on the initializer's category
/// factors with the opponent's initial score as offset, inside the ball of
/// radius `2·clip·√max(d₁,d₂)`; the stacked rows are recentered and the
/// category factors are then refit on pairwise row differences.
pub fn refine_entrywise(init: &ScoreMatrix, battles: &[Battle], cfg: &FitConfig) -> Result<FitReport> {
    let (d1, d2) = (init.n_models(), init.n_categories());
    check_dims(d1, d2, cfg)?;
    validate_battles(battles, d1, d2)?;
    let start = Instant::now();
    let (left_data, right_data) = match cfg.refinement_splits {
        RefinementSplits::Off => (None, None),
        RefinementSplits::ThreeWay => {
            let [_, b, c] = three_way_split(battles.len(), cfg.split_seed);
            (Some(subset(battles, &b)), Some(subset(battles, &c)))
        }
    };
    let left_battles = left_data.as_deref().unwrap_or(battles);
    let right_battles = right_data.as_deref().unwrap_or(battles);
    let r = cfg.rank;
    let trunc = truncate_rank(init.entries(), r)?;
    let (init_left, a_hat) = split_factors(&trunc.frame);
    let offsets = clip_and_center(init.entries(), cfg.clip_bound);
    let radius = 2.0 * cfg.clip_bound * (d1.max(d2) as f64).sqrt();
    let opts = cfg.newton(Some(radius));
    let mut stats = SolveStats::default();
    let mut ws = Workspace::default();

    let left_index = BattleIndex::new(left_battles, d1, d2);
    let mut theta = init_left.clone();
    let mut unobserved_rows = Vec::new();
    for (p, apps) in left_index.by_model.iter().enumerate() {
        if apps.is_empty() {
            unobserved_rows.push(p);
            continue;
        }
        ws.clear();
        for a in apps {
            for j in 0..r {
                ws.features.push(a_hat[(a.category, j)]);
            }
            ws.offsets.push(-offsets[(a.opponent, a.category)]);
            ws.outcomes.push(a.won);
            ws.weights.push(a.weight);
        }
        let sol = solve_logistic(&ws.problem(r), &row_slice(&init_left, p), &opts)?;
        stats.record(&sol);
        theta.set_row(p, &sol.theta.transpose());
    }
    crate::geometry::center_columns_in_place(&mut theta);

    let right_index = BattleIndex::new(right_battles, d1, d2);
    let mut a_tilde = a_hat.clone();
    let mut unobserved_columns = Vec::new();
    for (u, idx) in right_index.by_category.iter().enumerate() {
        if idx.is_empty() {
            unobserved_columns.push(u);
            continue;
        }
        let sol = column_step(right_battles, idx, &theta, &row_slice(&a_hat, u), &opts, &mut ws)?;
        stats.record(&sol);
        a_tilde.set_row(u, &sol.theta.transpose());
    }

    let t = truncate_factored(&theta, &a_tilde, r)?;
    let estimate = ScoreMatrix::new(clip_and_center(&t.matrix, cfg.clip_bound), cfg.clip_bound)?;
    Ok(FitReport {
        neg_log_lik: neg_log_likelihood(estimate.entries(), battles),
        estimate,
        frame: t.frame,
        newton_iterations: stats.iterations,
        timings: StageTimings { refine: start.elapsed(), ..StageTimings::default() },
        fallbacks: stats.fallbacks,
        unconverged: stats.unconverged,
        unobserved_rows,
        unobserved_columns,
        ambiguous_truncation: t.ambiguous,
    })
}

/// AltMin followed by entrywise refinement. With three-way splits the
/// initializer is fit on the first fold only.
pub fn fit_low_rank(battles: &[Battle], d1: usize, d2: usize, cfg: &FitConfig) -> Result<FitReport> {
    let init = match cfg.refinement_splits {
        RefinementSplits::Off => altmin_fit(battles, d1, d2, cfg)?,
        RefinementSplits::ThreeWay => {
            let [a, _, _] = three_way_split(battles.len(), cfg.split_seed);
            altmin_fit(&subset(battles, &a), d1, d2, cfg)?
        }
    };
    let mut refined = refine_entrywise(&init.estimate, battles, cfg)?;
    refined.timings.spectral = init.timings.spectral;
    refined.timings.altmin = init.timings.altmin;
    refined.newton_iterations += init.newton_iterations;
    refined.fallbacks += init.fallbacks;
    refined.unconverged += init.unconverged;
    refined.ambiguous_truncation |= init.ambiguous_truncation;
    Ok(refined)
}

// ---------------------------------------------------------------------------
// Per-category baseline
// ---------------------------------------------------------------------------

pub const NAIVE_RIDGE: f64 = 1e-4;

/// Ridge BTL fit of one category over the models that appear in it.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryFit {
    pub category: usize,
    pub models: Vec<usize>,
    pub scores: DVector<f64>,
    /// Hessian of the penalized objective at the solution.
    pub hessian: DMatrix<f64>,
    pub iterations: usize,
}

impl CategoryFit {
    /// Full-length score vector with zeros for unseen models.
    pub fn expand(&self, d1: usize) -> DVector<f64> {
        let mut out = DVector::zeros(d1);
        for (k, &m) in self.models.iter().enumerate() {
            out[m] = self.scores[k];
        }
        out
    }

    /// Inverse Hessian; the sandwich-free plug-in covariance of the scores.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if self.models.is_empty() {
            return Ok(DMatrix::zeros(0, 0));
        }
        self.hessian
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::RankDeficient(format!("category {} Hessian is not positive definite", self.category)))
    }

    pub fn position(&self, model: usize) -> Option<usize> {
        self.models.iter().position(|&m| m == model)
    }
}

pub fn naive_category_fit(battles: &[Battle], d1: usize, category: usize) -> Result<CategoryFit> {
    let mut pos = vec![usize::MAX; d1];
    let mut models = Vec::new();
    let mut edges = Vec::new();
    for b in battles.iter().filter(|b| b.atom.category() == category) {
        for m in [b.atom.first(), b.atom.second()] {
            if m >= d1 {
                return Err(Error::Index(format!("model {m} outside {d1} models")));
            }
            if pos[m] == usize::MAX {
                pos[m] = models.len();
                models.push(m);
            }
        }
        edges.push((pos[b.atom.first()], pos[b.atom.second()], b.first_wins, b.weight));
    }
    let m = models.len();
    let objective = |s: &DVector<f64>| -> f64 {
        let mut f = 0.5 * NAIVE_RIDGE * s.norm_squared();
        for &(p, q, y, w) in &edges {
            f += w * nll(y, s[p] - s[q]);
        }
        f
    };
    let derivatives = |s: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let mut g = s * NAIVE_RIDGE;
        let mut h = DMatrix::identity(m, m) * NAIVE_RIDGE;
        for &(p, q, y, w) in &edges {
            let eta = s[p] - s[q];
            let resid = w * (logistic(eta) - if y { 1.0 } else { 0.0 });
            let c = w * fisher_info(eta);
            g[p] += resid;
            g[q] -= resid;
            h[(p, p)] += c;
            h[(q, q)] += c;
            h[(p, q)] -= c;
            h[(q, p)] -= c;
        }
        (g, h)
    };
    let mut s = DVector::zeros(m);
    let mut f = objective(&s);
    let mut iterations = 0;
    let (mut g, mut h) = derivatives(&s);
    while iterations < 100 && g.norm() > 1e-9 {
        iterations += 1;
        let chol = h.clone().cholesky().ok_or_else(|| {
            Error::RankDeficient(format!("category {category} Hessian is not positive definite"))
        })?;
        let dir = -chol.solve(&g);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..=30 {
            let cand = &s + &dir * t;
            let fc = objective(&cand);
            if fc <= f {
                s = cand;
                f = fc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
        (g, h) = derivatives(&s);
    }
    Ok(CategoryFit { category, models, scores: s, hessian: h, iterations })
}

/// Independent ridge BTL fits per category, assembled without truncation.
pub fn naive_per_task_btl(battles: &[Battle], d1: usize, d2: usize) -> Result<ScoreMatrix> {
    let mut out = DMatrix::zeros(d1, d2);
    if !battles.is_empty() {
        validate_battles(battles, d1, d2)?;
    }
    for u in 0..d2 {
        let fit = naive_category_fit(battles, d1, u)?;
        out.set_column(u, &fit.expand(d1));
    }
    // The ridge optimum is zero-sum over seen models; remove rounding drift.
    crate::geometry::center_columns_in_place(&mut out);
    let bound = max_abs(&out).max(f64::MIN_POSITIVE) * (1.0 + 1e-12);
    ScoreMatrix::new(out, bound)
}
