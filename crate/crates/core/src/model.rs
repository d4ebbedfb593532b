//! Bradley-Terry-Luce observation model: link, score, Fisher information,
//! design atoms and sampling designs.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::ScoreMatrix;

/// Logits beyond this magnitude are treated as saturated by the whitened score.
pub const LOGIT_LIMIT: f64 = 36.0;

/// Logistic function `1/(1+e^{-η})`.
pub fn sigmoid(eta: f64) -> Result<f64> {
    if !eta.is_finite() {
        return Err(Error::Domain(format!("logit must be finite, got {eta}")));
    }
    Ok(logistic(eta))
}

#[inline]
pub(crate) fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^η)` without overflow.
#[inline]
pub(crate) fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Negative log-likelihood of one outcome at logit `eta`.
#[inline]
pub(crate) fn nll(y: bool, eta: f64) -> f64 {
    if y {
        softplus(-eta)
    } else {
        softplus(eta)
    }
}

/// Score of the log-likelihood in the logit: `y − σ(η)`.
pub fn score(y: bool, eta: f64) -> Result<f64> {
    Ok(indicator(y) - sigmoid(eta)?)
}

/// Fisher information `σ(η)(1−σ(η))`.
pub fn fisher_info(eta: f64) -> f64 {
    let e = (-eta.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Score divided by the Fisher information.
pub fn whitened_score(y: bool, eta: f64) -> Result<f64> {
    if !eta.is_finite() {
        return Err(Error::Domain(format!("logit must be finite, got {eta}")));
    }
    if eta.abs() > LOGIT_LIMIT {
        return Err(Error::ExtremeLogit { eta, limit: LOGIT_LIMIT });
    }
    Ok((indicator(y) - logistic(eta)) / fisher_info(eta))
}

#[inline]
pub(crate) fn indicator(y: bool) -> f64 {
    if y {
        1.0
    } else {
        0.0
    }
}

/// Contrast `(e_first − e_second) e_categoryᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DesignAtom {
    category: usize,
    first: usize,
    second: usize,
}

impl DesignAtom {
    pub fn new(category: usize, first: usize, second: usize) -> Result<Self> {
        if first == second {
            return Err(Error::Domain(format!("atom compares model {first} with itself")));
        }
        Ok(Self { category, first, second })
    }

    pub fn category(&self) -> usize {
        self.category
    }

    pub fn first(&self) -> usize {
        self.first
    }

    pub fn second(&self) -> usize {
        self.second
    }

    /// The same pair with the smaller model index first.
    pub fn ordered(&self) -> (usize, usize) {
        if self.first < self.second {
            (self.first, self.second)
        } else {
            (self.second, self.first)
        }
    }

    pub fn check(&self, d1: usize, d2: usize) -> Result<()> {
        if self.category >= d2 || self.first >= d1 || self.second >= d1 {
            return Err(Error::Index(format!(
                "atom (category {}, models {}, {}) outside {d1}×{d2}",
                self.category, self.first, self.second
            )));
        }
        Ok(())
    }

    /// `⟨H, X⟩ = H[p,u] − H[q,u]` without bounds checking beyond nalgebra's.
    #[inline]
    pub(crate) fn inner(&self, h: &DMatrix<f64>) -> f64 {
        h[(self.first, self.category)] - h[(self.second, self.category)]
    }
}

/// `⟨H, X⟩` for the atom's design tensor.
pub fn atom_inner(h: &DMatrix<f64>, atom: &DesignAtom) -> Result<f64> {
    atom.check(h.nrows(), h.ncols())?;
    Ok(atom.inner(h))
}

/// One comparison with its outcome. `weight` is 1 for an ordinary battle and
/// 0.5 for each half of a split tie.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Battle {
    pub atom: DesignAtom,
    pub first_wins: bool,
    pub weight: f64,
}

impl Battle {
    pub fn new(atom: DesignAtom, first_wins: bool) -> Self {
        Self { atom, first_wins, weight: 1.0 }
    }

    pub fn weighted(atom: DesignAtom, first_wins: bool, weight: f64) -> Self {
        Self { atom, first_wins, weight }
    }
}

/// Checks every battle against the dimensions and returns the total weight.
pub fn validate_battles(battles: &[Battle], d1: usize, d2: usize) -> Result<f64> {
    if battles.is_empty() {
        return Err(Error::Empty("no battles".into()));
    }
    let mut total = 0.0;
    for (i, b) in battles.iter().enumerate() {
        b.atom.check(d1, d2).map_err(|e| Error::AtBattle { index: i, source: Box::new(e) })?;
        if !(b.weight > 0.0) || !b.weight.is_finite() {
            return Err(Error::AtBattle {
                index: i,
                source: Box::new(Error::Domain(format!("weight {} is not positive", b.weight))),
            });
        }
        total += b.weight;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingKind {
    Uniform,
    Product,
}

/// Product law over categories and unordered model pairs. Pairs are drawn as
/// two independent model draws, redrawn on collision.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingModel {
    kind: SamplingKind,
    category_probs: Vec<f64>,
    model_probs: Vec<f64>,
    collision: f64,
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Sampling(format!("{what} probabilities are empty")));
    }
    if p.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::Sampling(format!("{what} probabilities must be nonnegative")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::Sampling(format!("{what} probabilities sum to {s}")));
    }
    Ok(())
}

impl SamplingModel {
    pub fn uniform(d1: usize, d2: usize) -> Result<Self> {
        if d1 < 2 || d2 < 1 {
            return Err(Error::Dimension(format!("uniform design needs d1 >= 2, d2 >= 1 (got {d1}, {d2})")));
        }
        Ok(Self {
            kind: SamplingKind::Uniform,
            category_probs: vec![1.0 / d2 as f64; d2],
            model_probs: vec![1.0 / d1 as f64; d1],
            collision: 1.0 / d1 as f64,
        })
    }

    pub fn product(category_probs: Vec<f64>, model_probs: Vec<f64>) -> Result<Self> {
        check_simplex(&category_probs, "category")?;
        check_simplex(&model_probs, "model")?;
        let collision: f64 = model_probs.iter().map(|p| p * p).sum();
        if 1.0 - collision <= 1e-12 {
            return Err(Error::Sampling("model law puts all mass on one model; no pair can be formed".into()));
        }
        Ok(Self { kind: SamplingKind::Product, category_probs, model_probs, collision })
    }

    pub fn kind(&self) -> SamplingKind {
        self.kind
    }

    pub fn category_probs(&self) -> &[f64] {
        &self.category_probs
    }

    pub fn model_probs(&self) -> &[f64] {
        &self.model_probs
    }

    pub fn n_models(&self) -> usize {
        self.model_probs.len()
    }

    pub fn n_categories(&self) -> usize {
        self.category_probs.len()
    }

    /// Probability of one (category, unordered pair) atom.
    pub fn uniform_probability(&self) -> f64 {
        let d1 = self.n_models() as f64;
        let d2 = self.n_categories() as f64;
        2.0 / (d2 * d1 * (d1 - 1.0))
    }

    pub fn atom_probability(&self, atom: &DesignAtom) -> Result<f64> {
        atom.check(self.n_models(), self.n_categories())?;
        Ok(self.atom_probability_unchecked(atom))
    }

    pub(crate) fn atom_probability_unchecked(&self, atom: &DesignAtom) -> f64 {
        match self.kind {
            SamplingKind::Uniform => self.uniform_probability(),
            SamplingKind::Product => {
                self.category_probs[atom.category]
                    * 2.0
                    * self.model_probs[atom.first]
                    * self.model_probs[atom.second]
                    / (1.0 - self.collision)
            }
        }
    }

    /// Uniform-design probability over this design's probability.
    pub fn importance_weight(&self, atom: &DesignAtom) -> Result<f64> {
        if self.kind == SamplingKind::Uniform {
            atom.check(self.n_models(), self.n_categories())?;
            return Ok(1.0);
        }
        let p = self.atom_probability(atom)?;
        if !(p > 0.0) {
            return Err(Error::Overlap(format!(
                "atom (category {}, models {}, {}) has zero sampling probability",
                atom.category, atom.first, atom.second
            )));
        }
        Ok(self.uniform_probability() / p)
    }

    pub fn sampler(&self) -> Result<AtomSampler> {
        AtomSampler::new(self)
    }

    /// Draws one battle from `truth` under this design.
    pub fn sample_battle<R: Rng + ?Sized>(&self, truth: &ScoreMatrix, rng: &mut R) -> Result<Battle> {
        self.check_truth(truth)?;
        Ok(self.sampler()?.battle(truth, rng))
    }

    pub fn check_truth(&self, truth: &ScoreMatrix) -> Result<()> {
        if truth.n_models() != self.n_models() || truth.n_categories() != self.n_categories() {
            return Err(Error::Dimension(format!(
                "truth is {}×{}, design is {}×{}",
                truth.n_models(),
                truth.n_categories(),
                self.n_models(),
                self.n_categories()
            )));
        }
        Ok(())
    }

    /// Draws `n` battles from `truth`.
    pub fn sample_battles<R: Rng + ?Sized>(&self, truth: &ScoreMatrix, n: usize, rng: &mut R) -> Result<Vec<Battle>> {
        self.check_truth(truth)?;
        let s = self.sampler()?;
        Ok((0..n).map(|_| s.battle(truth, rng)).collect())
    }

    /// Every atom with `first < second`, in (category, first, second) order.
    pub fn atoms(&self) -> impl Iterator<Item = DesignAtom> + '_ {
        all_atoms(self.n_models(), self.n_categories())
    }
}

pub fn all_atoms(d1: usize, d2: usize) -> impl Iterator<Item = DesignAtom> {
    (0..d2).flat_map(move |u| {
        (0..d1).flat_map(move |p| (p + 1..d1).map(move |q| DesignAtom { category: u, first: p, second: q }))
    })
}

/// Precomputed draw tables for a sampling design.
#[derive(Debug, Clone)]
pub struct AtomSampler {
    kind: SamplingKind,
    d1: usize,
    d2: usize,
    categories: Option<WeightedIndex<f64>>,
    models: Option<WeightedIndex<f64>>,
}

impl AtomSampler {
    fn new(s: &SamplingModel) -> Result<Self> {
        let (categories, models) = match s.kind {
            SamplingKind::Uniform => (None, None),
            SamplingKind::Product => (
                Some(WeightedIndex::new(&s.category_probs).map_err(|e| Error::Sampling(e.to_string()))?),
                Some(WeightedIndex::new(&s.model_probs).map_err(|e| Error::Sampling(e.to_string()))?),
            ),
        };
        Ok(Self { kind: s.kind, d1: s.n_models(), d2: s.n_categories(), categories, models })
    }

    pub fn atom<R: Rng + ?Sized>(&self, rng: &mut R) -> DesignAtom {
        match self.kind {
            SamplingKind::Uniform => {
                let u = rng.random_range(0..self.d2);
                let p = rng.random_range(0..self.d1);
                let mut q = rng.random_range(0..self.d1 - 1);
                if q >= p {
                    q += 1;
                }
                let (a, b) = if p < q { (p, q) } else { (q, p) };
                DesignAtom { category: u, first: a, second: b }
            }
            SamplingKind::Product => {
                let cats = self.categories.as_ref().expect("product sampler has category table");
                let models = self.models.as_ref().expect("product sampler has model table");
                let u = cats.sample(rng);
                loop {
                    let p = models.sample(rng);
                    let q = models.sample(rng);
                    if p != q {
                        let (a, b) = if p < q { (p, q) } else { (q, p) };
                        return DesignAtom { category: u, first: a, second: b };
                    }
                }
            }
        }
    }

    pub fn battle<R: Rng + ?Sized>(&self, truth: &ScoreMatrix, rng: &mut R) -> Battle {
        let atom = self.atom(rng);
        let prob = logistic(atom.inner(truth.entries()));
        Battle::new(atom, rng.random::<f64>() < prob)
    }
}

/// Product-form estimate of the design from observed battles with add-one
/// smoothing on category counts and model appearance counts.
pub fn estimate_sampling(battles: &[Battle], d1: usize, d2: usize) -> Result<SamplingModel> {
    let n = validate_battles(battles, d1, d2)?;
    let mut cat = vec![1.0; d2];
    let mut app = vec![1.0; d1];
    for b in battles {
        cat[b.atom.category] += b.weight;
        app[b.atom.first] += b.weight;
        app[b.atom.second] += b.weight;
    }
    let cat_total = n + d2 as f64;
    let app_total = 2.0 * n + d1 as f64;
    let mut pj: Vec<f64> = cat.iter().map(|c| c / cat_total).collect();
    let mut pm: Vec<f64> = app.iter().map(|c| c / app_total).collect();
    renormalize(&mut pj);
    renormalize(&mut pm);
    SamplingModel::product(pj, pm)
}

fn renormalize(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
}
