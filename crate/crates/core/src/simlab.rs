//! Synthetic truths, Monte Carlo replication studies and their summaries.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fitting::{altmin_fit, naive_per_task_btl, refine_entrywise, FitConfig};
use crate::geometry::{center_columns, max_abs, truncate_rank, ScoreMatrix, TangentFrame};
use crate::inference::{
    efficiency_bound, naive_estimate, whitened_oracle_variance, CrossFit, CrossFitConfig, EstimateReport, FunctionalSpec,
    InfoOperator, Method, MethodTag,
};
use crate::model::{Battle, SamplingModel};

/// `T = ΘAᵀ` with standard normal factors, column-centered and rescaled so
/// that `‖T‖∞ = α`.
pub fn gen_truth<R: Rng + ?Sized>(d1: usize, d2: usize, r: usize, alpha: f64, rng: &mut R) -> Result<ScoreMatrix> {
    if r == 0 || r > d1.min(d2) {
        return Err(Error::Domain(format!("rank {r} outside 1..={}", d1.min(d2))));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!("signal scale must be positive, got {alpha}")));
    }
    let theta = DMatrix::<f64>::from_fn(d1, r, |_, _| StandardNormal.sample(rng));
    let a = DMatrix::<f64>::from_fn(d2, r, |_, _| StandardNormal.sample(rng));
    let m = center_columns(&(theta * a.transpose()));
    let scale = max_abs(&m);
    if scale == 0.0 {
        return Err(Error::Invariant("centered draw is identically zero".into()));
    }
    ScoreMatrix::new(m * (alpha / scale), alpha)
}

fn dirichlet<R: Rng + ?Sized>(d: usize, concentration: f64, rng: &mut R) -> Result<Vec<f64>> {
    let g = Gamma::new(concentration, 1.0).map_err(|e| Error::Domain(format!("Dirichlet concentration: {e}")))?;
    let mut v: Vec<f64> = (0..d).map(|_| g.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    Ok(v)
}

/// Product design with `π_J ~ Dir(c·𝟙)` and `π_M ~ Dir(c·𝟙)`.
pub fn gen_dirichlet_sampling<R: Rng + ?Sized>(d1: usize, d2: usize, concentration: f64, rng: &mut R) -> Result<SamplingModel> {
    if !(concentration > 0.0) || !concentration.is_finite() {
        return Err(Error::Domain(format!("concentration must be positive, got {concentration}")));
    }
    let pj = dirichlet(d2, concentration, rng)?;
    let pm = dirichlet(d1, concentration, rng)?;
    SamplingModel::product(pj, pm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingSpec {
    Uniform,
    Dirichlet { concentration: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub d1: usize,
    pub d2: usize,
    pub rank: usize,
    pub alpha: f64,
    pub n: usize,
    pub replications: usize,
    pub methods: Vec<MethodTag>,
    pub target: FunctionalSpec,
    pub sampling: SamplingSpec,
    pub seed: u64,
    pub folds: usize,
    pub fit: FitConfig,
    pub level: f64,
    /// Draw a fresh truth in every replication instead of once per study.
    pub redraw_truth: bool,
}

impl SimConfig {
    /// Square uniform-design study of the `(0,0)` entry with both one-step
    /// methods and the usual fitting defaults (`α₀ = α + 2`).
    pub fn new(d: usize, rank: usize, alpha: f64, n: usize, replications: usize) -> Self {
        let fit = FitConfig { clip_bound: alpha + 2.0, ..FitConfig::new(rank) };
        Self {
            d1: d,
            d2: d,
            rank,
            alpha,
            n,
            replications,
            methods: vec![MethodTag::Efficient, MethodTag::Whitened],
            target: FunctionalSpec::entry(0, 0),
            sampling: SamplingSpec::Uniform,
            seed: 0,
            folds: 6,
            fit,
            level: 0.95,
            redraw_truth: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Domain("need at least one replication".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Domain(format!("signal scale must be positive, got {}", self.alpha)));
        }
        if self.methods.is_empty() {
            return Err(Error::Domain("no methods requested".into()));
        }
        if self.fit.rank != self.rank {
            return Err(Error::Domain(format!("fit rank {} differs from truth rank {}", self.fit.rank, self.rank)));
        }
        self.fit.validate()?;
        self.target.validate(self.d1, self.d2)
    }

    fn rep_rng(&self, rep: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep as u64 + 1);
        rng
    }
}

/// Truth, design and oracle quantities shared by every replication.
#[derive(Debug, Clone)]
pub struct StudySetup {
    pub truth: ScoreMatrix,
    pub sampling: SamplingModel,
    pub truth_value: f64,
}

pub fn setup_study(cfg: &SimConfig) -> Result<StudySetup> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let truth = gen_truth(cfg.d1, cfg.d2, cfg.rank, cfg.alpha, &mut rng)?;
    let sampling = match cfg.sampling {
        SamplingSpec::Uniform => SamplingModel::uniform(cfg.d1, cfg.d2)?,
        SamplingSpec::Dirichlet { concentration } => gen_dirichlet_sampling(cfg.d1, cfg.d2, concentration, &mut rng)?,
    };
    let truth_value = cfg.target.value(truth.entries());
    Ok(StudySetup { truth, sampling, truth_value })
}

/// Oracle standard error `√(V*/n)` at the study truth: the efficiency bound
/// for the efficient methods and the whitened variance (with squared
/// importance weights for IPW) otherwise. `None` for the naive baseline.
pub fn oracle_se(cfg: &SimConfig, setup: &StudySetup, method: MethodTag) -> Result<Option<f64>> {
    let frame: TangentFrame = truncate_rank(setup.truth.entries(), cfg.rank)?.frame;
    let gamma = cfg.target.gradient(setup.truth.entries());
    let v = match method {
        MethodTag::Efficient | MethodTag::EfficientNonuniform => {
            let op = InfoOperator::population(&setup.truth, &setup.sampling)?;
            efficiency_bound(&frame, &op, &gamma)?
        }
        MethodTag::Whitened => whitened_oracle_variance(&frame, &setup.truth, &setup.sampling, &gamma, false)?,
        MethodTag::IpwKnown | MethodTag::IpwEstimated => {
            whitened_oracle_variance(&frame, &setup.truth, &setup.sampling, &gamma, true)?
        }
        MethodTag::Naive => return Ok(None),
    };
    Ok(Some((v / cfg.n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub method: MethodTag,
    pub result: std::result::Result<EstimateReport, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationResult {
    pub replication: usize,
    pub truth_value: f64,
    pub outcomes: Vec<MethodOutcome>,
}

/// Battles for one replication, drawn from its own substream.
pub fn replication_battles(cfg: &SimConfig, setup: &StudySetup, rep: usize) -> Result<(Vec<Battle>, f64, u64)> {
    let mut rng = cfg.rep_rng(rep);
    let (truth, value) = if cfg.redraw_truth {
        let t = gen_truth(cfg.d1, cfg.d2, cfg.rank, cfg.alpha, &mut rng)?;
        let v = cfg.target.value(t.entries());
        (t, v)
    } else {
        (setup.truth.clone(), setup.truth_value)
    };
    let battles = setup.sampling.sample_battles(&truth, cfg.n, &mut rng)?;
    Ok((battles, value, rng.random()))
}

/// One replication: fresh battles, one shared cross-fit, every requested
/// method. Method failures are recorded rather than propagated.
pub fn run_replication(cfg: &SimConfig, setup: &StudySetup, rep: usize) -> Result<ReplicationResult> {
    let (battles, truth_value, fold_seed) = replication_battles(cfg, setup, rep)?;
    let needs_crossfit = cfg.methods.iter().any(|m| *m != MethodTag::Naive);
    let cf_cfg = CrossFitConfig { folds: cfg.folds, seed: fold_seed, fit: cfg.fit.clone(), level: cfg.level };
    let crossfit = if needs_crossfit {
        Some(CrossFit::new(&battles, cfg.d1, cfg.d2, &cf_cfg).map_err(|e| e.to_string()))
    } else {
        None
    };
    let outcomes = cfg
        .methods
        .iter()
        .map(|&method| {
            let result = match method {
                MethodTag::Naive => naive_estimate(&battles, cfg.d1, cfg.d2, &cfg.target, cfg.level).map_err(|e| e.to_string()),
                _ => match crossfit.as_ref().expect("cross-fit requested") {
                    Err(e) => Err(e.clone()),
                    Ok(cf) => {
                        let m = match method {
                            MethodTag::Efficient => Method::Efficient,
                            MethodTag::Whitened => Method::Whitened,
                            MethodTag::IpwKnown => Method::IpwKnown(setup.sampling.clone()),
                            MethodTag::IpwEstimated => Method::IpwEstimated,
                            _ => Method::EfficientNonuniform,
                        };
                        cf.one_step(&battles, &cfg.target, &m, cfg.level).map_err(|e| e.to_string())
                    }
                },
            };
            MethodOutcome { method, result }
        })
        .collect();
    Ok(ReplicationResult { replication: rep, truth_value, outcomes })
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub config: SimConfig,
    pub setup: StudySetup,
    pub oracle_se: Vec<(MethodTag, Option<f64>)>,
    pub replications: Vec<ReplicationResult>,
}

/// Runs every replication on the rayon pool; results are ordered by
/// replication index and do not depend on the number of workers.
pub fn run_study(cfg: &SimConfig) -> Result<StudyResult> {
    let setup = setup_study(cfg)?;
    let oracle = cfg
        .methods
        .iter()
        .map(|&m| Ok((m, oracle_se(cfg, &setup, m)?)))
        .collect::<Result<Vec<_>>>()?;
    let replications = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| run_replication(cfg, &setup, rep))
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyResult { config: cfg.clone(), setup, oracle_se: oracle, replications })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: MethodTag,
    pub level: f64,
    /// Successful replications.
    pub replications: usize,
    pub failures: usize,
    pub coverage: f64,
    pub median_se: f64,
    pub oracle_se: Option<f64>,
    pub se_ratio: Option<f64>,
    pub z_scores: Vec<f64>,
    pub mean_abs_z: f64,
    pub var_z: f64,
    pub ks_distance: f64,
    pub mean_estimate: f64,
    pub empirical_sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MCSummary {
    pub methods: Vec<MethodSummary>,
}

impl MCSummary {
    pub fn get(&self, method: MethodTag) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Kolmogorov–Smirnov distance between the sample and `N(0,1)`.
pub fn ks_distance_normal(sample: &[f64]) -> f64 {
    if sample.is_empty() {
        return f64::NAN;
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = normal.cdf(*x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

/// One row of the diagnostic export.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiagnosticRecord {
    pub method: String,
    pub replication: usize,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub covered: bool,
}

fn summarize(
    method: MethodTag,
    level: f64,
    rows: &[(f64, f64, bool, f64)],
    failures: usize,
    oracle: Option<f64>,
) -> Result<MethodSummary> {
    if rows.is_empty() {
        return Err(Error::Empty(format!("no successful replications for {method}")));
    }
    if oracle == Some(0.0) {
        return Err(Error::Domain(format!("oracle standard error for {method} is zero; ratio undefined")));
    }
    let n = rows.len() as f64;
    let coverage = rows.iter().filter(|r| r.2).count() as f64 / n;
    let median_se = median(rows.iter().map(|r| r.1).collect());
    let z: Vec<f64> = rows.iter().map(|r| r.3).collect();
    let mean_abs_z = z.iter().map(|x| x.abs()).sum::<f64>() / n;
    let mean_z = z.iter().sum::<f64>() / n;
    let var_z = if rows.len() > 1 { z.iter().map(|x| (x - mean_z).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let mean_estimate = rows.iter().map(|r| r.0).sum::<f64>() / n;
    let empirical_sd = if rows.len() > 1 {
        (rows.iter().map(|r| (r.0 - mean_estimate).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(MethodSummary {
        method,
        level,
        replications: rows.len(),
        failures,
        coverage,
        median_se,
        oracle_se: oracle,
        se_ratio: oracle.map(|o| median_se / o),
        ks_distance: ks_distance_normal(&z),
        z_scores: z,
        mean_abs_z,
        var_z,
        mean_estimate,
        empirical_sd,
    })
}

/// Coverage, SE calibration and z-score summaries for one method's reports
/// against a fixed truth value.
pub fn mc_summary(method: MethodTag, reports: &[EstimateReport], truth: f64, oracle_se: Option<f64>) -> Result<MethodSummary> {
    let level = reports.first().map_or(0.95, |r| r.level);
    let rows: Vec<_> = reports
        .iter()
        .map(|r| (r.estimate, r.standard_error, r.covers(truth), (r.estimate - truth) / r.standard_error))
        .collect();
    summarize(method, level, &rows, 0, oracle_se)
}

impl StudyResult {
    fn oracle_for(&self, method: MethodTag) -> Option<f64> {
        self.oracle_se.iter().find(|(m, _)| *m == method).and_then(|(_, o)| *o)
    }

    /// Summaries with intervals rebuilt at `level`.
    pub fn summary_at_level(&self, level: f64) -> Result<MCSummary> {
        let mut methods = Vec::new();
        for &method in &self.config.methods {
            let mut rows = Vec::new();
            let mut failures = 0;
            for rep in &self.replications {
                for o in rep.outcomes.iter().filter(|o| o.method == method) {
                    match &o.result {
                        Ok(r) => {
                            let r = r.at_level(level)?;
                            let t = rep.truth_value;
                            rows.push((r.estimate, r.standard_error, r.covers(t), (r.estimate - t) / r.standard_error));
                        }
                        Err(_) => failures += 1,
                    }
                }
            }
            methods.push(summarize(method, level, &rows, failures, self.oracle_for(method))?);
        }
        Ok(MCSummary { methods })
    }

    pub fn summary(&self) -> Result<MCSummary> {
        self.summary_at_level(self.config.level)
    }

    /// Per-replication rows in replication-major, method-minor order.
    pub fn records(&self) -> Vec<DiagnosticRecord> {
        let mut out = Vec::new();
        for rep in &self.replications {
            for o in &rep.outcomes {
                if let Ok(r) = &o.result {
                    out.push(DiagnosticRecord {
                        method: o.method.as_str().to_string(),
                        replication: rep.replication,
                        estimate: r.estimate,
                        se: r.standard_error,
                        z: (r.estimate - rep.truth_value) / r.standard_error,
                        covered: r.covers(rep.truth_value),
                    });
                }
            }
        }
        out
    }

    /// Failure messages by replication and method.
    pub fn failures(&self) -> Vec<(usize, MethodTag, String)> {
        let mut out = Vec::new();
        for rep in &self.replications {
            for o in &rep.outcomes {
                if let Err(e) = &o.result {
                    out.push((rep.replication, o.method, e.clone()));
                }
            }
        }
        out
    }
}

pub const DIAGNOSTIC_HEADER: [&str; 6] = ["method", "replication", "estimate", "se", "z", "covered"];
pub const SUMMARY_HEADER: [&str; 13] = [
    "method",
    "level",
    "replications",
    "failures",
    "coverage",
    "median_se",
    "oracle_se",
    "se_ratio",
    "mean_abs_z",
    "var_z",
    "ks_distance",
    "mean_estimate",
    "empirical_sd",
];

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// Writes per-replication rows to `records_path` and the per-method summary
/// to `summary_path`.
pub fn export_diagnostics(result: &StudyResult, records_path: &Path, summary_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(records_path)?;
    w.write_record(DIAGNOSTIC_HEADER)?;
    for r in result.records() {
        w.write_record([
            r.method.clone(),
            r.replication.to_string(),
            r.estimate.to_string(),
            r.se.to_string(),
            r.z.to_string(),
            r.covered.to_string(),
        ])?;
    }
    w.flush()?;
    write_summary(&result.summary()?, summary_path)
}

pub fn write_summary(summary: &MCSummary, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for m in &summary.methods {
        w.write_record([
            m.method.as_str().to_string(),
            m.level.to_string(),
            m.replications.to_string(),
            m.failures.to_string(),
            m.coverage.to_string(),
            m.median_se.to_string(),
            opt(m.oracle_se),
            opt(m.se_ratio),
            m.mean_abs_z.to_string(),
            m.var_z.to_string(),
            m.ks_distance.to_string(),
            m.mean_estimate.to_string(),
            m.empirical_sd.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_diagnostics(path: &Path) -> Result<Vec<DiagnosticRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != DIAGNOSTIC_HEADER {
        return Err(Error::Io(format!("unexpected diagnostic header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Rebuilds a method summary from exported rows.
pub fn summary_from_records(records: &[DiagnosticRecord], method: MethodTag, level: f64, oracle: Option<f64>) -> Result<MethodSummary> {
    let rows: Vec<_> = records
        .iter()
        .filter(|r| r.method == method.as_str())
        .map(|r| (r.estimate, r.se, r.covered, r.z))
        .collect();
    summarize(method, level, &rows, 0, oracle)
}

// ---------------------------------------------------------------------------
// Estimation accuracy studies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimationErrors {
    pub relative_frobenius: f64,
    pub max_abs: f64,
    pub mean_abs: f64,
}

impl EstimationErrors {
    pub fn of(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Self {
        let diff = estimate - truth;
        Self {
            relative_frobenius: diff.norm() / truth.norm(),
            max_abs: max_abs(&diff),
            mean_abs: diff.iter().map(|x| x.abs()).sum::<f64>() / diff.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationComparison {
    pub altmin: EstimationErrors,
    pub refined: EstimationErrors,
    pub naive: EstimationErrors,
}

/// AltMin, refined and per-category fits on one draw of `n` uniform battles.
pub fn estimation_study(d: usize, rank: usize, alpha: f64, n: usize, seed: u64) -> Result<EstimationComparison> {
    let cfg = SimConfig { methods: vec![MethodTag::Naive], ..SimConfig::new(d, rank, alpha, n, 1) };
    let cfg = SimConfig { seed, ..cfg };
    let setup = setup_study(&cfg)?;
    let (battles, _, _) = replication_battles(&cfg, &setup, 0)?;
    let t = setup.truth.entries();
    let am = altmin_fit(&battles, d, d, &cfg.fit)?;
    let re = refine_entrywise(&am.estimate, &battles, &cfg.fit)?;
    let naive = naive_per_task_btl(&battles, d, d)?;
    Ok(EstimationComparison {
        altmin: EstimationErrors::of(am.estimate.entries(), t),
        refined: EstimationErrors::of(re.estimate.entries(), t),
        naive: EstimationErrors::of(naive.entries(), t),
    })
}

/// AltMin-only and refined errors over `reps` fresh data sets on one truth.
pub fn refinement_study(d: usize, rank: usize, alpha: f64, n: usize, reps: usize, seed: u64) -> Result<Vec<(EstimationErrors, EstimationErrors)>> {
    let cfg = SimConfig { seed, methods: vec![MethodTag::Naive], ..SimConfig::new(d, rank, alpha, n, reps) };
    let setup = setup_study(&cfg)?;
    (0..reps)
        .into_par_iter()
        .map(|rep| {
            let (battles, _, _) = replication_battles(&cfg, &setup, rep)?;
            let t = setup.truth.entries();
            let am = altmin_fit(&battles, d, d, &cfg.fit)?;
            let re = refine_entrywise(&am.estimate, &battles, &cfg.fit)?;
            Ok((EstimationErrors::of(am.estimate.entries(), t), EstimationErrors::of(re.estimate.entries(), t)))
        })
        .collect()
}
