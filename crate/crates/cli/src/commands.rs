//! Command implementations. Each is a thin wrapper over library calls.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use btlinfer::fitting::{fit_low_rank, FitConfig};
use btlinfer::inference::{naive_estimate, CrossFit, CrossFitConfig, EstimateReport, FunctionalSpec, Method, MethodTag};
use btlinfer::model::SamplingModel;
use btlinfer::simlab::{self, SamplingSpec, SimConfig, StudyResult, MCSummary};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::ingest::{self, BattleLogRecord, Dataset, IngestOptions, TiePolicy, Winner};
use crate::persist::{FitMetadata, PersistedModel};

pub fn ingest_options(cfg: &Config) -> CliResult<IngestOptions> {
    let category_map = match &cfg.data.category_map {
        Some(p) => ingest::read_category_map(p)?,
        None => Default::default(),
    };
    Ok(IngestOptions { top_k: cfg.data.top_k, category_map, tie_policy: TiePolicy::parse(&cfg.data.tie_policy)? })
}

fn data_path(cfg: &Config) -> CliResult<&Path> {
    cfg.data.path.as_deref().ok_or_else(|| CliError::Config("data.path is not set".into()))
}

pub fn load_dataset(cfg: &Config) -> CliResult<Dataset> {
    ingest::ingest(data_path(cfg)?, &ingest_options(cfg)?)
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Fits AltMin plus refinement on the configured data and persists it when
/// `output.model` is set.
pub fn fit_command(cfg: &Config) -> CliResult<PersistedModel> {
    let ds = load_dataset(cfg)?;
    let fit_cfg = cfg.fit.fit_config()?;
    let fit = fit_low_rank(&ds.battles, ds.n_models(), ds.n_categories(), &fit_cfg).map_err(CliError::numerical("fit"))?;
    let meta = FitMetadata { n: ds.records, method: "altmin+refine".into(), timestamp: now(), seed: cfg.fit.split_seed };
    let model = PersistedModel::new(ds.model_names, ds.category_names, &fit.estimate, &fit.frame, meta)?;
    if let Some(p) = &cfg.output.model {
        model.save(p)?;
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Targets and names
// ---------------------------------------------------------------------------

fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(ca != *cb)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Index of `name` in `table`, or an error naming the closest entries.
pub fn resolve_name(name: &str, table: &[String], kind: &str) -> CliResult<usize> {
    if let Some(i) = table.iter().position(|t| t == name) {
        return Ok(i);
    }
    let mut ranked: Vec<(usize, &String)> = table.iter().map(|t| (levenshtein(name, t), t)).collect();
    ranked.sort();
    let near: Vec<&str> = ranked.iter().take(3).map(|(_, t)| t.as_str()).collect();
    Err(CliError::Parse(format!("unknown {kind} {name:?}; nearest matches: {}", near.join(", "))))
}

/// Parses `entry:M:C`, `winprob:A:B:C` or `contrast:A:B:C`, mapping each
/// model and category token through the resolvers.
pub fn parse_target(
    text: &str,
    model: &dyn Fn(&str) -> CliResult<usize>,
    category: &dyn Fn(&str) -> CliResult<usize>,
) -> CliResult<FunctionalSpec> {
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        ["entry", m, c] => Ok(FunctionalSpec::entry(model(m)?, category(c)?)),
        ["winprob", a, b, c] => Ok(FunctionalSpec::WinProb { a: model(a)?, b: model(b)?, category: category(c)? }),
        ["contrast", a, b, c] => Ok(FunctionalSpec::CategoryContrast { a: model(a)?, b: model(b)?, category: category(c)? }),
        _ => Err(CliError::Parse(format!(
            "target {text:?} must be entry:MODEL:CATEGORY, winprob:A:B:CATEGORY or contrast:A:B:CATEGORY"
        ))),
    }
}

fn index_token(kind: &'static str, bound: usize) -> impl Fn(&str) -> CliResult<usize> {
    move |s: &str| {
        let i: usize = s.parse().map_err(|_| CliError::Parse(format!("{kind} index {s:?} is not a number")))?;
        if i >= bound {
            return Err(CliError::Parse(format!("{kind} index {i} out of range (< {bound})")));
        }
        Ok(i)
    }
}

/// Index-based target for simulated data.
pub fn parse_index_target(text: &str, d1: usize, d2: usize) -> CliResult<FunctionalSpec> {
    parse_target(text, &index_token("model", d1), &index_token("category", d2))
}

pub fn parse_named_target(text: &str, models: &[String], categories: &[String]) -> CliResult<FunctionalSpec> {
    parse_target(text, &|s| resolve_name(s, models, "model"), &|s| resolve_name(s, categories, "category"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMethod {
    Efficient,
    Whitened,
    Ipw,
    Naive,
}

impl InferMethod {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "efficient" => Ok(Self::Efficient),
            "whitened" => Ok(Self::Whitened),
            "ipw" => Ok(Self::Ipw),
            "naive" => Ok(Self::Naive),
            _ => Err(CliError::Config(format!("method must be efficient, whitened, ipw or naive, got {s:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub target: String,
    pub method: String,
    pub estimate: f64,
    pub se: f64,
    pub ci: [f64; 2],
    pub n: f64,
    pub folds: usize,
    pub seed: u64,
}

impl InferenceReport {
    pub fn from_estimate(target: &str, r: &EstimateReport, seed: u64) -> Self {
        Self {
            target: target.to_string(),
            method: r.method.as_str().to_string(),
            estimate: r.estimate,
            se: r.standard_error,
            ci: [r.ci_low, r.ci_high],
            n: r.n_used,
            folds: r.folds,
            seed,
        }
    }

    pub fn text(&self, level: f64) -> String {
        format!(
            "{}  [{}]\n  estimate {:.6} ± {:.6} (SE)\n  {:.0}% CI [{:.6}, {:.6}]\n  n = {}, folds = {}, seed = {}\n",
            self.target,
            self.method,
            self.estimate,
            self.se,
            level * 100.0,
            self.ci[0],
            self.ci[1],
            self.n,
            self.folds,
            self.seed
        )
    }
}

/// Cross-fitting settings for data tied to a persisted model.
pub fn crossfit_config(cfg: &Config, model: &PersistedModel) -> CliResult<CrossFitConfig> {
    let mut fit = cfg.fit.fit_config()?;
    fit.rank = model.rank;
    fit.clip_bound = model.bound;
    fit.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(CrossFitConfig { folds: cfg.inference.folds, seed: cfg.inference.seed, fit, level: cfg.inference.level })
}

/// Runs one estimator on an already indexed dataset.
pub fn estimate_on_dataset(ds: &Dataset, spec: &FunctionalSpec, method: InferMethod, cf: &CrossFitConfig) -> CliResult<EstimateReport> {
    let (d1, d2) = (ds.n_models(), ds.n_categories());
    let method = match method {
        InferMethod::Naive => {
            return naive_estimate(&ds.battles, d1, d2, spec, cf.level).map_err(CliError::numerical("naive fit"));
        }
        InferMethod::Efficient => Method::Efficient,
        InferMethod::Whitened => Method::Whitened,
        InferMethod::Ipw => Method::IpwEstimated,
    };
    spec.validate(d1, d2).map_err(CliError::numerical("target"))?;
    let crossfit = CrossFit::new(&ds.battles, d1, d2, cf).map_err(CliError::numerical("cross-fit"))?;
    crossfit.one_step(&ds.battles, spec, &method, cf.level).map_err(CliError::numerical("one-step"))
}

/// Loads the model's name tables, indexes the data against them and runs the
/// requested estimator. Writes the JSON report when `output.report` is set.
pub fn infer_command(model_path: &Path, data: &Path, target: &str, method: &str, cfg: &Config) -> CliResult<InferenceReport> {
    let model = PersistedModel::load(model_path)?;
    let method = InferMethod::parse(method)?;
    let spec = parse_named_target(target, &model.model_names, &model.category_names)?;
    let records = ingest::read_records_path(data)?;
    let ds = ingest::dataset_with_names(&records, &model.model_names, &model.category_names, &ingest_options(cfg)?)?;
    let cf = crossfit_config(cfg, &model)?;
    let r = estimate_on_dataset(&ds, &spec, method, &cf)?;
    let report = InferenceReport::from_estimate(target, &r, cf.seed);
    if let Some(p) = &cfg.output.report {
        std::fs::write(p, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Leaderboard
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub category: String,
    pub rank: usize,
    pub model: String,
    pub score: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub const LEADERBOARD_HEADER: [&str; 7] = ["category", "rank", "model", "score", "se", "ci_low", "ci_high"];

/// Efficient entry-target inference for every (model, category), ranked by
/// descending score within each category.
pub fn leaderboard(ds: &Dataset, cf: &CrossFitConfig) -> CliResult<Vec<LeaderboardRow>> {
    let (d1, d2) = (ds.n_models(), ds.n_categories());
    let crossfit = CrossFit::new(&ds.battles, d1, d2, cf).map_err(CliError::numerical("cross-fit"))?;
    let specs: Vec<FunctionalSpec> = (0..d2).flat_map(|u| (0..d1).map(move |m| FunctionalSpec::entry(m, u))).collect();
    let reports = crossfit
        .one_step_batch(&ds.battles, &specs, &Method::Efficient, cf.level)
        .map_err(CliError::numerical("one-step"))?;
    let mut rows = Vec::with_capacity(d1 * d2);
    for u in 0..d2 {
        let mut order: Vec<usize> = (0..d1).collect();
        let rep = |m: usize| &reports[u * d1 + m];
        order.sort_by(|&a, &b| rep(b).estimate.total_cmp(&rep(a).estimate).then(a.cmp(&b)));
        for (k, &m) in order.iter().enumerate() {
            let r = rep(m);
            rows.push(LeaderboardRow {
                category: ds.category_names[u].clone(),
                rank: k + 1,
                model: ds.model_names[m].clone(),
                score: r.estimate,
                se: r.standard_error,
                ci_low: r.ci_low,
                ci_high: r.ci_high,
            });
        }
    }
    Ok(rows)
}

pub fn write_leaderboard_csv(rows: &[LeaderboardRow], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LEADERBOARD_HEADER)?;
    for r in rows {
        w.write_record([
            r.category.clone(),
            r.rank.to_string(),
            r.model.clone(),
            r.score.to_string(),
            r.se.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn leaderboard_text(rows: &[LeaderboardRow]) -> String {
    let mut out = String::new();
    let mut current: Option<&str> = None;
    for r in rows {
        if current != Some(r.category.as_str()) {
            current = Some(&r.category);
            out.push_str(&format!("\n== {} ==\n{:>4}  {:<32} {:>10} {:>8}  {:>21}\n", r.category, "rank", "model", "score", "se", "CI"));
        }
        out.push_str(&format!(
            "{:>4}  {:<32} {:>10.4} {:>8.4}  [{:>8.4}, {:>8.4}]\n",
            r.rank, r.model, r.score, r.se, r.ci_low, r.ci_high
        ));
    }
    out
}

pub fn leaderboard_command(model_path: &Path, data: &Path, level: f64, cfg: &Config) -> CliResult<Vec<LeaderboardRow>> {
    let model = PersistedModel::load(model_path)?;
    let records = ingest::read_records_path(data)?;
    let ds = ingest::dataset_with_names(&records, &model.model_names, &model.category_names, &ingest_options(cfg)?)?;
    let mut cf = crossfit_config(cfg, &model)?;
    cf.level = level;
    let rows = leaderboard(&ds, &cf)?;
    if let Some(p) = &cfg.output.leaderboard {
        write_leaderboard_csv(&rows, p)?;
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

pub fn parse_sampling(s: &str) -> CliResult<SamplingSpec> {
    if s == "uniform" {
        return Ok(SamplingSpec::Uniform);
    }
    if let Some(c) = s.strip_prefix("dirichlet:") {
        let concentration: f64 = c.parse().map_err(|_| CliError::Config(format!("bad concentration in {s:?}")))?;
        return Ok(SamplingSpec::Dirichlet { concentration });
    }
    Err(CliError::Config(format!("sampling must be uniform or dirichlet:C, got {s:?}")))
}

/// Study configuration from the `[simulation]`, `[fit]` and `[inference]`
/// sections. The fit rank follows the simulated rank and `α₀ = α + 2`.
pub fn sim_config(cfg: &Config) -> CliResult<SimConfig> {
    let s = &cfg.simulation;
    let methods = s
        .methods
        .iter()
        .map(|m| MethodTag::parse(m).ok_or_else(|| CliError::Config(format!("unknown method {m:?}"))))
        .collect::<CliResult<Vec<_>>>()?;
    let mut fit: FitConfig = cfg.fit.fit_config()?;
    fit.rank = s.rank;
    fit.clip_bound = s.alpha + 2.0;
    let sim = SimConfig {
        d1: s.d1,
        d2: s.d2,
        rank: s.rank,
        alpha: s.alpha,
        n: s.n,
        replications: s.replications,
        methods,
        target: parse_index_target(&s.target, s.d1, s.d2)?,
        sampling: parse_sampling(&s.sampling)?,
        seed: s.seed,
        folds: cfg.inference.folds,
        fit,
        level: cfg.inference.level,
        redraw_truth: s.redraw_truth,
    };
    sim.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(sim)
}

pub fn model_name(i: usize) -> String {
    format!("model_{i:03}")
}

pub fn category_name(u: usize) -> String {
    format!("category_{u:02}")
}

/// Battles of replication 0 as log records with synthetic names.
pub fn simulate_records(cfg: &Config) -> CliResult<Vec<BattleLogRecord>> {
    let sim = sim_config(cfg)?;
    let setup = simlab::setup_study(&sim).map_err(CliError::numerical("simulation setup"))?;
    let (battles, _, _) = simlab::replication_battles(&sim, &setup, 0).map_err(CliError::numerical("simulation"))?;
    Ok(battles
        .iter()
        .map(|b| BattleLogRecord {
            model_a: model_name(b.atom.first()),
            model_b: model_name(b.atom.second()),
            category: category_name(b.atom.category()),
            winner: if b.first_wins { Winner::ModelA } else { Winner::ModelB },
        })
        .collect())
}

pub fn simulate_command(cfg: &Config) -> CliResult<Vec<BattleLogRecord>> {
    let records = simulate_records(cfg)?;
    if let Some(p) = &cfg.output.battles {
        ingest::write_records(&records, p)?;
    }
    Ok(records)
}

/// Runs the configured Monte Carlo study and writes the diagnostic and
/// summary CSVs when their paths are set.
pub fn mc_command(cfg: &Config) -> CliResult<(StudyResult, MCSummary)> {
    let sim = sim_config(cfg)?;
    let result = simlab::run_study(&sim).map_err(CliError::numerical("study"))?;
    let summary = result.summary().map_err(CliError::numerical("summary"))?;
    if let Some(p) = &cfg.output.diagnostics {
        let mut w = csv::Writer::from_path(p)?;
        for r in result.records() {
            w.serialize(&r)?;
        }
        w.flush()?;
    }
    if let Some(p) = &cfg.output.summary {
        simlab::write_summary(&summary, p).map_err(CliError::numerical("summary export"))?;
    }
    Ok((result, summary))
}

pub fn summary_text(summary: &MCSummary) -> String {
    let mut out = format!(
        "{:<22} {:>6} {:>9} {:>9} {:>9} {:>8} {:>8} {:>7} {:>6}\n",
        "method", "reps", "coverage", "med SE", "SE*", "SE/SE*", "mean|z|", "var z", "KS"
    );
    for m in &summary.methods {
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!(
            "{:<22} {:>6} {:>9.3} {:>9.4} {:>9} {:>8} {:>8.3} {:>7.3} {:>6.3}\n",
            m.method.as_str(),
            m.replications,
            m.coverage,
            m.median_se,
            f(m.oracle_se),
            f(m.se_ratio),
            m.mean_abs_z,
            m.var_z,
            m.ks_distance
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Subsampling studies on real logs
// ---------------------------------------------------------------------------

/// Seeded uniform subsample of records without replacement.
pub fn subsample_records(records: &[BattleLogRecord], fraction: f64, seed: u64) -> CliResult<Vec<BattleLogRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CliError::Config(format!("subsample fraction must lie in (0,1], got {fraction}")));
    }
    let k = ((records.len() as f64) * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, records.len(), k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| records[i].clone()).collect())
}

/// Per-method estimates over repeated subsamples of the same log, indexed
/// against the full-data name tables.
#[allow(clippy::too_many_arguments)]
pub fn subsample_study(
    records: &[BattleLogRecord],
    full: &Dataset,
    opts: &IngestOptions,
    spec: &FunctionalSpec,
    methods: &[InferMethod],
    fraction: f64,
    reps: usize,
    cf: &CrossFitConfig,
) -> CliResult<Vec<Vec<f64>>> {
    let mut out = vec![Vec::with_capacity(reps); methods.len()];
    for rep in 0..reps {
        let sub = subsample_records(records, fraction, cf.seed.wrapping_add(rep as u64))?;
        let ds = ingest::dataset_with_names(&sub, &full.model_names, &full.category_names, opts)?;
        let cf_rep = CrossFitConfig { seed: cf.seed.wrapping_add(rep as u64), ..cf.clone() };
        for (j, m) in methods.iter().enumerate() {
            out[j].push(estimate_on_dataset(&ds, spec, *m, &cf_rep)?.estimate);
        }
    }
    Ok(out)
}

pub fn sample_sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Known design helper for tests and fixtures.
pub fn uniform_design(d1: usize, d2: usize) -> CliResult<SamplingModel> {
    SamplingModel::uniform(d1, d2).map_err(CliError::numerical("design"))
}
