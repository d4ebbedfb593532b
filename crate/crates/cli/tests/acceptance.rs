//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `BTLINFER_ACCEPTANCE=1,4,10` runs a subset.
//!
//! Criterion 11 uses the public arena log when `BTLINFER_ARENA_CSV` (and
//! optionally `BTLINFER_ARENA_CATEGORY_MAP`, `BTLINFER_ARENA_REPS`) is set,
//! and a generated fixture otherwise.

use std::collections::HashMap;
use std::process::Command;
use std::time::Instant;

use btlinfer::fitting::FitConfig;
use btlinfer::geometry::{center_columns, truncate_rank, ScoreMatrix, TangentCoords, TangentFrame};
use btlinfer::inference::{
    build_k, efficiency_bound, entrywise_inverse_diagnostic, pairwise_dimension, whitened_oracle_variance, CrossFitConfig,
    FunctionalSpec, InfoOperator, InfoSolver, MethodTag, SolveRoute,
};
use btlinfer::model::{all_atoms, atom_inner, sigmoid, Battle, SamplingModel};
use btlinfer::simlab::{estimation_study, gen_truth, refinement_study, run_study, MCSummary, SamplingSpec, SimConfig};
use btlinfer_cli::commands::{self, InferMethod, InferenceReport};
use btlinfer_cli::config::Config;
use btlinfer_cli::ingest::{self, BattleLogRecord, IngestOptions, TiePolicy, Winner};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STUDY_SEED: u64 = 0;
const REPS: usize = 500;

type Step = (u32, fn(&mut Ledger));

struct Ledger {
    lines: Vec<(String, bool)>,
}

impl Ledger {
    fn record(&mut self, name: &str, ok: bool, detail: String) {
        println!("{} criterion {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.lines.push((name.to_string(), ok));
    }
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

fn random_frame(rng: &mut ChaCha8Rng, d1: usize, d2: usize, r: usize) -> TangentFrame {
    truncate_rank(&center_columns(&(random(rng, d1, r) * random(rng, d2, r).transpose())), r).unwrap().frame
}

fn dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

fn in_band(x: f64, lo: f64, hi: f64) -> bool {
    x >= lo && x <= hi
}

// ---------------------------------------------------------------------------

fn criterion_1(l: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 6];
    for _ in 0..200 {
        let d1 = rng.random_range(3..=6);
        let d2 = rng.random_range(1..=4);
        let r = rng.random_range(1..=2usize).min(d2);

        let h = center_columns(&random(&mut rng, d1, d2));
        let atoms: Vec<_> = all_atoms(d1, d2).collect();
        let mean = atoms.iter().map(|a| atom_inner(&h, a).unwrap().powi(2)).sum::<f64>() / atoms.len() as f64;
        let frob = 2.0 * h.norm_squared() / (d2 as f64 * (d1 as f64 - 1.0));
        worst[0] = worst[0].max((mean - frob).abs() / frob.max(1.0));

        let z = h.column(0).into_owned();
        let mut pair = Vec::new();
        for u in 0..d1 {
            for v in u + 1..d1 {
                pair.push((z[u] - z[v]).powi(2));
            }
        }
        let expect = 2.0 * z.norm_squared() / (d1 as f64 - 1.0);
        worst[1] = worst[1].max((pair.iter().sum::<f64>() / pair.len() as f64 - expect).abs() / expect.max(1.0));

        let theta = center_columns(&random(&mut rng, d1, r));
        let mut gram = DMatrix::zeros(r, r);
        for u in 0..d1 {
            for v in u + 1..d1 {
                let diff = (theta.row(u) - theta.row(v)).transpose();
                gram += &diff * diff.transpose();
            }
        }
        worst[2] = worst[2].max((gram - theta.transpose() * &theta * d1 as f64).amax());

        let f = random_frame(&mut rng, d1, d2, r);
        let (h1, h2) = (random(&mut rng, d1, d2), random(&mut rng, d1, d2));
        let (p1, p2) = (f.project(&h1).unwrap(), f.project(&h2).unwrap());
        let idem = (f.project(&p1).unwrap() - &p1).amax();
        let adj = (dot(&p1, &h2) - dot(&h1, &p2)).abs();
        let range = p1.column_iter().map(|c| c.sum().abs()).fold(0.0, f64::max);
        worst[3] = worst[3].max(idem).max(adj).max(range);

        let truth = ScoreMatrix::new(center_columns(&random(&mut rng, d1, d2)), 2.0).unwrap();
        let battles = SamplingModel::uniform(d1, d2).unwrap().sample_battles(&truth, 30, &mut rng).unwrap();
        let op = InfoOperator::plugin(&battles, &truth, None).unwrap();
        let k = build_k(&f, &op).unwrap();
        let th = DVector::from_fn(k.nrows(), |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let coords = TangentCoords::from_vector(&th, d1, d2, r).unwrap();
        let routed = f.matrix_to_coords(&op.apply(&f.coords_to_matrix(&coords).unwrap()).unwrap()).unwrap().to_vector();
        worst[4] = worst[4].max((&k * &th - routed).amax());

        let hh = random(&mut rng, d1, d2);
        let back = f.matrix_to_coords(&hh).unwrap();
        let lhs = dot(&f.coords_to_matrix(&coords).unwrap(), &hh);
        let rhs = dot(&coords.a, &back.a) + dot(&coords.c, &back.c);
        worst[5] = worst[5].max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    let tol = [1e-12, 1e-12, 1e-10, 1e-10, 1e-10, 1e-12];
    let names = ["frobenius", "pairwise-diff", "gram", "projector", "K-route", "adjoint"];
    let ok = worst.iter().zip(&tol).all(|(w, t)| w <= t);
    let detail = names.iter().zip(&worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    l.record("1 (exact identities, 200 draws each)", ok, detail);
}

fn criterion_2(l: &mut Ledger) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (d1, d2, r) = (4, 2, 1);
    let raw = center_columns(&(random(&mut rng, d1, r) * random(&mut rng, d2, r).transpose())) * 2.0;
    let truth = ScoreMatrix::new(raw.clone(), raw.amax() + 1.0).unwrap();
    let frame = truncate_rank(&raw, r).unwrap().frame;
    let s = SamplingModel::uniform(d1, d2).unwrap();
    let op = InfoOperator::population(&truth, &s).unwrap();
    let gamma = random(&mut rng, d1, d2);
    let sol = InfoSolver::new(&frame, &op, SolveRoute::Dense).unwrap().solve(&gamma).unwrap();
    let mut m2 = 0.0;
    for a in s.atoms() {
        let p = s.atom_probability(&a).unwrap();
        let eta = atom_inner(&raw, &a).unwrap();
        let x = atom_inner(&sol.direction, &a).unwrap();
        let pr = sigmoid(eta).unwrap();
        for (y, py) in [(1.0, pr), (0.0, 1.0 - pr)] {
            m2 += p * py * ((y - pr) * x).powi(2);
        }
    }
    let bound = efficiency_bound(&frame, &op, &gamma).unwrap();
    let vws = whitened_oracle_variance(&frame, &truth, &s, &gamma, false).unwrap();
    let gap = (m2 - bound).abs();
    let ok = gap <= 1e-10 && vws >= bound - 1e-10 && start.elapsed().as_secs_f64() < 1.0;
    l.record(
        "2 (oracle attainment, d1=4 d2=2 r=1)",
        ok,
        format!("|E[phi^2] - V_eff| = {gap:.1e}, V_eff {bound:.6}, V_ws {vws:.6}, {:.3}s", start.elapsed().as_secs_f64()),
    );
}

fn criterion_3(l: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let d1 = rng.random_range(3..=50);
        let d2 = rng.random_range(1..=50);
        let r = rng.random_range(1..=3usize).min(d2).min(d1 - 1);
        let raw = center_columns(&(random(&mut rng, d1, r) * random(&mut rng, d2, r).transpose()));
        let raw = &raw * (3.0 / raw.amax());
        let truth = ScoreMatrix::new(raw, 4.0).unwrap();
        let frame = random_frame(&mut rng, d1, d2, r);
        let s = SamplingModel::uniform(d1, d2).unwrap();
        let op = if case % 2 == 0 {
            InfoOperator::population(&truth, &s).unwrap()
        } else {
            let battles = s.sample_battles(&truth, 30 * d1 * d2, &mut rng).unwrap();
            InfoOperator::plugin(&battles, &truth, None).unwrap()
        };
        let g = random(&mut rng, d1, d2);
        let gamma = frame.project(&g).unwrap() + g * 0.5;
        let sol = InfoSolver::new(&frame, &op, SolveRoute::Auto).unwrap().solve(&gamma).unwrap();
        let pg = frame.project(&gamma).unwrap();
        let res = (frame.project(&op.apply(&sol.direction).unwrap()).unwrap() - &pg).norm() / pg.norm();
        worst = worst.max(res);
    }
    l.record("3 (information-equation residual, 100 instances)", worst <= 1e-6, format!("max relative residual {worst:.2e} (tol 1e-6)"));
}

fn criterion_4(l: &mut Ledger) {
    let start = Instant::now();
    let e = estimation_study(200, 5, 5.0, 60_000, STUDY_SEED).unwrap();
    let ratio = e.naive.relative_frobenius / e.altmin.relative_frobenius;
    let secs = start.elapsed().as_secs_f64();
    let ok = e.altmin.relative_frobenius <= 0.55 && ratio > 5.0 && secs < 600.0;
    l.record(
        "4 (estimation accuracy, d=200 r=5 n=60000)",
        ok,
        format!(
            "AltMin rel {:.3} (<= 0.55), linf {:.3}, MAE {:.3}; refined rel {:.3}; naive rel {:.3}; naive/AltMin {:.2} (> 5); {:.0}s",
            e.altmin.relative_frobenius,
            e.altmin.max_abs,
            e.altmin.mean_abs,
            e.refined.relative_frobenius,
            e.naive.relative_frobenius,
            ratio,
            secs
        ),
    );
}

fn print_summary(title: &str, s: &MCSummary, secs: f64) {
    println!("  {title} ({secs:.0}s)");
    for line in commands::summary_text(s).lines() {
        println!("    {line}");
    }
}

fn study(d: usize, rank: usize, n: usize, reps: usize, methods: Vec<MethodTag>, target: FunctionalSpec, sampling: SamplingSpec) -> (MCSummary, f64) {
    let mut cfg = SimConfig::new(d, rank, 5.0, n, reps);
    cfg.seed = STUDY_SEED;
    cfg.methods = methods;
    cfg.target = target;
    cfg.sampling = sampling;
    let start = Instant::now();
    let s = run_study(&cfg).unwrap().summary().unwrap();
    (s, start.elapsed().as_secs_f64())
}

fn criteria_5_and_9(l: &mut Ledger, run9: bool) {
    let (smoke, secs) = study(60, 3, 5_400, 100, vec![MethodTag::Efficient, MethodTag::Whitened], FunctionalSpec::entry(0, 0), SamplingSpec::Uniform);
    print_summary("pre-gate d=60 n=5400 r=3, 100 reps", &smoke, secs);
    let eff = smoke.get(MethodTag::Efficient).unwrap();
    l.record(
        "5 pre-gate (d=60 smoke, efficient coverage in [0.85, 0.99])",
        in_band(eff.coverage, 0.85, 0.99),
        format!("coverage {:.3}, {} failures", eff.coverage, eff.failures),
    );

    let (s, secs) = study(200, 5, 60_000, REPS, vec![MethodTag::Efficient, MethodTag::Whitened], FunctionalSpec::entry(0, 0), SamplingSpec::Uniform);
    print_summary("entry target d=200 r=5 n=60000, 500 reps", &s, secs);
    let checks = [(MethodTag::Efficient, 0.912, 0.972, 0.377), (MethodTag::Whitened, 0.910, 0.970, 0.481)];
    for (tag, lo, hi, ref_se) in checks {
        let m = s.get(tag).unwrap();
        let ratio = m.se_ratio.unwrap_or(f64::NAN);
        let se_dev = (m.median_se / ref_se - 1.0).abs();
        let ok = in_band(m.coverage, lo, hi) && se_dev <= 0.20 && in_band(ratio, 0.85, 1.2);
        l.record(
            &format!("5 ({} entry target)", tag.as_str()),
            ok,
            format!(
                "coverage {:.3} in [{lo}, {hi}]; median SE {:.4} vs {ref_se} ({:+.1}%, tol 20%); SE/SE* {:.3} in [0.85, 1.2] (SE* {:.4}); {} failures",
                m.coverage,
                m.median_se,
                100.0 * (m.median_se / ref_se - 1.0),
                ratio,
                m.oracle_se.unwrap_or(f64::NAN),
                m.failures
            ),
        );
    }
    if run9 {
        for tag in [MethodTag::Efficient, MethodTag::Whitened] {
            let m = s.get(tag).unwrap();
            l.record(&format!("9 ({} z-score KS)", tag.as_str()), m.ks_distance < 0.08, format!("KS {:.4} (< 0.08)", m.ks_distance));
        }
    }
}

fn criterion_6(l: &mut Ledger) {
    let target = FunctionalSpec::WinProb { a: 0, b: 1, category: 0 };
    let (s, secs) = study(200, 5, 80_000, REPS, vec![MethodTag::Efficient, MethodTag::Whitened], target, SamplingSpec::Uniform);
    print_summary("win-probability target d=200 r=5 n=80000, 500 reps", &s, secs);
    for (tag, lo, hi) in [(MethodTag::Efficient, 0.85, 0.96), (MethodTag::Whitened, 0.88, 0.97)] {
        let m = s.get(tag).unwrap();
        l.record(
            &format!("6 ({} win probability)", tag.as_str()),
            in_band(m.coverage, lo, hi),
            format!("coverage {:.3} in [{lo}, {hi}]; median SE {:.4}; {} failures", m.coverage, m.median_se, m.failures),
        );
    }
}

fn criterion_7(l: &mut Ledger) {
    let methods = vec![MethodTag::IpwKnown, MethodTag::IpwEstimated, MethodTag::EfficientNonuniform, MethodTag::Efficient];
    let (s, secs) = study(200, 5, 60_000, REPS, methods.clone(), FunctionalSpec::entry(0, 0), SamplingSpec::Dirichlet { concentration: 5.0 });
    print_summary("Dirichlet(5) sampling d=200 r=5 n=60000, 500 reps", &s, secs);
    let cov: HashMap<MethodTag, f64> = methods.iter().map(|&t| (t, s.get(t).unwrap().coverage)).collect();
    let all_in = cov.values().all(|&c| in_band(c, 0.90, 0.97));
    l.record(
        "7 (all variants coverage in [0.90, 0.97])",
        all_in,
        methods.iter().map(|t| format!("{} {:.3}", t.as_str(), cov[t])).collect::<Vec<_>>().join(", "),
    );
    let eff_se = s.get(MethodTag::EfficientNonuniform).unwrap().median_se;
    let ipw_se = s.get(MethodTag::IpwKnown).unwrap().median_se;
    l.record("7 (efficient median SE < IPW-whitened median SE)", eff_se < ipw_se, format!("{eff_se:.4} vs {ipw_se:.4}"));
    let d_ipw = (cov[&MethodTag::IpwKnown] - cov[&MethodTag::IpwEstimated]).abs();
    let d_eff = (cov[&MethodTag::EfficientNonuniform] - cov[&MethodTag::Efficient]).abs();
    l.record(
        "7 (known vs estimated sampling coverage gap < 0.005)",
        d_ipw < 0.005 && d_eff < 0.005,
        format!("IPW gap {d_ipw:.3}, efficient gap {d_eff:.3}"),
    );
}

fn criterion_8(l: &mut Ledger) {
    for n in [60_000, 100_000] {
        let start = Instant::now();
        let rows = refinement_study(200, 5, 5.0, n, 20, STUDY_SEED).unwrap();
        let med = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            0.5 * (v[9] + v[10])
        };
        let alt = med(rows.iter().map(|(a, _)| a.max_abs).collect());
        let refd = med(rows.iter().map(|(_, r)| r.max_abs).collect());
        l.record(
            &format!("8 (refinement linf, n={n}, 20 reps)"),
            refd <= alt,
            format!("median linf refined {refd:.4} vs AltMin {alt:.4}; {:.0}s", start.elapsed().as_secs_f64()),
        );
    }
}

fn criterion_10(l: &mut Ledger) {
    // Gated value: frame and operator both taken at T* = 0. The trend for the
    // frame of a generated truth is printed alongside for reference.
    let mut values = Vec::new();
    let mut generated = Vec::new();
    for d in [10, 20, 40] {
        let zero = ScoreMatrix::zeros(d, d, 1.0).unwrap();
        let op = InfoOperator::population(&zero, &SamplingModel::uniform(d, d).unwrap()).unwrap();
        let frame = truncate_rank(zero.entries(), 3).unwrap().frame;
        values.push(entrywise_inverse_diagnostic(&frame, &op).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(STUDY_SEED);
        let truth = gen_truth(d, d, 3, 5.0, &mut rng).unwrap();
        let gframe = truncate_rank(truth.entries(), 3).unwrap().frame;
        generated.push(entrywise_inverse_diagnostic(&gframe, &op).unwrap());
    }
    let spread = |v: &[f64]| v.iter().copied().fold(f64::MIN, f64::max) / v.iter().copied().fold(f64::MAX, f64::min);
    l.record(
        "10 (diagnostic at T*=0 across d in {10,20,40}, r=3)",
        spread(&values) < 2.0,
        format!(
            "{:.4} / {:.4} / {:.4}; max/min {:.3} (< 2). Generated-truth frame: {:.4} / {:.4} / {:.4}, max/min {:.3}",
            values[0],
            values[1],
            values[2],
            spread(&values),
            generated[0],
            generated[1],
            generated[2],
            spread(&generated)
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 11
// ---------------------------------------------------------------------------

const FIXTURE_MODELS: [&str; 12] = [
    "gemini-2.5-pro",
    "claude-opus-4",
    "gpt-4.1",
    "o3",
    "deepseek-r1",
    "grok-3",
    "qwen3-235b",
    "llama-4-maverick",
    "mistral-medium",
    "gemma-3-27b",
    "command-a",
    "kimi-k2",
];
const FIXTURE_TAGS: [&str; 5] = ["math", "coding", "creative_writing", "instruction_following", "hard_prompts"];

/// Battle log from a planted rank-2 model with ties, rare models and raw
/// tags that the category map merges.
fn fixture_records() -> Vec<BattleLogRecord> {
    let (d1, d2) = (FIXTURE_MODELS.len(), FIXTURE_TAGS.len());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let truth = gen_truth(d1, d2, 2, 2.0, &mut rng).unwrap();
    let battles: Vec<Battle> = SamplingModel::uniform(d1, d2).unwrap().sample_battles(&truth, 30_000, &mut rng).unwrap();
    let mut out: Vec<BattleLogRecord> = battles
        .iter()
        .enumerate()
        .map(|(i, b)| BattleLogRecord {
            model_a: FIXTURE_MODELS[b.atom.first()].into(),
            model_b: FIXTURE_MODELS[b.atom.second()].into(),
            category: FIXTURE_TAGS[b.atom.category()].into(),
            winner: match i % 23 {
                0 => Winner::Tie,
                11 => Winner::TieBothBad,
                _ if b.first_wins => Winner::ModelA,
                _ => Winner::ModelB,
            },
        })
        .collect();
    for i in 0..15 {
        out.push(BattleLogRecord {
            model_a: "rare-model".into(),
            model_b: FIXTURE_MODELS[i % d1].into(),
            category: "math".into(),
            winner: Winner::ModelA,
        });
    }
    out
}

fn fixture_category_map() -> HashMap<String, String> {
    FIXTURE_TAGS
        .iter()
        .map(|t| (t.to_string(), if *t == "hard_prompts" { "coding".to_string() } else { t.to_string() }))
        .collect()
}

fn criterion_11(l: &mut Ledger) {
    let dir = tempfile::TempDir::new().unwrap();
    let real = std::env::var_os("BTLINFER_ARENA_CSV");
    let (data, map_path, top_k, reps, expected) = match &real {
        Some(p) => {
            let reps = std::env::var("BTLINFER_ARENA_REPS").ok().and_then(|s| s.parse().ok()).unwrap_or(100);
            (p.into(), std::env::var_os("BTLINFER_ARENA_CATEGORY_MAP").map(Into::into), 30, reps, None)
        }
        None => {
            let recs = fixture_records();
            let data = dir.path().join("fixture.csv");
            ingest::write_records(&recs, &data).unwrap();
            let map = dir.path().join("categories.csv");
            let mut w = csv::Writer::from_path(&map).unwrap();
            w.write_record(["source", "target"]).unwrap();
            let mut pairs: Vec<_> = fixture_category_map().into_iter().collect();
            pairs.sort();
            for (s, t) in pairs {
                w.write_record([s, t]).unwrap();
            }
            w.flush().unwrap();
            let kept = recs
                .iter()
                .filter(|r| !r.winner.is_tie() && r.model_a != "rare-model" && r.model_b != "rare-model")
                .count();
            (data, Some(map), FIXTURE_MODELS.len(), 40, Some(kept))
        }
    };
    let data: std::path::PathBuf = data;
    let label = if real.is_some() { "arena log" } else { "synthetic fixture" };

    let mut cfg = Config::default();
    cfg.data.path = Some(data.clone());
    cfg.data.top_k = Some(top_k);
    cfg.data.category_map = map_path.clone();
    cfg.fit.rank = 3;
    let opts: IngestOptions = commands::ingest_options(&cfg).unwrap();
    assert_eq!(opts.tie_policy, TiePolicy::Drop);
    let records = ingest::read_records_path(&data).unwrap();
    let full = ingest::build_dataset(&records, &opts).unwrap();
    let count_ok = match expected {
        Some(k) => full.records == k,
        None => (full.records as f64 / 81_150.0 - 1.0).abs() <= 0.01,
    };
    l.record(
        &format!("11 ({label}: ingest count)"),
        count_ok,
        format!(
            "{} records, {} models x {} categories (expected {})",
            full.records,
            full.n_models(),
            full.n_categories(),
            expected.map_or("81150 +/- 1%".to_string(), |k| k.to_string())
        ),
    );

    let target = "entry:gemini-2.5-pro:math";
    let spec = commands::parse_named_target(target, &full.model_names, &full.category_names).unwrap();
    let cf = CrossFitConfig { folds: 6, seed: 0, fit: cfg.fit.fit_config().unwrap(), level: 0.95 };
    let est = commands::subsample_study(&records, &full, &opts, &spec, &[InferMethod::Efficient, InferMethod::Naive], 0.2, reps, &cf).unwrap();
    let (sd_eff, sd_naive) = (commands::sample_sd(&est[0]), commands::sample_sd(&est[1]));
    l.record(
        &format!("11 ({label}: efficient vs naive spread under 20% subsampling, {reps} reps)"),
        sd_eff < sd_naive,
        format!("empirical sd efficient {sd_eff:.4} vs naive {sd_naive:.4}"),
    );

    // Same inference through the binary and through the library.
    let model_path = dir.path().join("model.json");
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, cfg.echo().unwrap()).unwrap();
    let bin = env!("CARGO_BIN_EXE_btlinfer");
    let fit = Command::new(bin)
        .args(["--quiet", "--config", cfg_path.to_str().unwrap(), "fit", "--out", model_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    let report_path = dir.path().join("report.json");
    let infer = Command::new(bin)
        .args([
            "--quiet",
            "--config",
            cfg_path.to_str().unwrap(),
            "infer",
            "--model",
            model_path.to_str().unwrap(),
            "--target",
            target,
            "--out",
            report_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(infer.status.success(), "{}", String::from_utf8_lossy(&infer.stderr));
    let cli_bytes = std::fs::read_to_string(&report_path).unwrap();
    let lib: InferenceReport = commands::infer_command(&model_path, &data, target, "efficient", &cfg).unwrap();
    let lib_bytes = serde_json::to_string_pretty(&lib).unwrap() + "\n";
    l.record(
        &format!("11 ({label}: CLI report byte-identical to library)"),
        cli_bytes == lib_bytes,
        format!("estimate {:.6}, se {:.6}, {} bytes", lib.estimate, lib.se, lib_bytes.len()),
    );
}

fn main() {
    // Ignore libtest-style flags when run under `cargo test`.
    let only: Option<Vec<u32>> = std::env::var("BTLINFER_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let want = |k: u32| only.as_ref().is_none_or(|v| v.contains(&k));
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let fit_defaults = FitConfig::new(5);
    println!(
        "acceptance suite: study seed {STUDY_SEED}, K = 6, clip bound alpha+2, altmin rounds {}, c_pw(200,200) = {}",
        fit_defaults.altmin_rounds,
        pairwise_dimension(200, 200)
    );
    let mut l = Ledger { lines: Vec::new() };
    let steps: [Step; 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (10, criterion_10),
        (11, criterion_11),
    ];
    for (k, f) in steps {
        if k == 6 && (want(5) || want(9)) {
            criteria_5_and_9(&mut l, want(9));
        }
        if want(k) {
            f(&mut l);
        }
    }
    if !want(6) && (want(5) || want(9)) {
        criteria_5_and_9(&mut l, want(9));
    }
    let failed: Vec<&str> = l.lines.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.as_str()).collect();
    println!("\nacceptance: {} passed, {} failed", l.lines.len() - failed.len(), failed.len());
    for f in &failed {
        println!("  failed: {f}");
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
