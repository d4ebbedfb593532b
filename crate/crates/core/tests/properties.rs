//! Invariants of the fitting, inference and simulation layers.

use btlinfer::fitting::{fit_low_rank, FitConfig};
use btlinfer::geometry::{center_columns, truncate_rank, ScoreMatrix};
use btlinfer::inference::{
    efficiency_bound, pairwise_dimension, whitened_oracle_variance, CrossFit, CrossFitConfig, FunctionalSpec, InfoOperator,
    InfoSolver, Method, SolveRoute,
};
use btlinfer::model::{all_atoms, atom_inner, fisher_info, sigmoid, whitened_score, Battle, SamplingModel};
use btlinfer::simlab::{run_study, SimConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

fn random_truth(rng: &mut ChaCha8Rng, d1: usize, d2: usize, r: usize, scale: f64) -> ScoreMatrix {
    let m = center_columns(&(random(rng, d1, r) * random(rng, d2, r).transpose()));
    let m = &m * (scale / m.amax().max(1e-9));
    ScoreMatrix::new(m, scale + 1.0).unwrap()
}

fn random_design(rng: &mut ChaCha8Rng, d1: usize, d2: usize) -> SamplingModel {
    let cat: Vec<f64> = (0..d2).map(|_| 0.2 + rng.random::<f64>()).collect();
    let mdl: Vec<f64> = (0..d1).map(|_| 0.2 + rng.random::<f64>()).collect();
    let (sc, sm): (f64, f64) = (cat.iter().sum(), mdl.iter().sum());
    SamplingModel::product(cat.iter().map(|c| c / sc).collect(), mdl.iter().map(|m| m / sm).collect()).unwrap()
}

#[test]
fn information_residual_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let d1 = rng.random_range(3..=50);
        let d2 = rng.random_range(1..=50);
        let r = rng.random_range(1..=3usize).min(d2).min(d1 - 1);
        let truth = random_truth(&mut rng, d1, d2, r, 3.0);
        let frame = truncate_rank(&center_columns(&random(&mut rng, d1, d2)), r).unwrap().frame;
        let op = if case % 2 == 0 {
            InfoOperator::population(&truth, &SamplingModel::uniform(d1, d2).unwrap()).unwrap()
        } else {
            let s = random_design(&mut rng, d1, d2);
            let battles = s.sample_battles(&truth, 40 * d1 * d2, &mut rng).unwrap();
            InfoOperator::plugin(&battles, &truth, None).unwrap()
        };
        // Γ mixes a tangent component with an arbitrary one.
        let raw = random(&mut rng, d1, d2);
        let gamma = frame.project(&raw).unwrap() + raw * 0.5;
        let route = if case % 3 == 0 { SolveRoute::Iterative } else { SolveRoute::Dense };
        let sol = InfoSolver::new(&frame, &op, route).unwrap().solve(&gamma).unwrap();
        let pg = frame.project(&gamma).unwrap();
        let resid = (frame.project(&op.apply(&sol.direction).unwrap()).unwrap() - &pg).norm() / pg.norm();
        assert!(resid <= 1e-6, "case {case} ({d1}×{d2}, r={r}): residual {resid:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn l1_average_bound(d1 in 2usize..=6, d2 in 1usize..=4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random(&mut rng, d1, d2);
        let atoms: Vec<_> = all_atoms(d1, d2).collect();
        let mean = atoms.iter().map(|a| atom_inner(&v, a).unwrap().abs()).sum::<f64>() / atoms.len() as f64;
        let l1: f64 = v.iter().map(|x| x.abs()).sum();
        prop_assert!(mean <= l1 / pairwise_dimension(d1, d2) + 1e-12);
    }

    #[test]
    fn efficiency_ordering(d1 in 3usize..=5, d2 in 1usize..=3, seed in any::<u64>(), skewed in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_truth(&mut rng, d1, d2, 1, 2.0);
        let frame = truncate_rank(truth.entries(), 1).unwrap().frame;
        let s = if skewed { random_design(&mut rng, d1, d2) } else { SamplingModel::uniform(d1, d2).unwrap() };
        let op = InfoOperator::population(&truth, &s).unwrap();
        let gamma = random(&mut rng, d1, d2);
        let veff = efficiency_bound(&frame, &op, &gamma).unwrap();
        // Off the uniform design only the importance-weighted variant is unbiased.
        let vws = whitened_oracle_variance(&frame, &truth, &s, &gamma, skewed).unwrap();
        prop_assert!(vws >= veff - 1e-10 * veff.max(1.0), "V_ws {vws} < V_eff {veff}");
    }

    #[test]
    fn whitened_influence_is_centered(d1 in 3usize..=5, d2 in 1usize..=3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_truth(&mut rng, d1, d2, 1, 2.0);
        let frame = truncate_rank(truth.entries(), 1).unwrap().frame;
        let h = frame.project(&random(&mut rng, d1, d2)).unwrap() * pairwise_dimension(d1, d2);
        let mut mean = 0.0;
        let n_atoms = all_atoms(d1, d2).count() as f64;
        for a in all_atoms(d1, d2) {
            let eta = atom_inner(truth.entries(), &a).unwrap();
            let p1 = sigmoid(eta).unwrap();
            let x = atom_inner(&h, &a).unwrap();
            mean += (p1 * whitened_score(true, eta).unwrap() + (1.0 - p1) * whitened_score(false, eta).unwrap()) * x / n_atoms;
        }
        prop_assert!(mean.abs() <= 1e-12);
    }

    #[test]
    fn fisher_info_peaks_at_zero(eta in -30.0f64..30.0) {
        prop_assert!(fisher_info(eta) <= 0.25);
        if eta != 0.0 {
            prop_assert!(fisher_info(eta) < 0.25);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fit_is_centered_bounded_and_deterministic(d1 in 4usize..=8, d2 in 2usize..=5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_truth(&mut rng, d1, d2, 1, 1.5);
        let battles = SamplingModel::uniform(d1, d2).unwrap().sample_battles(&truth, 300 * d1 * d2, &mut rng).unwrap();
        let mut cfg = FitConfig::new(1);
        cfg.clip_bound = 3.0;
        let a = fit_low_rank(&battles, d1, d2, &cfg).unwrap();
        let b = fit_low_rank(&battles, d1, d2, &cfg).unwrap();
        prop_assert_eq!(a.estimate.entries(), b.estimate.entries());
        let t = a.estimate.entries();
        prop_assert!(t.amax() <= cfg.clip_bound + 1e-8);
        for c in t.column_iter() {
            prop_assert!(c.sum().abs() <= 1e-8 * d1 as f64);
        }
    }
}

#[test]
fn cross_fit_is_deterministic_and_ci_brackets_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (d1, d2) = (8, 4);
    let truth = random_truth(&mut rng, d1, d2, 1, 1.5);
    let battles: Vec<Battle> = SamplingModel::uniform(d1, d2).unwrap().sample_battles(&truth, 6000, &mut rng).unwrap();
    let mut fit = FitConfig::new(1);
    fit.clip_bound = 3.5;
    let cfg = CrossFitConfig { seed: 9, ..CrossFitConfig::new(fit) };
    let spec = FunctionalSpec::WinProb { a: 0, b: 1, category: 2 };
    for method in [Method::Efficient, Method::Whitened] {
        let r1 = CrossFit::new(&battles, d1, d2, &cfg).unwrap().one_step(&battles, &spec, &method, 0.95).unwrap();
        let r2 = CrossFit::new(&battles, d1, d2, &cfg).unwrap().one_step(&battles, &spec, &method, 0.95).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.variance >= 0.0);
        assert!(r1.ci_low <= r1.estimate && r1.estimate <= r1.ci_high);
    }
}

#[test]
fn study_is_seed_deterministic_and_coverage_monotone_in_level() {
    let mut cfg = SimConfig::new(8, 1, 1.5, 3000, 12);
    cfg.d2 = 4;
    cfg.seed = 77;
    let a = run_study(&cfg).unwrap();
    let b = run_study(&cfg).unwrap();
    assert_eq!(a.records(), b.records());
    let lo = a.summary_at_level(0.90).unwrap();
    let hi = a.summary_at_level(0.99).unwrap();
    for (l, h) in lo.methods.iter().zip(&hi.methods) {
        assert!(h.coverage >= l.coverage);
        assert_eq!(l.z_scores.len(), l.replications);
        assert_eq!(l.replications + l.failures, 12);
    }
}
