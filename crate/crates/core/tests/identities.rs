//! Exact identities on small random instances (d₁ ≤ 6, d₂ ≤ 4, r ≤ 2).

use btlinfer::geometry::{center_columns, truncate_rank, ScoreMatrix, TangentCoords, TangentFrame};
use btlinfer::inference::{build_k, InfoOperator};
use btlinfer::model::{all_atoms, atom_inner, Battle, SamplingModel};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

fn random_frame(rng: &mut ChaCha8Rng, d1: usize, d2: usize, r: usize) -> TangentFrame {
    let m = center_columns(&(random(rng, d1, r) * random(rng, d2, r).transpose()));
    truncate_rank(&m, r).unwrap().frame
}

fn dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// (d₁, d₂, r, seed) with d₁ ∈ [3,6], d₂ ∈ [1,4] and r ≤ min(2, d₂, d₁−1).
fn instance() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (3usize..=6, 1usize..=4, 1usize..=2, any::<u64>()).prop_map(|(d1, d2, r, s)| (d1, d2, r.min(d2), s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn frobenius_reduction((d1, d2, _r, seed) in instance()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = center_columns(&random(&mut rng, d1, d2));
        let atoms: Vec<_> = all_atoms(d1, d2).collect();
        let mean = atoms.iter().map(|a| atom_inner(&h, a).unwrap().powi(2)).sum::<f64>() / atoms.len() as f64;
        let expected = 2.0 * h.norm_squared() / (d2 as f64 * (d1 as f64 - 1.0));
        prop_assert!((mean - expected).abs() <= 1e-12 * expected.max(1.0));
    }

    #[test]
    fn pairwise_difference((d1, _d2, _r, seed) in instance()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DVector::from_fn(d1, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let z = z.add_scalar(-z.mean());
        let mut total = 0.0;
        let mut pairs = 0usize;
        for u in 0..d1 {
            for v in u + 1..d1 {
                total += (z[u] - z[v]).powi(2);
                pairs += 1;
            }
        }
        let expected = 2.0 * z.norm_squared() / (d1 as f64 - 1.0);
        prop_assert!((total / pairs as f64 - expected).abs() <= 1e-12 * expected.max(1.0));
    }

    #[test]
    fn pairwise_gram((d1, _d2, r, seed) in instance()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = center_columns(&random(&mut rng, d1, r));
        let mut acc = DMatrix::zeros(r, r);
        for u in 0..d1 {
            for v in u + 1..d1 {
                let diff = (theta.row(u) - theta.row(v)).transpose();
                acc += &diff * diff.transpose();
            }
        }
        let expected = theta.transpose() * &theta * d1 as f64;
        prop_assert!((acc - expected).amax() <= 1e-10);
    }

    #[test]
    fn projector_identities((d1, d2, r, seed) in instance()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_frame(&mut rng, d1, d2, r);
        let h1 = random(&mut rng, d1, d2);
        let h2 = random(&mut rng, d1, d2);
        let p1 = f.project(&h1).unwrap();
        let p2 = f.project(&h2).unwrap();
        prop_assert!((f.project(&p1).unwrap() - &p1).amax() <= 1e-10);
        prop_assert!((dot(&p1, &h2) - dot(&h1, &p2)).abs() <= 1e-10);
        for c in p1.column_iter() {
            prop_assert!(c.sum().abs() <= 1e-10);
        }
    }

    #[test]
    fn k_matches_operator_route((d1, d2, r, seed) in instance(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_frame(&mut rng, d1, d2, r);
        let truth = ScoreMatrix::new(center_columns(&random(&mut rng, d1, d2)), 2.0).unwrap();
        let sampling = SamplingModel::uniform(d1, d2).unwrap();
        let battles: Vec<Battle> = sampling.sample_battles(&truth, n, &mut rng).unwrap();
        let op = InfoOperator::plugin(&battles, &truth, None).unwrap();
        let k = build_k(&f, &op).unwrap();
        let theta = DVector::from_fn(k.nrows(), |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let coords = TangentCoords::from_vector(&theta, d1, d2, r).unwrap();
        let h = f.coords_to_matrix(&coords).unwrap();
        let route = f.matrix_to_coords(&op.apply(&h).unwrap()).unwrap().to_vector();
        prop_assert!((&k * &theta - route).amax() <= 1e-10);
    }

    #[test]
    fn coordinate_maps_are_adjoint((d1, d2, r, seed) in instance()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_frame(&mut rng, d1, d2, r);
        let coords = TangentCoords { a: random(&mut rng, d2, r), c: random(&mut rng, d1 - 1, r) };
        let h = random(&mut rng, d1, d2);
        let lhs = dot(&f.coords_to_matrix(&coords).unwrap(), &h);
        let back = f.matrix_to_coords(&h).unwrap();
        let rhs = dot(&coords.a, &back.a) + dot(&coords.c, &back.c);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }
}
