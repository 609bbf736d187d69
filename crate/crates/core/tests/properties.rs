use koopstab::consistency::{membership, random_gamma, sample_consistent, ConsistencySet, Dataset};
use koopstab::edmd::identify;
use koopstab::lifting::{pendulum_dictionary, Dictionary, DictionarySpec, Factor};
use koopstab::linalg::{max_eig, min_eig, pinv, psd_sqrt, rank, spectral_norm, sym_eig, SymMatrix};
use koopstab::lmi::{
    certify, solve_feasibility, BlockBuilder, FeasibilityStatus, LinExpr, SolverOptions,
    VariableSpec,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-3.0..3.0f64, rows * cols)
        .prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

fn square() -> impl Strategy<Value = DMatrix<f64>> {
    (1usize..6).prop_flat_map(|n| matrix(n, n))
}

fn rect() -> impl Strategy<Value = DMatrix<f64>> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| matrix(r, c))
}

/// Random matrix shifted so every eigenvalue has real part ≤ −0.5.
fn hurwitz() -> impl Strategy<Value = DMatrix<f64>> {
    (1usize..5).prop_flat_map(|n| matrix(n, n)).prop_map(|m| {
        let n = m.nrows();
        let sym = SymMatrix::symmetrize(&m + m.transpose());
        // the numerical abscissa bounds the spectral abscissa
        let shift = 0.5 * max_eig(&sym) + 0.5;
        m - DMatrix::identity(n, n) * shift
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eigendecomposition_reconstructs(m in square()) {
        let s = SymMatrix::symmetrize(&m + m.transpose());
        let e = sym_eig(&s).unwrap();
        let back = e.map(|l| l);
        let scale = 1.0 + s.as_matrix().norm();
        prop_assert!((back.as_matrix() - s.as_matrix()).abs().max() < 1e-12 * scale);
        prop_assert!(e.min() <= e.max());
        prop_assert!((min_eig(&s) - e.min()).abs() < 1e-10 * scale);
    }

    #[test]
    fn pseudoinverse_satisfies_penrose(m in rect()) {
        let p = pinv(&m, 1e-10);
        let scale = 1.0 + m.norm() * m.norm();
        prop_assert!((&m * &p * &m - &m).abs().max() < 1e-9 * scale);
        prop_assert!((&p * &m * &p - &p).abs().max() < 1e-9 * (1.0 + p.norm() * p.norm() * m.norm()));
        let mp = &m * &p;
        let pm = &p * &m;
        prop_assert!((&mp - mp.transpose()).abs().max() < 1e-9);
        prop_assert!((&pm - pm.transpose()).abs().max() < 1e-9);
        prop_assert!(rank(&m, 1e-10) <= m.nrows().min(m.ncols()));
    }

    #[test]
    fn psd_root_squares_back(m in rect()) {
        let s = SymMatrix::symmetrize(&m * m.transpose());
        let r = psd_sqrt(&s, 1e-12).unwrap();
        let scale = 1.0 + s.as_matrix().norm();
        prop_assert!((r.square().as_matrix() - s.as_matrix()).abs().max() < 1e-9 * scale);
        prop_assert!(min_eig(&r) >= -1e-9 * scale.sqrt());
        let again = psd_sqrt(&r.square(), 1e-12).unwrap();
        prop_assert!((again.as_matrix() - r.as_matrix()).abs().max() < 1e-7 * scale.sqrt());
    }

    #[test]
    fn spectral_norm_bounds_entries(m in rect()) {
        let s = spectral_norm(&m);
        prop_assert!(s <= m.norm() + 1e-12);
        prop_assert!(m.abs().max() <= s + 1e-12);
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences(
        x in proptest::collection::vec(-2.0..2.0f64, 2),
        k in 1u32..4,
    ) {
        let x = DVector::from_vec(x);
        let extra = vec![
            vec![Factor::Pow { var: 0, exp: k }],
            vec![Factor::Sin { var: 1 }, Factor::Cos { var: 0 }],
            vec![Factor::Pow { var: 1, exp: 2 }, Factor::Sin { var: 0 }],
        ];
        let spec = DictionarySpec::MonomialTrig { n: 2, extra: extra.clone() };
        let dicts = [
            pendulum_dictionary::<f64>(),
            Dictionary::monomial_trig("mt", 2, extra, spec).unwrap(),
        ];
        for d in &dicts {
            let j = d.jacobian(&x);
            let fd = d.fd_jacobian(&x);
            prop_assert!((&j - &fd).abs().max() < 1e-5 * (1.0 + j.abs().max()), "{}", d.name());
            prop_assert!((d.recover(&d.lift(&x)) - &x).norm() < 1e-14);
        }
    }

    #[test]
    fn consistency_samples_are_members(seed in 0u64..1000, boundary in any::<bool>()) {
        let (ds, _) = bilinear(40, seed, 1e-2);
        let cs = ConsistencySet::build(&ds).unwrap();
        prop_assert!(!cs.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
        let g = random_gamma::<f64, _>(&mut rng, cs.zeta.nrows(), cs.zeta.ncols(), boundary);
        let z = sample_consistent(&cs, &g).unwrap();
        prop_assert!(membership(&z, &cs, cs.default_tol()).unwrap());
        prop_assert!(membership(&cs.zeta, &cs, cs.default_tol()).unwrap());
    }

    #[test]
    fn true_system_is_consistent_with_its_data(seed in 0u64..1000) {
        let (ds, truth) = bilinear(40, seed, 1e-2);
        let cs = ConsistencySet::build(&ds).unwrap();
        prop_assert!(membership(&truth, &cs, cs.default_tol()).unwrap());
    }

    #[test]
    fn identification_is_exact_without_noise(seed in 0u64..1000) {
        let (ds, truth) = bilinear(30, seed, 0.0);
        let model = identify(&ds).unwrap();
        let (a, b0, bs) = ConsistencySet::<f64>::build(&ds).unwrap().unstack(&truth);
        prop_assert!((&model.a - a).abs().max() < 1e-9);
        prop_assert!((&model.b0 - b0).abs().max() < 1e-9);
        prop_assert!((&model.b[0] - &bs[0]).abs().max() < 1e-9);
    }

    #[test]
    fn consistency_set_is_scale_covariant(seed in 0u64..200, s in 0.1..10.0f64) {
        // scaling Z₁ and Δ by s scales 𝐐 by s² and leaves ζ/s invariant
        let (ds, _) = bilinear(40, seed, 1e-2);
        let scaled = Dataset::from_lifted(
            ds.z0.clone(),
            ds.u0.clone(),
            &ds.z1 * s,
            &ds.delta * s,
            "synthetic",
        ).unwrap();
        let c1 = ConsistencySet::build(&ds).unwrap();
        let c2 = ConsistencySet::build(&scaled).unwrap();
        prop_assert!((&c2.zeta - &c1.zeta * s).abs().max() < 1e-9 * s * (1.0 + c1.zeta.abs().max()));
        let q1 = c1.q.unwrap().into_inner() * (s * s);
        let q2 = c2.q.unwrap().into_inner();
        prop_assert!((q2 - &q1).abs().max() < 1e-8 * (1.0 + q1.abs().max()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stable_matrices_admit_lyapunov_certificates(a in hurwitz()) {
        let n = a.nrows();
        let vars = vec![VariableSpec::symmetric("P", n).min_eig(1e-6).max_eig(1.0)];
        let mut b = BlockBuilder::new("lyap", vec![n]);
        b.set(0, 0, LinExpr::var("P").lmul(&a.transpose()).sym());
        let c = b.build(&vars, true).unwrap();
        let r = solve_feasibility(&vars, std::slice::from_ref(&c), 1e-9, &SolverOptions::default()).unwrap();
        prop_assert_eq!(r.status, FeasibilityStatus::Feasible);
        let rep = certify(&vars, &r.assignment, &[c], 1e-9).unwrap();
        prop_assert!(rep.all_pass, "{:?}", rep.checks);
        let p = &r.assignment["P"];
        let q = SymMatrix::symmetrize(a.transpose() * p + p * &a);
        prop_assert!(max_eig(&q) < 0.0);
    }

    #[test]
    fn unstable_matrices_admit_none(a in hurwitz()) {
        let n = a.nrows();
        let a = -a;
        let vars = vec![VariableSpec::symmetric("P", n).min_eig(1e-6).max_eig(1.0)];
        let mut b = BlockBuilder::new("lyap", vec![n]);
        b.set(0, 0, LinExpr::var("P").lmul(&a.transpose()).sym());
        let c = b.build(&vars, true).unwrap();
        let r = solve_feasibility(&vars, &[c], 1e-9, &SolverOptions::default()).unwrap();
        prop_assert_ne!(r.status, FeasibilityStatus::Feasible);
    }

    #[test]
    fn single_precision_agrees_with_double(m in rect()) {
        let s = SymMatrix::symmetrize(&m * m.transpose());
        let s32 = SymMatrix::symmetrize(s.as_matrix().map(|v| v as f32));
        let e64 = max_eig(&s);
        let e32 = max_eig(&s32) as f64;
        prop_assert!((e64 - e32).abs() < 1e-4 * (1.0 + e64));
    }
}

/// Lifted data from `ż = Az + B₀u + uB₁z + d` with `‖d‖² ≤ δ` per sample.
fn bilinear(t: usize, seed: u64, delta: f64) -> (Dataset<f64>, DMatrix<f64>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let a = draw(2, 2);
    let b0 = draw(2, 1);
    let b1 = draw(2, 2);
    let z0 = draw(2, t);
    let u0 = draw(1, t);
    let noise = draw(2, t);
    let mut z1 = &a * &z0 + &b0 * &u0;
    for j in 0..t {
        let mut col = &b1 * z0.column(j) * u0[(0, j)];
        let d = noise.column(j);
        let n = d.norm();
        if n > 0.0 {
            col += d * (delta.sqrt() / n);
        }
        let sum = z1.column(j) + col;
        z1.set_column(j, &sum);
    }
    let big_delta = DMatrix::identity(2, 2) * (t as f64 * delta).sqrt();
    let ds = Dataset::from_lifted(z0, u0, z1, big_delta, "synthetic").unwrap();
    let truth = ConsistencySet::<f64>::stack(&a, &b0, &[b1]);
    (ds, truth)
}
