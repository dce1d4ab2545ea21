use std::f64::consts::PI;
use std::sync::OnceLock;

use igabem::adaptivity::{refine, translate_marks, uniform_marking};
use igabem::estimators::IndicatorKind;
use igabem::experiments::{aitken_energy, builtin_problem, duality_energy, initial_space, read_csv, run, space_of_row, RunConfig, RunRecord};
use igabem::operators::{assemble_collocation, assemble_galerkin, assemble_rhs, single_layer_eval_fn, DiscreteSpace, Method, RhsEvaluator};
use igabem::quadrature::{QuadOrders, RuleSet};
use igabem::solve::{energy_norm_sq, solve_dense, DenseSystem};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn record_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("square_col");
    let cfg = RunConfig {
        problem: "square".into(),
        method: Method::Collocation,
        estimator: IndicatorKind::WeightedResidual,
        max_dofs: 30,
        out: Some(stem.clone()),
        cache_dir: Some(dir.path().to_path_buf()),
        ..RunConfig::default()
    };
    let rec = run(&cfg).unwrap();
    assert!(rec.rows.len() >= 3);
    let back = RunRecord::from_json(&std::fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap();
    assert_eq!(back, rec);
    let table = read_csv(std::fs::File::open(stem.with_extension("csv")).unwrap()).unwrap();
    assert_eq!(table.len(), rec.rows.len());
    for (t, r) in table.iter().zip(&rec.rows) {
        assert_eq!(t["N"] as usize, r.n_dofs);
        assert_eq!(t["eta"], r.eta);
        assert_eq!(t["mu"], r.mu);
    }
    let knots = std::fs::read_to_string(dir.path().join("square_col_knots.csv")).unwrap();
    assert_eq!(knots.lines().count(), rec.knot_histogram.len() + 1);
    // the sidecar energy is reused by a second run
    assert!(dir.path().join("square_p1_energy.json").exists());
}

#[test]
fn logged_slit_errors_are_reproducible() {
    let cfg = RunConfig {
        problem: "slit".into(),
        max_dofs: 60,
        ..RunConfig::default()
    };
    let rec = run(&cfg).unwrap();
    let prob = builtin_problem("slit").unwrap();
    let rhs = RhsEvaluator::new(prob.spec.clone());
    // a different quadrature order than the run itself
    let rules = RuleSet::new(QuadOrders::uniform(24));
    let e = PI / 4.0;
    for row in &rec.rows {
        let space = space_of_row(&prob.spec, rec.degree, row).unwrap();
        let a = assemble_galerkin(&space, &rules);
        let b = assemble_rhs(&space, &rhs, Method::Galerkin, &rules).unwrap();
        let c = &row.c_gal;
        let direct = e - 2.0 * dot(&b, c) + energy_norm_sq(&a, c);
        let pythagoras = e - energy_norm_sq(&a, c);
        let tol = 1e-12 * e + 1e-6 * row.err_sq;
        assert!((direct - row.err_sq).abs() <= tol, "N={}: {direct:e} vs {:e}", row.n_dofs, row.err_sq);
        assert!((pythagoras - row.err_sq).abs() <= tol, "N={}: {pythagoras:e} vs {:e}", row.n_dofs, row.err_sq);
    }
}

struct PacmanSystem {
    a: DMatrix<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

fn pacman_system() -> &'static PacmanSystem {
    static SYS: OnceLock<PacmanSystem> = OnceLock::new();
    SYS.get_or_init(|| {
        let prob = builtin_problem("pacman").unwrap();
        let s = initial_space(&prob.spec, Method::Galerkin).unwrap();
        let s = refine(&s, &uniform_marking(&s).unwrap()).unwrap().0;
        let rules = RuleSet::standard();
        let a = assemble_galerkin(&s, rules);
        let b = assemble_rhs(&s, &RhsEvaluator::new(prob.spec.clone()), Method::Galerkin, rules).unwrap();
        let c = solve_dense(&DenseSystem::new(a.clone(), b.clone()).unwrap()).unwrap();
        PacmanSystem { a, b, c }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    // |||phi - psi|||^2 - |||phi|||^2 = psi^T A psi - 2 b^T psi is minimal at the Galerkin solution
    #[test]
    fn galerkin_solution_is_the_best_approximation(delta in prop::collection::vec(-1.0f64..1.0, 64), scale in 1e-6f64..1.0) {
        let sys = pacman_system();
        prop_assume!(delta.len() >= sys.c.len());
        let psi: Vec<f64> = sys.c.iter().zip(&delta).map(|(c, d)| c + scale * d).collect();
        let at = |v: &[f64]| energy_norm_sq(&sys.a, v) - 2.0 * dot(&sys.b, v);
        let gap = at(&psi) - at(&sys.c);
        let d: Vec<f64> = psi.iter().zip(&sys.c).map(|(p, c)| p - c).collect();
        // the gap equals |||psi - phi_h|||^2 exactly
        let expected = energy_norm_sq(&sys.a, &d);
        prop_assert!(gap >= -1e-14);
        prop_assert!((gap - expected).abs() <= 1e-9 * expected + 1e-15);
    }
}

fn unit_density(space: &DiscreteSpace, l: usize) -> impl Fn(f64) -> f64 + '_ {
    move |t| {
        let mut c = vec![0.0; space.dim()];
        c[l] = 1.0;
        space.eval_density(&c, t)
    }
}

#[test]
fn collocation_matrix_matches_adaptive_quadrature() {
    let prob = builtin_problem("square").unwrap();
    let s = initial_space(&prob.spec, Method::Collocation).unwrap();
    let nodes = s.mesh().nodes();
    let m = translate_marks(&s, &[nodes[1], nodes[2], nodes[3]]).unwrap();
    let s = refine(&s, &m).unwrap().0;
    let b = assemble_collocation(&s, RuleSet::standard()).unwrap();
    let pts = s.collocation_points().unwrap();
    let curve = s.curve();
    for (j, p) in pts.iter().enumerate() {
        for l in 0..s.dim() {
            let (v, _) = single_layer_eval_fn(curve, &unit_density(&s, l), p.t, 1e-13);
            assert!((b[(j, l)] - v).abs() < 1e-9, "entry ({j}, {l}): {} vs {v}", b[(j, l)]);
        }
    }
}

// the two reference-energy routes agree
#[test]
fn aitken_energy_matches_duality() {
    for (name, levels, tol) in [("square", 6, 1e-4), ("pacman", 5, 1e-4)] {
        let prob = builtin_problem(name).unwrap();
        let dual = duality_energy(&prob.spec).unwrap();
        let (aitken, raw) = aitken_energy(&prob.spec, levels, RuleSet::standard()).unwrap();
        let last = *raw.last().unwrap();
        eprintln!("{name}: duality {dual:.12e}, aitken {aitken:.12e}, last raw {last:.12e}");
        assert!(last < dual, "{name}: Galerkin energy must stay below the exact one");
        assert!((aitken - dual).abs() <= tol * dual);
        assert!((aitken - dual).abs() < (last - dual).abs());
    }
}
