use cpkrylov::linops::{read_matrix_market, read_vector};
use cpkrylov::problems::{gen_random_system, write_bundle, SystemProps};
use cpkrylov::saddle::SaddleSystem;
use cpkrylov::solvers::{reg_cpkrylov, Method, SolverOptions};

#[test]
fn bundle_round_trips_and_solves_the_same() {
    let props = SystemProps { c_rank: 3, zero_b2: false, ..Default::default() };
    let (sys, g) = gen_random_system(18, 6, 8, props).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path(), &sys, Some(&g)).unwrap();

    let p = |f: &str| dir.path().join(f);
    let a = read_matrix_market(p("A.mtx")).unwrap();
    let b = read_matrix_market(p("B.mtx")).unwrap();
    let c = read_matrix_market(p("C.mtx")).unwrap();
    let g2 = read_matrix_market(p("G.mtx")).unwrap();
    assert!(a.is_symmetric() && c.is_symmetric());
    assert_eq!(&b, sys.b());
    assert_eq!(&c, sys.c());
    assert_eq!(g2, g);
    let back = SaddleSystem::from_matrices(a, b, c, read_vector(p("b1.mtx")).unwrap(), read_vector(p("b2.mtx")).unwrap()).unwrap();
    assert_eq!(back.b1(), sys.b1());
    assert_eq!(back.b2(), sys.b2());

    let opts = SolverOptions::default();
    let r1 = reg_cpkrylov(&sys, &g, Method::Minres, &opts).unwrap();
    let r2 = reg_cpkrylov(&back, &g2, Method::Minres, &opts).unwrap();
    assert_eq!(r1.iterations, r2.iterations);
    assert_eq!(r1.x, r2.x);
}
