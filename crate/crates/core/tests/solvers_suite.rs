mod common;

use common::suite;
use cpkrylov::problems::{gen_random_system, toy_instances, toy_ip_solve, Formulation, SystemProps};
use cpkrylov::saddle::{ConstraintPreconditioner, PreconditionerOptions};
use cpkrylov::solvers::{reg_cpkrylov, solve, Method, SolverOptions, Status};

#[test]
fn recorded_iterates_follow_the_iteration_count() {
    for inst in suite().iter().take(6) {
        let opts = SolverOptions { record_iterates: true, ..Default::default() };
        for method in [Method::Minres, Method::Gmres] {
            if method.needs_symmetric() && !inst.props.a_symmetric {
                continue;
            }
            let r = reg_cpkrylov(&inst.sys, &inst.g, method, &opts).unwrap();
            assert_eq!(r.iterates.len(), r.iterations + 1, "{} {method}", inst.name);
            assert_eq!(r.history.len(), r.iterations + 1, "{} {method}", inst.name);
            let (x, y) = r.iterates.last().unwrap();
            assert_eq!((x, y), (&r.x, &r.y));
        }
    }
}

#[test]
fn iteration_limit_is_reported() {
    let inst = &suite()[4];
    let opts = SolverOptions { maxit: Some(2), atol: 0.0, rtol: 1e-14, ..Default::default() };
    for method in [Method::Cg, Method::Minres, Method::Symmlq, Method::Gmres, Method::Dqgmres] {
        let r = reg_cpkrylov(&inst.sys, &inst.g, method, &opts).unwrap();
        assert_eq!(r.status, Status::MaxIterations, "{method}");
        assert_eq!(r.iterations, 2, "{method}");
    }
}

#[test]
fn violated_assumption_is_never_reported_as_converged_silently() {
    let props = SystemProps { c_rank: 2, assumption_ok: false, ..Default::default() };
    let (sys, g) = gen_random_system(16, 5, 21, props).unwrap();
    let strict = PreconditionerOptions { strict_assumption: true, ..Default::default() };
    assert!(ConstraintPreconditioner::for_system(&sys, &g, strict).is_err());

    let opts = SolverOptions { atol: 0.0, rtol: 1e-10, ..Default::default() };
    for method in [Method::Cg, Method::Minres, Method::Symmlq] {
        match reg_cpkrylov(&sys, &g, method, &opts) {
            Ok(r) => {
                if r.converged() {
                    assert!(r.final_residual < 1e-6, "{method}: {:.2e}", r.final_residual);
                }
            }
            Err(e) => assert!(e.to_string().contains("indefinite"), "{method}: {e}"),
        }
    }
}

#[test]
fn nonsymmetric_a_needs_an_arnoldi_method() {
    let inst = suite().into_iter().find(|i| !i.props.a_symmetric).unwrap();
    let mut pc = ConstraintPreconditioner::for_system(&inst.sys, &inst.g, Default::default()).unwrap();
    let z = (vec![0.0; inst.n()], vec![0.0; inst.m()]);
    assert!(solve(&inst.sys, &mut pc, Method::Minres, &z.0, &z.1, &SolverOptions::default()).is_err());
    let r = solve(&inst.sys, &mut pc, Method::Gmres, &z.0, &z.1, &SolverOptions::default()).unwrap();
    assert!(r.converged());
}

#[test]
fn k3p_runs_end_cleanly() {
    let qps = toy_instances(3, 3).unwrap();
    for (name, qp) in &qps {
        let rep = toy_ip_solve(qp, Formulation::K3p, Method::Gmres, &SolverOptions::default()).unwrap();
        assert!(rep.converged || rep.failure.is_some() || rep.outer_it == cpkrylov::problems::MAX_OUTER, "{name}");
        assert_eq!(rep.mu.len(), rep.eps_a.len());
    }
}
