use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cpkrylov::linops::{read_matrix_market, read_vector, write_vector, MatrixStorage};
use cpkrylov::oracle::{decompose_c, k_matrix, preconditioned_spectrum};
use cpkrylov::problems::{
    counterexample_system, formulate, gen_random_system, toy_instances, toy_ip_solve, write_bundle, Formulation,
    IPState, SystemProps, ToyQP,
};
use cpkrylov::saddle::{ConstraintPreconditioner, SaddleSystem};
use cpkrylov::solvers::{reg_cpkrylov_with, Method, SolverOptions, Status};

#[derive(Parser, Debug)]
#[command(name = "cpkrylov", version, about = "Constraint-preconditioned Krylov solvers for regularized saddle-point systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve [A Bᵀ; B −C][x; y] = [b1; b2] read from Matrix Market files.
    Solve(SolveArgs),
    /// Write a generated system as a Matrix Market bundle.
    Gen(GenArgs),
    /// Eigenvalues of P⁻¹K as CSV.
    Spectrum(SpectrumArgs),
    /// Toy interior-point runs over seeded QPs.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
struct SystemFiles {
    #[arg(long = "A", value_name = "PATH")]
    a: PathBuf,
    #[arg(long = "B", value_name = "PATH")]
    b: PathBuf,
    #[arg(long = "C", value_name = "PATH")]
    c: PathBuf,
    /// Leading block of the preconditioner; diag(A) when absent.
    #[arg(long = "G", value_name = "PATH")]
    g: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct SolverFlags {
    #[arg(long, default_value_t = 1e-8)]
    atol: f64,
    #[arg(long, default_value_t = 1e-6)]
    rtol: f64,
    /// Iteration limit; 2 (n + m) when absent.
    #[arg(long)]
    maxit: Option<usize>,
    /// DQGMRES window.
    #[arg(long, default_value_t = 2)]
    mem: usize,
    /// GMRES cycle length.
    #[arg(long, default_value_t = 20)]
    restart: usize,
    #[arg(long)]
    semi_refine: bool,
    /// Fail when neg(P) + neg(C) ≠ m instead of warning.
    #[arg(long)]
    strict_assumption: bool,
    #[arg(long, default_value_t = 1e-10)]
    refine_tol: f64,
    #[arg(long, default_value_t = 2)]
    refine_max: usize,
}

impl SolverFlags {
    fn options(&self) -> SolverOptions {
        SolverOptions {
            atol: self.atol,
            rtol: self.rtol,
            maxit: self.maxit,
            mem: self.mem,
            restart: self.restart,
            semi_refine: self.semi_refine,
            strict_assumption: self.strict_assumption,
            refine_tol: self.refine_tol,
            refine_max: self.refine_max,
            record_iterates: false,
        }
    }

    fn manifest(&self) -> String {
        let maxit = self.maxit.map_or("auto".to_string(), |k| k.to_string());
        format!(
            "atol={:e} rtol={:e} maxit={maxit} mem={} restart={} semi_refine={} strict_assumption={} refine_tol={:e} refine_max={}",
            self.atol, self.rtol, self.mem, self.restart, self.semi_refine, self.strict_assumption, self.refine_tol, self.refine_max
        )
    }
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    files: SystemFiles,
    #[arg(long, value_name = "PATH")]
    b1: PathBuf,
    /// Zero when absent.
    #[arg(long, value_name = "PATH")]
    b2: Option<PathBuf>,
    #[arg(long, default_value = "minres")]
    method: Method,
    #[command(flatten)]
    solver: SolverFlags,
    /// Output directory for x.mtx, y.mtx and history.csv.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Random,
    Counterexample,
    /// Newton system of a toy QP at its starting point.
    Toy,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum FormArg {
    K2,
    K35,
    K3p,
}

impl From<FormArg> for Formulation {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::K2 => Formulation::K2,
            FormArg::K35 => Formulation::K35,
            FormArg::K3p => Formulation::K3p,
        }
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "random")]
    kind: Kind,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    m: usize,
    /// Rank of C.
    #[arg(long, default_value_t = 0)]
    p: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Make C indefinite.
    #[arg(long)]
    c_indefinite: bool,
    #[arg(long)]
    nonsymmetric: bool,
    /// Generate a G for which neg(P) + neg(C) ≠ m.
    #[arg(long)]
    violate_assumption: bool,
    /// Draw a nonzero b2.
    #[arg(long)]
    nonzero_b2: bool,
    /// Formulation for --kind toy.
    #[arg(long, value_enum, default_value = "k2")]
    formulation: FormArg,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SpectrumArgs {
    #[command(flatten)]
    files: SystemFiles,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of QPs.
    #[arg(long, default_value_t = 5)]
    count: usize,
    #[arg(long, value_delimiter = ',', default_value = "cg,minres,gmres")]
    methods: Vec<Method>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "k2,k35,k3p")]
    formulations: Vec<FormArg>,
    #[command(flatten)]
    solver: SolverFlags,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(cpkrylov::Error),
}

impl From<cpkrylov::Error> for Failure {
    fn from(e: cpkrylov::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn exit_code(status: Status) -> u8 {
    match status {
        Status::Converged => 0,
        Status::MaxIterations => 2,
        Status::Breakdown | Status::IndefiniteDetected => 3,
    }
}

/// Square matrices stored as general but numerically symmetric are retagged.
fn retag(m: MatrixStorage) -> cpkrylov::Result<MatrixStorage> {
    if m.is_symmetric() || m.nrows() != m.ncols() {
        return Ok(m);
    }
    let d = m.to_dense();
    if d == d.transpose() {
        MatrixStorage::dense_symmetric(d)
    } else {
        Ok(m)
    }
}

fn load(path: &Path) -> cpkrylov::Result<MatrixStorage> {
    retag(read_matrix_market(path)?)
}

fn load_system(files: &SystemFiles, b1: Option<&Path>, b2: Option<&Path>) -> Result<(SaddleSystem, MatrixStorage), Failure> {
    let a = load(&files.a)?;
    let b = load(&files.b)?;
    let c = load(&files.c)?;
    let g = match &files.g {
        Some(p) => load(p)?,
        None => MatrixStorage::diagonal(&a.diag()),
    };
    let b1 = match b1 {
        Some(p) => read_vector(p)?,
        None => vec![0.0; a.nrows()],
    };
    let b2 = match b2 {
        Some(p) => read_vector(p)?,
        None => vec![0.0; b.nrows()],
    };
    Ok((SaddleSystem::from_matrices(a, b, c, b1, b2)?, g))
}

fn cmd_solve(args: &SolveArgs) -> Result<u8, Failure> {
    let opts = args.solver.options();
    opts.validate()?;
    let (sys, g) = load_system(&args.files, Some(&args.b1), args.b2.as_deref())?;
    let mut pc = ConstraintPreconditioner::for_system(&sys, &g, opts.preconditioner_options())?;
    let res = reg_cpkrylov_with(&sys, &mut pc, args.method, &opts)?;

    fs::create_dir_all(&args.out)?;
    write_vector(args.out.join("x.mtx"), &res.x)?;
    write_vector(args.out.join("y.mtx"), &res.y)?;
    let mut csv = format!("# cpkrylov solve n={} m={} method={} {}\n", sys.n(), sys.m(), args.method, args.solver.manifest());
    csv.push_str("iter,seminorm_residual,is_estimate\n");
    for (k, (h, e)) in res.history.iter().zip(&res.estimate).enumerate() {
        let _ = writeln!(csv, "{k},{h:e},{}", u8::from(*e));
    }
    fs::write(args.out.join("history.csv"), csv)?;
    println!(
        "{} after {} iterations, relative residual {:.3e}",
        res.status, res.iterations, res.final_residual
    );
    Ok(exit_code(res.status))
}

fn cmd_gen(args: &GenArgs) -> Result<u8, Failure> {
    match args.kind {
        Kind::Counterexample => {
            let sys = counterexample_system();
            let g = MatrixStorage::diagonal(&cpkrylov::problems::dense_a(&sys)?.diag());
            write_bundle(&args.out, &sys, Some(&g))?;
        }
        Kind::Random => {
            let props = SystemProps {
                c_rank: args.p,
                c_psd: !args.c_indefinite,
                a_symmetric: !args.nonsymmetric,
                assumption_ok: !args.violate_assumption,
                zero_b2: !args.nonzero_b2,
            };
            let (sys, g) = gen_random_system(args.n, args.m, args.seed, props)?;
            write_bundle(&args.out, &sys, Some(&g))?;
        }
        Kind::Toy => {
            let qp = ToyQP::random(args.n, args.m, args.seed)?;
            let st = IPState::initial(&qp);
            let f = formulate(&qp, &st, args.formulation.into())?;
            write_bundle(&args.out, &f.sys, Some(&f.g))?;
        }
    }
    println!("wrote bundle to {}", args.out.display());
    Ok(0)
}

fn cmd_spectrum(args: &SpectrumArgs) -> Result<u8, Failure> {
    let (sys, g) = load_system(&args.files, None, None)?;
    let pc = ConstraintPreconditioner::for_system(&sys, &g, Default::default())?;
    let k = k_matrix(&sys)?;
    let s = preconditioned_spectrum(pc.matrix(), &k, sys.n())?;
    let p = decompose_c(sys.c())?.rank();
    let required = (2 * sys.m()).saturating_sub(p);

    let mut csv = format!("# cpkrylov spectrum n={} m={} p={p}\n", sys.n(), sys.m());
    let _ = writeln!(csv, "# near_one={} two_m_minus_p={required} max_imag={:e}", s.near_one, s.max_imag);
    csv.push_str("index,re,im\n");
    for (i, z) in s.eigenvalues.iter().enumerate() {
        let _ = writeln!(csv, "{i},{:e},{:e}", z.re, z.im);
    }
    fs::write(&args.out, csv)?;
    println!("{} eigenvalues near 1 (2m - p = {required}), max imaginary part {:.3e}", s.near_one, s.max_imag);
    Ok(0)
}

fn cmd_bench(args: &BenchArgs) -> Result<u8, Failure> {
    let opts = args.solver.options();
    opts.validate()?;
    if args.count == 0 || args.methods.is_empty() || args.formulations.is_empty() {
        return Err(Failure::Usage("empty instance set".into()));
    }
    let qps = toy_instances(args.seed, args.count)?;
    let forms: Vec<Formulation> = args.formulations.iter().map(|&f| f.into()).collect();
    let methods: Vec<String> = args.methods.iter().map(|m| m.to_string()).collect();
    let mut csv = format!(
        "# cpkrylov bench seed={} count={} methods={} formulations={} inner_atol=adaptive inner_rtol=0 {}\n",
        args.seed,
        args.count,
        methods.join(";"),
        forms.iter().map(|f| f.name()).collect::<Vec<_>>().join(";"),
        args.solver.manifest()
    );
    csv.push_str("name,formulation,method,outer_it,inner_it,converged\n");
    for (name, qp) in &qps {
        for &kind in &forms {
            for &method in &args.methods {
                // K3p has a nonsymmetric leading block
                if kind == Formulation::K3p && method.needs_symmetric() {
                    continue;
                }
                let rep = toy_ip_solve(qp, kind, method, &opts)?;
                let _ = writeln!(
                    csv,
                    "{name},{kind},{method},{},{},{}",
                    rep.outer_it,
                    rep.inner_it_total,
                    u8::from(rep.converged)
                );
            }
        }
    }
    fs::write(&args.out, csv)?;
    println!("wrote {}", args.out.display());
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let out = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Spectrum(a) => cmd_spectrum(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match out {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
