use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use etmpc::batch::run_batch_parallel;
use etmpc::output;
use etmpc::problem_file::{resolve_problem, ProblemFile};
use etmpc::tcp::{Server, TcpTransport, DEFAULT_TIMEOUT};
use etmpc::verify::{self, VerifyOptions};
use etmpc_core::costmodel::{check_ratio_bound, compare_encodings_with, cost_report, ratio_bound, Dims, Prediction, Variant};
use etmpc_core::nalgebra::DVector;
use etmpc_core::netio::{CentralNode, LocalClient, NodeRegistration};
use etmpc_core::problem::{condense, terminal_weight, validate, CondensedQp, MpcProblem};
use etmpc_core::protocol::Precision;
use etmpc_core::qp;
use etmpc_core::region::BackendKind;
use etmpc_core::sim::{
    max_deviation, sample_feasible_states, simulate_classical, simulate_event_triggered, simulate_loopback, Plant,
    SimConfig, SimFailure, Trajectory, DEFAULT_MAX_STEPS,
};

#[derive(Parser)]
#[command(name = "etmpc", version, about = "Event-triggered networked MPC toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the dimensions of the condensed QP.
    Condense(ProblemArg),
    /// Run one closed loop and write its steps as CSV.
    Simulate(SimulateArgs),
    /// Run many initial states under several encodings and write totals as CSV.
    Batch(BatchArgs),
    /// Write predicted bits and flops for every active-set size as CSV.
    Analyze(AnalyzeArgs),
    /// Compare the bit lengths of the four encodings.
    CompareEncodings(CompareArgs),
    /// Run a central node on a stream socket.
    Serve(ServeArgs),
    /// Run the acceptance checks; exits 1 if any fails.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct ProblemArg {
    /// Problem file path, a name in $ETMPC_PROBLEM_DIR, or a bundled problem.
    #[arg(long, default_value = "four_mass_oscillator")]
    problem: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Naive,
    Lu,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Naive => BackendKind::NaiveInverse,
            BackendArg::Lu => BackendKind::LuPivoted,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Half,
    Full,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Half => Precision::Half,
            PrecisionArg::Full => Precision::Full,
        }
    }
}

#[derive(Args)]
struct LoopArgs {
    #[arg(long, default_value = "naive")]
    backend: BackendArg,
    /// Precision of the reals in downlink messages.
    #[arg(long, default_value = "half")]
    precision: PrecisionArg,
    #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
    max_steps: usize,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    problem: ProblemArg,
    #[command(flatten)]
    run: LoopArgs,
    #[arg(long, default_value = "A1", value_parser = parse_variant)]
    variant: Variant,
    /// Initial state as comma-separated numbers; sampled from --seed if absent.
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central node address; the in-process loopback is used if absent.
    #[arg(long)]
    connect: Option<String>,
    #[arg(long, default_value_t = 1)]
    node_id: u16,
    /// Socket timeout in milliseconds.
    #[arg(long, default_value_t = DEFAULT_TIMEOUT.as_millis() as u64)]
    timeout_ms: u64,
    /// Also run the solve-every-step loop and report the deviation.
    #[arg(long)]
    compare: bool,
    /// CSV destination; standard output if absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BatchArgs {
    #[command(flatten)]
    problem: ProblemArg,
    #[command(flatten)]
    run: LoopArgs,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "A1,A2,A3,A4", value_parser = parse_variant)]
    variants: Vec<Variant>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Where to write the q_A histogram CSV.
    #[arg(long)]
    histogram: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    problem: ProblemArg,
    /// Box shape `n,m,N`, used instead of --problem.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    dims: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', default_value = "A1,A2,A3,A4", value_parser = parse_variant)]
    variants: Vec<Variant>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    problem: ProblemArg,
    #[arg(long, default_value_t = 16)]
    bits_per_real: u64,
    /// Also write the per-q_A bit table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    problem: ProblemArg,
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    #[arg(long, default_value = "A1", value_parser = parse_variant)]
    variant: Variant,
    #[arg(long, default_value = "half")]
    precision: PrecisionArg,
    /// Node ids to register, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    nodes: Vec<u16>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = verify::DEFAULT_RUNS)]
    runs: usize,
    #[arg(long, default_value_t = verify::DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = verify::DEFAULT_PAIRS)]
    pairs: usize,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|_| format!("unknown variant {s:?}; expected A1, A2, A3 or A4"))
}

enum Failure {
    /// Bad flags, files or problem data.
    Validation(String),
    /// Anything that went wrong after the inputs were accepted.
    Runtime(String),
}

type Outcome = Result<(), Failure>;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn validation(e: impl std::fmt::Display) -> Failure {
    Failure::Validation(e.to_string())
}

struct Loaded {
    file: ProblemFile,
    qp: Arc<CondensedQp>,
}

impl Loaded {
    fn problem(&self) -> &MpcProblem {
        &self.file.problem
    }
}

fn load(arg: &ProblemArg) -> Result<Loaded, Failure> {
    let file = resolve_problem(&arg.problem).map_err(validation)?;
    let report = validate(&file.problem);
    if !report.is_ok() {
        let list: Vec<String> = report.violations.iter().map(ToString::to_string).collect();
        return Err(Failure::Validation(format!("{}: {}", file.name, list.join("; "))));
    }
    let qp = condense(&file.problem).map_err(validation)?;
    Ok(Loaded { file, qp: Arc::new(qp) })
}

fn sink(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    match path {
        Some(p) => File::create(p)
            .map(|f| Box::new(f) as Box<dyn Write>)
            .map_err(|e| validation(format!("{}: {e}", p.display()))),
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn condense_cmd(args: &ProblemArg) -> Outcome {
    let l = load(args)?;
    let d = l.qp.dims;
    let p = l.problem();
    println!("problem: {}", l.file.name);
    println!("n: {}", d.n);
    println!("m: {}", d.m);
    println!("N: {}", d.horizon);
    println!("q: {}", d.q);
    println!("decision variables: {}", d.decision_len());
    println!("terminal weight: {}", if p.p.is_some() { "given" } else { "DARE" });
    if let Some(ts) = l.file.sampling_time {
        println!("sampling time: {ts}");
    }
    // the terminal weight is recomputed only to report its size
    let weight = terminal_weight(p).map_err(runtime)?;
    println!("terminal weight max entry: {:.6}", weight.amax());
    Ok(())
}

fn parse_state(text: &str, n: usize) -> Result<DVector<f64>, Failure> {
    let values: Result<Vec<f64>, _> = text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let values = values.map_err(|e| validation(format!("--x0: {e}")))?;
    if values.len() != n {
        return Err(validation(format!("--x0 has {} entries, the problem has {n} states", values.len())));
    }
    Ok(DVector::from_vec(values))
}

fn loop_config(x0: DVector<f64>, variant: Variant, args: &LoopArgs) -> SimConfig {
    let mut c = SimConfig::new(x0, variant);
    c.backend = args.backend.into();
    c.precision = args.precision.into();
    c.max_steps = args.max_steps;
    c
}

fn report_run(t: &Trajectory) {
    eprintln!(
        "steps: {}, events: {}, bits: {}, frames: {}, converged: {}",
        t.steps.len(),
        t.events(),
        t.total_bits(),
        t.frames.frames(),
        t.converged
    );
}

fn simulate_cmd(args: &SimulateArgs) -> Outcome {
    let l = load(&args.problem)?;
    let n = l.qp.n();
    let x0 = match &args.x0 {
        Some(text) => parse_state(text, n)?,
        None => sample_feasible_states(l.problem(), &l.qp, 1, args.seed).map_err(validation)?.remove(0),
    };
    if let Err(e) = qp::solve(&l.qp, &x0) {
        return Err(validation(format!("initial state rejected: {e}")));
    }
    let config = loop_config(x0, args.variant, &args.run);
    let plant = Plant::of(l.problem());

    let result: Result<Trajectory, SimFailure> = match &args.connect {
        None => simulate_loopback(&plant, &l.qp, &config),
        Some(addr) => {
            let mut transport = TcpTransport::connect(addr.as_str())
                .map_err(|e| runtime(format!("{addr}: {e}")))?
                .with_timeout(Some(Duration::from_millis(args.timeout_ms)));
            if let Some(ts) = l.file.sampling_time {
                transport = transport.with_latency_budget(Duration::from_secs_f64(ts));
            }
            let mut client = LocalClient::new(transport, l.qp.clone(), config.client_config(args.node_id));
            let r = simulate_event_triggered(&plant, &mut client, &config);
            let t = client.transport();
            eprintln!("slowest reply: {:?}", t.slowest_reply());
            if t.late_replies() > 0 {
                eprintln!("warning: {} replies took longer than the sampling period", t.late_replies());
            }
            r
        }
    };

    let mut out = sink(&args.output)?;
    match result {
        Ok(t) => {
            output::write_trajectory(&mut out, &t).map_err(runtime)?;
            report_run(&t);
            if args.compare {
                let c = simulate_classical(&plant, &l.qp, &config).map_err(|f| runtime(f.error))?;
                let (dx, du) = max_deviation(&t, &c);
                eprintln!("deviation from the solve-every-step loop: state {dx:e}, input {du:e}");
            }
            Ok(())
        }
        Err(f) => {
            // keep what was simulated
            output::write_trajectory(&mut out, &f.partial).map_err(runtime)?;
            report_run(&f.partial);
            Err(runtime(f.error))
        }
    }
}

fn batch_cmd(args: &BatchArgs) -> Outcome {
    let l = load(&args.problem)?;
    if args.count == 0 {
        return Err(validation("--count must be at least 1"));
    }
    let states = sample_feasible_states(l.problem(), &l.qp, args.count, args.seed).map_err(validation)?;
    let template = loop_config(states[0].clone(), Variant::A1, &args.run);
    let plant = Plant::of(l.problem());
    let outcome = run_batch_parallel(&plant, &l.qp, &states, &template, &args.variants);
    output::write_batch(sink(&args.output)?, &outcome).map_err(runtime)?;
    if let Some(path) = &args.histogram {
        output::write_histogram(sink(&Some(path.clone()))?, &outcome.report).map_err(runtime)?;
    }
    for f in &outcome.failures {
        eprintln!("failed: {f}");
    }
    if outcome.failures.iter().any(|f| f.variant.is_none()) {
        return Err(runtime("a solve-every-step reference run failed"));
    }
    Ok(())
}

fn analysis_dims(args: &AnalyzeArgs) -> Result<Dims, Failure> {
    match &args.dims {
        Some(d) => {
            let dims = Dims::for_box(d[0], d[1], d[2], 0);
            if !dims.is_valid() || d[2] < 2 {
                return Err(validation("--dims needs n ≥ 1, m ≥ 1, N ≥ 2"));
            }
            Ok(dims)
        }
        None => {
            let l = load(&args.problem)?;
            let p = l.problem();
            Ok(Dims::for_box(p.n(), p.m(), p.horizon, 0))
        }
    }
}

fn analyze_cmd(args: &AnalyzeArgs) -> Outcome {
    let base = analysis_dims(args)?;
    let rows: Vec<_> = args
        .variants
        .iter()
        .flat_map(|&v| (0..=base.decision_len()).map(move |qa| cost_report(v, base.with_active(qa))))
        .collect();
    output::write_analysis(sink(&args.output)?, &rows).map_err(runtime)?;
    let sweep = check_ratio_bound(base.n, base.m, base.horizon);
    eprintln!(
        "largest η_inv/η_mat {} at q_A = {} (bound {}): {}; nondecreasing in q_A: {}",
        sweep.max_ratio,
        sweep.argmax,
        ratio_bound(),
        if sweep.bound_holds { "holds" } else { "violated" },
        sweep.monotone
    );
    Ok(())
}

fn compare_cmd(args: &CompareArgs) -> Outcome {
    let l = load(&args.problem)?;
    let p = l.problem();
    if args.bits_per_real < 1 {
        return Err(validation("--bits-per-real must be positive"));
    }
    let c = compare_encodings_with(p.n(), p.m(), p.horizon, args.bits_per_real);
    let first = &c.rows[0];
    let last = c.rows.last().expect("q_A = 0 is always present");
    println!("problem: {} (n = {}, m = {}, N = {}, q = {})", l.file.name, c.n, c.m, c.horizon, c.q);
    println!("bits per real: {}", c.bits_per_real);
    println!("A1: {} bits", first.bits_of(Variant::A1));
    println!(
        "A2: {} bits at q_A = 0, {} bits at q_A = {}",
        first.bits_of(Variant::A2),
        last.bits_of(Variant::A2),
        last.q_active
    );
    println!("A3: {} bits", first.bits_of(Variant::A3));
    println!("A4: {} bits", first.bits_of(Variant::A4));
    let lambda = c.bits_per_real as i64;
    let relation = match c.a1_threshold {
        std::cmp::Ordering::Greater => ">",
        std::cmp::Ordering::Equal => "=",
        std::cmp::Ordering::Less => "<",
    };
    let verdict = match c.a1_prediction {
        Prediction::Confirmed => "predicts A3 > A1; confirmed by the counts",
        Prediction::Contradicted => "predicts A3 > A1; contradicted by the counts",
        Prediction::NoPrediction => "makes no prediction",
    };
    println!(
        "(λ−2)/3 = {}/3 {relation} n/m = {}/{}: {verdict}",
        lambda - 2,
        c.n,
        c.m
    );
    let confirmed = c.a2_predictions.iter().filter(|p| **p == Prediction::Confirmed).count();
    let contradicted = c.a2_predictions.iter().filter(|p| **p == Prediction::Contradicted).count();
    println!("A3 > A2 predicted strictly for {} of {} q_A values, {contradicted} contradicted", confirmed + contradicted, c.rows.len());
    println!("A1 ≤ A2 for every q_A: {}", c.a1_le_a2());
    for v in [Variant::A1, Variant::A2, Variant::A3] {
        let bad = c.a4_violations(v);
        match bad.first() {
            None => println!("{v} ≤ A4 for every q_A: true"),
            Some(qa) => println!("{v} ≤ A4 for every q_A: false ({} values, from q_A = {qa})", bad.len()),
        }
    }
    if let Some(path) = &args.csv {
        output::write_encodings(sink(&Some(path.clone()))?, &c).map_err(runtime)?;
    }
    Ok(())
}

fn serve_cmd(args: &ServeArgs) -> Outcome {
    let l = load(&args.problem)?;
    let mut node = CentralNode::new();
    for &id in &args.nodes {
        node.register(
            id,
            NodeRegistration {
                qp: l.qp.clone(),
                variant: args.variant,
                precision: args.precision.into(),
            },
        );
    }
    let server = Server::bind(args.listen.as_str(), Arc::new(node)).map_err(|e| validation(format!("{}: {e}", args.listen)))?;
    let addr = server.local_addr().map_err(runtime)?;
    eprintln!("serving {} ({}) for nodes {:?} on {addr}", l.file.name, args.variant, args.nodes);
    server.run().map_err(runtime)
}

fn verify_cmd(args: &VerifyArgs) -> Outcome {
    if args.runs == 0 || args.pairs == 0 {
        return Err(validation("--runs and --pairs must be at least 1"));
    }
    let options = VerifyOptions {
        runs: args.runs,
        seed: args.seed,
        pairs: args.pairs,
    };
    let outcomes = verify::run_all(&options);
    for o in &outcomes {
        println!("{o}");
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.id).collect();
    if failed.is_empty() {
        println!("all criteria pass");
        Ok(())
    } else {
        Err(Failure::Validation(format!("failed criteria: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let result = match &cli.command {
        Command::Condense(a) => condense_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Batch(a) => batch_cmd(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::CompareEncodings(a) => compare_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Verify(a) => verify_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
