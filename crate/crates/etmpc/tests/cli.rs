use std::io::{BufRead, BufReader};
use std::process::{Command, Output, Stdio};

use num_rational::Ratio;

fn etmpc() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_etmpc"));
    c.env_remove("ETMPC_PROBLEM_DIR").env_remove("RUST_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    etmpc().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn csv_rows(text: &str) -> (csv::StringRecord, Vec<csv::StringRecord>) {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().unwrap().clone();
    (header, r.records().map(Result::unwrap).collect())
}

fn column(header: &csv::StringRecord, name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

#[test]
fn condense_reports_the_four_mass_dimensions() {
    let o = run(&["condense"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for line in ["n: 8", "m: 3", "N: 10", "q: 236", "decision variables: 30", "terminal weight: DARE"] {
        assert!(out.lines().any(|l| l == line), "missing {line:?} in\n{out}");
    }
}

#[test]
fn compare_encodings_prints_the_message_lengths() {
    let o = run(&["compare-encodings"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("A1: 236 bits"), "{out}");
    assert!(out.contains("A3: 480 bits"));
    assert!(out.contains("A4: 34416 bits"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bits.csv");
    assert!(run(&["compare-encodings", "--csv", path.to_str().unwrap()]).status.success());
    let (header, rows) = csv_rows(&std::fs::read_to_string(path).unwrap());
    assert_eq!(rows.len(), 31);
    let last = &rows[30];
    assert_eq!(&last[column(&header, "q_A")], "30");
    assert_eq!(&last[column(&header, "A2")], (16 * 30 * 31 / 2 + 236).to_string());
}

#[test]
fn analyze_stays_under_the_inversion_share_bound() {
    let o = run(&["analyze", "--variants", "A1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv_rows(&stdout(&o));
    assert_eq!(rows.len(), 31);
    let exact = column(&header, "ratio_exact");
    let bound = Ratio::new(18i64, 79);
    let mut previous = Ratio::new(0, 1);
    for r in &rows {
        let ratio: Ratio<i64> = r[exact].parse().unwrap();
        assert!(ratio <= bound && ratio >= previous, "{ratio}");
        previous = ratio;
    }
    // inverting the 30 x 30 block: (2*30^3 + 18*30^2 + 10*30) / 3
    assert_eq!(&rows[30][column(&header, "flops_inv")], "23500");
    assert!(stderr(&o).contains("holds"));

    let o = run(&["analyze", "--dims", "1,1,1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn origin_start_needs_a_single_event() {
    let zeros = ["0"; 8].join(",");
    let o = run(&["simulate", "--x0", &zeros]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv_rows(&stdout(&o));
    let e = column(&header, "e");
    let events: Vec<_> = rows.iter().map(|r| r[e].to_string()).collect();
    assert_eq!(events[0], "1");
    assert!(events[1..].iter().all(|v| v == "0"));
    assert_eq!(&rows[0][column(&header, "bits")], "236");
    assert_eq!(&rows[0][column(&header, "q_A")], "0");
}

#[test]
fn seeded_runs_are_reproducible_and_can_be_compared() {
    let args = ["simulate", "--variant", "A3", "--seed", "5", "--precision", "full", "--compare"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert!(stderr(&a).contains("deviation from the solve-every-step loop"));
}

#[test]
fn bad_input_exits_with_status_one() {
    let cases: [&[&str]; 6] = [
        &["simulate", "--x0", "1,2"],
        &["simulate", "--x0", "1,2,x,4,5,6,7,8"],
        &["simulate", "--variant", "A7"],
        &["simulate", "--problem", "no_such_problem"],
        &["frobnicate"],
        &["compare-encodings", "--bits-per-real", "0"],
    ];
    for args in cases {
        let o = run(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
        assert!(!stderr(&o).is_empty());
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn an_infeasible_start_is_a_validation_error() {
    let far = ["3.9"; 8].join(",");
    let o = run(&["simulate", "--x0", &far]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

const SHORT_HORIZON: &str = r#"
horizon = 1
a = [[1.0, 1.0], [0.0, 1.0]]
b = [[0.5], [1.0]]
q = "identity"
r = "identity"
x_lo = -5.0
x_hi = 5.0
u_lo = -1.0
u_hi = 1.0
"#;

#[test]
fn problems_are_found_through_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cart.toml"), SHORT_HORIZON.replace("horizon = 1", "horizon = 4")).unwrap();
    std::fs::write(dir.path().join("short.toml"), SHORT_HORIZON).unwrap();

    let o = etmpc()
        .args(["condense", "--problem", "cart"])
        .env("ETMPC_PROBLEM_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("q: 28"), "{}", stdout(&o));

    let o = etmpc()
        .args(["condense", "--problem", "short"])
        .env("ETMPC_PROBLEM_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("horizon"), "{}", stderr(&o));

    assert_eq!(run(&["condense", "--problem", "cart"]).status.code(), Some(1));
}

#[test]
fn batch_writes_summary_and_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("hist.csv");
    let o = run(&[
        "batch",
        "--problem",
        "double_integrator",
        "--count",
        "4",
        "--histogram",
        hist.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv_rows(&stdout(&o));
    assert_eq!(rows.len(), 4);
    let runs = column(&header, "runs");
    let failed = column(&header, "failed_runs");
    for r in &rows {
        assert_eq!(r[runs].parse::<usize>().unwrap() + r[failed].parse::<usize>().unwrap(), 4);
    }
    let (_, hist_rows) = csv_rows(&std::fs::read_to_string(hist).unwrap());
    assert!(!hist_rows.is_empty());
}

#[test]
fn a_served_law_matches_the_in_process_one() {
    let mut server = etmpc()
        .args(["serve", "--listen", "127.0.0.1:0", "--variant", "A2", "--nodes", "4"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().to_string();

    let remote = run(&["simulate", "--variant", "A2", "--seed", "3", "--connect", &addr, "--node-id", "4"]);
    let local = run(&["simulate", "--variant", "A2", "--seed", "3"]);
    let stranger = run(&["simulate", "--variant", "A2", "--seed", "3", "--connect", &addr, "--node-id", "5"]);
    server.kill().unwrap();
    server.wait().unwrap();

    assert!(remote.status.success(), "{}", stderr(&remote));
    assert_eq!(remote.stdout, local.stdout);
    assert_eq!(stranger.status.code(), Some(2), "{}", stderr(&stranger));
}
