//! Hand-checked sandbox corpus: code, result variables, expected status and
//! the expected `{python_output}` text when execution succeeds.

use soliloquy_core::sandbox::ExecutionStatus::{self, *};

pub struct OracleCase {
    pub name: &'static str,
    pub code: &'static str,
    pub vars: &'static [&'static str],
    pub status: ExecutionStatus,
    pub output: Option<&'static str>,
}

const fn case(
    name: &'static str,
    code: &'static str,
    vars: &'static [&'static str],
    status: ExecutionStatus,
    output: Option<&'static str>,
) -> OracleCase {
    OracleCase { name, code, vars, status, output }
}

pub const CORPUS: &[OracleCase] = &[
    // arithmetic
    case("int_add", "x = 2 + 3", &["x"], Ok, Some("x = 5")),
    case("pow2", "a = 2**10", &["a"], Ok, Some("a = 1024")),
    case("float_mul", "d = 9.8 * 2", &["d"], Ok, Some("d = 19.6")),
    case("third", "t = 1 / 3", &["t"], Ok, Some("t = 0.3333333333333333")),
    case("tenth_sum", "s = 0.1 + 0.2", &["s"], Ok, Some("s = 0.30000000000000004")),
    case("int_div", "q = 7 // 2\nr = 7 % 2", &["q", "r"], Ok, Some("q = 3\nr = 1")),
    case("true_div", "h = 7 / 2", &["h"], Ok, Some("h = 3.5")),
    case("sqrt", "import math\nt = math.sqrt(2 * 45 / 9.8)", &["t"], Ok, Some("t = 3.0304576336566322")),
    case("big_float", "e = 1e16", &["e"], Ok, Some("e = 1e+16")),
    case("small_float", "e = 0.00001", &["e"], Ok, Some("e = 1e-05")),
    case("neg", "v = -4.5 * 2", &["v"], Ok, Some("v = -9.0")),
    case("kinetic", "m = 2.0\nv = 3.0\nke = 0.5 * m * v**2", &["ke"], Ok, Some("ke = 9.0")),
    case("huge_int", "n = 10**30", &["n"], Ok, Some("n = 1000000000000000000000000000000")),
    case("pi", "import math\np = math.pi", &["p"], Ok, Some("p = 3.141592653589793")),
    case("round", "r = round(29.698, 1)", &["r"], Ok, Some("r = 29.7")),
    // math.isclose checks with the default 1% tolerance
    case("close_exact", "import math\nstudent = 19.6\nactual = 9.8*2\nok = math.isclose(student, actual, rel_tol=0.01)", &["ok"], Ok, Some("ok = True")),
    case("close_within", "import math\nok = math.isclose(3.03, math.sqrt(2*45/9.8), rel_tol=0.01)", &["ok"], Ok, Some("ok = True")),
    case("close_outside", "import math\nok = math.isclose(4.3, math.sqrt(2*45/9.8), rel_tol=0.01)", &["ok"], Ok, Some("ok = False")),
    case("close_edge_in", "import math\nok = math.isclose(100.0, 99.0, rel_tol=0.01)", &["ok"], Ok, Some("ok = True")),
    case("close_edge_out", "import math\nok = math.isclose(100.0, 98.9, rel_tol=0.01)", &["ok"], Ok, Some("ok = False")),
    case("close_speed", "import math\nexpected = 9.8 * 3.03\nok = math.isclose(29.7, expected, rel_tol=0.01)", &["expected", "ok"], Ok, Some("expected = 29.694\nok = True")),
    case("close_wrong_sign", "import math\nok = math.isclose(-9.8, 9.8, rel_tol=0.01)", &["ok"], Ok, Some("ok = False")),
    case("close_zero", "import math\nok = math.isclose(0.0, 0.0, rel_tol=0.01)", &["ok"], Ok, Some("ok = True")),
    case("close_force", "import math\nf = 5 * 9.8\nok = math.isclose(49, f, rel_tol=0.01)", &["f", "ok"], Ok, Some("f = 49.0\nok = True")),
    case("close_energy", "import math\npe = 2 * 9.8 * 10\nok = math.isclose(200, pe, rel_tol=0.01)", &["pe", "ok"], Ok, Some("pe = 196.0\nok = False")),
    case("close_momentum", "import math\np = 0.15 * 40\nok = math.isclose(6, p, rel_tol=0.01)", &["p", "ok"], Ok, Some("p = 6.0\nok = True")),
    case("close_period", "import math\nT = 2 * math.pi * math.sqrt(1.0 / 9.8)\nok = math.isclose(2.0, T, rel_tol=0.01)", &["ok"], Ok, Some("ok = True")),
    case("close_range", "import math\nR = 20**2 * math.sin(math.radians(90)) / 9.8\nok = math.isclose(40.8, R, rel_tol=0.01)", &["ok"], Ok, Some("ok = True")),
    case("close_many", "import math\nchecks = [math.isclose(a, b, rel_tol=0.01) for a, b in [(1, 1.005), (2, 2.5)]]\nall_ok = all(checks)", &["all_ok"], Ok, Some("all_ok = False")),
    case("close_bool_int", "import math\nn_ok = int(math.isclose(3.0, 3.02, rel_tol=0.01))", &["n_ok"], Ok, Some("n_ok = 1")),
    // unit conversions
    case("kmh_to_ms", "v = 72 * 1000 / 3600", &["v"], Ok, Some("v = 20.0")),
    case("ms_to_kmh", "v = 20 * 3.6", &["v"], Ok, Some("v = 72.0")),
    case("cm_to_m", "d = 250 / 100", &["d"], Ok, Some("d = 2.5")),
    case("g_to_kg", "m = 500 / 1000", &["m"], Ok, Some("m = 0.5")),
    case("min_to_s", "t = 2.5 * 60", &["t"], Ok, Some("t = 150.0")),
    case("deg_to_rad", "import math\nr = math.radians(180)", &["r"], Ok, Some("r = 3.141592653589793")),
    case("kj_to_j", "e = 3.2 * 1000", &["e"], Ok, Some("e = 3200.0")),
    case("mm_to_m", "d = 3 / 1000", &["d"], Ok, Some("d = 0.003")),
    case("hours_to_s", "t = 2 * 3600", &["t"], Ok, Some("t = 7200")),
    case("atm_to_pa", "p = 1.5 * 101325", &["p"], Ok, Some("p = 151987.5")),
    case("c_to_k", "T = 25 + 273.15", &["T"], Ok, Some("T = 298.15")),
    case("ev_to_j", "e = 2 * 1.602e-19", &["e"], Ok, Some("e = 3.204e-19")),
    // other values
    case("text", "unit = 'm/s'", &["unit"], Ok, Some("unit = 'm/s'")),
    case("list", "vals = [1, 2.5]", &["vals"], Ok, Some("vals = [1, 2.5]")),
    case("nan", "x = float('nan')", &["x"], Ok, Some("x = nan")),
    // failures
    case("infinite_loop", "while True: pass", &["x"], Timeout, None),
    case("syntax_error", "x = (1 +", &["x"], CompileError, None),
    case("denied_import", "import socket\nx = 1", &["x"], RuntimeError, None),
    case("zero_division", "x = 1 / 0", &["x"], RuntimeError, None),
    case("never_assigned", "y = 2", &["answer"], MissingVariable, None),
];

use std::time::{Duration, Instant};

use soliloquy_core::protocol::CodeArtifact;
use soliloquy_core::sandbox::{format_python_output, CodeExecutor, ExecutionLimits};

pub fn artifact(code: &str, vars: &[&str]) -> CodeArtifact {
    CodeArtifact::new(code, vars.iter().map(|v| v.to_string()).collect()).unwrap()
}

/// Mismatches between the corpus and what `executor` reports.
pub async fn run_corpus(executor: &dyn CodeExecutor, limits: &ExecutionLimits) -> Vec<String> {
    let runs = CORPUS.iter().map(|case| async move {
        let result = executor.execute(&artifact(case.code, case.vars), limits).await;
        let mut problems = Vec::new();
        if result.status != case.status {
            problems.push(format!("{}: status {} (expected {}) {}", case.name, result.status, case.status, result.stderr));
        } else if let Some(expected) = case.output {
            let got = format_python_output(&result);
            if got != expected {
                problems.push(format!("{}: output {got:?} (expected {expected:?})", case.name));
            }
        }
        if result.status != CompileError && !executor.check_compiles(case.code).await {
            problems.push(format!("{}: runs but check_compiles is false", case.name));
        }
        if result.status == CompileError && executor.check_compiles(case.code).await {
            problems.push(format!("{}: compile error but check_compiles is true", case.name));
        }
        problems
    });
    futures::future::join_all(runs).await.into_iter().flatten().collect()
}

/// Elapsed time for an endless loop under `timeout`.
pub async fn timeout_elapsed(executor: &dyn CodeExecutor, timeout: Duration) -> (ExecutionStatus, Duration) {
    let limits = ExecutionLimits {
        timeout,
        ..ExecutionLimits::default()
    };
    let start = Instant::now();
    let result = executor.execute(&artifact("while True: pass", &["x"]), &limits).await;
    (result.status, start.elapsed())
}

/// A name assigned in one run must not exist in the next.
pub async fn isolated(executor: &dyn CodeExecutor) -> bool {
    let limits = ExecutionLimits::default();
    let first = executor
        .execute(&artifact("import math\nleftover = 41\nmath.answer = 1\nseen = 1", &["seen"]), &limits)
        .await;
    let second = executor
        .execute(
            &artifact(
                "try:\n    leftover\n    seen = 'leaked'\nexcept NameError:\n    seen = getattr(math, 'answer', 'clean')",
                &["seen"],
            ),
            &limits,
        )
        .await;
    first.is_ok() && format_python_output(&second) == "seen = 'clean'"
}
