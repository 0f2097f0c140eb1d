//! Runs generated calculation code in a fresh Python process.
//!
//! Each execution spawns an isolated interpreter (`-I -S`, empty
//! environment, address-space limit) running the shim from
//! `assets/sandbox_shim.py`. The request goes in on stdin and a single JSON
//! document comes back on stdout. Failures never escape as errors; they are
//! reported through [`ExecutionStatus`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use tokio::io::AsyncWriteExt;
use tokio::process::Command;
use tokio::sync::Semaphore;

use crate::protocol::CodeArtifact;

pub const BUILTIN_SHIM: &str = include_str!("../assets/sandbox_shim.py");

const COMPILE_CHECK: &str =
    "import sys\ncompile(sys.stdin.read(), '<artifact>', 'exec')\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionLimits {
    #[serde(with = "secs_f64")]
    pub timeout: Duration,
    pub memory_bytes: u64,
}

impl Default for ExecutionLimits {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(5),
            memory_bytes: 256 * 1024 * 1024,
        }
    }
}

mod secs_f64 {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        if !(secs.is_finite() && secs > 0.0) {
            return Err(serde::de::Error::custom("timeout must be positive"));
        }
        Ok(Duration::from_secs_f64(secs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionStatus {
    Ok,
    CompileError,
    RuntimeError,
    Timeout,
    MissingVariable,
}

impl fmt::Display for ExecutionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ok => "ok",
            Self::CompileError => "compile_error",
            Self::RuntimeError => "runtime_error",
            Self::Timeout => "timeout",
            Self::MissingVariable => "missing_variable",
        })
    }
}

/// A value read back from the interpreter namespace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CapturedValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
    /// Anything else, as Python's `repr`.
    Repr { repr: String },
}

impl fmt::Display for CapturedValue {
    /// Python's `repr` of the value.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Bool(true) => f.write_str("True"),
            Self::Bool(false) => f.write_str("False"),
            Self::Int(i) => write!(f, "{i}"),
            Self::Float(x) => f.write_str(&python_float_repr(*x)),
            Self::Text(s) => f.write_str(&python_str_repr(s)),
            Self::Repr { repr } => f.write_str(repr),
        }
    }
}

/// Shortest round-trip representation, laid out the way Python's `repr`
/// does: positional for exponents in [-4, 16), scientific otherwise.
pub fn python_float_repr(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0.0".into() } else { "0.0".into() };
    }
    let sci = format!("{:e}", x.abs());
    let (mantissa, exp) = sci.split_once('e').expect("{:e} always has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let sign = if x < 0.0 { "-" } else { "" };

    let body = if (-4..16).contains(&exp) {
        if exp < 0 {
            format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
        } else {
            let int_len = exp as usize + 1;
            if digits.len() <= int_len {
                format!("{}{}.0", digits, "0".repeat(int_len - digits.len()))
            } else {
                format!("{}.{}", &digits[..int_len], &digits[int_len..])
            }
        }
    } else {
        let m = if digits.len() == 1 {
            digits.clone()
        } else {
            format!("{}.{}", &digits[..1], &digits[1..])
        };
        let esign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{esign}{:02}", exp.abs())
    };
    format!("{sign}{body}")
}

fn python_str_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c if (c as u32) < 0x20 || c as u32 == 0x7f => {
                out.push_str(&format!("\\x{:02x}", c as u32))
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecutionStatus,
    /// Requested variables in request order; empty unless `status` is ok.
    pub values: IndexMap<String, CapturedValue>,
    #[serde(default)]
    pub stderr: String,
}

impl ExecutionResult {
    pub fn failed(status: ExecutionStatus, stderr: impl Into<String>) -> Self {
        debug_assert_ne!(status, ExecutionStatus::Ok);
        Self {
            status,
            values: IndexMap::new(),
            stderr: stderr.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ExecutionStatus::Ok
    }
}

/// Text bound to `{python_output}`.
pub fn format_python_output(result: &ExecutionResult) -> String {
    if result.status != ExecutionStatus::Ok {
        return format!("execution failed: {}", result.status);
    }
    result
        .values
        .iter()
        .map(|(name, value)| format!("{name} = {value}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[async_trait]
pub trait CodeExecutor: Send + Sync {
    async fn execute(&self, artifact: &CodeArtifact, limits: &ExecutionLimits) -> ExecutionResult;

    /// True iff the code compiles; never runs it.
    async fn check_compiles(&self, code: &str) -> bool;
}

#[async_trait]
impl<E: CodeExecutor + ?Sized> CodeExecutor for Arc<E> {
    async fn execute(&self, artifact: &CodeArtifact, limits: &ExecutionLimits) -> ExecutionResult {
        (**self).execute(artifact, limits).await
    }

    async fn check_compiles(&self, code: &str) -> bool {
        (**self).check_compiles(code).await
    }
}

#[derive(Debug, Clone)]
pub enum ShimSource {
    Builtin,
    /// An external shim speaking the same stdin/stdout protocol.
    File(PathBuf),
}

#[derive(Serialize)]
struct ShimRequest<'a> {
    code: &'a str,
    result_variables: &'a [String],
}

#[derive(Deserialize)]
struct ShimResponse {
    status: ExecutionStatus,
    #[serde(default)]
    values: IndexMap<String, CapturedValue>,
    #[serde(default)]
    stderr: String,
}

/// Subprocess-per-execution Python sandbox.
pub struct PythonSandbox {
    interpreter: PathBuf,
    shim: ShimSource,
    slots: Semaphore,
}

impl PythonSandbox {
    pub fn new(interpreter: impl Into<PathBuf>) -> Self {
        Self {
            interpreter: interpreter.into(),
            shim: ShimSource::Builtin,
            slots: Semaphore::new(4),
        }
    }

    /// Locates `python3` on `PATH`.
    pub fn discover() -> Option<Self> {
        find_on_path("python3").map(Self::new)
    }

    pub fn with_shim(mut self, shim: ShimSource) -> Self {
        self.shim = shim;
        self
    }

    pub fn with_max_parallel(mut self, n: usize) -> Self {
        self.slots = Semaphore::new(n.max(1));
        self
    }

    pub fn interpreter(&self) -> &Path {
        &self.interpreter
    }

    fn command(&self, memory_bytes: Option<u64>) -> Command {
        let mut cmd = Command::new(&self.interpreter);
        cmd.arg("-I")
            .arg("-S")
            .env_clear()
            .current_dir(std::env::temp_dir())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .kill_on_drop(true);
        #[cfg(unix)]
        if let Some(limit) = memory_bytes {
            // SAFETY: only async-signal-safe setrlimit runs between fork and exec.
            unsafe {
                cmd.pre_exec(move || {
                    let rl = libc::rlimit {
                        rlim_cur: limit as libc::rlim_t,
                        rlim_max: limit as libc::rlim_t,
                    };
                    if libc::setrlimit(libc::RLIMIT_AS, &rl) != 0 {
                        return Err(std::io::Error::last_os_error());
                    }
                    Ok(())
                });
            }
        }
        #[cfg(not(unix))]
        let _ = memory_bytes;
        cmd
    }

    async fn run(
        &self,
        mut cmd: Command,
        stdin: Vec<u8>,
        timeout: Duration,
    ) -> Result<Option<std::process::Output>, std::io::Error> {
        let _slot = self.slots.acquire().await.expect("semaphore never closed");
        let mut child = cmd.spawn()?;
        let mut pipe = child.stdin.take().expect("piped stdin");
        let work = async move {
            // a child that dies early closes its stdin; its exit status tells the story
            let _ = pipe.write_all(&stdin).await;
            drop(pipe);
            child.wait_with_output().await
        };
        match tokio::time::timeout(timeout, work).await {
            Ok(out) => out.map(Some),
            Err(_) => Ok(None),
        }
    }
}

#[async_trait]
impl CodeExecutor for PythonSandbox {
    async fn execute(&self, artifact: &CodeArtifact, limits: &ExecutionLimits) -> ExecutionResult {
        let mut cmd = self.command(Some(limits.memory_bytes));
        match &self.shim {
            ShimSource::Builtin => cmd.arg("-c").arg(BUILTIN_SHIM),
            ShimSource::File(path) => cmd.arg(path),
        };
        let request = serde_json::to_vec(&ShimRequest {
            code: &artifact.code,
            result_variables: &artifact.result_variables,
        })
        .expect("request serializes");

        let output = match self.run(cmd, request, limits.timeout).await {
            Ok(Some(out)) => out,
            Ok(None) => {
                return ExecutionResult::failed(
                    ExecutionStatus::Timeout,
                    format!("killed after {:.1} s", limits.timeout.as_secs_f64()),
                )
            }
            Err(e) => {
                return ExecutionResult::failed(
                    ExecutionStatus::RuntimeError,
                    format!("failed to start interpreter: {e}"),
                )
            }
        };

        let stdout = String::from_utf8_lossy(&output.stdout);
        let parsed = stdout
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .and_then(|l| serde_json::from_str::<ShimResponse>(l).ok());
        let Some(response) = parsed else {
            let stderr = String::from_utf8_lossy(&output.stderr);
            return ExecutionResult::failed(
                ExecutionStatus::RuntimeError,
                format!(
                    "interpreter exited with {} and no result: {}",
                    output.status,
                    truncate(&stderr, 2048)
                ),
            );
        };
        if response.status != ExecutionStatus::Ok {
            return ExecutionResult::failed(response.status, response.stderr);
        }
        // restore request order and insist on every variable
        let mut values = IndexMap::new();
        for name in &artifact.result_variables {
            match response.values.get(name) {
                Some(v) => {
                    values.insert(name.clone(), v.clone());
                }
                None => {
                    return ExecutionResult::failed(
                        ExecutionStatus::MissingVariable,
                        format!("shim did not return `{name}`"),
                    )
                }
            }
        }
        ExecutionResult {
            status: ExecutionStatus::Ok,
            values,
            stderr: response.stderr,
        }
    }

    async fn check_compiles(&self, code: &str) -> bool {
        let mut cmd = self.command(None);
        cmd.arg("-c").arg(COMPILE_CHECK);
        matches!(
            self.run(cmd, code.as_bytes().to_vec(), Duration::from_secs(10)).await,
            Ok(Some(out)) if out.status.success()
        )
    }
}

fn truncate(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &s[..end]
}

fn find_on_path(name: &str) -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|dir| dir.join(name))
        .find(|candidate| candidate.is_file())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_repr_matches_python() {
        let cases = [
            (19.6, "19.6"),
            (20.0, "20.0"),
            (0.1 + 0.2, "0.30000000000000004"),
            (1e16, "1e+16"),
            (1.5e16, "1.5e+16"),
            (1e15, "1000000000000000.0"),
            (0.0001, "0.0001"),
            (0.00001, "1e-05"),
            (1.2345e-7, "1.2345e-07"),
            (-3.25, "-3.25"),
            (123456.789, "123456.789"),
            (f64::INFINITY, "inf"),
            (-0.0, "-0.0"),
        ];
        for (x, expected) in cases {
            assert_eq!(python_float_repr(x), expected, "{x:e}");
        }
    }

    #[test]
    fn output_formatting() {
        let mut values = IndexMap::new();
        values.insert("ok".to_string(), CapturedValue::Bool(true));
        values.insert("actual".to_string(), CapturedValue::Float(19.6));
        let r = ExecutionResult {
            status: ExecutionStatus::Ok,
            values,
            stderr: String::new(),
        };
        assert_eq!(format_python_output(&r), "ok = True\nactual = 19.6");
        let t = ExecutionResult::failed(ExecutionStatus::Timeout, "");
        assert_eq!(format_python_output(&t), "execution failed: timeout");
    }

    #[test]
    fn text_repr() {
        assert_eq!(CapturedValue::Text("m/s".into()).to_string(), "'m/s'");
        assert_eq!(CapturedValue::Text("it's".into()).to_string(), "\"it's\"");
        assert_eq!(CapturedValue::Text("a\nb".into()).to_string(), "'a\\nb'");
    }

    #[test]
    fn captured_values_round_trip_json() {
        let json = r#"{"a": true, "b": 1024, "c": 20.0, "d": "x", "e": {"repr": "(1+2j)"}}"#;
        let v: IndexMap<String, CapturedValue> = serde_json::from_str(json).unwrap();
        assert_eq!(v["b"], CapturedValue::Int(1024));
        assert_eq!(v["c"], CapturedValue::Float(20.0));
        assert_eq!(v["e"].to_string(), "(1+2j)");
        let back: IndexMap<String, CapturedValue> =
            serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
    }
}
