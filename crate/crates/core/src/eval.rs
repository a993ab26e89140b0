//! Kernel evaluation: compile, check, time.
//!
//! Real evaluation happens in a separate process that speaks a one-line JSON
//! protocol over stdin/stdout. The simulated landscape is a deterministic
//! stand-in used for tests and desk-scale runs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::EvaluationOutcome;

pub const PROTOCOL_VERSION: u32 = 1;

/// Anything that can turn a candidate kernel into an outcome. Implementations
/// never fail: every problem is folded into the outcome.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, reference_source: &str, candidate_source: &str) -> EvaluationOutcome;
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("timing summary of an empty sample list")]
    EmptySamples,
}

/// Mean of the timed trials.
pub fn timing_summary(samples: &[f64]) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuplicatePolicy {
    /// A directive applied twice yields a compiled but incorrect kernel.
    #[default]
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimLandscapeSpec {
    pub base_runtime_ms: f64,
    pub directive_factors: BTreeMap<String, f64>,
    pub bug_token: String,
    pub duplicate_policy: DuplicatePolicy,
}

impl Default for SimLandscapeSpec {
    fn default() -> Self {
        Self {
            base_runtime_ms: 100.0,
            directive_factors: BTreeMap::from([
                ("tile".to_string(), 0.6),
                ("vectorize".to_string(), 0.8),
                ("fuse".to_string(), 0.7),
                ("unroll".to_string(), 0.9),
            ]),
            bug_token: "BUG".to_string(),
            duplicate_policy: DuplicatePolicy::Incorrect,
        }
    }
}

impl SimLandscapeSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_runtime_ms.is_finite() && self.base_runtime_ms > 0.0) {
            return Err("base_runtime_ms must be positive".into());
        }
        for (name, f) in &self.directive_factors {
            if !(*f > 0.0 && *f <= 1.0) {
                return Err(format!("factor for {name} must lie in (0, 1], got {f}"));
            }
        }
        if self.bug_token.is_empty() {
            return Err("bug_token must not be empty".into());
        }
        Ok(())
    }
}

/// Directive names from `// OPT:<name>` lines, in order of appearance.
pub fn directives(source: &str) -> Vec<String> {
    source
        .lines()
        .filter_map(|l| l.trim().strip_prefix("// OPT:"))
        .map(|name| name.trim().to_string())
        .filter(|name| !name.is_empty())
        .collect()
}

pub fn simulate_evaluate(candidate_source: &str, spec: &SimLandscapeSpec) -> EvaluationOutcome {
    if candidate_source.contains(&spec.bug_token) {
        return EvaluationOutcome::compile_failure(format!(
            "error: simulated compile failure ({} present)",
            spec.bug_token
        ));
    }
    let mut seen = BTreeSet::new();
    for d in directives(candidate_source) {
        if !spec.directive_factors.contains_key(&d) {
            continue;
        }
        if !seen.insert(d.clone()) {
            return match spec.duplicate_policy {
                DuplicatePolicy::Incorrect => EvaluationOutcome::incorrect(format!(
                    "output mismatch: directive {d} applied twice"
                )),
            };
        }
    }
    // fixed (alphabetical) multiplication order keeps rounding identical
    let runtime = seen.iter().fold(spec.base_runtime_ms, |acc, d| {
        acc * spec.directive_factors[d]
    });
    EvaluationOutcome::success(runtime).expect("factors are positive")
}

#[derive(Debug, Clone)]
pub struct SimulatedEvaluator {
    pub spec: SimLandscapeSpec,
}

impl Evaluator for SimulatedEvaluator {
    fn evaluate(&self, _reference_source: &str, candidate_source: &str) -> EvaluationOutcome {
        simulate_evaluate(candidate_source, &self.spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub reference_source: String,
    pub candidate_source: String,
    pub num_warmup: u32,
    pub num_trials: u32,
    pub timeout_s: u64,
    pub device_hint: String,
}

impl EvalRequest {
    pub fn new(reference_source: impl Into<String>, candidate_source: impl Into<String>) -> Self {
        Self {
            reference_source: reference_source.into(),
            candidate_source: candidate_source.into(),
            num_warmup: 100,
            num_trials: 100,
            timeout_s: 600,
            device_hint: String::new(),
        }
    }
}

/// Request line on the wire. Field order is part of the protocol.
#[derive(Debug, Serialize, Deserialize)]
pub struct WireRequest {
    pub protocol: u32,
    pub reference_source: String,
    pub candidate_source: String,
    pub num_warmup: u32,
    pub num_trials: u32,
    pub device_hint: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireResponse {
    pub protocol: u32,
    pub compiled: bool,
    pub correct: bool,
    pub runtime_ms: Option<f64>,
    pub compiler_log: String,
    pub execution_log: String,
}

pub fn encode_request(req: &EvalRequest) -> String {
    let wire = WireRequest {
        protocol: PROTOCOL_VERSION,
        reference_source: req.reference_source.clone(),
        candidate_source: req.candidate_source.clone(),
        num_warmup: req.num_warmup,
        num_trials: req.num_trials,
        device_hint: req.device_hint.clone(),
    };
    let mut line = serde_json::to_string(&wire).expect("request serializes");
    line.push('\n');
    line
}

/// Map a response line to an outcome; any defect becomes a protocol error.
pub fn decode_response(line: &str) -> EvaluationOutcome {
    let resp: WireResponse = match serde_json::from_str(line.trim_end()) {
        Ok(r) => r,
        Err(e) => return protocol_error(format!("malformed response: {e}")),
    };
    if resp.protocol != PROTOCOL_VERSION {
        return protocol_error(format!(
            "unsupported protocol version {} (expected {PROTOCOL_VERSION})",
            resp.protocol
        ));
    }
    EvaluationOutcome::new(
        resp.compiled,
        resp.correct,
        resp.runtime_ms,
        resp.compiler_log,
        resp.execution_log,
    )
    .unwrap_or_else(|e| protocol_error(format!("inconsistent response: {e}")))
}

fn protocol_error(msg: String) -> EvaluationOutcome {
    EvaluationOutcome::compile_failure(format!("evaluator protocol error: {msg}"))
}

/// External evaluator process, one request per invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubprocessEvaluator {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    pub num_warmup: u32,
    pub num_trials: u32,
    pub timeout_s: u64,
    pub device_hint: String,
}

impl SubprocessEvaluator {
    pub fn new(command: Vec<String>) -> Self {
        let d = EvalRequest::new("", "");
        Self {
            command,
            num_warmup: d.num_warmup,
            num_trials: d.num_trials,
            timeout_s: d.timeout_s,
            device_hint: d.device_hint,
        }
    }

    pub fn request(&self, reference_source: &str, candidate_source: &str) -> EvalRequest {
        EvalRequest {
            reference_source: reference_source.to_string(),
            candidate_source: candidate_source.to_string(),
            num_warmup: self.num_warmup,
            num_trials: self.num_trials,
            timeout_s: self.timeout_s,
            device_hint: self.device_hint.clone(),
        }
    }
}

impl Evaluator for SubprocessEvaluator {
    fn evaluate(&self, reference_source: &str, candidate_source: &str) -> EvaluationOutcome {
        evaluate_subprocess(
            &self.request(reference_source, candidate_source),
            &self.command,
        )
    }
}

pub fn evaluate_subprocess(request: &EvalRequest, evaluator_cmd: &[String]) -> EvaluationOutcome {
    let Some((program, args)) = evaluator_cmd.split_first() else {
        return EvaluationOutcome::compile_failure("evaluator command is empty");
    };
    let mut child = match Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
    {
        Ok(c) => c,
        Err(e) => {
            return EvaluationOutcome::compile_failure(format!(
                "failed to launch evaluator {program}: {e}"
            ))
        }
    };

    let mut stdin = child.stdin.take().expect("stdin piped");
    let payload = encode_request(request);
    let writer = thread::spawn(move || {
        // a broken pipe here surfaces as a missing response
        let _ = stdin.write_all(payload.as_bytes());
    });
    let mut stdout = child.stdout.take().expect("stdout piped");
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut buf = Vec::new();
        let res = stdout.read_to_end(&mut buf).map(|_| buf);
        let _ = tx.send(res);
    });
    let mut stderr = child.stderr.take().expect("stderr piped");
    let err_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr.read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    });

    let output = match rx.recv_timeout(Duration::from_secs(request.timeout_s)) {
        Ok(out) => out,
        Err(_) => {
            let _ = child.kill();
            let _ = child.wait();
            return EvaluationOutcome::compile_failure(format!(
                "evaluator timeout after {} s",
                request.timeout_s
            ));
        }
    };
    let status = child.wait();
    let _ = writer.join();
    let stderr_text = err_reader.join().unwrap_or_default();

    let bytes = match output {
        Ok(b) => b,
        Err(e) => return protocol_error(format!("reading evaluator output: {e}")),
    };
    let Ok(text) = String::from_utf8(bytes) else {
        return protocol_error("response is not valid UTF-8".into());
    };
    match text.lines().find(|l| !l.trim().is_empty()) {
        Some(line) => decode_response(line),
        None => {
            let status = status.map_or_else(|e| e.to_string(), |s| s.to_string());
            let tail: String = crate::window::truncate_log(stderr_text.trim_end());
            EvaluationOutcome::compile_failure(format!(
                "evaluator exited ({status}) without a response\n{tail}"
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(script: &str) -> Vec<String> {
        vec!["sh".into(), "-c".into(), script.into()]
    }

    #[test]
    fn simulator_examples() {
        let spec = SimLandscapeSpec::default();
        let o = simulate_evaluate("class ModelNew: pass\n", &spec);
        assert_eq!(o.runtime_ms(), Some(100.0));

        let all = "// OPT:tile\n// OPT:vectorize\n// OPT:fuse\n// OPT:unroll\n";
        let expected = 100.0 * 0.6 * 0.8 * 0.7 * 0.9;
        let rt = simulate_evaluate(all, &spec).runtime_ms().unwrap();
        assert!((rt - 30.24).abs() < 1e-9 && (rt - expected).abs() < 1e-9);

        let bug = simulate_evaluate("// OPT:tile\nBUG\n", &spec);
        assert!(!bug.compiled());
    }

    #[test]
    fn simulator_duplicates_and_unknowns() {
        let spec = SimLandscapeSpec::default();
        let dup = simulate_evaluate("// OPT:tile\n  // OPT:tile\n", &spec);
        assert!(dup.compiled() && !dup.correct());
        let unknown = simulate_evaluate("// OPT:magic\n// OPT:magic\n// OPT:fuse\n", &spec);
        assert!((unknown.runtime_ms().unwrap() - 70.0).abs() < 1e-9);
    }

    #[test]
    fn simulator_order_independent() {
        let spec = SimLandscapeSpec::default();
        let a = simulate_evaluate("// OPT:unroll\n// OPT:tile\n// OPT:fuse\n", &spec);
        let b = simulate_evaluate("// OPT:fuse\n// OPT:unroll\n// OPT:tile\n", &spec);
        assert_eq!(
            a.runtime_ms().unwrap().to_bits(),
            b.runtime_ms().unwrap().to_bits()
        );
    }

    #[test]
    fn timing_summary_mean() {
        assert_eq!(timing_summary(&[10.0, 10.0, 10.0]), Ok(10.0));
        assert_eq!(timing_summary(&[1.0, 2.0, 3.0]), Ok(2.0));
        assert_eq!(timing_summary(&[]), Err(EvalError::EmptySamples));
        let base = [0.5, 1.25, 2.0, 3.75];
        let samples: Vec<f64> = (0..100).map(|i| base[i % 4]).collect();
        // 25 copies of each: (0.5 + 1.25 + 2.0 + 3.75) / 4
        assert!((timing_summary(&samples).unwrap() - 1.875).abs() < 1e-12);
    }

    #[test]
    fn request_line_layout() {
        let mut req = EvalRequest::new("ref", "cand");
        req.device_hint = "0".into();
        assert_eq!(
            encode_request(&req),
            "{\"protocol\":1,\"reference_source\":\"ref\",\"candidate_source\":\"cand\",\"num_warmup\":100,\"num_trials\":100,\"device_hint\":\"0\"}\n"
        );
        assert_eq!(req.timeout_s, 600);
    }

    #[test]
    fn stub_success() {
        let cmd = sh(
            r#"cat >/dev/null; echo '{"protocol":1,"compiled":true,"correct":true,"runtime_ms":42.0,"compiler_log":"","execution_log":"ok"}'"#,
        );
        let o = evaluate_subprocess(&EvalRequest::new("r", "c"), &cmd);
        assert!(o.compiled() && o.correct());
        assert_eq!(o.runtime_ms(), Some(42.0));
    }

    #[test]
    fn stub_timeout() {
        let mut req = EvalRequest::new("r", "c");
        req.timeout_s = 1;
        let o = evaluate_subprocess(&req, &sh("sleep 5"));
        assert!(!o.compiled());
        assert!(o.compiler_log().contains("timeout"));
    }

    #[test]
    fn stub_garbage() {
        let o = evaluate_subprocess(
            &EvalRequest::new("r", "c"),
            &sh("printf '\\377\\376garbage\\n'"),
        );
        assert!(!o.compiled());
        assert!(o.compiler_log().contains("protocol error"));
        let o = evaluate_subprocess(&EvalRequest::new("r", "c"), &sh("echo not-json"));
        assert!(o.compiler_log().contains("protocol error"));
    }

    #[test]
    fn stub_version_mismatch_and_inconsistent() {
        let o = evaluate_subprocess(
            &EvalRequest::new("r", "c"),
            &sh(
                r#"echo '{"protocol":2,"compiled":true,"correct":true,"runtime_ms":1.0,"compiler_log":"","execution_log":""}'"#,
            ),
        );
        assert!(o.compiler_log().contains("protocol error"));
        let o = decode_response(
            r#"{"protocol":1,"compiled":false,"correct":true,"runtime_ms":null,"compiler_log":"","execution_log":""}"#,
        );
        assert!(!o.compiled() && o.compiler_log().contains("protocol error"));
    }

    #[test]
    fn stub_crash_without_response() {
        let o = evaluate_subprocess(&EvalRequest::new("r", "c"), &sh("echo boom >&2; exit 3"));
        assert!(!o.compiled());
        assert!(o.compiler_log().contains("without a response"));
        assert!(o.compiler_log().contains("boom"));
    }

    #[test]
    fn missing_program() {
        let o = evaluate_subprocess(
            &EvalRequest::new("r", "c"),
            &["/nonexistent/evaluator".to_string()],
        );
        assert!(o.compiler_log().contains("failed to launch"));
    }

    #[test]
    fn stub_sees_request() {
        // evaluator echoes success only if it received the candidate text
        let cmd = sh(
            r#"read line; case "$line" in *'"candidate_source":"cand-xyz"'*) echo '{"protocol":1,"compiled":true,"correct":true,"runtime_ms":5,"compiler_log":"","execution_log":""}';; *) echo '{"protocol":1,"compiled":false,"correct":false,"runtime_ms":null,"compiler_log":"bad","execution_log":""}';; esac"#,
        );
        let o = evaluate_subprocess(&EvalRequest::new("r", "cand-xyz"), &cmd);
        assert_eq!(o.runtime_ms(), Some(5.0));
    }
}
