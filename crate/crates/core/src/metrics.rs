//! Benchmark metrics over finished runs and their report tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::orchestrator::RunReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub baseline_runtime_ms: f64,
    pub best_runtime_ms: Option<f64>,
    /// (compiled, correct) per attempt.
    pub attempts: Vec<(bool, bool)>,
}

impl TaskResult {
    pub fn from_report(report: &RunReport) -> Self {
        Self {
            task_id: report.task_id.clone(),
            baseline_runtime_ms: report.baseline_runtime_ms,
            best_runtime_ms: report.best_runtime_ms,
            attempts: report.attempt_flags(),
        }
    }

    fn has_correct(&self) -> bool {
        self.best_runtime_ms.is_some() || self.attempts.iter().any(|&(_, c)| c)
    }
}

fn fraction(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

/// Tasks whose best correct kernel is at least as fast as the baseline.
pub fn fast1(results: &[TaskResult]) -> f64 {
    let n = results
        .iter()
        .filter(|r| {
            r.best_runtime_ms
                .is_some_and(|b| b <= r.baseline_runtime_ms)
        })
        .count();
    fraction(n, results.len())
}

/// Tasks with at least one correct attempt.
pub fn success_rate(results: &[TaskResult]) -> f64 {
    fraction(
        results.iter().filter(|r| r.has_correct()).count(),
        results.len(),
    )
}

fn pooled(results: &[TaskResult], pick: impl Fn(&(bool, bool)) -> bool) -> Option<f64> {
    let total: usize = results.iter().map(|r| r.attempts.len()).sum();
    if total == 0 {
        return None;
    }
    let hits: usize = results
        .iter()
        .map(|r| r.attempts.iter().filter(|a| pick(a)).count())
        .sum();
    Some(fraction(hits, total))
}

/// Compiled attempts over all attempts pooled across tasks.
pub fn compile_rate(results: &[TaskResult]) -> Option<f64> {
    pooled(results, |&(compiled, _)| compiled)
}

/// Correct attempts over all attempts pooled across tasks.
pub fn correct_rate(results: &[TaskResult]) -> Option<f64> {
    pooled(results, |&(_, correct)| correct)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedSummary {
    /// Mean of baseline / best over the included tasks.
    pub mean: Option<f64>,
    pub included: Vec<String>,
    /// Tasks without a correct kernel.
    pub excluded: Vec<String>,
}

pub fn speed_ratio(results: &[TaskResult]) -> SpeedSummary {
    let mut ratios = Vec::new();
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for r in results {
        match r.best_runtime_ms {
            Some(best) if best > 0.0 => {
                ratios.push(r.baseline_runtime_ms / best);
                included.push(r.task_id.clone());
            }
            _ => excluded.push(r.task_id.clone()),
        }
    }
    let mean = if ratios.is_empty() {
        None
    } else {
        Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
    };
    SpeedSummary {
        mean,
        included,
        excluded,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub agent: String,
    pub success: f64,
    pub fast1: f64,
    pub speed: Option<f64>,
    pub speed_tasks: SpeedSummary,
    pub compile_rate: Option<f64>,
    pub correct_rate: Option<f64>,
    pub tasks: Vec<TaskResult>,
}

impl MetricSet {
    pub fn compute(agent: impl Into<String>, results: &[TaskResult]) -> Self {
        let mut tasks = results.to_vec();
        tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        let speed_tasks = speed_ratio(&tasks);
        Self {
            agent: agent.into(),
            success: success_rate(&tasks),
            fast1: fast1(&tasks),
            speed: speed_tasks.mean,
            speed_tasks,
            compile_rate: compile_rate(&tasks),
            correct_rate: correct_rate(&tasks),
            tasks,
        }
    }
}

/// One decimal, a trailing `.0` dropped: `71.4%`, `100%`.
pub fn format_percent(fraction: f64) -> String {
    let s = format!("{:.1}", fraction * 100.0);
    let s = s.strip_suffix(".0").unwrap_or(&s);
    format!("{s}%")
}

/// Two decimals with a multiplication sign: `3.03×`.
pub fn format_speed(ratio: f64) -> String {
    format!("{ratio:.2}×")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

fn opt(v: Option<f64>, f: fn(f64) -> String) -> String {
    v.map_or_else(|| "n/a".to_string(), f)
}

/// Report over one metric set per agent, ordered by agent name.
pub fn render_report(sets: &[MetricSet], format: ReportFormat) -> String {
    let mut sets = sets.to_vec();
    sets.sort_by(|a, b| a.agent.cmp(&b.agent));
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&sets).expect("metrics serialize");
            s.push('\n');
            s
        }
        ReportFormat::Text => {
            let width = sets
                .iter()
                .map(|s| s.agent.chars().count())
                .max()
                .unwrap_or(0)
                .max(5);
            let mut out = String::new();
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}",
                "Agent", "Success", "Fast1", "Speed", "Tasks"
            );
            for s in &sets {
                let coverage = format!(
                    "{}/{}",
                    s.speed_tasks.included.len(),
                    s.speed_tasks.included.len() + s.speed_tasks.excluded.len()
                );
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}",
                    s.agent,
                    format_percent(s.success),
                    format_percent(s.fast1),
                    opt(s.speed, format_speed),
                    coverage
                );
            }
            out.push('\n');
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>8}",
                "Agent", "Compile", "Correct"
            );
            for s in &sets {
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>8}  {:>8}",
                    s.agent,
                    opt(s.compile_rate, format_percent),
                    opt(s.correct_rate, format_percent)
                );
            }
            out
        }
    }
}

/// Parse the JSON form of [`render_report`].
pub fn parse_report(json: &str) -> Result<Vec<MetricSet>, serde_json::Error> {
    serde_json::from_str(json)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(id: &str, baseline: f64, best: Option<f64>, attempts: &[(bool, bool)]) -> TaskResult {
        TaskResult {
            task_id: id.into(),
            baseline_runtime_ms: baseline,
            best_runtime_ms: best,
            attempts: attempts.to_vec(),
        }
    }

    #[test]
    fn fast1_boundary_counts_equal() {
        let r = [task("a", 10.0, Some(10.0), &[(true, true)])];
        assert_eq!(fast1(&r), 1.0);
        let r = [task("a", 10.0, None, &[(false, false)])];
        assert_eq!(fast1(&r), 0.0);
    }

    #[test]
    fn success_and_pooled_rates() {
        let r = [
            task("a", 1.0, Some(1.0), &[(true, true), (false, false)]),
            task("b", 1.0, None, &[]),
        ];
        assert_eq!(success_rate(&r), 0.5);
        assert_eq!(compile_rate(&r), Some(0.5));
        assert_eq!(correct_rate(&r), Some(0.5));
        assert_eq!(compile_rate(&[task("b", 1.0, None, &[])]), None);
    }

    #[test]
    fn speed_mean_and_exclusion() {
        let r = [
            task("a", 4.0, Some(2.0), &[(true, true)]),
            task("b", 8.0, Some(2.0), &[(true, true)]),
            task("c", 8.0, None, &[(false, false)]),
        ];
        let s = speed_ratio(&r);
        assert_eq!(s.mean, Some(3.0));
        assert_eq!(s.excluded, vec!["c".to_string()]);
    }

    #[test]
    fn formatting() {
        assert_eq!(format_percent(10.0 / 14.0), "71.4%");
        assert_eq!(format_percent(1.0), "100%");
        assert_eq!(format_percent(0.0), "0%");
        assert_eq!(format_speed(3.03), "3.03×");
    }

    #[test]
    fn json_round_trip() {
        let set = MetricSet::compute("stark", &[task("a", 2.0, Some(1.0), &[(true, true)])]);
        let json = render_report(std::slice::from_ref(&set), ReportFormat::Json);
        assert_eq!(parse_report(&json).unwrap(), vec![set]);
    }
}
