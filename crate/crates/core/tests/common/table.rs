use soliloquy_core::evaluation::{aggregate, judgments_from_labels, load_cases, load_labels, MetricsReport, TestCase};

use super::fixtures;

pub fn cases() -> Vec<TestCase> {
    load_cases(fixtures().join("metrics/cases.jsonl")).unwrap()
}

pub fn report() -> MetricsReport {
    let cases = cases();
    let ids: Vec<&str> = cases.iter().map(|c| c.id.as_str()).collect();
    let labels = load_labels(fixtures().join("metrics/labels.jsonl")).unwrap();
    aggregate(&judgments_from_labels(&ids, &labels))
}
