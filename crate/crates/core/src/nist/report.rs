//! Test-by-condition report rendering.

use std::fmt::Write;

use super::{BatteryReport, TestKind, Verdict};

fn cell(report: &BatteryReport, test: TestKind) -> String {
    match report.get(test).map(|e| &e.verdict) {
        Some(Verdict::Ran(r)) if r.pass => format!("{:.4}", r.min_p()),
        Some(Verdict::Ran(_)) => "-".into(),
        Some(Verdict::Skipped { .. }) => "n/a".into(),
        None => String::new(),
    }
}

fn tests_of(conditions: &[(&str, &BatteryReport)]) -> Vec<TestKind> {
    let mut tests: Vec<TestKind> = Vec::new();
    for (_, r) in conditions {
        for e in &r.entries {
            if !tests.contains(&e.test) {
                tests.push(e.test);
            }
        }
    }
    tests
}

/// Long-form CSV: one row per condition and test.
///
/// Columns: condition, test, status (pass | fail | skipped), min_p,
/// p_values (`;`-separated), stream_bits, note.
pub fn render_csv(conditions: &[(&str, &BatteryReport)]) -> String {
    let mut out = String::from("condition,test,status,min_p,p_values,stream_bits,note\n");
    for (name, report) in conditions {
        for e in &report.entries {
            let (status, min_p, ps, note) = match &e.verdict {
                Verdict::Ran(r) => (
                    if r.pass { "pass" } else { "fail" },
                    format!("{}", r.min_p()),
                    r.p_values.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(";"),
                    r.detail
                        .iter()
                        .map(|(k, v)| format!("{k}={v}"))
                        .collect::<Vec<_>>()
                        .join(" "),
                ),
                Verdict::Skipped { reason } => ("skipped", String::new(), String::new(), reason.clone()),
            };
            let _ = writeln!(
                out,
                "{name},{},{status},{min_p},{ps},{},\"{}\"",
                e.test,
                report.stream_bits,
                note.replace('"', "'")
            );
        }
    }
    out
}

/// Aligned text table with one column per condition. Passing tests show
/// their smallest p-value, failures `-`, inapplicable tests `n/a`.
pub fn render_table(conditions: &[(&str, &BatteryReport)]) -> String {
    let tests = tests_of(conditions);
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("Test".to_string())
        .chain(conditions.iter().map(|(n, _)| n.to_string()))
        .collect()];
    for &t in &tests {
        rows.push(
            std::iter::once(t.name().to_string())
                .chain(conditions.iter().map(|(_, r)| cell(r, t)))
                .collect(),
        );
    }
    rows.push(
        std::iter::once("Passed".to_string())
            .chain(conditions.iter().map(|(_, r)| format!("{}/{}", r.pass_count(), r.entries.len())))
            .collect(),
    );
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();

    let mut out = String::new();
    for (name, r) in conditions {
        let _ = writeln!(out, "# {name}: {} bits, {} ones", r.stream_bits, r.ones);
    }
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 || i == tests.len() {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    out
}
