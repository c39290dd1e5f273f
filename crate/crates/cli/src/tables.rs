//! Plain-text report tables.

use std::fmt::Write as _;

use fedpath_core::federation::{HistoryRow, RunReport};
use fedpath_core::metrics::MetricsReport;
use fedpath_core::Grade;

fn pct(v: f64) -> String {
    format!("{:6.2}", 100.0 * v)
}

pub fn overall(out: &mut String, title: &str, m: &MetricsReport) {
    let _ = writeln!(out, "== {title} ==");
    let _ = writeln!(out, "{:<14}{:>8}", "samples", m.n_samples);
    let _ = writeln!(out, "{:<14}{:>8}", "accuracy %", pct(m.accuracy));
    let _ = writeln!(out, "{:<14}{:>8}", "macro F1 %", pct(m.macro_f1));
    let _ = writeln!(out, "{:<14}{:>8}", "weighted F1 %", pct(m.weighted_f1));
    out.push('\n');
}

pub fn grade_wise(out: &mut String, m: &MetricsReport) {
    let _ = writeln!(out, "== Grade-wise ==");
    let _ = writeln!(
        out,
        "{:<10}{:>12}{:>10}{:>8}{:>9}",
        "grade", "precision %", "recall %", "F1 %", "support"
    );
    for g in &m.per_grade {
        let flag = if g.undefined.is_empty() { "" } else { " *" };
        let _ = writeln!(
            out,
            "{:<10}{:>12}{:>10}{:>8}{:>9}{flag}",
            g.grade.to_string(),
            pct(g.precision),
            pct(g.recall),
            pct(g.f1),
            g.support
        );
    }
    if m.per_grade.iter().any(|g| !g.undefined.is_empty()) {
        let _ = writeln!(out, "* a rate had a zero denominator and is reported as 0");
    }
    out.push('\n');
}

pub fn confusion(out: &mut String, m: &MetricsReport) {
    let _ = writeln!(out, "== Confusion (rows true, columns predicted) ==");
    let _ = write!(out, "{:<10}", "");
    for g in Grade::ALL {
        let _ = write!(out, "{:>10}", g.to_string());
    }
    out.push('\n');
    for g in Grade::ALL {
        let _ = write!(out, "{:<10}", g.to_string());
        for c in m.confusion.counts[g.index()] {
            let _ = write!(out, "{c:>10}");
        }
        out.push('\n');
    }
    out.push('\n');
}

pub fn magnification(out: &mut String, m: &MetricsReport) {
    let _ = writeln!(out, "== Accuracy by magnification ==");
    for (mag, acc) in &m.per_magnification_accuracy {
        let _ = writeln!(out, "{:<6}{:>8}", mag.as_str(), pct(*acc));
    }
    out.push('\n');
}

pub fn comparison(out: &mut String, runs: &[&RunReport]) {
    let _ = writeln!(out, "== Federated vs centralized (test split) ==");
    let _ = writeln!(
        out,
        "{:<14}{:>12}{:>12}{:>14}{:>12}",
        "mode", "accuracy %", "macro F1 %", "weighted F1 %", "best round"
    );
    for r in runs {
        let _ = writeln!(
            out,
            "{:<14}{:>12}{:>12}{:>14}{:>12}",
            r.mode.as_str(),
            pct(r.test.accuracy),
            pct(r.test.macro_f1),
            pct(r.test.weighted_f1),
            r.best_round
        );
    }
    if let [a, b] = runs {
        let _ = writeln!(
            out,
            "accuracy gap: {:+.2} points",
            100.0 * (a.test.accuracy - b.test.accuracy)
        );
    }
    out.push('\n');
}

pub fn history(out: &mut String, rows: &[HistoryRow]) {
    let _ = writeln!(out, "== Rounds ==");
    let _ = writeln!(
        out,
        "{:>5}{:>12}{:>10}{:>10}{:>6}",
        "round", "train loss", "val acc %", "val F1 %", "best"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:>5}{:>12.4}{:>10}{:>10}{:>6}",
            r.round,
            r.train_loss_mean,
            pct(r.val_accuracy),
            pct(r.val_macro_f1),
            r.best_round
        );
    }
    out.push('\n');
}

/// Every table for one run, plus the comparison when a second run is given.
pub fn render(report: &RunReport, compare: Option<&RunReport>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "run {} ({}), evaluated round {} of {}\n",
        report.run_id,
        report.mode.as_str(),
        report.evaluated_round,
        report.rounds_completed
    );
    overall(&mut out, "Test", &report.test);
    grade_wise(&mut out, &report.test);
    confusion(&mut out, &report.test);
    magnification(&mut out, &report.test);
    if let Some(other) = compare {
        comparison(&mut out, &[report, other]);
    }
    history(&mut out, &report.history);
    out
}
