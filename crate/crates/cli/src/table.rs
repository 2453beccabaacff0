//! Comparison grid over several metric reports.

use owas::metrics::{MetricReport, REPORT_KEYS};

const COLUMNS: [(&str, &str); 7] = [
    ("ACC", "acc_close"),
    ("F1@10", "f1@10"),
    ("F1@25", "f1@25"),
    ("F1@50", "f1@50"),
    ("AUROC", "auroc"),
    ("ACC_OOD", "acc_ood"),
    ("h", "h_score"),
];

/// Aligned text grid, one row per report labelled by its `scenario` field.
pub fn render(rows: &[MetricReport]) -> String {
    let cell = |r: &MetricReport, key: &str| r.get(key).map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
    let label_width = rows.iter().map(|r| r.scenario.len()).chain(["Config".len()]).max().unwrap_or(6);
    let widths: Vec<usize> = COLUMNS
        .iter()
        .map(|(title, key)| rows.iter().map(|r| cell(r, key).len()).chain([title.len()]).max().unwrap_or(0))
        .collect();
    let mut out = format!("{:<label_width$}", "Config");
    for ((title, _), w) in COLUMNS.iter().zip(&widths) {
        out += &format!("  {title:>w$}");
    }
    out.push('\n');
    let rule = label_width + widths.iter().map(|w| w + 2).sum::<usize>();
    out += &"-".repeat(rule);
    out.push('\n');
    for r in rows {
        out += &format!("{:<label_width$}", r.scenario);
        for ((_, key), w) in COLUMNS.iter().zip(&widths) {
            out += &format!("  {:>w$}", cell(r, key));
        }
        out.push('\n');
    }
    out
}

/// Same rows as CSV with every report column, readable by
/// [`MetricReport::from_csv`].
pub fn to_csv(rows: &[MetricReport]) -> String {
    let mut out = format!("config,{}\n", REPORT_KEYS.join(","));
    for r in rows {
        out += &r.to_csv_row();
        out.push('\n');
    }
    out
}
