use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{paired_t_test, MetricsError, MetricsReport};

/// Per-seed reports of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRuns {
    pub name: String,
    pub reports: Vec<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    /// Sample standard deviation over seeds, 0 for a single seed.
    pub std: f64,
    pub values: Vec<f64>,
    /// Two-sided paired t-test p-value against the baseline row.
    pub p_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub metrics: Vec<String>,
    pub methods: Vec<String>,
    /// `cells[method][metric]`.
    pub cells: Vec<Vec<Cell>>,
    pub baseline: usize,
}

/// Relative change in percent, signed so that positive means better.
pub fn improvement_percent(old: f64, new: f64, lower_is_better: bool) -> f64 {
    let delta = if lower_is_better { old - new } else { new - old };
    delta / old.abs() * 100.0
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Mean ± std per method and metric, with paired t-tests against `baseline`
/// whenever both rows have the same number (≥ 2) of seeds.
pub fn aggregate(runs: &[MethodRuns], baseline: usize, metrics: &[&str]) -> Result<Table, MetricsError> {
    if runs.is_empty() || baseline >= runs.len() {
        return Err(MetricsError::Usage("no baseline row".into()));
    }
    if let Some(r) = runs.iter().find(|r| r.reports.is_empty()) {
        return Err(MetricsError::Usage(format!("method {} has no runs", r.name)));
    }
    let column = |r: &MethodRuns, m: &str| -> Result<Vec<f64>, MetricsError> {
        r.reports
            .iter()
            .map(|rep| rep.get(m).ok_or_else(|| MetricsError::Usage(format!("unknown metric {m}"))))
            .collect()
    };
    let mut cells = Vec::with_capacity(runs.len());
    for (i, r) in runs.iter().enumerate() {
        let mut row = Vec::with_capacity(metrics.len());
        for m in metrics {
            let values = column(r, m)?;
            let base = column(&runs[baseline], m)?;
            let p_value = if i != baseline && values.len() == base.len() && values.len() >= 2 {
                Some(paired_t_test(&values, &base)?.p)
            } else {
                None
            };
            let (mean, std) = mean_std(&values);
            row.push(Cell {
                mean,
                std,
                values,
                p_value,
            });
        }
        cells.push(row);
    }
    Ok(Table {
        metrics: metrics.iter().map(|m| m.to_string()).collect(),
        methods: runs.iter().map(|r| r.name.clone()).collect(),
        cells,
        baseline,
    })
}

/// Markdown table with mean ± std, significance stars and one relative
/// improvement row per non-baseline method.
pub fn render_markdown(table: &Table) -> String {
    let mut out = String::new();
    let header: Vec<String> = table.metrics.iter().map(|m| {
        if MetricsReport::lower_is_better(m) { format!("{m} ↓") } else { m.clone() }
    }).collect();
    let _ = writeln!(out, "| Method | {} |", header.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(table.metrics.len()));
    for (name, row) in table.methods.iter().zip(&table.cells) {
        let cells: Vec<String> = row
            .iter()
            .map(|c| {
                let stars = c.p_value.map_or("", significance_stars);
                format!("{:.4} ± {:.4}{stars}", c.mean, c.std)
            })
            .collect();
        let _ = writeln!(out, "| {name} | {} |", cells.join(" | "));
    }
    let base = &table.cells[table.baseline];
    for (i, (name, row)) in table.methods.iter().zip(&table.cells).enumerate() {
        if i == table.baseline {
            continue;
        }
        let imp: Vec<String> = row
            .iter()
            .zip(base)
            .zip(&table.metrics)
            .map(|((c, b), m)| {
                let v = improvement_percent(b.mean, c.mean, MetricsReport::lower_is_better(m));
                if v.is_finite() { format!("{v:+.2}%") } else { "n/a".into() }
            })
            .collect();
        let _ = writeln!(out, "| Improv. ({name}) | {} |", imp.join(" | "));
    }
    let _ = writeln!(out, "\nmean ± sample std over seeds; * p < 0.05, ** p < 0.01 (two-sided paired t-test against {}).", table.methods[table.baseline]);
    out
}

/// One line per method and metric: `method,metric,mean,std,p_value,improvement_percent`.
pub fn render_csv(table: &Table) -> String {
    let mut out = String::from("method,metric,mean,std,p_value,improvement_percent\n");
    let base = &table.cells[table.baseline];
    for (i, (name, row)) in table.methods.iter().zip(&table.cells).enumerate() {
        for ((c, b), m) in row.iter().zip(base).zip(&table.metrics) {
            let p = c.p_value.map_or(String::new(), |p| format!("{p}"));
            let v = improvement_percent(b.mean, c.mean, MetricsReport::lower_is_better(m));
            // empty when there is no baseline to compare against
            let imp = if i == table.baseline || !v.is_finite() { String::new() } else { format!("{v}") };
            let _ = writeln!(out, "{name},{m},{},{},{p},{imp}", c.mean, c.std);
        }
    }
    out
}
