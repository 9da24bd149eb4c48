use std::collections::BTreeSet;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{Method, RunConfig};
use crate::error::{Error, Result};

pub const REPORT_SCHEMA: &str = "nmr-report/1";
pub const BENCH_SCHEMA: &str = "nmr-bench/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRow {
    pub seed: u64,
    pub best_epoch: usize,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// One method on one source model, aggregated over seeds. Serialized as a
/// single JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema: String,
    pub method: Method,
    /// Source architecture name, or `none` for methods without one.
    pub model: String,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seeds: Vec<SeedRow>,
    pub mean_test_acc: f64,
    /// Sample standard deviation; absent for a single seed.
    pub std_test_acc: Option<f64>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub source_checksum_before: Option<String>,
    pub source_checksum_after: Option<String>,
    /// Filled in by benchmarking; training reports leave it empty so they
    /// stay reproducible byte for byte.
    pub seconds_per_epoch: Option<f64>,
}

/// Mean and sample standard deviation (`n - 1` denominator).
pub fn aggregate(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

impl RunReport {
    pub fn new(
        cfg: &RunConfig,
        model: &str,
        seeds: Vec<SeedRow>,
        (trainable_params, total_params): (usize, usize),
        before: String,
        after: String,
    ) -> Self {
        let accs: Vec<f64> = seeds.iter().map(|r| r.test_acc).collect();
        let (mean_test_acc, std_test_acc) = aggregate(&accs);
        let uses_source = cfg.method.uses_source();
        Self {
            schema: REPORT_SCHEMA.into(),
            method: cfg.method,
            model: if uses_source { model.into() } else { "none".into() },
            epochs: cfg.epochs,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            seeds,
            mean_test_acc,
            std_test_acc,
            trainable_params,
            total_params,
            source_checksum_before: uses_source.then_some(before),
            source_checksum_after: uses_source.then_some(after),
            seconds_per_epoch: None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Parses JSON-lines text, rejecting unknown schemas.
    pub fn parse_lines(text: &str) -> Result<Vec<RunReport>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let r: RunReport = serde_json::from_str(l).map_err(|e| Error::format(format!("line {}", i + 1), e.to_string()))?;
                if r.schema != REPORT_SCHEMA {
                    return Err(Error::format(
                        format!("line {}.schema", i + 1),
                        format!("expected `{REPORT_SCHEMA}`, got `{}`", r.schema),
                    ));
                }
                Ok(r)
            })
            .collect()
    }

    fn accuracy_cell(&self) -> String {
        if self.seeds.is_empty() {
            return "-".into();
        }
        match self.std_test_acc {
            Some(s) => format!("{:.1} ± {:.1}", 100.0 * self.mean_test_acc, 100.0 * s),
            None => format!("{:.1}", 100.0 * self.mean_test_acc),
        }
    }
}

/// Epoch timing of one method on one source model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchRecord {
    pub schema: String,
    pub method: Method,
    pub model: String,
    /// Median of `samples`.
    pub seconds_per_epoch: f64,
    pub samples: Vec<f64>,
    pub trainable_params: usize,
    pub total_params: usize,
}

/// Reads a mix of report and bench lines and attaches each bench timing to
/// the reports of the same method and model. Bench lines without a matching
/// report become reports without accuracy seeds.
pub fn read_records(text: &str) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    let mut benches = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let field = |f: &str| format!("line {}{f}", i + 1);
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::format(field(""), e.to_string()))?;
        match value.get("schema").and_then(|s| s.as_str()) {
            Some(REPORT_SCHEMA) => reports.push(
                serde_json::from_value::<RunReport>(value).map_err(|e| Error::format(field(""), e.to_string()))?,
            ),
            Some(BENCH_SCHEMA) => benches.push(
                serde_json::from_value::<BenchRecord>(value).map_err(|e| Error::format(field(""), e.to_string()))?,
            ),
            other => {
                return Err(Error::format(
                    field(".schema"),
                    format!("expected `{REPORT_SCHEMA}` or `{BENCH_SCHEMA}`, got {other:?}"),
                ))
            }
        }
    }
    for b in benches {
        let mut matched = false;
        for r in reports.iter_mut().filter(|r| r.method == b.method && r.model == b.model) {
            r.seconds_per_epoch = Some(b.seconds_per_epoch);
            matched = true;
        }
        if !matched {
            reports.push(RunReport {
                schema: REPORT_SCHEMA.into(),
                method: b.method,
                model: b.model,
                epochs: 0,
                lr: 0.0,
                batch_size: 0,
                seeds: vec![],
                mean_test_acc: f64::NAN,
                std_test_acc: None,
                trainable_params: b.trainable_params,
                total_params: b.total_params,
                source_checksum_before: None,
                source_checksum_after: None,
                seconds_per_epoch: Some(b.seconds_per_epoch),
            });
        }
    }
    Ok(reports)
}

fn table(out: &mut String, title: &str, header: &[String], rows: &[Vec<String>]) {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{}", line(header));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-"));
    for r in rows {
        let _ = writeln!(out, "{}", line(r));
    }
}

/// Accuracy table (methods × source models, mean ± std in percent) and a
/// parameter/speed table. Rows follow II, ID, IDS, then baselines.
pub fn render_tables(reports: &[RunReport]) -> String {
    let mut sorted: Vec<&RunReport> = reports.iter().collect();
    sorted.sort_by(|a, b| (a.method, &a.model).cmp(&(b.method, &b.model)));
    let models: Vec<String> = sorted
        .iter()
        .map(|r| r.model.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let methods: Vec<Method> = sorted.iter().map(|r| r.method).collect::<BTreeSet<_>>().into_iter().collect();

    let mut out = String::new();
    let header: Vec<String> = std::iter::once("Method".to_string()).chain(models.iter().cloned()).collect();
    let rows: Vec<Vec<String>> = methods
        .iter()
        .map(|&m| {
            std::iter::once(m.label().to_string())
                .chain(models.iter().map(|model| {
                    sorted
                        .iter()
                        .rev()
                        .find(|r| r.method == m && &r.model == model)
                        .map_or("-".into(), |r| r.accuracy_cell())
                }))
                .collect()
        })
        .collect();
    table(&mut out, "Test accuracy (%)", &header, &rows);
    out.push('\n');

    let header: Vec<String> = ["Method", "Model", "Trainable", "Total", "s/epoch"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = sorted
        .iter()
        .map(|r| {
            vec![
                r.method.label().into(),
                r.model.clone(),
                r.trainable_params.to_string(),
                r.total_params.to_string(),
                r.seconds_per_epoch.map_or("-".into(), |s| format!("{s:.3}")),
            ]
        })
        .collect();
    table(&mut out, "Parameters and training speed", &header, &rows);
    out
}
