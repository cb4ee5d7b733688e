//! Commands behind the `duoheap` binary.

use std::fs::File;
use std::path::Path;

use duoheap::config::parse_size;
use duoheap::workload::{generate_trace, Profile, TraceError};
use duoheap::{run_trace, HeapError, MetricsReport, RunMode, RuntimeConfig, Trace, WriteMode};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Heap(#[from] HeapError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

pub const SWEEP_PARAMS: [&str; 5] = ["card_segment", "stripe_size", "h1_size", "write_strategy", "mode"];

fn load_trace(cfg: &RuntimeConfig) -> Result<Trace, CliError> {
    let text = std::fs::read_to_string(&cfg.trace).map_err(io_err(&cfg.trace))?;
    Ok(Trace::parse(&text)?)
}

fn create(path: &Path) -> Result<csv::Writer<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(csv::Writer::from_writer(File::create(path).map_err(io_err(path))?))
}

/// Runs the configured trace and writes a one-row CSV to the metrics path.
pub fn cmd_run(config: &Path) -> Result<MetricsReport, CliError> {
    let cfg = RuntimeConfig::load(config).map_err(|e| match e {
        HeapError::Io(source) => CliError::Io { path: config.display().to_string(), source },
        e => e.into(),
    })?;
    let trace = load_trace(&cfg)?;
    let report = run_trace(&trace, &cfg)?;
    let mut w = create(&cfg.metrics)?;
    w.write_record(MetricsReport::header())?;
    w.write_record(report.columns().into_iter().map(|(_, v)| v))?;
    w.flush().map_err(io_err(&cfg.metrics))?;
    Ok(report)
}

/// Applies one sweep value to a copy of `base`.
pub fn apply_param(base: &RuntimeConfig, param: &str, value: &str) -> Result<RuntimeConfig, CliError> {
    let mut c = base.clone();
    let size = || {
        parse_size(value).ok_or_else(|| CliError::Usage(format!("{param}: {value:?} is not a size")))
    };
    match param {
        "card_segment" => c.h2.card_segment = size()?,
        "stripe_size" => c.h2.stripe_size = size()?,
        "h1_size" => {
            let total = size()?;
            let seg = c.h1.card_segment;
            let young = (total * c.h1.young_size / c.h1.total()).next_multiple_of(seg);
            c.h1.young_size = young;
            c.h1.old_size = total.saturating_sub(young);
        }
        "write_strategy" => {
            c.migration.mode = match value {
                "direct" | "direct_copy" => WriteMode::Direct,
                "batched" | "batched_async" => WriteMode::Batched,
                _ => return Err(CliError::Usage(format!("write_strategy: unknown value {value:?}"))),
            }
        }
        "mode" => c.mode = value.parse::<RunMode>().map_err(CliError::Usage)?,
        _ => {
            return Err(CliError::Usage(format!(
                "unknown sweep parameter {param:?} (expected one of {})",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    c.run_id = Some(format!("{param}={value}"));
    c.validate()?;
    Ok(c)
}

/// Ratio of each work counter to the first run's value. Empty when the
/// first run's counter is zero.
pub fn normalized(reports: &[MetricsReport]) -> Vec<Vec<(String, String)>> {
    let Some(first) = reports.first() else { return Vec::new() };
    let base: Vec<(&str, String)> = first.columns();
    reports
        .iter()
        .map(|r| {
            r.columns()
                .into_iter()
                .zip(&base)
                .filter(|((k, _), _)| MetricsReport::is_work_counter(k))
                .map(|((k, v), (_, b))| {
                    let (v, b): (f64, f64) = (v.parse().unwrap_or(0.0), b.parse().unwrap_or(0.0));
                    let cell = if b == 0.0 { String::new() } else { format!("{:.6}", v / b) };
                    (format!("norm_{k}"), cell)
                })
                .collect()
        })
        .collect()
}

/// One run per value with the base seed; writes raw and normalized columns.
pub fn cmd_sweep(config: &Path, param: &str, values: &[String]) -> Result<Vec<MetricsReport>, CliError> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let base = RuntimeConfig::load(config).map_err(|e| match e {
        HeapError::Io(source) => CliError::Io { path: config.display().to_string(), source },
        e => e.into(),
    })?;
    let configs = values.iter().map(|v| apply_param(&base, param, v)).collect::<Result<Vec<_>, _>>()?;
    let trace = load_trace(&base)?;
    let mut reports = Vec::new();
    for c in &configs {
        reports.push(run_trace(&trace, c)?);
    }
    let norm = normalized(&reports);
    let mut w = create(&base.metrics)?;
    let mut header: Vec<String> = MetricsReport::header().into_iter().map(String::from).collect();
    header.push("param".into());
    header.push("value".into());
    header.extend(norm[0].iter().map(|(k, _)| k.clone()));
    w.write_record(&header)?;
    for ((r, v), n) in reports.iter().zip(values).zip(&norm) {
        let mut row: Vec<String> = r.columns().into_iter().map(|(_, v)| v).collect();
        row.push(param.to_string());
        row.push(v.clone());
        row.extend(n.iter().map(|(_, c)| c.clone()));
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(&base.metrics))?;
    Ok(reports)
}

pub fn cmd_gen_trace(profile: &str, scale: u32, seed: u64, out: &Path) -> Result<Trace, CliError> {
    let profile: Profile = profile.parse().map_err(CliError::Usage)?;
    let trace = generate_trace(profile, scale, seed);
    std::fs::write(out, trace.to_string()).map_err(io_err(out))?;
    Ok(trace)
}
