//! Command implementations.

use crate::config::RunConfig;
use heckmi::data::TabularDataset;
use heckmi::error::Error;
use heckmi::mice::{classify_clusters, impute_chained, impute_univariate, EngineOptions, MIDataset};
use heckmi::numerics::RngStream;
use heckmi::sim::{run_scenario, MetricsReport, ScenarioMetrics};
use serde_json::json;
use std::io::Write as _;
use std::path::Path;

fn build_pool(workers: Option<usize>) -> Result<rayon::ThreadPool, Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
}

fn ensure_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serialize: {e}")))?;
    std::fs::write(path, text.as_bytes())
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
pub fn impute(
    data_path: &Path,
    config_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    workers: Option<usize>,
    m_override: Option<usize>,
    dry_run: bool,
) -> Result<(), Error> {
    let config = RunConfig::from_path(config_path)?;
    let imp = config
        .imputation
        .as_ref()
        .ok_or_else(|| Error::Config("config has no `imputation` section".into()))?;
    let mut data = TabularDataset::from_csv_path(data_path, &imp.cluster_column)?;
    // normalize binary targets up front so validation sees coding problems
    for spec in &imp.specs {
        spec.validate()?;
        if spec.family == heckmi::heckman::Family::Binary {
            data.normalize_binary_column(&spec.target)?;
        }
    }
    // full validation pass: resolve every spec and classify clusters
    for spec in &imp.specs {
        let part = classify_clusters(&data, spec)?;
        log::info!(
            "spec {}: {} estimable clusters, {} fallback",
            spec.target,
            part.estimable.len(),
            part.fallback.len()
        );
    }
    if dry_run {
        println!("dry run: configuration and data validated");
        return Ok(());
    }

    let opts = EngineOptions {
        m: m_override.unwrap_or(imp.m),
        iterations: imp.iterations,
        psi_structure: imp.psi_structure,
    };
    let rng = RngStream::new(seed.unwrap_or(config.seed));
    let pool = build_pool(workers.or(config.workers))?;
    let mi: MIDataset = pool.install(|| {
        if imp.specs.len() == 1 {
            impute_univariate(&data, &imp.specs[0], &opts, &rng)
        } else {
            impute_chained(&data, &imp.specs, &opts, &rng)
        }
    })?;

    ensure_dir(out_dir)?;
    for (k, table) in mi.completed.iter().enumerate() {
        let path = out_dir.join(format!("imp_{}.csv", k + 1));
        table.write_csv_path(&path)?;
    }
    let report = json!({
        "master_seed": mi.provenance.master_seed,
        "m": mi.m,
        "iterations": if imp.specs.len() == 1 { serde_json::Value::Null } else { json!(imp.iterations) },
        "specs": mi.provenance.specs,
        "diagnostics": mi.provenance.diagnostics,
        "chain_means": mi.provenance.chain_means,
    });
    write_json(&out_dir.join("imputation_report.json"), &report)?;
    println!(
        "wrote {} imputations and imputation_report.json to {}",
        mi.m,
        out_dir.display()
    );
    Ok(())
}

fn format_cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Long-format metrics rows. Wall-clock timings are deliberately excluded:
/// metrics.csv is byte-reproducible under a fixed seed, timings live in
/// metrics.json.
fn metrics_csv(scenarios: &[ScenarioMetrics]) -> String {
    let mut out = String::from("scenario,method,estimand,measure,value,mcse\n");
    for sc in scenarios {
        for m in &sc.methods {
            for e in &m.estimands {
                let mut push = |measure: &str, value: f64, mcse: Option<f64>| {
                    out.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        sc.name,
                        m.method,
                        e.estimand,
                        measure,
                        format_cell(value),
                        mcse.map(format_cell).unwrap_or_default()
                    ));
                };
                push("bias", e.bias, Some(e.bias_mcse));
                push("emp_se", e.emp_se, None);
                push("rmse", e.rmse, None);
                if let Some(c) = e.coverage {
                    push("coverage", c, e.coverage_mcse);
                }
                if let Some(w) = e.mean_ci_width {
                    push("ci_width", w, None);
                }
            }
            out.push_str(&format!(
                "{},{},(all),run_fraction,{},\n",
                sc.name, m.method, m.run_fraction
            ));
        }
    }
    out
}

/// Tidy per-figure plot data: every (scenario, method, estimand, measure)
/// value together with the scenario design coordinates, enough to rebuild
/// bias/coverage/width/RMSE panels over the rho grid, the size grid, or the
/// error-model deviations.
fn plot_csv(scenarios: &[ScenarioMetrics]) -> String {
    let mut out = String::from(
        "scenario,family,error_model,rho,n_clusters,cluster_size,method,estimand,measure,value\n",
    );
    for sc in scenarios {
        let family = serde_json::to_value(sc.family).unwrap();
        let error_model = serde_json::to_value(sc.error_model).unwrap();
        for m in &sc.methods {
            for e in &m.estimands {
                let mut push = |measure: &str, value: Option<f64>| {
                    if let Some(v) = value {
                        out.push_str(&format!(
                            "{},{},{},{},{},{},{},{},{},{}\n",
                            sc.name,
                            family.as_str().unwrap(),
                            error_model.as_str().unwrap(),
                            sc.rho,
                            sc.n_clusters,
                            sc.cluster_size,
                            m.method,
                            e.estimand,
                            measure,
                            format_cell(v)
                        ));
                    }
                };
                push("bias", Some(e.bias));
                push("rmse", Some(e.rmse));
                push("coverage", e.coverage);
                push("ci_width", e.mean_ci_width);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn simulate(
    config_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    workers: Option<usize>,
    reps: Option<usize>,
    m_override: Option<usize>,
    emit_plot_data: bool,
    dry_run: bool,
) -> Result<(), Error> {
    let config = RunConfig::from_path(config_path)?;
    let sim = config
        .simulation
        .as_ref()
        .ok_or_else(|| Error::Config("config has no `simulation` section".into()))?;
    let mut scenarios = sim.scenarios.clone();
    for (i, sc) in scenarios.iter_mut().enumerate() {
        if let Some(s) = seed {
            sc.seed = s + i as u64;
        }
        if let Some(r) = reps {
            sc.n_reps = r;
        }
        if let Some(m) = m_override {
            sc.m = m;
        }
        sc.validate()?;
    }
    if dry_run {
        println!("dry run: {} scenario(s) validated", scenarios.len());
        return Ok(());
    }

    let pool = build_pool(workers.or(config.workers))?;
    let mut report = MetricsReport::default();
    for sc in &scenarios {
        log::info!("running scenario {} ({} replicates)", sc.name, sc.n_reps);
        let metrics = pool.install(|| run_scenario(sc))?;
        report.scenarios.push(metrics);
    }

    ensure_dir(out_dir)?;
    let value = serde_json::to_value(&report).map_err(|e| Error::Data(format!("serialize: {e}")))?;
    write_json(&out_dir.join("metrics.json"), &value)?;
    let csv = metrics_csv(&report.scenarios);
    std::fs::write(out_dir.join("metrics.csv"), csv.as_bytes())
        .map_err(|e| Error::Data(format!("cannot write metrics.csv: {e}")))?;
    if emit_plot_data {
        let plot = plot_csv(&report.scenarios);
        std::fs::write(out_dir.join("plot_data.csv"), plot.as_bytes())
            .map_err(|e| Error::Data(format!("cannot write plot_data.csv: {e}")))?;
    }
    println!(
        "wrote metrics.json and metrics.csv{} to {}",
        if emit_plot_data { " and plot_data.csv" } else { "" },
        out_dir.display()
    );
    Ok(())
}

/// Raw name-indexed CSV columns (no cluster requirement).
struct PlainTable {
    names: Vec<String>,
    columns: Vec<Vec<String>>,
}

fn read_plain_csv(path: &Path) -> Result<PlainTable, Error> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("bad CSV header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut columns: Vec<Vec<String>> = vec![Vec::new(); names.len()];
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Data(format!("bad CSV record: {e}")))?;
        if record.len() != names.len() {
            return Err(Error::Data(format!(
                "{}: ragged row ({} fields, header has {})",
                path.display(),
                record.len(),
                names.len()
            )));
        }
        for (c, field) in record.iter().enumerate() {
            columns[c].push(field.to_string());
        }
    }
    Ok(PlainTable { names, columns })
}

fn parse_cell(tok: &str) -> Option<f64> {
    if tok.is_empty() || tok == "NA" {
        return None;
    }
    tok.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn evaluate(
    truth_path: &Path,
    imputed_dir: &Path,
    out_dir: Option<&Path>,
    dry_run: bool,
) -> Result<(), Error> {
    let truth = read_plain_csv(truth_path)?;
    // imp_<k>.csv must be contiguous from 1
    let mut ks: Vec<usize> = Vec::new();
    let entries = std::fs::read_dir(imputed_dir)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", imputed_dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::Data(format!("read_dir: {e}")))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(stem) = name.strip_prefix("imp_").and_then(|s| s.strip_suffix(".csv")) {
            if let Ok(k) = stem.parse::<usize>() {
                ks.push(k);
            }
        }
    }
    if ks.is_empty() {
        return Err(Error::Data(format!(
            "no imp_<k>.csv files in {}",
            imputed_dir.display()
        )));
    }
    ks.sort_unstable();
    let m = *ks.last().unwrap();
    for k in 1..=m {
        if !ks.contains(&k) {
            return Err(Error::Data(format!("missing imputation file imp_{k}.csv")));
        }
    }
    if dry_run {
        println!("dry run: truth table and {m} imputation file(s) found");
        return Ok(());
    }

    let n_rows = truth.columns.first().map_or(0, Vec::len);
    // accumulators per truth column index: (sum_err, sum_sq, n, n_diff)
    let mut acc: Vec<(f64, f64, usize, usize)> = vec![(0.0, 0.0, 0, 0); truth.names.len()];
    for k in 1..=m {
        let imp = read_plain_csv(&imputed_dir.join(format!("imp_{k}.csv")))?;
        if imp.columns.first().map_or(0, Vec::len) != n_rows {
            return Err(Error::Data(format!(
                "imp_{k}.csv has a different row count than the truth table"
            )));
        }
        // name-matched: shuffled column order is accepted
        for (ci, name) in imp.names.iter().enumerate() {
            let ti = truth
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| {
                    Error::Data(format!("imp_{k}.csv column {name} not present in truth table"))
                })?;
            for row in 0..n_rows {
                let (Some(iv), Some(tv)) = (
                    parse_cell(&imp.columns[ci][row]),
                    parse_cell(&truth.columns[ti][row]),
                ) else {
                    continue;
                };
                let a = &mut acc[ti];
                a.0 += iv - tv;
                a.1 += (iv - tv) * (iv - tv);
                a.2 += 1;
                if iv != tv {
                    a.3 += 1;
                }
            }
        }
    }

    let mut rows = Vec::new();
    for (ti, name) in truth.names.iter().enumerate() {
        let (sum, sq, n, n_diff) = acc[ti];
        if n == 0 {
            continue;
        }
        let bias = sum / n as f64;
        let rmse = (sq / n as f64).sqrt();
        rows.push(json!({
            "column": name,
            "bias": bias,
            "rmse": rmse,
            "n_cells": n,
            "n_differing": n_diff,
        }));
    }
    let out = out_dir.unwrap_or(imputed_dir);
    ensure_dir(out)?;
    write_json(&out.join("metrics.json"), &json!({ "m": m, "columns": rows }))?;
    let mut csv_text = String::from("column,measure,value\n");
    for row in rows.iter() {
        let name = row["column"].as_str().unwrap();
        for measure in ["bias", "rmse"] {
            csv_text.push_str(&format!("{name},{measure},{}\n", row[measure]));
        }
    }
    std::fs::write(out.join("metrics.csv"), csv_text.as_bytes())
        .map_err(|e| Error::Data(format!("cannot write metrics.csv: {e}")))?;
    let mut stdout = std::io::stdout();
    let _ = writeln!(stdout, "evaluated {m} imputation(s) against {}", truth_path.display());
    Ok(())
}
