//! Run, ablation and plot-script commands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{apply_variant, AblationSpec, ExperimentConfig};
use crate::error::{Error, Result};
use crate::sim::{self, Metrics, StepRecord};

/// Worker-count override for [`cmd_ablate`].
pub const WORKERS_ENV: &str = "IRL_TRACK_WORKERS";

pub const RUN_CSV: &str = "run.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const TABLE_CSV: &str = "table.csv";
pub const PLOT_SCRIPT: &str = "plot.py";

/// Column names for a critic of `n_critic` weights and an identifier with
/// `n_identifier` weights.
pub fn csv_header(n_critic: usize, n_identifier: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "t", "x1", "x2", "x1d", "x2d", "u", "z1", "z2", "e_hjb", "sigma", "xi",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=n_critic).map(|i| format!("W{i}")));
    h.extend((1..=n_identifier).map(|i| format!("Wi{i}")));
    h.push("g_tilde_norm".into());
    h.push("lambda_min_P".into());
    h
}

fn csv_row(r: &StepRecord) -> Vec<String> {
    let mut row: Vec<String> = [r.t, r.x1, r.x2, r.x1d, r.x2d, r.u, r.z1, r.z2, r.e_hjb, r.sigma]
        .iter()
        .map(|v| v.to_string())
        .collect();
    row.push(r.xi.to_string());
    row.extend(r.w.iter().map(|v| v.to_string()));
    row.extend(r.w_id.iter().map(|v| v.to_string()));
    row.push(r.g_tilde_norm.to_string());
    row.push(r.lambda_min_p.to_string());
    row
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Run one config, streaming rows to `out/run.csv` and writing
/// `out/metrics.json`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<Metrics> {
    let sim_cfg = cfg.to_sim_config()?;
    create_dir(out)?;
    let csv_path = out.join(&cfg.output.csv);
    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::io(&csv_path, std::io::Error::other(e));
    let n_id = sim_cfg.schedule.segments()[0]
        .params
        .true_identifier_weights()
        .len();
    writer
        .write_record(csv_header(sim_cfg.critic_w_init.len(), n_id))
        .map_err(csv_err)?;
    let summary = sim::run(&sim_cfg, |r| writer.write_record(csv_row(r)).map_err(csv_err))?;
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;
    write_json(&out.join(METRICS_JSON), &summary.metrics)?;
    if cfg.output.plots {
        fs::write(out.join(PLOT_SCRIPT), plot_script(&cfg.output.csv)).map_err(|e| Error::io(out, e))?;
    }
    Ok(summary.metrics)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("metrics serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// One line of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub status: String,
    /// Mean over segments of the last-3 s `|x1 − x1d|`.
    pub steady_state_error: Option<f64>,
    pub final_g_tilde_norm: Option<f64>,
    pub critic_settling_time: Option<f64>,
    pub max_abs_u: Option<f64>,
}

impl AblationRow {
    fn ok(name: &str, m: &Metrics) -> Self {
        let n = m.segments.len().max(1) as f64;
        AblationRow {
            variant: name.into(),
            status: "ok".into(),
            steady_state_error: Some(m.segments.iter().map(|s| s.tracking_error).sum::<f64>() / n),
            final_g_tilde_norm: Some(m.final_g_tilde_norm),
            critic_settling_time: Some(m.critic_settling_time),
            max_abs_u: Some(m.max_abs_u),
        }
    }

    fn failed(name: &str, err: &Error) -> Self {
        AblationRow {
            variant: name.into(),
            status: format!("error: {err}"),
            steady_state_error: None,
            final_g_tilde_norm: None,
            critic_settling_time: None,
            max_abs_u: None,
        }
    }
}

pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(
                WORKERS_ENV,
                format!("expected a positive integer, got `{v}`"),
            )),
        },
    }
}

/// Run the base config and every variant, each into `out/<name>/`, and
/// write `out/table.csv`. The base row is named `base`.
pub fn cmd_ablate(base: &ExperimentConfig, spec: &AblationSpec, out: &Path) -> Result<Vec<AblationRow>> {
    base.to_sim_config()?;
    create_dir(out)?;
    let mut jobs: Vec<(String, Result<ExperimentConfig>)> = vec![("base".into(), Ok(base.clone()))];
    for v in &spec.variants {
        jobs.push((v.name.clone(), apply_variant(base, v)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count()?)
        .build()
        .map_err(|e| Error::config(WORKERS_ENV, e.to_string()))?;
    let rows: Vec<AblationRow> = pool.install(|| {
        jobs.par_iter()
            .map(|(name, cfg)| {
                let result = cfg
                    .as_ref()
                    .map_err(clone_error)
                    .and_then(|c| cmd_run(c, &out.join(name)));
                match result {
                    Ok(m) => AblationRow::ok(name, &m),
                    Err(e) => AblationRow::failed(name, &e),
                }
            })
            .collect()
    });
    let path = out.join(TABLE_CSV);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in &rows {
        w.serialize(r)
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

fn clone_error(e: &Error) -> Error {
    match e {
        Error::Config { field, reason } => Error::config(field.clone(), reason.clone()),
        other => Error::Domain(other.to_string()),
    }
}

/// Columns the plot script reads.
pub const PLOT_COLUMNS: &[&str] = &["t", "x1", "x2", "x1d", "u", "g_tilde_norm", "W1", "Wi1"];

/// Check that `run_dir/run.csv` has a header with every plotted column and
/// at least one data row, then write `run_dir/plot.py`.
pub fn cmd_plot(run_dir: &Path) -> Result<PathBuf> {
    let csv_path = run_dir.join(RUN_CSV);
    let file = File::open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    check_run_csv(file)?;
    let script = run_dir.join(PLOT_SCRIPT);
    let mut f = File::create(&script).map_err(|e| Error::io(&script, e))?;
    f.write_all(plot_script(RUN_CSV).as_bytes())
        .map_err(|e| Error::io(&script, e))?;
    Ok(script)
}

/// Validate a run CSV: required columns present and at least one row.
pub fn check_run_csv(reader: impl std::io::Read) -> Result<()> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::RunFile(format!("unreadable header: {e}")))?
        .clone();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(Error::RunFile("empty CSV".into()));
    }
    let missing: Vec<&str> = PLOT_COLUMNS
        .iter()
        .copied()
        .filter(|c| !headers.iter().any(|h| h == *c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::RunFile(format!("missing columns: {}", missing.join(", "))));
    }
    let mut record = csv::StringRecord::new();
    let has_row = rdr
        .read_record(&mut record)
        .map_err(|e| Error::RunFile(format!("bad row: {e}")))?;
    if !has_row {
        return Err(Error::RunFile("CSV has a header but no rows".into()));
    }
    Ok(())
}

fn plot_script(csv_name: &str) -> String {
    PLOT_TEMPLATE.replace("@CSV@", csv_name)
}

const PLOT_TEMPLATE: &str = r#"#!/usr/bin/env python3
# Five panels: critic weights, identifier weights, g error, states, control.
import os
import sys

import matplotlib.pyplot as plt
import pandas as pd

here = os.path.dirname(os.path.abspath(__file__))
df = pd.read_csv(os.path.join(here, "@CSV@"))
t = df["t"]
critic = [c for c in df.columns if c.startswith("W") and c[1:].isdigit()]
ident = [c for c in df.columns if c.startswith("Wi") and c[2:].isdigit()]

fig, ax = plt.subplots(5, 1, figsize=(8, 14), sharex=True)
for c in critic:
    ax[0].plot(t, df[c], label=c)
ax[0].set_title("Critic NN weights")
ax[0].legend(ncol=4, fontsize="small")
for c in ident:
    ax[1].plot(t, df[c], label=c)
ax[1].set_title("Identifier NN weights")
ax[1].legend(ncol=4, fontsize="small")
ax[2].plot(t, df["g_tilde_norm"])
ax[2].set_title("Difference between actual and identified control coupling dynamics")
ax[3].plot(t, df["x1"], label="x1")
ax[3].plot(t, df["x2"], label="x2")
ax[3].plot(t, df["x1d"], "k--", label="x1d")
ax[3].set_title("States")
ax[3].legend()
ax[4].plot(t, df["u"])
ax[4].set_title("Control Profile")
ax[4].set_xlabel("t [s]")
fig.tight_layout()
out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(here, "plot.png")
fig.savefig(out, dpi=120)
"#;
