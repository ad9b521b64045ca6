use std::fs;
use std::path::{Path, PathBuf};

use ctsid::control::{closed_loop, tracking_summary, TrackingSummary};
use ctsid::pipeline::{identify, residual_csv, write_report, Report};
use ctsid::plant::{load_dataset, make_dataset, write_dataset, MANIFEST_FILE};
use ctsid::polyalg::ModelFile;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::plot;

pub const REPORT_FILE: &str = "report.json";
pub const MODEL_FILE: &str = "model.json";
pub const RESIDUALS_FILE: &str = "residuals.csv";
pub const TRACE_FILE: &str = "closedloop.csv";
pub const SUMMARY_FILE: &str = "summary.json";
/// Scenarios overlaid in one dataset plot.
pub const SCENARIOS_PER_PLOT: usize = 4;
/// Settling band as a fraction of the step size.
pub const SETTLING_BAND: f64 = 0.05;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn generate(cfg: &RunConfig) -> Result<String, CliError> {
    create_dir(&cfg.out)?;
    let trajs = make_dataset(&cfg.dataset)?;
    let manifest = write_dataset(&cfg.out, &cfg.dataset, &trajs)?;
    Ok(format!(
        "wrote {} scenarios of {} samples to {}",
        manifest.files.len(),
        manifest.n_samples,
        cfg.out.display()
    ))
}

pub fn identify_cmd(cfg: &RunConfig, dataset: &Path) -> Result<Report, CliError> {
    if !dataset.join(MANIFEST_FILE).is_file() {
        return Err(CliError::MissingManifest(dataset.display().to_string()));
    }
    let (_, trajs) = load_dataset(dataset)?;
    let ident = identify(&trajs, &cfg.identify)?;
    create_dir(&cfg.out)?;
    let mut report = ident.report.clone();
    report.model_file = Some(MODEL_FILE.to_string());
    write_report(&cfg.out.join(REPORT_FILE), &report)?;
    ident.selected_model_file().save(&cfg.out.join(MODEL_FILE))?;
    write(&cfg.out.join(RESIDUALS_FILE), &residual_csv(&ident)?)?;
    Ok(report)
}

pub fn describe_report(report: &Report) -> String {
    let mut lines = Vec::new();
    for (n, o) in &report.orders {
        let test = o
            .test
            .as_ref()
            .map_or(String::new(), |t| format!("  test p95 {:.4}", t.p(95)));
        lines.push(format!(
            "n={n}  terms {:>2}  validation p95 {:.4}  p100 {:.4}{test}",
            o.terms,
            o.validation.p(95),
            o.validation.p(100)
        ));
    }
    lines.push(format!("selected order {}", report.selected_order));
    lines.join("\n")
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosedLoopSummary {
    pub kappa: usize,
    pub u_bar: f64,
    pub tau_ctrl: f64,
    pub sigma: f64,
    pub tracking: TrackingSummary,
}

pub fn closedloop(cfg: &RunConfig, model_path: &Path) -> Result<ClosedLoopSummary, CliError> {
    let file = ModelFile::load(model_path)?;
    if file.n != 3 {
        return Err(CliError::ModelOrder(file.n));
    }
    let model = file.polynomial()?;
    let c = &cfg.controller;
    let log = closed_loop(&cfg.dataset.params, &model, c)?;
    let summary = ClosedLoopSummary {
        kappa: c.kappa,
        u_bar: c.u_bar,
        tau_ctrl: c.tau_ctrl,
        sigma: c.sigma,
        tracking: tracking_summary(&log, &c.reference, c.u_bar, SETTLING_BAND)?,
    };
    create_dir(&cfg.out)?;
    write(&cfg.out.join(TRACE_FILE), &log.to_csv())?;
    let json = serde_json::to_string_pretty(&summary).map_err(ctsid::Error::from)?;
    write(&cfg.out.join(SUMMARY_FILE), &json)?;
    Ok(summary)
}

pub fn describe_summary(s: &ClosedLoopSummary) -> String {
    let t = &s.tracking;
    let mut lines = vec![format!(
        "max |e| {:.4}  rms e {:.4}  final |e| {:.2e}  max |u| {:.4}  saturated {:.1}%",
        t.max_abs_error,
        t.rms_error,
        t.final_abs_error,
        t.max_abs_u,
        100.0 * t.saturated_fraction
    )];
    for st in &t.steps {
        let settle = st.settling_time.map_or("not settled".to_string(), |v| format!("{v:.3} s"));
        lines.push(format!("step {:+.3} at {:.3} s: settling {settle}", st.size, st.at));
    }
    lines.join("\n")
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map_or("plot".into(), |s| s.to_string_lossy().into_owned())
}

/// Render each input to SVG; dataset directories are drawn a few scenarios
/// per file.
pub fn plot_cmd(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    create_dir(&cfg.out)?;
    let mut written = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| CliError::io(input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(CliError::Csv {
                    path: input.display().to_string(),
                    msg: "no csv files".into(),
                });
            }
            for (i, chunk) in files.chunks(SCENARIOS_PER_PLOT).enumerate() {
                let tables = chunk
                    .iter()
                    .map(|p| Ok((stem(p), plot::read_table(p)?)))
                    .collect::<Result<Vec<_>, CliError>>()?;
                let path = cfg.out.join(format!("{}_{i:03}.svg", stem(input)));
                write(&path, &plot::plot_scenarios(&stem(input), &tables)?)?;
                written.push(path);
            }
        } else {
            let table = plot::read_table(input)?;
            let path = cfg.out.join(format!("{}.svg", stem(input)));
            write(&path, &plot::plot_table(&stem(input), &table))?;
            written.push(path);
        }
    }
    Ok(written)
}
