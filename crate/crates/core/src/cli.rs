//! Command-line front end.
//!
//! Exit status: 0 on success, 1 for input errors and usage problems, 2 for
//! numerical failures. Failures also print one JSON object
//! `{"error": kind, "message": text}` on standard error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::analysis;
use crate::config::{self, parse_grid_spec, parse_triple, KeyValues};
use crate::error::Result;
use crate::fieldfit::{self, FitOptions};
use crate::io::{self, PeakRecord};
use crate::levels::{predict_peaks, Axis, SelectionMode, F_HYPERFINE_REFERENCE_MHZ};
use crate::measured::Measured;
use crate::minimize;
use crate::peaks::{assign_labels, detect_peaks, DetectConfig};
use crate::synth;

#[derive(Debug, Parser)]
#[command(name = "zeemancal", version, about = "Zeeman spectroscopy coil calibration and field nulling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one scan and write it as scan CSV.
    Simulate(SimulateArgs),
    /// Fit peaks in scan files; one JSON object per peak.
    DetectPeaks(DetectArgs),
    /// Global seven-parameter calibration from labeled points.
    FitField(FitFieldArgs),
    /// Single-coil fit with a transverse residual field.
    FitAxial(FitAxialArgs),
    /// Closed-loop field nulling against a simulated environment.
    Minimize(MinimizeArgs),
    /// Zero-power intercepts of peak position and width.
    PowerExtrapolate(PowerArgs),
    /// Field uncertainty at the nulling currents.
    Propagate(PropagateArgs),
    /// Upper limits on residual field and gradient.
    Limits(LimitsArgs),
    /// Field vector and peak table for given currents.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Environment and beam config (key=value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Coil currents `ix,iy,iz` in A.
    #[arg(long, allow_hyphen_values = true)]
    currents: String,
    /// Frequency grid `start:stop:step` in MHz; default ±12 MHz around the offset.
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
    #[arg(long)]
    seed: u64,
    /// Exact model signal without counts.
    #[arg(long)]
    noiseless: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(required = true)]
    scans: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    min_prominence: f64,
    #[arg(long, default_value_t = 7)]
    max_peaks: usize,
    /// Polarization selection used for labeling: all, sigma_plus, sigma_minus.
    #[arg(long, default_value = "all")]
    mode: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write labeled points CSV for fit-field / fit-axial.
    #[arg(long)]
    labeled_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitFieldArgs {
    /// Labeled points CSV.
    points: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write model curves `<prefix>_{x,y,z}.csv` along each coil.
    #[arg(long)]
    curves_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitAxialArgs {
    points: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MinimizeArgs {
    /// Environment, beam and minimization config (key=value).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PowerArgs {
    /// CSV with power_uw,center_mhz,center_sigma_mhz,fwhm_khz,fwhm_sigma_khz.
    series: PathBuf,
}

#[derive(Debug, Args)]
struct PropagateArgs {
    /// Global calibration JSON, or axial fit JSON with --axial.
    calibration: PathBuf,
    #[arg(long)]
    axial: bool,
}

#[derive(Debug, Args)]
struct LimitsArgs {
    /// Zero-power resonance, MHz.
    #[arg(long)]
    f_intercept_mhz: f64,
    #[arg(long)]
    f_sigma_mhz: f64,
    #[arg(long, default_value_t = F_HYPERFINE_REFERENCE_MHZ)]
    f_reference_mhz: f64,
    #[arg(long)]
    min_fwhm_khz: f64,
    #[arg(long, default_value_t = 2.0)]
    ensemble_length_mm: f64,
}

#[derive(Debug, Args)]
struct PredictArgs {
    calibration: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    currents: String,
    #[arg(long, default_value = "all")]
    mode: String,
}

/// Run the CLI on `argv` (including the program name) and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            if code == 0 {
                let _ = write!(out, "{}", e.render());
            } else {
                let _ = writeln!(err, "{}", e.render());
                let line = json!({"error": "usage", "message": e.kind().to_string()});
                let _ = writeln!(err, "{line}");
            }
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let line = json!({"error": e.kind(), "message": e.to_string()});
            let _ = writeln!(err, "{line}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn json_line(value: &serde_json::Value) -> String {
    format!("{}\n", serde_json::to_string_pretty(value).unwrap_or_default())
}

fn load_config(path: Option<&PathBuf>) -> Result<KeyValues> {
    match path {
        Some(p) => KeyValues::read(p),
        None => Ok(KeyValues::default()),
    }
}

fn measured_json(m: Measured) -> serde_json::Value {
    json!({"value": m.value, "sigma": m.sigma})
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a, out),
        Command::DetectPeaks(a) => detect(a, out),
        Command::FitField(a) => fit_field(a, out),
        Command::FitAxial(a) => fit_axial(a, out),
        Command::Minimize(a) => run_minimize(a, out),
        Command::PowerExtrapolate(a) => power(a, out),
        Command::Propagate(a) => propagate(a, out),
        Command::Limits(a) => limits(a, out),
        Command::Predict(a) => predict(a, out),
    }
}

fn simulate(a: SimulateArgs, out: &mut dyn Write) -> Result<()> {
    let mut kv = load_config(a.config.as_ref())?;
    let env = config::environment_from(&mut kv)?;
    let beam = config::beam_from(&mut kv)?;
    let mut noise = config::noise_from(&mut kv)?;
    kv.finish()?;
    if a.noiseless {
        noise = synth::Noise::None;
    }
    let currents = parse_triple(&a.currents)?;
    let (start, stop, step) = match &a.grid {
        Some(g) => parse_grid_spec(g)?,
        None => (beam.f_offset() - 12.0, beam.f_offset() + 12.0, 0.01),
    };
    let grid = synth::linear_grid(start, stop, step)?;
    let scan = synth::simulate_scan(&env, &beam, currents, &grid, noise, a.seed)?;
    emit(out, a.out.as_deref(), &io::format_scan(&scan)?)
}

fn detect(a: DetectArgs, out: &mut dyn Write) -> Result<()> {
    let mode: SelectionMode = a.mode.parse()?;
    let cfg = DetectConfig::new(a.min_prominence, a.max_peaks);
    let mut lines = String::new();
    let mut points = Vec::new();
    for path in &a.scans {
        let scan = io::read_scan(path)?;
        let fits = detect_peaks(&scan, &cfg)?;
        let labeled = assign_labels(&fits, mode);
        let name = path.display().to_string();
        for f in &labeled.fits {
            let rec = PeakRecord::new(&name, &scan, f, labeled.ambiguous);
            if let Some(p) = rec.labeled_point() {
                points.push(p);
            }
            lines.push_str(&serde_json::to_string(&rec)?);
            lines.push('\n');
        }
    }
    if let Some(p) = &a.labeled_csv {
        std::fs::write(p, io::format_points(&points)?)?;
    }
    emit(out, a.out.as_deref(), &lines)
}

fn fit_field(a: FitFieldArgs, out: &mut dyn Write) -> Result<()> {
    let mut points = io::read_points(&a.points)?;
    fieldfit::fill_missing_sigmas(&mut points)?;
    let cal = fieldfit::fit_global_auto(&points, &FitOptions::default())?;
    if let Some(prefix) = &a.curves_out {
        let etas = crate::levels::distinct_etas(SelectionMode::All);
        for axis in Axis::ALL {
            let j = axis.index();
            let (lo, hi) = points
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.currents[j]), h.max(p.currents[j])));
            let base = points
                .iter()
                .find(|p| p.currents[j] == lo)
                .map_or([0.0; 3], |p| p.currents);
            let xs: Vec<f64> = (0..=200).map(|i| lo + (hi - lo) * i as f64 / 200.0).collect();
            let rows = fieldfit::model_curves(&cal, base, j, &xs, &etas);
            let path = PathBuf::from(format!("{}_{}.csv", prefix.display(), axis.name()));
            std::fs::write(path, io::format_curves(axis.name(), &etas, &rows))?;
        }
    }
    emit(out, a.out.as_deref(), &(io::calibration_to_json(&cal)? + "\n"))
}

fn fit_axial(a: FitAxialArgs, out: &mut dyn Write) -> Result<()> {
    let mut points = io::read_points(&a.points)?;
    fieldfit::fill_missing_sigmas(&mut points)?;
    let r = fieldfit::fit_axial_auto(&points, &FitOptions::default())?;
    let text = serde_json::to_string_pretty(&io::AxialFileV1::from(&r))? + "\n";
    emit(out, a.out.as_deref(), &text)
}

fn run_minimize(a: MinimizeArgs, out: &mut dyn Write) -> Result<()> {
    let mut kv = load_config(a.config.as_ref())?;
    let env = config::environment_from(&mut kv)?;
    let cfg = config::minimize_from(&mut kv)?;
    kv.finish()?;
    let trace = minimize::run_minimization(&env, &cfg, a.seed)?;
    emit(out, a.out.as_deref(), &(serde_json::to_string_pretty(&trace)? + "\n"))
}

fn power(a: PowerArgs, out: &mut dyn Write) -> Result<()> {
    let series = io::read_power_series(&a.series)?;
    let r = analysis::extrapolate_power(&series)?;
    let v = json!({
        "n_entries": series.entries.len(),
        "power_uw": series.entries.iter().map(|e| e.power_uw).collect::<Vec<_>>(),
        "f_intercept_mhz": measured_json(r.f_intercept),
        "shift_slope_mhz_per_uw": measured_json(r.shift_slope),
        "width_intercept_khz": measured_json(r.width_intercept),
        "width_slope_khz_per_uw": measured_json(r.width_slope),
    });
    emit(out, None, &json_line(&v))
}

fn propagate(a: PropagateArgs, out: &mut dyn Write) -> Result<()> {
    let v = if a.axial {
        let r = io::read_axial(&a.calibration)?;
        json!({
            "delta_b_g": analysis::propagate_delta_b_axial(&r),
            "k_z_g_per_a": r.k_z.value,
            "i0_z_sigma_a": r.i0_z.sigma,
            "b_perp_sigma_g": r.b_perp.sigma,
        })
    } else {
        let cal = io::read_calibration(&a.calibration)?;
        json!({
            "delta_b_g": analysis::propagate_delta_b(&cal),
            "k_g_per_a": cal.gains(),
            "i0_sigma_a": currents_for_zero_sigmas(&cal),
        })
    };
    emit(out, None, &json_line(&v))
}

fn currents_for_zero_sigmas(cal: &fieldfit::CoilCalibration) -> [f64; 3] {
    fieldfit::currents_for_zero(cal).map(|m| m.sigma)
}

fn limits(a: LimitsArgs, out: &mut dyn Write) -> Result<()> {
    let field = analysis::field_upper_limit(Measured::new(a.f_intercept_mhz, a.f_sigma_mhz), a.f_reference_mhz)?;
    let gradient = analysis::gradient_upper_limit(a.min_fwhm_khz, a.ensemble_length_mm)?;
    let v = serde_json::to_value(analysis::UpperLimits { field, gradient })?;
    emit(out, None, &json_line(&v))
}

fn predict(a: PredictArgs, out: &mut dyn Write) -> Result<()> {
    let cal = io::read_calibration(&a.calibration)?;
    let mode: SelectionMode = a.mode.parse()?;
    let currents = parse_triple(&a.currents)?;
    let b = cal.field_at(currents);
    let peaks: Vec<_> = predict_peaks(b, cal.f_offset.value, mode)
        .into_iter()
        .map(|p| json!({"label": p.label.name(), "eta": p.eta, "frequency_mhz": p.frequency_mhz}))
        .collect();
    let v = json!({
        "currents_a": currents,
        "b_x_g": b.x,
        "b_y_g": b.y,
        "b_z_g": b.z,
        "b_magnitude_g": b.magnitude(),
        "f_offset_mhz": cal.f_offset.value,
        "mode": mode.name(),
        "peaks": peaks,
    });
    emit(out, None, &json_line(&v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(args.iter().copied(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        let (code, _, err) = run_capture(&["zeemancal", "frobnicate"]);
        assert_eq!(code, 1);
        assert!(err.contains("Usage"));
        assert!(err.lines().last().unwrap().contains("\"error\""));
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run_capture(&["zeemancal", "--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("predict"));
    }

    #[test]
    fn simulate_requires_seed() {
        let (code, _, _) = run_capture(&["zeemancal", "simulate", "--currents", "0,0,0"]);
        assert_eq!(code, 1);
    }

    #[test]
    fn limits_json() {
        let (code, out, _) = run_capture(&[
            "zeemancal",
            "limits",
            "--f-intercept-mhz",
            "1250.064674088",
            "--f-sigma-mhz",
            "0.013",
            "--min-fwhm-khz",
            "40",
        ]);
        assert_eq!(code, 0);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!((v["field"]["field_limit_g"].as_f64().unwrap() - 0.06 / 1.4).abs() < 1e-9);
    }
}
