//! File formats: scan CSV, calibration JSON, labeled points, peak records
//! and power series.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldfit::{AxialFitResult, AxisCalibration, CoilCalibration, FitStats, LabeledPoint};
use crate::analysis::{PowerPoint, PowerSeries};
use crate::measured::Measured;
use crate::peaks::PeakFit;
use crate::synth::{normalized_signal, signal_matches, Scan};

pub const SCAN_HEADER: &str = "f_mod_mhz,signal,n_f,n_b";
pub const SCAN_REQUIRED_KEYS: [&str; 4] = ["ix_a", "iy_a", "iz_a", "power_uw"];
pub const CALIBRATION_SCHEMA: &str = "calibration/v1";
pub const AXIAL_SCHEMA: &str = "axial/v1";

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))
}

fn parse_f64(text: &str, line: usize, what: &str) -> Result<f64> {
    text.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("{what}: `{}` is not a number", text.trim()),
    })
}

fn parse_count(text: &str, line: usize, what: &str) -> Result<u64> {
    text.trim().parse::<u64>().map_err(|_| Error::Parse {
        line,
        message: format!("{what}: `{}` is not a non-negative integer", text.trim()),
    })
}

/// Parse a scan file. Line numbers in errors are 1-based file lines.
pub fn parse_scan(text: &str) -> Result<Scan> {
    let mut meta: BTreeMap<String, (String, usize)> = BTreeMap::new();
    let mut header_line = None;
    let mut offset = 0;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        offset += line.len() + 1;
        let t = line.trim();
        if let Some(rest) = t.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                meta.insert(k.trim().to_string(), (v.trim().to_string(), lineno));
            }
            continue;
        }
        if t.is_empty() {
            continue;
        }
        if t != SCAN_HEADER {
            return Err(Error::Parse {
                line: lineno,
                message: format!("malformed header `{t}`, expected `{SCAN_HEADER}`"),
            });
        }
        header_line = Some(lineno);
        break;
    }
    let header_line = header_line.ok_or(Error::Parse {
        line: text.lines().count() + 1,
        message: format!("missing header `{SCAN_HEADER}`"),
    })?;

    let mut fixed = [0.0; 4];
    for (slot, key) in SCAN_REQUIRED_KEYS.iter().enumerate() {
        let (v, line) = meta.get(*key).ok_or_else(|| Error::MissingMetadata {
            key: key.to_string(),
            line: header_line,
        })?;
        fixed[slot] = parse_f64(v, *line, key)?;
    }

    let body = text.get(offset.min(text.len())..).unwrap_or("");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let mut grid = Vec::new();
    let mut signal = Vec::new();
    let mut raw: Vec<(u64, u64)> = Vec::new();
    let mut lines = Vec::new();
    let mut with_counts: Option<bool> = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: header_line + e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = header_line + record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, found {}", record.len()),
            });
        }
        grid.push(parse_f64(&record[0], line, "f_mod_mhz")?);
        signal.push(parse_f64(&record[1], line, "signal")?);
        let has = match (record[2].is_empty(), record[3].is_empty()) {
            (true, true) => false,
            (false, false) => true,
            _ => {
                return Err(Error::Parse {
                    line,
                    message: "n_f and n_b must both be given or both be empty".into(),
                })
            }
        };
        if *with_counts.get_or_insert(has) != has {
            return Err(Error::Parse {
                line,
                message: "counts must be present on every row or on none".into(),
            });
        }
        if has {
            let nf = parse_count(&record[2], line, "n_f")?;
            let nb = parse_count(&record[3], line, "n_b")?;
            if nb == 0 {
                return Err(Error::Parse {
                    line,
                    message: "n_b must be positive".into(),
                });
            }
            raw.push((nf, nb));
        }
        lines.push(line);
    }
    if grid.is_empty() {
        return Err(Error::Parse {
            line: header_line + 1,
            message: "no data rows".into(),
        });
    }
    if let Some(k) = grid.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::NonMonotoneGrid { line: lines[k + 1] });
    }
    if with_counts == Some(true) {
        for (k, (&(nf, nb), &s)) in raw.iter().zip(&signal).enumerate() {
            let expected = normalized_signal(nf, nb);
            if !signal_matches(s, expected) {
                return Err(Error::InconsistentSignal {
                    line: lines[k],
                    signal: s,
                    expected,
                });
            }
        }
    }
    Ok(Scan {
        grid,
        signal,
        currents: [fixed[0], fixed[1], fixed[2]],
        power_uw: fixed[3],
        raw_counts: (with_counts == Some(true)).then_some(raw),
    })
}

pub fn format_scan(scan: &Scan) -> Result<String> {
    scan.validate()?;
    let mut out = String::new();
    let [ix, iy, iz] = scan.currents;
    let _ = writeln!(out, "# format=scan/v1");
    let _ = writeln!(out, "# ix_a={ix}");
    let _ = writeln!(out, "# iy_a={iy}");
    let _ = writeln!(out, "# iz_a={iz}");
    let _ = writeln!(out, "# power_uw={}", scan.power_uw);
    let _ = writeln!(out, "{SCAN_HEADER}");
    for i in 0..scan.len() {
        match &scan.raw_counts {
            Some(raw) => {
                let _ = writeln!(out, "{},{},{},{}", scan.grid[i], scan.signal[i], raw[i].0, raw[i].1);
            }
            None => {
                let _ = writeln!(out, "{},{},,", scan.grid[i], scan.signal[i]);
            }
        }
    }
    Ok(out)
}

pub fn read_scan(path: &Path) -> Result<Scan> {
    parse_scan(&read_text(path)?)
}

pub fn write_scan(scan: &Scan, path: &Path) -> Result<()> {
    std::fs::write(path, format_scan(scan)?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisEntry {
    pub k_g_per_a: f64,
    pub k_sigma: f64,
    pub i0_a: f64,
    pub i0_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitStatsEntry {
    pub chi2_reduced: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFileV1 {
    pub schema: String,
    pub x: AxisEntry,
    pub y: AxisEntry,
    pub z: AxisEntry,
    pub f_offset_mhz: f64,
    pub f_offset_sigma: f64,
    /// Row-major 7×7 over (k_x, k_y, k_z, i0_x, i0_y, i0_z, f_offset).
    pub covariance: Vec<f64>,
    pub fit_stats: FitStatsEntry,
}

impl From<&CoilCalibration> for CalibrationFileV1 {
    fn from(cal: &CoilCalibration) -> Self {
        let entry = |a: &AxisCalibration| AxisEntry {
            k_g_per_a: a.k.value,
            k_sigma: a.k.sigma,
            i0_a: a.i0.value,
            i0_sigma: a.i0.sigma,
        };
        Self {
            schema: CALIBRATION_SCHEMA.to_string(),
            x: entry(&cal.axes[0]),
            y: entry(&cal.axes[1]),
            z: entry(&cal.axes[2]),
            f_offset_mhz: cal.f_offset.value,
            f_offset_sigma: cal.f_offset.sigma,
            covariance: cal.covariance.clone(),
            fit_stats: FitStatsEntry {
                chi2_reduced: cal.stats.chi2_reduced,
                n_points: cal.stats.n_points,
            },
        }
    }
}

impl CalibrationFileV1 {
    pub fn into_calibration(self) -> Result<CoilCalibration> {
        if self.schema != CALIBRATION_SCHEMA {
            return Err(Error::InvalidInput(format!(
                "schema `{}` is not `{CALIBRATION_SCHEMA}`",
                self.schema
            )));
        }
        if self.covariance.len() != 49 {
            return Err(Error::InvalidInput(format!(
                "covariance has {} entries, expected 49",
                self.covariance.len()
            )));
        }
        let axis = |e: AxisEntry| AxisCalibration {
            k: Measured::new(e.k_g_per_a, e.k_sigma),
            i0: Measured::new(e.i0_a, e.i0_sigma),
        };
        Ok(CoilCalibration {
            axes: [axis(self.x), axis(self.y), axis(self.z)],
            f_offset: Measured::new(self.f_offset_mhz, self.f_offset_sigma),
            covariance: self.covariance,
            stats: FitStats {
                chi2_reduced: self.fit_stats.chi2_reduced,
                n_points: self.fit_stats.n_points,
                iterations: 0,
            },
        })
    }
}

pub fn calibration_to_json(cal: &CoilCalibration) -> Result<String> {
    Ok(serde_json::to_string_pretty(&CalibrationFileV1::from(cal))?)
}

pub fn calibration_from_json(text: &str) -> Result<CoilCalibration> {
    let file: CalibrationFileV1 =
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("calibration file: {e}")))?;
    file.into_calibration()
}

pub fn read_calibration(path: &Path) -> Result<CoilCalibration> {
    calibration_from_json(&read_text(path)?)
}

pub fn write_calibration(cal: &CoilCalibration, path: &Path) -> Result<()> {
    std::fs::write(path, calibration_to_json(cal)? + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxialFileV1 {
    pub schema: String,
    pub k_z_g_per_a: f64,
    pub k_z_sigma: f64,
    pub i0_z_a: f64,
    pub i0_z_sigma: f64,
    pub b_perp_g: f64,
    pub b_perp_sigma: f64,
    pub f_offset_mhz: f64,
    pub f_offset_sigma: f64,
    /// Row-major 4×4 over (k_z, i0_z, b_perp², f_offset).
    pub covariance: Vec<f64>,
    pub fit_stats: FitStatsEntry,
}

impl From<&AxialFitResult> for AxialFileV1 {
    fn from(r: &AxialFitResult) -> Self {
        Self {
            schema: AXIAL_SCHEMA.to_string(),
            k_z_g_per_a: r.k_z.value,
            k_z_sigma: r.k_z.sigma,
            i0_z_a: r.i0_z.value,
            i0_z_sigma: r.i0_z.sigma,
            b_perp_g: r.b_perp.value,
            b_perp_sigma: r.b_perp.sigma,
            f_offset_mhz: r.f_offset.value,
            f_offset_sigma: r.f_offset.sigma,
            covariance: r.covariance.clone(),
            fit_stats: FitStatsEntry {
                chi2_reduced: r.stats.chi2_reduced,
                n_points: r.stats.n_points,
            },
        }
    }
}

impl AxialFileV1 {
    pub fn into_result(self) -> Result<AxialFitResult> {
        if self.schema != AXIAL_SCHEMA {
            return Err(Error::InvalidInput(format!("schema `{}` is not `{AXIAL_SCHEMA}`", self.schema)));
        }
        if self.covariance.len() != 16 {
            return Err(Error::InvalidInput(format!(
                "covariance has {} entries, expected 16",
                self.covariance.len()
            )));
        }
        Ok(AxialFitResult {
            k_z: Measured::new(self.k_z_g_per_a, self.k_z_sigma),
            i0_z: Measured::new(self.i0_z_a, self.i0_z_sigma),
            b_perp: Measured::new(self.b_perp_g, self.b_perp_sigma),
            f_offset: Measured::new(self.f_offset_mhz, self.f_offset_sigma),
            covariance: self.covariance,
            stats: FitStats {
                chi2_reduced: self.fit_stats.chi2_reduced,
                n_points: self.fit_stats.n_points,
                iterations: 0,
            },
        })
    }
}

pub fn read_axial(path: &Path) -> Result<AxialFitResult> {
    let file: AxialFileV1 = serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::InvalidInput(format!("axial fit file: {e}")))?;
    file.into_result()
}

pub fn write_axial(r: &AxialFitResult, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(&AxialFileV1::from(r))? + "\n")?;
    Ok(())
}

/// One row of the labeled-point CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct PointRow {
    ix_a: f64,
    iy_a: f64,
    iz_a: f64,
    eta: f64,
    frequency_mhz: f64,
    sigma_mhz: Option<f64>,
}

fn csv_error(e: csv::Error) -> Error {
    Error::Parse {
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

/// Labeled points; an empty `sigma_mhz` comes back as NaN (see
/// [`crate::fieldfit::fill_missing_sigmas`]).
pub fn parse_points(text: &str) -> Result<Vec<LabeledPoint>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    reader
        .deserialize::<PointRow>()
        .map(|row| {
            let r = row.map_err(csv_error)?;
            Ok(LabeledPoint::new(
                [r.ix_a, r.iy_a, r.iz_a],
                r.eta,
                r.frequency_mhz,
                r.sigma_mhz.unwrap_or(f64::NAN),
            ))
        })
        .collect()
}

pub fn format_points(points: &[LabeledPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(PointRow {
            ix_a: p.currents[0],
            iy_a: p.currents[1],
            iz_a: p.currents[2],
            eta: p.eta,
            frequency_mhz: p.frequency,
            sigma_mhz: (p.sigma.is_finite() && p.sigma > 0.0).then_some(p.sigma),
        })
        .map_err(csv_error)?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidInput(e.to_string()))
}

pub fn read_points(path: &Path) -> Result<Vec<LabeledPoint>> {
    parse_points(&read_text(path)?)
}

/// One fitted peak with the scan it came from, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakRecord {
    pub scan: String,
    pub label: Option<String>,
    pub eta: Option<f64>,
    pub center_mhz: f64,
    pub center_sigma_mhz: f64,
    pub fwhm_khz: f64,
    pub fwhm_sigma_khz: f64,
    pub amplitude: f64,
    pub amplitude_sigma: f64,
    pub goodness: f64,
    pub ix_a: f64,
    pub iy_a: f64,
    pub iz_a: f64,
    pub power_uw: f64,
    pub ambiguous: bool,
}

impl PeakRecord {
    pub fn new(scan_name: &str, scan: &Scan, fit: &PeakFit, ambiguous: bool) -> Self {
        Self {
            scan: scan_name.to_string(),
            label: fit.label.map(|l| l.name().to_string()),
            eta: fit.label.map(|l| l.eta()),
            center_mhz: fit.center.value,
            center_sigma_mhz: fit.center.sigma,
            fwhm_khz: fit.fwhm.value,
            fwhm_sigma_khz: fit.fwhm.sigma,
            amplitude: fit.amplitude.value,
            amplitude_sigma: fit.amplitude.sigma,
            goodness: fit.goodness,
            ix_a: scan.currents[0],
            iy_a: scan.currents[1],
            iz_a: scan.currents[2],
            power_uw: scan.power_uw,
            ambiguous,
        }
    }

    pub fn labeled_point(&self) -> Option<LabeledPoint> {
        self.eta.map(|eta| {
            LabeledPoint::new(
                [self.ix_a, self.iy_a, self.iz_a],
                eta,
                self.center_mhz,
                self.center_sigma_mhz,
            )
        })
    }
}

pub fn parse_peak_records(text: &str) -> Result<Vec<PeakRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct PowerRow {
    power_uw: f64,
    center_mhz: f64,
    center_sigma_mhz: Option<f64>,
    fwhm_khz: f64,
    fwhm_sigma_khz: Option<f64>,
}

/// Power series CSV; missing σ columns are read as 0 (unweighted fit).
pub fn parse_power_series(text: &str) -> Result<PowerSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let entries = reader
        .deserialize::<PowerRow>()
        .map(|row| {
            let r = row.map_err(csv_error)?;
            Ok(PowerPoint {
                power_uw: r.power_uw,
                center: Measured::new(r.center_mhz, r.center_sigma_mhz.unwrap_or(0.0)),
                fwhm: Measured::new(r.fwhm_khz, r.fwhm_sigma_khz.unwrap_or(0.0)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PowerSeries { entries })
}

pub fn format_power_series(series: &PowerSeries) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in &series.entries {
        w.serialize(PowerRow {
            power_uw: e.power_uw,
            center_mhz: e.center.value,
            center_sigma_mhz: Some(e.center.sigma),
            fwhm_khz: e.fwhm.value,
            fwhm_sigma_khz: Some(e.fwhm.sigma),
        })
        .map_err(csv_error)?;
    }
    finish_csv(w)
}

pub fn read_power_series(path: &Path) -> Result<PowerSeries> {
    parse_power_series(&read_text(path)?)
}

/// Plot data: one row per current with a column per η.
pub fn format_curves(axis_name: &str, etas: &[f64], rows: &[(f64, Vec<f64>)]) -> String {
    let mut out = format!("i{axis_name}_a");
    for eta in etas {
        let _ = write!(out, ",f_eta_{eta}_mhz");
    }
    out.push('\n');
    for (i, fs) in rows {
        let _ = write!(out, "{i}");
        for f in fs {
            let _ = write!(out, ",{f}");
        }
        out.push('\n');
    }
    out
}
