//! Forward model of a Raman scan.
//!
//! Peak centres come from [`predict_peaks`] at the field produced by the coil
//! currents; the common offset carries a light shift linear in beam power and
//! every line is power broadened linearly. A field gradient across the ion
//! cloud adds `|η| · 1.4 MHz/G · gradient · length` to each FWHM. Counts are
//! Poisson: `N_b` with the background mean and `N_f` with mean
//! `background · (1 + s(f))`, and the recorded signal is `(N_f − N_b)/N_b`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::fieldfit::CoilCalibration;
use crate::levels::{predict_peaks, FieldVector, PeakLabel, SelectionMode, F_HYPERFINE_REFERENCE_MHZ, ZEEMAN_RATE_MHZ_PER_G};

/// Lorentzian with peak value `amplitude` at `center` (MHz), FWHM in kHz.
pub fn line_profile(center: f64, fwhm_khz: f64, amplitude: f64, f: f64) -> f64 {
    LineShape::Lorentzian.eval(center, fwhm_khz, amplitude, f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineShape {
    #[default]
    Lorentzian,
    Gaussian,
}

impl LineShape {
    pub fn eval(self, center: f64, fwhm_khz: f64, amplitude: f64, f: f64) -> f64 {
        let half = 0.5e-3 * fwhm_khz;
        let x = (f - center) / half;
        match self {
            LineShape::Lorentzian => amplitude / (1.0 + x * x),
            LineShape::Gaussian => amplitude * (-std::f64::consts::LN_2 * x * x).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    /// Beam power at the monitor position, µW.
    pub power_uw: f64,
    pub mode: SelectionMode,
    /// Light shift of the common offset, MHz/µW.
    pub lightshift_slope: f64,
    /// Power broadening, kHz/µW.
    pub broadening_slope: f64,
    /// FWHM at zero power without gradient, kHz.
    pub base_linewidth: f64,
    /// Peak height in relative-fluorescence units.
    pub amplitude: f64,
    /// Per-label height overrides.
    pub amplitude_overrides: Vec<(PeakLabel, f64)>,
    /// Unshifted resonance, MHz.
    pub f_hyperfine: f64,
    pub shape: LineShape,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            power_uw: 70.0,
            mode: SelectionMode::All,
            lightshift_slope: 0.0007,
            broadening_slope: 1.5,
            base_linewidth: 30.0,
            amplitude: 0.4,
            amplitude_overrides: Vec::new(),
            f_hyperfine: F_HYPERFINE_REFERENCE_MHZ,
            shape: LineShape::Lorentzian,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.power_uw >= 0.0 && self.power_uw.is_finite()) {
            return Err(Error::InvalidInput("beam power must be non-negative".into()));
        }
        if !(self.base_linewidth > 0.0 && self.base_linewidth.is_finite()) {
            return Err(Error::InvalidInput("base linewidth must be positive".into()));
        }
        if !self.lightshift_slope.is_finite() || !self.broadening_slope.is_finite() {
            return Err(Error::InvalidInput("slopes must be finite".into()));
        }
        if !(self.amplitude >= 0.0) || self.amplitude_overrides.iter().any(|(_, a)| !(*a >= 0.0)) {
            return Err(Error::InvalidInput("amplitudes must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_power(&self, power_uw: f64) -> Self {
        Self {
            power_uw,
            ..self.clone()
        }
    }

    /// Common resonance offset including the light shift, MHz.
    pub fn f_offset(&self) -> f64 {
        self.f_hyperfine + self.lightshift_slope * self.power_uw
    }

    /// Homogeneous FWHM without gradient broadening, kHz.
    pub fn fwhm_khz(&self) -> f64 {
        self.base_linewidth + self.broadening_slope * self.power_uw
    }

    fn amplitude_of(&self, label: PeakLabel) -> f64 {
        self.amplitude_overrides
            .iter()
            .find(|(l, _)| *l == label)
            .map_or(self.amplitude, |(_, a)| *a)
    }
}

/// The simulated trap: coil response and the field inhomogeneity.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub calibration: CoilCalibration,
    /// G/mm along the ensemble.
    pub gradient: f64,
    /// Ensemble extent, mm.
    pub ensemble_length: f64,
}

impl Environment {
    pub fn new(calibration: CoilCalibration) -> Self {
        Self {
            calibration,
            gradient: 0.0,
            ensemble_length: 0.0,
        }
    }

    /// Environment with the given zero-current field and coil gains.
    pub fn with_ambient(ambient: FieldVector, gains: [f64; 3]) -> Result<Self> {
        if gains.iter().any(|k| *k == 0.0 || !k.is_finite()) {
            return Err(Error::InvalidInput("coil gains must be finite and non-zero".into()));
        }
        let b = ambient.to_array();
        let i0 = [0, 1, 2].map(|j| -b[j] / gains[j]);
        Ok(Self::new(CoilCalibration::from_values(gains, i0, F_HYPERFINE_REFERENCE_MHZ)))
    }

    pub fn with_gradient(mut self, gradient: f64, ensemble_length: f64) -> Self {
        self.gradient = gradient;
        self.ensemble_length = ensemble_length;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gradient >= 0.0) || !(self.ensemble_length >= 0.0) {
            return Err(Error::InvalidInput("gradient and ensemble length must be non-negative".into()));
        }
        Ok(())
    }

    pub fn ambient_field(&self) -> FieldVector {
        self.calibration.ambient_field()
    }

    pub fn zero_crossings(&self) -> [f64; 3] {
        [0, 1, 2].map(|j| self.calibration.axes[j].i0.value)
    }

    /// FWHM added by the gradient to a line with |η| = 1, kHz.
    pub fn gradient_fwhm_khz(&self) -> f64 {
        1e3 * ZEEMAN_RATE_MHZ_PER_G * self.gradient * self.ensemble_length
    }
}

pub fn field_at(env: &Environment, currents: [f64; 3]) -> FieldVector {
    env.calibration.field_at(currents)
}

/// One simulated line of the spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulatedLine {
    pub label: PeakLabel,
    pub center: f64,
    pub fwhm_khz: f64,
    pub amplitude: f64,
}

pub fn spectrum_lines(env: &Environment, beam: &BeamConfig, currents: [f64; 3]) -> Vec<SimulatedLine> {
    let b = field_at(env, currents);
    let base = beam.fwhm_khz();
    let grad = env.gradient_fwhm_khz();
    predict_peaks(b, beam.f_offset(), beam.mode)
        .into_iter()
        .map(|p| SimulatedLine {
            label: p.label,
            center: p.frequency_mhz,
            fwhm_khz: base + p.eta.abs() * grad,
            amplitude: beam.amplitude_of(p.label),
        })
        .collect()
}

/// Noise-free relative fluorescence at `f`.
pub fn model_signal(lines: &[SimulatedLine], shape: LineShape, f: f64) -> f64 {
    lines.iter().map(|l| shape.eval(l.center, l.fwhm_khz, l.amplitude, f)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    /// Exact model signal, no counts recorded.
    None,
    /// Poisson counts with this mean background per point.
    Poisson { background: f64 },
}

/// One frequency sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    /// Sideband frequency, MHz, strictly increasing.
    pub grid: Vec<f64>,
    pub signal: Vec<f64>,
    /// Coil currents (I_x, I_y, I_z), A.
    pub currents: [f64; 3],
    pub power_uw: f64,
    /// Per-point (N_f, N_b).
    pub raw_counts: Option<Vec<(u64, u64)>>,
}

impl Scan {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidInput("empty frequency grid".into()));
        }
        if self.signal.len() != self.grid.len() {
            return Err(Error::InvalidInput("signal and grid lengths differ".into()));
        }
        validate_grid(&self.grid)?;
        if let Some(raw) = &self.raw_counts {
            if raw.len() != self.grid.len() {
                return Err(Error::InvalidInput("raw counts and grid lengths differ".into()));
            }
            for (i, (&(nf, nb), &s)) in raw.iter().zip(&self.signal).enumerate() {
                let expected = normalized_signal(nf, nb);
                if !signal_matches(s, expected) {
                    return Err(Error::InconsistentSignal {
                        line: i + 1,
                        signal: s,
                        expected,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Per-point 1σ of the signal from counting statistics, if counts exist.
    pub fn signal_sigmas(&self) -> Option<Vec<f64>> {
        self.raw_counts.as_ref().map(|raw| {
            raw.iter()
                .map(|&(nf, nb)| {
                    let (nf, nb) = (nf.max(1) as f64, nb as f64);
                    (nf / (nb * nb) + nf * nf / (nb * nb * nb)).sqrt()
                })
                .collect()
        })
    }
}

/// Background-compensated relative fluorescence.
pub fn normalized_signal(n_f: u64, n_b: u64) -> f64 {
    (n_f as f64 - n_b as f64) / n_b as f64
}

pub(crate) fn signal_matches(signal: f64, expected: f64) -> bool {
    (signal - expected).abs() <= 1e-9 * expected.abs().max(1.0)
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if let Some(i) = grid.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::NonMonotoneGrid { line: i + 2 });
    }
    if grid.iter().any(|f| !f.is_finite()) {
        return Err(Error::InvalidInput("non-finite grid value".into()));
    }
    Ok(())
}

/// Evenly spaced grid from `start` to `stop` inclusive (within half a step).
pub fn linear_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop > start) {
        return Err(Error::InvalidInput("grid needs stop > start and step > 0".into()));
    }
    let n = ((stop - start) / step + 0.5).floor() as usize + 1;
    Ok((0..n).map(|i| start + step * i as f64).collect())
}

pub fn simulate_scan(
    env: &Environment,
    beam: &BeamConfig,
    currents: [f64; 3],
    grid: &[f64],
    noise: Noise,
    seed: u64,
) -> Result<Scan> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty frequency grid".into()));
    }
    validate_grid(grid)?;
    env.validate()?;
    beam.validate()?;
    let lines = spectrum_lines(env, beam, currents);
    let clean = grid.iter().map(|&f| model_signal(&lines, beam.shape, f));
    let (signal, raw_counts) = match noise {
        Noise::None => (clean.collect(), None),
        Noise::Poisson { background } => {
            if !(background >= 1.0 && background.is_finite()) {
                return Err(Error::InvalidInput("background counts must be at least 1".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bg = Poisson::new(background).map_err(|e| Error::InvalidInput(e.to_string()))?;
            let mut raw = Vec::with_capacity(grid.len());
            let mut signal = Vec::with_capacity(grid.len());
            for s in clean {
                // N_b is drawn conditioned on N_b > 0 so the ratio exists
                let nb = loop {
                    let n = bg.sample(&mut rng) as u64;
                    if n > 0 {
                        break n;
                    }
                };
                let fl = Poisson::new(background * (1.0 + s)).map_err(|e| Error::Numerical(e.to_string()))?;
                let nf = fl.sample(&mut rng) as u64;
                raw.push((nf, nb));
                signal.push(normalized_signal(nf, nb));
            }
            (signal, Some(raw))
        }
    };
    Ok(Scan {
        grid: grid.to_vec(),
        signal,
        currents,
        power_uw: beam.power_uw,
        raw_counts,
    })
}

/// One entry of a scan batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanJob {
    pub currents: [f64; 3],
    pub power_uw: f64,
    pub seed: u64,
}

/// Simulate many independent scans; output order follows `jobs`.
pub fn simulate_batch(
    env: &Environment,
    beam: &BeamConfig,
    jobs: &[ScanJob],
    grid: &[f64],
    noise: Noise,
    exec: Execution,
) -> Result<Vec<Scan>> {
    exec::map_slice(exec, jobs, |job| {
        simulate_scan(env, &beam.with_power(job.power_uw), job.currents, grid, noise, job.seed)
    })
    .into_iter()
    .collect()
}
