//! Closed-loop field nulling by coordinate descent over the coil currents.
//!
//! Each step sweeps one coil current, turns every simulated scan into a
//! field-magnitude estimate, fits the cone `m(I) = √(a²(I − I*)² + b²)` to the
//! sweep and moves that coil to `I*`. `b` is what remains of |B| with this
//! component nulled. The sweep span halves every round and the beam power
//! follows the configured schedule.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, derive_seed, Execution};
use crate::levels::{Axis, SelectionMode, ZEEMAN_RATE_MHZ_PER_G};
use crate::lsq::{LeastSquaresProblem, LevenbergMarquardt};
use crate::measured::Measured;
use crate::peaks::{detect_peaks, DetectConfig, PeakFit};
use crate::synth::{self, BeamConfig, Environment, Noise, Scan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplittingMetric {
    /// Outermost detected peaks, converted with Δη = 3.
    #[default]
    MaxPeakSpread,
    /// Fit of the full seven-line model with |B| as a parameter.
    FittedBMagnitude,
}

impl std::str::FromStr for SplittingMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "max_peak_spread" => Ok(SplittingMetric::MaxPeakSpread),
            "fitted_b_magnitude" => Ok(SplittingMetric::FittedBMagnitude),
            other => Err(Error::InvalidInput(format!("unknown splitting metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeConfig {
    pub axis_order: [Axis; 3],
    pub sweep_points: usize,
    /// Full sweep width per axis in the first round, A (indexed x, y, z).
    pub sweep_span: [f64; 3],
    pub rounds: usize,
    /// Beam power per round, µW.
    pub power_schedule: Vec<f64>,
    pub metric: SplittingMetric,
    pub start_currents: [f64; 3],
    pub beam: BeamConfig,
    /// Scan grid `(start, stop, step)` in MHz.
    pub grid: (f64, f64, f64),
    pub noise: Noise,
    pub detect: DetectConfig,
}

impl Default for MinimizeConfig {
    fn default() -> Self {
        let beam = BeamConfig::default();
        let f0 = beam.f_hyperfine;
        Self {
            axis_order: [Axis::X, Axis::Y, Axis::Z],
            sweep_points: 9,
            sweep_span: [20.0, 16.0, 2.0],
            rounds: 2,
            power_schedule: vec![70.0, 10.0],
            metric: SplittingMetric::MaxPeakSpread,
            start_currents: [0.0; 3],
            beam,
            grid: (f0 - 17.0, f0 + 17.0, 0.01),
            noise: Noise::Poisson { background: 5000.0 },
            detect: DetectConfig::default(),
        }
    }
}

impl MinimizeConfig {
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 3];
        for a in self.axis_order {
            seen[a.index()] = true;
        }
        if seen.contains(&false) {
            return Err(Error::InvalidInput("axis_order must be a permutation of x, y, z".into()));
        }
        if self.sweep_points < 3 {
            return Err(Error::InvalidInput("sweep_points must be at least 3".into()));
        }
        if self.rounds < 1 {
            return Err(Error::InvalidInput("rounds must be at least 1".into()));
        }
        if self.power_schedule.len() != self.rounds {
            return Err(Error::InvalidInput(format!(
                "power schedule has {} entries for {} rounds",
                self.power_schedule.len(),
                self.rounds
            )));
        }
        if self.sweep_span.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidInput("sweep spans must be positive".into()));
        }
        if self.beam.mode != SelectionMode::All {
            return Err(Error::InvalidInput(
                "field nulling needs the full seven-line spectrum (mode = all)".into(),
            ));
        }
        self.beam.validate()
    }
}

/// Cone fit to one sweep. `b` is reported as √max(q, 0) with q = b² fitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeFit {
    /// G/A.
    pub slope: Measured,
    /// A.
    pub i_star: Measured,
    /// G.
    pub b: Measured,
    pub chi2_reduced: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub round: usize,
    pub axis: Axis,
    pub power_uw: f64,
    /// Currents (I_x, I_y, I_z) of each sweep point, A.
    pub currents: Vec<[f64; 3]>,
    /// Field-magnitude estimate per sweep point, G; `None` where undefined.
    pub metric: Vec<Option<Measured>>,
    /// `None` when the cone fit failed and the sweep argmin was used.
    pub fit: Option<ConeFit>,
    pub chosen_current: f64,
    /// Residual |B| after this step, G.
    pub estimated_field: Measured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizeTrace {
    pub steps: Vec<StepRecord>,
    pub final_currents: [f64; 3],
    /// Field estimate from the last step, G.
    pub final_field: Measured,
    /// Estimate after the last step of each round, G.
    pub round_estimates: Vec<Measured>,
    /// |B| of the simulated environment at the final currents, G.
    pub true_final_field: f64,
}

/// |B| estimate (G) from one scan.
pub fn splitting_metric(scan: &Scan, metric: SplittingMetric, detect: &DetectConfig) -> Option<Measured> {
    let fits = detect_peaks(scan, detect).ok()?;
    if fits.is_empty() {
        return None;
    }
    match metric {
        SplittingMetric::MaxPeakSpread => Some(spread_metric(&fits)),
        SplittingMetric::FittedBMagnitude => fitted_magnitude(scan, &fits).or_else(|| Some(spread_metric(&fits))),
    }
}

const ETA_SPAN: f64 = 3.0;

fn merged_sigma(fits: &[PeakFit]) -> f64 {
    let mean_fwhm = fits.iter().map(|f| f.fwhm.value).sum::<f64>() / fits.len() as f64;
    1e-3 * mean_fwhm / (ZEEMAN_RATE_MHZ_PER_G * ETA_SPAN)
}

fn spread_metric(fits: &[PeakFit]) -> Measured {
    let scale = ZEEMAN_RATE_MHZ_PER_G * ETA_SPAN;
    let lo = fits.first().unwrap();
    let hi = fits.last().unwrap();
    let spread = hi.center.value - lo.center.value;
    let fit_sigma = lo.center.sigma.hypot(hi.center.sigma) / scale;
    let sigma = if fits.len() >= 7 {
        fit_sigma.max(1e-5)
    } else {
        // some lines are blended and the outermost ones may be hidden
        fit_sigma.hypot(merged_sigma(fits))
    };
    Measured::new(spread / scale, sigma)
}

/// Seven equal Lorentzians with common width: `[f0, B, fwhm, amp, baseline]`.
struct SevenLines<'a> {
    f: &'a [f64],
    y: &'a [f64],
    sigma: &'a [f64],
}

const ETAS: [f64; 7] = [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5];

impl LeastSquaresProblem for SevenLines<'_> {
    fn n_params(&self) -> usize {
        5
    }
    fn n_residuals(&self) -> usize {
        self.f.len()
    }
    fn residuals(&self, p: &DVector<f64>, out: &mut DVector<f64>) {
        let h = 0.5 * p[2].abs();
        for (i, &f) in self.f.iter().enumerate() {
            let mut m = p[4];
            for eta in ETAS {
                let x = (f - p[0] - eta * ZEEMAN_RATE_MHZ_PER_G * p[1]) / h;
                m += p[3] / (1.0 + x * x);
            }
            out[i] = (self.y[i] - m) / self.sigma[i];
        }
    }
    fn jacobian(&self, p: &DVector<f64>, out: &mut DMatrix<f64>) {
        let h = 0.5 * p[2].abs();
        for (i, &f) in self.f.iter().enumerate() {
            let s = 1.0 / self.sigma[i];
            let (mut d0, mut db, mut dw, mut da) = (0.0, 0.0, 0.0, 0.0);
            for eta in ETAS {
                let x = (f - p[0] - eta * ZEEMAN_RATE_MHZ_PER_G * p[1]) / h;
                let den = 1.0 + x * x;
                let dx = p[3] * 2.0 * x / (h * den * den);
                d0 += dx;
                db += dx * eta * ZEEMAN_RATE_MHZ_PER_G;
                dw += p[2].signum() * p[3] * x * x / (h * den * den);
                da += 1.0 / den;
            }
            out[(i, 0)] = -s * d0;
            out[(i, 1)] = -s * db;
            out[(i, 2)] = -s * dw;
            out[(i, 3)] = -s * da;
            out[(i, 4)] = -s;
        }
    }
}

fn fitted_magnitude(scan: &Scan, fits: &[PeakFit]) -> Option<Measured> {
    let lo = fits.first()?.center.value;
    let hi = fits.last()?.center.value;
    let width = 1e-3 * fits.iter().map(|f| f.fwhm.value).fold(0.0, f64::max);
    let sel: Vec<usize> = (0..scan.len())
        .filter(|&i| scan.grid[i] >= lo - 4.0 * width && scan.grid[i] <= hi + 4.0 * width)
        .collect();
    if sel.len() < 10 {
        return None;
    }
    let f: Vec<f64> = sel.iter().map(|&i| scan.grid[i]).collect();
    let y: Vec<f64> = sel.iter().map(|&i| scan.signal[i]).collect();
    let sig: Vec<f64> = match scan.signal_sigmas() {
        Some(s) => sel.iter().map(|&i| s[i]).collect(),
        None => vec![1.0; sel.len()],
    };
    let problem = SevenLines { f: &f, y: &y, sigma: &sig };
    let b0 = ((hi - lo) / (ZEEMAN_RATE_MHZ_PER_G * ETA_SPAN)).max(0.2 * width / ZEEMAN_RATE_MHZ_PER_G);
    let amp0 = fits.iter().map(|p| p.amplitude.value).fold(0.0, f64::max) / if fits.len() == 1 { 3.0 } else { 1.0 };
    let start = DVector::from_vec(vec![0.5 * (lo + hi), b0, width, amp0, 0.0]);
    let sol = LevenbergMarquardt::new().minimize(&problem, start).ok()?;
    let b = sol.params[1].abs();
    let sigma = match sol.covariance() {
        Some(mut cov) => {
            if scan.raw_counts.is_none() {
                cov *= sol.reduced_chi2();
            }
            cov[(1, 1)].max(0.0).sqrt().max(1e-5)
        }
        None => merged_sigma(fits),
    };
    b.is_finite().then(|| Measured::new(b, sigma))
}

struct ConeProblem<'a> {
    x: &'a [f64],
    m: &'a [f64],
    sigma: &'a [f64],
}

impl ConeProblem<'_> {
    // params: slope a, i_star, q = b²
    fn value(p: &DVector<f64>, x: f64) -> (f64, bool) {
        let d = x - p[1];
        let s = p[0] * p[0] * d * d + p[2];
        if s > 1e-18 {
            (s.sqrt(), true)
        } else {
            (1e-9, false)
        }
    }
}

impl LeastSquaresProblem for ConeProblem<'_> {
    fn n_params(&self) -> usize {
        3
    }
    fn n_residuals(&self) -> usize {
        self.x.len()
    }
    fn residuals(&self, p: &DVector<f64>, out: &mut DVector<f64>) {
        for i in 0..self.x.len() {
            out[i] = (self.m[i] - Self::value(p, self.x[i]).0) / self.sigma[i];
        }
    }
    fn jacobian(&self, p: &DVector<f64>, out: &mut DMatrix<f64>) {
        for i in 0..self.x.len() {
            let (v, live) = Self::value(p, self.x[i]);
            let s = -1.0 / self.sigma[i];
            if live {
                let d = self.x[i] - p[1];
                out[(i, 0)] = s * p[0] * d * d / v;
                out[(i, 1)] = -s * p[0] * p[0] * d / v;
                out[(i, 2)] = s * 0.5 / v;
            } else {
                out[(i, 0)] = 0.0;
                out[(i, 1)] = 0.0;
                out[(i, 2)] = 0.0;
            }
        }
    }
}

/// Fit `m(I) = √(a²(I − I*)² + b²)` to sweep measurements.
///
/// The covariance is inflated by the reduced χ² when that exceeds one.
pub fn fit_cone(currents: &[f64], values: &[Measured]) -> Result<ConeFit> {
    let n = currents.len();
    if n < 4 || values.len() != n {
        return Err(Error::InvalidInput("cone fit needs at least 4 points".into()));
    }
    let m: Vec<f64> = values.iter().map(|v| v.value).collect();
    let sigma: Vec<f64> = values.iter().map(|v| v.sigma.max(1e-6)).collect();
    let imin = (0..n).min_by(|&a, &b| m[a].total_cmp(&m[b])).unwrap();
    let x0 = currents[imin];
    let slope0 = (0..n)
        .filter(|&i| (currents[i] - x0).abs() > 0.0)
        .map(|i| (m[i] - m[imin]).abs() / (currents[i] - x0).abs())
        .fold(0.0, f64::max)
        .max(1e-6);
    let q0 = (m[imin] * m[imin]).max(1e-6);
    let problem = ConeProblem {
        x: currents,
        m: &m,
        sigma: &sigma,
    };
    let sol = LevenbergMarquardt::new().minimize(&problem, DVector::from_vec(vec![slope0, x0, q0]))?;
    let mut cov = sol
        .covariance()
        .ok_or_else(|| Error::Numerical("cone fit is singular".into()))?;
    let chi2 = sol.reduced_chi2();
    if chi2 > 1.0 {
        cov *= chi2;
    }
    let sd = |i: usize| cov[(i, i)].max(0.0).sqrt();
    let q = sol.params[2].max(0.0);
    let b = q.sqrt();
    Ok(ConeFit {
        slope: Measured::new(sol.params[0].abs(), sd(0)),
        i_star: Measured::new(sol.params[1], sd(1)),
        b: Measured::new(b, (q + sd(2)).sqrt() - b),
        chi2_reduced: chi2,
    })
}

fn sweep_currents(center: f64, span: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|k| center - 0.5 * span + span * k as f64 / (points - 1) as f64)
        .collect()
}

pub fn run_minimization(env: &Environment, cfg: &MinimizeConfig, seed: u64) -> Result<MinimizeTrace> {
    run_minimization_with(env, cfg, seed, Execution::default())
}

/// As [`run_minimization`], choosing how the scans of one sweep are spread.
pub fn run_minimization_with(
    env: &Environment,
    cfg: &MinimizeConfig,
    seed: u64,
    exec: Execution,
) -> Result<MinimizeTrace> {
    cfg.validate()?;
    env.validate()?;
    let grid = synth::linear_grid(cfg.grid.0, cfg.grid.1, cfg.grid.2)?;
    let mut currents = cfg.start_currents;
    let mut steps = Vec::new();
    let mut round_estimates = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let power = cfg.power_schedule[round];
        let beam = cfg.beam.with_power(power);
        let shrink = 0.5f64.powi(round as i32);
        for (slot, &axis) in cfg.axis_order.iter().enumerate() {
            let j = axis.index();
            let sweep = sweep_currents(currents[j], cfg.sweep_span[j] * shrink, cfg.sweep_points);
            let points: Vec<[f64; 3]> = sweep
                .iter()
                .map(|&i| {
                    let mut c = currents;
                    c[j] = i;
                    c
                })
                .collect();
            let metric: Vec<Option<Measured>> = exec::map_range(exec, points.len(), |k| {
                let s = derive_seed(seed, &[round as u64, slot as u64, k as u64]);
                let scan = synth::simulate_scan(env, &beam, points[k], &grid, cfg.noise, s).ok()?;
                splitting_metric(&scan, cfg.metric, &cfg.detect)
            });
            let valid: Vec<(f64, Measured)> = sweep
                .iter()
                .zip(&metric)
                .filter_map(|(&i, m)| m.map(|m| (i, m)))
                .collect();
            if 2 * valid.len() < sweep.len() {
                return Err(Error::Numerical(format!(
                    "round {round}, axis {}: metric undefined at {} of {} sweep points",
                    axis.name(),
                    sweep.len() - valid.len(),
                    sweep.len()
                )));
            }
            let (xs, ms): (Vec<f64>, Vec<Measured>) = valid.iter().copied().unzip();
            let lo = sweep[0];
            let hi = sweep[sweep.len() - 1];
            let fit = fit_cone(&xs, &ms).ok().filter(|f| f.i_star.value.is_finite());
            let (chosen, estimated) = match &fit {
                Some(f) => (f.i_star.value.clamp(lo, hi), f.b),
                None => {
                    let best = valid.iter().min_by(|a, b| a.1.value.total_cmp(&b.1.value)).unwrap();
                    (best.0, best.1)
                }
            };
            currents[j] = chosen;
            steps.push(StepRecord {
                round,
                axis,
                power_uw: power,
                currents: points,
                metric,
                fit,
                chosen_current: chosen,
                estimated_field: estimated,
            });
        }
        round_estimates.push(steps.last().unwrap().estimated_field);
    }

    Ok(MinimizeTrace {
        final_field: *round_estimates.last().unwrap(),
        final_currents: currents,
        round_estimates,
        true_final_field: synth::field_at(env, currents).magnitude(),
        steps,
    })
}

/// Independent runs over several environments and seeds.
pub fn run_many(
    envs: &[(Environment, u64)],
    cfg: &MinimizeConfig,
    exec: Execution,
) -> Vec<Result<MinimizeTrace>> {
    // parallelism goes over runs; the sweeps inside stay sequential
    exec::map_slice(exec, envs, |(env, seed)| {
        run_minimization_with(env, cfg, *seed, Execution::Sequential)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levels::FieldVector;

    const GAINS: [f64; 3] = [0.362, 0.434, 3.586];

    #[test]
    fn cone_fit_recovers_exact_hyperbola() {
        let xs: Vec<f64> = (0..9).map(|i| -4.0 + i as f64).collect();
        let ms: Vec<Measured> = xs
            .iter()
            .map(|&x| Measured::new((0.36f64 * (x - 0.7)).hypot(0.2), 1e-4))
            .collect();
        let f = fit_cone(&xs, &ms).unwrap();
        assert!((f.i_star.value - 0.7).abs() < 1e-6);
        assert!((f.slope.value - 0.36).abs() < 1e-6);
        assert!((f.b.value - 0.2).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        let mut cfg = MinimizeConfig::default();
        cfg.validate().unwrap();
        cfg.axis_order = [Axis::X, Axis::X, Axis::Z];
        assert!(cfg.validate().is_err());
        let mut cfg = MinimizeConfig::default();
        cfg.power_schedule = vec![70.0];
        assert!(cfg.validate().is_err());
        let mut cfg = MinimizeConfig::default();
        cfg.sweep_points = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn nulls_a_moderate_ambient_field() {
        let env = Environment::with_ambient(FieldVector::new(0.5, -0.3, 1.0), GAINS).unwrap();
        let trace = run_minimization(&env, &MinimizeConfig::default(), 11).unwrap();
        assert_eq!(trace.steps.len(), 6);
        assert!(trace.final_field.value <= 0.05, "{:?}", trace.final_field);
        assert!(trace.true_final_field <= 0.05, "{}", trace.true_final_field);
        for s in &trace.steps {
            let lo = s.currents[0][s.axis.index()];
            let hi = s.currents.last().unwrap()[s.axis.index()];
            assert!(s.chosen_current >= lo && s.chosen_current <= hi);
        }
    }

    #[test]
    fn already_nulled_field_stays() {
        let env = Environment::with_ambient(FieldVector::ZERO, GAINS).unwrap();
        let cfg = MinimizeConfig {
            start_currents: env.zero_crossings(),
            ..MinimizeConfig::default()
        };
        let trace = run_minimization(&env, &cfg, 3).unwrap();
        for j in 0..3 {
            let step = cfg.sweep_span[j] / (cfg.sweep_points - 1) as f64 / 2.0;
            assert!((trace.final_currents[j] - env.zero_crossings()[j]).abs() <= step);
        }
    }

    #[test]
    fn execution_modes_agree() {
        let env = Environment::with_ambient(FieldVector::new(0.2, 0.1, -0.4), GAINS).unwrap();
        let cfg = MinimizeConfig {
            rounds: 1,
            power_schedule: vec![40.0],
            ..MinimizeConfig::default()
        };
        let a = run_minimization_with(&env, &cfg, 5, Execution::Sequential).unwrap();
        let b = run_minimization_with(&env, &cfg, 5, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
