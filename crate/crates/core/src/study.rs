//! Synthetic data sets shaped like the calibration measurements, and seeded
//! Monte Carlo drivers for recovery studies.
//!
//! Three scans along one coil each make up the global design: `I_x` over
//! [−6, 6] A at (I_y, I_z) = (1.70, 0.14) A, `I_y` over [−3, 6] A at
//! I_x = −3 A, and `I_z` over [−0.7, 0.5] A at I_x = −3 A, I_y = 1.70 A. The
//! axial design steps `I_z` through ±0.15 A around the null with only the
//! η = ±1 components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::exec::{self, derive_seed, Execution};
use crate::fieldfit::{self, AxialFitResult, CoilCalibration, FitOptions, LabeledPoint};
use crate::levels::{distinct_etas, SelectionMode, ZEEMAN_RATE_MHZ_PER_G};
use crate::peaks::{assign_labels, detect_peaks, DetectConfig};
use crate::synth::{self, BeamConfig, Environment, Noise};

/// Published-style global calibration used as simulation truth.
pub fn reference_calibration() -> CoilCalibration {
    CoilCalibration::from_values([0.362, 0.434, 3.586], [0.985, 1.681, -0.145], 1250.065)
}

/// Truth for the axial study: (k_z G/A, I_z0 A, B_perp G, f_offset MHz).
pub const AXIAL_TRUTH: [f64; 4] = [3.753, -0.166, 0.007, 1250.065];

fn steps(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

/// Coil currents of the three single-coil sweeps.
pub fn global_design() -> Vec<[f64; 3]> {
    let mut out: Vec<[f64; 3]> = steps(-6.0, 6.0, 13).map(|x| [x, 1.70, 0.14]).collect();
    out.extend(steps(-3.0, 6.0, 10).map(|y| [-3.0, y, 0.14]));
    out.extend(steps(-0.7, 0.5, 13).map(|z| [-3.0, 1.70, z]));
    out
}

/// Every η at every design point with Gaussian frequency noise (MHz).
pub fn global_points(truth: &CoilCalibration, sigma_mhz: f64, seed: u64) -> Vec<LabeledPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma_mhz).expect("finite sigma");
    let etas = distinct_etas(SelectionMode::All);
    let mut out = Vec::new();
    for c in global_design() {
        for &eta in &etas {
            let f = truth.predict_frequency(c, eta) + noise.sample(&mut rng);
            out.push(LabeledPoint::new(c, eta, f, sigma_mhz));
        }
    }
    out
}

/// `I_z` steps around the null with I_x, I_y held fixed.
pub fn axial_design(center: f64, half_span: f64, n: usize) -> Vec<[f64; 3]> {
    steps(center - half_span, center + half_span, n)
        .map(|z| [-3.0, 1.70, z])
        .collect()
}

/// η = ±1 points from `|B| = √((k(I_z − I_z0))² + B_perp²)`.
pub fn axial_points(truth: [f64; 4], design: &[[f64; 3]], sigma_mhz: f64, seed: u64) -> Vec<LabeledPoint> {
    let [k, i0, bp, f0] = truth;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma_mhz).expect("finite sigma");
    let mut out = Vec::new();
    for &c in design {
        let mag = (k * (c[2] - i0)).hypot(bp);
        for eta in [-1.0, 1.0] {
            let f = f0 + eta * ZEEMAN_RATE_MHZ_PER_G * mag + noise.sample(&mut rng);
            out.push(LabeledPoint::new(c, eta, f, sigma_mhz));
        }
    }
    out
}

/// One global fit per seed on freshly drawn data.
pub fn global_recovery_trials(
    truth: &CoilCalibration,
    sigma_mhz: f64,
    base_seed: u64,
    trials: usize,
    exec: Execution,
) -> Vec<Result<CoilCalibration>> {
    let opts = FitOptions::default();
    exec::map_range(exec, trials, |t| {
        let pts = global_points(truth, sigma_mhz, derive_seed(base_seed, &[t as u64]));
        fieldfit::fit_global_auto(&pts, &opts)
    })
}

/// One axial fit per seed on the 11-step design around the true null.
pub fn axial_recovery_trials(
    truth: [f64; 4],
    sigma_mhz: f64,
    base_seed: u64,
    trials: usize,
    exec: Execution,
) -> Vec<Result<AxialFitResult>> {
    let opts = FitOptions::default();
    let design = axial_design(truth[1], 0.15, 11);
    exec::map_range(exec, trials, |t| {
        let pts = axial_points(truth, &design, sigma_mhz, derive_seed(base_seed, &[t as u64]));
        fieldfit::fit_axial_auto(&pts, &opts)
    })
}

/// True when every fitted parameter lies within `n` σ of `truth`.
pub fn all_within(fitted: &[crate::Measured], truth: &[f64], n: f64) -> bool {
    fitted.iter().zip(truth).all(|(m, t)| m.within_sigmas(*t, n))
}

/// Labeled points from simulated scans run through detection and labeling.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub points: Vec<LabeledPoint>,
    pub scans: usize,
    /// Scans whose peaks could not be labeled unambiguously.
    pub skipped: usize,
}

/// simulate → detect → label for every design point.
#[allow(clippy::too_many_arguments)]
pub fn labeled_points_from_scans(
    env: &Environment,
    beam: &BeamConfig,
    design: &[[f64; 3]],
    grid: &[f64],
    noise: Noise,
    detect: &DetectConfig,
    seed: u64,
    exec: Execution,
) -> Result<PipelineOutput> {
    let per_scan = exec::map_range(exec, design.len(), |k| -> Result<Option<Vec<LabeledPoint>>> {
        let scan = synth::simulate_scan(env, beam, design[k], grid, noise, derive_seed(seed, &[k as u64]))?;
        let fits = detect_peaks(&scan, detect)?;
        let labeled = assign_labels(&fits, beam.mode);
        if labeled.ambiguous || labeled.fits.is_empty() {
            return Ok(None);
        }
        Ok(Some(
            labeled
                .fits
                .iter()
                .filter_map(|f| f.label.map(|l| LabeledPoint::new(design[k], l.eta(), f.center.value, f.center.sigma)))
                .collect(),
        ))
    });
    let mut points = Vec::new();
    let mut skipped = 0;
    for r in per_scan {
        match r? {
            Some(p) => points.extend(p),
            None => skipped += 1,
        }
    }
    if points.is_empty() {
        return Err(Error::Numerical("no scan produced labeled peaks".into()));
    }
    Ok(PipelineOutput {
        points,
        scans: design.len(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn design_shapes() {
        let d = global_design();
        assert_eq!(d.len(), 36);
        assert_eq!(d[0], [-6.0, 1.70, 0.14]);
        assert!((d[12][0] - 6.0).abs() < 1e-12);
        let pts = global_points(&reference_calibration(), 0.01, 1);
        assert_eq!(pts.len(), 36 * 7);
        assert_eq!(pts, global_points(&reference_calibration(), 0.01, 1));
        let ax = axial_points(AXIAL_TRUTH, &axial_design(-0.166, 0.15, 11), 0.005, 2);
        assert_eq!(ax.len(), 22);
    }

    #[test]
    fn recovery_modes_agree() {
        let a = global_recovery_trials(&reference_calibration(), 0.01, 9, 4, Execution::Sequential);
        let b = global_recovery_trials(&reference_calibration(), 0.01, 9, 4, Execution::Parallel);
        let pa: Vec<_> = a.into_iter().map(|r| r.unwrap().param_vector()).collect();
        let pb: Vec<_> = b.into_iter().map(|r| r.unwrap().param_vector()).collect();
        assert_eq!(pa, pb);
    }
}
