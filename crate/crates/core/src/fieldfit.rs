//! Coil calibration from labelled peak frequencies.
//!
//! Model: `f = f_offset + η · 1.4 MHz/G · |B(I)|` with per-axis
//! `B_j = k_j · (I_j − I_j0)`. Parameters are ordered
//! `[k_x, k_y, k_z, I_x0, I_y0, I_z0, f_offset]` throughout, including the
//! covariance matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levels::{FieldVector, PeakLabel, ZEEMAN_RATE_MHZ_PER_G};
use crate::lsq::{self, LeastSquaresProblem, LevenbergMarquardt};
use crate::measured::Measured;

pub const GLOBAL_PARAM_NAMES: [&str; 7] = ["k_x", "k_y", "k_z", "i0_x", "i0_y", "i0_z", "f_offset"];
pub const AXIAL_PARAM_NAMES: [&str; 4] = ["k_z", "i0_z", "b_perp", "f_offset"];

/// |B| floor used inside the model so the Jacobian stays finite at zero field.
pub const FIELD_FLOOR_G: f64 = 1e-9;

/// One observed resonance: coil currents, its η and the measured frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub currents: [f64; 3],
    pub eta: f64,
    pub frequency: f64,
    pub sigma: f64,
}

impl LabeledPoint {
    pub fn new(currents: [f64; 3], eta: f64, frequency: f64, sigma: f64) -> Self {
        Self {
            currents,
            eta,
            frequency,
            sigma,
        }
    }
}

/// Replace missing (non-finite or non-positive) σ by the median of the rest.
pub fn fill_missing_sigmas(points: &mut [LabeledPoint]) -> Result<()> {
    let valid = |s: f64| s.is_finite() && s > 0.0;
    let mut good: Vec<f64> = points.iter().map(|p| p.sigma).filter(|s| valid(*s)).collect();
    if good.len() == points.len() {
        return Ok(());
    }
    if good.is_empty() {
        return Err(Error::InvalidInput("no point carries a frequency uncertainty".into()));
    }
    good.sort_by(f64::total_cmp);
    let mid = good.len() / 2;
    let median = if good.len().is_multiple_of(2) {
        0.5 * (good[mid - 1] + good[mid])
    } else {
        good[mid]
    };
    for p in points.iter_mut().filter(|p| !valid(p.sigma)) {
        p.sigma = median;
    }
    Ok(())
}

fn validate_points(points: &[LabeledPoint], min_points: usize) -> Result<()> {
    if points.len() < min_points {
        return Err(Error::InvalidInput(format!(
            "need at least {min_points} points, got {}",
            points.len()
        )));
    }
    for (i, p) in points.iter().enumerate() {
        if !(p.sigma.is_finite() && p.sigma > 0.0) {
            return Err(Error::InvalidInput(format!("point {i}: sigma must be positive")));
        }
        if PeakLabel::from_eta(p.eta).is_none() {
            return Err(Error::InvalidInput(format!("point {i}: eta {} is not an allowed shift", p.eta)));
        }
        if !p.frequency.is_finite() || p.currents.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput(format!("point {i}: non-finite value")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct AxisCalibration {
    /// Field per unit current, G/A.
    pub k: Measured,
    /// Zero-crossing current, A.
    pub i0: Measured,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct FitStats {
    pub chi2_reduced: f64,
    pub n_points: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoilCalibration {
    pub axes: [AxisCalibration; 3],
    pub f_offset: Measured,
    /// Row-major 7×7 covariance in [`GLOBAL_PARAM_NAMES`] order.
    pub covariance: Vec<f64>,
    pub stats: FitStats,
}

impl CoilCalibration {
    /// Calibration with exact (zero-uncertainty) parameters.
    pub fn from_values(k: [f64; 3], i0: [f64; 3], f_offset: f64) -> Self {
        Self::from_measured(
            k.map(Measured::exact),
            i0.map(Measured::exact),
            Measured::exact(f_offset),
        )
    }

    /// Covariance is taken diagonal from the supplied σ values.
    pub fn from_measured(k: [Measured; 3], i0: [Measured; 3], f_offset: Measured) -> Self {
        let axes = [0, 1, 2].map(|j| AxisCalibration { k: k[j], i0: i0[j] });
        let sig = [k[0], k[1], k[2], i0[0], i0[1], i0[2], f_offset].map(|m| m.sigma);
        let mut covariance = vec![0.0; 49];
        for (i, s) in sig.iter().enumerate() {
            covariance[i * 7 + i] = s * s;
        }
        Self {
            axes,
            f_offset,
            covariance,
            stats: FitStats::default(),
        }
    }

    pub fn param_vector(&self) -> [f64; 7] {
        let a = &self.axes;
        [
            a[0].k.value,
            a[1].k.value,
            a[2].k.value,
            a[0].i0.value,
            a[1].i0.value,
            a[2].i0.value,
            self.f_offset.value,
        ]
    }

    pub fn param_measured(&self) -> [Measured; 7] {
        let a = &self.axes;
        [a[0].k, a[1].k, a[2].k, a[0].i0, a[1].i0, a[2].i0, self.f_offset]
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(7, 7, &self.covariance)
    }

    pub fn field_at(&self, currents: [f64; 3]) -> FieldVector {
        FieldVector::from_array([0, 1, 2].map(|j| self.axes[j].k.value * (currents[j] - self.axes[j].i0.value)))
    }

    /// Field with all coil currents at zero: `B_j = −k_j · I_j0`.
    pub fn ambient_field(&self) -> FieldVector {
        self.field_at([0.0; 3])
    }

    pub fn gains(&self) -> [f64; 3] {
        [0, 1, 2].map(|j| self.axes[j].k.value)
    }

    /// |B| at the given currents with σ from the full covariance.
    pub fn field_magnitude(&self, currents: [f64; 3]) -> Measured {
        let b = self.field_at(currents).to_array();
        let mag = self.field_at(currents).magnitude().max(FIELD_FLOOR_G);
        let mut grad = [0.0; 7];
        for j in 0..3 {
            let d = currents[j] - self.axes[j].i0.value;
            grad[j] = b[j] * d / mag;
            grad[3 + j] = -b[j] * self.axes[j].k.value / mag;
        }
        let cov = self.covariance_matrix();
        let mut var = 0.0;
        for r in 0..7 {
            for c in 0..7 {
                var += grad[r] * cov[(r, c)] * grad[c];
            }
        }
        Measured::new(mag, var.max(0.0).sqrt())
    }

    /// Frequency of the component η at the given currents.
    pub fn predict_frequency(&self, currents: [f64; 3], eta: f64) -> f64 {
        self.f_offset.value + eta * ZEEMAN_RATE_MHZ_PER_G * self.field_at(currents).magnitude()
    }
}

/// Currents that null each field component, with their 1σ.
pub fn currents_for_zero(cal: &CoilCalibration) -> [Measured; 3] {
    [0, 1, 2].map(|j| cal.axes[j].i0)
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub solver: LevenbergMarquardt,
    /// Relative singular-value threshold for declaring parameters unidentifiable.
    pub rank_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            solver: LevenbergMarquardt::default(),
            rank_tolerance: 1e-9,
        }
    }
}

struct GlobalProblem<'a> {
    points: &'a [LabeledPoint],
}

impl GlobalProblem<'_> {
    fn field(p: &DVector<f64>, currents: &[f64; 3]) -> ([f64; 3], [f64; 3], f64) {
        let d = [0, 1, 2].map(|j| currents[j] - p[3 + j]);
        let b = [0, 1, 2].map(|j| p[j] * d[j]);
        let mag = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt().max(FIELD_FLOOR_G);
        (d, b, mag)
    }
}

impl LeastSquaresProblem for GlobalProblem<'_> {
    fn n_params(&self) -> usize {
        7
    }
    fn n_residuals(&self) -> usize {
        self.points.len()
    }
    fn residuals(&self, p: &DVector<f64>, out: &mut DVector<f64>) {
        for (i, pt) in self.points.iter().enumerate() {
            let (_, _, mag) = Self::field(p, &pt.currents);
            out[i] = (pt.frequency - pt.eta * ZEEMAN_RATE_MHZ_PER_G * mag - p[6]) / pt.sigma;
        }
    }
    fn jacobian(&self, p: &DVector<f64>, out: &mut DMatrix<f64>) {
        for (i, pt) in self.points.iter().enumerate() {
            let (d, b, mag) = Self::field(p, &pt.currents);
            let scale = pt.eta * ZEEMAN_RATE_MHZ_PER_G / (mag * pt.sigma);
            for j in 0..3 {
                out[(i, j)] = -scale * b[j] * d[j];
                out[(i, 3 + j)] = scale * b[j] * p[j];
            }
            out[(i, 6)] = -1.0 / pt.sigma;
        }
    }
}

fn unidentifiable_error(jac: &DMatrix<f64>, names: &[&str], tol: f64) -> Option<Error> {
    let bad = lsq::unidentifiable_params(jac, tol);
    if bad.is_empty() {
        None
    } else {
        Some(Error::Unidentifiable(bad.into_iter().map(|i| names[i].to_string()).collect()))
    }
}

/// Weighted least-squares fit of all seven calibration parameters.
///
/// Only |B| enters the model, so `(k_j, I_j0)` and `(−k_j, I_j0)` are equally
/// good; the returned branch has every `k_j` with the sign of `init`'s.
pub fn fit_global(points: &[LabeledPoint], init: &CoilCalibration, opts: &FitOptions) -> Result<CoilCalibration> {
    validate_points(points, 8)?;
    let problem = GlobalProblem { points };
    let start = DVector::from_row_slice(&init.param_vector());

    let mut jac0 = DMatrix::zeros(points.len(), 7);
    problem.jacobian(&start, &mut jac0);
    if let Some(e) = unidentifiable_error(&jac0, &GLOBAL_PARAM_NAMES, opts.rank_tolerance) {
        return Err(e);
    }

    let sol = opts.solver.minimize(&problem, start)?;
    if let Some(e) = unidentifiable_error(&sol.jacobian, &GLOBAL_PARAM_NAMES, opts.rank_tolerance) {
        return Err(e);
    }
    let mut cov = sol
        .covariance()
        .ok_or_else(|| Error::Numerical("singular normal matrix at the optimum".into()))?;
    let mut p = sol.params.clone();
    for j in 0..3 {
        let want = if init.axes[j].k.value < 0.0 { -1.0 } else { 1.0 };
        if p[j] * want < 0.0 {
            p[j] = -p[j];
            cov.row_mut(j).neg_mut();
            cov.column_mut(j).neg_mut();
        }
    }
    let m = |i: usize| Measured::new(p[i], cov[(i, i)].max(0.0).sqrt());
    let mut cal = CoilCalibration::from_measured([m(0), m(1), m(2)], [m(3), m(4), m(5)], m(6));
    cal.covariance = (0..7).flat_map(|i| (0..7).map(move |j| (i, j))).map(|(i, j)| cov[(i, j)]).collect();
    cal.stats = FitStats {
        chi2_reduced: sol.reduced_chi2(),
        n_points: points.len(),
        iterations: sol.iterations,
    };
    Ok(cal)
}

/// Fit with a data-driven starting point from [`initial_guess`].
pub fn fit_global_auto(points: &[LabeledPoint], opts: &FitOptions) -> Result<CoilCalibration> {
    let init = initial_guess(points)?;
    fit_global(points, &init, opts)
}

fn weighted_mean(pairs: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let (mut sw, mut swx) = (0.0, 0.0);
    for (x, s) in pairs {
        let w = 1.0 / (s * s);
        sw += w;
        swx += w * x;
    }
    (sw > 0.0).then(|| swx / sw)
}

fn estimate_f_offset(points: &[LabeledPoint]) -> f64 {
    weighted_mean(points.iter().filter(|p| p.eta == 0.0).map(|p| (p.frequency, p.sigma)))
        .or_else(|| weighted_mean(points.iter().map(|p| (p.frequency, p.sigma))))
        .unwrap_or(f64::NAN)
}

fn distinct_count(values: impl Iterator<Item = f64>) -> usize {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    v.len()
}

/// Least-squares solution of `rows · x ≈ rhs` via SVD.
fn linear_lstsq(rows: &[Vec<f64>], rhs: &[f64]) -> Option<DVector<f64>> {
    let n = rows.first()?.len();
    let a = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
    let b = DVector::from_row_slice(rhs);
    a.svd(true, true).solve(&b, 1e-12).ok()
}

/// Starting point for [`fit_global`].
///
/// `f_offset` comes from the η = 0 points (or the mean of all points). Each
/// η ≠ 0 point then gives |B|², which is quadratic in every current:
/// `|B|² = Σ_j (k_j² I_j² − 2 k_j² I_j0 I_j) + c`. A linear fit of that form
/// yields `k_j = √a_j` and `I_j0 = −b_j / 2a_j`.
pub fn initial_guess(points: &[LabeledPoint]) -> Result<CoilCalibration> {
    validate_points(points, 1)?;
    let f0 = estimate_f_offset(points);
    let varying: Vec<usize> = (0..3)
        .filter(|&j| distinct_count(points.iter().map(|p| p.currents[j])) >= 3)
        .collect();
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for p in points.iter().filter(|p| p.eta != 0.0) {
        let b = (p.frequency - f0) / (ZEEMAN_RATE_MHZ_PER_G * p.eta);
        let mut row = Vec::with_capacity(2 * varying.len() + 1);
        for &j in &varying {
            row.push(p.currents[j] * p.currents[j]);
            row.push(p.currents[j]);
        }
        row.push(1.0);
        rows.push(row);
        rhs.push(b * b);
    }
    let mut k = [1.0; 3];
    let n = points.len() as f64;
    let mut i0 = [0, 1, 2].map(|j| points.iter().map(|p| p.currents[j]).sum::<f64>() / n);
    if rows.len() > 2 * varying.len() {
        if let Some(x) = linear_lstsq(&rows, &rhs) {
            for (slot, &j) in varying.iter().enumerate() {
                let a = x[2 * slot];
                let b = x[2 * slot + 1];
                if a > 0.0 && a.is_finite() {
                    k[j] = a.sqrt();
                    i0[j] = -b / (2.0 * a);
                }
            }
        }
    }
    Ok(CoilCalibration::from_values(k, i0, f0))
}

/// Result of the single-axis fit with a transverse residual field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxialFitResult {
    pub k_z: Measured,
    pub i0_z: Measured,
    /// √(B_x² + B_y²), G.
    pub b_perp: Measured,
    pub f_offset: Measured,
    /// Row-major 4×4 covariance of `[k_z, i0_z, b_perp², f_offset]`.
    pub covariance: Vec<f64>,
    pub stats: FitStats,
}

impl AxialFitResult {
    pub fn current_for_zero(&self) -> Measured {
        self.i0_z
    }
}

/// Starting values for [`fit_axial`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxialGuess {
    pub k_z: f64,
    pub i0_z: f64,
    pub b_perp: f64,
    pub f_offset: f64,
}

struct AxialProblem<'a> {
    points: &'a [LabeledPoint],
}

impl AxialProblem<'_> {
    // params: k, i0, q = b_perp², f0
    fn magnitude(p: &DVector<f64>, iz: f64) -> (f64, f64, bool) {
        let d = iz - p[1];
        let s = p[0] * p[0] * d * d + p[2];
        let floor = FIELD_FLOOR_G * FIELD_FLOOR_G;
        if s > floor {
            (d, s.sqrt(), true)
        } else {
            (d, FIELD_FLOOR_G, false)
        }
    }
}

impl LeastSquaresProblem for AxialProblem<'_> {
    fn n_params(&self) -> usize {
        4
    }
    fn n_residuals(&self) -> usize {
        self.points.len()
    }
    fn residuals(&self, p: &DVector<f64>, out: &mut DVector<f64>) {
        for (i, pt) in self.points.iter().enumerate() {
            let (_, mag, _) = Self::magnitude(p, pt.currents[2]);
            out[i] = (pt.frequency - pt.eta * ZEEMAN_RATE_MHZ_PER_G * mag - p[3]) / pt.sigma;
        }
    }
    fn jacobian(&self, p: &DVector<f64>, out: &mut DMatrix<f64>) {
        for (i, pt) in self.points.iter().enumerate() {
            let (d, mag, live) = Self::magnitude(p, pt.currents[2]);
            let scale = -pt.eta * ZEEMAN_RATE_MHZ_PER_G / pt.sigma;
            if live {
                out[(i, 0)] = scale * p[0] * d * d / mag;
                out[(i, 1)] = -scale * p[0] * p[0] * d / mag;
                out[(i, 2)] = scale * 0.5 / mag;
            } else {
                out[(i, 0)] = 0.0;
                out[(i, 1)] = 0.0;
                out[(i, 2)] = 0.0;
            }
            out[(i, 3)] = -1.0 / pt.sigma;
        }
    }
}

/// With a single |η| the squared shift `(f − f0)²` is a quadratic in I_z, so
/// `f² = 2 f0 f + a I² + b I + c` is linear in (f0, a, b, c). Needed when only
/// one σ line is present and the mean frequency says nothing about f0.
fn offset_from_common_eta(points: &[LabeledPoint]) -> Option<f64> {
    let abs_eta = points.first()?.eta.abs();
    if abs_eta == 0.0 || points.len() < 5 || points.iter().any(|p| p.eta.abs() != abs_eta) {
        return None;
    }
    let f_ref = points.iter().map(|p| p.frequency).sum::<f64>() / points.len() as f64;
    let mut rows = Vec::with_capacity(points.len());
    let mut rhs = Vec::with_capacity(points.len());
    for p in points {
        let f = p.frequency - f_ref;
        let iz = p.currents[2];
        rows.push(vec![f, iz * iz, iz, 1.0]);
        rhs.push(f * f);
    }
    let x = linear_lstsq(&rows, &rhs)?;
    let f0 = f_ref + 0.5 * x[0];
    f0.is_finite().then_some(f0)
}

/// Data-driven starting point for [`fit_axial`].
pub fn initial_axial_guess(points: &[LabeledPoint]) -> Result<AxialGuess> {
    validate_points(points, 1)?;
    let f0 = offset_from_common_eta(points).unwrap_or_else(|| estimate_f_offset(points));
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for p in points.iter().filter(|p| p.eta != 0.0) {
        let iz = p.currents[2];
        let b = (p.frequency - f0) / (ZEEMAN_RATE_MHZ_PER_G * p.eta);
        rows.push(vec![iz * iz, iz, 1.0]);
        rhs.push(b * b);
    }
    let mut guess = AxialGuess {
        k_z: 1.0,
        i0_z: points.iter().map(|p| p.currents[2]).sum::<f64>() / points.len() as f64,
        b_perp: 0.01,
        f_offset: f0,
    };
    if rows.len() >= 3 {
        if let Some(x) = linear_lstsq(&rows, &rhs) {
            if x[0] > 0.0 && x[0].is_finite() {
                guess.k_z = x[0].sqrt();
                guess.i0_z = -x[1] / (2.0 * x[0]);
                let q = x[2] - x[0] * guess.i0_z * guess.i0_z;
                guess.b_perp = q.max(1e-4).sqrt();
            }
        }
    }
    Ok(guess)
}

/// Fit `f = f_offset + η·1.4·√((k_z (I_z − I_z0))² + B_⊥²)` to a scan of I_z.
///
/// The transverse field enters as q = B_⊥², which keeps the problem regular
/// at B_⊥ = 0. The reported B_⊥ is √max(q, 0) and its σ is the distance to
/// √(max(q, 0) + σ_q), which tends to σ_q / 2B_⊥ when q ≫ σ_q.
pub fn fit_axial(points: &[LabeledPoint], init: &AxialGuess, opts: &FitOptions) -> Result<AxialFitResult> {
    validate_points(points, 5)?;
    let (ix, iy) = (points[0].currents[0], points[0].currents[1]);
    if points.iter().any(|p| p.currents[0] != ix || p.currents[1] != iy) {
        return Err(Error::InvalidInput("axial fit needs fixed I_x and I_y across points".into()));
    }
    if points.iter().all(|p| p.eta == 0.0) {
        return Err(Error::Unidentifiable(vec!["k_z".into(), "i0_z".into(), "b_perp".into()]));
    }
    let problem = AxialProblem { points };
    let start = DVector::from_vec(vec![init.k_z, init.i0_z, init.b_perp * init.b_perp, init.f_offset]);
    let mut jac0 = DMatrix::zeros(points.len(), 4);
    problem.jacobian(&start, &mut jac0);
    if let Some(e) = unidentifiable_error(&jac0, &AXIAL_PARAM_NAMES, opts.rank_tolerance) {
        return Err(e);
    }
    let sol = opts.solver.minimize(&problem, start)?;
    if let Some(e) = unidentifiable_error(&sol.jacobian, &AXIAL_PARAM_NAMES, opts.rank_tolerance) {
        return Err(e);
    }
    let mut cov = sol
        .covariance()
        .ok_or_else(|| Error::Numerical("singular normal matrix at the optimum".into()))?;
    let mut p = sol.params.clone();
    if p[0] * init.k_z < 0.0 {
        p[0] = -p[0];
        cov.row_mut(0).neg_mut();
        cov.column_mut(0).neg_mut();
    }
    let sd = |i: usize| cov[(i, i)].max(0.0).sqrt();
    let q = p[2].max(0.0);
    let b_perp = q.sqrt();
    let b_sigma = (q + sd(2)).sqrt() - b_perp;
    Ok(AxialFitResult {
        k_z: Measured::new(p[0], sd(0)),
        i0_z: Measured::new(p[1], sd(1)),
        b_perp: Measured::new(b_perp, b_sigma),
        f_offset: Measured::new(p[3], sd(3)),
        covariance: (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| cov[(i, j)]).collect(),
        stats: FitStats {
            chi2_reduced: sol.reduced_chi2(),
            n_points: points.len(),
            iterations: sol.iterations,
        },
    })
}

pub fn fit_axial_auto(points: &[LabeledPoint], opts: &FitOptions) -> Result<AxialFitResult> {
    let init = initial_axial_guess(points)?;
    fit_axial(points, &init, opts)
}

/// Model curves `f_η(I)` along one axis with the other currents held fixed.
///
/// Rows are `(current, [f_η for each η in etas])`; used for plot output.
pub fn model_curves(
    cal: &CoilCalibration,
    base_currents: [f64; 3],
    axis: usize,
    currents: &[f64],
    etas: &[f64],
) -> Vec<(f64, Vec<f64>)> {
    currents
        .iter()
        .map(|&i| {
            let mut c = base_currents;
            c[axis] = i;
            (i, etas.iter().map(|&eta| cal.predict_frequency(c, eta)).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth() -> CoilCalibration {
        CoilCalibration::from_values([0.362, 0.434, 3.586], [0.985, 1.681, -0.145], 1250.05)
    }

    fn noiseless_points(cal: &CoilCalibration) -> Vec<LabeledPoint> {
        let mut pts = Vec::new();
        let etas = [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5];
        let mut push = |c: [f64; 3]| {
            for eta in etas {
                pts.push(LabeledPoint::new(c, eta, cal.predict_frequency(c, eta), 0.01));
            }
        };
        for i in 0..9 {
            push([-6.0 + 1.5 * i as f64, 1.70, 0.14]);
            push([-3.0, -3.0 + i as f64, 0.14]);
            push([-3.0, 1.70, -0.7 + 0.15 * i as f64]);
        }
        pts
    }

    #[test]
    fn caption_field_from_calibration() {
        let b = truth().field_at([-5.74, 1.70, 0.14]);
        assert!((b.x + 2.434).abs() < 1.5e-3);
        assert!((b.y - 0.008).abs() < 1.5e-3);
        assert!((b.z - 1.022).abs() < 1.5e-3);
        assert!(truth().field_at([0.985, 1.681, -0.145]).magnitude() < 1e-12);
    }

    #[test]
    fn noiseless_recovery_is_exact() {
        let cal = truth();
        let pts = noiseless_points(&cal);
        let fit = fit_global_auto(&pts, &FitOptions::default()).unwrap();
        let want = cal.param_vector();
        for (got, w) in fit.param_vector().iter().zip(want) {
            assert!((got - w).abs() < 1e-6, "{got} vs {w}");
        }
        for p in &pts {
            assert!((fit.predict_frequency(p.currents, p.eta) - p.frequency).abs() < 1e-6);
        }
    }

    #[test]
    fn sign_branch_follows_initial_guess() {
        let cal = truth();
        let pts = noiseless_points(&cal);
        let mut init = initial_guess(&pts).unwrap();
        init.axes[0].k.value = -init.axes[0].k.value;
        let fit = fit_global(&pts, &init, &FitOptions::default()).unwrap();
        assert!(fit.axes[0].k.value < 0.0);
        assert!(fit.axes[1].k.value > 0.0);
        assert!((fit.axes[0].i0.value - 0.985).abs() < 1e-6);
    }

    #[test]
    fn eta_zero_only_is_unidentifiable() {
        let cal = truth();
        let pts: Vec<_> = noiseless_points(&cal).into_iter().filter(|p| p.eta == 0.0).collect();
        match fit_global_auto(&pts, &FitOptions::default()) {
            Err(Error::Unidentifiable(names)) => {
                assert!(names.contains(&"k_x".to_string()));
                assert!(!names.contains(&"f_offset".to_string()));
            }
            other => panic!("expected unidentifiable, got {other:?}"),
        }
    }

    #[test]
    fn too_few_points_rejected() {
        let pts = noiseless_points(&truth());
        assert!(matches!(
            fit_global_auto(&pts[..5], &FitOptions::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn missing_sigmas_take_median() {
        let mut pts = vec![
            LabeledPoint::new([0.0; 3], 0.0, 1.0, 0.1),
            LabeledPoint::new([0.0; 3], 0.0, 1.0, 0.3),
            LabeledPoint::new([0.0; 3], 0.0, 1.0, 0.2),
            LabeledPoint::new([0.0; 3], 0.0, 1.0, f64::NAN),
        ];
        fill_missing_sigmas(&mut pts).unwrap();
        assert_eq!(pts[3].sigma, 0.2);
    }

    fn axial_points(k: f64, i0: f64, bp: f64, izs: &[f64]) -> Vec<LabeledPoint> {
        let mut pts = Vec::new();
        for &iz in izs {
            let mag = ((k * (iz - i0)).powi(2) + bp * bp).sqrt();
            for eta in [-1.0, 1.0] {
                pts.push(LabeledPoint::new([0.98, 1.68, iz], eta, 1250.03 + eta * 1.4 * mag, 0.005));
            }
        }
        pts
    }

    #[test]
    fn axial_noiseless_recovery() {
        let izs: Vec<f64> = (0..11).map(|i| -0.316 + 0.03 * i as f64).collect();
        let pts = axial_points(3.753, -0.166, 0.05, &izs);
        let fit = fit_axial_auto(&pts, &FitOptions::default()).unwrap();
        assert!((fit.k_z.value - 3.753).abs() < 1e-6);
        assert!((fit.i0_z.value + 0.166).abs() < 1e-7);
        assert!((fit.b_perp.value - 0.05).abs() < 1e-5);
        assert_eq!(fit.current_for_zero(), fit.i0_z);
    }

    #[test]
    fn axial_one_sigma_line_only() {
        let izs: Vec<f64> = (0..11).map(|i| -0.316 + 0.03 * i as f64).collect();
        let pts: Vec<_> = axial_points(3.753, -0.166, 0.05, &izs)
            .into_iter()
            .filter(|p| p.eta > 0.0)
            .collect();
        let fit = fit_axial_auto(&pts, &FitOptions::default()).unwrap();
        assert!((fit.k_z.value - 3.753).abs() < 1e-6);
        assert!((fit.f_offset.value - 1250.03).abs() < 1e-7);
    }

    #[test]
    fn axial_single_current_unidentifiable() {
        let pts = axial_points(3.753, -0.166, 0.05, &[0.1, 0.1, 0.1]);
        match fit_axial_auto(&pts, &FitOptions::default()) {
            Err(Error::Unidentifiable(names)) => assert!(names.contains(&"k_z".to_string())),
            other => panic!("expected unidentifiable, got {other:?}"),
        }
    }

    #[test]
    fn axial_requires_fixed_transverse_currents() {
        let mut pts = axial_points(3.753, -0.166, 0.05, &[0.0, 0.1, 0.2]);
        pts[0].currents[0] = 5.0;
        assert!(matches!(fit_axial_auto(&pts, &FitOptions::default()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_crossing_currents() {
        let cal = CoilCalibration::from_measured(
            [Measured::new(0.362, 0.003), Measured::new(0.434, 0.049), Measured::new(3.586, 0.036)],
            [Measured::new(0.985, 0.042), Measured::new(1.681, 0.065), Measured::new(-0.145, 0.007)],
            Measured::new(1250.0, 0.0),
        );
        let z = currents_for_zero(&cal);
        assert_eq!(z[0], Measured::new(0.985, 0.042));
        assert_eq!(z[2], Measured::new(-0.145, 0.007));
        let zero = CoilCalibration::from_values([1.0; 3], [0.0; 3], 1250.0);
        assert_eq!(currents_for_zero(&zero).map(|m| m.value), [0.0; 3]);
    }
}
