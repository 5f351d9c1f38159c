//! Peak extraction from a single scan and label assignment.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::levels::{PeakLabel, SelectionMode};
use crate::lsq::{LeastSquaresProblem, LevenbergMarquardt};
use crate::measured::Measured;
use crate::synth::Scan;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakFit {
    /// MHz.
    pub center: Measured,
    /// kHz.
    pub fwhm: Measured,
    pub amplitude: Measured,
    pub label: Option<PeakLabel>,
    /// Reduced χ² of the fit (residual variance when the scan has no counts).
    pub goodness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub min_prominence: f64,
    pub max_peaks: usize,
    /// Boxcar width (points) used only for candidate search.
    pub smoothing: usize,
    /// Half-width of the refinement window in units of the FWHM estimate.
    pub window_fwhm: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            min_prominence: 0.1,
            max_peaks: 7,
            smoothing: 5,
            window_fwhm: 2.0,
        }
    }
}

impl DetectConfig {
    pub fn new(min_prominence: f64, max_peaks: usize) -> Self {
        Self {
            min_prominence,
            max_peaks,
            ..Self::default()
        }
    }
}

fn smooth(signal: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    if half == 0 {
        return signal.to_vec();
    }
    let n = signal.len();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + signal[i];
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    index: usize,
    prominence: f64,
    /// MHz.
    width: f64,
}

fn prominence(s: &[f64], i: usize) -> f64 {
    let h = s[i];
    let mut left_min = h;
    for &v in s[..i].iter().rev() {
        if v > h {
            break;
        }
        left_min = left_min.min(v);
    }
    let mut right_min = h;
    for &v in &s[i + 1..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}

fn half_width(grid: &[f64], s: &[f64], i: usize, level: f64) -> f64 {
    let cross = |a: usize, b: usize| {
        let t = (s[a] - level) / (s[a] - s[b]);
        grid[a] + t * (grid[b] - grid[a])
    };
    let mut left = grid[0];
    let mut j = i;
    while j > 0 {
        if s[j - 1] < level {
            left = cross(j, j - 1);
            break;
        }
        j -= 1;
    }
    let mut right = grid[grid.len() - 1];
    let mut j = i;
    while j + 1 < s.len() {
        if s[j + 1] < level {
            right = cross(j, j + 1);
            break;
        }
        j += 1;
    }
    right - left
}

fn find_candidates(scan: &Scan, cfg: &DetectConfig) -> Vec<Candidate> {
    let s = smooth(&scan.signal, cfg.smoothing.max(1));
    let g = &scan.grid;
    let n = s.len();
    let min_step = g.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let mut cands: Vec<Candidate> = (1..n - 1)
        .filter(|&i| s[i] > s[i - 1] && s[i] >= s[i + 1])
        .filter_map(|i| {
            let prom = prominence(&s, i);
            (prom >= cfg.min_prominence).then(|| Candidate {
                index: i,
                prominence: prom,
                width: half_width(g, &s, i, s[i] - 0.5 * prom).max(2.0 * min_step),
            })
        })
        .collect();
    cands.sort_by(|a, b| b.prominence.total_cmp(&a.prominence));
    let mut kept: Vec<Candidate> = Vec::new();
    for c in cands {
        if kept.len() >= cfg.max_peaks {
            break;
        }
        let close = kept.iter().any(|k| (g[k.index] - g[c.index]).abs() < k.width.max(c.width));
        if !close {
            kept.push(c);
        }
    }
    kept
}

/// Sum of Lorentzians plus a constant baseline over selected points.
///
/// Parameters: `[c_0, w_0, a_0, c_1, w_1, a_1, …, baseline]` with centres
/// and FWHM in MHz.
struct LorentzSum<'a> {
    f: &'a [f64],
    y: &'a [f64],
    sigma: &'a [f64],
    peaks: usize,
}

impl LeastSquaresProblem for LorentzSum<'_> {
    fn n_params(&self) -> usize {
        3 * self.peaks + 1
    }
    fn n_residuals(&self) -> usize {
        self.f.len()
    }
    fn residuals(&self, p: &DVector<f64>, out: &mut DVector<f64>) {
        let base = p[3 * self.peaks];
        for (i, &f) in self.f.iter().enumerate() {
            let mut model = base;
            for k in 0..self.peaks {
                let h = 0.5 * p[3 * k + 1].abs();
                let x = (f - p[3 * k]) / h;
                model += p[3 * k + 2] / (1.0 + x * x);
            }
            out[i] = (self.y[i] - model) / self.sigma[i];
        }
    }
    fn jacobian(&self, p: &DVector<f64>, out: &mut DMatrix<f64>) {
        let nb = 3 * self.peaks;
        for (i, &f) in self.f.iter().enumerate() {
            let inv_s = 1.0 / self.sigma[i];
            for k in 0..self.peaks {
                let w = p[3 * k + 1];
                let h = 0.5 * w.abs();
                let a = p[3 * k + 2];
                let x = (f - p[3 * k]) / h;
                let den = 1.0 + x * x;
                out[(i, 3 * k)] = -inv_s * a * 2.0 * x / (h * den * den);
                out[(i, 3 * k + 1)] = -inv_s * w.signum() * a * x * x / (h * den * den);
                out[(i, 3 * k + 2)] = -inv_s / den;
            }
            out[(i, nb)] = -inv_s;
        }
    }
}

struct Refined {
    fits: Vec<PeakFit>,
}

fn refine(scan: &Scan, cands: &[Candidate], cfg: &DetectConfig, sigmas: Option<&[f64]>) -> Option<Refined> {
    let g = &scan.grid;
    let y = &scan.signal;
    let mut selected: Vec<usize> = Vec::new();
    let mut start = Vec::with_capacity(3 * cands.len() + 1);
    for c in cands {
        let lo = g[c.index] - cfg.window_fwhm * c.width;
        let hi = g[c.index] + cfg.window_fwhm * c.width;
        selected.extend((0..g.len()).filter(|&i| g[i] >= lo && g[i] <= hi));
        // raw argmax within half a width of the smoothed maximum
        let near = (0..g.len()).filter(|&i| (g[i] - g[c.index]).abs() <= 0.5 * c.width);
        let top = near.max_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap_or(c.index);
        start.extend([g[top], c.width, y[top]]);
    }
    start.push(0.0);
    selected.sort_unstable();
    selected.dedup();
    let n_params = start.len();
    if selected.len() <= n_params {
        return None;
    }
    let f: Vec<f64> = selected.iter().map(|&i| g[i]).collect();
    let obs: Vec<f64> = selected.iter().map(|&i| y[i]).collect();
    let sig: Vec<f64> = match sigmas {
        Some(s) => selected.iter().map(|&i| s[i]).collect(),
        None => vec![1.0; selected.len()],
    };
    let problem = LorentzSum {
        f: &f,
        y: &obs,
        sigma: &sig,
        peaks: cands.len(),
    };
    let sol = LevenbergMarquardt::new().minimize(&problem, DVector::from_vec(start)).ok()?;
    let mut cov = sol.covariance()?;
    let chi2 = sol.reduced_chi2();
    if sigmas.is_none() {
        cov *= chi2;
    }
    let (lo, hi) = (f[0], f[f.len() - 1]);
    let mut fits = Vec::with_capacity(cands.len());
    for k in 0..cands.len() {
        let c = sol.params[3 * k];
        let w = sol.params[3 * k + 1].abs();
        let a = sol.params[3 * k + 2];
        let sd = |i: usize| cov[(i, i)].max(0.0).sqrt();
        if !(c.is_finite() && w > 0.0 && w.is_finite() && a > 0.0 && c >= lo && c <= hi) {
            return None;
        }
        fits.push(PeakFit {
            center: Measured::new(c, sd(3 * k)),
            fwhm: Measured::new(1e3 * w, 1e3 * sd(3 * k + 1)),
            amplitude: Measured::new(a, sd(3 * k + 2)),
            label: None,
            goodness: chi2.max(0.0),
        });
    }
    Some(Refined { fits })
}

/// Locate and fit up to `max_peaks` resonances in a scan.
///
/// Candidates are local maxima of a lightly smoothed copy of the signal whose
/// topographic prominence reaches `min_prominence`; two candidates closer than
/// one FWHM estimate keep the more prominent. All kept candidates are then
/// refined together by a Lorentzian-sum fit on the union of their windows,
/// falling back to independent fits if the joint fit fails. Weights come from
/// the counting statistics when raw counts are present.
pub fn detect_peaks(scan: &Scan, cfg: &DetectConfig) -> Result<Vec<PeakFit>> {
    if scan.len() < 5 {
        return Err(Error::InvalidInput(format!("scan has {} points, need at least 5", scan.len())));
    }
    if !(cfg.min_prominence > 0.0) {
        return Err(Error::InvalidInput("min_prominence must be positive".into()));
    }
    if !(1..=7).contains(&cfg.max_peaks) {
        return Err(Error::InvalidInput("max_peaks must be between 1 and 7".into()));
    }
    let cands = find_candidates(scan, cfg);
    if cands.is_empty() {
        return Ok(Vec::new());
    }
    let sigmas = scan.signal_sigmas();
    let sigmas = sigmas.as_deref();
    let mut fits = match refine(scan, &cands, cfg, sigmas) {
        Some(r) => r.fits,
        None => cands
            .iter()
            .filter_map(|c| refine(scan, std::slice::from_ref(c), cfg, sigmas))
            .flat_map(|r| r.fits)
            .collect(),
    };
    fits.sort_by(|a, b| a.center.value.total_cmp(&b.center.value));
    Ok(fits)
}

/// Run [`detect_peaks`] over many scans.
pub fn detect_batch(scans: &[Scan], cfg: &DetectConfig, exec: Execution) -> Vec<Result<Vec<PeakFit>>> {
    exec::map_slice(exec, scans, |s| detect_peaks(s, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFits {
    pub fits: Vec<PeakFit>,
    pub ambiguous: bool,
}

const SPACING_TOLERANCE: f64 = 0.15;

/// Positions in half-η units relative to the lowest peak, if the gaps are
/// consistent integer multiples of the smallest gap.
fn spacing_positions(centers: &[f64]) -> Option<Vec<i32>> {
    let gaps: Vec<f64> = centers.windows(2).map(|w| w[1] - w[0]).collect();
    let unit = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    if !(unit > 0.0) {
        return None;
    }
    let mut pos = vec![0];
    for g in gaps {
        let m = g / unit;
        let r = m.round();
        if (m - r).abs() > SPACING_TOLERANCE {
            return None;
        }
        pos.push(pos.last().unwrap() + r as i32);
    }
    Some(pos)
}

/// Attach peak labels by rank and spacing.
///
/// * σ-only modes: a single peak is the σ line; anything else is ambiguous.
/// * One peak in `All` mode: C.
/// * Gaps must be integer multiples of the smallest gap (one η step of ½).
///   A span of six steps fixes L3 at the lowest peak. A set symmetric about
///   its middle is centred on C. Otherwise the set is read as C upward
///   (the L side missing), which requires a span of at most three steps.
/// * Two peaks, more than seven, or inconsistent spacing: no labels and the
///   ambiguity flag set.
pub fn assign_labels(fits: &[PeakFit], mode: SelectionMode) -> LabeledFits {
    let mut fits: Vec<PeakFit> = fits.to_vec();
    fits.sort_by(|a, b| a.center.value.total_cmp(&b.center.value));
    for f in &mut fits {
        f.label = None;
    }
    let ambiguous = |fits: Vec<PeakFit>| LabeledFits { fits, ambiguous: true };
    let n = fits.len();
    if n == 0 {
        return LabeledFits { fits, ambiguous: false };
    }
    match mode {
        SelectionMode::SigmaMinusOnly | SelectionMode::SigmaPlusOnly => {
            if n != 1 {
                return ambiguous(fits);
            }
            fits[0].label = Some(if mode == SelectionMode::SigmaMinusOnly {
                PeakLabel::H2
            } else {
                PeakLabel::L2
            });
            LabeledFits { fits, ambiguous: false }
        }
        SelectionMode::All => {
            if n == 1 {
                fits[0].label = Some(PeakLabel::C);
                return LabeledFits { fits, ambiguous: false };
            }
            if n == 2 || n > 7 {
                return ambiguous(fits);
            }
            let centers: Vec<f64> = fits.iter().map(|f| f.center.value).collect();
            let Some(pos) = spacing_positions(&centers) else {
                return ambiguous(fits);
            };
            let span = *pos.last().unwrap();
            let symmetric = (0..n).all(|k| pos[k] + pos[n - 1 - k] == span);
            let offset = if span == 6 {
                -3
            } else if symmetric && span % 2 == 0 {
                -span / 2
            } else if span <= 3 {
                0
            } else {
                return ambiguous(fits);
            };
            if span > 6 {
                return ambiguous(fits);
            }
            for (f, p) in fits.iter_mut().zip(&pos) {
                f.label = PeakLabel::from_eta_halves((p + offset) as i8);
            }
            LabeledFits { fits, ambiguous: false }
        }
    }
}
