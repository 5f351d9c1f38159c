//! Ground-state Zeeman structure of ⁹Be⁺ (²S₁/₂, I = 3/2).
//!
//! The Raman resonance connects the F′ = 1 and F = 2 hyperfine levels. In the
//! linear Zeeman regime every component shifts by `η · 1.4 MHz/G · |B|`, where
//! η = g(F′=1)·m_F′ − g(F=2)·m_F takes one of seven values in {0, ±½, ±1, ±3/2}.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// µ_B / h in MHz/G, rounded to the scale used for every conversion here.
pub const ZEEMAN_RATE_MHZ_PER_G: f64 = 1.4;
/// Ground-state hyperfine interval from the Penning-trap measurement (MHz).
pub const F_HYPERFINE_REFERENCE_MHZ: f64 = 1250.017674088;
/// Ground-state hyperfine interval from the RF measurement (MHz).
pub const F_HYPERFINE_RF_MHZ: f64 = 1250.01767046;
/// Nominal modulation frequency around which scans are taken (MHz).
pub const F_HYPERFINE_NOMINAL_MHZ: f64 = 1250.0;

pub const NUCLEAR_SPIN: f64 = 1.5;
pub const ELECTRON_J: f64 = 0.5;
pub const ELECTRON_S: f64 = 0.5;
pub const ELECTRON_L: f64 = 0.0;

/// Numerical constants shared by the forward model and the fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    pub zeeman_rate: f64,
    pub f_hyperfine_ref: f64,
    pub f_hyperfine_nominal: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            zeeman_rate: ZEEMAN_RATE_MHZ_PER_G,
            f_hyperfine_ref: F_HYPERFINE_REFERENCE_MHZ,
            f_hyperfine_nominal: F_HYPERFINE_NOMINAL_MHZ,
        }
    }
}

/// Magnetic field in Gauss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FieldVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl FieldVector {
    pub const ZERO: FieldVector = FieldVector {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(b: [f64; 3]) -> Self {
        Self::new(b[0], b[1], b[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn magnitude(&self) -> f64 {
        self.x.hypot(self.y).hypot(self.z)
    }

    pub fn perpendicular(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Coil axis. Indexes `[f64; 3]` current and field triples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(Error::InvalidInput(format!("unknown axis `{other}`"))),
        }
    }
}

/// A Zeeman sublevel |F, m_F⟩ of the ground state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HyperfineState {
    pub f: u8,
    pub m_f: i8,
}

impl HyperfineState {
    pub fn new(f: u8, m_f: i8) -> Result<Self> {
        if !(1..=2).contains(&f) {
            return Err(Error::Domain(format!("F = {f} is not a ground hyperfine level")));
        }
        if m_f.unsigned_abs() > f {
            return Err(Error::Domain(format!("|m_F| = {} exceeds F = {f}", m_f.abs())));
        }
        Ok(Self { f, m_f })
    }

    pub fn g_factor(&self) -> f64 {
        ground_g_factor(self.f)
    }
}

/// Which initial F′ = 1 sublevel a component starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarization {
    SigmaMinus,
    Pi,
    SigmaPlus,
}

impl Polarization {
    fn from_lower_m(m_f: i8) -> Self {
        match m_f {
            -1 => Polarization::SigmaMinus,
            0 => Polarization::Pi,
            _ => Polarization::SigmaPlus,
        }
    }
}

/// Which Raman components are observable.
///
/// With σ-polarized light only one F′ = 1 sublevel stays populated and a
/// single component remains: η = −1 for σ⁺ and η = +1 for σ⁻.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    All,
    SigmaPlusOnly,
    SigmaMinusOnly,
}

impl SelectionMode {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMode::All => "all",
            SelectionMode::SigmaPlusOnly => "sigma_plus",
            SelectionMode::SigmaMinusOnly => "sigma_minus",
        }
    }
}

impl FromStr for SelectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "all" => Ok(SelectionMode::All),
            "sigma_plus" | "sigma_plus_only" | "sigma+" => Ok(SelectionMode::SigmaPlusOnly),
            "sigma_minus" | "sigma_minus_only" | "sigma-" => Ok(SelectionMode::SigmaMinusOnly),
            other => Err(Error::InvalidInput(format!("unknown selection mode `{other}`"))),
        }
    }
}

/// Peak names, ordered by η from −3/2 (L3) to +3/2 (H3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PeakLabel {
    L3,
    L2,
    L1,
    C,
    H1,
    H2,
    H3,
}

impl PeakLabel {
    pub const ALL: [PeakLabel; 7] = [
        PeakLabel::L3,
        PeakLabel::L2,
        PeakLabel::L1,
        PeakLabel::C,
        PeakLabel::H1,
        PeakLabel::H2,
        PeakLabel::H3,
    ];

    /// 2η as an integer in −3..=3.
    pub fn eta_halves(self) -> i8 {
        self as i8 - 3
    }

    pub fn eta(self) -> f64 {
        f64::from(self.eta_halves()) / 2.0
    }

    pub fn from_eta_halves(h: i8) -> Option<Self> {
        if (-3..=3).contains(&h) {
            Some(Self::ALL[(h + 3) as usize])
        } else {
            None
        }
    }

    pub fn from_eta(eta: f64) -> Option<Self> {
        let h = (2.0 * eta).round();
        if (2.0 * eta - h).abs() > 1e-9 {
            return None;
        }
        Self::from_eta_halves(h as i8)
    }

    pub fn name(self) -> &'static str {
        match self {
            PeakLabel::L3 => "L3",
            PeakLabel::L2 => "L2",
            PeakLabel::L1 => "L1",
            PeakLabel::C => "C",
            PeakLabel::H1 => "H1",
            PeakLabel::H2 => "H2",
            PeakLabel::H3 => "H3",
        }
    }
}

impl fmt::Display for PeakLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PeakLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidInput(format!("unknown peak label `{s}`")))
    }
}

/// One allowed Raman component F′=1, m_F′ → F=2, m_F.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeemanLine {
    pub eta: f64,
    pub lower: HyperfineState,
    pub upper: HyperfineState,
    pub polarization: Polarization,
    pub label: PeakLabel,
}

/// Landé g_F factor in the approximate form with g_J from the first factor.
///
/// Quantum numbers are passed as `f64` so half-integers are exact.
pub fn g_factor(f: f64, i: f64, j: f64, s: f64, l: f64) -> Result<f64> {
    let all = [f, i, j, s, l];
    if all.iter().any(|q| !q.is_finite() || *q < 0.0 || (2.0 * q).fract() != 0.0) {
        return Err(Error::Domain(
            "quantum numbers must be non-negative integers or half-integers".into(),
        ));
    }
    if f == 0.0 {
        return Err(Error::Domain("g_F is singular for F = 0".into()));
    }
    if j == 0.0 {
        return Err(Error::Domain("g_J is singular for J = 0".into()));
    }
    let coupled = |a: f64, b: f64, c: f64| {
        c >= (a - b).abs() && c <= a + b && (a + b - c).fract() == 0.0
    };
    if !coupled(l, s, j) {
        return Err(Error::Domain(format!("J = {j} cannot couple L = {l}, S = {s}")));
    }
    if !coupled(i, j, f) {
        return Err(Error::Domain(format!("F = {f} cannot couple I = {i}, J = {j}")));
    }
    let g_j = 1.5 + (s * (s + 1.0) - l * (l + 1.0)) / (2.0 * j * (j + 1.0));
    let ff = f * (f + 1.0);
    Ok(g_j * (ff - i * (i + 1.0) + j * (j + 1.0)) / (2.0 * ff))
}

/// g_F of the ⁹Be⁺ ground level F (1 or 2): −½ or +½.
pub fn ground_g_factor(f: u8) -> f64 {
    g_factor(f64::from(f), NUCLEAR_SPIN, ELECTRON_J, ELECTRON_S, ELECTRON_L)
        .expect("ground-state quantum numbers are valid")
}

/// Linear Zeeman shift of a sublevel in MHz for a field magnitude in G.
pub fn zeeman_energy(state: HyperfineState, b_magnitude: f64) -> f64 {
    ZEEMAN_RATE_MHZ_PER_G * state.g_factor() * f64::from(state.m_f) * b_magnitude
}

/// Shift coefficient of the component m_F′ → m_F in units of 1.4 MHz/G × |B|.
pub fn eta_for(lower: HyperfineState, upper: HyperfineState) -> f64 {
    lower.g_factor() * f64::from(lower.m_f) - upper.g_factor() * f64::from(upper.m_f)
}

fn line(m_lower: i8, m_upper: i8) -> ZeemanLine {
    let lower = HyperfineState { f: 1, m_f: m_lower };
    let upper = HyperfineState { f: 2, m_f: m_upper };
    let eta = eta_for(lower, upper);
    ZeemanLine {
        eta,
        lower,
        upper,
        polarization: Polarization::from_lower_m(m_lower),
        label: PeakLabel::from_eta(eta).expect("ground-state η is a half-integer in [-3/2, 3/2]"),
    }
}

/// Raman components visible under `mode`.
///
/// `All` yields the 13 tabulated components: four from m_F′ = −1, five from
/// m_F′ = 0 and four from m_F′ = +1. The polarization tag names the row.
pub fn enumerate_lines(mode: SelectionMode) -> Vec<ZeemanLine> {
    match mode {
        SelectionMode::All => {
            let rows: [(i8, &[i8]); 3] = [
                (-1, &[-2, -1, 0, 1]),
                (0, &[-2, -1, 0, 1, 2]),
                (1, &[-1, 0, 1, 2]),
            ];
            rows.iter()
                .flat_map(|(m_lower, uppers)| uppers.iter().map(move |&m| line(*m_lower, m)))
                .collect()
        }
        SelectionMode::SigmaPlusOnly => vec![line(1, 1)],
        SelectionMode::SigmaMinusOnly => vec![line(-1, -1)],
    }
}

/// Distinct η values of `mode`, descending.
pub fn distinct_etas(mode: SelectionMode) -> Vec<f64> {
    let mut etas: Vec<f64> = enumerate_lines(mode).iter().map(|l| l.eta).collect();
    etas.sort_by(|a, b| b.total_cmp(a));
    etas.dedup();
    etas
}

/// Predicted resonance of one peak label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedPeak {
    pub label: PeakLabel,
    pub eta: f64,
    pub frequency_mhz: f64,
}

/// Peak positions f = f_offset + η · 1.4 MHz/G · |B|, descending in η.
///
/// At zero field all components coincide and a single peak (labelled by the
/// central η of the mode) is returned.
pub fn predict_peaks(b: FieldVector, f_offset: f64, mode: SelectionMode) -> Vec<PredictedPeak> {
    let magnitude = b.magnitude();
    let etas = distinct_etas(mode);
    if magnitude == 0.0 && etas.len() > 1 {
        return vec![PredictedPeak {
            label: PeakLabel::C,
            eta: 0.0,
            frequency_mhz: f_offset,
        }];
    }
    etas.into_iter()
        .map(|eta| PredictedPeak {
            label: PeakLabel::from_eta(eta).expect("tabulated η"),
            eta,
            frequency_mhz: f_offset + eta * ZEEMAN_RATE_MHZ_PER_G * magnitude,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g_factors_of_ground_levels() {
        assert_eq!(g_factor(2.0, 1.5, 0.5, 0.5, 0.0).unwrap(), 0.5);
        assert_eq!(g_factor(1.0, 1.5, 0.5, 0.5, 0.0).unwrap(), -0.5);
        assert_eq!(ground_g_factor(2), -ground_g_factor(1));
    }

    #[test]
    fn g_factor_rejects_bad_quantum_numbers() {
        assert!(matches!(g_factor(0.0, 0.5, 0.5, 0.5, 0.0), Err(Error::Domain(_))));
        assert!(g_factor(3.0, 1.5, 0.5, 0.5, 0.0).is_err());
        assert!(g_factor(1.5, 1.5, 0.5, 0.5, 0.0).is_err());
        assert!(g_factor(2.0, 1.5, 1.5, 0.5, 0.0).is_err());
    }

    #[test]
    fn zeeman_energies() {
        let s = |f, m| HyperfineState::new(f, m).unwrap();
        assert_eq!(zeeman_energy(s(2, 0), 5.0), 0.0);
        assert!((zeeman_energy(s(2, 2), 1.0) - 1.4).abs() < 1e-12);
        assert!((zeeman_energy(s(1, -1), 1.0) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn hyperfine_state_validation() {
        assert!(HyperfineState::new(1, 2).is_err());
        assert!(HyperfineState::new(3, 0).is_err());
        assert!(HyperfineState::new(0, 0).is_err());
        assert!(HyperfineState::new(2, -2).is_ok());
    }

    #[test]
    fn table_rows_match_tabulated_coefficients() {
        let lines = enumerate_lines(SelectionMode::All);
        assert_eq!(lines.len(), 13);
        let row = |m: i8| -> Vec<f64> {
            lines.iter().filter(|l| l.lower.m_f == m).map(|l| l.eta).collect()
        };
        assert_eq!(row(-1), vec![1.5, 1.0, 0.5, 0.0]);
        assert_eq!(row(0), vec![1.0, 0.5, 0.0, -0.5, -1.0]);
        assert_eq!(row(1), vec![0.0, -0.5, -1.0, -1.5]);
    }

    #[test]
    fn sigma_modes_single_lines() {
        let plus = enumerate_lines(SelectionMode::SigmaPlusOnly);
        assert_eq!(plus.len(), 1);
        assert_eq!(plus[0].eta, -1.0);
        assert_eq!(plus[0].label, PeakLabel::L2);
        let minus = enumerate_lines(SelectionMode::SigmaMinusOnly);
        assert_eq!(minus[0].eta, 1.0);
        assert_eq!(minus[0].polarization, Polarization::SigmaMinus);
    }

    #[test]
    fn labels_follow_eta() {
        for l in PeakLabel::ALL {
            assert_eq!(PeakLabel::from_eta(l.eta()), Some(l));
            assert_eq!(l.name().parse::<PeakLabel>().unwrap(), l);
        }
        assert_eq!(PeakLabel::H3.eta(), 1.5);
        assert_eq!(PeakLabel::L1.eta(), -0.5);
        assert_eq!(PeakLabel::from_eta(0.3), None);
    }

    #[test]
    fn zero_field_collapses() {
        for mode in [SelectionMode::All, SelectionMode::SigmaPlusOnly] {
            let p = predict_peaks(FieldVector::ZERO, 1250.0, mode);
            assert_eq!(p.len(), 1);
            assert_eq!(p[0].frequency_mhz, 1250.0);
        }
    }

    #[test]
    fn sigma_minus_peak_at_one_gauss() {
        let p = predict_peaks(FieldVector::new(0.0, 0.0, 1.0), 1250.0, SelectionMode::SigmaMinusOnly);
        assert_eq!(p.len(), 1);
        assert!((p[0].frequency_mhz - 1251.4).abs() < 1e-12);
    }

    #[test]
    fn predicted_seven_peaks_for_reference_currents() {
        let b = FieldVector::new(-2.434, 0.008, 1.022);
        // independent magnitude
        let mag = (2.434f64 * 2.434 + 0.008 * 0.008 + 1.022 * 1.022).sqrt();
        assert!((mag - 2.640).abs() < 5e-4);
        let p = predict_peaks(b, 1250.0, SelectionMode::All);
        assert_eq!(p.len(), 7);
        assert_eq!(p[0].label, PeakLabel::H3);
        assert!((p[0].frequency_mhz - (1250.0 + 1.5 * 1.4 * mag)).abs() < 1e-9);
        assert!((p[0].frequency_mhz - 1255.545).abs() < 2e-3);
        for w in p.windows(2) {
            assert!((w[0].frequency_mhz - w[1].frequency_mhz - 0.7 * mag).abs() < 1e-9);
        }
    }
}
