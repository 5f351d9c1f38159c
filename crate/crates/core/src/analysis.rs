//! Derived quantities: field uncertainty at the nulling currents, zero-power
//! extrapolation, and upper limits on residual field and gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldfit::{AxialFitResult, CoilCalibration};
use crate::levels::ZEEMAN_RATE_MHZ_PER_G;
use crate::measured::Measured;

/// √Σ_j (k_j · σ(I_j0))², in G.
pub fn propagate_delta_b(cal: &CoilCalibration) -> f64 {
    cal.axes
        .iter()
        .map(|a| a.k.value * a.i0.sigma)
        .fold(0.0f64, |acc, x| acc.hypot(x))
}

/// Same construction for a single-axis fit: √((k_z σ(I_z0))² + σ(B_⊥)²).
pub fn propagate_delta_b_axial(fit: &AxialFitResult) -> f64 {
    (fit.k_z.value * fit.i0_z.sigma).hypot(fit.b_perp.sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub power_uw: f64,
    /// MHz.
    pub center: Measured,
    /// kHz.
    pub fwhm: Measured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PowerSeries {
    pub entries: Vec<PowerPoint>,
}

/// Intercept and slope of a straight-line fit with their covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub intercept: Measured,
    pub slope: Measured,
    pub covariance: f64,
    pub chi2_reduced: f64,
    pub weighted: bool,
}

/// Straight-line least squares `y = a + b x`.
///
/// Inverse-variance weights when every σ is positive; the covariance is then
/// `(XᵀWX)⁻¹`. Otherwise unit weights and the covariance is scaled by the
/// residual variance.
pub fn fit_line(x: &[f64], y: &[f64], sigma: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n < 3 || y.len() != n || sigma.len() != n {
        return Err(Error::InvalidInput("a line fit needs at least 3 points".into()));
    }
    let weighted = sigma.iter().all(|s| s.is_finite() && *s > 0.0);
    let w: Vec<f64> = if weighted {
        sigma.iter().map(|s| 1.0 / (s * s)).collect()
    } else {
        vec![1.0; n]
    };
    let sw: f64 = w.iter().sum();
    let xm = w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ym = w.iter().zip(y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * (x - xm) * (x - xm)).sum();
    if !(sxx > 1e-300) {
        return Err(Error::Numerical("all abscissae are equal".into()));
    }
    let sxy: f64 = (0..n).map(|i| w[i] * (x[i] - xm) * (y[i] - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let chi2: f64 = (0..n)
        .map(|i| {
            let r = y[i] - intercept - slope * x[i];
            w[i] * r * r
        })
        .sum();
    let chi2_reduced = chi2 / (n - 2) as f64;
    let scale = if weighted { 1.0 } else { chi2_reduced };
    let var_slope = scale / sxx;
    let var_intercept = scale * (1.0 / sw + xm * xm / sxx);
    let covariance = -scale * xm / sxx;
    Ok(LineFit {
        intercept: Measured::new(intercept, var_intercept.sqrt()),
        slope: Measured::new(slope, var_slope.sqrt()),
        covariance,
        chi2_reduced,
        weighted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerExtrapolation {
    /// Resonance at zero power, MHz.
    pub f_intercept: Measured,
    /// MHz/µW.
    pub shift_slope: Measured,
    /// Linewidth at zero power, kHz.
    pub width_intercept: Measured,
    /// kHz/µW.
    pub width_slope: Measured,
}

/// Two independent line fits (centre and width against power).
pub fn extrapolate_power(series: &PowerSeries) -> Result<PowerExtrapolation> {
    let e = &series.entries;
    if e.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "power extrapolation needs at least 3 entries, got {}",
            e.len()
        )));
    }
    if e.iter().any(|p| !(p.power_uw > 0.0)) {
        return Err(Error::InvalidInput("powers must be positive".into()));
    }
    let mut powers: Vec<f64> = e.iter().map(|p| p.power_uw).collect();
    powers.sort_by(f64::total_cmp);
    if powers.windows(2).any(|w| w[0] == w[1]) {
        if powers[0] == powers[powers.len() - 1] {
            return Err(Error::Numerical("all powers are equal".into()));
        }
        return Err(Error::InvalidInput("powers must be distinct".into()));
    }
    let x: Vec<f64> = e.iter().map(|p| p.power_uw).collect();
    let centers = fit_line(
        &x,
        &e.iter().map(|p| p.center.value).collect::<Vec<_>>(),
        &e.iter().map(|p| p.center.sigma).collect::<Vec<_>>(),
    )?;
    let widths = fit_line(
        &x,
        &e.iter().map(|p| p.fwhm.value).collect::<Vec<_>>(),
        &e.iter().map(|p| p.fwhm.sigma).collect::<Vec<_>>(),
    )?;
    Ok(PowerExtrapolation {
        f_intercept: centers.intercept,
        shift_slope: centers.slope,
        width_intercept: widths.intercept,
        width_slope: widths.slope,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldLimit {
    pub field_limit_g: f64,
    pub discrepancy_khz: f64,
    pub discrepancy_sigma_khz: f64,
    pub f_reference_mhz: f64,
    pub zeeman_rate_mhz_per_g: f64,
}

/// (|f_intercept − f_reference| + σ) / 1.4 MHz/G.
pub fn field_upper_limit(f_intercept: Measured, f_reference: f64) -> Result<FieldLimit> {
    if !(f_intercept.sigma >= 0.0) {
        return Err(Error::InvalidInput("sigma must be non-negative".into()));
    }
    let d = (f_intercept.value - f_reference).abs();
    Ok(FieldLimit {
        field_limit_g: (d + f_intercept.sigma) / ZEEMAN_RATE_MHZ_PER_G,
        discrepancy_khz: 1e3 * d,
        discrepancy_sigma_khz: 1e3 * f_intercept.sigma,
        f_reference_mhz: f_reference,
        zeeman_rate_mhz_per_g: ZEEMAN_RATE_MHZ_PER_G,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientLimit {
    /// Field spread across the ensemble, G.
    pub spread_g: f64,
    pub gradient_g_per_mm: f64,
    pub min_fwhm_khz: f64,
    pub ensemble_length_mm: f64,
    pub zeeman_rate_mhz_per_g: f64,
}

/// Attribute the narrowest observed FWHM entirely to a field spread.
pub fn gradient_upper_limit(min_fwhm_khz: f64, ensemble_length_mm: f64) -> Result<GradientLimit> {
    if !(min_fwhm_khz > 0.0) || !(ensemble_length_mm > 0.0) {
        return Err(Error::InvalidInput("linewidth and ensemble length must be positive".into()));
    }
    let spread = 1e-3 * min_fwhm_khz / ZEEMAN_RATE_MHZ_PER_G;
    Ok(GradientLimit {
        spread_g: spread,
        gradient_g_per_mm: spread / ensemble_length_mm,
        min_fwhm_khz,
        ensemble_length_mm,
        zeeman_rate_mhz_per_g: ZEEMAN_RATE_MHZ_PER_G,
    })
}

/// Both limits together, as reported by the `limits` subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpperLimits {
    pub field: FieldLimit,
    pub gradient: GradientLimit,
}
