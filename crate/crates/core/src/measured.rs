use serde::{Deserialize, Serialize};

/// A value with its 1σ uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Measured {
    pub value: f64,
    pub sigma: f64,
}

impl Measured {
    pub const fn new(value: f64, sigma: f64) -> Self {
        Self { value, sigma }
    }

    pub const fn exact(value: f64) -> Self {
        Self { value, sigma: 0.0 }
    }

    /// Number of standard deviations separating `self.value` from `truth`.
    pub fn pull(&self, truth: f64) -> f64 {
        let d = (self.value - truth).abs();
        if self.sigma > 0.0 {
            d / self.sigma
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn within_sigmas(&self, truth: f64, n: f64) -> bool {
        self.pull(truth) <= n
    }
}

impl std::fmt::Display for Measured {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match f.precision() {
            Some(p) => write!(f, "{:.p$} ± {:.p$}", self.value, self.sigma),
            None => write!(f, "{} ± {}", self.value, self.sigma),
        }
    }
}
