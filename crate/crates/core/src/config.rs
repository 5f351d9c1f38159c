//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Each consumer takes the keys it
//! understands; [`KeyValues::finish`] then rejects whatever is left so typos
//! do not pass silently.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fieldfit::CoilCalibration;
use crate::levels::{Axis, FieldVector, PeakLabel, F_HYPERFINE_REFERENCE_MHZ};
use crate::minimize::MinimizeConfig;
use crate::peaks::DetectConfig;
use crate::synth::{BeamConfig, Environment, LineShape, Noise};

#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.split('#').next().unwrap_or("").trim();
            if t.is_empty() {
                continue;
            }
            let (k, v) = t.split_once('=').ok_or_else(|| Error::Parse {
                line,
                message: format!("expected key=value, found `{t}`"),
            })?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), (v.trim().to_string(), line)).is_some() {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn take_str(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|_| Error::Parse {
                line,
                message: format!("invalid value `{v}` for `{key}`"),
            }),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Comma-separated list of exactly `N` values.
    pub fn take_array<T: FromStr, const N: usize>(&mut self, key: &str) -> Result<Option<[T; N]>> {
        let line = self.entries.get(key).map_or(0, |e| e.1);
        let Some(v) = self.take_list::<T>(key)? else {
            return Ok(None);
        };
        <[T; N]>::try_from(v).map(Some).map_err(|_| Error::Parse {
            line,
            message: format!("`{key}` needs {N} comma-separated values"),
        })
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        let Some((v, line)) = self.entries.remove(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|s| {
                s.trim().parse::<T>().map_err(|_| Error::Parse {
                    line,
                    message: format!("invalid list item `{}` for `{key}`", s.trim()),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => Err(Error::Parse {
                line,
                message: format!("unknown key `{k}`"),
            }),
        }
    }
}

/// `start:stop:step` in MHz.
pub fn parse_grid_spec(spec: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::InvalidInput(format!("grid `{spec}` is not start:stop:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    Ok((v[0], v[1], v[2]))
}

/// `a,b,c` currents in A.
pub fn parse_triple(spec: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = spec
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidInput(format!("`{spec}` is not three comma-separated numbers")))?;
    <[f64; 3]>::try_from(v).map_err(|_| Error::InvalidInput(format!("`{spec}` needs exactly three values")))
}

/// Environment keys: `k_x, k_y, k_z` (G/A) with either `i0_x, i0_y, i0_z` (A)
/// or `ambient_x_g, ambient_y_g, ambient_z_g`; `gradient_g_per_mm`,
/// `ensemble_length_mm`.
pub fn environment_from(kv: &mut KeyValues) -> Result<Environment> {
    let k = [
        kv.take_or("k_x", 0.362)?,
        kv.take_or("k_y", 0.434)?,
        kv.take_or("k_z", 3.586)?,
    ];
    let i0: [Option<f64>; 3] = [kv.take("i0_x")?, kv.take("i0_y")?, kv.take("i0_z")?];
    let amb: [Option<f64>; 3] = [
        kv.take("ambient_x_g")?,
        kv.take("ambient_y_g")?,
        kv.take("ambient_z_g")?,
    ];
    let gradient = kv.take_or("gradient_g_per_mm", 0.0)?;
    let length = kv.take_or("ensemble_length_mm", 2.0)?;
    let env = if amb.iter().any(Option::is_some) {
        if i0.iter().any(Option::is_some) {
            return Err(Error::InvalidInput(
                "give either i0_* or ambient_*_g, not both".into(),
            ));
        }
        let b = amb.map(|a| a.unwrap_or(0.0));
        Environment::with_ambient(FieldVector::from_array(b), k)?
    } else {
        let i0 = [
            i0[0].unwrap_or(0.985),
            i0[1].unwrap_or(1.681),
            i0[2].unwrap_or(-0.145),
        ];
        Environment::new(CoilCalibration::from_values(k, i0, F_HYPERFINE_REFERENCE_MHZ))
    };
    let env = env.with_gradient(gradient, length);
    env.validate()?;
    Ok(env)
}

/// Beam keys: `power_uw`, `mode`, `lightshift_slope_mhz_per_uw`,
/// `broadening_slope_khz_per_uw`, `base_linewidth_khz`, `amplitude`,
/// `amplitude_<LABEL>`, `f_hyperfine_mhz`, `line_shape`.
pub fn beam_from(kv: &mut KeyValues) -> Result<BeamConfig> {
    let d = BeamConfig::default();
    let mut overrides = Vec::new();
    for label in PeakLabel::ALL {
        if let Some(a) = kv.take::<f64>(&format!("amplitude_{}", label.name()))? {
            overrides.push((label, a));
        }
    }
    let shape = match kv.take_str("line_shape") {
        None => d.shape,
        Some((s, line)) => match s.as_str() {
            "lorentzian" => LineShape::Lorentzian,
            "gaussian" => LineShape::Gaussian,
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown line shape `{s}`"),
                })
            }
        },
    };
    let beam = BeamConfig {
        power_uw: kv.take_or("power_uw", d.power_uw)?,
        mode: kv.take_or("mode", d.mode)?,
        lightshift_slope: kv.take_or("lightshift_slope_mhz_per_uw", d.lightshift_slope)?,
        broadening_slope: kv.take_or("broadening_slope_khz_per_uw", d.broadening_slope)?,
        base_linewidth: kv.take_or("base_linewidth_khz", d.base_linewidth)?,
        amplitude: kv.take_or("amplitude", d.amplitude)?,
        amplitude_overrides: overrides,
        f_hyperfine: kv.take_or("f_hyperfine_mhz", d.f_hyperfine)?,
        shape,
    };
    beam.validate()?;
    Ok(beam)
}

/// `background_counts` (default 5000) or `noiseless = true`.
pub fn noise_from(kv: &mut KeyValues) -> Result<Noise> {
    let noiseless = kv.take_or("noiseless", false)?;
    let background = kv.take_or("background_counts", 5000.0)?;
    if noiseless {
        Ok(Noise::None)
    } else if background >= 1.0 {
        Ok(Noise::Poisson { background })
    } else {
        Err(Error::InvalidInput("background_counts must be at least 1".into()))
    }
}

pub fn detect_from(kv: &mut KeyValues) -> Result<DetectConfig> {
    let d = DetectConfig::default();
    Ok(DetectConfig {
        min_prominence: kv.take_or("min_prominence", d.min_prominence)?,
        max_peaks: kv.take_or("max_peaks", d.max_peaks)?,
        smoothing: kv.take_or("smoothing_points", d.smoothing)?,
        window_fwhm: kv.take_or("window_fwhm", d.window_fwhm)?,
    })
}

/// Minimization keys on top of beam, noise and detection keys:
/// `axis_order`, `sweep_points`, `sweep_span_a`, `rounds`,
/// `power_schedule_uw`, `splitting_metric`, `start_currents_a`, `grid_mhz`.
pub fn minimize_from(kv: &mut KeyValues) -> Result<MinimizeConfig> {
    let d = MinimizeConfig::default();
    let beam = beam_from(kv)?;
    let noise = noise_from(kv)?;
    let detect = detect_from(kv)?;
    let axis_order = kv.take_array::<Axis, 3>("axis_order")?.unwrap_or(d.axis_order);
    let grid = match kv.take_str("grid_mhz") {
        Some((s, _)) => parse_grid_spec(&s)?,
        None => (beam.f_hyperfine - 17.0, beam.f_hyperfine + 17.0, 0.01),
    };
    let cfg = MinimizeConfig {
        axis_order,
        sweep_points: kv.take_or("sweep_points", d.sweep_points)?,
        sweep_span: kv.take_array("sweep_span_a")?.unwrap_or(d.sweep_span),
        rounds: kv.take_or("rounds", d.rounds)?,
        power_schedule: kv.take_list("power_schedule_uw")?.unwrap_or(d.power_schedule),
        metric: kv.take_or("splitting_metric", d.metric)?,
        start_currents: kv.take_array("start_currents_a")?.unwrap_or(d.start_currents),
        beam,
        grid,
        noise,
        detect,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_unknown() {
        let mut kv = KeyValues::parse("# env\nk_x = 0.5\n\nambient_z_g=1.0 # trailing\nbogus=1\n").unwrap();
        let env = environment_from(&mut kv).unwrap();
        assert_eq!(env.calibration.axes[0].k.value, 0.5);
        assert!((env.ambient_field().z - 1.0).abs() < 1e-12);
        match kv.finish() {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 5);
                assert!(message.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(KeyValues::parse("a=1\nnonsense\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(KeyValues::parse("a=1\na=2\n"), Err(Error::Parse { line: 2, .. })));
        let mut kv = KeyValues::parse("power_uw=lots\n").unwrap();
        assert!(beam_from(&mut kv).is_err());
    }

    #[test]
    fn minimize_keys() {
        let text = "axis_order=z,x,y\nrounds=3\npower_schedule_uw=70,30,10\nsplitting_metric=fitted_b_magnitude\n\
sweep_span_a=10,10,1\ngrid_mhz=1240:1260:0.01\n";
        let mut kv = KeyValues::parse(text).unwrap();
        let cfg = minimize_from(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(cfg.axis_order, [Axis::Z, Axis::X, Axis::Y]);
        assert_eq!(cfg.power_schedule, vec![70.0, 30.0, 10.0]);
        assert_eq!(cfg.sweep_span, [10.0, 10.0, 1.0]);
        assert_eq!(cfg.grid, (1240.0, 1260.0, 0.01));
        let mut kv = KeyValues::parse("rounds=3\n").unwrap();
        assert!(minimize_from(&mut kv).is_err());
    }

    #[test]
    fn triples_and_grids() {
        assert_eq!(parse_triple("-5.74, 1.70,0.14").unwrap(), [-5.74, 1.70, 0.14]);
        assert!(parse_triple("1,2").is_err());
        assert_eq!(parse_grid_spec("1:2:0.5").unwrap(), (1.0, 2.0, 0.5));
        assert!(parse_grid_spec("1:2").is_err());
    }
}
