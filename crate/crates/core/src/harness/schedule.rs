//! Step-size and horizon schedules with the conditions they rest on.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Universal constant `C` of the step-size conditions. Its value is unknown;
/// 1 is a heuristic placeholder.
pub const UNIVERSAL_CONSTANT: f64 = 1.0;

/// Empirical stand-ins for the problem constants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    /// Estimated gradient Lipschitz constant `L̂`.
    pub smoothness: Option<f64>,
    /// Empirical standard deviation `σ̂` of the sampled gradient.
    pub noise_std: Option<f64>,
    /// Gradient-domination constant `μ`. Never estimated; user supplied.
    pub mu: Option<f64>,
    /// Fitted log-slope of the truncation error, reported in place of `D`.
    pub decay_slope: Option<f64>,
}

impl TheoryConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("smoothness", self.smoothness),
            ("noise_std", self.noise_std),
            ("mu", self.mu),
        ] {
            if let Some(x) = v {
                if !(x >= 0.0) || !x.is_finite() {
                    return Err(Error::Config(format!(
                        "{name} must be finite and nonnegative, got {x}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    /// `η = (4/(μH)) ln(NHT)/T`, needs `μ`.
    FastRate,
    /// `η = (4/H) √(NH/T)`.
    Stationary,
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleMode::FastRate => "fast-rate",
            ScheduleMode::Stationary => "stationary",
        })
    }
}

impl FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast-rate" => Ok(ScheduleMode::FastRate),
            "stationary" => Ok(ScheduleMode::Stationary),
            other => Err(Error::Config(format!(
                "unknown schedule mode `{other}` (expected fast-rate or stationary)"
            ))),
        }
    }
}

/// A suggested `(η, K)` and every condition that could not be confirmed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub local_step: f64,
    pub horizon: usize,
    pub warnings: Vec<String>,
}

/// Smallest `K` with `K ≥ ln(NHT) / (2 ln(1/γ))`, at least 1.
pub fn horizon_bound(n: usize, h: usize, t: usize, gamma: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!(
            "discount must lie in [0, 1), got {gamma}"
        )));
    }
    if gamma == 0.0 {
        return Ok(1);
    }
    let nht = (n * h * t) as f64;
    let k = (nht.ln() / (2.0 * (1.0 / gamma).ln())).ceil();
    Ok((k as usize).max(1))
}

/// Evaluates the step-size and horizon formulas for `N` agents, `H` local
/// steps and `T` rounds. Conditions that fail, or cannot be checked because
/// `L̂` is unknown, become warnings.
pub fn suggest_schedule(
    n: usize,
    h: usize,
    t: usize,
    gamma: f64,
    mode: ScheduleMode,
    constants: &TheoryConstants,
) -> Result<Schedule> {
    if n == 0 || h == 0 || t == 0 {
        return Err(Error::Config(format!(
            "N, H and T must be positive, got N={n} H={h} T={t}"
        )));
    }
    constants.validate()?;
    let horizon = horizon_bound(n, h, t, gamma)?;
    let c = UNIVERSAL_CONSTANT;
    let (nf, hf, tf) = (n as f64, h as f64, t as f64);
    let log_nht = (nf * hf * tf).ln();
    let mut warnings = Vec::new();
    let local_step = match mode {
        ScheduleMode::FastRate => {
            let mu = match constants.mu {
                Some(mu) if mu > 0.0 => mu,
                _ => {
                    return Err(Error::Config(
                        "fast-rate schedule needs a positive gradient-domination constant mu"
                            .into(),
                    ))
                }
            };
            if let Some(l) = constants.smoothness {
                let need = (l / mu) * (16.0 * c * log_nht).max(nf * hf);
                if tf < need {
                    warnings.push(format!(
                        "T = {t} is below the fast-rate threshold (L/mu) max(16 C ln(NHT), NH) = {need:.4} (C = 1)"
                    ));
                }
            }
            4.0 / (mu * hf) * log_nht / tf
        }
        ScheduleMode::Stationary => {
            if let Some(l) = constants.smoothness {
                let need = l * l * (256.0 * c * c * nf * hf).max((nf * hf).powi(3));
                if tf < need {
                    warnings.push(format!(
                        "T = {t} is below the stationary threshold L^2 max(256 C^2 NH, N^3 H^3) = {need:.4} (C = 1)"
                    ));
                }
            }
            4.0 / hf * (nf * hf / tf).sqrt()
        }
    };
    match constants.smoothness {
        Some(l) => {
            let cap = 1.0 / (4.0 * c * l * hf);
            if local_step > cap {
                warnings.push(format!(
                    "eta = {local_step:.6e} exceeds 1/(4 C L H) = {cap:.6e} (C = 1)"
                ));
            }
        }
        None => warnings.push("smoothness unknown; step-size conditions not checked".into()),
    }
    Ok(Schedule {
        local_step,
        horizon,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_mu(mu: f64) -> TheoryConstants {
        TheoryConstants {
            mu: Some(mu),
            ..Default::default()
        }
    }

    #[test]
    fn fast_rate_formula() {
        let s = suggest_schedule(4, 5, 1000, 0.9, ScheduleMode::FastRate, &with_mu(0.1)).unwrap();
        let expect = (4.0 / (0.1 * 5.0)) * 20000f64.ln() / 1000.0;
        assert!((s.local_step - expect).abs() <= 1e-15 * expect);
        assert_eq!(s.horizon, 47);
    }

    #[test]
    fn horizon_formula_hand_value() {
        // ln(20000)/(2 ln(10/9)) = 46.99...
        assert_eq!(horizon_bound(4, 5, 1000, 0.9).unwrap(), 47);
        assert_eq!(horizon_bound(1, 1, 1, 0.9).unwrap(), 1);
        assert_eq!(horizon_bound(4, 5, 1000, 0.0).unwrap(), 1);
    }

    #[test]
    fn stationary_formula() {
        let s = suggest_schedule(
            1,
            1,
            100,
            0.9,
            ScheduleMode::Stationary,
            &TheoryConstants::default(),
        )
        .unwrap();
        assert!((s.local_step - 0.4).abs() < 1e-15);
    }

    #[test]
    fn fast_rate_needs_mu() {
        let err = suggest_schedule(
            1,
            1,
            10,
            0.5,
            ScheduleMode::FastRate,
            &TheoryConstants::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn short_runs_are_flagged() {
        let constants = TheoryConstants {
            smoothness: Some(10.0),
            mu: Some(0.1),
            ..Default::default()
        };
        let s = suggest_schedule(4, 5, 100, 0.9, ScheduleMode::FastRate, &constants).unwrap();
        assert!(s.warnings.iter().any(|w| w.contains("threshold")));
        assert!(s.warnings.iter().any(|w| w.contains("1/(4 C L H)")));
    }

    #[test]
    fn horizon_meets_its_bound() {
        for &(n, h, t, g) in &[(1, 1, 5, 0.5), (8, 5, 400, 0.9), (3, 7, 11, 0.99)] {
            let k = horizon_bound(n, h, t, g).unwrap() as f64;
            let bound = ((n * h * t) as f64).ln() / (2.0 * (1.0f64 / g).ln());
            assert!(k >= bound && k - 1.0 < bound.max(0.0) + 1e-12);
        }
    }

    #[test]
    fn invalid_arguments() {
        let c = with_mu(1.0);
        assert!(suggest_schedule(0, 1, 1, 0.5, ScheduleMode::FastRate, &c).is_err());
        assert!(suggest_schedule(1, 1, 1, 1.0, ScheduleMode::FastRate, &c).is_err());
        assert!("nope".parse::<ScheduleMode>().is_err());
    }
}
