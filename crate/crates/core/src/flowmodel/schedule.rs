//! Interpolant schedules x_t = alpha(t) x1 + sigma(t) x0.

use serde::{Deserialize, Serialize};

use super::FlowError;

/// Interpolant coefficients and their time derivatives on t in [0, 1].
///
/// Both kinds satisfy alpha(0) = 0, alpha(1) = 1, sigma(0) = 1,
/// sigma(1) = 0, and the score-transform denominator
/// `alpha_dot * sigma - alpha * sigma_dot` never vanishes on (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// alpha = t, sigma = 1 - t; the denominator is identically 1.
    #[default]
    #[serde(rename = "linear-ot")]
    LinearOt,
    /// alpha = sin(pi t / 2), sigma = cos(pi t / 2); denominator pi / 2.
    Trig,
}

impl Schedule {
    pub fn alpha(self, t: f64) -> f64 {
        match self {
            Schedule::LinearOt => t,
            Schedule::Trig => (std::f64::consts::FRAC_PI_2 * t).sin(),
        }
    }

    pub fn sigma(self, t: f64) -> f64 {
        match self {
            Schedule::LinearOt => 1.0 - t,
            Schedule::Trig => (std::f64::consts::FRAC_PI_2 * t).cos(),
        }
    }

    pub fn alpha_dot(self, t: f64) -> f64 {
        match self {
            Schedule::LinearOt => 1.0,
            Schedule::Trig => {
                std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).cos()
            }
        }
    }

    pub fn sigma_dot(self, t: f64) -> f64 {
        match self {
            Schedule::LinearOt => -1.0,
            Schedule::Trig => {
                -std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).sin()
            }
        }
    }

    /// The score-transform denominator `alpha_dot sigma - alpha sigma_dot`.
    pub fn denom(self, t: f64) -> f64 {
        self.alpha_dot(t) * self.sigma(t) - self.alpha(t) * self.sigma_dot(t)
    }
}

/// Point and velocity on the interpolant path between `x0` and `x1`.
///
/// Returns `(x_t, x_dot_t)` with `x_t = alpha x1 + sigma x0` and
/// `x_dot_t = alpha_dot x1 + sigma_dot x0`.
pub fn path_point(
    x0: &[f64],
    x1: &[f64],
    t: f64,
    sched: Schedule,
) -> Result<(Vec<f64>, Vec<f64>), FlowError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::TimeOutOfRange(t));
    }
    if x0.len() != x1.len() {
        return Err(FlowError::DimMismatch {
            expected: x1.len(),
            got: x0.len(),
        });
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let (ad, sd) = (sched.alpha_dot(t), sched.sigma_dot(t));
    let xt = x0.iter().zip(x1).map(|(&p, &q)| a * q + s * p).collect();
    let vt = x0.iter().zip(x1).map(|(&p, &q)| ad * q + sd * p).collect();
    Ok((xt, vt))
}
