//! Exponential envelope `c rho^k + beta` fitted to a distance-to-setpoint series.

use koopdeepc::mpc::ClosedLoopLog;
use serde::Serialize;

/// Minimum number of MPC iterations for a fit from a closed-loop log.
pub const MIN_ITERATIONS: usize = 20;
/// Points whose excess over the plateau is below this fraction of the peak excess are left out.
pub const WINDOW_FRACTION: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum FitStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnvelopeFit {
    /// Amplitude `c` of `c rho^k`.
    pub c_fit: f64,
    /// `c_fit / d_0`, the constant multiplying the initial distance.
    pub c_normalized: f64,
    pub rho_fit: f64,
    /// Median of the final quarter.
    pub beta_fit: f64,
    /// RMS error of the log-linear fit.
    pub residual: f64,
    /// Inclusive index range spanned by the fitted points.
    pub window: (usize, usize),
    pub points: usize,
    pub status: FitStatus,
}

impl EnvelopeFit {
    pub fn ok(&self) -> bool {
        self.status == FitStatus::Ok
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn failed(beta: f64, reason: impl Into<String>) -> EnvelopeFit {
    EnvelopeFit {
        c_fit: f64::NAN,
        c_normalized: f64::NAN,
        rho_fit: f64::NAN,
        beta_fit: beta,
        residual: f64::NAN,
        window: (0, 0),
        points: 0,
        status: FitStatus::Failed(reason.into()),
    }
}

/// Fits `d_k ~ c rho^k + beta` by least squares on `log(d_k - beta)`.
pub fn fit_distances(d: &[f64]) -> EnvelopeFit {
    if d.len() < 4 {
        return failed(f64::NAN, "series too short");
    }
    if d.iter().any(|v| !v.is_finite()) {
        return failed(f64::NAN, "non-finite distance");
    }
    let tail = &d[d.len() - (d.len() / 4).max(1)..];
    let beta = median(tail);
    let excess: Vec<f64> = d.iter().map(|v| v - beta).collect();
    let peak = excess.iter().cloned().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return failed(beta, "no decay above the plateau");
    }
    let pts: Vec<(f64, f64)> = excess
        .iter()
        .enumerate()
        .filter(|(_, e)| **e >= WINDOW_FRACTION * peak)
        .map(|(k, e)| (k as f64, e.ln()))
        .collect();
    if pts.len() < 3 {
        return failed(beta, "fewer than 3 points above the plateau");
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx = pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / n).sqrt();
    let rho = slope.exp();
    let c = intercept.exp();
    let window = (pts[0].0 as usize, pts[pts.len() - 1].0 as usize);
    let status = if rho > 0.0 && rho < 1.0 {
        FitStatus::Ok
    } else {
        FitStatus::Failed(format!("rho_fit = {rho} outside (0, 1)"))
    };
    EnvelopeFit {
        c_fit: c,
        c_normalized: c / d[0],
        rho_fit: rho,
        beta_fit: beta,
        residual,
        window,
        points: pts.len(),
        status,
    }
}

/// Fit on `|x_k - x_s|` of a closed-loop log, one point per plant step.
pub fn fit_envelope(log: &ClosedLoopLog) -> EnvelopeFit {
    let d = log.distances();
    if log.mpc_iterations < MIN_ITERATIONS {
        let beta = if d.is_empty() { f64::NAN } else { median(&d[d.len() - (d.len() / 4).max(1)..]) };
        return failed(
            beta,
            format!("{} MPC iterations, need {MIN_ITERATIONS}", log.mpc_iterations),
        );
    }
    fit_distances(&d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_exponential_with_plateau() {
        let d: Vec<f64> = (0..200).map(|k| 2.0 * 0.9f64.powi(k) + 0.01).collect();
        let f = fit_distances(&d);
        assert!(f.ok());
        assert!((f.c_fit / 2.0 - 1.0).abs() < 0.05, "{f:?}");
        assert!((f.rho_fit / 0.9 - 1.0).abs() < 0.05);
        assert!((f.beta_fit / 0.01 - 1.0).abs() < 0.05);
    }

    #[test]
    fn constant_series_fails_with_plateau() {
        let f = fit_distances(&[0.3; 50]);
        assert!(!f.ok());
        assert_eq!(f.beta_fit, 0.3);
    }

    #[test]
    fn pure_exponential_has_tiny_plateau() {
        let d: Vec<f64> = (0..200).map(|k| 2.0 * 0.9f64.powi(k)).collect();
        let f = fit_distances(&d);
        assert!(f.ok());
        assert!(f.beta_fit <= 1e-6);
        assert!((f.rho_fit / 0.9 - 1.0).abs() < 1e-3, "{f:?}");
    }

    #[test]
    fn growing_series_fails() {
        let d: Vec<f64> = (0..100).map(|k| 1.05f64.powi(k)).collect();
        assert!(!fit_distances(&d).ok());
        assert!(!fit_distances(&[1.0, f64::NAN, 0.5, 0.2]).ok());
        assert!(!fit_distances(&[1.0, 0.5]).ok());
    }
}
