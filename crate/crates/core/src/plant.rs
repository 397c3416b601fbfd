//! Euler-discretized flux-decay model of a synchronous generator on an infinite bus.
//!
//! State `x = (delta, omega, Eq')`, input `u = T_M` (mechanical torque, pu) and output
//! `y = (omega - omega_s, P_e)` with `P_e = gamma * Eq' * sin(delta)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Physical constants of the generator and the sampling period.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct GeneratorParams<T> {
    /// Inertia constant (s).
    #[serde(rename = "H")]
    pub h: T,
    /// Synchronous speed (rad/s).
    pub omega_s: T,
    /// Damping (pu torque per unit speed deviation).
    #[serde(rename = "D")]
    pub d: T,
    /// d-axis open-circuit transient time constant (s).
    #[serde(rename = "Tdo_prime")]
    pub tdo_prime: T,
    #[serde(rename = "Xd")]
    pub xd: T,
    #[serde(rename = "Xd_prime")]
    pub xd_prime: T,
    #[serde(rename = "Xe")]
    pub xe: T,
    #[serde(rename = "V_inf")]
    pub v_inf: T,
    #[serde(rename = "E_fd")]
    pub e_fd: T,
    /// Sampling period (s).
    pub dt: T,
}

impl<T: Real> Default for GeneratorParams<T> {
    fn default() -> Self {
        Self {
            h: T::lit(3.5),
            omega_s: T::lit(377.0),
            d: T::zero(),
            tdo_prime: T::lit(6.0),
            xd: T::lit(1.8),
            xd_prime: T::lit(0.3),
            xe: T::lit(0.1),
            v_inf: T::one(),
            e_fd: T::lit(2.0),
            dt: T::lit(0.0025),
        }
    }
}

/// Largest admissible sampling period.
pub const MAX_DT: f64 = 0.005;

impl<T: Real> GeneratorParams<T> {
    /// Normalized inertia `2H / omega_s`.
    pub fn m(&self) -> T {
        T::lit(2.0) * self.h / self.omega_s
    }

    pub fn x_sigma(&self) -> T {
        self.xd_prime + self.xe
    }

    pub fn gamma(&self) -> T {
        self.v_inf / self.x_sigma()
    }

    pub fn kappa(&self) -> T {
        (self.xd + self.xe) / self.x_sigma()
    }

    pub fn mu(&self) -> T {
        (self.xd - self.xd_prime) * self.v_inf / self.x_sigma()
    }

    pub fn alpha_d(&self) -> T {
        self.dt / self.m()
    }

    pub fn alpha_q(&self) -> T {
        self.dt / self.tdo_prime
    }

    /// Copy of the parameters with a different sampling period.
    pub fn with_dt(&self, dt: T) -> Self {
        Self { dt, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("H", self.h),
            ("omega_s", self.omega_s),
            ("D", self.d),
            ("Tdo_prime", self.tdo_prime),
            ("Xd", self.xd),
            ("Xd_prime", self.xd_prime),
            ("Xe", self.xe),
            ("V_inf", self.v_inf),
            ("E_fd", self.e_fd),
            ("dt", self.dt),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::NonFinite(name));
            }
            // D = 0 (undamped) is admissible; everything else must be strictly positive.
            let ok = if name == "D" { v >= T::zero() } else { v > T::zero() };
            if !ok {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("must be positive, got {v}"),
                });
            }
        }
        if self.xd <= self.xd_prime {
            return Err(Error::InvalidParameter {
                name: "Xd",
                reason: "must exceed Xd_prime".into(),
            });
        }
        if self.dt > T::lit(MAX_DT) {
            return Err(Error::InvalidParameter {
                name: "dt",
                reason: format!("must not exceed {MAX_DT} s, got {}", self.dt),
            });
        }
        if self.alpha_d() * self.d >= T::lit(2.0) {
            return Err(Error::InvalidParameter {
                name: "D",
                reason: "alpha_d * D must be below 2".into(),
            });
        }
        if self.alpha_q() * self.kappa() >= T::lit(2.0) {
            return Err(Error::InvalidParameter {
                name: "Tdo_prime",
                reason: "alpha_q * kappa must be below 2".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct State<T> {
    pub delta: T,
    pub omega: T,
    #[serde(rename = "Eq_prime")]
    pub eq_prime: T,
}

impl<T: Real> State<T> {
    pub fn new(delta: T, omega: T, eq_prime: T) -> Self {
        Self {
            delta,
            omega,
            eq_prime,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.delta.is_finite() && self.omega.is_finite() && self.eq_prime.is_finite()
    }

    pub fn to_array(&self) -> [T; 3] {
        [self.delta, self.omega, self.eq_prime]
    }

    /// Euclidean distance in raw state units (rad, rad/s, pu).
    pub fn distance(&self, other: &Self) -> T {
        let dd = self.delta - other.delta;
        let dw = self.omega - other.omega;
        let de = self.eq_prime - other.eq_prime;
        (dd * dd + dw * dw + de * de).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Output<T> {
    pub omega_tilde: T,
    #[serde(rename = "P_e")]
    pub p_e: T,
}

impl<T: Real> Output<T> {
    pub fn to_array(&self) -> [T; 2] {
        [self.omega_tilde, self.p_e]
    }
}

/// Unit convention for `omega_max`.
///
/// `Raw` compares `|omega - omega_s|` directly against the configured number. `PerUnit`
/// scales it by `omega_s`, so `omega_max = 0.02` admits deviations up to `0.02 * omega_s` rad/s.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaUnits {
    #[default]
    Raw,
    PerUnit,
}

/// Compact operating box for state and input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct OperatingRegion<T> {
    pub delta_s: T,
    pub delta_max: T,
    pub omega_max: T,
    #[serde(rename = "Eq_min")]
    pub eq_min: T,
    #[serde(rename = "Eq_max")]
    pub eq_max: T,
    pub u_min: T,
    pub u_max: T,
    pub omega_units: OmegaUnits,
}

impl<T: Real> Default for OperatingRegion<T> {
    fn default() -> Self {
        Self {
            delta_s: T::lit(0.4),
            delta_max: T::lit(0.5),
            omega_max: T::lit(0.02),
            eq_min: T::lit(0.6),
            eq_max: T::lit(1.2),
            u_min: T::zero(),
            u_max: T::lit(1.5),
            omega_units: OmegaUnits::Raw,
        }
    }
}

impl<T: Real> OperatingRegion<T> {
    /// Bound on `|omega - omega_s|` in the plant's speed unit.
    pub fn omega_bound(&self, p: &GeneratorParams<T>) -> T {
        match self.omega_units {
            OmegaUnits::Raw => self.omega_max,
            OmegaUnits::PerUnit => self.omega_max * p.omega_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("delta_s", self.delta_s),
            ("delta_max", self.delta_max),
            ("omega_max", self.omega_max),
            ("Eq_min", self.eq_min),
            ("Eq_max", self.eq_max),
            ("u_min", self.u_min),
            ("u_max", self.u_max),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        if self.delta_max < T::zero() || self.delta_max >= T::frac_pi_2() {
            return Err(Error::InvalidParameter {
                name: "delta_max",
                reason: "must lie in [0, pi/2)".into(),
            });
        }
        if self.omega_max <= T::zero() {
            return Err(Error::InvalidParameter {
                name: "omega_max",
                reason: "must be positive".into(),
            });
        }
        if self.eq_min >= self.eq_max {
            return Err(Error::InvalidParameter {
                name: "Eq_min",
                reason: "must be below Eq_max".into(),
            });
        }
        if self.u_min >= self.u_max {
            return Err(Error::InvalidParameter {
                name: "u_min",
                reason: "must be below u_max".into(),
            });
        }
        Ok(())
    }

    /// Closed-box membership test.
    pub fn contains(&self, x: &State<T>, u: T, p: &GeneratorParams<T>) -> bool {
        self.contains_state(x, p) && u >= self.u_min && u <= self.u_max
    }

    pub fn contains_state(&self, x: &State<T>, p: &GeneratorParams<T>) -> bool {
        (x.delta - self.delta_s).abs() <= self.delta_max
            && (x.omega - p.omega_s).abs() <= self.omega_bound(p)
            && x.eq_prime >= self.eq_min
            && x.eq_prime <= self.eq_max
    }

    /// Box corners in `(delta, omega, Eq', u)`: 16 points.
    pub fn corners(&self, p: &GeneratorParams<T>) -> Vec<(State<T>, T)> {
        let wb = self.omega_bound(p);
        let mut out = Vec::with_capacity(16);
        for &d in &[self.delta_s - self.delta_max, self.delta_s + self.delta_max] {
            for &w in &[p.omega_s - wb, p.omega_s + wb] {
                for &e in &[self.eq_min, self.eq_max] {
                    for &u in &[self.u_min, self.u_max] {
                        out.push((State::new(d, w, e), u));
                    }
                }
            }
        }
        out
    }
}

/// One Euler step of the flux-decay dynamics.
pub fn step<T: Real>(x: &State<T>, u: T, p: &GeneratorParams<T>) -> Result<State<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite("state"));
    }
    if !u.is_finite() {
        return Err(Error::NonFinite("input"));
    }
    let w_dev = x.omega - p.omega_s;
    let delta = x.delta + p.dt * w_dev;
    let omega = x.omega + p.alpha_d() * (u - p.d * w_dev - p.gamma() * x.eq_prime * x.delta.sin());
    let eq_prime = x.eq_prime
        + p.alpha_q() * (p.e_fd - p.kappa() * x.eq_prime + p.mu() * x.delta.cos());
    Ok(State {
        delta,
        omega,
        eq_prime,
    })
}

pub fn output<T: Real>(x: &State<T>, p: &GeneratorParams<T>) -> Output<T> {
    Output {
        omega_tilde: x.omega - p.omega_s,
        p_e: p.gamma() * x.eq_prime * x.delta.sin(),
    }
}

/// Rest point at rotor angle `delta_s`: returns the state and the holding torque.
pub fn compute_equilibrium<T: Real>(p: &GeneratorParams<T>, delta_s: T) -> Result<(State<T>, T)> {
    if !delta_s.is_finite() {
        return Err(Error::NonFinite("delta_s"));
    }
    if delta_s.abs() >= T::frac_pi_2() {
        return Err(Error::InvalidParameter {
            name: "delta_s",
            reason: "must satisfy |delta_s| < pi/2".into(),
        });
    }
    let kappa = p.kappa();
    if kappa == T::zero() || !kappa.is_finite() {
        return Err(Error::InvalidParameter {
            name: "kappa",
            reason: "(Xd + Xe) / X_sigma must be finite and nonzero".into(),
        });
    }
    let eq_s = (p.e_fd + p.mu() * delta_s.cos()) / kappa;
    let x_s = State::new(delta_s, p.omega_s, eq_s);
    // Same expression as the electrical power term in `step`, so the speed update cancels exactly.
    let u_s = p.gamma() * eq_s * delta_s.sin();
    Ok((x_s, u_s))
}

pub fn in_region<T: Real>(
    x: &State<T>,
    u: T,
    r: &OperatingRegion<T>,
    p: &GeneratorParams<T>,
) -> bool {
    r.contains(x, u, p)
}

/// Result of [`simulate`]: `states.len() == inputs.len() + 1`, `outputs[k] = output(states[k])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTrajectory<T> {
    pub states: Vec<State<T>>,
    pub inputs: Vec<T>,
    pub outputs: Vec<Output<T>>,
    /// First index `k` at which `(x_k, u_k)` (or the terminal state) leaves the region.
    pub exit_index: Option<usize>,
}

impl<T: Real> SimTrajectory<T> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// CSV with header `k,delta,omega,Eq_prime,u,omega_tilde,P_e`; the terminal state row
    /// leaves the input and output columns empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "k,delta,omega,Eq_prime,u,omega_tilde,P_e")?;
        for (k, x) in self.states.iter().enumerate() {
            match (self.inputs.get(k), self.outputs.get(k)) {
                (Some(u), Some(y)) => writeln!(
                    w,
                    "{k},{},{},{},{},{},{}",
                    x.delta, x.omega, x.eq_prime, u, y.omega_tilde, y.p_e
                )?,
                _ => writeln!(w, "{k},{},{},{},,,", x.delta, x.omega, x.eq_prime)?,
            }
        }
        Ok(())
    }
}

/// Propagates `x0` through `inputs`. When `region` is given, the first exit is flagged.
pub fn simulate<T: Real>(
    x0: &State<T>,
    inputs: &[T],
    p: &GeneratorParams<T>,
    region: Option<&OperatingRegion<T>>,
) -> Result<SimTrajectory<T>> {
    if !x0.is_finite() {
        return Err(Error::NonFinite("initial state"));
    }
    let mut states = Vec::with_capacity(inputs.len() + 1);
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut exit_index = None;
    states.push(*x0);
    let mut x = *x0;
    for (k, &u) in inputs.iter().enumerate() {
        if !u.is_finite() {
            return Err(Error::NonFinite("input"));
        }
        if exit_index.is_none() {
            if let Some(r) = region {
                if !r.contains(&x, u, p) {
                    exit_index = Some(k);
                }
            }
        }
        outputs.push(output(&x, p));
        x = step(&x, u, p).map_err(|_| Error::Diverged { step: k })?;
        if !x.is_finite() {
            return Err(Error::Diverged { step: k + 1 });
        }
        states.push(x);
    }
    if exit_index.is_none() {
        if let Some(r) = region {
            if !r.contains_state(&x, p) {
                exit_index = Some(inputs.len());
            }
        }
    }
    Ok(SimTrajectory {
        states,
        inputs: inputs.to_vec(),
        outputs,
        exit_index,
    })
}
