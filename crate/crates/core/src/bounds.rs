//! Effective-noise ladder: loose and tight uniform bounds, the state-dependent bound, `c_pe`,
//! the radius-dependent level `eps_bar(r)` and the smallest fixed point `r*`.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{self, Trajectory};
use crate::error::{Error, Result};
use crate::koopman::{self, EmbeddingMatrices, Equilibrium, ErrorCertificate, MinimalRealization};
use crate::linalg;
use crate::plant::{GeneratorParams, OperatingRegion, State};
use crate::scalar::Real;

/// Largest lifted deviation `max |Phi(x) - z_s|` over an `n_grid^3` grid of the state box
/// (endpoints included, so all corners are visited) and the largest input deviation.
pub fn diameters<T: Real>(
    r: &OperatingRegion<T>,
    p: &GeneratorParams<T>,
    eq: &Equilibrium<T>,
    n_grid: usize,
) -> Result<(T, T)> {
    if n_grid < 2 {
        return Err(Error::InvalidParameter {
            name: "n_grid",
            reason: "need at least 2 points per axis".into(),
        });
    }
    let wb = r.omega_bound(p);
    let axis = |lo: T, hi: T, i: usize| lo + (hi - lo) * T::lit(i as f64 / (n_grid - 1) as f64);
    let mut diam_z = T::zero();
    for i in 0..n_grid {
        let d = axis(r.delta_s - r.delta_max, r.delta_s + r.delta_max, i);
        for j in 0..n_grid {
            let w = axis(p.omega_s - wb, p.omega_s + wb, j);
            for k in 0..n_grid {
                let e = axis(r.eq_min, r.eq_max, k);
                let dev = eq.zbar(&State::new(d, w, e), p).norm();
                diam_z = diam_z.max(dev);
            }
        }
    }
    let diam_u = (r.u_min - eq.u_s).abs().max((r.u_max - eq.u_s).abs());
    Ok((diam_z, diam_u))
}

#[derive(Clone, Debug)]
pub struct BoundInputs<T: Real> {
    pub emb: EmbeddingMatrices<T>,
    pub cert: ErrorCertificate<T>,
    pub diam_z: T,
    pub diam_u: T,
    pub l_pred: usize,
}

impl<T: Real> BoundInputs<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.diam_z >= T::zero() && self.diam_u >= T::zero()) {
            return Err(Error::InvalidParameter {
                name: "diam",
                reason: "diameters must be nonnegative".into(),
            });
        }
        if self.l_pred < 2 {
            return Err(Error::InvalidParameter {
                name: "l_pred",
                reason: "horizon must be at least 2".into(),
            });
        }
        Ok(())
    }

    /// Worst-case residual `e_bar = eps_A diam_z + eps_B diam_u + c_0`.
    pub fn e_bar(&self) -> T {
        self.cert.eps_a * self.diam_z + self.cert.eps_b * self.diam_u + self.cert.c0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LooseBound<T> {
    pub e_bar: T,
    /// `eps_bar_k` for `k = 0 .. L-1`.
    pub eps_bar_k: Vec<T>,
    pub eps_bar: T,
}

/// `eps_bar_k = |C| e_bar sum_{l<k} |A|^l + eps_C diam_z`, maximized at `k = L-1`.
pub fn eps_bar_loose<T: Real>(bi: &BoundInputs<T>) -> Result<LooseBound<T>> {
    bi.validate()?;
    let e_bar = bi.e_bar();
    let na = linalg::spectral_norm(&bi.emb.a);
    let nc = linalg::spectral_norm(&bi.emb.c);
    let floor = bi.cert.eps_c * bi.diam_z;
    let mut eps_bar_k = Vec::with_capacity(bi.l_pred);
    let mut sum = T::zero();
    let mut pow = T::one();
    for _ in 0..bi.l_pred {
        eps_bar_k.push(nc * e_bar * sum + floor);
        sum += pow;
        pow *= na;
    }
    let eps_bar = *eps_bar_k.last().expect("l_pred >= 2");
    Ok(LooseBound {
        e_bar,
        eps_bar_k,
        eps_bar,
    })
}

/// `|C A^l|_2` for `l = 0 .. count-1`, from iterated matrix products.
pub fn ca_norms<T: Real>(emb: &EmbeddingMatrices<T>, count: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(count);
    let mut ca = emb.c.clone();
    for _ in 0..count {
        out.push(linalg::spectral_norm(&ca));
        ca = &ca * &emb.a;
    }
    out
}

/// `S_L = sum_{l=0}^{L-2} |C A^l|_2`.
pub fn s_l<T: Real>(emb: &EmbeddingMatrices<T>, l_pred: usize) -> T {
    ca_norms(emb, l_pred.saturating_sub(1))
        .into_iter()
        .fold(T::zero(), |a, b| a + b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TightBound<T> {
    pub s_l: T,
    pub eps_bar_k: Vec<T>,
    pub eps_bar_tight: T,
}

/// `eps_bar_k^tight = e_bar sum_{l<k} |C A^l| + eps_C diam_z`.
pub fn eps_bar_tight<T: Real>(bi: &BoundInputs<T>) -> Result<TightBound<T>> {
    bi.validate()?;
    let e_bar = bi.e_bar();
    let floor = bi.cert.eps_c * bi.diam_z;
    let norms = ca_norms(&bi.emb, bi.l_pred - 1);
    let mut eps_bar_k = Vec::with_capacity(bi.l_pred);
    let mut sum = T::zero();
    eps_bar_k.push(floor);
    for v in &norms {
        sum += *v;
        eps_bar_k.push(e_bar * sum + floor);
    }
    Ok(TightBound {
        s_l: sum,
        eps_bar_tight: e_bar * sum + floor,
        eps_bar_k,
    })
}

/// Right-hand side of the state-dependent bound at step `k`; `zbar_norms[j] = |zbar_j|`,
/// `ubar_norms[j] = |ubar_j|`.
pub fn eps_state_dependent<T: Real>(
    emb: &EmbeddingMatrices<T>,
    cert: &ErrorCertificate<T>,
    zbar_norms: &[T],
    ubar_norms: &[T],
    k: usize,
) -> Result<T> {
    if zbar_norms.len() <= k || ubar_norms.len() < k {
        return Err(Error::TooShort {
            needed: k + 1,
            got: zbar_norms.len().min(ubar_norms.len() + 1),
        });
    }
    let norms = ca_norms(emb, k);
    let mut total = cert.eps_c * zbar_norms[k];
    for (l, cn) in norms.iter().enumerate() {
        let j = k - 1 - l;
        total += *cn * (cert.eps_a * zbar_norms[j] + cert.eps_b * ubar_norms[j] + cert.c0);
    }
    Ok(total)
}

/// `c_pe = |H_ux^+|_2^2 = 1 / sigma_min(H_ux)^2` for full-row-rank `H_ux`. The input block
/// occupies the first `input_rows` rows; a rank defect is attributed to the block that causes it.
pub fn c_pe<T: Real>(h_ux: &DMatrix<T>, input_rows: usize, tol: T) -> Result<T> {
    let rows = h_ux.nrows();
    let sv = linalg::singular_values(h_ux);
    let rank = linalg::rank_from_singular_values(&sv, tol);
    if rank < rows || sv.len() < rows {
        let hu = h_ux.rows(0, input_rows.min(rows)).into_owned();
        let ru = linalg::numerical_rank(&hu, tol);
        let (block, r, expected) = if ru < hu.nrows() {
            ("input Hankel H_u", ru, hu.nrows())
        } else {
            ("stacked input-state H_ux", rank, rows)
        };
        return Err(Error::RankDeficient {
            block: block.into(),
            rank: r,
            expected,
        });
    }
    let smin = sv[rows - 1];
    Ok(T::one() / (smin * smin))
}

/// `[H_depth(ubar); xi_0 .. xi_{cols-1}]` with `xi` the state of the reduced realization driven by
/// the trajectory's input deviations from the matched initial state `P (Phi(x_0) - z_s)`.
pub fn build_h_ux(
    min: &MinimalRealization<f64>,
    traj: &Trajectory,
    eq: &Equilibrium<f64>,
    depth: usize,
) -> Result<DMatrix<f64>> {
    let z0 = traj
        .lifted0
        .as_ref()
        .ok_or_else(|| Error::MissingStates("H_ux needs the initial lifted state".into()))?;
    let zbar0 = z0 - eq.z_s.to_dvector();
    let ubar = traj.u.map(|v| v - eq.u_s);
    let hu = data::hankel(&ubar, depth)?.matrix;
    let cols = hu.ncols();
    let n = min.n_eff;
    let mut xi = &min.projection * zbar0;
    let mut h = DMatrix::zeros(hu.nrows() + n, cols);
    h.view_mut((0, 0), hu.shape()).copy_from(&hu);
    for j in 0..cols {
        h.view_mut((hu.nrows(), j), (n, 1)).copy_from(&xi);
        xi = &min.system.a * xi + &min.system.b * ubar.column(j);
    }
    Ok(h)
}

/// `eps_bar(r) = eps_A S_L r + c_0 S_L`.
pub fn eps_of_r<T: Real>(r: T, cert: &ErrorCertificate<T>, s_l: T) -> Result<T> {
    if !(r >= T::zero()) {
        return Err(Error::InvalidParameter {
            name: "r",
            reason: "radius must be nonnegative".into(),
        });
    }
    Ok(cert.eps_a * s_l * r + cert.c0 * s_l)
}

/// Default surrogate `beta_hat(s) = kappa s^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticBeta<T> {
    pub kappa: T,
}

impl<T: Real> QuadraticBeta<T> {
    pub fn eval(&self, s: T) -> T {
        self.kappa * s * s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPointOptions<T> {
    pub r_max: T,
    pub tol: T,
    /// Scan resolution used to bracket the first sign change.
    pub grid: usize,
}

/// Scan points used to bracket the smallest root.
pub const FIXED_POINT_GRID: usize = 4096;

impl<T: Real> FixedPointOptions<T> {
    /// `r_max = 10 diam_z`, `tol = 1e-10`.
    pub fn for_diameter(diam_z: T) -> Self {
        Self {
            r_max: T::lit(10.0) * diam_z,
            tol: T::lit(1e-10),
            grid: FIXED_POINT_GRID,
        }
    }
}

/// Smallest `r >= 0` with `r = c x0_dev + beta_hat(eps_bar(r))`.
///
/// When `eps_A S_L = 0` the right-hand side is constant and the closed form is returned.
pub fn fixed_point_r<T: Real, F: Fn(T) -> T>(
    beta_hat: F,
    c: T,
    x0_dev: T,
    cert: &ErrorCertificate<T>,
    s_l: T,
    opts: &FixedPointOptions<T>,
) -> Result<T> {
    let eps0 = cert.c0 * s_l;
    let slope = cert.eps_a * s_l;
    let rhs = |r: T| c * x0_dev + beta_hat(slope * r + eps0);
    if slope == T::zero() {
        return Ok(rhs(T::zero()));
    }
    let g = |r: T| r - rhs(r);
    let g0 = g(T::zero());
    if g0 >= T::zero() {
        return Ok(T::zero());
    }
    let n = opts.grid.max(1);
    let mut lo = T::zero();
    let mut hi = None;
    for i in 1..=n {
        let r = opts.r_max * T::lit(i as f64 / n as f64);
        if g(r) >= T::zero() {
            hi = Some(r);
            break;
        }
        lo = r;
    }
    let Some(mut hi) = hi else {
        return Err(Error::NoFixedPoint {
            r_max: opts.r_max.as_f64(),
        });
    };
    while hi - lo > opts.tol {
        let mid = (lo + hi) / T::lit(2.0);
        if g(mid) >= T::zero() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Serialized ladder of bound values at one horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub l_pred: usize,
    pub diam_z: f64,
    pub diam_u: f64,
    pub norm_a: f64,
    pub norm_c: f64,
    pub e_bar: f64,
    pub eps_bar_k: Vec<f64>,
    pub eps_bar_tight_k: Vec<f64>,
    pub eps_bar: f64,
    pub s_l: f64,
    pub eps_bar_tight: f64,
    pub eps_bar_0: f64,
    pub loose_over_tight: f64,
    pub c0_over_eps_a: f64,
    pub c0_over_e_bar: f64,
    pub c_pe: Option<f64>,
    pub r_star: Option<f64>,
}

impl BoundReport {
    /// `eps_bar_0 <= eps_bar_tight <= eps_bar` up to a relative rounding slack.
    pub fn ordered(&self) -> bool {
        let slack = 1e-12 * self.eps_bar.abs().max(1.0);
        self.eps_bar_0 <= self.eps_bar_tight + slack && self.eps_bar_tight <= self.eps_bar + slack
    }

    pub fn write_ladder_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "k,eps_bar_k,eps_bar_k_tight")?;
        for (k, (a, b)) in self.eps_bar_k.iter().zip(&self.eps_bar_tight_k).enumerate() {
            writeln!(w, "{k},{a},{b}")?;
        }
        Ok(())
    }
}

/// Loose, tight and offset-only levels at one horizon.
pub fn bound_report<T: Real>(bi: &BoundInputs<T>) -> Result<BoundReport> {
    let loose = eps_bar_loose(bi)?;
    let tight = eps_bar_tight(bi)?;
    let f = |v: T| v.as_f64();
    let eps_bar_0 = bi.cert.c0 * tight.s_l;
    let ratio = |a: T, b: T| if b > T::zero() { f(a / b) } else { f64::NAN };
    Ok(BoundReport {
        l_pred: bi.l_pred,
        diam_z: f(bi.diam_z),
        diam_u: f(bi.diam_u),
        norm_a: f(linalg::spectral_norm(&bi.emb.a)),
        norm_c: f(linalg::spectral_norm(&bi.emb.c)),
        e_bar: f(loose.e_bar),
        eps_bar_k: loose.eps_bar_k.iter().copied().map(f).collect(),
        eps_bar_tight_k: tight.eps_bar_k.iter().copied().map(f).collect(),
        eps_bar: f(loose.eps_bar),
        s_l: f(tight.s_l),
        eps_bar_tight: f(tight.eps_bar_tight),
        eps_bar_0: f(eps_bar_0),
        loose_over_tight: ratio(loose.eps_bar, tight.eps_bar_tight),
        c0_over_eps_a: ratio(bi.cert.c0, bi.cert.eps_a),
        c0_over_e_bar: ratio(bi.cert.c0, loose.e_bar),
        c_pe: None,
        r_star: None,
    })
}

/// Inputs for the generator at defaults-like settings.
pub fn generator_bound_inputs<T: Real>(
    p: &GeneratorParams<T>,
    r: &OperatingRegion<T>,
    l_pred: usize,
    n_grid: usize,
) -> Result<BoundInputs<T>> {
    let eq = Equilibrium::new(p, r.delta_s)?;
    let (diam_z, diam_u) = diameters(r, p, &eq, n_grid)?;
    Ok(BoundInputs {
        emb: koopman::build_embedding(p),
        cert: koopman::error_constants(p, r),
        diam_z,
        diam_u,
        l_pred,
    })
}
