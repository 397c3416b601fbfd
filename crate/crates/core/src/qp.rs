//! Dense convex QP solver: `min 1/2 x'Px + q'x  s.t.  l <= Ax <= u`.
//!
//! Operator splitting (ADMM) with Ruiz equilibration, per-row step sizes (stiffer on equality
//! rows), adaptive step size, infeasibility detection and a final active-set polish.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::error::{Error, Result};

/// Named row range of the constraint matrix, used for diagnostics.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConstraintBlock {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
    pub blocks: Vec<ConstraintBlock>,
}

impl QpProblem {
    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn m(&self) -> usize {
        self.l.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        if self.p.shape() != (n, n) || self.a.shape() != (m, n) || self.u.len() != m {
            return Err(Error::Dimension(format!(
                "P {:?}, q {n}, A {:?}, l {m}, u {}",
                self.p.shape(),
                self.a.shape(),
                self.u.len()
            )));
        }
        if self.p.iter().chain(self.q.iter()).chain(self.a.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("QP data"));
        }
        if self.l.iter().zip(self.u.iter()).any(|(l, u)| l.is_nan() || u.is_nan() || l > u) {
            return Err(Error::Infeasible("a lower bound exceeds its upper bound".into()));
        }
        let asym = (&self.p - self.p.transpose()).amax();
        if asym > 1e-9 * self.p.amax().max(1.0) {
            return Err(Error::InvalidParameter {
                name: "P",
                reason: format!("not symmetric (max asymmetry {asym:e})"),
            });
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    fn block_of(&self, row: usize) -> Option<&str> {
        self.blocks
            .iter()
            .find(|b| row >= b.start && row < b.start + b.len)
            .map(|b| b.name.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_pinf: f64,
    pub max_iter: usize,
    pub scaling_iters: usize,
    pub check_interval: usize,
    pub adaptive_rho_interval: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_abs: 1e-7,
            eps_rel: 1e-7,
            eps_pinf: 1e-6,
            max_iter: 20_000,
            scaling_iters: 15,
            check_interval: 5,
            adaptive_rho_interval: 50,
            polish: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    PrimalInfeasible,
    MaxIterations,
}

/// Certificate `dy` with `A'dy = 0` and `u'dy+ + l'dy- < 0`, plus the share of each constraint
/// block in it.
#[derive(Clone, Debug, Serialize)]
pub struct InfeasibilityCertificate {
    pub delta_y: Vec<f64>,
    pub blocks: Vec<(String, f64)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct KktResiduals {
    /// `|Px + q + A'y|_inf`.
    pub stationarity: f64,
    /// Distance of `Ax` from `[l, u]` (inf-norm).
    pub primal: f64,
    /// Wrong-sign multipliers on rows whose corresponding bound is infinite.
    pub dual: f64,
    /// `max_i |y_i+ (u_i - a_i x)| + |y_i- (a_i x - l_i)|`.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

pub fn kkt_residuals(prob: &QpProblem, x: &DVector<f64>, y: &DVector<f64>) -> KktResiduals {
    let ax = &prob.a * x;
    let stat = (&prob.p * x + &prob.q + prob.a.tr_mul(y)).amax();
    let mut primal: f64 = 0.0;
    let mut dual: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..prob.m() {
        let (l, u, v, yi) = (prob.l[i], prob.u[i], ax[i], y[i]);
        primal = primal.max(l - v).max(v - u);
        if yi > 0.0 {
            if u.is_finite() {
                comp = comp.max(yi * (u - v).abs());
            } else {
                dual = dual.max(yi);
            }
        } else if yi < 0.0 {
            if l.is_finite() {
                comp = comp.max(-yi * (v - l).abs());
            } else {
                dual = dual.max(-yi);
            }
        }
    }
    KktResiduals {
        stationarity: stat,
        primal: primal.max(0.0),
        dual,
        complementarity: comp,
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
    pub kkt: KktResiduals,
    pub polished: bool,
    pub certificate: Option<InfeasibilityCertificate>,
}

/// Equilibration `Pbar = c D P D`, `Abar = E A D`.
struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn ruiz(prob: &QpProblem, iters: usize) -> Scaling {
    let (n, m) = (prob.n(), prob.m());
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut p = prob.p.clone();
    let mut a = prob.a.clone();
    let clip = |v: f64| if v < 1e-4 { 1.0 } else { v.min(1e4) };
    for _ in 0..iters {
        let mut dd = DVector::zeros(n);
        let mut row_max = DVector::<f64>::zeros(m);
        for j in 0..n {
            let cp = p.column(j).amax();
            let mut ca: f64 = 0.0;
            for (i, v) in a.column(j).iter().enumerate() {
                let v = v.abs();
                ca = ca.max(v);
                row_max[i] = row_max[i].max(v);
            }
            dd[j] = 1.0 / clip(cp.max(ca)).sqrt();
        }
        let de = row_max.map(|v| 1.0 / clip(v).sqrt());
        for j in 0..n {
            let mut pc = p.column_mut(j);
            pc.component_mul_assign(&dd);
            pc *= dd[j];
            let mut ac = a.column_mut(j);
            ac.component_mul_assign(&de);
            ac *= dd[j];
        }
        d.component_mul_assign(&dd);
        e.component_mul_assign(&de);
    }
    let mean_col = if n > 0 {
        (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64
    } else {
        0.0
    };
    let qn = prob.q.component_mul(&d).amax();
    let c = 1.0 / clip(mean_col.max(qn));
    Scaling { d, e, c }
}

/// Scaled problem data.
struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    at: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
}

fn scale(prob: &QpProblem, s: &Scaling) -> Scaled {
    let mut p = prob.p.clone();
    let mut a = prob.a.clone();
    for j in 0..prob.n() {
        let mut pc = p.column_mut(j);
        pc.component_mul_assign(&s.d);
        pc *= s.c * s.d[j];
        let mut ac = a.column_mut(j);
        ac.component_mul_assign(&s.e);
        ac *= s.d[j];
    }
    let q = prob.q.component_mul(&s.d) * s.c;
    let l = prob.l.component_mul(&s.e);
    let u = prob.u.component_mul(&s.e);
    let at = a.transpose();
    Scaled { p, q, a, at, l, u }
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;
const INF: f64 = 1e20;

fn rho_vector(prob: &QpProblem, rho: f64) -> DVector<f64> {
    DVector::from_fn(prob.m(), |i, _| {
        let (l, u) = (prob.l[i], prob.u[i]);
        if l <= -INF && u >= INF {
            RHO_MIN
        } else if (u - l).abs() < 1e-12 {
            (RHO_EQ_FACTOR * rho).min(RHO_MAX)
        } else {
            rho
        }
    })
}

fn factor(sc: &Scaled, rho: &DVector<f64>, sigma: f64) -> Result<Cholesky<f64, Dyn>> {
    let n = sc.q.len();
    let mut ra = sc.a.clone();
    for (i, mut row) in ra.row_iter_mut().enumerate() {
        row *= rho[i];
    }
    // An explicit transpose hits the fast GEMM path; `tr_mul` does not.
    let k = &sc.p + DMatrix::identity(n, n) * sigma + &sc.at * ra;
    Cholesky::new(k).ok_or_else(|| Error::InvalidParameter {
        name: "P",
        reason: "KKT matrix not positive definite (is P positive semidefinite?)".into(),
    })
}

fn project(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].clamp(l[i], u[i]))
}

/// Solves the QP from an optional warm start `(x, y)` in original coordinates.
pub fn solve(prob: &QpProblem, settings: &QpSettings, warm: Option<(&DVector<f64>, &DVector<f64>)>) -> Result<QpSolution> {
    prob.validate()?;
    let (n, m) = (prob.n(), prob.m());
    let s = ruiz(prob, settings.scaling_iters);
    let sc = scale(prob, &s);
    let mut rho = settings.rho;
    let mut rho_vec = rho_vector(prob, rho);
    let mut chol = factor(&sc, &rho_vec, settings.sigma)?;

    // Scaled iterates: x = D xs, y = E ys / c, z = zs / E.
    let (mut x, mut y) = match warm {
        Some((x0, y0)) if x0.len() == n && y0.len() == m => (
            x0.component_div(&s.d),
            y0.component_div(&s.e) * s.c,
        ),
        _ => (DVector::zeros(n), DVector::zeros(m)),
    };
    let mut z = project(&(&sc.a * &x), &sc.l, &sc.u);
    let mut status = QpStatus::MaxIterations;
    let mut certificate = None;
    let mut iterations = 0;
    let unscale_x = |x: &DVector<f64>| x.component_mul(&s.d);
    let unscale_y = |y: &DVector<f64>| y.component_mul(&s.e) / s.c;

    for k in 1..=settings.max_iter {
        iterations = k;
        let y_prev = y.clone();
        let rhs = &x * settings.sigma - &sc.q + &sc.at * (rho_vec.component_mul(&z) - &y);
        let xt = chol.solve(&rhs);
        let zt = &sc.a * &xt;
        x = &xt * settings.alpha + &x * (1.0 - settings.alpha);
        let zr = &zt * settings.alpha + &z * (1.0 - settings.alpha);
        let z_new = project(&(&zr + y.component_div(&rho_vec)), &sc.l, &sc.u);
        y += rho_vec.component_mul(&(&zr - &z_new));
        z = z_new;

        if k % settings.check_interval != 0 && k != settings.max_iter {
            continue;
        }
        // Convergence in original coordinates.
        let xo = unscale_x(&x);
        let yo = unscale_y(&y);
        let zo = z.component_div(&s.e);
        let ax = &prob.a * &xo;
        let px = &prob.p * &xo;
        let aty = prob.a.tr_mul(&yo);
        let r_prim = (&ax - &zo).amax();
        let r_dual = (&px + &prob.q + &aty).amax();
        let eps_prim = settings.eps_abs + settings.eps_rel * ax.amax().max(zo.amax());
        let eps_dual = settings.eps_abs + settings.eps_rel * px.amax().max(aty.amax()).max(prob.q.amax());
        if r_prim <= eps_prim && r_dual <= eps_dual {
            status = QpStatus::Solved;
            break;
        }
        let dy = unscale_y(&(&y - &y_prev));
        if let Some(cert) = primal_infeasibility(prob, &dy, settings.eps_pinf) {
            status = QpStatus::PrimalInfeasible;
            certificate = Some(cert);
            break;
        }
        if settings.adaptive_rho_interval > 0 && k % settings.adaptive_rho_interval == 0 {
            let sax = &sc.a * &x;
            let sp = (&sax - &z).amax() / sax.amax().max(z.amax()).max(1e-30);
            let spx = &sc.p * &x;
            let saty = &sc.at * &y;
            let sd = (&spx + &sc.q + &saty).amax() / spx.amax().max(saty.amax()).max(sc.q.amax()).max(1e-30);
            let new_rho = (rho * (sp / sd.max(1e-30)).sqrt()).clamp(RHO_MIN, RHO_MAX);
            if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                rho = new_rho;
                rho_vec = rho_vector(prob, rho);
                chol = factor(&sc, &rho_vec, settings.sigma)?;
            }
        }
    }

    let mut xo = unscale_x(&x);
    let mut yo = unscale_y(&y);
    let mut polished = false;
    if settings.polish && status == QpStatus::Solved {
        if let Some((xp, yp)) = polish(prob, &sc, &z, &y) {
            let before = kkt_residuals(prob, &xo, &yo).max();
            let after = kkt_residuals(prob, &xp, &yp).max();
            if after <= before.max(1e-9) {
                xo = xp;
                yo = yp;
                polished = true;
            }
        }
    }
    let kkt = kkt_residuals(prob, &xo, &yo);
    Ok(QpSolution {
        objective: prob.objective(&xo),
        x: xo,
        y: yo,
        status,
        iterations,
        kkt,
        polished,
        certificate,
    })
}

fn primal_infeasibility(prob: &QpProblem, dy: &DVector<f64>, eps: f64) -> Option<InfeasibilityCertificate> {
    let norm = dy.amax();
    if norm < 1e-12 {
        return None;
    }
    if prob.a.tr_mul(dy).amax() > eps * norm {
        return None;
    }
    let mut support = 0.0;
    for i in 0..prob.m() {
        let v = dy[i];
        if v > 0.0 {
            if prob.u[i] >= INF {
                if v > eps * norm {
                    return None;
                }
                continue;
            }
            support += prob.u[i] * v;
        } else if v < 0.0 {
            if prob.l[i] <= -INF {
                if -v > eps * norm {
                    return None;
                }
                continue;
            }
            support += prob.l[i] * v;
        }
    }
    if support >= -eps * norm {
        return None;
    }
    let mut shares: Vec<(String, f64)> = prob
        .blocks
        .iter()
        .map(|b| (b.name.clone(), dy.rows(b.start, b.len).amax() / norm))
        .collect();
    if shares.is_empty() {
        shares.push(("constraints".into(), 1.0));
    }
    Some(InfeasibilityCertificate {
        delta_y: dy.iter().copied().collect(),
        blocks: shares,
    })
}

/// Solves the equality-constrained problem on the guessed active set, with iterative refinement.
fn polish(
    prob: &QpProblem,
    sc: &Scaled,
    z: &DVector<f64>,
    y: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = prob.n();
    let mut active = Vec::new();
    for i in 0..prob.m() {
        let eq = (prob.u[i] - prob.l[i]).abs() < 1e-12;
        let lower = z[i] - sc.l[i] < -y[i];
        let upper = sc.u[i] - z[i] < y[i];
        if eq || lower {
            active.push((i, prob.l[i]));
        } else if upper {
            active.push((i, prob.u[i]));
        }
    }
    let na = active.len();
    let delta = 1e-9;
    // Work in original coordinates so the KKT residual check is on the true problem.
    let dim = n + na;
    let mut k = DMatrix::zeros(dim, dim);
    k.view_mut((0, 0), (n, n)).copy_from(&prob.p);
    for (r, &(i, _)) in active.iter().enumerate() {
        for j in 0..n {
            k[(n + r, j)] = prob.a[(i, j)];
            k[(j, n + r)] = prob.a[(i, j)];
        }
    }
    let mut kreg = k.clone();
    for j in 0..n {
        kreg[(j, j)] += delta;
    }
    for r in 0..na {
        kreg[(n + r, n + r)] -= delta;
    }
    let lu = kreg.lu();
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&prob.q));
    for (r, &(_, b)) in active.iter().enumerate() {
        rhs[n + r] = b;
    }
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..5 {
        let res = &rhs - &k * &sol;
        sol += lu.solve(&res)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let xp = sol.rows(0, n).into_owned();
    let mut yp = DVector::zeros(prob.m());
    for (r, &(i, _)) in active.iter().enumerate() {
        yp[i] = sol[n + r];
    }
    Some((xp, yp))
}

impl QpSolution {
    /// Rows of the named blocks with the largest certificate weight, for error messages.
    pub fn infeasibility_summary(&self, prob: &QpProblem) -> String {
        match &self.certificate {
            None => "no certificate".into(),
            Some(c) => {
                let mut worst: Vec<_> = c.delta_y.iter().enumerate().map(|(i, v)| (i, v.abs())).collect();
                worst.sort_by(|a, b| b.1.total_cmp(&a.1));
                let rows: Vec<String> = worst
                    .iter()
                    .take(3)
                    .map(|(i, _)| format!("{} row {i}", prob.block_of(*i).unwrap_or("?")))
                    .collect();
                let blocks: Vec<String> = c
                    .blocks
                    .iter()
                    .filter(|(_, w)| *w > 1e-6)
                    .map(|(n, w)| format!("{n} ({w:.2})"))
                    .collect();
                format!("blocks {}; strongest rows {}", blocks.join(", "), rows.join(", "))
            }
        }
    }
}
