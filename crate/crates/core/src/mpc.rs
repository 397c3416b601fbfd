//! Robust data-driven MPC on Hankel matrices of measured input/output data, solved as a QP,
//! and the `n_z`-step receding-horizon loop.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{self, Trajectory, TrajectoryLibrary};
use crate::error::{Error, Result};
use crate::plant::{self, GeneratorParams, OperatingRegion, State};
use crate::qp::{self, ConstraintBlock, QpProblem, QpSettings, QpStatus};

/// Treatment of `|sigma|_inf <= eps_bar (1 + |alpha|_1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SlackMode {
    /// Freeze the l1 bound, solve, update it to the achieved `|alpha|_1`, repeat.
    Sequential { max_iter: usize, tol: f64 },
    /// Fixed bound `eps_bar (1 + alpha_bar)`.
    Fixed { alpha_bar: f64 },
}

impl Default for SlackMode {
    fn default() -> Self {
        SlackMode::Sequential {
            max_iter: 10,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MpcConfig {
    pub l_pred: usize,
    pub n_z: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub lambda_alpha: f64,
    pub lambda_sigma: f64,
    pub eps_bar: f64,
    pub u_s: DVector<f64>,
    pub y_s: DVector<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub slack: SlackMode,
    pub qp: QpSettings,
}

impl MpcConfig {
    /// Defaults for a plant with one input and two outputs around `(u_s, y_s)`.
    pub fn new(u_s: DVector<f64>, y_s: DVector<f64>, u_min: DVector<f64>, u_max: DVector<f64>, eps_bar: f64) -> Self {
        let (m, p) = (u_s.len(), y_s.len());
        let q = if p == 2 {
            DMatrix::from_diagonal(&nalgebra::dvector![10.0, 1.0])
        } else {
            DMatrix::identity(p, p)
        };
        Self {
            l_pred: 14,
            n_z: 7,
            q,
            r: DMatrix::identity(m, m) * 0.1,
            lambda_alpha: 1e-4,
            lambda_sigma: 1e3,
            eps_bar,
            u_s,
            y_s,
            u_min,
            u_max,
            slack: SlackMode::default(),
            qp: QpSettings::default(),
        }
    }

    pub fn m(&self) -> usize {
        self.u_s.len()
    }

    pub fn p(&self) -> usize {
        self.y_s.len()
    }

    /// Hankel depth `L + n_z`.
    pub fn depth(&self) -> usize {
        self.l_pred + self.n_z
    }

    pub fn validate(&self) -> Result<()> {
        let (m, p) = (self.m(), self.p());
        if self.n_z == 0 || self.l_pred < 2 * self.n_z {
            return Err(Error::InvalidParameter {
                name: "l_pred",
                reason: format!("need L >= 2 n_z (L = {}, n_z = {})", self.l_pred, self.n_z),
            });
        }
        if !(self.lambda_alpha > 0.0 && self.lambda_sigma > 0.0) {
            return Err(Error::InvalidParameter {
                name: "lambda",
                reason: "regularizers must be positive".into(),
            });
        }
        if !(self.eps_bar >= 0.0 && self.eps_bar.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "eps_bar",
                reason: "must be finite and nonnegative".into(),
            });
        }
        if self.q.shape() != (p, p) || self.r.shape() != (m, m) {
            return Err(Error::Dimension(format!(
                "Q {:?} / R {:?} for p = {p}, m = {m}",
                self.q.shape(),
                self.r.shape()
            )));
        }
        for (name, w) in [("Q", &self.q), ("R", &self.r)] {
            let sym = (w - w.transpose()).amax() <= 1e-12 * w.amax().max(1.0);
            let min_eig = w.clone().symmetric_eigenvalues().min();
            if !sym || !(min_eig > 0.0) {
                return Err(Error::InvalidParameter {
                    name,
                    reason: "must be symmetric positive definite".into(),
                });
            }
        }
        if self.u_min.len() != m || self.u_max.len() != m {
            return Err(Error::Dimension("input box size".into()));
        }
        for i in 0..m {
            if !(self.u_min[i] < self.u_s[i] && self.u_s[i] < self.u_max[i]) {
                return Err(Error::TerminalUnreachable(format!(
                    "u_s[{i}] = {} is not strictly inside [{}, {}]",
                    self.u_s[i], self.u_min[i], self.u_max[i]
                )));
            }
        }
        if let SlackMode::Fixed { alpha_bar } = self.slack {
            if !(alpha_bar >= 0.0) {
                return Err(Error::InvalidParameter {
                    name: "alpha_bar",
                    reason: "must be nonnegative".into(),
                });
            }
        }
        Ok(())
    }
}

/// Input and output Hankel matrices at depth `L + n_z`, built from data minus a constant
/// offset. Predictions are `offset + H alpha`; zero offsets give the plain formulation.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcData {
    pub hu: DMatrix<f64>,
    pub hy: DMatrix<f64>,
    pub offset_u: DVector<f64>,
    pub offset_y: DVector<f64>,
}

impl MpcData {
    pub fn from_trajectory(t: &Trajectory, depth: usize) -> Result<Self> {
        Self::centered(t, depth, &DVector::zeros(t.m()), &DVector::zeros(t.p()))
    }

    /// Hankel matrices of `u - offset_u`, `y - offset_y`.
    pub fn centered(t: &Trajectory, depth: usize, offset_u: &DVector<f64>, offset_y: &DVector<f64>) -> Result<Self> {
        if offset_u.len() != t.m() || offset_y.len() != t.p() {
            return Err(Error::Dimension("offset size".into()));
        }
        let u = DMatrix::from_fn(t.m(), t.len(), |i, k| t.u[(i, k)] - offset_u[i]);
        let y = DMatrix::from_fn(t.p(), t.len(), |i, k| t.y[(i, k)] - offset_y[i]);
        Ok(Self {
            hu: data::hankel(&u, depth)?.matrix,
            hy: data::hankel(&y, depth)?.matrix,
            offset_u: offset_u.clone(),
            offset_y: offset_y.clone(),
        })
    }

    /// Side-by-side Hankel blocks of every trajectory in the library.
    pub fn from_library(
        lib: &TrajectoryLibrary,
        depth: usize,
        offset_u: &DVector<f64>,
        offset_y: &DVector<f64>,
    ) -> Result<Self> {
        let parts = lib
            .trajectories
            .iter()
            .map(|t| Self::centered(t, depth, offset_u, offset_y))
            .collect::<Result<Vec<_>>>()?;
        let cols: usize = parts.iter().map(|d| d.cols()).sum();
        let mut hu = DMatrix::zeros(parts[0].hu.nrows(), cols);
        let mut hy = DMatrix::zeros(parts[0].hy.nrows(), cols);
        let mut c = 0;
        for d in &parts {
            hu.view_mut((0, c), d.hu.shape()).copy_from(&d.hu);
            hy.view_mut((0, c), d.hy.shape()).copy_from(&d.hy);
            c += d.cols();
        }
        Ok(Self {
            hu,
            hy,
            offset_u: offset_u.clone(),
            offset_y: offset_y.clone(),
        })
    }

    pub fn cols(&self) -> usize {
        self.hu.ncols()
    }
}

/// Variable layout `[alpha, sigma, u_hat, y_hat]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n_alpha: usize,
    pub m: usize,
    pub p: usize,
    pub depth: usize,
}

impl Layout {
    pub fn sigma(&self) -> usize {
        self.n_alpha
    }

    pub fn u_hat(&self) -> usize {
        self.n_alpha + self.p * self.depth
    }

    pub fn y_hat(&self) -> usize {
        self.u_hat() + self.m * self.depth
    }

    pub fn n(&self) -> usize {
        self.y_hat() + self.p * self.depth
    }
}

/// Assembled QP with its layout and the constant term dropped from the objective.
#[derive(Clone, Debug)]
pub struct MpcQp {
    pub problem: QpProblem,
    pub layout: Layout,
    pub cost_offset: f64,
}

/// Builds the QP for past window `(u_past, y_past)` (one column per step, `n_z` columns).
/// `alpha_l1_bound = None` leaves the slack unbounded.
pub fn assemble_qp(
    cfg: &MpcConfig,
    data: &MpcData,
    u_past: &DMatrix<f64>,
    y_past: &DMatrix<f64>,
    alpha_l1_bound: Option<f64>,
) -> Result<MpcQp> {
    let (m, p, nz, l) = (cfg.m(), cfg.p(), cfg.n_z, cfg.l_pred);
    let depth = cfg.depth();
    if nz > l {
        return Err(Error::InvalidParameter {
            name: "n_z",
            reason: "terminal window exceeds the horizon".into(),
        });
    }
    if data.hu.nrows() != m * depth || data.hy.nrows() != p * depth || data.hy.ncols() != data.hu.ncols() {
        return Err(Error::Dimension(format!(
            "Hankel blocks {:?}/{:?} do not match depth {depth}",
            data.hu.shape(),
            data.hy.shape()
        )));
    }
    if u_past.shape() != (m, nz) || y_past.shape() != (p, nz) {
        return Err(Error::Dimension(format!(
            "past window {:?}/{:?}, expected {m}x{nz}/{p}x{nz}",
            u_past.shape(),
            y_past.shape()
        )));
    }
    let lay = Layout {
        n_alpha: data.cols(),
        m,
        p,
        depth,
    };
    let n = lay.n();

    let mut pm = DMatrix::zeros(n, n);
    let mut q = DVector::zeros(n);
    for j in 0..lay.n_alpha {
        pm[(j, j)] = 2.0 * cfg.lambda_alpha;
    }
    for j in 0..p * depth {
        pm[(lay.sigma() + j, lay.sigma() + j)] = 2.0 * cfg.lambda_sigma;
    }
    let mut cost_offset = 0.0;
    for k in nz..nz + l {
        let iu = lay.u_hat() + k * m;
        let iy = lay.y_hat() + k * p;
        pm.view_mut((iu, iu), (m, m)).copy_from(&(&cfg.r * 2.0));
        pm.view_mut((iy, iy), (p, p)).copy_from(&(&cfg.q * 2.0));
        q.rows_mut(iu, m).copy_from(&(-(&cfg.r * &cfg.u_s) * 2.0));
        q.rows_mut(iy, p).copy_from(&(-(&cfg.q * &cfg.y_s) * 2.0));
        cost_offset += cfg.u_s.dot(&(&cfg.r * &cfg.u_s)) + cfg.y_s.dot(&(&cfg.q * &cfg.y_s));
    }

    let rows_dyn = (m + p) * depth;
    let rows_ini = (m + p) * nz;
    let rows_term = (m + p) * nz;
    let rows_box = m * l;
    let rows_sig = p * depth;
    let total = rows_dyn + rows_ini + rows_term + rows_box + rows_sig;
    let mut a = DMatrix::zeros(total, n);
    let mut lo = DVector::zeros(total);
    let mut hi = DVector::zeros(total);
    let mut blocks = Vec::new();
    let mut row = 0;
    let mut open = |name: &str, len: usize, row: usize| {
        blocks.push(ConstraintBlock {
            name: name.into(),
            start: row,
            len,
        })
    };

    if data.offset_u.len() != m || data.offset_y.len() != p {
        return Err(Error::Dimension("data offsets".into()));
    }
    // u_hat - H_u alpha = offset
    open("dynamics_u", m * depth, row);
    for i in 0..m * depth {
        a[(row, lay.u_hat() + i)] = 1.0;
        lo[row] = data.offset_u[i % m];
        hi[row] = data.offset_u[i % m];
        for j in 0..lay.n_alpha {
            a[(row, j)] = -data.hu[(i, j)];
        }
        row += 1;
    }
    // y_hat - H_y alpha - sigma = offset
    open("dynamics_y", p * depth, row);
    for i in 0..p * depth {
        a[(row, lay.y_hat() + i)] = 1.0;
        a[(row, lay.sigma() + i)] = -1.0;
        lo[row] = data.offset_y[i % p];
        hi[row] = data.offset_y[i % p];
        for j in 0..lay.n_alpha {
            a[(row, j)] = -data.hy[(i, j)];
        }
        row += 1;
    }
    open("initial_u", m * nz, row);
    for k in 0..nz {
        for i in 0..m {
            a[(row, lay.u_hat() + k * m + i)] = 1.0;
            lo[row] = u_past[(i, k)];
            hi[row] = u_past[(i, k)];
            row += 1;
        }
    }
    open("initial_y", p * nz, row);
    for k in 0..nz {
        for i in 0..p {
            a[(row, lay.y_hat() + k * p + i)] = 1.0;
            lo[row] = y_past[(i, k)];
            hi[row] = y_past[(i, k)];
            row += 1;
        }
    }
    // Last n_z predicted steps, i.e. positions L .. L + n_z of the window.
    open("terminal_u", m * nz, row);
    for k in l..l + nz {
        for i in 0..m {
            a[(row, lay.u_hat() + k * m + i)] = 1.0;
            lo[row] = cfg.u_s[i];
            hi[row] = cfg.u_s[i];
            row += 1;
        }
    }
    open("terminal_y", p * nz, row);
    for k in l..l + nz {
        for i in 0..p {
            a[(row, lay.y_hat() + k * p + i)] = 1.0;
            lo[row] = cfg.y_s[i];
            hi[row] = cfg.y_s[i];
            row += 1;
        }
    }
    open("input_box", m * l, row);
    for k in nz..nz + l {
        for i in 0..m {
            a[(row, lay.u_hat() + k * m + i)] = 1.0;
            lo[row] = cfg.u_min[i];
            hi[row] = cfg.u_max[i];
            row += 1;
        }
    }
    open("slack_box", p * depth, row);
    let bound = alpha_l1_bound.map_or(f64::INFINITY, |b| cfg.eps_bar * (1.0 + b));
    for i in 0..p * depth {
        a[(row, lay.sigma() + i)] = 1.0;
        lo[row] = -bound;
        hi[row] = bound;
        row += 1;
    }
    debug_assert_eq!(row, total);

    Ok(MpcQp {
        problem: QpProblem {
            p: pm,
            q,
            a,
            l: lo,
            u: hi,
            blocks,
        },
        layout: lay,
        cost_offset,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MpcStatus {
    Solved,
    /// The slack iteration hit its cap; the last iterate is returned.
    SlackNotConverged,
    /// The QP solver stopped at its iteration cap.
    Inaccurate,
}

#[derive(Clone, Debug)]
pub struct MpcSolution {
    pub alpha: DVector<f64>,
    pub sigma: DVector<f64>,
    pub u_hat: DMatrix<f64>,
    pub y_hat: DMatrix<f64>,
    /// Cost including the constant setpoint terms.
    pub objective: f64,
    pub status: MpcStatus,
    pub slack_iterations: usize,
    pub alpha_l1: f64,
    pub sigma_inf: f64,
    /// A-posteriori check `|sigma|_inf <= eps_bar (1 + |alpha|_1) + tol`.
    pub slack_bound_ok: bool,
    pub qp_iterations: usize,
    pub kkt_max: f64,
    x: DVector<f64>,
    y: DVector<f64>,
}

impl MpcSolution {
    /// Optimal inputs for predicted steps `0 .. count` (columns).
    pub fn first_inputs(&self, n_z: usize, count: usize) -> DMatrix<f64> {
        self.u_hat.columns(n_z, count).into_owned()
    }
}

/// Warm start in QP coordinates.
#[derive(Clone, Debug)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

const SLACK_CHECK_TOL: f64 = 1e-6;

fn qp_solve(mq: &MpcQp, settings: &QpSettings, warm: Option<&WarmStart>) -> Result<qp::QpSolution> {
    let sol = qp::solve(&mq.problem, settings, warm.map(|w| (&w.x, &w.y)))?;
    if sol.status == QpStatus::PrimalInfeasible {
        return Err(Error::Infeasible(sol.infeasibility_summary(&mq.problem)));
    }
    Ok(sol)
}

fn unpack(cfg: &MpcConfig, mq: &MpcQp, sol: &qp::QpSolution) -> MpcSolution {
    let lay = mq.layout;
    let x = &sol.x;
    let alpha = x.rows(0, lay.n_alpha).into_owned();
    let sigma = x.rows(lay.sigma(), lay.p * lay.depth).into_owned();
    let u_hat = DMatrix::from_column_slice(lay.m, lay.depth, x.rows(lay.u_hat(), lay.m * lay.depth).as_slice());
    let y_hat = DMatrix::from_column_slice(lay.p, lay.depth, x.rows(lay.y_hat(), lay.p * lay.depth).as_slice());
    let alpha_l1 = alpha.lp_norm(1);
    let sigma_inf = sigma.amax();
    let status = if sol.status == QpStatus::Solved {
        MpcStatus::Solved
    } else {
        MpcStatus::Inaccurate
    };
    MpcSolution {
        objective: sol.objective + mq.cost_offset,
        slack_bound_ok: sigma_inf <= cfg.eps_bar * (1.0 + alpha_l1) + SLACK_CHECK_TOL,
        alpha,
        sigma,
        u_hat,
        y_hat,
        status,
        slack_iterations: 0,
        alpha_l1,
        sigma_inf,
        qp_iterations: sol.iterations,
        kkt_max: sol.kkt.max(),
        x: sol.x.clone(),
        y: sol.y.clone(),
    }
}

/// One robust MPC solve. In sequential mode the first solve leaves the slack free; if its own
/// `|alpha|_1` already certifies the slack bound it is returned, otherwise the l1 bound is frozen
/// and updated until it settles.
pub fn solve_robust_mpc(
    cfg: &MpcConfig,
    data: &MpcData,
    u_past: &DMatrix<f64>,
    y_past: &DMatrix<f64>,
    warm: Option<&WarmStart>,
) -> Result<MpcSolution> {
    cfg.validate()?;
    match cfg.slack {
        SlackMode::Fixed { alpha_bar } => {
            let mq = assemble_qp(cfg, data, u_past, y_past, Some(alpha_bar))?;
            let sol = qp_solve(&mq, &cfg.qp, warm)?;
            let mut out = unpack(cfg, &mq, &sol);
            out.slack_iterations = 1;
            Ok(out)
        }
        SlackMode::Sequential { max_iter, tol } => {
            if cfg.eps_bar == 0.0 {
                let mq = assemble_qp(cfg, data, u_past, y_past, Some(0.0))?;
                let sol = qp_solve(&mq, &cfg.qp, warm)?;
                let mut out = unpack(cfg, &mq, &sol);
                out.slack_iterations = 1;
                return Ok(out);
            }
            let mq = assemble_qp(cfg, data, u_past, y_past, None)?;
            let sol = qp_solve(&mq, &cfg.qp, warm)?;
            let mut out = unpack(cfg, &mq, &sol);
            out.slack_iterations = 1;
            if out.slack_bound_ok {
                return Ok(out);
            }
            let mut bound = out.alpha_l1;
            for it in 2..=max_iter.max(2) {
                let mq = assemble_qp(cfg, data, u_past, y_past, Some(bound))?;
                let ws = WarmStart {
                    x: out.x.clone(),
                    y: out.y.clone(),
                };
                let sol = qp_solve(&mq, &cfg.qp, Some(&ws))?;
                out = unpack(cfg, &mq, &sol);
                out.slack_iterations = it;
                let change = (out.alpha_l1 - bound).abs();
                bound = out.alpha_l1;
                if change <= tol * bound.max(1.0) {
                    return Ok(out);
                }
            }
            log::warn!("slack iteration did not settle after {max_iter} solves");
            out.status = MpcStatus::SlackNotConverged;
            Ok(out)
        }
    }
}

/// Previous solution shifted by `shift` steps, with the tail held at the setpoint.
pub fn shifted_warm_start(cfg: &MpcConfig, data: &MpcData, prev: &MpcSolution, shift: usize) -> WarmStart {
    let (m, p, depth) = (cfg.m(), cfg.p(), cfg.depth());
    let lay = Layout {
        n_alpha: data.cols(),
        m,
        p,
        depth,
    };
    let mut x = DVector::zeros(lay.n());
    for j in shift..lay.n_alpha {
        x[j] = prev.alpha[j - shift];
    }
    for k in 0..depth {
        let (u, y) = if k + shift < depth {
            (prev.u_hat.column(k + shift).into_owned(), prev.y_hat.column(k + shift).into_owned())
        } else {
            (cfg.u_s.clone(), cfg.y_s.clone())
        };
        x.rows_mut(lay.u_hat() + k * m, m).copy_from(&u);
        x.rows_mut(lay.y_hat() + k * p, p).copy_from(&y);
    }
    let rows = prev.y.len();
    WarmStart {
        x,
        y: DVector::zeros(rows),
    }
}

/// One closed-loop sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub t: usize,
    pub delta: f64,
    pub omega: f64,
    #[serde(rename = "Eq_prime")]
    pub eq_prime: f64,
    pub u: f64,
    pub omega_tilde: f64,
    #[serde(rename = "P_e")]
    pub p_e: f64,
    /// Objective of the solve that produced `u` (NaN during warm-up).
    pub cost: f64,
    pub dist: f64,
    pub status: &'static str,
    pub sigma_inf: f64,
    pub alpha_l1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosedLoopLog {
    pub rows: Vec<LogRow>,
    /// Final state (after the last applied input).
    pub final_state: [f64; 3],
    pub final_dist: f64,
    /// Number of steps of the initial warm-up.
    pub warmup: usize,
    pub mpc_iterations: usize,
    /// Objective per MPC iteration.
    pub costs: Vec<f64>,
    /// Set when the plant left the operating region; bounds are no longer certified afterwards.
    pub left_region_at: Option<usize>,
    /// Solver failure that stopped the run.
    pub failure: Option<String>,
    pub slack_bound_violations: usize,
    pub max_kkt: f64,
}

impl ClosedLoopLog {
    /// `|x_k - x_s|` for every logged state, including the final one.
    pub fn distances(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self.rows.iter().map(|r| r.dist).collect();
        d.push(self.final_dist);
        d
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "t,delta,omega,Eq_prime,u,omega_tilde,P_e,cost,dist,status,sigma_inf,alpha_l1"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.t, r.delta, r.omega, r.eq_prime, r.u, r.omega_tilde, r.p_e, r.cost, r.dist, r.status,
                r.sigma_inf, r.alpha_l1
            )?;
        }
        Ok(())
    }
}

/// Runs `iterations` MPC solves on the generator, applying `n_z` inputs after each.
///
/// The first past window comes from `n_z` warm-up steps with `u_s` held constant.
pub fn receding_horizon_run(
    p: &GeneratorParams<f64>,
    region: &OperatingRegion<f64>,
    cfg: &MpcConfig,
    data: &MpcData,
    x0: &State<f64>,
    iterations: usize,
) -> Result<ClosedLoopLog> {
    cfg.validate()?;
    if cfg.m() != 1 || cfg.p() != 2 {
        return Err(Error::Dimension("generator loop needs m = 1, p = 2".into()));
    }
    if !region.contains_state(x0, p) {
        return Err(Error::InvalidParameter {
            name: "x0",
            reason: "initial state outside the operating region".into(),
        });
    }
    let (xs, _) = plant::compute_equilibrium(p, region.delta_s)?;
    let nz = cfg.n_z;
    let us = cfg.u_s[0];
    let mut rows = Vec::new();
    let mut us_hist: Vec<f64> = Vec::new();
    let mut ys_hist: Vec<[f64; 2]> = Vec::new();
    let mut x = *x0;
    let mut t = 0;
    let mut left_region_at = None;

    let apply = |x: &mut State<f64>, u: f64, cost: f64, status: &'static str, sigma_inf: f64, alpha_l1: f64,
                     t: &mut usize, rows: &mut Vec<LogRow>, left: &mut Option<usize>|
     -> Result<[f64; 2]> {
        let y = plant::output(x, p);
        if left.is_none() && !region.contains(x, u, p) {
            *left = Some(*t);
        }
        rows.push(LogRow {
            t: *t,
            delta: x.delta,
            omega: x.omega,
            eq_prime: x.eq_prime,
            u,
            omega_tilde: y.omega_tilde,
            p_e: y.p_e,
            cost,
            dist: x.distance(&xs),
            status,
            sigma_inf,
            alpha_l1,
        });
        *x = plant::step(x, u, p).map_err(|_| Error::Diverged { step: *t })?;
        if !x.is_finite() {
            return Err(Error::Diverged { step: *t + 1 });
        }
        *t += 1;
        Ok(y.to_array())
    };

    for _ in 0..nz {
        let y = apply(&mut x, us, f64::NAN, "warmup", 0.0, 0.0, &mut t, &mut rows, &mut left_region_at)?;
        us_hist.push(us);
        ys_hist.push(y);
    }

    let mut costs = Vec::new();
    let mut failure = None;
    let mut warm: Option<WarmStart> = None;
    let mut slack_bound_violations = 0;
    let mut max_kkt: f64 = 0.0;
    let mut done = 0;
    for _ in 0..iterations {
        let n = us_hist.len();
        let u_past = DMatrix::from_fn(1, nz, |_, k| us_hist[n - nz + k]);
        let y_past = DMatrix::from_fn(2, nz, |i, k| ys_hist[n - nz + k][i]);
        let sol = match solve_robust_mpc(cfg, data, &u_past, &y_past, warm.as_ref()) {
            Ok(s) => s,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        };
        if !sol.slack_bound_ok {
            slack_bound_violations += 1;
        }
        max_kkt = max_kkt.max(sol.kkt_max);
        let status = match sol.status {
            MpcStatus::Solved => "solved",
            MpcStatus::SlackNotConverged => "slack_not_converged",
            MpcStatus::Inaccurate => "inaccurate",
        };
        costs.push(sol.objective);
        let inputs = sol.first_inputs(nz, nz);
        for k in 0..nz {
            // The QP enforces the box to solver tolerance; clip the residual.
            let u = inputs[(0, k)].clamp(cfg.u_min[0], cfg.u_max[0]);
            let y = apply(
                &mut x,
                u,
                sol.objective,
                status,
                sol.sigma_inf,
                sol.alpha_l1,
                &mut t,
                &mut rows,
                &mut left_region_at,
            )?;
            us_hist.push(u);
            ys_hist.push(y);
        }
        warm = Some(shifted_warm_start(cfg, data, &sol, nz));
        done += 1;
    }
    if left_region_at.is_none() && !region.contains_state(&x, p) {
        left_region_at = Some(t);
    }
    Ok(ClosedLoopLog {
        rows,
        final_state: x.to_array(),
        final_dist: x.distance(&xs),
        warmup: nz,
        mpc_iterations: done,
        costs,
        left_region_at,
        failure,
        slack_bound_violations,
        max_kkt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::koopman::{self, LinearSystem};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Nominal lifted LTI data around zero.
    fn lti_setup(eps_bar: f64) -> (LinearSystem<f64>, MpcConfig, MpcData, Trajectory) {
        let sys = koopman::build_embedding(&GeneratorParams::<f64>::default());
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let traj = data::nominal_trajectory(&sys, 150, 0.5, 0.05, &mut rng);
        let mut cfg = MpcConfig::new(
            nalgebra::dvector![0.0],
            nalgebra::dvector![0.0, 0.0],
            nalgebra::dvector![-1.0],
            nalgebra::dvector![1.0],
            eps_bar,
        );
        cfg.qp.max_iter = 50_000;
        let d = MpcData::from_trajectory(&traj, cfg.depth()).unwrap();
        (sys, cfg, d, traj)
    }

    #[test]
    fn validation() {
        let (_, mut cfg, _, _) = lti_setup(0.0);
        assert!(cfg.validate().is_ok());
        cfg.l_pred = 13;
        assert!(cfg.validate().is_err());
        cfg.l_pred = 14;
        cfg.u_min[0] = 0.5;
        assert!(matches!(cfg.validate(), Err(Error::TerminalUnreachable(_))));
        cfg.u_min[0] = -1.0;
        cfg.q[(0, 0)] = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn alpha_bound_zero_gives_eps_box() {
        let (_, cfg, d, _) = lti_setup(0.3);
        let up = DMatrix::zeros(1, 7);
        let yp = DMatrix::zeros(2, 7);
        let mq = assemble_qp(&cfg, &d, &up, &yp, Some(0.0)).unwrap();
        let b = mq.problem.blocks.iter().find(|b| b.name == "slack_box").unwrap();
        for i in b.start..b.start + b.len {
            assert_eq!(mq.problem.l[i], -0.3);
            assert_eq!(mq.problem.u[i], 0.3);
        }
        let bad = DMatrix::zeros(1, 6);
        assert!(assemble_qp(&cfg, &d, &bad, &yp, None).is_err());
    }

    #[test]
    fn setpoint_window_gives_min_norm_alpha() {
        let (_, cfg, d, _) = lti_setup(0.0);
        let up = DMatrix::zeros(1, 7);
        let yp = DMatrix::zeros(2, 7);
        let sol = solve_robust_mpc(&cfg, &d, &up, &yp, None).unwrap();
        assert_eq!(sol.slack_iterations, 1);
        assert!(sol.sigma_inf < 1e-9);
        assert!(sol.u_hat.amax() < 1e-7 && sol.y_hat.amax() < 1e-7);
        // The zero trajectory is represented by alpha = 0.
        assert!((sol.objective - cfg.lambda_alpha * sol.alpha.norm_squared()).abs() < 1e-10);
        assert!(sol.alpha.amax() < 1e-6);
    }

    #[test]
    fn centered_data_represents_offset_setpoint() {
        let (_, _, _, traj) = lti_setup(0.0);
        let (ou, oy) = (nalgebra::dvector![0.3], nalgebra::dvector![0.1, -0.2]);
        let shifted = Trajectory::new(
            traj.u.map(|v| v + ou[0]),
            DMatrix::from_fn(2, traj.len(), |i, k| traj.y[(i, k)] + oy[i]),
        )
        .unwrap();
        let cfg = MpcConfig::new(ou.clone(), oy.clone(), nalgebra::dvector![-0.7], nalgebra::dvector![1.3], 0.0);
        let d = MpcData::centered(&shifted, cfg.depth(), &ou, &oy).unwrap();
        assert!((&d.hu - MpcData::from_trajectory(&traj, cfg.depth()).unwrap().hu).amax() < 1e-12);
        let up = DMatrix::from_element(1, 7, 0.3);
        let yp = DMatrix::from_fn(2, 7, |i, _| oy[i]);
        let sol = solve_robust_mpc(&cfg, &d, &up, &yp, None).unwrap();
        assert!(sol.alpha.amax() < 1e-6);
        assert!((sol.u_hat.add_scalar(-0.3)).amax() < 1e-7);
    }

    #[test]
    fn exact_data_matches_model_based_mpc() {
        let (sys, mut cfg, d, _) = lti_setup(0.0);
        cfg.lambda_alpha = 1e-9;
        // Past window taken from a fresh nominal trajectory; the true lifted state is known.
        // Only the controllable coordinates are excited; an offset in the decaying flux mode
        // cannot be steered to the terminal output in finite time.
        let mut z0 = DVector::zeros(sys.n());
        z0[0] = 0.02;
        z0[1] = -0.01;
        let u_ini = DMatrix::from_row_slice(1, cfg.n_z, &[0.1, -0.2, 0.05, 0.3, 0.0, -0.1, 0.2]);
        let fresh = Trajectory::new(u_ini.clone(), sys.simulate(&z0, &u_ini)).unwrap();
        let mut z = z0;
        for k in 0..cfg.n_z {
            z = &sys.a * z + &sys.b * fresh.u.column(k);
        }
        let sol = solve_robust_mpc(&cfg, &d, &fresh.u, &fresh.y, None).unwrap();
        let u_dd = sol.first_inputs(cfg.n_z, cfg.l_pred);

        // z stays in the controllable subspace, so the minimal realization reproduces it.
        let min = koopman::minimal_realization(&sys, 1e-9).unwrap();
        let z = &min.projection * z;
        let sys = min.system;

        // Model-based oracle: minimize over u with y = O z + T u and terminal equalities.
        let (l, nz) = (cfg.l_pred, cfg.n_z);
        let (m, p) = (1, 2);
        let mut o = DMatrix::zeros(p * l, sys.n());
        let mut t_mat = DMatrix::zeros(p * l, m * l);
        let mut ak = DMatrix::identity(sys.n(), sys.n());
        let markov = sys.markov_parameters(l + 1);
        for k in 0..l {
            o.view_mut((p * k, 0), (p, sys.n())).copy_from(&(&sys.c * &ak));
            ak = &sys.a * ak;
            for j in 0..=k {
                t_mat.view_mut((p * k, m * j), (p, m)).copy_from(&markov[k - j]);
            }
        }
        let free = &o * &z;
        let qb = DMatrix::from_fn(p * l, p * l, |i, j| if i == j { cfg.q[(i % p, i % p)] } else { 0.0 });
        let h = t_mat.transpose() * &qb * &t_mat + DMatrix::identity(l, l) * cfg.r[(0, 0)];
        let g = t_mat.transpose() * &qb * &free;
        // Terminal: u_k = 0 and y_k = 0 for k in L-n_z..L.
        let nt = (m + p) * nz;
        let mut e = DMatrix::zeros(nt, l);
        let mut f = DVector::zeros(nt);
        for (r, k) in (l - nz..l).enumerate() {
            e[(r, k)] = 1.0;
            e.view_mut((nz + p * r, 0), (p, l)).copy_from(&t_mat.rows(p * k, p));
            f.rows_mut(nz + p * r, p).copy_from(&(-free.rows(p * k, p)));
        }
        let mut kkt = DMatrix::zeros(l + nt, l + nt);
        kkt.view_mut((0, 0), (l, l)).copy_from(&h);
        kkt.view_mut((l, 0), (nt, l)).copy_from(&e);
        kkt.view_mut((0, l), (l, nt)).copy_from(&e.transpose());
        let mut rhs = DVector::zeros(l + nt);
        rhs.rows_mut(0, l).copy_from(&(-g));
        rhs.rows_mut(l, nt).copy_from(&f);
        // Redundant terminal rows make the KKT system singular; use least squares.
        let u_mb = crate::linalg::lstsq(&kkt, &rhs, 1e-12).rows(0, l).into_owned();
        let gap = (u_dd.transpose().column(0) - &u_mb).amax();
        assert!(gap < 1e-3 * u_mb.amax().max(1e-3), "gap {gap}, u_mb {u_mb}");
    }

    #[test]
    fn generator_data_slack_bound_holds() {
        use crate::data::{collect_library, ExcitationConfig, LibraryMode};
        use crate::plant::OmegaUnits;
        let p = GeneratorParams::default();
        let r = OperatingRegion {
            omega_units: OmegaUnits::PerUnit,
            ..Default::default()
        };
        let exc = ExcitationConfig {
            init_at_equilibrium: true,
            ..Default::default()
        };
        let lib = collect_library(&p, &r, &exc, 1, 120, LibraryMode::Single, 2).unwrap();
        let (xs, us) = plant::compute_equilibrium(&p, r.delta_s).unwrap();
        let ys = plant::output(&xs, &p);
        let cfg = MpcConfig::new(
            nalgebra::dvector![us],
            nalgebra::dvector![ys.omega_tilde, ys.p_e],
            nalgebra::dvector![r.u_min],
            nalgebra::dvector![r.u_max],
            0.05,
        );
        let d = MpcData::from_trajectory(&lib.trajectories[0], cfg.depth()).unwrap();
        let t = &lib.trajectories[0];
        let up = t.u.columns(50, 7).into_owned();
        let yp = t.y.columns(50, 7).into_owned();
        let sol = solve_robust_mpc(&cfg, &d, &up, &yp, None).unwrap();
        assert!(sol.slack_bound_ok);
        assert!(sol.u_hat.columns(7, 14).iter().all(|u| *u >= r.u_min - 1e-6 && *u <= r.u_max + 1e-6));
    }

    #[test]
    fn closed_loop_at_equilibrium_stays() {
        use crate::data::{collect_library, ExcitationConfig, LibraryMode};
        use crate::plant::OmegaUnits;
        let p = GeneratorParams::default();
        let r = OperatingRegion {
            omega_units: OmegaUnits::PerUnit,
            ..Default::default()
        };
        let exc = ExcitationConfig {
            init_at_equilibrium: true,
            ..Default::default()
        };
        let lib = collect_library(&p, &r, &exc, 1, 120, LibraryMode::Single, 2).unwrap();
        let (xs, us) = plant::compute_equilibrium(&p, r.delta_s).unwrap();
        let ys = plant::output(&xs, &p);
        let cfg = MpcConfig::new(
            nalgebra::dvector![us],
            nalgebra::dvector![ys.omega_tilde, ys.p_e],
            nalgebra::dvector![r.u_min],
            nalgebra::dvector![r.u_max],
            0.05,
        );
        let d = MpcData::from_trajectory(&lib.trajectories[0], cfg.depth()).unwrap();
        let log = receding_horizon_run(&p, &r, &cfg, &d, &xs, 3).unwrap();
        assert_eq!(log.rows.len(), 7 + 21);
        for row in &log.rows {
            // Regularization leaves a small bias on nonlinear data.
            assert!((row.u - us).abs() < 1e-3, "{row:?}");
        }
        assert!(log.final_dist < 1e-3);
        let empty = receding_horizon_run(&p, &r, &cfg, &d, &xs, 0).unwrap();
        assert_eq!(empty.rows.len(), 7);
        assert_eq!(empty.mpc_iterations, 0);
    }
}
