//! Seven-dimensional physics-informed lifting of the generator state, its linear embedding
//! matrices and the proportional-with-offset residual certificate.
//!
//! The lifting is `z = (delta, omega_tilde, Eq', sin delta, cos delta, Eq' sin delta, Eq' cos delta)`.
//! In deviation coordinates around an equilibrium, `zbar+ = A zbar + B ubar + e` with
//! `|e| <= eps_A |zbar| + c_0` on the operating region.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::plant::{self, GeneratorParams, OperatingRegion, Output, State};
use crate::scalar::Real;

/// Lifted dimension.
pub const NZ: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftedState<T>(pub [T; NZ]);

impl<T: Real> LiftedState<T> {
    pub fn to_dvector(&self) -> DVector<T> {
        DVector::from_column_slice(&self.0)
    }

    /// `self - other` as a column vector.
    pub fn deviation(&self, other: &Self) -> DVector<T> {
        DVector::from_fn(NZ, |i, _| self.0[i] - other.0[i])
    }
}

pub fn lift<T: Real>(x: &State<T>, p: &GeneratorParams<T>) -> LiftedState<T> {
    let (s, c) = (x.delta.sin(), x.delta.cos());
    LiftedState([
        x.delta,
        x.omega - p.omega_s,
        x.eq_prime,
        s,
        c,
        x.eq_prime * s,
        x.eq_prime * c,
    ])
}

/// Discrete-time LTI realization `(A, B, C, D)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem<T: Real> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub c: DMatrix<T>,
    pub d: DMatrix<T>,
}

/// The embedding is just an LTI realization with the generator's sparsity pattern.
pub type EmbeddingMatrices<T> = LinearSystem<T>;

impl<T: Real> LinearSystem<T> {
    pub fn new(a: DMatrix<T>, b: DMatrix<T>, c: DMatrix<T>, d: DMatrix<T>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n
            || b.nrows() != n
            || c.ncols() != n
            || d.nrows() != c.nrows()
            || d.ncols() != b.ncols()
        {
            return Err(Error::Dimension(format!(
                "A {}x{}, B {}x{}, C {}x{}, D {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols(),
                d.nrows(),
                d.ncols()
            )));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// Impulse response `D, CB, CAB, ...` (`count` terms).
    pub fn markov_parameters(&self, count: usize) -> Vec<DMatrix<T>> {
        let mut out = Vec::with_capacity(count);
        if count == 0 {
            return out;
        }
        out.push(self.d.clone());
        let mut ab = self.b.clone();
        for _ in 1..count {
            out.push(&self.c * &ab);
            ab = &self.a * &ab;
        }
        out
    }

    /// Propagates `z0` under `inputs` (one column per step); returns outputs (one column per step).
    pub fn simulate(&self, z0: &DVector<T>, inputs: &DMatrix<T>) -> DMatrix<T> {
        let steps = inputs.ncols();
        let mut y = DMatrix::zeros(self.p(), steps);
        let mut z = z0.clone();
        for k in 0..steps {
            let u = inputs.column(k);
            let yk = &self.c * &z + &self.d * u;
            y.set_column(k, &yk);
            z = &self.a * &z + &self.b * u;
        }
        y
    }
}

/// Embedding matrices of the generator in deviation coordinates.
///
/// The field equation is driven by `mu cos(delta)`, so the flux row couples to `z_5`; this keeps
/// rows 1..3 of the residual identically zero.
pub fn build_embedding<T: Real>(p: &GeneratorParams<T>) -> EmbeddingMatrices<T> {
    let ad = p.alpha_d();
    let aq = p.alpha_q();
    let flux = T::one() - aq * p.kappa();
    let mut a = DMatrix::<T>::identity(NZ, NZ);
    a[(0, 1)] = p.dt;
    a[(1, 1)] = T::one() - ad * p.d;
    a[(1, 5)] = -ad * p.gamma();
    a[(2, 2)] = flux;
    a[(2, 4)] = aq * p.mu();
    a[(5, 5)] = flux;
    a[(6, 6)] = flux;
    let mut b = DMatrix::<T>::zeros(NZ, 1);
    b[(1, 0)] = ad;
    let mut c = DMatrix::<T>::zeros(2, NZ);
    c[(0, 1)] = T::one();
    c[(1, 5)] = p.gamma();
    LinearSystem {
        a,
        b,
        c,
        d: DMatrix::zeros(2, 1),
    }
}

/// Constants of the residual bound `|e| <= eps_A |zbar| + eps_B |ubar| + c_0`, `|eta| <= eps_C |zbar|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCertificate<T> {
    pub eps_a: T,
    pub eps_b: T,
    pub eps_c: T,
    pub c0: T,
    pub c4: T,
    pub c5: T,
    pub c6: T,
    pub c7: T,
    pub c4p: T,
    pub c5p: T,
    pub c6p: T,
    pub c7p: T,
    /// Largest per-step angle increment `dt * omega_bound`.
    pub theta_bar: T,
}

impl<T: Real> ErrorCertificate<T> {
    /// Right-hand side of the proportional-with-offset bound.
    pub fn bound(&self, zbar_norm: T, ubar_norm: T) -> T {
        self.eps_a * zbar_norm + self.eps_b * ubar_norm + self.c0
    }

    pub fn to_f64(&self) -> ErrorCertificate<f64> {
        ErrorCertificate {
            eps_a: self.eps_a.as_f64(),
            eps_b: self.eps_b.as_f64(),
            eps_c: self.eps_c.as_f64(),
            c0: self.c0.as_f64(),
            c4: self.c4.as_f64(),
            c5: self.c5.as_f64(),
            c6: self.c6.as_f64(),
            c7: self.c7.as_f64(),
            c4p: self.c4p.as_f64(),
            c5p: self.c5p.as_f64(),
            c6p: self.c6p.as_f64(),
            c7p: self.c7p.as_f64(),
            theta_bar: self.theta_bar.as_f64(),
        }
    }
}

/// Analytic residual constants for the generator lifting over region `r`.
///
/// The angle increment bound uses the region's speed bound in the plant's unit, so with the
/// default raw convention `theta_bar = dt * omega_max`.
pub fn error_constants<T: Real>(p: &GeneratorParams<T>, r: &OperatingRegion<T>) -> ErrorCertificate<T> {
    let aq = p.alpha_q();
    let theta_bar = p.dt * r.omega_bound(p);
    let c4 = p.dt;
    let c5 = p.dt;
    let c6 = aq * p.mu() * (T::one() + r.eq_max) + aq * p.e_fd + r.eq_max * p.dt;
    let c7 = c6;
    let (c4p, c5p) = (T::one(), T::one());
    let (c6p, c7p) = (r.eq_max, r.eq_max);
    ErrorCertificate {
        eps_a: c4 + c5 + c6 + c7,
        eps_b: T::zero(),
        eps_c: T::zero(),
        c0: (c4p + c5p + c6p + c7p) * theta_bar * theta_bar,
        c4,
        c5,
        c6,
        c7,
        c4p,
        c5p,
        c6p,
        c7p,
        theta_bar,
    }
}

/// Equilibrium `(x_s, u_s)` with its lifted state and output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium<T> {
    pub x_s: State<T>,
    pub u_s: T,
    pub z_s: LiftedState<T>,
    pub y_s: Output<T>,
}

impl<T: Real> Equilibrium<T> {
    pub fn new(p: &GeneratorParams<T>, delta_s: T) -> Result<Self> {
        let (x_s, u_s) = plant::compute_equilibrium(p, delta_s)?;
        Ok(Self {
            x_s,
            u_s,
            z_s: lift(&x_s, p),
            y_s: plant::output(&x_s, p),
        })
    }

    pub fn zbar(&self, x: &State<T>, p: &GeneratorParams<T>) -> DVector<T> {
        lift(x, p).deviation(&self.z_s)
    }
}

/// Embedding residual `e = zbar+ - A zbar - B ubar` for one transition.
pub fn residual<T: Real>(
    x: &State<T>,
    u: T,
    p: &GeneratorParams<T>,
    emb: &EmbeddingMatrices<T>,
    eq: &Equilibrium<T>,
) -> Result<DVector<T>> {
    let next = plant::step(x, u, p)?;
    let zbar = eq.zbar(x, p);
    let zbar_next = eq.zbar(&next, p);
    let ubar = DVector::from_element(1, u - eq.u_s);
    Ok(zbar_next - &emb.a * zbar - &emb.b * ubar)
}

#[derive(Clone, Copy, Debug)]
pub struct CertifyOptions {
    pub n_samples: usize,
    pub seed: u64,
    /// Also evaluate the 16 corners of the `(delta, omega, Eq', u)` box.
    pub include_corners: bool,
    /// Keep per-sample records in the report (for CSV export).
    pub keep_samples: bool,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            seed: 0,
            include_corners: true,
            keep_samples: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertSample {
    pub delta: f64,
    pub omega: f64,
    #[serde(rename = "Eq_prime")]
    pub eq_prime: f64,
    pub u: f64,
    pub zbar_norm: f64,
    pub e_norm: f64,
    pub bound: f64,
}

impl CertSample {
    pub fn slack(&self) -> f64 {
        self.e_norm - self.bound
    }
}

pub const TIGHTNESS_BINS: usize = 10;

/// Outcome of an empirical certification sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertReport {
    pub seed: u64,
    pub n_random: usize,
    pub n_corners: usize,
    pub certificate: ErrorCertificate<f64>,
    /// `max (|e| - (eps_A |zbar| + c_0))`; nonpositive when the bound holds everywhere.
    pub max_slack: f64,
    pub violations: usize,
    /// Samples violating one of the per-component bounds on `e_4 .. e_7`.
    pub component_violations: usize,
    /// `max |e_i|` over the exactly-propagated components 1..3.
    pub max_abs_exact_rows: f64,
    pub worst: CertSample,
    /// Histogram of `|e| / bound` over `[0, 1]` in equal bins; ratios above 1 land in the last bin.
    pub tightness_histogram: [usize; TIGHTNESS_BINS],
    #[serde(skip)]
    pub samples: Vec<CertSample>,
}

/// Tolerance for the exactly-linear residual rows.
pub const EXACT_ROW_TOL: f64 = 1e-12;

impl CertReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.component_violations == 0 && self.max_abs_exact_rows < EXACT_ROW_TOL
    }

    pub fn n_total(&self) -> usize {
        self.n_random + self.n_corners
    }

    /// CSV of `zbar_norm,e_norm,bound` per kept sample.
    pub fn write_samples_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "zbar_norm,e_norm,bound")?;
        for s in &self.samples {
            writeln!(w, "{},{},{}", s.zbar_norm, s.e_norm, s.bound)?;
        }
        Ok(())
    }
}

/// Evaluates the residual bound at explicit `(x, u)` points.
pub fn certify_points<T: Real>(
    points: &[(State<T>, T)],
    p: &GeneratorParams<T>,
    emb: &EmbeddingMatrices<T>,
    eq: &Equilibrium<T>,
    cert: &ErrorCertificate<T>,
    keep_samples: bool,
) -> Result<CertAccumulator> {
    let mut acc = CertAccumulator::new(keep_samples);
    for (x, u) in points {
        acc.push(x, *u, p, emb, eq, cert)?;
    }
    Ok(acc)
}

/// Running reduction over certification samples. The maximum is order independent.
#[derive(Clone, Debug)]
pub struct CertAccumulator {
    pub count: usize,
    pub max_slack: f64,
    pub violations: usize,
    pub component_violations: usize,
    pub max_abs_exact_rows: f64,
    pub worst: Option<CertSample>,
    pub histogram: [usize; TIGHTNESS_BINS],
    pub samples: Vec<CertSample>,
    keep: bool,
}

impl CertAccumulator {
    fn new(keep: bool) -> Self {
        Self {
            count: 0,
            max_slack: f64::NEG_INFINITY,
            violations: 0,
            component_violations: 0,
            max_abs_exact_rows: 0.0,
            worst: None,
            histogram: [0; TIGHTNESS_BINS],
            samples: Vec::new(),
            keep,
        }
    }

    fn push<T: Real>(
        &mut self,
        x: &State<T>,
        u: T,
        p: &GeneratorParams<T>,
        emb: &EmbeddingMatrices<T>,
        eq: &Equilibrium<T>,
        cert: &ErrorCertificate<T>,
    ) -> Result<()> {
        let e = residual(x, u, p, emb, eq)?;
        let zn = eq.zbar(x, p).norm();
        let un = (u - eq.u_s).abs();
        let en = e.norm();
        let bound = cert.bound(zn, un);
        let tb2 = cert.theta_bar * cert.theta_bar;
        let comp = [
            (3, cert.c4 * zn + cert.c4p * tb2),
            (4, cert.c5 * zn + cert.c5p * tb2),
            (5, cert.c6 * zn + cert.c6p * tb2),
            (6, cert.c7 * zn + cert.c7p * tb2),
        ];
        if comp.iter().any(|&(i, b)| e[i].abs() > b) {
            self.component_violations += 1;
        }
        for i in 0..3 {
            self.max_abs_exact_rows = self.max_abs_exact_rows.max(e[i].abs().as_f64());
        }
        let sample = CertSample {
            delta: x.delta.as_f64(),
            omega: x.omega.as_f64(),
            eq_prime: x.eq_prime.as_f64(),
            u: u.as_f64(),
            zbar_norm: zn.as_f64(),
            e_norm: en.as_f64(),
            bound: bound.as_f64(),
        };
        let slack = sample.slack();
        if slack > 0.0 {
            self.violations += 1;
        }
        if slack > self.max_slack {
            self.max_slack = slack;
            self.worst = Some(sample);
        }
        let ratio = if sample.bound > 0.0 {
            sample.e_norm / sample.bound
        } else {
            0.0
        };
        let bin = ((ratio * TIGHTNESS_BINS as f64).floor().max(0.0) as usize).min(TIGHTNESS_BINS - 1);
        self.histogram[bin] += 1;
        self.count += 1;
        if self.keep {
            self.samples.push(sample);
        }
        Ok(())
    }
}

/// Uniform sample of the state-input box.
pub fn sample_region<T: Real, R: Rng>(
    rng: &mut R,
    r: &OperatingRegion<T>,
    p: &GeneratorParams<T>,
) -> (State<T>, T) {
    let f = |v: T| v.as_f64();
    let wb = f(r.omega_bound(p));
    let d = f(r.delta_s) + rng.random_range(-1.0..=1.0) * f(r.delta_max);
    let w = f(p.omega_s) + rng.random_range(-1.0..=1.0) * wb;
    let e = rng.random_range(f(r.eq_min)..=f(r.eq_max));
    let u = rng.random_range(f(r.u_min)..=f(r.u_max));
    (State::new(T::lit(d), T::lit(w), T::lit(e)), T::lit(u))
}

/// Empirical check of the residual certificate over the operating region.
pub fn certify<T: Real>(
    p: &GeneratorParams<T>,
    r: &OperatingRegion<T>,
    emb: &EmbeddingMatrices<T>,
    eq: &Equilibrium<T>,
    cert: &ErrorCertificate<T>,
    opts: &CertifyOptions,
) -> Result<CertReport> {
    if opts.n_samples == 0 {
        return Err(Error::InvalidParameter {
            name: "n_samples",
            reason: "must be at least 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut acc = CertAccumulator::new(opts.keep_samples);
    for _ in 0..opts.n_samples {
        let (x, u) = sample_region(&mut rng, r, p);
        // Sampling is clamped to the box; anything else is a programming error.
        if !r.contains(&x, u, p) {
            return Err(Error::SamplerOutOfRegion(format!("{x:?}, u = {u}")));
        }
        acc.push(&x, u, p, emb, eq, cert)?;
    }
    let mut n_corners = 0;
    if opts.include_corners {
        for (x, u) in r.corners(p) {
            acc.push(&x, u, p, emb, eq, cert)?;
            n_corners += 1;
        }
    }
    Ok(CertReport {
        seed: opts.seed,
        n_random: opts.n_samples,
        n_corners,
        certificate: cert.to_f64(),
        max_slack: acc.max_slack,
        violations: acc.violations,
        component_violations: acc.component_violations,
        max_abs_exact_rows: acc.max_abs_exact_rows,
        worst: acc.worst.expect("at least one sample"),
        tightness_histogram: acc.histogram,
        samples: acc.samples,
    })
}

/// Numerical ranks of the controllability and observability matrices.
pub fn ctrl_obs_ranks<T: Real>(sys: &LinearSystem<T>, tol: T) -> (usize, usize) {
    let ctrb = linalg::controllability_matrix(&sys.a, &sys.b);
    let obsv = linalg::observability_matrix(&sys.a, &sys.c);
    (
        linalg::numerical_rank(&ctrb, tol),
        linalg::numerical_rank(&obsv, tol),
    )
}

/// Controllable and observable part of a realization.
#[derive(Clone, Debug)]
pub struct MinimalRealization<T: Real> {
    pub system: LinearSystem<T>,
    pub n_eff: usize,
    /// Maps full states onto reduced coordinates (`n_eff x n`).
    pub projection: DMatrix<T>,
}

/// Kalman decomposition by orthogonal projection: restrict to the controllable subspace, then
/// quotient out the unobservable subspace of the restricted pair.
pub fn minimal_realization<T: Real>(sys: &LinearSystem<T>, tol: T) -> Result<MinimalRealization<T>> {
    if tol <= T::zero() {
        return Err(Error::InvalidParameter {
            name: "tol",
            reason: "rank tolerance must be positive".into(),
        });
    }
    let ctrb = linalg::controllability_matrix(&sys.a, &sys.b);
    let uc = linalg::range_basis(&ctrb, tol)?;
    let ac = uc.transpose() * &sys.a * &uc;
    let bc = uc.transpose() * &sys.b;
    let cc = &sys.c * &uc;
    let obsv = if uc.ncols() == 0 {
        DMatrix::zeros(0, 0)
    } else {
        linalg::observability_matrix(&ac, &cc)
    };
    let vo = if uc.ncols() == 0 {
        DMatrix::zeros(0, 0)
    } else {
        linalg::row_space_basis(&obsv, tol)?
    };
    let am = vo.transpose() * &ac * &vo;
    let bm = vo.transpose() * &bc;
    let cm = &cc * &vo;
    let n_eff = vo.ncols();
    let projection = if n_eff == 0 {
        DMatrix::zeros(0, sys.n())
    } else {
        vo.transpose() * uc.transpose()
    };
    Ok(MinimalRealization {
        system: LinearSystem {
            a: am,
            b: bm,
            c: cm,
            d: sys.d.clone(),
        },
        n_eff,
        projection,
    })
}

/// Largest entrywise gap between the Markov parameters of two systems over `count` terms.
pub fn markov_mismatch<T: Real>(a: &LinearSystem<T>, b: &LinearSystem<T>, count: usize) -> T {
    a.markov_parameters(count)
        .iter()
        .zip(b.markov_parameters(count))
        .map(|(x, y)| (x - y).amax())
        .fold(T::zero(), |acc, v| acc.max(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn setup() -> (GeneratorParams<f64>, OperatingRegion<f64>, EmbeddingMatrices<f64>, Equilibrium<f64>) {
        let p = GeneratorParams::default();
        let r = OperatingRegion::default();
        let emb = build_embedding(&p);
        let eq = Equilibrium::new(&p, r.delta_s).unwrap();
        (p, r, emb, eq)
    }

    #[test]
    fn lift_examples() {
        let p = GeneratorParams::<f64>::default();
        let z = lift(&State::new(0.0, p.omega_s, 1.0), &p);
        assert_eq!(z.0, [0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let h = std::f64::consts::FRAC_PI_2;
        let z = lift(&State::new(h, p.omega_s, 0.8), &p);
        let expect = [h, 0.0, 0.8, 1.0, 0.0, 0.8, 0.0];
        for i in 0..NZ {
            assert!((z.0[i] - expect[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_structure() {
        let (p, _, emb, _) = setup();
        let nonzero = [(0, 0), (0, 1), (1, 1), (1, 5), (2, 2), (2, 4), (3, 3), (4, 4), (5, 5), (6, 6)];
        for i in 0..NZ {
            for j in 0..NZ {
                let expected_nz = nonzero.contains(&(i, j));
                // D = 0 keeps (1,1) at exactly one, still a structural nonzero.
                assert_eq!(emb.a[(i, j)] != 0.0, expected_nz, "A({i},{j})");
            }
        }
        // Independent scalar arithmetic for the coupling term.
        let m = 2.0 * 3.5 / 377.0;
        assert!((emb.a[(1, 5)] + (0.0025 / m) * 2.5).abs() < 1e-15);
        assert!((emb.a[(1, 5)] + 0.336_607_142_857_142_86).abs() < 1e-14);
        assert_eq!(emb.b[(1, 0)], p.alpha_d());
        assert_eq!(emb.b.iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(emb.c[(0, 1)], 1.0);
        assert_eq!(emb.c[(1, 5)], 2.5);
        assert_eq!(emb.c.iter().filter(|v| **v != 0.0).count(), 2);
        assert!(emb.d.iter().all(|v| *v == 0.0));
        let flux = 1.0 - p.alpha_q() * p.kappa();
        let diag: Vec<f64> = (0..NZ).map(|i| emb.a[(i, i)]).collect();
        assert_eq!(diag, vec![1.0, 1.0, flux, 1.0, 1.0, flux, flux]);
    }

    #[test]
    fn embedding_vanishing_dt() {
        let p = GeneratorParams::<f64>::default().with_dt(1e-12);
        let emb = build_embedding(&p);
        assert!((emb.a.clone() - DMatrix::identity(NZ, NZ)).amax() < 1e-9);
        assert!(emb.b.amax() < 1e-9);
    }

    #[test]
    fn certificate_constants() {
        let (p, r, _, _) = setup();
        let cert = error_constants(&p, &r);
        assert_eq!(cert.eps_b, 0.0);
        assert_eq!(cert.eps_c, 0.0);
        assert_eq!(cert.c4, p.dt);
        assert_eq!(cert.c5, p.dt);
        assert_eq!(cert.c4p, 1.0);
        assert_eq!(cert.c6p, r.eq_max);
        assert!((cert.c6 - 0.007_270_833_333_333_333).abs() < 1e-15);
        assert!((cert.eps_a - 0.019_541_666_666_666_667).abs() < 1e-15);
        assert!((cert.c0 - 1.1e-8).abs() < 1e-20);
        let zero = error_constants(&p, &OperatingRegion { omega_max: 0.0, ..r });
        assert_eq!(zero.c0, 0.0);
    }

    #[test]
    fn residual_vanishes_at_equilibrium() {
        let (p, _, emb, eq) = setup();
        let e = residual(&eq.x_s, eq.u_s, &p, &emb, &eq).unwrap();
        assert!(e.amax() < 1e-12);
    }

    #[test]
    fn single_equilibrium_sample_has_offset_slack() {
        let (p, r, emb, eq) = setup();
        let cert = error_constants(&p, &r);
        let acc = certify_points(&[(eq.x_s, eq.u_s)], &p, &emb, &eq, &cert, false).unwrap();
        assert!((acc.max_slack + cert.c0).abs() < 1e-15);
    }

    #[test]
    fn default_certification_has_no_violations() {
        let (p, r, emb, eq) = setup();
        let cert = error_constants(&p, &r);
        let opts = CertifyOptions {
            n_samples: 2000,
            seed: 7,
            ..Default::default()
        };
        let rep = certify(&p, &r, &emb, &eq, &cert, &opts).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert!(rep.max_slack < 0.0);
        assert_eq!(rep.n_total(), 2016);
        assert_eq!(rep.tightness_histogram.iter().sum::<usize>(), 2016);
        let again = certify(&p, &r, &emb, &eq, &cert, &opts).unwrap();
        assert_eq!(rep, again);
    }

    #[test]
    fn generator_ranks_and_minimal_realization() {
        let (_, _, emb, _) = setup();
        assert_eq!(ctrl_obs_ranks(&emb, 1e-9), (2, 2));
        let min = minimal_realization(&emb, 1e-9).unwrap();
        assert!(min.n_eff <= 2);
        assert!(markov_mismatch(&emb, &min.system, 50) <= 1e-8);
    }

    #[test]
    fn zero_input_matrix_is_uncontrollable() {
        let (_, _, mut emb, _) = setup();
        emb.b.fill(0.0);
        assert_eq!(ctrl_obs_ranks(&emb, 1e-9).0, 0);
    }

    #[test]
    fn zero_output_matrix_gives_empty_realization() {
        let (_, _, mut emb, _) = setup();
        emb.c.fill(0.0);
        let min = minimal_realization(&emb, 1e-9).unwrap();
        assert_eq!(min.n_eff, 0);
        for h in min.system.markov_parameters(10) {
            assert!(h.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn minimal_system_is_kept() {
        let sys = LinearSystem::new(
            dmatrix![0.5, 0.2; -0.1, 0.8],
            dmatrix![1.0; 0.3],
            dmatrix![0.4, 1.0],
            dmatrix![0.0],
        )
        .unwrap();
        let min = minimal_realization(&sys, 1e-9).unwrap();
        assert_eq!(min.n_eff, 2);
        assert!(markov_mismatch(&sys, &min.system, 50) < 1e-13);
    }

    #[test]
    fn invalid_tolerance_rejected() {
        let (_, _, emb, _) = setup();
        assert!(minimal_realization(&emb, 0.0).is_err());
    }

    #[test]
    fn eps_a_scales_with_dt() {
        let (p, r, _, _) = setup();
        let base = error_constants(&p, &r).eps_a;
        let doubled = error_constants(&p.with_dt(2.0 * p.dt), &r).eps_a;
        let ratio = doubled / base;
        assert!((ratio - 2.0).abs() <= 0.6, "ratio {ratio}");
    }

    proptest! {
        #[test]
        fn prop_lift_identities(d in -3.0f64..3.0, w in 370.0f64..380.0, e in 0.0f64..2.0) {
            let p = GeneratorParams::<f64>::default();
            let z = lift(&State::new(d, w, e), &p).0;
            prop_assert!((z[3] * z[3] + z[4] * z[4] - 1.0).abs() < 1e-12);
            prop_assert!((z[5] - z[2] * z[3]).abs() < 1e-12);
            prop_assert!((z[6] - z[2] * z[4]).abs() < 1e-12);
        }

        #[test]
        fn prop_residual_rows_and_bound(
            a in -1.0f64..=1.0, b in -1.0f64..=1.0, c in 0.0f64..=1.0, v in 0.0f64..=1.0,
        ) {
            let (p, r, emb, eq) = setup();
            let cert = error_constants(&p, &r);
            let x = State::new(
                r.delta_s + a * r.delta_max,
                p.omega_s + b * r.omega_max,
                r.eq_min + c * (r.eq_max - r.eq_min),
            );
            let u = r.u_min + v * (r.u_max - r.u_min);
            let e = residual(&x, u, &p, &emb, &eq).unwrap();
            for i in 0..3 {
                prop_assert!(e[i].abs() < 1e-12);
            }
            let zn = eq.zbar(&x, &p).norm();
            prop_assert!(e.norm() <= cert.bound(zn, 0.0));
        }
    }
}
