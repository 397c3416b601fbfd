//! End-to-end pipelines. Each writes a JSON report plus CSV series into the output directory and
//! returns the list of checks it made.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use koopdeepc::bounds::{self, BoundReport, FixedPointOptions, QuadraticBeta};
use koopdeepc::data::{self, LibraryMode, RankCheck};
use koopdeepc::koopman::{self, CertReport, CertifyOptions, Equilibrium};
use koopdeepc::mpc::{self, ClosedLoopLog, MpcConfig, MpcData};
use koopdeepc::plant::{self, State};
use koopdeepc::{linalg, EmbeddingMatrices64, GeneratorParams64};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{EpsBarSource, ExperimentConfig, ExperimentKind, SweepParam};
use crate::envelope::{self, EnvelopeFit};
use crate::error::{HarnessError, Result};
use crate::ladder::{self, LadderTable};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub kind: ExperimentKind,
    pub checks: Vec<Check>,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Run the closed loop even when the data or certification checks fail.
    pub force: bool,
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(&path, s)?;
    files.push(path);
    Ok(())
}

fn create(dir: &Path, name: &str, files: &mut Vec<PathBuf>) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path)?;
    files.push(path);
    Ok(BufWriter::new(f))
}

/// Runs `kind` with `cfg`, writing into `opts.out_dir`.
pub fn run_experiment(kind: ExperimentKind, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    cfg.validate(kind)?;
    fs::create_dir_all(&opts.out_dir)?;
    let seed = cfg.seed.unwrap_or(0);
    let started = std::time::Instant::now();
    let mut files = Vec::new();
    let checks = match kind {
        ExperimentKind::Certify => certify_experiment(cfg, seed, &opts.out_dir, &mut files)?,
        ExperimentKind::Bounds => bounds_experiment(cfg, &opts.out_dir, &mut files)?,
        ExperimentKind::Represent => represent_experiment(cfg, seed, &opts.out_dir, &mut files)?,
        ExperimentKind::ClosedLoop => closed_loop_experiment(cfg, seed, opts, &mut files)?,
        ExperimentKind::Sweep => sweep_experiment(cfg, seed, opts, &mut files)?,
    };
    log::info!("{} finished in {:.1?}", kind.name(), started.elapsed());
    Ok(Outcome { kind, checks, files })
}

// ---------------------------------------------------------------------------------------------
// Certification and structure

/// Nonzero entries of the lifted state matrix (0-based).
pub const A_PATTERN: [(usize, usize); 10] = [
    (0, 0),
    (0, 1),
    (1, 1),
    (1, 5),
    (2, 2),
    (2, 4),
    (3, 3),
    (4, 4),
    (5, 5),
    (6, 6),
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StructureReport {
    pub spectral_radius: f64,
    pub upper_triangular: bool,
    pub sparsity_matches: bool,
    pub rank_ctrb: usize,
    pub rank_obsv: usize,
    pub n_eff: usize,
    pub markov_mismatch: f64,
    pub markov_steps: usize,
    pub norm_a: f64,
    pub norm_c: f64,
}

pub fn structure_report(emb: &EmbeddingMatrices64, rank_tol: f64, markov_steps: usize) -> Result<StructureReport> {
    let a = &emb.a;
    let n = a.nrows();
    let spectral_radius = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut upper_triangular = true;
    let mut sparsity_matches = true;
    for i in 0..n {
        for j in 0..n {
            let nz = a[(i, j)] != 0.0;
            if i > j && nz {
                upper_triangular = false;
            }
            if nz != A_PATTERN.contains(&(i, j)) {
                sparsity_matches = false;
            }
        }
    }
    let (rank_ctrb, rank_obsv) = koopman::ctrl_obs_ranks(emb, rank_tol);
    let min = koopman::minimal_realization(emb, rank_tol)?;
    Ok(StructureReport {
        spectral_radius,
        upper_triangular,
        sparsity_matches,
        rank_ctrb,
        rank_obsv,
        n_eff: min.n_eff,
        markov_mismatch: koopman::markov_mismatch(emb, &min.system, markov_steps),
        markov_steps,
        norm_a: linalg::spectral_norm(a),
        norm_c: linalg::spectral_norm(&emb.c),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct CertifyFile<'a> {
    kind: &'static str,
    seed: u64,
    dt: f64,
    c0_closed_form: f64,
    report: &'a CertReport,
    structure: &'a StructureReport,
    checks: &'a [Check],
}

/// Certification sweep on the configured region.
pub fn run_certification(cfg: &ExperimentConfig, p: &GeneratorParams64, seed: u64, keep_samples: bool) -> Result<CertReport> {
    let r = &cfg.region;
    let emb = koopman::build_embedding(p);
    let eq = Equilibrium::new(p, r.delta_s)?;
    let cert = koopman::error_constants(p, r);
    let opts = CertifyOptions {
        n_samples: cfg.certify.n_samples,
        seed,
        include_corners: cfg.certify.include_corners,
        keep_samples,
    };
    Ok(koopman::certify(p, r, &emb, &eq, &cert, &opts)?)
}

fn certify_experiment(cfg: &ExperimentConfig, seed: u64, dir: &Path, files: &mut Vec<PathBuf>) -> Result<Vec<Check>> {
    let p = &cfg.plant;
    let report = run_certification(cfg, p, seed, cfg.certify.write_samples)?;
    let emb = koopman::build_embedding(p);
    let structure = structure_report(&emb, cfg.embedding.rank_tol, cfg.embedding.markov_steps)?;
    let theta = p.dt * cfg.region.omega_bound(p);
    let c0_closed_form = (2.0 + 2.0 * cfg.region.eq_max) * theta * theta;
    let c = &report.certificate;
    let checks = vec![
        Check::new(
            "residual_bound",
            report.violations == 0 && report.component_violations == 0,
            format!(
                "{} samples, {} violations, {} component violations, max slack {:.3e}",
                report.n_total(),
                report.violations,
                report.component_violations,
                report.max_slack
            ),
        ),
        Check::new(
            "exact_rows",
            report.max_abs_exact_rows < koopman::EXACT_ROW_TOL,
            format!("max |e_1..3| = {:.3e}", report.max_abs_exact_rows),
        ),
        Check::new(
            "c0_closed_form",
            (c.c0 - c0_closed_form).abs() <= 1e-15 * c0_closed_form.max(1e-300),
            format!("c0 = {:.6e}", c.c0),
        ),
        Check::new(
            "spectral_radius",
            (structure.spectral_radius - 1.0).abs() <= 1e-9,
            format!("rho(A) = {}", structure.spectral_radius),
        ),
        Check::new(
            "sparsity",
            structure.sparsity_matches && structure.upper_triangular,
            format!("pattern {}, upper triangular {}", structure.sparsity_matches, structure.upper_triangular),
        ),
        Check::new(
            "ranks",
            structure.rank_ctrb == 2 && structure.rank_obsv == 2,
            format!("ctrb {}, obsv {}", structure.rank_ctrb, structure.rank_obsv),
        ),
        Check::new(
            "minimal_realization",
            structure.markov_mismatch <= 1e-8,
            format!("n_eff {}, Markov mismatch {:.3e}", structure.n_eff, structure.markov_mismatch),
        ),
    ];
    write_json(
        dir,
        "certify.json",
        &CertifyFile {
            kind: "certify",
            seed,
            dt: p.dt,
            c0_closed_form,
            report: &report,
            structure: &structure,
            checks: &checks,
        },
        files,
    )?;
    if cfg.certify.write_samples {
        report.write_samples_csv(create(dir, "certify_samples.csv", files)?)?;
    }
    Ok(checks)
}

// ---------------------------------------------------------------------------------------------
// Bounds

#[derive(Clone, Debug, PartialEq, Serialize)]
struct BoundsFile<'a> {
    kind: &'static str,
    report: &'a BoundReport,
    ladder: &'a LadderTable,
    checks: &'a [Check],
}

/// Bound report at the configured horizon, with the optional fixed-point radius.
pub fn bound_report_for(cfg: &ExperimentConfig, p: &GeneratorParams64, l_pred: usize) -> Result<BoundReport> {
    let bi = bounds::generator_bound_inputs(p, &cfg.region, l_pred, cfg.bounds.n_grid)?;
    let mut rep = bounds::bound_report(&bi)?;
    if let Some(fp) = &cfg.bounds.fixed_point {
        let beta = QuadraticBeta { kappa: fp.kappa };
        let opts = FixedPointOptions::for_diameter(bi.diam_z);
        let r = bounds::fixed_point_r(|s| beta.eval(s), fp.c, fp.x0_dev, &bi.cert, rep.s_l, &opts)?;
        rep.r_star = Some(r);
    }
    Ok(rep)
}

fn bounds_experiment(cfg: &ExperimentConfig, dir: &Path, files: &mut Vec<PathBuf>) -> Result<Vec<Check>> {
    let p = &cfg.plant;
    let report = bound_report_for(cfg, p, cfg.bounds.l_pred)?;
    let table = ladder::compare_bound_ladder(p, &cfg.region, &cfg.bounds.ladder, cfg.bounds.n_grid)?;
    let checks = vec![
        Check::new(
            "tight_below_loose",
            report.ordered(),
            format!(
                "L = {}: eps_bar_0 {:.4e} <= eps_bar_tight {:.4e} <= eps_bar {:.4e}",
                report.l_pred, report.eps_bar_0, report.eps_bar_tight, report.eps_bar
            ),
        ),
        Check::new(
            "ladder_ordered",
            table.all_ordered,
            format!("{} horizons", table.rows.len()),
        ),
    ];
    write_json(
        dir,
        "bounds.json",
        &BoundsFile {
            kind: "bounds",
            report: &report,
            ladder: &table,
            checks: &checks,
        },
        files,
    )?;
    table.write_csv(create(dir, "bound_ladder.csv", files)?)?;
    report.write_ladder_csv(create(dir, "eps_bar_k.csv", files)?)?;
    Ok(checks)
}

// ---------------------------------------------------------------------------------------------
// Exact-case representation

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RepresentReport {
    pub seed: u64,
    pub lifted_excitation: RankCheck,
    pub fresh_residuals: Vec<f64>,
    pub corrupted_residuals: Vec<f64>,
    pub max_fresh: f64,
    pub min_corrupted: f64,
}

/// Representation residuals of fresh and corrupted nominal trajectories against a library.
pub fn representation_report(cfg: &ExperimentConfig, seed: u64) -> Result<RepresentReport> {
    let s = &cfg.represent;
    let sys = koopman::build_embedding(&cfg.plant);
    let len = s.t_ini + s.n;
    let lib = data::nominal_library(&sys, s.n_traj, len, s.amplitude, s.z0_scale, seed)?;
    let check = data::lifted_excitation_check(&lib, data::RANK_TOL)?;
    if !check.passed {
        return Err(koopdeepc::Error::RankDeficient {
            block: "H_K".into(),
            rank: check.rank,
            expected: check.required,
        }
        .into());
    }
    let hd = data::assemble_hd(&lib, s.t_ini, s.n)?.stacked();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Library trajectories use the low streams.
    rng.set_stream(1 << 32);
    let mut fresh = Vec::with_capacity(s.n_test);
    let mut corrupted = Vec::with_capacity(s.n_test);
    for _ in 0..s.n_test {
        let t = data::nominal_trajectory(&sys, len, s.amplitude, s.z0_scale, &mut rng);
        fresh.push(data::representation_residual(&hd, &t, s.t_ini, s.n)?.residual);
        let mut bad = t.clone();
        bad.y = bad.y.map(|v| v + s.corrupt_scale * rng.random_range(-1.0..=1.0));
        bad.lifted0 = None;
        corrupted.push(data::representation_residual(&hd, &bad, s.t_ini, s.n)?.residual);
    }
    Ok(RepresentReport {
        seed,
        lifted_excitation: check,
        max_fresh: fresh.iter().cloned().fold(0.0, f64::max),
        min_corrupted: corrupted.iter().cloned().fold(f64::INFINITY, f64::min),
        fresh_residuals: fresh,
        corrupted_residuals: corrupted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct RepresentFile<'a> {
    kind: &'static str,
    report: &'a RepresentReport,
    checks: &'a [Check],
}

fn represent_experiment(cfg: &ExperimentConfig, seed: u64, dir: &Path, files: &mut Vec<PathBuf>) -> Result<Vec<Check>> {
    let rep = representation_report(cfg, seed)?;
    let s = &cfg.represent;
    let checks = vec![
        Check::new(
            "lifted_excitation",
            rep.lifted_excitation.passed,
            format!("rank {} of {}", rep.lifted_excitation.rank, rep.lifted_excitation.required),
        ),
        Check::new(
            "fresh_represented",
            rep.max_fresh <= s.exact_tol,
            format!("max residual {:.3e} (limit {:.1e})", rep.max_fresh, s.exact_tol),
        ),
        Check::new(
            "corrupted_rejected",
            rep.min_corrupted > s.corrupt_min,
            format!("min residual {:.3e} (limit {:.1e})", rep.min_corrupted, s.corrupt_min),
        ),
    ];
    write_json(
        dir,
        "represent.json",
        &RepresentFile {
            kind: "represent",
            report: &rep,
            checks: &checks,
        },
        files,
    )?;
    {
        use std::io::Write;
        let mut w = create(dir, "represent.csv", files)?;
        writeln!(w, "i,fresh_residual,corrupted_residual")?;
        for (i, (a, b)) in rep.fresh_residuals.iter().zip(&rep.corrupted_residuals).enumerate() {
            writeln!(w, "{i},{a},{b}")?;
        }
    }
    Ok(checks)
}

// ---------------------------------------------------------------------------------------------
// Closed loop

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosedLoopSummary {
    pub seed: u64,
    pub dt: f64,
    pub l_pred: usize,
    pub iterations: usize,
    pub eps_bar: f64,
    pub data_len: usize,
    pub data_rejected: usize,
    pub pe_order: usize,
    pub pe_passed: bool,
    pub certified: bool,
    pub forced: bool,
    pub fit: EnvelopeFit,
    pub min_dist: f64,
    pub final_dist: f64,
    pub left_region_at: Option<usize>,
    pub failure: Option<String>,
    pub slack_bound_violations: usize,
    pub max_kkt: f64,
    /// MPC iterations whose optimal cost exceeded the previous one.
    pub cost_increases: usize,
    pub basin: Vec<BasinProbe>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BasinLabel {
    Converged,
    Diverged,
    Undecided,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BasinProbe {
    pub delta0_offset: f64,
    pub label: BasinLabel,
    pub initial_dist: f64,
    pub final_dist: f64,
}

fn basin_label(log: &ClosedLoopLog, initial: f64) -> BasinLabel {
    if log.failure.is_some() || log.left_region_at.is_some() || !log.final_dist.is_finite() {
        BasinLabel::Diverged
    } else if log.final_dist <= 0.1 * initial {
        BasinLabel::Converged
    } else {
        BasinLabel::Undecided
    }
}

pub struct ClosedLoopRun {
    pub summary: ClosedLoopSummary,
    pub log: ClosedLoopLog,
}

fn eps_bar_value(cfg: &ExperimentConfig, p: &GeneratorParams64, l_pred: usize) -> Result<f64> {
    Ok(match cfg.mpc.eps_bar {
        EpsBarSource::Value(v) => v,
        src => {
            let rep = bound_report_for(cfg, p, l_pred)?;
            match src {
                EpsBarSource::Loose => rep.eps_bar,
                EpsBarSource::Tight => rep.eps_bar_tight,
                _ => rep.eps_bar_0,
            }
        }
    })
}

/// Collects data, gates on excitation and certification, and runs the receding-horizon loop.
pub fn run_closed_loop(cfg: &ExperimentConfig, p: &GeneratorParams64, l_pred: usize, seed: u64, force: bool) -> Result<ClosedLoopRun> {
    let region = cfg.region_closed_loop();
    let m = &cfg.mpc;
    let lib = data::collect_library(p, &region, &cfg.data.excitation, 1, cfg.data.len, LibraryMode::Single, seed)?;
    let traj = &lib.trajectories[0];
    let pe_order = l_pred + 2 * m.n_z;
    let pe_passed = traj.len() >= pe_order && data::pe_check(&traj.u, pe_order, data::RANK_TOL)?;
    let certified = run_certification(cfg, p, seed, false)?.passed();
    if !(pe_passed && certified) && !force {
        return Err(HarnessError::Gated(format!(
            "persistent excitation of order {pe_order}: {pe_passed}, certification: {certified}"
        )));
    }
    let eps_bar = eps_bar_value(cfg, p, l_pred)?;
    let (xs, us) = plant::compute_equilibrium(p, region.delta_s)?;
    let ys = plant::output(&xs, p);
    let u_s = DVector::from_element(1, us);
    let y_s = DVector::from_vec(vec![ys.omega_tilde, ys.p_e]);
    let mut mc = MpcConfig::new(
        u_s.clone(),
        y_s.clone(),
        DVector::from_element(1, region.u_min),
        DVector::from_element(1, region.u_max),
        eps_bar,
    );
    mc.l_pred = l_pred;
    mc.n_z = m.n_z;
    mc.q = DMatrix::from_diagonal(&DVector::from_vec(m.q_diag.clone()));
    mc.r = DMatrix::from_diagonal(&DVector::from_vec(m.r_diag.clone()));
    mc.lambda_alpha = m.lambda_alpha;
    mc.lambda_sigma = m.lambda_sigma;
    mc.slack = m.slack;
    mc.qp.polish = m.polish;
    let hankel = if m.center_data {
        MpcData::centered(traj, mc.depth(), &u_s, &y_s)?
    } else {
        MpcData::from_trajectory(traj, mc.depth())?
    };
    let x0 = State::new(region.delta_s + m.delta0_offset, p.omega_s, xs.eq_prime);
    let iterations = m.iterations(p.dt);
    let log = mpc::receding_horizon_run(p, &region, &mc, &hankel, &x0, iterations)?;
    let mut basin = Vec::with_capacity(m.basin_offsets.len());
    for &off in &m.basin_offsets {
        let x0 = State::new(region.delta_s + off, p.omega_s, xs.eq_prime);
        let probe = mpc::receding_horizon_run(p, &region, &mc, &hankel, &x0, iterations)?;
        let initial_dist = x0.distance(&xs);
        basin.push(BasinProbe {
            delta0_offset: off,
            label: basin_label(&probe, initial_dist),
            initial_dist,
            final_dist: probe.final_dist,
        });
    }
    let fit = envelope::fit_envelope(&log);
    let d = log.distances();
    let scale = log.costs.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let cost_increases = log.costs.windows(2).filter(|w| w[1] > w[0] + 1e-9 * scale).count();
    let summary = ClosedLoopSummary {
        seed,
        dt: p.dt,
        l_pred,
        iterations,
        eps_bar,
        data_len: traj.len(),
        data_rejected: lib.rejected,
        pe_order,
        pe_passed,
        certified,
        forced: force && !(pe_passed && certified),
        fit,
        min_dist: d.iter().cloned().fold(f64::INFINITY, f64::min),
        final_dist: log.final_dist,
        left_region_at: log.left_region_at,
        failure: log.failure.clone(),
        slack_bound_violations: log.slack_bound_violations,
        max_kkt: log.max_kkt,
        cost_increases,
        basin,
    };
    Ok(ClosedLoopRun { summary, log })
}

fn closed_loop_checks(s: &ClosedLoopSummary) -> Vec<Check> {
    vec![
        Check::new(
            "solver",
            s.failure.is_none(),
            s.failure.clone().unwrap_or_else(|| format!("{} iterations solved", s.iterations)),
        ),
        Check::new(
            "stayed_in_region",
            s.left_region_at.is_none(),
            format!("left at {:?}", s.left_region_at),
        ),
        Check::new(
            "slack_bound",
            s.slack_bound_violations == 0,
            format!("{} a-posteriori violations", s.slack_bound_violations),
        ),
        Check::new(
            "envelope_fit",
            s.fit.ok(),
            format!(
                "rho_fit {:.6}, c_fit {:.3e}, beta_fit {:.3e} ({:?})",
                s.fit.rho_fit, s.fit.c_fit, s.fit.beta_fit, s.fit.status
            ),
        ),
        Check::new(
            "reaches_plateau",
            s.min_dist <= 10.0 * s.fit.beta_fit,
            format!("min |x - x_s| {:.3e}", s.min_dist),
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct ClosedLoopFile<'a> {
    kind: &'static str,
    summary: &'a ClosedLoopSummary,
    costs: &'a [f64],
    checks: &'a [Check],
}

fn closed_loop_experiment(cfg: &ExperimentConfig, seed: u64, opts: &RunOptions, files: &mut Vec<PathBuf>) -> Result<Vec<Check>> {
    let run = run_closed_loop(cfg, &cfg.plant, cfg.mpc.l_pred, seed, opts.force)?;
    let checks = closed_loop_checks(&run.summary);
    write_json(
        &opts.out_dir,
        "closed_loop.json",
        &ClosedLoopFile {
            kind: "closed-loop",
            summary: &run.summary,
            costs: &run.log.costs,
            checks: &checks,
        },
        files,
    )?;
    run.log.write_csv(create(&opts.out_dir, "closed_loop.csv", files)?)?;
    Ok(checks)
}

// ---------------------------------------------------------------------------------------------
// Sweep

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub dt: f64,
    pub l_pred: usize,
    pub eps_a: f64,
    pub c0: f64,
    pub eps_bar: f64,
    pub eps_bar_tight: f64,
    pub eps_bar_0: f64,
    pub closed_loop: Option<ClosedLoopSummary>,
}

fn sweep_point(cfg: &ExperimentConfig, value: f64, seed: u64, force: bool) -> Result<(SweepPoint, Option<ClosedLoopLog>)> {
    let mut p = cfg.plant;
    let mut l_pred = cfg.mpc.l_pred;
    match cfg.sweep.param {
        SweepParam::Dt => p = p.with_dt(value),
        SweepParam::LPred => {
            if !(value >= 2.0 && value.fract() == 0.0) {
                return Err(HarnessError::Config {
                    path: "sweep.values".into(),
                    message: format!("horizon {value} is not an integer >= 2"),
                });
            }
            l_pred = value as usize;
        }
    }
    p.validate()?;
    let cert = koopman::error_constants(&p, &cfg.region);
    let rep = bound_report_for(cfg, &p, l_pred)?;
    let (cl, log) = if cfg.sweep.closed_loop {
        let run = run_closed_loop(cfg, &p, l_pred, seed, force)?;
        (Some(run.summary), Some(run.log))
    } else {
        (None, None)
    };
    Ok((
        SweepPoint {
            value,
            dt: p.dt,
            l_pred,
            eps_a: cert.eps_a,
            c0: cert.c0,
            eps_bar: rep.eps_bar,
            eps_bar_tight: rep.eps_bar_tight,
            eps_bar_0: rep.eps_bar_0,
            closed_loop: cl,
        },
        log,
    ))
}

/// Points in configuration order; evaluated concurrently.
pub fn run_sweep(cfg: &ExperimentConfig, seed: u64, force: bool) -> Result<Vec<(SweepPoint, Option<ClosedLoopLog>)>> {
    let results: Vec<Result<_>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .sweep
            .values
            .iter()
            .map(|&v| s.spawn(move || sweep_point(cfg, v, seed, force)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(HarnessError::Gated("sweep worker panicked".into()))))
            .collect()
    });
    results.into_iter().collect()
}

/// Checks on a finished sweep: `eps_A` proportional to `dt` and the plateau trend.
pub fn sweep_checks(cfg: &ExperimentConfig, points: &[SweepPoint]) -> Vec<Check> {
    let mut checks = Vec::new();
    match cfg.sweep.param {
        SweepParam::Dt => {
            let tol = cfg.sweep.eps_a_scaling_tol;
            let mut worst: f64 = 1.0;
            for w in points.windows(2) {
                let ratio = (w[1].eps_a / w[0].eps_a) / (w[1].dt / w[0].dt);
                if (ratio - 1.0).abs() > (worst - 1.0).abs() {
                    worst = ratio;
                }
            }
            checks.push(Check::new(
                "eps_a_linear_in_dt",
                (worst - 1.0).abs() <= tol,
                format!("worst normalized ratio {worst:.4} (tolerance {tol})"),
            ));
            if cfg.sweep.closed_loop {
                let mut by_dt: Vec<&SweepPoint> = points.iter().collect();
                by_dt.sort_by(|a, b| b.dt.total_cmp(&a.dt));
                let betas: Vec<f64> = by_dt
                    .iter()
                    .map(|p| p.closed_loop.as_ref().map_or(f64::NAN, |c| c.fit.beta_fit))
                    .collect();
                let monotone = betas.windows(2).all(|w| w[1] <= w[0]);
                let listing: Vec<String> = by_dt
                    .iter()
                    .zip(&betas)
                    .map(|(p, b)| format!("dt {}: {:.3e}", p.dt, b))
                    .collect();
                checks.push(Check::new(
                    "beta_non_increasing",
                    monotone,
                    format!("beta_fit by decreasing dt: {}", listing.join(", ")),
                ));
            }
        }
        SweepParam::LPred => {}
    }
    if cfg.sweep.closed_loop {
        for pt in points {
            if let Some(c) = &pt.closed_loop {
                checks.push(Check::new(
                    &format!("envelope_fit[{}]", pt.value),
                    c.fit.ok() && c.failure.is_none(),
                    format!("rho_fit {:.6}, beta_fit {:.3e}", c.fit.rho_fit, c.fit.beta_fit),
                ));
            }
        }
    }
    checks.push(Check::new(
        "bounds_ordered",
        points.iter().all(|p| p.eps_bar_0 <= p.eps_bar_tight && p.eps_bar_tight <= p.eps_bar),
        format!("{} points", points.len()),
    ));
    checks
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct SweepFile<'a> {
    kind: &'static str,
    seed: u64,
    param: SweepParam,
    points: &'a [SweepPoint],
    checks: &'a [Check],
}

fn sweep_experiment(cfg: &ExperimentConfig, seed: u64, opts: &RunOptions, files: &mut Vec<PathBuf>) -> Result<Vec<Check>> {
    let results = run_sweep(cfg, seed, opts.force)?;
    let points: Vec<SweepPoint> = results.iter().map(|(p, _)| p.clone()).collect();
    let checks = sweep_checks(cfg, &points);
    write_json(
        &opts.out_dir,
        "sweep.json",
        &SweepFile {
            kind: "sweep",
            seed,
            param: cfg.sweep.param,
            points: &points,
            checks: &checks,
        },
        files,
    )?;
    {
        use std::io::Write;
        let mut w = create(&opts.out_dir, "sweep.csv", files)?;
        writeln!(w, "value,dt,l_pred,eps_a,c0,eps_bar,eps_bar_tight,eps_bar_0,beta_fit,rho_fit,c_fit,fit_ok,final_dist")?;
        for p in &points {
            let (b, r, c, ok, fd) = p.closed_loop.as_ref().map_or((f64::NAN, f64::NAN, f64::NAN, false, f64::NAN), |s| {
                (s.fit.beta_fit, s.fit.rho_fit, s.fit.c_fit, s.fit.ok(), s.final_dist)
            });
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                p.value, p.dt, p.l_pred, p.eps_a, p.c0, p.eps_bar, p.eps_bar_tight, p.eps_bar_0, b, r, c, ok, fd
            )?;
        }
    }
    for (i, (_, log)) in results.iter().enumerate() {
        if let Some(log) = log {
            log.write_csv(create(&opts.out_dir, &format!("sweep_{i:02}_closed_loop.csv"), files)?)?;
        }
    }
    Ok(checks)
}
