//! Trajectory libraries, Hankel matrices, excitation checks and the data matrix `H_d`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::koopman::{self, LinearSystem};
use crate::linalg;
use crate::plant::{self, GeneratorParams, OperatingRegion, State};

/// Default relative rank tolerance.
pub const RANK_TOL: f64 = 1e-9;

/// One input/output record; columns of `u` and `y` are time steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
    /// Plant states `x_0 .. x_T` (simulation mode only).
    pub x: Option<Vec<State<f64>>>,
    /// Initial lifted state used for lifted-excitation checks: `Phi(x_0)` for generator data,
    /// the deviation `zbar_0` for data from a nominal LTI model.
    pub lifted0: Option<DVector<f64>>,
}

impl Trajectory {
    pub fn new(u: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if u.ncols() != y.ncols() {
            return Err(Error::Dimension(format!(
                "{} inputs vs {} outputs",
                u.ncols(),
                y.ncols()
            )));
        }
        Ok(Self {
            u,
            y,
            x: None,
            lifted0: None,
        })
    }

    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn m(&self) -> usize {
        self.u.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.nrows()
    }

    /// Generator trajectory from a plant simulation.
    pub fn from_simulation(sim: &plant::SimTrajectory<f64>, p: &GeneratorParams<f64>) -> Self {
        let n = sim.inputs.len();
        let u = DMatrix::from_row_slice(1, n, &sim.inputs);
        let y = DMatrix::from_fn(2, n, |i, k| {
            let o = sim.outputs[k];
            if i == 0 { o.omega_tilde } else { o.p_e }
        });
        Self {
            u,
            y,
            x: Some(sim.states.clone()),
            lifted0: Some(koopman::lift(&sim.states[0], p).to_dvector()),
        }
    }

    /// Stacked window `(u_a; y_a; ...)` interleaved per time step, for `k in start..start+len`.
    pub fn window(&self, start: usize, len: usize) -> DVector<f64> {
        let (m, p) = (self.m(), self.p());
        let mut w = DVector::zeros((m + p) * len);
        for k in 0..len {
            let base = k * (m + p);
            w.rows_mut(base, m).copy_from(&self.u.column(start + k));
            w.rows_mut(base + m, p).copy_from(&self.y.column(start + k));
        }
        w
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = vec!["k".to_string()];
        header.extend((0..self.m()).map(|i| format!("u{i}")));
        header.extend((0..self.p()).map(|i| format!("y{i}")));
        if self.x.is_some() {
            header.extend(["delta", "omega", "Eq_prime"].map(String::from));
        }
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![k.to_string()];
            row.extend(self.u.column(k).iter().map(|v| v.to_string()));
            row.extend(self.y.column(k).iter().map(|v| v.to_string()));
            if let Some(x) = &self.x {
                row.extend(x[k].to_array().iter().map(|v| v.to_string()));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LibraryMode {
    /// `l` independent trajectories of a common length; one `H_d` column each.
    #[default]
    Library,
    /// Long trajectories cut into sliding windows.
    Single,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryLibrary {
    pub trajectories: Vec<Trajectory>,
    pub mode: LibraryMode,
    pub seed: u64,
    pub rejected: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LibraryManifest {
    pub l: usize,
    pub l_traj: usize,
    pub seed: u64,
    pub mode: LibraryMode,
    pub rejected: usize,
    pub files: Vec<String>,
    pub x0: Vec<Option<[f64; 3]>>,
}

impl TrajectoryLibrary {
    pub fn new(trajectories: Vec<Trajectory>, mode: LibraryMode) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::Dimension("empty trajectory library".into()))?;
        let (len, m, p) = (first.len(), first.m(), first.p());
        for t in &trajectories {
            if t.m() != m || t.p() != p {
                return Err(Error::Dimension("mixed signal dimensions in library".into()));
            }
            if mode == LibraryMode::Library && t.len() != len {
                return Err(Error::Dimension(format!(
                    "library trajectories must share a length ({} vs {len})",
                    t.len()
                )));
            }
        }
        Ok(Self {
            trajectories,
            mode,
            seed: 0,
            rejected: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn traj_len(&self) -> usize {
        self.trajectories[0].len()
    }

    pub fn m(&self) -> usize {
        self.trajectories[0].m()
    }

    pub fn p(&self) -> usize {
        self.trajectories[0].p()
    }

    /// Writes `traj_NNNN.csv` per trajectory and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<LibraryManifest> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.len());
        let mut x0 = Vec::with_capacity(self.len());
        for (i, t) in self.trajectories.iter().enumerate() {
            let name = format!("traj_{i:04}.csv");
            let f = fs::File::create(dir.join(&name))?;
            t.write_csv(std::io::BufWriter::new(f))?;
            files.push(name);
            x0.push(t.x.as_ref().map(|x| x[0].to_array()));
        }
        let manifest = LibraryManifest {
            l: self.len(),
            l_traj: self.traj_len(),
            seed: self.seed,
            mode: self.mode,
            rejected: self.rejected,
            files,
            x0,
        };
        let f = fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &manifest)?;
        Ok(manifest)
    }
}

/// Block Hankel matrix of a vector sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct HankelMatrix {
    pub depth: usize,
    pub n_src: usize,
    pub dim: usize,
    pub matrix: DMatrix<f64>,
}

/// `seq` holds one sample per column; the result has `dim * depth` rows and
/// `n_src - depth + 1` columns, column `j` being the window starting at `j`.
pub fn hankel(seq: &DMatrix<f64>, depth: usize) -> Result<HankelMatrix> {
    let (dim, n_src) = seq.shape();
    if depth == 0 {
        return Err(Error::InvalidParameter {
            name: "depth",
            reason: "must be at least 1".into(),
        });
    }
    if n_src < depth {
        return Err(Error::TooShort {
            needed: depth,
            got: n_src,
        });
    }
    let cols = n_src - depth + 1;
    let matrix = DMatrix::from_fn(dim * depth, cols, |i, j| seq[(i % dim, j + i / dim)]);
    Ok(HankelMatrix {
        depth,
        n_src,
        dim,
        matrix,
    })
}

/// Persistency of excitation: `hankel(u, order)` has full row rank.
pub fn pe_check(u: &DMatrix<f64>, order: usize, tol: f64) -> Result<bool> {
    let h = hankel(u, order)?;
    Ok(linalg::numerical_rank(&h.matrix, tol) == u.nrows() * order)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RankCheck {
    pub passed: bool,
    pub rank: usize,
    pub required: usize,
}

/// `H_K = [u windows; lifted initial states]` per trajectory.
pub fn lifted_excitation_matrix(lib: &TrajectoryLibrary) -> Result<DMatrix<f64>> {
    let m = lib.m();
    let len = lib.traj_len();
    let nz = lib.trajectories[0]
        .lifted0
        .as_ref()
        .ok_or_else(|| Error::MissingStates("lifted excitation needs initial lifted states".into()))?
        .len();
    let mut hk = DMatrix::zeros(m * len + nz, lib.len());
    for (j, t) in lib.trajectories.iter().enumerate() {
        if t.len() != len {
            return Err(Error::Dimension("unequal trajectory lengths".into()));
        }
        let z0 = t
            .lifted0
            .as_ref()
            .ok_or_else(|| Error::MissingStates(format!("trajectory {j} has no initial state")))?;
        for k in 0..len {
            for i in 0..m {
                hk[(k * m + i, j)] = t.u[(i, k)];
            }
        }
        hk.view_mut((m * len, j), (nz, 1)).copy_from(z0);
    }
    Ok(hk)
}

/// Full row rank of `H_K` (simulation data only).
pub fn lifted_excitation_check(lib: &TrajectoryLibrary, tol: f64) -> Result<RankCheck> {
    let hk = lifted_excitation_matrix(lib)?;
    let rank = linalg::numerical_rank(&hk, tol);
    Ok(RankCheck {
        passed: rank == hk.nrows(),
        rank,
        required: hk.nrows(),
    })
}

/// Stacked data matrix `(U_P; Y_P; U_F; Y_F)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMatrix {
    pub up: DMatrix<f64>,
    pub yp: DMatrix<f64>,
    pub uf: DMatrix<f64>,
    pub yf: DMatrix<f64>,
}

impl DataMatrix {
    pub fn cols(&self) -> usize {
        self.up.ncols()
    }

    pub fn stacked(&self) -> DMatrix<f64> {
        linalg::vstack(&[&self.up, &self.yp, &self.uf, &self.yf])
    }
}

/// Block-stacked columns of a window `[k0, k0+len)`: all inputs then all outputs.
fn split_window(t: &Trajectory, start: usize, len: usize) -> (DVector<f64>, DVector<f64>) {
    let (m, p) = (t.m(), t.p());
    let u = DVector::from_fn(m * len, |i, _| t.u[(i % m, start + i / m)]);
    let y = DVector::from_fn(p * len, |i, _| t.y[(i % p, start + i / p)]);
    (u, y)
}

/// Data matrix for past length `t_ini` and future length `n`. Library mode takes one column per
/// trajectory (length must equal `t_ini + n`); single mode slides a window along every trajectory.
pub fn assemble_hd(lib: &TrajectoryLibrary, t_ini: usize, n: usize) -> Result<DataMatrix> {
    let total = t_ini + n;
    if total == 0 {
        return Err(Error::InvalidParameter {
            name: "t_ini + N",
            reason: "window must be nonempty".into(),
        });
    }
    let mut windows = Vec::new();
    for t in &lib.trajectories {
        match lib.mode {
            LibraryMode::Library => {
                if t.len() != total {
                    return Err(Error::Dimension(format!(
                        "T_ini + N = {total} but trajectory length is {}",
                        t.len()
                    )));
                }
                windows.push((t, 0));
            }
            LibraryMode::Single => {
                if t.len() < total {
                    return Err(Error::TooShort {
                        needed: total,
                        got: t.len(),
                    });
                }
                windows.extend((0..=t.len() - total).map(|s| (t, s)));
            }
        }
    }
    let (m, p) = (lib.m(), lib.p());
    let cols = windows.len();
    let mut dm = DataMatrix {
        up: DMatrix::zeros(m * t_ini, cols),
        yp: DMatrix::zeros(p * t_ini, cols),
        uf: DMatrix::zeros(m * n, cols),
        yf: DMatrix::zeros(p * n, cols),
    };
    for (j, (t, s)) in windows.into_iter().enumerate() {
        let (u, y) = split_window(t, s, total);
        dm.up.set_column(j, &u.rows(0, m * t_ini));
        dm.uf.set_column(j, &u.rows(m * t_ini, m * n));
        dm.yp.set_column(j, &y.rows(0, p * t_ini));
        dm.yf.set_column(j, &y.rows(p * t_ini, p * n));
    }
    Ok(dm)
}

/// Same stacking as one `H_d` column, for a candidate trajectory.
pub fn stack_trajectory(t: &Trajectory, t_ini: usize, n: usize) -> Result<DVector<f64>> {
    if t.len() != t_ini + n {
        return Err(Error::Dimension(format!(
            "trajectory length {} != T_ini + N = {}",
            t.len(),
            t_ini + n
        )));
    }
    let (m, p) = (t.m(), t.p());
    let (u, y) = split_window(t, 0, t_ini + n);
    let mut w = DVector::zeros(u.len() + y.len());
    w.rows_mut(0, m * t_ini).copy_from(&u.rows(0, m * t_ini));
    w.rows_mut(m * t_ini, p * t_ini).copy_from(&y.rows(0, p * t_ini));
    w.rows_mut((m + p) * t_ini, m * n).copy_from(&u.rows(m * t_ini, m * n));
    w.rows_mut((m + p) * t_ini + m * n, p * n)
        .copy_from(&y.rows(p * t_ini, p * n));
    Ok(w)
}

/// Excitation of the generator library.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExcitationConfig {
    /// Half-width of the uniform input band around `u_s`.
    pub amplitude: f64,
    /// Number of steps each random level is held.
    pub hold: usize,
    /// Fraction of the state box used for random initial states.
    pub init_shrink: f64,
    /// Start every trajectory at the equilibrium instead of a random state.
    pub init_at_equilibrium: bool,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        Self {
            amplitude: 0.2,
            hold: 1,
            init_shrink: 0.8,
            init_at_equilibrium: false,
        }
    }
}

impl ExcitationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "amplitude",
                reason: "must be finite and nonnegative".into(),
            });
        }
        if self.hold == 0 {
            return Err(Error::InvalidParameter {
                name: "hold",
                reason: "must be at least 1".into(),
            });
        }
        if !(self.init_shrink > 0.0 && self.init_shrink <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "init_shrink",
                reason: "must lie in (0, 1]".into(),
            });
        }
        Ok(())
    }
}

/// Attempts per requested trajectory before giving up (rejection rate above 90%).
pub const MAX_ATTEMPTS_PER_TRAJECTORY: usize = 10;

fn attempt_rng(seed: u64, attempt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt as u64);
    rng
}

/// Random input sequence in `[u_s - a, u_s + a]` clipped to the input box, piecewise constant
/// over `hold` steps.
pub fn excitation_signal<R: Rng>(
    rng: &mut R,
    u_s: f64,
    len: usize,
    exc: &ExcitationConfig,
    r: &OperatingRegion<f64>,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut level = u_s;
    for k in 0..len {
        if k % exc.hold == 0 {
            let v = if exc.amplitude > 0.0 {
                u_s + rng.random_range(-exc.amplitude..=exc.amplitude)
            } else {
                u_s
            };
            level = v.clamp(r.u_min, r.u_max);
        }
        out.push(level);
    }
    out
}

/// Simulates `l` in-region trajectories of length `len` around the equilibrium at `r.delta_s`.
///
/// Trajectory attempt `i` uses stream `i` of the master seed, so results do not depend on
/// evaluation order. Attempts leaving the operating region are rejected and resampled.
pub fn collect_library(
    p: &GeneratorParams<f64>,
    r: &OperatingRegion<f64>,
    exc: &ExcitationConfig,
    l: usize,
    len: usize,
    mode: LibraryMode,
    seed: u64,
) -> Result<TrajectoryLibrary> {
    if l == 0 {
        return Err(Error::InvalidParameter {
            name: "l",
            reason: "need at least one trajectory".into(),
        });
    }
    exc.validate()?;
    r.validate()?;
    let (xs, us) = plant::compute_equilibrium(p, r.delta_s)?;
    let wb = r.omega_bound(p);
    let max_attempts = MAX_ATTEMPTS_PER_TRAJECTORY * l;
    let mut trajectories = Vec::with_capacity(l);
    let mut attempt = 0;
    while trajectories.len() < l {
        if attempt >= max_attempts {
            return Err(Error::ExcessiveRejection {
                rejected: attempt - trajectories.len(),
                attempts: attempt,
            });
        }
        let mut rng = attempt_rng(seed, attempt);
        attempt += 1;
        let x0 = if exc.init_at_equilibrium {
            xs
        } else {
            let s = exc.init_shrink;
            let eq_mid = 0.5 * (r.eq_min + r.eq_max);
            let eq_half = 0.5 * (r.eq_max - r.eq_min);
            State::new(
                r.delta_s + s * r.delta_max * rng.random_range(-1.0..=1.0),
                p.omega_s + s * wb * rng.random_range(-1.0..=1.0),
                eq_mid + s * eq_half * rng.random_range(-1.0..=1.0),
            )
        };
        let inputs = excitation_signal(&mut rng, us, len, exc, r);
        let sim = plant::simulate(&x0, &inputs, p, Some(r))?;
        if sim.exit_index.is_some() {
            log::trace!("trajectory attempt {} left the region", attempt - 1);
            continue;
        }
        trajectories.push(Trajectory::from_simulation(&sim, p));
    }
    let mut lib = TrajectoryLibrary::new(trajectories, mode)?;
    lib.seed = seed;
    lib.rejected = attempt - l;
    if lib.rejected > 0 {
        log::debug!("rejected {} of {} trajectory attempts", lib.rejected, attempt);
    }
    Ok(lib)
}

/// Library from the nominal lifted LTI model (zero residuals), with random deviation initial
/// states of scale `z0_scale` and uniform inputs of half-width `amplitude` around zero.
pub fn nominal_library(
    sys: &LinearSystem<f64>,
    l: usize,
    len: usize,
    amplitude: f64,
    z0_scale: f64,
    seed: u64,
) -> Result<TrajectoryLibrary> {
    let trajectories = (0..l)
        .map(|i| {
            let mut rng = attempt_rng(seed, i);
            nominal_trajectory(sys, len, amplitude, z0_scale, &mut rng)
        })
        .collect();
    let mut lib = TrajectoryLibrary::new(trajectories, LibraryMode::Library)?;
    lib.seed = seed;
    Ok(lib)
}

/// One random trajectory of the nominal LTI model.
pub fn nominal_trajectory<R: Rng>(
    sys: &LinearSystem<f64>,
    len: usize,
    amplitude: f64,
    z0_scale: f64,
    rng: &mut R,
) -> Trajectory {
    let z0 = DVector::from_fn(sys.n(), |_, _| z0_scale * rng.random_range(-1.0..=1.0));
    let u = DMatrix::from_fn(sys.m(), len, |_, _| amplitude * rng.random_range(-1.0..=1.0));
    let y = sys.simulate(&z0, &u);
    Trajectory {
        u,
        y,
        x: None,
        lifted0: Some(z0),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Representation {
    /// `|H_d g - w|_2` at the least-squares `g`.
    pub residual: f64,
    pub g_norm: f64,
}

/// Least-squares test of `H_d g = w` for a candidate trajectory. Requires lifted excitation of
/// the library (the exact-case hypothesis) and fails otherwise.
pub fn representation_test(
    lib: &TrajectoryLibrary,
    candidate: &Trajectory,
    t_ini: usize,
    n: usize,
) -> Result<Representation> {
    let check = lifted_excitation_check(lib, RANK_TOL)?;
    if !check.passed {
        return Err(Error::RankDeficient {
            block: "H_K".into(),
            rank: check.rank,
            expected: check.required,
        });
    }
    let hd = assemble_hd(lib, t_ini, n)?.stacked();
    representation_residual(&hd, candidate, t_ini, n)
}

/// Residual of `H_d g = w` for a pre-assembled stacked `H_d`.
pub fn representation_residual(
    hd: &DMatrix<f64>,
    candidate: &Trajectory,
    t_ini: usize,
    n: usize,
) -> Result<Representation> {
    let w = stack_trajectory(candidate, t_ini, n)?;
    if w.len() != hd.nrows() {
        return Err(Error::Dimension(format!(
            "candidate has {} rows, H_d has {}",
            w.len(),
            hd.nrows()
        )));
    }
    let g = linalg::lstsq(hd, &w, 1e-12);
    Ok(Representation {
        residual: (hd * &g - w).norm(),
        g_norm: g.norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::OmegaUnits;
    use nalgebra::dmatrix;
    use proptest::prelude::*;
    use rand::Rng;

    fn gen_setup() -> (GeneratorParams<f64>, OperatingRegion<f64>) {
        let p = GeneratorParams::default();
        let r = OperatingRegion {
            omega_units: OmegaUnits::PerUnit,
            ..Default::default()
        };
        (p, r)
    }

    #[test]
    fn hankel_examples() {
        let h = hankel(&dmatrix![1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(h.matrix, dmatrix![1.0, 2.0, 3.0; 2.0, 3.0, 4.0]);
        let seq = dmatrix![1.0, 2.0, 3.0];
        let full = hankel(&seq, 3).unwrap();
        assert_eq!(full.matrix.shape(), (3, 1));
        assert_eq!(full.matrix.column(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
        let c = hankel(&DMatrix::from_element(1, 10, 2.5), 4).unwrap();
        assert!(c.matrix.iter().all(|v| *v == 2.5));
        assert_eq!(linalg::numerical_rank(&c.matrix, RANK_TOL), 1);
        assert!(matches!(hankel(&seq, 4), Err(Error::TooShort { .. })));
        assert!(hankel(&seq, 0).is_err());
    }

    #[test]
    fn pe_examples() {
        assert!(!pe_check(&DMatrix::from_element(1, 20, 1.0), 2, RANK_TOL).unwrap());
        assert!(pe_check(&DMatrix::from_element(1, 5, 0.3), 1, RANK_TOL).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = DMatrix::from_fn(1, 400, |_, _| rng.random_range(-1.0..1.0));
        assert!(pe_check(&u, 28, RANK_TOL).unwrap());
        assert!(pe_check(&u, 2, RANK_TOL).unwrap());
    }

    #[test]
    fn zero_excitation_from_equilibrium_is_constant() {
        let (p, r) = gen_setup();
        let exc = ExcitationConfig {
            amplitude: 0.0,
            init_at_equilibrium: true,
            ..Default::default()
        };
        let lib = collect_library(&p, &r, &exc, 1, 30, LibraryMode::Library, 1).unwrap();
        let t = &lib.trajectories[0];
        for k in 1..t.len() {
            assert!((t.y.column(k) - t.y.column(0)).amax() < 1e-12);
            assert_eq!(t.u[(0, k)], t.u[(0, 0)]);
        }
    }

    #[test]
    fn generator_library_has_lifted_excitation() {
        let (p, r) = gen_setup();
        let len = 10;
        let lib = collect_library(&p, &r, &ExcitationConfig::default(), len + 10, len, LibraryMode::Library, 5)
            .unwrap();
        let chk = lifted_excitation_check(&lib, RANK_TOL).unwrap();
        assert!(chk.passed, "{chk:?}");
        assert_eq!(chk.required, len + 7);
        let short = TrajectoryLibrary::new(lib.trajectories[..len + 6].to_vec(), LibraryMode::Library).unwrap();
        assert!(!lifted_excitation_check(&short, RANK_TOL).unwrap().passed);
        let dup = TrajectoryLibrary::new(vec![lib.trajectories[0].clone(); len + 10], LibraryMode::Library).unwrap();
        assert!(!lifted_excitation_check(&dup, RANK_TOL).unwrap().passed);
    }

    #[test]
    fn lifted_excitation_needs_states() {
        let t = Trajectory::new(DMatrix::zeros(1, 3), DMatrix::zeros(2, 3)).unwrap();
        let lib = TrajectoryLibrary::new(vec![t], LibraryMode::Library).unwrap();
        assert!(matches!(lifted_excitation_check(&lib, RANK_TOL), Err(Error::MissingStates(_))));
    }

    #[test]
    fn excessive_rejection_is_reported() {
        let (p, _) = gen_setup();
        let raw = OperatingRegion::default();
        let err = collect_library(&p, &raw, &ExcitationConfig::default(), 3, 20, LibraryMode::Library, 0);
        assert!(matches!(err, Err(Error::ExcessiveRejection { .. })));
    }

    #[test]
    fn collection_is_deterministic() {
        let (p, r) = gen_setup();
        let exc = ExcitationConfig::default();
        let a = collect_library(&p, &r, &exc, 4, 12, LibraryMode::Library, 9).unwrap();
        let b = collect_library(&p, &r, &exc, 4, 12, LibraryMode::Library, 9).unwrap();
        assert_eq!(a, b);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        a.trajectories[2].write_csv(&mut ca).unwrap();
        b.trajectories[2].write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn single_column_hd() {
        let t = Trajectory::new(dmatrix![1.0, 2.0], dmatrix![3.0, 4.0; 5.0, 6.0]).unwrap();
        let lib = TrajectoryLibrary::new(vec![t], LibraryMode::Library).unwrap();
        let hd = assemble_hd(&lib, 1, 1).unwrap();
        assert_eq!(hd.stacked(), dmatrix![1.0; 3.0; 5.0; 2.0; 4.0; 6.0]);
        assert!(assemble_hd(&lib, 1, 2).is_err());
    }

    #[test]
    fn mosaic_matches_hankel_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = DMatrix::from_fn(1, 30, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(2, 30, |_, _| rng.random_range(-1.0..1.0));
        let t = Trajectory::new(u.clone(), y.clone()).unwrap();
        let lib = TrajectoryLibrary::new(vec![t], LibraryMode::Single).unwrap();
        let (t_ini, n) = (3, 4);
        let hd = assemble_hd(&lib, t_ini, n).unwrap();
        let hu = hankel(&u, t_ini + n).unwrap().matrix;
        let hy = hankel(&y, t_ini + n).unwrap().matrix;
        assert_eq!(hd.up, hu.rows(0, t_ini).into_owned());
        assert_eq!(hd.uf, hu.rows(t_ini, n).into_owned());
        assert_eq!(hd.yp, hy.rows(0, 2 * t_ini).into_owned());
        assert_eq!(hd.yf, hy.rows(2 * t_ini, 2 * n).into_owned());
    }

    #[test]
    fn shuffled_library_permutes_columns() {
        let sys = koopman::build_embedding(&GeneratorParams::<f64>::default());
        let lib = nominal_library(&sys, 6, 5, 0.1, 0.1, 2).unwrap();
        let mut rev = lib.clone();
        rev.trajectories.reverse();
        let a = assemble_hd(&lib, 2, 3).unwrap().stacked();
        let b = assemble_hd(&rev, 2, 3).unwrap().stacked();
        for j in 0..6 {
            assert_eq!(a.column(j), b.column(5 - j));
        }
    }

    #[test]
    fn exact_case_representation() {
        let sys = koopman::build_embedding(&GeneratorParams::<f64>::default());
        let (t_ini, n) = (7, 5);
        let len = t_ini + n;
        let lib = nominal_library(&sys, len + 7 + 5, len, 0.2, 0.1, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let fresh = nominal_trajectory(&sys, len, 0.2, 0.1, &mut rng);
        let rep = representation_test(&lib, &fresh, t_ini, n).unwrap();
        assert!(rep.residual <= 1e-8, "{rep:?}");
        let mut bad = fresh.clone();
        bad.y[(1, 9)] += 0.1;
        assert!(representation_test(&lib, &bad, t_ini, n).unwrap().residual > 1e-3);
        let own = representation_test(&lib, &lib.trajectories[3], t_ini, n).unwrap();
        assert!(own.residual <= 1e-12);
    }

    #[test]
    fn under_excited_library_is_rejected() {
        let sys = koopman::build_embedding(&GeneratorParams::<f64>::default());
        let lib = nominal_library(&sys, 5, 12, 0.2, 0.1, 4).unwrap();
        assert!(matches!(
            representation_test(&lib, &lib.trajectories[0], 7, 5),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn library_persistence() {
        let (p, r) = gen_setup();
        let lib = collect_library(&p, &r, &ExcitationConfig::default(), 3, 8, LibraryMode::Library, 1).unwrap();
        let dir = std::env::temp_dir().join(format!("koopdeepc-lib-{}", std::process::id()));
        let manifest = lib.save(&dir).unwrap();
        assert_eq!(manifest.files.len(), 3);
        assert_eq!(manifest.l_traj, 8);
        let text = fs::read_to_string(dir.join("traj_0001.csv")).unwrap();
        assert!(text.starts_with("k,u0,y0,y1,delta,omega,Eq_prime\n"));
        assert_eq!(text.lines().count(), 9);
        fs::remove_dir_all(&dir).ok();
    }

    proptest! {
        #[test]
        fn prop_hankel_matches_naive(
            dim in 1usize..4,
            len in 1usize..25,
            depth_frac in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let depth = 1 + ((len - 1) as f64 * depth_frac) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq = DMatrix::from_fn(dim, len, |_, _| rng.random_range(-5.0..5.0));
            let h = hankel(&seq, depth).unwrap();
            prop_assert_eq!(h.matrix.shape(), (dim * depth, len - depth + 1));
            for j in 0..len - depth + 1 {
                for k in 0..depth {
                    for i in 0..dim {
                        prop_assert_eq!(h.matrix[(k * dim + i, j)], seq[(i, j + k)]);
                    }
                }
            }
        }

        #[test]
        fn prop_pe_monotone(seed in any::<u64>(), len in 10usize..60, order in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = DMatrix::from_fn(1, len, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
            if pe_check(&u, order, RANK_TOL).unwrap() {
                for k in 1..order {
                    prop_assert!(pe_check(&u, k, RANK_TOL).unwrap());
                }
            }
        }
    }
}
