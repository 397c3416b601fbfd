//! Experiment configuration, read from JSON.

use std::path::{Path, PathBuf};

use koopdeepc::data::ExcitationConfig;
use koopdeepc::mpc::SlackMode;
use koopdeepc::plant::OmegaUnits;
use koopdeepc::{GeneratorParams64, OperatingRegion64};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Certify,
    Bounds,
    Represent,
    ClosedLoop,
    Sweep,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Certify => "certify",
            ExperimentKind::Bounds => "bounds",
            ExperimentKind::Represent => "represent",
            ExperimentKind::ClosedLoop => "closed-loop",
            ExperimentKind::Sweep => "sweep",
        }
    }

    pub fn randomized(self) -> bool {
        !matches!(self, ExperimentKind::Bounds)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifySection {
    pub n_samples: usize,
    pub include_corners: bool,
    /// Also write the per-sample CSV.
    pub write_samples: bool,
}

impl Default for CertifySection {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            include_corners: true,
            write_samples: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    /// Relative singular-value cutoff for rank decisions.
    pub rank_tol: f64,
    /// Steps of Markov-parameter comparison for the minimal realization.
    pub markov_steps: usize,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            rank_tol: 1e-9,
            markov_steps: 50,
        }
    }
}

/// Inputs of the fixed-point radius `r = c |x0 - x_s| + kappa eps_bar(r)^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointSection {
    pub c: f64,
    pub x0_dev: f64,
    pub kappa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    pub l_pred: usize,
    /// Grid points per state axis for the diameter of the lifted box.
    pub n_grid: usize,
    /// Horizons of the ladder table.
    pub ladder: Vec<usize>,
    pub fixed_point: Option<FixedPointSection>,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            l_pred: 14,
            n_grid: 21,
            ladder: (2..=50).collect(),
            fixed_point: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepresentSection {
    pub t_ini: usize,
    pub n: usize,
    /// Library size; needs at least `m (t_ini + n) + 7` for lifted excitation.
    pub n_traj: usize,
    pub amplitude: f64,
    pub z0_scale: f64,
    pub n_test: usize,
    /// Size of the output perturbation of corrupted candidates.
    pub corrupt_scale: f64,
    pub exact_tol: f64,
    pub corrupt_min: f64,
}

impl Default for RepresentSection {
    fn default() -> Self {
        Self {
            t_ini: 7,
            n: 7,
            n_traj: 30,
            amplitude: 1.0,
            z0_scale: 0.1,
            n_test: 20,
            corrupt_scale: 0.05,
            exact_tol: 1e-8,
            corrupt_min: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Length of the single measured trajectory.
    pub len: usize,
    pub excitation: ExcitationConfig,
    /// Speed units of the region used for data collection and the closed loop.
    pub omega_units: OmegaUnits,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            len: 400,
            excitation: ExcitationConfig {
                init_at_equilibrium: true,
                ..Default::default()
            },
            omega_units: OmegaUnits::PerUnit,
        }
    }
}

/// Which bound feeds the slack constraint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsBarSource {
    Loose,
    Tight,
    Offset,
    Value(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSection {
    pub l_pred: usize,
    pub n_z: usize,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub lambda_alpha: f64,
    pub lambda_sigma: f64,
    pub eps_bar: EpsBarSource,
    pub slack: SlackMode,
    /// Subtract the setpoint from the data before building the Hankel matrices.
    pub center_data: bool,
    /// Initial rotor-angle offset from `delta_s` (rad).
    pub delta0_offset: f64,
    /// Simulated time (s); the iteration count is `round(duration / (n_z dt))`.
    pub duration: f64,
    pub polish: bool,
    /// Extra initial angle offsets probed for convergence; labels only, no assertions.
    pub basin_offsets: Vec<f64>,
}

impl Default for MpcSection {
    fn default() -> Self {
        Self {
            l_pred: 14,
            n_z: 7,
            q_diag: vec![10.0, 1.0],
            r_diag: vec![0.1],
            lambda_alpha: 1e-4,
            lambda_sigma: 1e3,
            eps_bar: EpsBarSource::Loose,
            slack: SlackMode::default(),
            center_data: false,
            delta0_offset: 0.3,
            duration: 8.0,
            polish: true,
            basin_offsets: Vec::new(),
        }
    }
}

impl MpcSection {
    pub fn iterations(&self, dt: f64) -> usize {
        (self.duration / (self.n_z as f64 * dt)).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Dt,
    LPred,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub param: SweepParam,
    pub values: Vec<f64>,
    /// Run the closed loop at every point.
    pub closed_loop: bool,
    /// Allowed relative deviation of `eps_A` from linear scaling in `dt`.
    pub eps_a_scaling_tol: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            param: SweepParam::Dt,
            values: vec![0.005, 0.0025, 0.00125],
            closed_loop: true,
            eps_a_scaling_tol: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub kind: Option<ExperimentKind>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub plant: GeneratorParams64,
    pub region: OperatingRegion64,
    pub embedding: EmbeddingSection,
    pub certify: CertifySection,
    pub bounds: BoundsSection,
    pub represent: RepresentSection,
    pub data: DataSection,
    pub mpc: MpcSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: None,
            seed: None,
            out_dir: None,
            plant: GeneratorParams64::default(),
            region: OperatingRegion64::default(),
            embedding: EmbeddingSection::default(),
            certify: CertifySection::default(),
            bounds: BoundsSection::default(),
            represent: RepresentSection::default(),
            data: DataSection::default(),
            mpc: MpcSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses JSON, reporting schema errors with the offending field path.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        serde_path_to_error::deserialize(de).map_err(|e| HarnessError::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json_str(&s)
    }

    pub fn region_closed_loop(&self) -> OperatingRegion64 {
        OperatingRegion64 {
            omega_units: self.data.omega_units,
            ..self.region
        }
    }

    /// Checks cross-section consistency for `kind`.
    pub fn validate(&self, kind: ExperimentKind) -> Result<()> {
        if let Some(k) = self.kind {
            if k != kind {
                return Err(HarnessError::Config {
                    path: "kind".into(),
                    message: format!("config is for `{}`, requested `{}`", k.name(), kind.name()),
                });
            }
        }
        if kind.randomized() && self.seed.is_none() {
            return Err(HarnessError::Config {
                path: "seed".into(),
                message: format!("`{}` is randomized and needs a seed", kind.name()),
            });
        }
        self.plant.validate()?;
        self.region.validate()?;
        if self.mpc.q_diag.len() != 2 || self.mpc.r_diag.len() != 1 {
            return Err(HarnessError::Config {
                path: "mpc".into(),
                message: "q_diag needs 2 entries and r_diag 1".into(),
            });
        }
        if !(self.mpc.duration > 0.0) {
            return Err(HarnessError::Config {
                path: "mpc.duration".into(),
                message: "must be positive".into(),
            });
        }
        if kind == ExperimentKind::Sweep && self.sweep.values.is_empty() {
            return Err(HarnessError::Config {
                path: "sweep.values".into(),
                message: "empty sweep".into(),
            });
        }
        Ok(())
    }
}
