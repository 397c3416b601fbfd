use koopdeepc::bounds;
use koopdeepc::data::{self, ExcitationConfig, LibraryMode};
use koopdeepc::koopman::{self, CertifyOptions, Equilibrium};
use koopdeepc::mpc::{self, MpcConfig, MpcData};
use koopdeepc::plant::{self, GeneratorParams, OmegaUnits, OperatingRegion, State};
use koopdeepc::{GeneratorParams64, OperatingRegion64};
use nalgebra::dvector;

#[test]
fn certificate_agrees_across_scalar_types() {
    let p32 = GeneratorParams::<f32>::default();
    let r32 = OperatingRegion::<f32>::default();
    let c32 = koopman::error_constants(&p32, &r32).to_f64();
    let c64 = koopman::error_constants(&GeneratorParams64::default(), &OperatingRegion64::default());
    approx::assert_relative_eq!(c32.eps_a, c64.eps_a, max_relative = 1e-6);
    approx::assert_relative_eq!(c32.c0, c64.c0, max_relative = 1e-5);
    let e32 = koopman::build_embedding(&p32);
    let e64 = koopman::build_embedding(&GeneratorParams64::default());
    for (a, b) in e32.a.iter().zip(e64.a.iter()) {
        assert!((*a as f64 - b).abs() <= 1e-6 * b.abs().max(1.0));
    }
}

#[test]
fn certified_region_feeds_bound_ladder() {
    let p = GeneratorParams64::default();
    let r = OperatingRegion64::default();
    let emb = koopman::build_embedding(&p);
    let eq = Equilibrium::new(&p, r.delta_s).unwrap();
    let cert = koopman::error_constants(&p, &r);
    let opts = CertifyOptions {
        n_samples: 2000,
        seed: 11,
        include_corners: true,
        keep_samples: false,
    };
    let rep = koopman::certify(&p, &r, &emb, &eq, &cert, &opts).unwrap();
    assert!(rep.passed());
    let bi = bounds::generator_bound_inputs(&p, &r, 14, 11).unwrap();
    let b = bounds::bound_report(&bi).unwrap();
    assert!(b.ordered());
    // The loose level dominates the largest certified residual propagated over one step.
    assert!(b.eps_bar >= b.norm_c * cert.c0);
}

#[test]
fn measured_data_recovers_small_angle_offset() {
    let p = GeneratorParams64::default();
    let r = OperatingRegion64 {
        omega_units: OmegaUnits::PerUnit,
        ..Default::default()
    };
    let exc = ExcitationConfig {
        init_at_equilibrium: true,
        ..Default::default()
    };
    let lib = data::collect_library(&p, &r, &exc, 1, 300, LibraryMode::Single, 4).unwrap();
    let traj = &lib.trajectories[0];
    assert!(data::pe_check(&traj.u, 28, data::RANK_TOL).unwrap());
    let (xs, us) = plant::compute_equilibrium(&p, r.delta_s).unwrap();
    let ys = plant::output(&xs, &p);
    let cfg = MpcConfig::new(
        dvector![us],
        dvector![ys.omega_tilde, ys.p_e],
        dvector![r.u_min],
        dvector![r.u_max],
        0.5,
    );
    let d = MpcData::from_trajectory(traj, cfg.depth()).unwrap();
    let x0 = State::new(r.delta_s + 0.05, p.omega_s, xs.eq_prime);
    let log = mpc::receding_horizon_run(&p, &r, &cfg, &d, &x0, 60).unwrap();
    assert!(log.failure.is_none() && log.left_region_at.is_none());
    assert_eq!(log.slack_bound_violations, 0);
    let dist = log.distances();
    let peak = dist.iter().cloned().fold(0.0, f64::max);
    assert!(log.final_dist < 0.5 * peak && log.final_dist < 0.05, "final {} peak {}", log.final_dist, peak);
}

#[test]
fn config_types_reject_unknown_fields() {
    let ok: GeneratorParams64 = serde_json::from_str(r#"{"dt": 0.001}"#).unwrap();
    assert_eq!(ok.dt, 0.001);
    assert_eq!(ok.h, GeneratorParams64::default().h);
    assert!(serde_json::from_str::<GeneratorParams64>(r#"{"dt": 0.001, "bogus": 1}"#).is_err());
    assert!(serde_json::from_str::<OperatingRegion64>(r#"{"omega_units": "furlongs"}"#).is_err());
}
