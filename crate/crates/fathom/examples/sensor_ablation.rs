//! Paired sensor ablations: what depth and sonar each buy.
//!
//! Two experiments:
//! - depth off/on under a strong vertical accelerometer bias random walk
//!   (the drift mode a pressure sensor pins);
//! - sonar off/on in a feature-starved tunnel (the regime where acoustic
//!   ranges carry real weight).
//!
//! Run with `cargo run --release --example sensor_ablation`.

use fathom::eval::{apply_alignment, compute_ate_rmse, per_axis_rmse, umeyama_align};
use fathom::pipeline::{InitMode, Pipeline, PipelineConfig};
use fathom::sim::{presets, NoiseSpec};
use nalgebra::Vector3;

fn replay(
    scenario: &fathom::sim::Scenario,
    use_sonar: bool,
    use_depth: bool,
    seed: u64,
) -> (f64, Vector3<f64>) {
    let log = scenario.generate();
    let config = PipelineConfig {
        init_mode: InitMode::GroundTruth,
        use_loop: false,
        use_sonar,
        use_depth,
        seed,
        ..PipelineConfig::default()
    };
    let out = Pipeline::replay(config, scenario.calib, scenario.camera, scenario.noise.imu, &log.records)
        .expect("replay");
    let alignment = umeyama_align(&out.estimate, &out.truth, false).expect("alignment");
    let aligned = apply_alignment(&out.estimate, &alignment);
    let rmse = compute_ate_rmse(&aligned, &out.truth).expect("rmse");
    let per_axis = per_axis_rmse(&aligned, &out.truth).expect("rmse");
    (rmse, per_axis)
}

fn main() {
    println!("== depth ablation: vertical bias random walk ==");
    for seed in 0..3u64 {
        let mut noise = NoiseSpec::nominal(seed);
        noise.accel_bias_walk = Vector3::new(3e-3, 3e-3, 0.1);
        noise.imu.sigma_ba = 0.1;
        let scenario = presets::orbit(60.0, noise, seed + 100);
        let (_, off) = replay(&scenario, false, false, seed);
        let (_, on) = replay(&scenario, false, true, seed);
        println!(
            "seed {seed}: z-rmse depth-off {:.4} m, depth-on {:.4} m ({:.0}% reduction)",
            off.z,
            on.z,
            100.0 * (1.0 - on.z / off.z)
        );
    }

    println!();
    println!("== sonar ablation: sparse-vision tunnel ==");
    for seed in 0..3u64 {
        let mut noise = NoiseSpec::nominal(seed);
        noise.pixel_sigma = 1.5;
        let scenario = presets::tunnel_sparse(50.0, noise, seed + 200);
        let (off, _) = replay(&scenario, false, true, seed);
        let (on, _) = replay(&scenario, true, true, seed);
        println!(
            "seed {seed}: rmse sonar-off {:.4} m, sonar-on {:.4} m ({:.0}% reduction)",
            off,
            on,
            100.0 * (1.0 - on / off)
        );
    }
}
