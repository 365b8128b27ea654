//! Scratch probe: sonar factor counts/weights in the tunnel scenario.
use fathom::estimator::CostTerm;
use fathom::pipeline::{InitMode, Pipeline, PipelineConfig};
use fathom::sim::{presets, LogRecord, NoiseSpec};

fn main() {
    let mut noise = NoiseSpec::nominal(1);
    noise.pixel_sigma = 1.5;
    let scenario = presets::tunnel_sparse(30.0, noise, 201);
    let log = scenario.generate();
    let config = PipelineConfig {
        init_mode: InitMode::GroundTruth,
        use_loop: false,
        use_sonar: true,
        use_depth: true,
        seed: 1,
        ..PipelineConfig::default()
    };
    let mut pipeline = Pipeline::new(config, scenario.calib, scenario.camera, scenario.noise.imu);
    for r in &log.records {
        pipeline.process(r).unwrap();
    }
    let window = pipeline.window_ref().expect("window");
    let mut sonar_terms = 0;
    let mut reproj = 0;
    let mut info_sum = 0.0;
    let values = window.values();
    for term in window.build_cost() {
        match &term {
            CostTerm::SonarRange { .. } => {
                sonar_terms += 1;
                if let Some(f) = window.evaluate_term_pub(&term, &values) {
                    info_sum += f.information[(0, 0)];
                    println!(
                        "sonar: residual {:+.4} info {:.1}",
                        f.residual[0],
                        f.information[(0, 0)]
                    );
                }
            }
            CostTerm::Reprojection { .. } => reproj += 1,
            _ => {}
        }
    }
    println!("window keyframes {}", window.keyframes().len());
    println!("window landmarks {}", window.landmarks().len());
    println!("sonar factors {sonar_terms} (sum info {info_sum:.0}), reprojection terms {reproj}");
    let raw_pings: usize = window.keyframes().iter().map(|k| k.sonar.len()).sum();
    println!("raw pings attached {raw_pings}");
}
