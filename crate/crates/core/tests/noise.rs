use mono3d::energy::EnergyConfig;
use mono3d::refine::{initialize, refine_ablation, SolverOptions, Variant};
use mono3d::scene::{generate_scene, NoiseSpec, SceneParams};
use mono3d::shape::MorphableModel;

const SCENES: u64 = 200;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Median center distance between the starting point and ground truth.
fn init_error(noise: &NoiseSpec) -> f64 {
    let params = SceneParams::default();
    let model = MorphableModel::car_template(params.n_basis);
    let mut errors = Vec::new();
    for i in 0..SCENES {
        let f = generate_scene(&params, noise, 21, i).unwrap();
        for (inst, meas) in f.scene.instances.iter().zip(&f.measurements) {
            let v = initialize(meas, &model).unwrap();
            errors.push((v.translation - inst.pose.translation).norm());
        }
    }
    median(errors)
}

/// Median center distance after full refinement.
fn refined_error(noise: &NoiseSpec) -> f64 {
    let params = SceneParams::default();
    let model = MorphableModel::car_template(params.n_basis);
    let mut errors = Vec::new();
    for i in 0..SCENES {
        let f = generate_scene(&params, noise, 22, i).unwrap();
        for (inst, meas) in f.scene.instances.iter().zip(&f.measurements) {
            let r = refine_ablation(meas, &model, &EnergyConfig::default(), Variant::V4, &SolverOptions::default())
                .unwrap();
            errors.push((r.vars.translation - inst.pose.translation).norm());
        }
    }
    median(errors)
}

#[test]
fn initialization_error_grows_with_every_noise_component() {
    let std = NoiseSpec::standard();
    let components: [(&str, fn(&mut NoiseSpec, f64), f64); 6] = [
        ("landmark_px_sigma", |n, s| n.landmark_px_sigma = s, std.landmark_px_sigma),
        ("landmark_occlusion_rate", |n, s| n.landmark_occlusion_rate = s, std.landmark_occlusion_rate),
        ("box_px_sigma", |n, s| n.box_px_sigma = s, std.box_px_sigma),
        ("theta_sigma_deg", |n, s| n.theta_sigma_deg = s, std.theta_sigma_deg),
        ("sigma_log_sigma", |n, s| n.sigma_log_sigma = s, std.sigma_log_sigma),
        ("depth_rel_sigma", |n, s| n.depth_rel_sigma = s, std.depth_rel_sigma),
    ];
    for (name, set, level) in components {
        let errors: Vec<f64> = [0.0, 1.0, 2.0]
            .iter()
            .map(|k| {
                let mut n = NoiseSpec::zero();
                set(&mut n, level * k);
                init_error(&n)
            })
            .collect();
        assert!(errors.windows(2).all(|w| w[1] >= w[0]), "{name}: {errors:?}");
    }
}

#[test]
fn refined_error_vanishes_with_landmark_noise() {
    let errors: Vec<f64> = [0.0, 0.5, 2.0]
        .iter()
        .map(|s| {
            refined_error(&NoiseSpec {
                landmark_px_sigma: *s,
                ..NoiseSpec::zero()
            })
        })
        .collect();
    // The shape prior biases instances with non-zero coefficients slightly.
    assert!(errors[0] < 0.05, "{errors:?}");
    assert!(errors.windows(2).all(|w| w[1] > w[0]), "{errors:?}");
}
