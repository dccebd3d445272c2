use nalgebra::{DMatrix, DVector};
use qpgp_ilc::ilc::{apply_direction, Plant};
use qpgp_ilc::sim::*;

fn ff(plant: &dyn Plant, v: f64) -> DVector<f64> {
    DVector::from_element(plant.m() * plant.p(), v)
}

#[test]
fn ideal_vehicle_follows_the_raceline_on_feedback_alone() {
    let plant = VehiclePlant::new(VehicleConfig::ideal(), 200).unwrap();
    let r = plant.run(&ff(&plant, 0.0), 1, 0).unwrap();
    // Pure pursuit one sample ahead only cuts corners slightly.
    assert!(r.error.max_norm() < 0.05, "{}", r.error.max_norm());
    assert_eq!(r.path.len(), 200);
}

#[test]
fn corrupted_vehicle_drifts_off_without_feedforward() {
    let nominal = VehiclePlant::new(VehicleConfig::default(), 200).unwrap();
    let ideal = VehiclePlant::new(VehicleConfig::ideal(), 200).unwrap();
    let e_nom = nominal.run(&ff(&nominal, 0.0), 1, 0).unwrap().error.rms();
    let e_ideal = ideal.run(&ff(&ideal, 0.0), 1, 0).unwrap().error.rms();
    assert!(e_nom > 10.0 * e_ideal);
}

#[test]
fn vehicle_noise_is_redrawn_every_iteration() {
    let plant = VehiclePlant::new(VehicleConfig::default(), 100).unwrap();
    let u = ff(&plant, 0.0);
    let a = plant.run(&u, 1, 4).unwrap();
    assert_ne!(a.error, plant.run(&u, 2, 4).unwrap().error);
    assert_eq!(a.error, plant.run(&u, 1, 4).unwrap().error);
    let quiet = VehiclePlant::new(VehicleConfig { noise_variance: 0.0, ..VehicleConfig::default() }, 100).unwrap();
    assert_eq!(quiet.run(&u, 1, 4).unwrap().error, quiet.run(&u, 2, 9).unwrap().error);
}

#[test]
fn feedforward_past_the_bound_changes_nothing() {
    let plant = VehiclePlant::new(VehicleConfig::default(), 100).unwrap();
    let b = plant.input_bound().unwrap();
    for sign in [1.0, -1.0] {
        let at = plant.run(&ff(&plant, sign * b), 1, 0).unwrap();
        let past = plant.run(&ff(&plant, sign * 3.0 * b), 1, 0).unwrap();
        assert_eq!(at.error, past.error);
    }
}

#[test]
fn more_left_feedforward_raises_the_car_left() {
    // Positive error asks for more steering: adding steering lowers it.
    let plant = VehiclePlant::new(VehicleConfig { noise_variance: 0.0, ..VehicleConfig::default() }, 100).unwrap();
    let lo = plant.run(&ff(&plant, 0.0), 1, 0).unwrap();
    let mut u = ff(&plant, 0.0);
    u[10] = 0.05;
    let hi = plant.run(&u, 1, 0).unwrap();
    for t in 0..10 {
        assert_eq!(lo.error.get(0, t), hi.error.get(0, t));
    }
    assert!(hi.error.get(0, 11) < lo.error.get(0, 11));
}

#[test]
fn exact_arm_tracks_with_inverse_kinematics() {
    let plant = ManipPlant::new(ManipConfig::ideal(), 100).unwrap();
    let r = plant.run(&plant.initial_input(), 1, 0).unwrap();
    assert!(r.error.max_norm() < 1e-9);
    let biased = ManipPlant::new(ManipConfig::default(), 100).unwrap();
    assert!(biased.run(&biased.initial_input(), 1, 0).unwrap().error.norm() > 0.0);
}

#[test]
fn arm_error_is_reference_minus_end_effector() {
    let config = ManipConfig::ideal();
    let plant = ManipPlant::new(config.clone(), 20).unwrap();
    let mut u = plant.initial_input();
    u[0] += 0.1;
    let r = plant.run(&u, 1, 0).unwrap();
    let th = [u[0], u[20], u[40]];
    let ee = manip_fk(th, config.links).end_effector();
    let refp = plant.reference().points[0];
    assert!((r.error.get(0, 0) - (refp[0] - ee[0])).abs() < 1e-12);
    assert!((r.error.get(1, 0) - (refp[1] - ee[1])).abs() < 1e-12);
}

#[test]
fn disturbance_switches_on_halfway_and_stays() {
    let base = ManipConfig { bias_noise_std: [0.0; 3], ..ManipConfig::default() };
    let clean = ManipPlant::new(base.clone(), 40).unwrap();
    let hit = ManipPlant::new(
        ManipConfig { disturbance: Some(Disturbance { iteration: 3, ..Disturbance::default() }), ..base },
        40,
    )
    .unwrap();
    let u = clean.initial_input();
    let run = |p: &ManipPlant, i| p.run(&u, i, 0).unwrap().error;
    assert_eq!(run(&clean, 2), run(&hit, 2));
    let (c3, h3) = (run(&clean, 3), run(&hit, 3));
    for t in 0..20 {
        assert_eq!((c3.get(0, t), c3.get(1, t)), (h3.get(0, t), h3.get(1, t)));
    }
    assert!((20..40).all(|t| c3.get(0, t) != h3.get(0, t)));
    let (c4, h4) = (run(&clean, 4), run(&hit, 4));
    assert!((0..40).all(|t| c4.get(0, t) != h4.get(0, t)));
}

#[test]
fn arm_direction_uses_the_pseudo_inverse() {
    let plant = ManipPlant::new(ManipConfig::default(), 10).unwrap();
    let u = plant.initial_input();
    let signal = DVector::from_fn(20, |k, _| 0.01 * (k as f64 + 1.0));
    let d = apply_direction(&plant, &u, &signal).unwrap();
    for t in 0..10 {
        let th = [u[t], u[10 + t], u[20 + t]];
        let want = damped_pinv(&manip_jacobian(th, plant.config().links), PINV_DAMPING)
            * nalgebra::Vector2::new(signal[t], signal[10 + t]);
        for k in 0..3 {
            assert!((d[k * 10 + t] - want[k]).abs() < 1e-15);
        }
    }
    let g = plant.lifted_jacobian(&u).unwrap();
    assert_eq!(g.shape(), (20, 30));
}

#[test]
fn linear_plant_noise_has_the_requested_covariance() {
    use qpgp_ilc::kernels::{build_cov_matrix, KernelFamily};
    let p = 4;
    let kern = build_cov_matrix(&KernelFamily::Rbf { variance: 0.5, lengthscale: 1.5 }, p).unwrap();
    let plant = LinearPlant::new(DMatrix::identity(p, p), p, DVector::zeros(p), DVector::zeros(p))
        .unwrap()
        .with_noise(&kern)
        .unwrap();
    let u = DVector::zeros(p);
    let n = 20_000;
    let mut cov = DMatrix::zeros(p, p);
    for i in 1..=n {
        let mut policy = qpgp_ilc::ilc::FixedInput::new(u.clone(), p).unwrap();
        let e = plant.rollout(i, 1, &mut policy).unwrap().error.into_vector();
        cov += &e * e.transpose();
    }
    cov /= n as f64;
    // Entries of a Wishart estimate have sd about 0.5 sqrt(2 / n).
    assert!((cov - kern.values()).amax() < 0.03);
}
