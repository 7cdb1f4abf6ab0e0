use super::*;
use crate::geom::RigidTransform;
use crate::rig::desk_rig;
use nalgebra::{DMatrix, DVector, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_frame(rig: &RigModel, rng: &mut ChaCha8Rng, t_ns: i64) -> PoseFrame {
    let mut f = PoseFrame::zero(rig, t_ns);
    f.root = RigidTransform::new(
        UnitQuaternion::from_scaled_axis(Vec3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-3.0..3.0),
        )),
        Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.8..1.1),
        ),
    );
    for (i, v) in f.pose.iter_mut().enumerate() {
        let [lo, hi] = rig.limits()[i];
        // some DoFs land outside their limits so the hinge is active
        *v = rng.random_range(lo - 0.2..hi + 0.2);
    }
    f
}

fn perturbed(f: &PoseFrame, rng: &mut ChaCha8Rng, s: f64) -> PoseFrame {
    let d: Vec<f64> = (0..f.pose.len() + 6).map(|_| rng.random_range(-s..s)).collect();
    apply_frame_step(f, &|c| d[c])
}

fn probe_jacobian_error(seed: u64, term: Term) -> f64 {
    let rig = desk_rig();
    let cfg = FusionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity: Vec<f64> = (0..rig.identity_dim()).map(|_| rng.random_range(-0.03..0.03)).collect();
    let frames = [random_frame(&rig, &mut rng, 0), random_frame(&rig, &mut rng, 4_166_667)];
    let prior = [
        perturbed(&frames[0], &mut rng, 0.2),
        perturbed(&frames[1], &mut rng, 0.2),
    ];
    let mut far = || Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0);
    let targets = [[Some(far()), Some(far()), None], [Some(far()), None, Some(far())]];
    let seam = Some(perturbed(&frames[0], &mut rng, 0.1));
    let probe = ResidualProbe {
        rig: &rig,
        cfg: &cfg,
        identity: &identity,
        frames: frames.clone(),
        prior,
        targets,
        foot_weights: [3.0, 7.0],
        seam,
    };
    let (r0, jac) = probe.evaluate(term);
    assert!(!r0.is_empty(), "{term:?} produced no residuals");
    let n = rig.frame_cols();
    let h = 1e-6;
    let mut fd = DMatrix::zeros(r0.len(), 2 * n);
    for c in 0..2 * n {
        let shifted = |sign: f64| {
            let mut p = ResidualProbe {
                frames: frames.clone(),
                prior: probe.prior.clone(),
                seam: probe.seam.clone(),
                ..probe
            };
            let (k, col) = (c / n, c % n);
            p.frames[k] = apply_frame_step(&frames[k], &|j| if j == col { sign * h } else { 0.0 });
            p.evaluate(term).0
        };
        let col: DVector<f64> = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        fd.set_column(c, &col);
    }
    let scale = fd.amax().max(jac.amax()).max(1.0);
    (fd - jac).amax() / scale
}

#[test]
fn every_term_matches_finite_differences() {
    for term in ALL_TERMS {
        for seed in 0..3 {
            let e = probe_jacobian_error(seed, term);
            assert!(e < 1e-5, "{term:?} seed {seed}: {e}");
        }
    }
}

#[test]
fn huber_residual_squares_to_huber_loss() {
    let delta = 0.05;
    for s in [0.01, 0.05, 0.2, 3.0] {
        let e = Vec3::new(0.6, -0.8, 0.0) * s;
        let (r, j) = huber_residual(&e, delta);
        let loss = if s <= delta {
            s * s
        } else {
            2.0 * delta * s - delta * delta
        };
        assert!((r.norm_squared() - loss).abs() < 1e-12);
        let h = 1e-7;
        for a in 0..3 {
            let mut d = Vec3::zeros();
            d[a] = h;
            let col = (huber_residual(&(e + d), delta).0 - huber_residual(&(e - d), delta).0) / (2.0 * h);
            assert!((col - j.column(a)).norm() < 1e-6);
        }
    }
}

#[test]
fn alignment_residual_rotates_a_onto_b() {
    let a = Vec3::new(0.3, -0.2, 0.9).normalize();
    let b = Vec3::new(-0.1, 0.4, 0.8).normalize();
    let (r, _) = alignment_residual(&a, &b);
    let rot = UnitQuaternion::from_scaled_axis(r);
    assert!((rot * a - b).norm() < 1e-12);
    assert!(alignment_residual(&a, &a).0.norm() < 1e-12);
}

#[test]
fn adaptive_weight_examples() {
    let unit = FusionConfig {
        lambda_0: 1.0,
        lambda_alpha: 9.0,
        ..FusionConfig::default()
    };
    assert_eq!(adaptive_foot_weight(0.0, &unit).unwrap(), 10.0);
    let cfg = FusionConfig::default();
    assert_eq!(
        adaptive_foot_weight(0.0, &cfg).unwrap(),
        cfg.lambda_0 + cfg.lambda_alpha
    );
    let w = adaptive_foot_weight(cfg.v_sigma, &cfg).unwrap();
    assert!((w - (cfg.lambda_0 + cfg.lambda_alpha / std::f64::consts::E)).abs() < 1e-12);
    assert!((adaptive_foot_weight(10.0, &cfg).unwrap() - cfg.lambda_0).abs() < 1e-12);
    assert!(matches!(
        adaptive_foot_weight(-0.1, &cfg),
        Err(Error::NegativeVelocity(_))
    ));
    let mut prev = f64::INFINITY;
    for k in 0..50 {
        let w = adaptive_foot_weight(k as f64 * 0.01, &cfg).unwrap();
        assert!(w <= prev);
        prev = w;
    }
}

fn walking(rig: &RigModel, n: usize, speed: f64) -> MotionSequence {
    let frames = (0..n)
        .map(|k| {
            let mut f = PoseFrame::zero(rig, k as i64 * 4_166_667);
            f.root.translation = Vec3::new(speed * k as f64 / 240.0, 0.0, 0.95);
            f
        })
        .collect();
    MotionSequence {
        identity: rig.zero_identity(),
        frames,
        rate_hz: 240.0,
    }
}

#[test]
fn derived_contacts_follow_heel_speed() {
    let rig = desk_rig();
    let still = derive_contacts(&walking(&rig, 20, 0.0), &rig, 0.05).unwrap();
    assert!(still.labels.iter().all(|l| l[0] && l[1]));
    assert_eq!(still.provenance, ContactProvenance::DerivedFromVelocity);
    let moving = derive_contacts(&walking(&rig, 20, 1.0), &rig, 0.05).unwrap();
    assert!(moving.labels.iter().all(|l| !l[0] && !l[1]));
}

fn head_and_wrists(rig: &RigModel, m: &MotionSequence) -> [Trajectory; 3] {
    let named = rig.named();
    let joints = [named.head, named.left_wrist, named.right_wrist];
    let fk: Vec<_> = m
        .frames
        .iter()
        .map(|f| crate::rig::forward_kinematics(rig, &m.identity, f).unwrap())
        .collect();
    joints.map(|j| {
        let samples = m
            .frames
            .iter()
            .zip(&fk)
            .map(|(f, t)| crate::geom::PoseSample {
                t_ns: f.t_ns,
                pose: t[j],
            })
            .collect();
        Trajectory::new("world", samples).unwrap()
    })
}

#[test]
fn exact_inputs_are_a_fixed_point() {
    let rig = desk_rig();
    let m = walking(&rig, 40, 0.0);
    let [head, wl, wr] = head_and_wrists(&rig, &m);
    let inputs = FusionInputs {
        theta_rigid: &m,
        theta_x: &m,
        head_traj: &head,
        wrist_trajs: [&wl, &wr],
        contacts: None,
    };
    let (out, rep) = fuse_sequence(&inputs, &rig, &FusionConfig::default()).unwrap();
    assert!(rep.initial.total() < 1e-20);
    for (a, b) in out.frames.iter().zip(&m.frames) {
        assert!(a.root.translation_distance_to(&b.root) < 1e-12);
        assert!(a.pose.iter().zip(&b.pose).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}

#[test]
fn fusion_pulls_drifted_root_onto_trajectories_and_descends() {
    let rig = desk_rig();
    let truth = walking(&rig, 120, 0.0);
    let [head, wl, wr] = head_and_wrists(&rig, &truth);
    let mut drifted = truth.clone();
    for (k, f) in drifted.frames.iter_mut().enumerate() {
        f.root.translation += Vec3::new(0.0005 * k as f64, 0.02, 0.0);
    }
    let cfg = FusionConfig {
        batch_size: 50,
        ..FusionConfig::default()
    };
    let inputs = FusionInputs {
        theta_rigid: &drifted,
        theta_x: &truth,
        head_traj: &head,
        wrist_trajs: [&wl, &wr],
        contacts: None,
    };
    let (out, rep) = fuse_sequence(&inputs, &rig, &cfg).unwrap();
    assert!(rep.batches.len() >= 3);
    for b in &rep.batches {
        assert!(b.lm.accepted_costs.windows(2).all(|w| w[1] <= w[0]));
    }
    assert!(rep.final_.total() < rep.initial.total());
    let err: f64 = out
        .frames
        .iter()
        .zip(&truth.frames)
        .map(|(a, b)| a.root.translation_distance_to(&b.root))
        .fold(0.0, f64::max);
    assert!(err < 0.01, "{err}");
}

#[test]
fn mismatched_inputs_are_rejected() {
    let rig = desk_rig();
    let m = walking(&rig, 10, 0.0);
    let short = walking(&rig, 9, 0.0);
    let [head, wl, wr] = head_and_wrists(&rig, &m);
    let inputs = FusionInputs {
        theta_rigid: &m,
        theta_x: &short,
        head_traj: &head,
        wrist_trajs: [&wl, &wr],
        contacts: None,
    };
    assert!(matches!(
        fuse_sequence(&inputs, &rig, &FusionConfig::default()),
        Err(Error::FrameMisalignment(_))
    ));
    let labels = ContactLabels::new(vec![[true; 2]; 3], ContactProvenance::Provided);
    let inputs = FusionInputs {
        theta_x: &m,
        contacts: Some(&labels),
        ..inputs
    };
    assert!(matches!(
        fuse_sequence(&inputs, &rig, &FusionConfig::default()),
        Err(Error::FrameMisalignment(_))
    ));
    let bad = FusionConfig {
        lambda_x: -1.0,
        ..FusionConfig::default()
    };
    assert!(fuse_sequence(&inputs, &rig, &bad).is_err());
}
