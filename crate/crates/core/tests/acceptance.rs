//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs with a custom harness so every line is printed even when passing.
//! Positional arguments select criteria by number (`-- 5 6`).

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use egofuse::align::{estimate_handeye, HandEyeResult, DEFAULT_PAIR_SPACING_NS};
use egofuse::fuse::{
    apply_frame_step, ContactLabels, ContactProvenance, FusionConfig, FusionReport, ResidualProbe, ALL_TERMS,
};
use egofuse::geom::{CameraModel, PoseSample, RigidTransform, Trajectory, Vec3};
use egofuse::ident::{
    default_lambda_grid, loocv_error, loocv_error_brute_force, read_training_csv, write_training_csv,
    IdentityRegressor, IdentitySample,
};
use egofuse::io::{
    read_json, read_json_lines, read_motion, read_points_csv, read_trajectory_csv, write_json, write_json_lines,
    write_motion, write_points_csv, write_trajectory_csv,
};
use egofuse::meshxfer::{
    apply_mesh_step, build_correspondence, mesh_residuals, FitConfig, MeshTerm, SurfaceCorrespondence,
};
use egofuse::pipeline::{
    convert_motion, outputs, run_pipeline, write_conversion_assets, PipelineConfig, PipelineReport, CORRESPONDENCE,
    TARGET_RIG,
};
use egofuse::quality::{
    capsule_depth, downsample, foot_sliding_percent, self_penetration_error, wrist_distance_error, CollisionPrimitive,
};
use egofuse::retarget::{RetargetMap, RetargetReport, SourceMotion};
use egofuse::rig::{desk_rig, forward_kinematics, skin_mesh, MotionSequence, PoseFrame, RigData, RigModel};
use egofuse::scene::{
    bounds_of_points, compute_2dbb, compute_visibility, iou3d, project_scene, surface_point, Box2, Category, Obb3,
    ProjectionRecord, Reason, SceneAnnotation, VisibilityParams,
};
use egofuse::synth::{
    files, generate_scenario, handeye_trajectories, HandEyeSpec, ScenarioMeta, ScenarioSpec, Subject,
};
use nalgebra::{DMatrix, DVector, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Result of one criterion: pass flag and a one-line summary.
struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = fn() -> Outcome;

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, Criterion); 11] = [
        ("hand-eye recovery", handeye_recovery),
        ("fusion recovery", fusion_recovery),
        ("jacobian correctness", jacobian_correctness),
        ("monotone descent", monotone_descent),
        ("iou oracle", iou_oracle),
        ("2d box oracle", two_d_box_oracle),
        ("loocv exactness", loocv_exactness),
        ("lbs/fk invariants", lbs_fk_invariants),
        ("mesh conversion self-consistency", mesh_self_consistency),
        ("metric oracles", metric_oracles),
        ("determinism and round trips", determinism),
    ];
    // panics are reported on the criterion line
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let n = k + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n:2} {verdict} [{name}] {} ({:.1} s)",
            outcome.detail,
            t.elapsed().as_secs_f64()
        );
        if !outcome.pass {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_rotation(r: &mut ChaCha8Rng, max_angle: f64) -> UnitQuaternion<f64> {
    let axis = Vec3::new(
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
    );
    let axis = if axis.norm() < 1e-6 {
        Vec3::z()
    } else {
        axis.normalize()
    };
    UnitQuaternion::from_scaled_axis(axis * r.random_range(0.0..max_angle))
}

fn random_vec(r: &mut ChaCha8Rng, s: f64) -> Vec3 {
    Vec3::new(r.random_range(-s..s), r.random_range(-s..s), r.random_range(-s..s))
}

// 1

fn handeye_errors(he: &HandEyeResult, truth: &RigidTransform) -> (f64, f64) {
    let x = &he.device_from_headsegment;
    (x.rotation_angle_to(truth), x.translation_distance_to(truth))
}

fn handeye_recovery() -> Outcome {
    let t = Instant::now();
    let mut worst = [[0.0f64; 2]; 2];
    for (k, (trans, rot)) in [(0.0, 0.0), (1e-3, 0.1f64.to_radians())].into_iter().enumerate() {
        let spec = HandEyeSpec {
            translation_noise_m: trans,
            rotation_noise_rad: rot,
            ..HandEyeSpec::default()
        };
        for seed in 0..20 {
            let tr = handeye_trajectories(&spec, seed);
            let he = estimate_handeye(&tr.device, &tr.head, DEFAULT_PAIR_SPACING_NS).expect("hand-eye solve");
            let (r, p) = handeye_errors(&he, &tr.x_true);
            worst[k] = [worst[k][0].max(r), worst[k][1].max(p)];
        }
    }
    let elapsed = t.elapsed();
    let pass = worst[0][0] < 1e-7
        && worst[0][1] < 1e-7
        && worst[1][0] < 0.5f64.to_radians()
        && worst[1][1] < 5e-3
        && elapsed < Duration::from_secs(5);
    Outcome::new(
        pass,
        format!(
            "noiseless max {:.1e} rad / {:.1e} m; noisy max {:.3} deg / {:.2} mm; {:.2} s",
            worst[0][0],
            worst[0][1],
            worst[1][0].to_degrees(),
            worst[1][1] * 1e3,
            elapsed.as_secs_f64()
        ),
    )
}

// 2 and 4 share the drift runs.

struct DriftRun {
    seed: u64,
    report: PipelineReport,
    seconds: f64,
}

fn drift_runs() -> &'static [DriftRun] {
    static RUNS: std::sync::OnceLock<Vec<DriftRun>> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| {
        let spec = ScenarioSpec {
            with_scene: false,
            ..ScenarioSpec::default()
        };
        (1..=5)
            .map(|seed| {
                let dir = tempfile::tempdir().expect("tempdir");
                let scenario = generate_scenario(&spec, seed).expect("scenario");
                scenario.write_to(dir.path(), &desk_rig()).expect("write scenario");
                let t = Instant::now();
                let cfg = PipelineConfig::for_scenario(dir.path(), &dir.path().join("out"));
                let report = run_pipeline(&cfg).expect("pipeline");
                DriftRun {
                    seed,
                    report,
                    seconds: t.elapsed().as_secs_f64(),
                }
            })
            .collect()
    })
}

fn fusion_recovery() -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    for run in drift_runs() {
        let (pre, post) = (&run.report.pre_fusion, &run.report.post_fusion);
        let wrist = post.wrist_mean_cm / pre.wrist_mean_cm;
        let sliding = match (pre.sliding_percent, post.sliding_percent) {
            (Some(a), Some(b)) if a > 0.0 => b / a,
            _ => f64::NAN,
        };
        let ok =
            wrist <= 0.40 && sliding <= 0.33 && post.penetration_mean <= pre.penetration_mean && run.seconds < 180.0;
        pass &= ok;
        lines.push(format!(
            "seed {}: wrist {:.2}->{:.2} cm ({:.0}%), sliding {:.1}->{:.1}% ({:.0}%), pen {:.4}->{:.4}, {:.0} s",
            run.seed,
            pre.wrist_mean_cm,
            post.wrist_mean_cm,
            100.0 * wrist,
            pre.sliding_percent.unwrap_or(f64::NAN),
            post.sliding_percent.unwrap_or(f64::NAN),
            100.0 * sliding,
            pre.penetration_mean,
            post.penetration_mean,
            run.seconds
        ));
    }
    Outcome::new(pass, lines.join("; "))
}

fn monotone_descent() -> Outcome {
    let mut violations = 0;
    let mut steps = 0;
    for run in drift_runs() {
        let fusion: &FusionReport = run.report.fusion.as_ref().expect("fusion ran");
        for b in &fusion.batches {
            steps += b.lm.accepted_costs.len().saturating_sub(1);
            violations += b.lm.accepted_costs.windows(2).filter(|w| w[1] > w[0]).count();
        }
    }
    Outcome::new(
        violations == 0,
        format!("{violations} violations over {steps} accepted steps"),
    )
}

// 3

const FD_STEP: f64 = 1e-6;

fn relative_error(fd: &DMatrix<f64>, analytic: &DMatrix<f64>) -> f64 {
    let scale = fd.amax().max(analytic.amax()).max(1.0);
    (fd - analytic).amax() / scale
}

fn random_frame(rig: &RigModel, r: &mut ChaCha8Rng, t_ns: i64) -> PoseFrame {
    let mut f = PoseFrame::zero(rig, t_ns);
    f.root = RigidTransform::new(
        UnitQuaternion::from_scaled_axis(Vec3::new(
            r.random_range(-0.3..0.3),
            r.random_range(-0.3..0.3),
            r.random_range(-3.0..3.0),
        )),
        Vec3::new(
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(0.8..1.1),
        ),
    );
    for (i, v) in f.pose.iter_mut().enumerate() {
        let [lo, hi] = rig.limits()[i];
        *v = r.random_range(lo - 0.2..hi + 0.2);
    }
    f
}

fn perturbed(f: &PoseFrame, r: &mut ChaCha8Rng, s: f64) -> PoseFrame {
    let d: Vec<f64> = (0..f.pose.len() + 6).map(|_| r.random_range(-s..s)).collect();
    apply_frame_step(f, &|c| d[c])
}

fn fuse_jacobian_error(rig: &RigModel, seed: u64) -> f64 {
    let cfg = FusionConfig::default();
    let mut r = rng(seed);
    let identity: Vec<f64> = (0..rig.identity_dim()).map(|_| r.random_range(-0.03..0.03)).collect();
    let frames = [random_frame(rig, &mut r, 0), random_frame(rig, &mut r, 4_166_667)];
    let prior = [perturbed(&frames[0], &mut r, 0.2), perturbed(&frames[1], &mut r, 0.2)];
    let mut target = || Some(Vec3::new(r.random_range(-0.3..0.3), r.random_range(-0.3..0.3), 1.0));
    let targets = [[target(), target(), target()], [target(), target(), target()]];
    let foot_weights = [r.random_range(1.0..10.0), r.random_range(1.0..10.0)];
    let seam = Some(perturbed(&frames[0], &mut r, 0.1));
    let probe = ResidualProbe {
        rig,
        cfg: &cfg,
        identity: &identity,
        frames: frames.clone(),
        prior,
        targets,
        foot_weights,
        seam,
    };
    let n = rig.frame_cols();
    let mut worst = 0.0f64;
    for term in ALL_TERMS {
        let (r0, jac) = probe.evaluate(term);
        let mut fd = DMatrix::zeros(r0.len(), 2 * n);
        for c in 0..2 * n {
            let eval = |sign: f64| {
                let (k, col) = (c / n, c % n);
                let mut p = ResidualProbe {
                    frames: frames.clone(),
                    prior: probe.prior.clone(),
                    seam: probe.seam.clone(),
                    ..probe
                };
                p.frames[k] = apply_frame_step(&frames[k], &|j| if j == col { sign * FD_STEP } else { 0.0 });
                p.evaluate(term).0
            };
            fd.set_column(c, &((eval(1.0) - eval(-1.0)) / (2.0 * FD_STEP)));
        }
        worst = worst.max(relative_error(&fd, &jac));
    }
    worst
}

fn mesh_jacobian_error(rig: &RigModel, seed: u64, term: MeshTerm) -> f64 {
    let mut r = rng(1000 + seed);
    let identity: Vec<f64> = (0..rig.identity_dim()).map(|_| r.random_range(-0.03..0.03)).collect();
    let frame = random_frame(rig, &mut r, 0);
    let target_frame = perturbed(&frame, &mut r, 0.3);
    let target = skin_mesh(rig, &identity, &target_frame).expect("skin");
    let (r0, jac) = mesh_residuals(rig, &identity, &frame, &target, term);
    let n = jac.ncols();
    let mut fd = DMatrix::zeros(r0.len(), n);
    for c in 0..n {
        let eval = |sign: f64| {
            let mut d = DVector::zeros(n);
            d[c] = sign * FD_STEP;
            let (f, id) = apply_mesh_step(rig, &frame, &identity, &d);
            mesh_residuals(rig, &id, &f, &target, term).0
        };
        fd.set_column(c, &((eval(1.0) - eval(-1.0)) / (2.0 * FD_STEP)));
    }
    relative_error(&fd, &jac)
}

fn jacobian_correctness() -> Outcome {
    let t = Instant::now();
    let rig = desk_rig();
    let fuse = (0..10).map(|s| fuse_jacobian_error(&rig, s)).fold(0.0, f64::max);
    let vertex = (0..10)
        .map(|s| mesh_jacobian_error(&rig, s, MeshTerm::Vertex))
        .fold(0.0, f64::max);
    let edge = (0..10)
        .map(|s| mesh_jacobian_error(&rig, s, MeshTerm::Edge))
        .fold(0.0, f64::max);
    let elapsed = t.elapsed();
    let worst = fuse.max(vertex).max(edge);
    Outcome::new(
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "max relative error: fusion terms {fuse:.1e}, mesh vertex {vertex:.1e}, mesh edge {edge:.1e} over {} fusion terms",
            ALL_TERMS.len()
        ),
    )
}

// 5

fn random_box(r: &mut ChaCha8Rng, id: u64, spread: f64) -> Obb3 {
    let half = Vec3::new(
        r.random_range(0.1..0.6),
        r.random_range(0.1..0.6),
        r.random_range(0.1..0.6),
    );
    let center = if spread > 0.0 {
        random_vec(r, spread)
    } else {
        Vec3::zeros()
    };
    Obb3::new(
        id,
        Category::Anything,
        center,
        random_rotation(r, std::f64::consts::PI),
        half,
    )
    .expect("valid box")
}

fn monte_carlo_iou(a: &Obb3, b: &Obb3, samples: usize, r: &mut ChaCha8Rng) -> f64 {
    let corners: Vec<Vec3> = a.corners().into_iter().chain(b.corners()).collect();
    let lo = corners.iter().fold(Vec3::repeat(f64::INFINITY), |m, p| m.inf(p));
    let hi = corners.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |m, p| m.sup(p));
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples {
        let p = Vec3::new(
            r.random_range(lo.x..hi.x),
            r.random_range(lo.y..hi.y),
            r.random_range(lo.z..hi.z),
        );
        let (ia, ib) = (a.contains(&p), b.contains(&p));
        both += (ia && ib) as usize;
        either += (ia || ib) as usize;
    }
    both as f64 / either as f64
}

fn iou_oracle() -> Outcome {
    let t = Instant::now();
    let mut r = rng(5);
    let mut worst = 0.0f64;
    let mut overlapping = 0;
    for k in 0..100 {
        let a = random_box(&mut r, 2 * k, 0.3);
        let b = random_box(&mut r, 2 * k + 1, 0.3);
        let exact = iou3d(&a, &b);
        overlapping += (exact > 0.0) as usize;
        worst = worst.max((exact - monte_carlo_iou(&a, &b, 1_000_000, &mut r)).abs());
    }
    let unit = |id, x| Obb3::axis_aligned(id, Category::Table, Vec3::new(x, 0.0, 0.0), Vec3::repeat(0.5)).unwrap();
    let identical = iou3d(&unit(1, 0.0), &unit(2, 0.0));
    let offset = iou3d(&unit(1, 0.0), &unit(2, 0.5));
    let disjoint = iou3d(&unit(1, 0.0), &unit(2, 3.0));
    let elapsed = t.elapsed();
    let pass = worst < 0.01
        && (identical - 1.0).abs() < 1e-12
        && (offset - 1.0 / 3.0).abs() < 1e-12
        && disjoint == 0.0
        && elapsed < Duration::from_secs(60);
    Outcome::new(
        pass,
        format!(
            "max |exact - monte carlo| {worst:.4} ({overlapping}/100 overlapping); identical {identical}, offset cubes error {:.1e}, disjoint {disjoint}",
            (offset - 1.0 / 3.0).abs()
        ),
    )
}

// 6

fn camera() -> CameraModel {
    CameraModel::new(400.0, 400.0, 320.0, 240.0, 640, 480).unwrap()
}

fn bound_gap(a: &Box2, b: &Box2) -> f64 {
    [
        a.min_u - b.min_u,
        a.min_v - b.min_v,
        a.max_u - b.max_u,
        a.max_v - b.max_v,
    ]
    .iter()
    .fold(0.0, |m, d| m.max(d.abs()))
}

fn two_d_box_oracle() -> Outcome {
    let cam = camera();
    let mut r = rng(6);
    let mut worst = 0.0f64;
    let mut degenerate_mismatch = 0;
    let loose = VisibilityParams {
        inside_fraction: 0.0,
        min_points: 0,
        ..VisibilityParams::default()
    };
    for k in 0..50 {
        let world_from_camera =
            RigidTransform::new(random_rotation(&mut r, std::f64::consts::PI), random_vec(&mut r, 3.0));
        // box in front of the camera, sometimes straddling the image border
        let in_camera = Vec3::new(
            r.random_range(-2.5..2.5),
            r.random_range(-2.0..2.0),
            r.random_range(3.0..8.0),
        );
        let local = random_box(&mut r, k, 0.0);
        let obb = Obb3::new(
            k,
            Category::Chair,
            world_from_camera.transform_point(&in_camera),
            world_from_camera.rotation * local.rotation,
            local.half_extents.map(|h| h.min(0.4)),
        )
        .unwrap();
        let cloud: Vec<Vec3> = Vec::new();
        let verdict = compute_visibility(&obb, &cam, &world_from_camera, &cloud, &loose).unwrap();
        match compute_2dbb(&obb, &cam, &world_from_camera, 64) {
            Ok(edge) => {
                let dense: Vec<Vec3> = (0..100_000)
                    .map(|_| surface_point(&obb, [r.random(), r.random(), r.random()]))
                    .collect();
                let oracle = bounds_of_points(&cam, &world_from_camera, &dense).unwrap();
                worst = worst.max(bound_gap(&edge, &oracle));
                // projectability decides visibility under degenerate thresholds
                let projects = verdict.fraction_inside > 0.0;
                degenerate_mismatch += (verdict.visible != projects) as usize;
            }
            Err(_) => degenerate_mismatch += verdict.visible as usize,
        }
    }
    let examples = visibility_examples();
    Outcome::new(
        worst <= 2.0 && degenerate_mismatch == 0 && examples.is_empty(),
        format!(
            "max bound gap {worst:.3} px over 50 configurations; degenerate-threshold mismatches {degenerate_mismatch}; failed examples {examples:?}"
        ),
    )
}

fn visibility_examples() -> Vec<&'static str> {
    let cam = camera();
    let origin = RigidTransform::identity();
    let cube = |id, z| Obb3::axis_aligned(id, Category::Bed, Vec3::new(0.0, 0.0, z), Vec3::repeat(0.5)).unwrap();
    let front = cube(1, 5.0);
    let cloud: Vec<Vec3> = (0..10).map(|i| Vec3::new(0.0, 0.0, 4.6 + 0.08 * i as f64)).collect();
    let params = VisibilityParams::default();
    let mut failed = Vec::new();
    let v = compute_visibility(&front, &cam, &origin, &cloud, &params).unwrap();
    if !(v.visible && v.fraction_inside == 1.0 && v.points_inside == 10) {
        failed.push("centered box visible");
    }
    let v = compute_visibility(&cube(2, -5.0), &cam, &origin, &cloud, &params).unwrap();
    if v.visible || !v.reasons.contains(&Reason::NotProjectable) {
        failed.push("box behind camera");
    }
    let v = compute_visibility(&front, &cam, &origin, &cloud[..1], &params).unwrap();
    if v.reasons != [Reason::TooFewPoints] {
        failed.push("single cloud point");
    }
    if compute_visibility(&front, &cam, &origin, &[], &params).unwrap().visible {
        failed.push("empty cloud");
    }
    let bb = compute_2dbb(&front, &cam, &origin, 8).unwrap();
    if (bb.min_u + bb.max_u - 640.0).abs() > 1e-6 || (bb.min_v + bb.max_v - 480.0).abs() > 1e-6 {
        failed.push("symmetric box about principal point");
    }
    let side = Obb3::axis_aligned(3, Category::Bed, Vec3::new(4.5, 0.0, 5.0), Vec3::repeat(0.5)).unwrap();
    if compute_2dbb(&side, &cam, &origin, 8).unwrap().max_u != 640.0 {
        failed.push("clipped box flush with border");
    }
    failed
}

// 7

fn loocv_exactness() -> Outcome {
    let mut r = rng(7);
    let mut worst = 0.0f64;
    let mut compared = 0;
    for _ in 0..20 {
        let n = r.random_range(3..=20);
        let dim = r.random_range(1..=10);
        let slopes: Vec<f64> = (0..dim).map(|_| r.random_range(-0.5..0.5)).collect();
        let samples: Vec<IdentitySample> = (0..n)
            .map(|_| {
                let height = r.random_range(1.5..2.0);
                let identity = slopes
                    .iter()
                    .map(|s| s * (height - 1.7) + r.random_range(-0.01..0.01))
                    .collect();
                IdentitySample { height, identity }
            })
            .collect();
        for lambda in default_lambda_grid() {
            let fast = loocv_error(&samples, lambda).expect("hat-matrix loocv");
            let brute = loocv_error_brute_force(&samples, lambda).expect("refit loocv");
            worst = worst.max((fast - brute).abs());
            compared += 1;
        }
    }
    Outcome::new(
        worst < 1e-9,
        format!("max difference {worst:.1e} over {compared} (regression, lambda) pairs"),
    )
}

// 8

fn lbs_fk_invariants() -> Outcome {
    let rig = desk_rig();
    let mut r = rng(8);
    let zero = skin_mesh(&rig, &rig.zero_identity(), &PoseFrame::zero(&rig, 0)).unwrap();
    let template = zero
        .iter()
        .zip(rig.template())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    let mut bones = 0.0f64;
    let mut rigid = 0.0f64;
    for k in 0..1000 {
        let identity: Vec<f64> = (0..rig.identity_dim()).map(|_| r.random_range(-0.05..0.05)).collect();
        let frame = random_frame(&rig, &mut r, k);
        let fk = forward_kinematics(&rig, &identity, &frame).unwrap();
        for j in 0..rig.joint_count() {
            if let Some(p) = rig.parent(j) {
                let d = (fk[j].translation - fk[p].translation).norm();
                bones = bones.max((d - rig.bone_length(j, &identity)).abs());
            }
        }
        if k % 100 == 0 {
            // zero pose under a root motion is the rigidly moved template
            let moved = PoseFrame {
                root: frame.root,
                ..PoseFrame::zero(&rig, 0)
            };
            let skinned = skin_mesh(&rig, &rig.zero_identity(), &moved).unwrap();
            for (a, b) in skinned.iter().zip(rig.template()) {
                rigid = rigid.max((a - frame.root.transform_point(b)).norm());
            }
        }
    }
    Outcome::new(
        template < 1e-9 && bones < 1e-9 && rigid < 1e-9,
        format!("template reproduction {template:.1e}, rigid root motion {rigid:.1e}, bone length over 1000 poses {bones:.1e}"),
    )
}

// 9

/// Accepted losses may not rise after this many entries of a stage trace.
const WARM_UP: usize = 10;

fn mesh_self_consistency() -> Outcome {
    let t = Instant::now();
    let rig = desk_rig();
    let spec = ScenarioSpec {
        duration_s: 2.0,
        with_scene: false,
        ..ScenarioSpec::default()
    };
    let motion = downsample(&generate_scenario(&spec, 9).unwrap().ground_truth, 15.0).unwrap();
    let corr = build_correspondence(rig.template(), rig.faces(), rig.template()).unwrap();
    let (_, report) = convert_motion(&rig, &rig, &corr, &motion, &FitConfig::default()).unwrap();
    let rises: Vec<usize> = report
        .stage_traces
        .iter()
        .map(|trace| {
            trace
                .iter()
                .skip(WARM_UP)
                .collect::<Vec<_>>()
                .windows(2)
                .filter(|w| w[1] > w[0])
                .count()
        })
        .collect();
    let elapsed = t.elapsed();
    Outcome::new(
        report.vertex_rmse < 1e-4 && rises.iter().all(|&c| c == 0) && elapsed < Duration::from_secs(120),
        format!(
            "{} frames: vertex rmse {:.2e} m, stage trace lengths {:?}, rises after warm-up {rises:?}",
            motion.len(),
            report.vertex_rmse,
            report.stage_traces.each_ref().map(|s| s.len()),
        ),
    )
}

// 10

fn still_motion(rig: &RigModel, n: usize, rate_hz: f64, root_x: impl Fn(usize) -> f64) -> MotionSequence {
    let frames = (0..n)
        .map(|k| {
            let mut f = PoseFrame::zero(rig, (k as f64 * 1e9 / rate_hz).round() as i64);
            f.root.translation = Vec3::new(root_x(k), 0.0, 0.95);
            f
        })
        .collect();
    MotionSequence {
        identity: rig.zero_identity(),
        frames,
        rate_hz,
    }
}

fn metric_oracles() -> Outcome {
    let rig = desk_rig();
    let mut problems = Vec::new();

    // wrist bands mounted exactly 5 cm from the wrist joints
    let m = still_motion(&rig, 30, 30.0, |k| 0.01 * k as f64);
    let offset = Vec3::new(0.03, 0.0, 0.04);
    let wrists = rig.named().wrists().map(|j| {
        let samples = m
            .frames
            .iter()
            .map(|f| {
                let fk = forward_kinematics(&rig, &m.identity, f).unwrap();
                PoseSample {
                    t_ns: f.t_ns,
                    pose: RigidTransform::from_translation(fk[j].translation + offset),
                }
            })
            .collect();
        Trajectory::new("world", samples).unwrap()
    });
    let wrist = wrist_distance_error(&m, &rig, [&wrists[0], &wrists[1]])
        .unwrap()
        .mean_cm;
    if (wrist - 5.0).abs() > 1e-9 {
        problems.push(format!("wrist {wrist}"));
    }

    // two parallel capsules on the root, 0.1 m apart with radii 0.07 and 0.05
    let prim = |y: f64, radius: f64| CollisionPrimitive {
        joint: 0,
        a: [-0.2, y, 0.0],
        b: [0.2, y, 0.0],
        radius,
        taper: None,
    };
    let prims = [prim(0.0, 0.07), prim(0.1, 0.05)];
    let pen = self_penetration_error(&m, &rig, &prims, Some(&[])).unwrap().mean;
    if (pen - 0.02).abs() > 1e-9 {
        problems.push(format!("penetration {pen}"));
    }
    let seg = |y: f64| [Vec3::new(1.0, y, 2.0), Vec3::new(1.0, y, 2.5)];
    let crossed = capsule_depth(
        seg(0.0),
        &prim(0.0, 0.1),
        [Vec3::new(0.8, 0.15, 2.2), Vec3::new(1.2, 0.15, 2.2)],
        &prim(0.0, 0.08),
    );
    if (crossed - 0.03).abs() > 1e-9 {
        problems.push(format!("crossed capsules {crossed}"));
    }

    // stationary for 30 frames then walking at 1 m/s; contact labelled on
    // 21 still and 21 moving frames
    let m = still_motion(&rig, 60, 30.0, |k| if k < 30 { 0.0 } else { (k - 30) as f64 / 30.0 });
    let labels = (0..60)
        .map(|k| [(5..=25).contains(&k) || (35..=55).contains(&k); 2])
        .collect();
    let contacts = ContactLabels::new(labels, ContactProvenance::Provided);
    let sliding = foot_sliding_percent(&m, &rig, &contacts, 0.1).unwrap().percent;
    if sliding != 50.0 {
        problems.push(format!("sliding {sliding}"));
    }

    // accelerating walk: sliding percent never rises with the threshold
    let m = still_motion(&rig, 60, 30.0, |k| 0.5 * (k as f64 / 30.0).powi(2));
    let all = ContactLabels::new(vec![[true; 2]; 60], ContactProvenance::Provided);
    let sweep: Vec<f64> = (0..40)
        .map(|i| foot_sliding_percent(&m, &rig, &all, 0.05 * i as f64).unwrap().percent)
        .collect();
    if sweep.windows(2).any(|w| w[1] > w[0]) || sweep[0] <= sweep[39] {
        problems.push("threshold sweep not monotone".into());
    }
    Outcome::new(
        problems.is_empty(),
        format!(
            "wrist {wrist:.12} cm, penetration {pen:.12} m, sliding {sliding}%, sweep {:.0}%..{:.0}%; problems {problems:?}",
            sweep[0], sweep[39]
        ),
    )
}

// 11

fn run_short_pipeline(root: &Path, seed: u64) -> PipelineReport {
    let spec = ScenarioSpec {
        duration_s: 4.0,
        ..ScenarioSpec::default()
    };
    let scenario_dir = root.join("scenario");
    generate_scenario(&spec, seed)
        .unwrap()
        .write_to(&scenario_dir, &desk_rig())
        .unwrap();
    write_conversion_assets(&scenario_dir).unwrap();
    run_pipeline(&PipelineConfig::for_scenario(&scenario_dir, &root.join("out"))).unwrap()
}

fn directory_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

/// Reads `name` from `dir`, rewrites it to `scratch` and compares bytes.
fn round_trips(dir: &Path, scratch: &Path, name: &str) -> bool {
    let src = dir.join(name);
    let dst = scratch.join(name);
    let json = |_: ()| -> egofuse::Result<()> {
        match name {
            files::META => write_json(&dst, &read_json::<ScenarioMeta>(&src)?),
            files::RIG | TARGET_RIG => write_json(&dst, &read_json::<RigData>(&src)?),
            files::SOURCE => SourceMotion::load(&src)?.save(&dst),
            files::MAP => write_json(&dst, &read_json::<RetargetMap>(&src)?),
            files::CONTACTS => write_json(&dst, &read_json::<ContactLabels>(&src)?),
            files::SUBJECT => write_json(&dst, &read_json::<Subject>(&src)?),
            files::SCENE => SceneAnnotation::load(&src)?.save(&dst),
            files::CAMERA => write_json(&dst, &read_json::<CameraModel>(&src)?),
            files::TRAINING => write_training_csv(&dst, &read_training_csv(&src)?),
            files::CLOUD => write_points_csv(&dst, &read_points_csv(&src)?),
            CORRESPONDENCE => SurfaceCorrespondence::load(&src)?.save(&dst),
            outputs::REGRESSOR => write_json(&dst, &read_json::<IdentityRegressor>(&src)?),
            outputs::IDENTITY_PRIOR => write_json(&dst, &read_json::<Vec<f64>>(&src)?),
            outputs::RETARGET_REPORT => write_json(&dst, &read_json::<RetargetReport>(&src)?),
            outputs::HANDEYE => write_json(&dst, &read_json::<HandEyeResult>(&src)?),
            outputs::FUSION_REPORT => write_json(&dst, &read_json::<FusionReport>(&src)?),
            outputs::REPORT => write_json(&dst, &read_json::<PipelineReport>(&src)?),
            "projections.jsonl" => write_json_lines(&dst, &read_json_lines::<ProjectionRecord>(&src)?),
            n if n.ends_with(".csv") => write_trajectory_csv(&dst, &read_trajectory_csv(&src, "any")?),
            _ => write_motion(&dst, &read_motion(&src)?),
        }
    };
    json(()).is_ok() && std::fs::read(&src).ok() == std::fs::read(&dst).ok()
}

fn metrics_close(a: &PipelineReport, b: &PipelineReport) -> bool {
    let pairs = [(&a.pre_fusion, &b.pre_fusion), (&a.post_fusion, &b.post_fusion)];
    pairs.iter().all(|(x, y)| {
        (x.wrist_mean_cm - y.wrist_mean_cm).abs() <= 1e-9
            && (x.penetration_mean - y.penetration_mean).abs() <= 1e-9
            && match (x.sliding_percent, y.sliding_percent) {
                (Some(p), Some(q)) => (p - q).abs() <= 1e-9,
                (p, q) => p == q,
            }
    })
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_short_pipeline(a.path(), 11);
    let rb = run_short_pipeline(b.path(), 11);
    let same_metrics = metrics_close(&ra, &rb);
    let mut differing = Vec::new();
    for sub in ["scenario", "out"] {
        let (fa, fb) = (
            directory_bytes(&a.path().join(sub)),
            directory_bytes(&b.path().join(sub)),
        );
        for (name, bytes) in &fa {
            if fb.get(name) != Some(bytes) {
                differing.push(name.clone());
            }
        }
    }

    // scene projections exercise the line-delimited output too
    let scenario = a.path().join("scenario");
    let annotation = SceneAnnotation::load(scenario.join(files::SCENE)).unwrap();
    let rows = project_scene(
        &annotation.boxes,
        &read_points_csv(scenario.join(files::CLOUD)).unwrap(),
        &read_json(scenario.join(files::CAMERA)).unwrap(),
        &read_trajectory_csv(scenario.join(files::CAMERA_POSES), "world").unwrap(),
        &VisibilityParams::default(),
    )
    .unwrap();
    write_json_lines(scenario.join("projections.jsonl"), &rows).unwrap();

    let scratch = tempfile::tempdir().unwrap();
    let mut checked = 0;
    let mut broken = Vec::new();
    for sub in ["scenario", "out"] {
        let dir = a.path().join(sub);
        for name in directory_bytes(&dir).into_keys() {
            checked += 1;
            if !round_trips(&dir, scratch.path(), &name) {
                broken.push(name);
            }
        }
    }
    Outcome::new(
        same_metrics && differing.is_empty() && broken.is_empty(),
        format!(
            "repeat run metrics equal: {same_metrics}; differing files {differing:?}; {checked} files round-tripped, broken {broken:?}"
        ),
    )
}
