//! Command-line front end. Exit codes: 0 success, 1 usage, 2 data error,
//! 3 non-convergence (outputs are still written).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use egofuse::align::{estimate_handeye, head_trajectory, rigid_align_sequence, HandEyeResult, DEFAULT_PAIR_SPACING_NS};
use egofuse::fuse::{derive_contacts, fuse_sequence, ContactLabels, FusionConfig, FusionInputs};
use egofuse::geom::{CameraModel, RigidTransform, Trajectory};
use egofuse::ident::{default_lambda_grid, fit_ridge_loocv, predict_identity, read_training_csv};
use egofuse::io::{read_json, read_points_csv, read_trajectory_csv, write_json, write_json_lines, write_motion};
use egofuse::meshxfer::{FitConfig, SurfaceCorrespondence};
use egofuse::pipeline::{self, run_pipeline, PipelineConfig};
use egofuse::quality::{evaluate, DEFAULT_METRIC_FPS};
use egofuse::retarget::{retarget_sequence, IkSettings, RetargetMap, SourceMotion};
use egofuse::rig::{desk_rig, RigModel};
use egofuse::scene::{
    compute_visibility, gate_shape_transfer, iou3d, project_scene, read_boxes, select_views, transfer_annotations,
    Obb3, SceneAnnotation, VisibilityParams, DEFAULT_IOU_GATE,
};
use egofuse::synth::{generate_scenario, ScenarioSpec};

#[derive(Parser, Debug)]
#[command(
    name = "egofuse",
    version,
    about = "Egocentric body-motion fusion and oriented-box scene tools"
)]
struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory receiving all outputs.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// JSON settings file: a pipeline configuration for `pipeline`, tool
    /// settings (`ik`, `fusion`, `fit`, `visibility`, `scenario`, ...) otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scenario (ground truth, sensor streams, scene).
    Synth(SynthArgs),
    /// Fit the height-to-identity ridge regressor by leave-one-out CV.
    RegressIdentity(RegressArgs),
    /// Retarget source motion onto the rig.
    Retarget(RetargetArgs),
    /// Estimate the device-from-head-segment transform.
    Handeye(HandeyeArgs),
    /// Pin retargeted motion to the device trajectory.
    RigidAlign(RigidAlignArgs),
    /// Jointly refine motion against head and wrist trajectories.
    Fuse(FuseArgs),
    /// Wrist distance, self-penetration and foot sliding of a motion.
    Metrics(MetricsArgs),
    /// Convert motion between rigs through a surface correspondence.
    ConvertMesh(ConvertArgs),
    /// Oriented-box tools.
    Obb {
        #[command(subcommand)]
        command: ObbCommand,
    },
    /// Run regress, retarget, handeye, rigid-align, fuse and metrics.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Capture length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Disable drift, noise and corruption.
    #[arg(long)]
    noiseless: bool,
    /// Skip the scene (boxes, cloud, cameras).
    #[arg(long)]
    no_scene: bool,
}

#[derive(Args, Debug)]
struct RegressArgs {
    #[arg(long)]
    training: PathBuf,
    /// Subject height (m); writes the predicted identity prior.
    #[arg(long)]
    height: Option<f64>,
}

#[derive(Args, Debug)]
struct RetargetArgs {
    #[arg(long)]
    rig: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    map: PathBuf,
    /// Identity prior (JSON array); zero when omitted.
    #[arg(long)]
    identity_prior: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HandeyeArgs {
    #[arg(long)]
    device: PathBuf,
    /// Head-segment trajectory CSV in the source frame.
    #[arg(long, conflicts_with = "motion", required_unless_present = "motion")]
    head: Option<PathBuf>,
    /// Retargeted motion; its head joint provides the head trajectory.
    #[arg(long, requires = "rig")]
    motion: Option<PathBuf>,
    #[arg(long)]
    rig: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PAIR_SPACING_NS)]
    pair_spacing_ns: i64,
}

#[derive(Args, Debug)]
struct RigidAlignArgs {
    #[arg(long)]
    rig: PathBuf,
    #[arg(long)]
    motion: PathBuf,
    #[arg(long)]
    device: PathBuf,
    #[arg(long)]
    handeye: PathBuf,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long)]
    rig: PathBuf,
    /// Rigidly aligned motion (initial value).
    #[arg(long)]
    rigid: PathBuf,
    /// Retargeted motion (pose prior and gravity reference).
    #[arg(long)]
    retargeted: PathBuf,
    #[arg(long)]
    device: PathBuf,
    #[arg(long)]
    handeye: PathBuf,
    #[arg(long)]
    wrist_left: PathBuf,
    #[arg(long)]
    wrist_right: PathBuf,
    /// Contact labels; derived from the retargeted heel speed when omitted.
    #[arg(long)]
    contacts: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    rig: PathBuf,
    #[arg(long)]
    motion: PathBuf,
    #[arg(long)]
    wrist_left: PathBuf,
    #[arg(long)]
    wrist_right: PathBuf,
    /// Contact labels; derived from the motion itself when omitted.
    #[arg(long)]
    contacts: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_METRIC_FPS)]
    fps: f64,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// Motion on the source rig.
    #[arg(long)]
    motion: PathBuf,
    /// Source rig; the bundled desk rig when omitted.
    #[arg(long)]
    source_rig: Option<PathBuf>,
    /// Target rig; the bundled target rig when omitted.
    #[arg(long, requires = "correspondence")]
    target_rig: Option<PathBuf>,
    #[arg(long, requires = "target_rig")]
    correspondence: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum ObbCommand {
    /// Visibility verdict of every box from one camera pose.
    Visibility {
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        /// Camera trajectory CSV; the sample at `--t-ns` (or the first) is used.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        t_ns: Option<i64>,
        #[arg(long)]
        cloud: Option<PathBuf>,
    },
    /// Visibility and 2D box of every box at every camera pose (JSON lines).
    Project {
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        cloud: Option<PathBuf>,
    },
    /// Exact 3D IoU between two boxes.
    Iou {
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long)]
        a: u64,
        #[arg(long)]
        b: u64,
    },
    /// Map basemap annotations into a recording frame.
    Transfer {
        #[arg(long)]
        basemap: PathBuf,
        /// JSON `[tx, ty, tz, qw, qx, qy, qz]` world alignment.
        #[arg(long)]
        alignment: PathBuf,
        #[arg(long, default_value = "recording")]
        frame: String,
    },
    /// Accept a shape transfer only for a near-identical candidate.
    Gate {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        id: u64,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IOU_GATE)]
        threshold: f64,
    },
    /// Pick diverse camera views of one box.
    SelectViews {
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long)]
        id: u64,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long, default_value_t = 4)]
        k: usize,
    },
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Scenario directory; with neither this nor `--config`, a scenario is
    /// generated from `--seed` under `<out-dir>/scenario`.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

/// Settings shared by the individual tools; every section is optional.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct ToolConfig {
    scenario: ScenarioSpec,
    ik: IkSettings,
    fusion: FusionConfig,
    fit: FitConfig,
    visibility: VisibilityParams,
    mask_min_hits: Option<usize>,
}

/// Errors that are the caller's fault rather than the data's.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

enum Outcome {
    Done,
    NotConverged(String),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged(what)) => {
            eprintln!("warning: {what} did not converge; outputs were written");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn tool_config(cli: &Cli) -> anyhow::Result<ToolConfig> {
    match &cli.config {
        Some(p) => Ok(read_json(p)?),
        None => Ok(ToolConfig::default()),
    }
}

fn out_path(cli: &Cli, name: &str) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    Ok(cli.out_dir.join(name))
}

fn announce(path: &Path) {
    println!("{}", path.display());
}

fn load_rig(path: &Path) -> anyhow::Result<RigModel> {
    Ok(RigModel::load(path)?)
}

fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::RegressIdentity(a) => regress(cli, a),
        Command::Retarget(a) => retarget(cli, a),
        Command::Handeye(a) => handeye(cli, a),
        Command::RigidAlign(a) => rigid_align(cli, a),
        Command::Fuse(a) => fuse(cli, a),
        Command::Metrics(a) => metrics(cli, a),
        Command::ConvertMesh(a) => convert(cli, a),
        Command::Obb { command } => obb(cli, command),
        Command::Pipeline(a) => pipeline_cmd(cli, a),
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> anyhow::Result<Outcome> {
    let mut spec = if a.noiseless {
        ScenarioSpec::noiseless()
    } else {
        tool_config(cli)?.scenario
    };
    if let Some(d) = a.duration {
        spec.duration_s = d;
    }
    if a.no_scene {
        spec.with_scene = false;
    }
    let scenario = generate_scenario(&spec, cli.seed)?;
    scenario.write_to(&cli.out_dir, &desk_rig())?;
    pipeline::write_conversion_assets(&cli.out_dir)?;
    announce(&cli.out_dir);
    Ok(Outcome::Done)
}

fn regress(cli: &Cli, a: &RegressArgs) -> anyhow::Result<Outcome> {
    let samples = read_training_csv(&a.training)?;
    let reg = fit_ridge_loocv(&samples, &default_lambda_grid())?;
    let p = out_path(cli, pipeline::outputs::REGRESSOR)?;
    write_json(&p, &reg)?;
    announce(&p);
    if let Some(h) = a.height {
        let prior = predict_identity(&reg, h)?;
        let p = out_path(cli, pipeline::outputs::IDENTITY_PRIOR)?;
        write_json(&p, &prior)?;
        announce(&p);
    }
    Ok(Outcome::Done)
}

fn retarget(cli: &Cli, a: &RetargetArgs) -> anyhow::Result<Outcome> {
    let cfg = tool_config(cli)?;
    let rig = load_rig(&a.rig)?;
    let source = SourceMotion::load(&a.source)?;
    let map: RetargetMap = read_json(&a.map)?;
    let prior: Vec<f64> = match &a.identity_prior {
        Some(p) => read_json(p)?,
        None => rig.zero_identity(),
    };
    let (m, rep) = retarget_sequence(&rig, &map, &source, &prior, &cfg.ik)?;
    let p = out_path(cli, pipeline::outputs::THETA_X)?;
    write_motion(&p, &m)?;
    announce(&p);
    let p = out_path(cli, pipeline::outputs::RETARGET_REPORT)?;
    write_json(&p, &rep)?;
    announce(&p);
    if rep.nonconverged_frames.is_empty() {
        Ok(Outcome::Done)
    } else {
        Ok(Outcome::NotConverged(format!(
            "retargeting of {} frames",
            rep.nonconverged_frames.len()
        )))
    }
}

fn handeye(cli: &Cli, a: &HandeyeArgs) -> anyhow::Result<Outcome> {
    let device = read_trajectory_csv(&a.device, "world")?;
    let head = match (&a.head, &a.motion, &a.rig) {
        (Some(h), _, _) => read_trajectory_csv(h, "source")?,
        (None, Some(m), Some(r)) => {
            let rig = load_rig(r)?;
            let motion = pipeline::load_motion_for(&rig, m)?;
            head_trajectory(&motion, &rig, "source")?
        }
        _ => bail!(UsageError("either --head or --motion with --rig is required".into())),
    };
    let he = estimate_handeye(&device, &head, a.pair_spacing_ns)?;
    let p = out_path(cli, pipeline::outputs::HANDEYE)?;
    write_json(&p, &he)?;
    announce(&p);
    Ok(Outcome::Done)
}

fn rigid_align(cli: &Cli, a: &RigidAlignArgs) -> anyhow::Result<Outcome> {
    let rig = load_rig(&a.rig)?;
    let motion = pipeline::load_motion_for(&rig, &a.motion)?;
    let device = read_trajectory_csv(&a.device, "world")?;
    let he: HandEyeResult = read_json(&a.handeye)?;
    let m = rigid_align_sequence(&motion, &device, &he, &rig)?;
    let p = out_path(cli, pipeline::outputs::THETA_RIGID)?;
    write_motion(&p, &m)?;
    announce(&p);
    Ok(Outcome::Done)
}

fn fuse(cli: &Cli, a: &FuseArgs) -> anyhow::Result<Outcome> {
    let cfg = tool_config(cli)?;
    let rig = load_rig(&a.rig)?;
    let rigid = pipeline::load_motion_for(&rig, &a.rigid)?;
    let theta_x = pipeline::load_motion_for(&rig, &a.retargeted)?;
    let device = read_trajectory_csv(&a.device, "world")?;
    let he: HandEyeResult = read_json(&a.handeye)?;
    let wl = read_trajectory_csv(&a.wrist_left, "world")?;
    let wr = read_trajectory_csv(&a.wrist_right, "world")?;
    let contacts: Option<ContactLabels> = a.contacts.as_ref().map(read_json).transpose()?;
    let head = device.map_poses(|p| p.compose(&he.device_from_headsegment));
    let inputs = FusionInputs {
        theta_rigid: &rigid,
        theta_x: &theta_x,
        head_traj: &head,
        wrist_trajs: [&wl, &wr],
        contacts: contacts.as_ref(),
    };
    let (m, rep) = fuse_sequence(&inputs, &rig, &cfg.fusion)?;
    let p = out_path(cli, pipeline::outputs::THETA_W)?;
    write_motion(&p, &m)?;
    announce(&p);
    let p = out_path(cli, pipeline::outputs::FUSION_REPORT)?;
    write_json(&p, &rep)?;
    announce(&p);
    if rep.converged {
        Ok(Outcome::Done)
    } else {
        Ok(Outcome::NotConverged("fusion".into()))
    }
}

fn metrics(cli: &Cli, a: &MetricsArgs) -> anyhow::Result<Outcome> {
    let cfg = tool_config(cli)?;
    let rig = load_rig(&a.rig)?;
    let motion = pipeline::load_motion_for(&rig, &a.motion)?;
    let wl = read_trajectory_csv(&a.wrist_left, "world")?;
    let wr = read_trajectory_csv(&a.wrist_right, "world")?;
    let labels: ContactLabels = match &a.contacts {
        Some(p) => read_json(p)?,
        None => derive_contacts(&motion, &rig, cfg.fusion.eps_v)?,
    };
    let report = evaluate(&motion, &rig, [&wl, &wr], &labels, a.fps)?;
    let p = out_path(cli, "metrics.json")?;
    write_json(&p, &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(Outcome::Done)
}

fn convert(cli: &Cli, a: &ConvertArgs) -> anyhow::Result<Outcome> {
    let cfg = tool_config(cli)?;
    let (bundled_src, bundled_tgt, bundled_corr) = pipeline::conversion_assets()?;
    let source = match &a.source_rig {
        Some(p) => load_rig(p)?,
        None => bundled_src,
    };
    let (target, corr) = match (&a.target_rig, &a.correspondence) {
        (Some(t), Some(c)) => (load_rig(t)?, SurfaceCorrespondence::load(c)?),
        _ => (bundled_tgt, bundled_corr),
    };
    let motion = pipeline::load_motion_for(&source, &a.motion)?;
    let (m, rep) = pipeline::convert_motion(&source, &target, &corr, &motion, &cfg.fit)?;
    let p = out_path(cli, "converted.json")?;
    write_motion(&p, &m)?;
    announce(&p);
    let p = out_path(cli, "convert_report.json")?;
    write_json(&p, &rep)?;
    announce(&p);
    if rep.nonconverged_frames.is_empty() {
        Ok(Outcome::Done)
    } else {
        Ok(Outcome::NotConverged(format!(
            "mesh fitting of {} frames",
            rep.nonconverged_frames.len()
        )))
    }
}

fn find_box(boxes: &[Obb3], id: u64) -> anyhow::Result<&Obb3> {
    boxes
        .iter()
        .find(|b| b.id == id)
        .ok_or_else(|| UsageError(format!("no box with id {id}")).into())
}

fn load_cloud(p: &Option<PathBuf>) -> anyhow::Result<Vec<egofuse::geom::Vec3>> {
    Ok(match p {
        Some(p) => read_points_csv(p)?,
        None => Vec::new(),
    })
}

fn obb(cli: &Cli, cmd: &ObbCommand) -> anyhow::Result<Outcome> {
    let cfg = tool_config(cli)?;
    let mut params = cfg.visibility;
    match cmd {
        ObbCommand::Visibility {
            boxes,
            camera,
            poses,
            t_ns,
            cloud,
        } => {
            let boxes = read_boxes(boxes)?;
            let cam: CameraModel = read_json(camera)?;
            let traj = read_trajectory_csv(poses, "world")?;
            let t = t_ns.unwrap_or(traj.start_ns());
            let pose = traj.interpolate(t)?;
            let cloud = load_cloud(cloud)?;
            if cloud.is_empty() {
                params.min_points = 0;
            }
            #[derive(Serialize)]
            struct Row {
                box_id: u64,
                #[serde(flatten)]
                verdict: egofuse::scene::VisibilityVerdict,
            }
            let rows = boxes
                .iter()
                .map(|b| {
                    Ok(Row {
                        box_id: b.id,
                        verdict: compute_visibility(b, &cam, &pose, &cloud, &params)?,
                    })
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let p = out_path(cli, "visibility.jsonl")?;
            write_json_lines(&p, &rows)?;
            announce(&p);
        }
        ObbCommand::Project {
            boxes,
            camera,
            poses,
            cloud,
        } => {
            let boxes = read_boxes(boxes)?;
            let cam: CameraModel = read_json(camera)?;
            let traj = read_trajectory_csv(poses, "world")?;
            let cloud = load_cloud(cloud)?;
            if cloud.is_empty() {
                params.min_points = 0;
            }
            let rows = project_scene(&boxes, &cloud, &cam, &traj, &params)?;
            let p = out_path(cli, "boxes2d.jsonl")?;
            write_json_lines(&p, &rows)?;
            announce(&p);
        }
        ObbCommand::Iou { boxes, a, b } => {
            let boxes = read_boxes(boxes)?;
            let v = iou3d(find_box(&boxes, *a)?, find_box(&boxes, *b)?);
            println!("{v}");
        }
        ObbCommand::Transfer {
            basemap,
            alignment,
            frame,
        } => {
            let base = SceneAnnotation::load(basemap)?;
            let arr: [f64; 7] = read_json(alignment)?;
            let g: RigidTransform = egofuse::io::pose_from_array(&arr)?;
            let moved = transfer_annotations(&base, frame, &g);
            let p = out_path(cli, "transferred.json")?;
            moved.save(&p)?;
            announce(&p);
        }
        ObbCommand::Gate {
            source,
            id,
            candidates,
            threshold,
        } => {
            let src = read_boxes(source)?;
            let cands = read_boxes(candidates)?;
            let m = gate_shape_transfer(find_box(&src, *id)?, &cands, *threshold)?;
            println!("{}", serde_json::to_string(&m)?);
        }
        ObbCommand::SelectViews {
            boxes,
            id,
            cloud,
            camera,
            poses,
            k,
        } => {
            let boxes = read_boxes(boxes)?;
            let b = find_box(&boxes, *id)?;
            let cloud = read_points_csv(cloud)?;
            let cam: CameraModel = read_json(camera)?;
            let traj: Trajectory = read_trajectory_csv(poses, "world")?;
            let pts = egofuse::scene::filter_instance_points(b, &cloud, None, cfg.mask_min_hits.unwrap_or(1))?;
            let views = select_views(&pts, &traj, &cam, *k)?;
            println!("{}", serde_json::to_string(&views)?);
        }
    }
    Ok(Outcome::Done)
}

fn pipeline_cmd(cli: &Cli, a: &PipelineArgs) -> anyhow::Result<Outcome> {
    let cfg = match (&cli.config, &a.scenario) {
        (Some(c), None) => PipelineConfig::load(c)?,
        (Some(_), Some(_)) => bail!(UsageError("--config and --scenario are exclusive for pipeline".into())),
        (None, Some(dir)) => PipelineConfig::for_scenario(dir, &cli.out_dir),
        (None, None) => {
            let dir = cli.out_dir.join("scenario");
            let scenario = generate_scenario(&ScenarioSpec::default(), cli.seed)?;
            scenario.write_to(&dir, &desk_rig())?;
            PipelineConfig::for_scenario(&dir, &cli.out_dir)
        }
    };
    let report = run_pipeline(&cfg)?;
    announce(&cfg.out_dir.join(pipeline::outputs::REPORT));
    println!(
        "wrist {:.3} -> {:.3} cm, penetration {:.5} -> {:.5}, sliding {} -> {}",
        report.pre_fusion.wrist_mean_cm,
        report.post_fusion.wrist_mean_cm,
        report.pre_fusion.penetration_mean,
        report.post_fusion.penetration_mean,
        fmt_pct(report.pre_fusion.sliding_percent),
        fmt_pct(report.post_fusion.sliding_percent),
    );
    if report.converged {
        Ok(Outcome::Done)
    } else {
        Ok(Outcome::NotConverged("pipeline".into()))
    }
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |p| format!("{p:.2}%"))
}
