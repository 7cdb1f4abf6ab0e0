//! End-to-end driver: regress → retarget → hand-eye → rigid alignment →
//! fusion → metrics, writing every intermediate artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{estimate_handeye, head_trajectory, rigid_align_sequence, HandEyeResult, DEFAULT_PAIR_SPACING_NS};
use crate::error::{Error, Result};
use crate::fuse::{derive_contacts, fuse_sequence, ContactLabels, FusionConfig, FusionInputs, FusionReport};
use crate::geom::{Trajectory, Vec3};
use crate::ident::{default_lambda_grid, fit_ridge_loocv, read_training_csv};
use crate::io::{read_json, read_motion, read_trajectory_csv, write_json, write_motion, write_trajectory_csv};
use crate::meshxfer::{
    build_correspondence, fit_parameters, retopologize, FitConfig, FitReport, SurfaceCorrespondence,
};
use crate::quality::{evaluate, MetricReport, DEFAULT_METRIC_FPS};
use crate::retarget::{retarget_sequence, IkSettings, RetargetMap, RetargetReport, SourceMotion};
use crate::rig::{desk_rig, desk_rig_with_mesh, skin_mesh, MeshLayout, MotionSequence, RigModel};
use crate::synth::{files, Subject};

/// Output file names.
pub mod outputs {
    pub const REGRESSOR: &str = "regressor.json";
    pub const IDENTITY_PRIOR: &str = "identity_prior.json";
    pub const THETA_X: &str = "theta_x.json";
    pub const RETARGET_REPORT: &str = "retarget_report.json";
    pub const HEAD_SOURCE: &str = "head_source.csv";
    pub const HANDEYE: &str = "handeye.json";
    pub const THETA_RIGID: &str = "theta_rigid.json";
    pub const THETA_W: &str = "theta_w.json";
    pub const FUSION_REPORT: &str = "fusion_report.json";
    pub const REPORT: &str = "report.json";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    /// Without regression the identity prior is zero.
    pub regress: bool,
    /// Without fusion the rigidly aligned motion is reported as final.
    pub fuse: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            regress: true,
            fuse: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub rig: PathBuf,
    pub source: PathBuf,
    pub retarget_map: PathBuf,
    pub training: PathBuf,
    pub subject: PathBuf,
    pub device: PathBuf,
    pub wrist_left: PathBuf,
    pub wrist_right: PathBuf,
    #[serde(default)]
    pub contacts: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub stages: StageToggles,
    #[serde(default)]
    pub ik: IkSettings,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default = "default_spacing")]
    pub pair_spacing_ns: i64,
    #[serde(default = "default_fps")]
    pub metric_fps: f64,
}

fn default_spacing() -> i64 {
    DEFAULT_PAIR_SPACING_NS
}

fn default_fps() -> f64 {
    DEFAULT_METRIC_FPS
}

impl PipelineConfig {
    /// Configuration reading the files a scenario directory contains.
    pub fn for_scenario(dir: &Path, out_dir: &Path) -> Self {
        Self {
            rig: dir.join(files::RIG),
            source: dir.join(files::SOURCE),
            retarget_map: dir.join(files::MAP),
            training: dir.join(files::TRAINING),
            subject: dir.join(files::SUBJECT),
            device: dir.join(files::DEVICE),
            wrist_left: dir.join(files::WRIST_LEFT),
            wrist_right: dir.join(files::WRIST_RIGHT),
            contacts: Some(dir.join(files::CONTACTS)),
            out_dir: out_dir.to_path_buf(),
            stages: StageToggles::default(),
            ik: IkSettings::default(),
            fusion: FusionConfig::default(),
            pair_spacing_ns: DEFAULT_PAIR_SPACING_NS,
            metric_fps: DEFAULT_METRIC_FPS,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }

    /// Inputs needed before fusion must exist up front; the wristband files
    /// are checked when fusion loads them.
    pub fn validate(&self) -> Result<()> {
        let mut required = vec![&self.rig, &self.source, &self.retarget_map, &self.device];
        if self.stages.regress {
            required.push(&self.training);
            required.push(&self.subject);
        }
        if let Some(c) = &self.contacts {
            required.push(c);
        }
        for p in required {
            if !p.exists() {
                return Err(Error::InvalidInput("referenced file does not exist".into()).in_file(p));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub identity_prior: Vec<f64>,
    pub retarget: RetargetReport,
    pub handeye: HandEyeResult,
    pub fusion: Option<FusionReport>,
    /// Metrics of the rigidly aligned motion.
    pub pre_fusion: MetricReport,
    /// Metrics of the fused motion.
    pub post_fusion: MetricReport,
    /// Every retargeted frame and every fusion batch converged.
    pub converged: bool,
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().map_err(|e| e.in_stage(name))
}

/// Runs every enabled stage; a failure names its stage and leaves earlier
/// outputs in place.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::from(e).in_file(out))?;
    let rig = RigModel::load(&cfg.rig)?;

    let prior = stage("regress-identity", || {
        if !cfg.stages.regress {
            return Ok(rig.zero_identity());
        }
        let training = read_training_csv(&cfg.training)?;
        let reg = fit_ridge_loocv(&training, &default_lambda_grid())?;
        write_json(out.join(outputs::REGRESSOR), &reg)?;
        let subject: Subject = read_json(&cfg.subject)?;
        let prior = reg.predict(subject.height)?;
        rig.check_identity(&prior)?;
        write_json(out.join(outputs::IDENTITY_PRIOR), &prior)?;
        Ok(prior)
    })?;

    let (theta_x, retarget) = stage("retarget", || {
        let source = SourceMotion::load(&cfg.source)?;
        let map: RetargetMap = read_json(&cfg.retarget_map)?;
        let (m, rep) = retarget_sequence(&rig, &map, &source, &prior, &cfg.ik)?;
        write_motion(out.join(outputs::THETA_X), &m)?;
        write_json(out.join(outputs::RETARGET_REPORT), &rep)?;
        Ok((m, rep))
    })?;

    let device = stage("handeye", || read_trajectory_csv(&cfg.device, "world"))?;
    let handeye = stage("handeye", || {
        let head = head_trajectory(&theta_x, &rig, "source")?;
        write_trajectory_csv(out.join(outputs::HEAD_SOURCE), &head)?;
        let he = estimate_handeye(&device, &head, cfg.pair_spacing_ns)?;
        write_json(out.join(outputs::HANDEYE), &he)?;
        Ok(he)
    })?;

    let theta_rigid = stage("rigid-align", || {
        let m = rigid_align_sequence(&theta_x, &device, &handeye, &rig)?;
        write_motion(out.join(outputs::THETA_RIGID), &m)?;
        Ok(m)
    })?;

    let (wrists, contacts) = stage("fuse", || {
        let wl = read_trajectory_csv(&cfg.wrist_left, "world")?;
        let wr = read_trajectory_csv(&cfg.wrist_right, "world")?;
        let contacts: Option<ContactLabels> = cfg.contacts.as_ref().map(read_json).transpose()?;
        Ok(([wl, wr], contacts))
    })?;
    let (theta_w, fusion) = if cfg.stages.fuse {
        stage("fuse", || {
            let head = device.map_poses(|p| p.compose(&handeye.device_from_headsegment));
            let inputs = FusionInputs {
                theta_rigid: &theta_rigid,
                theta_x: &theta_x,
                head_traj: &head,
                wrist_trajs: [&wrists[0], &wrists[1]],
                contacts: contacts.as_ref(),
            };
            let (m, rep) = fuse_sequence(&inputs, &rig, &cfg.fusion)?;
            write_motion(out.join(outputs::THETA_W), &m)?;
            write_json(out.join(outputs::FUSION_REPORT), &rep)?;
            Ok((m, Some(rep)))
        })?
    } else {
        (theta_rigid.clone(), None)
    };

    let (pre, post) = stage("metrics", || {
        let labels = match &contacts {
            Some(c) => c.clone(),
            None => derive_contacts(&theta_x, &rig, cfg.fusion.eps_v)?,
        };
        let w = [&wrists[0], &wrists[1]];
        let pre = evaluate(&theta_rigid, &rig, w, &labels, cfg.metric_fps)?;
        let post = evaluate(&theta_w, &rig, w, &labels, cfg.metric_fps)?;
        Ok((pre, post))
    })?;
    let converged = retarget.nonconverged_frames.is_empty() && fusion.as_ref().is_none_or(|f| f.converged);
    let report = PipelineReport {
        identity_prior: prior,
        retarget,
        handeye,
        fusion,
        pre_fusion: pre,
        post_fusion: post,
        converged,
    };
    write_json(out.join(outputs::REPORT), &report)?;
    Ok(report)
}

pub const TARGET_RIG: &str = "rig_target.json";
pub const CORRESPONDENCE: &str = "correspondence.json";

/// The bundled source/target rig pair and their correspondence. The target
/// template lies on the source surface's bones, so it serves as the warp.
pub fn conversion_assets() -> Result<(RigModel, RigModel, SurfaceCorrespondence)> {
    let source = desk_rig();
    let target = desk_rig_with_mesh(&MeshLayout::target());
    let corr = build_correspondence(source.template(), source.faces(), target.template())?;
    Ok((source, target, corr))
}

pub fn write_conversion_assets(dir: &Path) -> Result<()> {
    let (_, target, corr) = conversion_assets()?;
    write_json(dir.join(TARGET_RIG), target.data())?;
    corr.save(dir.join(CORRESPONDENCE))
}

/// Skins `motion` on the source rig, re-topologizes it and fits the target
/// rig.
pub fn convert_motion(
    source_rig: &RigModel,
    target_rig: &RigModel,
    corr: &SurfaceCorrespondence,
    motion: &MotionSequence,
    cfg: &FitConfig,
) -> Result<(MotionSequence, FitReport)> {
    motion.validate(source_rig)?;
    if corr.entries.len() != target_rig.template().len() {
        return Err(Error::DimensionMismatch {
            what: "correspondence entries vs target vertices".into(),
            expected: target_rig.template().len(),
            got: corr.entries.len(),
        });
    }
    let targets: Vec<Vec<Vec3>> = motion
        .frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let posed = skin_mesh(source_rig, &motion.identity, f).map_err(|e| e.at_frame(k))?;
            retopologize(&posed, source_rig.faces(), corr)
        })
        .collect::<Result<_>>()?;
    fit_parameters(target_rig, &targets, &motion.times(), motion.rate_hz, cfg)
}

/// Reads a motion file and a rig, checking they agree.
pub fn load_motion_for(rig: &RigModel, path: &Path) -> Result<MotionSequence> {
    let m = read_motion(path)?;
    m.validate(rig).map_err(|e| e.in_file(path))?;
    Ok(m)
}

/// Writes a trajectory list under `dir` (convenience for CLI dumps).
pub fn write_trajectories(dir: &Path, named: &[(&str, &Trajectory)]) -> Result<()> {
    for (name, t) in named {
        write_trajectory_csv(dir.join(name), t)?;
    }
    Ok(())
}
