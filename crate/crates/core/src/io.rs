//! File formats: JSON for structured artifacts, CSV for dense streams.
//!
//! Floats are written with Rust's shortest round-trip representation, so a
//! write → read → write cycle reproduces the file byte for byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{PoseSample, RigidTransform, Trajectory, Vec3};
use crate::rig::{MotionSequence, PoseFrame};

pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json_string(value)?).map_err(|e| Error::from(e).in_file(path))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()).in_file(path))
}

/// `[tx, ty, tz, qw, qx, qy, qz]`
pub fn pose_to_array(p: &RigidTransform) -> [f64; 7] {
    let q = p.wxyz();
    [
        p.translation.x,
        p.translation.y,
        p.translation.z,
        q[0],
        q[1],
        q[2],
        q[3],
    ]
}

pub fn pose_from_array(a: &[f64; 7]) -> Result<RigidTransform> {
    RigidTransform::from_wxyz([a[3], a[4], a[5], a[6]], Vec3::new(a[0], a[1], a[2]))
}

const TRAJ_HEADER: [&str; 8] = ["t_ns", "tx", "ty", "tz", "qw", "qx", "qy", "qz"];

pub fn write_trajectory_csv(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    let path = path.as_ref();
    let inner = || -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(TRAJ_HEADER)?;
        for s in traj.samples() {
            let a = pose_to_array(&s.pose);
            let mut rec = vec![s.t_ns.to_string()];
            rec.extend(a.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    };
    inner().map_err(|e| e.in_file(path))
}

pub fn read_trajectory_csv(path: impl AsRef<Path>, frame_id: &str) -> Result<Trajectory> {
    let path = path.as_ref();
    let inner = || -> Result<Trajectory> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != TRAJ_HEADER {
            return Err(Error::Parse(format!(
                "expected header {}, got {}",
                TRAJ_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut samples = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let t_ns: i64 = rec[0]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: bad t_ns '{}'", row + 1, &rec[0])))?;
            let mut a = [0.0; 7];
            for k in 0..7 {
                a[k] = parse_f64(&rec[k + 1], row + 1)?;
            }
            samples.push(PoseSample {
                t_ns,
                pose: pose_from_array(&a)?,
            });
        }
        Trajectory::new(frame_id, samples)
    };
    inner().map_err(|e| e.in_file(path))
}

fn parse_f64(s: &str, row: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("row {row}: bad number '{s}'")))
}

pub fn write_points_csv(path: impl AsRef<Path>, points: &[Vec3]) -> Result<()> {
    let path = path.as_ref();
    let inner = || -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "z"])?;
        for p in points {
            w.write_record([p.x.to_string(), p.y.to_string(), p.z.to_string()])?;
        }
        w.flush()?;
        Ok(())
    };
    inner().map_err(|e| e.in_file(path))
}

pub fn read_points_csv(path: impl AsRef<Path>) -> Result<Vec<Vec3>> {
    let path = path.as_ref();
    let inner = || -> Result<Vec<Vec3>> {
        let mut r = csv::Reader::from_path(path)?;
        let mut out = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::Parse(format!("row {}: expected 3 columns", row + 1)));
            }
            out.push(Vec3::new(
                parse_f64(&rec[0], row + 1)?,
                parse_f64(&rec[1], row + 1)?,
                parse_f64(&rec[2], row + 1)?,
            ));
        }
        Ok(out)
    };
    inner().map_err(|e| e.in_file(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t_ns: i64,
    pub root: [f64; 7],
    pub pose: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionFile {
    pub rate_hz: f64,
    pub identity: Vec<f64>,
    pub frames: Vec<FrameRecord>,
}

impl MotionFile {
    pub fn from_motion(m: &MotionSequence) -> Self {
        Self {
            rate_hz: m.rate_hz,
            identity: m.identity.clone(),
            frames: m
                .frames
                .iter()
                .map(|f| FrameRecord {
                    t_ns: f.t_ns,
                    root: pose_to_array(&f.root),
                    pose: f.pose.clone(),
                })
                .collect(),
        }
    }

    pub fn into_motion(self) -> Result<MotionSequence> {
        let frames = self
            .frames
            .into_iter()
            .enumerate()
            .map(|(i, f)| {
                Ok(PoseFrame {
                    t_ns: f.t_ns,
                    root: pose_from_array(&f.root).map_err(|e| e.at_frame(i))?,
                    pose: f.pose,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MotionSequence {
            identity: self.identity,
            frames,
            rate_hz: self.rate_hz,
        })
    }
}

pub fn write_motion(path: impl AsRef<Path>, m: &MotionSequence) -> Result<()> {
    write_json(path, &MotionFile::from_motion(m))
}

pub fn read_motion(path: impl AsRef<Path>) -> Result<MotionSequence> {
    let path = path.as_ref();
    read_json::<MotionFile>(path)?
        .into_motion()
        .map_err(|e| e.in_file(path))
}

/// Writes one JSON document per line.
pub fn write_json_lines<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let inner = || -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for r in rows {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    };
    inner().map_err(|e| e.in_file(path))
}

pub fn read_json_lines<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(e.to_string()).in_file(path)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn trajectory_csv_round_trips_bytewise(
            vals in prop::collection::vec((prop::array::uniform3(-1e3..1e3f64), prop::array::uniform3(-3.0..3.0f64)), 1..30)
        ) {
            let samples = vals.iter().enumerate().map(|(i, (t, w))| PoseSample {
                t_ns: i as i64 * 4_166_667 - 7,
                pose: RigidTransform::new(UnitQuaternion::from_scaled_axis(Vec3::from(*w)), Vec3::from(*t)),
            }).collect();
            let traj = Trajectory::new("world", samples).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let a = dir.path().join("a.csv");
            let b = dir.path().join("b.csv");
            write_trajectory_csv(&a, &traj).unwrap();
            let back = read_trajectory_csv(&a, "world").unwrap();
            write_trajectory_csv(&b, &back).unwrap();
            prop_assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
            for (x, y) in traj.samples().iter().zip(back.samples()) {
                prop_assert_eq!(x.t_ns, y.t_ns);
                prop_assert!(x.pose.translation_distance_to(&y.pose) == 0.0);
            }
        }
    }

    #[test]
    fn trajectory_header_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        fs::write(&p, "t,x\n1,2\n").unwrap();
        assert!(matches!(
            read_trajectory_csv(&p, "w").unwrap_err().root_cause(),
            Error::Parse(_)
        ));
    }
}
