//! Replayable measurement log: line-delimited records with a schema header.
//!
//! One line per measurement. The first field is the record tag, the second
//! the timestamp in seconds with nine decimal digits; type-specific numeric
//! fields follow (twelve decimals, so zero-noise logs replay to within the
//! factor tolerances). A log written with a fixed seed is byte-identical
//! across runs.
//!
//! ```text
//! # svlog 1
//! IMU t wx wy wz ax ay az
//! CAM t frame_id landmark_id u_left v_left u_right v_right descriptor_hex
//! SON t range head_angle
//! DEP t reading
//! GT  t px py pz qw qx qy qz vx vy vz
//! ```

use crate::factors::{DepthMeasurement, SonarMeasurement};
use crate::geometry::{Quaternion, RobotState};
use crate::imu::ImuSample;
use crate::loop_closure::BinaryDescriptor;
use nalgebra::{Vector2, Vector3};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("records are not time-sorted at line {0}")]
    NotSorted(usize),
}

/// One stereo feature observation within a camera frame.
#[derive(Debug, Clone)]
pub struct CameraFeature {
    pub landmark_id: u64,
    pub left_px: Vector2<f64>,
    pub right_px: Vector2<f64>,
    pub descriptor: BinaryDescriptor,
}

#[derive(Debug, Clone)]
pub enum LogRecord {
    Imu(ImuSample),
    Camera { t: f64, frame_id: u64, feature: CameraFeature },
    Sonar(SonarMeasurement),
    Depth(DepthMeasurement),
    GroundTruth { t: f64, state: RobotState },
}

impl LogRecord {
    pub fn t(&self) -> f64 {
        match self {
            LogRecord::Imu(s) => s.t,
            LogRecord::Camera { t, .. } => *t,
            LogRecord::Sonar(s) => s.t,
            LogRecord::Depth(d) => d.t,
            LogRecord::GroundTruth { t, .. } => *t,
        }
    }

    /// Stable ordering of co-timestamped records (ground truth first so a
    /// replayer sees the reference before the frame).
    fn tag_rank(&self) -> u8 {
        match self {
            LogRecord::GroundTruth { .. } => 0,
            LogRecord::Imu(_) => 1,
            LogRecord::Depth(_) => 2,
            LogRecord::Sonar(_) => 3,
            LogRecord::Camera { .. } => 4,
        }
    }
}

/// A time-sorted measurement stream with ground truth.
#[derive(Debug, Default)]
pub struct MeasurementLog {
    pub records: Vec<LogRecord>,
}

impl MeasurementLog {
    /// Stable-sorts the records by timestamp (ties keep sensor order).
    pub fn sort(&mut self) {
        self.records
            .sort_by(|a, b| a.t().partial_cmp(&b.t()).unwrap().then(a.tag_rank().cmp(&b.tag_rank())));
    }

    pub fn write(&self, path: &Path) -> Result<(), LogError> {
        for (k, pair) in self.records.windows(2).enumerate() {
            if pair[1].t() < pair[0].t() {
                return Err(LogError::NotSorted(k + 1));
            }
        }
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "# svlog {LOG_SCHEMA_VERSION}")?;
        writeln!(w, "# IMU t wx wy wz ax ay az")?;
        writeln!(w, "# CAM t frame_id landmark_id u_left v_left u_right v_right descriptor_hex")?;
        writeln!(w, "# SON t range head_angle")?;
        writeln!(w, "# DEP t reading")?;
        writeln!(w, "# GT t px py pz qw qx qy qz vx vy vz")?;
        for rec in &self.records {
            match rec {
                LogRecord::Imu(s) => writeln!(
                    w,
                    "IMU {:.9} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12}",
                    s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
                )?,
                LogRecord::Camera { t, frame_id, feature } => writeln!(
                    w,
                    "CAM {:.9} {} {} {:.12} {:.12} {:.12} {:.12} {}",
                    t,
                    frame_id,
                    feature.landmark_id,
                    feature.left_px.x,
                    feature.left_px.y,
                    feature.right_px.x,
                    feature.right_px.y,
                    feature.descriptor.to_hex()
                )?,
                LogRecord::Sonar(s) => {
                    writeln!(w, "SON {:.9} {:.12} {:.12}", s.t, s.range, s.head_angle)?
                }
                LogRecord::Depth(d) => writeln!(w, "DEP {:.9} {:.12}", d.t, d.reading)?,
                LogRecord::GroundTruth { t, state } => writeln!(
                    w,
                    "GT {:.9} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12}",
                    t,
                    state.position.x,
                    state.position.y,
                    state.position.z,
                    state.orientation.w,
                    state.orientation.x,
                    state.orientation.y,
                    state.orientation.z,
                    state.velocity.x,
                    state.velocity.y,
                    state.velocity.z
                )?,
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<MeasurementLog, LogError> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut records = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_ascii_whitespace();
            let tag = it.next().unwrap();
            let fields: Vec<&str> = it.collect();
            let bad = |reason: &str| LogError::Parse { line: idx + 1, reason: reason.into() };
            let f = |s: &str| -> Result<f64, LogError> {
                s.parse::<f64>().map_err(|_| bad(&format!("bad float {s}")))
            };
            match tag {
                "IMU" => {
                    if fields.len() != 7 {
                        return Err(bad("IMU needs 7 fields"));
                    }
                    records.push(LogRecord::Imu(ImuSample {
                        t: f(fields[0])?,
                        gyro: Vector3::new(f(fields[1])?, f(fields[2])?, f(fields[3])?),
                        accel: Vector3::new(f(fields[4])?, f(fields[5])?, f(fields[6])?),
                    }));
                }
                "CAM" => {
                    if fields.len() != 8 {
                        return Err(bad("CAM needs 8 fields"));
                    }
                    let descriptor = BinaryDescriptor::from_hex(fields[7])
                        .ok_or_else(|| bad("bad descriptor hex"))?;
                    records.push(LogRecord::Camera {
                        t: f(fields[0])?,
                        frame_id: fields[1].parse().map_err(|_| bad("bad frame id"))?,
                        feature: CameraFeature {
                            landmark_id: fields[2].parse().map_err(|_| bad("bad landmark id"))?,
                            left_px: Vector2::new(f(fields[3])?, f(fields[4])?),
                            right_px: Vector2::new(f(fields[5])?, f(fields[6])?),
                            descriptor,
                        },
                    });
                }
                "SON" => {
                    if fields.len() != 3 {
                        return Err(bad("SON needs 3 fields"));
                    }
                    records.push(LogRecord::Sonar(SonarMeasurement {
                        t: f(fields[0])?,
                        range: f(fields[1])?,
                        head_angle: f(fields[2])?,
                    }));
                }
                "DEP" => {
                    if fields.len() != 2 {
                        return Err(bad("DEP needs 2 fields"));
                    }
                    records.push(LogRecord::Depth(DepthMeasurement {
                        t: f(fields[0])?,
                        reading: f(fields[1])?,
                    }));
                }
                "GT" => {
                    if fields.len() != 11 {
                        return Err(bad("GT needs 11 fields"));
                    }
                    records.push(LogRecord::GroundTruth {
                        t: f(fields[0])?,
                        state: RobotState {
                            position: Vector3::new(f(fields[1])?, f(fields[2])?, f(fields[3])?),
                            orientation: Quaternion::new(
                                f(fields[4])?,
                                f(fields[5])?,
                                f(fields[6])?,
                                f(fields[7])?,
                            ),
                            velocity: Vector3::new(f(fields[8])?, f(fields[9])?, f(fields[10])?),
                            gyro_bias: Vector3::zeros(),
                            accel_bias: Vector3::zeros(),
                        },
                    });
                }
                other => return Err(bad(&format!("unknown tag {other}"))),
            }
        }
        Ok(MeasurementLog { records })
    }
}
