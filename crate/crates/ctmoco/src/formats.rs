//! JSON formats for motion trajectories and optimizer traces.

use std::io::Write;
use std::path::Path;

use ctmoco_core::motion::MotionSpline;
use ctmoco_core::optimizer::OptRecord;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const SPLINE_FAMILY: &str = "catmull-rom/clamped/uniform-views";
/// View `i` is acquired with every geometry point moved by `p ↦ Rot(r)·p + t`.
pub const MOTION_CONVENTION: &str = "geometry-rigid:p'=Rot(r)p+t;r-ccw";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionFile {
    pub family: String,
    pub convention: String,
    pub n_views: usize,
    /// Node positions in view-index units.
    pub node_times: Vec<f64>,
    pub tx_mm: Vec<f64>,
    pub ty_mm: Vec<f64>,
    pub r_deg: Vec<f64>,
}

impl MotionFile {
    pub fn from_spline(spline: &MotionSpline) -> Self {
        let [tx, ty, r] = spline.values().clone();
        Self {
            family: SPLINE_FAMILY.into(),
            convention: MOTION_CONVENTION.into(),
            n_views: spline.n_views(),
            node_times: (0..spline.nodes()).map(|k| spline.node_time(k)).collect(),
            tx_mm: tx,
            ty_mm: ty,
            r_deg: r,
        }
    }

    pub fn to_spline(&self) -> ctmoco_core::Result<MotionSpline> {
        let spline = MotionSpline::new(self.n_views, [self.tx_mm.clone(), self.ty_mm.clone(), self.r_deg.clone()])?;
        let expected: Vec<f64> = (0..spline.nodes()).map(|k| spline.node_time(k)).collect();
        if self.node_times != expected {
            return Err(ctmoco_core::Error::InvalidArgument(
                "node times must be uniform over the views".into(),
            ));
        }
        Ok(spline)
    }
}

pub fn write_motion(spline: &MotionSpline, path: &Path) -> Result<()> {
    io::write_json(path, &MotionFile::from_spline(spline))
}

pub fn read_motion(path: &Path) -> Result<MotionSpline> {
    let file: MotionFile = io::read_json(path)?;
    if file.family != SPLINE_FAMILY || file.convention != MOTION_CONVENTION {
        return Err(Error::format(
            path,
            format!("unsupported spline family/convention {:?} / {:?}", file.family, file.convention),
        ));
    }
    file.to_spline().map_err(|e| Error::format(path, e.to_string()))
}

/// One JSON object per line.
pub fn write_trace(trace: &[OptRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for rec in trace {
        serde_json::to_writer(&mut buf, rec).map_err(|e| Error::format(path, e.to_string()))?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    io::write_bytes(path, &buf)
}

pub fn read_trace(path: &Path) -> Result<Vec<OptRecord>> {
    let text = String::from_utf8(io::read_bytes(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}
