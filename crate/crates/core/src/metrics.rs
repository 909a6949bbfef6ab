//! Reconstruction metrics.
//!
//! Units: MPJRE in degrees, position errors in centimeters, MPJVE in cm/s,
//! Jitter in 10² m/s³. Velocities and jerk use backward differences at the
//! clip frame rate.

use serde::{Deserialize, Serialize};

use crate::dataio::MotionClip;
use crate::error::{Error, Result};
use crate::rotmath::{geodesic_angle_deg, Vec3};
use crate::skeleton::{forward_kinematics, SkeletonDef, JOINT_COUNT};

/// Joint sets for the region position errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionSpec {
    pub root: Vec<usize>,
    pub hand: Vec<usize>,
    pub upper: Vec<usize>,
    pub lower: Vec<usize>,
}

impl Default for RegionSpec {
    fn default() -> Self {
        RegionSpec {
            root: vec![0],
            hand: vec![20, 21],
            upper: vec![3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21],
            lower: vec![0, 1, 2, 4, 5, 7, 8, 10, 11],
        }
    }
}

impl RegionSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, set) in [("root", &self.root), ("hand", &self.hand), ("upper", &self.upper), ("lower", &self.lower)] {
            if set.is_empty() || set.iter().any(|&j| j >= JOINT_COUNT) {
                return Err(Error::InvalidConfig(format!("region {name} must list joints in 0..{JOINT_COUNT}")));
            }
        }
        Ok(())
    }
}

/// Per-clip (or aggregated) metric values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub mpjre: f64,
    pub mpjpe: f64,
    pub mpjve: f64,
    pub jitter: f64,
    /// Jitter of the reference clip, for comparison.
    pub gt_jitter: f64,
    pub root_pe: f64,
    pub hand_pe: f64,
    pub upper_pe: f64,
    pub lower_pe: f64,
}

/// Global joint positions split into root translation plus root-relative
/// offsets, so differences of rigidly translating clips cancel exactly.
struct Track {
    root: Vec<Vec3>,
    rel: Vec<[Vec3; JOINT_COUNT]>,
}

impl Track {
    fn new(clip: &MotionClip, skel: &SkeletonDef) -> Self {
        let rel = clip
            .frames
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.root_trans = Vec3::zeros();
                forward_kinematics(&q, skel).global_pos
            })
            .collect();
        Track {
            root: clip.frames.iter().map(|p| p.root_trans).collect(),
            rel,
        }
    }

    fn len(&self) -> usize {
        self.root.len()
    }

    fn at(&self, n: usize, j: usize) -> Vec3 {
        self.root[n] + self.rel[n][j]
    }

    /// Backward difference of order 1 or 3 at frame `n`.
    fn diff(&self, n: usize, j: usize, order: u32) -> Vec3 {
        let d = |v: &dyn Fn(usize) -> Vec3| match order {
            1 => v(n) - v(n - 1),
            _ => (v(n) - v(n - 3)) - 3.0 * (v(n - 1) - v(n - 2)),
        };
        d(&|k| self.root[k]) + d(&|k| self.rel[k][j])
    }
}


fn check_pair(pred: &MotionClip, gt: &MotionClip) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.fps != gt.fps {
        return Err(Error::InvalidArgument(format!("frame rates differ: {} vs {}", pred.fps, gt.fps)));
    }
    Ok(())
}

/// Mean geodesic angle between local joint rotations.
pub fn mpjre(pred: &MotionClip, gt: &MotionClip) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut sum = 0.0;
    for (a, b) in pred.frames.iter().zip(&gt.frames) {
        for (ra, rb) in a.local_rot.iter().zip(&b.local_rot) {
            sum += geodesic_angle_deg(ra, rb);
        }
    }
    Ok(sum / (pred.len() * JOINT_COUNT) as f64)
}

fn pe(pp: &Track, gp: &Track, joints: &[usize]) -> f64 {
    let mut sum = 0.0;
    for n in 0..pp.len() {
        for &j in joints {
            sum += (pp.at(n, j) - gp.at(n, j)).norm();
        }
    }
    100.0 * sum / (pp.len() * joints.len()) as f64
}

fn ve(pp: &Track, gp: &Track, fps: f64) -> f64 {
    let mut sum = 0.0;
    for n in 1..pp.len() {
        for j in 0..JOINT_COUNT {
            let dv = pp.diff(n, j, 1) - gp.diff(n, j, 1);
            sum += dv.norm() * fps;
        }
    }
    100.0 * sum / ((pp.len() - 1) * JOINT_COUNT) as f64
}

fn jerk(p: &Track, fps: f64) -> f64 {
    let mut sum = 0.0;
    for n in 3..p.len() {
        for j in 0..JOINT_COUNT {
            sum += p.diff(n, j, 3).norm() * fps.powi(3);
        }
    }
    sum / ((p.len() - 3) * JOINT_COUNT) as f64 / 100.0
}

pub fn mpjpe(pred: &MotionClip, gt: &MotionClip, skel: &SkeletonDef) -> Result<f64> {
    region_pe(pred, gt, skel, &(0..JOINT_COUNT).collect::<Vec<_>>())
}

pub fn region_pe(pred: &MotionClip, gt: &MotionClip, skel: &SkeletonDef, region: &[usize]) -> Result<f64> {
    check_pair(pred, gt)?;
    if region.is_empty() || region.iter().any(|&j| j >= JOINT_COUNT) {
        return Err(Error::InvalidArgument(format!("bad region {region:?}")));
    }
    Ok(pe(&Track::new(pred, skel), &Track::new(gt, skel), region))
}

pub fn mpjve(pred: &MotionClip, gt: &MotionClip, skel: &SkeletonDef) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(ve(&Track::new(pred, skel), &Track::new(gt, skel), pred.fps))
}

/// Mean jerk magnitude of the clip's global joint positions.
pub fn jitter(clip: &MotionClip, skel: &SkeletonDef) -> Result<f64> {
    if clip.len() < 4 {
        return Err(Error::ClipTooShort { len: clip.len(), need: 4 });
    }
    Ok(jerk(&Track::new(clip, skel), clip.fps))
}

/// All metrics for one predicted clip against its reference.
pub fn evaluate(pred: &MotionClip, gt: &MotionClip, skel: &SkeletonDef, regions: &RegionSpec) -> Result<EvalReport> {
    check_pair(pred, gt)?;
    if pred.len() < 4 {
        return Err(Error::ClipTooShort { len: pred.len(), need: 4 });
    }
    regions.validate()?;
    let pp = Track::new(pred, skel);
    let gp = Track::new(gt, skel);
    let all: Vec<usize> = (0..JOINT_COUNT).collect();
    Ok(EvalReport {
        frames: pred.len(),
        mpjre: mpjre(pred, gt)?,
        mpjpe: pe(&pp, &gp, &all),
        mpjve: ve(&pp, &gp, pred.fps),
        jitter: jerk(&pp, pred.fps),
        gt_jitter: jerk(&gp, gt.fps),
        root_pe: pe(&pp, &gp, &regions.root),
        hand_pe: pe(&pp, &gp, &regions.hand),
        upper_pe: pe(&pp, &gp, &regions.upper),
        lower_pe: pe(&pp, &gp, &regions.lower),
    })
}

/// Frame-count-weighted mean of per-clip reports.
pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
    let total: usize = reports.iter().map(|r| r.frames).sum();
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    let w = |f: fn(&EvalReport) -> f64| reports.iter().map(|r| f(r) * r.frames as f64).sum::<f64>() / total as f64;
    Ok(EvalReport {
        frames: total,
        mpjre: w(|r| r.mpjre),
        mpjpe: w(|r| r.mpjpe),
        mpjve: w(|r| r.mpjve),
        jitter: w(|r| r.jitter),
        gt_jitter: w(|r| r.gt_jitter),
        root_pe: w(|r| r.root_pe),
        hand_pe: w(|r| r.hand_pe),
        upper_pe: w(|r| r.upper_pe),
        lower_pe: w(|r| r.lower_pe),
    })
}
