use std::path::Path;

use super::clip::MotionClip;
use crate::error::{Error, Result};
use crate::rotmath::{angular_velocity, linear_velocity, sixd_encode, RotM, Vec3};
use crate::skeleton::{forward_kinematics, SkeletonDef};

/// Features per observed joint: rotation 6, angular velocity 6, position 3, velocity 3.
pub const FEATURES_PER_JOINT: usize = 18;
pub const OBSERVED_JOINTS: usize = 3;
/// Width of one flattened condition frame.
pub const COND_DIM: usize = FEATURES_PER_JOINT * OBSERVED_JOINTS;

pub const COND_MAGIC: &[u8; 4] = b"MAGC";
pub const COND_VERSION: u32 = 1;

/// Per-frame head and wrist observations, stored frame-major as `N × 54`.
///
/// Within a frame the joints are head, left wrist, right wrist, each laid
/// out as `(r6, ω6, p3, v3)`. Velocities are per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCondition {
    pub fps: f64,
    features: Vec<f64>,
}

impl SparseCondition {
    pub fn new(fps: f64, features: Vec<f64>) -> Result<Self> {
        if features.is_empty() || features.len() % COND_DIM != 0 {
            return Err(Error::shape(
                "SparseCondition::new",
                format!("{} values is not a positive multiple of {COND_DIM}", features.len()),
            ));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteValue("SparseCondition"));
        }
        Ok(SparseCondition { fps, features })
    }

    pub fn len(&self) -> usize {
        self.features.len() / COND_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Shape as `[N, 3, 18]`.
    pub fn shape(&self) -> [usize; 3] {
        [self.len(), OBSERVED_JOINTS, FEATURES_PER_JOINT]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.features
    }

    pub fn frame(&self, n: usize) -> &[f64] {
        &self.features[n * COND_DIM..(n + 1) * COND_DIM]
    }

    /// The 18 features of observed joint `k` (0 head, 1 left wrist, 2 right wrist).
    pub fn joint(&self, n: usize, k: usize) -> &[f64] {
        &self.frame(n)[k * FEATURES_PER_JOINT..(k + 1) * FEATURES_PER_JOINT]
    }

    pub fn position(&self, n: usize, k: usize) -> Vec3 {
        let j = self.joint(n, k);
        Vec3::new(j[12], j[13], j[14])
    }

    pub fn head_positions(&self) -> Vec<Vec3> {
        (0..self.len()).map(|n| self.position(n, 0)).collect()
    }

    pub fn slice(&self, start: usize, len: usize) -> SparseCondition {
        SparseCondition {
            fps: self.fps,
            features: self.features[start * COND_DIM..(start + len) * COND_DIM].to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.features.len() * 4);
        buf.extend_from_slice(COND_MAGIC);
        buf.extend_from_slice(&COND_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.fps as f32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for v in &self.features {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("condition file: {m}"));
        if bytes.len() < 16 || &bytes[..4] != COND_MAGIC {
            return Err(bad("missing MAGC header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != COND_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let fps = f32::from_le_bytes(bytes[8..12].try_into().unwrap()) as f64;
        let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if bytes.len() != 16 + n * COND_DIM * 4 {
            return Err(bad(format!("{} bytes does not hold {n} frames", bytes.len())));
        }
        let features = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        SparseCondition::new(fps, features)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Reads either a conditions file or a motion file, extracting
    /// conditions from the latter.
    pub fn load_any(path: &Path, skel: &SkeletonDef) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(COND_MAGIC) {
            Self::from_bytes(&bytes)
        } else {
            Ok(extract_condition(&MotionClip::from_bytes(&bytes)?, skel))
        }
    }
}

fn push_joint(out: &mut Vec<f64>, r: &RotM, w: &RotM, p: &Vec3, v: &Vec3) {
    out.extend_from_slice(&sixd_encode(r).0);
    out.extend_from_slice(&sixd_encode(w).0);
    out.extend_from_slice(p.as_slice());
    out.extend_from_slice(v.as_slice());
}

/// Observed-joint features for every frame of `clip`.
///
/// Frame 0 has no predecessor, so its angular velocity encodes the identity
/// and its linear velocity is zero.
pub fn extract_condition(clip: &MotionClip, skel: &SkeletonDef) -> SparseCondition {
    let mut features = Vec::with_capacity(clip.len() * COND_DIM);
    let mut prev: Option<([RotM; 3], [Vec3; 3])> = None;
    for pose in &clip.frames {
        let g = forward_kinematics(pose, skel);
        let rots = skel.observed.map(|j| g.global_rot[j]);
        let pos = skel.observed.map(|j| g.global_pos[j]);
        for k in 0..OBSERVED_JOINTS {
            let (w, v) = match &prev {
                Some((pr, pp)) => (angular_velocity(&pr[k], &rots[k]), linear_velocity(&pp[k], &pos[k])),
                None => (RotM::identity(), Vec3::zeros()),
            };
            push_joint(&mut features, &rots[k], &w, &pos[k], &v);
        }
        prev = Some((rots, pos));
    }
    SparseCondition {
        fps: clip.fps,
        features,
    }
}
