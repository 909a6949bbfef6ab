use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotmath::Vec3;
use crate::skeleton::{Pose, JOINT_COUNT};

pub const DEFAULT_FPS: f64 = 60.0;

pub const MOTION_MAGIC: &[u8; 4] = b"MAGE";
pub const MOTION_VERSION: u32 = 1;

/// A sequence of body poses sampled at a fixed frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub fps: f64,
    pub frames: Vec<Pose>,
}

impl MotionClip {
    pub fn new(fps: f64, frames: Vec<Pose>) -> Result<Self> {
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        if frames.len() < 2 {
            return Err(Error::ClipTooShort {
                len: frames.len(),
                need: 2,
            });
        }
        Ok(MotionClip { fps, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames `[start, start + len)` as a new clip.
    pub fn slice(&self, start: usize, len: usize) -> MotionClip {
        MotionClip {
            fps: self.fps,
            frames: self.frames[start..start + len].to_vec(),
        }
    }

    /// Flat `N × 132` matrix of 6D local rotations.
    pub fn to_6d(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * JOINT_COUNT * 6);
        for f in &self.frames {
            f.write_6d(&mut out);
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.len() * (3 + JOINT_COUNT * 6) * 4);
        buf.extend_from_slice(MOTION_MAGIC);
        buf.extend_from_slice(&MOTION_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.fps as f32).to_le_bytes());
        buf.extend_from_slice(&(JOINT_COUNT as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for f in &self.frames {
            for v in f.root_trans.iter() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            for v in f.to_6d() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("motion file: {m}"));
        if bytes.len() < 20 || &bytes[..4] != MOTION_MAGIC {
            return Err(bad("missing MAGE header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != MOTION_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let fps = f32::from_le_bytes(bytes[8..12].try_into().unwrap()) as f64;
        let joints = u32_at(12) as usize;
        if joints != JOINT_COUNT {
            return Err(bad(&format!("expected {JOINT_COUNT} joints, found {joints}")));
        }
        let n = u32_at(16) as usize;
        let per = (3 + JOINT_COUNT * 6) * 4;
        if bytes.len() != 20 + n * per {
            return Err(bad(&format!(
                "{} bytes, expected {} for {n} frames",
                bytes.len(),
                20 + n * per
            )));
        }
        let vals: Vec<f64> = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let frames = vals
            .chunks_exact(3 + JOINT_COUNT * 6)
            .map(|fr| Pose::from_6d(&fr[3..], Vec3::new(fr[0], fr[1], fr[2])))
            .collect::<Result<Vec<_>>>()?;
        MotionClip::new(fps, frames)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One entry of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    pub frames: usize,
}

/// TOML list of motion files making up a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fps: f64,
    #[serde(default)]
    pub clip: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("manifest {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Loads every listed clip; relative paths resolve against `base`.
    pub fn load_clips(&self, base: &Path) -> Result<Vec<MotionClip>> {
        self.clip
            .iter()
            .map(|e| {
                let p = if e.path.is_absolute() {
                    e.path.clone()
                } else {
                    base.join(&e.path)
                };
                MotionClip::load(&p)
            })
            .collect()
    }
}

/// Writes clips as `clip_NNNN.mage` next to a `manifest.toml`.
pub fn write_dataset(dir: &Path, clips: &[MotionClip], kinds: &[String]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        fps: clips.first().map_or(DEFAULT_FPS, |c| c.fps),
        clip: Vec::with_capacity(clips.len()),
    };
    for (i, c) in clips.iter().enumerate() {
        let name = format!("clip_{i:04}.mage");
        c.save(&dir.join(&name))?;
        manifest.clip.push(ManifestEntry {
            path: name.into(),
            kind: kinds.get(i).cloned(),
            frames: c.len(),
        });
    }
    let path = dir.join("manifest.toml");
    manifest.save(&path)?;
    Ok(path)
}

/// Loads a dataset from a directory holding `manifest.toml`, a manifest
/// file, or a single motion file.
pub fn load_motion_set(path: &Path) -> Result<Vec<MotionClip>> {
    let manifest = if path.is_dir() {
        Some(path.join("manifest.toml"))
    } else if path.extension().is_some_and(|e| e == "toml") {
        Some(path.to_path_buf())
    } else {
        None
    };
    let clips = match manifest {
        Some(m) => {
            let base = m.parent().map(Path::to_path_buf).unwrap_or_default();
            Manifest::load(&m)?.load_clips(&base)?
        }
        None => vec![MotionClip::load(path)?],
    };
    if clips.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(clips)
}
