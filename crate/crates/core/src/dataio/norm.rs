use super::clip::MotionClip;
use super::condition::{extract_condition, COND_DIM};
use crate::error::{Error, Result};
use crate::skeleton::{project_to_scale_flat, ScaleId, SkeletonDef};

/// Standard deviations are floored here so constant channels stay finite.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel mean and standard deviation of row-major data.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Identity statistics (mean 0, std 1).
    pub fn identity(dim: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits over every `dim`-wide row of every slice in `data`.
    pub fn fit<'a>(dim: usize, data: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut rows = 0usize;
        let parts: Vec<&[f64]> = data.into_iter().collect();
        for part in &parts {
            if part.len() % dim != 0 {
                return Err(Error::shape("ChannelStats::fit", format!("{} not a multiple of {dim}", part.len())));
            }
            for row in part.chunks_exact(dim) {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
                rows += 1;
            }
        }
        if rows == 0 {
            return Err(Error::EmptyDataset);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
        for part in &parts {
            for row in part.chunks_exact(dim) {
                for ((q, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *q += (v - m) * (v - m);
                }
            }
        }
        let std = sq
            .iter()
            .map(|q| (q / rows as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(ChannelStats { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, data: &mut [f64]) {
        for row in data.chunks_exact_mut(self.dim()) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn invert(&self, data: &mut [f64]) {
        for row in data.chunks_exact_mut(self.dim()) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
    }
}

/// Normalization for conditions and for each scale's targets.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub cond: ChannelStats,
    pub targets: [ChannelStats; 3],
}

impl NormStats {
    pub fn target(&self, id: ScaleId) -> &ChannelStats {
        &self.targets[id.index()]
    }
}

/// Raw (unnormalized) per-scale targets of a clip, each flattened `N × dim`.
pub fn scale_targets(clip: &MotionClip, skel: &SkeletonDef) -> [Vec<f64>; 3] {
    ScaleId::ALL.map(|id| {
        let spec = skel.scale(id);
        let mut out = Vec::with_capacity(clip.len() * spec.dim());
        for f in &clip.frames {
            if id == ScaleId::S3 {
                f.write_6d(&mut out);
            } else {
                project_to_scale_flat(&f.local_rot, spec, &mut out);
            }
        }
        out
    })
}

pub fn fit_normstats(clips: &[MotionClip], skel: &SkeletonDef) -> Result<NormStats> {
    if clips.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let conds: Vec<_> = clips.iter().map(|c| extract_condition(c, skel)).collect();
    let targets: Vec<[Vec<f64>; 3]> = clips.iter().map(|c| scale_targets(c, skel)).collect();
    let cond = ChannelStats::fit(COND_DIM, conds.iter().map(|c| c.as_flat()))?;
    let mut fitted = Vec::with_capacity(3);
    for id in ScaleId::ALL {
        let dim = skel.scale(id).dim();
        fitted.push(ChannelStats::fit(dim, targets.iter().map(|t| t[id.index()].as_slice()))?);
    }
    let [s1, s2, s3]: [ChannelStats; 3] = fitted.try_into().unwrap();
    Ok(NormStats {
        cond,
        targets: [s1, s2, s3],
    })
}
