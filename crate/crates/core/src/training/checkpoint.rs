use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{ChannelStats, NormStats};
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::model::{Mage, ModelConfig, ARCH_VERSION};
use crate::nncore::checkpoint::Archive;
use crate::nncore::Tensor;

const BETA_KEY: &str = "schedule.beta";

#[derive(Serialize, Deserialize)]
struct Header {
    arch_version: u32,
    model: ModelConfig,
    schedule: ScheduleKind,
    t_max: usize,
    steps_trained: usize,
}

/// Everything needed to run inference: weights, normalization and schedule.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Mage,
    pub norm: NormStats,
    pub schedule: NoiseSchedule,
    pub steps_trained: usize,
}

impl Checkpoint {
    /// Fails with `ConfigMismatch` unless the checkpoint was trained with `want`'s
    /// architecture (stage set, fusion, widths, window and schedule).
    pub fn ensure_config(&self, want: &ModelConfig) -> Result<()> {
        let have = self.model.config();
        if have != want {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has stages {:?} fusion {} latent {} blocks {:?} window {}, expected stages {:?} fusion {} latent {} blocks {:?} window {}",
                have.stages, have.fusion, have.latent_dim, have.blocks, have.window,
                want.stages, want.fusion, want.latent_dim, want.blocks, want.window,
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = self.model.config();
        let header = Header {
            arch_version: ARCH_VERSION,
            model: cfg.clone(),
            schedule: cfg.schedule,
            t_max: self.schedule.t_max(),
            steps_trained: self.steps_trained,
        };
        let mut tensors: Vec<(String, Tensor)> =
            self.model.params().named_values().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let mut stats = |name: &str, s: &ChannelStats| {
            tensors.push((format!("norm.{name}.mean"), vec_tensor(&s.mean)));
            tensors.push((format!("norm.{name}.std"), vec_tensor(&s.std)));
        };
        stats("cond", &self.norm.cond);
        for (k, s) in self.norm.targets.iter().enumerate() {
            stats(&format!("s{}", k + 1), s);
        }
        tensors.push((BETA_KEY.to_string(), vec_tensor(self.schedule.betas())));
        let archive = Archive {
            header: serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?,
            tensors,
        };
        let mut out = Vec::new();
        archive.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let archive = Archive::from_bytes(bytes)?;
        let header: Header = serde_json::from_str(&archive.header)
            .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        if header.arch_version != ARCH_VERSION {
            return Err(Error::ConfigMismatch(format!(
                "architecture version {} (this build reads {ARCH_VERSION})",
                header.arch_version
            )));
        }
        if header.model.schedule != header.schedule || header.model.t_max != header.t_max {
            return Err(Error::CorruptCheckpoint("schedule header disagrees with model config".into()));
        }
        let mut model = Mage::new(header.model, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| Error::CorruptCheckpoint(format!("model config: {e}")))?;
        let names: Vec<String> = model.params().named_values().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let t = archive
                .get(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing parameter {name}")))?;
            model
                .params_mut()
                .set(name, t.clone())
                .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        }
        let stats = |name: &str, dim: usize| -> Result<ChannelStats> {
            let get = |suffix: &str| -> Result<Vec<f64>> {
                let key = format!("norm.{name}.{suffix}");
                let t = archive.get(&key).ok_or_else(|| Error::CorruptCheckpoint(format!("missing {key}")))?;
                if t.len() != dim {
                    return Err(Error::CorruptCheckpoint(format!("{key} has {} values, expected {dim}", t.len())));
                }
                Ok(t.data().to_vec())
            };
            let s = ChannelStats { mean: get("mean")?, std: get("std")? };
            if s.std.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || s.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::CorruptCheckpoint(format!("norm.{name} is not finite and positive")));
            }
            Ok(s)
        };
        use crate::dataio::COND_DIM;
        use crate::skeleton::ScaleId;
        let norm = NormStats {
            cond: stats("cond", COND_DIM)?,
            targets: [
                stats("s1", ModelConfig::stage_dim(ScaleId::S1))?,
                stats("s2", ModelConfig::stage_dim(ScaleId::S2))?,
                stats("s3", ModelConfig::stage_dim(ScaleId::S3))?,
            ],
        };
        let betas = archive
            .get(BETA_KEY)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing {BETA_KEY}")))?;
        if betas.len() != header.t_max {
            return Err(Error::CorruptCheckpoint(format!("{} betas for T = {}", betas.len(), header.t_max)));
        }
        let schedule =
            NoiseSchedule::from_betas(betas.data().to_vec()).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        Ok(Checkpoint {
            model,
            norm,
            schedule,
            steps_trained: header.steps_trained,
        })
    }
}

fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::new(&[v.len()], v.to_vec()).expect("1-d shape matches")
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{fit_normstats, synth_dataset, MotionKind};
    use crate::diffusion::make_schedule;
    use crate::model::FusionMode;
    use crate::skeleton::{ScaleId, SkeletonDef};

    fn sample(stages: Vec<ScaleId>) -> Checkpoint {
        let cfg = ModelConfig {
            latent_dim: 8,
            blocks: [1, 1, 1],
            window: 8,
            stages,
            fusion: FusionMode::CF,
            t_max: 50,
            schedule: ScheduleKind::Linear,
        };
        let clips = synth_dataset(MotionKind::Squat, 2, 10, 30.0, 4).unwrap();
        Checkpoint {
            model: Mage::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap(),
            norm: fit_normstats(&clips, &SkeletonDef::default()).unwrap(),
            schedule: make_schedule(cfg.t_max, cfg.schedule).unwrap(),
            steps_trained: 17,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample(ScaleId::ALL.to_vec());
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model.config(), c.model.config());
        for ((na, a), (nb, b)) in back.model.params().named_values().zip(c.model.params().named_values()) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(back.norm, c.norm);
        assert_eq!(back.schedule.betas(), c.schedule.betas());
        assert_eq!(back.steps_trained, 17);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_is_corrupt() {
        let bytes = sample(vec![ScaleId::S3]).to_bytes().unwrap();
        for cut in [3, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
    }

    #[test]
    fn stage_set_mismatch_is_reported() {
        let c = sample(vec![ScaleId::S3]);
        let mut want = c.model.config().clone();
        assert!(c.ensure_config(&want).is_ok());
        want.stages = ScaleId::ALL.to_vec();
        assert!(matches!(c.ensure_config(&want), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.magk");
        let c = sample(vec![ScaleId::S2, ScaleId::S3]);
        save_checkpoint(&p, &c).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.model.params().numel(), c.model.params().numel());
    }
}
