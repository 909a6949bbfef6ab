//! Windowed inference, global placement, baselines and benchmarking.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{extract_condition, window_starts, MotionClip, NormStats, SparseCondition, COND_DIM};
use crate::diffusion::{ddim_sample, DdimPlan, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate, EvalReport, RegionSpec};
use crate::nncore::Tensor;
use crate::rotmath::Vec3;
use crate::skeleton::{forward_kinematics, Pose, ScaleId, SkeletonDef, JOINT_COUNT};
use crate::training::Checkpoint;

const POSE_DIM: usize = JOINT_COUNT * 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub window: usize,
    pub history: usize,
    /// Number of DDIM steps.
    pub steps: usize,
    pub eta: f64,
    /// Blend the overlap instead of discarding the new window's first frames.
    pub crossfade: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            window: 120,
            history: 12,
            steps: 4,
            eta: 0.0,
            crossfade: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history >= self.window {
            return Err(Error::InvalidConfig(format!(
                "history {} must be below the window {}",
                self.history, self.window
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("at least one sampling step is needed".into()));
        }
        Ok(())
    }

    pub fn plan(&self, t_max: usize) -> Result<DdimPlan> {
        DdimPlan::uniform(t_max, self.steps, self.eta)
    }
}

/// Samples one window and decodes it to local poses (root translation zero).
///
/// `cond` is raw; it is normalized with `norm` before reaching the denoiser,
/// and the prediction is denormalized with the S3 statistics.
pub fn generate_window<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    cond: &SparseCondition,
    norm: &NormStats,
    sched: &NoiseSchedule,
    plan: &DdimPlan,
    rng: &mut R,
) -> Result<Vec<Pose>> {
    let n = cond.len();
    let mut c = cond.as_flat().to_vec();
    norm.cond.apply(&mut c);
    let c = Tensor::new(&[1, n, COND_DIM], c)?;
    let init = Tensor::randn(&[1, n, POSE_DIM], rng);
    let mut x0 = ddim_sample(denoiser, &c, plan, sched, init, rng)?.into_data();
    norm.target(ScaleId::S3).invert(&mut x0);
    x0.chunks_exact(POSE_DIM).map(|f| Pose::from_6d(f, Vec3::zeros())).collect()
}

/// Source of one output frame: window number and frame inside that window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StitchEntry {
    pub window: usize,
    pub frame: usize,
}

#[derive(Clone, Debug)]
pub struct StreamOutput {
    pub clip: MotionClip,
    /// One entry per output frame.
    pub index: Vec<StitchEntry>,
    /// `(start, overlap)` of every window.
    pub windows: Vec<(usize, usize)>,
}

/// Runs `gen` over overlapping windows of `cond` and stitches the results.
///
/// After the first window, the leading overlap frames of each window are
/// dropped (or blended when `crossfade` is set), so the output has exactly
/// one frame per condition frame. Poses are placed globally from the
/// observed head path at the end.
pub fn stream_with<F>(cond: &SparseCondition, cfg: &InferenceConfig, skel: &SkeletonDef, mut gen: F) -> Result<StreamOutput>
where
    F: FnMut(usize, &SparseCondition) -> Result<Vec<Pose>>,
{
    cfg.validate()?;
    let windows = window_starts(cond.len(), cfg.window, cfg.history)?;
    let mut frames: Vec<Pose> = Vec::with_capacity(cond.len());
    let mut index = Vec::with_capacity(cond.len());
    for (w, &(start, overlap)) in windows.iter().enumerate() {
        let poses = gen(start, &cond.slice(start, cfg.window))?;
        if poses.len() != cfg.window {
            return Err(Error::LengthMismatch(poses.len(), cfg.window));
        }
        if cfg.crossfade && overlap > 0 {
            let base = frames.len() - overlap;
            for (i, p) in poses[..overlap].iter().enumerate() {
                let a = (i + 1) as f64 / (overlap + 1) as f64;
                frames[base + i] = blend(&frames[base + i], p, a)?;
            }
        }
        for (f, p) in poses.into_iter().enumerate().skip(overlap) {
            frames.push(p);
            index.push(StitchEntry { window: w, frame: f });
        }
    }
    let frames = place_global(&frames, &cond.head_positions(), skel)?;
    Ok(StreamOutput {
        clip: MotionClip::new(cond.fps, frames)?,
        index,
        windows,
    })
}

/// Rotation blend `(1 − a)·p + a·q` in 6D, re-orthonormalized.
fn blend(p: &Pose, q: &Pose, a: f64) -> Result<Pose> {
    let v: Vec<f64> = p.to_6d().iter().zip(q.to_6d()).map(|(x, y)| (1.0 - a) * x + a * y).collect();
    Pose::from_6d(&v, p.root_trans)
}

/// Full streaming generation with a trained checkpoint.
pub fn stream_generate(
    ckpt: &Checkpoint,
    cond: &SparseCondition,
    cfg: &InferenceConfig,
    seed: u64,
    skel: &SkeletonDef,
) -> Result<StreamOutput> {
    if ckpt.model.config().window != cfg.window {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint window {} vs inference window {}",
            ckpt.model.config().window,
            cfg.window
        )));
    }
    let plan = cfg.plan(ckpt.schedule.t_max())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    stream_with(cond, cfg, skel, |_, c| {
        generate_window(&ckpt.model, c, &ckpt.norm, &ckpt.schedule, &plan, &mut rng)
    })
}

/// Sets each frame's root so that FK reproduces the observed head position.
pub fn place_global(local: &[Pose], head: &[Vec3], skel: &SkeletonDef) -> Result<Vec<Pose>> {
    if local.len() != head.len() {
        return Err(Error::LengthMismatch(local.len(), head.len()));
    }
    Ok(local
        .iter()
        .zip(head)
        .map(|(p, h)| {
            let mut q = Pose {
                local_rot: p.local_rot,
                root_trans: Vec3::zeros(),
            };
            let fk_head = forward_kinematics(&q, skel).global_pos[skel.head_joint];
            q.root_trans = h - fk_head;
            q
        })
        .collect())
}

/// All-identity local rotations, placed under the observed head.
pub fn rest_pose_baseline(cond: &SparseCondition, skel: &SkeletonDef) -> Result<MotionClip> {
    let frames = vec![Pose::default(); cond.len()];
    MotionClip::new(cond.fps, place_global(&frames, &cond.head_positions(), skel)?)
}

/// The training-set mean pose (denormalized zero) held for every frame,
/// placed under the observed head.
pub fn mean_pose_baseline(cond: &SparseCondition, norm: &NormStats, skel: &SkeletonDef) -> Result<MotionClip> {
    let pose = Pose::from_6d(&norm.target(ScaleId::S3).mean, Vec3::zeros())?;
    let frames = vec![pose; cond.len()];
    MotionClip::new(cond.fps, place_global(&frames, &cond.head_positions(), skel)?)
}

/// Evaluation of a checkpoint over ground-truth clips; clip `i` is sampled
/// with seed `seed + i`.
pub fn evaluate_clips(
    ckpt: &Checkpoint,
    clips: &[MotionClip],
    cfg: &InferenceConfig,
    seed: u64,
    skel: &SkeletonDef,
    regions: &RegionSpec,
) -> Result<(EvalReport, Vec<EvalReport>)> {
    let mut per = Vec::with_capacity(clips.len());
    for (i, gt) in clips.iter().enumerate() {
        let cond = extract_condition(gt, skel);
        let out = stream_generate(ckpt, &cond, cfg, seed.wrapping_add(i as u64), skel)?;
        per.push(evaluate(&out.clip, gt, skel, regions)?);
    }
    Ok((aggregate(&per)?, per))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub latency_ms_per_frame: f64,
    pub frames_per_second: f64,
    pub iterations: usize,
    pub plan_steps: usize,
    pub latent_dim: usize,
    pub window: usize,
    pub param_count: usize,
}

/// Times full-window sampling and amortizes it per output frame. One
/// warm-up window is run first and not counted.
pub fn bench(ckpt: &Checkpoint, cfg: &InferenceConfig, iterations: usize, seed: u64) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("bench needs at least one iteration".into()));
    }
    let mc = ckpt.model.config();
    let plan = cfg.plan(ckpt.schedule.t_max())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = mc.window;
    let cond = Tensor::randn(&[1, n, COND_DIM], &mut rng);
    let run = |rng: &mut ChaCha8Rng| -> Result<()> {
        let init = Tensor::randn(&[1, n, POSE_DIM], rng);
        ddim_sample(&ckpt.model, &cond, &plan, &ckpt.schedule, init, rng).map(|_| ())
    };
    run(&mut rng)?;
    let t0 = Instant::now();
    for _ in 0..iterations {
        run(&mut rng)?;
    }
    let secs = t0.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    let frames = (iterations * n) as f64;
    Ok(BenchReport {
        latency_ms_per_frame: secs * 1e3 / frames,
        frames_per_second: frames / secs,
        iterations,
        plan_steps: plan.len(),
        latent_dim: mc.latent_dim,
        window: n,
        param_count: ckpt.model.param_count(),
    })
}

/// `frame,joint,x,y,z` rows of global joint positions.
pub fn write_positions_csv<W: Write>(clip: &MotionClip, skel: &SkeletonDef, mut w: W) -> Result<()> {
    writeln!(w, "frame,joint,x,y,z")?;
    for (n, p) in clip.frames.iter().enumerate() {
        let g = forward_kinematics(p, skel);
        for (j, x) in g.global_pos.iter().enumerate() {
            writeln!(w, "{n},{},{},{},{}", skel.names[j], x.x, x.y, x.z)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Every frame has orthonormal rotations and a finite root.
pub fn all_valid(clip: &MotionClip, tol: f64) -> bool {
    clip.frames.iter().all(|p| p.is_valid(tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{fit_normstats, synth_dataset, MotionKind};
    use crate::diffusion::{make_schedule, ScheduleKind};
    use crate::metrics::mpjpe;
    use crate::model::{FusionMode, Mage, ModelConfig};

    fn skel() -> SkeletonDef {
        SkeletonDef::default()
    }

    fn clip(n: usize, seed: u64) -> MotionClip {
        synth_dataset(MotionKind::Mixed, 1, n, 60.0, seed).unwrap().remove(0)
    }

    fn max_pos_err(a: &MotionClip, b: &MotionClip, s: &SkeletonDef) -> f64 {
        let mut m: f64 = 0.0;
        for (p, q) in a.frames.iter().zip(&b.frames) {
            let (gp, gq) = (forward_kinematics(p, s), forward_kinematics(q, s));
            for j in 0..JOINT_COUNT {
                m = m.max((gp.global_pos[j] - gq.global_pos[j]).norm());
            }
        }
        m
    }

    fn tiny_ckpt(window: usize) -> Checkpoint {
        let s = skel();
        let clips = synth_dataset(MotionKind::Walk, 2, window, 60.0, 5).unwrap();
        let cfg = ModelConfig {
            latent_dim: 8,
            blocks: [1, 1, 1],
            window,
            stages: ScaleId::ALL.to_vec(),
            fusion: FusionMode::CFFrec,
            t_max: 100,
            schedule: ScheduleKind::Cosine,
        };
        Checkpoint {
            model: Mage::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap(),
            norm: fit_normstats(&clips, &s).unwrap(),
            schedule: make_schedule(100, ScheduleKind::Cosine).unwrap(),
            steps_trained: 0,
        }
    }

    #[test]
    fn placement_reproduces_head() {
        let s = skel();
        let c = clip(30, 2);
        let cond = extract_condition(&c, &s);
        let placed = place_global(&c.frames, &cond.head_positions(), &s).unwrap();
        for (p, h) in placed.iter().zip(cond.head_positions()) {
            assert!((forward_kinematics(p, &s).global_pos[s.head_joint] - h).norm() < 1e-9);
        }
        // Ground-truth rotations plus ground-truth head give back the whole body.
        let placed = MotionClip::new(c.fps, placed).unwrap();
        assert!(max_pos_err(&placed, &c, &s) < 1e-9);
        let again = place_global(&placed.frames, &cond.head_positions(), &s).unwrap();
        for (a, b) in again.iter().zip(&placed.frames) {
            assert!((a.root_trans - b.root_trans).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_head_path_gives_negated_offset() {
        let s = skel();
        let c = clip(10, 3);
        let placed = place_global(&c.frames, &vec![Vec3::zeros(); 10], &s).unwrap();
        for (p, q) in placed.iter().zip(&c.frames) {
            let zero = Pose { local_rot: q.local_rot, root_trans: Vec3::zeros() };
            let off = forward_kinematics(&zero, &s).global_pos[s.head_joint];
            assert!((p.root_trans + off).norm() < 1e-12);
        }
        assert!(matches!(place_global(&c.frames, &[Vec3::zeros()], &s), Err(Error::LengthMismatch(10, 1))));
    }

    fn oracle_stream(gt: &MotionClip, cfg: &InferenceConfig) -> StreamOutput {
        let s = skel();
        let cond = extract_condition(gt, &s);
        stream_with(&cond, cfg, &s, |start, _| Ok(gt.frames[start..start + cfg.window].to_vec())).unwrap()
    }

    #[test]
    fn stitching_228_frames() {
        let gt = clip(228, 4);
        let out = oracle_stream(&gt, &InferenceConfig::default());
        assert_eq!(out.clip.len(), 228);
        assert_eq!(out.windows, vec![(0, 0), (108, 12)]);
        for (n, e) in out.index.iter().enumerate() {
            let want = if n < 120 { StitchEntry { window: 0, frame: n } } else { StitchEntry { window: 1, frame: n - 108 } };
            assert_eq!(*e, want);
        }
        assert!(max_pos_err(&out.clip, &gt, &skel()) < 1e-9);
    }

    #[test]
    fn single_window_and_short_input() {
        let gt = clip(120, 5);
        let out = oracle_stream(&gt, &InferenceConfig::default());
        assert_eq!(out.windows, vec![(0, 0)]);
        assert_eq!(out.clip.len(), 120);
        let s = skel();
        let short = extract_condition(&clip(100, 5), &s);
        let r = stream_with(&short, &InferenceConfig::default(), &s, |_, _| unreachable!());
        assert!(matches!(r, Err(Error::ClipTooShort { .. })));
    }

    #[test]
    fn crossfade_of_identical_windows_is_a_no_op() {
        let gt = clip(250, 6);
        let cfg = InferenceConfig { crossfade: true, ..InferenceConfig::default() };
        let out = oracle_stream(&gt, &cfg);
        assert_eq!(out.clip.len(), 250);
        assert!(max_pos_err(&out.clip, &gt, &skel()) < 1e-9);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn index_audit(len in 16usize..200, window in 8usize..16, history in 0usize..8) {
            let s = skel();
            let cond = SparseCondition::new(60.0, vec![0.0; len * COND_DIM]).unwrap();
            let cfg = InferenceConfig { window, history, ..InferenceConfig::default() };
            let out = stream_with(&cond, &cfg, &s, |_, _| Ok(vec![Pose::default(); window])).unwrap();
            proptest::prop_assert_eq!(out.index.len(), len);
            // Absolute source frames are exactly 0..len, in order.
            for (n, e) in out.index.iter().enumerate() {
                proptest::prop_assert_eq!(out.windows[e.window].0 + e.frame, n);
            }
        }
    }

    #[test]
    fn oracle_denoiser_recovers_window() {
        let s = skel();
        let gt = clip(16, 8);
        let ck = tiny_ckpt(16);
        let cond = extract_condition(&gt, &s);
        let mut x0 = gt.to_6d();
        ck.norm.target(ScaleId::S3).apply(&mut x0);
        let x0 = Tensor::new(&[1, 16, POSE_DIM], x0).unwrap();
        let oracle = |_: &Tensor, _: usize, _: &Tensor| Ok(x0.clone());
        let plan = DdimPlan::uniform(100, 4, 0.0).unwrap();
        let poses = generate_window(&oracle, &cond, &ck.norm, &ck.schedule, &plan, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let want = gt.to_6d();
        let got: Vec<f64> = poses.iter().flat_map(|p| p.to_6d()).collect();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn generation_is_valid_and_deterministic() {
        let s = skel();
        let ck = tiny_ckpt(16);
        let cond = extract_condition(&clip(40, 9), &s);
        let cfg = InferenceConfig { window: 16, history: 4, ..InferenceConfig::default() };
        let a = stream_generate(&ck, &cond, &cfg, 11, &s).unwrap();
        let b = stream_generate(&ck, &cond, &cfg, 11, &s).unwrap();
        assert_eq!(a.clip.frames, b.clip.frames);
        assert_eq!(a.clip.len(), 40);
        assert!(all_valid(&a.clip, 1e-9));
        let wrong = InferenceConfig { window: 20, ..cfg };
        assert!(matches!(stream_generate(&ck, &cond, &wrong, 11, &s), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn baselines_follow_the_head() {
        let s = skel();
        let gt = clip(20, 10);
        let cond = extract_condition(&gt, &s);
        let ck = tiny_ckpt(20);
        for b in [rest_pose_baseline(&cond, &s).unwrap(), mean_pose_baseline(&cond, &ck.norm, &s).unwrap()] {
            for (p, h) in b.frames.iter().zip(cond.head_positions()) {
                assert!((forward_kinematics(p, &s).global_pos[s.head_joint] - h).norm() < 1e-9);
            }
            assert!(mpjpe(&b, &gt, &s).unwrap() > 0.0);
        }
    }

    #[test]
    fn bench_guard_and_echo() {
        let ck = tiny_ckpt(16);
        let cfg = InferenceConfig { window: 16, history: 4, ..InferenceConfig::default() };
        assert!(matches!(bench(&ck, &cfg, 0, 0), Err(Error::InvalidArgument(_))));
        let r = bench(&ck, &cfg, 2, 0).unwrap();
        assert!(r.latency_ms_per_frame > 0.0 && r.frames_per_second > 0.0);
        assert_eq!((r.plan_steps, r.latent_dim, r.window), (4, 8, 16));
    }

    #[test]
    fn csv_has_one_row_per_joint_frame() {
        let s = skel();
        let c = clip(5, 12);
        let mut buf = Vec::new();
        write_positions_csv(&c, &s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 5 * JOINT_COUNT);
        assert!(text.lines().nth(16).unwrap().starts_with("0,head,"));
    }
}
