//! Procedural motion clips used in place of captured data.
//!
//! Every joint angle is a finite sum of sinusoids (or smooth functions of
//! them) in time, so trajectories are infinitely differentiable. Per-clip
//! parameters are drawn from a seeded ChaCha stream.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clip::MotionClip;
use crate::error::{Error, Result};
use crate::rotmath::{RotM, Vec3};
use crate::skeleton::{forward_kinematics, Pose, SkeletonDef, JOINT_COUNT};

/// Upper bound on any generated local joint rotation angle.
pub const MAX_JOINT_ANGLE_DEG: f64 = 150.0;

/// Peak amplitude of the small per-joint secondary oscillation.
pub const SECONDARY_DEG: f64 = 1.0;

/// Frequency band of the secondary oscillation, in Hz.
pub const SECONDARY_BAND: (f64, f64) = (3.0, 6.0);

const ANKLE_REST_HEIGHT: f64 = 0.06;
const PELVIS_REST_HEIGHT: f64 = 0.93;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    Walk,
    Reach,
    Squat,
    Kick,
    Mixed,
}

impl MotionKind {
    pub const CONCRETE: [MotionKind; 4] = [MotionKind::Walk, MotionKind::Reach, MotionKind::Squat, MotionKind::Kick];

    pub fn name(self) -> &'static str {
        match self {
            MotionKind::Walk => "walk",
            MotionKind::Reach => "reach",
            MotionKind::Squat => "squat",
            MotionKind::Kick => "kick",
            MotionKind::Mixed => "mixed",
        }
    }
}

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "walk" => Ok(MotionKind::Walk),
            "reach" => Ok(MotionKind::Reach),
            "squat" => Ok(MotionKind::Squat),
            "kick" => Ok(MotionKind::Kick),
            "mixed" => Ok(MotionKind::Mixed),
            _ => Err(Error::InvalidArgument(format!(
                "unknown motion kind {s:?}; expected walk, reach, squat, kick or mixed"
            ))),
        }
    }
}

/// Generation parameters that tests may want to inspect.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthMeta {
    pub kind: MotionKind,
    /// Fundamental frequency of the motion cycle.
    pub freq_hz: f64,
}

#[derive(Clone, Copy, Debug)]
struct Wobble {
    axis: Vec3,
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Wobble {
    fn at(&self, t: f64) -> RotM {
        RotM::from_axis_angle(&self.axis, (self.amp * (2.0 * PI * self.freq * t + self.phase).sin()).to_radians())
    }
}

#[derive(Clone, Debug)]
struct Params {
    kind: MotionKind,
    freq: f64,
    phase0: f64,
    yaw0: f64,
    yaw_amp: f64,
    yaw_freq: f64,
    yaw_phase: f64,
    start: (f64, f64),
    stride: f64,
    arm_down: f64,
    elbow0: f64,
    lean: f64,
    side: f64,
    amp_a: f64,
    amp_b: f64,
    amp_c: f64,
    both: bool,
    wobble: [Wobble; JOINT_COUNT],
}

fn draw_params(kind: MotionKind, rng: &mut ChaCha8Rng) -> Params {
    let freq = match kind {
        MotionKind::Walk => rng.random_range(0.8..1.1),
        MotionKind::Reach => rng.random_range(0.3..0.55),
        MotionKind::Squat => rng.random_range(0.25..0.45),
        MotionKind::Kick => rng.random_range(0.5..0.8),
        MotionKind::Mixed => unreachable!(),
    };
    let (amp_a, amp_b, amp_c) = match kind {
        // hip swing, knee swing, arm swing
        MotionKind::Walk => (rng.random_range(18.0..30.0), rng.random_range(40.0..60.0), rng.random_range(15.0..30.0)),
        // reach elevation, trunk lean, head pitch
        MotionKind::Reach => (rng.random_range(60.0..130.0), rng.random_range(0.0..25.0), rng.random_range(-15.0..15.0)),
        // knee depth, arm raise, unused
        MotionKind::Squat => (rng.random_range(60.0..100.0), rng.random_range(0.5..1.0), 0.0),
        // kick height, counter-lean ratio, unused
        MotionKind::Kick => (rng.random_range(45.0..85.0), rng.random_range(0.1..0.3), 0.0),
        MotionKind::Mixed => unreachable!(),
    };
    let mut wobble = [Wobble {
        axis: Vec3::x(),
        amp: 0.0,
        freq: 1.0,
        phase: 0.0,
    }; JOINT_COUNT];
    for w in wobble.iter_mut().skip(1) {
        let a = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        *w = Wobble {
            axis: if a.norm() > 1e-3 { a.normalize() } else { Vec3::x() },
            amp: rng.random_range(0.0..SECONDARY_DEG),
            freq: rng.random_range(SECONDARY_BAND.0..SECONDARY_BAND.1),
            phase: rng.random_range(0.0..2.0 * PI),
        };
    }
    Params {
        kind,
        freq,
        phase0: rng.random_range(0.0..2.0 * PI),
        yaw0: rng.random_range(-110.0..110.0),
        yaw_amp: if kind == MotionKind::Walk {
            rng.random_range(0.0..20.0)
        } else {
            rng.random_range(0.0..8.0)
        },
        yaw_freq: rng.random_range(0.1..0.3),
        yaw_phase: rng.random_range(0.0..2.0 * PI),
        start: (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        stride: rng.random_range(1.1..1.5),
        arm_down: rng.random_range(70.0..85.0),
        elbow0: rng.random_range(10.0..30.0),
        lean: rng.random_range(0.0..8.0),
        side: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        amp_a,
        amp_b,
        amp_c,
        both: rng.random_bool(0.25),
        wobble,
    }
}

/// Minimal rotation taking unit vector `from` onto unit vector `to`.
fn swing_to(from: &Vec3, to: &Vec3) -> RotM {
    let axis = from.cross(to);
    let s = axis.norm();
    let c = from.dot(to).clamp(-1.0, 1.0);
    if s < 1e-12 {
        return RotM::identity();
    }
    RotM::from_axis_angle(&(axis / s), s.atan2(c))
}

/// Upper-arm rotation for side `s` (+1 left, −1 right): `down` lowers the
/// arm from horizontal, `fwd` then swings it forward about the lateral axis.
fn arm(s: f64, down: f64, fwd: f64) -> RotM {
    let (a, f) = (down.to_radians(), fwd.to_radians());
    let d = Vec3::new(s * a.cos(), -a.sin() * f.cos(), a.sin() * f.sin());
    swing_to(&Vec3::new(s, 0.0, 0.0), &d)
}

fn elbow(s: f64, bend: f64) -> RotM {
    RotM::ry_deg(-s * bend)
}

fn yaw_at(p: &Params, t: f64) -> f64 {
    p.yaw0 + p.yaw_amp * (2.0 * PI * p.yaw_freq * t + p.yaw_phase).sin()
}

/// Local rotations at time `t` for one clip, before secondary motion.
fn pose_at(p: &Params, t: f64) -> [RotM; JOINT_COUNT] {
    let mut r = [RotM::identity(); JOINT_COUNT];
    let phi = 2.0 * PI * p.freq * t + p.phase0;
    let yaw = yaw_at(p, t);
    let (ad, e0) = (p.arm_down, p.elbow0);
    let spine = |r: &mut [RotM; JOINT_COUNT], pitch: f64, twist: f64| {
        for j in [3, 6, 9] {
            r[j] = RotM::ry_deg(twist / 3.0) * RotM::rx_deg(pitch / 3.0);
        }
    };
    match p.kind {
        MotionKind::Walk => {
            let (ah, ak, aa) = (p.amp_a, p.amp_b, p.amp_c);
            r[0] = RotM::ry_deg(yaw + 6.0 * phi.sin()) * RotM::rz_deg(3.0 * phi.sin());
            spine(&mut r, p.lean, -6.0 * phi.sin());
            for (side, hip, knee, ankle, off) in [(1.0, 1, 4, 7, 0.0), (-1.0, 2, 5, 8, PI)] {
                let ph = phi + off;
                r[hip] = RotM::rx_deg(-ah * ph.sin()) * RotM::rz_deg(side * 2.0);
                r[knee] = RotM::rx_deg(5.0 + ak * (0.5 + 0.5 * (ph + 0.3).cos()));
                r[ankle] = RotM::rx_deg(8.0 * (ph - 0.5).sin());
                let (sh, el) = if side > 0.0 { (16, 18) } else { (17, 19) };
                let fwd = -aa * ph.sin();
                r[sh] = arm(side, ad, fwd);
                r[el] = elbow(side, e0 + 8.0 * (1.0 + fwd / aa.max(1.0)));
            }
            r[12] = RotM::rx_deg(-0.5 * p.lean);
            r[15] = RotM::rx_deg(2.0 * (2.0 * phi).sin()) * RotM::ry_deg(3.0 * (0.5 * phi).sin());
        }
        MotionKind::Reach => {
            let u = 0.5 - 0.5 * phi.cos();
            let (elev, lean, look) = (p.amp_a, p.amp_b, p.amp_c);
            r[0] = RotM::ry_deg(yaw);
            let lean_now = if elev < 90.0 { lean * u } else { 0.3 * lean * u };
            spine(&mut r, lean_now, 10.0 * p.side * u);
            for (side, sh, el) in [(1.0, 16, 18), (-1.0, 17, 19)] {
                let active = p.both || side == p.side;
                if active {
                    r[sh] = arm(side, ad + (90.0 - ad) * u, elev * u);
                    r[el] = elbow(side, e0 * (1.0 - 0.8 * u));
                } else {
                    r[sh] = arm(side, ad, 5.0 * phi.sin());
                    r[el] = elbow(side, e0);
                }
            }
            for (hip, knee) in [(1, 4), (2, 5)] {
                r[hip] = RotM::rx_deg(-10.0 * u);
                r[knee] = RotM::rx_deg(3.0 + 12.0 * u);
            }
            r[7] = RotM::rx_deg(-2.0 * u);
            r[8] = r[7];
            r[15] = RotM::rx_deg(look * u);
        }
        MotionKind::Squat => {
            let u = 0.5 - 0.5 * phi.cos();
            let (depth, raise) = (p.amp_a, p.amp_b);
            r[0] = RotM::ry_deg(yaw);
            spine(&mut r, 0.35 * depth * u, 0.0);
            for (side, hip, knee, ankle) in [(1.0, 1, 4, 7), (-1.0, 2, 5, 8)] {
                r[hip] = RotM::rx_deg(-0.85 * depth * u) * RotM::rz_deg(side * 6.0 * u);
                r[knee] = RotM::rx_deg(2.0 + depth * u);
                r[ankle] = RotM::rx_deg(-0.15 * depth * u);
            }
            for (side, sh, el) in [(1.0, 16, 18), (-1.0, 17, 19)] {
                r[sh] = arm(side, ad + (90.0 - ad) * u * raise, 75.0 * raise * u);
                r[el] = elbow(side, e0);
            }
            r[12] = RotM::rx_deg(-0.15 * depth * u);
        }
        MotionKind::Kick => {
            let c = 0.5 - 0.5 * phi.cos();
            let u = c * c;
            let (height, counter) = (p.amp_a, p.amp_b);
            r[0] = RotM::ry_deg(yaw);
            spine(&mut r, -counter * height * u, 0.0);
            let (kh, kk, ka, sh_h, sh_k) = if p.side > 0.0 { (1, 4, 7, 2, 5) } else { (2, 5, 8, 1, 4) };
            r[kh] = RotM::rx_deg(-height * u);
            r[kk] = RotM::rx_deg(20.0 + 50.0 * c * (1.0 - u));
            r[ka] = RotM::rx_deg(15.0 * u);
            r[sh_h] = RotM::rx_deg(-5.0 * u);
            r[sh_k] = RotM::rx_deg(10.0 + 5.0 * u);
            for (side, sh, el) in [(1.0, 16, 18), (-1.0, 17, 19)] {
                let fwd = if side == p.side { -15.0 * u } else { 25.0 * u };
                r[sh] = arm(side, ad - 25.0 * u, fwd);
                r[el] = elbow(side, e0 + 10.0 * u);
            }
        }
        MotionKind::Mixed => unreachable!(),
    }
    for j in 1..JOINT_COUNT {
        r[j] = r[j] * p.wobble[j].at(t);
    }
    r
}

/// Horizontal root path: integrated heading for walks, gentle sway otherwise.
fn root_path(p: &Params, n: usize, fps: f64) -> Vec<(f64, f64)> {
    if p.kind != MotionKind::Walk {
        return (0..n)
            .map(|i| {
                let t = i as f64 / fps;
                let w = 2.0 * PI * p.yaw_freq * t + p.yaw_phase;
                (p.start.0 + 0.02 * w.sin(), p.start.1 + 0.02 * (1.3 * w).cos())
            })
            .collect();
    }
    let speed = p.stride * p.freq;
    let sub = 16;
    let h = 1.0 / (fps * sub as f64);
    let dir = |t: f64| {
        let y = yaw_at(p, t).to_radians();
        (y.sin(), y.cos())
    };
    let mut out = Vec::with_capacity(n);
    let (mut x, mut z) = p.start;
    out.push((x, z));
    let mut t = 0.0;
    for _ in 1..n {
        for _ in 0..sub {
            // Simpson's rule on each substep
            let (a, b, c) = (dir(t), dir(t + 0.5 * h), dir(t + h));
            x += speed * h * (a.0 + 4.0 * b.0 + c.0) / 6.0;
            z += speed * h * (a.1 + 4.0 * b.1 + c.1) / 6.0;
            t += h;
        }
        out.push((x, z));
    }
    out
}

fn build_clip(p: &Params, n: usize, fps: f64, skel: &SkeletonDef) -> Result<MotionClip> {
    let path = root_path(p, n, fps);
    let mut frames = Vec::with_capacity(n);
    for (i, &(x, z)) in path.iter().enumerate() {
        let t = i as f64 / fps;
        let mut pose = Pose {
            local_rot: pose_at(p, t),
            root_trans: Vec3::zeros(),
        };
        let y = match p.kind {
            MotionKind::Walk => {
                let phi = 2.0 * PI * p.freq * t + p.phase0;
                PELVIS_REST_HEIGHT - 0.01 + 0.02 * (2.0 * phi).cos()
            }
            _ => {
                let g = forward_kinematics(&pose, skel);
                let support = match p.kind {
                    MotionKind::Kick if p.side > 0.0 => g.global_pos[8].y,
                    MotionKind::Kick => g.global_pos[7].y,
                    _ => 0.5 * (g.global_pos[7].y + g.global_pos[8].y),
                };
                ANKLE_REST_HEIGHT - support
            }
        };
        pose.root_trans = Vec3::new(x, y, z);
        frames.push(pose);
    }
    MotionClip::new(fps, frames)
}

/// One clip of the given concrete kind drawn from `rng`.
pub fn synth_clip_with_meta(
    kind: MotionKind,
    n: usize,
    fps: f64,
    rng: &mut ChaCha8Rng,
    skel: &SkeletonDef,
) -> Result<(MotionClip, SynthMeta)> {
    let kind = if kind == MotionKind::Mixed {
        MotionKind::CONCRETE[rng.random_range(0..4)]
    } else {
        kind
    };
    let p = draw_params(kind, rng);
    let clip = build_clip(&p, n, fps, skel)?;
    Ok((clip, SynthMeta { kind, freq_hz: p.freq }))
}

/// `count` clips of `n` frames; `Mixed` picks a kind per clip.
pub fn synth_dataset_with_meta(
    kind: MotionKind,
    count: usize,
    n: usize,
    fps: f64,
    seed: u64,
) -> Result<Vec<(MotionClip, SynthMeta)>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    if n < 2 {
        return Err(Error::ClipTooShort { len: n, need: 2 });
    }
    let skel = SkeletonDef::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| synth_clip_with_meta(kind, n, fps, &mut rng, &skel))
        .collect()
}

pub fn synth_dataset(kind: MotionKind, count: usize, n: usize, fps: f64, seed: u64) -> Result<Vec<MotionClip>> {
    Ok(synth_dataset_with_meta(kind, count, n, fps, seed)?
        .into_iter()
        .map(|(c, _)| c)
        .collect())
}
