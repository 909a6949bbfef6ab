//! Multi-stage x0-prediction training.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{extract_condition, make_windows, scale_targets, MotionClip, NormStats, COND_DIM};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{Mage, ModelConfig};
use crate::nncore::{AdamConfig, Graph, Tensor, Var};
use crate::skeleton::{ScaleId, SkeletonDef};

pub const DEFAULT_CLIP_NORM: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Loss weights α, β, γ for the S1, S2 and S3 stages.
    pub weights: [f64; 3],
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: f64,
    /// Overlap between consecutive training windows of long clips.
    pub history: usize,
    /// Write a log record every this many steps (the first and last are always written).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: [1.0, 1.0, 1.0],
            batch_size: 16,
            steps: 3000,
            lr: 3e-4,
            seed: 0,
            clip_norm: DEFAULT_CLIP_NORM,
            history: 12,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || self.weights[2] <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be non-negative with the S3 weight positive, got {:?}",
                self.weights
            )));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("steps and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate {} is invalid", self.lr)));
        }
        Ok(())
    }
}

/// Per-stage losses and their weighted sum; missing stages report 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l_obj: f64,
}

/// `αL1 + βL2 + γL3`.
pub fn objective(l: [f64; 3], weights: [f64; 3]) -> f64 {
    weights[0] * l[0] + weights[1] * l[1] + weights[2] * l[2]
}

/// Normalized model inputs and stage targets of one window, each flattened `N × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedWindow {
    pub cond: Vec<f64>,
    pub targets: [Vec<f64>; 3],
}

/// Cuts clips into windows and normalizes conditions and per-scale targets.
///
/// S1/S2 targets are projected from the raw rotations and then normalized
/// with their own statistics; the S3 target is the normalized window itself.
pub fn prepare_windows(
    clips: &[MotionClip],
    skel: &SkeletonDef,
    norm: &NormStats,
    window: usize,
    history: usize,
) -> Result<Vec<PreparedWindow>> {
    if clips.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = Vec::new();
    for clip in clips {
        let cond = extract_condition(clip, skel);
        for w in make_windows(clip, &cond, window, history)? {
            let mut c = w.condition.as_flat().to_vec();
            norm.cond.apply(&mut c);
            let mut targets = scale_targets(&w.target, skel);
            for id in ScaleId::ALL {
                norm.target(id).apply(&mut targets[id.index()]);
            }
            out.push(PreparedWindow { cond: c, targets });
        }
    }
    Ok(out)
}

/// MSE of each stage prediction against its target; stages absent from
/// `s_hats` contribute 0.
pub fn stage_losses(s_hats: &[(ScaleId, Tensor)], targets: &[(ScaleId, Tensor)]) -> Result<[f64; 3]> {
    let mut l = [0.0; 3];
    for (id, s) in s_hats {
        let (_, t) = targets
            .iter()
            .find(|(tid, _)| tid == id)
            .ok_or_else(|| Error::shape("stage_losses", format!("no target for {id:?}")))?;
        if s.shape() != t.shape() {
            return Err(Error::shape("stage_losses", format!("{:?} vs {:?}", s.shape(), t.shape())));
        }
        l[id.index()] = s.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s.len() as f64;
    }
    Ok(l)
}

/// Mutable state of a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub last: Losses,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        TrainState {
            step: 0,
            last: Losses::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// A drawn mini-batch in model layout.
pub struct Batch {
    pub x0: Tensor,
    pub cond: Tensor,
    pub targets: [Tensor; 3],
    pub ts: Vec<usize>,
    pub noise: Tensor,
}

fn draw_batch(data: &[PreparedWindow], cfg: &ModelConfig, batch: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let n = cfg.window;
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..data.len())).collect();
    let ts: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=cfg.t_max)).collect();
    let gather = |f: &dyn Fn(&PreparedWindow) -> &[f64], dim: usize| -> Result<Tensor> {
        let mut v = Vec::with_capacity(batch * n * dim);
        for &i in &idx {
            v.extend_from_slice(f(&data[i]));
        }
        Tensor::new(&[batch, n, dim], v)
    };
    let cond = gather(&|w| &w.cond, COND_DIM)?;
    let targets = [
        gather(&|w| &w.targets[0], ModelConfig::stage_dim(ScaleId::S1))?,
        gather(&|w| &w.targets[1], ModelConfig::stage_dim(ScaleId::S2))?,
        gather(&|w| &w.targets[2], ModelConfig::stage_dim(ScaleId::S3))?,
    ];
    let noise = Tensor::randn(targets[2].shape(), rng);
    Ok(Batch {
        x0: targets[2].clone(),
        cond,
        targets,
        ts,
        noise,
    })
}

/// `x_t` for a batch with one time step per element.
pub fn noise_batch(x0: &Tensor, noise: &Tensor, ts: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != noise.shape() || x0.shape().first() != Some(&ts.len()) {
        return Err(Error::shape("noise_batch", format!("{:?} / {:?} / {}", x0.shape(), noise.shape(), ts.len())));
    }
    let per = x0.len() / ts.len();
    let mut out = Vec::with_capacity(x0.len());
    for (b, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let r = b * per..(b + 1) * per;
        out.extend(x0.data()[r.clone()].iter().zip(&noise.data()[r]).map(|(x, e)| a * x + s * e));
    }
    Tensor::new(x0.shape(), out)
}

fn loss_graph(model: &Mage, g: &mut Graph, batch: &Batch, x_t: Tensor, weights: [f64; 3]) -> Result<(Var, [Option<Var>; 3])> {
    let p = model.bind(g);
    let (xv, cv) = (g.leaf(x_t), g.leaf(batch.cond.clone()));
    let outs = model.forward(g, &p, xv, &batch.ts, cv)?;
    let mut per = [None; 3];
    let mut total: Option<Var> = None;
    for o in &outs {
        let k = o.id.index();
        let y = g.leaf(batch.targets[k].clone());
        let l = g.mse(o.s_hat, y)?;
        per[k] = Some(l);
        let wl = g.scale(l, weights[k])?;
        total = Some(match total {
            None => wl,
            Some(acc) => g.add(acc, wl)?,
        });
    }
    Ok((total.expect("at least one stage"), per))
}

/// One optimizer step on a freshly drawn batch.
pub fn train_step(
    model: &mut Mage,
    sched: &NoiseSchedule,
    data: &[PreparedWindow],
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<Losses> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let step = state.step;
    let nonfinite = |detail: String| Error::NonFiniteLoss { step, detail };
    let batch = draw_batch(data, model.config(), cfg.batch_size, &mut state.rng)?;
    let x_t = noise_batch(&batch.x0, &batch.noise, &batch.ts, sched)?;
    let mut g = Graph::new();
    let (loss, per) = loss_graph(model, &mut g, &batch, x_t, cfg.weights).map_err(|e| match e {
        Error::NonFiniteValue(op) => nonfinite(format!("non-finite value in {op}")),
        other => other,
    })?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let losses = Losses {
        l1: val(per[0]),
        l2: val(per[1]),
        l3: val(per[2]),
        l_obj: g.value(loss).item(),
    };
    if !losses.l_obj.is_finite() {
        return Err(nonfinite(format!("{losses:?}")));
    }
    g.backward_into(loss, model.params_mut()).map_err(|e| match e {
        Error::NonFiniteValue(op) => nonfinite(format!("non-finite gradient in {op}")),
        other => other,
    })?;
    let store = model.params_mut();
    let norm = store.clip_grad_norm(cfg.clip_norm);
    if !norm.is_finite() {
        return Err(nonfinite(format!("gradient norm {norm}")));
    }
    store.adam_step(&AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    state.step += 1;
    state.last = losses;
    Ok(losses)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l_obj: f64,
    pub lr: f64,
    pub wall_time: f64,
}

/// Runs `cfg.steps` optimizer steps, writing JSON lines to `log` if given.
/// Returns the loss of every step.
pub fn train(
    model: &mut Mage,
    sched: &NoiseSchedule,
    data: &[PreparedWindow],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<Losses>> {
    cfg.validate()?;
    let mut state = TrainState::new(cfg.seed);
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.steps);
    for i in 0..cfg.steps {
        let l = train_step(model, sched, data, cfg, &mut state)?;
        history.push(l);
        if let Some(w) = log.as_deref_mut() {
            if i == 0 || i + 1 == cfg.steps || (cfg.log_every > 0 && i % cfg.log_every == 0) {
                let rec = LogRecord {
                    step: i,
                    l1: l.l1,
                    l2: l.l2,
                    l3: l.l3,
                    l_obj: l.l_obj,
                    lr: cfg.lr,
                    wall_time: start.elapsed().as_secs_f64(),
                };
                let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
                writeln!(w, "{line}")?;
            }
        }
    }
    Ok(history)
}
