//! The three-stage coarse-to-fine denoiser.
//!
//! ```text
//! h₁ = embed([x_t | cond])
//! stage k:  F = blocks(h_k),  Ŝ = head(F),  F_rec = reembed(Ŝ)
//! h_{k+1} = fuse([C_emb | F | F_rec])        (selection per FusionMode)
//! ```
//!
//! Each block is `h + mix_frames(silu(affine(LN(h)) + inject(t)))`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::COND_DIM;
use crate::diffusion::{Denoiser, ScheduleKind, DEFAULT_T};
use crate::error::{Error, Result};
use crate::nncore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::skeleton::{ScaleId, JOINT_COUNT};

/// Bumped whenever parameter names or layout change.
pub const ARCH_VERSION: u32 = 1;

pub const INIT_STD: f64 = 0.02;

/// Which features feed each inter-stage fusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    #[serde(rename = "c+f")]
    CF,
    #[serde(rename = "c+f_rec")]
    CFrec,
    #[default]
    #[serde(rename = "c+f+f_rec")]
    CFFrec,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::CF, FusionMode::CFrec, FusionMode::CFFrec];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::CF => "c+f",
            FusionMode::CFrec => "c+f_rec",
            FusionMode::CFFrec => "c+f+f_rec",
        }
    }

    fn uses_f(self) -> bool {
        matches!(self, FusionMode::CF | FusionMode::CFFrec)
    }

    fn uses_rec(self) -> bool {
        matches!(self, FusionMode::CFrec | FusionMode::CFFrec)
    }

    /// Pre-projection width of the fused features.
    pub fn width(self, latent: usize) -> usize {
        latent * (1 + self.uses_f() as usize + self.uses_rec() as usize)
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown fusion mode {s:?}; expected c+f, c+f_rec or c+f+f_rec")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Denoiser blocks for the S1, S2 and S3 stages.
    pub blocks: [usize; 3],
    pub window: usize,
    pub stages: Vec<ScaleId>,
    pub fusion: FusionMode,
    pub t_max: usize,
    pub schedule: ScheduleKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 512,
            blocks: [12, 12, 12],
            window: 120,
            stages: ScaleId::ALL.to_vec(),
            fusion: FusionMode::CFFrec,
            t_max: DEFAULT_T,
            schedule: ScheduleKind::Cosine,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for CPU training runs.
    pub fn desk() -> Self {
        ModelConfig {
            latent_dim: 64,
            blocks: [2, 2, 2],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 8 {
            return Err(Error::InvalidConfig(format!("latent_dim {} below 8", self.latent_dim)));
        }
        if self.window < 2 {
            return Err(Error::InvalidConfig("window must be at least 2 frames".into()));
        }
        if self.t_max == 0 {
            return Err(Error::InvalidConfig("t_max must be positive".into()));
        }
        if !self.stages.contains(&ScaleId::S3) {
            return Err(Error::InvalidConfig("stage set must include S3".into()));
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "stages must be listed coarse to fine without repeats: {:?}",
                self.stages
            )));
        }
        Ok(())
    }

    pub fn stage_dim(id: ScaleId) -> usize {
        id.node_count() * 6
    }
}

/// Parameter handles for one denoiser block.
#[derive(Clone, Debug)]
struct BlockParams {
    ln_g: ParamId,
    ln_b: ParamId,
    ff_w: ParamId,
    ff_b: ParamId,
    mix_w: ParamId,
    mix_b: ParamId,
    tinj_w: ParamId,
    tinj_b: ParamId,
}

#[derive(Clone, Debug)]
struct StageParams {
    id: ScaleId,
    blocks: Vec<BlockParams>,
    head_w: ParamId,
    head_b: ParamId,
    rec: Option<(ParamId, ParamId)>,
    fuse: Option<(ParamId, ParamId)>,
}

/// Latent features and prediction of one stage.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub id: ScaleId,
    pub f: Var,
    pub s_hat: Var,
    pub f_rec: Option<Var>,
}

/// Graph handles of every parameter, in store order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// The multi-stage denoiser and its parameters.
#[derive(Clone, Debug)]
pub struct Mage {
    cfg: ModelConfig,
    store: ParamStore,
    embed: (ParamId, ParamId),
    cond: (ParamId, ParamId),
    time: (ParamId, ParamId),
    stages: Vec<StageParams>,
}

fn add_affine<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let w = if zero {
        Tensor::zeros(&[fan_in, fan_out])
    } else {
        Tensor::trunc_normal(&[fan_in, fan_out], INIT_STD, rng)
    };
    Ok((store.add(format!("{name}.w"), w)?, store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?))
}

/// `[B, D]` sinusoidal embedding of integer time steps.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; ts.len() * dim];
    for (b, &t) in ts.iter().enumerate() {
        let row = &mut out[b * dim..(b + 1) * dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let a = t as f64 * freq;
            row[i] = a.sin();
            row[half + i] = a.cos();
        }
    }
    Tensor::new(&[ts.len(), dim], out).expect("shape by construction")
}

impl Mage {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.latent_dim;
        let n = cfg.window;
        let mut store = ParamStore::new();
        let embed = add_affine(&mut store, "embed", JOINT_COUNT * 6 + COND_DIM, d, false, rng)?;
        let cond = add_affine(&mut store, "cond", COND_DIM, d, false, rng)?;
        let time = add_affine(&mut store, "time", d, d, false, rng)?;
        let mut stages = Vec::new();
        for (k, &id) in cfg.stages.iter().enumerate() {
            let tag = format!("s{}", id.index() + 1);
            let last = k + 1 == cfg.stages.len();
            let mut blocks = Vec::new();
            for j in 0..cfg.blocks[id.index()] {
                let p = format!("{tag}.block{j}");
                let ln_g = store.add(format!("{p}.ln.g"), Tensor::full(&[d], 1.0))?;
                let ln_b = store.add(format!("{p}.ln.b"), Tensor::zeros(&[d]))?;
                let (ff_w, ff_b) = add_affine(&mut store, &format!("{p}.ff"), d, d, false, rng)?;
                let mix_w = store.add(format!("{p}.mix.w"), Tensor::trunc_normal(&[n, n], INIT_STD, rng))?;
                let mix_b = store.add(format!("{p}.mix.b"), Tensor::zeros(&[n]))?;
                let (tinj_w, tinj_b) = add_affine(&mut store, &format!("{p}.tinj"), d, d, true, rng)?;
                blocks.push(BlockParams {
                    ln_g,
                    ln_b,
                    ff_w,
                    ff_b,
                    mix_w,
                    mix_b,
                    tinj_w,
                    tinj_b,
                });
            }
            let dim = ModelConfig::stage_dim(id);
            let (head_w, head_b) = add_affine(&mut store, &format!("{tag}.head"), d, dim, true, rng)?;
            let rec = if !last && cfg.fusion.uses_rec() {
                Some(add_affine(&mut store, &format!("{tag}.rec"), dim, d, false, rng)?)
            } else {
                None
            };
            let fuse = if last {
                None
            } else {
                Some(add_affine(&mut store, &format!("{tag}.fuse"), cfg.fusion.width(d), d, false, rng)?)
            };
            stages.push(StageParams {
                id,
                blocks,
                head_w,
                head_b,
                rec,
                fuse,
            });
        }
        Ok(Mage {
            cfg,
            store,
            embed,
            cond,
            time,
            stages,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Puts every parameter on the tape as a trainable node.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.store.ids().map(|id| g.param(&self.store, id)).collect(),
        }
    }

    /// Uses caller-provided nodes (for instance gradient-check leaves) as parameters.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != self.store.len() {
            return Err(Error::shape("bind_vars", format!("{} vars for {} params", vars.len(), self.store.len())));
        }
        Ok(Bound { vars })
    }

    fn affine(&self, g: &mut Graph, p: &Bound, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        g.affine(x, p.get(w), Some(p.get(b)))
    }

    /// `affine([x_t | cond])` to the latent width.
    pub fn embed_inputs(&self, g: &mut Graph, p: &Bound, x_t: Var, cond: Var) -> Result<Var> {
        let xs = g.shape(x_t).to_vec();
        let cs = g.shape(cond).to_vec();
        if xs.len() != 3 || cs.len() != 3 || xs[..2] != cs[..2] || xs[2] != JOINT_COUNT * 6 || cs[2] != COND_DIM {
            return Err(Error::shape("embed_inputs", format!("x_t {xs:?}, cond {cs:?}")));
        }
        if xs[1] != self.cfg.window {
            return Err(Error::shape("embed_inputs", format!("{} frames, model window {}", xs[1], self.cfg.window)));
        }
        let h = g.concat(&[x_t, cond], 2)?;
        self.affine(g, p, h, self.embed)
    }

    /// Shared time features `silu(affine(sinusoid(t)))`, shape `[B, D]`.
    pub fn time_features(&self, g: &mut Graph, p: &Bound, ts: &[usize]) -> Result<Var> {
        let e = g.leaf(timestep_embedding(ts, self.cfg.latent_dim));
        let h = self.affine(g, p, e, self.time)?;
        g.silu(h)
    }

    fn block(&self, g: &mut Graph, p: &Bound, bp: &BlockParams, h: Var, t_feat: Var) -> Result<Var> {
        let x = g.layer_norm(h, p.get(bp.ln_g), p.get(bp.ln_b))?;
        let x = g.affine(x, p.get(bp.ff_w), Some(p.get(bp.ff_b)))?;
        let inj = g.affine(t_feat, p.get(bp.tinj_w), Some(p.get(bp.tinj_b)))?;
        let x = g.add_broadcast(x, inj)?;
        let x = g.silu(x)?;
        let x = g.mix_frames(p.get(bp.mix_w), x, Some(p.get(bp.mix_b)))?;
        g.add(h, x)
    }

    /// Block `j` of stage `stage` applied to `h` (`[B, N, D]`).
    pub fn denoiser_block(&self, g: &mut Graph, p: &Bound, stage: usize, j: usize, h: Var, t_feat: Var) -> Result<Var> {
        self.block(g, p, &self.stages[stage].blocks[j], h, t_feat)
    }

    pub fn stage_forward(&self, g: &mut Graph, p: &Bound, stage: usize, h_in: Var, t_feat: Var) -> Result<StageOutput> {
        let sp = &self.stages[stage];
        let mut f = h_in;
        for bp in &sp.blocks {
            f = self.block(g, p, bp, f, t_feat)?;
        }
        let s_hat = self.affine(g, p, f, (sp.head_w, sp.head_b))?;
        let f_rec = match sp.rec {
            Some(r) => Some(self.affine(g, p, s_hat, r)?),
            None => None,
        };
        Ok(StageOutput {
            id: sp.id,
            f,
            s_hat,
            f_rec,
        })
    }

    /// Projects the selected `[C_emb | F | F_rec]` features back to the latent width.
    pub fn fuse(&self, g: &mut Graph, p: &Bound, stage: usize, cond_latent: Var, out: &StageOutput) -> Result<Var> {
        let sp = &self.stages[stage];
        let fuse = sp
            .fuse
            .ok_or_else(|| Error::InvalidConfig("the last stage has no fusion".into()))?;
        let mut parts = vec![cond_latent];
        if self.cfg.fusion.uses_f() {
            parts.push(out.f);
        }
        if self.cfg.fusion.uses_rec() {
            parts.push(out.f_rec.ok_or_else(|| Error::InvalidConfig("missing F_rec".into()))?);
        }
        let x = g.concat(&parts, 2)?;
        self.affine(g, p, x, fuse)
    }

    /// Full forward pass; returns the output of every configured stage,
    /// coarse to fine. `x_t` is `[B, N, 132]`, `cond` `[B, N, 54]`, one `t` per batch element.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x_t: Var, ts: &[usize], cond: Var) -> Result<Vec<StageOutput>> {
        if g.shape(x_t).first() != Some(&ts.len()) {
            return Err(Error::shape("forward", format!("{} time steps for batch {:?}", ts.len(), g.shape(x_t))));
        }
        if let Some(&bad) = ts.iter().find(|&&t| t == 0 || t > self.cfg.t_max) {
            return Err(Error::InvalidArgument(format!("time step {bad} outside 1..={}", self.cfg.t_max)));
        }
        let mut h = self.embed_inputs(g, p, x_t, cond)?;
        let t_feat = self.time_features(g, p, ts)?;
        let c_lat = if self.stages.len() > 1 {
            Some(self.affine(g, p, cond, self.cond)?)
        } else {
            None
        };
        let mut outs = Vec::with_capacity(self.stages.len());
        for k in 0..self.stages.len() {
            let o = self.stage_forward(g, p, k, h, t_feat)?;
            if k + 1 < self.stages.len() {
                h = self.fuse(g, p, k, c_lat.unwrap(), &o)?;
            }
            outs.push(o);
        }
        Ok(outs)
    }

    /// Forward pass on plain tensors; returns each stage's prediction.
    pub fn predict(&self, x_t: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Vec<(ScaleId, Tensor)>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let (xv, cv) = (g.leaf(x_t.clone()), g.leaf(cond.clone()));
        let outs = self.forward(&mut g, &p, xv, ts, cv)?;
        Ok(outs.iter().map(|o| (o.id, g.value(o.s_hat).clone())).collect())
    }
}

impl Denoiser for Mage {
    /// The finest-stage estimate, with one shared `t` for the whole batch.
    fn predict_x0(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        let b = *x_t.shape().first().unwrap_or(&0);
        let mut outs = self.predict(x_t, &vec![t; b], cond)?;
        Ok(outs.pop().expect("S3 is always configured").1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(stages: Vec<ScaleId>, fusion: FusionMode) -> ModelConfig {
        ModelConfig {
            latent_dim: 16,
            blocks: [1, 1, 1],
            window: 8,
            stages,
            fusion,
            t_max: 100,
            schedule: ScheduleKind::Cosine,
        }
    }

    fn randomize(m: &mut Mage, std: f64, rng: &mut ChaCha8Rng) {
        let ids: Vec<ParamId> = m.store.ids().collect();
        for id in ids {
            let shape = m.store.value(id).shape().to_vec();
            *m.store.value_mut(id) = Tensor::randn(&shape, rng).map(|v| v * std);
        }
    }

    fn inputs(b: usize, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
        (Tensor::randn(&[b, n, 132], rng), Tensor::randn(&[b, n, COND_DIM], rng))
    }

    #[test]
    fn output_shapes_per_stage_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ModelConfig { window: 12, ..ModelConfig::desk() };
        let m = Mage::new(cfg, &mut rng).unwrap();
        let (x, c) = inputs(2, 12, &mut rng);
        let outs = m.predict(&x, &[3, 900], &c).unwrap();
        let shapes: Vec<_> = outs.iter().map(|(id, t)| (*id, t.shape().to_vec())).collect();
        assert_eq!(
            shapes,
            vec![(ScaleId::S1, vec![2, 12, 36]), (ScaleId::S2, vec![2, 12, 66]), (ScaleId::S3, vec![2, 12, 132])]
        );
        let only = Mage::new(tiny(vec![ScaleId::S3], FusionMode::CFFrec), &mut rng).unwrap();
        let (x, c) = inputs(1, 8, &mut rng);
        let outs = only.predict(&x, &[5], &c).unwrap();
        assert_eq!(outs.len(), 1);
        assert_eq!(outs[0].1.shape(), &[1, 8, 132]);
    }

    #[test]
    fn zero_heads_give_zero_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Mage::new(tiny(ScaleId::ALL.to_vec(), FusionMode::CFFrec), &mut rng).unwrap();
        let (x, c) = inputs(2, 8, &mut rng);
        for (_, t) in m.predict(&x, &[1, 50], &c).unwrap() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(vec![ScaleId::S1, ScaleId::S2], FusionMode::CF);
        assert!(c.validate().is_err());
        c.stages = vec![ScaleId::S3, ScaleId::S1];
        assert!(c.validate().is_err());
        c.stages = vec![ScaleId::S3];
        c.latent_dim = 4;
        assert!(c.validate().is_err());
        assert_eq!("c+f_rec".parse::<FusionMode>().unwrap(), FusionMode::CFrec);
        assert!("c".parse::<FusionMode>().is_err());
    }

    #[test]
    fn fusion_widths_and_f_rec_dataflow() {
        assert_eq!(FusionMode::CFFrec.width(64), 192);
        assert_eq!(FusionMode::CF.width(64), 128);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Mage::new(tiny(ScaleId::ALL.to_vec(), FusionMode::CF), &mut rng).unwrap();
        randomize(&mut m, 0.3, &mut rng);
        assert!(m.store.id("s1.rec.w").is_none());
        let (x, c) = inputs(1, 8, &mut rng);
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let (xv, cv) = (g.leaf(x), g.leaf(c));
        let outs = m.forward(&mut g, &p, xv, &[7], cv).unwrap();
        assert!(outs.iter().all(|o| o.f_rec.is_none()));
        assert_eq!(m.store.value(m.store.id("s1.fuse.w").unwrap()).shape(), &[32, 16]);
    }

    #[test]
    fn concatenation_order_is_x_then_cond() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Mage::new(tiny(vec![ScaleId::S3], FusionMode::CFFrec), &mut rng).unwrap();
        let x = Tensor::full(&[1, 8, 132], 0.0);
        let mut cdata = vec![0.0; 8 * COND_DIM];
        cdata[0] = 1.0;
        let c = Tensor::new(&[1, 8, COND_DIM], cdata).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let (xv, cv) = (g.leaf(x), g.leaf(c));
        let h = m.embed_inputs(&mut g, &p, xv, cv).unwrap();
        // a unit in cond channel 0 selects embedding row 132
        let w = m.store.value(m.store.id("embed.w").unwrap());
        assert_eq!(&g.value(h).data()[..16], &w.data()[132 * 16..133 * 16]);
        let zero = m.embed_inputs(&mut g, &p, xv, xv);
        assert!(zero.is_err());
    }

    #[test]
    fn zero_residual_branch_is_identity_and_time_is_live() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = Mage::new(tiny(vec![ScaleId::S3], FusionMode::CFFrec), &mut rng).unwrap();
        let h0 = Tensor::randn(&[1, 8, 16], &mut rng);
        let run = |m: &Mage, t: usize| {
            let mut g = Graph::new();
            let p = m.bind(&mut g);
            let h = g.leaf(h0.clone());
            let tf = m.time_features(&mut g, &p, &[t]).unwrap();
            let o = m.denoiser_block(&mut g, &p, 0, 0, h, tf).unwrap();
            g.value(o).clone()
        };
        let mut zeroed = m.clone();
        for name in ["s3.block0.ff.w", "s3.block0.ff.b", "s3.block0.mix.w", "s3.block0.mix.b"] {
            let id = zeroed.store.id(name).unwrap();
            let s = zeroed.store.value(id).shape().to_vec();
            *zeroed.store.value_mut(id) = Tensor::zeros(&s);
        }
        assert_eq!(run(&zeroed, 10), h0);
        randomize(&mut m, 0.3, &mut rng);
        assert!(run(&m, 10).max_abs_diff(&run(&m, 700)) > 1e-6);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = Mage::new(tiny(vec![ScaleId::S3], FusionMode::CFFrec), &mut rng).unwrap();
        randomize(&mut m, 0.4, &mut rng);
        let h0 = Tensor::randn(&[2, 8, 16], &mut rng);
        let target = Tensor::randn(&[2, 8, 16], &mut rng);
        let mut inputs: Vec<Tensor> = m.store.ids().map(|id| m.store.value(id).clone()).collect();
        inputs.push(h0);
        let np = m.store.len();
        let err = check_gradients(&inputs, |g, vars| {
            let p = m.bind_vars(vars[..np].to_vec())?;
            let tf = m.time_features(g, &p, &[4, 60])?;
            let o = m.denoiser_block(g, &p, 0, 0, vars[np], tf)?;
            let y = g.leaf(target.clone());
            g.mse(o, y)
        })
        .unwrap();
        assert!(err < 1e-4, "block gradient error {err}");
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = Mage::new(tiny(ScaleId::ALL.to_vec(), FusionMode::CFFrec), &mut rng).unwrap();
        randomize(&mut m, 0.3, &mut rng);
        let (x, c) = inputs(1, 8, &mut rng);
        let targets: Vec<Tensor> = [36, 66, 132].iter().map(|&d| Tensor::randn(&[1, 8, d], &mut rng)).collect();
        let inputs: Vec<Tensor> = m.store.ids().map(|id| m.store.value(id).clone()).collect();
        let err = check_gradients(&inputs, |g, vars| {
            let p = m.bind_vars(vars.to_vec())?;
            let (xv, cv) = (g.leaf(x.clone()), g.leaf(c.clone()));
            let outs = m.forward(g, &p, xv, &[42], cv)?;
            let mut total = None;
            for (o, t) in outs.iter().zip(&targets) {
                let y = g.leaf(t.clone());
                let l = g.mse(o.s_hat, y)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
            }
            Ok(total.unwrap())
        })
        .unwrap();
        assert!(err < 1e-3, "model gradient error {err}");
    }

    #[test]
    fn param_count_is_a_function_of_config() {
        let mut r1 = ChaCha8Rng::seed_from_u64(8);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let cfg = tiny(ScaleId::ALL.to_vec(), FusionMode::CFFrec);
        let a = Mage::new(cfg.clone(), &mut r1).unwrap().param_count();
        let b = Mage::new(cfg, &mut r2).unwrap().param_count();
        assert_eq!(a, b);
        // embed 186·16+16, cond 54·16+16, time 16·16+16,
        // per block 2·16 + (256+16) + (64+8) + (256+16) = 648,
        // heads 16·d+d, rec (d·16+16) for s1,s2, fuse 48·16+16 for s1,s2
        let want = 2992 + 880 + 272 + 3 * 648 + (17 * 36 + 17 * 66 + 17 * 132) + (36 * 16 + 16 + 66 * 16 + 16) + 2 * 784;
        assert_eq!(a, want);
        let d = Mage::new(ModelConfig::desk(), &mut r1).unwrap().param_count();
        assert!(d > 100_000);
    }
}
