//! The shared conditional flow, its per-group latent shifts and the
//! condition encoder, composed into the training objective and sampler.

use std::f64::consts::PI;

use crate::autodiff::{Tape, Var};
use crate::conditioning::{make_condition_scaled, resize_nearest, ConditionEncoder, ConditionSpec};
use crate::error::{Error, Result};
use crate::flow::{split, squeeze, unsplit, unsqueeze, Actnorm, Direction, FlowStep, LayerIO};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::shift::{logp_zx, LatentShift, ShiftMode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Image channels.
    pub channels: usize,
    /// Multi-scale levels. `0` selects a single unconditioned actnorm.
    pub levels: usize,
    /// Flow steps per level.
    pub steps: usize,
    /// Hidden width of subnets and the condition encoder.
    pub hidden: usize,
    pub shift_mode: ShiftMode,
    pub cond: ConditionSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            levels: 2,
            steps: 4,
            hidden: 16,
            shift_mode: ShiftMode::Full,
            cond: ConditionSpec::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.levels > 3 {
            return Err(Error::Config(format!("levels must be at most 3, got {}", self.levels)));
        }
        if self.levels > 0 && (self.steps == 0 || self.hidden == 0) {
            return Err(Error::Config("steps and hidden must be positive".into()));
        }
        self.cond.validate()
    }

    /// Spatial extents must survive `levels` squeezes and the condition
    /// factor.
    pub fn check_patch(&self, h: usize, w: usize) -> Result<()> {
        let q = 1usize << self.levels;
        if h == 0 || w == 0 || !h.is_multiple_of(q) || !w.is_multiple_of(q) {
            return Err(Error::Config(format!(
                "patch {h}×{w} is not divisible by 2^levels = {q}"
            )));
        }
        if self.levels > 0 && (!h.is_multiple_of(self.cond.down_factor) || !w.is_multiple_of(self.cond.down_factor)) {
            return Err(Error::Config(format!(
                "patch {h}×{w} is not divisible by cond_down_factor {}",
                self.cond.down_factor
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Level {
    steps: Vec<FlowStep>,
    /// Channels inside the level (after squeeze).
    channels: usize,
    split: bool,
}

/// Latent groups with the accumulated log-determinant.
pub struct Encoded<'t> {
    pub groups: Vec<Var<'t>>,
    pub logdet: Var<'t>,
}

/// Per-domain and total negative log-likelihood, in nats per sample.
pub struct Nll<'t> {
    pub total: Var<'t>,
    pub x: Var<'t>,
    pub y: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct DeFlowModel {
    config: ModelConfig,
    store: ParamStore,
    /// Only used when `levels == 0`.
    base: Option<Actnorm>,
    levels: Vec<Level>,
    encoder: Option<ConditionEncoder>,
    shifts: Vec<LatentShift>,
}

impl DeFlowModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::stream(seed, 0x5eed_f10e);
        let mut store = ParamStore::new();
        let c = config.channels;
        if config.levels == 0 {
            let base = Actnorm::new(&mut store, "base.actnorm", c);
            let shift = LatentShift::new(&mut store, "shift0", c, config.shift_mode);
            return Ok(Self {
                config,
                store,
                base: Some(base),
                levels: Vec::new(),
                encoder: None,
                shifts: vec![shift],
            });
        }
        let hc = config.hidden;
        let encoder = ConditionEncoder::new(&mut store, "encoder", c, hc, &mut rng);
        let mut levels = Vec::new();
        let mut shifts = Vec::new();
        let mut ch = c;
        for l in 0..config.levels {
            ch *= 4;
            let steps = (0..config.steps)
                .map(|k| FlowStep::new(&mut store, &format!("level{l}.step{k}"), ch, hc, hc, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let is_split = l + 1 < config.levels;
            levels.push(Level {
                steps,
                channels: ch,
                split: is_split,
            });
            if is_split {
                shifts.push(LatentShift::new(&mut store, &format!("shift{l}"), ch / 2, config.shift_mode));
                ch /= 2;
            }
        }
        shifts.push(LatentShift::new(
            &mut store,
            &format!("shift{}", config.levels - 1),
            ch,
            config.shift_mode,
        ));
        Ok(Self {
            config,
            store,
            base: None,
            levels,
            encoder: Some(encoder),
            shifts,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn shifts(&self) -> &[LatentShift] {
        &self.shifts
    }

    /// Parameters excluded from optimization.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        if !self.config.shift_mode.is_trainable() {
            for s in &self.shifts {
                out.push(s.mu());
                out.push(s.m());
            }
        }
        if self.config.cond.disabled {
            if let Some(enc) = &self.encoder {
                out.extend(enc.params());
            }
        }
        out
    }

    fn actnorms(&self) -> Vec<&Actnorm> {
        let mut out: Vec<&Actnorm> = self.base.iter().collect();
        for l in &self.levels {
            out.extend(l.steps.iter().map(|s| &s.actnorm));
        }
        out
    }

    fn actnorms_mut(&mut self) -> Vec<&mut Actnorm> {
        let mut out: Vec<&mut Actnorm> = self.base.iter_mut().collect();
        for l in &mut self.levels {
            out.extend(l.steps.iter_mut().map(|s| &mut s.actnorm));
        }
        out
    }

    pub fn is_initialized(&self) -> bool {
        self.actnorms().iter().all(|a| a.is_initialized())
    }

    /// Marks every actnorm as initialized without touching its values
    /// (used when restoring a checkpoint).
    pub fn mark_initialized(&mut self) {
        self.actnorms_mut().into_iter().for_each(|a| a.mark_initialized());
    }

    /// Data-dependent actnorm init from one batch and its raw condition.
    pub fn initialize(&mut self, x: &Tensor, cond: Option<&Tensor>) -> Result<()> {
        let updates = {
            let tape = Tape::new();
            let p = Binding::initializing(&self.store, &tape);
            self.encode(&p, tape.constant(x.clone()), cond)?;
            p.take_updates()
        };
        for (id, value) in updates {
            self.store.set(id, value)?;
        }
        self.mark_initialized();
        Ok(())
    }

    /// Total latent size per sample for an input of the given extents.
    pub fn latent_shapes(&self, n: usize, h: usize, w: usize) -> Vec<Vec<usize>> {
        if self.levels.is_empty() {
            return vec![vec![n, self.config.channels, h, w]];
        }
        let mut out = Vec::new();
        let (mut hh, mut ww) = (h, w);
        for l in &self.levels {
            hh /= 2;
            ww /= 2;
            if l.split {
                out.push(vec![n, l.channels / 2, hh, ww]);
            } else {
                out.push(vec![n, l.channels, hh, ww]);
            }
        }
        out
    }

    /// Raw condition `h(img)`; `None` for the unconditioned model.
    pub fn condition(&self, img: &Tensor, rng: &mut Rng) -> Result<Option<Tensor>> {
        self.condition_scaled(img, None, rng)
    }

    /// Condition with a per-channel factor on the noise level.
    pub fn condition_scaled(&self, img: &Tensor, scale: Option<&[f64]>, rng: &mut Rng) -> Result<Option<Tensor>> {
        if self.levels.is_empty() {
            return Ok(None);
        }
        make_condition_scaled(img, &self.config.cond, scale, rng).map(Some)
    }

    /// Condition features aligned with each level's activations.
    fn features<'t>(&self, p: &Binding<'t>, n: usize, h: usize, w: usize, cond: Option<&Tensor>) -> Result<Vec<Var<'t>>> {
        let Some(enc) = &self.encoder else {
            return Ok(Vec::new());
        };
        let tape = p.tape();
        let hc = enc.out_channels();
        let mut sizes = Vec::new();
        let (mut hh, mut ww) = (h, w);
        for _ in &self.levels {
            hh /= 2;
            ww /= 2;
            sizes.push((hh, ww));
        }
        if self.config.cond.disabled {
            return Ok(sizes
                .into_iter()
                .map(|(a, b)| tape.constant(Tensor::zeros(&[n, hc, a, b])))
                .collect());
        }
        let raw = cond.ok_or_else(|| Error::invalid("conditional model needs a condition image"))?;
        let f = self.config.cond.down_factor;
        if raw.shape() != [n, self.config.channels, h / f, w / f] {
            return Err(Error::ShapeMismatch {
                op: "condition image",
                lhs: vec![n, self.config.channels, h / f, w / f],
                rhs: raw.shape().to_vec(),
            });
        }
        let feat = enc.forward(p, tape.constant(raw.clone()))?;
        sizes.into_iter().map(|(a, b)| resize_nearest(feat, a, b)).collect()
    }

    fn check_input(&self, x: &Var<'_>) -> Result<(usize, usize, usize)> {
        let shape = x.shape();
        let &[n, c, h, w] = shape.as_slice() else {
            return Err(Error::invalid(format!("model input must be [N,C,H,W], got {shape:?}")));
        };
        if c != self.config.channels || n == 0 {
            return Err(Error::invalid(format!(
                "model over {} channels got input {shape:?}",
                self.config.channels
            )));
        }
        self.config.check_patch(h, w)?;
        Ok((n, h, w))
    }

    /// `z = f(x; h)` and `ln|det ∂f/∂x|` per sample.
    pub fn encode<'t>(&self, p: &Binding<'t>, x: Var<'t>, cond: Option<&Tensor>) -> Result<Encoded<'t>> {
        let (n, h, w) = self.check_input(&x)?;
        if let Some(base) = &self.base {
            let out = base.apply(p, LayerIO::new(x, None), Direction::Forward)?;
            return Ok(Encoded {
                groups: vec![out.act],
                logdet: out.logdet,
            });
        }
        let feats = self.features(p, n, h, w, cond)?;
        let mut act = x;
        let mut logdet = p.tape().constant(Tensor::zeros(&[n]));
        let mut groups = Vec::new();
        for (level, feat) in self.levels.iter().zip(&feats) {
            let mut io = LayerIO {
                act: squeeze(act)?,
                logdet,
                cond: Some(*feat),
            };
            for step in &level.steps {
                io = step.apply(p, io, Direction::Forward)?;
            }
            logdet = io.logdet;
            if level.split {
                let (kept, latent) = split(io.act)?;
                groups.push(latent);
                act = kept;
            } else {
                groups.push(io.act);
            }
        }
        Ok(Encoded { groups, logdet })
    }

    /// `x = f⁻¹(z; h)`.
    pub fn decode<'t>(&self, p: &Binding<'t>, groups: &[Var<'t>], cond: Option<&Tensor>) -> Result<Var<'t>> {
        if groups.len() != self.shifts.len() {
            return Err(Error::invalid(format!(
                "decode needs {} latent groups, got {}",
                self.shifts.len(),
                groups.len()
            )));
        }
        if let Some(base) = &self.base {
            return Ok(base.apply(p, LayerIO::new(groups[0], None), Direction::Reverse)?.act);
        }
        let last = groups[groups.len() - 1].shape();
        let scale = 1usize << self.levels.len();
        let (n, h, w) = (last[0], last[2] * scale, last[3] * scale);
        let feats = self.features(p, n, h, w, cond)?;
        let mut act = groups[groups.len() - 1];
        for (i, (level, feat)) in self.levels.iter().zip(&feats).enumerate().rev() {
            if level.split {
                act = unsplit(act, groups[i])?;
            }
            let mut io = LayerIO::new(act, Some(*feat));
            for step in level.steps.iter().rev() {
                io = step.apply(p, io, Direction::Reverse)?;
            }
            act = unsqueeze(io.act)?;
        }
        Ok(act)
    }

    /// `ln p(x | h)` per sample with the standard-normal base.
    pub fn log_px<'t>(&self, p: &Binding<'t>, x: Var<'t>, cond: Option<&Tensor>) -> Result<Var<'t>> {
        let e = self.encode(p, x, cond)?;
        logp_zx(p.tape(), &e.groups)?.add(e.logdet)
    }

    /// `ln p(y | h)` per sample with the shifted base `N(μ_u, I + Σ_u)`.
    pub fn log_py<'t>(&self, p: &Binding<'t>, y: Var<'t>, cond: Option<&Tensor>) -> Result<Var<'t>> {
        let e = self.encode(p, y, cond)?;
        let mut total = e.logdet;
        for (shift, &z) in self.shifts.iter().zip(&e.groups) {
            total = total.add(shift.logp_zy(p, z)?)?;
        }
        Ok(total)
    }

    /// `−mean ln p(x|h(x)) − mean ln p(y|h(y))`.
    pub fn marginal_nll<'t>(
        &self,
        p: &Binding<'t>,
        x: &Tensor,
        hx: Option<&Tensor>,
        y: &Tensor,
        hy: Option<&Tensor>,
    ) -> Result<Nll<'t>> {
        if x.is_empty() || y.is_empty() {
            return Err(Error::invalid("marginal NLL needs nonempty batches of both domains"));
        }
        let tape = p.tape();
        let nx = self.log_px(p, tape.constant(x.clone()), hx)?.mean().neg();
        let ny = self.log_py(p, tape.constant(y.clone()), hy)?.mean().neg();
        Ok(Nll {
            total: nx.add(ny)?,
            x: nx,
            y: ny,
        })
    }

    /// `−mean ln p(y | x)` over index-aligned pairs, both encoded with
    /// the clean image's condition.
    pub fn paired_cond_nll<'t>(&self, p: &Binding<'t>, x: &Tensor, y: &Tensor, hx: Option<&Tensor>) -> Result<Var<'t>> {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: "paired batches",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let tape = p.tape();
        let ex = self.encode(p, tape.constant(x.clone()), hx)?;
        let ey = self.encode(p, tape.constant(y.clone()), hx)?;
        let mut total = ey.logdet;
        for ((shift, &zy), &zx) in self.shifts.iter().zip(&ey.groups).zip(&ex.groups) {
            total = total.add(shift.logp_cond(p, zy, zx)?)?;
        }
        Ok(total.mean().neg())
    }

    /// `y = f⁻¹(f(x; h(x)) + τ·u; h(x))`.
    pub fn degrade(&self, x: &Tensor, tau: f64, seed: u64) -> Result<Tensor> {
        self.degrade_scaled(x, tau, seed, None)
    }

    /// [`DeFlowModel::degrade`] with condition noise scaled per channel.
    pub fn degrade_scaled(&self, x: &Tensor, tau: f64, seed: u64, cond_scale: Option<&[f64]>) -> Result<Tensor> {
        let mut cond_rng = Rng::stream(seed, 1);
        let mut shift_rng = Rng::stream(seed, 2);
        let hx = self.condition_scaled(x, cond_scale, &mut cond_rng)?;
        let tape = Tape::new();
        let p = Binding::frozen(&self.store, &tape);
        let e = self.encode(&p, tape.constant(x.clone()), hx.as_ref())?;
        let mut shifted = Vec::with_capacity(e.groups.len());
        for (shift, &z) in self.shifts.iter().zip(&e.groups) {
            let u = shift.sample(&self.store, &z.shape(), tau, &mut shift_rng)?;
            shifted.push(z.add(tape.constant(u))?);
        }
        let y = self.decode(&p, &shifted, hx.as_ref())?;
        Ok((*y.value()).clone())
    }

    /// Encodes a batch without gradients and returns the latent groups.
    pub fn latents(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let p = Binding::frozen(&self.store, &tape);
        let e = self.encode(&p, tape.constant(x.clone()), cond)?;
        Ok(e.groups.iter().map(|g| (*g.value()).clone()).collect())
    }

    /// Sets every group's shift from clean and degraded latents.
    pub fn estimate_shift(&mut self, zx: &[Tensor], zy: &[Tensor]) -> Result<()> {
        for ((shift, a), b) in self.shifts.iter().zip(zx).zip(zy) {
            shift.estimate_from_latents(&mut self.store, a, b)?;
        }
        Ok(())
    }

    /// Per-sample NLL in nats per dimension, evaluated without gradients.
    pub fn nll_per_dim(&self, batch: &Tensor, cond: Option<&Tensor>, degraded_side: bool) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = Binding::frozen(&self.store, &tape);
        let v = tape.constant(batch.clone());
        let lp = if degraded_side {
            self.log_py(&p, v, cond)?
        } else {
            self.log_px(&p, v, cond)?
        };
        let d = (batch.len() / batch.shape()[0]) as f64;
        let out = lp.value().data().iter().map(|l| -l / d).collect();
        Ok(out)
    }
}

/// `0.5·ln(2π)`, the per-dimension NLL of a standard normal at its mean.
pub fn half_ln_2pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}
