//! Adam, the learning-rate schedule, the training loop and checkpoints.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tape;
use crate::config::{scalar_config, TrainConfig};
use crate::data::{dequantize_5bit, sample_unpaired_batch, ChannelStats, NormStats, TrainingView};
use crate::error::{Error, Result};
use crate::gauss1d::SampleSets1D;
use crate::model::DeFlowModel;
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::shift::ShiftMode;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Size of the symmetry-breaking `M` placed before the first step: `M = 0`
/// is a stationary point of the shifted density.
pub const SHIFT_SEED_SCALE: f64 = 1e-3;

pub const METRICS_HEADER: &str = "iter,lr,nll_total,nll_x,nll_y,grad_norm";

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update. Parameters in `frozen` are left
    /// untouched. A non-finite gradient aborts before anything changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64, frozen: &[ParamId]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::invalid(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !frozen.contains(&id) && !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter '{}'", store.name(id))));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if frozen.contains(&id) {
                continue;
            }
            let g = grads[i].data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for k in 0..g.len() {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// `base_lr · 2^(−milestones passed)`.
pub fn lr_at(config: &TrainConfig, iter: usize) -> f64 {
    let frac = iter as f64 / config.iterations.max(1) as f64;
    let passed = config.lr_milestones.iter().filter(|&&m| frac >= m).count();
    config.base_lr * 0.5f64.powi(passed as i32)
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Model plus optimizer state at an iteration boundary.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: DeFlowModel,
    pub adam: AdamState,
    pub iteration: usize,
    pub norm: Option<NormStats>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = DeFlowModel::new(config.model.clone(), config.seed)?;
        let adam = AdamState::new(model.store());
        Ok(Self {
            config: config.clone(),
            model,
            adam,
            iteration: 0,
            norm: None,
        })
    }
}

impl TrainState {
    /// Condition of a preprocessed image of one domain. With normalization
    /// the noise level is kept on the pixel scale.
    pub fn condition(&self, img: &Tensor, degraded: bool, rng: &mut Rng) -> Result<Option<Tensor>> {
        let scale = self
            .norm
            .as_ref()
            .map(|n| if degraded { n.degraded.inverse_std() } else { n.clean.inverse_std() });
        self.model.condition_scaled(img, scale.as_deref(), rng)
    }

    /// Copy with every latent shift set to zero: the independence baseline.
    pub fn with_zero_shift(&self) -> Result<Self> {
        let mut out = self.clone();
        for s in self.model.shifts().to_vec() {
            for id in [s.mu(), s.m()] {
                let shape = out.model.store().get(id).shape().to_vec();
                out.model.store_mut().set(id, Tensor::zeros(&shape))?;
            }
        }
        Ok(out)
    }

    /// `degrade` on a data-space batch, through the normalization if any.
    pub fn degrade(&self, x: &Tensor, tau: f64, seed: u64) -> Result<Tensor> {
        match &self.norm {
            Some(n) => {
                let scale = n.clean.inverse_std();
                let y = self.model.degrade_scaled(&n.clean.normalize(x), tau, seed, Some(&scale))?;
                Ok(n.degraded.denormalize(&y))
            }
            None => self.model.degrade(x, tau, seed),
        }
    }
}

/// One row of the metrics log. NLLs are in nats per dimension; the
/// gradient norm is measured before clipping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub lr: f64,
    pub nll_total: f64,
    pub nll_x: f64,
    pub nll_y: f64,
    pub grad_norm: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.iter, self.lr, self.nll_total, self.nll_x, self.nll_y, self.grad_norm
        )
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
    /// Iterations on which the gradient was clipped.
    pub clipped: Vec<usize>,
}

/// Places a small multiple of the identity in every trainable `M` that is
/// still exactly zero.
pub fn seed_shift(model: &mut DeFlowModel) -> Result<()> {
    if !model.config().shift_mode.is_trainable() {
        return Ok(());
    }
    for s in model.shifts().to_vec() {
        let cur = model.store().get(s.m());
        if cur.max_abs() != 0.0 {
            continue;
        }
        let c = s.channels();
        let seeded = match s.mode() {
            ShiftMode::Diagonal => Tensor::full(&[c], SHIFT_SEED_SCALE),
            _ => Tensor::eye(c).map(|v| v * SHIFT_SEED_SCALE),
        };
        model.store_mut().set(s.m(), seeded)?;
    }
    Ok(())
}

struct PreparedBatch {
    x: Tensor,
    y: Tensor,
    hx: Option<Tensor>,
    hy: Option<Tensor>,
}

/// Batch `i` depends only on `(seed, i)`.
fn prepare_batch(state: &TrainState, view: TrainingView<'_>, iter: usize) -> Result<PreparedBatch> {
    let cfg = &state.config;
    let mut rng = Rng::stream(cfg.seed, 1 << 32 | iter as u64);
    let b = sample_unpaired_batch(view, cfg.batch_size, cfg.patch_size, &mut rng)?;
    let (mut x, mut y) = (b.x, b.y);
    if cfg.dequantize {
        x = dequantize_5bit(&x, &mut rng);
        y = dequantize_5bit(&y, &mut rng);
    }
    if let Some(norm) = &state.norm {
        x = norm.clean.normalize(&x);
        y = norm.degraded.normalize(&y);
    }
    let hx = state.condition(&x, false, &mut rng)?;
    let hy = state.condition(&y, true, &mut rng)?;
    Ok(PreparedBatch { x, y, hx, hy })
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Where training writes its artifacts.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOutputs<'a> {
    pub metrics: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
}

/// Runs the configured number of iterations on the unpaired view.
pub fn train(config: &TrainConfig, view: TrainingView<'_>, out: TrainOutputs<'_>) -> Result<TrainOutcome> {
    let mut state = TrainState::new(config)?;
    state.norm = NormStats::for_mode(config.normalize, view)?;
    if let Some(p) = out.metrics {
        fs::write(p, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(p, e))?;
    }
    let d = (config.model.channels * config.patch_size * config.patch_size) as f64;
    let frozen = state.model.frozen_params();
    let mut metrics = Vec::new();
    let mut clipped = Vec::new();
    for iter in 0..config.iterations {
        let batch = prepare_batch(&state, view, iter)?;
        if !state.model.is_initialized() {
            state.model.initialize(&batch.x, batch.hx.as_ref())?;
            seed_shift(&mut state.model)?;
        }
        let lr = lr_at(config, iter);
        let (row, mut grads) = {
            let tape = Tape::new();
            let p = Binding::trainable(state.model.store(), &tape);
            let nll = state
                .model
                .marginal_nll(&p, &batch.x, batch.hx.as_ref(), &batch.y, batch.hy.as_ref())?;
            let loss = nll.total.scale(1.0 / d);
            let loss_value = loss.value().item();
            if !loss_value.is_finite() {
                if let Some(path) = out.checkpoint {
                    save_checkpoint(&state, path)?;
                }
                return Err(Error::NonFinite(format!(
                    "loss at iteration {iter}; last good state kept at iteration {}",
                    state.iteration
                )));
            }
            let row = MetricsRow {
                iter,
                lr,
                nll_total: loss_value,
                nll_x: nll.x.value().item() / d,
                nll_y: nll.y.value().item() / d,
                grad_norm: 0.0,
            };
            (row, p.grads(&tape.backward(loss)?))
        };
        for id in &frozen {
            grads[id.0] = Tensor::zeros(grads[id.0].shape());
        }
        let norm = global_norm(&grads);
        if norm > config.grad_clip {
            clipped.push(iter);
            let s = config.grad_clip / norm;
            grads.iter_mut().for_each(|g| *g = g.map(|v| v * s));
        }
        state.adam.step(state.model.store_mut(), &grads, lr, &frozen)?;
        state.iteration = iter + 1;
        let row = MetricsRow { grad_norm: norm, ..row };
        let last = iter + 1 == config.iterations;
        if config.log_every > 0 && (iter % config.log_every == 0 || last) {
            if let Some(p) = out.metrics {
                append_line(p, &row.to_csv())?;
            }
            metrics.push(row);
        }
        if let (Some(path), true) = (out.checkpoint, config.checkpoint_every > 0) {
            if (iter + 1) % config.checkpoint_every == 0 && !last {
                save_checkpoint(&state, path)?;
            }
        }
    }
    if !state.model.is_initialized() {
        let batch = prepare_batch(&state, view, 0)?;
        state.model.initialize(&batch.x, batch.hx.as_ref())?;
    }
    if config.model.shift_mode == ShiftMode::FrozenZero {
        estimate_shift_post_hoc(&mut state, view)?;
    }
    if let Some(path) = out.checkpoint {
        save_checkpoint(&state, path)?;
    }
    Ok(TrainOutcome {
        state,
        metrics,
        clipped,
    })
}

/// Number of patch batches used by the post-hoc shift estimate.
const POST_HOC_BATCHES: usize = 32;

/// Sets the shift from latent statistics of both domains.
pub fn estimate_shift_post_hoc(state: &mut TrainState, view: TrainingView<'_>) -> Result<()> {
    let mut zx: Vec<Vec<Tensor>> = Vec::new();
    let mut zy: Vec<Vec<Tensor>> = Vec::new();
    for b in 0..POST_HOC_BATCHES {
        let batch = prepare_batch(state, view, usize::MAX - b)?;
        zx.push(state.model.latents(&batch.x, batch.hx.as_ref())?);
        zy.push(state.model.latents(&batch.y, batch.hy.as_ref())?);
    }
    let merge = |all: &[Vec<Tensor>]| -> Result<Vec<Tensor>> {
        (0..all[0].len())
            .map(|g| Tensor::cat_batch(&all.iter().map(|v| v[g].clone()).collect::<Vec<_>>()))
            .collect()
    };
    let (zx, zy) = (merge(&zx)?, merge(&zy)?);
    state.model.estimate_shift(&zx, &zy)
}

/// Result of fitting the single-affine-layer model to scalar samples.
#[derive(Clone, Debug)]
pub struct ScalarFit {
    pub model: DeFlowModel,
    /// Joint NLL (mean per domain, summed) at the final parameters.
    pub nll: f64,
    pub scale: f64,
    pub offset: f64,
    pub mu_u: f64,
    pub var_u: f64,
}

fn scalar_batch(v: &[f64]) -> Result<Tensor> {
    Tensor::new(&[v.len(), 1, 1, 1], v.to_vec())
}

fn scalar_readout(model: &DeFlowModel) -> (f64, f64, f64, f64) {
    let store = model.store();
    let ls = store.find("base.actnorm.log_scale").map(|id| store.get(id).data()[0]).unwrap_or(0.0);
    let b = store.find("base.actnorm.bias").map(|id| store.get(id).data()[0]).unwrap_or(0.0);
    let shift = &model.shifts()[0];
    let mu = store.get(shift.mu()).data()[0];
    let var = shift.covariance(store).data()[0];
    (ls.exp(), b, mu, var)
}

/// Full-batch Adam on the scalar model with the default halving schedule.
/// Actnorm is initialized from the clean samples first.
pub fn fit_scalar_flow(samples: &SampleSets1D, iterations: usize, lr: f64, seed: u64) -> Result<ScalarFit> {
    let mut model = DeFlowModel::new(scalar_config(), seed)?;
    let x = scalar_batch(samples.xs())?;
    let y = scalar_batch(samples.ys())?;
    model.initialize(&x, None)?;
    seed_shift(&mut model)?;
    let mut adam = AdamState::new(model.store());
    let eval = |model: &DeFlowModel, grad: bool| -> Result<(f64, Option<Vec<Tensor>>)> {
        let tape = Tape::new();
        let p = if grad {
            Binding::trainable(model.store(), &tape)
        } else {
            Binding::frozen(model.store(), &tape)
        };
        let nll = model.marginal_nll(&p, &x, None, &y, None)?;
        let value = nll.total.value().item();
        let grads = if grad {
            Some(p.grads(&tape.backward(nll.total)?))
        } else {
            None
        };
        Ok((value, grads))
    };
    let schedule = TrainConfig {
        iterations,
        base_lr: lr,
        ..TrainConfig::default()
    };
    for i in 0..iterations {
        let (_, grads) = eval(&model, true)?;
        adam.step(model.store_mut(), &grads.expect("requested"), lr_at(&schedule, i), &[])?;
    }
    let (nll, _) = eval(&model, false)?;
    let (scale, offset, mu_u, var_u) = scalar_readout(&model);
    Ok(ScalarFit {
        model,
        nll,
        scale,
        offset,
        mu_u,
        var_u,
    })
}

const CKPT_MAGIC: &[u8; 8] = b"DFLOWCKP";
const CKPT_VERSION: u32 = 1;

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn put_f64s(w: &mut Vec<u8>, v: &[f64]) {
    put_u32(w, v.len() as u32);
    for x in v {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("bad length".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let mut rest = &self.buf[self.pos..];
        let before = rest.len();
        let t = Tensor::read_raw(&mut rest).map_err(|_| Error::Format("checkpoint truncated".into()))?;
        self.pos += before - rest.len();
        Ok(t)
    }
}

/// Serializes the full training state. The layout is: magic, version,
/// config echo, iteration, actnorm flag, Adam step, normalization stats,
/// then every parameter with its two Adam moments.
pub fn checkpoint_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut w = Vec::new();
    w.extend_from_slice(CKPT_MAGIC);
    put_u32(&mut w, CKPT_VERSION);
    put_str(&mut w, &state.config.to_text());
    put_u64(&mut w, state.iteration as u64);
    w.push(u8::from(state.model.is_initialized()));
    put_u64(&mut w, state.adam.step);
    match &state.norm {
        Some(n) => {
            w.push(1);
            for s in [&n.clean, &n.degraded] {
                put_f64s(&mut w, &s.mean);
                put_f64s(&mut w, &s.std);
            }
        }
        None => w.push(0),
    }
    let store = state.model.store();
    put_u32(&mut w, store.len() as u32);
    for (i, (name, value)) in store.iter().enumerate() {
        put_str(&mut w, name);
        for t in [value, &state.adam.m[i], &state.adam.v[i]] {
            t.write_raw(&mut w).map_err(|e| Error::io("<memory>", e))?;
        }
    }
    Ok(w)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, this build reads version {CKPT_VERSION}"
        )));
    }
    let text = r.string()?;
    let pairs: Vec<(String, String)> = text
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let config = TrainConfig::from_pairs(&pairs)?;
    let mut state = TrainState::new(&config)?;
    state.iteration = r.u64()? as usize;
    let initialized = r.take(1)?[0] == 1;
    state.adam.step = r.u64()?;
    state.norm = match r.take(1)?[0] {
        0 => None,
        1 => {
            let mut read = || -> Result<ChannelStats> {
                Ok(ChannelStats {
                    mean: r.f64s()?,
                    std: r.f64s()?,
                })
            };
            let clean = read()?;
            let degraded = read()?;
            Some(NormStats { clean, degraded })
        }
        b => return Err(Error::Format(format!("bad normalization flag {b}"))),
    };
    let count = r.u32()? as usize;
    if count != state.model.store().len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} parameters, its config implies {}",
            state.model.store().len()
        )));
    }
    for i in 0..count {
        let name = r.string()?;
        let value = r.tensor()?;
        let m = r.tensor()?;
        let v = r.tensor()?;
        let id = state
            .model
            .store()
            .find(&name)
            .filter(|id| id.0 == i)
            .ok_or_else(|| Error::Format(format!("unexpected parameter '{name}' at position {i}")))?;
        state.model.store_mut().set(id, value)?;
        if m.shape() != state.adam.m[i].shape() || v.shape() != state.adam.v[i].shape() {
            return Err(Error::Format(format!("optimizer moments of '{name}' have the wrong shape")));
        }
        state.adam.m[i] = m;
        state.adam.v[i] = v;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    if initialized {
        state.model.mark_initialized();
    }
    Ok(state)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Loads a checkpoint and checks that it matches the expected architecture.
pub fn load_checkpoint_for(path: &Path, expected: &TrainConfig) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    if state.config.architecture() != expected.architecture() {
        return Err(Error::ArchitectureMismatch {
            checkpoint: state.config.architecture(),
            model: expected.architecture(),
        });
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halvings() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0), 5e-5);
        assert_eq!(lr_at(&cfg, 96_000), 5e-5 / 16.0);
        assert_eq!(lr_at(&cfg, 50_000), 5e-5 / 2.0);
        let mut prev = f64::INFINITY;
        for i in (0..100_000).step_by(997) {
            assert!(lr_at(&cfg, i) <= prev);
            prev = lr_at(&cfg, i);
        }
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(vec![1.0, -2.0]));
        let mut st = AdamState::new(&store);
        st.step(&mut store, &[Tensor::from_vec(vec![0.3, -7.0])], 0.01, &[]).unwrap();
        let p = store.get(id).data();
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(vec![1.0]));
        let mut st = AdamState::new(&store);
        st.m[0] = Tensor::from_vec(vec![0.5]);
        st.v[0] = Tensor::from_vec(vec![0.0]);
        st.step = 10;
        let before = store.get(id).clone();
        let mut zero_store = store.clone();
        let mut zst = AdamState::new(&zero_store);
        zst.step(&mut zero_store, &[Tensor::zeros(&[1])], 0.1, &[]).unwrap();
        assert_eq!(zero_store.get(id), &before);
        assert_eq!(zst.m[0].data(), &[0.0]);
        st.step(&mut store, &[Tensor::zeros(&[1])], 0.1, &[]).unwrap();
        assert!((st.m[0].data()[0] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_nan_with_name() {
        let mut store = ParamStore::new();
        store.add("level0.weight", Tensor::from_vec(vec![1.0]));
        let mut st = AdamState::new(&store);
        let err = st
            .step(&mut store, &[Tensor::from_vec(vec![f64::NAN])], 0.1, &[])
            .unwrap_err();
        assert!(err.to_string().contains("level0.weight"));
        assert_eq!(st.step, 0);
    }

    use crate::data::{synth_corpus, DegradationOracle};
    use crate::gauss1d::{fit_closed_form, joint_marginal_nll_1d, sample_pairs_1d, to_standard_base, Gauss1DSolution};

    fn tiny_config(iterations: usize) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        for (k, v) in [
            ("iterations", iterations.to_string()),
            ("base_lr", "1e-3".into()),
            ("batch_size", "2".into()),
            ("patch_size", "8".into()),
            ("levels", "1".into()),
            ("steps", "1".into()),
            ("hidden", "4".into()),
            ("cond_down_factor", "2".into()),
            ("log_every", "1".into()),
            ("seed", "3".into()),
        ] {
            cfg.set(k, &v).unwrap();
        }
        cfg.validate().unwrap();
        cfg
    }

    fn tiny_corpus() -> crate::data::Corpus {
        let oracle = DegradationOracle::WhiteNoise { sigma: 0.05 };
        synth_corpus(&oracle, 4, 4, 3, 8, 9).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let corpus = tiny_corpus();
        let cfg = tiny_config(3);
        let a = train(&cfg, corpus.training_view(), TrainOutputs::default()).unwrap();
        let b = train(&cfg, corpus.training_view(), TrainOutputs::default()).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.state.model.store(), b.state.model.store());
        assert_eq!(a.metrics.len(), 3);
        assert!(a.metrics.iter().all(|r| r.nll_total.is_finite()));
        let r = &a.metrics[0];
        assert!((r.nll_total - (r.nll_x + r.nll_y)).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_is_initialization() {
        let corpus = tiny_corpus();
        let out = train(&tiny_config(0), corpus.training_view(), TrainOutputs::default()).unwrap();
        assert!(out.metrics.is_empty());
        assert!(out.state.model.is_initialized());
        assert_eq!(out.state.adam.step, 0);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let corpus = tiny_corpus();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let metrics = dir.path().join("metrics.csv");
        let out = train(
            &tiny_config(2),
            corpus.training_view(),
            TrainOutputs {
                metrics: Some(&metrics),
                checkpoint: Some(&path),
            },
        )
        .unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes, checkpoint_bytes(&out.state).unwrap());
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
        assert_eq!(back.model.store(), out.state.model.store());
        assert_eq!(back.adam, out.state.adam);
        let log = fs::read_to_string(&metrics).unwrap();
        assert!(log.starts_with(METRICS_HEADER));
        assert_eq!(log.lines().count(), 3);

        for cut in [0, 7, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(checkpoint_from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut other = tiny_config(2);
        other.set("steps", "2").unwrap();
        let err = load_checkpoint_for(&path, &other).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("steps=1") && msg.contains("steps=2"), "{msg}");
    }

    #[test]
    fn scalar_flow_reaches_closed_form() {
        let truth = Gauss1DSolution::new(0.4, 0.04, 0.1, 0.02).unwrap();
        let s = sample_pairs_1d(&truth, 400, 400, 5).unwrap();
        let closed = fit_closed_form(&s).unwrap();
        let best = joint_marginal_nll_1d(&closed, &s).unwrap();
        let fit = fit_scalar_flow(&s, 3000, 0.02, 1).unwrap();
        assert!((fit.nll - best).abs() < 1e-3, "{} vs {}", fit.nll, best);
        let std = to_standard_base(&closed).unwrap();
        assert!((std.joint_nll(&s) - best).abs() < 1e-9);
        assert!((fit.mu_u - std.mu_u).abs() < 0.05, "{} vs {}", fit.mu_u, std.mu_u);
    }
}
