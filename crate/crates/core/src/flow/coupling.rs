use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::flow::{Direction, LayerIO, SCALE_BOUND};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `conv3×3 → tanh → conv3×3`, final layer zero-initialized.
#[derive(Clone, Debug)]
pub struct Subnet {
    c_in: usize,
    c_out: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Subnet {
    pub fn new(store: &mut ParamStore, prefix: &str, c_in: usize, hidden: usize, c_out: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / (9 * c_in.max(1)) as f64).sqrt();
        Self {
            c_in,
            c_out,
            w1: store.add(format!("{prefix}.w1"), Tensor::randn(&[hidden, c_in, 3, 3], std, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            w2: store.add(format!("{prefix}.w2"), Tensor::zeros(&[c_out, hidden, 3, 3])),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    /// Parameter ids in order `w1, b1, w2, b2`.
    pub fn params(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let tape = p.tape();
        let h = tape.conv2d(x, p.var(self.w1), p.var(self.b1))?.tanh();
        tape.conv2d(h, p.var(self.w2), p.var(self.b2))
    }
}

/// Splits subnet output into `(ln s, bias)` with `ln s = α·tanh(raw)`.
fn scale_and_bias<'t>(out: Var<'t>, c: usize) -> Result<(Var<'t>, Var<'t>)> {
    let log_s = out.narrow_channels(0, c)?.tanh().scale(SCALE_BOUND);
    let bias = out.narrow_channels(c, c)?;
    Ok((log_s, bias))
}

/// Applies `a·s + b` (forward) or `(a − b)/s` (reverse) and the matching
/// log-determinant.
fn affine<'t>(a: Var<'t>, log_s: Var<'t>, bias: Var<'t>, dir: Direction) -> Result<(Var<'t>, Var<'t>)> {
    let ld = log_s.sum_per_sample()?;
    match dir {
        Direction::Forward => Ok((a.mul(log_s.exp())?.add(bias)?, ld)),
        Direction::Reverse => Ok((a.sub(bias)?.mul(log_s.neg().exp())?, ld.neg())),
    }
}

/// Transforms the second channel half with scale and bias predicted from
/// the first half and the condition features.
#[derive(Clone, Debug)]
pub struct ConditionalAffineCoupling {
    channels: usize,
    subnet: Subnet,
}

impl ConditionalAffineCoupling {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::invalid(format!("coupling needs even channels, got {channels}")));
        }
        let half = channels / 2;
        Ok(Self {
            channels,
            subnet: Subnet::new(store, &format!("{prefix}.net"), half + cond_channels, hidden, channels, rng),
        })
    }

    pub fn subnet(&self) -> &Subnet {
        &self.subnet
    }

    pub fn apply<'t>(&self, p: &Binding<'t>, io: LayerIO<'t>, dir: Direction) -> Result<LayerIO<'t>> {
        let shape = io.act.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::invalid(format!(
                "coupling over {} channels got activation {shape:?}",
                self.channels
            )));
        }
        let cond = io.condition("coupling")?;
        let half = self.channels / 2;
        let a1 = io.act.narrow_channels(0, half)?;
        let a2 = io.act.narrow_channels(half, half)?;
        let net_in = p.tape().concat(&[a1, cond], 1)?;
        let (log_s, bias) = scale_and_bias(self.subnet.forward(p, net_in)?, half)?;
        let (a2, ld) = affine(a2, log_s, bias, dir)?;
        let out = p.tape().concat(&[a1, a2], 1)?;
        io.with_act(out).add_logdet(ld)
    }
}

/// Per-entry scale and bias predicted from the condition features alone.
#[derive(Clone, Debug)]
pub struct AffineInjector {
    channels: usize,
    subnet: Subnet,
}

impl AffineInjector {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            channels,
            subnet: Subnet::new(store, &format!("{prefix}.net"), cond_channels, hidden, 2 * channels, rng),
        }
    }

    pub fn subnet(&self) -> &Subnet {
        &self.subnet
    }

    pub fn apply<'t>(&self, p: &Binding<'t>, io: LayerIO<'t>, dir: Direction) -> Result<LayerIO<'t>> {
        let shape = io.act.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::invalid(format!(
                "injector over {} channels got activation {shape:?}",
                self.channels
            )));
        }
        let cond = io.condition("injector")?;
        let (log_s, bias) = scale_and_bias(self.subnet.forward(p, cond)?, self.channels)?;
        let (out, ld) = affine(io.act, log_s, bias, dir)?;
        io.with_act(out).add_logdet(ld)
    }
}
