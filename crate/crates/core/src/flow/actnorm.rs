use crate::error::{Error, Result};
use crate::flow::{per_channel, Direction, LayerIO};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Per-channel affine normalization, `out = exp(log_scale)·act + bias`,
/// initialized from the first batch so that its output has zero mean and
/// unit variance per channel.
#[derive(Clone, Debug)]
pub struct Actnorm {
    channels: usize,
    log_scale: ParamId,
    bias: ParamId,
    initialized: bool,
}

impl Actnorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        Self {
            channels,
            log_scale: store.add(format!("{prefix}.log_scale"), Tensor::zeros(&[channels])),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[channels])),
            initialized: false,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    pub fn log_scale(&self) -> ParamId {
        self.log_scale
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// `(log_scale, bias)` that standardize `act` per channel.
    pub fn init_values(act: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, c, h, w) = act.dims4()?;
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut ls = vec![0.0; c];
        let mut b = vec![0.0; c];
        for ch in 0..c {
            let vals = (0..n).flat_map(|s| act.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane].iter());
            let mean = vals.clone().sum::<f64>() / count;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let sd = var.sqrt().max(1e-6);
            ls[ch] = -sd.ln();
            b[ch] = -mean / sd;
        }
        Ok((Tensor::from_vec(ls), Tensor::from_vec(b)))
    }

    /// Data-dependent initialization outside of a forward pass.
    pub fn initialize_from(&mut self, store: &mut ParamStore, act: &Tensor) -> Result<()> {
        let (ls, b) = Self::init_values(act)?;
        store.set(self.log_scale, ls)?;
        store.set(self.bias, b)?;
        self.initialized = true;
        Ok(())
    }

    pub fn apply<'t>(&self, p: &Binding<'t>, io: LayerIO<'t>, dir: Direction) -> Result<LayerIO<'t>> {
        let shape = io.act.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::invalid(format!(
                "actnorm over {} channels got activation {shape:?}",
                self.channels
            )));
        }
        if !self.initialized {
            match (dir, p.is_initializing()) {
                (Direction::Forward, true) => {
                    let (ls, b) = Self::init_values(&io.act.value())?;
                    p.initialize(self.log_scale, ls);
                    p.initialize(self.bias, b);
                }
                (Direction::Reverse, _) => {
                    return Err(Error::Uninitialized("actnorm inverse before data-dependent init".into()))
                }
                (Direction::Forward, false) => {
                    return Err(Error::Uninitialized(
                        "actnorm forward needs an initializing binding on its first batch".into(),
                    ))
                }
            }
        }
        let ls = p.var(self.log_scale);
        let b = per_channel(p.var(self.bias))?;
        let plane = (shape[2] * shape[3]) as f64;
        let dlogdet = ls.sum().scale(plane);
        let ls = per_channel(ls)?;
        match dir {
            Direction::Forward => {
                let out = ls.exp().mul(io.act)?.add(b)?;
                io.with_act(out).add_logdet(dlogdet)
            }
            Direction::Reverse => {
                let out = io.act.sub(b)?.mul(ls.neg().exp())?;
                io.with_act(out).add_logdet(dlogdet.neg())
            }
        }
    }
}
