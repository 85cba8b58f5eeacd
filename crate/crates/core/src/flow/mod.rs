//! Invertible layers. Each maps an activation in either direction and adds
//! its per-sample `ln|det J|` to the running log-determinant.

pub mod actnorm;
pub mod coupling;
pub mod invconv;
pub mod reshape;
pub mod step;

pub use actnorm::Actnorm;
pub use coupling::{AffineInjector, ConditionalAffineCoupling, Subnet};
pub use invconv::InvConv1x1;
pub use reshape::{split, squeeze, unsplit, unsqueeze};
pub use step::FlowStep;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bound on the log-scale of coupling and injector layers:
/// `s = exp(SCALE_BOUND · tanh(raw))`.
pub const SCALE_BOUND: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Data towards latent.
    Forward,
    /// Latent towards data.
    Reverse,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        }
    }
}

/// Activation travelling through the flow with its accumulated `ln|det|`
/// (shape `[N]`) and optional conditioning features.
#[derive(Clone, Copy, Debug)]
pub struct LayerIO<'t> {
    pub act: Var<'t>,
    pub logdet: Var<'t>,
    pub cond: Option<Var<'t>>,
}

impl<'t> LayerIO<'t> {
    /// Starts with zero log-determinant.
    pub fn new(act: Var<'t>, cond: Option<Var<'t>>) -> Self {
        let n = act.shape()[0];
        let logdet = act.tape().constant(Tensor::zeros(&[n]));
        Self { act, logdet, cond }
    }

    pub fn tape(&self) -> &'t Tape {
        self.act.tape()
    }

    pub(crate) fn with_act(self, act: Var<'t>) -> Self {
        Self { act, ..self }
    }

    /// Adds `delta` (scalar or `[N]`) to the log-determinant.
    pub(crate) fn add_logdet(self, delta: Var<'t>) -> Result<Self> {
        Ok(Self {
            logdet: self.logdet.add(delta)?,
            ..self
        })
    }

    pub(crate) fn condition(&self, layer: &str) -> Result<Var<'t>> {
        let cond = self
            .cond
            .ok_or_else(|| Error::invalid(format!("{layer} requires condition features")))?;
        let (a, c) = (self.act.shape(), cond.shape());
        if a.len() != 4 || c.len() != 4 || a[0] != c[0] || a[2..] != c[2..] {
            return Err(Error::ShapeMismatch {
                op: "condition alignment",
                lhs: a,
                rhs: c,
            });
        }
        Ok(cond)
    }
}

/// Broadcast view `[1, C, 1, 1]` of a per-channel `[C]` vector.
pub(crate) fn per_channel<'t>(v: Var<'t>) -> Result<Var<'t>> {
    let c = v.shape()[0];
    v.reshape(&[1, c, 1, 1])
}
