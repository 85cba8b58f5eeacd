use crate::error::{Error, Result};
use crate::flow::{Direction, LayerIO};
use crate::kernels;
use crate::linalg;
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Invertible 1×1 convolution with LU-parametrized weight
/// `W = P · L · (U + diag(sign · exp(log_diag)))`.
///
/// `P` and `sign` are fixed at construction; `L` is unit lower triangular
/// and `U` strictly upper triangular, built from the free entries of the
/// `lower`/`upper` parameters by masking. `ln|det W| = Σ log_diag`.
#[derive(Clone, Debug)]
pub struct InvConv1x1 {
    channels: usize,
    perm: Vec<usize>,
    sign: Vec<f64>,
    lower: ParamId,
    upper: ParamId,
    log_diag: ParamId,
}

impl InvConv1x1 {
    /// Initialized from the LU factorization of a random rotation.
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut Rng) -> Self {
        let c = channels;
        let q = linalg::random_orthogonal(c, rng);
        let (row_perm, l, u) = linalg::lu_decompose(&q, c).expect("orthogonal matrix is nonsingular");
        // row i of L·U is row row_perm[i] of Q, so Q = P·L·U with P[j][inv[j]] = 1
        let mut perm = vec![0; c];
        for (i, &r) in row_perm.iter().enumerate() {
            perm[r] = i;
        }
        let diag: Vec<f64> = (0..c).map(|i| u[i * c + i]).collect();
        let mut upper = u;
        for i in 0..c {
            upper[i * c + i] = 0.0;
        }
        let mut lower = l;
        for i in 0..c {
            lower[i * c + i] = 0.0;
        }
        Self {
            channels: c,
            perm,
            sign: diag.iter().map(|d| d.signum()).collect(),
            lower: store.add(format!("{prefix}.lower"), Tensor::new(&[c, c], lower).expect("shape")),
            upper: store.add(format!("{prefix}.upper"), Tensor::new(&[c, c], upper).expect("shape")),
            log_diag: store.add(
                format!("{prefix}.log_diag"),
                Tensor::from_vec(diag.iter().map(|d| d.abs().ln()).collect()),
            ),
        }
    }

    /// `W = I`: identity permutation, zero free entries, unit diagonal.
    pub fn identity(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        let c = channels;
        Self {
            channels: c,
            perm: (0..c).collect(),
            sign: vec![1.0; c],
            lower: store.add(format!("{prefix}.lower"), Tensor::zeros(&[c, c])),
            upper: store.add(format!("{prefix}.upper"), Tensor::zeros(&[c, c])),
            log_diag: store.add(format!("{prefix}.log_diag"), Tensor::zeros(&[c])),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn log_diag(&self) -> ParamId {
        self.log_diag
    }

    pub fn lower(&self) -> ParamId {
        self.lower
    }

    pub fn upper(&self) -> ParamId {
        self.upper
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    fn masks(&self) -> (Tensor, Tensor, Tensor) {
        let c = self.channels;
        let mut lo = Tensor::zeros(&[c, c]);
        let mut up = Tensor::zeros(&[c, c]);
        let mut p = Tensor::zeros(&[c, c]);
        for i in 0..c {
            for j in 0..c {
                if j < i {
                    lo.data_mut()[i * c + j] = 1.0;
                } else if j > i {
                    up.data_mut()[i * c + j] = 1.0;
                }
            }
            p.data_mut()[i * c + self.perm[i]] = 1.0;
        }
        (lo, up, p)
    }

    /// Materialized `W` from plain parameter values.
    pub fn weight(&self, store: &ParamStore) -> Tensor {
        let (l, u) = self.factors(store);
        let c = self.channels;
        let lu = kernels::matmul(&l, &u, c, c, c);
        let mut w = vec![0.0; c * c];
        for i in 0..c {
            w[i * c..(i + 1) * c].copy_from_slice(&lu[self.perm[i] * c..(self.perm[i] + 1) * c]);
        }
        Tensor::new(&[c, c], w).expect("shape")
    }

    fn factors(&self, store: &ParamStore) -> (Vec<f64>, Vec<f64>) {
        self.factors_from(store.get(self.lower), store.get(self.upper), store.get(self.log_diag))
    }

    /// `(L, U')` with unit diagonal on `L` and the signed exponential
    /// diagonal on `U'`.
    fn factors_from(&self, lower: &Tensor, upper: &Tensor, log_diag: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels;
        let mut l = vec![0.0; c * c];
        let mut u = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                if j < i {
                    l[i * c + j] = lower.data()[i * c + j];
                } else if j > i {
                    u[i * c + j] = upper.data()[i * c + j];
                }
            }
            l[i * c + i] = 1.0;
            u[i * c + i] = self.sign[i] * log_diag.data()[i].exp();
        }
        (l, u)
    }

    /// `W⁻¹ = U'⁻¹ · L⁻¹ · Pᵀ` by triangular solves against unit vectors.
    fn inverse_weight(&self, lower: &Tensor, upper: &Tensor, log_diag: &Tensor) -> Tensor {
        let c = self.channels;
        let (l, u) = self.factors_from(lower, upper, log_diag);
        let mut inv = vec![0.0; c * c];
        let mut e = vec![0.0; c];
        for j in 0..c {
            // L·U'·x = Pᵀ e_j
            e.iter_mut().for_each(|v| *v = 0.0);
            e[self.perm[j]] = 1.0;
            let x = linalg::solve_upper(&u, &linalg::solve_lower(&l, &e, c), c);
            for i in 0..c {
                inv[i * c + j] = x[i];
            }
        }
        Tensor::new(&[c, c], inv).expect("shape")
    }

    pub fn apply<'t>(&self, p: &Binding<'t>, io: LayerIO<'t>, dir: Direction) -> Result<LayerIO<'t>> {
        let shape = io.act.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::invalid(format!(
                "1x1 conv over {} channels got activation {shape:?}",
                self.channels
            )));
        }
        let tape = p.tape();
        let plane = (shape[2] * shape[3]) as f64;
        let log_diag = p.var(self.log_diag);
        let dlogdet = log_diag.sum().scale(plane);
        match dir {
            Direction::Forward => {
                let (lo_mask, up_mask, perm) = self.masks();
                let c = self.channels;
                let lower = p
                    .var(self.lower)
                    .mul(tape.constant(lo_mask))?
                    .add(tape.constant(Tensor::eye(c)))?;
                let sign = tape.constant(Tensor::new(&[1, c], self.sign.clone())?);
                let diag = tape
                    .constant(Tensor::eye(c))
                    .mul(log_diag.exp().reshape(&[1, c])?.mul(sign)?)?;
                let upper = p.var(self.upper).mul(tape.constant(up_mask))?.add(diag)?;
                let w = tape.constant(perm).matmul(lower.matmul(upper)?)?;
                let out = tape.channel_mix(io.act, w)?;
                io.with_act(out).add_logdet(dlogdet)
            }
            Direction::Reverse => {
                let inv = self.inverse_weight(
                    &p.var(self.lower).value(),
                    &p.var(self.upper).value(),
                    &log_diag.value(),
                );
                let out = tape.channel_mix(io.act, tape.constant(inv))?;
                io.with_act(out).add_logdet(dlogdet.neg())
            }
        }
    }
}
