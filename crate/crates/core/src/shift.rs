//! Gaussian shift between clean and degraded latents, `z_y = z_x + u` with
//! `u ~ N(μ_u, M·Mᵀ)` shared across spatial positions of one latent group.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftMode {
    /// Dense `M`.
    Full,
    /// `M` diagonal, stored as a vector.
    Diagonal,
    /// Shift held at zero during training and estimated afterwards from
    /// latent statistics.
    FrozenZero,
}

impl ShiftMode {
    pub fn name(self) -> &'static str {
        match self {
            ShiftMode::Full => "full",
            ShiftMode::Diagonal => "diagonal",
            ShiftMode::FrozenZero => "frozen-zero",
        }
    }

    pub fn is_trainable(self) -> bool {
        self != ShiftMode::FrozenZero
    }
}

impl fmt::Display for ShiftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShiftMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ShiftMode::Full),
            "diagonal" => Ok(ShiftMode::Diagonal),
            "frozen-zero" => Ok(ShiftMode::FrozenZero),
            other => Err(Error::Config(format!(
                "unknown shift mode '{other}' (expected full, diagonal or frozen-zero)"
            ))),
        }
    }
}

/// Shift parameters of one latent group. `M` is `[C,C]` except in
/// diagonal mode, where it is `[C]`. Frozen-zero mode keeps a dense `M` so
/// that a post-hoc estimate can carry cross-channel covariance.
#[derive(Clone, Debug)]
pub struct LatentShift {
    channels: usize,
    mode: ShiftMode,
    mu: ParamId,
    m: ParamId,
}

fn ln_2pi() -> f64 {
    (2.0 * PI).ln()
}

impl LatentShift {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, mode: ShiftMode) -> Self {
        let m_shape: &[usize] = match mode {
            ShiftMode::Diagonal => &[channels],
            _ => &[channels, channels],
        };
        Self {
            channels,
            mode,
            mu: store.add(format!("{prefix}.mu"), Tensor::zeros(&[channels])),
            m: store.add(format!("{prefix}.m"), Tensor::zeros(m_shape)),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn mode(&self) -> ShiftMode {
        self.mode
    }

    pub fn mu(&self) -> ParamId {
        self.mu
    }

    pub fn m(&self) -> ParamId {
        self.m
    }

    /// `M` as a dense `[C,C]` matrix.
    pub fn dense_m(&self, store: &ParamStore) -> Tensor {
        let m = store.get(self.m);
        match self.mode {
            ShiftMode::Diagonal => {
                let c = self.channels;
                let mut out = Tensor::zeros(&[c, c]);
                for i in 0..c {
                    out.data_mut()[i * c + i] = m.data()[i];
                }
                out
            }
            _ => m.clone(),
        }
    }

    /// `Σ_u = M·Mᵀ`.
    pub fn covariance(&self, store: &ParamStore) -> Tensor {
        let c = self.channels;
        let m = self.dense_m(store);
        let mt = crate::kernels::transpose(m.data(), c, c);
        Tensor::new(&[c, c], crate::kernels::matmul(m.data(), &mt, c, c, c)).expect("shape")
    }

    /// `Σ_u` as a tape value.
    pub fn covariance_var<'t>(&self, p: &Binding<'t>) -> Result<Var<'t>> {
        let m = p.var(self.m);
        match self.mode {
            ShiftMode::Diagonal => {
                let sq = m.square()?.reshape(&[1, self.channels])?;
                p.tape().constant(Tensor::eye(self.channels)).mul(sq)
            }
            _ => m.matmul(m.t()?),
        }
    }

    /// `ln N(z; μ_u, I + Σ_u)` summed over positions, per sample.
    pub fn logp_zy<'t>(&self, p: &Binding<'t>, z: Var<'t>) -> Result<Var<'t>> {
        self.check(&z)?;
        let tape = p.tape();
        let cov = tape
            .constant(Tensor::eye(self.channels))
            .add(self.covariance_var(p)?)?;
        tape.mvn_log_pdf(z, p.var(self.mu), cov)
    }

    /// `ln N(z_y; z_x + μ_u, Σ_u)` summed over positions, per sample.
    /// Rejected when `Σ_u` is singular.
    pub fn logp_cond<'t>(&self, p: &Binding<'t>, z_y: Var<'t>, z_x: Var<'t>) -> Result<Var<'t>> {
        self.check(&z_y)?;
        let tape = p.tape();
        let diff = z_y.sub(z_x)?;
        tape.mvn_log_pdf(diff, p.var(self.mu), self.covariance_var(p)?)
            .map_err(|e| match e {
                Error::Degenerate(msg) => {
                    Error::Degenerate(format!("conditional density needs a nonsingular shift covariance: {msg}"))
                }
                other => other,
            })
    }

    fn check(&self, z: &Var<'_>) -> Result<()> {
        let shape = z.shape();
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(Error::invalid(format!(
                "shift over {} channels got latent {shape:?}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Draws `τ·u` for every position of a latent of `shape`.
    pub fn sample(&self, store: &ParamStore, shape: &[usize], tau: f64, rng: &mut Rng) -> Result<Tensor> {
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(Error::invalid(format!(
                "shift over {} channels cannot fill latent {shape:?}",
                self.channels
            )));
        }
        if !(tau >= 0.0) {
            return Err(Error::invalid(format!("temperature must be nonnegative, got {tau}")));
        }
        let c = self.channels;
        let (n, plane) = (shape[0], shape[2..].iter().product::<usize>());
        let m = self.dense_m(store);
        let mu = store.get(self.mu).data();
        let mut out = Tensor::zeros(shape);
        let mut eps = vec![0.0; c];
        for s in 0..n {
            for pos in 0..plane {
                eps.iter_mut().for_each(|e| *e = rng.normal());
                for i in 0..c {
                    let mut v = mu[i];
                    for (j, e) in eps.iter().enumerate() {
                        v += m.data()[i * c + j] * e;
                    }
                    out.data_mut()[(s * c + i) * plane + pos] = tau * v;
                }
            }
        }
        Ok(out)
    }

    /// Sets `μ_u` and `M` from latent samples of both domains: the mean
    /// difference and the PSD part of the covariance difference.
    pub fn estimate_from_latents(&self, store: &mut ParamStore, z_x: &Tensor, z_y: &Tensor) -> Result<()> {
        let (mx, cx) = channel_moments(z_x, self.channels)?;
        let (my, cy) = channel_moments(z_y, self.channels)?;
        let c = self.channels;
        let mu: Vec<f64> = my.iter().zip(&mx).map(|(a, b)| a - b).collect();
        let diff: Vec<f64> = cy.iter().zip(&cx).map(|(a, b)| a - b).collect();
        let m = match self.mode {
            ShiftMode::Diagonal => Tensor::from_vec((0..c).map(|i| diff[i * c + i].max(0.0).sqrt()).collect()),
            _ => Tensor::new(&[c, c], linalg::psd_sqrt(&diff, c))?,
        };
        store.set(self.mu, Tensor::from_vec(mu))?;
        store.set(self.m, m)
    }
}

/// Per-channel mean and `1/N` covariance over all samples and positions.
pub fn channel_moments(z: &Tensor, channels: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let shape = z.shape();
    if shape.len() < 2 || shape[1] != channels || z.is_empty() {
        return Err(Error::invalid(format!("moments over {channels} channels of {shape:?}")));
    }
    let c = channels;
    let (n, plane) = (shape[0], shape[2..].iter().product::<usize>());
    let count = (n * plane) as f64;
    let at = |s: usize, ch: usize, p: usize| z.data()[(s * c + ch) * plane + p];
    let mut mean = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            for p in 0..plane {
                mean[ch] += at(s, ch, p);
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut cov = vec![0.0; c * c];
    for s in 0..n {
        for p in 0..plane {
            for i in 0..c {
                let di = at(s, i, p) - mean[i];
                for j in 0..c {
                    cov[i * c + j] += di * (at(s, j, p) - mean[j]);
                }
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= count);
    Ok((mean, cov))
}

/// `Σ ln N(z; 0, I)` per sample.
pub fn logp_standard<'t>(z: Var<'t>) -> Result<Var<'t>> {
    let shape = z.shape();
    let per: usize = shape[1..].iter().product();
    Ok(z.square()?
        .sum_per_sample()?
        .scale(-0.5)
        .add_const(-0.5 * per as f64 * ln_2pi()))
}

/// Sum of [`logp_standard`] over latent groups.
pub fn logp_zx<'t>(tape: &'t Tape, groups: &[Var<'t>]) -> Result<Var<'t>> {
    let n = groups.first().map(|g| g.shape()[0]).unwrap_or(0);
    let mut total = tape.constant(Tensor::zeros(&[n]));
    for &g in groups {
        total = total.add(logp_standard(g)?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn single(mode: ShiftMode, c: usize) -> (ParamStore, LatentShift) {
        let mut store = ParamStore::new();
        let s = LatentShift::new(&mut store, "g", c, mode);
        (store, s)
    }

    #[test]
    fn standard_logp_values() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let v = logp_standard(z).unwrap().value().item();
        assert!((v + 6.0 * ln_2pi()).abs() < 1e-12);
        let one = tape.constant(Tensor::full(&[1, 1], 1.0));
        assert!((logp_standard(one).unwrap().value().item() + 1.41894).abs() < 1e-5);
    }

    #[test]
    fn standard_logp_matches_scalar_densities() {
        let tape = Tape::new();
        let t = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut Rng::new(3));
        let groups = [tape.constant(t.narrow_batch(0, 2).unwrap())];
        let got = logp_zx(&tape, &groups).unwrap().value();
        for s in 0..2 {
            let want: f64 = t.data()[s * 12..(s + 1) * 12]
                .iter()
                .map(|z| ((-0.5 * z * z).exp() / (2.0 * PI).sqrt()).ln())
                .sum();
            assert!((got.data()[s] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_shift_matches_standard() {
        let (store, s) = single(ShiftMode::Full, 3);
        let tape = Tape::new();
        let p = Binding::frozen(&store, &tape);
        let z = tape.constant(Tensor::randn(&[2, 3, 2, 2], 1.0, &mut Rng::new(1)));
        let a = s.logp_zy(&p, z).unwrap().value();
        let b = logp_standard(z).unwrap().value();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn unit_shift_variance_two() {
        let (mut store, s) = single(ShiftMode::Full, 1);
        store.set(s.m(), Tensor::new(&[1, 1], vec![1.0]).unwrap()).unwrap();
        let tape = Tape::new();
        let p = Binding::frozen(&store, &tape);
        let z = tape.constant(Tensor::zeros(&[1, 1]));
        let v = s.logp_zy(&p, z).unwrap().value().item();
        assert!((v + 0.5 * (4.0 * PI).ln()).abs() < 1e-12);
        assert!((v + 1.26551).abs() < 1e-5);
        let c = s.logp_cond(&p, z, z).unwrap().value().item();
        assert!((c + 0.91894).abs() < 1e-5);
    }

    #[test]
    fn logp_zy_matches_dense_inverse() {
        let (mut store, s) = single(ShiftMode::Full, 3);
        let mut rng = Rng::new(5);
        store.set(s.m(), Tensor::randn(&[3, 3], 0.7, &mut rng)).unwrap();
        store.set(s.mu(), Tensor::randn(&[3], 1.0, &mut rng)).unwrap();
        let cov = s.covariance(&store).zip_map(&Tensor::eye(3), |a, b| a + b).unwrap();
        let covm = nalgebra::DMatrix::from_row_slice(3, 3, cov.data());
        let inv = covm.clone().try_inverse().unwrap();
        let ld = covm.determinant().ln();
        let z = Tensor::randn(&[1, 3, 2, 1], 1.0, &mut rng);
        let mu = store.get(s.mu()).data().to_vec();
        let mut want = 0.0;
        for pos in 0..2 {
            let d = nalgebra::DVector::from_iterator(3, (0..3).map(|c| z.data()[c * 2 + pos] - mu[c]));
            want += -0.5 * (d.transpose() * &inv * &d)[(0, 0)] - 0.5 * ld - 1.5 * ln_2pi();
        }
        let tape = Tape::new();
        let p = Binding::frozen(&store, &tape);
        let got = s.logp_zy(&p, tape.constant(z)).unwrap().value().item();
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn diagonal_equals_full_without_off_diagonals() {
        let (mut sf, full) = single(ShiftMode::Full, 3);
        let (mut sd, diag) = single(ShiftMode::Diagonal, 3);
        let d = [0.3, 1.2, 0.7];
        let mut m = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            m.data_mut()[i * 4] = d[i];
        }
        sf.set(full.m(), m).unwrap();
        sd.set(diag.m(), Tensor::from_vec(d.to_vec())).unwrap();
        let mu = Tensor::from_vec(vec![0.1, -0.2, 0.3]);
        sf.set(full.mu(), mu.clone()).unwrap();
        sd.set(diag.mu(), mu).unwrap();
        let z = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut Rng::new(8));
        let tape = Tape::new();
        let (pf, pd) = (Binding::frozen(&sf, &tape), Binding::frozen(&sd, &tape));
        let zv = tape.constant(z);
        let a = full.logp_zy(&pf, zv).unwrap().value();
        let b = diag.logp_zy(&pd, zv).unwrap().value();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn singular_conditional_rejected() {
        let (store, s) = single(ShiftMode::Full, 2);
        let tape = Tape::new();
        let p = Binding::frozen(&store, &tape);
        let z = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
        assert!(matches!(s.logp_cond(&p, z, z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn sampling_zero_and_covariance() {
        let (mut store, s) = single(ShiftMode::Full, 2);
        let mut rng = Rng::new(1);
        let zero = s.sample(&store, &[2, 2, 3, 3], 1.0, &mut rng).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        store
            .set(s.m(), Tensor::new(&[2, 2], vec![1.0, 0.0, 0.5, 1.0]).unwrap())
            .unwrap();
        assert_eq!(s.sample(&store, &[1, 2, 2, 2], 0.0, &mut rng).unwrap().max_abs(), 0.0);
        let u = s.sample(&store, &[100_000, 2], 1.0, &mut rng).unwrap();
        let (mean, cov) = channel_moments(&u, 2).unwrap();
        assert!(mean.iter().all(|m| m.abs() < 0.02));
        let want = [1.0, 0.5, 0.5, 1.25];
        for (g, w) in cov.iter().zip(want) {
            assert!((g - w).abs() <= 0.03 * w, "{cov:?}");
        }
    }

    #[test]
    fn estimate_recovers_known_shift() {
        let mut rng = Rng::new(4);
        let (mut store, s) = single(ShiftMode::FrozenZero, 2);
        let mut truth = store.clone();
        truth
            .set(s.m(), Tensor::new(&[2, 2], vec![0.6, 0.0, 0.3, 0.4]).unwrap())
            .unwrap();
        truth.set(s.mu(), Tensor::from_vec(vec![0.5, -0.25])).unwrap();
        let zx = Tensor::randn(&[50_000, 2], 1.0, &mut rng);
        let fresh = Tensor::randn(&[50_000, 2], 1.0, &mut rng);
        let u = s.sample(&truth, &[50_000, 2], 1.0, &mut rng).unwrap();
        let zy = fresh.zip_map(&u, |a, b| a + b).unwrap();
        s.estimate_from_latents(&mut store, &zx, &zy).unwrap();
        let (want, got) = (s.covariance(&truth), s.covariance(&store));
        assert!(got.max_abs_diff(&want) < 0.05, "{got:?}");
        assert!(store.get(s.mu()).max_abs_diff(truth.get(s.mu())) < 0.03);
    }
}
