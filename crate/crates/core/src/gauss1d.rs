//! The one-dimensional Gaussian version of the unpaired problem.
//!
//! Clean samples `x ~ N(μ_x, σ_x²)`, degraded samples `y = x + u` with an
//! independent `u ~ N(μ_u, σ_u²)`, observed only as two unrelated sets. The
//! joint marginal NLL has a closed-form minimizer with two KKT branches: when
//! the degraded set is at least as spread out as the clean one, the extra
//! variance is attributed to `u`; otherwise `u` collapses to a constant and
//! both sets share a pooled variance.
//!
//! All empirical variances use the 1/N (maximum-likelihood) convention.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftCase {
    /// `σ̂_y² ≥ σ̂_x²`: `σ_u² = σ̂_y² − σ̂_x²`.
    NoisierTarget,
    /// `σ̂_y² < σ̂_x²`: `u` is a constant offset.
    ConstantShift,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gauss1DSolution {
    pub mu_x: f64,
    pub var_x: f64,
    pub mu_u: f64,
    pub var_u: f64,
    pub case: ShiftCase,
}

impl Gauss1DSolution {
    /// Builds a parameter set, classifying the case from `var_u`.
    pub fn new(mu_x: f64, var_x: f64, mu_u: f64, var_u: f64) -> Result<Self> {
        if !(var_x >= 0.0) || !(var_u >= 0.0) {
            return Err(Error::invalid(format!(
                "variances must be nonnegative, got var_x={var_x}, var_u={var_u}"
            )));
        }
        let case = if var_u > 0.0 {
            ShiftCase::NoisierTarget
        } else {
            ShiftCase::ConstantShift
        };
        Ok(Self {
            mu_x,
            var_x,
            mu_u,
            var_u,
            case,
        })
    }

    pub fn mu_y(&self) -> f64 {
        self.mu_x + self.mu_u
    }

    pub fn var_y(&self) -> f64 {
        self.var_x + self.var_u
    }
}

/// Two unrelated sample sets with cached moments.
#[derive(Clone, Debug)]
pub struct SampleSets1D {
    xs: Vec<f64>,
    ys: Vec<f64>,
    mean_x: f64,
    mean_y: f64,
    var_x: f64,
    var_y: f64,
}

fn moments(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

impl SampleSets1D {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        let (mean_x, var_x) = moments(&xs);
        let (mean_y, var_y) = moments(&ys);
        Self {
            xs,
            ys,
            mean_x,
            mean_y,
            var_x,
            var_y,
        }
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }
    pub fn ys(&self) -> &[f64] {
        &self.ys
    }
    pub fn mean_x(&self) -> f64 {
        self.mean_x
    }
    pub fn mean_y(&self) -> f64 {
        self.mean_y
    }
    pub fn var_x(&self) -> f64 {
        self.var_x
    }
    pub fn var_y(&self) -> f64 {
        self.var_y
    }
}

/// Closed-form minimizer of the joint marginal NLL.
pub fn fit_closed_form(s: &SampleSets1D) -> Result<Gauss1DSolution> {
    if s.xs.len() < 2 || s.ys.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 samples per set, got n={}, m={}",
            s.xs.len(),
            s.ys.len()
        )));
    }
    if s.var_x == 0.0 && s.var_y == 0.0 {
        return Err(Error::Degenerate(
            "both sample sets have zero variance".into(),
        ));
    }
    let mu_x = s.mean_x;
    let mu_u = s.mean_y - s.mean_x;
    let sol = if s.var_y >= s.var_x {
        Gauss1DSolution {
            mu_x,
            var_x: s.var_x,
            mu_u,
            var_u: s.var_y - s.var_x,
            case: ShiftCase::NoisierTarget,
        }
    } else {
        Gauss1DSolution {
            mu_x,
            var_x: 0.5 * (s.var_x + s.var_y),
            mu_u,
            var_u: 0.0,
            case: ShiftCase::ConstantShift,
        }
    };
    Ok(sol)
}

fn gaussian_nll(v: &[f64], mean: f64, var: f64) -> f64 {
    let n = v.len() as f64;
    let sq: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
    0.5 * (2.0 * PI * var).ln() + 0.5 * sq / (n * var)
}

/// `−mean ln p_x(x_i) − mean ln p_y(y_j)` with `p_x = N(μ_x, σ_x²)` and
/// `p_y = N(μ_x + μ_u, σ_x² + σ_u²)`. An empty set contributes nothing.
pub fn joint_marginal_nll_1d(params: &Gauss1DSolution, s: &SampleSets1D) -> Result<f64> {
    let mut total = 0.0;
    if !s.xs.is_empty() {
        if !(params.var_x > 0.0) {
            return Err(Error::invalid(format!("var_x = {} must be positive", params.var_x)));
        }
        total += gaussian_nll(&s.xs, params.mu_x, params.var_x);
    }
    if !s.ys.is_empty() {
        let var_y = params.var_y();
        if !(var_y > 0.0) {
            return Err(Error::invalid(format!("var_x + var_u = {var_y} must be positive")));
        }
        total += gaussian_nll(&s.ys, params.mu_y(), var_y);
    }
    Ok(total)
}

/// The same solution expressed with a standard-normal clean base: a single
/// affine flow `z = scale·t + offset` plus a rescaled latent shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StandardBase {
    pub scale: f64,
    pub offset: f64,
    pub mu_u: f64,
    pub var_u: f64,
}

pub fn to_standard_base(sol: &Gauss1DSolution) -> Result<StandardBase> {
    if !(sol.var_x > 0.0) {
        return Err(Error::Degenerate(format!(
            "var_x = {} leaves the affine map without an invertible scale",
            sol.var_x
        )));
    }
    let sd = sol.var_x.sqrt();
    Ok(StandardBase {
        scale: 1.0 / sd,
        offset: -sol.mu_x / sd,
        mu_u: sol.mu_u / sd,
        var_u: sol.var_u / sol.var_x,
    })
}

impl StandardBase {
    /// Joint NLL in data space under the affine flow: latent densities
    /// `N(0,1)` and `N(μ̃_u, 1+σ̃_u²)` minus `ln|scale|` per sample.
    pub fn joint_nll(&self, s: &SampleSets1D) -> f64 {
        let mut total = 0.0;
        let logdet = self.scale.abs().ln();
        if !s.xs.is_empty() {
            let z: Vec<f64> = s.xs.iter().map(|x| self.scale * x + self.offset).collect();
            total += gaussian_nll(&z, 0.0, 1.0) - logdet;
        }
        if !s.ys.is_empty() {
            let z: Vec<f64> = s.ys.iter().map(|y| self.scale * y + self.offset).collect();
            total += gaussian_nll(&z, self.mu_u, 1.0 + self.var_u) - logdet;
        }
        total
    }
}

/// Draws `n` clean samples and `m` degraded samples `x' + u` (fresh `x'`).
pub fn sample_pairs_1d(truth: &Gauss1DSolution, n: usize, m: usize, seed: u64) -> Result<SampleSets1D> {
    if n == 0 || m == 0 {
        return Err(Error::invalid(format!("sample counts must be positive, got n={n}, m={m}")));
    }
    let sx = truth.var_x.sqrt();
    let su = truth.var_u.sqrt();
    let mut rx = Rng::stream(seed, 0);
    let mut ry = Rng::stream(seed, 1);
    let xs = (0..n).map(|_| truth.mu_x + sx * rx.normal()).collect();
    let ys = (0..m)
        .map(|_| {
            let x = truth.mu_x + sx * ry.normal();
            x + truth.mu_u + su * ry.normal()
        })
        .collect();
    Ok(SampleSets1D::new(xs, ys))
}
