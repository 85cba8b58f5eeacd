//! Residual statistics of sampled degradations, held-out likelihoods and
//! the CSV reports built from them.

use std::fs;
use std::path::Path;

use crate::data::{dequantize_5bit, Corpus, DegradationOracle, EvalCapability};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::TrainState;

/// Moments of `degrade(x) − x` pooled over images and positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Row-major `[C,C]`.
    pub cov: Vec<f64>,
    /// Horizontal lag-1 autocorrelation, averaged over channels.
    pub lag1: f64,
    /// Residual values per channel.
    pub count: usize,
}

impl ResidualStats {
    /// Statistics of `[C,H,W]` or `[N,C,H,W]` residual fields.
    pub fn of(residuals: &[Tensor]) -> Result<Self> {
        let first = residuals
            .first()
            .ok_or_else(|| Error::invalid("residual statistics of an empty set"))?;
        let c = match first.rank() {
            3 => first.shape()[0],
            4 => first.shape()[1],
            _ => return Err(Error::invalid(format!("residual of shape {:?}", first.shape()))),
        };
        let planes = |t: &Tensor| -> Result<(usize, usize, usize)> {
            let s = t.shape();
            match *s {
                [cc, h, w] if cc == c => Ok((1, h, w)),
                [n, cc, h, w] if cc == c => Ok((n, h, w)),
                _ => Err(Error::invalid(format!("residual of shape {s:?} among {c}-channel residuals"))),
            }
        };
        let mut sum = vec![0.0; c];
        let mut count = 0;
        for r in residuals {
            let (n, h, w) = planes(r)?;
            let plane = h * w;
            for b in 0..n {
                for (ch, s) in sum.iter_mut().enumerate() {
                    let off = (b * c + ch) * plane;
                    *s += r.data()[off..off + plane].iter().sum::<f64>();
                }
            }
            count += n * plane;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut cov = vec![0.0; c * c];
        let mut lag = vec![0.0; c];
        let mut lag_pairs = 0usize;
        for r in residuals {
            let (n, h, w) = planes(r)?;
            let plane = h * w;
            let d = r.data();
            for b in 0..n {
                for pos in 0..plane {
                    for i in 0..c {
                        let di = d[(b * c + i) * plane + pos] - mean[i];
                        for j in i..c {
                            cov[i * c + j] += di * (d[(b * c + j) * plane + pos] - mean[j]);
                        }
                    }
                }
                for (ch, l) in lag.iter_mut().enumerate() {
                    let off = (b * c + ch) * plane;
                    for y in 0..h {
                        for x in 0..w.saturating_sub(1) {
                            let a = d[off + y * w + x] - mean[ch];
                            let bb = d[off + y * w + x + 1] - mean[ch];
                            *l += a * bb;
                        }
                    }
                }
                lag_pairs += h * w.saturating_sub(1);
            }
        }
        for i in 0..c {
            for j in i..c {
                cov[i * c + j] /= count as f64;
                cov[j * c + i] = cov[i * c + j];
            }
        }
        let var: Vec<f64> = (0..c).map(|i| cov[i * c + i]).collect();
        let lag1 = if lag_pairs == 0 {
            0.0
        } else {
            lag.iter()
                .zip(&var)
                .map(|(l, v)| if *v > 0.0 { l / lag_pairs as f64 / v } else { 0.0 })
                .sum::<f64>()
                / c as f64
        };
        Ok(Self {
            mean,
            var,
            cov,
            lag1,
            count,
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }
}

/// Known residual moments of an oracle corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualTruth {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    pub lag1: f64,
}

impl ResidualTruth {
    pub fn from_oracle(oracle: &DegradationOracle, channels: usize) -> Self {
        Self {
            mean: oracle.mean(channels),
            cov: oracle.covariance(channels),
            lag1: oracle.lag1_autocorrelation(),
        }
    }

    pub fn std(&self) -> Vec<f64> {
        let c = self.mean.len();
        (0..c).map(|i| self.cov[i * c + i].sqrt()).collect()
    }
}

/// `|est − truth| / |truth|`; `None` when the truth is zero.
pub fn relative_error(est: f64, truth: f64) -> Option<f64> {
    (truth != 0.0).then(|| (est - truth).abs() / truth.abs())
}

/// `‖A − B‖_F / ‖B‖_F`.
pub fn relative_frobenius(est: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = est.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = truth.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

fn batch_of(img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    match *s {
        [c, h, w] => img.reshape(&[1, c, h, w]),
        [_, _, _, _] => Ok(img.clone()),
        _ => Err(Error::invalid(format!("expected an image, got shape {s:?}"))),
    }
}

/// Seed of draw `k` of image `i`.
fn draw_seed(seed: u64, i: usize, k: usize, n_samples: usize) -> u64 {
    Rng::stream(seed, (i * n_samples + k) as u64).next_u64()
}

/// Residual statistics of `n_samples` degradations of every clean image.
pub fn residual_stats(state: &TrainState, clean: &[Tensor], tau: f64, n_samples: usize, seed: u64) -> Result<ResidualStats> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be positive"));
    }
    let mut residuals = Vec::with_capacity(clean.len() * n_samples);
    for (i, img) in clean.iter().enumerate() {
        let x = batch_of(img)?;
        for k in 0..n_samples {
            let y = state.degrade(&x, tau, draw_seed(seed, i, k, n_samples))?;
            residuals.push(y.zip_map(&x, |a, b| a - b)?);
        }
    }
    ResidualStats::of(&residuals)
}

/// Pooled residual values of one degradation per image.
pub fn residual_values(state: &TrainState, clean: &[Tensor], tau: f64, seed: u64) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, img) in clean.iter().enumerate() {
        let x = batch_of(img)?;
        let y = state.degrade(&x, tau, draw_seed(seed, i, 0, 1))?;
        out.extend(y.zip_map(&x, |a, b| a - b)?.into_data());
    }
    Ok(out)
}

/// Model input for one image of a domain: dequantized and normalized as
/// during training, plus the data-space log-density correction per
/// dimension.
fn preprocess(state: &TrainState, img: &Tensor, degraded: bool, rng: &mut Rng) -> Result<(Tensor, f64)> {
    let mut x = batch_of(img)?;
    if state.config.dequantize {
        x = dequantize_5bit(&x, rng);
    }
    Ok(match &state.norm {
        Some(n) => {
            let s = if degraded { &n.degraded } else { &n.clean };
            let corr = s.std.iter().map(|v| v.ln()).sum::<f64>() / s.std.len() as f64;
            (s.normalize(&x), corr)
        }
        None => (x, 0.0),
    })
}

fn domain_nll(state: &TrainState, images: &[Tensor], degraded: bool, seed: u64) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("held-out NLL of an empty set"));
    }
    let mut total = 0.0;
    for (i, img) in images.iter().enumerate() {
        let mut rng = Rng::stream(seed, (i as u64) << 1 | u64::from(degraded));
        let (x, corr) = preprocess(state, img, degraded, &mut rng)?;
        let h = state.condition(&x, degraded, &mut rng)?;
        total += state.model.nll_per_dim(&x, h.as_ref(), degraded)?[0] + corr;
    }
    Ok(total / images.len() as f64)
}

/// Mean per-domain NLL in nats per dimension on a held-out split.
pub fn heldout_nll(state: &TrainState, heldout: &Corpus, seed: u64) -> Result<(f64, f64)> {
    Ok((
        domain_nll(state, heldout.clean(), false, seed)?,
        domain_nll(state, heldout.degraded(), true, seed)?,
    ))
}

/// `−ln p(y | x)` per dimension over the hidden pairs of a held-out split;
/// `None` without a hidden pairing or with a singular shift covariance.
pub fn paired_nll(state: &TrainState, heldout: &Corpus, cap: &EvalCapability, seed: u64) -> Result<Option<f64>> {
    let Some(sources) = heldout.hidden_sources(cap) else {
        return Ok(None);
    };
    let mut total = 0.0;
    for (i, (src, deg)) in sources.iter().zip(heldout.degraded()).enumerate() {
        let mut rng = Rng::stream(seed ^ 0x9a1d, i as u64);
        let (x, _) = preprocess(state, src, false, &mut rng)?;
        let (y, corr) = preprocess(state, deg, true, &mut rng)?;
        let h = state.condition(&x, false, &mut rng)?;
        let tape = crate::autodiff::Tape::new();
        let p = crate::params::Binding::frozen(state.model.store(), &tape);
        // A post-hoc shift may be rank deficient; the paired density then
        // does not exist and the row is omitted.
        let nll = match state.model.paired_cond_nll(&p, &x, &y, h.as_ref()) {
            Ok(v) => v.value().item(),
            Err(Error::Degenerate(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        total += nll / (y.len() as f64) + corr;
    }
    Ok(Some(total / sources.len() as f64))
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("KS statistic needs two nonempty samples"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("KS sample contains NaN".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub tau: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            tau: 1.0,
            n_samples: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tau: f64,
    pub stats: ResidualStats,
    pub truth: Option<ResidualTruth>,
    pub nll_x: f64,
    pub nll_y: f64,
    pub paired_nll_y: Option<f64>,
    pub heldout_clean: usize,
    pub heldout_degraded: usize,
}

impl EvalReport {
    pub fn has_nan(&self) -> bool {
        let s = &self.stats;
        s.mean
            .iter()
            .chain(&s.cov)
            .chain([&s.lag1, &self.nll_x, &self.nll_y])
            .chain(self.paired_nll_y.as_ref())
            .any(|v| !v.is_finite())
    }

    /// `‖Σ̂ − Σ‖_F / ‖Σ‖_F` when the truth is known.
    pub fn cov_rel_frobenius(&self) -> Option<f64> {
        self.truth.as_ref().map(|t| relative_frobenius(&self.stats.cov, &t.cov))
    }
}

/// Runs the evaluation suite on the held-out part of `corpus`.
pub fn evaluate(state: &TrainState, corpus: &Corpus, settings: EvalSettings) -> Result<EvalReport> {
    let (_, heldout) = corpus.split_heldout(state.config.heldout_fraction)?;
    let stats = residual_stats(state, heldout.clean(), settings.tau, settings.n_samples, settings.seed)?;
    let truth = corpus
        .oracle()
        .map(|o| ResidualTruth::from_oracle(o, corpus.channels()));
    let (nll_x, nll_y) = heldout_nll(state, &heldout, settings.seed)?;
    let paired_nll_y = paired_nll(state, &heldout, &EvalCapability::for_evaluation(), settings.seed)?;
    Ok(EvalReport {
        tau: settings.tau,
        stats,
        truth,
        nll_x,
        nll_y,
        paired_nll_y,
        heldout_clean: heldout.clean().len(),
        heldout_degraded: heldout.degraded().len(),
    })
}

pub const RESIDUAL_HEADER: &str = "statistic,channel,channel2,estimate,truth,abs_error,rel_error";
pub const NLL_HEADER: &str = "quantity,value,images";
pub const RESIDUAL_FILE: &str = "residuals.csv";
pub const NLL_FILE: &str = "nll.csv";

fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Writes `residuals.csv` and `nll.csv` into `dir`. Truth, absolute and
/// relative error columns are left empty when unknown; relative error is
/// also empty where the truth is zero.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = &report.stats;
    let c = s.channels();
    let mut rows: Vec<(String, String, String, f64, Option<f64>)> = Vec::new();
    let t = report.truth.as_ref();
    let t_std = t.map(|t| t.std());
    for i in 0..c {
        rows.push(("mean".into(), i.to_string(), String::new(), s.mean[i], t.map(|t| t.mean[i])));
    }
    for i in 0..c {
        rows.push(("std".into(), i.to_string(), String::new(), s.std()[i], t_std.as_ref().map(|v| v[i])));
    }
    for i in 0..c {
        for j in 0..c {
            rows.push(("cov".into(), i.to_string(), j.to_string(), s.cov[i * c + j], t.map(|t| t.cov[i * c + j])));
        }
    }
    rows.push(("lag1".into(), String::new(), String::new(), s.lag1, t.map(|t| t.lag1)));
    if let Some(f) = report.cov_rel_frobenius() {
        rows.push(("cov_rel_frobenius".into(), String::new(), String::new(), f, None));
    }
    let mut text = format!("{RESIDUAL_HEADER}\n");
    for (name, a, b, est, truth) in rows {
        let (tv, abs, rel) = match truth {
            Some(tv) => (
                num(tv),
                num((est - tv).abs()),
                relative_error(est, tv).map(num).unwrap_or_default(),
            ),
            None => Default::default(),
        };
        text.push_str(&format!("{name},{a},{b},{},{tv},{abs},{rel}\n", num(est)));
    }
    let path = dir.join(RESIDUAL_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    let mut text = format!("{NLL_HEADER}\n");
    text.push_str(&format!("nll_x,{},{}\n", num(report.nll_x), report.heldout_clean));
    text.push_str(&format!("nll_y,{},{}\n", num(report.nll_y), report.heldout_degraded));
    if let Some(p) = report.paired_nll_y {
        text.push_str(&format!("paired_nll_y,{},{}\n", num(p), report.heldout_degraded));
    }
    text.push_str(&format!("tau,{},\n", num(report.tau)));
    text.push_str(&format!("residual_count,{},\n", s.count));
    let path = dir.join(NLL_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
