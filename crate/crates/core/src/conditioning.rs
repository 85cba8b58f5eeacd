//! Domain-invariant conditioning: a coarse, noised copy of the input and a
//! small conv encoder that turns it into per-level feature maps.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Noise added to the downsampled image, on the `[0, 1]` pixel scale.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionSpec {
    pub down_factor: usize,
    pub noise_sigma: f64,
    /// `h(x) = 0`.
    pub disabled: bool,
}

impl Default for ConditionSpec {
    fn default() -> Self {
        Self {
            down_factor: 4,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            disabled: false,
        }
    }
}

impl ConditionSpec {
    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4, 8, 16].contains(&self.down_factor) {
            return Err(Error::Config(format!(
                "cond_down_factor must be one of 1, 2, 4, 8, 16, got {}",
                self.down_factor
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("cond_noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Taps `(index, weight)` for each output position of a 1-D resize by
/// `1/factor`. The kernel is widened by `factor` to antialias.
fn taps(len: usize, factor: usize) -> Vec<Vec<(usize, f64)>> {
    let f = factor as f64;
    let out = len / factor;
    (0..out)
        .map(|o| {
            let center = (o as f64 + 0.5) * f - 0.5;
            let lo = (center - 2.0 * f).floor() as isize;
            let hi = (center + 2.0 * f).ceil() as isize;
            let mut w: Vec<(usize, f64)> = (lo..=hi)
                .map(|j| (reflect(j, len), cubic((j as f64 - center) / f)))
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let total: f64 = w.iter().map(|t| t.1).sum();
            w.iter_mut().for_each(|t| t.1 /= total);
            w
        })
        .collect()
}

/// Bicubic downsampling of `[N,C,H,W]` by an integer factor, reflect-padded.
pub fn bicubic_downsample(img: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = img.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!("downsample factor {factor} does not divide {h}×{w}")));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (ho, wo) = (h / factor, w / factor);
    let (ty, tx) = (taps(h, factor), taps(w, factor));
    let mut rows = vec![0.0; n * c * ho * w];
    for plane in 0..n * c {
        let src = &img.data()[plane * h * w..(plane + 1) * h * w];
        for (oy, t) in ty.iter().enumerate() {
            let dst = &mut rows[(plane * ho + oy) * w..(plane * ho + oy + 1) * w];
            for &(iy, wt) in t {
                for (d, s) in dst.iter_mut().zip(&src[iy * w..(iy + 1) * w]) {
                    *d += wt * s;
                }
            }
        }
    }
    let mut out = vec![0.0; n * c * ho * wo];
    for r in 0..n * c * ho {
        let src = &rows[r * w..(r + 1) * w];
        for (ox, t) in tx.iter().enumerate() {
            out[r * wo + ox] = t.iter().map(|&(ix, wt)| wt * src[ix]).sum();
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

/// `h = downsample(img) + n`, or zeros of the downsampled shape when
/// conditioning is disabled.
pub fn make_condition(img: &Tensor, spec: &ConditionSpec, rng: &mut Rng) -> Result<Tensor> {
    make_condition_scaled(img, spec, None, rng)
}

/// [`make_condition`] with the noise level of channel `c` multiplied by
/// `scale[c]`, for images that live on a rescaled intensity axis.
pub fn make_condition_scaled(img: &Tensor, spec: &ConditionSpec, scale: Option<&[f64]>, rng: &mut Rng) -> Result<Tensor> {
    let (n, c, h, w) = img.dims4()?;
    let f = spec.down_factor;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::invalid(format!("condition factor {f} does not divide {h}×{w}")));
    }
    if let Some(s) = scale {
        if s.len() != c {
            return Err(Error::invalid(format!("{} noise scales for {c} channels", s.len())));
        }
    }
    if spec.disabled {
        return Ok(Tensor::zeros(&[n, c, h / f, w / f]));
    }
    let mut out = bicubic_downsample(img, f)?;
    if spec.noise_sigma > 0.0 {
        let plane = (h / f) * (w / f);
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let k = scale.map_or(1.0, |s| s[(i / plane) % c]);
            *v += spec.noise_sigma * k * rng.normal();
        }
    }
    Ok(out)
}

/// Three 3×3 convolutions with tanh between them.
#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    in_channels: usize,
    out_channels: usize,
    layers: Vec<(ParamId, ParamId)>,
}

impl ConditionEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, in_channels: usize, width: usize, rng: &mut Rng) -> Self {
        let mut layers = Vec::new();
        let mut c_in = in_channels;
        for i in 0..3 {
            let std = (1.0 / (9 * c_in) as f64).sqrt();
            let w = store.add(format!("{prefix}.conv{i}.w"), Tensor::randn(&[width, c_in, 3, 3], std, rng));
            let b = store.add(format!("{prefix}.conv{i}.b"), Tensor::zeros(&[width]));
            layers.push((w, b));
            c_in = width;
        }
        Self {
            in_channels,
            out_channels: width,
            layers,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, raw: Var<'t>) -> Result<Var<'t>> {
        let tape = p.tape();
        let mut h = raw;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.conv2d(h, p.var(w), p.var(b))?;
            if i + 1 < self.layers.len() {
                h = h.tanh();
            }
        }
        Ok(h)
    }
}

/// Nearest-neighbour resize of `[N,C,H,W]` to `(ho, wo)`.
pub fn resize_nearest(x: Var<'_>, ho: usize, wo: usize) -> Result<Var<'_>> {
    let shape = x.shape();
    let &[n, c, h, w] = shape.as_slice() else {
        return Err(Error::invalid(format!("resize of shape {shape:?}")));
    };
    if (h, w) == (ho, wo) {
        return Ok(x);
    }
    let mut index = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        for oy in 0..ho {
            let iy = oy * h / ho;
            for ox in 0..wo {
                index.push((plane * h + iy) * w + ox * w / wo);
            }
        }
    }
    x.tape().gather(x, Rc::new(index), &[n, c, ho, wo])
}
