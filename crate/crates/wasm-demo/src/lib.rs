use wasm_bindgen::prelude::*;

use deflow::conditioning::{make_condition, ConditionSpec};
use deflow::data::smooth_image;
use deflow::gauss1d::{fit_closed_form, joint_marginal_nll_1d, sample_pairs_1d, Gauss1DSolution, ShiftCase};
use deflow::model::{DeFlowModel, ModelConfig};
use deflow::{Rng, Tensor};

fn js(e: deflow::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `[mu_x, var_x, mu_u, var_u, nll, noisier_target]` from `n` samples of each set.
pub fn gauss1d_summary(mu_x: f64, var_x: f64, mu_u: f64, var_u: f64, n: usize, seed: u64) -> deflow::Result<Vec<f64>> {
    let truth = Gauss1DSolution::new(mu_x, var_x, mu_u, var_u)?;
    let s = sample_pairs_1d(&truth, n, n, seed)?;
    let fit = fit_closed_form(&s)?;
    let nll = joint_marginal_nll_1d(&fit, &s)?;
    let noisier = if fit.case == ShiftCase::NoisierTarget { 1.0 } else { 0.0 };
    Ok(vec![fit.mu_x, fit.var_x, fit.mu_u, fit.var_u, nll, noisier])
}

#[wasm_bindgen]
pub fn fit_gauss1d(mu_x: f64, var_x: f64, mu_u: f64, var_u: f64, n: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    gauss1d_summary(mu_x, var_x, mu_u, var_u, n, seed).map_err(js)
}

/// Writes `[C,H,W]` (C = 3) into an RGBA canvas of width `stride` at column `x0`,
/// each source pixel drawn as a `zoom × zoom` block.
fn blit(img: &Tensor, rgba: &mut [u8], stride: usize, x0: usize, zoom: usize) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    for y in 0..h * zoom {
        for x in 0..w * zoom {
            let (sy, sx) = (y / zoom, x / zoom);
            let o = 4 * (y * stride + x0 + x);
            for c in 0..3 {
                rgba[o + c] = (d[(c * h + sy) * w + sx].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            rgba[o + 3] = 255;
        }
    }
}

/// Side-by-side RGBA: the image and its condition `h(x)` scaled back up.
pub fn condition_rgba(size: usize, factor: usize, noise: f64, seed: u64) -> deflow::Result<Vec<u8>> {
    let mut rng = Rng::new(seed);
    let img = smooth_image(3, size, size, &mut rng);
    let spec = ConditionSpec {
        down_factor: factor,
        noise_sigma: noise,
        disabled: false,
    };
    spec.validate()?;
    let batch = img.reshape(&[1, 3, size, size])?;
    let h = make_condition(&batch, &spec, &mut rng)?;
    let small = h.reshape(&[3, size / factor, size / factor])?;
    let mut rgba = vec![0; 4 * 2 * size * size];
    blit(&img, &mut rgba, 2 * size, 0, 1);
    blit(&small, &mut rgba, 2 * size, size, factor);
    Ok(rgba)
}

#[wasm_bindgen]
pub fn condition_preview(size: usize, factor: usize, noise: f64, seed: u64) -> Result<Vec<u8>, JsError> {
    condition_rgba(size, factor, noise, seed).map_err(js)
}

/// An untrained flow with a hand-set latent shift, for exploring the
/// sampling path `y = f⁻¹(f(x) + τ·u)`.
#[wasm_bindgen]
pub struct Degrader {
    model: DeFlowModel,
    clean: Tensor,
    size: usize,
}

impl Degrader {
    pub fn build(size: usize, seed: u64) -> deflow::Result<Degrader> {
        let cfg = ModelConfig {
            levels: 2,
            steps: 1,
            hidden: 4,
            ..ModelConfig::default()
        };
        let mut model = DeFlowModel::new(cfg, seed)?;
        let mut rng = Rng::new(seed);
        let clean = smooth_image(3, size, size, &mut rng);
        let batch = clean.reshape(&[1, 3, size, size])?;
        let h = model.condition(&batch, &mut rng)?;
        model.initialize(&batch, h.as_ref())?;
        Ok(Degrader { model, clean: batch, size })
    }

    /// Sets every group to `u ~ N(mean·1, σ²·I)` in latent units.
    pub fn set_shift_values(&mut self, mean: f64, sigma: f64) -> deflow::Result<()> {
        for shift in self.model.shifts().to_vec() {
            let c = shift.channels();
            let store = self.model.store_mut();
            store.set(shift.mu(), Tensor::full(&[c], mean))?;
            let m = store.get(shift.m()).shape().to_vec();
            let value = if m.len() == 2 {
                let mut d = vec![0.0; c * c];
                (0..c).for_each(|i| d[i * c + i] = sigma);
                Tensor::new(&[c, c], d)?
            } else {
                Tensor::full(&[c], sigma)
            };
            store.set(shift.m(), value)?;
        }
        Ok(())
    }

    pub fn render_rgba(&self, tau: f64, seed: u64) -> deflow::Result<Vec<u8>> {
        let y = self.model.degrade(&self.clean, tau, seed)?;
        let s = self.size;
        let mut rgba = vec![0; 4 * 2 * s * s];
        blit(&self.clean.reshape(&[3, s, s])?, &mut rgba, 2 * s, 0, 1);
        blit(&y.reshape(&[3, s, s])?, &mut rgba, 2 * s, s, 1);
        Ok(rgba)
    }
}

#[wasm_bindgen]
impl Degrader {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, seed: u64) -> Result<Degrader, JsError> {
        Degrader::build(size, seed).map_err(js)
    }

    pub fn set_shift(&mut self, mean: f64, sigma: f64) -> Result<(), JsError> {
        self.set_shift_values(mean, sigma).map_err(js)
    }

    /// Clean image and one degraded draw side by side, RGBA.
    pub fn render(&self, tau: f64, seed: u64) -> Result<Vec<u8>, JsError> {
        self.render_rgba(tau, seed).map_err(js)
    }
}
