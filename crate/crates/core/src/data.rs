//! Images, synthetic unpaired corpora with known degradations, and batch
//! sampling.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};

use crate::conditioning::bicubic_downsample;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Reads an 8-bit PNG or PPM/PGM as `[C,H,W]` in `[0, 1]`. Grayscale
/// images give `C = 1`, everything else is converted to RGB.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let data = g.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
            Tensor::new(&[1, h as usize, w as usize], data)
        }
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) | DynamicImage::ImageLumaA8(_) => {
            let rgb = img.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let raw = rgb.into_raw();
            let mut data = vec![0.0; 3 * h * w];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * h * w + i] = f64::from(px[c]) / 255.0;
                }
            }
            Tensor::new(&[3, h, w], data)
        }
        other => Err(Error::Image {
            path: path.to_path_buf(),
            message: format!("unsupported pixel format {:?}; expected 8-bit gray or RGB", other.color()),
        }),
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `[C,H,W]` (`C` of 1 or 3) as an 8-bit image; the format follows
/// the extension (`.png`, `.ppm`, `.pgm`).
pub fn save_image(path: &Path, img: &Tensor) -> Result<()> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::invalid(format!("image must be [C,H,W], got {:?}", img.shape())));
    };
    let plane = h * w;
    let result = match c {
        1 => {
            let buf: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
            GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer size").save(path)
        }
        3 => {
            let mut buf = vec![0u8; 3 * plane];
            for i in 0..plane {
                for ch in 0..3 {
                    buf[3 * i + ch] = to_u8(img.data()[ch * plane + i]);
                }
            }
            RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size").save(path)
        }
        _ => return Err(Error::invalid(format!("cannot save {c}-channel image"))),
    };
    result.map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Rounds to the 8-bit grid.
pub fn quantize_8bit(img: &Tensor) -> Tensor {
    img.map(|v| f64::from(to_u8(v)) / 255.0)
}

/// 8-bit value → one of 32 buckets → uniform position inside the bucket.
pub fn dequantize_5bit(img: &Tensor, rng: &mut Rng) -> Tensor {
    let mut out = img.clone();
    for v in out.data_mut() {
        let bucket = (to_u8(*v) / 8) as f64;
        *v = (bucket + rng.uniform()) / 32.0;
    }
    out
}

/// Known synthetic degradation `y = x + n`.
#[derive(Clone, Debug, PartialEq)]
pub enum DegradationOracle {
    /// i.i.d. `N(0, σ²)` per entry.
    WhiteNoise { sigma: f64 },
    /// White noise filtered by the separable kernel `k ⊗ k` (normalized to
    /// unit energy) so that each entry has standard deviation `σ`.
    CorrelatedNoise { kernel: Vec<f64>, sigma: f64 },
    /// Per-pixel `N(μ, Σ)` across channels, independent over positions.
    ShiftedNoise { mu: Vec<f64>, cov: Vec<f64> },
}

impl DegradationOracle {
    pub fn kind(&self) -> &'static str {
        match self {
            DegradationOracle::WhiteNoise { .. } => "white_noise",
            DegradationOracle::CorrelatedNoise { .. } => "correlated_noise",
            DegradationOracle::ShiftedNoise { .. } => "shifted_noise",
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        match self {
            DegradationOracle::WhiteNoise { sigma } | DegradationOracle::CorrelatedNoise { sigma, .. }
                if !(*sigma >= 0.0) =>
            {
                Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")))
            }
            DegradationOracle::CorrelatedNoise { kernel, .. }
                if kernel.is_empty() || kernel.len() % 2 == 0 || kernel.iter().all(|&k| k == 0.0) =>
            {
                Err(Error::invalid("correlated noise kernel must have odd length and nonzero energy"))
            }
            DegradationOracle::ShiftedNoise { mu, cov } => {
                if mu.len() != channels || cov.len() != channels * channels {
                    return Err(Error::invalid(format!(
                        "shifted noise needs {channels} means and a {channels}×{channels} covariance"
                    )));
                }
                let (vals, _) = linalg::symmetric_eigen(cov, channels);
                if vals.iter().any(|&v| v < -1e-12) {
                    return Err(Error::invalid("shifted noise covariance is not positive semidefinite"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Per-channel noise mean.
    pub fn mean(&self, channels: usize) -> Vec<f64> {
        match self {
            DegradationOracle::ShiftedNoise { mu, .. } => mu.clone(),
            _ => vec![0.0; channels],
        }
    }

    /// Channel covariance of the noise at one position.
    pub fn covariance(&self, channels: usize) -> Vec<f64> {
        match self {
            DegradationOracle::WhiteNoise { sigma } | DegradationOracle::CorrelatedNoise { sigma, .. } => {
                let mut c = vec![0.0; channels * channels];
                for i in 0..channels {
                    c[i * channels + i] = sigma * sigma;
                }
                c
            }
            DegradationOracle::ShiftedNoise { cov, .. } => cov.clone(),
        }
    }

    /// Horizontal lag-1 autocorrelation of the noise.
    pub fn lag1_autocorrelation(&self) -> f64 {
        match self {
            DegradationOracle::CorrelatedNoise { kernel, .. } => {
                let energy: f64 = kernel.iter().map(|k| k * k).sum();
                kernel.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / energy
            }
            _ => 0.0,
        }
    }

    /// Noise field for a `[C,H,W]` image.
    pub fn noise(&self, shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
        let &[c, h, w] = shape else {
            return Err(Error::invalid(format!("oracle needs [C,H,W], got {shape:?}")));
        };
        self.validate(c)?;
        let plane = h * w;
        let mut out = Tensor::zeros(shape);
        match self {
            DegradationOracle::WhiteNoise { sigma } => {
                out.data_mut().iter_mut().for_each(|v| *v = sigma * rng.normal());
            }
            DegradationOracle::CorrelatedNoise { kernel, sigma } => {
                let energy: f64 = kernel.iter().map(|k| k * k).sum();
                let k: Vec<f64> = kernel.iter().map(|v| v / energy.sqrt()).collect();
                let r = k.len() / 2;
                let (ph, pw) = (h + 2 * r, w + 2 * r);
                for ch in 0..c {
                    let white: Vec<f64> = rng.normals(ph * pw);
                    let mut rows = vec![0.0; ph * w];
                    for y in 0..ph {
                        for x in 0..w {
                            rows[y * w + x] = k.iter().enumerate().map(|(i, kv)| kv * white[y * pw + x + i]).sum();
                        }
                    }
                    for y in 0..h {
                        for x in 0..w {
                            let v: f64 = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * w + x]).sum();
                            out.data_mut()[ch * plane + y * w + x] = sigma * v;
                        }
                    }
                }
            }
            DegradationOracle::ShiftedNoise { mu, cov } => {
                let m = linalg::psd_sqrt(cov, c);
                let mut eps = vec![0.0; c];
                for pos in 0..plane {
                    eps.iter_mut().for_each(|e| *e = rng.normal());
                    for i in 0..c {
                        let v: f64 = mu[i] + (0..c).map(|j| m[i * c + j] * eps[j]).sum::<f64>();
                        out.data_mut()[i * plane + pos] = v;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn apply(&self, img: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let n = self.noise(img.shape(), rng)?;
        img.zip_map(&n, |a, b| a + b)
    }

    /// `kind key=value ...` form used in corpus metadata.
    pub fn describe(&self) -> Vec<(String, String)> {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut out = vec![("oracle".to_string(), self.kind().to_string())];
        match self {
            DegradationOracle::WhiteNoise { sigma } => out.push(("sigma".into(), format!("{sigma:?}"))),
            DegradationOracle::CorrelatedNoise { kernel, sigma } => {
                out.push(("sigma".into(), format!("{sigma:?}")));
                out.push(("kernel".into(), list(kernel)));
            }
            DegradationOracle::ShiftedNoise { mu, cov } => {
                out.push(("mu".into(), list(mu)));
                out.push(("cov".into(), list(cov)));
            }
        }
        out
    }

    pub fn from_description(kv: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("oracle description lacks '{k}'")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("oracle field '{k}' is not a number")))
        };
        let list = |k: &str| -> Result<Vec<f64>> { parse_list(get(k)?) };
        match get("oracle")? {
            "white_noise" => Ok(DegradationOracle::WhiteNoise { sigma: num("sigma")? }),
            "correlated_noise" => Ok(DegradationOracle::CorrelatedNoise {
                kernel: list("kernel")?,
                sigma: num("sigma")?,
            }),
            "shifted_noise" => Ok(DegradationOracle::ShiftedNoise {
                mu: list("mu")?,
                cov: list("cov")?,
            }),
            other => Err(Error::Format(format!("unknown oracle kind '{other}'"))),
        }
    }
}

pub(crate) fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("'{t}' is not a number")))
        })
        .collect()
}

impl fmt::Display for DegradationOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.describe().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Smooth synthetic image in `[0.2, 0.8]`: a few random low-frequency
/// waves per channel plus a shared luminance component.
pub fn smooth_image(channels: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor {
    let waves = |rng: &mut Rng| -> Vec<(f64, f64, f64, f64)> {
        (0..4)
            .map(|_| {
                let fy = rng.uniform_in(0.5, 3.0) / h as f64;
                let fx = rng.uniform_in(0.5, 3.0) / w as f64;
                let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
                let amp = rng.uniform_in(0.3, 1.0);
                (fy, fx, phase, amp)
            })
            .collect()
    };
    let shared = waves(rng);
    let eval = |ws: &[(f64, f64, f64, f64)], y: usize, x: usize| -> f64 {
        let tau = std::f64::consts::TAU;
        let total: f64 = ws.iter().map(|w| w.3).sum();
        ws.iter()
            .map(|&(fy, fx, ph, a)| a * (tau * (fy * y as f64 + fx * x as f64) + ph).sin())
            .sum::<f64>()
            / total
    };
    let mut out = Tensor::zeros(&[channels, h, w]);
    for c in 0..channels {
        let own = waves(rng);
        for y in 0..h {
            for x in 0..w {
                let v = 0.6 * eval(&shared, y, x) + 0.4 * eval(&own, y, x);
                out.data_mut()[(c * h + y) * w + x] = 0.5 + 0.3 * v;
            }
        }
    }
    out
}

/// Factor between generated sources and stored clean images.
pub const SOURCE_SCALE: usize = 4;

/// Unpaired clean and degraded sets. For oracle corpora the clean source
/// of every degraded image is retained, reachable only through an
/// [`EvalCapability`].
#[derive(Clone, Debug)]
pub struct Corpus {
    clean: Vec<Tensor>,
    degraded: Vec<Tensor>,
    oracle: Option<DegradationOracle>,
    seed: Option<u64>,
    hidden: Option<Vec<Tensor>>,
}

/// Grants access to hidden pairings. Only evaluation code should hold one.
#[derive(Debug)]
pub struct EvalCapability(());

impl EvalCapability {
    pub fn for_evaluation() -> Self {
        EvalCapability(())
    }
}

/// What training is allowed to see: two unrelated image lists.
#[derive(Clone, Copy, Debug)]
pub struct TrainingView<'a> {
    pub clean: &'a [Tensor],
    pub degraded: &'a [Tensor],
}

impl Corpus {
    /// An unpaired corpus without ground truth.
    pub fn unpaired(clean: Vec<Tensor>, degraded: Vec<Tensor>) -> Result<Self> {
        let c = Self {
            clean,
            degraded,
            oracle: None,
            seed: None,
            hidden: None,
        };
        c.check()?;
        Ok(c)
    }

    fn check(&self) -> Result<()> {
        if self.clean.is_empty() || self.degraded.is_empty() {
            return Err(Error::invalid("corpus needs at least one clean and one degraded image"));
        }
        let c = self.clean[0].shape()[0];
        for img in self.clean.iter().chain(&self.degraded) {
            if img.rank() != 3 || img.shape()[0] != c {
                return Err(Error::invalid(format!(
                    "corpus images must be [C,H,W] with C={c}, found {:?}",
                    img.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.clean[0].shape()[0]
    }

    pub fn clean(&self) -> &[Tensor] {
        &self.clean
    }

    pub fn degraded(&self) -> &[Tensor] {
        &self.degraded
    }

    pub fn oracle(&self) -> Option<&DegradationOracle> {
        self.oracle.as_ref()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            clean: &self.clean,
            degraded: &self.degraded,
        }
    }

    pub fn has_hidden_pairing(&self) -> bool {
        self.hidden.is_some()
    }

    /// Clean source of each degraded image.
    pub fn hidden_sources(&self, _cap: &EvalCapability) -> Option<&[Tensor]> {
        self.hidden.as_deref()
    }

    /// Splits off the last `fraction` of each domain as held-out data.
    pub fn split_heldout(&self, fraction: f64) -> Result<(Corpus, Corpus)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::invalid(format!("held-out fraction must be in (0,1), got {fraction}")));
        }
        let cut = |len: usize| -> Result<usize> {
            let keep = len - ((len as f64 * fraction).round() as usize).max(1);
            if keep == 0 {
                return Err(Error::invalid("corpus too small to hold out data"));
            }
            Ok(keep)
        };
        let (kc, kd) = (cut(self.clean.len())?, cut(self.degraded.len())?);
        let part = |c: std::ops::Range<usize>, d: std::ops::Range<usize>| Corpus {
            clean: self.clean[c].to_vec(),
            degraded: self.degraded[d.clone()].to_vec(),
            oracle: self.oracle.clone(),
            seed: self.seed,
            hidden: self.hidden.as_ref().map(|h| h[d].to_vec()),
        };
        Ok((
            part(0..kc, 0..kd),
            part(kc..self.clean.len(), kd..self.degraded.len()),
        ))
    }
}

/// Oracle corpus: `n_clean + n_degraded` distinct smooth sources generated
/// at [`SOURCE_SCALE`]× and bicubic-downsampled to `size`; the first
/// `n_clean` form the clean set, the rest are degraded by the oracle.
/// Everything is stored on the 8-bit grid.
pub fn synth_corpus(
    oracle: &DegradationOracle,
    n_clean: usize,
    n_degraded: usize,
    channels: usize,
    size: usize,
    seed: u64,
) -> Result<Corpus> {
    if n_clean == 0 || n_degraded == 0 {
        return Err(Error::invalid("synthetic corpus needs n_clean > 0 and n_degraded > 0"));
    }
    if size == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    oracle.validate(channels)?;
    let mut src_rng = Rng::stream(seed, 10);
    let mut noise_rng = Rng::stream(seed, 11);
    let big = size * SOURCE_SCALE;
    let mut sources = Vec::with_capacity(n_clean + n_degraded);
    for _ in 0..n_clean + n_degraded {
        let img = smooth_image(channels, big, big, &mut src_rng).reshape(&[1, channels, big, big])?;
        let small = bicubic_downsample(&img, SOURCE_SCALE)?.reshape(&[channels, size, size])?;
        sources.push(quantize_8bit(&small));
    }
    let hidden: Vec<Tensor> = sources.split_off(n_clean);
    let degraded = hidden
        .iter()
        .map(|s| Ok(quantize_8bit(&oracle.apply(s, &mut noise_rng)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        clean: sources,
        degraded,
        oracle: Some(oracle.clone()),
        seed: Some(seed),
        hidden: Some(hidden),
    })
}

const METADATA: &str = "metadata.txt";
const PAIRING: &str = "hidden/pairing.txt";

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm" | "pgm" | "pnm")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Reads a plain key=value file, skipping blanks and `#` comments.
pub fn read_key_values(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Corpus {
    /// Layout: `clean/`, `degraded/`, `metadata.txt`, and for oracle
    /// corpora `hidden/` holding each degraded image's source plus
    /// `hidden/pairing.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["clean", "degraded"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        for (i, img) in self.clean.iter().enumerate() {
            save_image(&dir.join(format!("clean/{i:05}.png")), img)?;
        }
        for (i, img) in self.degraded.iter().enumerate() {
            save_image(&dir.join(format!("degraded/{i:05}.png")), img)?;
        }
        let mut meta = vec![
            format!("n_clean={}", self.clean.len()),
            format!("n_degraded={}", self.degraded.len()),
            format!("channels={}", self.channels()),
        ];
        if let Some(seed) = self.seed {
            meta.push(format!("seed={seed}"));
        }
        if let Some(o) = &self.oracle {
            meta.extend(o.describe().into_iter().map(|(k, v)| format!("{k}={v}")));
        }
        if let Some(hidden) = &self.hidden {
            let hdir = dir.join("hidden");
            fs::create_dir_all(&hdir).map_err(|e| Error::io(&hdir, e))?;
            let mut pairing = String::from("# degraded source\n");
            for (i, img) in hidden.iter().enumerate() {
                save_image(&hdir.join(format!("{i:05}.png")), img)?;
                pairing.push_str(&format!("degraded/{i:05}.png hidden/{i:05}.png\n"));
            }
            let p = dir.join(PAIRING);
            fs::write(&p, pairing).map_err(|e| Error::io(&p, e))?;
            meta.push(format!("hidden_pairing={PAIRING}"));
        }
        let p = dir.join(METADATA);
        fs::write(&p, meta.join("\n") + "\n").map_err(|e| Error::io(&p, e))
    }

    /// Loads a corpus directory. Without a metadata file the corpus is
    /// treated as unpaired real data.
    pub fn load(dir: &Path) -> Result<Self> {
        let load_all = |sub: &str| -> Result<Vec<Tensor>> {
            list_images(&dir.join(sub))?.iter().map(|p| load_image(p)).collect()
        };
        let clean = load_all("clean")?;
        let degraded = load_all("degraded")?;
        let meta_path = dir.join(METADATA);
        let meta = if meta_path.exists() {
            read_key_values(&meta_path)?
        } else {
            Vec::new()
        };
        let oracle = if meta.iter().any(|(k, _)| k == "oracle") {
            Some(DegradationOracle::from_description(&meta)?)
        } else {
            None
        };
        let seed = meta
            .iter()
            .find(|(k, _)| k == "seed")
            .map(|(_, v)| v.parse::<u64>().map_err(|_| Error::Format(format!("bad seed '{v}'"))))
            .transpose()?;
        let hidden = match meta.iter().find(|(k, _)| k == "hidden_pairing") {
            Some((_, rel)) => {
                let path = dir.join(rel);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let mut by_degraded = Vec::new();
                for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
                    let mut parts = line.split_whitespace();
                    let (Some(d), Some(s)) = (parts.next(), parts.next()) else {
                        return Err(Error::Format(format!("{}: bad pairing line '{line}'", path.display())));
                    };
                    by_degraded.push((d.to_string(), load_image(&dir.join(s))?));
                }
                let names: Vec<String> = list_images(&dir.join("degraded"))?
                    .iter()
                    .map(|p| format!("degraded/{}", p.file_name().unwrap_or_default().to_string_lossy()))
                    .collect();
                let ordered = names
                    .iter()
                    .map(|n| {
                        by_degraded
                            .iter()
                            .find(|(d, _)| d == n)
                            .map(|(_, t)| t.clone())
                            .ok_or_else(|| Error::Format(format!("no hidden source for {n}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(ordered)
            }
            None => None,
        };
        let c = Corpus {
            clean,
            degraded,
            oracle,
            seed,
            hidden,
        };
        c.check()?;
        Ok(c)
    }
}

/// Per-channel affine statistics of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn of(images: &[Tensor]) -> Result<Self> {
        let c = images.first().map(|i| i.shape()[0]).ok_or_else(|| Error::invalid("no images"))?;
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for img in images {
            let plane = img.len() / c;
            for ch in 0..c {
                sum[ch] += img.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
            }
            count += plane;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; c];
        for img in images {
            let plane = img.len() / c;
            for ch in 0..c {
                sq[ch] += img.data()[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        if let Some(ch) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Degenerate(format!("channel {ch} has zero variance")));
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, img: &Tensor) -> Tensor {
        self.affine(img, |v, m, s| (v - m) / s)
    }

    /// Per-channel `1/std`: how a data-space length maps to normalized units.
    pub fn inverse_std(&self) -> Vec<f64> {
        self.std.iter().map(|s| 1.0 / s).collect()
    }

    pub fn denormalize(&self, img: &Tensor) -> Tensor {
        self.affine(img, |v, m, s| v * s + m)
    }

    fn affine(&self, img: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let c = self.mean.len();
        let shape = img.shape();
        let plane = if shape.len() >= 2 {
            shape[shape.len() - 2..].iter().product()
        } else {
            img.len() / c
        };
        let mut out = img.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = f(*v, self.mean[ch], self.std[ch]);
        }
        out
    }
}

/// Statistics that map both domains to zero mean (and, for
/// [`NormMode::Full`], unit standard deviation) per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub clean: ChannelStats,
    pub degraded: ChannelStats,
}

/// How training data is normalized per domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Off,
    /// Subtract each domain's channel means.
    Mean,
    /// Zero mean and unit standard deviation per domain and channel.
    Full,
}

impl NormMode {
    pub fn name(self) -> &'static str {
        match self {
            NormMode::Off => "off",
            NormMode::Mean => "mean",
            NormMode::Full => "full",
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(NormMode::Off),
            "mean" => Ok(NormMode::Mean),
            "full" => Ok(NormMode::Full),
            other => Err(Error::Config(format!("normalize must be off, mean or full, got '{other}'"))),
        }
    }
}

impl NormStats {
    /// Statistics of a training view under `mode`; `None` for `Off`.
    pub fn for_mode(mode: NormMode, view: TrainingView<'_>) -> Result<Option<Self>> {
        let unit = |s: ChannelStats| ChannelStats {
            std: vec![1.0; s.std.len()],
            mean: s.mean,
        };
        let (clean, degraded) = (ChannelStats::of(view.clean)?, ChannelStats::of(view.degraded)?);
        Ok(match mode {
            NormMode::Off => None,
            NormMode::Mean => Some(Self {
                clean: unit(clean),
                degraded: unit(degraded),
            }),
            NormMode::Full => Some(Self { clean, degraded }),
        })
    }
}

/// Normalizes each domain per channel; returns the statistics needed to
/// map sampled degradations back.
pub fn channel_normalize(corpus: &Corpus) -> Result<(Corpus, NormStats)> {
    let stats = NormStats {
        clean: ChannelStats::of(&corpus.clean)?,
        degraded: ChannelStats::of(&corpus.degraded)?,
    };
    let mut out = corpus.clone();
    out.clean = corpus.clean.iter().map(|i| stats.clean.normalize(i)).collect();
    out.degraded = corpus.degraded.iter().map(|i| stats.degraded.normalize(i)).collect();
    out.hidden = corpus
        .hidden
        .as_ref()
        .map(|h| h.iter().map(|i| stats.clean.normalize(i)).collect());
    Ok((out, stats))
}

/// Random `patch×patch` crop of `[C,H,W]` with independent flips.
fn crop(img: &Tensor, patch: usize, rng: &mut Rng) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let y0 = rng.below(h - patch + 1);
    let x0 = rng.below(w - patch + 1);
    let (flip_h, flip_v) = (rng.coin(), rng.coin());
    let mut out = Tensor::zeros(&[c, patch, patch]);
    for ch in 0..c {
        for y in 0..patch {
            let sy = if flip_v { y0 + patch - 1 - y } else { y0 + y };
            for x in 0..patch {
                let sx = if flip_h { x0 + patch - 1 - x } else { x0 + x };
                out.data_mut()[(ch * patch + y) * patch + x] = img.data()[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

fn domain_batch(images: &[Tensor], batch: usize, patch: usize, rng: &mut Rng, picks: &mut Vec<usize>) -> Result<Tensor> {
    let mut items = Vec::with_capacity(batch);
    for _ in 0..batch {
        let i = rng.below(images.len());
        picks.push(i);
        items.push(crop(&images[i], patch, rng));
    }
    Tensor::stack(&items)
}

/// An equal-sized pair of clean and degraded patch batches.
pub struct UnpairedBatch {
    pub x: Tensor,
    pub y: Tensor,
    /// Image indices drawn from each domain, in batch order.
    pub picks_x: Vec<usize>,
    pub picks_y: Vec<usize>,
}

/// Draws `batch` random crops from each domain.
pub fn sample_unpaired_batch(view: TrainingView<'_>, batch: usize, patch: usize, rng: &mut Rng) -> Result<UnpairedBatch> {
    if batch == 0 || patch == 0 {
        return Err(Error::invalid("batch size and patch size must be positive"));
    }
    if view.clean.is_empty() || view.degraded.is_empty() {
        return Err(Error::invalid("both domains need images"));
    }
    for img in view.clean.iter().chain(view.degraded) {
        if img.shape()[1] < patch || img.shape()[2] < patch {
            return Err(Error::invalid(format!(
                "patch {patch} larger than image {:?}",
                &img.shape()[1..]
            )));
        }
    }
    let (mut px, mut py) = (Vec::new(), Vec::new());
    let x = domain_batch(view.clean, batch, patch, rng, &mut px)?;
    let y = domain_batch(view.degraded, batch, patch, rng, &mut py)?;
    Ok(UnpairedBatch {
        x,
        y,
        picks_x: px,
        picks_y: py,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dequantize_buckets() {
        let img = Tensor::from_vec(vec![0.0, 1.0]);
        let mut rng = Rng::new(1);
        for _ in 0..1000 {
            let d = dequantize_5bit(&img, &mut rng);
            assert!(d.data()[0] >= 0.0 && d.data()[0] < 1.0 / 32.0);
            assert!(d.data()[1] >= 31.0 / 32.0 && d.data()[1] < 1.0);
        }
    }

    #[test]
    fn oracle_description_round_trip() {
        let o = DegradationOracle::ShiftedNoise {
            mu: vec![0.01, -0.02, 0.0],
            cov: vec![1e-3, 2e-4, 0.0, 2e-4, 1e-3, 0.0, 0.0, 0.0, 5e-4],
        };
        assert_eq!(DegradationOracle::from_description(&o.describe()).unwrap(), o);
        let k = DegradationOracle::CorrelatedNoise {
            kernel: vec![0.25, 0.5, 0.25],
            sigma: 0.04,
        };
        assert_eq!(DegradationOracle::from_description(&k.describe()).unwrap(), k);
    }

    #[test]
    fn smooth_images_in_range() {
        let img = smooth_image(3, 64, 64, &mut Rng::new(3));
        assert!(img.data().iter().all(|&v| (0.2..=0.8).contains(&v)));
    }

    #[test]
    fn split_keeps_tail() {
        let o = DegradationOracle::WhiteNoise { sigma: 0.04 };
        let c = synth_corpus(&o, 10, 10, 1, 8, 1).unwrap();
        let (train, held) = c.split_heldout(0.2).unwrap();
        assert_eq!((train.clean().len(), held.clean().len()), (8, 2));
        assert_eq!(held.degraded()[1], c.degraded()[9]);
        let cap = EvalCapability::for_evaluation();
        assert_eq!(held.hidden_sources(&cap).unwrap()[1], c.hidden_sources(&cap).unwrap()[9]);
    }

    #[test]
    fn batch_normalization_uses_channel_planes() {
        let stats = ChannelStats {
            mean: vec![1.0, 2.0],
            std: vec![2.0, 4.0],
        };
        let img = Tensor::new(&[2, 2, 1, 2], vec![3.0, 5.0, 6.0, 10.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        let n = stats.normalize(&img);
        assert_eq!(n.data(), &[1.0, 2.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(stats.denormalize(&n), img);
        let single = img.narrow_batch(0, 1).unwrap().reshape(&[2, 1, 2]).unwrap();
        assert_eq!(stats.normalize(&single).data(), &n.data()[..4]);
    }
}
