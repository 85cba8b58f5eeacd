//! Raw slice kernels shared by the tape ops.

/// `c[m,n] = a[m,k] · b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `aᵀ` for row-major `a[m,n]`.
pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub ksize: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k` with
/// padding `pad` (input index = output index + k - pad).
#[inline]
fn tap_range(k: usize, pad: usize, extent: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (extent + pad).saturating_sub(k).min(extent);
    (lo, hi.max(lo))
}

/// Same-size 2-D convolution with zero padding `ksize / 2`, stride 1.
pub fn conv2d(input: &[f64], kernel: &[f64], bias: &[f64], d: ConvDims) -> Vec<f64> {
    let (h, w, ks) = (d.height, d.width, d.ksize);
    let pad = ks / 2;
    let plane = d.plane();
    let mut out = vec![0.0; d.batch * d.c_out * plane];
    for n in 0..d.batch {
        for co in 0..d.c_out {
            let o = &mut out[(n * d.c_out + co) * plane..][..plane];
            o.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..d.c_in {
                let src = &input[(n * d.c_in + ci) * plane..][..plane];
                for ky in 0..ks {
                    let (y0, y1) = tap_range(ky, pad, h);
                    for kx in 0..ks {
                        let wv = kernel[((co * d.c_in + ci) * ks + ky) * ks + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = tap_range(kx, pad, w);
                        for y in y0..y1 {
                            let sy = y + ky - pad;
                            let orow = &mut o[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + x0 + kx - pad..sy * w + x1 + kx - pad];
                            for (ov, sv) in orow.iter_mut().zip(srow) {
                                *ov += wv * sv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] w.r.t. input, kernel and bias given the output
/// gradient `grad`. Returns `None` for parts not requested.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad: &[f64],
    d: ConvDims,
    want_input: bool,
    want_params: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (h, w, ks) = (d.height, d.width, d.ksize);
    let pad = ks / 2;
    let plane = d.plane();
    let mut gi = want_input.then(|| vec![0.0; input.len()]);
    let mut gk = want_params.then(|| vec![0.0; kernel.len()]);
    let mut gb = want_params.then(|| vec![0.0; d.c_out]);
    for n in 0..d.batch {
        for co in 0..d.c_out {
            let g = &grad[(n * d.c_out + co) * plane..][..plane];
            if let Some(gb) = gb.as_mut() {
                gb[co] += g.iter().sum::<f64>();
            }
            for ci in 0..d.c_in {
                let base = (n * d.c_in + ci) * plane;
                for ky in 0..ks {
                    let (y0, y1) = tap_range(ky, pad, h);
                    for kx in 0..ks {
                        let (x0, x1) = tap_range(kx, pad, w);
                        let kidx = ((co * d.c_in + ci) * ks + ky) * ks + kx;
                        let wv = kernel[kidx];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = y + ky - pad;
                            let grow = &g[y * w + x0..y * w + x1];
                            let s0 = base + sy * w + x0 + kx - pad;
                            if want_params {
                                let srow = &input[s0..s0 + (x1 - x0)];
                                acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(gi) = gi.as_mut() {
                                if wv != 0.0 {
                                    let irow = &mut gi[s0..s0 + (x1 - x0)];
                                    for (iv, gv) in irow.iter_mut().zip(grow) {
                                        *iv += wv * gv;
                                    }
                                }
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gi, gk, gb)
}

/// Per-pixel channel mixing: `out[n,i,p] = Σ_j w[i,j] · x[n,j,p]`.
pub fn channel_mix(x: &[f64], w: &[f64], batch: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        let xs = &x[n * c * plane..(n + 1) * c * plane];
        let os = &mut out[n * c * plane..(n + 1) * c * plane];
        for i in 0..c {
            let orow = &mut os[i * plane..(i + 1) * plane];
            for j in 0..c {
                let wij = w[i * c + j];
                if wij == 0.0 {
                    continue;
                }
                for (o, v) in orow.iter_mut().zip(&xs[j * plane..(j + 1) * plane]) {
                    *o += wij * v;
                }
            }
        }
    }
    out
}
