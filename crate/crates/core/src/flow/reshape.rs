//! Volume-preserving rearrangements between flow levels.
//!
//! Squeeze moves each 2×2 block into channels: output channel `4c + k`
//! holds input channel `c` at block offset `k`, ordered top-left,
//! top-right, bottom-left, bottom-right.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{Error, Result};

fn squeeze_index(n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    let (ho, wo) = (h / 2, w / 2);
    let mut index = Vec::with_capacity(n * c * h * w);
    for s in 0..n {
        for ch in 0..c {
            for k in 0..4 {
                let (dy, dx) = (k / 2, k % 2);
                for i in 0..ho {
                    for j in 0..wo {
                        index.push(((s * c + ch) * h + 2 * i + dy) * w + 2 * j + dx);
                    }
                }
            }
        }
    }
    index
}

/// `[N,C,H,W] → [N,4C,H/2,W/2]`.
pub fn squeeze(x: Var<'_>) -> Result<Var<'_>> {
    let shape = x.shape();
    let &[n, c, h, w] = shape.as_slice() else {
        return Err(Error::invalid(format!("squeeze of shape {shape:?}")));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("squeeze needs even spatial extent, got {h}×{w}")));
    }
    x.tape()
        .gather(x, Rc::new(squeeze_index(n, c, h, w)), &[n, 4 * c, h / 2, w / 2])
}

/// `[N,4C,H,W] → [N,C,2H,2W]`, the exact inverse of [`squeeze`].
pub fn unsqueeze(x: Var<'_>) -> Result<Var<'_>> {
    let shape = x.shape();
    let &[n, c4, h, w] = shape.as_slice() else {
        return Err(Error::invalid(format!("unsqueeze of shape {shape:?}")));
    };
    if c4 % 4 != 0 {
        return Err(Error::invalid(format!("unsqueeze needs channels divisible by 4, got {c4}")));
    }
    let c = c4 / 4;
    let fwd = squeeze_index(n, c, 2 * h, 2 * w);
    let mut inv = vec![0; fwd.len()];
    for (o, &i) in fwd.iter().enumerate() {
        inv[i] = o;
    }
    x.tape().gather(x, Rc::new(inv), &[n, c, 2 * h, 2 * w])
}

/// Splits channels in half: `(kept, latent)`.
pub fn split(x: Var<'_>) -> Result<(Var<'_>, Var<'_>)> {
    let shape = x.shape();
    if shape.len() != 4 || !shape[1].is_multiple_of(2) {
        return Err(Error::invalid(format!("split needs even channel count, got {shape:?}")));
    }
    let half = shape[1] / 2;
    Ok((x.narrow_channels(0, half)?, x.narrow_channels(half, half)?))
}

pub fn unsplit<'t>(kept: Var<'t>, latent: Var<'t>) -> Result<Var<'t>> {
    kept.tape().concat(&[kept, latent], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    #[test]
    fn squeeze_block_order() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap());
        let y = squeeze(x).unwrap();
        assert_eq!(y.shape(), vec![1, 4, 2, 2]);
        let want = [0., 2., 8., 10., 1., 3., 9., 11., 4., 6., 12., 14., 5., 7., 13., 15.];
        assert_eq!(y.value().data(), &want);
        assert_eq!(y.value().sum(), 120.0);
    }

    #[test]
    fn squeeze_unsqueeze_exact() {
        let tape = Tape::new();
        let t = Tensor::randn(&[2, 3, 4, 6], 1.0, &mut Rng::new(1));
        let x = tape.constant(t.clone());
        assert_eq!(*unsqueeze(squeeze(x).unwrap()).unwrap().value(), t);
        let s = tape.constant(Tensor::randn(&[2, 8, 2, 3], 1.0, &mut Rng::new(2)));
        assert_eq!(*squeeze(unsqueeze(s).unwrap()).unwrap().value(), *s.value());
    }

    #[test]
    fn squeeze_rejects_odd() {
        let tape = Tape::new();
        assert!(squeeze(tape.constant(Tensor::zeros(&[1, 1, 3, 4]))).is_err());
        assert!(unsqueeze(tape.constant(Tensor::zeros(&[1, 3, 2, 2]))).is_err());
    }

    #[test]
    fn split_slices_channels() {
        let tape = Tape::new();
        let data: Vec<f64> = (1..=4).flat_map(|c| [c as f64; 4]).collect();
        let t = Tensor::new(&[1, 4, 2, 2], data).unwrap();
        let (kept, latent) = split(tape.constant(t.clone())).unwrap();
        assert_eq!(latent.shape(), vec![1, 2, 2, 2]);
        assert_eq!(kept.value().data(), &[1., 1., 1., 1., 2., 2., 2., 2.]);
        assert_eq!(latent.value().data(), &[3., 3., 3., 3., 4., 4., 4., 4.]);
        assert_eq!(*unsplit(kept, latent).unwrap().value(), t);
        assert!(split(tape.constant(Tensor::zeros(&[1, 3, 2, 2]))).is_err());
    }
}
