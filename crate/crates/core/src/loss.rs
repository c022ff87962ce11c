//! Training objective: masked L1 plus edge-aware smoothness.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, Tape, Tensor, Var};
use crate::DEPTH_CAP;

/// Pixels with `0 < Y* ≤ cap`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidMask {
    pub shape: (usize, usize),
    pub valid: Vec<bool>,
}

impl ValidMask {
    pub fn from_target<T: Element>(target: &Tensor<T>) -> Result<Self> {
        Self::with_cap(target, DEPTH_CAP)
    }

    pub fn with_cap<T: Element>(target: &Tensor<T>, cap: f64) -> Result<Self> {
        let s = target.shape();
        let (h, w) = match s {
            [h, w] | [h, w, 1] => (*h, *w),
            _ => return Err(Error::arg("valid_mask", format!("expected [H,W], got {s:?}"))),
        };
        let valid = target
            .data()
            .iter()
            .map(|&v| {
                let v = v.as_f64();
                v > 0.0 && v <= cap
            })
            .collect();
        Ok(ValidMask { shape: (h, w), valid })
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn as_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.shape.0, self.shape.1], |i| {
            if self.valid[i] {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 1.0, smooth: 0.1 }
    }
}

fn as_map<T: Element>(tape: &mut Tape<T>, y: Var) -> Result<(Var, usize, usize)> {
    let s = tape.shape(y).to_vec();
    match s.as_slice() {
        [h, w] => Ok((y, *h, *w)),
        [h, w, 1] => Ok((tape.reshape(y, &[*h, *w])?, *h, *w)),
        _ => Err(Error::arg("loss", format!("prediction must be [H,W], got {s:?}"))),
    }
}

/// Mean `|Y − Y*|` over valid pixels.
pub fn l1_loss<T: Element>(tape: &mut Tape<T>, y: Var, target: &Tensor<T>, mask: &ValidMask) -> Result<Var> {
    let (y, h, w) = as_map(tape, y)?;
    if target.numel() != h * w || mask.shape != (h, w) {
        return Err(Error::shape("l1_loss", &[h, w], target.shape()));
    }
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let t = tape.constant(target.reshaped(&[h, w])?);
    let m = tape.constant(mask.as_tensor());
    let d = tape.sub(y, t)?;
    let d = tape.abs(d)?;
    let d = tape.mul(d, m)?;
    let s = tape.sum(d)?;
    tape.scale(s, 1.0 / n as f64)
}

/// Per-pixel `exp(−mean_c |∂I|)` along `axis`, last row/column included.
pub fn edge_weights<T: Element>(image: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    let (h, w, c) = match s {
        [h, w, c] => (*h, *w, *c),
        [h, w] => (*h, *w, 1),
        _ => return Err(Error::arg("smoothness_loss", format!("image must be [H,W,C], got {s:?}"))),
    };
    let g = kernels::spatial_diff(image.data(), h, w, c, axis);
    let inv = T::of(1.0 / c as f64);
    let data = g
        .chunks(c)
        .map(|px| (-(px.iter().map(|v| v.abs()).sum::<T>() * inv)).exp())
        .collect();
    Tensor::new(&[h, w], data)
}

/// Mean over all pixels of `|∂Y/∂u|·e^{−|∂I/∂u|} + |∂Y/∂v|·e^{−|∂I/∂v|}`,
/// using forward differences with a zero last row/column.
pub fn smoothness_loss<T: Element>(tape: &mut Tape<T>, y: Var, image: &Tensor<T>) -> Result<Var> {
    let (y, h, w) = as_map(tape, y)?;
    if image.shape()[..2] != [h, w] {
        return Err(Error::shape("smoothness_loss", &[h, w], image.shape()));
    }
    let mut terms = Vec::with_capacity(2);
    for axis in [1, 0] {
        let wgt = tape.constant(edge_weights(image, axis)?);
        let g = tape.spatial_gradient(y, axis)?;
        let g = tape.abs(g)?;
        terms.push(tape.mul(g, wgt)?);
    }
    let sum = tape.add(terms[0], terms[1])?;
    tape.mean(sum)
}

/// `ω₁·L1 + ω₂·L_smooth`.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    y: Var,
    target: &Tensor<T>,
    image: &Tensor<T>,
    mask: &ValidMask,
    weights: LossWeights,
) -> Result<Var> {
    let l1 = l1_loss(tape, y, target, mask)?;
    let l1 = tape.scale(l1, weights.l1)?;
    if weights.smooth == 0.0 {
        return Ok(l1);
    }
    let sm = smoothness_loss(tape, y, image)?;
    let sm = tape.scale(sm, weights.smooth)?;
    tape.add(l1, sm)
}
