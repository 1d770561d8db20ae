use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DICE_SMOOTHING: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 1.0, dice: 1.0 }
    }
}

/// Graph node of the weighted loss plus its detached parts.
#[derive(Clone, Copy, Debug)]
pub struct Loss {
    pub total: Var,
    pub ce: f64,
    pub dice: f64,
    /// Set when every pixel carried the ignore label; the loss is then zero.
    pub all_ignored: bool,
}

/// Labels of a batch flattened to match `N x K x H x W` logits.
#[derive(Clone, Debug)]
struct Targets {
    n: usize,
    k: usize,
    hw: usize,
    labels: Vec<u8>,
    counts: Vec<f64>,
    valid: usize,
}

impl Targets {
    fn new(shape: &[usize], labels: &[LabelMap]) -> Result<Self> {
        let &[n, k, h, w] = shape else {
            return Err(Error::dim(format!("logits must be NxKxHxW, got {shape:?}")));
        };
        if labels.len() != n {
            return Err(Error::dim(format!("{n} logit maps but {} label maps", labels.len())));
        }
        let mut flat = Vec::with_capacity(n * h * w);
        let mut counts = vec![0.0; k];
        for lm in labels {
            if (lm.height(), lm.width()) != (h, w) {
                return Err(Error::dim(format!(
                    "labels {}x{} vs logits {h}x{w}",
                    lm.height(),
                    lm.width()
                )));
            }
            lm.validate(k)?;
            for &c in lm.data().iter().filter(|&&c| c != IGNORE) {
                counts[c as usize] += 1.0;
            }
            flat.extend_from_slice(lm.data());
        }
        let valid = counts.iter().sum::<f64>() as usize;
        Ok(Self { n, k, hw: h * w, labels: flat, counts, valid })
    }

    /// Cross-entropy, dice loss and, if requested, the gradient of
    /// `wce * ce + wdice * dice` with respect to the logits.
    fn evaluate<F: Scalar>(&self, x: &[F], weights: LossWeights, want_grad: bool) -> (f64, f64, Option<Vec<F>>) {
        let (n, k, hw) = (self.n, self.k, self.hw);
        let mut prob = vec![0.0f64; x.len()];
        let mut present: Vec<bool> = self.counts.iter().map(|&c| c > 0.0).collect();
        let mut ce = 0.0;
        let mut inter = vec![0.0; k];
        let mut psum = vec![0.0; k];
        for b in 0..n {
            for p in 0..hw {
                let y = self.labels[b * hw + p];
                if y == IGNORE {
                    continue;
                }
                let at = |c: usize| (b * k + c) * hw + p;
                let (mut m, mut best) = (f64::NEG_INFINITY, 0);
                for c in 0..k {
                    let v = x[at(c)].to_f64_lossy();
                    if v > m {
                        (m, best) = (v, c);
                    }
                }
                present[best] = true;
                let mut z = 0.0;
                for c in 0..k {
                    let e = (x[at(c)].to_f64_lossy() - m).exp();
                    prob[at(c)] = e;
                    z += e;
                }
                ce -= x[at(y as usize)].to_f64_lossy() - m - z.ln();
                for c in 0..k {
                    prob[at(c)] /= z;
                    psum[c] += prob[at(c)];
                }
                inter[y as usize] += prob[at(y as usize)];
            }
        }
        let valid = self.valid as f64;
        ce /= valid;
        let s = DICE_SMOOTHING;
        let n_present = present.iter().filter(|&&v| v).count() as f64;
        let den: Vec<f64> = (0..k).map(|c| psum[c] + self.counts[c] + s).collect();
        let num: Vec<f64> = (0..k).map(|c| 2.0 * inter[c] + s).collect();
        let dice = 1.0
            - (0..k)
                .filter(|&c| present[c])
                .map(|c| num[c] / den[c])
                .sum::<f64>()
                / n_present;
        if !want_grad {
            return (ce, dice, None);
        }
        let mut grad = vec![F::zero(); x.len()];
        let mut a = vec![0.0; k];
        for b in 0..n {
            for p in 0..hw {
                let y = self.labels[b * hw + p];
                if y == IGNORE {
                    continue;
                }
                let at = |c: usize| (b * k + c) * hw + p;
                // a_c = d dice / d p_c at this pixel.
                for c in 0..k {
                    a[c] = if present[c] {
                        let t = if c == y as usize { 1.0 } else { 0.0 };
                        -(2.0 * t * den[c] - num[c]) / (den[c] * den[c] * n_present)
                    } else {
                        0.0
                    };
                }
                let mean_a: f64 = (0..k).map(|c| prob[at(c)] * a[c]).sum();
                for c in 0..k {
                    let pc = prob[at(c)];
                    let t = if c == y as usize { 1.0 } else { 0.0 };
                    let g = weights.ce * (pc - t) / valid + weights.dice * pc * (a[c] - mean_a);
                    grad[at(c)] = F::from_f64_lossy(g);
                }
            }
        }
        (ce, dice, Some(grad))
    }
}

/// Cross-entropy averaged over scored pixels plus soft dice averaged over
/// the classes present in the target or the argmax prediction.
pub fn seg_loss<F: Scalar>(
    g: &mut Graph<F>,
    logits: Var,
    labels: &[LabelMap],
    weights: LossWeights,
) -> Result<Loss> {
    let targets = Targets::new(g.shape(logits), labels)?;
    if targets.valid == 0 {
        let total = g.sum(logits)?;
        let total = g.scale(total, F::zero())?;
        return Ok(Loss {
            total,
            ce: 0.0,
            dice: 0.0,
            all_ignored: true,
        });
    }
    let (ce, dice, grad) = targets.evaluate(g.value(logits).data(), weights, true);
    let grad = grad.expect("requested");
    let total = weights.ce * ce + weights.dice * dice;
    let total = g.custom(
        logits,
        |_| Tensor::scalar(F::from_f64_lossy(total)),
        move |_, up| grad.iter().map(|&v| v * up[0]).collect(),
    )?;
    Ok(Loss {
        total,
        ce,
        dice,
        all_ignored: false,
    })
}
