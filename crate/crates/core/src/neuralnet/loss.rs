use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::gridmap::Label;

/// Per-class loss weights, indexed by class (0 = static, 1 = dynamic).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    weights: [f64; 2],
}

impl ClassWeights {
    pub fn new(weights: &[f64]) -> Result<Self> {
        match *weights {
            [a, b] if a.is_finite() && b.is_finite() && a >= 0.0 && b >= 0.0 => Ok(ClassWeights { weights: [a, b] }),
            [_, _] => Err(Error::arg(format!("class weights must be finite and >= 0, got {weights:?}"))),
            _ => Err(Error::arg(format!("expected 2 class weights, got {}", weights.len()))),
        }
    }

    /// Weight `dynamic` on moving cells, 1 on everything else.
    pub fn dynamic(dynamic: f64) -> Result<Self> {
        Self::new(&[1.0, dynamic])
    }

    pub fn uniform() -> Self {
        ClassWeights { weights: [1.0, 1.0] }
    }

    pub fn get(&self, label: Label) -> f64 {
        self.weights[label as usize]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

fn check_logits<F: Real>(logits: &Tensor<F>, labels: &[Label]) -> Result<(usize, usize, usize)> {
    let (n, k, h, w) = logits.dims4()?;
    if k != 2 {
        return Err(Error::shape(format!("expected 2 classes, logits have {k}")));
    }
    if labels.len() != n * h * w {
        return Err(Error::shape(format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    Ok((n, k, h * w))
}

/// Per-pixel `(-log p_y, p - onehot(y))` with a log-sum-exp stabilised
/// softmax over the class axis.
#[inline]
fn pixel_terms<F: Real>(z: [F; 2], y: usize) -> (F, [F; 2]) {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let sum = e0 + e1;
    let lse = m + sum.ln();
    let nll = lse - z[y];
    let mut g = [e0 / sum, e1 / sum];
    g[y] = g[y] - F::one();
    (nll, g)
}

fn loss_impl<F: Real>(logits: &Tensor<F>, labels: &[Label], weights: Option<&ClassWeights>) -> Result<(F, Tensor<F>)> {
    let (n, k, hw) = check_logits(logits, labels)?;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = F::zero();
    let z = logits.data();
    for s in 0..n {
        for p in 0..hw {
            let y = labels[s * hw + p] as usize;
            let i0 = s * k * hw + p;
            let i1 = i0 + hw;
            let (nll, g) = pixel_terms([z[i0], z[i1]], y);
            match weights {
                Some(cw) => {
                    let c = F::from_f64(cw.weights[y]);
                    loss += c * nll;
                    grad.data_mut()[i0] = c * g[0];
                    grad.data_mut()[i1] = c * g[1];
                }
                None => {
                    loss += nll;
                    grad.data_mut()[i0] = g[0];
                    grad.data_mut()[i1] = g[1];
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Class-weighted multinomial logistic loss summed over pixels:
/// `-Σ_i c[y_i] log softmax(z_i)[y_i]`, with gradient
/// `c[y_i] (softmax(z_i) - onehot(y_i))`.
pub fn weighted_softmax_loss<F: Real>(logits: &Tensor<F>, labels: &[Label], weights: &ClassWeights) -> Result<(F, Tensor<F>)> {
    loss_impl(logits, labels, Some(weights))
}

/// Plain multinomial logistic loss, summed over pixels.
pub fn softmax_loss<F: Real>(logits: &Tensor<F>, labels: &[Label]) -> Result<(F, Tensor<F>)> {
    loss_impl(logits, labels, None)
}

/// Converts raw class indices, rejecting anything outside `{0, 1}`.
pub fn labels_from_indices(indices: &[u8]) -> Result<Vec<Label>> {
    indices
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            Label::from_index(v as usize).ok_or_else(|| Error::arg(format!("label {v} at pixel {i} not in {{0, 1}}")))
        })
        .collect()
}

/// Softmax over the class axis of `[N, K, H, W]` logits.
pub fn softmax<F: Real>(logits: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    let mut out = Tensor::zeros(logits.shape());
    for s in 0..n {
        for p in 0..hw {
            let base = s * k * hw + p;
            let m = (0..k).map(|c| logits.data()[base + c * hw]).fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for c in 0..k {
                let e = (logits.data()[base + c * hw] - m).exp();
                out.data_mut()[base + c * hw] = e;
                sum += e;
            }
            for c in 0..k {
                let v = out.data()[base + c * hw] / sum;
                out.data_mut()[base + c * hw] = v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_pixel(z0: f64, z1: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1, 2, 1, 1], vec![z0, z1]).unwrap()
    }

    #[test]
    fn confident_correct_pixel_has_zero_loss() {
        let (loss, _) = softmax_loss(&one_pixel(0.0, 1000.0), &[Label::Dynamic]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn equal_logits_cost_ln2() {
        let (loss, grad) = weighted_softmax_loss(&one_pixel(0.3, 0.3), &[Label::Dynamic], &ClassWeights::dynamic(1.0).unwrap()).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad.data(), &[0.5, -0.5]);

        let (loss40, grad40) = weighted_softmax_loss(&one_pixel(0.3, 0.3), &[Label::Dynamic], &ClassWeights::dynamic(40.0).unwrap()).unwrap();
        assert!((loss40 - 40.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss40 - 27.725_887_222_397_81).abs() < 1e-9);
        assert_eq!(grad40.data(), &[20.0, -20.0]);
    }

    #[test]
    fn uniform_weights_match_plain_loss_bitwise() {
        let logits = Tensor::<f64>::from_vec(&[1, 2, 2, 2], vec![0.1, -2.0, 3.5, 0.0, 1.0, 1.5, -0.5, 7.0]).unwrap();
        let labels = [Label::Static, Label::Dynamic, Label::Dynamic, Label::Static];
        let (a, ga) = weighted_softmax_loss(&logits, &labels, &ClassWeights::uniform()).unwrap();
        let (b, gb) = softmax_loss(&logits, &labels).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(ga, gb);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        assert!(labels_from_indices(&[0, 1, 2]).is_err());
        assert_eq!(labels_from_indices(&[0, 1]).unwrap(), vec![Label::Static, Label::Dynamic]);
    }

    #[test]
    fn class_weight_validation() {
        assert!(ClassWeights::new(&[1.0]).is_err());
        assert!(ClassWeights::new(&[1.0, -1.0]).is_err());
        assert!(ClassWeights::new(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Tensor::<f64>::from_vec(&[1, 2, 1, 3], vec![0.0, 5.0, -3.0, 1.0, -5.0, 100.0]).unwrap();
        let p = softmax(&logits).unwrap();
        for i in 0..3 {
            assert!((p.data()[i] + p.data()[3 + i] - 1.0).abs() < 1e-12);
        }
    }
}
