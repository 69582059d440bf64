use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise softmax of an `N×K` tensor.
pub fn softmax<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
        let mut z = S::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

/// Batch-mean cross-entropy against target distributions, with its logit gradient.
pub fn softmax_cross_entropy<S: Scalar>(logits: &Tensor<S>, target: &Tensor<S>) -> Result<(S, Tensor<S>)> {
    let (n, k) = logits.dims2()?;
    if target.shape() != logits.shape() {
        return Err(shape_err!("cross-entropy target {:?} vs logits {:?}", target.shape(), logits.shape()));
    }
    let p = softmax(logits)?;
    let inv_n = S::one() / S::lit(n as f64);
    let mut loss = S::zero();
    for (lrow, trow) in logits.data().chunks(k).zip(target.data().chunks(k)) {
        let m = lrow.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
        let lse = m + lrow.iter().fold(S::zero(), |a, &v| a + (v - m).exp()).ln();
        for (&l, &t) in lrow.iter().zip(trow) {
            loss -= t * (l - lse);
        }
    }
    let grad = p.zip_map(target, |pi, ti| (pi - ti) * inv_n)?;
    Ok((loss * inv_n, grad))
}

/// Mean squared error with its gradient.
pub fn mse_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<(S, Tensor<S>)> {
    pred.same_shape(target)?;
    let inv = S::one() / S::lit(pred.len().max(1) as f64);
    let diff = pred.sub(target)?;
    let loss = diff.data().iter().fold(S::zero(), |a, &d| a + d * d) * inv;
    Ok((loss, diff.scale(S::lit(2.0) * inv)))
}
