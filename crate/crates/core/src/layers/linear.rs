use crate::scalar::{MatRef, Scalar};
use crate::tensor::Tensor;

/// `y = x·Wᵀ + b` with `x: N×in`, `W: out×in`.
pub(super) fn forward<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Tensor<S> {
    let (n, fin) = x.dims2().expect("validated");
    let fout = weight.shape()[0];
    let mut y = Tensor::zeros(&[n, fout]);
    S::gemm_raw(n, fin, fout, MatRef::row_major(x.data(), fin), MatRef::transposed(weight.data(), fin), S::zero(), y.data_mut());
    for row in y.data_mut().chunks_mut(fout) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    y
}

pub(super) fn backward<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, grad: &Tensor<S>) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (n, fin) = x.dims2().expect("validated");
    let fout = weight.shape()[0];
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[fout]);
    S::gemm_raw(n, fout, fin, MatRef::row_major(grad.data(), fout), MatRef::row_major(weight.data(), fin), S::zero(), gx.data_mut());
    S::gemm_raw(fout, n, fin, MatRef::transposed(grad.data(), fout), MatRef::row_major(x.data(), fin), S::zero(), gw.data_mut());
    for row in grad.data().chunks(fout) {
        for (acc, &g) in gb.data_mut().iter_mut().zip(row) {
            *acc += g;
        }
    }
    (gx, gw, gb)
}
