use crate::scalar::Scalar;

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

const GELU_K: f64 = 0.044_715;

fn gelu_inner<S: Scalar>(x: S) -> S {
    S::lit((2.0 / std::f64::consts::PI).sqrt()) * (x + S::lit(GELU_K) * x * x * x)
}

/// Tanh approximation of GELU.
pub fn gelu<S: Scalar>(x: S) -> S {
    S::lit(0.5) * x * (S::one() + gelu_inner(x).tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let t = gelu_inner(x).tanh();
    let du = S::lit((2.0 / std::f64::consts::PI).sqrt()) * (S::one() + S::lit(3.0 * GELU_K) * x * x);
    S::lit(0.5) * (S::one() + t) + S::lit(0.5) * x * (S::one() - t * t) * du
}
