use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::GROUP_NORM_EPS;

struct GroupStats<S> {
    mean: S,
    inv_std: S,
}

fn stats<S: Scalar>(v: &[S]) -> GroupStats<S> {
    let m = S::lit(v.len() as f64);
    let mean = v.iter().fold(S::zero(), |a, &x| a + x) / m;
    let var = v.iter().fold(S::zero(), |a, &x| a + (x - mean) * (x - mean)) / m;
    GroupStats { mean, inv_std: S::one() / (var + S::lit(GROUP_NORM_EPS)).sqrt() }
}

pub(super) fn group_norm_forward<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>, groups: usize) -> Tensor<S> {
    let (n, c, h, w) = x.dims4().expect("validated");
    let cpg = c / groups;
    let plane = h * w;
    let mut y = Tensor::zeros(x.shape());
    for i in 0..n {
        for g in 0..groups {
            let start = (i * c + g * cpg) * plane;
            let end = start + cpg * plane;
            let st = stats(&x.data()[start..end]);
            for cl in 0..cpg {
                let ch = g * cpg + cl;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                let base = start + cl * plane;
                for j in base..base + plane {
                    y.data_mut()[j] = (x.data()[j] - st.mean) * st.inv_std * ga + be;
                }
            }
        }
    }
    y
}

pub(super) fn group_norm_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    grad: &Tensor<S>,
    groups: usize,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (n, c, h, w) = x.dims4().expect("validated");
    let cpg = c / groups;
    let plane = h * w;
    let m = S::lit((cpg * plane) as f64);
    let mut gx = Tensor::zeros(x.shape());
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    for i in 0..n {
        for g in 0..groups {
            let start = (i * c + g * cpg) * plane;
            let end = start + cpg * plane;
            let st = stats(&x.data()[start..end]);
            // Σ dx̂ and Σ dx̂·x̂ over the group
            let mut sum_d = S::zero();
            let mut sum_dx = S::zero();
            for cl in 0..cpg {
                let ch = g * cpg + cl;
                let base = start + cl * plane;
                let mut acc_g = S::zero();
                let mut acc_b = S::zero();
                for j in base..base + plane {
                    let xhat = (x.data()[j] - st.mean) * st.inv_std;
                    let dy = grad.data()[j];
                    acc_g += dy * xhat;
                    acc_b += dy;
                    let d = dy * gamma.data()[ch];
                    sum_d += d;
                    sum_dx += d * xhat;
                }
                gg.data_mut()[ch] += acc_g;
                gb.data_mut()[ch] += acc_b;
            }
            let mean_d = sum_d / m;
            let mean_dx = sum_dx / m;
            for cl in 0..cpg {
                let ch = g * cpg + cl;
                let base = start + cl * plane;
                for j in base..base + plane {
                    let xhat = (x.data()[j] - st.mean) * st.inv_std;
                    let d = grad.data()[j] * gamma.data()[ch];
                    gx.data_mut()[j] = st.inv_std * (d - mean_d - xhat * mean_dx);
                }
            }
        }
    }
    (gx, gg, gb)
}
