use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(super) fn avg_pool_forward<S: Scalar>(x: &Tensor<S>, k: usize, out_shape: &[usize]) -> Tensor<S> {
    let (n, c, h, w) = x.dims4().expect("validated");
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let inv = S::one() / S::lit((k * k) as f64);
    let mut y = Tensor::zeros(out_shape);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut y.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = S::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        acc += src[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
    y
}

pub(super) fn avg_pool_backward<S: Scalar>(in_shape: &[usize], grad: &Tensor<S>, k: usize) -> Tensor<S> {
    let (_, _, oh, ow) = grad.dims4().expect("validated");
    let (h, w) = (in_shape[2], in_shape[3]);
    let inv = S::one() / S::lit((k * k) as f64);
    let mut gx = Tensor::zeros(in_shape);
    for p in 0..in_shape[0] * in_shape[1] {
        let g = &grad.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = g[(y / k) * ow + x / k] * inv;
            }
        }
    }
    gx
}

pub(super) fn gap_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, w) = x.dims4().expect("validated");
    let plane = h * w;
    let inv = S::one() / S::lit(plane as f64);
    Tensor::from_fn(&[n, c], |p| x.data()[p * plane..(p + 1) * plane].iter().fold(S::zero(), |a, &v| a + v) * inv)
}

pub(super) fn gap_backward<S: Scalar>(in_shape: &[usize], grad: &Tensor<S>) -> Tensor<S> {
    let plane = in_shape[2] * in_shape[3];
    let inv = S::one() / S::lit(plane as f64);
    Tensor::from_fn(in_shape, |i| grad.data()[i / plane] * inv)
}

pub(super) fn upsample_forward<S: Scalar>(x: &Tensor<S>, s: usize, out_shape: &[usize]) -> Tensor<S> {
    let (n, c, h, w) = x.dims4().expect("validated");
    let ow = w * s;
    let mut out = Tensor::zeros(out_shape);
    for (src, dst) in x.data().chunks(w).zip(out.data_mut().chunks_mut(ow * s)).take(n * c * h) {
        let (first, rest) = dst.split_at_mut(ow);
        for (o, v) in first.chunks_mut(s).zip(src) {
            o.fill(*v);
        }
        for r in rest.chunks_mut(ow) {
            r.copy_from_slice(first);
        }
    }
    out
}

pub(super) fn upsample_backward<S: Scalar>(in_shape: &[usize], grad: &Tensor<S>, s: usize) -> Tensor<S> {
    let (_, _, oh, ow) = grad.dims4().expect("validated");
    let (h, w) = (in_shape[2], in_shape[3]);
    let mut gx = Tensor::zeros(in_shape);
    for p in 0..in_shape[0] * in_shape[1] {
        let g = &grad.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / s) * w + x / s] += g[y * ow + x];
            }
        }
    }
    gx
}

/// Per-output-index source taps `(i0, i1, w0, w1)` for half-pixel bilinear sampling.
fn taps<S: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, S, S)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, S::lit(1.0 - frac), S::lit(frac))
        })
        .collect()
}

pub(super) fn bilinear_forward<S: Scalar>(x: &Tensor<S>, oh: usize, ow: usize) -> Tensor<S> {
    let (n, c, h, w) = x.dims4().expect("validated");
    let ty = taps::<S>(h, oh);
    let tx = taps::<S>(w, ow);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut y.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    y
}

pub(super) fn bilinear_backward<S: Scalar>(in_shape: &[usize], grad: &Tensor<S>, oh: usize, ow: usize) -> Tensor<S> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let ty = taps::<S>(h, oh);
    let tx = taps::<S>(w, ow);
    let mut gx = Tensor::zeros(in_shape);
    for p in 0..in_shape[0] * in_shape[1] {
        let g = &grad.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                dst[y0 * w + x0] += wy0 * wx0 * v;
                dst[y0 * w + x1] += wy0 * wx1 * v;
                dst[y1 * w + x0] += wy1 * wx0 * v;
                dst[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    gx
}
