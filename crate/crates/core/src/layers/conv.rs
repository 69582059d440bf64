use crate::scalar::{MatRef, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source coordinate along one axis, or `None` when it falls in the padding.
    #[inline]
    fn src(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + kk) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

impl Geom {
    /// Output columns `[lo, hi)` whose source column `ox·stride + kx − pad` lies inside the image.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx { (self.pad - kx).div_ceil(self.stride) } else { 0 };
        let hi = if self.w + self.pad > kx { ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.ow) } else { 0 };
        (lo.min(hi), hi)
    }
}

fn im2col<S: Scalar>(img: &[S], g: Geom, cols: &mut [S]) {
    let p = g.cols();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.src(oy, ky, g.h) {
                        None => line.fill(S::zero()),
                        Some(iy) => {
                            let src = &img[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                            line[..lo].fill(S::zero());
                            line[hi..].fill(S::zero());
                            if lo < hi {
                                let first = lo * g.stride + kx - g.pad;
                                if g.stride == 1 {
                                    line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                                } else {
                                    for (v, &x) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                                        *v = x;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(cols: &[S], g: Geom, img: &mut [S]) {
    let p = g.cols();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_cols(kx);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let dst = &mut img[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn add_channel_bias<S: Scalar>(out: &mut [S], bias: &[S], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

fn channel_sums<S: Scalar>(grad: &Tensor<S>, gb: &mut [S]) {
    let (n, c, h, w) = grad.dims4().expect("checked by caller");
    let plane = h * w;
    for i in 0..n {
        for (ch, acc) in gb.iter_mut().enumerate().take(c) {
            let base = (i * c + ch) * plane;
            *acc += grad.data()[base..base + plane].iter().fold(S::zero(), |a, &v| a + v);
        }
    }
}

pub(super) fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    k: usize,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
) -> Tensor<S> {
    let (n, c, h, w) = x.dims4().expect("validated");
    let (oc, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let g = Geom { c, h, w, k, stride, pad, oh, ow };
    let (rows, p) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(out_shape);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![S::zero(); rows * p] };
    for i in 0..n {
        let img = &x.data()[i * c * h * w..(i + 1) * c * h * w];
        let b = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[i * oc * p..(i + 1) * oc * p];
        S::gemm_raw(oc, rows, p, MatRef::row_major(weight.data(), rows), MatRef::row_major(b, p), S::zero(), dst);
        add_channel_bias(dst, bias.data(), p);
    }
    out
}

pub(super) fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (n, c, h, w) = x.dims4().expect("validated");
    let (_, oc, oh, ow) = grad_out.dims4().expect("validated");
    let g = Geom { c, h, w, k, stride, pad, oh, ow };
    let (rows, p) = (g.rows(), g.cols());
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[oc]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![S::zero(); rows * p] };
    let mut gcols = vec![S::zero(); rows * p];
    for i in 0..n {
        let img = &x.data()[i * c * h * w..(i + 1) * c * h * w];
        let go = &grad_out.data()[i * oc * p..(i + 1) * oc * p];
        let b = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        S::gemm_raw(oc, p, rows, MatRef::row_major(go, p), MatRef::transposed(b, p), S::one(), gw.data_mut());
        let gxi = &mut gx.data_mut()[i * c * h * w..(i + 1) * c * h * w];
        if g.is_pointwise() {
            S::gemm_raw(rows, oc, p, MatRef::transposed(weight.data(), rows), MatRef::row_major(go, p), S::zero(), gxi);
        } else {
            S::gemm_raw(rows, oc, p, MatRef::transposed(weight.data(), rows), MatRef::row_major(go, p), S::zero(), &mut gcols);
            col2im(&gcols, g, gxi);
        }
    }
    channel_sums(grad_out, gb.data_mut());
    (gx, gw, gb)
}

pub(super) fn conv_t2d_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    k: usize,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
) -> Tensor<S> {
    let (n, ic, h, w) = x.dims4().expect("validated");
    let (oc, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    // The transposed convolution scatters through the geometry of the forward
    // convolution that maps the output back onto the input grid.
    let g = Geom { c: oc, h: oh, w: ow, k, stride, pad, oh: h, ow: w };
    let (rows, p) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(out_shape);
    let mut cols = vec![S::zero(); rows * p];
    for i in 0..n {
        let xi = &x.data()[i * ic * p..(i + 1) * ic * p];
        S::gemm_raw(rows, ic, p, MatRef::transposed(weight.data(), rows), MatRef::row_major(xi, p), S::zero(), &mut cols);
        let dst = &mut out.data_mut()[i * oc * oh * ow..(i + 1) * oc * oh * ow];
        col2im(&cols, g, dst);
        add_channel_bias(dst, bias.data(), oh * ow);
    }
    out
}

pub(super) fn conv_t2d_backward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (n, ic, h, w) = x.dims4().expect("validated");
    let (_, oc, oh, ow) = grad_out.dims4().expect("validated");
    let g = Geom { c: oc, h: oh, w: ow, k, stride, pad, oh: h, ow: w };
    let (rows, p) = (g.rows(), g.cols());
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[oc]);
    let mut gcols = vec![S::zero(); rows * p];
    for i in 0..n {
        let go = &grad_out.data()[i * oc * oh * ow..(i + 1) * oc * oh * ow];
        im2col(go, g, &mut gcols);
        let xi = &x.data()[i * ic * p..(i + 1) * ic * p];
        // dX = W · im2col(dY)
        S::gemm_raw(ic, rows, p, MatRef::row_major(weight.data(), rows), MatRef::row_major(&gcols, p), S::zero(), &mut gx.data_mut()[i * ic * p..(i + 1) * ic * p]);
        // dW += X · im2col(dY)ᵀ
        S::gemm_raw(ic, p, rows, MatRef::row_major(xi, p), MatRef::transposed(&gcols, p), S::one(), gw.data_mut());
    }
    channel_sums(grad_out, gb.data_mut());
    (gx, gw, gb)
}
