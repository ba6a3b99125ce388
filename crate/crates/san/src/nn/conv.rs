//! Convolution and transposed convolution, lowered to GEMM via im2col.

use super::{join, Mode, ParamSlot, Params, Scalar};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;

pub(crate) fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// Unfold `x` `(n,c,h,w)` into a matrix `(c*kh*kw, n*oh*ow)` where column
/// `(n, oy, ox)` holds the receptive field of output position `(oy, ox)`.
/// Out-of-bounds taps stay zero (zero padding).
pub fn im2col<S: Scalar>(
    x: &Array4<S>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<S> {
    let (n, c, h, w) = x.dim();
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(w, kw, stride, pad);
    let mut cols = Array2::<S>::zeros((c * kh * kw, n * oh * ow));
    let xs = x.as_slice().expect("x must be standard layout");
    let cs = cols.as_slice_mut().unwrap();
    let col_w = n * oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_off = ((ci * kh + ki) * kw + kj) * col_w;
                for ni in 0..n {
                    let x_base = (ni * c + ci) * h * w;
                    let col_base = row_off + ni * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = x_base + iy as usize * w;
                        let dst = col_base + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cs[dst + ox] = xs[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a column matrix back onto an image grid, accumulating overlaps.
///
/// `cols` is `(c*kh*kw, n*gh*gw)` over grid positions `(gy, gx)`; target
/// pixel `(gy*stride + ki - pad, gx*stride + kj - pad)` of a `(n,c,th,tw)`
/// output receives the sum of every tap that lands on it. This is the adjoint
/// of [`im2col`], and doubles as the forward scatter of a transposed
/// convolution.
pub fn col2im<S: Scalar>(
    cols: &Array2<S>,
    n: usize,
    c: usize,
    grid: (usize, usize),
    target: (usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<S> {
    let (gh, gw) = grid;
    let (th, tw) = target;
    debug_assert_eq!(cols.dim(), (c * kh * kw, n * gh * gw));
    let mut y = Array4::<S>::zeros((n, c, th, tw));
    let cs = cols.as_slice().expect("cols must be standard layout");
    let ys = y.as_slice_mut().unwrap();
    let col_w = n * gh * gw;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_off = ((ci * kh + ki) * kw + kj) * col_w;
                for ni in 0..n {
                    let y_base = (ni * c + ci) * th * tw;
                    let col_base = row_off + ni * gh * gw;
                    for gy in 0..gh {
                        let ty = (gy * stride + ki) as isize - pad as isize;
                        if ty < 0 || ty >= th as isize {
                            continue;
                        }
                        let dst = y_base + ty as usize * tw;
                        let src = col_base + gy * gw;
                        for gx in 0..gw {
                            let tx = (gx * stride + kj) as isize - pad as isize;
                            if tx >= 0 && tx < tw as isize {
                                let t = dst + tx as usize;
                                ys[t] = ys[t] + cs[src + gx];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// 2-D convolution with zero padding.
pub struct Conv2d<S: Scalar> {
    pub weight: Array4<S>, // (out_c, in_c, kh, kw)
    pub bias: Array1<S>,
    pub grad_weight: Array4<S>,
    pub grad_bias: Array1<S>,
    stride: usize,
    pad: usize,
    cols: Option<Array2<S>>,
    in_dims: (usize, usize, usize, usize),
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        Conv2d {
            weight: super::he_normal((out_c, in_c, k, k), fan_in, slope, rng),
            bias: Array1::zeros(out_c),
            grad_weight: Array4::zeros((out_c, in_c, k, k)),
            grad_bias: Array1::zeros(out_c),
            stride,
            pad,
            cols: None,
            in_dims: (0, 0, 0, 0),
        }
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        (
            conv_out(h, kh, self.stride, self.pad),
            conv_out(w, kw, self.stride, self.pad),
        )
    }

    pub fn forward(&mut self, x: &Array4<S>, mode: Mode) -> Array4<S> {
        let (n, c, h, w) = x.dim();
        let (oc, ic, kh, kw) = self.weight.dim();
        assert_eq!(c, ic, "conv input channels");
        let (oh, ow) = self.out_shape(h, w);
        let cols = im2col(x, kh, kw, self.stride, self.pad);
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((oc, ic * kh * kw))
            .unwrap();
        let mut y2 = Array2::<S>::zeros((oc, n * oh * ow));
        general_mat_mul(S::one(), &w2, &cols, S::zero(), &mut y2);
        for (mut row, b) in y2.outer_iter_mut().zip(self.bias.iter()) {
            row += *b;
        }
        if mode == Mode::Train {
            self.cols = Some(cols);
            self.in_dims = (n, c, h, w);
        }
        let y = y2.into_shape_with_order((oc, n, oh, ow)).unwrap();
        y.permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned()
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        let cols = self.cols.take().expect("conv backward without forward");
        let (n, c, h, w) = self.in_dims;
        let (oc, ic, kh, kw) = self.weight.dim();
        let (gn, goc, oh, ow) = gy.dim();
        assert_eq!((gn, goc), (n, oc), "conv grad shape");
        let gy2 = gy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_shape_with_order((oc, n * oh * ow))
            .unwrap()
            .to_owned();
        let mut gw2 = self
            .grad_weight
            .view_mut()
            .into_shape_with_order((oc, ic * kh * kw))
            .unwrap();
        general_mat_mul(S::one(), &gy2, &cols.t(), S::one(), &mut gw2);
        self.grad_bias += &gy2.sum_axis(Axis(1));
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((oc, ic * kh * kw))
            .unwrap();
        let mut gcols = Array2::<S>::zeros((ic * kh * kw, n * oh * ow));
        general_mat_mul(S::one(), &w2.t(), &gy2, S::zero(), &mut gcols);
        col2im(
            &gcols,
            n,
            c,
            (oh, ow),
            (h, w),
            kh,
            kw,
            self.stride,
            self.pad,
        )
    }
}

impl<S: Scalar> Params<S> for Conv2d<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, S>)) {
        f(ParamSlot {
            name: join(prefix, "weight"),
            dims: self.weight.shape().to_vec(),
            value: self.weight.as_slice_mut().unwrap(),
            grad: self.grad_weight.as_slice_mut().unwrap(),
        });
        f(ParamSlot {
            name: join(prefix, "bias"),
            dims: self.bias.shape().to_vec(),
            value: self.bias.as_slice_mut().unwrap(),
            grad: self.grad_bias.as_slice_mut().unwrap(),
        });
    }
}

/// 2-D transposed convolution (fractionally strided upsampling).
///
/// Output extent is `(in - 1) * stride - 2 * pad + k`.
pub struct ConvTranspose2d<S: Scalar> {
    pub weight: Array4<S>, // (in_c, out_c, kh, kw)
    pub bias: Array1<S>,
    pub grad_weight: Array4<S>,
    pub grad_bias: Array1<S>,
    stride: usize,
    pad: usize,
    x2: Option<Array2<S>>,
    in_dims: (usize, usize, usize, usize),
}

impl<S: Scalar> ConvTranspose2d<S> {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        // Each output pixel collects roughly k^2 / stride^2 taps.
        let fan_in = (in_c * k * k / (stride * stride)).max(1);
        ConvTranspose2d {
            weight: super::he_normal((in_c, out_c, k, k), fan_in, slope, rng),
            bias: Array1::zeros(out_c),
            grad_weight: Array4::zeros((in_c, out_c, k, k)),
            grad_bias: Array1::zeros(out_c),
            stride,
            pad,
            x2: None,
            in_dims: (0, 0, 0, 0),
        }
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        (
            (h - 1) * self.stride + kh - 2 * self.pad,
            (w - 1) * self.stride + kw - 2 * self.pad,
        )
    }

    pub fn forward(&mut self, x: &Array4<S>, mode: Mode) -> Array4<S> {
        let (n, c, h, w) = x.dim();
        let (ic, oc, kh, kw) = self.weight.dim();
        assert_eq!(c, ic, "deconv input channels");
        let (oh, ow) = self.out_shape(h, w);
        let x2 = x
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_shape_with_order((ic, n * h * w))
            .unwrap()
            .to_owned();
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((ic, oc * kh * kw))
            .unwrap();
        let mut cols = Array2::<S>::zeros((oc * kh * kw, n * h * w));
        general_mat_mul(S::one(), &w2.t(), &x2, S::zero(), &mut cols);
        let mut y = col2im(
            &cols,
            n,
            oc,
            (h, w),
            (oh, ow),
            kh,
            kw,
            self.stride,
            self.pad,
        );
        for mut img in y.outer_iter_mut() {
            for (mut ch, b) in img.outer_iter_mut().zip(self.bias.iter()) {
                ch += *b;
            }
        }
        if mode == Mode::Train {
            self.x2 = Some(x2);
            self.in_dims = (n, c, h, w);
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<S>) -> Array4<S> {
        let x2 = self.x2.take().expect("deconv backward without forward");
        let (n, c, h, w) = self.in_dims;
        let (ic, oc, kh, kw) = self.weight.dim();
        // The im2col of the output gradient over the input grid is the
        // adjoint of the forward col2im scatter.
        let gcols = im2col(gy, kh, kw, self.stride, self.pad);
        debug_assert_eq!(gcols.dim(), (oc * kh * kw, n * h * w));
        let mut gw2 = self
            .grad_weight
            .view_mut()
            .into_shape_with_order((ic, oc * kh * kw))
            .unwrap();
        general_mat_mul(S::one(), &x2, &gcols.t(), S::one(), &mut gw2);
        for (co, gb) in self.grad_bias.iter_mut().enumerate() {
            let mut acc = S::zero();
            for ni in 0..n {
                acc = acc + gy.index_axis(Axis(0), ni).index_axis(Axis(0), co).sum();
            }
            *gb = *gb + acc;
        }
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((ic, oc * kh * kw))
            .unwrap();
        let mut gx2 = Array2::<S>::zeros((ic, n * h * w));
        general_mat_mul(S::one(), &w2, &gcols, S::zero(), &mut gx2);
        let gx = gx2.into_shape_with_order((ic, n, h, w)).unwrap();
        let _ = c;
        gx.permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned()
    }
}

impl<S: Scalar> Params<S> for ConvTranspose2d<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, S>)) {
        f(ParamSlot {
            name: join(prefix, "weight"),
            dims: self.weight.shape().to_vec(),
            value: self.weight.as_slice_mut().unwrap(),
            grad: self.grad_weight.as_slice_mut().unwrap(),
        });
        f(ParamSlot {
            name: join(prefix, "bias"),
            dims: self.bias.shape().to_vec(),
            value: self.bias.as_slice_mut().unwrap(),
            grad: self.grad_bias.as_slice_mut().unwrap(),
        });
    }
}
