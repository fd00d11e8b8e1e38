//! Dense, convolutional and normalization layers with explicit backward
//! passes. Feature maps are channels-last: `N x H x W x C`.

use ndarray::{s, Array2, Array4, ArrayView2, Axis};

use super::param::{Init, Param};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    /// `in x out`.
    pub weight: Param<T>,
    /// `1 x out`.
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(input: usize, output: usize, init: Init) -> Self {
        Self {
            weight: Param::new((input, output), init),
            bias: Param::new((1, output), Init::Zeros),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.value);
        y += &self.bias.value;
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: ArrayView2<T>, dy: ArrayView2<T>) -> Array2<T> {
        self.weight.grad += &x.t().dot(&dy);
        self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.weight.value.t())
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Param<T>); 2] {
        [("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    pub fn params(&self) -> [(&'static str, &Param<T>); 2] {
        [("weight", &self.weight), ("bias", &self.bias)]
    }
}

/// Square-kernel convolution implemented as im2col followed by a matrix
/// product. The weight is laid out `(ky, kx, c_in) x c_out`.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<T: Scalar> {
    input: Array4<T>,
}

/// Output pixels per im2col block; keeps the column buffer cache-resident.
const CONV_CHUNK: usize = 256;

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let fan_in = kernel * kernel * in_channels;
        Self {
            weight: Param::new((fan_in, out_channels), Init::HeNormal { fan_in }),
            bias: Param::new((1, out_channels), Init::Zeros),
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    /// Visits `(row, ky, kx, input offset)` for every in-bounds tap of the
    /// output pixels `rows`, where `row` is relative to `rows.start`.
    fn for_each_tap(&self, dim: (usize, usize, usize, usize), rows: std::ops::Range<usize>, mut f: impl FnMut(usize, usize, usize)) {
        let (_, h, w, c) = dim;
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let (pad, stride) = (self.padding as isize, self.stride as isize);
        for (r, out) in rows.clone().enumerate() {
            let b = out / (ho * wo);
            let oy = (out / wo) % ho;
            let ox = out % wo;
            for ky in 0..k {
                let iy = oy as isize * stride + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as isize * stride + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    f(r, (ky * k + kx) * c, ((b * h + iy as usize) * w + ix as usize) * c);
                }
            }
        }
    }

    fn im2col(&self, xs: &[T], dim: (usize, usize, usize, usize), rows: std::ops::Range<usize>, cols: &mut Array2<T>) {
        let c = dim.3;
        let width = cols.ncols();
        cols.fill(T::zero());
        let cs = cols.as_slice_mut().expect("owned buffer");
        self.for_each_tap(dim, rows, |r, col, src| {
            let dst = r * width + col;
            cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
        });
    }

    fn col2im(&self, ds: &[T], width: usize, dim: (usize, usize, usize, usize), rows: std::ops::Range<usize>, dxs: &mut [T]) {
        let c = dim.3;
        self.for_each_tap(dim, rows, |r, col, dst| {
            let src = r * width + col;
            for (d, s) in dxs[dst..dst + c].iter_mut().zip(&ds[src..src + c]) {
                *d += *s;
            }
        });
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, ConvCache<T>) {
        let x = x.as_standard_layout().into_owned();
        let dim = x.dim();
        let (n, h, w, c) = dim;
        debug_assert_eq!(c, self.in_channels);
        let (ho, wo) = self.output_size(h, w);
        let total = n * ho * wo;
        let width = self.kernel * self.kernel * c;
        let mut y = Array2::<T>::zeros((total, self.out_channels));
        let mut cols = Array2::<T>::zeros((CONV_CHUNK.min(total), width));
        let xs = x.as_slice().expect("standard layout");
        for start in (0..total).step_by(CONV_CHUNK) {
            let end = (start + CONV_CHUNK).min(total);
            if end - start != cols.nrows() {
                cols = Array2::zeros((end - start, width));
            }
            self.im2col(xs, dim, start..end, &mut cols);
            let mut out = y.slice_mut(s![start..end, ..]);
            ndarray::linalg::general_mat_mul(T::one(), &cols, &self.weight.value, T::zero(), &mut out);
            out += &self.bias.value;
        }
        let y = y
            .into_shape_with_order((n, ho, wo, self.out_channels))
            .expect("row-major product");
        (y, ConvCache { input: x })
    }

    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &Array4<T>) -> Array4<T> {
        let dim = cache.input.dim();
        let total = dy.len() / self.out_channels;
        let width = self.kernel * self.kernel * dim.3;
        let dy = dy.as_standard_layout();
        let dy2 = dy
            .view()
            .into_shape_with_order((total, self.out_channels))
            .expect("standard layout");
        self.bias.grad += &dy2.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut dx = Array4::<T>::zeros(dim);
        let xs = cache.input.as_slice().expect("standard layout");
        let mut cols = Array2::<T>::zeros((CONV_CHUNK.min(total), width));
        let mut dcols = Array2::<T>::zeros((CONV_CHUNK.min(total), width));
        for start in (0..total).step_by(CONV_CHUNK) {
            let end = (start + CONV_CHUNK).min(total);
            if end - start != cols.nrows() {
                cols = Array2::zeros((end - start, width));
                dcols = Array2::zeros((end - start, width));
            }
            self.im2col(xs, dim, start..end, &mut cols);
            let dchunk = dy2.slice(s![start..end, ..]);
            ndarray::linalg::general_mat_mul(T::one(), &cols.t(), &dchunk, T::one(), &mut self.weight.grad);
            ndarray::linalg::general_mat_mul(T::one(), &dchunk, &self.weight.value.t(), T::zero(), &mut dcols);
            self.col2im(
                dcols.as_slice().expect("owned buffer"),
                width,
                dim,
                start..end,
                dx.as_slice_mut().expect("owned buffer"),
            );
        }
        dx
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Param<T>); 2] {
        [("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    pub fn params(&self) -> [(&'static str, &Param<T>); 2] {
        [("weight", &self.weight), ("bias", &self.bias)]
    }
}

/// Normalization over the last axis of a `rows x D` matrix.
#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct NormCache<T: Scalar> {
    xhat: Array2<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new((1, dim), Init::Ones),
            beta: Param::new((1, dim), Init::Zeros),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, NormCache<T>) {
        let d = T::from_usize(x.ncols()).unwrap();
        let eps = lit::<T>(self.eps);
        let mut xhat = x.to_owned();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.outer_iter_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            let is = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let mut y = &xhat * &self.gamma.value;
        y += &self.beta.value;
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dy: ArrayView2<T>) -> Array2<T> {
        self.gamma.grad += &(&dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d = T::from_usize(dy.ncols()).unwrap();
        let dxhat = &dy * &self.gamma.value;
        let mut dx = Array2::zeros(dy.dim());
        for (i, (g, xh)) in dxhat.outer_iter().zip(cache.xhat.outer_iter()).enumerate() {
            let sum_g = g.sum();
            let sum_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
            let is = cache.inv_std[i];
            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                *o = is / d * (d * g[j] - sum_g - xh[j] * sum_gx);
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Param<T>); 2] {
        [("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }

    pub fn params(&self) -> [(&'static str, &Param<T>); 2] {
        [("gamma", &self.gamma), ("beta", &self.beta)]
    }
}

pub fn relu<T: Scalar, D: ndarray::Dimension>(x: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
    x.mapv(|v| v.max(T::zero()))
}

/// Gradient through a rectifier given its output.
pub fn relu_backward<T: Scalar, D: ndarray::Dimension>(
    out: &ndarray::Array<T, D>,
    dy: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(out, |d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of the Gaussian error linear unit.
pub fn gelu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let (c, k, half) = (lit::<T>(GELU_C), lit::<T>(0.044715), lit::<T>(0.5));
    x.mapv(|v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()))
}

pub fn gelu_backward<T: Scalar>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let (c, k, half, three) = (lit::<T>(GELU_C), lit::<T>(0.044715), lit::<T>(0.5), lit::<T>(3.0));
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let t = (c * (v + k * v * v * v)).tanh();
        let grad = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * k * v * v);
        *d *= grad;
    });
    dx
}

/// Nearest-neighbour 2x upsampling of an NHWC map.
pub fn upsample2x<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (n, h, w, c) = x.dim();
    let mut out = Array4::zeros((n, 2 * h, 2 * w, c));
    for dy in 0..2 {
        for dx in 0..2 {
            out.slice_mut(s![.., dy..;2, dx..;2, ..]).assign(x);
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(dy: &Array4<T>) -> Array4<T> {
    let (n, h, w, c) = dy.dim();
    let mut dx = Array4::zeros((n, h / 2, w / 2, c));
    for oy in 0..2 {
        for ox in 0..2 {
            dx += &dy.slice(s![.., oy..;2, ox..;2, ..]);
        }
    }
    dx
}
