//! 2-D cross-correlation kernels (im2col + GEMM).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{shape_err, Error, Result};

/// Samples per work unit in the backward pass. Partial weight gradients are
/// summed in chunk order, so results do not depend on the thread count.
const BACKWARD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Symmetric zero padding; `(H + 2p - k)` must be divisible by the stride.
    Explicit(usize),
    /// Output extent `ceil(H / stride)`, padding split with the extra row at
    /// the end.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: Padding, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

/// Output extent and leading pad for one spatial axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    match padding {
        Padding::Explicit(p) => {
            let padded = input + 2 * p;
            if padded < kernel {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel {kernel} larger than padded input {padded}"),
                ));
            }
            let span = padded - kernel;
            if !span.is_multiple_of(stride) {
                return Err(Error::Config(format!(
                    "non-integer output extent: ({input} + 2*{p} - {kernel}) / {stride}"
                )));
            }
            Ok((span / stride + 1, p))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], spec: &Conv2dSpec) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected rank-4 input and weight, got {x_shape:?} and {w_shape:?}"),
            ));
        }
        let (batch, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (cout, cin_g, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(shape_err(
                "conv2d",
                format!("channels {cin}->{cout} not divisible by {groups} groups"),
            ));
        }
        if cin / groups != cin_g {
            return Err(shape_err(
                "conv2d",
                format!(
                    "weight expects {cin_g} input channels per group, input has {}",
                    cin / groups
                ),
            ));
        }
        let (ho, pad_top) = conv_output_extent(h, kh, spec.stride, spec.padding)?;
        let (wo, pad_left) = conv_output_extent(w, kw, spec.stride, spec.padding)?;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride: spec.stride,
            pad_top,
            pad_left,
            ho,
            wo,
            groups,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.ho, self.wo]
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the im2col matrix per group.
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn n(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    /// Fill `cols` (`[k, n]`) with the receptive fields of one group of one
    /// sample (`x` is `[cin_g, h, w]`).
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let n = self.n();
        for c in 0..self.cin_g() {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad_top as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad_left as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add `cols` back onto one group of one sample's input gradient.
    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let n = self.n();
        for c in 0..self.cin_g() {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad_left as isize;
                            if ix >= 0 && ix < self.w as isize {
                                line[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let (k, n) = (g.k(), g.n());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * n;
    let mut out = vec![T::zero(); g.batch * out_sample];
    out.par_chunks_mut(out_sample.max(1))
        .enumerate()
        .for_each(|(b, out_s)| {
            let x_s = &x[b * in_sample..(b + 1) * in_sample];
            let mut cols = if g.pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); k * n]
            };
            for grp in 0..g.groups {
                let x_g = &x_s[grp * cin_g * g.h * g.w..(grp + 1) * cin_g * g.h * g.w];
                let w_g = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
                let y_g = &mut out_s[grp * cout_g * n..(grp + 1) * cout_g * n];
                let b_mat: &[T] = if g.pointwise() {
                    x_g
                } else {
                    g.im2col(x_g, &mut cols);
                    &cols
                };
                T::gemm(
                    cout_g,
                    k,
                    n,
                    T::one(),
                    w_g,
                    (k as isize, 1),
                    b_mat,
                    (n as isize, 1),
                    T::zero(),
                    y_g,
                    (n as isize, 1),
                );
            }
        });
    out
}

/// Returns `(dx, dw)` for upstream gradient `dy`.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Vec<T>, Vec<T>) {
    let (k, n) = (g.k(), g.n());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * n;
    let mut dx = vec![T::zero(); if need_dx { g.batch * in_sample } else { 0 }];
    let chunk_count = g.batch.div_ceil(BACKWARD_CHUNK);

    let work = |chunk: usize, dx_chunk: Option<&mut [T]>| -> Vec<T> {
        let mut dw = vec![T::zero(); if need_dw { w.len() } else { 0 }];
        let mut cols = vec![T::zero(); k * n];
        let mut dx_chunk = dx_chunk;
        let start = chunk * BACKWARD_CHUNK;
        let end = (start + BACKWARD_CHUNK).min(g.batch);
        for b in start..end {
            let x_s = &x[b * in_sample..(b + 1) * in_sample];
            let dy_s = &dy[b * out_sample..(b + 1) * out_sample];
            for grp in 0..g.groups {
                let gx = grp * cin_g * g.h * g.w..(grp + 1) * cin_g * g.h * g.w;
                let w_g = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
                let dy_g = &dy_s[grp * cout_g * n..(grp + 1) * cout_g * n];
                if need_dw {
                    let b_mat: &[T] = if g.pointwise() {
                        &x_s[gx.clone()]
                    } else {
                        g.im2col(&x_s[gx.clone()], &mut cols);
                        &cols
                    };
                    let dw_g = &mut dw[grp * cout_g * k..(grp + 1) * cout_g * k];
                    T::gemm(
                        cout_g,
                        n,
                        k,
                        T::one(),
                        dy_g,
                        (n as isize, 1),
                        b_mat,
                        (1, n as isize),
                        T::one(),
                        dw_g,
                        (k as isize, 1),
                    );
                }
                if let Some(dxc) = dx_chunk.as_deref_mut() {
                    let local = b - start;
                    let dx_s = &mut dxc[local * in_sample..(local + 1) * in_sample];
                    let dx_g = &mut dx_s[gx.clone()];
                    if g.pointwise() {
                        T::gemm(
                            k,
                            cout_g,
                            n,
                            T::one(),
                            w_g,
                            (1, k as isize),
                            dy_g,
                            (n as isize, 1),
                            T::one(),
                            dx_g,
                            (n as isize, 1),
                        );
                    } else {
                        T::gemm(
                            k,
                            cout_g,
                            n,
                            T::one(),
                            w_g,
                            (1, k as isize),
                            dy_g,
                            (n as isize, 1),
                            T::zero(),
                            &mut cols,
                            (n as isize, 1),
                        );
                        g.col2im(&cols, dx_g);
                    }
                }
            }
        }
        dw
    };

    let partials: Vec<Vec<T>> = if need_dx {
        dx.par_chunks_mut((BACKWARD_CHUNK * in_sample).max(1))
            .enumerate()
            .map(|(c, dxc)| work(c, Some(dxc)))
            .collect()
    } else {
        (0..chunk_count).into_par_iter().map(|c| work(c, None)).collect()
    };

    let mut dw = vec![T::zero(); if need_dw { w.len() } else { 0 }];
    if need_dw {
        for part in &partials {
            for (a, &b) in dw.iter_mut().zip(part) {
                *a += b;
            }
        }
    }
    (dx, dw)
}
