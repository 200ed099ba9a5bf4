use serde::{Deserialize, Serialize};

use super::{conv_output_extent, Padding, Real};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// 2×2 window, stride 2; spatial extents must be even.
    Avg2x2s2,
    /// Mean over all spatial positions; output `[B, C]`.
    GlobalAvg,
    /// 3×3 window, stride 2, SAME padding (padding never wins the max).
    Max3x3s2,
}

pub(crate) fn pool_out_shape(mode: PoolMode, shape: &[usize]) -> Result<Vec<usize>> {
    if shape.len() != 4 {
        return Err(shape_err("pool2d", format!("expected [B,C,H,W], got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    match mode {
        PoolMode::Avg2x2s2 => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(shape_err(
                    "pool2d",
                    format!("avg2x2s2 needs even spatial extents, got {h}x{w}"),
                ));
            }
            Ok(vec![b, c, h / 2, w / 2])
        }
        PoolMode::GlobalAvg => Ok(vec![b, c]),
        PoolMode::Max3x3s2 => {
            let (ho, _) = conv_output_extent(h, 3, 2, Padding::Same)?;
            let (wo, _) = conv_output_extent(w, 3, 2, Padding::Same)?;
            Ok(vec![b, c, ho, wo])
        }
    }
}

/// Returns the pooled values and, for max pooling, the flat input index of
/// each winner.
pub(crate) fn pool_forward<T: Real>(
    mode: PoolMode,
    shape: &[usize],
    x: &[T],
) -> Result<(Vec<usize>, Vec<T>, Vec<usize>)> {
    let out_shape = pool_out_shape(mode, shape)?;
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let planes = b * c;
    let hw = h * w;
    match mode {
        PoolMode::GlobalAvg => {
            let inv = T::one() / T::lit(hw as f64);
            let out = (0..planes)
                .map(|p| x[p * hw..(p + 1) * hw].iter().fold(T::zero(), |a, &v| a + v) * inv)
                .collect();
            Ok((out_shape, out, Vec::new()))
        }
        PoolMode::Avg2x2s2 => {
            let (ho, wo) = (h / 2, w / 2);
            let quarter = T::lit(0.25);
            let mut out = Vec::with_capacity(planes * ho * wo);
            for p in 0..planes {
                let plane = &x[p * hw..(p + 1) * hw];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let i = 2 * oy * w + 2 * ox;
                        out.push((plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter);
                    }
                }
            }
            Ok((out_shape, out, Vec::new()))
        }
        PoolMode::Max3x3s2 => {
            let (ho, wo) = (out_shape[2], out_shape[3]);
            let (_, pad_top) = conv_output_extent(h, 3, 2, Padding::Same)?;
            let (_, pad_left) = conv_output_extent(w, 3, 2, Padding::Same)?;
            let mut out = Vec::with_capacity(planes * ho * wo);
            let mut arg = Vec::with_capacity(planes * ho * wo);
            for p in 0..planes {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = T::neg_infinity();
                        let mut best_i = usize::MAX;
                        for ki in 0..3 {
                            let iy = (oy * 2 + ki) as isize - pad_top as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..3 {
                                let ix = (ox * 2 + kj) as isize - pad_left as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = p * hw + iy as usize * w + ix as usize;
                                if x[idx] > best || best_i == usize::MAX {
                                    best = x[idx];
                                    best_i = idx;
                                }
                            }
                        }
                        out.push(best);
                        arg.push(best_i);
                    }
                }
            }
            Ok((out_shape, out, arg))
        }
    }
}

pub(crate) fn pool_backward<T: Real>(mode: PoolMode, in_shape: &[usize], dy: &[T], argmax: &[usize]) -> Vec<T> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let planes = b * c;
    let hw = h * w;
    let mut dx = vec![T::zero(); planes * hw];
    match mode {
        PoolMode::GlobalAvg => {
            let inv = T::one() / T::lit(hw as f64);
            for p in 0..planes {
                let g = dy[p] * inv;
                dx[p * hw..(p + 1) * hw].iter_mut().for_each(|v| *v = g);
            }
        }
        PoolMode::Avg2x2s2 => {
            let (ho, wo) = (h / 2, w / 2);
            let quarter = T::lit(0.25);
            for p in 0..planes {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = dy[(p * ho + oy) * wo + ox] * quarter;
                        let i = p * hw + 2 * oy * w + 2 * ox;
                        dx[i] += g;
                        dx[i + 1] += g;
                        dx[i + w] += g;
                        dx[i + w + 1] += g;
                    }
                }
            }
        }
        PoolMode::Max3x3s2 => {
            for (&i, &g) in argmax.iter().zip(dy) {
                dx[i] += g;
            }
        }
    }
    dx
}
