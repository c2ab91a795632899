//! Raw forward/backward kernels for the spatial ops.
//!
//! Shape validation happens in the graph layer; kernels trust their inputs.
//! Every kernel computes each output element in exactly one thread, so results
//! are bit-identical no matter how many rayon workers run.

use crate::tensor::{Element, Tensor};
use rayon::prelude::*;

/// Work threshold below which the parallel dispatch is not worth it.
const PAR_MIN_MACS: usize = 1 << 17;

pub fn conv2d_out_dims(h: usize, w: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    (oh, ow)
}

pub fn conv_transpose2d_out_dims(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let oh = (h - 1) * stride + k - 2 * padding;
    let ow = (w - 1) * stride + k - 2 * padding;
    (oh, ow)
}

/// Cross-correlation (no kernel flip). weight layout: c_out x c_in x k x k.
pub fn conv2d<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Tensor<E> {
    let (c_in, h, w) = input.dims3().unwrap();
    let (c_out, wc_in, kh, kw) = weight.dims4().unwrap();
    debug_assert_eq!(c_in, wc_in);
    debug_assert_eq!(kh, kw);
    let (oh, ow) = conv2d_out_dims(h, w, kh, stride, padding);

    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let mut out = Tensor::zeros(vec![c_out, oh, ow]);
    let plane = oh * ow;
    let macs = c_out * plane * c_in * kh * kw;

    let run = |co: usize, out_plane: &mut [E]| {
        out_plane.fill(b[co]);
        for ci in 0..c_in {
            let x_plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let w_row = &wt[((co * c_in + ci) * kh + ky) * kw..((co * c_in + ci) * kh + ky + 1) * kw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_row = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                    let o_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                    for (kx, &wv) in w_row.iter().enumerate() {
                        let off = kx as isize - padding as isize;
                        for (ox, o) in o_row.iter_mut().enumerate() {
                            let ix = (ox * stride) as isize + off;
                            if ix >= 0 && ix < w as isize {
                                *o = *o + x_row[ix as usize] * wv;
                            }
                        }
                    }
                }
            }
        }
    };

    if macs >= PAR_MIN_MACS && c_out > 1 {
        out.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(co, p)| run(co, p));
    } else {
        out.data_mut()
            .chunks_mut(plane)
            .enumerate()
            .for_each(|(co, p)| run(co, p));
    }
    out
}

/// Gradients of conv2d: (d_input, d_weight, d_bias).
pub fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    grad_out: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (c_in, h, w) = input.dims3().unwrap();
    let (c_out, _, kh, kw) = weight.dims4().unwrap();
    let (_, oh, ow) = grad_out.dims3().unwrap();
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let macs = c_out * oh * ow * c_in * kh * kw;

    let mut d_bias = Tensor::zeros(vec![c_out]);
    for co in 0..c_out {
        let mut acc = E::zero();
        for v in &g[co * oh * ow..(co + 1) * oh * ow] {
            acc = acc + *v;
        }
        d_bias.data_mut()[co] = acc;
    }

    // d_weight: one thread per output channel slice.
    let mut d_weight = Tensor::zeros(vec![c_out, c_in, kh, kw]);
    let w_slice = c_in * kh * kw;
    let run_dw = |co: usize, dw: &mut [E]| {
        let g_plane = &g[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..c_in {
            let x_plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = E::zero();
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                        let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                        for (ox, &gv) in g_row.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                acc = acc + x_row[ix as usize] * gv;
                            }
                        }
                    }
                    dw[(ci * kh + ky) * kw + kx] = acc;
                }
            }
        }
    };
    if macs >= PAR_MIN_MACS && c_out > 1 {
        d_weight
            .data_mut()
            .par_chunks_mut(w_slice)
            .enumerate()
            .for_each(|(co, dw)| run_dw(co, dw));
    } else {
        d_weight
            .data_mut()
            .chunks_mut(w_slice)
            .enumerate()
            .for_each(|(co, dw)| run_dw(co, dw));
    }

    // d_input: one thread per input channel, gathering over output channels.
    let mut d_input = Tensor::zeros(vec![c_in, h, w]);
    let run_dx = |ci: usize, dx: &mut [E]| {
        for co in 0..c_out {
            let g_plane = &g[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..kh {
                let w_row = &wt[((co * c_in + ci) * kh + ky) * kw..((co * c_in + ci) * kh + ky + 1) * kw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dx_row = &mut dx[iy as usize * w..(iy as usize + 1) * w];
                    let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                    for (kx, &wv) in w_row.iter().enumerate() {
                        let off = kx as isize - padding as isize;
                        for (ox, &gv) in g_row.iter().enumerate() {
                            let ix = (ox * stride) as isize + off;
                            if ix >= 0 && ix < w as isize {
                                dx_row[ix as usize] = dx_row[ix as usize] + gv * wv;
                            }
                        }
                    }
                }
            }
        }
    };
    if macs >= PAR_MIN_MACS && c_in > 1 {
        d_input
            .data_mut()
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(ci, dx)| run_dx(ci, dx));
    } else {
        d_input
            .data_mut()
            .chunks_mut(h * w)
            .enumerate()
            .for_each(|(ci, dx)| run_dx(ci, dx));
    }

    (d_input, d_weight, d_bias)
}

/// Transposed convolution. weight layout: c_in x c_out x k x k.
pub fn conv_transpose2d<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Tensor<E> {
    let (c_in, h, w) = input.dims3().unwrap();
    let (_, c_out, kh, kw) = weight.dims4().unwrap();
    let (oh, ow) = conv_transpose2d_out_dims(h, w, kh, stride, padding);

    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let mut out = Tensor::zeros(vec![c_out, oh, ow]);
    let plane = oh * ow;
    let macs = c_out * h * w * c_in * kh * kw;

    let run = |co: usize, out_plane: &mut [E]| {
        out_plane.fill(b[co]);
        for ci in 0..c_in {
            let x_plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let w_row = &wt[((ci * c_out + co) * kh + ky) * kw..((ci * c_out + co) * kh + ky + 1) * kw];
                for iy in 0..h {
                    let oy = (iy * stride + ky) as isize - padding as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    let o_row = &mut out_plane[oy as usize * ow..(oy as usize + 1) * ow];
                    let x_row = &x_plane[iy * w..(iy + 1) * w];
                    for (kx, &wv) in w_row.iter().enumerate() {
                        let off = kx as isize - padding as isize;
                        for (ix, &xv) in x_row.iter().enumerate() {
                            let ox = (ix * stride) as isize + off;
                            if ox >= 0 && ox < ow as isize {
                                o_row[ox as usize] = o_row[ox as usize] + xv * wv;
                            }
                        }
                    }
                }
            }
        }
    };

    if macs >= PAR_MIN_MACS && c_out > 1 {
        out.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(co, p)| run(co, p));
    } else {
        out.data_mut()
            .chunks_mut(plane)
            .enumerate()
            .for_each(|(co, p)| run(co, p));
    }
    out
}

/// Gradients of conv_transpose2d: (d_input, d_weight, d_bias).
pub fn conv_transpose2d_backward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    grad_out: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (c_in, h, w) = input.dims3().unwrap();
    let (_, c_out, kh, kw) = weight.dims4().unwrap();
    let (_, oh, ow) = grad_out.dims3().unwrap();
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let macs = c_out * h * w * c_in * kh * kw;

    let mut d_bias = Tensor::zeros(vec![c_out]);
    for co in 0..c_out {
        let mut acc = E::zero();
        for v in &g[co * oh * ow..(co + 1) * oh * ow] {
            acc = acc + *v;
        }
        d_bias.data_mut()[co] = acc;
    }

    // d_weight: one thread per input channel slice (layout c_in x c_out x k x k).
    let mut d_weight = Tensor::zeros(vec![c_in, c_out, kh, kw]);
    let w_slice = c_out * kh * kw;
    let run_dw = |ci: usize, dw: &mut [E]| {
        let x_plane = &x[ci * h * w..(ci + 1) * h * w];
        for co in 0..c_out {
            let g_plane = &g[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = E::zero();
                    for iy in 0..h {
                        let oy = (iy * stride + ky) as isize - padding as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let g_row = &g_plane[oy as usize * ow..(oy as usize + 1) * ow];
                        let x_row = &x_plane[iy * w..(iy + 1) * w];
                        for (ix, &xv) in x_row.iter().enumerate() {
                            let ox = (ix * stride + kx) as isize - padding as isize;
                            if ox >= 0 && ox < ow as isize {
                                acc = acc + xv * g_row[ox as usize];
                            }
                        }
                    }
                    dw[(co * kh + ky) * kw + kx] = acc;
                }
            }
        }
    };
    if macs >= PAR_MIN_MACS && c_in > 1 {
        d_weight
            .data_mut()
            .par_chunks_mut(w_slice)
            .enumerate()
            .for_each(|(ci, dw)| run_dw(ci, dw));
    } else {
        d_weight
            .data_mut()
            .chunks_mut(w_slice)
            .enumerate()
            .for_each(|(ci, dw)| run_dw(ci, dw));
    }

    // d_input[ci][iy][ix] = sum over co,ky,kx of g[co][iy*s+ky-p][ix*s+kx-p] * w[ci][co][ky][kx]
    let mut d_input = Tensor::zeros(vec![c_in, h, w]);
    let run_dx = |ci: usize, dx: &mut [E]| {
        for co in 0..c_out {
            let g_plane = &g[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..kh {
                let w_row = &wt[((ci * c_out + co) * kh + ky) * kw..((ci * c_out + co) * kh + ky + 1) * kw];
                for iy in 0..h {
                    let oy = (iy * stride + ky) as isize - padding as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    let g_row = &g_plane[oy as usize * ow..(oy as usize + 1) * ow];
                    let dx_row = &mut dx[iy * w..(iy + 1) * w];
                    for (kx, &wv) in w_row.iter().enumerate() {
                        let off = kx as isize - padding as isize;
                        for (ix, d) in dx_row.iter_mut().enumerate() {
                            let ox = (ix * stride) as isize + off;
                            if ox >= 0 && ox < ow as isize {
                                *d = *d + g_row[ox as usize] * wv;
                            }
                        }
                    }
                }
            }
        }
    };
    if macs >= PAR_MIN_MACS && c_in > 1 {
        d_input
            .data_mut()
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(ci, dx)| run_dx(ci, dx));
    } else {
        d_input
            .data_mut()
            .chunks_mut(h * w)
            .enumerate()
            .for_each(|(ci, dx)| run_dx(ci, dx));
    }

    (d_input, d_weight, d_bias)
}

/// Per-axis source index pair and interpolation weight, half-pixel centers.
fn bilinear_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Bilinear upsample to (oh, ow), half-pixel-center alignment.
pub fn upsample_bilinear<E: Element>(input: &Tensor<E>, oh: usize, ow: usize) -> Tensor<E> {
    let (c, h, w) = input.dims3().unwrap();
    let ys = bilinear_axis(h, oh);
    let xs = bilinear_axis(w, ow);
    let x = input.data();
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    let plane = oh * ow;

    let run = |ci: usize, out_plane: &mut [E]| {
        let x_plane = &x[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let row0 = &x_plane[y0 * w..(y0 + 1) * w];
            let row1 = &x_plane[y1 * w..(y1 + 1) * w];
            let wy = E::from_f64(wy);
            let o_row = &mut out_plane[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let wx = E::from_f64(wx);
                // lerp form: exact for constant inputs
                let top = row0[x0] + wx * (row0[x1] - row0[x0]);
                let bot = row1[x0] + wx * (row1[x1] - row1[x0]);
                o_row[ox] = top + wy * (bot - top);
            }
        }
    };

    if c * plane * 4 >= PAR_MIN_MACS && c > 1 {
        out.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(ci, p)| run(ci, p));
    } else {
        out.data_mut()
            .chunks_mut(plane)
            .enumerate()
            .for_each(|(ci, p)| run(ci, p));
    }
    out
}

/// Scatter the output gradient back through the bilinear weights.
pub fn upsample_bilinear_backward<E: Element>(
    grad_out: &Tensor<E>,
    in_h: usize,
    in_w: usize,
) -> Tensor<E> {
    let (c, oh, ow) = grad_out.dims3().unwrap();
    let ys = bilinear_axis(in_h, oh);
    let xs = bilinear_axis(in_w, ow);
    let g = grad_out.data();
    let mut d_input = Tensor::zeros(vec![c, in_h, in_w]);
    let plane = in_h * in_w;

    let run = |ci: usize, dx: &mut [E]| {
        let g_plane = &g[ci * oh * ow..(ci + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let wy1 = E::from_f64(1.0 - wy);
            let wy = E::from_f64(wy);
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let gv = g_plane[oy * ow + ox];
                let wx1 = E::from_f64(1.0 - wx);
                let wx = E::from_f64(wx);
                dx[y0 * in_w + x0] = dx[y0 * in_w + x0] + gv * wy1 * wx1;
                dx[y0 * in_w + x1] = dx[y0 * in_w + x1] + gv * wy1 * wx;
                dx[y1 * in_w + x0] = dx[y1 * in_w + x0] + gv * wy * wx1;
                dx[y1 * in_w + x1] = dx[y1 * in_w + x1] + gv * wy * wx;
            }
        }
    };

    if c * oh * ow * 4 >= PAR_MIN_MACS && c > 1 {
        d_input
            .data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(ci, p)| run(ci, p));
    } else {
        d_input
            .data_mut()
            .chunks_mut(plane)
            .enumerate()
            .for_each(|(ci, p)| run(ci, p));
    }
    d_input
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv2d_shape_arithmetic() {
        let x = Tensor::<f64>::zeros(vec![4, 256, 256]);
        let w = Tensor::<f64>::zeros(vec![1, 4, 4, 4]);
        let b = Tensor::<f64>::zeros(vec![1]);
        let y = conv2d(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), &[1, 128, 128]);
    }

    #[test]
    fn conv_transpose_doubles_spatial() {
        let x = Tensor::<f64>::zeros(vec![8, 16, 16]);
        let w = Tensor::<f64>::zeros(vec![8, 2, 4, 4]);
        let b = Tensor::<f64>::zeros(vec![2]);
        let y = conv_transpose2d(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), &[2, 32, 32]);
    }

    #[test]
    fn conv_transpose_zero_input_gives_bias() {
        let x = Tensor::<f64>::zeros(vec![2, 3, 3]);
        let w = t(vec![2, 1, 4, 4], (0..32).map(|i| i as f64).collect());
        let b = t(vec![1], vec![0.75]);
        let y = conv_transpose2d(&x, &w, &b, 2, 1);
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::<f64>::full(vec![2, 2, 2], 0.3125);
        let y = upsample_bilinear(&x, 256, 256);
        assert_eq!(y.shape(), &[2, 256, 256]);
        assert!(y.data().iter().all(|&v| v == 0.3125));
    }

    #[test]
    fn upsample_identity_when_target_matches() {
        let x = t(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = upsample_bilinear(&x, 2, 3);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn upsample_2x2_to_4x4_matches_direct_formula() {
        // independent per-pixel evaluation of the half-pixel bilinear formula
        let x = t(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        let y = upsample_bilinear(&x, 4, 4);
        let src = |v: &[f64], sy: f64, sx: f64| {
            let sy = sy.max(0.0).min(1.0);
            let sx = sx.max(0.0).min(1.0);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(1);
            let x1 = (x0 + 1).min(1);
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            v[y0 * 2 + x0] * (1.0 - fy) * (1.0 - fx)
                + v[y0 * 2 + x1] * (1.0 - fy) * fx
                + v[y1 * 2 + x0] * fy * (1.0 - fx)
                + v[y1 * 2 + x1] * fy * fx
        };
        for oy in 0..4 {
            for ox in 0..4 {
                let sy = (oy as f64 + 0.5) * 0.5 - 0.5;
                let sx = (ox as f64 + 0.5) * 0.5 - 0.5;
                let expect = src(x.data(), sy, sx);
                let got = y.data()[oy * 4 + ox];
                assert!(
                    (got - expect).abs() < 1e-12,
                    "({oy},{ox}): {got} vs {expect}"
                );
            }
        }
    }
}
