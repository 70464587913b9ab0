//! Direct NCHW convolution kernels (forward, input grad, weight grad) plus
//! the transposed variants used by the reconstruction decoder.
//!
//! Stride-1 paths reduce to row axpy/dot over contiguous slices; strided
//! paths fall back to scalar loops. Batch work is split over a fixed number
//! of chunks, so results do not depend on the thread count.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4, ArrayViewMut3, Axis};
use rayon::prelude::*;

use crate::linalg::{axpy, chunk_ranges, dot};

pub(crate) struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

pub(crate) fn conv_output_hw(
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    (
        (in_h + 2 * pad - kh) / stride + 1,
        (in_w + 2 * pad - kw) / stride + 1,
    )
}

fn pad_sample(x: &ArrayView3<f32>, pad: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    if pad == 0 {
        return x.to_owned();
    }
    let mut out = Array3::zeros((c, h + 2 * pad, w + 2 * pad));
    for ic in 0..c {
        for r in 0..h {
            let src = x.index_axis(Axis(0), ic);
            let src = src.row(r);
            let src = src.to_slice().expect("contiguous row");
            let mut plane = out.index_axis_mut(Axis(0), ic);
            let mut dst = plane.row_mut(r + pad);
            let dst = dst.as_slice_mut().expect("contiguous row");
            dst[pad..pad + w].copy_from_slice(src);
        }
    }
    out
}

fn conv_forward_sample(
    padded: &Array3<f32>,
    weight: &ArrayView4<f32>,
    bias: &[f32],
    geom: &ConvGeom,
    out: &mut ArrayViewMut3<f32>,
) {
    let (out_c, in_per_group, kh, kw) = weight.dim();
    let (oc_total, oh, ow) = out.dim();
    debug_assert_eq!(out_c, oc_total);
    let oc_per_group = out_c / geom.groups;
    for oc in 0..out_c {
        let group = oc / oc_per_group;
        let mut plane = out.index_axis_mut(Axis(0), oc);
        plane.fill(bias[oc]);
        for icg in 0..in_per_group {
            let ic = group * in_per_group + icg;
            let in_plane = padded.index_axis(Axis(0), ic);
            for or in 0..oh {
                let mut orow = plane.row_mut(or);
                let orow = orow.as_slice_mut().expect("contiguous row");
                for kr in 0..kh {
                    let irow = in_plane.row(or * geom.stride + kr);
                    let irow = irow.to_slice().expect("contiguous row");
                    let wrow = weight.slice(ndarray::s![oc, icg, kr, ..]);
                    let wrow = wrow.to_slice().expect("contiguous weight row");
                    if geom.stride == 1 {
                        for kc in 0..kw {
                            axpy(wrow[kc], &irow[kc..kc + ow], orow);
                        }
                    } else {
                        for (ocol, o) in orow.iter_mut().enumerate() {
                            let base = ocol * geom.stride;
                            *o += dot(wrow, &irow[base..base + kw]);
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch: `x [N, C, H, W]` -> `[N, OC, OH, OW]`.
pub(crate) fn conv2d_forward(x: &Array4<f32>, weight: &Array4<f32>, bias: &[f32], geom: &ConvGeom) -> Array4<f32> {
    let (n, _c, h, w) = x.dim();
    let (out_c, _ipg, kh, kw) = weight.dim();
    let (oh, ow) = conv_output_hw(h, w, kh, kw, geom.stride, geom.pad);
    let mut out = Array4::zeros((n, out_c, oh, ow));

    let ranges = chunk_ranges(n);
    let mut chunks = Vec::with_capacity(ranges.len());
    let mut rest = out.view_mut();
    for range in &ranges {
        let (head, tail) = rest.split_at(Axis(0), range.len());
        chunks.push((range.clone(), head));
        rest = tail;
    }
    chunks.into_par_iter().for_each(|(range, mut chunk)| {
        for (slot, i) in range.enumerate() {
            let padded = pad_sample(&x.index_axis(Axis(0), i), geom.pad);
            let mut target = chunk.index_axis_mut(Axis(0), slot);
            conv_forward_sample(&padded, &weight.view(), bias, geom, &mut target);
        }
    });
    out
}

/// Input gradient of the convolution; returns `[N, C, H, W]`.
pub(crate) fn conv2d_backward_input(
    dy: &Array4<f32>,
    weight: &Array4<f32>,
    x_dim: (usize, usize, usize, usize),
    geom: &ConvGeom,
) -> Array4<f32> {
    let (n, c, h, w) = x_dim;
    let (out_c, in_per_group, kh, kw) = weight.dim();
    let (_, _, oh, ow) = dy.dim();
    let oc_per_group = out_c / geom.groups;

    let mut dx = Array4::zeros((n, c, h, w));
    let ranges = chunk_ranges(n);
    let mut chunks = Vec::with_capacity(ranges.len());
    let mut rest = dx.view_mut();
    for range in &ranges {
        let (head, tail) = rest.split_at(Axis(0), range.len());
        chunks.push((range.clone(), head));
        rest = tail;
    }
    chunks.into_par_iter().for_each(|(range, mut chunk)| {
        let mut dpad = Array3::<f32>::zeros((c, h + 2 * geom.pad, w + 2 * geom.pad));
        for (slot, i) in range.enumerate() {
            dpad.fill(0.0);
            let dy_i = dy.index_axis(Axis(0), i);
            for oc in 0..out_c {
                let group = oc / oc_per_group;
                let dy_plane = dy_i.index_axis(Axis(0), oc);
                for icg in 0..in_per_group {
                    let ic = group * in_per_group + icg;
                    let mut dplane = dpad.index_axis_mut(Axis(0), ic);
                    for or in 0..oh {
                        let dyrow = dy_plane.row(or);
                        let dyrow = dyrow.to_slice().expect("contiguous row");
                        for kr in 0..kh {
                            let mut drow = dplane.row_mut(or * geom.stride + kr);
                            let drow = drow.as_slice_mut().expect("contiguous row");
                            let wrow = weight.slice(ndarray::s![oc, icg, kr, ..]);
                            let wrow = wrow.to_slice().expect("contiguous weight row");
                            if geom.stride == 1 {
                                for kc in 0..kw {
                                    axpy(wrow[kc], dyrow, &mut drow[kc..kc + ow]);
                                }
                            } else {
                                for (ocol, &g) in dyrow.iter().enumerate() {
                                    if g != 0.0 {
                                        let base = ocol * geom.stride;
                                        axpy(g, wrow, &mut drow[base..base + kw]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut target = chunk.index_axis_mut(Axis(0), slot);
            for ic in 0..c {
                let dplane = dpad.index_axis(Axis(0), ic);
                let mut tplane = target.index_axis_mut(Axis(0), ic);
                for r in 0..h {
                    let src = dplane.row(r + geom.pad);
                    let src = src.to_slice().expect("contiguous row");
                    let mut dst = tplane.row_mut(r);
                    let dst = dst.as_slice_mut().expect("contiguous row");
                    dst.copy_from_slice(&src[geom.pad..geom.pad + w]);
                }
            }
        }
    });
    dx
}

/// Weight and bias gradients, accumulated over the batch.
pub(crate) fn conv2d_backward_params(
    x: &Array4<f32>,
    dy: &Array4<f32>,
    weight_dim: (usize, usize, usize, usize),
    geom: &ConvGeom,
) -> (Array4<f32>, Vec<f32>) {
    let (n, _c, _h, _w) = x.dim();
    let (out_c, in_per_group, kh, kw) = weight_dim;
    let (_, _, oh, ow) = dy.dim();
    let oc_per_group = out_c / geom.groups;

    let ranges = chunk_ranges(n);
    let partials: Vec<(Array4<f32>, Vec<f32>)> = ranges
        .into_par_iter()
        .map(|range| {
            let mut dw = Array4::<f32>::zeros(weight_dim);
            let mut db = vec![0f32; out_c];
            for i in range {
                let padded = pad_sample(&x.index_axis(Axis(0), i), geom.pad);
                let dy_i = dy.index_axis(Axis(0), i);
                for oc in 0..out_c {
                    let group = oc / oc_per_group;
                    let dy_plane = dy_i.index_axis(Axis(0), oc);
                    db[oc] += dy_plane.sum();
                    for icg in 0..in_per_group {
                        let ic = group * in_per_group + icg;
                        let in_plane = padded.index_axis(Axis(0), ic);
                        for or in 0..oh {
                            let dyrow = dy_plane.row(or);
                            let dyrow = dyrow.to_slice().expect("contiguous row");
                            for kr in 0..kh {
                                let irow = in_plane.row(or * geom.stride + kr);
                                let irow = irow.to_slice().expect("contiguous row");
                                let mut wslice = dw.slice_mut(ndarray::s![oc, icg, kr, ..]);
                                let wrow = wslice.as_slice_mut().expect("contiguous weight row");
                                if geom.stride == 1 {
                                    for kc in 0..kw {
                                        wrow[kc] += dot(dyrow, &irow[kc..kc + ow]);
                                    }
                                } else {
                                    for (ocol, &g) in dyrow.iter().enumerate() {
                                        if g != 0.0 {
                                            let base = ocol * geom.stride;
                                            axpy(g, &irow[base..base + kw], wrow);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (dw, db)
        })
        .collect();

    let mut dw = Array4::zeros(weight_dim);
    let mut db = vec![0f32; out_c];
    for (pw, pb) in partials {
        dw += &pw;
        for (acc, v) in db.iter_mut().zip(pb) {
            *acc += v;
        }
    }
    (dw, db)
}

/// Extended (pre-crop) output length of a transposed convolution axis.
fn tconv_ext(in_len: usize, k: usize, stride: usize) -> usize {
    (in_len - 1) * stride + k
}

/// Output size of a transposed convolution axis after padding removal.
pub(crate) fn tconv_output_len(in_len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    tconv_ext(in_len, k, stride).checked_sub(2 * pad)
}

/// Transposed convolution forward: `x [N, IC, H, W]`, `weight [IC, OC, KH, KW]`.
pub(crate) fn tconv2d_forward(
    x: &Array4<f32>,
    weight: &Array4<f32>,
    bias: &[f32],
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (n, in_c, h, w) = x.dim();
    let (_ic, out_c, kh, kw) = weight.dim();
    let ext_h = tconv_ext(h, kh, stride);
    let ext_w = tconv_ext(w, kw, stride);
    let oh = ext_h - 2 * pad;
    let ow = ext_w - 2 * pad;

    let mut out = Array4::zeros((n, out_c, oh, ow));
    let ranges = chunk_ranges(n);
    let mut chunks = Vec::with_capacity(ranges.len());
    let mut rest = out.view_mut();
    for range in &ranges {
        let (head, tail) = rest.split_at(Axis(0), range.len());
        chunks.push((range.clone(), head));
        rest = tail;
    }
    chunks.into_par_iter().for_each(|(range, mut chunk)| {
        let mut ext = Array3::<f32>::zeros((out_c, ext_h, ext_w));
        for (slot, i) in range.enumerate() {
            ext.fill(0.0);
            let x_i = x.index_axis(Axis(0), i);
            for ic in 0..in_c {
                let x_plane = x_i.index_axis(Axis(0), ic);
                for oc in 0..out_c {
                    let mut ext_plane = ext.index_axis_mut(Axis(0), oc);
                    for ir in 0..h {
                        let xrow = x_plane.row(ir);
                        let xrow = xrow.to_slice().expect("contiguous row");
                        for kr in 0..kh {
                            let mut erow = ext_plane.row_mut(ir * stride + kr);
                            let erow = erow.as_slice_mut().expect("contiguous row");
                            let wrow = weight.slice(ndarray::s![ic, oc, kr, ..]);
                            let wrow = wrow.to_slice().expect("contiguous weight row");
                            for (icol, &v) in xrow.iter().enumerate() {
                                if v != 0.0 {
                                    let base = icol * stride;
                                    axpy(v, wrow, &mut erow[base..base + kw]);
                                }
                            }
                        }
                    }
                }
            }
            let mut target = chunk.index_axis_mut(Axis(0), slot);
            for oc in 0..out_c {
                let ext_plane = ext.index_axis(Axis(0), oc);
                let mut tplane = target.index_axis_mut(Axis(0), oc);
                for r in 0..oh {
                    let src = ext_plane.row(r + pad);
                    let src = src.to_slice().expect("contiguous row");
                    let mut dst = tplane.row_mut(r);
                    let dst = dst.as_slice_mut().expect("contiguous row");
                    dst.copy_from_slice(&src[pad..pad + ow]);
                    for v in dst.iter_mut() {
                        *v += bias[oc];
                    }
                }
            }
        }
    });
    out
}

/// Re-embeds `dy` into the extended (pre-crop) frame of the transposed conv.
fn tconv_extend_dy(dy: &ArrayView3<f32>, ext_h: usize, ext_w: usize, pad: usize) -> Array3<f32> {
    let (out_c, oh, ow) = dy.dim();
    let mut ext = Array3::zeros((out_c, ext_h, ext_w));
    for oc in 0..out_c {
        let src_plane = dy.index_axis(Axis(0), oc);
        let mut dst_plane = ext.index_axis_mut(Axis(0), oc);
        for r in 0..oh {
            let src = src_plane.row(r);
            let src = src.to_slice().expect("contiguous row");
            let mut dst = dst_plane.row_mut(r + pad);
            let dst = dst.as_slice_mut().expect("contiguous row");
            dst[pad..pad + ow].copy_from_slice(src);
        }
    }
    ext
}

/// Input gradient of the transposed convolution; a strided gather.
pub(crate) fn tconv2d_backward_input(
    dy: &Array4<f32>,
    weight: &Array4<f32>,
    x_dim: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (n, in_c, h, w) = x_dim;
    let (_ic, out_c, kh, kw) = weight.dim();
    let ext_h = tconv_ext(h, kh, stride);
    let ext_w = tconv_ext(w, kw, stride);

    let mut dx = Array4::zeros((n, in_c, h, w));
    let ranges = chunk_ranges(n);
    let mut chunks = Vec::with_capacity(ranges.len());
    let mut rest = dx.view_mut();
    for range in &ranges {
        let (head, tail) = rest.split_at(Axis(0), range.len());
        chunks.push((range.clone(), head));
        rest = tail;
    }
    chunks.into_par_iter().for_each(|(range, mut chunk)| {
        for (slot, i) in range.enumerate() {
            let ext = tconv_extend_dy(&dy.index_axis(Axis(0), i), ext_h, ext_w, pad);
            let mut target = chunk.index_axis_mut(Axis(0), slot);
            for ic in 0..in_c {
                let mut dx_plane = target.index_axis_mut(Axis(0), ic);
                for oc in 0..out_c {
                    let ext_plane = ext.index_axis(Axis(0), oc);
                    for ir in 0..h {
                        let mut dxrow = dx_plane.row_mut(ir);
                        let dxrow = dxrow.as_slice_mut().expect("contiguous row");
                        for kr in 0..kh {
                            let erow = ext_plane.row(ir * stride + kr);
                            let erow = erow.to_slice().expect("contiguous row");
                            let wrow = weight.slice(ndarray::s![ic, oc, kr, ..]);
                            let wrow = wrow.to_slice().expect("contiguous weight row");
                            for (icol, d) in dxrow.iter_mut().enumerate() {
                                let base = icol * stride;
                                *d += dot(wrow, &erow[base..base + kw]);
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Weight and bias gradients of the transposed convolution.
pub(crate) fn tconv2d_backward_params(
    x: &Array4<f32>,
    dy: &Array4<f32>,
    weight_dim: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Array4<f32>, Vec<f32>) {
    let (n, in_c, h, _w) = x.dim();
    let (_ic, out_c, kh, kw) = weight_dim;
    let ext_h = tconv_ext(h, kh, stride);
    let ext_w = tconv_ext(x.dim().3, kw, stride);

    let ranges = chunk_ranges(n);
    let partials: Vec<(Array4<f32>, Vec<f32>)> = ranges
        .into_par_iter()
        .map(|range| {
            let mut dw = Array4::<f32>::zeros(weight_dim);
            let mut db = vec![0f32; out_c];
            for i in range {
                let ext = tconv_extend_dy(&dy.index_axis(Axis(0), i), ext_h, ext_w, pad);
                let x_i = x.index_axis(Axis(0), i);
                for oc in 0..out_c {
                    db[oc] += dy.index_axis(Axis(0), i).index_axis(Axis(0), oc).sum();
                }
                for ic in 0..in_c {
                    let x_plane = x_i.index_axis(Axis(0), ic);
                    for oc in 0..out_c {
                        let ext_plane = ext.index_axis(Axis(0), oc);
                        for ir in 0..h {
                            let xrow = x_plane.row(ir);
                            let xrow = xrow.to_slice().expect("contiguous row");
                            for kr in 0..kh {
                                let erow = ext_plane.row(ir * stride + kr);
                                let erow = erow.to_slice().expect("contiguous row");
                                let mut wslice = dw.slice_mut(ndarray::s![ic, oc, kr, ..]);
                                let wrow = wslice.as_slice_mut().expect("contiguous weight row");
                                for (icol, &v) in xrow.iter().enumerate() {
                                    if v != 0.0 {
                                        let base = icol * stride;
                                        axpy(v, &erow[base..base + kw], wrow);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (dw, db)
        })
        .collect();

    let mut dw = Array4::zeros(weight_dim);
    let mut db = vec![0f32; out_c];
    for (pw, pb) in partials {
        dw += &pw;
        for (acc, v) in db.iter_mut().zip(pb) {
            *acc += v;
        }
    }
    (dw, db)
}
