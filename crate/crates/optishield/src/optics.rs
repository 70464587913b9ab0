//! Discretized simulation of the amplitude-mask optical convolution front-end.
//!
//! A transmissive mask with per-point transmission in [0, 1] sits in front of
//! the image sensor and convolves the scene with a large kernel before any
//! digital processing. The discrete model is a zero-padded strided
//! cross-correlation of the input image with the mask weights, optionally
//! modulated by a radial attenuation profile. The kernel flip of the physical
//! convolution is absorbed by training, so plain cross-correlation is used
//! throughout.
//!
//! `optical_forward_reference` is an intentionally naive re-implementation of
//! the same contract (quadruple loops, f64 accumulation, no shared code with
//! the fast path) and serves as the correctness oracle.

use std::borrow::Cow;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{axpy, chunk_ranges, dot};

/// Sensor and mask geometry of the optical front-end.
///
/// `scale_alpha` and `scale_gamma` are the physical magnification scalars of
/// the continuous model; they are absorbed into the discrete pixel grid and
/// carried here purely as documentation of the physical setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorGeometry {
    /// Mask resolution (rows, cols).
    pub kernel_size: (usize, usize),
    /// Input image resolution (rows, cols).
    pub input_size: (usize, usize),
    /// Zero padding per side, in input pixels.
    pub pad: usize,
    /// Sensor pixel pitch expressed as a sampling stride.
    pub stride: usize,
    /// Optional sampled radial attenuation T(u), interpolated linearly over
    /// normalized mask radius [0, 1] (0 = mask center, 1 = mask corner).
    /// `None` means the profile is constant 1.
    pub radial_profile: Option<Vec<f32>>,
    pub scale_alpha: f32,
    pub scale_gamma: f32,
}

impl Default for SensorGeometry {
    fn default() -> Self {
        Self {
            kernel_size: (100, 100),
            input_size: (64, 64),
            pad: 49,
            stride: 2,
            radial_profile: None,
            scale_alpha: 1.0,
            scale_gamma: 1.0,
        }
    }
}

impl SensorGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.0 == 0 || self.kernel_size.1 == 0 {
            return Err(Error::Geometry("kernel size must be positive".into()));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(Error::Geometry("input size must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Geometry("stride must be >= 1".into()));
        }
        if let Some(profile) = &self.radial_profile {
            if profile.is_empty() {
                return Err(Error::Geometry("radial profile must not be empty".into()));
            }
        }
        self.output_size().map(|_| ())
    }

    /// Sensor resolution: `floor((input + 2*pad - kernel)/stride) + 1` per axis.
    pub fn output_size(&self) -> Result<(usize, usize)> {
        let out_axis = |input: usize, kernel: usize| -> Result<usize> {
            let padded = input + 2 * self.pad;
            if padded < kernel {
                return Err(Error::Geometry(format!(
                    "kernel {kernel} larger than padded input {padded}"
                )));
            }
            Ok((padded - kernel) / self.stride + 1)
        };
        Ok((
            out_axis(self.input_size.0, self.kernel_size.0)?,
            out_axis(self.input_size.1, self.kernel_size.1)?,
        ))
    }

    /// Fixed gain applied at the optical-digital boundary, `1/(kh*kw)`.
    ///
    /// The forward model produces raw tap sums; dividing by the tap count
    /// turns them into weighted window means in [0, 1] for inputs in [0, 1],
    /// which is the scale the digital networks are trained at. Physically
    /// this is the sensor exposure normalization absorbed from the continuous
    /// model's scale factors.
    pub fn digital_gain(&self) -> f32 {
        1.0 / (self.kernel_size.0 as f32 * self.kernel_size.1 as f32)
    }

    /// Samples the radial profile at mask tap (kr, kc). Constant 1 when no
    /// profile is configured.
    pub fn radial_at(&self, kr: usize, kc: usize) -> f32 {
        let Some(profile) = &self.radial_profile else {
            return 1.0;
        };
        let (kh, kw) = self.kernel_size;
        let cy = (kh as f32 - 1.0) / 2.0;
        let cx = (kw as f32 - 1.0) / 2.0;
        let max_r = (cy * cy + cx * cx).sqrt();
        let dy = kr as f32 - cy;
        let dx = kc as f32 - cx;
        let r = if max_r > 0.0 {
            (dy * dy + dx * dx).sqrt() / max_r
        } else {
            0.0
        };
        sample_profile(profile, r)
    }
}

fn sample_profile(profile: &[f32], r: f32) -> f32 {
    if profile.len() == 1 {
        return profile[0];
    }
    let pos = r.clamp(0.0, 1.0) * (profile.len() - 1) as f32;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(profile.len() - 1);
    let frac = pos - lo as f32;
    profile[lo] * (1.0 - frac) + profile[hi] * frac
}

/// Trainable transmission mask with box-constrained weights.
///
/// Immutable snapshot: training steps produce new kernels via
/// [`OpticalKernel::with_weights`], never in-place mutation, so kernels can be
/// shared freely across threads.
#[derive(Clone, Debug)]
pub struct OpticalKernel {
    weights: Array2<f32>,
    geometry: SensorGeometry,
}

impl OpticalKernel {
    /// Builds a kernel from weights that already satisfy the box constraint.
    pub fn new(weights: Array2<f32>, geometry: SensorGeometry) -> Result<Self> {
        geometry.validate()?;
        if weights.dim() != geometry.kernel_size {
            return Err(Error::Shape(format!(
                "kernel weights {:?} do not match geometry kernel_size {:?}",
                weights.dim(),
                geometry.kernel_size
            )));
        }
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Config(
                "kernel weights outside [0, 1]; project first".into(),
            ));
        }
        Ok(Self { weights, geometry })
    }

    /// Projects arbitrary weights onto the physical box and builds a kernel.
    pub fn from_unconstrained(weights: Array2<f32>, geometry: SensorGeometry) -> Result<Self> {
        Self::new(project_physical(&weights), geometry)
    }

    /// Replaces the weights (projected) keeping the geometry.
    pub fn with_weights(&self, weights: Array2<f32>) -> Result<Self> {
        Self::from_unconstrained(weights, self.geometry.clone())
    }

    pub fn weights(&self) -> &Array2<f32> {
        &self.weights
    }

    pub fn geometry(&self) -> &SensorGeometry {
        &self.geometry
    }

    /// Mask weights with the radial attenuation baked in. Borrows when no
    /// profile is configured (the default).
    pub fn effective_weights(&self) -> Cow<'_, Array2<f32>> {
        if self.geometry.radial_profile.is_none() {
            return Cow::Borrowed(&self.weights);
        }
        let (kh, kw) = self.geometry.kernel_size;
        let mut eff = self.weights.clone();
        for kr in 0..kh {
            for kc in 0..kw {
                eff[[kr, kc]] *= self.geometry.radial_at(kr, kc);
            }
        }
        Cow::Owned(eff)
    }

    /// SHA-256 of the little-endian weight bytes; identifies the exact mask.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for w in self.weights.iter() {
            hasher.update(w.to_le_bytes());
        }
        format!("{:x}", hasher.finalize())
    }
}

/// Light intensity pattern on the image sensor; the only data that ever
/// enters the digital domain.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    values: Array2<f32>,
}

impl FeatureMap {
    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f32> {
        self.values
    }
}

/// Elementwise clamp onto the physically realizable box [0, 1].
///
/// Idempotent; transmission 0 is opaque, 1 fully transparent.
pub fn project_physical(weights: &Array2<f32>) -> Array2<f32> {
    weights.mapv(|w| w.clamp(0.0, 1.0))
}

/// Kernel initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Uniform draws over [0, 1].
    Uniform,
    /// 0.5 + uniform(-0.1, 0.1): keeps the mask away from the saturation
    /// boundary where projected gradients die.
    MidpointNoise,
}

/// Deterministic mask initialization; same seed, same weights.
pub fn init_kernel(geometry: &SensorGeometry, seed: u64, scheme: InitScheme) -> Result<OpticalKernel> {
    geometry.validate()?;
    let (kh, kw) = geometry.kernel_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Array2::from_shape_simple_fn((kh, kw), || match scheme {
        InitScheme::Uniform => rng.gen_range(0.0..1.0),
        InitScheme::MidpointNoise => 0.5 + rng.gen_range(-0.1..0.1),
    });
    OpticalKernel::new(weights, geometry.clone())
}

fn check_image_shape(image_dim: (usize, usize), geometry: &SensorGeometry) -> Result<()> {
    if image_dim != geometry.input_size {
        return Err(Error::Shape(format!(
            "image {:?} does not match geometry input_size {:?}",
            image_dim, geometry.input_size
        )));
    }
    Ok(())
}

fn pad_into(image: &Array2<f32>, pad: usize, padded: &mut Array2<f32>) {
    let (h, w) = image.dim();
    for r in 0..h {
        let src = image.row(r);
        let src = src.as_slice().expect("image rows are contiguous");
        let mut dst = padded.row_mut(r + pad);
        let dst = dst.as_slice_mut().expect("padded rows are contiguous");
        dst[pad..pad + w].copy_from_slice(src);
    }
}

const LANES: usize = 16;

/// Weight rows zero-padded to a multiple of [`LANES`] so the hot loop runs
/// without remainder handling. The padded image buffer is widened by the same
/// slack; the extra taps multiply zero weights.
fn pad_weight_rows(weights: &Array2<f32>) -> (Vec<f32>, usize) {
    let (kh, kw) = weights.dim();
    let kw_pad = kw.div_ceil(LANES) * LANES;
    let mut out = vec![0f32; kh * kw_pad];
    for kr in 0..kh {
        let src = weights.row(kr);
        let src = src.as_slice().expect("weight rows are contiguous");
        out[kr * kw_pad..kr * kw_pad + kw].copy_from_slice(src);
    }
    (out, kw_pad)
}

#[inline(always)]
fn fma_lanes(acc: &mut [f32; LANES], w: &[f32], p: &[f32]) {
    let w: &[f32; LANES] = w.try_into().expect("lane chunk");
    let p: &[f32; LANES] = p.try_into().expect("lane chunk");
    for l in 0..LANES {
        acc[l] = w[l].mul_add(p[l], acc[l]);
    }
}

const TILE: usize = 32;

#[inline(always)]
fn fma_tile(acc: &mut [f32; TILE], w: f32, p: &[f32]) {
    let p: &[f32; TILE] = p.try_into().expect("tile chunk");
    for l in 0..TILE {
        acc[l] = w.mul_add(p[l], acc[l]);
    }
}

/// Column-deinterleaved copy of a padded image: `even[r][i] = row[2i]`,
/// `odd[r][i] = row[2i+1]`, rows padded with `TILE` zero columns of slack.
struct Deinterleaved {
    even: Vec<f32>,
    odd: Vec<f32>,
    row_len: usize,
}

fn deinterleave_columns(padded: &Array2<f32>) -> Deinterleaved {
    let (ph, pw) = padded.dim();
    let half = pw.div_ceil(2);
    let row_len = half + TILE;
    let mut even = vec![0f32; ph * row_len];
    let mut odd = vec![0f32; ph * row_len];
    for r in 0..ph {
        let row = padded.row(r);
        let row = row.as_slice().expect("padded rows are contiguous");
        let e = &mut even[r * row_len..];
        let o = &mut odd[r * row_len..];
        for (i, pair) in row.chunks(2).enumerate() {
            e[i] = pair[0];
            if pair.len() > 1 {
                o[i] = pair[1];
            }
        }
    }
    Deinterleaved { even, odd, row_len }
}

/// Stride-2 forward specialization. Holding a 32-wide output tile in four
/// rotating accumulator chains turns the strided windows into contiguous
/// broadcast-FMA streams over the deinterleaved image columns.
fn forward_one_stride2(
    plan: &Stride2Plan,
    de: &Deinterleaved,
    out: &mut Array2<f32>,
) {
    let (oh, ow) = out.dim();
    let kh = plan.kh;
    let half = plan.half;
    let kh4 = kh / 4 * 4;
    let mut oc0 = 0usize;
    while oc0 < ow {
        let tile_len = TILE.min(ow - oc0);
        for or in 0..oh {
            let mut acc = [[0f32; TILE]; 4];
            let row0 = 2 * or;
            let mut kr = 0usize;
            while kr < kh4 {
                // Four kernel rows per pass, one accumulator chain each.
                for k in 0..4 {
                    let r = row0 + kr + k;
                    let pe = &de.even[r * de.row_len + oc0..];
                    let po = &de.odd[r * de.row_len + oc0..];
                    let we = &plan.even[(kr + k) * half..(kr + k + 1) * half];
                    let wo = &plan.odd[(kr + k) * half..(kr + k + 1) * half];
                    for j in 0..half {
                        fma_tile(&mut acc[k], we[j], &pe[j..j + TILE]);
                        fma_tile(&mut acc[k], wo[j], &po[j..j + TILE]);
                    }
                }
                kr += 4;
            }
            while kr < kh {
                let r = row0 + kr;
                let pe = &de.even[r * de.row_len + oc0..];
                let po = &de.odd[r * de.row_len + oc0..];
                let we = &plan.even[kr * half..(kr + 1) * half];
                let wo = &plan.odd[kr * half..(kr + 1) * half];
                for j in 0..half {
                    fma_tile(&mut acc[0], we[j], &pe[j..j + TILE]);
                    fma_tile(&mut acc[0], wo[j], &po[j..j + TILE]);
                }
                kr += 1;
            }
            let mut orow = out.row_mut(or);
            let orow = orow.as_slice_mut().expect("output rows are contiguous");
            for l in 0..tile_len {
                orow[oc0 + l] = (acc[0][l] + acc[1][l]) + (acc[2][l] + acc[3][l]);
            }
        }
        oc0 += TILE;
    }
}

/// Deinterleaved kernel weights for the stride-2 path.
struct Stride2Plan {
    even: Vec<f32>,
    odd: Vec<f32>,
    kh: usize,
    half: usize,
}

impl Stride2Plan {
    /// Applicable when the stride is 2 and the kernel width is even.
    fn build(weights: &Array2<f32>, stride: usize) -> Option<Self> {
        let (kh, kw) = weights.dim();
        if stride != 2 || kw % 2 != 0 || kh == 0 {
            return None;
        }
        let half = kw / 2;
        let mut even = vec![0f32; kh * half];
        let mut odd = vec![0f32; kh * half];
        for kr in 0..kh {
            let row = weights.row(kr);
            let row = row.as_slice().expect("weight rows are contiguous");
            for j in 0..half {
                even[kr * half + j] = row[2 * j];
                odd[kr * half + j] = row[2 * j + 1];
            }
        }
        Some(Self { even, odd, kh, half })
    }
}

fn forward_one(
    padded: &Array2<f32>,
    wpad: &[f32],
    kh: usize,
    kw_pad: usize,
    stride: usize,
    out: &mut Array2<f32>,
) {
    let (oh, ow) = out.dim();
    let prow_len = padded.dim().1;
    let pflat = padded.as_slice().expect("padded buffer is contiguous");
    let kh4 = kh / 4 * 4;
    for or in 0..oh {
        let row_base = or * stride * prow_len;
        let mut orow = out.row_mut(or);
        let orow = orow.as_slice_mut().expect("output rows are contiguous");
        for (oc, o) in orow.iter_mut().enumerate() {
            // Four independent accumulator chains (one per kernel row in the
            // group) hide the FMA latency; reduced once per output pixel.
            let mut acc = [[0f32; LANES]; 4];
            let col_base = oc * stride;
            let mut kr = 0usize;
            while kr < kh4 {
                let w0 = &wpad[kr * kw_pad..(kr + 1) * kw_pad];
                let w1 = &wpad[(kr + 1) * kw_pad..(kr + 2) * kw_pad];
                let w2 = &wpad[(kr + 2) * kw_pad..(kr + 3) * kw_pad];
                let w3 = &wpad[(kr + 3) * kw_pad..(kr + 4) * kw_pad];
                let p0 = &pflat[row_base + kr * prow_len + col_base..][..kw_pad];
                let p1 = &pflat[row_base + (kr + 1) * prow_len + col_base..][..kw_pad];
                let p2 = &pflat[row_base + (kr + 2) * prow_len + col_base..][..kw_pad];
                let p3 = &pflat[row_base + (kr + 3) * prow_len + col_base..][..kw_pad];
                let it = w0
                    .chunks_exact(LANES)
                    .zip(p0.chunks_exact(LANES))
                    .zip(w1.chunks_exact(LANES).zip(p1.chunks_exact(LANES)))
                    .zip(w2.chunks_exact(LANES).zip(p2.chunks_exact(LANES)))
                    .zip(w3.chunks_exact(LANES).zip(p3.chunks_exact(LANES)));
                for ((((wc0, pc0), (wc1, pc1)), (wc2, pc2)), (wc3, pc3)) in it {
                    fma_lanes(&mut acc[0], wc0, pc0);
                    fma_lanes(&mut acc[1], wc1, pc1);
                    fma_lanes(&mut acc[2], wc2, pc2);
                    fma_lanes(&mut acc[3], wc3, pc3);
                }
                kr += 4;
            }
            while kr < kh {
                let w = &wpad[kr * kw_pad..(kr + 1) * kw_pad];
                let p = &pflat[row_base + kr * prow_len + col_base..][..kw_pad];
                for (wc, pc) in w.chunks_exact(LANES).zip(p.chunks_exact(LANES)) {
                    fma_lanes(&mut acc[0], wc, pc);
                }
                kr += 1;
            }
            let mut sum = 0f32;
            for chain in &acc {
                for chunk in chain.chunks_exact(4) {
                    sum += (chunk[0] + chunk[1]) + (chunk[2] + chunk[3]);
                }
            }
            *o = sum;
        }
    }
}

/// Signal reaching the image sensor for one input image.
///
/// Zero-padded strided cross-correlation of `image` with the mask weights,
/// modulated by the radial profile. Bilinear: linear in the image for a fixed
/// kernel and linear in the kernel for a fixed image.
pub fn optical_forward(image: &Array2<f32>, kernel: &OpticalKernel) -> Result<FeatureMap> {
    let geometry = kernel.geometry();
    check_image_shape(image.dim(), geometry)?;
    let (oh, ow) = geometry.output_size()?;
    let (h, w) = geometry.input_size;
    let (kh, kw) = geometry.kernel_size;
    let weights = kernel.effective_weights();
    let (wpad, kw_pad) = pad_weight_rows(&weights);
    let plan = Stride2Plan::build(&weights, geometry.stride);

    let mut padded = Array2::zeros((h + 2 * geometry.pad, w + 2 * geometry.pad + kw_pad - kw));
    pad_into(image, geometry.pad, &mut padded);
    let mut out = Array2::zeros((oh, ow));
    match &plan {
        Some(plan) => forward_one_stride2(plan, &deinterleave_columns(&padded), &mut out),
        None => forward_one(&padded, &wpad, kh, kw_pad, geometry.stride, &mut out),
    }
    Ok(FeatureMap { values: out })
}

/// Batched forward pass over `[n, h, w]` images; returns `[n, oh, ow]`.
///
/// Work is split over a fixed number of chunks so the result does not depend
/// on the thread count.
pub fn optical_forward_batch(images: &Array3<f32>, kernel: &OpticalKernel) -> Result<Array3<f32>> {
    let geometry = kernel.geometry();
    let n = images.dim().0;
    check_image_shape((images.dim().1, images.dim().2), geometry)?;
    let (oh, ow) = geometry.output_size()?;
    let (h, w) = geometry.input_size;
    let (kh, kw) = geometry.kernel_size;
    let weights = kernel.effective_weights();
    let (wpad, kw_pad) = pad_weight_rows(&weights);
    let plan = Stride2Plan::build(&weights, geometry.stride);
    let stride = geometry.stride;
    let pad = geometry.pad;

    let mut out = Array3::zeros((n, oh, ow));
    let ranges = chunk_ranges(n);
    let mut out_chunks: Vec<_> = Vec::with_capacity(ranges.len());
    let mut rest = out.view_mut();
    for range in &ranges {
        let (head, tail) = rest.split_at(Axis(0), range.len());
        out_chunks.push((range.clone(), head));
        rest = tail;
    }
    out_chunks.into_par_iter().for_each(|(range, mut chunk)| {
        let mut padded = Array2::zeros((h + 2 * pad, w + 2 * pad + kw_pad - kw));
        for (slot, i) in range.enumerate() {
            pad_into(&images.index_axis(Axis(0), i).to_owned(), pad, &mut padded);
            let mut target = chunk.index_axis_mut(Axis(0), slot);
            let mut local = Array2::zeros((oh, ow));
            match &plan {
                Some(plan) => forward_one_stride2(plan, &deinterleave_columns(&padded), &mut local),
                None => forward_one(&padded, &wpad, kh, kw_pad, stride, &mut local),
            }
            target.assign(&local);
        }
    });
    Ok(out)
}

/// Gradient of a scalar loss w.r.t. the mask weights given the upstream
/// gradient on the feature maps (`[n, oh, ow]`). Accumulated over the batch;
/// the radial modulation is part of the chain.
pub fn optical_backward_kernel(
    images: &Array3<f32>,
    upstream: &Array3<f32>,
    kernel: &OpticalKernel,
) -> Result<Array2<f32>> {
    let geometry = kernel.geometry();
    let n = images.dim().0;
    check_image_shape((images.dim().1, images.dim().2), geometry)?;
    let (oh, ow) = geometry.output_size()?;
    if upstream.dim() != (n, oh, ow) {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match feature shape {:?}",
            upstream.dim(),
            (n, oh, ow)
        )));
    }
    let (h, w) = geometry.input_size;
    let (kh, kw) = geometry.kernel_size;
    let stride = geometry.stride;
    let pad = geometry.pad;

    let ranges = chunk_ranges(n);
    let partials: Vec<Array2<f32>> = ranges
        .into_par_iter()
        .map(|range| {
            let mut grad = Array2::<f32>::zeros((kh, kw));
            let mut padded = Array2::zeros((h + 2 * pad, w + 2 * pad));
            for i in range {
                pad_into(&images.index_axis(Axis(0), i).to_owned(), pad, &mut padded);
                let up = upstream.index_axis(Axis(0), i);
                for or in 0..oh {
                    for kr in 0..kh {
                        let prow = padded.row(or * stride + kr);
                        let prow = prow.as_slice().expect("padded rows are contiguous");
                        let mut grow = grad.row_mut(kr);
                        let grow = grow.as_slice_mut().expect("grad rows are contiguous");
                        for oc in 0..ow {
                            let g = up[[or, oc]];
                            if g != 0.0 {
                                axpy(g, &prow[oc * stride..oc * stride + kw], grow);
                            }
                        }
                    }
                }
            }
            grad
        })
        .collect();

    let mut grad = Array2::zeros((kh, kw));
    for partial in partials {
        grad += &partial;
    }
    if kernel.geometry().radial_profile.is_some() {
        for kr in 0..kh {
            for kc in 0..kw {
                grad[[kr, kc]] *= geometry.radial_at(kr, kc);
            }
        }
    }
    Ok(grad)
}

/// Gradient of a scalar loss w.r.t. the input images given the upstream
/// gradient on the feature maps. Returned as `[n, h, w]`.
pub fn optical_backward_image(upstream: &Array3<f32>, kernel: &OpticalKernel) -> Result<Array3<f32>> {
    let geometry = kernel.geometry();
    let (oh, ow) = geometry.output_size()?;
    let n = upstream.dim().0;
    if (upstream.dim().1, upstream.dim().2) != (oh, ow) {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match feature shape {:?}",
            upstream.dim(),
            (oh, ow)
        )));
    }
    let (h, w) = geometry.input_size;
    let (kh, kw) = geometry.kernel_size;
    let stride = geometry.stride;
    let pad = geometry.pad;
    let weights = kernel.effective_weights();

    let ranges = chunk_ranges(n);
    let mut out = Array3::zeros((n, h, w));
    let mut out_chunks: Vec<_> = Vec::with_capacity(ranges.len());
    let mut rest = out.view_mut();
    for range in &ranges {
        let (head, tail) = rest.split_at(Axis(0), range.len());
        out_chunks.push((range.clone(), head));
        rest = tail;
    }
    out_chunks.into_par_iter().for_each(|(range, mut chunk)| {
        let mut dpad = Array2::<f32>::zeros((h + 2 * pad, w + 2 * pad));
        for (slot, i) in range.enumerate() {
            dpad.fill(0.0);
            let up = upstream.index_axis(Axis(0), i);
            for or in 0..oh {
                for kr in 0..kh {
                    let wrow = weights.row(kr);
                    let wrow = wrow.as_slice().expect("weight rows are contiguous");
                    let mut drow = dpad.row_mut(or * stride + kr);
                    let drow = drow.as_slice_mut().expect("padded rows are contiguous");
                    for oc in 0..ow {
                        let g = up[[or, oc]];
                        if g != 0.0 {
                            axpy(g, wrow, &mut drow[oc * stride..oc * stride + kw]);
                        }
                    }
                }
            }
            let mut target = chunk.index_axis_mut(Axis(0), slot);
            for r in 0..h {
                let src = dpad.row(r + pad);
                let src = src.as_slice().expect("padded rows are contiguous");
                let mut dst = target.row_mut(r);
                let dst = dst.as_slice_mut().expect("output rows are contiguous");
                dst.copy_from_slice(&src[pad..pad + w]);
            }
        }
    });
    Ok(out)
}

/// Brute-force reference for [`optical_forward`]: explicit quadruple loops
/// over output positions and kernel taps, f64 accumulation, direct indexing
/// of the unpadded image. Shares no code with the fast path; intended for
/// small instances only.
pub fn optical_forward_reference(image: &Array2<f32>, kernel: &OpticalKernel) -> Result<FeatureMap> {
    let geometry = kernel.geometry();
    check_image_shape(image.dim(), geometry)?;
    let (oh, ow) = geometry.output_size()?;
    let (h, w) = geometry.input_size;
    let (kh, kw) = geometry.kernel_size;
    let pad = geometry.pad as isize;
    let stride = geometry.stride as isize;

    // Independent radial sampling (duplicated on purpose).
    let radial = |kr: usize, kc: usize| -> f64 {
        match &geometry.radial_profile {
            None => 1.0,
            Some(profile) => {
                if profile.len() == 1 {
                    return profile[0] as f64;
                }
                let cy = (kh as f64 - 1.0) / 2.0;
                let cx = (kw as f64 - 1.0) / 2.0;
                let max_r = (cy * cy + cx * cx).sqrt();
                let r = if max_r > 0.0 {
                    (((kr as f64 - cy).powi(2) + (kc as f64 - cx).powi(2)).sqrt() / max_r)
                        .clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let pos = r * (profile.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(profile.len() - 1);
                let frac = pos - lo as f64;
                profile[lo] as f64 * (1.0 - frac) + profile[hi] as f64 * frac
            }
        }
    };

    let mut out = Array2::zeros((oh, ow));
    for or in 0..oh {
        for oc in 0..ow {
            let mut acc = 0f64;
            for kr in 0..kh {
                for kc in 0..kw {
                    let ir = or as isize * stride + kr as isize - pad;
                    let ic = oc as isize * stride + kc as isize - pad;
                    if ir >= 0 && ic >= 0 && (ir as usize) < h && (ic as usize) < w {
                        acc += image[[ir as usize, ic as usize]] as f64
                            * kernel.weights[[kr, kc]] as f64
                            * radial(kr, kc);
                    }
                }
            }
            out[[or, oc]] = acc as f32;
        }
    }
    Ok(FeatureMap { values: out })
}

/// Mask export formats. CSV is lossless; PNG quantizes to the stated depth
/// with round-half-up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFormat {
    Png8,
    Png16,
    Csv,
}

impl std::str::FromStr for MaskFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png8" => Ok(MaskFormat::Png8),
            "png16" => Ok(MaskFormat::Png16),
            "csv" => Ok(MaskFormat::Csv),
            other => Err(Error::Format(format!(
                "unknown mask format {other:?} (expected png8, png16 or csv)"
            ))),
        }
    }
}

/// Quantizes a transmission value to the given bit depth, round-half-up.
pub fn quantize(w: f32, bits: u32) -> u32 {
    let max = (1u64 << bits) as f32 - 1.0;
    (w.clamp(0.0, 1.0) * max).round() as u32
}

/// Writes the mask to `path` in the requested fabrication format.
pub fn export_mask(kernel: &OpticalKernel, format: MaskFormat, path: &Path) -> Result<()> {
    let (kh, kw) = kernel.geometry().kernel_size;
    match format {
        MaskFormat::Csv => {
            let mut text = String::new();
            for kr in 0..kh {
                for kc in 0..kw {
                    if kc > 0 {
                        text.push(',');
                    }
                    // f32 Display prints the shortest exact round-trip form.
                    text.push_str(&kernel.weights[[kr, kc]].to_string());
                }
                text.push('\n');
            }
            std::fs::write(path, text)?;
        }
        MaskFormat::Png8 => {
            let mut img = image::GrayImage::new(kw as u32, kh as u32);
            for kr in 0..kh {
                for kc in 0..kw {
                    img.put_pixel(
                        kc as u32,
                        kr as u32,
                        image::Luma([quantize(kernel.weights[[kr, kc]], 8) as u8]),
                    );
                }
            }
            img.save(path)?;
        }
        MaskFormat::Png16 => {
            let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
                kw as u32, kh as u32,
            );
            for kr in 0..kh {
                for kc in 0..kw {
                    img.put_pixel(
                        kc as u32,
                        kr as u32,
                        image::Luma([quantize(kernel.weights[[kr, kc]], 16) as u16]),
                    );
                }
            }
            img.save(path)?;
        }
    }
    Ok(())
}

/// Reads a CSV mask back; bit-exact inverse of the CSV export.
pub fn import_mask_csv(path: &Path, geometry: SensorGeometry) -> Result<OpticalKernel> {
    let text = std::fs::read_to_string(path)?;
    let (kh, kw) = geometry.kernel_size;
    let mut weights = Array2::zeros((kh, kw));
    let mut rows = 0usize;
    for (kr, line) in text.lines().enumerate() {
        if kr >= kh {
            return Err(Error::Format(format!("mask CSV has more than {kh} rows")));
        }
        let mut cols = 0usize;
        for (kc, field) in line.split(',').enumerate() {
            if kc >= kw {
                return Err(Error::Format(format!("mask CSV row {kr} has more than {kw} columns")));
            }
            weights[[kr, kc]] = field.trim().parse::<f32>().map_err(|e| {
                Error::Format(format!("mask CSV row {kr}, column {kc}: {e}"))
            })?;
            cols += 1;
        }
        if cols != kw {
            return Err(Error::Format(format!(
                "mask CSV row {kr} has {cols} columns, expected {kw}"
            )));
        }
        rows += 1;
    }
    if rows != kh {
        return Err(Error::Format(format!("mask CSV has {rows} rows, expected {kh}")));
    }
    OpticalKernel::new(weights, geometry)
}

/// Reads a PNG mask back, dequantizing by the image bit depth.
pub fn import_mask_png(path: &Path, geometry: SensorGeometry) -> Result<OpticalKernel> {
    let img = image::open(path)?;
    let (kh, kw) = geometry.kernel_size;
    if (img.height() as usize, img.width() as usize) != (kh, kw) {
        return Err(Error::Shape(format!(
            "mask PNG is {}x{}, geometry expects {}x{}",
            img.height(),
            img.width(),
            kh,
            kw
        )));
    }
    let weights = match img {
        image::DynamicImage::ImageLuma8(buf) => Array2::from_shape_fn((kh, kw), |(kr, kc)| {
            buf.get_pixel(kc as u32, kr as u32).0[0] as f32 / 255.0
        }),
        image::DynamicImage::ImageLuma16(buf) => Array2::from_shape_fn((kh, kw), |(kr, kc)| {
            buf.get_pixel(kc as u32, kr as u32).0[0] as f32 / 65535.0
        }),
        other => {
            let buf = other.into_luma16();
            Array2::from_shape_fn((kh, kw), |(kr, kc)| {
                buf.get_pixel(kc as u32, kr as u32).0[0] as f32 / 65535.0
            })
        }
    };
    OpticalKernel::new(weights, geometry)
}
