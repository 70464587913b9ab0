//! Declarative registry of the digital networks: attribute classifiers over
//! the sensor features and the feature-inversion decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::tconv_output_len;
use crate::nn::{BatchNorm2d, Conv2d, Layer, Linear, Net, TConv2d};
use crate::optics::SensorGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    SmallCnn,
    Vgg11Like,
    Mobilenetv2Like,
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-cnn" => Ok(Backbone::SmallCnn),
            "vgg11-like" => Ok(Backbone::Vgg11Like),
            "mobilenetv2-like" => Ok(Backbone::Mobilenetv2Like),
            other => Err(Error::Config(format!("unknown backbone {other:?}"))),
        }
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Backbone::SmallCnn => "small-cnn",
            Backbone::Vgg11Like => "vgg11-like",
            Backbone::Mobilenetv2Like => "mobilenetv2-like",
        };
        f.write_str(s)
    }
}

/// Describes a 2-way classifier over single-channel sensor features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSpec {
    pub backbone: Backbone,
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_size: (usize, usize),
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            backbone: Backbone::SmallCnn,
            in_channels: 1,
            num_classes: 2,
            input_size: (32, 32),
        }
    }
}

impl ClassifierSpec {
    pub fn with_backbone(backbone: Backbone) -> Self {
        Self { backbone, ..Self::default() }
    }
}

/// Builds a classifier with deterministic per-seed initialization.
pub fn build_classifier(spec: &ClassifierSpec, seed: u64) -> Result<Net> {
    if spec.num_classes < 2 {
        return Err(Error::Config("classifier needs at least 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec.backbone {
        Backbone::SmallCnn => build_small_cnn(spec, &mut rng),
        Backbone::Vgg11Like => build_vgg11(spec, &mut rng),
        Backbone::Mobilenetv2Like => build_mobilenetv2(spec, &mut rng),
    }
}

/// conv16-relu-pool-conv32-relu-pool-fc64-relu-fc2, 3x3 kernels with padding
/// 1 so the pools do all the downsampling. Sized for minutes-scale CPU runs.
fn build_small_cnn(spec: &ClassifierSpec, rng: &mut ChaCha8Rng) -> Result<Net> {
    let (h, w) = spec.input_size;
    if h < 4 || w < 4 {
        return Err(Error::Config(format!("input {h}x{w} too small for small-cnn")));
    }
    let flat = 32 * (h / 4) * (w / 4);
    Ok(Net::new(vec![
        Layer::Conv(Conv2d::he_init(rng, spec.in_channels, 16, 3, 1, 1, 1)),
        Layer::ReLU,
        Layer::MaxPool2,
        Layer::Conv(Conv2d::he_init(rng, 16, 32, 3, 1, 1, 1)),
        Layer::ReLU,
        Layer::MaxPool2,
        Layer::Flatten,
        Layer::Linear(Linear::he_init(rng, flat, 64)),
        Layer::ReLU,
        Layer::Linear(Linear::he_init(rng, 64, spec.num_classes)),
    ]))
}

/// VGG11 feature stack adapted to one input channel and a small head. Pools
/// that would shrink a dimension below 1 are dropped from the tail.
fn build_vgg11(spec: &ClassifierSpec, rng: &mut ChaCha8Rng) -> Result<Net> {
    const PLAN: [Option<usize>; 13] = [
        Some(64),
        None,
        Some(128),
        None,
        Some(256),
        Some(256),
        None,
        Some(512),
        Some(512),
        None,
        Some(512),
        Some(512),
        None,
    ];
    let (mut h, mut w) = spec.input_size;
    let mut layers = Vec::new();
    let mut channels = spec.in_channels;
    for step in PLAN {
        match step {
            Some(c) => {
                layers.push(Layer::Conv(Conv2d::he_init(rng, channels, c, 3, 1, 1, 1)));
                layers.push(Layer::ReLU);
                channels = c;
            }
            None => {
                if h >= 2 && w >= 2 {
                    layers.push(Layer::MaxPool2);
                    h /= 2;
                    w /= 2;
                }
            }
        }
    }
    let flat = channels * h * w;
    layers.push(Layer::Flatten);
    layers.push(Layer::Linear(Linear::he_init(rng, flat, 512)));
    layers.push(Layer::ReLU);
    layers.push(Layer::Linear(Linear::he_init(rng, 512, spec.num_classes)));
    Ok(Net::new(layers))
}

/// MobileNetV2 inverted-residual stack adapted to one input channel; a
/// stride-2 stage that cannot halve the current resolution runs at stride 1.
fn build_mobilenetv2(spec: &ClassifierSpec, rng: &mut ChaCha8Rng) -> Result<Net> {
    // (expansion, out_channels, repeats, first_stride)
    const BLOCKS: [(usize, usize, usize, usize); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let (mut h, mut w) = spec.input_size;
    let mut layers = Vec::new();

    fn take_stride(requested: usize, h: &mut usize, w: &mut usize) -> usize {
        if requested == 2 && (*h < 2 || *w < 2) {
            return 1;
        }
        if requested == 2 {
            *h = (*h + 1) / 2;
            *w = (*w + 1) / 2;
        }
        requested
    }

    let s = take_stride(2, &mut h, &mut w);
    layers.push(Layer::Conv(Conv2d::he_init(rng, spec.in_channels, 32, 3, s, 1, 1)));
    layers.push(Layer::BatchNorm(BatchNorm2d::new(32)));
    layers.push(Layer::ReLU6);

    let mut channels = 32usize;
    for (t, c, n, first_stride) in BLOCKS {
        for i in 0..n {
            let stride = if i == 0 { take_stride(first_stride, &mut h, &mut w) } else { 1 };
            let expanded = channels * t;
            let mut body = Vec::new();
            if t != 1 {
                body.push(Layer::Conv(Conv2d::he_init(rng, channels, expanded, 1, 1, 0, 1)));
                body.push(Layer::BatchNorm(BatchNorm2d::new(expanded)));
                body.push(Layer::ReLU6);
            }
            body.push(Layer::Conv(Conv2d::he_init(rng, expanded, expanded, 3, stride, 1, expanded)));
            body.push(Layer::BatchNorm(BatchNorm2d::new(expanded)));
            body.push(Layer::ReLU6);
            body.push(Layer::Conv(Conv2d::he_init(rng, expanded, c, 1, 1, 0, 1)));
            body.push(Layer::BatchNorm(BatchNorm2d::new(c)));
            if stride == 1 && channels == c {
                layers.push(Layer::Residual(Net::new(body)));
            } else {
                layers.extend(body);
            }
            channels = c;
        }
    }

    layers.push(Layer::Conv(Conv2d::he_init(rng, channels, 1280, 1, 1, 0, 1)));
    layers.push(Layer::BatchNorm(BatchNorm2d::new(1280)));
    layers.push(Layer::ReLU6);
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Flatten);
    layers.push(Layer::Linear(Linear::he_init(rng, 1280, spec.num_classes)));
    Ok(Net::new(layers))
}

/// Transposed-convolution parameters of the decoder's upsampling stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpconvSpec {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: usize,
}

/// Describes the feature-inversion decoder: same-size convolution stages
/// followed by one transposed convolution that mirrors the optical geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructorSpec {
    pub conv_channels: usize,
    pub conv_stages: usize,
    pub upconv: UpconvSpec,
    /// When the upconv output overshoots the target frame, center-crop it
    /// instead of rejecting the geometry.
    pub crop_excess: bool,
}

impl Default for ReconstructorSpec {
    fn default() -> Self {
        Self::mirroring(&SensorGeometry::default())
    }
}

impl ReconstructorSpec {
    /// Upconv parameters mirroring a given optical geometry.
    pub fn mirroring(geometry: &SensorGeometry) -> Self {
        Self {
            conv_channels: 64,
            conv_stages: 3,
            upconv: UpconvSpec {
                kernel: geometry.kernel_size,
                stride: geometry.stride,
                pad: geometry.pad,
            },
            crop_excess: false,
        }
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.conv_channels = channels;
        self
    }

    pub fn with_crop_excess(mut self) -> Self {
        self.crop_excess = true;
        self
    }
}

/// Builds the decoder for features produced by `geometry`.
///
/// The upconv output must land exactly on `geometry.input_size`. An overshoot
/// is center-cropped when `crop_excess` is set and rejected otherwise; an
/// undershoot is always rejected since no integer transposed-conv setting
/// reaches the target.
pub fn build_reconstructor(
    spec: &ReconstructorSpec,
    geometry: &SensorGeometry,
    seed: u64,
) -> Result<Net> {
    geometry.validate()?;
    if spec.conv_stages == 0 || spec.conv_channels == 0 {
        return Err(Error::Config("reconstructor needs at least one conv stage and channel".into()));
    }
    let (fh, fw) = geometry.output_size()?;
    let target = geometry.input_size;
    let (kh, kw) = spec.upconv.kernel;
    let out_h = tconv_output_len(fh, kh, spec.upconv.stride, spec.upconv.pad);
    let out_w = tconv_output_len(fw, kw, spec.upconv.stride, spec.upconv.pad);
    let (out_h, out_w) = match (out_h, out_w) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Error::Geometry(format!(
                "upconv padding {} swallows the whole {}x{} upsampled frame",
                spec.upconv.pad, fh, fw
            )))
        }
    };
    let crop = if (out_h, out_w) == target {
        None
    } else if out_h >= target.0 && out_w >= target.1 {
        if !spec.crop_excess {
            return Err(Error::Geometry(format!(
                "upconv maps {fh}x{fw} features to {out_h}x{out_w}, not the {}x{} target; \
                 enable crop_excess to center-crop the overshoot",
                target.0, target.1
            )));
        }
        Some(target)
    } else {
        return Err(Error::Geometry(format!(
            "upconv maps {fh}x{fw} features to {out_h}x{out_w}, short of the {}x{} target; \
             no integer transposed-conv setting reaches it",
            target.0, target.1
        )));
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = spec.conv_channels;
    let mut layers = Vec::new();
    layers.push(Layer::Conv(Conv2d::he_init(&mut rng, 1, c, 3, 1, 1, 1)));
    layers.push(Layer::ReLU);
    for _ in 1..spec.conv_stages {
        layers.push(Layer::Conv(Conv2d::he_init(&mut rng, c, c, 3, 1, 1, 1)));
        layers.push(Layer::ReLU);
    }
    layers.push(Layer::TConv(TConv2d::he_init(
        &mut rng,
        c,
        1,
        kh,
        kw,
        spec.upconv.stride,
        spec.upconv.pad,
    )));
    if let Some(t) = crop {
        layers.push(Layer::CropCenter(t));
    }
    Ok(Net::new(layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn small_cnn_zero_input_gives_finite_logits() {
        let spec = ClassifierSpec::default();
        let mut net = build_classifier(&spec, 3).unwrap();
        let x = Array4::zeros((1, 1, 32, 32));
        let y = net.forward_eval(x);
        assert_eq!(y.dim(), (1, 2, 1, 1));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn same_seed_same_parameters() {
        for backbone in [Backbone::SmallCnn, Backbone::Vgg11Like, Backbone::Mobilenetv2Like] {
            let spec = ClassifierSpec::with_backbone(backbone);
            let a = build_classifier(&spec, 11).unwrap();
            let b = build_classifier(&spec, 11).unwrap();
            let (pa, _) = a.state_tensors();
            let (pb, _) = b.state_tensors();
            assert_eq!(pa, pb, "{backbone}");
        }
    }

    #[test]
    fn vgg11_param_count_matches_formula() {
        let spec = ClassifierSpec::with_backbone(Backbone::Vgg11Like);
        let net = build_classifier(&spec, 0).unwrap();
        // Independent arithmetic: eight 3x3 convs and the two dense layers.
        let conv = |cin: usize, cout: usize| cout * cin * 9 + cout;
        let expected = conv(1, 64)
            + conv(64, 128)
            + conv(128, 256)
            + conv(256, 256)
            + conv(256, 512)
            + conv(512, 512)
            + conv(512, 512)
            + conv(512, 512)
            + (512 * 512 + 512)
            + (512 * 2 + 2);
        assert_eq!(net.param_count(), expected);
        assert_eq!(expected, 9_483_010);
    }

    #[test]
    fn mobilenet_builds_and_classifies_shape() {
        let spec = ClassifierSpec::with_backbone(Backbone::Mobilenetv2Like);
        let mut net = build_classifier(&spec, 5).unwrap();
        let x = Array4::from_elem((2, 1, 32, 32), 0.25f32);
        let y = net.forward_eval(x);
        assert_eq!(y.dim(), (2, 2, 1, 1));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn logits_finite_across_intensity_range() {
        let spec = ClassifierSpec::default();
        let mut net = build_classifier(&spec, 7).unwrap();
        for level in [0.0f32, 0.5, 1.0] {
            let x = Array4::from_elem((1, 1, 32, 32), level);
            let y = net.forward_eval(x);
            assert!(y.iter().all(|v| v.is_finite()), "level {level}");
        }
    }

    #[test]
    fn small_cnn_learns_separable_problem() {
        use crate::nn::{Adam, Gradients};
        use crate::training::cross_entropy_with_grad;
        use ndarray::Array2;
        use rand::{Rng, SeedableRng};

        // Two classes: bright top half vs bright bottom half, mild noise.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 128usize;
        let mut images = Array4::zeros((n, 1, 32, 32));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 2) as u8;
            labels.push(class);
            for r in 0..32 {
                for c in 0..32 {
                    let base = if (class == 0) == (r < 16) { 0.8 } else { 0.2 };
                    images[[i, 0, r, c]] = (base + rng.gen_range(-0.05..0.05f32)).clamp(0.0, 1.0);
                }
            }
        }

        let spec = ClassifierSpec::default();
        let mut net = build_classifier(&spec, 1).unwrap();
        let mut adam = Adam::for_net(0.002, &net);
        let mut grads = Gradients::zeros_for(&net);
        let batch = 32usize;
        for _epoch in 0..5 {
            for start in (0..n).step_by(batch) {
                let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
                let mut x = Array4::zeros((idx.len(), 1, 32, 32));
                for (slot, &i) in idx.iter().enumerate() {
                    x.index_axis_mut(ndarray::Axis(0), slot)
                        .assign(&images.index_axis(ndarray::Axis(0), i));
                }
                let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
                let (logits, caches) = net.forward_train(x);
                let n_b = idx.len();
                let logits2: Array2<f32> =
                    logits.view().into_shape_with_order((n_b, 2)).unwrap().to_owned();
                let (_, dlogits) = cross_entropy_with_grad(&logits2, &y).unwrap();
                let dy = dlogits.into_shape_with_order((n_b, 2, 1, 1)).unwrap();
                grads.zero();
                net.backward(caches, dy, &mut grads);
                let mut params = net.param_slices_mut();
                let grad_refs: Vec<&[f32]> = grads.slots.iter().map(|s| s.as_slice()).collect();
                adam.step(&mut params, &grad_refs);
            }
        }
        let mut correct = 0usize;
        for i in 0..n {
            let x = images.index_axis(ndarray::Axis(0), i).to_owned().insert_axis(ndarray::Axis(0));
            let y = net.forward_eval(x);
            let pred = u8::from(y[[0, 1, 0, 0]] > y[[0, 0, 0, 0]]);
            if pred == labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / n as f64;
        assert!(acc >= 0.97, "accuracy {acc}");
    }

    #[test]
    fn reconstructor_default_geometry_closes() {
        let g = SensorGeometry::default();
        let spec = ReconstructorSpec::default().with_channels(8);
        let mut net = build_reconstructor(&spec, &g, 1).unwrap();
        let x = Array4::zeros((1, 1, 32, 32));
        let y = net.forward_eval(x);
        assert_eq!(y.dim(), (1, 1, 64, 64));
    }

    #[test]
    fn reconstructor_pad50_rejected_or_cropped() {
        let g = SensorGeometry { pad: 50, ..SensorGeometry::default() };
        assert_eq!(g.output_size().unwrap(), (33, 33));
        // Default spec mirrors the pad-49 geometry: 33x33 features overshoot.
        let spec = ReconstructorSpec::default().with_channels(4);
        let err = build_reconstructor(&spec, &g, 1).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)), "{err}");

        let spec = spec.with_crop_excess();
        let mut net = build_reconstructor(&spec, &g, 1).unwrap();
        let x = Array4::zeros((1, 1, 33, 33));
        let y = net.forward_eval(x);
        assert_eq!(y.dim(), (1, 1, 64, 64));
    }

    #[test]
    fn reconstructor_undershoot_always_rejected() {
        // (64 + 36 - 11) mod 3 != 0: the strided sampling drops pixels, so the
        // mirrored transposed conv lands short of 64 and must be rejected.
        let g = SensorGeometry {
            stride: 3,
            pad: 18,
            kernel_size: (11, 11),
            ..SensorGeometry::default()
        };
        let spec = ReconstructorSpec::mirroring(&g).with_channels(4).with_crop_excess();
        let err = build_reconstructor(&spec, &g, 1).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)), "{err}");
    }

    #[test]
    fn reconstructor_identity_geometry() {
        let g = SensorGeometry {
            kernel_size: (1, 1),
            pad: 0,
            stride: 1,
            input_size: (16, 16),
            ..SensorGeometry::default()
        };
        let spec = ReconstructorSpec::mirroring(&g).with_channels(4);
        let mut net = build_reconstructor(&spec, &g, 1).unwrap();
        let x = Array4::zeros((1, 1, 16, 16));
        assert_eq!(net.forward_eval(x).dim(), (1, 1, 16, 16));
    }
}
