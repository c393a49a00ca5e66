//! Toy encoder/decoder.
//!
//! Encoder: three 3×3 convolutions (strides 1, 2, 2, padding 1), each followed
//! by ReLU, mapping `B×3×H×W` images to `B×C×H/4×W/4` non-negative features.
//! Decoder: a 1×1 convolution to `Z` class logits, ×4 bilinear upsampling
//! (align-corners-false) and a softmax over classes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{ops, Tape, Tensor, Var};

pub const ENCODER_STRIDES: [usize; 3] = [1, 2, 2];
pub const UPSAMPLE_FACTOR: usize = 4;

/// Order in which parameter tensors are bound, flattened and checkpointed.
pub const PARAM_NAMES: [&str; 8] = [
    "encoder.conv1.weight",
    "encoder.conv1.bias",
    "encoder.conv2.weight",
    "encoder.conv2.bias",
    "encoder.conv3.weight",
    "encoder.conv3.bias",
    "decoder.head.weight",
    "decoder.head.bias",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: [usize; 2],
    pub feature_channels: usize,
    pub num_classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: [16, 32],
            feature_channels: 32,
            num_classes: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub layers: [ConvLayer; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub head: ConvLayer,
}

fn check_images(images: &Tensor) -> Result<()> {
    match *images.shape() {
        [_, _, h, w] if h % UPSAMPLE_FACTOR == 0 && w % UPSAMPLE_FACTOR == 0 => Ok(()),
        [_, _, h, w] => contract!("image size {h}×{w} is not divisible by {UPSAMPLE_FACTOR}"),
        _ => contract!("expected B×3×H×W images, got {:?}", images.shape()),
    }
}

pub fn encode(images: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    check_images(images)?;
    let mut h = images.clone();
    for (layer, stride) in params.layers.iter().zip(ENCODER_STRIDES) {
        h = ops::relu(&ops::conv2d(&h, &layer.weight, &layer.bias, stride, 1)?);
    }
    Ok(h)
}

/// Class logits at full resolution, `B×Z×H×W`.
pub fn decode_logits(features: &Tensor, params: &DecoderParams) -> Result<Tensor> {
    let l = ops::conv2d(features, &params.head.weight, &params.head.bias, 1, 0)?;
    ops::bilinear_upsample(&l, UPSAMPLE_FACTOR)
}

/// Class probabilities, `B×Z×H×W`.
pub fn decode(features: &Tensor, params: &DecoderParams) -> Result<Tensor> {
    ops::softmax(&decode_logits(features, params)?, 1)
}

fn init_layer(seed: u64, index: u64, shape: [usize; 4], scale: f64) -> ConvLayer {
    let mut rng = stream_rng(seed, Stream::Init, index);
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let bound = scale / fan_in.sqrt();
    ConvLayer {
        weight: Tensor::from_fn(&shape, |_| rng.gen_range(-bound..=bound)),
        bias: Tensor::zeros(&[shape[0]]),
    }
}

/// Uniform `±scale/√fan_in` weights and zero biases, deterministic per seed.
pub fn init_params(
    arch: &Architecture,
    seed: u64,
    scale: f64,
) -> Result<(EncoderParams, DecoderParams)> {
    if !(scale > 0.0) {
        contract!("init scale must be positive, got {scale}");
    }
    let [h1, h2] = arch.hidden;
    let c = arch.feature_channels;
    if h1 == 0 || h2 == 0 || c == 0 || arch.num_classes < 2 {
        contract!("degenerate architecture {arch:?}");
    }
    let encoder = EncoderParams {
        layers: [
            init_layer(seed, 0, [h1, 3, 3, 3], scale),
            init_layer(seed, 1, [h2, h1, 3, 3], scale),
            init_layer(seed, 2, [c, h2, 3, 3], scale),
        ],
    };
    let decoder = DecoderParams {
        head: init_layer(seed, 3, [arch.num_classes, c, 1, 1], scale),
    };
    Ok((encoder, decoder))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl SegNet {
    pub fn init(arch: &Architecture, seed: u64, scale: f64) -> Result<Self> {
        let (encoder, decoder) = init_params(arch, seed, scale)?;
        Ok(Self { encoder, decoder })
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.head.weight.shape()[0]
    }

    /// Parameter tensors in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor; 8] {
        let [a, b, c] = &self.encoder.layers;
        let d = &self.decoder.head;
        [
            &a.weight, &a.bias, &b.weight, &b.bias, &c.weight, &c.bias, &d.weight, &d.bias,
        ]
    }

    pub fn from_tensors(t: Vec<Tensor>) -> Result<Self> {
        let Ok([w1, b1, w2, b2, w3, b3, wd, bd]) = <[Tensor; 8]>::try_from(t) else {
            contract!("a network has exactly {} parameter tensors", PARAM_NAMES.len());
        };
        let net = Self {
            encoder: EncoderParams {
                layers: [
                    ConvLayer { weight: w1, bias: b1 },
                    ConvLayer { weight: w2, bias: b2 },
                    ConvLayer { weight: w3, bias: b3 },
                ],
            },
            decoder: DecoderParams {
                head: ConvLayer { weight: wd, bias: bd },
            },
        };
        // shape-check the whole stack once on a dummy input
        let probe = Tensor::zeros(&[1, 3, UPSAMPLE_FACTOR, UPSAMPLE_FACTOR]);
        decode_logits(&encode(&probe, &net.encoder)?, &net.decoder)?;
        Ok(net)
    }

    /// All parameters concatenated in [`PARAM_NAMES`] order.
    pub fn flatten(&self) -> Tensor {
        let data: Vec<f64> = self.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        Tensor::from_parts(vec![data.len()], data)
    }

    /// Inverse of [`SegNet::flatten`], using `self` for the shapes.
    pub fn unflatten(&self, flat: &[f64]) -> Result<SegNet> {
        let total: usize = self.tensors().iter().map(|t| t.numel()).sum();
        if flat.len() != total {
            contract!("flat parameter vector has {} entries, expected {total}", flat.len());
        }
        let mut offset = 0;
        let mut out = Vec::with_capacity(8);
        for t in self.tensors() {
            out.push(Tensor::new(t.shape().to_vec(), flat[offset..offset + t.numel()].to_vec())?);
            offset += t.numel();
        }
        SegNet::from_tensors(out)
    }

    pub fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        decode(&encode(images, &self.encoder)?, &self.decoder)
    }

    /// Per-pixel argmax labels, indexed `b·H·W + j`.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = decode_logits(&encode(images, &self.encoder)?, &self.decoder)?;
        ops::argmax(&logits, 1)
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundNet {
        BoundNet {
            vars: self.tensors().map(|t| tape.param(t.clone())),
        }
    }

    /// Records every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundNet {
        BoundNet {
            vars: self.tensors().map(|t| tape.constant(t.clone())),
        }
    }
}

/// Parameters of a [`SegNet`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundNet {
    pub vars: [Var; 8],
}

impl BoundNet {
    pub fn encode(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        check_images(tape.value(images))?;
        let mut h = images;
        for (i, stride) in ENCODER_STRIDES.iter().enumerate() {
            let c = tape.conv2d(h, self.vars[2 * i], self.vars[2 * i + 1], *stride, 1)?;
            h = tape.relu(c);
        }
        Ok(h)
    }

    pub fn decode_logits(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let l = tape.conv2d(features, self.vars[6], self.vars[7], 1, 0)?;
        tape.upsample(l, UPSAMPLE_FACTOR)
    }

    pub fn decode(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let l = self.decode_logits(tape, features)?;
        tape.softmax(l, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn images(b: usize, side: usize, seed: u64) -> Tensor {
        let mut rng = stream_rng(seed, Stream::Data, 0);
        Tensor::from_fn(&[b, 3, side, side], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn encoder_stride_arithmetic() {
        let net = SegNet::init(&Architecture::default(), 1, 1.0).unwrap();
        let f = encode(&images(2, 64, 0), &net.encoder).unwrap();
        assert_eq!(f.shape(), &[2, 32, 16, 16]);
        assert!(f.data().iter().all(|&v| v >= 0.0));
        assert!(encode(&Tensor::zeros(&[1, 3, 10, 12]), &net.encoder).is_err());
    }

    #[test]
    fn zero_weights_give_zero_features_and_uniform_probs() {
        let net = SegNet::init(&Architecture::default(), 1, 1.0).unwrap();
        let zeroed = net.unflatten(&vec![0.0; net.flatten().numel()]).unwrap();
        let f = encode(&images(1, 16, 2), &zeroed.encoder).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        let p = decode(&f, &zeroed.decoder).unwrap();
        assert_eq!(p.shape(), &[1, 4, 16, 16]);
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn decoder_rows_sum_to_one_and_argmax_is_shift_invariant() {
        let net = SegNet::init(&Architecture::default(), 3, 1.0).unwrap();
        let f = encode(&images(2, 16, 4), &net.encoder).unwrap();
        let p = decode(&f, &net.decoder).unwrap();
        let hw = 256;
        for b in 0..2 {
            for j in 0..hw {
                let s: f64 = (0..4).map(|k| p.data()[(b * 4 + k) * hw + j]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        let logits = decode_logits(&f, &net.decoder).unwrap();
        let shifted = logits.map(|v| v + 123.0);
        assert_eq!(ops::argmax(&logits, 1).unwrap(), ops::argmax(&shifted, 1).unwrap());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let arch = Architecture::default();
        let a = SegNet::init(&arch, 5, 0.7).unwrap();
        assert_eq!(a, SegNet::init(&arch, 5, 0.7).unwrap());
        for s in 0..10 {
            assert_ne!(SegNet::init(&arch, s, 1.0).unwrap(), SegNet::init(&arch, s + 100, 1.0).unwrap());
        }
        for (i, t) in a.tensors().iter().enumerate() {
            if i % 2 == 1 {
                assert!(t.data().iter().all(|&v| v == 0.0));
                continue;
            }
            let fan_in = (t.shape()[1] * t.shape()[2] * t.shape()[3]) as f64;
            assert!(t.data().iter().all(|&v| v.abs() <= 0.7 / fan_in.sqrt()));
        }
        assert!(SegNet::init(&arch, 0, 0.0).is_err());
    }

    #[test]
    fn tape_forward_matches_eager_forward() {
        let net = SegNet::init(&Architecture::default(), 9, 1.0).unwrap();
        let x = images(2, 16, 1);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let f = bound.encode(&mut tape, xv).unwrap();
        let p = bound.decode(&mut tape, f).unwrap();
        assert_eq!(tape.value(p), &net.probabilities(&x).unwrap());
    }

    #[test]
    fn feature_sum_gradient_wrt_first_layer() {
        let arch = Architecture {
            hidden: [4, 6],
            feature_channels: 5,
            num_classes: 3,
        };
        let net = SegNet::init(&arch, 2, 1.0).unwrap();
        let x = images(1, 8, 3);
        let w1 = net.encoder.layers[0].weight.clone();
        let f = |t: &mut Tape, p: Var| {
            let mut b = net.bind_frozen(t);
            b.vars[0] = p;
            let xv = t.constant(x.clone());
            let feats = b.encode(t, xv)?;
            Ok(t.sum(feats))
        };
        let r = grad_check(f, &w1, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn segmentation_cross_entropy_is_differentiable_end_to_end() {
        let arch = Architecture {
            hidden: [4, 6],
            feature_channels: 5,
            num_classes: 3,
        };
        let net = SegNet::init(&arch, 4, 1.0).unwrap();
        let x = images(2, 8, 5);
        let labels: Vec<usize> = (0..128).map(|i| (i / 5) % 3).collect();
        for which in 0..8 {
            let target = net.tensors()[which].clone();
            let g = |t: &mut Tape, p: Var| {
                let mut b = net.bind_frozen(t);
                b.vars[which] = p;
                let xv = t.constant(x.clone());
                let feats = b.encode(t, xv)?;
                let logits = b.decode_logits(t, feats)?;
                t.cross_entropy(logits, labels.clone(), vec![1.0 / 128.0; 128])
            };
            let r = grad_check(g, &target, 1e-5).unwrap();
            assert!(r.max_rel_error <= 1e-4, "param {which}: {r:?}");
        }
    }
}
