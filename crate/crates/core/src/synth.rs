//! Seeded toy models and synthetic datasets for tests, benchmarks and the
//! bundled demo pipeline.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Layer, LayerKind};
use crate::model_io::CalibrationSet;
use crate::tensor::Tensor;

pub fn random_tensor(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0f32 / fan_in as f32).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Three searchable layers: two 3x3 convolutions and a classifier head.
/// Spatial dims shrink by 4x through the two pools, so `h` and `w` must be
/// multiples of 4.
pub fn toy_cnn(c: usize, h: usize, w: usize, classes: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c1 = 8usize;
    let c2 = 16usize;
    let flat = c2 * (h / 4) * (w / 4);
    Graph::new(
        vec![c, h, w],
        vec![
            Layer {
                name: "conv1".into(),
                kind: LayerKind::Conv2d {
                    weight: kaiming(&mut rng, &[c1, c, 3, 3], c * 9),
                    bias: Some(Tensor::zeros(vec![c1])),
                    stride: 1,
                    padding: 1,
                },
            },
            Layer {
                name: "relu1".into(),
                kind: LayerKind::Relu,
            },
            Layer {
                name: "pool1".into(),
                kind: LayerKind::MaxPool { kernel: 2, stride: 2 },
            },
            Layer {
                name: "conv2".into(),
                kind: LayerKind::Conv2d {
                    weight: kaiming(&mut rng, &[c2, c1, 3, 3], c1 * 9),
                    bias: Some(Tensor::zeros(vec![c2])),
                    stride: 1,
                    padding: 1,
                },
            },
            Layer {
                name: "relu2".into(),
                kind: LayerKind::Relu,
            },
            Layer {
                name: "pool2".into(),
                kind: LayerKind::AvgPool { kernel: 2, stride: 2 },
            },
            Layer {
                name: "flatten".into(),
                kind: LayerKind::Flatten,
            },
            Layer {
                name: "fc".into(),
                kind: LayerKind::Linear {
                    weight: kaiming(&mut rng, &[classes, flat], flat),
                    bias: Some(Tensor::zeros(vec![classes])),
                },
            },
        ],
    )
}

/// CNN variant with an inference-mode batchnorm after the first conv.
pub fn toy_cnn_bn(c: usize, h: usize, w: usize, classes: usize, seed: u64) -> Graph {
    let mut g = toy_cnn(c, h, w, classes, seed);
    let c1 = 8usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(101));
    let gamma = Tensor::new(
        vec![c1],
        (0..c1).map(|_| rng.gen_range(0.8..1.2)).collect(),
    )
    .unwrap();
    let beta = Tensor::new(
        vec![c1],
        (0..c1).map(|_| rng.gen_range(-0.1..0.1)).collect(),
    )
    .unwrap();
    let mean = Tensor::new(
        vec![c1],
        (0..c1).map(|_| rng.gen_range(-0.2..0.2)).collect(),
    )
    .unwrap();
    let var = Tensor::new(vec![c1], (0..c1).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
    g.layers.insert(
        1,
        Layer {
            name: "bn1".into(),
            kind: LayerKind::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                eps: 1e-5,
            },
        },
    );
    g
}

/// Small MLP: features -> hidden -> hidden -> classes, relu between.
pub fn toy_mlp(features: usize, hidden: usize, classes: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Graph::new(
        vec![features],
        vec![
            Layer {
                name: "fc1".into(),
                kind: LayerKind::Linear {
                    weight: kaiming(&mut rng, &[hidden, features], features),
                    bias: Some(Tensor::zeros(vec![hidden])),
                },
            },
            Layer {
                name: "relu1".into(),
                kind: LayerKind::Relu,
            },
            Layer {
                name: "fc2".into(),
                kind: LayerKind::Linear {
                    weight: kaiming(&mut rng, &[hidden, hidden], hidden),
                    bias: Some(Tensor::zeros(vec![hidden])),
                },
            },
            Layer {
                name: "relu2".into(),
                kind: LayerKind::Relu,
            },
            Layer {
                name: "fc3".into(),
                kind: LayerKind::Linear {
                    weight: kaiming(&mut rng, &[classes, hidden], hidden),
                    bias: Some(Tensor::zeros(vec![classes])),
                },
            },
        ],
    )
}

/// Class-prototype image dataset with optional heavy-tailed pixels: each
/// sample is its class prototype plus noise, and a small fraction of pixels
/// is multiplied by a large factor. The outliers stretch the first layer's
/// activation range without carrying class signal.
#[derive(Debug, Clone)]
pub struct PatternSpec {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f32,
    pub outlier_frac: f32,
    pub outlier_scale: f32,
    pub seed: u64,
}

impl PatternSpec {
    pub fn tiny() -> Self {
        PatternSpec {
            classes: 2,
            channels: 1,
            height: 4,
            width: 4,
            noise: 0.1,
            outlier_frac: 0.0,
            outlier_scale: 1.0,
            seed: 42,
        }
    }
}

pub fn pattern_dataset(spec: &PatternSpec, n: usize) -> CalibrationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let numel = spec.channels * spec.height * spec.width;
    let prototypes: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let shape = vec![spec.channels, spec.height, spec.width];
    let items = (0..n)
        .map(|i| {
            let label = i % spec.classes;
            let data: Vec<f32> = prototypes[label]
                .iter()
                .map(|&p| {
                    let mut v = p + rng.gen_range(-spec.noise..spec.noise);
                    if spec.outlier_frac > 0.0 && rng.gen::<f32>() < spec.outlier_frac {
                        v *= spec.outlier_scale;
                    }
                    v
                })
                .collect();
            (Tensor::new(shape.clone(), data).unwrap(), label)
        })
        .collect();
    CalibrationSet {
        input_shape: shape,
        num_classes: spec.classes,
        items,
    }
}

/// Two interleaved half-circles in the plane, the classic 2-D binary task.
pub fn two_moons(n: usize, noise: f32, seed: u64) -> CalibrationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|i| {
            let t = rng.gen_range(0.0..std::f32::consts::PI);
            let label = i % 2;
            let (mut x, mut y) = if label == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            x += rng.gen_range(-noise..noise);
            y += rng.gen_range(-noise..noise);
            (Tensor::new(vec![2], vec![x, y]).unwrap(), label)
        })
        .collect();
    CalibrationSet {
        input_shape: vec![2],
        num_classes: 2,
        items,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_cnn_validates_and_is_desk_scale() {
        let g = toy_cnn(3, 8, 8, 4, 0);
        g.validate().unwrap();
        let params: usize = g
            .layers
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Conv2d { weight, bias, .. }
                | LayerKind::Linear { weight, bias } => {
                    weight.numel() + bias.as_ref().map_or(0, |b| b.numel())
                }
                _ => 0,
            })
            .sum();
        assert!(params <= 50_000, "{params} params");
        assert_eq!(g.searchable().len(), 3);
    }

    #[test]
    fn datasets_are_deterministic() {
        let spec = PatternSpec::tiny();
        let a = pattern_dataset(&spec, 8);
        let b = pattern_dataset(&spec, 8);
        assert_eq!(a, b);
        assert_eq!(two_moons(16, 0.1, 3), two_moons(16, 0.1, 3));
    }

    #[test]
    fn labels_cycle_through_classes() {
        let set = pattern_dataset(&PatternSpec::tiny(), 7);
        assert_eq!(set.items[0].1, 0);
        assert_eq!(set.items[1].1, 1);
        assert_eq!(set.items[2].1, 0);
    }
}
