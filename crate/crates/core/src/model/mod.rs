//! A small fully-convolutional encoder/decoder with hand-derived backprop.
//!
//! The default desk-scale network is a stem convolution, three stride-2
//! encoder blocks, three decoder blocks (coarse conv + nearest upsample +
//! additive skip), and a 1x1 classifier head — about 50k parameters. The
//! full-scale preset mirrors the channel progression of a VGG-style FCN
//! backbone; its weights are user-supplied through checkpoints.

mod checkpoint;
mod conv;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use ndarray::{Array1, Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ProbMap;

/// Architecture hyperparameters. Parameter shapes and counts are a pure
/// function of this config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input channels after grayscale replication.
    pub in_channels: usize,
    /// Output classes `C`.
    pub num_classes: usize,
    /// Channels of the full-resolution stem block.
    pub stem_channels: usize,
    /// Channels of each stride-2 encoder stage; one decoder stage mirrors each.
    pub stage_channels: Vec<usize>,
    /// Convolution kernel size (odd). 1 gives a purely per-pixel network.
    pub kernel_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 2,
            stem_channels: 8,
            stage_channels: vec![16, 32, 64],
            kernel_size: 3,
        }
    }
}

impl ModelConfig {
    /// Full-scale preset following the channel progression of a VGG16-FCN8
    /// backbone. Weights are user-supplied via checkpoints.
    pub fn fcn8_preset() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 2,
            stem_channels: 64,
            stage_channels: vec![128, 256, 512, 512, 512],
            kernel_size: 3,
        }
    }

    /// A per-pixel network: 1x1 stem + 1x1 head, no down/upsampling. Exactly
    /// equivariant under pixel permutations.
    pub fn pixelwise(in_channels: usize, stem_channels: usize, num_classes: usize) -> Self {
        ModelConfig {
            in_channels,
            num_classes,
            stem_channels,
            stage_channels: vec![],
            kernel_size: 1,
        }
    }

    /// Total spatial downsampling factor of the encoder.
    pub fn downsample_factor(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 || self.num_classes < 2 {
            return Err(Error::contract(
                "model config needs in_channels >= 1, stem_channels >= 1, num_classes >= 2",
            ));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::contract("kernel size must be odd"));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::contract("stage channels must be >= 1"));
        }
        Ok(())
    }

    /// Number of scalar parameters the config implies.
    pub fn num_params(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        let mut total = self.stem_channels * (self.in_channels * k2 + 1);
        let mut prev = self.stem_channels;
        for &c in &self.stage_channels {
            total += c * (prev * k2 + 1); // encoder
            total += prev * (c * k2 + 1); // mirror decoder
            prev = c;
        }
        total += self.num_classes * (self.stem_channels + 1); // 1x1 head
        total
    }
}

/// One convolution's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvParams {
    fn zeros_like(&self) -> ConvParams {
        ConvParams {
            weight: Array4::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
        }
    }
}

/// All network parameters plus the training-step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: ModelConfig,
    pub step: u64,
    pub stem: ConvParams,
    pub encoders: Vec<ConvParams>,
    pub decoders: Vec<ConvParams>,
    pub head: ConvParams,
}

/// Pre-softmax per-pixel class scores, channel-last `(H, W, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    pub grid: Array3<f64>,
}

/// Per-layer gradients, structurally parallel to [`NetworkParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub stem: ConvParams,
    pub encoders: Vec<ConvParams>,
    pub decoders: Vec<ConvParams>,
    pub head: ConvParams,
}

impl ParamGrads {
    pub fn zeros_like(params: &NetworkParams) -> ParamGrads {
        ParamGrads {
            stem: params.stem.zeros_like(),
            encoders: params.encoders.iter().map(|c| c.zeros_like()).collect(),
            decoders: params.decoders.iter().map(|c| c.zeros_like()).collect(),
            head: params.head.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        fn add(a: &mut ConvParams, b: &ConvParams) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
        add(&mut self.stem, &other.stem);
        for (a, b) in self.encoders.iter_mut().zip(&other.encoders) {
            add(a, b);
        }
        for (a, b) in self.decoders.iter_mut().zip(&other.decoders) {
            add(a, b);
        }
        add(&mut self.head, &other.head);
    }
}

impl NetworkParams {
    /// Seed-deterministic He initialization. Equal seed and config give
    /// bit-identical parameters.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<NetworkParams> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel_size;

        let mut make = |c_out: usize, c_in: usize, k: usize| -> ConvParams {
            let fan_in = (c_in * k * k) as f64;
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid normal");
            let weight = Array4::from_shape_fn((c_out, c_in, k, k), |_| dist.sample(&mut rng));
            ConvParams {
                weight,
                bias: Array1::zeros(c_out),
            }
        };

        let stem = make(config.stem_channels, config.in_channels, k);
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        let mut prev = config.stem_channels;
        for &c in &config.stage_channels {
            encoders.push(make(c, prev, k));
            prev = c;
        }
        // Decoder i maps stage i channels back down to the previous scale.
        let mut prev = config.stem_channels;
        for &c in &config.stage_channels {
            decoders.push(make(prev, c, k));
            prev = c;
        }
        let head = make(config.num_classes, config.stem_channels, 1);

        Ok(NetworkParams {
            config: config.clone(),
            step: 0,
            stem,
            encoders,
            decoders,
            head,
        })
    }

    /// Named views of every parameter tensor, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let mut push = |name: String, conv: &ConvParams| {
            out.push((
                format!("{name}.weight"),
                conv.weight.shape().to_vec(),
                conv.weight.iter().copied().collect(),
            ));
            out.push((
                format!("{name}.bias"),
                conv.bias.shape().to_vec(),
                conv.bias.iter().copied().collect(),
            ));
        };
        push("stem".into(), &self.stem);
        for (i, c) in self.encoders.iter().enumerate() {
            push(format!("enc{i}"), c);
        }
        for (i, c) in self.decoders.iter().enumerate() {
            push(format!("dec{i}"), c);
        }
        push("head".into(), &self.head);
        out
    }
}

/// Cached forward activations needed by [`backward`].
pub struct Tape {
    input: Array3<f64>,
    stem_pre: Array3<f64>,
    stem_act: Array3<f64>,
    enc_pre: Vec<Array3<f64>>,
    enc_act: Vec<Array3<f64>>,
    dec_in: Vec<Array3<f64>>,
    dec_pre: Vec<Array3<f64>>,
    head_in: Array3<f64>,
}

fn image_to_chw(image: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = image.dim();
    Array3::from_shape_fn((c, h, w), |(ci, r, cc)| image[[r, cc, ci]])
}

fn chw_to_hwc(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((h, w, c), |(r, cc, ci)| x[[ci, r, cc]])
}

fn check_input(config: &ModelConfig, image: &Array3<f64>) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != config.in_channels {
        return Err(Error::contract(format!(
            "image has {c} channels, model expects {}",
            config.in_channels
        )));
    }
    let factor = config.downsample_factor();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::contract(format!(
            "spatial dims {h}x{w} must be divisible by the downsampling factor {factor}"
        )));
    }
    Ok(())
}

fn run_forward(params: &NetworkParams, image: &Array3<f64>) -> Result<(LogitMap, Tape)> {
    check_input(&params.config, image)?;
    let k = params.config.kernel_size;
    let pad = k / 2;
    let n = params.config.stage_channels.len();

    let input = image_to_chw(image);
    let stem_pre = conv::conv_forward(&input, &params.stem.weight, &params.stem.bias, 1, pad);
    let stem_act = conv::relu(stem_pre.clone());

    let mut enc_pre = Vec::with_capacity(n);
    let mut enc_act = Vec::with_capacity(n);
    let mut a = stem_act.clone();
    for enc in &params.encoders {
        let pre = conv::conv_forward(&a, &enc.weight, &enc.bias, 2, pad);
        let act = conv::relu(pre.clone());
        enc_pre.push(pre);
        enc_act.push(act.clone());
        a = act;
    }

    let mut dec_in = vec![Array3::<f64>::zeros((0, 0, 0)); n];
    let mut dec_pre = vec![Array3::<f64>::zeros((0, 0, 0)); n];
    let mut d = if n > 0 {
        enc_act[n - 1].clone()
    } else {
        stem_act.clone()
    };
    for i in (0..n).rev() {
        let dec = &params.decoders[i];
        dec_in[i] = d.clone();
        let pre = conv::conv_forward(&d, &dec.weight, &dec.bias, 1, pad);
        let up = conv::upsample2(&conv::relu(pre.clone()));
        dec_pre[i] = pre;
        let skip = if i == 0 { &stem_act } else { &enc_act[i - 1] };
        d = up + skip;
    }

    let head_in = d;
    let logits_chw =
        conv::conv_forward(&head_in, &params.head.weight, &params.head.bias, 1, 0);
    let logits = LogitMap {
        grid: chw_to_hwc(&logits_chw),
    };
    let tape = Tape {
        input,
        stem_pre,
        stem_act,
        enc_pre,
        enc_act,
        dec_in,
        dec_pre,
        head_in,
    };
    Ok((logits, tape))
}

/// Runs the network on a channel-last image grid. Deterministic given
/// `(params, image)`.
pub fn forward(params: &NetworkParams, image: &Array3<f64>) -> Result<LogitMap> {
    run_forward(params, image).map(|(l, _)| l)
}

/// [`forward`] that also returns the activation tape for [`backward`].
pub fn forward_with_tape(params: &NetworkParams, image: &Array3<f64>) -> Result<(LogitMap, Tape)> {
    run_forward(params, image)
}

/// Backpropagates a logit gradient (channel-last) through the taped forward
/// pass, returning gradients for every parameter tensor.
pub fn backward(params: &NetworkParams, tape: &Tape, grad_logits: &Array3<f64>) -> ParamGrads {
    let k = params.config.kernel_size;
    let pad = k / 2;
    let n = params.config.stage_channels.len();
    let mut grads = ParamGrads::zeros_like(params);

    let g = image_to_chw(grad_logits);
    let (gd_head, dw_head, db_head) =
        conv::conv_backward(&tape.head_in, &params.head.weight, &g, 1, 0);
    grads.head.weight = dw_head;
    grads.head.bias = db_head;

    let mut grad_stem_act = Array3::<f64>::zeros(tape.stem_act.dim());
    let mut grad_enc_act: Vec<Array3<f64>> = tape
        .enc_act
        .iter()
        .map(|a| Array3::zeros(a.dim()))
        .collect();

    // Decoder stages, in reverse order of the forward pass.
    let mut gd = gd_head;
    for i in 0..n {
        if i == 0 {
            grad_stem_act += &gd;
        } else {
            grad_enc_act[i - 1] += &gd;
        }
        let gu = conv::upsample2_backward(&gd);
        let gr = conv::relu_backward(&tape.dec_pre[i], &gu);
        let (gdx, dw, db) =
            conv::conv_backward(&tape.dec_in[i], &params.decoders[i].weight, &gr, 1, pad);
        grads.decoders[i].weight = dw;
        grads.decoders[i].bias = db;
        gd = gdx;
    }
    if n > 0 {
        grad_enc_act[n - 1] += &gd;
    } else {
        grad_stem_act += &gd;
    }

    for i in (0..n).rev() {
        let gr = conv::relu_backward(&tape.enc_pre[i], &grad_enc_act[i]);
        let enc_in = if i == 0 {
            &tape.stem_act
        } else {
            &tape.enc_act[i - 1]
        };
        let (gprev, dw, db) =
            conv::conv_backward(enc_in, &params.encoders[i].weight, &gr, 2, pad);
        grads.encoders[i].weight = dw;
        grads.encoders[i].bias = db;
        if i == 0 {
            grad_stem_act += &gprev;
        } else {
            grad_enc_act[i - 1] += &gprev;
        }
    }

    let gr = conv::relu_backward(&tape.stem_pre, &grad_stem_act);
    let (_, dw, db) = conv::conv_backward(&tape.input, &params.stem.weight, &gr, 1, pad);
    grads.stem.weight = dw;
    grads.stem.bias = db;
    grads
}

/// Numerically stabilized per-pixel softmax.
pub fn softmax_probs(logits: &LogitMap) -> Result<ProbMap> {
    let (h, w, c) = logits.grid.dim();
    if logits.grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("logits must be finite"));
    }
    let mut out = Array3::<f64>::zeros((h, w, c));
    for r in 0..h {
        for cc in 0..w {
            let mut max = f64::NEG_INFINITY;
            for k in 0..c {
                max = max.max(logits.grid[[r, cc, k]]);
            }
            let mut sum = 0.0;
            for k in 0..c {
                let e = (logits.grid[[r, cc, k]] - max).exp();
                out[[r, cc, k]] = e;
                sum += e;
            }
            for k in 0..c {
                out[[r, cc, k]] /= sum;
            }
        }
    }
    ProbMap::new(out)
}

/// Per-pixel argmax with ties broken toward the lower class index.
pub fn predict_labels(prob: &ProbMap) -> Array2<u8> {
    let (h, w, c) = prob.dims();
    let g = prob.grid();
    Array2::from_shape_fn((h, w), |(r, cc)| {
        let mut best = 0usize;
        let mut best_v = g[[r, cc, 0]];
        for k in 1..c {
            if g[[r, cc, k]] > best_v {
                best_v = g[[r, cc, k]];
                best = k;
            }
        }
        best as u8
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            num_classes: 2,
            stem_channels: 4,
            stage_channels: vec![6],
            kernel_size: 3,
        }
    }

    #[test]
    fn shape_contract() {
        let cfg = ModelConfig {
            in_channels: 1,
            ..ModelConfig::default()
        };
        let params = NetworkParams::init(&cfg, 0).unwrap();
        let image = Array3::<f64>::zeros((64, 64, 1));
        let logits = forward(&params, &image).unwrap();
        assert_eq!(logits.grid.dim(), (64, 64, 2));
    }

    #[test]
    fn forward_is_deterministic() {
        let params = NetworkParams::init(&tiny_config(), 3).unwrap();
        let image = Array3::from_shape_fn((16, 16, 1), |(r, c, _)| ((r * 17 + c) % 7) as f64);
        let a = forward(&params, &image).unwrap();
        let b = forward(&params, &image).unwrap();
        assert_eq!(a.grid, b.grid);
    }

    #[test]
    fn indivisible_dims_error_names_factor() {
        let params = NetworkParams::init(&tiny_config(), 0).unwrap();
        let image = Array3::<f64>::zeros((15, 16, 1));
        let err = forward(&params, &image).unwrap_err();
        assert!(err.to_string().contains("factor 2"), "{err}");
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = NetworkParams::init(&tiny_config(), 42).unwrap();
        let b = NetworkParams::init(&tiny_config(), 42).unwrap();
        assert_eq!(a, b);
        let c = NetworkParams::init(&tiny_config(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fcn8_preset_shape() {
        let cfg = ModelConfig::fcn8_preset();
        cfg.validate().unwrap();
        assert_eq!(cfg.downsample_factor(), 32);
        assert!(cfg.num_params() > 5_000_000);
    }

    #[test]
    fn default_config_is_about_50k_params() {
        let n = ModelConfig::default().num_params();
        assert!((40_000..70_000).contains(&n), "default has {n} params");
        let params = NetworkParams::init(&ModelConfig::default(), 0).unwrap();
        let stored: usize = params
            .named_tensors()
            .iter()
            .map(|(_, _, data)| data.len())
            .sum();
        assert_eq!(stored, n);
    }

    #[test]
    fn constant_input_gives_constant_interior_softmax() {
        // Stem + head only: the padding-free interior is one pixel in.
        let cfg = ModelConfig {
            in_channels: 1,
            num_classes: 2,
            stem_channels: 5,
            stage_channels: vec![],
            kernel_size: 3,
        };
        let params = NetworkParams::init(&cfg, 7).unwrap();
        let image = Array3::<f64>::from_elem((12, 12, 1), 0.37);
        let prob = softmax_probs(&forward(&params, &image).unwrap()).unwrap();
        let reference = prob.grid()[[5, 5, 0]];
        for r in 1..11 {
            for c in 1..11 {
                assert!(
                    (prob.grid()[[r, c, 0]] - reference).abs() < 1e-12,
                    "interior pixel ({r},{c}) differs"
                );
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let logits = LogitMap {
            grid: array![[[0.0, 0.0]], [[1000.0, 1000.0]], [[2.0, 0.0]]],
        };
        let prob = softmax_probs(&logits).unwrap();
        assert_eq!(prob.grid()[[0, 0, 0]], 0.5);
        assert_eq!(prob.grid()[[1, 0, 0]], 0.5);
        assert!((prob.grid()[[2, 0, 0]] - 0.8807970779778823).abs() < 1e-12);
        assert!((prob.grid()[[2, 0, 1]] - 0.11920292202211755).abs() < 1e-12);

        let bad = LogitMap {
            grid: array![[[f64::NAN, 0.0]]],
        };
        assert!(softmax_probs(&bad).is_err());
    }

    #[test]
    fn predict_label_tie_break() {
        let prob = ProbMap::new(array![[[0.9, 0.1], [0.5, 0.5], [0.4, 0.6]]]).unwrap();
        let labels = predict_labels(&prob);
        assert_eq!(labels, array![[0u8, 0, 1]]);
    }

    #[test]
    fn gradient_flow_matches_finite_differences() {
        // Scalar loss (point loss at a handful of pixels) through the full
        // network; perturb every parameter.
        use crate::annotations::{rasterize_points, Point, PointAnnotation};
        use crate::losses;

        let cfg = tiny_config();
        let mut params = NetworkParams::init(&cfg, 11).unwrap();
        let image = Array3::from_shape_fn((16, 16, 1), |(r, c, _)| {
            ((r as f64 * 3.7 + c as f64 * 1.3).sin()) * 0.5
        });
        let pmask = rasterize_points(
            &PointAnnotation {
                points: vec![
                    Point {
                        row: 2,
                        col: 3,
                        class_id: 1,
                    },
                    Point {
                        row: 10,
                        col: 12,
                        class_id: 0,
                    },
                    Point {
                        row: 7,
                        col: 7,
                        class_id: 1,
                    },
                ],
            },
            16,
            16,
        )
        .unwrap();

        let loss_of = |p: &NetworkParams| -> f64 {
            let logits = forward(p, &image).unwrap();
            let prob = softmax_probs(&logits).unwrap();
            losses::point_loss(&prob, &pmask).unwrap()
        };

        let (logits, tape) = forward_with_tape(&params, &image).unwrap();
        let prob = softmax_probs(&logits).unwrap();
        let (_, gz) = losses::point_loss_grad(&prob, &pmask).unwrap();
        let grads = backward(&params, &tape, &gz);

        let eps = 1e-5;
        let mut checked = 0usize;
        let mut check = |get: &mut dyn FnMut(&mut NetworkParams) -> &mut f64, analytic: f64| {
            let orig = {
                let p = get(&mut params);
                *p
            };
            *get(&mut params) = orig + eps;
            let plus = loss_of(&params);
            *get(&mut params) = orig - eps;
            let minus = loss_of(&params);
            *get(&mut params) = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let denom = fd.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (fd - analytic).abs() / denom < 1e-3,
                "fd {fd} vs analytic {analytic}"
            );
            checked += 1;
        };

        // Spot-check a few entries of every layer.
        for idx in [[0, 0, 0, 0], [2, 0, 1, 2], [3, 0, 2, 1]] {
            let g = grads.stem.weight[idx];
            check(&mut |p| &mut p.stem.weight[idx], g);
        }
        for idx in [[0, 0, 0, 0], [5, 3, 2, 2]] {
            let g = grads.encoders[0].weight[idx];
            check(&mut |p| &mut p.encoders[0].weight[idx], g);
            let g = grads.decoders[0].weight[[idx[1], idx[0], idx[2], idx[3]]];
            check(
                &mut |p| &mut p.decoders[0].weight[[idx[1], idx[0], idx[2], idx[3]]],
                g,
            );
        }
        for i in 0..2 {
            let g = grads.head.weight[[i, 2, 0, 0]];
            check(&mut |p| &mut p.head.weight[[i, 2, 0, 0]], g);
            let g = grads.head.bias[i];
            check(&mut |p| &mut p.head.bias[i], g);
            let g = grads.stem.bias[i];
            check(&mut |p| &mut p.stem.bias[i], g);
        }
        assert!(checked >= 12);
    }
}
