use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    concat, maxpool2, maxpool2_backward, relu_backward_inplace, relu_inplace, split, Conv, Deconv,
};
use super::tensor::{FeatureMap, Real};
use crate::error::{Error, Result};
use crate::losses::softmax_pixelwise;
use crate::types::{LogitCube, NormalizedImage, ProbabilityCube, SegMap, DEFAULT_NUM_CLASSES};

/// How `dropout_rate` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutSemantics {
    /// The rate is the probability of keeping a unit.
    #[default]
    KeepProbability,
    /// The rate is the probability of dropping a unit.
    DropProbability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_blocks: usize,
    /// Feature channels of the first block; doubled after every max-pool.
    pub base_channels: usize,
    /// Output layers, background included.
    pub num_classes: usize,
    pub input_channels: usize,
    pub input_width: usize,
    pub input_height: usize,
    pub dropout_rate: f64,
    pub dropout_semantics: DropoutSemantics,
    pub init_std: f64,
    pub init_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 3,
            base_channels: 64,
            num_classes: DEFAULT_NUM_CLASSES,
            input_channels: 1,
            input_width: 512,
            input_height: 512,
            dropout_rate: 0.75,
            dropout_semantics: DropoutSemantics::KeepProbability,
            init_std: 0.1,
            init_bias: 0.1,
        }
    }
}

impl ModelConfig {
    /// Desk-scale model: 128x128 input, `F0 = 16`.
    pub fn desk(n_blocks: usize) -> Self {
        Self {
            n_blocks,
            base_channels: 16,
            input_width: 128,
            input_height: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=6).contains(&self.n_blocks) {
            return Err(Error::Config(format!(
                "n_blocks must be in [1, 6], got {}",
                self.n_blocks
            )));
        }
        if self.base_channels == 0 || self.input_channels == 0 || self.num_classes < 2 {
            return Err(Error::Config(
                "channel and class counts must be positive (num_classes >= 2)".into(),
            ));
        }
        let div = 1usize << self.n_blocks;
        if self.input_width == 0
            || self.input_height == 0
            || self.input_width % div != 0
            || self.input_height % div != 0
        {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by 2^{} = {div}",
                self.input_width, self.input_height, self.n_blocks
            )));
        }
        let keep = self.keep_probability();
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::Config(format!(
                "dropout rate {} gives keep probability {keep} outside (0, 1]",
                self.dropout_rate
            )));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::Config("init_std must be >= 0".into()));
        }
        Ok(())
    }

    pub fn keep_probability(&self) -> f64 {
        match self.dropout_semantics {
            DropoutSemantics::KeepProbability => self.dropout_rate,
            DropoutSemantics::DropProbability => 1.0 - self.dropout_rate,
        }
    }

    /// Feature channels at resolution level `l` (0 = full resolution).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial size at the lowest resolution.
    pub fn bottleneck_size(&self) -> (usize, usize) {
        (
            self.input_width >> self.n_blocks,
            self.input_height >> self.n_blocks,
        )
    }
}

/// Closed-form count of weights and biases implied by the block rule.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let conv3 = |cin: usize, cout: usize| 9 * cin * cout + cout;
    let deconv = |cin: usize, cout: usize| 4 * cin * cout + cout;
    let f = |l: usize| cfg.channels_at(l);
    let n = cfg.n_blocks;
    let mut total = 0;
    for l in 0..n {
        let cin = if l == 0 { cfg.input_channels } else { f(l - 1) };
        total += conv3(cin, f(l)) + conv3(f(l), f(l));
    }
    total += conv3(f(n - 1), f(n)) + conv3(f(n), f(n)) + deconv(f(n), f(n - 1));
    for l in (1..n).rev() {
        total += conv3(2 * f(l), f(l)) + conv3(f(l), f(l)) + deconv(f(l), f(l - 1));
    }
    total += conv3(2 * f(0), f(0)) + conv3(f(0), f(0));
    total + f(0) * cfg.num_classes + cfg.num_classes
}

/// Two 3x3 convolutions, each followed by a rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvPair<T> {
    pub first: Conv<T>,
    pub second: Conv<T>,
}

impl<T: Real> ConvPair<T> {
    fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            first: Conv::zeros(cin, cout, 3),
            second: Conv::zeros(cout, cout, 3),
        }
    }
}

/// Expansive-path block: a conv pair followed by an up-sampling deconvolution.
#[derive(Debug, Clone, PartialEq)]
pub struct UpBlock<T> {
    pub convs: ConvPair<T>,
    pub deconv: Deconv<T>,
}

/// The configurable n-block U-Net.
///
/// Contracting blocks `enc[0..n]` each end in a max-pool. Expansive blocks
/// `up[0..n]` start at the bottleneck; every block after the first receives
/// the matching contracting output concatenated in front of the up-sampled
/// features. The final block works at full resolution and ends in a 1x1
/// projection to `num_classes` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    config: ModelConfig,
    seed: u64,
    pub(crate) enc: Vec<ConvPair<T>>,
    pub(crate) up: Vec<UpBlock<T>>,
    pub(crate) last: ConvPair<T>,
    pub(crate) head: Conv<T>,
}

/// The training-precision model.
pub type Model = UNet<f32>;

/// Named view of one parameter tensor.
#[derive(Debug)]
pub struct ParamView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

struct PairTape<T> {
    input: FeatureMap<T>,
    first: FeatureMap<T>,
    second: FeatureMap<T>,
    mask: Option<Vec<T>>,
}

struct UpTape<T> {
    pair: PairTape<T>,
    /// deconv input (pair output after dropout)
    pair_out: FeatureMap<T>,
    /// deconv output after the rectifier
    up_out: FeatureMap<T>,
}

/// Activations recorded by [`UNet::forward_train`] for the backward pass.
pub struct Tape<T> {
    enc: Vec<(PairTape<T>, Vec<u32>)>,
    enc_out_dims: Vec<(usize, usize)>,
    up: Vec<UpTape<T>>,
    last: PairTape<T>,
    last_out: FeatureMap<T>,
}

impl<T: Real> UNet<T> {
    /// Builds the network and initializes it from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        net.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (std, bias) = (config.init_std, config.init_bias);
        for pair in net.enc.iter_mut() {
            pair.first.init(&mut rng, std, bias);
            pair.second.init(&mut rng, std, bias);
        }
        for blk in net.up.iter_mut() {
            blk.convs.first.init(&mut rng, std, bias);
            blk.convs.second.init(&mut rng, std, bias);
            blk.deconv.init(&mut rng, std, bias);
        }
        net.last.first.init(&mut rng, std, bias);
        net.last.second.init(&mut rng, std, bias);
        net.head.init(&mut rng, std, bias);
        Ok(net)
    }

    /// Same architecture with every parameter zero (used as gradient buffer).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_blocks;
        let f = |l: usize| config.channels_at(l);
        let enc = (0..n)
            .map(|l| {
                let cin = if l == 0 { config.input_channels } else { f(l - 1) };
                ConvPair::zeros(cin, f(l))
            })
            .collect();
        let mut up = vec![UpBlock {
            convs: ConvPair::zeros(f(n - 1), f(n)),
            deconv: Deconv::zeros(f(n), f(n - 1)),
        }];
        for l in (1..n).rev() {
            up.push(UpBlock {
                convs: ConvPair::zeros(2 * f(l), f(l)),
                deconv: Deconv::zeros(f(l), f(l - 1)),
            });
        }
        Ok(Self {
            config: config.clone(),
            seed: 0,
            enc,
            up,
            last: ConvPair::zeros(2 * f(0), f(0)),
            head: Conv::zeros(f(0), config.num_classes, 1),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(&self.config).expect("valid config");
        z.seed = self.seed;
        z
    }

    pub(crate) fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// All parameter tensors in a fixed order.
    pub fn params(&self) -> Vec<ParamView<'_, T>> {
        let mut out = Vec::new();
        fn push_conv<'a, T>(out: &mut Vec<ParamView<'a, T>>, name: String, c: &'a Conv<T>) {
            out.push(ParamView {
                name: format!("{name}.weight"),
                shape: vec![c.cout, c.cin, c.k, c.k],
                data: &c.weight,
            });
            out.push(ParamView {
                name: format!("{name}.bias"),
                shape: vec![c.cout],
                data: &c.bias,
            });
        }
        for (l, pair) in self.enc.iter().enumerate() {
            push_conv(&mut out, format!("enc{l}.conv1"), &pair.first);
            push_conv(&mut out, format!("enc{l}.conv2"), &pair.second);
        }
        for (j, blk) in self.up.iter().enumerate() {
            push_conv(&mut out, format!("up{j}.conv1"), &blk.convs.first);
            push_conv(&mut out, format!("up{j}.conv2"), &blk.convs.second);
            out.push(ParamView {
                name: format!("up{j}.deconv.weight"),
                shape: vec![blk.deconv.cout, 2, 2, blk.deconv.cin],
                data: &blk.deconv.weight,
            });
            out.push(ParamView {
                name: format!("up{j}.deconv.bias"),
                shape: vec![blk.deconv.cout],
                data: &blk.deconv.bias,
            });
        }
        push_conv(&mut out, "last.conv1".into(), &self.last.first);
        push_conv(&mut out, "last.conv2".into(), &self.last.second);
        push_conv(&mut out, "head".into(), &self.head);
        out
    }

    /// Mutable parameter slices, same order as [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for pair in self.enc.iter_mut() {
            out.push(&mut pair.first.weight);
            out.push(&mut pair.first.bias);
            out.push(&mut pair.second.weight);
            out.push(&mut pair.second.bias);
        }
        for blk in self.up.iter_mut() {
            out.push(&mut blk.convs.first.weight);
            out.push(&mut blk.convs.first.bias);
            out.push(&mut blk.convs.second.weight);
            out.push(&mut blk.convs.second.bias);
            out.push(&mut blk.deconv.weight);
            out.push(&mut blk.deconv.bias);
        }
        out.push(&mut self.last.first.weight);
        out.push(&mut self.last.first.bias);
        out.push(&mut self.last.second.weight);
        out.push(&mut self.last.second.bias);
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    fn check_input(&self, img: &NormalizedImage) -> Result<()> {
        if img.width() != self.config.input_width || img.height() != self.config.input_height {
            return Err(Error::Shape(format!(
                "model expects {}x{} input, got {}x{}",
                self.config.input_width,
                self.config.input_height,
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    fn input_map(&self, img: &NormalizedImage) -> FeatureMap<T> {
        FeatureMap {
            c: 1,
            h: img.height(),
            w: img.width(),
            data: img
                .pixels()
                .iter()
                .map(|&v| T::from_f64_lossy(v as f64))
                .collect(),
        }
    }

    fn to_logits(&self, out: FeatureMap<T>) -> Result<LogitCube> {
        let data = out.data.iter().map(|v| v.as_f64()).collect();
        LogitCube::new(out.w, out.h, out.c, data)
    }

    fn run(
        &self,
        img: &NormalizedImage,
        mut rng: Option<&mut ChaCha8Rng>,
        record: bool,
    ) -> Result<(FeatureMap<T>, Option<Tape<T>>)> {
        self.check_input(img)?;
        let keep = self.config.keep_probability();
        let mut x = self.input_map(img);
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut enc_tapes = Vec::new();
        let mut enc_out_dims = Vec::new();
        for pair in &self.enc {
            let (out, tape) = pair_fwd(pair, x, rng.as_deref_mut().map(|r| (r, keep)), record);
            let (pooled, arg) = maxpool2(&out);
            enc_out_dims.push((out.h, out.w));
            if let Some(t) = tape {
                enc_tapes.push((t, arg));
            }
            skips.push(out);
            x = pooled;
        }
        let mut up_tapes = Vec::new();
        let n = self.enc.len();
        for (j, blk) in self.up.iter().enumerate() {
            let input = if j == 0 {
                x
            } else {
                concat(&skips[n - j], &x)
            };
            let (out, tape) = pair_fwd(&blk.convs, input, rng.as_deref_mut().map(|r| (r, keep)), record);
            let mut upo = blk.deconv.forward(&out);
            relu_inplace(&mut upo);
            if let Some(t) = tape {
                up_tapes.push(UpTape {
                    pair: t,
                    pair_out: out,
                    up_out: upo.clone(),
                });
            }
            x = upo;
        }
        let input = concat(&skips[0], &x);
        let (out, last_tape) = pair_fwd(&self.last, input, rng.as_deref_mut().map(|r| (r, keep)), record);
        let logits = self.head.forward(&out);
        let tape = last_tape.map(|last| Tape {
            enc: enc_tapes,
            enc_out_dims,
            up: up_tapes,
            last,
            last_out: out,
        });
        Ok((logits, tape))
    }

    /// Inference: dropout disabled, deterministic.
    pub fn forward(&self, img: &NormalizedImage) -> Result<LogitCube> {
        let (out, _) = self.run(img, None, false)?;
        self.to_logits(out)
    }

    /// Training-mode forward pass with dropout drawn from `rng`.
    pub fn forward_train(
        &self,
        img: &NormalizedImage,
        rng: &mut ChaCha8Rng,
    ) -> Result<(LogitCube, Tape<T>)> {
        self.forward_record(img, Some(rng))
    }

    /// Forward pass that records activations for [`backward`](Self::backward);
    /// dropout is applied only when `rng` is given.
    pub fn forward_record(
        &self,
        img: &NormalizedImage,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LogitCube, Tape<T>)> {
        let (out, tape) = self.run(img, rng, true)?;
        Ok((self.to_logits(out)?, tape.expect("recorded")))
    }

    /// Forward with an explicit mode flag. Training mode draws dropout masks
    /// from a generator seeded with `seed`.
    pub fn forward_mode(&self, img: &NormalizedImage, train_mode: bool, seed: u64) -> Result<LogitCube> {
        if train_mode {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(self.forward_train(img, &mut rng)?.0)
        } else {
            self.forward(img)
        }
    }

    /// Probability cube and arg-max segmentation.
    pub fn predict(&self, img: &NormalizedImage) -> Result<(ProbabilityCube, SegMap)> {
        let probs = softmax_pixelwise(&self.forward(img)?)?;
        let seg = probs.argmax();
        Ok((probs, seg))
    }

    fn pair_backward(
        pair: &ConvPair<T>,
        tape: &PairTape<T>,
        mut dout: FeatureMap<T>,
        grad: &mut ConvPair<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        if let Some(mask) = &tape.mask {
            for (g, &m) in dout.data.iter_mut().zip(mask) {
                *g = *g * m;
            }
        }
        relu_backward_inplace(&mut dout, &tape.second);
        let mut dfirst = pair
            .second
            .backward(&tape.first, &dout, &mut grad.second, true)
            .expect("input grad requested");
        relu_backward_inplace(&mut dfirst, &tape.first);
        pair.first
            .backward(&tape.input, &dfirst, &mut grad.first, need_input_grad)
    }

    /// Accumulates `dL/dparams` into `grad` given `dL/dlogits` (layer-major).
    pub fn backward(&self, tape: &Tape<T>, dlogits: &[f64], grad: &mut UNet<T>) -> Result<()> {
        let out = &tape.last_out;
        if dlogits.len() != self.config.num_classes * out.hw() {
            return Err(Error::Shape(format!(
                "logit gradient has {} values, expected {}",
                dlogits.len(),
                self.config.num_classes * out.hw()
            )));
        }
        let dhead = FeatureMap {
            c: self.config.num_classes,
            h: out.h,
            w: out.w,
            data: dlogits.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        };
        let dlast = self
            .head
            .backward(out, &dhead, &mut grad.head, true)
            .expect("input grad");
        let dcat = Self::pair_backward(&self.last, &tape.last, dlast, &mut grad.last, true)
            .expect("input grad");
        let n = self.enc.len();
        let mut dskip: Vec<Option<FeatureMap<T>>> = (0..n).map(|_| None).collect();
        let (ds0, mut dx) = split(dcat, self.config.channels_at(0));
        dskip[0] = Some(ds0);
        for j in (0..self.up.len()).rev() {
            let blk = &self.up[j];
            let t = &tape.up[j];
            relu_backward_inplace(&mut dx, &t.up_out);
            let dpair = blk.deconv.backward(&t.pair_out, &dx, &mut grad.up[j].deconv);
            let din = Self::pair_backward(&blk.convs, &t.pair, dpair, &mut grad.up[j].convs, true)
                .expect("input grad");
            if j == 0 {
                dx = din;
            } else {
                let level = n - j;
                let (ds, rest) = split(din, self.config.channels_at(level));
                dskip[level] = Some(ds);
                dx = rest;
            }
        }
        // dx is now the gradient w.r.t. the deepest pooled map
        for l in (0..n).rev() {
            let (pt, arg) = &tape.enc[l];
            let (h, w) = tape.enc_out_dims[l];
            let mut d = maxpool2_backward(&dx, arg, h, w);
            if let Some(ds) = dskip[l].take() {
                for (a, b) in d.data.iter_mut().zip(&ds.data) {
                    *a = *a + *b;
                }
            }
            match Self::pair_backward(&self.enc[l], pt, d, &mut grad.enc[l], l > 0) {
                Some(next) => dx = next,
                None => break,
            }
        }
        Ok(())
    }

    /// Converts to another element type (e.g. f32 -> f64 for gradient checks).
    pub fn cast<U: Real>(&self) -> UNet<U> {
        let mut out = UNet::<U>::zeros(&self.config).expect("valid config");
        out.seed = self.seed;
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            for (d, s) in dst.iter_mut().zip(src.data) {
                *d = U::from_f64_lossy(s.as_f64());
            }
        }
        out
    }
}

/// Pair forward that keeps the pre-dropout activation when recording.
fn pair_fwd<T: Real>(
    pair: &ConvPair<T>,
    input: FeatureMap<T>,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
    record: bool,
) -> (FeatureMap<T>, Option<PairTape<T>>) {
    let mut first = pair.first.forward(&input);
    relu_inplace(&mut first);
    let mut second = pair.second.forward(&first);
    relu_inplace(&mut second);
    let mask: Option<Vec<T>> = match dropout {
        Some((rng, keep)) if keep < 1.0 => {
            let scale = T::from_f64_lossy(1.0 / keep);
            Some(
                (0..second.data.len())
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect(),
            )
        }
        _ => None,
    };
    if !record && mask.is_none() {
        return (second, None);
    }
    let out = match &mask {
        Some(m) => FeatureMap {
            c: second.c,
            h: second.h,
            w: second.w,
            data: second.data.iter().zip(m).map(|(&a, &b)| a * b).collect(),
        },
        None => second.clone(),
    };
    let tape = record.then_some(PairTape {
        input,
        first,
        second,
        mask,
    });
    (out, tape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{ClassWeights, LossSpec};

    fn small(n_blocks: usize, f0: usize, side: usize) -> ModelConfig {
        ModelConfig {
            n_blocks,
            base_channels: f0,
            input_width: side,
            input_height: side,
            ..ModelConfig::default()
        }
    }

    fn random_image(side: usize, seed: u64) -> NormalizedImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NormalizedImage::new(side, side, (0..side * side).map(|_| rng.random::<f32>()).collect())
            .unwrap()
    }

    #[test]
    fn shapes_and_partition_for_all_depths() {
        for n in 1..=6 {
            let side = 1 << (n + 1);
            let cfg = small(n, 2, side);
            let net = Model::build(&cfg, 3).unwrap();
            assert_eq!(net.num_params(), param_count(&cfg));
            let (probs, seg) = net.predict(&random_image(side, n as u64)).unwrap();
            assert_eq!((probs.width(), probs.height(), probs.num_classes()), (side, side, 6));
            let hw = side * side;
            for p in 0..hw {
                let s: f64 = (0..6).map(|k| probs.data()[k * hw + p]).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
            assert!(seg.ids().iter().all(|&v| v < 6));
            assert_eq!(seg.ids().len(), hw);
        }
    }

    #[test]
    fn one_block_unit_width_count() {
        assert_eq!(param_count(&small(1, 1, 8)), 128);
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        assert!(Model::build(&small(0, 2, 8), 0).is_err());
        assert!(Model::build(&small(7, 2, 256), 0).is_err());
        assert!(Model::build(&small(3, 2, 12), 0).is_err());
        let net = Model::build(&small(1, 2, 8), 0).unwrap();
        assert!(matches!(net.forward(&random_image(16, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn build_and_inference_are_deterministic() {
        let cfg = small(2, 4, 16);
        let a = Model::build(&cfg, 9).unwrap();
        let b = Model::build(&cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Model::build(&cfg, 10).unwrap());
        let img = random_image(16, 1);
        assert_eq!(a.forward(&img).unwrap(), a.forward(&img).unwrap());
        let t1 = a.forward_mode(&img, true, 5).unwrap();
        assert_eq!(t1, a.forward_mode(&img, true, 5).unwrap());
        assert_ne!(t1, a.forward(&img).unwrap());
    }

    fn loss_of(net: &UNet<f64>, img: &NormalizedImage, ids: &[u8], spec: &LossSpec) -> f64 {
        let probs = softmax_pixelwise(&net.forward(img).unwrap()).unwrap();
        spec.evaluate_ids(&probs, ids).unwrap().value
    }

    #[test]
    fn backward_matches_finite_differences() {
        let side = 8;
        let net = Model::build(&small(2, 2, side), 4).unwrap().cast::<f64>();
        let img = random_image(side, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ids: Vec<u8> = (0..side * side).map(|_| rng.random_range(0..6u8)).collect();
        let spec = LossSpec::focal(ClassWeights::foreground(6, 20.0).unwrap());

        let (logits, tape) = net.forward_record(&img, None).unwrap();
        let out = spec
            .evaluate_ids(&softmax_pixelwise(&logits).unwrap(), &ids)
            .unwrap();
        let mut grad = net.zeros_like();
        net.backward(&tape, &out.grad, &mut grad).unwrap();
        let analytic: Vec<Vec<f64>> = grad.params().iter().map(|p| p.data.to_vec()).collect();

        let scale = analytic.iter().flatten().fold(0f64, |m, v| m.max(v.abs()));
        let eps = 1e-5;
        let mut checked = 0;
        for (t, g) in analytic.iter().enumerate() {
            for i in (0..g.len()).step_by(g.len().div_ceil(6)) {
                let mut plus = net.clone();
                plus.params_mut()[t][i] += eps;
                let mut minus = net.clone();
                minus.params_mut()[t][i] -= eps;
                let num = (loss_of(&plus, &img, &ids, &spec) - loss_of(&minus, &img, &ids, &spec))
                    / (2.0 * eps);
                let err = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-3 * scale);
                assert!(err < 1e-4, "tensor {t} index {i}: fd {num} vs {}", g[i]);
                checked += 1;
            }
        }
        assert!(checked > 50);
    }
}
