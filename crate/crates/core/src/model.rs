//! The assembled classifier: stacked attention-augmented convolution blocks,
//! an optional highway layer and a dense softmax output.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::layers::{self, ConvParams, DenseParams, HeadParams, HighwayParams, MhaParams};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// The three network variants compared in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    /// Plain convolutions, no attention, no highway.
    #[serde(rename = "convnet")]
    ConvNet,
    #[serde(rename = "saconvnet")]
    SaConvNet,
    #[serde(rename = "saconvnet-hw")]
    SaConvNetHighway,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::ConvNet, Arch::SaConvNet, Arch::SaConvNetHighway];

    pub fn name(self) -> &'static str {
        match self {
            Arch::ConvNet => "convnet",
            Arch::SaConvNet => "saconvnet",
            Arch::SaConvNetHighway => "saconvnet-hw",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}` (expected one of: convnet, saconvnet, saconvnet-hw)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_d: usize,
    pub blocks: usize,
    /// Channels out of each block: convolution plus attention.
    pub total_filters_per_block: usize,
    /// How many of the block's channels come from attention; 0 disables it.
    pub attn_channels: usize,
    pub num_heads: usize,
    pub d_k: usize,
    pub kernel_size: usize,
    pub pool_size: usize,
    pub dropout_rate: f64,
    pub use_highway: bool,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_h: 15,
            input_w: 35,
            input_d: 2,
            blocks: 2,
            total_filters_per_block: 16,
            attn_channels: 4,
            num_heads: 2,
            d_k: 4,
            kernel_size: 3,
            pool_size: 2,
            dropout_rate: 0.25,
            use_highway: true,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn for_arch(arch: Arch) -> Self {
        ModelConfig::default().with_arch(arch)
    }

    /// Switches attention and highway on or off, keeping everything else.
    pub fn with_arch(mut self, arch: Arch) -> Self {
        match arch {
            Arch::ConvNet => {
                self.attn_channels = 0;
                self.use_highway = false;
            }
            Arch::SaConvNet | Arch::SaConvNetHighway => {
                if self.attn_channels == 0 {
                    self.attn_channels = ModelConfig::default().attn_channels;
                }
                self.use_highway = arch == Arch::SaConvNetHighway;
            }
        }
        self
    }

    pub fn arch(&self) -> Arch {
        match (self.attn_channels, self.use_highway) {
            (0, _) => Arch::ConvNet,
            (_, false) => Arch::SaConvNet,
            (_, true) => Arch::SaConvNetHighway,
        }
    }

    pub fn conv_channels(&self) -> usize {
        self.total_filters_per_block - self.attn_channels
    }

    /// Value dimension of each attention head.
    pub fn d_v(&self) -> usize {
        self.attn_channels / self.num_heads
    }

    /// Spatial extent after every block's pooling.
    pub fn block_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.blocks);
        let (mut h, mut w) = (self.input_h, self.input_w);
        for _ in 0..self.blocks {
            h /= self.pool_size;
            w /= self.pool_size;
            dims.push((h, w));
        }
        dims
    }

    /// Length of the flattened feature vector fed to the highway/dense layers.
    pub fn flattened_features(&self) -> usize {
        let (h, w) = self.block_dims().last().copied().unwrap_or((self.input_h, self.input_w));
        let d = if self.blocks == 0 {
            self.input_d
        } else {
            self.total_filters_per_block
        };
        h * w * d
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_h == 0 || self.input_w == 0 || self.input_d == 0 {
            return bad("input extents must be positive".into());
        }
        if self.blocks == 0 {
            return bad("at least one block is required".into());
        }
        if self.attn_channels >= self.total_filters_per_block {
            return bad(format!(
                "attention channels ({}) must be fewer than the block's {} filters",
                self.attn_channels, self.total_filters_per_block
            ));
        }
        if self.attn_channels > 0 {
            if self.num_heads == 0 || !self.attn_channels.is_multiple_of(self.num_heads) {
                return bad(format!(
                    "attention channels ({}) must be divisible by the head count ({})",
                    self.attn_channels, self.num_heads
                ));
            }
            if self.d_k == 0 {
                return bad("key dimension must be positive".into());
            }
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel size {} must be odd", self.kernel_size));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.num_classes != 2 {
            return bad(format!("only binary classification is supported, got {} classes", self.num_classes));
        }
        if self.pool_size == 0 {
            return bad("pool size must be positive".into());
        }
        let (mut h, mut w) = (self.input_h, self.input_w);
        for b in 0..self.blocks {
            if self.pool_size > h || self.pool_size > w {
                return bad(format!("block {b}: pool {} exceeds a {h}x{w} map", self.pool_size));
            }
            h /= self.pool_size;
            w /= self.pool_size;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub conv: ConvParams<T>,
    pub attn: Option<MhaParams<T>>,
}

/// Every learnable tensor of the network. Instantiated with `T = Var` when
/// registered on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub blocks: Vec<BlockParams<T>>,
    pub highway: Option<HighwayParams<T>>,
    pub dense: DenseParams<T>,
}

impl<T> ModelParams<T> {
    /// Applies `f` to every tensor in canonical order, passing its name.
    pub fn try_map<'s, U>(&'s self, f: &mut impl FnMut(&str, &'s T) -> Result<U>) -> Result<ModelParams<U>> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let conv = ConvParams {
                kernel: f(&format!("block{b}.conv.kernel"), &block.conv.kernel)?,
                bias: f(&format!("block{b}.conv.bias"), &block.conv.bias)?,
            };
            let attn = match &block.attn {
                Some(attn) => {
                    let mut heads = Vec::with_capacity(attn.heads.len());
                    for (h, head) in attn.heads.iter().enumerate() {
                        heads.push(HeadParams {
                            w_q: f(&format!("block{b}.attn.head{h}.w_q"), &head.w_q)?,
                            w_k: f(&format!("block{b}.attn.head{h}.w_k"), &head.w_k)?,
                            w_v: f(&format!("block{b}.attn.head{h}.w_v"), &head.w_v)?,
                        });
                    }
                    let w_mh = f(&format!("block{b}.attn.w_mh"), &attn.w_mh)?;
                    Some(MhaParams { heads, w_mh })
                }
                None => None,
            };
            blocks.push(BlockParams { conv, attn });
        }
        let highway = match &self.highway {
            Some(hw) => Some(HighwayParams {
                w_h: f("highway.w_h", &hw.w_h)?,
                b_h: f("highway.b_h", &hw.b_h)?,
                w_t: f("highway.w_t", &hw.w_t)?,
                b_t: f("highway.b_t", &hw.b_t)?,
            }),
            None => None,
        };
        let dense = DenseParams {
            w: f("dense.w", &self.dense.w)?,
            b: f("dense.b", &self.dense.b)?,
        };
        Ok(ModelParams { blocks, highway, dense })
    }

    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&str, &'s T) -> U) -> ModelParams<U> {
        self.try_map(&mut |name, t| Ok(f(name, t))).expect("infallible")
    }

    /// References to every tensor in canonical order.
    pub fn iter(&self) -> Vec<&T> {
        let mut out = Vec::new();
        for block in &self.blocks {
            out.push(&block.conv.kernel);
            out.push(&block.conv.bias);
            if let Some(attn) = &block.attn {
                for head in &attn.heads {
                    out.extend([&head.w_q, &head.w_k, &head.w_v]);
                }
                out.push(&attn.w_mh);
            }
        }
        if let Some(hw) = &self.highway {
            out.extend([&hw.w_h, &hw.b_h, &hw.w_t, &hw.b_t]);
        }
        out.extend([&self.dense.w, &self.dense.b]);
        out
    }

    /// Mutable references in the same order as [`ModelParams::iter`].
    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            out.push(&mut block.conv.kernel);
            out.push(&mut block.conv.bias);
            if let Some(attn) = &mut block.attn {
                for head in &mut attn.heads {
                    out.extend([&mut head.w_q, &mut head.w_k, &mut head.w_v]);
                }
                out.push(&mut attn.w_mh);
            }
        }
        if let Some(hw) = &mut self.highway {
            out.extend([&mut hw.w_h, &mut hw.b_h, &mut hw.w_t, &mut hw.b_t]);
        }
        out.extend([&mut self.dense.w, &mut self.dense.b]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.map(|name, _| name.to_string()).iter().into_iter().cloned().collect()
    }
}

impl ModelParams {
    /// Seeded initialisation: He-style uniform weights scaled by fan-in,
    /// zero biases, and a gate bias of -1 so the highway starts out carrying.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |shape: &[usize], fan_in: usize| {
            let limit = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit))
        };
        let k = cfg.kernel_size;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        let mut d_in = cfg.input_d;
        for _ in 0..cfg.blocks {
            let conv = ConvParams {
                kernel: he(&[k, k, d_in, cfg.conv_channels()], k * k * d_in),
                bias: Tensor::zeros([cfg.conv_channels()]),
            };
            let attn = (cfg.attn_channels > 0).then(|| MhaParams {
                heads: (0..cfg.num_heads)
                    .map(|_| HeadParams {
                        w_q: he(&[d_in, cfg.d_k], d_in),
                        w_k: he(&[d_in, cfg.d_k], d_in),
                        w_v: he(&[d_in, cfg.d_v()], d_in),
                    })
                    .collect(),
                w_mh: he(&[cfg.attn_channels, cfg.attn_channels], cfg.attn_channels),
            });
            blocks.push(BlockParams { conv, attn });
            d_in = cfg.total_filters_per_block;
        }
        let f = cfg.flattened_features();
        let highway = cfg.use_highway.then(|| HighwayParams {
            w_h: he(&[f, f], f),
            b_h: Tensor::zeros([f]),
            w_t: he(&[f, f], f),
            b_t: Tensor::full([f], -1.0),
        });
        let dense = DenseParams {
            w: he(&[f, cfg.num_classes], f),
            b: Tensor::zeros([cfg.num_classes]),
        };
        let params = ModelParams { blocks, highway, dense };
        params.check_shapes(cfg)?;
        Ok(params)
    }

    /// Expected shape of every tensor, keyed by name, for `cfg`.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let k = cfg.kernel_size;
        let f = cfg.flattened_features();
        let mut out = Vec::new();
        let mut d_in = cfg.input_d;
        for b in 0..cfg.blocks {
            out.push((format!("block{b}.conv.kernel"), vec![k, k, d_in, cfg.conv_channels()]));
            out.push((format!("block{b}.conv.bias"), vec![cfg.conv_channels()]));
            if cfg.attn_channels > 0 {
                for h in 0..cfg.num_heads {
                    out.push((format!("block{b}.attn.head{h}.w_q"), vec![d_in, cfg.d_k]));
                    out.push((format!("block{b}.attn.head{h}.w_k"), vec![d_in, cfg.d_k]));
                    out.push((format!("block{b}.attn.head{h}.w_v"), vec![d_in, cfg.d_v()]));
                }
                out.push((format!("block{b}.attn.w_mh"), vec![cfg.attn_channels, cfg.attn_channels]));
            }
            d_in = cfg.total_filters_per_block;
        }
        if cfg.use_highway {
            out.push(("highway.w_h".into(), vec![f, f]));
            out.push(("highway.b_h".into(), vec![f]));
            out.push(("highway.w_t".into(), vec![f, f]));
            out.push(("highway.b_t".into(), vec![f]));
        }
        out.push(("dense.w".into(), vec![f, cfg.num_classes]));
        out.push(("dense.b".into(), vec![cfg.num_classes]));
        out
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::expected_shapes(cfg);
        let actual: Vec<(String, Vec<usize>)> = self
            .names()
            .into_iter()
            .zip(self.iter())
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected != actual {
            return Err(Error::Config(format!(
                "parameter layout does not match config: expected {expected:?}, got {actual:?}"
            )));
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.iter().iter().map(|t| t.len()).sum()
    }

    /// Registers every tensor as a borrowed leaf on `tape`.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a>) -> ModelParams<Var> {
        self.map(|_, t| tape.leaf_ref(t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Model { config, params })
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        if x.shape() != [c.input_h, c.input_w, c.input_d] {
            return Err(Error::dim(
                "forward",
                format!(
                    "input {:?} does not match configured [{}, {}, {}]",
                    x.shape(),
                    c.input_h,
                    c.input_w,
                    c.input_d
                ),
            ));
        }
        if !x.is_finite() {
            return Err(Error::Input("input contains non-finite values".into()));
        }
        Ok(())
    }

    /// Convolutional trunk: `[AAConv -> ReLU -> maxpool -> dropout] x blocks`,
    /// flattened to a row `[1, F]`.
    pub fn features(
        &self,
        tape: &mut Tape,
        x: Var,
        p: &ModelParams<Var>,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let mut h = x;
        for block in &p.blocks {
            h = layers::aaconv(tape, h, &block.conv, block.attn.as_ref())?;
            h = tape.relu(h);
            h = layers::maxpool(tape, h, self.config.pool_size)?;
            h = layers::dropout(tape, h, self.config.dropout_rate, training, rng)?;
        }
        let n = tape.value(h).len();
        tape.reshape(h, &[1, n])
    }

    /// Classifier head on a feature row: optional highway, then dense.
    /// Returns logits `[1, 2]`.
    pub fn head(&self, tape: &mut Tape, features: Var, p: &ModelParams<Var>) -> Result<Var> {
        let mut h = features;
        if let Some(hw) = &p.highway {
            h = layers::highway(tape, h, hw)?;
        }
        layers::dense(tape, h, &p.dense)
    }

    /// Full forward pass on a tape up to the logits `[1, 2]`.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        p: &ModelParams<Var>,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let f = self.features(tape, x, p, training, rng)?;
        self.head(tape, f, p)
    }

    /// Full forward pass on a tape; returns class probabilities `[1, 2]`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        p: &ModelParams<Var>,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let logits = self.logits_on_tape(tape, x, p, training, rng)?;
        tape.softmax(logits)
    }

    /// Logits `[2]` for one input grid.
    pub fn logits(&self, x: &Tensor, training: bool, rng: &mut impl Rng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape);
        let xv = tape.leaf_ref(x);
        let out = self.logits_on_tape(&mut tape, xv, &p, training, rng)?;
        tape.value(out).reshape([self.config.num_classes])
    }

    /// Class probabilities `[2]` for one input grid.
    pub fn forward(&self, x: &Tensor, training: bool, rng: &mut impl Rng) -> Result<Tensor> {
        self.logits(x, training, rng)?.reshape([1, self.config.num_classes])?.softmax()?.reshape([self.config.num_classes])
    }

    /// Inference-mode probability of the extreme class.
    pub fn predict_proba(&self, x: &Tensor) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(x, false, &mut rng)?.data()[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([15, 35, 2], |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn default_feature_count() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.block_dims(), vec![(7, 17), (3, 8)]);
        assert_eq!(cfg.flattened_features(), 384);
        assert_eq!(cfg.conv_channels(), 12);
        assert_eq!(cfg.d_v(), 2);
    }

    #[test]
    fn config_validation() {
        let ok = ModelConfig::default();
        ok.validate().unwrap();
        for broken in [
            ModelConfig { attn_channels: 16, ..ok.clone() },
            ModelConfig { attn_channels: 5, ..ok.clone() },
            ModelConfig { kernel_size: 4, ..ok.clone() },
            ModelConfig { dropout_rate: 1.0, ..ok.clone() },
            ModelConfig { pool_size: 40, ..ok.clone() },
        ] {
            assert!(matches!(broken.validate(), Err(Error::Config(_))), "{broken:?}");
        }
    }

    #[test]
    fn arch_mapping() {
        let c = ModelConfig::for_arch(Arch::ConvNet);
        assert_eq!((c.attn_channels, c.use_highway), (0, false));
        assert_eq!(c.conv_channels(), 16);
        assert_eq!(ModelConfig::for_arch(Arch::SaConvNet).arch(), Arch::SaConvNet);
        assert_eq!(ModelConfig::for_arch(Arch::SaConvNetHighway).arch(), Arch::SaConvNetHighway);
        assert_eq!("saconvnet-hw".parse::<Arch>().unwrap(), Arch::SaConvNetHighway);
        let err = "resnet".parse::<Arch>().unwrap_err().to_string();
        assert!(err.contains("convnet, saconvnet, saconvnet-hw"));
    }

    #[test]
    fn init_shapes_follow_config() {
        for arch in Arch::ALL {
            let cfg = ModelConfig::for_arch(arch);
            let p = ModelParams::init(&cfg, 1).unwrap();
            p.check_shapes(&cfg).unwrap();
            assert_eq!(p.names().len(), p.iter().len());
        }
        let p = ModelParams::init(&ModelConfig::default(), 1).unwrap();
        assert!(p.check_shapes(&ModelConfig::for_arch(Arch::ConvNet)).is_err());
        assert!(p.highway.as_ref().unwrap().b_t.data().iter().all(|&b| b == -1.0));
    }

    #[test]
    fn forward_outputs_a_distribution() {
        let model = Model::init(ModelConfig::default(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for training in [false, true] {
            let p = model.forward(&sample(2), training, &mut rng).unwrap();
            assert_eq!(p.shape(), &[2]);
            assert!((p.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_even_odds() {
        let mut model = Model::init(ModelConfig::default(), 7).unwrap();
        for t in model.params.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = model.forward(&sample(3), true, &mut rng).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Model::init(ModelConfig::default(), 9).unwrap();
        let x = sample(4);
        let run = |seed| model.forward(&x, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(run(5), run(5));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let model = Model::init(ModelConfig::default(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = model.forward(&Tensor::zeros([15, 35, 3]), false, &mut rng);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }
}
