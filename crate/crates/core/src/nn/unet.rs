//! Residual 3D U-net.
//!
//! Layout for `depth = D` and `base_channels = C`:
//!
//! * stem: 3x3x3 convolution, instance norm, ReLU mapping the input to `C`
//!   channels;
//! * encoder level `l` (`0..D`): a strided 2x2x2 convolution halving each
//!   spatial dim and doubling channels (levels `l > 0` only), then a residual
//!   block of `convs_per_block` conv/norm/ReLU units whose input is added to
//!   its output;
//! * decoder level `l` (`D-2..=0`): a 2x2x2 transpose convolution doubling
//!   each spatial dim, concatenation with the encoder output of level `l`,
//!   `convs_per_block - 1` conv/norm/ReLU units and a residual add of the
//!   upsampled tensor;
//! * head: 1x1x1 convolution to `out_classes` logits and a softmax.
//!
//! Inputs whose dims are not multiples of `2^(D-1)` are zero-padded
//! symmetrically before the stem and the output is cropped back.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv3d, ConvTranspose3d, ConvUnit};
use super::loss::{softmax_backward, ClassWeights, LossKind, ProbabilityField};
use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};
use crate::volume::{BinaryMask3D, CtVolume, Grid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub depth: usize,
    pub convs_per_block: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_classes: usize,
    pub input_dims: [usize; 3],
    /// Seed for weight initialisation.
    #[serde(default)]
    pub init_seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 6,
            convs_per_block: 3,
            base_channels: 32,
            in_channels: 1,
            out_classes: 2,
            input_dims: [200, 150, 100],
            init_seed: 0,
        }
    }
}

impl UNetConfig {
    /// Small network for CPU-scale experiments.
    pub fn toy(input_dims: [usize; 3]) -> Self {
        UNetConfig {
            depth: 3,
            base_channels: 8,
            input_dims,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depth < 2 {
            return bad(format!("depth must be >= 2, got {}", self.depth));
        }
        if self.depth > 12 {
            return bad(format!("depth {} is unreasonably large", self.depth));
        }
        if self.convs_per_block < 2 {
            return bad(format!(
                "convs_per_block must be >= 2 (one is replaced by the transpose convolution), got {}",
                self.convs_per_block
            ));
        }
        if self.base_channels == 0 || self.in_channels != 1 || self.out_classes != 2 {
            return bad(format!(
                "unsupported channels: base {}, in {}, out {}",
                self.base_channels, self.in_channels, self.out_classes
            ));
        }
        if self.input_dims.contains(&0) {
            return bad(format!("input dims must be >= 1, got {:?}", self.input_dims));
        }
        Ok(())
    }

    /// Dims after internal padding to a multiple of `2^(depth-1)`.
    pub fn padded_dims(&self) -> [usize; 3] {
        let f = 1usize << (self.depth - 1);
        self.input_dims.map(|d| d.div_ceil(f) * f)
    }

    fn pad_before(&self) -> [usize; 3] {
        let p = self.padded_dims();
        [0, 1, 2].map(|a| (p[a] - self.input_dims[a]) / 2)
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Conv/norm/ReLU units whose input is added to their output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub units: Vec<ConvUnit>,
}

impl ResidualBlock {
    pub fn new(channels: usize, n_units: usize, rng: &mut ChaCha8Rng) -> Self {
        ResidualBlock {
            units: (0..n_units).map(|_| ConvUnit::new(channels, channels, rng)).collect(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for u in &self.units {
            h = u.forward(&h);
        }
        h.add_assign(x);
        h
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for u in &mut self.units {
            h = u.forward_train(&h);
        }
        h.add_assign(x);
        h
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let mut g = gy.clone();
        for u in self.units.iter_mut().rev() {
            g = u.backward(&g);
        }
        g.add_assign(gy);
        g
    }

    /// Zeroes every convolution so the block reduces to the identity.
    pub fn zero_convs(&mut self) {
        self.units.iter_mut().for_each(ConvUnit::zero_conv);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderLevel {
    down: Option<Conv3d>,
    block: ResidualBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DecoderLevel {
    up: ConvTranspose3d,
    units: Vec<ConvUnit>,
    channels: usize,
}

impl DecoderLevel {
    fn forward(&self, below: &Tensor, skip: &Tensor) -> Tensor {
        let up = self.up.forward(below);
        let mut h = Tensor::concat(&up, skip);
        for u in &self.units {
            h = u.forward(&h);
        }
        h.add_assign(&up);
        h
    }

    fn forward_train(&mut self, below: &Tensor, skip: &Tensor) -> Tensor {
        let up = self.up.forward_train(below);
        let mut h = Tensor::concat(&up, skip);
        for u in &mut self.units {
            h = u.forward_train(&h);
        }
        h.add_assign(&up);
        h
    }

    /// Returns (gradient for the level below, gradient for the skip input).
    fn backward(&mut self, gy: &Tensor) -> (Tensor, Tensor) {
        let mut g = gy.clone();
        for u in self.units.iter_mut().rev() {
            g = u.backward(&g);
        }
        let (mut g_up, g_skip) = g.split(self.channels);
        g_up.add_assign(gy);
        (self.up.backward(&g_up), g_skip)
    }
}

/// A 3D U-net with its weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UNetModel {
    config: UNetConfig,
    stem: ConvUnit,
    encoder: Vec<EncoderLevel>,
    /// `decoder[l]` produces level `l` from level `l + 1`.
    decoder: Vec<DecoderLevel>,
    head: Conv3d,
    #[serde(skip)]
    train_cache: Option<ProbabilityField>,
}

/// Builds a randomly initialised (He-normal) network.
pub fn build_unet(config: UNetConfig) -> Result<UNetModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let c = |l| config.channels_at(l);
    let stem = ConvUnit::new(config.in_channels, c(0), &mut rng);
    let encoder = (0..config.depth)
        .map(|l| EncoderLevel {
            down: (l > 0).then(|| Conv3d::new(c(l - 1), c(l), 2, 2, 0, &mut rng)),
            block: ResidualBlock::new(c(l), config.convs_per_block, &mut rng),
        })
        .collect();
    let decoder = (0..config.depth - 1)
        .map(|l| {
            let up = ConvTranspose3d::new(c(l + 1), c(l), &mut rng);
            let mut units = vec![ConvUnit::new(2 * c(l), c(l), &mut rng)];
            for _ in 1..config.convs_per_block - 1 {
                units.push(ConvUnit::new(c(l), c(l), &mut rng));
            }
            DecoderLevel {
                up,
                units,
                channels: c(l),
            }
        })
        .collect();
    let head = Conv3d::new(c(0), config.out_classes, 1, 1, 0, &mut rng);
    Ok(UNetModel {
        config,
        stem,
        encoder,
        decoder,
        head,
        train_cache: None,
    })
}

fn softmax(logits: &Tensor, spacing: [f64; 3]) -> Result<ProbabilityField> {
    let n = logits.spatial();
    let k = logits.channels;
    let mut classes: Vec<Vec<f64>> = vec![Vec::with_capacity(n); k];
    for i in 0..n {
        let m = (0..k).map(|c| logits.data[c * n + i]).fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = (0..k).map(|c| (logits.data[c * n + i] as f64 - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        for (c, e) in exps.into_iter().enumerate() {
            classes[c].push(e / s);
        }
    }
    ProbabilityField::new(
        classes
            .into_iter()
            .map(|d| Grid::from_vec(logits.dims, spacing, d))
            .collect::<Result<_>>()?,
    )
}

impl UNetModel {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    fn input_tensor(&self, vol: &CtVolume) -> Result<Tensor> {
        if vol.dims() != self.config.input_dims {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dims,
                actual: vol.dims(),
            });
        }
        let t = Tensor::from_vec(1, vol.dims(), vol.data().to_vec());
        Ok(t.pad(self.config.pad_before(), self.config.padded_dims()))
    }

    /// Raw logits on the padded grid.
    fn logits(&self, x: &Tensor) -> Tensor {
        let mut h = self.stem.forward(x);
        let mut skips = Vec::with_capacity(self.config.depth);
        for level in &self.encoder {
            if let Some(down) = &level.down {
                h = down.forward(&h);
            }
            h = level.block.forward(&h);
            skips.push(h.clone());
        }
        let mut h = skips.pop().expect("depth >= 2");
        for l in (0..self.config.depth - 1).rev() {
            h = self.decoder[l].forward(&h, &skips[l]);
        }
        self.head.forward(&h)
    }

    /// Per-voxel class probabilities for a normalised input volume.
    pub fn forward(&self, vol: &CtVolume) -> Result<ProbabilityField> {
        let x = self.input_tensor(vol)?;
        let logits = self.logits(&x).crop(self.config.pad_before(), self.config.input_dims);
        softmax(&logits, vol.spacing())
    }

    /// Foreground mask by per-voxel argmax.
    pub fn predict_mask(&self, vol: &CtVolume) -> Result<BinaryMask3D> {
        Ok(self.forward(vol)?.argmax_mask())
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut h = self.stem.forward_train(x);
        let mut skips = Vec::with_capacity(self.config.depth);
        for level in &mut self.encoder {
            if let Some(down) = &mut level.down {
                h = down.forward_train(&h);
            }
            h = level.block.forward_train(&h);
            skips.push(h.clone());
        }
        let mut h = skips.pop().expect("depth >= 2");
        for l in (0..self.config.depth - 1).rev() {
            h = self.decoder[l].forward_train(&h, &skips[l]);
        }
        self.head.forward_train(&h)
    }

    fn backward(&mut self, g_logits: &Tensor) {
        let depth = self.config.depth;
        let mut g = self.head.backward(g_logits);
        let mut skip_grads: Vec<Tensor> = Vec::with_capacity(depth - 1);
        for l in 0..depth - 1 {
            let (g_below, g_skip) = self.decoder[l].backward(&g);
            skip_grads.push(g_skip);
            g = g_below;
        }
        // g is now the gradient at the bottom encoder output
        for l in (0..depth).rev() {
            if l < depth - 1 {
                g.add_assign(&skip_grads[l]);
            }
            let level = &mut self.encoder[l];
            g = level.block.backward(&g);
            if let Some(down) = &mut level.down {
                g = down.backward(&g);
            }
        }
        self.stem.backward(&g);
    }

    /// Forward and backward pass on one sample; gradients accumulate in the
    /// parameters. Returns the loss.
    pub fn accumulate_gradients(
        &mut self,
        input: &CtVolume,
        target: &BinaryMask3D,
        loss: LossKind,
        weights: &ClassWeights,
    ) -> Result<f64> {
        input.ensure_same_dims(target)?;
        let x = self.input_tensor(input)?;
        let logits_padded = self.forward_train(&x);
        let before = self.config.pad_before();
        let logits = logits_padded.crop(before, self.config.input_dims);
        let p = softmax(&logits, input.spacing())?;
        let (value, grad_p) = loss.evaluate(&p, target, weights)?;
        let gz = softmax_backward(&p, &grad_p);
        let mut g = Tensor::zeros(logits.channels, logits.dims);
        let n = logits.spatial();
        for c in 0..logits.channels {
            for (dst, &src) in g.data[c * n..(c + 1) * n].iter_mut().zip(gz.class(c).data()) {
                *dst = src as f32;
            }
        }
        let g = g.pad(before, self.config.padded_dims());
        self.backward(&g);
        self.train_cache = Some(p);
        Ok(value)
    }

    /// Probabilities from the most recent training pass.
    pub fn last_training_output(&self) -> Option<&ProbabilityField> {
        self.train_cache.as_ref()
    }

    /// Every trainable parameter, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.stem.params_mut();
        for level in &mut self.encoder {
            if let Some(down) = &mut level.down {
                out.extend(down.params_mut());
            }
            for u in &mut level.block.units {
                out.extend(u.params_mut());
            }
        }
        for level in &mut self.decoder {
            out.extend(level.up.params_mut());
            for u in &mut level.units {
                out.extend(u.params_mut());
            }
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn parameter_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.value.len()).sum()
    }

    pub fn encoder_block_mut(&mut self, level: usize) -> &mut ResidualBlock {
        &mut self.encoder[level].block
    }

    pub(crate) fn ensure_buffers(&mut self) {
        for p in self.params_mut() {
            p.ensure_buffers();
        }
    }
}
