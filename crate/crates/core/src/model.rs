//! Network definition: a declarative layer-stack config, the receptive-field
//! recurrence derived from it, parameter initialization, and the forward
//! passes (tape-backed for training, allocation-light for inference).
//!
//! The architecture is a feature extractor of 8 stride-1 valid convolutions
//! and one stride-2 max pool, sized so the final layer's receptive field is
//! exactly 33 input pixels, followed by per-location segmentation heads
//! (1×1 convolutions) and a GAP→linear image classifier.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, Mode, NodeId, Scalar, Tape, Tensor};

pub const REQUIRED_RECEPTIVE_FIELD: usize = 33;

/// Declarative description of the layer stack.
///
/// The stack has nine slots: eight convolutions and one max pool, with the
/// pool at `pool_position` (slot index, 0-based). Convolution strides are 1
/// and the pool stride is 2; there is no padding anywhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Training crop size in pixels (inference accepts any size ≥ 33).
    pub input_size: usize,
    pub conv_kernels: Vec<usize>,
    pub conv_channels: Vec<usize>,
    /// Slot of the max pool within the 9-layer stack, 0-based.
    pub pool_position: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    /// Number of segmentation heads k (may be 0 for classification only).
    pub num_seg_heads: usize,
    pub num_classes: usize,
    /// Accept a final receptive field other than 33 pixels.
    pub allow_rf_mismatch: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_size: 128,
            conv_kernels: vec![3; 8],
            conv_channels: vec![32, 64, 96, 96, 128, 128, 160, 160],
            pool_position: 1,
            pool_kernel: 3,
            pool_stride: 2,
            num_seg_heads: 1,
            num_classes: 2,
            allow_rf_mismatch: false,
        }
    }
}

/// One slot of the layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDesc {
    Conv {
        index: usize,
        kernel: usize,
        in_ch: usize,
        out_ch: usize,
    },
    Pool {
        kernel: usize,
        stride: usize,
    },
}

impl ArchConfig {
    /// Same stack with every channel count halved (reduced profile for
    /// continuous-integration-scale runs).
    pub fn halved_channels(mut self) -> Self {
        for c in &mut self.conv_channels {
            *c = (*c / 2).max(1);
        }
        self
    }

    /// The nine layer slots in execution order, with channel counts chained
    /// from the 3-channel input.
    pub fn stack(&self) -> Vec<LayerDesc> {
        let mut layers = Vec::with_capacity(9);
        let mut in_ch = 3;
        let mut conv_idx = 0;
        for slot in 0..self.conv_kernels.len() + 1 {
            if slot == self.pool_position {
                layers.push(LayerDesc::Pool {
                    kernel: self.pool_kernel,
                    stride: self.pool_stride,
                });
            } else {
                let out_ch = self.conv_channels[conv_idx];
                layers.push(LayerDesc::Conv {
                    index: conv_idx,
                    kernel: self.conv_kernels[conv_idx],
                    in_ch,
                    out_ch,
                });
                in_ch = out_ch;
                conv_idx += 1;
            }
        }
        layers
    }

    /// Output channel count of the feature extractor.
    pub fn feature_channels(&self) -> usize {
        *self.conv_channels.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_kernels.len() != 8 || self.conv_channels.len() != 8 {
            return Err(Error::config(format!(
                "stack must have exactly 8 convolutions, got {} kernels / {} channel counts",
                self.conv_kernels.len(),
                self.conv_channels.len()
            )));
        }
        if self.pool_position > 8 {
            return Err(Error::config(format!(
                "pool_position {} outside the 9-slot stack",
                self.pool_position
            )));
        }
        if self.pool_stride != 2 {
            return Err(Error::config(format!(
                "pool stride is fixed at 2, got {}",
                self.pool_stride
            )));
        }
        if self.pool_kernel == 0 || self.conv_kernels.contains(&0) {
            return Err(Error::config("zero kernel extent"));
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::config("zero channel count"));
        }
        if self.num_classes != 2 {
            return Err(Error::config(format!(
                "binary task: num_classes must be 2, got {}",
                self.num_classes
            )));
        }
        let rf = receptive_field(self);
        if rf.final_rf != REQUIRED_RECEPTIVE_FIELD && !self.allow_rf_mismatch {
            return Err(Error::config(format!(
                "final receptive field is {} pixels, required {} \
                 (set allow_rf_mismatch to override)",
                rf.final_rf, REQUIRED_RECEPTIVE_FIELD
            )));
        }
        if self.input_size < rf.final_rf {
            return Err(Error::config(format!(
                "input_size {} smaller than the receptive field {}",
                self.input_size, rf.final_rf
            )));
        }
        Ok(())
    }
}

/// Receptive-field figures after one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRf {
    pub name: String,
    /// Receptive field extent in input pixels.
    pub rf: usize,
    /// Input pixels between receptive-field centers of adjacent outputs.
    pub jump: usize,
    /// Input coordinate of the receptive-field center of output (0, 0).
    pub center_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveFieldInfo {
    pub layers: Vec<LayerRf>,
    pub final_rf: usize,
    pub final_jump: usize,
    pub final_center_offset: usize,
}

/// Layer-by-layer recurrence `rf' = rf + (k−1)·jump`, `jump' = jump·stride`,
/// `center' = center + ((k−1)/2)·jump`, from rf=1, jump=1, center=0.
pub fn receptive_field(config: &ArchConfig) -> ReceptiveFieldInfo {
    let mut rf = 1usize;
    let mut jump = 1usize;
    let mut center = 0usize;
    let mut layers = Vec::new();
    for desc in config.stack() {
        let (name, k, stride) = match desc {
            LayerDesc::Conv { index, kernel, .. } => (format!("conv{}", index + 1), kernel, 1),
            LayerDesc::Pool { kernel, stride } => ("maxpool".to_string(), kernel, stride),
        };
        rf += (k - 1) * jump;
        center += ((k - 1) / 2) * jump;
        jump *= stride;
        layers.push(LayerRf {
            name,
            rf,
            jump,
            center_offset: center,
        });
    }
    ReceptiveFieldInfo {
        final_rf: rf,
        final_jump: jump,
        final_center_offset: center,
        layers,
    }
}

/// Spatial grid produced by the feature extractor for a given input size.
pub fn output_grid(config: &ArchConfig, input: (usize, usize)) -> Result<(usize, usize)> {
    let rf = receptive_field(config);
    let mut h = input.0;
    let mut w = input.1;
    for desc in config.stack() {
        let (k, stride, name) = match desc {
            LayerDesc::Conv { index, kernel, .. } => (kernel, 1, format!("conv{}", index + 1)),
            LayerDesc::Pool { kernel, stride } => (kernel, stride, "maxpool".to_string()),
        };
        if h < k || w < k {
            return Err(Error::dim(format!(
                "input {}x{} leaves {h}x{w} at {name} (kernel {k}); \
                 minimum input size is {}",
                input.0, input.1, rf.final_rf
            )));
        }
        h = (h - k) / stride + 1;
        w = (w - k) / stride + 1;
    }
    Ok((h, w))
}

// ── Parameters ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ConvBlock<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: BatchNormState<T>,
}

#[derive(Debug, Clone)]
pub struct HeadParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Logits produced by one forward pass. `seg_logits[k]` is `n×2×gh×gw`,
/// `image_logits` is `n×2`; probabilities require an explicit softmax.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Scalar> {
    pub seg_logits: Vec<Tensor<T>>,
    pub image_logits: Tensor<T>,
    pub grid: (usize, usize),
}

/// Tape handles from a train-mode forward pass. `param_nodes` follows the
/// model's canonical learnable order.
#[derive(Debug)]
pub struct TrainForward {
    pub param_nodes: Vec<NodeId>,
    pub seg_logits: Vec<NodeId>,
    pub image_logits: NodeId,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ArchConfig,
    pub rf: ReceptiveFieldInfo,
    pub convs: Vec<ConvBlock<T>>,
    pub seg_heads: Vec<HeadParams<T>>,
    pub image_head: HeadParams<T>,
}

fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data)
        .expect("shape/data length agree")
        .with_requires_grad()
}

impl<T: Scalar> Model<T> {
    /// He-uniform weights, zero biases, unit-gamma batch norm, all drawn
    /// deterministically from `seed`.
    pub fn build(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        for desc in config.stack() {
            if let LayerDesc::Conv {
                kernel,
                in_ch,
                out_ch,
                ..
            } = desc
            {
                let weight = he_uniform(
                    &mut rng,
                    vec![out_ch, in_ch, kernel, kernel],
                    in_ch * kernel * kernel,
                );
                let bias = Tensor::zeros(vec![out_ch]).with_requires_grad();
                convs.push(ConvBlock {
                    weight,
                    bias,
                    bn: BatchNormState::new(out_ch),
                });
            }
        }
        let feat = config.feature_channels();
        let seg_heads = (0..config.num_seg_heads)
            .map(|_| HeadParams {
                weight: he_uniform(&mut rng, vec![config.num_classes, feat, 1, 1], feat),
                bias: Tensor::zeros(vec![config.num_classes]).with_requires_grad(),
            })
            .collect();
        let image_head = HeadParams {
            weight: he_uniform(&mut rng, vec![config.num_classes, feat], feat),
            bias: Tensor::zeros(vec![config.num_classes]).with_requires_grad(),
        };
        Ok(Model {
            rf: receptive_field(config),
            config: config.clone(),
            convs,
            seg_heads,
            image_head,
        })
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.learnables().iter().map(|t| t.numel()).sum()
    }

    /// Learnable tensors in canonical order: per conv block weight, bias,
    /// bn gamma, bn beta; then each segmentation head; then the image head.
    pub fn learnables(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for block in &self.convs {
            out.push(&block.weight);
            out.push(&block.bias);
            out.push(&block.bn.gamma);
            out.push(&block.bn.beta);
        }
        for head in &self.seg_heads {
            out.push(&head.weight);
            out.push(&head.bias);
        }
        out.push(&self.image_head.weight);
        out.push(&self.image_head.bias);
        out
    }

    pub fn for_each_learnable_mut(&mut self, mut f: impl FnMut(&mut Tensor<T>)) {
        for block in &mut self.convs {
            f(&mut block.weight);
            f(&mut block.bias);
            f(&mut block.bn.gamma);
            f(&mut block.bn.beta);
        }
        for head in &mut self.seg_heads {
            f(&mut head.weight);
            f(&mut head.bias);
        }
        f(&mut self.image_head.weight);
        f(&mut self.image_head.bias);
    }

    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.learnables() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim(format!(
                "flat parameter vector has {} values, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        self.for_each_learnable_mut(|t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        Ok(())
    }

    /// Gradient accumulators flattened in canonical order; parameters that
    /// never received a gradient contribute zeros.
    pub fn flat_grads(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.learnables() {
            match t.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(T::zero(), t.numel())),
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        self.for_each_learnable_mut(|t| t.zero_grad());
    }

    /// Add the tape's leaf gradients into the parameter tensors.
    /// `param_nodes` must come from [`Model::forward_train`] on that tape.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, param_nodes: &[NodeId]) -> Result<()> {
        if param_nodes.len() != self.learnables().len() {
            return Err(Error::Contract(format!(
                "{} param nodes for {} learnable tensors",
                param_nodes.len(),
                self.learnables().len()
            )));
        }
        let mut idx = 0;
        let mut result = Ok(());
        let grads: Vec<Option<Vec<T>>> = param_nodes
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()))
            .collect();
        self.for_each_learnable_mut(|t| {
            if result.is_ok() {
                if let Some(g) = &grads[idx] {
                    result = t.accumulate_grad(g);
                }
            }
            idx += 1;
        });
        result
    }

    /// Train-mode forward on a tape. Registers every learnable as a leaf,
    /// runs the stack with batch-statistics batch norm (updating running
    /// stats), and returns logits plus the leaf handles.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
    ) -> Result<TrainForward> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::dim(format!("expected 3-channel input, got {c}")));
        }
        if h != self.config.input_size || w != self.config.input_size {
            return Err(Error::dim(format!(
                "train mode requires {0}x{0} input (config.input_size), got {h}x{w}",
                self.config.input_size
            )));
        }
        let grid = output_grid(&self.config, (h, w))?;

        let mut param_nodes = Vec::new();
        let mut conv_nodes = Vec::new(); // (weight, bias, gamma, beta)
        for block in &self.convs {
            let wi = tape.leaf(&block.weight)?;
            let bi = tape.leaf(&block.bias)?;
            let gi = tape.leaf(&block.bn.gamma)?;
            let be = tape.leaf(&block.bn.beta)?;
            param_nodes.extend_from_slice(&[wi, bi, gi, be]);
            conv_nodes.push((wi, bi, gi, be));
        }
        let mut seg_nodes = Vec::new();
        for head in &self.seg_heads {
            let wi = tape.leaf(&head.weight)?;
            let bi = tape.leaf(&head.bias)?;
            param_nodes.extend_from_slice(&[wi, bi]);
            seg_nodes.push((wi, bi));
        }
        let head_w = tape.leaf(&self.image_head.weight)?;
        let head_b = tape.leaf(&self.image_head.bias)?;
        param_nodes.extend_from_slice(&[head_w, head_b]);

        let mut x = tape.constant(images.shape().to_vec(), images.data().to_vec())?;
        let mut conv_idx = 0;
        for desc in self.config.stack() {
            match desc {
                LayerDesc::Conv { .. } => {
                    let (wi, bi, gi, be) = conv_nodes[conv_idx];
                    x = tape.conv2d_valid(x, wi, bi)?;
                    x = tape.relu(x)?;
                    x = tape.batchnorm2d(x, gi, be, &mut self.convs[conv_idx].bn, Mode::Train)?;
                    conv_idx += 1;
                }
                LayerDesc::Pool { kernel, stride } => {
                    x = tape.maxpool2d(x, kernel, stride)?;
                }
            }
        }

        let mut seg_logits = Vec::new();
        for &(wi, bi) in &seg_nodes {
            seg_logits.push(tape.conv2d_valid(x, wi, bi)?);
        }
        let pooled = tape.global_avg_pool(x)?;
        let image_logits = tape.affine(pooled, head_w, head_b)?;

        Ok(TrainForward {
            param_nodes,
            seg_logits,
            image_logits,
            grid,
        })
    }

    /// Inference forward: running-statistics batch norm, no tape, any input
    /// size with h, w ≥ 33. Deterministic.
    pub fn forward_eval(&self, images: &Tensor<T>) -> Result<ForwardOutput<T>> {
        use crate::tensor::kernels as k;
        let (n, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::dim(format!("expected 3-channel input, got {c}")));
        }
        let grid = output_grid(&self.config, (h, w))?;

        let mut x = images.data().to_vec();
        let mut ch = c;
        let (mut sh, mut sw) = (h, w);
        let mut conv_idx = 0;
        for desc in self.config.stack() {
            match desc {
                LayerDesc::Conv { kernel, out_ch, .. } => {
                    let block = &self.convs[conv_idx];
                    x = k::conv2d_forward(
                        &x,
                        n,
                        ch,
                        sh,
                        sw,
                        block.weight.data(),
                        out_ch,
                        kernel,
                        block.bias.data(),
                    );
                    sh = sh - kernel + 1;
                    sw = sw - kernel + 1;
                    ch = out_ch;
                    x = k::relu_forward(&x);
                    let (y, _) = k::batchnorm_forward(
                        &x,
                        n,
                        ch,
                        sh * sw,
                        block.bn.gamma.data(),
                        block.bn.beta.data(),
                        &block.bn.running_mean,
                        &block.bn.running_var,
                        block.bn.epsilon,
                        Mode::Eval,
                    );
                    x = y;
                    conv_idx += 1;
                }
                LayerDesc::Pool { kernel, stride } => {
                    let (y, _) = k::maxpool_forward(&x, n, ch, sh, sw, kernel, stride);
                    x = y;
                    sh = (sh - kernel) / stride + 1;
                    sw = (sw - kernel) / stride + 1;
                }
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "forward_eval" });
        }

        let classes = self.config.num_classes;
        let mut seg_logits = Vec::new();
        for head in &self.seg_heads {
            let logits = k::conv2d_forward(
                &x,
                n,
                ch,
                sh,
                sw,
                head.weight.data(),
                classes,
                1,
                head.bias.data(),
            );
            seg_logits.push(Tensor::from_vec(vec![n, classes, sh, sw], logits)?);
        }
        let pooled = k::global_avg_pool_forward(&x, n, ch, sh * sw);
        let image_logits = k::affine_forward(
            &pooled,
            n,
            ch,
            self.image_head.weight.data(),
            classes,
            self.image_head.bias.data(),
        );

        Ok(ForwardOutput {
            seg_logits,
            image_logits: Tensor::from_vec(vec![n, classes], image_logits)?,
            grid,
        })
    }

    /// Mode-dispatching forward. Train mode records on a throwaway tape
    /// (running statistics still update); eval mode is pure.
    pub fn forward(&mut self, images: &Tensor<T>, mode: Mode) -> Result<ForwardOutput<T>> {
        match mode {
            Mode::Eval => self.forward_eval(images),
            Mode::Train => {
                let mut tape = Tape::new();
                let fwd = self.forward_train(&mut tape, images)?;
                let seg_logits = fwd
                    .seg_logits
                    .iter()
                    .map(|&id| Tensor::from_vec(tape.shape(id).to_vec(), tape.value(id).to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                let image_logits = Tensor::from_vec(
                    tape.shape(fwd.image_logits).to_vec(),
                    tape.value(fwd.image_logits).to_vec(),
                )?;
                Ok(ForwardOutput {
                    seg_logits,
                    image_logits,
                    grid: fwd.grid,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;

    #[test]
    fn default_receptive_field_is_33() {
        let rf = receptive_field(&ArchConfig::default());
        assert_eq!(rf.final_rf, 33);
        assert_eq!(rf.final_jump, 2);
        assert_eq!(rf.final_center_offset, 16);
        // first layer: a lone 3x3 conv
        assert_eq!(rf.layers[0].rf, 3);
        assert_eq!(rf.layers[0].jump, 1);
        assert_eq!(rf.layers[0].center_offset, 1);
    }

    #[test]
    fn rf_roughly_sixteenth_of_input_area() {
        let ratio = (33.0f64 * 33.0) / (128.0 * 128.0);
        assert!((ratio - 1.0 / 16.0).abs() < 0.005, "ratio {ratio}");
    }

    #[test]
    fn late_pool_config_rejected_with_computed_rf() {
        let cfg = ArchConfig {
            pool_position: 5,
            ..ArchConfig::default()
        };
        let rf = receptive_field(&cfg);
        assert_ne!(rf.final_rf, 33);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(
            err.contains(&rf.final_rf.to_string()),
            "message reports computed rf: {err}"
        );
        // and the override flag admits it
        let cfg = ArchConfig {
            allow_rf_mismatch: true,
            ..cfg
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn output_grid_sizes() {
        let cfg = ArchConfig::default();
        assert_eq!(output_grid(&cfg, (128, 128)).unwrap(), (48, 48));
        assert_eq!(output_grid(&cfg, (64, 64)).unwrap(), (16, 16));
        assert_eq!(output_grid(&cfg, (33, 33)).unwrap(), (1, 1));
        let err = output_grid(&cfg, (32, 32)).unwrap_err().to_string();
        assert!(err.contains("33"), "error names the minimum: {err}");
    }

    #[test]
    fn build_is_seed_deterministic() {
        let cfg = ArchConfig::default().halved_channels();
        let a: Model<f32> = Model::build(&cfg, 9).unwrap();
        let b: Model<f32> = Model::build(&cfg, 9).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        let c: Model<f32> = Model::build(&cfg, 10).unwrap();
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn forward_shapes_default_config() {
        let cfg = ArchConfig::default();
        let model: Model<f32> = Model::build(&cfg, 1).unwrap();
        let images = Tensor::zeros(vec![1, 3, 128, 128]);
        let out = model.forward_eval(&images).unwrap();
        assert_eq!(out.grid, (48, 48));
        assert_eq!(out.seg_logits[0].shape(), &[1, 2, 48, 48]);
        assert_eq!(out.image_logits.shape(), &[1, 2]);

        let small = Tensor::zeros(vec![1, 3, 64, 64]);
        let out = model.forward_eval(&small).unwrap();
        assert_eq!(out.grid, (16, 16));
    }

    #[test]
    fn eval_forward_is_pure_and_deterministic() {
        let cfg = ArchConfig {
            input_size: 48,
            ..ArchConfig::default()
        }
        .halved_channels();
        let model: Model<f32> = Model::build(&cfg, 3).unwrap();
        let data: Vec<f32> = (0..3 * 48 * 48)
            .map(|i| ((i * 31 % 101) as f32 - 50.0) / 120.0)
            .collect();
        let images = Tensor::from_vec(vec![1, 3, 48, 48], data).unwrap();
        let a = model.forward_eval(&images).unwrap();
        let b = model.forward_eval(&images).unwrap();
        assert_eq!(a.image_logits.data(), b.image_logits.data());
        assert_eq!(a.seg_logits[0].data(), b.seg_logits[0].data());
    }

    #[test]
    fn train_forward_requires_configured_input_size() {
        let cfg = ArchConfig {
            input_size: 128,
            ..ArchConfig::default()
        }
        .halved_channels();
        let mut model: Model<f32> = Model::build(&cfg, 3).unwrap();
        let images = Tensor::zeros(vec![1, 3, 64, 64]);
        assert!(model.forward(&images, Mode::Train).is_err());
    }

    #[test]
    fn param_count_matches_closed_form() {
        // Independent hand sum: conv weights k²·in·out + out biases,
        // 2·out batch-norm scales, per head 2·feat + 2, image head 2·feat + 2.
        let cfg = ArchConfig::default();
        let mut expected = 0usize;
        let mut in_ch = 3;
        for (&k, &out_ch) in cfg.conv_kernels.iter().zip(&cfg.conv_channels) {
            expected += k * k * in_ch * out_ch + out_ch + 2 * out_ch;
            in_ch = out_ch;
        }
        expected += cfg.num_seg_heads * (2 * in_ch + 2);
        expected += 2 * in_ch + 2;

        let model: Model<f32> = Model::build(&cfg, 0).unwrap();
        assert_eq!(model.param_count(), expected);
        assert_eq!(model.flat_params().len(), expected);
    }

    #[test]
    fn param_count_scales_quadratically_in_channels() {
        let base: Model<f32> = Model::build(&ArchConfig::default(), 0).unwrap();
        let doubled_cfg = ArchConfig {
            conv_channels: ArchConfig::default()
                .conv_channels
                .iter()
                .map(|c| c * 2)
                .collect(),
            ..ArchConfig::default()
        };
        let doubled: Model<f32> = Model::build(&doubled_cfg, 0).unwrap();
        let ratio = doubled.param_count() as f64 / base.param_count() as f64;
        assert!(ratio > 3.4 && ratio < 4.1, "ratio {ratio}");
    }

    #[test]
    fn undersized_input_is_rejected() {
        let model: Model<f32> = Model::build(&ArchConfig::default(), 0).unwrap();
        let images = Tensor::zeros(vec![1, 3, 32, 32]);
        assert!(model.forward_eval(&images).is_err());
    }
}
