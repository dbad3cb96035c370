//! The two-stream classifier: an RGB branch and a motion branch with
//! identical topology (four conv/ReLU/pool blocks and a fully connected
//! feature layer), concatenated and mapped to class logits.
//!
//! Pooling is adaptive per axis: an axis is halved while its extent is at
//! least 2 and passed through unchanged once it has collapsed to 1, so
//! heavily reduced test configurations stay well defined while the default
//! resolution follows the strict halving chain.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops::{
    conv3d_backward, conv3d_forward, linear_backward, linear_forward, maxpool3d_backward,
    maxpool3d_with_kernel, relu_backward, relu_forward, softmax, PoolCache,
};
use crate::optim::OptimState;
use crate::tensor::{ShapeError, Tensor};
use crate::video_io::CheckpointData;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("checkpoint does not match the configured architecture: {0}")]
    CheckpointMismatch(String),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels_rgb: usize,
    pub in_channels_flow: usize,
    pub conv_channels: [usize; 4],
    pub feature_dim: usize,
    pub num_classes: usize,
    pub input_t: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels_rgb: 3,
            in_channels_flow: 2,
            conv_channels: [8, 16, 32, 64],
            feature_dim: 500,
            num_classes: 2,
            input_t: 75,
            input_h: 128,
            input_w: 320,
            init_seed: 0,
        }
    }
}

/// Tensor extents at every stage of one branch, fixed by the config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    /// `[t, h, w]` entering block 0 and leaving each of the four blocks.
    pub stage_dims: [[usize; 3]; 5],
    /// Per-block pooling kernel (2 on axes still reducible, else 1).
    pub pool_kernels: [[usize; 3]; 4],
    /// Flattened length after the last block.
    pub flat_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels_rgb == 0 || self.in_channels_flow == 0 {
            return Err(ModelError::InvalidConfig(
                "input channel counts must be positive".into(),
            ));
        }
        if self.conv_channels.iter().any(|&c| c == 0) {
            return Err(ModelError::InvalidConfig(
                "conv_channels must all be positive".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(ModelError::InvalidConfig("feature_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig(
                "num_classes must be at least 2".into(),
            ));
        }
        if self.input_t == 0 || self.input_h == 0 || self.input_w == 0 {
            return Err(ModelError::InvalidConfig(
                "input extents must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The spatial/temporal extent chain the four blocks realize.
    pub fn shape_plan(&self) -> ShapePlan {
        let mut stage_dims = [[0usize; 3]; 5];
        let mut pool_kernels = [[1usize; 3]; 4];
        stage_dims[0] = [self.input_t, self.input_h, self.input_w];
        for block in 0..4 {
            let mut next = stage_dims[block];
            for axis in 0..3 {
                let k = if next[axis] >= 2 { 2 } else { 1 };
                pool_kernels[block][axis] = k;
                next[axis] /= k;
            }
            stage_dims[block + 1] = next;
        }
        let last = stage_dims[4];
        ShapePlan {
            stage_dims,
            pool_kernels,
            flat_len: self.conv_channels[3] * last[0] * last[1] * last[2],
        }
    }

    fn conv_in_channels(&self, stream_in: usize, block: usize) -> usize {
        if block == 0 {
            stream_in
        } else {
            self.conv_channels[block - 1]
        }
    }
}

/// Weights of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub conv_w: Vec<Tensor>,
    pub conv_b: Vec<Tensor>,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

/// All trainable tensors plus the config they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub rgb: BranchParams,
    pub flow: BranchParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub rgb: BranchParams,
    pub flow: BranchParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn branch_names(prefix: &str) -> Vec<String> {
    let mut names = Vec::new();
    for block in 0..4 {
        names.push(format!("{prefix}.conv{block}.weight"));
        names.push(format!("{prefix}.conv{block}.bias"));
    }
    names.push(format!("{prefix}.fc.weight"));
    names.push(format!("{prefix}.fc.bias"));
    names
}

/// Canonical parameter names in iteration order: RGB branch, then motion
/// branch, then head. Optimizer state and checkpoints follow this order.
pub fn parameter_names() -> Vec<String> {
    let mut names = branch_names("rgb");
    names.extend(branch_names("flow"));
    names.push("head.weight".into());
    names.push("head.bias".into());
    names
}

fn branch_tensors(b: &BranchParams) -> Vec<&Tensor> {
    let mut out = Vec::with_capacity(10);
    for i in 0..4 {
        out.push(&b.conv_w[i]);
        out.push(&b.conv_b[i]);
    }
    out.push(&b.fc_w);
    out.push(&b.fc_b);
    out
}

fn branch_tensors_mut(b: &mut BranchParams) -> Vec<&mut Tensor> {
    let mut out: Vec<&mut Tensor> = Vec::with_capacity(10);
    let (ws, bs) = (b.conv_w.iter_mut(), b.conv_b.iter_mut());
    for (w, bias) in ws.zip(bs) {
        out.push(w);
        out.push(bias);
    }
    out.push(&mut b.fc_w);
    out.push(&mut b.fc_b);
    out
}

impl ModelParams {
    /// Tensors in canonical order (see [`parameter_names`]).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = branch_tensors(&self.rgb);
        out.extend(branch_tensors(&self.flow));
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = branch_tensors_mut(&mut self.rgb);
        out.extend(branch_tensors_mut(&mut self.flow));
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        parameter_names().into_iter().zip(self.tensors()).collect()
    }
}

impl ModelGrads {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = branch_tensors(&self.rgb);
        out.extend(branch_tensors(&self.flow));
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = branch_tensors_mut(&mut self.rgb);
        out.extend(branch_tensors_mut(&mut self.flow));
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Elementwise `self += other`, in canonical tensor order.
    pub fn accumulate(&mut self, other: &ModelGrads) {
        for (mine, theirs) in self.tensors_mut().into_iter().zip(other.tensors()) {
            debug_assert_eq!(mine.shape(), theirs.shape());
            for (a, b) in mine.data_mut().iter_mut().zip(theirs.data()) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}

fn zero_branch(cfg: &ModelConfig, stream_in: usize, flat_len: usize) -> BranchParams {
    let mut conv_w = Vec::with_capacity(4);
    let mut conv_b = Vec::with_capacity(4);
    for block in 0..4 {
        let c_in = cfg.conv_in_channels(stream_in, block);
        conv_w.push(Tensor::zeros(&[cfg.conv_channels[block], c_in, 3, 3, 3]));
        conv_b.push(Tensor::zeros(&[cfg.conv_channels[block]]));
    }
    BranchParams {
        conv_w,
        conv_b,
        fc_w: Tensor::zeros(&[cfg.feature_dim, flat_len]),
        fc_b: Tensor::zeros(&[cfg.feature_dim]),
    }
}

/// All-zero parameters: logits are identically zero regardless of input.
pub fn zero_params(cfg: &ModelConfig) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    let plan = cfg.shape_plan();
    Ok(ModelParams {
        rgb: zero_branch(cfg, cfg.in_channels_rgb, plan.flat_len),
        flow: zero_branch(cfg, cfg.in_channels_flow, plan.flat_len),
        head_w: Tensor::zeros(&[cfg.num_classes, 2 * cfg.feature_dim]),
        head_b: Tensor::zeros(&[cfg.num_classes]),
        cfg: cfg.clone(),
    })
}

fn init_weights(t: &mut Tensor, fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = (1.0 / fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = (rng.gen::<f64>() * 2.0 - 1.0) * bound;
    }
}

/// Seeded initialization: weights uniform in `(-sqrt(1/fan_in),
/// sqrt(1/fan_in))`, biases zero. The draw order is fixed (RGB branch
/// weights, motion branch weights, head), so a seed pins every value.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams, ModelError> {
    let mut params = zero_params(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    for (branch, stream_in) in [
        (&mut params.rgb, cfg.in_channels_rgb),
        (&mut params.flow, cfg.in_channels_flow),
    ] {
        for block in 0..4 {
            let fan_in = cfg.conv_in_channels(stream_in, block) * 27;
            init_weights(&mut branch.conv_w[block], fan_in, &mut rng);
        }
        let flat = branch.fc_w.shape()[1];
        init_weights(&mut branch.fc_w, flat, &mut rng);
    }
    init_weights(&mut params.head_w, 2 * cfg.feature_dim, &mut rng);
    Ok(params)
}

struct BlockCache {
    conv_in: Tensor,
    conv_out: Tensor,
    pool_cache: PoolCache,
}

struct BranchCache {
    blocks: Vec<BlockCache>,
    flat_in: Tensor,
    fc_out: Tensor,
}

/// Retained activations from one forward pass, consumed by [`backward`].
pub struct ForwardCache {
    rgb: BranchCache,
    flow: BranchCache,
    concat: Tensor,
    num_classes: usize,
}

fn check_input(
    name: &'static str,
    input: &Tensor,
    channels: usize,
    cfg: &ModelConfig,
) -> Result<(), ModelError> {
    let want = [channels, cfg.input_t, cfg.input_h, cfg.input_w];
    if input.shape() != want {
        return Err(ModelError::Shape(ShapeError::mismatch(
            "model_forward",
            format!("{name} input {:?}, expected {want:?}", input.shape()),
        )));
    }
    Ok(())
}

enum BranchPass {
    Cached(BranchCache, Tensor),
    Light(Tensor),
}

fn branch_forward(
    branch: &BranchParams,
    input: &Tensor,
    plan: &ShapePlan,
    keep_cache: bool,
) -> Result<BranchPass, ModelError> {
    let mut blocks = Vec::with_capacity(4);
    let mut x = input.clone();
    for block in 0..4 {
        let conv_out = conv3d_forward(&x, &branch.conv_w[block], &branch.conv_b[block])?;
        let pool_in = relu_forward(&conv_out);
        let (pooled, pool_cache) = maxpool3d_with_kernel(&pool_in, plan.pool_kernels[block])?;
        if keep_cache {
            blocks.push(BlockCache {
                conv_in: x,
                conv_out,
                pool_cache,
            });
        }
        x = pooled;
    }
    let flat_in = x.into_shape(vec![plan.flat_len])?;
    let fc_out = linear_forward(&flat_in, &branch.fc_w, &branch.fc_b)?;
    let feat = relu_forward(&fc_out);
    if keep_cache {
        Ok(BranchPass::Cached(
            BranchCache {
                blocks,
                flat_in,
                fc_out,
            },
            feat,
        ))
    } else {
        Ok(BranchPass::Light(feat))
    }
}

fn head_forward(params: &ModelParams, rgb_feat: &Tensor, flow_feat: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
    let f = params.cfg.feature_dim;
    let mut concat = Tensor::zeros(&[2 * f]);
    concat.data_mut()[..f].copy_from_slice(rgb_feat.data());
    concat.data_mut()[f..].copy_from_slice(flow_feat.data());
    let logits = linear_forward(&concat, &params.head_w, &params.head_b)?;
    Ok((concat, logits))
}

/// Full forward pass retaining everything [`backward`] needs.
pub fn forward(
    params: &ModelParams,
    rgb: &Tensor,
    flow: &Tensor,
) -> Result<(Tensor, ForwardCache), ModelError> {
    let cfg = &params.cfg;
    check_input("rgb", rgb, cfg.in_channels_rgb, cfg)?;
    check_input("flow", flow, cfg.in_channels_flow, cfg)?;
    let plan = cfg.shape_plan();
    let BranchPass::Cached(rgb_cache, rgb_feat) = branch_forward(&params.rgb, rgb, &plan, true)?
    else {
        unreachable!("cached pass requested");
    };
    let BranchPass::Cached(flow_cache, flow_feat) = branch_forward(&params.flow, flow, &plan, true)?
    else {
        unreachable!("cached pass requested");
    };
    let (concat, logits) = head_forward(params, &rgb_feat, &flow_feat)?;
    Ok((
        logits,
        ForwardCache {
            rgb: rgb_cache,
            flow: flow_cache,
            concat,
            num_classes: cfg.num_classes,
        },
    ))
}

/// Forward pass that discards intermediate activations; inference uses
/// this to keep memory at one block of working set.
pub fn forward_logits(params: &ModelParams, rgb: &Tensor, flow: &Tensor) -> Result<Tensor, ModelError> {
    let cfg = &params.cfg;
    check_input("rgb", rgb, cfg.in_channels_rgb, cfg)?;
    check_input("flow", flow, cfg.in_channels_flow, cfg)?;
    let plan = cfg.shape_plan();
    let BranchPass::Light(rgb_feat) = branch_forward(&params.rgb, rgb, &plan, false)? else {
        unreachable!("light pass requested");
    };
    let BranchPass::Light(flow_feat) = branch_forward(&params.flow, flow, &plan, false)? else {
        unreachable!("light pass requested");
    };
    let (_, logits) = head_forward(params, &rgb_feat, &flow_feat)?;
    Ok(logits)
}

/// Class probabilities `(p_class0, p_class1)` for the two-class head.
pub fn predict_proba(params: &ModelParams, rgb: &Tensor, flow: &Tensor) -> Result<(f64, f64), ModelError> {
    if params.cfg.num_classes != 2 {
        return Err(ModelError::InvalidConfig(format!(
            "predict_proba needs a 2-class head, config has {}",
            params.cfg.num_classes
        )));
    }
    let logits = forward_logits(params, rgb, flow)?;
    let p = softmax(&logits)?;
    Ok((p[0], p[1]))
}

fn branch_backward(
    branch: &BranchParams,
    cache: &BranchCache,
    grad_feat: &Tensor,
) -> Result<(BranchParams, Tensor), ModelError> {
    let grad_fc_out = relu_backward(&cache.fc_out, grad_feat)?;
    let (grad_flat, grad_fc_w, grad_fc_b) =
        linear_backward(&cache.flat_in, &branch.fc_w, &grad_fc_out)?;

    let last = cache.blocks.last().expect("four blocks");
    let mut grad = grad_flat.into_shape(last.pool_cache.out_shape().to_vec())?;

    let mut grad_conv_w = vec![Tensor::zeros(&[1]); 4];
    let mut grad_conv_b = vec![Tensor::zeros(&[1]); 4];
    for block in (0..4).rev() {
        let bc = &cache.blocks[block];
        let grad_pool_in = maxpool3d_backward(&bc.pool_cache, &grad)?;
        let grad_conv_out = relu_backward(&bc.conv_out, &grad_pool_in)?;
        let (grad_in, gw, gb) = conv3d_backward(&bc.conv_in, &branch.conv_w[block], &grad_conv_out)?;
        grad_conv_w[block] = gw;
        grad_conv_b[block] = gb;
        grad = grad_in;
    }
    Ok((
        BranchParams {
            conv_w: grad_conv_w,
            conv_b: grad_conv_b,
            fc_w: grad_fc_w,
            fc_b: grad_fc_b,
        },
        grad,
    ))
}

/// Exact parameter gradients for the forward pass that produced `cache`,
/// seeded with the loss gradient at the logits.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    grad_logits: &Tensor,
) -> Result<ModelGrads, ModelError> {
    if grad_logits.shape() != [cache.num_classes] {
        return Err(ModelError::Shape(ShapeError::mismatch(
            "model_backward",
            format!(
                "grad_logits {:?}, expected [{}]",
                grad_logits.shape(),
                cache.num_classes
            ),
        )));
    }
    let (grad_concat, grad_head_w, grad_head_b) =
        linear_backward(&cache.concat, &params.head_w, grad_logits)?;

    let f = params.cfg.feature_dim;
    let grad_rgb_feat = Tensor::from_vec(vec![f], grad_concat.data()[..f].to_vec())?;
    let grad_flow_feat = Tensor::from_vec(vec![f], grad_concat.data()[f..].to_vec())?;

    let (rgb_grads, _) = branch_backward(&params.rgb, &cache.rgb, &grad_rgb_feat)?;
    let (flow_grads, _) = branch_backward(&params.flow, &cache.flow, &grad_flow_feat)?;
    Ok(ModelGrads {
        rgb: rgb_grads,
        flow: flow_grads,
        head_w: grad_head_w,
        head_b: grad_head_b,
    })
}

/// Rebuilds parameters (and optimizer state when present) from checkpoint
/// contents, verifying the tensor inventory against the config.
pub fn params_from_checkpoint(
    cfg: &ModelConfig,
    data: &CheckpointData,
) -> Result<(ModelParams, Option<OptimState>), ModelError> {
    let mut params = zero_params(cfg)?;
    assign_named(
        "parameter",
        params.tensors_mut(),
        &data.params,
    )?;
    let optim = match &data.optim {
        None => None,
        Some(block) => {
            let mut state = OptimState::new(&params.tensors());
            let mut holders: Vec<&mut Tensor> = state.velocities.iter_mut().collect();
            assign_named("velocity", std::mem::take(&mut holders), &block.velocities)?;
            state.step_count = block.step_count;
            Some(state)
        }
    };
    Ok((params, optim))
}

fn assign_named(
    kind: &str,
    targets: Vec<&mut Tensor>,
    stored: &[(String, Tensor)],
) -> Result<(), ModelError> {
    let names = parameter_names();
    if stored.len() != names.len() {
        return Err(ModelError::CheckpointMismatch(format!(
            "{} {kind} tensors stored, model has {}",
            stored.len(),
            names.len()
        )));
    }
    for ((name, target), (stored_name, value)) in names.iter().zip(targets).zip(stored) {
        if stored_name != name {
            return Err(ModelError::CheckpointMismatch(format!(
                "{kind} record {stored_name} where {name} was expected"
            )));
        }
        if value.shape() != target.shape() {
            return Err(ModelError::CheckpointMismatch(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                value.shape(),
                target.shape()
            )));
        }
        *target = value.clone();
    }
    Ok(())
}
