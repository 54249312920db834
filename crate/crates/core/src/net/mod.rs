//! Stage one: convolutional change-detection classifier trained from
//! scratch on stacked pre/post patch pairs.
//!
//! The input is a 64x64x6 tensor (pre RGB stacked on post RGB, scaled to
//! [0,1]). Each convolutional block applies a same-padded stride-1
//! convolution, ReLU, max-pooling with window = stride = `pool_stride`,
//! and inverted dropout. The flattened feature map feeds two fully
//! connected layers with batch normalization between them, then a single
//! logit with a sigmoid gives the destruction probability. Training is
//! plain mini-batch SGD on binary cross-entropy.

mod forward;
mod train;

pub use forward::{assemble_input, backward, bce_loss, forward, ForwardCache, ForwardMode, NetworkGrads};
pub use train::{
    dense_scan, hyperparameter_search, train, EpochStats, LabeledPatch, SearchOutcome, TrainHistory,
};

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the network input in pixels.
pub const INPUT_SIDE: usize = crate::raster::PATCH_SIZE;
/// Channels per conv block, in block order. Block `k` maps
/// `CONV_CHANNELS[k-1]` (or the input channels for the first block) to
/// `CONV_CHANNELS[k]` channels.
pub const CONV_CHANNELS: [usize; 4] = [4, 8, 16, 32];
/// Numeric floor inside the batch-norm denominator.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch statistics in the running-statistic update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Dense numeric array with an explicit shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("tensor contains non-finite value {bad}")));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![value; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Non-linearity applied after each fully connected layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    ReLU,
    Sigmoid,
}

/// Architecture hyperparameters explored by the search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub num_conv_blocks: usize,
    pub kernel_size: usize,
    pub pool_stride: usize,
    pub dropout_prob: f64,
    pub fc_units: usize,
    pub fc_activation: Activation,
    pub input_channels: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_conv_blocks > CONV_CHANNELS.len() {
            return Err(Error::Config(format!(
                "at most {} conv blocks supported, got {}",
                CONV_CHANNELS.len(),
                self.num_conv_blocks
            )));
        }
        if self.num_conv_blocks > 0 {
            if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
                return Err(Error::Config(format!(
                    "kernel size must be odd for same-padding, got {}",
                    self.kernel_size
                )));
            }
            if self.pool_stride == 0 {
                return Err(Error::Config("pool stride must be at least 1".into()));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!("dropout probability must be in [0,1), got {}", self.dropout_prob)));
        }
        if self.fc_units == 0 {
            return Err(Error::Config("fully connected layers need at least one unit".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input needs at least one channel".into()));
        }
        if *self.feature_map_sides().last().unwrap() == 0 {
            return Err(Error::Config(format!(
                "{} blocks of pooling stride {} exhaust the {INPUT_SIDE}-pixel input",
                self.num_conv_blocks, self.pool_stride
            )));
        }
        Ok(())
    }

    /// Feature-map side length after each block: entry 0 is the input side,
    /// entry k the side after block k (`floor(previous / pool_stride)`).
    pub fn feature_map_sides(&self) -> Vec<usize> {
        let mut sides = vec![INPUT_SIDE];
        for _ in 0..self.num_conv_blocks {
            sides.push(sides.last().unwrap() / self.pool_stride);
        }
        sides
    }

    /// Channel count entering block `k` (0-based).
    pub fn block_in_channels(&self, k: usize) -> usize {
        if k == 0 {
            self.input_channels
        } else {
            CONV_CHANNELS[k - 1]
        }
    }

    /// Flattened dimension feeding the first fully connected layer.
    pub fn flat_dim(&self) -> usize {
        let side = *self.feature_map_sides().last().unwrap();
        let channels = if self.num_conv_blocks == 0 {
            self.input_channels
        } else {
            CONV_CHANNELS[self.num_conv_blocks - 1]
        };
        channels * side * side
    }

    /// Total number of trainable parameters.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        for k in 0..self.num_conv_blocks {
            let (ic, oc) = (self.block_in_channels(k), CONV_CHANNELS[k]);
            count += oc * ic * self.kernel_size * self.kernel_size + oc;
        }
        let (d, f) = (self.flat_dim(), self.fc_units);
        count += f * d + f; // fc1
        count += 2 * f; // batch-norm scale and shift
        count += f * f + f; // fc2
        count += f + 1; // output
        count
    }
}

/// Training-loop hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_init_scale: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.weight_init_scale > 0.0) {
            return Err(Error::Config(format!(
                "weight init scale must be positive, got {}",
                self.weight_init_scale
            )));
        }
        Ok(())
    }
}

/// Convolution weights `[out_c, in_c, k, k]` and per-channel bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBlockParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All learnable parameters plus the batch-norm running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub conv_blocks: Vec<ConvBlockParams>,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub bn_scale: Tensor,
    pub bn_shift: Tensor,
    pub bn_running_mean: Tensor,
    pub bn_running_var: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: f64,
}

impl NetworkParams {
    /// Weights drawn uniformly from `[-s, s]` with
    /// `s = weight_init_scale / sqrt(fan_in)`; biases start at zero,
    /// batch-norm at scale 1 / shift 0 with unit running variance.
    pub fn init(spec: &NetworkSpec, seed: u64, weight_init_scale: f64) -> Result<NetworkParams> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let s = weight_init_scale / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-s..=s)).collect()
        };

        let k = spec.kernel_size;
        let mut conv_blocks = Vec::with_capacity(spec.num_conv_blocks);
        for b in 0..spec.num_conv_blocks {
            let (ic, oc) = (spec.block_in_channels(b), CONV_CHANNELS[b]);
            let fan_in = ic * k * k;
            conv_blocks.push(ConvBlockParams {
                weight: Tensor::new(vec![oc, ic, k, k], uniform(oc * ic * k * k, fan_in))?,
                bias: Tensor::zeros(vec![oc]),
            });
        }
        let (d, f) = (spec.flat_dim(), spec.fc_units);
        Ok(NetworkParams {
            conv_blocks,
            fc1_weight: Tensor::new(vec![f, d], uniform(f * d, d))?,
            fc1_bias: Tensor::zeros(vec![f]),
            bn_scale: Tensor::filled(vec![f], 1.0),
            bn_shift: Tensor::zeros(vec![f]),
            bn_running_mean: Tensor::zeros(vec![f]),
            bn_running_var: Tensor::filled(vec![f], 1.0),
            fc2_weight: Tensor::new(vec![f, f], uniform(f * f, f))?,
            fc2_bias: Tensor::zeros(vec![f]),
            out_weight: Tensor::new(vec![f], uniform(f, f))?,
            out_bias: 0.0,
        })
    }
}

impl NetworkParams {
    /// Trainable parameters flattened in declared order: conv blocks
    /// (weights then bias, per block), fc1 weight/bias, batch-norm
    /// scale/shift, fc2 weight/bias, output weight/bias. Running statistics
    /// are not trainable and are excluded.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.conv_blocks {
            out.extend_from_slice(&b.weight.values);
            out.extend_from_slice(&b.bias.values);
        }
        out.extend_from_slice(&self.fc1_weight.values);
        out.extend_from_slice(&self.fc1_bias.values);
        out.extend_from_slice(&self.bn_scale.values);
        out.extend_from_slice(&self.bn_shift.values);
        out.extend_from_slice(&self.fc2_weight.values);
        out.extend_from_slice(&self.fc2_bias.values);
        out.extend_from_slice(&self.out_weight.values);
        out.push(self.out_bias);
        out
    }

    /// Overwrite the trainable parameter at a flat index (same order as
    /// [`NetworkParams::flatten_trainable`]).
    pub fn set_trainable(&mut self, index: usize, value: f64) -> Result<()> {
        let mut idx = index;
        for b in &mut self.conv_blocks {
            for values in [&mut b.weight.values, &mut b.bias.values] {
                if idx < values.len() {
                    values[idx] = value;
                    return Ok(());
                }
                idx -= values.len();
            }
        }
        for values in [
            &mut self.fc1_weight.values,
            &mut self.fc1_bias.values,
            &mut self.bn_scale.values,
            &mut self.bn_shift.values,
            &mut self.fc2_weight.values,
            &mut self.fc2_bias.values,
            &mut self.out_weight.values,
        ] {
            if idx < values.len() {
                values[idx] = value;
                return Ok(());
            }
            idx -= values.len();
        }
        if idx == 0 {
            self.out_bias = value;
            return Ok(());
        }
        Err(Error::Shape(format!("parameter index {index} out of range")))
    }
}

impl forward::NetworkGrads {
    /// Gradients flattened in the same order as
    /// [`NetworkParams::flatten_trainable`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.conv_blocks {
            out.extend_from_slice(&b.weight.values);
            out.extend_from_slice(&b.bias.values);
        }
        out.extend_from_slice(&self.fc1_weight.values);
        out.extend_from_slice(&self.fc1_bias.values);
        out.extend_from_slice(&self.bn_scale.values);
        out.extend_from_slice(&self.bn_shift.values);
        out.extend_from_slice(&self.fc2_weight.values);
        out.extend_from_slice(&self.fc2_bias.values);
        out.extend_from_slice(&self.out_weight.values);
        out.push(self.out_bias);
        out
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    spec_hash: String,
    spec: NetworkSpec,
    params: NetworkParams,
}

/// FNV-1a over the canonical JSON encoding of the spec.
pub fn spec_hash(spec: &NetworkSpec) -> String {
    let encoded = serde_json::to_string(spec).expect("spec serializes");
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in encoded.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    format!("{hash:016x}")
}

/// Write spec + parameters as versioned JSON with a spec hash header.
pub fn write_model(path: &Path, spec: &NetworkSpec, params: &NetworkParams) -> Result<()> {
    let file = ModelFile {
        format_version: 1,
        spec_hash: spec_hash(spec),
        spec: *spec,
        params: params.clone(),
    };
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    serde_json::to_writer(&mut out, &file).map_err(|e| Error::format(path, e.to_string()))?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<(NetworkSpec, NetworkParams)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parsed: ModelFile =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))?;
    if parsed.format_version != 1 {
        return Err(Error::format(path, format!("unsupported model format version {}", parsed.format_version)));
    }
    let expected = spec_hash(&parsed.spec);
    if parsed.spec_hash != expected {
        return Err(Error::format(
            path,
            format!("spec hash mismatch: header {} vs computed {expected}", parsed.spec_hash),
        ));
    }
    parsed.spec.validate()?;
    if parsed.params.bn_running_var.values.iter().any(|v| *v <= 0.0) {
        return Err(Error::format(path, "batch-norm running variance must be positive"));
    }
    Ok((parsed.spec, parsed.params))
}

/// Baseline architecture grid when no fixed spec is configured. The paper's
/// tuned values are not public, so the grid spans the documented search
/// space at desk scale.
pub fn default_search_grid() -> Vec<NetworkSpec> {
    let mut grid = Vec::new();
    for &num_conv_blocks in &[2usize, 3, 4] {
        for &kernel_size in &[3usize, 5] {
            for &dropout_prob in &[0.1, 0.3, 0.5] {
                for &fc_units in &[64usize, 128] {
                    for &fc_activation in &[Activation::ReLU, Activation::Sigmoid] {
                        grid.push(NetworkSpec {
                            num_conv_blocks,
                            kernel_size,
                            pool_stride: 2,
                            dropout_prob,
                            fc_units,
                            fc_activation,
                            input_channels: 6,
                        });
                    }
                }
            }
        }
    }
    grid
}
