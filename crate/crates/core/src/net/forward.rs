//! Forward and backward passes.
//!
//! All loops are plain f64 so gradients check exactly against central
//! finite differences. Sample-level work is parallel; reductions run in
//! sample order, so results do not depend on thread scheduling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::PatchSample;
use crate::seeds;
use crate::net::{
    Activation, ConvBlockParams, NetworkParams, NetworkSpec, Tensor, BN_EPS, CONV_CHANNELS, INPUT_SIDE,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Whether dropout and batch statistics are live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Inference,
    /// Dropout masks are a pure function of this seed and the layer
    /// shapes, so repeated calls see identical masks.
    Training { dropout_seed: u64 },
}

/// Activations cached by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub(crate) batch: usize,
    pub(crate) training: bool,
    /// Entry 0 is the network input; entry k the output of block k.
    pub(crate) block_inputs: Vec<Tensor>,
    pub(crate) pre_relu: Vec<Tensor>,
    /// Per block, per pooled element: flat index of the max inside its
    /// pre-pool plane.
    pub(crate) pool_argmax: Vec<Vec<u32>>,
    /// Inverted-dropout scale per element (empty when dropout is inactive).
    pub(crate) dropout_mask: Vec<Vec<f64>>,
    pub(crate) fc1_pre: Vec<f64>,
    pub(crate) fc1_act: Vec<f64>,
    pub(crate) bn_mean: Vec<f64>,
    pub(crate) bn_var: Vec<f64>,
    pub(crate) bn_xhat: Vec<f64>,
    pub(crate) bn_out: Vec<f64>,
    pub(crate) fc2_pre: Vec<f64>,
    pub(crate) fc2_act: Vec<f64>,
    pub(crate) logits: Vec<f64>,
    pub(crate) scores: Vec<f64>,
}

impl ForwardCache {
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Batch statistics the pass normalized with (training mode only).
    pub fn batch_norm_stats(&self) -> (&[f64], &[f64]) {
        (&self.bn_mean, &self.bn_var)
    }

    /// Pre-activation of the first fully connected layer, `[batch, fc_units]`.
    pub fn fc1_pre(&self) -> &[f64] {
        &self.fc1_pre
    }
}

/// Parameter gradients; shapes mirror [`NetworkParams`] (running statistics
/// are not trainable and carry no gradient).
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGrads {
    pub conv_blocks: Vec<ConvBlockParams>,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub bn_scale: Tensor,
    pub bn_shift: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: f64,
}

/// Stack pre RGB on post RGB as a `[batch, 6, 64, 64]` tensor scaled to
/// [0,1].
pub fn assemble_input(samples: &[&PatchSample]) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::Input("cannot assemble an empty batch".into()));
    }
    let side = INPUT_SIDE;
    let plane = side * side;
    let mut t = Tensor::zeros(vec![samples.len(), 6, side, side]);
    for (b, s) in samples.iter().enumerate() {
        if s.pre_pixels.len() != plane * 3 || s.post_pixels.len() != plane * 3 {
            return Err(Error::Shape(format!(
                "patch {} crops must be {side}x{side}x3",
                s.patch_id
            )));
        }
        let base = b * 6 * plane;
        for (half, pixels) in [(0usize, &s.pre_pixels), (3, &s.post_pixels)] {
            for i in 0..plane {
                for c in 0..3 {
                    t.values[base + (half + c) * plane + i] = f64::from(pixels[i * 3 + c]) / 255.0;
                }
            }
        }
    }
    Ok(t)
}

fn check_param_shapes(spec: &NetworkSpec, params: &NetworkParams) -> Result<()> {
    if params.conv_blocks.len() != spec.num_conv_blocks {
        return Err(Error::Shape(format!(
            "params carry {} conv blocks, spec wants {}",
            params.conv_blocks.len(),
            spec.num_conv_blocks
        )));
    }
    let k = spec.kernel_size;
    for (b, block) in params.conv_blocks.iter().enumerate() {
        let (ic, oc) = (spec.block_in_channels(b), CONV_CHANNELS[b]);
        if block.weight.shape() != [oc, ic, k, k] || block.bias.shape() != [oc] {
            return Err(Error::Shape(format!("conv block {b} has mismatched shapes")));
        }
    }
    let (d, f) = (spec.flat_dim(), spec.fc_units);
    let checks = [
        (params.fc1_weight.shape(), vec![f, d], "fc1 weight"),
        (params.fc1_bias.shape(), vec![f], "fc1 bias"),
        (params.bn_scale.shape(), vec![f], "bn scale"),
        (params.bn_shift.shape(), vec![f], "bn shift"),
        (params.bn_running_mean.shape(), vec![f], "bn running mean"),
        (params.bn_running_var.shape(), vec![f], "bn running var"),
        (params.fc2_weight.shape(), vec![f, f], "fc2 weight"),
        (params.fc2_bias.shape(), vec![f], "fc2 bias"),
        (params.out_weight.shape(), vec![f], "output weight"),
    ];
    for (got, want, name) in checks {
        if got != want {
            return Err(Error::Shape(format!("{name} has shape {got:?}, expected {want:?}")));
        }
    }
    Ok(())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn apply_activation(kind: Activation, pre: &[f64], out: &mut [f64]) {
    match kind {
        Activation::ReLU => {
            for (o, &p) in out.iter_mut().zip(pre) {
                *o = p.max(0.0);
            }
        }
        Activation::Sigmoid => {
            for (o, &p) in out.iter_mut().zip(pre) {
                *o = sigmoid(p);
            }
        }
    }
}

fn activation_backward(kind: Activation, pre: &[f64], act: &[f64], dact: &[f64], dpre: &mut [f64]) {
    match kind {
        Activation::ReLU => {
            for i in 0..dact.len() {
                dpre[i] = if pre[i] > 0.0 { dact[i] } else { 0.0 };
            }
        }
        Activation::Sigmoid => {
            for i in 0..dact.len() {
                dpre[i] = dact[i] * act[i] * (1.0 - act[i]);
            }
        }
    }
}

/// Same-padded stride-1 convolution of one sample:
/// `input [ic, s, s]` -> `out [oc, s, s]`.
fn conv_forward_sample(input: &[f64], out: &mut [f64], weight: &[f64], bias: &[f64], ic: usize, oc: usize, side: usize, k: usize) {
    let pad = (k / 2) as isize;
    let plane = side * side;
    for o in 0..oc {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(bias[o]);
        for i in 0..ic {
            let in_plane = &input[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let w = weight[((o * ic + i) * k + ky) * k + kx];
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((side as isize - dy).min(side as isize)).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((side as isize - dx).min(side as isize)).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let ix0 = (x0 as isize + dx) as usize;
                        let orow = &mut out_plane[y * side + x0..y * side + x1];
                        let irow = &in_plane[iy * side + ix0..iy * side + ix0 + (x1 - x0)];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += w * iv;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of one sample's convolution: accumulates into `dweight` /
/// `dbias` and fills `dinput` (when requested).
#[allow(clippy::too_many_arguments)]
fn conv_backward_sample(
    input: &[f64],
    dout: &[f64],
    weight: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    dinput: Option<&mut [f64]>,
    ic: usize,
    oc: usize,
    side: usize,
    k: usize,
) {
    let pad = (k / 2) as isize;
    let plane = side * side;
    for o in 0..oc {
        let dout_plane = &dout[o * plane..(o + 1) * plane];
        dbias[o] += dout_plane.iter().sum::<f64>();
        for i in 0..ic {
            let in_plane = &input[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((side as isize - dy).min(side as isize)).max(0) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((side as isize - dx).min(side as isize)).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let ix0 = (x0 as isize + dx) as usize;
                        let drow = &dout_plane[y * side + x0..y * side + x1];
                        let irow = &in_plane[iy * side + ix0..iy * side + ix0 + (x1 - x0)];
                        for (dv, iv) in drow.iter().zip(irow) {
                            acc += dv * iv;
                        }
                    }
                    dweight[((o * ic + i) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
    if let Some(dinput) = dinput {
        for i in 0..ic {
            let din_plane = &mut dinput[i * plane..(i + 1) * plane];
            for o in 0..oc {
                let dout_plane = &dout[o * plane..(o + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let w = weight[((o * ic + i) * k + ky) * k + kx];
                        let y0 = (-dy).max(0) as usize;
                        let y1 = ((side as isize - dy).min(side as isize)).max(0) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((side as isize - dx).min(side as isize)).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let ix0 = (x0 as isize + dx) as usize;
                            let drow = &dout_plane[y * side + x0..y * side + x1];
                            let dirow = &mut din_plane[iy * side + ix0..iy * side + ix0 + (x1 - x0)];
                            for (div, dv) in dirow.iter_mut().zip(drow) {
                                *div += w * dv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Max-pool with window = stride; ties resolve to the first element in
/// row-major scan order.
fn pool_forward_sample(input: &[f64], out: &mut [f64], argmax: &mut [u32], channels: usize, side: usize, stride: usize) {
    let pooled = side / stride;
    let plane = side * side;
    let out_plane = pooled * pooled;
    for c in 0..channels {
        for py in 0..pooled {
            for px in 0..pooled {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0u32;
                for wy in 0..stride {
                    for wx in 0..stride {
                        let y = py * stride + wy;
                        let x = px * stride + wx;
                        let v = input[c * plane + y * side + x];
                        if v > best {
                            best = v;
                            best_at = (y * side + x) as u32;
                        }
                    }
                }
                out[c * out_plane + py * pooled + px] = best;
                argmax[c * out_plane + py * pooled + px] = best_at;
            }
        }
    }
}

/// Run the network on an assembled `[batch, channels, 64, 64]` input.
/// Returns per-sample destruction probabilities plus the cached
/// activations.
pub fn forward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    input: Tensor,
    mode: ForwardMode,
) -> Result<(Vec<f64>, ForwardCache)> {
    spec.validate()?;
    check_param_shapes(spec, params)?;
    let shape = input.shape().to_vec();
    if shape.len() != 4 || shape[1] != spec.input_channels || shape[2] != INPUT_SIDE || shape[3] != INPUT_SIDE {
        return Err(Error::Shape(format!(
            "input shape {shape:?} does not match [batch, {}, {INPUT_SIDE}, {INPUT_SIDE}]",
            spec.input_channels
        )));
    }
    let batch = shape[0];
    let training = matches!(mode, ForwardMode::Training { .. });
    let sides = spec.feature_map_sides();

    let mut block_inputs = vec![input];
    let mut pre_relu_all = Vec::new();
    let mut pool_argmax_all = Vec::new();
    let mut dropout_mask_all = Vec::new();

    for b in 0..spec.num_conv_blocks {
        let (ic, oc) = (spec.block_in_channels(b), CONV_CHANNELS[b]);
        let (side, pooled) = (sides[b], sides[b + 1]);
        let in_len = ic * side * side;
        let conv_len = oc * side * side;
        let out_len = oc * pooled * pooled;

        let mut pre_relu = Tensor::zeros(vec![batch, oc, side, side]);
        let mut block_out = Tensor::zeros(vec![batch, oc, pooled, pooled]);
        let mut argmax = vec![0u32; batch * out_len];
        let dropout_active = training && spec.dropout_prob > 0.0;
        let mut mask = if dropout_active { vec![0.0f64; batch * out_len] } else { Vec::new() };

        let input_t = block_inputs.last().unwrap();
        let weight = &params.conv_blocks[b].weight.values;
        let bias = &params.conv_blocks[b].bias.values;
        let dropout_seed = match mode {
            ForwardMode::Training { dropout_seed } => dropout_seed,
            ForwardMode::Inference => 0,
        };

        struct SampleJob<'a> {
            idx: usize,
            input: &'a [f64],
            pre: &'a mut [f64],
            out: &'a mut [f64],
            argmax: &'a mut [u32],
            mask: Option<&'a mut [f64]>,
        }
        let mut jobs: Vec<SampleJob> = Vec::with_capacity(batch);
        {
            let mut pre_iter = pre_relu.values.chunks_mut(conv_len);
            let mut out_iter = block_out.values.chunks_mut(out_len);
            let mut arg_iter = argmax.chunks_mut(out_len);
            let mut mask_iter = dropout_active.then(|| mask.chunks_mut(out_len));
            for (idx, input) in input_t.values.chunks(in_len).enumerate() {
                jobs.push(SampleJob {
                    idx,
                    input,
                    pre: pre_iter.next().unwrap(),
                    out: out_iter.next().unwrap(),
                    argmax: arg_iter.next().unwrap(),
                    mask: mask_iter.as_mut().map(|it| it.next().unwrap()),
                });
            }
        }
        jobs.into_par_iter().for_each(|job| {
            conv_forward_sample(job.input, job.pre, weight, bias, ic, oc, side, spec.kernel_size);
            // ReLU into a scratch buffer, pool from it.
            let mut relu = vec![0.0f64; conv_len];
            for (r, &p) in relu.iter_mut().zip(job.pre.iter()) {
                *r = p.max(0.0);
            }
            pool_forward_sample(&relu, job.out, job.argmax, oc, side, spec.pool_stride);
            if let Some(mask) = job.mask {
                let keep = 1.0 - spec.dropout_prob;
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
                    dropout_seed,
                    ((b as u64) << 32) | job.idx as u64,
                ));
                for (m, o) in mask.iter_mut().zip(job.out.iter_mut()) {
                    *m = if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
                    *o *= *m;
                }
            }
        });

        block_inputs.push(block_out);
        pre_relu_all.push(pre_relu);
        pool_argmax_all.push(argmax);
        dropout_mask_all.push(mask);
    }

    // Fully connected head.
    let d = spec.flat_dim();
    let f = spec.fc_units;
    let flat = &block_inputs.last().unwrap().values;

    let mut fc1_pre = vec![0.0f64; batch * f];
    for s in 0..batch {
        let x = &flat[s * d..(s + 1) * d];
        let pre = &mut fc1_pre[s * f..(s + 1) * f];
        for (u, p) in pre.iter_mut().enumerate() {
            let w = &params.fc1_weight.values[u * d..(u + 1) * d];
            let mut acc = params.fc1_bias.values[u];
            for (wv, xv) in w.iter().zip(x) {
                acc += wv * xv;
            }
            *p = acc;
        }
    }
    let mut fc1_act = vec![0.0f64; batch * f];
    apply_activation(spec.fc_activation, &fc1_pre, &mut fc1_act);

    // Batch normalization between the fully connected layers.
    let (mut bn_mean, mut bn_var) = (vec![0.0f64; f], vec![0.0f64; f]);
    if training {
        for u in 0..f {
            let mut sum = 0.0;
            for s in 0..batch {
                sum += fc1_act[s * f + u];
            }
            let mean = sum / batch as f64;
            let mut ss = 0.0;
            for s in 0..batch {
                let dlt = fc1_act[s * f + u] - mean;
                ss += dlt * dlt;
            }
            bn_mean[u] = mean;
            bn_var[u] = ss / batch as f64;
        }
    } else {
        bn_mean.copy_from_slice(&params.bn_running_mean.values);
        bn_var.copy_from_slice(&params.bn_running_var.values);
    }
    let mut bn_xhat = vec![0.0f64; batch * f];
    let mut bn_out = vec![0.0f64; batch * f];
    for s in 0..batch {
        for u in 0..f {
            let xhat = (fc1_act[s * f + u] - bn_mean[u]) / (bn_var[u] + BN_EPS).sqrt();
            bn_xhat[s * f + u] = xhat;
            bn_out[s * f + u] = params.bn_scale.values[u] * xhat + params.bn_shift.values[u];
        }
    }

    let mut fc2_pre = vec![0.0f64; batch * f];
    for s in 0..batch {
        let x = &bn_out[s * f..(s + 1) * f];
        let pre = &mut fc2_pre[s * f..(s + 1) * f];
        for (u, p) in pre.iter_mut().enumerate() {
            let w = &params.fc2_weight.values[u * f..(u + 1) * f];
            let mut acc = params.fc2_bias.values[u];
            for (wv, xv) in w.iter().zip(x) {
                acc += wv * xv;
            }
            *p = acc;
        }
    }
    let mut fc2_act = vec![0.0f64; batch * f];
    apply_activation(spec.fc_activation, &fc2_pre, &mut fc2_act);

    let mut logits = vec![0.0f64; batch];
    for s in 0..batch {
        let x = &fc2_act[s * f..(s + 1) * f];
        let mut acc = params.out_bias;
        for (wv, xv) in params.out_weight.values.iter().zip(x) {
            acc += wv * xv;
        }
        logits[s] = acc;
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit in forward pass".into()));
    }
    let scores: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();

    let cache = ForwardCache {
        batch,
        training,
        block_inputs,
        pre_relu: pre_relu_all,
        pool_argmax: pool_argmax_all,
        dropout_mask: dropout_mask_all,
        fc1_pre,
        fc1_act,
        bn_mean,
        bn_var,
        bn_xhat,
        bn_out,
        fc2_pre,
        fc2_act,
        logits,
        scores: scores.clone(),
    };
    Ok((scores, cache))
}

/// Mean binary cross-entropy of cached logits against targets, computed in
/// the numerically stable logit form.
pub fn bce_loss(cache: &ForwardCache, targets: &[f64]) -> Result<f64> {
    if targets.len() != cache.batch {
        return Err(Error::Shape(format!("{} targets for a batch of {}", targets.len(), cache.batch)));
    }
    let softplus = |t: f64| t.max(0.0) + (-t.abs()).exp().ln_1p();
    let mut total = 0.0;
    for (z, y) in cache.logits.iter().zip(targets) {
        total += softplus(-z) + (1.0 - y) * z;
    }
    Ok(total / cache.batch as f64)
}

/// Gradients of the mean binary cross-entropy with respect to every
/// trainable parameter. Requires a cache from a training-mode forward on
/// the same batch.
pub fn backward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    cache: &ForwardCache,
    targets: &[f64],
) -> Result<NetworkGrads> {
    if !cache.training {
        return Err(Error::State("backward needs a cache from a training-mode forward".into()));
    }
    if targets.len() != cache.batch {
        return Err(Error::Shape(format!("{} targets for a batch of {}", targets.len(), cache.batch)));
    }
    let batch = cache.batch;
    let f = spec.fc_units;
    let d = spec.flat_dim();

    // d loss / d logit
    let dlogits: Vec<f64> =
        cache.scores.iter().zip(targets).map(|(p, y)| (p - y) / batch as f64).collect();

    // Output layer.
    let mut d_out_weight = vec![0.0f64; f];
    let mut d_out_bias = 0.0f64;
    let mut d_fc2_act = vec![0.0f64; batch * f];
    for s in 0..batch {
        let g = dlogits[s];
        d_out_bias += g;
        for u in 0..f {
            d_out_weight[u] += g * cache.fc2_act[s * f + u];
            d_fc2_act[s * f + u] = g * params.out_weight.values[u];
        }
    }

    let mut d_fc2_pre = vec![0.0f64; batch * f];
    activation_backward(spec.fc_activation, &cache.fc2_pre, &cache.fc2_act, &d_fc2_act, &mut d_fc2_pre);

    let mut d_fc2_weight = vec![0.0f64; f * f];
    let mut d_fc2_bias = vec![0.0f64; f];
    let mut d_bn_out = vec![0.0f64; batch * f];
    for s in 0..batch {
        for o in 0..f {
            let g = d_fc2_pre[s * f + o];
            d_fc2_bias[o] += g;
            for i in 0..f {
                d_fc2_weight[o * f + i] += g * cache.bn_out[s * f + i];
                d_bn_out[s * f + i] += g * params.fc2_weight.values[o * f + i];
            }
        }
    }

    // Batch normalization backward through the batch statistics.
    let mut d_bn_scale = vec![0.0f64; f];
    let mut d_bn_shift = vec![0.0f64; f];
    let mut d_fc1_act = vec![0.0f64; batch * f];
    for u in 0..f {
        let inv_std = 1.0 / (cache.bn_var[u] + BN_EPS).sqrt();
        let gamma = params.bn_scale.values[u];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for s in 0..batch {
            let dy = d_bn_out[s * f + u];
            sum_dy += dy;
            sum_dy_xhat += dy * cache.bn_xhat[s * f + u];
        }
        d_bn_shift[u] = sum_dy;
        d_bn_scale[u] = sum_dy_xhat;
        let m = batch as f64;
        for s in 0..batch {
            let dy = d_bn_out[s * f + u];
            let xhat = cache.bn_xhat[s * f + u];
            d_fc1_act[s * f + u] = gamma * inv_std * (dy - sum_dy / m - xhat * sum_dy_xhat / m);
        }
    }

    let mut d_fc1_pre = vec![0.0f64; batch * f];
    activation_backward(spec.fc_activation, &cache.fc1_pre, &cache.fc1_act, &d_fc1_act, &mut d_fc1_pre);

    let flat = &cache.block_inputs.last().unwrap().values;
    let mut d_fc1_weight = vec![0.0f64; f * d];
    let mut d_fc1_bias = vec![0.0f64; f];
    let mut d_flat = vec![0.0f64; batch * d];
    for s in 0..batch {
        let x = &flat[s * d..(s + 1) * d];
        let dx = &mut d_flat[s * d..(s + 1) * d];
        for u in 0..f {
            let g = d_fc1_pre[s * f + u];
            if g == 0.0 {
                continue;
            }
            d_fc1_bias[u] += g;
            let wrow = &params.fc1_weight.values[u * d..(u + 1) * d];
            let dwrow = &mut d_fc1_weight[u * d..(u + 1) * d];
            for i in 0..d {
                dwrow[i] += g * x[i];
                dx[i] += g * wrow[i];
            }
        }
    }

    // Convolutional stack, sample-parallel with an ordered reduction.
    let sides = spec.feature_map_sides();
    let k = spec.kernel_size;
    let nb = spec.num_conv_blocks;

    struct SampleConvGrads {
        per_block: Vec<(Vec<f64>, Vec<f64>)>,
    }

    let per_sample: Vec<SampleConvGrads> = (0..batch)
        .into_par_iter()
        .map(|s| {
            let mut per_block: Vec<(Vec<f64>, Vec<f64>)> = (0..nb)
                .map(|b| {
                    let (ic, oc) = (spec.block_in_channels(b), CONV_CHANNELS[b]);
                    (vec![0.0f64; oc * ic * k * k], vec![0.0f64; oc])
                })
                .collect();
            // Gradient flowing into the block output, starting from d_flat.
            let last_len = d;
            let mut d_block_out = d_flat[s * last_len..(s + 1) * last_len].to_vec();
            for b in (0..nb).rev() {
                let (ic, oc) = (spec.block_in_channels(b), CONV_CHANNELS[b]);
                let (side, pooled) = (sides[b], sides[b + 1]);
                let out_len = oc * pooled * pooled;
                let conv_len = oc * side * side;
                let in_len = ic * side * side;

                // Dropout backward.
                if !cache.dropout_mask[b].is_empty() {
                    let mask = &cache.dropout_mask[b][s * out_len..(s + 1) * out_len];
                    for (g, m) in d_block_out.iter_mut().zip(mask) {
                        *g *= m;
                    }
                }
                // Pool backward: scatter into the pre-pool map.
                let mut d_relu = vec![0.0f64; conv_len];
                let argmax = &cache.pool_argmax[b][s * out_len..(s + 1) * out_len];
                let out_plane = pooled * pooled;
                let plane = side * side;
                for c in 0..oc {
                    for p in 0..out_plane {
                        let g = d_block_out[c * out_plane + p];
                        d_relu[c * plane + argmax[c * out_plane + p] as usize] += g;
                    }
                }
                // ReLU backward.
                let pre = &cache.pre_relu[b].values[s * conv_len..(s + 1) * conv_len];
                let mut d_conv = vec![0.0f64; conv_len];
                for i in 0..conv_len {
                    d_conv[i] = if pre[i] > 0.0 { d_relu[i] } else { 0.0 };
                }
                // Convolution backward.
                let input = &cache.block_inputs[b].values[s * in_len..(s + 1) * in_len];
                let mut d_input = if b > 0 { vec![0.0f64; in_len] } else { Vec::new() };
                let (dw, db) = &mut per_block[b];
                conv_backward_sample(
                    input,
                    &d_conv,
                    &params.conv_blocks[b].weight.values,
                    dw,
                    db,
                    (b > 0).then_some(&mut d_input[..]),
                    ic,
                    oc,
                    side,
                    k,
                );
                d_block_out = d_input;
            }
            SampleConvGrads { per_block }
        })
        .collect();

    let mut conv_grads: Vec<ConvBlockParams> = (0..nb)
        .map(|b| {
            let (ic, oc) = (spec.block_in_channels(b), CONV_CHANNELS[b]);
            ConvBlockParams {
                weight: Tensor::zeros(vec![oc, ic, k, k]),
                bias: Tensor::zeros(vec![oc]),
            }
        })
        .collect();
    for sample in &per_sample {
        for (b, (dw, db)) in sample.per_block.iter().enumerate() {
            for (acc, v) in conv_grads[b].weight.values.iter_mut().zip(dw) {
                *acc += v;
            }
            for (acc, v) in conv_grads[b].bias.values.iter_mut().zip(db) {
                *acc += v;
            }
        }
    }

    Ok(NetworkGrads {
        conv_blocks: conv_grads,
        fc1_weight: Tensor { shape: vec![f, d], values: d_fc1_weight }.validated(),
        fc1_bias: Tensor { shape: vec![f], values: d_fc1_bias }.validated(),
        bn_scale: Tensor { shape: vec![f], values: d_bn_scale }.validated(),
        bn_shift: Tensor { shape: vec![f], values: d_bn_shift }.validated(),
        fc2_weight: Tensor { shape: vec![f, f], values: d_fc2_weight }.validated(),
        fc2_bias: Tensor { shape: vec![f], values: d_fc2_bias }.validated(),
        out_weight: Tensor { shape: vec![f], values: d_out_weight }.validated(),
        out_bias: d_out_bias,
    })
}

impl Tensor {
    fn validated(self) -> Tensor {
        debug_assert_eq!(self.values.len(), self.shape.iter().product::<usize>());
        self
    }
}
