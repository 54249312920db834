//! Training loop, architecture search, and the city-wide dense scan.

use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{roc_auc, ScoredLabelSet};
use crate::net::{
    assemble_input, backward, bce_loss, forward, ForwardMode, NetworkGrads, NetworkParams, NetworkSpec,
    TrainConfig, BN_MOMENTUM,
};
use crate::raster::{extract_sample, GeoRaster, PatchGrid, PatchSample};
use crate::seeds;
use crate::smoother::ScorePanel;

/// A pre/post crop pair with its propagated label (true = destroyed).
#[derive(Clone, Debug)]
pub struct LabeledPatch {
    pub sample: PatchSample,
    pub label: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub val_auc: f64,
}

/// Per-epoch training record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    /// Columns: `epoch,loss,val_auc`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_record(["epoch", "loss", "val_auc"]).map_err(|e| Error::format(path, e.to_string()))?;
        for e in &self.epochs {
            w.write_record([&e.epoch.to_string(), &format!("{}", e.loss), &format!("{}", e.val_auc)])
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn sgd_step(params: &mut NetworkParams, grads: &NetworkGrads, lr: f64) {
    for (block, grad) in params.conv_blocks.iter_mut().zip(&grads.conv_blocks) {
        for (w, g) in block.weight.values.iter_mut().zip(&grad.weight.values) {
            *w -= lr * g;
        }
        for (b, g) in block.bias.values.iter_mut().zip(&grad.bias.values) {
            *b -= lr * g;
        }
    }
    let pairs: [(&mut Vec<f64>, &Vec<f64>); 7] = [
        (&mut params.fc1_weight.values, &grads.fc1_weight.values),
        (&mut params.fc1_bias.values, &grads.fc1_bias.values),
        (&mut params.bn_scale.values, &grads.bn_scale.values),
        (&mut params.bn_shift.values, &grads.bn_shift.values),
        (&mut params.fc2_weight.values, &grads.fc2_weight.values),
        (&mut params.fc2_bias.values, &grads.fc2_bias.values),
        (&mut params.out_weight.values, &grads.out_weight.values),
    ];
    for (values, gvalues) in pairs {
        for (v, g) in values.iter_mut().zip(gvalues) {
            *v -= lr * g;
        }
    }
    params.out_bias -= lr * grads.out_bias;
}

/// Score samples in inference mode, batched.
pub fn score_samples(spec: &NetworkSpec, params: &NetworkParams, samples: &[&PatchSample]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let input = assemble_input(chunk)?;
        let (batch_scores, _) = forward(spec, params, input, ForwardMode::Inference)?;
        scores.extend(batch_scores);
    }
    Ok(scores)
}

fn validation_auc(spec: &NetworkSpec, params: &NetworkParams, val: &[LabeledPatch]) -> Result<f64> {
    let refs: Vec<&PatchSample> = val.iter().map(|s| &s.sample).collect();
    let scores = score_samples(spec, params, &refs)?;
    let pairs: Vec<(f64, u8)> =
        scores.into_iter().zip(val).map(|(s, l)| (s, u8::from(l.label))).collect();
    roc_auc(&ScoredLabelSet::new(pairs)?)
}

/// Mini-batch SGD on binary cross-entropy. Returns the parameter snapshot
/// with the best validation AUC across epochs and the per-epoch history.
/// Fully deterministic for a given `config.seed`.
pub fn train(
    spec: &NetworkSpec,
    config: &TrainConfig,
    train_samples: &[LabeledPatch],
    val_samples: &[LabeledPatch],
) -> Result<(NetworkParams, TrainHistory)> {
    spec.validate()?;
    config.validate()?;
    if train_samples.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }

    let mut params = NetworkParams::init(spec, config.seed, config.weight_init_scale)?;
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok((params, history));
    }

    let mut best_params = params.clone();
    let mut best_auc = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..train_samples.len()).collect();

    for epoch in 0..config.epochs {
        let epoch_seed = seeds::derive(config.seed, epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, batch_ids) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PatchSample> =
                batch_ids.iter().map(|&i| &train_samples[i].sample).collect();
            let targets: Vec<f64> =
                batch_ids.iter().map(|&i| f64::from(u8::from(train_samples[i].label))).collect();
            let input = assemble_input(&batch)?;
            let dropout_seed = seeds::derive(epoch_seed, bi as u64);
            let (_, cache) = forward(spec, &params, input, ForwardMode::Training { dropout_seed })?;
            let loss = bce_loss(&cache, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at epoch {epoch}, batch {bi}")));
            }
            loss_sum += loss;
            batches += 1;

            let grads = backward(spec, &params, &cache, &targets)?;
            sgd_step(&mut params, &grads, config.learning_rate);

            let (batch_mean, batch_var) = cache.batch_norm_stats();
            for u in 0..spec.fc_units {
                params.bn_running_mean.values[u] =
                    (1.0 - BN_MOMENTUM) * params.bn_running_mean.values[u] + BN_MOMENTUM * batch_mean[u];
                params.bn_running_var.values[u] = ((1.0 - BN_MOMENTUM) * params.bn_running_var.values[u]
                    + BN_MOMENTUM * batch_var[u])
                    .max(crate::net::BN_EPS);
            }
        }

        let val_auc = validation_auc(spec, &params, val_samples)?;
        history.epochs.push(EpochStats { epoch, loss: loss_sum / batches as f64, val_auc });
        if val_auc > best_auc {
            best_auc = val_auc;
            best_params = params.clone();
        }
    }

    Ok((best_params, history))
}

/// Winning candidate of an architecture search.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub best_index: usize,
    pub spec: NetworkSpec,
    pub config: TrainConfig,
    pub params: NetworkParams,
    pub history: TrainHistory,
    pub val_auc: f64,
}

/// Train every candidate and keep the argmax of validation AUC; ties break
/// toward fewer parameters, then grid order.
pub fn hyperparameter_search(
    grid: &[(NetworkSpec, TrainConfig)],
    train_samples: &[LabeledPatch],
    val_samples: &[LabeledPatch],
) -> Result<SearchOutcome> {
    if grid.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".into()));
    }
    let mut best: Option<SearchOutcome> = None;
    for (index, (spec, config)) in grid.iter().enumerate() {
        let (params, history) = train(spec, config, train_samples, val_samples)?;
        let val_auc = validation_auc(spec, &params, val_samples)?;
        let candidate = SearchOutcome {
            best_index: index,
            spec: *spec,
            config: *config,
            params,
            history,
            val_auc,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                val_auc > b.val_auc
                    || (val_auc == b.val_auc && spec.param_count() < b.spec.param_count())
            }
        };
        if better {
            best = Some(candidate);
        }
    }
    Ok(best.expect("non-empty grid"))
}

/// Score every included patch (no-analysis ones too) at every requested
/// date, in inference mode.
pub fn dense_scan(
    spec: &NetworkSpec,
    params: &NetworkParams,
    grid: &PatchGrid,
    pre: &GeoRaster,
    posts: &[GeoRaster],
    dates: &[NaiveDate],
) -> Result<ScorePanel> {
    let mut dates = dates.to_vec();
    dates.sort();
    dates.dedup();
    if dates.is_empty() {
        return Err(Error::Input("no scan dates requested".into()));
    }
    let mut rasters = Vec::with_capacity(dates.len());
    for date in &dates {
        let raster = posts
            .iter()
            .find(|r| r.capture_date == *date)
            .ok_or_else(|| Error::Input(format!("missing raster for date {date}")))?;
        if !pre.co_registered_with(raster) {
            return Err(Error::Config(format!("raster {date} is not co-registered with the pre image")));
        }
        rasters.push(raster);
    }

    let patches: Vec<crate::raster::PatchId> = grid.included().iter().copied().collect();
    let per_chunk: Vec<Vec<f64>> = patches
        .par_chunks(16)
        .map(|chunk| {
            let mut scores = Vec::with_capacity(chunk.len() * dates.len());
            for raster in &rasters {
                let samples: Vec<PatchSample> = chunk
                    .iter()
                    .map(|&id| extract_sample(pre, raster, grid, id))
                    .collect::<Result<_>>()?;
                let refs: Vec<&PatchSample> = samples.iter().collect();
                let input = assemble_input(&refs)?;
                let (batch_scores, _) = forward(spec, params, input, ForwardMode::Inference)?;
                scores.push(batch_scores);
            }
            // scores is date-major over the chunk; transpose to patch-major.
            let per_date = scores;
            let mut out = Vec::with_capacity(chunk.len() * dates.len());
            for p in 0..chunk.len() {
                for date_scores in &per_date {
                    out.push(date_scores[p]);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let stage1: Vec<f64> = per_chunk.into_iter().flatten().collect();
    ScorePanel::from_stage1(patches, dates, stage1)
}
