//! Training loop, repeated-split cross-validation, and multi-seed
//! ensemble runs.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::LabeledSample;

use super::adam::{adam_step, AdamState, TrainConfig};
use super::{batch_from_samples, init_model, Mode, NetConfig, ResNet};

/// Per-epoch training metrics.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's batches.
    pub loss: f64,
    /// F1 of the train-mode predictions made during the epoch.
    pub f1: f64,
}

/// A trained network plus its metric log.
pub struct TrainOutcome {
    pub net: ResNet,
    pub log: Vec<EpochLog>,
}

fn f1_binary(pred: &[bool], truth: &[bool]) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    if 2.0 * tp + fp + fn_ == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

/// Train a network with Adam and seeded shuffling. Deterministic given
/// the two seeds (network init and data order). The final partial batch
/// is kept; a trailing single sample is folded into the previous batch
/// so batch-norm always sees at least two samples.
pub fn train(
    samples: &[LabeledSample],
    net_cfg: &NetConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::DegenerateInput(
            "training needs at least 2 samples".into(),
        ));
    }
    let n_pos = samples.iter().filter(|s| s.label).count();
    if n_pos == 0 || n_pos == samples.len() {
        return Err(Error::DegenerateInput(
            "both classes must be present in the training set".into(),
        ));
    }

    let mut net = init_model(net_cfg)?;
    let mut state = AdamState::new(net.n_params());
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(tcfg.epochs);

    for epoch in 0..tcfg.epochs {
        indices.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = indices.chunks(tcfg.batch_size).collect();
        // Fold a trailing singleton into the previous batch.
        if let [.., last] = batches.as_slice() {
            if last.len() == 1 && batches.len() > 1 {
                batches.pop();
                let keep = batches.len() - 1;
                let start = keep * tcfg.batch_size;
                batches[keep] = &indices[start..];
            }
        }

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut pred = Vec::with_capacity(samples.len());
        let mut truth = Vec::with_capacity(samples.len());
        for batch_idx in batches {
            let refs: Vec<&LabeledSample> = batch_idx.iter().map(|&i| &samples[i]).collect();
            let (x, labels) = batch_from_samples(&refs, net_cfg.input_shape)?;
            let (probs, cache) = net.forward(&x, Mode::Train)?;
            let (loss, grads) = net.backward(&cache, &labels)?;
            net.update_running_stats(&cache);

            let mut params = net.params_flat();
            adam_step(&mut params, &grads.flat(), &mut state, tcfg)?;
            net.set_params_flat(&params)?;

            loss_sum += loss * batch_idx.len() as f64;
            seen += batch_idx.len();
            for (bi, &label) in labels.iter().enumerate() {
                pred.push(probs[[bi, 1]] >= 0.5);
                truth.push(label == 1);
            }
        }
        log.push(EpochLog {
            epoch,
            loss: loss_sum / seen as f64,
            f1: f1_binary(&pred, &truth),
        });
    }

    Ok(TrainOutcome { net, log })
}

/// Positive-class scores of samples in eval mode, batched.
pub fn predict_samples(net: &ResNet, samples: &[LabeledSample]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let refs: Vec<&LabeledSample> = chunk.iter().collect();
        let (x, _) = batch_from_samples(&refs, net.cfg.input_shape)?;
        scores.extend(net.predict(&x)?);
    }
    Ok(scores)
}

/// Summary of k repeated random-split training runs.
#[derive(Debug, Clone)]
pub struct KfoldReport {
    /// Validation F1 per fold.
    pub fold_f1: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of the fold scores.
    pub std: f64,
    /// Validation-set size per fold.
    pub n_val: usize,
}

/// k-fold cross-validation as k seeded random 85:15 splits, reporting
/// the validation F1 of each fold.
pub fn kfold_cv(
    samples: &[LabeledSample],
    net_cfg: &NetConfig,
    tcfg: &TrainConfig,
    k: usize,
) -> Result<KfoldReport> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need k >= 2 folds, got {k}")));
    }
    if samples.len() < k {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the dataset size {}",
            samples.len()
        )));
    }
    let n = samples.len();
    let n_train = (((n as f64) * 0.85).round() as usize).clamp(1, n - 1);
    let mut fold_f1 = Vec::with_capacity(k);
    for fold in 0..k {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(fold as u64));
        idx.shuffle(&mut rng);
        let (train_idx, val_idx) = idx.split_at(n_train);
        let train_set: Vec<LabeledSample> =
            train_idx.iter().map(|&i| samples[i].clone()).collect();
        let val_set: Vec<LabeledSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();

        let fold_net_cfg = NetConfig {
            seed: net_cfg.seed.wrapping_add(fold as u64),
            ..net_cfg.clone()
        };
        let fold_tcfg = TrainConfig {
            seed: tcfg.seed.wrapping_add(fold as u64),
            ..tcfg.clone()
        };
        let outcome = train(&train_set, &fold_net_cfg, &fold_tcfg)?;
        let scores = predict_samples(&outcome.net, &val_set)?;
        let pred: Vec<bool> = scores.iter().map(|&s| s >= 0.5).collect();
        let truth: Vec<bool> = val_set.iter().map(|s| s.label).collect();
        fold_f1.push(f1_binary(&pred, &truth));
    }
    let mean = fold_f1.iter().sum::<f64>() / k as f64;
    let var = fold_f1.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / k as f64;
    Ok(KfoldReport {
        fold_f1,
        mean,
        std: var.sqrt(),
        n_val: n - n_train,
    })
}

/// Train `n_runs` independent models with consecutive seeds
/// (seed, seed+1, ...), for percentile reporting across runs.
pub fn ensemble_train(
    samples: &[LabeledSample],
    net_cfg: &NetConfig,
    tcfg: &TrainConfig,
    n_runs: usize,
) -> Result<Vec<TrainOutcome>> {
    if n_runs == 0 {
        return Err(Error::InvalidArgument("need at least one run".into()));
    }
    (0..n_runs)
        .map(|run| {
            let run_net = NetConfig {
                seed: net_cfg.seed.wrapping_add(run as u64),
                ..net_cfg.clone()
            };
            let run_t = TrainConfig {
                seed: tcfg.seed.wrapping_add(run as u64),
                ..tcfg.clone()
            };
            train(samples, &run_net, &run_t)
        })
        .collect()
}

/// Linear-interpolation percentile, q in [0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut v = values.to_vec();
    v.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < v.len() {
        v[lo] * (1.0 - frac) + v[lo + 1] * frac
    } else {
        v[lo]
    }
}
