//! Training loop, CSV log and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use camnet_autodiff::{checkpoint, Adam, AutodiffError, Tape, Tensor};
use camnet_core::metrics::{evaluate, PredictionSet};
use camnet_core::scenario::Scenario;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TrainConfig};
use crate::features::{batch_noise, mix, Batch, Scene};
use crate::model::{CamNet, SampleOptions};
use crate::ModelError;

pub const LOG_FILE: &str = "train_log.csv";
pub const BEST: &str = "best";
pub const LAST: &str = "last";

/// Validation metrics; the `6` columns use `k_eval` rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub avgmin1_ade: f64,
    pub avgmin6_ade: f64,
    pub avgmin6_fde: f64,
    pub mr6: f64,
}

/// One row of the training log. `epoch` counts from 1; the row's `lr` and
/// `beta` are the schedule values at `epoch − 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub beta: f64,
    pub train_loss: f64,
    pub recon_ll: f64,
    pub kl: f64,
    pub val: Option<ValMetrics>,
}

const HEADER: [&str; 10] = [
    "epoch",
    "lr",
    "beta",
    "train_loss",
    "recon_ll",
    "kl",
    "val_avgmin1_ade",
    "val_avgmin6_ade",
    "val_avgmin6_fde",
    "val_mr6",
];

impl EpochLog {
    fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.epoch.to_string(),
            self.lr.to_string(),
            self.beta.to_string(),
            self.train_loss.to_string(),
            self.recon_ll.to_string(),
            self.kl.to_string(),
        ];
        match self.val {
            Some(v) => r.extend([v.avgmin1_ade, v.avgmin6_ade, v.avgmin6_fde, v.mr6].iter().map(f64::to_string)),
            None => r.extend(std::iter::repeat(String::new()).take(4)),
        }
        r
    }
}

/// Renders a log as CSV.
pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).expect("in-memory csv");
    for r in rows {
        w.write_record(r.record()).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

/// JSON written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: ExperimentConfig,
    /// Epochs completed when the checkpoint was written.
    pub epoch: usize,
    pub val: Option<ValMetrics>,
}

pub fn checkpoint_paths(dir: &Path, tag: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{tag}.ckpt")), dir.join(format!("{tag}.json")))
}

pub fn save_checkpoint(path: &Path, model: &CamNet, sidecar: &Sidecar) -> Result<(), ModelError> {
    checkpoint::save(path, &model.params)?;
    let json = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    let side = path.with_extension("json");
    fs::write(&side, json).map_err(|source| ModelError::Io { path: side, source })
}

/// Loads a checkpoint and the sidecar that sits next to it.
pub fn load_checkpoint(path: &Path) -> Result<(CamNet, Sidecar), ModelError> {
    let side = path.with_extension("json");
    let text = fs::read_to_string(&side).map_err(|source| ModelError::Io { path: side.clone(), source })?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| ModelError::Config(format!("{}: {e}", side.display())))?;
    let params = checkpoint::load(path)?;
    let model = CamNet::with_params(sidecar.config.model.clone(), params)?;
    Ok((model, sidecar))
}

pub struct TrainOutcome {
    pub last: CamNet,
    pub best: CamNet,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Focal-agent prediction sets for a scenario list.
pub fn predict_sets(model: &CamNet, scenarios: &[Scenario], k: usize, seed: u64) -> Result<Vec<PredictionSet>, ModelError> {
    let samples = model.sample_trajectories(scenarios, SampleOptions { k, seed, prior_scale: 1.0 })?;
    samples.iter().zip(scenarios).map(|(s, sc)| s.prediction_set(sc)).collect()
}

pub fn validate(model: &CamNet, val: &[Scenario], k: usize, seed: u64) -> Result<ValMetrics, ModelError> {
    let sets = predict_sets(model, val, k, seed)?;
    let m = |e: camnet_core::metrics::MetricsError| ModelError::Data(e.to_string());
    let r1 = evaluate(&sets, 1).map_err(m)?;
    let rk = evaluate(&sets, k).map_err(m)?;
    Ok(ValMetrics { avgmin1_ade: r1.avgmin_ade, avgmin6_ade: rk.avgmin_ade, avgmin6_fde: rk.avgmin_fde, mr6: rk.avg_mr })
}

struct MicroResult {
    grads: BTreeMap<String, Tensor>,
    loss: f64,
    recon: f64,
    kl: f64,
    count: usize,
}

/// Raw (unnormalized) ELBO sums and gradients of one micro-batch.
fn micro_step(model: &CamNet, scenes: &[&Scene], seed: u64, beta: f64, tc: &TrainConfig) -> Result<MicroResult, ModelError> {
    let batch = Batch::build(scenes, model.config.connectivity);
    let noise = batch_noise(scenes, seed, batch.steps, model.config.d_latent);
    let mut t = Tape::with_policy(tc.nan_policy());
    let b = model.bind(&mut t);
    let terms = model.elbo_terms(&mut t, &b, &batch, &noise, beta, 1.0)?;
    let loss = t.value(terms.loss).data()[0];
    let recon = t.value(terms.recon_sum).data()[0];
    let kl = t.value(terms.kl_sum).data()[0];
    let grads = t.backward(terms.loss)?.into_named();
    Ok(MicroResult { grads, loss, recon, kl, count: batch.count })
}

/// Trains from `init` (warm start) or a fresh initialization. With `out`,
/// writes the CSV log and `best`/`last` checkpoints there.
pub fn train(
    cfg: &ExperimentConfig,
    train_set: &[Scenario],
    val_set: &[Scenario],
    out: Option<&Path>,
    init: Option<CamNet>,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let tc = &cfg.train;
    let mut model = match init {
        Some(m) => CamNet::with_params(cfg.model.clone(), m.params)?,
        None => CamNet::new(cfg.model.clone())?,
    };
    let scenes = train_set.iter().map(Scene::from_scenario).collect::<Result<Vec<_>, _>>()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|source| ModelError::Io { path: dir.to_path_buf(), source })?;
    }
    let schedule = tc.schedule();
    let mut adam = Adam::new(tc.weight_decay);
    let mut log = Vec::with_capacity(tc.epochs);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_score = f64::INFINITY;

    for e in 0..tc.epochs {
        let lr = schedule.lr(e);
        let beta = cfg.model.beta.value(e);
        let epoch_seed = mix(tc.seed, e as u64);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let (mut loss_sum, mut recon_sum, mut kl_sum, mut count_sum) = (0.0, 0.0, 0.0, 0usize);

        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let micro: Vec<Vec<&Scene>> =
                chunk.chunks(tc.micro_batch).map(|c| c.iter().map(|&i| &scenes[i]).collect()).collect();
            let results: Vec<_> = micro.par_iter().map(|m| micro_step(&model, m, epoch_seed, beta, tc)).collect();
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut count = 0;
            for r in results {
                let r = r.map_err(|err| match err {
                    ModelError::Autodiff(source @ AutodiffError::NonFiniteValue { .. }) => {
                        log::error!("non-finite value in epoch {} batch {bi}: {source}", e + 1);
                        ModelError::NonFinite { epoch: e + 1, batch: bi, source }
                    }
                    other => other,
                })?;
                for (name, g) in r.grads {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(name, g);
                        }
                    }
                }
                loss_sum += r.loss;
                recon_sum += r.recon;
                kl_sum += r.kl;
                count += r.count;
            }
            count_sum += count;
            if count == 0 {
                continue;
            }
            let scale = 1.0 / count as f64;
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            adam.step(&mut model.params, &grads, lr)?;
        }

        let n = count_sum.max(1) as f64;
        let last_epoch = e + 1 == tc.epochs;
        let val = if !val_set.is_empty() && (e == 0 || (e + 1) % tc.val_every == 0 || last_epoch) {
            Some(validate(&model, val_set, tc.k_eval, tc.seed)?)
        } else {
            None
        };
        let row = EpochLog { epoch: e + 1, lr, beta, train_loss: loss_sum / n, recon_ll: recon_sum / n, kl: kl_sum / n, val };
        log::info!(
            "epoch {} lr {:.3e} beta {:.3} loss {:.5} recon {:.5} kl {:.5}{}",
            row.epoch,
            lr,
            beta,
            row.train_loss,
            row.recon_ll,
            row.kl,
            val.map(|v| format!(" val ade6 {:.4}", v.avgmin6_ade)).unwrap_or_default()
        );
        log.push(row);

        let improved = match val {
            Some(v) => v.avgmin6_ade < best_score,
            None => val_set.is_empty(),
        };
        if improved {
            best_score = val.map_or(best_score, |v| v.avgmin6_ade);
            best = model.clone();
            best_epoch = e + 1;
        }
        if let Some(dir) = out {
            let csv_path = dir.join(LOG_FILE);
            fs::write(&csv_path, log_csv(&log)).map_err(|source| ModelError::Io { path: csv_path, source })?;
            let side = Sidecar { config: cfg.clone(), epoch: e + 1, val };
            save_checkpoint(&checkpoint_paths(dir, LAST).0, &model, &side)?;
            if improved {
                save_checkpoint(&checkpoint_paths(dir, BEST).0, &model, &side)?;
            }
        }
    }
    Ok(TrainOutcome { last: model, best, best_epoch, log })
}
