//! Connectivity ablation: one short training run per graph strategy,
//! scored on a shared validation set.

use camnet_core::graphs::Connectivity;
use camnet_core::metrics::evaluate;
use camnet_core::scenario::Scenario;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::train::{predict_sets, train};
use crate::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    /// `k` for knn, the threshold in metres for distance, empty for all-to-all.
    pub param: Option<f64>,
    pub avgmin6_ade: f64,
    pub avgmin6_fde: f64,
    pub mr6: f64,
}

/// The sweep: all-to-all, knn with k ∈ {1, 2, 4}, distance ∈ {10, 20, 30, 50} m.
pub fn default_strategies() -> Vec<Connectivity> {
    let mut v = vec![Connectivity::AllToAll];
    v.extend([1, 2, 4].map(|k| Connectivity::Knn { k }));
    v.extend([10.0, 20.0, 30.0, 50.0].map(|threshold_m| Connectivity::Distance { threshold_m }));
    v
}

fn describe(c: Connectivity) -> (String, Option<f64>) {
    match c {
        Connectivity::AllToAll => ("all_to_all".into(), None),
        Connectivity::Knn { k } => ("knn".into(), Some(k as f64)),
        Connectivity::Distance { threshold_m } => ("distance".into(), Some(threshold_m)),
    }
}

/// Trains `base` once per strategy and evaluates with `base.train.k_eval` rollouts.
pub fn run_ablation(
    base: &ExperimentConfig,
    train_set: &[Scenario],
    val_set: &[Scenario],
    strategies: &[Connectivity],
) -> Result<Vec<AblationRow>, ModelError> {
    if val_set.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(strategies.len());
    for &c in strategies {
        let mut cfg = base.clone();
        cfg.model.connectivity = c;
        log::info!("ablation: training with {c}");
        let out = train(&cfg, train_set, &[], None, None)?;
        let k = cfg.train.k_eval;
        let sets = predict_sets(&out.last, val_set, k, cfg.train.seed)?;
        let r = evaluate(&sets, k).map_err(|e| ModelError::Data(e.to_string()))?;
        let (strategy, param) = describe(c);
        rows.push(AblationRow { strategy, param, avgmin6_ade: r.avgmin_ade, avgmin6_fde: r.avgmin_fde, mr6: r.avg_mr });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["strategy", "param", "avgmin6_ade", "avgmin6_fde", "mr6"]).expect("in-memory csv");
    for r in rows {
        w.write_record([
            r.strategy.clone(),
            r.param.map(|p| p.to_string()).unwrap_or_default(),
            r.avgmin6_ade.to_string(),
            r.avgmin6_fde.to_string(),
            r.mr6.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}
