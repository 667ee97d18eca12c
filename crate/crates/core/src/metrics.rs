//! Displacement metrics and the best-of-k evaluation protocol.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Final displacement above which a prediction counts as a miss, metres.
pub const MISS_THRESHOLD_M: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no valid ground-truth step")]
    NoValidSteps,
    #[error("prediction set `{id}` has {have} mode(s), {need} required")]
    InsufficientModes { id: String, have: usize, need: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Point = (f64, f64);

/// Predicted modes and ground truth for one scored agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub scenario_id: String,
    pub station_id: u32,
    /// `modes[m][step]`.
    pub modes: Vec<Vec<Point>>,
    pub gt: Vec<Point>,
    pub valid: Vec<bool>,
}

fn check(pred: &[Point], gt: &[Point], valid: &[bool]) -> Result<(), MetricsError> {
    if pred.len() != gt.len() || gt.len() != valid.len() {
        return Err(MetricsError::Shape(format!(
            "pred {} / gt {} / valid {}",
            pred.len(),
            gt.len(),
            valid.len()
        )));
    }
    Ok(())
}

fn disp(a: Point, b: Point) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

pub fn ade(pred: &[Point], gt: &[Point], valid: &[bool]) -> Result<f64, MetricsError> {
    check(pred, gt, valid)?;
    let (sum, n) = pred
        .iter()
        .zip(gt)
        .zip(valid)
        .filter(|(_, v)| **v)
        .fold((0.0, 0usize), |(s, n), ((p, g), _)| (s + disp(*p, *g), n + 1));
    if n == 0 {
        return Err(MetricsError::NoValidSteps);
    }
    Ok(sum / n as f64)
}

/// Displacement at the last valid step.
pub fn fde(pred: &[Point], gt: &[Point], valid: &[bool]) -> Result<f64, MetricsError> {
    check(pred, gt, valid)?;
    let last = valid.iter().rposition(|v| *v).ok_or(MetricsError::NoValidSteps)?;
    Ok(disp(pred[last], gt[last]))
}

pub fn miss(pred: &[Point], gt: &[Point], valid: &[bool]) -> Result<bool, MetricsError> {
    Ok(fde(pred, gt, valid)? > MISS_THRESHOLD_M)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub avgmin_ade: f64,
    pub avgmin_fde: f64,
    pub avg_mr: f64,
    pub n_agents: usize,
}

/// Scores the first `k` modes of every set: min-ADE and min-FDE are taken
/// independently, the miss flag follows the min-FDE mode.
pub fn evaluate(preds: &[PredictionSet], k: usize) -> Result<MetricsReport, MetricsError> {
    let (mut sa, mut sf, mut sm) = (0.0, 0.0, 0.0);
    for p in preds {
        if k == 0 || p.modes.len() < k {
            return Err(MetricsError::InsufficientModes { id: p.scenario_id.clone(), have: p.modes.len(), need: k.max(1) });
        }
        let mut best_ade = f64::INFINITY;
        let mut best_fde = f64::INFINITY;
        for m in &p.modes[..k] {
            best_ade = best_ade.min(ade(m, &p.gt, &p.valid)?);
            best_fde = best_fde.min(fde(m, &p.gt, &p.valid)?);
        }
        sa += best_ade;
        sf += best_fde;
        if best_fde > MISS_THRESHOLD_M {
            sm += 1.0;
        }
    }
    let n = preds.len();
    let avg = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(MetricsReport { k, avgmin_ade: avg(sa), avgmin_fde: avg(sf), avg_mr: avg(sm), n_agents: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(modes: Vec<Vec<Point>>, gt: Vec<Point>) -> PredictionSet {
        let valid = vec![true; gt.len()];
        PredictionSet { scenario_id: "t".into(), station_id: 0, modes, gt, valid }
    }

    #[test]
    fn ade_examples() {
        let gt = vec![(0.0, 0.0), (1.0, 0.0)];
        assert_eq!(ade(&gt, &gt, &[true, true]).unwrap(), 0.0);
        assert_eq!(ade(&[(0.0, 1.0); 2], &[(0.0, 0.0); 2], &[true, true]).unwrap(), 1.0);
        assert_eq!(ade(&[(3.0, 4.0), (1.0, 0.0)], &gt, &[true, true]).unwrap(), 2.5);
        assert_eq!(ade(&gt, &gt, &[false, false]), Err(MetricsError::NoValidSteps));
    }

    #[test]
    fn fde_uses_last_valid_step() {
        let gt: Vec<Point> = (0..60).map(|i| (i as f64, 0.0)).collect();
        let pred: Vec<Point> = (0..60).map(|i| (i as f64, i as f64)).collect();
        let mut valid = vec![true; 60];
        assert_eq!(fde(&pred, &gt, &valid).unwrap(), 59.0);
        for v in &mut valid[41..] {
            *v = false;
        }
        assert_eq!(fde(&pred, &gt, &valid).unwrap(), 40.0);
        assert_eq!(fde(&[(3.0, 4.0)], &[(0.0, 0.0)], &[true]).unwrap(), 5.0);
    }

    #[test]
    fn miss_boundary() {
        let gt = [(0.0, 0.0)];
        assert!(!miss(&[(1.99, 0.0)], &gt, &[true]).unwrap());
        assert!(!miss(&[(2.0, 0.0)], &gt, &[true]).unwrap());
        assert!(miss(&[(2.01, 0.0)], &gt, &[true]).unwrap());
    }

    #[test]
    fn min_selection_and_mean() {
        let gt = vec![(0.0, 0.0)];
        let p = set(vec![vec![(5.0, 0.0)], vec![(1.0, 0.0)]], gt.clone());
        let r = evaluate(&[p.clone()], 2).unwrap();
        assert_eq!((r.avgmin_fde, r.avg_mr), (1.0, 0.0));
        let r1 = evaluate(&[p], 1).unwrap();
        assert_eq!((r1.avgmin_fde, r1.avg_mr), (5.0, 1.0));

        let a = set(vec![vec![(1.0, 0.0)]], gt.clone());
        let b = set(vec![vec![(3.0, 0.0)]], gt);
        assert_eq!(evaluate(&[a, b], 1).unwrap().avgmin_ade, 2.0);
    }

    #[test]
    fn min_ade_and_min_fde_may_pick_different_modes() {
        let gt = vec![(0.0, 0.0), (0.0, 0.0)];
        let m0 = vec![(0.0, 0.0), (3.0, 0.0)];
        let m1 = vec![(2.0, 0.0), (1.0, 0.0)];
        let r = evaluate(&[set(vec![m0, m1], gt)], 2).unwrap();
        assert_eq!((r.avgmin_ade, r.avgmin_fde), (1.5, 1.0));
    }

    #[test]
    fn too_few_modes() {
        let p = set(vec![vec![(0.0, 0.0)]], vec![(0.0, 0.0)]);
        assert!(matches!(evaluate(&[p], 6), Err(MetricsError::InsufficientModes { have: 1, need: 6, .. })));
    }

    #[test]
    fn report_json_shape() {
        let r = MetricsReport { k: 6, avgmin_ade: 1.0, avgmin_fde: 2.0, avg_mr: 0.5, n_agents: 3 };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["k", "avgmin_ade", "avgmin_fde", "avg_mr", "n_agents"] {
            assert!(v.get(key).is_some());
        }
    }

    fn traj(n: usize) -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), n)
    }

    proptest! {
        #[test]
        fn translation_invariance(p in traj(8), g in traj(8), dx in -1e4..1e4f64, dy in -1e4..1e4f64) {
            let v = vec![true; 8];
            let sh = |t: &[Point]| t.iter().map(|q| (q.0 + dx, q.1 + dy)).collect::<Vec<_>>();
            let (a, b) = (ade(&p, &g, &v).unwrap(), ade(&sh(&p), &sh(&g), &v).unwrap());
            prop_assert!((a - b).abs() < 1e-9);
            let (a, b) = (fde(&p, &g, &v).unwrap(), fde(&sh(&p), &sh(&g), &v).unwrap());
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn metrics_are_bounded(modes in prop::collection::vec(traj(5), 1..4), g in traj(5)) {
            let k = modes.len();
            let r = evaluate(&[set(modes, g)], k).unwrap();
            prop_assert!(r.avgmin_ade >= 0.0 && r.avgmin_fde >= 0.0);
            prop_assert!((0.0..=1.0).contains(&r.avg_mr));
        }
    }
}
