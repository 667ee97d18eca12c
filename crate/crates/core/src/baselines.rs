//! Constant velocity baseline.

use thiserror::Error;

use crate::metrics::{Point, PredictionSet};
use crate::scenario::{Scenario, DT, OBS_STEPS, PRED_STEPS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineError {
    #[error("need two valid trailing observations, scenario `{0}`")]
    InsufficientObservation(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvmConfig {
    pub dt: f64,
    pub horizon: usize,
}

impl Default for CvmConfig {
    fn default() -> Self {
        CvmConfig { dt: DT, horizon: PRED_STEPS }
    }
}

/// Extrapolates the velocity implied by the last two observed positions.
pub fn cvm_predict(observed: &[Point], valid: &[bool], cfg: CvmConfig) -> Result<Vec<Point>, BaselineError> {
    let n = observed.len();
    if n < 2 || valid.len() != n || !valid[n - 1] || !valid[n - 2] {
        return Err(BaselineError::InsufficientObservation(String::new()));
    }
    let (a, b) = (observed[n - 2], observed[n - 1]);
    let v = ((b.0 - a.0) / cfg.dt, (b.1 - a.1) / cfg.dt);
    Ok((1..=cfg.horizon)
        .map(|i| {
            let t = i as f64 * cfg.dt;
            (b.0 + t * v.0, b.1 + t * v.1)
        })
        .collect())
}

/// Single-mode prediction for the focal agent of `s`.
pub fn cvm_prediction_set(s: &Scenario) -> Result<PredictionSet, BaselineError> {
    let err = || BaselineError::InsufficientObservation(s.id.clone());
    let focal = s.focal().ok_or_else(err)?;
    let obs: Vec<Point> = (0..OBS_STEPS).map(|k| focal.position(k)).collect();
    let pred = cvm_predict(&obs, &focal.valid[..OBS_STEPS], CvmConfig::default()).map_err(|_| err())?;
    let (gt, valid) = focal.future();
    Ok(PredictionSet { scenario_id: s.id.clone(), station_id: focal.station_id, modes: vec![pred], gt, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate;
    use crate::synth;
    use proptest::prelude::*;

    #[test]
    fn arithmetic_example() {
        let p = cvm_predict(&[(0.0, 0.0), (0.1, 0.0)], &[true, true], CvmConfig::default()).unwrap();
        assert_eq!(p.len(), 60);
        assert!((p[0].0 - 0.2).abs() < 1e-12 && (p[1].0 - 0.3).abs() < 1e-12);
        assert!((p[59].0 - 6.1).abs() < 1e-12 && p[59].1 == 0.0);
    }

    #[test]
    fn stationary_stays_put() {
        let p = cvm_predict(&[(4.0, 2.0), (4.0, 2.0)], &[true, true], CvmConfig::default()).unwrap();
        assert!(p.iter().all(|q| *q == (4.0, 2.0)));
    }

    #[test]
    fn needs_two_valid_trailing_steps() {
        let cfg = CvmConfig::default();
        assert!(cvm_predict(&[(0.0, 0.0)], &[true], cfg).is_err());
        assert!(cvm_predict(&[(0.0, 0.0), (1.0, 0.0)], &[false, true], cfg).is_err());
    }

    #[test]
    fn exact_on_linear_motion() {
        let s = synth::linear_scenario("lin", 13.0, 0.8);
        let r = evaluate(&[cvm_prediction_set(&s).unwrap()], 1).unwrap();
        assert!(r.avgmin_ade < 1e-6 && r.avgmin_fde < 1e-6);
    }

    #[test]
    fn fde_against_a_different_velocity() {
        // Observed at 10 m/s east, truth continues at 12 m/s east.
        let obs: Vec<Point> = (0..50).map(|k| (k as f64, 0.0)).collect();
        let pred = cvm_predict(&obs, &[true; 50], CvmConfig::default()).unwrap();
        let gt: Vec<Point> = (1..=60).map(|i| (49.0 + 1.2 * i as f64, 0.0)).collect();
        let fde = crate::metrics::fde(&pred, &gt, &[true; 60]).unwrap();
        assert!((fde - 60.0 * 0.1 * 2.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn rigid_equivariance(
            a in (-20.0..20.0f64, -20.0..20.0f64),
            b in (-20.0..20.0f64, -20.0..20.0f64),
            th in -3.2..3.2f64,
            tx in -100.0..100.0f64,
            ty in -100.0..100.0f64,
        ) {
            let (c, s) = (th.cos(), th.sin());
            let f = |p: Point| (c * p.0 - s * p.1 + tx, s * p.0 + c * p.1 + ty);
            let cfg = CvmConfig::default();
            let p = cvm_predict(&[a, b], &[true, true], cfg).unwrap();
            let q = cvm_predict(&[f(a), f(b)], &[true, true], cfg).unwrap();
            for (u, w) in p.iter().zip(&q) {
                let fu = f(*u);
                prop_assert!((fu.0 - w.0).abs() < 1e-9 && (fu.1 - w.1).abs() < 1e-9);
            }
        }
    }
}
