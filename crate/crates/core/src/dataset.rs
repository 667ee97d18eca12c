//! Dataset-level utilities: seeded train/validation split and summary statistics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
}

/// Shuffles under `seed` and cuts at `round(ratio * n)`.
pub fn dataset_split(
    scenarios: Vec<Scenario>,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<Scenario>, Vec<Scenario>), DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidRatio(ratio));
    }
    let mut all = scenarios;
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((all.len() as f64) * ratio).round() as usize;
    let val = all.split_off(cut.min(all.len()));
    Ok((all, val))
}

/// Width of the speed histogram bins, m/s.
pub const SPEED_BIN_MPS: f64 = 1.0;
pub const SPEED_BINS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub scenario_count: usize,
    /// Agents with at least one valid slot → number of scenarios.
    pub agents_histogram: BTreeMap<usize, usize>,
    pub mean_agents: f64,
    pub single_agent_fraction: f64,
    /// Counts of valid agent-steps per 1 m/s bin; the last bin is open-ended.
    pub speed_histogram: Vec<usize>,
    pub mean_speed_mps: f64,
    pub valid_agent_steps: usize,
}

pub fn dataset_stats(scenarios: &[Scenario]) -> StatsReport {
    let mut agents_histogram = BTreeMap::new();
    let mut speed_histogram = vec![0usize; SPEED_BINS];
    let mut speed_sum = 0.0;
    let mut steps = 0usize;
    let mut agent_total = 0usize;
    for s in scenarios {
        let n = s.agents.iter().filter(|a| a.valid_count() > 0).count();
        *agents_histogram.entry(n).or_insert(0) += 1;
        agent_total += n;
        for a in &s.agents {
            for (st, v) in a.states.iter().zip(&a.valid) {
                if !v {
                    continue;
                }
                let speed = st[2].hypot(st[3]);
                let bin = ((speed / SPEED_BIN_MPS) as usize).min(SPEED_BINS - 1);
                speed_histogram[bin] += 1;
                speed_sum += speed;
                steps += 1;
            }
        }
    }
    let count = scenarios.len();
    let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
    StatsReport {
        scenario_count: count,
        mean_agents: ratio(agent_total as f64, count),
        single_agent_fraction: ratio(*agents_histogram.get(&1).unwrap_or(&0) as f64, count),
        agents_histogram,
        speed_histogram,
        mean_speed_mps: ratio(speed_sum, steps),
        valid_agent_steps: steps,
    }
}

impl StatsReport {
    /// Long-format CSV: `table,bin,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("table,bin,count\n");
        for (k, v) in &self.agents_histogram {
            out.push_str(&format!("agents,{k},{v}\n"));
        }
        for (i, v) in self.speed_histogram.iter().enumerate() {
            out.push_str(&format!("speed_mps,{},{v}\n", i as f64 * SPEED_BIN_MPS));
        }
        out
    }
}
