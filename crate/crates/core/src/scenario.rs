//! Fixed-length multi-agent scenarios: 50 observed plus 60 future steps at 10 Hz.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{self, Hemisphere, UtmZone};
use crate::track::{Track, TrackRate, GRID_MS};

pub const OBS_STEPS: usize = 50;
pub const PRED_STEPS: usize = 60;
pub const SCENARIO_STEPS: usize = OBS_STEPS + PRED_STEPS;
/// Grid step in seconds.
pub const DT: f64 = 0.1;
/// Default mining stride: back-to-back, non-overlapping windows.
pub const DEFAULT_STRIDE: usize = SCENARIO_STEPS;

pub const MAX_SPEED_MPS: f64 = 70.0;
pub const MAX_SPEED_MISMATCH_M: f64 = 5.0;
pub const MAX_STEP_DISPLACEMENT_M: f64 = 20.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed scenario {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

/// `[x, y, vx, vy, yaw]`: metres, m/s and radians counter-clockwise from +x.
pub type AgentState = [f64; 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub station_id: u32,
    pub states: Vec<AgentState>,
    pub valid: Vec<bool>,
    pub focal: bool,
    /// Speeds reported by the station itself, kept for consistency checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<Vec<f64>>,
}

impl AgentTrack {
    pub fn position(&self, step: usize) -> (f64, f64) {
        let s = &self.states[step];
        (s[0], s[1])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Future positions and their validity.
    pub fn future(&self) -> (Vec<(f64, f64)>, Vec<bool>) {
        let pos = (OBS_STEPS..SCENARIO_STEPS).map(|i| self.position(i)).collect();
        (pos, self.valid[OBS_STEPS..].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub zone: u8,
    pub hemisphere: Hemisphere,
    pub anchor_t_ms: u64,
    pub agents: Vec<AgentTrack>,
}

impl Scenario {
    pub fn utm_zone(&self) -> UtmZone {
        UtmZone { number: self.zone, hemisphere: self.hemisphere }
    }

    pub fn focal_index(&self) -> Option<usize> {
        self.agents.iter().position(|a| a.focal)
    }

    pub fn focal(&self) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.focal)
    }

    /// Checks the structural invariants of the file format.
    pub fn check_structure(&self) -> Result<(), String> {
        if self.agents.is_empty() {
            return Err("no agents".into());
        }
        let mut focal = 0;
        for a in &self.agents {
            if a.states.len() != SCENARIO_STEPS || a.valid.len() != SCENARIO_STEPS {
                return Err(format!("agent {} does not have {SCENARIO_STEPS} slots", a.station_id));
            }
            if let Some(sp) = &a.speed {
                if sp.len() != SCENARIO_STEPS {
                    return Err(format!("agent {} speed length {}", a.station_id, sp.len()));
                }
            }
            for (s, v) in a.states.iter().zip(&a.valid) {
                if s.iter().any(|x| !x.is_finite()) {
                    return Err(format!("agent {} has non-finite state", a.station_id));
                }
                if !v && s.iter().any(|x| *x != 0.0) {
                    return Err(format!("agent {} invalid slot is not zeroed", a.station_id));
                }
            }
            if a.focal {
                focal += 1;
                if a.valid.iter().any(|v| !v) {
                    return Err(format!("focal agent {} is not valid at every step", a.station_id));
                }
            }
        }
        if focal != 1 {
            return Err(format!("expected exactly one focal agent, found {focal}"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scenario serialises")
    }

    pub fn from_json(s: &str) -> Result<Self, String> {
        let sc: Scenario = serde_json::from_str(s).map_err(|e| e.to_string())?;
        sc.check_structure()?;
        Ok(sc)
    }
}

/// Per-sample grid velocity of a fixed-rate track: central differences where
/// both grid neighbours exist, one-sided at run ends, and the reported speed
/// along the heading for an isolated sample.
fn grid_velocities(track: &Track) -> Vec<(f64, f64)> {
    let s = &track.samples;
    (0..s.len())
        .map(|i| {
            let prev = (i > 0 && s[i].t_ms - s[i - 1].t_ms == GRID_MS).then(|| &s[i - 1]);
            let next = (i + 1 < s.len() && s[i + 1].t_ms - s[i].t_ms == GRID_MS).then(|| &s[i + 1]);
            match (prev, next) {
                (Some(p), Some(n)) => ((n.x - p.x) / (2.0 * DT), (n.y - p.y) / (2.0 * DT)),
                (Some(p), None) => ((s[i].x - p.x) / DT, (s[i].y - p.y) / DT),
                (None, Some(n)) => ((n.x - s[i].x) / DT, (n.y - s[i].y) / DT),
                (None, None) => {
                    let yaw = s[i].heading.to_yaw();
                    (s[i].speed * yaw.cos(), s[i].speed * yaw.sin())
                }
            }
        })
        .collect()
}

/// Gap-free run on the grid, in grid indices (inclusive).
#[derive(Debug, Clone, Copy)]
struct Run {
    track: usize,
    start: u64,
    end: u64,
}

fn runs_of(idx: usize, track: &Track) -> Vec<Run> {
    let mut out = Vec::new();
    let mut iter = track.samples.iter().map(|s| s.t_ms / GRID_MS);
    let Some(first) = iter.next() else {
        return out;
    };
    let (mut start, mut end) = (first, first);
    for g in iter {
        if g == end + 1 {
            end = g;
        } else {
            out.push(Run { track: idx, start, end });
            start = g;
            end = g;
        }
    }
    out.push(Run { track: idx, start, end });
    out
}

struct GridTrack<'a> {
    track: &'a Track,
    by_step: HashMap<u64, usize>,
    velocity: Vec<(f64, f64)>,
}

/// Mines 110-step windows, advancing `stride` steps after each hit. A window
/// qualifies when at least one track covers all of its slots; the covering
/// track with the lowest station id becomes the focal agent and every other
/// track with at least one sample in the window joins with a validity mask.
pub fn mine_scenarios(tracks: &[Track], stride: usize) -> Vec<Scenario> {
    let stride = stride.max(1) as u64;
    let span = SCENARIO_STEPS as u64;
    let grid: Vec<GridTrack> = tracks
        .iter()
        .map(|t| {
            debug_assert_eq!(t.rate, TrackRate::Fixed10Hz);
            GridTrack {
                track: t,
                by_step: t.samples.iter().enumerate().map(|(i, s)| (s.t_ms / GRID_MS, i)).collect(),
                velocity: grid_velocities(t),
            }
        })
        .collect();
    let runs: Vec<Run> = tracks
        .iter()
        .enumerate()
        .flat_map(|(i, t)| runs_of(i, t))
        .filter(|r| r.end + 1 - r.start >= span)
        .collect();
    let Some(mut cursor) = runs.iter().map(|r| r.start).min() else {
        return Vec::new();
    };

    let mut reprojected: HashMap<(usize, UtmZone), Option<Track>> = HashMap::new();
    let mut out = Vec::new();
    while let Some(anchor) =
        runs.iter().filter(|r| r.end + 1 >= cursor + span).map(|r| r.start.max(cursor)).min()
    {
        let focal = runs
            .iter()
            .filter(|r| r.start <= anchor && r.end + 1 >= anchor + span)
            .map(|r| r.track)
            .min_by_key(|i| (tracks[*i].station_id, *i))
            .expect("anchor comes from a covering run");
        let zone = tracks[focal].zone;

        let mut agents = vec![window_agent(&grid[focal], anchor, true)];
        let mut others: Vec<usize> = (0..tracks.len())
            .filter(|&i| i != focal)
            .filter(|&i| (anchor..anchor + span).any(|g| grid[i].by_step.contains_key(&g)))
            .collect();
        others.sort_by_key(|i| (tracks[*i].station_id, *i));
        for i in others {
            if tracks[i].zone == zone {
                agents.push(window_agent(&grid[i], anchor, false));
                continue;
            }
            let cached = reprojected
                .entry((i, zone))
                .or_insert_with(|| reproject_track(&tracks[i], zone));
            if let Some(t) = cached {
                let g = GridTrack {
                    track: t,
                    by_step: t.samples.iter().enumerate().map(|(k, s)| (s.t_ms / GRID_MS, k)).collect(),
                    velocity: grid_velocities(t),
                };
                agents.push(window_agent(&g, anchor, false));
            }
        }
        agents.retain(|a| a.valid_count() > 0);

        let anchor_t_ms = anchor * GRID_MS;
        out.push(Scenario {
            id: format!("{}_{}", tracks[focal].station_id, anchor_t_ms),
            zone: zone.number,
            hemisphere: zone.hemisphere,
            anchor_t_ms,
            agents,
        });
        cursor = anchor + stride;
    }
    out
}

fn window_agent(g: &GridTrack, anchor: u64, focal: bool) -> AgentTrack {
    let mut states = vec![[0.0; 5]; SCENARIO_STEPS];
    let mut valid = vec![false; SCENARIO_STEPS];
    let mut speed = vec![0.0; SCENARIO_STEPS];
    for k in 0..SCENARIO_STEPS {
        if let Some(&i) = g.by_step.get(&(anchor + k as u64)) {
            let s = &g.track.samples[i];
            let (vx, vy) = g.velocity[i];
            states[k] = [s.x, s.y, vx, vy, s.heading.to_yaw()];
            valid[k] = true;
            speed[k] = s.speed;
        }
    }
    AgentTrack { station_id: g.track.station_id, states, valid, focal, speed: Some(speed) }
}

fn reproject_track(t: &Track, zone: UtmZone) -> Option<Track> {
    let samples = t
        .samples
        .iter()
        .map(|s| {
            geo::reproject(s.x, s.y, t.zone, zone).map(|(x, y)| crate::track::TrackSample { x, y, ..*s })
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| log::debug!("station {} cannot join zone {}: {e}", t.station_id, zone.number))
        .ok()?;
    Some(Track { samples, zone, ..t.clone() })
}

/// A reason to exclude a scenario from the emitted dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Structure { reason: String },
    SpeedTooHigh { station_id: u32, step: usize, speed: f64 },
    SpeedInconsistent { station_id: u32, step: usize, displacement: f64, expected: f64 },
    Teleport { station_id: u32, step: usize, displacement: f64 },
    DuplicateStation { station_id: u32 },
}

/// Automated sanity rules standing in for manual review of each scene.
pub fn validate_scenario(s: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    if let Err(reason) = s.check_structure() {
        out.push(Violation::Structure { reason });
        return out;
    }
    let mut seen = std::collections::BTreeSet::new();
    for a in &s.agents {
        if !seen.insert(a.station_id) {
            out.push(Violation::DuplicateStation { station_id: a.station_id });
        }
    }
    for a in &s.agents {
        let reported = |i: usize| match &a.speed {
            Some(sp) => sp[i],
            None => a.states[i][2].hypot(a.states[i][3]),
        };
        for i in 0..SCENARIO_STEPS {
            if !a.valid[i] {
                continue;
            }
            let grid_speed = a.states[i][2].hypot(a.states[i][3]);
            let speed = grid_speed.max(reported(i));
            if speed > MAX_SPEED_MPS {
                out.push(Violation::SpeedTooHigh { station_id: a.station_id, step: i, speed });
            }
            if i == 0 || !a.valid[i - 1] {
                continue;
            }
            let (x0, y0) = a.position(i - 1);
            let (x1, y1) = a.position(i);
            let d = (x1 - x0).hypot(y1 - y0);
            if d > MAX_STEP_DISPLACEMENT_M {
                out.push(Violation::Teleport { station_id: a.station_id, step: i, displacement: d });
            }
            let expected = 0.5 * (reported(i - 1) + reported(i)) * DT;
            if (d - expected).abs() > MAX_SPEED_MISMATCH_M {
                out.push(Violation::SpeedInconsistent {
                    station_id: a.station_id,
                    step: i,
                    displacement: d,
                    expected,
                });
            }
        }
    }
    out
}

/// Writes one `<id>.json` per scenario.
pub fn write_scenarios(dir: &Path, scenarios: &[Scenario]) -> Result<(), ScenarioError> {
    fs::create_dir_all(dir).map_err(|source| ScenarioError::Io { path: dir.into(), source })?;
    for s in scenarios {
        let path = dir.join(format!("{}.json", s.id));
        fs::write(&path, s.to_json()).map_err(|source| ScenarioError::Io { path, source })?;
    }
    Ok(())
}

pub fn read_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path)
        .map_err(|source| ScenarioError::Io { path: path.into(), source })?;
    Scenario::from_json(&text).map_err(|reason| ScenarioError::Malformed { path: path.into(), reason })
}

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Loads a scenario set from a directory of `*.json` files (name order), a
/// directory holding `manifest.txt`, or a manifest file. Manifest lines name
/// scenario files relative to the manifest's directory.
pub fn read_scenarios(path: &Path) -> Result<Vec<Scenario>, ScenarioError> {
    let io = |source| ScenarioError::Io { path: path.into(), source };
    let manifest = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    if manifest.is_file() {
        let base = manifest.parent().unwrap_or(Path::new("."));
        let text = fs::read_to_string(&manifest).map_err(io)?;
        return text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| read_scenario(&base.join(l)))
            .collect();
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files.iter().map(|p| read_scenario(p)).collect()
}
