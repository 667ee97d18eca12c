//! Cooperative Awareness Message records and the kinematic generation rules.
//!
//! A station emits a CAM when, relative to its last emitted CAM, more than
//! 1 s has elapsed, it moved more than 4 m, turned more than 4°, or changed
//! speed by more than 0.5 m/s; emissions are never closer than 100 ms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{self, angle_diff, GeoPoint, Heading, UtmZone};
use crate::track::{Track, TrackRate};

pub const TIME_TRIGGER_MS: u64 = 1000;
pub const POSITION_TRIGGER_M: f64 = 4.0;
pub const HEADING_TRIGGER_DEG: f64 = 4.0;
pub const SPEED_TRIGGER_MPS: f64 = 0.5;
/// Minimum spacing between two emissions (10 Hz cap).
pub const MIN_INTERVAL_MS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CamError {
    #[error("station mismatch: last CAM from {last}, current from {current}")]
    StationMismatch { last: u32, current: u32 },
    #[error("current CAM at {current} ms precedes last CAM at {last} ms")]
    NonMonotonicTime { last: u64, current: u64 },
    #[error("cannot simulate a CAM stream from an empty track")]
    EmptyTrack,
    #[error("track is not sampled at 10 Hz")]
    NotFixedRate,
    #[error(transparent)]
    Geo(#[from] geo::GeoError),
}

/// One received CAM with every mandatory field present.
#[derive(Debug, Clone, PartialEq)]
pub struct CamRecord {
    pub station_id: u32,
    pub t_ms: u64,
    pub pos: GeoPoint,
    pub speed: f64,
    pub heading: Heading,
    pub rsu_id: Option<String>,
}

/// A CAM as read from disk: kinematic fields may be missing.
///
/// This is also the on-disk JSONL/CSV record layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCamRecord {
    pub station_id: u32,
    pub t_ms: u64,
    #[serde(default)]
    pub lat_deg: Option<f64>,
    #[serde(default)]
    pub lon_deg: Option<f64>,
    #[serde(default)]
    pub speed_mps: Option<f64>,
    #[serde(default)]
    pub heading_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rsu_id: Option<String>,
}

impl RawCamRecord {
    /// Converts to a complete record; `None` when a mandatory field is missing.
    pub fn complete(&self) -> Option<CamRecord> {
        let pos = GeoPoint::new(self.lat_deg?, self.lon_deg?).ok()?;
        let speed = self.speed_mps.filter(|s| s.is_finite() && *s >= 0.0)?;
        let heading = self.heading_deg.filter(|h| h.is_finite())?;
        Some(CamRecord {
            station_id: self.station_id,
            t_ms: self.t_ms,
            pos,
            speed,
            heading: Heading::new(heading),
            rsu_id: self.rsu_id.clone(),
        })
    }
}

impl From<CamRecord> for RawCamRecord {
    fn from(r: CamRecord) -> Self {
        Self {
            station_id: r.station_id,
            t_ms: r.t_ms,
            lat_deg: Some(r.pos.lat()),
            lon_deg: Some(r.pos.lon()),
            speed_mps: Some(r.speed),
            heading_deg: Some(r.heading.degrees()),
            rsu_id: r.rsu_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    Time,
    Position,
    Heading,
    Speed,
}

/// Set of triggers that held for a candidate CAM.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TriggerSet(u8);

impl TriggerSet {
    fn bit(t: Trigger) -> u8 {
        match t {
            Trigger::Time => 1,
            Trigger::Position => 2,
            Trigger::Heading => 4,
            Trigger::Speed => 8,
        }
    }

    pub fn insert(&mut self, t: Trigger) {
        self.0 |= Self::bit(t);
    }

    pub fn contains(&self, t: Trigger) -> bool {
        self.0 & Self::bit(t) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = Trigger> + '_ {
        [Trigger::Time, Trigger::Position, Trigger::Heading, Trigger::Speed]
            .into_iter()
            .filter(|t| self.contains(*t))
    }
}

impl FromIterator<Trigger> for TriggerSet {
    fn from_iter<I: IntoIterator<Item = Trigger>>(iter: I) -> Self {
        let mut s = TriggerSet::default();
        for t in iter {
            s.insert(t);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriggerReport {
    pub fired: bool,
    pub reasons: TriggerSet,
    pub suppressed_by_rate_cap: bool,
}

/// Kinematic state in a planar frame, the common ground for trigger checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarState {
    pub t_ms: u64,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    pub heading: Heading,
}

/// Applies the generation rules to two planar states (`last` was emitted).
pub fn check_trigger_planar(last: &PlanarState, current: &PlanarState) -> TriggerReport {
    let dt = current.t_ms.saturating_sub(last.t_ms);
    let mut reasons = TriggerSet::default();
    if dt > TIME_TRIGGER_MS {
        reasons.insert(Trigger::Time);
    }
    if (current.x - last.x).hypot(current.y - last.y) > POSITION_TRIGGER_M {
        reasons.insert(Trigger::Position);
    }
    if angle_diff(current.heading, last.heading) > HEADING_TRIGGER_DEG {
        reasons.insert(Trigger::Heading);
    }
    if (current.speed - last.speed).abs() > SPEED_TRIGGER_MPS {
        reasons.insert(Trigger::Speed);
    }
    let capped = dt < MIN_INTERVAL_MS;
    TriggerReport {
        fired: !reasons.is_empty() && !capped,
        reasons,
        suppressed_by_rate_cap: !reasons.is_empty() && capped,
    }
}

/// Decides whether `current` would be emitted given the last emitted CAM.
/// Displacement is measured in the UTM zone of `last_cam`.
pub fn check_trigger(last_cam: &CamRecord, current: &CamRecord) -> Result<TriggerReport, CamError> {
    if last_cam.station_id != current.station_id {
        return Err(CamError::StationMismatch {
            last: last_cam.station_id,
            current: current.station_id,
        });
    }
    if current.t_ms < last_cam.t_ms {
        return Err(CamError::NonMonotonicTime { last: last_cam.t_ms, current: current.t_ms });
    }
    let a = geo::to_utm(last_cam.pos, None)?;
    let b = geo::to_utm(current.pos, Some(a.zone.number))?;
    let last = PlanarState {
        t_ms: last_cam.t_ms,
        x: a.easting,
        y: a.northing,
        speed: last_cam.speed,
        heading: last_cam.heading,
    };
    let cur = PlanarState {
        t_ms: current.t_ms,
        x: b.easting,
        y: b.northing,
        speed: current.speed,
        heading: current.heading,
    };
    Ok(check_trigger_planar(&last, &cur))
}

/// Indices of the samples a station would emit when driving `states`.
pub fn emission_indices(states: &[PlanarState]) -> Vec<usize> {
    let mut out = Vec::new();
    let Some(first) = states.first() else {
        return out;
    };
    out.push(0);
    let mut last = *first;
    for (i, s) in states.iter().enumerate().skip(1) {
        if check_trigger_planar(&last, s).fired {
            out.push(i);
            last = *s;
        }
    }
    out
}

/// Replays the generation rules over a dense 10 Hz track, returning the CAMs
/// the vehicle would have broadcast.
pub fn simulate_cam_stream(track: &Track) -> Result<Vec<CamRecord>, CamError> {
    if track.samples.is_empty() {
        return Err(CamError::EmptyTrack);
    }
    if track.rate != TrackRate::Fixed10Hz {
        return Err(CamError::NotFixedRate);
    }
    let states: Vec<PlanarState> = track
        .samples
        .iter()
        .map(|s| PlanarState { t_ms: s.t_ms, x: s.x, y: s.y, speed: s.speed, heading: s.heading })
        .collect();
    emission_indices(&states)
        .into_iter()
        .map(|i| {
            let s = &track.samples[i];
            let pos = geo::from_utm(geo::UtmPoint {
                easting: s.x,
                northing: s.y,
                zone: track.zone,
            })?;
            Ok(CamRecord {
                station_id: track.station_id,
                t_ms: s.t_ms,
                pos,
                speed: s.speed,
                heading: s.heading,
                rsu_id: None,
            })
        })
        .collect()
}

/// Keeps the first record for every `(station_id, t_ms)` key, then drops
/// records missing a mandatory field. Input order is otherwise preserved.
pub fn dedup<I>(records: I) -> Vec<CamRecord>
where
    I: IntoIterator<Item = RawCamRecord>,
{
    let mut seen = std::collections::HashSet::new();
    records
        .into_iter()
        .filter(|r| seen.insert((r.station_id, r.t_ms)))
        .filter_map(|r| r.complete())
        .collect()
}

/// Planar zone a station's samples are expressed in.
pub fn station_zone(first: &CamRecord) -> Result<UtmZone, CamError> {
    Ok(geo::to_utm(first.pos, None)?.zone)
}
