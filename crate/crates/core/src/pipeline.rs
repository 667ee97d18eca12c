//! End-to-end conversions between CAM record streams and scenario sets.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::cam::{self, CamError, CamRecord, RawCamRecord};
use crate::geo::{Heading, UtmZone};
use crate::scenario::{mine_scenarios, validate_scenario, Scenario, Violation};
use crate::track::{build_tracks, densify, resample_10hz, Track, TrackRate, TrackSample, GRID_MS};

#[derive(Debug, Clone, Serialize)]
pub struct RejectedScenario {
    pub id: String,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestReport {
    pub input_records: usize,
    pub tracks: usize,
    #[serde(skip)]
    pub scenarios: Vec<Scenario>,
    pub accepted: usize,
    pub rejected: Vec<RejectedScenario>,
}

/// Grid tracks obtained from raw records: assembly, densification, resampling.
pub fn grid_tracks(records: Vec<RawCamRecord>) -> Vec<Track> {
    build_tracks(records)
        .iter()
        .map(|t| resample_10hz(&densify(t)))
        .filter(|t| !t.samples.is_empty())
        .collect()
}

/// Runs the whole record-to-scenario pipeline. Scenarios failing validation
/// are logged and left out of `scenarios`.
pub fn ingest_records(records: Vec<RawCamRecord>, stride: usize) -> IngestReport {
    let input_records = records.len();
    let tracks = grid_tracks(records);
    let mut report = IngestReport { input_records, tracks: tracks.len(), ..Default::default() };
    for s in mine_scenarios(&tracks, stride) {
        let violations = validate_scenario(&s);
        if violations.is_empty() {
            report.scenarios.push(s);
        } else {
            log::info!("dropping scenario {}: {} violation(s)", s.id, violations.len());
            report.rejected.push(RejectedScenario { id: s.id, violations });
        }
    }
    report.accepted = report.scenarios.len();
    report
}

/// Re-expresses dense scenario data as the CAM stream each station would
/// have broadcast. Windows of the same station are merged on the grid first
/// (earliest scenario wins on overlap), then each gap-free run is replayed
/// through the generation rules.
pub fn camify(scenarios: &[Scenario]) -> Result<Vec<CamRecord>, CamError> {
    let mut per_station: BTreeMap<(u32, UtmZone), BTreeMap<u64, TrackSample>> = BTreeMap::new();
    for s in scenarios {
        let zone = s.utm_zone();
        for a in &s.agents {
            let slots = per_station.entry((a.station_id, zone)).or_default();
            for (k, (st, v)) in a.states.iter().zip(&a.valid).enumerate() {
                if !v {
                    continue;
                }
                let t_ms = s.anchor_t_ms + k as u64 * GRID_MS;
                let speed = a.speed.as_ref().map_or(st[2].hypot(st[3]), |sp| sp[k]);
                slots.entry(t_ms).or_insert(TrackSample {
                    t_ms,
                    x: st[0],
                    y: st[1],
                    speed,
                    heading: Heading::from_yaw(st[4]),
                });
            }
        }
    }
    let mut out = Vec::new();
    for ((station_id, zone), slots) in per_station {
        let mut run: Vec<TrackSample> = Vec::new();
        let mut flush = |run: &mut Vec<TrackSample>| -> Result<(), CamError> {
            if run.is_empty() {
                return Ok(());
            }
            let track = Track {
                station_id,
                zone,
                samples: std::mem::take(run),
                rate: TrackRate::Fixed10Hz,
                splits: Vec::new(),
            };
            out.extend(cam::simulate_cam_stream(&track)?);
            Ok(())
        };
        for (t, sample) in slots {
            if run.last().is_some_and(|p| t - p.t_ms != GRID_MS) {
                flush(&mut run)?;
            }
            run.push(sample);
        }
        flush(&mut run)?;
    }
    out.sort_by_key(|r| (r.t_ms, r.station_id));
    Ok(out)
}
