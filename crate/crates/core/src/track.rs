//! Per-station planar tracks and the two interpolation stages that bring
//! irregular CAM arrivals onto a shared 10 Hz grid.

use std::collections::BTreeMap;

use crate::cam::{self, RawCamRecord};
use crate::geo::{self, Heading, UtmZone};

/// Grid spacing in milliseconds.
pub const GRID_MS: u64 = 100;
/// Largest arrival gap the first interpolation stage will bridge.
pub const MAX_DENSIFY_GAP_MS: u64 = 1000;
/// Largest distance from a grid instant to a usable neighbour when resampling.
pub const MAX_RESAMPLE_NEIGHBOR_MS: u64 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackRate {
    Irregular,
    Fixed10Hz,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSample {
    pub t_ms: u64,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    pub heading: Heading,
}

impl TrackSample {
    /// Linear blend; heading follows the shorter arc.
    fn lerp(&self, other: &TrackSample, t_ms: u64) -> TrackSample {
        let w = (t_ms - self.t_ms) as f64 / (other.t_ms - self.t_ms) as f64;
        TrackSample {
            t_ms,
            x: self.x + w * (other.x - self.x),
            y: self.y + w * (other.y - self.y),
            speed: self.speed + w * (other.speed - self.speed),
            heading: self.heading.lerp(other.heading, w),
        }
    }
}

/// A single station's time series, strictly increasing in time, with all
/// positions expressed in one UTM zone.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub station_id: u32,
    pub zone: UtmZone,
    pub samples: Vec<TrackSample>,
    pub rate: TrackRate,
    /// Sample indices `i` where the gap from `i - 1` was too long to bridge.
    pub splits: Vec<usize>,
}

/// Groups records by station, de-duplicates, projects to the zone of each
/// station's earliest record and sorts by time. Stations left without any
/// complete record produce no track.
pub fn build_tracks(records: Vec<RawCamRecord>) -> Vec<Track> {
    let mut groups: BTreeMap<u32, Vec<RawCamRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.station_id).or_default().push(r);
    }
    groups
        .into_iter()
        .filter_map(|(station_id, recs)| {
            let mut cams = cam::dedup(recs);
            if cams.is_empty() {
                return None;
            }
            cams.sort_by_key(|c| c.t_ms);
            let zone = match cam::station_zone(&cams[0]) {
                Ok(z) => z,
                Err(e) => {
                    log::warn!("station {station_id}: {e}");
                    return None;
                }
            };
            let mut samples = Vec::with_capacity(cams.len());
            for c in &cams {
                match geo::to_utm(c.pos, Some(zone.number)) {
                    Ok(mut u) => {
                        if u.zone.hemisphere != zone.hemisphere {
                            // Keep one false-northing convention across the equator.
                            u.northing += match zone.hemisphere {
                                geo::Hemisphere::South => geo::FALSE_NORTHING_SOUTH,
                                geo::Hemisphere::North => -geo::FALSE_NORTHING_SOUTH,
                            };
                        }
                        samples.push(TrackSample {
                            t_ms: c.t_ms,
                            x: u.easting,
                            y: u.northing,
                            speed: c.speed,
                            heading: c.heading,
                        });
                    }
                    Err(e) => log::warn!("station {station_id} at {} ms: {e}", c.t_ms),
                }
            }
            if samples.is_empty() {
                return None;
            }
            Some(Track { station_id, zone, samples, rate: TrackRate::Irregular, splits: Vec::new() })
        })
        .collect()
}

/// First interpolation stage: fills every gap of at most one second with
/// samples on a 100 ms lattice anchored at the earlier sample. Longer gaps
/// are left open and recorded as split points.
pub fn densify(track: &Track) -> Track {
    let mut samples = Vec::with_capacity(track.samples.len() * 2);
    let mut splits = Vec::new();
    for (i, s) in track.samples.iter().enumerate() {
        if i > 0 {
            let prev = &track.samples[i - 1];
            let gap = s.t_ms - prev.t_ms;
            if gap <= MAX_DENSIFY_GAP_MS {
                let mut t = prev.t_ms + GRID_MS;
                while t < s.t_ms {
                    samples.push(prev.lerp(s, t));
                    t += GRID_MS;
                }
            } else {
                splits.push(samples.len());
            }
        }
        samples.push(*s);
    }
    Track { samples, splits, ..track.clone() }
}

/// Second interpolation stage: evaluates the track on the global grid
/// (`t ≡ 0 mod 100 ms`). Off-grid instants are interpolated between the
/// bracketing samples when both lie within 200 ms.
pub fn resample_10hz(track: &Track) -> Track {
    let s = &track.samples;
    let mut out: Vec<TrackSample> = Vec::new();
    let mut splits = Vec::new();
    if let (Some(first), Some(last)) = (s.first(), s.last()) {
        let mut t = first.t_ms.div_ceil(GRID_MS) * GRID_MS;
        let mut j = 0usize;
        while t <= last.t_ms {
            while j + 1 < s.len() && s[j + 1].t_ms <= t {
                j += 1;
            }
            let sample = if s[j].t_ms == t {
                Some(s[j])
            } else if j + 1 < s.len() && s[j].t_ms < t {
                let (a, b) = (&s[j], &s[j + 1]);
                (t - a.t_ms <= MAX_RESAMPLE_NEIGHBOR_MS && b.t_ms - t <= MAX_RESAMPLE_NEIGHBOR_MS)
                    .then(|| a.lerp(b, t))
            } else {
                None
            };
            if let Some(sample) = sample {
                if let Some(prev) = out.last() {
                    if sample.t_ms - prev.t_ms != GRID_MS {
                        splits.push(out.len());
                    }
                }
                out.push(sample);
            }
            t += GRID_MS;
        }
    }
    Track { samples: out, splits, rate: TrackRate::Fixed10Hz, ..track.clone() }
}
