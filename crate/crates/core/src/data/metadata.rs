//! `frame,class,track,azimuth,elevation` label files (no header, 0.1 s frames).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SeldError};
use crate::spatial::{wrap_azimuth, Doa};

pub const N_CLASSES: usize = 13;
/// Label frames per second.
pub const LABEL_RATE: usize = 10;

/// One labeled event at one 0.1 s label frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventFrame {
    pub frame: usize,
    pub class: usize,
    pub track: usize,
    /// Degrees, `[-180, 180)`.
    pub azimuth: f64,
    /// Degrees, `[-90, 90]`.
    pub elevation: f64,
}

impl EventFrame {
    pub fn new(frame: usize, class: usize, track: usize, azimuth: f64, elevation: f64) -> Self {
        EventFrame { frame, class, track, azimuth, elevation }
    }

    pub fn from_doa(frame: usize, class: usize, track: usize, doa: &Doa) -> Self {
        EventFrame::new(frame, class, track, doa.azimuth(), doa.elevation())
    }

    pub fn doa(&self) -> Doa {
        Doa::from_degrees(self.azimuth, self.elevation)
    }

    fn sort_key(&self) -> (usize, usize, usize) {
        (self.frame, self.class, self.track)
    }
}

pub fn sort_events(events: &mut [EventFrame]) {
    events.sort_by(|a, b| {
        a.sort_key()
            .cmp(&b.sort_key())
            .then(a.azimuth.total_cmp(&b.azimuth))
            .then(a.elevation.total_cmp(&b.elevation))
    });
}

pub fn parse_metadata(text: &str) -> Result<Vec<EventFrame>> {
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(SeldError::Parse {
                line,
                msg: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let int = |k: usize, name: &str| -> Result<usize> {
            fields[k].parse::<usize>().map_err(|e| SeldError::Parse {
                line,
                msg: format!("{name} {:?}: {e}", fields[k]),
            })
        };
        let real = |k: usize, name: &str| -> Result<f64> {
            let v = fields[k].parse::<f64>().map_err(|e| SeldError::Parse {
                line,
                msg: format!("{name} {:?}: {e}", fields[k]),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(SeldError::Parse { line, msg: format!("{name} is not finite") })
            }
        };
        let (frame, class, track) = (int(0, "frame")?, int(1, "class")?, int(2, "track")?);
        if class >= N_CLASSES {
            return Err(SeldError::Validation(format!(
                "line {line}: class {class} outside 0..{N_CLASSES}"
            )));
        }
        let azimuth = wrap_azimuth(real(3, "azimuth")?);
        let mut elevation = real(4, "elevation")?;
        if !(-90.0..=90.0).contains(&elevation) {
            log::warn!("line {line}: elevation {elevation} clamped to [-90, 90]");
            elevation = elevation.clamp(-90.0, 90.0);
        }
        events.push(EventFrame { frame, class, track, azimuth, elevation });
    }
    sort_events(&mut events);
    Ok(events)
}

pub fn format_metadata(events: &[EventFrame]) -> String {
    let mut out = String::new();
    for e in events {
        writeln!(out, "{},{},{},{},{}", e.frame, e.class, e.track, e.azimuth, e.elevation)
            .expect("writing to a String cannot fail");
    }
    out
}
