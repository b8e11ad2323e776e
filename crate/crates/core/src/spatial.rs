//! Direction-of-arrival geometry, the first-order Ambisonics plane-wave
//! encoder, and the eight channel-swap transforms.
//!
//! Coordinates: x points to azimuth 0°, y to azimuth +90°, z up.

use serde::{Deserialize, Serialize};

use crate::dsp::FeatureClip;
use crate::error::{Result, SeldError};

/// A direction of arrival, stored as a unit vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Doa {
    v: [f64; 3],
}

impl Doa {
    pub fn from_degrees(azimuth: f64, elevation: f64) -> Doa {
        Doa { v: doa_to_vec(azimuth, elevation) }
    }

    /// Normalizes `v`; fails for vectors too short to carry a direction.
    pub fn from_vec(v: [f64; 3]) -> Result<Doa> {
        let n = norm(v);
        if n <= 1e-6 {
            return Err(SeldError::UndefinedDirection(n));
        }
        Ok(Doa { v: [v[0] / n, v[1] / n, v[2] / n] })
    }

    pub fn vec(&self) -> [f64; 3] {
        self.v
    }

    pub fn azimuth(&self) -> f64 {
        vec_to_doa(self.v).expect("unit vector").0
    }

    pub fn elevation(&self) -> f64 {
        vec_to_doa(self.v).expect("unit vector").1
    }

    pub fn angle_to(&self, other: &Doa) -> f64 {
        angular_distance(self.v, other.v)
    }
}

pub fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn doa_to_vec(azimuth: f64, elevation: f64) -> [f64; 3] {
    let (az, el) = (azimuth.to_radians(), elevation.to_radians());
    [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
}

/// Azimuth in `[-180, 180)` and elevation in `[-90, 90]`, in degrees.
pub fn vec_to_doa(v: [f64; 3]) -> Result<(f64, f64)> {
    let n = norm(v);
    if n <= 1e-6 {
        return Err(SeldError::UndefinedDirection(n));
    }
    let az = wrap_azimuth(v[1].atan2(v[0]).to_degrees());
    let el = v[2].atan2(v[0].hypot(v[1])).to_degrees();
    Ok((az, el))
}

pub fn wrap_azimuth(az: f64) -> f64 {
    if (-180.0..180.0).contains(&az) {
        return az;
    }
    let w = (az + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360
    if w >= 180.0 { w - 360.0 } else { w }
}

/// Angle between two nonzero vectors, in degrees. Uses `atan2(|u×v|, u·v)`,
/// which stays accurate for nearly parallel vectors.
pub fn angular_distance(u: [f64; 3], v: [f64; 3]) -> f64 {
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let cross = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    norm(cross).atan2(dot).to_degrees()
}

/// First-order Ambisonics plane wave, SN3D with unit-gain W. Channels are
/// returned in `[W, X, Y, Z]` order.
pub fn encode_foa_plane_wave(mono: &[f32], doa: &Doa) -> [Vec<f32>; 4] {
    let [x, y, z] = doa.vec();
    let gain = |g: f64| mono.iter().map(|&s| (s as f64 * g) as f32).collect::<Vec<f32>>();
    [mono.to_vec(), gain(x), gain(y), gain(z)]
}

/// One of the eight FoA channel-swap patterns: an azimuth rotation by a
/// multiple of 90° optionally combined with an elevation flip.
///
/// | id | azimuth map  | elevation |
/// |----|--------------|-----------|
/// | 0  | az           | el        |
/// | 1  | az + 90°     | el        |
/// | 2  | az − 90°     | el        |
/// | 3  | az + 180°    | el        |
/// | 4–7| as 0–3       | −el       |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelTransform(u8);

impl ChannelTransform {
    pub const COUNT: u8 = 8;
    pub const IDENTITY: ChannelTransform = ChannelTransform(0);

    pub fn from_id(id: u8) -> Result<Self> {
        if id < Self::COUNT {
            Ok(ChannelTransform(id))
        } else {
            Err(SeldError::Config(format!("unknown channel transform id {id}")))
        }
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = ChannelTransform> {
        (0..Self::COUNT).map(ChannelTransform)
    }

    /// `(source axis, sign)` for each output axis x, y, z.
    pub fn axis_map(self) -> [(usize, f64); 3] {
        let z_sign = if self.0 >= 4 { -1.0 } else { 1.0 };
        let [xm, ym] = match self.0 % 4 {
            0 => [(0, 1.0), (1, 1.0)],
            // rotate +90°: (x, y) → (−y, x)
            1 => [(1, -1.0), (0, 1.0)],
            // rotate −90°: (x, y) → (y, −x)
            2 => [(1, 1.0), (0, -1.0)],
            _ => [(0, -1.0), (1, -1.0)],
        };
        [xm, ym, (2, z_sign)]
    }

    pub fn inverse(self) -> ChannelTransform {
        let rot = match self.0 % 4 {
            1 => 2,
            2 => 1,
            r => r,
        };
        ChannelTransform(rot + (self.0 / 4) * 4)
    }

    pub fn apply_vec(self, v: [f64; 3]) -> [f64; 3] {
        self.axis_map().map(|(src, sign)| sign * v[src])
    }

    pub fn apply_vec_f32(self, v: [f32; 3]) -> [f32; 3] {
        self.axis_map().map(|(src, sign)| if sign < 0.0 { -v[src] } else { v[src] })
    }

    pub fn apply_doa(self, doa: &Doa) -> Doa {
        Doa { v: self.apply_vec(doa.vec()) }
    }

    /// Applies the map to one `[7, ...]` feature block laid out as log-mel
    /// W, X, Y, Z then intensity x, y, z. Directional log-mel channels are
    /// permuted (they are sign-invariant); intensity channels are permuted
    /// and sign-flipped.
    pub fn apply_feature_block(self, block: &mut [f32]) -> Result<()> {
        if !block.len().is_multiple_of(7) {
            return Err(SeldError::dim("apply_feature_block", &[block.len()], &[7]));
        }
        let plane = block.len() / 7;
        let src = block.to_vec();
        for (d, (from, sign)) in self.axis_map().into_iter().enumerate() {
            let mel = &src[(1 + from) * plane..(2 + from) * plane];
            block[(1 + d) * plane..(2 + d) * plane].copy_from_slice(mel);
            let iv = &src[(4 + from) * plane..(5 + from) * plane];
            let out = &mut block[(4 + d) * plane..(5 + d) * plane];
            if sign < 0.0 {
                out.iter_mut().zip(iv).for_each(|(o, &v)| *o = -v);
            } else {
                out.copy_from_slice(iv);
            }
        }
        Ok(())
    }

    pub fn apply_clip(self, clip: &FeatureClip) -> Result<FeatureClip> {
        let mut data = clip.data.clone();
        self.apply_feature_block(data.data_mut())?;
        FeatureClip::new(data, clip.hop_seconds)
    }

    /// Rotates every `(x, y, z)` triple of ACCDOA-style vectors in place.
    pub fn apply_accdoa(self, v: &mut [f32]) {
        for c in v.chunks_exact_mut(3) {
            let r = self.apply_vec_f32([c[0], c[1], c[2]]);
            c.copy_from_slice(&r);
        }
    }

    /// Applies the map to `[W, X, Y, Z]` channels.
    pub fn apply_wave(self, wave: &[Vec<f32>; 4]) -> [Vec<f32>; 4] {
        let dirs = [&wave[1], &wave[2], &wave[3]];
        let map = self.axis_map();
        let ch = |d: usize| {
            let (src, sign) = map[d];
            if sign < 0.0 {
                dirs[src].iter().map(|&s| -s).collect()
            } else {
                dirs[src].clone()
            }
        };
        [wave[0].clone(), ch(0), ch(1), ch(2)]
    }
}
