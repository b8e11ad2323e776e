//! ACCDOA / multi-ACCDOA target codecs and the matching losses.
//!
//! Single layout: index `class * 3 + axis` (39 values per frame).
//! Multi layout: index `track * 39 + class * 3 + axis` (117 values per frame).

use serde::{Deserialize, Serialize};

use crate::data::{EventFrame, N_CLASSES};
use crate::error::{Result, SeldError};
use crate::numeric::{Float, Tape, Tensor, Var};
use crate::spatial::{angular_distance, doa_to_vec, norm, vec_to_doa};

pub const N_TRACKS: usize = 3;
pub const SINGLE_DIM: usize = N_CLASSES * 3;
pub const MULTI_DIM: usize = N_TRACKS * SINGLE_DIM;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Same-class multi-ACCDOA tracks closer than this are merged on decode.
pub const MERGE_DEGREES: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetFormat {
    Single,
    Multi,
}

impl TargetFormat {
    pub fn dim(self) -> usize {
        match self {
            TargetFormat::Single => SINGLE_DIM,
            TargetFormat::Multi => MULTI_DIM,
        }
    }
}

impl std::str::FromStr for TargetFormat {
    type Err = SeldError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "accdoa" => Ok(TargetFormat::Single),
            "multi" | "multi-accdoa" => Ok(TargetFormat::Multi),
            _ => Err(SeldError::Config(format!("unknown target format {s:?}"))),
        }
    }
}

fn check_classes(events: &[EventFrame]) -> Result<()> {
    match events.iter().find(|e| e.class >= N_CLASSES) {
        Some(e) => Err(SeldError::Validation(format!("class {} outside 0..{N_CLASSES}", e.class))),
        None => Ok(()),
    }
}

/// Events active in one frame, grouped per class and ordered by track id.
fn by_class(events: &[EventFrame]) -> Vec<Vec<&EventFrame>> {
    let mut groups: Vec<Vec<&EventFrame>> = vec![Vec::new(); N_CLASSES];
    for e in events {
        groups[e.class].push(e);
    }
    for g in &mut groups {
        g.sort_by_key(|e| e.track);
    }
    groups
}

fn put<T: Float>(out: &mut [T], base: usize, e: &EventFrame) {
    let v = doa_to_vec(e.azimuth, e.elevation);
    for k in 0..3 {
        out[base + k] = T::of(v[k]);
    }
}

/// One frame of ACCDOA. With several same-class events the lowest track id
/// wins and the rest are dropped with a warning.
pub fn encode_single<T: Float>(events: &[EventFrame]) -> Result<Vec<T>> {
    check_classes(events)?;
    let mut out = vec![T::zero(); SINGLE_DIM];
    for (c, group) in by_class(events).iter().enumerate() {
        if let Some(first) = group.first() {
            if group.len() > 1 {
                log::warn!("class {c}: {} simultaneous events, keeping track {}", group.len(), first.track);
            }
            put(&mut out, c * 3, first);
        }
    }
    Ok(out)
}

/// One frame of multi-ACCDOA with auxiliary duplication: a single event
/// fills all three tracks, two events fill `[e0, e1, e0]`.
pub fn encode_multi<T: Float>(events: &[EventFrame]) -> Result<Vec<T>> {
    check_classes(events)?;
    let mut out = vec![T::zero(); MULTI_DIM];
    for (c, group) in by_class(events).iter().enumerate() {
        let slots: [usize; 3] = match group.len() {
            0 => continue,
            1 => [0, 0, 0],
            2 => [0, 1, 0],
            3 => [0, 1, 2],
            n => {
                return Err(SeldError::Capacity(format!(
                    "class {c} has {n} simultaneous events, at most {N_TRACKS} fit"
                )))
            }
        };
        for (track, &s) in slots.iter().enumerate() {
            put(&mut out, track * SINGLE_DIM + c * 3, group[s]);
        }
    }
    Ok(out)
}

pub fn encode_frame<T: Float>(events: &[EventFrame], format: TargetFormat) -> Result<Vec<T>> {
    match format {
        TargetFormat::Single => encode_single(events),
        TargetFormat::Multi => encode_multi(events),
    }
}

/// `[n_frames, D]` target for events whose `frame` is relative to the clip.
pub fn encode_clip<T: Float>(events: &[EventFrame], n_frames: usize, format: TargetFormat) -> Result<Tensor<T>> {
    let d = format.dim();
    let mut per_frame: Vec<Vec<EventFrame>> = vec![Vec::new(); n_frames];
    for e in events {
        per_frame
            .get_mut(e.frame)
            .ok_or_else(|| SeldError::Input(format!("event frame {} outside 0..{n_frames}", e.frame)))?
            .push(*e);
    }
    let mut data = Vec::with_capacity(n_frames * d);
    for frame in &per_frame {
        data.extend(encode_frame::<T>(frame, format)?);
    }
    Tensor::new([n_frames, d], data)
}

fn slot<T: Float>(v: &[T], base: usize) -> [f64; 3] {
    [v[base].as_f64(), v[base + 1].as_f64(), v[base + 2].as_f64()]
}

/// Decodes one frame into events (frame index `frame`). Vectors with norm at
/// or below `threshold` are inactive.
pub fn decode<T: Float>(v: &[T], format: TargetFormat, threshold: f64, frame: usize) -> Result<Vec<EventFrame>> {
    if v.len() != format.dim() {
        return Err(SeldError::dim("decode", &[v.len()], &[format.dim()]));
    }
    let mut out = Vec::new();
    for c in 0..N_CLASSES {
        let active: Vec<[f64; 3]> = (0..match format {
            TargetFormat::Single => 1,
            TargetFormat::Multi => N_TRACKS,
        })
            .map(|t| slot(v, t * SINGLE_DIM + c * 3))
            .filter(|u| norm(*u) > threshold)
            .collect();
        // greedy merge of near-duplicate tracks
        let mut clusters: Vec<[f64; 3]> = Vec::new();
        for u in active {
            match clusters.iter_mut().find(|s| angular_distance(**s, u) < MERGE_DEGREES) {
                Some(s) => (0..3).for_each(|k| s[k] += u[k]),
                None => clusters.push(u),
            }
        }
        for (track, s) in clusters.into_iter().enumerate() {
            let (az, el) = vec_to_doa(s)?;
            out.push(EventFrame::new(frame, c, track, az, el));
        }
    }
    Ok(out)
}

/// Decodes a `[T, D]` output; frame indices start at `frame_offset`.
pub fn decode_clip<T: Float>(
    output: &Tensor<T>,
    format: TargetFormat,
    threshold: f64,
    frame_offset: usize,
) -> Result<Vec<EventFrame>> {
    if output.rank() != 2 || output.shape()[1] != format.dim() {
        return Err(SeldError::dim("decode_clip", output.shape(), &[0, format.dim()]));
    }
    let d = format.dim();
    let mut out = Vec::new();
    for (t, row) in output.data().chunks(d).enumerate() {
        out.extend(decode(row, format, threshold, frame_offset + t)?);
    }
    Ok(out)
}

/// Reorders the tracks of a `[.., 117]` tensor: output track `i` is input
/// track `perm[i]`.
pub fn permute_tracks<T: Float>(x: &Tensor<T>, perm: [usize; 3]) -> Result<Tensor<T>> {
    if x.shape().last() != Some(&MULTI_DIM) {
        return Err(SeldError::dim("permute_tracks", x.shape(), &[MULTI_DIM]));
    }
    let mut data = x.data().to_vec();
    for (dst, src) in data.chunks_mut(MULTI_DIM).zip(x.data().chunks(MULTI_DIM)) {
        for (i, &p) in perm.iter().enumerate() {
            dst[i * SINGLE_DIM..(i + 1) * SINGLE_DIM].copy_from_slice(&src[p * SINGLE_DIM..(p + 1) * SINGLE_DIM]);
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

pub const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn sum_sorted(mut v: [f64; 3]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[0] + v[1] + v[2]
}

impl<T: Float> Tape<T> {
    /// Plain MSE between ACCDOA output and target.
    pub fn loss_single(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.mse_loss(pred, target)
    }

    /// Permutation-invariant multi-ACCDOA loss. For every (example, frame,
    /// class) the nine-element MSE is minimized over the six track
    /// assignments, then averaged. Invariant to any track permutation of
    /// `target` (bit-exact, since each candidate sum is order-normalized).
    pub fn loss_multi_pit(&mut self, pred: Var, target: Var) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        if shape != self.shape(target) || shape.last() != Some(&MULTI_DIM) {
            return Err(SeldError::dim("loss_multi_pit", &shape, self.shape(target)));
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let frames = p.len() / MULTI_DIM;
        let groups = frames * N_CLASSES;
        let mut best = Vec::with_capacity(groups);
        let mut total = 0.0f64;
        for f in 0..frames {
            for c in 0..N_CLASSES {
                let at = |x: &[T], track: usize, k: usize| x[f * MULTI_DIM + track * SINGLE_DIM + c * 3 + k].as_f64();
                let mut e = [[0.0f64; 3]; 3];
                for (i, row) in e.iter_mut().enumerate() {
                    for (j, cell) in row.iter_mut().enumerate() {
                        *cell = (0..3).map(|k| (at(p, i, k) - at(t, j, k)).powi(2)).sum();
                    }
                }
                let (arg, val) = PERMUTATIONS
                    .iter()
                    .enumerate()
                    .map(|(n, s)| (n, sum_sorted([e[0][s[0]], e[1][s[1]], e[2][s[2]]])))
                    .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
                best.push(arg as u8);
                total += val / 9.0;
            }
        }
        let loss = T::of(total / groups as f64);
        Ok(self.record(
            Tensor::scalar(loss),
            &[pred, target],
            Box::new(move |a| {
                if !a.needs[0] {
                    return vec![None, None];
                }
                let (p, t) = (a.inputs[0].data(), a.inputs[1].data());
                let scale = a.grad[0] * T::of(2.0 / (9.0 * groups as f64));
                let mut g = vec![T::zero(); p.len()];
                for (n, &arg) in best.iter().enumerate() {
                    let (f, c) = (n / N_CLASSES, n % N_CLASSES);
                    let s = PERMUTATIONS[arg as usize];
                    for i in 0..N_TRACKS {
                        for k in 0..3 {
                            let pi = f * MULTI_DIM + i * SINGLE_DIM + c * 3 + k;
                            let ti = f * MULTI_DIM + s[i] * SINGLE_DIM + c * 3 + k;
                            g[pi] = scale * (p[pi] - t[ti]);
                        }
                    }
                }
                vec![Some(g), None]
            }),
        ))
    }

    pub fn target_loss(&mut self, pred: Var, target: Var, format: TargetFormat) -> Result<Var> {
        match format {
            TargetFormat::Single => self.loss_single(pred, target),
            TargetFormat::Multi => self.loss_multi_pit(pred, target),
        }
    }
}

/// Decoded events as `frame,class,track,azimuth,elevation` rows.
pub fn events_to_csv(events: &[EventFrame]) -> String {
    crate::data::format_metadata(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check_many, rng_from_seed};
    use proptest::prelude::*;
    use rand::Rng;

    fn ev(class: usize, track: usize, az: f64, el: f64) -> EventFrame {
        EventFrame::new(0, class, track, az, el)
    }

    #[test]
    fn single_layout() {
        let v = encode_single::<f64>(&[ev(3, 0, 90.0, 0.0)]).unwrap();
        assert_eq!(v.len(), 39);
        assert!((v[10] - 1.0).abs() < 1e-12);
        assert!(v[9].abs() < 1e-12 && v[11].abs() < 1e-12);
        assert_eq!(v.iter().filter(|x| x.abs() > 1e-9).count(), 1);
    }

    #[test]
    fn single_conflict_keeps_lowest_track() {
        let v = encode_single::<f64>(&[ev(2, 1, 0.0, 90.0), ev(2, 0, 0.0, 0.0)]).unwrap();
        assert!((v[6] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multi_duplication_rules() {
        let a = ev(5, 0, 0.0, 0.0);
        let b = ev(5, 1, 90.0, 0.0);
        let one = encode_multi::<f64>(&[a]).unwrap();
        for t in 0..3 {
            assert!((one[t * 39 + 15] - 1.0).abs() < 1e-12);
        }
        let two = encode_multi::<f64>(&[b, a]).unwrap();
        assert!((two[15] - 1.0).abs() < 1e-12);
        assert!((two[39 + 16] - 1.0).abs() < 1e-12);
        assert!((two[78 + 15] - 1.0).abs() < 1e-12);
        assert!(matches!(
            encode_multi::<f64>(&[a, b, ev(5, 2, 1.0, 0.0), ev(5, 3, 2.0, 0.0)]),
            Err(SeldError::Capacity(_))
        ));
    }

    #[test]
    fn empty_frame_is_zero() {
        assert!(encode_multi::<f32>(&[]).unwrap().iter().all(|&x| x == 0.0));
        assert!(decode::<f32>(&[0.0; 39], TargetFormat::Single, 0.5, 0).unwrap().is_empty());
    }

    #[test]
    fn threshold_is_exclusive() {
        let mut v = vec![0.0f64; 39];
        v[0] = 0.5;
        assert!(decode(&v, TargetFormat::Single, 0.5, 0).unwrap().is_empty());
        v[0] = 0.5000001;
        assert_eq!(decode(&v, TargetFormat::Single, 0.5, 0).unwrap().len(), 1);
    }

    fn random_events(rng: &mut crate::SeldRng, per_class: usize) -> Vec<EventFrame> {
        let mut out = Vec::new();
        for c in 0..N_CLASSES {
            let n = rng.random_range(0..=per_class);
            let mut dirs: Vec<(f64, f64)> = Vec::new();
            while dirs.len() < n {
                let d = (rng.random_range(-180.0..180.0), rng.random_range(-89.0..89.0));
                let far = dirs.iter().all(|o| {
                    angular_distance(doa_to_vec(o.0, o.1), doa_to_vec(d.0, d.1)) > 2.0 * MERGE_DEGREES
                });
                if far {
                    dirs.push(d);
                }
            }
            out.extend(dirs.into_iter().enumerate().map(|(t, (az, el))| ev(c, t, az, el)));
        }
        out
    }

    fn same_events(a: &[EventFrame], b: &[EventFrame]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!((x.frame, x.class, x.track), (y.frame, y.class, y.track));
            let d = angular_distance(doa_to_vec(x.azimuth, x.elevation), doa_to_vec(y.azimuth, y.elevation));
            assert!(d < 1e-6, "{d}");
        }
    }

    #[test]
    fn single_round_trip() {
        let mut rng = rng_from_seed(4);
        for _ in 0..50 {
            let e = random_events(&mut rng, 1);
            let back = decode(&encode_single::<f64>(&e).unwrap(), TargetFormat::Single, 0.5, 0).unwrap();
            same_events(&e, &back);
        }
    }

    #[test]
    fn multi_round_trip() {
        let mut rng = rng_from_seed(5);
        for _ in 0..50 {
            let e = random_events(&mut rng, 3);
            let back = decode(&encode_multi::<f64>(&e).unwrap(), TargetFormat::Multi, 0.5, 0).unwrap();
            same_events(&e, &back);
        }
    }

    #[test]
    fn clip_encoding_places_frames() {
        let e = vec![EventFrame::new(3, 1, 0, 0.0, 0.0)];
        let t = encode_clip::<f32>(&e, 5, TargetFormat::Single).unwrap();
        assert_eq!(t.shape(), &[5, 39]);
        assert_eq!(t.at(&[3, 3]), 1.0);
        assert_eq!(t.sum(), 1.0);
        assert!(encode_clip::<f32>(&e, 3, TargetFormat::Single).is_err());
        let back = decode_clip(&t, TargetFormat::Single, 0.5, 100).unwrap();
        assert_eq!(back[0].frame, 103);
    }

    fn brute_force_pit(p: &[f64], t: &[f64]) -> f64 {
        let frames = p.len() / MULTI_DIM;
        let mut total = 0.0;
        for f in 0..frames {
            for c in 0..N_CLASSES {
                let mut best = f64::INFINITY;
                for s in PERMUTATIONS {
                    let mut acc = 0.0;
                    for i in 0..3 {
                        for k in 0..3 {
                            let d = p[f * 117 + i * 39 + c * 3 + k] - t[f * 117 + s[i] * 39 + c * 3 + k];
                            acc += d * d;
                        }
                    }
                    best = best.min(acc / 9.0);
                }
                total += best;
            }
        }
        total / (frames * N_CLASSES) as f64
    }

    fn random_tensor(rng: &mut crate::SeldRng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn pit_matches_brute_force() {
        let mut rng = rng_from_seed(6);
        for _ in 0..10 {
            let p = random_tensor(&mut rng, &[2, 3, 117]);
            let t = random_tensor(&mut rng, &[2, 3, 117]);
            let mut tape = Tape::<f64>::new();
            let (pv, tv) = (tape.leaf(p.clone()), tape.constant(t.clone()));
            let l = tape.loss_multi_pit(pv, tv).unwrap();
            let got = tape.value(l).item();
            assert!((got - brute_force_pit(p.data(), t.data())).abs() < 1e-12);
        }
    }

    #[test]
    fn pit_of_offset_prediction_is_offset_squared() {
        let mut rng = rng_from_seed(7);
        let e = random_events(&mut rng, 2);
        let t = Tensor::from_vec([1, 1, 117], encode_multi::<f64>(&e).unwrap());
        let delta = 0.125;
        let p = t.map(|x| x + delta);
        let mut tape = Tape::<f64>::new();
        let (pv, tv) = (tape.leaf(p), tape.constant(t));
        let l = tape.loss_multi_pit(pv, tv).unwrap();
        assert!((tape.value(l).item() - delta * delta).abs() < 1e-15);
    }

    #[test]
    fn pit_gradient_checks() {
        let mut rng = rng_from_seed(8);
        let p = random_tensor(&mut rng, &[1, 2, 117]).with_grad();
        let t = random_tensor(&mut rng, &[1, 2, 117]);
        let errs = grad_check_many(
            |tape, v| {
                let tv = tape.constant(t.clone());
                tape.loss_multi_pit(v[0], tv)
            },
            &[p],
            1e-3,
        )
        .unwrap();
        assert!(errs[0] < 1e-5, "{errs:?}");
    }

    proptest! {
        #[test]
        fn pit_is_exactly_permutation_invariant(seed in 0u64..1000, k in 0usize..6) {
            let mut rng = rng_from_seed(seed);
            let p = random_tensor(&mut rng, &[1, 2, 117]);
            let t = random_tensor(&mut rng, &[1, 2, 117]);
            let tp = permute_tracks(&t, PERMUTATIONS[k]).unwrap();
            let eval = |target: Tensor<f64>| {
                let mut tape = Tape::<f64>::new();
                let (pv, tv) = (tape.leaf(p.clone()), tape.constant(target));
                let l = tape.loss_multi_pit(pv, tv).unwrap();
                tape.value(l).item()
            };
            prop_assert_eq!(eval(t).to_bits(), eval(tp).to_bits());
        }
    }
}
