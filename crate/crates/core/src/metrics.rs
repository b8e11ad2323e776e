//! Segment-based SELD evaluation: location-dependent detection (ER, F at a
//! 20° threshold), class-dependent localization (LE, LR), and the composite
//! SELD score.
//!
//! Within each 1 s segment and class, every track id is summarized by the
//! normalized mean of its frame DoA vectors. Reference and predicted tracks
//! are paired by minimum-cost assignment on angular distance.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EventFrame, LABEL_RATE, N_CLASSES};
use crate::spatial::{angular_distance, doa_to_vec, norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Micro,
    Macro,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub threshold_deg: f64,
    pub segment_frames: usize,
    pub averaging: Averaging,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { threshold_deg: 20.0, segment_frames: LABEL_RATE, averaging: Averaging::Micro }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeldScores {
    pub er: f64,
    pub f: f64,
    pub le: f64,
    pub lr: f64,
    pub seld_score: f64,
}

impl SeldScores {
    pub fn new(er: f64, f: f64, le: f64, lr: f64) -> Self {
        SeldScores { er, f, le, lr, seld_score: seld_score(er, f, le, lr) }
    }
}

/// `(ER + (1 − F) + LE / 180 + (1 − LR)) / 4`, with F and LR as fractions.
pub fn seld_score(er: f64, f: f64, le: f64, lr: f64) -> f64 {
    (er + (1.0 - f) + le / 180.0 + (1.0 - lr)) / 4.0
}

/// Minimum-cost assignment on a rectangular cost matrix (Kuhn-Munkres with
/// potentials). Returns `(row, col)` pairs for `min(rows, cols)` matches.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let c = |i: usize, j: usize| if transposed { cost[j][i] } else { cost[i][j] };
    // 1-based arrays, column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| if transposed { (j - 1, p[j] - 1) } else { (p[j] - 1, j - 1) })
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Matching outcome for one (segment, class).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMatch {
    pub segment: usize,
    pub class: usize,
    pub n_ref: usize,
    pub n_pred: usize,
    /// Angular error of each assigned (reference, prediction) pair.
    pub errors: Vec<f64>,
}

type Tracks = BTreeMap<(usize, usize), BTreeMap<usize, [f64; 3]>>;

fn segment_tracks(events: &[EventFrame], segment_frames: usize) -> Tracks {
    let mut out: Tracks = BTreeMap::new();
    for e in events {
        let acc = out
            .entry((e.frame / segment_frames, e.class))
            .or_default()
            .entry(e.track)
            .or_insert([0.0; 3]);
        let v = doa_to_vec(e.azimuth, e.elevation);
        (0..3).for_each(|k| acc[k] += v[k]);
    }
    out
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    if n > 0.0 {
        v.map(|x| x / n)
    } else {
        // opposite directions cancelled exactly; keep a defined direction
        [1.0, 0.0, 0.0]
    }
}

/// Pairs predicted and reference tracks per (segment, class).
pub fn match_events(pred: &[EventFrame], reference: &[EventFrame], segment_frames: usize) -> Vec<ClassMatch> {
    let segment_frames = segment_frames.max(1);
    let p = segment_tracks(pred, segment_frames);
    let r = segment_tracks(reference, segment_frames);
    let mut keys: Vec<(usize, usize)> = p.keys().chain(r.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    let empty = BTreeMap::new();
    keys.into_iter()
        .map(|key| {
            let pv: Vec<[f64; 3]> = p.get(&key).unwrap_or(&empty).values().map(|&v| unit(v)).collect();
            let rv: Vec<[f64; 3]> = r.get(&key).unwrap_or(&empty).values().map(|&v| unit(v)).collect();
            let cost: Vec<Vec<f64>> =
                rv.iter().map(|a| pv.iter().map(|b| angular_distance(*a, *b)).collect()).collect();
            let errors = hungarian(&cost).into_iter().map(|(i, j)| cost[i][j]).collect();
            ClassMatch { segment: key.0, class: key.1, n_ref: rv.len(), n_pred: pv.len(), errors }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
    subs: usize,
    dels: usize,
    ins: usize,
    n_ref: usize,
    matched: usize,
    err_sum: f64,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.subs += o.subs;
        self.dels += o.dels;
        self.ins += o.ins;
        self.n_ref += o.n_ref;
        self.matched += o.matched;
        self.err_sum += o.err_sum;
    }

    fn er(&self) -> f64 {
        (self.subs + self.dels + self.ins) as f64 / self.n_ref.max(1) as f64
    }

    fn f(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / d as f64
        }
    }

    fn le(&self) -> f64 {
        if self.matched == 0 {
            180.0
        } else {
            self.err_sum / self.matched as f64
        }
    }

    fn lr(&self) -> f64 {
        if self.matched == 0 {
            0.0
        } else {
            self.matched as f64 / self.n_ref.max(1) as f64
        }
    }
}

/// Per-(segment, class) counts. S, D, I are formed per segment and class.
fn class_counts(m: &ClassMatch, threshold: f64) -> Counts {
    let tp = m.errors.iter().filter(|&&e| e <= threshold).count();
    let far = m.errors.len() - tp;
    let fp = far + (m.n_pred - m.errors.len());
    let fn_ = far + (m.n_ref - m.errors.len());
    Counts {
        tp,
        fp,
        fn_,
        subs: fp.min(fn_),
        dels: fn_.saturating_sub(fp),
        ins: fp.saturating_sub(fn_),
        n_ref: m.n_ref,
        matched: m.errors.len(),
        err_sum: m.errors.iter().sum(),
    }
}

fn per_class(matches: &[ClassMatch], threshold: f64) -> Vec<Counts> {
    let mut out = vec![Counts::default(); N_CLASSES];
    for m in matches {
        let c = class_counts(m, threshold);
        if let Some(slot) = out.get_mut(m.class) {
            slot.add(&c);
        }
    }
    out
}

fn micro(matches: &[ClassMatch], threshold: f64) -> Counts {
    let mut total = Counts::default();
    per_class(matches, threshold).iter().for_each(|c| total.add(c));
    total
}

/// `(ER, F)`, micro-averaged.
pub fn location_dependent_detection(matches: &[ClassMatch], threshold: f64) -> (f64, f64) {
    let c = micro(matches, threshold);
    (c.er(), c.f())
}

/// `(LE, LR)` over class-matched pairs, micro-averaged.
pub fn class_dependent_localization(matches: &[ClassMatch]) -> (f64, f64) {
    let c = micro(matches, f64::INFINITY);
    (c.le(), c.lr())
}

pub fn scores_from_matches(matches: &[ClassMatch], cfg: &MetricsConfig) -> SeldScores {
    match cfg.averaging {
        Averaging::Micro => {
            let c = micro(matches, cfg.threshold_deg);
            SeldScores::new(c.er(), c.f(), c.le(), c.lr())
        }
        Averaging::Macro => {
            // average over classes present in either side
            let classes: Vec<Counts> = per_class(matches, cfg.threshold_deg)
                .into_iter()
                .filter(|c| c.n_ref > 0 || c.fp > 0)
                .collect();
            if classes.is_empty() {
                return SeldScores::new(0.0, 1.0, 180.0, 0.0);
            }
            let n = classes.len() as f64;
            let mean = |f: fn(&Counts) -> f64| classes.iter().map(f).sum::<f64>() / n;
            SeldScores::new(mean(Counts::er), mean(Counts::f), mean(Counts::le), mean(Counts::lr))
        }
    }
}

pub fn evaluate(pred: &[EventFrame], reference: &[EventFrame], cfg: &MetricsConfig) -> SeldScores {
    scores_from_matches(&match_events(pred, reference, cfg.segment_frames), cfg)
}

/// Scores several `(prediction, reference)` files at once. Files are matched
/// in parallel and their matches pooled in input order.
pub fn evaluate_files(files: &[(Vec<EventFrame>, Vec<EventFrame>)], cfg: &MetricsConfig) -> SeldScores {
    let per_file: Vec<Vec<ClassMatch>> =
        files.par_iter().map(|(p, r)| match_events(p, r, cfg.segment_frames)).collect();
    scores_from_matches(&per_file.concat(), cfg)
}

/// Published component rows `(ER, F %, LE °, LR %, SELD)` with a label
/// for each.
pub const PUBLISHED_ROWS: [(&str, f64, f64, f64, f64, f64); 11] = [
    ("baseline multi-ACCDOA", 0.570, 29.90, 22.00, 47.70, 0.4791),
    ("baseline ACCDOA", 0.615, 33.62, 22.88, 54.91, 0.4642),
    ("DST multi-ACCDOA", 0.580, 39.50, 20.03, 55.83, 0.4345),
    ("DST multi-ACCDOA + aug", 0.525, 40.45, 17.31, 53.06, 0.4215),
    ("DST multi-ACCDOA + aug + ext", 0.555, 41.48, 16.92, 50.26, 0.4329),
    ("DST ACCDOA", 0.570, 37.16, 20.30, 54.20, 0.4423),
    ("DST ACCDOA + aug", 0.505, 39.87, 17.95, 52.24, 0.4209),
    ("DST ACCDOA + aug + ext", 0.510, 41.96, 16.54, 55.10, 0.4078),
    ("submission 1", 0.495, 42.68, 16.70, 55.19, 0.4023),
    ("submission 2", 0.510, 41.96, 16.54, 55.10, 0.4078),
    ("submission 3", 0.515, 41.24, 17.68, 54.12, 0.4149),
];
