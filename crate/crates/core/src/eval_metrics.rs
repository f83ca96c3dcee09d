//! Objective metrics on symbolic and frame-level outputs.
//!
//! PD and DD are histogram intersections in percent. MD is a DTW cost over
//! per-frame pitch, divided by the length of the warping path. FFE counts
//! frames whose voicing disagrees or whose F0 is off by more than 20%.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::MelSpec;
use crate::error::{Error, Result};
use crate::key::{estimate_key, key_accuracy, note_profile, Key};
use crate::melody::{MidiSequence, MAX_PITCH, MIN_PITCH, PITCH_COUNT};

/// Durations up to this many frames get one bin each.
pub const LINEAR_DURATION_BINS: usize = 32;
/// Log-spaced duration bins per octave beyond the linear range.
pub const DURATION_BINS_PER_OCTAVE: f64 = 4.0;
pub const FFE_TOLERANCE: f64 = 0.2;

pub fn apd(gt: &MidiSequence, pred: &MidiSequence) -> Result<f64> {
    Ok((gt.average_pitch()? - pred.average_pitch()?).abs())
}

pub fn td(gt: &MidiSequence, pred: &MidiSequence) -> f64 {
    (gt.total_seconds() - pred.total_seconds()).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Pitch,
    Duration,
}

pub fn duration_bin(frames: u32) -> usize {
    let d = frames.max(1) as usize;
    if d <= LINEAR_DURATION_BINS {
        d - 1
    } else {
        LINEAR_DURATION_BINS + (DURATION_BINS_PER_OCTAVE * (d as f64 / LINEAR_DURATION_BINS as f64).log2()).floor() as usize
    }
}

/// Normalized note-count histogram of one attribute.
pub fn histogram(m: &MidiSequence, attr: Attribute) -> BTreeMap<usize, f64> {
    let mut h = BTreeMap::new();
    for n in m.notes() {
        let bin = match attr {
            Attribute::Pitch => (n.pitch() - MIN_PITCH) as usize,
            Attribute::Duration => duration_bin(n.duration()),
        };
        *h.entry(bin).or_insert(0.0) += 1.0;
    }
    let total = m.len().max(1) as f64;
    h.values_mut().for_each(|v| *v /= total);
    h
}

/// `100 · Σ_b min(a_b, b_b)` over two normalized histograms.
pub fn histogram_intersection(a: &BTreeMap<usize, f64>, b: &BTreeMap<usize, f64>) -> f64 {
    100.0 * a.iter().map(|(k, va)| b.get(k).map_or(0.0, |vb| va.min(*vb))).sum::<f64>()
}

pub fn distribution_similarity(gt: &MidiSequence, pred: &MidiSequence, attr: Attribute) -> f64 {
    histogram_intersection(&histogram(gt, attr), &histogram(pred, attr))
}

/// DTW with cost `|a_i − b_j|` and steps (1,0), (0,1), (1,1). Among paths
/// of minimal cost the shortest is taken; returns `(cost, path_length)`.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<(f64, usize)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("DTW needs two nonempty sequences"));
    }
    let (n, m) = (a.len(), b.len());
    let mut prev = vec![(f64::INFINITY, 0usize); m];
    let mut cur = vec![(f64::INFINITY, 0usize); m];
    let better = |x: (f64, usize), y: (f64, usize)| if y.0 < x.0 || (y.0 == x.0 && y.1 < x.1) { y } else { x };
    for i in 0..n {
        for j in 0..m {
            let c = (a[i] - b[j]).abs();
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = (f64::INFINITY, usize::MAX);
                if i > 0 {
                    best = better(best, prev[j]);
                }
                if j > 0 {
                    best = better(best, cur[j - 1]);
                }
                if i > 0 && j > 0 {
                    best = better(best, prev[j - 1]);
                }
                best
            };
            cur[j] = (best.0 + c, best.1 + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// DTW cost per warping-path step between two pitch tracks.
pub fn track_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let (cost, len) = dtw(a, b)?;
    Ok(cost / len as f64)
}

/// MD between two note sequences over their expanded pitch tracks.
pub fn melody_distance(gt: &MidiSequence, pred: &MidiSequence) -> Result<f64> {
    let track = |m: &MidiSequence| -> Result<Vec<f64>> { Ok(m.expand()?.pitches().iter().map(|&p| p as f64).collect()) };
    track_distance(&track(gt)?, &track(pred)?)
}

pub fn ffe(gt_f0: &[f64], gt_voiced: &[bool], pred_f0: &[f64], pred_voiced: &[bool]) -> Result<f64> {
    let n = gt_f0.len();
    if gt_voiced.len() != n || pred_f0.len() != n || pred_voiced.len() != n {
        return Err(Error::invalid("FFE tracks differ in length"));
    }
    if n == 0 {
        return Err(Error::invalid("FFE needs at least one frame"));
    }
    let errors = (0..n)
        .filter(|&i| {
            gt_voiced[i] != pred_voiced[i] || (gt_voiced[i] && (pred_f0[i] - gt_f0[i]).abs() > FFE_TOLERANCE * gt_f0[i])
        })
        .count();
    Ok(errors as f64 / n as f64)
}

/// Frame-level F0 tracks of a reference and a prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F0Tracks {
    pub gt_f0: Vec<f64>,
    pub gt_voiced: Vec<bool>,
    pub pred_f0: Vec<f64>,
    pub pred_voiced: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub id: String,
    pub gt: MidiSequence,
    pub pred: MidiSequence,
    /// Reference key; estimated from `gt` when absent.
    pub key: Option<Key>,
    /// Tempo for the rounded protocol.
    pub tempo_bpm: f64,
    pub f0: Option<F0Tracks>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Snap both sequences to a 1/16-note grid before PD, DD and MD.
    pub rounded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    /// `None` when the reference's key correlation is zero or undefined.
    pub ka: Option<f64>,
    pub apd: f64,
    pub td: f64,
    pub pd: f64,
    pub dd: f64,
    pub md: f64,
    pub ffe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ka: Option<f64>,
    pub apd: f64,
    pub td: f64,
    pub pd: f64,
    pub dd: f64,
    pub md: f64,
    pub ffe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rounded: bool,
    pub samples: Vec<SampleMetrics>,
    pub mean: Aggregate,
    pub count: usize,
    pub ka_excluded: usize,
    pub ffe_count: usize,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, sum) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| sum / n as f64)
}

fn evaluate_pair(p: &EvalPair, opts: EvalOptions) -> Result<SampleMetrics> {
    let key = match p.key {
        Some(k) => Some(k),
        None => estimate_key(&note_profile(&p.gt)).ok().map(|e| e.key),
    };
    let ka = key.and_then(|k| key_accuracy(&p.gt, &p.pred, k).ok());
    let (gt, pred) = if opts.rounded {
        (p.gt.round_to_grid(p.tempo_bpm)?, p.pred.round_to_grid(p.tempo_bpm)?)
    } else {
        (p.gt.clone(), p.pred.clone())
    };
    let ffe = match &p.f0 {
        Some(f) => Some(ffe(&f.gt_f0, &f.gt_voiced, &f.pred_f0, &f.pred_voiced)?),
        None => None,
    };
    Ok(SampleMetrics {
        id: p.id.clone(),
        ka,
        apd: apd(&p.gt, &p.pred)?,
        td: td(&p.gt, &p.pred),
        pd: distribution_similarity(&gt, &pred, Attribute::Pitch),
        dd: distribution_similarity(&gt, &pred, Attribute::Duration),
        md: melody_distance(&gt, &pred)?,
        ffe,
    })
}

pub fn evaluate_corpus(pairs: &[EvalPair], opts: EvalOptions) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let samples = pairs
        .par_iter()
        .map(|p| evaluate_pair(p, opts).map_err(|e| Error::invalid(format!("{}: {e}", p.id))))
        .collect::<Result<Vec<_>>>()?;
    let ka_excluded = samples.iter().filter(|s| s.ka.is_none()).count();
    if ka_excluded > 0 {
        log::info!("KA undefined for {ka_excluded} of {} samples", samples.len());
    }
    let n = samples.len() as f64;
    let mean = Aggregate {
        ka: mean_of(samples.iter().filter_map(|s| s.ka)),
        apd: samples.iter().map(|s| s.apd).sum::<f64>() / n,
        td: samples.iter().map(|s| s.td).sum::<f64>() / n,
        pd: samples.iter().map(|s| s.pd).sum::<f64>() / n,
        dd: samples.iter().map(|s| s.dd).sum::<f64>() / n,
        md: samples.iter().map(|s| s.md).sum::<f64>() / n,
        ffe: mean_of(samples.iter().filter_map(|s| s.ffe)),
    };
    let ffe_count = samples.iter().filter(|s| s.ffe.is_some()).count();
    Ok(MetricReport { rounded: opts.rounded, count: samples.len(), samples, mean, ka_excluded, ffe_count })
}

fn cell(v: Option<f64>, scale: f64, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.*}", digits, v * scale))
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One-row table in the column order KA(%) APD TD PD(%) DD(%) MD, plus
    /// FFE when any sample carries F0.
    pub fn table(&self, label: &str) -> String {
        let m = &self.mean;
        let name = if self.rounded { format!("{label} (rounded)") } else { label.to_string() };
        let mut out = format!(
            "{:<24} {:>7} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
            "", "KA(%)", "APD", "TD", "PD(%)", "DD(%)", "MD", "FFE"
        );
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6}",
            name,
            cell(m.ka, 100.0, 2),
            m.apd,
            m.td,
            m.pd,
            m.dd,
            m.md,
            cell(m.ffe, 1.0, 3)
        );
        let _ = writeln!(out, "samples {}, KA excluded {}, with F0 {}", self.count, self.ka_excluded, self.ffe_count);
        out
    }
}

/// One configuration of the vocal-stage ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub ffe: f64,
    /// Melody distance between the conditioning melody and the generated
    /// F0 track, in semitones per path step.
    pub md: f64,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<16} {:>8} {:>8}\n", "", "FFE", "MD");
    for r in rows {
        let _ = writeln!(out, "{:<16} {:>8.3} {:>8.3}", r.config, r.ffe, r.md);
    }
    out
}

/// Audio-level scorer backed by an external pretrained model.
pub trait AudioScorer: Send + Sync {
    fn name(&self) -> &str;
    /// `None` when the scorer is unavailable.
    fn score(&self, generated: &[MelSpec], reference: &[MelSpec]) -> Option<f64>;
}

/// Placeholder for FAD, KL and CLAP, which need external models.
#[derive(Debug, Clone)]
pub struct NoopScorer {
    pub metric: String,
}

impl AudioScorer for NoopScorer {
    fn name(&self) -> &str {
        &self.metric
    }

    fn score(&self, _generated: &[MelSpec], _reference: &[MelSpec]) -> Option<f64> {
        log::warn!("{} needs an external model; skipped", self.metric);
        None
    }
}

pub fn default_scorers() -> Vec<Box<dyn AudioScorer>> {
    ["FAD", "KL", "CLAP"].iter().map(|m| Box::new(NoopScorer { metric: m.to_string() }) as Box<dyn AudioScorer>).collect()
}

/// Number of pitch bins, for callers sizing their own histograms.
pub const PITCH_BINS: usize = PITCH_COUNT;
const _: () = assert!(MAX_PITCH as usize - MIN_PITCH as usize + 1 == PITCH_BINS);

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(pairs: &[(i32, u32)]) -> MidiSequence {
        MidiSequence::from_pairs(pairs).unwrap()
    }

    #[test]
    fn apd_and_td_examples() {
        let a = seq(&[(60, 10), (62, 10)]);
        assert_eq!(apd(&a, &a).unwrap(), 0.0);
        assert_eq!(apd(&seq(&[(60, 4)]), &seq(&[(62, 2), (63, 2)])).unwrap(), 2.5);
        assert_eq!(apd(&a, &a.transpose(3).unwrap()).unwrap(), 3.0);
        let (x, y) = (seq(&[(60, 500)]), seq(&[(60, 610)]));
        assert!((td(&x, &y) - 2.2).abs() < 1e-12);
        assert_eq!(td(&x, &y), td(&y, &x));
        assert_eq!(td(&a, &a), 0.0);
    }

    #[test]
    fn similarity_examples() {
        let a = seq(&[(60, 4), (62, 4)]);
        assert_eq!(distribution_similarity(&a, &a, Attribute::Pitch), 100.0);
        assert_eq!(distribution_similarity(&a, &seq(&[(70, 4)]), Attribute::Pitch), 0.0);
        assert_eq!(distribution_similarity(&a, &seq(&[(60, 4), (64, 4)]), Attribute::Pitch), 50.0);
        assert_eq!(distribution_similarity(&a, &seq(&[(60, 9)]), Attribute::Duration), 0.0);
    }

    #[test]
    fn duration_bins_are_monotone() {
        assert_eq!(duration_bin(1), 0);
        assert_eq!(duration_bin(32), 31);
        assert_eq!(duration_bin(33), 32);
        assert_eq!(duration_bin(64), 36);
        let bins: Vec<usize> = (1..=1500).map(duration_bin).collect();
        assert!(bins.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn dtw_examples() {
        let a = seq(&[(60, 3), (62, 2)]);
        assert_eq!(melody_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(melody_distance(&seq(&[(60, 1)]), &seq(&[(61, 1)])).unwrap(), 1.0);
        let (x, y) = ([60.0, 60.0, 62.0], [60.0, 62.0, 62.0]);
        assert_eq!(dtw(&x, &y).unwrap(), (0.0, 4));
        assert_eq!(melody_distance(&seq(&[(60, 2), (62, 1)]), &seq(&[(60, 1), (62, 2)])).unwrap(), 0.0);
        assert!(dtw(&[], &[1.0]).is_err());
    }

    #[test]
    fn ffe_examples() {
        let f = [200.0, 210.0, 0.0, 220.0, 230.0, 240.0, 250.0, 260.0, 270.0, 280.0];
        let v = [true, true, false, true, true, true, true, true, true, true];
        assert_eq!(ffe(&f, &v, &f, &v).unwrap(), 0.0);
        let flipped: Vec<bool> = v.iter().map(|b| !b).collect();
        assert_eq!(ffe(&f, &v, &f, &flipped).unwrap(), 1.0);
        let mut bad = f;
        bad[4] = 300.0;
        assert_eq!(ffe(&f, &v, &bad, &v).unwrap(), 0.1);
        let mut ok = f;
        ok[4] = 250.0;
        assert_eq!(ffe(&f, &v, &ok, &v).unwrap(), 0.0);
        assert!(ffe(&f, &v, &f[..9], &v[..9]).is_err());
    }

    fn pair(id: &str, gt: MidiSequence, pred: MidiSequence) -> EvalPair {
        EvalPair { id: id.into(), gt, pred, key: None, tempo_bpm: 120.0, f0: None }
    }

    #[test]
    fn identical_pair_is_perfect() {
        let m = seq(&[(60, 25), (64, 25), (67, 50), (65, 25)]);
        let f0 = F0Tracks { gt_f0: vec![261.6, 0.0], gt_voiced: vec![true, false], pred_f0: vec![261.6, 0.0], pred_voiced: vec![true, false] };
        let mut p = pair("a", m.clone(), m);
        p.f0 = Some(f0);
        for rounded in [false, true] {
            let r = evaluate_corpus(std::slice::from_ref(&p), EvalOptions { rounded }).unwrap();
            assert_eq!(r.mean, Aggregate { ka: Some(1.0), apd: 0.0, td: 0.0, pd: 100.0, dd: 100.0, md: 0.0, ffe: Some(0.0) });
            assert_eq!(r.ka_excluded, 0);
        }
        let json = evaluate_corpus(&[p], EvalOptions::default()).unwrap().to_json().unwrap();
        assert!(json.contains("\"ka_excluded\": 0"));
    }

    #[test]
    fn rounding_is_idempotent_on_grid_data() {
        // 120 bpm at 50 frames per second: a 1/16 note is 6.25 frames, so
        // multiples of 4 sixteenths land on whole frames.
        let m = seq(&[(60, 25), (62, 50), (64, 25)]);
        assert_eq!(m.round_to_grid(120.0).unwrap(), m);
        let p = pair("g", m.clone(), m.transpose(2).unwrap());
        let a = evaluate_corpus(std::slice::from_ref(&p), EvalOptions { rounded: true }).unwrap();
        let b = evaluate_corpus(&[p], EvalOptions { rounded: false }).unwrap();
        assert_eq!(a.mean, b.mean);
    }

    #[test]
    fn flat_profile_is_excluded_from_ka() {
        let flat = MidiSequence::from_pairs(&(0..12).map(|i| (60 + i, 10)).collect::<Vec<_>>()).unwrap();
        let m = seq(&[(60, 20), (64, 10)]);
        let r = evaluate_corpus(&[pair("flat", flat.clone(), flat), pair("ok", m.clone(), m)], EvalOptions::default()).unwrap();
        assert_eq!(r.ka_excluded, 1);
        assert_eq!(r.mean.ka, Some(1.0));
        assert!(r.table("x").contains("KA excluded 1"));
    }

    #[test]
    fn noop_scorers_abstain() {
        let s = default_scorers();
        assert_eq!(s.iter().map(|s| s.name().to_string()).collect::<Vec<_>>(), vec!["FAD", "KL", "CLAP"]);
        assert!(s.iter().all(|s| s.score(&[], &[]).is_none()));
        let t = ablation_table(&[AblationRow { config: "expanded".into(), ffe: 0.1, md: 0.5 }]);
        assert!(t.contains("FFE") && t.contains("expanded"));
    }

    fn notes() -> impl Strategy<Value = Vec<(i32, u32)>> {
        prop::collection::vec((32i32..=80, 1u32..60), 1..12)
    }

    proptest! {
        #[test]
        fn symmetric_metrics(a in notes(), b in notes()) {
            let (x, y) = (seq(&a), seq(&b));
            prop_assert_eq!(td(&x, &y), td(&y, &x));
            prop_assert!((distribution_similarity(&x, &y, Attribute::Pitch) - distribution_similarity(&y, &x, Attribute::Pitch)).abs() < 1e-9);
            prop_assert!((distribution_similarity(&x, &y, Attribute::Duration) - distribution_similarity(&y, &x, Attribute::Duration)).abs() < 1e-9);
            prop_assert!((melody_distance(&x, &y).unwrap() - melody_distance(&y, &x).unwrap()).abs() < 1e-9);
            let pd = distribution_similarity(&x, &y, Attribute::Pitch);
            prop_assert!((0.0..=100.0 + 1e-9).contains(&pd));
        }

        #[test]
        fn similarity_ignores_note_order(a in notes(), b in notes()) {
            let mut r = a.clone();
            r.reverse();
            let (x, xr, y) = (seq(&a), seq(&r), seq(&b));
            for attr in [Attribute::Pitch, Attribute::Duration] {
                prop_assert!((distribution_similarity(&x, &y, attr) - distribution_similarity(&xr, &y, attr)).abs() < 1e-9);
            }
        }

        #[test]
        fn md_invariant_to_integer_stretch(a in notes(), b in notes(), k in 2u32..4) {
            let stretch = |v: &[(i32, u32)]| seq(&v.iter().map(|&(p, d)| (p, d * k)).collect::<Vec<_>>());
            let base = melody_distance(&seq(&a), &seq(&b)).unwrap();
            let stretched = melody_distance(&stretch(&a), &stretch(&b)).unwrap();
            prop_assert!((base - stretched).abs() < 1e-9, "{} vs {}", base, stretched);
        }

        #[test]
        fn ffe_scale_invariant(f in prop::collection::vec(50.0f64..800.0, 1..40), g in prop::collection::vec(50.0f64..800.0, 40), c in 0.1f64..10.0) {
            let n = f.len();
            let v: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
            let w: Vec<bool> = (0..n).map(|i| i % 4 != 0).collect();
            let g = &g[..n];
            let scaled = |x: &[f64]| x.iter().map(|v| v * c).collect::<Vec<_>>();
            let a = ffe(&f, &v, g, &w).unwrap();
            let b = ffe(&scaled(&f), &v, &scaled(g), &w).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
