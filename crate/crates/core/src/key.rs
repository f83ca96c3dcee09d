//! Krumhansl-Schmuckler key finding and the key-accuracy ratio built on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::melody::{ExpandedMelody, MidiSequence};

/// Krumhansl & Kessler probe-tone profiles, as tabulated in Krumhansl,
/// "Cognitive Foundations of Musical Pitch" (Oxford UP), index 0 = tonic.
pub const MAJOR_PROFILE: [f64; 12] = [6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88];
pub const MINOR_PROFILE: [f64; 12] = [6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17];

const NOTE_NAMES: [&str; 12] = ["C", "C#", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Major,
    Minor,
}

impl Mode {
    pub fn profile(self) -> &'static [f64; 12] {
        match self {
            Mode::Major => &MAJOR_PROFILE,
            Mode::Minor => &MINOR_PROFILE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Key {
    pub tonic: u8,
    pub mode: Mode,
}

impl Key {
    pub fn new(tonic: u8, mode: Mode) -> Self {
        Self { tonic: tonic % 12, mode }
    }

    /// C major <-> A minor.
    pub fn relative(self) -> Self {
        match self.mode {
            Mode::Major => Key::new(self.tonic + 9, Mode::Minor),
            Mode::Minor => Key::new(self.tonic + 3, Mode::Major),
        }
    }

    /// Key profile rotated so that entry `c` is the weight of pitch class `c`.
    pub fn profile(self) -> [f64; 12] {
        let base = self.mode.profile();
        std::array::from_fn(|c| base[(c + 12 - self.tonic as usize) % 12])
    }

    /// Pitch classes of the scale (natural minor for minor keys).
    pub fn scale(self) -> [u8; 7] {
        let steps: [u8; 7] = match self.mode {
            Mode::Major => [0, 2, 4, 5, 7, 9, 11],
            Mode::Minor => [0, 2, 3, 5, 7, 8, 10],
        };
        steps.map(|s| (self.tonic + s) % 12)
    }

    pub fn name(self) -> String {
        let mode = match self.mode {
            Mode::Major => "major",
            Mode::Minor => "minor",
        };
        format!("{} {}", NOTE_NAMES[self.tonic as usize], mode)
    }
}

impl std::fmt::Display for Key {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyEstimate {
    pub key: Key,
    /// Pearson correlation of the winning key; the maximum over all 24.
    pub r: f64,
}

/// Frames per pitch class.
pub fn pitch_class_profile(e: &ExpandedMelody) -> [f64; 12] {
    let mut profile = [0.0; 12];
    for &p in e.pitches() {
        profile[(p % 12) as usize] += 1.0;
    }
    profile
}

/// Duration-weighted pitch-class profile of a note sequence.
pub fn note_profile(m: &MidiSequence) -> [f64; 12] {
    let mut profile = [0.0; 12];
    for n in m.notes() {
        profile[(n.pitch() % 12) as usize] += n.duration() as f64;
    }
    profile
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64; 12], b: &[f64; 12]) -> Option<f64> {
    let ma = a.iter().sum::<f64>() / 12.0;
    let mb = b.iter().sum::<f64>() / 12.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for c in 0..12 {
        let (da, db) = (a[c] - ma, b[c] - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

/// Best of the 24 major/minor keys by Pearson correlation. Ties go to the
/// lower tonic, major before minor.
pub fn estimate_key(profile: &[f64; 12]) -> Result<KeyEstimate> {
    if profile.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("pitch-class profile must be finite and nonnegative"));
    }
    let mut best: Option<KeyEstimate> = None;
    for mode in [Mode::Major, Mode::Minor] {
        for tonic in 0..12u8 {
            let key = Key::new(tonic, mode);
            // read the profile starting at the candidate tonic so that a
            // rotated input reproduces r bit for bit
            let aligned: [f64; 12] = std::array::from_fn(|i| profile[(i + tonic as usize) % 12]);
            let r = pearson(&aligned, mode.profile()).ok_or(Error::DegenerateProfile)?;
            if best.map_or(true, |b| r > b.r) {
                best = Some(KeyEstimate { key, r });
            }
        }
    }
    Ok(best.expect("24 candidates"))
}

/// Correlation of a melody's profile with a given key's profile; zero when
/// the melody's profile is flat.
pub fn key_correlation(m: &MidiSequence, key: Key) -> f64 {
    pearson(&note_profile(m), &key.profile()).unwrap_or(0.0)
}

/// `r̂ / r`: the prediction's correlation with the reference key over the
/// reference's own correlation with it.
pub fn key_accuracy(gt: &MidiSequence, pred: &MidiSequence, gt_key: Key) -> Result<f64> {
    let r = key_correlation(gt, gt_key);
    if r == 0.0 {
        return Err(Error::Undefined);
    }
    Ok(key_correlation(pred, gt_key) / r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn expanded(p: &[u8]) -> ExpandedMelody {
        ExpandedMelody::new(p.to_vec(), 50.0).unwrap()
    }

    #[test]
    fn profile_counts() {
        let p = pitch_class_profile(&expanded(&[60, 60, 62]));
        assert_eq!(p[0], 2.0);
        assert_eq!(p[2], 1.0);
        assert_eq!(p.iter().sum::<f64>(), 3.0);
        let chromatic: Vec<u8> = (60..72).collect();
        assert_eq!(pitch_class_profile(&expanded(&chromatic)), [1.0; 12]);
    }

    #[test]
    fn profile_matches_counting_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pitches: Vec<u8> = (0..500).map(|_| rng.gen_range(32..=80)).collect();
        let p = pitch_class_profile(&expanded(&pitches));
        for c in 0..12u8 {
            let count = pitches.iter().filter(|&&x| x % 12 == c).count();
            assert_eq!(p[c as usize], count as f64);
        }
    }

    // Independent brute force: correlate against hand-rotated profiles.
    fn brute_force_key(profile: &[f64; 12]) -> (u8, Mode, f64) {
        let mut best = (0, Mode::Major, f64::NEG_INFINITY);
        for (mode, base) in [(Mode::Major, MAJOR_PROFILE), (Mode::Minor, MINOR_PROFILE)] {
            for tonic in 0..12usize {
                let mut rotated = [0.0; 12];
                for i in 0..12 {
                    rotated[(i + tonic) % 12] = base[i];
                }
                let n = 12.0;
                let (sx, sy): (f64, f64) = (profile.iter().sum(), rotated.iter().sum());
                let sxy: f64 = (0..12).map(|i| profile[i] * rotated[i]).sum();
                let sxx: f64 = profile.iter().map(|x| x * x).sum();
                let syy: f64 = rotated.iter().map(|y| y * y).sum();
                let r = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
                if r > best.2 {
                    best = (tonic as u8, mode, r);
                }
            }
        }
        best
    }

    #[test]
    fn c_major_scale_is_c_major() {
        let scale = expanded(&[60, 62, 64, 65, 67, 69, 71]);
        let est = estimate_key(&pitch_class_profile(&scale)).unwrap();
        let (tonic, mode, r) = brute_force_key(&pitch_class_profile(&scale));
        assert_eq!((tonic, mode), (0, Mode::Major));
        assert_eq!(est.key, Key::new(0, Mode::Major));
        assert!((est.r - r).abs() < 1e-12);
    }

    #[test]
    fn rotation_equivariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let profile: [f64; 12] = std::array::from_fn(|_| rng.gen_range(0.0..10.0));
            let base = estimate_key(&profile).unwrap();
            let (bt, bm, br) = brute_force_key(&profile);
            assert_eq!((base.key.tonic, base.key.mode), (bt, bm));
            assert!((base.r - br).abs() < 1e-12);
            for k in 0..12usize {
                let rotated: [f64; 12] = std::array::from_fn(|c| profile[(c + 12 - k) % 12]);
                let est = estimate_key(&rotated).unwrap();
                assert_eq!(est.key.tonic as usize, (base.key.tonic as usize + k) % 12);
                assert_eq!(est.key.mode, base.key.mode);
                assert_eq!(est.r, base.r);
            }
        }
    }

    #[test]
    fn flat_profile_is_degenerate() {
        assert!(matches!(estimate_key(&[3.0; 12]), Err(Error::DegenerateProfile)));
    }

    #[test]
    fn relative_keys() {
        assert_eq!(Key::new(0, Mode::Major).relative(), Key::new(9, Mode::Minor));
        assert_eq!(Key::new(9, Mode::Minor).relative(), Key::new(0, Mode::Major));
        assert_eq!(Key::new(9, Mode::Minor).name(), "A minor");
    }

    fn two_pass_pearson(x: &[f64; 12], y: &[f64; 12]) -> f64 {
        let mx = x.iter().sum::<f64>() / 12.0;
        let my = y.iter().sum::<f64>() / 12.0;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn key_accuracy_cases() {
        let gt = MidiSequence::from_pairs(&[(60, 10), (62, 5), (64, 8), (65, 3), (67, 12), (69, 4), (71, 2), (72, 6)])
            .unwrap();
        let key = Key::new(0, Mode::Major);
        assert_eq!(key_accuracy(&gt, &gt, key).unwrap(), 1.0);

        let pred = gt.transpose(6).unwrap();
        let mut gt_counts = [0.0; 12];
        let mut pred_counts = [0.0; 12];
        for (p, d) in gt.pairs() {
            gt_counts[(p % 12) as usize] += d as f64;
            pred_counts[((p + 6) % 12) as usize] += d as f64;
        }
        let mut kp = [0.0; 12];
        kp.copy_from_slice(&MAJOR_PROFILE);
        let expected = two_pass_pearson(&pred_counts, &kp) / two_pass_pearson(&gt_counts, &kp);
        assert!((key_accuracy(&gt, &pred, key).unwrap() - expected).abs() < 1e-12);
        assert!(expected < 0.0);
    }

    #[test]
    fn key_accuracy_undefined_when_r_zero() {
        // a flat profile has zero correlation with every key
        let pairs: Vec<(i32, u32)> = (60..72).map(|p| (p, 1)).collect();
        let gt = MidiSequence::from_pairs(&pairs).unwrap();
        assert!(matches!(key_accuracy(&gt, &gt, Key::new(0, Mode::Major)), Err(Error::Undefined)));
    }
}
