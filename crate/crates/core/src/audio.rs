//! Log-mel analysis at 24 kHz (80 bins, hop 320, so 75 frames per second),
//! Griffin-Lim reconstruction for listening, WAV files and stem mixing.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 24_000;
pub const HOP: usize = 320;
pub const N_FFT: usize = 1024;
pub const N_MELS: usize = 80;
pub const MEL_RATE: f64 = SAMPLE_RATE as f64 / HOP as f64;
/// Magnitude floor before the log; silence sits at `ln(LOG_FLOOR)`.
pub const LOG_FLOOR: f32 = 1e-5;

const MEL_MAGIC: &[u8; 4] = b"MELS";
const MEL_VERSION: u32 = 1;

/// `T × 80` log-mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    frames: Vec<Vec<f32>>,
}

impl MelSpec {
    pub fn new(frames: Vec<Vec<f32>>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("mel spectrogram has no frames"));
        }
        if frames.iter().any(|f| f.len() != N_MELS) {
            return Err(Error::invalid(format!("every mel frame needs {N_MELS} bins")));
        }
        if frames.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mel spectrogram has non-finite values"));
        }
        Ok(Self { frames })
    }

    /// A spectrogram at the silence floor.
    pub fn silence(n: usize) -> Self {
        Self { frames: vec![vec![LOG_FLOOR.ln(); N_MELS]; n.max(1)] }
    }

    pub fn frames(&self) -> &[Vec<f32>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn flat(&self) -> Vec<f32> {
        self.frames.iter().flatten().copied().collect()
    }

    pub fn from_flat(data: Vec<f32>, n: usize) -> Result<Self> {
        if data.len() != n * N_MELS {
            return Err(Error::invalid("flat mel data has the wrong length"));
        }
        Self::new(data.chunks(N_MELS).map(|c| c.to_vec()).collect())
    }

    /// Linear interpolation along time to `n` frames.
    pub fn resample(&self, n: usize) -> Self {
        Self { frames: resample_rows(&self.frames, n) }
    }

    /// Index of the loudest bin in each frame.
    pub fn dominant_bins(&self) -> Vec<usize> {
        self.frames
            .iter()
            .map(|f| f.iter().enumerate().fold(0, |best, (i, &v)| if v > f[best] { i } else { best }))
            .collect()
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MEL_MAGIC)?;
        w.write_all(&MEL_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(N_MELS as u32).to_le_bytes())?;
        w.write_all(&(MEL_RATE as f32).to_le_bytes())?;
        for v in self.frames.iter().flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read(r: &mut impl Read, path: &Path) -> Result<Self> {
        let mut head = [0u8; 20];
        r.read_exact(&mut head).map_err(|_| Error::format(path, "truncated mel header"))?;
        if &head[..4] != MEL_MAGIC {
            return Err(Error::format(path, "not a mel file"));
        }
        let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes"));
        if word(4) != MEL_VERSION {
            return Err(Error::format(path, format!("unsupported mel version {}", word(4))));
        }
        let (t, bins) = (word(8) as usize, word(12) as usize);
        if bins != N_MELS {
            return Err(Error::format(path, format!("expected {N_MELS} bins, found {bins}")));
        }
        let mut bytes = vec![0u8; t * bins * 4];
        r.read_exact(&mut bytes).map_err(|_| Error::format(path, "truncated mel data"))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Self::from_flat(data, t).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut f, path)
    }
}

/// Linear interpolation of row vectors to `n` rows (endpoints aligned).
pub fn resample_rows(rows: &[Vec<f32>], n: usize) -> Vec<Vec<f32>> {
    let m = rows.len();
    if m == 0 || n == 0 {
        return Vec::new();
    }
    if m == 1 || n == 1 {
        return vec![rows[0].clone(); n];
    }
    (0..n)
        .map(|i| {
            let x = i as f64 * (m - 1) as f64 / (n - 1) as f64;
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(m - 1);
            let w = (x - lo as f64) as f32;
            rows[lo].iter().zip(&rows[hi]).map(|(a, b)| a + w * (b - a)).collect()
        })
        .collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters (peak 1) on the HTK mel scale from 0 Hz to Nyquist.
pub fn mel_filterbank() -> Vec<Vec<f32>> {
    let bins = N_FFT / 2 + 1;
    let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    let edges: Vec<f64> = (0..N_MELS + 2).map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64)).collect();
    let hz_per_bin = SAMPLE_RATE as f64 / N_FFT as f64;
    (0..N_MELS)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * hz_per_bin;
                    let w = if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    };
                    w as f32
                })
                .collect()
        })
        .collect()
}

/// Mel band whose center is closest to `hz`.
pub fn mel_bin_of(hz: f64) -> usize {
    let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    let pos = hz_to_mel(hz) / top * (N_MELS + 1) as f64 - 1.0;
    pos.round().clamp(0.0, (N_MELS - 1) as f64) as usize
}

fn hann() -> Vec<f32> {
    (0..N_FFT).map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / N_FFT as f64).cos()) as f32).collect()
}

/// Short-time analysis with frames centered at multiples of the hop.
pub struct MelAnalyzer {
    filters: Vec<Vec<f32>>,
    window: Vec<f32>,
    fft: Arc<dyn Fft<f32>>,
    ifft: Arc<dyn Fft<f32>>,
}

impl Default for MelAnalyzer {
    fn default() -> Self {
        Self::new()
    }
}

impl MelAnalyzer {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        Self {
            filters: mel_filterbank(),
            window: hann(),
            fft: planner.plan_fft_forward(N_FFT),
            ifft: planner.plan_fft_inverse(N_FFT),
        }
    }

    /// Number of frames for `samples` samples: `ceil(samples / HOP)`.
    pub fn frame_count(samples: usize) -> usize {
        samples.div_ceil(HOP).max(1)
    }

    fn stft(&self, wav: &[f32]) -> Vec<Vec<Complex<f32>>> {
        let n = Self::frame_count(wav.len());
        let half = N_FFT as isize / 2;
        (0..n)
            .map(|t| {
                let center = (t * HOP) as isize;
                let mut buf: Vec<Complex<f32>> = (0..N_FFT)
                    .map(|i| {
                        let idx = center + i as isize - half;
                        let x = if idx >= 0 && (idx as usize) < wav.len() { wav[idx as usize] } else { 0.0 };
                        Complex::new(x * self.window[i], 0.0)
                    })
                    .collect();
                self.fft.process(&mut buf);
                buf.truncate(N_FFT / 2 + 1);
                buf
            })
            .collect()
    }

    fn mel_of_magnitudes(&self, mags: &[f32]) -> Vec<f32> {
        self.filters
            .iter()
            .map(|f| f.iter().zip(mags).map(|(w, m)| w * m).sum::<f32>().max(LOG_FLOOR).ln())
            .collect()
    }

    pub fn mel(&self, wav: &[f32]) -> MelSpec {
        let frames = self
            .stft(wav)
            .iter()
            .map(|spec| {
                let mags: Vec<f32> = spec.iter().map(|c| c.norm()).collect();
                self.mel_of_magnitudes(&mags)
            })
            .collect();
        MelSpec { frames }
    }

    /// Rough linear magnitudes for a mel frame (filter-weighted spreading).
    fn magnitudes_of_mel(&self, mel: &[f32]) -> Vec<f32> {
        let bins = N_FFT / 2 + 1;
        let energy: Vec<f32> = mel.iter().map(|v| (v.exp() - LOG_FLOOR).max(0.0)).collect();
        let widths: Vec<f32> = self.filters.iter().map(|f| f.iter().sum::<f32>().max(1e-6)).collect();
        (0..bins)
            .map(|k| {
                let (num, den) = self.filters.iter().enumerate().fold((0.0, 0.0), |(n, d), (m, f)| {
                    (n + f[k] * energy[m] / widths[m], d + f[k])
                });
                if den > 0.0 {
                    num / den
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Griffin-Lim phase estimation; starts from zero phase so the result
    /// is deterministic.
    pub fn griffin_lim(&self, mel: &MelSpec, iters: usize) -> Vec<f32> {
        let target: Vec<Vec<f32>> = mel.frames().iter().map(|f| self.magnitudes_of_mel(f)).collect();
        let len = mel.len() * HOP;
        let mut spec: Vec<Vec<Complex<f32>>> =
            target.iter().map(|m| m.iter().map(|&a| Complex::new(a, 0.0)).collect()).collect();
        let mut wav = self.istft(&spec, len);
        for _ in 0..iters {
            let est = self.stft(&wav);
            for (t, frame) in spec.iter_mut().enumerate() {
                for (k, c) in frame.iter_mut().enumerate() {
                    let e = est[t][k];
                    let n = e.norm();
                    *c = if n > 1e-12 { e * (target[t][k] / n) } else { Complex::new(target[t][k], 0.0) };
                }
            }
            wav = self.istft(&spec, len);
        }
        wav
    }

    fn istft(&self, spec: &[Vec<Complex<f32>>], len: usize) -> Vec<f32> {
        let half = N_FFT as isize / 2;
        let mut out = vec![0f32; len];
        let mut norm = vec![0f32; len];
        for (t, frame) in spec.iter().enumerate() {
            let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
            buf[..frame.len()].copy_from_slice(frame);
            for k in 1..N_FFT / 2 {
                buf[N_FFT - k] = frame[k].conj();
            }
            self.ifft.process(&mut buf);
            let center = (t * HOP) as isize;
            for i in 0..N_FFT {
                let idx = center + i as isize - half;
                if idx >= 0 && (idx as usize) < len {
                    let w = self.window[i];
                    out[idx as usize] += buf[i].re / N_FFT as f32 * w;
                    norm[idx as usize] += w * w;
                }
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-8 {
                *o /= n;
            }
        }
        out
    }
}

/// Additive synthesis: per-frame fundamental (0 = silent) and amplitude,
/// with harmonic weights; amplitude and frequency are interpolated between
/// frames so phase stays continuous.
pub fn render_harmonic(f0: &[f64], amp: &[f32], harmonics: &[f32], frame_rate: f64) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    let per_frame = sr / frame_rate;
    let n = (f0.len() as f64 * per_frame).round() as usize;
    let mut out = vec![0f32; n];
    let mut phase = 0f64;
    for (i, o) in out.iter_mut().enumerate() {
        let fpos = i as f64 / per_frame;
        let k = (fpos.floor() as usize).min(f0.len() - 1);
        let f = f0[k];
        let a = amp[k];
        if f > 0.0 && a > 0.0 {
            phase += 2.0 * PI * f / sr;
            let mut s = 0f64;
            for (h, &w) in harmonics.iter().enumerate() {
                let fh = f * (h + 1) as f64;
                if fh < sr / 2.0 {
                    s += w as f64 * ((h + 1) as f64 * phase).sin();
                }
            }
            *o = (a as f64 * s) as f32;
        }
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let path = path.as_ref();
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::format(path, e.to_string()))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        w.write_sample(v).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.finalize().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(())
}

/// Reads a mono or multichannel WAV, averaging channels to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f32>, u32)> {
    let path = path.as_ref();
    let mut r = hound::WavReader::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let spec = r.spec();
    let raw: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().collect::<std::result::Result<_, _>>(),
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            r.samples::<i32>().map(|s| s.map(|v| v as f32 / scale)).collect::<std::result::Result<_, _>>()
        }
    }
    .map_err(|e| Error::format(path, e.to_string()))?;
    let ch = spec.channels.max(1) as usize;
    let mono = raw.chunks(ch).map(|c| c.iter().sum::<f32>() / ch as f32).collect();
    Ok((mono, spec.sample_rate))
}

/// Sum of two stems at −3 dB each, peak-normalized to 0.99 when it would
/// clip or is quieter than that.
pub fn remix(vocal: &[f32], accomp: &[f32]) -> Vec<f32> {
    let g = 10f32.powf(-3.0 / 20.0);
    let n = vocal.len().max(accomp.len());
    let mut mix: Vec<f32> = (0..n)
        .map(|i| g * (vocal.get(i).copied().unwrap_or(0.0) + accomp.get(i).copied().unwrap_or(0.0)))
        .collect();
    let peak = mix.iter().fold(0f32, |p, s| p.max(s.abs()));
    if peak > 1e-9 {
        let k = 0.99 / peak;
        mix.iter_mut().for_each(|s| *s *= k);
    }
    mix
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_rate_is_75_hz() {
        assert_eq!(MEL_RATE, 75.0);
        assert_eq!(MelAnalyzer::frame_count(480 * 100), 150);
        assert_eq!(MelAnalyzer::frame_count(480 * 101), 152);
    }

    #[test]
    fn sine_peaks_at_its_mel_band() {
        let a = MelAnalyzer::new();
        let f = 440.0;
        let wav: Vec<f32> = (0..24_000).map(|i| (2.0 * PI * f * i as f64 / 24_000.0).sin() as f32 * 0.5).collect();
        let mel = a.mel(&wav);
        assert_eq!(mel.len(), 75);
        let mid = &mel.dominant_bins()[30..45];
        let expect = mel_bin_of(f);
        assert!(mid.iter().all(|&b| b.abs_diff(expect) <= 1), "{mid:?} vs {expect}");
    }

    #[test]
    fn silence_is_at_floor() {
        let mel = MelAnalyzer::new().mel(&vec![0.0; 4800]);
        assert!(mel.flat().iter().all(|&v| (v - LOG_FLOOR.ln()).abs() < 1e-6));
    }

    #[test]
    fn mel_file_roundtrip_and_corruption() {
        let mel = MelSpec::new((0..7).map(|t| (0..N_MELS).map(|b| (t * b) as f32 * 0.1 - 3.0).collect()).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mel");
        mel.save(&p).unwrap();
        assert_eq!(MelSpec::load(&p).unwrap(), mel);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(MelSpec::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn griffin_lim_keeps_the_pitch() {
        let a = MelAnalyzer::new();
        let wav = render_harmonic(&[220.0; 50], &[0.3; 50], &[1.0, 0.5, 0.25], 50.0);
        let mel = a.mel(&wav);
        let back = a.griffin_lim(&mel, 16);
        assert_eq!(back.len(), mel.len() * HOP);
        let again = a.mel(&back);
        let d0 = mel.dominant_bins();
        let d1 = again.dominant_bins();
        let agree = d0.iter().zip(&d1).filter(|(x, y)| x.abs_diff(**y) <= 1).count();
        assert!(agree as f64 / d0.len() as f64 > 0.9);
    }

    #[test]
    fn remix_is_peak_normalized() {
        let mix = remix(&[0.5, -1.0, 0.2], &[0.5, 0.0]);
        assert_eq!(mix.len(), 3);
        let peak = mix.iter().fold(0f32, |p, s| p.max(s.abs()));
        assert!((peak - 0.99).abs() < 1e-6);
        assert!(mix[0] > 0.0 && mix[1] < 0.0);
    }

    #[test]
    fn wav_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let s: Vec<f32> = (0..100).map(|i| (i as f32 / 50.0) - 1.0).collect();
        write_wav(&p, &s).unwrap();
        let (back, sr) = read_wav(&p).unwrap();
        assert_eq!(sr, SAMPLE_RATE);
        assert!(s.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-4));
    }
}
