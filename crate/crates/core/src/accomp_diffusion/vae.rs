//! 1-D convolutional VAE over log-mel frames, halving the frame rate.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Conv1d;
use crate::audio::{MelSpec, N_MELS};
use crate::error::{Error, Result};
use crate::lm::Preset;
use crate::nn::{load_checkpoint, read_checkpoint_config, save_checkpoint, Adam, LayerNorm, Linear, ParamStore};

pub const LATENT_DIM: usize = 20;
pub const DOWNSAMPLE: usize = 2;
pub const STAGE_TAG: &str = "vae";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub hidden: usize,
    /// Residual conv blocks per side; the first encoder block runs at the
    /// mel rate, the rest at the latent rate.
    pub layers: usize,
    pub latent_dim: usize,
    pub kernel: usize,
    pub kl_weight: f64,
    /// Log-mel normalization, set from training data.
    pub mel_mean: f32,
    pub mel_std: f32,
    pub seed: u64,
}

impl VaeConfig {
    pub fn preset(preset: Preset) -> Self {
        let hidden = match preset {
            Preset::Tiny => 32,
            Preset::Desk => 64,
            Preset::PaperMidi | Preset::PaperVocal => 256,
        };
        Self { hidden, layers: 3, latent_dim: LATENT_DIM, kernel: 5, kl_weight: 1e-4, mel_mean: -5.0, mel_std: 3.0, seed: 0 }
    }

    /// Sets the normalization from the mean and spread of every value.
    pub fn fit_normalization(&mut self, mels: &[MelSpec]) {
        let (mut n, mut sum, mut sq) = (0f64, 0f64, 0f64);
        for v in mels.iter().flat_map(|m| m.frames().iter().flatten()) {
            n += 1.0;
            sum += *v as f64;
            sq += (*v as f64).powi(2);
        }
        if n > 0.0 {
            let mean = sum / n;
            self.mel_mean = mean as f32;
            self.mel_std = ((sq / n - mean * mean).max(1e-6)).sqrt() as f32;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.latent_dim == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config("VAE needs nonzero sizes and an odd kernel".into()));
        }
        if !(self.mel_std > 0.0 && self.mel_mean.is_finite()) {
            return Err(Error::Config("VAE normalization must be finite with positive spread".into()));
        }
        Ok(())
    }
}

/// `N_lat × d_lat` latent frames.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    frames: Vec<Vec<f32>>,
}

impl LatentClip {
    pub fn new(frames: Vec<Vec<f32>>) -> Result<Self> {
        let d = frames.first().map_or(0, Vec::len);
        if frames.is_empty() || d == 0 || frames.iter().any(|f| f.len() != d) {
            return Err(Error::invalid("latent frames must be nonempty and equally wide"));
        }
        if frames.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent contains non-finite values"));
        }
        Ok(Self { frames })
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

    pub fn dim(&self) -> usize {
        self.frames[0].len()
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let flat: Vec<f32> = self.frames.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (self.len(), self.dim()), device)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(t.to_dtype(DType::F32)?.to_vec2()?)
    }
}

#[derive(Debug, Clone)]
pub struct VaeEncoding {
    pub mu: LatentClip,
    pub sigma: LatentClip,
    pub sample: LatentClip,
    /// The input had an odd frame count and its last frame was repeated.
    pub padded: bool,
}

#[derive(Debug, Clone)]
struct ResConv {
    norm: LayerNorm,
    conv: Conv1d,
}

impl ResConv {
    fn new(store: &mut ParamStore, name: &str, dim: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            conv: Conv1d::new(store, &format!("{name}.conv"), dim, dim, kernel)?,
        })
    }

    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        xs + self.conv.forward(&self.norm.forward(xs)?.gelu()?)?
    }
}

pub struct Vae {
    cfg: VaeConfig,
    store: ParamStore,
    enc_in: Linear,
    enc_blocks: Vec<ResConv>,
    merge: Linear,
    enc_out: Linear,
    dec_in: Linear,
    dec_blocks: Vec<ResConv>,
    split: Linear,
    dec_out: Linear,
}

impl Vae {
    pub fn new(cfg: VaeConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed, dtype, device.clone());
        let (h, k) = (cfg.hidden, cfg.kernel);
        let enc_in = Linear::new(&mut store, "enc.in", N_MELS, h)?;
        let enc_blocks = (0..cfg.layers).map(|i| ResConv::new(&mut store, &format!("enc.blocks.{i}"), h, k)).collect::<Result<_>>()?;
        let merge = Linear::new(&mut store, "enc.merge", DOWNSAMPLE * h, h)?;
        let enc_out = Linear::new(&mut store, "enc.out", h, 2 * cfg.latent_dim)?;
        let dec_in = Linear::new(&mut store, "dec.in", cfg.latent_dim, h)?;
        let dec_blocks = (0..cfg.layers).map(|i| ResConv::new(&mut store, &format!("dec.blocks.{i}"), h, k)).collect::<Result<_>>()?;
        let split = Linear::new(&mut store, "dec.split", h, DOWNSAMPLE * h)?;
        let dec_out = Linear::new(&mut store, "dec.out", h, N_MELS)?;
        Ok(Self { cfg, store, enc_in, enc_blocks, merge, enc_out, dec_in, dec_blocks, split, dec_out })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Normalized mel tensor `(1, T, 80)` with `T` made even by repeating
    /// the last frame.
    pub fn mel_tensor(&self, m: &MelSpec) -> Result<(Tensor, bool)> {
        let mut rows = m.frames().to_vec();
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mel spectrogram has non-finite values"));
        }
        let padded = rows.len() % DOWNSAMPLE != 0;
        if padded {
            rows.push(rows.last().expect("nonempty mel").clone());
        }
        let t = rows.len();
        let flat: Vec<f32> = rows.into_iter().flatten().map(|v| (v - self.cfg.mel_mean) / self.cfg.mel_std).collect();
        let dev = self.store.device();
        Ok((Tensor::from_vec(flat, (1, t, N_MELS), dev)?.to_dtype(self.store.dtype())?, padded))
    }

    /// `(B, T, 80)` normalized mels to `(mu, logvar)`, each `(B, T/2, d_lat)`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, t, _) = x.dims3()?;
        let mut h = self.enc_in.forward(x)?;
        h = self.enc_blocks[0].forward(&h)?;
        h = self.merge.forward(&h.reshape((b, t / DOWNSAMPLE, DOWNSAMPLE * self.cfg.hidden))?)?;
        for block in &self.enc_blocks[1..] {
            h = block.forward(&h)?;
        }
        let out = self.enc_out.forward(&h)?;
        let d = self.cfg.latent_dim;
        let mu = out.narrow(2, 0, d)?;
        let logvar = out.narrow(2, d, d)?.clamp(-10.0, 10.0)?;
        Ok((mu, logvar))
    }

    /// `(B, N, d_lat)` latents to normalized mels `(B, 2N, 80)`.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let (b, n, _) = z.dims3()?;
        let mut h = self.dec_in.forward(z)?;
        let last = self.dec_blocks.len() - 1;
        for block in &self.dec_blocks[..last] {
            h = block.forward(&h)?;
        }
        h = self.split.forward(&h)?.reshape((b, n * DOWNSAMPLE, self.cfg.hidden))?;
        h = self.dec_blocks[last].forward(&h)?;
        Ok(self.dec_out.forward(&h)?)
    }

    /// With `rng` absent, sigma is forced to zero and the sample is the mean.
    pub fn encode<R: Rng + ?Sized>(&self, m: &MelSpec, rng: Option<&mut R>) -> Result<VaeEncoding> {
        let (x, padded) = self.mel_tensor(m)?;
        let (mu, logvar) = self.encode_tensor(&x)?;
        let mu = mu.squeeze(0)?;
        let sigma = (logvar.squeeze(0)? * 0.5)?.exp()?;
        let sample = match rng {
            Some(rng) => {
                let noise: Vec<f32> = (0..mu.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
                let noise = Tensor::from_vec(noise, mu.shape(), mu.device())?.to_dtype(mu.dtype())?;
                (&mu + (&sigma * noise)?)?
            }
            None => mu.clone(),
        };
        Ok(VaeEncoding {
            mu: LatentClip::from_tensor(&mu)?,
            sigma: LatentClip::from_tensor(&sigma)?,
            sample: LatentClip::from_tensor(&sample)?,
            padded,
        })
    }

    pub fn decode(&self, z: &LatentClip) -> Result<MelSpec> {
        let zt = z.to_tensor(self.store.dtype(), self.store.device())?.unsqueeze(0)?;
        let x = self.decode_tensor(&zt)?.squeeze(0)?;
        let x = ((x * self.cfg.mel_std as f64)? + self.cfg.mel_mean as f64)?;
        MelSpec::new(x.to_dtype(DType::F32)?.to_vec2()?)
    }

    /// Reconstruction MSE (normalized units) plus weighted KL, averaged
    /// over clips.
    pub fn loss<R: Rng + ?Sized>(&self, mels: &[MelSpec], rng: &mut R) -> Result<Tensor> {
        if mels.is_empty() {
            return Err(Error::invalid("empty VAE batch"));
        }
        let mut total: Option<Tensor> = None;
        for m in mels {
            let (x, _) = self.mel_tensor(m)?;
            let (mu, logvar) = self.encode_tensor(&x)?;
            let noise: Vec<f32> = (0..mu.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
            let noise = Tensor::from_vec(noise, mu.shape(), mu.device())?.to_dtype(mu.dtype())?;
            let z = (&mu + ((&logvar * 0.5)?.exp()? * noise)?)?;
            let recon = (self.decode_tensor(&z)? - &x)?.sqr()?.mean_all()?;
            let kl = ((mu.sqr()? + logvar.exp()?)? - 1.0)?.sub(&logvar)?.mean_all()?;
            let l = (recon + (kl * (0.5 * self.cfg.kl_weight))?)?;
            total = Some(match total {
                Some(t) => (t + l)?,
                None => l,
            });
        }
        Ok((total.expect("nonempty") / mels.len() as f64)?)
    }

    /// Deterministic reconstruction error in dB-log units.
    pub fn reconstruction_mse(&self, m: &MelSpec) -> Result<f64> {
        let enc = self.encode::<rand_chacha::ChaCha8Rng>(m, None)?;
        let out = self.decode(&enc.mu)?;
        let (n, mut err) = (m.len(), 0f64);
        for (a, b) in m.frames().iter().zip(out.frames()) {
            err += a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>();
        }
        Ok(err / (n * N_MELS) as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>, optimizer: Option<&Adam>) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("stage".into(), STAGE_TAG.into());
        meta.insert("config".into(), serde_json::to_string(&self.cfg)?);
        save_checkpoint(path, &self.store, &meta, optimizer)
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let meta = read_checkpoint_config(path)?;
        if meta.get("stage").map(String::as_str) != Some(STAGE_TAG) {
            return Err(Error::Dependency(format!("{} is not a VAE checkpoint", path.display())));
        }
        let cfg = serde_json::from_str(meta.get("config").ok_or_else(|| Error::format(path, "no VAE config"))?)?;
        let vae = Self::new(cfg, DType::F32, device)?;
        load_checkpoint(path, &vae.store, None)?;
        Ok(vae)
    }

    pub fn resume(&self, path: impl AsRef<Path>, optimizer: &mut Adam) -> Result<()> {
        load_checkpoint(path, &self.store, Some(optimizer))?;
        Ok(())
    }
}
