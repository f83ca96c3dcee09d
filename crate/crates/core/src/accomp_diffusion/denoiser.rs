use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{hybrid_condition, latent_frames_for, vocal_condition_indices, Conv1d, LatentClip, NoiseSchedule, Vae};
use crate::audio::MelSpec;
use crate::error::{Error, Result};
use crate::lm::{FrameTokens, Preset, SegmentContent};
use crate::nn::{
    load_checkpoint, read_checkpoint_config, save_checkpoint, sinusoidal, Adam, Embedding, LayerNorm, Linear,
    ParamStore, SelfAttention,
};
use crate::prompt::ConditionDropout;
use crate::rvq::LM_BOOKS;
use crate::text::{truncate_tokens, ACCOMP_PROMPT_MAX_TOKENS};

pub const LDM_STAGE_TAG: &str = "ldm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdmConfig {
    pub latent_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub kernel: usize,
    /// Acoustic codebook size of the vocal condition.
    pub book_size: usize,
    pub prompt_vocab: usize,
    /// Width of frozen prompt vectors; 0 when prompts arrive as ids.
    pub prompt_vector_dim: usize,
    pub steps: usize,
    /// Latents are divided by this before diffusion.
    pub latent_scale: f32,
    pub dropout: ConditionDropout,
    pub seed: u64,
}

impl LdmConfig {
    pub fn preset(preset: Preset, book_size: usize, prompt_vocab: usize) -> Self {
        let (width, layers, heads, ffn_hidden, steps) = match preset {
            Preset::Tiny => (32, 1, 2, 64, 100),
            Preset::Desk => (128, 4, 4, 256, 100),
            Preset::PaperMidi | Preset::PaperVocal => (576, 4, 8, 2304, 1000),
        };
        Self {
            latent_dim: super::LATENT_DIM,
            width,
            layers,
            heads,
            ffn_hidden,
            kernel: 9,
            book_size,
            prompt_vocab,
            prompt_vector_dim: 0,
            steps,
            latent_scale: 1.0,
            dropout: ConditionDropout::default(),
            seed: 0,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::scaled_linear(self.steps)
    }
}

#[derive(Debug, Clone)]
struct FftBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    conv: Conv1d,
    out: Linear,
}

impl FftBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &LdmConfig) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.width)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), cfg.width, cfg.heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.width)?,
            conv: Conv1d::new(store, &format!("{name}.conv"), cfg.width, cfg.ffn_hidden, cfg.kernel)?,
            out: Linear::new(store, &format!("{name}.out"), cfg.ffn_hidden, cfg.width)?,
        })
    }

    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let xs = (xs + self.attn.forward(&self.norm1.forward(xs)?, None, None)?)?;
        let h = self.conv.forward(&self.norm2.forward(&xs)?)?.gelu()?;
        &xs + self.out.forward(&h)?
    }
}

/// Noise predictor with hybrid conditioning.
pub struct Ldm {
    cfg: LdmConfig,
    store: ParamStore,
    schedule: NoiseSchedule,
    z_in: Linear,
    vocal_emb: Vec<Embedding>,
    fuse: Linear,
    prompt_emb: Embedding,
    prompt_vec: Option<Linear>,
    prompt_pos: Embedding,
    time1: Linear,
    time2: Linear,
    blocks: Vec<FftBlock>,
    norm: LayerNorm,
    head: Linear,
}

impl Ldm {
    pub fn new(cfg: LdmConfig, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.width == 0 || cfg.layers == 0 || cfg.book_size == 0 || cfg.prompt_vocab == 0 {
            return Err(Error::Config("diffusion model sizes must be nonzero".into()));
        }
        if !(cfg.latent_scale > 0.0) {
            return Err(Error::Config("latent scale must be positive".into()));
        }
        let schedule = cfg.schedule()?;
        let mut store = ParamStore::new(cfg.seed, dtype, device.clone());
        let d = cfg.width;
        let z_in = Linear::new(&mut store, "z_in", cfg.latent_dim, d)?;
        let vocal_emb = (0..LM_BOOKS)
            .map(|b| Embedding::new(&mut store, &format!("vocal_emb.{b}"), cfg.book_size, d))
            .collect::<Result<_>>()?;
        let fuse = Linear::no_bias(&mut store, "fuse", 2 * d, d)?;
        let prompt_emb = Embedding::new(&mut store, "prompt_emb", cfg.prompt_vocab, d)?;
        let prompt_vec = match cfg.prompt_vector_dim {
            0 => None,
            k => Some(Linear::new(&mut store, "prompt_vec", k, d)?),
        };
        let prompt_pos = Embedding::new(&mut store, "prompt_pos", ACCOMP_PROMPT_MAX_TOKENS, d)?;
        let time1 = Linear::new(&mut store, "time.0", d, d)?;
        let time2 = Linear::new(&mut store, "time.1", d, d)?;
        let blocks = (0..cfg.layers).map(|i| FftBlock::new(&mut store, &format!("blocks.{i}"), &cfg)).collect::<Result<_>>()?;
        let norm = LayerNorm::new(&mut store, "norm", d)?;
        let head = Linear::from_tensors(
            store.normal("head.weight", (cfg.latent_dim, d), 0.02)?,
            Some(store.constant("head.bias", cfg.latent_dim, 0.0)?),
        );
        Ok(Self {
            cfg,
            store,
            schedule,
            z_in,
            vocal_emb,
            fuse,
            prompt_emb,
            prompt_vec,
            prompt_pos,
            time1,
            time2,
            blocks,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &LdmConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Final projection; exposed for constructed-weight checks.
    pub fn fuse_weight(&self) -> &Linear {
        &self.fuse
    }

    fn normals(&self, rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor> {
        let v: Vec<f32> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Tensor::from_vec(v, (rows, cols), self.store.device())?.to_dtype(self.store.dtype())?)
    }

    /// Vocal condition `a`, `(n_lat, d)`: summed embeddings of the first
    /// three codes of each vocal frame, time-mapped to the latent rate.
    pub fn vocal_condition(&self, vocal: &FrameTokens, n_lat: usize) -> Result<Tensor> {
        if vocal.slots() < LM_BOOKS {
            return Err(Error::invalid("vocal tokens need three acoustic slots"));
        }
        let k = self.cfg.book_size as u32;
        let mut sum: Option<Tensor> = None;
        for (b, emb) in self.vocal_emb.iter().enumerate() {
            let ids = vocal.slot(b);
            if ids.iter().any(|&c| c >= k) {
                return Err(Error::invalid(format!("vocal code outside the {k}-entry codebook")));
            }
            let e = emb.lookup(&ids)?;
            sum = Some(match sum {
                Some(s) => (s + e)?,
                None => e,
            });
        }
        let idx = Tensor::new(vocal_condition_indices(vocal.len(), n_lat), self.store.device())?;
        Ok(sum.expect("three books").index_select(&idx, 0)?)
    }

    /// Prompt representation `s`, `(n, d)`, at most 80 positions.
    pub fn prompt_repr(&self, prompt: Option<&SegmentContent>) -> Result<Option<Tensor>> {
        let rows = match prompt {
            None => return Ok(None),
            Some(SegmentContent::Symbols { ids, .. }) => {
                let ids: Vec<u32> = ids.iter().filter_map(|t| t.first().copied()).collect();
                let ids = truncate_tokens(ids, ACCOMP_PROMPT_MAX_TOKENS, "accompaniment prompt");
                if ids.iter().any(|&i| i as usize >= self.cfg.prompt_vocab) {
                    return Err(Error::invalid("prompt id outside the prompt vocabulary"));
                }
                if ids.is_empty() {
                    return Ok(None);
                }
                self.prompt_emb.lookup(&ids)?
            }
            Some(SegmentContent::Vectors(v)) => {
                let proj = self.prompt_vec.as_ref().ok_or_else(|| Error::invalid("model takes prompt ids, not vectors"))?;
                let n = v.len().min(ACCOMP_PROMPT_MAX_TOKENS);
                if n == 0 {
                    return Ok(None);
                }
                if v[..n].iter().any(|r| r.len() != self.cfg.prompt_vector_dim) {
                    return Err(Error::invalid("prompt vector width mismatch"));
                }
                let flat: Vec<f32> = v[..n].iter().flatten().copied().collect();
                let t = Tensor::from_vec(flat, (n, self.cfg.prompt_vector_dim), self.store.device())?
                    .to_dtype(self.store.dtype())?;
                proj.forward(&t)?
            }
            Some(_) => return Err(Error::invalid("prompt must be ids or vectors")),
        };
        let n = rows.dim(0)?;
        let pos = self.prompt_pos.lookup(&(0..n as u32).collect::<Vec<_>>())?;
        Ok(Some((rows + pos)?))
    }

    /// Prediction over every position of `Z_t`, shape `(n + N, d_lat)`.
    pub fn forward_full(&self, z_t: &Tensor, a: &Tensor, s: Option<&Tensor>, t: usize) -> Result<Tensor> {
        self.schedule.beta(t)?;
        let n_lat = z_t.dim(0)?;
        let (dtype, dev) = (self.store.dtype(), self.store.device());
        let zp = self.z_in.forward(z_t)?;
        let zp = (zp + sinusoidal(&(0..n_lat).map(|i| i as f64).collect::<Vec<_>>(), self.cfg.width, dtype, dev)?)?;
        let h = hybrid_condition(&zp, a, s, &self.fuse)?;
        let temb = self.time2.forward(&self.time1.forward(&sinusoidal(&[t as f64], self.cfg.width, dtype, dev)?)?.gelu()?)?;
        let mut h = h.broadcast_add(&temb)?.unsqueeze(0)?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        Ok(self.head.forward(&self.norm.forward(&h)?)?.squeeze(0)?)
    }

    /// Noise prediction for the latent positions only, `(N, d_lat)`.
    pub fn predict_eps(&self, z_t: &Tensor, a: &Tensor, s: Option<&Tensor>, t: usize) -> Result<Tensor> {
        let full = self.forward_full(z_t, a, s, t)?;
        let n_lat = z_t.dim(0)?;
        Ok(full.narrow(0, full.dim(0)? - n_lat, n_lat)?)
    }

    /// Classifier-free guidance between the prompted and prompt-dropped
    /// predictions.
    pub fn guided_eps(&self, z_t: &Tensor, a: &Tensor, s: Option<&Tensor>, t: usize, guidance: f64) -> Result<Tensor> {
        let cond = self.predict_eps(z_t, a, s, t)?;
        if s.is_none() || guidance == 1.0 {
            return Ok(cond);
        }
        let uncond = self.predict_eps(z_t, a, None, t)?;
        Ok((&uncond + ((cond - &uncond)? * guidance)?)?)
    }

    /// Ancestral update `z_t → z_{t−1}` with `σ_t² = β_t`; `noise` is
    /// ignored at `t = 1`.
    pub fn denoise_step(&self, z_t: &Tensor, a: &Tensor, s: Option<&Tensor>, t: usize, guidance: f64, noise: &Tensor) -> Result<Tensor> {
        let eps = self.guided_eps(z_t, a, s, t, guidance)?;
        let (beta, alpha, ab) = (self.schedule.beta(t)?, self.schedule.alpha(t)?, self.schedule.alpha_bar(t)?);
        let mean = ((z_t - (eps * (beta / (1.0 - ab).sqrt()))?)? / alpha.sqrt())?;
        if t == 1 {
            return Ok(mean);
        }
        Ok((mean + (noise * beta.sqrt())?)?)
    }

    /// Runs the reverse chain from `z_T ~ N(0, I)`; returns scaled-down
    /// latents `(N, d_lat)`.
    pub fn sample(&self, a: &Tensor, s: Option<&Tensor>, guidance: f64, seed: u64) -> Result<Tensor> {
        let n_lat = a.dim(0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = self.normals(&mut rng, n_lat, self.cfg.latent_dim)?;
        for t in (1..=self.schedule.steps()).rev() {
            let noise = self.normals(&mut rng, n_lat, self.cfg.latent_dim)?;
            z = self.denoise_step(&z, a, s, t, guidance, &noise)?;
        }
        Ok(z)
    }

    /// Diffusion-space latent of a mel clip: the VAE mean over the scale.
    pub fn latent_target(&self, vae: &Vae, mel: &MelSpec) -> Result<Tensor> {
        let (x, _) = vae.mel_tensor(mel)?;
        let (mu, _) = vae.encode_tensor(&x)?;
        Ok((mu.squeeze(0)?.detach().to_dtype(self.store.dtype())? / self.cfg.latent_scale as f64)?)
    }

    /// Mean squared error over the latent rows of a full-length prediction;
    /// the first `prompt_len` rows are ignored.
    pub fn region_loss(pred_full: &Tensor, target_full: &Tensor, prompt_len: usize) -> Result<Tensor> {
        let n = pred_full.dim(0)? - prompt_len;
        let p = pred_full.narrow(0, prompt_len, n)?;
        let y = target_full.narrow(0, prompt_len, n)?;
        Ok((p - y)?.sqr()?.mean_all()?)
    }

    /// Loss at a fixed timestep and noise draw.
    pub fn loss_at(&self, z0: &Tensor, a: &Tensor, s: Option<&Tensor>, t: usize, eps: &Tensor) -> Result<Tensor> {
        let z_t = super::forward_diffuse(z0, t, eps, &self.schedule)?;
        let full = self.forward_full(&z_t, a, s, t)?;
        let n = match s {
            Some(s) => s.dim(0)?,
            None => 0,
        };
        let target = match n {
            0 => eps.clone(),
            n => Tensor::cat(&[&Tensor::zeros((n, self.cfg.latent_dim), eps.dtype(), eps.device())?, eps], 0)?,
        };
        Self::region_loss(&full, &target, n)
    }

    /// Uniform timestep, fresh noise and prompt dropout, then [`Self::loss_at`].
    pub fn train_loss(&self, z0: &Tensor, vocal: &FrameTokens, prompt: Option<&SegmentContent>, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n_lat = z0.dim(0)?;
        let a = self.vocal_condition(vocal, n_lat)?;
        let keep = self.cfg.dropout.sample(1, rng)[0];
        let s = if keep { self.prompt_repr(prompt)? } else { None };
        let t = rng.gen_range(1..=self.schedule.steps());
        let eps = self.normals(rng, n_lat, self.cfg.latent_dim)?;
        self.loss_at(z0, &a, s.as_ref(), t, &eps)
    }

    pub fn save(&self, path: impl AsRef<Path>, optimizer: Option<&Adam>, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("stage".into(), LDM_STAGE_TAG.into());
        meta.insert("config".into(), serde_json::to_string(&self.cfg)?);
        save_checkpoint(path, &self.store, &meta, optimizer)
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<(Self, BTreeMap<String, String>)> {
        let path = path.as_ref();
        let meta = read_checkpoint_config(path)?;
        if meta.get("stage").map(String::as_str) != Some(LDM_STAGE_TAG) {
            return Err(Error::Dependency(format!("{} is not a diffusion checkpoint", path.display())));
        }
        let cfg = serde_json::from_str(meta.get("config").ok_or_else(|| Error::format(path, "no diffusion config"))?)?;
        let ldm = Self::new(cfg, DType::F32, device)?;
        load_checkpoint(path, &ldm.store, None)?;
        Ok((ldm, meta))
    }

    pub fn resume(&self, path: impl AsRef<Path>, optimizer: &mut Adam) -> Result<()> {
        load_checkpoint(path, &self.store, Some(optimizer))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccompGenOptions {
    pub guidance: f64,
    pub seed: u64,
}

impl Default for AccompGenOptions {
    fn default() -> Self {
        Self { guidance: 3.0, seed: 0 }
    }
}

/// Accompaniment mel (`2 · N_lat` frames at 75 per second) for a vocal
/// token sequence.
pub fn sample_accompaniment(
    ldm: &Ldm,
    vae: &Vae,
    vocal: &FrameTokens,
    prompt: Option<&SegmentContent>,
    opts: &AccompGenOptions,
) -> Result<MelSpec> {
    if vae.config().latent_dim != ldm.config().latent_dim {
        return Err(Error::Config("VAE and diffusion latent widths differ".into()));
    }
    let n_lat = latent_frames_for(vocal.len());
    let a = ldm.vocal_condition(vocal, n_lat)?;
    let s = ldm.prompt_repr(prompt)?;
    let z = (ldm.sample(&a, s.as_ref(), opts.guidance, opts.seed)? * ldm.config().latent_scale as f64)?;
    vae.decode(&LatentClip::from_tensor(&z)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accomp_diffusion::VaeConfig;
    use crate::nn::AdamConfig;
    use crate::vocal_stage::vocal_vocab;

    fn tiny(dtype: DType) -> Ldm {
        let mut cfg = LdmConfig::preset(Preset::Tiny, 8, 16);
        cfg.latent_dim = 4;
        Ldm::new(cfg, dtype, &Device::Cpu).unwrap()
    }

    fn vocal(n: usize) -> FrameTokens {
        FrameTokens::new((0..n).map(|i| vec![(i % 8) as u32, (i / 2 % 8) as u32, 1, 3]).collect(), vocal_vocab(8)).unwrap()
    }

    fn prompt(ids: &[u32]) -> SegmentContent {
        SegmentContent::Symbols { tables: vec![0], ids: ids.iter().map(|&i| vec![i]).collect() }
    }

    #[test]
    fn output_lengths_follow_the_prompt_contract() {
        let m = tiny(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (n_vocal, n_prompt) in [(4, 0), (10, 3), (33, 7)] {
            let n_lat = latent_frames_for(n_vocal);
            let a = m.vocal_condition(&vocal(n_vocal), n_lat).unwrap();
            let p = prompt(&(1..=n_prompt as u32).collect::<Vec<_>>());
            let s = if n_prompt > 0 { m.prompt_repr(Some(&p)).unwrap() } else { None };
            let z = m.normals(&mut rng, n_lat, 4).unwrap();
            assert_eq!(m.forward_full(&z, &a, s.as_ref(), 5).unwrap().dims(), &[n_prompt + n_lat, 4]);
            assert_eq!(m.predict_eps(&z, &a, s.as_ref(), 5).unwrap().dims(), &[n_lat, 4]);
            let noise = z.zeros_like().unwrap();
            assert_eq!(m.denoise_step(&z, &a, s.as_ref(), 5, 2.0, &noise).unwrap().dims(), &[n_lat, 4]);
        }
        let long = prompt(&[1; 100]);
        assert_eq!(m.prompt_repr(Some(&long)).unwrap().unwrap().dim(0).unwrap(), 80);
    }

    #[test]
    fn guidance_one_without_prompt_is_unconditional() {
        let m = tiny(DType::F64);
        let a = m.vocal_condition(&vocal(6), 5).unwrap();
        let z = m.normals(&mut ChaCha8Rng::seed_from_u64(1), 5, 4).unwrap();
        let g = m.guided_eps(&z, &a, None, 10, 1.0).unwrap().to_vec2::<f64>().unwrap();
        let u = m.predict_eps(&z, &a, None, 10).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(g, u);
        let s = m.prompt_repr(Some(&prompt(&[2, 3]))).unwrap();
        let g = m.guided_eps(&z, &a, s.as_ref(), 10, 1.0).unwrap().to_vec2::<f64>().unwrap();
        let c = m.predict_eps(&z, &a, s.as_ref(), 10).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(g, c);
    }

    #[test]
    fn untrained_loss_is_near_unit_noise_energy() {
        let m = tiny(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut total = 0.0;
        for _ in 0..20 {
            let z0 = m.normals(&mut rng, 30, 4).unwrap();
            let l: f32 = m.train_loss(&z0, &vocal(20), Some(&prompt(&[1, 2])), &mut rng).unwrap().to_scalar().unwrap();
            total += l as f64;
        }
        // Per-frame squared error relative to the latent width.
        let per_frame = total / 20.0 * 4.0;
        assert!((per_frame / 4.0 - 1.0).abs() < 0.2, "{per_frame}");
    }

    #[test]
    fn prompt_region_labels_do_not_matter() {
        let m = tiny(DType::F64);
        let a = m.vocal_condition(&vocal(6), 5).unwrap();
        let s = m.prompt_repr(Some(&prompt(&[4, 5, 6]))).unwrap().unwrap();
        let z = m.normals(&mut ChaCha8Rng::seed_from_u64(3), 5, 4).unwrap();
        let pred = m.forward_full(&z, &a, Some(&s), 7).unwrap();
        let target = m.normals(&mut ChaCha8Rng::seed_from_u64(4), 8, 4).unwrap();
        let corrupted = Tensor::cat(&[&(target.narrow(0, 0, 3).unwrap() * 100.0).unwrap(), &target.narrow(0, 3, 5).unwrap()], 0).unwrap();
        let l1: f64 = Ldm::region_loss(&pred, &target, 3).unwrap().to_scalar().unwrap();
        let l2: f64 = Ldm::region_loss(&pred, &corrupted, 3).unwrap().to_scalar().unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let m = tiny(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = m.vocal_condition(&vocal(5), 4).unwrap();
        let s = m.prompt_repr(Some(&prompt(&[3, 1]))).unwrap();
        let z0 = m.normals(&mut rng, 4, 4).unwrap();
        let eps = m.normals(&mut rng, 4, 4).unwrap();
        let loss = |m: &Ldm| m.loss_at(&z0, &a, s.as_ref(), 30, &eps).unwrap();
        let grads = loss(&m).backward().unwrap();
        let names = [
            "z_in.weight",
            "fuse.weight",
            "time.0.weight",
            "blocks.0.attn.qkv.weight",
            "blocks.0.conv.weight",
            "blocks.0.out.bias",
            "blocks.0.norm2.weight",
            "head.weight",
        ];
        let h = 1e-6;
        for name in names {
            let var = m.store().get(name).unwrap_or_else(|| panic!("no {name}"));
            let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let orig = var.as_tensor().copy().unwrap();
            let flat: Vec<f64> = orig.flatten_all().unwrap().to_vec1().unwrap();
            for &k in &[0usize, flat.len() / 2, flat.len() - 1] {
                let eval = |delta: f64| {
                    let mut v = flat.clone();
                    v[k] += delta;
                    var.set(&Tensor::from_vec(v, orig.shape(), &Device::Cpu).unwrap()).unwrap();
                    loss(&m).to_scalar::<f64>().unwrap()
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                var.set(&orig).unwrap();
                let err = (num - g[k]).abs() / num.abs().max(g[k].abs()).max(1.0);
                assert!(err < 1e-4, "{name}[{k}]: numeric {num}, analytic {}", g[k]);
            }
        }
        // Conditions computed outside the loss still feed gradients through.
        let _ = a;
    }

    #[test]
    fn constant_latent_overfit_samples_the_constant() {
        let m = tiny(DType::F32);
        let n_lat = 6;
        let c: Vec<f32> = (0..n_lat * 4).map(|i| ((i % 4) as f32 - 1.5) * 0.4).collect();
        let z0 = Tensor::from_vec(c.clone(), (n_lat, 4), &Device::Cpu).unwrap();
        let v = vocal(8);
        let mut opt = Adam::new(m.store(), AdamConfig { lr: 3e-3, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for step in 0..1600 {
            match step {
                1000 => opt.set_lr(5e-4),
                1400 => opt.set_lr(1e-4),
                _ => {}
            }
            let mut total: Option<Tensor> = None;
            for _ in 0..8 {
                let l = m.train_loss(&z0, &v, None, &mut rng).unwrap();
                total = Some(match total {
                    Some(t) => (t + l).unwrap(),
                    None => l,
                });
            }
            opt.backward_step(&(total.unwrap() / 8.0).unwrap()).unwrap();
        }
        let a = m.vocal_condition(&v, n_lat).unwrap();
        let out: Vec<f32> = m.sample(&a, None, 1.0, 5).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mse = out.iter().zip(&c).map(|(x, y)| (x - y).powi(2)).sum::<f32>() / c.len() as f32;
        assert!(mse < 1e-3, "sample mse {mse}");
    }

    #[test]
    fn sampling_is_seeded_and_sized() {
        let mut cfg = LdmConfig::preset(Preset::Tiny, 8, 16);
        cfg.steps = 10;
        let ldm = Ldm::new(cfg, DType::F32, &Device::Cpu).unwrap();
        let vae = Vae::new(VaeConfig::preset(Preset::Tiny), DType::F32, &Device::Cpu).unwrap();
        let opts = AccompGenOptions { guidance: 2.0, seed: 4 };
        let p = prompt(&[1, 2, 3]);
        let a = sample_accompaniment(&ldm, &vae, &vocal(9), Some(&p), &opts).unwrap();
        assert_eq!(a.len(), 2 * latent_frames_for(9));
        assert_eq!(a, sample_accompaniment(&ldm, &vae, &vocal(9), Some(&p), &opts).unwrap());
        let other = sample_accompaniment(&ldm, &vae, &vocal(9), Some(&p), &AccompGenOptions { seed: 5, ..opts }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = tiny(DType::F32);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ldm.safetensors");
        m.save(&p, None, &BTreeMap::new()).unwrap();
        let (back, meta) = Ldm::load(&p, &Device::Cpu).unwrap();
        assert_eq!(meta["stage"], LDM_STAGE_TAG);
        let a = m.vocal_condition(&vocal(4), 3).unwrap();
        let z = m.normals(&mut ChaCha8Rng::seed_from_u64(0), 3, 4).unwrap();
        let x = m.predict_eps(&z, &a, None, 3).unwrap().to_vec2::<f32>().unwrap();
        let y = back.predict_eps(&z, &back.vocal_condition(&vocal(4), 3).unwrap(), None, 3).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(x, y);
    }
}
