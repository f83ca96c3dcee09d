//! Stage 2: accompaniment by latent diffusion.
//!
//! A VAE halves the mel frame rate into 20-dim latents. A non-causal
//! transformer with convolutional feed-forward layers predicts the noise
//! in those latents. Two conditions reach it. The vocal codes are fused
//! channel-wise with the noisy latent. The text prompt is prepended in
//! time, is never noised, and is cut from the output and the loss.

mod denoiser;
mod schedule;
mod vae;

pub use denoiser::{sample_accompaniment, AccompGenOptions, Ldm, LdmConfig, LDM_STAGE_TAG};
pub use schedule::{diffuse_step, forward_diffuse, NoiseSchedule};
pub use vae::{LatentClip, Vae, VaeConfig, VaeEncoding, DOWNSAMPLE, LATENT_DIM, STAGE_TAG as VAE_STAGE_TAG};

use candle_core::{Module, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};
use crate::vocal_stage::mel_frames_for;

/// 1-D convolution over `(B, T, C)` with "same" zero padding, computed as
/// one matmul over unfolded windows.
#[derive(Debug, Clone)]
pub(crate) struct Conv1d {
    lin: Linear,
    kernel: usize,
}

impl Conv1d {
    pub(crate) fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("conv kernel {kernel} must be odd")));
        }
        Ok(Self { lin: Linear::new(store, name, d_in * kernel, d_out)?, kernel })
    }

    pub(crate) fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        if self.kernel == 1 {
            return self.lin.forward(xs);
        }
        let t = xs.dim(1)?;
        let half = self.kernel / 2;
        let padded = xs.pad_with_zeros(1, half, half)?;
        let cols = (0..self.kernel).map(|j| padded.narrow(1, j, t)).collect::<candle_core::Result<Vec<_>>>()?;
        self.lin.forward(&Tensor::cat(&cols, 2)?)
    }
}

/// Latent length for a vocal clip of `vocal_frames` frames: the mel
/// length at 1.5× the vocal rate, halved by the VAE (rounding up).
pub fn latent_frames_for(vocal_frames: usize) -> usize {
    mel_frames_for(vocal_frames).div_ceil(DOWNSAMPLE)
}

/// Source frame of each latent step: upsample by 1.5 (nearest), then
/// resample the upsampled sequence to `n_lat` steps (nearest).
pub fn vocal_condition_indices(vocal_frames: usize, n_lat: usize) -> Vec<u32> {
    let up = mel_frames_for(vocal_frames);
    (0..n_lat)
        .map(|i| {
            let u = (((i as f64 + 0.5) * up as f64 / n_lat as f64) as usize).min(up - 1);
            ((u as f64 / 1.5) as usize).min(vocal_frames - 1) as u32
        })
        .collect()
}

/// `Z_t = concat_time(s, (a ⊕ z_t) W)`, all inputs `(len, d)`.
pub fn hybrid_condition(z_t: &Tensor, a: &Tensor, s: Option<&Tensor>, w: &Linear) -> Result<Tensor> {
    let (n, d) = z_t.dims2()?;
    let (na, da) = a.dims2()?;
    if na != n {
        return Err(Error::Alignment(format!("vocal condition has {na} steps, latent has {n}")));
    }
    if da != d {
        return Err(Error::invalid(format!("vocal condition width {da} differs from {d}")));
    }
    let fused = w.forward(&Tensor::cat(&[a, z_t], 1)?)?;
    match s {
        Some(s) if s.dim(0)? > 0 => Ok(Tensor::cat(&[s, &fused], 0)?),
        _ => Ok(fused),
    }
}
