//! Small transformer toolkit over candle tensors.
//!
//! Parameters live in a [`ParamStore`] that owns seeded initialization, so
//! two stores built with the same seed and layout are bitwise identical.
//! Every op used here has a backward pass in candle; the fused softmax and
//! layer-norm kernels of `candle_nn::ops` do not, so both are spelled out.

mod checkpoint;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint_config, save_checkpoint};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::ParamStore;

use candle_core::{DType, Device, Module, Tensor, D};

use crate::error::Result;

pub fn softmax_last(xs: &Tensor) -> candle_core::Result<Tensor> {
    let max = xs.max_keepdim(D::Minus1)?.detach();
    let num = xs.broadcast_sub(&max)?.exp()?;
    let den = num.sum_keepdim(D::Minus1)?;
    num.broadcast_div(&den)
}

pub fn log_softmax_last(xs: &Tensor) -> candle_core::Result<Tensor> {
    let max = xs.max_keepdim(D::Minus1)?.detach();
    let shifted = xs.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    shifted.broadcast_sub(&lse)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), (d_out, d_in), bound)?;
        let bias = Some(store.uniform(&format!("{name}.bias"), d_out, bound)?);
        Ok(Self { weight, bias })
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), (d_out, d_in), bound)?;
        Ok(Self { weight, bias: None })
    }

    /// Wraps explicit tensors; `weight` is `(d_out, d_in)`.
    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

impl Module for Linear {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let ys = xs.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => ys.broadcast_add(b),
            None => Ok(ys),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, count: usize, dim: usize) -> Result<Self> {
        Ok(Self { table: store.normal(&format!("{name}.table"), (count, dim), 0.02)? })
    }

    pub fn count(&self) -> usize {
        self.table.dim(0).unwrap_or(0)
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// Rows for `ids`, shape `(ids.len(), dim)`.
    pub fn lookup(&self, ids: &[u32]) -> candle_core::Result<Tensor> {
        let idx = Tensor::new(ids, self.table.device())?;
        self.table.index_select(&idx, 0)
    }

    /// Embeds an integer tensor of any shape, appending the feature axis.
    pub fn forward_ids(&self, ids: &Tensor) -> candle_core::Result<Tensor> {
        let mut shape = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let rows = self.table.index_select(&flat, 0)?;
        shape.push(self.table.dim(1)?);
        rows.reshape(shape)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), dim, 1.0)?,
            bias: store.constant(&format!("{name}.bias"), dim, 0.0)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mean = xs.mean_keepdim(D::Minus1)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Additive attention mask: query `i` (absolute position `offset + i`) may
/// see key `j` iff `j <= offset + i`.
pub fn causal_mask(queries: usize, keys: usize, offset: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mask: Vec<f32> = (0..queries)
        .flat_map(|i| (0..keys).map(move |j| if j <= offset + i { 0.0 } else { f32::NEG_INFINITY }))
        .collect();
    Ok(Tensor::from_vec(mask, (queries, keys), device)?.to_dtype(dtype)?)
}

/// Cached keys and values of one attention layer, shape `(B, H, T, hd)`.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    kv: Option<(Tensor, Tensor)>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.kv.as_ref().map_or(0, |(k, _)| k.dim(2).unwrap_or(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(crate::Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, xs: &Tensor, mask: Option<&Tensor>, cache: Option<&mut KvCache>) -> candle_core::Result<Tensor> {
        let (b, t, d) = xs.dims3()?;
        let hd = d / self.heads;
        let qkv = self.qkv.forward(xs)?.reshape((b, t, 3, self.heads, hd))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let mut k = qkv.get(1)?.contiguous()?;
        let mut v = qkv.get(2)?.contiguous()?;
        if let Some(cache) = cache {
            if let Some((pk, pv)) = &cache.kv {
                k = Tensor::cat(&[pk, &k], 2)?;
                v = Tensor::cat(&[pv, &v], 2)?;
            }
            cache.kv = Some((k.clone(), v.clone()));
        }
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let scores = match mask {
            Some(m) => scores.broadcast_add(m)?,
            None => scores,
        };
        let attn = softmax_last(&scores)?;
        let ys = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        self.out.forward(&ys)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    up: Linear,
    down: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim)?,
        })
    }
}

impl Module for Mlp {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        self.down.forward(&self.up.forward(xs)?.gelu()?)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, 4 * dim)?,
        })
    }

    pub fn forward(&self, xs: &Tensor, mask: Option<&Tensor>, cache: Option<&mut KvCache>) -> candle_core::Result<Tensor> {
        let xs = (xs + self.attn.forward(&self.norm1.forward(xs)?, mask, cache)?)?;
        &xs + self.mlp.forward(&self.norm2.forward(&xs)?)?
    }
}

/// Stack of pre-norm blocks with a final norm.
#[derive(Debug, Clone)]
pub struct Transformer {
    blocks: Vec<Block>,
    norm: LayerNorm,
    causal: bool,
}

impl Transformer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, layers: usize, heads: usize, causal: bool) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| Block::new(store, &format!("{name}.blocks.{i}"), dim, heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?, causal })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn new_cache(&self) -> Vec<KvCache> {
        vec![KvCache::default(); self.blocks.len()]
    }

    /// `xs` is `(B, T, dim)`. With a cache, `xs` holds only the new positions.
    pub fn forward(&self, xs: &Tensor, cache: Option<&mut [KvCache]>) -> Result<Tensor> {
        let t = xs.dim(1)?;
        let past = cache.as_ref().and_then(|c| c.first()).map_or(0, |c| c.len());
        let mask = if self.causal {
            Some(causal_mask(t, past + t, past, xs.dtype(), xs.device())?)
        } else {
            None
        };
        let mut xs = xs.clone();
        match cache {
            Some(cache) => {
                for (block, c) in self.blocks.iter().zip(cache.iter_mut()) {
                    xs = block.forward(&xs, mask.as_ref(), Some(c))?;
                }
            }
            None => {
                for block in &self.blocks {
                    xs = block.forward(&xs, mask.as_ref(), None)?;
                }
            }
        }
        Ok(self.norm.forward(&xs)?)
    }
}

/// Sinusoidal embedding of scalar positions or timesteps, shape `(n, dim)`.
pub fn sinusoidal(values: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(values.len() * dim);
    for &v in values {
        for i in 0..dim {
            let k = (i % half.max(1)) as f64;
            let freq = (-(10_000f64.ln()) * k / half.max(1) as f64).exp();
            data.push(if i < half { (v * freq).sin() } else { (v * freq).cos() } as f32);
        }
    }
    Ok(Tensor::from_vec(data, (values.len(), dim), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [0.0, 0.0, f64::NEG_INFINITY]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        assert!((s[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(s[1], vec![0.5, 0.5, 0.0]);
        let l = log_softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        assert!((l[0][2].exp() - s[0][2]).abs() < 1e-12);
    }

    #[test]
    fn cached_forward_matches_full() {
        let mut store = ParamStore::new(3, DType::F64, Device::Cpu);
        let tf = Transformer::new(&mut store, "t", 16, 2, 4, true).unwrap();
        let xs = store.sample_normal((1, 7, 16), 1.0).unwrap();
        let full = tf.forward(&xs, None).unwrap();
        let mut cache = tf.new_cache();
        let head = tf.forward(&xs.narrow(1, 0, 4).unwrap(), Some(&mut cache)).unwrap();
        let mut parts = vec![head];
        for i in 4..7 {
            parts.push(tf.forward(&xs.narrow(1, i, 1).unwrap(), Some(&mut cache)).unwrap());
        }
        let inc = Tensor::cat(&parts, 1).unwrap();
        let diff = (full - inc).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "{diff}");
    }
}
