use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, IndexOp, Module, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sample::{pick_token, Generation, GenerateOptions, LogitConstraint};
use super::{ConditionSegment, LmConfig, SegmentContent};
use crate::error::{Error, Result};
use crate::nn::{
    load_checkpoint, log_softmax_last, read_checkpoint_config, save_checkpoint, Adam, Embedding, Linear, ParamStore,
    Transformer,
};

struct AuxModule {
    table: Embedding,
    encoder: Option<(Embedding, Transformer)>,
}

/// Global/local transformer pair over `P`-slot frames.
pub struct GlobalLocalModel {
    cfg: LmConfig,
    store: ParamStore,
    slot_emb: Vec<Embedding>,
    aux: Vec<AuxModule>,
    concat_proj: Linear,
    global_pos: Embedding,
    start: Tensor,
    global: Transformer,
    ctx_proj: Linear,
    local_start: Tensor,
    local_tok: Vec<Embedding>,
    local_pos: Embedding,
    local: Transformer,
    heads: Vec<Linear>,
}

/// A sequence embedded into per-step rows, with the labels of its loss steps.
pub struct PreparedSequence {
    /// `(L, P · emb_dim)`.
    pub rows: Tensor,
    /// Step indices that enter the loss.
    pub loss_positions: Vec<usize>,
    /// Model-vocabulary labels of those steps, `P` each.
    pub labels: Vec<Vec<u32>>,
}

impl PreparedSequence {
    pub fn len(&self) -> usize {
        self.rows.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn encoder_heads(dim: usize) -> usize {
    if dim % 4 == 0 {
        4
    } else if dim % 2 == 0 {
        2
    } else {
        1
    }
}

impl GlobalLocalModel {
    pub fn new(cfg: LmConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.slots();
        let e = cfg.emb_dim;
        let (dg, dl) = (cfg.global.dim, cfg.local.dim);
        let mut store = ParamStore::new(cfg.seed, dtype, device.clone());
        let slot_emb = (0..p)
            .map(|s| Embedding::new(&mut store, &format!("slot_emb.{s}"), cfg.model_vocab(s), e))
            .collect::<Result<Vec<_>>>()?;
        let mut aux = Vec::new();
        for (i, t) in cfg.aux_tables.iter().enumerate() {
            let table = Embedding::new(&mut store, &format!("aux.{i}.emb"), t.vocab, e)?;
            let encoder = if t.encoder_layers > 0 {
                let pos = Embedding::new(&mut store, &format!("aux.{i}.pos"), t.max_len, e)?;
                let enc = Transformer::new(&mut store, &format!("aux.{i}.encoder"), e, t.encoder_layers, encoder_heads(e), false)?;
                Some((pos, enc))
            } else {
                None
            };
            aux.push(AuxModule { table, encoder });
        }
        let concat_proj = Linear::new(&mut store, "concat_proj", p * e, dg)?;
        let global_pos = Embedding::new(&mut store, "global_pos", cfg.max_steps, dg)?;
        let start = store.normal("global_start", (1, dg), 0.02)?;
        let global = Transformer::new(&mut store, "global", dg, cfg.global.layers, cfg.global.heads, true)?;
        let ctx_proj = Linear::new(&mut store, "ctx_proj", dg, dl)?;
        let local_start = store.normal("local_start", (1, dl), 0.02)?;
        let local_tok = (0..p)
            .map(|s| Embedding::new(&mut store, &format!("local_tok.{s}"), cfg.model_vocab(s), dl))
            .collect::<Result<Vec<_>>>()?;
        let local_pos = Embedding::new(&mut store, "local_pos", p, dl)?;
        let local = Transformer::new(&mut store, "local", dl, cfg.local.layers, cfg.local.heads, true)?;
        // Small output weights keep the initial predictive distribution close
        // to uniform.
        let heads = (0..p)
            .map(|s| {
                let w = store.normal(&format!("head.{s}.weight"), (cfg.model_vocab(s), dl), 0.02)?;
                let b = store.constant(&format!("head.{s}.bias"), cfg.model_vocab(s), 0.0)?;
                Ok(Linear::from_tensors(w, Some(b)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            store,
            slot_emb,
            aux,
            concat_proj,
            global_pos,
            start,
            global,
            ctx_proj,
            local_start,
            local_tok,
            local_pos,
            local,
            heads,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn device(&self) -> &Device {
        self.store.device()
    }

    /// Concatenates the slot embeddings of a step and projects to `d_G`.
    /// Ids are in the model vocabulary (content ids, BOS or EOS).
    pub fn channel_concat(&self, ids: &[u32]) -> Result<Tensor> {
        Ok(self.project_rows(&self.frame_rows(&[ids.to_vec()])?)?.squeeze(0)?)
    }

    fn frame_rows(&self, steps: &[Vec<u32>]) -> Result<Tensor> {
        let p = self.cfg.slots();
        let mut cols = Vec::with_capacity(p);
        for s in 0..p {
            let ids: Vec<u32> = steps
                .iter()
                .map(|st| {
                    let t = *st.get(s).ok_or_else(|| Error::invalid(format!("step has {} slots, expected {p}", st.len())))?;
                    if t as usize >= self.cfg.model_vocab(s) {
                        return Err(Error::invalid(format!("token {t} outside slot {s} vocabulary")));
                    }
                    Ok(t)
                })
                .collect::<Result<_>>()?;
            cols.push(self.slot_emb[s].lookup(&ids)?);
        }
        Ok(Tensor::cat(&cols, 1)?)
    }

    fn repeat_slots(&self, rows: Tensor) -> Result<Tensor> {
        let p = self.cfg.slots();
        Ok(Tensor::cat(&vec![rows; p], 1)?)
    }

    fn symbol_rows(&self, tables: &[usize], ids: &[Vec<u32>]) -> Result<Tensor> {
        if tables.is_empty() {
            return Err(Error::MalformedSequence("symbol segment names no table".into()));
        }
        let mut sum: Option<Tensor> = None;
        for (k, &t) in tables.iter().enumerate() {
            let table = self
                .aux
                .get(t)
                .ok_or_else(|| Error::MalformedSequence(format!("no auxiliary table {t}")))?;
            let col: Vec<u32> = ids
                .iter()
                .map(|row| {
                    let id = *row.get(k).ok_or_else(|| Error::MalformedSequence("symbol tuple too short".into()))?;
                    if id as usize >= self.cfg.aux_tables[t].vocab {
                        return Err(Error::MalformedSequence(format!("symbol {id} outside table {t}")));
                    }
                    Ok(id)
                })
                .collect::<Result<_>>()?;
            let rows = table.table.lookup(&col)?;
            sum = Some(match sum {
                Some(s) => (s + rows)?,
                None => rows,
            });
        }
        let mut rows = sum.expect("at least one table");
        if let [t] = tables {
            if let Some((pos, enc)) = &self.aux[*t].encoder {
                let n = ids.len();
                if n > pos.count() {
                    return Err(Error::MalformedSequence(format!(
                        "{n} symbols exceed the encoder length {}",
                        pos.count()
                    )));
                }
                let positions: Vec<u32> = (0..n as u32).collect();
                let xs = (rows + pos.lookup(&positions)?)?.unsqueeze(0)?;
                rows = enc.forward(&xs, None)?.squeeze(0)?;
            }
        }
        Ok(rows)
    }

    fn segment_rows(&self, seg: &ConditionSegment) -> Result<Tensor> {
        let p = self.cfg.slots();
        let mut body = match &seg.content {
            SegmentContent::Frames(f) => {
                if f.slots() != p {
                    return Err(Error::MalformedSequence(format!("segment has {} slots, model has {p}", f.slots())));
                }
                for (s, (&v, &mv)) in f.vocab_sizes().iter().zip(&self.cfg.vocab_sizes).enumerate() {
                    if v > mv {
                        return Err(Error::MalformedSequence(format!("slot {s} vocabulary {v} exceeds model {mv}")));
                    }
                }
                self.frame_rows(f.steps())?
            }
            SegmentContent::Symbols { tables, ids } => {
                if ids.is_empty() {
                    return Err(Error::MalformedSequence(format!("empty {:?} segment", seg.kind)));
                }
                self.repeat_slots(self.symbol_rows(tables, ids)?)?
            }
            SegmentContent::Vectors(v) => {
                if v.is_empty() {
                    return Err(Error::MalformedSequence(format!("empty {:?} segment", seg.kind)));
                }
                let e = self.cfg.emb_dim;
                if v.iter().any(|r| r.len() != e) {
                    return Err(Error::MalformedSequence(format!("condition vectors must have width {e}")));
                }
                let flat: Vec<f32> = v.iter().flatten().copied().collect();
                let rows = Tensor::from_vec(flat, (v.len(), e), self.device())?.to_dtype(self.dtype())?;
                self.repeat_slots(rows)?
            }
            SegmentContent::Bos => {
                let ids: Vec<u32> = (0..p).map(|s| self.cfg.bos(s)).collect();
                self.frame_rows(&[ids])?
            }
        };
        if seg.eos {
            let ids: Vec<u32> = (0..p).map(|s| self.cfg.eos(s)).collect();
            body = Tensor::cat(&[body, self.frame_rows(&[ids])?], 0)?;
        }
        Ok(body)
    }

    /// Embeds every segment and collects the labels of target steps.
    pub fn prepare(&self, segments: &[ConditionSegment]) -> Result<PreparedSequence> {
        if segments.is_empty() {
            return Err(Error::MalformedSequence("no segments".into()));
        }
        let p = self.cfg.slots();
        let mut rows = Vec::new();
        let mut loss_positions = Vec::new();
        let mut labels = Vec::new();
        let mut pos = 0;
        for seg in segments {
            rows.push(self.segment_rows(seg)?);
            if seg.is_target() {
                if let SegmentContent::Frames(f) = &seg.content {
                    for step in f.steps() {
                        loss_positions.push(pos);
                        labels.push(step.clone());
                        pos += 1;
                    }
                } else {
                    return Err(Error::MalformedSequence("target segment must hold frames".into()));
                }
                if seg.eos {
                    loss_positions.push(pos);
                    labels.push((0..p).map(|s| self.cfg.eos(s)).collect());
                    pos += 1;
                }
            } else {
                pos += seg.len();
            }
        }
        if pos > self.cfg.max_steps {
            return Err(Error::MalformedSequence(format!(
                "sequence of {pos} steps exceeds the model capacity of {}",
                self.cfg.max_steps
            )));
        }
        Ok(PreparedSequence { rows: Tensor::cat(&rows, 0)?, loss_positions, labels })
    }

    /// Projects concatenated rows `(B, L, P · emb_dim)` to global inputs
    /// `h` of shape `(B, L, d_G)`.
    pub fn project_rows(&self, rows: &Tensor) -> Result<Tensor> {
        Ok(self.concat_proj.forward(rows)?)
    }

    /// Runs the global transformer over `h` `(B, L, d_G)`. Output `i` is the
    /// context for step `i` and depends only on `h[.., ..i, ..]`.
    pub fn global_forward(&self, h: &Tensor) -> Result<Tensor> {
        let (b, l, dg) = h.dims3()?;
        if l > self.cfg.max_steps {
            return Err(Error::MalformedSequence(format!("{l} steps exceed capacity {}", self.cfg.max_steps)));
        }
        let start = self.start.reshape((1, 1, dg))?.broadcast_as((b, 1, dg))?;
        let shifted = if l > 1 { Tensor::cat(&[&start, &h.narrow(1, 0, l - 1)?], 1)? } else { start.contiguous()? };
        let pos = self.global_pos.table().narrow(0, 0, l)?;
        let xs = shifted.broadcast_add(&pos)?;
        self.global.forward(&xs, None)
    }

    /// Logits of every slot under teacher forcing.
    /// `ctx` is `(M, d_G)`, `labels` holds `M` steps of `P` ids.
    pub fn local_logits(&self, ctx: &Tensor, labels: &[Vec<u32>]) -> Result<Vec<Tensor>> {
        let p = self.cfg.slots();
        let m = ctx.dim(0)?;
        let dl = self.cfg.local.dim;
        let c = self.ctx_proj.forward(ctx)?.unsqueeze(1)?; // (M, 1, dL)
        let mut inputs = vec![self.local_start.broadcast_as((m, dl))?.contiguous()?];
        for s in 0..p.saturating_sub(1) {
            let ids: Vec<u32> = labels.iter().map(|l| l[s]).collect();
            inputs.push(self.local_tok[s].lookup(&ids)?);
        }
        let xs = Tensor::stack(&inputs, 1)?; // (M, P, dL)
        let xs = xs.broadcast_add(&c)?.broadcast_add(self.local_pos.table())?;
        let ys = self.local.forward(&xs, None)?;
        (0..p).map(|s| Ok(self.heads[s].forward(&ys.i((.., s, ..))?)?)).collect()
    }

    /// Logits of slot `prefix.len()` given the context vector of a step and
    /// the already chosen ids of its earlier slots.
    pub fn local_step(&self, ctx: &Tensor, prefix: &[u32]) -> Result<Tensor> {
        let s = prefix.len();
        let dl = self.cfg.local.dim;
        let c = self.ctx_proj.forward(&ctx.reshape((1, self.cfg.global.dim))?)?;
        let mut inputs = vec![self.local_start.clone()];
        for (k, &id) in prefix.iter().enumerate() {
            inputs.push(self.local_tok[k].lookup(&[id])?);
        }
        let xs = Tensor::cat(&inputs, 0)?.broadcast_add(&c)?;
        let xs = (xs + self.local_pos.table().narrow(0, 0, s + 1)?)?.reshape((1, s + 1, dl))?;
        let ys = self.local.forward(&xs, None)?;
        Ok(self.heads[s].forward(&ys.i((0, s, ..))?.unsqueeze(0)?)?.squeeze(0)?)
    }

    /// Mean token negative log-likelihood over the target steps of a batch.
    pub fn nll_prepared(&self, batch: &[PreparedSequence]) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let lmax = batch.iter().map(|b| b.len()).max().unwrap_or(0);
        let width = self.cfg.slots() * self.cfg.emb_dim;
        let mut padded = Vec::with_capacity(batch.len());
        let mut flat_positions = Vec::new();
        let mut labels = Vec::new();
        for (bi, seq) in batch.iter().enumerate() {
            let l = seq.len();
            let rows = if l < lmax {
                Tensor::cat(&[seq.rows.clone(), Tensor::zeros((lmax - l, width), self.dtype(), self.device())?], 0)?
            } else {
                seq.rows.clone()
            };
            padded.push(rows);
            for (&p, lab) in seq.loss_positions.iter().zip(&seq.labels) {
                flat_positions.push((bi * lmax + p) as u32);
                labels.push(lab.clone());
            }
        }
        if labels.is_empty() {
            return Err(Error::invalid("batch has no target steps"));
        }
        let rows = Tensor::stack(&padded, 0)?;
        let o = self.global_forward(&self.project_rows(&rows)?)?;
        let o = o.reshape((batch.len() * lmax, self.cfg.global.dim))?;
        let idx = Tensor::new(flat_positions.as_slice(), self.device())?;
        let ctx = o.index_select(&idx, 0)?;
        let logits = self.local_logits(&ctx, &labels)?;
        let m = labels.len();
        let mut total: Option<Tensor> = None;
        for (s, lg) in logits.iter().enumerate() {
            let target: Vec<u32> = labels.iter().map(|l| l[s]).collect();
            let target = Tensor::from_vec(target, (m, 1), self.device())?;
            let picked = log_softmax_last(lg)?.gather(&target, D::Minus1)?.sum_all()?;
            total = Some(match total {
                Some(t) => (t + picked)?,
                None => picked,
            });
        }
        let denom = (m * self.cfg.slots()) as f64;
        Ok((total.expect("at least one slot").neg()? / denom)?)
    }

    pub fn nll_loss(&self, segments: &[ConditionSegment]) -> Result<Tensor> {
        self.nll_prepared(&[self.prepare(segments)?])
    }

    pub fn nll_loss_batch(&self, batch: &[Vec<ConditionSegment>]) -> Result<Tensor> {
        let prepared = batch.iter().map(|s| self.prepare(s)).collect::<Result<Vec<_>>>()?;
        self.nll_prepared(&prepared)
    }

    /// Autoregressive continuation of `prefix`. Returned steps hold model ids
    /// (content ids only, since BOS is never emitted and EOS ends decoding).
    pub fn generate(
        &self,
        prefix: &[ConditionSegment],
        opts: &GenerateOptions,
        constraint: Option<&dyn LogitConstraint>,
    ) -> Result<Generation> {
        let p = self.cfg.slots();
        let dg = self.cfg.global.dim;
        let prepared = self.prepare(prefix)?;
        let c = prepared.len();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut cache = self.global.new_cache();

        // Inputs for positions 0..=c: start, then h_0..h_{c-1}.
        let h = self.project_rows(&prepared.rows)?; // (c, dG)
        if c + 1 > self.cfg.max_steps {
            return Err(Error::MalformedSequence(format!("prefix of {c} steps leaves no room to generate")));
        }
        let xs = Tensor::cat(&[&self.start, &h], 0)?;
        let xs = (xs + self.global_pos.table().narrow(0, 0, c + 1)?)?.unsqueeze(0)?;
        let out = self.global.forward(&xs, Some(&mut cache))?;
        let mut ctx = out.i((0, c, ..))?;

        let mut steps: Vec<Vec<u32>> = Vec::new();
        let mut hit_eos = false;
        let mut truncated = false;
        loop {
            if steps.len() >= opts.max_steps {
                truncated = opts.stop_on_eos;
                break;
            }
            let mut ids = Vec::with_capacity(p);
            for s in 0..p {
                let logits = self.local_step(&ctx, &ids)?;
                let mut logits: Vec<f32> = logits.to_dtype(DType::F32)?.to_vec1()?;
                logits[self.cfg.bos(s) as usize] = f32::NEG_INFINITY;
                let eos_ok = s == 0 && opts.stop_on_eos;
                if !eos_ok {
                    logits[self.cfg.eos(s) as usize] = f32::NEG_INFINITY;
                }
                if let Some(con) = constraint {
                    con.apply(&steps, s, &ids, &mut logits);
                }
                let tok = pick_token(&logits, &opts.sampler, &mut rng)?;
                ids.push(tok);
                if eos_ok && tok == self.cfg.eos(0) {
                    break;
                }
            }
            if ids.len() == 1 && opts.stop_on_eos && ids[0] == self.cfg.eos(0) {
                hit_eos = true;
                break;
            }
            steps.push(ids.clone());
            let pos = c + steps.len();
            if pos >= self.cfg.max_steps {
                truncated = true;
                break;
            }
            let h = self.channel_concat(&ids)?.unsqueeze(0)?;
            let x = (h + self.global_pos.table().narrow(0, pos, 1)?)?.reshape((1, 1, dg))?;
            let out = self.global.forward(&x, Some(&mut cache))?;
            ctx = out.i((0, 0, ..))?;
        }
        Ok(Generation { steps, hit_eos, truncated })
    }

    /// Saves parameters, optional optimizer state and the config; `extra`
    /// metadata entries are stored alongside.
    pub fn save(&self, path: impl AsRef<Path>, optimizer: Option<&Adam>, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("config".into(), serde_json::to_string(&self.cfg)?);
        save_checkpoint(path, &self.store, &meta, optimizer)
    }

    /// Rebuilds a model from a checkpoint written by [`Self::save`].
    pub fn load(path: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<(Self, BTreeMap<String, String>)> {
        let path = path.as_ref();
        let meta = read_checkpoint_config(path)?;
        let cfg: LmConfig = serde_json::from_str(
            meta.get("config").ok_or_else(|| Error::format(path, "checkpoint has no model config"))?,
        )?;
        let model = Self::new(cfg, dtype, device)?;
        let meta = load_checkpoint(path, &model.store, None)?;
        Ok((model, meta))
    }

    /// Loads parameters and optimizer moments into an existing model.
    pub fn resume(&self, path: impl AsRef<Path>, optimizer: &mut Adam) -> Result<BTreeMap<String, String>> {
        load_checkpoint(path, &self.store, Some(optimizer))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{AuxTable, FrameTokens, Sampler, SegmentKind};
    use crate::nn::AdamConfig;

    fn tiny(vocab: Vec<usize>, dtype: DType) -> GlobalLocalModel {
        let aux = vec![AuxTable { name: "text".into(), vocab: 20, encoder_layers: 1, max_len: 16 }];
        GlobalLocalModel::new(LmConfig::tiny(vocab, aux, 64), dtype, &Device::Cpu).unwrap()
    }

    fn frames(steps: Vec<Vec<u32>>, vocab: &[usize]) -> FrameTokens {
        FrameTokens::new(steps, vocab.to_vec()).unwrap()
    }

    #[test]
    fn global_context_is_causal() {
        let m = tiny(vec![6, 5], DType::F64);
        let base: Vec<Vec<u32>> = (0..8).map(|i| vec![i % 6, (i * 2) % 5]).collect();
        let mut changed = base.clone();
        changed[5] = vec![3, 4];
        let run = |steps: &Vec<Vec<u32>>| {
            let rows = m.frame_rows(steps).unwrap().unsqueeze(0).unwrap();
            m.global_forward(&m.project_rows(&rows).unwrap()).unwrap().squeeze(0).unwrap()
        };
        let a = run(&base);
        let b = run(&changed);
        let diff: Vec<f64> = (a - b).unwrap().abs().unwrap().max(1).unwrap().to_vec1().unwrap();
        // Steps 0..=5 cannot see step 5; steps 6 and 7 can.
        for (i, d) in diff.iter().enumerate() {
            if i <= 5 {
                assert_eq!(*d, 0.0, "step {i} leaked future input");
            } else {
                assert!(*d > 0.0, "step {i} ignores its past");
            }
        }
    }

    #[test]
    fn channel_concat_separates_slots() {
        let m = tiny(vec![6, 5], DType::F64);
        let a = m.channel_concat(&[2, 3]).unwrap();
        assert_eq!(a.dims(), &[32]);
        for other in [[1u32, 3], [2, 4]] {
            let b = m.channel_concat(&other).unwrap();
            let d: f64 = (&a - b).unwrap().abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
            assert!(d > 0.0);
        }
        assert!(matches!(m.channel_concat(&[8, 0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn batch_rows_are_independent() {
        let m = tiny(vec![6, 5], DType::F64);
        let steps: Vec<Vec<u32>> = (0..5).map(|i| vec![i % 6, i % 5]).collect();
        let rows = m.frame_rows(&steps).unwrap();
        let one = m.global_forward(&m.project_rows(&rows.unsqueeze(0).unwrap()).unwrap()).unwrap();
        let two = m.global_forward(&m.project_rows(&Tensor::stack(&[&rows, &rows], 0).unwrap()).unwrap()).unwrap();
        for b in 0..2 {
            let d: f64 = (one.get(0).unwrap() - two.get(b).unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn local_logits_are_causal_within_a_step() {
        let mut m = tiny(vec![6, 5, 7], DType::F64);
        let ctx = m.store.sample_normal(32, 1.0).unwrap();
        let ctx = ctx.unsqueeze(0).unwrap();
        let a = m.local_logits(&ctx, &[vec![1, 2, 3]]).unwrap();
        let b = m.local_logits(&ctx, &[vec![1, 4, 0]]).unwrap();
        let same = |x: &Tensor, y: &Tensor| -> f64 { (x - y).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap() };
        assert_eq!(same(&a[0], &b[0]), 0.0);
        assert_eq!(same(&a[1], &b[1]), 0.0);
        assert!(same(&a[2], &b[2]) > 0.0);
        // The incremental path agrees with teacher forcing.
        let step = m.local_step(&ctx.squeeze(0).unwrap(), &[1, 2]).unwrap();
        assert!(same(&step, &a[2].squeeze(0).unwrap()) < 1e-12);
        assert_eq!(a[2].dims(), &[1, 9]);
    }

    #[test]
    fn zero_context_projection_removes_context() {
        let mut m = tiny(vec![6, 5], DType::F64);
        let w = m.store().get("ctx_proj.weight").unwrap();
        w.set(&w.zeros_like().unwrap()).unwrap();
        let c1 = m.store.sample_normal(32, 1.0).unwrap();
        let c2 = m.store.sample_normal(32, 1.0).unwrap();
        let a = m.local_step(&c1, &[3]).unwrap();
        let b = m.local_step(&c2, &[3]).unwrap();
        let d: f64 = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn max_steps_one_yields_one_step() {
        let m = tiny(vec![6, 5], DType::F32);
        let opts = GenerateOptions { max_steps: 1, sampler: Sampler::Greedy, stop_on_eos: false, seed: 0 };
        let g = m.generate(&[ConditionSegment::bos()], &opts, None).unwrap();
        assert_eq!(g.steps.len(), 1);
        assert_eq!(g.steps[0].len(), 2);
        assert!(g.steps[0][0] < 6 && g.steps[0][1] < 5);
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let vocab = vec![30, 12];
        let m = tiny(vocab.clone(), DType::F32);
        let steps: Vec<Vec<u32>> = (0..20).map(|i| vec![(i * 7) % 30, (i * 5) % 12]).collect();
        let segs = vec![
            ConditionSegment::symbols(SegmentKind::TextSemantic, 0, vec![1, 2, 3]),
            ConditionSegment::bos(),
            ConditionSegment::target(frames(steps, &vocab), true),
        ];
        let loss: f32 = m.nll_loss(&segs).unwrap().to_scalar().unwrap();
        let expected = ((32f64).ln() + (14f64).ln()) / 2.0;
        assert!(((loss as f64) - expected).abs() / expected < 0.02, "{loss} vs {expected}");
    }

    #[test]
    fn prompt_labels_do_not_affect_loss() {
        let vocab = vec![6, 6];
        let m = tiny(vocab.clone(), DType::F64);
        let target = frames(vec![vec![1, 2], vec![3, 4]], &vocab);
        let mk = |cond: Vec<Vec<u32>>| {
            vec![
                ConditionSegment::frames(SegmentKind::ReferenceAcoustic, frames(cond, &vocab)),
                ConditionSegment::bos(),
                ConditionSegment::target(target.clone(), false),
            ]
        };
        let a = m.prepare(&mk(vec![vec![0, 0], vec![1, 1]])).unwrap();
        assert_eq!(a.loss_positions, vec![3, 4]);
        let la: f64 = m.nll_prepared(&[a]).unwrap().to_scalar().unwrap();
        let lb: f64 = m.nll_loss(&mk(vec![vec![0, 0], vec![1, 1]])).unwrap().to_scalar().unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn padding_in_batch_does_not_change_losses() {
        let vocab = vec![6, 6];
        let m = tiny(vocab.clone(), DType::F64);
        let short = vec![ConditionSegment::bos(), ConditionSegment::target(frames(vec![vec![1, 2]], &vocab), true)];
        let long = vec![
            ConditionSegment::bos(),
            ConditionSegment::target(frames(vec![vec![1, 2], vec![2, 3], vec![4, 5]], &vocab), true),
        ];
        let ls: f64 = m.nll_loss(&short).unwrap().to_scalar().unwrap();
        let ll: f64 = m.nll_loss(&long).unwrap().to_scalar().unwrap();
        let both: f64 = m.nll_loss_batch(&[short, long]).unwrap().to_scalar().unwrap();
        // Two target steps in the short sequence, four in the long one.
        let expected = (ls * 2.0 + ll * 4.0) / 6.0;
        assert!((both - expected).abs() < 1e-10);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let vocab = vec![5, 4];
        let m = tiny(vocab.clone(), DType::F64);
        let segs = vec![
            ConditionSegment::symbols(SegmentKind::TextSemantic, 0, vec![3, 7]),
            ConditionSegment::bos(),
            ConditionSegment::target(frames(vec![vec![1, 2], vec![4, 0], vec![2, 3]], &vocab), true),
        ];
        let loss = m.nll_loss(&segs).unwrap();
        let grads = loss.backward().unwrap();
        let eps = 1e-6;
        let names = [
            "slot_emb.0.table",
            "aux.0.emb.table",
            "aux.0.encoder.blocks.0.attn.qkv.weight",
            "concat_proj.weight",
            "global.blocks.1.mlp.up.weight",
            "global_start",
            "ctx_proj.bias",
            "local_tok.0.table",
            "local.blocks.0.norm1.weight",
            "head.1.weight",
        ];
        for name in names {
            let var = m.store().get(name).unwrap_or_else(|| panic!("no {name}"));
            let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no grad {name}"));
            let g: Vec<f64> = g.flatten_all().unwrap().to_vec1().unwrap();
            let orig = var.as_tensor().copy().unwrap();
            let flat: Vec<f64> = orig.flatten_all().unwrap().to_vec1().unwrap();
            for &k in &[0usize, flat.len() / 2, flat.len() - 1] {
                let eval = |delta: f64| {
                    let mut v = flat.clone();
                    v[k] += delta;
                    var.set(&Tensor::from_vec(v, orig.shape(), &Device::Cpu).unwrap()).unwrap();
                    let l: f64 = m.nll_loss(&segs).unwrap().to_scalar().unwrap();
                    l
                };
                let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
                var.set(&orig).unwrap();
                let err = (num - g[k]).abs() / num.abs().max(g[k].abs()).max(1.0);
                assert!(err < 1e-4, "{name}[{k}]: numeric {num}, analytic {}", g[k]);
            }
        }
    }

    #[test]
    fn overfits_and_greedy_reproduces() {
        let vocab = vec![8, 8];
        let m = tiny(vocab.clone(), DType::F32);
        let target: Vec<Vec<u32>> = (0..12).map(|i| vec![(i * 3) % 8, (i * 5 + 1) % 8]).collect();
        let prompt = ConditionSegment::symbols(SegmentKind::TextSemantic, 0, vec![4, 9, 2]);
        let segs = vec![prompt.clone(), ConditionSegment::bos(), ConditionSegment::target(frames(target.clone(), &vocab), true)];
        let mut opt = Adam::new(m.store(), AdamConfig { lr: 3e-3, ..Default::default() }).unwrap();
        let mut last = f32::INFINITY;
        for _ in 0..500 {
            let loss = m.nll_loss(&segs).unwrap();
            last = loss.to_scalar().unwrap();
            if last < 0.05 {
                break;
            }
            opt.backward_step(&loss).unwrap();
        }
        assert!(last < 0.05, "loss stayed at {last}");
        let opts = GenerateOptions { max_steps: 40, sampler: Sampler::Greedy, stop_on_eos: true, seed: 0 };
        let g = m.generate(&[prompt, ConditionSegment::bos()], &opts, None).unwrap();
        assert!(g.hit_eos);
        assert_eq!(g.steps, target);
    }

    #[test]
    fn cached_generation_matches_full_recompute() {
        let vocab = vec![7, 5];
        let m = tiny(vocab.clone(), DType::F64);
        let prefix = vec![ConditionSegment::symbols(SegmentKind::TextSemantic, 0, vec![1, 5]), ConditionSegment::bos()];
        let opts = GenerateOptions { max_steps: 6, sampler: Sampler::Greedy, stop_on_eos: false, seed: 0 };
        let g = m.generate(&prefix, &opts, None).unwrap();
        assert_eq!(g.steps.len(), 6);
        // Re-derive each step with a full, uncached forward pass.
        for k in 0..g.steps.len() {
            let prep = m.prepare(&prefix).unwrap();
            let mut rows = vec![prep.rows];
            if k > 0 {
                rows.push(m.frame_rows(&g.steps[..k]).unwrap());
            }
            let rows = Tensor::cat(&rows, 0).unwrap().unsqueeze(0).unwrap();
            let padded = Tensor::cat(&[rows.clone(), rows.narrow(1, 0, 1).unwrap()], 1).unwrap();
            let o = m.global_forward(&m.project_rows(&padded).unwrap()).unwrap();
            let ctx = o.i((0, o.dim(1).unwrap() - 1, ..)).unwrap();
            let mut ids = vec![];
            for s in 0..2 {
                let mut l: Vec<f32> = m.local_step(&ctx, &ids).unwrap().to_dtype(DType::F32).unwrap().to_vec1().unwrap();
                l[m.cfg.bos(s) as usize] = f32::NEG_INFINITY;
                l[m.cfg.eos(s) as usize] = f32::NEG_INFINITY;
                ids.push(pick_token(&l, &Sampler::Greedy, &mut ChaCha8Rng::seed_from_u64(0)).unwrap());
            }
            assert_eq!(ids, g.steps[k], "step {k}");
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let m = tiny(vec![9, 9], DType::F32);
        let prefix = vec![ConditionSegment::bos()];
        let opts = GenerateOptions { max_steps: 10, sampler: Sampler::TopK { k: 5, temperature: 1.0 }, stop_on_eos: false, seed: 7 };
        let a = m.generate(&prefix, &opts, None).unwrap();
        let b = m.generate(&prefix, &opts, None).unwrap();
        assert_eq!(a, b);
        let c = m.generate(&prefix, &GenerateOptions { seed: 8, ..opts }, None).unwrap();
        assert_ne!(a.steps, c.steps);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let vocab = vec![6, 4];
        let m = tiny(vocab.clone(), DType::F32);
        let segs = vec![ConditionSegment::bos(), ConditionSegment::target(frames(vec![vec![1, 2], vec![3, 0]], &vocab), true)];
        let mut opt = Adam::new(m.store(), AdamConfig::default()).unwrap();
        opt.backward_step(&m.nll_loss(&segs).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.safetensors");
        let mut extra = BTreeMap::new();
        extra.insert("stage".to_string(), "midi".to_string());
        m.save(&path, Some(&opt), &extra).unwrap();
        let (back, meta) = GlobalLocalModel::load(&path, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(meta["stage"], "midi");
        let a: f32 = m.nll_loss(&segs).unwrap().to_scalar().unwrap();
        let b: f32 = back.nll_loss(&segs).unwrap().to_scalar().unwrap();
        assert_eq!(a, b);
        let mut opt2 = Adam::new(back.store(), AdamConfig::default()).unwrap();
        back.resume(&path, &mut opt2).unwrap();
        assert_eq!(opt2.steps_taken(), 1);
    }
}
