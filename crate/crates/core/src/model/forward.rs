use super::weights::{GroupKey, RecordKind, WeightSource, WeightStore};
use super::{Activation, BlockKind, GroupActivation, ModelSpec};
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-6;

/// Gain-free RMS normalisation.
pub fn rms_norm(x: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().map(|&v| (v as f64 * inv) as f32).collect()
}

/// Row-major `rows x cols` matrix times vector, f64 accumulation.
fn matvec(m: &[f32], rows: usize, cols: usize, x: &[f32]) -> Vec<f32> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    m.chunks_exact(cols)
        .map(|row| dot(row, x) as f32)
        .collect()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Scaled dot-product attention of one query over cached keys/values.
fn attend(q: &[f32], keys: &[Vec<f32>], values: &[Vec<f32>]) -> Vec<f32> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let scores: Vec<f64> = keys.iter().map(|k| dot(q, k) * scale).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut out = vec![0f64; q.len()];
    for (p, v) in exps.iter().zip(values) {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += p / z * x as f64;
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Per-device key/value cache covering every KV head of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    // [layer][kv_head] -> per-position vectors
    keys: Vec<Vec<Vec<Vec<f32>>>>,
    values: Vec<Vec<Vec<Vec<f32>>>>,
}

impl KvCache {
    pub fn new(spec: &ModelSpec) -> Self {
        let empty = vec![vec![Vec::new(); spec.num_kv_heads]; spec.num_layers];
        Self {
            keys: empty.clone(),
            values: empty,
        }
    }

    /// Cached positions for `layer`.
    pub fn len(&self, layer: usize) -> usize {
        self.keys[layer].first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        (0..self.keys.len()).all(|l| self.len(l) == 0)
    }

    /// True when every KV head of every layer holds exactly `tokens` entries.
    pub fn covers(&self, tokens: usize) -> bool {
        self.keys
            .iter()
            .chain(&self.values)
            .all(|layer| layer.iter().all(|head| head.len() == tokens))
    }

    /// Project the normalised block input onto every KV head of `layer` and
    /// append the result.
    pub fn append(&mut self, src: &impl WeightSource, layer: usize, normed: &[f32]) -> Result<()> {
        let spec = *src.spec();
        let (dh, d) = (spec.head_dim(), spec.hidden_dim);
        for j in 0..spec.num_kv_heads {
            let rec = src.record(GroupKey::new(layer, RecordKind::KvProj, j))?;
            let (wk, wv) = rec.split_at(dh * d);
            self.keys[layer][j].push(matvec(wk, dh, d, normed));
            self.values[layer][j].push(matvec(wv, dh, d, normed));
        }
        Ok(())
    }

    /// Memory reserved for `seq_len` tokens, in bytes.
    pub fn reserved_bytes(spec: &ModelSpec, seq_len: usize) -> usize {
        spec.kv_cache_elements(seq_len) * 4
    }
}

/// Partial output of one group given the *normalised* block input.
pub(crate) fn compute_group_normed(
    src: &impl WeightSource,
    layer: usize,
    block: BlockKind,
    group: usize,
    normed: &[f32],
    kv: &KvCache,
) -> Result<Vec<f32>> {
    let spec = *src.spec();
    let count = spec.group_count(block);
    if group >= count {
        return Err(Error::GroupOutOfRange {
            kind: block,
            group,
            count,
        });
    }
    let d = spec.hidden_dim;
    let rec = src.record(GroupKey::new(layer, block, group))?;
    match block {
        BlockKind::Mha => {
            let dh = spec.head_dim();
            let (wq, wo) = rec.split_at(dh * d);
            let q = matvec(wq, dh, d, normed);
            let j = spec.kv_head_of(group);
            let keys = &kv.keys[layer][j];
            if keys.is_empty() {
                return Err(Error::Dimension(format!(
                    "KV cache for layer {layer} is empty"
                )));
            }
            let o = attend(&q, keys, &kv.values[layer][j]);
            Ok(matvec(wo, d, dh, &o))
        }
        BlockKind::Mlp => {
            let gs = spec.group_size;
            let up = &rec[..gs * d];
            let gate = &rec[gs * d..2 * gs * d];
            let down = &rec[2 * gs * d..];
            let act: Vec<f32> = up
                .chunks_exact(d)
                .zip(gate.chunks_exact(d))
                .map(|(u, g)| (silu(dot(g, normed)) * dot(u, normed)) as f32)
                .collect();
            Ok(matvec(down, d, gs, &act))
        }
        BlockKind::LmHead => Ok(matvec(rec, spec.group_size, d, normed)),
    }
}

/// One group's additive contribution to the output of `block` in `layer`.
///
/// `input` is the block input before normalisation; for MHA the KV cache
/// must already hold the current token. For the LM head `layer` is ignored
/// in favour of the head's record layer.
pub fn compute_group(
    src: &impl WeightSource,
    layer: usize,
    block: BlockKind,
    group_id: usize,
    input: &Activation,
    kv: &KvCache,
) -> Result<GroupActivation> {
    let spec = *src.spec();
    if input.values.len() != spec.hidden_dim {
        return Err(Error::LengthMismatch(format!(
            "block input has {} values, expected {}",
            input.values.len(),
            spec.hidden_dim
        )));
    }
    let record_layer = if block == BlockKind::LmHead {
        spec.num_layers
    } else {
        layer
    };
    let normed = rms_norm(&input.values);
    let partial = compute_group_normed(src, record_layer, block, group_id, &normed, kv)?;
    Ok(GroupActivation {
        block,
        layer: record_layer,
        group_id,
        partial,
        origin_device: 0,
    })
}

/// Sum (MHA/MLP) or concatenate (LM head) the available partials.
///
/// Missing MHA/MLP groups contribute zero. Missing LM-head chunks are an
/// error since logits must be exact.
pub fn merge_partials(
    spec: &ModelSpec,
    partials: &[GroupActivation],
    block: BlockKind,
    layer: usize,
    token_idx: u32,
) -> Result<Activation> {
    let count = spec.group_count(block);
    let mut slots: Vec<Option<&GroupActivation>> = vec![None; count];
    for p in partials {
        if p.block != block || p.layer != layer {
            return Err(Error::MixedPartials);
        }
        if p.group_id >= count {
            return Err(Error::GroupOutOfRange {
                kind: block,
                group: p.group_id,
                count,
            });
        }
        if p.partial.len() != spec.partial_len(block) {
            return Err(Error::LengthMismatch(format!(
                "partial of group {} has {} values",
                p.group_id,
                p.partial.len()
            )));
        }
        if slots[p.group_id].replace(p).is_some() {
            return Err(Error::DuplicatePartial(p.group_id));
        }
    }
    let values = match block {
        BlockKind::Mha | BlockKind::Mlp => {
            let mut acc = vec![0f64; spec.hidden_dim];
            for p in slots.iter().flatten() {
                for (a, &v) in acc.iter_mut().zip(&p.partial) {
                    *a += v as f64;
                }
            }
            acc.into_iter().map(|v| v as f32).collect()
        }
        BlockKind::LmHead => {
            let mut out = Vec::with_capacity(spec.vocab_size());
            for (g, slot) in slots.iter().enumerate() {
                let p = slot.ok_or(Error::MissingLogitChunk(g))?;
                out.extend_from_slice(&p.partial);
            }
            out
        }
    };
    Ok(Activation::new(values, token_idx, layer))
}

/// Everything the dense oracle records for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStep {
    pub token: u32,
    /// Residual stream entering each layer; index `L` is the final state.
    pub layer_inputs: Vec<Vec<f32>>,
    /// Residual stream after each layer's MHA block (MLP block input).
    pub mid: Vec<Vec<f32>>,
    pub mha_out: Vec<Vec<f32>>,
    pub mlp_out: Vec<Vec<f32>>,
    pub logits: Vec<f32>,
}

impl DenseStep {
    pub fn argmax(&self) -> u32 {
        argmax(&self.logits) as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTrace {
    pub steps: Vec<DenseStep>,
}

impl DenseTrace {
    pub fn logits(&self) -> Vec<&[f32]> {
        self.steps.iter().map(|s| s.logits.as_slice()).collect()
    }
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct DenseLayer {
    wq: Vec<f32>, // D x D, head h owns rows h*dh..
    wk: Vec<f32>, // (N_kv*dh) x D
    wv: Vec<f32>,
    wo: Vec<f32>, // D x D, head h owns columns h*dh..
    up: Vec<f32>, // F x D
    gate: Vec<f32>,
    down: Vec<f32>, // D x F
}

/// Reference single-threaded decoder built from dense matrices assembled
/// out of the group records. Holds its own KV cache, so call [`step`] once
/// per position.
///
/// [`step`]: DenseModel::step
pub struct DenseModel {
    spec: ModelSpec,
    embed: Vec<f32>, // V x D
    lm: Vec<f32>,    // V x D
    layers: Vec<DenseLayer>,
    keys: Vec<Vec<Vec<f32>>>, // [layer][pos] -> N_kv*dh
    values: Vec<Vec<Vec<f32>>>,
}

impl DenseModel {
    pub fn new(store: &WeightStore) -> Result<Self> {
        let spec = *store.spec();
        let (d, dh, gs) = (spec.hidden_dim, spec.head_dim(), spec.group_size);
        let f = spec.mlp_dim();
        let get = |l, k, g| store.record(GroupKey::new(l, k, g));

        let mut embed = Vec::with_capacity(spec.vocab_size() * d);
        let mut lm = Vec::with_capacity(spec.vocab_size() * d);
        for v in 0..spec.vocab_groups {
            embed.extend_from_slice(get(0, RecordKind::Embedding, v)?);
            lm.extend_from_slice(get(spec.num_layers, RecordKind::LmHead, v)?);
        }

        let mut layers = Vec::with_capacity(spec.num_layers);
        for l in 0..spec.num_layers {
            let mut wq = Vec::with_capacity(d * d);
            let mut wo = vec![0f32; d * d];
            for h in 0..spec.num_heads {
                let rec = get(l, RecordKind::Mha, h)?;
                let (q, o) = rec.split_at(dh * d);
                wq.extend_from_slice(q);
                for row in 0..d {
                    wo[row * d + h * dh..row * d + (h + 1) * dh]
                        .copy_from_slice(&o[row * dh..(row + 1) * dh]);
                }
            }
            let mut wk = Vec::new();
            let mut wv = Vec::new();
            for j in 0..spec.num_kv_heads {
                let rec = get(l, RecordKind::KvProj, j)?;
                let (k, v) = rec.split_at(dh * d);
                wk.extend_from_slice(k);
                wv.extend_from_slice(v);
            }
            let mut up = Vec::with_capacity(f * d);
            let mut gate = Vec::with_capacity(f * d);
            let mut down = vec![0f32; d * f];
            for g in 0..spec.mlp_groups {
                let rec = get(l, RecordKind::Mlp, g)?;
                up.extend_from_slice(&rec[..gs * d]);
                gate.extend_from_slice(&rec[gs * d..2 * gs * d]);
                let dn = &rec[2 * gs * d..];
                for row in 0..d {
                    down[row * f + g * gs..row * f + (g + 1) * gs]
                        .copy_from_slice(&dn[row * gs..(row + 1) * gs]);
                }
            }
            layers.push(DenseLayer {
                wq,
                wk,
                wv,
                wo,
                up,
                gate,
                down,
            });
        }
        Ok(Self {
            spec,
            embed,
            lm,
            layers,
            keys: vec![Vec::new(); spec.num_layers],
            values: vec![Vec::new(); spec.num_layers],
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn position(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    pub fn embed(&self, token: u32) -> Result<Vec<f32>> {
        embedding_row(&self.spec, &self.embed, token)
    }

    fn attention(&mut self, l: usize, xn: &[f32]) -> Vec<f32> {
        let s = self.spec;
        let (d, dh, kvd) = (s.hidden_dim, s.head_dim(), s.num_kv_heads * s.head_dim());
        let layer = &self.layers[l];
        let q = matvec(&layer.wq, d, d, xn);
        self.keys[l].push(matvec(&layer.wk, kvd, d, xn));
        self.values[l].push(matvec(&layer.wv, kvd, d, xn));
        let mut heads = Vec::with_capacity(d);
        for h in 0..s.num_heads {
            let j = s.kv_head_of(h);
            let ks: Vec<Vec<f32>> = self.keys[l]
                .iter()
                .map(|k| k[j * dh..(j + 1) * dh].to_vec())
                .collect();
            let vs: Vec<Vec<f32>> = self.values[l]
                .iter()
                .map(|v| v[j * dh..(j + 1) * dh].to_vec())
                .collect();
            heads.extend(attend(&q[h * dh..(h + 1) * dh], &ks, &vs));
        }
        matvec(&self.layers[l].wo, d, d, &heads)
    }

    fn mlp(&self, l: usize, xn: &[f32]) -> Vec<f32> {
        let (d, f) = (self.spec.hidden_dim, self.spec.mlp_dim());
        let layer = &self.layers[l];
        let up = matvec(&layer.up, f, d, xn);
        let gate = matvec(&layer.gate, f, d, xn);
        let act: Vec<f32> = up
            .iter()
            .zip(&gate)
            .map(|(&u, &g)| (silu(g as f64) * u as f64) as f32)
            .collect();
        matvec(&layer.down, d, f, &act)
    }

    /// Process one token at the next position.
    pub fn step(&mut self, token: u32) -> Result<DenseStep> {
        let s = self.spec;
        let mut x = self.embed(token)?;
        let mut layer_inputs = Vec::with_capacity(s.num_layers + 1);
        let mut mid = Vec::with_capacity(s.num_layers);
        let mut mha_out = Vec::with_capacity(s.num_layers);
        let mut mlp_out = Vec::with_capacity(s.num_layers);
        for l in 0..s.num_layers {
            layer_inputs.push(x.clone());
            let a = self.attention(l, &rms_norm(&x));
            let h: Vec<f32> = add(&x, &a);
            let m = self.mlp(l, &rms_norm(&h));
            x = add(&h, &m);
            mid.push(h);
            mha_out.push(a);
            mlp_out.push(m);
        }
        let logits = matvec(&self.lm, s.vocab_size(), s.hidden_dim, &rms_norm(&x));
        layer_inputs.push(x);
        Ok(DenseStep {
            token,
            layer_inputs,
            mid,
            mha_out,
            mlp_out,
            logits,
        })
    }
}

pub(crate) fn embedding_row(spec: &ModelSpec, table: &[f32], token: u32) -> Result<Vec<f32>> {
    let vocab = spec.vocab_size();
    if token as usize >= vocab {
        return Err(Error::TokenOutOfRange { token, vocab });
    }
    let d = spec.hidden_dim;
    Ok(table[token as usize * d..(token as usize + 1) * d].to_vec())
}

/// Embedding lookup through the group records.
pub(crate) fn embed_token(src: &impl WeightSource, token: u32) -> Result<Vec<f32>> {
    let spec = *src.spec();
    let vocab = spec.vocab_size();
    if token as usize >= vocab {
        return Err(Error::TokenOutOfRange { token, vocab });
    }
    let (g, r) = (token as usize / spec.group_size, token as usize % spec.group_size);
    let rec = src.record(GroupKey::new(0, RecordKind::Embedding, g))?;
    let d = spec.hidden_dim;
    Ok(rec[r * d..(r + 1) * d].to_vec())
}

pub(crate) fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

/// Run the dense oracle over a whole token sequence.
pub fn dense_forward(store: &WeightStore, tokens: &[u32]) -> Result<DenseTrace> {
    let mut model = DenseModel::new(store)?;
    let steps = tokens
        .iter()
        .map(|&t| model.step(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(DenseTrace { steps })
}
