//! Per-layer importance predictors. Each predictor reads layer `l`'s hidden
//! state after its attention block and estimates the per-group output norms of layer
//! `l + 1`, so ranks are ready one layer ahead of the computation.

mod checkpoint;
mod regressor;

pub use checkpoint::HALP_MAGIC;
pub use regressor::Regressor;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{
    compute_group, rms_norm, Activation, BlockKind, DenseModel, KvCache, ModelSpec, RankList,
    WeightStore,
};
use crate::{Error, Result};

/// Block kinds that get a predictor.
pub const PREDICTED: [BlockKind; 2] = [BlockKind::Mha, BlockKind::Mlp];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    /// Hidden state entering the source layer.
    pub feature: Vec<f32>,
    /// Next layer's group norms scaled so the largest is 1.
    pub target: Vec<f32>,
}

/// Samples grouped by `(source layer, kind)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub spec: ModelSpec,
    pub samples: BTreeMap<(usize, BlockKind), Vec<TrainingSample>>,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.samples.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, layer: usize, kind: BlockKind) -> &[TrainingSample] {
        self.samples.get(&(layer, kind)).map_or(&[], Vec::as_slice)
    }

    /// One `{layer, kind, feature, target}` object per line.
    pub fn write_json_lines(&self, mut w: impl std::io::Write) -> Result<()> {
        for (&(layer, kind), samples) in &self.samples {
            for sample in samples {
                let line = SampleLine {
                    layer,
                    kind,
                    sample: sample.clone(),
                };
                serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    /// Inverse of [`Self::write_json_lines`]; shapes are checked against `spec`.
    pub fn read_json_lines(spec: ModelSpec, text: &str) -> Result<Self> {
        let mut samples: BTreeMap<_, Vec<TrainingSample>> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let line: SampleLine = serde_json::from_str(raw)
                .map_err(|e| Error::Format(format!("sample line {}: {e}", n + 1)))?;
            let shape_ok = line.layer + 1 < spec.num_layers
                && line.kind != BlockKind::LmHead
                && line.sample.feature.len() == spec.hidden_dim
                && line.sample.target.len() == spec.group_count(line.kind);
            if !shape_ok {
                return Err(Error::Format(format!("sample line {} does not fit the model", n + 1)));
            }
            samples.entry((line.layer, line.kind)).or_default().push(line.sample);
        }
        Ok(Self { spec, samples })
    }
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    layer: usize,
    kind: BlockKind,
    #[serde(flatten)]
    sample: TrainingSample,
}

fn max_normalize(norms: Vec<f64>) -> Vec<f32> {
    let max = norms.iter().cloned().fold(0.0, f64::max);
    norms
        .into_iter()
        .map(|v| if max > 0.0 { (v / max) as f32 } else { 0.0 })
        .collect()
}

/// Group norms of `kind` in `layer` for one position; `kv` must hold the
/// current token for that layer.
fn group_norms(
    store: &WeightStore,
    layer: usize,
    kind: BlockKind,
    input: &[f32],
    kv: &KvCache,
) -> Result<Vec<f64>> {
    let act = Activation::new(input.to_vec(), 0, layer);
    (0..store.spec().group_count(kind))
        .map(|g| compute_group(store, layer, kind, g, &act, kv).map(|p| p.l2_norm()))
        .collect()
}

/// Run the dense model over every prompt and record, for each position and
/// each layer with a successor, the post-attention hidden state and the
/// successor's group norms.
pub fn collect_calibration(store: &WeightStore, prompts: &[Vec<u32>]) -> Result<CalibrationSet> {
    if prompts.iter().all(Vec::is_empty) {
        return Err(Error::EmptySamples);
    }
    let spec = *store.spec();
    let mut samples: BTreeMap<_, Vec<TrainingSample>> = BTreeMap::new();
    for prompt in prompts {
        let mut dense = DenseModel::new(store)?;
        let mut kv = KvCache::new(&spec);
        for &token in prompt {
            let step = dense.step(token)?;
            for l in 0..spec.num_layers {
                kv.append(store, l, &rms_norm(&step.layer_inputs[l]))?;
            }
            for l in 0..spec.num_layers.saturating_sub(1) {
                let next = l + 1;
                let inputs = [
                    (BlockKind::Mha, &step.layer_inputs[next]),
                    (BlockKind::Mlp, &step.mid[next]),
                ];
                for (kind, input) in inputs {
                    let norms = group_norms(store, next, kind, input, &kv)?;
                    samples.entry((l, kind)).or_default().push(TrainingSample {
                        feature: step.mid[l].clone(),
                        target: max_normalize(norms),
                    });
                }
            }
        }
    }
    Ok(CalibrationSet { spec, samples })
}

/// Uniformly random token sequences for calibration.
pub fn synthetic_prompts(spec: &ModelSpec, count: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = spec.vocab_size() as u32;
    (0..count)
        .map(|_| (0..len).map(|_| rng.gen_range(0..vocab)).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden_p: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_p: 64,
            epochs: 200,
            learning_rate: 0.2,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Validation statistics per block kind, pooled over layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub validation_mse: BTreeMap<BlockKind, f64>,
    /// MSE of predicting the training-set mean target.
    pub mean_predictor_mse: BTreeMap<BlockKind, f64>,
}

/// Trained predictors indexed by source layer, then MHA and MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub hidden_p: usize,
    pub mha_groups: usize,
    pub mlp_groups: usize,
    pub layers: Vec<[Regressor; 2]>,
}

fn kind_slot(kind: BlockKind) -> Option<usize> {
    match kind {
        BlockKind::Mha => Some(0),
        BlockKind::Mlp => Some(1),
        BlockKind::LmHead => None,
    }
}

impl PredictorParams {
    pub fn predictor(&self, layer: usize, kind: BlockKind) -> Result<&Regressor> {
        let slot = kind_slot(kind).ok_or(Error::NoPredictor(layer))?;
        self.layers
            .get(layer)
            .map(|p| &p[slot])
            .ok_or(Error::NoPredictor(layer))
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() + 1 != self.num_layers.max(1) {
            return Err(Error::Format(format!(
                "{} predictor layers for a {}-layer model",
                self.layers.len(),
                self.num_layers
            )));
        }
        for pair in &self.layers {
            for (r, groups) in pair.iter().zip([self.mha_groups, self.mlp_groups]) {
                if r.input != self.hidden_dim || r.hidden != self.hidden_p || r.output != groups {
                    return Err(Error::Format("predictor shape mismatch".into()));
                }
                if !r.is_finite() {
                    return Err(Error::Format("non-finite predictor weight".into()));
                }
            }
        }
        Ok(())
    }
}

fn as_input(feature: &[f32]) -> Vec<f64> {
    rms_norm(feature).into_iter().map(f64::from).collect()
}

fn split(n: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let val = if n >= 2 { (n / 10).max(1) } else { 0 };
    let train = idx.split_off(val);
    (train, idx)
}

/// Fit one predictor per `(layer, kind)` with plain mini-batch gradient
/// descent on mean squared error. A 90/10 train/validation split is drawn
/// from `cfg.seed`.
pub fn train(set: &CalibrationSet, cfg: &TrainConfig) -> Result<(PredictorParams, TrainReport)> {
    if cfg.hidden_p == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config(format!("invalid training config {cfg:?}")));
    }
    let spec = set.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layers = Vec::new();
    let mut sse: BTreeMap<BlockKind, (f64, f64, usize)> = BTreeMap::new();
    for l in 0..spec.num_layers.saturating_sub(1) {
        let mut pair = Vec::with_capacity(2);
        for kind in PREDICTED {
            let samples = set.get(l, kind);
            if samples.is_empty() {
                return Err(Error::EmptySamples);
            }
            let groups = spec.group_count(kind);
            let xs: Vec<Vec<f64>> = samples.iter().map(|s| as_input(&s.feature)).collect();
            let ys: Vec<Vec<f64>> = samples
                .iter()
                .map(|s| s.target.iter().map(|&v| v as f64).collect())
                .collect();
            let (train_idx, val_idx) = split(samples.len(), &mut rng);
            let mut mean = vec![0.0; groups];
            for &i in &train_idx {
                mean.iter_mut().zip(&ys[i]).for_each(|(m, y)| *m += y);
            }
            mean.iter_mut().for_each(|m| *m /= train_idx.len() as f64);
            // start from the mean predictor so descent only has to learn
            // the input-dependent part
            let mut model = Regressor::random(spec.hidden_dim, cfg.hidden_p, groups, &mut rng);
            model.w2.iter_mut().for_each(|w| *w = 0.0);
            model.b2.clone_from(&mean);
            let mut order = train_idx.clone();
            for _ in 0..cfg.epochs {
                order.shuffle(&mut rng);
                for batch in order.chunks(cfg.batch_size) {
                    let bx: Vec<&[f64]> = batch.iter().map(|&i| xs[i].as_slice()).collect();
                    let by: Vec<&[f64]> = batch.iter().map(|&i| ys[i].as_slice()).collect();
                    let (_, grad) = model.loss_and_gradient(&bx, &by);
                    model.step(&grad, cfg.learning_rate);
                }
            }
            model.round_to_f32();
            if !model.is_finite() {
                return Err(Error::Config(format!(
                    "training diverged at layer {l}; lower the learning rate"
                )));
            }

            let eval = if val_idx.is_empty() { &train_idx } else { &val_idx };
            let e = sse.entry(kind).or_default();
            for &i in eval {
                let p = model.forward(&xs[i]);
                e.0 += p.iter().zip(&ys[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                e.1 += mean.iter().zip(&ys[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                e.2 += groups;
            }
            pair.push(model);
        }
        let mlp = pair.pop().unwrap();
        let mha = pair.pop().unwrap();
        layers.push([mha, mlp]);
    }
    let report = TrainReport {
        validation_mse: sse.iter().map(|(k, v)| (*k, v.0 / v.2 as f64)).collect(),
        mean_predictor_mse: sse.iter().map(|(k, v)| (*k, v.1 / v.2 as f64)).collect(),
    };
    let params = PredictorParams {
        num_layers: spec.num_layers,
        hidden_dim: spec.hidden_dim,
        hidden_p: cfg.hidden_p,
        mha_groups: spec.num_heads,
        mlp_groups: spec.mlp_groups,
        layers,
    };
    Ok((params, report))
}

/// Raw predicted scores for the groups of `block` in layer `layer + 1`.
pub fn predict_scores(
    params: &PredictorParams,
    feature: &Activation,
    layer: usize,
    block: BlockKind,
) -> Result<Vec<f64>> {
    let r = params.predictor(layer, block)?;
    if feature.values.len() != r.input {
        return Err(Error::LengthMismatch(format!(
            "feature has {} values, predictor expects {}",
            feature.values.len(),
            r.input
        )));
    }
    Ok(r.forward(&as_input(&feature.values)))
}

/// Rank the groups of `block` in layer `layer + 1` from `layer`'s
/// post-attention hidden state.
pub fn predict_ranks(
    params: &PredictorParams,
    feature: &Activation,
    layer: usize,
    block: BlockKind,
) -> Result<RankList> {
    let scores = predict_scores(params, feature, layer, block)?;
    Ok(RankList::from_scores(&scores, block, layer + 1))
}
