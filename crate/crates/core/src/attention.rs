//! Minimal seeded multi-head causal attention with a growable KV cache.
//!
//! The model is a desk-scale stand-in for a decoder layer stack: per layer a
//! multi-head causal attention block and a single-matrix feed-forward, each
//! with a residual connection, and a final vocab projection. There is no
//! positional encoding, no layer norm, and one KV head per attention head.
//! Everything runs in f64 so eviction-error measurements are limited by the
//! algorithms, not the arithmetic.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, matmul_bt, matvec, softmax, Matrix};
use crate::scoring::{PolicyKind, PolicyParams, PolicyState};

/// Model shape plus the seed its weights were drawn from. Field names match
/// the JSON weight interchange format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub seed: u64,
}

/// Per-layer weights. All five matrices are `d_model x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_ffn: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub layers: Vec<LayerWeights>,
    /// Vocab projection, `vocab x d_model`.
    pub w_h: Matrix,
}

impl ToyModel {
    pub fn d_head(&self) -> usize {
        self.config.d_model / self.config.n_heads
    }
}

fn validate_config(cfg: &ModelConfig) -> Result<()> {
    if cfg.n_layers == 0 || cfg.n_heads == 0 || cfg.d_model == 0 || cfg.vocab == 0 {
        return Err(Error::InvalidConfig(
            "n_layers, n_heads, d_model, and vocab must all be at least 1".into(),
        ));
    }
    if !cfg.d_model.is_multiple_of(cfg.n_heads) {
        return Err(Error::InvalidConfig(format!(
            "d_model {} not divisible by n_heads {}",
            cfg.d_model, cfg.n_heads
        )));
    }
    Ok(())
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m.set(r, c, rng.random_range(-scale..scale));
        }
    }
    m
}

/// Builds a model with i.i.d. uniform(-s, s) weights, s = 1/sqrt(d_model),
/// from a ChaCha8 stream keyed by `cfg.seed`. Draw order is fixed (per layer:
/// w_q, w_k, w_v, w_o, w_ffn, each row-major; then w_h), so the same seed
/// reproduces the same weights bit for bit.
pub fn init_model(cfg: ModelConfig) -> Result<ToyModel> {
    validate_config(&cfg)?;
    let s = 1.0 / (cfg.d_model as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_model;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerWeights {
            w_q: random_matrix(&mut rng, d, d, s),
            w_k: random_matrix(&mut rng, d, d, s),
            w_v: random_matrix(&mut rng, d, d, s),
            w_o: random_matrix(&mut rng, d, d, s),
            w_ffn: random_matrix(&mut rng, d, d, s),
        });
    }
    let w_h = random_matrix(&mut rng, cfg.vocab, d, s);
    Ok(ToyModel {
        config: cfg,
        layers,
        w_h,
    })
}

/// One query's softmax attention weights over the tokens it can see.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    weights: Vec<f64>,
}

impl AttentionRow {
    /// Accepts a weight vector that sums to 1 within 1e-9 with entries in
    /// [0, 1]. Zero entries are legal: extreme logits underflow to exactly
    /// 0.0 after max subtraction.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyLogits);
        }
        let mut sum = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || !(0.0..=1.0).contains(&w) {
                return Err(Error::NegativeScore { index: i, value: w });
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized { sum });
        }
        Ok(AttentionRow { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Softmax attention of one query over the first `visible` cached rows.
/// Returns the weight row and the weighted value sum.
pub(crate) fn attend_prefix(
    q: &[f64],
    keys: &Matrix,
    values: &Matrix,
    visible: usize,
    scale: bool,
) -> Result<(AttentionRow, Vec<f64>)> {
    if keys.rows() != values.rows() {
        return Err(Error::ShapeMismatch {
            op: "attend keys/values",
            lhs_rows: keys.rows(),
            lhs_cols: keys.cols(),
            rhs_rows: values.rows(),
            rhs_cols: values.cols(),
        });
    }
    if keys.rows() > 0 && q.len() != keys.cols() {
        return Err(Error::LengthMismatch {
            what: "query",
            expected: keys.cols(),
            actual: q.len(),
        });
    }
    if visible > keys.rows() {
        return Err(Error::IndexOutOfRange {
            index: visible,
            len: keys.rows(),
        });
    }
    let inv_scale = if scale {
        1.0 / (q.len() as f64).sqrt()
    } else {
        1.0
    };
    let mut logits = Vec::with_capacity(visible);
    for i in 0..visible {
        logits.push(dot(q, keys.row(i)) * inv_scale);
    }
    let weights = softmax(&logits)?;
    let mut out = vec![0.0; values.cols()];
    for (i, &w) in weights.iter().enumerate() {
        let v = values.row(i);
        for (j, o) in out.iter_mut().enumerate() {
            *o += w * v[j];
        }
    }
    Ok((AttentionRow::new(weights)?, out))
}

/// Full-cache attention for one query: logits q.k (scaled by 1/sqrt(d_head)
/// iff `scale`), softmax, weighted value sum.
pub fn attend_row(
    q: &[f64],
    keys: &Matrix,
    values: &Matrix,
    scale: bool,
) -> Result<(AttentionRow, Vec<f64>)> {
    attend_prefix(q, keys, values, keys.rows(), scale)
}

/// Cached keys/values for one (layer, head) slot, the original position of
/// each cached token, and the eviction policy's running state.
#[derive(Debug, Clone)]
pub struct HeadCache {
    pub keys: Matrix,
    pub values: Matrix,
    pub positions: Vec<usize>,
    pub policy: PolicyState,
}

impl HeadCache {
    fn new(d_head: usize, kind: PolicyKind, params: PolicyParams) -> Self {
        HeadCache {
            keys: Matrix::zeros(0, d_head),
            values: Matrix::zeros(0, d_head),
            positions: Vec::new(),
            policy: PolicyState::new(kind, params),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Keeps only the rows listed in `keep` (ascending), dropping everything
    /// else from keys, values, positions, and policy state together.
    pub fn retain(&mut self, keep: &[usize]) -> Result<()> {
        self.keys = self.keys.select_rows(keep)?;
        self.values = self.values.select_rows(keep)?;
        self.positions = keep.iter().map(|&i| self.positions[i]).collect();
        self.policy.retain(keep);
        Ok(())
    }
}

/// Per-layer, per-head KV cache. `seen` counts every token ever appended,
/// evicted or not, and assigns original positions.
#[derive(Debug, Clone)]
pub struct KvCache {
    pub heads: Vec<Vec<HeadCache>>,
    pub seen: usize,
}

impl KvCache {
    pub fn new(model: &ToyModel, kind: PolicyKind, params: PolicyParams) -> Self {
        let d_head = model.d_head();
        let heads = (0..model.config.n_layers)
            .map(|_| {
                (0..model.config.n_heads)
                    .map(|_| HeadCache::new(d_head, kind, params))
                    .collect()
            })
            .collect();
        KvCache { heads, seen: 0 }
    }

    /// Cached token count in one slot. Heads always hold the same number of
    /// tokens (though possibly different positions once eviction diverges).
    pub fn len(&self, layer: usize, head: usize) -> usize {
        self.heads[layer][head].len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen == 0
    }
}

/// Output of one prefill block: new hidden states, every attention row
/// produced (layer x head x query), and per layer the final query's
/// concatenated head attention output (taken before the output projection).
#[derive(Debug, Clone)]
pub struct BlockStep {
    pub hidden: Matrix,
    pub rows: Vec<Vec<Vec<AttentionRow>>>,
    pub attn_final: Vec<Vec<f64>>,
}

/// Runs `m` new tokens through every layer against the cache: appends their
/// keys/values, attends causally (each query sees the old cache plus the new
/// tokens up to itself), applies the output projection and feed-forward with
/// residuals. The cache grows by `m` in every slot; eviction is the engine's
/// job, not this function's.
pub fn block_prefill(
    model: &ToyModel,
    block: &Matrix,
    cache: &mut KvCache,
    scale: bool,
) -> Result<BlockStep> {
    let d_model = model.config.d_model;
    let d_head = model.d_head();
    let n_heads = model.config.n_heads;
    let m = block.rows();
    if m == 0 {
        return Err(Error::InvalidConfig("empty prefill block".into()));
    }
    if block.cols() != d_model {
        return Err(Error::LengthMismatch {
            what: "hidden block width",
            expected: d_model,
            actual: block.cols(),
        });
    }
    let start_pos = cache.seen;
    let mut x = block.clone();
    let mut rows = Vec::with_capacity(model.config.n_layers);
    let mut attn_final = Vec::with_capacity(model.config.n_layers);

    for (l, layer) in model.layers.iter().enumerate() {
        let q_all = matmul_bt(&x, &layer.w_q)?;
        let k_all = matmul_bt(&x, &layer.w_k)?;
        let v_all = matmul_bt(&x, &layer.w_v)?;

        let old = cache.heads[l][0].len();
        for h in 0..n_heads {
            let slot = &mut cache.heads[l][h];
            debug_assert_eq!(slot.len(), old, "head caches out of step");
            for i in 0..m {
                slot.keys
                    .push_row(&k_all.row(i)[h * d_head..(h + 1) * d_head])?;
                slot.values
                    .push_row(&v_all.row(i)[h * d_head..(h + 1) * d_head])?;
                slot.positions.push(start_pos + i);
            }
        }

        let mut concat = Matrix::zeros(m, d_model);
        let mut layer_rows = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let slot = &cache.heads[l][h];
            let mut head_rows = Vec::with_capacity(m);
            for i in 0..m {
                let q = &q_all.row(i)[h * d_head..(h + 1) * d_head];
                let visible = old + i + 1;
                let (row, out) = attend_prefix(q, &slot.keys, &slot.values, visible, scale)?;
                concat.row_mut(i)[h * d_head..(h + 1) * d_head].copy_from_slice(&out);
                head_rows.push(row);
            }
            layer_rows.push(head_rows);
        }
        rows.push(layer_rows);
        attn_final.push(concat.row(m - 1).to_vec());

        let proj = matmul_bt(&concat, &layer.w_o)?;
        let x_half = x.add(&proj)?;
        let ffn = matmul_bt(&x_half, &layer.w_ffn)?;
        x = x_half.add(&ffn)?;
    }
    cache.seen += m;
    Ok(BlockStep {
        hidden: x,
        rows,
        attn_final,
    })
}

/// One generation step: a single-token prefill plus the vocab projection of
/// the resulting hidden state.
pub struct GenStep {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub block: BlockStep,
}

pub fn generate_step(
    model: &ToyModel,
    hidden: &[f64],
    cache: &mut KvCache,
    scale: bool,
) -> Result<GenStep> {
    let block = Matrix::from_rows(&[hidden.to_vec()])?;
    let step = block_prefill(model, &block, cache, scale)?;
    let hidden_out = step.hidden.row(0).to_vec();
    let logits = matvec(&model.w_h, &hidden_out)?;
    Ok(GenStep {
        hidden: hidden_out,
        logits,
        block: step,
    })
}

/// Single-shot causal forward pass over the whole sequence with no cache
/// bound and no eviction. Returns the final hidden states; the trace variant
/// also returns each layer's concatenated attention outputs (one row per
/// token, taken before the output projection), which is what eviction
/// perturbs and what deviation metrics compare.
pub fn dense_forward(model: &ToyModel, hidden_all: &Matrix, scale: bool) -> Result<Matrix> {
    Ok(dense_forward_trace(model, hidden_all, scale)?.0)
}

pub fn dense_forward_trace(
    model: &ToyModel,
    hidden_all: &Matrix,
    scale: bool,
) -> Result<(Matrix, Vec<Matrix>)> {
    let d_model = model.config.d_model;
    let d_head = model.d_head();
    let n = hidden_all.rows();
    if n == 0 {
        return Err(Error::InvalidConfig("empty sequence".into()));
    }
    if hidden_all.cols() != d_model {
        return Err(Error::LengthMismatch {
            what: "hidden width",
            expected: d_model,
            actual: hidden_all.cols(),
        });
    }
    let mut x = hidden_all.clone();
    let mut traces = Vec::with_capacity(model.config.n_layers);
    for layer in &model.layers {
        let q_all = matmul_bt(&x, &layer.w_q)?;
        let k_all = matmul_bt(&x, &layer.w_k)?;
        let v_all = matmul_bt(&x, &layer.w_v)?;
        let mut concat = Matrix::zeros(n, d_model);
        for h in 0..model.config.n_heads {
            let keys = k_all.slice_cols(h * d_head, d_head)?;
            let values = v_all.slice_cols(h * d_head, d_head)?;
            for i in 0..n {
                let q = &q_all.row(i)[h * d_head..(h + 1) * d_head];
                let (_, out) = attend_prefix(q, &keys, &values, i + 1, scale)?;
                concat.row_mut(i)[h * d_head..(h + 1) * d_head].copy_from_slice(&out);
            }
        }
        traces.push(concat.clone());
        let proj = matmul_bt(&concat, &layer.w_o)?;
        let x_half = x.add(&proj)?;
        let ffn = matmul_bt(&x_half, &layer.w_ffn)?;
        x = x_half.add(&ffn)?;
    }
    Ok((x, traces))
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    w_q: Vec<Vec<f64>>,
    w_k: Vec<Vec<f64>>,
    w_v: Vec<Vec<f64>>,
    w_o: Vec<Vec<f64>>,
    w_ffn: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    config: ModelConfig,
    layers: Vec<LayerFile>,
    w_h: Vec<Vec<f64>>,
}

/// Serializes a model to the JSON interchange format: a `config` object, one
/// object of row-major `w_q`/`w_k`/`w_v`/`w_o`/`w_ffn` arrays per layer, and
/// the `w_h` array. Decimal floats round-trip bit for bit.
pub fn export_weights(model: &ToyModel) -> String {
    let file = WeightsFile {
        config: model.config,
        layers: model
            .layers
            .iter()
            .map(|l| LayerFile {
                w_q: l.w_q.to_nested(),
                w_k: l.w_k.to_nested(),
                w_v: l.w_v.to_nested(),
                w_o: l.w_o.to_nested(),
                w_ffn: l.w_ffn.to_nested(),
            })
            .collect(),
        w_h: model.w_h.to_nested(),
    };
    let mut out = serde_json::to_string_pretty(&file).expect("weights serialize");
    out.push('\n');
    out
}

fn matrix_from_json(
    name: &str,
    rows: &[Vec<f64>],
    want_rows: usize,
    want_cols: usize,
) -> Result<Matrix> {
    let m = Matrix::from_rows(rows)
        .map_err(|e| Error::WeightFile(format!("{name}: {e}")))?;
    if m.rows() != want_rows || m.cols() != want_cols {
        return Err(Error::WeightFile(format!(
            "{name}: expected {want_rows}x{want_cols}, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::WeightFile(format!("{name}: non-finite entry")));
    }
    Ok(m)
}

/// Parses and validates the JSON interchange format produced by
/// [`export_weights`]: config sanity, matrix shapes, and finiteness.
pub fn import_weights(json: &str) -> Result<ToyModel> {
    let file: WeightsFile =
        serde_json::from_str(json).map_err(|e| Error::WeightFile(e.to_string()))?;
    validate_config(&file.config)?;
    if file.layers.len() != file.config.n_layers {
        return Err(Error::WeightFile(format!(
            "expected {} layers, got {}",
            file.config.n_layers,
            file.layers.len()
        )));
    }
    let d = file.config.d_model;
    let mut layers = Vec::with_capacity(file.layers.len());
    for (i, l) in file.layers.iter().enumerate() {
        layers.push(LayerWeights {
            w_q: matrix_from_json(&format!("layers[{i}].w_q"), &l.w_q, d, d)?,
            w_k: matrix_from_json(&format!("layers[{i}].w_k"), &l.w_k, d, d)?,
            w_v: matrix_from_json(&format!("layers[{i}].w_v"), &l.w_v, d, d)?,
            w_o: matrix_from_json(&format!("layers[{i}].w_o"), &l.w_o, d, d)?,
            w_ffn: matrix_from_json(&format!("layers[{i}].w_ffn"), &l.w_ffn, d, d)?,
        });
    }
    let w_h = matrix_from_json("w_h", &file.w_h, file.config.vocab, d)?;
    Ok(ToyModel {
        config: file.config,
        layers,
        w_h,
    })
}
