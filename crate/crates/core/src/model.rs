//! A small pre-LN transformer encoder classifier with LoRA and IA3 hooks.
//!
//! Each layer computes
//!
//! ```text
//! a = LN1(x)
//! q = a Wqᵀ + bq (+ (a Aqᵀ) Bqᵀ)          LoRA
//! k = (a Wkᵀ + bk) ⊙ l_k                  IA3
//! v = (a Wvᵀ + bv (+ (a Avᵀ) Bvᵀ)) ⊙ l_v
//! x = x + concat_h(softmax(q_h k_hᵀ / √d_head) v_h) Woᵀ + bo
//! c = LN2(x)
//! u = ReLU(c W1ᵀ + b1) ⊙ l_ff
//! x = x + u W2ᵀ + b2
//! ```
//!
//! PAD positions are dropped before the first layer, which is equivalent to
//! masking them out of every attention row. The final layer-norm output is
//! mean-pooled over the remaining positions and fed to the head.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapter::{fill_from, AdapterCheckpoint, AdapterParams, Head, Ia3Adapter, Ia3Layer, LoraAdapter, LoraLayer, INIT_STD};
use crate::error::{CompatError, Error, Result};
use crate::tensor::{fingerprint, Checkpoint, CheckpointKind, CheckpointMetadata, TensorRecord};

pub const PAD: usize = 0;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 52,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_head: 16,
            d_ff: 64,
            seq_len: 16,
            n_classes: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_head,
            self.d_ff,
            self.seq_len,
            self.n_classes,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("all model dimensions must be positive: {self:?}")));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    /// `d_ff × d_model`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `d_model × d_ff`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

macro_rules! layer_tensors {
    ($l:expr, $i:expr, $view:ident) => {
        vec![
            (format!("layer{}.attn.q.W", $i), $l.wq.$view().into_dyn()),
            (format!("layer{}.attn.q.b", $i), $l.bq.$view().into_dyn()),
            (format!("layer{}.attn.k.W", $i), $l.wk.$view().into_dyn()),
            (format!("layer{}.attn.k.b", $i), $l.bk.$view().into_dyn()),
            (format!("layer{}.attn.v.W", $i), $l.wv.$view().into_dyn()),
            (format!("layer{}.attn.v.b", $i), $l.bv.$view().into_dyn()),
            (format!("layer{}.attn.o.W", $i), $l.wo.$view().into_dyn()),
            (format!("layer{}.attn.o.b", $i), $l.bo.$view().into_dyn()),
            (format!("layer{}.ln1.g", $i), $l.ln1_g.$view().into_dyn()),
            (format!("layer{}.ln1.b", $i), $l.ln1_b.$view().into_dyn()),
            (format!("layer{}.ln2.g", $i), $l.ln2_g.$view().into_dyn()),
            (format!("layer{}.ln2.b", $i), $l.ln2_b.$view().into_dyn()),
            (format!("layer{}.ffn.W1", $i), $l.w1.$view().into_dyn()),
            (format!("layer{}.ffn.b1", $i), $l.b1.$view().into_dyn()),
            (format!("layer{}.ffn.W2", $i), $l.w2.$view().into_dyn()),
            (format!("layer{}.ffn.b2", $i), $l.b2.$view().into_dyn()),
        ]
    };
}

/// Backbone parameters (everything except the classification head).
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub config: ModelConfig,
    pub tok_embed: Array2<f64>,
    pub pos_embed: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_g: Array1<f64>,
    pub final_b: Array1<f64>,
}

impl BaseWeights {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let layer = || LayerWeights {
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w1: Array2::zeros((config.d_ff, d)),
            b1: Array1::zeros(config.d_ff),
            w2: Array2::zeros((d, config.d_ff)),
            b2: Array1::zeros(d),
        };
        BaseWeights {
            config: *config,
            tok_embed: Array2::zeros((config.vocab_size, d)),
            pos_embed: Array2::zeros((config.seq_len, d)),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            final_g: Array1::zeros(d),
            final_b: Array1::zeros(d),
        }
    }

    pub fn named(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("embed.tok".to_owned(), self.tok_embed.view().into_dyn()),
            ("embed.pos".to_owned(), self.pos_embed.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(layer_tensors!(l, i, view));
        }
        out.push(("final_ln.g".to_owned(), self.final_g.view().into_dyn()));
        out.push(("final_ln.b".to_owned(), self.final_b.view().into_dyn()));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            ("embed.tok".to_owned(), self.tok_embed.view_mut().into_dyn()),
            ("embed.pos".to_owned(), self.pos_embed.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(layer_tensors!(l, i, view_mut));
        }
        out.push(("final_ln.g".to_owned(), self.final_g.view_mut().into_dyn()));
        out.push(("final_ln.b".to_owned(), self.final_b.view_mut().into_dyn()));
        out
    }

    pub fn tensor_records(&self) -> Vec<TensorRecord> {
        self.named()
            .into_iter()
            .map(|(name, t)| {
                let t = t.as_standard_layout();
                TensorRecord::from_f64(name, t.shape().to_vec(), t.as_slice().unwrap())
                    .expect("backbone tensors are well formed")
            })
            .collect()
    }

    /// FNV-1a fingerprint of the backbone tensors.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.tensor_records())
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

/// Deterministic initialisation: Gaussian(0, 0.02) matrices and embeddings,
/// zero biases, unit layer-norm gains.
pub fn init_base(config: &ModelConfig, seed: u64) -> Result<(BaseWeights, Head)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    let mut w = BaseWeights::zeros(config);
    let mut gaussian = |a: &mut Array2<f64>| a.mapv_inplace(|_| normal.sample(&mut rng));
    gaussian(&mut w.tok_embed);
    gaussian(&mut w.pos_embed);
    for l in &mut w.layers {
        for m in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2] {
            gaussian(m);
        }
        l.ln1_g.fill(1.0);
        l.ln2_g.fill(1.0);
    }
    w.final_g.fill(1.0);
    let head = Head::init(config, &mut rng);
    Ok((w, head))
}

/// Backbone plus its own head, with the backbone fingerprint cached.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    weights: BaseWeights,
    head: Head,
    fingerprint: String,
}

impl BaseModel {
    pub fn new(weights: BaseWeights, head: Head) -> Self {
        let fingerprint = weights.fingerprint();
        BaseModel {
            weights,
            head,
            fingerprint,
        }
    }

    pub fn weights(&self) -> &BaseWeights {
        &self.weights
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn into_parts(self) -> (BaseWeights, Head) {
        (self.weights, self.head)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = CheckpointMetadata::new(CheckpointKind::Base, &self.fingerprint, "none", 0);
        meta.insert(
            "model_config",
            serde_json::to_string(&self.weights.config).expect("config serializes"),
        );
        let mut ckpt = Checkpoint::new(meta);
        for record in self.weights.tensor_records() {
            ckpt.insert(record).expect("backbone names are unique");
        }
        for (name, t) in self.head.named() {
            let t = t.as_standard_layout();
            ckpt.insert_f64(&name, t.shape().to_vec(), t.as_slice().unwrap())
                .expect("head names are unique");
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.validate()?;
        if ckpt.metadata.kind()? != CheckpointKind::Base {
            return Err(Error::InvalidCheckpoint(format!(
                "expected a base checkpoint, found {}",
                ckpt.metadata.kind()?
            )));
        }
        let config: ModelConfig = match ckpt.metadata.get("model_config") {
            Some(raw) => serde_json::from_str(raw)
                .map_err(|e| Error::InvalidCheckpoint(format!("model_config: {e}")))?,
            None => ModelConfig::default(),
        };
        config.validate()?;
        let mut weights = BaseWeights::zeros(&config);
        let mut named = weights.named_mut();
        fill_from(&mut named, ckpt)?;
        let expected = named.len() + 2;
        drop(named);
        let mut head = Head::zeros(config.n_classes, config.d_model);
        fill_from(&mut head.named_mut(), ckpt)?;
        if ckpt.len() != expected {
            return Err(Error::InvalidCheckpoint(format!(
                "base checkpoint should hold {expected} tensors, found {}",
                ckpt.len()
            )));
        }
        let model = BaseModel::new(weights, head);
        let stored = ckpt.metadata.base_fingerprint()?;
        if stored != model.fingerprint {
            return Err(Error::InvalidCheckpoint(format!(
                "stored base_fingerprint {stored} does not match backbone tensors ({})",
                model.fingerprint
            )));
        }
        Ok(model)
    }
}

/// Logits for one token sequence. Without an adapter the base model's own
/// head is used; with one, the adapter's head.
pub fn forward(base: &BaseModel, adapter: Option<&AdapterCheckpoint>, tokens: &[usize]) -> Result<Array1<f64>> {
    match adapter {
        None => forward_parts(&base.weights, None, &base.head, tokens),
        Some(a) => {
            check_adapter(base, a)?;
            forward_parts(&base.weights, Some(&a.params), &a.head, tokens)
        }
    }
}

pub(crate) fn check_adapter(base: &BaseModel, adapter: &AdapterCheckpoint) -> Result<()> {
    if adapter.base_fingerprint != base.fingerprint {
        return Err(CompatError::BaseMismatch {
            adapter: adapter.base_fingerprint.clone(),
            model: base.fingerprint.clone(),
        }
        .into());
    }
    adapter.params.check_shapes(base.config())
}

/// Forward pass from explicit parts, without the fingerprint check.
pub fn forward_parts(
    weights: &BaseWeights,
    adapter: Option<&AdapterParams>,
    head: &Head,
    tokens: &[usize],
) -> Result<Array1<f64>> {
    Ok(forward_cached(weights, adapter, head, tokens)?.logits)
}

struct LnCache {
    norm: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    zq: Option<Array2<f64>>,
    zv: Option<Array2<f64>>,
    q: Array2<f64>,
    k0: Array2<f64>,
    k: Array2<f64>,
    v_pre: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    c: Array2<f64>,
    m: Array2<f64>,
    u0: Array2<f64>,
    u: Array2<f64>,
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct ForwardCache {
    tokens: Vec<usize>,
    positions: Vec<usize>,
    layers: Vec<LayerCache>,
    ln_f: LnCache,
    pooled: Array1<f64>,
    pub(crate) logits: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut norm = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in norm.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let inv = *r;
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    let y = &norm * g + b;
    (y, LnCache { norm, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    grads: Option<(&mut Array1<f64>, &mut Array1<f64>)>,
) -> Array2<f64> {
    if let Some((dg, db)) = grads {
        *dg += &(dy * &cache.norm).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let n = dy.ncols() as f64;
    let mut dx = dy * g;
    for ((mut row, norm), &r) in dx.rows_mut().into_iter().zip(cache.norm.rows()).zip(&cache.rstd) {
        let mean_d = row.sum() / n;
        let mean_dn = row.iter().zip(norm).map(|(a, b)| a * b).sum::<f64>() / n;
        Zip::from(&mut row)
            .and(&norm)
            .for_each(|d, &nv| *d = r * (*d - mean_d - nv * mean_dn));
    }
    dx
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(&w.t()) + b
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

/// Cross-entropy of `logits` against `label` and its gradient wrt the logits.
pub fn cross_entropy(logits: &Array1<f64>, label: usize) -> (f64, Array1<f64>) {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits.view());
    grad[label] -= 1.0;
    (lse - logits[label], grad)
}

pub(crate) fn validate_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<Vec<usize>> {
    if tokens.len() > config.seq_len {
        return Err(Error::Invalid(format!(
            "sequence of {} tokens exceeds seq_len {}",
            tokens.len(),
            config.seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Invalid(format!(
            "token id {bad} out of range for vocab of {}",
            config.vocab_size
        )));
    }
    let positions: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] != PAD).collect();
    if positions.is_empty() {
        return Err(Error::Invalid("sequence has no non-PAD tokens".into()));
    }
    Ok(positions)
}

pub(crate) fn forward_cached(
    weights: &BaseWeights,
    adapter: Option<&AdapterParams>,
    head: &Head,
    tokens: &[usize],
) -> Result<ForwardCache> {
    let cfg = &weights.config;
    let positions = validate_tokens(cfg, tokens)?;
    let t = positions.len();
    let d = cfg.d_model;
    let dh = cfg.d_head;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = Array2::zeros((t, d));
    for (row, &p) in positions.iter().enumerate() {
        let mut r = x.row_mut(row);
        r.assign(&weights.tok_embed.row(tokens[p]));
        r += &weights.pos_embed.row(p);
    }

    let mut caches = Vec::with_capacity(cfg.n_layers);
    for (i, lw) in weights.layers.iter().enumerate() {
        let (lora, ia3) = adapter_layer(adapter, i);
        let (a, ln1) = layer_norm(&x, &lw.ln1_g, &lw.ln1_b);

        let mut q = linear(&a, &lw.wq, &lw.bq);
        let mut v_pre = linear(&a, &lw.wv, &lw.bv);
        let (mut zq, mut zv) = (None, None);
        if let Some(l) = lora {
            let z = a.dot(&l.q.a.t());
            q += &z.dot(&l.q.b.t());
            zq = Some(z);
            let z = a.dot(&l.v.a.t());
            v_pre += &z.dot(&l.v.b.t());
            zv = Some(z);
        }
        let k0 = linear(&a, &lw.wk, &lw.bk);
        let (k, v) = match ia3 {
            Some(s) => (&k0 * &s.l_k, &v_pre * &s.l_v),
            None => (k0.clone(), v_pre.clone()),
        };

        let mut o = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut p);
            o.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        x = x + linear(&o, &lw.wo, &lw.bo);

        let (c, ln2) = layer_norm(&x, &lw.ln2_g, &lw.ln2_b);
        let m = linear(&c, &lw.w1, &lw.b1);
        let u0 = m.mapv(|v| v.max(0.0));
        let u = match ia3 {
            Some(s) => &u0 * &s.l_ff,
            None => u0.clone(),
        };
        x = x + linear(&u, &lw.w2, &lw.b2);

        caches.push(LayerCache {
            ln1,
            a,
            zq,
            zv,
            q,
            k0,
            k,
            v_pre,
            v,
            probs,
            o,
            ln2,
            c,
            m,
            u0,
            u,
        });
    }

    let (z, ln_f) = layer_norm(&x, &weights.final_g, &weights.final_b);
    let pooled = z.mean_axis(Axis(0)).expect("at least one position");
    let logits = head.w.dot(&pooled) + &head.b;
    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        positions,
        layers: caches,
        ln_f,
        pooled,
        logits,
    })
}

fn adapter_layer(adapter: Option<&AdapterParams>, i: usize) -> (Option<&LoraLayer>, Option<&Ia3Layer>) {
    match adapter {
        Some(AdapterParams::Lora(l)) => (Some(&l.layers[i]), None),
        Some(AdapterParams::Ia3(a)) => (None, Some(&a.layers[i])),
        None => (None, None),
    }
}

/// Gradient buffers shaped like the trainable parts of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Present only when backbone gradients are requested (pretraining).
    pub backbone: Option<BaseWeights>,
    pub adapter: Option<AdapterParams>,
    pub head: Head,
}

impl Gradients {
    pub fn zeros(weights: &BaseWeights, adapter: Option<&AdapterParams>, with_backbone: bool) -> Self {
        let cfg = &weights.config;
        Gradients {
            backbone: with_backbone.then(|| BaseWeights::zeros(cfg)),
            adapter: adapter.map(AdapterParams::zeros_like),
            head: Head::zeros(cfg.n_classes, cfg.d_model),
        }
    }

    pub fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        if let Some(b) = &mut self.backbone {
            out.extend(b.named_mut());
        }
        if let Some(a) = &mut self.adapter {
            out.extend(a.named_mut());
        }
        out.extend(self.head.named_mut());
        out
    }

    pub fn named(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        if let Some(b) = &self.backbone {
            out.extend(b.named());
        }
        if let Some(a) = &self.adapter {
            out.extend(a.named());
        }
        out.extend(self.head.named());
        out
    }

    pub fn fill(&mut self, value: f64) {
        for (_, mut t) in self.named_mut() {
            t.fill(value);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for (_, mut t) in self.named_mut() {
            t.mapv_inplace(|x| x * c);
        }
    }
}

/// Accumulates the gradient of `dlogits · logits` into `grads`.
pub(crate) fn backward(
    weights: &BaseWeights,
    adapter: Option<&AdapterParams>,
    head: &Head,
    cache: &ForwardCache,
    dlogits: &Array1<f64>,
    grads: &mut Gradients,
) {
    let cfg = &weights.config;
    let t = cache.positions.len();
    let dh = cfg.d_head;
    let scale = 1.0 / (dh as f64).sqrt();

    // Head.
    Zip::from(&mut grads.head.w)
        .and_broadcast(&dlogits.view().insert_axis(Axis(1)))
        .and_broadcast(&cache.pooled)
        .for_each(|g, &dl, &p| *g += dl * p);
    grads.head.b += dlogits;
    let dpooled = head.w.t().dot(dlogits) / t as f64;
    let dz = dpooled.broadcast((t, cfg.d_model)).unwrap().to_owned();

    let mut backbone = grads.backbone.as_mut();
    let mut dx = layer_norm_backward(
        &dz,
        &cache.ln_f,
        &weights.final_g,
        backbone.as_deref_mut().map(|b| (&mut b.final_g, &mut b.final_b)),
    );

    for i in (0..cfg.n_layers).rev() {
        let lw = &weights.layers[i];
        let lc = &cache.layers[i];
        let (lora, ia3) = adapter_layer(adapter, i);
        let mut bl = backbone.as_deref_mut().map(|b| &mut b.layers[i]);

        // FFN block: x2 = x1 + u W2ᵀ + b2.
        let df = &dx;
        if let Some(g) = bl.as_deref_mut() {
            g.w2 += &df.t().dot(&lc.u);
            g.b2 += &df.sum_axis(Axis(0));
        }
        let du = df.dot(&lw.w2);
        let du0 = match ia3 {
            Some(s) => {
                if let Some(AdapterParams::Ia3(ga)) = grads.adapter.as_mut() {
                    ga.layers[i].l_ff += &(&du * &lc.u0).sum_axis(Axis(0));
                }
                du * &s.l_ff
            }
            None => du,
        };
        let mut dm = du0;
        Zip::from(&mut dm).and(&lc.m).for_each(|g, &m| {
            if m <= 0.0 {
                *g = 0.0;
            }
        });
        if let Some(g) = bl.as_deref_mut() {
            g.w1 += &dm.t().dot(&lc.c);
            g.b1 += &dm.sum_axis(Axis(0));
        }
        let dc = dm.dot(&lw.w1);
        dx = dx.clone()
            + layer_norm_backward(
                &dc,
                &lc.ln2,
                &lw.ln2_g,
                bl.as_deref_mut().map(|g| (&mut g.ln2_g, &mut g.ln2_b)),
            );

        // Attention block: x1 = x0 + o Woᵀ + bo.
        let dy = &dx;
        if let Some(g) = bl.as_deref_mut() {
            g.wo += &dy.t().dot(&lc.o);
            g.bo += &dy.sum_axis(Axis(0));
        }
        let d_o = dy.dot(&lw.wo);
        let mut dq = Array2::zeros((t, cfg.d_model));
        let mut dk = Array2::zeros((t, cfg.d_model));
        let mut dv = Array2::zeros((t, cfg.d_model));
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &lc.probs[h];
            let doh = d_o.slice(cols);
            let dp = doh.dot(&lc.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&doh));
            let mut ds = dp;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = row.iter().zip(prow).map(|(a, b)| a * b).sum::<f64>();
                Zip::from(&mut row).and(&prow).for_each(|d, &pv| *d = pv * (*d - dot) * scale);
            }
            dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
        }

        let (dk0, dv_pre) = match ia3 {
            Some(s) => {
                if let Some(AdapterParams::Ia3(ga)) = grads.adapter.as_mut() {
                    ga.layers[i].l_k += &(&dk * &lc.k0).sum_axis(Axis(0));
                    ga.layers[i].l_v += &(&dv * &lc.v_pre).sum_axis(Axis(0));
                }
                (dk * &s.l_k, dv * &s.l_v)
            }
            None => (dk, dv),
        };

        let mut da = dq.dot(&lw.wq) + dk0.dot(&lw.wk) + dv_pre.dot(&lw.wv);
        if let Some(l) = lora {
            let zq = lc.zq.as_ref().unwrap();
            let zv = lc.zv.as_ref().unwrap();
            let dzq = dq.dot(&l.q.b);
            let dzv = dv_pre.dot(&l.v.b);
            if let Some(AdapterParams::Lora(ga)) = grads.adapter.as_mut() {
                let g = &mut ga.layers[i];
                g.q.b += &dq.t().dot(zq);
                g.q.a += &dzq.t().dot(&lc.a);
                g.v.b += &dv_pre.t().dot(zv);
                g.v.a += &dzv.t().dot(&lc.a);
            }
            da += &dzq.dot(&l.q.a);
            da += &dzv.dot(&l.v.a);
        }
        if let Some(g) = bl.as_deref_mut() {
            g.wq += &dq.t().dot(&lc.a);
            g.bq += &dq.sum_axis(Axis(0));
            g.wk += &dk0.t().dot(&lc.a);
            g.bk += &dk0.sum_axis(Axis(0));
            g.wv += &dv_pre.t().dot(&lc.a);
            g.bv += &dv_pre.sum_axis(Axis(0));
        }
        dx = dx.clone()
            + layer_norm_backward(
                &da,
                &lc.ln1,
                &lw.ln1_g,
                bl.map(|g| (&mut g.ln1_g, &mut g.ln1_b)),
            );
    }

    if let Some(b) = backbone {
        for (row, &p) in cache.positions.iter().enumerate() {
            let mut tok = b.tok_embed.row_mut(cache.tokens[p]);
            tok += &dx.row(row);
            let mut pos = b.pos_embed.row_mut(p);
            pos += &dx.row(row);
        }
    }
}

/// Cross-entropy loss of one labelled sequence, accumulating gradients.
pub fn loss_and_backward(
    weights: &BaseWeights,
    adapter: Option<&AdapterParams>,
    head: &Head,
    tokens: &[usize],
    label: usize,
    grads: &mut Gradients,
) -> Result<f64> {
    if label >= weights.config.n_classes {
        return Err(Error::Invalid(format!("label {label} out of range")));
    }
    let cache = forward_cached(weights, adapter, head, tokens)?;
    let (loss, dlogits) = cross_entropy(&cache.logits, label);
    backward(weights, adapter, head, &cache, &dlogits, grads);
    Ok(loss)
}

/// Absorbs a LoRA adapter: `W_q ← W_q + B_q A_q`, `W_v ← W_v + B_v A_v`.
pub fn merge_lora(base: &BaseWeights, adapter: &LoraAdapter) -> Result<BaseWeights> {
    AdapterParams::Lora(adapter.clone()).check_shapes(&base.config)?;
    let mut out = base.clone();
    for (lw, l) in out.layers.iter_mut().zip(&adapter.layers) {
        lw.wq += &l.q.b.dot(&l.q.a);
        lw.wv += &l.v.b.dot(&l.v.a);
    }
    Ok(out)
}

/// Absorbs an IA3 adapter: rows of `W_k`/`W_v` and entries of `b_k`/`b_v`
/// scale by `l_k`/`l_v`; columns of `W2` scale by `l_ff`.
pub fn fold_ia3(base: &BaseWeights, adapter: &Ia3Adapter) -> Result<BaseWeights> {
    AdapterParams::Ia3(adapter.clone()).check_shapes(&base.config)?;
    let mut out = base.clone();
    for (lw, l) in out.layers.iter_mut().zip(&adapter.layers) {
        lw.wk *= &l.l_k.view().insert_axis(Axis(1));
        lw.bk *= &l.l_k;
        lw.wv *= &l.l_v.view().insert_axis(Axis(1));
        lw.bv *= &l.l_v;
        lw.w2 *= &l.l_ff;
    }
    Ok(out)
}

/// A fresh LoRA adapter (B = 0) drawn from its own seed.
pub fn fresh_lora(config: &ModelConfig, rank: usize, seed: u64) -> Result<LoraAdapter> {
    LoraAdapter::init(config, rank, &mut ChaCha8Rng::seed_from_u64(seed))
}
