//! Pretraining, frozen-backbone adapter training and gradient checks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::debug;
use ndarray::{ArrayViewD, ArrayViewMutD};
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterCheckpoint, AdapterParams, Head, Ia3Adapter, LoraAdapter};
use crate::error::{Error, Result};
use crate::model::{cross_entropy, forward_parts, init_base, loss_and_backward, BaseModel, BaseWeights, Gradients, ModelConfig};
use crate::tasks::{LabeledSample, TraitDataset};

const STREAM_SHUFFLE: u64 = 1;
const STREAM_ADAPTER_INIT: u64 = 2;
const STREAM_GRAD_CHECK: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Lora,
    Ia3,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 2] = [AdapterKind::Lora, AdapterKind::Ia3];

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Ia3 => "ia3",
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(AdapterKind::Lora),
            "ia3" => Ok(AdapterKind::Ia3),
            other => Err(Error::Invalid(format!("unknown adapter kind {other:?} (expected lora or ia3)"))),
        }
    }
}

/// Adam with cross-entropy loss over the seven Likert classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// LoRA rank; ignored for IA3 and pretraining.
    pub lora_rank: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::adapter()
    }
}

impl TrainConfig {
    /// Defaults for base-model pretraining.
    pub fn pretrain() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 50,
            batch_size: 32,
            ..TrainConfig::adapter()
        }
    }

    /// Defaults for trait adapter training.
    pub fn adapter() -> Self {
        TrainConfig {
            lr: 3e-3,
            epochs: 200,
            batch_size: 16,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lora_rank: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return fail("Adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if self.lora_rank == 0 {
            return fail("lora_rank must be at least 1".into());
        }
        Ok(())
    }
}

/// Plain Adam over a fixed, ordered list of tensors.
struct Adam {
    cfg: TrainConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(cfg: TrainConfig) -> Self {
        Adam {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    fn update(&mut self, params: Vec<(String, ArrayViewMutD<'_, f64>)>, grads: Vec<(String, ArrayViewD<'_, f64>)>) {
        debug_assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (((_, mut p), (_, g)), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}

/// Mean loss per epoch, with the loss before any update at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub final_accuracy: f64,
}

/// Mean cross-entropy and accuracy of a model over a sample set.
pub fn evaluate_loss(
    weights: &BaseWeights,
    adapter: Option<&AdapterParams>,
    head: &Head,
    data: &[LabeledSample],
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in data {
        let logits = forward_parts(weights, adapter, head, &s.statement.tokens)?;
        loss += cross_entropy(&logits, s.label).0;
        if crate::eval::argmax(logits.view()) == s.label {
            correct += 1;
        }
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// What gets updated in a training run.
enum Trainable<'a> {
    Everything {
        weights: &'a mut BaseWeights,
        head: &'a mut Head,
    },
    Adapter {
        weights: &'a BaseWeights,
        adapter: &'a mut AdapterParams,
        head: &'a mut Head,
    },
}

fn run(mut target: Trainable<'_>, data: &[LabeledSample], tc: &TrainConfig) -> Result<TrainReport> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(STREAM_SHUFFLE);
    let mut adam = Adam::new(*tc);
    let mut order: Vec<usize> = (0..data.len()).collect();

    let initial = match &target {
        Trainable::Everything { weights, head } => evaluate_loss(weights, None, head, data)?.0,
        Trainable::Adapter { weights, adapter, head } => evaluate_loss(weights, Some(adapter), head, data)?.0,
    };
    let mut losses = vec![initial];

    let mut grads = match &target {
        Trainable::Everything { weights, .. } => Gradients::zeros(weights, None, true),
        Trainable::Adapter { weights, adapter, .. } => Gradients::zeros(weights, Some(adapter), false),
    };

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tc.batch_size) {
            grads.fill(0.0);
            for &i in batch {
                let s = &data[i];
                epoch_loss += match &target {
                    Trainable::Everything { weights, head } => {
                        loss_and_backward(weights, None, head, &s.statement.tokens, s.label, &mut grads)?
                    }
                    Trainable::Adapter { weights, adapter, head } => {
                        loss_and_backward(weights, Some(adapter), head, &s.statement.tokens, s.label, &mut grads)?
                    }
                };
            }
            grads.scale(1.0 / batch.len() as f64);
            match &mut target {
                Trainable::Everything { weights, head } => {
                    let mut params = weights.named_mut();
                    params.extend(head.named_mut());
                    adam.update(params, grads.named());
                }
                Trainable::Adapter { adapter, head, .. } => {
                    let mut params = adapter.named_mut();
                    params.extend(head.named_mut());
                    adam.update(params, grads.named());
                }
            }
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        debug!("epoch {epoch}: loss {mean:.5}");
        losses.push(mean);
    }

    let final_accuracy = match &target {
        Trainable::Everything { weights, head } => evaluate_loss(weights, None, head, data)?.1,
        Trainable::Adapter { weights, adapter, head } => evaluate_loss(weights, Some(adapter), head, data)?.1,
    };
    Ok(TrainReport { losses, final_accuracy })
}

/// Trains backbone and head from a fresh initialisation drawn from
/// `model_seed`.
pub fn pretrain_base(
    config: &ModelConfig,
    model_seed: u64,
    data: &[LabeledSample],
    tc: &TrainConfig,
) -> Result<(BaseModel, TrainReport)> {
    tc.validate()?;
    let (mut weights, mut head) = init_base(config, model_seed)?;
    let report = run(
        Trainable::Everything {
            weights: &mut weights,
            head: &mut head,
        },
        data,
        tc,
    )?;
    Ok((BaseModel::new(weights, head), report))
}

/// Trains a LoRA or IA3 adapter plus a head (started from the base head)
/// while the backbone stays frozen.
pub fn train_adapter(
    base: &BaseModel,
    kind: AdapterKind,
    data: &TraitDataset,
    tc: &TrainConfig,
) -> Result<(AdapterCheckpoint, TrainReport)> {
    tc.validate()?;
    let config = base.config();
    let mut init_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    init_rng.set_stream(STREAM_ADAPTER_INIT);
    let mut params = match kind {
        AdapterKind::Lora => AdapterParams::Lora(LoraAdapter::init(config, tc.lora_rank, &mut init_rng)?),
        AdapterKind::Ia3 => AdapterParams::Ia3(Ia3Adapter::identity(config)),
    };
    let mut head = base.head().clone();
    let report = run(
        Trainable::Adapter {
            weights: base.weights(),
            adapter: &mut params,
            head: &mut head,
        },
        &data.samples,
        tc,
    )?;
    let mut extra = BTreeMap::new();
    extra.insert("train_config".to_owned(), serde_json::to_string(tc).expect("config serializes"));
    extra.insert("train_accuracy".to_owned(), format!("{:.6}", report.final_accuracy));
    Ok((
        AdapterCheckpoint {
            base_fingerprint: base.fingerprint().to_owned(),
            trait_label: data.trait_id.to_string(),
            params,
            head,
            extra,
        },
        report,
    ))
}

/// Analytic gradient of one sample's loss, flattened in the order of
/// [`AdapterCheckpoint::named`] (adapter tensors, then head).
pub fn analytic_gradient(weights: &BaseWeights, adapter: &AdapterCheckpoint, sample: &LabeledSample) -> Result<Vec<f64>> {
    let mut grads = Gradients::zeros(weights, Some(&adapter.params), false);
    loss_and_backward(
        weights,
        Some(&adapter.params),
        &adapter.head,
        &sample.statement.tokens,
        sample.label,
        &mut grads,
    )?;
    Ok(grads.named().iter().flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>()).collect())
}

fn sample_loss(weights: &BaseWeights, adapter: &AdapterCheckpoint, sample: &LabeledSample) -> Result<f64> {
    let logits = forward_parts(weights, Some(&adapter.params), &adapter.head, &sample.statement.tokens)?;
    Ok(cross_entropy(&logits, sample.label).0)
}

fn perturbed(adapter: &AdapterCheckpoint, coord: usize, delta: f64) -> AdapterCheckpoint {
    let mut out = adapter.clone();
    let mut offset = 0;
    for (_, mut t) in out.named_mut() {
        if coord < offset + t.len() {
            let slot = t.iter_mut().nth(coord - offset).unwrap();
            *slot += delta;
            break;
        }
        offset += t.len();
    }
    out
}

/// Worst relative error `|g - fd| / max(1, |g|)` between `analytic` and the
/// central difference at each coordinate in `coords`.
pub fn grad_check_coords(
    weights: &BaseWeights,
    adapter: &AdapterCheckpoint,
    sample: &LabeledSample,
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
) -> Result<f64> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut worst = 0.0f64;
    for &c in coords {
        let plus = sample_loss(weights, &perturbed(adapter, c, eps), sample)?;
        let minus = sample_loss(weights, &perturbed(adapter, c, -eps), sample)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic[c] - numeric).abs() / analytic[c].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Compares backprop against central differences on `n_coords` randomly
/// chosen adapter/head coordinates.
pub fn grad_check(
    weights: &BaseWeights,
    adapter: &AdapterCheckpoint,
    sample: &LabeledSample,
    n_coords: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    if n_coords == 0 {
        return Ok(0.0);
    }
    let analytic = analytic_gradient(weights, adapter, sample)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_GRAD_CHECK);
    let coords = index::sample(&mut rng, analytic.len(), n_coords.min(analytic.len())).into_vec();
    grad_check_coords(weights, adapter, sample, &analytic, &coords, eps)
}
