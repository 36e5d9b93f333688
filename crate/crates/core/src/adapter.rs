//! LoRA and IA3 adapter values and their weight-space composition.
//!
//! Three composition modes are provided:
//!
//! * [`CompositionMode::Parameter`] sums every like-named tensor with the
//!   given weights. For LoRA this weights `B` and `A` separately, so a single
//!   adapter scaled by `c` changes its effective update `BA` by `c²`.
//! * [`CompositionMode::Delta`] (LoRA only) concatenates `√λᵢ Bᵢ` column-wise
//!   and `√λᵢ Aᵢ` row-wise, which makes the composite product exactly
//!   `Σ λᵢ Bᵢ Aᵢ` at the cost of rank `Σ rᵢ`.
//! * [`CompositionMode::Geometric`] (IA3 only) takes `Π lᵢ^λᵢ` elementwise.
//!
//! Classification heads are always combined as `Σ λᵢ headᵢ`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CompatError, Error, Result};
use crate::mbti::{Dichotomy, Trait};
use crate::model::ModelConfig;
use crate::tensor::{is_fingerprint, Checkpoint, CheckpointKind, CheckpointMetadata};

pub const INIT_STD: f64 = 0.02;

/// Tolerance on `Σλ = 1` used by [`WeightVector::is_simplex`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Seven-way classification head, `logits = W · pooled + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Head {
    pub fn zeros(n_classes: usize, d_model: usize) -> Self {
        Head {
            w: Array2::zeros((n_classes, d_model)),
            b: Array1::zeros(n_classes),
        }
    }

    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        Head {
            w: Array2::from_shape_simple_fn((config.n_classes, config.d_model), || normal.sample(rng)),
            b: Array1::zeros(config.n_classes),
        }
    }

    pub fn named(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("head.W".into(), self.w.view().into_dyn()),
            ("head.b".into(), self.b.view().into_dyn()),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("head.W".into(), self.w.view_mut().into_dyn()),
            ("head.b".into(), self.b.view_mut().into_dyn()),
        ]
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let w = ckpt
            .get("head.W")
            .ok_or_else(|| Error::InvalidCheckpoint("missing tensor \"head.W\"".into()))?;
        let shape = w.shape();
        if shape.len() != 2 {
            return Err(Error::InvalidCheckpoint("head.W must be a matrix".into()));
        }
        let (c, d) = (shape[0], shape[1]);
        let mut head = Head::zeros(c, d);
        fill_from(&mut head.named_mut(), ckpt)?;
        Ok(head)
    }
}

/// One LoRA site: the update applied is `h ← h + B A x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSiteParams {
    /// `d × r`
    pub b: Array2<f64>,
    /// `r × k`
    pub a: Array2<f64>,
}

impl LoraSiteParams {
    pub fn new(b: Array2<f64>, a: Array2<f64>) -> Result<Self> {
        let (d, r) = b.dim();
        let (r2, k) = a.dim();
        if r != r2 {
            return Err(Error::Invalid(format!("B is {d}x{r} but A is {r2}x{k}")));
        }
        if r == 0 || r > d.min(k) {
            return Err(Error::Invalid(format!("rank {r} outside 1..=min({d}, {k})")));
        }
        Ok(LoraSiteParams { b, a })
    }

    pub fn rank(&self) -> usize {
        self.b.ncols()
    }
}

/// The dense update `B · A` of a LoRA site.
pub fn lora_delta(site: &LoraSiteParams) -> Array2<f64> {
    site.b.dot(&site.a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub q: LoraSiteParams,
    pub v: LoraSiteParams,
}

/// LoRA factors on the query and value projections of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layers: Vec<LoraLayer>,
}

impl LoraAdapter {
    /// `B = 0`, `A ~ N(0, 0.02²)`: the adapter starts as an exact no-op.
    pub fn init(config: &ModelConfig, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = config.d_model;
        if rank == 0 || rank > d {
            return Err(Error::Config(format!("LoRA rank {rank} outside 1..={d}")));
        }
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let site = |rng: &mut dyn rand::RngCore| LoraSiteParams {
            b: Array2::zeros((d, rank)),
            a: Array2::from_shape_simple_fn((rank, d), || normal.sample(rng)),
        };
        let layers = (0..config.n_layers)
            .map(|_| LoraLayer {
                q: site(rng),
                v: site(rng),
            })
            .collect();
        Ok(LoraAdapter { layers })
    }

    pub fn rank(&self) -> usize {
        self.layers.first().map_or(0, |l| l.q.rank())
    }

    pub fn sites(&self) -> impl Iterator<Item = (String, &LoraSiteParams)> {
        self.layers.iter().enumerate().flat_map(|(i, l)| {
            [(format!("layer{i}.attn.q"), &l.q), (format!("layer{i}.attn.v"), &l.v)]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ia3Layer {
    pub l_k: Array1<f64>,
    pub l_v: Array1<f64>,
    pub l_ff: Array1<f64>,
}

/// IA3 scale vectors on keys, values and FFN intermediates of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Ia3Adapter {
    pub layers: Vec<Ia3Layer>,
}

impl Ia3Adapter {
    /// All-ones vectors, the multiplicative identity.
    pub fn identity(config: &ModelConfig) -> Self {
        let layers = (0..config.n_layers)
            .map(|_| Ia3Layer {
                l_k: Array1::ones(config.d_model),
                l_v: Array1::ones(config.d_model),
                l_ff: Array1::ones(config.d_ff),
            })
            .collect();
        Ia3Adapter { layers }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterParams {
    Lora(LoraAdapter),
    Ia3(Ia3Adapter),
}

impl AdapterParams {
    pub fn kind(&self) -> CheckpointKind {
        match self {
            AdapterParams::Lora(_) => CheckpointKind::Lora,
            AdapterParams::Ia3(_) => CheckpointKind::Ia3,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            AdapterParams::Lora(l) => l.rank(),
            AdapterParams::Ia3(_) => 0,
        }
    }

    pub fn n_layers(&self) -> usize {
        match self {
            AdapterParams::Lora(l) => l.layers.len(),
            AdapterParams::Ia3(a) => a.layers.len(),
        }
    }

    pub fn named(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        match self {
            AdapterParams::Lora(lora) => {
                for (i, l) in lora.layers.iter().enumerate() {
                    for (site, p) in [("q", &l.q), ("v", &l.v)] {
                        out.push((format!("layer{i}.attn.{site}.B"), p.b.view().into_dyn()));
                        out.push((format!("layer{i}.attn.{site}.A"), p.a.view().into_dyn()));
                    }
                }
            }
            AdapterParams::Ia3(ia3) => {
                for (i, l) in ia3.layers.iter().enumerate() {
                    out.push((format!("layer{i}.attn.l_k"), l.l_k.view().into_dyn()));
                    out.push((format!("layer{i}.attn.l_v"), l.l_v.view().into_dyn()));
                    out.push((format!("layer{i}.ffn.l_ff"), l.l_ff.view().into_dyn()));
                }
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        match self {
            AdapterParams::Lora(lora) => {
                for (i, l) in lora.layers.iter_mut().enumerate() {
                    let LoraLayer { q, v } = l;
                    for (site, p) in [("q", q), ("v", v)] {
                        out.push((format!("layer{i}.attn.{site}.B"), p.b.view_mut().into_dyn()));
                        out.push((format!("layer{i}.attn.{site}.A"), p.a.view_mut().into_dyn()));
                    }
                }
            }
            AdapterParams::Ia3(ia3) => {
                for (i, l) in ia3.layers.iter_mut().enumerate() {
                    out.push((format!("layer{i}.attn.l_k"), l.l_k.view_mut().into_dyn()));
                    out.push((format!("layer{i}.attn.l_v"), l.l_v.view_mut().into_dyn()));
                    out.push((format!("layer{i}.ffn.l_ff"), l.l_ff.view_mut().into_dyn()));
                }
            }
        }
        out
    }

    /// Same structure with every entry zero (used as a gradient buffer).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.named_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Checks the adapter against the backbone dimensions it will run on.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        if self.n_layers() != config.n_layers {
            return Err(Error::Invalid(format!(
                "adapter has {} layers, model has {}",
                self.n_layers(),
                config.n_layers
            )));
        }
        let d = config.d_model;
        let ok = match self {
            AdapterParams::Lora(l) => l.layers.iter().all(|l| {
                [&l.q, &l.v]
                    .iter()
                    .all(|s| s.b.nrows() == d && s.a.ncols() == d && s.a.nrows() == s.b.ncols())
            }),
            AdapterParams::Ia3(a) => a
                .layers
                .iter()
                .all(|l| l.l_k.len() == d && l.l_v.len() == d && l.l_ff.len() == config.d_ff),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid("adapter tensor shapes do not match the model".into()))
        }
    }
}

/// A trained (or composed) adapter together with its own head.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCheckpoint {
    pub base_fingerprint: String,
    pub trait_label: String,
    pub params: AdapterParams,
    pub head: Head,
    /// Extra provenance metadata written alongside the required keys.
    pub extra: BTreeMap<String, String>,
}

impl AdapterCheckpoint {
    pub fn kind(&self) -> CheckpointKind {
        self.params.kind()
    }

    /// Adapter tensors followed by the head.
    pub fn named(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = self.params.named();
        out.extend(self.head.named());
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = self.params.named_mut();
        out.extend(self.head.named_mut());
        out
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        if !is_fingerprint(&self.base_fingerprint) {
            return Err(Error::InvalidCheckpoint(format!(
                "base_fingerprint {:?} is not 16 hex characters",
                self.base_fingerprint
            )));
        }
        let mut meta =
            CheckpointMetadata::new(self.kind(), &self.base_fingerprint, &self.trait_label, self.params.rank());
        for (k, v) in &self.extra {
            if !CheckpointMetadata::REQUIRED.contains(&k.as_str()) {
                meta.insert(k.clone(), v.clone());
            }
        }
        let mut ckpt = Checkpoint::new(meta);
        for (name, t) in self.named() {
            let t = t.as_standard_layout();
            ckpt.insert_f64(&name, t.shape().to_vec(), t.as_slice().unwrap())?;
        }
        Ok(ckpt)
    }

    /// Rebuilds an adapter from a checkpoint, inferring layer count and rank
    /// from the stored tensors.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.validate()?;
        let kind = ckpt.metadata.kind()?;
        let head = Head::from_checkpoint(ckpt)?;
        let d = head.w.ncols();
        let n_layers = (0..)
            .take_while(|i| {
                let probe = match kind {
                    CheckpointKind::Lora => format!("layer{i}.attn.q.B"),
                    _ => format!("layer{i}.attn.l_k"),
                };
                ckpt.get(&probe).is_some()
            })
            .count();
        let mut params = match kind {
            CheckpointKind::Base => {
                return Err(Error::InvalidCheckpoint("expected an adapter, found a base checkpoint".into()))
            }
            CheckpointKind::Lora => {
                let rank = ckpt.metadata.rank()?;
                let site = || LoraSiteParams {
                    b: Array2::zeros((d, rank)),
                    a: Array2::zeros((rank, d)),
                };
                AdapterParams::Lora(LoraAdapter {
                    layers: (0..n_layers).map(|_| LoraLayer { q: site(), v: site() }).collect(),
                })
            }
            CheckpointKind::Ia3 => {
                let d_ff = ckpt
                    .get("layer0.ffn.l_ff")
                    .map(|t| t.numel())
                    .ok_or_else(|| Error::InvalidCheckpoint("missing tensor \"layer0.ffn.l_ff\"".into()))?;
                AdapterParams::Ia3(Ia3Adapter {
                    layers: (0..n_layers)
                        .map(|_| Ia3Layer {
                            l_k: Array1::zeros(d),
                            l_v: Array1::zeros(d),
                            l_ff: Array1::zeros(d_ff),
                        })
                        .collect(),
                })
            }
        };
        if n_layers == 0 {
            return Err(Error::InvalidCheckpoint("adapter has no layers".into()));
        }
        let mut named = params.named_mut();
        fill_from(&mut named, ckpt)?;
        let expected = named.len() + 2;
        drop(named);
        if ckpt.len() != expected {
            return Err(Error::InvalidCheckpoint(format!(
                "{} adapter with {n_layers} layers has {expected} tensors, file has {}",
                kind,
                ckpt.len()
            )));
        }
        let extra = ckpt
            .metadata
            .as_map()
            .iter()
            .filter(|(k, _)| !CheckpointMetadata::REQUIRED.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(AdapterCheckpoint {
            base_fingerprint: ckpt.metadata.base_fingerprint()?.to_owned(),
            trait_label: ckpt.metadata.trait_label()?.to_owned(),
            params,
            head,
            extra,
        })
    }
}

pub(crate) fn fill_from(targets: &mut [(String, ArrayViewMutD<'_, f64>)], ckpt: &Checkpoint) -> Result<()> {
    for (name, t) in targets.iter_mut() {
        let values = ckpt.values(name, t.shape())?;
        for (dst, src) in t.iter_mut().zip(values) {
            *dst = src;
        }
    }
    Ok(())
}

/// Composition coefficients, one per combining adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(bad) = weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::Invalid(format!("weight {bad} is not finite")));
        }
        Ok(WeightVector(weights))
    }

    pub fn equal(n: usize) -> Self {
        WeightVector(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Every weight strictly inside (0, 1) and the weights sum to 1.
    pub fn is_simplex(&self) -> bool {
        !self.0.is_empty()
            && self.0.iter().all(|&w| (w > 0.0 && w < 1.0) || (self.0.len() == 1 && w == 1.0))
            && (self.0.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompositionMode {
    #[default]
    Parameter,
    Delta,
    Geometric,
}

impl CompositionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CompositionMode::Parameter => "parameter",
            CompositionMode::Delta => "delta",
            CompositionMode::Geometric => "geometric",
        }
    }
}

impl fmt::Display for CompositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CompositionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parameter" => Ok(CompositionMode::Parameter),
            "delta" => Ok(CompositionMode::Delta),
            "geometric" => Ok(CompositionMode::Geometric),
            other => Err(Error::Invalid(format!(
                "unknown mode {other:?} (expected parameter, delta or geometric)"
            ))),
        }
    }
}

/// Multiplies every adapter and head tensor by `c`.
pub fn scale(adapter: &AdapterCheckpoint, c: f64) -> Result<AdapterCheckpoint> {
    if !c.is_finite() {
        return Err(Error::Invalid(format!("scale factor {c} is not finite")));
    }
    let mut out = adapter.clone();
    for (_, mut t) in out.named_mut() {
        t.mapv_inplace(|x| x * c);
    }
    out.trait_label = format!("{}*{}", adapter.trait_label, c);
    Ok(out)
}

/// Checks that a set of adapters can be composed under `mode`.
///
/// Conditions are checked in order (kind, base fingerprint, mode support,
/// rank, tensor shapes) and the first failure is reported together with the
/// pair of adapter indices that triggered it.
pub fn validate_compatibility(adapters: &[AdapterCheckpoint], mode: CompositionMode) -> Result<(), CompatError> {
    let Some(first) = adapters.first() else {
        return Err(CompatError::Empty);
    };
    for (i, a) in adapters.iter().enumerate().skip(1) {
        if a.kind() != first.kind() {
            return Err(CompatError::KindMismatch {
                first: 0,
                second: i,
                first_kind: first.kind().to_string(),
                second_kind: a.kind().to_string(),
            });
        }
    }
    for (i, a) in adapters.iter().enumerate().skip(1) {
        if a.base_fingerprint != first.base_fingerprint {
            return Err(CompatError::FingerprintMismatch {
                first: 0,
                second: i,
                first_fp: first.base_fingerprint.clone(),
                second_fp: a.base_fingerprint.clone(),
            });
        }
    }
    let supported = match (mode, first.kind()) {
        (CompositionMode::Parameter, _) => true,
        (CompositionMode::Delta, kind) => kind == CheckpointKind::Lora,
        (CompositionMode::Geometric, kind) => kind == CheckpointKind::Ia3,
    };
    if !supported {
        return Err(CompatError::ModeUnsupported {
            mode: mode.to_string(),
            kind: first.kind().to_string(),
        });
    }
    if mode != CompositionMode::Delta {
        for (i, a) in adapters.iter().enumerate().skip(1) {
            if a.params.rank() != first.params.rank() {
                return Err(CompatError::RankMismatch {
                    first: 0,
                    second: i,
                    first_rank: first.params.rank(),
                    second_rank: a.params.rank(),
                });
            }
        }
    }
    let signature = |a: &AdapterCheckpoint| -> Vec<(String, Vec<usize>)> {
        a.named()
            .into_iter()
            .map(|(name, t)| {
                let mut shape = t.shape().to_vec();
                // Rank is free in delta mode: compare only the outer dimensions.
                if mode == CompositionMode::Delta {
                    if name.ends_with(".B") {
                        shape[1] = 0;
                    } else if name.ends_with(".A") {
                        shape[0] = 0;
                    }
                }
                (name, shape)
            })
            .collect()
    };
    let reference = signature(first);
    for (i, a) in adapters.iter().enumerate().skip(1) {
        let sig = signature(a);
        if sig.len() != reference.len() {
            return Err(CompatError::ShapeMismatch {
                first: 0,
                second: i,
                tensor: "<layer count>".into(),
            });
        }
        if let Some((name, _)) = sig.iter().zip(&reference).find(|(x, y)| x != y).map(|(x, _)| x) {
            return Err(CompatError::ShapeMismatch {
                first: 0,
                second: i,
                tensor: name.clone(),
            });
        }
    }
    Ok(())
}

/// Composes adapters in weight space as `Σ λᵢ θᵢ` (or the delta / geometric
/// variants, see the module docs).
pub fn weighted_compose(
    adapters: &[AdapterCheckpoint],
    weights: &WeightVector,
    mode: CompositionMode,
) -> Result<AdapterCheckpoint> {
    if adapters.len() != weights.len() {
        return Err(CompatError::WeightCount {
            adapters: adapters.len(),
            weights: weights.len(),
        }
        .into());
    }
    validate_compatibility(adapters, mode)?;
    let lambdas = weights.as_slice();

    let params = match mode {
        CompositionMode::Parameter => {
            let parts: Vec<&AdapterParams> = adapters.iter().map(|a| &a.params).collect();
            let mut out = parts[0].clone();
            linear_combination(&mut out.named_mut(), &parts.iter().map(|p| p.named()).collect::<Vec<_>>(), lambdas);
            out
        }
        CompositionMode::Delta => {
            if let Some((index, &value)) = lambdas.iter().enumerate().find(|(_, &w)| w < 0.0) {
                return Err(CompatError::NegativeWeight { index, value }.into());
            }
            AdapterParams::Lora(delta_compose(adapters, lambdas))
        }
        CompositionMode::Geometric => AdapterParams::Ia3(geometric_compose(adapters, lambdas)?),
    };

    let mut head = adapters[0].head.clone();
    let heads: Vec<_> = adapters.iter().map(|a| a.head.named()).collect();
    linear_combination(&mut head.named_mut(), &heads, lambdas);

    let mut extra = BTreeMap::new();
    extra.insert("composition_mode".to_owned(), mode.to_string());
    extra.insert(
        "composition_weights".to_owned(),
        serde_json::to_string(weights).expect("weights serialize"),
    );
    extra.insert(
        "composed_from".to_owned(),
        adapters.iter().map(|a| a.trait_label.as_str()).collect::<Vec<_>>().join(","),
    );

    Ok(AdapterCheckpoint {
        base_fingerprint: adapters[0].base_fingerprint.clone(),
        trait_label: composite_label(adapters),
        params,
        head,
        extra,
    })
}

/// `out[j] = Σᵢ λᵢ parts[i][j]`, accumulated left to right starting from
/// `λ₀ parts[0][j]`.
fn linear_combination(
    out: &mut [(String, ArrayViewMutD<'_, f64>)],
    parts: &[Vec<(String, ArrayViewD<'_, f64>)>],
    lambdas: &[f64],
) {
    for (j, (_, dst)) in out.iter_mut().enumerate() {
        Zip::from(dst.view_mut())
            .and(&parts[0][j].1)
            .for_each(|d, &s| *d = lambdas[0] * s);
        for (part, &lambda) in parts.iter().zip(lambdas).skip(1) {
            dst.scaled_add(lambda, &part[j].1);
        }
    }
}

fn delta_compose(adapters: &[AdapterCheckpoint], lambdas: &[f64]) -> LoraAdapter {
    let loras: Vec<&LoraAdapter> = adapters
        .iter()
        .map(|a| match &a.params {
            AdapterParams::Lora(l) => l,
            AdapterParams::Ia3(_) => unreachable!("validated as lora"),
        })
        .collect();
    let roots: Vec<f64> = lambdas.iter().map(|l| l.sqrt()).collect();
    let site = |pick: &dyn Fn(&LoraLayer) -> &LoraSiteParams, layer: usize| {
        let bs: Vec<Array2<f64>> = loras
            .iter()
            .zip(&roots)
            .map(|(l, &s)| &pick(&l.layers[layer]).b * s)
            .collect();
        let as_: Vec<Array2<f64>> = loras
            .iter()
            .zip(&roots)
            .map(|(l, &s)| &pick(&l.layers[layer]).a * s)
            .collect();
        LoraSiteParams {
            b: concatenate(Axis(1), &bs.iter().map(|b| b.view()).collect::<Vec<_>>()).unwrap(),
            a: concatenate(Axis(0), &as_.iter().map(|a| a.view()).collect::<Vec<_>>()).unwrap(),
        }
    };
    LoraAdapter {
        layers: (0..loras[0].layers.len())
            .map(|i| LoraLayer {
                q: site(&|l| &l.q, i),
                v: site(&|l| &l.v, i),
            })
            .collect(),
    }
}

fn geometric_compose(adapters: &[AdapterCheckpoint], lambdas: &[f64]) -> Result<Ia3Adapter> {
    let mut out = adapters[0].params.clone();
    let parts: Vec<_> = adapters.iter().map(|a| a.params.named()).collect();
    for (index, part) in parts.iter().enumerate() {
        if let Some((name, _)) = part.iter().find(|(_, t)| t.iter().any(|&x| x.is_nan() || x <= 0.0)) {
            return Err(CompatError::NonPositiveScale {
                index,
                tensor: name.clone(),
            }
            .into());
        }
    }
    for (j, (_, dst)) in out.named_mut().iter_mut().enumerate() {
        dst.fill(1.0);
        for (part, &lambda) in parts.iter().zip(lambdas) {
            Zip::from(dst.view_mut())
                .and(&part[j].1)
                .for_each(|d, &s| *d *= s.powf(lambda));
        }
    }
    match out {
        AdapterParams::Ia3(ia3) => Ok(ia3),
        AdapterParams::Lora(_) => unreachable!("validated as ia3"),
    }
}

/// Four adapters with one trait per dichotomy are labelled with the
/// personality code (E/I, S/N, T/F, J/P order); anything else is
/// "composite".
fn composite_label(adapters: &[AdapterCheckpoint]) -> String {
    if adapters.len() == 1 {
        return adapters[0].trait_label.clone();
    }
    if adapters.len() != 4 {
        return "composite".into();
    }
    let traits: Option<Vec<Trait>> = adapters.iter().map(|a| a.trait_label.parse().ok()).collect();
    let Some(mut traits) = traits else {
        return "composite".into();
    };
    traits.sort_by_key(|t| t.dichotomy());
    let covers_all = traits.iter().map(|t| t.dichotomy()).eq(Dichotomy::ALL);
    if covers_all {
        traits.iter().map(|t| t.letter()).collect()
    } else {
        "composite".into()
    }
}
