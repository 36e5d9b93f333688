//! End-to-end experiment: data, pretraining, eight trait adapters, sixteen
//! compositions and the two summary tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use crate::adapter::{weighted_compose, AdapterCheckpoint, CompositionMode, WeightVector};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_baseline, EvalReport};
use crate::mbti::{Personality, Trait};
use crate::model::{BaseModel, ModelConfig};
use crate::sweep::sweep;
use crate::tasks::{gen_pretrain_dataset, gen_questionnaire, gen_trait_dataset_with, Questionnaire, TaskOptions, TraitDataset};
use crate::train::{pretrain_base, train_adapter, AdapterKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub train: u64,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seeds: Seeds,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub adapter: TrainConfig,
    pub pretrain_samples: usize,
    /// Other-dichotomy statements mixed into each trait dataset.
    pub stabilizers: usize,
    pub kinds: Vec<AdapterKind>,
    pub mode: CompositionMode,
    pub sweep: bool,
    pub granularity: f64,
    pub out_dir: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seeds: Seeds::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(),
            adapter: TrainConfig::adapter(),
            pretrain_samples: 2048,
            stabilizers: 0,
            kinds: AdapterKind::ALL.to_vec(),
            mode: CompositionMode::Parameter,
            sweep: false,
            granularity: 0.1,
            out_dir: "out".into(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.adapter.validate()?;
        if self.pretrain_samples == 0 {
            return Err(Error::Config("pretrain_samples must be at least 1".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::Config("kinds must name at least one adapter kind".into()));
        }
        crate::sweep::simplex_grid(4, self.granularity)?;
        Ok(())
    }

    /// Pretraining settings with the train seed applied.
    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seeds.train, ..self.pretrain }
    }

    /// Adapter settings for one trait; each trait gets its own shuffle stream.
    pub fn adapter_config(&self, t: Trait) -> TrainConfig {
        TrainConfig {
            seed: self.seeds.train.wrapping_add(1 + t as u64),
            ..self.adapter
        }
    }

    pub fn task_options(&self) -> TaskOptions {
        TaskOptions { stabilizers: self.stabilizers }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    #[serde(rename = "trait")]
    pub trait_id: Trait,
    pub name: String,
    pub baseline: f64,
    pub lora: Option<f64>,
    pub ia3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composite {
    pub weights: Vec<f64>,
    /// Scores toward the personality's four traits, in letter order.
    pub scores: [f64; 4],
    pub aligned: [bool; 4],
    pub all_aligned: bool,
    pub objective: f64,
}

impl Composite {
    fn from_report(weights: &WeightVector, r: &EvalReport) -> Self {
        let a = r.alignment.as_ref().expect("report has a target");
        Composite {
            weights: weights.as_slice().to_vec(),
            scores: std::array::from_fn(|i| a[i].score),
            aligned: std::array::from_fn(|i| a[i].aligned),
            all_aligned: r.aligned == Some(true),
            objective: r.target_objective().expect("report has a target"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub personality: String,
    pub equal: Composite,
    pub swept: Option<Composite>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2 {
    pub kind: AdapterKind,
    pub mode: CompositionMode,
    pub rows: Vec<Table2Row>,
    pub aligned_equal: usize,
    pub aligned_swept: Option<usize>,
}

/// Everything the summary files contain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: PipelineConfig,
    pub base_fingerprint: String,
    pub pretrain_accuracy: f64,
    pub adapter_accuracy: BTreeMap<String, f64>,
    pub table1: Vec<Table1Row>,
    pub table2: Vec<Table2>,
}

impl Summary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn table2_for(&self, kind: AdapterKind) -> Option<&Table2> {
        self.table2.iter().find(|t| t.kind == kind)
    }

    /// Both tables as aligned plain text. Scores are rounded for display.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let cell = |v: Option<f64>| v.map_or("-".to_owned(), |x| format!("{x:.0}"));
        let _ = writeln!(s, "Table 1: score toward each trait (questionnaire, 0-100)");
        let _ = writeln!(s, "{:<14} {:>8} {:>6} {:>6}", "trait", "baseline", "lora", "ia3");
        for r in &self.table1 {
            let _ = writeln!(
                s,
                "{:<14} {:>8} {:>6} {:>6}",
                r.name,
                cell(Some(r.baseline)),
                cell(r.lora),
                cell(r.ia3)
            );
        }
        let mark = |b: bool| if b { "✓" } else { "✗" };
        for t in &self.table2 {
            let _ = writeln!(s);
            let _ = writeln!(s, "Table 2: {} composition, {} mode", t.kind, t.mode);
            let mut header = format!("{:<6} {:>4} {:>4} {:>4} {:>4} {:>3}", "code", "t1", "t2", "t3", "t4", "eq");
            if t.aligned_swept.is_some() {
                header += &format!("  {:>4} {:>4} {:>4} {:>4} {:>5}  weights", "t1", "t2", "t3", "t4", "sweep");
            }
            let _ = writeln!(s, "{header}");
            for r in &t.rows {
                let e = &r.equal;
                let mut line = format!(
                    "{:<6} {:>4.0} {:>4.0} {:>4.0} {:>4.0} {:>3}",
                    r.personality,
                    e.scores[0],
                    e.scores[1],
                    e.scores[2],
                    e.scores[3],
                    mark(e.all_aligned)
                );
                if let Some(w) = &r.swept {
                    let weights: Vec<String> = w.weights.iter().map(|x| format!("{x:.1}")).collect();
                    line += &format!(
                        "  {:>4.0} {:>4.0} {:>4.0} {:>4.0} {:>5}  {}",
                        w.scores[0],
                        w.scores[1],
                        w.scores[2],
                        w.scores[3],
                        mark(w.all_aligned),
                        weights.join(",")
                    );
                }
                let _ = writeln!(s, "{line}");
            }
            let _ = write!(s, "aligned with equal weights: {}/16", t.aligned_equal);
            if let Some(n) = t.aligned_swept {
                let _ = write!(s, ", after sweep: {n}/16");
            }
            let _ = writeln!(s);
        }
        s
    }
}

/// In-memory artifacts of a pipeline run, for callers that persist them.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub base: BaseModel,
    pub questionnaire: Questionnaire,
    pub datasets: Vec<TraitDataset>,
    pub adapters: BTreeMap<(AdapterKind, Trait), AdapterCheckpoint>,
    pub summary: Summary,
}

/// Trains the base model and all trait adapters, then builds the tables.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let seeds = cfg.seeds;
    let pretrain_data = gen_pretrain_dataset(seeds.data, cfg.pretrain_samples)?;
    info!("pretraining on {} samples", pretrain_data.len());
    let (base, pre) = pretrain_base(&cfg.model, seeds.model, &pretrain_data, &cfg.pretrain_config())?;
    info!("base {} accuracy {:.3}", base.fingerprint(), pre.final_accuracy);
    let questionnaire = gen_questionnaire(seeds.data);
    let datasets: Vec<TraitDataset> = Trait::ALL
        .iter()
        .map(|&t| gen_trait_dataset_with(t, seeds.data, &cfg.task_options()))
        .collect();

    let mut adapters = BTreeMap::new();
    let mut adapter_accuracy = BTreeMap::new();
    for &kind in &cfg.kinds {
        for ds in &datasets {
            let (a, rep) = train_adapter(&base, kind, ds, &cfg.adapter_config(ds.trait_id))?;
            info!("{kind} {} accuracy {:.3}", ds.trait_id, rep.final_accuracy);
            adapter_accuracy.insert(format!("{kind}/{}", ds.trait_id), rep.final_accuracy);
            adapters.insert((kind, ds.trait_id), a);
        }
    }

    let baseline = evaluate_baseline(&base, &questionnaire, None)?;
    let mut table1 = Vec::new();
    for t in Trait::ALL {
        let score = |kind| -> Result<Option<f64>> {
            adapters
                .get(&(kind, t))
                .map(|a| evaluate(&base, Some(a), &questionnaire, None).map(|r| r.score_for(t)))
                .transpose()
        };
        table1.push(Table1Row {
            trait_id: t,
            name: t.name().to_owned(),
            baseline: baseline.score_for(t),
            lora: score(AdapterKind::Lora)?,
            ia3: score(AdapterKind::Ia3)?,
        });
    }

    let mut table2 = Vec::new();
    for &kind in &cfg.kinds {
        table2.push(composition_table(&base, &questionnaire, &adapters, kind, cfg)?);
    }

    let summary = Summary {
        config: cfg.clone(),
        base_fingerprint: base.fingerprint().to_owned(),
        pretrain_accuracy: pre.final_accuracy,
        adapter_accuracy,
        table1,
        table2,
    };
    Ok(PipelineRun {
        base,
        questionnaire,
        datasets,
        adapters,
        summary,
    })
}

/// Table 2 for one adapter kind, given trained adapters for all eight traits.
pub fn composition_table(
    base: &BaseModel,
    q: &Questionnaire,
    adapters: &BTreeMap<(AdapterKind, Trait), AdapterCheckpoint>,
    kind: AdapterKind,
    cfg: &PipelineConfig,
) -> Result<Table2> {
    let equal = WeightVector::equal(4);
    let mut rows = Vec::new();
    for p in Personality::all() {
        let code = p.to_string();
        let set: Vec<AdapterCheckpoint> = p.traits().iter().map(|t| adapters[&(kind, *t)].clone()).collect();
        let composed = weighted_compose(&set, &equal, cfg.mode)?;
        let report = evaluate(base, Some(&composed), q, Some(&code))?;
        let swept = if cfg.sweep {
            let r = sweep(&set, &code, base, q, cfg.mode, cfg.granularity)?;
            Some(Composite::from_report(&r.best_weights, &r.best_report))
        } else {
            None
        };
        rows.push(Table2Row {
            personality: code,
            equal: Composite::from_report(&equal, &report),
            swept,
        });
    }
    let aligned_equal = rows.iter().filter(|r| r.equal.all_aligned).count();
    let aligned_swept = cfg
        .sweep
        .then(|| rows.iter().filter(|r| r.swept.as_ref().is_some_and(|s| s.all_aligned)).count());
    Ok(Table2 {
        kind,
        mode: cfg.mode,
        rows,
        aligned_equal,
        aligned_swept,
    })
}
