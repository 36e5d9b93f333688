//! Questionnaire scoring and alignment checks.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterCheckpoint, AdapterParams, Head};
use crate::error::{Error, Result};
use crate::mbti::{Dichotomy, Personality, Trait};
use crate::model::{check_adapter, forward_parts, BaseModel, BaseWeights};
use crate::tasks::{Questionnaire, Statement};

pub use crate::mbti::personality_traits;

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// The Likert class the model picks for one statement.
pub fn answer(base: &BaseModel, adapter: Option<&AdapterCheckpoint>, s: &Statement) -> Result<usize> {
    let logits = crate::model::forward(base, adapter, &s.tokens)?;
    Ok(argmax(logits.view()))
}

/// Mean signed evidence toward the first trait, in `[-1, 1]`.
pub fn evidence_mean(answers: &[usize], statements: &[&Statement]) -> Result<f64> {
    if answers.is_empty() || answers.len() != statements.len() {
        return Err(Error::Invalid(format!(
            "need one answer per statement and at least one of each (got {} answers, {} statements)",
            answers.len(),
            statements.len()
        )));
    }
    let d = statements[0].dichotomy;
    let mut total = 0.0;
    for (&c, s) in answers.iter().zip(statements) {
        if s.dichotomy != d {
            return Err(Error::Invalid(format!(
                "mixed dichotomies in one score: {d} and {}",
                s.dichotomy
            )));
        }
        let p = s.polarity();
        if p == 0 {
            return Err(Error::Invalid("statement with zero polarity cannot be scored".into()));
        }
        if c > 6 {
            return Err(Error::Invalid(format!("answer class {c} out of range 0..=6")));
        }
        total += (c as f64 - 3.0) / 3.0 * f64::from(p.signum());
    }
    Ok(total / answers.len() as f64)
}

/// Percentage score toward the dichotomy's first trait.
pub fn score_dichotomy(answers: &[usize], statements: &[&Statement]) -> Result<f64> {
    Ok(50.0 * (1.0 + evidence_mean(answers, statements)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    First,
    Second,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DichotomyScore {
    pub dichotomy: Dichotomy,
    pub score_first: f64,
    pub evidence_mean: f64,
    pub predicted: Prediction,
}

impl DichotomyScore {
    pub fn score_second(&self) -> f64 {
        100.0 - self.score_first
    }

    /// Score toward `t`, which must belong to this dichotomy.
    pub fn score_for(&self, t: Trait) -> f64 {
        debug_assert_eq!(t.dichotomy(), self.dichotomy);
        if t.is_first() {
            self.score_first
        } else {
            self.score_second()
        }
    }

    pub fn predicted_letter(&self) -> char {
        match self.predicted {
            Prediction::First => self.dichotomy.first().letter(),
            Prediction::Second => self.dichotomy.second().letter(),
            Prediction::Ambiguous => '?',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitAlignment {
    #[serde(rename = "trait")]
    pub trait_id: Trait,
    pub score: f64,
    pub aligned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dichotomies: Vec<DichotomyScore>,
    /// Four letters, with `?` where a score sits exactly on 50.
    pub predicted: String,
    pub target: Option<String>,
    pub alignment: Option<Vec<TraitAlignment>>,
    pub aligned: Option<bool>,
    pub base_fingerprint: String,
    pub adapter_label: Option<String>,
}

impl EvalReport {
    pub fn dichotomy(&self, d: Dichotomy) -> &DichotomyScore {
        &self.dichotomies[d.index()]
    }

    pub fn score_for(&self, t: Trait) -> f64 {
        self.dichotomy(t.dichotomy()).score_for(t)
    }

    /// Mean score over the target's four traits; `None` without a target.
    pub fn target_objective(&self) -> Option<f64> {
        let a = self.alignment.as_ref()?;
        Some(a.iter().map(|t| t.score).sum::<f64>() / a.len() as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn predict(score_first: f64) -> Prediction {
    if score_first > 50.0 {
        Prediction::First
    } else if score_first < 50.0 {
        Prediction::Second
    } else {
        Prediction::Ambiguous
    }
}

/// Scores a questionnaire given a per-statement answer function.
pub fn report_from_answers(
    q: &Questionnaire,
    mut answer_fn: impl FnMut(&Statement) -> Result<usize>,
    target: Option<&str>,
) -> Result<EvalReport> {
    let target = target.map(str::parse::<Personality>).transpose()?;
    let mut dichotomies = Vec::with_capacity(4);
    for d in Dichotomy::ALL {
        let items = q.for_dichotomy(d);
        let answers = items.iter().map(|s| answer_fn(s)).collect::<Result<Vec<_>>>()?;
        let ev = evidence_mean(&answers, &items)?;
        let score_first = 50.0 * (1.0 + ev);
        dichotomies.push(DichotomyScore {
            dichotomy: d,
            score_first,
            evidence_mean: ev,
            predicted: predict(score_first),
        });
    }
    let predicted = dichotomies.iter().map(DichotomyScore::predicted_letter).collect();
    let alignment = target.map(|p| {
        p.traits()
            .iter()
            .map(|&t| {
                let score = dichotomies[t.dichotomy().index()].score_for(t);
                TraitAlignment {
                    trait_id: t,
                    score,
                    aligned: score > 50.0,
                }
            })
            .collect::<Vec<_>>()
    });
    let aligned = alignment.as_ref().map(|a| a.iter().all(|t| t.aligned));
    Ok(EvalReport {
        dichotomies,
        predicted,
        target: target.map(|p| p.to_string()),
        alignment,
        aligned,
        base_fingerprint: String::new(),
        adapter_label: None,
    })
}

/// Runs the model (base plus optional adapter) through the questionnaire.
pub fn evaluate(
    base: &BaseModel,
    adapter: Option<&AdapterCheckpoint>,
    q: &Questionnaire,
    target: Option<&str>,
) -> Result<EvalReport> {
    if let Some(a) = adapter {
        check_adapter(base, a)?;
    }
    let (params, head) = match adapter {
        Some(a) => (Some(&a.params), &a.head),
        None => (None, base.head()),
    };
    let mut report = evaluate_parts(base.weights(), params, head, q, target)?;
    report.base_fingerprint = base.fingerprint().to_owned();
    report.adapter_label = adapter.map(|a| a.trait_label.clone());
    Ok(report)
}

/// Like [`evaluate`] but over loose parts, with no fingerprint check.
pub fn evaluate_parts(
    weights: &BaseWeights,
    adapter: Option<&AdapterParams>,
    head: &Head,
    q: &Questionnaire,
    target: Option<&str>,
) -> Result<EvalReport> {
    let mut report = report_from_answers(
        q,
        |s| Ok(argmax(forward_parts(weights, adapter, head, &s.tokens)?.view())),
        target,
    )?;
    report.base_fingerprint = weights.fingerprint();
    Ok(report)
}

/// The no-adapter baseline: the frozen backbone with a freshly inserted,
/// zero-initialised head that has seen no trait data.
///
/// A zero head ties every class, so every answer is class 0.
pub fn evaluate_baseline(base: &BaseModel, q: &Questionnaire, target: Option<&str>) -> Result<EvalReport> {
    let cfg = base.config();
    let head = Head::zeros(cfg.n_classes, cfg.d_model);
    evaluate_parts(base.weights(), None, &head, q, target)
}
