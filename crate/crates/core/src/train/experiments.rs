use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, TrainOutcome};
use crate::attention::AttentionRecord;
use crate::captioning::search::{generate_beam, generate_greedy};
use crate::data::{tokenize, Example};
use crate::error::{Error, Result};
use crate::fusion::Ablation;
use crate::metrics::{MetricReport, COLUMNS};
use crate::model::{EncodedContext, ReportModel};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Beam { width: usize, alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateEntry {
    pub anatomy: String,
    pub mass: f64,
}

/// Per-anatomy pooling mass for one query view, sorted descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMasses {
    pub view: String,
    pub masses: Vec<GateEntry>,
}

impl ViewMasses {
    fn from_record(view: &str, record: &AttentionRecord) -> Result<Self> {
        let mut masses = record
            .key_labels
            .iter()
            .map(|l| {
                Ok(GateEntry {
                    anatomy: l.clone(),
                    mass: record.mass(l)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        masses.sort_by(|a, b| b.mass.total_cmp(&a.mass).then_with(|| a.anatomy.cmp(&b.anatomy)));
        Ok(Self {
            view: view.to_string(),
            masses,
        })
    }

    pub fn mass(&self, anatomy: &str) -> Option<f64> {
        self.masses.iter().find(|e| e.anatomy == anatomy).map(|e| e.mass)
    }
}

fn view_masses<T>(ctx: &EncodedContext<T>) -> Result<Vec<ViewMasses>> {
    let mut views = Vec::new();
    for (name, rec) in [("frontal", &ctx.frontal), ("lateral", &ctx.lateral), ("learned", &ctx.query)] {
        if let Some(r) = rec {
            views.push(ViewMasses::from_record(name, r)?);
        }
    }
    Ok(views)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub id: String,
    pub text: String,
    pub token_ids: Vec<u32>,
    pub truncated: bool,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gate: Vec<ViewMasses>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub metrics: MetricReport,
    pub generated: Vec<GeneratedRecord>,
}

/// Decodes every example and scores the outputs against the references.
pub fn evaluate(
    model: &ReportModel,
    params: &ParamStore<f32>,
    examples: &[&Example],
    decoding: Decoding,
    config_hash: Option<String>,
) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut candidates = Vec::with_capacity(examples.len());
    let mut references = Vec::with_capacity(examples.len());
    let mut generated = Vec::with_capacity(examples.len());
    for e in examples {
        let ctx = model.context(params, &e.bundle)?;
        let stepper = model.generator(params, &ctx.tokens);
        let out = match decoding {
            Decoding::Greedy => generate_greedy(&stepper, model.max_new_tokens())?,
            Decoding::Beam { width, alpha } => generate_beam(&stepper, width, model.max_new_tokens(), alpha)?,
        };
        let words = model.vocab.decode_words(out.tokens.ids());
        generated.push(GeneratedRecord {
            id: e.id.clone(),
            text: words.join(" "),
            token_ids: out.tokens.0.clone(),
            truncated: out.truncated,
            reference: e.report.clone(),
            gate: view_masses(&ctx)?,
        });
        candidates.push(words);
        references.push(tokenize(&e.report));
    }
    Ok(Evaluation {
        config_hash,
        metrics: MetricReport::compute(&candidates, &references)?,
        generated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub config_hash: String,
    pub example_id: String,
    pub ablation: Ablation,
    pub views: Vec<ViewMasses>,
    pub generated: String,
    pub reference: String,
}

/// Pooling masses of one example plus its greedy report.
pub fn inspect_gate(
    model: &ReportModel,
    params: &ParamStore<f32>,
    example: &Example,
    config_hash: &str,
) -> Result<GateReport> {
    let ctx = model.context(params, &example.bundle)?;
    let views = view_masses(&ctx)?;
    if views.is_empty() {
        return Err(Error::Config(format!(
            "the `{}` variant has no attention gate to inspect",
            model.config.ablation.name()
        )));
    }
    let out = generate_greedy(&model.generator(params, &ctx.tokens), model.max_new_tokens())?;
    Ok(GateReport {
        config_hash: config_hash.to_string(),
        example_id: example.id.clone(),
        ablation: model.config.ablation,
        views,
        generated: model.vocab.decode(out.tokens.ids()),
        reference: example.report.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub ablation: Ablation,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, ablation: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == ablation)
    }

    /// Fixed-width text table with one row per variant.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12}", "variant");
        for c in COLUMNS {
            let _ = write!(s, " {c:>12}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<12}", r.variant);
            for v in r.metrics.values() {
                let _ = write!(s, " {v:>12.4}");
            }
            s.push('\n');
        }
        s
    }
}

pub struct AblationRun {
    pub ablation: Ablation,
    pub outcome: TrainOutcome,
    pub evaluation: Evaluation,
}

/// Trains each variant on the same data and seed and scores it on the
/// test split.
pub fn run_ablations(
    config: &TrainConfig,
    examples: &[Example],
    variants: &[Ablation],
) -> Result<(AblationTable, Vec<AblationRun>)> {
    let mut rows = Vec::with_capacity(variants.len());
    let mut runs = Vec::with_capacity(variants.len());
    for &ablation in variants {
        let mut cfg = config.clone();
        cfg.model.ablation = ablation;
        let outcome = train(&cfg, examples)?;
        let test: Vec<&Example> = outcome.split.test.iter().map(|&i| &examples[i]).collect();
        let evaluation = evaluate(&outcome.model, &outcome.params, &test, Decoding::Greedy, Some(cfg.hash()))?;
        rows.push(AblationRow {
            variant: ablation.row_label().to_string(),
            ablation,
            metrics: evaluation.metrics,
        });
        runs.push(AblationRun {
            ablation,
            outcome,
            evaluation,
        });
    }
    Ok((
        AblationTable {
            config_hash: config.hash(),
            rows,
        },
        runs,
    ))
}
