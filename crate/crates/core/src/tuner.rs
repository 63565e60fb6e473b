//! Greedy search over shared-prefix length, temperature and scaling factor.
//!
//! Stage order is prefix → `T` → `S·T`. The scaling factor is searched
//! through the product `S·T` and recovered as `S = (S·T) / T`; products that
//! would need `S > 1` are recorded in the trace as skipped.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{ApeConfig, AttentionMode, ScalingMode};
use crate::error::{ApeError, Result};
use crate::kv_store::{KvSegment, Role};
use crate::model::Model;

/// One validation record: `{"contexts": [...], "query": "...", "gold": "..."}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationExample {
    pub contexts: Vec<String>,
    pub query: String,
    pub gold: String,
}

/// Reads line-delimited JSON validation records; blank lines are skipped.
pub fn parse_validation(text: &str) -> Result<Vec<ValidationExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| ApeError::Format(format!("validation line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn load_validation(path: &Path) -> Result<Vec<ValidationExample>> {
    parse_validation(&fs::read_to_string(path)?)
}

/// A validation example with its prefix and contexts already encoded in
/// parallel layout.
pub struct PreparedExample<'a> {
    pub example: &'a ValidationExample,
    pub prefix_tokens: &'a [u8],
    pub prefix: KvSegment,
    pub contexts: Vec<KvSegment>,
}

impl<'a> PreparedExample<'a> {
    pub fn new(model: &Model, example: &'a ValidationExample, prefix_tokens: &'a [u8]) -> Result<Self> {
        if example.contexts.is_empty() {
            return Err(ApeError::invalid("validation example without contexts"));
        }
        let prefix = model.encode_segment(prefix_tokens, Role::Prefix, None, 0)?;
        let contexts = example
            .contexts
            .iter()
            .map(|c| model.encode_segment(c.as_bytes(), Role::Context, Some(&prefix), prefix.seq_len))
            .collect::<Result<_>>()?;
        Ok(PreparedExample {
            example,
            prefix_tokens,
            prefix,
            contexts,
        })
    }

    /// Logit rows for `query ‖ gold` fed in one block.
    pub fn logits(&self, model: &Model, mode: AttentionMode, cfg: &ApeConfig) -> Result<Vec<Vec<f32>>> {
        let mut session = model.session(Some(&self.prefix), &self.contexts, mode, cfg)?;
        session.feed(&self.teacher_tokens()?)
    }

    fn teacher_tokens(&self) -> Result<Vec<u8>> {
        let ex = self.example;
        if ex.query.is_empty() || ex.gold.is_empty() {
            return Err(ApeError::invalid("validation query and gold must be nonempty"));
        }
        Ok([ex.query.as_bytes(), ex.gold.as_bytes()].concat())
    }
}

/// Scores one example under a candidate config; larger is better.
pub trait TuneMetric {
    fn score(&self, model: &Model, prepared: &PreparedExample<'_>, cfg: &ApeConfig) -> Result<f64>;
}

impl<F> TuneMetric for F
where
    F: Fn(&Model, &PreparedExample<'_>, &ApeConfig) -> Result<f64>,
{
    fn score(&self, model: &Model, prepared: &PreparedExample<'_>, cfg: &ApeConfig) -> Result<f64> {
        self(model, prepared, cfg)
    }
}

fn log_softmax_at(logits: &[f32], index: usize) -> Result<f64> {
    let xs: Vec<f64> = logits.iter().map(|v| f64::from(*v)).collect();
    Ok(xs[index] - crate::tensor::logsumexp_f64(&xs)?)
}

/// Negative mean per-token NLL of the gold continuation under APE decoding.
#[derive(Debug, Clone, Copy, Default)]
pub struct GoldLogLikelihood;

impl TuneMetric for GoldLogLikelihood {
    fn score(&self, model: &Model, prepared: &PreparedExample<'_>, cfg: &ApeConfig) -> Result<f64> {
        let logits = prepared.logits(model, AttentionMode::Ape, cfg)?;
        let q = prepared.example.query.len();
        let gold = prepared.example.gold.as_bytes();
        let mut total = 0.0;
        for (i, t) in gold.iter().enumerate() {
            total += log_softmax_at(&logits[q - 1 + i], usize::from(*t))?;
        }
        Ok(total / gold.len() as f64)
    }
}

/// Negative mean L2 distance between APE logits and the logits of full
/// sequential encoding with the same prefix.
#[derive(Debug, Clone, Copy, Default)]
pub struct SequentialAgreement;

impl TuneMetric for SequentialAgreement {
    fn score(&self, model: &Model, prepared: &PreparedExample<'_>, cfg: &ApeConfig) -> Result<f64> {
        let ape = prepared.logits(model, AttentionMode::Ape, cfg)?;
        let sequential = encode_sequential(model, &prepared.prefix, &prepared.example.contexts)?;
        let mut session = model.session(
            Some(&prepared.prefix),
            &sequential,
            AttentionMode::Sequential,
            cfg,
        )?;
        let reference = session.feed(&prepared.teacher_tokens()?)?;
        let mut dist = 0.0;
        for (a, b) in ape.iter().zip(&reference) {
            dist += l2_distance(a, b);
        }
        Ok(-dist / ape.len() as f64)
    }
}

pub(crate) fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Encodes contexts end to end after `prefix`, each attending to everything before it.
pub fn encode_sequential<S: AsRef<[u8]>>(
    model: &Model,
    prefix: &KvSegment,
    contexts: &[S],
) -> Result<Vec<KvSegment>> {
    let mut history = prefix.clone();
    let mut out = Vec::with_capacity(contexts.len());
    for c in contexts {
        let seg = model.encode_segment(c.as_ref(), Role::Context, Some(&history), history.seq_len)?;
        history.append(&seg)?;
        out.push(seg);
    }
    Ok(out)
}

/// `{0.1, 0.2, …, 1.0}`.
pub fn tenth_grid() -> Vec<f64> {
    (1..=10).map(|k| f64::from(k) / 10.0).collect()
}

const PREFIX_FILLER: &str =
    "Answer the question using the documents provided below. Be concise.\n";

/// Prefix candidates: two newlines, then that prefix lengthened by 10, 20
/// and 40 bytes taken from `filler`.
pub fn default_prefix_schedule(filler: &str) -> Vec<Vec<u8>> {
    let filler: Vec<u8> = if filler.is_empty() {
        PREFIX_FILLER.as_bytes().to_vec()
    } else {
        filler.as_bytes().to_vec()
    };
    [0usize, 10, 20, 40]
        .iter()
        .map(|extra| {
            let mut p = b"\n\n".to_vec();
            p.extend(filler.iter().cycle().take(*extra));
            p
        })
        .collect()
}

pub struct TuneSpec<'m> {
    pub prefix_schedule: Vec<Vec<u8>>,
    pub t_grid: Vec<f64>,
    /// Grid for the product `S·T`.
    pub st_grid: Vec<f64>,
    pub scaling_mode: ScalingMode,
    pub metric: &'m dyn TuneMetric,
    pub validation: Vec<ValidationExample>,
}

impl<'m> TuneSpec<'m> {
    pub fn new(validation: Vec<ValidationExample>, metric: &'m dyn TuneMetric) -> Self {
        TuneSpec {
            prefix_schedule: default_prefix_schedule(""),
            t_grid: tenth_grid(),
            st_grid: tenth_grid(),
            scaling_mode: ScalingMode::Aggregate,
            metric,
            validation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.validation.is_empty() {
            return Err(ApeError::invalid("validation set is empty"));
        }
        if self.prefix_schedule.is_empty() {
            return Err(ApeError::invalid("prefix schedule is empty"));
        }
        for (name, grid) in [("t_grid", &self.t_grid), ("st_grid", &self.st_grid)] {
            if grid.is_empty() || grid.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
                return Err(ApeError::invalid(format!("{name} must be nonempty within (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Prefix,
    Temperature,
    ScaleTimesTemperature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub stage: Stage,
    pub prefix_len: usize,
    pub temperature: f64,
    pub scale: f64,
    /// `None` when the candidate was outside the valid range and skipped.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub config: ApeConfig,
    pub score: f64,
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone)]
struct Candidate {
    prefix: usize,
    temperature: f64,
    scale: f64,
    score: f64,
}

/// Tie order: larger `T`, then larger `S`, then shorter prefix.
fn preferred(new: &Candidate, incumbent: &Candidate, prefix_lens: &[usize]) -> bool {
    if new.score != incumbent.score {
        return new.score > incumbent.score;
    }
    if new.temperature != incumbent.temperature {
        return new.temperature > incumbent.temperature;
    }
    if new.scale != incumbent.scale {
        return new.scale > incumbent.scale;
    }
    prefix_lens[new.prefix] < prefix_lens[incumbent.prefix]
}

/// Mean metric over the validation set for one prefix and `(T, S)`.
pub fn evaluate(
    model: &Model,
    prepared: &[PreparedExample<'_>],
    metric: &dyn TuneMetric,
    cfg: &ApeConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for p in prepared {
        total += metric.score(model, p, cfg)?;
    }
    let mean = total / prepared.len() as f64;
    if !mean.is_finite() {
        return Err(ApeError::Numeric("metric returned a non-finite score".into()));
    }
    Ok(mean)
}

fn config(spec: &TuneSpec<'_>, prefix: &[u8], temperature: f64, scale: f64) -> Result<ApeConfig> {
    Ok(ApeConfig::new(temperature, scale, spec.scaling_mode)?.with_prefix(prefix.to_vec()))
}

pub fn prepare_all<'a>(
    model: &Model,
    validation: &'a [ValidationExample],
    prefix: &'a [u8],
) -> Result<Vec<PreparedExample<'a>>> {
    validation
        .iter()
        .map(|ex| PreparedExample::new(model, ex, prefix))
        .collect()
}

/// Runs the three greedy stages and returns the best config with the full trace.
pub fn greedy_tune(model: &Model, spec: &TuneSpec<'_>) -> Result<TuneResult> {
    spec.validate()?;
    let prefix_lens: Vec<usize> = spec.prefix_schedule.iter().map(Vec::len).collect();
    let mut trace = Vec::new();
    let mut best: Option<Candidate> = None;
    let consider = |c: Candidate, best: &mut Option<Candidate>| {
        if best.as_ref().is_none_or(|b| preferred(&c, b, &prefix_lens)) {
            *best = Some(c);
        }
    };

    for (i, prefix) in spec.prefix_schedule.iter().enumerate() {
        let prepared = prepare_all(model, &spec.validation, prefix)?;
        let cfg = config(spec, prefix, 1.0, 1.0)?;
        let score = evaluate(model, &prepared, spec.metric, &cfg)?;
        trace.push(TraceEntry {
            stage: Stage::Prefix,
            prefix_len: prefix.len(),
            temperature: 1.0,
            scale: 1.0,
            score: Some(score),
        });
        consider(
            Candidate {
                prefix: i,
                temperature: 1.0,
                scale: 1.0,
                score,
            },
            &mut best,
        );
    }

    let chosen = best.clone().expect("nonempty prefix schedule").prefix;
    let prefix = &spec.prefix_schedule[chosen];
    let prepared = prepare_all(model, &spec.validation, prefix)?;

    for &t in &spec.t_grid {
        let cfg = config(spec, prefix, t, 1.0)?;
        let score = evaluate(model, &prepared, spec.metric, &cfg)?;
        trace.push(TraceEntry {
            stage: Stage::Temperature,
            prefix_len: prefix.len(),
            temperature: t,
            scale: 1.0,
            score: Some(score),
        });
        consider(
            Candidate {
                prefix: chosen,
                temperature: t,
                scale: 1.0,
                score,
            },
            &mut best,
        );
    }

    let t = best.as_ref().expect("incumbent").temperature;
    for &product in &spec.st_grid {
        let scale = product / t;
        let score = if scale > 1.0 {
            None
        } else {
            let cfg = config(spec, prefix, t, scale)?;
            Some(evaluate(model, &prepared, spec.metric, &cfg)?)
        };
        trace.push(TraceEntry {
            stage: Stage::ScaleTimesTemperature,
            prefix_len: prefix.len(),
            temperature: t,
            scale,
            score,
        });
        if let Some(score) = score {
            consider(
                Candidate {
                    prefix: chosen,
                    temperature: t,
                    scale,
                    score,
                },
                &mut best,
            );
        }
    }

    let best = best.expect("at least one candidate");
    Ok(TuneResult {
        config: config(
            spec,
            &spec.prefix_schedule[best.prefix],
            best.temperature,
            best.scale,
        )?,
        score: best.score,
        trace,
    })
}
