//! Grounding metrics and the three evaluation protocols.

mod metrics;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{canonical_json, Tags};
use crate::error::{Error, Result};
use crate::model::{argmax, Model, ModelOutput};
use crate::nn::Rng;
use crate::prepared::PreparedSample;

pub use metrics::{acc_pag_sentence, acc_pg, ground_phrase, PhrasePrediction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Full,
    Weak,
    RandSelect,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Full => "full",
            EvalMode::Weak => "weak",
            EvalMode::RandSelect => "randselect",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(EvalMode::Full),
            "weak" => Ok(EvalMode::Weak),
            "randselect" => Ok(EvalMode::RandSelect),
            other => Err(Error::Config(format!("unknown evaluation mode {other:?} (full, weak, randselect)"))),
        }
    }
}

/// Anything that maps a prepared sample and an optional phrase mask to
/// model outputs.
pub trait Predictor {
    fn predict(&self, sample: &PreparedSample, mask: Option<&[u8]>) -> Result<ModelOutput>;
}

impl Predictor for Model<f32> {
    fn predict(&self, sample: &PreparedSample, mask: Option<&[u8]>) -> Result<ModelOutput> {
        match mask {
            None => self.forward(&sample.input),
            Some(m) => self.forward(&sample.input.with_mask(m)?),
        }
    }
}

/// Per-sentence outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceResult {
    pub sample_id: String,
    pub tags: Tags,
    pub target_pred: usize,
    pub target_gt: usize,
    /// One entry per phrase, in annotation order.
    pub phrases: Vec<PhrasePrediction>,
    /// Which entry of `phrases` is the target phrase.
    pub target_phrase: usize,
}

impl SentenceResult {
    pub fn target_correct(&self) -> bool {
        self.target_pred == self.target_gt
    }

    pub fn nontarget(&self) -> Vec<PhrasePrediction> {
        self.phrases.iter().enumerate().filter(|(i, _)| *i != self.target_phrase).map(|(_, p)| *p).collect()
    }

    pub fn acc_pag(&self) -> f64 {
        acc_pag_sentence(self.target_correct(), &self.nontarget())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub count: usize,
    pub acc_vg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Buckets {
    pub easy: Bucket,
    pub hard: Bucket,
    pub view_dep: Bucket,
    pub view_indep: Bucket,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub acc_vg: f64,
    pub acc_pag: f64,
    pub acc_pg: f64,
    pub num_sentences: usize,
    pub num_phrases: usize,
    pub buckets: Buckets,
    /// Phrase accuracy counts target phrases too.
    pub pg_includes_target: bool,
}

/// Streaming reduction of sentence results.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    sentences: usize,
    vg_correct: usize,
    pag_sum: f64,
    phrases: usize,
    phrases_correct: usize,
    // [easy, hard, view_dep, view_indep] as (count, correct)
    buckets: [(usize, usize); 4],
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, r: &SentenceResult) {
        let ok = r.target_correct();
        self.sentences += 1;
        self.vg_correct += ok as usize;
        self.pag_sum += r.acc_pag();
        self.phrases += r.phrases.len();
        self.phrases_correct += r.phrases.iter().filter(|p| p.correct).count();
        let slots = [if r.tags.hard { 1 } else { 0 }, if r.tags.view_dep { 2 } else { 3 }];
        for s in slots {
            self.buckets[s].0 += 1;
            self.buckets[s].1 += ok as usize;
        }
    }

    pub fn len(&self) -> usize {
        self.sentences
    }

    pub fn is_empty(&self) -> bool {
        self.sentences == 0
    }

    pub fn finish(&self, mode: EvalMode) -> Result<EvalReport> {
        if self.sentences == 0 {
            return Err(Error::Validation("evaluation over zero sentences".into()));
        }
        let n = self.sentences as f64;
        let bucket = |(count, correct): (usize, usize)| Bucket {
            count,
            acc_vg: if count == 0 { 0.0 } else { correct as f64 / count as f64 },
        };
        Ok(EvalReport {
            mode,
            acc_vg: self.vg_correct as f64 / n,
            acc_pag: self.pag_sum / n,
            acc_pg: if self.phrases == 0 { 0.0 } else { self.phrases_correct as f64 / self.phrases as f64 },
            num_sentences: self.sentences,
            num_phrases: self.phrases,
            buckets: Buckets {
                easy: bucket(self.buckets[0]),
                hard: bucket(self.buckets[1]),
                view_dep: bucket(self.buckets[2]),
                view_indep: bucket(self.buckets[3]),
            },
            pg_includes_target: true,
        })
    }
}

fn target_phrase_index(s: &PreparedSample) -> Result<usize> {
    s.phrases
        .iter()
        .position(|p| p.is_target)
        .ok_or_else(|| Error::Validation(format!("{}: no target phrase", s.sample_id)))
}

/// Runs one protocol over one sample.
pub fn evaluate_sample<P: Predictor + ?Sized>(
    predictor: &P,
    sample: &PreparedSample,
    mode: EvalMode,
    rng: &mut Rng,
) -> Result<SentenceResult> {
    let target_phrase = target_phrase_index(sample)?;
    let m = sample.num_objects();
    let (target_pred, phrases) = match mode {
        EvalMode::Full => {
            let out = predictor.predict(sample, None)?;
            let phrases = sample
                .phrases
                .iter()
                .enumerate()
                .map(|(i, p)| Ok(PhrasePrediction::new(i, ground_phrase(&out.poa, p.start, p.end)?, p.object_id)))
                .collect::<Result<Vec<_>>>()?;
            (out.predicted_target(), phrases)
        }
        EvalMode::Weak => {
            let out = predictor.predict(sample, None)?;
            let target_pred = out.predicted_target();
            let mut phrases = Vec::with_capacity(sample.phrases.len());
            for (i, p) in sample.phrases.iter().enumerate() {
                let pred = if i == target_phrase {
                    target_pred
                } else {
                    argmax(&predictor.predict(sample, Some(&sample.masks[i]))?.scores)
                };
                phrases.push(PhrasePrediction::new(i, pred, p.object_id));
            }
            (target_pred, phrases)
        }
        EvalMode::RandSelect => {
            let phrases: Vec<PhrasePrediction> =
                sample.phrases.iter().enumerate().map(|(i, p)| PhrasePrediction::new(i, rng.below(m), p.object_id)).collect();
            (phrases[target_phrase].predicted, phrases)
        }
    };
    Ok(SentenceResult {
        sample_id: sample.sample_id.clone(),
        tags: sample.tags,
        target_pred,
        target_gt: sample.target_id,
        phrases,
        target_phrase,
    })
}

/// Evaluates every sample and returns the report with the per-sentence log.
pub fn evaluate_detailed<P: Predictor + ?Sized>(
    predictor: &P,
    samples: &[PreparedSample],
    mode: EvalMode,
    seed: u64,
) -> Result<(EvalReport, Vec<SentenceResult>)> {
    let mut rng = Rng::derive(seed, 0xe7a1);
    let mut acc = MetricAccumulator::new();
    let mut log = Vec::with_capacity(samples.len());
    for s in samples {
        let r = evaluate_sample(predictor, s, mode, &mut rng)?;
        acc.add(&r);
        log.push(r);
    }
    Ok((acc.finish(mode)?, log))
}

pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    samples: &[PreparedSample],
    mode: EvalMode,
    seed: u64,
) -> Result<EvalReport> {
    Ok(evaluate_detailed(predictor, samples, mode, seed)?.0)
}

/// Grounding accuracy when each phrase is highlighted through the mask
/// channel and read off the scores. Used to validate pre-training.
pub fn masked_phrase_accuracy<P: Predictor + ?Sized>(predictor: &P, samples: &[PreparedSample]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples {
        for (p, mask) in s.phrases.iter().zip(&s.masks) {
            let out = predictor.predict(s, Some(mask))?;
            hit += (argmax(&out.scores) == p.object_id) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Validation("no phrases to evaluate".into()));
    }
    Ok(hit as f64 / total as f64)
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        canonical_json(self)
    }

    /// Aligned plain-text table with the usual column names.
    pub fn to_table(&self) -> String {
        let pct = |x: f64| format!("{:.1}", 100.0 * x);
        let b = &self.buckets;
        let cells = [
            ("Mode", self.mode.name().to_string()),
            ("OA", pct(self.acc_vg)),
            ("Easy", pct(b.easy.acc_vg)),
            ("Hard", pct(b.hard.acc_vg)),
            ("View-dep.", pct(b.view_dep.acc_vg)),
            ("View-indep.", pct(b.view_indep.acc_vg)),
            ("PAG", pct(self.acc_pag)),
            ("PG", pct(self.acc_pg)),
        ];
        let widths: Vec<usize> = cells.iter().map(|(h, v)| h.len().max(v.len())).collect();
        let row = |f: &dyn Fn(&(&str, String)) -> String| {
            cells.iter().zip(&widths).map(|(c, &w)| format!("{:>w$}", f(c))).collect::<Vec<_>>().join("  ")
        };
        format!(
            "# {} sentences, {} phrases; PG counts target phrases\n{}\n{}",
            self.num_sentences,
            self.num_phrases,
            row(&|c| c.0.to_string()),
            row(&|c| c.1.clone())
        )
    }
}
