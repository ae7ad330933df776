//! End-to-end glue shared by the command line and the acceptance tests:
//! scoring a parameter set on a split and running the component ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::Split;
use crate::dataset::Corpus;
use crate::error::Result;
use crate::eval::{decode_sweep, evaluate, infer, scored_events, DecodeConfig, Evaluation, MatchConfig, PsdsConfig};
use crate::events::{EventTable, ScoredEvent};
use crate::model::{AstSed, EncoderKind, ModelConfig};
use crate::tensor::{ParamTree, Real};
use crate::training::{train, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub decode: DecodeConfig,
    pub matching: MatchConfig,
    pub psds: PsdsConfig,
    /// Short/long boundary in seconds; `None` means a fifth of the clip.
    pub short_long_boundary: Option<Real>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            decode: DecodeConfig::default(),
            matching: MatchConfig::default(),
            psds: PsdsConfig::default(),
            short_long_boundary: None,
        }
    }
}

impl EvalSettings {
    pub fn boundary(&self, clip_length: Real) -> Real {
        self.short_long_boundary.unwrap_or(0.2 * clip_length)
    }
}

/// Scores `params` on a strongly labeled split; also returns the decoded
/// predictions with scores.
pub fn evaluate_params(
    corpus: &Corpus,
    split: Split,
    cfg: &ModelConfig,
    params: &ParamTree,
    es: &EvalSettings,
) -> Result<(Evaluation, BTreeMap<String, Vec<ScoredEvent>>)> {
    corpus.check_model(cfg)?;
    let model = AstSed::new(cfg.clone())?;
    let clips = corpus.split(split);
    let classes = &corpus.classes;
    let preds = infer(&model, params, clips)?;
    let mut scored = BTreeMap::new();
    for (p, c) in preds.iter().zip(clips) {
        scored.insert(c.name.clone(), scored_events(p, classes, &es.decode)?);
    }
    let ests: EventTable =
        scored.iter().map(|(k, v): (&String, &Vec<ScoredEvent>)| (k.clone(), v.iter().map(|s| s.event.clone()).collect())).collect();
    let sweep = decode_sweep(&preds, clips, classes, &es.decode, &es.psds.thresholds)?;
    let ev = evaluate(
        &corpus.refs(split),
        &ests,
        &sweep,
        classes,
        corpus.seconds(split),
        &es.matching,
        &es.psds,
        es.boundary(corpus.manifest.synth.clip_length),
    )?;
    Ok((ev, scored))
}

/// One row of the component ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub system: String,
    pub encoder: EncoderKind,
    pub upsample_ratio: usize,
    /// `(EB-F1, PSDS1, median onset error)` or the failure message.
    pub result: std::result::Result<(Real, Real, Option<Real>), String>,
}

/// The ablation rows: four component combinations, then the ratio sweep.
pub fn ablation_plan(ur_list: &[usize]) -> Vec<(String, EncoderKind, usize)> {
    let lgd = if ur_list.contains(&10) { 10 } else { ur_list.iter().copied().max().unwrap_or(1) };
    let mut rows = vec![
        ("AST-GRU".to_string(), EncoderKind::MeanPool, 1),
        ("AST-GRU+FTE".to_string(), EncoderKind::Fte, 1),
        (format!("AST-GRU+LGD(UR={lgd})"), EncoderKind::MeanPool, lgd),
        (format!("AST-SED(UR={lgd})"), EncoderKind::Fte, lgd),
    ];
    for &u in ur_list {
        rows.push((format!("AST-SED(UR={u}) sweep"), EncoderKind::Fte, u));
    }
    rows
}

/// Trains and scores every planned row, training each distinct
/// configuration once. Failures are recorded per row.
pub fn run_ablation(
    corpus: &Corpus,
    base: &ModelConfig,
    opts: &TrainOptions,
    es: &EvalSettings,
    ur_list: &[usize],
    split: Split,
) -> Vec<AblationRow> {
    let mut cache: BTreeMap<(String, usize), std::result::Result<(Real, Real, Option<Real>), String>> = BTreeMap::new();
    ablation_plan(ur_list)
        .into_iter()
        .map(|(system, encoder, ur)| {
            let key = (encoder.to_string(), ur);
            let result = cache
                .entry(key)
                .or_insert_with(|| {
                    let cfg = ModelConfig { encoder, upsample_ratio: ur, ..base.clone() };
                    log::info!("ablation: training encoder={encoder} ur={ur}");
                    let run = || -> Result<(Real, Real, Option<Real>)> {
                        let out = train(corpus, &cfg, opts)?;
                        let (ev, _) = evaluate_params(corpus, split, &cfg, &out.student, es)?;
                        Ok((ev.summary.eb_f1, ev.summary.psds1, ev.summary.median_onset_error))
                    };
                    run().map_err(|e| e.to_string())
                })
                .clone();
            AblationRow { system, encoder, upsample_ratio: ur, result }
        })
        .collect()
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from("system\tencoder\tUR\tEB-F1\tPSDS1\tmedian_onset_error\tstatus\n");
    for r in rows {
        match &r.result {
            Ok((f1, psds, err)) => writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{}\tok",
                r.system,
                r.encoder,
                r.upsample_ratio,
                f1,
                psds,
                err.map_or("N/A".into(), |e| format!("{e:.6}"))
            ),
            Err(msg) => writeln!(out, "{}\t{}\t{}\tN/A\tN/A\tN/A\tfailed: {}", r.system, r.encoder, r.upsample_ratio, msg.replace(['\t', '\n'], " ")),
        }
        .unwrap();
    }
    out
}
