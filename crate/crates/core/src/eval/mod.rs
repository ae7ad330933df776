//! Post-processing and metrics: frame posteriors to events, event-based F1,
//! PSDS and the per-band analysis.

mod bands;
mod decode;
mod ebf1;
mod psds;
mod report;

use std::collections::BTreeMap;

pub use bands::{band_activation_analysis, normalize_rows, BandHistogram};
pub use decode::{decode_events, median_filter, runs, DecodeConfig};
pub use ebf1::{eb_f1, max_matching, median, Counts, F1Report, MatchConfig};
pub use psds::{operating_point, psds, psds_from_points, threshold_sweep, OperatingPoint, PsdsConfig, PsdsResult};
pub use report::{class_mean_durations, fmt_opt, short_long_report, EvalSummary, ShortLongReport};

use crate::dataset::Clip;
use crate::error::Result;
use crate::events::{EventTable, ScoredEvent};
use crate::model::{AstSed, Predictions};
use crate::parallel;
use crate::tensor::{ParamTree, Real};

/// Student or teacher posteriors for a list of clips, in clip order.
pub fn infer(model: &AstSed, params: &ParamTree, clips: &[Clip]) -> Result<Vec<Predictions>> {
    parallel::try_map_indexed(clips.len(), |i| {
        model.predict_with(params, &clips[i].spec, crate::model::FrameSource::Configured)
    })
}

/// Decoded events with a score: the mean class posterior over the event span.
pub fn scored_events(p: &Predictions, classes: &[String], dc: &DecodeConfig) -> Result<Vec<ScoredEvent>> {
    let events = decode_events(&p.frame_probs, classes, p.seconds_per_step, dc)?;
    let k = classes.len();
    let l = p.frame_probs.shape()[0];
    Ok(events
        .into_iter()
        .map(|event| {
            let c = classes.iter().position(|n| *n == event.label).expect("decoded from vocabulary");
            let s = ((event.onset / p.seconds_per_step).round() as usize).min(l - 1);
            let e = ((event.offset / p.seconds_per_step).round() as usize).clamp(s + 1, l);
            let score = (s..e).map(|t| p.frame_probs.data()[t * k + c]).sum::<Real>() / (e - s) as Real;
            ScoredEvent { event, score }
        })
        .collect())
}

/// Decodes every clip at one configuration.
pub fn decode_all(preds: &[Predictions], clips: &[Clip], classes: &[String], dc: &DecodeConfig) -> Result<EventTable> {
    preds
        .iter()
        .zip(clips)
        .map(|(p, c)| Ok((c.name.clone(), decode_events(&p.frame_probs, classes, p.seconds_per_step, dc)?)))
        .collect()
}

/// One decoded table per PSDS threshold.
pub fn decode_sweep(
    preds: &[Predictions],
    clips: &[Clip],
    classes: &[String],
    dc: &DecodeConfig,
    thresholds: &[Real],
) -> Result<Vec<EventTable>> {
    parallel::try_map_indexed(thresholds.len(), |i| {
        decode_all(preds, clips, classes, &DecodeConfig { threshold: thresholds[i], ..dc.clone() })
    })
}

/// Operating points from a scored prediction file: events scoring above each threshold.
pub fn sweep_from_scores(scored: &BTreeMap<String, Vec<ScoredEvent>>, thresholds: &[Real]) -> Vec<EventTable> {
    thresholds
        .iter()
        .map(|&th| {
            scored
                .iter()
                .map(|(f, ev)| (f.clone(), ev.iter().filter(|s| s.score >= th).map(|s| s.event.clone()).collect()))
                .collect()
        })
        .collect()
}

/// Everything `eval` reports for one estimate set.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub f1: F1Report,
    pub psds: PsdsResult,
    pub short_long: ShortLongReport,
    pub summary: EvalSummary,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    refs: &EventTable,
    ests: &EventTable,
    sweep: &[EventTable],
    classes: &[String],
    total_seconds: Real,
    mc: &MatchConfig,
    pc: &PsdsConfig,
    boundary: Real,
) -> Result<Evaluation> {
    let f1 = eb_f1(refs, ests, classes, mc);
    let psds = psds(sweep, refs, classes, total_seconds, pc)?;
    let short_long = short_long_report(refs, ests, classes, mc, boundary);
    let summary = EvalSummary::new(&f1, psds.score, &short_long);
    Ok(Evaluation { f1, psds, short_long, summary })
}
