use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::ebf1::{eb_f1, F1Report, MatchConfig};
use crate::events::EventTable;
use crate::tensor::Real;

/// EB-F1 over reference events split by their class's mean duration.
#[derive(Clone, Debug, PartialEq)]
pub struct ShortLongReport {
    pub boundary: Real,
    pub short_classes: Vec<String>,
    pub long_classes: Vec<String>,
    /// `None` when the partition holds no reference events.
    pub short: Option<F1Report>,
    pub long: Option<F1Report>,
    pub all: F1Report,
}

/// Mean reference duration per class; classes without references are absent.
pub fn class_mean_durations(refs: &EventTable) -> BTreeMap<String, Real> {
    let mut acc: BTreeMap<String, (Real, usize)> = BTreeMap::new();
    for e in refs.values().flatten() {
        let s = acc.entry(e.label.clone()).or_default();
        s.0 += e.duration();
        s.1 += 1;
    }
    acc.into_iter().map(|(k, (sum, n))| (k, sum / n as Real)).collect()
}

fn restrict(t: &EventTable, keep: &[String]) -> EventTable {
    t.iter()
        .map(|(f, ev)| (f.clone(), ev.iter().filter(|e| keep.contains(&e.label)).cloned().collect()))
        .collect()
}

/// Classes with mean reference duration below `boundary` are short, the rest long.
pub fn short_long_report(refs: &EventTable, ests: &EventTable, classes: &[String], mc: &MatchConfig, boundary: Real) -> ShortLongReport {
    let means = class_mean_durations(refs);
    let (mut short_classes, mut long_classes) = (Vec::new(), Vec::new());
    for c in classes {
        match means.get(c) {
            Some(&m) if m < boundary => short_classes.push(c.clone()),
            Some(_) => long_classes.push(c.clone()),
            None => {}
        }
    }
    let part = |keep: &[String]| {
        (!keep.is_empty()).then(|| eb_f1(&restrict(refs, keep), &restrict(ests, keep), keep, mc))
    };
    ShortLongReport {
        boundary,
        short: part(&short_classes),
        long: part(&long_classes),
        all: eb_f1(refs, ests, classes, mc),
        short_classes,
        long_classes,
    }
}

pub fn fmt_opt(v: Option<Real>) -> String {
    v.map_or_else(|| "N/A".to_string(), |x| format!("{x:.6}"))
}

impl ShortLongReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("partition\tclasses\tEB-F1\n");
        let rows = [
            ("short", &self.short_classes, self.short.as_ref().map(|r| r.f1)),
            ("long", &self.long_classes, self.long.as_ref().map(|r| r.f1)),
        ];
        for (name, cls, f1) in rows {
            writeln!(out, "{name}\t{}\t{}", cls.join(","), fmt_opt(f1)).unwrap();
        }
        writeln!(out, "all\t*\t{:.6}", self.all.f1).unwrap();
        out
    }
}

/// Metrics of one evaluation run, serialized as the JSON summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub eb_f1: Real,
    pub precision: Real,
    pub recall: Real,
    pub macro_f1: Real,
    pub psds1: Real,
    pub median_onset_error: Option<Real>,
    pub short_f1: Option<Real>,
    pub long_f1: Option<Real>,
    pub per_class_f1: BTreeMap<String, Real>,
}

impl EvalSummary {
    pub fn new(f1: &F1Report, psds1: Real, sl: &ShortLongReport) -> Self {
        EvalSummary {
            eb_f1: f1.f1,
            precision: f1.precision,
            recall: f1.recall,
            macro_f1: f1.macro_f1,
            psds1,
            median_onset_error: super::ebf1::median(&f1.onset_errors),
            short_f1: sl.short.as_ref().map(|r| r.f1),
            long_f1: sl.long.as_ref().map(|r| r.f1),
            per_class_f1: f1.per_class.iter().map(|(k, c)| (k.clone(), c.f1())).collect(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tvalue\n");
        for (k, v) in [
            ("EB-F1", Some(self.eb_f1)),
            ("precision", Some(self.precision)),
            ("recall", Some(self.recall)),
            ("macro-F1", Some(self.macro_f1)),
            ("PSDS1", Some(self.psds1)),
            ("median-onset-error", self.median_onset_error),
            ("short-EB-F1", self.short_f1),
            ("long-EB-F1", self.long_f1),
        ] {
            writeln!(out, "{k}\t{}", fmt_opt(v)).unwrap();
        }
        for (c, f) in &self.per_class_f1 {
            writeln!(out, "F1[{c}]\t{f:.6}").unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }
}
