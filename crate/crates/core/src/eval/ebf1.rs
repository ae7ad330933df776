use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventTable};
use crate::tensor::Real;

/// Tolerances for pairing an estimate with a reference event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub onset_collar: Real,
    pub offset_collar: Real,
    /// Offset collar as a fraction of the reference duration, when larger.
    pub offset_collar_rate: Real,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { onset_collar: 0.2, offset_collar: 0.2, offset_collar_rate: 0.2 }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.onset_collar > 0.0 && self.offset_collar > 0.0 && self.offset_collar_rate >= 0.0) {
            return Err(Error::Config("match collars must be positive".into()));
        }
        Ok(())
    }

    pub fn matches(&self, r: &Event, e: &Event) -> bool {
        let off = self.offset_collar.max(self.offset_collar_rate * r.duration());
        r.label == e.label && (r.onset - e.onset).abs() <= self.onset_collar + 1e-9 && (r.offset - e.offset).abs() <= off + 1e-9
    }
}

/// Maximum bipartite matching (augmenting paths). `adj[r][e]` marks allowed
/// pairs. Returns `pair[r] = Some(e)`.
pub fn max_matching(adj: &[Vec<bool>], n_est: usize) -> Vec<Option<usize>> {
    fn augment(r: usize, adj: &[Vec<bool>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for e in 0..seen.len() {
            if adj[r][e] && !seen[e] {
                seen[e] = true;
                if owner[e].is_none_or(|o| augment(o, adj, seen, owner)) {
                    owner[e] = Some(r);
                    return true;
                }
            }
        }
        false
    }
    let mut owner: Vec<Option<usize>> = vec![None; n_est];
    for r in 0..adj.len() {
        let mut seen = vec![false; n_est];
        augment(r, adj, &mut seen, &mut owner);
    }
    let mut pair = vec![None; adj.len()];
    for (e, o) in owner.iter().enumerate() {
        if let Some(r) = o {
            pair[*r] = Some(e);
        }
    }
    pair
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn precision(&self) -> Real {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Real {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> Real {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

fn ratio(a: usize, b: usize) -> Real {
    if b == 0 {
        0.0
    } else {
        a as Real / b as Real
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct F1Report {
    pub counts: Counts,
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
    pub per_class: BTreeMap<String, Counts>,
    /// Mean F1 over classes that have reference or estimated events.
    pub macro_f1: Real,
    /// `|onset difference|` of every matched pair, in corpus order.
    pub onset_errors: Vec<Real>,
}

impl F1Report {
    pub fn class_f1(&self, class: &str) -> Real {
        self.per_class.get(class).map_or(0.0, Counts::f1)
    }
}

/// Event-based P/R/F1 with one-to-one maximum matching per clip and class.
/// Estimated classes outside `classes` count as false positives.
pub fn eb_f1(refs: &EventTable, ests: &EventTable, classes: &[String], mc: &MatchConfig) -> F1Report {
    let known: BTreeSet<&str> = classes.iter().map(String::as_str).collect();
    let mut per_class: BTreeMap<String, Counts> = classes.iter().map(|c| (c.clone(), Counts::default())).collect();
    let mut onset_errors = Vec::new();
    let mut unknown = BTreeSet::new();
    let files: BTreeSet<&String> = refs.keys().chain(ests.keys()).collect();
    let empty = Vec::new();
    for file in files {
        let r_all = refs.get(file).unwrap_or(&empty);
        let e_all = ests.get(file).unwrap_or(&empty);
        for e in e_all.iter().filter(|e| !known.contains(e.label.as_str())) {
            if unknown.insert(e.label.clone()) {
                log::warn!("estimated class `{}` is not in the vocabulary; counted as false positive", e.label);
            }
            per_class.entry(e.label.clone()).or_default().fp += 1;
        }
        for class in classes {
            let r: Vec<&Event> = r_all.iter().filter(|e| &e.label == class).collect();
            let e: Vec<&Event> = e_all.iter().filter(|e| &e.label == class).collect();
            if r.is_empty() && e.is_empty() {
                continue;
            }
            let adj: Vec<Vec<bool>> = r.iter().map(|ri| e.iter().map(|ei| mc.matches(ri, ei)).collect()).collect();
            let pair = max_matching(&adj, e.len());
            let tp = pair.iter().flatten().count();
            for (ri, pe) in pair.iter().enumerate() {
                if let Some(ei) = pe {
                    onset_errors.push((r[ri].onset - e[*ei].onset).abs());
                }
            }
            per_class.get_mut(class).unwrap().add(Counts { tp, fp: e.len() - tp, fn_: r.len() - tp });
        }
    }
    let mut counts = Counts::default();
    per_class.values().for_each(|c| counts.add(*c));
    let active: Vec<Real> = per_class.values().filter(|c| !c.is_empty()).map(Counts::f1).collect();
    let macro_f1 = if active.is_empty() { 0.0 } else { active.iter().sum::<Real>() / active.len() as Real };
    F1Report {
        counts,
        precision: counts.precision(),
        recall: counts.recall(),
        f1: counts.f1(),
        per_class,
        macro_f1,
        onset_errors,
    }
}

/// Median of a sample (mean of the two middle values for even sizes).
pub fn median(values: &[Real]) -> Option<Real> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(Real::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
