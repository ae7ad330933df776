use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventList};
use crate::tensor::{NdArray, Real};

/// Frame posteriors to events: threshold, median filter, run extraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub threshold: Real,
    /// Odd window length in output steps, shared by every class.
    pub median_window: usize,
    /// Optional per-class windows overriding `median_window`.
    #[serde(default)]
    pub class_windows: Option<Vec<usize>>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { threshold: 0.5, median_window: 7, class_windows: None }
    }
}

impl DecodeConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("decode.threshold {} must lie in (0, 1)", self.threshold)));
        }
        let check = |w: usize| {
            if w % 2 == 1 {
                Ok(())
            } else {
                Err(Error::Config(format!("median window {w} must be odd and at least 1")))
            }
        };
        check(self.median_window)?;
        if let Some(ws) = &self.class_windows {
            if ws.len() != classes {
                return Err(Error::Config(format!("{} per-class windows given for {classes} classes", ws.len())));
            }
            ws.iter().try_for_each(|&w| check(w))?;
        }
        Ok(())
    }

    pub fn window_for(&self, class: usize) -> usize {
        self.class_windows.as_ref().map_or(self.median_window, |w| w[class])
    }
}

/// Binary median filter with edge replication; `window` must be odd.
pub fn median_filter(x: &[bool], window: usize) -> Vec<bool> {
    let n = x.len();
    let h = window / 2;
    (0..n)
        .map(|i| {
            let ones = (0..window).filter(|&k| x[(i + k).saturating_sub(h).min(n - 1)]).count();
            2 * ones > window
        })
        .collect()
}

/// Maximal runs of `true` as inclusive `(start, end)` index pairs.
pub fn runs(x: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &v) in x.iter().enumerate() {
        match (v, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, x.len() - 1));
    }
    out
}

/// Decodes `[L, K]` frame probabilities into events sorted by onset then class.
pub fn decode_events(probs: &NdArray, classes: &[String], seconds_per_step: Real, dc: &DecodeConfig) -> Result<EventList> {
    if probs.ndim() != 2 || probs.shape()[0] == 0 || probs.shape()[1] != classes.len() {
        return Err(Error::Dimension(format!(
            "decode expects [L, {}] probabilities, got {:?}",
            classes.len(),
            probs.shape()
        )));
    }
    let (l, k) = (probs.shape()[0], probs.shape()[1]);
    let mut events = Vec::new();
    for (c, name) in classes.iter().enumerate() {
        let col: Vec<bool> = (0..l).map(|t| probs.data()[t * k + c] > dc.threshold).collect();
        for (s, e) in runs(&median_filter(&col, dc.window_for(c))) {
            events.push(Event::new(name.clone(), s as Real * seconds_per_step, (e + 1) as Real * seconds_per_step));
        }
    }
    events.sort_by(|a, b| a.onset.total_cmp(&b.onset).then_with(|| a.label.cmp(&b.label)));
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(s: &[u8]) -> Vec<bool> {
        s.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn hand_computed_median() {
        let x = bits(&[0, 1, 0, 0, 1, 1, 1, 0]);
        assert_eq!(median_filter(&x, 3), bits(&[0, 0, 0, 0, 1, 1, 1, 0]));
        assert_eq!(runs(&median_filter(&x, 3)), vec![(4, 6)]);
    }

    #[test]
    fn single_event_from_column() {
        let classes = vec!["a".to_string()];
        let p = NdArray::new(vec![8, 1], vec![0.0, 0.9, 0.0, 0.0, 0.9, 0.9, 0.9, 0.0]).unwrap();
        let dc = DecodeConfig { median_window: 3, ..DecodeConfig::default() };
        let ev = decode_events(&p, &classes, 0.1, &dc).unwrap();
        assert_eq!(ev.len(), 1);
        assert!((ev[0].onset - 0.4).abs() < 1e-12 && (ev[0].offset - 0.7).abs() < 1e-12);
    }

    #[test]
    fn zeros_and_ones() {
        let classes = vec!["a".to_string()];
        let dc = DecodeConfig::default();
        assert!(decode_events(&NdArray::zeros(&[20, 1]), &classes, 0.1, &dc).unwrap().is_empty());
        let ev = decode_events(&NdArray::ones(&[20, 1]), &classes, 0.1, &dc).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].onset, 0.0);
        assert!((ev[0].offset - 2.0).abs() < 1e-12);
    }

    #[test]
    fn even_window_rejected() {
        let dc = DecodeConfig { median_window: 4, ..DecodeConfig::default() };
        assert!(dc.validate(1).is_err());
        assert!(DecodeConfig { threshold: 1.0, ..DecodeConfig::default() }.validate(1).is_err());
    }
}
